//! The learnable resizing operator.
//!
//! A resizer divides its input into an `H_out x W_out` grid with
//! `H_out = round(max(H_in * r_h, 1.5))`, places four query points at
//! `p ± δ` around every cell center `p` (with `δ = (1/4) * (2 / H_out)` per
//! axis), samples them bilinearly and keeps the elementwise maximum.
//!
//! The scale factor is learned through `α = 1 / r`. Output sizes go through
//! straight-through rounding, so the forward pass sees integers while the
//! backward pass differentiates the continuous product `H_in * r_h`.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Lower bound applied to `n_in * r` before rounding; keeps every side ≥ 2.
pub const MIN_EXTENT: f64 = 1.5;

/// Default bounds for α after each optimizer step.
pub const ALPHA_MIN: f64 = 1e-3;
pub const ALPHA_MAX: f64 = 1e3;

/// Learnable per-axis scale, stored as `α = 1 / r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleParam {
    pub alpha_h: f64,
    pub alpha_w: f64,
}

impl ScaleParam {
    pub fn new(alpha_h: f64, alpha_w: f64) -> Result<Self> {
        for (name, a) in [("alpha_h", alpha_h), ("alpha_w", alpha_w)] {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive and finite, got {a}")));
            }
        }
        Ok(Self { alpha_h, alpha_w })
    }

    pub fn from_ratio(r_h: f64, r_w: f64) -> Result<Self> {
        if !(r_h > 0.0 && r_w > 0.0) {
            return Err(Error::invalid(format!("scale factors must be positive, got ({r_h}, {r_w})")));
        }
        Self::new(1.0 / r_h, 1.0 / r_w)
    }

    /// `(r_h, r_w)`.
    pub fn ratio(&self) -> (f64, f64) {
        (1.0 / self.alpha_h, 1.0 / self.alpha_w)
    }

    pub fn clamp(&mut self, min: f64, max: f64) {
        self.alpha_h = self.alpha_h.clamp(min, max);
        self.alpha_w = self.alpha_w.clamp(min, max);
    }

    /// Puts α on the graph as trainable leaves and derives `r = 1/α`.
    pub fn register(&self, g: &mut Graph) -> ScaleVars {
        let alpha_h = g.param(Tensor::scalar(self.alpha_h));
        let alpha_w = g.param(Tensor::scalar(self.alpha_w));
        let r_h = g.recip(alpha_h);
        let r_w = g.recip(alpha_w);
        ScaleVars {
            alpha_h,
            alpha_w,
            r_h,
            r_w,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ScaleVars {
    pub alpha_h: Var,
    pub alpha_w: Var,
    pub r_h: Var,
    pub r_w: Var,
}

/// Integer output extent for an input extent and scale factor.
pub fn discrete_extent(n_in: usize, r: f64) -> usize {
    (n_in as f64 * r).max(MIN_EXTENT).round() as usize
}

/// Output extent for a constant input extent. Returns the integer size and
/// its straight-through value, whose gradient w.r.t. `r` is `n_in` outside
/// the clamp region and zero inside it.
pub fn compute_output_size(g: &mut Graph, n_in: usize, r: Var) -> Result<(usize, Var)> {
    if n_in == 0 {
        return Err(Error::invalid("input extent must be at least 1"));
    }
    let n = g.scalar(n_in as f64);
    resize_extent(g, n, r)
}

/// Like [`compute_output_size`] but with the input extent itself a graph
/// value, so gradients also flow into upstream resizers.
pub fn resize_extent(g: &mut Graph, n_in: Var, r: Var) -> Result<(usize, Var)> {
    let rv = g.item(r);
    if !(rv > 0.0 && rv.is_finite()) {
        return Err(Error::invalid(format!("scale factor must be positive, got {rv}")));
    }
    let product = g.mul(n_in, r)?;
    let floored = g.clamp_min(product, MIN_EXTENT);
    let ste = g.round_ste(floored);
    Ok((g.item(ste) as usize, ste))
}

/// Grid geometry of one resizer application.
#[derive(Clone, Debug)]
pub struct ResizeGeometry {
    pub h_out: usize,
    pub w_out: usize,
    pub h_ste: Var,
    pub w_ste: Var,
    pub delta_h: Var,
    pub delta_w: Var,
    /// Normalized row centers `-1 + (2i+1) / H_out`.
    pub centers_h: Var,
    pub centers_w: Var,
}

fn axis_geometry(g: &mut Graph, extent: Var, count: usize) -> Result<(Var, Var)> {
    let inv = g.recip(extent);
    let delta = g.scale(inv, 0.5);
    let odd: Vec<f64> = (0..count).map(|i| (2 * i + 1) as f64).collect();
    let odd = g.constant(Tensor::new(&[count], odd)?);
    let spaced = g.mul(odd, inv)?;
    let centers = g.add_scalar(spaced, -1.0);
    Ok((delta, centers))
}

/// Geometry for input extents given as graph values (constants for the
/// network input, straight-through sizes downstream of another resizer).
pub fn build_geometry(g: &mut Graph, h_in: Var, w_in: Var, r_h: Var, r_w: Var) -> Result<ResizeGeometry> {
    let (h_out, h_ste) = resize_extent(g, h_in, r_h)?;
    let (w_out, w_ste) = resize_extent(g, w_in, r_w)?;
    let (delta_h, centers_h) = axis_geometry(g, h_ste, h_out)?;
    let (delta_w, centers_w) = axis_geometry(g, w_ste, w_out)?;
    Ok(ResizeGeometry {
        h_out,
        w_out,
        h_ste,
        w_ste,
        delta_h,
        delta_w,
        centers_h,
        centers_w,
    })
}

/// Resizes `x: [B, C, H_in, W_in]` whose spatial extents are carried by
/// `h_in`/`w_in` (their values must match the tensor).
pub fn resize(g: &mut Graph, x: Var, h_in: Var, w_in: Var, r_h: Var, r_w: Var) -> Result<(Var, ResizeGeometry)> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(Error::shape("dynopool", format!("input {xs:?} is not [B, C, H, W]")));
    }
    if g.item(h_in) != xs[2] as f64 || g.item(w_in) != xs[3] as f64 {
        return Err(Error::shape(
            "dynopool",
            format!("extent ({}, {}) disagrees with input {xs:?}", g.item(h_in), g.item(w_in)),
        ));
    }
    let geom = build_geometry(g, h_in, w_in, r_h, r_w)?;
    let coords = g.query_points(geom.centers_h, geom.centers_w, geom.delta_h, geom.delta_w)?;
    let sampled = g.bilinear_sample(x, coords)?;
    let cells = geom.h_out * geom.w_out;
    let grouped = g.reshape(sampled, &[xs[0], xs[1], cells, 4])?;
    let pooled = g.max_over_axis(grouped, 3)?;
    let out = g.reshape(pooled, &[xs[0], xs[1], geom.h_out, geom.w_out])?;
    Ok((out, geom))
}

/// Result of [`dynopool_forward`].
#[derive(Clone, Debug)]
pub struct DynoPoolOutput {
    pub output: Var,
    pub geometry: ResizeGeometry,
    pub scale: ScaleVars,
}

/// Applies one resizer with its own trainable α to an input of static size.
pub fn dynopool_forward(g: &mut Graph, x: Var, scale: &ScaleParam) -> Result<DynoPoolOutput> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(Error::shape("dynopool", format!("input {xs:?} is not [B, C, H, W]")));
    }
    let vars = scale.register(g);
    let h_in = g.scalar(xs[2] as f64);
    let w_in = g.scalar(xs[3] as f64);
    let (output, geometry) = resize(g, x, h_in, w_in, vars.r_h, vars.r_w)?;
    Ok(DynoPoolOutput {
        output,
        geometry,
        scale: vars,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x: Tensor, r: (f64, f64)) -> (Graph, DynoPoolOutput) {
        let mut g = Graph::new();
        let xv = g.param(x);
        let out = dynopool_forward(&mut g, xv, &ScaleParam::from_ratio(r.0, r.1).unwrap()).unwrap();
        (g, out)
    }

    #[test]
    fn output_size_examples() {
        let mut g = Graph::new();
        for (n, r, want) in [(32, 0.5, 16), (2, 0.5, 2), (7, 0.5, 4)] {
            let rv = g.scalar(r);
            let (d, ste) = compute_output_size(&mut g, n, rv).unwrap();
            assert_eq!(d, want, "n={n} r={r}");
            assert_eq!(g.item(ste), want as f64);
        }
    }

    #[test]
    fn nonpositive_ratio_rejected() {
        let mut g = Graph::new();
        let r = g.scalar(0.0);
        assert!(compute_output_size(&mut g, 8, r).is_err());
        assert!(ScaleParam::from_ratio(-1.0, 1.0).is_err());
    }

    #[test]
    fn geometry_examples() {
        let mut g = Graph::new();
        let h = g.scalar(16.0);
        let w = g.scalar(16.0);
        let one = g.scalar(1.0);
        let geom = build_geometry(&mut g, h, w, one, one).unwrap();
        assert_eq!(geom.h_out, 16);
        assert_eq!(g.item(geom.delta_h), 0.03125);

        let h = g.scalar(4.0);
        let half = g.scalar(0.5);
        let geom = build_geometry(&mut g, h, h, half, half).unwrap();
        assert_eq!(geom.h_out, 2);
        assert_eq!(g.value(geom.centers_h).data(), &[-0.5, 0.5]);

        let e = g.scalar(8.0);
        let geom = build_geometry(&mut g, e, e, half, one).unwrap();
        assert_eq!((geom.h_out, geom.w_out), (4, 8));
        assert_eq!(g.item(geom.delta_h), 0.125);
        assert_eq!(g.item(geom.delta_w), 0.0625);
    }

    #[test]
    fn constant_input_stays_constant() {
        let x = Tensor::full(&[2, 3, 7, 5], 0.37).unwrap();
        for r in [(0.5, 0.5), (1.7, 0.3), (2.0, 2.0)] {
            let (g, out) = run(x.clone(), r);
            let v = g.value(out.output);
            assert!(v.data().iter().all(|&y| (y - 0.37).abs() < 1e-15));
        }
    }

    #[test]
    fn row_ramp_halving() {
        // Query points land exactly on input pixel centers: rows {0, 1} and {2, 3}.
        let data: Vec<f64> = (0..4).flat_map(|i| [i as f64; 4]).collect();
        let (g, out) = run(Tensor::new(&[1, 1, 4, 4], data).unwrap(), (0.5, 0.5));
        assert_eq!(g.value(out.output).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(out.output).data(), &[1.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn unit_ratio_keeps_shape() {
        let x = Tensor::new(&[1, 2, 5, 3], (0..30).map(|v| v as f64 * 0.1).collect()).unwrap();
        let (g, out) = run(x, (1.0, 1.0));
        assert_eq!(g.value(out.output).shape(), &[1, 2, 5, 3]);
    }

    #[test]
    fn size_gradient_is_input_extent() {
        let mut g = Graph::new();
        let r = g.param(Tensor::scalar(0.7));
        let (_, ste) = compute_output_size(&mut g, 11, r).unwrap();
        g.backward(ste).unwrap();
        assert_eq!(g.grad(r).unwrap().item(), 11.0);

        let mut g = Graph::new();
        let r = g.param(Tensor::scalar(0.1));
        let (d, ste) = compute_output_size(&mut g, 11, r).unwrap();
        assert_eq!(d, 2);
        g.backward(ste).unwrap();
        assert_eq!(g.grad(r).unwrap().item(), 0.0);
    }

    #[test]
    fn more_cells_means_negative_alpha_gradient() {
        // Loss = number of output cells (through the straight-through sizes).
        let mut g = Graph::new();
        let vars = ScaleParam::from_ratio(0.5, 0.5).unwrap().register(&mut g);
        let (_, h) = compute_output_size(&mut g, 16, vars.r_h).unwrap();
        let (_, w) = compute_output_size(&mut g, 16, vars.r_w).unwrap();
        let cells = g.mul(h, w).unwrap();
        g.backward(cells).unwrap();
        assert!(g.grad(vars.alpha_h).unwrap().item() < 0.0);
        assert!(g.grad(vars.alpha_w).unwrap().item() < 0.0);
    }

    #[test]
    fn clamp_keeps_alpha_in_bounds() {
        let mut s = ScaleParam::new(5e-4, 2e3).unwrap();
        s.clamp(ALPHA_MIN, ALPHA_MAX);
        assert_eq!(s, ScaleParam::new(ALPHA_MIN, ALPHA_MAX).unwrap());
    }
}
