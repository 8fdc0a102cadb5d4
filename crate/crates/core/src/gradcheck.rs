//! Finite-difference verification of every differentiable path.
//!
//! Each check draws random small inputs, evaluates the analytic gradient of
//! a random weighted sum of the op's outputs, and compares it against central
//! differences with step `1e-3`. An element passes when its absolute error is
//! at most `1e-4` or its relative error at most `1e-2`.
//!
//! The resizer and GMACs checks compare against a standalone evaluation of
//! the straight-through surrogate (discrete grid sizes frozen, continuous
//! extents free). Draws whose ±step perturbation would change a discrete
//! choice (a sampling stencil, a max winner, a clamp) are redrawn, since the
//! derivative is one-sided there.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::complexity::gmacs_loss;
use crate::dynopool::{self, ScaleParam, MIN_EXTENT};
use crate::error::Result;
use crate::network::{Model, NetworkSpec};
use crate::tensor::{Graph, Tensor, Var};

pub const STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-2;
pub const ABS_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub trials: usize,
    /// Draws discarded because they straddled a non-smooth point.
    pub redrawn: usize,
    pub compared: usize,
    pub max_abs_err: f64,
    /// Largest relative error among elements outside the absolute tolerance.
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Random configurations per primitive check.
    pub primitive_trials: usize,
    /// Random configurations for the resizer and GMACs checks.
    pub alpha_trials: usize,
    /// Flip the sign of analytic α gradients (fault-injection fixture).
    pub flip_alpha_sign: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            primitive_trials: 100,
            alpha_trials: 50,
            flip_alpha_sign: false,
        }
    }
}

#[derive(Default)]
struct Tally {
    trials: usize,
    redrawn: usize,
    compared: usize,
    max_abs: f64,
    max_rel: f64,
    failed: bool,
}

impl Tally {
    fn compare(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        self.compared += 1;
        self.max_abs = self.max_abs.max(abs);
        // Entries with both gradients near zero report relative error against ABS_TOL.
        let rel = abs / analytic.abs().max(numeric.abs()).max(ABS_TOL);
        self.max_rel = self.max_rel.max(rel);
        if abs > ABS_TOL && rel > REL_TOL {
            self.failed = true;
        }
        if !abs.is_finite() {
            self.failed = true;
        }
    }

    fn report(self, name: &'static str) -> CheckReport {
        CheckReport {
            name,
            trials: self.trials,
            redrawn: self.redrawn,
            compared: self.compared,
            max_abs_err: self.max_abs,
            max_rel_err: self.max_rel,
            passed: !self.failed && self.trials > 0,
        }
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rand_vec(rng, n, lo, hi)).expect("valid shape")
}

/// Builds a graph from `inputs`, returns the scalar objective.
type Builder<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Compares analytic and central-difference gradients of `build` w.r.t. every
/// input (or a random subset of at most `max_coords` entries per input).
fn check_graph(tally: &mut Tally, rng: &mut ChaCha8Rng, inputs: &[Tensor], build: &Builder, max_coords: usize) -> Result<()> {
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.item(out))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    for (i, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = g
            .grad(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut coords: Vec<usize> = (0..input.numel()).collect();
        if coords.len() > max_coords {
            for k in 0..max_coords {
                let j = rng.gen_range(k..coords.len());
                coords.swap(k, j);
            }
            coords.truncate(max_coords);
        }
        for j in coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * STEP);
            tally.compare(analytic[j], numeric);
        }
    }
    Ok(())
}

/// `Σ w_i y_i` with fixed random weights.
fn weighted_sum(g: &mut Graph, y: Var, weights: &[f64]) -> Result<Var> {
    let w = g.constant(Tensor::new(g.shape(y), weights.to_vec())?);
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

fn away_from(rng: &mut ChaCha8Rng, lo: f64, hi: f64, kinks: &[f64], margin: f64) -> f64 {
    loop {
        let v = rng.gen_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > margin) {
            return v;
        }
    }
}

fn check_primitive(
    name: &'static str,
    trials: usize,
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, Vec<f64>),
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<CheckReport> {
    let mut tally = Tally::default();
    for _ in 0..trials {
        let (inputs, weights) = draw(rng);
        let objective = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let y = build(g, v)?;
            weighted_sum(g, y, &weights)
        };
        check_graph(&mut tally, rng, &inputs, &objective, 24)?;
        tally.trials += 1;
    }
    Ok(tally.report(name))
}

fn relu_check(trials: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    check_primitive(
        "relu",
        trials,
        rng,
        |rng| {
            let n = rng.gen_range(1..12);
            let x: Vec<f64> = (0..n).map(|_| away_from(rng, -2.0, 2.0, &[0.0], 0.01)).collect();
            (vec![Tensor::new(&[n], x).expect("shape")], rand_vec(rng, n, -1.0, 1.0))
        },
        |g, v| Ok(g.relu(v[0])),
    )
}

fn add_mul_check(trials: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    check_primitive(
        "add_mul_broadcast",
        trials,
        rng,
        |rng| {
            let (m, n) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let a = rand_tensor(rng, &[m, n], -1.0, 1.0);
            let b = rand_tensor(rng, &[n], -1.0, 1.0);
            let c = rand_tensor(rng, &[m, n], -1.0, 1.0);
            (vec![a, b, c], rand_vec(rng, m * n, -1.0, 1.0))
        },
        |g, v| {
            let s = g.add(v[0], v[1])?;
            let p = g.mul(s, v[2])?;
            let q = g.mul(p, v[1])?;
            g.sub(q, v[0])
        },
    )
}

fn matmul_check(trials: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    check_primitive(
        "matmul",
        trials,
        rng,
        |rng| {
            let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
            let a = rand_tensor(rng, &[m, k], -1.0, 1.0);
            let b = rand_tensor(rng, &[k, n], -1.0, 1.0);
            (vec![a, b], rand_vec(rng, m * n, -1.0, 1.0))
        },
        |g, v| g.matmul(v[0], v[1]),
    )
}

fn max_check(trials: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    check_primitive(
        "max_over_axis",
        trials,
        rng,
        |rng| {
            let (a, b, c) = (rng.gen_range(1..4), rng.gen_range(2..5), rng.gen_range(1..4));
            // Distinct values on a coarse lattice keep winners stable under ±step.
            let mut vals: Vec<f64> = (0..a * b * c).map(|i| i as f64 * 0.05).collect();
            for i in (1..vals.len()).rev() {
                let j = rng.gen_range(0..=i);
                vals.swap(i, j);
            }
            let x = Tensor::new(&[a, b, c], vals).expect("shape");
            (vec![x], rand_vec(rng, a * c, -1.0, 1.0))
        },
        |g, v| g.max_over_axis(v[0], 1),
    )
}

fn cross_entropy_check(trials: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let mut labels_per_trial = Vec::new();
    let mut local = ChaCha8Rng::seed_from_u64(rng.gen());
    for _ in 0..trials {
        let b = local.gen_range(1..5);
        let k = local.gen_range(2..6);
        let labels: Vec<usize> = (0..b).map(|_| local.gen_range(0..k)).collect();
        labels_per_trial.push((b, k, labels));
    }
    let mut tally = Tally::default();
    for (b, k, labels) in labels_per_trial {
        let logits = rand_tensor(rng, &[b, k], -2.0, 2.0);
        let build = |g: &mut Graph, v: &[Var]| g.softmax_cross_entropy(v[0], &labels);
        check_graph(&mut tally, rng, &[logits], &build, 24)?;
        tally.trials += 1;
    }
    Ok(tally.report("softmax_cross_entropy"))
}

fn conv_check(trials: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    check_primitive(
        "conv2d",
        trials,
        rng,
        |rng| {
            let (b, ci, co) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
            let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
            let k = if rng.gen_bool(0.7) { 3 } else { 1 };
            let x = rand_tensor(rng, &[b, ci, h, w], -1.0, 1.0);
            let wt = rand_tensor(rng, &[co, ci, k, k], -1.0, 1.0);
            let bias = rand_tensor(rng, &[co], -1.0, 1.0);
            (vec![x, wt, bias], rand_vec(rng, b * co * h * w, -1.0, 1.0))
        },
        |g, v| {
            let k = g.shape(v[1])[2];
            g.conv2d(v[0], v[1], v[2], k / 2)
        },
    )
}

/// Normalized coordinate whose fractional pixel position stays clear of
/// stencil boundaries and of the replicated border.
fn smooth_coord(rng: &mut ChaCha8Rng, n: usize) -> f64 {
    let margin = 0.02;
    let u = loop {
        if n == 1 {
            // Entirely in the replicated region; any interior point is flat.
            break rng.gen_range(-0.4..0.4);
        }
        let u: f64 = rng.gen_range(0.0..(n - 1) as f64);
        let f = u - u.floor();
        if f > margin && f < 1.0 - margin {
            break u;
        }
    };
    if n == 1 {
        return u;
    }
    (2.0 * u + 1.0) / n as f64 - 1.0
}

fn bilinear_draw(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<f64>) {
    let (b, c) = (rng.gen_range(1..3), rng.gen_range(1..3));
    let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
    let m = rng.gen_range(1..6);
    let x = rand_tensor(rng, &[b, c, h, w], -1.0, 1.0);
    let coords: Vec<f64> = (0..m).flat_map(|_| [smooth_coord(rng, h), smooth_coord(rng, w)]).collect();
    let coords = Tensor::new(&[m, 2], coords).expect("shape");
    (vec![x, coords], rand_vec(rng, b * c * m, -1.0, 1.0))
}

fn bilinear_value_check(trials: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let mut tally = Tally::default();
    for _ in 0..trials {
        let (inputs, weights) = bilinear_draw(rng);
        let coords = inputs[1].clone();
        let build = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let c = g.constant(coords.clone());
            let y = g.bilinear_sample(v[0], c)?;
            weighted_sum(g, y, &weights)
        };
        check_graph(&mut tally, rng, &inputs[..1], &build, 24)?;
        tally.trials += 1;
    }
    Ok(tally.report("bilinear_sample.values"))
}

fn bilinear_coord_check(trials: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    let mut tally = Tally::default();
    for _ in 0..trials {
        let (inputs, weights) = bilinear_draw(rng);
        let x = inputs[0].clone();
        let build = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let xv = g.constant(x.clone());
            let y = g.bilinear_sample(xv, v[0])?;
            weighted_sum(g, y, &weights)
        };
        check_graph(&mut tally, rng, &inputs[1..], &build, 24)?;
        tally.trials += 1;
    }
    Ok(tally.report("bilinear_sample.coords"))
}

fn pool_check(trials: usize, rng: &mut ChaCha8Rng) -> Result<CheckReport> {
    check_primitive(
        "global_avg_pool",
        trials,
        rng,
        |rng| {
            let (b, c, h, w) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5));
            (vec![rand_tensor(rng, &[b, c, h, w], -1.0, 1.0)], rand_vec(rng, b * c, -1.0, 1.0))
        },
        |g, v| g.global_avg_pool(v[0]),
    )
}

fn extent_check(trials: usize, rng: &mut ChaCha8Rng, flip: bool) -> Result<CheckReport> {
    // Surrogate extent n/α (clamped at 1.5) against its straight-through
    // gradient; rounding is frozen by construction of the surrogate.
    let mut tally = Tally::default();
    while tally.trials < trials {
        let n = rng.gen_range(1..40);
        let alpha = rng.gen_range(0.3..4.0);
        let c = n as f64 / alpha;
        if ((n as f64 / (alpha + STEP)) - MIN_EXTENT).abs() < 1e-9
            || (c - MIN_EXTENT).abs() < n as f64 * STEP
        {
            tally.redrawn += 1;
            continue;
        }
        let mut g = Graph::new();
        let scale = ScaleParam::new(alpha, alpha)?.register(&mut g);
        let (_, ste) = dynopool::compute_output_size(&mut g, n, scale.r_h)?;
        g.backward(ste)?;
        let mut analytic = g.grad(scale.alpha_h).map(|t| t.item()).unwrap_or(0.0);
        if flip {
            analytic = -analytic;
        }
        let surrogate = |a: f64| (n as f64 / a).max(MIN_EXTENT);
        let numeric = (surrogate(alpha + STEP) - surrogate(alpha - STEP)) / (2.0 * STEP);
        tally.compare(analytic, numeric);
        tally.trials += 1;
    }
    Ok(tally.report("output_size.ste"))
}

/// Standalone evaluation of a resizer on one plane for the straight-through
/// surrogate: `cells` rows/cols are fixed, the continuous extents set the
/// centers and displacements. Also returns the discrete choices made (for
/// kink detection).
fn surrogate_resize(
    plane: &[f64],
    h: usize,
    w: usize,
    cells: (usize, usize),
    extent: (f64, f64),
) -> (Vec<f64>, Vec<(usize, usize, bool, bool, usize)>) {
    let axis = |coord: f64, n: usize| -> (usize, usize, f64, bool) {
        let u = ((coord + 1.0) * n as f64 - 1.0) / 2.0;
        if u < 0.0 {
            return (0, 0, 0.0, true);
        }
        if u > (n - 1) as f64 {
            return (n - 1, n - 1, 0.0, true);
        }
        let lo = u.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, if lo == hi { 0.0 } else { u - lo as f64 }, false)
    };
    let mut out = Vec::new();
    let mut choices = Vec::new();
    for i in 0..cells.0 {
        let ph = -1.0 + (2 * i + 1) as f64 / extent.0;
        let dh = 0.25 * 2.0 / extent.0;
        for j in 0..cells.1 {
            let pw = -1.0 + (2 * j + 1) as f64 / extent.1;
            let dw = 0.25 * 2.0 / extent.1;
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (q, (sh, sw)) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)].into_iter().enumerate() {
                let (r0, r1, fr, cr) = axis(ph + sh * dh, h);
                let (c0, c1, fc, cc) = axis(pw + sw * dw, w);
                let top = plane[r0 * w + c0] * (1.0 - fc) + plane[r0 * w + c1] * fc;
                let bot = plane[r1 * w + c0] * (1.0 - fc) + plane[r1 * w + c1] * fc;
                let v = top * (1.0 - fr) + bot * fr;
                choices.push((r0, c0, cr, cc, 0));
                if v > best {
                    best = v;
                    arg = q;
                }
            }
            choices.push((0, 0, false, false, arg));
            out.push(best);
        }
    }
    (out, choices)
}

fn dynopool_alpha_check(trials: usize, rng: &mut ChaCha8Rng, flip: bool) -> Result<CheckReport> {
    let mut tally = Tally::default();
    while tally.trials < trials {
        let (h, w) = (rng.gen_range(2..13), rng.gen_range(2..13));
        let c = rng.gen_range(1..3);
        let (rh, rw) = (rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0));
        let alpha = (1.0 / rh, 1.0 / rw);
        let x = rand_tensor(rng, &[1, c, h, w], -1.0, 1.0);
        let cont = |n: usize, a: f64| (n as f64 / a).max(MIN_EXTENT);
        let (c_h0, c_w0) = (cont(h, alpha.0), cont(w, alpha.1));
        if (c_h0 - MIN_EXTENT).abs() < 0.05 || (c_w0 - MIN_EXTENT).abs() < 0.05 {
            tally.redrawn += 1;
            continue;
        }
        let cells = (c_h0.round() as usize, c_w0.round() as usize);
        let extent = |a: (f64, f64)| (cells.0 as f64 + cont(h, a.0) - c_h0, cells.1 as f64 + cont(w, a.1) - c_w0);
        let weights = rand_vec(rng, c * cells.0 * cells.1, -1.0, 1.0);
        let objective = |a: (f64, f64)| -> (f64, Vec<Vec<(usize, usize, bool, bool, usize)>>) {
            let mut total = 0.0;
            let mut all = Vec::new();
            for (ch, plane) in x.data().chunks(h * w).enumerate() {
                let (vals, choices) = surrogate_resize(plane, h, w, cells, extent(a));
                let wts = &weights[ch * vals.len()..(ch + 1) * vals.len()];
                total += vals.iter().zip(wts).map(|(v, k)| v * k).sum::<f64>();
                all.push(choices);
            }
            (total, all)
        };
        let (_, base) = objective(alpha);
        let probes = [
            (alpha.0 + STEP, alpha.1),
            (alpha.0 - STEP, alpha.1),
            (alpha.0, alpha.1 + STEP),
            (alpha.0, alpha.1 - STEP),
        ];
        let evals: Vec<_> = probes.iter().map(|&a| objective(a)).collect();
        if evals.iter().any(|(_, ch)| *ch != base) {
            tally.redrawn += 1;
            continue;
        }
        let numeric = [
            (evals[0].0 - evals[1].0) / (2.0 * STEP),
            (evals[2].0 - evals[3].0) / (2.0 * STEP),
        ];

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = dynopool::dynopool_forward(&mut g, xv, &ScaleParam::new(alpha.0, alpha.1)?)?;
        debug_assert_eq!((out.geometry.h_out, out.geometry.w_out), cells);
        let loss = weighted_sum(&mut g, out.output, &weights)?;
        g.backward(loss)?;
        let sign = if flip { -1.0 } else { 1.0 };
        let analytic = [
            sign * g.grad(out.scale.alpha_h).map(|t| t.item()).unwrap_or(0.0),
            sign * g.grad(out.scale.alpha_w).map(|t| t.item()).unwrap_or(0.0),
        ];
        tally.compare(analytic[0], numeric[0]);
        tally.compare(analytic[1], numeric[1]);
        tally.trials += 1;
    }
    Ok(tally.report("dynopool.alpha"))
}

fn gmacs_alpha_check(trials: usize, rng: &mut ChaCha8Rng, flip: bool) -> Result<CheckReport> {
    let mut tally = Tally::default();
    while tally.trials < trials {
        let (h0, w0) = (rng.gen_range(6..20), rng.gen_range(6..20));
        let widths: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(1..4)).collect();
        let spec = NetworkSpec::blocks((1, h0, w0), &widths, 3, 0.5);
        let mut model = Model::init(spec, rng.gen())?;
        for s in model.scales.iter_mut() {
            *s = ScaleParam::from_ratio(rng.gen_range(0.3..1.5), rng.gen_range(0.3..1.5))?;
        }
        let alphas: Vec<(f64, f64)> = model.scales.iter().map(|s| (s.alpha_h, s.alpha_w)).collect();

        // Surrogate extents: each resizer's continuous pre-rounding value,
        // shifted so that it equals the discrete size at the base point.
        let chain = |alphas: &[(f64, f64)], frozen: Option<&[(f64, f64)]>| -> Vec<((f64, f64), (f64, f64))> {
            let mut cur = (h0 as f64, w0 as f64);
            let mut out = Vec::new();
            for (k, a) in alphas.iter().enumerate() {
                let pre = ((cur.0 / a.0).max(MIN_EXTENT), (cur.1 / a.1).max(MIN_EXTENT));
                let offset = frozen.map(|f| f[k]).unwrap_or(pre);
                let next = (offset.0.round() + pre.0 - offset.0, offset.1.round() + pre.1 - offset.1);
                out.push((pre, next));
                cur = next;
            }
            out
        };
        let base = chain(&alphas, None);
        let frozen: Vec<(f64, f64)> = base.iter().map(|(pre, _)| *pre).collect();
        if frozen.iter().any(|p| (p.0 - MIN_EXTENT).abs() < 0.05 || (p.1 - MIN_EXTENT).abs() < 0.05) {
            tally.redrawn += 1;
            continue;
        }
        let costs = model.initial_costs().to_vec();
        let resizer_layers: Vec<usize> = model.resizer_layers().iter().map(|r| r.0).collect();
        let loss_at = |alphas: &[(f64, f64)]| -> f64 {
            let sizes = chain(alphas, Some(&frozen));
            costs
                .iter()
                .map(|&(layer, gm, area0)| {
                    let before = resizer_layers.iter().filter(|&&r| r < layer).count();
                    let area = if layer == model.spec.layers.len() - 1 {
                        1.0
                    } else if before == 0 {
                        (h0 * w0) as f64
                    } else {
                        let s = sizes[before - 1].1;
                        s.0 * s.1
                    };
                    gm / area0 * area
                })
                .sum()
        };

        let mut g = Graph::new();
        let batch = Tensor::zeros(&[1, 1, h0, w0])?;
        let pass = model.forward(&mut g, &batch)?;
        let loss = gmacs_loss(&mut g, &pass.ledger)?;
        g.backward(loss)?;
        let sign = if flip { -1.0 } else { 1.0 };
        for (k, vars) in pass.scale_vars.iter().enumerate() {
            for (axis, var) in [vars.alpha_h, vars.alpha_w].into_iter().enumerate() {
                let mut plus = alphas.clone();
                let mut minus = alphas.clone();
                if axis == 0 {
                    plus[k].0 += STEP;
                    minus[k].0 -= STEP;
                } else {
                    plus[k].1 += STEP;
                    minus[k].1 -= STEP;
                }
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * STEP);
                let analytic = sign * g.grad(var).map(|t| t.item()).unwrap_or(0.0);
                // Scale to the model's total so tolerances are unit-free.
                let unit = model.initial_gmacs();
                tally.compare(analytic / unit, numeric / unit);
            }
        }
        tally.trials += 1;
    }
    Ok(tally.report("gmacs_loss.alpha"))
}

/// Runs every check. The report order is fixed.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = opts.primitive_trials;
    let a = opts.alpha_trials;
    let flip = opts.flip_alpha_sign;
    Ok(vec![
        relu_check(n, &mut rng)?,
        add_mul_check(n, &mut rng)?,
        matmul_check(n, &mut rng)?,
        max_check(n, &mut rng)?,
        cross_entropy_check(n, &mut rng)?,
        conv_check(n, &mut rng)?,
        bilinear_value_check(n, &mut rng)?,
        bilinear_coord_check(n, &mut rng)?,
        pool_check(n, &mut rng)?,
        extent_check(n, &mut rng, flip)?,
        dynopool_alpha_check(a, &mut rng, flip)?,
        gmacs_alpha_check(a, &mut rng, flip)?,
    ])
}

pub fn format_report(reports: &[CheckReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&format!(
            "{:<26} {} trials={:<4} compared={:<5} redrawn={:<3} max_abs={:.3e} max_rel={:.3e}\n",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.trials,
            r.compared,
            r.redrawn,
            r.max_abs_err,
            r.max_rel_err
        ));
    }
    out
}
