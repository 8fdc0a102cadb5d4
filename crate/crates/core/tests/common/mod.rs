//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numeric code.
#![allow(dead_code)]

use dynopool::network::LayerSpec;

/// Round half away from zero.
pub fn round_half_away(x: f64) -> f64 {
    let f = x.abs().floor();
    let r = if x.abs() - f >= 0.5 { f + 1.0 } else { f };
    r.copysign(x)
}

/// Output extent of a resizer: round(max(n·r, 1.5)).
pub fn out_extent(n: usize, r: f64) -> usize {
    let v = n as f64 * r;
    round_half_away(if v < 1.5 { 1.5 } else { v }) as usize
}

/// Plain six-loop same-padding convolution. `x: [B, Ci, H, W]`,
/// `w: [Co, Ci, K, K]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_naive(x: &[f64], b: usize, ci: usize, h: usize, wd: usize, w: &[f64], co: usize, k: usize, bias: &[f64]) -> Vec<f64> {
    let p = (k / 2) as isize;
    let mut out = vec![0.0; b * co * h * wd];
    for n in 0..b {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = bias[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - p;
                                let ix = xx as isize + kx as isize - p;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((n * ci + c) * h + iy as usize) * wd + ix as usize]
                                    * w[((o * ci + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((n * co + o) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

/// Bilinear read of one plane at normalized `(ph, pw)`. Pixel `k` of an axis
/// of length `n` sits at `-1 + (2k + 1)/n`; outside the outermost centers the
/// border value is replicated.
pub fn bilinear_at(plane: &[f64], h: usize, w: usize, ph: f64, pw: f64) -> f64 {
    let axis = |p: f64, n: usize| -> (usize, usize, f64) {
        // Solve -1 + (2u + 1)/n = p for the fractional pixel index u.
        let u = ((p + 1.0) * n as f64 - 1.0) / 2.0;
        if u <= 0.0 {
            return (0, 0, 0.0);
        }
        if u >= (n - 1) as f64 {
            return (n - 1, n - 1, 0.0);
        }
        let lo = u.floor() as usize;
        (lo, lo + 1, u - lo as f64)
    };
    let (y0, y1, fy) = axis(ph, h);
    let (x0, x1, fx) = axis(pw, w);
    let v = |y: usize, x: usize| plane[y * w + x];
    (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1))
}

/// Brute-force resizer forward on `x: [B, C, H, W]`: explicit loops over
/// output cells, the four query points at `center ± δ`, bilinear weights and
/// a max. Returns the output and its spatial size.
pub fn dynopool_reference(x: &[f64], b: usize, c: usize, h: usize, w: usize, r_h: f64, r_w: f64) -> (Vec<f64>, usize, usize) {
    let ho = out_extent(h, r_h);
    let wo = out_extent(w, r_w);
    let dh = 0.25 * 2.0 / ho as f64;
    let dw = 0.25 * 2.0 / wo as f64;
    let mut out = Vec::with_capacity(b * c * ho * wo);
    for plane in x.chunks(h * w).take(b * c) {
        for i in 0..ho {
            for j in 0..wo {
                let ph = -1.0 + (2 * i + 1) as f64 / ho as f64;
                let pw = -1.0 + (2 * j + 1) as f64 / wo as f64;
                let mut best = f64::NEG_INFINITY;
                for (sy, sx) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                    let v = bilinear_at(plane, h, w, ph + sy * dh, pw + sx * dw);
                    if v > best {
                        best = v;
                    }
                }
                out.push(best);
            }
        }
    }
    (out, ho, wo)
}

/// GMACs of a spec counted from scratch for per-resizer ratios given in
/// layer order: walks the layers tracking `(C, H, W)` and sums conv
/// `Ci·Co·K²·H·W` and linear `in·out`.
pub fn count_gmacs(layers: &[LayerSpec], input: (usize, usize, usize), ratios: &[(f64, f64)]) -> f64 {
    let (mut c, mut h, mut w) = input;
    let mut ratios = ratios.iter();
    let mut macs = 0.0;
    for layer in layers {
        match *layer {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                assert_eq!(c, in_channels);
                macs += (in_channels * out_channels * kernel * kernel * h * w) as f64;
                c = out_channels;
            }
            LayerSpec::DynoPool { .. } => {
                let &(rh, rw) = ratios.next().expect("ratio per resizer");
                h = out_extent(h, rh);
                w = out_extent(w, rw);
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => macs += (in_features * out_features) as f64,
            _ => {}
        }
    }
    macs / 1e9
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y} (tol {tol})");
    }
}
