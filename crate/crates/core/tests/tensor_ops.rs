mod common;

use common::{assert_close, bilinear_at, conv_naive};
use dynopool::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn conv2d_matches_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..40 {
        let b = rng.gen_range(1..3);
        let ci = rng.gen_range(1..4);
        let co = rng.gen_range(1..5);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let h = rng.gen_range(1..9);
        let w = rng.gen_range(1..9);
        let x = random(&mut rng, b * ci * h * w);
        let wt = random(&mut rng, co * ci * k * k);
        let bias = random(&mut rng, co);

        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(&[b, ci, h, w], x.clone()).unwrap());
        let wv = g.param(Tensor::new(&[co, ci, k, k], wt.clone()).unwrap());
        let bv = g.param(Tensor::new(&[co], bias.clone()).unwrap());
        let y = g.conv2d(xv, wv, bv, k / 2).unwrap();
        assert_eq!(g.shape(y), &[b, co, h, w]);
        let expected = conv_naive(&x, b, ci, h, w, &wt, co, k, &bias);
        assert_close(g.value(y).data(), &expected, 1e-5);
    }
}

#[test]
fn conv2d_weight_gradient_is_correlation_of_input_and_upstream() {
    // d(sum(y))/dw[o, c, ky, kx] = sum of the input over the window shifted by (ky, kx).
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (ci, co, h, w, k) = (2, 3, 5, 4, 3);
    let x = random(&mut rng, ci * h * w);
    let mut g = Graph::new();
    let xv = g.constant(Tensor::new(&[1, ci, h, w], x.clone()).unwrap());
    let wv = g.param(Tensor::new(&[co, ci, k, k], random(&mut rng, co * ci * k * k)).unwrap());
    let bv = g.param(Tensor::zeros(&[co]).unwrap());
    let y = g.conv2d(xv, wv, bv, 1).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    let gw = g.grad(wv).unwrap().data().to_vec();
    for o in 0..co {
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for yy in 0..h as isize {
                        for xx in 0..w as isize {
                            let (iy, ix) = (yy + ky as isize - 1, xx + kx as isize - 1);
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                acc += x[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    let got = gw[((o * ci + c) * k + ky) * k + kx];
                    assert!((got - acc).abs() < 1e-9, "{got} vs {acc}");
                }
            }
        }
    }
    assert_close(g.grad(bv).unwrap().data(), &[(h * w) as f64; 3], 1e-12);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let a = random(&mut rng, m * k);
        let b = random(&mut rng, k * n);
        let mut g = Graph::new();
        let av = g.constant(Tensor::new(&[m, k], a.clone()).unwrap());
        let bv = g.constant(Tensor::new(&[k, n], b.clone()).unwrap());
        let c = g.matmul(av, bv).unwrap();
        let mut expected = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    expected[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        assert_close(g.value(c).data(), &expected, 1e-12);
    }
}

#[test]
fn bilinear_sample_matches_reference_reads() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..30 {
        let (b, c, h, w) = (2, 2, rng.gen_range(1..7), rng.gen_range(1..7));
        let x = random(&mut rng, b * c * h * w);
        let m = rng.gen_range(1..10);
        // Include points beyond the border to exercise replication.
        let coords: Vec<f64> = (0..2 * m).map(|_| rng.gen_range(-1.3..1.3)).collect();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(&[b, c, h, w], x.clone()).unwrap());
        let cv = g.constant(Tensor::new(&[m, 2], coords.clone()).unwrap());
        let y = g.bilinear_sample(xv, cv).unwrap();
        assert_eq!(g.shape(y), &[b, c, m]);
        let mut expected = Vec::new();
        for plane in x.chunks(h * w) {
            for p in coords.chunks(2) {
                expected.push(bilinear_at(plane, h, w, p[0], p[1]));
            }
        }
        assert_close(g.value(y).data(), &expected, 1e-12);
    }
}

#[test]
fn bilinear_hits_pixel_centers_exactly() {
    let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
    let mut g = Graph::new();
    let xv = g.constant(Tensor::new(&[1, 1, 3, 4], x.clone()).unwrap());
    let mut coords = Vec::new();
    for i in 0..3 {
        for j in 0..4 {
            coords.push(-1.0 + (2 * i + 1) as f64 / 3.0);
            coords.push(-1.0 + (2 * j + 1) as f64 / 4.0);
        }
    }
    let cv = g.constant(Tensor::new(&[12, 2], coords).unwrap());
    let y = g.bilinear_sample(xv, cv).unwrap();
    assert_close(g.value(y).data(), &x, 1e-12);
}

#[test]
fn cross_entropy_matches_log_softmax() {
    let logits = [1.0, 2.0, 0.5, -1.0, 0.0, 3.0];
    let labels = [1, 2];
    let mut g = Graph::new();
    let l = g.param(Tensor::new(&[2, 3], logits.to_vec()).unwrap());
    let loss = g.softmax_cross_entropy(l, &labels).unwrap();
    let mut expected = 0.0;
    for (row, &y) in logits.chunks(3).zip(&labels) {
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        expected += lse - row[y];
    }
    assert!((g.item(loss) - expected / 2.0).abs() < 1e-12);
    g.backward(loss).unwrap();
    let grad = g.grad(l).unwrap().data().to_vec();
    for (r, row) in logits.chunks(3).enumerate() {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for j in 0..3 {
            let p = row[j].exp() / z - if j == labels[r] { 1.0 } else { 0.0 };
            assert!((grad[r * 3 + j] - p / 2.0).abs() < 1e-12);
        }
    }
}

#[test]
fn global_avg_pool_is_plane_mean() {
    let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
    let mut g = Graph::new();
    let xv = g.constant(Tensor::new(&[2, 3, 2, 2], x.clone()).unwrap());
    let y = g.global_avg_pool(xv).unwrap();
    assert_eq!(g.shape(y), &[2, 3]);
    let expected: Vec<f64> = x.chunks(4).map(|c| c.iter().sum::<f64>() / 4.0).collect();
    assert_close(g.value(y).data(), &expected, 1e-12);
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]).unwrap());
    let b = g.constant(Tensor::zeros(&[2, 3]).unwrap());
    assert!(g.matmul(a, b).is_err());
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]).unwrap());
    let w = g.param(Tensor::zeros(&[1, 3, 3, 3]).unwrap());
    let bias = g.param(Tensor::zeros(&[1]).unwrap());
    assert!(g.conv2d(x, w, bias, 1).is_err());
    let w_even = g.param(Tensor::zeros(&[1, 2, 2, 2]).unwrap());
    assert!(g.conv2d(x, w_even, bias, 1).is_err());
    let bad = g.constant(Tensor::zeros(&[3, 3]).unwrap());
    assert!(g.bilinear_sample(x, bad).is_err());
    assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
    assert!(Tensor::new(&[0, 2], vec![]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sum_of_product_gradients(a in prop::collection::vec(-5.0f64..5.0, 1..20), k in -3.0f64..3.0) {
        // d/da sum(a * a * k) = 2ka
        let n = a.len();
        let mut g = Graph::new();
        let av = g.param(Tensor::new(&[n], a.clone()).unwrap());
        let sq = g.mul(av, av).unwrap();
        let kv = g.scalar(k);
        let y = g.mul(sq, kv).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        for (gi, ai) in g.grad(av).unwrap().data().iter().zip(&a) {
            prop_assert!((gi - 2.0 * k * ai).abs() < 1e-9);
        }
    }

    #[test]
    fn relu_never_negative(a in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        let mut g = Graph::new();
        let av = g.constant(Tensor::new(&[a.len()], a.clone()).unwrap());
        let r = g.relu(av);
        for (y, x) in g.value(r).data().iter().zip(&a) {
            prop_assert!(*y >= 0.0);
            prop_assert_eq!(*y, x.max(0.0));
        }
    }
}
