use dynopool::datagen::{
    class_codes, crop, downsample_half, make_base, transform_large, transform_stretch_h, transform_stretch_v, transform_tile, upsample,
    Dataset,
};
use dynopool::Tensor;
use proptest::prelude::*;

/// Single-sample set whose pixel (y, x) is `f(y, x)`.
fn image(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Dataset {
    let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
    Dataset::new(Tensor::new(&[1, 1, h, w], data).unwrap(), vec![0], 2).unwrap()
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[test]
fn base_determinism_range_and_balance() {
    let a = make_base(7, 64, 4, 16).unwrap();
    assert_eq!(a, make_base(7, 64, 4, 16).unwrap());
    assert!(a.images.min() >= 0.0 && a.images.max() <= 1.0);
    for k in 0..4 {
        assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 16);
    }
}

/// Circular horizontal difference of the column means.
fn column_gradient(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let profile: Vec<f64> = (0..w).map(|x| (0..h).map(|y| plane[y * w + x]).sum::<f64>() / h as f64).collect();
    (0..w).map(|x| profile[(x + 1) % w] - profile[x]).collect()
}

#[test]
fn two_classes_separate_under_a_fixed_horizontal_gradient_filter() {
    // Matched filter on horizontal gradients: correlate the image's column
    // gradient with each class code's gradient at every cyclic offset.
    let size = 16;
    let data = make_base(11, 400, 2, size).unwrap();
    let templates: Vec<Vec<f64>> = class_codes(2, size)
        .unwrap()
        .iter()
        .map(|code| {
            let levels: Vec<f64> = code.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            column_gradient(&levels, 1, size)
        })
        .collect();
    let mut correct = 0;
    for (plane, &label) in data.images.data().chunks(size * size).zip(&data.labels) {
        let g = column_gradient(plane, size, size);
        let score = |t: &[f64]| {
            (0..size)
                .map(|s| (0..size).map(|x| g[x] * t[(x + s) % size]).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let guess = if score(&templates[0]) >= score(&templates[1]) { 0 } else { 1 };
        correct += (guess == label) as usize;
    }
    let acc = correct as f64 / data.len() as f64;
    assert!(acc > 0.9, "filter accuracy {acc}");
}

#[test]
fn codes_are_fixed_and_distinct_up_to_shift() {
    let codes = class_codes(4, 16).unwrap();
    assert_eq!(codes, class_codes(4, 16).unwrap());
    for (i, a) in codes.iter().enumerate() {
        for b in &codes[i + 1..] {
            assert!((0..16).all(|s| (0..16).any(|x| a[(x + s) % 16] != b[x])));
        }
    }
    // Down a column only the noise (half-width 0.3) changes the value.
    let d = make_base(3, 8, 4, 16).unwrap();
    for plane in d.images.data().chunks(256) {
        for x in 0..16 {
            let col: Vec<f64> = (0..16).map(|y| plane[y * 16 + x]).collect();
            let spread = col.iter().cloned().fold(f64::MIN, f64::max) - col.iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread <= 0.6 + 2.0 / 255.0, "column spread {spread}");
        }
    }
}

#[test]
fn stretch_v_columns_are_magnified_windows_of_the_source() {
    // Row ramp: value depends on y only, so each output column must be a
    // contiguous run of the ×2 vertically resampled ramp.
    let (h, w) = (8, 5);
    let src = image(h, w, |y, _| y as f64 / (h - 1) as f64);
    let out = transform_stretch_v(&src, 3).unwrap();
    assert_eq!(out.image_shape(), (1, h, w));
    // Index-arithmetic oracle of the ×2 stretch: tall row t samples source
    // coordinate (t + 0.5)/2 - 0.5, clamped to the image.
    let tall: Vec<f64> = (0..2 * h)
        .map(|t| {
            let s = ((t as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (h - 1) as f64);
            s / (h - 1) as f64
        })
        .collect();
    let got = out.images.data();
    let column: Vec<f64> = (0..h).map(|y| got[y * w]).collect();
    let offset = (0..=h)
        .find(|&o| (0..h).all(|y| (tall[o + y] - column[y]).abs() < 1e-12))
        .expect("column is a window of the stretched ramp");
    for x in 0..w {
        for y in 0..h {
            assert!((got[y * w + x] - tall[offset + y]).abs() < 1e-12);
        }
    }
    // Vertical magnification halves the per-row step inside the window.
    for y in 1..h - 1 {
        let step = column[y + 1] - column[y];
        assert!(step <= 1.0 / (h - 1) as f64 * 0.5 + 1e-12);
    }
}

#[test]
fn stretch_h_leaves_columns_of_a_row_ramp_alone() {
    let src = image(6, 6, |y, _| y as f64 / 5.0);
    let out = transform_stretch_h(&src, 9).unwrap();
    assert_eq!(out, src);
}

#[test]
fn constant_images_stay_constant_and_labels_survive() {
    let c = image(8, 8, |_, _| 0.4);
    for out in [
        transform_stretch_v(&c, 1).unwrap(),
        transform_stretch_h(&c, 1).unwrap(),
        transform_tile(&c, 4).unwrap(),
        transform_large(&c).unwrap(),
    ] {
        assert_eq!(out.labels, c.labels);
        assert!(out.images.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }
}

#[test]
fn tile_and_large_shapes() {
    let base = make_base(1, 8, 2, 16).unwrap();
    let tile = transform_tile(&base, 4).unwrap();
    let large = transform_large(&base).unwrap();
    assert_eq!(tile.image_shape(), (1, 32, 32));
    assert_eq!(large.image_shape(), (1, 32, 32));
    assert_eq!(tile.labels, base.labels);
    assert_eq!(large.labels, base.labels);
    // Periodicity: (i, j) equals (i + H/grid, j).
    let h = 32;
    for plane in tile.images.data().chunks(h * h) {
        for i in 0..h - 8 {
            for j in 0..h {
                assert_eq!(plane[i * h + j], plane[(i + 8) * h + j]);
            }
        }
    }
}

#[test]
fn odd_sizes_are_rejected() {
    let odd = image(15, 15, |_, _| 0.5);
    assert!(transform_tile(&odd, 4).is_err());
    assert!(transform_large(&odd).is_err());
    assert!(downsample_half(&odd).is_err());
}

#[test]
fn one_tile_upsampled_approximates_large() {
    // Diagonal ramp base; a single tile of the mosaic is the half-size image,
    // and upsampling it ×2 twice should land on the ×4 enlargement.
    let size = 16;
    let base = image(size, size, |y, x| (y + x) as f64 / (2 * size - 2) as f64);
    let tile = transform_tile(&base, 4).unwrap();
    let half = size / 2;
    let one = crop(&tile, 0, 0, half, half).unwrap();
    assert_eq!(one, downsample_half(&base).unwrap());
    let approx = upsample(&upsample(&one, 2).unwrap(), 2).unwrap();
    let large = transform_large(&base).unwrap();
    assert_eq!(approx.image_shape(), large.image_shape());
    let mae = mean_abs_diff(approx.images.data(), large.images.data());
    assert!(mae < 0.05, "mean abs error {mae}");
}

#[test]
fn file_format_header_and_validation() {
    let d = make_base(2, 10, 3, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.bin");
    d.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"DYNP");
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    assert_eq!([field(0), field(1), field(2), field(3), field(4), field(5)], [1, 10, 1, 8, 8, 3]);
    assert_eq!(bytes.len(), 28 + 10 * 64 + 2 * 10);
    assert_eq!(Dataset::load(&path).unwrap(), d);

    let mut wrong_version = bytes.clone();
    wrong_version[4] = 2;
    assert!(Dataset::decode(&wrong_version).is_err());
    assert!(Dataset::decode(&bytes[..bytes.len() - 1]).is_err());
    assert!(Dataset::load(&dir.path().join("missing.bin")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn transforms_are_deterministic_and_in_range(seed in 0u64..500) {
        let base = make_base(seed, 6, 3, 8).unwrap();
        let a = transform_stretch_v(&base, seed).unwrap();
        prop_assert_eq!(&a, &transform_stretch_v(&base, seed).unwrap());
        for d in [a, transform_tile(&base, 4).unwrap(), transform_large(&base).unwrap()] {
            prop_assert!(d.images.min() >= 0.0 && d.images.max() <= 1.0);
            prop_assert_eq!(&d.labels, &base.labels);
        }
    }
}
