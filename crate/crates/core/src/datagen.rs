//! Procedural image-classification data and the anisotropy / locality
//! transforms used to probe learned feature-map shapes.
//!
//! Base images are vertical bar codes: every class owns a fixed binary
//! pattern over the columns, shown at a random cyclic offset with random
//! contrast and pixel noise. Class evidence therefore lives in the horizontal
//! frequency content while rows are interchangeable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DYNP";
const VERSION: u32 = 1;

/// Images in `[0, 1]` with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::DatasetFormat(format!("images must be [N, C, H, W], got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(Error::DatasetFormat(format!("{} images but {} labels", s[0], labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::DatasetFormat(format!("label {bad} not below K = {num_classes}")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::DatasetFormat("pixel values outside [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn sample_len(&self) -> usize {
        let (c, h, w) = self.image_shape();
        c * h * w
    }

    /// Stacks the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let n = self.sample_len();
        let (c, h, w) = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(&[indices.len(), c, h, w], data)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.batch(indices)?;
        Ok(Dataset {
            images,
            labels,
            num_classes: self.num_classes,
        })
    }

    /// Applies `f` to every `(H, W)` plane, producing planes of `(out_h, out_w)`.
    fn map_planes(&self, out_h: usize, out_w: usize, mut f: impl FnMut(usize, &[f64]) -> Vec<f64>) -> Result<Dataset> {
        let (c, h, w) = self.image_shape();
        let n = self.len();
        let mut data = Vec::with_capacity(n * c * out_h * out_w);
        for (p, plane) in self.images.data().chunks(h * w).enumerate() {
            let out = f(p / c, plane);
            debug_assert_eq!(out.len(), out_h * out_w);
            data.extend(out);
        }
        Ok(Dataset {
            images: Tensor::new(&[n, c, out_h, out_w], data)?,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (c, h, w) = self.image_shape();
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        for v in [VERSION, self.len() as u32, c as u32, h as u32, w as u32, self.num_classes as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        let pixels: Vec<u8> = self.images.data().iter().map(|&v| quantize(v)).collect();
        out.write_all(&pixels)?;
        for &l in &self.labels {
            out.write_all(&(l as u16).to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Dataset> {
        const HEADER: usize = 4 + 6 * 4;
        if bytes.len() < HEADER {
            return Err(Error::DatasetFormat(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::DatasetFormat("bad magic, expected DYNP".into()));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let version = field(0);
        if version != VERSION {
            return Err(Error::DatasetFormat(format!("unsupported version {version}")));
        }
        let [n, c, h, w, k] = [1, 2, 3, 4, 5].map(|i| field(i) as usize);
        if n == 0 || c == 0 || h == 0 || w == 0 || k == 0 {
            return Err(Error::DatasetFormat(format!("degenerate header ({n}, {c}, {h}, {w}, {k})")));
        }
        let pixels = n * c * h * w;
        let expected = HEADER + pixels + 2 * n;
        if bytes.len() != expected {
            return Err(Error::DatasetFormat(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let data = bytes[HEADER..HEADER + pixels].iter().map(|&b| b as f64 / 255.0).collect();
        let labels: Vec<usize> = bytes[HEADER + pixels..]
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
            .collect();
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::DatasetFormat(format!("label {l} of sample {i} is not below K = {k}")));
        }
        Dataset::new(Tensor::new(&[n, c, h, w], data)?, labels, k)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Knobs of the procedural base patterns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaseStyle {
    /// Columns per code bit.
    pub bit_width: usize,
    /// Shift each sample's code by a random whole number of columns.
    pub random_shift: bool,
    /// Dark level is drawn from this range; the bright level adds a second
    /// draw from `contrast`.
    pub dark: (f64, f64),
    pub contrast: (f64, f64),
    pub blobs: usize,
    pub blob_amplitude: f64,
    /// Half-width of the uniform pixel noise.
    pub noise: f64,
}

impl Default for BaseStyle {
    fn default() -> Self {
        Self {
            bit_width: 1,
            random_shift: true,
            dark: (0.2, 0.4),
            contrast: (0.2, 0.4),
            blobs: 0,
            blob_amplitude: 0.25,
            noise: 0.3,
        }
    }
}

const CODE_SEED: u64 = 0x5eed_c0de;

fn is_rotation(a: &[bool], b: &[bool]) -> bool {
    (0..a.len()).any(|s| (0..a.len()).all(|i| a[(i + s) % a.len()] == b[i]))
}

/// The fixed per-class column codes: `k` binary sequences of `bits` entries,
/// no two of them equal up to a cyclic shift and none constant. They do not
/// depend on the dataset seed, so sets drawn with different seeds share
/// their classes.
pub fn class_codes(k: usize, bits: usize) -> Result<Vec<Vec<bool>>> {
    if bits < 3 {
        return Err(Error::invalid(format!("codes need at least 3 bits, got {bits}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(CODE_SEED ^ ((k as u64) << 32) ^ bits as u64);
    let mut codes: Vec<Vec<bool>> = Vec::with_capacity(k);
    for _ in 0..10_000 {
        if codes.len() == k {
            return Ok(codes);
        }
        let code: Vec<bool> = (0..bits).map(|_| rng.gen_bool(0.5)).collect();
        let ones = code.iter().filter(|&&b| b).count();
        if ones == 0 || ones == bits || codes.iter().any(|c| is_rotation(c, &code)) {
            continue;
        }
        codes.push(code);
    }
    Err(Error::invalid(format!("cannot find {k} distinct {bits}-bit codes")))
}

/// Deterministic base set of `n` single-channel `size x size` images from
/// `k` balanced classes.
pub fn make_base(seed: u64, n: usize, k: usize, size: usize) -> Result<Dataset> {
    make_base_with(seed, n, k, size, &BaseStyle::default())
}

pub fn make_base_with(seed: u64, n: usize, k: usize, size: usize, style: &BaseStyle) -> Result<Dataset> {
    if size < 8 {
        return Err(Error::invalid(format!("image size must be at least 8, got {size}")));
    }
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {k}")));
    }
    if n == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    if style.bit_width == 0 || !size.is_multiple_of(style.bit_width) {
        return Err(Error::invalid(format!(
            "bit width {} must divide the image size {size}",
            style.bit_width
        )));
    }
    let codes = class_codes(k, size / style.bit_width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let shift = if style.random_shift { rng.gen_range(0..size) } else { 0 };
        let lo = rng.gen_range(style.dark.0..=style.dark.1);
        let hi = lo + rng.gen_range(style.contrast.0..=style.contrast.1);
        let amp = style.blob_amplitude;
        let blobs: Vec<(f64, f64, f64, f64)> = (0..style.blobs)
            .map(|_| {
                (
                    rng.gen_range(0.0..s),
                    rng.gen_range(0.0..s),
                    rng.gen_range(1.0..3.0),
                    rng.gen_range(-amp..=amp),
                )
            })
            .collect();
        let code = &codes[class];
        for y in 0..size {
            for x in 0..size {
                let bit = code[((x + shift) % size) / style.bit_width];
                let mut v = if bit { hi } else { lo };
                for &(by, bx, sigma, a) in &blobs {
                    let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                    v += a * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                if style.noise > 0.0 {
                    v += rng.gen_range(-style.noise..=style.noise);
                }
                data.push(quantize(v) as f64 / 255.0);
            }
        }
        labels.push(class);
    }
    Dataset::new(Tensor::new(&[n, 1, size, size], data)?, labels, k)
}

/// Bilinear resampling of one plane with pixel-center alignment and
/// replicated borders.
pub fn resample(plane: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let stencil = |dst: usize, n_in: usize, n_out: usize| {
        let src = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, src - lo as f64)
    };
    let rows: Vec<_> = (0..out_h).map(|y| stencil(y, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| stencil(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn require_even(d: &Dataset) -> Result<(usize, usize, usize)> {
    let (c, h, w) = d.image_shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("image size {h}x{w} must be even to halve exactly")));
    }
    Ok((c, h, w))
}

/// Stretches every image ×2 vertically and crops a uniformly random window
/// of the original height back out of it.
pub fn transform_stretch_v(d: &Dataset, seed: u64) -> Result<Dataset> {
    let (_, h, w) = d.image_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets: Vec<usize> = (0..d.len()).map(|_| rng.gen_range(0..=h)).collect();
    d.map_planes(h, w, |sample, plane| {
        let tall = resample(plane, h, w, 2 * h, w);
        let off = offsets[sample];
        tall[off * w..(off + h) * w].to_vec()
    })
}

/// Horizontal counterpart of [`transform_stretch_v`].
pub fn transform_stretch_h(d: &Dataset, seed: u64) -> Result<Dataset> {
    let (_, h, w) = d.image_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets: Vec<usize> = (0..d.len()).map(|_| rng.gen_range(0..=w)).collect();
    d.map_planes(h, w, |sample, plane| {
        let wide = resample(plane, h, w, h, 2 * w);
        let off = offsets[sample];
        (0..h).flat_map(|y| wide[y * 2 * w + off..y * 2 * w + off + w].to_vec()).collect()
    })
}

/// Halves both sides with bilinear (2x2 box) filtering.
pub fn downsample_half(d: &Dataset) -> Result<Dataset> {
    let (_, h, w) = require_even(d)?;
    d.map_planes(h / 2, w / 2, |_, plane| resample(plane, h, w, h / 2, w / 2))
}

/// Upsamples both sides by an integer factor.
pub fn upsample(d: &Dataset, factor: usize) -> Result<Dataset> {
    let (_, h, w) = d.image_shape();
    d.map_planes(h * factor, w * factor, |_, plane| resample(plane, h, w, h * factor, w * factor))
}

/// Tiles the half-size image in a `grid x grid` mosaic, giving
/// `grid/2` times the original side.
pub fn transform_tile(d: &Dataset, grid: usize) -> Result<Dataset> {
    if grid == 0 {
        return Err(Error::invalid("tile grid must be at least 1"));
    }
    let small = downsample_half(d)?;
    let (_, h, w) = small.image_shape();
    small.map_planes(h * grid, w * grid, |_, plane| {
        let mut out = Vec::with_capacity(h * w * grid * grid);
        for y in 0..h * grid {
            for x in 0..w * grid {
                out.push(plane[(y % h) * w + x % w]);
            }
        }
        out
    })
}

/// Enlarges the half-size image to twice the original side.
pub fn transform_large(d: &Dataset) -> Result<Dataset> {
    let small = downsample_half(d)?;
    upsample(&small, 4)
}

/// Crops the window `(top, left, h, w)` from every image.
pub fn crop(d: &Dataset, top: usize, left: usize, h: usize, w: usize) -> Result<Dataset> {
    let (_, ih, iw) = d.image_shape();
    if top + h > ih || left + w > iw || h == 0 || w == 0 {
        return Err(Error::invalid(format!("crop ({top}, {left}, {h}, {w}) exceeds {ih}x{iw}")));
    }
    d.map_planes(h, w, |_, plane| {
        (top..top + h)
            .flat_map(|y| plane[y * iw + left..y * iw + left + w].to_vec())
            .collect()
    })
}
