//! Declarative CNNs with learnable resizing sites.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::complexity::{count_layer_gmacs, GmacsLedger, LedgerEntry};
use crate::dynopool::{self, ScaleParam, ScaleVars};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        stride: usize,
    },
    Relu,
    /// Fixed-stride pooling. Only valid before [`NetworkSpec::replace_resizers`].
    Pool { stride: usize },
    DynoPool { resizer: usize, init_ratio: (f64, f64) },
    Linear { in_features: usize, out_features: usize },
    Flatten,
    GlobalAvgPool,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            padding: kernel / 2,
            stride,
        }
    }

    pub fn dynopool(resizer: usize, r: f64) -> Self {
        LayerSpec::DynoPool {
            resizer,
            init_ratio: (r, r),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::Pool { .. } => "pool",
            LayerSpec::DynoPool { .. } => "dynopool",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Flatten => "flatten",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
        }
    }

    fn weight_shapes(&self) -> Option<[Vec<usize>; 2]> {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some([vec![out_channels, in_channels, kernel, kernel], vec![out_channels]]),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => Some([vec![in_features, out_features], vec![out_features]]),
            _ => None,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => write!(f, "conv{kernel}x{kernel}/{stride} {in_channels}->{out_channels}"),
            LayerSpec::Pool { stride } => write!(f, "pool/{stride}"),
            LayerSpec::DynoPool { resizer, init_ratio } => {
                write!(f, "dynopool#{resizer} r0=({}, {})", init_ratio.0, init_ratio.1)
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => write!(f, "linear {in_features}->{out_features}"),
            other => f.write_str(other.kind()),
        }
    }
}

/// Activation shape after a layer, per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

/// Discrete spatial output of one layer during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub layer: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    /// `(channels, height, width)` of the input.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    /// Resizer ids that share one scale parameter.
    pub shared: Vec<Vec<usize>>,
    pub num_classes: usize,
}

impl NetworkSpec {
    /// Sequential net of `conv3x3 + relu + dynopool` blocks followed by global
    /// average pooling and a single linear classifier.
    pub fn blocks(input: (usize, usize, usize), widths: &[usize], num_classes: usize, init_ratio: f64) -> Self {
        let mut layers = Vec::new();
        let mut c = input.0;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(LayerSpec::conv(c, w, 3, 1));
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::dynopool(i, init_ratio));
            c = w;
        }
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::Linear {
            in_features: c,
            out_features: num_classes,
        });
        Self {
            input,
            layers,
            shared: Vec::new(),
            num_classes,
        }
    }

    pub fn tiny3(input: (usize, usize, usize), num_classes: usize) -> Self {
        Self::blocks(input, &[8, 16, 32], num_classes, 0.5)
    }

    pub fn tiny5(input: (usize, usize, usize), num_classes: usize) -> Self {
        Self::blocks(input, &[8, 16, 16, 32, 32], num_classes, 0.5)
    }

    pub fn builtin(name: &str, input: (usize, usize, usize), num_classes: usize) -> Result<Self> {
        match name {
            "tiny3" => Ok(Self::tiny3(input, num_classes)),
            "tiny5" => Ok(Self::tiny5(input, num_classes)),
            other => Err(Error::invalid(format!("unknown architecture `{other}` (expected tiny3 or tiny5)"))),
        }
    }

    /// Sets the initial scale factor of the `index`-th resizer (in layer
    /// order).
    pub fn with_init_ratio(mut self, index: usize, ratio: (f64, f64)) -> Result<Self> {
        let layer = self
            .layers
            .iter_mut()
            .filter(|l| matches!(l, LayerSpec::DynoPool { .. }))
            .nth(index)
            .ok_or_else(|| Error::invalid(format!("no resizer #{index}")))?;
        if let LayerSpec::DynoPool { init_ratio, .. } = layer {
            *init_ratio = ratio;
        }
        Ok(self)
    }

    /// Replaces every fixed-stride pooling layer and strided convolution by a
    /// learnable resizer:
    ///
    /// * `pool/s` becomes `dynopool(1/s)`;
    /// * `conv/s` becomes `conv/1` followed by `dynopool(1/s)`, placed after the
    ///   ReLU when one follows the convolution;
    /// * resizers created back to back are fused into one with the product
    ///   ratio.
    ///
    /// Existing resizers and the final global average pooling are untouched.
    pub fn replace_resizers(&self) -> Result<NetworkSpec> {
        // Fresh resizers carry `None` as id until fusion is done.
        let mut staged: Vec<(LayerSpec, bool)> = Vec::with_capacity(self.layers.len() + 4);
        let mut pending: Option<f64> = None;
        let fresh = |r: f64| {
            (
                LayerSpec::DynoPool {
                    resizer: usize::MAX,
                    init_ratio: (r, r),
                },
                true,
            )
        };
        for (index, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                    stride,
                } if stride > 1 => {
                    if let Some(r) = pending.take() {
                        staged.push(fresh(r));
                    }
                    staged.push((
                        LayerSpec::Conv {
                            in_channels,
                            out_channels,
                            kernel,
                            padding,
                            stride: 1,
                        },
                        false,
                    ));
                    pending = Some(1.0 / stride as f64);
                }
                LayerSpec::Conv { stride: 0, .. } | LayerSpec::Pool { stride: 0 } => {
                    return Err(Error::Layer {
                        index,
                        kind: layer.kind().into(),
                        source: Box::new(Error::invalid("stride must be at least 1")),
                    });
                }
                LayerSpec::Relu => {
                    staged.push((LayerSpec::Relu, false));
                    if let Some(r) = pending.take() {
                        staged.push(fresh(r));
                    }
                }
                LayerSpec::Pool { stride } => {
                    if let Some(r) = pending.take() {
                        staged.push(fresh(r));
                    }
                    staged.push(fresh(1.0 / stride as f64));
                }
                ref other => {
                    if let Some(r) = pending.take() {
                        staged.push(fresh(r));
                    }
                    staged.push((other.clone(), false));
                }
            }
        }
        if let Some(r) = pending.take() {
            staged.push(fresh(r));
        }

        let mut fused: Vec<(LayerSpec, bool)> = Vec::with_capacity(staged.len());
        for (layer, is_fresh) in staged {
            if let (
                LayerSpec::DynoPool { init_ratio: next, .. },
                true,
                Some((LayerSpec::DynoPool { init_ratio: prev, .. }, true)),
            ) = (&layer, is_fresh, fused.last_mut())
            {
                *prev = (prev.0 * next.0, prev.1 * next.1);
                continue;
            }
            fused.push((layer, is_fresh));
        }

        let mut next_id = self
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::DynoPool { resizer, .. } => Some(resizer + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let layers = fused
            .into_iter()
            .map(|(mut layer, is_fresh)| {
                if let (LayerSpec::DynoPool { resizer, .. }, true) = (&mut layer, is_fresh) {
                    *resizer = next_id;
                    next_id += 1;
                }
                layer
            })
            .collect();
        Ok(NetworkSpec {
            input: self.input,
            layers,
            shared: self.shared.clone(),
            num_classes: self.num_classes,
        })
    }

    /// Maps each resizer layer to its scale-parameter slot. Resizers in one
    /// shared group use the same slot. Returns per-layer slots and the slot
    /// count.
    pub fn scale_slots(&self) -> Result<(Vec<Option<usize>>, usize)> {
        let mut group_of: BTreeMap<usize, usize> = BTreeMap::new();
        for (gi, group) in self.shared.iter().enumerate() {
            for &id in group {
                if group_of.insert(id, gi).is_some() {
                    return Err(Error::invalid(format!("resizer {id} appears in two shared groups")));
                }
            }
        }
        let mut slot_of_group: BTreeMap<usize, usize> = BTreeMap::new();
        let mut seen_ids: BTreeMap<usize, usize> = BTreeMap::new();
        let mut next = 0;
        let mut slots = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let LayerSpec::DynoPool { resizer, .. } = *layer else {
                slots.push(None);
                continue;
            };
            if seen_ids.insert(resizer, 0).is_some() {
                return Err(Error::invalid(format!("resizer id {resizer} used twice")));
            }
            let slot = match group_of.get(&resizer) {
                Some(&gi) => *slot_of_group.entry(gi).or_insert_with(|| {
                    next += 1;
                    next - 1
                }),
                None => {
                    next += 1;
                    next - 1
                }
            };
            slots.push(Some(slot));
        }
        Ok((slots, next))
    }

    /// Initial scale parameter of every slot.
    pub fn initial_scales(&self) -> Result<Vec<ScaleParam>> {
        let (slots, count) = self.scale_slots()?;
        let mut scales: Vec<Option<ScaleParam>> = vec![None; count];
        for (layer, slot) in self.layers.iter().zip(&slots) {
            if let (LayerSpec::DynoPool { resizer, init_ratio }, Some(slot)) = (layer, slot) {
                let s = ScaleParam::from_ratio(init_ratio.0, init_ratio.1)?;
                match scales[*slot] {
                    Some(prev) if prev != s => {
                        return Err(Error::invalid(format!(
                            "resizer {resizer} shares a scale but declares a different initial ratio"
                        )))
                    }
                    _ => scales[*slot] = Some(s),
                }
            }
        }
        Ok(scales.into_iter().map(|s| s.expect("every slot has a resizer")).collect())
    }

    /// Static per-layer output shapes for the given per-slot ratios, using the
    /// same integer size rule as the forward pass.
    pub fn propagate(&self, ratios: &[(f64, f64)]) -> Result<Vec<ActShape>> {
        let (slots, count) = self.scale_slots()?;
        if ratios.len() != count {
            return Err(Error::invalid(format!("{} ratios for {count} scale slots", ratios.len())));
        }
        let (c0, h0, w0) = self.input;
        let mut cur = ActShape::Spatial { c: c0, h: h0, w: w0 };
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (index, (layer, slot)) in self.layers.iter().zip(&slots).enumerate() {
            cur = step_shape(layer, cur, slot.map(|s| ratios[s])).map_err(|e| Error::Layer {
                index,
                kind: layer.kind().into(),
                source: Box::new(e),
            })?;
            shapes.push(cur);
        }
        Ok(shapes)
    }

    pub fn initial_shapes(&self) -> Result<Vec<ActShape>> {
        let ratios: Vec<_> = self.initial_scales()?.iter().map(ScaleParam::ratio).collect();
        self.propagate(&ratios)
    }

    /// `(layer, GMACs, output area)` of every compute-carrying layer at the
    /// given per-slot ratios.
    pub fn layer_costs(&self, ratios: &[(f64, f64)]) -> Result<Vec<(usize, f64, f64)>> {
        let shapes = self.propagate(ratios)?;
        let mut costs = Vec::new();
        for (index, (layer, shape)) in self.layers.iter().zip(&shapes).enumerate() {
            let (h, w) = match *shape {
                ActShape::Spatial { h, w, .. } => (h, w),
                ActShape::Flat(_) => (1, 1),
            };
            if matches!(layer, LayerSpec::Conv { .. } | LayerSpec::Linear { .. }) {
                costs.push((index, count_layer_gmacs(layer, h, w)?, (h * w) as f64));
            }
        }
        Ok(costs)
    }

    /// Number of learnable weights, excluding scale parameters.
    pub fn weight_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(LayerSpec::weight_shapes)
            .map(|[w, b]| w.iter().product::<usize>() + b[0])
            .sum()
    }

    /// Learnable scalars including two per scale slot.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self.weight_count() + 2 * self.scale_slots()?.1)
    }
}

/// Plain-text network description, one directive per line (`#` starts a
/// comment):
///
/// ```text
/// input 1 16 16
/// classes 4
/// conv 1 8 3 2        # in out kernel [stride]
/// relu
/// pool 2
/// dynopool 0 0.5 0.5  # id r_h [r_w]
/// global_avg_pool
/// flatten
/// linear 8 4
/// share 0 1           # resizer ids sharing one scale
/// ```
impl NetworkSpec {
    pub fn parse_config(text: &str) -> Result<NetworkSpec> {
        let mut input = None;
        let mut classes = None;
        let mut layers = Vec::new();
        let mut shared = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::invalid(format!("config line {}: {msg}", lineno + 1));
            let mut words = line.split_whitespace();
            let op = words.next().expect("non-empty line");
            let args: Vec<&str> = words.collect();
            let ints = |want: std::ops::RangeInclusive<usize>| -> Result<Vec<usize>> {
                if !want.contains(&args.len()) {
                    return Err(bad(format!("`{op}` takes {want:?} arguments, got {}", args.len())));
                }
                args.iter()
                    .map(|a| a.parse::<usize>().map_err(|_| bad(format!("`{a}` is not a non-negative integer"))))
                    .collect()
            };
            match op {
                "input" => {
                    let v = ints(3..=3)?;
                    input = Some((v[0], v[1], v[2]));
                }
                "classes" => classes = Some(ints(1..=1)?[0]),
                "conv" => {
                    let v = ints(3..=4)?;
                    layers.push(LayerSpec::conv(v[0], v[1], v[2], v.get(3).copied().unwrap_or(1)));
                }
                "relu" => {
                    ints(0..=0)?;
                    layers.push(LayerSpec::Relu);
                }
                "pool" => layers.push(LayerSpec::Pool { stride: ints(1..=1)?[0] }),
                "dynopool" => {
                    if !(2..=3).contains(&args.len()) {
                        return Err(bad(format!("`dynopool` takes an id and one or two ratios, got {}", args.len())));
                    }
                    let id = args[0].parse::<usize>().map_err(|_| bad(format!("bad resizer id `{}`", args[0])))?;
                    let ratio = |a: &str| a.parse::<f64>().map_err(|_| bad(format!("bad ratio `{a}`")));
                    let r_h = ratio(args[1])?;
                    let r_w = args.get(2).map(|a| ratio(a)).transpose()?.unwrap_or(r_h);
                    layers.push(LayerSpec::DynoPool {
                        resizer: id,
                        init_ratio: (r_h, r_w),
                    });
                }
                "global_avg_pool" | "gap" => {
                    ints(0..=0)?;
                    layers.push(LayerSpec::GlobalAvgPool);
                }
                "flatten" => {
                    ints(0..=0)?;
                    layers.push(LayerSpec::Flatten);
                }
                "linear" => {
                    let v = ints(2..=2)?;
                    layers.push(LayerSpec::Linear {
                        in_features: v[0],
                        out_features: v[1],
                    });
                }
                "share" => shared.push(ints(2..=usize::MAX)?),
                other => return Err(bad(format!("unknown directive `{other}`"))),
            }
        }
        let input = input.ok_or_else(|| Error::invalid("config has no `input` line"))?;
        let num_classes = classes.ok_or_else(|| Error::invalid("config has no `classes` line"))?;
        let spec = NetworkSpec {
            input,
            layers,
            shared,
            num_classes,
        };
        spec.check_head()?;
        Ok(spec)
    }

    /// Inverse of [`NetworkSpec::parse_config`].
    pub fn to_config(&self) -> String {
        let (c, h, w) = self.input;
        let mut out = format!("input {c} {h} {w}\nclasses {}\n", self.num_classes);
        for layer in &self.layers {
            let line = match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => format!("conv {in_channels} {out_channels} {kernel} {stride}"),
                LayerSpec::Relu => "relu".into(),
                LayerSpec::Pool { stride } => format!("pool {stride}"),
                LayerSpec::DynoPool { resizer, init_ratio } => {
                    format!("dynopool {resizer} {} {}", init_ratio.0, init_ratio.1)
                }
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => format!("linear {in_features} {out_features}"),
                LayerSpec::Flatten => "flatten".into(),
                LayerSpec::GlobalAvgPool => "global_avg_pool".into(),
            };
            out.push_str(&line);
            out.push('\n');
        }
        for group in &self.shared {
            let ids: Vec<String> = group.iter().map(usize::to_string).collect();
            out.push_str(&format!("share {}\n", ids.join(" ")));
        }
        out
    }

    /// The last layer must be a linear classifier over `num_classes`.
    fn check_head(&self) -> Result<()> {
        match self.layers.last() {
            Some(LayerSpec::Linear { out_features, .. }) if *out_features == self.num_classes => Ok(()),
            _ => Err(Error::invalid(format!(
                "network must end in a linear layer with {} outputs",
                self.num_classes
            ))),
        }
    }
}

fn step_shape(layer: &LayerSpec, cur: ActShape, ratio: Option<(f64, f64)>) -> Result<ActShape> {
    let spatial = |cur: ActShape| match cur {
        ActShape::Spatial { c, h, w } => Ok((c, h, w)),
        ActShape::Flat(_) => Err(Error::shape("layer", "expects a spatial input")),
    };
    Ok(match *layer {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            padding,
            stride,
        } => {
            let (c, h, w) = spatial(cur)?;
            if c != in_channels {
                return Err(Error::shape("conv2d", format!("input has {c} channels, layer expects {in_channels}")));
            }
            if kernel % 2 == 0 || 2 * padding + 1 != kernel {
                return Err(Error::shape("conv2d", format!("kernel {kernel} with padding {padding} is not same-size")));
            }
            ActShape::Spatial {
                c: out_channels,
                h: (h - 1) / stride + 1,
                w: (w - 1) / stride + 1,
            }
        }
        LayerSpec::Relu => cur,
        LayerSpec::Pool { stride } => {
            let (c, h, w) = spatial(cur)?;
            ActShape::Spatial {
                c,
                h: (h / stride).max(1),
                w: (w / stride).max(1),
            }
        }
        LayerSpec::DynoPool { .. } => {
            let (c, h, w) = spatial(cur)?;
            let (rh, rw) = ratio.expect("resizer has a slot");
            ActShape::Spatial {
                c,
                h: dynopool::discrete_extent(h, rh),
                w: dynopool::discrete_extent(w, rw),
            }
        }
        LayerSpec::Linear {
            in_features,
            out_features,
        } => match cur {
            ActShape::Flat(n) if n == in_features => ActShape::Flat(out_features),
            other => {
                return Err(Error::shape("linear", format!("input {other:?}, layer expects {in_features} features")))
            }
        },
        LayerSpec::Flatten => {
            let (c, h, w) = spatial(cur)?;
            ActShape::Flat(c * h * w)
        }
        LayerSpec::GlobalAvgPool => ActShape::Flat(spatial(cur)?.0),
    })
}

/// Parameters of a network: weights of every conv/linear layer plus one
/// scale parameter per slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    /// `(weight, bias)` per conv/linear layer, in layer order.
    pub weights: Vec<(Tensor, Tensor)>,
    pub scales: Vec<ScaleParam>,
    /// Frozen `(layer, GMACs, area)` at the initial scale factors.
    initial_costs: Vec<(usize, f64, f64)>,
}

/// Graph handles produced by [`Model::forward`].
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub ledger: GmacsLedger,
    pub shapes: Vec<LayerShape>,
    pub weight_vars: Vec<(Var, Var)>,
    pub scale_vars: Vec<ScaleVars>,
}

impl Model {
    /// Builds a model with He-uniform conv weights and zero biases. The spec
    /// must not contain fixed-stride resizers.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Model> {
        for (index, layer) in spec.layers.iter().enumerate() {
            let fixed = matches!(layer, LayerSpec::Pool { .. } | LayerSpec::Conv { stride: 2.., .. });
            if fixed {
                return Err(Error::Layer {
                    index,
                    kind: layer.kind().into(),
                    source: Box::new(Error::invalid("fixed-stride resizer; call replace_resizers first")),
                });
            }
        }
        let scales = spec.initial_scales()?;
        spec.initial_shapes()?;
        let ratios: Vec<_> = scales.iter().map(ScaleParam::ratio).collect();
        let initial_costs = spec.layer_costs(&ratios)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        for layer in &spec.layers {
            let Some([ws, bs]) = layer.weight_shapes() else { continue };
            let fan_in: usize = match layer {
                LayerSpec::Conv { .. } => ws[1..].iter().product(),
                _ => ws[0],
            };
            let bound = match layer {
                LayerSpec::Conv { .. } => (6.0 / fan_in as f64).sqrt(),
                _ => (1.0 / fan_in as f64).sqrt(),
            };
            let n: usize = ws.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            weights.push((Tensor::new(&ws, data)?, Tensor::zeros(&bs)?));
        }
        Ok(Model {
            spec,
            weights,
            scales,
            initial_costs,
        })
    }

    pub fn ratios(&self) -> Vec<(f64, f64)> {
        self.scales.iter().map(ScaleParam::ratio).collect()
    }

    /// Total GMACs at the initial scale factors.
    pub fn initial_gmacs(&self) -> f64 {
        self.initial_costs.iter().map(|c| c.1).sum()
    }

    pub fn initial_costs(&self) -> &[(usize, f64, f64)] {
        &self.initial_costs
    }

    /// Resizer layer indices with their slot, in layer order.
    pub fn resizer_layers(&self) -> Vec<(usize, usize, usize)> {
        let (slots, _) = self.spec.scale_slots().expect("validated at init");
        self.spec
            .layers
            .iter()
            .zip(slots)
            .enumerate()
            .filter_map(|(i, (l, s))| match l {
                LayerSpec::DynoPool { resizer, .. } => Some((i, *resizer, s.expect("slot"))),
                _ => None,
            })
            .collect()
    }

    /// Named parameter tensors in a fixed order (weights then scales).
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut k = 0;
        for (index, layer) in self.spec.layers.iter().enumerate() {
            if layer.weight_shapes().is_some() {
                let (w, b) = &self.weights[k];
                out.push((format!("layer{index}.{}.weight", layer.kind()), w.clone()));
                out.push((format!("layer{index}.{}.bias", layer.kind()), b.clone()));
                k += 1;
            }
        }
        for (slot, s) in self.scales.iter().enumerate() {
            out.push((format!("scale{slot}.alpha"), Tensor::new(&[2], vec![s.alpha_h, s.alpha_w]).expect("2 values")));
        }
        out
    }

    /// Inverse of [`Model::named_tensors`].
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let expected = self.named_tensors();
        for (i, (name, t)) in expected.iter().enumerate() {
            let Some((got_name, got)) = tensors.get(i) else {
                return Err(Error::Checkpoint {
                    field: name.clone(),
                    detail: "missing from checkpoint".into(),
                });
            };
            if got_name != name {
                return Err(Error::Checkpoint {
                    field: name.clone(),
                    detail: format!("checkpoint has `{got_name}` here"),
                });
            }
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint {
                    field: name.clone(),
                    detail: format!("shape {:?}, expected {:?}", got.shape(), t.shape()),
                });
            }
        }
        if let Some((extra, _)) = tensors.get(expected.len()) {
            return Err(Error::Checkpoint {
                field: extra.clone(),
                detail: "not present in the network".into(),
            });
        }
        let n_weights = self.weights.len();
        for (k, pair) in tensors[..2 * n_weights].chunks(2).enumerate() {
            self.weights[k] = (pair[0].1.clone(), pair[1].1.clone());
        }
        for (slot, (_, t)) in tensors[2 * n_weights..].iter().enumerate() {
            self.scales[slot] = ScaleParam::new(t.data()[0], t.data()[1])?;
        }
        Ok(())
    }

    /// Forward pass over `batch: [B, C, H, W]`.
    pub fn forward(&self, g: &mut Graph, batch: &Tensor) -> Result<ForwardPass> {
        let (c0, h0, w0) = self.spec.input;
        let bs = batch.shape();
        if bs.len() != 4 || bs[1..] != [c0, h0, w0] {
            return Err(Error::shape(
                "network",
                format!("batch {bs:?} does not match input ({c0}, {h0}, {w0})"),
            ));
        }
        let (slots, _) = self.spec.scale_slots()?;
        let scale_vars: Vec<ScaleVars> = self.scales.iter().map(|s| s.register(g)).collect();
        let mut x = g.constant(batch.clone());
        let mut h_var = g.scalar(h0 as f64);
        let mut w_var = g.scalar(w0 as f64);
        let mut ledger = GmacsLedger::default();
        let mut shapes = Vec::new();
        let mut weight_vars = Vec::new();
        let mut costs = self.initial_costs.iter();
        for (index, (layer, slot)) in self.spec.layers.iter().zip(&slots).enumerate() {
            let wrap = |e: Error| Error::Layer {
                index,
                kind: layer.kind().into(),
                source: Box::new(e),
            };
            match *layer {
                LayerSpec::Conv { padding, .. } => {
                    let (w, b) = &self.weights[weight_vars.len()];
                    let (wv, bv) = (g.param(w.clone()), g.param(b.clone()));
                    weight_vars.push((wv, bv));
                    x = g.conv2d(x, wv, bv, padding).map_err(wrap)?;
                }
                LayerSpec::Relu => x = g.relu(x),
                LayerSpec::DynoPool { .. } => {
                    let vars = scale_vars[slot.expect("resizer slot")];
                    let (out, geom) = dynopool::resize(g, x, h_var, w_var, vars.r_h, vars.r_w).map_err(wrap)?;
                    x = out;
                    h_var = geom.h_ste;
                    w_var = geom.w_ste;
                }
                LayerSpec::GlobalAvgPool => x = g.global_avg_pool(x).map_err(wrap)?,
                LayerSpec::Flatten => {
                    let s = g.shape(x).to_vec();
                    x = g.reshape(x, &[s[0], s[1..].iter().product()]).map_err(wrap)?;
                }
                LayerSpec::Linear { .. } => {
                    let (w, b) = &self.weights[weight_vars.len()];
                    let (wv, bv) = (g.param(w.clone()), g.param(b.clone()));
                    weight_vars.push((wv, bv));
                    let y = g.matmul(x, wv).map_err(wrap)?;
                    x = g.add(y, bv).map_err(wrap)?;
                }
                LayerSpec::Pool { .. } => {
                    return Err(wrap(Error::invalid("fixed-stride pooling is not executable")));
                }
            }
            let s = g.shape(x);
            let spatial = s.len() == 4;
            let (h, w) = if spatial { (s[2], s[3]) } else { (1, 1) };
            if spatial {
                shapes.push(LayerShape { layer: index, h, w });
            }
            if matches!(layer, LayerSpec::Conv { .. } | LayerSpec::Linear { .. }) {
                let &(cost_layer, initial_gmacs, initial_area) = costs.next().expect("cost per layer");
                debug_assert_eq!(cost_layer, index);
                let live_area = if spatial { g.mul(h_var, w_var)? } else { g.scalar(1.0) };
                ledger.push(LedgerEntry {
                    layer: index,
                    initial_gmacs,
                    initial_area,
                    live_area,
                    area: h * w,
                });
            }
        }
        Ok(ForwardPass {
            logits: x,
            ledger,
            shapes,
            weight_vars,
            scale_vars,
        })
    }
}
