//! Forward execution of a [`ModelGraph`], activation capture, batchnorm
//! folding and per-class accuracy evaluation.
//!
//! Dot products accumulate in `f32`, sequentially in canonical index order,
//! so a forward pass is bitwise reproducible on one platform.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{LabeledDataset, LayerKind, LayerSpec, ModelGraph};
use crate::quant::{QuantConfig, QuantizedModel};
use crate::tensor::Tensor;

/// Samples per forward call when sweeping a dataset.
pub const EVAL_BATCH: usize = 500;

/// What a quantization site quantizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SiteKind {
    /// The input activation of a linear/conv2d layer.
    Input,
    /// The weight tensor of a linear/conv2d layer.
    Weight,
}

/// A quantization site: `layer{N}.input` or `layer{N}.weight`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteId {
    pub layer: usize,
    pub kind: SiteKind,
}

impl SiteId {
    pub fn input(layer: usize) -> Self {
        Self { layer, kind: SiteKind::Input }
    }

    pub fn weight(layer: usize) -> Self {
        Self { layer, kind: SiteKind::Weight }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            SiteKind::Input => "input",
            SiteKind::Weight => "weight",
        };
        write!(f, "layer{}.{kind}", self.layer)
    }
}

impl FromStr for SiteId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownSite(s.to_string());
        let rest = s.strip_prefix("layer").ok_or_else(bad)?;
        let (num, kind) = rest.split_once('.').ok_or_else(bad)?;
        let layer = num.parse().map_err(|_| bad())?;
        let kind = match kind {
            "input" => SiteKind::Input,
            "weight" => SiteKind::Weight,
            _ => return Err(bad()),
        };
        Ok(SiteId { layer, kind })
    }
}

impl Serialize for SiteId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SiteId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Layer schedule and the activation sites it exposes.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionPlan {
    pub schedule: Vec<usize>,
    /// One input site per linear/conv2d layer, in layer order.
    pub capture_sites: Vec<SiteId>,
    /// Last layer index reading each layer's output.
    last_use: Vec<usize>,
}

impl ExecutionPlan {
    pub fn new(model: &ModelGraph) -> Self {
        let n = model.layers().len();
        let mut last_use = (0..n).map(|i| i + 1).collect::<Vec<_>>();
        for (i, layer) in model.layers().iter().enumerate() {
            if let Some(j) = layer.source(i) {
                last_use[j] = last_use[j].max(i);
            }
            if let LayerKind::Add { from } = layer.kind {
                last_use[from] = last_use[from].max(i);
            }
        }
        Self {
            schedule: (0..n).collect(),
            capture_sites: model.quantizable_layers().into_iter().map(SiteId::input).collect(),
            last_use,
        }
    }

    /// Every weight and input site of the model.
    pub fn all_sites(&self) -> Vec<SiteId> {
        let mut sites: Vec<SiteId> = self
            .capture_sites
            .iter()
            .flat_map(|s| [*s, SiteId::weight(s.layer)])
            .collect();
        sites.sort();
        sites
    }
}

/// Per-layer weight replacement and a hook on every linear/conv2d input.
pub(crate) struct Hooks<'a, F: FnMut(usize, &mut Tensor)> {
    pub weights: Option<&'a [Option<Tensor>]>,
    pub on_input: F,
}

fn check_batch(model: &ModelGraph, batch: &Tensor) -> Result<()> {
    let shape = batch.shape();
    if shape.is_empty() || &shape[1..] != model.input_shape() {
        let mut expected = vec![shape.first().copied().unwrap_or(0)];
        expected.extend_from_slice(model.input_shape());
        return Err(Error::ShapeMismatch {
            expected,
            actual: shape.to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn execute<F: FnMut(usize, &mut Tensor)>(
    model: &ModelGraph,
    plan: &ExecutionPlan,
    batch: &Tensor,
    mut hooks: Hooks<'_, F>,
) -> Result<Tensor> {
    check_batch(model, batch)?;
    let layers = model.layers();
    let mut outputs: Vec<Option<Tensor>> = vec![None; layers.len()];
    for &i in &plan.schedule {
        let layer = &layers[i];
        let src = match layer.source(i) {
            None => batch,
            Some(j) => outputs[j].as_ref().expect("plan keeps live outputs"),
        };
        let out = if layer.kind.is_quantizable() {
            let mut x = src.clone();
            (hooks.on_input)(i, &mut x);
            let w = hooks
                .weights
                .and_then(|ws| ws[i].as_ref())
                .unwrap_or_else(|| layer.weight());
            match layer.kind {
                LayerKind::Linear => linear(&x, w, layer.bias()),
                LayerKind::Conv2d { stride, padding } => conv2d(&x, w, layer.bias(), stride, padding),
                _ => unreachable!(),
            }
        } else {
            apply_simple(layer, src, &outputs)
        };
        outputs[i] = Some(out);
        for j in 0..i {
            if plan.last_use[j] <= i && j + 1 != layers.len() {
                outputs[j] = None;
            }
        }
    }
    let logits = match outputs.pop().flatten() {
        Some(t) => t,
        None => batch.clone(),
    };
    let n = batch.shape()[0];
    logits.reshape(vec![n, model.class_count()])
}

/// Full-precision forward pass, returning `[n, class_count]` logits.
pub fn forward(model: &ModelGraph, batch: &Tensor) -> Result<Tensor> {
    let plan = ExecutionPlan::new(model);
    execute(
        model,
        &plan,
        batch,
        Hooks {
            weights: None,
            on_input: |_, _: &mut Tensor| {},
        },
    )
}

/// Forward pass that also returns the tensors flowing into the requested
/// linear/conv2d input sites.
pub fn forward_with_capture(
    model: &ModelGraph,
    batch: &Tensor,
    sites: &[SiteId],
) -> Result<(Tensor, BTreeMap<SiteId, Tensor>)> {
    let plan = ExecutionPlan::new(model);
    let wanted: BTreeSet<usize> = sites
        .iter()
        .map(|s| {
            if s.kind == SiteKind::Input && plan.capture_sites.contains(s) {
                Ok(s.layer)
            } else {
                Err(Error::UnknownSite(s.to_string()))
            }
        })
        .collect::<Result<_>>()?;
    let mut captured = BTreeMap::new();
    let logits = execute(
        model,
        &plan,
        batch,
        Hooks {
            weights: None,
            on_input: |i, x: &mut Tensor| {
                if wanted.contains(&i) {
                    captured.insert(SiteId::input(i), x.clone());
                }
            },
        },
    )?;
    Ok((logits, captured))
}

fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let n = x.shape()[0];
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    let mut y = Vec::with_capacity(n * out);
    for s in 0..n {
        let xs = x.row(s);
        for o in 0..out {
            let wr = &wd[o * inp..(o + 1) * inp];
            let mut acc = 0.0f32;
            for k in 0..inp {
                acc += wr[k] * xs[k];
            }
            y.push(acc + b.map_or(0.0, |b| b.data()[o]));
        }
    }
    Tensor::new(vec![n, out], y).expect("linear output shape")
}

fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, padding: usize) -> Tensor {
    let (n, ic, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let (xd, wdata) = (x.data(), w.data());
    let mut y = Vec::with_capacity(n * oc * oh * ow);
    for s in 0..n {
        let xs = &xd[s * ic * h * wd..(s + 1) * ic * h * wd];
        for o in 0..oc {
            let bias = b.map_or(0.0, |b| b.data()[o]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for c in 0..ic {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += wdata[((o * ic + c) * kh + ky) * kw + kx]
                                    * xs[(c * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    y.push(acc + bias);
                }
            }
        }
    }
    Tensor::new(vec![n, oc, oh, ow], y).expect("conv output shape")
}

/// Per-channel `(scale, shift)` such that `bn(x) = x * scale + shift`.
fn bn_affine(layer: &LayerSpec, eps: f64) -> Vec<(f64, f64)> {
    let p = |n: &str| layer.params[n].data();
    let (g, b, m, v) = (p("gamma"), p("beta"), p("running_mean"), p("running_var"));
    (0..g.len())
        .map(|c| {
            let scale = g[c] as f64 / (v[c] as f64 + eps).sqrt();
            (scale, b[c] as f64 - m[c] as f64 * scale)
        })
        .collect()
}

fn apply_simple(layer: &LayerSpec, x: &Tensor, outputs: &[Option<Tensor>]) -> Tensor {
    let shape = x.shape();
    let n = shape[0];
    match layer.kind {
        LayerKind::Relu => x.map(|v| v.max(0.0)),
        LayerKind::Relu6 => x.map(|v| v.clamp(0.0, 6.0)),
        LayerKind::Flatten => x.clone().reshape(vec![n, x.row_len()]).expect("flatten"),
        LayerKind::BatchNorm { eps } => {
            let affine = bn_affine(layer, eps);
            let c = shape[1];
            let inner = x.row_len() / c;
            let mut y = x.clone();
            for (idx, v) in y.data_mut().iter_mut().enumerate() {
                let ch = (idx / inner) % c;
                let (s, t) = affine[ch];
                *v = *v * s as f32 + t as f32;
            }
            y
        }
        LayerKind::AvgPool2d { kernel, stride } => {
            let (c, h, w) = (shape[1], shape[2], shape[3]);
            let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
            let area = (kernel * kernel) as f32;
            let xd = x.data();
            let mut y = Vec::with_capacity(n * c * oh * ow);
            for plane in 0..n * c {
                let p = &xd[plane * h * w..(plane + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f32;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                acc += p[(oy * stride + ky) * w + ox * stride + kx];
                            }
                        }
                        y.push(acc / area);
                    }
                }
            }
            Tensor::new(vec![n, c, oh, ow], y).expect("avgpool shape")
        }
        LayerKind::GlobalAvgPool => {
            let c = shape[1];
            let area = shape[2] * shape[3];
            let y = x
                .data()
                .chunks_exact(area)
                .map(|p| {
                    let mut acc = 0.0f32;
                    for &v in p {
                        acc += v;
                    }
                    acc / area as f32
                })
                .collect();
            Tensor::new(vec![n, c], y).expect("global pool shape")
        }
        LayerKind::Add { from } => {
            let other = outputs[from].as_ref().expect("residual source kept alive");
            let mut y = x.clone();
            for (a, b) in y.data_mut().iter_mut().zip(other.data()) {
                *a += *b;
            }
            y
        }
        LayerKind::Linear | LayerKind::Conv2d { .. } => unreachable!(),
    }
}

/// Folds every batchnorm into the linear/conv2d layer feeding it.
pub fn fold_batchnorm(model: &ModelGraph) -> Result<ModelGraph> {
    let layers = model.layers();
    let n = layers.len();
    // Consumers of each layer output.
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, l) in layers.iter().enumerate() {
        if let Some(j) = l.source(i) {
            consumers[j].push(i);
        }
        if let LayerKind::Add { from } = l.kind {
            consumers[from].push(i);
        }
    }

    let mut folded: Vec<LayerSpec> = Vec::with_capacity(n);
    let mut sources: Vec<Option<usize>> = Vec::with_capacity(n);
    // old index -> new index
    let mut remap: Vec<usize> = Vec::with_capacity(n);
    for (i, layer) in layers.iter().enumerate() {
        if let LayerKind::BatchNorm { eps } = layer.kind {
            let j = layer
                .source(i)
                .filter(|&j| layers[j].kind.is_quantizable() && consumers[j] == [i])
                .ok_or(Error::UnfoldablePattern(i))?;
            let target = remap[j];
            let prev = &mut folded[target];
            let affine = bn_affine(layer, eps);
            let w = prev.weight();
            let out = w.shape()[0];
            if affine.len() != out {
                return Err(Error::UnfoldablePattern(i));
            }
            let per_out = w.len() / out;
            let mut wd = w.data().to_vec();
            for (idx, v) in wd.iter_mut().enumerate() {
                *v = (*v as f64 * affine[idx / per_out].0) as f32;
            }
            let bias: Vec<f32> = (0..out)
                .map(|o| {
                    let b = prev.bias().map_or(0.0, |b| b.data()[o] as f64);
                    (b * affine[o].0 + affine[o].1) as f32
                })
                .collect();
            let wshape = w.shape().to_vec();
            prev.params.insert("weight".into(), Tensor::new(wshape, wd)?);
            prev.params.insert("bias".into(), Tensor::from_vec(bias));
            remap.push(target);
            continue;
        }
        let mut l = layer.clone();
        if let LayerKind::Add { from } = l.kind {
            l.kind = LayerKind::Add { from: remap[from] };
        }
        sources.push(layer.source(i).map(|j| remap[j]));
        remap.push(folded.len());
        folded.push(l);
    }
    for (k, (l, src)) in folded.iter_mut().zip(sources).enumerate() {
        l.input = match src {
            Some(j) if j + 1 == k => None,
            None if k == 0 => None,
            other => other,
        };
    }
    let (input_shape, class_count, _, metadata) = model.clone().into_parts();
    ModelGraph::new(input_shape, class_count, folded, metadata)
}

/// Per-class and average top-1 accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassAccuracy {
    pub per_class: Vec<f64>,
    pub average: f64,
    pub correct: Vec<usize>,
    pub total: Vec<usize>,
}

impl PerClassAccuracy {
    pub fn from_predictions(labels: &[usize], predictions: &[usize], class_count: usize) -> Self {
        let mut correct = vec![0; class_count];
        let mut total = vec![0; class_count];
        for (&l, &p) in labels.iter().zip(predictions) {
            total[l] += 1;
            if l == p {
                correct[l] += 1;
            }
        }
        let per_class = correct
            .iter()
            .zip(&total)
            .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect();
        let all: usize = correct.iter().sum();
        Self {
            per_class,
            average: all as f64 / labels.len().max(1) as f64,
            correct,
            total,
        }
    }
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 predictions for every sample of `data`.
pub fn predict(model: &ModelGraph, data: &LabeledDataset, quant: Option<&QuantConfig>) -> Result<Vec<usize>> {
    let quantized = quant.map(|c| QuantizedModel::new(model, c)).transpose()?;
    let mut preds = Vec::with_capacity(data.len());
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_BATCH).min(data.len());
        let batch = data.images().rows(start, end);
        let logits = match &quantized {
            Some(q) => q.forward(&batch)?,
            None => forward(model, &batch)?,
        };
        preds.extend((0..end - start).map(|r| argmax(logits.row(r))));
        start = end;
    }
    Ok(preds)
}

/// Accuracy of `model` on `data`, in full precision or under `quant`.
pub fn evaluate(model: &ModelGraph, data: &LabeledDataset, quant: Option<&QuantConfig>) -> Result<PerClassAccuracy> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict(model, data, quant)?;
    Ok(PerClassAccuracy::from_predictions(data.labels(), &preds, model.class_count()))
}
