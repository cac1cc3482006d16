//! Network graph and labeled dataset types.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Operation performed by one layer, with its integer attributes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// `y = W x + b`, weight `[out, in]`, optional bias `[out]`.
    Linear,
    /// Direct convolution, weight `[out_ch, in_ch, kh, kw]`, optional bias `[out_ch]`.
    Conv2d { stride: usize, padding: usize },
    Relu,
    Relu6,
    /// Inference-mode normalization over channel (or feature) axis 0 of each
    /// sample, parameters `gamma`, `beta`, `running_mean`, `running_var`.
    #[serde(rename = "batchnorm")]
    BatchNorm { eps: f64 },
    AvgPool2d { kernel: usize, stride: usize },
    /// `[c, h, w] -> [c]`.
    GlobalAvgPool,
    /// Residual connection: adds the output of layer `from`.
    Add { from: usize },
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Linear => "linear",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::Relu6 => "relu6",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::AvgPool2d { .. } => "avgpool2d",
            LayerKind::GlobalAvgPool => "global_avgpool",
            LayerKind::Add { .. } => "add",
            LayerKind::Flatten => "flatten",
        }
    }

    /// Linear and conv2d layers carry quantizable weights and inputs.
    pub fn is_quantizable(&self) -> bool {
        matches!(self, LayerKind::Linear | LayerKind::Conv2d { .. })
    }
}

/// One layer: its kind, an optional explicit input and named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Index of the layer whose output feeds this one. `None` means the
    /// previous layer (or the network input for layer 0).
    pub input: Option<usize>,
    pub params: BTreeMap<String, Tensor>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        Self {
            kind,
            input: None,
            params: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, name: &str, t: Tensor) -> Self {
        self.params.insert(name.to_string(), t);
        self
    }

    pub fn with_input(mut self, input: usize) -> Self {
        self.input = Some(input);
        self
    }

    pub fn linear(weight: Tensor, bias: Option<Tensor>) -> Self {
        let mut l = Self::new(LayerKind::Linear).with_param("weight", weight);
        if let Some(b) = bias {
            l = l.with_param("bias", b);
        }
        l
    }

    pub fn conv2d(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        let mut l = Self::new(LayerKind::Conv2d { stride, padding }).with_param("weight", weight);
        if let Some(b) = bias {
            l = l.with_param("bias", b);
        }
        l
    }

    pub fn batchnorm(gamma: Tensor, beta: Tensor, mean: Tensor, var: Tensor, eps: f64) -> Self {
        Self::new(LayerKind::BatchNorm { eps })
            .with_param("gamma", gamma)
            .with_param("beta", beta)
            .with_param("running_mean", mean)
            .with_param("running_var", var)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn weight(&self) -> &Tensor {
        &self.params["weight"]
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.params.get("bias")
    }

    /// Index of the layer feeding layer `index`, `None` for the network input.
    pub fn source(&self, index: usize) -> Option<usize> {
        match self.input {
            Some(j) => Some(j),
            None => index.checked_sub(1),
        }
    }
}

/// An ordered layer list with its input shape and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    class_count: usize,
    layers: Vec<LayerSpec>,
    pub metadata: BTreeMap<String, String>,
}

fn violation(index: usize, kind: &LayerKind, msg: impl std::fmt::Display) -> Error {
    Error::ShapeContractViolation(format!("layer {index} ({}): {msg}", kind.name()))
}

impl ModelGraph {
    /// Builds a graph and validates the full shape chain.
    pub fn new(
        input_shape: Vec<usize>,
        class_count: usize,
        layers: Vec<LayerSpec>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let g = Self {
            input_shape,
            class_count,
            layers,
            metadata,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn into_parts(self) -> (Vec<usize>, usize, Vec<LayerSpec>, BTreeMap<String, String>) {
        (self.input_shape, self.class_count, self.layers, self.metadata)
    }

    /// Indices of linear/conv2d layers.
    pub fn quantizable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_quantizable())
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-sample output shape of every layer.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.class_count == 0 {
            return Err(Error::ShapeContractViolation("class_count must be positive".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::ShapeContractViolation(format!(
                "invalid input shape {:?}",
                self.input_shape
            )));
        }
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = match layer.source(i) {
                None => self.input_shape.clone(),
                Some(j) if j < i => shapes[j].clone(),
                Some(j) => return Err(violation(i, &layer.kind, format!("input {j} is not an earlier layer"))),
            };
            shapes.push(infer_shape(i, layer, &input, &shapes)?);
        }
        let out = shapes.last().cloned().unwrap_or_else(|| self.input_shape.clone());
        if out != [self.class_count] {
            return Err(Error::ShapeContractViolation(format!(
                "final output shape {out:?} does not match class_count {}",
                self.class_count
            )));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        for layer in &self.layers {
            for t in layer.params.values() {
                t.ensure_finite()?;
            }
        }
        self.layer_shapes().map(|_| ())
    }
}

fn expect_param<'a>(
    index: usize,
    layer: &'a LayerSpec,
    name: &str,
    rank: usize,
) -> Result<&'a Tensor> {
    let t = layer
        .param(name)
        .ok_or_else(|| violation(index, &layer.kind, format!("missing parameter {name}")))?;
    if t.shape().len() != rank {
        return Err(violation(
            index,
            &layer.kind,
            format!("{name} must have {rank} dims, got {:?}", t.shape()),
        ));
    }
    Ok(t)
}

fn check_bias(index: usize, layer: &LayerSpec, out: usize) -> Result<()> {
    if let Some(b) = layer.bias() {
        if b.shape() != [out] {
            return Err(violation(index, &layer.kind, format!("bias shape {:?}, expected [{out}]", b.shape())));
        }
    }
    Ok(())
}

fn infer_shape(
    index: usize,
    layer: &LayerSpec,
    input: &[usize],
    earlier: &[Vec<usize>],
) -> Result<Vec<usize>> {
    let kind = &layer.kind;
    let allowed: &[&str] = match kind {
        LayerKind::Linear | LayerKind::Conv2d { .. } => &["weight", "bias"],
        LayerKind::BatchNorm { .. } => &["gamma", "beta", "running_mean", "running_var"],
        _ => &[],
    };
    if let Some(extra) = layer.params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(violation(index, kind, format!("unexpected parameter {extra}")));
    }
    match *kind {
        LayerKind::Linear => {
            let w = expect_param(index, layer, "weight", 2)?;
            let (out, inp) = (w.shape()[0], w.shape()[1]);
            if input != [inp] {
                return Err(violation(index, kind, format!("input shape {input:?}, weight expects [{inp}]")));
            }
            check_bias(index, layer, out)?;
            Ok(vec![out])
        }
        LayerKind::Conv2d { stride, padding } => {
            let w = expect_param(index, layer, "weight", 4)?;
            let [oc, ic, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
            if stride == 0 {
                return Err(violation(index, kind, "stride must be positive"));
            }
            if input.len() != 3 || input[0] != ic {
                return Err(violation(index, kind, format!("input shape {input:?}, weight expects [{ic}, h, w]")));
            }
            let (h, wd) = (input[1] + 2 * padding, input[2] + 2 * padding);
            if h < kh || wd < kw {
                return Err(violation(index, kind, "kernel larger than padded input"));
            }
            check_bias(index, layer, oc)?;
            Ok(vec![oc, (h - kh) / stride + 1, (wd - kw) / stride + 1])
        }
        LayerKind::Relu | LayerKind::Relu6 => Ok(input.to_vec()),
        LayerKind::BatchNorm { eps } => {
            if !(eps >= 0.0) {
                return Err(violation(index, kind, "eps must be non-negative"));
            }
            let c = input.first().copied().unwrap_or(0);
            for name in ["gamma", "beta", "running_mean", "running_var"] {
                let t = expect_param(index, layer, name, 1)?;
                if t.shape() != [c] {
                    return Err(violation(index, kind, format!("{name} shape {:?}, expected [{c}]", t.shape())));
                }
            }
            if layer.params["running_var"].data().iter().any(|&v| v < 0.0) {
                return Err(violation(index, kind, "negative running_var"));
            }
            Ok(input.to_vec())
        }
        LayerKind::AvgPool2d { kernel, stride } => {
            if input.len() != 3 || kernel == 0 || stride == 0 || input[1] < kernel || input[2] < kernel {
                return Err(violation(index, kind, format!("cannot pool {input:?} with kernel {kernel}")));
            }
            Ok(vec![input[0], (input[1] - kernel) / stride + 1, (input[2] - kernel) / stride + 1])
        }
        LayerKind::GlobalAvgPool => {
            if input.len() != 3 {
                return Err(violation(index, kind, format!("expects [c, h, w], got {input:?}")));
            }
            Ok(vec![input[0]])
        }
        LayerKind::Add { from } => {
            if from >= index {
                return Err(violation(index, kind, format!("residual source {from} is not an earlier layer")));
            }
            if earlier[from] != input {
                return Err(violation(index, kind, format!("residual shape {:?} vs input {input:?}", earlier[from])));
            }
            Ok(input.to_vec())
        }
        LayerKind::Flatten => Ok(vec![input.iter().product()]),
    }
}

/// Which split a dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Calibration,
}

/// Images `[n, c, h, w]` with one class label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize, split: Split) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if images.shape().len() < 2 {
            return Err(Error::ShapeContractViolation(format!(
                "dataset images need a leading sample axis, got {:?}",
                images.shape()
            )));
        }
        if labels.len() != n {
            return Err(Error::ShapeContractViolation(format!(
                "{} labels for {n} images",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::ShapeContractViolation(format!(
                "label {bad} outside 0..{class_count}"
            )));
        }
        images.ensure_finite()?;
        Ok(Self {
            images,
            labels,
            class_count,
            split,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample image shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn image(&self, index: usize) -> &[f32] {
        self.images.row(index)
    }

    /// New dataset holding the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize], split: Split) -> LabeledDataset {
        let row = self.images.row_len();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        LabeledDataset {
            images: Tensor::new(shape, data).expect("selected rows match shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            split,
        }
    }

    /// Sample indices grouped by class.
    pub fn class_pools(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            pools[l].push(i);
        }
        pools
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_count];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub(crate) fn images_mut(&mut self) -> &mut Tensor {
        &mut self.images
    }
}
