//! Built-in reference workload: a synthetic 10-class image dataset and a
//! small MLP trained on it with mini-batch SGD.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LabeledDataset, LayerKind, LayerSpec, ModelGraph, Split};
use crate::rng::{tags, Stream};
use crate::tensor::Tensor;

/// Data and training seed of the default reference workload.
pub const DEFAULT_SEED: u64 = 0;

/// Shape and noise level of the synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Side of the coarse random grid each class template is upsampled from.
    pub template_grid: usize,
    pub noise_sigma: f64,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            class_count: 10,
            channels: 1,
            height: 16,
            width: 16,
            template_grid: 4,
            noise_sigma: 0.5,
            train_size: 5000,
            test_size: 10000,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.class_count, self.channels, self.height, self.width, self.template_grid];
        if dims.contains(&0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!("invalid synthetic spec {self:?}")));
        }
        for n in [self.train_size, self.test_size] {
            if n % self.class_count != 0 {
                return Err(Error::InvalidConfig(format!(
                    "split size {n} is not a multiple of {} classes",
                    self.class_count
                )));
            }
        }
        Ok(())
    }

    fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Smooth template: a coarse uniform grid bilinearly upsampled.
fn template(spec: &SyntheticSpec, seed: u64, class: usize) -> Vec<f32> {
    let g = spec.template_grid;
    let mut rng = Stream::indexed(seed, tags::TEMPLATE, class as u64);
    let mut out = Vec::with_capacity(spec.pixels());
    for _ in 0..spec.channels {
        let coarse: Vec<f64> = (0..g * g).map(|_| rng.next_f64()).collect();
        let at = |r: usize, c: usize| coarse[r.min(g - 1) * g + c.min(g - 1)];
        for y in 0..spec.height {
            let fy = if spec.height > 1 { y as f64 * (g - 1) as f64 / (spec.height - 1) as f64 } else { 0.0 };
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            for x in 0..spec.width {
                let fx = if spec.width > 1 { x as f64 * (g - 1) as f64 / (spec.width - 1) as f64 } else { 0.0 };
                let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                out.push((top * (1.0 - ty) + bottom * ty) as f32);
            }
        }
    }
    out
}

fn make_split(spec: &SyntheticSpec, seed: u64, templates: &[Vec<f32>], n: usize, tag: u64, split: Split) -> LabeledDataset {
    let px = spec.pixels();
    let mut data = Vec::with_capacity(n * px);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.class_count;
        let mut rng = Stream::indexed(seed, tag, i as u64);
        data.extend(
            templates[class]
                .iter()
                .map(|&t| (t as f64 + spec.noise_sigma * rng.normal()).clamp(0.0, 1.0) as f32),
        );
        labels.push(class);
    }
    let images = Tensor::new(vec![n, spec.channels, spec.height, spec.width], data).expect("synthetic shape");
    LabeledDataset::new(images, labels, spec.class_count, split).expect("synthetic dataset is valid")
}

/// Deterministic balanced train/test splits. Sample `i` has label
/// `i % class_count`.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let templates: Vec<Vec<f32>> = (0..spec.class_count).map(|c| template(spec, seed, c)).collect();
    Ok((
        make_split(spec, seed, &templates, spec.train_size, tags::TRAIN_SAMPLES, Split::Train),
        make_split(spec, seed, &templates, spec.test_size, tags::TEST_SAMPLES, Split::Test),
    ))
}

/// SGD hyperparameters for [`train_mlp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 12,
            learning_rate: 0.05,
            batch_size: 32,
            seed: DEFAULT_SEED,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("invalid train config {self:?}")));
        }
        Ok(())
    }
}

/// Dense ReLU network in `f64` used only while training.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mlp {
    sizes: Vec<usize>,
    /// Per layer: weights `[out, in]` row-major, then biases.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl Mlp {
    pub(crate) fn init(sizes: Vec<usize>, seed: u64) -> Self {
        let mut rng = Stream::new(seed, tags::INIT);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let std = (2.0 / w[0] as f64).sqrt();
            weights.push((0..w[0] * w[1]).map(|_| rng.normal() * std).collect());
            biases.push(vec![0.0; w[1]]);
        }
        Self { sizes, weights, biases }
    }

    /// Activations of every layer (post-ReLU for hidden layers, logits last).
    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
            let prev = &acts[l];
            let mut y = Vec::with_capacity(out);
            for o in 0..out {
                let row = &w[o * inp..(o + 1) * inp];
                let z = b[o] + row.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>();
                y.push(if l == last { z } else { z.max(0.0) });
            }
            acts.push(y);
        }
        acts
    }

    fn softmax_ce(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        (-(probs[label].max(f64::MIN_POSITIVE)).ln(), probs)
    }

    /// Mean cross-entropy over a batch and its parameter gradients.
    pub(crate) fn loss_and_grad(&self, xs: &[&[f64]], labels: &[usize]) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut gw: Vec<Vec<f64>> = self.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut gb: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        let inv = 1.0 / xs.len() as f64;
        let mut loss = 0.0;
        for (x, &label) in xs.iter().zip(labels) {
            let acts = self.forward(x);
            let (l, probs) = Self::softmax_ce(acts.last().unwrap(), label);
            loss += l * inv;
            let mut delta: Vec<f64> = probs;
            delta[label] -= 1.0;
            for layer in (0..self.weights.len()).rev() {
                let (inp, out) = (self.sizes[layer], self.sizes[layer + 1]);
                let a = &acts[layer];
                for o in 0..out {
                    let d = delta[o] * inv;
                    gb[layer][o] += d;
                    let row = &mut gw[layer][o * inp..(o + 1) * inp];
                    for (g, &ai) in row.iter_mut().zip(a) {
                        *g += d * ai;
                    }
                }
                if layer > 0 {
                    let w = &self.weights[layer];
                    delta = (0..inp)
                        .map(|i| {
                            if a[i] <= 0.0 {
                                0.0
                            } else {
                                (0..out).map(|o| w[o * inp + i] * delta[o]).sum()
                            }
                        })
                        .collect();
                }
            }
        }
        (loss, gw, gb)
    }

    #[cfg(test)]
    pub(crate) fn loss(&self, xs: &[&[f64]], labels: &[usize]) -> f64 {
        xs.iter()
            .zip(labels)
            .map(|(x, &l)| Self::softmax_ce(self.forward(x).last().unwrap(), l).0)
            .sum::<f64>()
            / xs.len() as f64
    }

    fn to_graph(&self, input_shape: Vec<usize>) -> ModelGraph {
        let mut layers = vec![LayerSpec::new(LayerKind::Flatten)];
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
            let wt = Tensor::new(vec![out, inp], w.iter().map(|&v| v as f32).collect()).unwrap();
            let bt = Tensor::from_vec(b.iter().map(|&v| v as f32).collect());
            layers.push(LayerSpec::linear(wt, Some(bt)));
            if l != last {
                layers.push(LayerSpec::new(LayerKind::Relu));
            }
        }
        let mut meta = BTreeMap::new();
        meta.insert("name".to_string(), "reference-mlp".to_string());
        let classes = *self.sizes.last().unwrap();
        ModelGraph::new(input_shape, classes, layers, meta).expect("mlp graph is valid")
    }
}

/// A trained model with its per-epoch mean training loss.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelGraph,
    pub epoch_losses: Vec<f64>,
}

/// Trains `flatten -> (linear -> relu)* -> linear` with softmax
/// cross-entropy, reshuffling every epoch from the config seed.
pub fn train_mlp_with_history(train: &LabeledDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pixels = train.images().row_len();
    let mut sizes = vec![pixels];
    sizes.extend(&config.hidden);
    sizes.push(train.class_count());
    let mut mlp = Mlp::init(sizes, config.seed);

    let xs: Vec<Vec<f64>> = (0..train.len())
        .map(|i| train.image(i).iter().map(|&v| v as f64).collect())
        .collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        Stream::indexed(config.seed, tags::SHUFFLE, epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| xs[i].as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels()[i]).collect();
            let (loss, gw, gb) = mlp.loss_and_grad(&batch, &labels);
            if !loss.is_finite() {
                return Err(Error::DivergedLoss { epoch });
            }
            total += loss * chunk.len() as f64;
            for (w, g) in mlp.weights.iter_mut().zip(&gw) {
                w.iter_mut().zip(g).for_each(|(w, g)| *w -= config.learning_rate * g);
            }
            for (b, g) in mlp.biases.iter_mut().zip(&gb) {
                b.iter_mut().zip(g).for_each(|(b, g)| *b -= config.learning_rate * g);
            }
        }
        epoch_losses.push(total / train.len() as f64);
    }
    let mut model = mlp.to_graph(train.sample_shape().to_vec());
    model.metadata.insert(
        "source".into(),
        format!(
            "train_mlp seed={} epochs={} lr={} batch={}",
            config.seed, config.epochs, config.learning_rate, config.batch_size
        ),
    );
    Ok(TrainOutcome { model, epoch_losses })
}

pub fn train_mlp(train: &LabeledDataset, config: &TrainConfig) -> Result<ModelGraph> {
    Ok(train_mlp_with_history(train, config)?.model)
}

/// Everything needed to rebuild the reference model and its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceWorkload {
    pub data_seed: u64,
    pub synthetic: SyntheticSpec,
    pub training: TrainConfig,
}

impl Default for ReferenceWorkload {
    fn default() -> Self {
        Self {
            data_seed: DEFAULT_SEED,
            synthetic: SyntheticSpec::default(),
            training: TrainConfig::default(),
        }
    }
}

/// The generated splits and the model trained on them.
#[derive(Debug, Clone)]
pub struct ReferenceArtifacts {
    pub model: ModelGraph,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub epoch_losses: Vec<f64>,
}

impl ReferenceWorkload {
    pub fn build(&self) -> Result<ReferenceArtifacts> {
        let (train, test) = gen_synthetic(&self.synthetic, self.data_seed)?;
        let TrainOutcome { model, epoch_losses } = train_mlp_with_history(&train, &self.training)?;
        Ok(ReferenceArtifacts {
            model,
            train,
            test,
            epoch_losses,
        })
    }
}
