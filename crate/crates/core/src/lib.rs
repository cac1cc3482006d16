//! Post-training quantization engine with a per-class reliability benchmark.
//!
//! The crate quantizes small networks with uniform integer fake
//! quantization, calibrates scales with MinMax or a 100-candidate grid
//! search under MSE, cosine distance or KL divergence, and measures how
//! per-class accuracy behaves across many seeded calibration trials.
//!
//! Module map:
//!
//! - [`tensor`], [`metrics`]: tensors, histograms and distance metrics
//! - [`model`], [`archive`]: network graphs, datasets and their file format
//! - [`engine`]: forward passes, activation capture, batchnorm folding, evaluation
//! - [`quant`]: the quantizer and fake-quantized execution
//! - [`calibrate`]: per-site scale selection and network calibration
//! - [`calibset`]: calibration set construction (size, noise, class bias)
//! - [`reference`]: built-in synthetic dataset and MLP trainer
//! - [`harness`]: seeded trials, aggregation, box-plot statistics and reports
//! - [`experiment`]: experiment configs and the `ptq-bench` command set

pub mod archive;
pub mod calibrate;
pub mod calibset;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod reference;
pub mod rng;
pub mod tensor;

pub use calibrate::{MetricKind, SearchConfig};
pub use calibset::{CalibSpec, ClassBias};
pub use engine::{evaluate, forward, PerClassAccuracy, SiteId};
pub use error::{Error, Result};
pub use model::{LabeledDataset, LayerKind, LayerSpec, ModelGraph, Split};
pub use quant::{QuantConfig, QuantParams};
pub use tensor::Tensor;
