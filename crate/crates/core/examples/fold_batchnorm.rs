//! Folding batchnorm into the preceding convolution, then quantizing.
//!
//! Run with `cargo run --example fold_batchnorm`.

use ptq_reliability::calibrate::calibrate_network;
use ptq_reliability::engine::fold_batchnorm;
use ptq_reliability::quant::quantized_forward;
use ptq_reliability::rng::Stream;
use ptq_reliability::{forward, LabeledDataset, LayerKind, LayerSpec, MetricKind, ModelGraph, SearchConfig, Split, Tensor};

fn randn(rng: &mut Stream, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| (rng.normal() * scale) as f32).collect()).unwrap()
}

fn positive(rng: &mut Stream, n: usize) -> Tensor {
    Tensor::new(vec![n], (0..n).map(|_| 0.5 + rng.next_f64() as f32).collect()).unwrap()
}

fn main() -> anyhow::Result<()> {
    let mut rng = Stream::new(11, 0);
    let bn = |rng: &mut Stream, c: usize| {
        LayerSpec::batchnorm(positive(rng, c), randn(rng, vec![c], 0.1), randn(rng, vec![c], 0.1), positive(rng, c), 1e-5)
    };
    let layers = vec![
        LayerSpec::conv2d(randn(&mut rng, vec![8, 1, 3, 3], 0.5), None, 1, 1),
        bn(&mut rng, 8),
        LayerSpec::new(LayerKind::Relu),
        LayerSpec::conv2d(randn(&mut rng, vec![8, 8, 3, 3], 0.2), None, 1, 1),
        bn(&mut rng, 8),
        LayerSpec::new(LayerKind::Add { from: 2 }),
        LayerSpec::new(LayerKind::Relu),
        LayerSpec::new(LayerKind::GlobalAvgPool),
        LayerSpec::linear(randn(&mut rng, vec![4, 8], 0.5), Some(randn(&mut rng, vec![4], 0.1))),
    ];
    let model = ModelGraph::new(vec![1, 8, 8], 4, layers, Default::default())?;
    let folded = fold_batchnorm(&model)?;
    println!("layers before folding: {}", model.layers().len());
    for (i, l) in folded.layers().iter().enumerate() {
        println!("  {i}: {}", l.kind.name());
    }

    let x = randn(&mut rng, vec![16, 1, 8, 8], 1.0);
    let a = forward(&model, &x)?;
    let b = forward(&folded, &x)?;
    let diff = a.data().iter().zip(b.data()).fold(0.0f32, |m, (p, q)| m.max((p - q).abs()));
    println!("max |unfolded - folded| = {diff:.2e}");

    let calib = LabeledDataset::new(randn(&mut rng, vec![32, 1, 8, 8], 1.0), vec![0; 32], 4, Split::Calibration)?;
    let config = calibrate_network(&folded, &calib, MetricKind::Mse, 8, 8, &SearchConfig::default())?;
    let q = quantized_forward(&folded, &config, &x)?;
    let qdiff = b.data().iter().zip(q.data()).fold(0.0f32, |m, (p, r)| m.max((p - r).abs()));
    println!("{} sites calibrated; max |fp - W8A8| = {qdiff:.3e}", config.len());
    Ok(())
}
