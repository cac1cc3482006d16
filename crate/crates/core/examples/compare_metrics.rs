//! How the four calibration metrics pick a clip for the same activations.
//!
//! The samples mimic post-ReLU activations: mostly small values with a long
//! tail. MinMax keeps the whole tail; the searches trade clipping error
//! against rounding error, each in its own way.
//!
//! Run with `cargo run --example compare_metrics`.

use ptq_reliability::calibrate::{calibrate_activation, search_trace};
use ptq_reliability::metrics::mse;
use ptq_reliability::quant::fake_quant;
use ptq_reliability::rng::Stream;
use ptq_reliability::{MetricKind, SearchConfig, Tensor};

fn main() -> anyhow::Result<()> {
    let mut rng = Stream::new(3, 0);
    let samples: Vec<f32> = (0..8192)
        .map(|_| {
            let z = rng.normal();
            (z.max(0.0) * (0.5 * rng.normal()).exp()) as f32
        })
        .collect();
    let x = Tensor::from_vec(samples);
    let search = SearchConfig::default();
    println!("max = {:.4}", x.max_abs());

    for bits in [4u8, 8] {
        println!("\nk = {bits}");
        for metric in MetricKind::ALL {
            let p = calibrate_activation(&x, bits, metric, &search)?;
            let err = mse(&x, &fake_quant(&x, &p))?;
            println!("  {metric:<7} clip {:>8.4}  scale {:>9.6}  mse {err:.3e}", p.clip(), p.scale());
        }
    }

    // The whole objective curve of one search, every tenth candidate.
    let trace = search_trace(&x, 4, false, MetricKind::Kl, &search)?;
    println!("\nKL objective at k = 4:");
    for (clip, obj) in trace.clips.iter().zip(&trace.objectives).step_by(10) {
        println!("  clip {clip:>8.4}  kl {obj:.5}");
    }
    println!("  best clip {:.4}", trace.clips[trace.best]);
    Ok(())
}
