//! Effect of calibration set size, noise and class bias on W4A4 accuracy.
//!
//! Run with `cargo run --release --example calibration_factors`.

use ptq_reliability::harness::{run_benchmark, BitWidths, TrialSettings, Workload};
use ptq_reliability::reference::ReferenceWorkload;
use ptq_reliability::{CalibSpec, ClassBias, MetricKind, SearchConfig};

const TRIALS: usize = 20;

fn main() -> anyhow::Result<()> {
    let r = ReferenceWorkload::default().build()?;
    let work = Workload {
        model: &r.model,
        train: &r.train,
        test: &r.test,
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let run = |name: &str, calib: CalibSpec| -> anyhow::Result<()> {
        let settings = TrialSettings {
            metric: MetricKind::Mse,
            bits: Some(BitWidths::uniform(4)?),
            calib,
            search: SearchConfig::default(),
        };
        let report = run_benchmark(work, &settings, TRIALS, 0, workers)?;
        let s = &report.average;
        println!("{name:<24} {:>6.2}% ± {:.2}", s.mean * 100.0, s.std * 100.0);
        Ok(())
    };

    for size in [1, 4, 32, 256] {
        run(&format!("size {size}"), CalibSpec { size, ..CalibSpec::default() })?;
    }
    for noise_fraction in [0.25, 0.5, 1.0] {
        run(
            &format!("noise {noise_fraction}"),
            CalibSpec { noise_fraction, ..CalibSpec::default() },
        )?;
    }
    for p in [0.5, 1.0] {
        run(
            &format!("class 8 bias p={p}"),
            CalibSpec {
                bias: Some(ClassBias { class: 8, p }),
                ..CalibSpec::default()
            },
        )?;
    }
    Ok(())
}
