//! The multi-seed reliability benchmark on the reference workload.
//!
//! Runs 50 calibration trials at W4A4 for MSE and MinMax and prints the
//! per-class table, the worst class and the box-plot rows of the MSE run.
//!
//! Run with `cargo run --release --example reliability_report`.

use ptq_reliability::harness::{boxplot_csv, run_benchmark, table_csv, worst_group, BitWidths, TrialSettings, Workload};
use ptq_reliability::reference::ReferenceWorkload;
use ptq_reliability::{CalibSpec, MetricKind, SearchConfig};

fn main() -> anyhow::Result<()> {
    let r = ReferenceWorkload::default().build()?;
    let work = Workload {
        model: &r.model,
        train: &r.train,
        test: &r.test,
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());

    let mut reports = Vec::new();
    for metric in [MetricKind::Mse, MetricKind::MinMax] {
        let settings = TrialSettings {
            metric,
            bits: Some(BitWidths::uniform(4)?),
            calib: CalibSpec::default(),
            search: SearchConfig::default(),
        };
        reports.push(run_benchmark(work, &settings, 50, 0, workers)?);
    }

    let refs: Vec<_> = reports.iter().collect();
    print!("{}", table_csv(&refs));
    for report in &reports {
        let (class, mean, drop) = worst_group(report);
        let above = report.classes.iter().filter(|c| c.std > report.average.std).count();
        println!(
            "{}: worst class {class} at {:.1}% (drop {:.1} points); {above}/10 classes vary more than the average",
            report.label,
            mean * 100.0,
            drop * 100.0
        );
    }
    println!("\n{}", boxplot_csv(&reports[0]));
    Ok(())
}
