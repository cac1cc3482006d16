//! Seeded reliability trials and their aggregation.
//!
//! A trial draws a calibration set from the training split with its own
//! seed, calibrates the model and evaluates it on the full test split. A
//! benchmark runs trials for seeds `base_seed .. base_seed + trial_count`
//! and summarizes per-class and average accuracy across them: mean and
//! population standard deviation, and box-plot statistics of the accuracy
//! drop relative to the full-precision model.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{calibrate_network, MetricKind, SearchConfig};
use crate::calibset::CalibSpec;
use crate::engine::{evaluate, PerClassAccuracy};
use crate::error::{Error, Result};
use crate::model::{LabeledDataset, ModelGraph};
use crate::quant::{check_bits, QuantConfig};

/// Weight and activation bit-widths (`W{weight}A{act}`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitWidths {
    pub weight: u8,
    pub act: u8,
}

impl BitWidths {
    pub fn new(weight: u8, act: u8) -> Result<Self> {
        check_bits(weight)?;
        check_bits(act)?;
        Ok(Self { weight, act })
    }

    pub fn uniform(bits: u8) -> Result<Self> {
        Self::new(bits, bits)
    }

    pub fn label(&self) -> String {
        format!("W{}A{}", self.weight, self.act)
    }
}

/// Everything a trial needs besides its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSettings {
    pub metric: MetricKind,
    /// `None` disables quantization: trials evaluate the FP model.
    pub bits: Option<BitWidths>,
    pub calib: CalibSpec,
    pub search: SearchConfig,
}

impl TrialSettings {
    pub fn label(&self) -> String {
        match self.bits {
            Some(b) => format!("{} {}", b.label(), self.metric),
            None => "FP32".into(),
        }
    }
}

/// Model and data shared by every trial of a benchmark.
#[derive(Debug, Clone, Copy)]
pub struct Workload<'a> {
    pub model: &'a ModelGraph,
    pub train: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
}

/// Outcome of one seeded trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub per_class: Vec<f64>,
    pub average: f64,
    /// Hex SHA-256 of the trial's canonical quantization config JSON.
    pub config_digest: String,
}

/// Builds the calibration set for `seed`, calibrates and evaluates.
pub fn calibrate_trial(work: Workload<'_>, settings: &TrialSettings, seed: u64) -> Result<Option<QuantConfig>> {
    let Some(bits) = settings.bits else {
        return Ok(None);
    };
    let calib = settings.calib.build(work.train, seed)?;
    calibrate_network(work.model, &calib, settings.metric, bits.weight, bits.act, &settings.search).map(Some)
}

pub fn run_trial(work: Workload<'_>, settings: &TrialSettings, seed: u64) -> Result<TrialResult> {
    let config = calibrate_trial(work, settings, seed)?;
    let acc = evaluate(work.model, work.test, config.as_ref())?;
    Ok(TrialResult {
        seed,
        per_class: acc.per_class,
        average: acc.average,
        config_digest: config.unwrap_or_default().digest(),
    })
}

/// Tukey box-plot summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub lo_whisker: f64,
    pub hi_whisker: f64,
    pub outliers: Vec<f64>,
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Hinges are medians of the lower and upper halves, leaving out the overall
/// median when the count is odd. Whiskers reach the most extreme samples
/// within 1.5 IQR of the hinges; anything beyond is an outlier.
pub fn boxplot_stats(samples: &[f64]) -> Result<BoxStats> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = median_sorted(&v);
    let half = n / 2;
    let (q1, q3) = if half == 0 {
        (median, median)
    } else {
        (median_sorted(&v[..half]), median_sorted(&v[n - half..]))
    };
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside = || v.iter().copied().filter(|&x| x >= lo_fence && x <= hi_fence);
    Ok(BoxStats {
        q1,
        median,
        q3,
        lo_whisker: inside().fold(f64::INFINITY, f64::min),
        hi_whisker: inside().fold(f64::NEG_INFINITY, f64::max),
        outliers: v.iter().copied().filter(|&x| x < lo_fence || x > hi_fence).collect(),
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Accuracy statistics of one category (a class, or the average).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub category: String,
    pub fp_accuracy: f64,
    pub mean: f64,
    pub std: f64,
    pub mean_drop: f64,
    pub drop: BoxStats,
}

impl CategoryStats {
    fn from_samples(category: String, fp: f64, accs: &[f64]) -> Result<Self> {
        let (mean, std) = mean_std(accs);
        let drops: Vec<f64> = accs.iter().map(|a| fp - a).collect();
        Ok(Self {
            category,
            fp_accuracy: fp,
            mean,
            std,
            mean_drop: mean_std(&drops).0,
            drop: boxplot_stats(&drops)?,
        })
    }
}

/// Aggregated benchmark outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub label: String,
    pub model: String,
    pub settings: TrialSettings,
    pub base_seed: u64,
    pub trial_count: usize,
    pub average: CategoryStats,
    pub classes: Vec<CategoryStats>,
    /// Trials sorted by seed.
    pub trials: Vec<TrialResult>,
}

impl ReliabilityReport {
    /// Aggregates trials against the FP baseline. Trial order is irrelevant:
    /// trials are sorted by seed before any reduction.
    pub fn aggregate(
        label: String,
        model: String,
        settings: TrialSettings,
        base_seed: u64,
        fp: &PerClassAccuracy,
        mut trials: Vec<TrialResult>,
    ) -> Result<Self> {
        if trials.is_empty() {
            return Err(Error::EmptySamples);
        }
        trials.sort_by_key(|t| t.seed);
        let averages: Vec<f64> = trials.iter().map(|t| t.average).collect();
        let average = CategoryStats::from_samples("Average".into(), fp.average, &averages)?;
        let classes = (0..fp.per_class.len())
            .map(|c| {
                let accs: Vec<f64> = trials.iter().map(|t| t.per_class[c]).collect();
                CategoryStats::from_samples(format!("Class {c}"), fp.per_class[c], &accs)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            label,
            model,
            settings,
            base_seed,
            trial_count: trials.len(),
            average,
            classes,
            trials,
        })
    }

    /// Average row first, then one row per class.
    pub fn rows(&self) -> impl Iterator<Item = &CategoryStats> {
        std::iter::once(&self.average).chain(&self.classes)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Runs `trial_count` trials on `workers` threads and aggregates them.
///
/// Any failing trial aborts the benchmark; the error names the lowest
/// failing seed and how many trials completed.
pub fn run_benchmark(
    work: Workload<'_>,
    settings: &TrialSettings,
    trial_count: usize,
    base_seed: u64,
    workers: usize,
) -> Result<ReliabilityReport> {
    if trial_count == 0 {
        return Err(Error::InvalidConfig("trial_count must be at least 1".into()));
    }
    let fp = evaluate(work.model, work.test, None)?;
    let seeds: Vec<u64> = (0..trial_count as u64).map(|i| base_seed + i).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let results: Vec<Result<TrialResult>> =
        pool.install(|| seeds.par_iter().map(|&s| run_trial(work, settings, s)).collect());
    let completed = results.iter().filter(|r| r.is_ok()).count();
    let mut trials = Vec::with_capacity(trial_count);
    for (seed, r) in seeds.iter().zip(results) {
        match r {
            Ok(t) => trials.push(t),
            Err(e) => {
                return Err(Error::Trial {
                    seed: *seed,
                    completed,
                    source: Box::new(e),
                })
            }
        }
    }
    let model = work.model.metadata.get("name").cloned().unwrap_or_default();
    ReliabilityReport::aggregate(settings.label(), model, settings.clone(), base_seed, &fp, trials)
}

/// The class with the lowest mean accuracy, as `(class, mean, mean_drop)`.
/// Ties go to the larger mean drop, then the lower class index.
pub fn worst_group(report: &ReliabilityReport) -> (usize, f64, f64) {
    let mut best = 0;
    for (i, c) in report.classes.iter().enumerate().skip(1) {
        let b = &report.classes[best];
        if c.mean < b.mean || (c.mean == b.mean && c.mean_drop > b.mean_drop) {
            best = i;
        }
    }
    let c = &report.classes[best];
    (best, c.mean, c.mean_drop)
}

fn pct(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

/// Table with one row per category and one `mean±std` column per report,
/// in percent with one decimal.
pub fn table_csv(reports: &[&ReliabilityReport]) -> String {
    let mut out = String::from("Category");
    for r in reports {
        out.push(',');
        out.push_str(&r.label);
    }
    out.push('\n');
    let Some(first) = reports.first() else {
        return out;
    };
    for (row, stats) in first.rows().enumerate() {
        out.push_str(&stats.category);
        for r in reports {
            let s = r.rows().nth(row).expect("reports share categories");
            let _ = write!(out, ",{}±{}", pct(s.mean), pct(s.std));
        }
        out.push('\n');
    }
    out
}

/// Box-plot statistics of the accuracy drop, in percentage points.
pub fn boxplot_csv(report: &ReliabilityReport) -> String {
    let mut out = String::from("category,q1,median,q3,lo_whisker,hi_whisker,outliers\n");
    let pp = |x: f64| format!("{:.3}", x * 100.0);
    for s in report.rows() {
        let b = &s.drop;
        let outliers: Vec<String> = b.outliers.iter().map(|&x| pp(x)).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.category,
            pp(b.q1),
            pp(b.median),
            pp(b.q3),
            pp(b.lo_whisker),
            pp(b.hi_whisker),
            outliers.join(";")
        );
    }
    out
}
