//! Choosing quantization scales from calibration data.
//!
//! MinMax takes the observed range directly. The search metrics (MSE,
//! cosine distance, KL divergence) try `candidate_count` clip values
//! `c_i = i / N * max|x|`, `i = 1..=N`, set `s = c_i / hi` and keep the
//! candidate whose fake-quantized tensor is closest to the original. Ties go
//! to the smaller clip.
//!
//! The KL objective works on a `kl_bins` histogram of the samples over
//! `[0, max]` (or `[-max, max]` for signed data). For a candidate, bins whose
//! centre lies inside the clip form the reference distribution, with the mass
//! of clipped bins folded into the boundary bin. The candidate distribution
//! gives every quantization level the in-range mass of the bins that round
//! to it, spread evenly over that level's non-empty bins. Re-histogramming
//! fake-quantized samples directly would compare a smooth histogram with a
//! handful of spikes, which always favours the smallest clip.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{forward_with_capture, ExecutionPlan, SiteId, SiteKind, EVAL_BATCH};
use crate::error::{Error, Result};
use crate::metrics::{cosine_slices, kl_masses, mse_slices};
use crate::model::{LabeledDataset, ModelGraph};
use crate::quant::{check_bits, fake_quant_in_place, int_range, quantize, QuantConfig, QuantParams};
use crate::tensor::{minmax, Histogram, Tensor};

/// Calibration objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    MinMax,
    Mse,
    Cosine,
    Kl,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [MetricKind::MinMax, MetricKind::Mse, MetricKind::Cosine, MetricKind::Kl];
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            MetricKind::MinMax => "minmax",
            MetricKind::Mse => "mse",
            MetricKind::Cosine => "cosine",
            MetricKind::Kl => "kl",
        })
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "minmax" => Ok(MetricKind::MinMax),
            "mse" => Ok(MetricKind::Mse),
            "cosine" => Ok(MetricKind::Cosine),
            "kl" => Ok(MetricKind::Kl),
            other => Err(Error::InvalidConfig(format!(
                "unknown metric '{other}', expected one of minmax, mse, cosine, kl"
            ))),
        }
    }
}

/// Grid-search settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub candidate_count: usize,
    pub kl_bins: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            candidate_count: 100,
            kl_bins: 2048,
        }
    }
}

/// Every candidate clip of one search with its objective.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchTrace {
    pub clips: Vec<f64>,
    pub objectives: Vec<f64>,
    pub best: usize,
    pub params: QuantParams,
}

fn degenerate(min: f32, max: f32) -> Error {
    Error::DegenerateRange {
        min: min as f64,
        max: max as f64,
    }
}

/// MinMax scale for an activation tensor.
///
/// Non-negative data gets an unsigned grid over `[min(x, 0), max(x)]`, so
/// `s = (max - min) / (2^k - 1)` with the range anchored at zero. Data with
/// negative values falls back to the signed symmetric grid,
/// `s = max|x| / (2^(k-1) - 1)`.
pub fn calibrate_minmax(samples: &Tensor, bits: u8) -> Result<QuantParams> {
    check_bits(bits)?;
    let (min, max) = minmax(samples)?;
    if max == min {
        return Err(degenerate(min, max));
    }
    if min < 0.0 {
        let peak = samples.max_abs() as f64;
        QuantParams::signed(bits, peak / int_range(bits, true).1 as f64)
    } else {
        let lo = (min as f64).min(0.0);
        QuantParams::unsigned(bits, (max as f64 - lo) / int_range(bits, false).1 as f64)
    }
}

/// KL divergence between the clipped reference histogram and its
/// level-merged quantized counterpart; `+inf` when no bin lies inside the clip.
pub fn kl_objective(hist: &Histogram, params: &QuantParams) -> f64 {
    let (lo, hi) = hist.range();
    let counts = hist.counts();
    let width = (hi - lo) / counts.len() as f64;
    let clip = params.clip();
    let centre = |b: usize| lo + (b as f64 + 0.5) * width;
    let inside: Vec<usize> = (0..counts.len()).filter(|&b| centre(b).abs() <= clip).collect();
    let (Some(&first), Some(&last)) = (inside.first(), inside.last()) else {
        return f64::INFINITY;
    };

    let mut p: Vec<f64> = counts[first..=last].iter().map(|&c| c as f64).collect();
    let below: u64 = counts[..first].iter().sum();
    let above: u64 = counts[last + 1..].iter().sum();
    p[0] += below as f64;
    *p.last_mut().unwrap() += above as f64;

    let levels: Vec<i32> = (first..=last).map(|b| quantize(centre(b) as f32, params)).collect();
    let (qlo, qhi) = params.int_range();
    let span = (qhi - qlo + 1) as usize;
    let mut mass = vec![0.0f64; span];
    let mut nonzero = vec![0usize; span];
    for (k, &l) in levels.iter().enumerate() {
        let c = counts[first + k];
        let slot = (l - qlo) as usize;
        mass[slot] += c as f64;
        if c > 0 {
            nonzero[slot] += 1;
        }
    }
    let q: Vec<f64> = levels
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            let slot = (l - qlo) as usize;
            if counts[first + k] > 0 {
                mass[slot] / nonzero[slot] as f64
            } else {
                0.0
            }
        })
        .collect();
    kl_masses(&p, &q).unwrap_or(f64::INFINITY)
}

/// Runs the candidate search and returns the whole trace.
pub fn search_trace(
    samples: &Tensor,
    bits: u8,
    signed: bool,
    metric: MetricKind,
    search: &SearchConfig,
) -> Result<SearchTrace> {
    check_bits(bits)?;
    if metric == MetricKind::MinMax {
        return Err(Error::InvalidConfig("minmax does not search".into()));
    }
    if search.candidate_count == 0 || search.kl_bins == 0 {
        return Err(Error::InvalidConfig("candidate_count and kl_bins must be positive".into()));
    }
    if samples.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let peak = samples.max_abs() as f64;
    if peak == 0.0 {
        return Err(degenerate(0.0, 0.0));
    }
    let x = samples.data();
    let hi = int_range(bits, signed).1 as f64;
    let range = if signed { (-peak, peak) } else { (0.0, peak) };
    let reference = if metric == MetricKind::Kl {
        let mut h = Histogram::new(search.kl_bins, range)?;
        h.accumulate(x);
        Some(h)
    } else {
        None
    };

    let n = search.candidate_count;
    let mut clips = Vec::with_capacity(n);
    let mut objectives = Vec::with_capacity(n);
    let mut buf = vec![0.0f32; x.len()];
    let mut best: Option<(usize, QuantParams)> = None;
    for i in 1..=n {
        let clip = i as f64 / n as f64 * peak;
        let params = QuantParams::new(bits, clip / hi, signed)?;
        if metric != MetricKind::Kl {
            buf.copy_from_slice(x);
            fake_quant_in_place(&mut buf, &params);
        }
        let objective = match metric {
            MetricKind::Mse => mse_slices(x, &buf),
            MetricKind::Cosine => match cosine_slices(x, &buf) {
                Ok(d) => d,
                Err(Error::ZeroNorm) if buf.iter().all(|&v| v == 0.0) => f64::INFINITY,
                Err(e) => return Err(e),
            },
            MetricKind::Kl => kl_objective(reference.as_ref().expect("kl reference histogram"), &params),
            MetricKind::MinMax => unreachable!(),
        };
        if best.is_none_or(|(b, _)| objective < objectives[b]) {
            best = Some((i - 1, params));
        }
        clips.push(clip);
        objectives.push(objective);
    }
    let (best, params) = best.expect("at least one candidate");
    Ok(SearchTrace {
        clips,
        objectives,
        best,
        params,
    })
}

/// Grid-search scale for an activation tensor. Sites with negative values
/// use the signed grid, all others the unsigned one.
pub fn calibrate_search(samples: &Tensor, bits: u8, metric: MetricKind, search: &SearchConfig) -> Result<QuantParams> {
    let (min, _) = minmax(samples)?;
    if metric == MetricKind::Cosine && samples.data().iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroNorm);
    }
    Ok(search_trace(samples, bits, min < 0.0, metric, search)?.params)
}

/// Scale for activation data under any metric.
pub fn calibrate_activation(samples: &Tensor, bits: u8, metric: MetricKind, search: &SearchConfig) -> Result<QuantParams> {
    match metric {
        MetricKind::MinMax => calibrate_minmax(samples, bits),
        _ => calibrate_search(samples, bits, metric, search),
    }
}

/// Signed symmetric scale for a weight tensor.
pub fn calibrate_weights(w: &Tensor, bits: u8, metric: MetricKind, search: &SearchConfig) -> Result<QuantParams> {
    check_bits(bits)?;
    if w.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let peak = w.max_abs() as f64;
    if peak == 0.0 {
        return Err(degenerate(0.0, 0.0));
    }
    match metric {
        MetricKind::MinMax => QuantParams::signed(bits, peak / int_range(bits, true).1 as f64),
        _ => Ok(search_trace(w, bits, true, metric, search)?.params),
    }
}

/// Pools the input of every linear/conv2d layer over the whole dataset,
/// in sample order, one flat tensor per site.
pub fn capture_activations(model: &ModelGraph, data: &LabeledDataset) -> Result<Vec<(SiteId, Tensor)>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sites = ExecutionPlan::new(model).capture_sites;
    let mut pooled: Vec<Vec<f32>> = vec![Vec::new(); sites.len()];
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_BATCH).min(data.len());
        let (_, captured) = forward_with_capture(model, &data.images().rows(start, end), &sites)?;
        for (pool, site) in pooled.iter_mut().zip(&sites) {
            pool.extend_from_slice(captured[site].data());
        }
        start = end;
    }
    Ok(sites
        .into_iter()
        .zip(pooled)
        .map(|(s, v)| (s, Tensor::from_vec(v)))
        .collect())
}

fn at_site(site: SiteId) -> impl FnOnce(Error) -> Error {
    move |e| Error::Site {
        site: site.to_string(),
        source: Box::new(e),
    }
}

/// Layer-wise calibration of every weight and input site from
/// full-precision activations of `calib`.
pub fn calibrate_network(
    model: &ModelGraph,
    calib: &LabeledDataset,
    metric: MetricKind,
    weight_bits: u8,
    act_bits: u8,
    search: &SearchConfig,
) -> Result<QuantConfig> {
    check_bits(weight_bits)?;
    check_bits(act_bits)?;
    let activations = capture_activations(model, calib)?;
    let mut jobs: Vec<(SiteId, &Tensor)> = Vec::with_capacity(activations.len() * 2);
    for (site, t) in &activations {
        jobs.push((*site, t));
        jobs.push((SiteId::weight(site.layer), model.layers()[site.layer].weight()));
    }
    let results: Vec<Result<(SiteId, QuantParams)>> = jobs
        .par_iter()
        .map(|&(site, t)| {
            let p = match site.kind {
                SiteKind::Input => calibrate_activation(t, act_bits, metric, search),
                SiteKind::Weight => calibrate_weights(t, weight_bits, metric, search),
            };
            p.map(|p| (site, p)).map_err(at_site(site))
        })
        .collect();
    let mut config = QuantConfig::new();
    for r in results {
        let (site, p) = r?;
        config.insert(site, p);
    }
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::fake_quant;

    fn t(v: &[f32]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn minmax_fixtures() {
        let p = calibrate_minmax(&t(&[0.0, 1.0, 2.55]), 8).unwrap();
        assert!((p.scale() - 0.01).abs() < 1e-9);
        assert!(!p.is_signed());
        let p = calibrate_minmax(&t(&[0.0, 0.3, 1.0]), 4).unwrap();
        assert!((p.scale() - 1.0 / 15.0).abs() < 1e-12);
        assert!(matches!(
            calibrate_minmax(&t(&[0.7, 0.7]), 8),
            Err(Error::DegenerateRange { .. })
        ));
    }

    #[test]
    fn minmax_negative_data_goes_signed() {
        let p = calibrate_minmax(&t(&[-2.54, 1.0]), 8).unwrap();
        assert!(p.is_signed());
        assert!((p.scale() - 0.02).abs() < 1e-7);
    }

    #[test]
    fn minmax_never_saturates_calibration_data() {
        let data = t(&[0.0, 0.4, 3.3, 1.7, 2.9]);
        let p = calibrate_minmax(&data, 4).unwrap();
        let (_, hi) = p.int_range();
        assert!(data.data().iter().all(|&x| quantize(x, &p) <= hi && (x as f64) <= p.clip() + 1e-9));
    }

    #[test]
    fn weights_minmax_formula() {
        let s = SearchConfig::default();
        let p = calibrate_weights(&t(&[-1.0, 1.0]), 8, MetricKind::MinMax, &s).unwrap();
        assert!(p.is_signed());
        assert!((p.scale() - 1.0 / 127.0).abs() < 1e-12);
        assert!(matches!(
            calibrate_weights(&t(&[0.0, 0.0]), 8, MetricKind::Mse, &s),
            Err(Error::DegenerateRange { .. })
        ));
    }

    #[test]
    fn representable_grid_is_recovered() {
        // Values on the 4-bit unsigned grid with step 0.5 and max at the top.
        let v: Vec<f32> = (0..=15).map(|i| i as f32 * 0.5).collect();
        let data = t(&v);
        let trace = search_trace(&data, 4, false, MetricKind::Mse, &SearchConfig::default()).unwrap();
        assert_eq!(trace.best, 99);
        assert_eq!(trace.objectives[99], 0.0);
        assert_eq!(fake_quant(&data, &trace.params), data);
    }

    #[test]
    fn cosine_on_zero_samples_is_zero_norm() {
        assert!(matches!(
            calibrate_search(&t(&[0.0, 0.0]), 4, MetricKind::Cosine, &SearchConfig::default()),
            Err(Error::ZeroNorm)
        ));
        assert!(matches!(
            calibrate_search(&t(&[0.0, 0.0]), 4, MetricKind::Mse, &SearchConfig::default()),
            Err(Error::DegenerateRange { .. })
        ));
    }

    #[test]
    fn metric_names_parse() {
        for m in MetricKind::ALL {
            assert_eq!(m.to_string().parse::<MetricKind>().unwrap(), m);
        }
        assert!("l2".parse::<MetricKind>().is_err());
    }

    #[test]
    fn every_search_scale_is_positive() {
        let data = t(&[0.01, 0.2, 0.5, 3.0, 0.0, 0.7]);
        for m in [MetricKind::Mse, MetricKind::Cosine, MetricKind::Kl] {
            let trace = search_trace(&data, 4, false, m, &SearchConfig::default()).unwrap();
            assert!(trace.params.scale() > 0.0);
            assert_eq!(trace.clips.len(), 100);
        }
    }
}
