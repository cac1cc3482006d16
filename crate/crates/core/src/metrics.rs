//! Distance metrics between tensors and between histograms.
//!
//! All reductions accumulate in `f64`, sequentially in element order.

use crate::error::{Error, Result};
use crate::tensor::{Histogram, Tensor};

/// Additive smoothing applied to every normalized bin before the KL sum.
pub const KL_SMOOTHING: f64 = 1e-9;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean of squared element differences.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    Ok(mse_slices(a.data(), b.data()))
}

pub(crate) fn mse_slices(a: &[f32], b: &[f32]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    sum / a.len() as f64
}

/// `1 - <a,b> / (|a| |b|)`, in `[0, 2]`.
pub fn cosine_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    cosine_slices(a.data(), b.data())
}

pub(crate) fn cosine_slices(a: &[f32], b: &[f32]) -> Result<f64> {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let d = 1.0 - dot / (na.sqrt() * nb.sqrt());
    Ok(d.clamp(0.0, 2.0))
}

fn smoothed(masses: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = masses.iter().sum();
    if !(total > 0.0) {
        return Err(Error::AllZero);
    }
    let mut p: Vec<f64> = masses.iter().map(|&c| c / total + KL_SMOOTHING).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    Ok(p)
}

/// `KL(p || q)` in nats after normalizing and smoothing both histograms.
pub fn kl_divergence(p: &Histogram, q: &Histogram) -> Result<f64> {
    kl_counts(p.counts(), q.counts())
}

pub(crate) fn kl_counts(p: &[u64], q: &[u64]) -> Result<f64> {
    let as_f64 = |c: &[u64]| c.iter().map(|&v| v as f64).collect::<Vec<_>>();
    kl_masses(&as_f64(p), &as_f64(q))
}

/// KL over non-negative bin masses, normalized and smoothed like [`kl_divergence`].
pub fn kl_masses(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::BinMismatch(p.len(), q.len()));
    }
    let p = smoothed(p)?;
    let q = smoothed(q)?;
    Ok(p.iter().zip(&q).map(|(&pi, &qi)| pi * (pi / qi).ln()).sum())
}
