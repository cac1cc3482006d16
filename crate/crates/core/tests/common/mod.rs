//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code under test except for plain data accessors.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ptq_reliability::{LayerKind, ModelGraph};

/// Round half away from zero, clamp, rescale.
pub fn fq(x: f32, scale: f64, lo: i32, hi: i32) -> f32 {
    let q = (x as f64 / scale).round();
    let q = if q < lo as f64 {
        lo as f64
    } else if q > hi as f64 {
        hi as f64
    } else {
        q
    };
    (q * scale) as f32
}

pub fn range(bits: u8, signed: bool) -> (i32, i32) {
    if signed {
        (-(1i32 << (bits - 1)), (1i32 << (bits - 1)) - 1)
    } else {
        (0, (1i32 << bits) - 1)
    }
}

fn mse(x: &[f32], y: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for i in 0..x.len() {
        let d = x[i] as f64 - y[i] as f64;
        s += d * d;
    }
    s / x.len() as f64
}

fn cosine(x: &[f32], y: &[f32]) -> f64 {
    let (mut d, mut a, mut b) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..x.len() {
        let (p, q) = (x[i] as f64, y[i] as f64);
        d += p * q;
        a += p * p;
        b += q * q;
    }
    if b == 0.0 {
        return f64::INFINITY;
    }
    (1.0 - d / (a.sqrt() * b.sqrt())).clamp(0.0, 2.0)
}

/// Smoothed `KL(p || q)` over raw masses.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let norm = |m: &[f64]| {
        let t: f64 = m.iter().sum();
        let v: Vec<f64> = m.iter().map(|c| c / t + 1e-9).collect();
        let z: f64 = v.iter().sum();
        v.into_iter().map(|c| c / z).collect::<Vec<f64>>()
    };
    let (p, q) = (norm(p), norm(q));
    let mut s = 0.0;
    for i in 0..p.len() {
        s += p[i] * (p[i] / q[i]).ln();
    }
    s
}

fn histogram(x: &[f32], bins: usize, lo: f64, hi: f64) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    for &v in x {
        let pos = (v as f64 - lo) / (hi - lo) * bins as f64;
        let b = if pos <= 0.0 { 0 } else { (pos.floor() as usize).min(bins - 1) };
        counts[b] += 1;
    }
    counts
}

/// Clipped reference histogram against its level-merged counterpart.
fn kl_candidate(counts: &[u64], lo: f64, hi: f64, scale: f64, qlo: i32, qhi: i32) -> f64 {
    let width = (hi - lo) / counts.len() as f64;
    let clip = scale * qhi as f64;
    let centres: Vec<f64> = (0..counts.len()).map(|b| lo + (b as f64 + 0.5) * width).collect();
    let inside: Vec<usize> = (0..counts.len()).filter(|&b| centres[b].abs() <= clip).collect();
    if inside.is_empty() {
        return f64::INFINITY;
    }
    let (first, last) = (inside[0], inside[inside.len() - 1]);
    let mut p = Vec::new();
    let mut levels = Vec::new();
    for b in first..=last {
        p.push(counts[b] as f64);
        levels.push((centres[b] as f32 as f64 / scale).round().clamp(qlo as f64, qhi as f64) as i64);
    }
    p[0] += counts[..first].iter().sum::<u64>() as f64;
    let n = p.len();
    p[n - 1] += counts[last + 1..].iter().sum::<u64>() as f64;
    let mut per_level: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for i in 0..n {
        let c = counts[first + i];
        let e = per_level.entry(levels[i]).or_default();
        e.0 += c as f64;
        e.1 += (c > 0) as usize;
    }
    let mut q = vec![0.0; n];
    for i in 0..n {
        if counts[first + i] > 0 {
            let (mass, nonzero) = per_level[&levels[i]];
            q[i] = mass / nonzero as f64;
        }
    }
    if q.iter().all(|&v| v == 0.0) {
        return f64::INFINITY;
    }
    kl(&p, &q)
}

/// Index of the best of `n` clips `i/n * max|x|`; earliest wins ties.
pub fn brute_force_argmin(x: &[f32], bits: u8, metric: &str, n: usize, bins: usize) -> usize {
    let signed = x.iter().any(|&v| v < 0.0);
    let (lo, hi) = range(bits, signed);
    let peak = x.iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
    let (hlo, hhi) = if signed { (-peak, peak) } else { (0.0, peak) };
    let counts = histogram(x, bins, hlo, hhi);
    let mut objectives = Vec::with_capacity(n);
    for i in 1..=n {
        let scale = (i as f64 / n as f64 * peak) / hi as f64;
        let y: Vec<f32> = x.iter().map(|&v| fq(v, scale, lo, hi)).collect();
        objectives.push(match metric {
            "mse" => mse(x, &y),
            "cosine" => cosine(x, &y),
            "kl" => kl_candidate(&counts, hlo, hhi, scale, lo, hi),
            _ => unreachable!(),
        });
    }
    let mut best = 0;
    for i in 1..n {
        if objectives[i] < objectives[best] {
            best = i;
        }
    }
    best
}

/// Per-element loops over a flatten/linear/relu model, in `f32` with
/// sequential accumulation.
pub fn naive_mlp_forward(model: &ModelGraph, image: &[f32]) -> Vec<f32> {
    let mut act = image.to_vec();
    for layer in model.layers() {
        match layer.kind {
            LayerKind::Flatten => {}
            LayerKind::Relu => {
                for v in act.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            LayerKind::Linear => {
                let w = layer.weight();
                let (out, inp) = (w.shape()[0], w.shape()[1]);
                let mut next = vec![0.0f32; out];
                for o in 0..out {
                    let mut s = 0.0f32;
                    for i in 0..inp {
                        s += w.data()[o * inp + i] * act[i];
                    }
                    if let Some(b) = layer.bias() {
                        s += b.data()[o];
                    }
                    next[o] = s;
                }
                act = next;
            }
            other => panic!("naive oracle does not handle {other:?}"),
        }
    }
    act
}
