//! Calibration set construction: random sampling, noise injection and
//! class-biased sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LabeledDataset, Split};
use crate::rng::{tags, Stream};

/// One class drawn with elevated probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassBias {
    pub class: usize,
    pub p: f64,
}

/// Recipe for one calibration set. The seed is supplied per trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibSpec {
    pub size: usize,
    pub noise_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias: Option<ClassBias>,
}

impl Default for CalibSpec {
    fn default() -> Self {
        Self {
            size: 32,
            noise_fraction: 0.0,
            bias: None,
        }
    }
}

impl CalibSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::InvalidConfig("calibration size must be at least 1".into()));
        }
        check_fraction(self.noise_fraction)?;
        if let Some(b) = self.bias {
            check_probability(b.p)?;
        }
        Ok(())
    }

    /// Draws the calibration set for `seed`.
    pub fn build(&self, train: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
        self.validate()?;
        let base = match self.bias {
            Some(b) => sample_class_biased(train, self.size, b.class, b.p, seed)?,
            None => sample_random(train, self.size, seed)?,
        };
        inject_noise(&base, self.noise_fraction, seed)
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if (0.0..=1.0).contains(&f) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("noise fraction {f} outside [0, 1]")))
    }
}

fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("bias probability {p} outside (0, 1)")))
    }
}

/// Draws `n` distinct samples without replacement.
pub fn sample_random(train: &LabeledDataset, n: usize, seed: u64) -> Result<LabeledDataset> {
    if n > train.len() {
        return Err(Error::OverDraw {
            requested: n,
            available: train.len(),
        });
    }
    let mut idx: Vec<usize> = (0..train.len()).collect();
    Stream::new(seed, tags::CALIB_DRAW).shuffle(&mut idx);
    idx.truncate(n);
    Ok(train.select(&idx, Split::Calibration))
}

/// Replaces `round(fraction * n)` images, at seeded positions, with
/// i.i.d. uniform(0, 1) pixel noise. Labels are left in place.
pub fn inject_noise(calib: &LabeledDataset, fraction: f64, seed: u64) -> Result<LabeledDataset> {
    check_fraction(fraction)?;
    let n = calib.len();
    let m = (fraction * n as f64).round() as usize;
    let mut out = calib.clone();
    if m == 0 {
        return Ok(out);
    }
    let mut rng = Stream::new(seed, tags::CALIB_NOISE);
    let mut positions: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut positions);
    positions.truncate(m);
    positions.sort_unstable();
    let row = calib.images().row_len();
    let data = out.images_mut().data_mut();
    for p in positions {
        for v in &mut data[p * row..(p + 1) * row] {
            *v = rng.next_f64() as f32;
        }
    }
    Ok(out)
}

/// Draws `n` samples with replacement: each one comes from `class_id`
/// with probability `p`, otherwise from a uniformly chosen other class.
pub fn sample_class_biased(
    train: &LabeledDataset,
    n: usize,
    class_id: usize,
    p: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    check_probability(p)?;
    let classes = train.class_count();
    if class_id >= classes {
        return Err(Error::InvalidConfig(format!("bias class {class_id} outside 0..{classes}")));
    }
    let pools = train.class_pools();
    if let Some(missing) = pools.iter().position(|pool| pool.is_empty()) {
        return Err(Error::MissingClass(missing));
    }
    let others: Vec<usize> = (0..classes).filter(|&c| c != class_id).collect();
    let mut rng = Stream::new(seed, tags::CALIB_BIAS);
    let idx: Vec<usize> = (0..n)
        .map(|_| {
            let class = if others.is_empty() || rng.next_f64() < p {
                class_id
            } else {
                others[rng.below(others.len())]
            };
            let pool = &pools[class];
            pool[rng.below(pool.len())]
        })
        .collect();
    Ok(train.select(&idx, Split::Calibration))
}
