//! Dense row-major `f32` tensors and histograms.

use crate::error::{Error, Result};

/// A dense n-dimensional `f32` array stored row-major.
///
/// A leading dimension of zero is allowed so that empty datasets can be
/// represented; every other consumer treats an empty tensor as an error.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::BadTensorData {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    /// A rank-1 tensor over `data`.
    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                actual: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Number of elements per leading-dimension slice.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Rows `start..end` along the leading dimension.
    pub fn rows(&self, start: usize, end: usize) -> Tensor {
        let row = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * row..end * row].to_vec(),
        }
    }

    pub fn row(&self, index: usize) -> &[f32] {
        let row = self.row_len();
        &self.data[index * row..(index + 1) * row]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite)
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest absolute value, 0 for an empty tensor.
    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Returns `(min, max)` over all elements.
pub fn minmax(t: &Tensor) -> Result<(f32, f32)> {
    let (first, rest) = t.data().split_first().ok_or(Error::EmptyTensor)?;
    Ok(rest
        .iter()
        .fold((*first, *first), |(lo, hi), &v| (lo.min(v), hi.max(v))))
}

/// Fixed-range histogram of sample counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    range_lo: f64,
    range_hi: f64,
    counts: Vec<u64>,
}

impl Histogram {
    pub fn new(bin_count: usize, range: (f64, f64)) -> Result<Self> {
        let (lo, hi) = range;
        if !(lo < hi) || bin_count == 0 {
            return Err(Error::InvalidRange { lo, hi });
        }
        Ok(Self {
            range_lo: lo,
            range_hi: hi,
            counts: vec![0; bin_count],
        })
    }

    /// Builds a histogram directly from counts.
    pub fn from_counts(counts: Vec<u64>, range: (f64, f64)) -> Result<Self> {
        let mut h = Self::new(counts.len(), range)?;
        h.counts = counts;
        Ok(h)
    }

    pub fn bin_count(&self) -> usize {
        self.counts.len()
    }

    pub fn range(&self) -> (f64, f64) {
        (self.range_lo, self.range_hi)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Bin for `x`; values outside the range clamp to the boundary bins and
    /// `x == hi` lands in the last bin.
    pub fn bin_of(&self, x: f32) -> usize {
        let bins = self.counts.len();
        let pos = (x as f64 - self.range_lo) / (self.range_hi - self.range_lo) * bins as f64;
        if pos <= 0.0 {
            0
        } else {
            (pos.floor() as usize).min(bins - 1)
        }
    }

    pub fn add(&mut self, x: f32) {
        let b = self.bin_of(x);
        self.counts[b] += 1;
    }

    pub fn accumulate(&mut self, values: &[f32]) {
        for &v in values {
            self.add(v);
        }
    }
}

/// Histograms every element of `t` into `bin_count` bins over `range`.
pub fn histogram(t: &Tensor, bin_count: usize, range: (f64, f64)) -> Result<Histogram> {
    let mut h = Histogram::new(bin_count, range)?;
    h.accumulate(t.data());
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn new_rejects_mismatched_length() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::BadTensorData { .. })
        ));
    }

    #[test]
    fn minmax_fixtures() {
        assert_eq!(minmax(&Tensor::from_vec(vec![0.0])).unwrap(), (0.0, 0.0));
        assert_eq!(
            minmax(&Tensor::from_vec(vec![-1.0, 0.5, 1.0])).unwrap(),
            (-1.0, 1.0)
        );
        assert!(matches!(
            minmax(&Tensor::from_vec(vec![])),
            Err(Error::EmptyTensor)
        ));
    }

    #[test]
    fn minmax_matches_linear_scan() {
        let mut rng = Stream::new(7, 0);
        let v: Vec<f32> = (0..1000).map(|_| rng.uniform(-2.0, 2.0) as f32).collect();
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &x in &v {
            if x < lo {
                lo = x;
            }
            if x > hi {
                hi = x;
            }
        }
        assert_eq!(minmax(&Tensor::from_vec(v)).unwrap(), (lo, hi));
    }

    #[test]
    fn histogram_one_per_bin() {
        let h = histogram(&Tensor::from_vec(vec![0.0, 1.0, 2.0, 3.0]), 4, (0.0, 4.0)).unwrap();
        assert_eq!(h.counts(), &[1, 1, 1, 1]);
    }

    #[test]
    fn histogram_right_edge_and_clamp() {
        let h = histogram(&Tensor::from_vec(vec![4.0]), 4, (0.0, 4.0)).unwrap();
        assert_eq!(h.counts(), &[0, 0, 0, 1]);
        let h = histogram(&Tensor::from_vec(vec![-3.0, 9.0]), 4, (0.0, 4.0)).unwrap();
        assert_eq!(h.counts(), &[1, 0, 0, 1]);
    }

    #[test]
    fn histogram_rejects_bad_range() {
        assert!(matches!(
            Histogram::new(4, (1.0, 1.0)),
            Err(Error::InvalidRange { .. })
        ));
        assert!(Histogram::new(0, (0.0, 1.0)).is_err());
    }

    #[test]
    fn histogram_matches_naive_binning() {
        let mut rng = Stream::new(11, 0);
        let v: Vec<f32> = (0..10_000).map(|_| rng.next_f64() as f32).collect();
        let h = histogram(&Tensor::from_vec(v.clone()), 2048, (0.0, 1.0)).unwrap();
        let mut naive = vec![0u64; 2048];
        for &x in &v {
            let mut b = ((x as f64 - 0.0) / 1.0 * 2048.0).floor() as i64;
            if b < 0 {
                b = 0;
            }
            if b > 2047 {
                b = 2047;
            }
            naive[b as usize] += 1;
        }
        assert_eq!(h.counts(), naive.as_slice());
        assert_eq!(h.total(), 10_000);
    }
}
