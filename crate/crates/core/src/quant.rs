//! Uniform integer quantization and fake-quantized model execution.
//!
//! `x_q = clamp(round(x / s), lo, hi)` with round-half-away-from-zero and
//! `[lo, hi] = [-2^(k-1), 2^(k-1) - 1]` for signed sites or `[0, 2^k - 1]`
//! for unsigned ones (zero point fixed at 0). Dequantization is `s * x_q`.
//! Weights are always signed; activation sites are unsigned unless their
//! calibration data contains negative values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{self, ExecutionPlan, Hooks, SiteId};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::Tensor;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct RawParams {
    k: u8,
    scale: f64,
    signed: bool,
}

/// Bit-width, scale and signedness for one site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct QuantParams {
    bits: u8,
    scale: f64,
    signed: bool,
}

impl TryFrom<RawParams> for QuantParams {
    type Error = Error;

    fn try_from(r: RawParams) -> Result<Self> {
        QuantParams::new(r.k, r.scale, r.signed)
    }
}

impl From<QuantParams> for RawParams {
    fn from(p: QuantParams) -> Self {
        RawParams {
            k: p.bits,
            scale: p.scale,
            signed: p.signed,
        }
    }
}

pub fn check_bits(bits: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "bit-width {bits} outside {MIN_BITS}..={MAX_BITS}"
        )))
    }
}

impl QuantParams {
    pub fn new(bits: u8, scale: f64, signed: bool) -> Result<Self> {
        check_bits(bits)?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("scale {scale} must be positive and finite")));
        }
        Ok(Self { bits, scale, signed })
    }

    pub fn signed(bits: u8, scale: f64) -> Result<Self> {
        Self::new(bits, scale, true)
    }

    pub fn unsigned(bits: u8, scale: f64) -> Result<Self> {
        Self::new(bits, scale, false)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    /// Inclusive integer range.
    pub fn int_range(&self) -> (i32, i32) {
        int_range(self.bits, self.signed)
    }

    /// Largest representable magnitude on the positive side, `s * hi`.
    pub fn clip(&self) -> f64 {
        self.scale * self.int_range().1 as f64
    }
}

pub fn int_range(bits: u8, signed: bool) -> (i32, i32) {
    if signed {
        (-(1 << (bits - 1)), (1 << (bits - 1)) - 1)
    } else {
        (0, (1 << bits) - 1)
    }
}

#[inline]
pub fn quantize(x: f32, p: &QuantParams) -> i32 {
    let (lo, hi) = p.int_range();
    (x as f64 / p.scale).round().clamp(lo as f64, hi as f64) as i32
}

pub fn dequantize(q: i32, p: &QuantParams) -> Result<f32> {
    let (lo, hi) = p.int_range();
    if q < lo || q > hi {
        return Err(Error::OutOfRange { value: q, lo, hi });
    }
    Ok((q as f64 * p.scale) as f32)
}

#[inline]
pub(crate) fn fake_quant_scalar(x: f32, p: &QuantParams) -> f32 {
    (quantize(x, p) as f64 * p.scale) as f32
}

pub fn fake_quant_in_place(data: &mut [f32], p: &QuantParams) {
    for v in data {
        *v = fake_quant_scalar(*v, p);
    }
}

/// Elementwise quantize-then-dequantize.
pub fn fake_quant(t: &Tensor, p: &QuantParams) -> Tensor {
    t.map(|v| fake_quant_scalar(v, p))
}

/// Quantization parameters for every site of one model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuantConfig {
    sites: BTreeMap<SiteId, QuantParams>,
}

impl QuantConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, site: SiteId, params: QuantParams) {
        self.sites.insert(site, params);
    }

    pub fn get(&self, site: &SiteId) -> Option<&QuantParams> {
        self.sites.get(site)
    }

    pub fn sites(&self) -> &BTreeMap<SiteId, QuantParams> {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Errors with the first weight or input site `model` needs but `self` lacks.
    pub fn check_complete(&self, model: &ModelGraph) -> Result<()> {
        for site in ExecutionPlan::new(model).all_sites() {
            if !self.sites.contains_key(&site) {
                return Err(Error::IncompleteConfig(site.to_string()));
            }
        }
        Ok(())
    }

    /// Compact canonical JSON (sites in layer order).
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn digest(&self) -> String {
        let json = self.to_json().expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// A model paired with a complete config, weights fake-quantized once.
pub struct QuantizedModel<'a> {
    model: &'a ModelGraph,
    config: &'a QuantConfig,
    plan: ExecutionPlan,
    weights: Vec<Option<Tensor>>,
}

impl<'a> QuantizedModel<'a> {
    pub fn new(model: &'a ModelGraph, config: &'a QuantConfig) -> Result<Self> {
        config.check_complete(model)?;
        let weights = model
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.kind
                    .is_quantizable()
                    .then(|| fake_quant(l.weight(), &config.sites[&SiteId::weight(i)]))
            })
            .collect();
        Ok(Self {
            model,
            config,
            plan: ExecutionPlan::new(model),
            weights,
        })
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.run(batch, |_, _| {})
    }

    /// Forward pass also returning each fake-quantized linear/conv2d input.
    pub fn forward_with_capture(&self, batch: &Tensor) -> Result<(Tensor, BTreeMap<SiteId, Tensor>)> {
        let mut captured = BTreeMap::new();
        let logits = self.run(batch, |site, x| {
            captured.insert(site, x.clone());
        })?;
        Ok((logits, captured))
    }

    fn run(&self, batch: &Tensor, mut observe: impl FnMut(SiteId, &Tensor)) -> Result<Tensor> {
        let config = self.config;
        engine::execute(
            self.model,
            &self.plan,
            batch,
            Hooks {
                weights: Some(&self.weights),
                on_input: |i, x: &mut Tensor| {
                    let site = SiteId::input(i);
                    fake_quant_in_place(x.data_mut(), &config.sites[&site]);
                    observe(site, x);
                },
            },
        )
    }
}

/// Forward pass with every weight and linear/conv2d input fake-quantized.
pub fn quantized_forward(model: &ModelGraph, config: &QuantConfig, batch: &Tensor) -> Result<Tensor> {
    QuantizedModel::new(model, config)?.forward(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use proptest::prelude::*;

    fn s8(scale: f64) -> QuantParams {
        QuantParams::signed(8, scale).unwrap()
    }

    #[test]
    fn quantize_fixtures() {
        assert_eq!(quantize(0.0, &s8(0.37)), 0);
        assert_eq!(quantize(0.0, &QuantParams::unsigned(3, 2.0).unwrap()), 0);
        assert_eq!(quantize(3.2, &s8(0.1)), 32);
        assert_eq!(quantize(100.0, &s8(0.1)), 127);
        assert_eq!(quantize(-100.0, &s8(0.1)), -128);
        assert_eq!(quantize(-5.0, &QuantParams::unsigned(8, 0.1).unwrap()), 0);
    }

    #[test]
    fn rounds_half_away_from_zero() {
        let p = s8(1.0);
        assert_eq!(quantize(2.5, &p), 3);
        assert_eq!(quantize(-2.5, &p), -3);
        assert_eq!(quantize(0.5, &p), 1);
    }

    #[test]
    fn dequantize_fixtures() {
        assert_eq!(dequantize(0, &s8(0.1)).unwrap(), 0.0);
        assert!((dequantize(32, &s8(0.1)).unwrap() - 3.2).abs() < 1e-6);
        assert!((dequantize(127, &s8(0.1)).unwrap() - 12.7).abs() < 1e-6);
        assert!(matches!(dequantize(128, &s8(0.1)), Err(Error::OutOfRange { .. })));
        assert!(matches!(
            dequantize(-1, &QuantParams::unsigned(4, 0.1).unwrap()),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn params_are_validated() {
        assert!(QuantParams::signed(1, 0.1).is_err());
        assert!(QuantParams::signed(9, 0.1).is_err());
        assert!(QuantParams::signed(4, 0.0).is_err());
        assert!(QuantParams::signed(4, f64::NAN).is_err());
        assert_eq!(int_range(4, true), (-8, 7));
        assert_eq!(int_range(4, false), (0, 15));
    }

    #[test]
    fn grid_points_are_fixed() {
        let p = QuantParams::signed(6, 0.125).unwrap();
        let grid = Tensor::from_vec((-32..32).map(|i| (i as f64 * 0.125) as f32).collect());
        assert_eq!(fake_quant(&grid, &p), grid);
        let zeros = Tensor::zeros(vec![3, 3]);
        assert_eq!(fake_quant(&zeros, &p), zeros);
    }

    #[test]
    fn fake_quant_error_within_half_step() {
        let mut rng = Stream::new(99, 0);
        let p = QuantParams::signed(5, 0.07).unwrap();
        let (lo, hi) = (p.scale * -16.0, p.scale * 15.0);
        for _ in 0..10_000 {
            let x = rng.uniform(lo, hi) as f32;
            let err = (fake_quant_scalar(x, &p) as f64 - x as f64).abs();
            assert!(err <= p.scale / 2.0, "x={x} err={err}");
        }
    }

    #[test]
    fn digest_survives_json_round_trip() {
        let mut rng = Stream::new(5, 0);
        let mut c = QuantConfig::new();
        for layer in 0..200 {
            let scale = rng.uniform(1e-6, 1.0) / 127.0;
            c.insert(SiteId::weight(layer), QuantParams::signed(8, scale).unwrap());
        }
        let back = QuantConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let mut c = QuantConfig::new();
        c.insert(SiteId::weight(3), s8(0.5));
        c.insert(SiteId::input(3), QuantParams::unsigned(4, 0.25).unwrap());
        c.insert(SiteId::input(10), QuantParams::unsigned(4, 0.125).unwrap());
        let json = c.to_json().unwrap();
        assert_eq!(
            json,
            r#"{"layer3.input":{"k":4,"scale":0.25,"signed":false},"layer3.weight":{"k":8,"scale":0.5,"signed":true},"layer10.input":{"k":4,"scale":0.125,"signed":false}}"#
        );
        assert_eq!(QuantConfig::from_json(&json).unwrap(), c);
        assert!(QuantConfig::from_json(r#"{"layer0.input":{"k":12,"scale":1.0,"signed":true}}"#).is_err());
        assert_eq!(c.digest().len(), 64);
    }

    proptest! {
        #[test]
        fn quantize_is_monotone(a in -50.0f32..50.0, b in -50.0f32..50.0, k in 2u8..=8, s in 0.001f64..2.0) {
            let p = QuantParams::signed(k, s).unwrap();
            let (x, y) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize(x, &p) <= quantize(y, &p));
        }

        #[test]
        fn signed_grid_is_symmetric(x in -50.0f32..50.0, k in 2u8..=8, s in 0.001f64..2.0) {
            let p = QuantParams::signed(k, s).unwrap();
            prop_assume!((x.abs() as f64) < s * ((1 << (k - 1)) - 1) as f64);
            prop_assert_eq!(quantize(-x, &p), -quantize(x, &p));
        }

        #[test]
        fn fake_quant_is_idempotent(v in prop::collection::vec(-20.0f32..20.0, 1..64), k in 2u8..=8, s in 0.001f64..1.0, signed: bool) {
            let p = QuantParams::new(k, s, signed).unwrap();
            let once = fake_quant(&Tensor::from_vec(v), &p);
            prop_assert_eq!(fake_quant(&once, &p), once);
        }
    }
}
