//! Uniform quantization of a single tensor at several bit-widths.
//!
//! Run with `cargo run --example quantize_tensor`.

use ptq_reliability::quant::{dequantize, fake_quant, int_range, quantize};
use ptq_reliability::rng::Stream;
use ptq_reliability::{QuantParams, Tensor};

fn main() -> anyhow::Result<()> {
    let mut rng = Stream::new(7, 0);
    let x = Tensor::from_vec((0..1000).map(|_| rng.normal() as f32).collect());
    let peak = x.max_abs() as f64;

    println!("{:>4} {:>12} {:>12} {:>12}", "k", "range", "scale", "mse");
    for bits in [2u8, 4, 6, 8] {
        let (lo, hi) = int_range(bits, true);
        let p = QuantParams::signed(bits, peak / hi as f64)?;
        let y = fake_quant(&x, &p);
        let mse = ptq_reliability::metrics::mse(&x, &y)?;
        println!("{bits:>4} {:>12} {:>12.6} {:>12.3e}", format!("[{lo},{hi}]"), p.scale(), mse);
    }

    // Single values, including a tie and a saturating input.
    let p = QuantParams::unsigned(4, 0.25)?;
    for v in [0.125f32, -0.3, 1.0, 7.0] {
        let q = quantize(v, &p);
        println!("x = {v:>6}: q = {q:>3}, dequantized = {}", dequantize(q, &p)?);
    }
    Ok(())
}
