//! Writes a model archive, dumps its header and reads it back.
//!
//! Run with `cargo run --example archive_roundtrip`.

use ptq_reliability::archive::{from_bytes, to_bytes, Archive, ALIGNMENT, MAGIC};
use ptq_reliability::{LayerKind, LayerSpec, ModelGraph, Tensor};

fn main() -> anyhow::Result<()> {
    let w = Tensor::new(vec![3, 4], (0..12).map(|i| i as f32 * 0.25).collect())?;
    let b = Tensor::new(vec![3], vec![0.5, -0.5, 1.0])?;
    let layers = vec![
        LayerSpec::new(LayerKind::Flatten),
        LayerSpec::linear(w, Some(b)),
    ];
    let mut model = ModelGraph::new(vec![2, 2], 3, layers, Default::default())?;
    model.metadata.insert("name".into(), "tiny".into());

    let bytes = to_bytes(&Archive::Model(model.clone()))?;
    assert_eq!(&bytes[..8], MAGIC);
    let header_len = u64::from_le_bytes(bytes[8..16].try_into()?) as usize;
    let header = std::str::from_utf8(&bytes[16..16 + header_len])?;
    let payload_start = (16 + header_len).div_ceil(ALIGNMENT) * ALIGNMENT;
    println!("total {} bytes, header {header_len} bytes, payload at {payload_start}", bytes.len());
    println!("{header}");

    match from_bytes(&bytes)? {
        Archive::Model(back) => {
            assert_eq!(back, model);
            println!("round trip ok: {} layers", back.layers().len());
        }
        Archive::Dataset(_) => anyhow::bail!("expected a model archive"),
    }
    Ok(())
}
