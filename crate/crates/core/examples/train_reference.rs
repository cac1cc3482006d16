//! Trains the reference MLP on the synthetic dataset and writes archives.
//!
//! Run with `cargo run --release --example train_reference [OUT_DIR]`.

use ptq_reliability::archive::{load_model, save_dataset, save_model};
use ptq_reliability::evaluate;
use ptq_reliability::reference::ReferenceWorkload;

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "reference-out".into());
    std::fs::create_dir_all(&out)?;

    let workload = ReferenceWorkload::default();
    let r = workload.build()?;
    for (epoch, loss) in r.epoch_losses.iter().enumerate() {
        println!("epoch {epoch:>2}  loss {loss:.4}");
    }
    let fp = evaluate(&r.model, &r.test, None)?;
    println!("test accuracy {:.4}", fp.average);
    for (c, acc) in fp.per_class.iter().enumerate() {
        println!("  class {c}: {acc:.3}");
    }

    let model_path = format!("{out}/model.ptq");
    save_model(&r.model, &model_path)?;
    save_dataset(&r.train, format!("{out}/train.ptq"))?;
    save_dataset(&r.test, format!("{out}/test.ptq"))?;

    let reloaded = load_model(&model_path)?;
    assert_eq!(evaluate(&reloaded, &r.test, None)?, fp);
    println!("archives written to {out}/");
    Ok(())
}
