//! Trains on blobs, saves a checkpoint, exports its prototypes as PEMB
//! files and audits prototype self-classification.
//!
//! cargo run --release --example export_prototypes -- <out_dir>

use protoscope::embedstore::load_dataset;
use protoscope::explain::{export_prototypes, self_classify_prototypes};
use protoscope::synthlab::{gen_blobs, BlobSpec};
use protoscope::trainer::{load_checkpoint, save_checkpoint, train, TrainConfig};

fn main() -> protoscope::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "export".into()));
    let ds = load_dataset(gen_blobs(&BlobSpec::default(), out.join("data"))?)?;
    let config = TrainConfig {
        total_steps: 2000,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let ck_path = out.join("checkpoint.pckp");
    save_checkpoint(&ck_path, &train(&config, &ds)?.checkpoint)?;
    let ck = load_checkpoint(&ck_path)?;
    let index = export_prototypes(&ck, Some(&ds), out.join("protos"))?;
    println!(
        "exported {} prototypes from checkpoint {}",
        index.prototypes.len(),
        &index.checkpoint_hash[..16]
    );
    let audit = self_classify_prototypes(&ck.model)?;
    for p in audit.prototypes.iter().take(5) {
        println!(
            "  prototype {:>2} class {} -> {} (margin over {} {:+.3})",
            p.prototype,
            ck.labels.name(p.class),
            ck.labels.name(p.predicted),
            ck.labels.name(p.top_rival),
            p.margin
        );
    }
    println!("self-classification fraction {}", audit.fraction_correct);
    Ok(())
}
