//! Generates the default blob dataset, trains a prototype network on it
//! and reports test accuracy and the prototype self-classification audit.
//!
//! cargo run --release --example train_blobs -- [steps] [adaptor]

use std::time::Instant;

use protoscope::embedstore::{load_dataset, Split};
use protoscope::evaluator::evaluate_checkpoint;
use protoscope::explain::self_classify_prototypes;
use protoscope::protonet::AdaptorKind;
use protoscope::synthlab::{gen_blobs, BlobSpec};
use protoscope::trainer::{train, TrainConfig};

fn main() -> protoscope::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map_or(2000, |s| s.parse().expect("steps"));
    let adaptor: AdaptorKind = args.next().map_or(AdaptorKind::SetAttention, |s| s.parse().expect("adaptor"));

    let dir = tempfile::tempdir().expect("tempdir");
    let manifest = gen_blobs(&BlobSpec::default(), dir.path())?;
    let dataset = load_dataset(&manifest)?;

    let config = TrainConfig {
        total_steps: steps,
        batch_size: 64,
        prototypes_per_class: 5,
        adaptor,
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let outcome = train(&config, &dataset)?;
    let first = &outcome.metrics[0];
    let last = outcome.metrics.last().unwrap();
    println!(
        "trained {steps} steps with {} in {:.1?}",
        adaptor.as_str(),
        started.elapsed()
    );
    println!("loss {:.4} -> {:.4} (l_p {:.4} -> {:.4})", first.total, last.total, first.l_p, last.l_p);
    println!(
        "best checkpoint after {} steps, validation loss {:.5}",
        outcome.checkpoint.step, outcome.checkpoint.val_loss
    );

    let report = evaluate_checkpoint(&outcome.checkpoint, &dataset, Split::Test)?;
    println!("test class-normalized accuracy {:.4}", report.class_normalized_accuracy);
    let audit = self_classify_prototypes(&outcome.checkpoint.model)?;
    println!(
        "prototype self-classification {:.4} ({} misclassified)",
        audit.fraction_correct,
        audit.misclassified.len()
    );
    Ok(())
}
