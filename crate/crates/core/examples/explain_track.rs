//! Trains on blobs, explains one test track by prototype contributions and
//! lists the train segments nearest to the top prototype.

use protoscope::embedstore::{load_dataset, Split};
use protoscope::explain::{explain_prediction, nearest_samples};
use protoscope::synthlab::{gen_blobs, BlobSpec};
use protoscope::trainer::{train, TrainConfig};

fn main() -> protoscope::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let ds = load_dataset(gen_blobs(&BlobSpec::default(), dir.path())?)?;
    let config = TrainConfig {
        total_steps: 1000,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let ck = train(&config, &ds)?.checkpoint;
    let (_, record) = ds.split(Split::Test).next().expect("a test track");
    let e = explain_prediction(&ck.model, &ck.normalizer, ck.labels.classes(), record, 5)?;
    println!("track {} (true {}) predicted {}", e.track_id, record.label, e.predicted_label);
    for c in &e.top {
        println!(
            "  prototype {:>2} (class {}): S={:.4} w={:+.4} contribution {:+.4}",
            c.prototype,
            ck.labels.name(c.class),
            c.similarity,
            c.weight,
            c.contribution
        );
    }
    let c = e.predicted_class;
    println!(
        "logit {:.6} = contributions + bias {:.6}",
        e.logits[c],
        e.reconstruct_logit(&ck.model, c)
    );
    let near = nearest_samples(&ck.model, &ds, &ck.normalizer, e.top[0].prototype, 3, false)?;
    for n in near.neighbors {
        println!("  nearest train segment {}#{} at squared distance {:.4}", n.id, n.segment, n.distance);
    }
    Ok(())
}
