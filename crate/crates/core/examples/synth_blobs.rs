//! Writes a Gaussian-blob dataset (manifest + PEMB files) and loads it back.
//!
//! cargo run --example synth_blobs -- <out_dir> [seed]

use protoscope::embedstore::{load_dataset, Split};
use protoscope::synthlab::{gen_blobs, BlobSpec};

fn main() -> protoscope::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "blobs".into());
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let spec = BlobSpec { seed, ..BlobSpec::default() };
    let manifest = gen_blobs(&spec, &out)?;
    let ds = load_dataset(&manifest)?;
    let segments: usize = ds.records().iter().map(|r| r.segments.n_segments()).sum();
    println!("wrote {}", manifest.display());
    println!(
        "{} tracks, {segments} segments, {} classes, dim {}, separation ratio {:?}",
        ds.records().len(),
        ds.label_space().len(),
        ds.dim(),
        spec.separation_ratio()
    );
    for split in [Split::Train, Split::Valid, Split::Test] {
        println!("  {:<5} {} tracks", split.as_str(), ds.split(split).count());
    }
    Ok(())
}
