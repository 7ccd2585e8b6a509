//! k-means on a small instance checked against exhaustive enumeration,
//! then prototype initialization on a blob dataset.

use protoscope::embedstore::{fit_normalizer, load_dataset};
use protoscope::initkit::{init_prototypes, kmeans, KMeansConfig};
use protoscope::synthlab::{brute_force_kmeans, gen_blobs, BlobSpec};
use protoscope::tensor::Matrix;

fn main() -> protoscope::Result<()> {
    let points = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]])?;
    let cfg = KMeansConfig::default();
    let lloyd = kmeans(&points, 2, 0, &cfg)?;
    let exact = brute_force_kmeans(&points, 2)?;
    println!("centroids {:?}", lloyd.centroids.to_rows());
    println!("inertia {} (exhaustive optimum {})", lloyd.inertia, exact.inertia);

    let dir = tempfile::tempdir().expect("tempdir");
    let ds = load_dataset(gen_blobs(&BlobSpec::default(), dir.path())?)?;
    let normalizer = fit_normalizer(&ds)?;
    let (bank, summary) = init_prototypes(&ds, &normalizer, 5, 0, &cfg)?;
    println!("{} prototypes of dim {}", bank.len(), bank.dim());
    for c in summary {
        println!(
            "  {}: {} rows, inertia {:.4}, {} iterations, prototype-center distances {:.3?}",
            c.label, c.n_rows, c.inertia, c.iterations, c.prototype_center_distances
        );
    }
    Ok(())
}
