//! Synthetic Gaussian-blob datasets and the independent oracles used to
//! check the trainer and the k-means initializer.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedstore::{write_embedding_file, LabelSpace, ManifestLine, SegmentMatrix, Split};
use crate::error::{Error, Result};
use crate::initkit::{kmeans, KMeansConfig};
use crate::protonet::{Adaptor, AdaptorKind, PrototypeBank, ProtoNet};
use crate::tensor::{squared_distance, Matrix};
use crate::trainer::{backward, compute_losses, ProtoLossTarget};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub center_scale: f64,
    pub noise_std: f64,
    pub segments_per_track: usize,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            per_class: 100,
            dim: 16,
            center_scale: 10.0,
            noise_std: 1.0,
            segments_per_track: 4,
            seed: 0,
        }
    }
}

impl BlobSpec {
    /// `center_scale / noise_std`; `None` for noiseless blobs.
    pub fn separation_ratio(&self) -> Option<f64> {
        (self.noise_std > 0.0).then(|| self.center_scale / self.noise_std)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.per_class == 0 || self.dim == 0 || self.segments_per_track == 0 {
            return Err(Error::Config(format!("invalid blob spec {self:?}")));
        }
        if !(self.center_scale.is_finite() && self.center_scale >= 0.0)
            || !(self.noise_std.is_finite() && self.noise_std >= 0.0)
        {
            return Err(Error::Config("blob scales must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Split of the `i`-th track of a class: first 80% train, next 10% valid, rest test.
    pub fn split_of(&self, i: usize) -> Split {
        let n_train = (self.per_class * 8).div_ceil(10);
        let n_valid = self.per_class.div_ceil(10);
        if i < n_train {
            Split::Train
        } else if i < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Serialize)]
struct BlobManifestLine<'a> {
    #[serde(flatten)]
    line: &'a ManifestLine,
    separation_ratio: Option<f64>,
}

/// Writes `manifest.jsonl`, `blob_spec.json` and one PEMB file per track
/// under `out_dir`; returns the manifest path.
pub fn gen_blobs(spec: &BlobSpec, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let emb_dir = out_dir.join("embeddings");
    fs::create_dir_all(&emb_dir).map_err(|e| Error::io(&emb_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;

    let manifest_path = out_dir.join("manifest.jsonl");
    let mut manifest = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for class in 0..spec.n_classes {
        let center: Vec<f64> = (0..spec.dim)
            .map(|_| {
                if spec.center_scale > 0.0 {
                    rng.random_range(-spec.center_scale..=spec.center_scale)
                } else {
                    0.0
                }
            })
            .collect();
        let label = format!("class_{class:02}");
        for track in 0..spec.per_class {
            let mut values = Vec::with_capacity(spec.segments_per_track * spec.dim);
            for _ in 0..spec.segments_per_track {
                for &c in &center {
                    values.push((c + noise.sample(&mut rng)) as f32);
                }
            }
            let id = format!("{label}_t{track:04}");
            let rel = format!("embeddings/{id}.pemb");
            let segments = SegmentMatrix::new(spec.segments_per_track, spec.dim, values)?;
            write_embedding_file(out_dir.join(&rel), &segments)?;
            let line = ManifestLine {
                id,
                label: label.clone(),
                split: spec.split_of(track).as_str().to_owned(),
                path: rel,
            };
            let json = serde_json::to_string(&BlobManifestLine {
                line: &line,
                separation_ratio: spec.separation_ratio(),
            })?;
            writeln!(manifest, "{json}").map_err(|e| Error::io(&manifest_path, e))?;
        }
    }
    let spec_path = out_dir.join("blob_spec.json");
    let mut spec_json = serde_json::to_value(spec)?;
    spec_json["separation_ratio"] = serde_json::to_value(spec.separation_ratio())?;
    fs::write(&spec_path, serde_json::to_vec_pretty(&spec_json)?).map_err(|e| Error::io(&spec_path, e))?;
    Ok(manifest_path)
}

/// Central differences `(f(x+h) − f(x−h)) / 2h`, one coordinate at a time.
pub fn finite_diff_grad(mut loss: impl FnMut(&[f64]) -> f64, params: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = loss(&x);
        x[i] = orig - h;
        let minus = loss(&x);
        x[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::Validation(format!(
                "loss is not finite around coordinate {i}: f(+h)={plus}, f(-h)={minus}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

pub const BRUTE_FORCE_MAX_POINTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceKMeans {
    pub inertia: f64,
    pub partition: Vec<usize>,
}

/// Exact minimum inertia by enumerating every partition of the points
/// into at most `k` non-empty parts (restricted growth strings).
pub fn brute_force_kmeans(points: &Matrix, k: usize) -> Result<BruteForceKMeans> {
    let n = points.rows();
    if n > BRUTE_FORCE_MAX_POINTS {
        return Err(Error::Validation(format!(
            "brute-force k-means refuses n={n} > {BRUTE_FORCE_MAX_POINTS}"
        )));
    }
    if n == 0 || k == 0 {
        return Err(Error::Validation("brute-force k-means needs n >= 1 and k >= 1".into()));
    }
    let mut best = BruteForceKMeans {
        inertia: f64::INFINITY,
        partition: Vec::new(),
    };
    let mut labels = vec![0usize; n];
    enumerate(points, k, 1, 0, &mut labels, &mut best);
    Ok(best)
}

fn enumerate(points: &Matrix, k: usize, used: usize, i: usize, labels: &mut Vec<usize>, best: &mut BruteForceKMeans) {
    let n = points.rows();
    if i == n {
        let inertia = partition_inertia(points, labels, used);
        if inertia < best.inertia {
            best.inertia = inertia;
            best.partition = labels.clone();
        }
        return;
    }
    if i == 0 {
        labels[0] = 0;
        enumerate(points, k, 1, 1, labels, best);
        return;
    }
    for part in 0..used.min(k) {
        labels[i] = part;
        enumerate(points, k, used, i + 1, labels, best);
    }
    if used < k {
        labels[i] = used;
        enumerate(points, k, used + 1, i + 1, labels, best);
    }
}

fn partition_inertia(points: &Matrix, labels: &[usize], parts: usize) -> f64 {
    let d = points.cols();
    let mut total = 0.0;
    for part in 0..parts {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == part).collect();
        let mut mean = vec![0.0; d];
        for &i in &members {
            for (m, v) in mean.iter_mut().zip(points.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= members.len() as f64;
        }
        total += members.iter().map(|&i| squared_distance(points.row(i), &mean)).sum::<f64>();
    }
    total
}

/// Finite-difference step used by the gradient oracle.
pub const GRADIENT_ORACLE_H: f64 = 1e-3;
/// Largest allowed relative error between analytic and numeric gradients.
pub const GRADIENT_REL_TOL: f64 = 1e-4;
/// Below this analytic magnitude coordinates are compared absolutely.
pub const GRADIENT_SMALL: f64 = 1e-8;
pub const GRADIENT_ABS_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCase {
    pub seed: u64,
    pub adaptor: AdaptorKind,
    pub lambda: f64,
    pub n_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub batch: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub max_abs_err_small: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientOracleReport {
    pub cases: Vec<GradientCase>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Random small model and batch: `D ≤ 8`, `M ≤ 6`, `N ≤ 16`, `C ≤ 4`.
pub fn random_gradient_case(seed: u64, adaptor: AdaptorKind) -> (ProtoNet, Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(2..=4usize);
    let per = rng.random_range(1..=6 / c);
    let d = rng.random_range(1..=8usize);
    let n = rng.random_range(1..=16usize);
    let p = Matrix::from_fn(c * per, d, |_, _| rng.random_range(-0.6..0.6));
    let bank = PrototypeBank::new(p, c).expect("valid bank");
    let labels = LabelSpace::new((0..c).map(|i| format!("c{i}")).collect()).expect("labels");
    let adaptor = Adaptor::init(adaptor, d, &mut rng);
    let mut model = ProtoNet::initialize(bank, adaptor, &labels).expect("model");
    // move off the structured init so every parameter has a generic gradient
    let flat: Vec<f64> = model.flatten().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
    model.assign_flat(&flat);
    // The prototype loss takes a min over same-class samples, so it is only
    // differentiable where that min is unique. Redraw the batch until every
    // runner-up is at least ARGMIN_MARGIN farther than the nearest sample, so
    // no ±h probe crosses a kink.
    let z_p = model.adapted_prototypes();
    loop {
        let x = Matrix::from_fn(n, d, |_, _| rng.random_range(-0.8..0.8));
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        if argmin_margin(&z_p, model.bank.class_assignment(), &x, &y) >= ARGMIN_MARGIN {
            return (model, x, y);
        }
    }
}

/// Minimum squared-distance gap between the nearest and runner-up
/// same-class sample that a gradient-oracle batch must keep.
pub const ARGMIN_MARGIN: f64 = 0.05;

/// Smallest gap, over prototypes, between the nearest and second-nearest
/// same-class sample; infinite when no prototype has two candidates.
pub fn argmin_margin(z_p: &Matrix, class_of: &[usize], x: &Matrix, labels: &[usize]) -> f64 {
    let mut margin = f64::INFINITY;
    for (j, &class) in class_of.iter().enumerate() {
        let mut d: Vec<f64> = (0..x.rows())
            .filter(|&i| labels[i] == class)
            .map(|i| squared_distance(z_p.row(j), x.row(i)))
            .collect();
        if d.len() >= 2 {
            d.sort_by(f64::total_cmp);
            margin = margin.min(d[1] - d[0]);
        }
    }
    margin
}

/// Compares analytic gradients with central differences on `n_cases`
/// seeded configurations, cycling through the adaptor variants and
/// `λ ∈ {0, 0.25, 1}`.
pub fn gradient_oracle(n_cases: usize, base_seed: u64) -> Result<GradientOracleReport> {
    const LAMBDAS: [f64; 3] = [0.0, 0.25, 1.0];
    let target = ProtoLossTarget::Adapted;
    let mut cases = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let seed = base_seed + i as u64;
        let kind = AdaptorKind::ALL[i % 3];
        let lambda = LAMBDAS[(i / 3) % 3];
        let (model, x, y) = random_gradient_case(seed, kind);
        let trace = model.forward(&x)?;
        let analytic = backward(&model, &trace, &x, &y, lambda, target)?.flatten();
        let mut scratch = model.clone();
        let mut failure = None;
        let numeric = finite_diff_grad(
            |theta| {
                scratch.assign_flat(theta);
                match scratch
                    .forward(&x)
                    .and_then(|t| compute_losses(&scratch, &t, &x, &y, lambda, target))
                {
                    Ok((report, _)) => report.total,
                    Err(e) => {
                        failure = Some(e);
                        f64::NAN
                    }
                }
            },
            &model.flatten(),
            GRADIENT_ORACLE_H,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let numeric = numeric?;
        let (mut max_rel, mut max_abs_small, mut passed) = (0.0f64, 0.0f64, true);
        for (a, b) in analytic.iter().zip(&numeric) {
            let diff = (a - b).abs();
            if a.abs() < GRADIENT_SMALL {
                max_abs_small = max_abs_small.max(diff);
                passed &= diff <= GRADIENT_ABS_TOL;
            } else {
                let rel = diff / a.abs();
                max_rel = max_rel.max(rel);
                passed &= rel <= GRADIENT_REL_TOL;
            }
        }
        cases.push(GradientCase {
            seed,
            adaptor: kind,
            lambda,
            n_classes: model.n_classes(),
            per_class: model.bank.per_class(),
            dim: model.dim(),
            batch: x.rows(),
            coordinates: analytic.len(),
            max_rel_err: max_rel,
            max_abs_err_small: max_abs_small,
            passed,
        });
    }
    Ok(GradientOracleReport {
        max_rel_err: cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max),
        passed: cases.iter().all(|c| c.passed),
        cases,
    })
}

/// Largest allowed gap between Lloyd inertia and the exact optimum.
pub const KMEANS_ORACLE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KMeansCase {
    pub seed: u64,
    pub n: usize,
    pub k: usize,
    pub dim: usize,
    pub lloyd_inertia: f64,
    pub optimal_inertia: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KMeansOracleReport {
    pub cases: Vec<KMeansCase>,
    pub max_gap: f64,
    pub passed: bool,
}

/// Random instance with `n ≤ 8`, `k ≤ 3`, `D ≤ 3`.
pub fn random_kmeans_case(seed: u64) -> (Matrix, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=8usize);
    let k = rng.random_range(1..=3usize.min(n));
    let d = rng.random_range(1..=3usize);
    (Matrix::from_fn(n, d, |_, _| rng.random_range(-5.0..5.0)), k)
}

/// Runs seeded k-means with the given configuration against exhaustive
/// enumeration on `n_instances` random instances.
pub fn kmeans_oracle(n_instances: usize, base_seed: u64, cfg: &KMeansConfig) -> Result<KMeansOracleReport> {
    let mut cases = Vec::with_capacity(n_instances);
    for i in 0..n_instances {
        let seed = base_seed + i as u64;
        let (points, k) = random_kmeans_case(seed);
        let lloyd = kmeans(&points, k, seed, cfg)?.inertia;
        let optimal = brute_force_kmeans(&points, k)?.inertia;
        cases.push(KMeansCase {
            seed,
            n: points.rows(),
            k,
            dim: points.cols(),
            lloyd_inertia: lloyd,
            optimal_inertia: optimal,
            passed: (lloyd - optimal).abs() <= KMEANS_ORACLE_TOL,
        });
    }
    Ok(KMeansOracleReport {
        max_gap: cases
            .iter()
            .map(|c| (c.lloyd_inertia - c.optimal_inertia).abs())
            .fold(0.0, f64::max),
        passed: cases.iter().all(|c| c.passed),
        cases,
    })
}
