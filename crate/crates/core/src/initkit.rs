//! Prototype initialization from per-class k-means centroids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedstore::{Dataset, Normalizer, Split};
use crate::error::{Error, Result};
use crate::protonet::PrototypeBank;
use crate::tensor::{squared_distance, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop once the relative inertia improvement falls below this.
    pub tol: f64,
    /// Follow Lloyd with single-point transfers (Hartigan's rule) until no
    /// transfer lowers inertia.
    #[serde(default = "default_refine")]
    pub refine: bool,
}

fn default_refine() -> bool {
    true
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iter: 200,
            tol: 1e-6,
            refine: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every Lloyd iteration of the winning restart.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_plus_plus(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc >= target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // duplicates only: pick any unchosen index
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

fn assign(points: &Matrix, centroids: &Matrix) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let assignment = points
        .iter_rows()
        .map(|p| {
            let (j, d) = nearest(p, centroids);
            inertia += d;
            j
        })
        .collect();
    (assignment, inertia)
}

/// Gives every empty cluster the point currently farthest from its centroid.
fn repair_empty(points: &Matrix, centroids: &Matrix, assignment: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignment.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, &a) in assignment.iter().enumerate() {
            if counts[a] < 2 {
                continue;
            }
            let d = squared_distance(points.row(i), centroids.row(a));
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        match far {
            Some(i) => assignment[i] = empty,
            None => return,
        }
    }
}

fn means(points: &Matrix, assignment: &[usize], k: usize) -> Matrix {
    let mut sums = Matrix::zeros(k, points.cols());
    let mut counts = vec![0usize; k];
    for (i, &a) in assignment.iter().enumerate() {
        counts[a] += 1;
        for (s, v) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    for (j, &c) in counts.iter().enumerate() {
        let c = c as f64;
        for s in sums.row_mut(j) {
            *s /= c;
        }
    }
    sums
}

fn inertia_of(points: &Matrix, centroids: &Matrix, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &a)| squared_distance(points.row(i), centroids.row(a)))
        .sum()
}

fn lloyd(points: &Matrix, k: usize, cfg: &KMeansConfig, rng: &mut ChaCha8Rng) -> KMeansResult {
    let seeds = kmeans_plus_plus(points, k, rng);
    let (mut assignment, _) = assign(points, &seeds);
    repair_empty(points, &seeds, &mut assignment, k);
    let mut centroids = means(points, &assignment, k);
    let mut inertia = inertia_of(points, &centroids, &assignment);
    let mut trace = vec![inertia];
    let mut iterations = 1;
    while iterations < cfg.max_iter {
        let (mut next, _) = assign(points, &centroids);
        repair_empty(points, &centroids, &mut next, k);
        if next == assignment {
            break;
        }
        let next_centroids = means(points, &next, k);
        let next_inertia = inertia_of(points, &next_centroids, &next);
        iterations += 1;
        let improvement = inertia - next_inertia;
        assignment = next;
        centroids = next_centroids;
        inertia = next_inertia;
        trace.push(inertia);
        if improvement <= cfg.tol * inertia.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    if cfg.refine && hartigan_refine(points, &mut assignment, &mut centroids, k) {
        centroids = means(points, &assignment, k);
        inertia = inertia_of(points, &centroids, &assignment);
        trace.push(inertia);
    }
    KMeansResult {
        centroids,
        assignment,
        inertia,
        inertia_trace: trace,
        iterations,
    }
}

/// Moves single points between clusters while that strictly lowers inertia.
/// Moving `x` from `a` (size `n_a > 1`) to `b` changes inertia by
/// `n_b/(n_b+1)·|x−c_b|² − n_a/(n_a−1)·|x−c_a|²`. A partition with no
/// improving move is also a Lloyd fixed point. Returns whether anything moved.
#[allow(clippy::needless_range_loop)]
fn hartigan_refine(points: &Matrix, assignment: &mut [usize], centroids: &mut Matrix, k: usize) -> bool {
    let mut counts = vec![0usize; k];
    for &a in assignment.iter() {
        counts[a] += 1;
    }
    let total: f64 = inertia_of(points, centroids, assignment);
    // ignore gains at rounding level so the pass cannot cycle
    let min_gain = 1e-12 * (1.0 + total);
    let mut moved_any = false;
    loop {
        let mut moved = false;
        for i in 0..points.rows() {
            let a = assignment[i];
            if counts[a] < 2 {
                continue;
            }
            let x = points.row(i);
            let na = counts[a] as f64;
            let remove = na / (na - 1.0) * squared_distance(x, centroids.row(a));
            let mut best = None;
            let mut best_add = remove - min_gain;
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let add = nb / (nb + 1.0) * squared_distance(x, centroids.row(b));
                if add < best_add {
                    best_add = add;
                    best = Some(b);
                }
            }
            if let Some(b) = best {
                let (na, nb) = (counts[a] as f64, counts[b] as f64);
                for (c, v) in centroids.row_mut(a).iter_mut().zip(x) {
                    *c = (*c * na - v) / (na - 1.0);
                }
                for (c, v) in centroids.row_mut(b).iter_mut().zip(x) {
                    *c = (*c * nb + v) / (nb + 1.0);
                }
                counts[a] -= 1;
                counts[b] += 1;
                assignment[i] = b;
                moved = true;
                moved_any = true;
            }
        }
        if !moved {
            return moved_any;
        }
    }
}

/// Lloyd's algorithm with k-means++ seeding (plus the optional transfer
/// refinement), best of `cfg.restarts` runs.
pub fn kmeans(points: &Matrix, k: usize, seed: u64, cfg: &KMeansConfig) -> Result<KMeansResult> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::Validation("k-means needs k >= 1".into()));
    }
    if n < k {
        return Err(Error::Validation(format!("k-means needs n >= k, got n={n}, k={k}")));
    }
    if !points.is_finite() {
        return Err(Error::Validation("k-means input contains non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.restarts.max(1) {
        let run = lloyd(points, k, cfg, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Per-class k-means summary produced alongside the initial prototypes.
#[derive(Debug, Clone, Serialize)]
pub struct ClassInit {
    pub class: usize,
    pub label: String,
    pub n_rows: usize,
    pub inertia: f64,
    pub iterations: usize,
    /// Distance from each prototype to the class mean.
    pub prototype_center_distances: Vec<f64>,
}

/// Runs k-means with `k = per_class` on each class's normalized train
/// segments (seed `base_seed + class`) and stacks the centroids class-major.
pub fn init_prototypes(
    dataset: &Dataset,
    normalizer: &Normalizer,
    per_class: usize,
    base_seed: u64,
    cfg: &KMeansConfig,
) -> Result<(PrototypeBank, Vec<ClassInit>)> {
    if per_class == 0 {
        return Err(Error::Config("prototypes per class must be >= 1".into()));
    }
    let train = dataset.split_rows(Split::Train, normalizer)?;
    let labels = dataset.label_space();
    let mut protos = Vec::with_capacity(labels.len() * per_class);
    let mut summary = Vec::with_capacity(labels.len());
    for class in 0..labels.len() {
        let idx: Vec<usize> = (0..train.labels.len())
            .filter(|&i| train.labels[i] == class)
            .collect();
        if idx.is_empty() {
            return Err(Error::Validation(format!(
                "class {:?} has no train segments",
                labels.name(class)
            )));
        }
        if idx.len() < per_class {
            return Err(Error::Config(format!(
                "class {:?} has {} train segments, fewer than {per_class} prototypes per class",
                labels.name(class),
                idx.len()
            )));
        }
        let points = train.rows.select_rows(&idx);
        let result = kmeans(&points, per_class, base_seed.wrapping_add(class as u64), cfg)?;
        let center = means(&points, &vec![0; points.rows()], 1);
        summary.push(ClassInit {
            class,
            label: labels.name(class).to_owned(),
            n_rows: points.rows(),
            inertia: result.inertia,
            iterations: result.iterations,
            prototype_center_distances: result
                .centroids
                .iter_rows()
                .map(|c| squared_distance(c, center.row(0)).sqrt())
                .collect(),
        });
        protos.extend(result.centroids.to_rows());
    }
    let bank = PrototypeBank::new(Matrix::from_rows(&protos)?, labels.len())?;
    Ok((bank, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedstore::{EmbeddingRecord, SegmentMatrix};

    fn pts(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_cluster_is_mean() {
        let r = kmeans(&pts(&[&[0.0], &[2.0], &[4.0]]), 1, 0, &KMeansConfig::default()).unwrap();
        assert_eq!(r.centroids.as_slice(), &[2.0]);
        assert_eq!(r.inertia, 8.0);
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let p = pts(&[&[0.0, 1.0], &[5.0, 5.0], &[-3.0, 2.0]]);
        let r = kmeans(&p, 3, 7, &KMeansConfig::default()).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut got = r.centroids.to_rows();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want = p.to_rows();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn two_cluster_instance() {
        // optimum frozen from brute-force enumeration of all 2-partitions
        let p = pts(&[&[0.0, 0.0], &[0.0, 1.0], &[10.0, 0.0], &[10.0, 1.0]]);
        let r = kmeans(&p, 2, 1, &KMeansConfig::default()).unwrap();
        assert!((r.inertia - 1.0).abs() < 1e-12);
        let mut c = r.centroids.to_rows();
        c.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(c, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
    }

    #[test]
    fn errors() {
        let cfg = KMeansConfig::default();
        assert!(kmeans(&pts(&[&[0.0]]), 2, 0, &cfg).is_err());
        assert!(kmeans(&pts(&[&[f64::NAN], &[1.0]]), 1, 0, &cfg).is_err());
    }

    #[test]
    fn every_centroid_owns_points_even_with_duplicates() {
        let p = pts(&[&[1.0], &[1.0], &[1.0], &[2.0]]);
        let r = kmeans(&p, 3, 4, &KMeansConfig::default()).unwrap();
        for j in 0..3 {
            assert!(r.assignment.contains(&j));
        }
        let recomputed: f64 = (0..4)
            .map(|i| squared_distance(p.row(i), r.centroids.row(r.assignment[i])))
            .sum();
        assert_eq!(recomputed, r.inertia);
    }

    proptest::proptest! {
        #[test]
        fn inertia_never_increases(seed in proptest::prelude::any::<u64>(), k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Matrix::from_fn(40, 3, |_, _| rng.random_range(-5.0..5.0));
            let r = kmeans(&p, k, seed, &KMeansConfig::default()).unwrap();
            for w in r.inertia_trace.windows(2) {
                proptest::prop_assert!(w[1] <= w[0], "{:?}", r.inertia_trace);
            }
        }
    }

    #[test]
    fn transfer_refinement_escapes_lloyd_local_optima() {
        use crate::synthlab::{brute_force_kmeans, random_kmeans_case};
        // instances where plain Lloyd with 8 k-means++ restarts stops short
        for seed in [2019u64, 2032] {
            let (points, k) = random_kmeans_case(seed);
            let optimal = brute_force_kmeans(&points, k).unwrap().inertia;
            let plain = KMeansConfig {
                refine: false,
                ..KMeansConfig::default()
            };
            let lloyd = kmeans(&points, k, seed, &plain).unwrap().inertia;
            let refined = kmeans(&points, k, seed, &KMeansConfig::default()).unwrap();
            assert!(lloyd > optimal + 1e-6);
            assert!((refined.inertia - optimal).abs() <= 1e-9);
            assert!(refined.inertia_trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn refined_partition_is_a_lloyd_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let points = Matrix::from_fn(30, 2, |_, _| rng.random_range(-3.0..3.0));
            let r = kmeans(&points, 4, rng.random(), &KMeansConfig::default()).unwrap();
            let (again, _) = assign(&points, &r.centroids);
            assert_eq!(again, r.assignment);
        }
    }

    fn record(id: String, label: &str, split: Split, row: Vec<f32>) -> EmbeddingRecord {
        EmbeddingRecord {
            id,
            label: label.into(),
            split,
            segments: SegmentMatrix::new(1, row.len(), row).unwrap(),
        }
    }

    fn two_blob_dataset() -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut recs = Vec::new();
        for (label, cx) in [("a", -8.0f32), ("b", 8.0f32)] {
            for i in 0..30 {
                let split = if i < 25 { Split::Train } else { Split::Valid };
                let row = vec![cx + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                recs.push(record(format!("{label}{i:02}"), label, split, row));
            }
        }
        Dataset::from_records(recs).unwrap()
    }

    #[test]
    fn one_prototype_per_class_is_class_mean() {
        let ds = two_blob_dataset();
        let norm = Normalizer::identity(2);
        let (bank, _) = init_prototypes(&ds, &norm, 1, 0, &KMeansConfig::default()).unwrap();
        let train = ds.split_rows(Split::Train, &norm).unwrap();
        for c in 0..2 {
            let idx: Vec<usize> = (0..train.labels.len()).filter(|&i| train.labels[i] == c).collect();
            let mean = means(&train.rows.select_rows(&idx), &vec![0; idx.len()], 1);
            for (a, b) in bank.p.row(c).iter().zip(mean.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prototypes_land_near_their_own_class() {
        let ds = two_blob_dataset();
        let norm = crate::embedstore::fit_normalizer(&ds).unwrap();
        let (bank, summary) = init_prototypes(&ds, &norm, 2, 5, &KMeansConfig::default()).unwrap();
        assert_eq!(bank.len(), 4);
        assert_eq!(summary.len(), 2);
        let train = ds.split_rows(Split::Train, &norm).unwrap();
        let centers: Vec<Matrix> = (0..2)
            .map(|c| {
                let idx: Vec<usize> = (0..train.labels.len()).filter(|&i| train.labels[i] == c).collect();
                means(&train.rows.select_rows(&idx), &vec![0; idx.len()], 1)
            })
            .collect();
        for m in 0..4 {
            let d: Vec<f64> = centers.iter().map(|c| squared_distance(bank.p.row(m), c.row(0))).collect();
            let nearest_class = if d[0] <= d[1] { 0 } else { 1 };
            assert_eq!(nearest_class, bank.class_of(m));
        }
    }

    #[test]
    fn class_with_exactly_k_rows_keeps_its_rows() {
        let recs = vec![
            record("a0".into(), "a", Split::Train, vec![1.0, 2.0]),
            record("a1".into(), "a", Split::Train, vec![-3.0, 0.5]),
            record("b0".into(), "b", Split::Train, vec![9.0, 9.0]),
            record("b1".into(), "b", Split::Train, vec![7.0, 8.0]),
            record("b2".into(), "b", Split::Train, vec![8.0, 7.0]),
            record("v0".into(), "a", Split::Valid, vec![0.0, 0.0]),
        ];
        let ds = Dataset::from_records(recs).unwrap();
        let (bank, _) = init_prototypes(&ds, &Normalizer::identity(2), 2, 0, &KMeansConfig::default()).unwrap();
        let mut got = vec![bank.p.row(0).to_vec(), bank.p.row(1).to_vec()];
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, vec![vec![-3.0, 0.5], vec![1.0, 2.0]]);
    }

    #[test]
    fn too_few_rows_fails_loudly() {
        let recs = vec![
            record("a0".into(), "a", Split::Train, vec![1.0]),
            record("b0".into(), "b", Split::Train, vec![9.0]),
            record("b1".into(), "b", Split::Train, vec![7.0]),
            record("v0".into(), "a", Split::Valid, vec![0.0]),
        ];
        let ds = Dataset::from_records(recs).unwrap();
        let err = init_prototypes(&ds, &Normalizer::identity(1), 2, 0, &KMeansConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn class_without_train_rows_is_an_error() {
        let recs = vec![
            record("a0".into(), "a", Split::Train, vec![1.0]),
            record("b0".into(), "b", Split::Valid, vec![9.0]),
        ];
        let ds = Dataset::from_records(recs).unwrap();
        let err = init_prototypes(&ds, &Normalizer::identity(1), 1, 0, &KMeansConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn init_ignores_valid_and_test_rows() {
        let ds = two_blob_dataset();
        let mut recs = ds.records().to_vec();
        for r in recs.iter_mut().filter(|r| r.split == Split::Valid) {
            r.segments = SegmentMatrix::new(1, 2, vec![100.0, -100.0]).unwrap();
        }
        let ds2 = Dataset::from_records(recs).unwrap();
        let norm = Normalizer::identity(2);
        let cfg = KMeansConfig::default();
        let a = init_prototypes(&ds, &norm, 3, 9, &cfg).unwrap().0;
        let b = init_prototypes(&ds2, &norm, 3, 9, &cfg).unwrap().0;
        assert_eq!(a, b);
    }
}
