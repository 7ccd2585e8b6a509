//! The prototype network: prototype bank, optional adaptor, similarity
//! layer and linear head.
//!
//! Shapes: `N` inputs, `M` prototypes, `C` classes, `D` embedding dims.
//! Prototypes are stored class-major, so prototype `m` belongs to class
//! `m / (M / C)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedstore::LabelSpace;
use crate::error::{Error, Result};
use crate::tensor::{squared_distance, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub p: Matrix,
    class_of: Vec<usize>,
    n_classes: usize,
}

/// Class index of every prototype under class-major ordering.
pub fn class_major_assignment(n_classes: usize, per_class: usize) -> Vec<usize> {
    (0..n_classes)
        .flat_map(|c| std::iter::repeat_n(c, per_class))
        .collect()
}

impl PrototypeBank {
    pub fn new(p: Matrix, n_classes: usize) -> Result<Self> {
        let m = p.rows();
        if n_classes == 0 || m == 0 || !m.is_multiple_of(n_classes) {
            return Err(Error::Validation(format!(
                "{m} prototypes cannot be split evenly over {n_classes} classes"
            )));
        }
        if !p.is_finite() {
            return Err(Error::Validation("prototype matrix is not finite".into()));
        }
        Ok(Self {
            class_of: class_major_assignment(n_classes, m / n_classes),
            p,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.p.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.p.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.p.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn per_class(&self) -> usize {
        self.len() / self.n_classes
    }

    pub fn class_of(&self, m: usize) -> usize {
        self.class_of[m]
    }

    pub fn class_assignment(&self) -> &[usize] {
        &self.class_of
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptorKind {
    Identity,
    ResidualMlp,
    SetAttention,
}

impl AdaptorKind {
    pub const ALL: [AdaptorKind; 3] = [
        AdaptorKind::Identity,
        AdaptorKind::ResidualMlp,
        AdaptorKind::SetAttention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AdaptorKind::Identity => "identity",
            AdaptorKind::ResidualMlp => "residual_mlp",
            AdaptorKind::SetAttention => "set_attention",
        }
    }
}

impl fmt::Display for AdaptorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdaptorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "identity" | "none" => Ok(AdaptorKind::Identity),
            "residual_mlp" => Ok(AdaptorKind::ResidualMlp),
            "set_attention" => Ok(AdaptorKind::SetAttention),
            _ => Err(Error::Config(format!("unknown adaptor {s:?}"))),
        }
    }
}

/// `out = h + W2·tanh(W1·h + b1) + b2`, applied to each row.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMlp {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Single-head self-attention across prototype rows followed by a
/// [`ResidualMlp`] block.
#[derive(Debug, Clone, PartialEq)]
pub struct SetAttention {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp: ResidualMlp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Adaptor {
    Identity,
    ResidualMlp(ResidualMlp),
    SetAttention(SetAttention),
}

/// Intermediates kept by the adaptor forward pass.
#[derive(Debug, Clone)]
pub enum AdaptorCache {
    Identity,
    ResidualMlp(MlpCache),
    SetAttention(AttentionCache),
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Matrix,
    t: Matrix,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    a: Matrix,
    b: Matrix,
    mlp: MlpCache,
}

fn uniform_matrix<R: Rng>(dim: usize, rng: &mut R) -> Matrix {
    let bound = 1.0 / (dim as f64).sqrt();
    Matrix::from_fn(dim, dim, |_, _| rng.random_range(-bound..bound))
}

fn add_bias(m: &mut Matrix, b: &[f64]) {
    for r in 0..m.rows() {
        for (v, bb) in m.row_mut(r).iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for row in m.iter_rows() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

impl ResidualMlp {
    fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        Self {
            w1: uniform_matrix(dim, rng),
            b1: vec![0.0; dim],
            w2: Matrix::zeros(dim, dim),
            b2: vec![0.0; dim],
        }
    }

    fn zeros(dim: usize) -> Self {
        Self {
            w1: Matrix::zeros(dim, dim),
            b1: vec![0.0; dim],
            w2: Matrix::zeros(dim, dim),
            b2: vec![0.0; dim],
        }
    }

    fn forward(&self, h: &Matrix) -> (Matrix, MlpCache) {
        let mut u = h.matmul_t(&self.w1);
        add_bias(&mut u, &self.b1);
        let mut t = u;
        for v in t.as_mut_slice() {
            *v = v.tanh();
        }
        let mut out = t.matmul_t(&self.w2);
        add_bias(&mut out, &self.b2);
        // residual last so a zero block returns `h` bit for bit
        for (o, x) in out.as_mut_slice().iter_mut().zip(h.as_slice()) {
            *o += x;
        }
        (
            out,
            MlpCache {
                input: h.clone(),
                t,
            },
        )
    }

    /// Returns the gradient w.r.t. the block input and accumulates
    /// parameter gradients into `grad`.
    fn backward(&self, cache: &MlpCache, g: &Matrix, grad: &mut ResidualMlp) -> Matrix {
        for (acc, v) in grad.b2.iter_mut().zip(column_sums(g)) {
            *acc += v;
        }
        grad.w2.add_assign(&g.t_matmul(&cache.t));
        let mut du = g.matmul(&self.w2);
        for (d, t) in du.as_mut_slice().iter_mut().zip(cache.t.as_slice()) {
            *d *= 1.0 - t * t;
        }
        for (acc, v) in grad.b1.iter_mut().zip(column_sums(&du)) {
            *acc += v;
        }
        grad.w1.add_assign(&du.t_matmul(&cache.input));
        let mut dh = du.matmul(&self.w1);
        dh.add_assign(g);
        dh
    }
}

fn softmax_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

impl SetAttention {
    fn forward(&self, p: &Matrix) -> (Matrix, AttentionCache) {
        let scale = 1.0 / (p.cols() as f64).sqrt();
        let q = p.matmul(&self.wq);
        let k = p.matmul(&self.wk);
        let v = p.matmul(&self.wv);
        let mut a = q.matmul_t(&k);
        for s in a.as_mut_slice() {
            *s *= scale;
        }
        softmax_rows(&mut a);
        let b = a.matmul(&v);
        let mut h = b.matmul(&self.wo);
        for (o, x) in h.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *o += x;
        }
        let (out, mlp) = self.mlp.forward(&h);
        (
            out,
            AttentionCache {
                q,
                k,
                v,
                a,
                b,
                mlp,
            },
        )
    }

    fn backward(&self, p: &Matrix, cache: &AttentionCache, g: &Matrix, grad: &mut SetAttention) -> Matrix {
        let scale = 1.0 / (p.cols() as f64).sqrt();
        let dh = self.mlp.backward(&cache.mlp, g, &mut grad.mlp);
        grad.wo.add_assign(&cache.b.t_matmul(&dh));
        let db = dh.matmul_t(&self.wo);
        let da = db.matmul_t(&cache.v);
        let dv = cache.a.t_matmul(&db);
        let mut ds = Matrix::zeros(da.rows(), da.cols());
        for i in 0..da.rows() {
            let arow = cache.a.row(i);
            let darow = da.row(i);
            let dot: f64 = arow.iter().zip(darow).map(|(a, d)| a * d).sum();
            for k in 0..da.cols() {
                ds.set(i, k, arow[k] * (darow[k] - dot) * scale);
            }
        }
        let dq = ds.matmul(&cache.k);
        let dk = ds.t_matmul(&cache.q);
        grad.wq.add_assign(&p.t_matmul(&dq));
        grad.wk.add_assign(&p.t_matmul(&dk));
        grad.wv.add_assign(&p.t_matmul(&dv));
        let mut dp = dh;
        dp.add_assign(&dq.matmul_t(&self.wq));
        dp.add_assign(&dk.matmul_t(&self.wk));
        dp.add_assign(&dv.matmul_t(&self.wv));
        dp
    }
}

impl Adaptor {
    /// Fresh adaptor: projection and first MLP weights uniform in
    /// `±1/√D`, second MLP layer and biases zero.
    pub fn init<R: Rng>(kind: AdaptorKind, dim: usize, rng: &mut R) -> Self {
        match kind {
            AdaptorKind::Identity => Adaptor::Identity,
            AdaptorKind::ResidualMlp => Adaptor::ResidualMlp(ResidualMlp::init(dim, rng)),
            AdaptorKind::SetAttention => {
                let wq = uniform_matrix(dim, rng);
                let wk = uniform_matrix(dim, rng);
                let wv = uniform_matrix(dim, rng);
                let wo = uniform_matrix(dim, rng);
                let mlp = ResidualMlp::init(dim, rng);
                Adaptor::SetAttention(SetAttention { wq, wk, wv, wo, mlp })
            }
        }
    }

    /// All-zero parameters of the given kind.
    pub fn zeros(kind: AdaptorKind, dim: usize) -> Self {
        match kind {
            AdaptorKind::Identity => Adaptor::Identity,
            AdaptorKind::ResidualMlp => Adaptor::ResidualMlp(ResidualMlp::zeros(dim)),
            AdaptorKind::SetAttention => Adaptor::SetAttention(SetAttention {
                wq: Matrix::zeros(dim, dim),
                wk: Matrix::zeros(dim, dim),
                wv: Matrix::zeros(dim, dim),
                wo: Matrix::zeros(dim, dim),
                mlp: ResidualMlp::zeros(dim),
            }),
        }
    }

    pub fn kind(&self) -> AdaptorKind {
        match self {
            Adaptor::Identity => AdaptorKind::Identity,
            Adaptor::ResidualMlp(_) => AdaptorKind::ResidualMlp,
            Adaptor::SetAttention(_) => AdaptorKind::SetAttention,
        }
    }

    pub fn forward(&self, p: &Matrix) -> (Matrix, AdaptorCache) {
        match self {
            Adaptor::Identity => (p.clone(), AdaptorCache::Identity),
            Adaptor::ResidualMlp(mlp) => {
                let (out, cache) = mlp.forward(p);
                (out, AdaptorCache::ResidualMlp(cache))
            }
            Adaptor::SetAttention(att) => {
                let (out, cache) = att.forward(p);
                (out, AdaptorCache::SetAttention(cache))
            }
        }
    }

    /// Back-propagates `dz` (gradient w.r.t. adapted prototypes). Returns
    /// the gradient w.r.t. raw prototypes; parameter gradients are
    /// accumulated into `grad`, which must be the same variant.
    pub fn backward(&self, p: &Matrix, cache: &AdaptorCache, dz: &Matrix, grad: &mut Adaptor) -> Matrix {
        match (self, cache, grad) {
            (Adaptor::Identity, AdaptorCache::Identity, Adaptor::Identity) => dz.clone(),
            (Adaptor::ResidualMlp(mlp), AdaptorCache::ResidualMlp(c), Adaptor::ResidualMlp(g)) => {
                mlp.backward(c, dz, g)
            }
            (Adaptor::SetAttention(att), AdaptorCache::SetAttention(c), Adaptor::SetAttention(g)) => {
                att.backward(p, c, dz, g)
            }
            _ => panic!("adaptor, cache and gradient variants disagree"),
        }
    }

    /// Named parameter tensors with their shapes, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        fn mlp_tensors(m: &ResidualMlp) -> [(&'static str, Vec<usize>, &[f64]); 4] {
            let d = m.b1.len();
            [
                ("adaptor.mlp.w1", vec![d, d], m.w1.as_slice()),
                ("adaptor.mlp.b1", vec![d], &m.b1),
                ("adaptor.mlp.w2", vec![d, d], m.w2.as_slice()),
                ("adaptor.mlp.b2", vec![d], &m.b2),
            ]
        }
        match self {
            Adaptor::Identity => Vec::new(),
            Adaptor::ResidualMlp(m) => mlp_tensors(m).into(),
            Adaptor::SetAttention(a) => {
                let d = a.wq.rows();
                let mut out = vec![
                    ("adaptor.attn.wq", vec![d, d], a.wq.as_slice()),
                    ("adaptor.attn.wk", vec![d, d], a.wk.as_slice()),
                    ("adaptor.attn.wv", vec![d, d], a.wv.as_slice()),
                    ("adaptor.attn.wo", vec![d, d], a.wo.as_slice()),
                ];
                out.extend(mlp_tensors(&a.mlp));
                out
            }
        }
    }

    /// Mutable views matching the order of [`Adaptor::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        fn mlp_mut(m: &mut ResidualMlp) -> [&mut [f64]; 4] {
            [
                m.w1.as_mut_slice(),
                &mut m.b1,
                m.w2.as_mut_slice(),
                &mut m.b2,
            ]
        }
        match self {
            Adaptor::Identity => Vec::new(),
            Adaptor::ResidualMlp(m) => mlp_mut(m).into(),
            Adaptor::SetAttention(a) => {
                let mut out: Vec<&mut [f64]> = vec![
                    a.wq.as_mut_slice(),
                    a.wk.as_mut_slice(),
                    a.wv.as_mut_slice(),
                    a.wo.as_mut_slice(),
                ];
                out.extend(mlp_mut(&mut a.mlp));
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// `C × M`.
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// Head whose weight is 1 between each prototype and its own class and 0
/// elsewhere, with zero bias.
pub fn init_linear_head(labels: &LabelSpace, bank: &PrototypeBank) -> Result<LinearHead> {
    if labels.len() != bank.n_classes() {
        return Err(Error::Validation(format!(
            "label space has {} classes but the prototype bank has {}",
            labels.len(),
            bank.n_classes()
        )));
    }
    let w = Matrix::from_fn(bank.n_classes(), bank.len(), |c, m| {
        if bank.class_of(m) == c {
            1.0
        } else {
            0.0
        }
    });
    Ok(LinearHead {
        w,
        b: vec![0.0; bank.n_classes()],
    })
}

/// Everything backward needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Adapted prototypes, `M × D`.
    pub z_p: Matrix,
    /// Similarities, `N × M`.
    pub s: Matrix,
    /// Class logits, `N × C`.
    pub logits: Matrix,
    pub cache: AdaptorCache,
}

pub fn adapt_prototypes(bank: &PrototypeBank, adaptor: &Adaptor) -> Matrix {
    adaptor.forward(&bank.p).0
}

/// `S[n][m] = exp(-‖z_x[n] - z_p[m]‖²)`.
pub fn similarity(z_x: &Matrix, z_p: &Matrix) -> Result<Matrix> {
    if z_x.cols() != z_p.cols() {
        return Err(Error::Validation(format!(
            "similarity inputs have dims {} and {}",
            z_x.cols(),
            z_p.cols()
        )));
    }
    Ok(Matrix::from_fn(z_x.rows(), z_p.rows(), |n, m| {
        (-squared_distance(z_x.row(n), z_p.row(m))).exp()
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtoNet {
    pub bank: PrototypeBank,
    pub adaptor: Adaptor,
    pub head: LinearHead,
}

/// Gradients with the same layout as the trainable parts of [`ProtoNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub prototypes: Matrix,
    pub adaptor: Adaptor,
    pub head: LinearHead,
}

impl Gradients {
    pub fn zeros_like(model: &ProtoNet) -> Self {
        Self {
            prototypes: Matrix::zeros(model.bank.len(), model.bank.dim()),
            adaptor: Adaptor::zeros(model.adaptor.kind(), model.bank.dim()),
            head: LinearHead {
                w: Matrix::zeros(model.head.w.rows(), model.head.w.cols()),
                b: vec![0.0; model.head.b.len()],
            },
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.prototypes.as_slice()];
        out.extend(self.adaptor.tensors().into_iter().map(|(_, _, d)| d));
        out.push(self.head.w.as_slice());
        out.push(&self.head.b);
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

impl ProtoNet {
    pub fn new(bank: PrototypeBank, adaptor: Adaptor, head: LinearHead) -> Result<Self> {
        let (c, m) = head.w.shape();
        if c != bank.n_classes() || m != bank.len() || head.b.len() != c {
            return Err(Error::Validation(format!(
                "head shape {c}x{m} (bias {}) does not match {} classes x {} prototypes",
                head.b.len(),
                bank.n_classes(),
                bank.len()
            )));
        }
        let dim = bank.dim();
        for (name, shape, _) in adaptor.tensors() {
            if shape.iter().any(|&s| s != dim) {
                return Err(Error::Validation(format!(
                    "adaptor tensor {name} has shape {shape:?}, expected dim {dim}"
                )));
            }
        }
        Ok(Self {
            bank,
            adaptor,
            head,
        })
    }

    /// Initial model: identity-block head over the given prototypes.
    pub fn initialize(bank: PrototypeBank, adaptor: Adaptor, labels: &LabelSpace) -> Result<Self> {
        let head = init_linear_head(labels, &bank)?;
        Self::new(bank, adaptor, head)
    }

    pub fn n_classes(&self) -> usize {
        self.bank.n_classes()
    }

    pub fn n_prototypes(&self) -> usize {
        self.bank.len()
    }

    pub fn dim(&self) -> usize {
        self.bank.dim()
    }

    pub fn adapted_prototypes(&self) -> Matrix {
        adapt_prototypes(&self.bank, &self.adaptor)
    }

    pub fn forward(&self, z_x: &Matrix) -> Result<ForwardTrace> {
        if z_x.cols() != self.dim() {
            return Err(Error::Validation(format!(
                "input dim {} does not match model dim {}",
                z_x.cols(),
                self.dim()
            )));
        }
        let (z_p, cache) = self.adaptor.forward(&self.bank.p);
        let s = similarity(z_x, &z_p)?;
        let logits = self.logits_from_similarity(&s);
        Ok(ForwardTrace {
            z_p,
            s,
            logits,
            cache,
        })
    }

    /// `logits = S·Wᵀ + b`.
    pub fn logits_from_similarity(&self, s: &Matrix) -> Matrix {
        let mut logits = s.matmul_t(&self.head.w);
        add_bias(&mut logits, &self.head.b);
        logits
    }

    /// Named trainable tensors with shapes, in checkpoint order.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let mut out = vec![(
            "prototypes",
            vec![self.bank.len(), self.bank.dim()],
            self.bank.p.as_slice(),
        )];
        out.extend(self.adaptor.tensors());
        out.push((
            "head.weight",
            vec![self.head.w.rows(), self.head.w.cols()],
            self.head.w.as_slice(),
        ));
        out.push(("head.bias", vec![self.head.b.len()], &self.head.b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.bank.p.as_mut_slice()];
        out.extend(self.adaptor.tensors_mut());
        out.push(self.head.w.as_mut_slice());
        out.push(&mut self.head.b);
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, _, d)| d.iter().copied()).collect()
    }

    /// Overwrites all trainable values from a flat vector in [`ProtoNet::tensors`] order.
    pub fn assign_flat(&mut self, values: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, values.len(), "flat parameter length mismatch");
    }

    /// Rounds every trainable value to binary32, the on-disk precision.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }
}
