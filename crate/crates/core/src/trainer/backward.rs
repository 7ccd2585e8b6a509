//! Reverse-mode gradients of the total loss.
//!
//! Chain: logits → S → z_p → (adaptor) → p, plus the prototype-loss path
//! into z_p (or p when the loss targets raw prototypes). The min in the
//! prototype loss is differentiated at its argmin sample only.

use crate::error::Result;
use crate::protonet::{ForwardTrace, Gradients, ProtoNet};
use crate::tensor::Matrix;

use super::loss::{loss_prototype, sigmoid, ProtoLossTarget};

pub fn backward(
    model: &ProtoNet,
    trace: &ForwardTrace,
    z_x: &Matrix,
    labels: &[usize],
    lambda: f64,
    target: ProtoLossTarget,
) -> Result<Gradients> {
    let n = z_x.rows();
    let c = model.n_classes();
    let m = model.n_prototypes();
    let d = model.dim();
    let mut grads = Gradients::zeros_like(model);

    // d(λ·mean BCE)/d logits
    let scale = lambda / (n * c) as f64;
    let g_logits = Matrix::from_fn(n, c, |i, k| {
        let y = if labels[i] == k { 1.0 } else { 0.0 };
        scale * (sigmoid(trace.logits.get(i, k)) - y)
    });

    grads.head.w = g_logits.t_matmul(&trace.s);
    for (gb, row) in grads.head.b.iter_mut().zip(0..c) {
        *gb = (0..n).map(|i| g_logits.get(i, row)).sum();
    }

    // dS, then through S = exp(-dist): d dist = -S·dS, d dist/d z_p = 2(z_p - x)
    let g_s = g_logits.matmul(&model.head.w);
    let mut g_zp = Matrix::zeros(m, d);
    for j in 0..m {
        let zp = trace.z_p.row(j);
        let acc = g_zp.row_mut(j);
        for i in 0..n {
            let g_dist = -g_s.get(i, j) * trace.s.get(i, j);
            if g_dist == 0.0 {
                continue;
            }
            let x = z_x.row(i);
            for k in 0..d {
                acc[k] += 2.0 * g_dist * (zp[k] - x[k]);
            }
        }
    }

    let protos = match target {
        ProtoLossTarget::Adapted => &trace.z_p,
        ProtoLossTarget::Raw => &model.bank.p,
    };
    let lp = loss_prototype(protos, model.bank.class_assignment(), z_x, labels);
    let mut g_proto_loss = Matrix::zeros(m, d);
    if lp.covered > 0 {
        let w = 2.0 * (1.0 - lambda) / lp.covered as f64;
        for (j, nearest) in lp.nearest.iter().enumerate() {
            if let Some(i) = *nearest {
                let x = z_x.row(i);
                let pj = protos.row(j);
                for k in 0..d {
                    g_proto_loss.set(j, k, w * (pj[k] - x[k]));
                }
            }
        }
    }

    match target {
        ProtoLossTarget::Adapted => {
            g_zp.add_assign(&g_proto_loss);
            grads.prototypes = model
                .adaptor
                .backward(&model.bank.p, &trace.cache, &g_zp, &mut grads.adaptor);
        }
        ProtoLossTarget::Raw => {
            let mut g_p = model
                .adaptor
                .backward(&model.bank.p, &trace.cache, &g_zp, &mut grads.adaptor);
            g_p.add_assign(&g_proto_loss);
            grads.prototypes = g_p;
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedstore::LabelSpace;
    use crate::protonet::{Adaptor, AdaptorKind, PrototypeBank};
    use crate::synthlab::finite_diff_grad;
    use crate::trainer::loss::compute_losses;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(rng: &mut ChaCha8Rng, kind: AdaptorKind, c: usize, per: usize, d: usize) -> ProtoNet {
        let p = Matrix::from_fn(c * per, d, |_, _| rng.random_range(-0.6..0.6));
        let bank = PrototypeBank::new(p, c).unwrap();
        let labels = LabelSpace::new((0..c).map(|i| i.to_string()).collect()).unwrap();
        let mut model = ProtoNet::initialize(bank, Adaptor::init(kind, d, rng), &labels).unwrap();
        let flat: Vec<f64> = model.flatten().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
        model.assign_flat(&flat);
        model
    }

    fn check(kind: AdaptorKind, lambda: f64, target: ProtoLossTarget, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, per, d, n) = (3, 2, 4, 7);
        let model = random_model(&mut rng, kind, c, per, d);
        let x = Matrix::from_fn(n, d, |_, _| rng.random_range(-0.8..0.8));
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let trace = model.forward(&x).unwrap();
        let analytic = backward(&model, &trace, &x, &labels, lambda, target).unwrap().flatten();
        let base = model.flatten();
        let numeric = finite_diff_grad(
            |theta| {
                let mut m = model.clone();
                m.assign_flat(theta);
                let t = m.forward(&x).unwrap();
                compute_losses(&m, &t, &x, &labels, lambda, target).unwrap().0.total
            },
            &base,
            1e-3,
        )
        .unwrap();
        for (i, (a, b)) in analytic.iter().zip(&numeric).enumerate() {
            let err = (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
            assert!(err <= 1e-4 || (a - b).abs() <= 1e-7, "{kind} λ={lambda} coord {i}: {a} vs {b}");
        }
    }

    #[test]
    fn matches_finite_differences_every_variant() {
        for kind in AdaptorKind::ALL {
            for lambda in [0.0, 0.25, 1.0] {
                check(kind, lambda, ProtoLossTarget::Adapted, 40);
            }
        }
    }

    #[test]
    fn raw_target_matches_finite_differences() {
        for kind in AdaptorKind::ALL {
            check(kind, 0.25, ProtoLossTarget::Raw, 41);
        }
    }

    #[test]
    fn head_gradient_closed_form_single_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = random_model(&mut rng, AdaptorKind::Identity, 3, 1, 2);
        let x = Matrix::from_rows(&[vec![0.1, -0.2]]).unwrap();
        let trace = model.forward(&x).unwrap();
        let g = backward(&model, &trace, &x, &[1], 1.0, ProtoLossTarget::Adapted).unwrap();
        for c in 0..3 {
            let y = if c == 1 { 1.0 } else { 0.0 };
            for m in 0..3 {
                let expect = (sigmoid(trace.logits.get(0, c)) - y) * trace.s.get(0, m) / 3.0;
                assert!((g.head.w.get(c, m) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn lambda_one_routes_prototype_gradient_through_similarity_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut model = random_model(&mut rng, AdaptorKind::Identity, 2, 1, 3);
        let x = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let labels = [0, 1, 0, 1];
        let trace = model.forward(&x).unwrap();
        let g = backward(&model, &trace, &x, &labels, 1.0, ProtoLossTarget::Adapted).unwrap();
        // zero head: no path through S remains
        model.head.w = Matrix::zeros(2, 2);
        let trace = model.forward(&x).unwrap();
        let g0 = backward(&model, &trace, &x, &labels, 1.0, ProtoLossTarget::Adapted).unwrap();
        assert!(g.prototypes.as_slice().iter().any(|&v| v != 0.0));
        assert!(g0.prototypes.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lambda_zero_leaves_head_gradient_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = random_model(&mut rng, AdaptorKind::SetAttention, 2, 2, 3);
        let x = Matrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let trace = model.forward(&x).unwrap();
        let g = backward(&model, &trace, &x, &[0, 1, 1, 0, 1], 0.0, ProtoLossTarget::Adapted).unwrap();
        assert!(g.head.w.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.head.b.iter().all(|&v| v == 0.0));
    }
}
