//! Monolithic single-graph oracle for one federated round.

use aftl::federation::{Federation, Message, RoundSchedule};
use aftl::nn::Network;
use aftl::Tensor;

use super::{chain, flat, max_diff, oracle_ce, tiny_federation};

pub const ETA: f64 = 0.05;

pub fn schedule(consistency: bool) -> RoundSchedule {
    RoundSchedule {
        rounds: 2,
        init_epochs: 2,
        batch_size: 10,
        eta: ETA,
        discriminator: true,
        consistency,
    }
}

/// Gradient of `loss(net(input))` w.r.t. every parameter of `net`, given the
/// gradient of the loss at the output.
pub fn param_grads(
    net: &Network,
    input: &Tensor,
    out_grad: impl Fn(&Tensor) -> Tensor,
) -> Vec<f64> {
    let (out, tape) = net.forward_recorded(input).unwrap();
    let (_, g) = net.backward(&tape, &out_grad(&out)).unwrap();
    g.values().collect()
}

pub fn softmax_rows(z: &Tensor) -> Tensor {
    let w = z.row_len();
    let mut out = Vec::with_capacity(z.len());
    for row in z.rows() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    Tensor::new(vec![z.batch(), w], out).unwrap()
}

/// `∂L_p/∂p_i` for `L_p = (1/(nN)) Σ_i Σ_j ‖p_ij − p̄_j‖₂`.
pub fn oracle_lp_grad(probs: &[Tensor], i: usize) -> Tensor {
    let n_cls = probs.len() as f64;
    let (n, k) = (probs[0].batch(), probs[0].row_len());
    let mut out = vec![0.0; n * k];
    for j in 0..n {
        let mean: Vec<f64> = (0..k)
            .map(|c| probs.iter().map(|p| p.row(j)[c]).sum::<f64>() / n_cls)
            .collect();
        let unit = |p: &Tensor| -> Vec<f64> {
            let d: Vec<f64> = (0..k).map(|c| p.row(j)[c] - mean[c]).collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            d.iter()
                .map(|v| if norm > 0.0 { v / norm } else { 0.0 })
                .collect()
        };
        let units: Vec<Vec<f64>> = probs.iter().map(unit).collect();
        for c in 0..k {
            let avg = units.iter().map(|u| u[c]).sum::<f64>() / n_cls;
            out[j * k + c] = (units[i][c] - avg) / (n as f64 * n_cls);
        }
    }
    Tensor::new(vec![n, k], out).unwrap()
}

// Softmax Jacobian applied explicitly: dz_c = Σ_m g_m p_m (δ_cm − p_c).
pub fn softmax_vjp(p: &Tensor, g: &Tensor) -> Tensor {
    let k = p.row_len();
    let mut out = vec![0.0; p.len()];
    for r in 0..p.batch() {
        for c in 0..k {
            let mut s = 0.0;
            for m in 0..k {
                let delta = if c == m { 1.0 } else { 0.0 };
                s += g.row(r)[m] * p.row(r)[m] * (delta - p.row(r)[c]);
            }
            out[r * k + c] = s;
        }
    }
    Tensor::new(p.shape().to_vec(), out).unwrap()
}

pub fn updated(params: &[f64], grad: &[f64]) -> Vec<f64> {
    params.iter().zip(grad).map(|(p, g)| p - ETA * g).collect()
}

pub struct Snapshots {
    /// Before the round whose feedback is applied.
    pub before_feedback: Federation,
    /// After that round, feedback queued.
    pub queued: Federation,
    /// After the round that applies it.
    pub after: Federation,
    pub uploads: Vec<Message>,
}

pub fn snapshots(consistency: bool) -> Snapshots {
    let mut fed = tiny_federation(2, 10, schedule(consistency), 17);
    fed.run_initialization().unwrap();
    let before_feedback = fed.clone();
    fed.run_round().unwrap();
    let queued = fed.clone();
    let report = fed.run_round().unwrap();
    let uploads = report
        .messages
        .into_iter()
        .filter(|m| matches!(m, Message::FeatureUpload { .. }))
        .collect();
    Snapshots {
        before_feedback,
        queued,
        after: fed,
        uploads,
    }
}

pub fn check_sources(s: &Snapshots, consistency: bool) -> f64 {
    let d_pre = s.before_feedback.server().discriminator();
    let mut worst: f64 = 0.0;
    let probs: Vec<Tensor> = if consistency {
        s.queued
            .sources()
            .iter()
            .map(|c| softmax_rows(&c.classifier().forward(c.target_view().unwrap()).unwrap()))
            .collect()
    } else {
        Vec::new()
    };
    for (i, client) in s.queued.sources().iter().enumerate() {
        let id = client.id();
        let batch = client.pending_batch().unwrap();
        let (images, labels) = client.shard().batch(batch).unwrap();
        let ext = client.extractor();
        let cls = client.classifier();

        let g_c = param_grads(&chain(ext, cls), &images, |z| oracle_ce(z, &labels).1);
        let domain = vec![id; images.batch()];
        let g_d = param_grads(&chain(ext, d_pre), &images, |z| oracle_ce(z, &domain).1);
        assert!(
            g_d.iter().any(|g| g.abs() > 1e-6),
            "discriminator path must carry signal"
        );
        let ext_len = ext.param_count();
        // One reversal at the extractor/discriminator boundary.
        let ext_grad: Vec<f64> = (0..ext_len).map(|k| g_c[k] - g_d[k]).collect();
        let mut cls_grad: Vec<f64> = g_c[ext_len..].to_vec();
        if consistency {
            let view = client.target_view().unwrap();
            let dz = softmax_vjp(&probs[i], &oracle_lp_grad(&probs, i));
            let g_p = param_grads(cls, view, |_| dz.clone());
            assert!(g_p.iter().any(|g| g.abs() > 1e-9));
            for (a, b) in cls_grad.iter_mut().zip(g_p) {
                *a += b;
            }
        }
        let want_ext = updated(&flat(&ext.export_tensors()), &ext_grad);
        let want_cls = updated(&flat(&cls.export_tensors()), &cls_grad);
        let got = s.after.source(id).unwrap();
        worst = worst
            .max(max_diff(
                &want_ext,
                &flat(&got.extractor().export_tensors()),
            ))
            .max(max_diff(
                &want_cls,
                &flat(&got.classifier().export_tensors()),
            ));
    }
    worst
}

pub fn check_target(s: &Snapshots) -> f64 {
    let d_pre = s.before_feedback.server().discriminator();
    let target = s.queued.target();
    let images = target
        .shard()
        .batch(target.pending_batch().unwrap())
        .unwrap();
    let ext = target.extractor();
    let domain = vec![0; images.batch()];
    let g_d = param_grads(&chain(ext, d_pre), &images, |z| oracle_ce(z, &domain).1);
    let ascent: Vec<f64> = g_d[..ext.param_count()].iter().map(|g| -g).collect();
    let want = updated(&flat(&ext.export_tensors()), &ascent);
    max_diff(&want, &flat(&s.after.target().extractor().export_tensors()))
}

pub fn check_discriminator(s: &Snapshots) -> f64 {
    let d = s.queued.server().discriminator();
    let mut total = vec![0.0; d.param_count()];
    for m in &s.uploads {
        let Message::FeatureUpload {
            client, features, ..
        } = m
        else {
            unreachable!()
        };
        let labels = vec![*client; features.batch()];
        for (t, g) in total
            .iter_mut()
            .zip(param_grads(d, features, |z| oracle_ce(z, &labels).1))
        {
            *t += g;
        }
    }
    let want = updated(&flat(&d.export_tensors()), &total);
    max_diff(
        &want,
        &flat(&s.after.server().discriminator().export_tensors()),
    )
}

/// Largest deviation between the federated round and the oracle, over
/// sources, target and discriminator.
pub fn worst_deviation(consistency: bool) -> f64 {
    let s = snapshots(consistency);
    check_sources(&s, consistency)
        .max(check_target(&s))
        .max(check_discriminator(&s))
}
