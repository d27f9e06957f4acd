mod common;

use aftl::federation::Message;
use aftl::nn::Network;
use aftl::Tensor;
use common::oracle_ce;
use common::split::{check_discriminator, check_sources, check_target, schedule, snapshots, ETA};
use common::tiny_federation;

#[test]
fn federated_round_matches_monolithic_oracle() {
    for consistency in [false, true] {
        let s = snapshots(consistency);
        let src = check_sources(&s, consistency);
        let tgt = check_target(&s);
        let disc = check_discriminator(&s);
        assert!(
            src <= 1e-10,
            "sources differ by {src:e} (consistency {consistency})"
        );
        assert!(tgt <= 1e-10, "target differs by {tgt:e}");
        assert!(disc <= 1e-10, "discriminator differs by {disc:e}");
    }
}

#[test]
fn feedback_is_computed_before_the_discriminator_update() {
    let s = snapshots(false);
    let stale = s.before_feedback.server().discriminator();
    let fresh = s.queued.server().discriminator();
    assert!(!stale.bitwise_eq(fresh));
    let Some(Message::DiscFeedback { feature_grads, .. }) = s.queued.pending_disc_feedback(0)
    else {
        panic!("target feedback queued");
    };
    let target = s.queued.target();
    let images = target
        .shard()
        .batch(target.pending_batch().unwrap())
        .unwrap();
    let f = target.extractor().forward(&images).unwrap();
    let labels = vec![0; f.batch()];
    let grad_at = |d: &Network| {
        let (z, tape) = d.forward_recorded(&f).unwrap();
        d.backward(&tape, &oracle_ce(&z, &labels).1).unwrap().0
    };
    assert!(grad_at(stale).max_abs_diff(feature_grads) < 1e-12);
    assert!(grad_at(fresh).max_abs_diff(feature_grads) > 1e-9);
}

#[test]
fn zero_feedback_equals_plain_supervised_step() {
    let mut fed = tiny_federation(2, 10, schedule(false), 5);
    fed.run_initialization().unwrap();
    let mut plain = fed.source(1).unwrap().clone();
    let mut with_zero = plain.clone();
    // First step draws and uploads a batch; the second trains on it.
    plain.local_step(None, None, ETA).unwrap();
    with_zero.local_step(None, None, ETA).unwrap();
    let step = plain.clone();
    plain.local_step(None, None, ETA).unwrap();
    let shape = step
        .extractor()
        .forward(&step.shard().batch(step.pending_batch().unwrap()).unwrap().0)
        .unwrap()
        .shape()
        .to_vec();
    let zero = Message::DiscFeedback {
        client: 1,
        feature_grads: Tensor::zeros(shape),
        loss: 0.0,
    };
    with_zero.local_step(Some(&zero), None, ETA).unwrap();
    assert!(plain.extractor().bitwise_eq(with_zero.extractor()));
    assert!(plain.classifier().bitwise_eq(with_zero.classifier()));
}
