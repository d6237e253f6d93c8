use super::*;
use crate::data::{gen_blobs, BlobsSpec};
use crate::nn::{init_params, Architecture};

fn setup(seed: u64) -> (ModelParams, Batch, Batch) {
    let spec = BlobsSpec {
        n: 96,
        ..BlobsSpec::default()
    };
    let data = gen_blobs(seed, &spec).unwrap();
    let params = init_params(seed, Architecture::new(vec![2, 8], 4).unwrap());
    let train = Batch::from_dataset(&data, &(0..48).collect::<Vec<_>>()).unwrap();
    let metaval = Batch::from_dataset(&data, &(48..96).collect::<Vec<_>>()).unwrap();
    (params, train, metaval)
}

fn omega(kind: HyperKind) -> HyperParams {
    let mut om = HyperParams::zeros(kind, 4, 8);
    for (i, v) in om.values.iter_mut().enumerate() {
        *v = 0.05 + 0.02 * (i % 7) as f64;
    }
    om
}

fn meta_cfg(objective: MetaObjective) -> MetaConfig {
    MetaConfig {
        objective,
        ..MetaConfig::default()
    }
}

#[test]
fn explicit_inner_gradient_matches_backward() {
    let (params, train, _) = setup(1);
    let h = params.features(&train.x).unwrap();
    let (w, b) = (params.phi_weight(), params.phi_bias());
    for kind in [HyperKind::LsScalar, HyperKind::LsVector, HyperKind::L2Unitwise] {
        let om = omega(kind);
        let alpha = 0.7;

        let mut tape = Tape::new();
        let on = tape.constant(om.tensor());
        let (w2, b2) = simulated_phi_step(&mut tape, &h, &train.y, w, b, (kind, on), alpha).unwrap();
        let (w2, b2) = (tape.value(w2).clone(), tape.value(b2).clone());

        let mut tape = Tape::new();
        let wn = tape.leaf(w.clone());
        let bn = tape.leaf(b.clone());
        let hn = tape.constant(h.clone());
        let logits = linear(&mut tape, hn, wn, bn).unwrap();
        let on = tape.constant(om.tensor());
        let loss = training_loss(
            &mut tape,
            logits,
            &train.y,
            Some((kind, on)),
            (wn, bn),
            &LossConfig::default(),
            &DeceConfig::default(),
            0.4,
        )
        .unwrap();
        let g = tape.backward(loss).unwrap();
        for (new, (old, grad)) in [(w2, (w, g.get(wn).unwrap())), (b2, (b, g.get(bn).unwrap()))] {
            for ((n, o), g) in new.data().iter().zip(old.data()).zip(grad.data()) {
                assert!((n - (o - alpha * g)).abs() < 1e-12, "{kind:?}");
            }
        }
    }
}

#[test]
fn hypergradient_matches_finite_differences() {
    let (params, train, metaval) = setup(2);
    for kind in [HyperKind::LsScalar, HyperKind::LsVector, HyperKind::L2Unitwise] {
        for objective in [MetaObjective::Dece, MetaObjective::Ce, MetaObjective::Mmce] {
            let report = hypergrad_check(
                &params,
                &omega(kind),
                &train,
                &metaval,
                0.5,
                &meta_cfg(objective),
                &DeceConfig::default(),
                1e-5,
                1e-3,
                1e-8,
            )
            .unwrap();
            assert!(report.passed, "{kind:?} {objective:?}: {}", report.max_rel_error);
            assert!(report.analytic.iter().any(|g| g.abs() > 1e-8));
        }
    }
}

#[test]
fn zero_inner_step_gives_zero_hypergradient() {
    let (params, train, metaval) = setup(3);
    for kind in [HyperKind::LsVector, HyperKind::L2Unitwise] {
        let hg = hypergradient(
            &params,
            &omega(kind),
            &train,
            &metaval,
            0.0,
            &MetaConfig::default(),
            &DeceConfig::default(),
        )
        .unwrap();
        assert!(hg.grad.iter().all(|&g| g == 0.0), "{:?}", hg.grad);
    }
}

#[test]
fn zero_meta_lr_matches_plain_training() {
    let (params, train, metaval) = setup(4);
    let cfg = TrainConfig::default();
    for kind in [HyperKind::LsVector, HyperKind::L2Unitwise] {
        let zeros = HyperParams::zeros(kind, 4, 8);
        let mut meta = MetaState::new(zeros.clone(), 0.0);
        let mut p1 = params.clone();
        let mut s1 = SgdMomentum::new(0.1, 0.9, 5e-4);
        let mut p2 = params.clone();
        let mut s2 = SgdMomentum::new(0.1, 0.9, 5e-4);
        for _ in 0..3 {
            meta_step(&mut p1, &mut s1, &mut meta, &train, &train, &metaval, &cfg, 0.1).unwrap();
            base_step(&mut p2, &mut s2, &train, &cfg, None, 0.1).unwrap();
        }
        assert_eq!(meta.omega, zeros);
        assert_eq!(meta.updates, 3);
        for (a, b) in p1.tensors().iter().zip(p2.tensors()) {
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{kind:?}");
        }
    }
}

#[test]
fn meta_update_descends_outer_loss() {
    let (params, train, metaval) = setup(5);
    let cfg = TrainConfig {
        meta: meta_cfg(MetaObjective::Ce),
        ..TrainConfig::default()
    };
    for kind in [HyperKind::LsScalar, HyperKind::LsVector, HyperKind::L2Unitwise] {
        let mut meta = MetaState::new(omega(kind), 1e-4);
        let before = meta_update(&params, &mut meta, &train, &metaval, 0.5, &cfg).unwrap();
        let after = hypergradient(&params, &meta.omega, &train, &metaval, 0.5, &cfg.meta, &cfg.dece)
            .unwrap()
            .outer_loss;
        assert!(after < before, "{kind:?}: {after} >= {before}");
    }
}

#[test]
fn label_smoothing_stays_in_range() {
    let (params, train, metaval) = setup(6);
    let cfg = TrainConfig::default();
    let mut meta = MetaState::new(HyperParams::zeros(HyperKind::LsVector, 4, 8), 0.5);
    for _ in 0..5 {
        meta_update(&params, &mut meta, &train, &metaval, 0.5, &cfg).unwrap();
        assert!(meta.omega.values.iter().all(|v| (0.0..=0.999).contains(v)));
    }
    assert_eq!(meta.trajectory.len(), 5);
    assert_eq!(meta.trajectory[4].iter, 4);
}

#[test]
fn meta_steps_are_deterministic() {
    let run = || {
        let (mut params, train, metaval) = setup(7);
        let cfg = TrainConfig::default();
        let mut sgd = SgdMomentum::new(0.1, 0.9, 5e-4);
        let mut meta = MetaState::new(omega(HyperKind::LsVector), 1e-2);
        for _ in 0..4 {
            meta_step(&mut params, &mut sgd, &mut meta, &train, &metaval, &metaval, &cfg, 0.1).unwrap();
        }
        (params, meta.omega, meta.trajectory)
    };
    assert_eq!(run(), run());
}

#[test]
fn rejects_mismatched_batches() {
    assert!(Batch::new(Tensor::zeros(vec![3, 2]), vec![0, 1]).is_err());
    assert!(matches!(
        Batch::new(Tensor::zeros(vec![0, 2]), vec![]),
        Err(Error::EmptyBatch)
    ));
}

#[test]
fn scalar_step_opposes_finite_difference_gradient() {
    let (params, train, metaval) = setup(8);
    let cfg = TrainConfig::default();
    let start = omega(HyperKind::LsScalar);
    let fd = hypergrad_check(
        &params, &start, &train, &metaval, 0.5, &cfg.meta, &cfg.dece, 1e-5, 1e-3, 1e-8,
    )
    .unwrap()
    .numeric[0];
    assert!(fd != 0.0);
    let mut meta = MetaState::new(start.clone(), 1e-3);
    meta_update(&params, &mut meta, &train, &metaval, 0.5, &cfg).unwrap();
    let delta = meta.omega.values[0] - start.values[0];
    assert_eq!(delta.signum(), -fd.signum());
}
