use beampred::channel::{dft_codebook, ArrayGeometry, SubcarrierGrid};
use beampred::model::{ArchConfig, Featurized, Model, ModelKind};
use beampred::scene::{build_scene, generate_dataset, split_dataset, sweep_trajectories, RenderConfig, SceneConfig};
use beampred::tensor::{Role, Tensor};
use beampred::train::*;
use beampred::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn data(n: usize) -> Featurized {
    let scene = build_scene(&SceneConfig::default(), 3).unwrap();
    let geom = ArrayGeometry::default();
    let cb = dft_codebook(&geom);
    let trs = sweep_trajectories(&scene, n, 0.02).unwrap();
    let render = RenderConfig { width: 16, height: 16, ..Default::default() };
    let ds = generate_dataset(&scene, &trs, &SubcarrierGrid::default(), &geom, &cb, 0.02, &render, 3).unwrap();
    let ds = split_dataset(ds, [0.7, 0.1, 0.2], 3).unwrap();
    Featurized::new(&ds).unwrap()
}

fn small_arch() -> ArchConfig {
    let mut arch = ArchConfig::default();
    arch.mlm.d_v = 32;
    arch.mlm.warm_start_epochs = 1;
    arch
}

fn values(m: &Model) -> Vec<(String, Role, Tensor)> {
    m.params().iter().map(|p| (p.name.clone(), p.role, p.value.clone())).collect()
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let f = data(120);
    let idx: Vec<usize> = (0..f.len()).collect();
    for kind in ModelKind::ALL {
        let arch = small_arch();
        let model = Model::new(kind, &arch, &f.spec, 1).unwrap();
        let before = values(&model);
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 2, ..Default::default() };
        let out = Trainer::new(arch, cfg, &f, idx[..60].to_vec(), idx[60..80].to_vec()).train(model, 1).unwrap();
        for ((name, role, v), p) in before.iter().zip(out.last.params().iter()) {
            if *role != Role::Buffer {
                assert_eq!(v.data(), p.value.data(), "{} {name}", kind.name());
            }
        }
        let c = &out.state.curve;
        assert_eq!(c[0].val_top1, c[1].val_top1);
        assert_eq!(c[0].val_top3, c[1].val_top3);
    }
}

fn overfit(kind: ModelKind) {
    let f = data(120);
    let idx: Vec<usize> = (0..10).map(|i| i * 11).collect();
    let arch = small_arch();
    let model = Model::new(kind, &arch, &f.spec, 2).unwrap();
    let cfg = TrainConfig { learning_rate: 1e-3, epochs: 200, ..Default::default() };
    let out = Trainer::new(arch, cfg, &f, idx.clone(), idx.clone()).train(model, 2).unwrap();
    let report = evaluate(&out.last, &f, &idx, "train", 10).unwrap();
    assert_eq!(report.top1(), 1.0, "{}: {:?}", kind.name(), out.state.curve.last());
}

#[test]
fn single_batch_overfit_mlm() {
    overfit(ModelKind::MlmBp);
}

#[test]
fn single_batch_overfit_position_dnn() {
    overfit(ModelKind::DnnPos);
}

#[test]
fn identical_runs_produce_identical_curves() {
    let f = data(120);
    let idx: Vec<usize> = (0..f.len()).collect();
    for kind in [ModelKind::MlmBp, ModelKind::CnnVis] {
        let run = || {
            let arch = small_arch();
            let model = Model::new(kind, &arch, &f.spec, 4).unwrap();
            let cfg = TrainConfig { learning_rate: 1e-3, epochs: 2, seed: 9, ..Default::default() };
            Trainer::new(arch, cfg, &f, idx[..80].to_vec(), idx[80..].to_vec()).train(model, 4).unwrap()
        };
        let (a, b) = (run(), run());
        let bits = |c: &[EpochRecord]| c.iter().map(|r| (r.train_loss.to_bits(), r.val_top1.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a.state.curve), bits(&b.state.curve));
        for (p, q) in a.last.params().iter().zip(b.last.params().iter()) {
            assert_eq!(p.value.data(), q.value.data());
        }
    }
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let f = data(120);
    let idx: Vec<usize> = (0..f.len()).collect();
    let (train, val) = (idx[..80].to_vec(), idx[80..].to_vec());
    let arch = small_arch();
    let cfg = |epochs| TrainConfig { learning_rate: 1e-3, epochs, seed: 5, ..Default::default() };

    let full = Trainer::new(arch.clone(), cfg(4), &f, train.clone(), val.clone())
        .train(Model::new(ModelKind::MlmBp, &arch, &f.spec, 6).unwrap(), 6)
        .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(arch.clone(), cfg(2), &f, train.clone(), val.clone());
    first.checkpoint_dir = Some(dir.path().to_path_buf());
    first.train(Model::new(ModelKind::MlmBp, &arch, &f.spec, 6).unwrap(), 6).unwrap();
    let mut second = Trainer::new(arch, cfg(4), &f, train, val);
    let resumed = second.resume(dir.path()).unwrap();

    assert_eq!(resumed.state.curve, full.state.curve);
    assert_eq!(resumed.state.best_epoch, full.state.best_epoch);
    for (p, q) in resumed.last.params().iter().zip(full.last.params().iter()) {
        assert_eq!(p.value.data(), q.value.data(), "{}", p.name);
    }
    for (p, q) in resumed.best.params().iter().zip(full.best.params().iter()) {
        assert_eq!(p.value.data(), q.value.data(), "{}", p.name);
    }
}

#[test]
fn frozen_weights_stop_after_warm_start() {
    let f = data(120);
    let idx: Vec<usize> = (0..f.len()).collect();
    let (train, val) = (idx[..80].to_vec(), idx[80..].to_vec());
    let arch = small_arch();
    let cfg = |epochs| TrainConfig { learning_rate: 1e-3, epochs, ..Default::default() };
    let init = Model::new(ModelKind::MlmBp, &arch, &f.spec, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut warm = Trainer::new(arch.clone(), cfg(1), &f, train.clone(), val.clone());
    warm.checkpoint_dir = Some(dir.path().to_path_buf());
    let after_warm = warm.train(init.clone(), 7).unwrap().last;
    let done = Trainer::new(arch, cfg(3), &f, train, val).resume(dir.path()).unwrap().last;

    let (v0, v1, v2) = (values(&init), values(&after_warm), values(&done));
    let mut frozen = 0;
    for i in 0..v0.len() {
        let (name, role, _) = &v0[i];
        if *role == Role::Frozen {
            frozen += 1;
            assert_ne!(v0[i].2.data(), v1[i].2.data(), "{name} should train during warm start");
            assert_eq!(v1[i].2.data(), v2[i].2.data(), "{name} moved after warm start");
        } else {
            assert_ne!(v1[i].2.data(), v2[i].2.data(), "{name} should keep training");
        }
    }
    assert!(frozen > 0);
}

#[test]
fn empty_splits_are_rejected() {
    let f = data(40);
    let arch = small_arch();
    let m = Model::new(ModelKind::DnnPos, &arch, &f.spec, 0).unwrap();
    let cfg = TrainConfig { epochs: 1, ..Default::default() };
    let r = Trainer::new(arch.clone(), cfg.clone(), &f, Vec::new(), vec![0]).train(m.clone(), 0);
    assert!(matches!(r, Err(Error::Config(_))));
    let r = Trainer::new(arch, cfg, &f, vec![0, 1], Vec::new()).train(m, 0);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn top_k_is_monotone_and_complete() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let (n, m) = (1000, 64);
    let preds = Tensor::from_fn(&[n, m], |_| r.random_range(0.0..1.0));
    let truths: Vec<usize> = (0..n).map(|_| r.random_range(0..m)).collect();
    let mut prev = 0.0;
    for k in 1..=m {
        let acc = topk_accuracy(&truths, &preds, k).unwrap();
        assert!(acc >= prev && (0.0..=1.0).contains(&acc));
        prev = acc;
    }
    assert_eq!(prev, 1.0);
    let a1 = topk_accuracy(&truths, &preds, 1).unwrap();
    let a3 = topk_accuracy(&truths, &preds, 3).unwrap();
    assert!(a1 <= a3);
}

#[test]
fn full_ratio_few_shot_equals_plain_training() {
    let f = data(200);
    let idx: Vec<usize> = (0..f.len()).collect();
    let (train, val, test) = (idx[..140].to_vec(), idx[140..160].to_vec(), idx[160..].to_vec());
    let arch = small_arch();
    let cfg = TrainConfig { learning_rate: 1e-3, epochs: 3, ..Default::default() };
    let table = few_shot_protocol(ModelKind::DnnPos, &arch, &f, (&train, &val, &test), &[1.0], &[11], &cfg, |_| {}).unwrap();
    let plain_cfg = TrainConfig { seed: 11, ..cfg };
    let model = Model::new(ModelKind::DnnPos, &arch, &f.spec, 11).unwrap();
    let out = Trainer::new(arch.clone(), plain_cfg, &f, train.clone(), val).train(model, 11).unwrap();
    let report = evaluate(&out.best, &f, &test, "test", 64).unwrap();
    let cell = table.cell(ModelKind::DnnPos, 1.0).unwrap();
    assert_eq!(cell.runs[0].n_train, train.len());
    assert_eq!(cell.mean_top1, report.top1());
    assert_eq!(cell.mean_top3, report.top3());
    assert_eq!(cell.spread_top1, 0.0);
    assert!(table.to_csv().lines().count() == 2);

    let too_small = few_shot_protocol(ModelKind::DnnPos, &arch, &f, (&train, &test, &test), &[0.05], &[0], &TrainConfig::default(), |_| {});
    assert!(matches!(too_small, Err(Error::Config(_))));
}
