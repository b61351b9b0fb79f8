//! Training behavior of the speedup regressor.

mod common;

use looptune::neural::{
    clip, learning_rate, predict_examples, train, Architecture, Example, Hyperparams, ModelParams, TrainingSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_arch(in_channels: usize, tvec_len: usize) -> Architecture {
    Architecture { in_channels, tvec_len, init_channels: 8, blocks: 2, growth: 4, kernel: 3, hidden: 16 }
}

#[test]
fn overfits_linear_targets_with_small_batches() {
    let (mse, finite) = common::overfit_final_mse(8);
    assert!(finite);
    assert!(mse < 1e-2, "final training mse {mse}");
}

#[test]
fn same_seed_same_parameters() {
    let arch = Architecture::new(5, 56);
    let h = Hyperparams { seed: 9, ..Hyperparams::default() };
    let a = ModelParams::init(arch, h.clone());
    let b = ModelParams::init(arch, h.clone());
    assert_eq!(a.fingerprint(), b.fingerprint());
    let c = ModelParams::init(arch, Hyperparams { seed: 10, ..h });
    assert_ne!(a.fingerprint(), c.fingerprint());

    let set = common::overfit_set();
    let hyper = Hyperparams { epochs: 5, lr_drop_epochs: vec![], batch_size: 16, ..Hyperparams::default() };
    let x = train(&set, small_arch(4, 56), &hyper).unwrap();
    let y = train(&set, small_arch(4, 56), &hyper).unwrap();
    assert_eq!(x.model.fingerprint(), y.model.fingerprint());
}

#[test]
fn constant_targets_predict_near_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut set = TrainingSet::default();
    for l in 0..6 {
        set.loops.push((common::random_vec(&mut rng, 10 * 3), 10));
        for _ in 0..5 {
            let tvec = (0..6).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
            set.train.push(Example { loop_index: l, tvec, target: 1.0 });
        }
    }
    let hyper = Hyperparams { epochs: 30, lr_drop_epochs: vec![10, 20], batch_size: 8, ..Hyperparams::default() };
    let out = train(&set, small_arch(3, 6), &hyper).unwrap();
    let preds = predict_examples(&out.model, &set, &set.train).unwrap();
    for p in preds {
        assert!((0.9..=1.1).contains(&p), "prediction {p}");
    }
}

#[test]
fn schedule_and_clipping() {
    let h = Hyperparams::default();
    assert_eq!(learning_rate(&h, 0), 0.001);
    assert_eq!(learning_rate(&h, 99), 0.001);
    assert_eq!(learning_rate(&h, 100), 0.001 / 3.0);
    assert_eq!(learning_rate(&h, 200), 0.001 / 9.0);
    assert_eq!(clip(15.0, 10.0), 10.0);
    assert_eq!(clip(-15.0, 10.0), -10.0);
    assert_eq!(clip(3.5, 10.0), 3.5);
}

#[test]
fn checkpoint_round_trip() {
    let model = ModelParams::init(small_arch(4, 7), Hyperparams { seed: 4, ..Hyperparams::default() });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    model.save(&path).unwrap();
    let back = ModelParams::load(&path).unwrap();
    assert_eq!(back.fingerprint(), model.fingerprint());
    assert_eq!(back.arch, model.arch);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = common::random_vec(&mut rng, 9 * 4);
    let t = common::random_vec(&mut rng, 7);
    assert_eq!(back.forward(&x, 9, &t).unwrap(), model.forward(&x, 9, &t).unwrap());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let model = ModelParams::init(small_arch(2, 3), Hyperparams::default());
    let mut buf = Vec::new();
    model.write_to(&mut buf).unwrap();
    buf.truncate(buf.len() / 2);
    assert!(ModelParams::read_from(&mut buf.as_slice()).is_err());
}

#[test]
fn pooled_features_are_reused() {
    let model = ModelParams::init(small_arch(4, 5), Hyperparams::default());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = common::random_vec(&mut rng, 11 * 4);
    let tvecs: Vec<Vec<f64>> = (0..1000).map(|_| common::random_vec(&mut rng, 5)).collect();
    model.reset_feature_calls();
    let batch = model.score_batch(&x, 11, &tvecs).unwrap();
    assert_eq!(model.feature_calls(), 1);
    for (t, p) in tvecs.iter().zip(&batch).take(50) {
        assert_eq!(model.forward(&x, 11, t).unwrap(), *p);
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    let model = ModelParams::init(small_arch(4, 5), Hyperparams::default());
    assert!(model.forward(&[0.0; 7], 2, &[0.0; 5]).is_err());
    assert!(model.forward(&[0.0; 8], 2, &[0.0; 4]).is_err());
}
