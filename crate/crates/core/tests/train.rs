use moepot::data::{generate, Family, FamilyParams, TrainingSet};
use moepot::model::{is_router_tensor, ModelConfig, ModelParams};
use moepot::tensor::Tensor;
use moepot::train::*;
use moepot::Error;

fn cfg() -> ModelConfig {
    ModelConfig { grid: [16, 16], t_window: 4, ..ModelConfig::desk() }
}

fn dataset(family: Family, seed: u64) -> TrainingSet {
    let p = FamilyParams { grid: [16, 16], t_total: 12, ..FamilyParams::preset(family, 10, seed) };
    TrainingSet::new(family.name(), generate(&p).unwrap(), 1.0)
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, steps_per_epoch: 5, batch_size: 4, eval_windows: 4, peak_lr: 3e-3, ..TrainConfig::default() }
}

fn all_equal(a: &ModelParams, b: &ModelParams, filter: impl Fn(&str) -> bool) -> bool {
    a.names().iter().filter(|n| filter(n)).all(|n| a.get(n).unwrap().bit_eq(b.get(n).unwrap()))
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let out = pretrain(&[dataset(Family::Heat, 1)], &cfg(), &train_cfg(0)).unwrap();
    let init = ModelParams::init(&cfg(), 0).unwrap();
    assert!(all_equal(&out.checkpoint.params, &init, |_| true));
    assert!(out.metrics.is_empty());
    assert_eq!(out.checkpoint.step, 0);
}

#[test]
fn training_is_deterministic() {
    let data = [dataset(Family::Heat, 1), dataset(Family::Advection, 2)];
    let a = pretrain(&data, &cfg(), &train_cfg(2)).unwrap();
    let b = pretrain(&data, &cfg(), &train_cfg(2)).unwrap();
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.metrics.len(), 4);
    let other = pretrain(&data, &cfg(), &TrainConfig { seed: 5, ..train_cfg(2) }).unwrap();
    assert_ne!(metrics_csv(&a.metrics), metrics_csv(&other.metrics));
}

#[test]
fn metrics_csv_layout() {
    let out = pretrain(&[dataset(Family::Heat, 1)], &cfg(), &train_cfg(2)).unwrap();
    let csv = metrics_csv(&out.metrics);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,5,pretrain,heat,"));
    assert!(lines[2].starts_with("2,10,pretrain,heat,"));
    for r in &out.metrics {
        assert!(r.l2re.is_finite() && r.pred_mse.is_finite() && r.balance_loss >= 0.0);
    }
    assert_eq!(out.metrics.last().unwrap().lr, one_cycle_lr(9, 10, 0.2, 3e-3).unwrap());
}

#[test]
fn short_training_reduces_the_error() {
    let data = [dataset(Family::Heat, 1)];
    let out = pretrain(&data, &cfg(), &TrainConfig { noise_coef: 0.0, ..train_cfg(12) }).unwrap();
    let first = out.metrics.first().unwrap().l2re;
    let last = out.metrics.last().unwrap().l2re;
    assert!(last < 0.7 * first, "l2re {first} -> {last}");
}

#[test]
fn finetune_freezes_the_router() {
    let data = [dataset(Family::Heat, 1), dataset(Family::Advection, 2)];
    let pre = pretrain(&data, &cfg(), &train_cfg(1)).unwrap().checkpoint;
    let ft = finetune(&pre, &data[0], &TrainConfig { phase: Phase::Finetune, ..train_cfg(2) }).unwrap();
    let after = &ft.checkpoint.params;
    assert!(all_equal(&pre.params, after, is_router_tensor));
    assert!(!all_equal(&pre.params, after, |n| n.contains(".routed.") || n.contains(".shared.")));
    assert!(ft.metrics.iter().all(|m| m.phase == Phase::Finetune && m.dataset == "heat"));
    assert_eq!(ft.checkpoint.step, 10);

    let none = finetune(&pre, &data[0], &train_cfg(0)).unwrap();
    assert_eq!(none.checkpoint.to_bytes().unwrap(), pre.to_bytes().unwrap());
}

#[test]
fn zero_balance_weight_leaves_only_the_prediction_loss() {
    let data = dataset(Family::Heat, 1);
    let batch: Vec<_> = (0..3).map(|s| data.set.window(0, s, 4, 0).unwrap()).collect();
    let c = ModelConfig { w_bal: 0.0, ..cfg() };
    let params = ModelParams::init(&c, 3).unwrap();
    let loss = compute_loss(&batch, &params, &c).unwrap();
    assert!(loss.balance_per_block.iter().all(|&b| b == 0.0));
    assert_eq!(loss.total, loss.prediction_mse);
    let with = compute_loss(&batch, &params, &cfg()).unwrap();
    assert_eq!(with.prediction_mse, loss.prediction_mse);
    assert!(with.balance() > 0.0);
}

#[test]
fn loss_and_grads_match_compute_loss() {
    let data = dataset(Family::Advection, 4);
    let batch: Vec<_> = (0..2).map(|s| data.set.window(1, s, 4, 0).unwrap()).collect();
    let params = ModelParams::init(&cfg(), 9).unwrap();
    let a = loss_and_grads(&batch, &params, &cfg(), |_| true).unwrap();
    let b = compute_loss(&batch, &params, &cfg()).unwrap();
    assert_eq!(a.loss, b);
    assert_eq!(a.grads.len(), params.names().len());
    let frozen = loss_and_grads(&batch, &params, &cfg(), |n| !is_router_tensor(n)).unwrap();
    for (name, g) in params.names().iter().zip(&frozen.grads) {
        assert_eq!(g.is_none(), is_router_tensor(name), "{name}");
    }
}

#[test]
fn gradient_clipping_bounds_the_norm() {
    let mut grads = vec![Some(Tensor::full(&[4], 3.0)), None, Some(Tensor::full(&[1], 4.0))];
    let norm = clip_global_norm(&mut grads, 1.0);
    assert!((norm - 52f64.sqrt()).abs() < 1e-12);
    let after: f64 = grads.iter().flatten().flat_map(|g| g.data().iter().map(|v| v * v)).sum();
    assert!((after.sqrt() - 1.0).abs() < 1e-12);
    let mut small = vec![Some(Tensor::full(&[1], 0.5))];
    assert_eq!(clip_global_norm(&mut small, 1.0), 0.5);
    assert_eq!(small[0].as_ref().unwrap().data(), &[0.5]);
}

#[test]
fn non_finite_parameters_report_divergence() {
    let data = [dataset(Family::Heat, 1)];
    let mut ckpt = pretrain(&data, &cfg(), &train_cfg(0)).unwrap().checkpoint;
    ckpt.params.decoder.weight.data_mut()[0] = f64::NAN;
    let err = finetune(&ckpt, &data[0], &train_cfg(1)).unwrap_err();
    match err {
        Error::Diverged { step, detail } => {
            assert_eq!(step, 0);
            assert!(detail.contains("heat x4"), "{detail}");
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn mismatched_data_is_a_config_error() {
    let p = FamilyParams { grid: [8, 8], t_total: 12, ..FamilyParams::preset(Family::Heat, 4, 0) };
    let small = TrainingSet::new("heat8", generate(&p).unwrap(), 1.0);
    assert!(matches!(pretrain(&[small], &cfg(), &train_cfg(1)), Err(Error::Config(_))));
    assert!(matches!(pretrain(&[], &cfg(), &train_cfg(1)), Err(Error::Config(_))));
}

#[test]
fn trained_checkpoint_survives_a_file_round_trip() {
    let out = pretrain(&[dataset(Family::Heat, 1)], &cfg(), &train_cfg(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.mpck");
    write_checkpoint(&out.checkpoint, &path).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), out.checkpoint.to_bytes().unwrap());
    assert_eq!(back.step, 5);
}

#[test]
fn seed_derivation_is_stream_sensitive() {
    assert_ne!(derive_seed(0, &[1, 0]), derive_seed(0, &[0, 1]));
    assert_ne!(derive_seed(0, &[1]), derive_seed(1, &[1]));
    assert_eq!(derive_seed(7, &[2, 3]), derive_seed(7, &[2, 3]));
}

#[test]
fn held_out_windows_come_from_held_out_trajectories() {
    let d = dataset(Family::Heat, 1);
    assert_eq!(d.held_out(), 9..10);
    let all = held_out_windows(&d, 4, 100);
    assert_eq!(all.len(), 8);
    let few = held_out_windows(&d, 4, 3);
    assert_eq!(few.len(), 3);
    assert!(few.iter().all(|&(n, s)| n == 9 && s < 8));
}
