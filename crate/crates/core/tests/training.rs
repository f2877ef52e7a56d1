//! Optimiser, training loop, resumption and evaluation.

use fbsd::data::{synth_generate, AugmentConfig, Dataset, SynthSpec};
use fbsd::model::{Model, ModelConfig};
use fbsd::persist::{load_checkpoint, save_checkpoint, Session};
use fbsd::train::{
    evaluate, metrics_csv, sgd_step, train_batches, train_epochs, train_loop, OptimConfig, TrainState,
    METRICS_HEADER,
};
use fbsd::{Error, Tensor};

fn small_model() -> ModelConfig {
    ModelConfig {
        stage_channels: [4, 6, 8, 8, 8],
        embed_dim: 8,
        ..ModelConfig::default()
    }
}

fn optim(epochs: usize) -> OptimConfig {
    OptimConfig {
        epochs,
        batch_size: 16,
        seed: 3,
        ..OptimConfig::default()
    }
}

fn sets() -> (Dataset, Dataset) {
    let spec = SynthSpec { seed: 21, ..SynthSpec::default() };
    let train = synth_generate(&spec, 48).unwrap();
    let eval = synth_generate(&SynthSpec { seed: 22, ..spec }, 24).unwrap();
    (train, eval)
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn fixed_seed_reproduces_the_loss_trace_bitwise() {
    let (train, eval) = sets();
    let aug = AugmentConfig::default();
    let run = || {
        let mut m = Model::<f32>::build(&small_model()).unwrap();
        let st = train_loop(&mut m, &train, &eval, &optim(2), &aug).unwrap();
        (st, m)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a.step_losses.len(), 6);
    assert_eq!(bits(&a.step_losses), bits(&b.step_losses));
    assert_eq!(ma.params, mb.params);
    assert_eq!(a.history, b.history);
}

#[test]
fn resuming_from_any_epoch_matches_the_uninterrupted_run() {
    let (train, eval) = sets();
    let aug = AugmentConfig::default();
    let cfg = optim(3);
    let mut straight = Model::<f32>::build(&small_model()).unwrap();
    let full = train_loop(&mut straight, &train, &eval, &cfg, &aug).unwrap();

    let dir = tempfile::tempdir().unwrap();
    for k in 1..3 {
        let path = dir.path().join(format!("at{k}.ckpt"));
        let mut m = Model::<f32>::build(&small_model()).unwrap();
        let mut st = TrainState::new(&m.params);
        train_epochs(&mut m, &mut st, &train, &eval, &cfg, &aug, k, &mut |_, _| Ok(())).unwrap();
        let session = Session { optim: cfg.clone(), augment: aug, state: st };
        save_checkpoint(&path, &m, Some(&session)).unwrap();
        drop((m, session));

        let (mut m, s) = load_checkpoint(&path).unwrap();
        let mut s = s.unwrap();
        assert_eq!(s.state.epoch, k);
        train_epochs(&mut m, &mut s.state, &train, &eval, &s.optim, &s.augment, cfg.epochs, &mut |_, _| Ok(()))
            .unwrap();
        assert_eq!(bits(&s.state.step_losses), bits(&full.step_losses), "resume at {k}");
        assert_eq!(s.state.history, full.history);
        assert_eq!(m.params, straight.params);
        assert_eq!(s.state.velocity, full.velocity);
        assert_eq!(s.state.best_params, full.best_params);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
    let (train, _) = sets();
    let aug = AugmentConfig::default();
    let cfg = optim(1);
    let mut m = Model::<f32>::build(&small_model()).unwrap();
    let before = m.params.clone();
    let mut st = TrainState::new(&m.params);
    for (x, y) in train_batches(&train, &aug, &cfg, 0).unwrap() {
        let (_, grads) = m.loss_and_grads(&x, &y).unwrap();
        sgd_step(&mut m.params, &grads, &mut st.velocity, [0.0, 0.0], &cfg).unwrap();
    }
    assert_eq!(m.params, before);
    assert!(st.velocity.iter().any(|v| v.data().iter().any(|&x| x != 0.0)));
}

#[test]
fn first_epoch_with_defaults_beats_the_uniform_loss() {
    let spec = SynthSpec { seed: 31, ..SynthSpec::default() };
    let train = synth_generate(&spec, 800).unwrap();
    let eval = synth_generate(&SynthSpec { seed: 32, ..spec }, 64).unwrap();
    let mut m = Model::<f32>::build(&ModelConfig::default()).unwrap();
    let cfg = OptimConfig::default();
    let mut st = TrainState::new(&m.params);
    train_epochs(&mut m, &mut st, &train, &eval, &cfg, &AugmentConfig::default(), 1, &mut |_, _| Ok(())).unwrap();
    let uniform = 3.0 * (8.0f32).ln();
    assert!(st.history[0].train_loss < uniform, "{} >= {uniform}", st.history[0].train_loss);
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let (train, eval) = sets();
    let mut m = Model::<f32>::build(&small_model()).unwrap();
    let cfg = OptimConfig { lr_backbone: 1e30, ..optim(2) };
    let err = train_loop(&mut m, &train, &eval, &cfg, &AugmentConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
}

#[test]
fn mismatched_crop_and_labels_are_rejected() {
    let (train, eval) = sets();
    let mut m = Model::<f32>::build(&small_model()).unwrap();
    let aug = AugmentConfig { resize: 80, crop: 72, ..AugmentConfig::default() };
    assert!(matches!(train_loop(&mut m, &train, &eval, &optim(1), &aug), Err(Error::Config(_))));
    let mut few = Model::<f32>::build(&ModelConfig { num_classes: 4, ..small_model() }).unwrap();
    let aug = AugmentConfig::default();
    assert!(matches!(train_loop(&mut few, &train, &eval, &optim(1), &aug), Err(Error::Data(_))));
}

#[test]
fn invalid_optimiser_settings_are_rejected() {
    for cfg in [
        OptimConfig { momentum: 1.0, ..OptimConfig::default() },
        OptimConfig { lr_backbone: 0.0, ..OptimConfig::default() },
        OptimConfig { batch_size: 0, ..OptimConfig::default() },
        OptimConfig { weight_decay: -1.0, ..OptimConfig::default() },
    ] {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
}

#[test]
fn missing_gradient_names_the_parameter() {
    let mut m = Model::<f32>::build(&small_model()).unwrap();
    let mut grads: Vec<Option<Tensor<f32>>> = m.params.iter().map(|p| Some(Tensor::zeros(p.value.shape()))).collect();
    grads[2] = None;
    let name = m.params.iter().nth(2).unwrap().name.clone();
    let mut vel: Vec<Tensor<f32>> = m.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    let err = sgd_step(&mut m.params, &grads, &mut vel, [0.1, 0.1], &OptimConfig::default()).unwrap_err();
    assert!(err.to_string().contains(&name), "{err}");
}

#[test]
fn accuracy_agrees_with_a_recount_and_with_a_duplicated_set() {
    let (train, eval) = sets();
    let mut m = Model::<f32>::build(&small_model()).unwrap();
    train_loop(&mut m, &train, &eval, &optim(2), &AugmentConfig::default()).unwrap();
    let aug = AugmentConfig::default();
    let r = evaluate(&m, &eval, &aug, 7).unwrap();
    let hits = r.predictions.iter().zip(eval.labels()).filter(|(p, l)| **p == *l).count();
    assert_eq!(r.accuracy, hits as f32 / eval.len() as f32);
    assert_eq!(r.predictions.len(), eval.len());

    let mut doubled = eval.clone();
    doubled.samples.extend(eval.samples.iter().cloned());
    let d = evaluate(&m, &doubled, &aug, 16).unwrap();
    assert_eq!(d.accuracy, r.accuracy);
    assert_eq!(evaluate(&m, &eval, &aug, 64).unwrap().predictions, r.predictions);
}

#[test]
fn metrics_csv_has_one_row_per_epoch() {
    let (train, eval) = sets();
    let mut m = Model::<f32>::build(&small_model()).unwrap();
    let st = train_loop(&mut m, &train, &eval, &optim(2), &AugmentConfig::default()).unwrap();
    let csv = metrics_csv(&st.history);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,"));
    assert_eq!(lines[1].split(',').count(), METRICS_HEADER.split(',').count());
}
