use criticvio_core::checkpoint;
use criticvio_core::critic::CriticConfig;
use criticvio_core::data::{make_batch, make_windows, synth_dataset, NormStats, SampleWindow, SequenceData, SynthConfig};
use criticvio_core::encoders::EncoderConfig;
use criticvio_core::model::{Model, ModelConfig};
use criticvio_core::policy::PolicyConfig;
use criticvio_core::pose_transformer::TransformerConfig;
use criticvio_core::training::{evaluate, window_iteration_mse, EvalConfig, TrainConfig, Trainer};
use criticvio_core::Error;
use ndarray::ArrayD;

fn small_model() -> ModelConfig {
    ModelConfig {
        imu_k: 5,
        image: (8, 16),
        encoder: EncoderConfig {
            n_c: 8,
            conv_channels: vec![4, 8],
            residual_blocks: 1,
            imu_channels: 8,
            imu_blocks: 1,
            dropout: 0.1,
        },
        policy: PolicyConfig {
            hidden: 16,
            blocks: 1,
            kappa: 1.0,
        },
        transformer: TransformerConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            iterations: 3,
            ..TransformerConfig::default()
        },
        critic: CriticConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            ffn_mult: 2,
        },
        ..ModelConfig::default()
    }
}

fn small_synth() -> SynthConfig {
    SynthConfig {
        k: 5,
        height: 8,
        width: 16,
        ..SynthConfig::default()
    }
}

fn small_train() -> TrainConfig {
    TrainConfig {
        batch: 8,
        seed: 11,
        lr_g: 1e-3,
        lr_c: 1e-3,
        ..TrainConfig::default()
    }
}

struct Fixture {
    seqs: Vec<SequenceData>,
    windows: Vec<SampleWindow>,
    norm: NormStats,
}

fn fixture() -> Fixture {
    let seqs = synth_dataset(3, 2, 20, &small_synth()).unwrap();
    let windows = seqs.iter().flat_map(|s| make_windows(s, 4, 1).unwrap()).collect();
    let norm = NormStats::compute(&seqs);
    Fixture { seqs, windows, norm }
}

fn trainer(f: &Fixture, cfg: TrainConfig) -> Trainer {
    let model = Model::new(&small_model(), cfg.seed).unwrap();
    Trainer::new(model, cfg, f.norm.clone()).unwrap()
}

fn values(store: &criticvio_tensor::nn::ParamStore) -> Vec<ArrayD<f64>> {
    store.params().iter().map(|p| p.value().to_owned()).collect()
}

fn first_batch(f: &Fixture) -> criticvio_core::data::Batch {
    let refs: Vec<&SampleWindow> = f.windows.iter().take(8).collect();
    make_batch(&refs, &f.norm).unwrap()
}

#[test]
fn one_batch_is_two_critic_steps_then_one_generator_step() {
    let f = fixture();
    let mut t = trainer(&f, small_train());
    let g0 = values(&t.model.generator.store);
    let c0 = values(&t.model.critic.store);
    t.train_batch(&first_batch(&f)).unwrap();
    assert_eq!(t.opt_c.step_count(), 2);
    assert_eq!(t.opt_g.step_count(), 1);
    assert_eq!(t.step, 1);
    assert_ne!(values(&t.model.generator.store), g0);
    assert_ne!(values(&t.model.critic.store), c0);
}

#[test]
fn generator_steps_leave_the_critic_untouched() {
    // The critic steps run first and consume the same random streams in both
    // trainers; an extra generator step must not move any critic parameter.
    let f = fixture();
    let batch = first_batch(&f);
    let mut a = trainer(&f, small_train());
    let mut b = trainer(
        &f,
        TrainConfig {
            gen_steps: 3,
            ..small_train()
        },
    );
    a.train_batch(&batch).unwrap();
    b.train_batch(&batch).unwrap();
    assert_eq!(values(&a.model.critic.store), values(&b.model.critic.store));
    assert_eq!(b.opt_g.step_count(), 3);
    assert_ne!(values(&a.model.generator.store), values(&b.model.generator.store));
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let f = fixture();
    let run = |seed| {
        let mut t = trainer(
            &f,
            TrainConfig {
                seed,
                ..small_train()
            },
        );
        let mut trace = Vec::new();
        t.run_epoch(&f.windows, &f.windows[..8], &mut |_, b| trace.push(*b)).unwrap();
        (trace, values(&t.model.generator.store))
    };
    let (ta, pa) = run(11);
    let (tb, pb) = run(11);
    let (tc, _) = run(12);
    assert_eq!(ta, tb);
    assert_eq!(pa, pb);
    assert_ne!(ta, tc);
    assert_eq!(ta.len(), f.windows.len().div_ceil(8));
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    let mut full = trainer(&f, small_train());
    let mut trace_full = Vec::new();
    for _ in 0..2 {
        full.run_epoch(&f.windows, &f.windows[..8], &mut |_, b| trace_full.push(*b)).unwrap();
    }

    let mut first = trainer(&f, small_train());
    let mut trace = Vec::new();
    first.run_epoch(&f.windows, &f.windows[..8], &mut |_, b| trace.push(*b)).unwrap();
    checkpoint::save(&path, &first).unwrap();
    drop(first);
    let mut resumed = checkpoint::load_trainer(&path).unwrap();
    assert_eq!(resumed.epoch, 1);
    resumed.run_epoch(&f.windows, &f.windows[..8], &mut |_, b| trace.push(*b)).unwrap();

    assert_eq!(trace, trace_full);
    assert_eq!(values(&resumed.model.generator.store), values(&full.model.generator.store));
    assert_eq!(values(&resumed.model.critic.store), values(&full.model.critic.store));
    assert_eq!(resumed.rngs, full.rngs);
}

#[test]
fn nan_parameters_surface_as_a_non_finite_error() {
    let f = fixture();
    let mut t = trainer(&f, small_train());
    let p = &t.model.generator.store.params()[0];
    p.set(p.value().mapv(|_| f64::NAN));
    let err = t.train_batch(&first_batch(&f)).unwrap_err();
    assert!(
        matches!(
            err,
            Error::NonFiniteLoss { .. } | Error::NonFiniteActivation(_) | Error::NonFiniteGradient(_)
        ),
        "{err:?}"
    );
}

#[test]
fn single_repeat_evaluation_has_zero_spread() {
    let f = fixture();
    let model = Model::new(&small_model(), 1).unwrap();
    let r = evaluate(&model, &f.norm, &f.seqs, &EvalConfig::new(1, 3, 4)).unwrap();
    assert_eq!(r.t_rmse.unwrap().std, 0.0);
    assert_eq!(r.r_rmse.unwrap().std, 0.0);
    assert_eq!(r.iteration_mse.len(), 3);
    assert_eq!(r.neg_critic.len(), 3);
    assert_eq!(r.selection_histogram.iter().sum::<usize>(), r.windows);
    // Sequences of 20 frames at 8 m/s never reach 100 m.
    assert!(r.t_rel.is_none());

    // A fresh model ignores the noise, so train a little before checking
    // that repeats differ.
    let mut t = trainer(&f, small_train());
    t.train_epoch(&f.windows, &mut |_, _| {}).unwrap();
    let r = evaluate(&t.model, &f.norm, &f.seqs, &EvalConfig::new(3, 5, 4)).unwrap();
    assert_eq!(r.iteration_mse.len(), 5);
    assert_eq!(r.selection_histogram.iter().sum::<usize>(), 3 * r.windows);
    assert!(r.t_rmse.unwrap().std > 0.0);
}

#[test]
fn fresh_model_on_a_still_dataset_has_zero_error() {
    // The zero-initialized refinement head predicts exactly zero motion.
    let still = synth_dataset(5, 2, 12, &small_synth().noiseless().still()).unwrap();
    let norm = NormStats::compute(&still);
    let model = Model::new(&small_model(), 2).unwrap();
    let r = evaluate(&model, &norm, &still, &EvalConfig::new(2, 3, 0)).unwrap();
    assert_eq!(r.t_rmse.unwrap().mean, 0.0);
    assert_eq!(r.r_rmse.unwrap().mean, 0.0);
    assert!(r.iteration_mse.iter().all(|v| *v == 0.0));
    assert_eq!(r.selected_mse, 0.0);
}

#[test]
fn checkpointed_model_evaluates_identically() {
    let f = fixture();
    let mut t = trainer(&f, small_train());
    t.train_epoch(&f.windows, &mut |_, _| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &t).unwrap();
    let (model, norm, header) = checkpoint::load_model(&path).unwrap();
    assert_eq!(header.epoch, 1);
    assert_eq!(norm, t.norm);
    let cfg = EvalConfig::new(2, 3, 9);
    assert_eq!(
        evaluate(&model, &norm, &f.seqs, &cfg).unwrap(),
        evaluate(&t.model, &t.norm, &f.seqs, &cfg).unwrap()
    );
    assert_eq!(
        window_iteration_mse(&model, &norm, &f.windows, 3, 1).unwrap(),
        window_iteration_mse(&t.model, &t.norm, &f.windows, 3, 1).unwrap()
    );
}
