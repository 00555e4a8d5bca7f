use std::collections::BTreeMap;

use autodiff::{Array, Gradients};

use selfcorrect::checkpoint;
use selfcorrect::data::{build_offline_dataset, PairSampling};
use selfcorrect::objectives::LossMode;
use selfcorrect::policy::{snapshot, PolicyConfig, PolicyParameters};
use selfcorrect::rng::stream;
use selfcorrect::task::{generate_dataset, TaskMix};
use selfcorrect::trainer::{
    run_full_pipeline, train_preference, train_r0, Adam, Schedule, StageLabel, TrainerConfig,
};

/// Small enough for a full pipeline in a few seconds.
fn quick_config(seed: u64) -> TrainerConfig {
    let short = Schedule {
        lr: 1e-3,
        epochs: 1,
        batch_size: 4,
    };
    TrainerConfig {
        seed,
        policy: PolicyConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_hidden: 16,
            ..PolicyConfig::default()
        },
        warmup_examples: 8,
        sft_examples: 8,
        eval_examples: 6,
        online_budget: 3,
        online_attempts: 6,
        r0: short,
        sft: short,
        offline: short,
        online: short,
        sampling: PairSampling {
            max_response_tokens: 30,
            ..PairSampling::default()
        },
        ..TrainerConfig::default()
    }
}

#[test]
fn adam_matches_a_scalar_recomputation() {
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.05f64);
    let grads_seq = [
        [0.5, -1.0, 2.0],
        [0.1, 0.0, -3.0],
        [-0.7, 0.25, 1.5],
        [2.0, -0.5, 0.0],
        [0.3, 0.3, -0.3],
    ];
    let mut params: BTreeMap<String, Array> = [("w".to_string(), Array::vector(vec![1.0, -2.0, 0.5]))].into();
    let mut adam = Adam::default();
    let (mut x, mut m, mut v) = ([1.0f64, -2.0, 0.5], [0.0f64; 3], [0.0f64; 3]);
    for (t, g) in grads_seq.iter().enumerate() {
        let grads: Gradients = [("w".to_string(), Array::vector(g.to_vec()))].into();
        adam.step(&mut params, &grads, lr).unwrap();
        let t = (t + 1) as i32;
        for k in 0..3 {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let mh = m[k] / (1.0 - b1.powi(t));
            let vh = v[k] / (1.0 - b2.powi(t));
            x[k] -= lr * mh / (vh.sqrt() + eps);
        }
        for k in 0..3 {
            assert!((params["w"].data()[k] - x[k]).abs() < 1e-12);
        }
    }
    assert_eq!(adam.t, 5);
}

#[test]
fn warm_up_training_lowers_the_training_loss() {
    let config = quick_config(0);
    let base = PolicyParameters::init(config.policy.clone(), &mut stream(1)).unwrap();
    let data = generate_dataset(2, 8, &TaskMix::default());
    let config = TrainerConfig {
        r0: Schedule {
            lr: 5e-3,
            epochs: 6,
            batch_size: 8,
        },
        ..config
    };
    let out = train_r0(&base, &data, &config).unwrap();
    let first = out.diagnostics.first().unwrap().loss;
    let last = out.diagnostics.last().unwrap().loss;
    assert_eq!(out.diagnostics.len(), 6);
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn preference_training_leaves_the_start_model_untouched() {
    let config = quick_config(3);
    let start = PolicyParameters::init(config.policy.clone(), &mut stream(5)).unwrap();
    let probe = snapshot(&start);
    let data = generate_dataset(4, 6, &TaskMix::default());
    let pairs = build_offline_dataset(&data, &start, &config.sampling, 8).unwrap();
    let out = train_preference(&start, &pairs, StageLabel::Offline, &config.offline, &config).unwrap();
    assert!(probe.bit_eq(&start));
    assert!(!out.checkpoint.params.bit_eq(&start));
    // first step sees θ = ref, where the combined loss is 2 + α ln 2
    let d = &out.diagnostics[0];
    assert!((d.sc_loss.unwrap() - 2.0).abs() < 1e-12);
    assert!((d.loss - (2.0 + 0.25 * std::f64::consts::LN_2)).abs() < 1e-12);
    assert_eq!(d.mean_v, Some(0.0));
    assert!(train_preference(&start, &[], StageLabel::Offline, &config.offline, &config).is_err());
}

#[test]
fn dpo_only_training_records_no_self_correction_terms() {
    let mut config = quick_config(4);
    config.objective.mode = LossMode::DpoOnly;
    let start = PolicyParameters::init(config.policy.clone(), &mut stream(6)).unwrap();
    let data = generate_dataset(9, 5, &TaskMix::default());
    let pairs = build_offline_dataset(&data, &start, &config.sampling, 2).unwrap();
    let out = train_preference(&start, &pairs, StageLabel::Offline, &config.offline, &config).unwrap();
    for d in &out.diagnostics {
        assert!(d.sc_loss.is_none() && d.mean_v.is_none());
        assert_eq!(d.dpo_loss, Some(d.loss));
    }
    assert!((out.diagnostics[0].loss - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn identical_configs_give_bit_identical_runs() {
    let config = quick_config(7);
    let a = run_full_pipeline(&config).unwrap();
    let b = run_full_pipeline(&config).unwrap();
    assert_eq!(a.checkpoints.len(), 2 + 1 + config.iterations);
    for (x, y) in a.checkpoints.iter().zip(&b.checkpoints) {
        assert!(x.bit_eq(y), "stage {}", x.stage);
        assert_eq!(checkpoint::to_bytes(x).unwrap(), checkpoint::to_bytes(y).unwrap());
    }
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.diagnostics, b.diagnostics);

    let other = run_full_pipeline(&quick_config(8)).unwrap();
    assert!(!other.checkpoints[0].params.bit_eq(&a.checkpoints[0].params));
}

#[test]
fn checkpoints_survive_a_file_round_trip() {
    let config = quick_config(1);
    let base = PolicyParameters::init(config.policy.clone(), &mut stream(2)).unwrap();
    let data = generate_dataset(3, 4, &TaskMix::default());
    let out = train_r0(&base, &data, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r0.ckpt");
    checkpoint::save(&out.checkpoint, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert!(back.bit_eq(&out.checkpoint));
    assert_eq!(back.config_hash, config.hash());
}

#[test]
fn invalid_configs_are_rejected_before_training() {
    let mut config = quick_config(0);
    config.objective.beta_dpo = 0.0;
    assert!(run_full_pipeline(&config).is_err());
    let mut config = quick_config(0);
    config.policy.n_heads = 3;
    assert!(run_full_pipeline(&config).is_err());
}

#[test]
fn partial_config_files_fill_in_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"objective": {"mode": "dpo-only"}, "policy": {"d_model": 16}}"#).unwrap();
    let c = TrainerConfig::load(&path).unwrap();
    assert_eq!(c.objective.mode, LossMode::DpoOnly);
    assert_eq!(c.objective.beta_dpo, TrainerConfig::default().objective.beta_dpo);
    assert_eq!(c.policy.d_model, 16);
    assert_eq!(c.policy.n_layers, PolicyConfig::default().n_layers);

    std::fs::write(&path, r#"{"objective": {"modes": "dpo-only"}}"#).unwrap();
    assert!(TrainerConfig::load(&path).is_err());
}
