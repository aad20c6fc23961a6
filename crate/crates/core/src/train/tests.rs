use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{mac_count, reset_mac_count};
use crate::model::{forward_values, Variant};
use crate::routing::CapacitySchedule;

fn tiny(adaptive: bool) -> TrainConfig {
    let mut model = ModelConfig::new(Variant::Cotformer, (1, 1, 1), 2, 16, 2, 256, 16);
    model.adaptive = adaptive;
    TrainConfig {
        model,
        steps: 4,
        warmup_steps: 2,
        max_lr: 1e-2,
        batch_size: 2,
        seq_len: 16,
        seed: 3,
        eval_interval: 2,
        eval_windows: 2,
        checkpoint_interval: 0,
        clip_norm: 1.0,
        optimizer: AdamWConfig::default(),
        precision: Precision::F32,
        data: DataConfig {
            synthetic_bytes: 4096,
            ..DataConfig::default()
        },
    }
}

#[test]
fn warmup_schedule() {
    assert_eq!(lr_schedule(7999, 8000, 1e-3), 1e-3);
    assert_eq!(lr_schedule(0, 8000, 1e-3), 1e-3 / 8000.0);
    assert_eq!(lr_schedule(16000, 8000, 1e-3), 1e-3);
    assert_eq!(lr_schedule(0, 0, 1e-3), 1e-3);
}

#[test]
fn zero_steps_keeps_initialisation() {
    let mut cfg = tiny(false);
    cfg.steps = 0;
    cfg.warmup_steps = 0;
    let out = train(&cfg, None).unwrap();
    let init = ModelParams::<f32>::init(&cfg.model, &mut rng_for(cfg.seed, Stream::Init));
    assert_eq!(out.params, init);
    assert!(out.metrics.is_empty());
}

#[test]
fn runs_replay_exactly() {
    for adaptive in [false, true] {
        let cfg = tiny(adaptive);
        let dir = tempfile::tempdir().unwrap();
        let a = train(&cfg, Some(dir.path())).unwrap();
        let b = train(&cfg, None).unwrap();
        assert_eq!(a.params, b.params);
        let strip = |m: &[MetricsRecord]| -> Vec<MetricsRecord> {
            m.iter().cloned().map(|r| MetricsRecord { seconds: 0.0, ..r }).collect()
        };
        assert_eq!(strip(&a.metrics), strip(&b.metrics));
        assert_eq!(a.evals, b.evals);
        assert_eq!(a.evals.len(), 2);
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.starts_with("step,loss,lr,c1,c2,p1,p2,seconds\n0,"));
        assert_eq!(csv.lines().count(), 5);
        let (_, saved) = load_checkpoint(&dir.path().join("checkpoint.ckpt")).unwrap();
        assert_eq!(saved, a.params);
        if adaptive {
            assert!(a.metrics.iter().any(|m| m.capacities[1] < 1.0));
        }
    }
}

#[test]
fn initial_loss_is_near_uniform() {
    let mut cfg = tiny(false);
    cfg.steps = 1;
    cfg.warmup_steps = 0;
    let out = train(&cfg, None).unwrap();
    let l0 = out.metrics[0].loss;
    assert!((l0 / 256f64.ln() - 1.0).abs() < 0.1, "{l0}");
}

#[test]
fn divergence_aborts_with_diagnostic_checkpoint() {
    let mut cfg = tiny(false);
    cfg.steps = 5;
    cfg.warmup_steps = 0;
    cfg.max_lr = 1e30;
    cfg.clip_norm = f64::INFINITY;
    cfg.eval_interval = 0;
    let dir = tempfile::tempdir().unwrap();
    let err = train(&cfg, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Training(_)), "{err}");
    assert!(dir.path().join("diverged.ckpt").exists());
    assert!(!dir.path().join("checkpoint.ckpt").exists());
}

#[test]
fn config_validation() {
    let mut cfg = tiny(false);
    cfg.warmup_steps = 10;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny(false);
    cfg.seq_len = 17;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny(false);
    cfg.model.vocab_size = 100;
    assert!(cfg.validate().is_err());
    let json = serde_json::to_string(&tiny(true)).unwrap();
    let back: TrainConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, tiny(true));
}

#[test]
fn held_out_split() {
    let d = DataConfig {
        synthetic_bytes: 1000,
        eval_fraction: 0.1,
        ..DataConfig::default()
    };
    let c = d.load().unwrap();
    assert_eq!((c.train.len(), c.eval.len()), (900, 100));
    assert_eq!(c.id, "synthetic:1000:0");
}

fn eval_model(adaptive: bool) -> (ModelConfig, ModelParams<f32>) {
    let mut c = ModelConfig::new(Variant::Cotformer, (0, 1, 1), 3, 8, 2, 256, 16);
    c.adaptive = adaptive;
    let p = ModelParams::random(&c, &mut ChaCha8Rng::seed_from_u64(1), 0.5);
    (c, p)
}

#[test]
fn uniform_logits_give_vocab_perplexity() {
    let (c, mut p) = eval_model(false);
    p.unembedding = Tensor::zeros(p.unembedding.shape().to_vec());
    let ids = encode(&synthetic_corpus(200, 0));
    let rep = eval_perplexity(&c, &p, &ids, 16, &EvalMode::FixedDepth(3)).unwrap();
    assert!((rep.perplexity / 256.0 - 1.0).abs() < 0.01);
    assert_eq!(rep.tokens, 12 * 16);
    assert!(eval_perplexity(&c, &p, &ids[..1], 16, &EvalMode::FixedDepth(3)).is_err());
    assert!(eval_perplexity(&c, &p, &ids, 16, &EvalMode::FixedDepth(4)).is_err());
}

#[test]
fn confident_correct_logits_give_unit_perplexity() {
    let logits = Tensor::<f64>::new([2, 3], vec![0.0, 80.0, 0.0, 80.0, 0.0, 0.0]).unwrap();
    assert!(sequence_nll(&logits, &[1, 0]).abs() < 1e-30);
}

#[test]
fn full_router_equals_full_fixed_depth() {
    let (c, p) = eval_model(true);
    let ids = encode(&synthetic_corpus(300, 5));
    let a = eval_perplexity(&c, &p, &ids, 16, &EvalMode::FixedDepth(3)).unwrap();
    let b = eval_perplexity(&c, &p, &ids, 16, &EvalMode::Router(CapacitySchedule::ones(3))).unwrap();
    assert_eq!(a, b);
}

#[test]
fn router_ratios_follow_schedule() {
    let (c, p) = eval_model(true);
    let ids = encode(&synthetic_corpus(300, 5));
    let sched = CapacitySchedule::new(vec![1.0, 0.6, 0.3]).unwrap();
    let rep = eval_perplexity(&c, &p, &ids, 16, &EvalMode::Router(sched)).unwrap();
    assert_eq!(rep.ratios, vec![1.0, 9.0 / 16.0, 4.0 / 16.0]);
}

#[test]
fn adaptive_steps_cost_fewer_multiplies() {
    let (c, p) = eval_model(true);
    let ids: Vec<usize> = (0..16).map(|i| (i * 37) % 256).collect();
    reset_mac_count();
    forward_values(&c, &p, &ids, &Routing::Full).unwrap();
    let full = mac_count();
    reset_mac_count();
    let sched = CapacitySchedule::new(vec![1.0, 0.9, 0.2]).unwrap();
    forward_values(&c, &p, &ids, &Routing::Capacity(sched)).unwrap();
    assert!(mac_count() < full);
}
