use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cotformer_core::model::{forward_values, incremental_decode, Gate};
use cotformer_core::train::{encode, load_checkpoint};
use cotformer_core::Routing;

const TINY: &str = r#"{
  "model": {
    "variant": "cotformer",
    "n_begin": 1,
    "n_middle": 1,
    "n_end": 1,
    "n_repeat": 2,
    "d_model": 16,
    "n_heads": 2,
    "d_ff": 32,
    "vocab_size": 256,
    "max_seq_len": 16,
    "adaptive": true
  },
  "steps": 3,
  "warmup_steps": 1,
  "max_lr": 0.01,
  "batch_size": 2,
  "seq_len": 16,
  "eval_windows": 4,
  "data": { "synthetic_bytes": 8192 }
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cotformer")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new(text: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.json");
        std::fs::write(&config, text).unwrap();
        Fixture { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Trains into `name` and returns the checkpoint path.
    fn train(&self, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let mut args = vec!["train", "--config", s(&self.config), "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        out.join("checkpoint.ckpt")
    }
}

fn without_seconds(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

#[test]
fn train_is_deterministic_at_fixed_seed() {
    let f = Fixture::new(TINY);
    let a = f.train("a", &["--seed", "7"]);
    let b = f.train("b", &["--seed", "7"]);
    let c = f.train("c", &["--seed", "8"]);
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let metrics = |d: &str| std::fs::read_to_string(f.path(d).join("metrics.csv")).unwrap();
    assert_eq!(without_seconds(&metrics("a")), without_seconds(&metrics("b")));
    let echo: serde_json::Value = serde_json::from_slice(&read(&f.path("a").join("config.json"))).unwrap();
    assert_eq!(echo["seed"], 7);
}

#[test]
fn echoed_config_reproduces_the_run() {
    let f = Fixture::new(TINY);
    let a = f.train("a", &["--seed", "3", "--override", "model.n_repeat=3"]);
    let echo = f.path("a").join("config.json");
    let out = f.path("b");
    ok(&["train", "--config", s(&echo), "--out", s(&out)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(out.join("checkpoint.ckpt")).unwrap());
}

#[test]
fn overrides_change_the_effective_config() {
    let f = Fixture::new(TINY);
    f.train("r3", &["--override", "model.n_repeat=3", "--override", "data.synthetic_seed=2"]);
    let (cfg, _) = load_checkpoint(&f.path("r3").join("checkpoint.ckpt")).unwrap();
    assert_eq!(cfg.n_repeat, 3);
    let metrics = std::fs::read_to_string(f.path("r3").join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,loss,lr,c1,c2,c3,"));
}

#[test]
fn bad_inputs_exit_nonzero_with_a_diagnostic() {
    let f = Fixture::new(TINY);
    let out = f.path("x");
    let cases: Vec<Vec<&str>> = vec![
        vec!["train", "--config", "/nonexistent/config.json", "--out", s(&out)],
        vec!["train", "--out", s(&out)],
        vec!["train", "--config", s(&f.config), "--out", s(&out), "--override", "model.depth=2"],
        vec!["train", "--config", s(&f.config), "--out", s(&out), "--override", "steps=2", "--override", "steps=5"],
        vec!["train", "--config", s(&f.config), "--out", s(&out), "--override", "model.vocab_size=10"],
    ];
    for args in cases {
        let r = run(&args);
        assert!(!r.status.success(), "{args:?} succeeded");
        assert!(String::from_utf8_lossy(&r.stderr).starts_with("error: "), "{args:?}");
    }
    let bad = Fixture::new("{ not json");
    assert!(!run(&["train", "--config", s(&bad.config), "--out", s(&out)]).status.success());
}

#[test]
fn cost_tables() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/cost_crossover.json");
    let dir = tempfile::tempdir().unwrap();
    ok(&["cost", "--config", s(&root), "--out", s(dir.path())]);
    let crossover = std::fs::read_to_string(dir.path().join("crossover.csv")).unwrap();
    let rows: Vec<&str> = crossover.lines().collect();
    assert_eq!(rows[0], "S,macs_a,macs_b,ratio");
    assert!(rows[1..].iter().all(|r| r.rsplit(',').next().unwrap().parse::<f64>().unwrap() < 1.0));
    assert!(rows.last().unwrap().starts_with("8192,"));
    let pareto = std::fs::read_to_string(dir.path().join("pareto.csv")).unwrap();
    assert_eq!(pareto.lines().count(), 4);

    let small = |variant: &str| {
        serde_json::json!({"variant": variant, "n_middle": 2, "n_repeat": 2, "d_model": 32, "n_heads": 2,
                           "d_ff": 64, "vocab_size": 256, "max_seq_len": 256})
    };
    let write = |name: &str, models: serde_json::Value| {
        let path = dir.path().join(name);
        let cfg = serde_json::json!({"models": models, "seq_lens": [1024, 64, 256]});
        std::fs::write(&path, cfg.to_string()).unwrap();
        let out = dir.path().join(format!("{name}.out"));
        ok(&["cost", "--config", s(&path), "--out", s(&out)]);
        out
    };
    let single = write(
        "single",
        serde_json::json!([{"label": "m", "perplexity": 30.5, "capacities": [1, 0.5], "config": small("cotformer")}]),
    );
    let pareto = std::fs::read_to_string(single.join("pareto.csv")).unwrap();
    assert_eq!(pareto.lines().count(), 2);
    assert!(pareto.lines().nth(1).unwrap().ends_with(",30.5"));
    assert!(!single.join("crossover.csv").exists());

    let pair = write(
        "pair",
        serde_json::json!([{"label": "a", "config": small("cotformer")}, {"label": "b", "config": small("block_universal")}]),
    );
    let order: Vec<String> = std::fs::read_to_string(pair.join("crossover.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect();
    assert_eq!(order, ["1024", "64", "256"]);
}

#[test]
fn calibrate_records_and_histogram() {
    let f = Fixture::new(TINY);
    let ckpt = f.train("t", &[]);
    let out = f.path("cal");
    ok(&[
        "calibrate", "--checkpoint", s(&ckpt), "--config", s(&f.config), "--out", s(&out),
        "--threshold", "0", "--threshold", "0.3", "--threshold", "0.6", "--threshold", "1",
    ]);
    let records: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("calibration.json")).unwrap()).unwrap();
    let caps: Vec<Vec<f64>> = records
        .as_array()
        .unwrap()
        .iter()
        .map(|r| serde_json::from_value(r["capacities"].clone()).unwrap())
        .collect();
    assert_eq!(caps[0], [1.0, 1.0]);
    assert_eq!(caps[3], [1.0, 0.0]);
    assert!(caps.windows(2).all(|w| w[1][1] <= w[0][1]));
    let hist = std::fs::read_to_string(out.join("histogram.csv")).unwrap();
    assert!(hist.starts_with("lo,hi,count\n"));
    let total: usize = hist.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 4 * 16);

    let plain = Fixture::new(&TINY.replace("\"adaptive\": true", "\"adaptive\": false"));
    let ckpt = plain.train("t", &[]);
    let r = run(&["calibrate", "--checkpoint", s(&ckpt), "--out", s(&plain.path("cal"))]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("adaptive"));
}

#[test]
fn sweep_rows_and_idempotence() {
    let f = Fixture::new(TINY);
    let ckpt = f.train("t", &[]);
    let sweep = |name: &str| {
        let out = f.path(name);
        ok(&[
            "sweep", "--checkpoint", s(&ckpt), "--config", s(&f.config), "--out", s(&out),
            "--threshold", "0.2", "--threshold", "0.5",
        ]);
        std::fs::read_to_string(out.join("sweep.csv")).unwrap()
    };
    let csv = sweep("s1");
    assert_eq!(csv, sweep("s2"));
    let rows: Vec<(String, u64, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<&str> = l.split(',').collect();
            (v[0].to_string(), v[1].parse().unwrap(), v[2].parse().unwrap())
        })
        .collect();
    assert_eq!(csv.lines().next().unwrap(), "mode,macs,ppl");
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[1].0, "fixed_depth(2)");
    assert!(rows.iter().all(|r| r.1 <= rows[1].1 && r.2.is_finite()));
    assert!(rows[2].0.starts_with("router("));
}

#[test]
fn eval_reports_perplexity() {
    let f = Fixture::new(TINY);
    let ckpt = f.train("t", &[]);
    let out = f.path("e");
    ok(&["eval", "--checkpoint", s(&ckpt), "--config", s(&f.config), "--out", s(&out), "--depth", "1"]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["tokens"], 4 * 16);
    assert!(report["perplexity"].as_f64().unwrap() > 1.0);
    assert!(!run(&["eval", "--checkpoint", s(&ckpt), "--out", s(&out), "--depth", "3"]).status.success());
}

#[test]
fn generate_is_greedy_and_consistent() {
    let f = Fixture::new(TINY);
    let ckpt = f.train("t", &[]);
    let out = f.path("g");
    let gen = |prompt: &str, n: &str| ok(&["generate", "--checkpoint", s(&ckpt), "--out", s(&out), "--prompt", prompt, "--n-new", n]);
    assert_eq!(gen("hello", "0"), "hello\n");
    let a = gen("the ", "8");
    assert_eq!(a, gen("the ", "8"));
    assert!(a.starts_with("the "));
    assert!(!run(&["generate", "--checkpoint", s(&ckpt), "--out", s(&out), "--prompt", &"x".repeat(17)]).status.success());

    let (cfg, params) = load_checkpoint(&ckpt).unwrap();
    let dec = incremental_decode(&cfg, &params, &encode(b"the "), 8, Gate::All).unwrap();
    let full = forward_values(&cfg, &params, &dec.tokens[..dec.tokens.len() - 1], &Routing::Full).unwrap();
    let worst = dec
        .logits
        .data()
        .iter()
        .zip(full.logits.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert_eq!(dec.logits.shape(), full.logits.shape());
    assert!(worst < 1e-5, "{worst}");
}
