use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cotformer_core::cost::{crossover_csv, crossover_scan, macs_model, pareto_csv, pareto_table, ParetoEntry};
use cotformer_core::model::{incremental_decode, Gate};
use cotformer_core::routing::{calibrate_capacities, CalibrationRecord};
use cotformer_core::train::{
    decode, encode, eval_perplexity, load_checkpoint, load_checkpoint_as, train, Corpus, DataConfig, EvalMode,
    TrainConfig,
};
use cotformer_core::{CapacitySchedule, ModelConfig, ModelParams};

use crate::config::{self, write_json};

type CmdResult = Result<(), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Inputs shared by every subcommand.
pub struct RunSpec {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

impl RunSpec {
    fn out_dir(&self) -> Result<&Path, String> {
        std::fs::create_dir_all(&self.out).map_err(|e| format!("cannot create {}: {e}", self.out.display()))?;
        Ok(&self.out)
    }

    fn required_config<T: Serialize + for<'de> Deserialize<'de>>(&self) -> Result<T, String> {
        let path = self.config.as_ref().ok_or("--config is required")?;
        config::load(path, &self.overrides)
    }

    fn train_config(&self) -> Result<TrainConfig, String> {
        let mut cfg: TrainConfig = self.required_config()?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate().map_err(err)?;
        Ok(cfg)
    }
}

pub fn cmd_train(spec: &RunSpec) -> CmdResult {
    let cfg = spec.train_config()?;
    let out = spec.out_dir()?;
    write_json(&cfg, &out.join("config.json"))?;
    let outcome = train(&cfg, Some(out)).map_err(err)?;
    let last = outcome.metrics.last().map_or(f64::NAN, |m| m.loss);
    println!("trained {} steps on {}; final loss {last:.4}", cfg.steps, outcome.corpus_id);
    Ok(())
}

/// A checkpoint plus the data settings used to evaluate it.
struct Loaded {
    model: ModelConfig,
    params: ModelParams<f32>,
    seq_len: usize,
    windows: usize,
    data: DataConfig,
}

const DEFAULT_WINDOWS: usize = 64;

impl Loaded {
    /// With `--config`, the checkpoint is read under that model config
    /// (so `model.n_repeat` may differ from training); otherwise under the
    /// stored one with default data settings.
    fn new(spec: &RunSpec, checkpoint: &Path) -> Result<Self, String> {
        if spec.config.is_none() {
            if !spec.overrides.is_empty() {
                return Err("--override needs --config".into());
            }
            let (model, params) = load_checkpoint(checkpoint).map_err(err)?;
            return Ok(Loaded {
                seq_len: model.max_seq_len,
                model,
                params,
                windows: DEFAULT_WINDOWS,
                data: DataConfig::default(),
            });
        }
        let cfg = spec.train_config()?;
        write_json(&cfg, &spec.out_dir()?.join("config.json"))?;
        let params = load_checkpoint_as(checkpoint, &cfg.model).map_err(err)?;
        Ok(Loaded {
            model: cfg.model,
            params,
            seq_len: cfg.seq_len,
            windows: if cfg.eval_windows == 0 { DEFAULT_WINDOWS } else { cfg.eval_windows },
            data: cfg.data,
        })
    }

    fn eval_ids<'a>(&self, corpus: &'a Corpus) -> &'a [usize] {
        &corpus.eval[..corpus.eval.len().min(self.windows * self.seq_len + 1)]
    }

    fn calibration_windows(&self, corpus: &Corpus) -> Vec<Vec<usize>> {
        corpus
            .train
            .chunks_exact(self.seq_len)
            .take(self.windows)
            .map(<[usize]>::to_vec)
            .collect()
    }

    fn require_adaptive(&self) -> CmdResult {
        if self.model.adaptive {
            Ok(())
        } else {
            Err("checkpoint has no routers (model.adaptive is false)".into())
        }
    }
}

pub fn cmd_eval(spec: &RunSpec, checkpoint: &Path, depth: Option<usize>) -> CmdResult {
    let run = Loaded::new(spec, checkpoint)?;
    let corpus = run.data.load().map_err(err)?;
    let depth = depth.unwrap_or(run.model.n_repeat);
    let report = eval_perplexity(&run.model, &run.params, run.eval_ids(&corpus), run.seq_len, &EvalMode::FixedDepth(depth))
        .map_err(err)?;
    write_json(&report, &spec.out_dir()?.join("eval.json"))?;
    println!("perplexity {:.4} over {} tokens at depth {depth}", report.perplexity, report.tokens);
    Ok(())
}

/// Log-spaced thresholds from 1e-4 to 1, used when none are given.
pub fn default_thresholds() -> Vec<f64> {
    (0..=16).map(|i| 10f64.powf(-4.0 + 0.25 * i as f64)).collect()
}

pub fn cmd_calibrate(spec: &RunSpec, checkpoint: &Path, thresholds: &[f64]) -> CmdResult {
    let run = Loaded::new(spec, checkpoint)?;
    run.require_adaptive()?;
    let corpus = run.data.load().map_err(err)?;
    let windows = run.calibration_windows(&corpus);
    let thresholds = if thresholds.is_empty() { default_thresholds() } else { thresholds.to_vec() };
    let checkpoint_id = checkpoint.display().to_string();
    let mut records = Vec::new();
    for &tau in &thresholds {
        let result = calibrate_capacities(&run.model, &run.params, &windows, tau).map_err(err)?;
        records.push(CalibrationRecord::new(tau, &result, &corpus.id, &checkpoint_id));
    }
    let out = spec.out_dir()?;
    write_json(&records, &out.join("calibration.json"))?;
    let hist = &records[0].histogram;
    std::fs::write(out.join("histogram.csv"), hist.to_csv()).map_err(err)?;
    for r in &records {
        println!("tau {}: capacities {:?}", r.threshold, r.capacities);
    }
    Ok(())
}

pub fn cmd_sweep(spec: &RunSpec, checkpoint: &Path, thresholds: &[f64]) -> CmdResult {
    let run = Loaded::new(spec, checkpoint)?;
    let corpus = run.data.load().map_err(err)?;
    let ids = run.eval_ids(&corpus);
    let r = run.model.n_repeat;
    let mut csv = String::from("mode,macs,ppl\n");
    let mut row = |mode: String, mode_eval: EvalMode, sched: &CapacitySchedule| -> CmdResult {
        let macs = macs_model(&run.model, run.seq_len, Some(sched)).map_err(err)?.total;
        let ppl = eval_perplexity(&run.model, &run.params, ids, run.seq_len, &mode_eval).map_err(err)?.perplexity;
        csv.push_str(&format!("{mode},{macs},{ppl}\n"));
        Ok(())
    };
    for d in 1..=r {
        row(format!("fixed_depth({d})"), EvalMode::FixedDepth(d), &CapacitySchedule::fixed_depth(d, r))?;
    }
    if run.model.adaptive {
        let windows = run.calibration_windows(&corpus);
        let thresholds = if thresholds.is_empty() { default_thresholds() } else { thresholds.to_vec() };
        for tau in thresholds {
            let sched = calibrate_capacities(&run.model, &run.params, &windows, tau).map_err(err)?.capacities;
            row(format!("router({tau})"), EvalMode::Router(sched.clone()), &sched)?;
        }
    } else if !thresholds.is_empty() {
        return Err("--threshold needs an adaptive checkpoint".into());
    }
    std::fs::write(spec.out_dir()?.join("sweep.csv"), &csv).map_err(err)?;
    print!("{csv}");
    Ok(())
}

pub fn cmd_generate(spec: &RunSpec, checkpoint: &Path, prompt: &str, n_new: usize, threshold: Option<f64>) -> CmdResult {
    let run = Loaded::new(spec, checkpoint)?;
    let gate = match threshold {
        Some(tau) => {
            run.require_adaptive()?;
            Gate::Threshold(tau)
        }
        None => Gate::All,
    };
    let out = incremental_decode(&run.model, &run.params, &encode(prompt.as_bytes()), n_new, gate).map_err(err)?;
    let text = String::from_utf8_lossy(&decode(&out.tokens).map_err(err)?).into_owned();
    std::fs::write(spec.out_dir()?.join("generated.txt"), &text).map_err(err)?;
    println!("{text}");
    Ok(())
}

/// One priced model in a cost run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostModel {
    pub label: String,
    pub config: ModelConfig,
    /// Per-pass capacities; full depth when absent.
    #[serde(default)]
    pub capacities: Option<Vec<f64>>,
    /// Measured perplexity for the Pareto table; written as NaN when absent.
    #[serde(default)]
    pub perplexity: Option<f64>,
}

/// The first two models are compared over `seq_lens`; all are priced for the Pareto table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostConfig {
    pub models: Vec<CostModel>,
    #[serde(default = "default_seq_lens")]
    pub seq_lens: Vec<usize>,
}

fn default_seq_lens() -> Vec<usize> {
    (6..=13).map(|p| 1 << p).collect()
}

pub fn cmd_cost(spec: &RunSpec) -> CmdResult {
    let cfg: CostConfig = spec.required_config()?;
    if cfg.models.is_empty() {
        return Err("cost config lists no models".into());
    }
    let out = spec.out_dir()?;
    write_json(&cfg, &out.join("config.json"))?;
    let entries = cfg
        .models
        .iter()
        .map(|m| {
            m.config.validate().map_err(err)?;
            let schedule = m.capacities.clone().map(CapacitySchedule::new).transpose().map_err(err)?;
            Ok(ParetoEntry {
                label: m.label.clone(),
                config: m.config.clone(),
                schedule,
                perplexity: m.perplexity.unwrap_or(f64::NAN),
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    let pareto = pareto_csv(&pareto_table(&entries).map_err(err)?);
    std::fs::write(out.join("pareto.csv"), &pareto).map_err(err)?;
    print!("{pareto}");
    if let [a, b, ..] = cfg.models.as_slice() {
        let rows = crossover_scan(&a.config, &b.config, &cfg.seq_lens).map_err(err)?;
        let csv = crossover_csv(&rows);
        std::fs::write(out.join("crossover.csv"), &csv).map_err(err)?;
        print!("{csv}");
    }
    Ok(())
}
