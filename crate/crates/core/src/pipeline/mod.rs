//! End-to-end commands shared by the CLI and the acceptance tests: run
//! configuration, dataset resolution, and the synth / train / eval /
//! edgebank / bench pipelines with their on-disk artifacts.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::bench::{scaling_run, to_csv, BenchResult};
use crate::config::{parse_kv, parse_value, render_kv};
use crate::edgebank::{evaluate_edgebank, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::graph::{chronological_split, load_graph, DataSplit, TemporalGraph};
use crate::model::{DyGMamba, ModelConfig};
use crate::synth::{synth_dataset, SynthSpec};
use crate::trainer::{
    check_combination, evaluate, history_csv, mean_std, train_with, write_reports, EpochRecord, EvalReport, NssKind,
    Setting, TrainConfig,
};

pub const CONFIG_SNAPSHOT: &str = "config.txt";
pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORTS_FILE: &str = "reports.jsonl";
pub const AGGREGATE_FILE: &str = "aggregate.json";
pub const EDGEBANK_FILE: &str = "edgebank.jsonl";
pub const BENCH_FILE: &str = "bench.csv";

/// Everything a command needs. Model keys use their [`ModelConfig`] names;
/// the model seed is taken from each entry of `seeds`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Edge CSV, or a directory holding `edges.csv`.
    pub data: Option<PathBuf>,
    pub node_features: Option<PathBuf>,
    pub edge_features: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub unseen_fraction: f64,
    pub split_seed: u64,
    pub setting: Setting,
    pub nss: NssKind,
    /// Checkpoint for `eval`; defaults to each seed's training checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub edgebank_threshold: usize,
    pub bench_lengths: Vec<usize>,
    pub bench_width: usize,
    pub bench_reps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: None,
            node_features: None,
            edge_features: None,
            synth: None,
            train: TrainConfig::default(),
            seeds: vec![0],
            out: PathBuf::from("out"),
            val_ratio: 0.15,
            test_ratio: 0.15,
            unseen_fraction: 0.1,
            split_seed: 0,
            setting: Setting::Transductive,
            nss: NssKind::Random,
            checkpoint: None,
            edgebank_threshold: DEFAULT_THRESHOLD,
            bench_lengths: vec![1024, 2048, 4096, 8192],
            bench_width: 128,
            bench_reps: 5,
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    fn synth_mut(&mut self) -> &mut SynthSpec {
        self.synth.get_or_insert_with(SynthSpec::default)
    }

    /// Applies one `key=value` setting. `seed` is shorthand for a single
    /// entry in `seeds`; `synth=true` selects the default synthetic dataset
    /// and any `synth.*` key implies it.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key != "seed" && self.model.set(key, value)? {
            return Ok(());
        }
        let path = || Some(PathBuf::from(value));
        match key {
            "seed" => self.seeds = vec![parse_value(key, value)?],
            "seeds" => self.seeds = parse_list(key, value)?,
            "data" => self.data = path(),
            "node_features" => self.node_features = path(),
            "edge_features" => self.edge_features = path(),
            "synth" => {
                if parse_value::<bool>(key, value)? {
                    self.synth_mut();
                } else {
                    self.synth = None;
                }
            }
            "synth.num_pairs" => self.synth_mut().num_pairs = parse_value(key, value)?,
            "synth.period" => self.synth_mut().period = parse_value(key, value)?,
            "synth.decay" => self.synth_mut().decay = parse_value(key, value)?,
            "synth.noise_edges" => self.synth_mut().noise_edges = parse_value(key, value)?,
            "synth.noise_items" => self.synth_mut().noise_items = parse_value(key, value)?,
            "synth.horizon" => self.synth_mut().horizon = parse_value(key, value)?,
            "synth.seed" => self.synth_mut().seed = parse_value(key, value)?,
            "epochs" => self.train.epochs = parse_value(key, value)?,
            "patience" => self.train.patience = parse_value(key, value)?,
            "batch_size" => self.train.batch_size = parse_value(key, value)?,
            "lr" => self.train.lr = parse_value(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "val_ratio" => self.val_ratio = parse_value(key, value)?,
            "test_ratio" => self.test_ratio = parse_value(key, value)?,
            "unseen_fraction" => self.unseen_fraction = parse_value(key, value)?,
            "split_seed" => self.split_seed = parse_value(key, value)?,
            "setting" => self.setting = value.parse()?,
            "nss" => self.nss = value.parse()?,
            "checkpoint" => self.checkpoint = path(),
            "edgebank_threshold" => self.edgebank_threshold = parse_value(key, value)?,
            "bench_lengths" => self.bench_lengths = parse_list(key, value)?,
            "bench_width" => self.bench_width = parse_value(key, value)?,
            "bench_reps" => self.bench_reps = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Defaults overridden by `text`, then by `overrides` in order.
    pub fn resolve(text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        let file = match text {
            Some(t) => parse_kv(t)?,
            None => Vec::new(),
        };
        for (k, v) in file.iter().chain(overrides) {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        let (v, t) = (self.val_ratio, self.test_ratio);
        if !(v >= 0.0 && t >= 0.0 && v + t < 1.0) {
            return Err(Error::Config(format!(
                "val_ratio {v} and test_ratio {t} must leave a training share"
            )));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.train.lr)));
        }
        Ok(())
    }

    /// Every setting as `key=value` pairs; feeding them back through
    /// [`RunConfig::resolve`] gives an equal config.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self.model.to_pairs().into_iter().filter(|(k, _)| k != "seed").collect();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        for (k, p) in [
            ("data", &self.data),
            ("node_features", &self.node_features),
            ("edge_features", &self.edge_features),
            ("checkpoint", &self.checkpoint),
        ] {
            if let Some(v) = opt(p) {
                push(k, v);
            }
        }
        push("synth", self.synth.is_some().to_string());
        if let Some(s) = &self.synth {
            push("synth.num_pairs", s.num_pairs.to_string());
            push("synth.period", s.period.to_string());
            push("synth.decay", s.decay.to_string());
            push("synth.noise_edges", s.noise_edges.to_string());
            push("synth.noise_items", s.noise_items.to_string());
            push("synth.horizon", s.horizon.to_string());
            push("synth.seed", s.seed.to_string());
        }
        push("seeds", join(&self.seeds));
        push("epochs", self.train.epochs.to_string());
        push("patience", self.train.patience.to_string());
        push("batch_size", self.train.batch_size.to_string());
        push("lr", self.train.lr.to_string());
        push("out", self.out.display().to_string());
        push("val_ratio", self.val_ratio.to_string());
        push("test_ratio", self.test_ratio.to_string());
        push("unseen_fraction", self.unseen_fraction.to_string());
        push("split_seed", self.split_seed.to_string());
        push("setting", self.setting.to_string());
        push("nss", self.nss.to_string());
        push("edgebank_threshold", self.edgebank_threshold.to_string());
        push("bench_lengths", join(&self.bench_lengths));
        push("bench_width", self.bench_width.to_string());
        push("bench_reps", self.bench_reps.to_string());
        out
    }

    pub fn snapshot(&self) -> String {
        render_kv(&self.to_pairs())
    }

    pub fn model_for(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            seed,
            ..self.model.clone()
        }
    }

    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out.join(format!("seed_{seed}"))
    }

    /// The dataset: the configured file, or the synthetic stream.
    pub fn load_graph(&self) -> Result<TemporalGraph> {
        let (d_n, d_e) = (self.model.d_n, self.model.d_e);
        match (&self.data, &self.synth) {
            (Some(_), Some(_)) => Err(Error::Config("give either data or a synth spec, not both".into())),
            (None, None) => Err(Error::Config("no dataset: set data=<path> or synth=true".into())),
            (None, Some(spec)) => Ok(synth_dataset(spec, d_n, d_e)?.graph),
            (Some(path), None) => {
                let edges = if path.is_dir() {
                    path.join("edges.csv")
                } else {
                    path.clone()
                };
                for p in std::iter::once(&edges)
                    .chain(self.node_features.iter())
                    .chain(self.edge_features.iter())
                {
                    if !p.is_file() {
                        return Err(Error::Config(format!("input file {} not found", p.display())));
                    }
                }
                load_graph(
                    &edges,
                    self.node_features.as_deref(),
                    self.edge_features.as_deref(),
                    d_n,
                    d_e,
                )
            }
        }
    }

    pub fn split(&self, g: &TemporalGraph) -> Result<DataSplit> {
        let train = 1.0 - self.val_ratio - self.test_ratio;
        chronological_split(
            g,
            (train, self.val_ratio, self.test_ratio),
            self.unseen_fraction,
            self.split_seed,
        )
    }
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn write_snapshot(cfg: &RunConfig) -> Result<()> {
    write_file(&cfg.out.join(CONFIG_SNAPSHOT), &cfg.snapshot())
}

/// Mean and sample deviation of AP/AUC over the per-seed reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub model: String,
    pub setting: Setting,
    pub nss: NssKind,
    pub seeds: Vec<u64>,
    pub ap_mean: f64,
    pub ap_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
}

pub fn aggregate(reports: &[EvalReport]) -> Option<Aggregate> {
    let first = reports.first()?;
    let ap: Vec<f64> = reports.iter().filter_map(|r| r.ap).collect();
    let auc: Vec<f64> = reports.iter().filter_map(|r| r.auc).collect();
    let (ap_mean, ap_std) = mean_std(&ap);
    let (auc_mean, auc_std) = mean_std(&auc);
    Some(Aggregate {
        model: first.model.clone(),
        setting: first.setting,
        nss: first.nss,
        seeds: reports.iter().map(|r| r.seed).collect(),
        ap_mean,
        ap_std,
        auc_mean,
        auc_std,
    })
}

fn write_aggregate(cfg: &RunConfig, reports: &[EvalReport]) -> Result<()> {
    if let Some(agg) = aggregate(reports) {
        let body = serde_json::to_string_pretty(&agg).expect("aggregate serializes");
        write_file(&cfg.out.join(AGGREGATE_FILE), &(body + "\n"))?;
    }
    Ok(())
}

/// Writes the synthetic dataset (`edges.csv`, `manifest.json`) into `out`.
pub fn run_synth(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.synth.clone().unwrap_or_default();
    synth_dataset(&spec, cfg.model.d_n, cfg.model.d_e)?.write(&cfg.out)?;
    let resolved = RunConfig {
        synth: Some(spec),
        ..cfg.clone()
    };
    write_snapshot(&resolved)
}

#[derive(Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub report: EvalReport,
    pub model: DyGMamba,
}

/// Trains one model per seed, sequentially. Per seed it writes
/// `seed_<s>/{history.csv, model.ckpt}`; the test reports of all seeds go to
/// `reports.jsonl`, with their mean and deviation in `aggregate.json`.
pub fn run_train(cfg: &RunConfig, mut on_epoch: impl FnMut(u64, &EpochRecord)) -> Result<Vec<SeedRun>> {
    check_combination(cfg.setting, cfg.nss)?;
    let g = cfg.load_graph()?;
    let split = cfg.split(&g)?;
    write_snapshot(cfg)?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let model = DyGMamba::new(cfg.model_for(seed))?;
        let outcome = train_with(model, &g, &split, &cfg.train_for(seed), |r| on_epoch(seed, r))?;
        let dir = cfg.seed_dir(seed);
        write_file(&dir.join(HISTORY_FILE), &history_csv(&outcome.history))?;
        outcome.model.save(&dir.join(CHECKPOINT_FILE))?;
        let report = evaluate(&outcome.model, &g, &split, cfg.setting, cfg.nss, seed)?;
        runs.push(SeedRun {
            seed,
            history: outcome.history,
            best_epoch: outcome.best_epoch,
            report,
            model: outcome.model,
        });
    }
    let reports: Vec<EvalReport> = runs.iter().map(|r| r.report.clone()).collect();
    write_reports(&cfg.out.join(REPORTS_FILE), &reports)?;
    write_aggregate(cfg, &reports)?;
    Ok(runs)
}

/// Evaluates saved checkpoints: the configured one, or each seed's training
/// checkpoint under `out`.
pub fn run_eval(cfg: &RunConfig) -> Result<Vec<EvalReport>> {
    check_combination(cfg.setting, cfg.nss)?;
    let paths: Vec<(u64, PathBuf)> = match &cfg.checkpoint {
        Some(p) => vec![(cfg.seeds[0], p.clone())],
        None => cfg
            .seeds
            .iter()
            .map(|&s| (s, cfg.seed_dir(s).join(CHECKPOINT_FILE)))
            .collect(),
    };
    if let Some((_, p)) = paths.iter().find(|(_, p)| !p.is_file()) {
        return Err(Error::Config(format!("checkpoint {} not found", p.display())));
    }
    let g = cfg.load_graph()?;
    let split = cfg.split(&g)?;
    write_snapshot(cfg)?;
    let mut reports = Vec::new();
    for (seed, path) in paths {
        let model = DyGMamba::load(&path)?;
        reports.push(evaluate(&model, &g, &split, cfg.setting, cfg.nss, seed)?);
    }
    write_reports(&cfg.out.join(REPORTS_FILE), &reports)?;
    write_aggregate(cfg, &reports)?;
    Ok(reports)
}

/// All EdgeBank strategies plus their maximum, for every seed's negatives.
pub fn run_edgebank(cfg: &RunConfig) -> Result<Vec<EvalReport>> {
    check_combination(cfg.setting, cfg.nss)?;
    let g = cfg.load_graph()?;
    let split = cfg.split(&g)?;
    write_snapshot(cfg)?;
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        reports.extend(evaluate_edgebank(
            &g,
            &split,
            cfg.setting,
            cfg.nss,
            cfg.edgebank_threshold,
            seed,
        )?);
    }
    write_reports(&cfg.out.join(EDGEBANK_FILE), &reports)?;
    Ok(reports)
}

/// Scan versus attention timing, written to `bench.csv`.
pub fn run_bench(cfg: &RunConfig) -> Result<Vec<BenchResult>> {
    let results = scaling_run(&cfg.bench_lengths, cfg.bench_width, cfg.bench_reps, cfg.seeds[0])?;
    write_snapshot(cfg)?;
    write_file(&cfg.out.join(BENCH_FILE), &to_csv(&results))?;
    Ok(results)
}
