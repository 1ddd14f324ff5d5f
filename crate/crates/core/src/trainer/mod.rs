//! Training with early stopping, and evaluation across settings and
//! negative sampling strategies.

pub mod metrics;
pub mod nss;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DataSplit, TemporalGraph};
use crate::model::{DyGMamba, Query};
use crate::numerics::{Adam, AdamConfig, Dropout, ParamStore, Tape};

pub use metrics::{auc_roc, average_precision};
pub use nss::{edge_set, Negative, NegativeSampler, NssKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Transductive,
    Inductive,
}

impl FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transductive" => Ok(Self::Transductive),
            "inductive" => Ok(Self::Inductive),
            _ => Err(Error::Config(format!(
                "unknown setting {s:?} (transductive, inductive)"
            ))),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Transductive => "transductive",
            Self::Inductive => "inductive",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub setting: Setting,
    pub nss: NssKind,
    /// `None` when there were no queries to score.
    pub ap: Option<f64>,
    pub auc: Option<f64>,
    pub num_queries: usize,
    pub undefined: bool,
    /// Negatives drawn by the random fallback of an empty strategy pool.
    pub fallbacks: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

pub fn write_reports(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in reports {
        writeln!(f, "{}", r.to_json_line()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Rejects historical negatives in the inductive setting, where they
/// coincide with inductive negatives.
pub fn check_combination(setting: Setting, nss: NssKind) -> Result<()> {
    if setting == Setting::Inductive && nss == NssKind::Historical {
        return Err(Error::Config(
            "historical negatives are not used in the inductive setting; use inductive".into(),
        ));
    }
    Ok(())
}

/// Test positives for a setting: all of them, or only those touching an
/// unseen node.
pub fn test_queries(g: &TemporalGraph, split: &DataSplit, setting: Setting) -> Vec<Query> {
    split
        .test
        .clone()
        .map(|i| g.interaction(i))
        .filter(|it| setting == Setting::Transductive || split.is_unseen_edge(it))
        .map(|it| Query::new(it.src, it.dst, it.ts))
        .collect()
}

/// Scores positives and one negative each, then pools them into AP/AUC.
pub fn score_report(
    model_name: &str,
    positives: &[Query],
    sampler: &mut NegativeSampler,
    setting: Setting,
    seed: u64,
    mut score: impl FnMut(&[Query]) -> Result<Vec<f64>>,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        model: model_name.to_string(),
        setting,
        nss: sampler.kind(),
        ap: None,
        auc: None,
        num_queries: positives.len(),
        undefined: true,
        fallbacks: 0,
        seed,
    };
    if positives.is_empty() {
        return Ok(report);
    }
    let negatives = sampler.sample_all(positives)?;
    report.fallbacks = negatives.iter().filter(|n| n.fallback).count();
    let neg: Vec<Query> = negatives.iter().map(|n| n.query).collect();
    let (pos_scores, neg_scores) = (score(positives)?, score(&neg)?);
    // interleaved so that tied scores do not rank one class first
    let mut scores = Vec::with_capacity(2 * positives.len());
    let mut labels = Vec::with_capacity(2 * positives.len());
    for (p, n) in pos_scores.into_iter().zip(neg_scores) {
        scores.extend([p, n]);
        labels.extend([true, false]);
    }
    report.ap = Some(average_precision(&scores, &labels)?);
    report.auc = Some(auc_roc(&scores, &labels)?);
    report.undefined = false;
    Ok(report)
}

/// Evaluates on the test span. History comes from the full graph.
pub fn evaluate(
    model: &DyGMamba,
    g: &TemporalGraph,
    split: &DataSplit,
    setting: Setting,
    nss: NssKind,
    seed: u64,
) -> Result<EvalReport> {
    check_combination(setting, nss)?;
    let positives = test_queries(g, split, setting);
    let mut sampler = NegativeSampler::for_split(nss, g, split, seed)?;
    score_report("dygmamba", &positives, &mut sampler, setting, seed, |q| {
        model.predict(g, q)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            patience: 20,
            batch_size: 200,
            lr: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ap: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters restored to the best validation epoch.
    pub model: DyGMamba,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Queries scored during training whose time lies in the test span; the
    /// loop is built so this stays 0.
    pub test_span_queries: usize,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_ap\n");
    for r in history {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_ap));
    }
    s
}

/// Random-strategy validation AP on the validation span, with history and
/// destinations restricted to interactions before the test span.
pub fn validation_ap(model: &DyGMamba, prefix: &TemporalGraph, split: &DataSplit, seed: u64) -> Result<f64> {
    let positives: Vec<Query> = split
        .val
        .clone()
        .map(|i| {
            let it = prefix.interaction(i);
            Query::new(it.src, it.dst, it.ts)
        })
        .collect();
    let mut sampler = NegativeSampler::new(NssKind::Random, prefix, Default::default(), seed)?;
    let r = score_report("dygmamba", &positives, &mut sampler, Setting::Transductive, seed, |q| {
        model.predict(prefix, q)
    })?;
    r.ap.ok_or_else(|| Error::DegenerateSplit("empty validation span".into()))
}

/// Seeds derived from the run seed for each random stream of training.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Chronological mini-batch training with one random negative per positive,
/// validation each epoch and early stopping. Stops after `epochs`, or once
/// `patience` consecutive epochs fail to beat the best validation AP (never
/// before the second epoch).
pub fn train(model: DyGMamba, g: &TemporalGraph, split: &DataSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, g, split, cfg, |_| {})
}

/// [`train`], calling `on_epoch` after each epoch's validation.
pub fn train_with(
    mut model: DyGMamba,
    g: &TemporalGraph,
    split: &DataSplit,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("batch size and epochs must be at least 1".into()));
    }
    let train_idx = split.train_indices(g);
    if train_idx.is_empty() {
        return Err(Error::DegenerateSplit("no training interactions".into()));
    }
    let history_graph = g.subgraph(&train_idx)?;
    let prefix: Vec<usize> = (0..split.val.end).collect();
    let prefix_graph = g.subgraph(&prefix)?;
    let t_val_end = split.boundary_ts.1;

    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut neg_sampler = NegativeSampler::new(NssKind::Random, &history_graph, Default::default(), cfg.seed)?;
    let mut drop_rng = stream_rng(cfg.seed, 1);
    let val_seed = cfg.seed.wrapping_add(0x9e37_79b9);
    let positives: Vec<Query> = history_graph
        .interactions()
        .iter()
        .map(|it| Query::new(it.src, it.dst, it.ts))
        .collect();

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut stale = 0usize;
    let mut test_span_queries = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, pos) in positives.chunks(cfg.batch_size).enumerate() {
            let neg: Vec<Query> = neg_sampler.sample_all(pos)?.into_iter().map(|n| n.query).collect();
            test_span_queries += pos.iter().chain(&neg).filter(|q| q.t > t_val_end).count();
            let grads = {
                let mut tape = Tape::new(&model.store);
                let mut drop = Dropout::train(model.config.dropout, &mut drop_rng);
                let loss = model.batch_loss(&mut tape, &history_graph, pos, &neg, &mut drop)?;
                let value = tape.value(loss).get(0, 0);
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: b,
                        msg: format!("loss {value}"),
                    });
                }
                loss_sum += value;
                tape.backward(loss)?
            };
            model.store.zero_grad();
            model.store.accumulate(&grads)?;
            adam.step(&mut model.store).map_err(|e| Error::Diverged {
                epoch,
                batch: b,
                msg: e.to_string(),
            })?;
            batches += 1;
        }
        let val_ap = validation_ap(&model, &prefix_graph, split, val_seed)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_ap,
        };
        on_epoch(&record);
        history.push(record);
        match &best {
            Some((ap, _, _)) if val_ap <= *ap => stale += 1,
            _ => {
                best = Some((val_ap, epoch, model.store.clone()));
                stale = 0;
            }
        }
        if epoch >= 2 && stale >= cfg.patience {
            break;
        }
    }
    let (_, best_epoch, store) = best.expect("at least one epoch ran");
    model.store = store;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        test_span_queries,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
