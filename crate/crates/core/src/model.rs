//! The end-to-end link predictor: neighbor sequences and co-interaction gaps
//! in, link probability out.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_kv, parse_value, render_kv};
use crate::encoders::{FeatureEncoder, SequenceBatch, TimeEncoder};
use crate::error::{Error, Result};
use crate::graph::{NodeId, TemporalGraph};
use crate::numerics::{Activation, Checkpoint, Dropout, Mlp, ParamStore, Segments, Tape, Tensor2, Var};
use crate::sampler::{co_interaction_times, cooccurrence_counts, deltas_from_times, recent_neighbors};
use crate::selector::SelectionHead;
use crate::ssm::SelectiveBlock;

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// Mean pooling replaces selection; no time-level path.
    A,
    /// Node-level layers keep only the LayerNorm/MLP residual.
    B,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Self::Full),
            "a" => Ok(Self::A),
            "b" => Ok(Self::B),
            _ => Err(Error::Config(format!("unknown variant {s:?} (full, a, b)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::A => "a",
            Self::B => "b",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub rho: usize,
    pub patch: usize,
    pub k: usize,
    pub d: usize,
    pub d_ssm: usize,
    pub gamma: f64,
    pub l_n: usize,
    pub l_t: usize,
    pub d_n: usize,
    pub d_e: usize,
    pub d_t: usize,
    pub d_f: usize,
    pub dropout: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            rho: 32,
            patch: 1,
            k: 10,
            d: 50,
            d_ssm: 16,
            gamma: 0.5,
            l_n: 2,
            l_t: 2,
            d_n: 172,
            d_e: 172,
            d_t: 100,
            d_f: 50,
            dropout: 0.1,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 15] = [
        "rho", "patch", "k", "d", "d_ssm", "gamma", "l_n", "l_t", "d_n", "d_e", "d_t", "d_f", "dropout", "variant",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rho", self.rho),
            ("patch", self.patch),
            ("k", self.k),
            ("d", self.d),
            ("d_ssm", self.d_ssm),
            ("d_n", self.d_n),
            ("d_e", self.d_e),
            ("d_t", self.d_t),
            ("d_f", self.d_f),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Channel width of the node-level path (4d).
    pub fn node_width(&self) -> usize {
        4 * self.d
    }

    /// Channel width of the time-level path, ⌊γd⌋ but at least 1.
    pub fn time_width(&self) -> usize {
        ((self.gamma * self.d as f64).floor() as usize).max(1)
    }

    /// Sets one field from its textual form. Returns `false` for keys that
    /// are not model keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "rho" => self.rho = parse_value(key, value)?,
            "patch" => self.patch = parse_value(key, value)?,
            "k" => self.k = parse_value(key, value)?,
            "d" => self.d = parse_value(key, value)?,
            "d_ssm" => self.d_ssm = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "l_n" => self.l_n = parse_value(key, value)?,
            "l_t" => self.l_t = parse_value(key, value)?,
            "d_n" => self.d_n = parse_value(key, value)?,
            "d_e" => self.d_e = parse_value(key, value)?,
            "d_t" => self.d_t = parse_value(key, value)?,
            "d_f" => self.d_f = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "variant" => self.variant = value.parse()?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let values = [
            self.rho.to_string(),
            self.patch.to_string(),
            self.k.to_string(),
            self.d.to_string(),
            self.d_ssm.to_string(),
            self.gamma.to_string(),
            self.l_n.to_string(),
            self.l_t.to_string(),
            self.d_n.to_string(),
            self.d_e.to_string(),
            self.d_t.to_string(),
            self.d_f.to_string(),
            self.dropout.to_string(),
            self.variant.to_string(),
            self.seed.to_string(),
        ];
        Self::KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    /// Rebuilds a config from `key=value` text; every model key must be present.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let pairs = parse_kv(text)?;
        let mut cfg = Self::default();
        for key in Self::KEYS {
            let (_, v) = pairs
                .iter()
                .find(|(k, _)| k == key)
                .ok_or_else(|| Error::Config(format!("missing key {key}")))?;
            cfg.set(key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One link query `(u, v, t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Query {
    pub u: NodeId,
    pub v: NodeId,
    pub t: f64,
}

impl Query {
    pub fn new(u: NodeId, v: NodeId, t: f64) -> Self {
        Self { u, v, t }
    }
}

/// Instrumentation: how often each optional piece of the network ran.
#[derive(Debug, Default)]
pub struct ForwardStats {
    time_block_evals: AtomicUsize,
    scan_residual_evals: AtomicUsize,
}

impl ForwardStats {
    pub fn time_block_evals(&self) -> usize {
        self.time_block_evals.load(Ordering::Relaxed)
    }

    pub fn scan_residual_evals(&self) -> usize {
        self.scan_residual_evals.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.time_block_evals.store(0, Ordering::Relaxed);
        self.scan_residual_evals.store(0, Ordering::Relaxed);
    }
}

/// How the node-level output is read out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Readout {
    Select {
        f_map1: Mlp,
        time_blocks: Vec<SelectiveBlock>,
        head: SelectionHead,
    },
    /// Variant A: plain mean over each sequence, then `f_out1`.
    MeanPool { f_out1: Mlp },
}

/// Parameter-free structure of the network; all values live in a
/// [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub encoder: FeatureEncoder,
    pub node_blocks: Vec<SelectiveBlock>,
    pub readout: Readout,
    pub f_lp: Mlp,
}

/// Raw inputs for a batch of queries: 2B sequences (all `u` sides, then all
/// `v` sides) and B·k co-interaction gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub seqs: SequenceBatch,
    pub deltas: Vec<f64>,
    pub num_queries: usize,
}

#[derive(Debug)]
pub struct DyGMamba {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub store: ParamStore,
    stats: ForwardStats,
}

impl Clone for DyGMamba {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            arch: self.arch.clone(),
            store: self.store.clone(),
            stats: ForwardStats::default(),
        }
    }
}

/// Queries scored per trace in [`DyGMamba::predict`].
pub const PREDICT_CHUNK: usize = 200;

impl DyGMamba {
    /// Seeded initialization; the same config always yields identical parameters.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (width, tw) = (config.node_width(), config.time_width());

        let time = TimeEncoder::new(&mut store, config.d_t)?;
        let encoder = FeatureEncoder::new(
            &mut store,
            time,
            config.d_n,
            config.d_e,
            config.d_f,
            config.d,
            config.patch,
            &mut rng,
        )?;
        let node_blocks = (0..config.l_n)
            .map(|i| SelectiveBlock::new(&mut store, &format!("node.{i}"), width, config.d_ssm, true, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (readout, lp_in) = if config.variant == Variant::A {
            let f_out1 = Mlp::linear(&mut store, "select.out1", width, config.d_n, &mut rng)?;
            (Readout::MeanPool { f_out1 }, 2 * config.d_n)
        } else {
            let f_map1 = Mlp::linear(&mut store, "time.map1", config.d_t, tw, &mut rng)?;
            let time_blocks = (0..config.l_t)
                .map(|i| SelectiveBlock::new(&mut store, &format!("time.{i}"), tw, config.d_ssm, false, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let head = SelectionHead::new(&mut store, width, tw, config.d_n, &mut rng)?;
            (
                Readout::Select {
                    f_map1,
                    time_blocks,
                    head,
                },
                3 * config.d_n,
            )
        };
        let f_lp = Mlp::new(
            &mut store,
            "lp",
            &[lp_in, config.d_n, 1],
            Activation::Identity,
            &mut rng,
        )?;
        // an untrained model predicts 0.5 everywhere instead of an arbitrary
        // (often strongly informative) random readout of the count features
        let last = f_lp.layers.last().expect("f_lp has layers").weight;
        let (r, c) = store.value(last).shape();
        *store.value_mut(last) = Tensor2::zeros(r, c);
        Ok(Self {
            config,
            arch: Architecture {
                encoder,
                node_blocks,
                readout,
                f_lp,
            },
            store,
            stats: ForwardStats::default(),
        })
    }

    pub fn stats(&self) -> &ForwardStats {
        &self.stats
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Samples sequences, co-occurrence counts and gaps for every query.
    pub fn prepare(&self, g: &TemporalGraph, queries: &[Query]) -> Result<PreparedBatch> {
        let c = &self.config;
        if (g.d_n(), g.d_e()) != (c.d_n, c.d_e) {
            return Err(Error::Dimension(format!(
                "graph feature widths {}/{} vs model {}/{}",
                g.d_n(),
                g.d_e(),
                c.d_n,
                c.d_e
            )));
        }
        let mut seqs = SequenceBatch::new(c.d_n, c.d_e);
        let mut v_side = Vec::with_capacity(queries.len());
        let mut deltas = Vec::with_capacity(queries.len() * c.k);
        for q in queries {
            if !q.t.is_finite() {
                return Err(Error::Validation(format!("query time {}", q.t)));
            }
            let su = recent_neighbors(g, q.u, q.t, c.rho)?;
            let sv = recent_neighbors(g, q.v, q.t, c.rho)?;
            let times = co_interaction_times(g, q.u, q.v, q.t)?;
            let (cu, cv) = cooccurrence_counts(&su, &sv, times.len())?;
            seqs.push(g, &su, &cu)?;
            v_side.push((sv, cv));
            deltas.extend(deltas_from_times(&times[times.len().saturating_sub(c.k)..], q.t, c.k).deltas);
        }
        for (sv, cv) in &v_side {
            seqs.push(g, sv, cv)?;
        }
        Ok(PreparedBatch {
            seqs,
            deltas,
            num_queries: queries.len(),
        })
    }

    /// Records the forward pass for a prepared batch; returns the B×1 column
    /// of link probabilities. Reads parameters through the tape only.
    pub fn forward_batch(&self, tape: &mut Tape, batch: &PreparedBatch, drop: &mut Dropout) -> Result<Var> {
        let b = batch.num_queries;
        if b == 0 {
            return Err(Error::Batch("no queries".into()));
        }
        let arch = &self.arch;
        let skip_scan = self.config.variant == Variant::B;
        let (mut h, segs) = arch.encoder.forward(tape, &batch.seqs, drop)?;
        for blk in &arch.node_blocks {
            h = blk.layer(tape, h, &segs, skip_scan, drop)?;
            if !skip_scan {
                self.stats.scan_residual_evals.fetch_add(1, Ordering::Relaxed);
            }
        }

        let (o, o_uv) = match &arch.readout {
            Readout::MeanPool { f_out1 } => {
                let pooled = tape.seg_mean(h, &segs)?;
                let o = f_out1.forward(tape, pooled)?;
                (drop.apply(tape, o)?, None)
            }
            Readout::Select {
                f_map1,
                time_blocks,
                head,
            } => {
                let k = self.config.k;
                if batch.deltas.len() != b * k {
                    return Err(Error::Dimension(format!("{} gaps for {b} queries", batch.deltas.len())));
                }
                let te = arch.encoder.time.forward(tape, &batch.deltas);
                let x = f_map1.forward(tape, te)?;
                let mut x = drop.apply(tape, x)?;
                let tsegs = Segments::from_lengths(vec![k; b]);
                for blk in time_blocks {
                    x = blk.layer(tape, x, &tsegs, false, drop)?;
                    self.stats.time_block_evals.fetch_add(1, Ordering::Relaxed);
                }
                let h_uv = tape.seg_mean(x, &tsegs)?;
                let selected = head.select(tape, h, &segs, h_uv, drop)?;
                let (o, o_uv) = head.outputs(tape, selected, h_uv, drop)?;
                (o, Some(o_uv))
            }
        };
        let o_u = tape.gather_rows(o, (0..b).collect())?;
        let o_v = tape.gather_rows(o, (b..2 * b).collect())?;
        let mut parts = vec![o_u, o_v];
        parts.extend(o_uv);
        let z = tape.concat_cols(&parts)?;
        let logit = arch.f_lp.forward(tape, z)?;
        Ok(tape.sigmoid(logit))
    }

    /// Mean BCE over positives (label 1) followed by negatives (label 0).
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        g: &TemporalGraph,
        positives: &[Query],
        negatives: &[Query],
        drop: &mut Dropout,
    ) -> Result<Var> {
        if positives.is_empty() {
            return Err(Error::Batch("empty batch".into()));
        }
        if positives.len() != negatives.len() {
            return Err(Error::Batch(format!(
                "{} positives vs {} negatives",
                positives.len(),
                negatives.len()
            )));
        }
        let all: Vec<Query> = positives.iter().chain(negatives).copied().collect();
        let batch = self.prepare(g, &all)?;
        let p = self.forward_batch(tape, &batch, drop)?;
        let labels: Vec<f64> = (0..all.len())
            .map(|i| if i < positives.len() { 1.0 } else { 0.0 })
            .collect();
        tape.bce(p, &labels)
    }

    /// Evaluation-mode probabilities, scored in chunks of [`PREDICT_CHUNK`].
    pub fn predict(&self, g: &TemporalGraph, queries: &[Query]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(PREDICT_CHUNK) {
            let batch = self.prepare(g, chunk)?;
            let mut tape = Tape::new(&self.store);
            let p = self.forward_batch(&mut tape, &batch, &mut Dropout::eval())?;
            out.extend_from_slice(tape.value(p).data());
        }
        Ok(out)
    }

    /// Probability of a single link in evaluation mode.
    pub fn forward(&self, g: &TemporalGraph, u: NodeId, v: NodeId, t: f64) -> Result<f64> {
        Ok(self.predict(g, &[Query::new(u, v, t)])?[0])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(render_kv(&self.config.to_pairs()), &self.store)
    }

    /// Rebuilds the architecture from the header, then restores values.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_kv_text(&ckpt.header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut model = Self::new(config)?;
        ckpt.restore_into(&mut model.store)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
