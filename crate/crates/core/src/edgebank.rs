//! EdgeBank: link prediction from a memory of observed edges, with no
//! learned parameters.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DataSplit, Interaction, NodeId, TemporalGraph};
use crate::model::Query;
use crate::trainer::{check_combination, score_report, test_queries, EvalReport, NegativeSampler, NssKind, Setting};

pub const DEFAULT_THRESHOLD: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Every observed edge is remembered forever.
    Infinite,
    /// Edges seen within a fixed window before the query time.
    TwTs,
    /// Edges seen within the mean gap between repeats of the same edge.
    TwRe,
    /// Edges seen more than `thresh` times.
    Threshold,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Self::Infinite, Self::TwTs, Self::TwRe, Self::Threshold];
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "infinite" => Ok(Self::Infinite),
            "tw_ts" => Ok(Self::TwTs),
            "tw_re" => Ok(Self::TwRe),
            "threshold" => Ok(Self::Threshold),
            _ => Err(Error::Config(format!(
                "unknown edgebank strategy {s:?} (infinite, tw_ts, tw_re, threshold)"
            ))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Infinite => "infinite",
            Self::TwTs => "tw_ts",
            Self::TwRe => "tw_re",
            Self::Threshold => "threshold",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    last_ts: f64,
    count: usize,
}

#[derive(Debug, Clone)]
pub struct EdgeMemory {
    strategy: Strategy,
    store: HashMap<(NodeId, NodeId), Entry>,
    /// Window length for `TwTs`.
    window: f64,
    thresh: usize,
    now: f64,
    repeat_gap_sum: f64,
    repeats: usize,
}

impl EdgeMemory {
    /// `window` is only used by `TwTs`, `thresh` only by `Threshold`.
    pub fn new(strategy: Strategy, window: f64, thresh: usize) -> Result<Self> {
        if strategy == Strategy::TwTs && !(window >= 0.0 && window.is_finite()) {
            return Err(Error::Config(format!(
                "tw_ts window must be finite and non-negative, got {window}"
            )));
        }
        Ok(Self {
            strategy,
            store: HashMap::new(),
            window,
            thresh,
            now: f64::NEG_INFINITY,
            repeat_gap_sum: 0.0,
            repeats: 0,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn observe(&mut self, src: NodeId, dst: NodeId, ts: f64) -> Result<()> {
        if ts < self.now || ts.is_nan() {
            return Err(Error::Order {
                last: self.now,
                got: ts,
            });
        }
        self.now = ts;
        match self.store.get_mut(&(src, dst)) {
            Some(e) => {
                self.repeat_gap_sum += ts - e.last_ts;
                self.repeats += 1;
                e.last_ts = ts;
                e.count += 1;
            }
            None => {
                self.store.insert((src, dst), Entry { last_ts: ts, count: 1 });
            }
        }
        Ok(())
    }

    /// Current `tw_re` window: the mean gap between consecutive sightings of
    /// the same edge, unbounded until some edge has repeated.
    pub fn repeat_window(&self) -> f64 {
        if self.repeats == 0 {
            f64::INFINITY
        } else {
            self.repeat_gap_sum / self.repeats as f64
        }
    }

    pub fn predict(&self, u: NodeId, v: NodeId, t: f64) -> bool {
        let Some(e) = self.store.get(&(u, v)) else {
            return false;
        };
        match self.strategy {
            Strategy::Infinite => true,
            Strategy::TwTs => t - e.last_ts <= self.window,
            Strategy::TwRe => t - e.last_ts <= self.repeat_window(),
            Strategy::Threshold => e.count > self.thresh,
        }
    }

    /// Scores queries in any order against a replay of `stream`: each query
    /// sees exactly the interactions strictly before its time.
    pub fn replay_scores(mut self, stream: &[Interaction], queries: &[Query]) -> Result<Vec<f64>> {
        let mut order: Vec<usize> = (0..queries.len()).collect();
        order.sort_by(|&a, &b| queries[a].t.total_cmp(&queries[b].t));
        let mut out = vec![0.0; queries.len()];
        let mut next = 0;
        for qi in order {
            let q = queries[qi];
            while next < stream.len() && stream[next].ts < q.t {
                let it = &stream[next];
                self.observe(it.src, it.dst, it.ts)?;
                next += 1;
            }
            out[qi] = if self.predict(q.u, q.v, q.t) { 1.0 } else { 0.0 };
        }
        Ok(out)
    }
}

/// Length of the test span, used as the `tw_ts` window.
pub fn test_duration(g: &TemporalGraph, split: &DataSplit) -> f64 {
    if split.test.is_empty() {
        return 0.0;
    }
    g.interaction(split.test.end - 1).ts - g.interaction(split.test.start).ts
}

/// Reports for all four strategies followed by the best one (by AP), named
/// `edgebank_<strategy>` and `edgebank_max`. Every strategy is scored on the
/// same negatives.
pub fn evaluate_edgebank(
    g: &TemporalGraph,
    split: &DataSplit,
    setting: Setting,
    nss: NssKind,
    thresh: usize,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    check_combination(setting, nss)?;
    let positives = test_queries(g, split, setting);
    let window = test_duration(g, split);
    let mut reports = Vec::new();
    for strategy in Strategy::ALL {
        let mut sampler = NegativeSampler::for_split(nss, g, split, seed)?;
        let name = format!("edgebank_{strategy}");
        reports.push(score_report(&name, &positives, &mut sampler, setting, seed, |qs| {
            EdgeMemory::new(strategy, window, thresh)?.replay_scores(g.interactions(), qs)
        })?);
    }
    let best = reports
        .iter()
        .filter(|r| r.ap.is_some())
        .max_by(|a, b| a.ap.partial_cmp(&b.ap).expect("AP is finite"))
        .unwrap_or(&reports[0]);
    let mut best = best.clone();
    best.model = "edgebank_max".into();
    reports.push(best);
    Ok(reports)
}
