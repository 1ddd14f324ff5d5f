//! Raw model inputs: recent one-hop neighbors and co-interaction gaps.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{NodeId, TemporalGraph};
use crate::numerics::Tensor2;

/// Stand-in for a missing co-interaction gap.
pub const SENTINEL_DELTA: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborEntry {
    pub neighbor: NodeId,
    pub ts: f64,
    pub edge_feat_row: Option<usize>,
}

/// The most recent neighbors of `owner` before `query_ts`, oldest first.
/// The terminal self entry `(owner, query_ts)` is implicit: it always sits
/// after `entries`, so the full sequence length is `entries.len() + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSequence {
    pub owner: NodeId,
    pub query_ts: f64,
    pub entries: Vec<NeighborEntry>,
}

impl NeighborSequence {
    /// Length including the appended self entry.
    pub fn len(&self) -> usize {
        self.entries.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// All entries with the self entry appended.
    pub fn with_self(&self) -> impl Iterator<Item = NeighborEntry> + '_ {
        self.entries.iter().copied().chain(std::iter::once(NeighborEntry {
            neighbor: self.owner,
            ts: self.query_ts,
            edge_feat_row: None,
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeDeltaSequence {
    pub deltas: Vec<f64>,
    pub found_count: usize,
}

/// Both directions are merged first, then truncated to the `rho` most recent.
pub fn recent_neighbors(g: &TemporalGraph, node: NodeId, t: f64, rho: usize) -> Result<NeighborSequence> {
    if rho == 0 {
        return Err(Error::Config("rho must be at least 1".into()));
    }
    let hist = g.slice_before(node, t)?;
    let start = hist.len().saturating_sub(rho);
    let entries = hist[start..]
        .iter()
        .map(|&i| {
            let it = g.interaction(i);
            NeighborEntry {
                neighbor: it.other(node).expect("indexed interaction touches node"),
                ts: it.ts,
                edge_feat_row: it.edge_feat_row,
            }
        })
        .collect();
    Ok(NeighborSequence {
        owner: node,
        query_ts: t,
        entries,
    })
}

/// Timestamps of all interactions between `u` and `v` (either direction) before `t`.
pub fn co_interaction_times(g: &TemporalGraph, u: NodeId, v: NodeId, t: f64) -> Result<Vec<f64>> {
    g.check_node(v)?;
    let hu = g.slice_before(u, t)?;
    let hv = g.slice_before(v, t)?;
    let (short, other) = if hu.len() <= hv.len() { (hu, v) } else { (hv, u) };
    let owner = if other == v { u } else { v };
    Ok(short
        .iter()
        .map(|&i| g.interaction(i))
        .filter(|it| it.joins(owner, other))
        .map(|it| it.ts)
        .collect())
}

pub fn pair_history_count(g: &TemporalGraph, u: NodeId, v: NodeId, t: f64) -> Result<usize> {
    Ok(co_interaction_times(g, u, v, t)?.len())
}

/// Gaps between the `k` most recent co-interactions of `u` and `v` and the
/// query time, oldest first, left-padded with [`SENTINEL_DELTA`].
pub fn co_interaction_deltas(g: &TemporalGraph, u: NodeId, v: NodeId, t: f64, k: usize) -> Result<TimeDeltaSequence> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let times = co_interaction_times(g, u, v, t)?;
    Ok(deltas_from_times(&times[times.len().saturating_sub(k)..], t, k))
}

pub(crate) fn deltas_from_times(times: &[f64], t: f64, k: usize) -> TimeDeltaSequence {
    let found = times.len();
    let mut deltas = vec![SENTINEL_DELTA; k - found];
    for i in 0..found {
        let next = if i + 1 < found { times[i + 1] } else { t };
        deltas.push(next - times[i]);
    }
    TimeDeltaSequence {
        deltas,
        found_count: found,
    }
}

/// Co-occurrence features of two sequences. Each side's multiset holds its
/// neighbors plus its own node (the appended self entry). Row `i` of
/// `counts_u` is `[multiplicity in u's multiset, multiplicity in v's]` for
/// the i-th neighbor of u; the self rows are `[0, pair_history_count]`.
pub fn cooccurrence_counts(
    seq_u: &NeighborSequence,
    seq_v: &NeighborSequence,
    pair_history_count: usize,
) -> Result<(Tensor2, Tensor2)> {
    if seq_u.query_ts != seq_v.query_ts {
        return Err(Error::Validation(format!(
            "sequences queried at {} and {}",
            seq_u.query_ts, seq_v.query_ts
        )));
    }
    let tally = |s: &NeighborSequence| {
        let mut m: HashMap<NodeId, usize> = HashMap::new();
        for e in s.with_self() {
            *m.entry(e.neighbor).or_default() += 1;
        }
        m
    };
    let (mu, mv) = (tally(seq_u), tally(seq_v));
    let build = |s: &NeighborSequence| {
        let mut t = Tensor2::zeros(s.len(), 2);
        for (r, e) in s.entries.iter().enumerate() {
            t.set(r, 0, *mu.get(&e.neighbor).unwrap_or(&0) as f64);
            t.set(r, 1, *mv.get(&e.neighbor).unwrap_or(&0) as f64);
        }
        t.set(s.entries.len(), 1, pair_history_count as f64);
        t
    };
    Ok((build(seq_u), build(seq_v)))
}
