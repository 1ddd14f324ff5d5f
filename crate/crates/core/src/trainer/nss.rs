//! Negative sampling strategies. Only the destination of a positive is
//! corrupted; the source and time are kept.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DataSplit, NodeId, TemporalGraph};
use crate::model::Query;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NssKind {
    Random,
    Historical,
    Inductive,
}

impl FromStr for NssKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Self::Random),
            "historical" => Ok(Self::Historical),
            "inductive" => Ok(Self::Inductive),
            _ => Err(Error::Config(format!(
                "unknown negative sampling strategy {s:?} (random, historical, inductive)"
            ))),
        }
    }
}

impl fmt::Display for NssKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Historical => "historical",
            Self::Inductive => "inductive",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Negative {
    pub query: Query,
    /// The strategy's pool was empty and a random destination was used.
    pub fallback: bool,
    /// No destination other than the positive's existed; the positive's
    /// own destination was returned.
    pub degenerate: bool,
}

/// Directed `(src, dst)` pairs of the given interactions.
pub fn edge_set(g: &TemporalGraph, indices: impl IntoIterator<Item = usize>) -> HashSet<(NodeId, NodeId)> {
    indices
        .into_iter()
        .map(|i| {
            let it = g.interaction(i);
            (it.src, it.dst)
        })
        .collect()
}

pub struct NegativeSampler<'g> {
    kind: NssKind,
    graph: &'g TemporalGraph,
    destinations: Vec<NodeId>,
    train_pairs: HashSet<(NodeId, NodeId)>,
    rng: ChaCha8Rng,
}

impl<'g> NegativeSampler<'g> {
    /// `graph` supplies the history and the destination universe (every node
    /// seen as a destination); `train_pairs` is only consulted by the
    /// inductive strategy.
    pub fn new(
        kind: NssKind,
        graph: &'g TemporalGraph,
        train_pairs: HashSet<(NodeId, NodeId)>,
        seed: u64,
    ) -> Result<Self> {
        let destinations: Vec<NodeId> = graph
            .interactions()
            .iter()
            .map(|it| it.dst)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if destinations.is_empty() {
            return Err(Error::Sampling("no destination nodes to sample from".into()));
        }
        Ok(Self {
            kind,
            graph,
            destinations,
            train_pairs,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Sampler whose training pairs are the split's filtered training edges.
    pub fn for_split(kind: NssKind, graph: &'g TemporalGraph, split: &DataSplit, seed: u64) -> Result<Self> {
        let train = edge_set(graph, split.train_indices(graph));
        Self::new(kind, graph, train, seed)
    }

    pub fn kind(&self) -> NssKind {
        self.kind
    }

    pub fn destinations(&self) -> &[NodeId] {
        &self.destinations
    }

    pub fn sample(&mut self, pos: &Query) -> Result<Negative> {
        let pool = match self.kind {
            NssKind::Random => return Ok(self.random(pos)),
            NssKind::Historical => self.history_pool(pos, |_| true)?,
            NssKind::Inductive => self.history_pool(pos, |v| !self.train_pairs.contains(&(pos.u, v)))?,
        };
        if let Some(&v) = pick(&mut self.rng, &pool) {
            return Ok(Negative {
                query: Query::new(pos.u, v, pos.t),
                fallback: false,
                degenerate: false,
            });
        }
        let mut n = if self.kind == NssKind::Inductive {
            // the fallback still avoids training pairs when it can
            let train = &self.train_pairs;
            let eligible: Vec<NodeId> = self
                .destinations
                .iter()
                .copied()
                .filter(|&v| v != pos.v && !train.contains(&(pos.u, v)))
                .collect();
            match pick(&mut self.rng, &eligible) {
                Some(&v) => Negative {
                    query: Query::new(pos.u, v, pos.t),
                    fallback: false,
                    degenerate: false,
                },
                None => self.random(pos),
            }
        } else {
            self.random(pos)
        };
        n.fallback = true;
        Ok(n)
    }

    pub fn sample_all(&mut self, positives: &[Query]) -> Result<Vec<Negative>> {
        positives.iter().map(|p| self.sample(p)).collect()
    }

    /// Destinations `v'` with a `(u, v')` interaction before `t`, none at
    /// exactly `t`, and passing `keep`; sorted.
    fn history_pool(&self, pos: &Query, keep: impl Fn(NodeId) -> bool) -> Result<Vec<NodeId>> {
        let g = self.graph;
        let mut before = BTreeSet::new();
        let mut at_t = HashSet::new();
        for &i in g.per_node_index(pos.u)? {
            let it = g.interaction(i);
            if it.ts > pos.t {
                break;
            }
            if it.src != pos.u {
                continue;
            }
            if it.ts < pos.t {
                before.insert(it.dst);
            } else {
                at_t.insert(it.dst);
            }
        }
        Ok(before.into_iter().filter(|v| !at_t.contains(v) && keep(*v)).collect())
    }

    /// Uniform over destinations other than the positive's.
    fn random(&mut self, pos: &Query) -> Negative {
        let d = &self.destinations;
        let v = match d.binary_search(&pos.v) {
            Ok(_) if d.len() == 1 => {
                return Negative {
                    query: *pos,
                    fallback: false,
                    degenerate: true,
                }
            }
            Ok(j) => {
                let i = self.rng.gen_range(0..d.len() - 1);
                d[if i >= j { i + 1 } else { i }]
            }
            Err(_) => d[self.rng.gen_range(0..d.len())],
        };
        Negative {
            query: Query::new(pos.u, v, pos.t),
            fallback: false,
            degenerate: false,
        }
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> Option<&'a T> {
    if items.is_empty() {
        None
    } else {
        Some(&items[rng.gen_range(0..items.len())])
    }
}
