//! Immutable chronological interaction streams and their splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor2;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub src: NodeId,
    pub dst: NodeId,
    pub ts: f64,
    pub edge_feat_row: Option<usize>,
}

impl Interaction {
    /// The endpoint opposite `node`, if `node` takes part.
    pub fn other(&self, node: NodeId) -> Option<NodeId> {
        if self.src == node {
            Some(self.dst)
        } else if self.dst == node {
            Some(self.src)
        } else {
            None
        }
    }

    pub fn joins(&self, a: NodeId, b: NodeId) -> bool {
        (self.src == a && self.dst == b) || (self.src == b && self.dst == a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalGraph {
    interactions: Vec<Interaction>,
    node_features: Tensor2,
    edge_features: Tensor2,
    per_node_index: Vec<Vec<usize>>,
    id_map: Vec<String>,
}

impl TemporalGraph {
    /// Builds a graph from `(src, dst, ts)` triples over dense ids
    /// `0..num_nodes`. Interactions are stably sorted by timestamp; edge
    /// feature rows are permuted along with them.
    pub fn new(
        num_nodes: usize,
        edges: &[(NodeId, NodeId, f64)],
        node_features: Option<Tensor2>,
        edge_features: Option<Tensor2>,
        d_n: usize,
        d_e: usize,
    ) -> Result<Self> {
        for (i, &(s, d, ts)) in edges.iter().enumerate() {
            for n in [s, d] {
                if n >= num_nodes {
                    return Err(Error::InvalidNode { node: n, num_nodes });
                }
            }
            if !ts.is_finite() || ts < 0.0 {
                return Err(Error::Validation(format!(
                    "interaction {i} has timestamp {ts}; timestamps must be finite and non-negative"
                )));
            }
        }
        let node_features = match node_features {
            Some(f) if f.rows() != num_nodes => {
                return Err(Error::Dimension(format!(
                    "{} node feature rows for {num_nodes} nodes",
                    f.rows()
                )))
            }
            Some(f) => f,
            None => Tensor2::zeros(num_nodes, d_n),
        };
        let raw_edge_features = match edge_features {
            Some(f) if f.rows() != edges.len() => {
                return Err(Error::Dimension(format!(
                    "{} edge feature rows for {} interactions",
                    f.rows(),
                    edges.len()
                )))
            }
            Some(f) => f,
            None => Tensor2::zeros(edges.len(), d_e),
        };

        let mut order: Vec<usize> = (0..edges.len()).collect();
        order.sort_by(|&a, &b| edges[a].2.total_cmp(&edges[b].2));

        let mut edge_features = Tensor2::zeros(edges.len(), raw_edge_features.cols());
        let mut interactions = Vec::with_capacity(edges.len());
        let mut per_node_index = vec![Vec::new(); num_nodes];
        for (i, &o) in order.iter().enumerate() {
            let (src, dst, ts) = edges[o];
            edge_features.row_mut(i).copy_from_slice(raw_edge_features.row(o));
            interactions.push(Interaction {
                src,
                dst,
                ts,
                edge_feat_row: Some(i),
            });
            per_node_index[src].push(i);
            if dst != src {
                per_node_index[dst].push(i);
            }
        }
        Ok(Self {
            interactions,
            node_features,
            edge_features,
            per_node_index,
            id_map: (0..num_nodes).map(|i| i.to_string()).collect(),
        })
    }

    /// Zero-feature graph whose node count is one past the largest id used.
    pub fn from_edges(edges: &[(NodeId, NodeId, f64)], d_n: usize, d_e: usize) -> Result<Self> {
        let n = edges.iter().map(|&(s, d, _)| s.max(d) + 1).max().unwrap_or(0);
        Self::new(n, edges, None, None, d_n, d_e)
    }

    pub fn num_nodes(&self) -> usize {
        self.per_node_index.len()
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn interaction(&self, i: usize) -> &Interaction {
        &self.interactions[i]
    }

    pub fn node_features(&self) -> &Tensor2 {
        &self.node_features
    }

    pub fn edge_features(&self) -> &Tensor2 {
        &self.edge_features
    }

    pub fn d_n(&self) -> usize {
        self.node_features.cols()
    }

    pub fn d_e(&self) -> usize {
        self.edge_features.cols()
    }

    pub fn per_node_index(&self, node: NodeId) -> Result<&[usize]> {
        self.check_node(node)?;
        Ok(&self.per_node_index[node])
    }

    /// Original identifier of each dense node id.
    pub fn id_map(&self) -> &[String] {
        &self.id_map
    }

    pub fn check_node(&self, node: NodeId) -> Result<()> {
        if node >= self.num_nodes() {
            return Err(Error::InvalidNode {
                node,
                num_nodes: self.num_nodes(),
            });
        }
        Ok(())
    }

    /// Indices of `node`'s interactions with timestamp strictly before `t`.
    pub fn slice_before(&self, node: NodeId, t: f64) -> Result<&[usize]> {
        let idx = self.per_node_index(node)?;
        let cut = idx.partition_point(|&i| self.interactions[i].ts < t);
        Ok(&idx[..cut])
    }

    /// The graph restricted to the listed interactions (kept in index order),
    /// with the full node set and feature tables.
    pub fn subgraph(&self, keep: &[usize]) -> Result<Self> {
        let mut edges = Vec::with_capacity(keep.len());
        let mut ef = Tensor2::zeros(keep.len(), self.d_e());
        for (j, &i) in keep.iter().enumerate() {
            let it = self
                .interactions
                .get(i)
                .ok_or_else(|| Error::Validation(format!("subgraph index {i} out of range {}", self.len())))?;
            edges.push((it.src, it.dst, it.ts));
            if let Some(r) = it.edge_feat_row {
                ef.row_mut(j).copy_from_slice(self.edge_features.row(r));
            }
        }
        let mut g = Self::new(
            self.num_nodes(),
            &edges,
            Some(self.node_features.clone()),
            Some(ef),
            self.d_n(),
            self.d_e(),
        )?;
        g.id_map = self.id_map.clone();
        Ok(g)
    }

    pub fn write_id_map(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut body = String::from("original_id,node_id\n");
        for (i, orig) in self.id_map.iter().enumerate() {
            body.push_str(&format!("{orig},{i}\n"));
        }
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Maps raw identifiers to dense ids. Integer ids keep their numeric order,
/// so already-dense integer ids map to themselves; otherwise ids are ordered
/// lexicographically.
fn remap_ids(raw: &BTreeSet<String>) -> BTreeMap<String, usize> {
    let numeric: Option<Vec<(u64, &String)>> = raw.iter().map(|s| s.parse::<u64>().ok().map(|n| (n, s))).collect();
    let ordered: Vec<&String> = match numeric {
        Some(mut v) => {
            v.sort();
            v.into_iter().map(|(_, s)| s).collect()
        }
        None => raw.iter().collect(),
    };
    ordered.into_iter().enumerate().map(|(i, s)| (s.clone(), i)).collect()
}

fn parse_f64(path: &Path, line: u64, field: &str, what: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("{what} `{field}` is not a number"),
    })
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(f))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

/// Reads a feature table with header `id,f0,...,f{d-1}`, keyed by raw id.
fn read_features(path: &Path) -> Result<(usize, Vec<(String, Vec<f64>, u64)>)> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.get(0) != Some("id") {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "feature header must start with `id`".into(),
        });
    }
    let d = headers.len() - 1;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let vals = (1..rec.len())
            .map(|j| parse_f64(path, line, &rec[j], "feature"))
            .collect::<Result<Vec<_>>>()?;
        rows.push((rec[0].to_string(), vals, line));
    }
    Ok((d, rows))
}

/// Loads an edge CSV (`src,dst,ts`) plus optional feature CSVs.
///
/// Node feature rows are keyed by raw node id; edge feature rows by the
/// zero-based position of the interaction in the edge file.
pub fn load_graph(
    edge_csv: &Path,
    node_feat: Option<&Path>,
    edge_feat: Option<&Path>,
    d_n: usize,
    d_e: usize,
) -> Result<TemporalGraph> {
    let mut rdr = open_csv(edge_csv)?;
    let headers = rdr.headers().map_err(|e| csv_err(edge_csv, e))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names != ["src", "dst", "ts"] {
        return Err(Error::Parse {
            path: edge_csv.to_path_buf(),
            line: 1,
            msg: format!("expected header `src,dst,ts`, found `{}`", names.join(",")),
        });
    }
    let mut raw = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(edge_csv, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 || rec[0].is_empty() || rec[1].is_empty() {
            return Err(Error::Parse {
                path: edge_csv.to_path_buf(),
                line,
                msg: "expected three fields".into(),
            });
        }
        let ts = parse_f64(edge_csv, line, &rec[2], "timestamp")?;
        if ts < 0.0 || !ts.is_finite() {
            return Err(Error::Validation(format!(
                "{}:{line}: timestamp {ts} must be finite and non-negative",
                edge_csv.display()
            )));
        }
        raw.push((rec[0].to_string(), rec[1].to_string(), ts));
    }

    let ids: BTreeSet<String> = raw.iter().flat_map(|(s, d, _)| [s.clone(), d.clone()]).collect();
    let map = remap_ids(&ids);
    let n = map.len();
    let edges: Vec<(usize, usize, f64)> = raw.iter().map(|(s, d, t)| (map[s], map[d], *t)).collect();

    let nf = match node_feat {
        None => None,
        Some(p) => {
            let (d, rows) = read_features(p)?;
            if rows.len() != n {
                return Err(Error::Dimension(format!(
                    "{}: {} node feature rows for {n} nodes",
                    p.display(),
                    rows.len()
                )));
            }
            let mut t = Tensor2::zeros(n, d);
            for (id, vals, line) in rows {
                let Some(&i) = map.get(&id) else {
                    return Err(Error::Parse {
                        path: p.to_path_buf(),
                        line,
                        msg: format!("unknown node id `{id}`"),
                    });
                };
                t.row_mut(i).copy_from_slice(&vals);
            }
            Some(t)
        }
    };
    let ef = match edge_feat {
        None => None,
        Some(p) => {
            let (d, rows) = read_features(p)?;
            if rows.len() != edges.len() {
                return Err(Error::Dimension(format!(
                    "{}: {} edge feature rows for {} interactions",
                    p.display(),
                    rows.len(),
                    edges.len()
                )));
            }
            let mut t = Tensor2::zeros(edges.len(), d);
            for (id, vals, line) in rows {
                let i = id
                    .parse::<usize>()
                    .ok()
                    .filter(|&i| i < edges.len())
                    .ok_or_else(|| Error::Parse {
                        path: p.to_path_buf(),
                        line,
                        msg: format!("edge feature id `{id}` is not an interaction index"),
                    })?;
                t.row_mut(i).copy_from_slice(&vals);
            }
            Some(t)
        }
    };
    let mut g = TemporalGraph::new(n, &edges, nf, ef, d_n, d_e)?;
    let mut inverse = vec![String::new(); n];
    for (s, i) in map {
        inverse[i] = s;
    }
    g.id_map = inverse;
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub unseen_nodes: BTreeSet<NodeId>,
    pub boundary_ts: (f64, f64),
}

impl DataSplit {
    /// Training interactions that touch no unseen node.
    pub fn train_indices(&self, g: &TemporalGraph) -> Vec<usize> {
        self.train
            .clone()
            .filter(|&i| {
                let it = g.interaction(i);
                !self.unseen_nodes.contains(&it.src) && !self.unseen_nodes.contains(&it.dst)
            })
            .collect()
    }

    pub fn is_unseen_edge(&self, it: &Interaction) -> bool {
        self.unseen_nodes.contains(&it.src) || self.unseen_nodes.contains(&it.dst)
    }
}

/// Chronological split with boundaries pushed forward past equal timestamps
/// and a seeded sample of val/test nodes withheld from training.
pub fn chronological_split(
    g: &TemporalGraph,
    ratios: (f64, f64, f64),
    unseen_fraction: f64,
    seed: u64,
) -> Result<DataSplit> {
    let (r1, r2, r3) = ratios;
    if [r1, r2, r3].iter().any(|r| !(0.0..=1.0).contains(r)) || (r1 + r2 + r3 - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {r1}/{r2}/{r3} must be non-negative and sum to 1"
        )));
    }
    if !(0.0..1.0).contains(&unseen_fraction) {
        return Err(Error::Config(format!(
            "unseen fraction {unseen_fraction} outside [0, 1)"
        )));
    }
    let n = g.len();
    let ts = |i: usize| g.interaction(i).ts;
    let advance = |mut b: usize| {
        while b > 0 && b < n && ts(b) == ts(b - 1) {
            b += 1;
        }
        b
    };
    let b1 = advance(((r1 * n as f64).floor() as usize).min(n));
    let b2 = advance((((r1 + r2) * n as f64).floor() as usize).clamp(b1, n));
    if b1 == 0 || b2 <= b1 || b2 >= n {
        return Err(Error::DegenerateSplit(format!(
            "{n} interactions give train/val/test sizes {}/{}/{}",
            b1,
            b2.saturating_sub(b1),
            n.saturating_sub(b2)
        )));
    }

    let candidates: Vec<NodeId> = (b1..n)
        .flat_map(|i| [g.interaction(i).src, g.interaction(i).dst])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let count = unseen_count(g.num_nodes(), unseen_fraction).min(candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unseen_nodes = sample(&mut rng, candidates.len(), count)
        .into_iter()
        .map(|i| candidates[i])
        .collect();

    Ok(DataSplit {
        train: 0..b1,
        val: b1..b2,
        test: b2..n,
        unseen_nodes,
        boundary_ts: (ts(b1 - 1), ts(b2 - 1)),
    })
}

/// Number of nodes withheld for a given fraction of the node universe.
pub fn unseen_count(num_nodes: usize, fraction: f64) -> usize {
    (fraction * num_nodes as f64).floor() as usize
}
