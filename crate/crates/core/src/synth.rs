//! Planted-pattern bipartite streams: user/item pairs whose repeat gaps
//! stretch geometrically, buried in uniform noise.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, TemporalGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_pairs: usize,
    pub period: f64,
    pub decay: f64,
    pub noise_edges: usize,
    /// Items that only receive noise edges. Random negatives land on one of
    /// them with probability about `noise_items / (num_pairs + noise_items)`,
    /// and such a negative looks exactly like a noise positive, so this caps
    /// the attainable AP.
    pub noise_items: usize,
    pub horizon: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_pairs: 40,
            period: 1.0,
            decay: 1.1,
            noise_edges: 2000,
            noise_items: 2,
            horizon: 100.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Users are `0..P`, their planted items `P..2P`, noise items follow.
    pub fn num_nodes(&self) -> usize {
        2 * self.num_pairs + self.noise_items
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_pairs == 0 {
            return Err(Error::Config("num_pairs must be at least 1".into()));
        }
        if self.noise_edges > 0 && self.noise_items == 0 {
            return Err(Error::Config("noise edges need at least one noise item".into()));
        }
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(Error::Config(format!("period must be positive, got {}", self.period)));
        }
        if !(self.decay >= 1.0 && self.decay.is_finite()) {
            return Err(Error::Config(format!("decay must be at least 1, got {}", self.decay)));
        }
        let last_start = self.start(self.num_pairs - 1);
        if !(self.horizon >= last_start) || !self.horizon.is_finite() {
            return Err(Error::Config(format!(
                "horizon {} leaves no event for pair {} (first event at {last_start})",
                self.horizon,
                self.num_pairs - 1
            )));
        }
        Ok(())
    }

    /// First event time of pair `i`; starts are staggered across one period.
    fn start(&self, i: usize) -> f64 {
        self.period * i as f64 / self.num_pairs as f64
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub graph: TemporalGraph,
    pub planted: Vec<(NodeId, NodeId)>,
    /// Edges in chronological order, as stored in the graph.
    pub edges: Vec<(NodeId, NodeId, f64)>,
}

/// Event times of one planted pair: `start, start+g, start+g+g·decay, …`
/// up to and including `horizon`, with first gap `period`.
pub fn planted_times(start: f64, period: f64, decay: f64, horizon: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let (mut t, mut gap) = (start, period);
    while t <= horizon {
        out.push(t);
        t += gap;
        gap *= decay;
    }
    out
}

pub fn synth_dataset(spec: &SynthSpec, d_n: usize, d_e: usize) -> Result<SynthDataset> {
    spec.validate()?;
    let p = spec.num_pairs;
    let planted: Vec<(NodeId, NodeId)> = (0..p).map(|i| (i, p + i)).collect();
    let mut edges = Vec::new();
    for (i, &(u, v)) in planted.iter().enumerate() {
        for t in planted_times(spec.start(i), spec.period, spec.decay, spec.horizon) {
            edges.push((u, v, t));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise_items = spec.noise_items;
    for _ in 0..spec.noise_edges {
        let u = rng.gen_range(0..p);
        let v = 2 * p + rng.gen_range(0..noise_items);
        let t = if spec.horizon > 0.0 {
            rng.gen_range(0.0..spec.horizon)
        } else {
            0.0
        };
        edges.push((u, v, t));
    }
    let graph = TemporalGraph::new(spec.num_nodes(), &edges, None, None, d_n, d_e)?;
    let edges = graph.interactions().iter().map(|it| (it.src, it.dst, it.ts)).collect();
    Ok(SynthDataset {
        spec: spec.clone(),
        graph,
        planted,
        edges,
    })
}

#[derive(Serialize)]
struct Manifest<'a> {
    #[serde(flatten)]
    spec: &'a SynthSpec,
    num_nodes: usize,
    num_interactions: usize,
    planted: &'a [(NodeId, NodeId)],
}

impl SynthDataset {
    /// Edge list with a `src,dst,ts` header, chronological.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("src,dst,ts\n");
        for (u, v, t) in &self.edges {
            s.push_str(&format!("{u},{v},{t}\n"));
        }
        s
    }

    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(&Manifest {
            spec: &self.spec,
            num_nodes: self.graph.num_nodes(),
            num_interactions: self.graph.len(),
            planted: &self.planted,
        })
        .expect("manifest serializes")
    }

    /// Writes `edges.csv` and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("edges.csv", self.to_csv()), ("manifest.json", self.manifest_json())] {
            let path = dir.join(name);
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(body.as_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
