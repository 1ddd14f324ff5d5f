//! Feature channels for neighbor sequences: node, edge, time and
//! co-occurrence frequency, patched and projected into the scan input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::TemporalGraph;
use crate::numerics::{Activation, CustomOp, Dropout, Mlp, ParamId, ParamStore, Segments, Tape, Tensor2, Var};
use crate::sampler::{NeighborSequence, SENTINEL_DELTA};

/// `sqrt(1/d)·cos(ω_i·δ + φ_i)` for each frequency.
pub fn encode_time(omega: &[f64], phi: &[f64], delta: f64) -> Vec<f64> {
    let s = (1.0 / omega.len() as f64).sqrt();
    omega
        .iter()
        .zip(phi)
        .map(|(&w, &p)| s * (w * delta + p).cos())
        .collect()
}

/// Log-spaced initial frequencies `1 / 10^(i·9/(d−1))`.
pub fn initial_frequencies(d: usize) -> Vec<f64> {
    if d == 1 {
        return vec![1.0];
    }
    (0..d)
        .map(|i| 1.0 / 10f64.powf(i as f64 * 9.0 / (d - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeEncoder {
    pub omega: ParamId,
    pub phi: ParamId,
    pub dim: usize,
}

impl TimeEncoder {
    pub fn new(store: &mut ParamStore, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("time encoding width must be at least 1".into()));
        }
        let omega = store.add("time.omega", Tensor2::row_vector(&initial_frequencies(dim)));
        let phi = store.add("time.phi", Tensor2::zeros(1, dim));
        Ok(Self { omega, phi, dim })
    }

    pub fn encode(&self, store: &ParamStore, delta: f64) -> Vec<f64> {
        encode_time(store.value(self.omega).data(), store.value(self.phi).data(), delta)
    }

    pub fn encode_many(&self, store: &ParamStore, deltas: &[f64]) -> Tensor2 {
        let mut out = Tensor2::zeros(deltas.len(), self.dim);
        for (r, &d) in deltas.iter().enumerate() {
            out.row_mut(r).copy_from_slice(&self.encode(store, d));
        }
        out
    }

    /// Records the encoding of `deltas` (one row each) on the tape.
    ///
    /// Rows holding the missing-gap sentinel contribute no gradient to the
    /// frequencies and phases: their phase `ω·1e10` is aliasing noise whose
    /// derivative would be of order 1e10.
    pub fn forward(&self, tape: &mut Tape, deltas: &[f64]) -> Var {
        let out = self.encode_many(tape.params(), deltas);
        let w = tape.param(self.omega);
        let p = tape.param(self.phi);
        tape.custom(
            vec![w, p],
            out,
            Box::new(TimeEncodeOp {
                deltas: deltas.to_vec(),
            }),
        )
    }
}

#[derive(Debug)]
struct TimeEncodeOp {
    deltas: Vec<f64>,
}

impl CustomOp for TimeEncodeOp {
    fn backward(&self, inputs: &[&Tensor2], _out: &Tensor2, g: &Tensor2) -> Result<Vec<Option<Tensor2>>> {
        let (omega, phi) = (inputs[0].data(), inputs[1].data());
        let d = omega.len();
        let s = (1.0 / d as f64).sqrt();
        let mut dw = Tensor2::zeros(1, d);
        let mut dp = Tensor2::zeros(1, d);
        for (r, &delta) in self.deltas.iter().enumerate() {
            if delta >= SENTINEL_DELTA {
                continue;
            }
            for i in 0..d {
                let ds = -s * (omega[i] * delta + phi[i]).sin() * g.get(r, i);
                dw.data_mut()[i] += ds * delta;
                dp.data_mut()[i] += ds;
            }
        }
        Ok(vec![Some(dw), Some(dp)])
    }
}

/// Unpatched per-sequence features, one row per entry including the self row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub x: Tensor2,
    pub e: Tensor2,
    pub t: Tensor2,
    pub fq: Tensor2,
}

impl FeatureBundle {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchedBundle {
    pub xp: Tensor2,
    pub ep: Tensor2,
    pub tp: Tensor2,
    pub fp: Tensor2,
    pub p: usize,
}

/// Node/edge feature rows and time gaps of one sequence.
fn raw_rows(g: &TemporalGraph, seq: &NeighborSequence) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (dn, de) = (g.d_n(), g.d_e());
    let mut x = Vec::with_capacity(seq.len() * dn);
    let mut e = Vec::with_capacity(seq.len() * de);
    let mut deltas = Vec::with_capacity(seq.len());
    for entry in seq.with_self() {
        x.extend_from_slice(g.node_features().row(entry.neighbor));
        match entry.edge_feat_row {
            Some(r) => e.extend_from_slice(g.edge_features().row(r)),
            None => e.extend(std::iter::repeat_n(0.0, de)),
        }
        deltas.push(seq.query_ts - entry.ts);
    }
    (x, e, deltas)
}

/// Builds the four aligned channels of one sequence outside any trace.
pub fn assemble_bundle(
    g: &TemporalGraph,
    seq: &NeighborSequence,
    counts: &Tensor2,
    te: &TimeEncoder,
    freq: &Mlp,
    store: &ParamStore,
) -> Result<FeatureBundle> {
    if counts.shape() != (seq.len(), 2) {
        return Err(Error::Dimension(format!(
            "counts {:?} for a sequence of length {}",
            counts.shape(),
            seq.len()
        )));
    }
    let l = seq.len();
    let (x, e, deltas) = raw_rows(g, seq);
    let f0 = freq.apply(store, &Tensor2::col_vector(&counts.column(0)))?;
    let mut fq = freq.apply(store, &Tensor2::col_vector(&counts.column(1)))?;
    fq.add_assign(&f0);
    Ok(FeatureBundle {
        x: Tensor2::from_vec(l, g.d_n(), x)?,
        e: Tensor2::from_vec(l, g.d_e(), e)?,
        t: te.encode_many(store, &deltas),
        fq,
    })
}

/// Slot layout grouping `p` consecutive rows per patch, zero slots at the tail.
pub fn patch_layout(lengths: impl IntoIterator<Item = usize>, p: usize) -> (Vec<Option<usize>>, Vec<usize>) {
    let mut layout = Vec::new();
    let mut patched = Vec::new();
    let mut offset = 0;
    for l in lengths {
        let n = l.div_ceil(p);
        for s in 0..n * p {
            layout.push((s < l).then_some(offset + s));
        }
        patched.push(n);
        offset += l;
    }
    (layout, patched)
}

pub fn patch_matrix(m: &Tensor2, p: usize) -> Tensor2 {
    pack_plain(m, &patch_layout([m.rows()], p).0, p)
}

fn pack_plain(m: &Tensor2, layout: &[Option<usize>], p: usize) -> Tensor2 {
    let d = m.cols();
    let mut out = Tensor2::zeros(layout.len() / p, p * d);
    for (slot, src) in layout.iter().enumerate() {
        if let Some(i) = *src {
            out.row_mut(slot / p)[(slot % p) * d..(slot % p + 1) * d].copy_from_slice(m.row(i));
        }
    }
    out
}

/// Inverse of [`patch_matrix`] for a sequence of original length `l`.
pub fn unpatch_matrix(m: &Tensor2, p: usize, l: usize) -> Tensor2 {
    let d = m.cols() / p;
    let mut out = Tensor2::zeros(l, d);
    for r in 0..l {
        out.row_mut(r)
            .copy_from_slice(&m.row(r / p)[(r % p) * d..(r % p + 1) * d]);
    }
    out
}

pub fn patch(bundle: &FeatureBundle, p: usize) -> Result<PatchedBundle> {
    if p == 0 {
        return Err(Error::Config("patch size must be at least 1".into()));
    }
    Ok(PatchedBundle {
        xp: patch_matrix(&bundle.x, p),
        ep: patch_matrix(&bundle.e, p),
        tp: patch_matrix(&bundle.t, p),
        fp: patch_matrix(&bundle.fq, p),
        p,
    })
}

/// The four channel projections `f_N, f_E, f_T, f_F`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Projections {
    pub f_n: Mlp,
    pub f_e: Mlp,
    pub f_t: Mlp,
    pub f_f: Mlp,
}

impl Projections {
    pub fn out_width(&self) -> usize {
        self.f_n.out_width + self.f_e.out_width + self.f_t.out_width + self.f_f.out_width
    }
}

/// `[f_N(Xp) ‖ f_E(Ep) ‖ f_T(Tp) ‖ f_F(Fp)]` outside any trace.
pub fn project_concat(pb: &PatchedBundle, proj: &Projections, store: &ParamStore) -> Result<Tensor2> {
    let parts = [
        proj.f_n.apply(store, &pb.xp)?,
        proj.f_e.apply(store, &pb.ep)?,
        proj.f_t.apply(store, &pb.tp)?,
        proj.f_f.apply(store, &pb.fp)?,
    ];
    let rows = parts[0].rows();
    let width: usize = parts.iter().map(Tensor2::cols).sum();
    let mut h = Tensor2::zeros(rows, width);
    for r in 0..rows {
        let mut off = 0;
        for part in &parts {
            h.row_mut(r)[off..off + part.cols()].copy_from_slice(part.row(r));
            off += part.cols();
        }
    }
    Ok(h)
}

/// Raw inputs of many sequences stacked row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub lengths: Vec<usize>,
    x: Vec<f64>,
    e: Vec<f64>,
    deltas: Vec<f64>,
    counts: Vec<f64>,
    d_n: usize,
    d_e: usize,
}

impl SequenceBatch {
    pub fn new(d_n: usize, d_e: usize) -> Self {
        Self {
            lengths: Vec::new(),
            x: Vec::new(),
            e: Vec::new(),
            deltas: Vec::new(),
            counts: Vec::new(),
            d_n,
            d_e,
        }
    }

    pub fn push(&mut self, g: &TemporalGraph, seq: &NeighborSequence, counts: &Tensor2) -> Result<()> {
        if (g.d_n(), g.d_e()) != (self.d_n, self.d_e) {
            return Err(Error::Dimension(format!(
                "graph feature widths {}/{} vs batch {}/{}",
                g.d_n(),
                g.d_e(),
                self.d_n,
                self.d_e
            )));
        }
        if counts.shape() != (seq.len(), 2) {
            return Err(Error::Dimension(format!(
                "counts {:?} for a sequence of length {}",
                counts.shape(),
                seq.len()
            )));
        }
        let (x, e, d) = raw_rows(g, seq);
        self.x.extend(x);
        self.e.extend(e);
        self.deltas.extend(d);
        self.counts.extend_from_slice(counts.data());
        self.lengths.push(seq.len());
        Ok(())
    }

    pub fn num_rows(&self) -> usize {
        self.deltas.len()
    }
}

/// Everything between raw sequences and the node-level scan input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureEncoder {
    pub time: TimeEncoder,
    pub freq: Mlp,
    pub proj: Projections,
    pub patch: usize,
}

impl FeatureEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        time: TimeEncoder,
        d_n: usize,
        d_e: usize,
        d_f: usize,
        d: usize,
        patch: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Config("patch size must be at least 1".into()));
        }
        let d_t = time.dim;
        let freq = Mlp::new(store, "freq", &[1, d_f, d_f], Activation::Identity, rng)?;
        let proj = Projections {
            f_n: Mlp::linear(store, "proj.node", patch * d_n, d, rng)?,
            f_e: Mlp::linear(store, "proj.edge", patch * d_e, d, rng)?,
            f_t: Mlp::linear(store, "proj.time", patch * d_t, d, rng)?,
            f_f: Mlp::linear(store, "proj.freq", patch * d_f, d, rng)?,
        };
        Ok(Self {
            time,
            freq,
            proj,
            patch,
        })
    }

    /// Patched, projected input `H` for every sequence of the batch, with the
    /// per-sequence patched row ranges.
    pub fn forward(&self, tape: &mut Tape, batch: &SequenceBatch, drop: &mut Dropout) -> Result<(Var, Segments)> {
        let n = batch.num_rows();
        let p = self.patch;
        let (layout, patched) = patch_layout(batch.lengths.iter().copied(), p);

        let x = Tensor2::from_vec(n, batch.d_n, batch.x.clone())?;
        let e = Tensor2::from_vec(n, batch.d_e, batch.e.clone())?;
        let xp = tape.constant(pack_plain(&x, &layout, p));
        let ep = tape.constant(pack_plain(&e, &layout, p));

        let t = self.time.forward(tape, &batch.deltas);
        let tp = tape.pack_rows(t, layout.clone(), p)?;

        let c0: Vec<f64> = batch.counts.iter().step_by(2).copied().collect();
        let c1: Vec<f64> = batch.counts.iter().skip(1).step_by(2).copied().collect();
        let c0 = tape.constant(Tensor2::col_vector(&c0));
        let c1 = tape.constant(Tensor2::col_vector(&c1));
        let f0 = self.freq.forward(tape, c0)?;
        let f1 = self.freq.forward(tape, c1)?;
        let fq = tape.add(f0, f1)?;
        let fq = drop.apply(tape, fq)?;
        let fp = tape.pack_rows(fq, layout, p)?;

        let mut parts = Vec::with_capacity(4);
        for (m, v) in [
            (&self.proj.f_n, xp),
            (&self.proj.f_e, ep),
            (&self.proj.f_t, tp),
            (&self.proj.f_f, fp),
        ] {
            let h = m.forward(tape, v)?;
            parts.push(drop.apply(tape, h)?);
        }
        let h = tape.concat_cols(&parts)?;
        Ok((h, Segments::from_lengths(patched)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{cooccurrence_counts, recent_neighbors};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn time_encoding_examples() {
        assert_eq!(encode_time(&[1.0, 0.1, 0.01, 0.001], &[0.0; 4], 0.0), vec![0.5; 4]);
        let v = encode_time(&[PI], &[0.0], 1.0);
        assert!((v[0] + 1.0).abs() < 1e-15);
        let w = initial_frequencies(4);
        assert!((w[0] - 1.0).abs() < 1e-15 && (w[3] - 1e-9).abs() < 1e-24);
    }

    #[test]
    fn time_encoding_matches_formula_and_lipschitz_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let d = rng.gen_range(1..8);
            let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let p: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (a, b) = (rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0));
            let (ea, eb) = (encode_time(&w, &p, a), encode_time(&w, &p, b));
            let s = (1.0 / d as f64).sqrt();
            let wmax = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for i in 0..d {
                assert!((ea[i] - s * (w[i] * a + p[i]).cos()).abs() < 1e-15);
                assert!((ea[i] - eb[i]).abs() <= s * wmax * (a - b).abs() + 1e-12);
            }
        }
    }

    #[test]
    fn patch_shapes_and_round_trip() {
        let m = Tensor2::from_vec(5, 3, (0..15).map(|i| i as f64 + 1.0).collect()).unwrap();
        assert_eq!(patch_matrix(&m, 1), m);
        let p = patch_matrix(&m, 2);
        assert_eq!(p.shape(), (3, 6));
        assert_eq!(&p.row(2)[3..], &[0.0; 3]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (l, p, d) = (rng.gen_range(1..=10), rng.gen_range(1..=4), rng.gen_range(1..4));
            let m = Tensor2::from_vec(l, d, (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let pm = patch_matrix(&m, p);
            assert_eq!(pm.rows(), l.div_ceil(p));
            assert_eq!(unpatch_matrix(&pm, p, l), m);
            let pad = &pm.data()[l * d..];
            assert!(pad.iter().all(|&v| v == 0.0));
        }
    }

    fn toy() -> (TemporalGraph, ParamStore, FeatureEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let edges = [(0, 1, 1.0), (0, 2, 2.0), (1, 2, 2.5), (0, 1, 3.0), (2, 3, 4.0)];
        let nf = Tensor2::from_vec(4, 2, (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        let ef = Tensor2::from_vec(5, 3, (0..15).map(|i| (i as f64).sin()).collect()).unwrap();
        let g = TemporalGraph::new(4, &edges, Some(nf), Some(ef), 2, 3).unwrap();
        let mut store = ParamStore::new();
        let te = TimeEncoder::new(&mut store, 4).unwrap();
        let enc = FeatureEncoder::new(&mut store, te, 2, 3, 3, 5, 2, &mut rng).unwrap();
        (g, store, enc)
    }

    #[test]
    fn bundle_rows_follow_the_per_entry_rule() {
        let (g, store, enc) = toy();
        let su = recent_neighbors(&g, 0, 5.0, 8).unwrap();
        let sv = recent_neighbors(&g, 1, 5.0, 8).unwrap();
        let (cu, _) = cooccurrence_counts(&su, &sv, 2).unwrap();
        let b = assemble_bundle(&g, &su, &cu, &enc.time, &enc.freq, &store).unwrap();
        assert_eq!(b.len(), 4);
        for (r, entry) in su.with_self().enumerate() {
            assert_eq!(b.x.row(r), g.node_features().row(entry.neighbor));
            let e_expect = entry
                .edge_feat_row
                .map_or(vec![0.0; 3], |i| g.edge_features().row(i).to_vec());
            assert_eq!(b.e.row(r), e_expect.as_slice());
            assert_eq!(b.t.row(r), enc.time.encode(&store, 5.0 - entry.ts).as_slice());
            let f = |c: f64| enc.freq.apply(&store, &Tensor2::row_vector(&[c])).unwrap();
            let mut fq = f(cu.get(r, 0));
            fq.add_assign(&f(cu.get(r, 1)));
            assert_eq!(b.fq.row(r), fq.row(0));
        }
        // self row
        assert_eq!(b.t.row(3), enc.time.encode(&store, 0.0).as_slice());

        let cold = recent_neighbors(&g, 3, 0.5, 8).unwrap();
        let (cc, _) = cooccurrence_counts(&cold, &recent_neighbors(&g, 2, 0.5, 8).unwrap(), 0).unwrap();
        let b = assemble_bundle(&g, &cold, &cc, &enc.time, &enc.freq, &store).unwrap();
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn batched_tape_path_matches_reference() {
        let (g, store, enc) = toy();
        let mut batch = SequenceBatch::new(2, 3);
        let mut reference = Vec::new();
        for (u, v, t) in [(0, 1, 5.0), (2, 3, 4.5), (3, 0, 0.5)] {
            let su = recent_neighbors(&g, u, t, 3).unwrap();
            let sv = recent_neighbors(&g, v, t, 3).unwrap();
            let (cu, _) = cooccurrence_counts(&su, &sv, 1).unwrap();
            batch.push(&g, &su, &cu).unwrap();
            let b = assemble_bundle(&g, &su, &cu, &enc.time, &enc.freq, &store).unwrap();
            reference.push(project_concat(&patch(&b, 2).unwrap(), &enc.proj, &store).unwrap());
        }
        let mut tape = Tape::new(&store);
        let (h, segs) = enc.forward(&mut tape, &batch, &mut Dropout::eval()).unwrap();
        let hv = tape.value(h);
        for (s, r) in segs.ranges().zip(&reference) {
            assert_eq!(s.len(), r.rows());
            for (i, row) in s.enumerate() {
                let got = hv.row(row);
                let want = r.row(i);
                for (a, b) in got.iter().zip(want) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn projection_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let d = 3;
        let proj = Projections {
            f_n: Mlp::linear(&mut store, "n", d, d, &mut rng).unwrap(),
            f_e: Mlp::linear(&mut store, "e", 2, d, &mut rng).unwrap(),
            f_t: Mlp::linear(&mut store, "t", 2, d, &mut rng).unwrap(),
            f_f: Mlp::linear(&mut store, "f", 2, d, &mut rng).unwrap(),
        };
        *store.value_mut(proj.f_n.layers[0].weight) = Tensor2::identity(d);
        let mut rnd = |r, c| Tensor2::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let pb = PatchedBundle {
            xp: rnd(3, 3),
            ep: rnd(3, 2),
            tp: rnd(3, 2),
            fp: rnd(3, 2),
            p: 1,
        };
        let h = project_concat(&pb, &proj, &store).unwrap();
        assert_eq!(h.shape(), (3, 4 * d));
        for r in 0..3 {
            assert_eq!(&h.row(r)[..d], pb.xp.row(r));
        }
        // perturbing the edge channel only moves columns d..2d
        let mut pb2 = pb.clone();
        pb2.ep.data_mut()[0] += 1.0;
        let h2 = project_concat(&pb2, &proj, &store).unwrap();
        for r in 0..3 {
            for c in 0..4 * d {
                if !(d..2 * d).contains(&c) {
                    assert_eq!(h.get(r, c), h2.get(r, c));
                }
            }
        }
        for m in [&proj.f_n, &proj.f_e, &proj.f_t, &proj.f_f] {
            let w = store.value(m.layers[0].weight).shape();
            *store.value_mut(m.layers[0].weight) = Tensor2::zeros(w.0, w.1);
            *store.value_mut(m.layers[0].bias) = Tensor2::filled(1, d, 0.25);
        }
        let h = project_concat(&pb, &proj, &store).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.25));
    }
}
