//! Tape-based reverse-mode differentiation over [`Tensor2`] values.
//!
//! Every operation evaluates eagerly and records itself on the tape. A
//! single call to [`Tape::backward`] walks the records in reverse order and
//! returns one gradient per reachable parameter. Accumulation order is fixed
//! by record order, so identical traces give bit-identical gradients.
//!
//! Sequence-structured operations (`seg_*`) act on a stack of variable-length
//! sequences described by [`Segments`]; this lets a whole minibatch share one
//! trace while keeping per-sequence semantics.

use std::fmt;

use super::funcs::{gelu, gelu_grad, sigmoid, softplus, standardize};
use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm_acc, matmul_acc, Tensor2};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Row ranges `[offsets[i], offsets[i+1])` of stacked sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        for l in lengths {
            let last = *offsets.last().unwrap();
            offsets.push(last + l);
        }
        Self { offsets }
    }

    /// One segment spanning `rows` rows.
    pub fn single(rows: usize) -> Self {
        Self { offsets: vec![0, rows] }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.offsets.windows(2).map(|w| w[0]..w[1])
    }

    pub fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.offsets.windows(2).map(|w| w[1] - w[0])
    }
}

/// An operation with a hand-written vector-Jacobian product.
///
/// `backward` receives the input values, the forward output and the output
/// gradient, and returns one optional gradient per input.
pub trait CustomOp: fmt::Debug {
    fn backward(&self, inputs: &[&Tensor2], output: &Tensor2, grad_out: &Tensor2) -> Result<Vec<Option<Tensor2>>>;
}

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softplus(Var),
    Sigmoid(Var),
    AddRow {
        x: Var,
        row: Var,
    },
    BroadcastCols(Var),
    ConcatCols(Vec<Var>),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Pack {
        x: Var,
        layout: Vec<Option<usize>>,
        group: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor2,
        inv_std: Vec<f64>,
    },
    SegWeightedSum {
        w: Var,
        x: Var,
        segs: Segments,
    },
    SegRowDot {
        x: Var,
        key: Var,
        segs: Segments,
    },
    SegSoftmax {
        x: Var,
        segs: Segments,
    },
    SegMean {
        x: Var,
        segs: Segments,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Bce {
        p: Var,
        labels: Vec<f64>,
    },
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor2>,
    op: Op,
}

/// BCE clamps probabilities into `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-12;

pub struct Tape<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
    consumed: bool,
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without a value"),
        }
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor2) -> Var {
        self.push(t, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// `x · w (+ b)` with `b` a 1×m row broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.rows() {
            return Err(Error::Dimension(format!(
                "affine input width {} vs weight {}x{}",
                xv.cols(),
                wv.rows(),
                wv.cols()
            )));
        }
        let mut out = Tensor2::zeros(xv.rows(), wv.cols());
        matmul_acc(xv, wv, &mut out);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != (1, wv.cols()) {
                return Err(Error::Dimension(format!(
                    "bias shape {:?} for output width {}",
                    bv.shape(),
                    wv.cols()
                )));
            }
            for r in 0..out.rows() {
                for (o, &bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        Ok(self.push(out, Op::Affine { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.affine(a, b, None)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor2::from_vec(av.rows(), av.cols(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Adds a 1×m row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let xv = self.value(x);
        let rv = self.value(row);
        if rv.shape() != (1, xv.cols()) {
            return Err(Error::Dimension(format!(
                "row broadcast of {:?} onto {:?}",
                rv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow { x, row }))
    }

    /// Repeats an n×1 column across `cols` columns.
    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != 1 {
            return Err(Error::Dimension(format!(
                "broadcast expects a column, got {:?}",
                xv.shape()
            )));
        }
        let mut out = Tensor2::zeros(xv.rows(), cols);
        for r in 0..xv.rows() {
            out.row_mut(r).fill(xv.get(r, 0));
        }
        Ok(self.push(out, Op::BroadcastCols(x)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(Error::Dimension(format!("concat of {rows} and {} rows", pv.rows())));
            }
            cols += pv.cols();
        }
        let mut out = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Tensor2::zeros(index.len(), xv.cols());
        for (o, &i) in index.iter().enumerate() {
            if i >= xv.rows() {
                return Err(Error::Dimension(format!("gather row {i} from {} rows", xv.rows())));
            }
            out.row_mut(o).copy_from_slice(xv.row(i));
        }
        Ok(self.push(out, Op::Gather { x, index }))
    }

    /// Concatenates `group` input rows (or zero rows for `None`) into each
    /// output row. `layout.len()` must be a multiple of `group`.
    pub fn pack_rows(&mut self, x: Var, layout: Vec<Option<usize>>, group: usize) -> Result<Var> {
        if group == 0 || !layout.len().is_multiple_of(group) {
            return Err(Error::Dimension(format!(
                "layout of {} slots for groups of {group}",
                layout.len()
            )));
        }
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = Tensor2::zeros(layout.len() / group, group * d);
        for (slot, src) in layout.iter().enumerate() {
            if let Some(i) = *src {
                if i >= xv.rows() {
                    return Err(Error::Dimension(format!("pack row {i} of {}", xv.rows())));
                }
                let (o, j) = (slot / group, slot % group);
                out.row_mut(o)[j * d..(j + 1) * d].copy_from_slice(xv.row(i));
            }
        }
        Ok(self.push(out, Op::Pack { x, layout, group }))
    }

    /// Row-wise layer normalisation with 1×C gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.shape() != (1, c) || bv.shape() != (1, c) {
            return Err(Error::Dimension(format!(
                "layer norm gain {:?} / bias {:?} for width {c}",
                gv.shape(),
                bv.shape()
            )));
        }
        let mut xhat = Tensor2::zeros(xv.rows(), c);
        let mut out = Tensor2::zeros(xv.rows(), c);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let (h, inv) = standardize(xv.row(r), eps);
            inv_std.push(inv);
            for j in 0..c {
                out.set(r, j, h[j] * gv.data()[j] + bv.data()[j]);
            }
            xhat.row_mut(r).copy_from_slice(&h);
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    fn check_segments(&self, x: Var, segs: &Segments, what: &str) -> Result<()> {
        let rows = self.value(x).rows();
        if segs.total_rows() != rows {
            return Err(Error::Dimension(format!(
                "{what}: segments cover {} rows, input has {rows}",
                segs.total_rows()
            )));
        }
        Ok(())
    }

    /// `out[s] = Σ_{r∈s} w[r]·x[r]` for an n×1 weight column.
    pub fn seg_weighted_sum(&mut self, w: Var, x: Var, segs: &Segments) -> Result<Var> {
        self.check_segments(x, segs, "weighted sum")?;
        let (wv, xv) = (self.value(w), self.value(x));
        if wv.shape() != (xv.rows(), 1) {
            return Err(Error::Dimension(format!(
                "weights {:?} for {} rows",
                wv.shape(),
                xv.rows()
            )));
        }
        let mut out = Tensor2::zeros(segs.len(), xv.cols());
        for (s, range) in segs.ranges().enumerate() {
            for r in range {
                let wr = wv.get(r, 0);
                for (o, &v) in out.row_mut(s).iter_mut().zip(xv.row(r)) {
                    *o += wr * v;
                }
            }
        }
        Ok(self.push(
            out,
            Op::SegWeightedSum {
                w,
                x,
                segs: segs.clone(),
            },
        ))
    }

    /// `out[r] = x[r] · key[s(r)]` where `s(r)` is the segment of row r.
    pub fn seg_row_dot(&mut self, x: Var, key: Var, segs: &Segments) -> Result<Var> {
        self.check_segments(x, segs, "row dot")?;
        let (xv, kv) = (self.value(x), self.value(key));
        if kv.shape() != (segs.len(), xv.cols()) {
            return Err(Error::Dimension(format!(
                "keys {:?} for {} segments of width {}",
                kv.shape(),
                segs.len(),
                xv.cols()
            )));
        }
        let mut out = Tensor2::zeros(xv.rows(), 1);
        for (s, range) in segs.ranges().enumerate() {
            let k = kv.row(s);
            for r in range {
                out.set(r, 0, xv.row(r).iter().zip(k).map(|(a, b)| a * b).sum());
            }
        }
        Ok(self.push(
            out,
            Op::SegRowDot {
                x,
                key,
                segs: segs.clone(),
            },
        ))
    }

    /// Softmax of an n×1 column within each segment.
    pub fn seg_softmax(&mut self, x: Var, segs: &Segments) -> Result<Var> {
        self.check_segments(x, segs, "softmax")?;
        let xv = self.value(x);
        if xv.cols() != 1 {
            return Err(Error::Dimension("segment softmax expects a column".into()));
        }
        let mut out = Tensor2::zeros(xv.rows(), 1);
        for range in segs.ranges() {
            let sm = super::funcs::softmax(&xv.data()[range.clone()]);
            out.data_mut()[range].copy_from_slice(&sm);
        }
        Ok(self.push(out, Op::SegSoftmax { x, segs: segs.clone() }))
    }

    /// Column-wise mean over each segment's rows.
    pub fn seg_mean(&mut self, x: Var, segs: &Segments) -> Result<Var> {
        self.check_segments(x, segs, "mean")?;
        let xv = self.value(x);
        let mut out = Tensor2::zeros(segs.len(), xv.cols());
        for (s, range) in segs.ranges().enumerate() {
            if range.is_empty() {
                return Err(Error::Dimension(format!("mean over empty segment {s}")));
            }
            let inv = 1.0 / range.len() as f64;
            for r in range {
                for (o, &v) in out.row_mut(s).iter_mut().zip(xv.row(r)) {
                    *o += v * inv;
                }
            }
        }
        Ok(self.push(out, Op::SegMean { x, segs: segs.clone() }))
    }

    /// Inverted dropout: `mask` holds 0 or 1/(1-rate) per entry.
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.data().len() {
            return Err(Error::Dimension("dropout mask size".into()));
        }
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor2::from_vec(xv.rows(), xv.cols(), data)?;
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    /// Mean binary cross-entropy of an n×1 probability column.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.shape() != (labels.len(), 1) || labels.is_empty() {
            return Err(Error::Batch(format!(
                "{} labels for predictions of shape {:?}",
                labels.len(),
                pv.shape()
            )));
        }
        let n = labels.len() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(labels)
            .map(|(&q, &y)| {
                let q = q.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor2::filled(1, 1, loss),
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor2::filled(1, 1, s), Op::Sum(x))
    }

    /// Records an externally computed output with a custom backward rule.
    pub fn custom(&mut self, inputs: Vec<Var>, output: Tensor2, op: Box<dyn CustomOp>) -> Var {
        self.push(output, Op::Custom { inputs, op })
    }

    /// Reverse pass from a 1×1 `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State("backward already ran on this trace".into()));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::State("backward needs a scalar loss".into()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor2>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor2::filled(1, 1, 1.0));
        let mut param_grads: Vec<Option<Tensor2>> = vec![None; self.params.len()];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => accumulate(&mut param_grads[id.0], g),
                Op::Affine { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    gemm_acc(&g, false, wv, true, &mut dx);
                    let dw = xv.t_matmul(&g)?;
                    if let Some(b) = b {
                        let mut db = Tensor2::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, &v) in db.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads[b.0], db);
                    }
                    accumulate(&mut grads[w.0], dw);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = zip_map(&g, bv, |gv, y| gv * y);
                    let db = zip_map(&g, av, |gv, y| gv * y);
                    accumulate(&mut grads[b.0], db);
                    accumulate(&mut grads[a.0], da);
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    accumulate(&mut grads[x.0], g.map(|v| v * s));
                }
                Op::Gelu(x) => {
                    let d = zip_map(&g, self.value(*x), |gv, xv| gv * gelu_grad(xv));
                    accumulate(&mut grads[x.0], d);
                }
                Op::Softplus(x) => {
                    let d = zip_map(&g, self.value(*x), |gv, xv| gv * sigmoid(xv));
                    accumulate(&mut grads[x.0], d);
                }
                Op::Sigmoid(x) => {
                    let out = node.value.as_ref().unwrap();
                    let d = zip_map(&g, out, |gv, y| gv * y * (1.0 - y));
                    accumulate(&mut grads[x.0], d);
                }
                Op::AddRow { x, row } => {
                    let mut dr = Tensor2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads[row.0], dr);
                    accumulate(&mut grads[x.0], g);
                }
                Op::BroadcastCols(x) => {
                    let mut d = Tensor2::zeros(g.rows(), 1);
                    for r in 0..g.rows() {
                        d.set(r, 0, g.row(r).iter().sum());
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut d = Tensor2::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut grads[p.0], d);
                    }
                }
                Op::Gather { x, index } => {
                    let xv = self.value(*x);
                    let mut d = Tensor2::zeros(xv.rows(), xv.cols());
                    for (o, &i) in index.iter().enumerate() {
                        for (dv, &gv) in d.row_mut(i).iter_mut().zip(g.row(o)) {
                            *dv += gv;
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::Pack { x, layout, group } => {
                    let xv = self.value(*x);
                    let dcols = xv.cols();
                    let mut d = Tensor2::zeros(xv.rows(), dcols);
                    for (slot, src) in layout.iter().enumerate() {
                        if let Some(i) = *src {
                            let (o, j) = (slot / group, slot % group);
                            let gs = &g.row(o)[j * dcols..(j + 1) * dcols];
                            for (dv, &gv) in d.row_mut(i).iter_mut().zip(gs) {
                                *dv += gv;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let c = xhat.cols();
                    let mut dgain = Tensor2::zeros(1, c);
                    let mut dbias = Tensor2::zeros(1, c);
                    let mut dx = Tensor2::zeros(xhat.rows(), c);
                    for r in 0..xhat.rows() {
                        let h = xhat.row(r);
                        let gr = g.row(r);
                        let mut dh = vec![0.0; c];
                        for j in 0..c {
                            dgain.data_mut()[j] += gr[j] * h[j];
                            dbias.data_mut()[j] += gr[j];
                            dh[j] = gr[j] * gv.data()[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let inv = inv_std[r];
                        for j in 0..c {
                            dx.set(r, j, inv * (dh[j] - mean_dh - h[j] * mean_dh_h));
                        }
                    }
                    accumulate(&mut grads[bias.0], dbias);
                    accumulate(&mut grads[gain.0], dgain);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::SegWeightedSum { w, x, segs } => {
                    let (wv, xv) = (self.value(*w), self.value(*x));
                    let mut dw = Tensor2::zeros(wv.rows(), 1);
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for (s, range) in segs.ranges().enumerate() {
                        let gs = g.row(s);
                        for r in range {
                            let wr = wv.get(r, 0);
                            dw.set(r, 0, xv.row(r).iter().zip(gs).map(|(a, b)| a * b).sum());
                            for (dv, &gv) in dx.row_mut(r).iter_mut().zip(gs) {
                                *dv = wr * gv;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[w.0], dw);
                }
                Op::SegRowDot { x, key, segs } => {
                    let (xv, kv) = (self.value(*x), self.value(*key));
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    let mut dk = Tensor2::zeros(kv.rows(), kv.cols());
                    for (s, range) in segs.ranges().enumerate() {
                        let k = kv.row(s);
                        for r in range {
                            let gr = g.get(r, 0);
                            for (dv, &kk) in dx.row_mut(r).iter_mut().zip(k) {
                                *dv = gr * kk;
                            }
                            for (dv, &xx) in dk.row_mut(s).iter_mut().zip(xv.row(r)) {
                                *dv += gr * xx;
                            }
                        }
                    }
                    accumulate(&mut grads[key.0], dk);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::SegSoftmax { x, segs } => {
                    let y = node.value.as_ref().unwrap();
                    let mut dx = Tensor2::zeros(y.rows(), 1);
                    for range in segs.ranges() {
                        let dot: f64 = range.clone().map(|r| y.get(r, 0) * g.get(r, 0)).sum();
                        for r in range {
                            dx.set(r, 0, y.get(r, 0) * (g.get(r, 0) - dot));
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::SegMean { x, segs } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for (s, range) in segs.ranges().enumerate() {
                        let inv = 1.0 / range.len() as f64;
                        for r in range {
                            for (dv, &gv) in dx.row_mut(r).iter_mut().zip(g.row(s)) {
                                *dv = gv * inv;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Dropout { x, mask } => {
                    let data = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                    let d = Tensor2::from_vec(g.rows(), g.cols(), data)?;
                    accumulate(&mut grads[x.0], d);
                }
                Op::Bce { p, labels } => {
                    let pv = self.value(*p);
                    let n = labels.len() as f64;
                    let scale = g.get(0, 0) / n;
                    let data = pv
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&q, &y)| {
                            if q <= BCE_CLAMP || q >= 1.0 - BCE_CLAMP {
                                0.0
                            } else {
                                -scale * (y / q - (1.0 - y) / (1.0 - q))
                            }
                        })
                        .collect();
                    accumulate(&mut grads[p.0], Tensor2::from_vec(pv.rows(), 1, data)?);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    accumulate(&mut grads[x.0], Tensor2::filled(xv.rows(), xv.cols(), g.get(0, 0)));
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Tensor2> = inputs.iter().map(|&v| self.value(v)).collect();
                    let out = node.value.as_ref().unwrap();
                    let dins = op.backward(&ins, out, &g)?;
                    for (&v, d) in inputs.iter().zip(dins).rev() {
                        if let Some(d) = d {
                            accumulate(&mut grads[v.0], d);
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: param_grads })
    }
}

fn accumulate(slot: &mut Option<Tensor2>, g: Tensor2) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor2, b: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Tensor2 {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor2::from_vec(a.rows(), a.cols(), data).expect("same shape")
}
