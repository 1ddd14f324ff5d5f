//! Fully connected stacks used for every learned map in the model.

use rand::Rng;

use super::funcs::gelu;
use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub in_width: usize,
    pub out_width: usize,
}

impl Mlp {
    /// Builds layers `widths[0] → widths[1] → …` with GELU between layers and
    /// `last` after the final one. Parameters are named `{name}.{i}.w/b`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        last: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("mlp {name}: bad widths {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let weight = store.add_glorot(format!("{name}.{i}.w"), widths[i], widths[i + 1], rng);
                let bias = store.add(format!("{name}.{i}.b"), Tensor2::zeros(1, widths[i + 1]));
                let activation = if i + 1 == n { last } else { Activation::Gelu };
                Layer {
                    weight,
                    bias,
                    activation,
                }
            })
            .collect();
        Ok(Self {
            layers,
            in_width: widths[0],
            out_width: widths[n],
        })
    }

    /// Single linear layer.
    pub fn linear<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_width: usize,
        out_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(store, name, &[in_width, out_width], Activation::Identity, rng)
    }

    pub fn num_scalars(&self, store: &ParamStore) -> usize {
        self.layers
            .iter()
            .map(|l| store.value(l.weight).data().len() + store.value(l.bias).data().len())
            .sum()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.in_width {
            return Err(Error::Dimension(format!(
                "mlp expects width {}, got {}",
                self.in_width,
                tape.value(x).cols()
            )));
        }
        let mut h = x;
        for l in &self.layers {
            let w = tape.param(l.weight);
            let b = tape.param(l.bias);
            h = tape.affine(h, w, Some(b))?;
            if l.activation == Activation::Gelu {
                h = tape.gelu(h);
            }
        }
        Ok(h)
    }

    /// Row-wise evaluation outside any trace.
    pub fn apply(&self, store: &ParamStore, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.in_width {
            return Err(Error::Dimension(format!(
                "mlp expects width {}, got {}",
                self.in_width,
                x.cols()
            )));
        }
        let mut h = x.clone();
        for l in &self.layers {
            let mut out = h.matmul(store.value(l.weight))?;
            let b = store.value(l.bias);
            for r in 0..out.rows() {
                for (o, &bb) in out.row_mut(r).iter_mut().zip(b.data()) {
                    *o += bb;
                }
            }
            if l.activation == Activation::Gelu {
                out = out.map(gelu);
            }
            h = out;
        }
        Ok(h)
    }
}
