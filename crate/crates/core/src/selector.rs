//! Edge-specific temporal pattern pooling and pattern-driven selection over
//! both endpoints' encoded sequences.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::funcs::softmax;
use crate::numerics::{Activation, Dropout, Mlp, ParamStore, Segments, Tape, Tensor2, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionHead {
    pub f_map2: Mlp,
    pub f_map3: Mlp,
    pub f_agg: Mlp,
    pub f_out1: Mlp,
    pub f_out2: Mlp,
}

impl SelectionHead {
    /// `width` is the node-level channel width (4d), `pattern` the
    /// time-level width and `out` the output width.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        width: usize,
        pattern: usize,
        out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            f_map2: Mlp::linear(store, "select.map2", pattern, width, rng)?,
            f_map3: Mlp::linear(store, "select.map3", width, 1, rng)?,
            f_agg: Mlp::new(store, "select.agg", &[width, width, width], Activation::Identity, rng)?,
            f_out1: Mlp::linear(store, "select.out1", width, out, rng)?,
            f_out2: Mlp::linear(store, "select.out2", pattern, out, rng)?,
        })
    }

    /// Batched selection. `h` stacks 2B sequences, the B `u` sides first and
    /// then the B `v` sides; `h_uv` holds one temporal pattern per query.
    /// Returns the selected representations `(h_u; h_v)` as a 2B-row matrix.
    pub fn select(&self, tape: &mut Tape, h: Var, segs: &Segments, h_uv: Var, drop: &mut Dropout) -> Result<Var> {
        let b = tape.value(h_uv).rows();
        if segs.len() != 2 * b {
            return Err(Error::Dimension(format!("{} sequences for {b} queries", segs.len())));
        }
        let key = self.f_map2.forward(tape, h_uv)?;
        let key = drop.apply(tape, key)?;
        let w = self.f_map3.forward(tape, h)?;
        let w = drop.apply(tape, w)?;
        let pooled = tape.seg_weighted_sum(w, h, segs)?;
        let agg = self.f_agg.forward(tape, pooled)?;
        let agg = drop.apply(tape, agg)?;
        // α_u uses f_agg(h̃_v) and α_v uses f_agg(h̃_u)
        let swap: Vec<usize> = (b..2 * b).chain(0..b).collect();
        let agg_other = tape.gather_rows(agg, swap)?;
        let key2 = tape.gather_rows(key, (0..b).chain(0..b).collect())?;
        let alpha = tape.mul(agg_other, key2)?;
        let scores = tape.seg_row_dot(h, alpha, segs)?;
        let beta = tape.seg_softmax(scores, segs)?;
        tape.seg_weighted_sum(beta, h, segs)
    }

    /// `(f_out1(h_θ) for all 2B rows, f_out2(h_uv))`.
    pub fn outputs(&self, tape: &mut Tape, selected: Var, h_uv: Var, drop: &mut Dropout) -> Result<(Var, Var)> {
        let o = self.f_out1.forward(tape, selected)?;
        let o = drop.apply(tape, o)?;
        let ouv = self.f_out2.forward(tape, h_uv)?;
        let ouv = drop.apply(tape, ouv)?;
        Ok((o, ouv))
    }
}

/// Column-wise mean over the k rows of the time-level output.
pub fn temporal_pattern(h_uv: &Tensor2) -> Result<Vec<f64>> {
    if h_uv.rows() == 0 {
        return Err(Error::Dimension("temporal pattern of an empty sequence".into()));
    }
    let k = h_uv.rows() as f64;
    Ok((0..h_uv.cols())
        .map(|c| h_uv.column(c).iter().sum::<f64>() / k)
        .collect())
}

/// Selection for a single query outside any trace; the reference the
/// batched path is tested against.
pub fn select_one(
    head: &SelectionHead,
    store: &ParamStore,
    h_u: &Tensor2,
    h_v: &Tensor2,
    h_uv: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if h_u.rows() == 0 || h_v.rows() == 0 {
        return Err(Error::Dimension("selection over an empty sequence".into()));
    }
    if h_u.cols() != head.f_map3.in_width || h_v.cols() != head.f_map3.in_width {
        return Err(Error::Dimension(format!(
            "sequence widths {}/{} vs head width {}",
            h_u.cols(),
            h_v.cols(),
            head.f_map3.in_width
        )));
    }
    let key = head.f_map2.apply(store, &Tensor2::row_vector(h_uv))?;
    let pool = |h: &Tensor2| -> Result<Tensor2> {
        let w = head.f_map3.apply(store, h)?;
        let wt = Tensor2::row_vector(&w.column(0));
        wt.matmul(h)
    };
    let (pu, pv) = (pool(h_u)?, pool(h_v)?);
    let (au, av) = (head.f_agg.apply(store, &pu)?, head.f_agg.apply(store, &pv)?);
    let pick = |h: &Tensor2, agg_other: &Tensor2| -> Result<Vec<f64>> {
        let alpha: Vec<f64> = agg_other.data().iter().zip(key.data()).map(|(a, k)| a * k).collect();
        let scores = h.matmul(&Tensor2::col_vector(&alpha))?;
        let beta = softmax(scores.data());
        Ok(Tensor2::row_vector(&beta).matmul(h)?.into_vec())
    };
    Ok((pick(h_u, &av)?, pick(h_v, &au)?))
}

/// `(f_out1(h_u), f_out1(h_v), f_out2(h_uv))` outside any trace.
pub fn output_heads(
    head: &SelectionHead,
    store: &ParamStore,
    h_u: &[f64],
    h_v: &[f64],
    h_uv: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    Ok((
        head.f_out1.apply(store, &Tensor2::row_vector(h_u))?.into_vec(),
        head.f_out1.apply(store, &Tensor2::row_vector(h_v))?.into_vec(),
        head.f_out2.apply(store, &Tensor2::row_vector(h_uv))?.into_vec(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2 {
        Tensor2::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn head(rng: &mut ChaCha8Rng) -> (ParamStore, SelectionHead) {
        let mut store = ParamStore::new();
        let h = SelectionHead::new(&mut store, 8, 2, 3, rng).unwrap();
        (store, h)
    }

    #[test]
    fn pattern_pooling() {
        let one = Tensor2::row_vector(&[1.0, -2.0]);
        assert_eq!(temporal_pattern(&one).unwrap(), vec![1.0, -2.0]);
        let sym = Tensor2::from_rows(&[vec![0.3, -4.0], vec![-0.3, 4.0]]).unwrap();
        assert_eq!(temporal_pattern(&sym).unwrap(), vec![0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = random(&mut rng, 5, 3);
        let p = temporal_pattern(&m).unwrap();
        for (c, &pc) in p.iter().enumerate() {
            let s: f64 = (0..5).map(|r| m.get(r, c)).sum();
            assert!((pc - s / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_row_is_selected_verbatim() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (store, h) = head(&mut rng);
        let hu = random(&mut rng, 1, 8);
        let hv = random(&mut rng, 3, 8);
        let (su, _) = select_one(&h, &store, &hu, &hv, &[0.4, -0.2]).unwrap();
        for (a, b) in su.iter().zip(hu.row(0)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_key_gives_mean_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (store, h) = head(&mut rng);
        let hu = random(&mut rng, 4, 8);
        let hv = random(&mut rng, 2, 8);
        // f_map2 bias is zero at init, so a zero pattern gives a zero key
        let (su, sv) = select_one(&h, &store, &hu, &hv, &[0.0, 0.0]).unwrap();
        for (sel, m) in [(su, &hu), (sv, &hv)] {
            for c in 0..8 {
                let mean = m.column(c).iter().sum::<f64>() / m.rows() as f64;
                assert!((sel[c] - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn selection_is_convex_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (store, h) = head(&mut rng);
        for _ in 0..20 {
            let hu = random(&mut rng, 5, 8);
            let hv = random(&mut rng, 3, 8);
            let pat = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let (su, _) = select_one(&h, &store, &hu, &hv, &pat).unwrap();
            for c in 0..8 {
                let col = hu.column(c);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(su[c] >= lo - 1e-12 && su[c] <= hi + 1e-12);
            }
            let perm = [3, 0, 4, 1, 2];
            let rows: Vec<Vec<f64>> = perm.iter().map(|&r| hu.row(r).to_vec()).collect();
            let hp = Tensor2::from_rows(&rows).unwrap();
            let (sp, _) = select_one(&h, &store, &hp, &hv, &pat).unwrap();
            for (a, b) in su.iter().zip(&sp) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Straight replay of the selection equations with plain matrix code.
    #[test]
    fn batched_selection_matches_equation_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (store, head) = head(&mut rng);
        let hu = random(&mut rng, 3, 8);
        let hv = random(&mut rng, 4, 8);
        let pat = vec![0.7, -1.1];

        let lin = |m: &Mlp, x: &Tensor2| m.apply(&store, x).unwrap();
        let key = lin(&head.f_map2, &Tensor2::row_vector(&pat));
        let pooled = |h: &Tensor2| {
            let w = lin(&head.f_map3, h);
            let mut acc = vec![0.0; 8];
            for r in 0..h.rows() {
                for c in 0..8 {
                    acc[c] += w.get(r, 0) * h.get(r, c);
                }
            }
            Tensor2::row_vector(&acc)
        };
        let (au, av) = (lin(&head.f_agg, &pooled(&hu)), lin(&head.f_agg, &pooled(&hv)));
        let choose = |h: &Tensor2, other: &Tensor2| {
            let alpha: Vec<f64> = (0..8).map(|c| other.get(0, c) * key.get(0, c)).collect();
            let s: Vec<f64> = (0..h.rows())
                .map(|r| (0..8).map(|c| h.get(r, c) * alpha[c]).sum())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..8)
                .map(|c| (0..h.rows()).map(|r| e[r] / z * h.get(r, c)).sum::<f64>())
                .collect::<Vec<f64>>()
        };
        let (eu, ev) = (choose(&hu, &av), choose(&hv, &au));

        let (ru, rv) = select_one(&head, &store, &hu, &hv, &pat).unwrap();
        let mut tape = Tape::new(&store);
        let stacked = tape.constant(Tensor2::vstack(&[&hu, &hv]).unwrap());
        let p = tape.constant(Tensor2::row_vector(&pat));
        let out = head
            .select(
                &mut tape,
                stacked,
                &Segments::from_lengths([3, 4]),
                p,
                &mut Dropout::eval(),
            )
            .unwrap();
        let out = tape.value(out);
        for c in 0..8 {
            assert!((eu[c] - ru[c]).abs() < 1e-12 && (ev[c] - rv[c]).abs() < 1e-12);
            assert!((out.get(0, c) - eu[c]).abs() < 1e-12);
            assert!((out.get(1, c) - ev[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn output_heads_share_f_out1() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut store, head) = head(&mut rng);
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let (a, b, _) = output_heads(&head, &store, &x, &x, &[0.1, 0.2]).unwrap();
        assert_eq!(a, b);
        for m in [&head.f_out1, &head.f_out2] {
            let (r, c) = store.value(m.layers[0].weight).shape();
            *store.value_mut(m.layers[0].weight) = Tensor2::zeros(r, c);
            *store.value_mut(m.layers[0].bias) = Tensor2::row_vector(&[1.0, 2.0, 3.0]);
        }
        let (a, b, c) = output_heads(&head, &store, &x, &[0.0; 8], &[5.0, 5.0]).unwrap();
        assert_eq!(
            (a.clone(), b, c),
            (vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0])
        );
    }
}
