//! Scalar and vector kernels shared by the tape and the plain evaluators.

use super::tensor::Tensor2;
use crate::error::{Error, Result};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x), returning x itself once e^x would swamp the 1.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 36.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Max-subtracted softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn softplus_t(x: &Tensor2) -> Tensor2 {
    x.map(softplus)
}

/// Per-row standardisation followed by `gain ⊙ · + bias`.
pub fn layer_norm(x: &Tensor2, gain: &[f64], bias: &[f64], eps: f64) -> Result<Tensor2> {
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(Error::Dimension(format!(
            "layer norm over {} columns with gain {} / bias {}",
            x.cols(),
            gain.len(),
            bias.len()
        )));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let (xhat, _) = standardize(x.row(r), eps);
        let row = out.row_mut(r);
        for (j, v) in row.iter_mut().enumerate() {
            *v = xhat[j] * gain[j] + bias[j];
        }
    }
    Ok(out)
}

/// Returns the standardised row and 1/sqrt(var + eps).
pub(crate) fn standardize(row: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    (row.iter().map(|v| (v - mean) * inv).collect(), inv)
}

/// `(eˣ, eˣ − 1)` for `x ≤ 0`, both to about 1e-14 relative error.
/// Branch-free so the slice loops below vectorise; inputs below −700
/// are clamped, where `eˣ` is already negligible.
#[inline(always)]
pub fn exp_expm1_nonpos(x: f64) -> (f64, f64) {
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const INV_LN2: f64 = std::f64::consts::LOG2_E;
    // adding 1.5·2⁵² rounds to an integer held in the low mantissa bits
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let xc = x.max(-700.0);

    // eˣ − 1 = x·(1 + x/2 + … + x⁶/7!) near zero, where e − 1 would cancel
    let mut q = INV_FACT[7];
    for k in (1..7).rev() {
        q = q * xc + INV_FACT[k];
    }
    let em1_small = xc * q;

    let t = xc * INV_LN2 + SHIFT;
    let kf = t - SHIFT;
    let r = (xc - kf * LN2_HI) - kf * LN2_LO;
    let mut p = INV_FACT[12];
    for k in (0..12).rev() {
        p = p * r + INV_FACT[k];
    }
    let ki = (t.to_bits() as i64).wrapping_sub(SHIFT.to_bits() as i64);
    let scale = f64::from_bits(((ki + 1023) as u64) << 52);
    let e_large = p * scale;

    let small = xc > -0.01;
    let e = if small { 1.0 + em1_small } else { e_large };
    let em1 = if small { em1_small } else { e_large - 1.0 };
    (e, em1)
}

/// 1/k! for k = 0 … 12.
const INV_FACT: [f64; 13] = [
    1.0,
    1.0,
    0.5,
    0.16666666666666666,
    0.041666666666666664,
    0.008333333333333333,
    0.001388888888888889,
    0.0001984126984126984,
    2.48015873015873e-05,
    2.7557319223985893e-06,
    2.755731922398589e-07,
    2.505210838544172e-08,
    2.08767569878681e-09,
];

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softplus_reference_points() {
        assert_abs_diff_eq!(softplus(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(softplus(100.0), 100.0, epsilon = 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn softplus_derivative_is_sigmoid() {
        let h = 1e-6;
        for &x in &[-7.3, -1.0, -0.2, 0.0, 0.4, 2.5, 9.0] {
            let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert!((fd - sigmoid(x)).abs() < 1e-8, "x={x} fd={fd}");
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        let h = 1e-6;
        for &x in &[-3.0, -0.7, 0.0, 0.3, 1.9] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_edge_cases() {
        let u = softmax(&[3.0; 5]);
        for v in &u {
            assert_abs_diff_eq!(*v, 0.2, epsilon = 1e-15);
        }
        let s = softmax(&[1000.0, 0.0]);
        assert!(s.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(s[0], 1.0, epsilon = 1e-15);
        assert!(s[1] < 1e-300);
    }

    #[test]
    fn layer_norm_cases() {
        let x = Tensor2::from_rows(&[vec![4.0, 4.0, 4.0], vec![1.0, -1.0, 0.0]]).unwrap();
        let y = layer_norm(&x, &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert!(y.row(0).iter().all(|v| v.abs() < 1e-12));
        let two = Tensor2::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let y2 = layer_norm(&two, &[1.0; 2], &[0.0; 2], 1e-14).unwrap();
        assert_abs_diff_eq!(y2.get(0, 0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y2.get(0, 1), -1.0, epsilon = 1e-12);
        assert!(layer_norm(&x, &[1.0; 2], &[0.0; 3], 1e-5).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_monotone(x in prop::collection::vec(-50.0f64..50.0, 6)) {
            let s = softmax(&x);
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.iter().all(|v| *v > 0.0));
            for i in 0..6 {
                for j in 0..6 {
                    if x[i] > x[j] {
                        prop_assert!(s[i] >= s[j]);
                    }
                }
            }
        }

        #[test]
        fn layer_norm_moments(row in prop::collection::vec(-10.0f64..10.0, 8)) {
            prop_assume!(row.iter().any(|v| (v - row[0]).abs() > 1e-3));
            let x = Tensor2::from_rows(&[row]).unwrap();
            let y = layer_norm(&x, &[1.0; 8], &[0.0; 8], 1e-12).unwrap();
            let mean = y.row(0).iter().sum::<f64>() / 8.0;
            let var = y.row(0).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fused_exponential_matches_libm() {
        let mut x = 0.0f64;
        while x > -700.0 {
            let (e, m) = exp_expm1_nonpos(x);
            let (re, rm) = (x.exp(), x.exp_m1());
            assert!((e - re).abs() <= 1e-14 * re.max(1e-300), "exp {x}: {e} vs {re}");
            assert!((m - rm).abs() <= 1e-14 * rm.abs().max(1e-300), "expm1 {x}: {m} vs {rm}");
            x = if x > -1e-3 { x - 1.7e-6 } else { x * 1.013 - 1e-3 };
        }
        assert_eq!(exp_expm1_nonpos(0.0), (1.0, 0.0));
        let (e, m) = exp_expm1_nonpos(-1e4);
        assert!(e < 1e-300 && m == -1.0);
    }
}
