//! Central finite-difference verification of tape gradients.

use super::param::ParamStore;
use super::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `(parameter name, relative error)` for every parameter tensor.
    pub per_param: Vec<(String, f64)>,
    /// Number of scalar entries perturbed.
    pub checked: usize,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn assert_within(&self, tol: f64) {
        for (name, e) in &self.per_param {
            assert!(*e < tol, "gradient of {name}: relative error {e:e} ≥ {tol:e}");
        }
    }
}

/// Compares the tape gradient of `forward` (a scalar) with central
/// differences of step `h`, per parameter tensor:
/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-8)`.
pub fn check_gradients<F>(store: &ParamStore, forward: F, h: f64) -> GradCheck
where
    F: Fn(&mut Tape) -> Var,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = forward(&mut tape);
        tape.backward(loss).expect("backward")
    };
    let eval = |s: &ParamStore| {
        let mut tape = Tape::new(s);
        let loss = forward(&mut tape);
        tape.value(loss).get(0, 0)
    };
    let mut work = store.clone();
    let mut per_param = Vec::new();
    let mut checked = 0;
    for (id, p) in store.iter() {
        let a = analytic.get_or_zeros(id, &p.value);
        let mut diff2 = 0.0;
        let mut num2 = 0.0;
        for i in 0..p.value.data().len() {
            let orig = p.value.data()[i];
            work.value_mut(id).data_mut()[i] = orig + h;
            let up = eval(&work);
            work.value_mut(id).data_mut()[i] = orig - h;
            let down = eval(&work);
            work.value_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            diff2 += (a.data()[i] - fd).powi(2);
            num2 += fd * fd;
            checked += 1;
        }
        let denom = a.frobenius().max(num2.sqrt()).max(1e-8);
        per_param.push((p.name.clone(), diff2.sqrt() / denom));
    }
    GradCheck { per_param, checked }
}
