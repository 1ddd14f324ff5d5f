//! Seeded inverted dropout for training traces.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::Result;

/// Dropout state for one forward pass. In evaluation mode it is a no-op.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn eval() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let n = tape.value(x).data().len();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect();
        tape.dropout(x, mask)
    }
}
