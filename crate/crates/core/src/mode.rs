use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::{c, Real};

/// Evaluation or training forward pass.
///
/// Training mode carries the random stream used for dropout masks; the
/// backbone also switches to batch statistics.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    /// Inverted-dropout mask (`0` or `1/(1-rate)`); `None` when inactive.
    pub(crate) fn dropout_mask<T: Real>(&mut self, len: usize, rate: f64) -> Option<Vec<T>> {
        match self {
            Mode::Train(rng) if rate > 0.0 => {
                let keep = c::<T>(1.0 / (1.0 - rate));
                Some(
                    (0..len)
                        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
                        .collect(),
                )
            }
            _ => None,
        }
    }
}
