//! Training-time treatments of rounding and clipping.
//!
//! Rounding has zero derivative almost everywhere, so each surrogate keeps
//! (or approximates) the forward quantization and installs a usable
//! backward rule:
//!
//! * `RoundSte` rounds in the forward pass and passes gradients through
//!   unchanged.
//! * `StochasticRound` samples `⌊y⌋ + ε` with `P(ε = 1) = y − ⌊y⌋`; the
//!   backward rule is the derivative of its expectation, i.e. 1.
//! * `AdditiveNoise` replaces rounding by `y + u`, `u ~ U[-.5, .5)`, with
//!   its exact gradient.
//! * `None` skips quantization entirely.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Backward, BackwardCtx, Contributions, ForwardMode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SurrogateMode {
    #[default]
    RoundSte,
    StochasticRound,
    AdditiveNoise,
    None,
}

impl SurrogateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SurrogateMode::RoundSte => "round_ste",
            SurrogateMode::StochasticRound => "stochastic_round",
            SurrogateMode::AdditiveNoise => "additive_noise",
            SurrogateMode::None => "none",
        }
    }

    pub fn to_byte(self) -> u8 {
        match self {
            SurrogateMode::RoundSte => 0,
            SurrogateMode::StochasticRound => 1,
            SurrogateMode::AdditiveNoise => 2,
            SurrogateMode::None => 3,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => SurrogateMode::RoundSte,
            1 => SurrogateMode::StochasticRound,
            2 => SurrogateMode::AdditiveNoise,
            3 => SurrogateMode::None,
            _ => return Err(Error::Format(format!("unknown surrogate mode {b}"))),
        })
    }

    /// Whether the test-time codec quantizes. Only `None` leaves coefficients
    /// real-valued.
    pub fn quantizes_at_test(self) -> bool {
        self != SurrogateMode::None
    }
}

impl fmt::Display for SurrogateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SurrogateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "round_ste" | "ste" => SurrogateMode::RoundSte,
            "stochastic_round" => SurrogateMode::StochasticRound,
            "additive_noise" | "noise" => SurrogateMode::AdditiveNoise,
            "none" => SurrogateMode::None,
            _ => return Err(Error::InvalidArgument(format!("unknown surrogate mode {s:?}"))),
        })
    }
}

/// Round to nearest, ties away from zero.
pub fn round_half_away(y: f64) -> f64 {
    y.round()
}

/// Gradient passes through unchanged.
struct PassThrough {
    x: Var,
    name: &'static str,
}

impl Backward for PassThrough {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, _ctx: &BackwardCtx<'_>, grad: &[f64]) -> Contributions {
        vec![(self.x, grad.to_vec())]
    }
}

impl Tape {
    /// Hard rounding forward, identity backward.
    pub fn round_ste(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = match self.mode() {
            ForwardMode::Exact => self.value(x).map(round_half_away),
            ForwardMode::Reference => self.value(x).clone(),
        };
        Ok(self.record(value, &[x], Box::new(PassThrough { x, name: "round_ste" })))
    }

    /// `⌊y⌋ + Bernoulli(y − ⌊y⌋)` forward, identity backward.
    pub fn stochastic_round(&mut self, x: Var, rng: &mut Rng) -> Result<Var> {
        self.check(x)?;
        let value = match self.mode() {
            ForwardMode::Exact => {
                let mut v = self.value(x).clone();
                for y in v.data_mut() {
                    let fl = y.floor();
                    *y = if rng.uniform() < *y - fl { fl + 1.0 } else { fl };
                }
                v
            }
            ForwardMode::Reference => self.value(x).clone(),
        };
        Ok(self.record(
            value,
            &[x],
            Box::new(PassThrough {
                x,
                name: "stochastic_round",
            }),
        ))
    }

    /// Clamp to `[lo, hi]` forward; gradient is 1 everywhere, including
    /// outside the range.
    pub fn clip_st(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.check(x)?;
        if lo >= hi {
            return Err(Error::InvalidArgument(format!(
                "clip bounds must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        let value = match self.mode() {
            ForwardMode::Exact => self.value(x).map(|v| v.clamp(lo, hi)),
            ForwardMode::Reference => self.value(x).clone(),
        };
        Ok(self.record(value, &[x], Box::new(PassThrough { x, name: "clip_st" })))
    }
}

/// Apply the training-time treatment of quantization selected by `mode`.
pub fn quantize_surrogate(tape: &mut Tape, y: Var, mode: SurrogateMode, rng: &mut Rng) -> Result<Var> {
    match mode {
        SurrogateMode::RoundSte => tape.round_ste(y),
        SurrogateMode::StochasticRound => tape.stochastic_round(y, rng),
        SurrogateMode::AdditiveNoise => {
            let u = uniform_noise(tape.value(y).shape(), rng);
            let u = tape.constant(u);
            tape.add(y, u)
        }
        SurrogateMode::None => Ok(y),
    }
}

/// `U[-.5, .5)` noise of the given shape.
pub fn uniform_noise(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.uniform() - 0.5;
    }
    t
}
