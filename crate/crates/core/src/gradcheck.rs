//! Central finite-difference checks of tape gradients.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{ForwardMode, Tape, Var};
use crate::tensor::Tensor;

/// Which coordinates of each input to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// Up to `n` coordinates per input, chosen with a seeded sampler.
    Sample { n: usize, seed: u64 },
}

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)` for a
/// scalar program of one tensor.
///
/// Both the analytic and the numeric gradient are taken on tapes in `mode`;
/// see [`ForwardMode`] for how surrogate operations are checked against
/// their redefined derivative.
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64, mode: ForwardMode) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradcheck_many(
        |t, vs| f(t, vs[0]),
        std::slice::from_ref(x),
        h,
        mode,
        Coords::All,
    )
}

/// Multi-input version of [`gradcheck`].
pub fn gradcheck_many<F>(
    f: F,
    xs: &[Tensor],
    h: f64,
    mode: ForwardMode,
    coords: Coords,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::with_mode(mode);
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).all_finite() {
        return Err(Error::NonFinite("gradcheck loss".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::with_mode(mode);
        let vs: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        let v = t.value(l).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("gradcheck perturbed loss".into()));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut inputs = xs.to_vec();
    for k in 0..xs.len() {
        let idx: Vec<usize> = match coords {
            Coords::All => (0..xs[k].len()).collect(),
            Coords::Sample { n, seed } => {
                let mut rng = Rng::with_stream(seed, k as u64);
                let len = xs[k].len();
                if n >= len {
                    (0..len).collect()
                } else {
                    (0..n).map(|_| rng.below(len)).collect()
                }
            }
        };
        for i in idx {
            let orig = xs[k].data()[i];
            inputs[k].data_mut()[i] = orig + h;
            let up = eval(&inputs)?;
            inputs[k].data_mut()[i] = orig - h;
            let down = eval(&inputs)?;
            inputs[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k].data()[i];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
