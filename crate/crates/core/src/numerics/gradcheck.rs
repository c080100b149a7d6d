//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const FD_EPS: f64 = 1e-6;

/// Builds an op on fresh leaves, reduces it to a scalar with a fixed random
/// projection and returns the worst norm-wise relative error between the
/// analytic gradient and central differences, over all inputs.
pub fn gradient_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let proj = {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
        let out = build(&mut t, &vs)?;
        Tensor::uniform(t.shape(out), 1.0, &mut ChaCha8Rng::seed_from_u64(99))
    };
    let record = |xs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let pv = tape.constant(proj.clone());
        let h = tape.hadamard(out, pv)?;
        let s = tape.sum(h);
        Ok((tape, vars, s))
    };
    let (tape, vars, loss) = record(inputs)?;
    let grads = tape.backward(loss)?;
    let value = |xs: &[Tensor]| -> Result<f64> {
        let (t, _, l) = record(xs)?;
        Ok(t.value(l).data()[0])
    };
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mut numeric = Tensor::zeros(x.shape());
        for j in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_EPS;
            numeric.data_mut()[j] = (value(&plus)? - value(&minus)?) / (2.0 * FD_EPS);
        }
        let diff = analytic.data().iter().zip(numeric.data()).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.sq_norm().sqrt().max(numeric.sq_norm().sqrt()).max(1e-12);
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}

/// Check on `samples` randomly chosen scalars of `params`, returning the
/// norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)` over the sampled
/// analytic (`a`) and central-difference (`n`) derivatives.
///
/// `loss` evaluates the scalar objective for a parameter set and returns the
/// tape, the leaf handle of every parameter and the loss handle.
pub fn sampled_gradient_check(
    params: &[Tensor],
    samples: usize,
    seed: u64,
    loss: impl Fn(&[Tensor]) -> Result<(Tape, Vec<Var>, Var)>,
) -> Result<f64> {
    let (tape, vars, l) = loss(params)?;
    let grads = tape.backward(l)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for _ in 0..samples {
        let pi = rng.random_range(0..params.len());
        let j = rng.random_range(0..params[pi].numel());
        let analytic = grads.get(vars[pi]).map_or(0.0, |g| g.data()[j]);
        let eval = |delta: f64| -> Result<f64> {
            let mut p = params.to_vec();
            p[pi].data_mut()[j] += delta;
            let (t, _, l) = loss(&p)?;
            Ok(t.value(l).data()[0])
        };
        let numeric = (eval(FD_EPS)? - eval(-FD_EPS)?) / (2.0 * FD_EPS);
        diff += (analytic - numeric).powi(2);
        na += analytic * analytic;
        nn += numeric * numeric;
    }
    Ok(diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12))
}
