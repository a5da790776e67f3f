use super::{Graph, Mode, OpKind, Tensor};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use rand::Rng;

/// Largest relative disagreement between the analytic gradient of `op` and
/// a central finite difference, over every element of every input.
///
/// The scalar probed is `sum(w * op(inputs))` with fixed pseudo-random
/// weights `w`, so every output element carries a distinct upstream
/// gradient. Relative error is `|a - fd| / max(|a|, |fd|, 1e-8)`.
pub fn grad_check(op: &OpKind, inputs: &[Tensor], eps: f64, mode: Mode, rng_seed: u64) -> Result<f64> {
    grad_check_fn(inputs, eps, |g, vars| {
        g.apply(op, vars, mode, rng_seed)
    })
}

/// Finite-difference check of an arbitrary graph-building closure.
pub fn grad_check_fn<F>(inputs: &[Tensor], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[super::Var]) -> Result<super::Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("eps {eps} outside (0, 1e-2]")));
    }
    let probe = |ins: &[Tensor]| -> Result<(Graph, super::Var, Vec<super::Var>)> {
        let mut g = Graph::new();
        let vars = ins.iter().map(|t| g.param(t)).collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        let n = g.value(out).len();
        let loss = if n == 1 {
            out
        } else {
            let mut rng = rng_for(0x5EED, &[n as u64]);
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wt = Tensor::new(g.shape(out).to_vec(), w)?;
            let wv = g.input(wt)?;
            let prod = g.mul(out, wv)?;
            g.sum(prod)?
        };
        Ok((g, loss, vars))
    };
    let (mut g, loss, vars) = probe(inputs)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|s| s.to_vec()).unwrap_or_default();
        for e in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[e];
            work[ti].data_mut()[e] = orig + eps;
            let (gp, lp, _) = probe(&work)?;
            work[ti].data_mut()[e] = orig - eps;
            let (gm, lm, _) = probe(&work)?;
            work[ti].data_mut()[e] = orig;
            let (fp, fm) = (gp.data(lp)[0], gm.data(lm)[0]);
            let fd = (fp - fm) / (2.0 * eps);
            if !fd.is_finite() {
                return Err(Error::non_finite("finite-difference probe"));
            }
            let a = analytic[e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
