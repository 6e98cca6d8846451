use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares tape gradients of `f` against central finite differences.
///
/// Returns the largest `|g_ad − g_fd| / max(1, |g_fd|)` over every coordinate
/// of every parameter tensor.
pub fn grad_check<F>(f: F, params: &[Tensor], fd_step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(fd_step > 0.0) {
        return Err(Error::Parameter(format!("fd_step must be > 0, got {fd_step}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(&tape, *v)).collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, g_ad) in analytic.iter().enumerate() {
        for k in 0..work[pi].len() {
            let orig = work[pi].values()[k];
            work[pi].values_mut()[k] = orig + fd_step;
            let up = eval(&work)?;
            work[pi].values_mut()[k] = orig - fd_step;
            let down = eval(&work)?;
            work[pi].values_mut()[k] = orig;
            let g_fd = (up - down) / (2.0 * fd_step);
            let err = (g_ad.values()[k] - g_fd).abs() / g_fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
