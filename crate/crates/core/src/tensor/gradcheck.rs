use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|g_tape - g_numeric| / max(|g_tape|, 1e-8)` over all entries.
    pub max_rel_err: f64,
    /// `(parameter index, element index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares tape gradients of the scalar `f` against central differences
/// with step `eps`, element by element, over every parameter.
///
/// `f` receives a tape and the parameter handles and returns the loss
/// handle. It is called once on a recording tape and twice per element on
/// non-recording tapes.
pub fn finite_diff_check<T, F>(f: F, params: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();

    let eval = |ps: &[Tensor<T>]| -> Result<f64> {
        let mut t = Tape::no_grad();
        let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone(), false)).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item()?.as_f64())
    };

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for pi in 0..params.len() {
        for ei in 0..params[pi].numel() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + T::of_f64(eps);
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - T::of_f64(eps);
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let g = analytic[pi].data()[ei].as_f64();
            if !numeric.is_finite() || !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "gradient check hit a non-finite value at parameter {pi}, element {ei}"
                )));
            }
            let rel = (g - numeric).abs() / g.abs().max(1e-8);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
