use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over all checked elements of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// Input holding the worst element.
    pub worst: String,
    pub checked: usize,
}

fn evaluate<F>(inputs: &[(String, Tensor)], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    Ok(f64::from(tape.value(out).item()))
}

/// Compares reverse-mode gradients of the scalar `f` against central finite
/// differences with step `epsilon`, for every element of every input.
pub fn grad_check<F>(inputs: &[(&str, Tensor)], epsilon: f32, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [1e-5, 1e-2]")));
    }
    let mut owned: Vec<(String, Tensor)> = inputs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();

    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = owned.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        if !tape.value(out).is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check output at the base point".into(),
            });
        }
        let mut grads = tape.backward(out)?;
        vars.iter()
            .zip(&owned)
            .map(|(&v, (_, t))| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for i in 0..owned.len() {
        if let Some(bad) = analytic[i].data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("analytic gradient of `{}` element {bad}", owned[i].0),
            });
        }
        for j in 0..owned[i].1.numel() {
            let x0 = owned[i].1.data()[j];
            let plus = x0 + epsilon;
            let minus = x0 - epsilon;
            owned[i].1.data_mut()[j] = plus;
            let f_plus = evaluate(&owned, &f)?;
            owned[i].1.data_mut()[j] = minus;
            let f_minus = evaluate(&owned, &f)?;
            owned[i].1.data_mut()[j] = x0;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("perturbed output for `{}` element {j}", owned[i].0),
                });
            }
            let numeric = (f_plus - f_minus) / (f64::from(plus) - f64::from(minus));
            let a = f64::from(analytic[i].data()[j]);
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = owned[i].0.clone();
            }
        }
    }
    Ok(report)
}
