use super::tape::{Tape, Tensor, Var};
use super::DiffError;

/// Outcome for one checked parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum CheckStatus {
    /// Analytic and central-difference gradients were compared elementwise.
    Checked { max_rel_err: f64 },
    /// The parameter reaches the output only through non-differentiable ops,
    /// so there is no analytic gradient to compare. Excluded from pass/fail.
    NonDifferentiable,
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub status: CheckStatus,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    /// Largest relative error across all checked parameters.
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| match p.status {
                CheckStatus::Checked { max_rel_err } => Some(max_rel_err),
                CheckStatus::NonDifferentiable => None,
            })
            .fold(0.0, f64::max)
    }

    /// True when every checked parameter is within `tol`.
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }
}

/// Relative error with a small floor so that near-zero gradients are compared
/// absolutely at `floor * err` scale rather than blowing up.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Compares the tape's reverse-mode gradients against central finite
/// differences of step `step`, for every parameter in `params`.
///
/// `build` must be a pure function of the bound parameter values: it is
/// re-invoked many times with perturbed copies, and any internal randomness
/// would show up as gradient noise. Parameters that reach the output only
/// through non-differentiable ops (e.g. row argmax) are reported as
/// [`CheckStatus::NonDifferentiable`] and excluded from the error summary.
pub fn grad_check<F>(
    build: F,
    params: &[(&str, Tensor)],
    step: f64,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, v)| tape.param(v.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let base: Vec<Tensor> = params.iter().map(|(_, v)| v.clone()).collect();
    let mut report = Vec::with_capacity(params.len());
    for (i, (name, value)) in params.iter().enumerate() {
        let analytic = match grads.get(vars[i]) {
            Some(g) => g.clone(),
            None if tape.reaches(vars[i], out) => {
                report.push(ParamCheck {
                    name: name.to_string(),
                    status: CheckStatus::NonDifferentiable,
                });
                continue;
            }
            None => Tensor::zeros(value.shape().to_vec()),
        };
        let mut max_err = 0.0f64;
        let flat_len = value.len();
        for j in 0..flat_len {
            let mut plus = base.clone();
            let mut minus = base.clone();
            *plus[i].iter_mut().nth(j).expect("in bounds") += step;
            *minus[i].iter_mut().nth(j).expect("in bounds") -= step;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = *analytic.iter().nth(j).expect("in bounds");
            max_err = max_err.max(rel_err(a, fd));
        }
        report.push(ParamCheck {
            name: name.to_string(),
            status: CheckStatus::Checked {
                max_rel_err: max_err,
            },
        });
    }
    Ok(GradCheckReport { params: report })
}
