use super::params::{ParamSet, ParamVars};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst component.
    pub worst: Option<(String, usize)>,
    pub components: usize,
}

fn evaluate<F>(objective: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss = objective(&mut tape, &vars)?;
    let v = tape
        .value(loss)
        .item()
        .ok_or_else(|| Error::shape("objective must return a scalar"))?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Checks every scalar parameter component against `(f(x+h) - f(x-h)) / 2h`.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(objective: F, params: &ParamSet, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss = objective(&mut tape, &vars)?;
    let value = tape
        .value(loss)
        .item()
        .ok_or_else(|| Error::shape("objective must return a scalar"))?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {value}")));
    }
    let analytic = tape.backward(loss)?;
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        components: 0,
    };
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let g = analytic
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let plus = evaluate(&objective, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let minus = evaluate(&objective, &probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = g.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.components += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn square_matches_closely() {
        let mut p = ParamSet::new();
        p.insert("theta", Tensor::scalar(3.0));
        let r = grad_check(
            |tape, vars| {
                let t = vars["theta"];
                tape.mul(t, t)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.components, 1);
    }

    #[test]
    fn linear_objective_is_at_noise_level() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_fn(&[5], |i| i as f64 * 0.3 - 1.0));
        let r = grad_check(
            |tape, vars| {
                let s = tape.scale(vars["w"], 2.5);
                Ok(tape.sum(s))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn non_finite_objective_fails() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(1.0));
        let r = grad_check(
            |tape, vars| Ok(tape.scale(vars["w"], f64::INFINITY)),
            &p,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
