//! Central finite-difference verification of tape gradients.

use super::{Binder, ModelParams, Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so entries whose true
/// gradient is ~0 are judged by absolute error at this scale.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Worst-case agreement for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn evaluate<F>(params: &ModelParams, loss: &F) -> Result<f64>
where
    F: Fn(&Tape, &Binder) -> Result<Var>,
{
    let tape = Tape::new();
    let binder = Binder::new(params);
    let v = loss(&tape, &binder)?;
    let x = tape.item(v);
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {x}")));
    }
    Ok(x)
}

/// Compares the tape gradient of `loss` against central differences for
/// every entry of every parameter. Passes iff the largest relative error
/// is at most `tol`.
pub fn finite_diff_check<F>(
    params: &ModelParams,
    step: f64,
    tol: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &Binder) -> Result<Var>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::contract(format!(
            "finite-difference step {step} outside (0, 1e-2]"
        )));
    }
    let tape = Tape::new();
    let binder = Binder::new(params);
    let out = loss(&tape, &binder)?;
    let base = tape.item(out);
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {base}")));
    }
    let grads = tape.backward(out)?;
    let analytic = binder.gradients(&grads);

    let mut report = Vec::new();
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (name, p) in params.iter() {
        let n = p.tensor.numel();
        let a = analytic.get(name);
        let mut check = ParamCheck {
            name: name.to_string(),
            entries: n,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..n {
            let orig = p.tensor.data()[i];
            probe.get_mut(name).unwrap().tensor.data_mut()[i] = orig + step;
            let up = evaluate(&probe, &loss)?;
            probe.get_mut(name).unwrap().tensor.data_mut()[i] = orig - step;
            let down = evaluate(&probe, &loss)?;
            probe.get_mut(name).unwrap().tensor.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let an = a.map(|g| g[i]).unwrap_or(0.0);
            let err = relative_error(an, numeric);
            if err > check.max_rel_error || i == 0 {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = an;
                check.numeric = numeric;
            }
        }
        worst = worst.max(check.max_rel_error);
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        max_rel_error: worst,
        tol,
        passed: worst <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamKind, Tensor};

    #[test]
    fn sum_of_squares_is_exact() {
        let mut p = ModelParams::new();
        p.insert(
            "x",
            Tensor::vector(vec![0.7, -1.3, 2.1]).unwrap(),
            ParamKind::Weight,
        )
        .unwrap();
        let r = finite_diff_check(&p, 1e-5, 1e-9, |t, b| {
            let x = b.get(t, "x")?;
            Ok(t.sq_l2(x))
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn rejects_bad_step() {
        let p = ModelParams::new();
        let r = finite_diff_check(&p, 0.1, 1e-4, |t, _| Ok(t.constant(&Tensor::scalar(1.0))));
        assert!(r.is_err());
    }

    #[test]
    fn aborts_on_non_finite() {
        let mut p = ModelParams::new();
        p.insert(
            "x",
            Tensor::vector(vec![f64::MAX]).unwrap(),
            ParamKind::Weight,
        )
        .unwrap();
        let r = finite_diff_check(&p, 1e-5, 1e-4, |t, b| {
            let x = b.get(t, "x")?;
            Ok(t.sq_l2(x))
        });
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
