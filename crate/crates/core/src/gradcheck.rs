//! Central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Relative error used for every coordinate: `|a − b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Compares the tape gradient of `f` at `params` against central differences
/// `(f(θ+eps) − f(θ−eps)) / 2eps` on every coordinate.
///
/// `f` receives a fresh tape and one leaf per entry of `params` (in order)
/// and must return a scalar node. It is evaluated twice at the base point;
/// any bitwise difference is reported as an oracle error.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_check_at(f, params, eps, None)
}

/// As [`finite_diff_check`], restricted to `coords[i]` (flat indices) of
/// parameter `i` when given.
pub fn finite_diff_check_at<F>(
    mut f: F,
    params: &[Tensor],
    eps: f64,
    coords: Option<&[Vec<usize>]>,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if let Some(c) = coords {
        if c.len() != params.len() {
            return Err(Error::Oracle(format!("{} coordinate lists for {} parameters", c.len(), params.len())));
        }
        if let Some((i, bad)) = c
            .iter()
            .enumerate()
            .find_map(|(i, l)| l.iter().find(|&&k| k >= params[i].len()).map(|&k| (i, k)))
        {
            return Err(Error::Oracle(format!("coordinate {bad} out of range for parameter {i}")));
        }
    }
    if !eps.is_finite() || eps <= 0.0 {
        return Err(Error::Oracle(format!("eps must be positive, got {eps}")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let base = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut eval = |point: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let again = eval(params)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Oracle(format!(
            "objective is not deterministic: {base:e} then {again:e}"
        )));
    }

    let mut point: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (pi, g) in analytic.iter().enumerate() {
        let all: Vec<usize>;
        let which = match coords {
            Some(c) => &c[pi],
            None => {
                all = (0..g.len()).collect();
                &all
            }
        };
        for &ci in which {
            let orig = point[pi].data()[ci];
            point[pi].data_mut()[ci] = orig + eps;
            let plus = eval(&point)?;
            point[pi].data_mut()[ci] = orig - eps;
            let minus = eval(&point)?;
            point[pi].data_mut()[ci] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(g.data()[ci], numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((pi, ci));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = finite_diff_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn linear_is_exact_to_roundoff() {
        let w = Tensor::from_rows(&[&[0.5, -1.25], &[2.0, 0.75]]);
        let r = finite_diff_check(
            move |t, v| {
                let c = t.constant(w.clone());
                let y = t.matmul(c, v[0])?;
                Ok(t.sum(y))
            },
            &[Tensor::from_rows(&[&[1.0], &[-3.0]])],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn rejects_bad_eps_and_nondeterminism() {
        let f = |t: &mut Tape, v: &[Var]| Ok(t.sum(v[0]));
        assert!(finite_diff_check(f, &[Tensor::scalar(1.0)], 0.0).is_err());

        let mut calls = 0.0;
        let noisy = |t: &mut Tape, v: &[Var]| {
            calls += 1.0;
            let y = t.scale(v[0], 1.0 + 1e-3 * calls);
            Ok(t.sum(y))
        };
        assert!(matches!(
            finite_diff_check(noisy, &[Tensor::scalar(1.0)], 1e-5),
            Err(Error::Oracle(_))
        ));
    }
}
