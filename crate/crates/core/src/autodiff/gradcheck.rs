//! Central-difference verification of analytic gradients.

use crate::autodiff::params::{Graph, ParamStore};
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `f` at `theta`
/// for every coordinate.
pub fn finite_diff_check<F>(f: F, theta: &[f64], analytic: &[f64], h: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let coords: Vec<usize> = (0..theta.len()).collect();
    finite_diff_check_at(f, theta, analytic, h, &coords)
}

/// Like [`finite_diff_check`], restricted to the listed coordinates.
pub fn finite_diff_check_at<F>(mut f: F, theta: &[f64], analytic: &[f64], h: f64, coords: &[usize]) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if theta.len() != analytic.len() {
        return Err(Error::shape("finite_diff_check", format!("{} params vs {} grads", theta.len(), analytic.len())));
    }
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Invalid(format!("step {h} outside [1e-7, 1e-4]")));
    }
    let mut probe = theta.to_vec();
    let mut report = GradCheck { max_rel_error: 0.0, worst_index: 0, checked: 0 };
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe)?;
        probe[i] = orig - h;
        let minus = f(&probe)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if report.checked == 0 || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Checks every input coordinate of a tape-built scalar function.
///
/// `build` receives fresh gradient-tracking leaves for `inputs` and must
/// return a scalar node.
pub fn check_tape_gradients<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.variable(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        let value = tape.value(out).item();
        let mut grads = Vec::new();
        if with_grad {
            tape.backward(out)?;
            for (v, t) in vars.iter().zip(values) {
                grads.push(tape.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())));
            }
        }
        Ok((value, grads))
    };

    let (_, grads) = eval(inputs, true)?;
    let theta: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let analytic: Vec<f64> = grads.iter().flat_map(|t| t.data().iter().copied()).collect();
    let unflatten = |flat: &[f64]| -> Vec<Tensor> {
        let mut off = 0;
        inputs
            .iter()
            .map(|t| {
                let n = t.numel();
                let out = Tensor::new(t.shape(), flat[off..off + n].to_vec()).expect("shape");
                off += n;
                out
            })
            .collect()
    };
    finite_diff_check(|flat| Ok(eval(&unflatten(flat), false)?.0), &theta, &analytic, h)
}

/// Worst error for one named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub check: GradCheck,
}

/// Finite-difference check of a scalar objective built on a [`Graph`]
/// against every parameter of `store`.
///
/// When `max_coords` is set, at most that many evenly spaced coordinates of
/// each parameter tensor are probed.
pub fn check_param_gradients<F>(store: &ParamStore, h: f64, max_coords: Option<usize>, build: F) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = build(&mut g)?;
    g.backward(loss)?;
    let grads = g.gradients();
    drop(g);

    let mut probe = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.get(id).value.numel();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => (0..m).map(|j| (j * n) / m + (n / m) / 2).map(|c| c.min(n - 1)).collect(),
            _ => (0..n).collect(),
        };
        let theta = store.get(id).value.data().to_vec();
        let analytic = grads.get(id).data().to_vec();
        let check = finite_diff_check_at(
            |values| {
                probe.get_mut(id).value.data_mut().copy_from_slice(values);
                let mut g = Graph::new(&probe);
                let loss = build(&mut g)?;
                Ok(g.value(loss).item())
            },
            &theta,
            &analytic,
            h,
            &coords,
        )?;
        probe.get_mut(id).value.data_mut().copy_from_slice(&theta);
        out.push(ParamCheck { name: store.get(id).name.clone(), check });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let theta = [0.3, -1.2, 4.0];
        let r = finite_diff_check(|t| Ok(t.iter().sum()), &theta, &[1.0, 1.0, 1.0], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn square_sum_gradient() {
        let theta = [1.0, 2.0];
        let f = |t: &[f64]| Ok(t.iter().map(|v| v * v).sum());
        let good = finite_diff_check(f, &theta, &[2.0, 4.0], 1e-5).unwrap();
        assert!(good.max_rel_error < 1e-8);
        let bad = finite_diff_check(f, &theta, &[2.0, 5.0], 1e-5).unwrap();
        assert!(bad.max_rel_error > 0.1);
        assert_eq!(bad.worst_index, 1);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let r = finite_diff_check(|t| Ok(t[0].ln()), &[0.0], &[1.0], 1e-5);
        assert!(r.is_err());
    }

    #[test]
    fn step_outside_range_rejected() {
        assert!(finite_diff_check(|t| Ok(t[0]), &[0.0], &[1.0], 1e-2).is_err());
    }
}
