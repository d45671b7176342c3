//! Central finite differences, the independent oracle for every adjoint.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::Result;
use crate::params::{Binding, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default step for central differences in f64.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = x.zeros_like();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Result of checking one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Compares the tape gradient of `loss` with finite differences for every
/// parameter selected by `trainable`.
///
/// `loss` builds the scalar on a fresh tape from bound parameters; it must
/// be deterministic. `make_tape` lets callers install a backward fault.
pub fn check_params<F>(
    params: &ParamSet,
    trainable: impl Fn(&str) -> bool + Copy,
    make_tape: impl Fn() -> Tape,
    mut loss: F,
    h: f64,
    tolerance: f64,
) -> Result<Vec<TensorCheck>>
where
    F: FnMut(&mut Tape, &Binding) -> Result<Var>,
{
    let mut tape = make_tape();
    let bind = params.bind(&mut tape, trainable);
    let l = loss(&mut tape, &bind)?;
    tape.backward(l)?;
    let analytic = bind.gradients(&tape, params);

    let mut eval = |ps: &ParamSet| -> Result<f64> {
        let mut t = Tape::new();
        let b = ps.bind(&mut t, |_| false);
        let v = loss(&mut t, &b)?;
        Ok(t.value(v).item().unwrap_or(f64::NAN))
    };

    let mut work = params.clone();
    let mut report = Vec::new();
    for (id, name, value) in params.iter() {
        if !trainable(name) {
            continue;
        }
        let mut numeric = value.zeros_like();
        for i in 0..value.len() {
            let orig = value.data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            numeric.data_mut()[i] = (up - down) / (2.0 * h);
        }
        let err = max_relative_error(&analytic[id.index()], &numeric);
        report.push(TensorCheck {
            name: name.to_string(),
            len: value.len(),
            max_rel_error: err,
            passed: err <= tolerance,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_sum_has_unit_gradient() {
        let x = Tensor::new(&[4], alloc::vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, 1e-5);
        assert!(g.data().iter().all(|v| (v - 1.0).abs() <= 1e-9));
    }

    #[test]
    fn half_square_gradient_is_x() {
        let x = Tensor::new(&[2], alloc::vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| 0.5 * t.data().iter().map(|v| v * v).sum::<f64>(), &x, 1e-5);
        assert!((g.data()[0] - 1.0).abs() <= 1e-8);
        assert!((g.data()[1] - 2.0).abs() <= 1e-8);
    }

    #[test]
    fn relative_error_uses_unit_floor() {
        assert_eq!(relative_error(1e-9, 0.0), 1e-9);
        assert!((relative_error(100.0, 101.0) - 1.0 / 101.0).abs() < 1e-15);
    }
}
