//! Central finite-difference verification of tape gradients.

use super::{OpKind, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Per-leaf maximum relative error between analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub per_leaf: Vec<(String, f64)>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_leaf.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub h: f64,
    pub fault: Option<OpKind>,
}

impl GradCheck {
    pub fn new(h: f64) -> Self {
        GradCheck { h, fault: None }
    }

    /// Runs the analytic pass with a sign-flipped backward rule for `kind`.
    pub fn with_fault(mut self, kind: OpKind) -> Self {
        self.fault = Some(kind);
        self
    }

    /// Compares `backward` against central differences for every coordinate
    /// of every named leaf in `point`. `f` receives the leaves, in order, as
    /// differentiable variables and must return a scalar.
    pub fn run<F>(&self, point: &[(&str, Tensor)], f: F) -> Result<GradReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        if !(self.h > 0.0) {
            return Err(Error::Config(format!("grad_check step {} must be > 0", self.h)));
        }
        let mut tape = Tape::new();
        if let Some(kind) = self.fault {
            tape.inject_sign_fault(kind);
        }
        let vars: Vec<Var> = point.iter().map(|(_, t)| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;

        let eval = |values: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
            let out = f(&mut tape, &vars)?;
            let v = tape.value(out).item()?;
            if !v.is_finite() {
                return Err(Error::NonFinite("grad_check probe".into()));
            }
            Ok(v)
        };

        let mut values: Vec<Tensor> = point.iter().map(|(_, t)| t.clone()).collect();
        let mut per_leaf = Vec::with_capacity(point.len());
        for (leaf, (name, _)) in point.iter().enumerate() {
            let analytic = grads.get(vars[leaf]).expect("leaf gradient").data().to_vec();
            let mut worst = 0.0f64;
            for (coord, &a) in analytic.iter().enumerate() {
                let orig = values[leaf].data()[coord];
                values[leaf].data_mut()[coord] = orig + self.h;
                let plus = eval(&values);
                values[leaf].data_mut()[coord] = orig - self.h;
                let minus = eval(&values);
                values[leaf].data_mut()[coord] = orig;
                let numeric = (plus? - minus?) / (2.0 * self.h);
                worst = worst.max(relative_error(a, numeric));
            }
            per_leaf.push((name.to_string(), worst));
        }
        Ok(GradReport { per_leaf })
    }
}

/// [`GradCheck::run`] with no fault injection.
pub fn grad_check<F>(f: F, point: &[(&str, Tensor)], h: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    GradCheck::new(h).run(point, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_nearly_exact() {
        let report = grad_check(
            |t, v| t.mul(v[0], v[0]).and_then(|y| t.sum(y)),
            &[("x", Tensor::scalar(2.0))],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let report = grad_check(
            |t, v| {
                let z = t.scale(v[0], 0.0)?;
                t.sum(z)
            },
            &[("x", Tensor::vector(vec![1.0, -2.0]).unwrap())],
            1e-3,
        )
        .unwrap();
        assert_eq!(report.max_rel_error(), 0.0);
    }

    #[test]
    fn sign_fault_is_detected() {
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.relu(v[0])?;
            let y = t.mul(y, y)?;
            t.sum(y)
        };
        let x = Tensor::vector(vec![0.7, 1.3]).unwrap();
        let clean = GradCheck::new(1e-5).run(&[("x", x.clone())], f).unwrap();
        assert!(clean.max_rel_error() < 1e-6);
        let faulty = GradCheck::new(1e-5)
            .with_fault(OpKind::Relu)
            .run(&[("x", x)], f)
            .unwrap();
        assert!(faulty.max_rel_error() > 0.5);
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let err = grad_check(
            |t, v| {
                let y = t.ln_eps(v[0], 0.0)?;
                t.sum(y)
            },
            &[("x", Tensor::scalar(1e-4))],
            1e-3,
        );
        assert!(err.is_err());
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(grad_check(|t, v| t.sum(v[0]), &[("x", Tensor::scalar(1.0))], 0.0).is_err());
    }
}
