//! Central finite-difference verification of analytic gradients.
//!
//! The check runs in `f64`. Every parameter element (and every input
//! element) is perturbed by `±eps`; the fragment is re-run from a fresh
//! clone each time so batch-norm running statistics never drift between
//! evaluations, and dropout masks stay frozen because they depend only on
//! the seed.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::loss::softmax_cross_entropy;
use crate::nn::{Mode, Sequential};
use crate::tensor::Tensor;

/// Scalar objective applied to the fragment output.
#[derive(Clone, Debug)]
pub enum Objective {
    /// Softmax cross-entropy against labels (output must be `B×K`).
    CrossEntropy(Vec<usize>),
    /// `Σ probe ⊙ output`, a linear read-out of any output shape.
    Linear(Tensor<f64>),
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Magnitudes below this are compared absolutely rather than relatively.
    pub floor: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            floor: 1e-3,
            mode: Mode::Train,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_relative_error: f64,
    /// Parameter (or `"input"`) holding the worst element.
    pub worst: String,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

impl GradCheck {
    fn loss(&self, net: &Sequential<f64>, x: &Tensor<f64>, obj: &Objective) -> Result<f64> {
        let mut net = net.clone();
        let (y, _) = net.forward(x.clone(), self.mode, self.seed)?;
        objective(&y, obj).map(|(l, _)| l)
    }

    pub fn run(&self, net: &Sequential<f64>, x: &Tensor<f64>, obj: &Objective) -> Result<GradReport> {
        let mut work = net.clone();
        let (y, caches) = work.forward(x.clone(), self.mode, self.seed)?;
        let (_, gy) = objective(&y, obj)?;
        let (gx, gparams) = work.backward(&caches, gy)?;

        let mut report = GradReport {
            max_relative_error: 0.0,
            worst: String::new(),
            checked: 0,
        };
        let names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
        for (pi, analytic) in gparams.iter().enumerate() {
            for e in 0..analytic.len() {
                let numeric = {
                    let mut plus = net.clone();
                    plus.params_mut()[pi].data_mut()[e] += self.eps;
                    let mut minus = net.clone();
                    minus.params_mut()[pi].data_mut()[e] -= self.eps;
                    (self.loss(&plus, x, obj)? - self.loss(&minus, x, obj)?) / (2.0 * self.eps)
                };
                self.record(&mut report, &names[pi], analytic.data()[e], numeric);
            }
        }
        for e in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[e] += self.eps;
            let mut xm = x.clone();
            xm.data_mut()[e] -= self.eps;
            let numeric = (self.loss(net, &xp, obj)? - self.loss(net, &xm, obj)?) / (2.0 * self.eps);
            self.record(&mut report, "input", gx.data()[e], numeric);
        }
        Ok(report)
    }

    fn record(&self, report: &mut GradReport, name: &str, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric, self.floor);
        report.checked += 1;
        if err > report.max_relative_error || report.worst.is_empty() {
            report.max_relative_error = err;
            report.worst = name.into();
        }
    }
}

/// Convenience wrapper with default settings.
pub fn grad_check(net: &Sequential<f64>, x: &Tensor<f64>, obj: &Objective, eps: f64) -> Result<f64> {
    let check = GradCheck {
        eps,
        ..GradCheck::default()
    };
    Ok(check.run(net, x, obj)?.max_relative_error)
}

fn objective(y: &Tensor<f64>, obj: &Objective) -> Result<(f64, Tensor<f64>)> {
    match obj {
        Objective::CrossEntropy(labels) => {
            let ce = softmax_cross_entropy(y, labels)?;
            Ok((ce.loss, ce.grad))
        }
        Objective::Linear(probe) => {
            if probe.dims() != y.dims() {
                return Err(Error::shape("linear objective", probe.dims(), y.dims()));
            }
            let l = probe.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            Ok((l, probe.clone()))
        }
    }
}
