//! Central finite differences as an independent oracle for autodiff.

mod suite;

pub use suite::{model_check_config, op_names, run_model_checks, run_op_checks, CheckReport, OpCheck};

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Deliberate bugs that can be switched on to confirm the checks detect
/// them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fault {
    /// Negates the input gradient of every 3D convolution.
    Conv3dBackwardSign,
}

impl std::str::FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv3d-backward-sign" => Ok(Fault::Conv3dBackwardSign),
            _ => Err(Error::invalid(format!("unknown fault {s:?}"))),
        }
    }
}

thread_local! {
    static ACTIVE_FAULT: Cell<Option<Fault>> = const { Cell::new(None) };
}

/// Keeps a fault active on the current thread until dropped.
#[must_use]
pub struct FaultGuard {
    previous: Option<Fault>,
}

impl Drop for FaultGuard {
    fn drop(&mut self) {
        ACTIVE_FAULT.with(|f| f.set(self.previous));
    }
}

pub fn inject_fault(fault: Fault) -> FaultGuard {
    FaultGuard {
        previous: ACTIVE_FAULT.with(|f| f.replace(Some(fault))),
    }
}

pub(crate) fn fault_active(fault: Fault) -> bool {
    ACTIVE_FAULT.with(|f| f.get() == Some(fault))
}

/// Relative tolerance and absolute floor for gradient comparisons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub rel: f64,
    pub abs_floor: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            rel: 1e-4,
            abs_floor: 1e-7,
        }
    }
}

impl Tolerance {
    /// `|a − n| / max(|a|, |n|, abs_floor / rel)`.
    ///
    /// The value is `≤ rel` exactly when `|a − n| ≤ rel·max(|a|, |n|)` or
    /// `|a − n| ≤ abs_floor`.
    pub fn relative_error(&self, analytic: f64, numeric: f64) -> f64 {
        let denom = analytic
            .abs()
            .max(numeric.abs())
            .max(self.abs_floor / self.rel);
        (analytic - numeric).abs() / denom
    }

    pub fn max_relative_error(&self, analytic: &[f64], numeric: &[f64]) -> f64 {
        debug_assert_eq!(analytic.len(), numeric.len());
        analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| self.relative_error(a, n))
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, max_rel: f64) -> bool {
        max_rel <= self.rel
    }
}

pub const DEFAULT_EPS: f64 = 1e-6;

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every element `i`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step {eps} must be positive")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective evaluated to {plus} / {minus} at element {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.shape(), grad)
}
