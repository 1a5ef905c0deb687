//! Central-difference gradient verification.

use super::{GradTape, Tensor};
use crate::error::{Error, Result};

/// Outcome of comparing an autodiff gradient against central differences.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    /// max over elements of |ad - fd| / max(1, |ad|, |fd|)
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub tol: f64,
}

impl FiniteDiffReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tol
    }
}

/// Compare the tape gradient of a scalar-valued `f` at `x` against central
/// finite differences with the given step.
///
/// `f` must be deterministic. The measured step `fl(x+h) - fl(x-h)` is used
/// in the quotient so that f32 rounding of the perturbed inputs does not
/// bias the estimate.
pub fn finite_diff_check<F>(
    f: F,
    x_shape: &[usize],
    x_data: &[f32],
    step: f64,
    tol: f64,
) -> Result<FiniteDiffReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if step <= 0.0 {
        return Err(Error::Contract("finite_diff_check step must be > 0".into()));
    }
    let tape = GradTape::new();
    let leaf = tape.leaf(x_shape, x_data.to_vec())?;
    let y = f(&leaf)?;
    if y.numel() != 1 {
        return Err(Error::Contract(format!(
            "finite_diff_check needs a scalar function, got shape {:?}",
            y.shape()
        )));
    }
    y.backward()?;
    let ad = leaf
        .grad()
        .ok_or_else(|| Error::Contract("no gradient flowed to the checked input".into()))?;

    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0;
    for i in 0..x_data.len() {
        let mut plus = x_data.to_vec();
        let mut minus = x_data.to_vec();
        plus[i] = (x_data[i] as f64 + step) as f32;
        minus[i] = (x_data[i] as f64 - step) as f32;
        let measured = plus[i] as f64 - minus[i] as f64;
        let fp = f(&Tensor::from_vec(x_shape, plus)?)?.item()? as f64;
        let fm = f(&Tensor::from_vec(x_shape, minus)?)?.item()? as f64;
        let fd = (fp - fm) / measured;
        let adi = ad[i] as f64;
        let rel = (adi - fd).abs() / adi.abs().max(fd.abs()).max(1.0);
        if !rel.is_finite() || rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(FiniteDiffReport {
        max_rel_err,
        worst_index,
        checked: x_data.len(),
        tol,
    })
}
