use serde::{Deserialize, Serialize};

use super::Tensor;

/// Fourth-order central differences of a scalar function, one coordinate at
/// a time: `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let mut at = |offset: f64| {
            probe.data_mut()[i] = orig + offset;
            f(&probe)
        };
        let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
    }
    out
}

/// Denominator floor so exactly-zero gradients do not divide by zero.
const REL_FLOOR: f64 = 1e-6;

/// Worst coordinate-wise `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
            if err.is_nan() {
                f64::INFINITY
            } else {
                err
            }
        })
        .fold(0.0, f64::max)
}

/// Result of checking one op or model over many random inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub name: String,
    pub cases: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckCase>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < tol)
    }
}
