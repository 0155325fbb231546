use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step {step}")));
    }
    let mut probe = x.data().to_vec();
    let mut grad = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig - step;
        let minus = f(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite(format!(
                "finite-difference probe of element {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Relative comparison with an absolute floor:
/// `|a - n| <= max(rel * max(|a|, |n|), abs)`.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub rel: f64,
    pub abs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            rel: 1e-4,
            abs: 1e-6,
        }
    }
}

impl GradCheck {
    pub fn close(&self, analytic: f64, numeric: f64) -> bool {
        let scale = analytic.abs().max(numeric.abs());
        (analytic - numeric).abs() <= (self.rel * scale).max(self.abs)
    }

    /// All entries that fail the tolerance.
    pub fn compare(&self, analytic: &Tensor, numeric: &Tensor) -> Vec<GradMismatch> {
        analytic
            .data()
            .iter()
            .zip(numeric.data())
            .enumerate()
            .filter(|(_, (a, n))| !self.close(**a, **n))
            .map(|(index, (&analytic, &numeric))| GradMismatch {
                index,
                analytic,
                numeric,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::sigmoid;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![3.0]).unwrap();
        let g = finite_diff(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let x = Tensor::vector(vec![0.0]).unwrap();
        let g = finite_diff(|t| Ok(sigmoid(t.data()[0])), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 0.25).abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        assert!(finite_diff(|_| Ok(0.0), &x, 0.0).is_err());
        assert!(matches!(
            finite_diff(|_| Ok(f64::NAN), &x, 1e-3),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn tolerance_has_absolute_floor() {
        let c = GradCheck::default();
        assert!(c.close(1e-9, 5e-7));
        assert!(c.close(100.0, 100.005));
        assert!(!c.close(1.0, 1.001));
    }
}
