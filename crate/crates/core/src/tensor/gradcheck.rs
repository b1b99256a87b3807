use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar-valued `f` at `x`:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Domain {
            op: "finite_diff_grad",
            reason: format!("step must be positive, got {h}"),
        });
    }
    let mut eval = |t: &Tensor| -> Result<f64> {
        let out = f(t)?;
        let v = out.item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_grad".into(),
            });
        }
        Ok(v)
    };
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.values_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.values_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(
            |t| Ok(Tensor::scalar(t.values().iter().map(|v| v * v).sum())),
            &x,
            1e-5,
        )
        .unwrap();
        assert!((g.values()[0] - 2.0).abs() < 1e-6);
        assert!((g.values()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::from_vec(&[3], vec![1.0, -4.0, 9.0]).unwrap();
        let g = finite_diff_grad(|_| Ok(Tensor::scalar(2.5)), &x, 1e-5).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_non_scalar_and_non_finite() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            finite_diff_grad(|t| Ok(t.clone()), &x, 1e-5),
            Err(Error::NotScalar(_))
        ));
        assert!(matches!(
            finite_diff_grad(|_| Ok(Tensor::from_raw(vec![1], vec![f64::NAN])), &x, 1e-5),
            Err(Error::NonFinite { .. })
        ));
        assert!(finite_diff_grad(|_| Ok(Tensor::scalar(0.0)), &x, 0.0).is_err());
    }
}
