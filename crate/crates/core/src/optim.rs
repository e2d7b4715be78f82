use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `p <- p - lr * grad` for every tensor, then clears the gradients.
///
/// Fails without touching anything if a parameter has no gradient.
pub fn sgd_step<T: Scalar>(params: &mut [Tensor<T>], lr: T) -> Result<()> {
    if !(lr >= T::zero()) || !lr.is_finite() {
        return Err(invalid(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::MissingGradient(format!("#{i}")));
    }
    for p in params.iter_mut() {
        let g = p.grad().expect("checked above").to_vec();
        p.data_mut()
            .iter_mut()
            .zip(&g)
            .for_each(|(w, &gi)| *w = *w - lr * gi);
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor<f64> {
        Tensor::param(vec![], vec![v]).unwrap()
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut ps = vec![scalar_param(1.5)];
        ps[0].accumulate_grad(&[3.0]).unwrap();
        sgd_step(&mut ps, 0.0).unwrap();
        assert_eq!(ps[0].item(), 1.5);
        assert!(ps[0].grad().is_none());
    }

    #[test]
    fn single_step() {
        let mut ps = vec![scalar_param(1.0)];
        ps[0].accumulate_grad(&[2.0]).unwrap();
        sgd_step(&mut ps, 0.1).unwrap();
        assert!((ps[0].item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_decays_geometrically() {
        let mut ps = vec![scalar_param(1.0)];
        for _ in 0..50 {
            let p = ps[0].item();
            ps[0].accumulate_grad(&[2.0 * p]).unwrap();
            sgd_step(&mut ps, 0.1).unwrap();
        }
        let closed_form = 0.8f64.powi(50);
        assert!((ps[0].item() - closed_form).abs() < 1e-15);
        assert!(ps[0].item().abs() < 1e-4);
    }

    #[test]
    fn missing_grad_rejected() {
        let mut ps = vec![scalar_param(1.0), scalar_param(2.0)];
        ps[0].accumulate_grad(&[1.0]).unwrap();
        assert!(matches!(sgd_step(&mut ps, 0.1), Err(Error::MissingGradient(_))));
        assert_eq!(ps[0].item(), 1.0);
        assert!(sgd_step(&mut ps, -1.0).is_err());
    }
}
