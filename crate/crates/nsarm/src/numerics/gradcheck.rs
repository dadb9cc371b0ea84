use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Compare an analytic gradient against central finite differences.
///
/// `f` evaluates the scalar objective at the given parameters and returns
/// (loss, analytic gradient). The check perturbs one stored f32 coordinate at
/// a time and divides by the actually-stored difference, so the result is not
/// polluted by input quantization. Returns the max over coordinates of
/// |analytic - fd| / max(|analytic|, |fd|, 1e-6).
pub fn grad_check<F>(f: &F, params: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "grad_check eps {eps} outside [1e-5, 1e-2]"
        )));
    }
    let (loss0, analytic) = f(params)?;
    if !loss0.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    if analytic.shape() != params.shape() {
        return Err(Error::ShapeMismatch(format!(
            "analytic gradient {:?} vs params {:?}",
            analytic.shape(),
            params.shape()
        )));
    }

    let mut max_rel = 0.0f64;
    for i in 0..params.numel() {
        let orig = params.data()[i];
        let mut plus = params.clone();
        let mut minus = params.clone();
        plus.data_mut()[i] = (orig as f64 + eps) as f32;
        minus.data_mut()[i] = (orig as f64 - eps) as f32;
        let delta = plus.data()[i] as f64 - minus.data()[i] as f64;

        let (lp, _) = f(&plus)?;
        let (lm, _) = f(&minus)?;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::NonFinite(format!(
                "grad_check objective at perturbed coordinate {i}"
            )));
        }
        let fd = (lp - lm) / delta;
        let an = analytic.data()[i] as f64;
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    #[test]
    fn known_gradient_sum_of_squares() {
        let params = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        let f = |p: &Tensor| {
            let mut tape = Tape::new();
            let pid = tape.leaf(p);
            let sq = tape.mul(pid, pid)?;
            let loss = tape.sum_all(sq);
            let mut grads = tape.backward(loss)?;
            let g = grads.take(pid).unwrap();
            Ok((tape.scalar(loss), g))
        };
        // Analytic gradient is [2, 4]; the checker should agree tightly.
        let (_, g) = f(&params).unwrap();
        assert_eq!(g.data(), &[2.0, 4.0]);
        let err = grad_check(&f, &params, 1e-4).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let params = Tensor::from_vec(vec![3], vec![0.5, -0.2, 0.9]).unwrap();
        let f = |p: &Tensor| Ok((42.0, Tensor::zeros(p.shape())));
        let err = grad_check(&f, &params, 1e-4).unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn rejects_out_of_range_eps() {
        let params = Tensor::scalar(1.0);
        let f = |_: &Tensor| Ok((0.0, Tensor::zeros(&[1])));
        assert!(grad_check(&f, &params, 1.0).is_err());
        assert!(grad_check(&f, &params, 1e-9).is_err());
    }

    #[test]
    fn rejects_non_finite_objective() {
        let params = Tensor::scalar(1.0);
        let f = |p: &Tensor| {
            let v = p.data()[0];
            if (v - 1.0).abs() > 1e-6 {
                Ok((f64::NAN, Tensor::zeros(&[1])))
            } else {
                Ok((1.0, Tensor::zeros(&[1])))
            }
        };
        assert!(matches!(
            grad_check(&f, &params, 1e-4),
            Err(Error::NonFinite(_))
        ));
    }
}
