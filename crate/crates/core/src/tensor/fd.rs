use super::{Element, Result, Tensor, TensorError};

/// Central-difference gradient of a scalar function, one component at a
/// time: `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε`.
///
/// The divisor is the step actually representable in `E`, which matters for
/// f32 inputs far from zero.
pub fn finite_difference<E, Er>(
    mut f: impl FnMut(&Tensor<E>) -> std::result::Result<f64, Er>,
    x: &Tensor<E>,
    eps: f64,
) -> std::result::Result<Tensor<E>, Er>
where
    E: Element,
    Er: From<TensorError>,
{
    if !(eps > 0.0) {
        return Err(TensorError::InvalidArgument("finite difference step must be positive").into());
    }
    let base = x.to_vec();
    let mut out = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        let plus = E::from_f64_lossy(base[i].as_f64() + eps);
        let minus = E::from_f64_lossy(base[i].as_f64() - eps);
        probe[i] = plus;
        let fp = f(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = minus;
        let fm = f(&Tensor::new(x.shape().to_vec(), probe.clone())?)?;
        probe[i] = base[i];
        let h = plus.as_f64() - minus.as_f64();
        out.push(E::from_f64_lossy((fp - fm) / h));
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

/// `max_i |a_i − b_i| / max(|a_i|, |b_i|, floor)`.
///
/// `floor` keeps components that are zero in both from dividing by zero; it
/// should sit well below the gradient's typical magnitude.
pub fn max_relative_error<E: Element>(a: &Tensor<E>, b: &Tensor<E>, floor: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "max_relative_error",
            shapes: vec![a.shape().to_vec(), b.shape().to_vec()],
        });
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| {
            let (p, q) = (p.as_f64(), q.as_f64());
            (p - q).abs() / p.abs().max(q.abs()).max(floor)
        })
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::<f64>::vector(vec![1.0, 2.0]).unwrap();
        let g = finite_difference(|t| Ok::<_, TensorError>(t.norm_sq()), &x, 1e-3).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-5);
        assert!((g.data()[1] - 4.0).abs() < 1e-5);
    }

    #[test]
    fn constant_gives_zero() {
        let x = Tensor::<f32>::vector(vec![1.0, -3.0, 7.0]).unwrap();
        let g = finite_difference(|_| Ok::<_, TensorError>(4.2), &x, 1e-3).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_non_positive_eps() {
        let x = Tensor::<f64>::vector(vec![1.0]).unwrap();
        assert!(finite_difference(|_| Ok::<_, TensorError>(0.0), &x, 0.0).is_err());
    }
}
