use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::elementwise::sigmoid;

/// `−[t·ln σ(x) + (1 − t)·ln(1 − σ(x))]` evaluated as `max(x, 0) − x·t + ln(1 + e^{−|x|})`.
fn bce_term(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

fn per_sample<T: Scalar>(x: &Tensor<T>, include: &[bool]) -> Result<usize> {
    let n = x.shape()[0];
    if include.len() != n {
        return Err(Error::Invalid(format!(
            "bce: {} inclusion flags for a batch of {n}",
            include.len()
        )));
    }
    Ok(x.numel() / n)
}

pub(crate) fn bce_forward<T: Scalar>(x: &Tensor<T>, targets: &Tensor<T>, include: &[bool]) -> Result<Tensor<T>> {
    if x.shape() != targets.shape() {
        return Err(Error::shape("bce_with_logits", x.shape(), targets.shape()));
    }
    if let Some(bad) = targets.data().iter().find(|&&t| t != T::zero() && t != T::one()) {
        return Err(Error::Invalid(format!("bce: non-binary target value {bad}")));
    }
    let per = per_sample(x, include)?;
    let mut total = 0.0;
    for ((xs, ts), &keep) in x.data().chunks(per).zip(targets.data().chunks(per)).zip(include) {
        if keep {
            total += xs
                .iter()
                .zip(ts)
                .map(|(&a, &b)| bce_term(a.f64(), b.f64()))
                .sum::<f64>();
        }
    }
    Ok(Tensor::scalar(T::of(total)))
}

pub(crate) fn bce_backward<T: Scalar>(x: &Tensor<T>, targets: &Tensor<T>, include: &[bool], g: T) -> Tensor<T> {
    let per = per_sample(x, include).expect("validated in forward");
    let mut gx = Tensor::zeros(x.shape());
    let chunks = gx
        .data_mut()
        .chunks_mut(per)
        .zip(x.data().chunks(per).zip(targets.data().chunks(per)));
    for ((dst, (xs, ts)), &keep) in chunks.zip(include) {
        if keep {
            for ((d, &a), &t) in dst.iter_mut().zip(xs).zip(ts) {
                *d = g * (sigmoid(a) - t);
            }
        }
    }
    gx
}
