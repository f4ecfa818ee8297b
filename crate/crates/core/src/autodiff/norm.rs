use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Per-channel biased moments of one training batch.
#[derive(Clone, Debug)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements per channel (N·H·W).
    pub count: usize,
}

fn check<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x
        .dims4()
        .ok_or_else(|| Error::Invalid(format!("batch_norm: expected NCHW, got {:?}", x.shape())))?;
    if gamma.shape() != [c] {
        return Err(Error::shape("batch_norm", x.shape(), gamma.shape()));
    }
    if beta.shape() != [c] {
        return Err(Error::shape("batch_norm", x.shape(), beta.shape()));
    }
    Ok((n, c, h * w))
}

fn for_channel<T: Scalar>(data: &[T], n: usize, c: usize, plane: usize, ch: usize) -> impl Iterator<Item = &[T]> {
    (0..n).map(move |ni| &data[(ni * c + ch) * plane..(ni * c + ch + 1) * plane])
}

pub(crate) fn forward_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BatchMoments<T>, Vec<T>)> {
    let (n, c, plane) = check(x, gamma, beta)?;
    let count = n * plane;
    if count < 2 {
        return Err(Error::Invalid(format!(
            "batch_norm: a channel holds {count} element(s) in training mode; need at least 2"
        )));
    }
    let m = T::of(count as f64);
    let eps = T::of(BN_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let s = for_channel(x.data(), n, c, plane, ch)
            .flatten()
            .fold(T::zero(), |a, &v| a + v);
        let mu = s / m;
        let ss = for_channel(x.data(), n, c, plane, ch)
            .flatten()
            .fold(T::zero(), |a, &v| a + (v - mu) * (v - mu));
        mean[ch] = mu;
        var[ch] = ss / m;
        inv_std[ch] = T::one() / (var[ch] + eps).sqrt();
    }
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = i % c;
        let (scale, shift) = (gamma.data()[ch] * inv_std[ch], beta.data()[ch]);
        let mu = mean[ch];
        chunk.iter_mut().for_each(|v| *v = (*v - mu) * scale + shift);
    }
    Ok((out, BatchMoments { mean, var, count }, inv_std))
}

pub(crate) fn forward_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
) -> Result<(Tensor<T>, Vec<T>)> {
    let (_, c, plane) = check(x, gamma, beta)?;
    if mean.len() != c || var.len() != c {
        return Err(Error::shape("batch_norm", x.shape(), &[mean.len(), var.len()]));
    }
    let eps = T::of(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = i % c;
        let (scale, shift) = (gamma.data()[ch] * inv_std[ch], beta.data()[ch]);
        let mu = mean[ch];
        chunk.iter_mut().for_each(|v| *v = (*v - mu) * scale + shift);
    }
    Ok((out, inv_std))
}

pub(crate) fn backward_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    g: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let (n, c, h, w) = x.dims4().expect("NCHW");
    let plane = h * w;
    let m = T::of((n * plane) as f64);
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for (i, (gc, xc)) in g.data().chunks(plane).zip(x.data().chunks(plane)).enumerate() {
        let ch = i % c;
        for (&gv, &xv) in gc.iter().zip(xc) {
            sum_g[ch] = sum_g[ch] + gv;
            sum_gx[ch] = sum_gx[ch] + gv * (xv - mean[ch]) * inv_std[ch];
        }
    }
    let gx = needs[0].then(|| {
        let mut gx = Tensor::zeros(x.shape());
        let chunks = gx
            .data_mut()
            .chunks_mut(plane)
            .zip(g.data().chunks(plane).zip(x.data().chunks(plane)));
        for (i, (dst, (gc, xc))) in chunks.enumerate() {
            let ch = i % c;
            let k = gamma.data()[ch] * inv_std[ch] / m;
            for ((d, &gv), &xv) in dst.iter_mut().zip(gc).zip(xc) {
                let xhat = (xv - mean[ch]) * inv_std[ch];
                *d = k * (m * gv - sum_g[ch] - xhat * sum_gx[ch]);
            }
        }
        gx
    });
    vec![
        gx,
        needs[1].then(|| Tensor::new(&[c], sum_gx).expect("channel vector")),
        needs[2].then(|| Tensor::new(&[c], sum_g).expect("channel vector")),
    ]
}

pub(crate) fn backward_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    g: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let (_, c, h, w) = x.dims4().expect("NCHW");
    let plane = h * w;
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for (i, (gc, xc)) in g.data().chunks(plane).zip(x.data().chunks(plane)).enumerate() {
        let ch = i % c;
        for (&gv, &xv) in gc.iter().zip(xc) {
            sum_g[ch] = sum_g[ch] + gv;
            sum_gx[ch] = sum_gx[ch] + gv * (xv - mean[ch]) * inv_std[ch];
        }
    }
    let gx = needs[0].then(|| {
        let mut gx = g.clone();
        for (i, chunk) in gx.data_mut().chunks_mut(plane).enumerate() {
            let k = gamma.data()[i % c] * inv_std[i % c];
            chunk.iter_mut().for_each(|v| *v = *v * k);
        }
        gx
    });
    vec![
        gx,
        needs[1].then(|| Tensor::new(&[c], sum_gx).expect("channel vector")),
        needs[2].then(|| Tensor::new(&[c], sum_g).expect("channel vector")),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ones(c: usize) -> Tensor<f64> {
        Tensor::full(&[c], 1.0)
    }

    #[test]
    fn standardized_input_passes_through() {
        // each channel holds {-1, 1} repeated: mean 0, biased variance 1
        let x = Tensor::<f64>::from_fn(&[2, 2, 2, 2], |i| if i % 2 == 0 { -1.0 } else { 1.0 });
        let (y, moments, _) = forward_train(&x, &ones(2), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(moments.mean, vec![0.0, 0.0]);
        assert_eq!(moments.var, vec![1.0, 1.0]);
        // epsilon 1e-5 inside the square root shrinks unit values by 1 - 1/sqrt(1 + 1e-5)
        assert!(y.max_abs_diff(&x) < 5.1e-6);
    }

    #[test]
    fn zero_gamma_yields_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[3, 2, 4, 4], 2.0, &mut rng);
        let beta = Tensor::new(&[2], vec![0.25, -4.0]).unwrap();
        let (y, _, _) = forward_train(&x, &Tensor::zeros(&[2]), &beta).unwrap();
        for n in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(y.at4(n, 0, i, j), 0.25);
                    assert_eq!(y.at4(n, 1, i, j), -4.0);
                }
            }
        }
    }

    #[test]
    fn train_mode_output_is_standardized_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[4, 3, 5, 5], 3.0, &mut rng).map(|v| v + 7.0);
        let (y, _, _) = forward_train(&x, &ones(3), &Tensor::zeros(&[3])).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..25).map(move |p| (n, p)))
                .map(|(n, p)| y.at4(n, ch, p / 5, p % 5))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn single_element_channel_fails_in_training() {
        let x = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        assert!(forward_train(&x, &ones(2), &Tensor::zeros(&[2])).is_err());
        assert!(forward_eval(&x, &ones(2), &Tensor::zeros(&[2]), &[0.0; 2], &[1.0; 2]).is_ok());
    }
}
