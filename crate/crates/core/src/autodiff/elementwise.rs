use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape as lhs")
}

pub(crate) fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    Ok(zip_with(a, b, |x, y| x + y))
}

pub(crate) fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    Ok(zip_with(a, b, |x, y| x * y))
}

pub(crate) fn relu_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    zip_with(x, g, |x, g| if x > T::zero() { g } else { T::zero() })
}

pub(crate) fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    zip_with(y, g, |y, g| g * y * (T::one() - y))
}

fn dims4<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    t.dims4()
        .ok_or_else(|| Error::Invalid(format!("{op}: expected an NCHW tensor, got {:?}", t.shape())))
}

pub(crate) fn add_channel_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, h, w) = dims4("add_channel_bias", x)?;
    if bias.shape() != [c] {
        return Err(Error::shape("add_channel_bias", x.shape(), bias.shape()));
    }
    let plane = h * w;
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let b = bias.data()[i % c];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
    Ok(out)
}

/// Per-channel sums of an NCHW tensor.
pub(crate) fn channel_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let (_, c, h, w) = g.dims4().expect("NCHW");
    let mut sums = vec![T::zero(); c];
    for (i, chunk) in g.data().chunks(h * w).enumerate() {
        sums[i % c] = sums[i % c] + chunk.iter().fold(T::zero(), |a, &v| a + v);
    }
    Tensor::new(&[c], sums).expect("positive channel count")
}

pub(crate) fn mul_channels<T: Scalar>(x: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4("mul_channels", x)?;
    if a.shape() != [n, 1, h, w] {
        return Err(Error::shape("mul_channels", x.shape(), a.shape()));
    }
    let plane = h * w;
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let att = &a.data()[(i / c) * plane..(i / c + 1) * plane];
        chunk.iter_mut().zip(att).for_each(|(v, &s)| *v = *v * s);
    }
    Ok(out)
}

pub(crate) fn mul_channels_backward<T: Scalar>(
    x: &Tensor<T>,
    a: &Tensor<T>,
    g: &Tensor<T>,
    need_x: bool,
    need_a: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (_, c, h, w) = x.dims4().expect("NCHW");
    let plane = h * w;
    let gx = need_x.then(|| mul_channels(g, a).expect("shapes checked in forward"));
    let ga = need_a.then(|| {
        let mut ga = Tensor::zeros(a.shape());
        let gad = ga.data_mut();
        for (i, (gc, xc)) in g.data().chunks(plane).zip(x.data().chunks(plane)).enumerate() {
            let dst = &mut gad[(i / c) * plane..(i / c + 1) * plane];
            for ((d, &gv), &xv) in dst.iter_mut().zip(gc).zip(xc) {
                *d = *d + gv * xv;
            }
        }
        ga
    });
    (gx, ga)
}

pub(crate) fn concat<T: Scalar>(parts: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<usize>)> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
    let (n, _, h, w) = dims4("concat", first)?;
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        let (pn, pc, ph, pw) = dims4("concat", p)?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
        channels.push(pc);
    }
    let total: usize = channels.iter().sum();
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total * plane);
    for ni in 0..n {
        for (p, &pc) in parts.iter().zip(&channels) {
            data.extend_from_slice(&p.data()[ni * pc * plane..(ni + 1) * pc * plane]);
        }
    }
    Ok((Tensor::new(&[n, total, h, w], data)?, channels))
}

pub(crate) fn concat_backward<T: Scalar>(
    g: &Tensor<T>,
    channels: &[usize],
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let (n, total, h, w) = g.dims4().expect("NCHW");
    let plane = h * w;
    let mut offset = 0;
    let mut out = Vec::with_capacity(channels.len());
    for (&pc, &need) in channels.iter().zip(needs) {
        if need {
            let mut data = Vec::with_capacity(n * pc * plane);
            for ni in 0..n {
                let start = (ni * total + offset) * plane;
                data.extend_from_slice(&g.data()[start..start + pc * plane]);
            }
            out.push(Some(Tensor::new(&[n, pc, h, w], data).expect("slice of gradient")));
        } else {
            out.push(None);
        }
        offset += pc;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_values() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(-800.0f64)).abs() < 1e-300);
        assert_eq!(sigmoid(800.0f64), 1.0);
        let x = Tensor::new(&[2], vec![-1.0f64, 2.0]).unwrap();
        let mut g = crate::autodiff::Graph::new();
        let v = g.constant(x);
        let r = g.relu(v).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
    }

    #[test]
    fn concat_keeps_operand_order() {
        let a = Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[1, 3, 2, 2], |i| 100.0 + i as f64);
        let (c, channels) = concat(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[1, 5, 2, 2]);
        assert_eq!(channels, vec![2, 3]);
        assert_eq!(&c.data()[..8], a.data());
        assert_eq!(&c.data()[8..], b.data());
    }

    #[test]
    fn mismatched_shapes_error() {
        let a = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        let b = Tensor::<f64>::zeros(&[1, 2, 3, 2]);
        assert!(add(&a, &b).is_err());
        assert!(mul(&a, &b).is_err());
        assert!(concat(&[&a, &b]).is_err());
        assert!(mul_channels(&a, &Tensor::zeros(&[1, 2, 2, 2])).is_err());
    }
}
