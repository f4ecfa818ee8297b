use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Interpolation used by the ×2 decoder upsampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    /// Bilinear with half-pixel centres (`align_corners = false`), edge-clamped.
    #[default]
    Bilinear,
    Nearest,
}

fn nchw<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    x.dims4()
        .ok_or_else(|| Error::Invalid(format!("{op}: expected an NCHW tensor, got {:?}", x.shape())))
}

/// 2×2 window maximum, stride 2. Returns the flat input index of each winner;
/// ties go to the first window element in row-major order.
pub(crate) fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = nchw("max_pool2", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddExtent {
            op: "max_pool2",
            height: h,
            width: w,
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for idx in [
                    base + 2 * i * w + 2 * j + 1,
                    base + (2 * i + 1) * w + 2 * j,
                    base + (2 * i + 1) * w + 2 * j + 1,
                ] {
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, argmax))
}

pub(crate) fn max_pool2_backward<T: Scalar>(shape: &[usize], argmax: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(shape);
    let gxd = gx.data_mut();
    for (&idx, &v) in argmax.iter().zip(g.data()) {
        gxd[idx] = gxd[idx] + v;
    }
    gx
}

/// Source taps `(i0, i1, w0, w1)` for each of the `2n` output positions along one axis.
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

pub(crate) fn upsample2<T: Scalar>(x: &Tensor<T>, mode: UpsampleMode) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw("upsample2", x)?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let xd = x.data();
    let od = out.data_mut();
    match mode {
        UpsampleMode::Nearest => {
            for plane in 0..n * c {
                for i in 0..ho {
                    for j in 0..wo {
                        od[plane * ho * wo + i * wo + j] = xd[plane * h * w + (i / 2) * w + j / 2];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
            for plane in 0..n * c {
                let src = &xd[plane * h * w..(plane + 1) * h * w];
                for (i, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    let (wy0, wy1) = (T::of(wy0), T::of(wy1));
                    for (j, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                        let top = src[y0 * w + x0] * wx0 + src[y0 * w + x1] * wx1;
                        let bottom = src[y1 * w + x0] * wx0 + src[y1 * w + x1] * wx1;
                        od[plane * ho * wo + i * wo + j] = top * wy0 + bottom * wy1;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn upsample2_backward<T: Scalar>(shape: &[usize], g: &Tensor<T>, mode: UpsampleMode) -> Tensor<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = (2 * h, 2 * w);
    let mut gx = Tensor::zeros(shape);
    let gxd = gx.data_mut();
    let gd = g.data();
    match mode {
        UpsampleMode::Nearest => {
            for plane in 0..n * c {
                for i in 0..ho {
                    for j in 0..wo {
                        let dst = plane * h * w + (i / 2) * w + j / 2;
                        gxd[dst] = gxd[dst] + gd[plane * ho * wo + i * wo + j];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
            for plane in 0..n * c {
                let dst = &mut gxd[plane * h * w..(plane + 1) * h * w];
                for (i, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    let (wy0, wy1) = (T::of(wy0), T::of(wy1));
                    for (j, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                        let v = gd[plane * ho * wo + i * wo + j];
                        dst[y0 * w + x0] = dst[y0 * w + x0] + v * wy0 * wx0;
                        dst[y0 * w + x1] = dst[y0 * w + x1] + v * wy0 * wx1;
                        dst[y1 * w + x0] = dst[y1 * w + x0] + v * wy1 * wx0;
                        dst[y1 * w + x1] = dst[y1 * w + x1] + v * wy1 * wx1;
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pool_picks_window_max() {
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn pool_of_constant_is_constant() {
        let x = Tensor::<f64>::full(&[2, 3, 6, 4], 2.5);
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));
        // ties resolve to the top-left element of each window
        assert_eq!(arg[0], 0);
        assert_eq!(arg[1], 2);
    }

    #[test]
    fn pool_matches_window_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(&[1, 1, 4, 4], 1.0, &mut rng);
        let (y, _) = max_pool2(&x).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for di in 0..2 {
                    for dj in 0..2 {
                        m = m.max(x.at4(0, 0, 2 * i + di, 2 * j + dj));
                    }
                }
                assert_eq!(y.at4(0, 0, i, j), m);
            }
        }
    }

    #[test]
    fn pool_gradient_goes_to_first_argmax_only() {
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![5.0, 5.0, 1.0, 5.0]).unwrap();
        let (_, arg) = max_pool2(&x).unwrap();
        let g = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let gx = max_pool2_backward(x.shape(), &arg, &g);
        assert_eq!(gx.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_odd_extent_is_an_error() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        let err = max_pool2(&x).unwrap_err();
        assert!(matches!(err, Error::OddExtent { .. }));
        assert!(err.to_string().contains("pad"));
    }

    #[test]
    fn upsample_preserves_constants() {
        for mode in [UpsampleMode::Bilinear, UpsampleMode::Nearest] {
            let x = Tensor::<f64>::full(&[1, 2, 3, 5], -1.75);
            let y = upsample2(&x, mode).unwrap();
            assert_eq!(y.shape(), &[1, 2, 6, 10]);
            assert!(y.data().iter().all(|&v| (v + 1.75).abs() < 1e-15));
            let one = Tensor::<f64>::full(&[1, 1, 1, 1], 0.3);
            assert_eq!(upsample2(&one, mode).unwrap().data(), &[0.3; 4]);
        }
    }

    #[test]
    fn bilinear_matches_half_pixel_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[1, 1, 3, 3], 1.0, &mut rng);
        let y = upsample2(&x, UpsampleMode::Bilinear).unwrap();
        // out(i, j) samples the input at ((i + ½)/2 − ½, (j + ½)/2 − ½), clamped to the grid
        let sample = |sy: f64, sx: f64| {
            let clamp = |v: f64| v.clamp(0.0, 2.0);
            let (sy, sx) = (clamp(sy), clamp(sx));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(2), (x0 + 1).min(2));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let px = |r: usize, c: usize| x.at4(0, 0, r, c);
            (1.0 - fy) * ((1.0 - fx) * px(y0, x0) + fx * px(y0, x1))
                + fy * ((1.0 - fx) * px(y1, x0) + fx * px(y1, x1))
        };
        for i in 0..6 {
            for j in 0..6 {
                let expect = sample((i as f64 + 0.5) / 2.0 - 0.5, (j as f64 + 0.5) / 2.0 - 0.5);
                assert!((y.at4(0, 0, i, j) - expect).abs() < 1e-12);
            }
        }
    }
}
