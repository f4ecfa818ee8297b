//! 2-D convolution as im2col + GEMM, per sample and per group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            groups: 1,
        }
    }

    /// Stride 1 with zero padding that preserves the spatial extent of an odd kernel.
    pub fn same(kernel: usize) -> Self {
        Self::new(1, kernel / 2)
    }

    pub fn with_groups(self, groups: usize) -> Self {
        ConvSpec { groups, ..self }
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (padded >= kernel && self.stride > 0).then(|| (padded - kernel) / self.stride + 1)
    }
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    cg: usize,
    og: usize,
    k: usize,
    ho: usize,
    wo: usize,
    groups: usize,
}

impl Geometry {
    fn cols(&self) -> usize {
        self.cg * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self, spec: ConvSpec) -> bool {
        self.k == 1 && spec.stride == 1 && spec.padding == 0
    }
}

fn geometry<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, spec: ConvSpec) -> Result<Geometry> {
    let mismatch = || Error::shape("conv2d", x.shape(), weight.shape());
    let (n, c, h, w) = x.dims4().ok_or_else(mismatch)?;
    let (o, cg, k, k2) = weight.dims4().ok_or_else(mismatch)?;
    let groups = spec.groups.max(1);
    if k != k2 || cg * groups != c || o % groups != 0 {
        return Err(mismatch());
    }
    let (Some(ho), Some(wo)) = (spec.output_extent(h, k), spec.output_extent(w, k)) else {
        return Err(mismatch());
    };
    Ok(Geometry {
        n,
        c,
        h,
        w,
        o,
        cg,
        og: o / groups,
        k,
        ho,
        wo,
        groups,
    })
}

/// Output columns `lo..hi` whose kernel tap `kw` lands inside the unpadded row.
fn valid_span(kw: usize, geo: &Geometry, spec: ConvSpec) -> (usize, usize) {
    let (s, p) = (spec.stride, spec.padding);
    let lo = if p > kw { (p - kw).div_ceil(s) } else { 0 };
    let hi = if geo.w + p > kw { (geo.w + p - kw).div_ceil(s).min(geo.wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], geo: &Geometry, spec: ConvSpec, col: &mut [T]) {
    let (h, w, k, ho, wo) = (geo.h, geo.w, geo.k, geo.ho, geo.wo);
    let (s, p) = (spec.stride, spec.padding);
    for c in 0..geo.cg {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let (lo, hi) = valid_span(kw, geo, spec);
                let row = (c * k + kh) * k + kw;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for (oh, drow) in dst.chunks_exact_mut(wo).enumerate() {
                    let ih = oh * s + kh;
                    if ih < p || ih - p >= h {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(ih - p) * w..(ih - p + 1) * w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if s == 1 {
                        drow[lo..hi].copy_from_slice(&src[lo + kw - p..hi + kw - p]);
                    } else {
                        for (ow, d) in drow[lo..hi].iter_mut().enumerate() {
                            *d = src[(lo + ow) * s + kw - p];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], geo: &Geometry, spec: ConvSpec, x: &mut [T]) {
    let (h, w, k, ho, wo) = (geo.h, geo.w, geo.k, geo.ho, geo.wo);
    let (s, p) = (spec.stride, spec.padding);
    for c in 0..geo.cg {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let (lo, hi) = valid_span(kw, geo, spec);
                let row = (c * k + kh) * k + kw;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for (oh, srow) in src.chunks_exact(wo).enumerate() {
                    let ih = oh * s + kh;
                    if ih < p || ih - p >= h {
                        continue;
                    }
                    let dst = &mut plane[(ih - p) * w..(ih - p + 1) * w];
                    for (ow, &v) in srow[lo..hi].iter().enumerate() {
                        let d = &mut dst[(lo + ow) * s + kw - p];
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// The transpose of `im2col`: one row of `cg·k·k` taps per output pixel.
fn im2row<T: Scalar>(x: &[T], geo: &Geometry, spec: ConvSpec, rows: &mut [T]) {
    let (h, w, k) = (geo.h, geo.w, geo.k);
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let mut chunks = rows.chunks_exact_mut(geo.cols());
    for oh in 0..geo.ho {
        for ow in 0..geo.wo {
            let row = chunks.next().expect("buffer holds one row per pixel");
            let iw0 = ow as isize * s - p;
            let inside = iw0 >= 0 && iw0 + k as isize <= w as isize;
            for (ck, seg) in row.chunks_exact_mut(k).enumerate() {
                let (c, kh) = (ck / k, ck % k);
                let ih = oh as isize * s + kh as isize - p;
                if ih < 0 || ih >= h as isize {
                    seg.fill(T::zero());
                    continue;
                }
                let src = &x[(c * h + ih as usize) * w..][..w];
                if inside {
                    seg.copy_from_slice(&src[iw0 as usize..iw0 as usize + k]);
                } else {
                    for (kw, d) in seg.iter_mut().enumerate() {
                        let iw = iw0 + kw as isize;
                        *d = if iw >= 0 && iw < w as isize { src[iw as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

/// Weights of the adjoint convolution: input and output channels swapped
/// within each group and the kernel rotated by half a turn.
fn adjoint_weight<T: Scalar>(weight: &Tensor<T>, geo: &Geometry) -> Tensor<T> {
    let (k, cg, og) = (geo.k, geo.cg, geo.og);
    let wd = weight.data();
    let mut out = Tensor::zeros(&[geo.c, og, k, k]);
    let od = out.data_mut();
    for g in 0..geo.groups {
        for o in 0..og {
            for c in 0..cg {
                for kh in 0..k {
                    for kw in 0..k {
                        let src = (((g * og + o) * cg + c) * k + kh) * k + kw;
                        let dst = (((g * cg + c) * og + o) * k + (k - 1 - kh)) * k + (k - 1 - kw);
                        od[dst] = wd[src];
                    }
                }
            }
        }
    }
    out
}

/// Row-major `rows × cols` into `cols × rows`, in cache-sized tiles.
fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, spec: ConvSpec) -> Result<Tensor<T>> {
    let geo = geometry(x, weight, spec)?;
    let (kk, hw) = (geo.cols(), geo.out_plane());
    let pointwise = geo.pointwise(spec);
    let mut out = Tensor::zeros(&[geo.n, geo.o, geo.ho, geo.wo]);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kk * hw] };
    let (xd, wd) = (x.data(), weight.data());
    let od = out.data_mut();
    for ni in 0..geo.n {
        for gi in 0..geo.groups {
            let xs = &xd[(ni * geo.c + gi * geo.cg) * geo.h * geo.w..][..geo.cg * geo.h * geo.w];
            let rhs: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, &geo, spec, &mut col);
                &col
            };
            let wg = &wd[gi * geo.og * kk..(gi + 1) * geo.og * kk];
            let ys = &mut od[(ni * geo.o + gi * geo.og) * hw..][..geo.og * hw];
            T::gemm(
                geo.og,
                kk,
                hw,
                wg,
                (kk as isize, 1),
                rhs,
                (hw as isize, 1),
                T::zero(),
                ys,
                (hw as isize, 1),
            );
        }
    }
    Ok(out)
}

pub(crate) fn backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gy: &Tensor<T>,
    spec: ConvSpec,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let geo = geometry(x, weight, spec).expect("validated in forward");
    let (kk, hw) = (geo.cols(), geo.out_plane());
    let pointwise = geo.pointwise(spec);
    // at stride 1 the input gradient is itself a convolution of the output gradient
    let adjoint = need_x && spec.stride == 1 && !pointwise && spec.padding < geo.k;
    let mut gx = if adjoint {
        let spec = ConvSpec::new(1, geo.k - 1 - spec.padding).with_groups(geo.groups);
        Some(forward(gy, &adjoint_weight(weight, &geo), spec).expect("adjoint geometry matches the input"))
    } else {
        need_x.then(|| Tensor::zeros(x.shape()))
    };
    let mut gw = need_w.then(|| Tensor::zeros(weight.shape()));
    let mut col = if need_x && !adjoint && !pointwise { vec![T::zero(); kk * hw] } else { Vec::new() };
    let mut col_t = if need_w { vec![T::zero(); kk * hw] } else { Vec::new() };
    let (xd, wd, gyd) = (x.data(), weight.data(), gy.data());
    let in_plane = geo.cg * geo.h * geo.w;
    for ni in 0..geo.n {
        for gi in 0..geo.groups {
            let x_off = (ni * geo.c + gi * geo.cg) * geo.h * geo.w;
            let gys = &gyd[(ni * geo.o + gi * geo.og) * hw..][..geo.og * hw];
            if let Some(gw) = gw.as_mut() {
                let xs = &xd[x_off..x_off + in_plane];
                // contiguous operands keep the GEMM packing cheap
                if pointwise {
                    transpose(xs, kk, hw, &mut col_t);
                } else {
                    im2row(xs, &geo, spec, &mut col_t);
                }
                let dst = &mut gw.data_mut()[gi * geo.og * kk..(gi + 1) * geo.og * kk];
                // dW_g += dY_g · colᵀ
                T::gemm(
                    geo.og,
                    hw,
                    kk,
                    gys,
                    (hw as isize, 1),
                    &col_t,
                    (kk as isize, 1),
                    T::one(),
                    dst,
                    (kk as isize, 1),
                );
            }
            if let Some(gx) = gx.as_mut().filter(|_| !adjoint) {
                let wg = &wd[gi * geo.og * kk..(gi + 1) * geo.og * kk];
                let dst = &mut gx.data_mut()[x_off..x_off + in_plane];
                if pointwise {
                    T::gemm(
                        kk,
                        geo.og,
                        hw,
                        wg,
                        (1, kk as isize),
                        gys,
                        (hw as isize, 1),
                        T::one(),
                        dst,
                        (hw as isize, 1),
                    );
                } else {
                    // dcol = W_gᵀ · dY_g, then scatter back onto the input plane
                    T::gemm(
                        kk,
                        geo.og,
                        hw,
                        wg,
                        (1, kk as isize),
                        gys,
                        (hw as isize, 1),
                        T::zero(),
                        &mut col,
                        (hw as isize, 1),
                    );
                    col2im(&col, &geo, spec, dst);
                }
            }
        }
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct definition: y[n,o,i,j] = Σ_{c,kh,kw} w[o,c,kh,kw] · x_padded[n, g·cg + c, i·s + kh, j·s + kw].
    fn nested_loop(x: &Tensor<f64>, w: &Tensor<f64>, spec: ConvSpec) -> Tensor<f64> {
        let (n, _, h, wd) = x.dims4().unwrap();
        let (o, cg, k, _) = w.dims4().unwrap();
        let (s, p) = (spec.stride as isize, spec.padding as isize);
        let ho = ((h as isize + 2 * p - k as isize) / s + 1) as usize;
        let wo = ((wd as isize + 2 * p - k as isize) / s + 1) as usize;
        let og = o / spec.groups;
        let mut out = vec![0.0; n * o * ho * wo];
        for ni in 0..n {
            for oi in 0..o {
                let g = oi / og;
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cg {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let ih = i as isize * s + kh as isize - p;
                                    let iw = j as isize * s + kw as isize - p;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                        continue;
                                    }
                                    acc += w.at4(oi, ci, kh, kw)
                                        * x.at4(ni, g * cg + ci, ih as usize, iw as usize);
                                }
                            }
                        }
                        out[((ni * o + oi) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        Tensor::new(&[n, o, ho, wo], out).unwrap()
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let y = forward(&x, &w, ConvSpec::same(3)).unwrap();
        assert_eq!(y.at4(0, 0, 1, 1), 9.0);
        assert_eq!(y.at4(0, 0, 0, 0), 4.0);
        assert_eq!(y.at4(0, 0, 2, 2), 4.0);
        assert_eq!(y.at4(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[2, 3, 5, 5], 1.0, &mut rng);
        let w = Tensor::<f64>::zeros(&[4, 3, 3, 3]);
        let y = forward(&x, &w, ConvSpec::same(3)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_nested_loops_strided_and_grouped() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(&[1, 2, 6, 6], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let spec = ConvSpec::new(2, 1);
        let y = forward(&x, &w, spec).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
        assert!(y.max_abs_diff(&nested_loop(&x, &w, spec)) < 1e-12);

        let x = Tensor::<f64>::randn(&[2, 4, 7, 5], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[6, 2, 5, 5], 1.0, &mut rng);
        let spec = ConvSpec::new(2, 2).with_groups(2);
        let y = forward(&x, &w, spec).unwrap();
        assert!(y.max_abs_diff(&nested_loop(&x, &w, spec)) < 1e-12);

        let w = Tensor::<f64>::randn(&[3, 4, 1, 1], 1.0, &mut rng);
        let spec = ConvSpec::new(1, 0);
        let y = forward(&x, &w, spec).unwrap();
        assert!(y.max_abs_diff(&nested_loop(&x, &w, spec)) < 1e-12);
    }

    #[test]
    fn output_extent_formula() {
        let spec = ConvSpec::new(2, 2);
        assert_eq!(spec.output_extent(128, 5), Some(64));
        assert_eq!(spec.output_extent(9, 5), Some(5));
        assert_eq!(ConvSpec::new(1, 0).output_extent(2, 3), None);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
        let err = forward(&x, &w, ConvSpec::same(3)).unwrap_err().to_string();
        assert!(err.contains("[1, 3, 4, 4]") && err.contains("[2, 2, 3, 3]"), "{err}");
    }

    #[test]
    fn convolution_is_linear_in_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn(&[1, 2, 6, 6], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[1, 2, 6, 6], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let (ka, kb) = (0.7, -1.3);
        let mix = Tensor::new(
            a.shape(),
            a.data().iter().zip(b.data()).map(|(x, y)| ka * x + kb * y).collect(),
        )
        .unwrap();
        let spec = ConvSpec::new(2, 1);
        let lhs = forward(&mix, &w, spec).unwrap();
        let (ya, yb) = (forward(&a, &w, spec).unwrap(), forward(&b, &w, spec).unwrap());
        let rhs = Tensor::new(
            ya.shape(),
            ya.data().iter().zip(yb.data()).map(|(x, y)| ka * x + kb * y).collect(),
        )
        .unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    /// conv is linear in each argument, so ⟨conv(x, w), dy⟩ = ⟨x, dx⟩ = ⟨w, dw⟩.
    #[test]
    fn backward_is_the_adjoint_for_every_geometry() {
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases = [
            ([2, 4, 7, 5], [6, 2, 3, 3], ConvSpec::same(3).with_groups(2)),
            ([1, 3, 6, 6], [2, 3, 5, 5], ConvSpec::new(1, 2)),
            ([1, 3, 6, 6], [2, 3, 3, 3], ConvSpec::new(1, 0)),
            ([2, 4, 8, 8], [4, 2, 5, 5], ConvSpec::new(2, 2).with_groups(2)),
            ([1, 3, 5, 4], [2, 3, 1, 1], ConvSpec::new(1, 0)),
            ([1, 2, 5, 5], [3, 2, 3, 3], ConvSpec::new(2, 1)),
        ];
        for (xs, ws, spec) in cases {
            let x = Tensor::<f64>::randn(&xs, 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&ws, 1.0, &mut rng);
            let y = forward(&x, &w, spec).unwrap();
            let gy = Tensor::<f64>::randn(y.shape(), 1.0, &mut rng);
            let (gx, gw) = backward(&x, &w, &gy, spec, true, true);
            let (gx, gw) = (gx.unwrap(), gw.unwrap());
            let reference = dot(&y, &gy);
            assert!((dot(&x, &gx) - reference).abs() < 1e-9 * reference.abs().max(1.0), "{spec:?}");
            assert!((dot(&w, &gw) - reference).abs() < 1e-9 * reference.abs().max(1.0), "{spec:?}");
            let (only_x, none) = backward(&x, &w, &gy, spec, true, false);
            assert_eq!(only_x.unwrap(), gx);
            assert!(none.is_none());
        }
    }
}
