//! Differentiable primitives of capsule routing.
//!
//! Capsule tensors are NCHW with the channel axis flattened type-major:
//! channel `t·A + a` holds component `a` of capsule type `t`. Votes are laid out as
//! `(child type i, parent type j, component a)` on the channel axis, and routing
//! logits as `(i, j)`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guard inside the squash norm: `‖s‖ε = sqrt(‖s‖² + ε²)`.
pub const SQUASH_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RouteShape {
    pub child_types: usize,
    pub parent_types: usize,
    pub dim: usize,
}

impl RouteShape {
    pub fn vote_channels(&self) -> usize {
        self.child_types * self.parent_types * self.dim
    }

    pub fn logit_channels(&self) -> usize {
        self.child_types * self.parent_types
    }

    pub fn parent_channels(&self) -> usize {
        self.parent_types * self.dim
    }
}

/// `(outer, dim, inner)` view of a tensor whose axis 1 is split into `dim`-long groups.
fn squash_view<T: Scalar>(s: &Tensor<T>, dim: usize) -> Result<(usize, usize)> {
    let shape = s.shape();
    if shape.len() < 2 || dim == 0 || !shape[1].is_multiple_of(dim) {
        return Err(Error::Invalid(format!(
            "squash: axis 1 of {shape:?} is not a multiple of capsule dimension {dim}"
        )));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0] * shape[1] / dim, inner))
}

/// Scale factor `f(q) = q / ((1 + q)·sqrt(q + ε²))` with `q = ‖s‖²`, and its derivative.
fn squash_factor(q: f64) -> (f64, f64) {
    let e2 = SQUASH_EPS * SQUASH_EPS;
    let u = 1.0 / ((1.0 + q) * (q + e2).sqrt());
    let f = q * u;
    let df = u * (1.0 - q / (1.0 + q) - q / (2.0 * (q + e2)));
    (f, df)
}

pub(crate) fn squash<T: Scalar>(s: &Tensor<T>, dim: usize) -> Result<Tensor<T>> {
    let (outer, inner) = squash_view(s, dim)?;
    let mut out = s.clone();
    let (sd, od) = (s.data(), out.data_mut());
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * dim + a) * inner + i;
            let q: f64 = (0..dim).map(|a| sd[idx(a)].f64().powi(2)).sum();
            let f = T::of(squash_factor(q).0);
            for a in 0..dim {
                od[idx(a)] = sd[idx(a)] * f;
            }
        }
    }
    Ok(out)
}

pub(crate) fn squash_backward<T: Scalar>(s: &Tensor<T>, dim: usize, g: &Tensor<T>) -> Tensor<T> {
    let (outer, inner) = squash_view(s, dim).expect("validated in forward");
    let mut gs = Tensor::zeros(s.shape());
    let (sd, gd) = (s.data(), g.data());
    let gsd = gs.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * dim + a) * inner + i;
            let q: f64 = (0..dim).map(|a| sd[idx(a)].f64().powi(2)).sum();
            let (f, df) = squash_factor(q);
            let gs_dot: f64 = (0..dim).map(|a| gd[idx(a)].f64() * sd[idx(a)].f64()).sum();
            for a in 0..dim {
                let v = f * gd[idx(a)].f64() + 2.0 * df * gs_dot * sd[idx(a)].f64();
                gsd[idx(a)] = T::of(v);
            }
        }
    }
    gs
}

fn check_votes<T: Scalar>(op: &'static str, votes: &Tensor<T>, shape: RouteShape) -> Result<(usize, usize, usize)> {
    match votes.dims4() {
        Some((n, c, h, w)) if c == shape.vote_channels() => Ok((n, h, w)),
        _ => Err(Error::shape(
            op,
            votes.shape(),
            &[shape.child_types, shape.parent_types, shape.dim],
        )),
    }
}

/// Softmax over parent types of `logits` `(n, i, j, p)`.
pub fn coupling<T: Scalar>(logits: &[T], n: usize, shape: RouteShape, plane: usize) -> Vec<T> {
    let (ti, tj) = (shape.child_types, shape.parent_types);
    let mut c = vec![T::zero(); logits.len()];
    for ni in 0..n {
        for i in 0..ti {
            for p in 0..plane {
                let at = |j: usize| ((ni * ti + i) * tj + j) * plane + p;
                let max = (0..tj).map(|j| logits[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..tj {
                    let e = (logits[at(j)] - max).exp();
                    c[at(j)] = e;
                    total = total + e;
                }
                for j in 0..tj {
                    c[at(j)] = c[at(j)] / total;
                }
            }
        }
    }
    c
}

pub(crate) fn route_sum<T: Scalar>(
    votes: &Tensor<T>,
    logits: &Tensor<T>,
    shape: RouteShape,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, h, w) = check_votes("route_sum", votes, shape)?;
    if logits.shape() != [n, shape.logit_channels(), h, w] {
        return Err(Error::shape("route_sum", votes.shape(), logits.shape()));
    }
    let plane = h * w;
    let (ti, tj, dim) = (shape.child_types, shape.parent_types, shape.dim);
    let c = coupling(logits.data(), n, shape, plane);
    let mut out = Tensor::zeros(&[n, shape.parent_channels(), h, w]);
    let (ud, od) = (votes.data(), out.data_mut());
    for ni in 0..n {
        for j in 0..tj {
            for a in 0..dim {
                let dst = &mut od[((ni * tj + j) * dim + a) * plane..][..plane];
                for i in 0..ti {
                    let cc = &c[((ni * ti + i) * tj + j) * plane..][..plane];
                    let uu = &ud[(((ni * ti + i) * tj + j) * dim + a) * plane..][..plane];
                    for p in 0..plane {
                        dst[p] = dst[p] + cc[p] * uu[p];
                    }
                }
            }
        }
    }
    Ok((out, c))
}

pub(crate) fn route_sum_backward<T: Scalar>(
    votes: &Tensor<T>,
    c: &[T],
    shape: RouteShape,
    g: &Tensor<T>,
    need_votes: bool,
    need_logits: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, _, h, w) = votes.dims4().expect("NCHW");
    let plane = h * w;
    let (ti, tj, dim) = (shape.child_types, shape.parent_types, shape.dim);
    let (ud, gd) = (votes.data(), g.data());
    let gu = need_votes.then(|| {
        let mut gu = Tensor::zeros(votes.shape());
        let gud = gu.data_mut();
        for ni in 0..n {
            for i in 0..ti {
                for j in 0..tj {
                    let cc = &c[((ni * ti + i) * tj + j) * plane..][..plane];
                    for a in 0..dim {
                        let src = &gd[((ni * tj + j) * dim + a) * plane..][..plane];
                        let dst = &mut gud[(((ni * ti + i) * tj + j) * dim + a) * plane..][..plane];
                        for p in 0..plane {
                            dst[p] = cc[p] * src[p];
                        }
                    }
                }
            }
        }
        gu
    });
    let gb = need_logits.then(|| {
        // dL/dc_ij = Σ_a g_ja û_ija; softmax Jacobian: dL/db_ij = c_ij (dL/dc_ij − Σ_k c_ik dL/dc_ik)
        let mut gc = vec![T::zero(); c.len()];
        for ni in 0..n {
            for i in 0..ti {
                for j in 0..tj {
                    let dst = &mut gc[((ni * ti + i) * tj + j) * plane..][..plane];
                    for a in 0..dim {
                        let src = &gd[((ni * tj + j) * dim + a) * plane..][..plane];
                        let uu = &ud[(((ni * ti + i) * tj + j) * dim + a) * plane..][..plane];
                        for p in 0..plane {
                            dst[p] = dst[p] + src[p] * uu[p];
                        }
                    }
                }
            }
        }
        let mut gb = Tensor::zeros(&[n, shape.logit_channels(), h, w]);
        let gbd = gb.data_mut();
        for ni in 0..n {
            for i in 0..ti {
                for p in 0..plane {
                    let at = |j: usize| ((ni * ti + i) * tj + j) * plane + p;
                    let dot = (0..tj).fold(T::zero(), |acc, j| acc + c[at(j)] * gc[at(j)]);
                    for j in 0..tj {
                        gbd[at(j)] = c[at(j)] * (gc[at(j)] - dot);
                    }
                }
            }
        }
        gb
    });
    (gu, gb)
}

pub(crate) fn agreement<T: Scalar>(votes: &Tensor<T>, parents: &Tensor<T>, shape: RouteShape) -> Result<Tensor<T>> {
    let (n, h, w) = check_votes("agreement", votes, shape)?;
    if parents.shape() != [n, shape.parent_channels(), h, w] {
        return Err(Error::shape("agreement", votes.shape(), parents.shape()));
    }
    let plane = h * w;
    let (ti, tj, dim) = (shape.child_types, shape.parent_types, shape.dim);
    let mut out = Tensor::zeros(&[n, shape.logit_channels(), h, w]);
    let (ud, vd, od) = (votes.data(), parents.data(), out.data_mut());
    for ni in 0..n {
        for i in 0..ti {
            for j in 0..tj {
                let dst = &mut od[((ni * ti + i) * tj + j) * plane..][..plane];
                for a in 0..dim {
                    let uu = &ud[(((ni * ti + i) * tj + j) * dim + a) * plane..][..plane];
                    let vv = &vd[((ni * tj + j) * dim + a) * plane..][..plane];
                    for p in 0..plane {
                        dst[p] = dst[p] + uu[p] * vv[p];
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn agreement_backward<T: Scalar>(
    votes: &Tensor<T>,
    parents: &Tensor<T>,
    shape: RouteShape,
    g: &Tensor<T>,
    need_votes: bool,
    need_parents: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, _, h, w) = votes.dims4().expect("NCHW");
    let plane = h * w;
    let (ti, tj, dim) = (shape.child_types, shape.parent_types, shape.dim);
    let (ud, vd, gd) = (votes.data(), parents.data(), g.data());
    let gu = need_votes.then(|| {
        let mut gu = Tensor::zeros(votes.shape());
        let gud = gu.data_mut();
        for ni in 0..n {
            for i in 0..ti {
                for j in 0..tj {
                    let gg = &gd[((ni * ti + i) * tj + j) * plane..][..plane];
                    for a in 0..dim {
                        let vv = &vd[((ni * tj + j) * dim + a) * plane..][..plane];
                        let dst = &mut gud[(((ni * ti + i) * tj + j) * dim + a) * plane..][..plane];
                        for p in 0..plane {
                            dst[p] = gg[p] * vv[p];
                        }
                    }
                }
            }
        }
        gu
    });
    let gv = need_parents.then(|| {
        let mut gv = Tensor::zeros(parents.shape());
        let gvd = gv.data_mut();
        for ni in 0..n {
            for j in 0..tj {
                for a in 0..dim {
                    let dst = &mut gvd[((ni * tj + j) * dim + a) * plane..][..plane];
                    for i in 0..ti {
                        let gg = &gd[((ni * ti + i) * tj + j) * plane..][..plane];
                        let uu = &ud[(((ni * ti + i) * tj + j) * dim + a) * plane..][..plane];
                        for p in 0..plane {
                            dst[p] = dst[p] + gg[p] * uu[p];
                        }
                    }
                }
            }
        }
        gv
    });
    (gu, gv)
}
