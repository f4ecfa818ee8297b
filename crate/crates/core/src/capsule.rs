//! Convolutional capsules with locally-constrained dynamic routing.
//!
//! A capsule grid of `T` types with `A`-dimensional poses is an NCHW tensor with
//! `C = T·A` channels, flattened type-major (channel `t·A + a`). Votes come from a
//! convolution grouped by child type, so one `A_in → T_out·A_out` kernel per child
//! type is shared across all positions; routing then runs over child types at each
//! output position.

use rand::Rng;

use crate::autodiff::{capsule_coupling, ConvSpec, Graph, RouteShape, Var};
use crate::error::{Error, Result};
use crate::params::{Builder, Conv, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A capsule grid living in a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Capsules {
    pub var: Var,
    pub types: usize,
    pub dim: usize,
}

impl Capsules {
    pub fn new<T: Scalar>(g: &Graph<T>, var: Var, types: usize, dim: usize) -> Result<Self> {
        match g.value(var).dims4() {
            Some((_, c, _, _)) if c == types * dim => Ok(Capsules { var, types, dim }),
            _ => Err(Error::Config(format!(
                "tensor {:?} cannot hold {types} capsule types of dimension {dim}",
                g.shape(var)
            ))),
        }
    }

    /// `(H, W, T, A)` of the grid.
    pub fn grid_shape<T: Scalar>(&self, g: &Graph<T>) -> [usize; 4] {
        let s = g.shape(self.var);
        [s[2], s[3], self.types, self.dim]
    }

    /// Pose vector of capsule `t` at `(n, h, w)`.
    pub fn pose<T: Scalar>(&self, g: &Graph<T>, n: usize, h: usize, w: usize, t: usize) -> Vec<T> {
        let v = g.value(self.var);
        (0..self.dim).map(|a| v.at4(n, t * self.dim + a, h, w)).collect()
    }

    /// Euclidean norms of every capsule, ordered (n, t, h, w).
    pub fn norms<T: Scalar>(&self, g: &Graph<T>) -> Vec<f64> {
        let v = g.value(self.var);
        let (n, _, h, w) = v.dims4().expect("NCHW capsules");
        let mut out = Vec::with_capacity(n * self.types * h * w);
        for ni in 0..n {
            for t in 0..self.types {
                for i in 0..h {
                    for j in 0..w {
                        let q: f64 = (0..self.dim)
                            .map(|a| v.at4(ni, t * self.dim + a, i, j).f64().powi(2))
                            .sum();
                        out.push(q.sqrt());
                    }
                }
            }
        }
        out
    }
}

/// Squash of a plain vector, outside any graph.
pub fn squash_vector(s: &[f64]) -> Vec<f64> {
    let t = Tensor::<f64>::new(&[1, s.len()], s.to_vec()).expect("non-empty vector");
    let mut g = Graph::<f64>::new();
    let v = g.constant(t);
    let out = g.squash(v, s.len()).expect("dimension divides itself");
    g.value(out).data().to_vec()
}

/// Coupling coefficients recorded after each routing iteration.
#[derive(Clone, Debug, Default)]
pub struct RoutingTrace {
    /// One entry per iteration, laid out `(n, child type, parent type, position)`.
    pub coupling: Vec<Vec<f64>>,
    /// Logits in effect at each iteration (all zero for the first).
    pub logits: Vec<Vec<f64>>,
    pub shape: Option<RouteShape>,
    pub batch: usize,
    pub positions: usize,
}

impl RoutingTrace {
    /// Largest |Σ_j c_ij − 1| over every iteration, sample, child type and position.
    pub fn max_coupling_sum_error(&self) -> f64 {
        let Some(shape) = self.shape else { return 0.0 };
        let (ti, tj, p) = (shape.child_types, shape.parent_types, self.positions);
        let mut worst = 0.0f64;
        for c in &self.coupling {
            for n in 0..self.batch {
                for i in 0..ti {
                    for pos in 0..p {
                        let s: f64 = (0..tj).map(|j| c[((n * ti + i) * tj + j) * p + pos]).sum();
                        worst = worst.max((s - 1.0).abs());
                    }
                }
            }
        }
        worst
    }
}

/// Iterative routing-by-agreement over `votes` `(n, i·j·a, h, w)`.
///
/// Logits start at zero on every call; each iteration computes
/// `c = softmax_j(b)`, `s_j = Σ_i c_ij û_ij`, `v_j = squash(s_j)` and, when another
/// iteration follows, `b_ij += ⟨û_ij, v_j⟩`. Every step stays on the graph.
pub fn dynamic_routing<T: Scalar>(
    g: &mut Graph<T>,
    votes: Var,
    shape: RouteShape,
    iterations: usize,
    mut trace: Option<&mut RoutingTrace>,
) -> Result<Capsules> {
    if iterations < 1 {
        return Err(Error::Config("dynamic routing needs at least one iteration".into()));
    }
    let (n, _, h, w) = g
        .value(votes)
        .dims4()
        .ok_or_else(|| Error::Invalid("votes must be NCHW".into()))?;
    let mut logits = g.constant(Tensor::zeros(&[n, shape.logit_channels(), h, w]));
    if let Some(t) = trace.as_deref_mut() {
        *t = RoutingTrace {
            shape: Some(shape),
            batch: n,
            positions: h * w,
            ..RoutingTrace::default()
        };
    }
    let mut parents = None;
    for it in 0..iterations {
        if let Some(t) = trace.as_deref_mut() {
            let b = g.value(logits).data();
            t.logits.push(b.iter().map(|v| v.f64()).collect());
            let c = capsule_coupling(b, n, shape, h * w);
            t.coupling.push(c.iter().map(|v| v.f64()).collect());
        }
        let s = g.route_sum(votes, logits, shape)?;
        let v = g.squash(s, shape.dim)?;
        if it + 1 < iterations {
            let agree = g.agreement(votes, v, shape)?;
            logits = g.add(logits, agree)?;
        }
        parents = Some(v);
    }
    Ok(Capsules {
        var: parents.expect("at least one iteration"),
        types: shape.parent_types,
        dim: shape.dim,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CapsuleLayerConfig {
    pub child_types: usize,
    pub child_dim: usize,
    pub parent_types: usize,
    pub parent_dim: usize,
    pub iterations: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl CapsuleLayerConfig {
    /// 5×5 kernel, stride 2.
    pub fn new(child: (usize, usize), parent: (usize, usize), iterations: usize) -> Self {
        CapsuleLayerConfig {
            child_types: child.0,
            child_dim: child.1,
            parent_types: parent.0,
            parent_dim: parent.1,
            iterations,
            kernel: 5,
            stride: 2,
        }
    }

    pub fn route_shape(&self) -> RouteShape {
        RouteShape {
            child_types: self.child_types,
            parent_types: self.parent_types,
            dim: self.parent_dim,
        }
    }

    fn conv_spec(&self) -> ConvSpec {
        ConvSpec::new(self.stride, self.kernel / 2).with_groups(self.child_types)
    }
}

/// Convolutional capsule layer: grouped-convolution votes followed by dynamic routing.
#[derive(Clone, Debug)]
pub struct ConvCapsule {
    pub config: CapsuleLayerConfig,
    pub transforms: Conv,
}

impl ConvCapsule {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, config: CapsuleLayerConfig) -> Self {
        let transforms = b.conv_with_gain(
            &format!("{name}.transforms"),
            config.child_types * config.parent_types * config.parent_dim,
            config.child_types * config.child_dim,
            config.kernel,
            config.conv_spec(),
            false,
            1.0,
        );
        ConvCapsule { config, transforms }
    }

    /// Votes `û` for every (child type, parent type) pair at each output position.
    pub fn votes<T: Scalar>(&self, s: &mut Session<'_, T>, input: &Capsules) -> Result<Var> {
        let c = &self.config;
        if input.types != c.child_types || input.dim != c.child_dim {
            return Err(Error::Config(format!(
                "capsule layer expects {}x{} child capsules, got {}x{}",
                c.child_types, c.child_dim, input.types, input.dim
            )));
        }
        self.transforms.forward(s, input.var)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, input: &Capsules) -> Result<Capsules> {
        self.forward_traced(s, input, None)
    }

    pub fn forward_traced<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        input: &Capsules,
        trace: Option<&mut RoutingTrace>,
    ) -> Result<Capsules> {
        let votes = self.votes(s, input)?;
        dynamic_routing(s.graph, votes, self.config.route_shape(), self.config.iterations, trace)
    }
}
