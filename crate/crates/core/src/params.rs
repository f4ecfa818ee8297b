//! Named parameter storage, batch-norm running statistics, and the two leaf layers
//! (convolution and batch normalization) every block is built from.

use rand::Rng;

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Scalar> {
    pub name: String,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    /// `r ← (1 − m)·r + m·batch`, using the unbiased batch variance for `var`.
    pub fn update(&mut self, mean: &[T], biased_var: &[T], count: usize) {
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        let unbias = T::of(count as f64 / (count as f64 - 1.0));
        for (r, &b) in self.mean.data_mut().iter_mut().zip(mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(biased_var) {
            *r = keep * *r + m * b * unbias;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
    stats: Vec<RunningStats<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatId {
        self.stats.push(RunningStats {
            name: name.into(),
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        });
        StatId(self.stats.len() - 1)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    name: s.name.clone(),
                    mean: s.mean.cast(),
                    var: s.var.cast(),
                })
                .collect(),
        }
    }
}

/// Whether batch normalization uses batch statistics (and updates running ones).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: the graph, the graph handles of every parameter, and the
/// running statistics that training-mode batch norm updates.
pub struct Session<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    params: Vec<Var>,
    stats: &'a mut [RunningStats<T>],
    pub mode: Mode,
}

impl<'a, T: Scalar> Session<'a, T> {
    /// Copy every parameter into the graph as a gradient-tracking leaf.
    pub fn bind(graph: &'a mut Graph<T>, store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        let params = store
            .params
            .iter()
            .map(|p| graph.variable(p.value.clone()))
            .collect();
        Session {
            graph,
            params,
            stats: &mut store.stats,
            mode,
        }
    }

    /// Use caller-provided graph nodes as parameters (in store order).
    pub fn with_vars(
        graph: &'a mut Graph<T>,
        params: Vec<Var>,
        stats: &'a mut [RunningStats<T>],
        mode: Mode,
    ) -> Self {
        Session {
            graph,
            params,
            stats,
            mode,
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }
}

/// Allocates parameters with seeded He-normal initialisation.
pub struct Builder<'s, T: Scalar, R: Rng> {
    pub store: &'s mut ParamStore<T>,
    pub rng: &'s mut R,
}

impl<'s, T: Scalar, R: Rng> Builder<'s, T, R> {
    pub fn new(store: &'s mut ParamStore<T>, rng: &'s mut R) -> Self {
        Builder { store, rng }
    }

    pub fn conv(&mut self, name: &str, out: usize, input: usize, kernel: usize, spec: ConvSpec, bias: bool) -> Conv {
        self.conv_with_gain(name, out, input, kernel, spec, bias, 2.0)
    }

    /// Variance `gain / fan_in`; gain 2 suits ReLU layers, 1 linear ones.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_with_gain(
        &mut self,
        name: &str,
        out: usize,
        input: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
        gain: f64,
    ) -> Conv {
        let per_group = input / spec.groups;
        let fan_in = (per_group * kernel * kernel) as f64;
        let w = Tensor::randn(&[out, per_group, kernel, kernel], (gain / fan_in).sqrt(), self.rng);
        let weight = self.store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| self.store.add(format!("{name}.bias"), Tensor::zeros(&[out])));
        Conv {
            weight,
            bias,
            spec,
            out_channels: out,
        }
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            stats: self.store.add_stats(name, channels),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub out_channels: usize,
}

impl Conv {
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = s.graph.conv2d(x, s.param(self.weight), self.spec)?;
        match self.bias {
            Some(b) => s.graph.add_channel_bias(y, s.param(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatId,
}

impl BatchNorm {
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (s.param(self.gamma), s.param(self.beta));
        match s.mode {
            Mode::Train => {
                let (y, moments) = s.graph.batch_norm_train(x, gamma, beta)?;
                let stats = s
                    .stats
                    .get_mut(self.stats.0)
                    .ok_or_else(|| Error::Config("batch-norm statistics missing".into()))?;
                stats.update(&moments.mean, &moments.var, moments.count);
                Ok(y)
            }
            Mode::Eval => {
                let stats = s
                    .stats
                    .get(self.stats.0)
                    .ok_or_else(|| Error::Config("batch-norm statistics missing".into()))?;
                let (mean, var) = (stats.mean.data().to_vec(), stats.var.data().to_vec());
                s.graph.batch_norm_eval(x, gamma, beta, &mean, &var)
            }
        }
    }
}
