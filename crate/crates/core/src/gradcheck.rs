//! Central finite-difference checks of analytic gradients.
//!
//! The function under test is reduced to `L = Σ r ⊙ f(x)` with a fixed random
//! weighting `r`. Small inputs are probed coordinate by coordinate and scored with
//! `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-6)`; larger ones are probed along random unit
//! directions `d`, comparing `⟨∇L, d⟩` with the difference quotient, scored with
//! `|a − n| / max(|a|, |n|, 1e-6)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{ConvSpec, Graph, RouteShape, UpsampleMode, Var};
use crate::blocks::{AttentionGate, CapsuleGate, Coupling, ResBlock};
use crate::capsule::{dynamic_routing, CapsuleLayerConfig, Capsules, ConvCapsule};
use crate::error::Result;
use crate::loss::{hybrid_loss, LossTargets, LossWeights};
use crate::mask::{class_masks, Mask};
use crate::model::{CadUnet, ModelConfig, ModelOutput};
use crate::params::{Builder, Mode, ParamStore, RunningStats, Session};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
/// Step sizes tried in turn when a probe straddles a kink.
const STEPS: [f64; 3] = [STEP, STEP / 10.0, STEP / 100.0];
/// Inputs up to this many elements are probed coordinate by coordinate.
pub const COORDINATE_LIMIT: usize = 96;
/// Give up (and fail) after discarding this many probes in one check.
pub const MAX_DISCARDED: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Probe {
    /// Coordinates for small inputs, this many random directions per large input.
    PerInput(usize),
    /// This many random directions over all inputs jointly.
    Joint(usize),
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
    pub tolerance: f64,
    /// Probes discarded because they straddled a kink at every step size.
    pub skipped: usize,
    /// Smallest step that had to be used.
    pub min_step: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn weighted_sum(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Check `f` at `inputs`; `tolerance` is only recorded in the report.
///
/// A probe whose two evaluation points fall on different branches of a ReLU or
/// max-pool (see [`Graph::branch_pattern`]) measures the kink rather than the
/// derivative. It is retried with smaller steps; if every step straddles, the
/// coordinate is skipped or the direction redrawn, and the count is reported.
pub fn gradcheck<F>(name: &str, inputs: &[Tensor<f64>], seed: u64, probe: Probe, tolerance: f64, mut f: F) -> Result<GradReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = f(&mut g, &vars)?;
    let pattern = g.branch_pattern();
    let r = Tensor::from_fn(g.shape(y), |_| rng.sample::<f64, _>(StandardNormal));
    let rv = g.constant(r.clone());
    let prod = g.mul(y, rv)?;
    let loss = g.sum(prod)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(&g, v)).collect();

    let mut eval = |xs: &[Tensor<f64>]| -> Result<(f64, Vec<usize>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        Ok((weighted_sum(g.value(y), &r), g.branch_pattern()))
    };
    // (analytic, numeric), or None when every step size straddles a kink
    let mut min_step = STEP;
    let mut directional = |dirs: &[Tensor<f64>]| -> Result<Option<(f64, f64)>> {
        for step in STEPS {
            let shifted = |sign: f64| -> Vec<Tensor<f64>> {
                inputs
                    .iter()
                    .zip(dirs)
                    .map(|(x, d)| Tensor::from_fn(x.shape(), |k| x.data()[k] + sign * step * d.data()[k]))
                    .collect()
            };
            let (plus, above) = eval(&shifted(1.0))?;
            let (minus, below) = eval(&shifted(-1.0))?;
            if above == pattern && below == pattern {
                min_step = min_step.min(step);
                let numeric = (plus - minus) / (2.0 * step);
                let exact = analytic.iter().zip(dirs).map(|(a, d)| weighted_sum(a, d)).sum();
                return Ok(Some((exact, numeric)));
            }
        }
        Ok(None)
    };
    let random_unit = |rng: &mut ChaCha8Rng, which: Option<usize>| -> Vec<Tensor<f64>> {
        let mut dirs: Vec<Tensor<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                Tensor::from_fn(x.shape(), |_| {
                    if which.is_none_or(|w| w == i) {
                        rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        let norm = dirs.iter().flat_map(|d| d.data()).map(|v| v * v).sum::<f64>().sqrt();
        for d in &mut dirs {
            d.data_mut().iter_mut().for_each(|v| *v /= norm);
        }
        dirs
    };

    let mut skipped = 0;
    // worst error over `count` accepted random directions
    type Directional<'a> = dyn FnMut(&[Tensor<f64>]) -> Result<Option<(f64, f64)>> + 'a;
    let random_probes = |directional: &mut Directional<'_>,
                         rng: &mut ChaCha8Rng,
                         which: Option<usize>,
                         count: usize,
                         skipped: &mut usize|
     -> Result<f64> {
        let mut worst = 0.0f64;
        let mut accepted = 0;
        while accepted < count {
            if *skipped > MAX_DISCARDED {
                return Ok(f64::INFINITY);
            }
            match directional(&random_unit(rng, which))? {
                Some((a, n)) => {
                    worst = worst.max(rel(a, n));
                    accepted += 1;
                }
                None => *skipped += 1,
            }
        }
        Ok(worst)
    };

    let mut per_input = Vec::new();
    match probe {
        Probe::PerInput(count) => {
            for (i, x) in inputs.iter().enumerate() {
                let err = if x.numel() <= COORDINATE_LIMIT {
                    let mut worst_diff = 0.0f64;
                    let mut scale = 0.0f64;
                    for k in 0..x.numel() {
                        let dirs: Vec<Tensor<f64>> = inputs
                            .iter()
                            .enumerate()
                            .map(|(j, t)| Tensor::from_fn(t.shape(), |q| (j == i && q == k) as u8 as f64))
                            .collect();
                        match directional(&dirs)? {
                            Some((a, n)) => {
                                worst_diff = worst_diff.max((a - n).abs());
                                scale = scale.max(a.abs()).max(n.abs());
                            }
                            None => skipped += 1,
                        }
                    }
                    worst_diff / scale.max(1e-6)
                } else {
                    random_probes(&mut directional, &mut rng, Some(i), count, &mut skipped)?
                };
                per_input.push(err);
            }
        }
        Probe::Joint(count) => per_input.push(random_probes(&mut directional, &mut rng, None, count, &mut skipped)?),
    }
    Ok(GradReport {
        min_step,
        name: name.to_string(),
        seed,
        max_rel_err: per_input.iter().copied().fold(0.0, f64::max),
        per_input,
        tolerance,
        skipped,
    })
}

/// Values with magnitude in [0.1, 1] and random sign, away from ReLU kinks.
pub fn sample_input(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type CaseFn = Box<dyn FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One registered check instantiated for a seed.
pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub probe: Probe,
    pub tolerance: f64,
    pub f: CaseFn,
}

pub struct Registered {
    pub name: &'static str,
    pub build: fn(u64) -> Result<Case>,
}

fn op_case(inputs: Vec<Tensor<f64>>, f: impl FnMut(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        inputs,
        probe: Probe::PerInput(4),
        tolerance: 1e-4,
        f: Box::new(f),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Inputs `[x, params...]` for a parameterised block; parameters are jittered
/// so biases and affine terms are not at their neutral initial values.
fn block_case<B: 'static>(
    seed: u64,
    x_shapes: &[&[usize]],
    build: impl FnOnce(&mut Builder<'_, f64, ChaCha8Rng>) -> B,
    forward: impl Fn(&B, &mut Session<'_, f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    let block = {
        let mut init = rng(seed.wrapping_add(1));
        build(&mut Builder::new(&mut store, &mut init))
    };
    let mut inputs: Vec<Tensor<f64>> = x_shapes.iter().map(|s| sample_input(s, &mut r)).collect();
    for p in store.params() {
        let jitter = Tensor::from_fn(p.value.shape(), |_| 0.2 * r.sample::<f64, _>(StandardNormal));
        inputs.push(Tensor::from_fn(p.value.shape(), |k| p.value.data()[k] + jitter.data()[k]));
    }
    let n_x = x_shapes.len();
    let mut stats: Vec<RunningStats<f64>> = store.stats().to_vec();
    op_case(inputs, move |g, vars| {
        let mut s = Session::with_vars(g, vars[n_x..].to_vec(), &mut stats, Mode::Train);
        forward(&block, &mut s, &vars[..n_x])
    })
}

fn micro_targets(seed: u64, n: usize, h: usize, w: usize) -> Result<LossTargets<f64>> {
    let mut r = rng(seed);
    let mut infection = Vec::new();
    let mut lung = Vec::new();
    for k in 0..n {
        let labels: Vec<u8> = (0..h * w).map(|_| r.random_range(0..3u8)).collect();
        infection.push(class_masks(h, w, &labels, 1)?);
        lung.push((k % 2 == 0).then(|| Mask::from_fn(h, w, |i, j| (i + j) % 3 != 0)));
    }
    LossTargets::from_masks(&infection, &lung)
}

pub fn registry() -> Vec<Registered> {
    vec![
        Registered {
            name: "add",
            build: |s| {
                let mut r = rng(s);
                let x = vec![sample_input(&[2, 3, 2, 2], &mut r), sample_input(&[2, 3, 2, 2], &mut r)];
                Ok(op_case(x, |g, v| g.add(v[0], v[1])))
            },
        },
        Registered {
            name: "mul",
            build: |s| {
                let mut r = rng(s);
                let x = vec![sample_input(&[2, 3, 2, 2], &mut r), sample_input(&[2, 3, 2, 2], &mut r)];
                Ok(op_case(x, |g, v| g.mul(v[0], v[1])))
            },
        },
        Registered {
            name: "scale",
            build: |s| Ok(op_case(vec![sample_input(&[2, 3, 3], &mut rng(s))], |g, v| g.scale(v[0], -1.7))),
        },
        Registered {
            name: "relu",
            build: |s| Ok(op_case(vec![sample_input(&[2, 2, 3, 3], &mut rng(s))], |g, v| g.relu(v[0]))),
        },
        Registered {
            name: "sigmoid",
            build: |s| {
                let x = sample_input(&[2, 2, 3, 3], &mut rng(s)).map(|v| 4.0 * v);
                Ok(op_case(vec![x], |g, v| g.sigmoid(v[0])))
            },
        },
        Registered {
            name: "concat",
            build: |s| {
                let mut r = rng(s);
                let x = vec![sample_input(&[2, 2, 3, 3], &mut r), sample_input(&[2, 3, 3, 3], &mut r)];
                Ok(op_case(x, |g, v| g.concat(&[v[0], v[1], v[0]])))
            },
        },
        Registered {
            name: "add_channel_bias",
            build: |s| {
                let mut r = rng(s);
                let x = vec![sample_input(&[2, 3, 3, 3], &mut r), sample_input(&[3], &mut r)];
                Ok(op_case(x, |g, v| g.add_channel_bias(v[0], v[1])))
            },
        },
        Registered {
            name: "mul_channels",
            build: |s| {
                let mut r = rng(s);
                let x = vec![sample_input(&[2, 3, 3, 3], &mut r), sample_input(&[2, 1, 3, 3], &mut r)];
                Ok(op_case(x, |g, v| g.mul_channels(v[0], v[1])))
            },
        },
        Registered {
            name: "conv2d",
            build: |s| {
                let mut r = rng(s);
                let x = vec![sample_input(&[1, 2, 5, 5], &mut r), sample_input(&[3, 2, 3, 3], &mut r)];
                Ok(op_case(x, |g, v| g.conv2d(v[0], v[1], ConvSpec::same(3))))
            },
        },
        Registered {
            name: "conv2d_strided_grouped",
            build: |s| {
                let mut r = rng(s);
                let x = vec![sample_input(&[2, 4, 7, 6], &mut r), sample_input(&[6, 2, 5, 5], &mut r)];
                Ok(op_case(x, |g, v| g.conv2d(v[0], v[1], ConvSpec::new(2, 2).with_groups(2))))
            },
        },
        Registered {
            name: "maxpool2",
            build: |s| Ok(op_case(vec![sample_input(&[2, 2, 4, 6], &mut rng(s))], |g, v| g.max_pool2(v[0]))),
        },
        Registered {
            name: "upsample2_bilinear",
            build: |s| {
                let x = vec![sample_input(&[2, 2, 3, 3], &mut rng(s))];
                Ok(op_case(x, |g, v| g.upsample2(v[0], UpsampleMode::Bilinear)))
            },
        },
        Registered {
            name: "upsample2_nearest",
            build: |s| {
                let x = vec![sample_input(&[2, 2, 3, 3], &mut rng(s))];
                Ok(op_case(x, |g, v| g.upsample2(v[0], UpsampleMode::Nearest)))
            },
        },
        Registered {
            name: "batchnorm_train",
            build: |s| {
                let mut r = rng(s);
                let x = vec![
                    sample_input(&[3, 2, 3, 3], &mut r),
                    sample_input(&[2], &mut r),
                    sample_input(&[2], &mut r),
                ];
                Ok(op_case(x, |g, v| Ok(g.batch_norm_train(v[0], v[1], v[2])?.0)))
            },
        },
        Registered {
            name: "batchnorm_eval",
            build: |s| {
                let mut r = rng(s);
                let x = vec![
                    sample_input(&[2, 2, 3, 3], &mut r),
                    sample_input(&[2], &mut r),
                    sample_input(&[2], &mut r),
                ];
                Ok(op_case(x, |g, v| g.batch_norm_eval(v[0], v[1], v[2], &[0.3, -0.2], &[1.5, 0.7])))
            },
        },
        Registered {
            name: "squash",
            build: |s| {
                let x = sample_input(&[2, 16, 2, 1], &mut rng(s)).map(|v| 1.5 * v);
                Ok(op_case(vec![x], |g, v| g.squash(v[0], 8)))
            },
        },
        Registered {
            name: "route_sum",
            build: |s| {
                let mut r = rng(s);
                let shape = RouteShape {
                    child_types: 2,
                    parent_types: 3,
                    dim: 2,
                };
                let x = vec![sample_input(&[1, 12, 2, 2], &mut r), sample_input(&[1, 6, 2, 2], &mut r)];
                Ok(op_case(x, move |g, v| g.route_sum(v[0], v[1], shape)))
            },
        },
        Registered {
            name: "agreement",
            build: |s| {
                let mut r = rng(s);
                let shape = RouteShape {
                    child_types: 2,
                    parent_types: 3,
                    dim: 2,
                };
                let x = vec![sample_input(&[1, 12, 2, 2], &mut r), sample_input(&[1, 6, 2, 2], &mut r)];
                Ok(op_case(x, move |g, v| g.agreement(v[0], v[1], shape)))
            },
        },
        Registered {
            name: "bce_with_logits",
            build: |s| {
                let mut r = rng(s);
                let x = sample_input(&[3, 1, 3, 3], &mut r).map(|v| 3.0 * v);
                let t = Tensor::from_fn(&[3, 1, 3, 3], |_| r.random_bool(0.5) as u8 as f64);
                Ok(op_case(vec![x], move |g, v| g.bce_with_logits(v[0], &t, Some(&[true, false, true]))))
            },
        },
        Registered {
            name: "dynamic_routing_r3",
            build: |s| {
                let shape = RouteShape {
                    child_types: 3,
                    parent_types: 2,
                    dim: 4,
                };
                let x = sample_input(&[1, 24, 2, 2], &mut rng(s)).map(|v| 1.5 * v);
                Ok(op_case(vec![x], move |g, v| Ok(dynamic_routing(g, v[0], shape, 3, None)?.var)))
            },
        },
        Registered {
            name: "conv_capsule_r3",
            build: |s| {
                Ok(block_case(
                    s,
                    &[&[1, 6, 6, 6]],
                    |b| ConvCapsule::new(b, "caps", CapsuleLayerConfig::new((2, 3), (2, 4), 3)),
                    |layer, sess, x| {
                        let caps = Capsules::new(sess.graph, x[0], 2, 3)?;
                        Ok(layer.forward(sess, &caps)?.var)
                    },
                ))
            },
        },
        Registered {
            name: "resblock",
            build: |s| {
                Ok(block_case(
                    s,
                    &[&[2, 3, 4, 4]],
                    |b| ResBlock::new(b, "rb", 3, 4),
                    |block, sess, x| block.forward(sess, x[0]),
                ))
            },
        },
        Registered {
            name: "attention_gate",
            build: |s| {
                Ok(block_case(
                    s,
                    &[&[2, 3, 4, 4], &[2, 4, 4, 4]],
                    |b| AttentionGate::new(b, "ag", 3, 4, 2),
                    |gate, sess, x| gate.forward(sess, x[0], x[1]),
                ))
            },
        },
        Registered {
            name: "couple",
            build: |s| {
                Ok(block_case(
                    s,
                    &[&[2, 3, 3, 3], &[2, 4, 3, 3]],
                    |b| Coupling::new(b, "cp", 4, 3),
                    |c, sess, x| {
                        let caps = Capsules::new(sess.graph, x[1], 2, 2)?;
                        c.forward(sess, x[0], &caps)
                    },
                ))
            },
        },
        Registered {
            name: "capsule_gate",
            build: |s| {
                Ok(block_case(
                    s,
                    &[&[2, 4, 3, 3], &[2, 3, 3, 3]],
                    |b| CapsuleGate::new(b, "cg", 3, 4),
                    |c, sess, x| {
                        let caps = Capsules::new(sess.graph, x[0], 2, 2)?;
                        Ok(c.forward(sess, &caps, x[1])?.var)
                    },
                ))
            },
        },
        Registered {
            name: "hybrid_loss",
            build: |s| {
                let mut r = rng(s);
                let (h, w) = (4, 5);
                let targets = micro_targets(s, 2, h, w)?;
                let x = vec![
                    sample_input(&[2, 1, h, w], &mut r).map(|v| 3.0 * v),
                    sample_input(&[2, 1, h, w], &mut r).map(|v| 3.0 * v),
                    sample_input(&[2, 1, h, w], &mut r).map(|v| 3.0 * v),
                ];
                Ok(op_case(x, move |g, v| {
                    let out = ModelOutput {
                        infection_logits: v[0],
                        lung_logits: v[1],
                        edge_logits: v[2],
                    };
                    Ok(hybrid_loss(g, &out, &targets, &LossWeights::default())?.0)
                }))
            },
        },
        Registered {
            name: "micro_model",
            build: |s| {
                let (model, store) = CadUnet::init::<f64>(ModelConfig::micro(), s)?;
                let mut r = rng(s.wrapping_add(7));
                let mut inputs = vec![sample_input(&[2, 1, 16, 16], &mut r)];
                inputs.extend(store.params().iter().map(|p| p.value.clone()));
                let targets = micro_targets(s, 2, 16, 16)?;
                let mut stats = store.stats().to_vec();
                Ok(Case {
                    inputs,
                    probe: Probe::Joint(3),
                    tolerance: 1e-3,
                    f: Box::new(move |g, v| {
                        let mut sess = Session::with_vars(&mut *g, v[1..].to_vec(), &mut stats, Mode::Train);
                        let out = model.forward(&mut sess, v[0])?;
                        Ok(hybrid_loss(g, &out, &targets, &LossWeights::default())?.0)
                    }),
                })
            },
        },
    ]
}

pub fn run_case(entry: &Registered, seed: u64) -> Result<GradReport> {
    let Case {
        inputs,
        probe,
        tolerance,
        f,
    } = (entry.build)(seed)?;
    gradcheck(entry.name, &inputs, seed, probe, tolerance, f)
}

/// Every registered case for each of `seeds`.
pub fn run_suite(seeds: impl IntoIterator<Item = u64> + Clone, only: Option<&str>) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for entry in registry().iter().filter(|e| only.is_none_or(|n| n == e.name)) {
        for seed in seeds.clone() {
            out.push(run_case(entry, seed)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // x·stopgrad(x) has true derivative 2x but the graph reports x
        let x = vec![sample_input(&[3], &mut rng(1))];
        let report = gradcheck("bogus", &x, 0, Probe::PerInput(2), 1e-4, |g, v| {
            let c = g.constant(g.value(v[0]).clone());
            g.mul(v[0], c)
        })
        .unwrap();
        assert!(report.max_rel_err > 0.3, "{report:?}");
    }

    #[test]
    fn reports_are_deterministic() {
        let entry = registry().into_iter().find(|e| e.name == "conv2d").unwrap();
        let a = run_case(&entry, 3).unwrap();
        let b = run_case(&entry, 3).unwrap();
        assert_eq!(a.max_rel_err, b.max_rel_err);
        assert!(a.passed(), "{a:?}");
    }

    #[test]
    fn registry_names_are_unique() {
        let mut names: Vec<_> = registry().iter().map(|e| e.name).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn every_op_passes_on_two_seeds() {
        for entry in registry().iter().filter(|e| e.name != "micro_model") {
            for seed in 0..2 {
                let r = run_case(entry, seed).unwrap();
                assert!(r.passed(), "{r:?}");
            }
        }
    }
}
