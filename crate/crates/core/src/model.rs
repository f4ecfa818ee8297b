//! The full network: a capsule encoder and a residual encoder coupled level by
//! level, followed by two independent attention-gated decoders (infection, lung).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvSpec, Graph, UpsampleMode, Var};
use crate::blocks::{AttentionGate, CapsuleGate, Coupling, ResBlock};
use crate::capsule::{CapsuleLayerConfig, Capsules, ConvCapsule};
use crate::error::{Error, Result};
use crate::params::{Builder, Conv, Mode, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub base_channels: usize,
    /// `(types, dim)` of every capsule grid, primary capsules first.
    pub capsule_schedule: Vec<(usize, usize)>,
    /// Routing iterations of each capsule layer after the primary one.
    pub routing_iterations: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub upsample: UpsampleMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 1,
            base_channels: 64,
            capsule_schedule: vec![(1, 16), (2, 16), (2, 32), (4, 32), (4, 64)],
            routing_iterations: vec![1, 3, 3, 3],
            num_classes: 1,
            upsample: UpsampleMode::Bilinear,
        }
    }
}

impl ModelConfig {
    /// Small preset used for tests and synthetic experiments.
    pub fn toy() -> Self {
        ModelConfig {
            base_channels: 16,
            ..ModelConfig::default()
        }
    }

    /// Tiny network for finite-difference checks.
    pub fn micro() -> Self {
        ModelConfig {
            base_channels: 4,
            capsule_schedule: vec![(1, 4), (2, 4), (2, 8), (4, 8), (4, 16)],
            ..ModelConfig::default()
        }
    }

    /// Number of pooling levels.
    pub fn depth(&self) -> usize {
        self.capsule_schedule.len().saturating_sub(1)
    }

    /// Spatial extents must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.depth()
    }

    /// Output channels of the residual block at each encoder level.
    pub fn skip_channels(&self) -> Vec<usize> {
        (0..=self.depth()).map(|l| self.base_channels << l).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_channels == 0 || self.base_channels == 0 {
            return fail("input and base channel counts must be positive".into());
        }
        if self.depth() < 1 {
            return fail("capsule schedule needs at least two entries".into());
        }
        if self.routing_iterations.len() != self.depth() {
            return fail(format!(
                "{} routing entries for {} capsule layers",
                self.routing_iterations.len(),
                self.depth()
            ));
        }
        if self.routing_iterations.contains(&0) {
            return fail("routing iterations must be at least 1".into());
        }
        if self.capsule_schedule.iter().any(|&(t, a)| t == 0 || a == 0) {
            return fail("capsule types and dimensions must be positive".into());
        }
        if !matches!(self.num_classes, 1 | 2) {
            return fail(format!("num_classes must be 1 or 2, got {}", self.num_classes));
        }
        Ok(())
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return Err(Error::Invalid(format!("model input must be NCHW, got {shape:?}")));
        };
        if *c != self.input_channels {
            return Err(Error::Config(format!(
                "model expects {} input channel(s), got {c}",
                self.input_channels
            )));
        }
        let d = self.divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::Config(format!(
                "input extent {h}x{w} must be divisible by {d}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub gates: Vec<AttentionGate>,
    pub blocks: Vec<ResBlock>,
    pub head: Conv,
}

impl Decoder {
    fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, config: &ModelConfig, outputs: usize) -> Self {
        let widths = config.skip_channels();
        let mut gates = Vec::new();
        let mut blocks = Vec::new();
        for level in (0..config.depth()).rev() {
            let (skip, below) = (widths[level], widths[level + 1]);
            gates.push(AttentionGate::new(b, &format!("{name}.ag{level}"), skip, below, (skip / 2).max(1)));
            blocks.push(ResBlock::new(b, &format!("{name}.rb{level}"), skip + below, skip));
        }
        let head = b.conv_with_gain(
            &format!("{name}.head"),
            outputs,
            config.base_channels,
            1,
            ConvSpec::same(1),
            true,
            1.0,
        );
        Decoder { gates, blocks, head }
    }

    /// Final feature map at input resolution, before the head.
    pub fn features<T: Scalar>(&self, s: &mut Session<'_, T>, skips: &[Var], mode: UpsampleMode) -> Result<Var> {
        let mut d = *skips.last().expect("encoder produces skips");
        for (k, (gate, block)) in self.gates.iter().zip(&self.blocks).enumerate() {
            let level = skips.len() - 2 - k;
            let up = s.graph.upsample2(d, mode)?;
            let att = gate.forward(s, skips[level], up)?;
            let cat = s.graph.concat(&[att, up])?;
            d = block.forward(s, cat)?;
        }
        Ok(d)
    }
}

/// Skip features and capsule grids from the encoder.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub skips: Vec<Var>,
    pub capsules: Vec<Capsules>,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub infection_logits: Var,
    pub lung_logits: Var,
    pub edge_logits: Var,
}

/// Concrete logits of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub infection: Tensor<f32>,
    pub lung: Tensor<f32>,
    pub edge: Tensor<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderId {
    Infection,
    Lung,
}

#[derive(Clone, Debug)]
pub struct CadUnet {
    pub config: ModelConfig,
    pub primary: Conv,
    pub capsule_layers: Vec<ConvCapsule>,
    /// Modulate capsule grid `l` by residual features before capsule layer `l + 1`.
    pub capsule_gates: Vec<CapsuleGate>,
    /// Feed capsule grid `l` into residual level `l`.
    pub couplings: Vec<Coupling>,
    pub encoder: Vec<ResBlock>,
    pub infection: Decoder,
    pub lung: Decoder,
    pub edge_head: Conv,
}

impl CadUnet {
    pub fn build<T: Scalar, R: Rng>(config: ModelConfig, b: &mut Builder<'_, T, R>) -> Result<Self> {
        config.validate()?;
        let widths = config.skip_channels();
        let schedule = &config.capsule_schedule;
        let caps_channels = |l: usize| schedule[l].0 * schedule[l].1;

        let primary = b.conv_with_gain(
            "caps0.conv",
            caps_channels(0),
            config.input_channels,
            5,
            ConvSpec::same(5),
            false,
            1.0,
        );
        let capsule_layers = (1..=config.depth())
            .map(|l| {
                let layer = CapsuleLayerConfig::new(schedule[l - 1], schedule[l], config.routing_iterations[l - 1]);
                ConvCapsule::new(b, &format!("caps{l}"), layer)
            })
            .collect();
        let capsule_gates = (1..config.depth())
            .map(|l| CapsuleGate::new(b, &format!("caps{l}.gate"), widths[l - 1], caps_channels(l)))
            .collect();
        let couplings = (1..=config.depth())
            .map(|l| Coupling::new(b, &format!("couple{l}"), caps_channels(l), widths[l - 1]))
            .collect();
        let mut encoder = vec![ResBlock::new(b, "enc0", config.input_channels, widths[0])];
        for (l, &w) in widths.iter().enumerate().skip(1) {
            encoder.push(ResBlock::new(b, &format!("enc{l}"), w, w));
        }
        let infection = Decoder::new(b, "inf", &config, config.num_classes);
        let lung = Decoder::new(b, "lung", &config, 1);
        let edge_head = b.conv_with_gain(
            "inf.edge_head",
            config.num_classes,
            config.base_channels,
            1,
            ConvSpec::same(1),
            true,
            1.0,
        );
        Ok(CadUnet {
            config,
            primary,
            capsule_layers,
            capsule_gates,
            couplings,
            encoder,
            infection,
            lung,
            edge_head,
        })
    }

    /// Build with fresh parameters drawn from `seed`.
    pub fn init<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = CadUnet::build(config, &mut Builder::new(&mut store, &mut rng))?;
        Ok((model, store))
    }

    pub fn encode<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Encoded> {
        self.config.check_input(s.graph.shape(x))?;
        let depth = self.config.depth();
        let (t0, a0) = self.config.capsule_schedule[0];

        let c0 = self.primary.forward(s, x)?;
        let mut capsules = vec![Capsules::new(s.graph, c0, t0, a0)?];
        capsules.push(self.capsule_layers[0].forward(s, &capsules[0])?);

        let mut skips = vec![self.encoder[0].forward(s, x)?];
        let mut out_prev = s.graph.max_pool2(skips[0])?;
        for l in 1..=depth {
            let input = self.couplings[l - 1].forward(s, out_prev, &capsules[l])?;
            let features = self.encoder[l].forward(s, input)?;
            skips.push(features);
            if l < depth {
                let gated = self.capsule_gates[l - 1].forward(s, &capsules[l], out_prev)?;
                capsules.push(self.capsule_layers[l].forward(s, &gated)?);
                out_prev = s.graph.max_pool2(features)?;
            }
        }
        Ok(Encoded { skips, capsules })
    }

    /// Decoder features and logits for one pathway.
    pub fn decode<T: Scalar>(&self, s: &mut Session<'_, T>, skips: &[Var], which: DecoderId) -> Result<(Var, Var)> {
        let decoder = match which {
            DecoderId::Infection => &self.infection,
            DecoderId::Lung => &self.lung,
        };
        let features = decoder.features(s, skips, self.config.upsample)?;
        let logits = decoder.head.forward(s, features)?;
        Ok((features, logits))
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<ModelOutput> {
        let encoded = self.encode(s, x)?;
        let (features, infection_logits) = self.decode(s, &encoded.skips, DecoderId::Infection)?;
        let edge_logits = self.edge_head.forward(s, features)?;
        let (_, lung_logits) = self.decode(s, &encoded.skips, DecoderId::Lung)?;
        Ok(ModelOutput {
            infection_logits,
            lung_logits,
            edge_logits,
        })
    }

    /// Evaluation-mode forward pass on a concrete batch.
    pub fn predict(&self, store: &mut ParamStore<f32>, x: &Tensor<f32>) -> Result<Predictions> {
        let mut g = Graph::new();
        let mut s = Session::bind(&mut g, store, Mode::Eval);
        let input = s.graph.constant(x.clone());
        let out = self.forward(&mut s, input)?;
        Ok(Predictions {
            infection: g.value(out.infection_logits).clone(),
            lung: g.value(out.lung_logits).clone(),
            edge: g.value(out.edge_logits).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(num_classes: usize) -> ModelConfig {
        ModelConfig {
            num_classes,
            ..ModelConfig::micro()
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = [
            ModelConfig {
                num_classes: 3,
                ..ModelConfig::toy()
            },
            ModelConfig {
                routing_iterations: vec![1, 3, 3],
                ..ModelConfig::toy()
            },
            ModelConfig {
                routing_iterations: vec![1, 0, 3, 3],
                ..ModelConfig::toy()
            },
            ModelConfig {
                capsule_schedule: vec![(1, 16)],
                routing_iterations: vec![],
                ..ModelConfig::toy()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn indivisible_extent_names_the_divisor() {
        let err = ModelConfig::toy().check_input(&[1, 1, 40, 48]).unwrap_err();
        assert!(err.to_string().contains("divisible by 16"), "{err}");
        assert!(ModelConfig::toy().check_input(&[1, 1, 48, 32]).is_ok());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = micro(2);
        let back: ModelConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn micro_forward_shapes() {
        for classes in [1, 2] {
            let (model, mut store) = CadUnet::init::<f32>(micro(classes), 1).unwrap();
            let mut g = Graph::new();
            let mut s = Session::bind(&mut g, &mut store, Mode::Train);
            let x = s.graph.constant(Tensor::zeros(&[2, 1, 32, 16]));
            let enc = model.encode(&mut s, x).unwrap();
            let sizes: Vec<[usize; 4]> = enc.capsules.iter().map(|c| c.grid_shape(s.graph)).collect();
            assert_eq!(
                sizes,
                vec![[32, 16, 1, 4], [16, 8, 2, 4], [8, 4, 2, 8], [4, 2, 4, 8], [2, 1, 4, 16]]
            );
            let out = model.forward(&mut s, x).unwrap();
            assert_eq!(s.graph.shape(out.infection_logits), &[2, classes, 32, 16]);
            assert_eq!(s.graph.shape(out.edge_logits), &[2, classes, 32, 16]);
            assert_eq!(s.graph.shape(out.lung_logits), &[2, 1, 32, 16]);
        }
    }

    #[test]
    fn zero_input_gives_zero_capsules() {
        let (model, mut store) = CadUnet::init::<f32>(micro(1), 2).unwrap();
        let mut g = Graph::new();
        let mut s = Session::bind(&mut g, &mut store, Mode::Train);
        let x = s.graph.constant(Tensor::zeros(&[2, 1, 16, 16]));
        let enc = model.encode(&mut s, x).unwrap();
        for caps in &enc.capsules {
            assert!(caps.norms(s.graph).iter().all(|&n| n == 0.0));
        }
    }

    #[test]
    fn decoders_do_not_share_parameters() {
        let (model, mut store) = CadUnet::init::<f64>(micro(1), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let mut s = Session::bind(&mut g, &mut store, Mode::Eval);
        let x = s.graph.constant(Tensor::randn(&[1, 1, 16, 16], 1.0, &mut rng));
        let enc = model.encode(&mut s, x).unwrap();
        let (a, _) = model.decode(&mut s, &enc.skips, DecoderId::Infection).unwrap();
        let (b, _) = model.decode(&mut s, &enc.skips, DecoderId::Lung).unwrap();
        assert!(s.graph.value(a).max_abs_diff(s.graph.value(b)) > 1e-6);
        let names = |d: &Decoder| {
            d.blocks
                .iter()
                .map(|b| b.first.0.weight)
                .chain(std::iter::once(d.head.weight))
                .collect::<Vec<_>>()
        };
        for id in names(&model.infection) {
            assert!(!names(&model.lung).contains(&id));
        }
    }

    #[test]
    fn every_encoder_parameter_receives_gradient_from_either_decoder() {
        let (model, mut store) = CadUnet::init::<f64>(micro(1), 5).unwrap();
        let decoder_prefixes = ["inf.", "lung."];
        let encoder_ids: Vec<usize> = store
            .params()
            .iter()
            .enumerate()
            .filter(|(_, p)| !decoder_prefixes.iter().any(|d| p.name.starts_with(d)))
            .map(|(i, _)| i)
            .collect();
        assert!(!encoder_ids.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[2, 1, 16, 16], 1.0, &mut rng);
        for which in [DecoderId::Infection, DecoderId::Lung] {
            let mut g = Graph::new();
            let mut s = Session::bind(&mut g, &mut store, Mode::Train);
            let xv = s.graph.constant(x.clone());
            let enc = model.encode(&mut s, xv).unwrap();
            let (_, logits) = model.decode(&mut s, &enc.skips, which).unwrap();
            let r = s.graph.constant(Tensor::randn(s.graph.shape(logits), 1.0, &mut rng));
            let prod = s.graph.mul(logits, r).unwrap();
            let loss = s.graph.sum(prod).unwrap();
            let vars = s.param_vars().to_vec();
            let grads = g.backward(loss).unwrap();
            for &i in &encoder_ids {
                let grad = grads.wrt(&g, vars[i]);
                assert!(
                    grad.data().iter().any(|&v| v != 0.0),
                    "{} unreachable from {which:?}",
                    store.params()[i].name
                );
            }
        }
    }

    #[test]
    fn eval_outputs_do_not_depend_on_batch_companions() {
        let (model, mut store) = CadUnet::init::<f32>(micro(2), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let one = Tensor::randn(&[1, 1, 16, 16], 1.0, &mut rng);
        let other = Tensor::randn(&[1, 1, 16, 16], 1.0, &mut rng);
        let single = model.predict(&mut store, &one).unwrap();
        let pair = model
            .predict(&mut store, &Tensor::cat_batch(&[one.clone(), other]).unwrap())
            .unwrap();
        assert_eq!(single.infection.data(), &pair.infection.data()[..single.infection.numel()]);
        assert_eq!(single.lung.data(), &pair.lung.data()[..single.lung.numel()]);
        assert_eq!(model.predict(&mut store, &one).unwrap(), single);
    }

    #[test]
    fn toy_skip_widths() {
        assert_eq!(ModelConfig::toy().skip_channels(), vec![16, 32, 64, 128, 256]);
    }

    #[test]
    fn parameter_counts_are_stable() {
        let count = |base| {
            let config = ModelConfig {
                base_channels: base,
                ..ModelConfig::default()
            };
            CadUnet::init::<f32>(config, 0).unwrap().1.num_scalars()
        };
        assert_eq!(count(64), 56_033_723);
        // base 32 lands within 1% of the published 15.04 M
        let half = count(32);
        assert_eq!(half, 14_886_683);
        assert!((half as f64 / 15.04e6 - 1.0).abs() < 0.011);
        assert_eq!(count(16), 4_569_035);
    }
}
