//! Residual blocks, attention gates, and the junctions joining the capsule and
//! convolutional encoder pathways.

use rand::Rng;

use crate::autodiff::{ConvSpec, Var};
use crate::capsule::Capsules;
use crate::error::{Error, Result};
use crate::params::{BatchNorm, Builder, Conv, Session};
use crate::scalar::Scalar;

fn spatial<T: Scalar>(s: &Session<'_, T>, v: Var) -> (usize, usize) {
    let shape = s.graph.shape(v);
    (shape[2], shape[3])
}

fn same_extent<T: Scalar>(s: &Session<'_, T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if spatial(s, a) == spatial(s, b) && s.graph.shape(a)[0] == s.graph.shape(b)[0] {
        Ok(())
    } else {
        Err(Error::shape(op, s.graph.shape(a), s.graph.shape(b)))
    }
}

/// `ReLU(BN(conv3×3(ReLU(BN(conv3×3(x)))))) + ReLU(BN(conv1×1(x)))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub first: (Conv, BatchNorm),
    pub second: (Conv, BatchNorm),
    pub residual: (Conv, BatchNorm),
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ResBlock {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, input: usize, out: usize) -> Self {
        ResBlock {
            first: (
                b.conv(&format!("{name}.conv1"), out, input, 3, ConvSpec::same(3), false),
                b.batch_norm(&format!("{name}.bn1"), out),
            ),
            second: (
                b.conv(&format!("{name}.conv2"), out, out, 3, ConvSpec::same(3), false),
                b.batch_norm(&format!("{name}.bn2"), out),
            ),
            residual: (
                b.conv(&format!("{name}.res"), out, input, 1, ConvSpec::same(1), false),
                b.batch_norm(&format!("{name}.res_bn"), out),
            ),
            in_channels: input,
            out_channels: out,
        }
    }

    fn conv_bn_relu<T: Scalar>(s: &mut Session<'_, T>, layer: &(Conv, BatchNorm), x: Var) -> Result<Var> {
        let y = layer.0.forward(s, x)?;
        let y = layer.1.forward(s, y)?;
        s.graph.relu(y)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let channels = s.graph.shape(x).get(1).copied();
        if channels != Some(self.in_channels) {
            return Err(Error::Config(format!(
                "residual block expects {} input channels, got shape {:?}",
                self.in_channels,
                s.graph.shape(x)
            )));
        }
        let a = Self::conv_bn_relu(s, &self.first, x)?;
        let a = Self::conv_bn_relu(s, &self.second, a)?;
        let r = Self::conv_bn_relu(s, &self.residual, x)?;
        s.graph.add(a, r)
    }
}

/// Additive attention gate producing one sigmoid coefficient per pixel.
#[derive(Clone, Debug)]
pub struct AttentionGate {
    pub skip: (Conv, BatchNorm),
    pub gating: (Conv, BatchNorm),
    pub psi: Conv,
}

impl AttentionGate {
    /// `skip_channels` for encoder features, `gate_channels` for the upsampled decoder signal.
    pub fn new<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        name: &str,
        skip_channels: usize,
        gate_channels: usize,
        inner: usize,
    ) -> Self {
        AttentionGate {
            skip: (
                b.conv(&format!("{name}.wx"), inner, skip_channels, 1, ConvSpec::same(1), false),
                b.batch_norm(&format!("{name}.bn_x"), inner),
            ),
            gating: (
                b.conv(&format!("{name}.wg"), inner, gate_channels, 1, ConvSpec::same(1), false),
                b.batch_norm(&format!("{name}.bn_g"), inner),
            ),
            psi: b.conv_with_gain(&format!("{name}.psi"), 1, inner, 1, ConvSpec::same(1), true, 1.0),
        }
    }

    /// Attention map `(N, 1, H, W)` with values in (0, 1).
    pub fn coefficients<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, g: Var) -> Result<Var> {
        same_extent(s, "attention_gate", x, g)?;
        let a = self.skip.0.forward(s, x)?;
        let a = self.skip.1.forward(s, a)?;
        let b = self.gating.0.forward(s, g)?;
        let b = self.gating.1.forward(s, b)?;
        let sum = s.graph.add(a, b)?;
        let act = s.graph.relu(sum)?;
        let logits = self.psi.forward(s, act)?;
        s.graph.sigmoid(logits)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, g: Var) -> Result<Var> {
        let att = self.coefficients(s, x, g)?;
        Self::apply(s, x, att)
    }

    /// Scale every channel of `x` by a single-channel map.
    pub fn apply<T: Scalar>(s: &mut Session<'_, T>, x: Var, att: Var) -> Result<Var> {
        s.graph.mul_channels(x, att)
    }
}

/// Feeds a capsule grid into the convolutional pathway:
/// `Cat(σ(proj(C)) ⊙ out, out)`, doubling the channel count.
#[derive(Clone, Debug)]
pub struct Coupling {
    pub projection: Conv,
}

impl Coupling {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, capsule_channels: usize, features: usize) -> Self {
        Coupling {
            projection: b.conv_with_gain(
                &format!("{name}.proj"),
                features,
                capsule_channels,
                1,
                ConvSpec::same(1),
                true,
                1.0,
            ),
        }
    }

    /// Soft mask with the same shape as `out_prev`.
    pub fn mask<T: Scalar>(&self, s: &mut Session<'_, T>, out_prev: Var, caps: &Capsules) -> Result<Var> {
        same_extent(s, "couple", out_prev, caps.var)?;
        let p = self.projection.forward(s, caps.var)?;
        s.graph.sigmoid(p)
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, out_prev: Var, caps: &Capsules) -> Result<Var> {
        let mask = self.mask(s, out_prev, caps)?;
        Self::with_mask(s, out_prev, mask)
    }

    pub fn with_mask<T: Scalar>(s: &mut Session<'_, T>, out_prev: Var, mask: Var) -> Result<Var> {
        let gated = s.graph.mul(mask, out_prev)?;
        s.graph.concat(&[gated, out_prev])
    }
}

/// Modulates a capsule grid by convolutional features before the next capsule
/// layer: `σ(proj(out)) ⊙ C`, keeping the capsule layout.
#[derive(Clone, Debug)]
pub struct CapsuleGate {
    pub projection: Conv,
}

impl CapsuleGate {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, features: usize, capsule_channels: usize) -> Self {
        CapsuleGate {
            projection: b.conv_with_gain(
                &format!("{name}.proj"),
                capsule_channels,
                features,
                1,
                ConvSpec::same(1),
                true,
                1.0,
            ),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, caps: &Capsules, out_prev: Var) -> Result<Capsules> {
        same_extent(s, "capsule_gate", caps.var, out_prev)?;
        let p = self.projection.forward(s, out_prev)?;
        let mask = s.graph.sigmoid(p)?;
        let var = s.graph.mul(mask, caps.var)?;
        Ok(Capsules { var, ..*caps })
    }
}
