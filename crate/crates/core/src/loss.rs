//! Hybrid segmentation loss: infection, lung and edge binary cross-entropy,
//! each summed over batch and pixels.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::mask::{morphological_gradient, Mask};
use crate::model::ModelOutput;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub infection: f64,
    pub lung: f64,
    pub edge: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            infection: 0.7,
            lung: 0.3,
            edge: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.infection, self.lung, self.edge];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }

    pub fn combine(&self, parts: &LossParts) -> f64 {
        self.infection * parts.infection + self.lung * parts.lung + self.edge * parts.edge
    }

    pub fn scaled(&self, k: f64) -> Self {
        LossWeights {
            infection: k * self.infection,
            lung: k * self.lung,
            edge: k * self.edge,
        }
    }
}

/// Unweighted component values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub infection: f64,
    pub lung: f64,
    pub edge: f64,
}

/// Dense target maps for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTargets<T: Scalar> {
    /// `(N, K, H, W)`
    pub infection: Tensor<T>,
    /// `(N, 1, H, W)`; zeros where a sample has no lung annotation.
    pub lung: Tensor<T>,
    pub lung_present: Vec<bool>,
    /// Morphological gradient of each infection channel, `(N, K, H, W)`.
    pub edge: Tensor<T>,
}

impl<T: Scalar> LossTargets<T> {
    /// `infection[n]` holds the K class masks of sample `n`.
    pub fn from_masks(infection: &[Vec<Mask>], lung: &[Option<Mask>]) -> Result<Self> {
        let first = infection
            .first()
            .and_then(|m| m.first())
            .ok_or_else(|| Error::Invalid("empty target batch".into()))?;
        let (h, w) = first.dims();
        let (n, k) = (infection.len(), infection[0].len());
        if lung.len() != n {
            return Err(Error::Invalid(format!("{} lung entries for {n} samples", lung.len())));
        }
        let mut inf = Vec::with_capacity(n * k * h * w);
        let mut edge = Vec::with_capacity(n * k * h * w);
        for masks in infection {
            if masks.len() != k || masks.iter().any(|m| m.dims() != (h, w)) {
                return Err(Error::Invalid("infection masks differ in class count or extent".into()));
            }
            for m in masks {
                inf.extend(m.to_values::<T>());
                edge.extend(morphological_gradient(m).to_values::<T>());
            }
        }
        let mut lung_values = Vec::with_capacity(n * h * w);
        for l in lung {
            match l {
                Some(m) if m.dims() == (h, w) => lung_values.extend(m.to_values::<T>()),
                Some(m) => return Err(Error::shape("lung target", &[h, w], &[m.height(), m.width()])),
                None => lung_values.extend(std::iter::repeat_n(T::zero(), h * w)),
            }
        }
        let lung_present: Vec<bool> = lung.iter().map(Option::is_some).collect();
        if lung_present.contains(&false) {
            log::warn!(
                "{} of {n} samples lack a lung mask; their lung term is skipped",
                lung_present.iter().filter(|p| !**p).count()
            );
        }
        Ok(LossTargets {
            infection: Tensor::new(&[n, k, h, w], inf)?,
            lung: Tensor::new(&[n, 1, h, w], lung_values)?,
            lung_present,
            edge: Tensor::new(&[n, k, h, w], edge)?,
        })
    }
}

/// Total loss node and the component values.
pub fn hybrid_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: &ModelOutput,
    targets: &LossTargets<T>,
    weights: &LossWeights,
) -> Result<(Var, LossParts)> {
    weights.validate()?;
    let inf = g.bce_with_logits(out.infection_logits, &targets.infection, None)?;
    let lung = g.bce_with_logits(out.lung_logits, &targets.lung, Some(&targets.lung_present))?;
    let edge = g.bce_with_logits(out.edge_logits, &targets.edge, None)?;
    let parts = LossParts {
        infection: g.value(inf).data()[0].f64(),
        lung: g.value(lung).data()[0].f64(),
        edge: g.value(edge).data()[0].f64(),
    };
    let a = g.scale(inf, weights.infection)?;
    let b = g.scale(lung, weights.lung)?;
    let c = g.scale(edge, weights.edge)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok((total, parts))
}
