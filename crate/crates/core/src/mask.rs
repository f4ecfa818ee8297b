//! Binary masks and the label maps they are cut from.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Infection label values.
pub const BACKGROUND: u8 = 0;
pub const GGO: u8 = 1;
pub const CONSOLIDATION: u8 = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Invalid(format!(
                "mask {height}x{width} needs {} pixels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Mask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|k| f(k / width, k % width)).collect();
        Mask { height, width, data }
    }

    /// Pixels whose label satisfies `keep`.
    pub fn from_labels(height: usize, width: usize, labels: &[u8], keep: impl Fn(u8) -> bool) -> Result<Self> {
        Mask::new(height, width, labels.iter().map(|&l| keep(l)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.width + j] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.contains(&true)
    }

    fn neighbourhood(&self, i: usize, j: usize) -> impl Iterator<Item = Option<bool>> + '_ {
        (-1isize..=1).flat_map(move |di| {
            (-1isize..=1).map(move |dj| {
                let (r, c) = (i as isize + di, j as isize + dj);
                (r >= 0 && c >= 0 && (r as usize) < self.height && (c as usize) < self.width)
                    .then(|| self.get(r as usize, c as usize))
            })
        })
    }

    /// Dilation by a 3×3 square.
    pub fn dilate(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |i, j| {
            self.neighbourhood(i, j).any(|v| v == Some(true))
        })
    }

    /// Erosion by a 3×3 square; pixels outside the image count as background.
    pub fn erode(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |i, j| {
            self.neighbourhood(i, j).all(|v| v == Some(true))
        })
    }

    /// Set difference `self \ other`.
    pub fn minus(&self, other: &Mask) -> Mask {
        Mask::from_fn(self.height, self.width, |i, j| self.get(i, j) && !other.get(i, j))
    }

    pub fn flip_horizontal(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |i, j| self.get(i, self.width - 1 - j))
    }

    pub fn to_values<T: Scalar>(&self) -> Vec<T> {
        self.data.iter().map(|&v| if v { T::one() } else { T::zero() }).collect()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(&[1, 1, self.height, self.width], self.to_values()).expect("mask extents are positive")
    }

    /// Threshold a `(H, W)` plane of probabilities or logits.
    pub fn threshold<T: Scalar>(height: usize, width: usize, values: &[T], cut: f64) -> Result<Self> {
        Mask::new(height, width, values.iter().map(|v| v.f64() > cut).collect())
    }
}

/// Per-class target masks: one "any infection" mask in binary mode, GGO and
/// consolidation masks in two-class mode.
pub fn class_masks(height: usize, width: usize, labels: &[u8], num_classes: usize) -> Result<Vec<Mask>> {
    match num_classes {
        1 => Ok(vec![Mask::from_labels(height, width, labels, |l| l != BACKGROUND)?]),
        2 => Ok(vec![
            Mask::from_labels(height, width, labels, |l| l == GGO)?,
            Mask::from_labels(height, width, labels, |l| l == CONSOLIDATION)?,
        ]),
        k => Err(Error::Config(format!("num_classes must be 1 or 2, got {k}"))),
    }
}

/// Morphological gradient: dilation minus erosion with a 3×3 square.
pub fn morphological_gradient(mask: &Mask) -> Mask {
    mask.dilate().minus(&mask.erode())
}
