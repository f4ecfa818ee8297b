//! Desk-scale stand-in for CT slices: two dark lung ellipses inside a body
//! ellipse, with soft mid-intensity ground-glass blobs and sharp bright
//! consolidation blobs placed strictly inside the lungs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::mask::{Mask, CONSOLIDATION, GGO};

/// Relative amplitude of the lobed outline of a lesion.
const LOBE_DEPTH: f64 = 0.15;
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    /// Lung semi-axes as fractions of (height, width).
    pub lung_axes: (f64, f64),
    /// Horizontal distance of each lung centre from the image centre, as a
    /// fraction of the width.
    pub lung_offset: f64,
    /// Inclusive range of lesions per slice; 0 gives non-infected slices.
    pub lesion_count: (usize, usize),
    /// Lesion radius range in pixels.
    pub lesion_radius: (f64, f64),
    pub consolidation_prob: f64,
    pub background: f64,
    pub body_intensity: f64,
    pub lung_intensity: f64,
    pub ggo_intensity: (f64, f64),
    pub consolidation_intensity: (f64, f64),
    pub noise_sigma: f64,
    /// Physical width of the image, used for the pixel spacing.
    pub field_of_view_mm: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            height: 128,
            width: 128,
            lung_axes: (0.34, 0.17),
            lung_offset: 0.21,
            lesion_count: (0, 3),
            lesion_radius: (3.0, 9.0),
            consolidation_prob: 0.4,
            background: 0.02,
            body_intensity: 0.45,
            lung_intensity: 0.1,
            ggo_intensity: (0.4, 0.55),
            consolidation_intensity: (0.8, 0.95),
            noise_sigma: 0.02,
            field_of_view_mm: 300.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn lung_semi_axes(&self) -> (f64, f64) {
        (self.lung_axes.0 * self.height as f64, self.lung_axes.1 * self.width as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("synthetic spec: {msg}")));
        if self.height < 8 || self.width < 8 {
            return bad(format!("image {}x{} is too small", self.height, self.width));
        }
        let (lo, hi) = self.lesion_radius;
        if !(lo > 0.0 && lo <= hi) || self.lesion_count.0 > self.lesion_count.1 {
            return bad("lesion radius and count ranges must be ordered and positive".into());
        }
        let (ay, ax) = self.lung_semi_axes();
        if hi * (1.0 + LOBE_DEPTH) >= ay.min(ax) {
            return bad(format!(
                "lesion radius {hi} does not fit inside lung semi-axes {ay:.1}x{ax:.1}"
            ));
        }
        if self.lung_offset + self.lung_axes.1 > 0.5 || self.lung_offset < self.lung_axes.1 {
            return bad("lungs must lie inside the image and must not overlap".into());
        }
        let intensities = [
            self.background,
            self.body_intensity,
            self.lung_intensity,
            self.ggo_intensity.0,
            self.ggo_intensity.1,
            self.consolidation_intensity.0,
            self.consolidation_intensity.1,
        ];
        if intensities.iter().any(|v| !(0.0..=1.0).contains(v)) || self.noise_sigma < 0.0 {
            return bad("intensities must lie in [0, 1] and noise must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.consolidation_prob) {
            return bad("consolidation probability must lie in [0, 1]".into());
        }
        Ok(())
    }

    fn centres(&self) -> [(f64, f64); 2] {
        let cy = (self.height as f64 - 1.0) / 2.0;
        let cx = (self.width as f64 - 1.0) / 2.0;
        let dx = self.lung_offset * self.width as f64;
        [(cy, cx - dx), (cy, cx + dx)]
    }
}

fn in_ellipse(i: usize, j: usize, (cy, cx): (f64, f64), (ay, ax): (f64, f64)) -> bool {
    ((i as f64 - cy) / ay).powi(2) + ((j as f64 - cx) / ax).powi(2) <= 1.0
}

struct Lesion {
    centre: (f64, f64),
    radius: f64,
    lobes: f64,
    phase: f64,
}

impl Lesion {
    /// Depth of a pixel inside the lesion outline as a fraction of the local
    /// radius; positive inside.
    fn depth(&self, i: usize, j: usize) -> f64 {
        let (y, x) = (i as f64 - self.centre.0, j as f64 - self.centre.1);
        let local = self.radius * (1.0 + LOBE_DEPTH * (self.lobes * y.atan2(x) + self.phase).sin());
        1.0 - y.hypot(x) / local
    }

    fn pixels(&self, h: usize, w: usize) -> Vec<usize> {
        let reach = self.radius * (1.0 + LOBE_DEPTH) + 1.0;
        let (i0, i1) = ((self.centre.0 - reach).floor().max(0.0) as usize, ((self.centre.0 + reach).ceil() as usize).min(h - 1));
        let (j0, j1) = ((self.centre.1 - reach).floor().max(0.0) as usize, ((self.centre.1 + reach).ceil() as usize).min(w - 1));
        (i0..=i1)
            .flat_map(|i| (j0..=j1).map(move |j| (i, j)))
            .filter(|&(i, j)| self.depth(i, j) > 0.0)
            .map(|(i, j)| i * w + j)
            .collect()
    }
}

fn generate_one(spec: &SyntheticSpec, index: usize) -> Result<Sample> {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let axes = spec.lung_semi_axes();
    let centres = spec.centres();
    let body = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let body_axes = (0.47 * h as f64, 0.47 * w as f64);

    let mut image = vec![spec.background; h * w];
    let lung = Mask::from_fn(h, w, |i, j| centres.iter().any(|&c| in_ellipse(i, j, c, axes)));
    for (k, v) in image.iter_mut().enumerate() {
        let (i, j) = (k / w, k % w);
        if lung.get(i, j) {
            *v = spec.lung_intensity;
        } else if in_ellipse(i, j, body, body_axes) {
            *v = spec.body_intensity;
        }
    }

    let mut labels = vec![0u8; h * w];
    let count = rng.random_range(spec.lesion_count.0..=spec.lesion_count.1);
    for _ in 0..count {
        let consolidation = rng.random_bool(spec.consolidation_prob);
        let radius = rng.random_range(spec.lesion_radius.0..=spec.lesion_radius.1);
        let side = centres[rng.random_range(0..2)];
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            let r = rng.random_range(0.0f64..1.0).sqrt();
            let lesion = Lesion {
                centre: (side.0 + r * axes.0 * t.sin(), side.1 + r * axes.1 * t.cos()),
                radius,
                lobes: rng.random_range(2..=4) as f64,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            };
            let pixels = lesion.pixels(h, w);
            if !pixels.is_empty() && pixels.iter().all(|&k| lung.data()[k]) {
                placed = Some((lesion, pixels));
                break;
            }
        }
        let (lesion, pixels) = placed.ok_or_else(|| {
            Error::Config(format!("could not place a lesion of radius {radius:.1} inside the lungs"))
        })?;
        let (band, label) = if consolidation {
            (spec.consolidation_intensity, CONSOLIDATION)
        } else {
            (spec.ggo_intensity, GGO)
        };
        let level = rng.random_range(band.0..=band.1);
        // consolidation stays visible where a ground-glass blob overlaps it
        for k in pixels {
            if !consolidation && labels[k] == CONSOLIDATION {
                continue;
            }
            let weight = if consolidation {
                1.0
            } else {
                // ramps up from 0.3 at the outline to full strength halfway in
                0.3 + 0.7 * (lesion.depth(k / w, k % w) / 0.5).min(1.0)
            };
            image[k] += weight * (level - image[k]);
            labels[k] = label;
        }
    }

    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
        for v in &mut image {
            *v += noise.sample(&mut rng);
        }
    }
    let image = image
        .into_iter()
        .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32)
        .collect();
    let mut sample = Sample::new(format!("synth{index:04}"), (h, w), image, labels, Some(lung))?;
    let pitch = spec.field_of_view_mm / w as f64;
    sample.spacing = Some((pitch, pitch));
    Ok(sample)
}

/// `n` slices; slice `i` depends only on the seed and `i`.
pub fn synth_generate(spec: &SyntheticSpec, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs at least one slice".into()));
    }
    (0..n).map(|i| generate_one(spec, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            height: 64,
            width: 64,
            lesion_radius: (2.0, 5.0),
            seed: 9,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(synth_generate(&small(), 6).unwrap(), synth_generate(&small(), 6).unwrap());
        let other = SyntheticSpec { seed: 10, ..small() };
        assert_ne!(synth_generate(&small(), 6).unwrap(), synth_generate(&other, 6).unwrap());
        // a prefix does not depend on how many slices follow
        assert_eq!(synth_generate(&small(), 3).unwrap()[..], synth_generate(&small(), 6).unwrap()[..3]);
    }

    #[test]
    fn lesions_stay_inside_the_lungs() {
        let spec = SyntheticSpec {
            lesion_count: (1, 4),
            ..small()
        };
        let data = synth_generate(&spec, 100).unwrap();
        for s in &data {
            assert_eq!(s.lesion_pixels_outside_lung(), 0, "{}", s.id);
            assert!(s.is_infected());
            assert!(s.labels().iter().all(|&l| l <= CONSOLIDATION));
        }
        let classes: std::collections::HashSet<u8> = data.iter().flat_map(|s| s.labels().iter().copied()).collect();
        assert_eq!(classes.len(), 3);
    }

    #[test]
    fn no_lesions_means_non_infected() {
        let spec = SyntheticSpec {
            lesion_count: (0, 0),
            ..small()
        };
        assert!(synth_generate(&spec, 5).unwrap().iter().all(|s| !s.is_infected()));
    }

    #[test]
    fn consolidation_is_brighter_than_ground_glass() {
        let spec = SyntheticSpec {
            noise_sigma: 0.0,
            lesion_count: (2, 4),
            ..small()
        };
        for s in synth_generate(&spec, 20).unwrap() {
            for (v, &l) in s.image().iter().zip(s.labels()) {
                match l {
                    CONSOLIDATION => assert!(*v as f64 >= 0.8 - 1e-3),
                    GGO => assert!((*v as f64) < 0.56),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn oversized_lesions_are_rejected() {
        let spec = SyntheticSpec {
            lesion_radius: (5.0, 40.0),
            ..small()
        };
        assert!(matches!(synth_generate(&spec, 1), Err(Error::Config(_))));
        assert!(synth_generate(&small(), 0).is_err());
    }
}
