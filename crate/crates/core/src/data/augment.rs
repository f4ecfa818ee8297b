use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::mask::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Rotation angle is uniform in `[-max_rotation_deg, max_rotation_deg]`.
    pub max_rotation_deg: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 35.0,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
        }
    }
}

/// Rotation about the image centre followed by optional flips; the same map
/// is applied to the image and every mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub angle_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl Transform {
    pub fn draw(config: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let m = config.max_rotation_deg;
        Transform {
            angle_deg: if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 },
            hflip: rng.random_bool(config.hflip_prob),
            vflip: rng.random_bool(config.vflip_prob),
        }
    }

    /// Source coordinates of output pixel `(i, j)`.
    fn source(&self, (h, w): (usize, usize), i: usize, j: usize) -> (f64, f64) {
        let i = if self.vflip { h - 1 - i } else { i };
        let j = if self.hflip { w - 1 - j } else { j };
        if self.angle_deg == 0.0 {
            return (i as f64, j as f64);
        }
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (y, x) = (i as f64 - cy, j as f64 - cx);
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        (cy + cos * y - sin * x, cx + sin * y + cos * x)
    }

    /// Bilinear resampling; samples outside the image read as 0.
    pub fn warp_image(&self, dims: (usize, usize), values: &[f32]) -> Vec<f32> {
        let (h, w) = dims;
        let at = |r: isize, c: isize| {
            if r < 0 || c < 0 || r as usize >= h || c as usize >= w {
                0.0
            } else {
                values[r as usize * w + c as usize] as f64
            }
        };
        (0..h * w)
            .map(|k| {
                let (sy, sx) = self.source(dims, k / w, k % w);
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (r, c) = (y0 as isize, x0 as isize);
                let v = (1.0 - fy) * ((1.0 - fx) * at(r, c) + fx * at(r, c + 1))
                    + fy * ((1.0 - fx) * at(r + 1, c) + fx * at(r + 1, c + 1));
                v.clamp(0.0, 1.0) as f32
            })
            .collect()
    }

    /// Nearest-neighbour resampling; samples outside the image read as the default value.
    pub fn warp_nearest<V: Copy + Default>(&self, dims: (usize, usize), values: &[V]) -> Vec<V> {
        let (h, w) = dims;
        (0..h * w)
            .map(|k| {
                let (sy, sx) = self.source(dims, k / w, k % w);
                let (r, c) = (sy.round(), sx.round());
                if r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
                    V::default()
                } else {
                    values[r as usize * w + c as usize]
                }
            })
            .collect()
    }

    pub fn warp_mask(&self, m: &Mask) -> Mask {
        Mask::new(m.height(), m.width(), self.warp_nearest(m.dims(), m.data())).expect("extent preserved")
    }

    pub fn apply(&self, s: &Sample) -> Sample {
        let dims = s.dims();
        Sample {
            id: s.id.clone(),
            height: dims.0,
            width: dims.1,
            image: self.warp_image(dims, &s.image),
            labels: self.warp_nearest(dims, &s.labels),
            lung: s.lung.as_ref().map(|m| self.warp_mask(m)),
            spacing: s.spacing,
        }
    }
}

pub fn augment(sample: &Sample, config: &AugmentConfig, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Transform::draw(config, &mut rng).apply(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::components::connected_components;
    use crate::metrics::confusion;

    fn blob_sample(h: usize, w: usize, cy: f64, cx: f64, ry: f64, rx: f64) -> Sample {
        let inside = |i: usize, j: usize| ((i as f64 - cy) / ry).powi(2) + ((j as f64 - cx) / rx).powi(2) <= 1.0;
        let labels: Vec<u8> = (0..h * w).map(|k| inside(k / w, k % w) as u8).collect();
        let image = labels.iter().map(|&l| l as f32).collect();
        Sample::new("blob", (h, w), image, labels, Some(Mask::from_fn(h, w, |_, _| true))).unwrap()
    }

    fn image_mask(s: &Sample) -> Mask {
        let (h, w) = s.dims();
        Mask::threshold(h, w, s.image(), 0.5).unwrap()
    }

    fn label_mask(s: &Sample) -> Mask {
        s.infection_mask()
    }

    #[test]
    fn identity_transform_changes_nothing() {
        let s = blob_sample(16, 20, 7.0, 9.0, 4.0, 6.0);
        assert_eq!(Transform::default().apply(&s), s);
        let none = AugmentConfig {
            max_rotation_deg: 0.0,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
        };
        assert_eq!(augment(&s, &none, 3), s);
    }

    #[test]
    fn same_seed_same_output() {
        let s = blob_sample(24, 24, 10.0, 12.0, 5.0, 7.0);
        let c = AugmentConfig::default();
        assert_eq!(augment(&s, &c, 41), augment(&s, &c, 41));
    }

    #[test]
    fn flips_commute_exactly_with_masks() {
        let s = blob_sample(18, 22, 5.0, 6.0, 3.0, 5.0);
        for (hflip, vflip) in [(true, false), (false, true), (true, true)] {
            let t = Transform {
                angle_deg: 0.0,
                hflip,
                vflip,
            };
            let out = t.apply(&s);
            assert_eq!(image_mask(&out), label_mask(&out));
            assert_eq!(t.warp_mask(&label_mask(&s)), label_mask(&out));
            assert_eq!(label_mask(&out).count(), label_mask(&s).count());
            assert_eq!(t.apply(&out), s);
        }
    }

    #[test]
    fn double_flip_keeps_symmetric_blob_area() {
        let s = blob_sample(21, 21, 10.0, 10.0, 6.0, 6.0);
        let t = Transform {
            angle_deg: 0.0,
            hflip: true,
            vflip: true,
        };
        assert_eq!(t.apply(&s).infection_mask().count(), s.infection_mask().count());
    }

    #[test]
    fn rotation_keeps_image_and_mask_aligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..40 {
            let (ry, rx) = (rng.random_range(6.0..12.0), rng.random_range(6.0..12.0));
            let s = blob_sample(48, 48, rng.random_range(18.0..30.0), rng.random_range(18.0..30.0), ry, rx);
            assert!(s.infection_mask().count() >= 100);
            let t = Transform {
                angle_deg: rng.random_range(-35.0..=35.0),
                hflip: rng.random_bool(0.5),
                vflip: rng.random_bool(0.5),
            };
            let out = t.apply(&s);
            let iou = confusion(&image_mask(&out), &label_mask(&out)).unwrap().scores().iou;
            assert!(iou >= 95.0, "IoU {iou} at {t:?}");
            assert_eq!(connected_components(&label_mask(&out)).count(), 1);
            // labels are copied, never blended
            assert!(out.labels().iter().all(|&l| l <= 1));
        }
    }

    #[test]
    fn rotation_angles_are_uniform_within_bounds() {
        let config = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut angles: Vec<f64> = (0..10_000).map(|_| Transform::draw(&config, &mut rng).angle_deg).collect();
        assert!(angles.iter().all(|a| (-35.0..=35.0).contains(a)));
        angles.sort_by(f64::total_cmp);
        let n = angles.len() as f64;
        let ks = angles
            .iter()
            .enumerate()
            .map(|(k, a)| {
                let cdf = (a + 35.0) / 70.0;
                (cdf - k as f64 / n).abs().max(((k + 1) as f64 / n - cdf).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "KS {ks}");
    }
}
