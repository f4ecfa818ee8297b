//! Segmentation samples, manifest IO, batching and the per-epoch sample order.

mod augment;
mod balance;
mod synth;

pub use augment::{augment, AugmentConfig, Transform};
pub use balance::{undersample_noninfected, UndersampleReport, NONINFECTED_TARGET};
pub use synth::{synth_generate, SyntheticSpec};

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossTargets;
use crate::mask::{class_masks, Mask, BACKGROUND, CONSOLIDATION};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One grayscale slice with its infection label map and optional lung mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    height: usize,
    width: usize,
    /// Row-major intensities in `[0, 1]`.
    image: Vec<f32>,
    /// 0 background, 1 ground-glass, 2 consolidation; binary sets use 0/1.
    labels: Vec<u8>,
    lung: Option<Mask>,
    /// (row, column) pixel size in millimetres, when known.
    pub spacing: Option<(f64, f64)>,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        (height, width): (usize, usize),
        image: Vec<f32>,
        labels: Vec<u8>,
        lung: Option<Mask>,
    ) -> Result<Self> {
        let id = id.into();
        let n = height * width;
        if n == 0 || image.len() != n || labels.len() != n {
            return Err(Error::Invalid(format!(
                "{id}: image has {} pixels and labels {}, expected {height}x{width}",
                image.len(),
                labels.len()
            )));
        }
        if let Some(m) = &lung {
            if m.dims() != (height, width) {
                return Err(Error::Invalid(format!(
                    "{id}: lung mask is {}x{}, image is {height}x{width}",
                    m.height(),
                    m.width()
                )));
            }
        }
        if let Some(bad) = labels.iter().find(|&&l| l > CONSOLIDATION) {
            return Err(Error::Invalid(format!("{id}: label value {bad} outside {{0, 1, 2}}")));
        }
        if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid(format!("{id}: image values must lie in [0, 1]")));
        }
        let sample = Sample {
            id,
            height,
            width,
            image,
            labels,
            lung,
            spacing: None,
        };
        let outside = sample.lesion_pixels_outside_lung();
        if outside > 0 {
            log::warn!("{}: {outside} infection pixels lie outside the lung mask", sample.id);
        }
        Ok(sample)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn image(&self) -> &[f32] {
        &self.image
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn lung(&self) -> Option<&Mask> {
        self.lung.as_ref()
    }

    pub fn is_infected(&self) -> bool {
        self.labels.iter().any(|&l| l != BACKGROUND)
    }

    pub fn infection_mask(&self) -> Mask {
        Mask::from_labels(self.height, self.width, &self.labels, |l| l != BACKGROUND).expect("extents checked")
    }

    pub fn lesion_pixels_outside_lung(&self) -> usize {
        match &self.lung {
            Some(m) => (0..self.labels.len())
                .filter(|&k| self.labels[k] != BACKGROUND && !m.data()[k])
                .count(),
            None => 0,
        }
    }

    pub fn class_masks(&self, num_classes: usize) -> Result<Vec<Mask>> {
        class_masks(self.height, self.width, &self.labels, num_classes)
    }
}

/// Stack samples of equal extent into a model input and loss targets.
pub fn make_batch<T: Scalar>(samples: &[&Sample], num_classes: usize) -> Result<(Tensor<T>, LossTargets<T>)> {
    let first = samples.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (h, w) = first.dims();
    let mut pixels = Vec::with_capacity(samples.len() * h * w);
    let mut infection = Vec::with_capacity(samples.len());
    let mut lung = Vec::with_capacity(samples.len());
    for s in samples {
        if s.dims() != (h, w) {
            return Err(Error::Invalid(format!(
                "batch mixes extents {h}x{w} and {}x{} ({})",
                s.height, s.width, s.id
            )));
        }
        pixels.extend(s.image.iter().map(|&v| T::of(v as f64)));
        infection.push(s.class_masks(num_classes)?);
        lung.push(s.lung.clone());
    }
    let x = Tensor::new(&[samples.len(), 1, h, w], pixels)?;
    Ok((x, LossTargets::from_masks(&infection, &lung)?))
}

/// Sample order for one epoch, fixed by `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Augmentation seed of one sample draw, fixed by `(seed, epoch, position)`.
pub fn augment_seed(seed: u64, epoch: usize, position: usize) -> u64 {
    seed ^ ((epoch as u64) << 32 | position as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub infection_mask: PathBuf,
    #[serde(default)]
    pub lung_mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    /// (row, column) pixel size in millimetres.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_spacing: Option<(f64, f64)>,
}

/// Samples loaded from a manifest plus the entries that failed, by position.
#[derive(Debug, Default)]
pub struct LoadedDataset {
    pub samples: Vec<Sample>,
    pub failures: Vec<(usize, Error)>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

/// Grayscale image scaled to `[0, 1]`; 16-bit sources keep their precision.
pub fn read_image(path: &Path) -> Result<((usize, usize), Vec<f32>)> {
    let img = open_image(path)?;
    let dims = (img.height() as usize, img.width() as usize);
    let wide = matches!(
        img,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    let values = if wide {
        img.to_luma16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()
    } else {
        img.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
    };
    Ok((dims, values))
}

/// Raw 8-bit label values.
pub fn read_labels(path: &Path) -> Result<((usize, usize), Vec<u8>)> {
    match open_image(path)? {
        DynamicImage::ImageLuma8(img) => Ok(((img.height() as usize, img.width() as usize), img.into_raw())),
        other => Err(Error::Invalid(format!(
            "{}: label masks must be 8-bit grayscale, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

fn load_entry(base: &Path, index: usize, e: &ManifestEntry) -> Result<Sample> {
    let image_path = resolve(base, &e.image);
    let (dims, image) = read_image(&image_path)?;
    let (label_dims, labels) = read_labels(&resolve(base, &e.infection_mask))?;
    if label_dims != dims {
        return Err(Error::Invalid(format!(
            "{}: infection mask is {}x{}, image is {}x{}",
            e.infection_mask.display(),
            label_dims.0,
            label_dims.1,
            dims.0,
            dims.1
        )));
    }
    let lung = match &e.lung_mask {
        Some(p) => {
            let (lung_dims, raw) = read_labels(&resolve(base, p))?;
            if lung_dims != dims {
                return Err(Error::Invalid(format!("{}: lung mask extent differs from the image", p.display())));
            }
            Some(Mask::new(dims.0, dims.1, raw.iter().map(|&v| v != 0).collect())?)
        }
        None => None,
    };
    let id = e.id.clone().unwrap_or_else(|| {
        image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("sample{index}"))
    });
    let mut sample = Sample::new(id, dims, image, labels, lung)?;
    sample.spacing = e.pixel_spacing;
    Ok(sample)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Load every manifest entry in order; bad entries are reported, not fatal.
pub fn load_dataset(manifest: &Path) -> Result<LoadedDataset> {
    let entries = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = LoadedDataset::default();
    for (i, e) in entries.iter().enumerate() {
        match load_entry(base, i, e) {
            Ok(s) => out.samples.push(s),
            Err(err) => {
                log::error!("manifest entry {i} ({}): {err}", e.image.display());
                out.failures.push((i, err));
            }
        }
    }
    Ok(out)
}

fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path)?;
    Ok(())
}

/// Write 8-bit PNGs for every sample and a manifest with relative paths.
pub fn write_dataset(dir: &Path, samples: &[Sample], manifest_name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let (h, w) = (s.height as u32, s.width as u32);
        let gray = |data: Vec<u8>| GrayImage::from_raw(w, h, data).expect("extents checked");
        let image: Vec<u8> = s.image.iter().map(|v| (v * 255.0).round() as u8).collect();
        let image_name = format!("{}_image.png", s.id);
        let mask_name = format!("{}_infection.png", s.id);
        save_png(&gray(image), &dir.join(&image_name))?;
        save_png(&gray(s.labels.clone()), &dir.join(&mask_name))?;
        let lung_name = match &s.lung {
            Some(m) => {
                let name = format!("{}_lung.png", s.id);
                save_png(&gray(m.data().iter().map(|&v| v as u8 * 255).collect()), &dir.join(&name))?;
                Some(PathBuf::from(name))
            }
            None => None,
        };
        entries.push(ManifestEntry {
            image: image_name.into(),
            infection_mask: mask_name.into(),
            lung_mask: lung_name,
            id: Some(s.id.clone()),
            pixel_spacing: s.spacing,
        });
    }
    let path = dir.join(manifest_name);
    let json = serde_json::to_string_pretty(&entries)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// 16-bit grayscale PNG of `[0, 1]` values.
pub fn write_image16(path: &Path, (h, w): (usize, usize), values: &[f32]) -> Result<()> {
    let raw: Vec<u16> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::Invalid("image extent".into()))?;
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(id: &str, lesion: bool) -> Sample {
        let labels = (0..16).map(|k| if lesion && k == 5 { 2 } else { 0 }).collect();
        let image = (0..16).map(|k| k as f32 / 15.0).collect();
        let lung = Mask::from_fn(4, 4, |i, j| i > 0 && j > 0);
        Sample::new(id, (4, 4), image, labels, Some(lung)).unwrap()
    }

    #[test]
    fn sample_validation() {
        assert!(Sample::new("a", (2, 2), vec![0.0; 4], vec![0, 3, 0, 0], None).is_err());
        assert!(Sample::new("a", (2, 2), vec![0.0; 3], vec![0; 4], None).is_err());
        assert!(Sample::new("a", (2, 2), vec![1.5; 4], vec![0; 4], None).is_err());
        assert!(Sample::new("a", (2, 2), vec![0.0; 4], vec![0; 4], Some(Mask::empty(2, 3))).is_err());
        assert!(tiny("a", true).is_infected());
        assert!(!tiny("a", false).is_infected());
    }

    #[test]
    fn round_trip_through_png_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![tiny("s0", true), tiny("s1", false), tiny("s2", true)];
        let manifest = write_dataset(dir.path(), &samples, "manifest.json").unwrap();
        let loaded = load_dataset(&manifest).unwrap();
        assert!(loaded.failures.is_empty());
        let ids: Vec<&str> = loaded.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["s0", "s1", "s2"]);
        for (a, b) in samples.iter().zip(&loaded.samples) {
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.lung, b.lung);
            for (x, y) in a.image.iter().zip(&b.image) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn eight_and_sixteen_bit_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p8 = dir.path().join("a.png");
        GrayImage::from_raw(2, 1, vec![255, 0]).unwrap().save(&p8).unwrap();
        assert_eq!(read_image(&p8).unwrap().1, vec![1.0, 0.0]);
        let p16 = dir.path().join("b.png");
        write_image16(&p16, (1, 2), &[1.0, 0.5]).unwrap();
        let (_, v) = read_image(&p16).unwrap();
        assert_eq!(v[0], 1.0);
        assert!((v[1] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn bad_entries_are_listed_and_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), &[tiny("s0", true), tiny("s1", true)], "m.json").unwrap();
        GrayImage::from_raw(3, 3, vec![0; 9])
            .unwrap()
            .save(dir.path().join("s0_infection.png"))
            .unwrap();
        let loaded = load_dataset(&manifest).unwrap();
        assert_eq!(loaded.samples.len(), 1);
        assert_eq!(loaded.samples[0].id, "s1");
        assert_eq!(loaded.failures.len(), 1);
        assert_eq!(loaded.failures[0].0, 0);
    }

    #[test]
    fn batches_stack_images_and_targets() {
        let (a, b) = (tiny("a", true), tiny("b", false));
        let (x, t) = make_batch::<f32>(&[&a, &b], 2).unwrap();
        assert_eq!(x.shape(), &[2, 1, 4, 4]);
        assert_eq!(t.infection.shape(), &[2, 2, 4, 4]);
        assert_eq!(t.infection.at4(0, 1, 1, 1), 1.0);
        assert_eq!(t.infection.at4(0, 0, 1, 1), 0.0);
        assert_eq!(t.lung_present, vec![true, true]);
    }

    #[test]
    fn epoch_order_depends_only_on_seed_and_epoch() {
        assert_eq!(epoch_order(50, 3, 7), epoch_order(50, 3, 7));
        assert_ne!(epoch_order(50, 3, 7), epoch_order(50, 3, 8));
        let mut o = epoch_order(50, 3, 7);
        o.sort();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
    }
}
