//! Thresholded predictions, per-slice and pooled scores, metrics CSV and
//! colour overlays.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::mask::{Mask, BACKGROUND, CONSOLIDATION, GGO};
use crate::metrics::{confusion, format_mean_std, ConfusionCounts, Scores};
use crate::model::CadUnet;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
const GGO_COLOUR: [u8; 3] = [0, 255, 0];
const CONSOLIDATION_COLOUR: [u8; 3] = [255, 0, 0];

pub fn class_names(num_classes: usize) -> &'static [&'static str] {
    match num_classes {
        1 => &["infection"],
        _ => &["ggo", "con"],
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Probability above which a pixel is predicted positive.
    pub threshold: f64,
    pub batch_size: usize,
    /// When set, the model must predict exactly this many classes.
    pub num_classes: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: DEFAULT_THRESHOLD,
            batch_size: 4,
            num_classes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceEvaluation {
    pub id: String,
    /// One entry per class.
    pub counts: Vec<ConfusionCounts>,
    pub predicted: Vec<Mask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub num_classes: usize,
    pub slices: Vec<SliceEvaluation>,
}

impl Evaluation {
    /// Counts summed over every slice, per class.
    pub fn pooled(&self) -> Vec<ConfusionCounts> {
        let mut out = vec![ConfusionCounts::default(); self.num_classes];
        for s in &self.slices {
            for (o, c) in out.iter_mut().zip(&s.counts) {
                o.merge(c);
            }
        }
        out
    }

    /// Pooled F1 averaged over classes.
    pub fn infection_f1(&self) -> f64 {
        let pooled = self.pooled();
        pooled.iter().map(|c| c.scores().f1).sum::<f64>() / pooled.len() as f64
    }

    pub fn slice_scores(&self, class: usize) -> Vec<Scores> {
        self.slices.iter().map(|s| s.counts[class].scores()).collect()
    }

    /// `mean±std` of each metric over slices.
    pub fn summary(&self, class: usize) -> Vec<(&'static str, String)> {
        let scores = self.slice_scores(class);
        Scores::NAMES
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let values: Vec<f64> = scores.iter().map(|s| s.values()[k]).collect();
                (*name, format_mean_std(&values))
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-sample, per-class masks of `sigmoid(logits) > threshold`.
pub fn threshold_logits(logits: &Tensor<f32>, threshold: f64) -> Result<Vec<Vec<Mask>>> {
    let (n, k, h, w) = logits
        .dims4()
        .ok_or_else(|| Error::Invalid(format!("logits must be NCHW, got {:?}", logits.shape())))?;
    let plane = h * w;
    Ok((0..n)
        .map(|i| {
            (0..k)
                .map(|c| {
                    let start = (i * k + c) * plane;
                    let values = &logits.data()[start..start + plane];
                    Mask::new(h, w, values.iter().map(|&v| sigmoid(v as f64) > threshold).collect())
                        .expect("plane extent")
                })
                .collect()
        })
        .collect())
}

pub fn evaluate(
    model: &CadUnet,
    store: &mut ParamStore<f32>,
    samples: &[Sample],
    options: &EvalOptions,
) -> Result<Evaluation> {
    let k = model.config.num_classes;
    if let Some(expected) = options.num_classes {
        if expected != k {
            return Err(Error::Config(format!(
                "model predicts {k} class(es), evaluation asked for {expected}"
            )));
        }
    }
    let mut slices = Vec::with_capacity(samples.len());
    let mut start = 0;
    while start < samples.len() {
        // consecutive samples of one extent share a batch
        let dims = samples[start].dims();
        let mut end = start + 1;
        while end < samples.len() && end - start < options.batch_size.max(1) && samples[end].dims() == dims {
            end += 1;
        }
        let batch: Vec<&Sample> = samples[start..end].iter().collect();
        let (x, _) = crate::data::make_batch::<f32>(&batch, k)?;
        let logits = model.predict(store, &x)?.infection;
        for (sample, predicted) in batch.iter().zip(threshold_logits(&logits, options.threshold)?) {
            let truth = sample.class_masks(k)?;
            let counts = predicted
                .iter()
                .zip(&truth)
                .map(|(p, t)| confusion(p, t))
                .collect::<Result<_>>()?;
            slices.push(SliceEvaluation {
                id: sample.id.clone(),
                counts,
                predicted,
            });
        }
        start = end;
    }
    Ok(Evaluation { num_classes: k, slices })
}

pub const METRICS_HEADER: [&str; 14] = [
    "run",
    "dataset",
    "slice",
    "class",
    "f1",
    "iou",
    "recall",
    "spec",
    "prec",
    "vacuous_f1",
    "vacuous_iou",
    "vacuous_recall",
    "vacuous_spec",
    "vacuous_prec",
];

fn score_row(run: &str, dataset: &str, slice: &str, class: &str, s: &Scores) -> Vec<String> {
    let mut row = vec![run.to_string(), dataset.to_string(), slice.to_string(), class.to_string()];
    row.extend(s.values().iter().map(|v| format!("{v:.6}")));
    row.extend(s.flags().iter().map(|f| (*f as u8).to_string()));
    row
}

/// One row per (slice, class) plus a pooled row per class with slice `all`.
pub fn write_metrics_csv(path: &Path, run: &str, dataset: &str, eval: &Evaluation) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    let names = class_names(eval.num_classes);
    for s in &eval.slices {
        for (c, counts) in s.counts.iter().enumerate() {
            w.write_record(score_row(run, dataset, &s.id, names[c], &counts.scores()))?;
        }
    }
    for (c, counts) in eval.pooled().iter().enumerate() {
        w.write_record(score_row(run, dataset, "all", names[c], &counts.scores()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Label map drawn from per-class masks: consolidation wins over ground-glass.
fn labels_from_masks(masks: &[Mask]) -> Vec<u8> {
    let n = masks[0].data().len();
    (0..n)
        .map(|k| match masks.len() {
            1 => masks[0].data()[k] as u8 * GGO,
            _ if masks[1].data()[k] => CONSOLIDATION,
            _ if masks[0].data()[k] => GGO,
            _ => BACKGROUND,
        })
        .collect()
}

fn paint(img: &mut RgbImage, x0: u32, image: &[f32], labels: &[u8], (h, w): (usize, usize)) {
    for i in 0..h {
        for j in 0..w {
            let gray = (image[i * w + j].clamp(0.0, 1.0) * 255.0).round() as u8;
            let mut px = [gray; 3];
            let colour = match labels[i * w + j] {
                GGO => Some(GGO_COLOUR),
                CONSOLIDATION => Some(CONSOLIDATION_COLOUR),
                _ => None,
            };
            if let Some(c) = colour {
                for (p, c) in px.iter_mut().zip(c) {
                    *p = (*p as u16 + c as u16).div_ceil(2) as u8;
                }
            }
            img.put_pixel(x0 + j as u32, i as u32, Rgb(px));
        }
    }
}

/// Ground truth on the left, prediction on the right; ground-glass green,
/// consolidation red, both blended at half opacity.
pub fn overlay(sample: &Sample, predicted: &[Mask]) -> RgbImage {
    let (h, w) = sample.dims();
    let mut img = RgbImage::new(2 * w as u32, h as u32);
    let truth: Vec<u8> = if predicted.len() == 1 {
        sample.labels().iter().map(|&l| if l == BACKGROUND { BACKGROUND } else { GGO }).collect()
    } else {
        sample.labels().to_vec()
    };
    paint(&mut img, 0, sample.image(), &truth, (h, w));
    paint(&mut img, w as u32, sample.image(), &labels_from_masks(predicted), (h, w));
    img
}

pub fn write_overlays(dir: &Path, samples: &[Sample], eval: &Evaluation) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (sample, s) in samples.iter().zip(&eval.slices) {
        overlay(sample, &s.predicted).save(dir.join(format!("{}_overlay.png", s.id)))?;
    }
    Ok(())
}
