//! Per-slice infection severity from lesion burden and lesion count.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::components::connected_components;
use crate::error::{Error, Result};
use crate::mask::{Mask, BACKGROUND, GGO};

/// Lesion area over lung area must exceed this for a severe slice.
pub const SEVERE_FRACTION: f64 = 0.50;
pub const INTERMEDIATE_FRACTION: f64 = 0.25;
/// Mild slices have fewer ground-glass lesions than this...
pub const MILD_MAX_LESIONS: usize = 3;
/// ...each shorter than this many millimetres.
pub const MILD_MAX_DIAMETER_MM: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeverityLabel {
    NonInfected,
    Mild,
    Intermediate,
    Severe,
    /// Infected, at most 25% of the lung, but too many or too large lesions
    /// to count as mild.
    Unclassified,
}

impl SeverityLabel {
    pub const ALL: [SeverityLabel; 5] = [
        SeverityLabel::NonInfected,
        SeverityLabel::Mild,
        SeverityLabel::Intermediate,
        SeverityLabel::Severe,
        SeverityLabel::Unclassified,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SeverityLabel::NonInfected => "non-infected",
            SeverityLabel::Mild => "mild",
            SeverityLabel::Intermediate => "intermediate",
            SeverityLabel::Severe => "severe",
            SeverityLabel::Unclassified => "unclassified",
        }
    }
}

impl fmt::Display for SeverityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `labels` is the slice's infection label map (0 background, 1 ground-glass,
/// 2 consolidation; binary maps treat every lesion as ground-glass).
/// `spacing` is the (row, column) pixel size in millimetres; without it the
/// lesion-size rule for mild slices is skipped.
pub fn severity(labels: &[u8], lung: &Mask, spacing: Option<(f64, f64)>) -> Result<SeverityLabel> {
    let (h, w) = lung.dims();
    if labels.len() != h * w {
        return Err(Error::Invalid(format!(
            "label map has {} pixels, lung mask is {h}x{w}",
            labels.len()
        )));
    }
    let lesion = labels.iter().filter(|&&l| l != BACKGROUND).count();
    if lesion == 0 {
        return Ok(SeverityLabel::NonInfected);
    }
    let lung_area = lung.count();
    if lung_area == 0 {
        return Err(Error::Invalid("infected slice has an empty lung mask".into()));
    }
    let fraction = lesion as f64 / lung_area as f64;
    if fraction > SEVERE_FRACTION {
        return Ok(SeverityLabel::Severe);
    }
    if fraction > INTERMEDIATE_FRACTION {
        return Ok(SeverityLabel::Intermediate);
    }
    let ggo = connected_components(&Mask::from_labels(h, w, labels, |l| l == GGO)?);
    if ggo.count() >= MILD_MAX_LESIONS {
        return Ok(SeverityLabel::Unclassified);
    }
    let small = match spacing {
        Some(s) => (1..=ggo.count() as u32).all(|k| ggo.max_diameter(k, s) < MILD_MAX_DIAMETER_MM),
        None => {
            log::warn!("no pixel spacing; lesion diameters not checked for the mild grade");
            true
        }
    };
    Ok(if small { SeverityLabel::Mild } else { SeverityLabel::Unclassified })
}

/// Slice counts per grade, every grade present.
pub fn tally(labels: impl IntoIterator<Item = SeverityLabel>) -> BTreeMap<SeverityLabel, usize> {
    let mut out: BTreeMap<SeverityLabel, usize> = SeverityLabel::ALL.iter().map(|&l| (l, 0)).collect();
    for l in labels {
        *out.entry(l).or_default() += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::CONSOLIDATION;

    /// 10x10 lung field with the first `lesion` lung pixels marked.
    fn slice(lesion: usize, label: u8) -> (Vec<u8>, Mask) {
        let lung = Mask::from_fn(20, 20, |i, j| (5..15).contains(&i) && (5..15).contains(&j));
        let mut labels = vec![0; 400];
        for k in (0..400).filter(|&k| lung.data()[k]).take(lesion) {
            labels[k] = label;
        }
        (labels, lung)
    }

    #[test]
    fn burden_thresholds_are_strict() {
        let grade = |n| {
            let (l, lung) = slice(n, CONSOLIDATION);
            severity(&l, &lung, Some((1.0, 1.0))).unwrap()
        };
        assert_eq!(grade(0), SeverityLabel::NonInfected);
        assert_eq!(grade(60), SeverityLabel::Severe);
        assert_eq!(grade(51), SeverityLabel::Severe);
        assert_eq!(grade(50), SeverityLabel::Intermediate);
        assert_eq!(grade(30), SeverityLabel::Intermediate);
        assert_eq!(grade(26), SeverityLabel::Intermediate);
        assert_ne!(grade(25), SeverityLabel::Intermediate);
    }

    #[test]
    fn few_small_ground_glass_lesions_are_mild() {
        let lung = Mask::from_fn(64, 64, |_, _| true);
        let mut labels = vec![0u8; 64 * 64];
        let blob = |labels: &mut [u8], i0: usize, j0: usize| {
            for i in i0..i0 + 4 {
                for j in j0..j0 + 4 {
                    labels[i * 64 + j] = GGO;
                }
            }
        };
        blob(&mut labels, 2, 2);
        blob(&mut labels, 20, 20);
        assert_eq!(severity(&labels, &lung, Some((1.0, 1.0))).unwrap(), SeverityLabel::Mild);
        // 4 pixels at 10 mm: about 57 mm across
        assert_eq!(severity(&labels, &lung, Some((10.0, 10.0))).unwrap(), SeverityLabel::Unclassified);
        assert_eq!(severity(&labels, &lung, None).unwrap(), SeverityLabel::Mild);
        blob(&mut labels, 40, 40);
        assert_eq!(severity(&labels, &lung, Some((1.0, 1.0))).unwrap(), SeverityLabel::Unclassified);
    }

    #[test]
    fn inconsistent_inputs_are_rejected() {
        let (labels, _) = slice(5, GGO);
        assert!(severity(&labels, &Mask::empty(20, 20), None).is_err());
        assert!(severity(&labels[..10], &Mask::empty(20, 20), None).is_err());
    }

    #[test]
    fn tally_lists_every_grade() {
        let t = tally([SeverityLabel::Mild, SeverityLabel::Mild, SeverityLabel::Severe]);
        assert_eq!(t.len(), 5);
        assert_eq!(t[&SeverityLabel::Mild], 2);
        assert_eq!(t[&SeverityLabel::NonInfected], 0);
    }
}
