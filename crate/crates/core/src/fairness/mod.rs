//! Skin-tone estimation via the individual typology angle (ITA) and
//! per-subgroup performance reporting.
//!
//! All operations here are pure and safe to run per-image in parallel.

mod color;

pub use color::{rgb_to_lab, LabColor};

use serde::{Deserialize, Serialize};

use crate::data::Raster;
use crate::{Error, Result};

/// Chroma below this carries no usable tone information: the angle is
/// undefined at b* = 0 (the spec case L* = 50 included), so such pixels are
/// excluded from the estimate.
const MIN_ABS_B: f64 = 1e-6;

/// Fraction of pixels (brightest by L*) used when no mask is given.
const BRIGHT_FRACTION: f64 = 0.2;

/// Skin-tone category over the ITA range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkinToneBin {
    VeryLight,
    Light,
    Intermediate,
    Tan,
    Brown,
    Dark,
}

impl SkinToneBin {
    pub const ALL: [SkinToneBin; 6] = [
        SkinToneBin::VeryLight,
        SkinToneBin::Light,
        SkinToneBin::Intermediate,
        SkinToneBin::Tan,
        SkinToneBin::Brown,
        SkinToneBin::Dark,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SkinToneBin::VeryLight => "very_light",
            SkinToneBin::Light => "light",
            SkinToneBin::Intermediate => "intermediate",
            SkinToneBin::Tan => "tan",
            SkinToneBin::Brown => "brown",
            SkinToneBin::Dark => "dark",
        }
    }

    pub fn parse(name: &str) -> Option<SkinToneBin> {
        SkinToneBin::ALL.into_iter().find(|b| b.name() == name)
    }
}

impl std::fmt::Display for SkinToneBin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Lower bounds (degrees, lower-inclusive) of the upper five bins; everything
/// below `brown_min` is `dark`. Defaults follow the Chardon scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ItaThresholds {
    pub very_light_min: f64,
    pub light_min: f64,
    pub intermediate_min: f64,
    pub tan_min: f64,
    pub brown_min: f64,
}

impl Default for ItaThresholds {
    fn default() -> Self {
        ItaThresholds {
            very_light_min: 55.0,
            light_min: 41.0,
            intermediate_min: 28.0,
            tan_min: 10.0,
            brown_min: -30.0,
        }
    }
}

impl ItaThresholds {
    pub fn validate(&self) -> Result<()> {
        let t = [
            self.very_light_min,
            self.light_min,
            self.intermediate_min,
            self.tan_min,
            self.brown_min,
        ];
        if t.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Audit(format!(
                "ITA thresholds must be strictly decreasing, got {t:?}"
            )));
        }
        if t[0] >= 90.0 || t[4] <= -90.0 {
            return Err(Error::Audit("ITA thresholds must lie inside (-90, 90)".into()));
        }
        Ok(())
    }
}

/// Tone estimate for one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToneEstimate {
    pub ita_degrees: f64,
    pub bin: SkinToneBin,
    pub n_pixels_used: usize,
}

/// ITA in degrees for one Lab colour: arctan((L* - 50) / b*).
///
/// Returns `None` for near-zero b* where the angle is undefined.
pub fn ita_degrees(lab: LabColor) -> Option<f64> {
    if lab.b.abs() < MIN_ABS_B {
        return None;
    }
    Some(((lab.l - 50.0) / lab.b).atan().to_degrees())
}

/// Map an ITA angle to its bin. Intervals are half-open and lower-inclusive.
pub fn bin_ita(ita: f64, thresholds: &ItaThresholds) -> SkinToneBin {
    if ita >= thresholds.very_light_min {
        SkinToneBin::VeryLight
    } else if ita >= thresholds.light_min {
        SkinToneBin::Light
    } else if ita >= thresholds.intermediate_min {
        SkinToneBin::Intermediate
    } else if ita >= thresholds.tan_min {
        SkinToneBin::Tan
    } else if ita >= thresholds.brown_min {
        SkinToneBin::Brown
    } else {
        SkinToneBin::Dark
    }
}

/// Median ITA over a set of Lab pixels, skipping undefined-angle pixels.
pub fn estimate_ita_lab(pixels: &[LabColor], thresholds: &ItaThresholds) -> Result<ToneEstimate> {
    let mut itas: Vec<f64> = pixels.iter().copied().filter_map(ita_degrees).collect();
    let n = itas.len();
    let median = crate::util::median(&mut itas)
        .ok_or_else(|| Error::Audit("all pixels excluded from ITA estimate (no usable chroma)".into()))?;
    Ok(ToneEstimate {
        ita_degrees: median,
        bin: bin_ita(median, thresholds),
        n_pixels_used: n,
    })
}

/// Estimate an image's skin tone.
///
/// With a mask, the masked pixels are used directly. Without one, the
/// brightest 20% of pixels by L* serve as a proxy for non-lesion skin; the
/// median pixel ITA keeps the estimate robust to specular highlights.
pub fn estimate_ita(
    img: &Raster,
    mask: Option<&[(usize, usize)]>,
    thresholds: &ItaThresholds,
) -> Result<ToneEstimate> {
    let labs: Vec<LabColor> = match mask {
        Some(coords) => {
            if coords.is_empty() {
                return Err(Error::Audit("mask must be non-empty".into()));
            }
            coords
                .iter()
                .map(|&(y, x)| {
                    if y >= img.height() || x >= img.width() {
                        Err(Error::Audit(format!(
                            "mask pixel ({y}, {x}) outside {}x{} image",
                            img.height(),
                            img.width()
                        )))
                    } else {
                        Ok(rgb_to_lab(img.get(y, x)))
                    }
                })
                .collect::<Result<_>>()?
        }
        None => {
            let mut labs: Vec<LabColor> = Vec::with_capacity(img.height() * img.width());
            for y in 0..img.height() {
                for x in 0..img.width() {
                    labs.push(rgb_to_lab(img.get(y, x)));
                }
            }
            let k = ((labs.len() as f64 * BRIGHT_FRACTION).ceil() as usize).max(1);
            labs.sort_by(|a, b| b.l.partial_cmp(&a.l).expect("finite L*"));
            labs.truncate(k);
            labs
        }
    };
    estimate_ita_lab(&labs, thresholds)
}

/// Performance of one tone bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMetrics {
    pub bin: SkinToneBin,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// True-positive rate; `None` when undefined (no positives, or multiclass).
    pub tpr: Option<f64>,
    /// False-positive rate; `None` when undefined (no negatives, or multiclass).
    pub fpr: Option<f64>,
    /// Set when 0 < n < n_min: listed but excluded from gap computation.
    pub small_n: bool,
}

/// Largest pairwise differences across eligible bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaps {
    pub accuracy: f64,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
}

/// Per-bin metrics plus equality-of-odds style gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub per_bin: Vec<BinMetrics>,
    /// `None` when fewer than two bins meet the n_min threshold.
    pub gaps: Option<Gaps>,
    pub n_min: usize,
    pub overall_accuracy: f64,
}

/// Compute per-bin performance and gaps.
///
/// TPR/FPR use class 1 as the positive class and require binary truth;
/// with more than two classes only accuracy is reported.
pub fn subgroup_report(
    pred: &[usize],
    truth: &[usize],
    bins: &[SkinToneBin],
    n_min: usize,
) -> Result<SubgroupReport> {
    if pred.len() != truth.len() || pred.len() != bins.len() {
        return Err(Error::Audit(format!(
            "length mismatch: {} predictions, {} truths, {} bins",
            pred.len(),
            truth.len(),
            bins.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Audit("cannot report on an empty prediction set".into()));
    }
    let binary = truth.iter().chain(pred.iter()).all(|&y| y <= 1);

    let mut per_bin = Vec::new();
    for bin in SkinToneBin::ALL {
        let idxs: Vec<usize> = (0..pred.len()).filter(|&i| bins[i] == bin).collect();
        if idxs.is_empty() {
            continue;
        }
        let n = idxs.len();
        let correct = idxs.iter().filter(|&&i| pred[i] == truth[i]).count();
        let (mut tpr, mut fpr) = (None, None);
        if binary {
            let tp = idxs.iter().filter(|&&i| truth[i] == 1 && pred[i] == 1).count();
            let fnc = idxs.iter().filter(|&&i| truth[i] == 1 && pred[i] == 0).count();
            let fp = idxs.iter().filter(|&&i| truth[i] == 0 && pred[i] == 1).count();
            let tn = idxs.iter().filter(|&&i| truth[i] == 0 && pred[i] == 0).count();
            if tp + fnc > 0 {
                tpr = Some(tp as f64 / (tp + fnc) as f64);
            }
            if fp + tn > 0 {
                fpr = Some(fp as f64 / (fp + tn) as f64);
            }
        }
        per_bin.push(BinMetrics {
            bin,
            n,
            correct,
            accuracy: correct as f64 / n as f64,
            tpr,
            fpr,
            small_n: n < n_min,
        });
    }

    let eligible: Vec<&BinMetrics> = per_bin.iter().filter(|m| !m.small_n).collect();
    let gaps = if eligible.len() >= 2 {
        Some(Gaps {
            accuracy: max_pairwise_gap(eligible.iter().map(|m| m.accuracy)),
            tpr: optional_gap(eligible.iter().filter_map(|m| m.tpr)),
            fpr: optional_gap(eligible.iter().filter_map(|m| m.fpr)),
        })
    } else {
        None
    };

    let overall = pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64;
    Ok(SubgroupReport {
        per_bin,
        gaps,
        n_min,
        overall_accuracy: overall,
    })
}

fn max_pairwise_gap(values: impl Iterator<Item = f64>) -> f64 {
    let vals: Vec<f64> = values.collect();
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max - min
}

fn optional_gap(values: impl Iterator<Item = f64>) -> Option<f64> {
    let vals: Vec<f64> = values.collect();
    if vals.len() >= 2 {
        Some(max_pairwise_gap(vals.into_iter()))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn lab(l: f64, a: f64, b: f64) -> LabColor {
        LabColor { l, a, b }
    }

    #[test]
    fn ita_matches_hand_values() {
        let t = ItaThresholds::default();
        let e = estimate_ita_lab(&[lab(70.0, 5.0, 20.0); 4], &t).unwrap();
        assert_relative_eq!(e.ita_degrees, 45.0, epsilon = 1e-12);
        let e = estimate_ita_lab(&[lab(50.0, 5.0, 10.0); 4], &t).unwrap();
        assert_relative_eq!(e.ita_degrees, 0.0, epsilon = 1e-12);
        let e = estimate_ita_lab(&[lab(80.0, 5.0, 14.0); 4], &t).unwrap();
        assert_relative_eq!(e.ita_degrees, (30.0f64 / 14.0).atan().to_degrees(), epsilon = 1e-12);
        assert_eq!(e.bin, SkinToneBin::VeryLight);
        assert_eq!(e.n_pixels_used, 4);
    }

    #[test]
    fn gray_pixels_are_excluded() {
        let t = ItaThresholds::default();
        let err = estimate_ita_lab(&[lab(50.0, 0.0, 0.0), lab(70.0, 0.0, 0.0)], &t).unwrap_err();
        assert!(err.to_string().contains("excluded"), "{err}");
        // Mixed input: the defined pixels carry the estimate.
        let e = estimate_ita_lab(&[lab(50.0, 0.0, 0.0), lab(70.0, 5.0, 20.0)], &t).unwrap();
        assert_relative_eq!(e.ita_degrees, 45.0, epsilon = 1e-12);
        assert_eq!(e.n_pixels_used, 1);
    }

    #[test]
    fn bin_boundaries_are_lower_inclusive() {
        let t = ItaThresholds::default();
        assert_eq!(bin_ita(60.0, &t), SkinToneBin::VeryLight);
        assert_eq!(bin_ita(55.0, &t), SkinToneBin::VeryLight);
        assert_eq!(bin_ita(41.0, &t), SkinToneBin::Light);
        assert_eq!(bin_ita(28.0, &t), SkinToneBin::Intermediate);
        assert_eq!(bin_ita(10.0, &t), SkinToneBin::Tan);
        assert_eq!(bin_ita(-30.0, &t), SkinToneBin::Brown);
        assert_eq!(bin_ita(-40.0, &t), SkinToneBin::Dark);
        assert_eq!(bin_ita(-30.0001, &t), SkinToneBin::Dark);
    }

    #[test]
    fn estimate_is_invariant_to_rotation_and_flip() {
        let t = ItaThresholds::default();
        // Non-uniform image: skin-like bright area plus dark corner.
        let img = Raster::from_fn(10, 10, |y, x| {
            if y < 3 && x < 3 {
                [40, 20, 25]
            } else {
                [210, 160, 140]
            }
        });
        let base = estimate_ita(&img, None, &t).unwrap();
        let rot = estimate_ita(&img.rotate90(), None, &t).unwrap();
        let flip = estimate_ita(&img.flip_horizontal(), None, &t).unwrap();
        assert_eq!(base, rot);
        assert_eq!(base, flip);
    }

    #[test]
    fn mask_selects_pixels() {
        let t = ItaThresholds::default();
        let img = Raster::from_fn(4, 4, |y, _| if y < 2 { [220, 170, 150] } else { [60, 30, 35] });
        let bright = estimate_ita(&img, Some(&[(0, 0), (0, 1)]), &t).unwrap();
        let dark = estimate_ita(&img, Some(&[(3, 0), (3, 1)]), &t).unwrap();
        assert!(bright.ita_degrees > dark.ita_degrees);
        assert!(estimate_ita(&img, Some(&[(9, 0)]), &t).is_err());
        assert!(estimate_ita(&img, Some(&[]), &t).is_err());
    }

    #[test]
    fn identical_confusion_tables_have_zero_gaps() {
        // Each bin sees truth [1,1,0,0] with pred [1,0,1,0]:
        // TP=1, FN=1, FP=1, TN=1 in both.
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        let mut bins = Vec::new();
        for bin in [SkinToneBin::Light, SkinToneBin::Dark] {
            truth.extend([1, 1, 0, 0]);
            pred.extend([1, 0, 1, 0]);
            bins.extend([bin; 4]);
        }
        let r = subgroup_report(&pred, &truth, &bins, 1).unwrap();
        let gaps = r.gaps.unwrap();
        assert_relative_eq!(gaps.accuracy, 0.0, epsilon = 1e-15);
        assert_eq!(gaps.tpr, Some(0.0));
        assert_eq!(gaps.fpr, Some(0.0));
    }

    #[test]
    fn hand_counted_accuracy_gap() {
        // Bin A: 9/10 correct; bin B: 6/10 correct -> gap 0.30.
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        let mut bins = Vec::new();
        for i in 0..10 {
            bins.push(SkinToneBin::VeryLight);
            truth.push(1);
            pred.push(if i < 9 { 1 } else { 0 });
        }
        for i in 0..10 {
            bins.push(SkinToneBin::Tan);
            truth.push(1);
            pred.push(if i < 6 { 1 } else { 0 });
        }
        let r = subgroup_report(&pred, &truth, &bins, 5).unwrap();
        let gap = r.gaps.unwrap().accuracy;
        assert!((gap - 0.30).abs() < 1e-12, "gap = {gap}");
    }

    #[test]
    fn small_bins_flagged_and_excluded() {
        let pred = vec![1, 1, 1, 1, 1, 0, 1, 0, 1, 1, 1, 0];
        let truth = vec![1; 12];
        let mut bins = vec![SkinToneBin::Light; 10];
        bins.extend([SkinToneBin::Dark, SkinToneBin::Dark]);
        let r = subgroup_report(&pred, &truth, &bins, 5).unwrap();
        let dark = r.per_bin.iter().find(|m| m.bin == SkinToneBin::Dark).unwrap();
        assert!(dark.small_n);
        assert!(r.gaps.is_none(), "only one eligible bin -> undefined gaps");
    }

    #[test]
    fn multiclass_reports_accuracy_only() {
        let pred = vec![0, 1, 2, 2, 1, 0];
        let truth = vec![0, 1, 2, 1, 1, 2];
        let bins = vec![SkinToneBin::Light; 6];
        let r = subgroup_report(&pred, &truth, &bins, 1).unwrap();
        assert!(r.per_bin[0].tpr.is_none());
        assert!(r.per_bin[0].fpr.is_none());
    }

    #[test]
    fn pooled_accuracy_matches_overall() {
        let pred = vec![1, 0, 1, 1, 0, 0, 1, 1, 0, 1, 0, 1];
        let truth = vec![1, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 1];
        let bins: Vec<SkinToneBin> = [
            SkinToneBin::VeryLight,
            SkinToneBin::Tan,
            SkinToneBin::Dark,
        ]
        .into_iter()
        .cycle()
        .take(12)
        .collect();
        let r = subgroup_report(&pred, &truth, &bins, 1).unwrap();
        let pooled: f64 = r
            .per_bin
            .iter()
            .map(|m| m.accuracy * m.n as f64 / pred.len() as f64)
            .sum();
        assert!((pooled - r.overall_accuracy).abs() < 1e-12);
    }
}
