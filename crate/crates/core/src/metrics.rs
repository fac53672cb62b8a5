//! Detection extraction, distance-threshold matching, pooled average precision
//! and image-quality scores.

use std::cmp::Ordering;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::imaging::Target;
use crate::scenegen::SparseGridImage;

/// Matching radii, in pixels.
pub const DELTAS: [f64; 5] = [0.05, 0.10, 0.15, 0.20, 0.25];

/// Default intensity cut for turning a reconstruction into detections.
pub const DEFAULT_THRESHOLD: f64 = 50.0;

pub const DEFAULT_PEAK: f64 = 255.0;

/// A predicted target in sensor coordinates; the intensity doubles as the
/// confidence score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub intensity: f64,
}

/// Sensor coordinate of the center of high-resolution cell `index`; the inverse
/// of the cell assignment used when encoding ground truth.
pub fn cell_center(index: usize, factor: usize, pixel_width: f64) -> f64 {
    let c = factor as f64;
    ((index as f64 - (c - 1.0) / 2.0) / c + 0.5) * pixel_width
}

/// Every cell with value strictly above `threshold`, back-projected to sensor
/// coordinates.
pub fn extract_targets(pred: &SparseGridImage, threshold: f64, pixel_width: f64) -> Result<Vec<Detection>> {
    if !(threshold >= 0.0) {
        return Err(Error::Domain(format!("threshold {threshold} must be >= 0")));
    }
    let mut out = Vec::new();
    for hy in 0..pred.height {
        for hx in 0..pred.width {
            let v = pred.get(hx, hy);
            if v > threshold {
                out.push(Detection {
                    x: cell_center(hx, pred.factor, pixel_width),
                    y: cell_center(hy, pred.factor, pixel_width),
                    intensity: v,
                });
            }
        }
    }
    Ok(out)
}

fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.intensity
        .total_cmp(&a.intensity)
        .then(a.x.total_cmp(&b.x))
        .then(a.y.total_cmp(&b.y))
}

/// Detections in confidence order with their TP/FP outcome at one radius.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchTable {
    pub detections: Vec<Detection>,
    pub flags: Vec<bool>,
    pub gt_count: usize,
}

/// Greedy matching in descending confidence: each detection claims the nearest
/// unmatched ground truth strictly closer than `delta`.
pub fn match_detections(dets: &[Detection], gts: &[Target], delta: f64) -> Result<MatchTable> {
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("match radius {delta} must be positive")));
    }
    let mut sorted = dets.to_vec();
    sorted.sort_by(rank);
    let mut taken = vec![false; gts.len()];
    let flags = sorted
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (i, t) in gts.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                let dist = ((d.x - t.x).powi(2) + (d.y - t.y).powi(2)).sqrt();
                if dist < delta && best.map_or(true, |(_, b)| dist < b) {
                    best = Some((i, dist));
                }
            }
            match best {
                Some((i, _)) => {
                    taken[i] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    Ok(MatchTable {
        detections: sorted,
        flags,
        gt_count: gts.len(),
    })
}

/// 101-point interpolated average precision of a confidence-ordered TP/FP list.
pub fn average_precision(flags: &[bool], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, f) in flags.iter().enumerate() {
        tp += *f as usize;
        recall.push(tp as f64 / gt_count as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // precision envelope: max precision at any recall >= r
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        while k < recall.len() && recall[k] < r - 1e-12 {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    sum / 101.0
}

/// Per-radius AP and their mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApSummary {
    pub ap: [f64; 5],
    pub cso_map: f64,
}

/// Pools matches from every image into one ranking per radius, so the PR curve
/// is global to the dataset while matching never crosses images.
pub fn cso_map(images: &[(Vec<Detection>, Vec<Target>)]) -> Result<ApSummary> {
    let gt_total: usize = images.iter().map(|(_, g)| g.len()).sum();
    let mut ap = [0.0; 5];
    for (k, delta) in DELTAS.iter().enumerate() {
        let mut pooled: Vec<(Detection, usize, bool)> = Vec::new();
        for (img, (dets, gts)) in images.iter().enumerate() {
            let table = match_detections(dets, gts, *delta)?;
            pooled.extend(table.detections.into_iter().zip(table.flags).map(|(d, f)| (d, img, f)));
        }
        pooled.sort_by(|a, b| rank(&a.0, &b.0).then(a.1.cmp(&b.1)));
        let flags: Vec<bool> = pooled.iter().map(|p| p.2).collect();
        ap[k] = average_precision(&flags, gt_total);
    }
    Ok(ApSummary {
        ap,
        cso_map: ap.iter().sum::<f64>() / ap.len() as f64,
    })
}

fn check_same_shape(a: &SparseGridImage, b: &SparseGridImage) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Shape(format!(
            "{}x{} image compared with {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; identical images give `f64::INFINITY`.
pub fn psnr(pred: &SparseGridImage, gt: &SparseGridImage, peak: f64) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let mse = pred
        .values
        .iter()
        .zip(&gt.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.values.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        *t = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

// separable Gaussian filter over valid positions only
fn filter_valid(img: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5, K1 0.01, K2 0.03).
pub fn ssim(pred: &SparseGridImage, gt: &SparseGridImage, peak: f64) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let (w, h) = (pred.width, pred.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "{w}x{h} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let taps = gaussian_taps();
    let (a, b) = (&pred.values, &gt.values);
    let prod = |f: &dyn Fn(usize) -> f64| (0..a.len()).map(f).collect::<Vec<_>>();
    let mu_a = filter_valid(a, w, h, &taps);
    let mu_b = filter_valid(b, w, h, &taps);
    let aa = filter_valid(&prod(&|i| a[i] * a[i]), w, h, &taps);
    let bb = filter_valid(&prod(&|i| b[i] * b[i]), w, h, &taps);
    let ab = filter_valid(&prod(&|i| a[i] * b[i]), w, h, &taps);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

fn ser_maybe_inf<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        Err(serde::ser::Error::custom(format!("cannot serialize {v}")))
    }
}

fn de_maybe_inf<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }
    match Num::deserialize(d)? {
        Num::F(v) => Ok(v),
        Num::S(s) if s == "inf" => Ok(f64::INFINITY),
        Num::S(s) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
    }
}

/// Scores for one method on one split. A PSNR of `inf` (identical images) is
/// written as the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub ap_05: f64,
    pub ap_10: f64,
    pub ap_15: f64,
    pub ap_20: f64,
    pub ap_25: f64,
    pub cso_map: f64,
    #[serde(serialize_with = "ser_maybe_inf", deserialize_with = "de_maybe_inf")]
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub n_images: usize,
}

impl EvalReport {
    pub fn aps(&self) -> [f64; 5] {
        [self.ap_05, self.ap_10, self.ap_15, self.ap_20, self.ap_25]
    }
}

/// One image to score: the reconstruction, its ground-truth grid, and the
/// continuous target list.
pub struct EvalSample<'a> {
    pub prediction: &'a SparseGridImage,
    pub truth: &'a SparseGridImage,
    pub targets: &'a [Target],
}

pub fn evaluate(samples: &[EvalSample<'_>], threshold: f64, pixel_width: f64, peak: f64) -> Result<EvalReport> {
    let mut pairs = Vec::with_capacity(samples.len());
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for s in samples {
        pairs.push((extract_targets(s.prediction, threshold, pixel_width)?, s.targets.to_vec()));
        psnr_sum += psnr(s.prediction, s.truth, peak)?;
        ssim_sum += ssim(s.prediction, s.truth, peak)?;
    }
    let n = samples.len();
    let summary = cso_map(&pairs)?;
    let mean = |v: f64| if n == 0 { 0.0 } else { v / n as f64 };
    Ok(EvalReport {
        ap_05: summary.ap[0],
        ap_10: summary.ap[1],
        ap_15: summary.ap[2],
        ap_20: summary.ap[3],
        ap_25: summary.ap[4],
        cso_map: summary.cso_map,
        psnr_mean: mean(psnr_sum),
        ssim_mean: mean(ssim_sum),
        n_images: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, y: f64, g: f64) -> Detection {
        Detection { x, y, intensity: g }
    }

    #[test]
    fn trivial_ap_values() {
        assert_eq!(average_precision(&[true], 1), 1.0);
        assert_eq!(average_precision(&[false], 1), 0.0);
        assert_eq!(average_precision(&[], 0), 0.0);
        assert_eq!(average_precision(&[], 3), 0.0);
    }

    #[test]
    fn near_prediction_matches_everywhere() {
        let gt = [Target::new(5.5, 5.5, 230.0)];
        let d = [det(5.52, 5.53, 228.0)];
        for delta in DELTAS {
            assert_eq!(match_detections(&d, &gt, delta).unwrap().flags, vec![true]);
        }
    }

    #[test]
    fn far_prediction_pattern_and_map() {
        let gt = vec![Target::new(5.5, 5.5, 230.0)];
        let d = vec![det(5.62, 5.5, 228.0)];
        let got: Vec<bool> = DELTAS
            .iter()
            .map(|delta| match_detections(&d, &gt, *delta).unwrap().flags[0])
            .collect();
        assert_eq!(got, vec![false, false, true, true, true]);
        let s = cso_map(&[(d, gt)]).unwrap();
        assert_eq!(s.cso_map, 0.6);
    }

    #[test]
    fn boundary_distance_is_a_miss() {
        let gt = [Target::new(0.0, 0.0, 1.0)];
        let d = [det(0.25, 0.0, 1.0)];
        assert_eq!(match_detections(&d, &gt, 0.25).unwrap().flags, vec![false]);
    }

    #[test]
    fn single_assignment_prefers_confidence() {
        let gt = [Target::new(1.0, 1.0, 1.0)];
        let d = [det(1.02, 1.0, 100.0), det(1.01, 1.0, 200.0)];
        let t = match_detections(&d, &gt, 0.05).unwrap();
        assert_eq!(t.flags, vec![true, false]);
        assert_eq!(t.detections[0].intensity, 200.0);
    }

    #[test]
    fn psnr_reference_values() {
        let a = SparseGridImage::from_values(2, 2, 1, vec![0.0; 4]).unwrap();
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), f64::INFINITY);
        let b = SparseGridImage::from_values(2, 2, 1, vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        assert!((psnr(&a, &b, 255.0).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-12);
        assert!((20.0 * 255f64.log10() - 48.1308).abs() < 1e-4);
        let c = SparseGridImage::from_values(2, 2, 1, vec![255.0; 4]).unwrap();
        assert!(psnr(&a, &c, 255.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn report_json_infinity_round_trip() {
        let r = EvalReport {
            ap_05: 0.1,
            ap_10: 0.2,
            ap_15: 0.3,
            ap_20: 0.4,
            ap_25: 0.5,
            cso_map: 0.3,
            psnr_mean: f64::INFINITY,
            ssim_mean: 1.0,
            n_images: 3,
        };
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"psnr_mean\":\"inf\""));
        assert_eq!(serde_json::from_str::<EvalReport>(&text).unwrap(), r);
    }
}
