//! Segmentation metrics: confusion-matrix IoU and F1, and boundary IoU over
//! dilated contour bands.

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::objectives::{LabelMap, VOID};

/// Default contour dilation radius in pixels.
pub const DEFAULT_BAND_RADIUS: usize = 2;

/// How classes absent from both maps enter the boundary-IoU mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AbsentClasses {
    #[default]
    Skip,
    CountAsZero,
}

fn same_shape(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::dim(format!(
            "prediction {}×{} vs ground truth {}×{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    if pred.num_classes != gt.num_classes {
        return Err(Error::config(format!(
            "prediction has {} classes, ground truth {}",
            pred.num_classes, gt.num_classes
        )));
    }
    Ok(())
}

/// `confusion[gt][pred]` over non-void ground-truth pixels.
pub fn confusion_matrix(pred: &LabelMap, gt: &LabelMap) -> Result<Vec<Vec<u64>>> {
    same_shape(pred, gt)?;
    let k = gt.num_classes;
    let mut m = vec![vec![0u64; k]; k];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if g == VOID {
            continue;
        }
        if p == VOID {
            return Err(Error::Data("prediction contains VOID at a labelled pixel".into()));
        }
        m[g as usize][p as usize] += 1;
    }
    Ok(m)
}

/// Pixels of class `c` with a 4-neighbour outside the class or outside the image.
pub fn contour(labels: &LabelMap, c: u8) -> Vec<bool> {
    let (h, w) = (labels.height, labels.width);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if labels.get(y, x) != c {
                continue;
            }
            out[y * w + x] = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || labels.get(y - 1, x) != c
                || labels.get(y + 1, x) != c
                || labels.get(y, x - 1) != c
                || labels.get(y, x + 1) != c;
        }
    }
    out
}

/// Chebyshev dilation of a boolean grid, separable in rows then columns.
pub fn dilate(mask: &[bool], h: usize, w: usize, d: usize) -> Vec<bool> {
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                let (lo, hi) = (x.saturating_sub(d), (x + d).min(w - 1));
                rows[y * w + lo..=y * w + hi].iter_mut().for_each(|v| *v = true);
            }
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if rows[y * w + x] {
                for yy in y.saturating_sub(d)..=(y + d).min(h - 1) {
                    out[yy * w + x] = true;
                }
            }
        }
    }
    out
}

/// Pixels within Chebyshev distance `d` of class `c`'s contour.
pub fn boundary_band(labels: &LabelMap, c: u8, d: usize) -> Result<Vec<bool>> {
    if d == 0 {
        return Err(Error::Parameter("boundary radius must be ≥ 1".into()));
    }
    Ok(dilate(&contour(labels, c), labels.height, labels.width, d))
}

/// Per-class `(|B_pred ∩ B_gt|, |B_pred ∪ B_gt|)`, ignoring void ground truth.
pub fn band_counts(pred: &LabelMap, gt: &LabelMap, d: usize) -> Result<Vec<(u64, u64)>> {
    same_shape(pred, gt)?;
    (0..gt.num_classes as u8)
        .map(|c| {
            let (bp, bg) = (boundary_band(pred, c, d)?, boundary_band(gt, c, d)?);
            let mut inter = 0;
            let mut union = 0;
            for ((&a, &b), &g) in bp.iter().zip(&bg).zip(&gt.labels) {
                if g == VOID {
                    continue;
                }
                inter += (a && b) as u64;
                union += (a || b) as u64;
            }
            Ok((inter, union))
        })
        .collect()
}

fn ratio_mean(values: &[Option<f64>], absent: AbsentClasses) -> f64 {
    let (sum, n) = values.iter().fold((0.0, 0usize), |(s, n), v| match (v, absent) {
        (Some(v), _) => (s + v, n + 1),
        (None, AbsentClasses::CountAsZero) => (s, n + 1),
        (None, AbsentClasses::Skip) => (s, n),
    });
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

pub fn mbiou(pred: &LabelMap, gt: &LabelMap, d: usize) -> Result<f64> {
    mbiou_with(pred, gt, d, AbsentClasses::Skip)
}

pub fn mbiou_with(pred: &LabelMap, gt: &LabelMap, d: usize, absent: AbsentClasses) -> Result<f64> {
    let per: Vec<Option<f64>> = band_counts(pred, gt, d)?
        .into_iter()
        .map(|(i, u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    Ok(ratio_mean(&per, absent))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub confusion: Vec<Vec<u64>>,
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_f1: Vec<Option<f64>>,
    pub per_class_biou: Vec<Option<f64>>,
    pub miou: f64,
    pub mf1: f64,
    pub mbiou: f64,
}

impl MetricReport {
    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.confusion.iter().flatten().sum();
        let diag: u64 = (0..self.confusion.len()).map(|c| self.confusion[c][c]).sum();
        diag as f64 / total.max(1) as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let f = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.6}"));
        for c in 0..self.confusion.len() {
            let _ = writeln!(
                s,
                "{c} {} {} {}",
                f(self.per_class_iou[c]),
                f(self.per_class_f1[c]),
                f(self.per_class_biou[c])
            );
        }
        let _ = writeln!(s, "mIoU {:.6} mF1 {:.6} mBIoU {:.6}", self.miou, self.mf1, self.mbiou);
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Accumulates one global confusion matrix and band counts over an eval set.
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    pub num_classes: usize,
    pub radius: usize,
    pub absent: AbsentClasses,
    confusion: Vec<Vec<u64>>,
    bands: Vec<(u64, u64)>,
}

impl MetricAccumulator {
    pub fn new(num_classes: usize, radius: usize) -> Self {
        Self {
            num_classes,
            radius,
            absent: AbsentClasses::Skip,
            confusion: vec![vec![0; num_classes]; num_classes],
            bands: vec![(0, 0); num_classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if gt.num_classes != self.num_classes {
            return Err(Error::config(format!(
                "data has {} classes, evaluator expects {}",
                gt.num_classes, self.num_classes
            )));
        }
        let m = confusion_matrix(pred, gt)?;
        let b = band_counts(pred, gt, self.radius)?;
        for (row, add) in self.confusion.iter_mut().zip(m) {
            row.iter_mut().zip(add).for_each(|(a, v)| *a += v);
        }
        for (acc, (i, u)) in self.bands.iter_mut().zip(b) {
            acc.0 += i;
            acc.1 += u;
        }
        Ok(())
    }

    /// Order-independent merge of two partial accumulations.
    pub fn merge(&mut self, other: &Self) {
        for (row, add) in self.confusion.iter_mut().zip(&other.confusion) {
            row.iter_mut().zip(add).for_each(|(a, v)| *a += v);
        }
        for (acc, (i, u)) in self.bands.iter_mut().zip(&other.bands) {
            acc.0 += i;
            acc.1 += u;
        }
    }

    pub fn report(&self) -> MetricReport {
        let k = self.num_classes;
        let m = &self.confusion;
        let mut iou = Vec::with_capacity(k);
        let mut f1 = Vec::with_capacity(k);
        for c in 0..k {
            let tp = m[c][c];
            let fn_ = m[c].iter().sum::<u64>() - tp;
            let fp = (0..k).map(|r| m[r][c]).sum::<u64>() - tp;
            let den = tp + fp + fn_;
            iou.push((den > 0).then(|| tp as f64 / den as f64));
            f1.push((den > 0).then(|| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64));
        }
        let biou: Vec<Option<f64>> = self
            .bands
            .iter()
            .map(|&(i, u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        MetricReport {
            confusion: m.clone(),
            miou: ratio_mean(&iou, AbsentClasses::Skip),
            mf1: ratio_mean(&f1, AbsentClasses::Skip),
            mbiou: ratio_mean(&biou, self.absent),
            per_class_iou: iou,
            per_class_f1: f1,
            per_class_biou: biou,
        }
    }
}

/// Full report for a single prediction/ground-truth pair.
pub fn confusion_and_scores(pred: &LabelMap, gt: &LabelMap, radius: usize) -> Result<MetricReport> {
    same_shape(pred, gt)?;
    let mut acc = MetricAccumulator::new(gt.num_classes, radius);
    acc.add(pred, gt)?;
    Ok(acc.report())
}
