//! Classification and localization metrics.

use std::fmt::Write as _;

use crate::data::{BoundingBox, Dataset, Image};
use crate::error::{Error, Result};
use crate::model::Prediction;
use crate::scalar::Scalar;

/// Area under the ROC curve via the Mann–Whitney statistic, with tied
/// scores receiving their mid-rank.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "roc_auc",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("roc_auc", "NaN score"));
    }
    let n_pos = labels.iter().filter(|&&y| y != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        let only = if n_pos == 0 { "negative" } else { "positive" };
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, but all {} labels are {only}",
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// `2ΣSG / (ΣS² + ΣG²)`.
pub fn continuous_dice(s: &[f64], g: &[f64]) -> Result<f64> {
    if s.len() != g.len() {
        return Err(Error::shape(
            "continuous_dice",
            format!("{} vs {} entries", s.len(), g.len()),
        ));
    }
    if g.iter().all(|&v| v == 0.0) {
        return Err(Error::UndefinedMetric("DICE against an empty ground-truth mask".into()));
    }
    let (mut sg, mut ss, mut gg) = (0.0, 0.0, 0.0);
    for (&a, &b) in s.iter().zip(g) {
        sg += a * b;
        ss += a * a;
        gg += b * b;
    }
    Ok(2.0 * sg / (ss + gg))
}

/// `S ≥ τ`, elementwise.
pub fn binarize(s: &[f64], tau: f64) -> Vec<bool> {
    s.iter().map(|&v| v >= tau).collect()
}

/// Fraction of entries `≥ threshold`.
pub fn activated_area(s: &[f64], threshold: f64) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    s.iter().filter(|&&v| v >= threshold).count() as f64 / s.len() as f64
}

/// A saliency map on an `side × side` grid over an `image_size` image,
/// together with the ground-truth boxes (image pixels) of one class.
#[derive(Debug, Clone)]
pub struct LocalizationCase {
    pub saliency: Vec<f64>,
    pub side: usize,
    pub image_size: usize,
    pub boxes: Vec<BoundingBox>,
}

impl LocalizationCase {
    fn factor(&self) -> Result<usize> {
        if self.side == 0 || !self.image_size.is_multiple_of(self.side) || self.saliency.len() != self.side * self.side
        {
            return Err(Error::shape(
                "iobb",
                format!(
                    "{} saliency values on a {}-grid over a {}-pixel image",
                    self.saliency.len(),
                    self.side,
                    self.image_size
                ),
            ));
        }
        Ok(self.image_size / self.side)
    }

    /// Detected region at image resolution.
    fn detected(&self, tau: f64) -> Result<Vec<bool>> {
        let f = self.factor()?;
        let cells = binarize(&self.saliency, tau);
        let n = self.image_size;
        Ok((0..n * n)
            .map(|i| cells[(i / n / f) * self.side + (i % n) / f])
            .collect())
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            "iobb_accuracy",
            format!("{name} = {v} is outside (0, 1)"),
        ))
    }
}

/// `|D ∩ B| / |D|` for a detected pixel set `D` on an `n × n` image; zero
/// when `D` is empty.
pub fn iobb(detected: &[bool], n: usize, b: &BoundingBox) -> f64 {
    let mut d = 0usize;
    let mut inter = 0usize;
    for (i, &on) in detected.iter().enumerate() {
        if on {
            d += 1;
            if b.contains_pixel(i % n, i / n) {
                inter += 1;
            }
        }
    }
    if d == 0 {
        0.0
    } else {
        inter as f64 / d as f64
    }
}

fn check_cases(cases: &[LocalizationCase], tau: f64, alpha: f64) -> Result<()> {
    check_unit("tau", tau)?;
    check_unit("alpha", alpha)?;
    if cases.is_empty() {
        return Err(Error::UndefinedMetric("IoBB accuracy over zero samples".into()));
    }
    if cases.iter().any(|c| c.boxes.is_empty()) {
        return Err(Error::invalid("iobb_accuracy", "every sample needs at least one box"));
    }
    Ok(())
}

/// Fraction of cases where the region `S ≥ τ` has IoBB `≥ α` with at least
/// one ground-truth box. The detected region is the raw thresholded mask.
pub fn iobb_accuracy(cases: &[LocalizationCase], tau: f64, alpha: f64) -> Result<f64> {
    check_cases(cases, tau, alpha)?;
    let mut correct = 0usize;
    for c in cases {
        let d = c.detected(tau)?;
        if c.boxes.iter().any(|b| iobb(&d, c.image_size, b) >= alpha) {
            correct += 1;
        }
    }
    Ok(correct as f64 / cases.len() as f64)
}

/// 4-connected components of `mask` on an `n × n` grid, as tight boxes.
pub fn component_boxes(mask: &[bool], n: usize) -> Vec<BoundingBox> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (n, n, 0, 0);
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % n, i / n);
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < n {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - n);
            }
            if y + 1 < n {
                visit(i + n);
            }
        }
        out.push(BoundingBox {
            class: 0,
            x: x0 as f64,
            y: y0 as f64,
            w: (x1 - x0 + 1) as f64,
            h: (y1 - y0 + 1) as f64,
        });
    }
    out
}

fn box_overlap(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let h = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    w * h
}

/// Variant that first fits a box to every connected component of the
/// detected region; a case is correct when some (detected, truth) box pair
/// has `|B_d ∩ B_g| / |B_d| ≥ α`. Reported next to [`iobb_accuracy`].
pub fn iobb_accuracy_components(cases: &[LocalizationCase], tau: f64, alpha: f64) -> Result<f64> {
    check_cases(cases, tau, alpha)?;
    let mut correct = 0usize;
    for c in cases {
        let d = c.detected(tau)?;
        let hit = component_boxes(&d, c.image_size)
            .iter()
            .any(|bd| c.boxes.iter().any(|bg| box_overlap(bd, bg) / (bd.w * bd.h) >= alpha));
        correct += hit as usize;
    }
    Ok(correct as f64 / cases.len() as f64)
}

/// Per-class saliency plane upsampled to the mask resolution.
pub fn saliency_at(saliency: &[f64], side: usize, image_size: usize) -> Result<Image> {
    if side == 0 || !image_size.is_multiple_of(side) {
        return Err(Error::shape(
            "saliency_at",
            format!("grid {side} does not divide image {image_size}"),
        ));
    }
    Ok(Image::from_vec(side, side, saliency.to_vec())?.upsample_nearest(image_size / side))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    /// Number of samples the value was computed from.
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IobbEntry {
    pub tau: f64,
    pub alpha: f64,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub name: String,
    /// `Err` carries the reason the AUC is undefined.
    pub auc: std::result::Result<MetricValue, String>,
    /// Mean continuous DICE over positives with a mask.
    pub dice: Option<MetricValue>,
    /// Mean activated area (threshold 0.5) over positives.
    pub activated_area: Option<MetricValue>,
    /// Sorted by `(tau, alpha)`.
    pub iobb: Vec<IobbEntry>,
    /// Same grid scored with [`iobb_accuracy_components`].
    pub iobb_components: Vec<IobbEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
}

pub const ACTIVATION_THRESHOLD: f64 = 0.5;

impl MetricsReport {
    /// Mean AUC over classes where it is defined.
    pub fn mean_auc(&self) -> Option<f64> {
        let v: Vec<f64> = self
            .classes
            .iter()
            .filter_map(|c| c.auc.as_ref().ok().map(|m| m.value))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_dice(&self) -> Option<f64> {
        let v: Vec<f64> = self.classes.iter().filter_map(|c| c.dice.map(|m| m.value)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// DICE averaged over every positive (sample, class) pair rather than
    /// over classes.
    pub fn pooled_dice(&self) -> Option<f64> {
        let (sum, n) = self
            .classes
            .iter()
            .filter_map(|c| c.dice)
            .fold((0.0, 0), |(s, n), m| (s + m.value * m.n as f64, n + m.n));
        (n > 0).then(|| sum / n as f64)
    }

    /// `class,metric,parameter,value,n` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,metric,parameter,value,n\n");
        for c in &self.classes {
            if let Ok(m) = &c.auc {
                let _ = writeln!(out, "{},auc,,{},{}", c.name, m.value, m.n);
            }
            if let Some(m) = c.dice {
                let _ = writeln!(out, "{},dice,,{},{}", c.name, m.value, m.n);
            }
            if let Some(m) = c.activated_area {
                let _ = writeln!(
                    out,
                    "{},activated_area,threshold={ACTIVATION_THRESHOLD},{},{}",
                    c.name, m.value, m.n
                );
            }
            for e in &c.iobb {
                let _ = writeln!(
                    out,
                    "{},iobb_accuracy,tau={};alpha={},{},{}",
                    c.name, e.tau, e.alpha, e.accuracy, e.n
                );
            }
            for e in &c.iobb_components {
                let _ = writeln!(
                    out,
                    "{},iobb_accuracy_components,tau={};alpha={},{},{}",
                    c.name, e.tau, e.alpha, e.accuracy, e.n
                );
            }
        }
        out
    }
}

/// Scores `predictions[i]` against `dataset.samples[i]` for every class.
pub fn evaluate<T: Scalar>(
    dataset: &Dataset,
    predictions: &[Prediction<T>],
    taus: &[f64],
    alphas: &[f64],
) -> Result<MetricsReport> {
    if predictions.len() != dataset.len() {
        return Err(Error::shape(
            "evaluate",
            format!("{} predictions for {} samples", predictions.len(), dataset.len()),
        ));
    }
    let k = dataset.num_classes();
    if let Some(p) = predictions.iter().find(|p| p.probs.len() != k) {
        return Err(Error::shape(
            "evaluate",
            format!("model predicts {} classes, dataset has {k}", p.probs.len()),
        ));
    }
    let mut taus = taus.to_vec();
    let mut alphas = alphas.to_vec();
    taus.sort_by(f64::total_cmp);
    alphas.sort_by(f64::total_cmp);

    let mut classes = Vec::with_capacity(k);
    for (c, name) in dataset.class_names.iter().enumerate() {
        let scores: Vec<f64> = predictions.iter().map(|p| p.probs[c].f64()).collect();
        let labels: Vec<u8> = dataset.samples.iter().map(|s| s.labels[c]).collect();
        let auc = roc_auc(&scores, &labels)
            .map(|value| MetricValue { value, n: labels.len() })
            .map_err(|e| e.to_string());

        let mut dice = Vec::new();
        let mut area = Vec::new();
        let mut cases = Vec::new();
        for (s, p) in dataset.samples.iter().zip(predictions) {
            if s.labels[c] == 0 {
                continue;
            }
            let plane: Vec<f64> = p.saliency.class(c).iter().map(|v| v.f64()).collect();
            area.push(activated_area(&plane, ACTIVATION_THRESHOLD));
            if let Some(mask) = s.masks[c].as_ref().filter(|m| m.is_nonzero()) {
                let up = saliency_at(&plane, p.saliency.side(), mask.width())?;
                dice.push(continuous_dice(up.data(), mask.data())?);
            }
            let boxes: Vec<BoundingBox> = s.boxes_for(c).copied().collect();
            if !boxes.is_empty() {
                cases.push(LocalizationCase {
                    saliency: plane,
                    side: p.saliency.side(),
                    image_size: s.image.width(),
                    boxes,
                });
            }
        }
        let mean = |v: &[f64]| {
            (!v.is_empty()).then(|| MetricValue {
                value: v.iter().sum::<f64>() / v.len() as f64,
                n: v.len(),
            })
        };
        let mut iobb = Vec::new();
        let mut iobb_components = Vec::new();
        if !cases.is_empty() {
            for &tau in &taus {
                for &alpha in &alphas {
                    let entry = |accuracy| IobbEntry {
                        tau,
                        alpha,
                        accuracy,
                        n: cases.len(),
                    };
                    iobb.push(entry(iobb_accuracy(&cases, tau, alpha)?));
                    iobb_components.push(entry(iobb_accuracy_components(&cases, tau, alpha)?));
                }
            }
        }
        classes.push(ClassMetrics {
            name: name.clone(),
            auc,
            dice: mean(&dice),
            activated_area: mean(&area),
            iobb,
            iobb_components,
        });
    }
    Ok(MetricsReport { classes })
}
