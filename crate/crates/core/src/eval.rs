//! Confusion-matrix metrics, pseudo-label diagnostics and feature export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{Sample, IGNORE};
use crate::error::{Error, Result};
use crate::model::{forward, ImageBatch, ModelParams};
use crate::tensor::{Matrix, Real};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per non-IGNORE ground-truth pixel.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let n = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= n || p >= n {
                return Err(Error::shape(format!("class index out of range ({g}, {p})")));
            }
            self.counts[g * n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("confusion matrices differ in class count"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU (`None` where TP+FP+FN = 0) and the mean over the
    /// defined classes.
    pub fn miou(&self) -> Result<(Vec<Option<f64>>, f64)> {
        if self.total() == 0 {
            return Err(Error::UndefinedMetric("empty confusion matrix".into()));
        }
        let n = self.num_classes;
        let mut ious = Vec::with_capacity(n);
        for c in 0..n {
            let tp = self.get(c, c);
            let fn_: u64 = (0..n).map(|p| self.get(c, p)).sum::<u64>() - tp;
            let fp: u64 = (0..n).map(|g| self.get(g, c)).sum::<u64>() - tp;
            let denom = tp + fp + fn_;
            ious.push((denom > 0).then(|| tp as f64 / denom as f64));
        }
        let defined: Vec<f64> = ious.iter().flatten().copied().collect();
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        Ok((ious, mean))
    }

    /// Tabular text report: one line per class then the mean.
    pub fn report(&self) -> Result<String> {
        let (ious, mean) = self.miou()?;
        let mut s = String::from("class\tiou\tgt_pixels\tpred_pixels\n");
        let n = self.num_classes;
        for (c, iou) in ious.iter().enumerate() {
            let gt: u64 = (0..n).map(|p| self.get(c, p)).sum();
            let pr: u64 = (0..n).map(|g| self.get(g, c)).sum();
            let iou = iou.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "{c}\t{iou}\t{gt}\t{pr}");
        }
        let _ = writeln!(s, "mean\t{mean:.6}\t{}\t{}", self.total(), self.total());
        Ok(s)
    }
}

/// Fraction of non-IGNORE pixels where the pseudo-label equals the hidden
/// ground truth. Returns 0 when there is no valid pixel.
pub fn pseudo_label_quality(pseudo: &[u8], gt: &[u8]) -> f64 {
    let mut valid = 0usize;
    let mut hit = 0usize;
    for (&p, &g) in pseudo.iter().zip(gt) {
        if g != IGNORE {
            valid += 1;
            hit += (p == g) as usize;
        }
    }
    if valid == 0 {
        0.0
    } else {
        hit as f64 / valid as f64
    }
}

/// Argmax with lowest-index tie breaking.
pub fn argmax_rows<F: Real>(m: &Matrix<F>) -> Vec<u8> {
    (0..m.rows())
        .map(|i| {
            let r = m.row(i);
            let mut best = 0;
            for k in 1..r.len() {
                if r[k] > r[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// Which network produces evaluation predictions.
#[derive(Clone, Copy, Debug)]
pub enum EvalNetwork<'a, F> {
    Single(&'a ModelParams<F>),
    /// Probabilities averaged over the members before argmax.
    Ensemble(&'a [&'a ModelParams<F>]),
}

/// Full-resolution predictions for each sample (bilinear probability
/// upsampling then argmax).
pub fn predict<F: Real>(net: EvalNetwork<'_, F>, samples: &[&Sample], batch: usize) -> Result<Vec<Vec<u8>>> {
    let members: Vec<&ModelParams<F>> = match net {
        EvalNetwork::Single(p) => vec![p],
        EvalNetwork::Ensemble(ps) => ps.to_vec(),
    };
    if members.is_empty() {
        return Err(Error::config("network", "ensemble needs at least one member"));
    }
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let images = ImageBatch::from_samples(chunk.iter().copied())?;
        let outs = members
            .iter()
            .map(|p| forward(p, &images))
            .collect::<Result<Vec<_>>>()?;
        for (i, s) in chunk.iter().enumerate() {
            let mut acc = outs[0].upsampled_probs(i, s.height, s.width);
            for o in &outs[1..] {
                acc.add_assign(&o.upsampled_probs(i, s.height, s.width));
            }
            preds.push(argmax_rows(&acc));
        }
    }
    Ok(preds)
}

pub fn evaluate<F: Real>(
    net: EvalNetwork<'_, F>,
    samples: &[&Sample],
    num_classes: usize,
    batch: usize,
) -> Result<ConfusionMatrix> {
    let preds = predict(net, samples, batch)?;
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, s) in preds.iter().zip(samples) {
        cm.accumulate(p, &s.label)?;
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Labeled,
    Unlabeled,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Labeled => "labeled",
            Origin::Unlabeled => "unlabeled",
        }
    }
}

/// One exported feature row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub class: u8,
    pub origin: Origin,
    pub values: Vec<f32>,
}

/// Collects up to `per_class_cap` feature vectors per (class, origin).
/// Labeled pixels are tagged with their (downsampled) ground truth,
/// unlabeled pixels with the network's own argmax. Pixels are visited in
/// sample then raster order, so the output is deterministic.
pub fn export_features<F: Real>(
    params: &ModelParams<F>,
    samples: &[(&Sample, Origin)],
    per_class_cap: usize,
) -> Result<Vec<FeatureRow>> {
    let nc = params.config().num_classes;
    let stride = params.config().stride;
    let mut counts = vec![[0usize; 2]; nc];
    let mut rows = Vec::new();
    for (s, origin) in samples {
        let images = ImageBatch::from_samples(std::iter::once(*s))?;
        let out = forward(params, &images)?;
        let gt = crate::data::downsample_nearest(&s.label, s.height, s.width, stride);
        let oi = (*origin == Origin::Unlabeled) as usize;
        for i in 0..out.pixels() {
            let class = match origin {
                Origin::Labeled => gt[i],
                Origin::Unlabeled => out.hard_labels[i],
            };
            if class == IGNORE || class as usize >= nc {
                continue;
            }
            let slot = &mut counts[class as usize][oi];
            if *slot >= per_class_cap {
                continue;
            }
            *slot += 1;
            rows.push(FeatureRow {
                class,
                origin: *origin,
                values: out
                    .features
                    .row(i)
                    .iter()
                    .map(|v| v.to_f64_lossy() as f32)
                    .collect(),
            });
        }
    }
    Ok(rows)
}

/// Header `class\torigin\tf0..f{d-1}` then one tab-separated row per feature.
pub fn write_feature_dump(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.values.len());
    let mut s = String::from("class\torigin");
    for k in 0..d {
        let _ = write!(s, "\tf{k}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{}\t{}", r.class, r.origin.as_str());
        for v in &r.values {
            let _ = write!(s, "\t{v:e}");
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
