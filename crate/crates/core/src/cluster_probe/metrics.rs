use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelMask;

/// Pixel counts indexed `[predicted cluster][ground-truth class]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k_pred: usize,
    k_gt: usize,
    counts: Vec<u64>,
    /// Ground-truth class that is excluded from counting (its column stays
    /// empty) and whose IoU is reported as undefined.
    ignored_class: Option<usize>,
}

impl ConfusionMatrix {
    pub fn new(k_pred: usize, k_gt: usize) -> Self {
        Self {
            k_pred,
            k_gt,
            counts: vec![0; k_pred * k_gt],
            ignored_class: None,
        }
    }

    pub fn from_counts(k_pred: usize, k_gt: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k_pred * k_gt {
            return Err(Error::Shape(format!(
                "{k_pred}x{k_gt} confusion needs {} counts, got {}",
                k_pred * k_gt,
                counts.len()
            )));
        }
        Ok(Self {
            k_pred,
            k_gt,
            counts,
            ignored_class: None,
        })
    }

    pub fn k_pred(&self) -> usize {
        self.k_pred
    }

    pub fn k_gt(&self) -> usize {
        self.k_gt
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn ignored_class(&self) -> Option<usize> {
        self.ignored_class
    }

    pub fn get(&self, pred: usize, gt: usize) -> u64 {
        self.counts[pred * self.k_gt + gt]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k_gt.max(1)).map(|r| r.to_vec()).collect()
    }

    /// Counts one prediction/ground-truth pair into the matrix. Pixels whose
    /// ground truth equals `ignore_id` are skipped.
    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask, ignore_id: Option<u8>) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::Shape(format!(
                "prediction is {:?}, ground truth {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        if let Some(id) = ignore_id {
            if (id as usize) < self.k_gt {
                self.ignored_class = Some(id as usize);
            }
        }
        for (idx, (&p, &g)) in pred.labels().iter().zip(gt.labels()).enumerate() {
            if Some(g) == ignore_id {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.k_pred || g >= self.k_gt {
                return Err(Error::Data(format!(
                    "label out of range at pixel ({}, {}): pred {p} (k={}), gt {g} (k={})",
                    idx / gt.width(),
                    idx % gt.width(),
                    self.k_pred,
                    self.k_gt
                )));
            }
            self.counts[p * self.k_gt + g] += 1;
        }
        Ok(())
    }

    /// Element-wise sum; confusion over a dataset is the sum over its images.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if (self.k_pred, self.k_gt) != (other.k_pred, other.k_gt) {
            return Err(Error::Shape("confusion matrices differ in size".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.ignored_class = self.ignored_class.or(other.ignored_class);
        Ok(())
    }

    /// Zero-padded to `max(k_pred, k_gt)` square.
    pub fn pad_square(&self) -> ConfusionMatrix {
        let n = self.k_pred.max(self.k_gt);
        let mut out = ConfusionMatrix::new(n, n);
        for p in 0..self.k_pred {
            for g in 0..self.k_gt {
                out.counts[p * n + g] = self.get(p, g);
            }
        }
        out.ignored_class = self.ignored_class;
        out
    }
}

pub fn accumulate_confusion(
    pred: &LabelMask,
    gt: &LabelMask,
    k_pred: usize,
    k_gt: usize,
    ignore_id: Option<u8>,
) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new(k_pred, k_gt);
    m.accumulate(pred, gt, ignore_id)?;
    Ok(m)
}

/// Scores under a cluster → class matching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pixel_accuracy: f64,
    pub miou: f64,
    /// `None` where a class has empty union or is the ignored class.
    pub per_class_iou: Vec<Option<f64>>,
    /// Ground-truth class per predicted cluster; `None` for unmatched clusters.
    pub matching: Vec<Option<usize>>,
    pub confusion: Vec<Vec<u64>>,
    pub n_pixels: u64,
}

/// Pixel accuracy and IoU of `confusion` when cluster `p` is read as class
/// `matching[p]`.
pub fn evaluate(confusion: &ConfusionMatrix, matching: &[Option<usize>]) -> Result<EvalReport> {
    if matching.len() != confusion.k_pred() {
        return Err(Error::Parameter(format!(
            "matching covers {} clusters, confusion has {}",
            matching.len(),
            confusion.k_pred()
        )));
    }
    if let Some(bad) = matching.iter().flatten().find(|&&g| g >= confusion.k_gt()) {
        return Err(Error::Parameter(format!("matching targets class {bad} outside 0..{}", confusion.k_gt())));
    }
    let total = confusion.total();
    if total == 0 {
        return Err(Error::UndefinedMetrics);
    }
    let k_gt = confusion.k_gt();
    let mut tp = vec![0u64; k_gt];
    let mut predicted_as = vec![0u64; k_gt];
    let mut gt_count = vec![0u64; k_gt];
    for (p, target) in matching.iter().enumerate() {
        for g in 0..k_gt {
            let c = confusion.get(p, g);
            gt_count[g] += c;
            if let Some(t) = *target {
                predicted_as[t] += c;
                if t == g {
                    tp[g] += c;
                }
            }
        }
    }
    let correct: u64 = tp.iter().sum();
    let per_class_iou: Vec<Option<f64>> = (0..k_gt)
        .map(|g| {
            if confusion.ignored_class() == Some(g) {
                return None;
            }
            let fp = predicted_as[g] - tp[g];
            let fn_ = gt_count[g] - tp[g];
            let union = tp[g] + fp + fn_;
            (union > 0).then(|| tp[g] as f64 / union as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(EvalReport {
        pixel_accuracy: correct as f64 / total as f64,
        miou,
        per_class_iou,
        matching: matching.to_vec(),
        confusion: confusion.rows(),
        n_pixels: total,
    })
}
