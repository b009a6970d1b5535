//! Per-pixel class-id rasters shared by ground truth and predictions.

use crate::error::{Error, Result};

/// A row-major raster of class ids.
///
/// `ignore_id`, when set, marks pixels excluded from evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    h: usize,
    w: usize,
    labels: Vec<u8>,
    ignore_id: Option<u8>,
}

impl LabelMask {
    pub fn new(h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Parameter(format!(
                "label mask dims must be positive, got {h}x{w}"
            )));
        }
        if labels.len() != h * w {
            return Err(Error::Shape(format!(
                "label mask {h}x{w} needs {} labels, got {}",
                h * w,
                labels.len()
            )));
        }
        Ok(Self {
            h,
            w,
            labels,
            ignore_id: None,
        })
    }

    pub fn filled(h: usize, w: usize, label: u8) -> Result<Self> {
        Self::new(h, w, vec![label; h * w])
    }

    pub fn with_ignore_id(mut self, ignore_id: Option<u8>) -> Self {
        self.ignore_id = ignore_id;
        self
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn ignore_id(&self) -> Option<u8> {
        self.ignore_id
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.w + col]
    }

    /// Pixel counts per class id in `0..k`; ids `>= k` are not counted.
    pub fn histogram(&self, k: usize) -> Vec<u64> {
        let mut counts = vec![0u64; k];
        for &l in &self.labels {
            if (l as usize) < k {
                counts[l as usize] += 1;
            }
        }
        counts
    }

    /// Nearest-neighbour resampling with half-pixel centres. Class ids are
    /// copied, never blended, and `ignore_id` is carried over.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Parameter(format!(
                "target dims must be positive, got {out_h}x{out_w}"
            )));
        }
        let rows: Vec<usize> = (0..out_h)
            .map(|y| nearest_source(y, self.h, out_h))
            .collect();
        let cols: Vec<usize> = (0..out_w)
            .map(|x| nearest_source(x, self.w, out_w))
            .collect();
        let mut labels = Vec::with_capacity(out_h * out_w);
        for &sy in &rows {
            let src = &self.labels[sy * self.w..(sy + 1) * self.w];
            labels.extend(cols.iter().map(|&sx| src[sx]));
        }
        Ok(Self {
            h: out_h,
            w: out_w,
            labels,
            ignore_id: self.ignore_id,
        })
    }
}

/// Source index for output index `dst` under the half-pixel-centre mapping
/// `src = floor((dst + 0.5) * in / out)`, evaluated in integers.
pub(crate) fn nearest_source(dst: usize, in_len: usize, out_len: usize) -> usize {
    (((2 * dst + 1) * in_len) / (2 * out_len)).min(in_len - 1)
}
