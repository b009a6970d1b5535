//! Unsupervised labelling of code maps and scoring against ground truth.
//!
//! Codes are clustered with spherical (cosine) k-means, every patch takes
//! its most similar centroid, and predicted clusters are matched to
//! ground-truth classes by maximising agreed pixels before computing pixel
//! accuracy and IoU.

mod hungarian;
mod kmeans;
mod metrics;

pub use hungarian::{greedy_match, hungarian_match};
pub use kmeans::{
    assign_clusters, kmeans_cosine, kmeans_cosine_fit, kmeans_cosine_restarts, Centroids,
    KMeansFit,
};
pub use metrics::{accumulate_confusion, evaluate, ConfusionMatrix, EvalReport};

use crate::error::Result;
use crate::label::LabelMask;

/// Nearest-neighbour upsampling of a patch-resolution mask to image size.
pub fn upsample_mask(mask: &LabelMask, out_h: usize, out_w: usize) -> Result<LabelMask> {
    mask.resize_nearest(out_h, out_w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_upsamples_to_constant() {
        let m = LabelMask::new(1, 1, vec![3]).unwrap();
        let up = upsample_mask(&m, 4, 4).unwrap();
        assert_eq!(up.labels(), &[3; 16]);
    }
}
