//! Self-supervised land-cover segmentation by feature-correspondence distillation.
//!
//! Dense patch features from a frozen backbone are read from `.fmap` files,
//! a small projection head is trained so that cosine correspondences among
//! its codes mirror those among the frozen features, and the codes are then
//! clustered with cosine k-means and scored against ground-truth masks under
//! Hungarian matching.
//!
//! Module map:
//!
//! * [`feature_io`]: `.fmap` interchange format and the synthetic scene generator.
//! * [`correspondence`]: correspondence tensors, centering, distillation loss, pair sampling.
//! * [`seg_head`]: projection head, its backward pass, Adam and the epoch loop.
//! * [`cluster_probe`]: cosine k-means, cluster assignment, confusion, matching, metrics.
//! * [`dataset`]: raster tiles, resizing, palettes and split manifests.

pub mod cluster_probe;
pub mod correspondence;
pub mod dataset;
pub mod error;
pub mod feature_io;
pub mod fsutil;
pub mod label;
pub mod scalar;
pub mod seg_head;

pub use error::{Error, Result};
pub use feature_io::{CodeMap, FeatureMap};
pub use label::LabelMask;
pub use scalar::Scalar;
