//! Epoch training: pair sampling, correspondence loss, backprop, Adam.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{adam_step, backward_cached, forward_cached, AdamState, HeadParams};
use crate::correspondence::{
    correlation_loss, knn_table, normalized_rows, pooled_descriptor, sample_pairs,
    spatial_center, CorrTensor, LossTerms, PairKind, PairSample,
};
use crate::error::{Error, Result};
use crate::feature_io::FeatureMap;
use crate::scalar::Scalar;

/// Pairs of each kind in one batch. Their sum must equal the batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairMix {
    #[serde(rename = "self")]
    pub self_pairs: usize,
    pub knn: usize,
    pub random: usize,
}

impl PairMix {
    pub fn total(&self) -> usize {
        self.self_pairs + self.knn + self.random
    }

    pub fn count(&self, kind: PairKind) -> usize {
        match kind {
            PairKind::SelfPair => self.self_pairs,
            PairKind::Knn => self.knn,
            PairKind::Random => self.random,
        }
    }
}

impl Default for PairMix {
    fn default() -> Self {
        Self {
            self_pairs: 6,
            knn: 5,
            random: 5,
        }
    }
}

/// Optimisation settings. A batch is a set of `batch_size` image pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss_terms: LossTerms,
    pub knn_k: usize,
    pub pair_mix: PairMix,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Spatially centre the frozen-feature correspondence before the loss.
    pub centering: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 10,
            loss_terms: LossTerms::default(),
            knn_k: 7,
            pair_mix: PairMix::default(),
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            centering: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Parameter("batch_size and epochs must be at least 1".into()));
        }
        if self.pair_mix.total() != self.batch_size {
            return Err(Error::Parameter(format!(
                "pair_mix sums to {}, batch_size is {}",
                self.pair_mix.total(),
                self.batch_size
            )));
        }
        if self.knn_k == 0 {
            return Err(Error::Parameter("knn_k must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Parameter("Adam betas must lie in [0, 1)".into()));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Parameter("Adam eps must be positive".into()));
        }
        self.loss_terms.validate()
    }
}

/// Mean unweighted loss and pair count for one pair kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindLoss {
    pub pairs: usize,
    /// `None` when no pair of this kind was drawn.
    pub mean_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub batches: usize,
    #[serde(rename = "self")]
    pub self_pairs: KindLoss,
    pub knn: KindLoss,
    pub random: KindLoss,
    /// Mean over all pairs of the weighted loss `λ_kind · L`.
    pub total: f64,
}

/// Loss and head gradient for one pair, given its frozen-feature correspondence.
fn pair_objective<T: Scalar>(
    p: &HeadParams<T>,
    left: &FeatureMap<T>,
    right: Option<&FeatureMap<T>>,
    f_corr: &CorrTensor<T>,
    bias: T,
) -> Result<(T, HeadParams<T>)> {
    let (codes_l, z_l) = forward_cached(left.as_matrix(), p);
    let codes_l = FeatureMap::from_matrix(left.hp(), left.wp(), codes_l)
        .map_err(|_| Error::Numeric("head produced non-finite codes".into()))?;
    let (unit_l, norms_l) = normalized_rows(&codes_l)?;

    let right_state = match right {
        Some(r) => {
            let (codes_r, z_r) = forward_cached(r.as_matrix(), p);
            let codes_r = FeatureMap::from_matrix(r.hp(), r.wp(), codes_r)
                .map_err(|_| Error::Numeric("head produced non-finite codes".into()))?;
            let (unit_r, norms_r) = normalized_rows(&codes_r)?;
            Some((z_r, unit_r, norms_r))
        }
        None => None,
    };
    let unit_r = right_state.as_ref().map_or(&unit_l, |s| &s.1);

    let s_corr = CorrTensor::new(f_corr.dims(), unit_l.dot(&unit_r.t()).into_raw_vec_and_offset().0)?;
    let (loss, grad_s) = correlation_loss(f_corr, &s_corr, bias)?;
    let grad_s = grad_s.as_matrix();

    // d/d(unit codes), then through the normalisation x -> x/|x|.
    let grad_unit_l = grad_s.dot(unit_r);
    let grad_unit_r = grad_s.t().dot(&unit_l);
    let through_norm = |unit: &Array2<T>, norms: &[T], grad_unit: Array2<T>| -> Array2<T> {
        let mut out = grad_unit;
        for ((mut g, u), &n) in out.axis_iter_mut(Axis(0)).zip(unit.axis_iter(Axis(0))).zip(norms) {
            let radial = g.iter().zip(u.iter()).map(|(&a, &b)| a * b).sum::<T>();
            g.zip_mut_with(&u, |gv, &uv| *gv = (*gv - radial * uv) / n);
        }
        out
    };

    let grads = match right_state {
        None => {
            let g = through_norm(&unit_l, &norms_l, grad_unit_l + grad_unit_r);
            backward_cached(left.as_matrix(), &z_l, p, g.view())
        }
        Some((z_r, unit_r, norms_r)) => {
            let gl = through_norm(&unit_l, &norms_l, grad_unit_l);
            let gr = through_norm(&unit_r, &norms_r, grad_unit_r);
            let r = right.expect("right state implies right map");
            let mut grads = backward_cached(left.as_matrix(), &z_l, p, gl.view());
            grads.add_scaled(&backward_cached(r.as_matrix(), &z_r, p, gr.view()), T::one());
            grads
        }
    };
    Ok((loss, grads))
}

/// Correspondence loss of one image pair and its gradient with respect to
/// every head parameter. `right = None` pairs `left` with itself.
///
/// The frozen-feature correspondence is treated as a constant: no gradient
/// reaches the features.
pub fn pair_loss_and_grad<T: Scalar>(
    p: &HeadParams<T>,
    left: &FeatureMap<T>,
    right: Option<&FeatureMap<T>>,
    bias: T,
    centering: bool,
) -> Result<(T, HeadParams<T>)> {
    if left.channels() != p.c() || right.is_some_and(|r| r.channels() != p.c()) {
        return Err(Error::Shape("feature channels do not match the head".into()));
    }
    let f_corr = crate::correspondence::cosine_correspondence(left, right.unwrap_or(left))?;
    let f_corr = if centering { spatial_center(&f_corr) } else { f_corr };
    pair_objective(p, left, right, &f_corr, bias)
}

fn epoch_rng(seed: u64, epoch_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch_index as u64 + 1);
    rng
}

/// One pass over the dataset: `ceil(n / batch_size)` batches, each holding
/// `pair_mix` pairs of every kind, one Adam step per batch.
///
/// Pair gradients are computed in parallel and reduced in pair order, so the
/// result depends only on the inputs, `cfg.seed` and `epoch_index`.
pub fn train_epoch(
    features: &[FeatureMap],
    p: HeadParams,
    s: AdamState,
    cfg: &TrainConfig,
    epoch_index: usize,
) -> Result<(HeadParams, AdamState, EpochMetrics)> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(Error::Parameter("training dataset is empty".into()));
    }
    p.validate()?;
    if let Some(bad) = features.iter().position(|f| f.channels() != p.c()) {
        return Err(Error::Shape(format!(
            "feature map {bad} has {} channels, head expects {}",
            features[bad].channels(),
            p.c()
        )));
    }
    let n = features.len();
    let mix = cfg.pair_mix;
    let n_batches = n.div_ceil(cfg.batch_size);
    let mut rng = epoch_rng(cfg.seed, epoch_index);

    let table = if mix.knn > 0 {
        if n < 2 {
            return Err(Error::Parameter("knn pairs need at least 2 images".into()));
        }
        let pooled = features
            .iter()
            .map(pooled_descriptor)
            .collect::<Result<Vec<_>>>()?;
        Some(knn_table(&pooled, cfg.knn_k.min(n - 1))?)
    } else {
        None
    };
    let mut lists = Vec::with_capacity(3);
    for kind in PairKind::ALL {
        let count = mix.count(kind) * n_batches;
        lists.push(if count == 0 {
            Vec::new()
        } else {
            sample_pairs(n, kind, &mut rng, count, table.as_deref())?
        });
    }

    // Unit-normalised frozen features, reused by every pair.
    let unit_features: Vec<Array2<f32>> = features
        .iter()
        .map(|f| normalized_rows(f).map(|(u, _)| u))
        .collect::<Result<_>>()?;

    let mut params = p;
    let mut state = s;
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    let mut total = 0.0f64;

    for b in 0..n_batches {
        let batch: Vec<PairSample> = PairKind::ALL
            .iter()
            .enumerate()
            .flat_map(|(k, &kind)| {
                let per = mix.count(kind);
                lists[k][b * per..(b + 1) * per].iter().copied()
            })
            .collect();

        let results: Vec<Result<(f32, HeadParams)>> = batch
            .par_iter()
            .map(|pair| {
                let left = &features[pair.left];
                let right = (pair.kind != PairKind::SelfPair).then(|| &features[pair.right]);
                let fu = &unit_features[pair.left];
                let gu = &unit_features[pair.right];
                let corr = CorrTensor::new(
                    [left.hp(), left.wp(), features[pair.right].hp(), features[pair.right].wp()],
                    fu.dot(&gu.t()).into_raw_vec_and_offset().0,
                )?;
                let corr = if cfg.centering { spatial_center(&corr) } else { corr };
                let bias = cfg.loss_terms.bias(pair.kind) as f32;
                pair_objective(&params, left, right, &corr, bias)
            })
            .collect();

        let mut grad = params.zeros_like();
        let scale = 1.0 / batch.len() as f64;
        for (pair, result) in batch.iter().zip(results) {
            let (loss, g) = result?;
            let loss = loss as f64;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss on {} pair ({}, {}) in epoch {epoch_index}, batch {b}",
                    pair.kind.name(),
                    pair.left,
                    pair.right
                )));
            }
            let weight = cfg.loss_terms.weight(pair.kind);
            let k = pair.kind as usize;
            sums[k] += loss;
            counts[k] += 1;
            total += weight * loss;
            grad.add_scaled(&g, (weight * scale) as f32);
        }
        (params, state) = adam_step(params, &grad, state, cfg)?;
    }

    let n_pairs: usize = counts.iter().sum();
    let kind_loss = |k: usize| KindLoss {
        pairs: counts[k],
        mean_loss: (counts[k] > 0).then(|| sums[k] / counts[k] as f64),
    };
    let metrics = EpochMetrics {
        epoch: epoch_index,
        batches: n_batches,
        self_pairs: kind_loss(0),
        knn: kind_loss(1),
        random: kind_loss(2),
        total: total / n_pairs as f64,
    };
    Ok((params, state, metrics))
}

/// Runs `cfg.epochs` epochs from fresh optimizer state.
pub fn train(
    features: &[FeatureMap],
    p: HeadParams,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(HeadParams, Vec<EpochMetrics>)> {
    let mut state = AdamState::new(&p);
    let mut params = p;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (next, next_state, metrics) = train_epoch(features, params, state, cfg, epoch)?;
        params = next;
        state = next_state;
        on_epoch(&metrics);
        history.push(metrics);
    }
    Ok((params, history))
}
