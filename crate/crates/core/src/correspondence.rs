//! Cosine correspondence volumes between dense maps, the clamped
//! correlation distillation loss, and training-pair sampling.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_io::FeatureMap;
use crate::scalar::Scalar;

/// Vectors shorter than this cannot be normalised.
pub const MIN_NORM: f64 = 1e-12;

/// Pairwise correspondence volume indexed `(h, w, i, j)`: source cell
/// `(h, w)` against target cell `(i, j)`.
///
/// Stored row-major, so it is also a `(hp·wp) × (hq·wq)` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrTensor<T = f32> {
    hp: usize,
    wp: usize,
    hq: usize,
    wq: usize,
    data: Vec<T>,
}

impl<T: Scalar> CorrTensor<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let [hp, wp, hq, wq] = dims;
        if dims.contains(&0) {
            return Err(Error::Shape(format!("correspondence dims must be positive, got {dims:?}")));
        }
        if data.len() != hp * wp * hq * wq {
            return Err(Error::Shape(format!(
                "correspondence {dims:?} needs {} entries, got {}",
                hp * wp * hq * wq,
                data.len()
            )));
        }
        Ok(Self { hp, wp, hq, wq, data })
    }

    fn from_matrix(dims: [usize; 4], m: Array2<T>) -> Self {
        let data = if m.is_standard_layout() {
            m.into_raw_vec_and_offset().0
        } else {
            m.iter().copied().collect()
        };
        let [hp, wp, hq, wq] = dims;
        Self { hp, wp, hq, wq, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.hp, self.wp, self.hq, self.wq]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn source_cells(&self) -> usize {
        self.hp * self.wp
    }

    pub fn target_cells(&self) -> usize {
        self.hq * self.wq
    }

    pub fn get(&self, h: usize, w: usize, i: usize, j: usize) -> T {
        self.data[(h * self.wp + w) * self.target_cells() + i * self.wq + j]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn as_matrix(&self) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((self.source_cells(), self.target_cells()), &self.data)
            .expect("length checked at construction")
    }
}

/// Rows of `m` scaled to unit length, plus the original norms.
pub(crate) fn normalized_rows<T: Scalar>(m: &FeatureMap<T>) -> Result<(Array2<T>, Vec<T>)> {
    let mut rows = m.as_matrix().to_owned();
    let mut norms = Vec::with_capacity(rows.nrows());
    for (idx, mut row) in rows.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm.to_f64_lossy() < MIN_NORM {
            return Err(Error::Degenerate(format!(
                "zero-norm vector at cell ({}, {})",
                idx / m.wp(),
                idx % m.wp()
            )));
        }
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    Ok((rows, norms))
}

/// `out[h,w,i,j] = cos(f[h,w], g[i,j])`.
pub fn cosine_correspondence<T: Scalar>(
    f: &FeatureMap<T>,
    g: &FeatureMap<T>,
) -> Result<CorrTensor<T>> {
    if f.channels() != g.channels() {
        return Err(Error::Shape(format!(
            "channel mismatch: {} vs {}",
            f.channels(),
            g.channels()
        )));
    }
    let (fu, _) = normalized_rows(f)?;
    let (gu, _) = normalized_rows(g)?;
    Ok(CorrTensor::from_matrix(
        [f.hp(), f.wp(), g.hp(), g.wp()],
        fu.dot(&gu.t()),
    ))
}

/// Subtracts from every source slice `t[h,w,·,·]` its mean over targets.
pub fn spatial_center<T: Scalar>(t: &CorrTensor<T>) -> CorrTensor<T> {
    let mut out = t.clone();
    let n = t.target_cells();
    for row in out.data.chunks_exact_mut(n) {
        let mean = row.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n as f64;
        let mean = T::from_f64_lossy(mean);
        row.iter_mut().for_each(|v| *v -= mean);
    }
    out
}

/// Clamped correlation distillation loss
/// `-(1/N) Σ (f_corr − b) · max(s_corr, 0)` and its gradient with respect
/// to `s_corr`. The subgradient at `s_corr = 0` is taken as zero.
pub fn correlation_loss<T: Scalar>(
    f_corr: &CorrTensor<T>,
    s_corr: &CorrTensor<T>,
    b: T,
) -> Result<(T, CorrTensor<T>)> {
    if f_corr.dims() != s_corr.dims() {
        return Err(Error::Shape(format!(
            "correspondence dims differ: {:?} vs {:?}",
            f_corr.dims(),
            s_corr.dims()
        )));
    }
    let n = f_corr.len() as f64;
    let scale = T::from_f64_lossy(-1.0 / n);
    let mut acc = 0.0f64;
    let mut grad = Vec::with_capacity(f_corr.len());
    for (&fv, &sv) in f_corr.data.iter().zip(&s_corr.data) {
        let weight = fv - b;
        if sv > T::zero() {
            acc += (weight * sv).to_f64_lossy();
            grad.push(scale * weight);
        } else {
            grad.push(T::zero());
        }
    }
    let grad = CorrTensor {
        hp: s_corr.hp,
        wp: s_corr.wp,
        hq: s_corr.hq,
        wq: s_corr.wq,
        data: grad,
    };
    Ok((T::from_f64_lossy(-acc / n), grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    /// An image paired with itself.
    #[serde(rename = "self")]
    SelfPair,
    /// An image paired with one of its nearest neighbours by pooled feature.
    Knn,
    /// An image paired with a uniformly drawn other image.
    Random,
}

impl PairKind {
    pub const ALL: [PairKind; 3] = [PairKind::SelfPair, PairKind::Knn, PairKind::Random];

    pub fn name(self) -> &'static str {
        match self {
            PairKind::SelfPair => "self",
            PairKind::Knn => "knn",
            PairKind::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairSample {
    pub left: usize,
    pub right: usize,
    pub kind: PairKind,
}

impl PairSample {
    pub fn new(left: usize, right: usize, kind: PairKind) -> Result<Self> {
        let ok = match kind {
            PairKind::SelfPair => left == right,
            PairKind::Knn | PairKind::Random => left != right,
        };
        if !ok {
            return Err(Error::Invariant(format!(
                "{} pair ({left}, {right}) violates its kind",
                kind.name()
            )));
        }
        Ok(Self { left, right, kind })
    }
}

/// Per-kind loss weights and biases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossTerms {
    pub lambda_self: f64,
    pub lambda_knn: f64,
    pub lambda_rand: f64,
    pub b_self: f64,
    pub b_knn: f64,
    pub b_rand: f64,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            lambda_self: 1.0,
            lambda_knn: 1.0,
            lambda_rand: 1.0,
            b_self: 0.30,
            b_knn: 0.30,
            b_rand: 0.60,
        }
    }
}

impl LossTerms {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_self, self.lambda_knn, self.lambda_rand];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Parameter(format!(
                "loss weights must be finite and nonnegative, got {weights:?}"
            )));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::Parameter("all loss weights are zero".into()));
        }
        if [self.b_self, self.b_knn, self.b_rand].iter().any(|b| !b.is_finite()) {
            return Err(Error::Parameter("loss biases must be finite".into()));
        }
        Ok(())
    }

    pub fn weight(&self, kind: PairKind) -> f64 {
        match kind {
            PairKind::SelfPair => self.lambda_self,
            PairKind::Knn => self.lambda_knn,
            PairKind::Random => self.lambda_rand,
        }
    }

    pub fn bias(&self, kind: PairKind) -> f64 {
        match kind {
            PairKind::SelfPair => self.b_self,
            PairKind::Knn => self.b_knn,
            PairKind::Random => self.b_rand,
        }
    }
}

/// Global mean of a feature map, L2-normalised: the descriptor used for
/// nearest-neighbour pairing.
pub fn pooled_descriptor<T: Scalar>(fm: &FeatureMap<T>) -> Result<Vec<f64>> {
    let mut mean = fm.mean_vector();
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < MIN_NORM {
        return Err(Error::Degenerate("pooled feature vector has zero norm".into()));
    }
    mean.iter_mut().for_each(|v| *v /= norm);
    Ok(mean)
}

/// For every image, the indices of its `k` most cosine-similar other images,
/// most similar first; ties go to the lower index.
pub fn knn_table(pooled: &[Vec<f64>], k: usize) -> Result<Vec<Vec<usize>>> {
    let n = pooled.len();
    if n < 2 {
        return Err(Error::Parameter(format!(
            "nearest-neighbour pairing needs at least 2 images, got {n}"
        )));
    }
    if k == 0 || k >= n {
        return Err(Error::Parameter(format!(
            "neighbour count must be in 1..{n}, got {k}"
        )));
    }
    let unit: Vec<Vec<f64>> = pooled
        .iter()
        .map(|v| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < MIN_NORM {
                Err(Error::Degenerate("pooled vector has zero norm".into()))
            } else {
                Ok(v.iter().map(|x| x / norm).collect())
            }
        })
        .collect::<Result<_>>()?;
    Ok((0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum(), j))
                .collect();
            others.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect())
}

/// Every `(image, neighbour)` pair of the k-NN table, image-major.
pub fn knn_pairs(pooled: &[Vec<f64>], k: usize) -> Result<Vec<PairSample>> {
    let table = knn_table(pooled, k)?;
    Ok(table
        .iter()
        .enumerate()
        .flat_map(|(i, row)| {
            row.iter().map(move |&j| PairSample {
                left: i,
                right: j,
                kind: PairKind::Knn,
            })
        })
        .collect())
}

/// Draws `count` pairs of the given kind.
///
/// Self pairs walk through successive random permutations of the images, so
/// `count = n_images` yields each image exactly once. Knn pairs are uniform
/// draws from the flattened neighbour table; random pairs are uniform over
/// ordered pairs with distinct members.
pub fn sample_pairs<R: Rng + ?Sized>(
    n_images: usize,
    kind: PairKind,
    rng: &mut R,
    count: usize,
    knn_table: Option<&[Vec<usize>]>,
) -> Result<Vec<PairSample>> {
    if n_images == 0 {
        return Err(Error::Parameter("no images to pair".into()));
    }
    if kind != PairKind::SelfPair && n_images < 2 {
        return Err(Error::Parameter(format!(
            "{} pairs need at least 2 images",
            kind.name()
        )));
    }
    let mut out = Vec::with_capacity(count);
    match kind {
        PairKind::SelfPair => {
            let mut order: Vec<usize> = (0..n_images).collect();
            while out.len() < count {
                order.shuffle(rng);
                out.extend(
                    order
                        .iter()
                        .take(count - out.len())
                        .map(|&i| PairSample { left: i, right: i, kind }),
                );
            }
        }
        PairKind::Knn => {
            let table = knn_table
                .ok_or_else(|| Error::Parameter("knn pairs require a neighbour table".into()))?;
            if table.len() != n_images {
                return Err(Error::Parameter(format!(
                    "neighbour table has {} rows for {n_images} images",
                    table.len()
                )));
            }
            let flat: Vec<(usize, usize)> = table
                .iter()
                .enumerate()
                .flat_map(|(i, row)| row.iter().map(move |&j| (i, j)))
                .collect();
            if let Some(&(i, j)) = flat.iter().find(|(i, j)| i == j || *j >= n_images) {
                return Err(Error::Parameter(format!("invalid neighbour entry ({i}, {j})")));
            }
            if flat.is_empty() {
                return Err(Error::Parameter("neighbour table is empty".into()));
            }
            for _ in 0..count {
                let (left, right) = flat[rng.random_range(0..flat.len())];
                out.push(PairSample { left, right, kind });
            }
        }
        PairKind::Random => {
            for _ in 0..count {
                let left = rng.random_range(0..n_images);
                let mut right = rng.random_range(0..n_images - 1);
                if right >= left {
                    right += 1;
                }
                out.push(PairSample { left, right, kind });
            }
        }
    }
    Ok(out)
}
