use std::collections::HashSet;

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correspondence::MIN_NORM;
use crate::error::{Error, Result};
use crate::feature_io::CodeMap;
use crate::label::LabelMask;

/// `k` unit-norm centroids of dimension `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroids {
    pub k: usize,
    pub d: usize,
    pub vectors: Vec<Vec<f32>>,
}

impl Centroids {
    pub fn new(vectors: Vec<Vec<f32>>) -> Result<Self> {
        let k = vectors.len();
        if k == 0 {
            return Err(Error::Parameter("at least one centroid is required".into()));
        }
        let d = vectors[0].len();
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != d {
                return Err(Error::Shape(format!("centroid {i} has dim {}, expected {d}", v.len())));
            }
            let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::Invariant(format!("centroid {i} has norm {norm}")));
            }
        }
        Ok(Self { k, d, vectors })
    }

    fn from_unit(vectors: &[Vec<f64>]) -> Self {
        Self {
            k: vectors.len(),
            d: vectors[0].len(),
            vectors: vectors
                .iter()
                .map(|v| v.iter().map(|&x| x as f32).collect())
                .collect(),
        }
    }
}

/// Result of one k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Centroids,
    pub assignments: Vec<usize>,
    /// Point indices chosen by the seeding step, in order.
    pub seed_indices: Vec<usize>,
    /// `Σ (1 − cos(x, assigned centroid))` after each assignment step.
    pub objective_history: Vec<f64>,
}

impl KMeansFit {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().expect("at least one assignment step")
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit_rows(points: ArrayView2<'_, f32>) -> Result<Vec<Vec<f64>>> {
    points
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
            let norm = dot(&v, &v).sqrt();
            if norm < MIN_NORM {
                return Err(Error::Degenerate(format!("point {i} has zero norm")));
            }
            Ok(v.into_iter().map(|x| x / norm).collect())
        })
        .collect()
}

/// Most similar centroid per point (lowest index on ties) and the objective.
fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, f64) {
    let mut labels = Vec::with_capacity(points.len());
    let mut sims = Vec::with_capacity(points.len());
    let mut objective = 0.0;
    for x in points {
        let (best, sim) = centroids
            .iter()
            .enumerate()
            .map(|(j, c)| (j, dot(x, c)))
            .fold((0, f64::NEG_INFINITY), |acc, (j, s)| if s > acc.1 { (j, s) } else { acc });
        labels.push(best);
        sims.push(sim);
        objective += 1.0 - sim;
    }
    (labels, sims, objective)
}

/// k-means++ seeding under the cosine distance `1 − cos`. For unit vectors
/// this is half the squared Euclidean distance, i.e. the usual D² weighting.
fn seed_plus_plus<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<usize> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = points
        .iter()
        .map(|x| (1.0 - dot(x, &points[chosen[0]])).max(0.0))
        .collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in dist.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < w {
                    break;
                }
                target -= w;
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // Remaining points coincide with chosen ones up to rounding.
            let taken: HashSet<Vec<u64>> = chosen
                .iter()
                .map(|&i| points[i].iter().map(|x| x.to_bits()).collect())
                .collect();
            (0..n)
                .find(|&i| !taken.contains(&points[i].iter().map(|x| x.to_bits()).collect::<Vec<_>>()))
                .expect("caller guarantees k distinct points")
        };
        chosen.push(next);
        for (d, x) in dist.iter_mut().zip(points) {
            *d = d.min((1.0 - dot(x, &points[next])).max(0.0));
        }
    }
    chosen
}

/// Spherical k-means: k-means++ seeding on cosine distance, then Lloyd
/// iterations (assign by max cosine, update to the normalised mean) until
/// assignments stop changing or `max_iters` assignment steps have run.
/// An empty cluster is re-seeded with the point least similar to its own
/// centroid.
pub fn kmeans_cosine_fit(
    points: ArrayView2<'_, f32>,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if max_iters == 0 {
        return Err(Error::Parameter("max_iters must be at least 1".into()));
    }
    let unit = unit_rows(points)?;
    let distinct: HashSet<Vec<u64>> = unit
        .iter()
        .map(|v| v.iter().map(|x| x.to_bits()).collect())
        .collect();
    if distinct.len() < k {
        return Err(Error::Parameter(format!(
            "need at least {k} distinct vectors, got {}",
            distinct.len()
        )));
    }
    let d = points.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seed_indices = seed_plus_plus(&unit, k, &mut rng);
    let mut centroids: Vec<Vec<f64>> = seed_indices.iter().map(|&i| unit[i].clone()).collect();

    let mut history = Vec::new();
    let mut previous: Option<Vec<usize>> = None;
    let mut labels;
    loop {
        let (assigned, sims, objective) = assign(&unit, &centroids);
        labels = assigned;
        history.push(objective);
        if previous.as_ref() == Some(&labels) || history.len() >= max_iters {
            break;
        }

        let mut sums = vec![vec![0.0f64; d]; k];
        let mut sizes = vec![0usize; k];
        for (x, &l) in unit.iter().zip(&labels) {
            sizes[l] += 1;
            sums[l].iter_mut().zip(x).for_each(|(s, v)| *s += v);
        }
        let mut reseeded = HashSet::new();
        for j in 0..k {
            if sizes[j] == 0 {
                let far = (0..unit.len())
                    .filter(|i| !reseeded.contains(i))
                    .min_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)))
                    .expect("n >= k points");
                reseeded.insert(far);
                centroids[j] = unit[far].clone();
                continue;
            }
            let norm = dot(&sums[j], &sums[j]).sqrt();
            if norm >= MIN_NORM {
                centroids[j] = sums[j].iter().map(|s| s / norm).collect();
            }
        }
        previous = Some(labels.clone());
    }

    Ok(KMeansFit {
        centroids: Centroids::from_unit(&centroids),
        assignments: labels,
        seed_indices,
        objective_history: history,
    })
}

pub fn kmeans_cosine(
    points: ArrayView2<'_, f32>,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<Centroids> {
    kmeans_cosine_fit(points, k, max_iters, seed).map(|fit| fit.centroids)
}

/// Best of `restarts` independently seeded runs by final objective; the
/// earliest run wins ties.
pub fn kmeans_cosine_restarts(
    points: ArrayView2<'_, f32>,
    k: usize,
    max_iters: usize,
    seed: u64,
    restarts: usize,
) -> Result<KMeansFit> {
    let mut best: Option<KMeansFit> = None;
    for r in 0..restarts.max(1) {
        let run_seed = seed.wrapping_add((r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let fit = kmeans_cosine_fit(points, k, max_iters, run_seed)?;
        if best.as_ref().is_none_or(|b| fit.objective() < b.objective()) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one run"))
}

/// Labels every cell with its most cosine-similar centroid, lowest index on ties.
pub fn assign_clusters(codes: &CodeMap, cent: &Centroids) -> Result<LabelMask> {
    if codes.channels() != cent.d {
        return Err(Error::Shape(format!(
            "codes have dim {}, centroids {}",
            codes.channels(),
            cent.d
        )));
    }
    if cent.k > 256 {
        return Err(Error::Parameter("at most 256 clusters fit in a label mask".into()));
    }
    let unit = unit_rows(codes.as_matrix())?;
    let centroids: Vec<Vec<f64>> = cent
        .vectors
        .iter()
        .map(|v| v.iter().map(|&x| x as f64).collect())
        .collect();
    let (labels, _, _) = assign(&unit, &centroids);
    LabelMask::new(
        codes.hp(),
        codes.wp(),
        labels.into_iter().map(|l| l as u8).collect(),
    )
}
