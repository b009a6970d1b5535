#![allow(dead_code)]

use corrseg_core::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut impl Rng, hp: usize, wp: usize, c: usize) -> FeatureMap<f64> {
    let data = (0..hp * wp * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureMap::new(hp, wp, c, data).unwrap()
}

pub fn random_map_f32(rng: &mut impl Rng, hp: usize, wp: usize, c: usize) -> FeatureMap {
    let data = (0..hp * wp * c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    FeatureMap::new(hp, wp, c, data).unwrap()
}

/// Cosine of two vectors, accumulated in f64.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `out[a][b]` for flattened source cell `a` and target cell `b`.
pub fn brute_correspondence<T: corrseg_core::Scalar>(f: &FeatureMap<T>, g: &FeatureMap<T>) -> Vec<Vec<f64>> {
    let cell = |m: &FeatureMap<T>, i: usize| -> Vec<f64> {
        m.cell_at(i).iter().map(|v| v.to_f64_lossy()).collect()
    };
    (0..f.cells())
        .map(|a| (0..g.cells()).map(|b| cosine(&cell(f, a), &cell(g, b))).collect())
        .collect()
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Maximum total agreement `Σ_i counts[i][perm[i]]` over all permutations.
pub fn brute_force_assignment(counts: &[Vec<u64>]) -> u64 {
    permutations(counts.len())
        .iter()
        .map(|perm| perm.iter().enumerate().map(|(i, &j)| counts[i][j]).sum())
        .max()
        .unwrap()
}
