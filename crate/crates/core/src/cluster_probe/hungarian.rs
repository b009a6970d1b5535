use super::ConfusionMatrix;
use crate::error::{Error, Result};

/// Permutation `π` maximising `Σ_p confusion[p][π(p)]` over a square matrix.
///
/// Solved exactly as a minimum-cost assignment on `max − count` with the
/// shortest-augmenting-path (potentials) form of the Hungarian method, O(k³).
pub fn hungarian_match(confusion: &ConfusionMatrix) -> Result<Vec<usize>> {
    let n = confusion.k_pred();
    if n != confusion.k_gt() {
        return Err(Error::Parameter(format!(
            "assignment needs a square matrix, got {}x{}; pad it first",
            confusion.k_pred(),
            confusion.k_gt()
        )));
    }
    let max = confusion.counts().iter().copied().max().unwrap_or(0) as i128;
    let cost = |p: usize, g: usize| max - confusion.get(p, g) as i128;

    // 1-based rows/columns; column 0 is the virtual start.
    let mut u = vec![0i128; n + 1];
    let mut v = vec![0i128; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![i128::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = i128::MAX;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = cost(r - 1, col - 1) - u[r] - v[col];
                if reduced < minv[col] {
                    minv[col] = reduced;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for col in 1..=n {
        perm[owner[col] - 1] = col - 1;
    }
    Ok(perm)
}

/// Many-to-one matching for over-clustering: each predicted cluster maps to
/// the ground-truth class it overlaps most (lowest class id on ties).
pub fn greedy_match(confusion: &ConfusionMatrix) -> Vec<usize> {
    (0..confusion.k_pred())
        .map(|p| {
            (0..confusion.k_gt())
                .fold((0, 0u64), |best, g| {
                    let c = confusion.get(p, g);
                    if c > best.1 { (g, c) } else { best }
                })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[u64]]) -> ConfusionMatrix {
        let k_gt = rows[0].len();
        ConfusionMatrix::from_counts(rows.len(), k_gt, rows.concat()).unwrap()
    }

    fn trace(c: &ConfusionMatrix, perm: &[usize]) -> u64 {
        perm.iter().enumerate().map(|(p, &g)| c.get(p, g)).sum()
    }

    #[test]
    fn diagonal_dominant_is_identity() {
        let c = matrix(&[&[90, 1, 2], &[3, 80, 1], &[0, 4, 70]]);
        assert_eq!(hungarian_match(&c).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn anti_diagonal_is_reversal() {
        let c = matrix(&[&[0, 0, 0, 9], &[0, 0, 9, 0], &[0, 9, 0, 0], &[9, 0, 0, 0]]);
        assert_eq!(hungarian_match(&c).unwrap(), vec![3, 2, 1, 0]);
    }

    #[test]
    fn rejects_non_square() {
        let c = matrix(&[&[1, 2, 3], &[4, 5, 6]]);
        assert!(matches!(hungarian_match(&c), Err(Error::Parameter(_))));
        let padded = c.pad_square();
        assert_eq!(hungarian_match(&padded).unwrap().len(), 3);
    }

    #[test]
    fn all_zero_and_single() {
        let c = ConfusionMatrix::new(3, 3);
        let mut perm = hungarian_match(&c).unwrap();
        perm.sort();
        assert_eq!(perm, vec![0, 1, 2]);
        assert_eq!(hungarian_match(&matrix(&[&[5]])).unwrap(), vec![0]);
    }

    #[test]
    fn beats_greedy_trap() {
        // Greedy row-by-row would take 10 then be forced into 1.
        let c = matrix(&[&[10, 9], &[9, 1]]);
        let perm = hungarian_match(&c).unwrap();
        assert_eq!(trace(&c, &perm), 18);
    }

    #[test]
    fn greedy_is_many_to_one() {
        let c = matrix(&[&[5, 1], &[7, 2], &[0, 3]]);
        assert_eq!(greedy_match(&c), vec![0, 0, 1]);
    }
}
