//! Auxiliary test-score distributions from unlabeled data.
//!
//! In classification the true test score is unknown without labels, but it
//! must be one of the per-class scores of its row. That pins the unknown
//! test distribution between two computable ones:
//!
//! - `(min, max)`: uniform empiricals over row minima and row maxima. The
//!   sandwich holds exactly by construction.
//! - `(f, U)`: the score of one random class per row, drawn either from the
//!   row's model probabilities (`f`, optimistic) or uniformly over classes
//!   (`U`, pessimistic). The sandwich is checked empirically and recorded —
//!   it usually holds but is not guaranteed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::empirical::WeightedEmpirical;
use crate::error::{Error, Result};

/// Default tolerance for dominance checks on constructed pairs.
pub const DOMINANCE_TOL: f64 = 1e-9;

/// Per-sample, per-class nonconformity scores, optionally with the model
/// probabilities they came from (`score = 1 - probability`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    n_classes: usize,
    /// Row-major scores, `rows x n_classes`, entries in `[0, 1]`.
    scores: Vec<Vec<f64>>,
    /// Optional per-row model probabilities, same shape as `scores`.
    probabilities: Option<Vec<Vec<f64>>>,
}

impl ScoreMatrix {
    pub fn new(scores: Vec<Vec<f64>>, probabilities: Option<Vec<Vec<f64>>>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("score matrix must have at least one row"));
        }
        let n_classes = scores[0].len();
        if n_classes < 2 {
            return Err(Error::invalid("score matrix needs at least two classes"));
        }
        for (i, row) in scores.iter().enumerate() {
            if row.len() != n_classes {
                return Err(Error::invalid(format!(
                    "ragged score matrix: row {i} has {} entries, expected {n_classes}",
                    row.len()
                )));
            }
            for (j, &s) in row.iter().enumerate() {
                if !s.is_finite() || !(0.0..=1.0).contains(&s) {
                    return Err(Error::invalid(format!(
                        "score {s} at row {i}, class {j} outside [0, 1]"
                    )));
                }
            }
        }
        if let Some(probs) = &probabilities {
            if probs.len() != scores.len() {
                return Err(Error::invalid(
                    "probability matrix row count differs from score matrix",
                ));
            }
            for (i, row) in probs.iter().enumerate() {
                if row.len() != n_classes {
                    return Err(Error::invalid(format!(
                        "ragged probability matrix at row {i}"
                    )));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!(
                        "probabilities at row {i} sum to {total}, expected 1"
                    )));
                }
                for (j, (&p, &s)) in row.iter().zip(&scores[i]).enumerate() {
                    if p < 0.0 {
                        return Err(Error::invalid(format!(
                            "negative probability at row {i}, class {j}"
                        )));
                    }
                    if (s - (1.0 - p)).abs() > 1e-6 {
                        return Err(Error::invalid(format!(
                            "score {s} at row {i}, class {j} is not 1 - probability {p}"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            n_classes,
            scores,
            probabilities,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.scores.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.scores
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i]
    }

    pub fn probabilities(&self) -> Option<&[Vec<f64>]> {
        self.probabilities.as_deref()
    }

    /// Keep only the given rows (in the given order).
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let scores = indices
            .iter()
            .map(|&i| {
                self.scores
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("row index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        let probabilities = match &self.probabilities {
            Some(p) => Some(indices.iter().map(|&i| p[i].clone()).collect()),
            None => None,
        };
        ScoreMatrix::new(scores, probabilities)
    }
}

/// Which construction produced an auxiliary pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    MinMax,
    FU,
    Custom,
}

/// A pair of distributions sandwiching the unknown test score distribution:
/// `upper ⪰ Q ⪰ lower` in first-order stochastic dominance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryPair {
    pub lower: WeightedEmpirical,
    pub upper: WeightedEmpirical,
    pub kind: PairKind,
    /// For `MinMax` this is exact by construction; for `FU` it is an
    /// empirical observation on this data, not a guarantee.
    pub dominance_verified: bool,
}

impl AuxiliaryPair {
    /// Wrap caller-supplied distributions, checking dominance empirically.
    pub fn custom(lower: WeightedEmpirical, upper: WeightedEmpirical) -> Self {
        let dominance_verified = upper.dominates(&lower, DOMINANCE_TOL);
        Self {
            lower,
            upper,
            kind: PairKind::Custom,
            dominance_verified,
        }
    }

    /// A degenerate pair with `lower = upper = dist`; the unlabeled bounds
    /// collapse to the labeled ones on such a pair.
    pub fn degenerate(dist: WeightedEmpirical) -> Self {
        Self {
            lower: dist.clone(),
            upper: dist,
            kind: PairKind::Custom,
            dominance_verified: true,
        }
    }
}

/// Pair from per-row score minima and maxima. The row minimum is never
/// above the true-label score and the maximum never below it, so the
/// sandwich is exact.
pub fn min_max_pair(scores: &ScoreMatrix) -> Result<AuxiliaryPair> {
    let mut mins = Vec::with_capacity(scores.n_rows());
    let mut maxs = Vec::with_capacity(scores.n_rows());
    for row in scores.rows() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &s in row {
            lo = lo.min(s);
            hi = hi.max(s);
        }
        mins.push(lo);
        maxs.push(hi);
    }
    let lower = WeightedEmpirical::uniform(&mins)?;
    let upper = WeightedEmpirical::uniform(&maxs)?;
    debug_assert!(upper.dominates(&lower, 0.0));
    Ok(AuxiliaryPair {
        lower,
        upper,
        kind: PairKind::MinMax,
        dominance_verified: true,
    })
}

/// Pair from one sampled class per row: `lower` draws the class from the
/// row's model probabilities, `upper` uniformly at random. Deterministic
/// given `seed`. Dominance is recorded, not enforced.
pub fn f_u_pair(scores: &ScoreMatrix, seed: u64) -> Result<AuxiliaryPair> {
    let probs = scores
        .probabilities()
        .ok_or_else(|| Error::invalid("f/U pair requires model probabilities"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = scores.n_classes();
    let mut f_scores = Vec::with_capacity(scores.n_rows());
    let mut u_scores = Vec::with_capacity(scores.n_rows());
    for (row, prow) in scores.rows().iter().zip(probs) {
        let uf: f64 = rng.random();
        f_scores.push(row[sample_categorical(prow, uf)]);
        let uu: f64 = rng.random();
        let j = ((uu * k as f64) as usize).min(k - 1);
        u_scores.push(row[j]);
    }
    let lower = WeightedEmpirical::uniform(&f_scores)?;
    let upper = WeightedEmpirical::uniform(&u_scores)?;
    let dominance_verified = upper.dominates(&lower, DOMINANCE_TOL);
    Ok(AuxiliaryPair {
        lower,
        upper,
        kind: PairKind::FU,
        dominance_verified,
    })
}

/// Uniform empirical over labeled test scores, for the labeled bounds and
/// for evaluation.
pub fn labeled_empirical(scores: &[f64]) -> Result<WeightedEmpirical> {
    WeightedEmpirical::uniform(scores)
}

/// Inverse-CDF draw from one row of probabilities. Rows are renormalized
/// defensively so slightly-off sums cannot push the index out of range.
fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    for (j, &p) in probs.iter().enumerate() {
        acc += p;
        if target < acc {
            return j;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: Vec<Vec<f64>>) -> ScoreMatrix {
        ScoreMatrix::new(rows, None).unwrap()
    }

    fn matrix_with_probs(probs: Vec<Vec<f64>>) -> ScoreMatrix {
        let scores = probs
            .iter()
            .map(|row| row.iter().map(|p| 1.0 - p).collect())
            .collect();
        ScoreMatrix::new(scores, Some(probs)).unwrap()
    }

    #[test]
    fn min_max_takes_row_extrema() {
        let pair = min_max_pair(&matrix(vec![vec![0.1, 0.9], vec![0.3, 0.7]])).unwrap();
        assert_eq!(pair.lower.support(), &[0.1, 0.3]);
        assert_eq!(pair.upper.support(), &[0.7, 0.9]);
        assert!(pair.dominance_verified);
        assert_eq!(pair.kind, PairKind::MinMax);
    }

    #[test]
    fn min_max_degenerate_columns() {
        let pair = min_max_pair(&matrix(vec![vec![0.4, 0.4], vec![0.6, 0.6]])).unwrap();
        assert_eq!(pair.lower, pair.upper);
    }

    #[test]
    fn min_max_dominance_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let m = rng.random_range(1..40);
            let k = rng.random_range(2..12);
            let rows: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..k).map(|_| rng.random()).collect())
                .collect();
            let pair = min_max_pair(&matrix(rows)).unwrap();
            assert!(pair.upper.dominates(&pair.lower, 0.0));
            assert!(pair.upper.mean() >= pair.lower.mean());
        }
    }

    #[test]
    fn min_max_permutation_invariant() {
        let rows = vec![vec![0.2, 0.8, 0.5], vec![0.9, 0.1, 0.6], vec![0.3, 0.4, 0.7]];
        let base = min_max_pair(&matrix(rows.clone())).unwrap();

        // Permute rows.
        let permuted_rows = vec![rows[2].clone(), rows[0].clone(), rows[1].clone()];
        let p1 = min_max_pair(&matrix(permuted_rows)).unwrap();
        assert_eq!(base.lower, p1.lower);
        assert_eq!(base.upper, p1.upper);

        // Permute columns within rows.
        let permuted_cols: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| vec![r[1], r[2], r[0]])
            .collect();
        let p2 = min_max_pair(&matrix(permuted_cols)).unwrap();
        assert_eq!(base.lower, p2.lower);
        assert_eq!(base.upper, p2.upper);
    }

    #[test]
    fn f_u_one_hot_picks_argmax() {
        let probs = vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]];
        let m = matrix_with_probs(probs);
        let pair = f_u_pair(&m, 0).unwrap();
        // Scores of the argmax classes are 1 - 1 = 0.
        assert_eq!(pair.lower.support(), &[0.0, 0.0]);
        assert_eq!(pair.kind, PairKind::FU);
    }

    #[test]
    fn f_u_deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let probs: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let raw: Vec<f64> = (0..5).map(|_| rng.random::<f64>() + 0.01).collect();
                let t: f64 = raw.iter().sum();
                raw.iter().map(|p| p / t).collect()
            })
            .collect();
        let m = matrix_with_probs(probs);
        let a = f_u_pair(&m, 42).unwrap();
        let b = f_u_pair(&m, 42).unwrap();
        assert_eq!(a, b);
        let c = f_u_pair(&m, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn f_u_requires_probabilities() {
        let m = matrix(vec![vec![0.1, 0.9]]);
        assert!(f_u_pair(&m, 0).is_err());
    }

    #[test]
    fn f_u_uniform_probs_match_in_distribution() {
        // Uniform model probabilities make the f and U samplers identically
        // distributed. With the score = 1 - probability consistency this
        // means constant per-row scores, so the mean gap vanishes exactly;
        // the seed sweep still exercises both sampling paths.
        let k = 4;
        let probs = vec![vec![1.0 / k as f64; k]; 50];
        let scores = vec![vec![1.0 - 1.0 / k as f64; k]; 50];
        let m = ScoreMatrix::new(scores, Some(probs)).unwrap();
        let mut gap_sum = 0.0;
        for seed in 0..200u64 {
            let pair = f_u_pair(&m, seed).unwrap();
            gap_sum += pair.upper.mean() - pair.lower.mean();
        }
        assert_abs_diff_eq!(gap_sum / 200.0, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn labeled_empirical_basic() {
        let d = labeled_empirical(&[0.2, 0.4]).unwrap();
        assert_eq!(d.support(), &[0.2, 0.4]);
        assert!(labeled_empirical(&[]).is_err());
    }

    #[test]
    fn sandwich_property_with_true_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let m = rng.random_range(2..60);
            let k = rng.random_range(2..10);
            let rows: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..k).map(|_| rng.random()).collect())
                .collect();
            let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
            let true_scores: Vec<f64> =
                rows.iter().zip(&labels).map(|(r, &y)| r[y]).collect();
            let pair = min_max_pair(&matrix(rows)).unwrap();
            let truth = labeled_empirical(&true_scores).unwrap();
            assert!(pair.upper.dominates(&truth, 0.0));
            assert!(truth.dominates(&pair.lower, 0.0));
        }
    }

    #[test]
    fn matrix_validation() {
        assert!(ScoreMatrix::new(vec![], None).is_err());
        assert!(ScoreMatrix::new(vec![vec![0.5]], None).is_err());
        assert!(ScoreMatrix::new(vec![vec![0.5, 1.2]], None).is_err());
        assert!(ScoreMatrix::new(vec![vec![0.5, 0.4], vec![0.1]], None).is_err());
        // Probabilities inconsistent with scores.
        assert!(ScoreMatrix::new(
            vec![vec![0.5, 0.5]],
            Some(vec![vec![0.9, 0.1]])
        )
        .is_err());
        // Probabilities not summing to one.
        assert!(ScoreMatrix::new(
            vec![vec![0.5, 0.6]],
            Some(vec![vec![0.5, 0.3]])
        )
        .is_err());
    }
}
