//! Finite one-dimensional distributions over nonconformity scores.
//!
//! [`WeightedEmpirical`] is the workhorse of the crate: a sorted support of
//! scores in `[0, 1]` with probability weights. Everything downstream —
//! CDF differences, quantile thresholds, exact 1-Wasserstein distances,
//! stochastic-dominance checks and DKW confidence bands — is computed on
//! this representation.
//!
//! The 1-Wasserstein distance between two step CDFs is an exact finite sum:
//!
//! ```text
//! W1(P, Q) = ∫ |F_P(z) - F_Q(z)| dz
//!          = Σ_segments |F_P - F_Q| × segment width
//! ```
//!
//! where segments run between consecutive atoms of the merged support.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that weights sum to one.
const SIMPLEX_TOL: f64 = 1e-9;

/// Quantile conventions for score thresholds.
///
/// `Plain` is the generalized inverse CDF and works for any weights.
/// `Conformal` is the finite-sample-corrected `⌈(n+1)·level⌉`-th order
/// statistic and is defined for uniform weights; weighted inputs fall back
/// to `Plain`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileConvention {
    Plain,
    Conformal,
}

/// A finite distribution over scores in `[0, 1]`: sorted support with
/// probability weights. Duplicate support values are kept as separate atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedEmpirical {
    support: Vec<f64>,
    weights: Vec<f64>,
    /// Prefix sums of `weights`; `cum_weights[i]` is the CDF at `support[i]`.
    #[serde(skip)]
    cum_weights: Vec<f64>,
}

impl WeightedEmpirical {
    /// Build a distribution from scores and optional nonnegative weights.
    ///
    /// Omitted weights default to uniform `1/n`; supplied weights are
    /// renormalized to sum to one. Scores outside `[0, 1]` are rejected:
    /// nonconformity scores here are one minus a model probability, so an
    /// out-of-range value is an upstream bug.
    pub fn from_scores(scores: &[f64], weights: Option<&[f64]>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("score set must be nonempty"));
        }
        for (i, &s) in scores.iter().enumerate() {
            if !s.is_finite() || !(0.0..=1.0).contains(&s) {
                return Err(Error::invalid(format!(
                    "score {s} at index {i} outside [0, 1]"
                )));
            }
        }
        let weights = match weights {
            Some(w) => {
                if w.len() != scores.len() {
                    return Err(Error::invalid(format!(
                        "weights length {} does not match scores length {}",
                        w.len(),
                        scores.len()
                    )));
                }
                for (i, &wi) in w.iter().enumerate() {
                    if !wi.is_finite() || wi < 0.0 {
                        return Err(Error::invalid(format!(
                            "weight {wi} at index {i} is negative or non-finite"
                        )));
                    }
                }
                let total: f64 = w.iter().sum();
                if total <= 0.0 {
                    return Err(Error::invalid("weights sum to zero"));
                }
                w.iter().map(|wi| wi / total).collect::<Vec<_>>()
            }
            None => vec![1.0 / scores.len() as f64; scores.len()],
        };

        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
        let support: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
        let weights: Vec<f64> = order.iter().map(|&i| weights[i]).collect();
        Ok(Self::from_sorted_parts(support, weights))
    }

    /// Uniform-weight distribution over `scores`.
    pub fn uniform(scores: &[f64]) -> Result<Self> {
        Self::from_scores(scores, None)
    }

    /// Point mass at `score`.
    pub fn dirac(score: f64) -> Result<Self> {
        Self::from_scores(&[score], None)
    }

    /// Replace the weights, keeping the sorted support. `weights` must be
    /// indexed against the sorted support and lie on the simplex.
    pub fn with_weights(&self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.len() {
            return Err(Error::invalid(format!(
                "weights length {} does not match support length {}",
                weights.len(),
                self.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::invalid("weights must lie on the probability simplex"));
        }
        Ok(Self::from_sorted_parts(self.support.clone(), weights.to_vec()))
    }

    fn from_sorted_parts(support: Vec<f64>, weights: Vec<f64>) -> Self {
        let mut cum = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for &w in &weights {
            acc += w;
            cum.push(acc);
        }
        Self {
            support,
            weights,
            cum_weights: cum,
        }
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    /// Sorted support values.
    pub fn support(&self) -> &[f64] {
        &self.support
    }

    /// Weights co-indexed with the sorted support.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// True when all weights are equal (within `1e-12`).
    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.len() as f64;
        self.weights.iter().all(|&w| (w - u).abs() <= 1e-12)
    }

    /// Right-continuous CDF: `F(t) = Σ_{support[i] ≤ t} weights[i]`.
    pub fn cdf_at(&self, t: f64) -> f64 {
        let idx = self.support.partition_point(|&s| s <= t);
        if idx == 0 {
            0.0
        } else {
            self.cum_weights[idx - 1]
        }
    }

    /// CDF just below atom index `i` in the sorted support, i.e. the
    /// cumulative weight of atoms strictly before index `i`.
    pub(crate) fn cum_before(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.cum_weights[i - 1]
        }
    }

    /// Quantile of the distribution at `level ∈ [0, 1]`.
    ///
    /// `Plain`: `inf { s ∈ support : F(s) ≥ level }`.
    /// `Conformal` (uniform weights): the `⌈(n+1)·level⌉`-th order
    /// statistic, clamped to the maximum score when the index exceeds `n`.
    /// Weighted inputs with `Conformal` fall back to `Plain`; callers that
    /// surface reports should note the fallback via [`Self::is_uniform`].
    pub fn quantile(&self, level: f64, convention: QuantileConvention) -> Result<f64> {
        if !(0.0..=1.0).contains(&level) || !level.is_finite() {
            return Err(Error::invalid(format!("quantile level {level} outside [0, 1]")));
        }
        match convention {
            QuantileConvention::Conformal if self.is_uniform() => {
                let n = self.len();
                let k = ((n as f64 + 1.0) * level).ceil() as usize;
                let k = k.clamp(1, n);
                Ok(self.support[k - 1])
            }
            _ => {
                let idx = self
                    .cum_weights
                    .partition_point(|&c| c < level - 1e-12)
                    .min(self.len() - 1);
                Ok(self.support[idx])
            }
        }
    }

    /// Mean `Σ weights[i] · support[i]`.
    pub fn mean(&self) -> f64 {
        self.support
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| s * w)
            .sum()
    }

    /// Exact 1-Wasserstein distance `∫ |F_self - F_other| dz`.
    ///
    /// Both CDFs are piecewise constant, so the integral is a finite sum of
    /// segment widths times CDF differences over the merged support.
    pub fn w1(&self, other: &WeightedEmpirical) -> f64 {
        let mut total = 0.0;
        merged_walk(self, other, |z_lo, z_hi, f_self, f_other| {
            total += (f_self - f_other).abs() * (z_hi - z_lo);
        });
        total
    }

    /// First-order stochastic dominance: `self ⪰ other` iff
    /// `F_self(t) ≤ F_other(t) + tol` at every point of the merged support.
    pub fn dominates(&self, other: &WeightedEmpirical, tol: f64) -> bool {
        let mut ok = true;
        merged_walk(self, other, |_, _, f_self, f_other| {
            if f_self > f_other + tol {
                ok = false;
            }
        });
        ok
    }

    /// Draw `k` i.i.d. samples from the categorical distribution over the
    /// support; deterministic given `seed`.
    pub fn resample(&self, k: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.resample_with(k, &mut rng)
    }

    /// As [`Self::resample`] but drawing from a caller-owned generator.
    pub fn resample_with(&self, k: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
        (0..k)
            .map(|_| {
                let u: f64 = rng.random();
                let idx = self
                    .cum_weights
                    .partition_point(|&c| c <= u)
                    .min(self.len() - 1);
                self.support[idx]
            })
            .collect()
    }
}

/// Walk the merged support of two distributions, invoking `f` once per
/// constant segment `[z_lo, z_hi)` with the CDF values on that segment.
/// The closing segment after the last atom is skipped (both CDFs are 1).
fn merged_walk(
    p: &WeightedEmpirical,
    q: &WeightedEmpirical,
    mut f: impl FnMut(f64, f64, f64, f64),
) {
    let (sp, sq) = (p.support(), q.support());
    let (mut ip, mut iq) = (0usize, 0usize);
    let mut z_prev: Option<f64> = None;
    let (mut fp, mut fq) = (0.0, 0.0);
    while ip < sp.len() || iq < sq.len() {
        let z = match (sp.get(ip), sq.get(iq)) {
            (Some(&a), Some(&b)) => a.min(b),
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => unreachable!(),
        };
        if let Some(prev) = z_prev {
            if z > prev {
                f(prev, z, fp, fq);
            }
        }
        while ip < sp.len() && sp[ip] <= z {
            ip += 1;
        }
        while iq < sq.len() && sq[iq] <= z {
            iq += 1;
        }
        fp = p.cum_before(ip);
        fq = q.cum_before(iq);
        z_prev = Some(z);
    }
}

/// Dvoretzky–Kiefer–Wolfowitz band half-width:
/// `ε = sqrt(log(2/d) / (2·n_effective))`. A single empirical CDF stays
/// within `ε` of its population CDF with probability at least `1 - d`.
pub fn dkw_epsilon(n_effective: f64, d: f64) -> Result<f64> {
    if !(n_effective > 0.0) {
        return Err(Error::invalid(format!("n_effective {n_effective} must be > 0")));
    }
    if !(d > 0.0 && d < 1.0) {
        return Err(Error::invalid(format!("d {d} must lie in (0, 1)")));
    }
    Ok(((2.0 / d).ln() / (2.0 * n_effective)).sqrt())
}

/// Effective sample size `1 / Σ w_i²` of a simplex weight vector; equals
/// `n` for uniform weights and `1` for a point mass.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    1.0 / sum_sq
}

/// A DKW confidence band for one empirical CDF.
///
/// The stored triple is self-consistent:
/// `epsilon = sqrt(log(2/(1 - confidence)) / (2·n_effective))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DkwBand {
    pub epsilon: f64,
    pub confidence: f64,
    pub n_effective: f64,
}

impl DkwBand {
    /// Band for an empirical CDF on `n_effective` samples holding with
    /// probability at least `1 - d`.
    pub fn new(n_effective: f64, d: f64) -> Result<Self> {
        Ok(Self {
            epsilon: dkw_epsilon(n_effective, d)?,
            confidence: 1.0 - d,
            n_effective,
        })
    }
}
