//! Learning calibration weights by minimizing the unlabeled coverage-gap
//! bound.
//!
//! Weights live on the probability simplex, parameterized as log-weights
//! with a softmax. The objective is the unlabeled bound with the weighted
//! calibration empirical and a KDE refreshed with the current weights each
//! step. Score positions never move during optimization — only CDF levels
//! and kernel mixture weights do — so the objective is differentiable in
//! the weights with plain chain rule:
//!
//! - CDF terms: `∂F_w(t)/∂w_i = 1[s_i ≤ t]`, with sign subgradients at the
//!   absolute values (0 at exact ties);
//! - density terms: the KDE is linear in the weights, contributing kernel
//!   evaluations;
//! - the max-density factor uses the fixed argmax grid point (first argmax
//!   on ties) as its subgradient anchor.
//!
//! Updates are Adam with bias-corrected moments on all weights at once, no
//! batching. The kernel matrix over the evaluation grid is precomputed
//! once per run, which keeps a full step linear in the problem size.

use serde::{Deserialize, Serialize};

use crate::auxiliary::AuxiliaryPair;
use crate::bounds::{
    cdf_on_segments, merged_points, sweep_cells, unlabeled_bound, BoundFlavor, Estimator,
};
use crate::density::{grid_points, KdeDensity, DEFAULT_GRID_SIZE};
use crate::empirical::WeightedEmpirical;
use crate::error::{Error, Result};

/// Log-parameterized weights on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexWeights {
    log_weights: Vec<f64>,
}

impl SimplexWeights {
    /// Uniform initialization: all log-weights zero.
    pub fn uniform(n: usize) -> Self {
        Self {
            log_weights: vec![0.0; n],
        }
    }

    pub fn from_log_weights(log_weights: Vec<f64>) -> Self {
        Self { log_weights }
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Simplex weights via overflow-safe softmax (max subtraction).
    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.log_weights)
    }
}

fn softmax(log_weights: &[f64]) -> Vec<f64> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = log_weights.iter().map(|&t| (t - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Settings for the reweighting optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_adam: f64,
    pub flavor: BoundFlavor,
    pub estimator: Estimator,
    pub grid_size: usize,
    /// Explicit KDE bandwidth; `None` uses Silverman's rule at uniform
    /// weights, computed once and held fixed across steps.
    pub bandwidth: Option<f64>,
    /// Recompute the Silverman bandwidth from the current weights at every
    /// step instead of freezing the uniform-weight fit. Off by default: a
    /// moving bandwidth makes the objective non-stationary.
    pub refit_bandwidth: bool,
    pub seed: u64,
    pub record_trace: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon_adam: 1e-8,
            flavor: BoundFlavor::WeightedCdf,
            estimator: Estimator::Grid,
            grid_size: DEFAULT_GRID_SIZE,
            bandwidth: None,
            refit_bandwidth: false,
            seed: 42,
            record_trace: true,
        }
    }
}

impl OptimizerConfig {
    fn validate(&self, n: usize) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::invalid("optimizer needs at least one step"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(format!("{name} {b} must lie in (0, 1)")));
            }
        }
        if self.grid_size < 2 {
            return Err(Error::invalid("grid_size must be at least 2"));
        }
        if n < 2 {
            return Err(Error::invalid(
                "reweighting needs at least two calibration scores",
            ));
        }
        Ok(())
    }

    /// Bandwidth used for the objective at the given weights.
    fn bandwidth_for(&self, cal_scores: &[f64], weights: &[f64]) -> Result<f64> {
        if let Some(h) = self.bandwidth {
            return Ok(h);
        }
        let kde = if self.refit_bandwidth {
            KdeDensity::fit(cal_scores, weights, None)?
        } else {
            KdeDensity::fit_uniform(cal_scores, None)?
        };
        Ok(kde.bandwidth())
    }
}

/// The unlabeled bound at the given weights; definitionally identical to
/// [`unlabeled_bound`] on the equivalent explicit distribution.
pub fn objective(
    w: &SimplexWeights,
    cal_scores: &[f64],
    pair: &AuxiliaryPair,
    cfg: &OptimizerConfig,
) -> Result<f64> {
    if w.len() != cal_scores.len() {
        return Err(Error::invalid(format!(
            "weight count {} does not match calibration score count {}",
            w.len(),
            cal_scores.len()
        )));
    }
    let weights = w.weights();
    let p = WeightedEmpirical::from_scores(cal_scores, Some(&weights))?;
    let h = cfg.bandwidth_for(cal_scores, &weights)?;
    let kde = KdeDensity::fit(p.support(), p.weights(), Some(h))?;
    Ok(unlabeled_bound(&p, pair, &kde, cfg.flavor, cfg.estimator, cfg.grid_size)?.value)
}

/// Exact gradient of [`objective`] with respect to the log-weights.
pub fn gradient(
    w: &SimplexWeights,
    cal_scores: &[f64],
    pair: &AuxiliaryPair,
    cfg: &OptimizerConfig,
) -> Result<Vec<f64>> {
    if w.len() != cal_scores.len() {
        return Err(Error::invalid(format!(
            "weight count {} does not match calibration score count {}",
            w.len(),
            cal_scores.len()
        )));
    }
    let weights = w.weights();
    let h = cfg.bandwidth_for(cal_scores, &weights)?;
    let ws = Workspace::build(cal_scores, pair, cfg, h)?;
    let sorted_w = ws.sort_values(&weights);
    let (_, grad_sorted) = ws.value_and_grad(&sorted_w);
    let grad_w = ws.unsort_values(&grad_sorted);
    Ok(log_weight_gradient(&weights, &grad_w))
}

/// Chain rule through the softmax: gradient with respect to log-weights
/// from the gradient with respect to simplex weights.
fn log_weight_gradient(weights: &[f64], grad_w: &[f64]) -> Vec<f64> {
    let dot: f64 = weights.iter().zip(grad_w).map(|(w, g)| w * g).sum();
    weights
        .iter()
        .zip(grad_w)
        .map(|(w, g)| w * (g - dot))
        .collect()
}

/// Run Algorithm-style reweighting: Adam on the log-weights for
/// `cfg.steps` iterations from uniform initialization.
///
/// Returns the learned weights (indexed like `cal_scores`) and, when
/// `cfg.record_trace` is set, the objective at initialization and after
/// every step (`steps + 1` entries).
pub fn learn_weights(
    cal_scores: &[f64],
    pair: &AuxiliaryPair,
    cfg: &OptimizerConfig,
) -> Result<(SimplexWeights, Vec<f64>)> {
    cfg.validate(cal_scores.len())?;
    let uniform = vec![1.0 / cal_scores.len() as f64; cal_scores.len()];
    let h = cfg.bandwidth_for(cal_scores, &uniform)?;
    let ws = Workspace::build(cal_scores, pair, cfg, h)?;

    let n = cal_scores.len();
    let mut theta = vec![0.0; n];
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut trace = Vec::new();

    for step in 1..=cfg.steps {
        let w = softmax(&theta);
        let sorted_w = ws.sort_values(&w);
        let (value, grad_sorted) = ws.value_and_grad(&sorted_w);
        if cfg.record_trace {
            trace.push(value);
        }
        let grad_w = ws.unsort_values(&grad_sorted);
        let grad = log_weight_gradient(&w, &grad_w);

        let b1t = 1.0 - cfg.beta1.powi(step as i32);
        let b2t = 1.0 - cfg.beta2.powi(step as i32);
        for i in 0..n {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / b1t;
            let v_hat = v[i] / b2t;
            theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon_adam);
        }
    }
    if cfg.record_trace {
        let w = softmax(&theta);
        let sorted_w = ws.sort_values(&w);
        trace.push(ws.value(&sorted_w));
    }
    Ok((SimplexWeights::from_log_weights(theta), trace))
}

/// Precomputed evaluation structure for one (calibration scores, pair,
/// config) triple. Everything that does not depend on the weights — merged
/// segments, auxiliary CDF levels, grid-cell overlaps and the kernel
/// matrix — is computed once.
struct Workspace {
    /// Sort permutation: `order[rank]` is the original index.
    order: Vec<usize>,
    sorted_scores: Vec<f64>,
    /// Merged atom positions of calibration and auxiliary supports.
    points: Vec<f64>,
    /// Segment lengths: `points[j+1] - points[j]` for `j < points.len()-1`.
    seg_len: Vec<f64>,
    f_up: Vec<f64>,
    f_lo: Vec<f64>,
    /// Number of sorted calibration atoms at or below `points[j]`.
    cal_counts: Vec<usize>,
    /// First merged-point index at or above each sorted calibration score.
    point_of_score: Vec<usize>,
    /// First sorted index of each score's tie group.
    tie_start: Vec<usize>,
    /// `(cell, segment, overlap)` triples for the grid estimator.
    overlaps: Vec<(u32, u32, f64)>,
    /// Row-major `grid_size x n` reflected-kernel matrix over sorted centers.
    kernel: Vec<f64>,
    mean_gap: f64,
    flavor: BoundFlavor,
    estimator: Estimator,
    grid_size: usize,
}

impl Workspace {
    fn build(
        cal_scores: &[f64],
        pair: &AuxiliaryPair,
        cfg: &OptimizerConfig,
        bandwidth: f64,
    ) -> Result<Self> {
        let n = cal_scores.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| cal_scores[a].total_cmp(&cal_scores[b]));
        let sorted_scores: Vec<f64> = order.iter().map(|&i| cal_scores[i]).collect();
        let cal = WeightedEmpirical::uniform(&sorted_scores)?;

        let points = merged_points(&[&cal, &pair.upper, &pair.lower]);
        let seg_len: Vec<f64> = points.windows(2).map(|w| w[1] - w[0]).collect();
        let f_up = cdf_on_segments(&pair.upper, &points);
        let f_lo = cdf_on_segments(&pair.lower, &points);

        let mut cal_counts = Vec::with_capacity(points.len());
        let mut i = 0;
        for &z in &points {
            while i < n && sorted_scores[i] <= z {
                i += 1;
            }
            cal_counts.push(i);
        }
        let point_of_score: Vec<usize> = sorted_scores
            .iter()
            .map(|&s| points.partition_point(|&z| z < s))
            .collect();
        let mut tie_start = vec![0; n];
        for i in 1..n {
            tie_start[i] = if sorted_scores[i] == sorted_scores[i - 1] {
                tie_start[i - 1]
            } else {
                i
            };
        }

        let mut overlaps = Vec::new();
        if cfg.flavor == BoundFlavor::WeightedCdf && cfg.estimator == Estimator::Grid {
            sweep_cells(&points, cfg.grid_size, |k, j, len| {
                overlaps.push((k as u32, j as u32, len));
            });
        }

        let mut kernel = Vec::new();
        if matches!(cfg.flavor, BoundFlavor::W1)
            || cfg.estimator == Estimator::Grid
        {
            let template = KdeDensity::fit(&sorted_scores, cal.weights(), Some(bandwidth))?;
            kernel = Vec::with_capacity(cfg.grid_size * n);
            for t in grid_points(cfg.grid_size) {
                for &c in &sorted_scores {
                    kernel.push(template.kernel_at(c, t));
                }
            }
        }

        Ok(Self {
            order,
            sorted_scores,
            points,
            seg_len,
            f_up,
            f_lo,
            cal_counts,
            point_of_score,
            tie_start,
            overlaps,
            kernel,
            mean_gap: pair.upper.mean() - pair.lower.mean(),
            flavor: cfg.flavor,
            estimator: cfg.estimator,
            grid_size: cfg.grid_size,
        })
    }

    fn sort_values(&self, original: &[f64]) -> Vec<f64> {
        self.order.iter().map(|&i| original[i]).collect()
    }

    fn unsort_values(&self, sorted: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; sorted.len()];
        for (rank, &i) in self.order.iter().enumerate() {
            out[i] = sorted[rank];
        }
        out
    }

    fn n(&self) -> usize {
        self.sorted_scores.len()
    }

    /// Prefix sums of sorted weights; `prefix[c]` is the mass of the first
    /// `c` atoms.
    fn prefix(&self, sorted_w: &[f64]) -> Vec<f64> {
        let mut prefix = Vec::with_capacity(sorted_w.len() + 1);
        prefix.push(0.0);
        let mut acc = 0.0;
        for &w in sorted_w {
            acc += w;
            prefix.push(acc);
        }
        prefix
    }

    fn densities(&self, sorted_w: &[f64]) -> Vec<f64> {
        let n = self.n();
        (0..self.grid_size)
            .map(|k| {
                let row = &self.kernel[k * n..(k + 1) * n];
                row.iter().zip(sorted_w).map(|(k, w)| k * w).sum()
            })
            .collect()
    }

    fn value(&self, sorted_w: &[f64]) -> f64 {
        self.evaluate(sorted_w, false).0
    }

    fn value_and_grad(&self, sorted_w: &[f64]) -> (f64, Vec<f64>) {
        let (v, g) = self.evaluate(sorted_w, true);
        (v, g.unwrap())
    }

    fn evaluate(&self, sorted_w: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
        let n = self.n();
        let prefix = self.prefix(sorted_w);
        let n_seg = self.seg_len.len();

        match (self.flavor, self.estimator) {
            (BoundFlavor::W1, _) => {
                let rho = self.densities(sorted_w);
                let (mut max_rho, mut argmax) = (f64::NEG_INFINITY, 0);
                for (k, &r) in rho.iter().enumerate() {
                    if r > max_rho {
                        max_rho = r;
                        argmax = k;
                    }
                }
                let mut w1_up = 0.0;
                let mut w1_lo = 0.0;
                // Per-segment suffix weights for the CDF gradient.
                let mut c = vec![0.0; n_seg];
                for j in 0..n_seg {
                    let fp = prefix[self.cal_counts[j]];
                    let d_up = fp - self.f_up[j];
                    let d_lo = fp - self.f_lo[j];
                    w1_up += d_up.abs() * self.seg_len[j];
                    w1_lo += d_lo.abs() * self.seg_len[j];
                    if want_grad {
                        c[j] = self.seg_len[j] * (sign(d_up) + sign(d_lo));
                    }
                }
                let paren = w1_up + w1_lo + self.mean_gap;
                let value = (0.5 * max_rho * paren).max(0.0);
                if !want_grad {
                    return (value, None);
                }
                let suffix = suffix_sums(&c);
                let peak_row = &self.kernel[argmax * n..(argmax + 1) * n];
                let grad: Vec<f64> = (0..n)
                    .map(|i| {
                        0.5 * (peak_row[i] * paren
                            + max_rho * suffix[self.point_of_score[i]])
                    })
                    .collect();
                (value, Some(grad))
            }
            (BoundFlavor::WeightedCdf, Estimator::Grid) => {
                let rho = self.densities(sorted_w);
                let mut g_seg = vec![0.0; n_seg];
                let mut s_seg = vec![0.0; n_seg];
                for j in 0..n_seg {
                    let fp = prefix[self.cal_counts[j]];
                    let d_up = fp - self.f_up[j];
                    let d_lo = fp - self.f_lo[j];
                    g_seg[j] = d_up.abs() + d_lo.abs() + (self.f_lo[j] - self.f_up[j]);
                    s_seg[j] = sign(d_up) + sign(d_lo);
                }
                let mut value_acc = 0.0;
                let mut cell_integral = vec![0.0; self.grid_size];
                let mut omega = vec![0.0; n_seg];
                for &(k, j, len) in &self.overlaps {
                    let (k, j) = (k as usize, j as usize);
                    let contrib = g_seg[j] * len;
                    value_acc += rho[k] * contrib;
                    if want_grad {
                        cell_integral[k] += contrib;
                        omega[j] += rho[k] * len;
                    }
                }
                let value = (0.5 * value_acc).max(0.0);
                if !want_grad {
                    return (value, None);
                }
                // Density term: the objective is linear in rho, so each
                // weight picks up its kernel column against the per-cell
                // CDF integrals.
                let mut density_term = vec![0.0; n];
                for (k, &ik) in cell_integral.iter().enumerate() {
                    if ik == 0.0 {
                        continue;
                    }
                    let row = &self.kernel[k * n..(k + 1) * n];
                    for i in 0..n {
                        density_term[i] += ik * row[i];
                    }
                }
                let c: Vec<f64> = (0..n_seg).map(|j| omega[j] * s_seg[j]).collect();
                let suffix = suffix_sums(&c);
                let grad: Vec<f64> = (0..n)
                    .map(|i| {
                        0.5 * (density_term[i] + suffix[self.point_of_score[i]])
                    })
                    .collect();
                (value, Some(grad))
            }
            (BoundFlavor::WeightedCdf, Estimator::Expectation) => {
                // Evaluate the integrand at the calibration atoms themselves.
                let g_at = |i: usize| {
                    let j = self.point_of_score[i];
                    let fp = prefix[self.cal_counts[j]];
                    let d_up = fp - self.f_up[j];
                    let d_lo = fp - self.f_lo[j];
                    (
                        d_up.abs() + d_lo.abs() + (self.f_lo[j] - self.f_up[j]),
                        sign(d_up) + sign(d_lo),
                    )
                };
                let mut value = 0.0;
                let mut e = vec![0.0; n];
                let mut g_i = vec![0.0; n];
                for i in 0..n {
                    let (g, s) = g_at(i);
                    value += sorted_w[i] * g;
                    g_i[i] = g;
                    e[i] = sorted_w[i] * s;
                }
                let value = (0.5 * value).max(0.0);
                if !want_grad {
                    return (value, None);
                }
                let suffix = suffix_sums(&e);
                let grad: Vec<f64> = (0..n)
                    .map(|i| 0.5 * (g_i[i] + suffix[self.tie_start[i]]))
                    .collect();
                (value, Some(grad))
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `suffix[j] = Σ_{j' ≥ j} values[j']`, with one extra trailing zero so an
/// index of `values.len()` is a valid empty suffix.
fn suffix_sums(values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; values.len() + 1];
    for j in (0..values.len()).rev() {
        out[j] = out[j + 1] + values[j];
    }
    out
}
