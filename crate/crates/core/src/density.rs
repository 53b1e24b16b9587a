//! Weighted Gaussian kernel density estimation on `[0, 1]` with boundary
//! reflection.
//!
//! Scores live on the unit interval, so a plain Gaussian KDE leaks mass past
//! the boundaries. Reflecting each kernel about 0 and 1 folds that mass back:
//!
//! ```text
//! ρ(t) = Σ_i w_i [ φ_h(t - c_i) + φ_h(t + c_i) + φ_h(t - (2 - c_i)) ]
//! ```
//!
//! One reflection per boundary is enough for the bandwidths used here
//! (`h ≤ 0.2`); higher-order images are negligible. The density is linear in
//! the weights, which the reweighting gradients rely on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound on the bandwidth; also the fallback when the weighted
/// variance of the scores is zero.
pub const BANDWIDTH_FLOOR: f64 = 1e-3;

/// Number of grid points used by default wherever a grid is required.
pub const DEFAULT_GRID_SIZE: usize = 512;

const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// Weighted Gaussian KDE with reflection at 0 and 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeDensity {
    centers: Vec<f64>,
    weights: Vec<f64>,
    bandwidth: f64,
    /// True when the bandwidth came from Silverman's rule rather than the
    /// caller; surfaced in reports.
    bandwidth_from_rule: bool,
}

impl KdeDensity {
    /// Fit a KDE to `scores` with simplex `weights`.
    ///
    /// When `bandwidth` is omitted, Silverman's rule is used with the
    /// weighted standard deviation and the effective sample size
    /// `n_eff = 1 / Σ w_i²`:
    ///
    /// ```text
    /// h = 1.06 · σ̂_w · n_eff^(-1/5)
    /// ```
    ///
    /// floored at [`BANDWIDTH_FLOOR`] (zero-variance data falls back to the
    /// floor rather than erroring).
    pub fn fit(scores: &[f64], weights: &[f64], bandwidth: Option<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("KDE requires at least one score"));
        }
        if scores.len() != weights.len() {
            return Err(Error::invalid(format!(
                "KDE scores length {} does not match weights length {}",
                scores.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::invalid(format!("KDE center {bad} outside [0, 1]")));
        }
        let (h, from_rule) = match bandwidth {
            Some(h) => {
                if !(h > 0.0) {
                    return Err(Error::invalid(format!("bandwidth {h} must be > 0")));
                }
                (h, false)
            }
            None => (silverman_bandwidth(scores, weights), true),
        };
        Ok(Self {
            centers: scores.to_vec(),
            weights: weights.to_vec(),
            bandwidth: h,
            bandwidth_from_rule: from_rule,
        })
    }

    /// Fit with uniform weights.
    pub fn fit_uniform(scores: &[f64], bandwidth: Option<f64>) -> Result<Self> {
        let w = vec![1.0 / scores.len().max(1) as f64; scores.len()];
        Self::fit(scores, &w, bandwidth)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Whether the bandwidth came from Silverman's rule.
    pub fn bandwidth_from_rule(&self) -> bool {
        self.bandwidth_from_rule
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Reuse the fitted centers and bandwidth with new simplex weights.
    pub fn with_weights(&self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.centers.len() {
            return Err(Error::invalid(format!(
                "KDE weights length {} does not match centers length {}",
                weights.len(),
                self.centers.len()
            )));
        }
        Ok(Self {
            centers: self.centers.clone(),
            weights: weights.to_vec(),
            bandwidth: self.bandwidth,
            bandwidth_from_rule: self.bandwidth_from_rule,
        })
    }

    /// Summed reflected kernel of one unit-weight center evaluated at `t`.
    pub fn kernel_at(&self, center: f64, t: f64) -> f64 {
        let h = self.bandwidth;
        gaussian(t - center, h) + gaussian(t + center, h) + gaussian(t - (2.0 - center), h)
    }

    /// Density at `t ∈ [0, 1]`.
    pub fn density_at(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!(
                "density evaluation point {t} outside [0, 1]"
            )));
        }
        let mut acc = 0.0;
        for (&c, &w) in self.centers.iter().zip(&self.weights) {
            acc += w * self.kernel_at(c, t);
        }
        Ok(acc)
    }

    /// Maximum of the density over the evaluation grid of `grid_size`
    /// points, together with the argmax grid index (used as a subgradient
    /// anchor by the reweighting optimizer). Ties keep the first argmax.
    pub fn max_density(&self, grid_size: usize) -> Result<(f64, usize)> {
        if grid_size < 2 {
            return Err(Error::invalid(format!(
                "grid_size {grid_size} must be at least 2"
            )));
        }
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = 0;
        for (k, t) in grid_points(grid_size).enumerate() {
            let d = self.density_at(t)?;
            if d > best {
                best = d;
                best_idx = k;
            }
        }
        Ok((best, best_idx))
    }
}

/// Evaluation grid: `grid_size` equally spaced points `k / grid_size` on
/// `[0, 1)`. Left endpoints of an even partition keep 0, 0.5 and the other
/// dyadic hot-spots on the grid at every power-of-two size.
pub fn grid_points(grid_size: usize) -> impl Iterator<Item = f64> {
    (0..grid_size).map(move |k| k as f64 / grid_size as f64)
}

fn gaussian(u: f64, h: f64) -> f64 {
    let z = u / h;
    INV_SQRT_2PI / h * (-0.5 * z * z).exp()
}

fn silverman_bandwidth(scores: &[f64], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    let mean: f64 = scores.iter().zip(weights).map(|(s, w)| s * w).sum::<f64>() / total;
    let var: f64 = scores
        .iter()
        .zip(weights)
        .map(|(s, w)| w * (s - mean) * (s - mean))
        .sum::<f64>()
        / total;
    let normalized_sq: f64 = weights.iter().map(|w| (w / total) * (w / total)).sum();
    let n_eff = 1.0 / normalized_sq;
    let h = 1.06 * var.sqrt() * n_eff.powf(-0.2);
    h.max(BANDWIDTH_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn explicit_bandwidth_passthrough() {
        let scores: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let kde = KdeDensity::fit_uniform(&scores, Some(0.05)).unwrap();
        assert_eq!(kde.bandwidth(), 0.05);
        assert!(!kde.bandwidth_from_rule());
    }

    #[test]
    fn zero_variance_falls_back_to_floor() {
        let kde = KdeDensity::fit_uniform(&vec![0.5; 20], None).unwrap();
        assert_eq!(kde.bandwidth(), BANDWIDTH_FLOOR);
        assert!(kde.bandwidth_from_rule());
    }

    #[test]
    fn silverman_matches_uniform_sample_formula() {
        // For a large standard-uniform sample, sigma ~= sqrt(1/12) and
        // h ~= 1.06 * 0.2887 * 1000^(-0.2) ~= 0.0769.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let kde = KdeDensity::fit_uniform(&scores, None).unwrap();
        assert_abs_diff_eq!(kde.bandwidth(), 0.0768626302925087, epsilon = 4e-3);
    }

    #[test]
    fn reflection_doubles_boundary_mass() {
        let kde = KdeDensity::fit(&[0.0], &[1.0], Some(0.1)).unwrap();
        // phi_0.1(0) twice (kernel plus its reflection about 0) and a
        // negligible image about 1.
        assert_abs_diff_eq!(
            kde.density_at(0.0).unwrap(),
            7.978845608028654,
            epsilon = 1e-9
        );
    }

    #[test]
    fn symmetric_data_gives_symmetric_density() {
        let scores = [0.2, 0.35, 0.5, 0.65, 0.8];
        let kde = KdeDensity::fit_uniform(&scores, Some(0.07)).unwrap();
        for i in 0..=20 {
            let u = i as f64 * 0.02;
            let left = kde.density_at(0.5 - u).unwrap();
            let right = kde.density_at(0.5 + u).unwrap();
            assert_abs_diff_eq!(left, right, epsilon = 1e-12);
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let n = rng.random_range(3..40);
            let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
            let total: f64 = raw.iter().sum();
            let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
            let kde = KdeDensity::fit(&scores, &weights, None).unwrap();

            // 2048-interval trapezoid over [0, 1].
            let m = 2048;
            let mut integral = 0.0;
            for k in 0..=m {
                let t = k as f64 / m as f64;
                let d = kde.density_at(t).unwrap();
                assert!(d >= 0.0);
                let coeff = if k == 0 || k == m { 0.5 } else { 1.0 };
                integral += coeff * d / m as f64;
            }
            assert_abs_diff_eq!(integral, 1.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn density_linear_in_weights() {
        let scores = [0.1, 0.4, 0.7, 0.95];
        let w1 = [0.4, 0.3, 0.2, 0.1];
        let w2 = [0.1, 0.2, 0.3, 0.4];
        let a = 0.3;
        let mix: Vec<f64> = w1
            .iter()
            .zip(&w2)
            .map(|(x, y)| a * x + (1.0 - a) * y)
            .collect();
        let k1 = KdeDensity::fit(&scores, &w1, Some(0.05)).unwrap();
        let k2 = KdeDensity::fit(&scores, &w2, Some(0.05)).unwrap();
        let km = KdeDensity::fit(&scores, &mix, Some(0.05)).unwrap();
        for i in 0..=40 {
            let t = i as f64 / 40.0;
            let blended =
                a * k1.density_at(t).unwrap() + (1.0 - a) * k2.density_at(t).unwrap();
            assert_abs_diff_eq!(km.density_at(t).unwrap(), blended, epsilon = 1e-12);
        }
    }

    #[test]
    fn max_density_bounds() {
        // A density integrating to 1 on [0,1] has max >= 1.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scores: Vec<f64> = (0..200).map(|_| rng.random()).collect();
        let kde = KdeDensity::fit_uniform(&scores, None).unwrap();
        let (max, _) = kde.max_density(DEFAULT_GRID_SIZE).unwrap();
        assert!(max >= 1.0 - 1e-3);

        // Point mass at 0.5 with a narrow kernel peaks at phi_h(0).
        let peak = KdeDensity::fit(&[0.5], &[1.0], Some(0.01)).unwrap();
        let (max, idx) = peak.max_density(512).unwrap();
        assert_abs_diff_eq!(max, 39.894228040143275, epsilon = 1e-6);
        assert_eq!(idx, 256);
    }

    #[test]
    fn max_density_stable_under_grid_refinement() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let scores: Vec<f64> = (0..100).map(|_| rng.random()).collect();
        for h in [0.01, 0.05, 0.2] {
            let kde = KdeDensity::fit_uniform(&scores, Some(h)).unwrap();
            let (m512, _) = kde.max_density(512).unwrap();
            let (m1024, _) = kde.max_density(1024).unwrap();
            assert!((m512 - m1024).abs() <= 1e-2, "h={h}: {m512} vs {m1024}");
        }
        let peak = KdeDensity::fit(&[0.5], &[1.0], Some(0.01)).unwrap();
        let (m512, _) = peak.max_density(512).unwrap();
        let (m1024, _) = peak.max_density(1024).unwrap();
        assert!((m512 - m1024).abs() <= 1e-2);
    }

    #[test]
    fn max_density_dominates_grid_values() {
        let kde = KdeDensity::fit(&[0.2, 0.6], &[0.5, 0.5], Some(0.04)).unwrap();
        let (max, _) = kde.max_density(256).unwrap();
        for t in grid_points(256) {
            assert!(max >= kde.density_at(t).unwrap());
        }
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(KdeDensity::fit_uniform(&[], None).is_err());
        assert!(KdeDensity::fit(&[0.5], &[1.0], Some(0.0)).is_err());
        assert!(KdeDensity::fit(&[1.5], &[1.0], None).is_err());
        let kde = KdeDensity::fit(&[0.5], &[1.0], Some(0.1)).unwrap();
        assert!(kde.density_at(1.2).is_err());
        assert!(kde.max_density(1).is_err());
    }
}
