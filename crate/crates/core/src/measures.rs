//! Truncated stick-breaking measures: the shared base measure, its children,
//! conjugate posterior updates, and the epsilon floor applied before any
//! divergence is computed.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{sample_beta, RngStream};

/// Beta shapes below this are clamped; the sticks they drive carry
/// negligible mass.
pub const MIN_STICK_SHAPE: f64 = 1e-10;

/// Tolerance on `sum(weights) == 1`.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// A probability vector over K atoms. Represents both the base measure and
/// every per-phase measure; children share the base's `atom_ids`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    weights: Vec<f64>,
    atom_ids: Vec<usize>,
}

impl DiscreteMeasure {
    pub fn new(weights: Vec<f64>, atom_ids: Vec<usize>) -> Result<Self> {
        if weights.len() != atom_ids.len() {
            return Err(Error::Dimension {
                expected: weights.len(),
                got: atom_ids.len(),
            });
        }
        if weights.is_empty() {
            return Err(Error::Parameter("a measure needs at least one atom".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::Parameter(format!("weight {w} is not a finite non-negative number")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::Parameter(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { weights, atom_ids })
    }

    /// Measure over atoms `0..weights.len()`.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let ids = (0..weights.len()).collect();
        Self::new(weights, ids)
    }

    /// Uniform measure over K atoms.
    pub fn uniform(k: usize) -> Self {
        Self {
            weights: vec![1.0 / k as f64; k],
            atom_ids: (0..k).collect(),
        }
    }

    pub(crate) fn from_parts_unchecked(weights: Vec<f64>, atom_ids: Vec<usize>) -> Self {
        debug_assert_eq!(weights.len(), atom_ids.len());
        Self { weights, atom_ids }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn atom_ids(&self) -> &[usize] {
        &self.atom_ids
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_floored(&self, epsilon: f64) -> bool {
        // Renormalization after flooring scales the floor by at most 1/(1+K*eps).
        let slack = 1.0 + self.len() as f64 * epsilon;
        self.weights.iter().all(|&w| w * slack >= epsilon * (1.0 - 1e-12))
    }

    /// One CSV row of K weights.
    pub fn to_csv_row(&self) -> String {
        self.weights
            .iter()
            .map(|w| format!("{w:e}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn total_variation(&self, other: &DiscreteMeasure) -> f64 {
        0.5 * self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// The K-1 stick fractions behind a truncated stick-breaking measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StickVariables(Vec<f64>);

impl StickVariables {
    pub fn new(sticks: Vec<f64>) -> Result<Self> {
        if let Some(s) = sticks.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
            return Err(Error::Parameter(format!("stick {s} is not inside (0, 1)")));
        }
        Ok(Self(sticks))
    }

    pub(crate) fn from_vec_unchecked(sticks: Vec<f64>) -> Self {
        Self(sticks)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Observations per atom within one phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountsRow(pub Vec<u64>);

impl CountsRow {
    pub fn zeros(k: usize) -> Self {
        Self(vec![0; k])
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    pub fn from_labels(labels: &[usize], k: usize) -> Result<Self> {
        let mut m = vec![0u64; k];
        for &z in labels {
            *m.get_mut(z).ok_or_else(|| Error::Parameter(format!("label {z} exceeds truncation {k}")))? += 1;
        }
        Ok(Self(m))
    }
}

/// Gaussian atom locations with an isotropic Gaussian prior H and a
/// fixed-variance Gaussian likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomTable {
    pub phi: Vec<Vec<f64>>,
    pub prior_mean: Vec<f64>,
    pub prior_variance: f64,
    pub likelihood_variance: f64,
}

impl AtomTable {
    pub fn new(phi: Vec<Vec<f64>>, prior_mean: Vec<f64>, prior_variance: f64, likelihood_variance: f64) -> Result<Self> {
        if !(prior_variance > 0.0) || !(likelihood_variance > 0.0) {
            return Err(Error::Parameter("atom variances must be positive".into()));
        }
        let d = prior_mean.len();
        if let Some(bad) = phi.iter().find(|p| p.len() != d) {
            return Err(Error::Dimension {
                expected: d,
                got: bad.len(),
            });
        }
        Ok(Self {
            phi,
            prior_mean,
            prior_variance,
            likelihood_variance,
        })
    }

    /// K atoms drawn from the prior.
    pub fn from_prior(k: usize, prior_mean: Vec<f64>, prior_variance: f64, likelihood_variance: f64, rng: &mut RngStream) -> Result<Self> {
        let sd = prior_variance.sqrt();
        let phi = (0..k)
            .map(|_| {
                prior_mean
                    .iter()
                    .map(|m| m + sd * Distribution::<f64>::sample(&StandardNormal, rng))
                    .collect::<Vec<f64>>()
            })
            .collect();
        Self::new(phi, prior_mean, prior_variance, likelihood_variance)
    }

    pub fn dim(&self) -> usize {
        self.prior_mean.len()
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    /// `ln F(x | phi_i)` up to the constant shared by every atom.
    pub fn log_likelihood_kernel(&self, i: usize, x: &[f64]) -> f64 {
        let sq: f64 = self.phi[i].iter().zip(x).map(|(m, v)| (v - m) * (v - m)).sum();
        -0.5 * sq / self.likelihood_variance
    }
}

/// `w_i = s_i * prod_{l<i}(1 - s_l)` for i < K, and the last weight is the
/// leftover stick `prod_l (1 - s_l)`.
pub fn sticks_to_weights(sticks: &StickVariables) -> Vec<f64> {
    let mut weights = Vec::with_capacity(sticks.len() + 1);
    let mut remaining = 1.0;
    for &s in sticks.as_slice() {
        weights.push(s * remaining);
        remaining *= 1.0 - s;
    }
    weights.push(remaining);
    weights
}

fn measure_from_sticks(sticks: StickVariables, atom_ids: Vec<usize>) -> (StickVariables, DiscreteMeasure) {
    let weights = sticks_to_weights(&sticks);
    (sticks, DiscreteMeasure::from_parts_unchecked(weights, atom_ids))
}

fn check_truncation(k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::Parameter(format!("truncation level must be at least 2, got {k}")));
    }
    Ok(())
}

/// GEM(gamma) truncated at K atoms.
pub fn sample_gem(gamma: f64, k: usize, rng: &mut RngStream) -> Result<(StickVariables, DiscreteMeasure)> {
    check_truncation(k)?;
    let sticks = (0..k - 1)
        .map(|_| sample_beta(1.0, gamma, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(measure_from_sticks(StickVariables(sticks), (0..k).collect()))
}

/// Beta shapes `(alpha * pi_i, alpha * (1 - sum_{l<=i} pi_l))` for the K-1
/// sticks of a child of `base`, clamped below at [`MIN_STICK_SHAPE`].
pub fn child_stick_shapes(base: &DiscreteMeasure, alpha: f64) -> Result<Vec<(f64, f64)>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Parameter(format!("alpha must be positive, got {alpha}")));
    }
    let w = base.weights();
    let k = w.len();
    // Tail sums directly rather than 1 - prefix, which cancels at the tail.
    let mut tail = vec![0.0; k + 1];
    for i in (0..k).rev() {
        tail[i] = tail[i + 1] + w[i];
    }
    Ok((0..k.saturating_sub(1))
        .map(|i| {
            (
                (alpha * w[i]).max(MIN_STICK_SHAPE),
                (alpha * tail[i + 1]).max(MIN_STICK_SHAPE),
            )
        })
        .collect())
}

/// An unconstrained child G_j ~ DP(alpha, G_0) sharing the base's atoms.
pub fn sample_child_measure(base: &DiscreteMeasure, alpha: f64, rng: &mut RngStream) -> Result<(StickVariables, DiscreteMeasure)> {
    check_truncation(base.len())?;
    let shapes = child_stick_shapes(base, alpha)?;
    let sticks = shapes
        .iter()
        .map(|&(a, b)| sample_beta(a, b, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(measure_from_sticks(StickVariables(sticks), base.atom_ids().to_vec()))
}

/// Posterior of a truncated GEM(gamma) given per-atom counts:
/// stick i ~ Beta(1 + m_i, gamma + sum_{l>i} m_l).
pub fn gem_posterior(counts: &CountsRow, gamma: f64, k: usize, rng: &mut RngStream) -> Result<(StickVariables, DiscreteMeasure)> {
    check_truncation(k)?;
    if counts.len() != k {
        return Err(Error::Dimension {
            expected: k,
            got: counts.len(),
        });
    }
    let m = counts.as_slice();
    let mut after = vec![0u64; k + 1];
    for i in (0..k).rev() {
        after[i] = after[i + 1] + m[i];
    }
    let sticks = (0..k - 1)
        .map(|i| sample_beta(1.0 + m[i] as f64, gamma + after[i + 1] as f64, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(measure_from_sticks(StickVariables(sticks), (0..k).collect()))
}

/// Conjugate posterior of one atom location: returns `(mean, variance)` of
/// the isotropic Gaussian posterior given the observations assigned to it.
pub fn atom_posterior_params(observations: &[&[f64]], table: &AtomTable) -> Result<(Vec<f64>, f64)> {
    let d = table.dim();
    let mut sum = vec![0.0; d];
    for x in observations {
        if x.len() != d {
            return Err(Error::Dimension { expected: d, got: x.len() });
        }
        sum.iter_mut().zip(x.iter()).for_each(|(s, v)| *s += v);
    }
    let n = observations.len() as f64;
    let precision = 1.0 / table.prior_variance + n / table.likelihood_variance;
    let variance = 1.0 / precision;
    let mean = table
        .prior_mean
        .iter()
        .zip(&sum)
        .map(|(m0, s)| variance * (m0 / table.prior_variance + s / table.likelihood_variance))
        .collect();
    Ok((mean, variance))
}

/// Draw a new location for atom `i` from its conjugate posterior.
pub fn atom_posterior(observations: &[&[f64]], table: &AtomTable, i: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    if i >= table.len() {
        return Err(Error::Parameter(format!("atom index {i} out of range {}", table.len())));
    }
    let (mean, variance) = atom_posterior_params(observations, table)?;
    let sd = variance.sqrt();
    Ok(mean
        .into_iter()
        .map(|m| m + sd * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect())
}

/// Raise every weight below `epsilon` to exactly `epsilon`, leave the rest
/// alone, then renormalize by the common sum.
pub fn floor_and_normalize(m: &DiscreteMeasure, epsilon: f64) -> Result<DiscreteMeasure> {
    if !(epsilon > 0.0) || epsilon * m.len() as f64 >= 1.0 {
        return Err(Error::Parameter(format!(
            "floor {epsilon} is infeasible for {} atoms (need 0 < eps * K < 1)",
            m.len()
        )));
    }
    if m.weights().iter().all(|&w| w >= epsilon) {
        return Ok(m.clone());
    }
    let mut w: Vec<f64> = m.weights().iter().map(|&x| x.max(epsilon)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    Ok(DiscreteMeasure::from_parts_unchecked(w, m.atom_ids().to_vec()))
}
