//! Posterior inference for the measure sequence G_1..G_M.
//!
//! A bootstrap particle filter draws the measures phase by phase, proposing
//! from the (constrained) prior and weighting by the multinomial likelihood
//! of the phase's counts. The filter sits inside a Gibbs sweep that also
//! refreshes the global measure, the atoms, the assignments and the two
//! concentration parameters.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraint::{sample_constrained_child, sample_floored_child, symmetric_kl, ConstrainedConfig};
use crate::error::{Error, Result};
use crate::measures::{
    atom_posterior, floor_and_normalize, gem_posterior, sample_gem, AtomTable, CountsRow, DiscreteMeasure,
    StickVariables,
};
use crate::sampling::{
    effective_sample_size, normalized_weights, resample, sample_beta, sample_gamma, sample_log_categorical,
    ResampleScheme, RngStream,
};

/// `sum_i m_i ln beta_i`: the log-probability of a phase's counts under a
/// candidate measure, up to the multinomial coefficient.
pub fn proposal_log_weight(measure: &DiscreteMeasure, counts: &CountsRow) -> Result<f64> {
    if measure.len() != counts.len() {
        return Err(Error::Dimension {
            expected: measure.len(),
            got: counts.len(),
        });
    }
    Ok(counts
        .as_slice()
        .iter()
        .zip(measure.weights())
        .filter(|(m, _)| **m > 0)
        .map(|(&m, &w)| m as f64 * w.ln())
        .sum())
}

#[derive(Debug)]
struct PathNode {
    measure: DiscreteMeasure,
    sticks: StickVariables,
    parent: Option<Arc<PathNode>>,
}

/// One particle: a shared-tail path of measures plus its log-weight.
///
/// Resampling only clones the `Arc` at the tip, so surviving particles share
/// their common ancestry.
#[derive(Debug, Clone)]
pub struct Particle {
    path: Option<Arc<PathNode>>,
    pub log_weight: f64,
}

impl Particle {
    fn root() -> Self {
        Self {
            path: None,
            log_weight: 0.0,
        }
    }

    fn nodes(&self) -> Vec<&PathNode> {
        let mut out = Vec::new();
        let mut cur = self.path.as_deref();
        while let Some(node) = cur {
            out.push(node);
            cur = node.parent.as_deref();
        }
        out.reverse();
        out
    }

    /// Whether the particle's last proposal was infeasible.
    pub fn is_dead(&self) -> bool {
        self.log_weight == f64::NEG_INFINITY
    }

    pub fn trajectory(&self) -> Vec<DiscreteMeasure> {
        self.nodes().into_iter().map(|n| n.measure.clone()).collect()
    }

    pub fn stick_history(&self) -> Vec<StickVariables> {
        self.nodes().into_iter().map(|n| n.sticks.clone()).collect()
    }

    pub fn current(&self) -> Option<&DiscreteMeasure> {
        self.path.as_deref().map(|n| &n.measure)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub particles: usize,
    /// KL bound for phases after the first; `f64::INFINITY` disables it.
    pub bound: f64,
    pub scheme: ResampleScheme,
    /// Resample only when ESS drops below this fraction of N. `None`
    /// resamples at every phase.
    pub ess_threshold: Option<f64>,
    pub constrained: ConstrainedConfig,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            particles: 1000,
            bound: 3.0,
            scheme: ResampleScheme::Systematic,
            ess_threshold: None,
            constrained: ConstrainedConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    /// One trajectory drawn from the final particle cloud.
    pub trajectory: Vec<DiscreteMeasure>,
    pub sticks: Vec<StickVariables>,
    /// Effective sample size of the weights at each phase, before resampling.
    pub ess: Vec<f64>,
    /// Proposals that exhausted their retries, per phase.
    pub infeasible: Vec<usize>,
    pub cloud: Vec<Particle>,
}

impl FilterOutput {
    /// Weighted mean of the phase-`phase` weights across the final cloud.
    pub fn cloud_mean(&self, phase: usize) -> Result<Vec<f64>> {
        let logw: Vec<f64> = self.cloud.iter().map(|p| p.log_weight).collect();
        let w = normalized_weights(&logw)?;
        let mut mean: Vec<f64> = Vec::new();
        for (p, wi) in self.cloud.iter().zip(w) {
            if wi == 0.0 {
                continue;
            }
            let nodes = p.nodes();
            let m = nodes[phase].measure.weights();
            if mean.is_empty() {
                mean = vec![0.0; m.len()];
            }
            mean.iter_mut().zip(m).for_each(|(a, b)| *a += wi * b);
        }
        Ok(mean)
    }
}

/// Sequential importance resampling over the measure sequence.
///
/// Phase 1 proposes unconstrained children of `g0`; later phases propose
/// constrained children of each particle's previous measure. Every phase is
/// weighted by its counts. Output is identical for a given stream regardless
/// of the thread pool, since each particle draws from its own substream.
pub fn particle_filter_measures(
    g0: &DiscreteMeasure,
    alpha: f64,
    counts: &[CountsRow],
    cfg: &FilterConfig,
    rng: &mut RngStream,
) -> Result<FilterOutput> {
    let n = cfg.particles;
    if n == 0 {
        return Err(Error::Parameter("need at least one particle".into()));
    }
    if counts.is_empty() {
        return Err(Error::Parameter("need at least one phase".into()));
    }
    if let Some(row) = counts.iter().find(|c| c.len() != g0.len()) {
        return Err(Error::Dimension {
            expected: g0.len(),
            got: row.len(),
        });
    }
    if let Some(t) = cfg.ess_threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Parameter(format!("ESS threshold {t} is not a fraction")));
        }
    }

    let mut particles = vec![Particle::root(); n];
    let mut ess = Vec::with_capacity(counts.len());
    let mut infeasible = Vec::with_capacity(counts.len());
    for (phase, row) in counts.iter().enumerate() {
        let phase_rng = RngStream::new(rand::RngCore::next_u64(rng), phase as u64);
        let proposals = particles
            .par_iter()
            .enumerate()
            .map(|(i, parent)| {
                if parent.is_dead() {
                    return Ok((None, f64::NEG_INFINITY));
                }
                let mut r = phase_rng.substream(i as u64);
                let draw = match parent.current() {
                    None => sample_floored_child(g0, alpha, &cfg.constrained, &mut r),
                    Some(prev) => sample_constrained_child(g0, prev, alpha, cfg.bound, &cfg.constrained, &mut r),
                };
                match draw {
                    Ok(d) => {
                        let lw = proposal_log_weight(&d.measure, row)?;
                        let node = PathNode {
                            measure: d.measure,
                            sticks: d.sticks,
                            parent: parent.path.clone(),
                        };
                        Ok((Some(Arc::new(node)), parent.log_weight + lw))
                    }
                    Err(Error::Infeasible { .. }) => Ok((None, f64::NEG_INFINITY)),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>>>()?;

        infeasible.push(proposals.iter().filter(|(node, _)| node.is_none()).count());
        let logw: Vec<f64> = proposals.iter().map(|(_, w)| *w).collect();
        if logw.iter().all(|w| *w == f64::NEG_INFINITY) {
            return Err(Error::FilterCollapse { phase: phase + 1 });
        }
        let phase_ess = effective_sample_size(&logw);
        ess.push(phase_ess);
        let resample_now = cfg.ess_threshold.is_none_or(|t| phase_ess < t * n as f64);
        particles = if resample_now {
            resample(cfg.scheme, &logw, rng)?
                .into_iter()
                .map(|j| Particle {
                    path: proposals[j].0.clone(),
                    log_weight: 0.0,
                })
                .collect()
        } else {
            proposals
                .into_iter()
                .map(|(path, log_weight)| Particle { path, log_weight })
                .collect()
        };
    }

    let logw: Vec<f64> = particles.iter().map(|p| p.log_weight).collect();
    let chosen = &particles[sample_log_categorical(&logw, rng)?];
    Ok(FilterOutput {
        trajectory: chosen.trajectory(),
        sticks: chosen.stick_history(),
        ess,
        infeasible,
        cloud: particles,
    })
}

/// One auxiliary-variable update of a DP concentration parameter under a
/// Gamma(a, b) prior, given `k` occupied atoms and `m` observations.
/// Leaves `p(c | k, m) ∝ c^(a+k-2) e^(-b c) (c + m) B(c + 1, m)` invariant.
pub fn sample_concentration(current: f64, a: f64, b: f64, k: usize, m: usize, rng: &mut RngStream) -> Result<f64> {
    if !(current > 0.0) || !(a > 0.0) || !(b > 0.0) {
        return Err(Error::Parameter(format!(
            "concentration {current} and prior ({a}, {b}) must be positive"
        )));
    }
    if k == 0 || m == 0 {
        return Err(Error::Parameter(format!("need k >= 1 and m >= 1, got k={k}, m={m}")));
    }
    let u = sample_beta(current + 1.0, m as f64, rng)?;
    let rate = b - u.max(f64::MIN_POSITIVE).ln();
    let shape = a + k as f64;
    let odds = (shape - 1.0) / (m as f64 * rate);
    let pick_upper = rng.open01() < odds / (1.0 + odds);
    let draw = sample_gamma(if pick_upper { shape } else { shape - 1.0 }, rate, rng)?;
    Ok(draw.max(f64::MIN_POSITIVE))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperPriors {
    pub a_gamma: f64,
    pub b_gamma: f64,
    pub a_alpha: f64,
    pub b_alpha: f64,
}

impl Default for HyperPriors {
    fn default() -> Self {
        Self {
            a_gamma: 1.0,
            b_gamma: 1.0,
            a_alpha: 1.0,
            b_alpha: 1.0,
        }
    }
}

impl HyperPriors {
    pub fn validate(&self) -> Result<()> {
        let all = [self.a_gamma, self.b_gamma, self.a_alpha, self.b_alpha];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Parameter(format!("hyperprior values must be positive: {all:?}")))
        }
    }
}

/// What each phase observed.
#[derive(Debug, Clone, PartialEq)]
pub enum Observations {
    /// Atom indices observed directly; assignments stay fixed to them.
    Labels(Vec<Vec<usize>>),
    /// Feature vectors explained by Gaussian atoms.
    Features(Vec<Vec<Vec<f64>>>),
}

impl Observations {
    pub fn phases(&self) -> usize {
        match self {
            Observations::Labels(l) => l.len(),
            Observations::Features(f) => f.len(),
        }
    }

    pub fn total(&self) -> usize {
        match self {
            Observations::Labels(l) => l.iter().map(Vec::len).sum(),
            Observations::Features(f) => f.iter().map(Vec::len).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    pub g0: DiscreteMeasure,
    pub atoms: AtomTable,
    pub measures: Vec<DiscreteMeasure>,
    pub assignments: Vec<Vec<usize>>,
    pub counts: Vec<CountsRow>,
    pub gamma: f64,
    pub alpha: f64,
}

fn counts_from_assignments(assignments: &[Vec<usize>], k: usize) -> Result<Vec<CountsRow>> {
    assignments.iter().map(|z| CountsRow::from_labels(z, k)).collect()
}

impl GibbsState {
    /// Prior draws for the measures; atoms start at randomly chosen data
    /// points (feature data) or are left dimensionless (label data).
    pub fn initialize(
        data: &Observations,
        k: usize,
        gamma: f64,
        alpha: f64,
        likelihood_variance: f64,
        prior_variance: f64,
        cfg: &ConstrainedConfig,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if data.phases() == 0 {
            return Err(Error::Parameter("no phases to fit".into()));
        }
        let g0 = floor_and_normalize(&sample_gem(gamma, k, rng)?.1, cfg.epsilon)?;
        let measures = (0..data.phases())
            .map(|_| Ok(sample_floored_child(&g0, alpha, cfg, rng)?.measure))
            .collect::<Result<Vec<_>>>()?;
        let atoms = match data {
            Observations::Labels(_) => AtomTable::new(vec![Vec::new(); k], Vec::new(), prior_variance, likelihood_variance)?,
            Observations::Features(f) => {
                let pooled: Vec<&Vec<f64>> = f.iter().flatten().collect();
                let dim = pooled.first().map(|x| x.len()).ok_or_else(|| Error::Parameter("no observations".into()))?;
                if let Some(bad) = pooled.iter().find(|x| x.len() != dim) {
                    return Err(Error::Dimension {
                        expected: dim,
                        got: bad.len(),
                    });
                }
                let phi = (0..k)
                    .map(|_| pooled[(rng.open01() * pooled.len() as f64) as usize % pooled.len()].clone())
                    .collect();
                AtomTable::new(phi, vec![0.0; dim], prior_variance, likelihood_variance)?
            }
        };
        let mut state = Self {
            g0,
            atoms,
            measures,
            assignments: Vec::new(),
            counts: Vec::new(),
            gamma,
            alpha,
        };
        let (assignments, counts) = update_assignments(&state, data, rng)?;
        state.assignments = assignments;
        state.counts = counts;
        Ok(state)
    }

    pub fn pooled_counts(&self) -> CountsRow {
        let mut pooled = CountsRow::zeros(self.g0.len());
        for row in &self.counts {
            pooled.0.iter_mut().zip(row.as_slice()).for_each(|(a, b)| *a += b);
        }
        pooled
    }

    /// Symmetric KL between each pair of successive measures.
    pub fn successive_kl(&self) -> Result<Vec<f64>> {
        self.measures.windows(2).map(|w| symmetric_kl(&w[0], &w[1])).collect()
    }
}

/// Draw every assignment from `p(z = i) ∝ beta_{j,i} F(x | phi_i)` and
/// recount. Label data keeps its labels.
pub fn update_assignments(
    state: &GibbsState,
    data: &Observations,
    rng: &mut RngStream,
) -> Result<(Vec<Vec<usize>>, Vec<CountsRow>)> {
    let k = state.g0.len();
    if data.phases() != state.measures.len() {
        return Err(Error::Dimension {
            expected: state.measures.len(),
            got: data.phases(),
        });
    }
    let assignments = match data {
        Observations::Labels(labels) => labels.clone(),
        Observations::Features(features) => {
            let mut logp = vec![0.0; k];
            let mut out = Vec::with_capacity(features.len());
            for (measure, phase) in state.measures.iter().zip(features) {
                let log_beta: Vec<f64> = measure.weights().iter().map(|w| w.ln()).collect();
                let mut z = Vec::with_capacity(phase.len());
                for x in phase {
                    for (i, lp) in logp.iter_mut().enumerate() {
                        *lp = log_beta[i] + state.atoms.log_likelihood_kernel(i, x);
                    }
                    z.push(sample_log_categorical(&logp, rng)?);
                }
                out.push(z);
            }
            out
        }
    };
    let counts = counts_from_assignments(&assignments, k)?;
    Ok((assignments, counts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GibbsConfig {
    pub filter: FilterConfig,
    pub priors: HyperPriors,
    /// Resample gamma and alpha each sweep.
    pub update_concentrations: bool,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self {
            filter: FilterConfig::default(),
            priors: HyperPriors::default(),
            update_concentrations: true,
        }
    }
}

/// Per-sweep diagnostics, written one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepDiagnostics {
    pub sweep: usize,
    pub ess: Vec<f64>,
    pub gamma: f64,
    pub alpha: f64,
    pub successive_kl: Vec<f64>,
    pub infeasible: Vec<usize>,
}

impl SweepDiagnostics {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// One full sweep: global measure, atoms, measure sequence, assignments,
/// then the concentrations.
pub fn gibbs_sweep(
    state: &mut GibbsState,
    data: &Observations,
    cfg: &GibbsConfig,
    sweep: usize,
    rng: &mut RngStream,
) -> Result<SweepDiagnostics> {
    cfg.priors.validate()?;
    let k = state.g0.len();
    let eps = cfg.filter.constrained.epsilon;

    let pooled = state.pooled_counts();
    state.g0 = floor_and_normalize(&gem_posterior(&pooled, state.gamma, k, rng)?.1, eps)?;

    if let Observations::Features(features) = data {
        let mut members: Vec<Vec<&[f64]>> = vec![Vec::new(); k];
        for (phase, z) in features.iter().zip(&state.assignments) {
            for (x, &i) in phase.iter().zip(z) {
                members[i].push(x);
            }
        }
        for (i, obs) in members.iter().enumerate() {
            state.atoms.phi[i] = atom_posterior(obs, &state.atoms, i, rng)?;
        }
    }

    let filtered = particle_filter_measures(&state.g0, state.alpha, &state.counts, &cfg.filter, rng)?;
    state.measures = filtered.trajectory;

    let (assignments, counts) = update_assignments(state, data, rng)?;
    state.assignments = assignments;
    state.counts = counts;

    if cfg.update_concentrations {
        let pooled = state.pooled_counts();
        let occupied = pooled.as_slice().iter().filter(|c| **c > 0).count();
        let total = pooled.total() as usize;
        if occupied > 0 {
            let p = &cfg.priors;
            state.gamma = sample_concentration(state.gamma, p.a_gamma, p.b_gamma, occupied, total, rng)?;
            state.alpha = sample_concentration(state.alpha, p.a_alpha, p.b_alpha, occupied, total, rng)?;
        }
    }

    Ok(SweepDiagnostics {
        sweep,
        ess: filtered.ess,
        gamma: state.gamma,
        alpha: state.alpha,
        successive_kl: state.successive_kl()?,
        infeasible: filtered.infeasible,
    })
}
