//! The experiments: pairwise KL comparison, bound sweep, a noisy time series
//! with posterior recovery, and the corpus pipeline (keyword similarity →
//! spectral embedding → phased fit).
//!
//! Every scenario is a pure function of its config: repeats draw from
//! per-repeat substreams of the config seed, so results do not depend on the
//! thread pool.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraint::{
    aggregated_kl_profile, sample_constrained_child, sample_floored_child, symmetric_kl, symmetric_kl_weights,
    ConstrainedConfig,
    CONSTRAINT_TOLERANCE,
};
use crate::error::{Error, Result};
use crate::inference::{gibbs_sweep, FilterConfig, GibbsConfig, GibbsState, HyperPriors, Observations, SweepDiagnostics};
use crate::measures::{floor_and_normalize, sample_gem, DiscreteMeasure};
use crate::sampling::{sample_gamma, sample_log_categorical, RngStream};
use crate::stats::{mean_se, quantile_sorted, welch_t_test};

/// Stream ids under the config seed, one per scenario, so scenarios sharing
/// a seed do not share randomness.
mod streams {
    pub const PAIR: u64 = 1;
    pub const SWEEP: u64 = 2;
    pub const TRUTH: u64 = 3;
    pub const RECOVERY: u64 = 4;
    pub const CORPUS: u64 = 5;
    pub const FIT: u64 = 6;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityKind {
    /// `|A ∩ B| / (|A| + |B|)`.
    #[default]
    OverlapSum,
    /// `|A ∩ B| / |A ∪ B|`.
    Jaccard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub bound: f64,
    pub truncation: usize,
    pub epsilon: f64,
    pub repeats: usize,
    pub phases: usize,
    pub obs_per_phase: usize,
    pub noise_shape: f64,
    pub noise_rate: f64,
    pub particles: usize,
    pub sweeps: usize,
    pub seed: u64,
    pub max_retries: usize,
    /// Gaussian likelihood variance for feature data.
    pub likelihood_variance: f64,
    /// Prior variance of atom locations for feature data.
    pub prior_variance: f64,
    pub hyper_priors: HyperPriors,
    /// Resample gamma and alpha each sweep; off keeps them at the values above.
    pub update_concentrations: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            gamma: 5.0,
            alpha: 1.0,
            bound: 3.0,
            truncation: 100,
            epsilon: 1e-5,
            repeats: 1000,
            phases: 20,
            obs_per_phase: 50,
            noise_shape: 0.03,
            noise_rate: 1.0,
            particles: 1000,
            sweeps: 100,
            seed: 42,
            max_retries: 10,
            likelihood_variance: 1.0,
            prior_variance: 1.0,
            hyper_priors: HyperPriors::default(),
            update_concentrations: false,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("gamma", self.gamma),
            ("alpha", self.alpha),
            ("bound", self.bound),
            ("epsilon", self.epsilon),
            ("noise-shape", self.noise_shape),
            ("noise-rate", self.noise_rate),
            ("likelihood-variance", self.likelihood_variance),
            ("prior-variance", self.prior_variance),
        ];
        if let Some((name, v)) = reals.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
        }
        let counts = [
            ("repeats", self.repeats),
            ("phases", self.phases),
            ("obs-per-phase", self.obs_per_phase),
            ("particles", self.particles),
            ("sweeps", self.sweeps),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Parameter(format!("{name} must be at least 1")));
        }
        if self.truncation < 2 {
            return Err(Error::Parameter("truncation must be at least 2".into()));
        }
        if self.epsilon * self.truncation as f64 >= 1.0 {
            return Err(Error::Parameter(format!(
                "epsilon {} times truncation {} must be below 1",
                self.epsilon, self.truncation
            )));
        }
        self.hyper_priors.validate()
    }

    pub fn constrained(&self) -> ConstrainedConfig {
        ConstrainedConfig {
            epsilon: self.epsilon,
            max_retries: self.max_retries,
            ..ConstrainedConfig::default()
        }
    }

    fn base_measure(&self, rng: &mut RngStream) -> Result<DiscreteMeasure> {
        floor_and_normalize(&sample_gem(self.gamma, self.truncation, rng)?.1, self.epsilon)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Pair comparison and bound sweep

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRecord {
    pub repeat: usize,
    /// `None` when the constrained draw exhausted its retries.
    pub kl_shdp: Option<f64>,
    pub kl_hdp: f64,
    pub skipped: bool,
    /// Largest aggregated KL of the constrained draw, re-checked post hoc.
    pub max_aggregated_kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairSummary {
    pub mean_shdp: f64,
    pub se_shdp: f64,
    pub mean_hdp: f64,
    pub se_hdp: f64,
    pub welch_t: f64,
    pub welch_p: f64,
    pub skipped: usize,
    /// Constrained draws whose post-hoc check exceeded B + 1e-8.
    pub violations: usize,
}

fn constrained_pair(
    cfg: &ScenarioConfig,
    bound: f64,
    rng: &mut RngStream,
) -> Result<(DiscreteMeasure, DiscreteMeasure, Option<(DiscreteMeasure, f64)>)> {
    let cc = cfg.constrained();
    let g0 = cfg.base_measure(rng)?;
    let g1 = sample_floored_child(&g0, cfg.alpha, &cc, rng)?.measure;
    let next = match sample_constrained_child(&g0, &g1, cfg.alpha, bound, &cc, rng) {
        Ok(d) => {
            let profile = aggregated_kl_profile(g1.weights(), d.measure.weights())?;
            let worst = profile.into_iter().fold(0.0, f64::max);
            Some((d.measure, worst))
        }
        Err(Error::Infeasible { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok((g0, g1, next))
}

/// Per repeat: G_0 ~ GEM(gamma), G_1 a child of G_0, then a constrained
/// successor G'_2 and an unconstrained G_2. Records KL(G_1, G'_2) and
/// KL(G_1, G_2).
pub fn run_pair_comparison(cfg: &ScenarioConfig) -> Result<Vec<PairRecord>> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed, streams::PAIR);
    (0..cfg.repeats)
        .into_par_iter()
        .map(|repeat| {
            let mut rng = root.substream(repeat as u64);
            let (g0, g1, next) = constrained_pair(cfg, cfg.bound, &mut rng)?;
            let g2 = sample_floored_child(&g0, cfg.alpha, &cfg.constrained(), &mut rng)?.measure;
            let kl_hdp = symmetric_kl(&g1, &g2)?;
            Ok(match next {
                Some((m, worst)) => PairRecord {
                    repeat,
                    kl_shdp: Some(symmetric_kl(&g1, &m)?),
                    kl_hdp,
                    skipped: false,
                    max_aggregated_kl: Some(worst),
                },
                None => PairRecord {
                    repeat,
                    kl_shdp: None,
                    kl_hdp,
                    skipped: true,
                    max_aggregated_kl: None,
                },
            })
        })
        .collect()
}

pub fn summarize_pairs(records: &[PairRecord], bound: f64) -> Result<PairSummary> {
    let shdp: Vec<f64> = records.iter().filter_map(|r| r.kl_shdp).collect();
    let hdp: Vec<f64> = records.iter().map(|r| r.kl_hdp).collect();
    let (mean_shdp, se_shdp) = mean_se(&shdp);
    let (mean_hdp, se_hdp) = mean_se(&hdp);
    let (welch_t, welch_p) = welch_t_test(&shdp, &hdp).unwrap_or((f64::NAN, f64::NAN));
    Ok(PairSummary {
        mean_shdp,
        se_shdp,
        mean_hdp,
        se_hdp,
        welch_t,
        welch_p,
        skipped: records.iter().filter(|r| r.skipped).count(),
        violations: records
            .iter()
            .filter(|r| r.max_aggregated_kl.is_some_and(|w| w > bound + CONSTRAINT_TOLERANCE))
            .count(),
    })
}

pub fn pair_csv(records: &[PairRecord]) -> String {
    let mut out = String::from("repeat,kl_shdp,kl_hdp,skipped\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{}", r.repeat, fmt_opt(r.kl_shdp), r.kl_hdp, r.skipped);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub bound: f64,
    pub mean: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub skipped: usize,
}

/// Constrained pairs at each bound. Repeat r uses the same substream at
/// every bound (common random numbers), so differences between rows come
/// from the bound rather than from different G_0, G_1 draws.
pub fn run_bound_sweep(cfg: &ScenarioConfig, bounds: &[f64]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if bounds.is_empty() {
        return Err(Error::Parameter("no bounds to sweep".into()));
    }
    if bounds.windows(2).any(|w| !(w[0] < w[1])) || !(bounds[0] > 0.0) {
        return Err(Error::Parameter("bounds must be positive and strictly increasing".into()));
    }
    let root = RngStream::new(cfg.seed, streams::SWEEP);
    bounds
        .iter()
        .map(|&bound| {
            let draws = (0..cfg.repeats)
                .into_par_iter()
                .map(|repeat| {
                    let mut rng = root.substream(repeat as u64);
                    let (_, g1, next) = constrained_pair(cfg, bound, &mut rng)?;
                    next.map(|(m, _)| symmetric_kl(&g1, &m)).transpose()
                })
                .collect::<Result<Vec<Option<f64>>>>()?;
            let mut kls: Vec<f64> = draws.iter().flatten().copied().collect();
            kls.sort_by(f64::total_cmp);
            Ok(SweepRow {
                bound,
                mean: mean_se(&kls).0,
                q25: quantile_sorted(&kls, 0.25),
                q50: quantile_sorted(&kls, 0.5),
                q75: quantile_sorted(&kls, 0.75),
                skipped: draws.len() - kls.len(),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("bound,mean,q25,q50,q75\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.bound, r.mean, r.q25, r.q50, r.q75);
    }
    out
}

/// `min, min + step, ...` up to and including `max` (within rounding).
pub fn bound_grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(min > 0.0) || !(step > 0.0) || !(max >= min) {
        return Err(Error::Parameter(format!(
            "bound grid needs 0 < min <= max and step > 0, got ({min}, {max}, {step})"
        )));
    }
    let n = ((max - min) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| min + i as f64 * step).collect())
}

// ---------------------------------------------------------------------------
// Time series

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeseriesTruth {
    pub g0: DiscreteMeasure,
    pub clean: Vec<DiscreteMeasure>,
    pub noisy: Vec<DiscreteMeasure>,
    /// Atom indices observed in each phase.
    pub observations: Vec<Vec<usize>>,
}

/// Clean measures chained under the bound, Gamma noise added to every weight
/// and renormalized, and observations drawn from the noisy measures.
pub fn generate_timeseries_truth(cfg: &ScenarioConfig) -> Result<TimeseriesTruth> {
    cfg.validate()?;
    let mut rng = RngStream::new(cfg.seed, streams::TRUTH);
    let cc = cfg.constrained();
    let g0 = cfg.base_measure(&mut rng)?;
    let mut clean = vec![sample_floored_child(&g0, cfg.alpha, &cc, &mut rng)?.measure];
    while clean.len() < cfg.phases {
        let prev = clean.last().expect("non-empty");
        let next = sample_constrained_child(&g0, prev, cfg.alpha, cfg.bound, &cc, &mut rng)?;
        clean.push(next.measure);
    }
    let noisy = clean
        .iter()
        .map(|m| {
            let raw = m
                .weights()
                .iter()
                .map(|w| Ok(w + sample_gamma(cfg.noise_shape, cfg.noise_rate, &mut rng)?))
                .collect::<Result<Vec<f64>>>()?;
            let total: f64 = raw.iter().sum();
            DiscreteMeasure::new(raw.iter().map(|w| w / total).collect(), m.atom_ids().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let observations = noisy
        .iter()
        .map(|m| {
            let logw: Vec<f64> = m.weights().iter().map(|w| w.ln()).collect();
            (0..cfg.obs_per_phase)
                .map(|_| sample_log_categorical(&logw, &mut rng))
                .collect::<Result<Vec<usize>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TimeseriesTruth {
        g0,
        clean,
        noisy,
        observations,
    })
}

/// The outcome of running the Gibbs sampler for one model.
#[derive(Debug, Clone)]
pub struct FitTrace {
    /// Snapshots from the retained (second) half of the sweeps.
    pub retained: Vec<GibbsState>,
    pub diagnostics: Vec<SweepDiagnostics>,
}

impl FitTrace {
    /// Posterior mean of each phase's weights over the retained sweeps.
    pub fn mean_measures(&self) -> Vec<Vec<f64>> {
        let n = self.retained.len() as f64;
        let first = &self.retained[0].measures;
        let mut acc: Vec<Vec<f64>> = first.iter().map(|m| vec![0.0; m.len()]).collect();
        for state in &self.retained {
            for (a, m) in acc.iter_mut().zip(&state.measures) {
                a.iter_mut().zip(m.weights()).for_each(|(x, w)| *x += w / n);
            }
        }
        acc
    }

    /// Per-phase successive KL of each retained sample, averaged over
    /// samples; entry j is KL(G_j, G_{j+1}).
    pub fn sample_successive_kl(&self) -> Result<Vec<f64>> {
        let n = self.retained.len() as f64;
        let mut acc = Vec::new();
        for state in &self.retained {
            let kl = state.successive_kl()?;
            if acc.is_empty() {
                acc = vec![0.0; kl.len()];
            }
            acc.iter_mut().zip(kl).for_each(|(a, k)| *a += k / n);
        }
        Ok(acc)
    }

    /// Successive KL between the posterior-mean measures; entry j is
    /// KL(mean G_j, mean G_{j+1}).
    pub fn mean_successive_kl(&self) -> Result<Vec<f64>> {
        self.mean_measures().windows(2).map(|w| symmetric_kl_weights(&w[0], &w[1])).collect()
    }

    pub fn mean_g0(&self) -> Vec<f64> {
        let n = self.retained.len() as f64;
        let mut acc = vec![0.0; self.retained[0].g0.len()];
        for s in &self.retained {
            acc.iter_mut().zip(s.g0.weights()).for_each(|(a, w)| *a += w / n);
        }
        acc
    }
}

/// Run `cfg.sweeps` Gibbs sweeps under the given bound and keep the second
/// half. Both models of a comparison are started from clones of the same
/// stream, so with a slack bound they coincide exactly.
pub fn fit_model(data: &Observations, cfg: &ScenarioConfig, bound: f64, rng: &RngStream) -> Result<FitTrace> {
    let mut rng = rng.clone();
    let cc = cfg.constrained();
    let mut state = GibbsState::initialize(
        data,
        cfg.truncation,
        cfg.gamma,
        cfg.alpha,
        cfg.likelihood_variance,
        cfg.prior_variance,
        &cc,
        &mut rng,
    )?;
    let gibbs = GibbsConfig {
        filter: FilterConfig {
            particles: cfg.particles,
            bound,
            constrained: cc,
            ..FilterConfig::default()
        },
        priors: cfg.hyper_priors,
        update_concentrations: cfg.update_concentrations,
    };
    let burn_in = cfg.sweeps / 2;
    let mut retained = Vec::with_capacity(cfg.sweeps - burn_in);
    let mut diagnostics = Vec::with_capacity(cfg.sweeps);
    for sweep in 0..cfg.sweeps {
        diagnostics.push(gibbs_sweep(&mut state, data, &gibbs, sweep, &mut rng)?);
        if sweep >= burn_in {
            retained.push(state.clone());
        }
    }
    Ok(FitTrace { retained, diagnostics })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeseriesRow {
    pub phase: usize,
    /// KL between the posterior means of G_{j-1} and G_j; empty at the
    /// first phase.
    pub succ_kl_shdp: Option<f64>,
    pub succ_kl_hdp: Option<f64>,
    /// KL between the clean truth and the posterior mean of G_j.
    pub dist_truth_shdp: f64,
    pub dist_truth_hdp: f64,
}

#[derive(Debug, Clone)]
pub struct TimeseriesRecovery {
    pub rows: Vec<TimeseriesRow>,
    pub shdp: FitTrace,
    pub hdp: FitTrace,
}

/// Fit the constrained model and the unconstrained one (same pipeline,
/// bound disabled) to the observations and compare them phase by phase,
/// using each model's posterior mean over retained sweeps as its estimate.
pub fn run_timeseries_recovery(truth: &TimeseriesTruth, cfg: &ScenarioConfig) -> Result<TimeseriesRecovery> {
    cfg.validate()?;
    if truth.observations.is_empty() {
        return Err(Error::Parameter("truth has no phases".into()));
    }
    let data = Observations::Labels(truth.observations.clone());
    let rng = RngStream::new(cfg.seed, streams::RECOVERY);
    let (shdp, hdp) = rayon::join(
        || fit_model(&data, cfg, cfg.bound, &rng),
        || fit_model(&data, cfg, f64::INFINITY, &rng),
    );
    let (shdp, hdp) = (shdp?, hdp?);
    let dist = |trace: &FitTrace| -> Result<Vec<f64>> {
        let means = trace.mean_measures();
        means.iter().zip(&truth.clean).map(|(m, t)| symmetric_kl_weights(t.weights(), m)).collect()
    };
    let (succ_s, succ_h) = (shdp.mean_successive_kl()?, hdp.mean_successive_kl()?);
    let (dist_s, dist_h) = (dist(&shdp)?, dist(&hdp)?);
    let rows = (0..truth.clean.len())
        .map(|j| TimeseriesRow {
            phase: j + 1,
            succ_kl_shdp: j.checked_sub(1).map(|i| succ_s[i]),
            succ_kl_hdp: j.checked_sub(1).map(|i| succ_h[i]),
            dist_truth_shdp: dist_s[j],
            dist_truth_hdp: dist_h[j],
        })
        .collect();
    Ok(TimeseriesRecovery { rows, shdp, hdp })
}

pub fn timeseries_csv(rows: &[TimeseriesRow]) -> String {
    let mut out = String::from("phase,succ_kl_shdp,succ_kl_hdp,dist_truth_shdp,dist_truth_hdp\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.phase,
            fmt_opt(r.succ_kl_shdp),
            fmt_opt(r.succ_kl_hdp),
            r.dist_truth_shdp,
            r.dist_truth_hdp
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Corpus

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDocument {
    pub phase: i64,
    pub keywords: BTreeSet<String>,
}

/// Parse a JSON array of `{"phase": int, "keywords": [string, ...]}`.
pub fn parse_corpus(text: &str) -> Result<Vec<CorpusDocument>> {
    let docs: Vec<CorpusDocument> = serde_json::from_str(text).map_err(|e| {
        Error::Corpus(format!("line {}, column {}: {e}", e.line(), e.column()))
    })?;
    if let Some(i) = docs.iter().position(|d| d.keywords.is_empty()) {
        return Err(Error::Corpus(format!("document {i}: field `keywords` is empty")));
    }
    Ok(docs)
}

pub fn similarity(a: &CorpusDocument, b: &CorpusDocument, kind: SimilarityKind) -> Result<f64> {
    if a.keywords.is_empty() || b.keywords.is_empty() {
        return Err(Error::Precondition("similarity needs non-empty keyword sets".into()));
    }
    let shared = a.keywords.intersection(&b.keywords).count() as f64;
    let denom = match kind {
        SimilarityKind::OverlapSum => (a.keywords.len() + b.keywords.len()) as f64,
        SimilarityKind::Jaccard => a.keywords.union(&b.keywords).count() as f64,
    };
    Ok(shared / denom)
}

/// Pairwise similarity matrix with a zero diagonal.
pub fn similarity_matrix(docs: &[CorpusDocument], kind: SimilarityKind) -> Result<DMatrix<f64>> {
    let n = docs.len();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let s = similarity(&docs[i], &docs[j], kind)?;
            w[(i, j)] = s;
            w[(j, i)] = s;
        }
    }
    Ok(w)
}

/// Connected components of the graph with an edge wherever `w > 0`.
pub fn connected_components(w: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = w.nrows();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                if !seen[j] && w[(i, j)] > 0.0 {
                    seen[j] = true;
                    comp.push(j);
                    queue.push_back(j);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// `I - D^{-1/2} W D^{-1/2}`.
pub fn normalized_laplacian(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = w.nrows();
    let degree: Vec<f64> = (0..n).map(|i| w.row(i).sum()).collect();
    if let Some(index) = degree.iter().position(|d| !(*d > 0.0)) {
        return Err(Error::ZeroDegree { index });
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let off = w[(i, j)] * inv_sqrt[i] * inv_sqrt[j];
        if i == j {
            1.0 - off
        } else {
            -off
        }
    }))
}

/// Eigenpairs of a symmetric matrix in ascending eigenvalue order, with
/// each eigenvector's sign fixed so its largest-magnitude entry is positive.
pub fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        vectors.set_column(col, &(v * sign));
    }
    (values, vectors)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddedCorpus {
    /// One row per document, `dim` columns, each with unit standard deviation.
    pub features: Vec<Vec<f64>>,
    pub phase_of_row: Vec<i64>,
    /// Full Laplacian spectrum, ascending.
    pub eigenvalues: Vec<f64>,
}

/// Spectral embedding: the `dim` eigenvectors of smallest eigenvalue of the
/// normalized Laplacian, each column scaled to unit (population) standard
/// deviation without centering.
pub fn spectral_embed(docs: &[CorpusDocument], dim: usize, kind: SimilarityKind) -> Result<EmbeddedCorpus> {
    if dim == 0 {
        return Err(Error::Parameter("embedding dimension must be at least 1".into()));
    }
    if docs.len() < dim + 1 {
        return Err(Error::Precondition(format!(
            "{} documents is too few for a {dim}-dimensional embedding",
            docs.len()
        )));
    }
    let w = similarity_matrix(docs, kind)?;
    let lap = normalized_laplacian(&w)?;
    let components = connected_components(&w);
    if components.len() > 1 {
        return Err(Error::Disconnected { components });
    }
    let (eigenvalues, vectors) = sorted_eigen(lap);
    let n = docs.len();
    let mut features = vec![vec![0.0; dim]; n];
    for c in 0..dim {
        let col = vectors.column(c);
        let mean = col.sum() / n as f64;
        let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        if !(sd > 0.0) {
            return Err(Error::Numerical(format!("eigenvector {c} is constant; cannot standardize")));
        }
        for (row, x) in features.iter_mut().zip(col.iter()) {
            row[c] = x / sd;
        }
    }
    Ok(EmbeddedCorpus {
        features,
        phase_of_row: docs.iter().map(|d| d.phase).collect(),
        eigenvalues,
    })
}

/// A stand-in corpus: topics with their own vocabularies whose popularity
/// drifts smoothly across phases, short-lived topics that appear in a
/// single phase, and one generic word per document. If the similarity graph
/// comes out disconnected, each stray component's first document also gets
/// the generic word of the main component's first document.
pub fn generate_synthetic_corpus(
    docs_per_phase: usize,
    phases: usize,
    first_phase: i64,
    seed: u64,
) -> Result<Vec<CorpusDocument>> {
    const TOPICS: usize = 16;
    const VOCAB: usize = 14;
    const GENERIC: [&str; 5] = ["model", "method", "analysis", "learning", "approach"];
    const BURST_RATE: f64 = 0.4;
    const BURSTS_PER_PHASE: usize = 2;
    if docs_per_phase == 0 || phases == 0 {
        return Err(Error::Parameter("corpus needs at least one phase and one document per phase".into()));
    }
    let mut rng = RngStream::new(seed, streams::CORPUS);
    let mut docs = Vec::with_capacity(docs_per_phase * phases);
    for p in 0..phases {
        let t = if phases > 1 { p as f64 / (phases - 1) as f64 } else { 0.0 };
        // Topic k peaks at time k / (TOPICS - 1).
        let log_pop: Vec<f64> = (0..TOPICS)
            .map(|k| {
                let centre = k as f64 / (TOPICS - 1) as f64;
                -((t - centre) / 0.15).powi(2)
            })
            .collect();
        for _ in 0..docs_per_phase {
            let topic = if rng.open01() < BURST_RATE {
                let b = (rng.open01() * BURSTS_PER_PHASE as f64) as usize % BURSTS_PER_PHASE;
                format!("burst{p}-{b}")
            } else {
                format!("topic{}", sample_log_categorical(&log_pop, &mut rng)?)
            };
            let n_words = 3 + (rng.open01() * 4.0) as usize;
            let mut keywords = BTreeSet::new();
            while keywords.len() < n_words {
                // Earlier vocabulary entries are more common.
                let r = rng.open01();
                let idx = ((r * r) * VOCAB as f64) as usize;
                keywords.insert(format!("{topic}-word{idx}"));
            }
            keywords.insert(GENERIC[(rng.open01() * GENERIC.len() as f64) as usize % GENERIC.len()].to_string());
            docs.push(CorpusDocument {
                phase: first_phase + p as i64,
                keywords,
            });
        }
    }
    let components = connected_components(&similarity_matrix(&docs, SimilarityKind::OverlapSum)?);
    if let Some((main, strays)) = components.split_first() {
        let anchor = GENERIC
            .iter()
            .find(|g| docs[main[0]].keywords.contains(**g))
            .expect("every document has a generic word");
        for c in strays {
            docs[c[0]].keywords.insert(anchor.to_string());
        }
    }
    Ok(docs)
}

/// Group embedded rows by phase; phases must be consecutive integers.
pub fn phase_groups(embedded: &EmbeddedCorpus) -> Result<(Vec<i64>, Vec<Vec<Vec<f64>>>)> {
    let mut groups: BTreeMap<i64, Vec<Vec<f64>>> = BTreeMap::new();
    for (row, &phase) in embedded.features.iter().zip(&embedded.phase_of_row) {
        groups.entry(phase).or_default().push(row.clone());
    }
    let phases: Vec<i64> = groups.keys().copied().collect();
    if let Some(w) = phases.windows(2).find(|w| w[1] != w[0] + 1) {
        return Err(Error::Corpus(format!("phases are not contiguous: {} is followed by {}", w[0], w[1])));
    }
    Ok((phases, groups.into_values().collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub phase: i64,
    pub atom_rank: usize,
    pub weight_shdp: f64,
    pub weight_hdp: f64,
}

#[derive(Debug, Clone)]
pub struct CorpusFit {
    pub phases: Vec<i64>,
    pub shdp: FitTrace,
    pub hdp: FitTrace,
    /// Successive KL per adjacent phase pair, averaged over retained samples.
    pub successive_kl_shdp: Vec<f64>,
    pub successive_kl_hdp: Vec<f64>,
    /// Successive KL between the posterior-mean measures.
    pub mean_measure_kl_shdp: Vec<f64>,
    pub mean_measure_kl_hdp: Vec<f64>,
    pub trajectories: Vec<TrajectoryRow>,
}

/// Indices of the `n` largest entries, largest first (ties by index).
fn top_indices(w: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Fit both models to the embedded corpus. Trajectories follow each model's
/// own top atoms of G_0: rank r pairs the r-th heaviest atom of each model.
pub fn fit_corpus(embedded: &EmbeddedCorpus, cfg: &ScenarioConfig, top_atoms: usize) -> Result<CorpusFit> {
    cfg.validate()?;
    let (phases, groups) = phase_groups(embedded)?;
    let data = Observations::Features(groups);
    let rng = RngStream::new(cfg.seed, streams::FIT);
    let (shdp, hdp) = rayon::join(
        || fit_model(&data, cfg, cfg.bound, &rng),
        || fit_model(&data, cfg, f64::INFINITY, &rng),
    );
    let (shdp, hdp) = (shdp?, hdp?);
    let (ms, mh) = (shdp.mean_measures(), hdp.mean_measures());
    let (ts, th) = (top_indices(&shdp.mean_g0(), top_atoms), top_indices(&hdp.mean_g0(), top_atoms));
    let mut trajectories = Vec::new();
    for (j, &phase) in phases.iter().enumerate() {
        for (rank, (&a, &b)) in ts.iter().zip(&th).enumerate() {
            trajectories.push(TrajectoryRow {
                phase,
                atom_rank: rank + 1,
                weight_shdp: ms[j][a],
                weight_hdp: mh[j][b],
            });
        }
    }
    Ok(CorpusFit {
        phases,
        successive_kl_shdp: shdp.sample_successive_kl()?,
        successive_kl_hdp: hdp.sample_successive_kl()?,
        mean_measure_kl_shdp: shdp.mean_successive_kl()?,
        mean_measure_kl_hdp: hdp.mean_successive_kl()?,
        shdp,
        hdp,
        trajectories,
    })
}

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = String::from("phase,atom_rank,weight_shdp,weight_hdp\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.phase, r.atom_rank, r.weight_shdp, r.weight_hdp);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(phase: i64, words: &[&str]) -> CorpusDocument {
        CorpusDocument {
            phase,
            keywords: words.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn small_cfg() -> ScenarioConfig {
        ScenarioConfig {
            repeats: 200,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(ScenarioConfig::default().validate().is_ok());
        let bad = ScenarioConfig {
            epsilon: 0.02,
            ..ScenarioConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ScenarioConfig {
            repeats: 0,
            ..ScenarioConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pair_records_respect_bound_and_are_reproducible() {
        let cfg = small_cfg();
        let a = run_pair_comparison(&cfg).unwrap();
        let b = run_pair_comparison(&cfg).unwrap();
        assert_eq!(pair_csv(&a), pair_csv(&b));
        let s = summarize_pairs(&a, cfg.bound).unwrap();
        assert_eq!(s.violations, 0);
        assert!(s.skipped * 100 < a.len());
        assert!(s.mean_shdp < s.mean_hdp);
        assert_eq!(pair_csv(&a).lines().count(), 201);
    }

    #[test]
    fn slack_bound_makes_models_indistinguishable() {
        let cfg = ScenarioConfig {
            bound: 1e6,
            repeats: 300,
            ..ScenarioConfig::default()
        };
        let s = summarize_pairs(&run_pair_comparison(&cfg).unwrap(), cfg.bound).unwrap();
        assert!(s.welch_p > 0.01, "{s:?}");
    }

    #[test]
    fn sweep_endpoints_and_grid() {
        let cfg = ScenarioConfig {
            repeats: 50,
            ..ScenarioConfig::default()
        };
        let rows = run_bound_sweep(&cfg, &[1.0, 10.0]).unwrap();
        assert!(rows[0].mean < rows[1].mean);
        assert!(rows[0].q25 <= rows[0].q50 && rows[0].q50 <= rows[0].q75);
        assert!(run_bound_sweep(&cfg, &[5.0, 1.0]).is_err());
        assert_eq!(bound_grid(1.0, 10.0, 1.0).unwrap().len(), 10);
        assert_eq!(bound_grid(1.0, 10.0, 0.5).unwrap().len(), 19);
        assert!(bound_grid(5.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn timeseries_truth_properties() {
        let cfg = ScenarioConfig {
            bound: 1.0,
            ..ScenarioConfig::default()
        };
        let truth = generate_timeseries_truth(&cfg).unwrap();
        assert_eq!(truth.clean.len(), 20);
        for m in &truth.noisy {
            assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(m.weights().iter().all(|w| *w >= 0.0));
        }
        for w in truth.clean.windows(2) {
            let profile = aggregated_kl_profile(w[0].weights(), w[1].weights()).unwrap();
            assert!(profile.iter().all(|v| *v <= 1.0 + CONSTRAINT_TOLERANCE));
            assert!(symmetric_kl(&w[0], &w[1]).unwrap() < 10.0);
        }
        assert!(truth.observations.iter().all(|o| o.len() == 50));
    }

    #[test]
    fn observation_histogram_converges_to_noisy_measure() {
        let cfg = ScenarioConfig {
            phases: 2,
            obs_per_phase: 100_000,
            ..ScenarioConfig::default()
        };
        let truth = generate_timeseries_truth(&cfg).unwrap();
        let mut hist = vec![0.0; 100];
        for &i in &truth.observations[1] {
            hist[i] += 1.0 / 100_000.0;
        }
        let tv: f64 = 0.5 * hist.iter().zip(truth.noisy[1].weights()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(tv < 0.02, "{tv}");
    }

    #[test]
    fn timeseries_recovery_small_run() {
        let cfg = ScenarioConfig {
            bound: 1.0,
            phases: 4,
            particles: 30,
            sweeps: 6,
            truncation: 20,
            ..ScenarioConfig::default()
        };
        let truth = generate_timeseries_truth(&cfg).unwrap();
        let rec = run_timeseries_recovery(&truth, &cfg).unwrap();
        assert_eq!(rec.rows.len(), 4);
        assert!(rec.rows[0].succ_kl_shdp.is_none());
        assert!(rec.rows[1..].iter().all(|r| r.succ_kl_shdp.is_some()));
        assert_eq!(rec.shdp.retained.len(), 3);
        let csv = timeseries_csv(&rec.rows);
        assert!(csv.lines().nth(1).unwrap().starts_with("1,,,"));

        let slack = ScenarioConfig { bound: 1e6, ..cfg };
        let rec = run_timeseries_recovery(&truth, &slack).unwrap();
        for (a, b) in rec.shdp.retained.iter().zip(&rec.hdp.retained) {
            assert_eq!(a.measures, b.measures);
        }
    }

    #[test]
    fn similarity_examples() {
        let a = doc(1, &["x", "y", "z"]);
        let b = doc(1, &["p", "q"]);
        let c = doc(1, &["x"]);
        assert_eq!(similarity(&a, &a, SimilarityKind::OverlapSum).unwrap(), 0.5);
        assert_eq!(similarity(&a, &b, SimilarityKind::OverlapSum).unwrap(), 0.0);
        assert_eq!(similarity(&c, &a, SimilarityKind::OverlapSum).unwrap(), 0.25);
        assert_eq!(similarity(&c, &a, SimilarityKind::Jaccard).unwrap(), 1.0 / 3.0);
        assert!(similarity(&doc(1, &[]), &a, SimilarityKind::OverlapSum).is_err());
    }

    #[test]
    fn laplacian_spectrum_properties() {
        let docs = generate_synthetic_corpus(8, 26, 1990, 5).unwrap();
        let w = similarity_matrix(&docs, SimilarityKind::OverlapSum).unwrap();
        let lap = normalized_laplacian(&w).unwrap();
        assert!((&lap - lap.transpose()).amax() < 1e-12);
        let (values, vectors) = sorted_eigen(lap);
        assert!(values.iter().all(|v| *v >= -1e-10 && *v <= 2.0 + 1e-10));
        assert!(values[0].abs() < 1e-10);
        // Null vector is proportional to D^{1/2} 1.
        let d_sqrt: Vec<f64> = (0..docs.len()).map(|i| w.row(i).sum().sqrt()).collect();
        let norm = d_sqrt.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (i, ds) in d_sqrt.iter().enumerate() {
            assert!((vectors[(i, 0)] - ds / norm).abs() < 1e-8);
        }
    }

    #[test]
    fn disconnected_cliques_have_two_null_directions() {
        let docs = vec![
            doc(1, &["a", "b"]),
            doc(1, &["a", "c"]),
            doc(1, &["b", "c"]),
            doc(2, &["x", "y"]),
            doc(2, &["x", "z"]),
            doc(2, &["y", "z"]),
        ];
        let w = similarity_matrix(&docs, SimilarityKind::OverlapSum).unwrap();
        let (values, _) = sorted_eigen(normalized_laplacian(&w).unwrap());
        assert!(values[0].abs() < 1e-10 && values[1].abs() < 1e-10 && values[2] > 1e-3);
        match spectral_embed(&docs, 2, SimilarityKind::OverlapSum) {
            Err(Error::Disconnected { components }) => assert_eq!(components, vec![vec![0, 1, 2], vec![3, 4, 5]]),
            other => panic!("expected disconnected error, got {other:?}"),
        }
        let lonely = vec![doc(1, &["a"]), doc(1, &["a", "b"]), doc(1, &["q"])];
        assert!(matches!(
            spectral_embed(&lonely, 1, SimilarityKind::OverlapSum),
            Err(Error::ZeroDegree { index: 2 })
        ));
    }

    #[test]
    fn embedding_is_standardized_and_deterministic() {
        let docs = generate_synthetic_corpus(8, 26, 1990, 9).unwrap();
        let a = spectral_embed(&docs, 12, SimilarityKind::OverlapSum).unwrap();
        let b = spectral_embed(&docs, 12, SimilarityKind::OverlapSum).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let n = docs.len() as f64;
        for c in 0..12 {
            let col: Vec<f64> = a.features.iter().map(|r| r[c]).collect();
            let mean = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!((sd - 1.0).abs() < 1e-9);
        }
        assert!(spectral_embed(&docs[..5], 12, SimilarityKind::OverlapSum).is_err());
    }

    #[test]
    fn corpus_parsing() {
        let docs = parse_corpus(r#"[{"phase": 1990, "keywords": ["a", "b"]}, {"phase": 1991, "keywords": ["b"]}]"#).unwrap();
        assert_eq!(docs.len(), 2);
        let err = parse_corpus("[{\"phase\": 1990,\n \"keywords\": 3}]").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(parse_corpus(r#"[{"phase": 1, "keywords": []}]"#).is_err());
    }

    #[test]
    fn small_corpus_fit() {
        let docs = generate_synthetic_corpus(6, 4, 2000, 2).unwrap();
        let emb = spectral_embed(&docs, 3, SimilarityKind::OverlapSum).unwrap();
        let cfg = ScenarioConfig {
            alpha: 5.0,
            particles: 20,
            sweeps: 4,
            truncation: 15,
            ..ScenarioConfig::default()
        };
        let fit = fit_corpus(&emb, &cfg, 8).unwrap();
        assert_eq!(fit.phases, vec![2000, 2001, 2002, 2003]);
        assert_eq!(fit.successive_kl_shdp.len(), 3);
        assert_eq!(fit.mean_measure_kl_hdp.len(), 3);
        // KL is jointly convex, so the mean measures are never further apart.
        for (s, m) in fit.successive_kl_shdp.iter().zip(&fit.mean_measure_kl_shdp) {
            assert!(m <= &(s + 1e-9), "{m} > {s}");
        }
        assert_eq!(fit.trajectories.len(), 4 * 8);
        let again = fit_corpus(&emb, &cfg, 8).unwrap();
        assert_eq!(trajectory_csv(&fit.trajectories), trajectory_csv(&again.trajectories));

        let single = generate_synthetic_corpus(6, 1, 2000, 2).unwrap();
        let emb = spectral_embed(&single, 3, SimilarityKind::OverlapSum).unwrap();
        let fit = fit_corpus(&emb, &cfg, 8).unwrap();
        assert!(fit.successive_kl_shdp.is_empty());
    }

    proptest::proptest! {
        #[test]
        fn prop_synthetic_corpus_is_connected(dpp in 1usize..6, phases in 1usize..6, seed in 0u64..1000) {
            proptest::prop_assume!(dpp * phases >= 2);
            let docs = generate_synthetic_corpus(dpp, phases, 0, seed).unwrap();
            let w = similarity_matrix(&docs, SimilarityKind::Jaccard).unwrap();
            proptest::prop_assert_eq!(connected_components(&w).len(), 1);
        }

        #[test]
        fn prop_similarity_is_symmetric_and_bounded(
            a in proptest::collection::btree_set("[a-f]{1,2}", 1..8),
            b in proptest::collection::btree_set("[a-f]{1,2}", 1..8),
        ) {
            let (a, b) = (CorpusDocument { phase: 0, keywords: a }, CorpusDocument { phase: 0, keywords: b });
            for kind in [SimilarityKind::OverlapSum, SimilarityKind::Jaccard] {
                let s = similarity(&a, &b, kind).unwrap();
                proptest::prop_assert_eq!(s, similarity(&b, &a, kind).unwrap());
                proptest::prop_assert!((0.0..=1.0).contains(&s));
            }
            proptest::prop_assert!(similarity(&a, &b, SimilarityKind::OverlapSum).unwrap() <= 0.5);
        }
    }
}
