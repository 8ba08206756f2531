//! Command-line front end. Every option can come from a flag, from a
//! `--config` JSON file whose keys are the flag names, or from the built-in
//! default, in that order of precedence.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::constraint::{aggregated_kl_profile, expectation_gap, sample_constrained_child, sample_floored_child};
use crate::error::Error;
use crate::measures::{floor_and_normalize, sample_gem};
use crate::sampling::RngStream;
use crate::scenarios::{
    bound_grid, fit_corpus, generate_synthetic_corpus, generate_timeseries_truth, pair_csv, parse_corpus,
    run_bound_sweep, run_pair_comparison, run_timeseries_recovery, spectral_embed, summarize_pairs, sweep_csv,
    timeseries_csv, trajectory_csv, FitTrace, ScenarioConfig, SimilarityKind,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "shdp", version, about = "Smoothed hierarchical Dirichlet process experiments")]
pub struct Cli {
    /// Cap on worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Constrained vs unconstrained successor KL over repeated draws.
    Pair(PairOpts),
    /// Constrained successor KL across a grid of bounds.
    Sweep(SweepOpts),
    /// Noisy synthetic time series fitted by both models.
    Timeseries(TimeseriesOpts),
    /// Spectral embedding of a keyword corpus and a phased fit.
    Fit(FitOpts),
    /// Self-tests of the lumping gap and constraint satisfaction.
    Check(CheckOpts),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

/// Declares an options struct whose fields are all optional, usable both as
/// clap flags and as a config file, plus the flag-over-file overlay.
macro_rules! options {
    ($(#[$m:meta])* $name:ident { $($(#[$fm:meta])* $field:ident : $ty:ty),* $(,)? }) => {
        $(#[$m])*
        #[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
        #[serde(rename_all = "kebab-case", deny_unknown_fields)]
        pub struct $name {
            /// JSON file of option values; flags override it.
            #[arg(long)]
            #[serde(skip)]
            pub config: Option<PathBuf>,
            $($(#[$fm])* #[arg(long)] pub $field: Option<$ty>,)*
        }

        impl $name {
            fn overlay(self, file: Self) -> Self {
                Self {
                    config: self.config,
                    $($field: self.$field.or(file.$field),)*
                }
            }

            fn resolve(self) -> Result<Self, CliError> {
                let file = match &self.config {
                    Some(path) => {
                        let text = fs::read_to_string(path)
                            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                        serde_json::from_str(&text)
                            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?
                    }
                    None => Self::default(),
                };
                Ok(self.overlay(file))
            }
        }
    };
}

options!(PairOpts {
    gamma: f64,
    alpha: f64,
    bound: f64,
    truncation: usize,
    epsilon: f64,
    max_retries: usize,
    seed: u64,
    out: PathBuf,
    format: OutputFormat,
    repeats: usize,
});

options!(SweepOpts {
    gamma: f64,
    alpha: f64,
    truncation: usize,
    epsilon: f64,
    max_retries: usize,
    seed: u64,
    out: PathBuf,
    format: OutputFormat,
    repeats: usize,
    bound_min: f64,
    bound_max: f64,
    bound_step: f64,
});

options!(TimeseriesOpts {
    gamma: f64,
    alpha: f64,
    bound: f64,
    truncation: usize,
    epsilon: f64,
    max_retries: usize,
    seed: u64,
    out: PathBuf,
    format: OutputFormat,
    phases: usize,
    obs: usize,
    noise_shape: f64,
    noise_rate: f64,
    particles: usize,
    sweeps: usize,
    /// Resample gamma and alpha every sweep instead of holding them fixed.
    #[arg(num_args = 0, default_missing_value = "true")]
    update_concentrations: bool,
});

options!(FitOpts {
    gamma: f64,
    alpha: f64,
    bound: f64,
    truncation: usize,
    epsilon: f64,
    max_retries: usize,
    seed: u64,
    /// Output directory.
    out: PathBuf,
    format: OutputFormat,
    /// Corpus JSON: an array of {"phase": int, "keywords": [string]}.
    corpus: PathBuf,
    #[arg(num_args = 0, default_missing_value = "true")]
    synthetic: bool,
    /// Synthetic corpus size.
    phases: usize,
    docs_per_phase: usize,
    first_phase: i64,
    dim: usize,
    similarity: SimilarityKind,
    likelihood_variance: f64,
    particles: usize,
    sweeps: usize,
    top_atoms: usize,
    /// Resample gamma and alpha every sweep instead of holding them fixed.
    #[arg(num_args = 0, default_missing_value = "true")]
    update_concentrations: bool,
});

options!(CheckOpts {
    gamma: f64,
    alpha: f64,
    bound: f64,
    truncation: usize,
    epsilon: f64,
    max_retries: usize,
    seed: u64,
    format: OutputFormat,
    /// Number of stick positions in the lumping-gap grid.
    grid_size: usize,
    /// Paired draws per grid position.
    samples: usize,
    /// Constrained draws re-checked post hoc.
    draws: usize,
    #[arg(hide = true, num_args = 0, default_missing_value = "true")]
    inject_violation: bool,
});

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Run metadata written next to every output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Every option after flags, config file, and defaults were applied.
    pub options: serde_json::Value,
    pub config: ScenarioConfig,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<PathBuf>,
    pub skipped: usize,
    pub infeasible_proposals: usize,
    pub error: Option<String>,
}

struct Run {
    command: &'static str,
    started: Instant,
    started_unix: f64,
    outputs: Vec<PathBuf>,
    skipped: usize,
    infeasible: usize,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl Run {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
            started_unix: unix_now(),
            outputs: Vec::new(),
            skipped: 0,
            infeasible: 0,
        }
    }

    fn write(&mut self, path: &Path, contents: &str) -> Result<(), CliError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, contents)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    fn manifest<O: Serialize>(
        &self,
        path: &Path,
        options: &O,
        config: &ScenarioConfig,
        error: Option<String>,
    ) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            options: serde_json::to_value(options)?,
            config: config.clone(),
            started_unix: self.started_unix,
            finished_unix: unix_now(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            outputs: self.outputs.clone(),
            skipped: self.skipped,
            infeasible_proposals: self.infeasible,
            error,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

/// Run the body, then write the manifest whether or not it succeeded.
fn with_manifest<O: Serialize>(
    run: &mut Run,
    manifest_path: &Path,
    options: &O,
    config: &ScenarioConfig,
    body: impl FnOnce(&mut Run) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let result = body(run);
    let error = result.as_ref().err().map(|e| match e {
        CliError::Usage(m) | CliError::Runtime(m) => m.clone(),
    });
    run.manifest(manifest_path, options, config, error)?;
    result
}

fn manifest_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(suffix);
    out.with_file_name(name)
}

fn default_out(stem: &str, format: OutputFormat) -> PathBuf {
    PathBuf::from(match format {
        OutputFormat::Csv => format!("{stem}.csv"),
        OutputFormat::Json => format!("{stem}.json"),
    })
}

fn validated(cfg: ScenarioConfig) -> Result<ScenarioConfig, CliError> {
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn render<T: Serialize>(format: OutputFormat, rows: &T, csv: impl FnOnce() -> String) -> Result<String, CliError> {
    Ok(match format {
        OutputFormat::Csv => csv(),
        OutputFormat::Json => serde_json::to_string_pretty(rows)? + "\n",
    })
}

fn diagnostics_jsonl(trace: &FitTrace) -> Result<String, CliError> {
    let mut out = String::new();
    for d in &trace.diagnostics {
        out.push_str(&d.to_json_line()?);
        out.push('\n');
    }
    Ok(out)
}

fn infeasible_total(trace: &FitTrace) -> usize {
    trace.diagnostics.iter().flat_map(|d| d.infeasible.iter()).sum()
}

fn cmd_pair(opts: PairOpts) -> Result<(), CliError> {
    let mut o = opts.resolve()?;
    let d = ScenarioConfig::default();
    let format = *o.format.get_or_insert_default();
    let cfg = validated(ScenarioConfig {
        gamma: *o.gamma.get_or_insert(d.gamma),
        alpha: *o.alpha.get_or_insert(1.0),
        bound: *o.bound.get_or_insert(3.0),
        truncation: *o.truncation.get_or_insert(d.truncation),
        epsilon: *o.epsilon.get_or_insert(d.epsilon),
        max_retries: *o.max_retries.get_or_insert(d.max_retries),
        seed: *o.seed.get_or_insert(d.seed),
        repeats: *o.repeats.get_or_insert(1000),
        ..d
    })?;
    let out = o.out.get_or_insert_with(|| default_out("pair", format)).clone();
    let mut run = Run::new("pair");
    with_manifest(&mut run, &manifest_path_for(&out), &o, &cfg, |run| {
        let records = run_pair_comparison(&cfg)?;
        let summary = summarize_pairs(&records, cfg.bound)?;
        run.skipped = summary.skipped;
        run.write(&out, &render(format, &records, || pair_csv(&records))?)?;
        println!(
            "sHDP mean KL {:.4} (se {:.4}); HDP mean KL {:.4} (se {:.4}); Welch t {:.2}, p {:.3e}; skipped {}/{}",
            summary.mean_shdp,
            summary.se_shdp,
            summary.mean_hdp,
            summary.se_hdp,
            summary.welch_t,
            summary.welch_p,
            summary.skipped,
            records.len()
        );
        if summary.violations > 0 {
            return Err(CliError::Runtime(format!("{} draws violated the bound post hoc", summary.violations)));
        }
        Ok(())
    })
}

fn cmd_sweep(opts: SweepOpts) -> Result<(), CliError> {
    let mut o = opts.resolve()?;
    let d = ScenarioConfig::default();
    let format = *o.format.get_or_insert_default();
    let cfg = validated(ScenarioConfig {
        gamma: *o.gamma.get_or_insert(d.gamma),
        alpha: *o.alpha.get_or_insert(1.0),
        truncation: *o.truncation.get_or_insert(d.truncation),
        epsilon: *o.epsilon.get_or_insert(d.epsilon),
        max_retries: *o.max_retries.get_or_insert(d.max_retries),
        seed: *o.seed.get_or_insert(d.seed),
        repeats: *o.repeats.get_or_insert(100),
        ..d
    })?;
    let bounds = bound_grid(
        *o.bound_min.get_or_insert(1.0),
        *o.bound_max.get_or_insert(10.0),
        *o.bound_step.get_or_insert(1.0),
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;
    let out = o.out.get_or_insert_with(|| default_out("sweep", format)).clone();
    let mut run = Run::new("sweep");
    with_manifest(&mut run, &manifest_path_for(&out), &o, &cfg, |run| {
        let rows = run_bound_sweep(&cfg, &bounds)?;
        run.skipped = rows.iter().map(|r| r.skipped).sum();
        run.write(&out, &render(format, &rows, || sweep_csv(&rows))?)?;
        for r in &rows {
            println!("B = {:>6.3}: mean KL {:.4} [q25 {:.4}, q50 {:.4}, q75 {:.4}]", r.bound, r.mean, r.q25, r.q50, r.q75);
        }
        Ok(())
    })
}

fn cmd_timeseries(opts: TimeseriesOpts) -> Result<(), CliError> {
    let mut o = opts.resolve()?;
    let d = ScenarioConfig::default();
    let format = *o.format.get_or_insert_default();
    let cfg = validated(ScenarioConfig {
        gamma: *o.gamma.get_or_insert(d.gamma),
        alpha: *o.alpha.get_or_insert(1.0),
        bound: *o.bound.get_or_insert(1.0),
        truncation: *o.truncation.get_or_insert(d.truncation),
        epsilon: *o.epsilon.get_or_insert(d.epsilon),
        max_retries: *o.max_retries.get_or_insert(d.max_retries),
        seed: *o.seed.get_or_insert(d.seed),
        phases: *o.phases.get_or_insert(20),
        obs_per_phase: *o.obs.get_or_insert(50),
        noise_shape: *o.noise_shape.get_or_insert(0.03),
        noise_rate: *o.noise_rate.get_or_insert(1.0),
        particles: *o.particles.get_or_insert(1000),
        sweeps: *o.sweeps.get_or_insert(100),
        update_concentrations: *o.update_concentrations.get_or_insert(false),
        ..d
    })?;
    if cfg.particles == 1 {
        eprintln!("warning: with one particle the filter cannot select among proposals; its output is a prior draw");
    }
    let out = o.out.get_or_insert_with(|| default_out("timeseries", format)).clone();
    let mut run = Run::new("timeseries");
    with_manifest(&mut run, &manifest_path_for(&out), &o, &cfg, |run| {
        let truth = generate_timeseries_truth(&cfg)?;
        let rec = run_timeseries_recovery(&truth, &cfg)?;
        run.infeasible = infeasible_total(&rec.shdp) + infeasible_total(&rec.hdp);
        run.write(&out, &render(format, &rec.rows, || timeseries_csv(&rec.rows))?)?;
        run.write(&sibling(&out, ".shdp-diagnostics.jsonl"), &diagnostics_jsonl(&rec.shdp)?)?;
        run.write(&sibling(&out, ".hdp-diagnostics.jsonl"), &diagnostics_jsonl(&rec.hdp)?)?;
        let mean = |f: &dyn Fn(&crate::scenarios::TimeseriesRow) -> Option<f64>| {
            let v: Vec<f64> = rec.rows.iter().filter_map(f).collect();
            if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 }
        };
        println!(
            "mean successive KL: sHDP {:.4}, HDP {:.4}; mean KL to truth: sHDP {:.4}, HDP {:.4}",
            mean(&|r| r.succ_kl_shdp),
            mean(&|r| r.succ_kl_hdp),
            mean(&|r| Some(r.dist_truth_shdp)),
            mean(&|r| Some(r.dist_truth_hdp)),
        );
        Ok(())
    })
}

fn cmd_fit(opts: FitOpts) -> Result<(), CliError> {
    let mut o = opts.resolve()?;
    let d = ScenarioConfig::default();
    let format = *o.format.get_or_insert_default();
    let synthetic = *o.synthetic.get_or_insert(false);
    if synthetic == o.corpus.is_some() {
        return Err(CliError::Usage("give exactly one of --corpus <file> or --synthetic".into()));
    }
    let cfg = validated(ScenarioConfig {
        gamma: *o.gamma.get_or_insert(d.gamma),
        alpha: *o.alpha.get_or_insert(5.0),
        bound: *o.bound.get_or_insert(3.0),
        truncation: *o.truncation.get_or_insert(d.truncation),
        epsilon: *o.epsilon.get_or_insert(d.epsilon),
        max_retries: *o.max_retries.get_or_insert(d.max_retries),
        seed: *o.seed.get_or_insert(d.seed),
        phases: *o.phases.get_or_insert(26),
        particles: *o.particles.get_or_insert(1000),
        sweeps: *o.sweeps.get_or_insert(500),
        likelihood_variance: *o.likelihood_variance.get_or_insert(1.0),
        update_concentrations: *o.update_concentrations.get_or_insert(false),
        ..d
    })?;
    let dim = *o.dim.get_or_insert(12);
    let similarity = *o.similarity.get_or_insert_default();
    let docs_per_phase = *o.docs_per_phase.get_or_insert(8);
    let first_phase = *o.first_phase.get_or_insert(1990);
    let top_atoms = *o.top_atoms.get_or_insert(8);
    if dim == 0 || docs_per_phase == 0 || top_atoms == 0 {
        return Err(CliError::Usage("--dim, --docs-per-phase and --top-atoms must be at least 1".into()));
    }
    let dir = o.out.get_or_insert_with(|| PathBuf::from("fit")).clone();
    let ext = match format {
        OutputFormat::Csv => "csv",
        OutputFormat::Json => "json",
    };
    let mut run = Run::new("fit");
    with_manifest(&mut run, &dir.join("manifest.json"), &o, &cfg, |run| {
        let docs = match &o.corpus {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Runtime(format!("cannot read corpus {}: {e}", path.display())))?;
                parse_corpus(&text)?
            }
            None => generate_synthetic_corpus(docs_per_phase, cfg.phases, first_phase, cfg.seed)?,
        };
        let embedded = spectral_embed(&docs, dim, similarity)?;
        let fit = fit_corpus(&embedded, &cfg, top_atoms)?;
        run.infeasible = infeasible_total(&fit.shdp) + infeasible_total(&fit.hdp);
        run.write(
            &dir.join(format!("trajectories.{ext}")),
            &render(format, &fit.trajectories, || trajectory_csv(&fit.trajectories))?,
        )?;
        let succ: Vec<serde_json::Value> = (0..fit.successive_kl_shdp.len())
            .map(|j| {
                serde_json::json!({
                    "phase": fit.phases[j + 1],
                    "succ_kl_shdp": fit.successive_kl_shdp[j],
                    "succ_kl_hdp": fit.successive_kl_hdp[j],
                    "mean_measure_kl_shdp": fit.mean_measure_kl_shdp[j],
                    "mean_measure_kl_hdp": fit.mean_measure_kl_hdp[j],
                })
            })
            .collect();
        run.write(
            &dir.join(format!("successive_kl.{ext}")),
            &render(format, &succ, || {
                let mut s = String::from("phase,succ_kl_shdp,succ_kl_hdp,mean_measure_kl_shdp,mean_measure_kl_hdp\n");
                for j in 0..fit.successive_kl_shdp.len() {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{}",
                        fit.phases[j + 1],
                        fit.successive_kl_shdp[j],
                        fit.successive_kl_hdp[j],
                        fit.mean_measure_kl_shdp[j],
                        fit.mean_measure_kl_hdp[j]
                    );
                }
                s
            })?,
        )?;
        let measures = serde_json::json!({
            "phases": fit.phases,
            "shdp": {"g0": fit.shdp.mean_g0(), "measures": fit.shdp.mean_measures()},
            "hdp": {"g0": fit.hdp.mean_g0(), "measures": fit.hdp.mean_measures()},
        });
        run.write(&dir.join("measures.json"), &(serde_json::to_string_pretty(&measures)? + "\n"))?;
        run.write(&dir.join("shdp-diagnostics.jsonl"), &diagnostics_jsonl(&fit.shdp)?)?;
        run.write(&dir.join("hdp-diagnostics.jsonl"), &diagnostics_jsonl(&fit.hdp)?)?;
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        println!(
            "{} documents over {} phases; mean successive KL: sHDP {:.4}, HDP {:.4}",
            docs.len(),
            fit.phases.len(),
            mean(&fit.successive_kl_shdp),
            mean(&fit.successive_kl_hdp)
        );
        Ok(())
    })
}

/// Stick positions probed by `check`, in order; `--grid-size` takes a prefix.
const CHECK_POSITIONS: [usize; 8] = [1, 2, 5, 10, 20, 35, 50, 75];

#[derive(Debug, Serialize)]
struct CheckResult {
    check: String,
    passed: bool,
    detail: String,
}

fn cmd_check(opts: CheckOpts) -> Result<(), CliError> {
    let mut o = opts.resolve()?;
    let d = ScenarioConfig::default();
    let format = *o.format.get_or_insert_default();
    let cfg = validated(ScenarioConfig {
        gamma: *o.gamma.get_or_insert(d.gamma),
        alpha: *o.alpha.get_or_insert(1.0),
        bound: *o.bound.get_or_insert(3.0),
        truncation: *o.truncation.get_or_insert(d.truncation),
        epsilon: *o.epsilon.get_or_insert(d.epsilon),
        max_retries: *o.max_retries.get_or_insert(d.max_retries),
        seed: *o.seed.get_or_insert(d.seed),
        ..d
    })?;
    let grid = *o.grid_size.get_or_insert(4);
    let samples = *o.samples.get_or_insert(2000);
    let draws = *o.draws.get_or_insert(100);
    let inject = *o.inject_violation.get_or_insert(false);
    if grid == 0 || grid > CHECK_POSITIONS.len() {
        return Err(CliError::Usage(format!("--grid-size must be in 1..={}", CHECK_POSITIONS.len())));
    }
    if samples < 100 || draws == 0 {
        return Err(CliError::Usage("--samples must be at least 100 and --draws at least 1".into()));
    }

    let root = RngStream::new(cfg.seed, 0);
    let mut results = Vec::new();
    for (i, &position) in CHECK_POSITIONS[..grid].iter().filter(|&&l| l < cfg.truncation).enumerate() {
        let mut rng = root.substream(i as u64);
        let gap = expectation_gap(cfg.gamma, cfg.alpha, position, samples, cfg.truncation, cfg.epsilon, &mut rng)?;
        // Lumping cannot increase a divergence, so every gap must be
        // non-negative; the mean is reported but not required to vanish.
        let passed = gap.min_gap >= -1e-9;
        results.push(CheckResult {
            check: format!("lumping-inequality position={position}"),
            passed,
            detail: format!(
                "min gap {:.3e}; mean gap {:.4} (se {:.4}) over {} pairs",
                gap.min_gap, gap.mean, gap.standard_error, gap.n_samples
            ),
        });
    }

    // The injected fault re-checks draws against half the bound they were drawn under.
    let limit = if inject { cfg.bound / 2.0 } else { cfg.bound } + crate::constraint::CONSTRAINT_TOLERANCE;
    let cc = cfg.constrained();
    let mut rng = root.substream(1000);
    let mut violations = 0;
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let g0 = floor_and_normalize(&sample_gem(cfg.gamma, cfg.truncation, &mut rng)?.1, cfg.epsilon)?;
        let g1 = sample_floored_child(&g0, cfg.alpha, &cc, &mut rng)?.measure;
        let g2 = sample_constrained_child(&g0, &g1, cfg.alpha, cfg.bound, &cc, &mut rng)?.measure;
        let peak = aggregated_kl_profile(g1.weights(), g2.weights())?.into_iter().fold(0.0, f64::max);
        worst = worst.max(peak);
        if peak > limit {
            violations += 1;
        }
    }
    results.push(CheckResult {
        check: "constraint-satisfaction".into(),
        passed: violations == 0,
        detail: format!("{violations}/{draws} draws above the bound; largest aggregated KL {worst:.4}"),
    });

    match format {
        OutputFormat::Csv => {
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.check, r.detail);
            }
        }
        OutputFormat::Json => println!("{}", serde_json::to_string_pretty(&results)?),
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.check.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("failed checks: {}", failed.join(", "))))
    }
}

/// Parse arguments, run the command, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        // Fails only if a pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Pair(o) => cmd_pair(o),
        Command::Sweep(o) => cmd_sweep(o),
        Command::Timeseries(o) => cmd_timeseries(o),
        Command::Fit(o) => cmd_fit(o),
        Command::Check(o) => cmd_check(o),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(m)) => {
            eprintln!("usage error: {m}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_FAILURE
        }
    }
}
