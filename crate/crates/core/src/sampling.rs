//! Random-variate primitives: seeded streams, Beta and Gamma variates,
//! resampling, and the auxiliary-variable slice sampler for truncated Beta
//! distributions.
//!
//! Everything works in log space where a shape parameter can be tiny. Child
//! stick-breaking weights routinely produce shapes around 1e-5, where the
//! textbook `x^(1/a)` formulas underflow long before the variate itself does.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest value strictly below one that sticks and Beta variates are clamped to.
pub const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

/// Default number of slice iterations per fresh truncated-Beta draw.
pub const DEFAULT_SLICE_STEPS: usize = 20;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A reproducible random stream identified by `(seed, stream_id)`.
///
/// Streams are plain values: clone one to replay it, or derive independent
/// children with [`RngStream::substream`] to hand out per-particle or
/// per-repeat randomness that does not depend on scheduling order.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Derive a child stream. The child depends only on this stream's
    /// identity and `id`, never on how many variates have been drawn.
    pub fn substream(&self, id: u64) -> RngStream {
        let seed = splitmix64(self.seed ^ splitmix64(self.stream_id.wrapping_add(0x5EED)));
        RngStream::new(seed, splitmix64(id ^ self.stream_id.rotate_left(17)))
    }

    /// Uniform on the open interval (0, 1).
    pub fn open01(&mut self) -> f64 {
        loop {
            let u: f64 = self.inner.random();
            if u > 0.0 {
                return u;
            }
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn check_positive(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must be positive and finite, got {value}")))
    }
}

/// Log of a unit-rate Gamma variate. For shape < 1 uses
/// `G(a) = G(a + 1) * U^(1/a)` so the result stays finite for tiny shapes.
fn ln_gamma_variate(shape: f64, rng: &mut RngStream) -> f64 {
    if shape >= 1.0 {
        let g = Gamma::new(shape, 1.0).expect("shape checked by caller");
        g.sample(rng).max(f64::MIN_POSITIVE).ln()
    } else {
        let g = Gamma::new(shape + 1.0, 1.0).expect("shape checked by caller");
        let boosted = g.sample(rng).max(f64::MIN_POSITIVE).ln();
        boosted + rng.open01().ln() / shape
    }
}

pub fn sample_gamma(shape: f64, rate: f64, rng: &mut RngStream) -> Result<f64> {
    check_positive("gamma shape", shape)?;
    check_positive("gamma rate", rate)?;
    let value = (ln_gamma_variate(shape, rng) - rate.ln()).exp();
    Ok(value.clamp(f64::MIN_POSITIVE, f64::MAX))
}

/// Beta(a, b) variate strictly inside (0, 1).
pub fn sample_beta(a: f64, b: f64, rng: &mut RngStream) -> Result<f64> {
    check_positive("beta shape a", a)?;
    check_positive("beta shape b", b)?;
    let la = ln_gamma_variate(a, rng);
    let lb = ln_gamma_variate(b, rng);
    // x = Ga / (Ga + Gb) computed as a logistic of the log-ratio.
    let x = 1.0 / (1.0 + (lb - la).exp());
    Ok(x.clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP))
}

/// Normalize log-weights into probabilities with max-subtraction.
/// Fails with [`Error::Degenerate`] when no weight is finite.
pub fn normalized_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    let max = log_weights
        .iter()
        .copied()
        .filter(|w| !w.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Degenerate);
    }
    let mut w: Vec<f64> = log_weights
        .iter()
        .map(|&lw| if lw.is_nan() { 0.0 } else { (lw - max).exp() })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    Ok(w)
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Effective sample size `1 / sum(w_i^2)` of normalized weights; zero when
/// every weight is -inf.
pub fn effective_sample_size(log_weights: &[f64]) -> f64 {
    match normalized_weights(log_weights) {
        Ok(w) => 1.0 / w.iter().map(|x| x * x).sum::<f64>(),
        Err(_) => 0.0,
    }
}

/// Draw one index from unnormalized log-probabilities.
pub fn sample_log_categorical(log_weights: &[f64], rng: &mut RngStream) -> Result<usize> {
    let w = normalized_weights(log_weights)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in w.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    // Rounding left `acc` just below one; take the last index with mass.
    Ok(w.iter().rposition(|&p| p > 0.0).unwrap_or(w.len() - 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleScheme {
    #[default]
    Systematic,
    Multinomial,
}

/// Systematic resampling: one uniform offset, N evenly spaced pointers.
pub fn systematic_resample(log_weights: &[f64], rng: &mut RngStream) -> Result<Vec<usize>> {
    let w = normalized_weights(log_weights)?;
    let n = w.len();
    let step = 1.0 / n as f64;
    let mut pointer = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut acc = w[0];
    let mut i = 0;
    for _ in 0..n {
        while pointer >= acc && i + 1 < n {
            i += 1;
            acc += w[i];
        }
        // Never hand out an index whose weight is exactly zero.
        let mut pick = i;
        while w[pick] == 0.0 && pick > 0 {
            pick -= 1;
        }
        out.push(pick);
        pointer += step;
    }
    Ok(out)
}

pub fn multinomial_resample(log_weights: &[f64], rng: &mut RngStream) -> Result<Vec<usize>> {
    let w = normalized_weights(log_weights)?;
    let mut cdf = Vec::with_capacity(w.len());
    let mut acc = 0.0;
    for p in &w {
        acc += p;
        cdf.push(acc);
    }
    let last = w.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    Ok((0..w.len())
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            cdf.partition_point(|&c| c <= u).min(last)
        })
        .collect())
}

pub fn resample(scheme: ResampleScheme, log_weights: &[f64], rng: &mut RngStream) -> Result<Vec<usize>> {
    match scheme {
        ResampleScheme::Systematic => systematic_resample(log_weights, rng),
        ResampleScheme::Multinomial => multinomial_resample(log_weights, rng),
    }
}

/// Beta(shape_a, shape_b) restricted to the open interval (lo, hi).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedBetaParams {
    pub shape_a: f64,
    pub shape_b: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TruncatedBetaParams {
    pub fn new(shape_a: f64, shape_b: f64, lo: f64, hi: f64) -> Result<Self> {
        check_positive("truncated beta shape a", shape_a)?;
        check_positive("truncated beta shape b", shape_b)?;
        if !(0.0..1.0).contains(&lo) || !(hi > 0.0 && hi <= 1.0) || lo >= hi {
            return Err(Error::Parameter(format!(
                "truncation bounds must satisfy 0 <= lo < hi <= 1, got ({lo}, {hi})"
            )));
        }
        Ok(Self {
            shape_a,
            shape_b,
            lo,
            hi,
        })
    }

    pub fn midpoint(&self) -> f64 {
        self.lo + 0.5 * (self.hi - self.lo)
    }

    /// True when the interval is too narrow to sample from meaningfully.
    pub fn is_degenerate(&self) -> bool {
        self.hi - self.lo <= 4.0 * f64::EPSILON * self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceDraw {
    pub value: f64,
    /// Set when the interval was degenerate and the midpoint was returned.
    pub degenerate: bool,
}

/// Draw x from density proportional to `x^(a-1)` on (lower, upper) by
/// inverse transform, anchored at the upper end so that both tiny and huge
/// shapes stay finite.
fn power_law_inverse(a: f64, lower: f64, upper: f64, v: f64) -> f64 {
    let ln_upper = upper.ln();
    let ratio = if lower > 0.0 {
        -(a * (lower.ln() - ln_upper)).exp_m1()
    } else {
        1.0
    };
    let ln_x = ln_upper + (-(1.0 - v) * ratio).ln_1p() / a;
    ln_x.exp().clamp(lower, upper)
}

/// Auxiliary-variable slice sampler for a truncated Beta.
///
/// Each iteration draws `u ~ U(0, (1-x)^(b-1))`, then draws x from the
/// `x^(a-1)` power law on the slice, whose one-sided limit comes from
/// inverting `(1-x)^(b-1) > u`: an upper limit when b > 1, a lower limit
/// when b < 1, and none when b == 1.
pub fn slice_sample_truncated_beta(
    params: &TruncatedBetaParams,
    x0: f64,
    n_steps: usize,
    rng: &mut RngStream,
) -> Result<SliceDraw> {
    if params.is_degenerate() {
        return Ok(SliceDraw {
            value: params.midpoint(),
            degenerate: true,
        });
    }
    if !(x0 > params.lo && x0 < params.hi) {
        return Err(Error::Precondition(format!(
            "slice sampler start {x0} is outside ({}, {})",
            params.lo, params.hi
        )));
    }
    let TruncatedBetaParams {
        shape_a: a,
        shape_b: b,
        lo,
        hi,
    } = *params;
    let mut x = x0;
    for _ in 0..n_steps {
        let ln_u = rng.open01().ln() + (b - 1.0) * (-x).ln_1p();
        let (lower, upper) = if b > 1.0 {
            let limit = -(ln_u / (b - 1.0)).exp_m1();
            (lo, hi.min(limit))
        } else if b < 1.0 {
            let limit = -(ln_u / (b - 1.0)).exp_m1();
            (lo.max(limit), hi)
        } else {
            (lo, hi)
        };
        // Rounding in the slice limit can leave x marginally outside it.
        let (lower, upper) = (lower.min(x), upper.max(x));
        x = power_law_inverse(a, lower, upper, rng.open01());
    }
    Ok(SliceDraw {
        value: x,
        degenerate: false,
    })
}

/// A fresh truncated-Beta draw: up to `exact_attempts` untruncated draws are
/// tried first, and one that lands inside (lo, hi) is an exact sample. If none
/// lands, the slice sampler runs `n_steps` iterations from the midpoint.
pub fn sample_truncated_beta(
    params: &TruncatedBetaParams,
    exact_attempts: usize,
    n_steps: usize,
    rng: &mut RngStream,
) -> Result<SliceDraw> {
    if params.is_degenerate() {
        return Ok(SliceDraw {
            value: params.midpoint(),
            degenerate: true,
        });
    }
    for _ in 0..exact_attempts {
        let x = sample_beta(params.shape_a, params.shape_b, rng)?;
        if x > params.lo && x < params.hi {
            return Ok(SliceDraw {
                value: x,
                degenerate: false,
            });
        }
    }
    slice_sample_truncated_beta(params, params.midpoint(), n_steps, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    #[test]
    fn streams_replay_and_diverge() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        let mut c = RngStream::new(7, 4);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let zs: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }

    #[test]
    fn substream_ignores_parent_position() {
        let parent = RngStream::new(11, 0);
        let mut advanced = parent.clone();
        for _ in 0..100 {
            advanced.next_u64();
        }
        let mut s1 = parent.substream(5);
        let mut s2 = advanced.substream(5);
        assert_eq!(s1.next_u64(), s2.next_u64());
        assert_ne!(parent.substream(5).next_u64(), parent.substream(6).next_u64());
    }

    #[test]
    fn beta_means() {
        let mut rng = RngStream::new(1, 0);
        for (a, b) in [(1.0, 1.0), (1.0, 5.0), (0.01, 0.5), (30.0, 2.0)] {
            let xs: Vec<f64> = (0..100_000).map(|_| sample_beta(a, b, &mut rng).unwrap()).collect();
            let (m, se) = mean_and_se(&xs);
            let expected = a / (a + b);
            assert!((m - expected).abs() < 4.0 * se, "Beta({a},{b}): {m} vs {expected}");
            assert!(xs.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn beta_rejects_bad_shapes() {
        let mut rng = RngStream::new(1, 0);
        assert!(matches!(sample_beta(0.0, 1.0, &mut rng), Err(Error::Parameter(_))));
        assert!(sample_beta(1.0, -2.0, &mut rng).is_err());
        assert!(sample_beta(f64::NAN, 1.0, &mut rng).is_err());
    }

    #[test]
    fn gamma_moments() {
        let mut rng = RngStream::new(2, 0);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_gamma(0.03, 1.0, &mut rng).unwrap()).collect();
        let (m, se) = mean_and_se(&xs);
        assert!((m - 0.03).abs() < 3.0 * se, "{m}");

        let xs: Vec<f64> = (0..n).map(|_| sample_gamma(1.0, 1.0, &mut rng).unwrap()).collect();
        let (m, _) = mean_and_se(&xs);
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((var - 1.0).abs() < 0.03, "{var}");

        let xs: Vec<f64> = (0..n).map(|_| sample_gamma(5.0, 2.0, &mut rng).unwrap()).collect();
        let (m, se) = mean_and_se(&xs);
        assert!((m - 2.5).abs() < 3.0 * se, "{m}");
        assert!(sample_gamma(0.0, 1.0, &mut rng).is_err());
        assert!(sample_gamma(1.0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn systematic_uniform_weights() {
        let mut rng = RngStream::new(3, 0);
        let mut hits = [0usize; 4];
        for _ in 0..10_000 {
            let idx = systematic_resample(&[0.0; 4], &mut rng).unwrap();
            assert_eq!(idx.len(), 4);
            for i in idx {
                hits[i] += 1;
            }
        }
        // Equal weights give every index exactly once.
        assert!(hits.iter().all(|&h| h == 10_000));
    }

    #[test]
    fn systematic_degenerate_mass() {
        let mut rng = RngStream::new(3, 1);
        let idx = systematic_resample(&[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY], &mut rng).unwrap();
        assert_eq!(idx, vec![0, 0, 0]);
        assert!(matches!(
            systematic_resample(&[f64::NEG_INFINITY; 3], &mut rng),
            Err(Error::Degenerate)
        ));
    }

    #[test]
    fn systematic_frequency_matches_weights() {
        let mut rng = RngStream::new(3, 2);
        let lw = [0.7f64.ln(), 0.3f64.ln()];
        let mut zeros = 0usize;
        let trials = 10_000;
        for _ in 0..trials {
            zeros += systematic_resample(&lw, &mut rng).unwrap().iter().filter(|&&i| i == 0).count();
        }
        let freq = zeros as f64 / (2 * trials) as f64;
        assert!((freq - 0.7).abs() < 0.01, "{freq}");
    }

    #[test]
    fn systematic_variance_not_above_multinomial() {
        let lw: Vec<f64> = [0.05, 0.2, 0.1, 0.4, 0.25].iter().map(|w: &f64| w.ln()).collect();
        let mut rng = RngStream::new(4, 0);
        let trials = 4000;
        let count_var = |scheme: ResampleScheme, rng: &mut RngStream| {
            let mut counts = vec![Vec::with_capacity(trials); lw.len()];
            for _ in 0..trials {
                let idx = resample(scheme, &lw, rng).unwrap();
                for (i, c) in counts.iter_mut().enumerate() {
                    c.push(idx.iter().filter(|&&j| j == i).count() as f64);
                }
            }
            counts
                .iter()
                .map(|c| {
                    let m = c.iter().sum::<f64>() / c.len() as f64;
                    c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / c.len() as f64
                })
                .collect::<Vec<f64>>()
        };
        let sys = count_var(ResampleScheme::Systematic, &mut rng);
        let multi = count_var(ResampleScheme::Multinomial, &mut rng);
        for (s, m) in sys.iter().zip(&multi) {
            assert!(s <= m, "systematic {s} > multinomial {m}");
        }
    }

    #[test]
    fn slice_uniform_on_interval() {
        let params = TruncatedBetaParams::new(1.0, 1.0, 0.2, 0.5).unwrap();
        let mut rng = RngStream::new(5, 0);
        let xs: Vec<f64> = (0..10_000)
            .map(|_| slice_sample_truncated_beta(&params, params.midpoint(), 20, &mut rng).unwrap().value)
            .collect();
        let (m, se) = mean_and_se(&xs);
        assert!((m - 0.35).abs() < 3.0 * se, "{m}");
        assert!(xs.iter().all(|&x| x > 0.2 && x < 0.5));
    }

    #[test]
    fn slice_rejects_start_outside() {
        let params = TruncatedBetaParams::new(2.0, 3.0, 0.1, 0.4).unwrap();
        let mut rng = RngStream::new(5, 1);
        assert!(matches!(
            slice_sample_truncated_beta(&params, 0.5, 20, &mut rng),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn slice_degenerate_interval_returns_midpoint() {
        let hi = f64::from_bits(0.3f64.to_bits() + 1);
        let params = TruncatedBetaParams::new(2.0, 3.0, 0.3, hi).unwrap();
        let mut rng = RngStream::new(5, 2);
        let draw = slice_sample_truncated_beta(&params, 0.3, 20, &mut rng).unwrap();
        assert!(draw.degenerate);
        assert_eq!(draw.value, params.midpoint());
    }

    #[test]
    fn truncated_params_validate() {
        assert!(TruncatedBetaParams::new(1.0, 1.0, 0.5, 0.5).is_err());
        assert!(TruncatedBetaParams::new(1.0, 1.0, -0.1, 0.5).is_err());
        assert!(TruncatedBetaParams::new(0.0, 1.0, 0.1, 0.5).is_err());
        assert!(TruncatedBetaParams::new(1.0, 1.0, 0.0, 1.0).is_ok());
    }

    #[test]
    fn tiny_shapes_stay_inside() {
        let params = TruncatedBetaParams::new(1e-10, 1e-10, 0.0, 1.0).unwrap();
        let mut rng = RngStream::new(6, 0);
        for _ in 0..1000 {
            let x = slice_sample_truncated_beta(&params, 0.5, 20, &mut rng).unwrap().value;
            assert!(x >= 0.0 && x <= 1.0 && x.is_finite());
        }
        let huge = TruncatedBetaParams::new(1e6, 2.0, 0.1, 0.9).unwrap();
        let x = slice_sample_truncated_beta(&huge, 0.5, 20, &mut rng).unwrap().value;
        assert!(x > 0.89 && x < 0.9, "{x}");
    }

    #[test]
    fn categorical_handles_underflow() {
        let mut rng = RngStream::new(8, 0);
        let lw = [-2000.0, -2001.0, f64::NEG_INFINITY];
        let mut hits = [0usize; 3];
        for _ in 0..20_000 {
            hits[sample_log_categorical(&lw, &mut rng).unwrap()] += 1;
        }
        assert_eq!(hits[2], 0);
        let p0 = hits[0] as f64 / 20_000.0;
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((p0 - expected).abs() < 0.015);
    }

    #[test]
    fn ess_bounds() {
        assert!((effective_sample_size(&[0.0; 10]) - 10.0).abs() < 1e-12);
        assert!((effective_sample_size(&[0.0, f64::NEG_INFINITY]) - 1.0).abs() < 1e-12);
        assert_eq!(effective_sample_size(&[f64::NEG_INFINITY]), 0.0);
    }

    proptest::proptest! {
        #[test]
        fn prop_slice_draws_stay_inside(
            a in 0.05f64..10.0,
            b in 0.05f64..10.0,
            lo in 0.0f64..0.9,
            width in 1e-6f64..1.0,
            seed: u64,
        ) {
            let hi = (lo + width).min(1.0);
            let params = TruncatedBetaParams::new(a, b, lo, hi).unwrap();
            let mut rng = RngStream::new(seed, 0);
            let draw = slice_sample_truncated_beta(&params, params.midpoint(), 5, &mut rng).unwrap();
            proptest::prop_assert!(draw.value >= lo && draw.value <= hi);
        }

        #[test]
        fn prop_resample_indices_cover_support(
            logw in proptest::collection::vec(-30.0f64..0.0, 1..40),
            seed: u64,
        ) {
            let mut rng = RngStream::new(seed, 1);
            for scheme in [ResampleScheme::Systematic, ResampleScheme::Multinomial] {
                let idx = resample(scheme, &logw, &mut rng).unwrap();
                proptest::prop_assert_eq!(idx.len(), logw.len());
                proptest::prop_assert!(idx.iter().all(|&i| i < logw.len()));
            }
            let ess = effective_sample_size(&logw);
            proptest::prop_assert!(ess >= 1.0 - 1e-9 && ess <= logw.len() as f64 + 1e-9);
        }
    }
}
