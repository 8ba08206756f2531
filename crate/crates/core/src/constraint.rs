//! KL-bounded sampling of a successor measure.
//!
//! The successor G_{j+1} is built stick by stick. At each position l the
//! symmetric KL between G_j and G_{j+1} is replaced by an aggregate over three
//! lumps: the components before l, component l itself, and everything after
//! l. With the head of G_{j+1} already fixed, the aggregate is a convex
//! function of the single unknown weight, so the set of admissible weights is
//! an interval whose endpoints are the roots of `f(x) = B - C`. The stick for
//! position l is then drawn from its usual Beta, truncated to that interval.
//!
//! Positions are zero-based throughout: `position = 0` singles out the first
//! component and has an empty head.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::{child_stick_shapes, floor_and_normalize, sample_child_measure, sample_gem, DiscreteMeasure, StickVariables};
use crate::sampling::{sample_truncated_beta, RngStream, TruncatedBetaParams, DEFAULT_SLICE_STEPS, ONE_MINUS_ULP};

/// Slack allowed when re-checking aggregated constraints on a finished measure.
pub const CONSTRAINT_TOLERANCE: f64 = 1e-8;

/// Smallest admissible remaining stick for [`stick_bounds_from_weight_bounds`].
pub const MIN_REMAINING_STICK: f64 = 1e-12;

/// Relative offset from either end of (0, R) at which endpoint feasibility is
/// probed. Points closer to an end than this share the probe's verdict.
pub const ENDPOINT_OFFSET: f64 = 1e-10;

/// `(a - b) ln(a / b)`: the symmetric-KL contribution of one pair of lumps.
/// Two empty lumps contribute nothing.
fn lump_term(a: f64, b: f64) -> Result<f64> {
    if a == 0.0 && b == 0.0 {
        return Ok(0.0);
    }
    if a <= 0.0 || b <= 0.0 {
        return Err(Error::Domain(format!(
            "lump masses {a:e} and {b:e}: one side is empty while the other is not"
        )));
    }
    Ok((a - b) * (a / b).ln())
}

fn check_same_len(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Dimension {
            expected: p.len(),
            got: q.len(),
        });
    }
    Ok(())
}

/// `sum_i p_i ln(p_i/q_i) + q_i ln(q_i/p_i)` over raw weight slices.
pub fn symmetric_kl_weights(p: &[f64], q: &[f64]) -> Result<f64> {
    check_same_len(p, q)?;
    let mut total = 0.0;
    for (i, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a <= 0.0 || b <= 0.0 {
            return Err(Error::Domain(format!(
                "component {i} has zero weight ({a:e} vs {b:e}); floor the measures first"
            )));
        }
        total += (a - b) * (a / b).ln();
    }
    Ok(total)
}

/// Symmetric KL divergence between two floored measures on the same atoms.
pub fn symmetric_kl(p: &DiscreteMeasure, q: &DiscreteMeasure) -> Result<f64> {
    symmetric_kl_weights(p.weights(), q.weights())
}

fn prefix_sums(w: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(w.len() + 1);
    out.push(0.0);
    let mut acc = 0.0;
    for &x in w {
        acc += x;
        out.push(acc);
    }
    out
}

fn suffix_sums(w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.len() + 1];
    for i in (0..w.len()).rev() {
        out[i] = out[i + 1] + w[i];
    }
    out
}

/// Aggregated symmetric KL at every position `0..K`, in one pass.
pub fn aggregated_kl_profile(p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    check_same_len(p, q)?;
    let (hp, hq) = (prefix_sums(p), prefix_sums(q));
    let (tp, tq) = (suffix_sums(p), suffix_sums(q));
    (0..p.len())
        .map(|l| Ok(lump_term(hp[l], hq[l])? + lump_term(p[l], q[l])? + lump_term(tp[l + 1], tq[l + 1])?))
        .collect()
}

/// Symmetric KL after lumping components `< position` and `> position`.
pub fn aggregated_kl(position: usize, p: &DiscreteMeasure, q: &DiscreteMeasure) -> Result<f64> {
    let (p, q) = (p.weights(), q.weights());
    check_same_len(p, q)?;
    if position >= p.len() {
        return Err(Error::Parameter(format!("position {position} is outside 0..{}", p.len())));
    }
    let head = lump_term(p[..position].iter().sum(), q[..position].iter().sum())?;
    let point = lump_term(p[position], q[position])?;
    let tail = lump_term(p[position + 1..].iter().sum(), q[position + 1..].iter().sum())?;
    Ok(head + point + tail)
}

/// The scalar summary of a constraint context that the interval solver needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Lumps {
    /// Mass of the predecessor before the position.
    pub head_prev: f64,
    /// Mass already fixed in the successor before the position.
    pub head_next: f64,
    /// The predecessor's weight at the position.
    pub point_prev: f64,
    /// Mass of the predecessor after the position.
    pub tail_prev: f64,
    /// Unallocated successor mass, `1 - head_next`.
    pub remaining: f64,
}

impl Lumps {
    fn head_term(&self) -> Result<f64> {
        lump_term(self.head_prev, self.head_next)
    }

    /// Aggregated KL minus the head term, as a function of the successor's
    /// weight x at the position.
    fn g(&self, x: f64) -> f64 {
        self.g_split(x, self.remaining - x)
    }

    /// Same as `g`, with the successor's tail mass passed explicitly so it
    /// stays accurate when it is far below `remaining`.
    fn g_split(&self, x: f64, tail_next: f64) -> f64 {
        let p = self.point_prev;
        let t = self.tail_prev;
        (p - x) * (p / x).ln() + (t - tail_next) * (t / tail_next).ln()
    }

    /// d g / d x, with the same explicit tail.
    fn g_prime(&self, x: f64, tail_next: f64) -> f64 {
        let p = self.point_prev;
        let t = self.tail_prev;
        (x * t / (p * tail_next)).ln() - p / x + t / tail_next
    }

    /// Minimizer of `g`: splitting the remaining mass in the predecessor's
    /// proportions makes the point and tail log-ratios equal.
    pub fn minimizer(&self) -> f64 {
        self.remaining * self.point_prev / (self.point_prev + self.tail_prev)
    }
}

/// The conditioning set for choosing the successor's weight at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintContext<'a> {
    pub base: &'a DiscreteMeasure,
    pub predecessor: &'a DiscreteMeasure,
    partial_next: Vec<f64>,
    partial_sticks: Vec<f64>,
    pub bound: f64,
    pub alpha: f64,
}

impl<'a> ConstraintContext<'a> {
    /// Build a context from the successor sticks already drawn; the position
    /// is `partial_sticks.len()`.
    pub fn new(
        base: &'a DiscreteMeasure,
        predecessor: &'a DiscreteMeasure,
        partial_sticks: Vec<f64>,
        bound: f64,
        alpha: f64,
    ) -> Result<Self> {
        check_same_len(base.weights(), predecessor.weights())?;
        let k = base.len();
        if partial_sticks.len() + 1 >= k {
            return Err(Error::Parameter(format!(
                "position {} is outside the constrained range 0..{}",
                partial_sticks.len(),
                k - 1
            )));
        }
        if let Some(s) = partial_sticks.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
            return Err(Error::Parameter(format!("partial stick {s} is not inside (0, 1)")));
        }
        if let Some(w) = predecessor.weights().iter().find(|w| **w <= 0.0) {
            return Err(Error::Domain(format!("predecessor weight {w:e} is not positive; floor it first")));
        }
        if !(bound > 0.0) || !(alpha > 0.0) {
            return Err(Error::Parameter(format!("bound {bound} and alpha {alpha} must be positive")));
        }
        let mut remaining = 1.0;
        let partial_next = partial_sticks
            .iter()
            .map(|s| {
                let w = s * remaining;
                remaining *= 1.0 - s;
                w
            })
            .collect::<Vec<f64>>();
        if !(remaining > 0.0) {
            return Err(Error::Parameter("partial successor weights already exhaust the simplex".into()));
        }
        Ok(Self {
            base,
            predecessor,
            partial_next,
            partial_sticks,
            bound,
            alpha,
        })
    }

    pub fn position(&self) -> usize {
        self.partial_sticks.len()
    }

    pub fn partial_next(&self) -> &[f64] {
        &self.partial_next
    }

    pub fn partial_sticks(&self) -> &[f64] {
        &self.partial_sticks
    }

    pub fn lumps(&self) -> Lumps {
        let l = self.position();
        let w = self.predecessor.weights();
        Lumps {
            head_prev: w[..l].iter().sum(),
            head_next: self.partial_next.iter().sum(),
            point_prev: w[l],
            tail_prev: w[l + 1..].iter().sum(),
            remaining: self.partial_sticks.iter().map(|s| 1.0 - s).product(),
        }
    }

    /// Beta shapes of the untruncated stick at this position.
    pub fn stick_shapes(&self) -> Result<(f64, f64)> {
        Ok(child_stick_shapes(self.base, self.alpha)?[self.position()])
    }
}

/// The part of the aggregated KL that does not depend on the candidate:
/// the head cross terms plus `p_l ln p_l`.
pub fn constraint_constant(ctx: &ConstraintContext) -> Result<f64> {
    let lumps = ctx.lumps();
    let p = lumps.point_prev;
    Ok(lumps.head_term()? + p * p.ln())
}

fn check_candidate(x: f64, lumps: &Lumps) -> Result<()> {
    if !(x > 0.0 && x < lumps.remaining) {
        return Err(Error::Domain(format!(
            "candidate {x:e} is outside (0, {:e})",
            lumps.remaining
        )));
    }
    Ok(())
}

/// `f(x)` such that the aggregated constraint reads `f(x) <= B - C`.
/// Evaluated by substituting x into the three-lump aggregate and removing C.
pub fn constraint_function(x: f64, ctx: &ConstraintContext) -> Result<f64> {
    let lumps = ctx.lumps();
    check_candidate(x, &lumps)?;
    let p = lumps.point_prev;
    Ok(lumps.g(x) - p * p.ln())
}

/// The same function written out term by term:
/// `x ln(x/p) - p ln x - T ln(R - x) + (R - x) ln((R - x)/T) + T ln T`,
/// where T is the predecessor's tail mass and R the remaining successor mass.
pub fn constraint_function_expanded(x: f64, ctx: &ConstraintContext) -> Result<f64> {
    let Lumps {
        point_prev: p,
        tail_prev: t,
        remaining: r,
        ..
    } = ctx.lumps();
    if !(x > 0.0 && x < r) {
        return Err(Error::Domain(format!("candidate {x:e} is outside (0, {r:e})")));
    }
    let rest = r - x;
    Ok(x * (x / p).ln() - p * x.ln() - t * rest.ln() + rest * (rest / t).ln() + t * t.ln())
}

/// Which of the five shapes the feasible set takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CaseTag {
    /// Two roots; feasible between them.
    TwoRoots,
    /// Feasible from zero up to a single root.
    LeftOfRoot,
    /// Feasible from a single root up to the remaining mass.
    RightOfRoot,
    /// The whole open interval is feasible.
    Whole,
    /// The bound is too tight at this position.
    Empty,
}

/// Admissible values of the successor weight at one position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeasibleInterval {
    pub case_tag: CaseTag,
    pub lo: f64,
    pub hi: f64,
    /// The remaining mass the interval lives in.
    pub remaining: f64,
    /// `min f - (B - C)`; positive exactly when the interval is empty.
    pub excess: f64,
}

impl FeasibleInterval {
    pub fn is_empty(&self) -> bool {
        self.case_tag == CaseTag::Empty
    }

    pub fn contains(&self, x: f64) -> bool {
        !self.is_empty() && x > self.lo && x < self.hi
    }
}

/// Safeguarded Newton on a monotone function `h` over a log-scaled variable,
/// bracketed by a feasible (`h <= 0`) and an infeasible (`h > 0`) end.
fn bracketed_root(mut feasible: f64, mut infeasible: f64, h: impl Fn(f64) -> (f64, f64)) -> f64 {
    const TOL: f64 = 1e-13;
    let mut v = 0.5 * (feasible + infeasible);
    for _ in 0..200 {
        let (value, slope) = h(v);
        if value.abs() <= TOL {
            return v;
        }
        if value <= 0.0 {
            feasible = v;
        } else {
            infeasible = v;
        }
        let (lo, hi) = if feasible < infeasible {
            (feasible, infeasible)
        } else {
            (infeasible, feasible)
        };
        let newton = v - value / slope;
        let mid = 0.5 * (lo + hi);
        v = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            mid
        };
        if v <= lo || v >= hi {
            break;
        }
    }
    feasible
}

/// Solve for the interval of weights satisfying the constraint, given the
/// lump summary and the bound. An infinite bound disables the constraint.
pub fn solve_lumps(lumps: &Lumps, bound: f64) -> Result<FeasibleInterval> {
    let r = lumps.remaining;
    let whole = FeasibleInterval {
        case_tag: CaseTag::Whole,
        lo: 0.0,
        hi: r,
        remaining: r,
        excess: f64::NEG_INFINITY,
    };
    if bound == f64::INFINITY {
        return Ok(whole);
    }
    let target = bound - lumps.head_term()?;
    let (p, t) = (lumps.point_prev, lumps.tail_prev);
    let x_star = lumps.minimizer();
    let s = p + t;
    let g_min = (s - r) * (s / r).ln();
    if !(g_min <= target) {
        return Ok(FeasibleInterval {
            case_tag: CaseTag::Empty,
            lo: x_star,
            hi: x_star,
            remaining: r,
            excess: g_min - target,
        });
    }

    // Left root, searched over ln x in [ln(R delta), ln x*].
    let x_left_end = r * ENDPOINT_OFFSET;
    let left_open = x_left_end >= x_star || lumps.g(x_left_end) <= target;
    let lo = if left_open {
        0.0
    } else {
        let u = bracketed_root(x_star.ln(), x_left_end.ln(), |u| {
            let x = u.exp();
            let rest = r - x;
            (lumps.g_split(x, rest) - target, x * lumps.g_prime(x, rest))
        });
        u.exp()
    };

    // Right root, searched over ln t where t = R - x is the successor's tail.
    let t_end = r * ENDPOINT_OFFSET;
    let t_star = r - x_star;
    let right_open = t_end >= t_star || lumps.g_split(r - t_end, t_end) <= target;
    let hi = if right_open {
        r
    } else {
        let v = bracketed_root(t_star.ln(), t_end.ln(), |v| {
            let tail = v.exp();
            let x = r - tail;
            (lumps.g_split(x, tail) - target, -tail * lumps.g_prime(x, tail))
        });
        r - v.exp()
    };

    let case_tag = match (left_open, right_open) {
        (true, true) => CaseTag::Whole,
        (true, false) => CaseTag::LeftOfRoot,
        (false, true) => CaseTag::RightOfRoot,
        (false, false) => CaseTag::TwoRoots,
    };
    Ok(FeasibleInterval {
        case_tag,
        lo,
        hi,
        remaining: r,
        excess: g_min - target,
    })
}

/// The feasible interval for the successor weight at the context's position.
pub fn solve_feasible_interval(ctx: &ConstraintContext) -> Result<FeasibleInterval> {
    solve_lumps(&ctx.lumps(), ctx.bound)
}

/// Rescale weight bounds into stick bounds by dividing by the remaining stick
/// `prod (1 - s_i)`, clipped to [0, 1].
pub fn stick_bounds_from_weight_bounds(interval: &FeasibleInterval, partial_sticks: &[f64]) -> Result<(f64, f64)> {
    if interval.is_empty() {
        return Err(Error::Precondition("cannot rescale an empty interval".into()));
    }
    let remaining: f64 = partial_sticks.iter().map(|s| 1.0 - s).product();
    if remaining < MIN_REMAINING_STICK {
        return Err(Error::DegenerateStick { remaining });
    }
    Ok(rescale(interval, remaining))
}

fn rescale(interval: &FeasibleInterval, remaining: f64) -> (f64, f64) {
    (
        (interval.lo / remaining).clamp(0.0, 1.0),
        (interval.hi / remaining).clamp(0.0, 1.0),
    )
}

/// Tuning for [`sample_constrained_child`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct ConstrainedConfig {
    pub epsilon: f64,
    /// Extra whole-measure attempts after the first one fails.
    pub max_retries: usize,
    pub slice_steps: usize,
    /// Untruncated Beta draws tried before falling back to the slice sampler.
    pub exact_attempts: usize,
}

impl Default for ConstrainedConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_retries: 10,
            slice_steps: DEFAULT_SLICE_STEPS,
            exact_attempts: 3,
        }
    }
}

/// A successor measure that satisfies every aggregated constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedDraw {
    /// Successor weights, each at least `epsilon`.
    pub measure: DiscreteMeasure,
    pub sticks: StickVariables,
    pub attempts: usize,
    /// Positions whose truncated interval collapsed to a point.
    pub degenerate_positions: usize,
}

struct Rejection {
    position: usize,
    gap: f64,
}

/// Draw G_{j+1} ~ DP(alpha, G_0) subject to
/// `aggregated_kl(l, G_j, G_{j+1}) <= bound` for every position, re-checked
/// on the floored result. `bound = f64::INFINITY` gives the unconstrained
/// child through the same code path (see [`sample_floored_child`]).
pub fn sample_constrained_child(
    base: &DiscreteMeasure,
    predecessor: &DiscreteMeasure,
    alpha: f64,
    bound: f64,
    cfg: &ConstrainedConfig,
    rng: &mut RngStream,
) -> Result<ConstrainedDraw> {
    check_same_len(base.weights(), predecessor.weights())?;
    let k = base.len();
    if k < 2 {
        return Err(Error::Parameter("truncation level must be at least 2".into()));
    }
    if !(bound > 0.0) {
        return Err(Error::Parameter(format!("bound must be positive, got {bound}")));
    }
    if !(cfg.epsilon > 0.0) || cfg.epsilon * k as f64 >= 1.0 {
        return Err(Error::Parameter(format!(
            "floor {} is infeasible for {k} atoms (need 0 < eps * K < 1)",
            cfg.epsilon
        )));
    }
    if let Some(w) = predecessor.weights().iter().find(|w| **w <= 0.0) {
        return Err(Error::Domain(format!("predecessor weight {w:e} is not positive; floor it first")));
    }
    let shapes = child_stick_shapes(base, alpha)?;
    let pred = predecessor.weights();
    let head_prev = prefix_sums(pred);
    let tail_prev = suffix_sums(pred);

    let mut last = Rejection { position: 0, gap: 0.0 };
    for attempt in 1..=cfg.max_retries + 1 {
        match draw_once(base, &shapes, pred, &head_prev, &tail_prev, bound, cfg, rng)? {
            Ok((measure, sticks, degenerate_positions)) => {
                return Ok(ConstrainedDraw {
                    measure,
                    sticks,
                    attempts: attempt,
                    degenerate_positions,
                })
            }
            Err(rejection) => last = rejection,
        }
    }
    Err(Error::Infeasible {
        position: last.position,
        attempts: cfg.max_retries + 1,
        gap: last.gap,
    })
}

/// An unconstrained child with the same floor-as-you-go convention as the
/// constrained sampler; the HDP side of every comparison uses this so the
/// two models differ only in the bound.
pub fn sample_floored_child(
    base: &DiscreteMeasure,
    alpha: f64,
    cfg: &ConstrainedConfig,
    rng: &mut RngStream,
) -> Result<ConstrainedDraw> {
    sample_constrained_child(base, base, alpha, f64::INFINITY, cfg, rng)
}

#[allow(clippy::too_many_arguments)]
fn draw_once(
    base: &DiscreteMeasure,
    shapes: &[(f64, f64)],
    pred: &[f64],
    head_prev: &[f64],
    tail_prev: &[f64],
    bound: f64,
    cfg: &ConstrainedConfig,
    rng: &mut RngStream,
) -> Result<std::result::Result<(DiscreteMeasure, StickVariables, usize), Rejection>> {
    let k = pred.len();
    let eps = cfg.epsilon;
    let mut sticks = Vec::with_capacity(k - 1);
    let mut weights = Vec::with_capacity(k);
    let mut head_next = 0.0;
    let mut remaining = 1.0;
    let mut degenerate = 0;
    for l in 0..k - 1 {
        let (a, b) = shapes[l];
        let lumps = Lumps {
            head_prev: head_prev[l],
            head_next,
            point_prev: pred[l],
            tail_prev: tail_prev[l + 1],
            remaining,
        };
        let interval = solve_lumps(&lumps, bound)?;
        if interval.is_empty() {
            return Ok(Err(Rejection {
                position: l,
                gap: interval.excess,
            }));
        }
        let (lo, hi) = rescale(&interval, remaining);
        let stick = if hi - lo <= 4.0 * f64::EPSILON * hi {
            degenerate += 1;
            lo + 0.5 * (hi - lo)
        } else {
            let params = TruncatedBetaParams::new(a, b, lo, hi)?;
            let draw = sample_truncated_beta(&params, cfg.exact_attempts, cfg.slice_steps, rng)?;
            degenerate += usize::from(draw.degenerate);
            draw.value
        };
        // Floor as we go, leaving room for every later component to reach
        // the floor too, so the finished weights need no renormalization and
        // the constraints hold on exactly the weights returned.
        let ceiling = remaining - (k - 1 - l) as f64 * eps;
        let w = (stick.clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP) * remaining).max(eps).min(ceiling);
        if bound.is_finite() {
            let excess = lumps.g_split(w, remaining - w) + lumps.head_term()? - bound;
            if excess > CONSTRAINT_TOLERANCE {
                return Ok(Err(Rejection { position: l, gap: excess }));
            }
        }
        sticks.push(w / remaining);
        weights.push(w);
        head_next += w;
        remaining -= w;
    }
    weights.push(remaining);

    let measure = DiscreteMeasure::from_parts_unchecked(weights, base.atom_ids().to_vec());
    if bound.is_finite() {
        let profile = aggregated_kl_profile(pred, measure.weights())?;
        if let Some((position, value)) = profile
            .iter()
            .copied()
            .enumerate()
            .find(|(_, v)| *v > bound + CONSTRAINT_TOLERANCE)
        {
            return Ok(Err(Rejection {
                position,
                gap: value - bound,
            }));
        }
    }
    Ok(Ok((measure, StickVariables::from_vec_unchecked(sticks), degenerate)))
}

/// Monte Carlo estimate of `E[KL - aggKL(position)]` for unconstrained child
/// pairs of a single GEM(gamma) base. Lumping never increases a divergence,
/// so every sampled gap is non-negative and the mean is positive whenever a
/// lump holds two components whose ratios differ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapEstimate {
    pub mean: f64,
    pub standard_error: f64,
    /// Share of pairs whose gap exceeds 1e-6 in magnitude.
    pub nonzero_fraction: f64,
    /// Smallest sampled gap; negative only through rounding.
    pub min_gap: f64,
    pub n_samples: usize,
}

pub fn expectation_gap(
    gamma: f64,
    alpha: f64,
    position: usize,
    n_samples: usize,
    k: usize,
    epsilon: f64,
    rng: &mut RngStream,
) -> Result<GapEstimate> {
    if n_samples < 100 {
        return Err(Error::Parameter(format!("need at least 100 samples, got {n_samples}")));
    }
    if position >= k {
        return Err(Error::Parameter(format!("position {position} is outside 0..{k}")));
    }
    let (_, base) = sample_gem(gamma, k, rng)?;
    let base = floor_and_normalize(&base, epsilon)?;
    let mut gaps = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let p = floor_and_normalize(&sample_child_measure(&base, alpha, rng)?.1, epsilon)?;
        let q = floor_and_normalize(&sample_child_measure(&base, alpha, rng)?.1, epsilon)?;
        gaps.push(symmetric_kl(&p, &q)? - aggregated_kl(position, &p, &q)?);
    }
    let n = n_samples as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(GapEstimate {
        mean,
        standard_error: (var / n).sqrt(),
        nonzero_fraction: gaps.iter().filter(|g| g.abs() > 1e-6).count() as f64 / n,
        min_gap: gaps.iter().copied().fold(f64::INFINITY, f64::min),
        n_samples,
    })
}

/// A dump of `f` over a grid alongside the solved interval, for tooling that
/// plots or cross-checks the solver.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalDiagnostics {
    pub position: usize,
    pub lumps: Lumps,
    pub constant: f64,
    pub target: f64,
    pub interval: FeasibleInterval,
    /// `(x, f(x))` pairs on an even grid strictly inside (0, R).
    pub grid: Vec<(f64, f64)>,
}

pub fn diagnose_interval(ctx: &ConstraintContext, grid_points: usize) -> Result<IntervalDiagnostics> {
    let lumps = ctx.lumps();
    let constant = constraint_constant(ctx)?;
    let interval = solve_feasible_interval(ctx)?;
    let r = lumps.remaining;
    let grid = (1..=grid_points)
        .map(|i| {
            let x = r * i as f64 / (grid_points + 1) as f64;
            constraint_function(x, ctx).map(|f| (x, f))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IntervalDiagnostics {
        position: ctx.position(),
        lumps,
        constant,
        target: ctx.bound - constant,
        interval,
        grid,
    })
}
