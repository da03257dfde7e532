//! The generic particle filter, run over a batch of independent filters.
//!
//! A batch of `filters` filters with `particles` particles each is stored
//! flat: particle `j` of filter `b` lives at index `b * particles + j`. All
//! weight arithmetic is in the log domain and every step resamples.

use rand::Rng as _;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::params::ParamError;
use crate::rng::{FilterRngs, Rng};
use crate::ssm::SsmError;

/// Largest log-weight below which a filter counts as degenerate.
pub const DEGENERACY_FLOOR: f64 = -1e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("all particle weights vanished at step {step} in filter {row}")]
    Degenerate { step: usize, row: usize },
    #[error("soft-resampling mixture {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("a filter needs at least one particle and one step")]
    Empty,
    #[error("expected {expected} random streams, got {got}")]
    StreamCount { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    Model(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

pub type Result<T> = std::result::Result<T, FilterError>;

/// Shape of a batch of filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub filters: usize,
    pub particles: usize,
}

impl Layout {
    pub fn new(filters: usize, particles: usize) -> Self {
        Layout { filters, particles }
    }

    /// Total number of particles.
    pub fn size(&self) -> usize {
        self.filters * self.particles
    }

    /// The filter a flat particle index belongs to.
    pub fn row(&self, i: usize) -> usize {
        i / self.particles
    }

    /// Repeats one value per filter for each of its particles.
    pub fn expand(&self, per_row: &[f64]) -> Vec<f64> {
        per_row
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, self.particles))
            .collect()
    }
}

/// Per-particle state that can be reindexed by resampling.
pub trait Particles<'t>: Sized {
    /// Keeps the particles at the given flat indices. With `detach`, the
    /// selected values carry no gradient back to their ancestors.
    fn select(&self, indices: &[usize], detach: bool) -> Result<Self>;

    /// Particle locations, for models that estimate a state.
    fn locations(&self) -> Option<&Var<'t>>;
}

/// A state-space model together with its proposal, seen by the filter.
pub trait FilterModel<'t> {
    type State: Particles<'t>;

    /// Number of time steps, `T + 1`.
    fn n_steps(&self) -> usize;

    /// Draws the initial particles and returns them with their log
    /// importance weights `log(M0 / Q0 * G)`, flat `[filters * particles]`.
    fn initialize(
        &self,
        tape: &'t Tape,
        layout: Layout,
        rngs: &mut [FilterRngs],
    ) -> Result<(Self::State, Var<'t>)>;

    /// Proposes step `t` from resampled particles and returns the log
    /// incremental weight `log(M / Q * G)`.
    fn propagate(
        &self,
        tape: &'t Tape,
        t: usize,
        layout: Layout,
        state: Self::State,
        rngs: &mut [FilterRngs],
    ) -> Result<(Self::State, Var<'t>)>;
}

/// Locations-only particles.
#[derive(Clone, Debug)]
pub struct Locations<'t>(pub Var<'t>);

impl<'t> Particles<'t> for Locations<'t> {
    fn select(&self, indices: &[usize], detach: bool) -> Result<Self> {
        let x = self.0.gather(indices)?;
        Ok(Locations(if detach { x.stop_gradient()? } else { x }))
    }

    fn locations(&self) -> Option<&Var<'t>> {
        Some(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    Multinomial,
    Systematic,
    /// Draws from `alpha * w + (1 - alpha) / N` and carries the correction
    /// `w / q`.
    Soft { alpha: f64 },
    /// Multinomial draws with particle histories cut from the gradient.
    TruncatedGradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resampler {
    pub scheme: Scheme,
    /// Resample a filter only when its effective sample size falls below
    /// this fraction of `N`. `None` resamples every step.
    pub ess_threshold: Option<f64>,
}

impl Resampler {
    pub fn every_step(scheme: Scheme) -> Self {
        Resampler {
            scheme,
            ess_threshold: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if let Scheme::Soft { alpha } = self.scheme {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(FilterError::InvalidAlpha(alpha));
            }
        }
        Ok(())
    }
}

pub struct FilterOutput<'t> {
    pub layout: Layout,
    /// Filtering means per step, each `[filters]`. Empty when the particles
    /// have no locations.
    pub estimates: Vec<Var<'t>>,
    /// `logsumexp(log w_t) - log N` per step, each `[filters]`.
    pub log_lik_increments: Vec<Var<'t>>,
    /// Sum of the increments, `[filters]`.
    pub log_lik: Var<'t>,
    /// Normalised log-weights at the final step, `[filters, particles]`.
    pub final_log_weights: Var<'t>,
    /// Flat ancestor indices chosen before each step `t >= 1`.
    pub ancestors: Vec<Vec<usize>>,
}

impl FilterOutput<'_> {
    /// Estimates as `[filter][step]`.
    pub fn estimate_paths(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::with_capacity(self.estimates.len()); self.layout.filters];
        for step in &self.estimates {
            for (row, v) in out.iter_mut().zip(step.data().iter()) {
                row.push(*v);
            }
        }
        out
    }

    pub fn log_lik_values(&self) -> Vec<f64> {
        self.log_lik.to_vec()
    }
}

/// Runs a batch of particle filters.
///
/// `rngs` holds one set of streams per filter; each filter draws only from
/// its own streams, so its output does not depend on the rest of the batch.
pub fn run_filter<'t, M: FilterModel<'t>>(
    tape: &'t Tape,
    model: &M,
    layout: Layout,
    resampler: Resampler,
    rngs: &mut [FilterRngs],
) -> Result<FilterOutput<'t>> {
    resampler.validate()?;
    if layout.particles == 0 || layout.filters == 0 || model.n_steps() == 0 {
        return Err(FilterError::Empty);
    }
    if rngs.len() != layout.filters {
        return Err(FilterError::StreamCount {
            expected: layout.filters,
            got: rngs.len(),
        });
    }
    let (b, n) = (layout.filters, layout.particles);
    let log_n = (n as f64).ln();

    let (mut state, mut log_w) = model.initialize(tape, layout, rngs)?;
    let mut estimates = Vec::with_capacity(model.n_steps());
    let mut increments = Vec::with_capacity(model.n_steps());
    let mut ancestors = Vec::with_capacity(model.n_steps().saturating_sub(1));
    let mut norm_log: Option<Var<'t>> = None;

    for t in 0..model.n_steps() {
        if let Some(prev) = &norm_log {
            let (idx, carried) = resample(tape, prev, layout, resampler, rngs)?;
            let detach = resampler.scheme == Scheme::TruncatedGradient;
            let selected = state.select(&idx, detach)?;
            let (next, inc) = model.propagate(tape, t, layout, selected, rngs)?;
            state = next;
            log_w = match carried {
                Some(c) => c.add(&inc)?,
                None => inc,
            };
            ancestors.push(idx);
        }
        let lw = log_w.reshape(&[b, n])?;
        check_degeneracy(&lw, t)?;
        let lse = lw.logsumexp_rows()?;
        increments.push(lse.offset(-log_n));
        let normalized = lw.sub(&lse.reshape(&[b, 1])?)?;
        if let Some(x) = state.locations() {
            let mean = normalized
                .exp()
                .mul(&x.reshape(&[b, n])?)?
                .sum_axis(1)?;
            estimates.push(mean);
        }
        norm_log = Some(normalized);
    }

    let mut log_lik = increments[0].clone();
    for inc in &increments[1..] {
        log_lik = log_lik.add(inc)?;
    }
    Ok(FilterOutput {
        layout,
        estimates,
        log_lik_increments: increments,
        log_lik,
        final_log_weights: norm_log.expect("at least one step"),
        ancestors,
    })
}

fn check_degeneracy(lw: &Var<'_>, step: usize) -> Result<()> {
    for (row, weights) in lw.data().outer_iter().enumerate() {
        let best = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bad = weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY);
        if bad || best.is_nan() || best < DEGENERACY_FLOOR {
            return Err(FilterError::Degenerate { step, row });
        }
    }
    Ok(())
}

/// Chooses ancestors for every filter and returns them with the log carried
/// weights, `None` meaning uniform.
fn resample<'t>(
    tape: &'t Tape,
    norm_log: &Var<'t>,
    layout: Layout,
    resampler: Resampler,
    rngs: &mut [FilterRngs],
) -> Result<(Vec<usize>, Option<Var<'t>>)> {
    let (b, n) = (layout.filters, layout.particles);
    let data = norm_log.data();
    let mut indices = Vec::with_capacity(b * n);
    let mut skipped = vec![false; b];
    let soft_alpha = match resampler.scheme {
        Scheme::Soft { alpha } => Some(alpha),
        _ => None,
    };
    for (row, (weights_log, rng)) in data.outer_iter().zip(rngs.iter_mut()).enumerate() {
        let weights: Vec<f64> = weights_log.iter().map(|l| l.exp()).collect();
        if let Some(threshold) = resampler.ess_threshold {
            let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
            if ess >= threshold * n as f64 {
                skipped[row] = true;
                indices.extend((0..n).map(|j| row * n + j));
                continue;
            }
        }
        let local = match resampler.scheme {
            Scheme::Multinomial | Scheme::TruncatedGradient => {
                multinomial_resample(&weights, n, &mut rng.resample)
            }
            Scheme::Systematic => systematic_resample(&weights, n, &mut rng.resample),
            Scheme::Soft { alpha } => {
                multinomial_resample(&soft_proposal(&weights, alpha)?, n, &mut rng.resample)
            }
        };
        indices.extend(local.into_iter().map(|a| row * n + a));
    }

    let any_skipped = skipped.iter().any(|&s| s);
    let needs_soft = soft_alpha.is_some_and(|a| a < 1.0);
    if !any_skipped && !needs_soft {
        return Ok((indices, None));
    }
    let flat = norm_log.reshape(&[b * n])?.gather(&indices)?;
    let resampled = match soft_alpha {
        Some(alpha) if alpha < 1.0 => {
            // log(w / q) with q = alpha * w + (1 - alpha) / N, differentiable in w.
            let q = flat
                .exp()
                .scale(alpha)
                .offset((1.0 - alpha) / n as f64)
                .ln();
            Some(flat.sub(&q)?)
        }
        _ => None,
    };
    if !any_skipped {
        return Ok((indices, resampled));
    }
    // Skipped filters keep N times their normalised weights.
    let keep = flat.offset((n as f64).ln());
    let mask: Vec<f64> = layout.expand(&skipped.iter().map(|&s| f64::from(u8::from(s))).collect::<Vec<_>>());
    let mask = tape.vector(mask);
    let mut carried = keep.mul(&mask)?;
    if let Some(r) = resampled {
        let inverse = mask.scale(-1.0).offset(1.0);
        carried = carried.add(&r.mul(&inverse)?)?;
    }
    Ok((indices, Some(carried)))
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

/// Checks that `weights` is a probability vector within `tol`.
pub fn validate_simplex(weights: &[f64], tol: f64) -> Result<()> {
    if weights.is_empty() {
        return Err(FilterError::InvalidWeights("empty".into()));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(FilterError::InvalidWeights(format!("entry {w}")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > tol {
        return Err(FilterError::InvalidWeights(format!("sum {total}")));
    }
    Ok(())
}

/// `n` i.i.d. categorical draws from `weights`.
pub fn multinomial_resample(weights: &[f64], n: usize, rng: &mut Rng) -> Vec<usize> {
    let cdf = cumulative(weights);
    let total = *cdf.last().unwrap_or(&0.0);
    let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
    (0..n)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            cdf.partition_point(|&c| c <= u).min(last)
        })
        .collect()
}

/// Same draws as [`multinomial_resample`]; the gradient cut happens where
/// the selected particles are gathered.
pub fn truncated_gradient_resample(weights: &[f64], n: usize, rng: &mut Rng) -> Vec<usize> {
    multinomial_resample(weights, n, rng)
}

/// Systematic resampling with a single uniform offset drawn from `rng`.
pub fn systematic_resample(weights: &[f64], n: usize, rng: &mut Rng) -> Vec<usize> {
    let u: f64 = rng.random();
    systematic_resample_with(weights, n, u)
}

/// Systematic resampling with offset `u` in `[0, 1)`: position `j + u` is
/// assigned to the particle whose scaled cumulative interval contains it.
/// Counts are `ceil(N C_i - u) - ceil(N C_{i-1} - u)`, which always lie in
/// `{floor(N w_i), ceil(N w_i)}`.
pub fn systematic_resample_with(weights: &[f64], n: usize, u: f64) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let scale = n as f64 / total;
    let mut out = Vec::with_capacity(n);
    let mut acc = 0.0;
    let mut below = 0usize;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        let upper = if i + 1 == weights.len() {
            n
        } else {
            ((acc * scale - u).ceil().max(0.0) as usize).min(n)
        };
        let count = upper.saturating_sub(below);
        out.extend(std::iter::repeat_n(i, count));
        below = below.max(upper);
    }
    out
}

/// The soft-resampling proposal `alpha * w + (1 - alpha) / N`.
pub fn soft_proposal(weights: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(FilterError::InvalidAlpha(alpha));
    }
    let uniform = (1.0 - alpha) / weights.len() as f64;
    Ok(weights.iter().map(|w| alpha * w + uniform).collect())
}

/// Draws `n` ancestors from the soft proposal and returns them with the
/// corrected weights `w_a / q_a`.
pub fn soft_resample(
    weights: &[f64],
    alpha: f64,
    n: usize,
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let q = soft_proposal(weights, alpha)?;
    let ancestors = multinomial_resample(&q, n, rng);
    let corrected = ancestors.iter().map(|&a| weights[a] / q[a]).collect();
    Ok((ancestors, corrected))
}

/// Weighted mean of particle locations.
pub fn estimate_mean(locations: &[f64], weights: &[f64]) -> Result<f64> {
    if locations.len() != weights.len() || locations.is_empty() {
        return Err(FilterError::InvalidWeights(format!(
            "{} locations, {} weights",
            locations.len(),
            weights.len()
        )));
    }
    let v: f64 = locations.iter().zip(weights).map(|(x, w)| x * w).sum();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FilterError::NonFinite("estimate"))
    }
}

/// `log sum_i exp(l_i)`, stabilised by the maximum.
pub fn logsumexp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `sum_t [logsumexp(log w_t) - log N]` from unnormalised log-weights per step.
pub fn log_likelihood(log_weights: &[Vec<f64>]) -> Result<f64> {
    if log_weights.is_empty() || log_weights.iter().any(Vec::is_empty) {
        return Err(FilterError::Empty);
    }
    let v: f64 = log_weights
        .iter()
        .map(|lw| logsumexp(lw) - (lw.len() as f64).ln())
        .sum();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FilterError::NonFinite("log-likelihood"))
    }
}

/// Gaussian log-density `log N(value; mean, var)`, element-wise.
pub fn gaussian_logpdf<'t>(value: &Var<'t>, mean: &Var<'t>, var: &Var<'t>) -> Result<Var<'t>> {
    let sq = value.sub(mean)?.square().div(var)?;
    let log_norm = var.scale(2.0 * std::f64::consts::PI).ln();
    Ok(sq.add(&log_norm)?.scale(-0.5))
}

/// Scalar linear-Gaussian model `x_t = a x_{t-1} + b + N(0, q)`,
/// `y_t = c x_t + d + N(0, r)`, `x_0 ~ N(m0, p0)`, filtered with the
/// bootstrap proposal. Each filter in a batch has its own observations.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianModel {
    pub a: f64,
    pub b: f64,
    pub q: f64,
    pub c: f64,
    pub d: f64,
    pub r: f64,
    pub m0: f64,
    pub p0: f64,
    pub observations: Vec<Vec<f64>>,
}

impl LinearGaussianModel {
    fn log_g<'t>(&self, tape: &'t Tape, t: usize, layout: Layout, x: &Var<'t>) -> Result<Var<'t>> {
        let y: Vec<f64> = self.observations.iter().map(|obs| obs[t]).collect();
        let y = tape.vector(layout.expand(&y));
        let mean = x.scale(self.c).offset(self.d);
        gaussian_logpdf(&y, &mean, &tape.scalar(self.r))
    }
}

fn standard_normals(layout: Layout, rngs: &mut [FilterRngs]) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut out = Vec::with_capacity(layout.size());
    for rng in rngs.iter_mut() {
        for _ in 0..layout.particles {
            let z: f64 = StandardNormal.sample(&mut rng.proposal);
            out.push(z);
        }
    }
    out
}

impl<'t> FilterModel<'t> for LinearGaussianModel {
    type State = Locations<'t>;

    fn n_steps(&self) -> usize {
        self.observations.first().map_or(0, Vec::len)
    }

    fn initialize(
        &self,
        tape: &'t Tape,
        layout: Layout,
        rngs: &mut [FilterRngs],
    ) -> Result<(Self::State, Var<'t>)> {
        let z = standard_normals(layout, rngs);
        let x = tape.vector(z.iter().map(|z| self.m0 + self.p0.sqrt() * z).collect());
        let log_w = self.log_g(tape, 0, layout, &x)?;
        Ok((Locations(x), log_w))
    }

    fn propagate(
        &self,
        tape: &'t Tape,
        t: usize,
        layout: Layout,
        state: Self::State,
        rngs: &mut [FilterRngs],
    ) -> Result<(Self::State, Var<'t>)> {
        let z = tape.vector(standard_normals(layout, rngs));
        let x = state
            .0
            .scale(self.a)
            .offset(self.b)
            .add(&z.scale(self.q.sqrt()))?;
        let log_w = self.log_g(tape, t, layout, &x)?;
        Ok((Locations(x), log_w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn rngs(n: usize, seed: u64) -> Vec<FilterRngs> {
        (0..n).map(|i| FilterRngs::new(seed, &[i as u64])).collect()
    }

    fn counts(ancestors: &[usize], len: usize) -> Vec<usize> {
        let mut c = vec![0; len];
        for &a in ancestors {
            c[a] += 1;
        }
        c
    }

    #[test]
    fn weighted_mean_examples() {
        assert_eq!(estimate_mean(&[1.0, 3.0], &[0.25, 0.75]).unwrap(), 2.5);
        assert_eq!(estimate_mean(&[0.0, 2.0], &[0.5, 0.5]).unwrap(), 1.0);
        assert!(estimate_mean(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn likelihood_examples() {
        let one = log_likelihood(&[vec![0.2f64.ln(), 0.4f64.ln()]]).unwrap();
        assert!((one.exp() - 0.3).abs() < 1e-15);
        let two = log_likelihood(&[
            vec![0.2f64.ln(), 0.4f64.ln()],
            vec![0.5f64.ln(), 0.5f64.ln()],
        ])
        .unwrap();
        assert!((two.exp() - 0.15).abs() < 1e-15);
    }

    #[test]
    fn multinomial_examples() {
        let mut rng = substream(3, &[1]);
        assert!(multinomial_resample(&[1.0, 0.0], 50, &mut rng)
            .iter()
            .all(|&a| a == 0));
        let draws = 100_000;
        let c = counts(&multinomial_resample(&[0.3, 0.7], draws, &mut rng), 2);
        let freq = c[1] as f64 / draws as f64;
        assert!((freq - 0.7).abs() < 3.0 * (0.21f64 / draws as f64).sqrt());
    }

    #[test]
    fn multinomial_uniform_frequencies() {
        let mut rng = substream(4, &[1]);
        let draws = 100_000;
        let c = counts(&multinomial_resample(&[0.25; 4], draws, &mut rng), 4);
        let se = (0.25 * 0.75 / draws as f64).sqrt();
        for ci in c {
            assert!((ci as f64 / draws as f64 - 0.25).abs() < 3.0 * se);
        }
    }

    #[test]
    fn systematic_examples() {
        for k in 0..64 {
            let u = k as f64 / 64.0;
            assert_eq!(counts(&systematic_resample_with(&[0.5, 0.5], 2, u), 2), [1, 1]);
            assert_eq!(counts(&systematic_resample_with(&[0.75, 0.25], 4, u), 2), [3, 1]);
            assert_eq!(counts(&systematic_resample_with(&[0.6, 0.4], 5, u), 2), [3, 2]);
        }
    }

    #[test]
    fn soft_examples() {
        let q = soft_proposal(&[0.8, 0.2], 0.5).unwrap();
        assert!((q[0] - 0.65).abs() < 1e-15 && (q[1] - 0.35).abs() < 1e-15);
        let mut rng = substream(5, &[1]);
        let (a, w) = soft_resample(&[0.8, 0.2], 0.5, 200, &mut rng).unwrap();
        for (a, w) in a.iter().zip(&w) {
            let expected = if *a == 0 { 0.8 / 0.65 } else { 0.2 / 0.35 };
            assert_eq!(*w, expected);
        }
        assert!((0.8f64 / 0.65 - 1.23077).abs() < 1e-5);
        let (_, ones) = soft_resample(&[0.1, 0.6, 0.3], 1.0, 20, &mut rng).unwrap();
        assert!(ones.iter().all(|&w| w == 1.0));
        let (a, w) = soft_resample(&[0.1, 0.6, 0.3], 0.0, 20, &mut rng).unwrap();
        for (a, w) in a.iter().zip(&w) {
            assert!((w - 3.0 * [0.1, 0.6, 0.3][*a]).abs() < 1e-15);
        }
        assert!(matches!(
            soft_resample(&[1.0], 1.5, 1, &mut rng),
            Err(FilterError::InvalidAlpha(_))
        ));
    }

    #[test]
    fn truncated_shares_the_multinomial_sampler() {
        let w = [0.1, 0.2, 0.3, 0.4];
        let a = multinomial_resample(&w, 30, &mut substream(8, &[2]));
        let b = truncated_gradient_resample(&w, 30, &mut substream(8, &[2]));
        assert_eq!(a, b);
    }

    fn lg(observations: Vec<Vec<f64>>) -> LinearGaussianModel {
        LinearGaussianModel {
            a: 0.9,
            b: 0.1,
            q: 0.5,
            c: 1.0,
            d: 0.0,
            r: 1.0,
            m0: 0.0,
            p0: 1.0,
            observations,
        }
    }

    #[test]
    fn single_particle_estimate_is_its_location() {
        let tape = Tape::new();
        let model = lg(vec![vec![0.3, -0.2, 1.0]]);
        let mut r = rngs(1, 1);
        let out = run_filter(
            &tape,
            &model,
            Layout::new(1, 1),
            Resampler::every_step(Scheme::Multinomial),
            &mut r,
        )
        .unwrap();
        assert_eq!(out.estimates.len(), 3);
        assert!(out.final_log_weights.to_vec()[0].abs() < 1e-15);
    }

    #[test]
    fn log_lik_is_the_sum_of_increments() {
        let tape = Tape::no_grad();
        let model = lg(vec![vec![0.3, -0.2, 1.0, 0.5], vec![1.0, 2.0, 0.0, -1.0]]);
        let mut r = rngs(2, 2);
        let out = run_filter(
            &tape,
            &model,
            Layout::new(2, 50),
            Resampler::every_step(Scheme::Systematic),
            &mut r,
        )
        .unwrap();
        for row in 0..2 {
            let mut s = 0.0;
            for inc in &out.log_lik_increments {
                s += inc.to_vec()[row];
            }
            assert_eq!(s, out.log_lik_values()[row]);
        }
        assert!(tape.is_empty());
    }

    #[test]
    fn filters_in_a_batch_are_independent() {
        let obs = vec![vec![0.3, -0.2, 1.0], vec![1.0, 2.0, 0.0]];
        let tape = Tape::no_grad();
        let mut r = rngs(2, 9);
        let both = run_filter(&tape, &lg(obs.clone()), Layout::new(2, 20), Resampler::every_step(Scheme::Multinomial), &mut r).unwrap();
        let mut r1 = vec![FilterRngs::new(9, &[1])];
        let alone = run_filter(&tape, &lg(vec![obs[1].clone()]), Layout::new(1, 20), Resampler::every_step(Scheme::Multinomial), &mut r1).unwrap();
        assert_eq!(both.estimate_paths()[1], alone.estimate_paths()[0]);
    }

    #[test]
    fn degenerate_observation_is_reported() {
        let tape = Tape::no_grad();
        let model = lg(vec![vec![0.0, 1e10, 0.0]]);
        let mut r = rngs(1, 3);
        let err = run_filter(
            &tape,
            &model,
            Layout::new(1, 10),
            Resampler::every_step(Scheme::Multinomial),
            &mut r,
        )
        .err()
        .unwrap();
        assert_eq!(err, FilterError::Degenerate { step: 1, row: 0 });
    }

    #[test]
    fn truncation_zeroes_ancestor_gradients() {
        struct Shift<'a> {
            inner: LinearGaussianModel,
            theta: &'a Var<'a>,
        }
        impl<'a> FilterModel<'a> for Shift<'a> {
            type State = Locations<'a>;
            fn n_steps(&self) -> usize {
                self.inner.n_steps()
            }
            fn initialize(&self, tape: &'a Tape, layout: Layout, rngs: &mut [FilterRngs]) -> Result<(Self::State, Var<'a>)> {
                let (s, w) = self.inner.initialize(tape, layout, rngs)?;
                Ok((Locations(s.0.add(self.theta)?), w))
            }
            fn propagate(&self, tape: &'a Tape, t: usize, layout: Layout, state: Self::State, rngs: &mut [FilterRngs]) -> Result<(Self::State, Var<'a>)> {
                self.inner.propagate(tape, t, layout, state, rngs)
            }
        }
        for (scheme, expect_zero) in [(Scheme::TruncatedGradient, true), (Scheme::Multinomial, false)] {
            let tape = Tape::new();
            let theta = tape.param(ndarray::arr0(0.3).into_dyn()).unwrap();
            let model = Shift { inner: lg(vec![vec![0.1, 0.4]]), theta: &theta };
            let mut r = rngs(1, 4);
            let out = run_filter(&tape, &model, Layout::new(1, 8), Resampler::every_step(scheme), &mut r).unwrap();
            // Only the post-resampling estimate: theta reaches it solely through ancestors.
            let loss = out.estimates[1].sum();
            tape.backward(&loss).unwrap();
            let g = theta.grad().map_or(0.0, |g| g.sum());
            assert_eq!(g == 0.0, expect_zero, "{scheme:?}: {g}");
        }
    }

    #[test]
    fn ess_gate_skips_balanced_filters() {
        let tape = Tape::no_grad();
        let model = lg(vec![vec![0.0, 0.0, 0.0]]);
        let mut r = rngs(1, 5);
        let resampler = Resampler {
            scheme: Scheme::Multinomial,
            ess_threshold: Some(0.0),
        };
        let out = run_filter(&tape, &model, Layout::new(1, 6), resampler, &mut r).unwrap();
        assert!(out.ancestors.iter().all(|a| *a == (0..6).collect::<Vec<_>>()));
    }

    #[test]
    fn invalid_setup_is_rejected() {
        let tape = Tape::no_grad();
        let model = lg(vec![vec![0.0]]);
        let mut r = rngs(1, 5);
        let bad = Resampler::every_step(Scheme::Soft { alpha: -0.1 });
        assert!(matches!(run_filter(&tape, &model, Layout::new(1, 4), bad, &mut r), Err(FilterError::InvalidAlpha(_))));
        let ok = Resampler::every_step(Scheme::Systematic);
        assert!(matches!(run_filter(&tape, &model, Layout::new(1, 0), ok, &mut r), Err(FilterError::Empty)));
        assert!(matches!(run_filter(&tape, &model, Layout::new(2, 4), ok, &mut r), Err(FilterError::StreamCount { .. })));
    }
}
