//! Filter models for regime-switching systems.
//!
//! [`JointModel`] filters the augmented state `(x, k, r)` from observations
//! `y`. [`MarginalModel`] filters `(k, r)` only, treating both `x` and `y` as
//! observed. [`FixedRegimeModel`] runs one regime per filter with no switching.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::filter::{FilterError, FilterModel, Layout, Locations, Particles, Result};
use crate::learned_models::RegimeModels;
use crate::regime_net::{propose_regimes, Proposal, Switching};
use crate::rng::FilterRngs;

/// Bounds of the uniform prior on `x_0`.
pub const PRIOR_LOW: f64 = -0.5;
pub const PRIOR_HIGH: f64 = 0.5;

/// `log U(x; -0.5, 0.5)`.
pub fn prior_log_density(x: f64) -> f64 {
    if (PRIOR_LOW..=PRIOR_HIGH).contains(&x) {
        -(PRIOR_HIGH - PRIOR_LOW).ln()
    } else {
        f64::NEG_INFINITY
    }
}

fn uniform_prior_draws(layout: Layout, rngs: &mut [FilterRngs]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layout.size());
    for rng in rngs.iter_mut().take(layout.filters) {
        for _ in 0..layout.particles {
            out.push(rng.proposal.random_range(PRIOR_LOW..PRIOR_HIGH));
        }
    }
    out
}

fn normal_draws(layout: Layout, rngs: &mut [FilterRngs]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layout.size());
    for rng in rngs.iter_mut().take(layout.filters) {
        for _ in 0..layout.particles {
            out.push(StandardNormal.sample(&mut rng.proposal));
        }
    }
    out
}

fn check_rows(rows: usize, layout: Layout, steps: &[usize]) -> Result<()> {
    if rows != layout.filters {
        return Err(FilterError::Model(format!(
            "{rows} trajectories for {} filters",
            layout.filters
        )));
    }
    if steps.windows(2).any(|w| w[0] != w[1]) {
        return Err(FilterError::Model("trajectories differ in length".into()));
    }
    Ok(())
}

/// Particles over `(x, k, r)`.
#[derive(Clone)]
pub struct JointState<'t> {
    pub x: Var<'t>,
    pub k: Vec<usize>,
    pub memory: Var<'t>,
}

impl<'t> Particles<'t> for JointState<'t> {
    fn select(&self, indices: &[usize], detach: bool) -> Result<Self> {
        let mut x = self.x.gather(indices)?;
        let mut memory = self.memory.gather(indices)?;
        if detach {
            x = x.stop_gradient()?;
            memory = memory.stop_gradient()?;
        }
        Ok(JointState {
            x,
            k: indices.iter().map(|&i| self.k[i]).collect(),
            memory,
        })
    }

    fn locations(&self) -> Option<&Var<'t>> {
        Some(&self.x)
    }
}

/// Particles over `(k, r)`.
#[derive(Clone)]
pub struct RegimeState<'t> {
    pub k: Vec<usize>,
    pub memory: Var<'t>,
}

impl<'t> Particles<'t> for RegimeState<'t> {
    fn select(&self, indices: &[usize], detach: bool) -> Result<Self> {
        let mut memory = self.memory.gather(indices)?;
        if detach {
            memory = memory.stop_gradient()?;
        }
        Ok(RegimeState {
            k: indices.iter().map(|&i| self.k[i]).collect(),
            memory,
        })
    }

    fn locations(&self) -> Option<&Var<'t>> {
        None
    }
}

/// Filter over `(x, k, r)`: regimes from `proposal`, locations from the
/// dynamic model (so the dynamic density cancels), weights `K/Q * G`.
pub struct JointModel<'a, 't, S, M> {
    pub tape: &'t Tape,
    pub switching: &'a S,
    pub models: &'a M,
    /// Observations `y_{0:T}`, one row per filter.
    pub observations: Vec<&'a [f64]>,
    pub proposal: Proposal,
}

impl<'a, 't, S, M> JointModel<'a, 't, S, M>
where
    S: Switching<'t>,
    M: RegimeModels<'t>,
{
    fn log_g(&self, t: usize, layout: Layout, x: &Var<'t>, k: &[usize]) -> Result<Var<'t>> {
        let y: Vec<f64> = self.observations.iter().map(|o| o[t]).collect();
        self.models
            .observation_logpdf(&self.tape.vector(layout.expand(&y)), x, k)
    }

    fn weight(&self, log_g: Var<'t>, correction: Option<Var<'t>>) -> Result<Var<'t>> {
        Ok(match correction {
            Some(c) => log_g.add(&c)?,
            None => log_g,
        })
    }
}

impl<'a, 't, S, M> FilterModel<'t> for JointModel<'a, 't, S, M>
where
    S: Switching<'t>,
    M: RegimeModels<'t>,
{
    type State = JointState<'t>;

    fn n_steps(&self) -> usize {
        self.observations.first().map_or(0, |o| o.len())
    }

    fn initialize(
        &self,
        tape: &'t Tape,
        layout: Layout,
        rngs: &mut [FilterRngs],
    ) -> Result<(Self::State, Var<'t>)> {
        let lens: Vec<usize> = self.observations.iter().map(|o| o.len()).collect();
        check_rows(self.observations.len(), layout, &lens)?;
        let prior = self.switching.prior_log_probs()?;
        let (k, correction) = propose_regimes(self.proposal, &prior, layout, rngs)?;
        let x = tape.vector(uniform_prior_draws(layout, rngs));
        let memory = self
            .switching
            .update(&self.switching.initial_memory(layout.size())?, &k)?;
        let log_w = self.weight(self.log_g(0, layout, &x, &k)?, correction)?;
        Ok((JointState { x, k, memory }, log_w))
    }

    fn propagate(
        &self,
        tape: &'t Tape,
        t: usize,
        layout: Layout,
        state: Self::State,
        rngs: &mut [FilterRngs],
    ) -> Result<(Self::State, Var<'t>)> {
        let log_trans = self.switching.transition_log_probs(&state.memory)?;
        let (k, correction) = propose_regimes(self.proposal, &log_trans, layout, rngs)?;
        let noise = tape.vector(normal_draws(layout, rngs));
        let x = self.models.dynamic_sample(&state.x, &k, &noise)?;
        let memory = self.switching.update(&state.memory, &k)?;
        let log_w = self.weight(self.log_g(t, layout, &x, &k)?, correction)?;
        Ok((JointState { x, k, memory }, log_w))
    }
}

/// Filter over `(k, r)` with both `x_{0:T}` and `y_{0:T}` observed. The
/// per-step observation density is `G(y_t | x_t, k) M(x_t | x_{t-1}, k)`,
/// with the fixed prior density of `x_0` at the first step.
pub struct MarginalModel<'a, 't, S, M> {
    pub tape: &'t Tape,
    pub switching: &'a S,
    pub models: &'a M,
    pub states: Vec<&'a [f64]>,
    pub observations: Vec<&'a [f64]>,
    pub proposal: Proposal,
}

impl<'a, 't, S, M> MarginalModel<'a, 't, S, M>
where
    S: Switching<'t>,
    M: RegimeModels<'t>,
{
    /// Log observation density for every filter and regime, `[filters * n]`
    /// with the regime fastest.
    fn density_table(&self, t: usize) -> Result<Var<'t>> {
        let n = self.models.n_regimes();
        let rows = self.states.len();
        let k: Vec<usize> = (0..rows).flat_map(|_| 0..n).collect();
        let repeat = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
            (0..rows).flat_map(|r| std::iter::repeat_n(f(r), n)).collect()
        };
        let x = self.tape.vector(repeat(&|r| self.states[r][t]));
        let y = self.tape.vector(repeat(&|r| self.observations[r][t]));
        let log_g = self.models.observation_logpdf(&y, &x, &k)?;
        if t == 0 {
            let prior = self.tape.vector(repeat(&|r| prior_log_density(self.states[r][0])));
            Ok(log_g.add(&prior)?)
        } else {
            let x_prev = self.tape.vector(repeat(&|r| self.states[r][t - 1]));
            Ok(log_g.add(&self.models.dynamic_logpdf(&x, &x_prev, &k)?)?)
        }
    }

    fn weight(&self, t: usize, layout: Layout, k: &[usize], correction: Option<Var<'t>>) -> Result<Var<'t>> {
        let n = self.models.n_regimes();
        let flat: Vec<usize> = k
            .iter()
            .enumerate()
            .map(|(i, &k)| layout.row(i) * n + k)
            .collect();
        let picked = self.density_table(t)?.gather(&flat)?;
        Ok(match correction {
            Some(c) => picked.add(&c)?,
            None => picked,
        })
    }
}

impl<'a, 't, S, M> FilterModel<'t> for MarginalModel<'a, 't, S, M>
where
    S: Switching<'t>,
    M: RegimeModels<'t>,
{
    type State = RegimeState<'t>;

    fn n_steps(&self) -> usize {
        self.observations.first().map_or(0, |o| o.len())
    }

    fn initialize(
        &self,
        _tape: &'t Tape,
        layout: Layout,
        rngs: &mut [FilterRngs],
    ) -> Result<(Self::State, Var<'t>)> {
        let mut lens: Vec<usize> = self.observations.iter().map(|o| o.len()).collect();
        lens.extend(self.states.iter().map(|s| s.len()));
        check_rows(self.observations.len(), layout, &lens)?;
        check_rows(self.states.len(), layout, &lens)?;
        let prior = self.switching.prior_log_probs()?;
        let (k, correction) = propose_regimes(self.proposal, &prior, layout, rngs)?;
        let memory = self
            .switching
            .update(&self.switching.initial_memory(layout.size())?, &k)?;
        let log_w = self.weight(0, layout, &k, correction)?;
        Ok((RegimeState { k, memory }, log_w))
    }

    fn propagate(
        &self,
        _tape: &'t Tape,
        t: usize,
        layout: Layout,
        state: Self::State,
        rngs: &mut [FilterRngs],
    ) -> Result<(Self::State, Var<'t>)> {
        let log_trans = self.switching.transition_log_probs(&state.memory)?;
        let (k, correction) = propose_regimes(self.proposal, &log_trans, layout, rngs)?;
        let memory = self.switching.update(&state.memory, &k)?;
        let log_w = self.weight(t, layout, &k, correction)?;
        Ok((RegimeState { k, memory }, log_w))
    }
}

/// Bootstrap filters where filter `b` always uses regime `regimes[b]`.
pub struct FixedRegimeModel<'a, 't, M> {
    pub tape: &'t Tape,
    pub models: &'a M,
    pub observations: Vec<&'a [f64]>,
    pub regimes: Vec<usize>,
}

impl<'a, 't, M: RegimeModels<'t>> FixedRegimeModel<'a, 't, M> {
    fn log_g(&self, t: usize, layout: Layout, x: &Var<'t>) -> Result<(Var<'t>, Vec<usize>)> {
        let y: Vec<f64> = self.observations.iter().map(|o| o[t]).collect();
        let k: Vec<usize> = self
            .regimes
            .iter()
            .flat_map(|&k| std::iter::repeat_n(k, layout.particles))
            .collect();
        let lg = self
            .models
            .observation_logpdf(&self.tape.vector(layout.expand(&y)), x, &k)?;
        Ok((lg, k))
    }
}

impl<'a, 't, M: RegimeModels<'t>> FilterModel<'t> for FixedRegimeModel<'a, 't, M> {
    type State = Locations<'t>;

    fn n_steps(&self) -> usize {
        self.observations.first().map_or(0, |o| o.len())
    }

    fn initialize(
        &self,
        tape: &'t Tape,
        layout: Layout,
        rngs: &mut [FilterRngs],
    ) -> Result<(Self::State, Var<'t>)> {
        let lens: Vec<usize> = self.observations.iter().map(|o| o.len()).collect();
        check_rows(self.observations.len(), layout, &lens)?;
        check_rows(self.regimes.len(), layout, &lens)?;
        let x = tape.vector(uniform_prior_draws(layout, rngs));
        let (log_w, _) = self.log_g(0, layout, &x)?;
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
        let k: Vec<usize> = self
            .regimes
            .iter()
            .flat_map(|&k| std::iter::repeat_n(k, layout.particles))
            .collect();
        let noise = tape.vector(normal_draws(layout, rngs));
        let x = self.models.dynamic_sample(&state.0, &k, &noise)?;
        let (log_w, _) = self.log_g(t, layout, &x)?;
        Ok((Locations(x), log_w))
    }
}
