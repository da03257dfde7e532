//! Losses, the optimisation loop, validation-based model selection and grid
//! search.
//!
//! A training batch is split into chunks of trajectories; each chunk records
//! its own tape and adds its gradient into the parameter store, so memory is
//! bounded by the chunk size. The batch loss is the mean over trajectories.

use std::time::Instant;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::filter::{run_filter, FilterError, Layout, Resampler, Scheme};
use crate::learned_models::{RegimeModels, RegimeNetBank};
use crate::params::{AdamW, AdamWConfig, Bound, ParameterStore};
use crate::regime_filter::{JointModel, MarginalModel};
use crate::regime_net::{Proposal, SwitchNet, Switching, TrueSwitching};
use crate::rng::{derive_key, purpose, substream, FilterRngs};
use crate::ssm::{Dataset, Trajectory, TrueDynamic};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Weight of the squared-error term in the combined loss.
    pub lambda: f64,
    /// Soft-resampling mixture for the marginal filter.
    pub alpha: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub train_particles: usize,
    pub eval_particles: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Filters recorded on one tape.
    pub chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            alpha: 0.7,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            train_particles: 200,
            eval_particles: 2000,
            batch_size: 100,
            batches_per_epoch: 10,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            chunk: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite non-negative number");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if self.train_particles == 0 || self.eval_particles == 0 {
            return bad("particle counts must be positive");
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 || self.chunk == 0 {
            return bad("batch size, batches per epoch and chunk must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max epochs must be positive");
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossMode {
    /// `ELBO + lambda * MSE`.
    Combined,
    /// Squared error only.
    MseOnly,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("trajectory {trajectory}: {source}")]
    Trajectory {
        trajectory: usize,
        #[source]
        source: FilterError,
    },
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("training diverged twice; last failure at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{0} has nothing to train")]
    NotTrainable(String),
    #[error("every grid cell failed: {0:?}")]
    AllCellsFailed(Vec<String>),
}

impl TrainError {
    /// Whether the failure is numerical rather than a usage error.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::Trajectory { .. }
                | TrainError::Filter(FilterError::Degenerate { .. })
                | TrainError::Filter(FilterError::NonFinite(_))
                | TrainError::Diverged { .. }
                | TrainError::AllCellsFailed(_)
        )
    }
}

/// A trajectory with its index in its split.
#[derive(Debug, Clone, Copy)]
pub struct Item<'a> {
    pub id: usize,
    pub trajectory: &'a Trajectory,
}

pub fn items(trajectories: &[Trajectory]) -> Vec<Item<'_>> {
    trajectories
        .iter()
        .enumerate()
        .map(|(id, trajectory)| Item { id, trajectory })
        .collect()
}

/// Loss terms of a chunk, each summed over its trajectories.
pub struct LossTerms<'t> {
    pub elbo: Option<Var<'t>>,
    pub mse: Option<Var<'t>>,
}

/// `elbo + lambda * mse`; a missing term counts as zero.
pub fn combined_loss<'t>(
    elbo: Option<&Var<'t>>,
    mse: Option<&Var<'t>>,
    lambda: f64,
) -> Result<Option<Var<'t>>, FilterError> {
    Ok(match (elbo, mse) {
        (Some(e), Some(m)) => Some(e.add(&m.scale(lambda))?),
        (Some(e), None) => Some(e.clone()),
        (None, Some(m)) => Some(m.scale(lambda)),
        (None, None) => None,
    })
}

/// Anything that produces filtering estimates for trajectories.
pub trait Estimator: Sync {
    /// Estimates `x̂_{0:T}` per trajectory in evaluation mode. `key` selects
    /// the random streams; each trajectory's draws depend only on `key`
    /// and its id.
    fn estimate(
        &self,
        params: &ParameterStore,
        chunk: &[Item<'_>],
        particles: usize,
        seed: u64,
        key: &[u64],
    ) -> Result<Vec<Vec<f64>>, FilterError>;
}

/// An estimator with learnable parameters.
pub trait Learner: Estimator {
    fn init(&self, seed: u64) -> ParameterStore;

    /// Loss terms for a chunk on a recording tape.
    fn chunk_loss<'t>(
        &self,
        tape: &'t Tape,
        params: &Bound<'t>,
        chunk: &[Item<'_>],
        config: &TrainConfig,
        key: &[u64],
    ) -> Result<LossTerms<'t>, FilterError>;

    fn uses_elbo(&self, config: &TrainConfig) -> bool;
}

/// Random streams for one filter per trajectory: `key ++ [id] ++ tail`.
pub fn trajectory_rngs(seed: u64, key: &[u64], chunk: &[Item<'_>], tail: &[u64]) -> Vec<FilterRngs> {
    chunk
        .iter()
        .map(|item| {
            let mut path = key.to_vec();
            path.push(item.id as u64);
            path.extend_from_slice(tail);
            FilterRngs::new(seed, &path)
        })
        .collect()
}

/// `sum_t (x̂_t - x_t)^2 / (T + 1)` for each filter, `[filters]`.
pub fn squared_error<'t>(tape: &'t Tape, estimates: &[Var<'t>], chunk: &[Item<'_>]) -> Result<Var<'t>, FilterError> {
    let steps = estimates.len();
    let mut total: Option<Var<'t>> = None;
    for (t, est) in estimates.iter().enumerate() {
        let truth = tape.vector(chunk.iter().map(|i| i.trajectory.x[t]).collect());
        let sq = est.sub(&truth)?.square();
        total = Some(match total {
            Some(acc) => acc.add(&sq)?,
            None => sq,
        });
    }
    let total = total.ok_or(FilterError::Empty)?;
    Ok(total.scale(1.0 / steps as f64))
}

fn attribute<'a>(chunk: &'a [Item<'_>], rows_per_item: usize) -> impl Fn(FilterError) -> FilterError + 'a {
    move |e| match e {
        FilterError::Degenerate { step, row } => FilterError::Degenerate {
            step,
            row: chunk[row / rows_per_item].id,
        },
        other => other,
    }
}

/// The joint filter on `(x, k, r)`: per-trajectory squared errors `[c]` and
/// the estimates.
#[allow(clippy::too_many_arguments)]
pub fn joint_filter_pass<'t, S, M>(
    tape: &'t Tape,
    switching: &S,
    models: &M,
    chunk: &[Item<'_>],
    particles: usize,
    resampler: Resampler,
    proposal: Proposal,
    rngs: &mut [FilterRngs],
) -> Result<(Vec<Var<'t>>, Var<'t>), FilterError>
where
    S: Switching<'t>,
    M: RegimeModels<'t>,
{
    let model = JointModel {
        tape,
        switching,
        models,
        observations: chunk.iter().map(|i| i.trajectory.y.as_slice()).collect(),
        proposal,
    };
    let layout = Layout::new(chunk.len(), particles);
    let out = run_filter(tape, &model, layout, resampler, rngs).map_err(attribute(chunk, 1))?;
    let mse = squared_error(tape, &out.estimates, chunk)?;
    Ok((out.estimates, mse))
}

/// The marginal filter on `(k, r)` with `x` and `y` observed: per-trajectory
/// negative log-likelihood estimates `[c]`.
pub fn marginal_filter_pass<'t, S, M>(
    tape: &'t Tape,
    switching: &S,
    models: &M,
    chunk: &[Item<'_>],
    particles: usize,
    resampler: Resampler,
    rngs: &mut [FilterRngs],
) -> Result<Var<'t>, FilterError>
where
    S: Switching<'t>,
    M: RegimeModels<'t>,
{
    let model = MarginalModel {
        tape,
        switching,
        models,
        states: chunk.iter().map(|i| i.trajectory.x.as_slice()).collect(),
        observations: chunk.iter().map(|i| i.trajectory.y.as_slice()).collect(),
        proposal: Proposal::Uniform,
    };
    let layout = Layout::new(chunk.len(), particles);
    let out = run_filter(tape, &model, layout, resampler, rngs).map_err(attribute(chunk, 1))?;
    Ok(out.log_lik.neg())
}

/// Which switching dynamic a regime-switching filter uses.
#[derive(Debug, Clone, PartialEq)]
pub enum SwitchingKind {
    /// The learned gated-memory network.
    Learned,
    /// A known dynamic; only the regime models are learned.
    Known(TrueDynamic),
}

/// Learned regime-switching filters: the learned-switching method and its
/// known-switching partial oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeLearner {
    pub n_regimes: usize,
    pub hidden: usize,
    pub switching: SwitchingKind,
    pub loss: LossMode,
}

pub const SWITCH_PREFIX: &str = "switch.";

enum AnySwitching<'t> {
    Learned(crate::regime_net::LearnedSwitching<'t>),
    Known(TrueSwitching<'t>),
}

impl RegimeLearner {
    fn bank(&self) -> RegimeNetBank {
        RegimeNetBank::new(self.n_regimes, self.hidden)
    }

    fn bind_switching<'t>(&self, tape: &'t Tape, bound: &Bound<'t>) -> Result<AnySwitching<'t>, FilterError> {
        Ok(match &self.switching {
            SwitchingKind::Learned => {
                AnySwitching::Learned(SwitchNet::new(self.n_regimes).bind(tape, bound, SWITCH_PREFIX)?)
            }
            SwitchingKind::Known(d) => AnySwitching::Known(TrueSwitching::new(tape, d.clone())),
        })
    }

    fn with_switching<'t, R>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        f: impl FnOnce(&dyn SwitchingDyn<'t>) -> Result<R, FilterError>,
    ) -> Result<R, FilterError> {
        match self.bind_switching(tape, bound)? {
            AnySwitching::Learned(s) => f(&s),
            AnySwitching::Known(s) => f(&s),
        }
    }
}

/// Object-safe view of [`Switching`].
pub trait SwitchingDyn<'t> {
    fn n_regimes(&self) -> usize;
    fn prior_log_probs(&self) -> Result<Var<'t>, FilterError>;
    fn initial_memory(&self, m: usize) -> Result<Var<'t>, FilterError>;
    fn transition_log_probs(&self, memory: &Var<'t>) -> Result<Var<'t>, FilterError>;
    fn update(&self, memory: &Var<'t>, k: &[usize]) -> Result<Var<'t>, FilterError>;
}

impl<'t, S: Switching<'t>> SwitchingDyn<'t> for S {
    fn n_regimes(&self) -> usize {
        Switching::n_regimes(self)
    }
    fn prior_log_probs(&self) -> Result<Var<'t>, FilterError> {
        Switching::prior_log_probs(self)
    }
    fn initial_memory(&self, m: usize) -> Result<Var<'t>, FilterError> {
        Switching::initial_memory(self, m)
    }
    fn transition_log_probs(&self, memory: &Var<'t>) -> Result<Var<'t>, FilterError> {
        Switching::transition_log_probs(self, memory)
    }
    fn update(&self, memory: &Var<'t>, k: &[usize]) -> Result<Var<'t>, FilterError> {
        Switching::update(self, memory, k)
    }
}

/// Adapts a `&dyn SwitchingDyn` back to [`Switching`].
pub struct DynSwitching<'a, 't>(pub &'a dyn SwitchingDyn<'t>);

impl<'t> Switching<'t> for DynSwitching<'_, 't> {
    fn n_regimes(&self) -> usize {
        self.0.n_regimes()
    }
    fn prior_log_probs(&self) -> Result<Var<'t>, FilterError> {
        self.0.prior_log_probs()
    }
    fn initial_memory(&self, m: usize) -> Result<Var<'t>, FilterError> {
        self.0.initial_memory(m)
    }
    fn transition_log_probs(&self, memory: &Var<'t>) -> Result<Var<'t>, FilterError> {
        self.0.transition_log_probs(memory)
    }
    fn update(&self, memory: &Var<'t>, k: &[usize]) -> Result<Var<'t>, FilterError> {
        self.0.update(memory, k)
    }
}

/// Stream tails distinguishing the two training passes.
const JOINT_PASS: u64 = 0;
const MARGINAL_PASS: u64 = 1;

impl Estimator for RegimeLearner {
    fn estimate(
        &self,
        params: &ParameterStore,
        chunk: &[Item<'_>],
        particles: usize,
        seed: u64,
        key: &[u64],
    ) -> Result<Vec<Vec<f64>>, FilterError> {
        let tape = Tape::no_grad();
        let bound = params.bind(&tape)?;
        let models = self.bank().bind(&tape, &bound, "")?;
        let mut rngs = trajectory_rngs(seed, key, chunk, &[JOINT_PASS]);
        self.with_switching(&tape, &bound, |s| {
            let (est, _) = joint_filter_pass(
                &tape,
                &DynSwitching(s),
                &models,
                chunk,
                particles,
                Resampler::every_step(Scheme::Systematic),
                Proposal::Target,
                &mut rngs,
            )?;
            Ok(transpose(&est, chunk.len()))
        })
    }
}

impl Learner for RegimeLearner {
    fn init(&self, seed: u64) -> ParameterStore {
        let mut rng = substream(seed, &[purpose::INIT]);
        let mut store = self.bank().init("", &mut rng);
        if self.switching == SwitchingKind::Learned {
            let switch = SwitchNet::new(self.n_regimes).init("", &mut rng);
            store
                .extend_prefixed(SWITCH_PREFIX, switch)
                .expect("distinct prefixes");
        }
        store
    }

    fn chunk_loss<'t>(
        &self,
        tape: &'t Tape,
        params: &Bound<'t>,
        chunk: &[Item<'_>],
        config: &TrainConfig,
        key: &[u64],
    ) -> Result<LossTerms<'t>, FilterError> {
        let models = self.bank().bind(tape, params, "")?;
        let run_joint = self.loss == LossMode::MseOnly || config.lambda > 0.0;
        let run_marginal = self.loss == LossMode::Combined;
        self.with_switching(tape, params, |s| {
            let s = DynSwitching(s);
            let mse = if run_joint {
                let mut rngs = trajectory_rngs(config.seed, key, chunk, &[JOINT_PASS]);
                let (_, mse) = joint_filter_pass(
                    tape,
                    &s,
                    &models,
                    chunk,
                    config.train_particles,
                    Resampler::every_step(Scheme::TruncatedGradient),
                    Proposal::Uniform,
                    &mut rngs,
                )?;
                Some(mse.sum())
            } else {
                None
            };
            let elbo = if run_marginal {
                let mut rngs = trajectory_rngs(config.seed, key, chunk, &[MARGINAL_PASS]);
                let nll = marginal_filter_pass(
                    tape,
                    &s,
                    &models,
                    chunk,
                    config.train_particles,
                    Resampler::every_step(Scheme::Soft {
                        alpha: config.alpha,
                    }),
                    &mut rngs,
                )?;
                Some(nll.sum())
            } else {
                None
            };
            Ok(LossTerms { elbo, mse })
        })
    }

    fn uses_elbo(&self, _config: &TrainConfig) -> bool {
        self.loss == LossMode::Combined
    }
}

/// Step-major estimates to trajectory-major paths.
pub fn transpose(estimates: &[Var<'_>], rows: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::with_capacity(estimates.len()); rows];
    for step in estimates {
        for (row, v) in out.iter_mut().zip(step.data().iter()) {
            row.push(*v);
        }
    }
    out
}

/// Squared filtering error over a set of trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Mean over trajectories and steps.
    pub mse: f64,
    /// Mean over trajectories, per step.
    pub per_step: Vec<f64>,
    pub estimates: Vec<Vec<f64>>,
}

/// Evaluation-mode squared error over `trajectories`, in chunks of `chunk`
/// filters.
pub fn evaluate(
    estimator: &dyn Estimator,
    params: &ParameterStore,
    trajectories: &[Trajectory],
    particles: usize,
    seed: u64,
    key: &[u64],
    chunk: usize,
) -> Result<Evaluation, FilterError> {
    let all = items(trajectories);
    let first = trajectories.first().ok_or(FilterError::Empty)?;
    let steps = first.len();
    let mut per_step = vec![0.0; steps];
    let mut estimates = Vec::with_capacity(all.len());
    for part in all.chunks(chunk.max(1)) {
        let est = estimator.estimate(params, part, particles, seed, key)?;
        for (item, path) in part.iter().zip(&est) {
            if path.len() != steps || item.trajectory.len() != steps {
                return Err(FilterError::Model("trajectories differ in length".into()));
            }
            for (t, (e, x)) in path.iter().zip(&item.trajectory.x).enumerate() {
                per_step[t] += (e - x).powi(2);
            }
        }
        estimates.extend(est);
    }
    let n = all.len() as f64;
    per_step.iter_mut().for_each(|v| *v /= n);
    let mse = per_step.iter().sum::<f64>() / steps as f64;
    if !mse.is_finite() {
        return Err(FilterError::NonFinite("evaluation"));
    }
    Ok(Evaluation {
        mse,
        per_step,
        estimates,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub elbo_term: Option<f64>,
    pub mse_term: Option<f64>,
    pub validation_mse: f64,
    pub wall_time_s: f64,
}

pub struct TrainOutcome {
    /// Parameters with the best validation error.
    pub best: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
    /// Whether the learning rate was halved after a numerical failure.
    pub recovered: bool,
}

struct BatchTotals {
    loss: f64,
    elbo: Option<f64>,
    mse: Option<f64>,
}

fn run_batch(
    learner: &dyn Learner,
    store: &mut ParameterStore,
    batch: &[Item<'_>],
    config: &TrainConfig,
    key: &[u64],
) -> Result<BatchTotals, TrainError> {
    store.zero_grads();
    let scale = 1.0 / batch.len() as f64;
    let mut totals = BatchTotals {
        loss: 0.0,
        elbo: None,
        mse: None,
    };
    for part in batch.chunks(config.chunk) {
        let tape = Tape::new();
        let bound = store.bind(&tape).map_err(FilterError::from)?;
        let terms = learner.chunk_loss(&tape, &bound, part, config, key)?;
        let lambda = if terms.elbo.is_some() { config.lambda } else { 1.0 };
        let Some(loss) = combined_loss(terms.elbo.as_ref(), terms.mse.as_ref(), lambda)? else {
            continue;
        };
        let loss = loss.scale(scale);
        if !loss.item().is_finite() {
            return Err(FilterError::NonFinite("training loss").into());
        }
        tape.backward(&loss).map_err(FilterError::from)?;
        store.accumulate(&bound);
        totals.loss += loss.item();
        if let Some(e) = &terms.elbo {
            *totals.elbo.get_or_insert(0.0) += e.item() * scale;
        }
        if let Some(m) = &terms.mse {
            *totals.mse.get_or_insert(0.0) += m.item() * scale;
        }
    }
    if !store.grads_finite() {
        return Err(FilterError::NonFinite("gradient").into());
    }
    Ok(totals)
}

/// Batches of one epoch: a fresh shuffle of the training split, cycled if it
/// holds fewer than `batches_per_epoch * batch_size` trajectories.
fn epoch_batches(n_train: usize, config: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(&mut substream(config.seed, &[purpose::SHUFFLE, epoch as u64]));
    let size = config.batch_size.min(n_train);
    (0..config.batches_per_epoch)
        .map(|b| (0..size).map(|j| order[(b * size + j) % n_train]).collect())
        .collect()
}

/// Validation key: the same streams every epoch.
pub const VALIDATION_KEY: [u64; 1] = [purpose::VALIDATE];
pub const TEST_KEY: [u64; 1] = [purpose::TEST];

/// Trains with AdamW, keeping the parameters with the lowest validation
/// error. Stops after `max_epochs`, or once `patience` consecutive epochs
/// fail to improve. A numerical failure restores the parameters from the
/// start of the epoch and halves the learning rate; a second one is fatal.
pub fn train(
    learner: &dyn Learner,
    data: &Dataset,
    config: &TrainConfig,
    config_hash: [u8; 32],
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if data.validation.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut store = learner.init(config.seed);
    let mut opt = AdamW::new(config.adamw(), &store);
    let train_items = items(&data.train);
    let mut metrics = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut stale = 0usize;
    let mut recovered = false;
    let start = Instant::now();

    for epoch in 1..=config.max_epochs {
        let snapshot = (store.clone(), opt.clone());
        let mut sums = (0.0, None::<f64>, None::<f64>);
        let batches = epoch_batches(train_items.len(), config, epoch);
        let mut failure = None;
        for (b, batch) in batches.iter().enumerate() {
            let chosen: Vec<Item<'_>> = batch.iter().map(|&i| train_items[i]).collect();
            let key = [purpose::TRAIN, epoch as u64, b as u64];
            match run_batch(learner, &mut store, &chosen, config, &key) {
                Ok(t) => {
                    sums.0 += t.loss;
                    if let Some(e) = t.elbo {
                        *sums.1.get_or_insert(0.0) += e;
                    }
                    if let Some(m) = t.mse {
                        *sums.2.get_or_insert(0.0) += m;
                    }
                    opt.step(&mut store);
                }
                Err(e) if e.is_numerical() || matches!(e, TrainError::Filter(_)) => {
                    failure = Some((b, e.to_string()));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some((batch, detail)) = failure {
            if recovered {
                return Err(TrainError::Diverged {
                    epoch,
                    batch,
                    detail,
                });
            }
            recovered = true;
            store = snapshot.0;
            opt = snapshot.1;
            opt.config.learning_rate *= 0.5;
            continue;
        }
        let validation_mse = match evaluate(
            learner,
            &store,
            &data.validation,
            config.train_particles,
            config.seed,
            &VALIDATION_KEY,
            config.chunk,
        ) {
            Ok(e) => e.mse,
            Err(FilterError::Degenerate { .. } | FilterError::NonFinite(_)) => f64::INFINITY,
            Err(e) => return Err(e.into()),
        };
        let n = batches.len() as f64;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: sums.0 / n,
            elbo_term: sums.1.map(|v| v / n),
            mse_term: sums.2.map(|v| v / n),
            validation_mse,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        let improved = best
            .as_ref()
            .is_none_or(|b| validation_mse < b.validation_mse);
        if improved {
            best = Some(Checkpoint {
                config_hash,
                epoch: epoch as u64,
                validation_mse,
                params: store.clone(),
                optimizer: Some(opt.clone()),
            });
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= config.patience {
            break;
        }
    }
    let best = best.ok_or_else(|| TrainError::Diverged {
        epoch: config.max_epochs,
        batch: 0,
        detail: "no epoch completed".into(),
    })?;
    Ok(TrainOutcome {
        best,
        metrics,
        recovered,
    })
}

/// Values tried by [`grid_search`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub lambda: Vec<f64>,
    pub alpha: Vec<f64>,
    pub learning_rate: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            lambda: vec![0.1, 1.0, 10.0],
            alpha: vec![0.5, 0.7, 0.9],
            learning_rate: vec![1e-3, 3e-3],
        }
    }
}

impl Grid {
    /// Cell configurations in a fixed order, each with its own seed.
    pub fn cells(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &lambda in &self.lambda {
            for &alpha in &self.alpha {
                for &learning_rate in &self.learning_rate {
                    let index = out.len() as u64;
                    out.push(TrainConfig {
                        lambda,
                        alpha,
                        learning_rate,
                        seed: derive_key(base.seed, &[purpose::GRID, index]),
                        ..*base
                    });
                }
            }
        }
        out
    }
}

pub struct GridResult {
    pub config: TrainConfig,
    pub outcome: TrainOutcome,
    /// Validation error of every cell, `None` for failed cells.
    pub cells: Vec<(TrainConfig, Option<f64>)>,
}

/// Trains every grid cell on up to `jobs` threads and keeps the one with the
/// lowest validation error; ties go to the smaller lambda, then the smaller
/// learning rate. The choice does not depend on `jobs`.
pub fn grid_search(
    learner: &dyn Learner,
    grid: &Grid,
    data: &Dataset,
    base: &TrainConfig,
    config_hash: [u8; 32],
    jobs: usize,
) -> Result<GridResult, TrainError> {
    let cells = grid.cells(base);
    if cells.is_empty() {
        return Err(TrainError::InvalidConfig("empty grid".into()));
    }
    let results = parallel_map(&cells, jobs, |c| train(learner, data, c, config_hash));
    let mut failures = Vec::new();
    let mut summary = Vec::new();
    for (i, (cell, result)) in cells.iter().zip(&results).enumerate() {
        match result {
            Ok(outcome) => summary.push((*cell, Some(outcome.best.validation_mse))),
            Err(e) => {
                summary.push((*cell, None));
                failures.push(format!("cell {i}: {e}"));
            }
        }
    }
    let Some(index) = select_cell(&summary) else {
        return Err(TrainError::AllCellsFailed(failures));
    };
    let outcome = results
        .into_iter()
        .nth(index)
        .expect("index in range")
        .expect("successful cell");
    Ok(GridResult {
        config: cells[index],
        outcome,
        cells: summary,
    })
}

/// Index of the cell with the lowest validation error; ties go to the
/// smaller lambda, then the smaller learning rate, then the earlier cell.
pub fn select_cell(cells: &[(TrainConfig, Option<f64>)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (cell, v)) in cells.iter().enumerate() {
        let Some(v) = *v else { continue };
        let better = match best {
            None => true,
            Some(j) => {
                let (other, bv) = (&cells[j].0, cells[j].1.expect("selected cells succeeded"));
                v < bv || (v == bv && (cell.lambda, cell.learning_rate) < (other.lambda, other.learning_rate))
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Maps `f` over `inputs` on up to `jobs` scoped threads, preserving order.
pub fn parallel_map<T: Sync, R: Send>(
    inputs: &[T],
    jobs: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let jobs = jobs.clamp(1, inputs.len().max(1));
    if jobs == 1 {
        return inputs.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..inputs.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= inputs.len() {
                    break;
                }
                let r = f(&inputs[i]);
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|r| r.expect("every input processed"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use crate::learned_models::TrueModels;
    use crate::regime_filter::prior_log_density;
    use crate::ssm::{generate_dataset, MarkovDynamic, RegimeBank};
    use approx::assert_abs_diff_eq;

    fn markov_data(n_regimes: usize, n: usize, t_final: usize, seed: u64) -> (TrueDynamic, RegimeBank, Dataset) {
        let dynamic = TrueDynamic::Markov(MarkovDynamic::cyclic(n_regimes, 0.8, 0.15));
        let bank = RegimeBank::default().subset(&(0..n_regimes).collect::<Vec<_>>()).unwrap();
        let data = generate_dataset(&dynamic, &bank, n, t_final, seed).unwrap();
        (dynamic, bank, data)
    }

    fn learner(n_regimes: usize, loss: LossMode) -> RegimeLearner {
        RegimeLearner {
            n_regimes,
            hidden: 4,
            switching: SwitchingKind::Learned,
            loss,
        }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            train_particles: 8,
            eval_particles: 16,
            batch_size: 4,
            batches_per_epoch: 2,
            max_epochs: 3,
            patience: 2,
            chunk: 2,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn combined_loss_arithmetic() {
        let tape = Tape::new();
        let e = tape.scalar(2.0);
        let m = tape.scalar(1.0);
        let l = combined_loss(Some(&e), Some(&m), 0.5).unwrap().unwrap();
        assert_eq!(l.item(), 2.5);
        let l0 = combined_loss(Some(&e), Some(&m), 0.0).unwrap().unwrap();
        assert_eq!(l0.item(), 2.0);
        assert!(combined_loss(None, None, 1.0).unwrap().is_none());
    }

    #[test]
    fn combined_gradient_is_linear_in_the_terms() {
        let tape = Tape::new();
        let w = tape.param(ndarray::arr1(&[0.3, -1.2]).into_dyn()).unwrap();
        let elbo = w.square().sum();
        let mse = w.square().mul(&w).unwrap().sum();
        let l = combined_loss(Some(&elbo), Some(&mse), 0.25).unwrap().unwrap();
        tape.backward(&l).unwrap();
        let g = w.grad().unwrap();
        for (i, &v) in [0.3f64, -1.2].iter().enumerate() {
            assert_abs_diff_eq!(g[[i]], 2.0 * v + 0.25 * 3.0 * v * v, epsilon = 1e-12);
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let (_, _, data) = markov_data(2, 4, 2, 11);
        let l = learner(2, LossMode::Combined);
        let store = l.init(3);
        let config = TrainConfig {
            train_particles: 2,
            lambda: 0.7,
            alpha: 0.6,
            ..Default::default()
        };
        let chunk = items(&data.train[..1]);
        let point: Vec<_> = store.iter().map(|p| p.value.clone()).collect();
        let err = gradient_check(
            |tape, vars| -> Result<Var<'_>, FilterError> {
                let bound = store.bind_vars(vars)?;
                let terms = l.chunk_loss(tape, &bound, &chunk, &config, &[9])?;
                Ok(combined_loss(terms.elbo.as_ref(), terms.mse.as_ref(), config.lambda)?.unwrap())
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn identically_keyed_trajectories_get_identical_losses() {
        let (_, _, data) = markov_data(3, 4, 5, 2);
        let l = learner(3, LossMode::MseOnly);
        let store = l.init(1);
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let one = Item {
            id: 7,
            trajectory: &data.train[0],
        };
        let mut rngs = trajectory_rngs(1, &[4], &[one, one], &[0]);
        let models = l.bank().bind(&tape, &bound, "").unwrap();
        let switching = SwitchNet::new(3).bind(&tape, &bound, SWITCH_PREFIX).unwrap();
        let (_, mse) = joint_filter_pass(
            &tape,
            &switching,
            &models,
            &[one, one],
            16,
            Resampler::every_step(Scheme::TruncatedGradient),
            Proposal::Uniform,
            &mut rngs,
        )
        .unwrap();
        let v = mse.to_vec();
        assert_eq!(v[0], v[1]);
        assert!(v[0] > 0.0 && v[0].is_finite());
    }

    #[test]
    fn single_particle_single_regime_elbo_is_the_joint_density() {
        let (_, _, data) = markov_data(1, 4, 4, 8);
        let traj = &data.train[0];
        let bank = RegimeBank::default().subset(&[0]).unwrap();
        let tape = Tape::no_grad();
        let models = TrueModels::new(&tape, bank.clone());
        let switching = TrueSwitching::new(&tape, TrueDynamic::Markov(MarkovDynamic::new(vec![vec![1.0]]).unwrap()));
        let chunk = [Item {
            id: 0,
            trajectory: traj,
        }];
        let mut rngs = trajectory_rngs(0, &[1], &chunk, &[1]);
        let nll = marginal_filter_pass(
            &tape,
            &switching,
            &models,
            &chunk,
            1,
            Resampler::every_step(Scheme::Soft { alpha: 0.5 }),
            &mut rngs,
        )
        .unwrap()
        .item();
        let normal = |v: f64, m: f64, s2: f64| -0.5 * ((v - m).powi(2) / s2 + (2.0 * std::f64::consts::PI * s2).ln());
        let (a, b, s2) = (bank.a[0], bank.b[0], bank.sigma2);
        let mut exact = prior_log_density(traj.x[0]);
        for t in 0..traj.len() {
            if t > 0 {
                exact += normal(traj.x[t], a * traj.x[t - 1] + b, s2);
            }
            exact += normal(traj.y[t], a * traj.x[t].abs().sqrt() + b, s2);
        }
        assert_abs_diff_eq!(nll, -exact, epsilon = 1e-9);
    }

    #[test]
    fn patience_zero_returns_the_first_epoch() {
        let (_, _, data) = markov_data(2, 16, 4, 3);
        let config = TrainConfig {
            patience: 0,
            max_epochs: 1,
            ..small_config()
        };
        let out = train(&learner(2, LossMode::Combined), &data, &config, [0; 32]).unwrap();
        assert_eq!(out.best.epoch, 1);
        assert_eq!(out.metrics.len(), 1);
        assert!(out.metrics[0].elbo_term.is_some() && out.metrics[0].mse_term.is_some());
    }

    #[test]
    fn training_is_deterministic_and_selection_is_monotone() {
        let (_, _, data) = markov_data(2, 16, 4, 3);
        let l = learner(2, LossMode::Combined);
        let a = train(&l, &data, &small_config(), [1; 32]).unwrap();
        let b = train(&l, &data, &small_config(), [1; 32]).unwrap();
        assert_eq!(a.best.to_bytes(), b.best.to_bytes());
        assert_eq!(a.metrics.len(), b.metrics.len());
        let mut best = f64::INFINITY;
        for m in &a.metrics {
            best = best.min(m.validation_mse);
        }
        assert_eq!(best, a.best.validation_mse);
    }

    #[test]
    fn mse_only_skips_the_elbo_term() {
        let (_, _, data) = markov_data(2, 16, 4, 3);
        let config = TrainConfig {
            max_epochs: 1,
            ..small_config()
        };
        let out = train(&learner(2, LossMode::MseOnly), &data, &config, [0; 32]).unwrap();
        assert!(out.metrics[0].elbo_term.is_none());
        assert!(out.metrics[0].mse_term.is_some());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (_, _, data) = markov_data(2, 16, 4, 3);
        let l = learner(2, LossMode::Combined);
        for config in [
            TrainConfig { alpha: 1.5, ..small_config() },
            TrainConfig { lambda: -1.0, ..small_config() },
            TrainConfig { batch_size: 0, ..small_config() },
        ] {
            assert!(matches!(train(&l, &data, &config, [0; 32]), Err(TrainError::InvalidConfig(_))));
        }
        let empty = Dataset {
            validation: vec![],
            ..data
        };
        assert!(matches!(train(&l, &empty, &small_config(), [0; 32]), Err(TrainError::EmptySplit(_))));
    }

    #[test]
    fn grid_selection_is_the_argmin_and_independent_of_jobs() {
        let (_, _, data) = markov_data(2, 16, 4, 4);
        let l = learner(2, LossMode::Combined);
        let grid = Grid {
            lambda: vec![0.0, 0.1],
            alpha: vec![0.7],
            learning_rate: vec![1e-3],
        };
        let config = TrainConfig {
            max_epochs: 2,
            ..small_config()
        };
        let serial = grid_search(&l, &grid, &data, &config, [0; 32], 1).unwrap();
        let parallel = grid_search(&l, &grid, &data, &config, [0; 32], 2).unwrap();
        assert_eq!(serial.config, parallel.config);
        assert_eq!(serial.outcome.best.to_bytes(), parallel.outcome.best.to_bytes());
        for (_, v) in &serial.cells {
            assert!(serial.outcome.best.validation_mse <= v.unwrap());
        }
    }

    #[test]
    fn single_cell_grid_equals_train() {
        let (_, _, data) = markov_data(2, 16, 4, 4);
        let l = learner(2, LossMode::Combined);
        let grid = Grid {
            lambda: vec![1.0],
            alpha: vec![0.7],
            learning_rate: vec![1e-3],
        };
        let config = TrainConfig {
            max_epochs: 1,
            ..small_config()
        };
        let g = grid_search(&l, &grid, &data, &config, [0; 32], 1).unwrap();
        let t = train(&l, &data, &g.config, [0; 32]).unwrap();
        assert_eq!(g.outcome.best.to_bytes(), t.best.to_bytes());
    }

    #[test]
    fn grid_ties_prefer_smaller_lambda_then_learning_rate() {
        let cell = |lambda, learning_rate| TrainConfig {
            lambda,
            learning_rate,
            ..Default::default()
        };
        let cells = vec![
            (cell(1.0, 1e-3), Some(0.5)),
            (cell(0.1, 3e-3), Some(0.5)),
            (cell(0.1, 1e-3), Some(0.5)),
            (cell(0.0, 1e-3), None),
            (cell(10.0, 1e-3), Some(0.7)),
        ];
        assert_eq!(select_cell(&cells), Some(2));
        assert_eq!(select_cell(&cells[3..4]), None);
        let grid = Grid::default().cells(&TrainConfig::default());
        assert_eq!(grid.len(), 18);
        let seeds: std::collections::HashSet<u64> = grid.iter().map(|c| c.seed).collect();
        assert_eq!(seeds.len(), 18);
    }

    #[test]
    fn parallel_map_preserves_order() {
        let v: Vec<usize> = (0..17).collect();
        assert_eq!(parallel_map(&v, 3, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
