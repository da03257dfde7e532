//! Comparison methods: fixed-regime filters (a single learned model, or one
//! filter per regime mixed by their likelihoods), the oracle filter on the
//! true system, and a recurrent regressor.

use crate::autodiff::{Tape, Var};
use crate::filter::{run_filter, FilterError, Layout, Resampler, Scheme};
use crate::learned_models::{RegimeModels, RegimeNetBank, TrueModels};
use crate::params::{Bound, ParameterStore};
use crate::regime_filter::{prior_log_density, FixedRegimeModel};
use crate::regime_net::{Proposal, TrueSwitching};
use crate::rng::{purpose, substream, FilterRngs};
use crate::ssm::{RegimeBank, TrueDynamic};
use crate::training::{
    joint_filter_pass, squared_error, transpose, Estimator, Item, Learner, LossTerms, TrainConfig,
};

/// Output of a bank of fixed-regime filters.
pub struct MixtureOutput<'t> {
    /// Mixture estimates per step, each `[trajectories]`.
    pub estimates: Vec<Var<'t>>,
    /// Posterior log-probabilities of the regimes per step, each
    /// `[trajectories, regimes]`.
    pub log_probs: Vec<Var<'t>>,
}

/// One bootstrap filter per (trajectory, regime) pair, filter `c * K + j`
/// running regime `j` on trajectory `c` with `particles` particles. Regime
/// probabilities are proportional to each filter's likelihood estimate up
/// to the current step under a uniform prior over regimes; the estimate is
/// the probability-weighted mean of the per-filter estimates.
pub fn mixture_filter<'t, M: RegimeModels<'t>>(
    tape: &'t Tape,
    models: &M,
    chunk: &[Item<'_>],
    particles: usize,
    resampler: Resampler,
    rngs: &mut [FilterRngs],
) -> Result<MixtureOutput<'t>, FilterError> {
    let k = models.n_regimes();
    let c = chunk.len();
    let model = FixedRegimeModel {
        tape,
        models,
        observations: chunk
            .iter()
            .flat_map(|i| std::iter::repeat_n(i.trajectory.y.as_slice(), k))
            .collect(),
        regimes: (0..c).flat_map(|_| 0..k).collect(),
    };
    let layout = Layout::new(c * k, particles);
    let out = run_filter(tape, &model, layout, resampler, rngs).map_err(|e| match e {
        FilterError::Degenerate { step, row } => FilterError::Degenerate {
            step,
            row: chunk[row / k].id,
        },
        other => other,
    })?;
    let mut cumulative: Option<Var<'t>> = None;
    let mut estimates = Vec::with_capacity(out.estimates.len());
    let mut log_probs = Vec::with_capacity(out.estimates.len());
    for (inc, est) in out.log_lik_increments.iter().zip(&out.estimates) {
        let cum = match cumulative {
            Some(prev) => prev.add(inc)?,
            None => inc.clone(),
        };
        let grid = cum.reshape(&[c, k])?;
        let norm = grid.logsumexp_rows()?.reshape(&[c, 1])?;
        let lp = grid.sub(&norm)?;
        let mixed = lp.exp().mul(&est.reshape(&[c, k])?)?.sum_axis(1)?;
        estimates.push(mixed);
        log_probs.push(lp);
        cumulative = Some(cum);
    }
    Ok(MixtureOutput {
        estimates,
        log_probs,
    })
}

/// `log p(x_{0:T}, y_{0:T} | k_t = j for all t)` for every trajectory and
/// regime, `[trajectories * K]` with row `c * K + j`.
pub fn fixed_regime_log_density<'t, M: RegimeModels<'t>>(
    tape: &'t Tape,
    models: &M,
    chunk: &[Item<'_>],
) -> Result<Var<'t>, FilterError> {
    let k = models.n_regimes();
    let steps = chunk.first().ok_or(FilterError::Empty)?.trajectory.len();
    let rows = chunk.len() * k;
    let (mut x, mut y, mut x_prev, mut x_next, mut regimes_obs, mut regimes_dyn) =
        (vec![], vec![], vec![], vec![], vec![], vec![]);
    let mut prior = Vec::with_capacity(rows);
    for item in chunk {
        let tr = item.trajectory;
        if tr.len() != steps {
            return Err(FilterError::Model("trajectories differ in length".into()));
        }
        for j in 0..k {
            prior.push(prior_log_density(tr.x[0]));
            x.extend_from_slice(&tr.x);
            y.extend_from_slice(&tr.y);
            regimes_obs.extend(std::iter::repeat_n(j, steps));
            x_prev.extend_from_slice(&tr.x[..steps - 1]);
            x_next.extend_from_slice(&tr.x[1..]);
            regimes_dyn.extend(std::iter::repeat_n(j, steps - 1));
        }
    }
    let log_g = models
        .observation_logpdf(&tape.vector(y), &tape.vector(x), &regimes_obs)?
        .reshape(&[rows, steps])?
        .sum_axis(1)?;
    let mut total = log_g.add(&tape.vector(prior))?;
    if steps > 1 {
        let log_m = models
            .dynamic_logpdf(&tape.vector(x_next), &tape.vector(x_prev), &regimes_dyn)?
            .reshape(&[rows, steps - 1])?
            .sum_axis(1)?;
        total = total.add(&log_m)?;
    }
    Ok(total)
}

/// Fixed-regime filters with learned models. One regime is the plain
/// learned filter on `x` alone; several regimes give the multiple-model
/// filter, which runs one filter of the full particle count per regime.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedRegimeLearner {
    pub n_regimes: usize,
    pub hidden: usize,
    /// Train on `-log((1/K) sum_j p(x, y | j)) + lambda * MSE` rather than
    /// the squared error alone.
    pub combined: bool,
}

impl FixedRegimeLearner {
    pub fn single(hidden: usize) -> Self {
        FixedRegimeLearner {
            n_regimes: 1,
            hidden,
            combined: false,
        }
    }

    pub fn multiple(n_regimes: usize, hidden: usize) -> Self {
        FixedRegimeLearner {
            n_regimes,
            hidden,
            combined: true,
        }
    }

    fn bank(&self) -> RegimeNetBank {
        RegimeNetBank::new(self.n_regimes, self.hidden)
    }

    /// Particles per regime filter: every filter gets the full count.
    pub fn per_filter(&self, particles: usize) -> usize {
        particles.max(1)
    }

    fn rngs(&self, seed: u64, key: &[u64], chunk: &[Item<'_>]) -> Vec<FilterRngs> {
        let mut out = Vec::with_capacity(chunk.len() * self.n_regimes);
        for item in chunk {
            for j in 0..self.n_regimes {
                let mut path = key.to_vec();
                path.extend_from_slice(&[item.id as u64, 0, j as u64]);
                out.push(FilterRngs::new(seed, &path));
            }
        }
        out
    }
}

impl Estimator for FixedRegimeLearner {
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
        let mut rngs = self.rngs(seed, key, chunk);
        let out = mixture_filter(
            &tape,
            &models,
            chunk,
            self.per_filter(particles),
            Resampler::every_step(Scheme::Systematic),
            &mut rngs,
        )?;
        Ok(transpose(&out.estimates, chunk.len()))
    }
}

impl Learner for FixedRegimeLearner {
    fn init(&self, seed: u64) -> ParameterStore {
        self.bank().init("", &mut substream(seed, &[purpose::INIT]))
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
        let run_joint = !self.combined || config.lambda > 0.0;
        let mse = if run_joint {
            let mut rngs = self.rngs(config.seed, key, chunk);
            let out = mixture_filter(
                tape,
                &models,
                chunk,
                self.per_filter(config.train_particles),
                Resampler::every_step(Scheme::TruncatedGradient),
                &mut rngs,
            )?;
            Some(squared_error(tape, &out.estimates, chunk)?.sum())
        } else {
            None
        };
        let elbo = if self.combined {
            let k = self.n_regimes;
            let lp = fixed_regime_log_density(tape, &models, chunk)?.reshape(&[chunk.len(), k])?;
            let marginal = lp.logsumexp_rows()?.offset(-(k as f64).ln());
            Some(marginal.sum().neg())
        } else {
            None
        };
        Ok(LossTerms { elbo, mse })
    }

    fn uses_elbo(&self, _config: &TrainConfig) -> bool {
        self.combined
    }
}

/// The filter on the true system: true regime models, true switching
/// dynamic, regimes proposed from the dynamic. Nothing is learned.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleFilter {
    pub bank: RegimeBank,
    pub dynamic: TrueDynamic,
}

impl Estimator for OracleFilter {
    fn estimate(
        &self,
        _params: &ParameterStore,
        chunk: &[Item<'_>],
        particles: usize,
        seed: u64,
        key: &[u64],
    ) -> Result<Vec<Vec<f64>>, FilterError> {
        let tape = Tape::no_grad();
        let models = TrueModels::new(&tape, self.bank.clone());
        let switching = TrueSwitching::new(&tape, self.dynamic.clone());
        let mut rngs = crate::training::trajectory_rngs(seed, key, chunk, &[0]);
        let (est, _) = joint_filter_pass(
            &tape,
            &switching,
            &models,
            chunk,
            particles,
            Resampler::every_step(Scheme::Systematic),
            Proposal::Target,
            &mut rngs,
        )?;
        Ok(transpose(&est, chunk.len()))
    }
}

/// Single-layer LSTM reading `y_{0:t}` with a linear head to `x̂_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmLearner {
    pub hidden: usize,
}

impl Default for LstmLearner {
    fn default() -> Self {
        LstmLearner { hidden: 32 }
    }
}

/// LSTM parameters on a tape. Gate pre-activations are stacked as
/// `[input; forget; cell; output]`, each `hidden` rows.
pub struct BoundLstm<'t> {
    pub hidden: usize,
    /// `[4H, 1]`.
    pub w_input: Var<'t>,
    /// `[4H, H]`.
    pub w_hidden: Var<'t>,
    /// `[4H, 1]`.
    pub bias: Var<'t>,
    /// `[1, H]`.
    pub w_out: Var<'t>,
    /// `[1, 1]`.
    pub b_out: Var<'t>,
}

impl<'t> BoundLstm<'t> {
    pub fn from_bound(hidden: usize, bound: &Bound<'t>) -> Result<Self, FilterError> {
        Ok(BoundLstm {
            hidden,
            w_input: bound.get("lstm.w_input")?.clone(),
            w_hidden: bound.get("lstm.w_hidden")?.clone(),
            bias: bound.get("lstm.bias")?.clone(),
            w_out: bound.get("head.w")?.clone(),
            b_out: bound.get("head.b")?.clone(),
        })
    }

    /// One cell step on a batch laid out by column: `y` is `[1, B]`, `h` and
    /// `c` are `[H, B]`. Returns the new `(h, c)`.
    pub fn cell(&self, y: &Var<'t>, h: &Var<'t>, c: &Var<'t>) -> Result<(Var<'t>, Var<'t>), FilterError> {
        let hd = self.hidden;
        let z = self
            .w_hidden
            .matmul(h)?
            .add(&self.w_input.matmul(y)?)?
            .add(&self.bias)?;
        let gate = |g: usize| z.gather(&(g * hd..(g + 1) * hd).collect::<Vec<_>>());
        let input = gate(0)?.sigmoid();
        let forget = gate(1)?.sigmoid();
        let candidate = gate(2)?.tanh();
        let output = gate(3)?.sigmoid();
        let c = forget.mul(c)?.add(&input.mul(&candidate)?)?;
        let h = output.mul(&c.tanh())?;
        Ok((h, c))
    }

    /// `x̂_{0:T}`, each `[B]`, from observation rows `[B][T+1]`.
    pub fn run(&self, tape: &'t Tape, observations: &[&[f64]]) -> Result<Vec<Var<'t>>, FilterError> {
        let b = observations.len();
        let steps = observations.first().map_or(0, |o| o.len());
        let zeros = || tape.constant(ndarray::Array2::<f64>::zeros((self.hidden, b)).into_dyn());
        let (mut h, mut c) = (zeros()?, zeros()?);
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let y = tape.vector(observations.iter().map(|o| o[t]).collect()).reshape(&[1, b])?;
            (h, c) = self.cell(&y, &h, &c)?;
            let est = self.w_out.matmul(&h)?.add(&self.b_out)?.reshape(&[b])?;
            out.push(est);
        }
        Ok(out)
    }
}

impl LstmLearner {
    fn run<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, chunk: &[Item<'_>]) -> Result<Vec<Var<'t>>, FilterError> {
        let lstm = BoundLstm::from_bound(self.hidden, bound)?;
        let obs: Vec<&[f64]> = chunk.iter().map(|i| i.trajectory.y.as_slice()).collect();
        lstm.run(tape, &obs)
    }
}

impl Estimator for LstmLearner {
    fn estimate(
        &self,
        params: &ParameterStore,
        chunk: &[Item<'_>],
        _particles: usize,
        _seed: u64,
        _key: &[u64],
    ) -> Result<Vec<Vec<f64>>, FilterError> {
        let tape = Tape::no_grad();
        let bound = params.bind(&tape)?;
        let est = self.run(&tape, &bound, chunk)?;
        Ok(transpose(&est, chunk.len()))
    }
}

impl Learner for LstmLearner {
    /// Uniform `±1/sqrt(H)` weights and biases.
    fn init(&self, seed: u64) -> ParameterStore {
        use rand::Rng as _;
        let mut rng = substream(seed, &[purpose::INIT]);
        let h = self.hidden;
        let bound = 1.0 / (h as f64).sqrt();
        let mut uniform = |shape: &[usize]| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            crate::autodiff::Array::from_shape_vec(shape.to_vec(), data).expect("shape matches length")
        };
        let mut store = ParameterStore::new();
        for (name, shape) in [
            ("lstm.w_input", vec![4 * h, 1]),
            ("lstm.w_hidden", vec![4 * h, h]),
            ("lstm.bias", vec![4 * h, 1]),
            ("head.w", vec![1, h]),
            ("head.b", vec![1, 1]),
        ] {
            store
                .insert(name, uniform(&shape), true)
                .expect("distinct names");
        }
        store
    }

    fn chunk_loss<'t>(
        &self,
        tape: &'t Tape,
        params: &Bound<'t>,
        chunk: &[Item<'_>],
        _config: &TrainConfig,
        _key: &[u64],
    ) -> Result<LossTerms<'t>, FilterError> {
        let est = self.run(tape, params, chunk)?;
        Ok(LossTerms {
            elbo: None,
            mse: Some(squared_error(tape, &est, chunk)?.sum()),
        })
    }

    fn uses_elbo(&self, _config: &TrainConfig) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use crate::ssm::{generate_dataset, MarkovDynamic, Trajectory};
    use crate::training::{evaluate, items, TEST_KEY};
    use approx::assert_abs_diff_eq;

    fn markov(n: usize, t_final: usize, seed: u64) -> crate::ssm::Dataset {
        generate_dataset(
            &TrueDynamic::Markov(MarkovDynamic::default()),
            &RegimeBank::default(),
            n,
            t_final,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn one_regime_mixture_is_the_single_filter() {
        let data = markov(8, 6, 1);
        let single = FixedRegimeLearner::single(8);
        let multi = FixedRegimeLearner {
            combined: true,
            ..FixedRegimeLearner::multiple(1, 8)
        };
        let store = single.init(4);
        assert_eq!(store, multi.init(4));
        let a = evaluate(&single, &store, &data.test, 50, 2, &TEST_KEY, 3).unwrap();
        let b = evaluate(&multi, &store, &data.test, 50, 2, &TEST_KEY, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mixture_concentrates_on_the_frozen_regime() {
        // Regime 3 (0-based 2) forever: x_t = -0.5 x + 2, observed through
        // -0.5 sqrt|x| + 2.
        let bank = RegimeBank::default();
        let mut rng = substream(77, &[1]);
        let mut traj = Trajectory {
            x: vec![0.1],
            y: vec![],
            k: vec![2; 11],
        };
        for t in 1..11 {
            let prev = traj.x[t - 1];
            traj.x.push(crate::ssm::sample_dynamic(prev, crate::ssm::Regime::from_index(2, 8).unwrap(), &bank, &mut rng).unwrap());
        }
        for t in 0..11 {
            let x = traj.x[t];
            traj.y.push(crate::ssm::sample_observation(x, crate::ssm::Regime::from_index(2, 8).unwrap(), &bank, &mut rng).unwrap());
        }
        let tape = Tape::no_grad();
        let models = TrueModels::new(&tape, bank);
        let chunk = [Item {
            id: 0,
            trajectory: &traj,
        }];
        let learner = FixedRegimeLearner::multiple(8, 1);
        let mut rngs = learner.rngs(3, &[1], &chunk);
        let out = mixture_filter(&tape, &models, &chunk, 250, Resampler::every_step(Scheme::Systematic), &mut rngs).unwrap();
        let p = out.log_probs[10].to_vec()[2].exp();
        assert!(p > 0.9, "posterior of the true regime {p}");
    }

    #[test]
    fn fixed_regime_density_matches_hand_computation() {
        let data = markov(4, 3, 9);
        let tr = &data.train[0];
        let tape = Tape::no_grad();
        let bank = RegimeBank::default();
        let models = TrueModels::new(&tape, bank.clone());
        let chunk = [Item { id: 0, trajectory: tr }];
        let lp = fixed_regime_log_density(&tape, &models, &chunk).unwrap().to_vec();
        let normal = |v: f64, m: f64, s2: f64| -0.5 * ((v - m).powi(2) / s2 + (2.0 * std::f64::consts::PI * s2).ln());
        for j in 0..8 {
            let (a, b) = (bank.a[j], bank.b[j]);
            let mut exact = prior_log_density(tr.x[0]);
            for t in 0..tr.len() {
                if t > 0 {
                    exact += normal(tr.x[t], a * tr.x[t - 1] + b, 0.1);
                }
                exact += normal(tr.y[t], a * tr.x[t].abs().sqrt() + b, 0.1);
            }
            assert_abs_diff_eq!(lp[j], exact, epsilon = 1e-9);
        }
    }

    #[test]
    fn oracle_runs_with_one_particle() {
        let data = markov(8, 5, 2);
        let oracle = OracleFilter {
            bank: RegimeBank::default(),
            dynamic: TrueDynamic::Markov(MarkovDynamic::default()),
        };
        let e = evaluate(&oracle, &ParameterStore::new(), &data.test, 1, 0, &TEST_KEY, 2).unwrap();
        assert!(e.mse.is_finite());
    }

    #[test]
    fn lstm_with_a_constant_head_scores_the_variance() {
        let data = markov(16, 5, 6);
        let l = LstmLearner { hidden: 4 };
        let mut store = l.init(1);
        let xs: Vec<f64> = data.test.iter().flat_map(|t| t.x.iter().copied()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        store.get_mut("head.w").unwrap().fill(0.0);
        store.get_mut("head.b").unwrap().fill(mean);
        let e = evaluate(&l, &store, &data.test, 1, 0, &TEST_KEY, 3).unwrap();
        assert_abs_diff_eq!(e.mse, var, epsilon = 1e-9);
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let data = markov(4, 3, 6);
        let l = LstmLearner { hidden: 3 };
        let store = l.init(2);
        let chunk = items(&data.train[..2]);
        let point: Vec<_> = store.iter().map(|p| p.value.clone()).collect();
        let err = gradient_check(
            |tape, vars| -> Result<Var<'_>, FilterError> {
                let bound = store.bind_vars(vars)?;
                Ok(l.chunk_loss(tape, &bound, &chunk, &TrainConfig::default(), &[])?.mse.unwrap())
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn mixture_gradients_match_finite_differences() {
        let data = markov(4, 2, 3);
        let l = FixedRegimeLearner::multiple(2, 3);
        let store = l.init(5);
        let chunk = items(&data.train[..1]);
        let config = TrainConfig {
            train_particles: 4,
            lambda: 0.5,
            ..Default::default()
        };
        let point: Vec<_> = store.iter().map(|p| p.value.clone()).collect();
        let err = gradient_check(
            |tape, vars| -> Result<Var<'_>, FilterError> {
                let bound = store.bind_vars(vars)?;
                let terms = l.chunk_loss(tape, &bound, &chunk, &config, &[2])?;
                Ok(crate::training::combined_loss(terms.elbo.as_ref(), terms.mse.as_ref(), 0.5)?.unwrap())
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
