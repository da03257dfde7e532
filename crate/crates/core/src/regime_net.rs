//! Switching dynamics as seen by a particle filter: the learned gated-memory
//! network, the true Markov and Pólya-urn laws, and regime-index proposals.
//!
//! Each particle carries a memory matrix row summarising its regime history.
//! For the learned dynamic it is the gated recurrent state; for the Markov
//! law it is the one-hot previous regime; for the Pólya urn it is the regime
//! counts.

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;

use crate::autodiff::{one_hot, Tape, Var};
use crate::filter::{FilterError, Layout, Result};
use crate::params::{Bound, ParameterStore};
use crate::rng::{FilterRngs, Rng};
use crate::ssm::{sample_categorical, TrueDynamic};

/// Mass added to every unnormalised regime probability.
pub const PROB_FLOOR: f64 = 1e-8;

pub trait Switching<'t> {
    fn n_regimes(&self) -> usize;

    /// `log K0(k)` for every regime, `[n_regimes]`.
    fn prior_log_probs(&self) -> Result<Var<'t>>;

    /// The memory `r_{-1}` before any regime, `[m, d]`.
    fn initial_memory(&self, m: usize) -> Result<Var<'t>>;

    /// `log K(k | r)` for every particle and regime, `[m, n_regimes]`.
    fn transition_log_probs(&self, memory: &Var<'t>) -> Result<Var<'t>>;

    /// Memory after each particle moves to regime `k`.
    fn update(&self, memory: &Var<'t>, k: &[usize]) -> Result<Var<'t>>;
}

/// How regime indices are proposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proposal {
    /// Uniform over regimes with importance correction `log K(k) + log n`.
    Uniform,
    /// From the switching dynamic itself; no correction.
    Target,
}

/// Draws one regime per particle from `log_probs` (`[m, n]`, or `[n]`
/// shared by all particles) and returns the log importance correction, or
/// `None` when the proposal is the target.
pub fn propose_regimes<'t>(
    mode: Proposal,
    log_probs: &Var<'t>,
    layout: Layout,
    rngs: &mut [FilterRngs],
) -> Result<(Vec<usize>, Option<Var<'t>>)> {
    let m = layout.size();
    let shared = log_probs.shape().len() == 1;
    let n = *log_probs.shape().last().unwrap_or(&0);
    if n == 0 || (!shared && log_probs.shape()[0] != m) {
        return Err(FilterError::Model(format!(
            "regime log-probabilities of shape {:?} for {m} particles",
            log_probs.shape()
        )));
    }
    let mut k = Vec::with_capacity(m);
    let data = log_probs.data();
    for (row, rng) in rngs.iter_mut().enumerate().take(layout.filters) {
        for j in 0..layout.particles {
            let i = row * layout.particles + j;
            k.push(match mode {
                Proposal::Uniform => rng.index.random_range(0..n),
                Proposal::Target => {
                    let probs: Vec<f64> = if shared {
                        data.iter().map(|l| l.exp()).collect()
                    } else {
                        data.index_axis(Axis(0), i).iter().map(|l| l.exp()).collect()
                    };
                    sample_categorical(&probs, &mut rng.index)
                }
            });
        }
    }
    let correction = match mode {
        Proposal::Target => None,
        Proposal::Uniform => {
            let picked = if shared {
                log_probs.gather(&k)?
            } else {
                let flat: Vec<usize> = k.iter().enumerate().map(|(i, &k)| i * n + k).collect();
                log_probs.reshape(&[m * n])?.gather(&flat)?
            };
            Some(picked.offset((n as f64).ln()))
        }
    };
    Ok((k, correction))
}

/// Shape of the learned switching network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwitchNet {
    pub n_regimes: usize,
    /// Memory width `d_r`.
    pub memory: usize,
    /// Width `d_h` of the hidden layer in the probability head.
    pub hidden: usize,
}

const THETAS: [&str; 6] = ["theta1", "theta2", "theta3", "theta4", "theta5", "theta6"];

impl SwitchNet {
    /// Memory and hidden widths equal to the number of regimes.
    pub fn new(n_regimes: usize) -> Self {
        SwitchNet {
            n_regimes,
            memory: n_regimes,
            hidden: n_regimes,
        }
    }

    fn shapes(&self) -> [(usize, usize); 6] {
        let (k, d, h) = (self.n_regimes, self.memory, self.hidden);
        [(d, d), (d, k), (d, k), (d, k), (k, h), (h, d)]
    }

    /// Θ entries uniform in `±1/sqrt(fan_in)`, prior logits zero.
    pub fn init(&self, prefix: &str, rng: &mut Rng) -> ParameterStore {
        let mut store = ParameterStore::new();
        for (name, (rows, cols)) in THETAS.iter().zip(self.shapes()) {
            let bound = 1.0 / (cols as f64).sqrt();
            let value = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound));
            store
                .insert(&format!("{prefix}{name}"), value.into_dyn(), true)
                .expect("names are distinct");
        }
        store
            .insert(
                &format!("{prefix}prior_logits"),
                Array1::zeros(self.n_regimes).into_dyn(),
                true,
            )
            .expect("names are distinct");
        store
    }

    pub fn bind<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, prefix: &str) -> Result<LearnedSwitching<'t>> {
        let mut thetas = Vec::with_capacity(6);
        for (name, shape) in THETAS.iter().zip(self.shapes()) {
            let v = bound.get(&format!("{prefix}{name}"))?.clone();
            if v.shape() != [shape.0, shape.1] {
                return Err(FilterError::Model(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    v.shape()
                )));
            }
            thetas.push(v);
        }
        let prior_logits = bound.get(&format!("{prefix}prior_logits"))?.clone();
        LearnedSwitching::new(tape, *self, thetas, prior_logits)
    }
}

/// The learned switching dynamic with its parameters on a tape.
pub struct LearnedSwitching<'t> {
    tape: &'t Tape,
    shape: SwitchNet,
    theta1_t: Var<'t>,
    theta2_t: Var<'t>,
    theta3_t: Var<'t>,
    theta4_t: Var<'t>,
    theta5_t: Var<'t>,
    theta6_t: Var<'t>,
    prior_logits: Var<'t>,
}

impl<'t> LearnedSwitching<'t> {
    /// `thetas` are Θ1..Θ6 in their natural shapes.
    pub fn new(tape: &'t Tape, shape: SwitchNet, thetas: Vec<Var<'t>>, prior_logits: Var<'t>) -> Result<Self> {
        let t: Vec<Var<'t>> = thetas
            .iter()
            .map(Var::transpose)
            .collect::<std::result::Result<_, _>>()?;
        let [theta1_t, theta2_t, theta3_t, theta4_t, theta5_t, theta6_t]: [Var<'t>; 6] = t
            .try_into()
            .map_err(|_| FilterError::Model("expected six gate matrices".into()))?;
        Ok(LearnedSwitching {
            tape,
            shape,
            theta1_t,
            theta2_t,
            theta3_t,
            theta4_t,
            theta5_t,
            theta6_t,
            prior_logits,
        })
    }

    /// Normalised regime probabilities from the previous memory, `[m, n]`:
    /// `|Θ5 tanh(Θ6 r)| + floor`, divided by its row sum.
    pub fn regime_probs(&self, memory: &Var<'t>) -> Result<Var<'t>> {
        let m = memory.shape()[0];
        let mass = memory
            .matmul(&self.theta6_t)?
            .tanh()
            .matmul(&self.theta5_t)?
            .abs()
            .offset(PROB_FLOOR);
        let total = mass.sum_axis(1)?.reshape(&[m, 1])?;
        Ok(mass.div(&total)?)
    }

    /// `softmax(prior_logits)`.
    pub fn prior_probs(&self) -> Result<Var<'t>> {
        Ok(self.prior_log_probs()?.exp())
    }
}

impl<'t> Switching<'t> for LearnedSwitching<'t> {
    fn n_regimes(&self) -> usize {
        self.shape.n_regimes
    }

    fn prior_log_probs(&self) -> Result<Var<'t>> {
        Ok(self.prior_logits.sub(&self.prior_logits.logsumexp()?)?)
    }

    fn initial_memory(&self, m: usize) -> Result<Var<'t>> {
        Ok(self.tape.constant(Array2::zeros((m, self.shape.memory)).into_dyn())?)
    }

    fn transition_log_probs(&self, memory: &Var<'t>) -> Result<Var<'t>> {
        Ok(self.regime_probs(memory)?.ln())
    }

    /// `σ(Θ1 r) ⊙ σ(Θ2 k') ⊙ r + tanh(Θ3 k') ⊙ σ(Θ4 k')`. Products with a
    /// one-hot `k'` are row selections of the transposed gate matrices.
    fn update(&self, memory: &Var<'t>, k: &[usize]) -> Result<Var<'t>> {
        if memory.shape() != [k.len(), self.shape.memory] {
            return Err(FilterError::Model(format!(
                "memory of shape {:?} for {} regimes",
                memory.shape(),
                k.len()
            )));
        }
        let forget = memory.matmul(&self.theta1_t)?.sigmoid();
        let input = self.theta2_t.gather(k)?.sigmoid();
        let candidate = self.theta3_t.gather(k)?.tanh();
        let write = self.theta4_t.gather(k)?.sigmoid();
        Ok(forget
            .mul(&input)?
            .mul(memory)?
            .add(&candidate.mul(&write)?)?)
    }
}

/// A known switching dynamic. Its memory is a constant sufficient statistic
/// of the regime history.
pub struct TrueSwitching<'t> {
    tape: &'t Tape,
    dynamic: TrueDynamic,
}

impl<'t> TrueSwitching<'t> {
    pub fn new(tape: &'t Tape, dynamic: TrueDynamic) -> Self {
        TrueSwitching { tape, dynamic }
    }
}

impl<'t> Switching<'t> for TrueSwitching<'t> {
    fn n_regimes(&self) -> usize {
        self.dynamic.n_regimes()
    }

    fn prior_log_probs(&self) -> Result<Var<'t>> {
        Ok(self
            .tape
            .vector(self.dynamic.prior().iter().map(|p| p.ln()).collect()))
    }

    fn initial_memory(&self, m: usize) -> Result<Var<'t>> {
        Ok(self
            .tape
            .constant(Array2::zeros((m, self.n_regimes())).into_dyn())?)
    }

    fn transition_log_probs(&self, memory: &Var<'t>) -> Result<Var<'t>> {
        let n = self.n_regimes();
        let mem = memory.data();
        let m = mem.shape()[0];
        let mut out = Array2::<f64>::zeros((m, n));
        match &self.dynamic {
            TrueDynamic::Markov(markov) => {
                let matrix = markov.matrix();
                for (i, row) in mem.outer_iter().enumerate() {
                    let prev = row.iter().position(|&v| v > 0.5).ok_or_else(|| {
                        FilterError::Model("Markov memory holds no previous regime".into())
                    })?;
                    for j in 0..n {
                        out[[i, j]] = matrix[j][prev].ln();
                    }
                }
            }
            TrueDynamic::Polya(_) => {
                for (i, row) in mem.outer_iter().enumerate() {
                    let total: f64 = row.sum();
                    for j in 0..n {
                        out[[i, j]] = ((1.0 + row[j]) / (n as f64 + total)).ln();
                    }
                }
            }
        }
        Ok(self.tape.constant(out.into_dyn())?)
    }

    fn update(&self, memory: &Var<'t>, k: &[usize]) -> Result<Var<'t>> {
        let n = self.n_regimes();
        let hot = one_hot(k, n);
        let next = match &self.dynamic {
            TrueDynamic::Markov(_) => hot,
            TrueDynamic::Polya(_) => memory.data() + &hot,
        };
        Ok(self.tape.constant(next)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient_check, Array};
    use crate::rng::substream;
    use crate::ssm::{MarkovDynamic, PolyaDynamic};
    use ndarray::array;

    fn learned<'t>(tape: &'t Tape, store: &ParameterStore, net: SwitchNet) -> (crate::params::Bound<'t>, SwitchNet) {
        (store.bind(tape).unwrap(), net)
    }

    fn zero_params(net: SwitchNet) -> ParameterStore {
        let mut store = net.init("", &mut substream(0, &[]));
        for p in store.iter_mut() {
            p.value.fill(0.0);
        }
        store
    }

    #[test]
    fn zero_parameters_quarter_the_memory() {
        let net = SwitchNet::new(3);
        let store = zero_params(net);
        let tape = Tape::no_grad();
        let (bound, net) = learned(&tape, &store, net);
        let sw = net.bind(&tape, &bound, "").unwrap();
        let r = tape.constant(array![[0.4, -2.0, 1.0], [0.0, 0.0, 0.0]].into_dyn()).unwrap();
        let next = sw.update(&r, &[1, 2]).unwrap().to_vec();
        assert_eq!(next, vec![0.1, -0.5, 0.25, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let net = SwitchNet::new(8);
        let store = zero_params(net);
        let tape = Tape::no_grad();
        let (bound, net) = learned(&tape, &store, net);
        let sw = net.bind(&tape, &bound, "").unwrap();
        let p = sw.regime_probs(&sw.initial_memory(2).unwrap()).unwrap().to_vec();
        assert!(p.iter().all(|p| (p - 0.125).abs() < 1e-15));
        let prior = sw.prior_probs().unwrap().to_vec();
        assert!(prior.iter().all(|p| (p - 0.125).abs() < 1e-15));
    }

    #[test]
    fn softmax_prior_example() {
        let net = SwitchNet::new(8);
        let mut store = zero_params(net);
        store.get_mut("prior_logits").unwrap()[[0]] = 3f64.ln();
        let tape = Tape::no_grad();
        let (bound, net) = learned(&tape, &store, net);
        let sw = net.bind(&tape, &bound, "").unwrap();
        let p = sw.prior_probs().unwrap().to_vec();
        assert!((p[0] - 0.3).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_proposal_corrections() {
        let tape = Tape::no_grad();
        let layout = Layout::new(2, 3);
        let mut rngs: Vec<_> = (0..2).map(|i| FilterRngs::new(1, &[i])).collect();
        let uniform = tape.vector(vec![(1.0f64 / 8.0).ln(); 8]);
        let (_, c) = propose_regimes(Proposal::Uniform, &uniform, layout, &mut rngs).unwrap();
        assert!(c.unwrap().to_vec().iter().all(|c| c.abs() < 1e-15));
        let (_, none) = propose_regimes(Proposal::Target, &uniform, layout, &mut rngs).unwrap();
        assert!(none.is_none());
        // A regime holding half the mass gets correction log(0.5 * 8).
        let mut half = vec![(0.5f64 / 7.0).ln(); 8];
        half[2] = 0.5f64.ln();
        let rows: Vec<f64> = (0..6).flat_map(|_| half.clone()).collect();
        let lp = tape.constant(Array::from_shape_vec(vec![6, 8], rows).unwrap()).unwrap();
        let (k, c) = propose_regimes(Proposal::Uniform, &lp, layout, &mut rngs).unwrap();
        for (k, c) in k.iter().zip(c.unwrap().to_vec()) {
            let expected = if *k == 2 { 4f64.ln() } else { (0.5f64 / 7.0 * 8.0).ln() };
            assert!((c - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn true_markov_transitions_follow_the_matrix() {
        let tape = Tape::no_grad();
        let sw = TrueSwitching::new(&tape, TrueDynamic::Markov(MarkovDynamic::default()));
        let r = sw.update(&sw.initial_memory(2).unwrap(), &[0, 1]).unwrap();
        let p: Vec<f64> = sw.transition_log_probs(&r).unwrap().to_vec().iter().map(|l| l.exp()).collect();
        let rho = 1.0 / 120.0;
        let expected = [
            [0.8, rho, rho, rho, rho, rho, rho, 0.15],
            [0.15, 0.8, rho, rho, rho, rho, rho, rho],
        ];
        for (row, e) in expected.iter().enumerate() {
            for j in 0..8 {
                assert!((p[row * 8 + j] - e[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn true_polya_transitions_count_history() {
        let tape = Tape::no_grad();
        let sw = TrueSwitching::new(&tape, TrueDynamic::Polya(PolyaDynamic { n_regimes: 8 }));
        let mut r = sw.initial_memory(1).unwrap();
        for k in [0, 0] {
            r = sw.update(&r, &[k]).unwrap();
        }
        let p: Vec<f64> = sw.transition_log_probs(&r).unwrap().to_vec().iter().map(|l| l.exp()).collect();
        assert!((p[0] - 0.3).abs() < 1e-15);
        assert!(p[1..].iter().all(|p| (p - 0.1).abs() < 1e-15));
    }

    fn random_point(net: SwitchNet, seed: u64) -> Vec<Array> {
        let store = net.init("", &mut substream(seed, &[]));
        THETAS.iter().map(|n| store.get(n).unwrap().clone()).collect()
    }

    #[test]
    fn memory_update_gradients() {
        let net = SwitchNet::new(4);
        for seed in 0..3 {
            let mut point = random_point(net, seed);
            let mut rng = substream(seed, &[9]);
            point.push(Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0)).into_dyn());
            let err = gradient_check(
                |tape, p| -> Result<Var<'_>> {
                    let prior = tape.vector(vec![0.0; 4]);
                    let sw = LearnedSwitching::new(tape, net, p[..6].to_vec(), prior)?;
                    Ok(sw.update(&p[6], &[0, 3, 1])?.square().sum())
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn probability_head_gradients() {
        let net = SwitchNet::new(4);
        for seed in 0..10 {
            let point = random_point(net, seed);
            let mut rng = substream(seed, &[7]);
            let r = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0)).into_dyn();
            let j = seed as usize % 4;
            let err = gradient_check(
                |tape, p| -> Result<Var<'_>> {
                    let prior = tape.vector(vec![0.0; 4]);
                    let sw = LearnedSwitching::new(tape, net, p.to_vec(), prior)?;
                    let lp = sw.transition_log_probs(&tape.constant(r.clone())?)?;
                    Ok(lp.reshape(&[8])?.gather(&[j, 4 + j])?.sum())
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }
}
