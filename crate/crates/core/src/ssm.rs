//! Regime-switching scalar state-space models and their simulator.
//!
//! Regimes are 0-based everywhere inside the crate. The 1-based labels used
//! in configuration files and dataset files only appear through
//! [`Regime::from_label`] and [`Regime::label`].

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng::{purpose, substream, Rng};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SsmError {
    #[error("regime label {label} outside 1..={n_regimes}")]
    InvalidLabel { label: usize, n_regimes: usize },
    #[error("regime index {index} outside 0..{n_regimes}")]
    InvalidRegime { index: usize, n_regimes: usize },
    #[error("invalid transition matrix: {0}")]
    InvalidMatrix(String),
    #[error("invalid regime bank: {0}")]
    InvalidBank(String),
}

pub type Result<T> = std::result::Result<T, SsmError>;

/// A regime, stored 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Regime(usize);

impl Regime {
    pub fn from_label(label: usize, n_regimes: usize) -> Result<Self> {
        if label == 0 || label > n_regimes {
            return Err(SsmError::InvalidLabel { label, n_regimes });
        }
        Ok(Regime(label - 1))
    }

    pub fn from_index(index: usize, n_regimes: usize) -> Result<Self> {
        if index >= n_regimes {
            return Err(SsmError::InvalidRegime { index, n_regimes });
        }
        Ok(Regime(index))
    }

    pub fn index(self) -> usize {
        self.0
    }

    /// 1-based label.
    pub fn label(self) -> usize {
        self.0 + 1
    }
}

/// Per-regime coefficients of the affine dynamic and square-root observation
/// models, with one shared noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeBank {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma2: f64,
}

impl Default for RegimeBank {
    fn default() -> Self {
        RegimeBank {
            a: vec![-0.1, -0.3, -0.5, -0.9, 0.1, 0.3, 0.5, 0.9],
            b: vec![0.0, -2.0, 2.0, -4.0, 0.0, 2.0, -2.0, 4.0],
            sigma2: 0.1,
        }
    }
}

impl RegimeBank {
    pub fn new(a: Vec<f64>, b: Vec<f64>, sigma2: f64) -> Result<Self> {
        if a.len() != b.len() || a.is_empty() {
            return Err(SsmError::InvalidBank(format!(
                "coefficient lengths {} and {}",
                a.len(),
                b.len()
            )));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(SsmError::InvalidBank(format!("variance {sigma2}")));
        }
        Ok(RegimeBank { a, b, sigma2 })
    }

    /// The bank restricted to the given regimes, in order.
    pub fn subset(&self, regimes: &[usize]) -> Result<Self> {
        let n = self.n_regimes();
        if let Some(&bad) = regimes.iter().find(|&&k| k >= n) {
            return Err(SsmError::InvalidRegime { index: bad, n_regimes: n });
        }
        RegimeBank::new(
            regimes.iter().map(|&k| self.a[k]).collect(),
            regimes.iter().map(|&k| self.b[k]).collect(),
            self.sigma2,
        )
    }

    pub fn n_regimes(&self) -> usize {
        self.a.len()
    }

    fn check(&self, k: Regime) -> Result<usize> {
        Regime::from_index(k.index(), self.n_regimes()).map(Regime::index)
    }

    /// `a_k x_prev + b_k`.
    pub fn dynamic_mean(&self, x_prev: f64, k: Regime) -> Result<f64> {
        let k = self.check(k)?;
        Ok(self.a[k] * x_prev + self.b[k])
    }

    /// `a_k sqrt(|x|) + b_k`.
    pub fn observation_mean(&self, x: f64, k: Regime) -> Result<f64> {
        let k = self.check(k)?;
        Ok(self.a[k] * x.abs().sqrt() + self.b[k])
    }
}

/// Column-stochastic regime transition matrix: `matrix[i][j] = P(k_t = i | k_{t-1} = j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovDynamic {
    matrix: Vec<Vec<f64>>,
}

impl Default for MarkovDynamic {
    fn default() -> Self {
        Self::cyclic(8, 0.8, 0.15)
    }
}

impl MarkovDynamic {
    pub fn new(matrix: Vec<Vec<f64>>) -> Result<Self> {
        let n = matrix.len();
        if n == 0 || matrix.iter().any(|row| row.len() != n) {
            return Err(SsmError::InvalidMatrix("matrix must be square".into()));
        }
        for j in 0..n {
            let mut total = 0.0;
            for row in &matrix {
                let p = row[j];
                if !(p >= 0.0 && p.is_finite()) {
                    return Err(SsmError::InvalidMatrix(format!("entry {p} in column {j}")));
                }
                total += p;
            }
            if (total - 1.0).abs() > 1e-12 {
                return Err(SsmError::InvalidMatrix(format!(
                    "column {j} sums to {total}"
                )));
            }
        }
        Ok(MarkovDynamic { matrix })
    }

    /// Stay with probability `stay`, move to the previous regime index
    /// (cyclically) with probability `step`, and spread the rest uniformly.
    pub fn cyclic(n: usize, stay: f64, step: f64) -> Self {
        let mut m = vec![vec![0.0; n]; n];
        match n {
            0 => {}
            1 => m[0][0] = 1.0,
            2 => {
                m[0][0] = stay;
                m[1][1] = stay;
                m[0][1] = 1.0 - stay;
                m[1][0] = 1.0 - stay;
            }
            _ => {
                let rho = (1.0 - stay - step) / (n - 2) as f64;
                for (i, row) in m.iter_mut().enumerate() {
                    for (j, p) in row.iter_mut().enumerate() {
                        *p = if i == j {
                            stay
                        } else if (i + 1) % n == j {
                            step
                        } else {
                            rho
                        };
                    }
                }
            }
        }
        MarkovDynamic { matrix: m }
    }

    pub fn n_regimes(&self) -> usize {
        self.matrix.len()
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.matrix
    }

    /// Distribution of the next regime given the previous one (column `k_prev`).
    pub fn probs(&self, k_prev: Regime) -> Result<Vec<f64>> {
        let j = Regime::from_index(k_prev.index(), self.n_regimes())?.index();
        Ok(self.matrix.iter().map(|row| row[j]).collect())
    }
}

/// Pólya urn over regimes, starting with one ball per regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolyaDynamic {
    pub n_regimes: usize,
}

impl Default for PolyaDynamic {
    fn default() -> Self {
        PolyaDynamic { n_regimes: 8 }
    }
}

impl PolyaDynamic {
    /// `p[c] = (1 + #{s : k_s = c}) / (n + len(history))`, counting the
    /// history `k_{0:t-1}` only.
    pub fn probs(&self, history: &[usize]) -> Vec<f64> {
        let mut counts = vec![1.0; self.n_regimes];
        for &k in history {
            if let Some(c) = counts.get_mut(k) {
                *c += 1.0;
            }
        }
        let total = self.n_regimes as f64 + history.len() as f64;
        counts.into_iter().map(|c| c / total).collect()
    }
}

/// One of the two ground-truth switching dynamics.
#[derive(Debug, Clone, PartialEq)]
pub enum TrueDynamic {
    Markov(MarkovDynamic),
    Polya(PolyaDynamic),
}

impl TrueDynamic {
    pub fn n_regimes(&self) -> usize {
        match self {
            TrueDynamic::Markov(m) => m.n_regimes(),
            TrueDynamic::Polya(p) => p.n_regimes,
        }
    }

    /// Uniform initial regime distribution.
    pub fn prior(&self) -> Vec<f64> {
        let n = self.n_regimes();
        vec![1.0 / n as f64; n]
    }

    /// Distribution of `k_t` given `k_{0:t-1}`; the prior when the history is empty.
    pub fn probs(&self, history: &[usize]) -> Result<Vec<f64>> {
        match (self, history.last()) {
            (_, None) => Ok(self.prior()),
            (TrueDynamic::Markov(m), Some(&k)) => m.probs(Regime::from_index(k, m.n_regimes())?),
            (TrueDynamic::Polya(p), Some(_)) => Ok(p.probs(history)),
        }
    }
}

/// Ground-truth record of one simulated run. `k` holds 0-based regimes.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub k: Vec<usize>,
}

impl Trajectory {
    /// Final time index `T` (the sequences hold `T + 1` steps).
    pub fn final_time(&self) -> usize {
        self.x.len().saturating_sub(1)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn normal(mean: f64, var: f64, rng: &mut Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    mean + var.sqrt() * z
}

/// Draws `x_t ~ N(a_k x_prev + b_k, sigma2)`.
pub fn sample_dynamic(x_prev: f64, k: Regime, bank: &RegimeBank, rng: &mut Rng) -> Result<f64> {
    Ok(normal(bank.dynamic_mean(x_prev, k)?, bank.sigma2, rng))
}

/// Draws `y_t ~ N(a_k sqrt|x| + b_k, sigma2)`.
pub fn sample_observation(x: f64, k: Regime, bank: &RegimeBank, rng: &mut Rng) -> Result<f64> {
    Ok(normal(bank.observation_mean(x, k)?, bank.sigma2, rng))
}

/// Simulates `t_final + 1` steps: `k_0` from the prior, `x_0 ~ U(-0.5, 0.5)`,
/// then regimes from the switching dynamic and states/observations from the bank.
pub fn simulate(
    dynamic: &TrueDynamic,
    bank: &RegimeBank,
    t_final: usize,
    rng: &mut Rng,
) -> Result<Trajectory> {
    if dynamic.n_regimes() != bank.n_regimes() {
        return Err(SsmError::InvalidBank(format!(
            "dynamic has {} regimes, bank has {}",
            dynamic.n_regimes(),
            bank.n_regimes()
        )));
    }
    let n = bank.n_regimes();
    let steps = t_final + 1;
    let mut traj = Trajectory {
        x: Vec::with_capacity(steps),
        y: Vec::with_capacity(steps),
        k: Vec::with_capacity(steps),
    };
    for t in 0..steps {
        let k = sample_categorical(&dynamic.probs(&traj.k)?, rng);
        let regime = Regime::from_index(k, n)?;
        let x = if t == 0 {
            rng.random_range(-0.5..0.5)
        } else {
            sample_dynamic(traj.x[t - 1], regime, bank, rng)?
        };
        let y = sample_observation(x, regime, bank, rng)?;
        traj.k.push(k);
        traj.x.push(x);
        traj.y.push(y);
    }
    Ok(traj)
}

/// Train / validation / test trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Trajectory>,
    pub validation: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

/// Split sizes in the 50/25/25 proportion, remainder to training.
pub fn split_sizes(n_traj: usize) -> (usize, usize, usize) {
    let quarter = n_traj / 4;
    (n_traj - 2 * quarter, quarter, quarter)
}

/// Simulates `n_traj` independent trajectories, trajectory `i` from its own
/// substream of `seed`, and splits them in order into train/validation/test.
pub fn generate_dataset(
    dynamic: &TrueDynamic,
    bank: &RegimeBank,
    n_traj: usize,
    t_final: usize,
    seed: u64,
) -> Result<Dataset> {
    let all = (0..n_traj)
        .map(|i| {
            let mut rng = substream(seed, &[purpose::DATASET, i as u64]);
            simulate(dynamic, bank, t_final, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let (n_train, n_val, _) = split_sizes(n_traj);
    let mut it = all.into_iter();
    let train = it.by_ref().take(n_train).collect();
    let validation = it.by_ref().take(n_val).collect();
    let test = it.collect();
    Ok(Dataset {
        train,
        validation,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn r(label: usize) -> Regime {
        Regime::from_label(label, 8).unwrap()
    }

    #[test]
    fn dynamic_mean_examples() {
        let bank = RegimeBank::default();
        assert_abs_diff_eq!(bank.dynamic_mean(1.0, r(4)).unwrap(), -4.9, epsilon = 1e-12);
        assert_eq!(bank.dynamic_mean(0.0, r(1)).unwrap(), 0.0);
        assert_abs_diff_eq!(bank.dynamic_mean(2.0, r(8)).unwrap(), 5.8, epsilon = 1e-12);
    }

    #[test]
    fn observation_mean_examples() {
        let bank = RegimeBank::default();
        assert_abs_diff_eq!(bank.observation_mean(4.0, r(8)).unwrap(), 5.8, epsilon = 1e-12);
        assert_eq!(bank.observation_mean(0.0, r(5)).unwrap(), 0.0);
        assert_abs_diff_eq!(bank.observation_mean(-4.0, r(8)).unwrap(), 5.8, epsilon = 1e-12);
    }

    #[test]
    fn invalid_regimes_are_errors() {
        let bank = RegimeBank::default();
        assert!(Regime::from_label(0, 8).is_err());
        assert!(Regime::from_label(9, 8).is_err());
        let small = RegimeBank::new(vec![1.0], vec![0.0], 0.1).unwrap();
        assert!(small.dynamic_mean(0.0, r(2)).is_err());
        assert!(small.observation_mean(0.0, r(2)).is_err());
        assert!(MarkovDynamic::default().probs(Regime(8)).is_err());
        assert!(bank.dynamic_mean(0.0, Regime(8)).is_err());
    }

    #[test]
    fn markov_columns_match_the_banded_matrix() {
        let m = MarkovDynamic::default();
        let rho = 1.0 / 120.0;
        let c1 = m.probs(r(1)).unwrap();
        let want1 = [0.8, rho, rho, rho, rho, rho, rho, 0.15];
        let c2 = m.probs(r(2)).unwrap();
        let want2 = [0.15, 0.8, rho, rho, rho, rho, rho, rho];
        for i in 0..8 {
            assert_abs_diff_eq!(c1[i], want1[i], epsilon = 1e-15);
            assert_abs_diff_eq!(c2[i], want2[i], epsilon = 1e-15);
        }
        for j in 0..8 {
            let col: f64 = m.probs(Regime(j)).unwrap().iter().sum();
            let row: f64 = m.matrix()[j].iter().sum();
            assert!((col - 1.0).abs() < 1e-12);
            assert!((row - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn markov_rejects_bad_columns() {
        assert!(MarkovDynamic::new(vec![vec![0.5, 0.5], vec![0.6, 0.5]]).is_err());
        assert!(MarkovDynamic::new(vec![vec![1.0]]).is_ok());
    }

    #[test]
    fn polya_examples() {
        let p = PolyaDynamic::default();
        assert!(p.probs(&[]).iter().all(|&v| v == 1.0 / 8.0));
        let h = p.probs(&[2]);
        assert_abs_diff_eq!(h[2], 2.0 / 9.0, epsilon = 1e-15);
        assert!(h.iter().enumerate().all(|(i, &v)| i == 2 || (v - 1.0 / 9.0).abs() < 1e-15));
        let h = p.probs(&[0, 0]);
        assert_abs_diff_eq!(h[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(h[5], 0.1, epsilon = 1e-15);
    }

    #[test]
    fn simulate_zero_length_and_determinism() {
        let dynamic = TrueDynamic::Markov(MarkovDynamic::default());
        let bank = RegimeBank::default();
        let t = simulate(&dynamic, &bank, 0, &mut substream(1, &[])).unwrap();
        assert_eq!(t.len(), 1);
        assert!((-0.5..=0.5).contains(&t.x[0]));
        let a = simulate(&dynamic, &bank, 20, &mut substream(5, &[])).unwrap();
        let b = simulate(&dynamic, &bank, 20, &mut substream(5, &[])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.final_time(), 20);
        assert!(a.k.iter().all(|&k| k < 8));
    }

    #[test]
    fn split_proportions() {
        assert_eq!(split_sizes(2000), (1000, 500, 500));
        assert_eq!(split_sizes(4), (2, 1, 1));
        assert_eq!(split_sizes(7), (5, 1, 1));
    }
}
