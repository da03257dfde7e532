//! Per-regime dynamic and observation models: the true affine / square-root
//! family, and learned one-hidden-layer tanh networks with bounded variances.

use ndarray::{Array1, Array2};
use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::filter::{gaussian_logpdf, FilterError, Result};
use crate::params::{Bound, ParameterStore};
use crate::rng::Rng;
use crate::ssm::RegimeBank;

/// Learned variances lie in `[VARIANCE_EPS, 1 - VARIANCE_EPS]`.
pub const VARIANCE_EPS: f64 = 1e-6;

/// Maps an unconstrained parameter into `(0, 1)`; `0` maps to `0.5`.
pub fn variance_from_raw(raw: f64) -> f64 {
    VARIANCE_EPS + (1.0 - 2.0 * VARIANCE_EPS) * crate::autodiff::sigmoid(raw)
}

pub fn constrained_variance<'t>(raw: &Var<'t>) -> Var<'t> {
    raw.sigmoid()
        .scale(1.0 - 2.0 * VARIANCE_EPS)
        .offset(VARIANCE_EPS)
}

/// Gaussian dynamic and observation models indexed by regime, evaluated for
/// many particles at once. `k` holds one regime index per particle.
pub trait RegimeModels<'t> {
    fn n_regimes(&self) -> usize;
    fn dynamic_mean(&self, x_prev: &Var<'t>, k: &[usize]) -> Result<Var<'t>>;
    fn dynamic_var(&self, k: &[usize]) -> Result<Var<'t>>;
    fn observation_mean(&self, x: &Var<'t>, k: &[usize]) -> Result<Var<'t>>;
    fn observation_var(&self, k: &[usize]) -> Result<Var<'t>>;

    /// `x_t = mean + sqrt(var) * noise`, differentiable in the mean and variance.
    fn dynamic_sample(&self, x_prev: &Var<'t>, k: &[usize], noise: &Var<'t>) -> Result<Var<'t>> {
        let mean = self.dynamic_mean(x_prev, k)?;
        let std = self.dynamic_var(k)?.sqrt();
        Ok(mean.add(&std.mul(noise)?)?)
    }

    fn dynamic_logpdf(&self, x: &Var<'t>, x_prev: &Var<'t>, k: &[usize]) -> Result<Var<'t>> {
        gaussian_logpdf(x, &self.dynamic_mean(x_prev, k)?, &self.dynamic_var(k)?)
    }

    fn observation_logpdf(&self, y: &Var<'t>, x: &Var<'t>, k: &[usize]) -> Result<Var<'t>> {
        gaussian_logpdf(y, &self.observation_mean(x, k)?, &self.observation_var(k)?)
    }
}

fn check_regimes(k: &[usize], n: usize) -> Result<()> {
    match k.iter().find(|&&k| k >= n) {
        Some(bad) => Err(FilterError::Model(format!(
            "regime index {bad} out of range for {n} regimes"
        ))),
        None => Ok(()),
    }
}

/// The ground-truth bank as differentiable expressions in the location.
pub struct TrueModels<'t> {
    tape: &'t Tape,
    bank: RegimeBank,
}

impl<'t> TrueModels<'t> {
    pub fn new(tape: &'t Tape, bank: RegimeBank) -> Self {
        TrueModels { tape, bank }
    }

    fn coefficients(&self, k: &[usize]) -> Result<(Var<'t>, Var<'t>)> {
        check_regimes(k, self.bank.n_regimes())?;
        let a = k.iter().map(|&k| self.bank.a[k]).collect();
        let b = k.iter().map(|&k| self.bank.b[k]).collect();
        Ok((self.tape.vector(a), self.tape.vector(b)))
    }
}

impl<'t> RegimeModels<'t> for TrueModels<'t> {
    fn n_regimes(&self) -> usize {
        self.bank.n_regimes()
    }

    fn dynamic_mean(&self, x_prev: &Var<'t>, k: &[usize]) -> Result<Var<'t>> {
        let (a, b) = self.coefficients(k)?;
        Ok(x_prev.mul(&a)?.add(&b)?)
    }

    fn dynamic_var(&self, k: &[usize]) -> Result<Var<'t>> {
        check_regimes(k, self.bank.n_regimes())?;
        Ok(self.tape.vector(vec![self.bank.sigma2; k.len()]))
    }

    fn observation_mean(&self, x: &Var<'t>, k: &[usize]) -> Result<Var<'t>> {
        let (a, b) = self.coefficients(k)?;
        Ok(x.abs().sqrt().mul(&a)?.add(&b)?)
    }

    fn observation_var(&self, k: &[usize]) -> Result<Var<'t>> {
        self.dynamic_var(k)
    }
}

/// Shape of a bank of per-regime mean networks `1 -> hidden -> 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegimeNetBank {
    pub n_regimes: usize,
    pub hidden: usize,
}

const NETS: [&str; 2] = ["dyn", "obs"];

impl RegimeNetBank {
    pub fn new(n_regimes: usize, hidden: usize) -> Self {
        RegimeNetBank { n_regimes, hidden }
    }

    /// Fresh parameters: weights uniform in `±1/sqrt(fan_in)`, variances 0.5.
    /// Each network's weights are stacked over regimes, one row per regime.
    pub fn init(&self, prefix: &str, rng: &mut Rng) -> ParameterStore {
        let (k, h) = (self.n_regimes, self.hidden);
        let mut store = ParameterStore::new();
        let mut uniform2 = |rows: usize, cols: usize, bound: f64| {
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound)).into_dyn()
        };
        let mut arrays = Vec::new();
        for net in NETS {
            let w1 = uniform2(k, h, 1.0);
            let b1 = uniform2(k, h, 1.0);
            let w2 = uniform2(k, h, 1.0 / (h as f64).sqrt());
            let b2 = uniform2(k, 1, 1.0 / (h as f64).sqrt())
                .into_shape_with_order(ndarray::IxDyn(&[k]))
                .expect("k elements");
            arrays.push((format!("{prefix}{net}.w1"), w1, true));
            arrays.push((format!("{prefix}{net}.b1"), b1, true));
            arrays.push((format!("{prefix}{net}.w2"), w2, true));
            arrays.push((format!("{prefix}{net}.b2"), b2, true));
            arrays.push((format!("{prefix}{net}.var"), Array1::zeros(k).into_dyn(), false));
        }
        for (name, value, decay) in arrays {
            store
                .insert(&name, value, decay)
                .expect("names are distinct");
        }
        store
    }

    pub fn bind<'t>(&self, tape: &'t Tape, bound: &Bound<'t>, prefix: &str) -> Result<BoundNetBank<'t>> {
        let net = |name: &str| -> Result<MeanNet<'t>> {
            let get = |p: &str| -> Result<Var<'t>> { Ok(bound.get(&format!("{prefix}{name}.{p}"))?.clone()) };
            Ok(MeanNet {
                w1: get("w1")?,
                b1: get("b1")?,
                w2: get("w2")?,
                b2: get("b2")?,
                var_raw: get("var")?,
            })
        };
        let dynamic = net(NETS[0])?;
        let observation = net(NETS[1])?;
        if dynamic.w1.shape() != [self.n_regimes, self.hidden] {
            return Err(FilterError::Model(format!(
                "network weights have shape {:?}, expected [{}, {}]",
                dynamic.w1.shape(),
                self.n_regimes,
                self.hidden
            )));
        }
        Ok(BoundNetBank {
            tape,
            n_regimes: self.n_regimes,
            dynamic,
            observation,
        })
    }
}

/// Stacked parameters of one network per regime.
#[derive(Clone)]
pub struct MeanNet<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
    pub var_raw: Var<'t>,
}

impl<'t> MeanNet<'t> {
    /// `w2_k . tanh(w1_k x + b1_k) + b2_k` for each particle's regime.
    pub fn forward(&self, x: &Var<'t>, k: &[usize]) -> Result<Var<'t>> {
        let m = k.len();
        let hidden = x
            .reshape(&[m, 1])?
            .mul(&self.w1.gather(k)?)?
            .add(&self.b1.gather(k)?)?
            .tanh();
        Ok(hidden
            .mul(&self.w2.gather(k)?)?
            .sum_axis(1)?
            .add(&self.b2.gather(k)?)?)
    }

    pub fn variance(&self, k: &[usize]) -> Result<Var<'t>> {
        Ok(constrained_variance(&self.var_raw.gather(k)?))
    }
}

/// A [`RegimeNetBank`] whose parameters live on a tape.
pub struct BoundNetBank<'t> {
    pub tape: &'t Tape,
    pub n_regimes: usize,
    pub dynamic: MeanNet<'t>,
    pub observation: MeanNet<'t>,
}

impl<'t> RegimeModels<'t> for BoundNetBank<'t> {
    fn n_regimes(&self) -> usize {
        self.n_regimes
    }

    fn dynamic_mean(&self, x_prev: &Var<'t>, k: &[usize]) -> Result<Var<'t>> {
        check_regimes(k, self.n_regimes)?;
        self.dynamic.forward(x_prev, k)
    }

    fn dynamic_var(&self, k: &[usize]) -> Result<Var<'t>> {
        check_regimes(k, self.n_regimes)?;
        self.dynamic.variance(k)
    }

    fn observation_mean(&self, x: &Var<'t>, k: &[usize]) -> Result<Var<'t>> {
        check_regimes(k, self.n_regimes)?;
        self.observation.forward(x, k)
    }

    fn observation_var(&self, k: &[usize]) -> Result<Var<'t>> {
        check_regimes(k, self.n_regimes)?;
        self.observation.variance(k)
    }
}
