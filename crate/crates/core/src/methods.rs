//! The compared methods by name.

use std::fmt;
use std::str::FromStr;

use crate::baselines::{FixedRegimeLearner, LstmLearner, OracleFilter};
use crate::ssm::{RegimeBank, TrueDynamic};
use crate::training::{Estimator, Learner, LossMode, RegimeLearner, SwitchingKind};

/// Hidden width of the learned regime networks.
pub const REGIME_HIDDEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    RlpfLambda,
    RlpfMse,
    Dbpf,
    Madpf,
    RsdbpfLambda,
    RsdbpfMse,
    Rspf,
    Lstm,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Rspf,
        Method::RsdbpfLambda,
        Method::RsdbpfMse,
        Method::RlpfLambda,
        Method::RlpfMse,
        Method::Madpf,
        Method::Dbpf,
        Method::Lstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::RlpfLambda => "rlpf-lambda",
            Method::RlpfMse => "rlpf-mse",
            Method::Dbpf => "dbpf",
            Method::Madpf => "madpf",
            Method::RsdbpfLambda => "rsdbpf-lambda",
            Method::RsdbpfMse => "rsdbpf-mse",
            Method::Rspf => "rspf",
            Method::Lstm => "lstm",
        }
    }

    /// Builds the method for a system with the given bank and switching
    /// dynamic. Only the oracle methods look at them.
    pub fn build(self, bank: &RegimeBank, dynamic: &TrueDynamic) -> Built {
        let k = bank.n_regimes();
        let regime = |switching, loss| {
            Built::Learner(Box::new(RegimeLearner {
                n_regimes: k,
                hidden: REGIME_HIDDEN,
                switching,
                loss,
            }))
        };
        match self {
            Method::RlpfLambda => regime(SwitchingKind::Learned, LossMode::Combined),
            Method::RlpfMse => regime(SwitchingKind::Learned, LossMode::MseOnly),
            Method::RsdbpfLambda => regime(SwitchingKind::Known(dynamic.clone()), LossMode::Combined),
            Method::RsdbpfMse => regime(SwitchingKind::Known(dynamic.clone()), LossMode::MseOnly),
            Method::Dbpf => Built::Learner(Box::new(FixedRegimeLearner::single(REGIME_HIDDEN))),
            Method::Madpf => Built::Learner(Box::new(FixedRegimeLearner::multiple(k, REGIME_HIDDEN))),
            Method::Lstm => Built::Learner(Box::new(LstmLearner::default())),
            Method::Rspf => Built::Oracle(OracleFilter {
                bank: bank.clone(),
                dynamic: dynamic.clone(),
            }),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown method `{0}`; expected one of rlpf-lambda, rlpf-mse, dbpf, madpf, rsdbpf-lambda, rsdbpf-mse, rspf, lstm")]
pub struct UnknownMethod(pub String);

impl FromStr for Method {
    type Err = UnknownMethod;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| UnknownMethod(s.to_string()))
    }
}

pub enum Built {
    Learner(Box<dyn Learner>),
    /// Nothing to train.
    Oracle(OracleFilter),
}

impl Built {
    pub fn estimator(&self) -> &dyn Estimator {
        match self {
            Built::Learner(l) => l.as_ref(),
            Built::Oracle(o) => o,
        }
    }

    pub fn learner(&self) -> Option<&dyn Learner> {
        match self {
            Built::Learner(l) => Some(l.as_ref()),
            Built::Oracle(_) => None,
        }
    }
}
