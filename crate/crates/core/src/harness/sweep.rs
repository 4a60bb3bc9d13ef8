//! One-parameter sweeps sharing a base seed and dataset.

use std::fmt;
use std::str::FromStr;

use super::config::RunConfig;
use super::eval::{evaluate_on, Report};
use super::model::Experiment;
use super::train::train_on;
use crate::error::{ConfigError, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    T,
    TopK,
    Gamma,
    Lr,
    Epochs,
    Lambda1,
    Lambda2,
}

impl SweepParam {
    pub const ALL: [SweepParam; 7] = [
        SweepParam::T,
        SweepParam::TopK,
        SweepParam::Gamma,
        SweepParam::Lr,
        SweepParam::Epochs,
        SweepParam::Lambda1,
        SweepParam::Lambda2,
    ];

    /// The config key the parameter sets.
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::T => "T",
            SweepParam::TopK => "top_k",
            SweepParam::Gamma => "gamma",
            SweepParam::Lr => "lr",
            SweepParam::Epochs => "epochs",
            SweepParam::Lambda1 => "lambda1",
            SweepParam::Lambda2 => "lambda2",
        }
    }

    /// Parameters that only affect scoring, so one trained model serves every value.
    pub fn scoring_only(self) -> bool {
        matches!(self, SweepParam::TopK | SweepParam::Gamma)
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.key() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("cannot sweep `{s}`; expected one of T, top_k, gamma, lr, epochs, lambda1, lambda2")))
    }
}

pub struct SweepOutcome {
    pub report: Report,
    /// Number of training runs performed.
    pub trainings: usize,
}

/// Trains and evaluates once per value (once in total for scoring-only
/// parameters). Run names are `{key}={value}/shot{k}`.
pub fn sweep(param: SweepParam, values: &[String], base: &RunConfig) -> Result<SweepOutcome> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            c.set(param.key(), v)?;
            c.validate()?;
            Ok::<_, ConfigError>(c)
        })
        .collect::<Result<Vec<_>, _>>()?;
    base.validate()?;
    let exp = Experiment::prepare(base)?;
    let mut report = Report::default();
    let mut trainings = 0;
    let shared = if param.scoring_only() {
        trainings += 1;
        Some(train_on(&exp, base)?.0)
    } else {
        None
    };
    for (value, cfg) in values.iter().zip(&configs) {
        let params = match &shared {
            Some(ckpt) => ckpt.params.clone(),
            None => {
                trainings += 1;
                train_on(&exp, cfg)?.0.params
            }
        };
        report.extend(evaluate_on(&exp, &params, cfg, &format!("{}={value}/", param.key()))?);
    }
    Ok(SweepOutcome { report, trainings })
}
