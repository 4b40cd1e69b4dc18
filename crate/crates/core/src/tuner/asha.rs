use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AshaConfig {
    /// Reduction factor.
    pub eta: usize,
    /// Epochs before the first judgment.
    pub grace: usize,
    /// Maximum epochs per trial.
    pub max_budget: usize,
}

impl Default for AshaConfig {
    fn default() -> Self {
        Self {
            eta: 2,
            grace: 2,
            max_budget: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Continue,
    Stop,
}

/// Rung levels `grace * eta^j` below the maximum budget, with the scores
/// recorded at each rung in arrival order.
#[derive(Debug, Clone, PartialEq)]
pub struct RungLadder {
    config: AshaConfig,
    levels: Vec<usize>,
    recorded: Vec<Vec<(usize, f64)>>,
}

impl RungLadder {
    pub fn new(config: AshaConfig) -> Result<Self> {
        if config.eta < 2 {
            return Err(Error::Config("eta must be at least 2".into()));
        }
        if config.grace == 0 {
            return Err(Error::Config(
                "grace period must be at least 1 epoch".into(),
            ));
        }
        if config.max_budget == 0 {
            return Err(Error::Sweep("budget of 0 epochs".into()));
        }
        let mut levels = Vec::new();
        let mut r = config.grace;
        while r < config.max_budget {
            levels.push(r);
            r *= config.eta;
        }
        Ok(Self {
            config,
            recorded: vec![Vec::new(); levels.len()],
            levels,
        })
    }

    pub fn config(&self) -> AshaConfig {
        self.config
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn rung_of(&self, epoch: usize) -> Option<usize> {
        self.levels.iter().position(|&l| l == epoch)
    }

    pub fn recorded(&self, rung: usize) -> &[(usize, f64)] {
        &self.recorded[rung]
    }

    /// Asynchronous top-`1/eta` rule. At a rung epoch the score is recorded;
    /// the trial continues iff fewer than `ceil(n / eta)` recorded scores
    /// (including its own, `n` in total) are strictly greater. Other epochs
    /// continue unless the budget is spent.
    pub fn report(&mut self, trial: usize, epoch: usize, score: f64) -> Result<Decision> {
        if score.is_nan() {
            return Err(Error::Protocol(format!(
                "trial {trial} reported NaN at epoch {epoch}"
            )));
        }
        if epoch >= self.config.max_budget {
            return Ok(Decision::Stop);
        }
        let Some(rung) = self.rung_of(epoch) else {
            return Ok(Decision::Continue);
        };
        let scores = &mut self.recorded[rung];
        if scores.iter().any(|&(t, _)| t == trial) {
            return Err(Error::Protocol(format!(
                "trial {trial} already reported at rung {rung} (epoch {epoch})"
            )));
        }
        scores.push((trial, score));
        let n = scores.len();
        let keep = n.div_ceil(self.config.eta);
        let better = scores.iter().filter(|&&(_, s)| s > score).count();
        Ok(if better < keep {
            Decision::Continue
        } else {
            Decision::Stop
        })
    }
}
