use std::collections::HashSet;
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use super::asha::{AshaConfig, Decision, RungLadder};
use super::space::DesignChoice;
use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::trainer::{
    train_trial, Control, EnvironmentProfile, TrainConfig, TrainData, TrialResult, TrialStatus,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub id: usize,
    pub choice: DesignChoice,
    pub seed: u64,
}

/// What a trial worker hands back when it finishes.
#[derive(Debug, Clone)]
pub struct TrialOutcome<O> {
    pub status: TrialStatus,
    pub diagnostic: Option<String>,
    pub output: Option<O>,
}

/// Runs one trial, calling `report(epoch, score)` after every epoch and
/// stopping as soon as it answers [`Decision::Stop`].
pub trait TrialExecutor: Sync {
    type Output: Send;

    fn run(
        &self,
        spec: &TrialSpec,
        budget: usize,
        report: &mut dyn FnMut(usize, f64) -> Decision,
    ) -> Result<TrialOutcome<Self::Output>>;
}

/// One scheduler decision, in the order it was made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub order: usize,
    pub trial: usize,
    pub epoch: usize,
    pub score: f64,
    pub rung: Option<usize>,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub trial: usize,
    pub label: String,
    pub choice: DesignChoice,
    pub seed: u64,
    pub status: TrialStatus,
    pub diagnostic: Option<String>,
    pub epochs: usize,
    #[serde(with = "crate::serde_helpers::score")]
    pub best_score: f64,
    pub best_epoch: usize,
    /// Validation score after each epoch.
    pub scores: Vec<f64>,
}

#[derive(Debug)]
pub struct SweepOutcome<O> {
    pub best: usize,
    pub leaderboard: Vec<LeaderboardEntry>,
    pub replay: Vec<ReplayEntry>,
    pub outputs: Vec<Option<O>>,
}

impl<O> SweepOutcome<O> {
    pub fn best_entry(&self) -> &LeaderboardEntry {
        &self.leaderboard[self.best]
    }

    /// Entries sorted by best score, descending (ties by trial id).
    pub fn ranked(&self) -> Vec<&LeaderboardEntry> {
        let mut v: Vec<&LeaderboardEntry> = self.leaderboard.iter().collect();
        v.sort_by(|a, b| {
            b.best_score
                .total_cmp(&a.best_score)
                .then(a.trial.cmp(&b.trial))
        });
        v
    }

    /// Fixed-width leaderboard table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>5}  {:>8}  {:>6}  {:<13}  {}\n",
            "trial", "score", "epochs", "status", "config"
        );
        for e in self.ranked() {
            s.push_str(&format!(
                "{:>5}  {:>8.4}  {:>6}  {:<13}  {}\n",
                e.trial,
                e.best_score,
                e.epochs,
                format!("{:?}", e.status).to_lowercase(),
                e.label
            ));
        }
        s
    }
}

enum Message<O> {
    Report {
        worker: usize,
        trial: usize,
        epoch: usize,
        score: f64,
    },
    Done {
        worker: usize,
        trial: usize,
        result: Result<TrialOutcome<O>>,
    },
}

/// Trial specs with seeds derived from the sweep seed.
pub fn trial_specs(choices: Vec<DesignChoice>, seed: u64) -> Vec<TrialSpec> {
    let root = SplitRng::new(seed).fork("trials");
    choices
        .into_iter()
        .enumerate()
        .map(|(id, choice)| TrialSpec {
            id,
            choice,
            seed: root.split(id as u64).next_u64(),
        })
        .collect()
}

/// Runs every trial under ASHA with up to `parallelism` worker threads.
/// The calling thread is the only decision-maker; workers talk to it over
/// channels. With `parallelism == 1` the outcome is a pure function of the
/// inputs.
pub fn run_sweep<E: TrialExecutor>(
    executor: &E,
    trials: &[TrialSpec],
    asha: AshaConfig,
    parallelism: usize,
) -> Result<SweepOutcome<E::Output>> {
    if parallelism == 0 {
        return Err(Error::Config("parallelism must be at least 1".into()));
    }
    if trials.is_empty() {
        return Err(Error::Sweep("no trials to run".into()));
    }
    let mut ladder = RungLadder::new(asha)?;
    let budget = asha.max_budget;
    let workers = parallelism.min(trials.len());

    std::thread::scope(|scope| {
        let (to_sched, inbox) = mpsc::channel::<Message<E::Output>>();
        let mut job_tx = Vec::with_capacity(workers);
        let mut decision_tx = Vec::with_capacity(workers);
        for w in 0..workers {
            let (jtx, jrx) = mpsc::channel::<Option<TrialSpec>>();
            let (dtx, drx) = mpsc::channel::<Decision>();
            job_tx.push(jtx);
            decision_tx.push(dtx);
            let out = to_sched.clone();
            scope.spawn(move || {
                while let Ok(Some(spec)) = jrx.recv() {
                    let trial = spec.id;
                    let mut report = |epoch: usize, score: f64| {
                        let sent = out.send(Message::Report {
                            worker: w,
                            trial,
                            epoch,
                            score,
                        });
                        match sent {
                            Ok(()) => drx.recv().unwrap_or(Decision::Stop),
                            Err(_) => Decision::Stop,
                        }
                    };
                    let result = executor.run(&spec, budget, &mut report);
                    if out
                        .send(Message::Done {
                            worker: w,
                            trial,
                            result,
                        })
                        .is_err()
                    {
                        break;
                    }
                }
            });
        }
        drop(to_sched);

        let mut next = 0;
        for tx in job_tx.iter().take(workers) {
            tx.send(Some(trials[next].clone())).expect("worker alive");
            next += 1;
        }
        let mut active = workers;
        let mut replay = Vec::new();
        let mut scores: Vec<Vec<f64>> = vec![Vec::new(); trials.len()];
        let mut stopped_at: Vec<Option<usize>> = vec![None; trials.len()];
        let mut stopped: HashSet<usize> = HashSet::new();
        let mut finished: Vec<Option<(TrialStatus, Option<String>)>> = vec![None; trials.len()];
        let mut outputs: Vec<Option<E::Output>> = (0..trials.len()).map(|_| None).collect();
        let mut failure: Option<Error> = None;

        while active > 0 {
            let msg = inbox.recv().expect("workers outlive the scheduler loop");
            match msg {
                Message::Report {
                    worker,
                    trial,
                    epoch,
                    score,
                } => {
                    let decision = if failure.is_some() {
                        Decision::Stop
                    } else if stopped.contains(&trial) {
                        failure = Some(Error::Protocol(format!(
                            "trial {trial} trained after being stopped"
                        )));
                        Decision::Stop
                    } else {
                        match ladder.report(trial, epoch, score) {
                            Ok(d) => d,
                            Err(e) => {
                                failure = Some(e);
                                Decision::Stop
                            }
                        }
                    };
                    if decision == Decision::Stop {
                        stopped.insert(trial);
                        stopped_at[trial].get_or_insert(epoch);
                    }
                    scores[trial].push(score);
                    replay.push(ReplayEntry {
                        order: replay.len(),
                        trial,
                        epoch,
                        score,
                        rung: ladder.rung_of(epoch),
                        decision,
                    });
                    let _ = decision_tx[worker].send(decision);
                }
                Message::Done {
                    worker,
                    trial,
                    result,
                } => {
                    match result {
                        Ok(outcome) => {
                            finished[trial] = Some((outcome.status, outcome.diagnostic));
                            outputs[trial] = outcome.output;
                        }
                        Err(e) => {
                            finished[trial] = Some((TrialStatus::Diverged, Some(e.to_string())));
                        }
                    }
                    if next < trials.len() && failure.is_none() {
                        job_tx[worker]
                            .send(Some(trials[next].clone()))
                            .expect("worker alive");
                        next += 1;
                    } else {
                        let _ = job_tx[worker].send(None);
                        active -= 1;
                    }
                }
            }
        }
        if let Some(e) = failure {
            return Err(e);
        }

        let leaderboard: Vec<LeaderboardEntry> = trials
            .iter()
            .map(|spec| {
                let t = spec.id;
                let s = &scores[t];
                let (mut status, diagnostic) =
                    finished[t].clone().unwrap_or((TrialStatus::Diverged, None));
                if status != TrialStatus::Diverged {
                    status = match stopped_at[t] {
                        Some(e) if e < budget => TrialStatus::Pruned,
                        _ if s.len() < budget && status == TrialStatus::Pruned => {
                            TrialStatus::Pruned
                        }
                        _ if status == TrialStatus::Pruned => TrialStatus::Completed,
                        _ => status,
                    };
                }
                let (best_epoch, best_score) =
                    s.iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| {
                            if v > acc.1 {
                                (i + 1, v)
                            } else {
                                acc
                            }
                        });
                LeaderboardEntry {
                    trial: t,
                    label: spec.choice.label(),
                    choice: spec.choice.clone(),
                    seed: spec.seed,
                    status,
                    diagnostic,
                    epochs: s.len(),
                    best_score,
                    best_epoch,
                    scores: s.clone(),
                }
            })
            .collect();
        let best = leaderboard
            .iter()
            .filter(|e| e.status != TrialStatus::Diverged && e.epochs > 0)
            .max_by(|a, b| {
                a.best_score
                    .total_cmp(&b.best_score)
                    .then(b.trial.cmp(&a.trial))
            })
            .map(|e| e.trial)
            .ok_or_else(|| Error::Sweep("every trial diverged".into()))?;
        Ok(SweepOutcome {
            best,
            leaderboard,
            replay,
            outputs,
        })
    })
}

/// Re-feeds a logged report order to a fresh ladder and checks that every
/// decision is reproduced.
pub fn replay(asha: AshaConfig, log: &[ReplayEntry]) -> Result<()> {
    let mut ladder = RungLadder::new(asha)?;
    for entry in log {
        let d = ladder.report(entry.trial, entry.epoch, entry.score)?;
        if d != entry.decision {
            return Err(Error::Protocol(format!(
                "replay diverged at entry {}: logged {:?}, recomputed {:?}",
                entry.order, entry.decision, d
            )));
        }
    }
    Ok(())
}

/// Trains real models for each trial and reports validation Recall@10.
pub struct TrainingExecutor<'a> {
    pub data: &'a TrainData,
    pub env: EnvironmentProfile,
    pub train: TrainConfig,
}

impl TrialExecutor for TrainingExecutor<'_> {
    type Output = TrialResult;

    fn run(
        &self,
        spec: &TrialSpec,
        budget: usize,
        report: &mut dyn FnMut(usize, f64) -> Decision,
    ) -> Result<TrialOutcome<TrialResult>> {
        let mut env = self.env;
        env.loss.kind = spec.choice.loss;
        let train = TrainConfig {
            learning_rate: spec.choice.learning_rate,
            max_epochs: budget,
            ..self.train.clone()
        };
        let result = train_trial(
            &spec.choice.model,
            &env,
            &train,
            self.data,
            spec.seed,
            budget,
            &mut |rec| match report(rec.epoch, rec.recall10()) {
                Decision::Continue => Control::Continue,
                Decision::Stop => Control::Stop,
            },
        )?;
        Ok(TrialOutcome {
            status: result.status,
            diagnostic: result.diagnostic.clone(),
            output: Some(result),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Causality, ModelConfig};
    use crate::objectives::LossKind;

    /// Scores from a table: `table[trial][epoch - 1]`.
    struct Scripted(Vec<Vec<f64>>);

    impl TrialExecutor for Scripted {
        type Output = usize;

        fn run(
            &self,
            spec: &TrialSpec,
            budget: usize,
            report: &mut dyn FnMut(usize, f64) -> Decision,
        ) -> Result<TrialOutcome<usize>> {
            let row = &self.0[spec.id];
            for epoch in 1..=budget.min(row.len()) {
                if report(epoch, row[epoch - 1]) == Decision::Stop {
                    break;
                }
            }
            Ok(TrialOutcome {
                status: TrialStatus::Completed,
                diagnostic: None,
                output: Some(spec.id),
            })
        }
    }

    fn choices(n: usize) -> Vec<TrialSpec> {
        let c = DesignChoice {
            model: ModelConfig::small(Causality::Ar, 10),
            loss: LossKind::Ce,
            learning_rate: 1e-3,
        };
        trial_specs(vec![c; n], 7)
    }

    fn cfg() -> AshaConfig {
        AshaConfig {
            eta: 2,
            grace: 1,
            max_budget: 4,
        }
    }

    #[test]
    fn sequential_runs_are_reproducible_and_replayable() {
        let table: Vec<Vec<f64>> = (0..6)
            .map(|t| {
                (1..=4)
                    .map(|e| ((t * 37 + e * 11) % 17) as f64 / 17.0)
                    .collect()
            })
            .collect();
        let exec = Scripted(table);
        let a = run_sweep(&exec, &choices(6), cfg(), 1).unwrap();
        let b = run_sweep(&exec, &choices(6), cfg(), 1).unwrap();
        assert_eq!(a.replay, b.replay);
        assert_eq!(a.leaderboard, b.leaderboard);
        replay(cfg(), &a.replay).unwrap();
        assert_eq!(a.outputs.iter().flatten().count(), 6);
    }

    #[test]
    fn parallel_sweep_is_replayable() {
        let table: Vec<Vec<f64>> = (0..8)
            .map(|t| (1..=4).map(|e| ((t * 7 + e * 3) % 11) as f64).collect())
            .collect();
        let out = run_sweep(&Scripted(table), &choices(8), cfg(), 3).unwrap();
        replay(cfg(), &out.replay).unwrap();
        let mut seen_stop = HashSet::new();
        for e in &out.replay {
            assert!(!seen_stop.contains(&e.trial));
            if e.decision == Decision::Stop {
                seen_stop.insert(e.trial);
            }
        }
    }

    #[test]
    fn zero_budget_is_a_sweep_error() {
        let exec = Scripted(vec![vec![0.1]]);
        let asha = AshaConfig {
            max_budget: 0,
            ..cfg()
        };
        assert!(matches!(
            run_sweep(&exec, &choices(1), asha, 1),
            Err(Error::Sweep(_))
        ));
    }

    struct Diverging;

    impl TrialExecutor for Diverging {
        type Output = ();

        fn run(
            &self,
            _: &TrialSpec,
            _: usize,
            _: &mut dyn FnMut(usize, f64) -> Decision,
        ) -> Result<TrialOutcome<()>> {
            Ok(TrialOutcome {
                status: TrialStatus::Diverged,
                diagnostic: Some("nan".into()),
                output: None,
            })
        }
    }

    #[test]
    fn all_diverged_is_a_sweep_error() {
        assert!(matches!(
            run_sweep(&Diverging, &choices(3), cfg(), 2),
            Err(Error::Sweep(_))
        ));
    }
}
