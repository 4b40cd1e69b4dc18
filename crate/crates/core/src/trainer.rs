//! Per-trial training loop: example construction with the optional
//! augmentations, Adam with the switchable schedule, per-epoch validation,
//! early stopping and a reporter hook for the tuner.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    augment_duplicate, build_splits, window_offsets, EvalCase, SelectionToken, SequenceDataset,
    SplitView,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Catalogue, MetricReport, RankingProtocol, Split};
use crate::model::{apply_sse, left_pad, Causality, Model, ModelConfig};
use crate::objectives::{
    batch_loss, mlm_corrupt, shift_targets, LossConfig, LossKind, TrainingExample,
};
use crate::rng::SplitRng;
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Schedule};

/// Training-environment switches. `None` turns a feature off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentProfile {
    /// Copies of each training sequence, each masked independently.
    #[serde(default)]
    pub seq_duplication: Option<usize>,
    /// Sliding-window stride over long training sequences.
    #[serde(default)]
    pub sliding_window: Option<usize>,
    #[serde(default)]
    pub lr_warmup: Option<u64>,
    /// Steps over which the post-warm-up rate decays linearly to zero.
    #[serde(default)]
    pub lr_decay: Option<u64>,
    #[serde(default)]
    pub weight_decay: Option<f64>,
    pub loss: LossConfig,
}

impl EnvironmentProfile {
    /// Plain environment: no augmentation, constant rate, no weight decay.
    pub fn standard(loss: LossKind) -> Self {
        Self {
            seq_duplication: None,
            sliding_window: None,
            lr_warmup: None,
            lr_decay: None,
            weight_decay: None,
            loss: LossConfig::new(loss),
        }
    }

    /// Every feature on with CE loss. Stride defaults to `max_len / 2`.
    pub fn reproduction(max_len: usize, warmup: u64, decay: u64) -> Self {
        Self {
            seq_duplication: Some(5),
            sliding_window: Some((max_len / 2).max(1)),
            lr_warmup: Some(warmup),
            lr_decay: Some(decay),
            weight_decay: Some(0.01),
            loss: LossConfig::new(LossKind::Ce),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    #[serde(default)]
    pub adam: AdamSettings,
    /// Protocol used for the per-epoch validation signal.
    pub selection_protocol: RankingProtocol,
}

/// Adam moments and epsilon; weight decay lives in the environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            max_epochs: 1000,
            patience: 20,
            adam: AdamSettings::default(),
            selection_protocol: RankingProtocol::all_ranking(),
        }
    }
}

/// Dataset view for training: leave-one-out split plus catalogue facts.
#[derive(Debug)]
pub struct TrainData {
    pub split: SplitView,
    pub catalogue: Catalogue,
    pub n_users: usize,
    pub fingerprint: String,
    validation: Vec<EvalCase>,
    test_evaluations: AtomicUsize,
}

impl TrainData {
    pub fn new(dataset: &SequenceDataset, fingerprint: impl Into<String>) -> Result<Self> {
        let split = build_splits(dataset);
        if split.is_empty() {
            return Err(Error::EmptyDataset(
                "no user has three or more interactions".into(),
            ));
        }
        let validation = split.validation_cases();
        Ok(Self {
            catalogue: Catalogue {
                n_items: dataset.n_items(),
                popularity: dataset.popularity_distribution(),
            },
            n_users: dataset.n_users(),
            fingerprint: fingerprint.into(),
            split,
            validation,
            test_evaluations: AtomicUsize::new(0),
        })
    }

    pub fn validation_cases(&self) -> &[EvalCase] {
        &self.validation
    }

    pub fn evaluate_validation(
        &self,
        model: &Model,
        protocol: &RankingProtocol,
        seed: u64,
    ) -> Result<MetricReport> {
        evaluate(
            model,
            &self.validation,
            Split::Validation,
            &self.catalogue,
            protocol,
            seed,
            &self.fingerprint,
        )
    }

    /// One test-split evaluation. Requires proof that selection is over.
    pub fn evaluate_test(
        &self,
        model: &Model,
        protocol: &RankingProtocol,
        token: &SelectionToken,
        seed: u64,
    ) -> Result<MetricReport> {
        self.test_evaluations.fetch_add(1, Ordering::SeqCst);
        let cases = self.split.test_cases(token);
        evaluate(
            model,
            &cases,
            Split::Test,
            &self.catalogue,
            protocol,
            seed,
            &self.fingerprint,
        )
    }

    pub fn test_evaluations(&self) -> usize {
        self.test_evaluations.load(Ordering::SeqCst)
    }
}

/// Training rows for one epoch, paired with their 1-based user id.
pub fn build_epoch_examples(
    config: &ModelConfig,
    env: &EnvironmentProfile,
    users: &[u32],
    sequences: &[Vec<u32>],
    mask_id: u32,
    rng: &mut SplitRng,
) -> Vec<(TrainingExample, u32)> {
    let len = config.max_len;
    // AR consumes one extra item because inputs and targets are offset by one.
    let span = match config.causality {
        Causality::Ae => len,
        Causality::Ar => len + 1,
    };
    let copies = env.seq_duplication.unwrap_or(1).max(1);
    let mut out = Vec::new();
    for (k, (&user, seq)) in users.iter().zip(sequences).enumerate() {
        let offsets = match env.sliding_window {
            Some(stride) => window_offsets(seq.len(), span, stride),
            None => vec![seq.len().saturating_sub(span)],
        };
        let mut user_rng = rng.split(k as u64);
        for o in offsets {
            let window = &seq[o..(o + span).min(seq.len())];
            for copy in augment_duplicate(window, copies) {
                match config.causality {
                    Causality::Ae => {
                        let p = config.mask_probability.unwrap_or(0.2);
                        out.push((
                            mlm_corrupt(&left_pad(&copy, len), p, mask_id, &mut user_rng),
                            user,
                        ));
                    }
                    Causality::Ar => {
                        if let Ok(e) = shift_targets(&copy, len) {
                            out.push((e, user));
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Completed,
    EarlyStopped,
    Pruned,
    Diverged,
}

/// Reporter verdict after each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub validation: MetricReport,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn recall10(&self) -> f64 {
        self.validation.recall_at(10)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub epoch: usize,
    pub best_recall10: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
}

impl RunState {
    fn new(seed: u64) -> Self {
        Self {
            epoch: 0,
            best_recall10: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
            seed,
            history: Vec::new(),
        }
    }

    /// Records a validation score; returns true when it is a strict improvement.
    pub fn observe(&mut self, recall10: f64) -> bool {
        self.epoch += 1;
        if recall10 > self.best_recall10 {
            self.best_recall10 = recall10;
            self.best_epoch = self.epoch;
            self.epochs_since_improvement = 0;
            true
        } else {
            self.epochs_since_improvement += 1;
            false
        }
    }

    pub fn should_stop(&self, patience: usize) -> bool {
        self.epochs_since_improvement >= patience
    }
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    /// Model holding the best-validation parameters.
    pub model: Model,
    pub state: RunState,
    pub status: TrialStatus,
    pub diagnostic: Option<String>,
}

/// Trains one configuration. `reporter` sees every epoch record and may stop
/// the trial.
pub fn train_trial(
    config: &ModelConfig,
    env: &EnvironmentProfile,
    train: &TrainConfig,
    data: &TrainData,
    seed: u64,
    budget: usize,
    reporter: &mut dyn FnMut(&EpochRecord) -> Control,
) -> Result<TrialResult> {
    config.validate()?;
    train.selection_protocol.validate()?;
    if train.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let root = SplitRng::new(seed);
    let mut model = Model::new(
        config.clone(),
        data.catalogue.n_items,
        data.n_users,
        &mut root.fork("init"),
    )?;
    let adam_cfg = AdamConfig {
        beta1: train.adam.beta1,
        beta2: train.adam.beta2,
        eps: train.adam.eps,
        weight_decay: env.weight_decay,
    };
    let schedule = Schedule {
        base_lr: train.learning_rate,
        warmup_steps: env.lr_warmup,
        decay_steps: env.lr_decay,
    };
    let mut adam = Adam::new(&model.params, adam_cfg, schedule);
    let mut state = RunState::new(seed);
    let mut best: Option<ParamStore> = None;
    let mut status = TrialStatus::Completed;
    let mut diagnostic = None;
    let train_seqs = data.split.train();
    let users = data.split.users();
    let mut seen_sorted: Vec<Vec<u32>> = Vec::new();
    if env.loss.exclude_seen {
        seen_sorted = train_seqs
            .iter()
            .map(|s| {
                let mut v = s.clone();
                v.sort_unstable();
                v.dedup();
                v
            })
            .collect();
    }
    let user_index: std::collections::HashMap<u32, usize> =
        users.iter().enumerate().map(|(k, &u)| (u, k)).collect();
    let epochs = budget.min(train.max_epochs);

    for epoch in 1..=epochs {
        let started = Instant::now();
        let epoch_rng = root.fork("epoch").split(epoch as u64);
        let mut examples = build_epoch_examples(
            config,
            env,
            users,
            train_seqs,
            model.mask_id(),
            &mut epoch_rng.fork("examples"),
        );
        epoch_rng.fork("shuffle").shuffle(&mut examples);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut lr = 0.0;
        for (b, chunk) in examples.chunks(train.batch_size).enumerate() {
            let mut rng = epoch_rng.fork("batch").split(b as u64);
            let rows: Vec<TrainingExample> = chunk.iter().map(|(e, _)| e.clone()).collect();
            let user_ids = config.use_user_embedding.then(|| {
                let ids: Vec<usize> = chunk.iter().map(|(_, u)| *u as usize).collect();
                apply_sse(
                    &ids,
                    config.sse_probability,
                    data.n_users,
                    &mut rng.fork("sse"),
                    true,
                )
            });
            let seen: Vec<&[u32]> = if env.loss.exclude_seen {
                chunk
                    .iter()
                    .map(|(_, u)| seen_sorted[user_index[u]].as_slice())
                    .collect()
            } else {
                Vec::new()
            };
            let seen_ref = env.loss.exclude_seen.then_some(seen.as_slice());
            let step = {
                let mut g = Graph::new(&model.params);
                let loss = batch_loss(
                    &model, &mut g, &rows, user_ids, seen_ref, &env.loss, &mut rng, true,
                )?;
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    Err(Error::Diverged(format!(
                        "loss {value} at epoch {epoch}, batch {b}"
                    )))
                } else {
                    g.backward(loss).map(|grads| (value, grads))
                }
            };
            let (value, grads) = match step {
                Ok(v) => v,
                Err(Error::Diverged(msg)) => {
                    diagnostic = Some(msg);
                    status = TrialStatus::Diverged;
                    break;
                }
                Err(e) => return Err(e),
            };
            model.params.zero_grad();
            grads.accumulate_into(&mut model.params);
            lr = adam.step(&mut model.params);
            loss_sum += value;
            batches += 1;
        }
        if status == TrialStatus::Diverged {
            break;
        }
        let validation = data.evaluate_validation(&model, &train.selection_protocol, seed)?;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            lr,
            seconds: started.elapsed().as_secs_f64(),
            validation,
        };
        if state.observe(record.recall10()) {
            best = Some(model.params.clone());
        }
        let verdict = reporter(&record);
        state.history.push(record);
        if verdict == Control::Stop {
            status = TrialStatus::Pruned;
            break;
        }
        if state.should_stop(train.patience) {
            status = TrialStatus::EarlyStopped;
            break;
        }
    }
    if let Some(p) = best {
        model.params = p;
    }
    Ok(TrialResult {
        model,
        state,
        status,
        diagnostic,
    })
}

/// Fresh training of the selected configuration followed by exactly one
/// test evaluation per protocol.
pub fn final_retrain_and_test(
    config: &ModelConfig,
    env: &EnvironmentProfile,
    train: &TrainConfig,
    data: &TrainData,
    seed: u64,
    protocols: &[RankingProtocol],
    token: &SelectionToken,
) -> Result<(TrialResult, Vec<MetricReport>)> {
    let result = train_trial(
        config,
        env,
        train,
        data,
        seed,
        train.max_epochs,
        &mut |_| Control::Continue,
    )?;
    if result.status == TrialStatus::Diverged {
        return Err(Error::Diverged(
            result.diagnostic.clone().unwrap_or_default(),
        ));
    }
    let reports = protocols
        .iter()
        .map(|p| data.evaluate_test(&result.model, p, token, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok((result, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::MarkovSpec;

    fn toy_data(users: usize) -> TrainData {
        let spec = MarkovSpec {
            n_items: 30,
            n_users: users,
            mean_length: 10,
            length_spread: 4,
            ..MarkovSpec::default()
        };
        let seqs: Vec<Vec<u32>> = spec
            .generate_sequences()
            .into_iter()
            .map(|s| s.into_iter().map(|i| i as u32 + 1).collect())
            .collect();
        let ds = SequenceDataset::from_sequences(seqs, 30, 8).unwrap();
        TrainData::new(&ds, "toy").unwrap()
    }

    fn tiny(c: Causality) -> ModelConfig {
        ModelConfig {
            hidden_size: 8,
            num_layers: 1,
            num_heads: 2,
            ..ModelConfig::small(c, 8)
        }
    }

    #[test]
    fn patience_arithmetic() {
        let mut s = RunState::new(0);
        let mut scores = vec![0.10, 0.11];
        scores.extend(std::iter::repeat_n(0.11, 30));
        let mut stopped = None;
        for (i, &v) in scores.iter().enumerate() {
            s.observe(v);
            if s.should_stop(20) {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(22));
    }

    #[test]
    fn environment_presets() {
        let std_env = EnvironmentProfile::standard(LossKind::Bce);
        assert!(
            std_env.seq_duplication.is_none()
                && std_env.lr_warmup.is_none()
                && std_env.weight_decay.is_none()
        );
        let rep = EnvironmentProfile::reproduction(50, 100, 1000);
        assert_eq!(rep.sliding_window, Some(25));
        assert_eq!(rep.loss.kind, LossKind::Ce);
    }

    #[test]
    fn examples_respect_augmentation() {
        let cfg = tiny(Causality::Ae);
        let mut env = EnvironmentProfile::standard(LossKind::Ce);
        let users = [1, 2];
        let seqs = vec![vec![1, 2, 3], (1..=20).collect::<Vec<u32>>()];
        let mut rng = SplitRng::new(0);
        assert_eq!(
            build_epoch_examples(&cfg, &env, &users, &seqs, 31, &mut rng).len(),
            2
        );
        env.seq_duplication = Some(3);
        assert_eq!(
            build_epoch_examples(&cfg, &env, &users, &seqs, 31, &mut rng).len(),
            6
        );
        env.sliding_window = Some(4);
        // 20 items, window 8, stride 4: offsets 0, 4, 8, 12
        assert_eq!(
            build_epoch_examples(&cfg, &env, &users, &seqs, 31, &mut rng).len(),
            3 * (1 + 4)
        );
    }

    #[test]
    fn budget_bounds_epochs_and_runs_are_deterministic() {
        let data = toy_data(60);
        let env = EnvironmentProfile::standard(LossKind::Ce);
        let tc = TrainConfig {
            batch_size: 16,
            ..TrainConfig::default()
        };
        let cfg = tiny(Causality::Ar);
        let a = train_trial(&cfg, &env, &tc, &data, 5, 3, &mut |_| Control::Continue).unwrap();
        assert_eq!(a.state.history.len(), 3);
        assert_eq!(a.status, TrialStatus::Completed);
        let b = train_trial(&cfg, &env, &tc, &data, 5, 3, &mut |_| Control::Continue).unwrap();
        let strip = |s: &RunState| {
            s.history
                .iter()
                .map(|r| (r.loss, r.validation.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.state), strip(&b.state));
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn reporter_can_prune() {
        let data = toy_data(40);
        let env = EnvironmentProfile::standard(LossKind::Bpr);
        let tc = TrainConfig {
            batch_size: 16,
            ..TrainConfig::default()
        };
        let r = train_trial(&tiny(Causality::Ae), &env, &tc, &data, 1, 10, &mut |rec| {
            if rec.epoch == 2 {
                Control::Stop
            } else {
                Control::Continue
            }
        })
        .unwrap();
        assert_eq!(r.status, TrialStatus::Pruned);
        assert_eq!(r.state.history.len(), 2);
    }

    #[test]
    fn divergence_is_reported_not_fatal() {
        let data = toy_data(30);
        let env = EnvironmentProfile::standard(LossKind::Ce);
        let tc = TrainConfig {
            learning_rate: f64::INFINITY,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let r = train_trial(&tiny(Causality::Ar), &env, &tc, &data, 1, 3, &mut |_| {
            Control::Continue
        })
        .unwrap();
        assert_eq!(r.status, TrialStatus::Diverged);
        assert!(r.diagnostic.is_some());
    }

    #[test]
    fn test_split_evaluated_once_per_protocol() {
        let data = toy_data(40);
        let env = EnvironmentProfile::standard(LossKind::Ce);
        let tc = TrainConfig {
            batch_size: 16,
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let token = SelectionToken::conclude("unit test");
        let protocols = [RankingProtocol::all_ranking(), RankingProtocol::uniform(10)];
        let (_, reports) = final_retrain_and_test(
            &tiny(Causality::Ar),
            &env,
            &tc,
            &data,
            0,
            &protocols,
            &token,
        )
        .unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(data.test_evaluations(), 2);
        assert!(reports.iter().all(|r| r.split == Split::Test));
    }
}
