use serde::{Deserialize, Serialize};

use super::dataset::SequenceDataset;

/// One held-out prediction: the history fed to the model and the item to rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCase {
    pub user: u32,
    pub history: Vec<u32>,
    pub target: u32,
}

/// Proof that model selection has finished. The test split can only be read
/// with one of these in hand, so nothing in the training or tuning path can
/// touch test targets.
#[derive(Debug, Clone)]
pub struct SelectionToken {
    reason: String,
}

impl SelectionToken {
    /// Declares selection finished. Call only once the configuration that will
    /// be reported has been fixed on validation data.
    pub fn conclude(reason: impl Into<String>) -> Self {
        Self {
            reason: reason.into(),
        }
    }

    pub fn reason(&self) -> &str {
        &self.reason
    }
}

/// Leave-one-out partition: last item is test, second to last is validation,
/// everything before is training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitView {
    users: Vec<u32>,
    train: Vec<Vec<u32>>,
    validation: Vec<u32>,
    test: Vec<u32>,
    dropped: usize,
}

pub fn split_sequence(seq: &[u32]) -> Option<(&[u32], u32, u32)> {
    let n = seq.len();
    (n >= 3).then(|| (&seq[..n - 2], seq[n - 2], seq[n - 1]))
}

pub fn build_splits(dataset: &SequenceDataset) -> SplitView {
    let mut view = SplitView {
        users: Vec::new(),
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        dropped: 0,
    };
    for (u, seq) in dataset.sequences().iter().enumerate() {
        match split_sequence(seq) {
            Some((train, val, test)) => {
                view.users.push(u as u32 + 1);
                view.train.push(train.to_vec());
                view.validation.push(val);
                view.test.push(test);
            }
            None => view.dropped += 1,
        }
    }
    view
}

impl SplitView {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn users(&self) -> &[u32] {
        &self.users
    }

    pub fn train(&self) -> &[Vec<u32>] {
        &self.train
    }

    pub fn validation(&self) -> &[u32] {
        &self.validation
    }

    /// Users skipped because their sequence was shorter than three.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// Validation cases: predict `v_{n-1}` from `v_1..v_{n-2}`.
    pub fn validation_cases(&self) -> Vec<EvalCase> {
        (0..self.len())
            .map(|k| EvalCase {
                user: self.users[k],
                history: self.train[k].clone(),
                target: self.validation[k],
            })
            .collect()
    }

    /// Test cases: predict `v_n` from `v_1..v_{n-1}`.
    pub fn test_cases(&self, _token: &SelectionToken) -> Vec<EvalCase> {
        (0..self.len())
            .map(|k| {
                let mut history = self.train[k].clone();
                history.push(self.validation[k]);
                EvalCase {
                    user: self.users[k],
                    history,
                    target: self.test[k],
                }
            })
            .collect()
    }

    /// Concatenation of train, validation and test for row `k`.
    pub fn reconstruct(&self, k: usize, token: &SelectionToken) -> Vec<u32> {
        let _ = token;
        let mut seq = self.train[k].clone();
        seq.push(self.validation[k]);
        seq.push(self.test[k]);
        seq
    }
}
