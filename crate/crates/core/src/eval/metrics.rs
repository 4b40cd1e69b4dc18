use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::protocol::RankingProtocol;
use crate::error::{Error, Result};

/// Cut-offs reported for every metric.
pub const CUTOFFS: [usize; 3] = [5, 10, 20];

/// Pessimistic rank: `1 + #{strictly higher} + #{tied, other than the target}`.
pub fn rank_of_target(scores: &[f64], target: usize) -> Result<usize> {
    if target >= scores.len() {
        return Err(Error::Evaluation(format!(
            "target index {target} outside {} candidates",
            scores.len()
        )));
    }
    let t = scores[target];
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            return Err(Error::Evaluation(format!("NaN score at candidate {i}")));
        }
        if i != target && s >= t {
            rank += 1;
        }
    }
    Ok(rank)
}

pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(with = "crate::serde_helpers::cutoff_map")]
    pub recall: BTreeMap<usize, f64>,
    #[serde(with = "crate::serde_helpers::cutoff_map")]
    pub ndcg: BTreeMap<usize, f64>,
    pub protocol: RankingProtocol,
    pub split: Split,
    pub n_users: usize,
    pub config_fingerprint: String,
}

impl MetricReport {
    pub fn recall_at(&self, k: usize) -> f64 {
        self.recall.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// Range, monotonicity in `k` and `ndcg <= recall`.
    pub fn check_invariants(&self) -> Result<()> {
        let mut prev = (0.0, 0.0);
        for k in CUTOFFS {
            let (r, n) = (self.recall_at(k), self.ndcg_at(k));
            let ok = (0.0..=1.0).contains(&r)
                && (0.0..=1.0).contains(&n)
                && n <= r + 1e-12
                && r + 1e-12 >= prev.0
                && n + 1e-12 >= prev.1;
            if !ok {
                return Err(Error::Evaluation(format!(
                    "metric invariants violated at k={k}: {self:?}"
                )));
            }
            prev = (r, n);
        }
        Ok(())
    }
}

/// Running sums of per-user metrics.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    recall: [f64; 3],
    ndcg: [f64; 3],
    count: usize,
}

impl MetricAccumulator {
    pub fn push(&mut self, rank: usize) {
        for (i, k) in CUTOFFS.iter().enumerate() {
            self.recall[i] += recall_at_k(rank, *k);
            self.ndcg[i] += ndcg_at_k(rank, *k);
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(
        self,
        protocol: RankingProtocol,
        split: Split,
        config_fingerprint: String,
    ) -> Result<MetricReport> {
        if self.count == 0 {
            return Err(Error::Evaluation("no users to evaluate".into()));
        }
        let n = self.count as f64;
        let report = MetricReport {
            recall: CUTOFFS
                .iter()
                .zip(self.recall)
                .map(|(k, v)| (*k, v / n))
                .collect(),
            ndcg: CUTOFFS
                .iter()
                .zip(self.ndcg)
                .map(|(k, v)| (*k, v / n))
                .collect(),
            protocol,
            split,
            n_users: self.count,
            config_fingerprint,
        };
        report.check_invariants()?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of_target(&[0.1, 0.9, 0.3], 1).unwrap(), 1);
        assert_eq!(rank_of_target(&[2.0, 2.0, 1.0], 0).unwrap(), 2);
        assert_eq!(rank_of_target(&[1.0; 5], 3).unwrap(), 5);
        assert!(matches!(
            rank_of_target(&[1.0, f64::NAN], 0),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn metric_examples() {
        assert_eq!(recall_at_k(1, 5), 1.0);
        assert_eq!(ndcg_at_k(1, 5), 1.0);
        assert!((ndcg_at_k(2, 10) - 0.6309297535714575).abs() < 1e-15);
        assert_eq!(recall_at_k(11, 10), 0.0);
        assert_eq!(ndcg_at_k(11, 10), 0.0);
    }

    #[test]
    fn empty_accumulator_errors() {
        let acc = MetricAccumulator::default();
        assert!(acc
            .finish(
                RankingProtocol::all_ranking(),
                Split::Validation,
                String::new()
            )
            .is_err());
    }
}
