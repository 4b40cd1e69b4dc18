use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    AllRanking,
    UniformSample,
    PopularitySample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankingProtocol {
    pub kind: ProtocolKind,
    /// Negatives per target for the sampled kinds.
    #[serde(default = "default_sample_size")]
    pub sample_size: usize,
    /// Drop the user's history items from the candidate pool.
    #[serde(default = "default_true")]
    pub exclude_seen: bool,
}

fn default_sample_size() -> usize {
    100
}

fn default_true() -> bool {
    true
}

impl RankingProtocol {
    pub fn all_ranking() -> Self {
        Self {
            kind: ProtocolKind::AllRanking,
            sample_size: 100,
            exclude_seen: true,
        }
    }

    pub fn uniform(sample_size: usize) -> Self {
        Self {
            kind: ProtocolKind::UniformSample,
            sample_size,
            exclude_seen: true,
        }
    }

    pub fn popularity(sample_size: usize) -> Self {
        Self {
            kind: ProtocolKind::PopularitySample,
            sample_size,
            exclude_seen: true,
        }
    }

    pub fn with_exclude_seen(mut self, exclude: bool) -> Self {
        self.exclude_seen = exclude;
        self
    }

    pub fn label(&self) -> String {
        match self.kind {
            ProtocolKind::AllRanking => "all_ranking".into(),
            ProtocolKind::UniformSample => format!("uniform_{}", self.sample_size),
            ProtocolKind::PopularitySample => format!("popularity_{}", self.sample_size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != ProtocolKind::AllRanking && self.sample_size == 0 {
            return Err(Error::Protocol("sample_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `k` distinct entries of `pool` chosen uniformly (partial Fisher-Yates).
pub fn sample_uniform(mut pool: Vec<u32>, k: usize, rng: &mut SplitRng) -> Result<Vec<u32>> {
    if pool.len() < k {
        return Err(Error::Protocol(format!(
            "candidate pool of {} is smaller than sample size {k}",
            pool.len()
        )));
    }
    for i in 0..k {
        let j = i + rng.index(pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    Ok(pool)
}

/// `k` distinct entries drawn with probability proportional to `weight[id]`
/// without replacement (Efraimidis-Spirakis keys `ln(u) / w`). The entries
/// come back in draw order.
pub fn sample_weighted(
    pool: &[u32],
    weight: &[f64],
    k: usize,
    rng: &mut SplitRng,
) -> Result<Vec<u32>> {
    let mut keyed: Vec<(f64, u32)> = Vec::with_capacity(pool.len());
    for &id in pool {
        let u = rng.uniform();
        let w = weight[id as usize];
        if w > 0.0 {
            keyed.push(((1.0 - u).ln() / w, id));
        }
    }
    if keyed.len() < k {
        return Err(Error::Protocol(format!(
            "only {} candidates with positive weight for sample size {k}",
            keyed.len()
        )));
    }
    let cmp = |a: &(f64, u32), b: &(f64, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k, cmp);
        keyed.truncate(k);
    }
    keyed.sort_by(cmp);
    Ok(keyed.into_iter().map(|(_, id)| id).collect())
}

/// Candidate list with the target first, followed by the negatives.
///
/// `seen` is the user's sorted history. `popularity[id]` is only read by the
/// popularity protocol.
pub fn build_candidates(
    protocol: &RankingProtocol,
    n_items: usize,
    popularity: &[f64],
    seen: &[u32],
    target: u32,
    rng: &mut SplitRng,
) -> Result<Vec<u32>> {
    protocol.validate()?;
    if target == 0 || target as usize > n_items {
        return Err(Error::Index {
            index: target as usize,
            size: n_items + 1,
        });
    }
    let pool: Vec<u32> = (1..=n_items as u32)
        .filter(|&i| i != target && !(protocol.exclude_seen && seen.binary_search(&i).is_ok()))
        .collect();
    let negatives = match protocol.kind {
        ProtocolKind::AllRanking => pool,
        ProtocolKind::UniformSample => sample_uniform(pool, protocol.sample_size, rng)?,
        ProtocolKind::PopularitySample => {
            sample_weighted(&pool, popularity, protocol.sample_size, rng)?
        }
    };
    let mut out = Vec::with_capacity(negatives.len() + 1);
    out.push(target);
    out.extend(negatives);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn all_ranking_sizes() {
        let mut rng = SplitRng::new(0);
        let p = RankingProtocol::all_ranking().with_exclude_seen(false);
        let c = build_candidates(&p, 50, &[], &[1, 2, 3], 7, &mut rng).unwrap();
        assert_eq!(c.len(), 50);
        assert_eq!(c[0], 7);
        let p = RankingProtocol::all_ranking();
        let c = build_candidates(&p, 50, &[], &[1, 2, 3, 7], 7, &mut rng).unwrap();
        assert_eq!(c.len(), 47);
        assert_eq!(c[0], 7);
    }

    #[test]
    fn uniform_sample_distinct() {
        let mut rng = SplitRng::new(1);
        let c =
            build_candidates(&RankingProtocol::uniform(100), 500, &[], &[], 3, &mut rng).unwrap();
        assert_eq!(c.len(), 101);
        assert_eq!(c.iter().collect::<HashSet<_>>().len(), 101);
        assert!(matches!(
            build_candidates(&RankingProtocol::uniform(100), 50, &[], &[], 3, &mut rng),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn popularity_prefers_heavy_items() {
        let mut rng = SplitRng::new(2);
        let mut weight = vec![0.0, 9.0];
        weight.extend(std::iter::repeat_n(1.0, 10));
        let pool: Vec<u32> = (1..=11).collect();
        let mut counts = [0usize; 12];
        for _ in 0..100_000 {
            counts[sample_weighted(&pool, &weight, 1, &mut rng).unwrap()[0] as usize] += 1;
        }
        let ratio = counts[1] as f64 / counts[2] as f64;
        assert!((ratio - 9.0).abs() < 0.6, "{ratio}");
    }

    #[test]
    fn weighted_sample_is_distinct_and_skips_zero_weight() {
        let mut rng = SplitRng::new(3);
        let weight = vec![0.0, 1.0, 0.0, 2.0, 3.0];
        let s = sample_weighted(&[1, 2, 3, 4], &weight, 3, &mut rng).unwrap();
        assert_eq!(s.iter().collect::<HashSet<_>>(), [1, 3, 4].iter().collect());
        assert!(sample_weighted(&[1, 2, 3, 4], &weight, 4, &mut rng).is_err());
    }
}
