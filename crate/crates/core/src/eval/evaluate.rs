use super::metrics::{rank_of_target, MetricAccumulator, MetricReport, Split};
use super::protocol::{build_candidates, RankingProtocol};
use crate::data::EvalCase;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::SplitRng;
use crate::tensor::Tensor;

/// Anything that scores every item id given a user's history.
pub trait Scorer {
    /// One row per case, indexed by item id (row length > `n_items`).
    fn score(&self, cases: &[&EvalCase]) -> Result<Tensor>;
}

impl Scorer for Model {
    fn score(&self, cases: &[&EvalCase]) -> Result<Tensor> {
        let histories: Vec<&[u32]> = cases.iter().map(|c| c.history.as_slice()).collect();
        let users: Option<Vec<usize>> = self
            .config
            .use_user_embedding
            .then(|| cases.iter().map(|c| c.user as usize).collect());
        self.score_next(&histories, users.as_deref())
    }
}

const SCORE_BATCH: usize = 256;

/// Item catalogue facts the protocols need.
#[derive(Debug, Clone)]
pub struct Catalogue {
    pub n_items: usize,
    /// Popularity over the full dataset, indexed by item id.
    pub popularity: Vec<f64>,
}

/// Per-case pessimistic ranks. The candidate RNG for a case depends only on
/// `(seed, protocol, user)`, so batching does not change results.
pub fn rank_cases(
    scorer: &dyn Scorer,
    cases: &[EvalCase],
    catalogue: &Catalogue,
    protocol: &RankingProtocol,
    seed: u64,
) -> Result<Vec<usize>> {
    let root = SplitRng::new(seed).fork(&protocol.label());
    let mut ranks = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(SCORE_BATCH) {
        let refs: Vec<&EvalCase> = chunk.iter().collect();
        let scores = scorer.score(&refs)?;
        if scores.rows() != chunk.len() || scores.last_dim() <= catalogue.n_items {
            return Err(Error::Evaluation(format!(
                "scorer returned shape {:?} for {} cases",
                scores.shape(),
                chunk.len()
            )));
        }
        for (r, case) in chunk.iter().enumerate() {
            let mut seen = case.history.clone();
            seen.sort_unstable();
            seen.dedup();
            let mut rng = root.split(case.user as u64);
            let cands = build_candidates(
                protocol,
                catalogue.n_items,
                &catalogue.popularity,
                &seen,
                case.target,
                &mut rng,
            )?;
            let row = scores.row(r);
            let cand_scores: Vec<f64> = cands.iter().map(|&c| row[c as usize]).collect();
            ranks.push(rank_of_target(&cand_scores, 0)?);
        }
    }
    Ok(ranks)
}

/// Averages Recall@k and NDCG@k over `cases`.
pub fn evaluate(
    scorer: &dyn Scorer,
    cases: &[EvalCase],
    split: Split,
    catalogue: &Catalogue,
    protocol: &RankingProtocol,
    seed: u64,
    config_fingerprint: &str,
) -> Result<MetricReport> {
    if cases.is_empty() {
        return Err(Error::Evaluation(format!("{split:?} split is empty")));
    }
    let mut acc = MetricAccumulator::default();
    for rank in rank_cases(scorer, cases, catalogue, protocol, seed)? {
        acc.push(rank);
    }
    acc.finish(*protocol, split, config_fingerprint.to_string())
}
