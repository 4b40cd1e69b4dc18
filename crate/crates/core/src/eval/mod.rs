//! Ranking protocols (all-ranking, uniform-sampled, popularity-sampled) and
//! Recall@k / NDCG@k with pessimistic tie handling.

mod evaluate;
mod metrics;
mod protocol;

pub use evaluate::{evaluate, rank_cases, Catalogue, Scorer};
pub use metrics::{
    ndcg_at_k, rank_of_target, recall_at_k, MetricAccumulator, MetricReport, Split, CUTOFFS,
};
pub use protocol::{
    build_candidates, sample_uniform, sample_weighted, ProtocolKind, RankingProtocol,
};
