//! First-order Markov interaction generator for desk-scale experiments.

use serde::{Deserialize, Serialize};

use super::log::{Interaction, InteractionLog};
use crate::rng::SplitRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarkovSpec {
    pub n_items: usize,
    pub n_users: usize,
    pub mean_length: usize,
    /// Lengths are drawn uniformly from `mean_length ± length_spread`.
    pub length_spread: usize,
    /// Number of likely successors per item.
    pub successors: usize,
    /// Probability of a uniform random jump instead of a successor.
    pub noise: f64,
    pub seed: u64,
}

impl Default for MarkovSpec {
    fn default() -> Self {
        Self {
            n_items: 200,
            n_users: 2000,
            mean_length: 20,
            length_spread: 10,
            successors: 4,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl MarkovSpec {
    /// Successor lists (0-based items) with geometric weights 1, 1/2, 1/4, ...
    fn transitions(&self, rng: &mut SplitRng) -> Vec<Vec<usize>> {
        (0..self.n_items)
            .map(|_| {
                let mut pool: Vec<usize> = (0..self.n_items).collect();
                rng.shuffle(&mut pool);
                pool.truncate(self.successors.min(self.n_items));
                pool
            })
            .collect()
    }

    pub fn generate_sequences(&self) -> Vec<Vec<usize>> {
        let root = SplitRng::new(self.seed);
        let table = self.transitions(&mut root.fork("transitions"));
        let weights: Vec<f64> = (0..self.successors)
            .map(|k| 0.5f64.powi(k as i32))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut walk = root.fork("walks");
        (0..self.n_users)
            .map(|_| {
                let lo = self.mean_length.saturating_sub(self.length_spread).max(3);
                let hi = self.mean_length + self.length_spread;
                let len = lo + walk.index(hi - lo + 1);
                let mut cur = walk.index(self.n_items);
                let mut seq = vec![cur];
                while seq.len() < len {
                    cur = if walk.bernoulli(self.noise) {
                        walk.index(self.n_items)
                    } else {
                        let mut u = walk.uniform() * total;
                        let succ = &table[cur];
                        let mut pick = succ[succ.len() - 1];
                        for (k, w) in weights.iter().enumerate().take(succ.len()) {
                            if u < *w {
                                pick = succ[k];
                                break;
                            }
                            u -= w;
                        }
                        pick
                    };
                    seq.push(cur);
                }
                seq
            })
            .collect()
    }

    /// The walks as an interaction log with users `u<k>`, items `i<k>` and
    /// per-user increasing timestamps.
    pub fn generate_log(&self) -> InteractionLog {
        let seqs = self.generate_sequences();
        let records = seqs.iter().enumerate().flat_map(|(u, seq)| {
            seq.iter().enumerate().map(move |(t, &item)| Interaction {
                user: format!("u{u}"),
                item: format!("i{item}"),
                timestamp: 1_000_000 + (u * 1000 + t) as u64,
            })
        });
        InteractionLog::from_records(records)
    }
}
