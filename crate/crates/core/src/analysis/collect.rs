use crate::data::EvalCase;
use crate::error::{Error, Result};
use crate::model::{AttentionRecord, Batch, Model};
use crate::rng::SplitRng;

/// Seeded choice of `n` cases whose history has at least `min_history`
/// items, returned in user order.
pub fn sample_cases(cases: &[EvalCase], n: usize, min_history: usize, seed: u64) -> Vec<&EvalCase> {
    let mut eligible: Vec<&EvalCase> = cases
        .iter()
        .filter(|c| c.history.len() >= min_history)
        .collect();
    SplitRng::new(seed)
        .fork("analysis_users")
        .shuffle(&mut eligible);
    eligible.truncate(n);
    eligible.sort_by_key(|c| c.user);
    eligible
}

/// Post-softmax attention of every layer and head, in inference mode, for
/// the input that scores each case's target. Matrices cover non-pad
/// positions only and are tagged with the case's user.
pub fn record_attention(model: &Model, cases: &[&EvalCase]) -> Result<Vec<AttentionRecord>> {
    if cases.iter().any(|c| c.history.is_empty()) {
        return Err(Error::contract(
            "cannot record attention for an empty history",
        ));
    }
    let rows: Vec<Vec<u32>> = cases
        .iter()
        .map(|c| model.inference_input(&c.history))
        .collect();
    let users: Vec<usize> = cases.iter().map(|c| c.user as usize).collect();
    let batch = Batch::from_rows(&rows, model.config.max_len, Some(users))?;
    let (_, records) = model.forward(&batch, false, &mut SplitRng::new(0), true)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::svd_spectrum;
    use crate::model::{Causality, ModelConfig};

    fn cases() -> Vec<EvalCase> {
        (1..=10)
            .map(|u| EvalCase {
                user: u,
                history: (1..=u).collect(),
                target: 1,
            })
            .collect()
    }

    #[test]
    fn sampling_is_seeded_and_filtered() {
        let cs = cases();
        let a = sample_cases(&cs, 3, 5, 1);
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|c| c.history.len() >= 5));
        assert_eq!(a, sample_cases(&cs, 3, 5, 1));
        assert_eq!(sample_cases(&cs, 100, 5, 1).len(), 6);
    }

    #[test]
    fn causal_records_are_full_rank() {
        let cfg = ModelConfig {
            hidden_size: 8,
            num_heads: 2,
            ..ModelConfig::small(Causality::Ar, 6)
        };
        let model = Model::new(cfg, 10, 10, &mut SplitRng::new(4)).unwrap();
        let cs = cases();
        let recs = record_attention(&model, &sample_cases(&cs, 4, 1, 0)).unwrap();
        assert_eq!(recs.len(), 4 * 2 * 2);
        for r in &recs {
            assert!(svd_spectrum(&r.matrix).unwrap().min_singular_value() > 0.0);
        }
    }
}
