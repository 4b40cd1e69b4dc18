//! Browser demo: attention-mask construction, attention spectra of a
//! freshly initialized model, and sampled versus full-ranking recall.
//!
//! The `*_js` exports wrap plain Rust functions so the logic is testable
//! natively.

use causalrec::analysis::{record_attention, svd_spectrum, DEFAULT_TAU};
use causalrec::data::EvalCase;
use causalrec::eval::{evaluate, Catalogue, RankingProtocol, Scorer, Split};
use causalrec::model::{build_attention_mask, Causality, Model, ModelConfig};
use causalrec::rng::SplitRng;
use causalrec::tensor::Tensor;
use causalrec::{Error, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn parse_causality(s: &str) -> Result<Causality> {
    match s {
        "ae" | "AE" => Ok(Causality::Ae),
        "ar" | "AR" => Ok(Causality::Ar),
        _ => Err(Error::Config(format!(
            "causality must be `ae` or `ar`, got `{s}`"
        ))),
    }
}

/// Row-major `len × len` grid of 0/1 flags for a mask with `padding` leading
/// pad positions. `window == 0` means global attention.
pub fn mask_grid(len: usize, causality: &str, window: usize, padding: usize) -> Result<Vec<u8>> {
    if len == 0 || len > 64 {
        return Err(Error::Config("length must be in 1..=64".into()));
    }
    let pads: Vec<bool> = (0..len).map(|i| i < padding.min(len)).collect();
    let window = (window > 0).then_some(window);
    let mask = build_attention_mask(parse_causality(causality)?, window, &pads);
    Ok(mask.as_slice().iter().map(|&b| b as u8).collect())
}

#[derive(Debug, Serialize)]
pub struct HeadSpectrum {
    pub layer: usize,
    pub head: usize,
    pub normalized: Vec<f64>,
    pub effective_rank: usize,
    pub min_singular_value: f64,
    /// Row-major attention matrix.
    pub matrix: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct SpectrumDemo {
    pub size: usize,
    pub tau: f64,
    pub heads: Vec<HeadSpectrum>,
}

/// Attention spectra of a randomly initialized two-layer model on one random
/// sequence of length `len`. Larger `init_std` gives sharper attention.
pub fn attention_spectrum(
    len: usize,
    causality: &str,
    init_std: f64,
    seed: u64,
) -> Result<SpectrumDemo> {
    if !(2..=40).contains(&len) {
        return Err(Error::Config("length must be in 2..=40".into()));
    }
    let causality = parse_causality(causality)?;
    let config = ModelConfig {
        init_std,
        ..ModelConfig::small(causality, len)
    };
    config.validate()?;
    let n_items = 100;
    let root = SplitRng::new(seed);
    let model = Model::new(config, n_items, 1, &mut root.fork("model"))?;
    let mut rng = root.fork("sequence");
    let hist_len = if causality == Causality::Ae {
        len - 1
    } else {
        len
    };
    let case = EvalCase {
        user: 1,
        history: (0..hist_len)
            .map(|_| 1 + rng.index(n_items) as u32)
            .collect(),
        target: 1,
    };
    let mut heads = Vec::new();
    for rec in record_attention(&model, &[&case])? {
        let s = svd_spectrum(&rec.matrix)?;
        heads.push(HeadSpectrum {
            layer: rec.layer,
            head: rec.head,
            effective_rank: s.effective_rank,
            min_singular_value: s.min_singular_value(),
            normalized: s.normalized,
            matrix: rec.matrix.data().to_vec(),
        });
    }
    Ok(SpectrumDemo {
        size: len,
        tau: DEFAULT_TAU,
        heads,
    })
}

/// Scores every item by log-popularity plus noise, with a bonus of `skill`
/// on the target.
struct PopularityScorer {
    log_pop: Vec<f64>,
    skill: f64,
    seed: u64,
}

impl Scorer for PopularityScorer {
    fn score(&self, cases: &[&EvalCase]) -> Result<Tensor> {
        let width = self.log_pop.len() + 1;
        let mut out = Tensor::zeros(&[cases.len(), width]);
        for (r, c) in cases.iter().enumerate() {
            let mut rng = SplitRng::new(self.seed)
                .fork("scores")
                .split(u64::from(c.user));
            let row = &mut out.data_mut()[r * width..(r + 1) * width];
            for (i, lp) in self.log_pop.iter().enumerate().skip(1) {
                row[i] = lp + rng.normal();
            }
            row[c.target as usize] += self.skill;
        }
        Ok(out)
    }
}

#[derive(Debug, Serialize)]
pub struct ProtocolRow {
    pub protocol: String,
    pub recall10: f64,
    pub ndcg10: f64,
}

/// Recall@10 and NDCG@10 of one noisy popularity-aware scorer under
/// all-ranking, uniform-sampled and popularity-sampled evaluation on a
/// Zipf-distributed catalogue.
pub fn protocol_gap(
    n_items: usize,
    n_users: usize,
    sample_size: usize,
    skill: f64,
    seed: u64,
) -> Result<Vec<ProtocolRow>> {
    if n_items < sample_size + 10 || n_users == 0 || n_users > 5000 || n_items > 5000 {
        return Err(Error::Config(
            "need sample_size + 10 <= items <= 5000 and 1..=5000 users".into(),
        ));
    }
    let weights: Vec<f64> = (0..=n_items)
        .map(|i| if i == 0 { 0.0 } else { 1.0 / i as f64 })
        .collect();
    let total: f64 = weights.iter().sum();
    let popularity: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let cumulative: Vec<f64> = popularity
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let mut rng = SplitRng::new(seed).fork("cases");
    let mut draw = || {
        (cumulative
            .partition_point(|&c| c <= rng.uniform())
            .clamp(1, n_items)) as u32
    };
    let cases: Vec<EvalCase> = (1..=n_users as u32)
        .map(|user| {
            let target = draw();
            let history = (0..5).map(|_| draw()).filter(|&i| i != target).collect();
            EvalCase {
                user,
                history,
                target,
            }
        })
        .collect();
    let scorer = PopularityScorer {
        log_pop: popularity.iter().map(|p| p.max(1e-300).ln()).collect(),
        skill,
        seed,
    };
    let catalogue = Catalogue {
        n_items,
        popularity,
    };
    [
        RankingProtocol::all_ranking(),
        RankingProtocol::uniform(sample_size),
        RankingProtocol::popularity(sample_size),
    ]
    .iter()
    .map(|p| {
        let r = evaluate(
            &scorer,
            &cases,
            Split::Validation,
            &catalogue,
            p,
            seed,
            "demo",
        )?;
        Ok(ProtocolRow {
            protocol: p.label(),
            recall10: r.recall_at(10),
            ndcg10: r.ndcg_at(10),
        })
    })
    .collect()
}

fn js_err(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> std::result::Result<String, JsError> {
    serde_json::to_string(v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = attentionMask)]
pub fn attention_mask_js(
    len: usize,
    causality: &str,
    window: usize,
    padding: usize,
) -> std::result::Result<Vec<u8>, JsError> {
    mask_grid(len, causality, window, padding).map_err(js_err)
}

#[wasm_bindgen(js_name = attentionSpectrum)]
pub fn attention_spectrum_js(
    len: usize,
    causality: &str,
    init_std: f64,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_json(&attention_spectrum(len, causality, init_std, u64::from(seed)).map_err(js_err)?)
}

#[wasm_bindgen(js_name = protocolGap)]
pub fn protocol_gap_js(
    n_items: usize,
    n_users: usize,
    sample_size: usize,
    skill: f64,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_json(&protocol_gap(n_items, n_users, sample_size, skill, u64::from(seed)).map_err(js_err)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_grid_matches_definition() {
        let g = mask_grid(3, "ar", 0, 0).unwrap();
        assert_eq!(g, vec![1, 0, 0, 1, 1, 0, 1, 1, 1]);
        let g = mask_grid(3, "ae", 1, 1).unwrap();
        assert_eq!(g, vec![0, 0, 0, 0, 1, 1, 0, 1, 1]);
        assert!(mask_grid(3, "xx", 0, 0).is_err());
    }

    #[test]
    fn spectra_are_normalized() {
        let d = attention_spectrum(8, "ar", 0.5, 1).unwrap();
        assert_eq!(d.heads.len(), 4);
        for h in &d.heads {
            assert_eq!(h.normalized[0], 1.0);
            assert_eq!(h.matrix.len(), 64);
            assert!(h.min_singular_value > 0.0);
        }
        assert!(attention_spectrum(8, "ae", 0.5, 1).is_ok());
    }

    #[test]
    fn sampled_protocols_inflate_recall() {
        let rows = protocol_gap(500, 300, 100, 2.0, 3).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[1].recall10 > rows[0].recall10);
        assert!(rows[2].recall10 > rows[0].recall10);
    }
}
