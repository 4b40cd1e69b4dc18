//! Training targets (masked-item corruption, shifted next-item targets) and
//! the CE, BCE and BPR losses with uniform negative sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{left_pad, Batch, Model};
use crate::rng::SplitRng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Bce,
    Bpr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Negatives per positive for BCE and BPR.
    #[serde(default = "one")]
    pub negatives: usize,
    /// Exclude the user's whole history from negatives.
    #[serde(default)]
    pub exclude_seen: bool,
}

fn one() -> usize {
    1
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            negatives: 1,
            exclude_seen: false,
        }
    }
}

/// One fixed-length training row. `target_ids[t] == 0` means no loss at `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
}

impl TrainingExample {
    pub fn loss_positions(&self) -> Vec<bool> {
        self.target_ids.iter().map(|&t| t != 0).collect()
    }

    pub fn n_loss(&self) -> usize {
        self.target_ids.iter().filter(|&&t| t != 0).count()
    }
}

/// Masks each non-pad position of a left-padded row independently with
/// probability `p`; selected positions become `mask_id` and carry the
/// original item as target. The last position is forced when nothing is
/// selected.
pub fn mlm_corrupt(row: &[u32], p: f64, mask_id: u32, rng: &mut SplitRng) -> TrainingExample {
    let mut input = row.to_vec();
    let mut target = vec![0; row.len()];
    for (t, &id) in row.iter().enumerate() {
        if id != 0 && rng.bernoulli(p) {
            input[t] = mask_id;
            target[t] = id;
        }
    }
    if target.iter().all(|&t| t == 0) {
        if let Some(t) = row.iter().rposition(|&id| id != 0) {
            input[t] = mask_id;
            target[t] = row[t];
        }
    }
    TrainingExample {
        input_ids: input,
        target_ids: target,
    }
}

/// Next-item targets: inputs are `seq[..n-1]`, targets `seq[1..]`, both
/// left-padded to `max_len`. Leading pads in `seq` are ignored.
pub fn shift_targets(seq: &[u32], max_len: usize) -> Result<TrainingExample> {
    let start = seq.iter().take_while(|&&id| id == 0).count();
    let seq = &seq[start..];
    if seq.len() < 2 {
        return Err(Error::contract(format!(
            "next-item targets need at least 2 items, got {}",
            seq.len()
        )));
    }
    Ok(TrainingExample {
        input_ids: left_pad(&seq[..seq.len() - 1], max_len),
        target_ids: left_pad(&seq[1..], max_len),
    })
}

/// History (at most `max_len - 1` most recent items) followed by the mask token.
pub fn ae_inference_input(history: &[u32], max_len: usize, mask_id: u32) -> Result<Vec<u32>> {
    if history.is_empty() {
        return Err(Error::contract("empty history"));
    }
    let mut row = left_pad(history, max_len - 1);
    row.push(mask_id);
    Ok(row)
}

/// `-[ln s(pos) + sum ln(1 - s(neg))]` for one positive.
pub fn loss_bce(pos: f64, negs: &[f64]) -> f64 {
    -(log_sigmoid(pos) + negs.iter().map(|&n| log_sigmoid(-n)).sum::<f64>())
}

/// `-sum ln s(pos - neg) / |negs|`.
pub fn loss_bpr(pos: f64, negs: &[f64]) -> f64 {
    -negs.iter().map(|&n| log_sigmoid(pos - n)).sum::<f64>() / negs.len() as f64
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Uniform draws (with replacement) from `1..=n_items`, never `target` and,
/// when given, never an item of the sorted `exclude` list.
pub fn sample_negatives(
    target: u32,
    count: usize,
    n_items: usize,
    exclude: Option<&[u32]>,
    rng: &mut SplitRng,
) -> Result<Vec<u32>> {
    let banned = |i: u32| i == target || exclude.is_some_and(|e| e.binary_search(&i).is_ok());
    let n_banned = (1..=n_items as u32).filter(|&i| banned(i)).count();
    let allowed = n_items - n_banned;
    if allowed == 0 {
        return Err(Error::Sampling(format!(
            "no negative candidates left among {n_items} items"
        )));
    }
    if allowed * 4 < n_items {
        let pool: Vec<u32> = (1..=n_items as u32).filter(|&i| !banned(i)).collect();
        return Ok((0..count).map(|_| pool[rng.index(pool.len())]).collect());
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let i = 1 + rng.index(n_items) as u32;
        if !banned(i) {
            out.push(i);
        }
    }
    Ok(out)
}

/// Per-position weights realizing "mean over each row's loss positions, then
/// mean over rows".
fn reduction_weights(examples: &[TrainingExample]) -> Result<(Vec<usize>, Vec<u32>, Vec<f64>)> {
    let len = examples.first().map_or(0, |e| e.input_ids.len());
    let rows_with_loss = examples.iter().filter(|e| e.n_loss() > 0).count();
    if rows_with_loss == 0 {
        return Err(Error::contract("batch has no loss positions"));
    }
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for (r, e) in examples.iter().enumerate() {
        let n = e.n_loss();
        for (t, &target) in e.target_ids.iter().enumerate() {
            if target != 0 {
                positions.push(r * len + t);
                targets.push(target);
                weights.push(1.0 / (n as f64 * rows_with_loss as f64));
            }
        }
    }
    Ok((positions, targets, weights))
}

/// Scalar training loss of a batch of examples on graph `g`.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    model: &Model,
    g: &mut Graph,
    examples: &[TrainingExample],
    users: Option<Vec<usize>>,
    seen: Option<&[&[u32]]>,
    cfg: &LossConfig,
    rng: &mut SplitRng,
    train: bool,
) -> Result<Var> {
    let len = model.config.max_len;
    let rows: Vec<Vec<u32>> = examples.iter().map(|e| e.input_ids.clone()).collect();
    let batch = Batch::from_rows(&rows, len, users)?;
    let (positions, targets, weights) = reduction_weights(examples)?;
    let mut dropout_rng = rng.fork("dropout");
    let enc = model.encode(g, &batch, train, &mut dropout_rng)?;
    let h = g.gather(enc.hidden, &positions)?;
    match cfg.kind {
        LossKind::Ce => {
            let logits = model.logits(g, h, None)?;
            let v = model.vocab_size();
            let keep: Vec<bool> = (0..positions.len() * v)
                .map(|i| {
                    let c = i % v;
                    c != 0 && c != v - 1
                })
                .collect();
            let logits = g.masked_fill(logits, keep)?;
            let labels: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
            let per_row = g.cross_entropy_rows(logits, &labels)?;
            g.weighted_sum(per_row, weights)
        }
        LossKind::Bce | LossKind::Bpr => {
            let k = cfg.negatives.max(1);
            let mut neg_rng = rng.fork("negatives");
            let row_of: Vec<usize> = positions.iter().map(|p| p / len).collect();
            let mut negs = Vec::with_capacity(positions.len() * k);
            for (&t, &r) in targets.iter().zip(&row_of) {
                let exclude = if cfg.exclude_seen {
                    seen.map(|s| s[r])
                } else {
                    None
                };
                negs.extend(sample_negatives(
                    t,
                    k,
                    model.n_items,
                    exclude,
                    &mut neg_rng,
                )?);
            }
            let item = g.param(model.item_embedding());
            let te = g.gather(
                item,
                &targets.iter().map(|&t| t as usize).collect::<Vec<_>>(),
            )?;
            let pos = g.row_dot(h, te)?;
            let rep: Vec<usize> = (0..positions.len())
                .flat_map(|i| std::iter::repeat_n(i, k))
                .collect();
            let h_rep = g.gather(h, &rep)?;
            let ne = g.gather(item, &negs.iter().map(|&n| n as usize).collect::<Vec<_>>())?;
            let neg = g.row_dot(h_rep, ne)?;
            let neg_w: Vec<f64> = rep.iter().map(|&i| weights[i]).collect();
            if cfg.kind == LossKind::Bce {
                let lp = g.log_sigmoid(pos);
                let nn = g.scale(neg, -1.0);
                let ln = g.log_sigmoid(nn);
                let a = g.weighted_sum(lp, weights)?;
                let b = g.weighted_sum(ln, neg_w)?;
                let s = g.add(a, b)?;
                Ok(g.scale(s, -1.0))
            } else {
                let pos2 = g.reshape(pos, &[positions.len(), 1])?;
                let pos_rep = g.gather(pos2, &rep)?;
                let pos_rep = g.reshape(pos_rep, &[rep.len()])?;
                let diff = g.sub(pos_rep, neg)?;
                let ls = g.log_sigmoid(diff);
                let w: Vec<f64> = neg_w.iter().map(|w| -w / k as f64).collect();
                g.weighted_sum(ls, w)
            }
        }
    }
}

/// Convenience wrapper returning the loss value without gradients.
pub fn evaluate_loss(
    model: &Model,
    examples: &[TrainingExample],
    users: Option<Vec<usize>>,
    cfg: &LossConfig,
    rng: &mut SplitRng,
) -> Result<f64> {
    let mut g = Graph::new(&model.params);
    let loss = batch_loss(model, &mut g, examples, users, None, cfg, rng, false)?;
    Ok(g.value(loss).data()[0])
}

/// Mean cross-entropy of `logits [n, c]` against `labels`, for reference use.
pub fn cross_entropy_reference(logits: &Tensor, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(r, &l)| {
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - row[l]
        })
        .sum::<f64>()
        / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Causality, ModelConfig};

    #[test]
    fn shift_examples() {
        let e = shift_targets(&[1, 2, 3], 2).unwrap();
        assert_eq!(e.input_ids, vec![1, 2]);
        assert_eq!(e.target_ids, vec![2, 3]);
        let e = shift_targets(&[0, 0, 5, 6], 4).unwrap();
        assert_eq!(e.input_ids, vec![0, 0, 0, 5]);
        assert_eq!(e.loss_positions(), vec![false, false, false, true]);
        assert_eq!(e.target_ids[3], 6);
        assert!(matches!(shift_targets(&[4], 3), Err(Error::Contract(_))));
    }

    #[test]
    fn ae_inference_examples() {
        assert_eq!(
            ae_inference_input(&[1, 2, 3], 5, 9).unwrap(),
            vec![0, 1, 2, 3, 9]
        );
        assert_eq!(
            ae_inference_input(&[1, 2, 3, 4, 5], 5, 9).unwrap(),
            vec![2, 3, 4, 5, 9]
        );
        assert!(ae_inference_input(&[], 5, 9).is_err());
    }

    #[test]
    fn mlm_limits_and_forcing() {
        let mut rng = SplitRng::new(0);
        let row = vec![0, 0, 3, 4, 5];
        let all = mlm_corrupt(&row, 1.0 - 1e-12, 9, &mut rng);
        assert_eq!(all.input_ids, vec![0, 0, 9, 9, 9]);
        let forced = mlm_corrupt(&row, 1e-12, 9, &mut rng);
        assert_eq!(forced.input_ids, vec![0, 0, 3, 4, 9]);
        assert_eq!(forced.target_ids, vec![0, 0, 0, 0, 5]);
        let long: Vec<u32> = (1..=10_000).collect();
        let e = mlm_corrupt(&long, 0.2, 10_001, &mut rng);
        let frac = e.n_loss() as f64 / 10_000.0;
        assert!((frac - 0.2).abs() < 0.01, "{frac}");
        for (i, t) in e.input_ids.iter().zip(&e.target_ids) {
            assert_eq!(*i == 10_001, *t != 0);
        }
    }

    #[test]
    fn mlm_copies_differ() {
        let root = SplitRng::new(7);
        let row: Vec<u32> = (1..=20).collect();
        let a = mlm_corrupt(&row, 0.3, 99, &mut root.split(0));
        let b = mlm_corrupt(&row, 0.3, 99, &mut root.split(1));
        assert_ne!(a, b);
        assert_eq!(a, mlm_corrupt(&row, 0.3, 99, &mut root.split(0)));
    }

    #[test]
    fn scalar_losses() {
        assert!((loss_bpr(0.3, &[0.3]) - 2f64.ln()).abs() < 1e-15);
        assert!(loss_bce(40.0, &[-40.0, -40.0]) < 1e-15);
        assert!(loss_bpr(1.0, &[0.0]) < loss_bpr(0.5, &[0.0]));
    }

    #[test]
    fn negative_sampler_examples() {
        let mut rng = SplitRng::new(1);
        assert!(sample_negatives(1, 50, 2, None, &mut rng)
            .unwrap()
            .iter()
            .all(|&i| i == 2));
        let ex = [1, 2, 3, 5, 6, 7, 8];
        assert!(sample_negatives(9, 50, 9, Some(&ex), &mut rng)
            .unwrap()
            .iter()
            .all(|&i| i == 4));
        assert!(matches!(
            sample_negatives(1, 1, 3, Some(&[2, 3]), &mut rng),
            Err(Error::Sampling(_))
        ));
        let draws = sample_negatives(0, 100_000, 10, None, &mut rng).unwrap();
        for item in 1..=10u32 {
            let f = draws.iter().filter(|&&d| d == item).count() as f64 / 1e5;
            assert!((f - 0.1).abs() < 0.01);
        }
    }

    fn tiny_model(c: Causality) -> Model {
        let cfg = ModelConfig {
            hidden_size: 8,
            num_layers: 1,
            num_heads: 2,
            dropout_hidden: 0.0,
            dropout_attention: 0.0,
            ..ModelConfig::small(c, 5)
        };
        Model::new(cfg, 7, 0, &mut SplitRng::new(2)).unwrap()
    }

    #[test]
    fn losses_are_finite_and_nonnegative() {
        let m = tiny_model(Causality::Ar);
        let ex = vec![
            shift_targets(&[1, 2, 3, 4], 5).unwrap(),
            shift_targets(&[5, 6], 5).unwrap(),
        ];
        for kind in [LossKind::Ce, LossKind::Bce, LossKind::Bpr] {
            let cfg = LossConfig {
                kind,
                negatives: 3,
                exclude_seen: false,
            };
            let l = evaluate_loss(&m, &ex, None, &cfg, &mut SplitRng::new(3)).unwrap();
            assert!(l.is_finite() && l >= 0.0, "{kind:?} {l}");
        }
    }

    #[test]
    fn ce_is_mean_over_positions_then_rows() {
        let m = tiny_model(Causality::Ar);
        let a = shift_targets(&[1, 2, 3, 4], 5).unwrap();
        let b = shift_targets(&[5, 6], 5).unwrap();
        let cfg = LossConfig::new(LossKind::Ce);
        let la = evaluate_loss(
            &m,
            std::slice::from_ref(&a),
            None,
            &cfg,
            &mut SplitRng::new(0),
        )
        .unwrap();
        let lb = evaluate_loss(
            &m,
            std::slice::from_ref(&b),
            None,
            &cfg,
            &mut SplitRng::new(0),
        )
        .unwrap();
        let lab = evaluate_loss(&m, &[a, b], None, &cfg, &mut SplitRng::new(0)).unwrap();
        assert!((lab - (la + lb) / 2.0).abs() < 1e-12);
        let empty = TrainingExample {
            input_ids: vec![0, 0, 0, 1, 2],
            target_ids: vec![0; 5],
        };
        assert!(matches!(
            evaluate_loss(&m, &[empty], None, &cfg, &mut SplitRng::new(0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ce_matches_reference_over_items_only() {
        let m = tiny_model(Causality::Ar);
        let ex = shift_targets(&[3, 1, 4, 1, 5, 2], 5).unwrap();
        let cfg = LossConfig::new(LossKind::Ce);
        let got = evaluate_loss(
            &m,
            std::slice::from_ref(&ex),
            None,
            &cfg,
            &mut SplitRng::new(0),
        )
        .unwrap();
        let (logits, _) = m
            .forward(
                &Batch::from_rows(std::slice::from_ref(&ex.input_ids), 5, None).unwrap(),
                false,
                &mut SplitRng::new(0),
                false,
            )
            .unwrap();
        let v = m.vocab_size();
        let items = Tensor::from_fn(&[5, v - 2], |i| {
            logits.data()[(i / (v - 2)) * v + 1 + i % (v - 2)]
        });
        let labels: Vec<usize> = ex.target_ids.iter().map(|&t| t as usize - 1).collect();
        assert!((got - cross_entropy_reference(&items, &labels)).abs() < 1e-12);
    }
}
