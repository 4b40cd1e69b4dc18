use serde::{Deserialize, Serialize};

use super::config::{Causality, ModelConfig};
use super::mask::build_attention_mask;
use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::tensor::{checkpoint, Graph, ParamId, ParamStore, Tensor, Var};

/// Left-padded id rows, flattened row-major as `rows x len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub rows: usize,
    pub len: usize,
    /// One 1-based user id per row, required when user embeddings are on.
    pub users: Option<Vec<usize>>,
}

impl Batch {
    pub fn from_rows(rows: &[Vec<u32>], len: usize, users: Option<Vec<usize>>) -> Result<Self> {
        let mut ids = Vec::with_capacity(rows.len() * len);
        for r in rows {
            if r.len() != len {
                return Err(Error::Shape {
                    op: "batch",
                    lhs: vec![r.len()],
                    rhs: vec![len],
                });
            }
            ids.extend_from_slice(r);
        }
        Ok(Self {
            ids,
            rows: rows.len(),
            len,
            users,
        })
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.len..(r + 1) * self.len]
    }
}

/// Left-pads (or left-truncates) `seq` to exactly `len` ids.
pub fn left_pad(seq: &[u32], len: usize) -> Vec<u32> {
    let tail = &seq[seq.len().saturating_sub(len)..];
    let mut out = vec![0; len - tail.len()];
    out.extend_from_slice(tail);
    out
}

/// Post-softmax attention of one head for one sequence, restricted to
/// non-pad positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub user: usize,
    pub causality: Causality,
    pub matrix: Tensor,
}

#[derive(Debug, Clone)]
struct Block {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct Layout {
    item: ParamId,
    position: ParamId,
    user: Option<ParamId>,
    emb_ln: (ParamId, ParamId),
    blocks: Vec<Block>,
    out_ln: (ParamId, ParamId),
}

/// Output of the encoder: final hidden states `[rows*len, d]` and, per
/// layer, the attention probabilities `[rows*heads, len, len]`.
pub struct Encoded {
    pub hidden: Var,
    pub attention: Vec<Var>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    n_items: usize,
    n_users: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub n_items: usize,
    pub n_users: usize,
    pub params: ParamStore,
    layout: Layout,
}

fn linear(
    ps: &mut ParamStore,
    name: &str,
    din: usize,
    dout: usize,
    std: f64,
    rng: &mut SplitRng,
) -> (ParamId, ParamId) {
    (
        ps.add(
            format!("{name}.weight"),
            Tensor::randn(&[din, dout], std, rng),
        ),
        ps.add(format!("{name}.bias"), Tensor::zeros(&[dout])),
    )
}

fn norm(ps: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    (
        ps.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
        ps.add(format!("{name}.beta"), Tensor::zeros(&[d])),
    )
}

impl Model {
    pub fn new(
        config: ModelConfig,
        n_items: usize,
        n_users: usize,
        rng: &mut SplitRng,
    ) -> Result<Self> {
        config.validate()?;
        if n_items == 0 {
            return Err(Error::Config("model needs at least one item".into()));
        }
        let d = config.hidden_size;
        let std = config.init_std;
        let mut ps = ParamStore::new();
        let item = ps.add("item_embedding", Tensor::randn(&[n_items + 2, d], std, rng));
        let position = ps.add(
            "position_embedding",
            Tensor::randn(&[config.max_len, d], std, rng),
        );
        let user = config
            .use_user_embedding
            .then(|| ps.add("user_embedding", Tensor::randn(&[n_users + 1, d], std, rng)));
        let emb_ln = norm(&mut ps, "embedding_norm", d);
        let blocks = (0..config.num_layers)
            .map(|l| {
                let p = format!("blocks.{l}");
                Block {
                    ln1: norm(&mut ps, &format!("{p}.attn_norm"), d),
                    q: linear(&mut ps, &format!("{p}.query"), d, d, std, rng),
                    k: linear(&mut ps, &format!("{p}.key"), d, d, std, rng),
                    v: linear(&mut ps, &format!("{p}.value"), d, d, std, rng),
                    o: linear(&mut ps, &format!("{p}.output"), d, d, std, rng),
                    ln2: norm(&mut ps, &format!("{p}.ffn_norm"), d),
                    ff1: linear(&mut ps, &format!("{p}.ffn_in"), d, 4 * d, std, rng),
                    ff2: linear(&mut ps, &format!("{p}.ffn_out"), 4 * d, d, std, rng),
                }
            })
            .collect();
        let out_ln = norm(&mut ps, "final_norm", d);
        Ok(Self {
            config,
            n_items,
            n_users,
            params: ps,
            layout: Layout {
                item,
                position,
                user,
                emb_ln,
                blocks,
                out_ln,
            },
        })
    }

    /// Model whose parameters are taken from `params`, which must match the
    /// names and shapes implied by `config`.
    pub fn from_params(
        config: ModelConfig,
        n_items: usize,
        n_users: usize,
        params: &ParamStore,
    ) -> Result<Self> {
        let mut model = Self::new(config, n_items, n_users, &mut SplitRng::new(0))?;
        model.params.load_values(params)?;
        Ok(model)
    }

    /// Serializes parameters plus the configuration needed to rebuild them.
    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_string(&CheckpointMeta {
            config: self.config.clone(),
            n_items: self.n_items,
            n_users: self.n_users,
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        Ok(checkpoint::encode(&self.params, &meta))
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let (params, meta) = checkpoint::decode(bytes)?;
        let meta: CheckpointMeta = serde_json::from_str(&meta)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        Self::from_params(meta.config, meta.n_items, meta.n_users, &params)
    }

    pub fn mask_id(&self) -> u32 {
        self.n_items as u32 + 1
    }

    pub fn vocab_size(&self) -> usize {
        self.n_items + 2
    }

    pub fn item_embedding(&self) -> ParamId {
        self.layout.item
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.len != self.config.max_len {
            return Err(Error::Shape {
                op: "forward",
                lhs: vec![batch.rows, batch.len],
                rhs: vec![self.config.max_len],
            });
        }
        let mask = self.mask_id();
        for &id in &batch.ids {
            if id > mask {
                return Err(Error::Index {
                    index: id as usize,
                    size: self.vocab_size(),
                });
            }
            if id == mask && self.config.causality == Causality::Ar {
                return Err(Error::contract("mask token in AR input"));
            }
        }
        if self.config.use_user_embedding {
            let users = batch
                .users
                .as_ref()
                .ok_or_else(|| Error::contract("user embeddings need user ids"))?;
            if users.len() != batch.rows {
                return Err(Error::Shape {
                    op: "users",
                    lhs: vec![users.len()],
                    rhs: vec![batch.rows],
                });
            }
            if let Some(&u) = users.iter().find(|&&u| u > self.n_users) {
                return Err(Error::Index {
                    index: u,
                    size: self.n_users + 1,
                });
            }
        }
        Ok(())
    }

    /// Keep-flags for the `[rows*heads, len, len]` score tensor. Padding rows,
    /// which the attention mask leaves empty, keep only their diagonal so the
    /// softmax stays well defined and pads never mix in other positions.
    fn score_keep(&self, batch: &Batch) -> Vec<bool> {
        let c = &self.config;
        let l = batch.len;
        let mut keep = Vec::with_capacity(batch.rows * c.num_heads * l * l);
        for r in 0..batch.rows {
            let padding: Vec<bool> = batch.row(r).iter().map(|&id| id == 0).collect();
            let global = build_attention_mask(c.causality, None, &padding);
            let local = c
                .local_window
                .map(|w| build_attention_mask(c.causality, Some(w), &padding));
            for h in 0..c.num_heads {
                let m = match (&local, c.head_is_local(h)) {
                    (Some(m), true) => m,
                    _ => &global,
                };
                keep.extend_from_slice(m.as_slice());
            }
        }
        for r in 0..batch.rows {
            for (t, _) in batch.row(r).iter().enumerate().filter(|(_, &id)| id == 0) {
                for h in 0..c.num_heads {
                    keep[((r * c.num_heads + h) * l + t) * l + t] = true;
                }
            }
        }
        keep
    }

    /// Runs the encoder on a graph built over `self.params`.
    pub fn encode(
        &self,
        g: &mut Graph,
        batch: &Batch,
        train: bool,
        rng: &mut SplitRng,
    ) -> Result<Encoded> {
        self.check_batch(batch)?;
        let c = &self.config;
        let (rows, len) = (batch.rows, batch.len);
        let lay = &self.layout;
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..rows).flat_map(|_| 0..len).collect();

        let item = g.param(lay.item);
        let pos = g.param(lay.position);
        let e = g.gather(item, &ids)?;
        let p = g.gather(pos, &positions)?;
        let mut x = g.add(e, p)?;
        if let Some(uid) = lay.user {
            let users = batch.users.as_ref().expect("checked");
            let per_pos: Vec<usize> = users
                .iter()
                .flat_map(|&u| std::iter::repeat_n(u, len))
                .collect();
            let ut = g.param(uid);
            let ue = g.gather(ut, &per_pos)?;
            x = g.add(x, ue)?;
        }
        let (eg, eb) = (g.param(lay.emb_ln.0), g.param(lay.emb_ln.1));
        x = g.layer_norm(x, eg, eb)?;
        x = g.dropout(x, c.dropout_hidden, rng, train);

        let keep = self.score_keep(batch);
        let scale = 1.0 / (c.head_dim() as f64).sqrt();
        let mut attention = Vec::with_capacity(lay.blocks.len());
        for blk in &lay.blocks {
            let (g1, b1) = (g.param(blk.ln1.0), g.param(blk.ln1.1));
            let h = g.layer_norm(x, g1, b1)?;
            let q = self.project(g, h, blk.q)?;
            let k = self.project(g, h, blk.k)?;
            let v = self.project(g, h, blk.v)?;
            let q = g.split_heads(q, len, c.num_heads)?;
            let k = g.split_heads(k, len, c.num_heads)?;
            let v = g.split_heads(v, len, c.num_heads)?;
            let s = g.batch_matmul(q, k, true)?;
            let s = g.scale(s, scale);
            let s = g.masked_fill(s, keep.clone())?;
            let a = g.softmax(s);
            attention.push(a);
            let a = g.dropout(a, c.dropout_attention, rng, train);
            let ctx = g.batch_matmul(a, v, false)?;
            let ctx = g.merge_heads(ctx, c.num_heads)?;
            let out = self.project(g, ctx, blk.o)?;
            let out = g.dropout(out, c.dropout_hidden, rng, train);
            x = g.add(x, out)?;

            let (g2, b2) = (g.param(blk.ln2.0), g.param(blk.ln2.1));
            let h = g.layer_norm(x, g2, b2)?;
            let f = self.project(g, h, blk.ff1)?;
            let f = g.gelu(f);
            let f = self.project(g, f, blk.ff2)?;
            let f = g.dropout(f, c.dropout_hidden, rng, train);
            x = g.add(x, f)?;
        }
        let (og, ob) = (g.param(lay.out_ln.0), g.param(lay.out_ln.1));
        let hidden = g.layer_norm(x, og, ob)?;
        Ok(Encoded { hidden, attention })
    }

    fn project(&self, g: &mut Graph, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let w = g.param(w);
        let b = g.param(b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// Tied-head logits `[n, |V|+2]` for the selected hidden rows (all rows when `None`).
    pub fn logits(&self, g: &mut Graph, hidden: Var, rows: Option<&[usize]>) -> Result<Var> {
        let h = match rows {
            Some(r) => g.gather(hidden, r)?,
            None => hidden,
        };
        let item = g.param(self.layout.item);
        g.matmul_ext(h, item, true)
    }

    /// Full forward: logits `[rows, len, |V|+2]` and optionally every
    /// attention record (users tagged by row index unless `batch.users` is set).
    pub fn forward(
        &self,
        batch: &Batch,
        train: bool,
        rng: &mut SplitRng,
        record: bool,
    ) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, batch, train, rng)?;
        let logits = self.logits(&mut g, enc.hidden, None)?;
        let out = g
            .value(logits)
            .clone()
            .reshape(&[batch.rows, batch.len, self.vocab_size()])?;
        let records = if record {
            self.attention_records(&g, &enc, batch)
        } else {
            Vec::new()
        };
        Ok((out, records))
    }

    /// Extracts per-head attention over the non-pad positions of each row.
    pub fn attention_records(
        &self,
        g: &Graph,
        enc: &Encoded,
        batch: &Batch,
    ) -> Vec<AttentionRecord> {
        let heads = self.config.num_heads;
        let len = batch.len;
        let mut out = Vec::new();
        for (layer, &a) in enc.attention.iter().enumerate() {
            let probs = g.value(a).data();
            for r in 0..batch.rows {
                let start = batch.row(r).iter().take_while(|&&id| id == 0).count();
                let n = len - start;
                if n == 0 {
                    continue;
                }
                let user = batch.users.as_ref().map_or(r, |u| u[r]);
                for h in 0..heads {
                    let base = (r * heads + h) * len * len;
                    let m = Tensor::from_fn(&[n, n], |i| {
                        probs[base + (start + i / n) * len + start + i % n]
                    });
                    out.push(AttentionRecord {
                        layer,
                        head: h,
                        user,
                        causality: self.config.causality,
                        matrix: m,
                    });
                }
            }
        }
        out
    }

    /// Input row used to score the next item after `history`.
    pub fn inference_input(&self, history: &[u32]) -> Vec<u32> {
        let len = self.config.max_len;
        match self.config.causality {
            Causality::Ar => left_pad(history, len),
            Causality::Ae => {
                let mut row = left_pad(history, len - 1);
                row.push(self.mask_id());
                row
            }
        }
    }

    /// Next-item logits `[histories.len(), |V|+2]` read at the last position.
    pub fn score_next(&self, histories: &[&[u32]], users: Option<&[usize]>) -> Result<Tensor> {
        if histories.iter().any(|h| h.is_empty()) {
            return Err(Error::contract("cannot score an empty history"));
        }
        let len = self.config.max_len;
        let rows: Vec<Vec<u32>> = histories.iter().map(|h| self.inference_input(h)).collect();
        let batch = Batch::from_rows(&rows, len, users.map(<[usize]>::to_vec))?;
        let mut g = Graph::new(&self.params);
        let mut rng = SplitRng::new(0);
        let enc = self.encode(&mut g, &batch, false, &mut rng)?;
        let last: Vec<usize> = (0..batch.rows).map(|r| r * len + len - 1).collect();
        let logits = self.logits(&mut g, enc.hidden, Some(&last))?;
        Ok(g.value(logits).clone())
    }
}

/// Stochastic shared embeddings on user ids: each id is independently
/// replaced by a uniform random user in `1..=n_users` with probability `p`
/// during training.
pub fn apply_sse(
    user_ids: &[usize],
    p: f64,
    n_users: usize,
    rng: &mut SplitRng,
    train: bool,
) -> Vec<usize> {
    if !train || p <= 0.0 || n_users == 0 {
        return user_ids.to_vec();
    }
    user_ids
        .iter()
        .map(|&u| {
            if rng.bernoulli(p) {
                1 + rng.index(n_users)
            } else {
                u
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(causality: Causality) -> ModelConfig {
        ModelConfig {
            hidden_size: 8,
            num_layers: 2,
            num_heads: 2,
            max_len: 6,
            dropout_hidden: 0.0,
            dropout_attention: 0.0,
            ..ModelConfig::small(causality, 6)
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::new(tiny(Causality::Ae), 11, 4, &mut SplitRng::new(2)).unwrap();
        let back = Model::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back.config, m.config);
        let a: Vec<&Tensor> = m.params.iter().map(|p| &p.value).collect();
        let b: Vec<&Tensor> = back.params.iter().map(|p| &p.value).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_count_matches_store() {
        let mut rng = SplitRng::new(1);
        for (users, layers, d) in [(false, 1, 8), (true, 2, 12), (true, 3, 4)] {
            let cfg = ModelConfig {
                hidden_size: d,
                num_layers: layers,
                num_heads: 2,
                use_user_embedding: users,
                ..tiny(Causality::Ar)
            };
            let m = Model::new(cfg.clone(), 17, 9, &mut rng).unwrap();
            assert_eq!(m.params.num_scalars(), cfg.parameter_count(17, 9));
        }
    }

    #[test]
    fn left_padding_and_inference_input() {
        assert_eq!(left_pad(&[1, 2, 3], 5), vec![0, 0, 1, 2, 3]);
        assert_eq!(left_pad(&[1, 2, 3, 4, 5, 6], 4), vec![3, 4, 5, 6]);
        let mut rng = SplitRng::new(0);
        let cfg = ModelConfig {
            max_len: 5,
            ..tiny(Causality::Ae)
        };
        let m = Model::new(cfg, 9, 0, &mut rng).unwrap();
        assert_eq!(m.inference_input(&[1, 2, 3]), vec![0, 1, 2, 3, 10]);
        assert_eq!(m.inference_input(&[1, 2, 3, 4, 5]), vec![2, 3, 4, 5, 10]);
        assert!(m.score_next(&[&[]], None).is_err());
    }

    #[test]
    fn all_padding_rows_are_finite() {
        let mut rng = SplitRng::new(2);
        let m = Model::new(tiny(Causality::Ae), 5, 0, &mut rng).unwrap();
        let batch = Batch::from_rows(&[vec![0; 6], vec![0, 0, 0, 1, 2, 6]], 6, None).unwrap();
        let (logits, _) = m.forward(&batch, false, &mut rng, false).unwrap();
        assert!(logits.is_finite());
    }

    #[test]
    fn out_of_range_ids_rejected() {
        let mut rng = SplitRng::new(2);
        let m = Model::new(tiny(Causality::Ar), 5, 0, &mut rng).unwrap();
        let bad = Batch::from_rows(&[vec![0, 0, 0, 1, 2, 7]], 6, None).unwrap();
        assert!(matches!(
            m.forward(&bad, false, &mut rng, false),
            Err(Error::Index { .. })
        ));
        let masked = Batch::from_rows(&[vec![0, 0, 0, 1, 2, 6]], 6, None).unwrap();
        assert!(matches!(
            m.forward(&masked, false, &mut rng, false),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ar_future_perturbation_is_invisible() {
        let mut rng = SplitRng::new(3);
        let m = Model::new(tiny(Causality::Ar), 9, 0, &mut rng).unwrap();
        let base = vec![0, 3, 1, 4, 1, 5];
        let (a, _) = m
            .forward(
                &Batch::from_rows(std::slice::from_ref(&base), 6, None).unwrap(),
                false,
                &mut rng,
                false,
            )
            .unwrap();
        let mut pert = base;
        pert[4] = 9;
        let (b, _) = m
            .forward(
                &Batch::from_rows(&[pert], 6, None).unwrap(),
                false,
                &mut rng,
                false,
            )
            .unwrap();
        let v = m.vocab_size();
        assert_eq!(&a.data()[..4 * v], &b.data()[..4 * v]);
        assert_ne!(&a.data()[4 * v..], &b.data()[4 * v..]);
    }

    #[test]
    fn attention_records_are_row_stochastic() {
        let mut rng = SplitRng::new(4);
        let m = Model::new(tiny(Causality::Ar), 9, 0, &mut rng).unwrap();
        let batch = Batch::from_rows(&[vec![0, 0, 2, 3, 4, 5]], 6, None).unwrap();
        let (_, recs) = m.forward(&batch, false, &mut rng, true).unwrap();
        assert_eq!(recs.len(), 4);
        for r in &recs {
            assert_eq!(r.matrix.shape(), &[4, 4]);
            for i in 0..4 {
                let row = r.matrix.row(i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[i] > 0.0);
                assert!(row[i + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn sse_identity_and_full_replacement() {
        let mut rng = SplitRng::new(5);
        let ids: Vec<usize> = (1..=50).collect();
        assert_eq!(apply_sse(&ids, 0.0, 50, &mut rng, true), ids);
        assert_eq!(apply_sse(&ids, 1.0, 50, &mut rng, false), ids);
        let big: Vec<usize> = vec![1; 10_000];
        let out = apply_sse(&big, 0.5, 1_000_000, &mut rng, true);
        let frac = out.iter().filter(|&&u| u != 1).count() as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }
}
