//! Graph builders shared by training, inference and gradient checking.

use std::collections::HashMap;
use std::rc::Rc;

use super::config::{ModelConfig, Variant};
use super::params::{embedding_name, DIF_EMBEDDING, POSITION_EMBEDDING};
use crate::autodiff::{Graph, NodeId, ParameterSet};
use crate::error::{Error, Result};
use crate::features::{BehaviorRecord, Field, Request};

/// One (request, candidate, position) cell to score. `position` is 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairQuery {
    pub request: usize,
    pub candidate: usize,
    pub position: u32,
}

pub(crate) struct Builder<'a> {
    pub g: &'a mut Graph,
    pub cfg: &'a ModelConfig,
    pub params: &'a ParameterSet,
    pub variant: Variant,
}

fn ids<const N: usize>(rows: impl Iterator<Item = [u32; N]>, slot: usize) -> Vec<usize> {
    rows.map(|r| r[slot] as usize).collect()
}

impl Builder<'_> {
    pub fn p(&mut self, name: &str) -> Result<NodeId> {
        let t = self.params.get(name)?;
        Ok(self.g.param(name, t))
    }

    fn embed(&mut self, field: Field, ids: Vec<usize>) -> Result<NodeId> {
        let table = self.p(&embedding_name(field))?;
        self.g.gather(table, ids).map_err(|e| annotate(e, field.name()))
    }

    /// `Concat(E(u_1), E(u_2))` per row.
    pub fn users(&mut self, rows: &[[u32; 2]]) -> Result<NodeId> {
        let a = self.embed(Field::UserId, ids(rows.iter().copied(), 0))?;
        let b = self.embed(Field::Segment, ids(rows.iter().copied(), 1))?;
        self.g.concat(&[a, b])
    }

    /// `Concat(E(c_1), .., E(c_4))` per row.
    pub fn contexts(&mut self, rows: &[[u32; 4]]) -> Result<NodeId> {
        let mut parts = Vec::with_capacity(4);
        for (slot, f) in Field::CONTEXT.iter().enumerate() {
            parts.push(self.embed(*f, ids(rows.iter().copied(), slot))?);
        }
        self.g.concat(&parts)
    }

    pub fn items(&mut self, rows: &[[u32; 2]]) -> Result<NodeId> {
        let a = self.embed(Field::ItemId, ids(rows.iter().copied(), 0))?;
        let b = self.embed(Field::Category, ids(rows.iter().copied(), 1))?;
        self.g.concat(&[a, b])
    }

    /// Behavior embeddings: item fields, click-time context fields, time bucket.
    pub fn behaviors(&mut self, recs: &[BehaviorRecord]) -> Result<NodeId> {
        let item = self.items(&recs.iter().map(|r| r.item).collect::<Vec<_>>())?;
        let ctx = self.contexts(&recs.iter().map(|r| r.context).collect::<Vec<_>>())?;
        let table = self.p(DIF_EMBEDDING)?;
        let dif = self.g.gather(table, recs.iter().map(|r| r.dif_bucket as usize).collect())?;
        self.g.concat(&[item, ctx, dif])
    }

    /// `E(k)` rows for 1-based positions.
    fn check_positions(&self, ks: &[u32]) -> Result<()> {
        match ks.iter().find(|&&k| k == 0 || k as usize > self.cfg.positions) {
            Some(bad) => Err(Error::usage(format!("position {bad} outside 1..={}", self.cfg.positions))),
            None => Ok(()),
        }
    }

    pub fn positions(&mut self, ks: &[u32]) -> Result<NodeId> {
        self.check_positions(ks)?;
        let table = self.p(POSITION_EMBEDDING)?;
        self.g.gather(table, ks.iter().map(|&k| k as usize - 1).collect())
    }

    /// Rows `start..start + len` of a weight matrix.
    fn weight_rows(&mut self, w: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.g.gather(w, (start..start + len).collect())
    }

    /// `r_item = MLP(Concat(u, c, i_j))` with ReLU after every layer.
    ///
    /// The first layer is evaluated as `Concat(u, c) W_uc + i_j W_i`, so the
    /// user and context part is computed once per entry of `users` and
    /// shared by every item whose `owner` points at it.
    pub fn base(&mut self, users: &[[u32; 2]], contexts: &[[u32; 4]], owner: &[usize], items: &[[u32; 2]]) -> Result<NodeId> {
        let u = self.users(users)?;
        let c = self.contexts(contexts)?;
        let uc = self.g.concat(&[u, c])?;
        let i = self.items(items)?;
        let uc_dim = self.cfg.user_dim() + self.cfg.context_dim();
        let w0 = self.p("base.w0")?;
        let b0 = self.p("base.b0")?;
        let w_uc = self.weight_rows(w0, 0, uc_dim)?;
        let w_i = self.weight_rows(w0, uc_dim, self.cfg.item_dim())?;
        let shared = self.g.matmul(uc, w_uc)?;
        let shared = self.g.gather(shared, owner.to_vec())?;
        let own = self.g.matmul(i, w_i)?;
        let h = self.g.add(shared, own)?;
        let h = self.g.add_bias(h, b0)?;
        let mut x = self.g.relu(h)?;
        for l in 1..self.cfg.mlp_hidden.len() {
            let w = self.p(&format!("base.w{l}"))?;
            let b = self.p(&format!("base.b{l}"))?;
            let h = self.g.affine(x, w, b)?;
            x = self.g.relu(h)?;
        }
        Ok(x)
    }

    /// Attention pooling within segments:
    /// `a_l = ReLU(Concat(b_l, q_l) W_a + b_a) W_b + b_b`,
    /// `out_g = Σ_l softmax_g(a)_l b_l`. Empty segments pool to zero.
    pub fn attention_pool(
        &mut self,
        prefix: &str,
        records: NodeId,
        query: NodeId,
        offsets: Rc<Vec<usize>>,
    ) -> Result<NodeId> {
        let wa = self.p(&format!("{prefix}.w_a"))?;
        let ba = self.p(&format!("{prefix}.b_a"))?;
        let wb = self.p(&format!("{prefix}.w_b"))?;
        let bb = self.p(&format!("{prefix}.b_b"))?;
        let x = self.g.concat(&[records, query])?;
        let h = self.g.affine(x, wa, ba)?;
        let h = self.g.relu(h)?;
        let logits = self.g.affine(h, wb, bb)?;
        let weights = self.g.segment_softmax(logits, offsets.clone())?;
        self.g.segment_weighted_sum(weights, records, offsets)
    }

    /// `v_k = ReLU(Concat(E(k), c, b_k [, i_j]) W_v + b_v)`.
    pub fn interaction(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let wv = self.p("pos.w_v")?;
        let bv = self.p("pos.b_v")?;
        let x = self.g.concat(parts)?;
        let h = self.g.affine(x, wv, bv)?;
        self.g.relu(h)
    }

    /// Stack of transformer blocks over contiguous blocks of K rows.
    pub fn transformer(&mut self, mut x: NodeId) -> Result<NodeId> {
        let block = self.cfg.positions;
        let dk = self.cfg.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        for l in 0..self.cfg.layers {
            let wq = self.p(&format!("tf{l}.wq"))?;
            let wk = self.p(&format!("tf{l}.wk"))?;
            let wv = self.p(&format!("tf{l}.wv"))?;
            let wo = self.p(&format!("tf{l}.wo"))?;
            let q = self.g.matmul(x, wq)?;
            let k = self.g.matmul(x, wk)?;
            let v = self.g.matmul(x, wv)?;
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for h in 0..self.cfg.heads {
                let qh = self.g.slice_cols(q, h * dk, dk)?;
                let kh = self.g.slice_cols(k, h * dk, dk)?;
                let vh = self.g.slice_cols(v, h * dk, dk)?;
                let scores = self.g.block_scores(qh, kh, block, scale)?;
                let attn = self.g.softmax(scores)?;
                heads.push(self.g.block_apply(attn, vh, block)?);
            }
            let cat = self.g.concat(&heads)?;
            let mh = self.g.matmul(cat, wo)?;
            let res = self.g.add(x, mh)?;
            let (g1, b1) = (self.p(&format!("tf{l}.ln1.gain"))?, self.p(&format!("tf{l}.ln1.bias"))?);
            let x1 = self.g.layer_norm(res, g1, b1)?;
            let (fw1, fb1) = (self.p(&format!("tf{l}.ff.w1"))?, self.p(&format!("tf{l}.ff.b1"))?);
            let (fw2, fb2) = (self.p(&format!("tf{l}.ff.w2"))?, self.p(&format!("tf{l}.ff.b2"))?);
            let f = self.g.affine(x1, fw1, fb1)?;
            let f = self.g.relu(f)?;
            let f = self.g.affine(f, fw2, fb2)?;
            let res2 = self.g.add(x1, f)?;
            let (g2, b2) = (self.p(&format!("tf{l}.ln2.gain"))?, self.p(&format!("tf{l}.ln2.bias"))?);
            x = self.g.layer_norm(res2, g2, b2)?;
        }
        Ok(x)
    }

    /// `σ(ReLU(Concat(parts) W_1 + b_1) W_2 + b_2)`.
    pub fn combination(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let w1 = self.p("comb.w1")?;
        let b1 = self.p("comb.b1")?;
        let w2 = self.p("comb.w2")?;
        let b2 = self.p("comb.b2")?;
        let x = self.g.concat(parts)?;
        let h = self.g.affine(x, w1, b1)?;
        let h = self.g.relu(h)?;
        let logit = self.g.affine(h, w2, b2)?;
        self.g.sigmoid(logit)
    }

    /// First-layer pre-activations of the DPIN head, one block per input:
    /// `r_item W_1^item`, `r_pos W_1^pos` and `E(k) W_1^E`.
    pub fn combination_blocks(&mut self, r_item: NodeId, r_pos: NodeId, ek: NodeId) -> Result<[NodeId; 3]> {
        let (ri, dm, d) = (self.cfg.item_repr_dim(), self.cfg.d_model, self.cfg.embedding_dim);
        let w1 = self.p("comb.w1")?;
        let wi = self.weight_rows(w1, 0, ri)?;
        let wp = self.weight_rows(w1, ri, dm)?;
        let we = self.weight_rows(w1, ri + dm, d)?;
        Ok([self.g.matmul(r_item, wi)?, self.g.matmul(r_pos, wp)?, self.g.matmul(ek, we)?])
    }

    /// `σ(ReLU(a + b + e + b_1) W_2 + b_2)` on row-aligned block outputs.
    pub fn combination_finish(&mut self, a: NodeId, b: NodeId, e: NodeId) -> Result<NodeId> {
        let b1 = self.p("comb.b1")?;
        let w2 = self.p("comb.w2")?;
        let b2 = self.p("comb.b2")?;
        let h = self.g.add(a, b)?;
        let h = self.g.add(h, e)?;
        let h = self.g.add_bias(h, b1)?;
        let h = self.g.relu(h)?;
        let logit = self.g.affine(h, w2, b2)?;
        self.g.sigmoid(logit)
    }

    /// Linear head of the DIN family: `h · w + b`.
    pub fn din_logit(&mut self, h: NodeId) -> Result<NodeId> {
        let w = self.p("head.w")?;
        let b = self.p("head.b")?;
        self.g.affine(h, w, b)
    }

    /// Per-position scalar column from a `[K × 1]` table.
    pub fn position_scalar(&mut self, name: &str, ks: &[u32]) -> Result<NodeId> {
        self.check_positions(ks)?;
        let table = self.p(name)?;
        self.g.gather(table, ks.iter().map(|&k| k as usize - 1).collect())
    }

    /// Candidate-queried interest over the position-agnostic recent
    /// sequence, one row per candidate row.
    pub fn din_interest(&mut self, requests: &[&Request], cand_rows: &[(usize, usize)], item_emb: NodeId) -> Result<NodeId> {
        let l = self.cfg.seq_len;
        let mut req_start = HashMap::new();
        let mut flat: Vec<BehaviorRecord> = Vec::new();
        for &(r, _) in cand_rows {
            req_start.entry(r).or_insert_with(|| {
                let start = flat.len();
                flat.extend(requests[r].recent.iter().take(l));
                start
            });
        }
        let rec_emb = self.behaviors(&flat)?;
        let mut rec_idx = Vec::new();
        let mut query_idx = Vec::new();
        let mut offsets = vec![0];
        for (row, &(r, _)) in cand_rows.iter().enumerate() {
            let start = req_start[&r];
            let n = requests[r].recent.len().min(l);
            rec_idx.extend(start..start + n);
            query_idx.extend(std::iter::repeat_n(row, n));
            offsets.push(rec_idx.len());
        }
        let recs = self.g.gather(rec_emb, rec_idx)?;
        let query = self.g.gather(item_emb, query_idx)?;
        self.attention_pool("din.att", recs, query, Rc::new(offsets))
    }

    /// Position-wise sequences of the given requests, flattened in
    /// (request, position) order, with segment offsets per (request, position).
    fn position_records(&self, requests: &[&Request], order: &[usize]) -> (Vec<BehaviorRecord>, Vec<usize>) {
        let (k_max, l) = (self.cfg.positions, self.cfg.seq_len);
        let mut flat = Vec::new();
        let mut offsets = vec![0];
        for &r in order {
            let b = &requests[r].behaviors;
            for k in 1..=k_max {
                if k <= b.positions() {
                    flat.extend(b.at(k).iter().take(l));
                }
                offsets.push(flat.len());
            }
        }
        (flat, offsets)
    }

    /// `r_pos` rows for each request in `order`, `K` rows per request.
    pub fn position_module(&mut self, requests: &[&Request], order: &[usize]) -> Result<NodeId> {
        let k_max = self.cfg.positions;
        let (flat, offsets) = self.position_records(requests, order);
        let ctx = self.contexts(&order.iter().map(|&r| requests[r].context).collect::<Vec<_>>())?;
        let rec_emb = self.behaviors(&flat)?;
        let mut rec_owner = Vec::with_capacity(flat.len());
        for (grp, w) in offsets.windows(2).enumerate() {
            rec_owner.extend(std::iter::repeat_n(grp / k_max, w[1] - w[0]));
        }
        let rec_ctx = self.g.gather(ctx, rec_owner)?;
        let pooled = self.attention_pool("pos.att", rec_emb, rec_ctx, Rc::new(offsets))?;
        let group_ctx = self.g.gather(ctx, (0..order.len() * k_max).map(|i| i / k_max).collect())?;
        let ks: Vec<u32> = (0..order.len() * k_max).map(|i| (i % k_max) as u32 + 1).collect();
        let ek = self.positions(&ks)?;
        let v = self.interaction(&[ek, group_ctx, pooled])?;
        if self.variant.uses_transformer() {
            self.transformer(v)
        } else {
            Ok(v)
        }
    }

    /// Item-aware position module: one K-row block per candidate row, with
    /// the candidate's item embedding appended to the attention query and to
    /// the interaction input.
    fn item_action_module(
        &mut self,
        requests: &[&Request],
        cand_rows: &[(usize, usize)],
        item_emb: NodeId,
    ) -> Result<NodeId> {
        let k_max = self.cfg.positions;
        let mut req_order = Vec::new();
        let mut req_slot = HashMap::new();
        for &(r, _) in cand_rows {
            req_slot.entry(r).or_insert_with(|| {
                req_order.push(r);
                req_order.len() - 1
            });
        }
        let (flat, offsets) = self.position_records(requests, &req_order);
        let rec_emb = self.behaviors(&flat)?;
        let ctx = self.contexts(&req_order.iter().map(|&r| requests[r].context).collect::<Vec<_>>())?;

        let mut rec_idx = Vec::new();
        let mut rec_ctx = Vec::new();
        let mut rec_item = Vec::new();
        let mut group_offsets = vec![0];
        for (row, &(r, _)) in cand_rows.iter().enumerate() {
            let slot = req_slot[&r];
            for k in 0..k_max {
                let (s, e) = (offsets[slot * k_max + k], offsets[slot * k_max + k + 1]);
                rec_idx.extend(s..e);
                rec_ctx.extend(std::iter::repeat_n(slot, e - s));
                rec_item.extend(std::iter::repeat_n(row, e - s));
                group_offsets.push(rec_idx.len());
            }
        }
        let recs = self.g.gather(rec_emb, rec_idx)?;
        let qc = self.g.gather(ctx, rec_ctx)?;
        let qi = self.g.gather(item_emb, rec_item)?;
        let query = self.g.concat(&[qc, qi])?;
        let pooled = self.attention_pool("pos.att", recs, query, Rc::new(group_offsets))?;

        let groups = cand_rows.len() * k_max;
        let group_ctx = self.g.gather(ctx, (0..groups).map(|i| req_slot[&cand_rows[i / k_max].0]).collect())?;
        let group_item = self.g.gather(item_emb, (0..groups).map(|i| i / k_max).collect())?;
        let ks: Vec<u32> = (0..groups).map(|i| (i % k_max) as u32 + 1).collect();
        let ek = self.positions(&ks)?;
        let v = self.interaction(&[ek, group_ctx, pooled, group_item])?;
        self.transformer(v)
    }

    /// Probability column `[pairs × 1]` for every queried cell.
    pub fn pair_probabilities(&mut self, requests: &[&Request], pairs: &[PairQuery]) -> Result<NodeId> {
        if pairs.is_empty() {
            return Err(Error::usage("nothing to score"));
        }
        let mut cand_rows: Vec<(usize, usize)> = Vec::new();
        let mut cand_index: HashMap<(usize, usize), usize> = HashMap::new();
        for p in pairs {
            let r = requests
                .get(p.request)
                .ok_or_else(|| Error::usage(format!("pair refers to missing request {}", p.request)))?;
            if p.candidate >= r.candidates.len() {
                return Err(Error::usage(format!(
                    "request {} has {} candidates, pair asks for #{}",
                    r.request_id,
                    r.candidates.len(),
                    p.candidate
                )));
            }
            cand_index.entry((p.request, p.candidate)).or_insert_with(|| {
                cand_rows.push((p.request, p.candidate));
                cand_rows.len() - 1
            });
        }
        let ks: Vec<u32> = pairs.iter().map(|p| p.position).collect();
        self.check_positions(&ks)?;
        let mut order = Vec::new();
        let mut slot = HashMap::new();
        for &(r, _) in &cand_rows {
            slot.entry(r).or_insert_with(|| {
                order.push(r);
                order.len() - 1
            });
        }
        let users: Vec<[u32; 2]> = order.iter().map(|&r| requests[r].user).collect();
        let ctxs: Vec<[u32; 4]> = order.iter().map(|&r| requests[r].context).collect();
        let owner: Vec<usize> = cand_rows.iter().map(|(r, _)| slot[r]).collect();
        let items: Vec<[u32; 2]> = cand_rows.iter().map(|&(r, c)| requests[r].candidates[c].item).collect();
        let r_item = self.base(&users, &ctxs, &owner, &items)?;
        let pair_cand: Vec<usize> = pairs.iter().map(|p| cand_index[&(p.request, p.candidate)]).collect();

        if self.variant.is_din_family() {
            let item_emb = self.items(&items)?;
            let interest = self.din_interest(requests, &cand_rows, item_emb)?;
            let h = self.g.concat(&[r_item, interest])?;
            let hp = self.g.gather(h, pair_cand)?;
            return match self.variant {
                Variant::Din => {
                    let logit = self.din_logit(hp)?;
                    self.g.sigmoid(logit)
                }
                Variant::DinPosInWide | Variant::DinActualPosInWide => {
                    let logit = self.din_logit(hp)?;
                    let wide = self.position_scalar("wide.position", &ks)?;
                    let total = self.g.add(logit, wide)?;
                    self.g.sigmoid(total)
                }
                Variant::DinPal => {
                    let logit = self.din_logit(hp)?;
                    let click = self.g.sigmoid(logit)?;
                    let seen_logit = self.position_scalar("pal.position", &ks)?;
                    let seen = self.g.sigmoid(seen_logit)?;
                    self.g.mul(seen, click)
                }
                Variant::DinCombination => {
                    let ek = self.positions(&ks)?;
                    self.combination(&[hp, ek])
                }
                _ => unreachable!("DIN family"),
            };
        }

        let k_max = self.cfg.positions;
        let (r_pos, pos_rows): (NodeId, Vec<usize>) = if self.variant == Variant::DpinItemAction {
            let item_emb = self.items(&items)?;
            let r_pos = self.item_action_module(requests, &cand_rows, item_emb)?;
            let rows = pairs.iter().zip(&pair_cand).map(|(p, &c)| c * k_max + p.position as usize - 1).collect();
            (r_pos, rows)
        } else {
            let r_pos = self.position_module(requests, &order)?;
            let rows = pairs.iter().map(|p| slot[&p.request] * k_max + p.position as usize - 1).collect();
            (r_pos, rows)
        };
        let all_k: Vec<u32> = (1..=k_max as u32).collect();
        let ek = self.positions(&all_k)?;
        let [a, b, e] = self.combination_blocks(r_item, r_pos, ek)?;
        let a = self.g.gather(a, pair_cand)?;
        let b = self.g.gather(b, pos_rows)?;
        let e = self.g.gather(e, ks.iter().map(|&k| k as usize - 1).collect())?;
        self.combination_finish(a, b, e)
    }
}

fn annotate(e: Error, field: &str) -> Error {
    match e {
        Error::Usage(m) => Error::Usage(format!("{field}: {m}")),
        other => other,
    }
}
