//! Position-aware CTR models: the base module, the position-wise
//! interaction module, the combination head and the compared variants.

mod config;
mod forward;
mod params;

#[cfg(test)]
mod tests;

pub use config::{ModelConfig, Variant};
pub use forward::PairQuery;
pub use params::{embedding_name, init_parameters, parameter_specs, Init, DIF_EMBEDDING, POSITION_EMBEDDING};

pub(crate) use forward::Builder;

use crate::autodiff::{gradient_check, GradCheckReport, Graph, NodeId, ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::features::{BehaviorRecord, Request};

/// A variant with its configuration and weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub variant: Variant,
    pub params: ParameterSet,
}

/// `J × K` click probabilities; row `j` is a candidate, column `k - 1` a position.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMatrix {
    pub candidates: usize,
    pub positions: usize,
    pub values: Vec<f64>,
}

impl PredictionMatrix {
    /// CTR of candidate `j` (0-based) at position `k` (1-based).
    pub fn ctr(&self, j: usize, k: usize) -> f64 {
        assert!(k >= 1 && k <= self.positions && j < self.candidates, "cell ({j}, {k}) out of range");
        self.values[j * self.positions + k - 1]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.positions..(j + 1) * self.positions]
    }
}

pub fn build_model(config: &ModelConfig, variant: Variant, seed: u64) -> Result<Model> {
    let params = init_parameters(config, variant, seed)?;
    Ok(Model { config: config.clone(), variant, params })
}

/// Candidates per graph when DPIN+ItemAction fills a matrix.
const ITEM_ACTION_CHUNK: usize = 8;

fn row_vectors(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

impl Model {
    /// Wraps existing weights after checking names and shapes against the variant.
    pub fn from_parts(config: ModelConfig, variant: Variant, params: ParameterSet) -> Result<Model> {
        config.validate()?;
        let specs = parameter_specs(&config, variant);
        if specs.len() != params.len() {
            return Err(Error::usage(format!(
                "{} expects {} tensors, found {}",
                variant,
                specs.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &specs {
            let t = params
                .get(name)
                .map_err(|_| Error::usage(format!("{variant} needs tensor '{name}', which is missing")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::usage(format!("tensor '{name}' has shape {:?}, expected {:?}", t.shape(), shape)));
            }
        }
        if !params.all_finite() {
            return Err(Error::numeric("parameters contain non-finite values"));
        }
        Ok(Model { config, variant, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn eval(&self, f: impl FnOnce(&mut Builder<'_>) -> Result<NodeId>) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = {
            let mut b = Builder { g: &mut g, cfg: &self.config, params: &self.params, variant: self.variant };
            f(&mut b)?
        };
        Ok(g.value(out).clone())
    }

    fn constant_row(b: &mut Builder<'_>, v: &[f64]) -> NodeId {
        b.g.constant(Tensor::new(vec![1, v.len()], v.to_vec()).expect("row shape"))
    }

    /// `r_item` for each candidate item under one user and context.
    pub fn base_module_forward(&self, user: [u32; 2], context: [u32; 4], items: &[[u32; 2]]) -> Result<Vec<Vec<f64>>> {
        if items.is_empty() {
            return Err(Error::usage("base module needs at least one candidate"));
        }
        let t = self.eval(|b| b.base(&[user], &[context], &vec![0; items.len()], items))?;
        Ok(row_vectors(&t))
    }

    pub fn behavior_embedding(&self, record: &BehaviorRecord) -> Result<Vec<f64>> {
        Ok(self.eval(|b| b.behaviors(std::slice::from_ref(record)))?.into_data())
    }

    pub fn context_vector(&self, context: [u32; 4]) -> Result<Vec<f64>> {
        Ok(self.eval(|b| b.contexts(&[context]))?.into_data())
    }

    pub fn item_vector(&self, item: [u32; 2]) -> Result<Vec<f64>> {
        Ok(self.eval(|b| b.items(&[item]))?.into_data())
    }

    fn attention_prefix(&self) -> &'static str {
        if self.variant.is_dpin_family() {
            "pos.att"
        } else {
            "din.att"
        }
    }

    /// Attention pooling of behavior embeddings, skipping masked-out slots.
    /// `query` is the context vector for the position-wise variants, the
    /// context followed by the item vector for DPIN+ItemAction, and the
    /// candidate item vector for the DIN family.
    pub fn interest_aggregation(&self, embeddings: &[Vec<f64>], mask: &[bool], query: &[f64]) -> Result<Vec<f64>> {
        if embeddings.len() != mask.len() {
            return Err(Error::usage(format!("{} embeddings but {} mask entries", embeddings.len(), mask.len())));
        }
        if embeddings.len() > self.config.seq_len {
            return Err(Error::usage(format!("sequence of {} exceeds L = {}", embeddings.len(), self.config.seq_len)));
        }
        let dim = self.config.behavior_dim();
        let kept: Vec<&Vec<f64>> = embeddings.iter().zip(mask).filter(|(_, &m)| m).map(|(e, _)| e).collect();
        if let Some(bad) = kept.iter().find(|e| e.len() != dim) {
            return Err(Error::usage(format!("behavior embedding of width {}, expected {dim}", bad.len())));
        }
        let n = kept.len();
        let flat: Vec<f64> = kept.into_iter().flatten().copied().collect();
        let prefix = self.attention_prefix();
        let t = self.eval(|b| {
            let recs = b.g.constant(Tensor::new(vec![n, dim], flat)?);
            let q = Self::constant_row(b, query);
            let qs = b.g.gather(q, vec![0; n])?;
            b.attention_pool(prefix, recs, qs, std::rc::Rc::new(vec![0, n]))
        })?;
        Ok(t.into_data())
    }

    /// `v_k` from position `k`, context vector and pooled interest. `item`
    /// is required by DPIN+ItemAction and rejected otherwise.
    pub fn position_interaction(&self, k: u32, context: &[f64], b_k: &[f64], item: Option<&[f64]>) -> Result<Vec<f64>> {
        if !self.variant.is_dpin_family() {
            return Err(Error::usage(format!("{} has no position-wise interaction module", self.variant)));
        }
        if item.is_some() != (self.variant == Variant::DpinItemAction) {
            return Err(Error::usage("item vector must be given exactly for DPIN+ItemAction"));
        }
        let t = self.eval(|b| {
            let ek = b.positions(&[k])?;
            let c = Self::constant_row(b, context);
            let bk = Self::constant_row(b, b_k);
            let mut parts = vec![ek, c, bk];
            if let Some(i) = item {
                parts.push(Self::constant_row(b, i));
            }
            b.interaction(&parts)
        })?;
        Ok(t.into_data())
    }

    /// Runs the transformer stack over exactly `K` rows of width `d_model`.
    pub fn transformer_encode(&self, v: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if !self.variant.uses_transformer() {
            return Err(Error::usage(format!("{} has no transformer", self.variant)));
        }
        let (k, dm) = (self.config.positions, self.config.d_model);
        if v.len() != k {
            return Err(Error::usage(format!("transformer expects {k} rows, got {}", v.len())));
        }
        if let Some(bad) = v.iter().find(|r| r.len() != dm) {
            return Err(Error::usage(format!("transformer row of width {}, expected {dm}", bad.len())));
        }
        let flat: Vec<f64> = v.iter().flatten().copied().collect();
        let t = self.eval(|b| {
            let x = b.g.constant(Tensor::new(vec![k, dm], flat)?);
            b.transformer(x)
        })?;
        Ok(row_vectors(&t))
    }

    /// `r_pos_1..r_pos_K` of one request for DPIN and DPIN−Transformer.
    pub fn interaction_module(&self, request: &Request) -> Result<Vec<Vec<f64>>> {
        if !matches!(self.variant, Variant::Dpin | Variant::DpinNoTransformer) {
            return Err(Error::usage(format!("{} has no item-free interaction module", self.variant)));
        }
        let t = self.eval(|b| b.position_module(&[request], &[0]))?;
        Ok(row_vectors(&t))
    }

    /// Combination head on one `(r_item, r_pos, k)` triple.
    pub fn combination_forward(&self, r_item: &[f64], r_pos: &[f64], k: u32) -> Result<f64> {
        if !self.variant.is_dpin_family() {
            return Err(Error::usage(format!("{} has no (r_item, r_pos) combination head", self.variant)));
        }
        if r_item.len() != self.config.item_repr_dim() || r_pos.len() != self.config.d_model {
            return Err(Error::usage(format!(
                "combination inputs of width {}/{}, expected {}/{}",
                r_item.len(),
                r_pos.len(),
                self.config.item_repr_dim(),
                self.config.d_model
            )));
        }
        let t = self.eval(|b| {
            let ri = Self::constant_row(b, r_item);
            let rp = Self::constant_row(b, r_pos);
            let ek = b.positions(&[k])?;
            let [x, y, z] = b.combination_blocks(ri, rp, ek)?;
            b.combination_finish(x, y, z)
        })?;
        Ok(t.data()[0])
    }

    /// Probabilities for arbitrary cells across several requests.
    pub fn predict_pairs(&self, requests: &[&Request], pairs: &[PairQuery]) -> Result<Vec<f64>> {
        Ok(self.eval(|b| b.pair_probabilities(requests, pairs))?.into_data())
    }

    /// The full `J × K` matrix of one request. DIN+PosInWide fills every
    /// column with its first-position score.
    pub fn predict_matrix(&self, request: &Request) -> Result<PredictionMatrix> {
        request.validate()?;
        let (j, k) = (request.candidates.len(), self.config.positions);
        // the item-aware module holds J·K·L attention rows; bound the graph size
        let chunk = if self.variant == Variant::DpinItemAction { ITEM_ACTION_CHUNK } else { j };
        let mut values = Vec::with_capacity(j * k);
        for start in (0..j).step_by(chunk) {
            let pairs: Vec<PairQuery> = (start..(start + chunk).min(j))
                .flat_map(|c| {
                    (1..=k as u32).map(move |p| PairQuery {
                        request: 0,
                        candidate: c,
                        position: self.variant.evaluation_position(p),
                    })
                })
                .collect();
            values.extend(self.predict_pairs(&[request], &pairs)?);
        }
        Ok(PredictionMatrix { candidates: j, positions: k, values })
    }

    /// The two PAL factors: `p_seen(k)` for every position and `p_click`
    /// for every candidate. Their product is what `predict_matrix` returns.
    pub fn pal_heads(&self, request: &Request) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.variant != Variant::DinPal {
            return Err(Error::usage(format!("{} has no PAL heads", self.variant)));
        }
        let ks: Vec<u32> = (1..=self.config.positions as u32).collect();
        let seen = self.eval(|b| {
            let s = b.position_scalar("pal.position", &ks)?;
            b.g.sigmoid(s)
        })?;
        let click = self.eval(|b| {
            let items: Vec<[u32; 2]> = request.candidates.iter().map(|c| c.item).collect();
            let n = items.len();
            let r_item = b.base(&[request.user], &[request.context], &vec![0; n], &items)?;
            let item_emb = b.items(&items)?;
            let rows: Vec<(usize, usize)> = (0..n).map(|c| (0, c)).collect();
            let interest = b.din_interest(&[request], &rows, item_emb)?;
            let h = b.g.concat(&[r_item, interest])?;
            let logit = b.din_logit(h)?;
            b.g.sigmoid(logit)
        })?;
        Ok((seen.into_data(), click.into_data()))
    }

    /// Central-difference check of the mean cross-entropy over `pairs`.
    pub fn check_gradients(
        &self,
        requests: &[&Request],
        pairs: &[PairQuery],
        labels: &[f64],
        epsilon: f64,
        seed: u64,
    ) -> Result<GradCheckReport> {
        if labels.len() != pairs.len() {
            return Err(Error::usage(format!("{} labels for {} pairs", labels.len(), pairs.len())));
        }
        gradient_check(
            |g, params| {
                let mut b = Builder { g, cfg: &self.config, params, variant: self.variant };
                let p = b.pair_probabilities(requests, pairs)?;
                b.g.bce(p, labels.to_vec())
            },
            &self.params,
            epsilon,
            seed,
        )
    }
}
