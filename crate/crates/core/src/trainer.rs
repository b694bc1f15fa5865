//! Mini-batch training supervised at the displayed position.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{cross_entropy, Graph, Optimizer, OptimizerKind, ParameterSet};
use crate::config::Section;
use crate::error::{Error, Result};
use crate::features::{LoggedRequest, Request, Traffic};
use crate::metrics::{pauc, PaucReport, ScoredImpression};
use crate::model::{build_model, Builder, Model, ModelConfig, PairQuery, Variant};
use crate::world::worker_threads;

/// Clamped binary cross-entropy of one prediction.
pub fn cross_entropy_loss(p: f64, y: f64) -> f64 {
    cross_entropy(p, y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValidationTraffic {
    Regular,
    Randomized,
}

impl ValidationTraffic {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "regular" => Ok(Self::Regular),
            "randomized" => Ok(Self::Randomized),
            other => Err(Error::Config(format!("unknown validation traffic '{other}' (regular|randomized)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Regular => "regular",
            Self::Randomized => "randomized",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Impressions per step. Requests are never split across batches.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Validate every this many epochs (the last epoch is always validated).
    pub eval_every: usize,
    /// Stop after this many validations without improvement; 0 disables.
    pub patience: usize,
    pub validation: ValidationTraffic,
    /// Training refuses requests logged on this day or later.
    pub test_day: Option<u32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            epochs: 5,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 1,
            eval_every: 1,
            patience: 0,
            validation: ValidationTraffic::Regular,
            test_day: None,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 8] =
        ["batch_size", "epochs", "lr", "optimizer", "seed", "eval_every", "patience", "validation"];

    pub fn from_section(s: &Section<'_>) -> Result<Self> {
        s.reject_unknown(&Self::KEYS)?;
        let mut c = TrainConfig::default();
        s.read("batch_size", &mut c.batch_size)?;
        s.read("epochs", &mut c.epochs)?;
        s.read("lr", &mut c.lr)?;
        s.read("seed", &mut c.seed)?;
        s.read("eval_every", &mut c.eval_every)?;
        s.read("patience", &mut c.patience)?;
        if let Some(o) = s.raw("optimizer") {
            c.optimizer = OptimizerKind::parse(o)?;
        }
        if let Some(v) = s.raw("validation") {
            c.validation = ValidationTraffic::parse(v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Resolved `key = value` lines in [`TrainConfig::KEYS`] order.
    pub fn render(&self) -> String {
        format!(
            "batch_size = {}\nepochs = {}\nlr = {}\noptimizer = {}\nseed = {}\neval_every = {}\npatience = {}\nvalidation = {}\n",
            self.batch_size,
            self.epochs,
            self.lr,
            self.optimizer.as_str(),
            self.seed,
            self.eval_every,
            self.patience,
            self.validation.as_str()
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size, epochs and eval_every must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
    pub val_pauc: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_tsv(&self) -> String {
        let na = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
        let mut out = String::from("epoch\ttrain_loss\tval_auc\tval_pauc\tseconds\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{}\t{}\t{:.3}",
                e.epoch,
                e.train_loss,
                na(e.val_auc),
                na(e.val_pauc),
                e.seconds
            );
        }
        out
    }
}

/// Splits a shuffled request order into batches of about `batch_size` impressions.
fn batches(order: &[usize], data: &[LoggedRequest], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut n = 0;
    for &i in order {
        cur.push(i);
        n += data[i].slots.len();
        if n >= batch_size {
            out.push(std::mem::take(&mut cur));
            n = 0;
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Cells and labels of a batch, each supervised at its displayed position.
fn batch_cells<'a>(data: &'a [LoggedRequest], batch: &[usize]) -> (Vec<&'a Request>, Vec<PairQuery>, Vec<f64>) {
    let mut reqs = Vec::with_capacity(batch.len());
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    for (r, &i) in batch.iter().enumerate() {
        reqs.push(&data[i].request);
        for s in &data[i].slots {
            pairs.push(PairQuery { request: r, candidate: s.candidate, position: s.position });
            labels.push(f64::from(s.click));
        }
    }
    (reqs, pairs, labels)
}

/// Mean loss and gradients of one batch.
fn batch_step(model: &Model, cells: &(Vec<&Request>, Vec<PairQuery>, Vec<f64>)) -> Result<(f64, crate::autodiff::Gradients)> {
    let (reqs, pairs, labels) = cells;
    let mut g = Graph::new();
    let loss = {
        let mut b = Builder { g: &mut g, cfg: &model.config, params: &model.params, variant: model.variant };
        let p = b.pair_probabilities(reqs, pairs)?;
        b.g.bce(p, labels.clone())?
    };
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::numeric("non-finite loss"));
    }
    Ok((value, g.backward(loss)?))
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: TrainHistory,
}

/// Trains `variant` from scratch. With a non-empty `validation` set the
/// weights of the best-validating epoch are returned.
pub fn train(
    data: &[LoggedRequest],
    validation: &[LoggedRequest],
    model_config: &ModelConfig,
    variant: Variant,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.iter().all(|r| r.slots.is_empty()) {
        return Err(Error::usage("training set has no impressions"));
    }
    if let Some(test_day) = cfg.test_day {
        if let Some(r) = data.iter().find(|r| r.day >= test_day) {
            return Err(Error::Validation(format!(
                "request {} from day {} reached training (test day {test_day})",
                r.request.request_id, r.day
            )));
        }
    }
    let mut model = build_model(model_config, variant, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ParameterSet)> = None;
    let mut stale = 0;
    let val_set: Vec<LoggedRequest> = validation
        .iter()
        .filter(|r| match cfg.validation {
            ValidationTraffic::Regular => r.traffic == Traffic::Regular,
            ValidationTraffic::Randomized => r.traffic == Traffic::Randomized,
        })
        .cloned()
        .collect();

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch_index = 0usize;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for batch in batches(&order, data, cfg.batch_size) {
            batch_index += 1;
            let cells = batch_cells(data, &batch);
            if cells.1.is_empty() {
                continue;
            }
            let (loss, grads) = batch_step(&model, &cells).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{m} at batch {batch_index} (epoch {epoch})")),
                other => other,
            })?;
            opt.step(&mut model.params, &grads)
                .map_err(|e| Error::numeric(format!("{e} at batch {batch_index} (epoch {epoch})")))?;
            loss_sum += loss * cells.1.len() as f64;
            count += cells.1.len();
        }
        let mut record = EpochRecord { epoch, train_loss: loss_sum / count as f64, val_auc: None, val_pauc: None, seconds: 0.0 };
        let should_eval = !val_set.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let mut stop = false;
        if should_eval {
            match evaluate(&model, &val_set) {
                Ok(report) => {
                    record.val_auc = report.auc;
                    record.val_pauc = Some(report.pauc);
                    if best.as_ref().is_none_or(|(b, _)| report.pauc > *b) {
                        best = Some((report.pauc, model.params.clone()));
                        history.best_epoch = epoch;
                        stale = 0;
                    } else {
                        stale += 1;
                        stop = cfg.patience > 0 && stale >= cfg.patience;
                    }
                }
                Err(Error::UndefinedMetric(m)) => log::warn!("epoch {epoch}: validation metric undefined: {m}"),
                Err(e) => return Err(e),
            }
        }
        record.seconds = start.elapsed().as_secs_f64();
        log::info!(
            "{variant} epoch {epoch}: loss {:.5} val_pauc {:?} ({:.1}s)",
            record.train_loss,
            record.val_pauc,
            record.seconds
        );
        history.epochs.push(record);
        if stop {
            log::info!("{variant}: stopping early after epoch {epoch}");
            break;
        }
    }
    match best {
        Some((_, params)) => model.params = params,
        None => history.best_epoch = history.epochs.len(),
    }
    Ok(TrainOutcome { model, history })
}

/// Requests scored per graph during evaluation.
const EVAL_CHUNK: usize = 128;

fn score_chunk(model: &Model, chunk: &[LoggedRequest]) -> Result<Vec<ScoredImpression>> {
    let mut reqs = Vec::with_capacity(chunk.len());
    let mut pairs = Vec::new();
    let mut meta = Vec::new();
    for (r, lr) in chunk.iter().enumerate() {
        reqs.push(&lr.request);
        for s in &lr.slots {
            pairs.push(PairQuery {
                request: r,
                candidate: s.candidate,
                position: model.variant.evaluation_position(s.position),
            });
            meta.push((s.click, s.position, lr.traffic));
        }
    }
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let probs = model.predict_pairs(&reqs, &pairs)?;
    Ok(probs
        .into_iter()
        .zip(meta)
        .map(|(score, (label, position, traffic))| ScoredImpression { score, label, position, traffic })
        .collect())
}

/// Scores every logged slot; the impression keeps its logged position for
/// grouping even when the variant is evaluated elsewhere.
pub fn score_logged(model: &Model, data: &[LoggedRequest]) -> Result<Vec<ScoredImpression>> {
    let chunks: Vec<&[LoggedRequest]> = data.chunks(EVAL_CHUNK).collect();
    let threads = worker_threads().min(chunks.len().max(1));
    let parts: Vec<Result<Vec<ScoredImpression>>> = if threads <= 1 {
        chunks.iter().map(|c| score_chunk(model, c)).collect()
    } else {
        let per = chunks.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|group| s.spawn(move || group.iter().map(|c| score_chunk(model, c)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("scoring worker panicked")).collect()
        })
    };
    let mut out = Vec::new();
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate(model: &Model, data: &[LoggedRequest]) -> Result<PaucReport> {
    pauc(&score_logged(model, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::encode_checkpoint;
    use crate::features::{BehaviorRecord, Candidate, PositionBehaviorSequences, Slot};

    const VOCAB: [usize; 8] = [12, 3, 4, 4, 5, 5, 20, 5];

    fn cfg() -> ModelConfig {
        ModelConfig { seq_len: 5, positions: 4, ..ModelConfig::desk(VOCAB) }
    }

    fn logged(id: u64, slots: &[(usize, u32, u8)]) -> LoggedRequest {
        let rec = |i: u32| BehaviorRecord { item: [i % 20, i % 5], context: [1, 2, 3, 4], dif_bucket: i % 16 };
        let mut seqs = PositionBehaviorSequences::empty(4, 5);
        for k in 0..4 {
            seqs.sequences[k] = (0..(id as u32 + k as u32) % 4).map(|i| rec(i + id as u32)).collect();
        }
        LoggedRequest {
            request: Request {
                request_id: id,
                ts: 100,
                user: [id as u32 % 12, 1],
                context: [1, (id % 4) as u32, 2, 3],
                candidates: (0..4).map(|j| Candidate { item: [(id as u32 * 4 + j) % 20, j % 5], bid: 1.0 }).collect(),
                behaviors: seqs,
                recent: (0..3).map(|i| rec(i + 7)).collect(),
            },
            day: 0,
            traffic: Traffic::Regular,
            slots: slots.iter().map(|&(candidate, position, click)| Slot { candidate, position, click }).collect(),
        }
    }

    fn toy() -> Vec<LoggedRequest> {
        vec![
            logged(1, &[(0, 1, 1), (1, 2, 0), (2, 3, 0)]),
            logged(2, &[(3, 1, 0), (0, 2, 1)]),
            logged(3, &[(1, 1, 1), (2, 2, 0), (3, 4, 0)]),
            logged(4, &[(2, 1, 0), (0, 3, 1)]),
        ]
    }

    #[test]
    fn config_render_round_trips() {
        let c = TrainConfig { epochs: 3, lr: 0.01, patience: 2, validation: ValidationTraffic::Randomized, ..TrainConfig::default() };
        let text = format!("[train]\n{}", c.render());
        let back = TrainConfig::from_section(&crate::config::ConfigFile::parse(&text).unwrap().section("train")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn loss_examples() {
        assert!((cross_entropy_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((cross_entropy_loss(0.5, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(cross_entropy_loss(1.0, 1.0) < 1e-11);
        assert!(cross_entropy_loss(0.0, 1.0).is_finite());
    }

    #[test]
    fn batch_loss_is_mean_of_sample_losses() {
        let data = toy();
        let model = build_model(&cfg(), Variant::Dpin, 3).unwrap();
        let batch: Vec<usize> = (0..data.len()).collect();
        let cells = batch_cells(&data, &batch);
        let (loss, _) = batch_step(&model, &cells).unwrap();
        let probs = model.predict_pairs(&cells.0, &cells.1).unwrap();
        let mean: f64 = probs.iter().zip(&cells.2).map(|(&p, &y)| cross_entropy_loss(p, y)).sum::<f64>() / probs.len() as f64;
        assert!((loss - mean).abs() < 1e-12);
    }

    #[test]
    fn toy_set_is_memorized() {
        let data = toy();
        assert_eq!(data.iter().map(|r| r.slots.len()).sum::<usize>(), 10);
        let tc = TrainConfig { epochs: 200, batch_size: 4, seed: 5, ..Default::default() };
        let out = train(&data, &[], &cfg(), Variant::Dpin, &tc).unwrap();
        let h = &out.history.epochs;
        assert_eq!(h.len(), 200);
        assert!(h[199].train_loss < h[0].train_loss);
        assert_eq!(out.history.best_epoch, 200);
    }

    #[test]
    fn constant_labels_are_fit() {
        let mut data = toy();
        data.iter_mut().flat_map(|r| r.slots.iter_mut()).for_each(|s| s.click = 1);
        let tc = TrainConfig { epochs: 150, batch_size: 16, lr: 1e-2, ..Default::default() };
        let out = train(&data, &[], &cfg(), Variant::Dpin, &tc).unwrap();
        let scored = score_logged(&out.model, &data).unwrap();
        let mean = scored.iter().map(|s| s.score).sum::<f64>() / scored.len() as f64;
        assert!(mean > 0.9, "mean prediction {mean}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy();
        let tc = TrainConfig { epochs: 3, batch_size: 5, ..Default::default() };
        for variant in Variant::ALL {
            let a = train(&data, &data, &cfg(), variant, &tc).unwrap();
            let b = train(&data, &data, &cfg(), variant, &tc).unwrap();
            assert_eq!(encode_checkpoint(&a.model), encode_checkpoint(&b.model), "{variant}");
            assert_eq!(a.history.epochs.len(), 3);
            assert!(a.history.epochs[2].val_pauc.is_some());
        }
    }

    #[test]
    fn test_day_rows_are_refused() {
        let mut data = toy();
        data[2].day = 4;
        let tc = TrainConfig { test_day: Some(4), ..Default::default() };
        assert!(matches!(train(&data, &[], &cfg(), Variant::Din, &tc), Err(Error::Validation(_))));
    }

    #[test]
    fn diverging_training_reports_the_batch() {
        let data = toy();
        let tc = TrainConfig { epochs: 50, batch_size: 1, lr: 1e300, optimizer: OptimizerKind::Sgd, ..Default::default() };
        match train(&data, &[], &cfg(), Variant::Dpin, &tc) {
            Err(Error::Numeric(m)) => assert!(m.contains("batch"), "{m}"),
            other => panic!("expected a numeric error, got {:?}", other.map(|o| o.history)),
        }
    }

    #[test]
    fn history_tsv_header() {
        let h = TrainHistory {
            epochs: vec![EpochRecord { epoch: 1, train_loss: 0.5, val_auc: None, val_pauc: Some(0.6), seconds: 1.0 }],
            best_epoch: 1,
        };
        assert_eq!(h.to_tsv(), "epoch\ttrain_loss\tval_auc\tval_pauc\tseconds\n1\t0.500000\tNA\t0.600000\t1.000\n");
    }
}
