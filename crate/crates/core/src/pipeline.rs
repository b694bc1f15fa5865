//! Dataset preparation and the end-to-end commands: generate, train,
//! evaluate, benchmark, allocate, gradcheck and the variant comparison table.
//!
//! Every command writes into one output directory and echoes its fully
//! resolved configuration into `manifest.txt` there.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{ConfigFile, Section};
use crate::error::{Error, Result};
use crate::features::{
    build_vocabulary, encode_impression, group_requests, read_dataset, read_history, split_dataset, write_dataset,
    write_history, Field, HistoryIndex, LoggedRequest, RawClick, RawImpression, Traffic, Vocabulary,
};
use crate::metrics::PaucReport;
use crate::model::{build_model, Model, ModelConfig, PairQuery, Variant};
use crate::serving::{
    benchmark_latency, exhaustive_allocate, greedy_allocate, synthetic_request, Allocation, BenchmarkConfig,
    LatencyTable,
};
use crate::trainer::{evaluate, train, TrainConfig, TrainHistory};
use crate::world::{generate_world, simulate_traffic, RankingPolicy, SimConfig, SimOutput};
use crate::autodiff::GradCheckReport;
use crate::model::PredictionMatrix;

pub const MANIFEST: &str = "manifest.txt";
pub const TRAIN_FILE: &str = "train.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const HISTORY_FILE: &str = "history.tsv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_TSV: &str = "history.tsv";
pub const REPORT_FILE: &str = "report.tsv";

/// Gradient checks fail at or above this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

fn mix(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the traffic simulation, kept apart from the world's own stream.
pub fn traffic_seed(world_seed: u64) -> u64 {
    mix(world_seed, 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataOptions {
    /// Tokens rarer than this map to the unknown id.
    pub min_count: usize,
    /// Share of training requests held out for model selection.
    pub validation_fraction: f64,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions { min_count: 1, validation_fraction: 0.1 }
    }
}

impl DataOptions {
    pub const KEYS: [&'static str; 3] = ["dir", "min_count", "validation_fraction"];

    pub fn from_section(s: &Section<'_>) -> Result<Self> {
        s.reject_unknown(&Self::KEYS)?;
        let mut o = DataOptions::default();
        s.read("min_count", &mut o.min_count)?;
        s.read("validation_fraction", &mut o.validation_fraction)?;
        if !(0.0..1.0).contains(&o.validation_fraction) {
            return Err(Error::Config(format!("validation_fraction {} outside [0, 1)", o.validation_fraction)));
        }
        Ok(o)
    }

    fn render(&self) -> String {
        format!("min_count = {}\nvalidation_fraction = {}\n", self.min_count, self.validation_fraction)
    }
}

/// Encoded, grouped partitions of one logged dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub test_day: u32,
    pub train: Vec<LoggedRequest>,
    pub validation: Vec<LoggedRequest>,
    pub regular_test: Vec<LoggedRequest>,
    pub randomized_test: Vec<LoggedRequest>,
}

impl Dataset {
    pub fn impressions(part: &[LoggedRequest]) -> usize {
        part.iter().map(|r| r.slots.len()).sum()
    }
}

fn held_out(request_id: u64, fraction: f64) -> bool {
    (mix(request_id, 2) >> 11) as f64 / (1u64 << 53) as f64 <= fraction && fraction > 0.0
}

/// Builds the vocabulary from training impressions and the clicks that
/// precede the test day, then groups every partition into requests.
/// Behavior sequences may use any click strictly before a request.
pub fn prepare_dataset(
    impressions: &[RawImpression],
    history: &[RawClick],
    test_day: u32,
    positions: usize,
    seq_len: usize,
    opts: &DataOptions,
) -> Result<Dataset> {
    let split = split_dataset(impressions, test_day);
    let test_start = impressions.iter().filter(|r| r.day >= test_day).map(|r| r.ts).min().unwrap_or(i64::MAX);
    let vocab = build_vocabulary(&split.train, history.iter().filter(|c| c.ts < test_start), opts.min_count);
    let index = HistoryIndex::build(history, &vocab);
    let group = |rows: &[RawImpression]| -> Result<Vec<LoggedRequest>> {
        let enc = rows.iter().map(|r| encode_impression(r, &vocab, positions)).collect::<Result<Vec<_>>>()?;
        group_requests(&enc, &index, positions, seq_len)
    };
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for r in group(&split.train)? {
        if held_out(r.request.request_id, opts.validation_fraction) {
            validation.push(r);
        } else {
            train.push(r);
        }
    }
    let regular_test = group(&split.regular_test)?;
    let randomized_test = group(&split.randomized_test)?;
    Ok(Dataset { vocab, test_day, train, validation, regular_test, randomized_test })
}

/// World plus simulated logs for `sim`, seeded by `sim.seed`.
pub fn simulate(sim: &SimConfig) -> Result<SimOutput> {
    let world = generate_world(sim, sim.seed)?;
    Ok(simulate_traffic(&world, &RankingPolicy::OracleRelevance, traffic_seed(sim.seed)))
}

/// Refuses a non-empty `dir` unless `force`, then makes sure it exists.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = std::fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(Error::usage(format!("{} already exists and is not empty (use --force)", dir.display())));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("{}: {e}", path.display())))
}

fn read_manifest(dir: &Path) -> Result<ConfigFile> {
    let p = dir.join(MANIFEST);
    if !p.exists() {
        return Err(Error::io(format!("{} not found", p.display())));
    }
    ConfigFile::load(&p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSummary {
    pub train_days: u32,
    pub test_day: u32,
    pub train_impressions: usize,
    pub test_impressions: usize,
    pub history_clicks: usize,
    pub total_requests: usize,
    pub randomized_requests: usize,
}

/// Writes `train.tsv`, `test.tsv`, `history.tsv` and the manifest.
pub fn generate_to_dir(sim: &SimConfig, out: &Path, force: bool) -> Result<GenerateSummary> {
    prepare_out_dir(out, force)?;
    let log = simulate(sim)?;
    let test_day = sim.test_day();
    let (train, test): (Vec<&RawImpression>, Vec<&RawImpression>) =
        log.impressions.iter().partition(|r| r.day < test_day);
    write_dataset(&out.join(TRAIN_FILE), train.iter().copied())?;
    write_dataset(&out.join(TEST_FILE), test.iter().copied())?;
    write_history(&out.join(HISTORY_FILE), &log.history)?;
    let summary = GenerateSummary {
        train_days: test_day,
        test_day,
        train_impressions: train.len(),
        test_impressions: test.len(),
        history_clicks: log.history.len(),
        total_requests: log.total_requests,
        randomized_requests: log.randomized_requests,
    };
    let mut m = String::new();
    let _ = writeln!(m, "command = generate");
    let _ = writeln!(m, "world_seed = {}", sim.seed);
    let _ = writeln!(m, "traffic_seed = {}", traffic_seed(sim.seed));
    let _ = writeln!(m, "train_days = {}", summary.train_days);
    let _ = writeln!(m, "test_day = {}", summary.test_day);
    let _ = writeln!(m, "train_impressions = {}", summary.train_impressions);
    let _ = writeln!(m, "test_impressions = {}", summary.test_impressions);
    let _ = writeln!(m, "history_clicks = {}", summary.history_clicks);
    let _ = writeln!(m, "total_requests = {}", summary.total_requests);
    let _ = writeln!(m, "randomized_requests = {}", summary.randomized_requests);
    let _ = writeln!(m, "randomized_fraction = {}", sim.randomized_fraction);
    let observed = summary.randomized_requests as f64 / summary.total_requests.max(1) as f64;
    let _ = writeln!(m, "observed_randomized_fraction = {observed:.6}");
    let _ = writeln!(m, "[world]\n{}", sim.render());
    write_file(&out.join(MANIFEST), &m)?;
    Ok(summary)
}

/// A generated dataset directory: its world config and raw logs.
pub struct DatasetDir {
    pub sim: SimConfig,
    pub impressions: Vec<RawImpression>,
    pub history: Vec<RawClick>,
}

pub fn read_dataset_dir(dir: &Path) -> Result<DatasetDir> {
    let manifest = read_manifest(dir)?;
    let sim = SimConfig::from_section(&manifest.section("world"))?;
    let mut impressions = read_dataset(&dir.join(TRAIN_FILE))?;
    impressions.extend(read_dataset(&dir.join(TEST_FILE))?);
    let history = read_history(&dir.join(HISTORY_FILE))?;
    Ok(DatasetDir { sim, impressions, history })
}

impl DatasetDir {
    pub fn prepare(&self, seq_len: usize, opts: &DataOptions) -> Result<Dataset> {
        prepare_dataset(&self.impressions, &self.history, self.sim.test_day(), self.sim.positions, seq_len, opts)
    }
}

pub const MODEL_KEYS: [&str; 9] = [
    "preset",
    "embedding_dim",
    "mlp_hidden",
    "combination_hidden",
    "attention_hidden",
    "d_model",
    "heads",
    "layers",
    "seq_len",
];

/// Preset named by `preset` (default `desk`) with any listed overrides.
pub fn model_config_from(s: &Section<'_>, vocab_sizes: [usize; 8], positions: usize) -> Result<ModelConfig> {
    s.reject_unknown(&MODEL_KEYS)?;
    let mut c = ModelConfig::preset(s.raw("preset").unwrap_or("desk"), vocab_sizes)?;
    c.positions = positions;
    s.read("embedding_dim", &mut c.embedding_dim)?;
    if let Some(v) = s.raw("mlp_hidden") {
        c.mlp_hidden = v
            .split(',')
            .map(|t| t.trim().parse().map_err(|_| Error::Config(format!("[model] mlp_hidden: bad entry '{t}'"))))
            .collect::<Result<_>>()?;
    }
    s.read("combination_hidden", &mut c.combination_hidden)?;
    s.read("attention_hidden", &mut c.attention_hidden)?;
    s.read("d_model", &mut c.d_model)?;
    s.read("heads", &mut c.heads)?;
    s.read("layers", &mut c.layers)?;
    s.read("seq_len", &mut c.seq_len)?;
    c.validate()?;
    Ok(c)
}

pub struct TrainRun {
    pub model: Model,
    pub history: TrainHistory,
}

/// Trains one variant on a prepared dataset.
pub fn train_variant(data: &Dataset, model_cfg: &ModelConfig, variant: Variant, cfg: &TrainConfig) -> Result<TrainRun> {
    let cfg = TrainConfig { test_day: Some(data.test_day), ..cfg.clone() };
    let outcome = train(&data.train, &data.validation, model_cfg, variant, &cfg)?;
    Ok(TrainRun { model: outcome.model, history: outcome.history })
}

/// Writes `model.ckpt`, `history.tsv` and the manifest for one training run.
pub fn write_train_outputs(out: &Path, run: &TrainRun, manifest: &str) -> Result<()> {
    save_checkpoint(&out.join(CHECKPOINT_FILE), &run.model)?;
    write_file(&out.join(HISTORY_TSV), &run.history.to_tsv())?;
    write_file(&out.join(MANIFEST), manifest)
}

/// Regular and randomized test-day reports of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub variant: Variant,
    pub regular: PaucReport,
    pub randomized: PaucReport,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("NA".into(), |x| format!("{x:.6}"))
}

impl EvaluationReport {
    /// The four headline numbers: AUC and PAUC on both test partitions.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("set\timpressions\tauc\tpauc\n");
        for (name, r) in [("regular", &self.regular), ("randomized", &self.randomized)] {
            let _ = writeln!(out, "{name}\t{}\t{}\t{:.6}", r.impressions(), fmt_opt(r.auc), r.pauc);
        }
        out
    }
}

pub fn evaluate_model(model: &Model, data: &Dataset) -> Result<EvaluationReport> {
    let regular = evaluate(model, &data.regular_test)
        .map_err(|e| relabel(e, "regular test set"))?;
    let randomized = evaluate(model, &data.randomized_test)
        .map_err(|e| relabel(e, "randomized test set"))?;
    Ok(EvaluationReport { variant: model.variant, regular, randomized })
}

fn relabel(e: Error, what: &str) -> Error {
    match e {
        Error::UndefinedMetric(m) => Error::UndefinedMetric(format!("{what}: {m}")),
        other => other,
    }
}

pub fn write_evaluation(out: &Path, report: &EvaluationReport, manifest: &str) -> Result<()> {
    write_file(&out.join(REPORT_FILE), &report.to_tsv())?;
    write_file(&out.join("positions_regular.tsv"), &report.regular.to_tsv())?;
    write_file(&out.join("positions_randomized.tsv"), &report.randomized.to_tsv())?;
    write_file(&out.join(MANIFEST), manifest)
}

/// Checks the checkpoint against the vocabulary rebuilt from the dataset.
pub fn check_compatible(model: &Model, data: &Dataset, positions: usize) -> Result<()> {
    if model.config.vocab_sizes != data.vocab.sizes() {
        return Err(Error::usage(format!(
            "checkpoint vocabulary sizes {:?} do not match the dataset's {:?}",
            model.config.vocab_sizes,
            data.vocab.sizes()
        )));
    }
    if model.config.positions != positions {
        return Err(Error::usage(format!(
            "checkpoint has K = {}, dataset has K = {positions}",
            model.config.positions
        )));
    }
    Ok(())
}

/// One row of the variant comparison, averaged over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Table1Row {
    pub variant: Variant,
    pub regular_auc: f64,
    pub regular_pauc: f64,
    pub randomized_auc: f64,
    pub randomized_pauc: f64,
    /// Per-seed reports, in seed order.
    pub runs: Vec<EvaluationReport>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table1 {
    pub rows: Vec<Table1Row>,
    pub seeds: Vec<u64>,
}

impl Table1 {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant\tregular_auc\tregular_pauc\trandomized_auc\trandomized_pauc\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                r.variant, r.regular_auc, r.regular_pauc, r.randomized_auc, r.randomized_pauc
            );
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "# seeds={}", seeds.join(","));
        out
    }

    pub fn row(&self, variant: Variant) -> Option<&Table1Row> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

#[derive(Clone, Debug)]
pub struct Table1Config {
    pub world: SimConfig,
    pub data: DataOptions,
    pub model: ConfigFile,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    /// Each seed draws a fresh world and traffic and seeds training.
    pub seeds: Vec<u64>,
}

/// Generates a world per seed, trains every variant on it and averages
/// the test-day metrics. Variants are trained one after another.
pub fn reproduce_table1(cfg: &Table1Config) -> Result<Table1> {
    if cfg.seeds.is_empty() || cfg.variants.is_empty() {
        return Err(Error::usage("table needs at least one seed and one variant"));
    }
    let mut runs: Vec<Vec<EvaluationReport>> = vec![Vec::new(); cfg.variants.len()];
    for &seed in &cfg.seeds {
        let sim = SimConfig { seed, ..cfg.world.clone() };
        let log = simulate(&sim)?;
        let probe = model_config_from(&cfg.model.section("model"), [1; 8], sim.positions)?;
        let data = prepare_dataset(&log.impressions, &log.history, sim.test_day(), sim.positions, probe.seq_len, &cfg.data)?;
        let model_cfg = model_config_from(&cfg.model.section("model"), data.vocab.sizes(), sim.positions)?;
        for (v, &variant) in cfg.variants.iter().enumerate() {
            let tc = TrainConfig { seed, ..cfg.train.clone() };
            let run = train_variant(&data, &model_cfg, variant, &tc)?;
            let report = evaluate_model(&run.model, &data)?;
            log::info!(
                "seed {seed} {variant}: randomized pauc {:.4}, regular pauc {:.4}",
                report.randomized.pauc,
                report.regular.pauc
            );
            runs[v].push(report);
        }
    }
    let n = cfg.seeds.len() as f64;
    let mean = |rs: &[EvaluationReport], f: &dyn Fn(&EvaluationReport) -> f64| rs.iter().map(f).sum::<f64>() / n;
    let rows = cfg
        .variants
        .iter()
        .zip(runs)
        .map(|(&variant, rs)| Table1Row {
            variant,
            regular_auc: mean(&rs, &|r| r.regular.auc.unwrap_or(f64::NAN)),
            regular_pauc: mean(&rs, &|r| r.regular.pauc),
            randomized_auc: mean(&rs, &|r| r.randomized.auc.unwrap_or(f64::NAN)),
            randomized_pauc: mean(&rs, &|r| r.randomized.pauc),
            runs: rs,
        })
        .collect();
    Ok(Table1 { rows, seeds: cfg.seeds.clone() })
}

/// Vocabulary sizes implied by a world config, for commands that build
/// models without a dataset. Hour has 24 tokens and day-of-week 7, plus
/// the unknown id everywhere.
pub fn world_vocab_sizes(sim: &SimConfig) -> [usize; 8] {
    let mut v = [0; 8];
    v[Field::UserId.index()] = sim.users + 1;
    v[Field::Segment.index()] = 3;
    v[Field::Query.index()] = sim.queries + 1;
    v[Field::Geo.index()] = sim.geos + 1;
    v[Field::Hour.index()] = 25;
    v[Field::Dow.index()] = 8;
    v[Field::ItemId.index()] = sim.items + 1;
    v[Field::Category.index()] = sim.categories + 1;
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckLine {
    pub variant: Variant,
    pub report: GradCheckReport,
}

impl GradCheckLine {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRADCHECK_TOLERANCE
    }
}

pub fn gradcheck_report_tsv(lines: &[GradCheckLine]) -> String {
    let mut out = String::from("variant\tmax_rel_error\tcoordinates\tworst\tpass\n");
    for l in lines {
        let worst = l.report.worst.as_ref().map_or("-".to_string(), |(n, i)| format!("{n}[{i}]"));
        let _ = writeln!(
            out,
            "{}\t{:.3e}\t{}\t{}\t{}",
            l.variant,
            l.report.max_rel_error,
            l.report.coordinates,
            worst,
            if l.passed() { "ok" } else { "FAIL" }
        );
    }
    out
}

/// End-to-end gradient check of each variant on synthetic requests.
/// Weights are jittered off zero so no ReLU sits exactly on its kink.
pub fn gradcheck_variants(model_cfg: &ModelConfig, variants: &[Variant], epsilon: f64, seed: u64) -> Result<Vec<GradCheckLine>> {
    let mut lines = Vec::new();
    for &variant in variants {
        let mut model = build_model(model_cfg, variant, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 3));
        for (_, t) in model.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.1..0.1));
        }
        let reqs: Vec<_> = (0..2).map(|_| synthetic_request(&model, 3, &mut rng)).collect();
        let refs: Vec<_> = reqs.iter().collect();
        let k = model_cfg.positions as u32;
        let pairs = vec![
            PairQuery { request: 0, candidate: 0, position: 1 },
            PairQuery { request: 0, candidate: 2, position: k },
            PairQuery { request: 1, candidate: 1, position: 2.min(k) },
            PairQuery { request: 1, candidate: 2, position: (k + 1) / 2 },
        ];
        let labels = [1.0, 0.0, 0.0, 1.0];
        let report = model.check_gradients(&refs, &pairs, &labels, epsilon, seed)?;
        lines.push(GradCheckLine { variant, report });
    }
    Ok(lines)
}

/// Parses a matrix written as rows separated by `;`, entries by `,`.
pub fn parse_matrix(text: &str) -> Result<Vec<Vec<f64>>> {
    text.split(';')
        .map(|row| {
            row.split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad number '{}'", t.trim()))))
                .collect()
        })
        .collect()
}

pub fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|t| t.trim().parse().map_err(|_| Error::Config(format!("{what}: bad entry '{}'", t.trim()))))
        .collect()
}

/// Greedy and exhaustive allocations of an explicit CTR matrix.
pub fn allocate_matrix(rows: &[Vec<f64>], bids: &[f64]) -> Result<(PredictionMatrix, Allocation, Option<Allocation>)> {
    let k = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || k == 0 || rows.iter().any(|r| r.len() != k) {
        return Err(Error::usage("CTR matrix must be a non-empty rectangle"));
    }
    let ctr = PredictionMatrix { candidates: rows.len(), positions: k, values: rows.concat() };
    let greedy = greedy_allocate(&ctr, bids)?;
    let exact = if rows.len().min(k) <= crate::serving::EXHAUSTIVE_LIMIT {
        Some(exhaustive_allocate(&ctr, bids)?)
    } else {
        None
    };
    Ok((ctr, greedy, exact))
}

/// Latency table of `variants` built fresh from one config.
pub fn benchmark_variants(model_cfg: &ModelConfig, variants: &[Variant], cfg: &BenchmarkConfig) -> Result<LatencyTable> {
    let models = variants.iter().map(|&v| build_model(model_cfg, v, cfg.seed)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Model> = models.iter().collect();
    benchmark_latency(&refs, cfg)
}

/// Loads a checkpoint, rebuilding the dataset it is evaluated on.
pub fn evaluate_checkpoint(checkpoint: &Path, dataset: &Path, opts: &DataOptions) -> Result<EvaluationReport> {
    let model = load_checkpoint(checkpoint)?;
    let dir = read_dataset_dir(dataset)?;
    let data = dir.prepare(model.config.seq_len, opts)?;
    check_compatible(&model, &data, dir.sim.positions)?;
    evaluate_model(&model, &data)
}

/// `path` resolved against `base` unless already absolute.
pub fn resolve(base: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn data_options_render(o: &DataOptions) -> String {
    o.render()
}

/// Counts of each traffic kind in a logged partition, for summaries.
pub fn traffic_counts(part: &[LoggedRequest]) -> (usize, usize) {
    let regular = part.iter().filter(|r| r.traffic == Traffic::Regular).count();
    (regular, part.len() - regular)
}
