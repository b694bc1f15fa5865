//! Resolved run configuration and the subcommand bodies.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use posrank::checkpoint::load_checkpoint;
use posrank::config::{ConfigFile, Section};
use posrank::model::{ModelConfig, Variant};
use posrank::pipeline::{self, DataOptions, Table1Config};
use posrank::serving::{serve, synthetic_request, BenchmarkConfig};
use posrank::trainer::TrainConfig;
use posrank::world::SimConfig;
use posrank::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SECTIONS: [&str; 10] =
    ["", "world", "data", "model", "train", "evaluate", "benchmark", "allocate", "gradcheck", "table1"];
const ROOT_KEYS: [&str; 2] = ["variant", "out"];
const EVALUATE_KEYS: [&str; 1] = ["checkpoint"];
const BENCHMARK_KEYS: [&str; 8] =
    ["variants", "candidate_counts", "trials", "warmup", "seed", "seq_len", "positions", "preset"];
const ALLOCATE_KEYS: [&str; 5] = ["ctr", "bids", "checkpoint", "candidates", "seed"];
const GRADCHECK_KEYS: [&str; 4] = ["variants", "epsilon", "seed", "preset"];
const TABLE1_KEYS: [&str; 2] = ["variants", "seeds"];

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<Variant>,
    pub out: Option<PathBuf>,
    pub force: bool,
}

pub struct RunConfig {
    pub file: ConfigFile,
    /// Relative paths in the file resolve against its directory.
    pub base: PathBuf,
    pub flags: Overrides,
}

impl RunConfig {
    /// Loads and checks every section up front so typos fail before any work.
    pub fn load(path: &Path, flags: Overrides) -> Result<Self> {
        let file = ConfigFile::load(path)?;
        for name in file.section_names() {
            if !SECTIONS.contains(&name.as_str()) {
                return Err(Error::Config(format!("unknown section [{name}]")));
            }
        }
        file.section("").reject_unknown(&ROOT_KEYS)?;
        if file.section_names().any(|n| n == "world") {
            SimConfig::from_section(&file.section("world"))?;
        }
        if file.section_names().any(|n| n == "train") {
            TrainConfig::from_section(&file.section("train"))?;
        }
        DataOptions::from_section(&file.section("data"))?;
        file.section("model").reject_unknown(&pipeline::MODEL_KEYS)?;
        file.section("evaluate").reject_unknown(&EVALUATE_KEYS)?;
        file.section("benchmark").reject_unknown(&BENCHMARK_KEYS)?;
        file.section("allocate").reject_unknown(&ALLOCATE_KEYS)?;
        file.section("gradcheck").reject_unknown(&GRADCHECK_KEYS)?;
        file.section("table1").reject_unknown(&TABLE1_KEYS)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(RunConfig { file, base, flags })
    }

    fn section(&self, name: &str) -> Section<'_> {
        self.file.section(name)
    }

    fn path(&self, section: &str, key: &str) -> Result<PathBuf> {
        let s = self.section(section);
        let raw = s.raw(key).ok_or_else(|| Error::Config(format!("[{section}] {key} is required for this command")))?;
        Ok(pipeline::resolve(&self.base, raw))
    }

    fn out_dir(&self) -> Result<PathBuf> {
        match (&self.flags.out, self.section("").raw("out")) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(p)) => Ok(pipeline::resolve(&self.base, p)),
            (None, None) => Err(Error::usage("no output directory: pass --out DIR or set `out` in the config")),
        }
    }

    fn world(&self) -> Result<SimConfig> {
        let mut w = SimConfig::from_section(&self.section("world"))?;
        if let Some(s) = self.flags.seed {
            w.seed = s;
        }
        Ok(w)
    }

    fn train_config(&self) -> Result<TrainConfig> {
        let mut t = TrainConfig::from_section(&self.section("train"))?;
        if let Some(s) = self.flags.seed {
            t.seed = s;
        }
        Ok(t)
    }

    fn variant(&self) -> Result<Variant> {
        match (self.flags.variant, self.section("").raw("variant")) {
            (Some(v), _) => Ok(v),
            (None, Some(tag)) => tag.parse(),
            (None, None) => Err(Error::usage(format!(
                "no variant: pass --variant TAG (one of {})",
                Variant::valid_tags()
            ))),
        }
    }

    fn variants(&self, section: &str, default: &[Variant]) -> Result<Vec<Variant>> {
        match self.section(section).raw("variants") {
            Some(list) => list.split(',').map(|t| t.trim().parse()).collect(),
            None => Ok(default.to_vec()),
        }
    }

    /// Model config for commands that build models without a dataset.
    fn standalone_model(&self, section: &str, positions: usize, seq_len: Option<usize>) -> Result<ModelConfig> {
        let s = self.section(section);
        let vocab = pipeline::world_vocab_sizes(&SimConfig::from_section(&self.section("world"))?);
        let mut m = ModelConfig::preset(s.raw("preset").unwrap_or("desk"), vocab)?;
        m.positions = positions;
        if let Some(l) = seq_len {
            m.seq_len = l;
        }
        m.validate()?;
        Ok(m)
    }

    fn manifest(&self, command: &str, extra: &str) -> String {
        let mut m = format!("command = {command}\n{extra}");
        if !m.ends_with('\n') {
            m.push('\n');
        }
        let _ = write!(m, "[config]\n{}", indent_sections(&self.file));
        m
    }
}

/// The input config, with section headers flattened to `section.key` so it
/// nests under one manifest section.
fn indent_sections(file: &ConfigFile) -> String {
    let mut out = String::new();
    let mut current = String::new();
    for line in file.render().lines() {
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = format!("{name}.");
        } else {
            let _ = writeln!(out, "{current}{line}");
        }
    }
    out
}

pub fn generate(cfg: &RunConfig) -> Result<String> {
    let world = cfg.world()?;
    let out = cfg.out_dir()?;
    let s = pipeline::generate_to_dir(&world, &out, cfg.flags.force)?;
    Ok(format!(
        "wrote {}: {} train days, test day {}, {} train / {} test impressions, {} of {} requests randomized\n",
        out.display(),
        s.train_days,
        s.test_day,
        s.train_impressions,
        s.test_impressions,
        s.randomized_requests,
        s.total_requests
    ))
}

pub fn train(cfg: &RunConfig) -> Result<String> {
    let variant = cfg.variant()?;
    let tc = cfg.train_config()?;
    let opts = DataOptions::from_section(&cfg.section("data"))?;
    let dataset = cfg.path("data", "dir")?;
    let out = cfg.out_dir()?;
    let dir = pipeline::read_dataset_dir(&dataset)?;
    let probe = pipeline::model_config_from(&cfg.section("model"), [1; 8], dir.sim.positions)?;
    let data = dir.prepare(probe.seq_len, &opts)?;
    let model_cfg = pipeline::model_config_from(&cfg.section("model"), data.vocab.sizes(), dir.sim.positions)?;
    pipeline::prepare_out_dir(&out, cfg.flags.force)?;
    let run = pipeline::train_variant(&data, &model_cfg, variant, &tc)?;
    let extra = format!(
        "variant = {variant}\ndataset = {}\ntrain_requests = {}\nvalidation_requests = {}\nbest_epoch = {}\nparameters = {}\n[model]\n{}[train]\n{}[data]\n{}",
        dataset.display(),
        data.train.len(),
        data.validation.len(),
        run.history.best_epoch,
        run.model.parameter_count(),
        model_cfg.render(),
        tc.render(),
        pipeline::data_options_render(&opts)
    );
    let mut manifest = format!("command = train\n{extra}");
    let _ = write!(manifest, "[config]\n{}", indent_sections(&cfg.file));
    pipeline::write_train_outputs(&out, &run, &manifest)?;
    let last = run.history.epochs.last();
    Ok(format!(
        "{variant}: {} epochs, best epoch {}, final train loss {:.5}; wrote {}\n",
        run.history.epochs.len(),
        run.history.best_epoch,
        last.map_or(f64::NAN, |e| e.train_loss),
        out.join(pipeline::CHECKPOINT_FILE).display()
    ))
}

pub fn evaluate(cfg: &RunConfig) -> Result<String> {
    let checkpoint = cfg.path("evaluate", "checkpoint")?;
    let dataset = cfg.path("data", "dir")?;
    let opts = DataOptions::from_section(&cfg.section("data"))?;
    let out = cfg.out_dir()?;
    let model = load_checkpoint(&checkpoint)?;
    if let Some(v) = cfg.flags.variant {
        if v != model.variant {
            return Err(Error::usage(format!("--variant {v} but the checkpoint holds {}", model.variant)));
        }
    }
    let dir = pipeline::read_dataset_dir(&dataset)?;
    let data = dir.prepare(model.config.seq_len, &opts)?;
    pipeline::check_compatible(&model, &data, dir.sim.positions)?;
    let report = pipeline::evaluate_model(&model, &data)?;
    pipeline::prepare_out_dir(&out, cfg.flags.force)?;
    let manifest = cfg.manifest(
        "evaluate",
        &format!("variant = {}\ncheckpoint = {}\ndataset = {}\n", model.variant, checkpoint.display(), dataset.display()),
    );
    pipeline::write_evaluation(&out, &report, &manifest)?;
    Ok(format!("{}\n{}", model.variant, report.to_tsv()))
}

pub fn benchmark(cfg: &RunConfig) -> Result<String> {
    let s = cfg.section("benchmark");
    let mut bc = BenchmarkConfig::default();
    if let Some(list) = s.raw("candidate_counts") {
        bc.candidate_counts = pipeline::parse_list(list, "[benchmark] candidate_counts")?;
    }
    s.read("trials", &mut bc.trials)?;
    s.read("warmup", &mut bc.warmup)?;
    s.read("seed", &mut bc.seed)?;
    if let Some(seed) = cfg.flags.seed {
        bc.seed = seed;
    }
    let positions = s.get("positions")?.unwrap_or(10);
    // long behavior sequences make the per-position work realistic
    let seq_len = s.get("seq_len")?.unwrap_or(300);
    let model_cfg = cfg.standalone_model("benchmark", positions, Some(seq_len))?;
    let variants = cfg.variants("benchmark", &[Variant::Dpin, Variant::DpinItemAction])?;
    let out = cfg.out_dir()?;
    pipeline::prepare_out_dir(&out, cfg.flags.force)?;
    let table = pipeline::benchmark_variants(&model_cfg, &variants, &bc)?;
    let tsv = table.to_tsv();
    std::fs::write(out.join("latency.tsv"), &tsv).map_err(|e| Error::io(format!("{}: {e}", out.display())))?;
    let manifest = cfg.manifest("benchmark", &format!("[model]\n{}", model_cfg.render()));
    std::fs::write(out.join(pipeline::MANIFEST), manifest).map_err(|e| Error::io(e.to_string()))?;
    Ok(tsv)
}

pub fn allocate(cfg: &RunConfig) -> Result<String> {
    let s = cfg.section("allocate");
    let out = cfg.out_dir()?;
    let (rows, bids) = match s.raw("ctr") {
        Some(text) => {
            let rows = pipeline::parse_matrix(text)?;
            let bids = match s.raw("bids") {
                Some(b) => pipeline::parse_list(b, "[allocate] bids")?,
                None => vec![1.0; rows.len()],
            };
            (rows, bids)
        }
        None => {
            let model = load_checkpoint(&cfg.path("allocate", "checkpoint")?)?;
            let j: usize = s.get("candidates")?.unwrap_or(20);
            let seed = cfg.flags.seed.or(s.get("seed")?).unwrap_or(1);
            let req = synthetic_request(&model, j, &mut ChaCha8Rng::seed_from_u64(seed));
            let (ctr, _) = serve(&model, &req)?;
            let rows = (0..ctr.candidates).map(|c| ctr.row(c).to_vec()).collect();
            (rows, req.candidates.iter().map(|c| c.bid).collect())
        }
    };
    let (ctr, greedy, exact) = pipeline::allocate_matrix(&rows, &bids)?;
    let mut tsv = greedy.to_tsv(&ctr, &bids);
    if let Some(e) = &exact {
        let slots: Vec<String> = e.slots.iter().map(usize::to_string).collect();
        let _ = writeln!(tsv, "# exhaustive_value={:.6} exhaustive_slots={}", e.value, slots.join(","));
    }
    pipeline::prepare_out_dir(&out, cfg.flags.force)?;
    std::fs::write(out.join("allocation.tsv"), &tsv).map_err(|e| Error::io(format!("{}: {e}", out.display())))?;
    std::fs::write(out.join(pipeline::MANIFEST), cfg.manifest("allocate", "")).map_err(|e| Error::io(e.to_string()))?;
    Ok(tsv)
}

/// The report text and whether every variant passed.
pub fn gradcheck(cfg: &RunConfig) -> Result<(String, bool)> {
    let s = cfg.section("gradcheck");
    let epsilon = s.get("epsilon")?.unwrap_or(1e-6);
    let seed = cfg.flags.seed.or(s.get("seed")?).unwrap_or(1);
    let model_cfg = cfg.standalone_model("gradcheck", 10, None)?;
    let default: Vec<Variant> = match cfg.flags.variant {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    let variants = cfg.variants("gradcheck", &default)?;
    let out = cfg.out_dir()?;
    pipeline::prepare_out_dir(&out, cfg.flags.force)?;
    let lines = pipeline::gradcheck_variants(&model_cfg, &variants, epsilon, seed)?;
    let tsv = pipeline::gradcheck_report_tsv(&lines);
    std::fs::write(out.join("gradcheck.tsv"), &tsv).map_err(|e| Error::io(format!("{}: {e}", out.display())))?;
    std::fs::write(out.join(pipeline::MANIFEST), cfg.manifest("gradcheck", &format!("[model]\n{}", model_cfg.render())))
        .map_err(|e| Error::io(e.to_string()))?;
    Ok((tsv, lines.iter().all(|l| l.passed())))
}

pub fn reproduce_table1(cfg: &RunConfig) -> Result<String> {
    let s = cfg.section("table1");
    let seeds = match (cfg.flags.seed, s.raw("seeds")) {
        (Some(seed), _) => vec![seed],
        (None, Some(list)) => pipeline::parse_list(list, "[table1] seeds")?,
        (None, None) => vec![1],
    };
    let t1 = Table1Config {
        world: SimConfig::from_section(&cfg.section("world"))?,
        data: DataOptions::from_section(&cfg.section("data"))?,
        model: cfg.file.clone(),
        train: TrainConfig::from_section(&cfg.section("train"))?,
        variants: cfg.variants("table1", &Variant::ALL)?,
        seeds,
    };
    let out = cfg.out_dir()?;
    pipeline::prepare_out_dir(&out, cfg.flags.force)?;
    let table = pipeline::reproduce_table1(&t1)?;
    let tsv = table.to_tsv();
    std::fs::write(out.join("table1.tsv"), &tsv).map_err(|e| Error::io(format!("{}: {e}", out.display())))?;
    let mut per_seed = String::from("variant\tseed\tregular_auc\tregular_pauc\trandomized_auc\trandomized_pauc\n");
    for row in &table.rows {
        for (seed, r) in table.seeds.iter().zip(&row.runs) {
            let na = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.6}"));
            let _ = writeln!(
                per_seed,
                "{}\t{seed}\t{}\t{:.6}\t{}\t{:.6}",
                row.variant,
                na(r.regular.auc),
                r.regular.pauc,
                na(r.randomized.auc),
                r.randomized.pauc
            );
        }
    }
    std::fs::write(out.join("table1_runs.tsv"), per_seed).map_err(|e| Error::io(e.to_string()))?;
    std::fs::write(out.join(pipeline::MANIFEST), cfg.manifest("reproduce-table1", "")).map_err(|e| Error::io(e.to_string()))?;
    Ok(tsv)
}
