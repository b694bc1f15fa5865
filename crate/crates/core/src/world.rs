//! Ground-truth click simulator.
//!
//! A click happens when the slot is examined and the item is relevant, two
//! independent Bernoulli draws. Examination decays as `k^(-η)`; in the
//! user-dependent mode `η` depends on a latent browsing segment per user.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::sigmoid;
use crate::config::Section;
use crate::error::{Error, Result};
use crate::features::{RawClick, RawImpression, Traffic};

pub const FACTOR_DIM: usize = 8;
const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExaminationMode {
    /// Examination depends on the position only.
    Separable,
    /// Examination depends on the position and the user's browsing segment.
    UserDependent,
}

impl ExaminationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(ExaminationMode::Separable),
            "user-dependent" | "user_dependent" => Ok(ExaminationMode::UserDependent),
            other => Err(Error::Config(format!("unknown examination mode '{other}'"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExaminationMode::Separable => "separable",
            ExaminationMode::UserDependent => "user-dependent",
        }
    }
}

/// Latent browsing habit. Shallow browsers rarely look past the top slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BrowsingSegment {
    Shallow,
    Deep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub users: usize,
    pub items: usize,
    pub queries: usize,
    pub categories: usize,
    pub geos: usize,
    /// Displayed slots per request (K).
    pub positions: usize,
    /// Candidate pool per request (J).
    pub candidates: usize,
    pub requests_per_day: usize,
    /// Logged days; the last one is the test day.
    pub days: usize,
    /// Requests on the test day (defaults to `requests_per_day`).
    pub test_requests: usize,
    /// Days simulated before day 0 whose clicks only feed behavior history.
    pub history_days: usize,
    pub randomized_fraction: f64,
    pub mode: ExaminationMode,
    /// Global decay exponent for the separable mode.
    pub eta: f64,
    pub eta_shallow: f64,
    pub eta_deep: f64,
    /// Fraction of users in the deep segment.
    pub deep_fraction: f64,
    /// Probability that the logged segment token names the user's true
    /// browsing segment; the rest are flipped.
    pub segment_label_accuracy: f64,
    pub factor_std: f64,
    pub base_offset: f64,
    pub min_bid: f64,
    pub max_bid: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            users: 1000,
            items: 500,
            queries: 20,
            categories: 20,
            geos: 10,
            positions: 10,
            candidates: 30,
            requests_per_day: 2000,
            days: 5,
            test_requests: 2000,
            history_days: 0,
            randomized_fraction: 0.05,
            mode: ExaminationMode::UserDependent,
            eta: 1.0,
            eta_shallow: 1.2,
            eta_deep: 0.3,
            deep_fraction: 0.5,
            segment_label_accuracy: 1.0,
            factor_std: 1.0 / (FACTOR_DIM as f64).sqrt(),
            base_offset: -1.0,
            min_bid: 0.5,
            max_bid: 2.0,
            seed: 1,
        }
    }
}

const SIM_KEYS: &[&str] = &[
    "users",
    "items",
    "queries",
    "categories",
    "geos",
    "positions",
    "candidates",
    "requests_per_day",
    "days",
    "test_requests",
    "history_days",
    "randomized_fraction",
    "mode",
    "eta",
    "eta_shallow",
    "eta_deep",
    "deep_fraction",
    "segment_label_accuracy",
    "factor_std",
    "base_offset",
    "min_bid",
    "max_bid",
    "seed",
];

impl SimConfig {
    pub fn from_section(s: &Section<'_>) -> Result<Self> {
        s.reject_unknown(SIM_KEYS)?;
        let mut c = SimConfig::default();
        let mut test_requests: Option<usize> = None;
        s.read("users", &mut c.users)?;
        s.read("items", &mut c.items)?;
        s.read("queries", &mut c.queries)?;
        s.read("categories", &mut c.categories)?;
        s.read("geos", &mut c.geos)?;
        s.read("positions", &mut c.positions)?;
        s.read("candidates", &mut c.candidates)?;
        s.read("requests_per_day", &mut c.requests_per_day)?;
        s.read("days", &mut c.days)?;
        if let Some(v) = s.get("test_requests")? {
            test_requests = Some(v);
        }
        s.read("history_days", &mut c.history_days)?;
        s.read("randomized_fraction", &mut c.randomized_fraction)?;
        if let Some(m) = s.raw("mode") {
            c.mode = ExaminationMode::parse(m)?;
        }
        s.read("eta", &mut c.eta)?;
        s.read("eta_shallow", &mut c.eta_shallow)?;
        s.read("eta_deep", &mut c.eta_deep)?;
        s.read("deep_fraction", &mut c.deep_fraction)?;
        s.read("segment_label_accuracy", &mut c.segment_label_accuracy)?;
        s.read("factor_std", &mut c.factor_std)?;
        s.read("base_offset", &mut c.base_offset)?;
        s.read("min_bid", &mut c.min_bid)?;
        s.read("max_bid", &mut c.max_bid)?;
        s.read("seed", &mut c.seed)?;
        c.test_requests = test_requests.unwrap_or(c.requests_per_day);
        c.validate()?;
        Ok(c)
    }

    /// Resolved `key = value` lines, in the same order as the accepted keys.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mode = self.mode.as_str();
        let vals: Vec<(&str, String)> = vec![
            ("users", self.users.to_string()),
            ("items", self.items.to_string()),
            ("queries", self.queries.to_string()),
            ("categories", self.categories.to_string()),
            ("geos", self.geos.to_string()),
            ("positions", self.positions.to_string()),
            ("candidates", self.candidates.to_string()),
            ("requests_per_day", self.requests_per_day.to_string()),
            ("days", self.days.to_string()),
            ("test_requests", self.test_requests.to_string()),
            ("history_days", self.history_days.to_string()),
            ("randomized_fraction", self.randomized_fraction.to_string()),
            ("mode", mode.to_string()),
            ("eta", self.eta.to_string()),
            ("eta_shallow", self.eta_shallow.to_string()),
            ("eta_deep", self.eta_deep.to_string()),
            ("deep_fraction", self.deep_fraction.to_string()),
            ("segment_label_accuracy", self.segment_label_accuracy.to_string()),
            ("factor_std", self.factor_std.to_string()),
            ("base_offset", self.base_offset.to_string()),
            ("min_bid", self.min_bid.to_string()),
            ("max_bid", self.max_bid.to_string()),
            ("seed", self.seed.to_string()),
        ];
        for (k, v) in vals {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("users", self.users),
            ("items", self.items),
            ("queries", self.queries),
            ("categories", self.categories),
            ("geos", self.geos),
            ("positions", self.positions),
            ("candidates", self.candidates),
            ("days", self.days),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.candidates > self.items {
            return Err(Error::Config(format!(
                "candidate pool {} larger than item count {}",
                self.candidates, self.items
            )));
        }
        for (name, p) in [
            ("randomized_fraction", self.randomized_fraction),
            ("deep_fraction", self.deep_fraction),
            ("segment_label_accuracy", self.segment_label_accuracy),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.min_bid > 0.0 && self.max_bid >= self.min_bid) {
            return Err(Error::Config("bids need 0 < min_bid <= max_bid".into()));
        }
        if !(self.factor_std >= 0.0 && self.factor_std.is_finite()) {
            return Err(Error::Config("factor_std must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Displayed slots per request: `min(J, K)`.
    pub fn effective_positions(&self) -> usize {
        self.candidates.min(self.positions)
    }

    pub fn test_day(&self) -> u32 {
        (self.days - 1) as u32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub config: SimConfig,
    user_factors: Vec<f64>,
    item_factors: Vec<f64>,
    query_affinity: Vec<f64>,
    segments: Vec<BrowsingSegment>,
    segment_labels: Vec<u8>,
    user_geo: Vec<usize>,
    item_category: Vec<usize>,
    item_bid: Vec<f64>,
}

fn factors(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n * FACTOR_DIM];
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n * FACTOR_DIM).map(|_| normal.sample(rng)).collect()
}

/// Draws every latent quantity from `seed`.
pub fn generate_world(config: &SimConfig, seed: u64) -> Result<SyntheticWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let user_factors = factors(&mut rng, config.users, config.factor_std);
    let item_factors = factors(&mut rng, config.items, config.factor_std);
    let query_affinity = factors(&mut rng, config.queries, config.factor_std);
    let mut segments = Vec::with_capacity(config.users);
    let mut segment_labels = Vec::with_capacity(config.users);
    let mut user_geo = Vec::with_capacity(config.users);
    for _ in 0..config.users {
        let seg = if rng.gen::<f64>() < config.deep_fraction { BrowsingSegment::Deep } else { BrowsingSegment::Shallow };
        let truth = (seg == BrowsingSegment::Deep) as u8;
        let label = if rng.gen::<f64>() < config.segment_label_accuracy { truth } else { 1 - truth };
        segments.push(seg);
        segment_labels.push(label);
        user_geo.push(rng.gen_range(0..config.geos));
    }
    let item_category = (0..config.items).map(|_| rng.gen_range(0..config.categories)).collect();
    let item_bid = (0..config.items).map(|_| rng.gen_range(config.min_bid..=config.max_bid)).collect();
    Ok(SyntheticWorld {
        config: config.clone(),
        user_factors,
        item_factors,
        query_affinity,
        segments,
        segment_labels,
        user_geo,
        item_category,
        item_bid,
    })
}

impl SyntheticWorld {
    fn row(v: &[f64], i: usize) -> &[f64] {
        &v[i * FACTOR_DIM..(i + 1) * FACTOR_DIM]
    }

    pub fn segment(&self, user: usize) -> BrowsingSegment {
        self.segments[user]
    }

    pub fn item_category(&self, item: usize) -> usize {
        self.item_category[item]
    }

    pub fn item_bid(&self, item: usize) -> f64 {
        self.item_bid[item]
    }

    /// Raw factor bytes, for determinism checks.
    pub fn factor_bytes(&self) -> Vec<u8> {
        self.user_factors
            .iter()
            .chain(&self.item_factors)
            .chain(&self.query_affinity)
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    /// Overrides the latent factors; used to build worlds with known relevance.
    pub fn set_factors(&mut self, user: usize, item: usize, user_f: [f64; FACTOR_DIM], item_f: [f64; FACTOR_DIM]) {
        self.user_factors[user * FACTOR_DIM..(user + 1) * FACTOR_DIM].copy_from_slice(&user_f);
        self.item_factors[item * FACTOR_DIM..(item + 1) * FACTOR_DIM].copy_from_slice(&item_f);
    }

    pub fn relevance_logit(&self, user: usize, query: usize, item: usize) -> f64 {
        let phi = Self::row(&self.item_factors, item);
        let theta = Self::row(&self.user_factors, user);
        let alpha = Self::row(&self.query_affinity, query);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        dot(theta, phi) + dot(alpha, phi) + self.config.base_offset
    }

    /// `p(R=1 | u, c, i)`; position never enters.
    pub fn relevance_probability(&self, user: usize, query: usize, item: usize) -> f64 {
        sigmoid(self.relevance_logit(user, query, item))
    }

    /// `p(E=1 | k, segment)` for 1-based `k`.
    pub fn examination_probability(&self, k: usize, segment: BrowsingSegment) -> f64 {
        let eta = match self.config.mode {
            ExaminationMode::Separable => self.config.eta,
            ExaminationMode::UserDependent => match segment {
                BrowsingSegment::Shallow => self.config.eta_shallow,
                BrowsingSegment::Deep => self.config.eta_deep,
            },
        };
        (k as f64).powf(-eta)
    }

    /// Examination curve `k = 1..=K` for one segment.
    pub fn examination_table(&self, segment: BrowsingSegment) -> Vec<f64> {
        (1..=self.config.positions).map(|k| self.examination_probability(k, segment)).collect()
    }

    pub fn oracle_ctr(&self, user: usize, query: usize, item: usize, k: usize) -> f64 {
        self.examination_probability(k, self.segments[user]) * self.relevance_probability(user, query, item)
    }
}

/// How the logging system orders the candidate pool.
pub enum RankingPolicy<'a> {
    /// Sort by true relevance (creates selection bias).
    OracleRelevance,
    /// Uniformly random order.
    Random,
    /// Sort by externally supplied scores, one per candidate.
    Model(&'a (dyn Fn(&SimRequest) -> Vec<f64> + Sync)),
}

/// Latent view of one simulated request, handed to model-driven policies.
#[derive(Clone, Debug)]
pub struct SimRequest {
    pub index: u64,
    pub user: usize,
    pub query: usize,
    pub hour: u32,
    pub dow: u32,
    pub ts: i64,
    pub candidates: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct SimOutput {
    /// Impressions of logged days `0..days`.
    pub impressions: Vec<RawImpression>,
    /// Clicks from all simulated days, history days included, in time order.
    pub history: Vec<RawClick>,
    pub randomized_requests: usize,
    pub total_requests: usize,
}

fn request_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

struct RequestLog {
    impressions: Vec<RawImpression>,
    clicks: Vec<RawClick>,
    randomized: bool,
}

/// Worker threads for generation: `POSRANK_THREADS`, default 1.
pub fn worker_threads() -> usize {
    std::env::var("POSRANK_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n: &usize| n >= 1).unwrap_or(1)
}

/// Simulates all history and logged days. Output depends only on the world,
/// the policy and `seed`; the thread count changes nothing.
pub fn simulate_traffic(world: &SyntheticWorld, policy: &RankingPolicy<'_>, seed: u64) -> SimOutput {
    let cfg = &world.config;
    let mut plan: Vec<(u64, i64, usize, usize)> = Vec::new(); // (index, abs day, slot, per-day count)
    let total_days = cfg.history_days + cfg.days;
    let mut index = 0u64;
    for abs_day in 0..total_days {
        let n = if abs_day + 1 == total_days { cfg.test_requests } else { cfg.requests_per_day };
        for slot in 0..n {
            plan.push((index, abs_day as i64, slot, n));
            index += 1;
        }
    }
    let threads = worker_threads().min(plan.len().max(1));
    let logs: Vec<RequestLog> = if threads <= 1 {
        plan.iter().map(|&p| simulate_request(world, policy, seed, p)).collect()
    } else {
        let chunk = plan.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = plan
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|&p| simulate_request(world, policy, seed, p)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("simulation worker panicked")).collect()
        })
    };
    let mut out = SimOutput { total_requests: logs.len(), ..Default::default() };
    for log in logs {
        out.randomized_requests += log.randomized as usize;
        out.impressions.extend(log.impressions);
        out.history.extend(log.clicks);
    }
    out
}

fn simulate_request(
    world: &SyntheticWorld,
    policy: &RankingPolicy<'_>,
    seed: u64,
    (index, abs_day, slot, per_day): (u64, i64, usize, usize),
) -> RequestLog {
    let cfg = &world.config;
    let mut rng = request_rng(seed, index);
    let ts = abs_day * SECONDS_PER_DAY + (slot as i64 * SECONDS_PER_DAY) / per_day.max(1) as i64;
    let hour = ((ts % SECONDS_PER_DAY) / 3600) as u32;
    let dow = (abs_day % 7) as u32;
    let user = rng.gen_range(0..cfg.users);
    let query = rng.gen_range(0..cfg.queries);
    let pool = sample(&mut rng, cfg.items, cfg.candidates).into_vec();
    let randomized = rng.gen::<f64>() < cfg.randomized_fraction;

    let mut order: Vec<usize> = (0..pool.len()).collect();
    match policy {
        RankingPolicy::OracleRelevance => {
            let rel: Vec<f64> = pool.iter().map(|&i| world.relevance_logit(user, query, i)).collect();
            order.sort_by(|&a, &b| rel[b].total_cmp(&rel[a]).then(a.cmp(&b)));
        }
        RankingPolicy::Random => order.shuffle(&mut rng),
        RankingPolicy::Model(f) => {
            let req = SimRequest { index, user, query, hour, dow, ts, candidates: pool.clone() };
            let scores = f(&req);
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        }
    }
    order.truncate(cfg.effective_positions());
    if randomized {
        order.shuffle(&mut rng);
    }

    let logged_day = abs_day - cfg.history_days as i64;
    let traffic = if randomized { Traffic::Randomized } else { Traffic::Regular };
    let mut log = RequestLog { impressions: Vec::new(), clicks: Vec::new(), randomized };
    for (slot_idx, &ci) in order.iter().enumerate() {
        let item = pool[ci];
        let k = slot_idx + 1;
        let p = world.oracle_ctr(user, query, item, k);
        let click = (rng.gen::<f64>() < p) as u8;
        if logged_day >= 0 {
            log.impressions.push(RawImpression {
                request_id: index,
                day: logged_day as u32,
                traffic,
                user_id: format!("u{user}"),
                segment: format!("s{}", world.segment_labels[user]),
                query: format!("q{query}"),
                geo: format!("g{}", world.user_geo[user]),
                hour: hour.to_string(),
                dow: dow.to_string(),
                item_id: format!("i{item}"),
                category: format!("c{}", world.item_category[item]),
                position: k as u32,
                bid: world.item_bid[item],
                click,
                ts,
            });
        }
        if click == 1 {
            log.clicks.push(RawClick {
                user_id: format!("u{user}"),
                ts,
                position: k as u32,
                item_id: format!("i{item}"),
                category: format!("c{}", world.item_category[item]),
                query: format!("q{query}"),
                geo: format!("g{}", world.user_geo[user]),
                hour: hour.to_string(),
                dow: dow.to_string(),
            });
        }
    }
    log
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig { users: 6, items: 9, queries: 3, requests_per_day: 50, test_requests: 50, candidates: 5, positions: 4, ..Default::default() }
    }

    #[test]
    fn worlds_are_seed_deterministic() {
        let a = generate_world(&small(), 5).unwrap();
        let b = generate_world(&small(), 5).unwrap();
        let c = generate_world(&small(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.factor_bytes(), c.factor_bytes());
        let w = generate_world(&SimConfig { positions: 10, ..small() }, 1).unwrap();
        assert_eq!(w.examination_table(BrowsingSegment::Deep).len(), 10);
        assert_eq!(w.examination_table(BrowsingSegment::Shallow).len(), 10);
    }

    #[test]
    fn relevance_examples() {
        let cfg = SimConfig { factor_std: 0.0, base_offset: 0.0, ..small() };
        let mut w = generate_world(&cfg, 1).unwrap();
        assert_eq!(w.relevance_probability(0, 0, 0), 0.5);
        let mut last = 0.5;
        for scale in [0.1, 0.5, 1.0, 3.0] {
            w.set_factors(0, 0, [scale; FACTOR_DIM], [1.0; FACTOR_DIM]);
            let p = w.relevance_probability(0, 0, 0);
            assert!(p > last);
            last = p;
        }
    }

    #[test]
    fn examination_examples() {
        let sep = generate_world(&SimConfig { mode: ExaminationMode::Separable, eta: 1.0, ..small() }, 1).unwrap();
        let dep = generate_world(&SimConfig { mode: ExaminationMode::UserDependent, ..small() }, 1).unwrap();
        for seg in [BrowsingSegment::Shallow, BrowsingSegment::Deep] {
            assert_eq!(sep.examination_probability(1, seg), 1.0);
            assert_eq!(dep.examination_probability(1, seg), 1.0);
            assert_eq!(sep.examination_probability(2, seg), 0.5);
        }
        assert!((dep.examination_probability(2, BrowsingSegment::Deep) - 0.8123).abs() < 1e-4);
        for seg in [BrowsingSegment::Shallow, BrowsingSegment::Deep] {
            let t = dep.examination_table(seg);
            assert!(t.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn oracle_ctr_factorizes() {
        for mode in [ExaminationMode::Separable, ExaminationMode::UserDependent] {
            let w = generate_world(&SimConfig { mode, ..small() }, 3).unwrap();
            for u in 0..w.config.users {
                for q in 0..w.config.queries {
                    for i in 0..w.config.items {
                        assert_eq!(w.oracle_ctr(u, q, i, 1), w.relevance_probability(u, q, i));
                        for k in 2..=w.config.positions {
                            let ratio = w.oracle_ctr(u, q, i, k) / w.oracle_ctr(u, q, i, 1);
                            let expected = match mode {
                                ExaminationMode::Separable => w.examination_probability(k, BrowsingSegment::Deep),
                                ExaminationMode::UserDependent => w.examination_probability(k, w.segment(u)),
                            };
                            assert!((ratio - expected).abs() < 1e-12);
                        }
                    }
                }
            }
        }
        let zero = SimConfig { factor_std: 0.0, base_offset: -800.0, ..small() };
        let w = generate_world(&zero, 1).unwrap();
        for k in 1..=4 {
            assert_eq!(w.oracle_ctr(0, 0, 0, k), 0.0);
        }
    }

    #[test]
    fn simulation_is_deterministic_and_well_formed() {
        let cfg = SimConfig { history_days: 1, ..small() };
        let w = generate_world(&cfg, 9).unwrap();
        let a = simulate_traffic(&w, &RankingPolicy::OracleRelevance, 4);
        let b = simulate_traffic(&w, &RankingPolicy::OracleRelevance, 4);
        assert_eq!(a.impressions, b.impressions);
        assert_eq!(a.history, b.history);
        assert_eq!(a.impressions.len(), 5 * 50 * 4);
        assert!(a.impressions.iter().all(|r| (1..=4).contains(&r.position) && r.bid > 0.0));
        assert!(a.history.windows(2).all(|w| w[0].ts <= w[1].ts));
        // history-day clicks precede day 0 and never appear as impressions
        assert!(a.impressions.iter().all(|r| r.ts >= SECONDS_PER_DAY));
        let random = simulate_traffic(&w, &RankingPolicy::Random, 4);
        assert_ne!(random.impressions, a.impressions);
        let scorer = |r: &SimRequest| r.candidates.iter().map(|&c| -(c as f64)).collect();
        let model = simulate_traffic(&w, &RankingPolicy::Model(&scorer), 4);
        let first = &model.impressions[0];
        let pool_min = model.impressions.iter().filter(|r| r.request_id == first.request_id).map(|r| r.item_id.clone());
        assert_eq!(pool_min.count(), 4);
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let w = generate_world(&small(), 2).unwrap();
        let one = simulate_traffic(&w, &RankingPolicy::OracleRelevance, 8);
        std::env::set_var("POSRANK_THREADS", "3");
        let three = simulate_traffic(&w, &RankingPolicy::OracleRelevance, 8);
        std::env::remove_var("POSRANK_THREADS");
        assert_eq!(one.impressions, three.impressions);
    }
}
