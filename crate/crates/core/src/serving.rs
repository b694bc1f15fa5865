//! Request-time allocation of candidates to positions and the latency benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{BehaviorRecord, Candidate, Field, PositionBehaviorSequences, Request, DIF_BUCKETS};
use crate::model::{Model, PredictionMatrix};

/// Largest `min(J, K)` the exhaustive search accepts.
pub const EXHAUSTIVE_LIMIT: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    /// `slots[k - 1]` is the candidate shown at position `k`.
    pub slots: Vec<usize>,
    /// `Σ CTR(j, k) · bid(j)` over filled positions.
    pub value: f64,
}

impl Allocation {
    pub fn to_tsv(&self, ctr: &PredictionMatrix, bids: &[f64]) -> String {
        let mut out = String::from("position\tcandidate\tctr\tbid\tecpm\n");
        for (i, &j) in self.slots.iter().enumerate() {
            let p = ctr.ctr(j, i + 1);
            let _ = writeln!(out, "{}\t{}\t{:.6}\t{:.6}\t{:.6}", i + 1, j, p, bids[j], p * bids[j]);
        }
        let _ = writeln!(out, "# value={:.6}", self.value);
        out
    }
}

fn check_instance(ctr: &PredictionMatrix, bids: &[f64]) -> Result<()> {
    if bids.len() != ctr.candidates {
        return Err(Error::usage(format!("{} bids for {} candidates", bids.len(), ctr.candidates)));
    }
    if ctr.values.len() != ctr.candidates * ctr.positions {
        return Err(Error::usage("matrix size disagrees with its shape"));
    }
    if let Some(b) = bids.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
        return Err(Error::usage(format!("bid {b} must be positive and finite")));
    }
    if ctr.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("CTR matrix has non-finite entries"));
    }
    Ok(())
}

/// Fills positions top-down with the unassigned candidate of highest
/// `CTR · bid`; ties go to the lower candidate index.
pub fn greedy_allocate(ctr: &PredictionMatrix, bids: &[f64]) -> Result<Allocation> {
    check_instance(ctr, bids)?;
    let m = ctr.candidates.min(ctr.positions);
    let mut taken = vec![false; ctr.candidates];
    let mut slots = Vec::with_capacity(m);
    let mut value = 0.0;
    for k in 1..=m {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..ctr.candidates).filter(|&j| !taken[j]) {
            let e = ctr.ctr(j, k) * bids[j];
            if best.is_none_or(|(_, b)| e > b) {
                best = Some((j, e));
            }
        }
        let (j, e) = best.expect("m <= J leaves a free candidate");
        taken[j] = true;
        slots.push(j);
        value += e;
    }
    Ok(Allocation { slots, value })
}

/// Exact maximizer over injective assignments of positions `1..=min(J, K)`,
/// by dynamic programming over subsets of filled positions.
pub fn exhaustive_allocate(ctr: &PredictionMatrix, bids: &[f64]) -> Result<Allocation> {
    check_instance(ctr, bids)?;
    let m = ctr.candidates.min(ctr.positions);
    if m > EXHAUSTIVE_LIMIT {
        return Err(Error::usage(format!("exhaustive allocation limited to min(J, K) <= {EXHAUSTIVE_LIMIT}, got {m}")));
    }
    let full = (1usize << m) - 1;
    let states = 1usize << m;
    // best[mask]: best value filling exactly the positions in mask with the
    // candidates seen so far; choice[j][mask]: position given to j, if any
    let mut best = vec![f64::NEG_INFINITY; states];
    best[0] = 0.0;
    let mut choice: Vec<Vec<Option<u8>>> = Vec::with_capacity(ctr.candidates);
    for j in 0..ctr.candidates {
        let mut next = best.clone();
        let mut pick = vec![None; states];
        for mask in 0..states {
            if best[mask] == f64::NEG_INFINITY {
                continue;
            }
            for p in (0..m).filter(|p| mask & (1 << p) == 0) {
                let v = best[mask] + ctr.ctr(j, p + 1) * bids[j];
                let to = mask | (1 << p);
                if v > next[to] {
                    next[to] = v;
                    pick[to] = Some(p as u8);
                }
            }
        }
        best = next;
        choice.push(pick);
    }
    let mut slots = vec![usize::MAX; m];
    let mut mask = full;
    for j in (0..ctr.candidates).rev() {
        if let Some(p) = choice[j][mask] {
            slots[p as usize] = j;
            mask &= !(1 << p);
        }
    }
    debug_assert_eq!(mask, 0);
    // recompute in position order so the value is comparable with greedy's sum
    let value = slots.iter().enumerate().map(|(i, &j)| ctr.ctr(j, i + 1) * bids[j]).sum();
    Ok(Allocation { slots, value })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyRow {
    pub variant: String,
    pub candidates: usize,
    pub positions: usize,
    pub median_us: f64,
    pub p95_us: f64,
    pub trials: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatencyTable {
    pub rows: Vec<LatencyRow>,
}

impl LatencyTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant\tJ\tK\tmedian_us\tp95_us\ttrials\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.1}\t{:.1}\t{}",
                r.variant, r.candidates, r.positions, r.median_us, r.p95_us, r.trials
            );
        }
        out
    }

    pub fn median(&self, variant: &str, j: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant && r.candidates == j).map(|r| r.median_us)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub candidate_counts: Vec<usize>,
    pub trials: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig { candidate_counts: vec![10, 50, 200, 500], trials: 30, warmup: 5, seed: 1 }
    }
}

/// A request with `j` candidates and every position sequence filled to `L`.
pub fn synthetic_request(model: &Model, j: usize, rng: &mut ChaCha8Rng) -> Request {
    let v = model.config.vocab_sizes;
    let id = |f: Field, rng: &mut ChaCha8Rng| rng.gen_range(1..v[f.index()].max(2)) as u32;
    let record = |rng: &mut ChaCha8Rng| BehaviorRecord {
        item: [id(Field::ItemId, rng), id(Field::Category, rng)],
        context: [id(Field::Query, rng), id(Field::Geo, rng), id(Field::Hour, rng), id(Field::Dow, rng)],
        dif_bucket: rng.gen_range(0..DIF_BUCKETS as u32),
    };
    let (k, l) = (model.config.positions, model.config.seq_len);
    let mut behaviors = PositionBehaviorSequences::empty(k, l);
    for seq in behaviors.sequences.iter_mut() {
        *seq = (0..l).map(|_| record(rng)).collect();
    }
    let recent = (0..l).map(|_| record(rng)).collect();
    // distinct item ids keep the request valid even when j exceeds the vocabulary
    let candidates = (0..j)
        .map(|c| {
            let item = if c + 1 < v[Field::ItemId.index()] { c as u32 + 1 } else { 0 };
            Candidate { item: [item, id(Field::Category, rng)], bid: rng.gen_range(0.5..2.0) }
        })
        .collect();
    Request {
        request_id: rng.gen(),
        ts: 0,
        user: [id(Field::UserId, rng), id(Field::Segment, rng)],
        context: [id(Field::Query, rng), id(Field::Geo, rng), id(Field::Hour, rng), id(Field::Dow, rng)],
        candidates,
        behaviors,
        recent,
    }
}

/// Predict-then-allocate for one request; the unit the benchmark times.
pub fn serve(model: &Model, request: &Request) -> Result<(PredictionMatrix, Allocation)> {
    let ctr = model.predict_matrix(request)?;
    let bids: Vec<f64> = request.candidates.iter().map(|c| c.bid).collect();
    let alloc = greedy_allocate(&ctr, &bids)?;
    Ok((ctr, alloc))
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Single-threaded wall-clock latency of [`serve`] per model and candidate
/// count. Every model sees the same synthetic requests.
pub fn benchmark_latency(models: &[&Model], cfg: &BenchmarkConfig) -> Result<LatencyTable> {
    let first = models.first().ok_or_else(|| Error::usage("nothing to benchmark"))?;
    if models.iter().any(|m| m.config != first.config) {
        return Err(Error::usage("benchmarked models must share one model config"));
    }
    if cfg.trials < 30 || cfg.warmup < 5 {
        return Err(Error::usage("benchmark needs at least 30 trials and 5 warm-up runs"));
    }
    let mut table = LatencyTable::default();
    for &j in &cfg.candidate_counts {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(j as u64);
        let requests: Vec<Request> = (0..cfg.trials).map(|_| synthetic_request(first, j, &mut rng)).collect();
        for model in models {
            for r in requests.iter().cycle().take(cfg.warmup) {
                serve(model, r)?;
            }
            let mut times = Vec::with_capacity(cfg.trials);
            for r in &requests {
                let t = Instant::now();
                let out = serve(model, r)?;
                times.push(t.elapsed().as_secs_f64() * 1e6);
                std::hint::black_box(out);
            }
            times.sort_by(f64::total_cmp);
            log::info!("{} J={j}: median {:.0}us", model.variant, percentile(&times, 0.5));
            table.rows.push(LatencyRow {
                variant: model.variant.tag().to_string(),
                candidates: j,
                positions: model.config.positions,
                median_us: percentile(&times, 0.5),
                p95_us: percentile(&times, 0.95),
                trials: cfg.trials,
            });
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: &[&[f64]]) -> PredictionMatrix {
        PredictionMatrix {
            candidates: rows.len(),
            positions: rows[0].len(),
            values: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    #[test]
    fn worked_examples() {
        let one = matrix(&[&[0.3, 0.2]]);
        assert_eq!(greedy_allocate(&one, &[1.0]).unwrap().slots, vec![0]);

        let m = matrix(&[&[0.4, 0.2], &[0.2, 0.15]]);
        let g = greedy_allocate(&m, &[1.0, 1.0]).unwrap();
        assert_eq!(g.slots, vec![0, 1]);
        assert!((g.value - 0.55).abs() < 1e-12);
        assert_eq!(exhaustive_allocate(&m, &[1.0, 1.0]).unwrap(), g);

        let m = matrix(&[&[0.4, 0.2], &[0.25, 0.15]]);
        let g = greedy_allocate(&m, &[1.0, 4.0]).unwrap();
        assert_eq!(g.slots, vec![1, 0]);
        assert!((g.value - 1.2).abs() < 1e-12);

        let m = matrix(&[&[0.3, 0.2], &[0.28, 0.1]]);
        let g = greedy_allocate(&m, &[1.0, 1.0]).unwrap();
        let e = exhaustive_allocate(&m, &[1.0, 1.0]).unwrap();
        assert_eq!(g.slots, vec![0, 1]);
        assert!((g.value - 0.40).abs() < 1e-12);
        assert_eq!(e.slots, vec![1, 0]);
        assert!((e.value - 0.48).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_lower_index_and_errors() {
        let m = matrix(&[&[0.2], &[0.2], &[0.1]]);
        assert_eq!(greedy_allocate(&m, &[1.0, 1.0, 2.0]).unwrap().slots, vec![0]);
        assert!(greedy_allocate(&m, &[1.0, 0.0, 1.0]).is_err());
        assert!(greedy_allocate(&m, &[1.0]).is_err());
        let big = PredictionMatrix { candidates: 9, positions: 9, values: vec![0.1; 81] };
        assert!(matches!(exhaustive_allocate(&big, &[1.0; 9]), Err(Error::Usage(_))));
    }

    #[test]
    fn tsv_layout() {
        let m = matrix(&[&[0.4, 0.2], &[0.2, 0.15]]);
        let a = greedy_allocate(&m, &[1.0, 1.0]).unwrap();
        assert!(a.to_tsv(&m, &[1.0, 1.0]).starts_with("position\tcandidate\tctr\tbid\tecpm\n1\t0\t0.400000\t1.000000\t0.400000\n"));
    }

    fn brute_force(m: &PredictionMatrix, bids: &[f64]) -> f64 {
        fn go(m: &PredictionMatrix, bids: &[f64], k: usize, used: &mut Vec<bool>) -> f64 {
            if k > m.candidates.min(m.positions) {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for j in 0..m.candidates {
                if !used[j] {
                    used[j] = true;
                    best = best.max(m.ctr(j, k) * bids[j] + go(m, bids, k + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        go(m, bids, 1, &mut vec![false; m.candidates])
    }

    fn instance() -> impl Strategy<Value = (PredictionMatrix, Vec<f64>)> {
        (1usize..6, 1usize..5).prop_flat_map(|(j, k)| {
            (prop::collection::vec(0.001f64..0.999, j * k), prop::collection::vec(0.1f64..5.0, j))
                .prop_map(move |(values, bids)| (PredictionMatrix { candidates: j, positions: k, values }, bids))
        })
    }

    proptest! {
        #[test]
        fn dynamic_program_finds_the_optimum((m, bids) in instance()) {
            let e = exhaustive_allocate(&m, &bids).unwrap();
            let g = greedy_allocate(&m, &bids).unwrap();
            prop_assert!((e.value - brute_force(&m, &bids)).abs() < 1e-12);
            prop_assert!(g.value <= e.value + 1e-12);
            let mut seen = e.slots.clone();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), e.slots.len());
        }

        #[test]
        fn common_bid_scale_keeps_the_greedy_choice((m, bids) in instance(), scale in 0.01f64..100.0) {
            let scaled: Vec<f64> = bids.iter().map(|b| b * scale).collect();
            let a = greedy_allocate(&m, &bids).unwrap();
            let b = greedy_allocate(&m, &scaled).unwrap();
            prop_assert_eq!(a.slots, b.slots);
        }
    }
}
