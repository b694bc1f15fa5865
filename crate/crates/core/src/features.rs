//! Feature vocabularies, impression records, TSV dataset I/O and the
//! per-position behavior sequences.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const IMPRESSION_HEADER: &str =
    "request_id\tday\ttraffic\tuser_id\tsegment\tquery\tgeo\thour\tdow\titem_id\tcategory\tposition\tbid\tclick\tts";
pub const HISTORY_HEADER: &str = "user_id\tts\tposition\titem_id\tcategory\tquery\tgeo\thour\tdow";

/// Number of time-difference buckets.
pub const DIF_BUCKETS: usize = 16;

/// Sparse feature fields. Behavior records reuse the item and context
/// fields, so one embedding table serves both sides.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    UserId,
    Segment,
    Query,
    Geo,
    Hour,
    Dow,
    ItemId,
    Category,
}

impl Field {
    pub const ALL: [Field; 8] = [
        Field::UserId,
        Field::Segment,
        Field::Query,
        Field::Geo,
        Field::Hour,
        Field::Dow,
        Field::ItemId,
        Field::Category,
    ];
    pub const USER: [Field; 2] = [Field::UserId, Field::Segment];
    pub const CONTEXT: [Field; 4] = [Field::Query, Field::Geo, Field::Hour, Field::Dow];
    pub const ITEM: [Field; 2] = [Field::ItemId, Field::Category];

    pub fn name(self) -> &'static str {
        match self {
            Field::UserId => "user_id",
            Field::Segment => "segment",
            Field::Query => "query",
            Field::Geo => "geo",
            Field::Hour => "hour",
            Field::Dow => "dow",
            Field::ItemId => "item_id",
            Field::Category => "category",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Traffic {
    Regular,
    Randomized,
}

impl Traffic {
    pub fn as_str(self) -> &'static str {
        match self {
            Traffic::Regular => "regular",
            Traffic::Randomized => "randomized",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "regular" => Some(Traffic::Regular),
            "randomized" => Some(Traffic::Randomized),
            _ => None,
        }
    }
}

impl fmt::Display for Traffic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Token → id map for one field. Id 0 is the shared unknown/padding id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldVocab {
    ids: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl FieldVocab {
    fn new() -> Self {
        FieldVocab { ids: HashMap::new(), tokens: vec![String::new()] }
    }

    fn add(&mut self, token: &str) {
        if !self.ids.contains_key(token) {
            self.ids.insert(token.to_string(), self.tokens.len() as u32);
            self.tokens.push(token.to_string());
        }
    }

    pub fn encode(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(0)
    }

    /// Token for an id; `None` for the unknown id.
    pub fn decode(&self, id: u32) -> Option<&str> {
        match id {
            0 => None,
            i => self.tokens.get(i as usize).map(String::as_str),
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    fields: Vec<FieldVocab>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary { fields: Field::ALL.iter().map(|_| FieldVocab::new()).collect() }
    }
}

impl Vocabulary {
    pub fn field(&self, f: Field) -> &FieldVocab {
        &self.fields[f.index()]
    }

    pub fn encode(&self, f: Field, token: &str) -> u32 {
        self.field(f).encode(token)
    }

    pub fn sizes(&self) -> [usize; 8] {
        let mut out = [0; 8];
        for f in Field::ALL {
            out[f.index()] = self.field(f).size();
        }
        out
    }
}

/// Counts tokens over impressions and behavior clicks and assigns ids in
/// first-seen order to every token seen at least `min_count` times.
pub fn build_vocabulary<'a>(
    impressions: impl IntoIterator<Item = &'a RawImpression>,
    clicks: impl IntoIterator<Item = &'a RawClick>,
    min_count: usize,
) -> Vocabulary {
    let mut order: Vec<Vec<String>> = vec![Vec::new(); Field::ALL.len()];
    let mut counts: Vec<HashMap<String, usize>> = vec![HashMap::new(); Field::ALL.len()];
    let mut see = |f: Field, tok: &str| {
        let c = counts[f.index()].entry(tok.to_string()).or_insert(0);
        if *c == 0 {
            order[f.index()].push(tok.to_string());
        }
        *c += 1;
    };
    for r in impressions {
        for (f, tok) in r.tokens() {
            see(f, tok);
        }
    }
    for c in clicks {
        for (f, tok) in c.tokens() {
            see(f, tok);
        }
    }
    let mut vocab = Vocabulary::default();
    for f in Field::ALL {
        for tok in &order[f.index()] {
            if counts[f.index()][tok] >= min_count.max(1) {
                vocab.fields[f.index()].add(tok);
            }
        }
    }
    vocab
}

/// One impression row in token form, exactly as stored in the TSV log.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImpression {
    pub request_id: u64,
    pub day: u32,
    pub traffic: Traffic,
    pub user_id: String,
    pub segment: String,
    pub query: String,
    pub geo: String,
    pub hour: String,
    pub dow: String,
    pub item_id: String,
    pub category: String,
    pub position: u32,
    pub bid: f64,
    pub click: u8,
    pub ts: i64,
}

impl RawImpression {
    fn tokens(&self) -> [(Field, &str); 8] {
        [
            (Field::UserId, &self.user_id),
            (Field::Segment, &self.segment),
            (Field::Query, &self.query),
            (Field::Geo, &self.geo),
            (Field::Hour, &self.hour),
            (Field::Dow, &self.dow),
            (Field::ItemId, &self.item_id),
            (Field::Category, &self.category),
        ]
    }

    fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.request_id,
            self.day,
            self.traffic,
            self.user_id,
            self.segment,
            self.query,
            self.geo,
            self.hour,
            self.dow,
            self.item_id,
            self.category,
            self.position,
            self.bid,
            self.click,
            self.ts
        )
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 15 {
            return Err(parse_err(lineno, format!("expected 15 columns, found {}", cols.len())));
        }
        let traffic = Traffic::parse(cols[2])
            .ok_or_else(|| parse_err(lineno, format!("traffic '{}' not in {{regular,randomized}}", cols[2])))?;
        Ok(RawImpression {
            request_id: num(cols[0], "request_id", lineno)?,
            day: num(cols[1], "day", lineno)?,
            traffic,
            user_id: cols[3].to_string(),
            segment: cols[4].to_string(),
            query: cols[5].to_string(),
            geo: cols[6].to_string(),
            hour: cols[7].to_string(),
            dow: cols[8].to_string(),
            item_id: cols[9].to_string(),
            category: cols[10].to_string(),
            position: num(cols[11], "position", lineno)?,
            bid: num(cols[12], "bid", lineno)?,
            click: num(cols[13], "click", lineno)?,
            ts: num(cols[14], "ts", lineno)?,
        })
    }
}

/// One historical click in token form (behavior history TSV).
#[derive(Clone, Debug, PartialEq)]
pub struct RawClick {
    pub user_id: String,
    pub ts: i64,
    pub position: u32,
    pub item_id: String,
    pub category: String,
    pub query: String,
    pub geo: String,
    pub hour: String,
    pub dow: String,
}

impl RawClick {
    fn tokens(&self) -> [(Field, &str); 7] {
        [
            (Field::UserId, &self.user_id),
            (Field::ItemId, &self.item_id),
            (Field::Category, &self.category),
            (Field::Query, &self.query),
            (Field::Geo, &self.geo),
            (Field::Hour, &self.hour),
            (Field::Dow, &self.dow),
        ]
    }

    fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.user_id, self.ts, self.position, self.item_id, self.category, self.query, self.geo, self.hour, self.dow
        )
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 9 {
            return Err(parse_err(lineno, format!("expected 9 columns, found {}", cols.len())));
        }
        Ok(RawClick {
            user_id: cols[0].to_string(),
            ts: num(cols[1], "ts", lineno)?,
            position: num(cols[2], "position", lineno)?,
            item_id: cols[3].to_string(),
            category: cols[4].to_string(),
            query: cols[5].to_string(),
            geo: cols[6].to_string(),
            hour: cols[7].to_string(),
            dow: cols[8].to_string(),
        })
    }
}

fn parse_err(line: usize, msg: String) -> Error {
    Error::Parse { line, msg }
}

fn num<T: std::str::FromStr>(s: &str, what: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| parse_err(line, format!("bad {what} '{s}'")))
}

/// Encoded impression.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Impression {
    pub request_id: u64,
    pub day: u32,
    pub traffic: Traffic,
    /// user id, segment
    pub user: [u32; 2],
    /// query, geo, hour, day-of-week
    pub context: [u32; 4],
    /// item id, category
    pub item: [u32; 2],
    /// 1-based display slot.
    pub position: u32,
    pub bid: f64,
    pub click: u8,
    pub ts: i64,
}

/// Encodes and validates one row. `max_position` is K.
pub fn encode_impression(row: &RawImpression, vocab: &Vocabulary, max_position: usize) -> Result<Impression> {
    if row.position == 0 || row.position as usize > max_position {
        return Err(Error::Validation(format!(
            "request {}: position {} outside 1..={max_position}",
            row.request_id, row.position
        )));
    }
    if row.click > 1 {
        return Err(Error::Validation(format!("request {}: click {} not in {{0,1}}", row.request_id, row.click)));
    }
    if !(row.bid > 0.0 && row.bid.is_finite()) {
        return Err(Error::Validation(format!("request {}: bid {} must be positive", row.request_id, row.bid)));
    }
    let e = |f, t: &str| vocab.encode(f, t);
    Ok(Impression {
        request_id: row.request_id,
        day: row.day,
        traffic: row.traffic,
        user: [e(Field::UserId, &row.user_id), e(Field::Segment, &row.segment)],
        context: [
            e(Field::Query, &row.query),
            e(Field::Geo, &row.geo),
            e(Field::Hour, &row.hour),
            e(Field::Dow, &row.dow),
        ],
        item: [e(Field::ItemId, &row.item_id), e(Field::Category, &row.category)],
        position: row.position,
        bid: row.bid,
        click: row.click,
        ts: row.ts,
    })
}

/// Inverse of [`encode_impression`] for known tokens.
pub fn decode_impression(imp: &Impression, vocab: &Vocabulary) -> RawImpression {
    let d = |f: Field, id: u32| vocab.field(f).decode(id).unwrap_or("").to_string();
    RawImpression {
        request_id: imp.request_id,
        day: imp.day,
        traffic: imp.traffic,
        user_id: d(Field::UserId, imp.user[0]),
        segment: d(Field::Segment, imp.user[1]),
        query: d(Field::Query, imp.context[0]),
        geo: d(Field::Geo, imp.context[1]),
        hour: d(Field::Hour, imp.context[2]),
        dow: d(Field::Dow, imp.context[3]),
        item_id: d(Field::ItemId, imp.item[0]),
        category: d(Field::Category, imp.item[1]),
        position: imp.position,
        bid: imp.bid,
        click: imp.click,
        ts: imp.ts,
    }
}

fn read_tsv<T>(path: &Path, header: &str, parse: impl Fn(&str, usize) -> Result<T>) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(h) => {
            let h = h?;
            if h != header {
                return Err(Error::io(format!(
                    "{}: schema mismatch, header '{}' does not match expected layout",
                    path.display(),
                    h
                )));
            }
        }
        None => return Err(Error::io(format!("{}: missing header row", path.display()))),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(parse(&line, i + 2)?);
    }
    Ok(out)
}

fn write_tsv<'a, T: 'a>(
    path: &Path,
    header: &str,
    rows: impl IntoIterator<Item = &'a T>,
    line: impl Fn(&T) -> String,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{header}")?;
    for r in rows {
        writeln!(w, "{}", line(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<RawImpression>> {
    read_tsv(path, IMPRESSION_HEADER, RawImpression::parse)
}

pub fn write_dataset<'a>(path: &Path, rows: impl IntoIterator<Item = &'a RawImpression>) -> Result<()> {
    write_tsv(path, IMPRESSION_HEADER, rows, RawImpression::to_line)
}

pub fn read_history(path: &Path) -> Result<Vec<RawClick>> {
    read_tsv(path, HISTORY_HEADER, RawClick::parse)
}

pub fn write_history<'a>(path: &Path, rows: impl IntoIterator<Item = &'a RawClick>) -> Result<()> {
    write_tsv(path, HISTORY_HEADER, rows, RawClick::to_line)
}

/// Train / test partitions of one dataset.
#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<RawImpression>,
    pub regular_test: Vec<RawImpression>,
    pub randomized_test: Vec<RawImpression>,
}

/// Train is every impression from a day before `test_day`; the test day is
/// partitioned by traffic kind. Later days are dropped.
pub fn split_dataset(impressions: &[RawImpression], test_day: u32) -> Split {
    let mut split = Split::default();
    for imp in impressions {
        if imp.day < test_day {
            split.train.push(imp.clone());
        } else if imp.day == test_day {
            match imp.traffic {
                Traffic::Regular => split.regular_test.push(imp.clone()),
                Traffic::Randomized => split.randomized_test.push(imp.clone()),
            }
        }
    }
    for (name, part) in [
        ("train", &split.train),
        ("regular-test", &split.regular_test),
        ("randomized-test", &split.randomized_test),
    ] {
        if part.is_empty() {
            log::warn!("{name} partition is empty");
        }
    }
    split
}

/// Clicked item with its click-time context and age bucket.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct BehaviorRecord {
    pub item: [u32; 2],
    pub context: [u32; 4],
    pub dif_bucket: u32,
}

/// `min(15, floor(log2(1 + Δseconds/60)))`.
pub fn time_bucket(delta_seconds: i64) -> u32 {
    let minutes = delta_seconds.max(0) as f64 / 60.0;
    ((1.0 + minutes).log2().floor() as u32).min(DIF_BUCKETS as u32 - 1)
}

/// Per-position behavior sequences `B_1..B_K`, each most-recent-first and
/// at most `max_len` long. Padding to `max_len` is implicit: the validity
/// mask of [`PositionBehaviorSequences::mask`] marks real records.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PositionBehaviorSequences {
    pub sequences: Vec<Vec<BehaviorRecord>>,
    pub max_len: usize,
}

impl PositionBehaviorSequences {
    pub fn empty(k: usize, max_len: usize) -> Self {
        PositionBehaviorSequences { sequences: vec![Vec::new(); k], max_len }
    }

    pub fn positions(&self) -> usize {
        self.sequences.len()
    }

    /// Sequence for 1-based position `k`.
    pub fn at(&self, k: usize) -> &[BehaviorRecord] {
        &self.sequences[k - 1]
    }

    /// Sequence for `k` padded to `max_len` with the id-0 record.
    pub fn padded(&self, k: usize) -> Vec<BehaviorRecord> {
        let mut s = self.at(k).to_vec();
        s.resize(self.max_len.max(s.len()), BehaviorRecord::default());
        s
    }

    pub fn mask(&self, k: usize) -> Vec<bool> {
        let n = self.at(k).len();
        (0..self.max_len.max(n)).map(|i| i < n).collect()
    }

    pub fn total_records(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// One historical click in encoded form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClickEvent {
    pub ts: i64,
    pub position: u32,
    pub item: [u32; 2],
    pub context: [u32; 4],
}

impl ClickEvent {
    fn record(&self, reference_ts: i64) -> BehaviorRecord {
        BehaviorRecord { item: self.item, context: self.context, dif_bucket: time_bucket(reference_ts - self.ts) }
    }
}

/// Counts of events dropped while building sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SequenceDiagnostics {
    /// Events at or after the reference timestamp.
    pub leakage_excluded: usize,
    /// Events whose position lies outside `1..=K`.
    pub out_of_range: usize,
}

/// Places each click strictly before `reference_ts` into the sequence of the
/// position it was logged at, keeping the `max_len` most recent per position.
pub fn build_position_behavior_sequences(
    history: &[ClickEvent],
    reference_ts: i64,
    k: usize,
    max_len: usize,
    diag: &mut SequenceDiagnostics,
) -> PositionBehaviorSequences {
    let mut seqs = PositionBehaviorSequences::empty(k, max_len);
    let mut events: Vec<&ClickEvent> = history.iter().collect();
    events.sort_by_key(|e| e.ts);
    for e in events.into_iter().rev() {
        if e.ts >= reference_ts {
            diag.leakage_excluded += 1;
            continue;
        }
        if e.position == 0 || e.position as usize > k {
            diag.out_of_range += 1;
            continue;
        }
        let s = &mut seqs.sequences[e.position as usize - 1];
        if s.len() < max_len {
            s.push(e.record(reference_ts));
        }
    }
    seqs
}

/// Position-agnostic sequence of the `max_len` most recent clicks before
/// `reference_ts`.
pub fn build_recent_sequence(history: &[ClickEvent], reference_ts: i64, max_len: usize) -> Vec<BehaviorRecord> {
    let mut events: Vec<&ClickEvent> = history.iter().filter(|e| e.ts < reference_ts).collect();
    events.sort_by_key(|e| e.ts);
    events.into_iter().rev().take(max_len).map(|e| e.record(reference_ts)).collect()
}

/// Per-user click events sorted by time, for fast sequence lookup.
#[derive(Clone, Debug, Default)]
pub struct HistoryIndex {
    by_user: HashMap<u32, Vec<ClickEvent>>,
}

impl HistoryIndex {
    /// Encodes clicks with `vocab`. Clicks from unknown users are dropped
    /// since their sequences could never be looked up.
    pub fn build(clicks: &[RawClick], vocab: &Vocabulary) -> Self {
        let mut by_user: HashMap<u32, Vec<ClickEvent>> = HashMap::new();
        for c in clicks {
            let user = vocab.encode(Field::UserId, &c.user_id);
            if user == 0 {
                continue;
            }
            by_user.entry(user).or_default().push(ClickEvent {
                ts: c.ts,
                position: c.position,
                item: [vocab.encode(Field::ItemId, &c.item_id), vocab.encode(Field::Category, &c.category)],
                context: [
                    vocab.encode(Field::Query, &c.query),
                    vocab.encode(Field::Geo, &c.geo),
                    vocab.encode(Field::Hour, &c.hour),
                    vocab.encode(Field::Dow, &c.dow),
                ],
            });
        }
        for v in by_user.values_mut() {
            v.sort_by_key(|e| e.ts);
        }
        HistoryIndex { by_user }
    }

    /// Events of `user` strictly before `ts`, oldest first.
    pub fn before(&self, user: u32, ts: i64) -> &[ClickEvent] {
        match self.by_user.get(&user) {
            Some(v) => {
                let end = v.partition_point(|e| e.ts < ts);
                &v[..end]
            }
            None => &[],
        }
    }

    /// Sequences for a request at `ts`. Only the tail of the history is
    /// scanned: at most `k * max_len` events can ever be kept.
    pub fn sequences(&self, user: u32, ts: i64, k: usize, max_len: usize) -> (PositionBehaviorSequences, Vec<BehaviorRecord>) {
        let past = self.before(user, ts);
        let mut seqs = PositionBehaviorSequences::empty(k, max_len);
        let mut full = 0;
        for e in past.iter().rev() {
            if e.position == 0 || e.position as usize > k {
                continue;
            }
            let s = &mut seqs.sequences[e.position as usize - 1];
            if s.len() < max_len {
                s.push(e.record(ts));
                if s.len() == max_len {
                    full += 1;
                    if full == k {
                        break;
                    }
                }
            }
        }
        let recent = past.iter().rev().take(max_len).map(|e| e.record(ts)).collect();
        (seqs, recent)
    }
}

/// A candidate item with its bid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub item: [u32; 2],
    pub bid: f64,
}

/// One ranking request: user, context, candidates and behavior sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Request {
    pub request_id: u64,
    pub ts: i64,
    pub user: [u32; 2],
    pub context: [u32; 4],
    pub candidates: Vec<Candidate>,
    pub behaviors: PositionBehaviorSequences,
    /// Position-agnostic recent clicks (used by the DIN-style variants).
    pub recent: Vec<BehaviorRecord>,
}

impl Request {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::usage(format!("request {} has no candidates", self.request_id)));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.candidates {
            if c.item[0] != 0 && !seen.insert(c.item[0]) {
                return Err(Error::usage(format!(
                    "request {}: candidate item {} listed twice",
                    self.request_id, c.item[0]
                )));
            }
        }
        Ok(())
    }
}

/// A displayed slot of a logged request: candidate index, 1-based position, click.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Slot {
    pub candidate: usize,
    pub position: u32,
    pub click: u8,
}

/// A logged request with its displayed slots, the unit of training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LoggedRequest {
    pub request: Request,
    pub day: u32,
    pub traffic: Traffic,
    pub slots: Vec<Slot>,
}

/// Groups encoded impressions by request id (in first-seen order) and
/// attaches behavior sequences from `history`.
pub fn group_requests(
    impressions: &[Impression],
    history: &HistoryIndex,
    k: usize,
    max_len: usize,
) -> Result<Vec<LoggedRequest>> {
    let mut order: Vec<u64> = Vec::new();
    let mut groups: HashMap<u64, Vec<&Impression>> = HashMap::new();
    for imp in impressions {
        groups
            .entry(imp.request_id)
            .or_insert_with(|| {
                order.push(imp.request_id);
                Vec::new()
            })
            .push(imp);
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let imps = &groups[&id];
        let first = imps[0];
        if imps.iter().any(|i| i.user != first.user || i.context != first.context || i.ts != first.ts) {
            return Err(Error::Validation(format!("request {id}: impressions disagree on user/context/ts")));
        }
        let (behaviors, recent) = history.sequences(first.user[0], first.ts, k, max_len);
        let mut candidates = Vec::with_capacity(imps.len());
        let mut slots = Vec::with_capacity(imps.len());
        for (j, imp) in imps.iter().enumerate() {
            candidates.push(Candidate { item: imp.item, bid: imp.bid });
            slots.push(Slot { candidate: j, position: imp.position, click: imp.click });
        }
        out.push(LoggedRequest {
            request: Request {
                request_id: id,
                ts: first.ts,
                user: first.user,
                context: first.context,
                candidates,
                behaviors,
                recent,
            },
            day: first.day,
            traffic: first.traffic,
            slots,
        });
    }
    Ok(out)
}
