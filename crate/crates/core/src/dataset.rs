//! Interaction logs, the ≥N-interaction filter, leave-one-out splits and
//! synthetic generators.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FilterStep, Result};
use crate::numcore::DenseMatrix;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Event {
    pub user: String,
    pub item: String,
    pub ts: u64,
}

/// Deduplicated events in canonical `(user, timestamp, item)` order, plus any
/// item metadata text seen on ingestion.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InteractionLog {
    events: Vec<Event>,
    item_text: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    Tsv,
    Jsonlines,
}

impl std::str::FromStr for LogFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(LogFormat::Tsv),
            "jsonl" | "jsonlines" => Ok(LogFormat::Jsonlines),
            other => Err(Error::input(format!("unknown log format `{other}`"))),
        }
    }
}

impl InteractionLog {
    /// Canonicalizes: sorts by `(user, ts, item)` and drops duplicate triples.
    /// When one item carries several metadata texts, the lexicographically
    /// smallest wins.
    pub fn new(mut events: Vec<Event>, item_text: BTreeMap<String, String>) -> Self {
        events.sort_by(|a, b| (&a.user, a.ts, &a.item).cmp(&(&b.user, b.ts, &b.item)));
        events.dedup();
        Self { events, item_text }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn item_text(&self) -> &BTreeMap<String, String> {
        &self.item_text
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// TSV `user \t item \t ts [\t text]`, one event per line, canonical order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.user);
            out.push('\t');
            out.push_str(&e.item);
            out.push('\t');
            out.push_str(&e.ts.to_string());
            if let Some(text) = self.item_text.get(&e.item) {
                out.push('\t');
                out.push_str(text);
            }
            out.push('\n');
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

pub fn ingest(path: &Path, format: LogFormat) -> Result<InteractionLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        LogFormat::Tsv => parse_tsv(&text),
        LogFormat::Jsonlines => parse_jsonlines(&text),
    }
}

fn insert_text(map: &mut BTreeMap<String, String>, item: &str, text: &str) {
    if text.is_empty() {
        return;
    }
    map.entry(item.to_string())
        .and_modify(|t| {
            if text < t.as_str() {
                *t = text.to_string();
            }
        })
        .or_insert_with(|| text.to_string());
}

pub fn parse_tsv(text: &str) -> Result<InteractionLog> {
    let mut events = Vec::new();
    let mut item_text = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.splitn(4, '\t').collect();
        if fields.len() < 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected user, item, timestamp columns, found {}", fields.len()),
            });
        }
        let (user, item) = (fields[0].trim(), fields[1].trim());
        if user.is_empty() || item.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty user or item token".into(),
            });
        }
        let ts: u64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("timestamp `{}` is not a non-negative integer", fields[2].trim()),
        })?;
        if let Some(t) = fields.get(3) {
            insert_text(&mut item_text, item, t.trim());
        }
        events.push(Event {
            user: user.to_string(),
            item: item.to_string(),
            ts,
        });
    }
    if events.is_empty() {
        return Err(Error::input("interaction log is empty"));
    }
    Ok(InteractionLog::new(events, item_text))
}

fn token(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) if !s.is_empty() => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

pub fn parse_jsonlines(text: &str) -> Result<InteractionLog> {
    let mut events = Vec::new();
    let mut item_text = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let field = |key: &str| {
            v.get(key).ok_or_else(|| Error::Parse {
                line,
                msg: format!("missing `{key}`"),
            })
        };
        let user = token(field("user")?).ok_or_else(|| Error::Parse {
            line,
            msg: "`user` must be a non-empty string or number".into(),
        })?;
        let item = token(field("item")?).ok_or_else(|| Error::Parse {
            line,
            msg: "`item` must be a non-empty string or number".into(),
        })?;
        let ts = field("ts")?.as_u64().ok_or_else(|| Error::Parse {
            line,
            msg: "`ts` must be a non-negative integer".into(),
        })?;
        if let Some(t) = v.get("text").and_then(|t| t.as_str()) {
            insert_text(&mut item_text, &item, t.trim());
        }
        events.push(Event { user, item, ts });
    }
    if events.is_empty() {
        return Err(Error::input("interaction log is empty"));
    }
    Ok(InteractionLog::new(events, item_text))
}

/// One user's chronologically ordered item indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: usize,
    pub items: Vec<usize>,
}

impl UserSequence {
    /// Everything except the validation and test targets.
    pub fn train(&self) -> &[usize] {
        &self.items[..self.items.len() - 2]
    }

    pub fn valid_target(&self) -> usize {
        self.items[self.items.len() - 2]
    }

    pub fn test_target(&self) -> usize {
        self.items[self.items.len() - 1]
    }

    /// History used to predict the test target (train plus the valid item).
    pub fn test_history(&self) -> &[usize] {
        &self.items[..self.items.len() - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_len: f64,
}

/// Filtered, leave-one-out dataset. Item indices refer to `items`, which is
/// sorted by token so the index assignment does not depend on file order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub users: Vec<String>,
    pub items: Vec<String>,
    pub item_text: Vec<Option<String>>,
    pub sequences: Vec<UserSequence>,
    /// Statistics after filtering, before truncation to `max_seq_len`.
    pub stats: SplitStats,
    pub max_seq_len: usize,
    pub filter_trace: Vec<FilterStep>,
}

impl SplitDataset {
    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn history(&self, user: usize, phase: Phase) -> &[usize] {
        let s = &self.sequences[user];
        match phase {
            Phase::Valid => s.train(),
            Phase::Test => s.test_history(),
        }
    }

    pub fn target(&self, user: usize, phase: Phase) -> usize {
        let s = &self.sequences[user];
        match phase {
            Phase::Valid => s.valid_target(),
            Phase::Test => s.test_target(),
        }
    }

    /// Every item the user touched in train, valid or test.
    pub fn interacted(&self, user: usize) -> BTreeSet<usize> {
        self.sequences[user].items.iter().copied().collect()
    }

    /// Occurrence counts over training prefixes.
    pub fn train_item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_items()];
        for s in &self.sequences {
            for &i in s.train() {
                counts[i] += 1;
            }
        }
        counts
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "users": self.stats.users,
            "items": self.stats.items,
            "interactions": self.stats.interactions,
            "avg_len": self.stats.avg_len,
            "max_seq_len": self.max_seq_len,
            "retained_interactions": self.sequences.iter().map(|s| s.items.len()).sum::<usize>(),
            "filter_iterations": self.filter_trace.len(),
        })
    }
}

/// Iterates the user/item frequency filter to its fixed point, then builds the
/// leave-one-out views. Ties in timestamp are ordered by item token.
pub fn build_split(
    log: &InteractionLog,
    min_interactions: usize,
    max_seq_len: usize,
) -> Result<SplitDataset> {
    if log.is_empty() {
        return Err(Error::input("interaction log is empty"));
    }
    if max_seq_len < 3 {
        return Err(Error::input("max_seq_len must be at least 3 for leave-one-out"));
    }
    if min_interactions < 3 {
        return Err(Error::input("min_interactions must be at least 3 for leave-one-out"));
    }
    let mut alive: Vec<&Event> = log.events().iter().collect();
    let mut trace = Vec::new();
    loop {
        let mut user_count: HashMap<&str, usize> = HashMap::new();
        let mut item_count: HashMap<&str, usize> = HashMap::new();
        for e in &alive {
            *user_count.entry(&e.user).or_default() += 1;
            *item_count.entry(&e.item).or_default() += 1;
        }
        let before = alive.len();
        alive.retain(|e| {
            user_count[e.user.as_str()] >= min_interactions
                && item_count[e.item.as_str()] >= min_interactions
        });
        trace.push(FilterStep {
            iteration: trace.len() + 1,
            users: user_count.len(),
            items: item_count.len(),
            interactions: before,
        });
        if alive.len() == before {
            break;
        }
        if alive.is_empty() {
            return Err(Error::TooSparse { trace });
        }
    }
    if alive.is_empty() {
        return Err(Error::TooSparse { trace });
    }

    let items: Vec<String> = alive
        .iter()
        .map(|e| e.item.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let item_index: HashMap<&str, usize> = items
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    // `alive` is still in canonical (user, ts, item) order.
    let mut users = Vec::new();
    let mut sequences: Vec<UserSequence> = Vec::new();
    let mut interactions = 0;
    for e in &alive {
        if users.last() != Some(&e.user) {
            users.push(e.user.clone());
            sequences.push(UserSequence {
                user: sequences.len(),
                items: Vec::new(),
            });
        }
        sequences.last_mut().unwrap().items.push(item_index[e.item.as_str()]);
        interactions += 1;
    }
    let stats = SplitStats {
        users: users.len(),
        items: items.len(),
        interactions,
        avg_len: interactions as f64 / users.len() as f64,
    };
    for s in &mut sequences {
        if s.items.len() > max_seq_len {
            s.items.drain(..s.items.len() - max_seq_len);
        }
    }
    let item_text = items.iter().map(|i| log.item_text().get(i).cloned()).collect();
    Ok(SplitDataset {
        users,
        items,
        item_text,
        sequences,
        stats,
        max_seq_len,
        filter_trace: trace,
    })
}

/// Parameters of the locality generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub mean_len: usize,
    /// Lag-one autocorrelation of a user's latent trajectory.
    pub rho: f64,
    /// Standard deviation of a user's excursion, as a fraction of the item circle.
    pub spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 500,
            items: 300,
            mean_len: 20,
            rho: 0.5,
            spread: 0.05,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub log: InteractionLog,
    /// Ground-truth affinity between item tokens `item{k:05}`, indexed by `k`.
    pub affinity: DenseMatrix,
    /// Latent item index per event, in canonical log order.
    pub sequences: Vec<Vec<usize>>,
}

pub fn synth_item_token(k: usize) -> String {
    format!("item{k:05}")
}

fn synth_user_token(u: usize) -> String {
    format!("user{u:05}")
}

fn circle_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Locality-controlled interaction log.
///
/// Items sit evenly on a unit circle. Each user has a uniformly random centre
/// and a latent AR(1) excursion `y_{t+1} = ρ y_t + √(1−ρ²) ε` scaled by
/// `spread`, so the latent correlation between positions `i` and `j` of one
/// sequence is exactly `ρ^|i−j|`. The emitted item is the one nearest the
/// latent point. Ground-truth affinity is the Gaussian kernel of circle
/// distance with bandwidth `spread`.
pub fn synthesize(config: &SynthConfig) -> Result<SynthOutput> {
    if !(config.rho > 0.0 && config.rho < 1.0) {
        return Err(Error::input("rho must lie in (0, 1)"));
    }
    if config.users == 0 || config.items == 0 || config.mean_len == 0 {
        return Err(Error::input("users, items and mean_len must be positive"));
    }
    if !(config.spread > 0.0) {
        return Err(Error::input("spread must be positive"));
    }
    let n = config.items;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lo = (config.mean_len / 2).max(5);
    let hi = (config.mean_len + config.mean_len / 2).max(lo);
    let innovation = (1.0 - config.rho * config.rho).sqrt();

    let mut events = Vec::new();
    let mut sequences = Vec::with_capacity(config.users);
    for u in 0..config.users {
        let centre: f64 = rng.random_range(0.0..1.0);
        let len = rng.random_range(lo..=hi);
        let mut y: f64 = rng.sample(StandardNormal);
        let mut seq = Vec::with_capacity(len);
        for t in 0..len {
            if t > 0 {
                let eps: f64 = rng.sample(StandardNormal);
                y = config.rho * y + innovation * eps;
            }
            let pos = (centre + config.spread * y).rem_euclid(1.0);
            let k = ((pos * n as f64).round() as usize) % n;
            seq.push(k);
            events.push(Event {
                user: synth_user_token(u),
                item: synth_item_token(k),
                ts: 1_000_000 + 60 * t as u64,
            });
        }
        sequences.push(seq);
    }

    let mut item_text = BTreeMap::new();
    let n_tags = 24;
    for k in 0..n {
        let coarse = k * n_tags / n;
        let fine = k * (n_tags * 4) / n;
        item_text.insert(
            synth_item_token(k),
            format!("region{coarse} zone{fine} catalog item"),
        );
    }

    let width = config.spread;
    let affinity = DenseMatrix::from_fn(n, n, |a, b| {
        let d = circle_distance(a as f64 / n as f64, b as f64 / n as f64);
        (-d * d / (2.0 * width * width)).exp()
    });
    Ok(SynthOutput {
        log: InteractionLog::new(events, item_text),
        affinity,
        sequences,
    })
}

/// Deterministic cycle data: every user walks `k → k+1 mod n_items` from a
/// random start, so the next item is a function of the current one.
pub fn synthesize_cycle(n_items: usize, users: usize, len: usize, seed: u64) -> Result<InteractionLog> {
    if n_items < 2 || users == 0 || len < 3 {
        return Err(Error::input("cycle data needs ≥2 items, ≥1 user and length ≥3"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::with_capacity(users * len);
    for u in 0..users {
        let start = rng.random_range(0..n_items);
        for t in 0..len {
            events.push(Event {
                user: synth_user_token(u),
                item: synth_item_token((start + t) % n_items),
                ts: 60 * t as u64,
            });
        }
    }
    Ok(InteractionLog::new(events, BTreeMap::new()))
}

/// Writes `s` to `path` via a temporary sibling so a failed run leaves nothing behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let res = fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
