//! Interaction logs, multi-channel item meta data, time-based splits,
//! surrogate targets, pair annotations and co-interaction ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Deserialize;

use crate::error::{Error, Result};

/// One (user, item, rating, timestamp) event. Timestamps are integer
/// seconds since a fixed origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: i64,
}

/// All interaction events, in input order.
#[derive(Debug, Clone, Default)]
pub struct InteractionLog {
    interactions: Vec<Interaction>,
}

impl InteractionLog {
    pub fn new(interactions: Vec<Interaction>) -> Self {
        Self { interactions }
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Interaction> {
        self.interactions.iter()
    }
}

/// Kind of meta-data channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, Deserialize)]
pub enum ChannelKind {
    #[serde(rename = "numeric")]
    Numeric,
    #[serde(rename = "multi-hot")]
    MultiHot,
    #[serde(rename = "dense")]
    Dense,
}

impl ChannelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "numeric" => Ok(Self::Numeric),
            "multi-hot" => Ok(Self::MultiHot),
            "dense" => Ok(Self::Dense),
            other => Err(Error::Config(format!("unknown channel kind {other:?}"))),
        }
    }
}

/// One channel of item meta data; `values` is aligned with the catalog's
/// item order. Items missing from the source file carry the zero vector.
#[derive(Debug, Clone)]
pub struct MetaChannel {
    pub name: String,
    pub kind: ChannelKind,
    pub dim: usize,
    values: Vec<DVector<f64>>,
}

impl MetaChannel {
    /// Build a channel from per-item vectors keyed by item id. Vectors must
    /// all have length `dim`; multi-hot entries must be 0/1.
    pub fn new(
        name: impl Into<String>,
        kind: ChannelKind,
        dim: usize,
        by_item: &BTreeMap<String, Vec<f64>>,
        catalog_items: &[String],
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(catalog_items.len());
        for item in catalog_items {
            match by_item.get(item) {
                Some(v) => {
                    if v.len() != dim {
                        return Err(Error::Dimension {
                            context: "channel vector",
                            expected: dim,
                            got: v.len(),
                        });
                    }
                    if kind == ChannelKind::MultiHot && v.iter().any(|&x| x != 0.0 && x != 1.0) {
                        return Err(Error::Invariant(format!(
                            "multi-hot vector for item {item:?} has a non-0/1 entry"
                        )));
                    }
                    values.push(DVector::from_column_slice(v));
                }
                None => values.push(DVector::zeros(dim)),
            }
        }
        Ok(Self {
            name: name.into(),
            kind,
            dim,
            values,
        })
    }

    pub fn vector(&self, item_index: usize) -> &DVector<f64> {
        &self.values[item_index]
    }
}

/// The item universe: ordered item ids, a dense index per id, and the
/// attached meta channels.
#[derive(Debug, Clone)]
pub struct ItemCatalog {
    items: Vec<String>,
    id_index: BTreeMap<String, usize>,
    channels: Vec<MetaChannel>,
}

impl ItemCatalog {
    /// Catalog over the items of a log, in order of first appearance.
    pub fn from_log(log: &InteractionLog) -> Self {
        let mut items = Vec::new();
        let mut id_index = BTreeMap::new();
        for ev in log.iter() {
            if !id_index.contains_key(&ev.item) {
                id_index.insert(ev.item.clone(), items.len());
                items.push(ev.item.clone());
            }
        }
        Self {
            items,
            id_index,
            channels: Vec::new(),
        }
    }

    /// Catalog over an explicit item list (synthetic construction).
    pub fn from_items(items: Vec<String>) -> Result<Self> {
        let mut id_index = BTreeMap::new();
        for (i, item) in items.iter().enumerate() {
            if id_index.insert(item.clone(), i).is_some() {
                return Err(Error::Invariant(format!("duplicate item id {item:?}")));
            }
        }
        Ok(Self {
            items,
            id_index,
            channels: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn item_id(&self, index: usize) -> &str {
        &self.items[index]
    }

    pub fn index_of(&self, item: &str) -> Result<usize> {
        self.id_index
            .get(item)
            .copied()
            .ok_or_else(|| Error::UnknownItem(item.to_string()))
    }

    pub fn channels(&self) -> &[MetaChannel] {
        &self.channels
    }

    pub fn channel_dims(&self) -> Vec<usize> {
        self.channels.iter().map(|c| c.dim).collect()
    }

    pub fn add_channel(&mut self, channel: MetaChannel) -> Result<()> {
        if channel.values.len() != self.items.len() {
            return Err(Error::Dimension {
                context: "channel coverage",
                expected: self.items.len(),
                got: channel.values.len(),
            });
        }
        self.channels.push(channel);
        Ok(())
    }

    /// Per-channel meta vectors of one item.
    pub fn item_vectors(&self, index: usize) -> Vec<&DVector<f64>> {
        self.channels.iter().map(|c| c.vector(index)).collect()
    }
}

/// A similar/dissimilar training pair over catalog indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairExample {
    pub a: usize,
    pub b: usize,
    pub label: PairLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    /// y = 0
    Similar,
    /// y = 1
    Dissimilar,
}

impl PairLabel {
    pub fn value(self) -> f64 {
        match self {
            PairLabel::Similar => 0.0,
            PairLabel::Dissimilar => 1.0,
        }
    }
}

impl PairExample {
    pub fn new(a: usize, b: usize, label: PairLabel) -> Result<Self> {
        if a == b {
            return Err(Error::Invariant(format!("pair ({a}, {b}) repeats an item")));
        }
        Ok(Self { a, b, label })
    }
}

/// Annotation run output: the pair list and how many users were skipped
/// for having fewer than two train interactions.
#[derive(Debug, Clone)]
pub struct AnnotationSet {
    pub pairs: Vec<PairExample>,
    pub skipped_users: usize,
}

/// Time-based item split: test items are those whose first interaction
/// happens strictly after `cutoff`.
#[derive(Debug, Clone)]
pub struct TimeSplit {
    pub cutoff: i64,
    pub train_items: Vec<usize>,
    pub test_items: Vec<usize>,
}

/// Load an interaction log from a `user,item,rating,timestamp` CSV file.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionLog> {
    let file = std::fs::File::open(path.as_ref())?;
    load_interactions_from(std::io::BufReader::new(file))
}

/// Same as [`load_interactions`] but over any reader.
pub fn load_interactions_from(reader: impl BufRead) -> Result<InteractionLog> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut interactions = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let parse = |msg: String| Error::Parse { line, msg };
        if rec.len() != 4 {
            return Err(parse(format!("expected 4 fields, got {}", rec.len())));
        }
        let rating: f64 = rec[2]
            .parse()
            .map_err(|_| parse(format!("bad rating {:?}", &rec[2])))?;
        if !rating.is_finite() {
            return Err(parse(format!("non-finite rating {:?}", &rec[2])));
        }
        let timestamp: i64 = rec[3]
            .parse()
            .map_err(|_| parse(format!("bad timestamp {:?}", &rec[3])))?;
        if timestamp < 0 {
            return Err(parse(format!("negative timestamp {timestamp}")));
        }
        interactions.push(Interaction {
            user: rec[0].to_string(),
            item: rec[1].to_string(),
            rating,
            timestamp,
        });
    }
    if interactions.is_empty() {
        return Err(Error::EmptyLog);
    }
    Ok(InteractionLog::new(interactions))
}

/// One row of a channel manifest CSV (`name,kind,dim,path`).
#[derive(Debug, Clone, Deserialize)]
pub struct ManifestRow {
    pub name: String,
    pub kind: String,
    pub dim: usize,
    pub path: String,
}

/// Read a channel manifest and attach every listed channel to the catalog.
/// Channel paths are resolved relative to the manifest's directory.
pub fn load_channels(manifest_path: impl AsRef<Path>, catalog: &mut ItemCatalog) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(manifest_path)
        .map_err(|e| Error::Config(format!("cannot read manifest {manifest_path:?}: {e}")))?;
    for row in rdr.deserialize() {
        let row: ManifestRow = row.map_err(|e| Error::Config(format!("bad manifest row: {e}")))?;
        let kind = ChannelKind::parse(&row.kind)?;
        let path = base.join(&row.path);
        let by_item = match kind {
            ChannelKind::Numeric | ChannelKind::MultiHot => read_vector_csv(&path, row.dim)
                .map_err(|e| {
                    Error::Config(format!("channel {:?} ({}): {e}", row.name, path.display()))
                })?,
            ChannelKind::Dense => read_vector_jsonl(&path, row.dim).map_err(|e| {
                Error::Config(format!("channel {:?} ({}): {e}", row.name, path.display()))
            })?,
        };
        let channel = MetaChannel::new(row.name, kind, row.dim, &by_item, catalog.items())?;
        catalog.add_channel(channel)?;
    }
    Ok(())
}

fn read_vector_csv(path: &Path, dim: usize) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != dim + 1 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, got {}", dim + 1, rec.len()),
            });
        }
        let mut v = Vec::with_capacity(dim);
        for field in rec.iter().skip(1) {
            let x: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad value {field:?}"),
            })?;
            v.push(x);
        }
        out.insert(rec[0].to_string(), v);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct JsonlRow {
    item: String,
    vec: Vec<f64>,
}

fn read_vector_jsonl(path: &Path, dim: usize) -> Result<BTreeMap<String, Vec<f64>>> {
    let file = std::fs::File::open(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonlRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if row.vec.len() != dim {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {} entries, got {}", dim, row.vec.len()),
            });
        }
        out.insert(row.item, row.vec);
    }
    Ok(out)
}

/// First-interaction timestamp per catalog item.
fn first_interaction_times(log: &InteractionLog, catalog: &ItemCatalog) -> Result<Vec<i64>> {
    let mut first = vec![i64::MAX; catalog.len()];
    for ev in log.iter() {
        let idx = catalog.index_of(&ev.item)?;
        first[idx] = first[idx].min(ev.timestamp);
    }
    if let Some(pos) = first.iter().position(|&t| t == i64::MAX) {
        return Err(Error::Invariant(format!(
            "catalog item {:?} never appears in the log",
            catalog.item_id(pos)
        )));
    }
    Ok(first)
}

/// Split the catalog by first-interaction time: `cutoff` is the smallest
/// timestamp for which the set of items first interacted with after it has
/// size at most `test_fraction * n`, and is maximal under that cap.
pub fn split_by_time(
    log: &InteractionLog,
    catalog: &ItemCatalog,
    test_fraction: f64,
) -> Result<TimeSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let first = first_interaction_times(log, catalog)?;
    let n = catalog.len();
    let budget = (test_fraction * n as f64).floor() as usize;

    let mut distinct: Vec<i64> = first.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() == 1 {
        return Err(Error::DegenerateSplit);
    }

    // Items with first time > cutoff form the test set; lowering the cutoff
    // grows it, so take the smallest cutoff still within budget.
    let mut sorted_first = first.clone();
    sorted_first.sort_unstable();
    let count_after = |t: i64| -> usize {
        // number of items with first-interaction time strictly greater than t
        n - sorted_first.partition_point(|&x| x <= t)
    };
    let cutoff = *distinct
        .iter()
        .find(|&&t| count_after(t) <= budget)
        .expect("largest time always yields an empty test set");

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (idx, &t) in first.iter().enumerate() {
        if t > cutoff {
            test.push(idx);
        } else {
            train.push(idx);
        }
    }
    Ok(TimeSplit {
        cutoff,
        train_items: train,
        test_items: test,
    })
}

/// Per-user timeline restricted to train items: items sorted by the time of
/// their earliest interaction by that user.
fn user_timelines(
    log: &InteractionLog,
    catalog: &ItemCatalog,
    train_items: &[usize],
) -> Result<BTreeMap<String, Vec<usize>>> {
    let train_set: BTreeSet<usize> = train_items.iter().copied().collect();
    let mut per_user: BTreeMap<String, BTreeMap<usize, i64>> = BTreeMap::new();
    for ev in log.iter() {
        let idx = catalog.index_of(&ev.item)?;
        if !train_set.contains(&idx) {
            continue;
        }
        let entry = per_user.entry(ev.user.clone()).or_default();
        let t = entry.entry(idx).or_insert(ev.timestamp);
        *t = (*t).min(ev.timestamp);
    }
    let mut out = BTreeMap::new();
    for (user, items) in per_user {
        let mut timeline: Vec<(i64, usize)> = items.into_iter().map(|(i, t)| (t, i)).collect();
        timeline.sort_unstable();
        out.insert(user, timeline.into_iter().map(|(_, i)| i).collect());
    }
    Ok(out)
}

/// Sample noisy similar/dissimilar pair annotations. Per user with at least
/// two train interactions: one random anchor, `samples_h` positives drawn
/// (with replacement) from the forward `window_k`-step window and
/// `samples_h` catalog-random negatives. Deterministic under `seed`.
pub fn generate_pair_annotations(
    log: &InteractionLog,
    catalog: &ItemCatalog,
    train_items: &[usize],
    window_k: usize,
    samples_h: usize,
    seed: u64,
) -> Result<AnnotationSet> {
    if window_k < 1 || samples_h < 1 {
        return Err(Error::Config(
            "window_k and samples_h must be at least 1".into(),
        ));
    }
    if train_items.is_empty() {
        return Err(Error::Config("train item set is empty".into()));
    }
    let timelines = user_timelines(log, catalog, train_items)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    let mut skipped = 0usize;
    for (_user, items) in timelines.iter() {
        if items.len() < 2 {
            skipped += 1;
            continue;
        }
        // Anchor must have a nonempty forward window.
        let anchor_pos = rng.random_range(0..items.len() - 1);
        let anchor = items[anchor_pos];
        let window_end = (anchor_pos + window_k).min(items.len() - 1);
        let window = &items[anchor_pos + 1..=window_end];
        for _ in 0..samples_h {
            let pos = window[rng.random_range(0..window.len())];
            pairs.push(PairExample::new(anchor, pos, PairLabel::Similar)?);
        }
        for _ in 0..samples_h {
            // Exclude the anchor itself; collisions with true positives are
            // allowed label noise.
            let neg = loop {
                let cand = train_items[rng.random_range(0..train_items.len())];
                if cand != anchor {
                    break cand;
                }
            };
            pairs.push(PairExample::new(anchor, neg, PairLabel::Dissimilar)?);
        }
    }
    Ok(AnnotationSet {
        pairs,
        skipped_users: skipped,
    })
}

/// Mean rating per listed item, then mean-centered across the vector.
pub fn surrogate_targets(
    log: &InteractionLog,
    catalog: &ItemCatalog,
    items: &[usize],
) -> Result<DVector<f64>> {
    let mut sum = vec![0.0f64; catalog.len()];
    let mut count = vec![0usize; catalog.len()];
    for ev in log.iter() {
        let idx = catalog.index_of(&ev.item)?;
        sum[idx] += ev.rating;
        count[idx] += 1;
    }
    let mut r = DVector::zeros(items.len());
    for (k, &idx) in items.iter().enumerate() {
        if count[idx] == 0 {
            return Err(Error::MissingTarget(catalog.item_id(idx).to_string()));
        }
        r[k] = sum[idx] / count[idx] as f64;
    }
    let mean = r.mean();
    r.add_scalar_mut(-mean);
    Ok(r)
}

/// Which interactions ground truth is built from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GroundTruthScope {
    /// Co-interactions by any user.
    Population,
    /// Co-interactions by one specific user.
    SingleUser(String),
}

/// Co-interaction ground truth: `x'` is similar to `x` iff some in-scope
/// user interacted with both within the time horizon. Symmetric.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    map: BTreeMap<usize, BTreeSet<usize>>,
}

impl GroundTruth {
    pub fn similar(&self, item: usize) -> Option<&BTreeSet<usize>> {
        self.map.get(&item)
    }

    pub fn contains(&self, item: usize, other: usize) -> bool {
        self.map.get(&item).is_some_and(|s| s.contains(&other))
    }

    pub fn num_relevant(&self, item: usize) -> usize {
        self.map.get(&item).map_or(0, |s| s.len())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&usize, &BTreeSet<usize>)> {
        self.map.iter()
    }

    fn insert_pair(&mut self, a: usize, b: usize) {
        self.map.entry(a).or_default().insert(b);
        self.map.entry(b).or_default().insert(a);
    }
}

/// Build co-interaction ground truth over a time horizon (seconds).
pub fn build_ground_truth(
    log: &InteractionLog,
    catalog: &ItemCatalog,
    horizon: i64,
    scope: GroundTruthScope,
) -> Result<GroundTruth> {
    if horizon <= 0 {
        return Err(Error::Config(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    let mut per_user: BTreeMap<&str, Vec<(i64, usize)>> = BTreeMap::new();
    for ev in log.iter() {
        if let GroundTruthScope::SingleUser(u) = &scope {
            if &ev.user != u {
                continue;
            }
        }
        let idx = catalog.index_of(&ev.item)?;
        per_user
            .entry(ev.user.as_str())
            .or_default()
            .push((ev.timestamp, idx));
    }
    let mut truth = GroundTruth::default();
    for (_user, mut events) in per_user {
        events.sort_unstable();
        let mut lo = 0usize;
        for i in 0..events.len() {
            let (t_i, item_i) = events[i];
            while t_i - events[lo].0 > horizon {
                lo += 1;
            }
            for &(_, item_j) in &events[lo..i] {
                if item_j != item_i {
                    truth.insert_pair(item_j, item_i);
                }
            }
        }
    }
    Ok(truth)
}
