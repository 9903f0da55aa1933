//! The three memory stores of a session.
//!
//! * [`ProgressMemoryLong`]: gallery captions and value vocabulary, built once
//!   per gallery and shared read-only.
//! * [`SessionMemory`]: the semantic state of one session (running queries,
//!   accumulated constraints, last question, turn counter).
//! * [`ResultMemory`]: every per-turn channel list plus non-destructive rank
//!   overrides, kept as an append-only event log.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::Gallery;
use crate::intent::Question;
use crate::types::{Channel, Constraint, EditInstruction, FeedbackMessage, Query, RankedList};

/// Lower-cased alphanumeric skeleton used to resolve surface variants of a
/// value (`"Red"`, `"RED_"`, `"red"` all map to `"red"`).
pub fn canonical_key(token: &str) -> String {
    token
        .chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Long-term progress memory: captions for every gallery item.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgressMemoryLong {
    pub captions: BTreeMap<String, String>,
    pub built_at: u64,
    pub gallery_hash: String,
    vocabulary: BTreeMap<String, BTreeMap<String, String>>,
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    gallery_hash: String,
    built_at: u64,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    id: String,
    caption: String,
}

impl ProgressMemoryLong {
    pub fn build(gallery: &Gallery) -> Self {
        let built_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let captions = gallery
            .items()
            .iter()
            .map(|it| (it.id.clone(), it.caption(gallery.schema())))
            .collect();
        Self {
            captions,
            built_at,
            gallery_hash: gallery.content_hash(),
            vocabulary: Self::vocabulary_of(gallery),
        }
    }

    fn vocabulary_of(gallery: &Gallery) -> BTreeMap<String, BTreeMap<String, String>> {
        let mut vocab: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        for item in gallery.items() {
            for (dim, value) in &item.attributes {
                vocab
                    .entry(dim.clone())
                    .or_default()
                    .insert(canonical_key(value), value.clone());
            }
        }
        vocab
    }

    pub fn cache_path(dir: &Path, gallery_hash: &str) -> PathBuf {
        dir.join(format!("{gallery_hash}.captions.jsonl"))
    }

    /// Loads the cached captions for `gallery` from `dir`, or builds and
    /// writes them when no valid cache exists.
    pub fn load_or_build(gallery: &Gallery, dir: &Path) -> Result<Self> {
        let hash = gallery.content_hash();
        let path = Self::cache_path(dir, &hash);
        if path.exists() {
            match Self::read_cache(&path, gallery) {
                Ok(pm) if pm.gallery_hash == hash => return Ok(pm),
                Ok(_) => tracing::warn!(path = %path.display(), "caption cache hash mismatch, rebuilding"),
                Err(e) => tracing::warn!(error = %e, "unreadable caption cache, rebuilding"),
            }
        }
        let pm = Self::build(gallery);
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        pm.write_cache(&path)?;
        Ok(pm)
    }

    fn write_cache(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = serde_json::to_string(&CacheHeader {
            gallery_hash: self.gallery_hash.clone(),
            built_at: self.built_at,
        })?;
        out.push('\n');
        for (id, caption) in &self.captions {
            out.push_str(&serde_json::to_string(&CacheLine {
                id: id.clone(),
                caption: caption.clone(),
            })?);
            out.push('\n');
        }
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    fn read_cache(path: &Path, gallery: &Gallery) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header: CacheHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l.map_err(|e| Error::io(path, e))?)
                .map_err(|e| Error::parse(path, 1, e))?,
            None => return Err(Error::parse(path, 1, "empty caption cache")),
        };
        let mut captions = BTreeMap::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let entry: CacheLine =
                serde_json::from_str(&line).map_err(|e| Error::parse(path, n + 2, e))?;
            captions.insert(entry.id, entry.caption);
        }
        if let Some(missing) = gallery.items().iter().find(|it| !captions.contains_key(&it.id)) {
            return Err(Error::parse(
                path,
                0,
                format!("cache does not cover item `{}`", missing.id),
            ));
        }
        Ok(Self {
            captions,
            built_at: header.built_at,
            gallery_hash: header.gallery_hash,
            vocabulary: Self::vocabulary_of(gallery),
        })
    }

    pub fn caption(&self, id: &str) -> Option<&str> {
        self.captions.get(id).map(String::as_str)
    }

    /// Maps a surface variant of a known value back to the gallery spelling.
    /// Unknown dimensions or values pass through unchanged.
    pub fn canonicalize(&self, c: &Constraint) -> Constraint {
        let dim = c.dim.trim().to_lowercase();
        match self
            .vocabulary
            .get(&dim)
            .and_then(|vals| vals.get(&canonical_key(&c.value)))
        {
            Some(value) => Constraint::new(dim, value.clone()),
            None => Constraint::new(dim, c.value.clone()),
        }
    }

    pub fn normalize_feedback(&self, feedback: &FeedbackMessage) -> FeedbackMessage {
        let mut out = feedback.clone();
        out.payload_positive = feedback
            .payload_positive
            .iter()
            .map(|c| self.canonicalize(c))
            .collect();
        out.payload_negative = feedback
            .payload_negative
            .iter()
            .map(|c| self.canonicalize(c))
            .collect();
        out
    }
}

/// Accumulated search intent: positive assertions in arrival order plus
/// values to avoid. The effective query keeps the latest value per dimension.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningQuery {
    pub positives: Vec<Constraint>,
    pub negatives: BTreeSet<Constraint>,
}

impl RunningQuery {
    /// Appends `q` (latest-wins). Re-asserting an existing pair moves it to
    /// the end, so absorbing the same query twice is a no-op the second time.
    pub fn absorb(&mut self, q: &Query) {
        for c in q.positives() {
            self.positives.retain(|p| p != &c);
            self.negatives.remove(&c);
            self.positives.push(c);
        }
        for c in q.negative() {
            self.positives.retain(|p| p != c);
            self.negatives.insert(c.clone());
        }
    }

    /// Shrinks the positive log to at most `max_len` entries: the most recent
    /// entry of every dimension is kept first, then the most recent of the
    /// rest. Arrival order is preserved.
    pub fn compress(&mut self, max_len: usize) -> bool {
        if self.positives.len() <= max_len {
            return false;
        }
        let mut seen = BTreeSet::new();
        let mut latest_per_dim = Vec::new();
        let mut others = Vec::new();
        for (i, c) in self.positives.iter().enumerate().rev() {
            if seen.insert(c.dim.as_str()) {
                latest_per_dim.push(i);
            } else {
                others.push(i);
            }
        }
        let mut keep: Vec<usize> = latest_per_dim
            .into_iter()
            .chain(others)
            .take(max_len)
            .collect();
        keep.sort_unstable();
        self.positives = keep.into_iter().map(|i| self.positives[i].clone()).collect();
        true
    }

    /// Effective query: latest value per dimension; avoidances that clash
    /// with a kept positive are dropped.
    pub fn to_query(&self) -> Query {
        let mut q = Query::new();
        for c in &self.positives {
            q.want(c.clone());
        }
        for c in &self.negatives {
            if q.positive().get(&c.dim) != Some(&c.value) {
                q.avoid(c.clone());
            }
        }
        q
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }
}

/// Incremental constraint update produced by reflection.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintDelta {
    pub positive: Vec<Constraint>,
    pub negative: Vec<Constraint>,
}

impl ConstraintDelta {
    pub fn is_empty(&self) -> bool {
        self.positive.is_empty() && self.negative.is_empty()
    }
}

/// Short-term progress memory of one session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMemory {
    pub reference_item: String,
    pub initial_edit: EditInstruction,
    pub running_search: RunningQuery,
    pub running_edit: EditInstruction,
    pub constraints_positive: BTreeMap<String, String>,
    pub constraints_negative: BTreeSet<Constraint>,
    pub last_question: Option<Question>,
    pub turn: u32,
}

impl SessionMemory {
    pub fn new(reference_item: impl Into<String>, initial_edit: EditInstruction) -> Self {
        Self {
            reference_item: reference_item.into(),
            running_edit: initial_edit.clone(),
            initial_edit,
            running_search: RunningQuery::default(),
            constraints_positive: BTreeMap::new(),
            constraints_negative: BTreeSet::new(),
            last_question: None,
            turn: 0,
        }
    }

    pub fn holds_positive(&self, c: &Constraint) -> bool {
        self.constraints_positive.get(&c.dim) == Some(&c.value)
    }

    /// Merges a delta: positives replace earlier values on their dimension,
    /// and a pair asserted on one side is removed from the other.
    pub fn update_constraints(&mut self, delta: &ConstraintDelta) {
        for c in &delta.positive {
            self.constraints_negative.remove(c);
            self.constraints_positive.insert(c.dim.clone(), c.value.clone());
        }
        for c in &delta.negative {
            if self.holds_positive(c) {
                self.constraints_positive.remove(&c.dim);
            }
            self.constraints_negative.insert(c.clone());
        }
    }

    /// Dimensions pinned by either the accumulated constraints or the
    /// running search.
    pub fn constrained_dims(&self) -> BTreeSet<String> {
        let mut dims: BTreeSet<String> = self.constraints_positive.keys().cloned().collect();
        dims.extend(self.running_search.positives.iter().map(|c| c.dim.clone()));
        dims
    }
}

/// One entry of the result-memory log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RmEvent {
    Append {
        list: RankedList,
    },
    Cap {
        item_id: String,
        cap_rank: u32,
        first_turn: u32,
        last_turn: u32,
        overrides: u32,
    },
}

/// Per-turn, per-channel ranked lists with rank-cap overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RmLog", into = "RmLog")]
pub struct ResultMemory {
    events: Vec<RmEvent>,
    records: BTreeMap<(u32, Channel), RankedList>,
    overrides: BTreeMap<(u32, Channel, String), u32>,
}

#[derive(Serialize, Deserialize)]
struct RmLog {
    events: Vec<RmEvent>,
}

impl TryFrom<RmLog> for ResultMemory {
    type Error = Error;

    fn try_from(log: RmLog) -> Result<Self> {
        ResultMemory::replay(&log.events)
    }
}

impl From<ResultMemory> for RmLog {
    fn from(rm: ResultMemory) -> Self {
        RmLog { events: rm.events }
    }
}

impl ResultMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds the state by re-executing a log.
    pub fn replay(events: &[RmEvent]) -> Result<Self> {
        let mut rm = Self::new();
        for ev in events {
            match ev {
                RmEvent::Append { list } => rm.append(list.clone())?,
                RmEvent::Cap {
                    item_id,
                    cap_rank,
                    first_turn,
                    last_turn,
                    overrides,
                } => {
                    let n = rm.cap(item_id, *cap_rank, *first_turn..=*last_turn);
                    if n != *overrides {
                        return Err(Error::Invalid(format!(
                            "cap of `{item_id}` replays to {n} overrides, log says {overrides}"
                        )));
                    }
                }
            }
        }
        Ok(rm)
    }

    pub fn append(&mut self, list: RankedList) -> Result<()> {
        if list.channel == Channel::Fused {
            return Err(Error::Protocol(
                "result memory stores channel lists, not fused lists".into(),
            ));
        }
        let key = (list.turn, list.channel);
        if self.records.contains_key(&key) {
            return Err(Error::Protocol(format!(
                "duplicate {} record for turn {}",
                list.channel, list.turn
            )));
        }
        self.events.push(RmEvent::Append { list: list.clone() });
        self.records.insert(key, list);
        Ok(())
    }

    /// Demotes `item_id` to at least `cap_rank` in both channels of every
    /// record whose turn lies in `turns`. Returns the number of overrides
    /// written; ranks already at or below the cap are left alone.
    pub fn cap(&mut self, item_id: &str, cap_rank: u32, turns: RangeInclusive<u32>) -> u32 {
        let cap_rank = cap_rank.max(1);
        let mut written = 0;
        let keys: Vec<(u32, Channel)> = self
            .records
            .range((*turns.start(), Channel::T2V)..=(*turns.end(), Channel::Fused))
            .map(|(k, _)| *k)
            .collect();
        for (turn, channel) in keys {
            if let Some(rank) = self.effective_rank(turn, channel, item_id) {
                if rank < cap_rank {
                    self.overrides
                        .insert((turn, channel, item_id.to_string()), cap_rank);
                    written += 1;
                }
            }
        }
        self.events.push(RmEvent::Cap {
            item_id: item_id.to_string(),
            cap_rank,
            first_turn: *turns.start(),
            last_turn: *turns.end(),
            overrides: written,
        });
        written
    }

    pub fn record(&self, turn: u32, channel: Channel) -> Option<&RankedList> {
        self.records.get(&(turn, channel))
    }

    /// Records with `turn` in range, ordered by turn then channel.
    pub fn records_in(&self, turns: RangeInclusive<u32>) -> impl Iterator<Item = &RankedList> {
        self.records
            .range((*turns.start(), Channel::T2V)..=(*turns.end(), Channel::Fused))
            .map(|(_, l)| l)
    }

    pub fn original_rank(&self, turn: u32, channel: Channel, item_id: &str) -> Option<u32> {
        self.record(turn, channel)?.get(item_id).map(|e| e.rank)
    }

    /// Stored rank after overrides; `None` when the item is absent.
    pub fn effective_rank(&self, turn: u32, channel: Channel, item_id: &str) -> Option<u32> {
        let original = self.original_rank(turn, channel, item_id)?;
        Some(
            self.overrides
                .get(&(turn, channel, item_id.to_string()))
                .copied()
                .unwrap_or(original),
        )
    }

    /// `(item, effective rank, raw score)` in stored order.
    pub fn effective_entries(&self, list: &RankedList) -> Vec<(String, u32, f64)> {
        list.entries
            .iter()
            .map(|e| {
                let rank = self
                    .overrides
                    .get(&(list.turn, list.channel, e.item_id.clone()))
                    .copied()
                    .unwrap_or(e.rank);
                (e.item_id.clone(), rank, e.score)
            })
            .collect()
    }

    pub fn overrides(&self) -> impl Iterator<Item = (&(u32, Channel, String), &u32)> {
        self.overrides.iter()
    }

    pub fn events(&self) -> &[RmEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(channel: Channel, turn: u32, ids: &[&str]) -> RankedList {
        RankedList::from_scores(
            channel,
            turn,
            ids.iter()
                .enumerate()
                .map(|(i, id)| (id.to_string(), 1.0 - i as f64 * 0.01))
                .collect(),
            100,
        )
    }

    fn c(d: &str, v: &str) -> Constraint {
        Constraint::new(d, v)
    }

    #[test]
    fn cap_rank_one_in_both_channels() {
        let mut rm = ResultMemory::new();
        rm.append(list(Channel::T2V, 1, &["x", "a", "b"])).unwrap();
        rm.append(list(Channel::CoVR, 1, &["x", "c"])).unwrap();
        assert_eq!(rm.cap("x", 11, 1..=1), 2);
        assert_eq!(rm.effective_rank(1, Channel::T2V, "x"), Some(11));
        assert_eq!(rm.effective_rank(1, Channel::CoVR, "x"), Some(11));
        assert_eq!(rm.effective_rank(1, Channel::T2V, "a"), Some(2));
    }

    #[test]
    fn cap_never_promotes() {
        let ids: Vec<String> = (0..25).map(|i| format!("i{i:02}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let mut rm = ResultMemory::new();
        rm.append(list(Channel::T2V, 1, &refs)).unwrap();
        assert_eq!(rm.effective_rank(1, Channel::T2V, "i19"), Some(20));
        assert_eq!(rm.cap("i19", 11, 1..=1), 0);
        assert_eq!(rm.effective_rank(1, Channel::T2V, "i19"), Some(20));
    }

    #[test]
    fn cap_of_absent_item_is_noop() {
        let mut rm = ResultMemory::new();
        rm.append(list(Channel::T2V, 1, &["a"])).unwrap();
        assert_eq!(rm.cap("zzz", 11, 0..=5), 0);
    }

    #[test]
    fn cap_respects_turn_window() {
        let mut rm = ResultMemory::new();
        for t in 1..=3 {
            rm.append(list(Channel::T2V, t, &["x", "a"])).unwrap();
        }
        assert_eq!(rm.cap("x", 4, 2..=3), 2);
        assert_eq!(rm.effective_rank(1, Channel::T2V, "x"), Some(1));
        assert_eq!(rm.effective_rank(3, Channel::T2V, "x"), Some(4));
    }

    #[test]
    fn duplicate_append_is_protocol_error() {
        let mut rm = ResultMemory::new();
        rm.append(list(Channel::T2V, 1, &["a"])).unwrap();
        let err = rm.append(list(Channel::T2V, 1, &["b"])).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn log_replay_and_serde_reconstruct_state() {
        let mut rm = ResultMemory::new();
        rm.append(list(Channel::CoVR, 0, &["r", "x"])).unwrap();
        rm.append(list(Channel::T2V, 1, &["x", "a"])).unwrap();
        rm.append(list(Channel::CoVR, 1, &["a", "x"])).unwrap();
        rm.cap("x", 11, 1..=1);
        let replayed = ResultMemory::replay(rm.events()).unwrap();
        assert_eq!(replayed, rm);
        let json = serde_json::to_string(&rm).unwrap();
        let back: ResultMemory = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rm);
    }

    #[test]
    fn positive_replaces_matching_negative() {
        let mut pm = SessionMemory::new("ref", EditInstruction::new());
        pm.update_constraints(&ConstraintDelta {
            positive: vec![],
            negative: vec![c("color", "red")],
        });
        pm.update_constraints(&ConstraintDelta {
            positive: vec![c("color", "red")],
            negative: vec![],
        });
        assert_eq!(pm.constraints_positive.get("color").map(String::as_str), Some("red"));
        assert!(pm.constraints_negative.is_empty());
    }

    #[test]
    fn empty_delta_is_identity() {
        let mut pm = SessionMemory::new("ref", EditInstruction::new());
        pm.update_constraints(&ConstraintDelta {
            positive: vec![c("scene", "beach")],
            negative: vec![c("color", "red")],
        });
        let before = pm.clone();
        pm.update_constraints(&ConstraintDelta::default());
        assert_eq!(pm, before);
    }

    #[test]
    fn latest_positive_wins_per_dimension() {
        let mut pm = SessionMemory::new("ref", EditInstruction::new());
        for v in ["red", "blue"] {
            pm.update_constraints(&ConstraintDelta {
                positive: vec![c("color", v)],
                negative: vec![],
            });
        }
        assert_eq!(pm.constraints_positive.len(), 1);
        assert_eq!(pm.constraints_positive["color"], "blue");
    }

    #[test]
    fn running_query_compression_keeps_latest_per_dimension() {
        let mut rq = RunningQuery::default();
        // 12 assertions over 4 dimensions, three values each
        let dims = ["color", "scene", "action", "lighting"];
        for round in 0..3 {
            for d in dims {
                rq.positives.push(c(d, &format!("{d}{round}")));
            }
        }
        assert!(rq.compress(10));
        assert_eq!(rq.positives.len(), 10);
        for d in dims {
            assert!(rq.positives.contains(&c(d, &format!("{d}2"))));
        }
        // the two oldest assertions are the ones dropped
        assert!(!rq.positives.contains(&c("color", "color0")));
        assert!(!rq.positives.contains(&c("scene", "scene0")));
        assert_eq!(rq.to_query().positive()["color"], "color2");
    }

    #[test]
    fn canonicalize_resolves_aliases() {
        use crate::gallery::{Item, Schema};
        let item = Item {
            id: "a".into(),
            attributes: [("category", "dog"), ("color", "red")]
                .into_iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            thumbnail: None,
            feature: vec![],
        };
        let g = Gallery::new(Schema::new(["category", "color"]).unwrap(), 1, vec![item]).unwrap();
        let pm = ProgressMemoryLong::build(&g);
        assert_eq!(pm.canonicalize(&c("color", "RED_")), c("color", "red"));
        assert_eq!(pm.canonicalize(&c("color", "mauve")), c("color", "mauve"));
        assert_eq!(pm.caption("a"), Some("category=dog, color=red"));
    }

    #[test]
    fn caption_cache_round_trip() {
        use crate::gallery::{Item, Schema};
        let item = Item {
            id: "a".into(),
            attributes: [("category".to_string(), "dog".to_string())].into(),
            thumbnail: None,
            feature: vec![],
        };
        let g = Gallery::new(Schema::new(["category"]).unwrap(), 1, vec![item]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let first = ProgressMemoryLong::load_or_build(&g, dir.path()).unwrap();
        assert!(ProgressMemoryLong::cache_path(dir.path(), &first.gallery_hash).exists());
        let second = ProgressMemoryLong::load_or_build(&g, dir.path()).unwrap();
        assert_eq!(first, second);
    }
}
