//! Shared vocabulary: constraints, queries, edits, feedback and ranked lists.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Categorical attribute descriptor of an item, keyed by dimension name.
pub type Attributes = BTreeMap<String, String>;

/// The dimension every item must carry.
pub const CATEGORY: &str = "category";

/// A single `(dimension, value)` pair.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Constraint {
    #[serde(rename = "dimension")]
    pub dim: String,
    pub value: String,
}

impl Constraint {
    pub fn new(dim: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            dim: dim.into(),
            value: value.into(),
        }
    }

    /// Parses `dim=value`, trimming whitespace on both sides.
    pub fn parse(token: &str) -> Option<Self> {
        let (dim, value) = token.split_once('=')?;
        let (dim, value) = (dim.trim(), value.trim());
        if dim.is_empty() || value.is_empty() {
            return None;
        }
        Some(Self::new(dim, value))
    }

    pub fn held_by(&self, attributes: &Attributes) -> bool {
        attributes.get(&self.dim) == Some(&self.value)
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.dim, self.value)
    }
}

/// Standalone target description: wanted values (one per dimension) and
/// values to avoid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QueryRepr")]
pub struct Query {
    positive: BTreeMap<String, String>,
    negative: BTreeSet<Constraint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    free_text: Option<String>,
}

#[derive(Deserialize)]
struct QueryRepr {
    #[serde(default)]
    positive: BTreeMap<String, String>,
    #[serde(default)]
    negative: BTreeSet<Constraint>,
    #[serde(default)]
    free_text: Option<String>,
}

impl TryFrom<QueryRepr> for Query {
    type Error = Error;

    fn try_from(repr: QueryRepr) -> Result<Self> {
        for c in &repr.negative {
            if repr.positive.get(&c.dim) == Some(&c.value) {
                return Err(Error::Invalid(format!("`{c}` is both wanted and avoided")));
            }
        }
        Ok(Query {
            positive: repr.positive,
            negative: repr.negative,
            free_text: repr.free_text,
        })
    }
}

impl Query {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_positives<I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = Constraint>,
    {
        let mut q = Self::new();
        for c in pairs {
            q.want(c);
        }
        q
    }

    /// Adds a wanted value; replaces any previous value on the same dimension
    /// and lifts a matching avoidance.
    pub fn want(&mut self, c: Constraint) {
        self.negative.remove(&c);
        self.positive.insert(c.dim, c.value);
    }

    /// Adds a value to avoid; drops the positive if it asked for exactly that.
    pub fn avoid(&mut self, c: Constraint) {
        if self.positive.get(&c.dim) == Some(&c.value) {
            self.positive.remove(&c.dim);
        }
        self.negative.insert(c);
    }

    pub fn set_free_text(&mut self, text: Option<String>) {
        self.free_text = text.filter(|t| !t.trim().is_empty());
    }

    pub fn positive(&self) -> &BTreeMap<String, String> {
        &self.positive
    }

    pub fn positives(&self) -> impl Iterator<Item = Constraint> + '_ {
        self.positive.iter().map(|(d, v)| Constraint::new(d, v))
    }

    pub fn negative(&self) -> &BTreeSet<Constraint> {
        &self.negative
    }

    pub fn free_text(&self) -> Option<&str> {
        self.free_text.as_deref()
    }

    /// True when neither a positive constraint nor free text is present; such
    /// a query cannot drive the text channel.
    pub fn is_empty(&self) -> bool {
        self.positive.is_empty() && self.free_text.is_none()
    }
}

/// Anchor-relative modification: values to set and dimensions to clear.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "EditRepr")]
pub struct EditInstruction {
    deltas: BTreeMap<String, String>,
    removals: BTreeSet<String>,
}

#[derive(Deserialize)]
struct EditRepr {
    #[serde(default)]
    deltas: BTreeMap<String, String>,
    #[serde(default)]
    removals: BTreeSet<String>,
}

impl TryFrom<EditRepr> for EditInstruction {
    type Error = Error;

    fn try_from(repr: EditRepr) -> Result<Self> {
        if let Some(dim) = repr.removals.iter().find(|d| repr.deltas.contains_key(*d)) {
            return Err(Error::Invalid(format!(
                "dimension `{dim}` is both replaced and removed"
            )));
        }
        Ok(EditInstruction {
            deltas: repr.deltas,
            removals: repr.removals,
        })
    }
}

impl EditInstruction {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_deltas<I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = Constraint>,
    {
        let mut e = Self::new();
        for c in pairs {
            e.set(c);
        }
        e
    }

    pub fn set(&mut self, c: Constraint) {
        self.removals.remove(&c.dim);
        self.deltas.insert(c.dim, c.value);
    }

    pub fn remove(&mut self, dim: impl Into<String>) {
        let dim = dim.into();
        self.deltas.remove(&dim);
        self.removals.insert(dim);
    }

    pub fn deltas(&self) -> &BTreeMap<String, String> {
        &self.deltas
    }

    pub fn removals(&self) -> &BTreeSet<String> {
        &self.removals
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty() && self.removals.is_empty()
    }

    /// The attributes implied by applying this edit to `anchor`.
    pub fn apply(&self, anchor: &Attributes) -> Attributes {
        let mut out = anchor.clone();
        for dim in &self.removals {
            out.remove(dim);
        }
        for (dim, value) in &self.deltas {
            out.insert(dim.clone(), value.clone());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackAction {
    Modify,
    Rewrite,
    Answer,
    Accept,
}

/// One turn of user feedback in structured form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackMessage {
    pub action: FeedbackAction,
    #[serde(default)]
    pub payload_positive: Vec<Constraint>,
    #[serde(default)]
    pub payload_negative: Vec<Constraint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answered_question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    /// Explicit "not this one" signal independent of the action.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub reject: bool,
}

impl FeedbackMessage {
    fn with(action: FeedbackAction, positive: Vec<Constraint>) -> Self {
        Self {
            action,
            payload_positive: positive,
            payload_negative: Vec::new(),
            answered_question: None,
            raw_text: None,
            reject: false,
        }
    }

    pub fn accept() -> Self {
        Self::with(FeedbackAction::Accept, Vec::new())
    }

    pub fn modify(positive: Vec<Constraint>) -> Self {
        Self::with(FeedbackAction::Modify, positive)
    }

    pub fn rewrite(positive: Vec<Constraint>) -> Self {
        Self::with(FeedbackAction::Rewrite, positive)
    }

    pub fn answer(question_id: impl Into<String>, positive: Vec<Constraint>) -> Self {
        let mut m = Self::with(FeedbackAction::Answer, positive);
        m.answered_question = Some(question_id.into());
        m
    }

    pub fn validate(&self) -> Result<()> {
        match self.action {
            FeedbackAction::Accept
                if !self.payload_positive.is_empty() || !self.payload_negative.is_empty() =>
            {
                Err(Error::Invalid("accept must carry an empty payload".into()))
            }
            FeedbackAction::Answer if self.answered_question.is_none() => Err(Error::Invalid(
                "answer requires `answered_question`".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    T2V,
    CoVR,
    #[serde(rename = "FUSED")]
    Fused,
}

impl Channel {
    /// The two retrieval channels, in fusion order.
    pub const RETRIEVAL: [Channel; 2] = [Channel::T2V, Channel::CoVR];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::T2V => "T2V",
            Channel::CoVR => "CoVR",
            Channel::Fused => "FUSED",
        }
    }
}

impl std::str::FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T2V" => Ok(Channel::T2V),
            "COVR" => Ok(Channel::CoVR),
            "FUSED" => Ok(Channel::Fused),
            _ => Err(Error::Invalid(format!("unknown channel `{s}`"))),
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub item_id: String,
    pub rank: u32,
    pub score: f64,
}

/// Score-descending order with ascending id as the tie-break.
pub fn by_score_then_id(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// A top-K ranked list produced by one channel (or by fusion) at one turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub channel: Channel,
    pub turn: u32,
    pub entries: Vec<RankedEntry>,
    pub cutoff: usize,
}

impl RankedList {
    /// Sorts `(id, score)` pairs, truncates to `cutoff` and assigns ranks 1..n.
    pub fn from_scores(
        channel: Channel,
        turn: u32,
        mut scored: Vec<(String, f64)>,
        cutoff: usize,
    ) -> Self {
        scored.sort_by(by_score_then_id);
        scored.truncate(cutoff);
        let entries = scored
            .into_iter()
            .enumerate()
            .map(|(i, (item_id, score))| RankedEntry {
                item_id,
                rank: i as u32 + 1,
                score,
            })
            .collect();
        Self {
            channel,
            turn,
            entries,
            cutoff,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top1(&self) -> Option<&str> {
        self.entries.first().map(|e| e.item_id.as_str())
    }

    pub fn get(&self, item_id: &str) -> Option<&RankedEntry> {
        self.entries.iter().find(|e| e.item_id == item_id)
    }

    /// 1-based position of `item_id` in entry order.
    pub fn position(&self, item_id: &str) -> Option<u32> {
        self.entries
            .iter()
            .position(|e| e.item_id == item_id)
            .map(|p| p as u32 + 1)
    }

    /// Checks length, rank-permutation and score-order invariants of an
    /// un-overridden list.
    pub fn validate(&self) -> Result<()> {
        if self.entries.len() > self.cutoff {
            return Err(Error::Invalid(format!(
                "{} entries exceed cutoff {}",
                self.entries.len(),
                self.cutoff
            )));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.rank != i as u32 + 1 {
                return Err(Error::Invalid(format!(
                    "entry {} of {} list has rank {}",
                    i + 1,
                    self.channel,
                    e.rank
                )));
            }
        }
        if self
            .entries
            .windows(2)
            .any(|w| w[1].score.total_cmp(&w[0].score) == Ordering::Greater)
        {
            return Err(Error::Invalid("scores are not non-increasing".into()));
        }
        Ok(())
    }
}
