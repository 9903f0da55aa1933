//! The two retrieval channels.
//!
//! Text-to-video ranks items by agreement with a standalone query; the
//! composed channel applies an edit to an anchor item and ranks against the
//! implied target. Both use the same overlap score, refined by a tiny cosine
//! term so that ties resolve deterministically through the feature geometry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::{dot, Gallery};
use crate::types::{Attributes, Channel, EditInstruction, Query, RankedList};

/// Weight of the cosine tie-refiner.
pub const TIE_EPSILON: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    pub cutoff: usize,
    /// Subtracted once per avoided value an item carries.
    pub negative_penalty: f64,
    /// Drop items carrying an avoided value instead of penalizing them.
    pub hard_negatives: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            cutoff: 100,
            negative_penalty: 0.5,
            hard_negatives: false,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cutoff == 0 {
            return Err(Error::Invalid("channel cutoff must be >= 1".into()));
        }
        if !(self.negative_penalty >= 0.0) {
            return Err(Error::Invalid("negative penalty must be >= 0".into()));
        }
        Ok(())
    }
}

/// Retrieval backend behind both channels. Real encoders would implement
/// this over an embedding index.
pub trait Retriever: Send + Sync {
    fn text_to_video(&self, query: &Query, turn: u32) -> Result<RankedList>;

    fn composed(&self, anchor_id: &str, edit: &EditInstruction, turn: u32) -> Result<RankedList>;
}

/// Attributes the composed channel searches for.
pub fn implied_target(anchor: &Attributes, edit: &EditInstruction) -> Attributes {
    edit.apply(anchor)
}

/// Overlap score of one item against a query, without the cosine refiner.
pub fn overlap_score(query: &Query, attributes: &Attributes, negative_penalty: f64) -> f64 {
    let wanted = query.positive().len();
    let hits = query
        .positive()
        .iter()
        .filter(|(d, v)| attributes.get(*d) == Some(*v))
        .count();
    let violations = query.negative().iter().filter(|c| c.held_by(attributes)).count();
    hits as f64 / wanted.max(1) as f64 - negative_penalty * violations as f64
}

pub fn t2v_retrieve(
    query: &Query,
    gallery: &Gallery,
    config: &ChannelConfig,
    turn: u32,
) -> Result<RankedList> {
    rank(query, gallery, config, Channel::T2V, turn)
}

pub fn covr_retrieve(
    anchor_id: &str,
    edit: &EditInstruction,
    gallery: &Gallery,
    config: &ChannelConfig,
    turn: u32,
) -> Result<RankedList> {
    if edit.is_empty() {
        return Err(Error::EmptyEdit);
    }
    let anchor = gallery.require(anchor_id)?;
    let target = implied_target(&anchor.attributes, edit);
    let query = Query::from_positives(
        target
            .into_iter()
            .map(|(d, v)| crate::types::Constraint::new(d, v)),
    );
    rank(&query, gallery, config, Channel::CoVR, turn)
}

fn rank(
    query: &Query,
    gallery: &Gallery,
    config: &ChannelConfig,
    channel: Channel,
    turn: u32,
) -> Result<RankedList> {
    config.validate()?;
    if query.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let query_feature = gallery.feature_of(query.positive());
    let scored = gallery
        .items()
        .iter()
        .filter(|it| {
            !config.hard_negatives || !query.negative().iter().any(|c| c.held_by(&it.attributes))
        })
        .map(|it| {
            let cos = query_feature
                .as_deref()
                .map(|qf| dot(qf, &it.feature))
                .unwrap_or(0.0);
            let score =
                overlap_score(query, &it.attributes, config.negative_penalty) + TIE_EPSILON * cos;
            (it.id.clone(), score)
        })
        .collect();
    Ok(RankedList::from_scores(channel, turn, scored, config.cutoff))
}

/// The synthetic overlap retriever over an in-memory gallery.
#[derive(Clone, Debug)]
pub struct OverlapRetriever {
    gallery: std::sync::Arc<Gallery>,
    config: ChannelConfig,
}

impl OverlapRetriever {
    pub fn new(gallery: std::sync::Arc<Gallery>, config: ChannelConfig) -> Self {
        Self { gallery, config }
    }
}

impl Retriever for OverlapRetriever {
    fn text_to_video(&self, query: &Query, turn: u32) -> Result<RankedList> {
        t2v_retrieve(query, &self.gallery, &self.config, turn)
    }

    fn composed(&self, anchor_id: &str, edit: &EditInstruction, turn: u32) -> Result<RankedList> {
        covr_retrieve(anchor_id, edit, &self.gallery, &self.config, turn)
    }
}
