//! Reflection pathway: satisfaction and constraint deltas from one turn of
//! feedback, and the failure-triggered rank-cap policy.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::Gallery;
use crate::memory::{ConstraintDelta, SessionMemory};
use crate::types::{Constraint, FeedbackAction, FeedbackMessage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Satisfaction {
    Negative,
    Neutral,
}

impl Satisfaction {
    /// Satisfaction implied by the feedback form alone: a rewrite or an
    /// explicit reject means the presented result was wrong.
    pub fn from_action(feedback: &FeedbackMessage) -> Self {
        match feedback.action {
            FeedbackAction::Answer => Satisfaction::Neutral,
            FeedbackAction::Rewrite => Satisfaction::Negative,
            _ if feedback.reject => Satisfaction::Negative,
            _ => Satisfaction::Neutral,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReflectionOutcome {
    pub satisfaction: Satisfaction,
    pub delta: ConstraintDelta,
}

/// Rule-based reflection. `presented` is the item shown to the user before
/// this feedback; with `mine_negatives` its values that contradict the held
/// positives become avoidances on a negative turn.
pub fn reflect(
    feedback: &FeedbackMessage,
    pm: &SessionMemory,
    gallery: &Gallery,
    presented: Option<&str>,
    mine_negatives: bool,
) -> Result<ReflectionOutcome> {
    if feedback.action == FeedbackAction::Accept {
        return Err(Error::Protocol("accept carries nothing to reflect on".into()));
    }
    let satisfaction = Satisfaction::from_action(feedback);

    let mut positive: Vec<Constraint> = Vec::new();
    for c in &feedback.payload_positive {
        if pm.holds_positive(c) {
            continue;
        }
        // latest mention of a dimension wins within one payload as well
        positive.retain(|p| p.dim != c.dim);
        positive.push(c.clone());
    }
    let wanted: BTreeSet<&Constraint> = positive.iter().collect();

    let mut negative: BTreeSet<Constraint> = feedback
        .payload_negative
        .iter()
        .filter(|c| !pm.constraints_negative.contains(*c) && !wanted.contains(c))
        .cloned()
        .collect();

    if satisfaction == Satisfaction::Negative && mine_negatives {
        if let Some(item) = presented.and_then(|id| gallery.get(id)) {
            let held = |dim: &str| -> Option<&String> {
                positive
                    .iter()
                    .rev()
                    .find(|p| p.dim == dim)
                    .map(|p| &p.value)
                    .or_else(|| pm.constraints_positive.get(dim))
            };
            for (dim, value) in &item.attributes {
                if let Some(want) = held(dim) {
                    let c = Constraint::new(dim, value);
                    if want != value && !pm.constraints_negative.contains(&c) {
                        negative.insert(c);
                    }
                }
            }
        }
    }

    Ok(ReflectionOutcome {
        satisfaction,
        delta: ConstraintDelta {
            positive,
            negative: negative.into_iter().collect(),
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankCapTrigger {
    ExplicitRejection,
    Stagnation,
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankCapAction {
    pub target_item: Option<String>,
    pub cap_rank: Option<u32>,
    pub trigger: RankCapTrigger,
}

impl RankCapAction {
    pub fn none() -> Self {
        Self {
            target_item: None,
            cap_rank: None,
            trigger: RankCapTrigger::None,
        }
    }
}

/// Floor ranks for the two triggers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CapPositions {
    pub negative: u32,
    pub neutral: u32,
}

impl Default for CapPositions {
    fn default() -> Self {
        Self {
            negative: 11,
            neutral: 4,
        }
    }
}

/// Decides the rank adjustment for turn `t` from the satisfaction and the
/// fused top-1 of the previous two turns (`previous` is turn t-1,
/// `before_previous` turn t-2).
pub fn rank_cap_policy(
    satisfaction: Satisfaction,
    previous: Option<&str>,
    before_previous: Option<&str>,
    caps: CapPositions,
) -> RankCapAction {
    let Some(shown) = previous else {
        return RankCapAction::none();
    };
    match satisfaction {
        Satisfaction::Negative => RankCapAction {
            target_item: Some(shown.to_string()),
            cap_rank: Some(caps.negative),
            trigger: RankCapTrigger::ExplicitRejection,
        },
        Satisfaction::Neutral if before_previous == Some(shown) => RankCapAction {
            target_item: Some(shown.to_string()),
            cap_rank: Some(caps.neutral),
            trigger: RankCapTrigger::Stagnation,
        },
        Satisfaction::Neutral => RankCapAction::none(),
    }
}
