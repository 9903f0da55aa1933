//! Intent pathway: split feedback into a search query and an edit, fold the
//! search into the running query, and pick the next clarifying question.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::Gallery;
use crate::memory::{RunningQuery, SessionMemory};
use crate::types::{EditInstruction, FeedbackAction, FeedbackMessage, Query, RankedList};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub dimension: String,
    pub text: String,
}

impl Question {
    pub fn about(turn: u32, dimension: &str) -> Self {
        Self {
            id: format!("q{turn}-{dimension}"),
            dimension: dimension.to_string(),
            text: format!("What {dimension} should the target have?"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntentDecomposition {
    pub search_info: Query,
    pub edit_info: EditInstruction,
    pub is_answer_to_prev: bool,
    pub has_edit_intent: bool,
}

impl IntentDecomposition {
    pub fn new(search_info: Query, edit_info: EditInstruction, is_answer_to_prev: bool) -> Self {
        let has_edit_intent = !edit_info.is_empty();
        Self {
            search_info,
            edit_info,
            is_answer_to_prev,
            has_edit_intent,
        }
    }
}

/// How feedback is routed to the two channels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Action-aware decomposition; modify feeds both channels.
    #[default]
    Decompose,
    /// As `Decompose`, but modify feeds only the composed channel.
    ModifyToComposed,
    /// No decomposition: every payload goes to both channels unchanged.
    Broadcast,
}

fn payload_query(feedback: &FeedbackMessage) -> Query {
    let mut q = Query::from_positives(feedback.payload_positive.iter().cloned());
    for c in &feedback.payload_negative {
        if q.positive().get(&c.dim) != Some(&c.value) {
            q.avoid(c.clone());
        }
    }
    q.set_free_text(feedback.raw_text.clone());
    q
}

fn payload_edit(feedback: &FeedbackMessage) -> EditInstruction {
    EditInstruction::from_deltas(feedback.payload_positive.iter().cloned())
}

fn answers_pending(feedback: &FeedbackMessage, pm: &SessionMemory) -> bool {
    match (&feedback.answered_question, &pm.last_question) {
        (Some(answered), Some(asked)) => *answered == asked.id,
        _ => false,
    }
}

/// Rule-based intent decomposition.
pub fn decompose(
    feedback: &FeedbackMessage,
    pm: &SessionMemory,
    routing: Routing,
) -> Result<IntentDecomposition> {
    if feedback.action == FeedbackAction::Accept {
        return Err(Error::Protocol(
            "accept ends the session and cannot be decomposed".into(),
        ));
    }
    if routing == Routing::Broadcast {
        return Ok(IntentDecomposition::new(
            payload_query(feedback),
            payload_edit(feedback),
            feedback.action == FeedbackAction::Answer && answers_pending(feedback, pm),
        ));
    }
    let decomposition = match feedback.action {
        FeedbackAction::Rewrite => {
            IntentDecomposition::new(payload_query(feedback), EditInstruction::new(), false)
        }
        FeedbackAction::Answer => IntentDecomposition::new(
            payload_query(feedback),
            EditInstruction::new(),
            answers_pending(feedback, pm),
        ),
        FeedbackAction::Modify if routing == Routing::ModifyToComposed => {
            IntentDecomposition::new(Query::new(), payload_edit(feedback), false)
        }
        FeedbackAction::Modify => {
            // the search side sees the accumulated constraints with the
            // payload layered on top
            let mut search = Query::new();
            for c in &pm.constraints_negative {
                search.avoid(c.clone());
            }
            for (d, v) in &pm.constraints_positive {
                search.want(crate::types::Constraint::new(d, v));
            }
            let payload = payload_query(feedback);
            for c in payload.positives() {
                search.want(c);
            }
            for c in payload.negative() {
                search.avoid(c.clone());
            }
            search.set_free_text(feedback.raw_text.clone());
            IntentDecomposition::new(search, payload_edit(feedback), false)
        }
        FeedbackAction::Accept => unreachable!(),
    };
    Ok(decomposition)
}

/// Result of folding one decomposition into the running query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reformed {
    pub running: RunningQuery,
    pub search: Query,
    pub edit: EditInstruction,
    pub compressed: bool,
}

/// Merges the new search intent into the running query (latest wins) and
/// compresses the log once it exceeds `max_positive` assertions. Avoidances
/// already accumulated in session memory are carried into the search.
pub fn reform(decomposition: &IntentDecomposition, pm: &SessionMemory, max_positive: usize) -> Reformed {
    let mut running = pm.running_search.clone();
    running.absorb(&decomposition.search_info);
    let compressed = running.compress(max_positive);
    let mut search = running.to_query();
    for c in &pm.constraints_negative {
        if search.positive().get(&c.dim) != Some(&c.value) {
            search.avoid(c.clone());
        }
    }
    search.set_free_text(decomposition.search_info.free_text().map(str::to_string));
    Reformed {
        running,
        search,
        edit: decomposition.edit_info.clone(),
        compressed,
    }
}

/// Shannon entropy (nats) of a value histogram.
pub fn entropy<'a, I>(values: I) -> f64
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut total = 0usize;
    for v in values {
        *counts.entry(v).or_default() += 1;
        total += 1;
    }
    if total == 0 {
        return 0.0;
    }
    counts
        .values()
        .map(|&n| {
            let p = n as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Asks about the unconstrained dimension whose values are most mixed among
/// the top `pool` fused candidates. Ties go to the lexicographically smallest
/// dimension; `None` when nothing is ambiguous.
pub fn ask_question(
    pm: &SessionMemory,
    fused: &RankedList,
    gallery: &Gallery,
    pool: usize,
) -> Option<Question> {
    let constrained = pm.constrained_dims();
    let candidates: Vec<_> = fused
        .entries
        .iter()
        .take(pool)
        .filter_map(|e| gallery.get(&e.item_id))
        .collect();
    let mut dims: Vec<&String> = gallery
        .schema()
        .dims()
        .iter()
        .filter(|d| !constrained.contains(*d))
        .collect();
    dims.sort();
    let mut best: Option<(&str, f64)> = None;
    for dim in dims {
        let h = entropy(
            candidates
                .iter()
                .map(|it| it.attributes.get(dim).map(String::as_str).unwrap_or("")),
        );
        if h > 1e-12 && best.is_none_or(|(_, bh)| h > bh) {
            best = Some((dim, h));
        }
    }
    best.map(|(dim, _)| Question::about(pm.turn + 1, dim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::{Item, Schema};
    use crate::memory::ConstraintDelta;
    use crate::types::{Channel, Constraint};

    fn c(d: &str, v: &str) -> Constraint {
        Constraint::new(d, v)
    }

    fn pm() -> SessionMemory {
        SessionMemory::new("ref", EditInstruction::from_deltas([c("color", "red")]))
    }

    #[test]
    fn modify_feeds_both_channels() {
        let fb = FeedbackMessage::modify(vec![c("color", "black"), c("lighting", "backlit")]);
        let d = decompose(&fb, &pm(), Routing::Decompose).unwrap();
        assert_eq!(d.edit_info.deltas().len(), 2);
        assert_eq!(d.edit_info.deltas()["color"], "black");
        assert_eq!(d.edit_info.deltas()["lighting"], "backlit");
        assert_eq!(d.search_info.positive()["color"], "black");
        assert_eq!(d.search_info.positive()["lighting"], "backlit");
        assert!(d.has_edit_intent);
    }

    #[test]
    fn modify_merges_accumulated_constraints_into_search() {
        let mut m = pm();
        m.update_constraints(&ConstraintDelta {
            positive: vec![c("category", "dog"), c("color", "white")],
            negative: vec![c("scene", "indoor")],
        });
        let fb = FeedbackMessage::modify(vec![c("color", "black")]);
        let d = decompose(&fb, &m, Routing::Decompose).unwrap();
        assert_eq!(d.search_info.positive()["category"], "dog");
        assert_eq!(d.search_info.positive()["color"], "black");
        assert!(d.search_info.negative().contains(&c("scene", "indoor")));
    }

    #[test]
    fn rewrite_is_search_only() {
        let fb = FeedbackMessage::rewrite(vec![c("category", "dog"), c("color", "red"), c("scene", "beach")]);
        let d = decompose(&fb, &pm(), Routing::Decompose).unwrap();
        assert_eq!(d.search_info.positive().len(), 3);
        assert!(d.edit_info.is_empty());
        assert!(!d.has_edit_intent);
    }

    #[test]
    fn answer_marks_pending_question() {
        let mut m = pm();
        m.last_question = Some(Question::about(1, "scene"));
        let fb = FeedbackMessage::answer("q1-scene", vec![c("scene", "beach")]);
        let d = decompose(&fb, &m, Routing::Decompose).unwrap();
        assert!(d.is_answer_to_prev);
        assert_eq!(d.search_info.positive()["scene"], "beach");
        assert!(d.edit_info.is_empty());
    }

    #[test]
    fn accept_cannot_be_decomposed() {
        let err = decompose(&FeedbackMessage::accept(), &pm(), Routing::Decompose).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn alternative_routings() {
        let fb = FeedbackMessage::modify(vec![c("color", "black")]);
        let d = decompose(&fb, &pm(), Routing::ModifyToComposed).unwrap();
        assert!(d.search_info.is_empty());
        assert!(!d.edit_info.is_empty());

        let fb = FeedbackMessage::rewrite(vec![c("color", "black")]);
        let d = decompose(&fb, &pm(), Routing::Broadcast).unwrap();
        assert!(!d.search_info.is_empty());
        assert!(!d.edit_info.is_empty());
    }

    #[test]
    fn reform_disjoint_merge() {
        let mut m = pm();
        m.running_search.absorb(&Query::from_positives([c("category", "dog")]));
        let d = IntentDecomposition::new(
            Query::from_positives([c("color", "brown")]),
            EditInstruction::new(),
            false,
        );
        let r = reform(&d, &m, 10);
        assert_eq!(r.search.positive().len(), 2);
        assert_eq!(r.search.positive()["category"], "dog");
        assert_eq!(r.search.positive()["color"], "brown");
    }

    #[test]
    fn reform_latest_wins() {
        let mut m = pm();
        m.running_search.absorb(&Query::from_positives([c("color", "red")]));
        let d = IntentDecomposition::new(
            Query::from_positives([c("color", "blue")]),
            EditInstruction::new(),
            false,
        );
        let r = reform(&d, &m, 10);
        assert_eq!(r.search.positive().len(), 1);
        assert_eq!(r.search.positive()["color"], "blue");
    }

    #[test]
    fn reform_is_idempotent() {
        let m = pm();
        let d = IntentDecomposition::new(
            Query::from_positives([c("color", "blue"), c("scene", "snow")]),
            EditInstruction::from_deltas([c("color", "blue")]),
            false,
        );
        let once = reform(&d, &m, 10);
        let mut m2 = m.clone();
        m2.running_search = once.running.clone();
        let twice = reform(&d, &m2, 10);
        assert_eq!(once.running, twice.running);
        assert_eq!(once.search, twice.search);
        assert_eq!(once.edit, twice.edit);
    }

    #[test]
    fn reform_compresses_past_threshold() {
        let mut m = pm();
        let dims = ["color", "scene", "action", "lighting"];
        for round in 0..3 {
            for d in dims {
                m.running_search.positives.push(c(d, &format!("{d}{round}")));
            }
        }
        let r = reform(&IntentDecomposition::default(), &m, 10);
        assert!(r.compressed);
        assert_eq!(r.running.positives.len(), 10);
        assert_eq!(r.search.positive().len(), 4);
    }

    fn fixture(scenes: &[&str]) -> (Gallery, RankedList) {
        let items: Vec<Item> = scenes
            .iter()
            .enumerate()
            .map(|(i, s)| Item {
                id: format!("v{i:02}"),
                attributes: [
                    ("category", "dog"),
                    ("color", "red"),
                    ("scene", s),
                    ("lighting", "day"),
                ]
                .into_iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
                thumbnail: None,
                feature: vec![],
            })
            .collect();
        let g = Gallery::new(
            Schema::new(["category", "color", "scene", "lighting"]).unwrap(),
            1,
            items,
        )
        .unwrap();
        let fused = RankedList::from_scores(
            Channel::Fused,
            1,
            g.items()
                .iter()
                .enumerate()
                .map(|(i, it)| (it.id.clone(), 1.0 / (i as f64 + 1.0)))
                .collect(),
            100,
        );
        (g, fused)
    }

    #[test]
    fn question_targets_split_dimension() {
        let scenes = ["beach", "snow", "beach", "snow", "beach", "snow", "beach", "snow", "beach", "snow"];
        let (g, fused) = fixture(&scenes);
        let q = ask_question(&pm(), &fused, &g, 10).unwrap();
        assert_eq!(q.dimension, "scene");
        assert!((entropy(scenes.iter().copied()) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn no_question_when_uniform_or_single() {
        let (g, fused) = fixture(&["beach"]);
        assert!(ask_question(&pm(), &fused, &g, 10).is_none());
        let (g, fused) = fixture(&["beach", "beach", "beach"]);
        assert!(ask_question(&pm(), &fused, &g, 10).is_none());
    }

    #[test]
    fn no_question_when_everything_constrained() {
        let (g, fused) = fixture(&["beach", "snow"]);
        let mut m = pm();
        m.update_constraints(&ConstraintDelta {
            positive: vec![
                c("category", "dog"),
                c("color", "red"),
                c("scene", "beach"),
                c("lighting", "day"),
            ],
            negative: vec![],
        });
        assert!(ask_question(&m, &fused, &g, 10).is_none());
    }
}
