//! External reasoner protocol: the JSON documents an LLM-backed decomposer,
//! reflector and question generator exchange with the engine.
//!
//! Query strings use `dim=value` tokens separated by commas or semicolons.
//! In a search string `-dim=value` marks a value to avoid; in an edit string
//! `-dim` clears a dimension. Anything else is kept as free text.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intent::{IntentDecomposition, Question};
use crate::memory::{ConstraintDelta, ProgressMemoryLong};
use crate::reflection::{ReflectionOutcome, Satisfaction};
use crate::types::{Constraint, EditInstruction, Query};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentReply {
    pub reasoning: String,
    pub is_answer_to_prev_question: bool,
    pub has_edit_intent: bool,
    pub search_query_info: String,
    pub edit_query_info: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReflectionReply {
    pub reasoning: String,
    pub satisfaction_level: Satisfaction,
    pub positive_constraints: Vec<String>,
    pub negative_constraints: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionReply {
    pub reasoning_brief: String,
    pub question: String,
}

/// What the engine sends with every reasoner call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasonerRequest {
    pub turn: u32,
    pub feedback_text: Option<String>,
    pub last_question: Option<Question>,
    pub presented_caption: Option<String>,
    pub running_search: Query,
    pub positive_constraints: Vec<Constraint>,
    pub negative_constraints: Vec<Constraint>,
    /// Captions of the current top candidates, best first.
    pub candidate_captions: Vec<String>,
}

pub trait Reasoner: Send + Sync {
    fn decompose(&self, request: &ReasonerRequest) -> Result<IntentReply>;

    fn reflect(&self, request: &ReasonerRequest) -> Result<ReflectionReply>;

    fn ask(&self, request: &ReasonerRequest) -> Result<QuestionReply>;
}

fn tokens(s: &str) -> impl Iterator<Item = &str> {
    s.split([',', ';', '\n']).map(str::trim).filter(|t| !t.is_empty())
}

pub fn parse_search(s: &str, pm_l: &ProgressMemoryLong) -> Query {
    let mut q = Query::new();
    let mut loose = Vec::new();
    for tok in tokens(s) {
        let (negated, body) = match tok.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, tok),
        };
        match Constraint::parse(body) {
            Some(c) if negated => q.avoid(pm_l.canonicalize(&c)),
            Some(c) => q.want(pm_l.canonicalize(&c)),
            None => loose.push(tok),
        }
    }
    if !loose.is_empty() {
        q.set_free_text(Some(loose.join(", ")));
    }
    q
}

pub fn parse_edit(s: &str, pm_l: &ProgressMemoryLong) -> EditInstruction {
    let mut e = EditInstruction::new();
    for tok in tokens(s) {
        if let Some(dim) = tok.strip_prefix('-') {
            if !dim.contains('=') && !dim.trim().is_empty() {
                e.remove(dim.trim().to_lowercase());
                continue;
            }
        }
        if let Some(c) = Constraint::parse(tok) {
            e.set(pm_l.canonicalize(&c));
        }
    }
    e
}

fn parse_constraints(list: &[String], pm_l: &ProgressMemoryLong) -> Result<Vec<Constraint>> {
    list.iter()
        .map(|s| {
            Constraint::parse(s)
                .map(|c| pm_l.canonicalize(&c))
                .ok_or_else(|| Error::Invalid(format!("constraint `{s}` is not dim=value")))
        })
        .collect()
}

impl IntentReply {
    pub fn into_decomposition(self, pm_l: &ProgressMemoryLong) -> Result<IntentDecomposition> {
        let search = parse_search(&self.search_query_info, pm_l);
        let edit = parse_edit(&self.edit_query_info, pm_l);
        if self.has_edit_intent != !edit.is_empty() {
            return Err(Error::Invalid(
                "has_edit_intent disagrees with edit_query_info".into(),
            ));
        }
        Ok(IntentDecomposition::new(search, edit, self.is_answer_to_prev_question))
    }
}

impl ReflectionReply {
    pub fn into_outcome(self, pm_l: &ProgressMemoryLong) -> Result<ReflectionOutcome> {
        let positive = parse_constraints(&self.positive_constraints, pm_l)?;
        let negative = parse_constraints(&self.negative_constraints, pm_l)?;
        if let Some(c) = negative.iter().find(|c| positive.contains(c)) {
            return Err(Error::Invalid(format!("`{c}` is both positive and negative")));
        }
        Ok(ReflectionOutcome {
            satisfaction: self.satisfaction_level,
            delta: ConstraintDelta { positive, negative },
        })
    }
}
