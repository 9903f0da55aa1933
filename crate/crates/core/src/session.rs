//! The interactive turn loop over one session.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channels::{ChannelConfig, OverlapRetriever, Retriever};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionConfig};
use crate::gallery::Gallery;
use crate::intent::{ask_question, decompose, reform, IntentDecomposition, Question, Routing};
use crate::memory::{ProgressMemoryLong, ResultMemory, SessionMemory};
use crate::reasoner::{Reasoner, ReasonerRequest};
use crate::reflection::{
    rank_cap_policy, reflect, CapPositions, RankCapAction, ReflectionOutcome, Satisfaction,
};
use crate::types::{
    Channel, EditInstruction, FeedbackAction, FeedbackMessage, Query, RankedEntry, RankedList,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub disable_t2v: bool,
    pub disable_covr: bool,
    pub disable_intent_routing: bool,
    pub disable_reflection: bool,
    pub disable_rank_cap: bool,
}

impl AblationFlags {
    pub fn full() -> Self {
        Self::default()
    }

    /// Single-channel CoVR loop: no text channel, intent, reflection or cap.
    pub fn covr_only() -> Self {
        Self {
            disable_t2v: true,
            disable_covr: false,
            disable_intent_routing: true,
            disable_reflection: true,
            disable_rank_cap: true,
        }
    }

    pub fn t2v_only() -> Self {
        Self {
            disable_t2v: false,
            disable_covr: true,
            ..Self::covr_only()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.disable_t2v && self.disable_covr {
            return Err(Error::Invalid("at least one channel must stay enabled".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub max_turns: u32,
    pub fusion: FusionConfig,
    pub channel: ChannelConfig,
    pub caps: CapPositions,
    pub ablation: AblationFlags,
    /// Route modify feedback to the composed channel only.
    pub modify_to_composed: bool,
    /// Positive assertions kept in the running query before compression.
    pub max_query_len: usize,
    /// Fused candidates inspected when choosing a question.
    pub question_pool: usize,
    pub ask_questions: bool,
    /// Turn the rejected item's conflicting values into avoidances.
    pub mine_negatives: bool,
    /// Cap earlier in-window turns too, not only the fresh lists.
    pub cap_history: bool,
    /// Re-run the composed channel with the last edit when a turn has none.
    pub carry_edit: bool,
    /// Put wall-clock stage timings into the trace (breaks byte-identity).
    pub record_timings: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_turns: 5,
            fusion: FusionConfig::default(),
            channel: ChannelConfig::default(),
            caps: CapPositions::default(),
            ablation: AblationFlags::default(),
            modify_to_composed: false,
            max_query_len: 10,
            question_pool: 10,
            ask_questions: true,
            mine_negatives: true,
            cap_history: true,
            carry_edit: false,
            record_timings: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.channel.validate()?;
        self.ablation.validate()?;
        if self.max_turns == 0 {
            return Err(Error::Invalid("max turns must be >= 1".into()));
        }
        if self.caps.negative == 0 || self.caps.neutral == 0 {
            return Err(Error::Invalid("cap positions must be >= 1".into()));
        }
        Ok(())
    }

    fn routing(&self) -> Routing {
        if self.ablation.disable_intent_routing {
            Routing::Broadcast
        } else if self.modify_to_composed {
            Routing::ModifyToComposed
        } else {
            Routing::Decompose
        }
    }
}

/// Shared, read-only resources behind every session.
#[derive(Clone)]
pub struct EngineContext {
    pub gallery: Arc<Gallery>,
    pub pm_l: Arc<ProgressMemoryLong>,
    pub retriever: Arc<dyn Retriever>,
    pub reasoner: Option<Arc<dyn Reasoner>>,
}

impl EngineContext {
    /// Context over the synthetic overlap channels.
    pub fn synthetic(gallery: Arc<Gallery>, pm_l: Arc<ProgressMemoryLong>, channel: &ChannelConfig) -> Self {
        let retriever = Arc::new(OverlapRetriever::new(gallery.clone(), channel.clone()));
        Self {
            gallery,
            pm_l,
            retriever,
            reasoner: None,
        }
    }

    pub fn with_reasoner(mut self, reasoner: Arc<dyn Reasoner>) -> Self {
        self.reasoner = Some(reasoner);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Active,
    Found,
    Exhausted,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub understand_us: u64,
    pub retrieve_us: u64,
    pub fuse_us: u64,
    pub question_us: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapEvent {
    pub action: RankCapAction,
    pub first_turn: u32,
    pub last_turn: u32,
    pub overrides: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub turn: u32,
    /// Question that was pending when the feedback arrived.
    pub question_asked: Option<Question>,
    pub feedback: Option<FeedbackMessage>,
    pub decomposition: Option<IntentDecomposition>,
    pub search: Option<Query>,
    pub edit: Option<EditInstruction>,
    pub reflection: Option<ReflectionOutcome>,
    pub satisfaction: Option<Satisfaction>,
    pub rank_cap: Option<CapEvent>,
    pub anchor: Option<String>,
    pub channels: Vec<Channel>,
    pub presented: Option<String>,
    pub fused: Vec<RankedEntry>,
    /// Question generated for the next turn.
    pub question: Option<Question>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<StageTimings>,
}

/// Everything a session did, serializable as its history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub reference_item: String,
    pub initial_edit: EditInstruction,
    pub state: SessionState,
    pub turns: Vec<TurnTrace>,
    /// Turn count when the user accepted, if they did.
    pub accepted_after: Option<u32>,
    pub result_memory: ResultMemory,
}

/// What a caller sees after a turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnOutput {
    pub turn: u32,
    pub presented: Option<String>,
    pub fused: RankedList,
    pub question: Option<Question>,
    pub state: SessionState,
}

pub struct Session {
    ctx: EngineContext,
    config: EngineConfig,
    pm: SessionMemory,
    rm: ResultMemory,
    fused: Vec<RankedList>,
    turns: Vec<TurnTrace>,
    state: SessionState,
    accepted_after: Option<u32>,
}

fn micros(start: Instant) -> u64 {
    start.elapsed().as_micros() as u64
}

impl Session {
    /// Creates the session and runs the turn-0 composed query.
    pub fn start(
        ctx: EngineContext,
        config: EngineConfig,
        reference_id: &str,
        initial_edit: EditInstruction,
    ) -> Result<Self> {
        config.validate()?;
        ctx.gallery.require(reference_id)?;
        let mut u0 = EditInstruction::new();
        for (d, v) in initial_edit.deltas() {
            u0.set(ctx.pm_l.canonicalize(&crate::types::Constraint::new(d, v)));
        }
        for d in initial_edit.removals() {
            u0.remove(d.clone());
        }
        if u0.is_empty() {
            return Err(Error::EmptyEdit);
        }

        let began = Instant::now();
        let list = ctx.retriever.composed(reference_id, &u0, 0)?;
        let retrieve_us = micros(began);
        let mut rm = ResultMemory::new();
        rm.append(list.clone())?;
        let mut fused = list;
        fused.channel = Channel::Fused;
        fused.entries.truncate(config.fusion.cutoff);
        fused.cutoff = config.fusion.cutoff;

        let mut pm = SessionMemory::new(reference_id, u0.clone());
        let began = Instant::now();
        let question = if config.ask_questions {
            ask_question(&pm, &fused, &ctx.gallery, config.question_pool)
        } else {
            None
        };
        pm.last_question = question.clone();

        let trace = TurnTrace {
            turn: 0,
            question_asked: None,
            feedback: None,
            decomposition: None,
            search: None,
            edit: Some(u0.clone()),
            reflection: None,
            satisfaction: None,
            rank_cap: None,
            anchor: Some(reference_id.to_string()),
            channels: vec![Channel::CoVR],
            presented: fused.top1().map(str::to_string),
            fused: fused.entries.clone(),
            question,
            timings: config.record_timings.then(|| StageTimings {
                retrieve_us,
                question_us: micros(began),
                ..StageTimings::default()
            }),
        };
        Ok(Self {
            ctx,
            config,
            pm,
            rm,
            fused: vec![fused],
            turns: vec![trace],
            state: SessionState::Active,
            accepted_after: None,
        })
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    /// Number of completed feedback turns.
    pub fn turn(&self) -> u32 {
        self.pm.turn
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn memory(&self) -> &SessionMemory {
        &self.pm
    }

    pub fn result_memory(&self) -> &ResultMemory {
        &self.rm
    }

    pub fn fused(&self, turn: u32) -> Option<&RankedList> {
        self.fused.get(turn as usize)
    }

    pub fn current(&self) -> &RankedList {
        self.fused.last().expect("turn 0 always exists")
    }

    pub fn presented(&self) -> Option<&str> {
        self.current().top1()
    }

    pub fn pending_question(&self) -> Option<&Question> {
        self.pm.last_question.as_ref()
    }

    pub fn output(&self) -> TurnOutput {
        TurnOutput {
            turn: self.pm.turn,
            presented: self.presented().map(str::to_string),
            fused: self.current().clone(),
            question: self.pm.last_question.clone(),
            state: self.state,
        }
    }

    pub fn trace(&self) -> SessionTrace {
        SessionTrace {
            reference_item: self.pm.reference_item.clone(),
            initial_edit: self.pm.initial_edit.clone(),
            state: self.state,
            turns: self.turns.clone(),
            accepted_after: self.accepted_after,
            result_memory: self.rm.clone(),
        }
    }

    /// Marks the current result as the one the user wanted.
    pub fn accept(&mut self) -> Result<TurnOutput> {
        self.ensure_active()?;
        self.state = SessionState::Found;
        self.accepted_after = Some(self.pm.turn);
        Ok(self.output())
    }

    fn ensure_active(&self) -> Result<()> {
        match self.state {
            SessionState::Active => Ok(()),
            other => Err(Error::Protocol(format!(
                "session is {}",
                serde_json::to_value(other)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default()
            ))),
        }
    }

    fn request(&self, feedback: &FeedbackMessage, fused: Option<&RankedList>) -> ReasonerRequest {
        let caption = |id: &str| self.ctx.pm_l.caption(id).map(str::to_string);
        let list = fused.unwrap_or_else(|| self.current());
        ReasonerRequest {
            turn: self.pm.turn + 1,
            feedback_text: feedback.raw_text.clone(),
            last_question: self.pm.last_question.clone(),
            presented_caption: self.presented().and_then(caption),
            running_search: self.pm.running_search.to_query(),
            positive_constraints: self
                .pm
                .constraints_positive
                .iter()
                .map(|(d, v)| crate::types::Constraint::new(d, v))
                .collect(),
            negative_constraints: self.pm.constraints_negative.iter().cloned().collect(),
            candidate_captions: list
                .entries
                .iter()
                .take(self.config.question_pool)
                .filter_map(|e| caption(&e.item_id))
                .collect(),
        }
    }

    /// Runs one feedback turn.
    pub fn step(&mut self, feedback: &FeedbackMessage) -> Result<TurnOutput> {
        self.ensure_active()?;
        feedback.validate()?;
        if feedback.action == FeedbackAction::Accept {
            return self.accept();
        }
        let reasoner = match (&feedback.raw_text, &self.ctx.reasoner) {
            (Some(_), None) => {
                return Err(Error::Invalid(
                    "raw_text needs an external reasoner and none is configured".into(),
                ))
            }
            (Some(_), Some(r)) => Some(r.clone()),
            (None, _) => None,
        };

        let t = self.pm.turn + 1;
        let fb = self.ctx.pm_l.normalize_feedback(feedback);
        let snapshot = self.pm.clone();
        let presented = self.presented().map(str::to_string);
        let before_previous = t
            .checked_sub(2)
            .and_then(|tp| self.fused(tp))
            .and_then(|l| l.top1())
            .map(str::to_string);
        let routing = self.config.routing();
        let request = reasoner.as_ref().map(|_| self.request(&fb, None));

        // understand: decomposition, reform, reflection over one snapshot
        let began = Instant::now();
        let rule_decomposition = || decompose(&fb, &snapshot, routing);
        let decomposition = match (&reasoner, &request) {
            (Some(r), Some(req)) if routing != Routing::Broadcast => {
                match r.decompose(req).and_then(|reply| reply.into_decomposition(&self.ctx.pm_l)) {
                    Ok(d) => d,
                    Err(e) => {
                        tracing::warn!(error = %e, turn = t, "reasoner decomposition failed, using rules");
                        rule_decomposition()?
                    }
                }
            }
            _ => rule_decomposition()?,
        };
        let reformed = reform(&decomposition, &snapshot, self.config.max_query_len);
        let reflection = if self.config.ablation.disable_reflection {
            None
        } else {
            let rule = || {
                reflect(
                    &fb,
                    &snapshot,
                    &self.ctx.gallery,
                    presented.as_deref(),
                    self.config.mine_negatives,
                )
            };
            Some(match (&reasoner, &request) {
                (Some(r), Some(req)) => {
                    match r.reflect(req).and_then(|reply| reply.into_outcome(&self.ctx.pm_l)) {
                        Ok(o) => o,
                        Err(e) => {
                            tracing::warn!(error = %e, turn = t, "reasoner reflection failed, using rules");
                            rule()?
                        }
                    }
                }
                _ => rule()?,
            })
        };
        let satisfaction = reflection
            .as_ref()
            .map(|r| r.satisfaction)
            .unwrap_or_else(|| Satisfaction::from_action(&fb));
        let understand_us = micros(began);

        if let Some(r) = &reflection {
            self.pm.update_constraints(&r.delta);
        }
        self.pm.running_search = reformed.running.clone();

        let mut search = reformed.search.clone();
        let mut edit = reformed.edit.clone();
        if edit.is_empty() && self.config.carry_edit {
            edit = self.pm.running_edit.clone();
        }
        if !reformed.edit.is_empty() {
            self.pm.running_edit = reformed.edit.clone();
        }

        let t2v_on = !self.config.ablation.disable_t2v;
        let covr_on = !self.config.ablation.disable_covr && presented.is_some();
        let t2v_fires = t2v_on && !search.is_empty();
        let covr_fires = covr_on && !edit.is_empty();
        if !t2v_fires && !covr_fires {
            // only one channel can run: hand it the other query's content
            if t2v_on && !edit.is_empty() {
                let mut q = Query::from_positives(
                    edit.deltas().iter().map(|(d, v)| crate::types::Constraint::new(d, v)),
                );
                for c in &self.pm.constraints_negative {
                    if !c.held_by(q.positive()) {
                        q.avoid(c.clone());
                    }
                }
                search = q;
            } else if covr_on && !search.positive().is_empty() {
                edit = EditInstruction::from_deltas(search.positives());
            }
        }

        let began = Instant::now();
        let mut channels = Vec::new();
        if t2v_on && !search.is_empty() {
            let list = self.ctx.retriever.text_to_video(&search, t)?;
            self.rm.append(list)?;
            channels.push(Channel::T2V);
        }
        let anchor = if covr_on && !edit.is_empty() {
            let anchor = presented.clone().expect("covr_on implies an anchor");
            let list = self.ctx.retriever.composed(&anchor, &edit, t)?;
            self.rm.append(list)?;
            channels.push(Channel::CoVR);
            Some(anchor)
        } else {
            None
        };
        let retrieve_us = micros(began);

        let began = Instant::now();
        let rank_cap = if self.config.ablation.disable_rank_cap {
            None
        } else {
            let action = rank_cap_policy(
                satisfaction,
                presented.as_deref(),
                before_previous.as_deref(),
                self.config.caps,
            );
            match (&action.target_item, action.cap_rank) {
                (Some(item), Some(cap)) => {
                    let first = if self.config.cap_history {
                        self.config.fusion.window_start(t)
                    } else {
                        t
                    };
                    let overrides = self.rm.cap(item, cap, first..=t);
                    Some(CapEvent {
                        action,
                        first_turn: first,
                        last_turn: t,
                        overrides,
                    })
                }
                _ => None,
            }
        };
        let fused = match fuse(&self.rm, &self.config.fusion, t) {
            Ok(list) => list,
            Err(Error::EmptyWindow(_)) => {
                let mut carried = self.current().clone();
                carried.turn = t;
                carried
            }
            Err(e) => return Err(e),
        };
        let fuse_us = micros(began);

        self.pm.turn = t;
        let began = Instant::now();
        let mut question = if self.config.ask_questions {
            ask_question(&self.pm, &fused, &self.ctx.gallery, self.config.question_pool)
        } else {
            None
        };
        if let (Some(q), Some(r)) = (question.as_mut(), &reasoner) {
            let mut req = self.request(&fb, Some(&fused));
            req.turn = t;
            match r.ask(&req) {
                Ok(reply) if !reply.question.trim().is_empty() => q.text = reply.question,
                Ok(_) => {}
                Err(e) => tracing::warn!(error = %e, turn = t, "reasoner question failed, using rules"),
            }
        }
        let question_us = micros(began);
        self.pm.last_question = question.clone();

        if t >= self.config.max_turns {
            self.state = SessionState::Exhausted;
        }
        self.turns.push(TurnTrace {
            turn: t,
            question_asked: snapshot.last_question.clone(),
            feedback: Some(feedback.clone()),
            decomposition: Some(decomposition),
            search: Some(search),
            edit: Some(edit),
            reflection,
            satisfaction: Some(satisfaction),
            rank_cap,
            anchor,
            channels,
            presented: fused.top1().map(str::to_string),
            fused: fused.entries.clone(),
            question,
            timings: self.config.record_timings.then_some(StageTimings {
                understand_us,
                retrieve_us,
                fuse_us,
                question_us,
            }),
        });
        self.fused.push(fused);
        Ok(self.output())
    }
}
