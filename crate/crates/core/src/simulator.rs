//! Target-conditioned user simulator used as the evaluation instrument.
//!
//! The simulator sees only the presented top-1 and the pending question.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::{Gallery, Item};
use crate::intent::Question;
use crate::types::{Constraint, FeedbackAction, FeedbackMessage, CATEGORY};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[default]
    Mixed,
    ModifyOnly,
    RewriteOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Noise {
    #[default]
    None,
    Light,
    Heavy,
}

macro_rules! parse_snake {
    ($ty:ty, $what:literal) => {
        impl std::str::FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
                    .map_err(|_| Error::Invalid(format!(concat!("unknown ", $what, " `{}`"), s)))
            }
        }
    };
}

parse_snake!(Policy, "policy");
parse_snake!(Noise, "noise level");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorConfig {
    pub policy: Policy,
    pub answer_probability: f64,
    pub noise: Noise,
    pub drop_probability: f64,
    pub rng_seed: u64,
    /// Most differences mentioned in one modify.
    pub max_modify_pairs: usize,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Mixed,
            answer_probability: 0.5,
            noise: Noise::None,
            drop_probability: 0.0,
            rng_seed: 42,
            max_modify_pairs: 2,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.answer_probability) {
            return Err(Error::Invalid("answer probability must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(Error::Invalid("drop probability must lie in [0, 1]".into()));
        }
        if self.max_modify_pairs == 0 {
            return Err(Error::Invalid("max modify pairs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DiffStatus {
    Minor,
    Major,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diff {
    pub dimension: String,
    pub target_value: Option<String>,
    pub candidate_value: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub status: DiffStatus,
    pub diffs: Vec<Diff>,
}

pub fn compare(target: &Item, candidate: &Item) -> Result<Discrepancy> {
    if target.id == candidate.id {
        return Err(Error::Protocol(
            "candidate is the target; the session should have stopped".into(),
        ));
    }
    let mut dims: Vec<&String> = target
        .attributes
        .keys()
        .chain(candidate.attributes.keys())
        .collect();
    dims.sort();
    dims.dedup();
    let diffs = dims
        .into_iter()
        .filter(|d| target.attributes.get(*d) != candidate.attributes.get(*d))
        .map(|d| Diff {
            dimension: d.clone(),
            target_value: target.attributes.get(d).cloned(),
            candidate_value: candidate.attributes.get(d).cloned(),
        })
        .collect();
    let status = if target.attributes.get(CATEGORY) == candidate.attributes.get(CATEGORY) {
        DiffStatus::Minor
    } else {
        DiffStatus::Major
    };
    Ok(Discrepancy { status, diffs })
}

fn full_descriptor(target: &Item) -> Vec<Constraint> {
    target
        .attributes
        .iter()
        .map(|(d, v)| Constraint::new(d, v))
        .collect()
}

fn modify_payload(
    discrepancy: &Discrepancy,
    config: &SimulatorConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Constraint> {
    let mut lead = Vec::new();
    let mut rest = Vec::new();
    for d in &discrepancy.diffs {
        if let Some(v) = &d.target_value {
            let c = Constraint::new(&d.dimension, v);
            if d.dimension == CATEGORY {
                lead.push(c);
            } else {
                rest.push(c);
            }
        }
    }
    rest.shuffle(rng);
    lead.extend(rest);
    lead.truncate(config.max_modify_pairs);
    lead
}

/// One simulated reply before degradation is applied.
fn choose(
    target: &Item,
    candidate: &Item,
    question: Option<&Question>,
    config: &SimulatorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(FeedbackMessage, Option<DiffStatus>)> {
    if target.id == candidate.id {
        return Ok((FeedbackMessage::accept(), None));
    }
    let discrepancy = compare(target, candidate)?;
    let status = Some(discrepancy.status);
    let rewrite = || FeedbackMessage::rewrite(full_descriptor(target));
    let modify = |rng: &mut ChaCha8Rng| {
        let payload = modify_payload(&discrepancy, config, rng);
        if payload.is_empty() {
            rewrite()
        } else {
            FeedbackMessage::modify(payload)
        }
    };
    let msg = match (config.policy, discrepancy.status) {
        (Policy::RewriteOnly, _) => rewrite(),
        (Policy::ModifyOnly, _) => modify(rng),
        (Policy::Mixed, DiffStatus::Minor) => modify(rng),
        (Policy::Mixed, DiffStatus::Major) => {
            let answer = question.and_then(|q| {
                let draw: f64 = rng.gen();
                let value = target.attributes.get(&q.dimension)?;
                (draw < config.answer_probability).then(|| {
                    FeedbackMessage::answer(q.id.clone(), vec![Constraint::new(&q.dimension, value)])
                })
            });
            answer.unwrap_or_else(rewrite)
        }
    };
    Ok((msg, status))
}

/// Surface variant of a value that canonicalization maps back.
fn alias(value: &str) -> String {
    let upper = value.to_uppercase();
    if upper != value {
        upper
    } else {
        format!("{value}_")
    }
}

fn degrade(payload: &mut Vec<Constraint>, config: &SimulatorConfig, rng: &mut ChaCha8Rng) {
    if config.drop_probability > 0.0 {
        payload.retain(|_| !rng.gen_bool(config.drop_probability));
    }
    if config.noise == Noise::None {
        return;
    }
    if !payload.is_empty() && rng.gen_bool(0.2) {
        let i = rng.gen_range(0..payload.len());
        payload[i].value = alias(&payload[i].value);
    }
    if config.noise == Noise::Heavy {
        if !payload.is_empty() && rng.gen_bool(0.2) {
            let i = rng.gen_range(0..payload.len());
            payload.remove(i);
        }
        if payload.len() >= 2 && rng.gen_bool(0.1) {
            let picks: Vec<usize> = rand::seq::index::sample(rng, payload.len(), 2).into_vec();
            let (i, j) = (picks[0], picks[1]);
            let di = payload[i].dim.clone();
            payload[i].dim = std::mem::replace(&mut payload[j].dim, di);
        }
    }
}

/// Full reply: action selection followed by degradation.
pub fn generate_feedback(
    target: &Item,
    candidate: &Item,
    question: Option<&Question>,
    config: &SimulatorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(FeedbackMessage, Option<DiffStatus>)> {
    let (mut msg, status) = choose(target, candidate, question, config, rng)?;
    if msg.action != FeedbackAction::Accept {
        degrade(&mut msg.payload_positive, config, rng);
    }
    Ok((msg, status))
}

/// SplitMix64 finalizer over two words; derives per-session and per-turn
/// seeds so that every draw depends only on (seed, query, turn).
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimStep {
    pub turn: u32,
    pub presented: String,
    pub status: Option<DiffStatus>,
    pub feedback: FeedbackMessage,
}

/// One simulated user bound to a target item.
#[derive(Clone, Debug)]
pub struct UserSimulator {
    target: Item,
    caption: String,
    config: SimulatorConfig,
    session_seed: u64,
}

impl UserSimulator {
    pub fn new(gallery: &Gallery, target_id: &str, config: SimulatorConfig, session_seed: u64) -> Result<Self> {
        config.validate()?;
        let target = gallery.require(target_id)?.clone();
        let caption = target.caption(gallery.schema());
        Ok(Self {
            target,
            caption,
            config,
            session_seed,
        })
    }

    pub fn target(&self) -> &Item {
        &self.target
    }

    /// Caption of the goal, rendered once at construction.
    pub fn caption(&self) -> &str {
        &self.caption
    }

    /// Reply to the item presented after turn `turn - 1`.
    pub fn respond(
        &self,
        gallery: &Gallery,
        presented: &str,
        question: Option<&Question>,
        turn: u32,
    ) -> Result<SimStep> {
        let candidate = gallery.require(presented)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.session_seed, turn as u64));
        let (feedback, status) = generate_feedback(&self.target, candidate, question, &self.config, &mut rng)?;
        Ok(SimStep {
            turn,
            presented: presented.to_string(),
            status,
            feedback,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, pairs: &[(&str, &str)]) -> Item {
        Item {
            id: id.into(),
            attributes: pairs
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            thumbnail: None,
            feature: vec![],
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn target() -> Item {
        item("t", &[("category", "goat"), ("color", "red"), ("scene", "field")])
    }

    #[test]
    fn same_category_is_minor() {
        let cand = item("c", &[("category", "goat"), ("color", "blue"), ("scene", "field")]);
        let d = compare(&target(), &cand).unwrap();
        assert_eq!(d.status, DiffStatus::Minor);
        assert_eq!(d.diffs.len(), 1);
        assert_eq!(d.diffs[0].dimension, "color");
    }

    #[test]
    fn category_change_is_major_with_all_diffs() {
        let cand = item("c", &[("category", "car"), ("color", "blue"), ("scene", "road")]);
        let d = compare(&target(), &cand).unwrap();
        assert_eq!(d.status, DiffStatus::Major);
        assert_eq!(d.diffs.len(), 3);
    }

    #[test]
    fn target_as_candidate() {
        assert!(compare(&target(), &target()).is_err());
        let (fb, status) = generate_feedback(&target(), &target(), None, &SimulatorConfig::default(), &mut rng()).unwrap();
        assert_eq!(fb.action, FeedbackAction::Accept);
        assert!(status.is_none());
    }

    #[test]
    fn minor_single_diff_modifies() {
        let cand = item("c", &[("category", "goat"), ("color", "blue"), ("scene", "field")]);
        let (fb, _) = generate_feedback(&target(), &cand, None, &SimulatorConfig::default(), &mut rng()).unwrap();
        assert_eq!(fb, FeedbackMessage::modify(vec![Constraint::new("color", "red")]));
    }

    #[test]
    fn modify_capped_at_two_pairs() {
        let cand = item("c", &[("category", "goat"), ("color", "blue"), ("scene", "road")]);
        let t = item("t", &[("category", "goat"), ("color", "red"), ("scene", "field"), ("lighting", "dusk")]);
        let (fb, _) = generate_feedback(&t, &cand, None, &SimulatorConfig::default(), &mut rng()).unwrap();
        assert_eq!(fb.action, FeedbackAction::Modify);
        assert_eq!(fb.payload_positive.len(), 2);
        for c in &fb.payload_positive {
            assert!(c.held_by(&t.attributes));
        }
    }

    #[test]
    fn rewrite_only_always_rewrites() {
        let cand = item("c", &[("category", "goat"), ("color", "blue"), ("scene", "field")]);
        let cfg = SimulatorConfig {
            policy: Policy::RewriteOnly,
            ..SimulatorConfig::default()
        };
        let (fb, _) = generate_feedback(&target(), &cand, None, &cfg, &mut rng()).unwrap();
        assert_eq!(fb.action, FeedbackAction::Rewrite);
        assert_eq!(fb.payload_positive, full_descriptor(&target()));
    }

    #[test]
    fn major_answers_or_rewrites() {
        let cand = item("c", &[("category", "car"), ("color", "blue"), ("scene", "road")]);
        let q = Question::about(1, "scene");
        let always = SimulatorConfig {
            answer_probability: 1.0,
            ..SimulatorConfig::default()
        };
        let (fb, _) = generate_feedback(&target(), &cand, Some(&q), &always, &mut rng()).unwrap();
        assert_eq!(fb, FeedbackMessage::answer("q1-scene", vec![Constraint::new("scene", "field")]));
        let never = SimulatorConfig {
            answer_probability: 0.0,
            ..SimulatorConfig::default()
        };
        let (fb, _) = generate_feedback(&target(), &cand, Some(&q), &never, &mut rng()).unwrap();
        assert_eq!(fb.action, FeedbackAction::Rewrite);
    }

    #[test]
    fn modify_only_leads_with_category() {
        let cand = item("c", &[("category", "car"), ("color", "blue"), ("scene", "road")]);
        let cfg = SimulatorConfig {
            policy: Policy::ModifyOnly,
            ..SimulatorConfig::default()
        };
        let (fb, _) = generate_feedback(&target(), &cand, None, &cfg, &mut rng()).unwrap();
        assert_eq!(fb.action, FeedbackAction::Modify);
        assert_eq!(fb.payload_positive[0], Constraint::new("category", "goat"));
    }

    #[test]
    fn full_drop_empties_payload() {
        let cand = item("c", &[("category", "goat"), ("color", "blue"), ("scene", "field")]);
        let cfg = SimulatorConfig {
            drop_probability: 1.0,
            ..SimulatorConfig::default()
        };
        let (fb, _) = generate_feedback(&target(), &cand, None, &cfg, &mut rng()).unwrap();
        assert!(fb.payload_positive.is_empty());
    }

    #[test]
    fn alias_is_canonically_equal() {
        use crate::memory::canonical_key;
        for v in ["red", "RED", "3"] {
            assert_ne!(alias(v), v);
            assert_eq!(canonical_key(&alias(v)), canonical_key(v));
        }
    }

    #[test]
    fn policy_and_noise_parse() {
        assert_eq!("rewrite-only".parse::<Policy>().unwrap(), Policy::RewriteOnly);
        assert_eq!("heavy".parse::<Noise>().unwrap(), Noise::Heavy);
        assert!("loud".parse::<Noise>().is_err());
    }

    #[test]
    fn mix_separates_inputs() {
        assert_ne!(mix(1, 2), mix(2, 1));
        assert_ne!(mix(0, 0), mix(0, 1));
        assert_eq!(mix(42, 3), mix(42, 3));
    }
}
