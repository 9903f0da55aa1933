//! Time-weighted reciprocal rank fusion and its comparison variants.
//!
//! Every variant reads channel lists from a [`ResultMemory`] window, so rank
//! overrides written by the rank-cap policy are honored automatically (the
//! raw-score variants ignore ranks and therefore caps).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::ResultMemory;
use crate::types::{Channel, RankedList};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    #[default]
    Twrrf,
    StaticRrf,
    UniformRrf,
    PenaltyRrf,
    Simmax,
    Simsum,
}

impl std::str::FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::Invalid(format!("unknown fusion variant `{s}`")))
    }
}

/// How penalty fusion treats a candidate missing from an in-window list.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// Subtract `w / (k + r_pen)`.
    #[default]
    Subtract,
    /// Score the absentee as if it sat at rank `r_pen`.
    AsRank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub variant: FusionVariant,
    pub window: u32,
    pub k: f64,
    pub cutoff: usize,
    /// Defaults to `cutoff` when unset.
    pub penalty_rank: Option<u32>,
    pub penalty_mode: PenaltyMode,
    /// T2V and CoVR weights for the static and penalty variants.
    pub channel_weights: [f64; 2],
    /// Let the turn-0 list count as a regular turn of the window.
    pub include_turn0: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            variant: FusionVariant::Twrrf,
            window: 5,
            k: 60.0,
            cutoff: 100,
            penalty_rank: None,
            penalty_mode: PenaltyMode::Subtract,
            channel_weights: [0.5, 0.5],
            include_turn0: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Invalid("fusion window must be >= 1".into()));
        }
        if !(self.k > 0.0) {
            return Err(Error::Invalid("rrf k must be > 0".into()));
        }
        if self.cutoff == 0 {
            return Err(Error::Invalid("fusion cutoff must be >= 1".into()));
        }
        let [a, b] = self.channel_weights;
        if a < 0.0 || b < 0.0 || ((a + b) - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid("channel weights must be >= 0 and sum to 1".into()));
        }
        Ok(())
    }

    pub fn penalty_rank(&self) -> u32 {
        self.penalty_rank.unwrap_or(self.cutoff as u32)
    }

    /// First turn of the window ending at `t`.
    pub fn window_start(&self, t: u32) -> u32 {
        let floor = if self.include_turn0 { 0 } else { 1 };
        (t + 1).saturating_sub(self.window).max(floor).min(t)
    }

    fn channel_weight(&self, channel: Channel) -> f64 {
        match channel {
            Channel::T2V => self.channel_weights[0],
            _ => self.channel_weights[1],
        }
    }
}

/// Normalized linear recency weights over `[t0, t]`, oldest first.
pub fn weights_from(t0: u32, t: u32) -> Vec<(u32, f64)> {
    let n = (t - t0 + 1) as f64;
    (t0..=t)
        .map(|tp| (tp, 2.0 * (tp - t0 + 1) as f64 / (n * (n + 1.0))))
        .collect()
}

/// Recency weights of the window of size `window` ending at turn `t >= 1`.
pub fn recency_weights(t: u32, window: u32) -> Vec<(u32, f64)> {
    let t0 = (t + 1).saturating_sub(window).max(1).min(t);
    weights_from(t0, t)
}

/// Sums contributions in ascending order, so equal multisets of terms give
/// bit-equal totals regardless of arrival order.
fn stable_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

/// Fused score of every in-window candidate at turn `t`.
pub fn fused_scores(
    rm: &ResultMemory,
    config: &FusionConfig,
    t: u32,
) -> Result<BTreeMap<String, f64>> {
    config.validate()?;
    let t0 = match config.variant {
        FusionVariant::StaticRrf => t,
        _ => config.window_start(t),
    };
    let lists: Vec<&RankedList> = rm.records_in(t0..=t).collect();
    if lists.is_empty() {
        return Err(Error::EmptyWindow(t));
    }
    let n = (t - t0 + 1) as f64;
    let weight_of: BTreeMap<u32, f64> = match config.variant {
        FusionVariant::UniformRrf => (t0..=t).map(|tp| (tp, 1.0 / n)).collect(),
        _ => weights_from(t0, t).into_iter().collect(),
    };
    let k = config.k;

    let mut terms: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for list in &lists {
        for entry in &list.entries {
            terms.entry(entry.item_id.clone()).or_default();
        }
    }

    match config.variant {
        FusionVariant::Twrrf | FusionVariant::UniformRrf => {
            for list in &lists {
                let w = weight_of[&list.turn];
                for (id, rank, _) in rm.effective_entries(list) {
                    terms.get_mut(&id).unwrap().push(w / (k + rank as f64));
                }
            }
        }
        FusionVariant::StaticRrf => {
            for list in &lists {
                let c = config.channel_weight(list.channel);
                for (id, rank, _) in rm.effective_entries(list) {
                    terms.get_mut(&id).unwrap().push(c / (k + rank as f64));
                }
            }
        }
        FusionVariant::PenaltyRrf => {
            let r_pen = config.penalty_rank() as f64;
            for list in &lists {
                let w = weight_of[&list.turn] * config.channel_weight(list.channel);
                let present: BTreeMap<String, u32> = rm
                    .effective_entries(list)
                    .into_iter()
                    .map(|(id, r, _)| (id, r))
                    .collect();
                for (id, acc) in terms.iter_mut() {
                    match present.get(id) {
                        Some(&r) => acc.push(w / (k + r as f64)),
                        None => match config.penalty_mode {
                            PenaltyMode::Subtract => acc.push(-w / (k + r_pen)),
                            PenaltyMode::AsRank => acc.push(w / (k + r_pen)),
                        },
                    }
                }
            }
        }
        FusionVariant::Simmax | FusionVariant::Simsum => {
            for list in &lists {
                for e in &list.entries {
                    terms.get_mut(&e.item_id).unwrap().push(e.score);
                }
            }
        }
    }

    Ok(terms
        .into_iter()
        .map(|(id, ts)| {
            let score = if config.variant == FusionVariant::Simmax {
                ts.into_iter().fold(f64::NEG_INFINITY, f64::max)
            } else {
                stable_sum(ts)
            };
            (id, score)
        })
        .collect())
}

/// The fused list at turn `t`: candidates by score, ties by id, top `cutoff`.
pub fn fuse(rm: &ResultMemory, config: &FusionConfig, t: u32) -> Result<RankedList> {
    let scores = fused_scores(rm, config, t)?;
    Ok(RankedList::from_scores(
        Channel::Fused,
        t,
        scores.into_iter().collect(),
        config.cutoff,
    ))
}
