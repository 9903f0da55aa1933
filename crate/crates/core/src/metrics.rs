//! Per-turn Recall@K and Best log Rank Integral.
//!
//! Absent targets count as rank `cutoff + 1`. Once a session stops with the
//! target on top, later turns register rank 1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Recall cutoffs reported in the table.
pub const RECALL_KS: [u32; 4] = [1, 5, 10, 50];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub query_id: String,
    pub turn: u32,
    pub target_rank: Option<u32>,
    pub stopped: bool,
}

impl TurnRecord {
    pub fn rank_or(&self, cutoff: u32) -> u32 {
        if self.stopped {
            1
        } else {
            self.target_rank.unwrap_or(cutoff + 1)
        }
    }
}

pub fn recall_at_k(ranks: &[u32], k: u32) -> Result<f64> {
    if k == 0 {
        return Err(Error::Invalid("recall cutoff must be >= 1".into()));
    }
    if ranks.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// BRI@T over per-query rank sequences covering turns `0..=T`.
pub fn bri(ranks: &[Vec<u32>], turns: u32) -> Result<f64> {
    if turns == 0 {
        return Err(Error::Invalid("BRI needs at least one feedback turn".into()));
    }
    if ranks.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for seq in ranks {
        if seq.len() <= turns as usize {
            return Err(Error::Invalid(format!(
                "rank sequence covers {} turns, BRI@{turns} needs {}",
                seq.len(),
                turns + 1
            )));
        }
        if seq.contains(&0) {
            return Err(Error::Invalid("ranks are 1-based".into()));
        }
        let mut best = seq[0];
        let mut area = 0.0;
        for &r in &seq[1..=turns as usize] {
            let next = best.min(r);
            area += ((best as f64).ln() + (next as f64).ln()) / 2.0;
            best = next;
        }
        total += area / turns as f64;
    }
    Ok(total / ranks.len() as f64)
}

/// Groups records into per-query rank sequences for turns `0..=turns`, in
/// first-seen query order, applying stop carry-forward and absent ranks.
pub fn rank_matrix(records: &[TurnRecord], turns: u32, cutoff: u32) -> Result<Vec<Vec<u32>>> {
    let mut order: Vec<&str> = Vec::new();
    let mut rows: std::collections::HashMap<&str, Vec<Option<u32>>> = Default::default();
    for r in records {
        if r.turn > turns {
            continue;
        }
        let row = rows.entry(&r.query_id).or_insert_with(|| {
            order.push(&r.query_id);
            vec![None; turns as usize + 1]
        });
        row[r.turn as usize] = Some(r.rank_or(cutoff));
    }
    order
        .into_iter()
        .map(|q| {
            let row = &rows[q];
            let mut out = Vec::with_capacity(row.len());
            for (t, r) in row.iter().enumerate() {
                match (r, out.last()) {
                    (Some(r), _) => out.push(*r),
                    // no record after a stop: carry rank 1 forward
                    (None, Some(1)) => out.push(1),
                    _ => {
                        return Err(Error::Invalid(format!(
                            "query `{q}` has no record for turn {t}"
                        )))
                    }
                }
            }
            Ok(out)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub turn: u32,
    /// Recall at each of [`RECALL_KS`], as fractions.
    pub recall: [f64; 4],
    pub bri: Option<f64>,
}

impl MetricRow {
    pub fn r_at(&self, k: u32) -> Option<f64> {
        RECALL_KS.iter().position(|&x| x == k).map(|i| self.recall[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
}

impl MetricsTable {
    pub fn from_ranks(ranks: &[Vec<u32>], turns: u32) -> Result<Self> {
        let mut rows = Vec::new();
        for t in 0..=turns {
            let at_t: Vec<u32> = ranks.iter().map(|seq| seq[t as usize]).collect();
            let mut recall = [0.0; 4];
            for (slot, k) in recall.iter_mut().zip(RECALL_KS) {
                *slot = recall_at_k(&at_t, k)?;
            }
            let bri = if t == 0 { None } else { Some(bri(ranks, t)?) };
            rows.push(MetricRow { turn: t, recall, bri });
        }
        Ok(Self { rows })
    }

    pub fn row(&self, turn: u32) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.turn == turn)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("turn,R@1,R@5,R@10,R@50,BRI\n");
        for r in &self.rows {
            let _ = write!(out, "{}", r.turn);
            for v in r.recall {
                let _ = write!(out, ",{:.2}", v * 100.0);
            }
            match r.bri {
                Some(b) => {
                    let _ = writeln!(out, ",{b:.4}");
                }
                None => out.push_str(",\n"),
            }
        }
        out
    }
}
