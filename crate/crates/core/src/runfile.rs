//! TREC-style run files: whitespace-separated `qid channel turn item rank
//! score` rows. Reading groups rows into one result memory per query; fused
//! output uses the same layout with channel `FUSED`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionConfig};
use crate::memory::ResultMemory;
use crate::types::{Channel, RankedEntry, RankedList};

type Group = BTreeMap<(u32, Channel), Vec<RankedEntry>>;

pub fn parse_run(text: &str, path: &Path) -> Result<BTreeMap<String, ResultMemory>> {
    let mut groups: BTreeMap<String, Group> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(Error::parse(path, n + 1, format!("expected 6 columns, got {}", cols.len())));
        }
        let bad = |what: &str| Error::parse(path, n + 1, format!("bad {what} `{line}`"));
        let channel: Channel = cols[1].parse().map_err(|_| bad("channel"))?;
        if channel == Channel::Fused {
            return Err(Error::parse(path, n + 1, "input runs must be channel lists"));
        }
        let turn: u32 = cols[2].parse().map_err(|_| bad("turn"))?;
        let rank: u32 = cols[4].parse().map_err(|_| bad("rank"))?;
        let score: f64 = cols[5].parse().map_err(|_| bad("score"))?;
        groups
            .entry(cols[0].to_string())
            .or_default()
            .entry((turn, channel))
            .or_default()
            .push(RankedEntry {
                item_id: cols[3].to_string(),
                rank,
                score,
            });
    }
    let mut out = BTreeMap::new();
    for (qid, lists) in groups {
        let mut rm = ResultMemory::new();
        for ((turn, channel), mut entries) in lists {
            entries.sort_by_key(|e| e.rank);
            let list = RankedList {
                channel,
                turn,
                cutoff: entries.len(),
                entries,
            };
            list.validate().map_err(|e| {
                Error::parse(path, 0, format!("query {qid}, {channel} turn {turn}: {e}"))
            })?;
            rm.append(list)?;
        }
        out.insert(qid, rm);
    }
    Ok(out)
}

pub fn read_run(path: &Path) -> Result<BTreeMap<String, ResultMemory>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run(&text, path)
}

/// Fuses every query at `turn`, or at its last recorded turn when `None`.
pub fn fuse_runs(
    runs: &BTreeMap<String, ResultMemory>,
    config: &FusionConfig,
    turn: Option<u32>,
) -> Result<BTreeMap<String, RankedList>> {
    let mut out = BTreeMap::new();
    for (qid, rm) in runs {
        let last = rm.records_in(0..=u32::MAX).map(|l| l.turn).max();
        let t = match (turn, last) {
            (Some(t), _) => t,
            (None, Some(t)) => t,
            (None, None) => continue,
        };
        out.insert(qid.clone(), fuse(rm, config, t)?);
    }
    Ok(out)
}

pub fn write_fused<W: Write>(lists: &BTreeMap<String, RankedList>, mut w: W) -> std::io::Result<()> {
    for (qid, list) in lists {
        for e in &list.entries {
            writeln!(w, "{qid} {} {} {} {} {}", list.channel, list.turn, e.item_id, e.rank, e.score)?;
        }
    }
    Ok(())
}
