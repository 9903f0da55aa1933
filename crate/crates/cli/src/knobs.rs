//! Run settings shared by the command line and the JSON config file. Every
//! field is optional so that flags can override a file field by field.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use icr_core::bench::RunConfig;
use icr_core::fusion::FusionVariant;
use icr_core::simulator::{Noise, Policy};
use serde::Deserialize;

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Knobs {
    /// Gallery JSONL
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    /// Query JSONL
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Feedback turns per session
    #[arg(long)]
    pub turns: Option<u32>,
    /// twrrf, static-rrf, uniform-rrf, penalty-rrf, simmax or simsum
    #[arg(long)]
    pub fusion: Option<String>,
    #[arg(long)]
    pub window: Option<u32>,
    #[arg(long)]
    pub rrf_k: Option<f64>,
    /// Per-channel and fused list length
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub cap_neg: Option<u32>,
    #[arg(long)]
    pub cap_neu: Option<u32>,
    /// mixed, modify-only or rewrite-only
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub drop_p: Option<f64>,
    /// none, light or heavy
    #[arg(long)]
    pub noise: Option<String>,
    #[arg(long)]
    pub answer_p: Option<f64>,
    /// Simulator seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Knobs {
    /// Fills every unset field from `file`.
    pub fn or(self, file: Knobs) -> Knobs {
        Knobs {
            gallery: self.gallery.or(file.gallery),
            queries: self.queries.or(file.queries),
            turns: self.turns.or(file.turns),
            fusion: self.fusion.or(file.fusion),
            window: self.window.or(file.window),
            rrf_k: self.rrf_k.or(file.rrf_k),
            topk: self.topk.or(file.topk),
            cap_neg: self.cap_neg.or(file.cap_neg),
            cap_neu: self.cap_neu.or(file.cap_neu),
            policy: self.policy.or(file.policy),
            drop_p: self.drop_p.or(file.drop_p),
            noise: self.noise.or(file.noise),
            answer_p: self.answer_p.or(file.answer_p),
            seed: self.seed.or(file.seed),
            out: self.out.or(file.out),
        }
    }

    /// Merges with the config file at `path`, if any.
    pub fn resolve(self, path: Option<&Path>) -> Result<Knobs> {
        let Some(path) = path else { return Ok(self) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: Knobs =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(self.or(file))
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        let e = &mut c.engine;
        if let Some(v) = self.turns {
            e.max_turns = v;
        }
        if let Some(v) = &self.fusion {
            e.fusion.variant = v.replace('-', "_").parse::<FusionVariant>()?;
        }
        if let Some(v) = self.window {
            e.fusion.window = v;
        }
        if let Some(v) = self.rrf_k {
            e.fusion.k = v;
        }
        if let Some(v) = self.topk {
            e.fusion.cutoff = v;
            e.channel.cutoff = v;
        }
        if let Some(v) = self.cap_neg {
            e.caps.negative = v;
        }
        if let Some(v) = self.cap_neu {
            e.caps.neutral = v;
        }
        e.validate()?;
        let s = &mut c.simulator;
        if let Some(v) = &self.policy {
            s.policy = v.parse::<Policy>()?;
        }
        if let Some(v) = &self.noise {
            s.noise = v.parse::<Noise>()?;
        }
        if let Some(v) = self.drop_p {
            s.drop_probability = v;
        }
        if let Some(v) = self.answer_p {
            s.answer_probability = v;
        }
        if let Some(v) = self.seed {
            s.rng_seed = v;
        }
        s.validate()?;
        Ok(c)
    }

    pub fn inputs(&self) -> Result<(&Path, &Path)> {
        match (&self.gallery, &self.queries) {
            (Some(g), Some(q)) => Ok((g, q)),
            _ => bail!("--gallery and --queries are required (flag or config file)"),
        }
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().context("--out is required (flag or config file)")
    }
}
