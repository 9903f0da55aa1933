//! Synthetic benchmark generation and the simulator-driven evaluation harness.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::{Gallery, Item, Schema};
use crate::memory::ProgressMemoryLong;
use crate::metrics::MetricsTable;
use crate::session::{AblationFlags, EngineConfig, EngineContext, Session, SessionTrace};
use crate::simulator::{mix, SimStep, SimulatorConfig, UserSimulator};
use crate::types::{Attributes, Constraint, EditInstruction, FeedbackAction};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionSpec {
    pub name: String,
    pub cardinality: usize,
}

impl DimensionSpec {
    pub fn new(name: &str, cardinality: usize) -> Self {
        Self {
            name: name.to_string(),
            cardinality,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub gallery_size: usize,
    pub dimensions: Vec<DimensionSpec>,
    pub query_count: usize,
    /// Reference and target differ on `d` dimensions, `d` uniform in this range.
    pub min_differing: usize,
    pub max_differing: usize,
    pub seed: u64,
    pub allow_duplicates: bool,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            gallery_size: 1000,
            dimensions: vec![
                DimensionSpec::new("category", 10),
                DimensionSpec::new("color", 8),
                DimensionSpec::new("scene", 8),
                DimensionSpec::new("action", 8),
                DimensionSpec::new("lighting", 4),
                DimensionSpec::new("count", 4),
            ],
            query_count: 200,
            min_differing: 1,
            max_differing: 3,
            seed: 42,
            allow_duplicates: false,
        }
    }
}

const VOCABULARY: &[(&str, &[&str])] = &[
    ("category", &["dog", "cat", "car", "goat", "bird", "horse", "boat", "bicycle", "person", "train"]),
    ("color", &["red", "blue", "green", "black", "white", "yellow", "brown", "gray"]),
    ("scene", &["beach", "snow", "city", "forest", "desert", "kitchen", "stadium", "river"]),
    ("action", &["running", "jumping", "sitting", "swimming", "flying", "eating", "turning", "standing"]),
    ("lighting", &["day", "night", "dusk", "backlit"]),
    ("count", &["one", "two", "three", "many"]),
];

fn value_name(dim: &str, i: usize) -> String {
    VOCABULARY
        .iter()
        .find(|(d, _)| *d == dim)
        .and_then(|(_, words)| words.get(i))
        .map(|w| w.to_string())
        .unwrap_or_else(|| format!("{dim}{i}"))
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        Schema::new(self.dimensions.iter().map(|d| d.name.clone()))?;
        if let Some(d) = self.dimensions.iter().find(|d| d.cardinality < 2) {
            return Err(Error::Invalid(format!("dimension `{}` needs at least 2 values", d.name)));
        }
        if self.query_count == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.min_differing == 0
            || self.min_differing > self.max_differing
            || self.max_differing > self.dimensions.len()
        {
            return Err(Error::Invalid(format!(
                "differing range {}..={} does not fit {} dimensions",
                self.min_differing,
                self.max_differing,
                self.dimensions.len()
            )));
        }
        if 2 * self.query_count > self.gallery_size {
            return Err(Error::Invalid(format!(
                "{} queries need {} distinct items, gallery holds {}",
                self.query_count,
                2 * self.query_count,
                self.gallery_size
            )));
        }
        let space = self
            .dimensions
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(d.cardinality))
            .unwrap_or(usize::MAX);
        if !self.allow_duplicates && space < self.gallery_size {
            return Err(Error::Invalid(format!(
                "only {space} distinct descriptors for a gallery of {}",
                self.gallery_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchQuery {
    pub query_id: String,
    pub reference_id: String,
    pub target_id: String,
    pub initial_edit: EditInstruction,
    /// Dimensions on which reference and target disagree.
    pub differing: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub gallery: Gallery,
    pub queries: Vec<BenchQuery>,
}

impl Benchmark {
    pub fn generate(spec: &BenchmarkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let cards: Vec<usize> = spec.dimensions.iter().map(|d| d.cardinality).collect();
        let random_descriptor =
            |rng: &mut ChaCha8Rng| -> Vec<usize> { cards.iter().map(|&c| rng.gen_range(0..c)).collect() };

        let mut used: HashSet<Vec<usize>> = HashSet::new();
        let mut descriptors: Vec<Vec<usize>> = Vec::with_capacity(spec.gallery_size);
        // (target index, reference index, differing dims, edited dim)
        let mut pairs = Vec::with_capacity(spec.query_count);
        let mut attempts = 0usize;
        while pairs.len() < spec.query_count {
            attempts += 1;
            if attempts > 1000 * spec.query_count {
                return Err(Error::Invalid("could not draw enough distinct query pairs".into()));
            }
            let target = random_descriptor(&mut rng);
            let d = rng.gen_range(spec.min_differing..=spec.max_differing);
            let mut dims = index::sample(&mut rng, cards.len(), d).into_vec();
            dims.sort_unstable();
            let mut reference = target.clone();
            for &i in &dims {
                reference[i] = (target[i] + rng.gen_range(1..cards[i])) % cards[i];
            }
            let edited = dims[rng.gen_range(0..dims.len())];
            if !spec.allow_duplicates && (used.contains(&target) || used.contains(&reference)) {
                continue;
            }
            used.insert(target.clone());
            used.insert(reference.clone());
            descriptors.push(target);
            descriptors.push(reference);
            pairs.push((descriptors.len() - 2, descriptors.len() - 1, dims, edited));
        }
        while descriptors.len() < spec.gallery_size {
            let desc = random_descriptor(&mut rng);
            if !spec.allow_duplicates && !used.insert(desc.clone()) {
                continue;
            }
            descriptors.push(desc);
        }

        let mut order: Vec<usize> = (0..descriptors.len()).collect();
        order.shuffle(&mut rng);
        let width = spec.gallery_size.saturating_sub(1).to_string().len().max(4);
        let mut id_of = vec![String::new(); descriptors.len()];
        for (slot, &orig) in order.iter().enumerate() {
            id_of[orig] = format!("v{slot:0width$}");
        }
        let attrs = |desc: &[usize]| -> Attributes {
            spec.dimensions
                .iter()
                .zip(desc)
                .map(|(d, &v)| (d.name.clone(), value_name(&d.name, v)))
                .collect()
        };
        let items = order
            .iter()
            .map(|&orig| Item {
                id: id_of[orig].clone(),
                attributes: attrs(&descriptors[orig]),
                thumbnail: None,
                feature: Vec::new(),
            })
            .collect();
        let schema = Schema::new(spec.dimensions.iter().map(|d| d.name.clone()))?;
        let gallery = Gallery::new(schema, spec.seed, items)?;

        let qwidth = spec.query_count.saturating_sub(1).to_string().len().max(3);
        let queries = pairs
            .into_iter()
            .enumerate()
            .map(|(q, (t, r, dims, edited))| {
                let dim = &spec.dimensions[edited].name;
                BenchQuery {
                    query_id: format!("q{q:0qwidth$}"),
                    reference_id: id_of[r].clone(),
                    target_id: id_of[t].clone(),
                    initial_edit: EditInstruction::from_deltas([Constraint::new(
                        dim,
                        value_name(dim, descriptors[t][edited]),
                    )]),
                    differing: dims.iter().map(|&i| spec.dimensions[i].name.clone()).collect(),
                }
            })
            .collect();
        Ok(Self { gallery, queries })
    }

    /// Writes `gallery.jsonl` and `queries.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.gallery.write(&dir.join("gallery.jsonl"))?;
        write_queries(&self.queries, &dir.join("queries.jsonl"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let gallery = Gallery::load(&dir.join("gallery.jsonl"))?;
        let queries = load_queries(&dir.join("queries.jsonl"))?;
        Ok(Self { gallery, queries })
    }
}

pub fn write_queries(queries: &[BenchQuery], path: &Path) -> Result<()> {
    let mut out = String::new();
    for q in queries {
        out.push_str(&serde_json::to_string(q)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_queries(path: &Path) -> Result<Vec<BenchQuery>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(path, n + 1, e))?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub engine: EngineConfig,
    pub simulator: SimulatorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub reference_id: String,
    pub target_id: String,
    /// Target rank per turn `0..=T`, after carry-forward.
    pub ranks: Vec<u32>,
    pub stopped_at: Option<u32>,
    pub simulator: Vec<SimStep>,
    pub session: SessionTrace,
}

#[derive(Clone, Debug)]
pub struct BenchmarkRun {
    pub table: MetricsTable,
    pub outcomes: Vec<QueryOutcome>,
}

fn run_query(
    ctx: &EngineContext,
    query: &BenchQuery,
    index: usize,
    config: &RunConfig,
) -> Result<QueryOutcome> {
    let gallery = &ctx.gallery;
    let turns = config.engine.max_turns;
    let absent = config.engine.fusion.cutoff as u32 + 1;
    let user = UserSimulator::new(
        gallery,
        &query.target_id,
        config.simulator.clone(),
        mix(config.simulator.rng_seed, index as u64),
    )?;
    let mut session = Session::start(
        ctx.clone(),
        config.engine.clone(),
        &query.reference_id,
        query.initial_edit.clone(),
    )?;
    let rank_now = |s: &Session| s.current().position(&query.target_id).unwrap_or(absent);

    let mut ranks = vec![rank_now(&session)];
    let mut steps = Vec::new();
    let mut stopped_at = None;
    for t in 1..=turns {
        let Some(presented) = session.presented().map(str::to_string) else {
            break;
        };
        let step = user.respond(gallery, &presented, session.pending_question(), t)?;
        if step.feedback.action == FeedbackAction::Accept {
            session.accept()?;
            stopped_at = Some(t - 1);
            steps.push(step);
            break;
        }
        session.step(&step.feedback)?;
        steps.push(step);
        ranks.push(rank_now(&session));
    }
    while ranks.len() <= turns as usize {
        let carry = if stopped_at.is_some() { 1 } else { *ranks.last().unwrap() };
        ranks.push(carry);
    }
    Ok(QueryOutcome {
        query_id: query.query_id.clone(),
        reference_id: query.reference_id.clone(),
        target_id: query.target_id.clone(),
        ranks,
        stopped_at,
        simulator: steps,
        session: session.trace(),
    })
}

/// Runs every query through a simulated session. Sessions are independent
/// and seeded per query, so the worker count never changes the result.
pub fn run_benchmark(
    gallery: Arc<Gallery>,
    pm_l: Arc<ProgressMemoryLong>,
    queries: &[BenchQuery],
    config: &RunConfig,
) -> Result<BenchmarkRun> {
    if queries.is_empty() {
        return Err(Error::EmptyBatch);
    }
    config.engine.validate()?;
    config.simulator.validate()?;
    let ctx = EngineContext::synthetic(gallery, pm_l, &config.engine.channel);
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(queries.len());
    let chunk = queries.len().div_ceil(workers);
    let results: Vec<Result<Vec<QueryOutcome>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = queries
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let ctx = ctx.clone();
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, q)| run_query(&ctx, q, c * chunk + i, config))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("benchmark worker panicked"))
            .collect()
    });
    let mut outcomes = Vec::with_capacity(queries.len());
    for r in results {
        outcomes.extend(r?);
    }
    let ranks: Vec<Vec<u32>> = outcomes.iter().map(|o| o.ranks.clone()).collect();
    let table = MetricsTable::from_ranks(&ranks, config.engine.max_turns)?;
    Ok(BenchmarkRun { table, outcomes })
}

/// Writes `metrics.csv` and one `traces/{query_id}.json` per query.
pub fn write_outputs(run: &BenchmarkRun, out: &Path) -> Result<()> {
    let traces = out.join("traces");
    fs::create_dir_all(&traces).map_err(|e| Error::io(&traces, e))?;
    let csv = out.join("metrics.csv");
    fs::write(&csv, run.table.to_csv()).map_err(|e| Error::io(&csv, e))?;
    for o in &run.outcomes {
        let path = traces.join(format!("{}.json", o.query_id));
        let mut body = serde_json::to_string_pretty(o)?;
        body.push('\n');
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// One removable component of the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Covr,
    T2v,
    Intent,
    Reflect,
    Cap,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::Covr, Axis::T2v, Axis::Intent, Axis::Reflect, Axis::Cap];

    fn disable(self, flags: &mut AblationFlags) {
        match self {
            Axis::Covr => flags.disable_covr = true,
            Axis::T2v => flags.disable_t2v = true,
            Axis::Intent => flags.disable_intent_routing = true,
            Axis::Reflect => flags.disable_reflection = true,
            Axis::Cap => flags.disable_rank_cap = true,
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Axis>> {
        let mut out = Vec::new();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let axis: Axis = serde_json::from_value(serde_json::Value::String(tok.to_lowercase()))
                .map_err(|_| Error::Invalid(format!("unknown ablation axis `{tok}`")))?;
            if !out.contains(&axis) {
                out.push(axis);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub flags: AblationFlags,
    pub table: MetricsTable,
}

/// One benchmark run per on/off combination of `axes`, all replaying the same
/// simulator seeds. Combinations that disable both channels are skipped.
pub fn run_ablation_matrix(
    gallery: Arc<Gallery>,
    pm_l: Arc<ProgressMemoryLong>,
    queries: &[BenchQuery],
    base: &RunConfig,
    axes: &[Axis],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for mask in 0u32..(1 << axes.len()) {
        let mut flags = base.engine.ablation;
        for (i, axis) in axes.iter().enumerate() {
            if mask & (1 << i) != 0 {
                axis.disable(&mut flags);
            }
        }
        if flags.validate().is_err() {
            continue;
        }
        let mut config = base.clone();
        config.engine.ablation = flags;
        let run = run_benchmark(gallery.clone(), pm_l.clone(), queries, &config)?;
        rows.push(AblationRow {
            flags,
            table: run.table,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow], turn: u32) -> String {
    let mut out = String::from("covr,t2v,intent,reflect,cap,R@1,R@5,R@10,R@50,BRI\n");
    for row in rows {
        let f = row.flags;
        let on = |disabled: bool| if disabled { "0" } else { "1" };
        out.push_str(&[
            on(f.disable_covr),
            on(f.disable_t2v),
            on(f.disable_intent_routing),
            on(f.disable_reflection),
            on(f.disable_rank_cap),
        ]
        .join(","));
        if let Some(r) = row.table.row(turn) {
            for v in r.recall {
                out.push_str(&format!(",{:.2}", v * 100.0));
            }
            match r.bri {
                Some(b) => out.push_str(&format!(",{b:.4}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}
