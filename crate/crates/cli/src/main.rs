mod knobs;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use icr_core::bench::{
    ablation_csv, load_queries, run_ablation_matrix, run_benchmark, write_outputs, Axis, Benchmark,
    BenchmarkSpec,
};
use icr_core::fusion::FusionVariant;
use icr_core::memory::ProgressMemoryLong;
use icr_core::runfile::{fuse_runs, read_run, write_fused};
use icr_core::session::EngineContext;
use icr_core::Gallery;
use icr_service::{AppState, HttpReasoner, ServiceConfig};

use crate::knobs::Knobs;

#[derive(Parser)]
#[command(name = "icr", version, about = "Interactive composed retrieval: benchmarks, runs and a session server")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic gallery and query set
    GenBench {
        /// Benchmark spec JSON; defaults apply to missing fields
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run simulated sessions and write metrics.csv plus per-query traces
    Run {
        #[command(flatten)]
        knobs: Knobs,
        /// JSON file with the same keys as the flags; flags win
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run every on/off combination of the chosen components
    Ablate {
        #[command(flatten)]
        knobs: Knobs,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated subset of covr,t2v,intent,reflect,cap
        #[arg(long, default_value = "covr,t2v,intent,reflect,cap")]
        axes: String,
    },
    /// Fuse per-channel run files offline
    Fuse {
        /// Whitespace-separated rows: qid channel turn item rank score
        #[arg(long)]
        run: PathBuf,
        /// Fuse at this turn instead of each query's last one
        #[arg(long)]
        turn: Option<u32>,
        #[arg(long, default_value = "twrrf")]
        fusion: String,
        #[arg(long, default_value_t = 5)]
        window: u32,
        #[arg(long, default_value_t = 60.0)]
        rrf_k: f64,
        #[arg(long, default_value_t = 100)]
        topk: usize,
        #[arg(long)]
        include_turn0: bool,
        /// Output file; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the session API
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Name the gallery is served under; defaults to the file stem of --gallery
        #[arg(long)]
        gallery_ref: Option<String>,
        /// Candidates returned per response
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        /// Base URL of an external reasoner
        #[arg(long)]
        reasoner_url: Option<String>,
        #[arg(long, default_value_t = 5000)]
        reasoner_timeout_ms: u64,
        /// Directory for the caption cache
        #[arg(long)]
        cache: Option<PathBuf>,
        #[command(flatten)]
        knobs: Knobs,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_inputs(knobs: &Knobs) -> Result<(Arc<Gallery>, Arc<ProgressMemoryLong>, Vec<icr_core::bench::BenchQuery>)> {
    let (g, q) = knobs.inputs()?;
    let gallery = Arc::new(Gallery::load(g)?);
    let queries = load_queries(q)?;
    let pm_l = Arc::new(ProgressMemoryLong::build(&gallery));
    Ok((gallery, pm_l, queries))
}

fn gen_bench(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec: BenchmarkSpec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => BenchmarkSpec::default(),
    };
    let bench = Benchmark::generate(&spec)?;
    bench.write(out)?;
    eprintln!(
        "wrote {} items and {} queries to {}",
        bench.gallery.len(),
        bench.queries.len(),
        out.display()
    );
    Ok(())
}

fn run(knobs: Knobs, config: Option<&Path>) -> Result<()> {
    let knobs = knobs.resolve(config)?;
    let run_config = knobs.run_config()?;
    let out = knobs.out_dir()?;
    let (gallery, pm_l, queries) = load_inputs(&knobs)?;
    let result = run_benchmark(gallery, pm_l, &queries, &run_config)?;
    write_outputs(&result, out)?;
    print!("{}", result.table.to_csv());
    Ok(())
}

fn ablate(knobs: Knobs, config: Option<&Path>, axes: &str) -> Result<()> {
    let knobs = knobs.resolve(config)?;
    let run_config = knobs.run_config()?;
    let out = knobs.out_dir()?;
    let axes = Axis::parse_list(axes)?;
    if axes.is_empty() {
        bail!("--axes names no component");
    }
    let (gallery, pm_l, queries) = load_inputs(&knobs)?;
    let rows = run_ablation_matrix(gallery, pm_l, &queries, &run_config, &axes)?;
    let csv = ablation_csv(&rows, run_config.engine.max_turns);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("ablation.csv");
    fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    print!("{csv}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn fuse(
    run: &Path,
    turn: Option<u32>,
    fusion: &str,
    window: u32,
    rrf_k: f64,
    topk: usize,
    include_turn0: bool,
    out: Option<&Path>,
) -> Result<()> {
    let config = icr_core::fusion::FusionConfig {
        variant: fusion.replace('-', "_").parse::<FusionVariant>()?,
        window,
        k: rrf_k,
        cutoff: topk,
        include_turn0,
        ..Default::default()
    };
    config.validate()?;
    let runs = read_run(run)?;
    let fused = fuse_runs(&runs, &config, turn)?;
    match out {
        Some(p) => {
            let file = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            write_fused(&fused, std::io::BufWriter::new(file))?;
        }
        None => write_fused(&fused, std::io::stdout().lock())?,
    }
    Ok(())
}

struct ServeArgs {
    addr: String,
    gallery_ref: Option<String>,
    top_k: usize,
    reasoner_url: Option<String>,
    reasoner_timeout: Duration,
    cache: Option<PathBuf>,
    knobs: Knobs,
}

fn serve(args: ServeArgs) -> Result<()> {
    let engine = args.knobs.run_config()?.engine;
    let path = args.knobs.gallery.as_deref().context("--gallery is required (flag or config file)")?;
    let name = match args.gallery_ref {
        Some(n) => n,
        None => path
            .file_stem()
            .and_then(|s| s.to_str())
            .with_context(|| format!("cannot name gallery {}; pass --gallery-ref", path.display()))?
            .to_string(),
    };
    let gallery = Arc::new(Gallery::load(path)?);
    let pm_l = Arc::new(match &args.cache {
        Some(dir) => ProgressMemoryLong::load_or_build(&gallery, dir)?,
        None => ProgressMemoryLong::build(&gallery),
    });
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let reasoner: Option<Arc<dyn icr_core::reasoner::Reasoner>> = match args.reasoner_url {
            Some(url) => Some(Arc::new(HttpReasoner::new(url, args.reasoner_timeout)?)),
            None => None,
        };
        let config = ServiceConfig {
            engine,
            top_k: args.top_k,
            ..ServiceConfig::default()
        };
        let mut ctx = EngineContext::synthetic(gallery, pm_l, &config.engine.channel);
        if let Some(r) = reasoner {
            ctx = ctx.with_reasoner(r);
        }
        let state = AppState::new(config).with_gallery(name, ctx);
        icr_service::serve(state, &args.addr).await?;
        Ok(())
    })
}

fn main() -> std::process::ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse().command) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            std::process::ExitCode::FAILURE
        }
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenBench { spec, out } => gen_bench(spec.as_deref(), &out),
        Command::Run { knobs, config } => run(knobs, config.as_deref()),
        Command::Ablate { knobs, config, axes } => ablate(knobs, config.as_deref(), &axes),
        Command::Fuse {
            run,
            turn,
            fusion,
            window,
            rrf_k,
            topk,
            include_turn0,
            out,
        } => fuse(&run, turn, &fusion, window, rrf_k, topk, include_turn0, out.as_deref()),
        Command::Serve {
            port,
            host,
            gallery_ref,
            top_k,
            reasoner_url,
            reasoner_timeout_ms,
            cache,
            knobs,
            config,
        } => serve(ServeArgs {
            addr: format!("{host}:{port}"),
            gallery_ref,
            top_k,
            reasoner_url,
            reasoner_timeout: Duration::from_millis(reasoner_timeout_ms),
            cache,
            knobs: knobs.resolve(config.as_deref())?,
        }),
    }
}
