use std::path::PathBuf;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use hybrid_router::config::AppConfig;
use hybrid_router::harness::{
    generate_corpus, render_load_table, run_eval, run_load, Corpus, CorpusSpec, EvalEnv, EvalOptions,
};
use hybrid_router::metrics::{render_category_table, render_table};
use hybrid_router::responder::RoutingMode;
use hybrid_router::service::{self, Components, RouterService};

#[derive(Parser)]
#[command(name = "hybrid-router", version, about = "Hybrid canned/retrieval conversational router")]
struct Cli {
    /// TOML config file. Environment variables (HYBRID_ROUTER_*) override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic evaluation corpus.
    GenCorpus {
        #[arg(long)]
        total: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay a corpus through one routing mode.
    Eval {
        #[arg(long, default_value = "hybrid")]
        mode: RoutingMode,
        #[arg(long)]
        corpus: PathBuf,
        /// JSON report with metrics and per-query records.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        /// Rate answers automatically and let thresholds move.
        #[arg(long)]
        with_feedback: bool,
    },
    /// Accuracy, latency and cost efficiency across query volumes.
    Load {
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the HTTP service.
    Serve,
}

fn eval_env(cfg: &AppConfig) -> Result<EvalEnv, Box<dyn std::error::Error>> {
    Ok(EvalEnv::from_components(Components::from_config(cfg)?, cfg))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let cfg = AppConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenCorpus { total, seed, out } => {
            let spec = CorpusSpec {
                total_queries: total.unwrap_or(cfg.harness.corpus.total_queries),
                seed: seed.unwrap_or(cfg.harness.corpus.seed),
                ..cfg.harness.corpus.clone()
            };
            let env = eval_env(&cfg)?;
            let corpus = generate_corpus(&spec, &env.store.snapshot(), &env.index, env.provider.as_ref())?;
            corpus.save(&out)?;
            eprintln!("wrote {} queries ({} follow-ups) to {}", corpus.len(), corpus.followups(), out.display());
        }
        Command::Eval { mode, corpus, report, workers, with_feedback } => {
            let env = eval_env(&cfg)?;
            let corpus = Corpus::load(&corpus)?;
            let options = EvalOptions {
                workers: workers.unwrap_or(cfg.harness.workers),
                with_feedback,
                feedback: cfg.feedback.clone(),
                ..EvalOptions::default()
            };
            let outcome = run_eval(&corpus, mode, &env, &options)?;
            let label = format!("{mode:?}");
            println!("{}", render_table(&[(&label, &outcome.report)]));
            println!("{}", render_category_table(&[(&label, &outcome.report)]));
            if let Some(path) = report {
                std::fs::write(&path, serde_json::to_string_pretty(&outcome)?)?;
                eprintln!("report written to {}", path.display());
            }
        }
        Command::Load { levels, out, workers } => {
            let env = eval_env(&cfg)?;
            let levels = levels.unwrap_or_else(|| cfg.harness.levels.clone());
            let report = run_load(&levels, &cfg.harness.corpus, &env, workers.unwrap_or(cfg.harness.workers))?;
            let table = render_load_table(&report);
            print!("{table}");
            println!(
                "accuracy drop {:.1} points (bound {:.1}): {}",
                report.accuracy_drop_points,
                hybrid_router::harness::MAX_ACCURACY_DROP_POINTS,
                if report.within_drop_bound { "ok" } else { "exceeded" }
            );
            if let Some(path) = out {
                std::fs::write(&path, table)?;
            }
        }
        Command::Serve => {
            // External clients must be built before the async runtime starts.
            let addr = cfg.bind_addr();
            let svc = Arc::new(RouterService::from_config(cfg)?);
            tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?
                .block_on(service::serve(svc, &addr))?;
        }
    }
    Ok(())
}
