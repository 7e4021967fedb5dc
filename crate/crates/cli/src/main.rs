use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sizebound::error::ClientError;
use sizebound::pipeline::bound::{read_fit, run_fit};
use sizebound::pipeline::cost::dry_run_prompt_tokens;
use sizebound::pipeline::evaluate::run_assumption_check;
use sizebound::pipeline::measure::write_cells_csv;
use sizebound::pipeline::{estimate_cost, measure, run_bound, run_evaluate, run_measure, LowerBoundReport, RunConfig, Workspace};
use sizebound::synthetic::{write_demo, ZooSpec};
use sizebound::Error;

/// Infer lower bounds on language model parameter counts from next-word
/// accuracy on memorized texts.
#[derive(Debug, Parser)]
#[command(name = "sizebound", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Run configuration (TOML, or JSON by extension).
    #[arg(long, short, global = true, default_value = "sizebound.toml")]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the query cache path.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Override the output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Never contact live endpoints; cache misses for live models stay missing.
    #[arg(long, global = true)]
    offline: bool,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the configuration and corpus without querying anything.
    ValidateConfig,
    /// Count queries and prompt tokens per model.
    EstimateCost {
        /// Also render every prompt and count its tokens.
        #[arg(long)]
        dry_run: bool,
    },
    /// Query models and write profiles and cells.csv.
    Measure {
        /// Comma-separated model ids (default: all).
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<String>>,
    },
    /// Print one model's accuracy cells as CSV.
    Profile {
        #[arg(long)]
        model: String,
    },
    /// Calibrate the scaling law on the dense references and write fit.json.
    Fit,
    /// Lower bounds for target models; writes report.csv and report.json.
    Bound {
        /// Comma-separated target ids (default: every non-reference model).
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<String>>,
        /// Use a saved fit instead of refitting.
        #[arg(long)]
        fit: Option<PathBuf>,
    },
    /// Leave-one-out recovery and pairwise-test sweep over the references.
    Evaluate,
    /// Rank agreement on source texts vs baseline texts.
    AssumptionCheck,
    /// Print the last bound report.
    Report {
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Write an offline demo (synthetic corpus, simulated zoo, run.toml).
    InitDemo {
        dir: PathBuf,
        /// Positions sampled per (text, length).
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Corpus(_) | Error::Format { .. } | Error::Client(ClientError::Config(_)) => 2,
        Error::Partial { .. } => 3,
        _ => 4,
    }
}

fn load_config(g: &Global) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::read(&g.config)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(c) = &g.cache {
        cfg.cache = Some(c.clone());
    }
    if let Some(o) = &g.output {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn workspace(g: &Global) -> Result<Workspace, Error> {
    Workspace::load(load_config(g)?)
}

fn print_report(r: &LowerBoundReport) {
    print_table(&r.to_csv_string());
    for n in &r.notices {
        println!("note: {n}");
    }
}

fn print_table(csv_text: &str) {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(csv_text.as_bytes());
    let rows: Vec<Vec<String>> = rd
        .records()
        .filter_map(|r| r.ok())
        .map(|r| r.iter().map(str::to_owned).collect())
        .collect();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    for r in &rows {
        let line: Vec<String> = r.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        println!("{}", line.join("  ").trim_end());
    }
}

fn read_to_string(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    let g = &cli.global;
    match cli.command {
        Command::InitDemo { dir, samples } => {
            let spec = ZooSpec {
                seed: g.seed.unwrap_or(1),
                ..ZooSpec::default()
            };
            let path = write_demo(&dir, &spec, samples)?;
            println!("wrote {}", path.display());
            println!("try: sizebound --config {} bound", path.display());
        }
        Command::ValidateConfig => {
            let ws = workspace(g)?;
            println!(
                "ok: {} source texts, {} baseline texts, {} models ({} dense references), {} templates",
                ws.corpus.source_ids().len(),
                ws.corpus.baseline_ids().len(),
                ws.config.models.len(),
                ws.config.dense_references().count(),
                ws.templates.len()
            );
        }
        Command::EstimateCost { dry_run } => {
            let ws = workspace(g)?;
            let est = estimate_cost(&ws);
            let mut out = serde_json::to_value(&est).expect("plain data");
            if dry_run {
                let (queries, tokens) = dry_run_prompt_tokens(&ws)?;
                out["dry_run"] = serde_json::json!({"queries": queries, "prompt_tokens": tokens.round()});
            }
            println!("{}", serde_json::to_string_pretty(&out).expect("plain data"));
        }
        Command::Measure { models } => {
            let ws = workspace(g)?;
            let engine = ws.engine(g.offline)?;
            let m = run_measure(&ws, &engine, models.as_deref());
            let s = engine.stats();
            println!(
                "queries: {} simulated, {} network requests, {} cache hits, {} failed",
                s.simulated_queries, s.network_requests, s.cache_hits, s.failed
            );
            let m = m?;
            println!(
                "profiles for {} models in {}",
                m.models.iter().filter(|x| x.profile.is_some()).count(),
                ws.config.output_dir.join("profiles").display()
            );
        }
        Command::Profile { model } => {
            let ws = workspace(g)?;
            let engine = ws.engine(g.offline)?;
            let m = measure(&ws, &engine, Some(std::slice::from_ref(&model)))?;
            write_cells_csv(&ws, &m, std::io::stdout().lock()).map_err(|e| Error::Format {
                path: "<stdout>".into(),
                message: e.to_string(),
            })?;
            if !m.is_complete() {
                return Err(Error::Partial { missing: m.missing });
            }
        }
        Command::Fit => {
            let ws = workspace(g)?;
            let engine = ws.engine(g.offline)?;
            let m = run_measure(&ws, &engine, Some(&reference_ids(&ws)))?;
            let fit = run_fit(&ws, &m)?;
            println!(
                "theta(z) = {:.4} * exp({:.4} z), R^2 = {:.4} over {} references",
                fit.A,
                fit.B,
                fit.r_squared,
                fit.reference_ids.len()
            );
        }
        Command::Bound { targets, fit } => {
            let ws = workspace(g)?;
            let fit = fit.map(|p| read_fit(&p)).transpose()?;
            let engine = ws.engine(g.offline)?;
            let mut wanted = reference_ids(&ws);
            match &targets {
                Some(t) => wanted.extend(t.iter().cloned()),
                None => wanted.extend(sizebound::pipeline::bound::default_targets(&ws)),
            }
            let m = run_measure(&ws, &engine, Some(&wanted))?;
            let report = run_bound(&ws, &m, targets.as_deref(), fit.as_ref())?;
            print_report(&report);
        }
        Command::Evaluate => {
            let ws = workspace(g)?;
            let engine = ws.engine(g.offline)?;
            let m = run_measure(&ws, &engine, Some(&reference_ids(&ws)))?;
            let e = run_evaluate(&ws, &m)?;
            println!(
                "fit R^2 {:.4}; LOO-CV R^2 {:.4}, max ratio error {:.3}, {}/{} within a factor of two",
                e.fit.r_squared,
                e.loo.cv_r_squared,
                e.loo.max_ratio_error,
                e.loo.predictions.iter().filter(|p| p.ratio_error() <= 2.0).count(),
                e.loo.predictions.len()
            );
            for t in &e.tau {
                let f = |v: Option<f64>| v.map_or("n/a".to_owned(), |x| format!("{x:.3}"));
                println!(
                    "tau {:.2}: precision {} recall {} accuracy {:.3}",
                    t.tau,
                    f(t.precision),
                    f(t.recall),
                    t.accuracy
                );
            }
            println!("wrote {}", ws.config.output_dir.display());
        }
        Command::AssumptionCheck => {
            let ws = workspace(g)?;
            let engine = ws.engine(g.offline)?;
            let m = run_measure(&ws, &engine, None)?;
            let rep = run_assumption_check(&ws, &m)?;
            println!("{}", serde_json::to_string_pretty(&rep.to_json()).expect("plain data"));
        }
        Command::Report { format } => {
            let cfg = load_config(g)?;
            let dir = &cfg.output_dir;
            match format {
                Format::Csv => print!("{}", read_to_string(&dir.join("report.csv"))?),
                Format::Json => print!("{}", read_to_string(&dir.join("report.json"))?),
                Format::Table => {
                    let path = dir.join("report.json");
                    let r: LowerBoundReport =
                        serde_json::from_str(&read_to_string(&path)?).map_err(|e| Error::Format {
                            path,
                            message: e.to_string(),
                        })?;
                    print_report(&r);
                }
            }
        }
    }
    Ok(())
}

fn reference_ids(ws: &Workspace) -> Vec<String> {
    ws.config.dense_references().map(|m| m.model_id.clone()).collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Partial { missing } = &e {
                for c in missing.iter().take(10) {
                    eprintln!("  missing {} {} l={}: {}", c.model_id, c.text_id, c.length, c.reason);
                }
                if missing.len() > 10 {
                    eprintln!("  ... and {} more", missing.len() - 10);
                }
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
