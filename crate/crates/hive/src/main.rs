use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use hive::core::metrics::ThresholdStrategy;
use hive::core::selector::TrainReport;
use hive::core::trajectory::SynthConfig;
use hive::io::{read_json, write_json};
use hive::pipeline::{self, VerifierMode};
use hive::scoring::{render_metrics, EvaluationReport};
use hive::verifier::StructuredReport;

#[derive(Parser)]
#[command(name = "hive", version, about = "Hidden-evidence hallucination detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Mock,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    BestF1,
    Youden,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize planted-signal trajectory dumps.
    Synth {
        /// JSON synthesis config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        count: usize,
    },
    /// Project trajectory dumps into a memory-mapped feature store.
    BuildFeatures {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        r: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train the step-layer selector; writes the checkpoint and a report JSON.
    TrainSelector {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON training config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write top-K evidence shards for one split.
    ExportEvidence {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Also store the raw half-precision units of the selected pairs.
        #[arg(long)]
        include_act: bool,
    },
    /// Build verifier JSONL datasets from exported evidence and metadata.
    PackVerifier {
        #[arg(long)]
        evidence: PathBuf,
        /// The store's meta.jsonl.
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce verifier predictions (z0, z1, raw text) for a packed split.
    RunVerifier {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training split for the mock fit (default: train.jsonl beside --data).
        #[arg(long)]
        train: Option<PathBuf>,
        /// External verifier command; receives the request and response paths.
        #[arg(long)]
        command: Option<String>,
        /// Request file (default: <out>.request.jsonl).
        #[arg(long)]
        request: Option<PathBuf>,
        /// Response file (default: <out>.response.jsonl).
        #[arg(long)]
        response: Option<PathBuf>,
    },
    /// Field-level evaluation of structured verifier outputs.
    EvalStructured {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detection metrics with a threshold transferred from validation.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "best-f1")]
        strategy: Strategy,
        /// Threshold used when no validation predictions are given.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Text summary of an exported split plus a selection-pattern CSV.
    Report {
        #[arg(long)]
        evidence: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "selection_grid.csv")]
        grid: PathBuf,
        /// Training report written by train-selector.
        #[arg(long)]
        train_report: Option<PathBuf>,
        /// Report written by evaluate.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Report written by eval-structured --out.
        #[arg(long)]
        structured: Option<PathBuf>,
    },
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn print_structured(r: &StructuredReport) {
    println!("examples            {}", r.examples);
    println!("valid JSON rate     {:.4} ({} valid)", r.valid_json_rate, r.valid_json);
    println!("decision accuracy   {:.4}", r.decision_accuracy);
    println!("type accuracy       {:.4}", r.type_accuracy);
    println!("pairs exact match   {:.4}", r.pairs_exact_match);
    println!("rationale exact     {:.4}", r.rationale_exact_match);
    println!("full exact match    {:.4}", r.full_exact_match);
    println!("schema inconsistent {}", r.schema_inconsistent);
    println!("type accuracy on hallucinated targets {:.4} over {}", r.hallucinated_only.type_accuracy, r.hallucinated_only.examples);
}

fn run(cli: Cli) -> hive::Result<()> {
    match cli.command {
        Cmd::Synth { config, out, count } => {
            let cfg: SynthConfig = config.as_deref().map(read_json).transpose()?.unwrap_or_default();
            let n = pipeline::synth(&cfg, &out, count)?;
            println!("wrote {n} trajectory dumps to {}", out.display());
        }
        Cmd::BuildFeatures { traj, out, r, seed } => {
            let store = pipeline::build_features(&traj, &out, r, seed)?;
            let d = store.dims();
            println!("store {}: S={} N={} L={} max_M={} r={}", out.display(), d.rows, d.steps, d.layers, d.max_m, d.r);
        }
        Cmd::TrainSelector { store, out, config } => {
            let cfg = match config {
                Some(path) => pipeline::read_train_config(&path)?,
                None => Default::default(),
            };
            let (_, report) = pipeline::train(&store, &out, &cfg)?;
            println!(
                "best epoch {} of {}; test AUROC {} accuracy {:.4} F1 {:.4}",
                report.best_epoch,
                report.epochs_run,
                report.test.auroc.map_or("n/a".into(), |a| format!("{a:.4}")),
                report.test.accuracy,
                report.test.f1
            );
            println!("checkpoint {}; report {}", out.display(), pipeline::report_path(&out).display());
        }
        Cmd::ExportEvidence { store, ckpt, split, out, include_act } => {
            let shards = pipeline::export(&store, &ckpt, &split, &out, include_act)?;
            println!("wrote {} shard(s) for split {split} under {}", shards.len(), out.join(&split).display());
        }
        Cmd::PackVerifier { evidence, meta, out } => {
            for (split, n) in pipeline::pack(&evidence, &meta, &out)? {
                println!("{split}: {n} records -> {}", out.join(format!("{split}.jsonl")).display());
            }
        }
        Cmd::RunVerifier { mode, data, out, train, command, request, response } => {
            let mode = match mode {
                Mode::Mock => VerifierMode::Mock { train: train.unwrap_or_else(|| data.with_file_name("train.jsonl")) },
                Mode::External => VerifierMode::External {
                    command,
                    request: request.unwrap_or_else(|| sibling(&out, ".request.jsonl")),
                    response: response.unwrap_or_else(|| sibling(&out, ".response.jsonl")),
                },
            };
            match pipeline::run_verifier(&mode, &data, &out)? {
                Some(preds) => println!("wrote {} predictions to {}", preds.len(), out.display()),
                None => {
                    if let VerifierMode::External { request, response, .. } = &mode {
                        println!(
                            "request written to {}; run the external verifier to produce {} and re-run",
                            request.display(),
                            response.display()
                        );
                    }
                }
            }
        }
        Cmd::EvalStructured { preds, targets, out } => {
            let report = pipeline::evaluate_structured_files(&preds, &targets)?;
            print_structured(&report);
            if let Some(out) = out {
                write_json(&out, &report)?;
            }
        }
        Cmd::Evaluate { scores, val, strategy, threshold, out } => {
            let strategy = match strategy {
                Strategy::BestF1 => ThresholdStrategy::BestF1,
                Strategy::Youden => ThresholdStrategy::Youden,
            };
            let report = pipeline::evaluate_files(&scores, val.as_deref(), strategy, threshold)?;
            if let Some(v) = &report.val {
                print!("{}", render_metrics("val", v));
            }
            print!("{}", render_metrics("test", &report.test));
            write_json(&out, &report)?;
        }
        Cmd::Report { evidence, split, grid, train_report, metrics, structured } => {
            let (cells, n, l) = pipeline::selection_grid(&evidence.join(&split), &grid)?;
            println!("selection pattern ({split}, fraction of examples selecting each pair):");
            print!("{}", pipeline::render_grid(&cells, n, l));
            let top: Vec<String> =
                pipeline::top_pairs(&cells, l, 5).into_iter().map(|((t, ly), f)| format!("({t}, {ly}) {f:.3}")).collect();
            println!("most selected: {}", top.join(", "));
            println!("grid CSV: {}", grid.display());
            if let Some(path) = train_report {
                let r: TrainReport = read_json(&path)?;
                println!(
                    "selector: {} examples, best epoch {}, test AUROC {}",
                    r.dataset.examples,
                    r.best_epoch,
                    r.test.auroc.map_or("n/a".into(), |a| format!("{a:.4}"))
                );
            }
            if let Some(path) = metrics {
                let r: EvaluationReport = read_json(&path)?;
                print!("{}", render_metrics("verifier test", &r.test));
            }
            if let Some(path) = structured {
                let r: StructuredReport = read_json(&path)?;
                print_structured(&r);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let start = Instant::now();
    match run(cli) {
        Ok(()) => {
            log::info!("done in {:.1}s", start.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
