//! `causalrec` command-line front end.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage error, 3 I/O error,
//! 4 parse or format error, 5 schema-version mismatch, 6 diverged training
//! or failed sweep.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use causalrec::analysis::{
    read_attention_dump, record_attention, sample_cases, write_analysis, write_attention_dump,
};
use causalrec::data::{load_interactions, prepare, LineFormat, PrepareOptions};
use causalrec::eval::{MetricReport, RankingProtocol, Split, CUTOFFS};
use causalrec::experiment::{
    compare_runs, execute_evaluate, execute_train, execute_tune, ExperimentConfig, JsonLines,
    RunSummary, SweepManifest, CHECKPOINT_FILE, CONFIG_FILE,
};
use causalrec::model::{Causality, Model};
use causalrec::trainer::TrainData;
use causalrec::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_CODES: &str = "Exit codes: 0 success, 1 other failure, 2 usage error, 3 I/O error, \
4 parse or format error, 5 schema-version mismatch, 6 diverged training or failed sweep.";

#[derive(Parser)]
#[command(name = "causalrec", version, about = "Sequential recommendation experiments with AE and AR self-attention", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter a raw interaction log and write a dataset bundle.
    Prepare(PrepareArgs),
    /// Train one configuration, then evaluate the test split once.
    Train(TrainArgs),
    /// Run a hyperparameter sweep with successive halving.
    Tune(TuneArgs),
    /// Re-evaluate a finished run's checkpoint.
    Evaluate(EvaluateArgs),
    /// Spectral analysis of attention matrices.
    Analyze(AnalyzeArgs),
    /// Paired metric table of two runs with relative improvement.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum InputFormat {
    /// user, item, timestamp separated by tabs
    Tsv,
    /// user, item, timestamp separated by commas
    Csv,
    /// user, item, timestamp separated by whitespace
    Ws,
    /// `user::item::rating::timestamp`
    Movielens,
}

#[derive(Args)]
struct PrepareArgs {
    /// Raw interaction file.
    #[arg(long)]
    input: PathBuf,
    /// Bundle file to write.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "tsv")]
    format: InputFormat,
    /// Skip the first line of the input.
    #[arg(long)]
    header: bool,
    /// Minimum interactions per user and per item.
    #[arg(long, default_value_t = 5)]
    min_count: usize,
    /// Model window length stored in the bundle.
    #[arg(long, default_value_t = 50)]
    max_len: usize,
    /// Also write the preparation report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Run directory; overrides the config's `output_dir`.
    #[arg(long, env = "CAUSALREC_OUTPUT_DIR")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    /// Sweep manifest (TOML).
    manifest: PathBuf,
    /// Sweep directory; overrides the manifest's `output_dir`.
    #[arg(long, env = "CAUSALREC_OUTPUT_DIR")]
    output: Option<PathBuf>,
    /// Worker threads; overrides the manifest's `parallelism`.
    #[arg(long, env = "CAUSALREC_THREADS")]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Validation,
    Test,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run directory written by `train`.
    run: PathBuf,
    /// `all`, `uniform:N` or `popularity:N`; repeatable. Defaults to all
    /// three with N = 100.
    #[arg(long = "protocol", value_parser = parse_protocol)]
    protocols: Vec<RankingProtocol>,
    /// Keep the user's own history among sampled candidates.
    #[arg(long)]
    include_seen: bool,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Candidate-sampling seed; defaults to the run's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Append reports as JSON lines to this file.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["dump", "run"]))]
struct AnalyzeArgs {
    /// Attention dump directory (manifest.csv plus one CSV per record).
    dump: Option<PathBuf>,
    /// Record attention from a run's checkpoint instead of reading a dump.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Users sampled when recording from a run.
    #[arg(long, default_value_t = 16)]
    users: usize,
    /// User-sampling seed when recording from a run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative threshold for the effective rank.
    #[arg(long, default_value_t = causalrec::analysis::DEFAULT_TAU)]
    tau: f64,
    /// Output directory for the CSV files.
    #[arg(long, env = "CAUSALREC_OUTPUT_DIR")]
    output: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// First run directory
    run_a: PathBuf,
    /// Second run directory
    run_b: PathBuf,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_protocol(s: &str) -> Result<RankingProtocol, String> {
    let (kind, n) = match s.split_once(':') {
        Some((k, n)) => (
            k,
            Some(
                n.parse::<usize>()
                    .map_err(|_| format!("bad sample size in `{s}`"))?,
            ),
        ),
        None => (s, None),
    };
    match (kind, n) {
        ("all" | "all_ranking", None) => Ok(RankingProtocol::all_ranking()),
        ("uniform", n) => Ok(RankingProtocol::uniform(n.unwrap_or(100))),
        ("popularity", n) => Ok(RankingProtocol::popularity(n.unwrap_or(100))),
        _ => Err(format!(
            "unknown protocol `{s}`; use all, uniform:N or popularity:N"
        )),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Parse { .. } | Error::Format(_) => 4,
        Error::SchemaVersion { .. } => 5,
        Error::Diverged(_) | Error::Sweep(_) => 6,
        _ => 1,
    }
}

fn base_dir(file: &Path) -> PathBuf {
    file.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn default_output(
    flag: Option<PathBuf>,
    configured: Option<&PathBuf>,
    file: &Path,
    fallback: &str,
) -> PathBuf {
    flag.or_else(|| configured.map(|p| base_dir(file).join(p)))
        .unwrap_or_else(|| {
            let stem = file
                .file_stem()
                .map_or("run".into(), |s| s.to_string_lossy().into_owned());
            PathBuf::from(fallback).join(stem)
        })
}

fn metrics_header() -> String {
    let mut s = format!("{:<16} {:<10}", "protocol", "split");
    for k in CUTOFFS {
        s.push_str(&format!(" {:>8}", format!("R@{k}")));
    }
    for k in CUTOFFS {
        s.push_str(&format!(" {:>8}", format!("N@{k}")));
    }
    s
}

fn metrics_line(r: &MetricReport) -> String {
    let mut s = format!(
        "{:<16} {:<10}",
        r.protocol.label(),
        format!("{:?}", r.split).to_lowercase()
    );
    for k in CUTOFFS {
        s.push_str(&format!(" {:>8.4}", r.recall_at(k)));
    }
    for k in CUTOFFS {
        s.push_str(&format!(" {:>8.4}", r.ndcg_at(k)));
    }
    s
}

fn print_reports(reports: &[MetricReport]) {
    println!("{}", metrics_header());
    for r in reports {
        println!("{}", metrics_line(r));
    }
}

fn cmd_prepare(a: PrepareArgs) -> causalrec::Result<()> {
    let mut format = match a.format {
        InputFormat::Tsv => LineFormat::default(),
        InputFormat::Csv => LineFormat {
            delimiter: ",".into(),
            ..LineFormat::default()
        },
        InputFormat::Ws => LineFormat::whitespace(),
        InputFormat::Movielens => LineFormat::movielens(),
    };
    format.has_header = a.header;
    let opts = PrepareOptions {
        format: format.clone(),
        min_count: a.min_count,
        max_len: a.max_len,
    };
    let log = load_interactions(&a.input, &format)?;
    let (dataset, report) = prepare(&log, &opts)?;
    let fp = dataset.save_bundle(&a.output)?;
    let s = report.stats;
    println!("users         {}", s.users);
    println!("items         {}", s.items);
    println!("interactions  {}", s.interactions);
    println!("mean length   {:.2}", s.mean_length);
    println!("density       {:.2e}", s.density);
    println!(
        "raw           {} ({} duplicates removed)",
        report.raw_interactions, report.duplicates_removed
    );
    println!("bundle        {} (sha256 {fp})", a.output.display());
    if let Some(path) = a.report {
        let text =
            serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::Io { path, source: e })?;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> causalrec::Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let out = default_output(a.output, cfg.output_dir.as_ref(), &a.config, "runs");
    let result = execute_train(&cfg, &base_dir(&a.config), &out);
    if let Ok(s) = &result {
        println!("run           {}", out.display());
        println!("status        {:?}", s.status);
        println!("epochs        {} (best {})", s.epochs, s.best_epoch);
        println!("valid R@10    {:.4}", s.best_recall10);
        print_reports(&s.test);
    }
    result.map(|_| ())
}

fn cmd_tune(a: TuneArgs) -> causalrec::Result<()> {
    let manifest = SweepManifest::load(&a.manifest)?;
    let out = default_output(
        a.output,
        manifest.output_dir.as_ref(),
        &a.manifest,
        "sweeps",
    );
    let threads = a.threads.unwrap_or(manifest.parallelism);
    let s = execute_tune(&manifest, &base_dir(&a.manifest), &out, threads)?;
    print!("{}", s.table);
    println!(
        "best          trial {} ({}) R@10 {:.4}",
        s.best.trial, s.best.label, s.best.best_score
    );
    println!("sweep         {}", out.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> causalrec::Result<()> {
    let summary = RunSummary::load(&a.run)?;
    let mut protocols = if a.protocols.is_empty() {
        vec![
            RankingProtocol::all_ranking(),
            RankingProtocol::uniform(100),
            RankingProtocol::popularity(100),
        ]
    } else {
        a.protocols
    };
    if a.include_seen {
        protocols = protocols
            .into_iter()
            .map(|p| p.with_exclude_seen(false))
            .collect();
    }
    let split = match a.split {
        SplitArg::Validation => Split::Validation,
        SplitArg::Test => Split::Test,
    };
    let reports = execute_evaluate(&a.run, &protocols, split, a.seed.unwrap_or(summary.seed))?;
    print_reports(&reports);
    if let Some(path) = a.json {
        let mut out = JsonLines::create(&path)?;
        for r in &reports {
            out.append(r)?;
        }
    }
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> causalrec::Result<()> {
    let records = match (&a.dump, &a.run) {
        (Some(dump), _) => read_attention_dump(dump)?,
        (None, Some(run)) => {
            let cfg = ExperimentConfig::load(&run.join(CONFIG_FILE))?;
            let ckpt = run.join(CHECKPOINT_FILE);
            let bytes = std::fs::read(&ckpt).map_err(|e| Error::Io {
                path: ckpt,
                source: e,
            })?;
            let model = Model::from_checkpoint(&bytes)?;
            let (dataset, fp) = cfg.dataset.load(run)?;
            let data = TrainData::new(&dataset, fp)?;
            let cases = sample_cases(
                data.validation_cases(),
                a.users,
                model.config.max_len,
                a.seed,
            );
            if cases.is_empty() {
                return Err(Error::EmptyInput(
                    "no user history fills the attention window".into(),
                ));
            }
            let records = record_attention(&model, &cases)?;
            write_attention_dump(&a.output.join("dump"), &records)?;
            records
        }
        (None, None) => unreachable!("clap requires a source"),
    };
    let summary = write_analysis(&records, &a.output, a.tau)?;
    println!("records       {}", summary.records);
    for c in [Causality::Ae, Causality::Ar] {
        let ranks: Vec<usize> = records
            .iter()
            .filter(|r| r.causality == c)
            .filter_map(|r| causalrec::analysis::svd_spectrum_with(&r.matrix, a.tau).ok())
            .map(|s| s.effective_rank)
            .collect();
        if !ranks.is_empty() {
            let mean = ranks.iter().sum::<usize>() as f64 / ranks.len() as f64;
            println!(
                "{c} eff. rank   {mean:.3} over {} records (tau {})",
                ranks.len(),
                a.tau
            );
        }
    }
    if let Some(cmp) = summary.comparison {
        println!("area          AE {:.4}  AR {:.4}", cmp.ae_area, cmp.ar_area);
    }
    println!("output        {}", a.output.display());
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> causalrec::Result<()> {
    let x = RunSummary::load(&a.run_a)?;
    let y = RunSummary::load(&a.run_b)?;
    let table = compare_runs(&x, &y)?;
    print!("{}", table.render());
    if let Some(path) = a.csv {
        std::fs::write(&path, table.to_csv()).map_err(|e| Error::Io { path, source: e })?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
