//! Command-line front end: dataset generation, pretraining, test-time
//! adaptation runs, sweeps, and report conversion.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or format error,
//! 4 failed ordering assertion.

use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use svwa::adaptation::{AdaptMode, Method, VariationSource};
use svwa::data::{load_dataset, make_dataset, save_dataset};
use svwa::error::Error;
use svwa::harness::{
    emit_report, mean_accuracy, rows_from_csv, rows_to_csv, run_adapt_eval, run_pretrain,
    summary_csv, ExperimentConfig, PretrainConfig, ReportFormat, ResultRow,
};
use svwa::model::{load_checkpoint, save_checkpoint, PointNetLiteConfig};

#[derive(Parser)]
#[command(name = "svwa", about = "Sampling-variation weight averaging for point-cloud test-time adaptation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled point-cloud dataset.
    GenData(GenDataArgs),
    /// Pretrain a classifier on a dataset's train split.
    Pretrain(PretrainArgs),
    /// Evaluate a method on a corrupted test stream.
    Adapt(AdaptArgs),
    /// Run a grid of adaptation configurations.
    Sweep(SweepArgs),
    /// Convert a rows CSV into a summary table or JSON.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 250)]
    train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    #[arg(long, default_value_t = 1024)]
    n_points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-point MLP channel widths, comma separated.
    #[arg(long, default_value = "32,64,128")]
    mlp: String,
    /// Classifier head hidden widths, comma separated.
    #[arg(long, default_value = "64")]
    head: String,
    /// Points kept by farthest point sampling.
    #[arg(long, default_value_t = 128)]
    fps_points: usize,
}

#[derive(Args, Clone)]
struct AdaptArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for rows, summary, and resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value config file; command-line flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// source-only, tent, or svwa.
    #[arg(long)]
    method: Option<Method>,
    /// kind:severity, e.g. gaussian:3, or "none" for the clean stream.
    #[arg(long)]
    corruption: Option<String>,
    /// Number of variations.
    #[arg(long)]
    nv: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// parallel or sequential.
    #[arg(long)]
    mode: Option<AdaptMode>,
    /// sampling, jitter, rotation, flip, scale, or jitter+sampling.
    #[arg(long)]
    variation_source: Option<VariationSource>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Restore pretrained normalization parameters before every batch
    /// instead of continuing from the previous batch's average.
    #[arg(long)]
    reset_each_batch: bool,
    #[arg(long, value_parser = parse_format, default_value = "csv")]
    format: ReportFormat,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated methods to compare.
    #[arg(long, default_value = "source-only,tent,svwa")]
    methods: String,
    /// Comma-separated kind:severity entries ("none" allowed).
    #[arg(long, default_value = "gaussian:3,uniform:3")]
    corruptions: String,
    /// Comma-separated variation counts; each gets its own svwa rows.
    #[arg(long)]
    nv_list: Option<String>,
    /// Comma-separated variation sources.
    #[arg(long)]
    sources: Option<String>,
    /// Comma-separated adaptation modes.
    #[arg(long)]
    modes: Option<String>,
    #[arg(long, default_value_t = 6)]
    nv: usize,
    #[arg(long, default_value_t = 1)]
    iters: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Fail (exit 4) unless mean accuracies satisfy
    /// svwa > tent > source-only over the swept corruptions.
    #[arg(long)]
    assert_ordering: bool,
    #[arg(long, value_parser = parse_format, default_value = "csv")]
    format: ReportFormat,
}

#[derive(Args)]
struct ReportArgs {
    /// rows.csv produced by adapt or sweep.
    #[arg(long)]
    rows: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_format, default_value = "csv")]
    format: ReportFormat,
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    match s {
        "csv" => Ok(ReportFormat::Csv),
        "json" => Ok(ReportFormat::Json),
        other => Err(format!("unknown format '{other}', expected csv or json")),
    }
}

fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>, Error> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad {what} entry '{p}'")))
        })
        .collect()
}

fn exit_code_for(err: &Error) -> ExitCode {
    match err {
        Error::Io(_) | Error::Format { .. } | Error::Version { .. } | Error::EmptyReport => {
            ExitCode::from(3)
        }
        _ => ExitCode::from(2),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Adapt(args) => cmd_adapt(args),
        Command::Sweep(args) => return cmd_sweep(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), Error> {
    let dataset = make_dataset(args.train_per_class, args.test_per_class, args.n_points, args.seed)?;
    save_dataset(&dataset, &args.out)?;
    println!(
        "wrote {} clouds ({} train, {} test, {} classes) to {}",
        dataset.clouds.len(),
        dataset.train_indices.len(),
        dataset.test_indices.len(),
        dataset.num_classes,
        args.out.display()
    );
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs) -> Result<(), Error> {
    let dataset = load_dataset(&args.dataset)?;
    let model = PointNetLiteConfig {
        num_classes: dataset.num_classes,
        mlp_channels: parse_usize_list(&args.mlp, "mlp")?,
        head_dims: parse_usize_list(&args.head, "head")?,
        fps_points: args.fps_points,
    };
    let cfg = PretrainConfig {
        epochs: args.epochs,
        lr: args.lr,
        batch_size: args.batch_size,
    };
    let outcome = run_pretrain(&dataset, model, &cfg, args.seed)?;
    save_checkpoint(&outcome.state, &args.out)?;
    print!("{}", outcome.log);
    std::fs::write(args.out.with_extension("log"), &outcome.log)?;
    println!(
        "saved checkpoint ({} parameters) to {}",
        outcome.state.num_params(),
        args.out.display()
    );
    Ok(())
}

/// Flat key=value config file; '#' starts a comment line.
fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("{}:{}: expected key=value", path.display(), ln + 1))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn resolve_experiment(args: &AdaptArgs) -> Result<ExperimentConfig, Error> {
    let file = match &args.config {
        Some(path) => read_config_file(path)?,
        None => BTreeMap::new(),
    };
    let mut cfg = ExperimentConfig::default();
    // file values first, then flags override
    let get = |key: &str| file.get(key).map(String::as_str);
    if let Some(v) = get("method") {
        cfg.method = v.parse()?;
    }
    if let Some(v) = get("corruption") {
        cfg.corruption = Some(v.to_string());
    }
    let parse_key = |key: &str, v: &str| Error::Config(format!("bad {key} value '{v}'"));
    if let Some(v) = get("nv") {
        cfg.v = v.parse().map_err(|_| parse_key("nv", v))?;
    }
    if let Some(v) = get("iters") {
        cfg.iterations = v.parse().map_err(|_| parse_key("iters", v))?;
    }
    if let Some(v) = get("batch_size") {
        cfg.batch_size = v.parse().map_err(|_| parse_key("batch_size", v))?;
    }
    if let Some(v) = get("mode") {
        cfg.mode = v.parse()?;
    }
    if let Some(v) = get("variation_source") {
        cfg.variation_source = v.parse()?;
    }
    if let Some(v) = get("lr") {
        cfg.lr = v.parse().map_err(|_| parse_key("lr", v))?;
    }
    if let Some(v) = get("seed") {
        cfg.seed = v.parse().map_err(|_| parse_key("seed", v))?;
    }
    if let Some(v) = get("repeats") {
        cfg.repeats = v.parse().map_err(|_| parse_key("repeats", v))?;
    }
    if let Some(v) = get("reset_each_batch") {
        cfg.reset_each_batch = v.parse().map_err(|_| parse_key("reset_each_batch", v))?;
    }
    for key in file.keys() {
        const KNOWN: &[&str] = &[
            "method", "corruption", "nv", "iters", "batch_size", "mode",
            "variation_source", "lr", "seed", "repeats", "reset_each_batch",
        ];
        if !KNOWN.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
    }
    if let Some(v) = args.method {
        cfg.method = v;
    }
    if let Some(v) = &args.corruption {
        cfg.corruption = Some(v.clone());
    }
    if let Some(v) = args.nv {
        cfg.v = v;
    }
    if let Some(v) = args.iters {
        cfg.iterations = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.mode {
        cfg.mode = v;
    }
    if let Some(v) = args.variation_source {
        cfg.variation_source = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.repeats {
        cfg.repeats = v;
    }
    if args.reset_each_batch {
        cfg.reset_each_batch = true;
    }
    Ok(cfg)
}

fn write_resolved_config(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), Error> {
    let text = format!(
        "method = {}\ncorruption = {}\nnv = {}\niters = {}\nbatch_size = {}\nmode = {}\nvariation_source = {}\nlr = {}\nseed = {}\nrepeats = {}\nreset_each_batch = {}\nfingerprint = {:016x}\n",
        cfg.method.name(),
        cfg.corruption.as_deref().unwrap_or("none"),
        cfg.v,
        cfg.iterations,
        cfg.batch_size,
        match cfg.mode {
            AdaptMode::Parallel => "parallel",
            AdaptMode::Sequential => "sequential",
        },
        cfg.variation_source.name(),
        cfg.lr,
        cfg.seed,
        cfg.repeats,
        cfg.reset_each_batch,
        cfg.fingerprint(),
    );
    std::fs::write(out_dir.join("config.resolved"), text)?;
    Ok(())
}

fn cmd_adapt(args: AdaptArgs) -> Result<(), Error> {
    let cfg = resolve_experiment(&args)?;
    let dataset = load_dataset(&args.dataset)?;
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let rows = run_adapt_eval(&checkpoint, &dataset, &cfg)?;
    std::fs::create_dir_all(&args.out)?;
    write_resolved_config(&cfg, &args.out)?;
    emit_report(&rows, args.format, &args.out)?;
    print_rows(&rows);
    print_aggregates(&rows);
    Ok(())
}

fn print_aggregates(rows: &[ResultRow]) {
    for (key, mean, std) in svwa::harness::aggregate_rows(rows) {
        println!("{key}: accuracy {mean:.4} ± {std:.4}");
    }
}

fn print_rows(rows: &[ResultRow]) {
    for r in rows {
        println!(
            "{} {}:{} seed {} accuracy {:.4} entropy {:.4} -> {:.4} ({} ms)",
            r.method,
            r.corruption,
            r.severity,
            r.seed,
            r.accuracy,
            r.mean_entropy_before,
            r.mean_entropy_after,
            r.elapsed_ms
        );
    }
}

fn cmd_sweep(args: SweepArgs) -> ExitCode {
    match run_sweep(&args) {
        Ok(rows) => {
            if args.assert_ordering {
                let source = mean_accuracy(&rows, "source-only");
                let tent = mean_accuracy(&rows, "tent");
                let svwa = mean_accuracy(&rows, "svwa");
                match (source, tent, svwa) {
                    (Some(s), Some(t), Some(w)) if w > t && t > s => {
                        println!("ordering holds: svwa {w:.4} > tent {t:.4} > source-only {s:.4}");
                    }
                    (Some(s), Some(t), Some(w)) => {
                        eprintln!(
                            "ordering failed: svwa {w:.4}, tent {t:.4}, source-only {s:.4}"
                        );
                        return ExitCode::from(4);
                    }
                    _ => {
                        eprintln!("ordering assertion needs source-only, tent, and svwa rows");
                        return ExitCode::from(2);
                    }
                }
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}

fn run_sweep(args: &SweepArgs) -> Result<Vec<ResultRow>, Error> {
    let dataset = load_dataset(&args.dataset)?;
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let methods: Vec<Method> = args
        .methods
        .split(',')
        .map(|m| m.trim().parse())
        .collect::<Result<_, _>>()?;
    let corruptions: Vec<String> = args
        .corruptions
        .split(',')
        .map(|c| c.trim().to_string())
        .collect();
    let nv_list: Vec<usize> = match &args.nv_list {
        Some(s) => parse_usize_list(s, "nv_list")?,
        None => vec![args.nv],
    };
    let sources: Vec<VariationSource> = match &args.sources {
        Some(s) => s
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<_, _>>()?,
        None => vec![VariationSource::Sampling],
    };
    let modes: Vec<AdaptMode> = match &args.modes {
        Some(s) => s
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<_, _>>()?,
        None => vec![AdaptMode::Parallel],
    };
    let mut rows = Vec::new();
    for method in &methods {
        for corruption in &corruptions {
            // variation knobs only multiply configurations for svwa
            let (nvs, srcs, mds): (&[usize], &[VariationSource], &[AdaptMode]) =
                if *method == Method::Svwa {
                    (&nv_list, &sources, &modes)
                } else {
                    (&nv_list[..1], &sources[..1], &modes[..1])
                };
            for &v in nvs {
                for &source in srcs {
                    for &mode in mds {
                        let cfg = ExperimentConfig {
                            method: *method,
                            corruption: Some(corruption.clone()),
                            v,
                            iterations: args.iters,
                            mode,
                            lr: args.lr,
                            batch_size: args.batch_size,
                            variation_source: source,
                            reset_each_batch: false,
                            seed: args.seed,
                            repeats: args.repeats,
                        };
                        let mut cell = run_adapt_eval(&checkpoint, &dataset, &cfg)?;
                        print_rows(&cell);
                        rows.append(&mut cell);
                    }
                }
            }
        }
    }
    std::fs::create_dir_all(&args.out)?;
    let resolved = format!(
        "methods = {}\ncorruptions = {}\nnv_list = {:?}\nsources = {:?}\nmodes = {:?}\niters = {}\nbatch_size = {}\nlr = {}\nseed = {}\nrepeats = {}\n",
        args.methods,
        args.corruptions,
        nv_list,
        sources.iter().map(|s| s.name()).collect::<Vec<_>>(),
        modes,
        args.iters,
        args.batch_size,
        args.lr,
        args.seed,
        args.repeats,
    );
    std::fs::write(args.out.join("config.resolved"), resolved)?;
    emit_report(&rows, args.format, &args.out)?;
    print_aggregates(&rows);
    Ok(rows)
}

fn cmd_report(args: ReportArgs) -> Result<(), Error> {
    let text = std::fs::read_to_string(&args.rows)?;
    let rows = rows_from_csv(&text)?;
    std::fs::create_dir_all(&args.out)?;
    match args.format {
        ReportFormat::Csv => {
            std::fs::write(args.out.join("rows.csv"), rows_to_csv(&rows)?)?;
            std::fs::write(args.out.join("summary.csv"), summary_csv(&rows)?)?;
        }
        ReportFormat::Json => {
            emit_report(&rows, ReportFormat::Json, &args.out)?;
        }
    }
    println!("{}", summary_csv(&rows)?);
    Ok(())
}
