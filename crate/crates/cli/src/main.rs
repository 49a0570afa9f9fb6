mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cmhash::codec::CodeMatrix;
use cmhash::data::{
    load_dataset, save_dataset, split_indices, synth_multimodal, Format, PairedDataset, SplitSpec, SynthSpec,
};
use cmhash::optimizer::Trainer;
use cmhash::retrieval::{evaluate_task, MapTable};
use cmhash::{load_model, save_model, HashModel, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use config::{list, required, FileConfig, ReportFormat, TaskChoice, TrainFlags};

#[derive(Parser)]
#[command(
    name = "cmhash",
    version,
    about = "Supervised cross-modal hashing",
    args_conflicts_with_subcommands = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired dataset.
    #[command(allow_negative_numbers = true)]
    Synth(SynthArgs),
    /// Learn a hash model.
    #[command(allow_negative_numbers = true)]
    Train(TrainArgs),
    /// Print packed codes for one modality.
    Encode(EncodeArgs),
    /// Score cross-modal retrieval with a trained model.
    Eval(EvalArgs),
    /// Train and evaluate over a hyper-parameter grid.
    #[command(allow_negative_numbers = true)]
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DataFormat {
    Csv,
    Dsm,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Feature dimension of every modality.
    #[arg(long, value_delimiter = ',', default_values_t = [32, 24])]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    /// Fraction of samples relabeled to a wrong class.
    #[arg(long, default_value_t = 0.0)]
    cross_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "csv")]
    data_format: DataFormat,
}

/// Where the database and query samples come from.
#[derive(Args, Clone)]
struct DataArgs {
    /// Key-value (TOML) config file; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// One feature file per modality, image first (`.csv` or `.dsm`).
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    features: Vec<PathBuf>,
    /// Labels: 0/1 rows or a single category-index column.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Separate query features; otherwise queries come from a split.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    query_features: Vec<PathBuf>,
    #[arg(long)]
    query_labels: Option<PathBuf>,
    /// Split file written by `train`.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Draw a fresh split with this many database samples.
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Raw features of the chosen modality, one sample per row.
    #[arg(long)]
    features: PathBuf,
    /// Modality index (0 image, 1 text).
    #[arg(long, default_value_t = 0)]
    modality: usize,
    /// Output directory for `codes.txt`; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    report: ReportArgs,
}

#[derive(Args, Clone)]
struct ReportArgs {
    #[arg(long, value_enum)]
    task: Option<TaskChoice>,
    /// Rank cutoff for AP; the whole database when absent.
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, value_enum)]
    format: Option<ReportFormat>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    report: ReportArgs,
    #[arg(long, value_delimiter = ',')]
    betas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    etas: Vec<f64>,
    /// Anchor counts `M` to try.
    #[arg(long, value_delimiter = ',')]
    anchor_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    bits_grid: Vec<usize>,
    /// Cells trained concurrently.
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// Error chain on one line; causes already quoted by their parent are skipped.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.ends_with(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg.replace('\n', " ")
}

fn synth(a: SynthArgs) -> Result<()> {
    let format = match a.data_format {
        DataFormat::Csv => Format::Csv,
        DataFormat::Dsm => Format::Binary,
    };
    let ds = synth_multimodal(&SynthSpec {
        classes: a.classes,
        per_class: a.per_class,
        dims: a.dims,
        noise: a.noise,
        cross_noise: a.cross_noise,
        seed: a.seed,
    })?;
    let (features, labels) = save_dataset(&ds, &a.out, format)?;
    eprintln!(
        "wrote {} samples in {} modalities to {}",
        ds.len(),
        features.len(),
        a.out.display()
    );
    for p in features.iter().chain([&labels]) {
        println!("{}", p.display());
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct SplitFile {
    seed: u64,
    train: Vec<usize>,
    query: Vec<usize>,
}

/// Database and queries resolved from the data flags.
struct Sets {
    db: PairedDataset,
    queries: Option<PairedDataset>,
    split: Option<SplitFile>,
}

fn read_dataset(features: &[PathBuf], labels: &Path) -> Result<PairedDataset> {
    let format = Format::from_path(&features[0]);
    Ok(load_dataset(features, labels, format)?)
}

fn resolve_sets(data: &DataArgs, file: &FileConfig) -> Result<Sets> {
    let Some(features) = list(&data.features, &file.features) else {
        bail!("missing --features");
    };
    let labels = required(data.labels.clone(), &file.labels, "--labels")?;
    let all = read_dataset(&features, &labels)?;
    if let Some(qf) = list(&data.query_features, &file.query_features) {
        let ql = required(data.query_labels.clone(), &file.query_labels, "--query-labels")?;
        let queries = read_dataset(&qf, &ql)?;
        if queries.modalities.len() != all.modalities.len() {
            bail!(
                "queries have {} modalities, database {}",
                queries.modalities.len(),
                all.modalities.len()
            );
        }
        return Ok(Sets {
            db: all,
            queries: Some(queries),
            split: None,
        });
    }
    let split = if let Some(path) = data.split.clone().or_else(|| file.split.clone()) {
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let s: SplitFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(bad) = s.train.iter().chain(&s.query).find(|&&i| i >= all.len()) {
            bail!("{}: index {bad} out of range for {} samples", path.display(), all.len());
        }
        Some(s)
    } else if let Some(train_count) = data.train_count.or(file.train_count) {
        let seed = data.split_seed.or(file.split_seed).unwrap_or(0);
        let (train, query) = split_indices(all.len(), SplitSpec { train_count, seed })?;
        Some(SplitFile { seed, train, query })
    } else {
        None
    };
    Ok(match split {
        Some(s) => Sets {
            db: all.select(&s.train),
            queries: Some(all.select(&s.query)),
            split: Some(s),
        },
        None => Sets {
            db: all,
            queries: None,
            split: None,
        },
    })
}

fn out_dir(data: &DataArgs, file: &FileConfig) -> Result<PathBuf> {
    let dir = required(data.out.clone(), &file.out, "--out")?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: &'a TrainConfig,
    samples: usize,
    report: &'a cmhash::TrainReport,
}

fn train(a: TrainArgs) -> Result<()> {
    let file = FileConfig::load_opt(a.data.config.as_deref())?;
    let cfg = a.train.resolve(&file)?;
    let out = out_dir(&a.data, &file)?;
    let sets = resolve_sets(&a.data, &file)?;
    eprintln!(
        "training {} bits on {} samples, {} anchors per modality",
        cfg.bits,
        sets.db.len(),
        cfg.anchors
    );
    let trainer = Trainer::new(&sets.db.modalities, &sets.db.labels, &cfg)?;
    let outcome = trainer.run_with(|p| {
        eprintln!(
            "iter {:>3}  objective {:.6e}  change {:.2e}  {:.3}s",
            p.iteration, p.objective, p.relative_change, p.seconds
        )
    })?;
    save_model(&outcome.model, out.join("model.dsh"))?;
    let summary = TrainSummary {
        config: &cfg,
        samples: sets.db.len(),
        report: &outcome.report,
    };
    write(&out.join("report.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    write(&out.join("train.log"), outcome.report.to_log())?;
    if let Some(split) = &sets.split {
        write(&out.join("split.json"), serde_json::to_string(split)? + "\n")?;
    }
    eprintln!(
        "{} after {} iterations in {:.2}s; model written to {}",
        if outcome.report.converged {
            "converged"
        } else {
            "stopped"
        },
        outcome.report.iterations,
        outcome.report.total_seconds,
        out.join("model.dsh").display()
    );
    Ok(())
}

/// One line per code, 64-bit words as zero-padded hex separated by spaces.
fn hex_lines(codes: &CodeMatrix) -> String {
    let mut s = String::new();
    for words in codes.iter() {
        let line: Vec<String> = words.iter().map(|w| format!("{w:016x}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

fn encode(a: EncodeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let x = cmhash::data::load_features(&a.features, Format::from_path(&a.features))?;
    let codes = model.encode_batch(&x, a.modality)?;
    let text = hex_lines(&codes);
    match a.out {
        Some(dir) => {
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            write(&dir.join("codes.txt"), text)?;
            eprintln!(
                "encoded {} samples into {}",
                codes.len(),
                dir.join("codes.txt").display()
            );
        }
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct EvalRecord {
    task: String,
    bits: usize,
    map: f64,
    cutoff: usize,
    queries: usize,
    database: usize,
}

fn score(model: &HashModel, sets: &Sets, tasks: &[cmhash::Task], top_k: Option<usize>) -> Result<Vec<EvalRecord>> {
    let queries = sets.queries.as_ref().unwrap_or(&sets.db);
    tasks
        .iter()
        .map(|&task| {
            let res = evaluate_task(
                model,
                task,
                &queries.modalities,
                &queries.labels,
                &sets.db.modalities,
                &sets.db.labels,
                top_k,
            )?;
            Ok(EvalRecord {
                task: task.to_string(),
                bits: model.bits(),
                map: res.map,
                cutoff: res.cutoff,
                queries: queries.len(),
                database: sets.db.len(),
            })
        })
        .collect()
}

fn render(records: &[EvalRecord], format: ReportFormat) -> Result<String> {
    let mut table = MapTable::default();
    for r in records {
        table.push(r.task.parse()?, r.bits, r.map);
    }
    Ok(match format {
        ReportFormat::Text => table.to_text(),
        ReportFormat::Csv => table.to_csv(),
        ReportFormat::Json => serde_json::to_string_pretty(records)? + "\n",
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let file = FileConfig::load_opt(a.data.config.as_deref())?;
    let model = load_model(&a.model)?;
    let sets = resolve_sets(&a.data, &file)?;
    if sets.queries.is_none() {
        eprintln!("no query set given; querying the database against itself");
    }
    let tasks = a.report.task.or(file.task).unwrap_or(TaskChoice::Both).tasks();
    let records = score(&model, &sets, &tasks, a.report.top_k.or(file.top_k))?;
    let format = a.report.format.or(file.format).unwrap_or(ReportFormat::Text);
    let text = render(&records, format)?;
    print!("{text}");
    if let Some(dir) = a.data.out.clone().or_else(|| file.out.clone()) {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let ext = match format {
            ReportFormat::Text => "txt",
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        };
        write(&dir.join(format!("eval.{ext}")), text)?;
    }
    Ok(())
}

#[derive(Clone)]
struct Cell {
    index: usize,
    cfg: TrainConfig,
}

fn sweep(a: SweepArgs) -> Result<()> {
    let file = FileConfig::load_opt(a.data.config.as_deref())?;
    let base = a.train.resolve(&file)?;
    let bits = list(&a.bits_grid, &file.bits_grid).unwrap_or(vec![base.bits]);
    let anchors = list(&a.anchor_grid, &file.anchor_grid).unwrap_or(vec![base.anchors]);
    let betas = list(&a.betas, &file.betas).unwrap_or(vec![base.beta]);
    let etas = list(&a.etas, &file.etas).unwrap_or(vec![base.eta]);
    let mut cells = Vec::new();
    for &r in &bits {
        for &m in &anchors {
            for &beta in &betas {
                for &eta in &etas {
                    let index = cells.len();
                    let cfg = TrainConfig {
                        bits: r,
                        anchors: m,
                        beta,
                        eta,
                        seed: base.seed.wrapping_add(index as u64),
                        ..base.clone()
                    };
                    cfg.validate().with_context(|| format!("grid cell {index}"))?;
                    cells.push(Cell { index, cfg });
                }
            }
        }
    }
    let out = out_dir(&a.data, &file)?;
    let sets = resolve_sets(&a.data, &file)?;
    if sets.queries.is_none() {
        eprintln!("no query set given; querying the database against itself");
    }
    let tasks = a.report.task.or(file.task).unwrap_or(TaskChoice::Both).tasks();
    let top_k = a.report.top_k.or(file.top_k);
    let workers = a.workers.or(file.workers).unwrap_or(1).max(1);
    eprintln!("sweeping {} cells with {workers} worker(s)", cells.len());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
    let total = cells.len();
    let rows: Vec<String> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| -> Result<String> {
                let started = Instant::now();
                let outcome = cmhash::train(&sets.db.modalities, &sets.db.labels, &cell.cfg)
                    .with_context(|| format!("grid cell {}", cell.index))?;
                let seconds = started.elapsed().as_secs_f64();
                let records = score(&outcome.model, &sets, &tasks, top_k)?;
                let maps: Vec<String> = records.iter().map(|r| format!("{:.6}", r.map)).collect();
                eprintln!(
                    "cell {}/{total}: bits={} anchors={} beta={} eta={} map=[{}] {seconds:.2}s",
                    cell.index + 1,
                    cell.cfg.bits,
                    cell.cfg.anchors,
                    cell.cfg.beta,
                    cell.cfg.eta,
                    maps.join(", ")
                );
                Ok(format!(
                    "{},{},{},{},{},{},{},{:.6},{}",
                    cell.index,
                    cell.cfg.bits,
                    cell.cfg.anchors,
                    cell.cfg.beta,
                    cell.cfg.eta,
                    cell.cfg.seed,
                    outcome.report.iterations,
                    seconds,
                    maps.join(",")
                ))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut csv = String::from("cell,bits,anchors,beta,eta,seed,iterations,train_seconds");
    for t in &tasks {
        csv.push_str(&format!(",map_{}", t.to_string().to_lowercase()));
    }
    csv.push('\n');
    for row in rows {
        csv.push_str(&row);
        csv.push('\n');
    }
    write(&out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
