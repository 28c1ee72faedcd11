//! `mmcaps` command line: train, eval, bench and inspect workflows.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or config errors.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mmcaps::bench::{self, BenchOptions};
use mmcaps::config::{parse_override, RunConfig};
use mmcaps::data::{generate_synthetic, Dataset};
use mmcaps::eval::{self, EvalReport, Metric, Modalities};
use mmcaps::model::Modality;
use mmcaps::train::{self, Trainer};
use mmcaps::Error;

#[derive(Parser)]
#[command(name = "mmcaps", version, about = "Multimodal capsule embeddings: train, evaluate, benchmark, inspect")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Retrieval,
    Localization,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalitiesArg {
    Vt,
    Vat,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Euclidean,
    Dot,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Video,
    Audio,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, metrics and held-out features.
    Train {
        /// JSON run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override one config key, e.g. `--set total_steps=50`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a feature directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "vt")]
        modalities: ModalitiesArg,
        #[arg(long, value_enum, default_value = "retrieval")]
        task: Task,
        #[arg(long, value_enum, default_value = "euclidean")]
        metric: MetricArg,
        /// Report path; defaults to `report_<task>_<modalities>.json` next to the checkpoint.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Time routing methods over a grid of settings.
    Bench {
        /// JSON array of {routing, C, d1, d2, iters}.
        #[arg(long)]
        grid: PathBuf,
        /// CSV output; a JSON mirror is written with the same stem.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 2)]
        warmups: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List the samples that most activate each secondary capsule.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Capsule index; all capsules when omitted.
        #[arg(long)]
        capsule: Option<usize>,
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long, value_enum, default_value = "video")]
        modality: ModalityArg,
    },
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config { .. }) { 2 } else { 1 };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train { config, seed, out, overrides } => cmd_train(config.as_deref(), seed, &out, &overrides),
        Command::Eval { checkpoint, data, modalities, task, metric, report } => {
            let modalities = match modalities {
                ModalitiesArg::Vt => Modalities::Vt,
                ModalitiesArg::Vat => Modalities::Vat,
            };
            let metric = match metric {
                MetricArg::Euclidean => Metric::Euclidean,
                MetricArg::Dot => Metric::Dot,
            };
            cmd_eval(&checkpoint, &data, modalities, task, metric, report)
        }
        Command::Bench { grid, out, batch, repeats, warmups, seed } => {
            cmd_bench(&grid, &out, BenchOptions { batch, repeats, warmups, seed })
        }
        Command::Inspect { checkpoint, data, capsule, top, modality } => {
            let m = match modality {
                ModalityArg::Video => Modality::Video,
                ModalityArg::Audio => Modality::Audio,
                ModalityArg::Text => Modality::Text,
            };
            cmd_inspect(&checkpoint, &data, capsule, top, m)
        }
    }
}

fn cmd_train(config: Option<&Path>, seed: Option<u64>, out: &Path, overrides: &[String]) -> Result<(), Failure> {
    let text = match config {
        Some(path) => Some(
            std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?,
        ),
        None => None,
    };
    let mut pairs = overrides.iter().map(|o| parse_override(o)).collect::<Result<Vec<_>, _>>()?;
    if let Some(s) = seed {
        pairs.push(("seed".into(), s.into()));
    }
    let mut run = RunConfig::resolve(text.as_deref(), &pairs)?;

    let (train_data, test_data) = match &run.train_dir {
        Some(dir) => {
            let train = Dataset::load_dir(dir)?;
            let test = run.test_dir.as_deref().map(Dataset::load_dir).transpose()?;
            let dims = train.dims();
            run.dim_video = dims.video;
            run.dim_audio = dims.audio;
            run.dim_text = dims.text;
            run.model_config().validate()?;
            (train, test)
        }
        None => {
            let (train, test) = generate_synthetic(&run.synthetic_spec())?;
            (train, Some(test))
        }
    };

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), serde_json::to_vec_pretty(&run).map_err(Error::from)?)?;
    let mut train_config = run.train_config();
    train_config.checkpoint_path = Some(out.join("checkpoint.mmck"));
    let mut trainer = Trainer::new(run.model_config(), train_config)?;

    let mut metrics = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    trainer.run(&train_data, |record| {
        // Wall time is the only field that varies between identical runs.
        serde_json::to_writer(&mut metrics, record)?;
        metrics.write_all(b"\n")?;
        eprintln!("step {:>6}  lr {:.3e}  loss {:.5}", record.step, record.lr, record.loss);
        Ok(())
    })?;
    metrics.flush()?;
    if let Some(test) = test_data {
        test.save_dir(&out.join("test"))?;
    }
    println!("{}", out.join("checkpoint.mmck").display());
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    modalities: Modalities,
    task: Task,
    metric: Metric,
    report_path: Option<PathBuf>,
) -> Result<(), Failure> {
    let model = train::load_model(checkpoint)?;
    let dataset = Dataset::load_dir(data)?;
    let (report, name) = match task {
        Task::Retrieval => {
            let r = eval::evaluate_retrieval(&model, &dataset, modalities, metric)?;
            (EvalReport::from(&r), "retrieval")
        }
        Task::Localization => (eval::evaluate_localization(&model, &dataset, modalities)?, "localization"),
    };
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    println!("{json}");
    let tag = match modalities {
        Modalities::Vt => "vt",
        Modalities::Vat => "vat",
    };
    let path = report_path.unwrap_or_else(|| {
        checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("report_{name}_{tag}.json"))
    });
    std::fs::write(path, json + "\n")?;
    Ok(())
}

fn cmd_bench(grid: &Path, out: &Path, opts: BenchOptions) -> Result<(), Failure> {
    opts.validate()?;
    let points = bench::read_grid(grid).map_err(|e| match e {
        Error::Io(io) => usage(format!("cannot read grid {}: {io}", grid.display())),
        other => other.into(),
    })?;
    let rows = bench::bench_routing(&points, &opts)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    bench::write_reports(&rows, out)?;
    bench::write_csv(&rows, &mut std::io::stdout().lock())?;
    Ok(())
}

fn cmd_inspect(checkpoint: &Path, data: &Path, capsule: Option<usize>, top: usize, m: Modality) -> Result<(), Failure> {
    let model = train::load_model(checkpoint)?;
    let c = model.config().num_capsules;
    let capsules: Vec<usize> = match capsule {
        Some(k) if k >= c => return Err(usage(format!("capsule {k} out of range: the model has {c} capsules"))),
        Some(k) => vec![k],
        None => (0..c).collect(),
    };
    let dataset = Dataset::load_dir(data)?;
    if top > dataset.len() {
        return Err(usage(format!("--top {top} exceeds the {} samples", dataset.len())));
    }
    let summaries = eval::inspect(&model, &dataset, m, &capsules, top)?;
    let mut purities = Vec::new();
    for s in &summaries {
        let labels: Vec<String> = s
            .labels
            .iter()
            .map(|l| l.map_or_else(|| "-".to_owned(), |l| l.to_string()))
            .collect();
        let purity = s.purity.map_or_else(|| "n/a".to_owned(), |p| format!("{p:.3}"));
        println!(
            "capsule {:>3}  samples {:?}  labels [{}]  purity {purity}{}",
            s.capsule,
            s.samples,
            labels.join(", "),
            if s.varies { "" } else { "  (constant activation)" }
        );
        if let (true, Some(p)) = (s.varies, s.purity) {
            purities.push(p);
        }
    }
    if !purities.is_empty() {
        let mean = purities.iter().sum::<f64>() / purities.len() as f64;
        println!("mean purity over {} varying capsules: {mean:.3}", purities.len());
    }
    Ok(())
}
