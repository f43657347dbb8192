//! Command-line front end: `train`, `eval`, `export-attention`, `synth` and
//! `convert`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or checkpoint
//! error, 3 dataset error. Diagnostics go to standard error; machine-readable
//! output (JSON, CSV, NDJSON) goes to standard output or files.

pub mod config;

use std::ffi::OsString;
use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tsda::data::{convert_csv, load_dataset, save_dataset, synthesize_split, CsvImport, Dataset, Domain, SynthConfig};
use tsda::model::Model;
use tsda::trainer::{check_compatible, evaluate, fit};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;

/// A failed command: exit code plus message.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

fn fail(code: i32) -> impl Fn(&dyn Display) -> Failure {
    move |e| Failure {
        code,
        message: e.to_string(),
    }
}

fn config_err(e: impl Display) -> Failure {
    fail(EXIT_CONFIG)(&e)
}

fn data_err(e: impl Display) -> Failure {
    fail(EXIT_DATA)(&e)
}

fn runtime_err(e: impl Display) -> Failure {
    fail(EXIT_RUNTIME)(&e)
}

type CmdResult = Result<(), Failure>;

#[derive(Debug, Parser)]
#[command(
    name = "tsda",
    version,
    about = "Unsupervised domain adaptation for multivariate time series"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a labelled source set and an unlabelled target set.
    Train(TrainArgs),
    /// Accuracy and confusion matrix of a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Write the cross-attention weights of one sample as CSV.
    ExportAttention(ExportArgs),
    /// Generate the synthetic source/target pair and a target test split.
    Synth(SynthArgs),
    /// Convert per-sample CSV files into the binary dataset format.
    Convert(ConvertArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated loss terms to switch off: domain, margin, dtw, center.
    #[arg(long)]
    pub ablate: Option<String>,
    /// Labelled held-out set evaluated after training.
    #[arg(long)]
    pub eval: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub sample_index: usize,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 128)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 6)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub samples_per_class: usize,
    #[arg(long, default_value_t = 24)]
    pub motif_len: usize,
    #[arg(long, default_value_t = 16)]
    pub max_shift: usize,
    #[arg(long, default_value_t = 1.6)]
    pub scale: f64,
    #[arg(long, default_value_t = 0.3)]
    pub offset: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DomainArg {
    Source,
    Target,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// CSV with a header and columns `file,label`; files are relative to it.
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of classes; defaults to the largest label plus one.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, value_enum, default_value_t = DomainArg::Source)]
    pub domain: DomainArg,
    /// Sample files start with a header row.
    #[arg(long)]
    pub sample_headers: bool,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::ExportAttention(a) => cmd_export_attention(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Convert(a) => cmd_convert(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn load_data(path: &Path) -> Result<Dataset, Failure> {
    load_dataset(path).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    Model::load(path).map_err(|e| config_err(format!("checkpoint {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(runtime_err)?;
    fs::write(path, text + "\n").map_err(|e| runtime_err(format!("{}: {e}", path.display())))
}

pub fn cmd_train(args: &TrainArgs) -> CmdResult {
    let mut cfg = RunConfig::from_file(&args.config).map_err(config_err)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(names) = &args.ablate {
        cfg.ablate(names).map_err(config_err)?;
    }
    let source_path = args
        .source
        .clone()
        .or(cfg.source.clone())
        .ok_or_else(|| config_err("no source dataset (--source or `source =`)"))?;
    let target_path = args
        .target
        .clone()
        .or(cfg.target.clone())
        .ok_or_else(|| config_err("no target dataset (--target or `target =`)"))?;
    let eval_path = args.eval.clone().or(cfg.eval.clone());

    let source = load_data(&source_path)?;
    let target = load_data(&target_path)?;
    let eval_set = eval_path.as_deref().map(load_data).transpose()?;
    cfg.fill_shape(&source.meta);
    cfg.train.validate().map_err(config_err)?;
    for ds in [Some(&source), Some(&target), eval_set.as_ref()].into_iter().flatten() {
        check_compatible(&cfg.train.model, ds).map_err(data_err)?;
    }
    source.labels().map_err(|e| data_err(format!("source: {e}")))?;
    if let Some(ev) = &eval_set {
        ev.labels().map_err(|e| data_err(format!("eval: {e}")))?;
    }

    fs::create_dir_all(&args.out).map_err(|e| runtime_err(format!("{}: {e}", args.out.display())))?;
    let metrics_path = args.out.join("metrics.ndjson");
    let ckpt_path = args.out.join("model.ckpt");
    let mut metrics = BufWriter::new(
        File::create(&metrics_path).map_err(|e| runtime_err(format!("{}: {e}", metrics_path.display())))?,
    );
    let target_labeled = target.is_labeled();
    let unlabeled_target = target.without_labels();
    let (model, state) = fit(&cfg.train, &source, &unlabeled_target, |model, m| {
        if target_labeled {
            m.target_accuracy = Some(evaluate(model, &target)?.accuracy);
        }
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(metrics, "{line}")
            .and_then(|_| metrics.flush())
            .map_err(|e| tsda::Error::Io {
                path: metrics_path.clone(),
                source: e,
            })?;
        model.save(&ckpt_path)?;
        eprintln!(
            "epoch {:>3}  cls {:.4}  source acc {:.4}{}",
            m.epoch,
            m.loss_cls,
            m.source_accuracy,
            m.target_accuracy
                .map_or(String::new(), |a| format!("  target acc {a:.4}"))
        );
        Ok(())
    })
    .map_err(runtime_err)?;

    let mut summary = json!({
        "epochs": state.epoch,
        "seed": cfg.train.seed,
        "source_accuracy": evaluate(&model, &source).map_err(runtime_err)?.accuracy,
    });
    if target_labeled {
        summary["target_accuracy"] = json!(evaluate(&model, &target).map_err(runtime_err)?.accuracy);
    }
    if let Some(ev) = &eval_set {
        summary["test_accuracy"] = json!(evaluate(&model, ev).map_err(runtime_err)?.accuracy);
    }
    write_json(&args.out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary).map_err(runtime_err)?);
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> CmdResult {
    let model = load_model(&args.checkpoint)?;
    let ds = load_data(&args.data)?;
    check_compatible(&model.config, &ds).map_err(data_err)?;
    let ev = evaluate(&model, &ds).map_err(data_err)?;
    println!("{}", serde_json::to_string(&ev).map_err(runtime_err)?);
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, Failure> {
    csv::Writer::from_path(path).map_err(|e| runtime_err(format!("{}: {e}", path.display())))
}

pub fn cmd_export_attention(args: &ExportArgs) -> CmdResult {
    let model = load_model(&args.checkpoint)?;
    let ds = load_data(&args.data)?;
    check_compatible(&model.config, &ds).map_err(data_err)?;
    let sample = ds.samples.get(args.sample_index).ok_or_else(|| {
        data_err(format!(
            "sample index {} out of range for {} samples",
            args.sample_index,
            ds.len()
        ))
    })?;
    let inf = model.infer(&sample.values).map_err(runtime_err)?;
    fs::create_dir_all(&args.out).map_err(|e| runtime_err(format!("{}: {e}", args.out.display())))?;

    let mut means = csv_writer(&args.out.join("attention_mean.csv"))?;
    means
        .write_record(["kernel", "position", "mean_weight"])
        .map_err(runtime_err)?;
    for (&k, w) in model.config.kernel_sizes.iter().zip(&inf.cross_attention) {
        let (m, l) = (w.shape()[0], w.shape()[1]);
        let mut out = csv_writer(&args.out.join(format!("attention_k{k}.csv")))?;
        for row in w.data().chunks(l) {
            out.write_record(row.iter().map(|v| v.to_string()))
                .map_err(runtime_err)?;
        }
        out.flush().map_err(runtime_err)?;
        for j in 0..l {
            let mean = (0..m).map(|i| w.data()[i * l + j]).sum::<f64>() / m as f64;
            means
                .write_record([k.to_string(), j.to_string(), mean.to_string()])
                .map_err(runtime_err)?;
        }
    }
    means.flush().map_err(runtime_err)?;
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        seq_len: args.seq_len,
        channels: args.channels,
        num_classes: args.classes,
        samples_per_class: args.samples_per_class,
        motif_len: args.motif_len,
        max_shift: args.max_shift,
        scale: args.scale,
        offset: args.offset,
        noise: args.noise,
        seed: args.seed,
    };
    cfg.validate().map_err(config_err)?;
    let splits = [
        ("source", Domain::Source, 0),
        ("target", Domain::Target, 1),
        ("target_test", Domain::Target, 2),
    ];
    for (name, domain, stream) in splits {
        let ds = synthesize_split(&cfg, domain, stream).map_err(config_err)?;
        save_dataset(&ds, args.out.join(name)).map_err(runtime_err)?;
    }
    write_json(
        &args.out.join("synth.json"),
        &serde_json::to_value(&cfg).map_err(runtime_err)?,
    )
}

pub fn cmd_convert(args: &ConvertArgs) -> CmdResult {
    let domain = match args.domain {
        DomainArg::Source => Domain::Source,
        DomainArg::Target => Domain::Target,
    };
    let ds = convert_csv(&CsvImport {
        index: args.index.clone(),
        num_classes: args.classes,
        domain,
        sample_headers: args.sample_headers,
    })
    .map_err(data_err)?;
    save_dataset(&ds, &args.out).map_err(runtime_err)?;
    eprintln!(
        "wrote {} samples ({}×{}) to {}",
        ds.len(),
        ds.meta.seq_len,
        ds.meta.channels,
        args.out.display()
    );
    Ok(())
}
