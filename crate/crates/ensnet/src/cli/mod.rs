//! Command-line entry point wiring data, architectures, training, fusion,
//! and metrics into reproducible experiments.
//!
//! Exit codes are a stable scripting contract: 0 success, 2 config error,
//! 3 training divergence, 4 missing artifact, 5 data inconsistency.

mod config;

pub use config::{ConfigError, DataSource, ExperimentConfig};

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::arch::{Family, Model};
use crate::checkpoint::{load_checkpoint, CheckpointError};
use crate::data::{
    self, load_annotated_dataset, parse_annotations, save_image, synthesize_dataset,
    train_test_split, DataError, DatasetSplit, GrayImage, CLASS_NAMES,
};
use crate::ensemble::{
    argmax_class, fuse_probability_files, fuse_sum, EnsembleError, ProbabilityFile, ProbVector,
};
use crate::metrics::{compute_report, format_table, report_csv, ConfusionMatrix, MetricReport};
use crate::rng::derive_seed;
use crate::train::{evaluate_model, train_model, TrainConfig, TrainError};

/// Families in reporting order.
pub const FAMILY_ORDER: [Family; 3] = [Family::DenseNet, Family::EfficientNet, Family::Xception];

/// Row label used for each family in tables and file names.
pub fn display_name(family: Family) -> &'static str {
    match family {
        Family::DenseNet => "DenseNet",
        Family::EfficientNet => "EfficientNet",
        Family::Xception => "XceptionNet",
    }
}

const ENSEMBLE_ROW: &str = "Ensembling";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Diverged(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("data inconsistency: {0}")]
    DataInconsistency(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::MissingArtifact(_) => 4,
            CliError::DataInconsistency(_) => 5,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::MissingArtifact(e.to_string()),
            other => CliError::DataInconsistency(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::MissingArtifact(e.to_string()),
            other => CliError::DataInconsistency(other.to_string()),
        }
    }
}

impl From<EnsembleError> for CliError {
    fn from(e: EnsembleError) -> Self {
        CliError::DataInconsistency(e.to_string())
    }
}

impl From<crate::arch::SpecError> for CliError {
    fn from(e: crate::arch::SpecError) -> Self {
        CliError::Config(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "ensnet", version, about = "Train, evaluate, and fuse small CNN ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the three models and write checkpoints plus a training log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the experiment seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate checkpoints on the test split and write metric tables,
    /// probability files, and confusion matrices.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fuse per-model probability CSVs into predictions without models.
    Fuse {
        /// Probability CSV files (sample_id,p0,...,pK-1).
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate a synthetic dataset as PGM images, an annotation CSV, and a
    /// dataset cache.
    SynthData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a metrics CSV as the fixed-width results table.
    Report { file: PathBuf },
}

/// Parses arguments and dispatches; the process exit code follows the
/// documented contract.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, seed, out } => {
            load_config(&config, seed, out).and_then(|cfg| cmd_train(&cfg))
        }
        Command::Eval { config, seed, out } => {
            load_config(&config, seed, out).and_then(|cfg| cmd_eval(&cfg))
        }
        Command::Fuse { files, out } => cmd_fuse(&files, &out),
        Command::SynthData { config, seed, out } => {
            load_config(&config, seed, out).and_then(|cfg| cmd_synth_data(&cfg))
        }
        Command::Report { file } => cmd_report(&file).map(|table| print!("{table}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn load_config(
    path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<ExperimentConfig, CliError> {
    let mut config = ExperimentConfig::from_file(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(out) = out {
        config.output_dir = out;
    }
    Ok(config)
}

// Stream tags for deriving per-purpose seeds from the experiment seed.
const DATA_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;
const INIT_STREAM: u64 = 10;
const SHUFFLE_STREAM: u64 = 20;

fn family_index(family: Family) -> u64 {
    FAMILY_ORDER.iter().position(|&f| f == family).unwrap() as u64
}

fn checkpoint_path(config: &ExperimentConfig, family: Family) -> PathBuf {
    config.output_dir.join(format!("{family}.ckpt"))
}

/// Builds the dataset named by the config and splits it. Both halves are
/// fully determined by the config plus the experiment seed.
pub fn prepare_split(config: &ExperimentConfig) -> Result<DatasetSplit, CliError> {
    let samples = match &config.data_source {
        DataSource::Synthetic { per_class } => {
            let seed = config
                .data_seed
                .unwrap_or_else(|| derive_seed(config.seed, DATA_STREAM));
            synthesize_dataset(seed, *per_class, config.resolution)
        }
        DataSource::Files { dir, annotations } => {
            let text = std::fs::read_to_string(annotations).map_err(|e| DataError::Io {
                path: annotations.display().to_string(),
                source: e,
            })?;
            let annotations = parse_annotations(&text)?;
            load_annotated_dataset(dir, &annotations, config.resolution)?
        }
    };
    let split_seed = derive_seed(config.seed, SPLIT_STREAM);
    Ok(train_test_split(samples, config.test_fraction, split_seed)?)
}

fn build_models(config: &ExperimentConfig) -> Result<Vec<(Family, Model)>, CliError> {
    let mut models = Vec::new();
    for family in FAMILY_ORDER {
        let spec = config.spec_for(family);
        let seed = derive_seed(config.seed, INIT_STREAM + family_index(family));
        models.push((family, spec.build(seed)?));
    }
    Ok(models)
}

fn write_text(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content)
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))
}

fn create_out_dir(config: &ExperimentConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&config.output_dir).map_err(|e| {
        CliError::Other(format!(
            "cannot create output directory {}: {e}",
            config.output_dir.display()
        ))
    })
}

/// Trains the three models sequentially and writes three checkpoints plus a
/// per-epoch training log. Nothing is written until the config, dataset,
/// and model graphs have all validated.
pub fn cmd_train(config: &ExperimentConfig) -> Result<(), CliError> {
    let split = prepare_split(config)?;
    let models = build_models(config)?;
    create_out_dir(config)?;

    let mut log = String::from("model,epoch,loss,accuracy\n");
    for (family, mut model) in models {
        let train_config = TrainConfig {
            learning_rate: config.learning_rate,
            epochs: config.epochs,
            batch_size: config.batch_size,
            seed: derive_seed(config.seed, SHUFFLE_STREAM + family_index(family)),
            shuffle: config.shuffle,
            checkpoint_path: Some(checkpoint_path(config, family)),
        };
        let report = train_model(&mut model, &split.train, &train_config)?;
        for (epoch, (loss, acc)) in report
            .epoch_losses
            .iter()
            .zip(&report.epoch_accuracies)
            .enumerate()
        {
            log.push_str(&format!("{},{},{},{}\n", display_name(family), epoch, loss, acc));
        }
        println!(
            "trained {} ({} parameters): final loss {:.6}, train accuracy {:.2}%, {:.1}s",
            display_name(family),
            model.count_parameters(),
            report.epoch_losses.last().unwrap(),
            report.epoch_accuracies.last().unwrap() * 100.0,
            report.elapsed_seconds
        );
    }
    write_text(&config.output_dir.join("training_log.csv"), &log)?;
    Ok(())
}

fn probability_csv(ids: &[String], probs: &[ProbVector]) -> String {
    let k = probs.first().map_or(0, |p| p.classes());
    let mut out = String::from("sample_id");
    for i in 0..k {
        out.push_str(&format!(",p{i}"));
    }
    out.push('\n');
    for (id, pv) in ids.iter().zip(probs) {
        out.push_str(id);
        for v in pv.values() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Evaluates the three checkpoints plus their fusion on the test split.
/// Writes the metrics table (text and CSV), per-model probability CSVs, and
/// one confusion CSV per row.
pub fn cmd_eval(config: &ExperimentConfig) -> Result<(), CliError> {
    let split = prepare_split(config)?;
    let num_classes = config.num_classes;

    let mut models = Vec::new();
    for family in FAMILY_ORDER {
        let path = checkpoint_path(config, family);
        if !path.exists() {
            return Err(CliError::MissingArtifact(format!(
                "checkpoint {} not found; run `ensnet train` first",
                path.display()
            )));
        }
        models.push((family, load_checkpoint(&path, &config.spec_for(family))?));
    }
    create_out_dir(config)?;

    let ids: Vec<String> = split.test.iter().map(|s| s.source_id.clone()).collect();
    let truth: Vec<usize> = split.test.iter().map(|s| s.label).collect();

    let mut rows: Vec<(String, MetricReport)> = Vec::new();
    let mut confusions: Vec<(String, ConfusionMatrix)> = Vec::new();
    let mut per_model_probs: Vec<Vec<ProbVector>> = Vec::new();
    for (family, model) in &models {
        let eval = evaluate_model(model, &split.test)?;
        let cm = ConfusionMatrix::from_pairs(
            num_classes,
            truth.iter().copied().zip(eval.predictions.iter().copied()),
        )
        .map_err(|e| CliError::DataInconsistency(e.to_string()))?;
        rows.push((
            display_name(*family).to_string(),
            compute_report(&cm).map_err(|e| CliError::DataInconsistency(e.to_string()))?,
        ));
        confusions.push((family.to_string(), cm));
        write_text(
            &config.output_dir.join(format!("probs_{family}.csv")),
            &probability_csv(&ids, &eval.probabilities),
        )?;
        per_model_probs.push(eval.probabilities);
    }

    // Fused row: sum the per-model distributions sample by sample.
    let mut fused_predictions = Vec::with_capacity(ids.len());
    for i in 0..ids.len() {
        let sample_probs: Vec<ProbVector> =
            per_model_probs.iter().map(|p| p[i].clone()).collect();
        fused_predictions.push(argmax_class(&fuse_sum(&sample_probs)?));
    }
    let fused_cm = ConfusionMatrix::from_pairs(
        num_classes,
        truth.iter().copied().zip(fused_predictions.iter().copied()),
    )
    .map_err(|e| CliError::DataInconsistency(e.to_string()))?;
    rows.push((
        ENSEMBLE_ROW.to_string(),
        compute_report(&fused_cm).map_err(|e| CliError::DataInconsistency(e.to_string()))?,
    ));
    confusions.push(("ensembling".to_string(), fused_cm));

    let table = format_table(&rows);
    print!("{table}");
    write_text(&config.output_dir.join("metrics.txt"), &table)?;
    write_text(&config.output_dir.join("metrics.csv"), &report_csv(&rows))?;
    for (name, cm) in &confusions {
        write_text(
            &config.output_dir.join(format!("confusion_{name}.csv")),
            &cm.to_csv(),
        )?;
    }
    Ok(())
}

/// Fuses probability CSVs produced by `eval` (or any external source) into
/// a predictions CSV.
pub fn cmd_fuse(files: &[PathBuf], out_dir: &Path) -> Result<(), CliError> {
    if files.is_empty() {
        return Err(CliError::Config("fuse needs at least one file".into()));
    }
    let mut parsed = Vec::with_capacity(files.len());
    for path in files {
        if !path.exists() {
            return Err(CliError::MissingArtifact(format!(
                "probability file {} not found",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Other(format!("cannot read {}: {e}", path.display())))?;
        parsed.push(ProbabilityFile::parse(&text)?);
    }
    let fused = fuse_probability_files(&parsed)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Other(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut csv = String::from("sample_id,prediction\n");
    for (id, class) in &fused {
        csv.push_str(&format!("{id},{class}\n"));
    }
    write_text(&out_dir.join("fused_predictions.csv"), &csv)?;
    println!("fused {} files over {} samples", files.len(), fused.len());
    Ok(())
}

/// Generates the synthetic dataset and materializes it three ways: PGM
/// images, the annotation CSV that reproduces the patches via `extract_roi`,
/// and a binary dataset cache.
pub fn cmd_synth_data(config: &ExperimentConfig) -> Result<(), CliError> {
    let per_class = match &config.data_source {
        DataSource::Synthetic { per_class } => *per_class,
        DataSource::Files { .. } => {
            return Err(CliError::Config(
                "synth-data needs data.source = synthetic".into(),
            ));
        }
    };
    let seed = config
        .data_seed
        .unwrap_or_else(|| derive_seed(config.seed, DATA_STREAM));
    let resolution = config.resolution;
    let samples = synthesize_dataset(seed, per_class, resolution);

    create_out_dir(config)?;
    let image_dir = config.output_dir.join("images");
    std::fs::create_dir_all(&image_dir)
        .map_err(|e| CliError::Other(format!("cannot create {}: {e}", image_dir.display())))?;

    let mut annotations = String::from("image,cx,cy,radius,label\n");
    for sample in &samples {
        let image = GrayImage {
            width: resolution,
            height: resolution,
            pixels: sample.patch.data(),
        };
        let file = format!("{}.pgm", sample.source_id);
        save_image(image_dir.join(&file), &image)?;
        annotations.push_str(&format!(
            "images/{},{},{},{},{}\n",
            file,
            resolution / 2,
            resolution / 2,
            resolution / 2,
            CLASS_NAMES[sample.label]
        ));
    }
    write_text(&config.output_dir.join("annotations.csv"), &annotations)?;
    data::save_dataset(config.output_dir.join("dataset.ensd"), &samples)?;
    println!(
        "wrote {} samples to {}",
        samples.len(),
        config.output_dir.display()
    );
    Ok(())
}

/// Renders a metrics CSV (as written by `eval`) back into the fixed-width
/// table.
pub fn cmd_report(path: &Path) -> Result<String, CliError> {
    if !path.exists() {
        return Err(CliError::MissingArtifact(format!(
            "metrics file {} not found",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Other(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "model,accuracy,precision,recall,f1" {
        return Err(CliError::DataInconsistency(format!(
            "unexpected metrics header {header:?}"
        )));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(CliError::DataInconsistency(format!(
                "line {}: expected 5 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let mut values = [0.0; 4];
        for (slot, field) in values.iter_mut().zip(&fields[1..]) {
            *slot = field.trim().parse().map_err(|_| {
                CliError::DataInconsistency(format!("line {}: bad value {field:?}", lineno + 2))
            })?;
        }
        rows.push((
            fields[0].to_string(),
            MetricReport {
                accuracy: values[0],
                macro_precision: values[1],
                macro_recall: values[2],
                macro_f1: values[3],
                per_class_precision: Vec::new(),
                per_class_recall: Vec::new(),
                per_class_f1: Vec::new(),
            },
        ));
    }
    if rows.is_empty() {
        return Err(CliError::DataInconsistency("no metric rows".into()));
    }
    Ok(format_table(&rows))
}
