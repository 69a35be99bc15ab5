//! The `dephsic` command-line driver.
//!
//! Every subcommand resolves its configuration as CLI flag > `--config` TOML
//! file > built-in default, writes its outputs under `--out`, and records the
//! resolved configuration in `manifest.json` next to them.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use dephsic::checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
use dephsic::dataset_io::{read_dataset, write_dataset};
use dephsic::ensemble::{
    ensemble_average, read_predictions, write_predictions, Modality, StreamPrediction, StreamSpec,
};
use dephsic::kernel::hsic_permutation_test;
use dephsic::model::HsicSign;
use dephsic::skeleton::Dataset;
use dephsic::synthetic::{generate_train_test, SynthesisSpec};
use dephsic::training::{evaluate, fit, metrics_csv, TrainConfig};
use dephsic::LocatedError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "dephsic",
    version,
    about = "Skeleton action recognition with dependency refinement and HSIC"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic train/test pair.
    Generate(GenerateArgs),
    /// Train a model; writes a checkpoint, metrics.csv and test predictions.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Average the softmax scores of one or more prediction files.
    Ensemble(EnsembleArgs),
    /// Label-permutation HSIC test on an embeddings CSV.
    HsicTest(HsicTestArgs),
    /// Write the augmented feature of every sample as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub modality: Option<Modality>,
    #[arg(long, allow_hyphen_values = true)]
    pub hsic_sign: Option<HsicSign>,
    #[arg(long)]
    pub hsic_weight: Option<f64>,
    #[arg(long)]
    pub no_hsic: bool,
    #[arg(long)]
    pub no_distill: bool,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub joints: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub modality: Option<Modality>,
}

#[derive(Debug, Clone, Args)]
pub struct EnsembleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Prediction CSVs written by `train` or `eval`.
    #[arg(long, num_args = 1.., required = true)]
    pub predictions: Vec<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct HsicTestArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// CSV written by `export-embeddings`.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub permutations: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub modality: Option<Modality>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub num_joints: usize,
    pub num_frames: usize,
    pub channels: usize,
    pub noise: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthesisSpec::default();
        Self {
            num_classes: s.num_classes,
            num_joints: s.num_joints,
            num_frames: s.num_frames,
            channels: s.channels,
            noise: s.noise,
            train_per_class: 200,
            test_per_class: 100,
        }
    }
}

impl DataConfig {
    pub fn synthesis(&self) -> SynthesisSpec {
        SynthesisSpec {
            num_classes: self.num_classes,
            num_joints: self.num_joints,
            num_frames: self.num_frames,
            channels: self.channels,
            samples_per_class: self.train_per_class,
            noise: self.noise,
        }
    }
}

/// The `--config` file. Every section is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub modality: Modality,
    pub permutations: usize,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            seed: None,
            modality: Modality::Joint,
            permutations: 200,
            data: DataConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Configuration after applying file and flags; echoed into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub seed: u64,
    pub modality: Modality,
    pub permutations: usize,
    pub data: DataConfig,
    pub train: TrainConfig,
}

pub fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| anyhow!("config {}: {}", path.display(), e.message()))
}

fn resolve(common: &CommonArgs) -> Result<Resolved> {
    let file = load_config(common.config.as_deref())?;
    let seed = common.seed.or(file.seed).unwrap_or(file.train.seed);
    let mut train = file.train;
    train.seed = seed;
    Ok(Resolved {
        seed,
        modality: file.modality,
        permutations: file.permutations,
        data: file.data,
        train,
    })
}

impl TrainOverrides {
    pub fn apply(&self, r: &mut Resolved) {
        let t = &mut r.train;
        if let Some(d) = self.delta {
            t.delta = d;
        }
        if let Some(m) = self.modality {
            r.modality = m;
        }
        if let Some(s) = self.hsic_sign {
            t.hsic_sign = s;
        }
        if let Some(w) = self.hsic_weight {
            t.hsic_weight = w;
        }
        if self.no_hsic {
            t.use_hsic = false;
        }
        if self.no_distill {
            t.use_distill = false;
        }
        if let Some(p) = self.temperature {
            t.temperature = p;
        }
        if let Some(e) = self.epochs {
            t.epochs = e;
        }
        if let Some(b) = self.batch_size {
            t.batch_size = b;
        }
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a Resolved,
    inputs: Vec<String>,
    outputs: Vec<String>,
    warnings: Vec<String>,
}

struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(name.to_string());
        Ok(path)
    }

    fn manifest(
        &mut self,
        command: &str,
        config: &Resolved,
        inputs: &[&Path],
        warnings: Vec<String>,
    ) -> Result<()> {
        let m = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: config.seed,
            config,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: self.written.clone(),
            warnings,
        };
        let json = serde_json::to_string_pretty(&m)? + "\n";
        self.write(MANIFEST, &json)?;
        Ok(())
    }
}

fn located(path: &Path, e: LocatedError) -> anyhow::Error {
    anyhow!("{}:{}: {}", path.display(), e.line, e.message)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(&read_text(path)?).map_err(|e| located(path, e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ensemble(a) => cmd_ensemble(&a),
        Command::HsicTest(a) => cmd_hsic_test(&a),
        Command::ExportEmbeddings(a) => cmd_export_embeddings(&a),
    }
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    let d = &mut cfg.data;
    for (slot, v) in [
        (&mut d.num_classes, a.classes),
        (&mut d.num_joints, a.joints),
        (&mut d.num_frames, a.frames),
        (&mut d.train_per_class, a.train_per_class),
        (&mut d.test_per_class, a.test_per_class),
    ] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(n) = a.noise {
        d.noise = n;
    }
    let d = &cfg.data;
    let (train, test) = generate_train_test(
        &d.synthesis(),
        d.train_per_class,
        d.test_per_class,
        cfg.seed,
    )?;
    let mut out = Outputs::new(&a.common.out)?;
    out.write("train.dataset", &write_dataset(&train))?;
    out.write("test.dataset", &write_dataset(&test))?;
    out.manifest("generate", &cfg, &[], Vec::new())?;
    println!(
        "generated {} train / {} test sequences into {}",
        train.len(),
        test.len(),
        a.common.out.display()
    );
    Ok(())
}

fn stream_id(modality: Modality, delta: f64) -> String {
    StreamSpec { modality, delta }.id()
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    a.overrides.apply(&mut cfg);
    cfg.train.validate()?;
    let modality = cfg.modality;
    let train = modality.apply(&load_dataset(&a.train)?)?;
    let test = match &a.test {
        Some(p) => Some(modality.apply(&load_dataset(p)?)?),
        None => None,
    };
    let mut warnings = Vec::new();
    for d in std::iter::once(&train).chain(test.as_ref()) {
        let zeros = d.sequences.iter().filter(|s| s.is_all_zero()).count();
        if zeros > 0 {
            let w = format!(
                "{zeros} of {} {modality} {} sequences are all-zero",
                d.len(),
                d.split.as_str()
            );
            log::warn!("{w}");
            warnings.push(w);
        }
    }

    let result = fit(&train, test.as_ref(), &cfg.train)?;
    let mut out = Outputs::new(&a.common.out)?;
    let epoch = result.metrics.last().map_or(0, |m| m.epoch + 1);
    out.write(
        "checkpoint.txt",
        &write_checkpoint(
            &result.model,
            CheckpointMeta {
                seed: cfg.seed,
                epoch,
            },
        ),
    )?;
    out.write("metrics.csv", &metrics_csv(&result.metrics))?;
    let mut accuracy = None;
    if let (Some(test), None) = (&test, &result.diverged) {
        let eval = evaluate(&result.model, test)?;
        let pred = StreamPrediction {
            stream_id: stream_id(modality, cfg.train.delta),
            sample_ids: (0..test.len()).collect(),
            scores: eval.scores.clone(),
            labels: test.sequences.iter().map(|s| s.label).collect(),
        };
        out.write("predictions.csv", &write_predictions(&pred)?)?;
        accuracy = Some(eval.accuracy);
    }
    if let Some(d) = &result.diverged {
        warnings.push(format!(
            "diverged at epoch {} step {}: {}",
            d.epoch, d.step, d.reason
        ));
    }
    let mut inputs = vec![a.train.as_path()];
    inputs.extend(a.test.as_deref());
    out.manifest("train", &cfg, &inputs, warnings)?;
    if let Some(d) = &result.diverged {
        bail!(
            "training diverged at epoch {} step {} ({}); last finite checkpoint written",
            d.epoch,
            d.step,
            d.reason
        );
    }
    match accuracy {
        Some(acc) => println!("trained {epoch} epochs, test accuracy {acc:.4}"),
        None => println!("trained {epoch} epochs"),
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<dephsic::checkpoint::Checkpoint> {
    read_checkpoint(&read_text(path)?).map_err(|e| located(path, e))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    if let Some(m) = a.modality {
        cfg.modality = m;
    }
    let model = load_checkpoint(&a.checkpoint)?.model;
    let data = cfg.modality.apply(&load_dataset(&a.data)?)?;
    let eval = evaluate(&model, &data)?;

    let mut out = Outputs::new(&a.common.out)?;
    let mut per_class = String::from("class,count,correct,accuracy\n");
    for (c, acc) in eval.per_class.iter().enumerate() {
        let count = eval.labels.iter().filter(|&&l| l == c).count();
        let correct = eval
            .labels
            .iter()
            .zip(&eval.predictions)
            .filter(|&(&l, &p)| l == c && p == c)
            .count();
        let acc = acc.map_or_else(String::new, |a| a.to_string());
        per_class.push_str(&format!("{c},{count},{correct},{acc}\n"));
    }
    out.write("per_class.csv", &per_class)?;
    let pred = StreamPrediction {
        stream_id: stream_id(cfg.modality, model.base.spec.delta.get()),
        sample_ids: (0..data.len()).collect(),
        scores: eval.scores.clone(),
        labels: data.sequences.iter().map(|s| s.label).collect(),
    };
    out.write("predictions.csv", &write_predictions(&pred)?)?;
    out.write(
        "report.csv",
        &format!("samples,accuracy\n{},{}\n", data.len(), eval.accuracy),
    )?;
    out.manifest("eval", &cfg, &[&a.checkpoint, &a.data], Vec::new())?;
    println!("accuracy {:.4} on {} samples", eval.accuracy, data.len());
    Ok(())
}

pub fn cmd_ensemble(a: &EnsembleArgs) -> Result<()> {
    let cfg = resolve(&a.common)?;
    let streams = a
        .predictions
        .iter()
        .map(|p| read_predictions(&read_text(p)?).map_err(|e| located(p, e)))
        .collect::<Result<Vec<_>>>()?;
    let labels = &streams[0].labels;
    for (s, path) in streams.iter().zip(&a.predictions) {
        if s.labels.len() != labels.len() {
            bail!(
                "{}: {} samples, expected {}",
                path.display(),
                s.labels.len(),
                labels.len()
            );
        }
        if &s.labels != labels {
            bail!(
                "{}: labels disagree with {}",
                path.display(),
                a.predictions[0].display()
            );
        }
    }
    let fused = ensemble_average(&streams)?;

    let k = fused.scores.ncols();
    let mut csv = String::from("sample_id");
    for c in 0..k {
        csv.push_str(&format!(",score_{c}"));
    }
    csv.push_str(",prediction,label\n");
    let mut correct = 0;
    let mut labeled = 0;
    for (i, row) in fused.scores.rows().into_iter().enumerate() {
        csv.push_str(&streams[0].sample_ids[i].to_string());
        for v in row {
            csv.push_str(&format!(",{v}"));
        }
        let label = labels[i].map_or_else(String::new, |l| l.to_string());
        csv.push_str(&format!(",{},{label}\n", fused.predictions[i]));
        if let Some(l) = labels[i] {
            labeled += 1;
            correct += usize::from(l == fused.predictions[i]);
        }
    }
    let mut out = Outputs::new(&a.common.out)?;
    out.write("fused.csv", &csv)?;

    let accuracy = |scores: &Array2<f64>| -> Option<f64> {
        (labeled > 0).then(|| {
            let hits = scores
                .rows()
                .into_iter()
                .zip(labels)
                .filter(|(row, l)| {
                    l.is_some() && Some(dephsic::training::argmax(row.view())) == **l
                })
                .count();
            hits as f64 / labeled as f64
        })
    };
    let fmt = |a: Option<f64>| a.map_or_else(String::new, |a| a.to_string());
    let mut report = String::from("stream_id,samples,accuracy\n");
    for s in &streams {
        report.push_str(&format!(
            "{},{},{}\n",
            s.stream_id,
            labels.len(),
            fmt(accuracy(&s.scores))
        ));
    }
    let fused_acc = (labeled > 0).then(|| correct as f64 / labeled as f64);
    report.push_str(&format!("ensemble,{},{}\n", labels.len(), fmt(fused_acc)));
    out.write("report.csv", &report)?;
    let inputs: Vec<&Path> = a.predictions.iter().map(PathBuf::as_path).collect();
    out.manifest("ensemble", &cfg, &inputs, Vec::new())?;
    match fused_acc {
        Some(acc) => println!("fused {} streams, accuracy {acc:.4}", streams.len()),
        None => println!("fused {} streams", streams.len()),
    }
    Ok(())
}

/// Parses `sample_id,label,<features...>`.
pub fn read_embeddings(path: &Path) -> Result<(Array2<f64>, Vec<usize>)> {
    let text = read_text(path)?;
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| located(path, LocatedError::new(1, e.to_string())))?;
    if header.len() < 3 || &header[0] != "sample_id" || &header[1] != "label" {
        return Err(located(
            path,
            LocatedError::new(1, "expected header sample_id,label,<features>"),
        ));
    }
    let dim = header.len() - 2;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| located(path, LocatedError::new(line, e.to_string())))?;
        let label = record[1].trim().parse::<usize>().map_err(|_| {
            located(
                path,
                LocatedError::new(line, format!("invalid label '{}'", &record[1])),
            )
        })?;
        labels.push(label);
        for f in record.iter().skip(2) {
            let v = f.trim().parse::<f64>().map_err(|_| {
                located(
                    path,
                    LocatedError::new(line, format!("invalid value '{f}'")),
                )
            })?;
            values.push(v);
        }
    }
    let n = labels.len();
    Ok((Array2::from_shape_vec((n, dim), values)?, labels))
}

pub fn cmd_hsic_test(a: &HsicTestArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    if let Some(p) = a.permutations {
        cfg.permutations = p;
    }
    let (features, labels) = read_embeddings(&a.embeddings)?;
    let test = hsic_permutation_test(
        features.view(),
        &labels,
        &cfg.train.matern,
        cfg.permutations,
        cfg.seed,
    )?;
    let mut out = Outputs::new(&a.common.out)?;
    out.write(
        "hsic.csv",
        &format!(
            "samples,permutations,statistic,p_value\n{},{},{},{}\n",
            labels.len(),
            cfg.permutations,
            test.statistic,
            test.p_value
        ),
    )?;
    out.manifest("hsic-test", &cfg, &[&a.embeddings], Vec::new())?;
    println!("hsic {:e}, p-value {}", test.statistic, test.p_value);
    Ok(())
}

pub fn cmd_export_embeddings(a: &ExportArgs) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    if let Some(m) = a.modality {
        cfg.modality = m;
    }
    let model = load_checkpoint(&a.checkpoint)?.model;
    let data = cfg.modality.apply(&load_dataset(&a.data)?)?;
    let mut csv = String::new();
    let mut dim = None;
    let seqs: Vec<_> = data.sequences.iter().collect();
    for (c, chunk) in seqs.chunks(64).enumerate() {
        for (i, f) in model.features(chunk)?.into_iter().enumerate() {
            let d = *dim.get_or_insert_with(|| {
                csv.push_str("sample_id,label");
                for j in 0..f.z_hat.len() {
                    csv.push_str(&format!(",zhat_{j}"));
                }
                csv.push('\n');
                f.z_hat.len()
            });
            debug_assert_eq!(d, f.z_hat.len());
            let id = c * 64 + i;
            let label = seqs[id].label.map_or_else(String::new, |l| l.to_string());
            csv.push_str(&format!("{id},{label}"));
            for v in &f.z_hat {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
    }
    if dim.is_none() {
        bail!("{}: dataset is empty", a.data.display());
    }
    let mut out = Outputs::new(&a.common.out)?;
    out.write("embeddings.csv", &csv)?;
    out.manifest(
        "export-embeddings",
        &cfg,
        &[&a.checkpoint, &a.data],
        Vec::new(),
    )?;
    println!(
        "exported {} embeddings of dimension {}",
        data.len(),
        dim.unwrap_or(0)
    );
    Ok(())
}

/// Collapses a (possibly multi-line) error message onto one line, dropping
/// clap's usage and help hints.
pub fn one_line(message: &str) -> String {
    let parts: Vec<&str> = message
        .lines()
        .map(str::trim)
        .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
        .filter(|l| !l.is_empty())
        .collect();
    if parts.is_empty() {
        return "unknown error".to_string();
    }
    parts.join(" ").trim_start_matches("error: ").to_string()
}
