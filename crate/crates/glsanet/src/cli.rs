//! Command-line front end: dataset generation, the training pipeline
//! (base model -> grid targets -> GLSA -> classifier), saliency extraction,
//! evaluation, and cost reports.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration.

use crate::classifier::{
    self, baseline_variants, evaluate, train_classifier, DualBranchModel, FitOpts, Variant,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::glsa::{GLSAModel, TrainOpts};
use crate::grid::{self, ObjectivenessTargets};
use crate::io::dataset::{load_dataset, Sample};
use crate::io::metrics::MetricRecord;
use crate::io::{atomic_write, checkpoint, metrics, pnm};
use crate::rng::derive_seed;
use crate::saliency;
use crate::synth::{self, ClassSpec};
use crate::tensor::{ParamSet, Tape, Tensor, TensorId};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "glsanet",
    version,
    about = "Saliency-guided grid attention image classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for all outputs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Single,
    Dbn,
    DbnGlsa,
}

impl VariantArg {
    fn as_variant(self) -> Variant {
        match self {
            VariantArg::Single => Variant::Single,
            VariantArg::Dbn => Variant::Dbn,
            VariantArg::DbnGlsa => Variant::DbnGlsa,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: `train/` and `test/` PPM trees, or a
    /// planted-bright-patch set with grid ground truth.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of classes.
        #[arg(long, default_value_t = 6)]
        classes: usize,
        /// Training samples per majority class.
        #[arg(long, default_value_t = 200)]
        majority: usize,
        /// Training samples per minority class.
        #[arg(long, default_value_t = 20)]
        minority: usize,
        /// How many trailing classes are minority classes.
        #[arg(long, default_value_t = 2)]
        minority_classes: usize,
        /// Test samples per class.
        #[arg(long, default_value_t = 50)]
        test_per_class: usize,
        /// Emit planted-bright-patch images plus `truth.tsv` instead.
        #[arg(long)]
        planted: bool,
        /// Number of planted images (planted mode only).
        #[arg(long, default_value_t = 250)]
        count: usize,
    },
    /// Train the base convolution classifier later used as the frozen
    /// saliency scorer.
    TrainBase {
        #[command(flatten)]
        common: Common,
        /// Dataset root (one subdirectory of PPMs per class).
        #[arg(long)]
        data: PathBuf,
    },
    /// Build per-grid objectiveness targets from base-model saliency maps.
    BuildGlsaData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Base-model checkpoint from `train-base`.
        #[arg(long)]
        base: PathBuf,
    },
    /// Train the grid-wise local self-attention module.
    TrainGlsa {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Targets checkpoint from `build-glsa-data`.
        #[arg(long)]
        targets: PathBuf,
    },
    /// Train a classifier variant.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// GLSA checkpoint from `train-glsa` (required for dbn-glsa).
        #[arg(long)]
        glsa: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = VariantArg::DbnGlsa)]
        variant: VariantArg,
    },
    /// Write one saliency PGM per dataset image using a base-model checkpoint.
    ExtractSaliency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Base-model checkpoint from `train-base`.
        #[arg(long)]
        model: PathBuf,
        /// Fixed class index for the score (default: predicted class).
        #[arg(long)]
        class: Option<usize>,
    },
    /// Evaluate a trained classifier checkpoint, writing metric records.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Classifier checkpoint from `train-classifier`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = VariantArg::DbnGlsa)]
        variant: VariantArg,
    },
    /// Report measured and closed-form MUL-ADD counts for all variants.
    Flops {
        #[command(flatten)]
        common: Common,
    },
}

pub fn run_from_env() -> i32 {
    run(std::env::args().collect())
}

/// Parse and dispatch. Returns the process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Error::Config(msg)) => {
            eprintln!("error: invalid configuration: {msg}");
            3
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            common,
            classes,
            majority,
            minority,
            minority_classes,
            test_per_class,
            planted,
            count,
        } => {
            let (config, seed) = load_config(&common)?;
            if planted {
                gen_planted(&common.out, &config, seed, count)
            } else {
                gen_classification(
                    &common.out,
                    &config,
                    seed,
                    classes,
                    majority,
                    minority,
                    minority_classes,
                    test_per_class,
                )
            }
        }
        Command::TrainBase { common, data } => {
            let (config, seed) = load_config(&common)?;
            train_base(&common.out, &config, seed, &data)
        }
        Command::BuildGlsaData { common, data, base } => {
            let (config, _) = load_config(&common)?;
            build_glsa_data(&common.out, &config, &data, &base)
        }
        Command::TrainGlsa { common, data, targets } => {
            let (config, seed) = load_config(&common)?;
            train_glsa(&common.out, &config, seed, &data, &targets)
        }
        Command::TrainClassifier { common, data, glsa, variant } => {
            let (config, seed) = load_config(&common)?;
            cmd_train_classifier(&common.out, &config, seed, &data, glsa.as_deref(), variant)
        }
        Command::ExtractSaliency { common, data, model, class } => {
            let (config, _) = load_config(&common)?;
            extract_saliency(&common.out, &config, &data, &model, class)
        }
        Command::Eval { common, data, model, variant } => {
            let (config, seed) = load_config(&common)?;
            cmd_eval(&common.out, &config, seed, &data, &model, variant)
        }
        Command::Flops { common } => {
            let (config, seed) = load_config(&common)?;
            cmd_flops(&common.out, &config, seed)
        }
    }
}

fn load_config(common: &Common) -> Result<(RunConfig, u64)> {
    let config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = common.seed.unwrap_or(config.seed);
    Ok((config, seed))
}

#[allow(clippy::too_many_arguments)]
fn gen_classification(
    out: &Path,
    config: &RunConfig,
    seed: u64,
    classes: usize,
    majority: usize,
    minority: usize,
    minority_classes: usize,
    test_per_class: usize,
) -> Result<()> {
    if minority_classes > classes {
        return Err(Error::Config(format!(
            "minority_classes {minority_classes} exceeds classes {classes}"
        )));
    }
    let mut per_class = vec![majority; classes];
    for count in per_class.iter_mut().skip(classes - minority_classes) {
        *count = minority;
    }
    let train = ClassSpec { classes, per_class, image_size: config.input_size, seed };
    let test = ClassSpec {
        classes,
        per_class: vec![test_per_class; classes],
        image_size: config.input_size,
        seed: derive_seed(seed, &[1]),
    };
    synth::write_ppm_tree(&out.join("train"), &synth::generate_classification(&train))?;
    synth::write_ppm_tree(&out.join("test"), &synth::generate_classification(&test))?;
    println!(
        "wrote {} train and {} test images under {}",
        train.per_class.iter().sum::<usize>(),
        test.per_class.iter().sum::<usize>(),
        out.display()
    );
    Ok(())
}

fn gen_planted(out: &Path, config: &RunConfig, seed: u64, count: usize) -> Result<()> {
    let images = synth::generate_planted(count, config.input_size, config.n, seed);
    let mut truth = String::new();
    for (i, (image, grid)) in images.iter().enumerate() {
        let name = format!("img{i:04}.ppm");
        let (w, h, rgb) = pnm::tensor_to_rgb(image)?;
        atomic_write(&out.join("planted/all").join(&name), &pnm::encode_ppm(&rgb, w, h))?;
        truth.push_str(&format!("{name}\t{grid}\n"));
    }
    atomic_write(&out.join("planted/truth.tsv"), truth.as_bytes())?;
    println!("wrote {count} planted images under {}", out.join("planted").display());
    Ok(())
}

fn labeled(samples: &[Sample]) -> Vec<(Tensor<f32>, usize)> {
    samples.iter().map(|s| (s.image.clone(), s.label)).collect()
}

fn fit_opts(config: &RunConfig, seed: u64) -> FitOpts {
    FitOpts {
        epochs: config.epochs,
        batch_size: config.batch_size,
        lr: config.lr,
        momentum: config.momentum,
        seed,
    }
}

fn build_model(
    config: &RunConfig,
    variant: Variant,
    glsa: Option<GLSAModel>,
    num_classes: usize,
    seed: u64,
) -> Result<DualBranchModel> {
    DualBranchModel::new(
        variant,
        config.backbone_config(),
        glsa,
        num_classes,
        &config.grid_spec(),
        config.local_aggregation,
        seed,
    )
}

fn train_base(out: &Path, config: &RunConfig, seed: u64, data: &Path) -> Result<()> {
    let (manifest, samples) = load_dataset(data)?;
    check_input_size(config, manifest.image_height, manifest.image_width)?;
    let mut model = build_model(config, Variant::Single, None, manifest.class_names.len(), seed)?;
    let history =
        train_classifier(&mut model, &labeled(&samples), &config.grid_spec(), &fit_opts(config, seed))?;
    print_history(&history);
    let path = out.join("base.ckpt");
    checkpoint::save(&model.checkpoint_params(), &path)?;
    println!("saved base model to {}", path.display());
    Ok(())
}

/// Key for a sample's targets inside the targets checkpoint.
fn target_key(root: &Path, sample: &Sample) -> String {
    let rel = sample.path.strip_prefix(root).unwrap_or(&sample.path);
    format!("targets.{}", rel.to_string_lossy())
}

fn build_glsa_data(out: &Path, config: &RunConfig, data: &Path, base: &Path) -> Result<()> {
    let (manifest, samples) = load_dataset(data)?;
    check_input_size(config, manifest.image_height, manifest.image_width)?;
    let mut model = build_model(config, Variant::Single, None, manifest.class_names.len(), 0)?;
    model.load_checkpoint_params(&checkpoint::load(base)?)?;

    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let forward = |tape: &mut Tape<f32>, img: TensorId| model.logits_from_image_node(tape, img);
    let pairs = grid::build_glsa_dataset(
        forward,
        &images,
        config.n,
        config.tau,
        config.xo_mode.as_score_select(),
    )?;

    let mut table = ParamSet::new();
    for (sample, (_, targets)) in samples.iter().zip(&pairs) {
        table.insert(&target_key(data, sample), targets.as_tensor())?;
    }
    let path = out.join("glsa_targets.ckpt");
    checkpoint::save(&table, &path)?;
    let positives: usize =
        pairs.iter().map(|(_, t)| t.values.iter().filter(|&&v| v == 1).count()).sum();
    println!(
        "wrote {} target vectors ({positives} positive grids) to {}",
        pairs.len(),
        path.display()
    );
    Ok(())
}

fn train_glsa(out: &Path, config: &RunConfig, seed: u64, data: &Path, targets: &Path) -> Result<()> {
    let (manifest, samples) = load_dataset(data)?;
    check_input_size(config, manifest.image_height, manifest.image_width)?;
    let table = checkpoint::load(targets)?;
    let n2 = config.n * config.n;
    let dataset: Vec<(Tensor<f32>, ObjectivenessTargets)> = samples
        .iter()
        .map(|sample| {
            let key = target_key(data, sample);
            let tensor = table.get(&key).ok_or_else(|| {
                Error::Data(format!("no targets for {key:?} in {}", targets.display()))
            })?;
            if tensor.numel() != n2 {
                return Err(Error::Dimension(format!(
                    "targets for {key:?} have {} entries, expected N^2 = {n2}",
                    tensor.numel()
                )));
            }
            let values: Vec<u8> = tensor.data().iter().map(|&v| u8::from(v > 0.5)).collect();
            let source_scores = tensor.data().to_vec();
            Ok((sample.image.clone(), ObjectivenessTargets { values, source_scores }))
        })
        .collect::<Result<_>>()?;

    let mut model = GLSAModel::new(config.glsa_config(), seed)?;
    let opts = TrainOpts {
        epochs: config.epochs,
        batch_size: config.batch_size,
        lr: config.lr,
        momentum: config.momentum,
        seed,
    };
    let history = model.train(&dataset, &opts)?;
    for (epoch, loss) in history.iter().enumerate() {
        println!("epoch {:>2}: bce {loss:.4}", epoch + 1);
    }
    let path = out.join("glsa.ckpt");
    checkpoint::save(&model.params, &path)?;
    println!("saved GLSA model to {}", path.display());
    Ok(())
}

fn cmd_train_classifier(
    out: &Path,
    config: &RunConfig,
    seed: u64,
    data: &Path,
    glsa: Option<&Path>,
    variant: VariantArg,
) -> Result<()> {
    let (manifest, samples) = load_dataset(data)?;
    check_input_size(config, manifest.image_height, manifest.image_width)?;
    let variant = variant.as_variant();
    let glsa_model = match (variant, glsa) {
        (Variant::DbnGlsa, Some(path)) => {
            let mut m = GLSAModel::new(config.glsa_config(), seed)?;
            m.load_params(&checkpoint::load(path)?)?;
            Some(m)
        }
        (Variant::DbnGlsa, None) => {
            return Err(Error::Config("dbn-glsa training requires --glsa <checkpoint>".into()))
        }
        _ => None,
    };
    let mut model = build_model(config, variant, glsa_model, manifest.class_names.len(), seed)?;
    let history =
        train_classifier(&mut model, &labeled(&samples), &config.grid_spec(), &fit_opts(config, seed))?;
    print_history(&history);
    let path = out.join("model.ckpt");
    checkpoint::save(&model.checkpoint_params(), &path)?;
    println!("saved {} model to {}", variant.as_str(), path.display());
    Ok(())
}

fn print_history(history: &classifier::FitHistory) {
    for (epoch, (loss, acc)) in history.loss.iter().zip(&history.accuracy).enumerate() {
        println!("epoch {:>2}: loss {loss:.4}  train top-1 {acc:.2}%", epoch + 1);
    }
}

fn extract_saliency(
    out: &Path,
    config: &RunConfig,
    data: &Path,
    model_path: &Path,
    class: Option<usize>,
) -> Result<()> {
    let (manifest, samples) = load_dataset(data)?;
    check_input_size(config, manifest.image_height, manifest.image_width)?;
    let mut model = build_model(config, Variant::Single, None, manifest.class_names.len(), 0)?;
    model.load_checkpoint_params(&checkpoint::load(model_path)?)?;
    for sample in &samples {
        let forward = |tape: &mut Tape<f32>, img: TensorId| model.logits_from_image_node(tape, img);
        let ig = saliency::input_gradient(forward, &sample.image, class)?;
        let map = saliency::saliency_map(&ig.grad, ig.class_index)?;
        let stem = sample.path.file_stem().unwrap_or_default().to_string_lossy();
        let class_dir = manifest.class_names[sample.label].clone();
        saliency::write_pgm(&map, &out.join(class_dir).join(format!("{stem}.saliency.pgm")))?;
    }
    println!("wrote {} saliency maps under {}", samples.len(), out.display());
    Ok(())
}

fn cmd_eval(
    out: &Path,
    config: &RunConfig,
    seed: u64,
    data: &Path,
    model_path: &Path,
    variant: VariantArg,
) -> Result<()> {
    let (manifest, samples) = load_dataset(data)?;
    check_input_size(config, manifest.image_height, manifest.image_width)?;
    let variant = variant.as_variant();
    let glsa_model = match variant {
        Variant::DbnGlsa => Some(GLSAModel::new(config.glsa_config(), seed)?),
        _ => None,
    };
    let mut model = build_model(config, variant, glsa_model, manifest.class_names.len(), seed)?;
    model.load_checkpoint_params(&checkpoint::load(model_path)?)?;
    let report = evaluate(&model, &labeled(&samples), &config.grid_spec())?;
    print_report(variant.as_str(), &report);
    let record = to_record(variant.as_str(), &report, seed, &config.hash());
    metrics::write_records(&[record], &out.join("metrics.jsonl"))?;
    println!("wrote metrics to {}", out.join("metrics.jsonl").display());
    Ok(())
}

fn to_record(
    model: &str,
    report: &classifier::EvalReport,
    seed: u64,
    config_hash: &str,
) -> MetricRecord {
    MetricRecord {
        model: model.to_string(),
        per_class_top1: report.per_class_top1.clone(),
        top1: report.overall_top1,
        mul_add: report.mul_add,
        ntp_bytes: report.ntp_bytes,
        tp_bytes: report.tp_bytes,
        seed,
        config_hash: config_hash.to_string(),
    }
}

fn print_report(name: &str, report: &classifier::EvalReport) {
    let per_class: Vec<String> = report.per_class_top1.iter().map(|a| format!("{a:.2}")).collect();
    println!(
        "{name}: per-class top-1 [{}]  top-1 {:.2}%  MUL-ADD {:.4} G  NTPs {:.2} MB  TPs {:.2} MB",
        per_class.join(", "),
        report.overall_top1,
        report.mul_add as f64 / 1e9,
        report.ntp_bytes as f64 / 1e6,
        report.tp_bytes as f64 / 1e6,
    );
}

#[derive(Serialize)]
struct FlopsRecord {
    model: String,
    measured_mul_add: u64,
    closed_form_mul_add: u64,
    breakdown: BTreeMap<String, u64>,
    tp_bytes: u64,
    ntp_bytes: u64,
}

fn cmd_flops(out: &Path, config: &RunConfig, seed: u64) -> Result<()> {
    let glsa = GLSAModel::new(config.glsa_config(), seed)?;
    let models = baseline_variants(
        &config.backbone_config(),
        &glsa,
        6,
        &config.grid_spec(),
        config.local_aggregation,
        seed,
    )?;
    let image = Tensor::zeros(vec![3, config.input_size, config.input_size]);
    let spec = config.grid_spec();
    let mut lines = String::new();
    for model in &models {
        let mut tape = Tape::<f32>::new();
        let _ = model.forward_logits_on_tape(&mut tape, &image, &spec, false)?;
        let closed = model.mul_add_closed_form(&spec, config.input_size, config.input_size);
        let record = FlopsRecord {
            model: model.variant.as_str().to_string(),
            measured_mul_add: tape.counter().total(),
            closed_form_mul_add: closed,
            breakdown: tape.counter().breakdown().clone(),
            tp_bytes: model.trainable_bytes(),
            ntp_bytes: model.frozen_bytes(),
        };
        println!(
            "{:>9}: measured {:.6} G  closed-form {:.6} G  ({})",
            record.model,
            record.measured_mul_add as f64 / 1e9,
            record.closed_form_mul_add as f64 / 1e9,
            if record.measured_mul_add == record.closed_form_mul_add {
                "exact match"
            } else {
                "MISMATCH"
            },
        );
        lines.push_str(&serde_json::to_string(&record).expect("record serializes"));
        lines.push('\n');
    }
    atomic_write(&out.join("flops.jsonl"), lines.as_bytes())?;
    println!("wrote cost report to {}", out.join("flops.jsonl").display());
    Ok(())
}

fn check_input_size(config: &RunConfig, height: usize, width: usize) -> Result<()> {
    if height != config.input_size || width != config.input_size {
        return Err(Error::Config(format!(
            "dataset images are {height}x{width}, config input_size is {}",
            config.input_size
        )));
    }
    Ok(())
}
