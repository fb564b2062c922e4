//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;

use sigver_core::ink::{self, LoadMode, Task};
use sigver_core::models::{Model, ModelConfig, ModelKind};
use sigver_core::pipeline::{
    self, evaluate, loss_log_csv, lr_range_test, split_writer_disjoint, stratified_split,
    Dataset, LazyCorpusDataset, LrScanConfig, TrainConfig,
};
use sigver_core::preprocess::normalize;
use sigver_core::psf::{rasterize, read_psft, write_psft, FeatureTensor, Variant};

use crate::dataset::{scan_features, PsfDirDataset};
use crate::error::CliError;
use crate::flat_config::FlatConfig;
use crate::manifest::{dir_checksum, Manifest};
use crate::{LrPickArg, ModelArg, SplitModeArg, VariantArg};

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn task_from(no: u8) -> Result<Task, CliError> {
    match no {
        1 => Ok(Task::Task1),
        2 => Ok(Task::Task2),
        other => Err(CliError::Usage(format!("task must be 1 or 2, got {other}"))),
    }
}

// ---------------------------------------------------------------- extract

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Directory of SVC2004 U<w>S<s>.TXT files.
    #[arg(long, value_name = "DIR")]
    corpus: Option<PathBuf>,
    /// SVC2004 task the files belong to (1 or 2).
    #[arg(long)]
    task: Option<u8>,
    /// Feature variant to rasterize.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Output directory for .psft files.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Skip unparsable files instead of aborting.
    #[arg(long)]
    permissive: bool,
}

pub fn extract(args: ExtractArgs, config: &FlatConfig) -> Result<(), CliError> {
    let corpus_dir = config
        .resolve_opt(args.corpus, "corpus")?
        .ok_or_else(|| CliError::Usage("--corpus is required".into()))?;
    let task = task_from(config.resolve(args.task, "task", 1)?)?;
    let variant = config.resolve(args.variant, "variant", VariantArg::Original)?.to_variant();
    let out = config
        .resolve_opt(args.out, "out")?
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;
    let mode = if args.permissive { LoadMode::Permissive } else { LoadMode::Strict };

    let outcome = ink::load_corpus(&corpus_dir, task, mode)?;
    for warn in &outcome.warnings {
        eprintln!("warning: {warn}");
    }
    for skipped in &outcome.skipped {
        eprintln!("skipped {}: {}", skipped.path.display(), skipped.reason);
    }

    ensure_out_dir(&out)?;
    let mut manifest = Manifest::new("extract");
    manifest
        .flag("corpus", corpus_dir.display())
        .flag("corpus_checksum", dir_checksum(&corpus_dir)?)
        .flag("task", task)
        .flag("variant", variant.name())
        .flag("permissive", args.permissive)
        .flag("out", out.display());

    for inst in &outcome.corpus.instances {
        let sig = normalize(inst)?;
        let tensor = rasterize(&sig, variant)?;
        let name = format!("U{}S{}.psft", inst.writer_id, inst.sample_index);
        let mut file = fs::File::create(out.join(&name))?;
        write_psft(&tensor, &mut file)?;
        manifest.output(name);
    }
    manifest.write(&out)?;
    println!(
        "extracted {} instances ({} variant) to {}",
        outcome.corpus.len(),
        variant.name(),
        out.display()
    );
    Ok(())
}

// ----------------------------------------------------------------- render

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// One SVC2004 sample file.
    #[arg(long, value_name = "FILE")]
    input: Option<PathBuf>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

/// Plain (P2) PGM, one per channel. Values are min-max scaled to 0..255
/// per channel; row r of the image is raster row r.
fn write_pgm(tensor: &FeatureTensor, channel: usize, path: &Path) -> Result<(), CliError> {
    let (h, w) = (tensor.height, tensor.width);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for y in 0..h {
        for x in 0..w {
            let v = tensor.at(channel, y, x);
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = hi - lo;
    let mut body = format!("P2\n{w} {h}\n255\n");
    for y in 0..h {
        let mut row = String::with_capacity(w * 4);
        for x in 0..w {
            let v = tensor.at(channel, y, x);
            let gray = if span > 0.0 { ((v - lo) / span * 255.0).round() as u32 } else { 0 };
            if x > 0 {
                row.push(' ');
            }
            row.push_str(&gray.to_string());
        }
        body.push_str(&row);
        body.push('\n');
    }
    fs::write(path, body)?;
    Ok(())
}

pub fn render(args: RenderArgs, config: &FlatConfig) -> Result<(), CliError> {
    let input = config
        .resolve_opt(args.input, "input")?
        .ok_or_else(|| CliError::Usage("--input is required".into()))?;
    let variant = config.resolve(args.variant, "variant", VariantArg::Original)?.to_variant();
    let out = config
        .resolve_opt(args.out, "out")?
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;

    let bytes = fs::read(&input)?;
    let points = ink::parse_svc_file(&bytes)?;
    let name = input.file_name().and_then(|n| n.to_str()).unwrap_or("instance");
    let (writer, sample) = ink::parse_svc_name(name).unwrap_or((1, 1));
    let instance = ink::instance_from_points(&points, writer, sample)?;
    let tensor = rasterize(&normalize(&instance)?, variant)?;

    ensure_out_dir(&out)?;
    let stem = name.split('.').next().unwrap_or("instance");
    let mut manifest = Manifest::new("render");
    manifest
        .flag("input", input.display())
        .flag("variant", variant.name())
        .flag("out", out.display());
    for c in 0..tensor.channels {
        let file = format!("{stem}_ch{c:02}.pgm");
        write_pgm(&tensor, c, &out.join(&file))?;
        manifest.output(file);
    }
    manifest.write(&out)?;
    println!("rendered {} channels to {}", tensor.channels, out.display());
    Ok(())
}

// ------------------------------------------------------- shared data prep

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory of SVC2004 sample files.
    #[arg(long, value_name = "DIR", conflicts_with = "features")]
    corpus: Option<PathBuf>,
    /// Directory of extracted .psft feature files.
    #[arg(long, value_name = "DIR")]
    features: Option<PathBuf>,
    /// SVC2004 task (1 or 2), corpus mode only.
    #[arg(long)]
    task: Option<u8>,
}

enum DataSource {
    Corpus(ink::Corpus, PathBuf),
    Features(Vec<crate::dataset::FeatureFile>, PathBuf),
}

impl DataSource {
    fn open(args: &DataArgs, config: &FlatConfig) -> Result<DataSource, CliError> {
        let corpus_dir = config.resolve_opt(args.corpus.clone(), "corpus")?;
        let features_dir = config.resolve_opt(args.features.clone(), "features")?;
        match (corpus_dir, features_dir) {
            (Some(dir), None) => {
                let task = task_from(config.resolve(args.task, "task", 1)?)?;
                let outcome = ink::load_corpus(&dir, task, LoadMode::Strict)?;
                for warn in &outcome.warnings {
                    eprintln!("warning: {warn}");
                }
                Ok(DataSource::Corpus(outcome.corpus, dir))
            }
            (None, Some(dir)) => Ok(DataSource::Features(scan_features(&dir)?, dir)),
            (Some(_), Some(_)) => {
                Err(CliError::Usage("pass either --corpus or --features, not both".into()))
            }
            (None, None) => Err(CliError::Usage("one of --corpus or --features is required".into())),
        }
    }

    fn labels(&self) -> Vec<bool> {
        match self {
            DataSource::Corpus(corpus, _) => corpus
                .instances
                .iter()
                .map(|i| i.label == ink::Label::Genuine)
                .collect(),
            DataSource::Features(files, _) => PsfDirDataset::labels(files),
        }
    }

    fn describe(&self, manifest: &mut Manifest) -> Result<(), CliError> {
        match self {
            DataSource::Corpus(_, dir) => {
                manifest.flag("corpus", dir.display());
                manifest.flag("corpus_checksum", dir_checksum(dir)?);
            }
            DataSource::Features(_, dir) => {
                manifest.flag("features", dir.display());
                manifest.flag("features_checksum", dir_checksum(dir)?);
            }
        }
        Ok(())
    }

    /// Datasets for the given instance indices.
    fn dataset(&self, indices: Vec<usize>, cfg: &ModelConfig) -> Result<Box<dyn Dataset<f32> + '_>, CliError> {
        match self {
            DataSource::Corpus(corpus, _) => {
                Ok(Box::new(LazyCorpusDataset::<f32>::new(corpus, indices, cfg.clone())))
            }
            DataSource::Features(files, _) => {
                if cfg.kind == ModelKind::RnnPoints {
                    return Err(CliError::Usage(
                        "the rnn model consumes stroke points; use --corpus".into(),
                    ));
                }
                let mut reader = fs::File::open(&files[0].path)?;
                let head = read_psft(&mut reader)?;
                if head.variant != cfg.feature_variant {
                    return Err(CliError::Data(format!(
                        "feature files hold the {} variant but the model wants {}",
                        head.variant.name(),
                        cfg.feature_variant.name()
                    )));
                }
                Ok(Box::new(PsfDirDataset::new(files.clone(), indices, cfg)))
            }
        }
    }

    fn split(
        &self,
        fraction: f64,
        seed: u64,
        mode: SplitModeArg,
    ) -> Result<(Vec<usize>, Vec<usize>), CliError> {
        match (self, mode) {
            (DataSource::Corpus(corpus, _), SplitModeArg::Writer) => {
                Ok(split_writer_disjoint(corpus, fraction, seed)?)
            }
            (DataSource::Features(_, _), SplitModeArg::Writer) => Err(CliError::Usage(
                "writer-disjoint splits need --corpus".into(),
            )),
            (_, SplitModeArg::Instance) => Ok(stratified_split(&self.labels(), fraction, seed)?),
        }
    }
}

fn build_model_config(
    model: ModelKind,
    variant: Variant,
    resample_n: usize,
) -> Result<ModelConfig, CliError> {
    let mut cfg = ModelConfig::new(model, variant);
    if cfg.kind == ModelKind::RnnPoints {
        cfg.resample_n = Some(resample_n);
    }
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------- lr-find

#[derive(Debug, Args)]
pub struct LrFindArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Points per resampled sequence (rnn model only).
    #[arg(long)]
    resample_n: Option<usize>,
    /// How to pick the rate from the smoothed-loss minimum.
    #[arg(long, value_enum)]
    lr_pick: Option<LrPickArg>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

pub fn lr_find(args: LrFindArgs, config: &FlatConfig) -> Result<(), CliError> {
    let model_kind = config.resolve(args.model, "model", ModelArg::CnnLstm)?.to_kind();
    let variant = config.resolve(args.variant, "variant", VariantArg::Original)?.to_variant();
    let seed = config.resolve(args.seed, "seed", 0)?;
    let lr_min = config.resolve(args.lr_min, "lr-min", 1e-7)?;
    let lr_max = config.resolve(args.lr_max, "lr-max", 1.0)?;
    let steps = config.resolve(args.steps, "steps", 100)?;
    let batch_size = config.resolve(args.batch_size, "batch-size", 10)?;
    let resample_n = config.resolve(args.resample_n, "resample-n", 128)?;
    let pick = config.resolve(args.lr_pick, "lr-pick", LrPickArg::MinOverTen)?;
    let out = config.resolve_opt(args.out, "out")?;

    let source = DataSource::open(&args.data, config)?;
    let model_cfg = build_model_config(model_kind, variant, resample_n)?;
    let indices: Vec<usize> = (0..source.labels().len()).collect();
    let data = source.dataset(indices, &model_cfg)?;

    let mut model: Model<f32> = Model::build(model_cfg, seed)?;
    let scan_cfg = LrScanConfig { lr_min, lr_max, steps, batch_size, seed, pick: pick.to_pick() };
    let scan = lr_range_test(&mut model, data.as_ref(), &scan_cfg)?;

    if scan.flat_scan {
        eprintln!("warning: flat scan — the loss never responded to the learning rate");
    }
    let mut csv = String::from("step,lr,smoothed_loss\n");
    for (i, (lr, loss)) in scan.points.iter().enumerate() {
        csv.push_str(&format!("{i},{lr:.6e},{loss:.6e}\n"));
    }
    if let Some(out) = &out {
        ensure_out_dir(out)?;
        fs::write(out.join("lr_scan.csv"), &csv)?;
        let mut manifest = Manifest::new("lr-find");
        source.describe(&mut manifest)?;
        manifest
            .flag("model", model_kind.name())
            .flag("variant", variant.name())
            .flag("seed", seed)
            .flag("lr-min", lr_min)
            .flag("lr-max", lr_max)
            .flag("steps", steps)
            .flag("batch-size", batch_size)
            .flag("lr-pick", format!("{:?}", pick.to_pick()))
            .flag("lr-chosen", scan.lr_chosen)
            .flag("flat-scan", scan.flat_scan);
        manifest.output("lr_scan.csv");
        manifest.write(out)?;
    } else {
        eprint!("{csv}");
    }
    println!("{:e}", scan.lr_chosen);
    Ok(())
}

// ------------------------------------------------------------------ train

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Initial learning rate; decays by 0.95 per epoch.
    #[arg(long)]
    lr: Option<f64>,
    /// Run a learning-rate range scan first and use its pick.
    #[arg(long)]
    lr_find: bool,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training fraction of the instance split.
    #[arg(long)]
    split: Option<f64>,
    #[arg(long, value_enum)]
    split_mode: Option<SplitModeArg>,
    #[arg(long)]
    resample_n: Option<usize>,
    /// Evaluate the held-out split every epoch into the loss log.
    #[arg(long)]
    track_test: bool,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

pub fn train(args: TrainArgs, config: &FlatConfig) -> Result<(), CliError> {
    let model_kind = config.resolve(args.model, "model", ModelArg::CnnLstm)?.to_kind();
    let variant = config.resolve(args.variant, "variant", VariantArg::Original)?.to_variant();
    let epochs = config.resolve(args.epochs, "epochs", 50)?;
    let seed = config.resolve(args.seed, "seed", 0)?;
    let batch_size = config.resolve(args.batch_size, "batch-size", 10)?;
    let split = config.resolve(args.split, "split", 0.8)?;
    let split_mode = config.resolve(args.split_mode, "split-mode", SplitModeArg::Instance)?;
    let resample_n = config.resolve(args.resample_n, "resample-n", 128)?;
    let out = config
        .resolve_opt(args.out, "out")?
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;

    let source = DataSource::open(&args.data, config)?;
    let model_cfg = build_model_config(model_kind, variant, resample_n)?;
    let (train_idx, test_idx) = source.split(split, seed, split_mode)?;
    let train_set = source.dataset(train_idx.clone(), &model_cfg)?;
    let test_set = source.dataset(test_idx.clone(), &model_cfg)?;

    let mut model: Model<f32> = Model::build(model_cfg, seed)?;

    let lr_initial = if args.lr_find {
        let scan_cfg = LrScanConfig { batch_size, seed, ..LrScanConfig::default() };
        let scan = lr_range_test(&mut model, train_set.as_ref(), &scan_cfg)?;
        if scan.flat_scan {
            eprintln!("warning: flat scan — the loss never responded to the learning rate");
        }
        eprintln!("lr-find chose {:e}", scan.lr_chosen);
        scan.lr_chosen
    } else {
        config.resolve(args.lr, "lr", 1e-3)?
    };

    let train_cfg = TrainConfig {
        batch_size,
        epochs,
        lr_initial,
        seed,
        split_fraction_train: split,
        ..TrainConfig::default()
    };
    let maybe_test: Option<&dyn Dataset<f32>> =
        if args.track_test && !test_idx.is_empty() { Some(test_set.as_ref()) } else { None };
    let log = pipeline::train(&mut model, train_set.as_ref(), maybe_test, &train_cfg)?;
    for stats in &log {
        match stats.test_accuracy {
            Some(acc) => eprintln!(
                "epoch {:3}: loss {:.4} lr {:.3e} test_acc {:.3}",
                stats.epoch, stats.mean_train_loss, stats.lr, acc
            ),
            None => eprintln!(
                "epoch {:3}: loss {:.4} lr {:.3e}",
                stats.epoch, stats.mean_train_loss, stats.lr
            ),
        }
    }

    ensure_out_dir(&out)?;
    let mut ckpt = fs::File::create(out.join("model.svmd"))?;
    model.write_to(&mut ckpt)?;
    fs::write(out.join("loss.csv"), loss_log_csv(&log))?;

    let mut manifest = Manifest::new("train");
    source.describe(&mut manifest)?;
    manifest
        .flag("model", model_kind.name())
        .flag("variant", variant.name())
        .flag("epochs", epochs)
        .flag("seed", seed)
        .flag("lr", lr_initial)
        .flag("lr-find", args.lr_find)
        .flag("batch-size", batch_size)
        .flag("split", split)
        .flag("split-mode", format!("{split_mode:?}").to_lowercase())
        .flag("resample-n", resample_n)
        .flag("track-test", args.track_test)
        .flag("train-instances", train_idx.len())
        .flag("test-instances", test_idx.len());
    manifest.output("model.svmd");
    manifest.output("loss.csv");
    manifest.write(&out)?;
    println!("trained {} epochs; checkpoint at {}", log.len(), out.join("model.svmd").display());
    Ok(())
}

// ------------------------------------------------------------------- eval

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split: Option<f64>,
    #[arg(long, value_enum)]
    split_mode: Option<SplitModeArg>,
    /// Score every instance instead of the held-out split.
    #[arg(long)]
    all: bool,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

pub fn eval(args: EvalArgs, config: &FlatConfig) -> Result<(), CliError> {
    let checkpoint = config
        .resolve_opt(args.checkpoint, "checkpoint")?
        .ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?;
    let seed = config.resolve(args.seed, "seed", 0)?;
    let split = config.resolve(args.split, "split", 0.8)?;
    let split_mode = config.resolve(args.split_mode, "split-mode", SplitModeArg::Instance)?;
    let threshold = config.resolve(args.threshold, "threshold", 0.5)?;
    let out = config.resolve_opt(args.out, "out")?;

    let mut reader = fs::File::open(&checkpoint)?;
    let model: Model<f32> = Model::read_from(&mut reader)?;

    let source = DataSource::open(&args.data, config)?;
    let test_idx = if args.all {
        (0..source.labels().len()).collect()
    } else {
        source.split(split, seed, split_mode)?.1
    };
    if test_idx.is_empty() {
        return Err(CliError::Data("test selection is empty".into()));
    }
    let test_set = source.dataset(test_idx.clone(), &model.config)?;
    let metrics = evaluate(&model, test_set.as_ref(), threshold)?;
    let json = metrics.to_json(threshold, seed);
    println!("{json}");

    if let Some(out) = &out {
        ensure_out_dir(out)?;
        fs::write(out.join("metrics.json"), format!("{json}\n"))?;
        let mut manifest = Manifest::new("eval");
        source.describe(&mut manifest)?;
        manifest
            .flag("checkpoint", checkpoint.display())
            .flag("seed", seed)
            .flag("split", split)
            .flag("split-mode", format!("{split_mode:?}").to_lowercase())
            .flag("all", args.all)
            .flag("threshold", threshold)
            .flag("test-instances", test_idx.len());
        manifest.output("metrics.json");
        manifest.write(out)?;
    }
    Ok(())
}

// A few invariants that are cheaper to check here than end to end.
#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_dimensions() {
        let mut t = FeatureTensor::zeros(1, 128, 16, Variant::Original);
        t.set(0, 3, 5, 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        write_pgm(&t, 0, &path).unwrap();
        let body = fs::read_to_string(&path).unwrap();
        let mut lines = body.lines();
        assert_eq!(lines.next(), Some("P2"));
        assert_eq!(lines.next(), Some("16 128"));
        assert_eq!(lines.next(), Some("255"));
        assert_eq!(lines.count(), 128);
    }

    #[test]
    fn task_parsing() {
        assert!(task_from(1).is_ok());
        assert!(task_from(2).is_ok());
        assert!(task_from(3).is_err());
    }
}
