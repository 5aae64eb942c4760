//! Run configuration, run directories and the subcommands that tie the
//! modules together.
//!
//! A run is described by a flat `key=value` file with dotted namespaces
//! (`train.margin=0.2`). Overrides given on the command line are applied on
//! top, and the merged configuration is validated as a whole before any work
//! starts. Every subcommand writes into one run directory with fixed
//! subfolders and leaves a manifest of the resolved configuration next to its
//! artifacts.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::corpus_io::{
    load_checkpoint, load_image, load_manifest, parse_manifest, save_checkpoint, save_label_map,
    Checkpoint, ImageRecord, TrainingMeta, FORMAT_VERSION,
};
use crate::deep_image::{embed_image, pca_pseudo_rgb, DeepImage};
use crate::embedding_net::{init_parameters, ArchitectureConfig};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, format_report, format_roc, Embedder, EvalConfig};
use crate::patch_sampler::{dump_plan, plan_epoch};
use crate::seed::{self, tag};
use crate::segmenter::{segment, upsample_labels, DEFAULT_K};
use crate::specializer::{specialize, SpecializeConfig};
use crate::trainer::{train, LossTrace, TrainingConfig};

/// Subfolders created in every run directory.
pub const RUN_SUBDIRS: [&str; 5] = ["checkpoints", "deep", "viz", "labels", "reports"];

pub const FINAL_CHECKPOINT: &str = "checkpoints/final.ckpt";
pub const SPECIALIZED_CHECKPOINT: &str = "checkpoints/specialized.ckpt";
pub const LOSS_TRACE: &str = "reports/loss_trace.tsv";
pub const SPECIALIZE_TRACE: &str = "reports/specialize_trace.tsv";
pub const EVAL_REPORT: &str = "reports/eval.txt";
pub const SUMMARY: &str = "reports/summary.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Sample,
    Train,
    Embed,
    Visualize,
    Segment,
    Specialize,
    Eval,
    Report,
}

impl Subcommand {
    pub const ALL: [Subcommand; 8] = [
        Subcommand::Sample,
        Subcommand::Train,
        Subcommand::Embed,
        Subcommand::Visualize,
        Subcommand::Segment,
        Subcommand::Specialize,
        Subcommand::Eval,
        Subcommand::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Sample => "sample",
            Subcommand::Train => "train",
            Subcommand::Embed => "embed",
            Subcommand::Visualize => "visualize",
            Subcommand::Segment => "segment",
            Subcommand::Specialize => "specialize",
            Subcommand::Eval => "eval",
            Subcommand::Report => "report",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataConfig {
    /// Training corpus.
    pub train: Option<PathBuf>,
    /// Annotated evaluation corpus; also the default input of `embed`.
    pub eval: Option<PathBuf>,
    /// Object-centric corpus for specialization.
    pub object: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub deterministic: bool,
    pub data: DataConfig,
    pub arch_preset: String,
    pub train: TrainingConfig,
    /// Epoch whose plan `sample` dumps.
    pub sample_epoch: usize,
    pub embed_stride: usize,
    /// Encoder used by `embed`, `segment` and `eval`; defaults to the run's
    /// final training checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub segment_k: usize,
    pub segment_lambda: Option<f64>,
    pub specialize: SpecializeConfig,
    /// Starting point of `specialize`; defaults to [`RunConfig::checkpoint`].
    pub specialize_base: Option<PathBuf>,
    pub eval: EvalConfig,
    pub eval_roc: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            workers: 0,
            deterministic: false,
            data: DataConfig::default(),
            arch_preset: "default".into(),
            train: TrainingConfig::default(),
            sample_epoch: 1,
            embed_stride: 1,
            checkpoint: None,
            segment_k: DEFAULT_K,
            segment_lambda: None,
            specialize: SpecializeConfig::default(),
            specialize_base: None,
            eval: EvalConfig::default(),
            eval_roc: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: expected {what}, got `{value}`"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got `{value}`")),
    }
}

fn parse_lambda(key: &str, value: &str) -> Result<Option<f64>, String> {
    if value == "auto" {
        Ok(None)
    } else {
        parse_num(key, value, "a number or `auto`").map(Some)
    }
}

fn parse_path(value: &str, base: &Path) -> Option<PathBuf> {
    if value.is_empty() {
        None
    } else {
        let p = Path::new(value);
        Some(if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        })
    }
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

fn show_lambda(l: Option<f64>) -> String {
    l.map_or_else(|| "auto".into(), |v| v.to_string())
}

impl RunConfig {
    /// Assign one key. Relative paths are resolved against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<(), String> {
        let v = value.trim();
        let int = "an unsigned integer";
        let num = "a number";
        match key.trim() {
            "seed" => self.seed = parse_num(key, v, int)?,
            "out_dir" => {
                self.out_dir =
                    parse_path(v, base).ok_or_else(|| "out_dir: must not be empty".to_string())?
            }
            "workers" => self.workers = parse_num(key, v, int)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "data.train" => self.data.train = parse_path(v, base),
            "data.eval" => self.data.eval = parse_path(v, base),
            "data.object" => self.data.object = parse_path(v, base),
            "arch.preset" => self.arch_preset = v.to_string(),
            "sampler.swatches" => self.train.sampler.swatches_per_image = parse_num(key, v, int)?,
            "sampler.per_image" => self.train.sampler.triplets_per_image = parse_num(key, v, int)?,
            "sampler.placement_retries" => {
                self.train.sampler.placement_retries = parse_num(key, v, int)?
            }
            "sample.epoch" => self.sample_epoch = parse_num(key, v, int)?,
            "train.margin" => self.train.margin = parse_num(key, v, num)?,
            "train.epochs" => self.train.epochs = parse_num(key, v, int)?,
            "train.learning_rate" => self.train.learning_rate = parse_num(key, v, num)?,
            "train.beta1" => self.train.beta1 = parse_num(key, v, num)?,
            "train.beta2" => self.train.beta2 = parse_num(key, v, num)?,
            "train.epsilon" => self.train.epsilon = parse_num(key, v, num)?,
            "train.batch_size" => self.train.sampler.batch_size = parse_num(key, v, int)?,
            "train.hard_mining" => self.train.hard_mining = parse_bool(key, v)?,
            "train.heldout_fraction" => self.train.heldout_fraction = parse_num(key, v, num)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse_num(key, v, int)?,
            "embed.stride" => self.embed_stride = parse_num(key, v, int)?,
            "embed.checkpoint" => self.checkpoint = parse_path(v, base),
            "segment.k" => self.segment_k = parse_num(key, v, int)?,
            "segment.lambda" => self.segment_lambda = parse_lambda(key, v)?,
            "specialize.k" => self.specialize.k = parse_num(key, v, int)?,
            "specialize.lambda" => self.specialize.lambda = parse_lambda(key, v)?,
            "specialize.stride" => self.specialize.stride = parse_num(key, v, int)?,
            "specialize.epochs" => self.specialize.epochs = parse_num(key, v, int)?,
            "specialize.lr_scale" => self.specialize.lr_scale = parse_num(key, v, num)?,
            "specialize.base" => self.specialize_base = parse_path(v, base),
            "eval.pairs_per_class" => self.eval.n_per_class = parse_num(key, v, int)?,
            "eval.foreground_only" => self.eval.foreground_only = parse_bool(key, v)?,
            "eval.roc" => self.eval_roc = parse_bool(key, v)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Apply `key=value` lines; `origin` prefixes line-numbered diagnostics.
    pub fn apply_text(&mut self, text: &str, base: &Path, origin: &str) -> Vec<String> {
        let mut errs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let res = match line.split_once('=') {
                Some((k, v)) => self.set(k, v, base),
                None => Err(format!("expected key=value, got `{line}`")),
            };
            if let Err(e) = res {
                errs.push(format!("{origin}:{}: {e}", i + 1));
            }
        }
        errs
    }

    /// Defaults, then the optional file, then `overrides` (each `key=value`),
    /// then validation. All problems are reported together.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut config = Self::default();
        let mut errs = Vec::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            errs.extend(config.apply_text(&text, base, &path.display().to_string()));
        }
        for o in overrides {
            let res = match o.split_once('=') {
                Some((k, v)) => config.set(k, v, Path::new("")),
                None => Err(format!("expected key=value, got `{o}`")),
            };
            if let Err(e) = res {
                errs.push(format!("override `{o}`: {e}"));
            }
        }
        errs.extend(config.validate());
        if errs.is_empty() {
            Ok(config)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn architecture(&self) -> Result<ArchitectureConfig> {
        ArchitectureConfig::preset(&self.arch_preset).ok_or_else(|| {
            Error::Config(vec![format!(
                "arch.preset: expected `default` or `tiny`, got `{}`",
                self.arch_preset
            )])
        })
    }

    /// Training settings with the run seed applied.
    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn specialization(&self) -> SpecializeConfig {
        SpecializeConfig {
            train: self.training(),
            ..self.specialize.clone()
        }
    }

    pub fn evaluation(&self) -> EvalConfig {
        EvalConfig {
            seed: self.seed,
            ..self.eval.clone()
        }
    }

    /// Field-level diagnostics; empty when valid.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        match self.architecture() {
            Ok(arch) => {
                if let Err(e) = arch.validate() {
                    errs.push(format!("arch: {e}"));
                }
            }
            Err(Error::Config(e)) => errs.extend(e),
            Err(e) => errs.push(e.to_string()),
        }
        errs.extend(self.training().validate());
        if self.sample_epoch == 0 {
            errs.push("sample.epoch must be ≥ 1".into());
        }
        if self.embed_stride == 0 {
            errs.push("embed.stride must be ≥ 1".into());
        }
        if self.segment_k == 0 {
            errs.push("segment.k must be ≥ 1".into());
        }
        if let Some(l) = self.segment_lambda {
            if !(l.is_finite() && l >= 0.0) {
                errs.push(format!("segment.lambda must be ≥ 0, got {l}"));
            }
        }
        for e in self.specialization().validate() {
            if !errs.contains(&e) {
                errs.push(e);
            }
        }
        errs.extend(self.evaluation().validate());
        errs
    }

    /// Canonical text of every key; loading it reproduces this config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let s = &t.sampler;
        let sp = &self.specialize;
        let rows: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("workers", self.workers.to_string()),
            ("deterministic", self.deterministic.to_string()),
            ("data.train", show_path(&self.data.train)),
            ("data.eval", show_path(&self.data.eval)),
            ("data.object", show_path(&self.data.object)),
            ("arch.preset", self.arch_preset.clone()),
            ("sampler.swatches", s.swatches_per_image.to_string()),
            ("sampler.per_image", s.triplets_per_image.to_string()),
            ("sampler.placement_retries", s.placement_retries.to_string()),
            ("sample.epoch", self.sample_epoch.to_string()),
            ("train.margin", t.margin.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.epsilon", t.epsilon.to_string()),
            ("train.batch_size", s.batch_size.to_string()),
            ("train.hard_mining", t.hard_mining.to_string()),
            ("train.heldout_fraction", t.heldout_fraction.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("embed.stride", self.embed_stride.to_string()),
            ("embed.checkpoint", show_path(&self.checkpoint)),
            ("segment.k", self.segment_k.to_string()),
            ("segment.lambda", show_lambda(self.segment_lambda)),
            ("specialize.k", sp.k.to_string()),
            ("specialize.lambda", show_lambda(sp.lambda)),
            ("specialize.stride", sp.stride.to_string()),
            ("specialize.epochs", sp.epochs.to_string()),
            ("specialize.lr_scale", sp.lr_scale.to_string()),
            ("specialize.base", show_path(&self.specialize_base)),
            ("eval.pairs_per_class", self.eval.n_per_class.to_string()),
            (
                "eval.foreground_only",
                self.eval.foreground_only.to_string(),
            ),
            ("eval.roc", self.eval_roc.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn effective_workers(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.workers
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }

    fn encoder_checkpoint(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.path(FINAL_CHECKPOINT))
    }
}

/// Files written by one subcommand.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutcome {
    pub artifacts: Vec<PathBuf>,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn require<'a>(path: Option<&'a Path>, key: &str) -> Result<&'a Path> {
    path.ok_or_else(|| Error::Config(vec![format!("{key} is required by this subcommand")]))
}

/// Images of a manifest without their label maps.
pub fn load_images(manifest: &Path) -> Result<Vec<ImageRecord>> {
    let mut seen = HashSet::new();
    parse_manifest(manifest)?
        .into_iter()
        .map(|entry| {
            let img = load_image(&entry.image_path)?;
            if !seen.insert(img.image_id.clone()) {
                return Err(Error::InvalidInput(format!(
                    "{}: duplicate image_id `{}`",
                    manifest.display(),
                    img.image_id
                )));
            }
            Ok(img)
        })
        .collect()
}

fn canonical(p: &Path) -> PathBuf {
    p.canonicalize().unwrap_or_else(|_| p.to_path_buf())
}

/// Refuse an evaluation corpus that shares images with the training corpus.
fn check_disjoint(eval: &Path, train: Option<&Path>) -> Result<()> {
    let Some(train) = train.filter(|t| t.exists()) else {
        return Ok(());
    };
    let train_images: HashSet<PathBuf> = parse_manifest(train)?
        .iter()
        .map(|e| canonical(&e.image_path))
        .collect();
    let shared: Vec<String> = parse_manifest(eval)?
        .iter()
        .filter(|e| train_images.contains(&canonical(&e.image_path)))
        .map(|e| e.image_path.display().to_string())
        .collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(vec![format!(
            "data.eval shares {} image(s) with data.train, first `{}`",
            shared.len(),
            shared[0]
        )]))
    }
}

fn deep_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = match fs::read_dir(dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "deep"))
            .collect(),
        Err(_) => Vec::new(),
    };
    if files.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no deep images in {}; run `embed` first",
            dir.display()
        )));
    }
    files.sort();
    Ok(files)
}

/// The run manifest: subcommand, versions and the full resolved config.
pub fn run_manifest(sub: Subcommand, config: &RunConfig, input: Option<&Path>) -> String {
    let mut out = String::from("# run manifest\n");
    let _ = writeln!(out, "subcommand={}", sub.name());
    let _ = writeln!(out, "version={}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(out, "checkpoint_format={FORMAT_VERSION}");
    if let Some(p) = input {
        let _ = writeln!(out, "input={}", p.display());
    }
    out.push_str(&config.to_text());
    out
}

/// Validate, prepare the run directory and execute one subcommand.
/// `input` replaces the subcommand's default corpus manifest.
pub fn run_subcommand(
    sub: Subcommand,
    config: &RunConfig,
    input: Option<&Path>,
) -> Result<RunOutcome> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.effective_workers())
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start worker pool: {e}")))?;
    for dir in RUN_SUBDIRS {
        let p = config.path(dir);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let manifest_path = config.path(&format!("run_{}.txt", sub.name()));
    write_file(&manifest_path, run_manifest(sub, config, input))?;
    let mut outcome = pool.install(|| match sub {
        Subcommand::Sample => cmd_sample(config, input),
        Subcommand::Train => cmd_train(config, input),
        Subcommand::Embed => cmd_embed(config, input),
        Subcommand::Visualize => cmd_visualize(config),
        Subcommand::Segment => cmd_segment(config),
        Subcommand::Specialize => cmd_specialize(config, input),
        Subcommand::Eval => cmd_eval(config, input),
        Subcommand::Report => cmd_report(config),
    })?;
    outcome.artifacts.insert(0, manifest_path);
    Ok(outcome)
}

fn cmd_sample(config: &RunConfig, input: Option<&Path>) -> Result<RunOutcome> {
    let manifest = require(input.or(config.data.train.as_deref()), "data.train")?;
    let corpus = load_images(manifest)?;
    let plan = plan_epoch(
        &corpus,
        &config.train.sampler,
        config.seed,
        config.sample_epoch,
    )?;
    let path = config.path("reports/triplet_plan.tsv");
    write_file(&path, dump_plan(&corpus, &plan))?;
    info!("wrote {} triplets to {}", plan.len(), path.display());
    Ok(RunOutcome {
        artifacts: vec![path],
    })
}

fn cmd_train(config: &RunConfig, input: Option<&Path>) -> Result<RunOutcome> {
    let manifest = require(input.or(config.data.train.as_deref()), "data.train")?;
    let corpus = load_images(manifest)?;
    let arch = config.architecture()?;
    let initial = init_parameters::<f32>(&arch, config.seed)?;
    let mut training = config.training();
    training.checkpoint_dir = Some(config.path("checkpoints"));
    let (params, trace) = train(&corpus, &training, initial)?;
    let ckpt = Checkpoint::new(
        params,
        TrainingMeta {
            epochs: training.epochs as u32,
            seed: config.seed,
            loss_history: trace.clone(),
        },
    );
    let ckpt_path = config.path(FINAL_CHECKPOINT);
    save_checkpoint(&ckpt, &ckpt_path)?;
    let trace_path = config.path(LOSS_TRACE);
    write_file(&trace_path, trace.to_text())?;
    Ok(RunOutcome {
        artifacts: vec![ckpt_path, trace_path],
    })
}

fn cmd_embed(config: &RunConfig, input: Option<&Path>) -> Result<RunOutcome> {
    let manifest = require(input.or(config.data.eval.as_deref()), "data.eval")?;
    let ckpt = load_checkpoint(&config.encoder_checkpoint())?;
    let corpus = load_images(manifest)?;
    let mut artifacts = Vec::with_capacity(corpus.len());
    for image in &corpus {
        let deep = embed_image(&ckpt.params, image, config.embed_stride)?;
        let path = config.path(&format!("deep/{}.deep", image.image_id));
        deep.save(&path)?;
        artifacts.push(path);
    }
    Ok(RunOutcome { artifacts })
}

fn cmd_visualize(config: &RunConfig) -> Result<RunOutcome> {
    let mut artifacts = Vec::new();
    for file in deep_files(&config.path("deep"))? {
        let deep = DeepImage::load(&file)?;
        let rgb = pca_pseudo_rgb(&deep)?;
        let path = config.path(&format!("viz/{}.png", deep.image_id));
        rgb.save_png(&path)?;
        info!(
            "{}: top-3 explained variance {:.3}",
            deep.image_id, rgb.basis.explained_variance
        );
        artifacts.push(path);
    }
    Ok(RunOutcome { artifacts })
}

fn cmd_segment(config: &RunConfig) -> Result<RunOutcome> {
    let mut artifacts = Vec::new();
    let mut table = String::from("# image_id\tk\tlambda\tenergy\tkmeans_objective\n");
    for (i, file) in deep_files(&config.path("deep"))?.iter().enumerate() {
        let deep = DeepImage::load(file)?;
        let seg = segment(
            &deep,
            config.segment_k,
            config.segment_lambda,
            seed::derive(config.seed, &[tag::KMEANS, i as u64]),
        )?;
        let labels = if deep.stride > 1 {
            upsample_labels(&seg.labels, deep.stride, deep.width, deep.height)?
        } else {
            seg.labels
        };
        let path = config.path(&format!("labels/{}.png", deep.image_id));
        save_label_map(&path, &labels)?;
        let _ = writeln!(
            table,
            "{}\t{}\t{}\t{}\t{}",
            deep.image_id, config.segment_k, seg.lambda, seg.cut.energy, seg.model.objective
        );
        artifacts.push(path);
    }
    let path = config.path("reports/segment.tsv");
    write_file(&path, table)?;
    artifacts.push(path);
    Ok(RunOutcome { artifacts })
}

fn cmd_specialize(config: &RunConfig, input: Option<&Path>) -> Result<RunOutcome> {
    let manifest = require(input.or(config.data.object.as_deref()), "data.object")?;
    let base_path = config
        .specialize_base
        .clone()
        .unwrap_or_else(|| config.encoder_checkpoint());
    let base = load_checkpoint(&base_path)?;
    let corpus = load_images(manifest)?;
    let spec = config.specialization();
    let result = specialize(&corpus, &base.params, &spec)?;
    let pseudo_dir = config.path("labels/pseudo");
    fs::create_dir_all(&pseudo_dir).map_err(|e| Error::io(&pseudo_dir, e))?;
    let mut artifacts = Vec::new();
    for img in &result.images {
        let path = config.path(&format!("labels/pseudo/{}.png", img.image_id));
        save_label_map(&path, &img.labels)?;
        artifacts.push(path);
    }
    let mut meta = base.meta.clone();
    meta.epochs += spec.epochs as u32;
    meta.loss_history = result.trace.clone();
    let ckpt_path = config.path(SPECIALIZED_CHECKPOINT);
    save_checkpoint(&Checkpoint::new(result.params, meta), &ckpt_path)?;
    let trace_path = config.path(SPECIALIZE_TRACE);
    write_file(&trace_path, result.trace.to_text())?;
    let mut skipped = String::from("# image_id\treason\n");
    for (id, why) in &result.skipped {
        let _ = writeln!(skipped, "{id}\t{why}");
    }
    let skipped_path = config.path("reports/specialize_skipped.tsv");
    write_file(&skipped_path, skipped)?;
    artifacts.extend([ckpt_path, trace_path, skipped_path]);
    Ok(RunOutcome { artifacts })
}

fn cmd_eval(config: &RunConfig, input: Option<&Path>) -> Result<RunOutcome> {
    let manifest = require(input.or(config.data.eval.as_deref()), "data.eval")?;
    check_disjoint(manifest, config.data.train.as_deref())?;
    let corpus = load_manifest(manifest)?;
    if let Some(img) = corpus.iter().find(|i| i.label_map.is_none()) {
        return Err(Error::MissingLabelMap(img.image_id.clone()));
    }
    let encoder = load_checkpoint(&config.encoder_checkpoint())?;
    let specialized_path = config.path(SPECIALIZED_CHECKPOINT);
    let specialized = if specialized_path.exists() {
        Some(load_checkpoint(&specialized_path)?)
    } else {
        None
    };
    let mut embedders = vec![Embedder::Encoder {
        name: "encoder",
        params: &encoder.params,
    }];
    if let Some(s) = &specialized {
        embedders.push(Embedder::Encoder {
            name: "specialized",
            params: &s.params,
        });
    }
    embedders.push(Embedder::RawPixels);
    let eval = config.evaluation();
    let results = evaluate(&corpus, &embedders, &eval)?;
    let title = if eval.foreground_only {
        "same/different segment AUC, foreground-only same pairs"
    } else {
        "same/different segment AUC"
    };
    let path = config.path(EVAL_REPORT);
    write_file(&path, format_report(title, &results))?;
    let mut artifacts = vec![path];
    if config.eval_roc {
        for r in &results {
            let p = config.path(&format!("reports/roc_{}.tsv", r.embedder_id));
            write_file(&p, format_roc(&r.roc()))?;
            artifacts.push(p);
        }
    }
    Ok(RunOutcome { artifacts })
}

fn trace_summary(out: &mut String, heading: &str, trace: &LossTrace) {
    let _ = writeln!(out, "## {heading}");
    let (Some(first), Some(last)) = (trace.initial(), trace.last()) else {
        out.push_str("empty trace\n\n");
        return;
    };
    let held = |h: Option<f64>| h.map_or_else(|| "NA".into(), |v| format!("{v:.6}"));
    let _ = writeln!(out, "epochs\t{}", last.epoch);
    let _ = writeln!(out, "initial_train_loss\t{:.6}", first.train);
    let _ = writeln!(out, "final_train_loss\t{:.6}", last.train);
    let _ = writeln!(out, "initial_heldout_loss\t{}", held(first.heldout));
    let _ = writeln!(out, "final_heldout_loss\t{}", held(last.heldout));
    if first.train > 0.0 {
        let _ = writeln!(out, "final_over_initial\t{:.4}", last.train / first.train);
    }
    out.push('\n');
}

fn cmd_report(config: &RunConfig) -> Result<RunOutcome> {
    let mut out = String::from("# run summary\n\n");
    let mut found = 0;
    for (rel, heading) in [
        (LOSS_TRACE, "training"),
        (SPECIALIZE_TRACE, "specialization"),
    ] {
        let p = config.path(rel);
        if p.exists() {
            trace_summary(&mut out, heading, &LossTrace::from_text(&read_text(&p)?)?);
            found += 1;
        }
    }
    let eval = config.path(EVAL_REPORT);
    if eval.exists() {
        out.push_str("## evaluation\n");
        out.push_str(&read_text(&eval)?);
        found += 1;
    }
    if found == 0 {
        return Err(Error::InvalidInput(format!(
            "nothing to report in {}; run `train`, `specialize` or `eval` first",
            config.out_dir.display()
        )));
    }
    let path = config.path(SUMMARY);
    write_file(&path, out)?;
    Ok(RunOutcome {
        artifacts: vec![path],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.seed = 9;
        c.out_dir = PathBuf::from("/run");
        c.train.margin = 0.35;
        c.segment_lambda = Some(0.5);
        c.data.train = Some(PathBuf::from("/data/train.txt"));
        let mut back = RunConfig::default();
        let errs = back.apply_text(&c.to_text(), Path::new("/"), "x");
        assert!(errs.is_empty(), "{errs:?}");
        assert_eq!(back, c);
    }

    #[test]
    fn diagnostics_name_fields() {
        let err = RunConfig::load(
            None,
            &[
                "train.margin=-1".into(),
                "train.epochs=abc".into(),
                "bogus=1".into(),
                "eval.pairs_per_class=0".into(),
            ],
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let Error::Config(msgs) = err else {
            panic!("expected config error")
        };
        let all = msgs.join("\n");
        for needle in [
            "train.margin",
            "train.epochs",
            "bogus",
            "eval.pairs_per_class",
        ] {
            assert!(all.contains(needle), "{needle} missing from {all}");
        }
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut c = RunConfig::default();
        let errs = c.apply_text("data.eval=sub/m.txt\n", Path::new("/cfg"), "f");
        assert!(errs.is_empty());
        assert_eq!(c.data.eval, Some(PathBuf::from("/cfg/sub/m.txt")));
        let errs = c.apply_text("data.eval=\n", Path::new("/cfg"), "f");
        assert!(errs.is_empty());
        assert_eq!(c.data.eval, None);
    }

    #[test]
    fn deterministic_forces_one_worker() {
        let c = RunConfig {
            workers: 8,
            deterministic: true,
            ..RunConfig::default()
        };
        assert_eq!(c.effective_workers(), 1);
    }

    #[test]
    fn subcommand_names_round_trip() {
        for s in Subcommand::ALL {
            assert_eq!(Subcommand::parse(s.name()), Some(s));
        }
        assert_eq!(Subcommand::parse("fit"), None);
    }
}
