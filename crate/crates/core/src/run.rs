//! Run configuration, artifact layout and the commands behind the `reid`
//! binary.
//!
//! Every command hashes its fully resolved inputs and stamps that hash on
//! each artifact it writes. Nothing is overwritten unless asked.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_attribute_annotations, load_manifest, write_manifest, Attribute, DatasetSplit, ImageRecord, Role};
use crate::encoder::checkpoint::{load_checkpoint, read_checkpoint_header};
use crate::encoder::registry::{describe, TINY_NAME};
use crate::encoder::text::{check_joint_space, PromptTable, TextEmbeddingProvider};
use crate::encoder::{load_pretrained, reference_tiny_encoder, EncoderMeta, VisionEncoder};
use crate::error::{ReidError, Result};
use crate::eval::{evaluate, sidecar_path, EmbeddingCache, EmbeddingSet, EvalOptions, EvalReport};
use crate::images::ImageStore;
use crate::loss::LossConfig;
use crate::preprocess::{load_image, PreprocessConfig};
use crate::sampler::SamplerConfig;
use crate::scorecam::{localise_number, localise_prompt, similarity_cam, Baseline, CamFiles, CamMap, ScoreCamConfig};
use crate::synth::{generate, SynthConfig, SynthCorpus};
use crate::train::{embed_records, train, TrainConfig, TrainOutcome, TrainSettings};
use crate::zeroshot::{build_prompts_with, default_ks, default_template, probe_attribute, AttributeReport, PromptEmbeddings};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const BEST_REPORT: &str = "eval-best.json";

/// SHA-256 of the compact JSON serialization of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Fails with [`ReidError::Exists`] when `path` exists and `overwrite` is off.
pub fn guard(path: &Path, overwrite: bool) -> Result<()> {
    if !overwrite && path.exists() {
        return Err(ReidError::Exists(path.to_path_buf()));
    }
    Ok(())
}

fn guard_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if overwrite || !dir.exists() {
        return Ok(());
    }
    let mut entries = std::fs::read_dir(dir).map_err(|e| ReidError::io(dir, e))?;
    if entries.next().is_some() {
        return Err(ReidError::Exists(dir.to_path_buf()));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ReidError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| ReidError::io(path, e))
}

fn require_file(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = path
        .clone()
        .ok_or_else(|| ReidError::Config(format!("{what} is required")))?;
    if !p.is_file() {
        return Err(ReidError::Config(format!("{what} {} does not exist", p.display())));
    }
    Ok(p)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetPaths {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

/// Which weights to start from: a registry name, or a saved checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderChoice {
    pub name: String,
    pub drop_projection: bool,
    pub checkpoint: Option<PathBuf>,
}

impl Default for EncoderChoice {
    fn default() -> Self {
        Self {
            name: TINY_NAME.to_string(),
            drop_projection: false,
            checkpoint: None,
        }
    }
}

impl EncoderChoice {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn checkpoint(path: impl Into<PathBuf>) -> Self {
        Self {
            name: String::new(),
            drop_projection: false,
            checkpoint: Some(path.into()),
        }
    }

    /// Metadata without loading any weights.
    pub fn meta(&self) -> Result<EncoderMeta> {
        match &self.checkpoint {
            Some(p) => {
                let header = read_checkpoint_header(p)?;
                self.check_name(&header.meta.name)?;
                Ok(header.meta)
            }
            None => describe(&self.name, self.drop_projection),
        }
    }

    /// Loads the encoder. The reference tiny encoder is initialised from `seed`.
    pub fn load(&self, seed: u64) -> Result<VisionEncoder> {
        match &self.checkpoint {
            Some(p) => {
                let (enc, _) = load_checkpoint(p)?;
                self.check_name(enc.name())?;
                Ok(enc)
            }
            None if self.name == TINY_NAME => Ok(reference_tiny_encoder(seed)),
            None => load_pretrained(&self.name, self.drop_projection),
        }
    }

    /// Config hash stored in the checkpoint header, if any.
    pub fn source_hash(&self) -> Result<Option<String>> {
        match &self.checkpoint {
            Some(p) => Ok(read_checkpoint_header(p)?.config_hash),
            None => Ok(None),
        }
    }

    fn check_name(&self, found: &str) -> Result<()> {
        if !self.name.is_empty() && self.name != found {
            return Err(ReidError::Config(format!(
                "checkpoint holds {found}, but the config names {}",
                self.name
            )));
        }
        Ok(())
    }
}

/// Configuration of a training run.
///
/// `preprocess` left empty is filled from the encoder's input side and
/// channel statistics. Resolution copies `seed` into the sampler and
/// trainer and the sampler batch size and flip probability into the trainer,
/// so the serialized config has a single source for each.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetPaths,
    pub encoder: EncoderChoice,
    pub preprocess: Option<PreprocessConfig>,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ReidError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks paths without touching any data.
    pub fn validate_paths(&self) -> Result<()> {
        require_file(&self.dataset.train, "dataset.train")?;
        require_file(&self.dataset.eval, "dataset.eval")?;
        if self.output_dir.is_none() {
            return Err(ReidError::Config("output_dir is required".into()));
        }
        if let Some(p) = &self.encoder.checkpoint {
            if !p.is_file() {
                return Err(ReidError::Config(format!("checkpoint {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Applies defaults that depend on the encoder and validates everything.
    pub fn resolve(mut self, meta: &EncoderMeta) -> Result<Self> {
        let pre = match self.preprocess.take() {
            Some(p) => {
                if p.target_size != meta.input_side {
                    return Err(ReidError::Shape(format!(
                        "preprocess.target_size is {}, but {} takes {} px inputs",
                        p.target_size, meta.name, meta.input_side
                    )));
                }
                p
            }
            None => PreprocessConfig {
                target_size: meta.input_side,
                channel_mean: meta.channel_mean,
                channel_std: meta.channel_std,
                flip_probability: self.train.flip_probability,
            },
        };
        pre.validate()?;
        self.sampler.seed = self.seed;
        self.sampler.drop_last = true;
        self.sampler.validate()?;
        self.train.seed = self.seed;
        self.train.batch_size = self.sampler.batch_size;
        self.train.flip_probability = pre.flip_probability;
        let (lr_max, lr_min) = self.train.learning_rates(meta.kind);
        self.train.lr_max = Some(lr_max);
        self.train.lr_min = Some(lr_min);
        self.train.validate()?;
        self.loss.validate()?;
        self.eval.rerank_params.validate(usize::MAX)?;
        self.preprocess = Some(pre);
        Ok(self)
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub config_hash: String,
    pub outcome: TrainOutcome,
}

/// Ingest, sample, train and evaluate. The resolved config is written to
/// `<output_dir>/config.resolved.json` before any data is read.
pub fn cmd_train(config: RunConfig, overwrite: bool) -> Result<TrainRun> {
    config.validate_paths()?;
    let meta = config.encoder.meta()?;
    let config = config.resolve(&meta)?;
    let dir = config.output_dir.clone().expect("validated");
    guard_dir(&dir, overwrite)?;
    create_dir(&dir)?;
    let hash = config.hash()?;
    write_json(&dir.join(RESOLVED_CONFIG), &config)?;
    log::info!("run {} -> {}", &hash[..12], dir.display());

    let train_split = load_manifest(config.dataset.train.as_deref().expect("validated"))?;
    let eval_split = load_manifest(config.dataset.eval.as_deref().expect("validated"))?;
    let pre = config.preprocess.clone().expect("resolved");
    let images = ImageStore::load(train_split.records.iter().chain(&eval_split.records), &pre)?;
    let enc = config.encoder.load(config.seed)?;

    let settings = TrainSettings {
        train: config.train.clone(),
        loss: config.loss.clone(),
        eval: config.eval.clone(),
        config_hash: Some(hash.clone()),
    };
    let mut outcome = train(&settings, &train_split, &eval_split, &images, enc, Some(&dir))?;
    outcome.best_report.config_hash = Some(hash.clone());
    outcome.best_report.save(&dir.join(BEST_REPORT))?;
    Ok(TrainRun {
        dir,
        config,
        config_hash: hash,
        outcome,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub path: PathBuf,
    pub name: crate::data::SplitName,
    pub records: usize,
    pub queries: usize,
    pub gallery: usize,
    pub players: usize,
    pub players_without_query: Vec<String>,
}

impl SplitSummary {
    fn of(path: &Path, s: &DatasetSplit) -> Self {
        Self {
            path: path.to_path_buf(),
            name: s.name,
            records: s.records.len(),
            queries: s.queries().count(),
            gallery: s.gallery().count(),
            players: s.players.len(),
            players_without_query: s.players_without_query().into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub splits: Vec<SplitSummary>,
    pub merged: Option<SplitSummary>,
}

/// Validates manifests and reports their contents. With `merge_into`, every
/// split is concatenated (in the given order, under the first split's name)
/// and written there as a new manifest.
pub fn cmd_ingest(manifests: &[PathBuf], merge_into: Option<&Path>, overwrite: bool) -> Result<IngestSummary> {
    if manifests.is_empty() {
        return Err(ReidError::Config("no manifest given".into()));
    }
    if let Some(out) = merge_into {
        guard(out, overwrite)?;
    }
    let splits = manifests
        .iter()
        .map(|p| load_manifest(p))
        .collect::<Result<Vec<_>>>()?;
    let summaries = manifests.iter().zip(&splits).map(|(p, s)| SplitSummary::of(p, s)).collect();
    let merged = match merge_into {
        Some(out) => {
            let mut it = splits.into_iter();
            let first = it.next().expect("non-empty");
            let all = it.try_fold(first, DatasetSplit::merge)?;
            write_manifest(out, &all)?;
            Some(SplitSummary::of(out, &all))
        }
        None => None,
    };
    Ok(IngestSummary {
        splits: summaries,
        merged,
    })
}

/// Renders the synthetic corpus into `dir`.
pub fn cmd_synth(cfg: &SynthConfig, dir: &Path, overwrite: bool) -> Result<SynthCorpus> {
    guard_dir(dir, overwrite)?;
    generate(cfg, dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedArgs {
    pub encoder: EncoderChoice,
    pub manifest: PathBuf,
    /// Only records of this role; all records when `None`.
    pub role: Option<Role>,
    pub seed: u64,
    pub output: PathBuf,
}

/// Embeds a split in eval mode and writes an embedding cache.
pub fn cmd_embed(args: &EmbedArgs, overwrite: bool) -> Result<EmbeddingCache> {
    guard(&args.output, overwrite)?;
    guard(&sidecar_path(&args.output), overwrite)?;
    let split = load_manifest(&args.manifest)?;
    let records: Vec<&ImageRecord> = split
        .records
        .iter()
        .filter(|r| args.role.is_none_or(|role| r.role == role))
        .collect();
    if records.is_empty() {
        return Err(ReidError::NoRecords(args.manifest.clone()));
    }
    let enc = args.encoder.load(args.seed)?;
    let images = ImageStore::load(records.iter().copied(), &enc.preprocess_config(0.0))?;
    let set = embed_records(&enc, &records, &images)?;
    let hash = match args.encoder.source_hash()? {
        Some(h) => h,
        None => config_hash(args)?,
    };
    let cache = EmbeddingCache {
        set,
        encoder_name: enc.name().to_string(),
        checkpoint: args.encoder.checkpoint.as_ref().map(|p| p.display().to_string()),
        fine_tuned: enc.is_fine_tuned(),
        config_hash: Some(hash),
    };
    if let Some(parent) = args.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    cache.save(&args.output)?;
    Ok(cache)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateArgs {
    pub query_cache: PathBuf,
    pub gallery_cache: PathBuf,
    pub options: EvalOptions,
    pub output: Option<PathBuf>,
}

/// Raw and (optionally) re-ranked retrieval metrics for two caches.
pub fn cmd_evaluate(args: &EvaluateArgs, overwrite: bool) -> Result<EvalReport> {
    if let Some(out) = &args.output {
        guard(out, overwrite)?;
    }
    let q = EmbeddingCache::load(&args.query_cache)?;
    let g = EmbeddingCache::load(&args.gallery_cache)?;
    if q.set.dim() != g.set.dim() {
        return Err(ReidError::Shape(format!(
            "query cache has dimension {}, gallery cache {}",
            q.set.dim(),
            g.set.dim()
        )));
    }
    if q.encoder_name != g.encoder_name || q.checkpoint != g.checkpoint {
        log::warn!(
            "query and gallery caches come from different encoders ({} vs {})",
            q.encoder_name,
            g.encoder_name
        );
    }
    let mut report = evaluate(&q.set, &g.set, &args.options)?;
    report.encoder_name = Some(q.encoder_name.clone());
    report.zero_shot = !(q.fine_tuned || g.fine_tuned);
    report.config_hash = Some(config_hash(&(args, &q.config_hash, &g.config_hash))?);
    if let Some(out) = &args.output {
        report.save(out)?;
    }
    Ok(report)
}

/// Where zero-shot image embeddings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroshotSource {
    /// A precomputed embedding cache.
    Cache(PathBuf),
    /// Embed every record of a manifest with the given encoder.
    Encoder { encoder: EncoderChoice, manifest: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroshotArgs {
    pub source: ZeroshotSource,
    pub annotations: PathBuf,
    pub prompt_table: PathBuf,
    pub attributes: Vec<Attribute>,
    /// Template overrides; attributes not listed use the default template.
    #[serde(default)]
    pub templates: BTreeMap<Attribute, String>,
    pub output_dir: PathBuf,
}

fn attribute_outputs(dir: &Path, a: Attribute) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{a}.json")),
        dir.join(format!("{a}-confusion.csv")),
    )
}

/// One [`AttributeReport`] per requested attribute, written as
/// `<attribute>.json` and `<attribute>-confusion.csv`.
pub fn cmd_zeroshot(args: &ZeroshotArgs, overwrite: bool) -> Result<Vec<AttributeReport>> {
    if args.attributes.is_empty() {
        return Err(ReidError::Config("no attribute requested".into()));
    }
    for &a in &args.attributes {
        let (json, csv) = attribute_outputs(&args.output_dir, a);
        guard(&json, overwrite)?;
        guard(&csv, overwrite)?;
    }
    let table = PromptTable::load(&args.prompt_table)?;
    let (embeddings, encoder_name) = match &args.source {
        ZeroshotSource::Cache(path) => {
            let cache = EmbeddingCache::load(path)?;
            if cache.fine_tuned {
                return Err(ReidError::JointSpace(format!(
                    "{} comes from a fine-tuned checkpoint; its embeddings no longer match the text encoder",
                    path.display()
                )));
            }
            if cache.encoder_name != table.encoder_name() {
                return Err(ReidError::JointSpace(format!(
                    "cache was embedded with {}, prompt table belongs to {}",
                    cache.encoder_name,
                    table.encoder_name()
                )));
            }
            (cache.set, cache.encoder_name)
        }
        ZeroshotSource::Encoder { encoder, manifest } => {
            let meta = encoder.meta()?;
            check_joint_space(&meta, &table)?;
            let enc = encoder.load(0)?;
            let split = load_manifest(manifest)?;
            let records: Vec<&ImageRecord> = split.records.iter().collect();
            let images = ImageStore::load(records.iter().copied(), &enc.preprocess_config(0.0))?;
            let set: EmbeddingSet = embed_records(&enc, &records, &images)?;
            (set, enc.name().to_string())
        }
    };
    let annotations = load_attribute_annotations(&args.annotations, None)?;
    let hash = config_hash(args)?;
    create_dir(&args.output_dir)?;
    let mut out = Vec::with_capacity(args.attributes.len());
    for &a in &args.attributes {
        let template = args.templates.get(&a).map(String::as_str).unwrap_or(default_template(a));
        let prompts = PromptEmbeddings::new(build_prompts_with(a, template)?, &table)?;
        let mut report = probe_attribute(&embeddings, &annotations, &prompts, &default_ks(a))?;
        report.encoder_name = Some(encoder_name.clone());
        report.config_hash = Some(hash.clone());
        let (json, csv) = attribute_outputs(&args.output_dir, a);
        report.save_json(&json)?;
        report.save_confusion_csv(&csv)?;
        out.push(report);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainTarget {
    /// Which regions of the explained image make it similar to this query.
    Query(PathBuf),
    /// Free-text prompt looked up in the prompt table.
    Prompt(String),
    /// The jersey-number localisation prompt for this number.
    Number(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainArgs {
    pub encoder: EncoderChoice,
    pub seed: u64,
    pub image: PathBuf,
    pub target: ExplainTarget,
    pub prompt_table: Option<PathBuf>,
    pub layer_tag: String,
    pub batch_chunk: usize,
    pub baseline: Baseline,
    pub output_dir: PathBuf,
    pub stem: String,
}

/// Score-CAM map of `image`, written as `<stem>.png`, `<stem>.json` and
/// `<stem>-overlay.png`.
pub fn cmd_explain(args: &ExplainArgs, overwrite: bool) -> Result<(CamMap, CamFiles)> {
    for suffix in [".png", ".json", "-overlay.png"] {
        guard(&args.output_dir.join(format!("{}{suffix}", args.stem)), overwrite)?;
    }
    let cfg = ScoreCamConfig {
        layer_tag: args.layer_tag.clone(),
        batch_chunk: args.batch_chunk,
        baseline: args.baseline,
    };
    cfg.validate()?;
    let table = match (&args.target, &args.prompt_table) {
        (ExplainTarget::Query(_), _) => None,
        (_, Some(p)) => Some(PromptTable::load(p)?),
        (_, None) => return Err(ReidError::Config("prompt mode needs a prompt table".into())),
    };
    if let Some(t) = &table {
        check_joint_space(&args.encoder.meta()?, t)?;
    }
    let enc = args.encoder.load(args.seed)?;
    let image = load_image(&args.image)?;
    let map = match &args.target {
        ExplainTarget::Query(q) => {
            let query = load_image(q)?;
            let name = q.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            similarity_cam(&enc, &query, &image, &format!("similarity to {name}"), &cfg)?
        }
        ExplainTarget::Prompt(p) => localise_prompt(&enc, table.as_ref().expect("loaded"), p, &image, &cfg)?,
        ExplainTarget::Number(c) => localise_number(&enc, table.as_ref().expect("loaded"), &image, *c, &cfg)?,
    };
    let hash = config_hash(args)?;
    let files = map.save(&args.output_dir, &args.stem, Some(&image), Some(&hash))?;
    Ok((map, files))
}
