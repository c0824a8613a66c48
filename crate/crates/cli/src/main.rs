use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use reid_core::data::{Attribute, Role};
use reid_core::eval::{EvalOptions, RerankParams};
use reid_core::run::{
    cmd_embed, cmd_evaluate, cmd_explain, cmd_ingest, cmd_synth, cmd_train, cmd_zeroshot, EmbedArgs, EncoderChoice,
    EvaluateArgs, ExplainArgs, ExplainTarget, RunConfig, ZeroshotArgs, ZeroshotSource,
};
use reid_core::scorecam::Baseline;
use reid_core::synth::SynthConfig;
use serde_json::json;

#[derive(Parser)]
#[command(name = "reid", version, about = "Player re-identification: fine-tuning, retrieval evaluation, zero-shot probing and saliency")]
struct Cli {
    /// Replace existing artifacts instead of refusing.
    #[arg(long, global = true)]
    overwrite: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic colour-coded corpus with train and test manifests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        identities: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Validate manifests and print a summary.
    Ingest {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        /// Concatenate all manifests into this file.
        #[arg(long, value_name = "OUT")]
        merge_splits: Option<PathBuf>,
    },
    /// Fine-tune an encoder from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        encoder: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Training manifest.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Evaluation manifest.
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Embed a split into a cache file.
    Embed {
        #[command(flatten)]
        encoder: EncoderArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        role: Option<RoleArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval metrics with and without re-ranking.
    Evaluate {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        no_rerank: bool,
        #[arg(long, default_value_t = 20)]
        k1: usize,
        #[arg(long, default_value_t = 6)]
        k2: usize,
        #[arg(long, default_value_t = 0.3)]
        lambda: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zero-shot attribute classification with a prompt table.
    Zeroshot {
        #[command(flatten)]
        encoder: EncoderArgs,
        /// Precomputed embedding cache; replaces --encoder/--checkpoint.
        #[arg(long, conflicts_with = "manifest")]
        cache: Option<PathBuf>,
        /// Manifest to embed when no cache is given.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        /// Attributes to probe: jersey_number, jersey_colour, sex, skin_colour.
        #[arg(long = "attribute")]
        attributes: Vec<String>,
        /// Template override as ATTRIBUTE=TEMPLATE, with `{c}` for the class.
        #[arg(long = "template", value_name = "ATTRIBUTE=TEMPLATE")]
        templates: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score-CAM saliency for an image towards a query image or a prompt.
    Explain {
        #[command(flatten)]
        encoder: EncoderArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, group = "target")]
        query: Option<PathBuf>,
        #[arg(long, group = "target")]
        prompt: Option<String>,
        #[arg(long, group = "target")]
        number: Option<u32>,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        layer: String,
        #[arg(long, default_value_t = 32)]
        batch_chunk: usize,
        #[arg(long)]
        zero_baseline: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "cam")]
        stem: String,
    },
}

#[derive(Args)]
struct EncoderArgs {
    /// Registered encoder name.
    #[arg(long, default_value = "tiny")]
    encoder: String,
    /// Saved checkpoint; takes precedence over --encoder.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    drop_projection: bool,
    /// Initialisation seed for the reference tiny encoder.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl EncoderArgs {
    fn choice(&self) -> EncoderChoice {
        match &self.checkpoint {
            Some(p) => EncoderChoice::checkpoint(p),
            None => EncoderChoice {
                name: self.encoder.clone(),
                drop_projection: self.drop_projection,
                checkpoint: None,
            },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Query,
    Gallery,
}

fn print(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value"));
}

fn run(cli: Cli) -> Result<()> {
    let ow = cli.overwrite;
    match cli.command {
        Command::Synth { out, identities, seed } => {
            let cfg = SynthConfig {
                identities,
                seed,
                ..Default::default()
            };
            let c = cmd_synth(&cfg, &out, ow)?;
            print(&json!({
                "train": c.train_manifest,
                "test": c.test_manifest,
                "train_records": c.train.records.len(),
                "test_records": c.test.records.len(),
            }));
        }
        Command::Ingest { manifests, merge_splits } => {
            let s = cmd_ingest(&manifests, merge_splits.as_deref(), ow)?;
            print(&serde_json::to_value(&s)?);
        }
        Command::Train {
            config,
            seed,
            output_dir,
            epochs,
            encoder,
            checkpoint,
            train,
            eval,
        } => {
            let mut cfg = RunConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.output_dir = output_dir.or(cfg.output_dir);
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            if let Some(name) = encoder {
                cfg.encoder.name = name;
            }
            cfg.encoder.checkpoint = checkpoint.or(cfg.encoder.checkpoint);
            cfg.dataset.train = train.or(cfg.dataset.train);
            cfg.dataset.eval = eval.or(cfg.dataset.eval);
            let r = cmd_train(cfg, ow)?;
            let rep = &r.outcome.best_report;
            print(&json!({
                "run_dir": r.dir,
                "config_hash": r.config_hash,
                "best_checkpoint": r.outcome.best_checkpoint,
                "map_no_rerank": rep.map_no_rerank(),
                "map_rerank": rep.map_rerank(),
                "rank1": rep.raw.rank(1),
                "rank5": rep.raw.rank(5),
            }));
        }
        Command::Embed {
            encoder,
            manifest,
            role,
            out,
        } => {
            let args = EmbedArgs {
                encoder: encoder.choice(),
                manifest,
                role: role.map(|r| match r {
                    RoleArg::Query => Role::Query,
                    RoleArg::Gallery => Role::Gallery,
                }),
                seed: encoder.seed,
                output: out,
            };
            let c = cmd_embed(&args, ow)?;
            print(&json!({
                "cache": args.output,
                "rows": c.set.len(),
                "dim": c.set.dim(),
                "encoder": c.encoder_name,
                "fine_tuned": c.fine_tuned,
            }));
        }
        Command::Evaluate {
            query,
            gallery,
            no_rerank,
            k1,
            k2,
            lambda,
            out,
        } => {
            let args = EvaluateArgs {
                query_cache: query,
                gallery_cache: gallery,
                options: EvalOptions {
                    rerank: !no_rerank,
                    rerank_params: RerankParams { k1, k2, lambda },
                    ..Default::default()
                },
                output: out,
            };
            let rep = cmd_evaluate(&args, ow)?;
            print(&json!({
                "map_no_rerank": rep.map_no_rerank(),
                "map_rerank": rep.map_rerank(),
                "rank1": rep.raw.rank(1),
                "rank5": rep.raw.rank(5),
                "rank1_rerank": rep.reranked.as_ref().and_then(|r| r.rank(1)),
                "rank5_rerank": rep.reranked.as_ref().and_then(|r| r.rank(5)),
                "excluded_queries": rep.excluded_queries,
            }));
        }
        Command::Zeroshot {
            encoder,
            cache,
            manifest,
            annotations,
            prompts,
            attributes,
            templates,
            out,
        } => {
            let source = match (cache, manifest) {
                (Some(c), _) => ZeroshotSource::Cache(c),
                (None, Some(m)) => ZeroshotSource::Encoder {
                    encoder: encoder.choice(),
                    manifest: m,
                },
                (None, None) => anyhow::bail!("give either --cache or --manifest"),
            };
            let attributes = attributes
                .iter()
                .map(|a| a.parse::<Attribute>())
                .collect::<reid_core::Result<Vec<_>>>()?;
            let mut tmpl = BTreeMap::new();
            for t in &templates {
                let (a, body) = t
                    .split_once('=')
                    .with_context(|| format!("template `{t}` is not ATTRIBUTE=TEMPLATE"))?;
                tmpl.insert(a.parse::<Attribute>()?, body.to_string());
            }
            let args = ZeroshotArgs {
                source,
                annotations,
                prompt_table: prompts,
                attributes,
                templates: tmpl,
                output_dir: out,
            };
            let reports = cmd_zeroshot(&args, ow)?;
            let rows: Vec<_> = reports
                .iter()
                .map(|r| {
                    json!({
                        "attribute": r.attribute,
                        "num_samples": r.num_samples,
                        "topk_accuracy": r.topk_accuracy,
                        "macro_precision": r.macro_precision,
                        "macro_recall": r.macro_recall,
                        "macro_f1": r.macro_f1,
                    })
                })
                .collect();
            print(&json!(rows));
        }
        Command::Explain {
            encoder,
            image,
            query,
            prompt,
            number,
            prompts,
            layer,
            batch_chunk,
            zero_baseline,
            out,
            stem,
        } => {
            let target = match (query, prompt, number) {
                (Some(q), _, _) => ExplainTarget::Query(q),
                (_, Some(p), _) => ExplainTarget::Prompt(p),
                (_, _, Some(n)) => ExplainTarget::Number(n),
                _ => anyhow::bail!("give one of --query, --prompt or --number"),
            };
            let args = ExplainArgs {
                encoder: encoder.choice(),
                seed: encoder.seed,
                image,
                target,
                prompt_table: prompts,
                layer_tag: layer,
                batch_chunk,
                baseline: if zero_baseline { Baseline::ZeroImage } else { Baseline::None },
                output_dir: out,
                stem,
            };
            let (_, files) = cmd_explain(&args, ow)?;
            print(&json!({
                "map": files.map_png,
                "overlay": files.overlay_png,
                "metadata": files.metadata_json,
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", json!({ "error": chain.join(": ") }));
            log::debug!("{e:?}");
            ExitCode::FAILURE
        }
    }
}
