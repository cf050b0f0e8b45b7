//! The `cgb` command line: extract → featurize → stats → pretrain → align →
//! adapt → generate, plus the gradient-check harness and a toy corpus
//! generator. Every command prints a JSON report on stdout.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{evaluate_stage3, generate, pretrain_decoder, soft_prompt, train_stage3, Decoder, DecoderDims, FrozenDecoder, Stage3Report};
use crate::bridge::train::{train_stage2, GraphSide, Stage2Report};
use crate::bridge::{Bridge, BridgeDims};
use crate::cge::{train_stage1, Cge, CgeDims, Stage1Report};
use crate::config::PipelineConfig;
use crate::cpg::{extract, obfuscate_identifiers, Language, SourceUnit};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::store::{encode_features, load_dataset, persist_dataset, read_graphs_jsonl, write_graphs_jsonl, DatasetStats, FeaturedGraph};
use crate::synth::{synth_corpus, TaskExample};
use crate::verify::{run_gradcheck, Component, GradcheckReport};

/// Environment variable consulted for the seed when neither `--seed` nor
/// the config file sets one.
pub const SEED_ENV: &str = "CGB_SEED";

#[derive(Debug, Parser)]
#[command(name = "cgb", version, about = "Code property graphs and graph-to-LM bridge training")]
pub struct Cli {
    /// Directory every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Worker threads for extraction and tensor kernels; 1 gives bit-exact reruns.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded toy corpus: one source file per program plus task files.
    Synth(SynthArgs),
    /// Parse source files into code property graphs (JSONL).
    Extract(ExtractArgs),
    /// Attach hashed node and edge features and persist a dataset directory.
    Featurize(FeaturizeArgs),
    /// Dataset statistics.
    Stats(StatsArgs),
    /// Stage 1: pretrain the graph encoder.
    Pretrain(PretrainArgs),
    /// Stage 2: align a bridge to graph/code pairs.
    Align(AlignArgs),
    /// Stage 3: tune the bridge through a frozen decoder.
    Adapt(AdaptArgs),
    /// Greedy generation for a task file.
    Generate(GenerateArgs),
    /// Finite-difference gradient check of one training objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML config; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `section.key=value` override applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    /// Extra programs written to `heldout.jsonl` instead of `tasks.jsonl`.
    #[arg(long, default_value_t = 0)]
    pub heldout: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ExtractArgs {
    #[arg(long, default_value = "python")]
    pub lang: Language,
    /// A source file or a directory scanned recursively.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Rename identifiers with this seed before extraction.
    #[arg(long)]
    pub obfuscate_seed: Option<u64>,
    /// Check the AST tree invariant of every graph; violators are rejected.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Debug, Clone, Args)]
pub struct FeaturizeArgs {
    #[arg(long)]
    pub graphs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Feature dimension; defaults to `cge.input` of the config.
    #[arg(long)]
    pub dim: Option<usize>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    /// Dataset directory or a graphs JSONL file.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoint stem; writes `<out>.cgfb`, `<out>.json` and `<out>.report.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Restrict training to the ids of this task file.
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    #[arg(long)]
    pub cge: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub tasks: PathBuf,
    /// Held-out tasks whose answer NLL is reported before and after.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long)]
    pub cge: PathBuf,
    #[arg(long)]
    pub bridge: PathBuf,
    /// Decoder checkpoint stem; pretrained on the task texts and written
    /// here when it does not exist yet.
    #[arg(long)]
    pub decoder: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub cge: PathBuf,
    #[arg(long)]
    pub bridge: PathBuf,
    #[arg(long)]
    pub decoder: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub component: Component,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negate the analytic gradient of this parameter group.
    #[arg(long, hide = true)]
    pub flip: Option<String>,
}

/// Resolves command paths against `--workdir`.
#[derive(Debug, Clone)]
pub struct Context {
    pub workdir: PathBuf,
}

impl Context {
    pub fn new(workdir: impl Into<PathBuf>) -> Self {
        Context { workdir: workdir.into() }
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    /// Effective config and seed: `--seed`, then the config's `seed`, then
    /// `CGB_SEED`, then 0.
    pub fn config(&self, run: &RunArgs) -> Result<(PipelineConfig, u64)> {
        let base = match &run.config {
            Some(p) => PipelineConfig::load(&self.path(p))?,
            None => PipelineConfig::default(),
        };
        let cfg = base.with_overrides(&run.overrides)?;
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        let seed = run.seed.or(cfg.seed).or(env).unwrap_or(0);
        Ok((cfg, seed))
    }
}

/// Exit status for a failed command: 2 for configuration errors, 3 for a
/// diverged loss, 1 for everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::NonFiniteLoss { .. } => 3,
        _ => 1,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn report_path(stem: &Path) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".report.json");
    PathBuf::from(s)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

pub fn read_tasks(path: &Path) -> Result<Vec<TaskExample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    create_parent(path)?;
    let mut w = BufWriter::new(File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub programs: usize,
    pub tasks: usize,
    pub heldout: usize,
    pub out: PathBuf,
}

pub fn cmd_synth(ctx: &Context, args: &SynthArgs) -> Result<SynthReport> {
    let dir = ctx.path(&args.out);
    let src = dir.join("src");
    fs::create_dir_all(&src)?;
    let progs = synth_corpus(args.n + args.heldout, args.seed);
    for p in &progs {
        fs::write(src.join(format!("{}.py", p.id)), &p.code)?;
    }
    let tasks: Vec<TaskExample> = progs.iter().map(TaskExample::from).collect();
    write_jsonl(&dir.join("tasks.jsonl"), &tasks[..args.n])?;
    if args.heldout > 0 {
        write_jsonl(&dir.join("heldout.jsonl"), &tasks[args.n..])?;
    }
    Ok(SynthReport {
        programs: progs.len(),
        tasks: args.n,
        heldout: args.heldout,
        out: args.out.clone(),
    })
}

// -------------------------------------------------------------- extract

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractReport {
    pub parsed: usize,
    pub rejected: usize,
    pub out: PathBuf,
}

fn collect_sources(root: &Path, ext: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(root)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_sources(&p, ext, out)?;
        } else if p.extension().is_some_and(|e| e == ext) {
            out.push(p);
        }
    }
    Ok(())
}

/// Unit id: the path below the input directory without its extension.
fn unit_id(root: &Path, file: &Path) -> String {
    let rel = file.strip_prefix(root).unwrap_or(file).with_extension("");
    let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
    if parts.is_empty() {
        file.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
    } else {
        parts.join("/")
    }
}

pub fn cmd_extract(ctx: &Context, args: &ExtractArgs) -> Result<ExtractReport> {
    let input = ctx.path(&args.input);
    let (root, files) = if input.is_dir() {
        let mut files = Vec::new();
        collect_sources(&input, args.lang.extension(), &mut files)?;
        (input.clone(), files)
    } else {
        File::open(&input)?;
        (input.parent().map(Path::to_path_buf).unwrap_or_default(), vec![input.clone()])
    };
    let sources = files
        .iter()
        .map(|f| Ok((unit_id(&root, f), fs::read(f)?)))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<Result<_>> = sources
        .par_iter()
        .map(|(id, bytes)| {
            let code = String::from_utf8(bytes.clone()).map_err(|_| Error::InvalidUnit("source is not UTF-8".into()))?;
            let mut unit = SourceUnit::new(id.clone(), args.lang, code)?;
            if let Some(seed) = args.obfuscate_seed {
                unit = obfuscate_identifiers(&unit, seed)?;
            }
            let g = extract(&unit)?;
            if args.verify {
                g.validate()?;
            }
            Ok(g)
        })
        .collect();
    let mut graphs = Vec::new();
    let mut rejected = 0;
    for ((id, _), r) in sources.iter().zip(results) {
        match r {
            Ok(g) => graphs.push(g),
            Err(e) => {
                log::warn!("rejected `{id}`: {e}");
                rejected += 1;
            }
        }
    }
    let out = ctx.path(&args.out);
    create_parent(&out)?;
    let mut w = BufWriter::new(File::create(&out)?);
    write_graphs_jsonl(&mut w, &graphs)?;
    w.flush()?;
    Ok(ExtractReport {
        parsed: graphs.len(),
        rejected,
        out: args.out.clone(),
    })
}

// ------------------------------------------------------------ featurize

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturizeReport {
    pub graphs: usize,
    pub dim: usize,
    pub out: PathBuf,
}

pub fn cmd_featurize(ctx: &Context, args: &FeaturizeArgs) -> Result<FeaturizeReport> {
    let (cfg, _) = ctx.config(&args.run)?;
    let dim = args.dim.unwrap_or(cfg.cge.input);
    if dim == 0 {
        return Err(Error::Config("feature dimension must be at least 1".into()));
    }
    let graphs = read_graphs_jsonl(&ctx.path(&args.graphs))?;
    let featured: Vec<FeaturedGraph> = graphs.par_iter().map(|g| encode_features(g, dim)).collect();
    persist_dataset(&featured, &ctx.path(&args.out))?;
    Ok(FeaturizeReport {
        graphs: featured.len(),
        dim,
        out: args.out.clone(),
    })
}

// ---------------------------------------------------------------- stats

pub fn cmd_stats(ctx: &Context, args: &StatsArgs) -> Result<DatasetStats> {
    let stats = crate::store::dataset_stats(&ctx.path(&args.dataset))?;
    if let Some(out) = &args.out {
        write_json(&ctx.path(out), &stats)?;
    }
    Ok(stats)
}

// ----------------------------------------------------------- checkpoints

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ModelConfig {
    Cge { dims: CgeDims },
    Bridge { dims: BridgeDims },
    Decoder { dims: DecoderDims },
}

fn save_model(params: &ParamStore, stem: &Path, model: ModelConfig) -> Result<()> {
    create_parent(stem)?;
    params.save(stem, serde_json::to_value(model)?)
}

fn load_model(stem: &Path) -> Result<(ParamStore, ModelConfig)> {
    let (params, config) = ParamStore::load(stem)?;
    let model = serde_json::from_value(config)
        .map_err(|e| Error::Format(format!("{}: unrecognised checkpoint config: {e}", stem.display())))?;
    Ok((params, model))
}

pub fn load_cge(stem: &Path) -> Result<Cge> {
    match load_model(stem)? {
        (p, ModelConfig::Cge { dims }) => Cge::from_params(dims, p),
        _ => Err(Error::Format(format!("{} is not an encoder checkpoint", stem.display()))),
    }
}

pub fn load_bridge(stem: &Path) -> Result<Bridge> {
    match load_model(stem)? {
        (p, ModelConfig::Bridge { dims }) => Bridge::from_params(dims, p),
        _ => Err(Error::Format(format!("{} is not a bridge checkpoint", stem.display()))),
    }
}

pub fn load_decoder(stem: &Path) -> Result<Decoder> {
    match load_model(stem)? {
        (params, ModelConfig::Decoder { dims }) => {
            let fresh = Decoder::new(dims, 0)?;
            let names: Vec<&String> = fresh.params.names().collect();
            if !names.iter().copied().eq(params.names()) {
                return Err(Error::Format(format!("{} does not match the decoder layout", stem.display())));
            }
            Ok(Decoder { dims, params })
        }
        _ => Err(Error::Format(format!("{} is not a decoder checkpoint", stem.display()))),
    }
}

fn stem_exists(stem: &Path) -> bool {
    let mut s = stem.as_os_str().to_owned();
    s.push(".json");
    Path::new(&s).exists()
}

// ------------------------------------------------------------- pretrain

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub seed: u64,
    /// Effective configuration after defaults and overrides.
    pub config: PipelineConfig,
    pub graphs: usize,
    pub parameters: usize,
    pub checkpoint: PathBuf,
    pub checksum: String,
    pub stage1: Stage1Report,
}

pub fn cmd_pretrain(ctx: &Context, args: &PretrainArgs) -> Result<PretrainReport> {
    let (cfg, seed) = ctx.config(&args.run)?;
    let corpus = load_dataset(&ctx.path(&args.dataset))?;
    check_feature_dim(&corpus, cfg.cge.input)?;
    let (cge, stage1) = train_stage1(&corpus, &cfg.cge, seed)?;
    let stem = ctx.path(&args.out);
    save_model(&cge.params, &stem, ModelConfig::Cge { dims: cge.dims.clone() })?;
    let report = PretrainReport {
        seed,
        config: cfg.clone(),
        graphs: corpus.len(),
        parameters: cge.params.num_parameters(),
        checkpoint: args.out.clone(),
        checksum: cge.params.checksum()?,
        stage1,
    };
    write_json(&report_path(&stem), &report)?;
    Ok(report)
}

fn check_feature_dim(corpus: &[FeaturedGraph], expected: usize) -> Result<()> {
    match corpus.first() {
        Some(g) if g.feature_dim != expected => Err(Error::Config(format!(
            "dataset features are {}-dimensional but `cge.input` = {expected}",
            g.feature_dim
        ))),
        _ => Ok(()),
    }
}

/// Dataset graphs in task order; every task id must be present.
fn graphs_for(corpus: &[FeaturedGraph], tasks: &[TaskExample]) -> Result<Vec<FeaturedGraph>> {
    let by_id: HashMap<&str, &FeaturedGraph> = corpus.iter().map(|g| (g.graph.source_id.as_str(), g)).collect();
    tasks
        .iter()
        .map(|t| {
            by_id
                .get(t.id.as_str())
                .map(|g| (*g).clone())
                .ok_or_else(|| Error::Format(format!("task `{}` has no graph in the dataset", t.id)))
        })
        .collect()
}

// ---------------------------------------------------------------- align

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub seed: u64,
    /// Effective configuration after defaults and overrides.
    pub config: PipelineConfig,
    pub pairs: usize,
    pub parameters: usize,
    pub checkpoint: PathBuf,
    pub checksum: String,
    /// Written when the encoder is fine-tuned alongside the bridge.
    pub cge_checkpoint: Option<PathBuf>,
    pub stage2: Stage2Report,
}

fn sibling(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cmd_align(ctx: &Context, args: &AlignArgs) -> Result<AlignReport> {
    let (cfg, seed) = ctx.config(&args.run)?;
    let corpus = load_dataset(&ctx.path(&args.dataset))?;
    let graphs = match &args.tasks {
        Some(t) => graphs_for(&corpus, &read_tasks(&ctx.path(t))?)?,
        None => corpus,
    };
    let cge = load_cge(&ctx.path(&args.cge))?;
    check_feature_dim(&graphs, cge.dims.d_in)?;
    let codes: Vec<String> = graphs.iter().map(|g| g.graph.code.clone()).collect();
    let dims = BridgeDims::new(&cfg.bridge, cge.dims.d_out, cfg.decoder.d_llm);
    let side = GraphSide::new(&cge, &graphs, cfg.stage2.finetune_cge)?;
    let (bridge, stage2) = train_stage2(&side, &codes, dims, &cfg.bridge, &cfg.stage2, seed)?;
    let stem = ctx.path(&args.out);
    save_model(&bridge.params, &stem, ModelConfig::Bridge { dims })?;
    let cge_checkpoint = if cfg.stage2.finetune_cge {
        let rel = sibling(&args.out, "-cge");
        save_model(&cge.params, &ctx.path(&rel), ModelConfig::Cge { dims: cge.dims.clone() })?;
        Some(rel)
    } else {
        None
    };
    let report = AlignReport {
        seed,
        config: cfg.clone(),
        pairs: graphs.len(),
        parameters: bridge.params.num_parameters(),
        checkpoint: args.out.clone(),
        checksum: bridge.params.checksum()?,
        cge_checkpoint,
        stage2,
    };
    write_json(&report_path(&stem), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- adapt

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderSummary {
    pub checkpoint: PathBuf,
    /// Pretraining loss per epoch; empty when an existing checkpoint was loaded.
    pub pretrain_trace: Vec<f64>,
    pub checksum: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    pub initial: f64,
    pub last: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub seed: u64,
    /// Effective configuration after defaults and overrides.
    pub config: PipelineConfig,
    pub examples: usize,
    pub checkpoint: PathBuf,
    pub checksum: String,
    pub cge_checkpoint: Option<PathBuf>,
    pub decoder: DecoderSummary,
    pub stage3: Stage3Report,
    pub heldout: Option<HeldOut>,
}

fn decoder_texts(tasks: &[TaskExample]) -> Vec<String> {
    tasks
        .iter()
        .map(|t| t.code.clone())
        .chain(tasks.iter().map(|t| t.answer.clone()))
        .collect()
}

pub fn cmd_adapt(ctx: &Context, args: &AdaptArgs) -> Result<AdaptReport> {
    let (cfg, seed) = ctx.config(&args.run)?;
    let corpus = load_dataset(&ctx.path(&args.dataset))?;
    let tasks = read_tasks(&ctx.path(&args.tasks))?;
    let graphs = graphs_for(&corpus, &tasks)?;
    let heldout = match &args.heldout {
        Some(p) => {
            let t = read_tasks(&ctx.path(p))?;
            let g = graphs_for(&corpus, &t)?;
            Some((t, g))
        }
        None => None,
    };
    let cge = load_cge(&ctx.path(&args.cge))?;
    let bridge = load_bridge(&ctx.path(&args.bridge))?;

    let dec_stem = ctx.path(&args.decoder);
    let (decoder, pretrain_trace) = if stem_exists(&dec_stem) {
        (load_decoder(&dec_stem)?, Vec::new())
    } else {
        let (d, trace) = pretrain_decoder(&decoder_texts(&tasks), &cfg.decoder, seed)?;
        save_model(&d.params, &dec_stem, ModelConfig::Decoder { dims: d.dims })?;
        // train against the stored weights so a rerun with this checkpoint matches
        (load_decoder(&dec_stem)?, trace)
    };
    if decoder.dims.d_llm != bridge.dims.d_llm {
        return Err(Error::Config(format!(
            "bridge projects to width {} but the decoder is {}-dimensional",
            bridge.dims.d_llm, decoder.dims.d_llm
        )));
    }
    let decoder = FrozenDecoder::freeze(decoder)?;

    let side = GraphSide::new(&cge, &graphs, cfg.stage3.finetune_cge)?;
    let held_initial = match &heldout {
        Some((t, g)) => Some(evaluate_stage3(&bridge, &GraphSide::new(&cge, g, false)?, t, &decoder)?),
        None => None,
    };
    let stage3 = train_stage3(&bridge, &side, &tasks, &decoder, &cfg.stage3, seed)?;
    let heldout = match (&heldout, held_initial) {
        (Some((t, g)), Some(initial)) => Some(HeldOut {
            initial,
            last: evaluate_stage3(&bridge, &GraphSide::new(&cge, g, false)?, t, &decoder)?,
        }),
        _ => None,
    };

    let stem = ctx.path(&args.out);
    save_model(&bridge.params, &stem, ModelConfig::Bridge { dims: bridge.dims })?;
    let cge_checkpoint = if cfg.stage3.finetune_cge {
        let rel = sibling(&args.out, "-cge");
        save_model(&cge.params, &ctx.path(&rel), ModelConfig::Cge { dims: cge.dims.clone() })?;
        Some(rel)
    } else {
        None
    };
    let report = AdaptReport {
        seed,
        config: cfg.clone(),
        examples: tasks.len(),
        checkpoint: args.out.clone(),
        checksum: bridge.params.checksum()?,
        cge_checkpoint,
        decoder: DecoderSummary {
            checkpoint: args.decoder.clone(),
            pretrain_trace,
            checksum: decoder.checksum().to_string(),
        },
        stage3,
        heldout,
    };
    write_json(&report_path(&stem), &report)?;
    Ok(report)
}

// ------------------------------------------------------------- generate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub id: String,
    pub instruction: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateReport {
    pub generated: usize,
    pub out: PathBuf,
}

pub fn cmd_generate(ctx: &Context, args: &GenerateArgs) -> Result<GenerateReport> {
    let (cfg, _) = ctx.config(&args.run)?;
    let corpus = load_dataset(&ctx.path(&args.dataset))?;
    let tasks = read_tasks(&ctx.path(&args.tasks))?;
    let graphs = graphs_for(&corpus, &tasks)?;
    let cge = load_cge(&ctx.path(&args.cge))?;
    let bridge = load_bridge(&ctx.path(&args.bridge))?;
    let decoder = FrozenDecoder::freeze(load_decoder(&ctx.path(&args.decoder))?)?;
    let side = GraphSide::new(&cge, &graphs, false)?;
    let out = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let p_g = soft_prompt(&bridge, &side.memory(i)?, &t.code)?;
            let output = generate(
                &p_g,
                &t.instruction,
                &t.code,
                &decoder,
                cfg.stage3.max_new_tokens,
                cfg.stage3.rep_penalty,
            )?;
            Ok(Generation {
                id: t.id.clone(),
                instruction: t.instruction.clone(),
                output,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&ctx.path(&args.out), &out)?;
    Ok(GenerateReport {
        generated: out.len(),
        out: args.out.clone(),
    })
}

// ------------------------------------------------------------ gradcheck

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<GradcheckReport> {
    run_gradcheck(args.component, args.seed, args.flip.as_deref())
}

// -------------------------------------------------------------- runner

fn set_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("`--threads` must be at least 1".into()));
    }
    std::env::set_var("RAYON_NUM_THREADS", n.to_string());
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

/// Runs one parsed command and returns its report as pretty JSON.
pub fn run(cli: &Cli) -> Result<String> {
    if let Some(n) = cli.threads {
        set_threads(n)?;
    }
    let ctx = Context::new(&cli.workdir);
    match &cli.command {
        Command::Synth(a) => to_json(&cmd_synth(&ctx, a)?),
        Command::Extract(a) => to_json(&cmd_extract(&ctx, a)?),
        Command::Featurize(a) => to_json(&cmd_featurize(&ctx, a)?),
        Command::Stats(a) => to_json(&cmd_stats(&ctx, a)?),
        Command::Pretrain(a) => to_json(&cmd_pretrain(&ctx, a)?),
        Command::Align(a) => to_json(&cmd_align(&ctx, a)?),
        Command::Adapt(a) => to_json(&cmd_adapt(&ctx, a)?),
        Command::Generate(a) => to_json(&cmd_generate(&ctx, a)?),
        Command::Gradcheck(a) => to_json(&cmd_gradcheck(a)?),
    }
}

/// Parses `args`, runs the command, prints the report and returns the exit
/// status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(report) => {
            println!("{report}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

