//! Command-line surface.
//!
//! Every command writes machine-readable output (JSON, or CSV for `stats`)
//! that embeds the effective configuration and seed. Exit codes: 0 ok,
//! 1 usage, 2 data error, 3 numerical failure.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::data::{box_ratio_stats, generate_synthetic, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::geo::{root_point, traverse, Dedup, PathOptions};
use crate::hiereval::{accuracy, evaluate_pair, radius_histogram, AncestorConvention, ClassPrototypes, MetricReport, TaxonomyGraph};
use crate::histogram::Histogram;
use crate::losses::LossTerm;
use crate::trainer::gradcheck::{grad_check, GradCheckConfig};
use crate::trainer::{
    continue_run, load_checkpoint, save_checkpoint, train_run, CheckpointMeta, KappaMode, Modality, ModelState, RunOptions, TrainConfig,
};

pub const THREADS_ENV: &str = "HYCONE_THREADS";
const GRAD_CHECK_TOLERANCE: f64 = 1e-3;

#[derive(Parser, Debug)]
#[command(name = "hycone", version, about = "Hyperbolic compositional embeddings with entailment cones")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset, a held-out split and the ground-truth taxonomy.
    GenData(GenDataArgs),
    /// Train a model on a dataset file.
    Train(Box<TrainArgs>),
    /// Hierarchical metrics of zero-shot predictions against a taxonomy.
    EvalHier(EvalHierArgs),
    /// Zero-shot classification accuracy on a labeled split.
    EvalZeroshot(EvalZeroshotArgs),
    /// Interpolate between two items, or toward the root, and retrieve neighbours.
    Interpolate(InterpolateArgs),
    /// Box-ratio and embedding-radius histograms as CSV.
    Stats(StatsArgs),
    /// Finite-difference audit of the loss gradient on a random model.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct OutputArg {
    /// Write the result here instead of standard output.
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory for dataset.jsonl, heldout.jsonl and taxonomy.tsv.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// JSON file with generator settings; flags override it.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    branching: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    concept_scale: Option<f64>,
    #[arg(long)]
    modality_offset_scale: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    noise_correlation: Option<f64>,
    #[arg(long)]
    samples_per_leaf: Option<usize>,
    #[arg(long)]
    max_boxes: Option<usize>,
    #[arg(long)]
    box_ratio_alpha: Option<f64>,
    #[arg(long)]
    box_ratio_beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Held-out samples per leaf.
    #[arg(long, default_value_t = 16)]
    held_out_per_leaf: usize,
    #[command(flatten)]
    out_arg: OutputArg,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset (JSONL).
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Where to write the final checkpoint.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// JSON file with training settings; flags override it.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Continue from this checkpoint; its stored config is the base layer.
    #[arg(long, value_name = "PATH")]
    resume: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    max_lr: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    eta_inter: Option<f64>,
    #[arg(long)]
    eta_intra: Option<f64>,
    /// Aperture constant K.
    #[arg(long = "K", alias = "k")]
    k: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// `fixed:<v>`, `learnable` or `learnable:<init>`.
    #[arg(long)]
    kappa: Option<KappaMode>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Exclude the positive pair from the contrastive denominator.
    #[arg(long)]
    literal_eq5_denominator: bool,
    /// Drop one loss term; repeatable.
    #[arg(long, value_name = "TERM")]
    ablate_term: Vec<LossTerm>,
    /// Comma-separated hidden layer widths (empty for none).
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    hidden_dims: Option<Vec<usize>>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    eval_batches: Option<usize>,
    /// Directory for periodic checkpoints and best.hycn.
    #[arg(long, value_name = "DIR")]
    checkpoint_dir: Option<PathBuf>,
    /// JSONL log of evaluation records.
    #[arg(long, value_name = "PATH")]
    metrics: Option<PathBuf>,
    /// Periodic checkpoints to retain.
    #[arg(long, default_value_t = 3)]
    keep_last: usize,
    #[command(flatten)]
    out_arg: OutputArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Candidates {
    /// Leaf labels, prompted by full captions.
    Leaves,
    /// Leaf labels plus internal concepts prompted by box phrases.
    All,
}

#[derive(Args, Debug)]
struct PromptArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Labeled dataset whose texts serve as class prompts.
    #[arg(long, value_name = "PATH")]
    prompts: PathBuf,
    /// Labeled evaluation split.
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct EvalHierArgs {
    #[command(flatten)]
    common: PromptArgs,
    #[arg(long, value_name = "PATH")]
    taxonomy: PathBuf,
    #[arg(long, value_enum, default_value_t = Candidates::Leaves)]
    candidates: Candidates,
    /// Count the root in ancestor sets.
    #[arg(long)]
    include_root: bool,
    /// Leave the node itself out of its ancestor set.
    #[arg(long)]
    exclude_self: bool,
    #[command(flatten)]
    out_arg: OutputArg,
}

#[derive(Args, Debug)]
struct EvalZeroshotArgs {
    #[command(flatten)]
    common: PromptArgs,
    /// Comma-separated class labels (default: every label in the prompt set).
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    #[command(flatten)]
    out_arg: OutputArg,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("target").required(true).args(["to", "to_root"])))]
struct InterpolateArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Dataset holding the endpoints; its texts and text boxes form the gallery.
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Record id of the source image.
    #[arg(long)]
    from: u64,
    /// Record id of the target image.
    #[arg(long)]
    to: Option<u64>,
    /// Interpolate toward the origin.
    #[arg(long)]
    to_root: bool,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Also retrieve at t = 0.
    #[arg(long)]
    include_start: bool,
    #[arg(long, value_enum, default_value_t = DedupArg::Consecutive)]
    dedup: DedupArg,
    #[command(flatten)]
    out_arg: OutputArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DedupArg {
    Consecutive,
    Global,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Also report embedding radii under this model.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    ratio_bins: usize,
    #[arg(long, default_value_t = 20)]
    radius_bins: usize,
    /// Upper edge of the radius histogram (default: the largest radius).
    #[arg(long)]
    radius_max: Option<f64>,
    #[command(flatten)]
    out_arg: OutputArg,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 6)]
    input_dim: usize,
    #[arg(long, default_value_t = 1e-4)]
    h: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the encoder-weight audit.
    #[arg(long)]
    no_encoders: bool,
    #[command(flatten)]
    out_arg: OutputArg,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// [`run`] with explicit output streams.
pub fn run_with<I, S>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                stdout.write_all(text.as_bytes())
            } else {
                stderr.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let pool = match thread_pool() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return e.exit_code();
        }
    };
    let mut buf = Vec::new();
    let result = pool.install(|| dispatch(cli.command, &mut buf));
    let _ = stdout.write_all(&buf);
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn dispatch(cmd: Command, stdout: &mut Vec<u8>) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a, stdout),
        Command::Train(a) => train(*a, stdout),
        Command::EvalHier(a) => eval_hier(a, stdout),
        Command::EvalZeroshot(a) => eval_zeroshot(a, stdout),
        Command::Interpolate(a) => interpolate(a, stdout),
        Command::Stats(a) => stats(a, stdout),
        Command::GradCheck(a) => grad_check_cmd(a, stdout),
    }
}

fn write_output(target: &OutputArg, stdout: &mut Vec<u8>, text: &str) -> Result<()> {
    match &target.output {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        }),
        None => stdout.write_all(text.as_bytes()).map_err(|e| Error::Io {
            path: "<stdout>".into(),
            source: e,
        }),
    }
}

fn write_json(target: &OutputArg, stdout: &mut Vec<u8>, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON value serializes");
    text.push('\n');
    write_output(target, stdout, &text)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// `base`, then the config file, then explicit flags.
fn layered<T: Serialize + DeserializeOwned>(base: T, file: Option<&Path>, flags: Map<String, Value>) -> Result<T> {
    let mut v = serde_json::to_value(base).expect("config serializes");
    let obj = v.as_object_mut().expect("config is an object");
    if let Some(p) = file {
        match read_json::<Value>(p)? {
            Value::Object(m) => obj.extend(m),
            _ => return Err(Error::Config(format!("{}: expected a JSON object", p.display()))),
        }
    }
    obj.extend(flags);
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

fn flag_map(entries: Vec<(&str, Option<Value>)>) -> Map<String, Value> {
    entries.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))).collect()
}

fn gen_data(a: GenDataArgs, stdout: &mut Vec<u8>) -> Result<()> {
    let flags = flag_map(vec![
        ("depth", a.depth.map(|v| json!(v))),
        ("branching", a.branching.map(|v| json!(v))),
        ("feature_dim", a.feature_dim.map(|v| json!(v))),
        ("concept_scale", a.concept_scale.map(|v| json!(v))),
        ("modality_offset_scale", a.modality_offset_scale.map(|v| json!(v))),
        ("noise_sigma", a.noise_sigma.map(|v| json!(v))),
        ("noise_correlation", a.noise_correlation.map(|v| json!(v))),
        ("samples_per_leaf", a.samples_per_leaf.map(|v| json!(v))),
        ("max_boxes", a.max_boxes.map(|v| json!(v))),
        ("box_ratio_alpha", a.box_ratio_alpha.map(|v| json!(v))),
        ("box_ratio_beta", a.box_ratio_beta.map(|v| json!(v))),
        ("seed", a.seed.map(|v| json!(v))),
    ]);
    let spec: SynthSpec = layered(SynthSpec::default(), a.config.as_deref(), flags)?;
    let (data, taxonomy, world) = generate_synthetic(&spec)?;
    let held = world.held_out(a.held_out_per_leaf);
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let paths = [a.out.join("dataset.jsonl"), a.out.join("heldout.jsonl"), a.out.join("taxonomy.tsv")];
    data.save(&paths[0])?;
    held.save(&paths[1])?;
    taxonomy.save(&paths[2])?;
    let report = json!({
        "command": "gen-data",
        "config": spec,
        "held_out_per_leaf": a.held_out_per_leaf,
        "seed": spec.seed,
        "dataset": paths[0],
        "held_out": paths[1],
        "taxonomy": paths[2],
        "records": data.len(),
        "held_out_records": held.len(),
        "taxonomy_nodes": taxonomy.len(),
        "leaves": taxonomy.leaves().len(),
    });
    write_json(&a.out_arg, stdout, &report)
}

fn train(a: TrainArgs, stdout: &mut Vec<u8>) -> Result<()> {
    let resumed = a.resume.as_deref().map(load_checkpoint::<f64>).transpose()?;
    let base = resumed.as_ref().map(|(_, m)| m.train.clone()).unwrap_or_default();
    let flags = flag_map(vec![
        ("batch_size", a.batch_size.map(|v| json!(v))),
        ("total_steps", a.total_steps.map(|v| json!(v))),
        ("warmup_steps", a.warmup_steps.map(|v| json!(v))),
        ("max_lr", a.max_lr.map(|v| json!(v))),
        ("gamma", a.gamma.map(|v| json!(v))),
        ("eta_inter", a.eta_inter.map(|v| json!(v))),
        ("eta_intra", a.eta_intra.map(|v| json!(v))),
        ("K", a.k.map(|v| json!(v))),
        ("seed", a.seed.map(|v| json!(v))),
        ("kappa", a.kappa.map(|v| json!(v.to_string()))),
        ("eval_every", a.eval_every.map(|v| json!(v))),
        ("checkpoint_every", a.checkpoint_every.map(|v| json!(v))),
        ("literal_denominator", a.literal_eq5_denominator.then_some(json!(true))),
        ("ablate", (!a.ablate_term.is_empty()).then(|| json!(a.ablate_term))),
        ("hidden_dims", a.hidden_dims.map(|v| json!(v))),
        ("embed_dim", a.embed_dim.map(|v| json!(v))),
        ("eval_batches", a.eval_batches.map(|v| json!(v))),
    ]);
    let cfg: TrainConfig = layered(base, a.config.as_deref(), flags)?;
    cfg.validate()?;
    let data = Dataset::<f64>::load(&a.data)?;
    if let Some(dir) = &a.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
    }
    let opts = RunOptions {
        checkpoint_dir: a.checkpoint_dir.clone(),
        metrics_path: a.metrics.clone(),
        keep_last: a.keep_last,
    };
    let out = match resumed {
        Some((state, _)) => continue_run(state, &cfg, &data, &opts)?,
        None => train_run::<f64>(&cfg, &data, &opts)?,
    };
    save_checkpoint(&out.state, &cfg, &a.out)?;
    let report = json!({
        "command": "train",
        "config": cfg,
        "seed": cfg.seed,
        "data": a.data,
        "resumed_from": a.resume,
        "checkpoint": a.out,
        "steps": out.state.step,
        "initial": out.metrics.first(),
        "final": out.metrics.last(),
    });
    write_json(&a.out_arg, stdout, &report)
}

/// Prompt feature lists keyed by label, in label order.
fn prompts_by_label(data: &Dataset<f64>, with_boxes: bool) -> BTreeMap<String, Vec<Vec<f64>>> {
    let mut out: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for q in &data.items {
        if let Some(c) = &q.class_id {
            out.entry(c.clone()).or_default().push(q.text.clone());
        }
        if let (true, Some(concepts)) = (with_boxes, &q.box_concepts) {
            for (c, t) in concepts.iter().zip(&q.text_boxes) {
                out.entry(c.clone()).or_default().push(t.clone());
            }
        }
    }
    out
}

struct Predictions {
    labels: Vec<String>,
    predicted: Vec<usize>,
    truth: Vec<usize>,
    skipped: usize,
}

fn predict(model: &ModelState<f64>, prompts: BTreeMap<String, Vec<Vec<f64>>>, data: &Dataset<f64>) -> Result<Predictions> {
    if prompts.is_empty() {
        return Err(Error::Dataset("no labeled prompts found".into()));
    }
    let labels: Vec<String> = prompts.keys().cloned().collect();
    let protos = ClassPrototypes::new(model, &prompts.into_values().collect::<Vec<_>>())?;
    let mut images = Vec::new();
    let mut truth = Vec::new();
    let mut skipped = 0;
    for q in &data.items {
        match q.class_id.as_ref().and_then(|c| labels.iter().position(|l| l == c)) {
            Some(i) => {
                images.push(q.image.clone());
                truth.push(i);
            }
            None => skipped += 1,
        }
    }
    if images.is_empty() {
        return Err(Error::Dataset("no evaluation record carries one of the candidate labels".into()));
    }
    let predicted = protos.classify_batch(model, &images)?;
    Ok(Predictions {
        labels,
        predicted,
        truth,
        skipped,
    })
}

fn checkpoint_echo(meta: &CheckpointMeta) -> Value {
    json!({ "train": meta.train, "seed": meta.train.seed })
}

fn eval_hier(a: EvalHierArgs, stdout: &mut Vec<u8>) -> Result<()> {
    let (model, meta) = load_checkpoint::<f64>(&a.common.checkpoint)?;
    let taxonomy = TaxonomyGraph::load(&a.taxonomy)?;
    let prompts = Dataset::<f64>::load(&a.common.prompts)?;
    let data = Dataset::<f64>::load(&a.common.data)?;
    let mut by_label = prompts_by_label(&prompts, a.candidates == Candidates::All);
    if a.candidates == Candidates::Leaves {
        by_label.retain(|l, _| taxonomy.id(l).is_ok_and(|id| taxonomy.is_leaf(id)));
    }
    let p = predict(&model, by_label, &data)?;
    let conv = AncestorConvention {
        include_self: !a.exclude_self,
        include_root: a.include_root,
    };
    let ids = p.labels.iter().map(|l| taxonomy.id(l)).collect::<Result<Vec<_>>>()?;
    let mut sum = MetricReport::default();
    for (&pr, &tr) in p.predicted.iter().zip(&p.truth) {
        let r = evaluate_pair(&taxonomy, ids[pr], ids[tr], conv);
        sum.tie += r.tie;
        sum.lca += r.lca;
        sum.jaccard += r.jaccard;
        sum.p_h += r.p_h;
        sum.r_h += r.r_h;
    }
    let n = p.truth.len() as f64;
    let report = MetricReport {
        tie: sum.tie / n,
        lca: sum.lca / n,
        jaccard: sum.jaccard / n,
        p_h: sum.p_h / n,
        r_h: sum.r_h / n,
    };
    let out = json!({
        "command": "eval-hier",
        "config": {
            "checkpoint": a.common.checkpoint,
            "prompts": a.common.prompts,
            "data": a.common.data,
            "taxonomy": a.taxonomy,
            "candidates": a.candidates,
            "convention": conv,
            "model": checkpoint_echo(&meta),
        },
        "seed": meta.train.seed,
        "evaluated": p.truth.len(),
        "skipped": p.skipped,
        "candidates": p.labels.len(),
        "report": report,
    });
    write_json(&a.out_arg, stdout, &out)
}

fn eval_zeroshot(a: EvalZeroshotArgs, stdout: &mut Vec<u8>) -> Result<()> {
    let (model, meta) = load_checkpoint::<f64>(&a.common.checkpoint)?;
    let prompts = Dataset::<f64>::load(&a.common.prompts)?;
    let data = Dataset::<f64>::load(&a.common.data)?;
    let mut by_label = prompts_by_label(&prompts, false);
    if let Some(classes) = &a.classes {
        if let Some(missing) = classes.iter().find(|c| !by_label.contains_key(*c)) {
            return Err(Error::UnknownLabel(missing.clone()));
        }
        by_label.retain(|l, _| classes.contains(l));
    }
    let p = predict(&model, by_label, &data)?;
    let acc = accuracy(&p.predicted, &p.truth)?;
    let out = json!({
        "command": "eval-zeroshot",
        "config": {
            "checkpoint": a.common.checkpoint,
            "prompts": a.common.prompts,
            "data": a.common.data,
            "classes": a.classes,
            "model": checkpoint_echo(&meta),
        },
        "seed": meta.train.seed,
        "classes": p.labels,
        "evaluated": p.truth.len(),
        "skipped": p.skipped,
        "accuracy": acc,
    });
    write_json(&a.out_arg, stdout, &out)
}

fn interpolate(a: InterpolateArgs, stdout: &mut Vec<u8>) -> Result<()> {
    let (model, meta) = load_checkpoint::<f64>(&a.checkpoint)?;
    let data = Dataset::<f64>::load(&a.data)?;
    let find = |id: u64| {
        data.items
            .iter()
            .find(|q| q.id == id)
            .ok_or_else(|| Error::Dataset(format!("no record with id {id}")))
    };
    let embed_image = |id: u64| -> Result<_> {
        let q = find(id)?;
        Ok(model.embed(Modality::Image, std::slice::from_ref(&q.image))?.remove(0))
    };
    let source = embed_image(a.from)?;
    let target = match a.to {
        Some(id) if !a.to_root => embed_image(id)?,
        _ => root_point(source.dim(), model.curvature()),
    };
    // gallery: every caption and every box phrase
    let mut feats = Vec::new();
    let mut desc = Vec::new();
    for q in &data.items {
        feats.push(q.text.clone());
        desc.push(json!({ "role": "text", "record_id": q.id, "concept": q.class_id }));
        for (b, t) in q.text_boxes.iter().enumerate() {
            feats.push(t.clone());
            let concept = q.box_concepts.as_ref().map(|c| c[b].clone());
            desc.push(json!({ "role": "text_box", "record_id": q.id, "box": b, "concept": concept }));
        }
    }
    let gallery: Vec<_> = model
        .embed(Modality::Text, &feats)?
        .into_iter()
        .enumerate()
        .map(|(i, e)| (i as u64, e))
        .collect();
    let opts = PathOptions {
        include_start: a.include_start,
        dedup: match a.dedup {
            DedupArg::Consecutive => Dedup::Consecutive,
            DedupArg::Global => Dedup::Global,
        },
    };
    let steps = traverse(&source, &target, &gallery, a.steps, opts)?;
    let traversal: Vec<Value> = steps
        .iter()
        .map(|s| {
            let mut v = serde_json::to_value(s).expect("step serializes");
            v.as_object_mut()
                .expect("object")
                .insert("item".into(), desc[s.item_id as usize].clone());
            v
        })
        .collect();
    let out = json!({
        "command": "interpolate",
        "config": {
            "checkpoint": a.checkpoint,
            "data": a.data,
            "from": a.from,
            "to": if a.to_root { None } else { a.to },
            "to_root": a.to_root || a.to.is_none(),
            "steps": a.steps,
            "options": opts,
            "model": checkpoint_echo(&meta),
        },
        "seed": meta.train.seed,
        "traversal": traversal,
    });
    write_json(&a.out_arg, stdout, &out)
}

fn stats(a: StatsArgs, stdout: &mut Vec<u8>) -> Result<()> {
    let data = Dataset::<f64>::load(&a.data)?;
    let ratio_edges = Histogram::uniform(0.0, 1.0, a.ratio_bins)?.edges;
    let ratios = box_ratio_stats(&data, ratio_edges)?;
    let model = a.checkpoint.as_deref().map(load_checkpoint::<f64>).transpose()?;
    let config = json!({
        "data": a.data,
        "checkpoint": a.checkpoint,
        "ratio_bins": a.ratio_bins,
        "radius_bins": a.radius_bins,
        "radius_max": a.radius_max,
        "model": model.as_ref().map(|(_, m)| checkpoint_echo(m)),
        "seed": model.as_ref().map(|(_, m)| m.train.seed),
    });
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Dataset(format!("CSV output: {e}"));
    w.write_record(["kind", "role", "lo", "hi", "value"]).map_err(csv_err)?;
    let mut row =
        |kind: &str, role: &str, lo: String, hi: String, value: String| w.write_record([kind, role, &lo, &hi, &value]).map_err(csv_err);
    row("count", "box_ratio", String::new(), String::new(), ratios.count.to_string())?;
    if let Some(h) = &ratios.histogram {
        for (i, c) in h.counts.iter().enumerate() {
            row(
                "hist",
                "box_ratio",
                h.edges[i].to_string(),
                h.edges[i + 1].to_string(),
                c.to_string(),
            )?;
        }
    }
    let summary = [
        ("mean", ratios.mean),
        ("median", ratios.median),
        ("frac_above_0.9", ratios.frac_above_0_9),
    ];
    for (name, v) in summary {
        if let Some(v) = v {
            row(name, "box_ratio", String::new(), String::new(), v.to_string())?;
        }
    }
    if let Some((m, _)) = &model {
        let boxes = |f: fn(&crate::data::Quadruple<f64>) -> &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            data.items.iter().flat_map(|q| f(q).iter().cloned()).collect()
        };
        let img = m.embed(Modality::Image, &data.items.iter().map(|q| q.image.clone()).collect::<Vec<_>>())?;
        let txt = m.embed(Modality::Text, &data.items.iter().map(|q| q.text.clone()).collect::<Vec<_>>())?;
        let img_box = m.embed(Modality::Image, &boxes(|q| &q.image_boxes))?;
        let txt_box = m.embed(Modality::Text, &boxes(|q| &q.text_boxes))?;
        let all = [&img[..], &txt[..], &img_box[..], &txt_box[..]];
        let hi = match a.radius_max {
            Some(h) => h,
            None => all
                .iter()
                .flat_map(|r| r.iter().map(crate::hiereval::radius))
                .fold(0.0, f64::max)
                .max(f64::MIN_POSITIVE),
        };
        let edges = Histogram::uniform(0.0, hi, a.radius_bins)?.edges;
        for r in radius_histogram(all, &edges)? {
            let role = format!("radius_{}", r.role);
            row("count", &role, String::new(), String::new(), r.count.to_string())?;
            for (i, c) in r.histogram.counts.iter().enumerate() {
                let (lo, hi) = (r.histogram.edges[i], r.histogram.edges[i + 1]);
                row("hist", &role, lo.to_string(), hi.to_string(), c.to_string())?;
            }
            if let Some(mean) = r.mean {
                row("mean", &role, String::new(), String::new(), mean.to_string())?;
            }
        }
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?).expect("CSV is UTF-8");
    let text = format!("# config: {}\n{body}", serde_json::to_string(&config).expect("config serializes"));
    write_output(&a.out_arg, stdout, &text)
}

fn grad_check_cmd(a: GradCheckArgs, stdout: &mut Vec<u8>) -> Result<()> {
    let gc = GradCheckConfig {
        dim: a.dim,
        batch: a.batch,
        input_dim: a.input_dim,
        h: a.h,
        seed: a.seed,
        include_encoders: !a.no_encoders,
    };
    if gc.dim < 2 || gc.batch < 2 || gc.input_dim == 0 || !(gc.h > 0.0) {
        return Err(Error::Config(
            "grad-check needs dim >= 2, batch >= 2, input_dim >= 1 and h > 0".into(),
        ));
    }
    let report = grad_check(&gc)?;
    let pass = report.max_rel_err < GRAD_CHECK_TOLERANCE;
    let out = json!({
        "command": "grad-check",
        "config": gc,
        "seed": gc.seed,
        "tolerance": GRAD_CHECK_TOLERANCE,
        "pass": pass,
        "report": report,
    });
    write_json(&a.out_arg, stdout, &out)?;
    if pass {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step: 0,
            what: format!("gradient audit failed: max relative error {:.3e}", report.max_rel_err),
            last_good: "none".into(),
        })
    }
}
