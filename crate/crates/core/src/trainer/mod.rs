//! Deterministic training loop: batching, embedding, the hC objective,
//! AdamW updates, periodic evaluation and checkpointing.

pub mod checkpoint;
pub mod gradcheck;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::cones::DEFAULT_K;
use crate::data::{Dataset, Quadruple};
use crate::error::{Error, Result};
use crate::losses::{build_hc_graph, GraphEmbeddings, LossConfig, LossTerm, LossWeights};
use crate::manifold::{Curvature, HyperPoint, KAPPA_MAX, KAPPA_MIN};
use crate::net::{
    adamw_step, lr_at, Activation, AdamWConfig, BoundScalars, Encoder, EncoderConfig, OptimState, ParamSlot, ScalarParams, Tape, Tensor,
    Var,
};
use crate::scalar::{norm, Real};
use crate::seed::{self, tags};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};

/// Curvature handling: held at a fixed value or learned from an initial value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KappaMode {
    Fixed(f64),
    Learnable { init: f64 },
}

impl KappaMode {
    pub fn initial(self) -> f64 {
        match self {
            KappaMode::Fixed(v) | KappaMode::Learnable { init: v } => v,
        }
    }

    pub fn learnable(self) -> bool {
        matches!(self, KappaMode::Learnable { .. })
    }
}

impl Default for KappaMode {
    fn default() -> Self {
        KappaMode::Learnable { init: 1.0 }
    }
}

impl fmt::Display for KappaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KappaMode::Fixed(v) => write!(f, "fixed:{v}"),
            KappaMode::Learnable { init } if *init == 1.0 => f.write_str("learnable"),
            KappaMode::Learnable { init } => write!(f, "learnable:{init}"),
        }
    }
}

impl FromStr for KappaMode {
    type Err = Error;

    /// `fixed:<v>`, `learnable` or `learnable:<init>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad kappa mode `{s}`; expected fixed:<v>, learnable or learnable:<init>"));
        let (kind, value) = match s.split_once(':') {
            Some((k, v)) => (k, Some(v.parse::<f64>().map_err(|_| bad())?)),
            None => (s, None),
        };
        match (kind, value) {
            ("fixed", Some(v)) => Ok(KappaMode::Fixed(v)),
            ("learnable", v) => Ok(KappaMode::Learnable { init: v.unwrap_or(1.0) }),
            _ => Err(bad()),
        }
    }
}

impl Serialize for KappaMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for KappaMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Training hyper-parameters. Defaults follow the reference recipe, scaled
/// to a desk-sized run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub max_lr: f64,
    pub gamma: f64,
    pub eta_inter: f64,
    pub eta_intra: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub seed: u64,
    pub kappa: KappaMode,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub literal_denominator: bool,
    pub ablate: Vec<LossTerm>,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub adamw: AdamWConfig,
    /// Number of fixed batches used for evaluation loss.
    pub eval_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            total_steps: 2000,
            warmup_steps: 200,
            max_lr: 5e-4,
            gamma: 0.1,
            eta_inter: 0.7,
            eta_intra: 1.2,
            k: DEFAULT_K,
            seed: 0,
            kappa: KappaMode::default(),
            eval_every: 100,
            checkpoint_every: 0,
            literal_denominator: false,
            ablate: Vec::new(),
            hidden_dims: vec![64],
            embed_dim: 32,
            activation: Activation::Tanh,
            adamw: AdamWConfig::default(),
            eval_batches: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps ({}) exceeds total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.max_lr >= 0.0 && self.max_lr.is_finite()) {
            return bad(format!("max_lr must be finite and >= 0, got {}", self.max_lr));
        }
        let k0 = self.kappa.initial();
        if !(KAPPA_MIN..=KAPPA_MAX).contains(&k0) {
            return bad(format!("kappa {k0} outside [{KAPPA_MIN}, {KAPPA_MAX}]"));
        }
        if self.eval_batches == 0 {
            return bad("eval_batches must be >= 1".into());
        }
        self.loss_config::<f64>().validate()
    }

    pub fn loss_config<T: Real>(&self) -> LossConfig<T> {
        LossConfig {
            weights: LossWeights {
                gamma: T::lit(self.gamma),
                eta_inter: T::lit(self.eta_inter),
                eta_intra: T::lit(self.eta_intra),
            },
            k: T::lit(self.k),
            literal_denominator: self.literal_denominator,
            ablate: self.ablate.clone(),
        }
    }

    pub fn encoder_config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            embed_dim: self.embed_dim,
            activation: self.activation,
        }
    }
}

/// Encoders, learnable scalars, optimizer moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub image: Encoder<T>,
    pub text: Encoder<T>,
    pub scalars: ScalarParams<T>,
    pub optim: OptimState<T>,
    pub learn_kappa: bool,
    pub step: u64,
}

/// Which embedding tower a feature vector goes through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

impl<T: Real> ModelState<T> {
    pub fn init(cfg: &TrainConfig, feature_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(cfg.seed, tags::INIT);
        let enc_cfg = cfg.encoder_config(feature_dim);
        let image = Encoder::init(enc_cfg.clone(), &mut rng)?;
        let text = Encoder::init(enc_cfg, &mut rng)?;
        let scalars = ScalarParams::init(cfg.embed_dim, cfg.kappa.initial());
        Ok(Self::assemble(image, text, scalars, cfg.kappa.learnable()))
    }

    /// Fresh optimizer state around the given parameters.
    pub fn assemble(image: Encoder<T>, text: Encoder<T>, scalars: ScalarParams<T>, learn_kappa: bool) -> Self {
        let shapes: Vec<_> = image
            .params()
            .iter()
            .chain(text.params().iter())
            .map(|t| t.shape())
            .chain(std::iter::repeat_n((1, 1), 4))
            .collect();
        Self {
            image,
            text,
            scalars,
            optim: OptimState::new(&shapes),
            learn_kappa,
            step: 0,
        }
    }

    pub fn curvature(&self) -> Curvature<T> {
        Curvature::clamped(self.scalars.kappa())
    }

    fn tower(&self, m: Modality) -> (&Encoder<T>, T) {
        match m {
            Modality::Image => (&self.image, self.scalars.c_img()),
            Modality::Text => (&self.text, self.scalars.c_txt()),
        }
    }

    /// Raw encoder outputs (before scaling and projection).
    pub fn raw(&self, m: Modality, features: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
        self.tower(m).0.forward_batch(features)
    }

    /// Projects raw encoder outputs of modality `m` onto the hyperboloid.
    pub fn project(&self, m: Modality, raw: &[T]) -> Result<HyperPoint<T>> {
        crate::manifold::project_to_manifold(raw, self.tower(m).1, self.curvature())
    }

    /// Embeds feature vectors through the tower of modality `m`.
    pub fn embed(&self, m: Modality, features: &[Vec<T>]) -> Result<Vec<HyperPoint<T>>> {
        use rayon::prelude::*;
        const CHUNK: usize = 256;
        let chunks: Vec<Result<Vec<HyperPoint<T>>>> = features
            .par_chunks(CHUNK)
            .map(|c| self.raw(m, c)?.iter().map(|r| self.project(m, r)).collect::<Result<Vec<_>>>())
            .collect();
        let mut out = Vec::with_capacity(features.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    fn bind_scalars(&self, tape: &mut Tape<T>, trainable: bool) -> Result<BoundScalars> {
        self.scalars.bind(tape, trainable, self.learn_kappa)
    }
}

/// Loss values and embedding statistics of one step or evaluation pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub hcc: f64,
    pub hce: f64,
    pub total: f64,
    pub tau: f64,
    pub kappa: f64,
    pub radius_img: f64,
    pub radius_txt: f64,
    pub radius_img_box: f64,
    pub radius_txt_box: f64,
    pub lr: f64,
}

/// One line of the metrics log.
pub type MetricRecord = LossReport;

/// Feature matrices of the four roles for one batch.
pub struct BatchInputs<T> {
    pub img: Tensor<T>,
    pub txt: Tensor<T>,
    pub img_box: Tensor<T>,
    pub txt_box: Tensor<T>,
}

impl<T: Real> BatchInputs<T> {
    /// Gathers the batch, taking box `boxes[i]` of sample `i`.
    pub fn gather(items: &[&Quadruple<T>], boxes: &[usize]) -> Result<Self> {
        if items.len() != boxes.len() {
            return Err(Error::contract("one box choice per sample required"));
        }
        fn rows<'a, T: Real + 'a>(v: impl Iterator<Item = &'a Vec<T>>) -> Result<Tensor<T>> {
            Tensor::from_rows(&v.collect::<Vec<_>>())
        }
        let pairs = || items.iter().zip(boxes);
        Ok(Self {
            img: rows(items.iter().map(|q| &q.image))?,
            txt: rows(items.iter().map(|q| &q.text))?,
            img_box: rows(pairs().map(|(q, &b)| &q.image_boxes[b]))?,
            txt_box: rows(pairs().map(|(q, &b)| &q.text_boxes[b]))?,
        })
    }
}

struct Forward {
    emb: GraphEmbeddings,
    loss: crate::losses::GraphLoss,
    scalars: BoundScalars,
    image_params: Vec<Var>,
    text_params: Vec<Var>,
}

fn forward<T: Real>(
    tape: &mut Tape<T>,
    state: &ModelState<T>,
    inputs: &BatchInputs<T>,
    loss_cfg: &LossConfig<T>,
    trainable: bool,
) -> Result<Forward> {
    let bi = state.image.bind(tape, trainable);
    let bt = state.text.bind(tape, trainable);
    let sc = state.bind_scalars(tape, trainable)?;
    let mut role = |x: &Tensor<T>, enc: &Encoder<T>, bound, c: Var| -> Result<Var> {
        let x = tape.constant(x.clone());
        let raw = enc.forward(tape, bound, x)?;
        let scaled = tape.mul_scalar(raw, c)?;
        tape.expmap0(scaled, sc.kappa)
    };
    let img = role(&inputs.img, &state.image, &bi, sc.c_img)?;
    let img_box = role(&inputs.img_box, &state.image, &bi, sc.c_img)?;
    let txt = role(&inputs.txt, &state.text, &bt, sc.c_txt)?;
    let txt_box = role(&inputs.txt_box, &state.text, &bt, sc.c_txt)?;
    let emb = GraphEmbeddings {
        img,
        txt,
        img_box,
        txt_box,
        tau: sc.tau,
        kappa: sc.kappa,
    };
    let loss = build_hc_graph(tape, &emb, loss_cfg)?;
    Ok(Forward {
        emb,
        loss,
        scalars: sc,
        image_params: bi.params,
        text_params: bt.params,
    })
}

fn mean_radius<T: Real>(t: &Tensor<T>) -> f64 {
    let n = t.rows().max(1) as f64;
    (0..t.rows()).map(|i| norm(t.row(i)).as_f64()).sum::<f64>() / n
}

fn report<T: Real>(tape: &Tape<T>, f: &Forward, step: u64, lr: f64) -> LossReport {
    LossReport {
        step,
        hcc: tape.item(f.loss.hcc).as_f64(),
        hce: tape.item(f.loss.hce).as_f64(),
        total: tape.item(f.loss.total).as_f64(),
        tau: tape.item(f.scalars.tau).as_f64(),
        kappa: tape.item(f.scalars.kappa).as_f64(),
        radius_img: mean_radius(tape.value(f.emb.img)),
        radius_txt: mean_radius(tape.value(f.emb.txt)),
        radius_img_box: mean_radius(tape.value(f.emb.img_box)),
        radius_txt_box: mean_radius(tape.value(f.emb.txt_box)),
        lr,
    }
}

/// Loss of the current model on a batch, without updating anything.
pub fn evaluate_batch<T: Real>(state: &ModelState<T>, inputs: &BatchInputs<T>, cfg: &TrainConfig) -> Result<LossReport> {
    let mut tape = Tape::new();
    let f = forward(&mut tape, state, inputs, &cfg.loss_config(), false)?;
    Ok(report(&tape, &f, state.step, 0.0))
}

/// One optimizer step on `inputs` at the scheduled learning rate.
pub fn train_step<T: Real>(state: &mut ModelState<T>, inputs: &BatchInputs<T>, cfg: &TrainConfig) -> Result<LossReport> {
    let lr = lr_at(
        state.step,
        cfg.total_steps.max(state.step),
        cfg.warmup_steps.min(cfg.total_steps),
        cfg.max_lr,
    )?;
    let mut tape = Tape::new();
    let f = forward(&mut tape, state, inputs, &cfg.loss_config(), true)?;
    let rep = report(&tape, &f, state.step, lr);
    if !rep.total.is_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            what: "loss".into(),
            last_good: "n/a".into(),
        });
    }
    let grads = tape.backward(f.loss.total)?;
    let grad_of = |v: Var, like: &Tensor<T>| grads.get_or_zeros(v, like.rows(), like.cols());
    let image_grads: Vec<Tensor<T>> = f
        .image_params
        .iter()
        .zip(state.image.params())
        .map(|(&v, p)| grad_of(v, p))
        .collect();
    let text_grads: Vec<Tensor<T>> = f.text_params.iter().zip(state.text.params()).map(|(&v, p)| grad_of(v, p)).collect();
    let sc = &f.scalars;
    let scalar_grads: Vec<Tensor<T>> = [sc.log_tau, sc.log_c_img, sc.log_c_txt, sc.log_kappa]
        .into_iter()
        .map(|v| grads.get_or_zeros(v, 1, 1))
        .collect();
    let mut scalar_values: Vec<Tensor<T>> = state.scalars.as_array().into_iter().map(Tensor::scalar).collect();
    {
        let mut slots: Vec<ParamSlot<'_, T>> = Vec::new();
        for (value, grad) in state.image.params_mut().into_iter().zip(&image_grads) {
            slots.push(ParamSlot { value, grad, decay: true });
        }
        for (value, grad) in state.text.params_mut().into_iter().zip(&text_grads) {
            slots.push(ParamSlot { value, grad, decay: true });
        }
        for (value, grad) in scalar_values.iter_mut().zip(&scalar_grads) {
            slots.push(ParamSlot { value, grad, decay: false });
        }
        adamw_step(&mut slots, &mut state.optim, T::lit(lr), &cfg.adamw).map_err(|e| match e {
            Error::NonFinite { what, last_good, .. } => Error::NonFinite {
                step: state.step,
                what,
                last_good,
            },
            other => other,
        })?;
    }
    let updated: Vec<T> = scalar_values.iter().map(Tensor::item).collect();
    state.scalars = ScalarParams::from_array([updated[0], updated[1], updated[2], updated[3]]);
    state.scalars.clamp_in_place();
    state.step += 1;
    Ok(rep)
}

/// Converts a dataset to the model scalar type.
pub fn convert_dataset<T: Real>(data: &Dataset<f64>) -> Dataset<T> {
    let v = |x: &Vec<f64>| x.iter().map(|&a| T::lit(a)).collect::<Vec<T>>();
    Dataset {
        feature_dim: data.feature_dim,
        items: data
            .items
            .iter()
            .map(|q| Quadruple {
                id: q.id,
                image: v(&q.image),
                text: v(&q.text),
                image_boxes: q.image_boxes.iter().map(v).collect(),
                text_boxes: q.text_boxes.iter().map(v).collect(),
                class_id: q.class_id.clone(),
                box_ratios: q.box_ratios.clone(),
                box_concepts: q.box_concepts.clone(),
            })
            .collect(),
    }
}

/// Deterministic batch schedule: a seeded permutation per epoch (last
/// partial batch dropped) and a seeded box choice per step. Both are pure
/// functions of `(seed, step)`, so a resumed run sees the same batches.
pub struct BatchPlan {
    seed: u64,
    n: usize,
    batch: usize,
    cached_epoch: Option<(u64, Vec<usize>)>,
}

impl BatchPlan {
    pub fn new(seed: u64, n: usize, batch: usize) -> Result<Self> {
        if n < batch {
            return Err(Error::Dataset(format!("dataset has {n} samples, fewer than one batch of {batch}")));
        }
        Ok(Self {
            seed,
            n,
            batch,
            cached_epoch: None,
        })
    }

    pub fn batches_per_epoch(&self) -> u64 {
        (self.n / self.batch) as u64
    }

    /// Sample indices of the batch used at `step`.
    pub fn indices(&mut self, step: u64) -> Vec<usize> {
        let bpe = self.batches_per_epoch();
        let (epoch, k) = (step / bpe, (step % bpe) as usize);
        if self.cached_epoch.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..self.n).collect();
            perm.shuffle(&mut seed::rng(seed::derive(self.seed, tags::EPOCH), epoch));
            self.cached_epoch = Some((epoch, perm));
        }
        let perm = &self.cached_epoch.as_ref().expect("just filled").1;
        perm[k * self.batch..(k + 1) * self.batch].to_vec()
    }

    /// Box index for each sample of the batch at `step`.
    pub fn boxes<T>(&self, step: u64, items: &[&Quadruple<T>]) -> Vec<usize> {
        let mut rng = seed::rng(seed::derive(self.seed, tags::BOXES), step);
        items.iter().map(|q| rng.random_range(0..q.num_boxes())).collect()
    }
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    pub keep_last: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutput<T> {
    pub state: ModelState<T>,
    /// One record per evaluation.
    pub metrics: Vec<MetricRecord>,
    /// One report per optimizer step.
    pub steps: Vec<LossReport>,
}

/// Fixed evaluation batches: the first samples in dataset order, box 0.
pub fn eval_inputs<T: Real>(data: &Dataset<T>, cfg: &TrainConfig) -> Result<Vec<BatchInputs<T>>> {
    let nb = (data.len() / cfg.batch_size).clamp(1, cfg.eval_batches);
    if data.len() < cfg.batch_size {
        return Err(Error::Dataset(format!(
            "dataset has {} samples, fewer than one batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    (0..nb)
        .map(|b| {
            let items: Vec<&Quadruple<T>> = data.items[b * cfg.batch_size..(b + 1) * cfg.batch_size].iter().collect();
            BatchInputs::gather(&items, &vec![0; items.len()])
        })
        .collect()
}

/// Mean evaluation loss over the fixed evaluation batches.
pub fn evaluate<T: Real>(state: &ModelState<T>, eval: &[BatchInputs<T>], cfg: &TrainConfig, lr: f64) -> Result<LossReport> {
    let reports = eval.iter().map(|b| evaluate_batch(state, b, cfg)).collect::<Result<Vec<_>>>()?;
    let n = reports.len() as f64;
    let mean = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(LossReport {
        step: state.step,
        hcc: mean(|r| r.hcc),
        hce: mean(|r| r.hce),
        total: mean(|r| r.total),
        tau: reports[0].tau,
        kappa: reports[0].kappa,
        radius_img: mean(|r| r.radius_img),
        radius_txt: mean(|r| r.radius_txt),
        radius_img_box: mean(|r| r.radius_img_box),
        radius_txt_box: mean(|r| r.radius_txt_box),
        lr,
    })
}

/// Trains a freshly initialized model.
pub fn train_run<T: Real>(cfg: &TrainConfig, data: &Dataset<f64>, opts: &RunOptions) -> Result<RunOutput<T>> {
    if data.is_empty() {
        return Err(Error::Dataset("training dataset is empty".into()));
    }
    let state = ModelState::init(cfg, data.feature_dim)?;
    continue_run(state, cfg, data, opts)
}

/// Continues training `state` from its step counter up to `cfg.total_steps`.
pub fn continue_run<T: Real>(mut state: ModelState<T>, cfg: &TrainConfig, data: &Dataset<f64>, opts: &RunOptions) -> Result<RunOutput<T>> {
    cfg.validate()?;
    let mut metrics = Vec::new();
    let mut steps = Vec::new();
    if cfg.total_steps == 0 || state.step >= cfg.total_steps {
        return Ok(RunOutput { state, metrics, steps });
    }
    let data: Dataset<T> = convert_dataset(data);
    let eval = eval_inputs(&data, cfg)?;
    let mut plan = BatchPlan::new(cfg.seed, data.len(), cfg.batch_size)?;
    let mut log = match &opts.metrics_path {
        Some(p) => Some((BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?), p.clone())),
        None => None,
    };
    let mut saved: Vec<PathBuf> = Vec::new();
    let mut best = f64::INFINITY;
    let mut last_good = String::from("none");

    let mut emit =
        |rec: LossReport, state: &ModelState<T>, saved: &mut Vec<PathBuf>, last_good: &mut String, checkpoint: bool| -> Result<()> {
            if let Some((w, p)) = log.as_mut() {
                serde_json::to_writer(&mut *w, &rec).map_err(|e| Error::io(p.as_path(), e.into()))?;
                w.write_all(b"\n").map_err(|e| Error::io(p.as_path(), e))?;
                w.flush().map_err(|e| Error::io(p.as_path(), e))?;
            }
            metrics.push(rec);
            if let (true, Some(dir)) = (checkpoint, &opts.checkpoint_dir) {
                let path = dir.join(format!("ckpt-{:08}.hycn", state.step));
                save_checkpoint(state, cfg, &path)?;
                *last_good = path.display().to_string();
                saved.push(path);
                let keep = opts.keep_last.max(1);
                while saved.len() > keep {
                    let old = saved.remove(0);
                    std::fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
                }
                if rec.total < best {
                    best = rec.total;
                    save_checkpoint(state, cfg, &dir.join("best.hycn"))?;
                }
            }
            Ok(())
        };

    let lr0 = lr_at(state.step, cfg.total_steps, cfg.warmup_steps, cfg.max_lr)?;
    emit(evaluate(&state, &eval, cfg, lr0)?, &state, &mut saved, &mut last_good, false)?;
    while state.step < cfg.total_steps {
        let idx = plan.indices(state.step);
        let items: Vec<&Quadruple<T>> = idx.iter().map(|&i| &data.items[i]).collect();
        let boxes = plan.boxes(state.step, &items);
        let inputs = BatchInputs::gather(&items, &boxes)?;
        let rep = train_step(&mut state, &inputs, cfg).map_err(|e| match e {
            Error::NonFinite { step, what, .. } => Error::NonFinite {
                step,
                what,
                last_good: last_good.clone(),
            },
            other => other,
        })?;
        steps.push(rep);
        let done = state.step == cfg.total_steps;
        let do_eval = done || (cfg.eval_every > 0 && state.step.is_multiple_of(cfg.eval_every));
        let do_ckpt = cfg.checkpoint_every > 0 && (done || state.step.is_multiple_of(cfg.checkpoint_every));
        if do_eval || do_ckpt {
            let lr = lr_at(state.step, cfg.total_steps, cfg.warmup_steps, cfg.max_lr)?;
            let rec = evaluate(&state, &eval, cfg, lr)?;
            if !rec.total.is_finite() {
                return Err(Error::NonFinite {
                    step: state.step,
                    what: "evaluation loss".into(),
                    last_good,
                });
            }
            emit(rec, &state, &mut saved, &mut last_good, do_ckpt)?;
        }
    }
    Ok(RunOutput { state, metrics, steps })
}

/// Writes records as newline-delimited JSON.
pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};

    fn tiny_data() -> Dataset<f64> {
        generate_synthetic(&SynthSpec {
            depth: 2,
            branching: 2,
            feature_dim: 6,
            samples_per_leaf: 8,
            seed: 1,
            ..SynthSpec::default()
        })
        .unwrap()
        .0
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            total_steps: 20,
            warmup_steps: 5,
            max_lr: 1e-2,
            hidden_dims: vec![8],
            embed_dim: 4,
            eval_every: 5,
            eval_batches: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn kappa_mode_parsing() {
        assert_eq!("fixed:0.3".parse::<KappaMode>().unwrap(), KappaMode::Fixed(0.3));
        assert_eq!("learnable".parse::<KappaMode>().unwrap(), KappaMode::Learnable { init: 1.0 });
        assert_eq!("learnable:2".parse::<KappaMode>().unwrap(), KappaMode::Learnable { init: 2.0 });
        assert!("fixed".parse::<KappaMode>().is_err());
        assert!("bogus:1".parse::<KappaMode>().is_err());
        let s = serde_json::to_string(&KappaMode::Fixed(0.6)).unwrap();
        assert_eq!(serde_json::from_str::<KappaMode>(&s).unwrap(), KappaMode::Fixed(0.6));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            warmup_steps: 10,
            total_steps: 5,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            kappa: KappaMode::Fixed(20.0),
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let json = r#"{"batch_size": 32, "K": 0.2}"#;
        let c: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!((c.batch_size, c.k, c.total_steps), (32, 0.2, 2000));
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let cfg = TrainConfig {
            total_steps: 0,
            warmup_steps: 0,
            ..tiny_cfg()
        };
        let data = tiny_data();
        let out = train_run::<f64>(&cfg, &data, &RunOptions::default()).unwrap();
        assert_eq!(out.state, ModelState::init(&cfg, data.feature_dim).unwrap());
        assert!(out.steps.is_empty());
    }

    #[test]
    fn collapsed_batch_reports_log_b() {
        let data = tiny_data();
        let cfg = TrainConfig { gamma: 0.0, ..tiny_cfg() };
        let mut state = ModelState::<f64>::init(&cfg, data.feature_dim).unwrap();
        let q = &data.items[0];
        let items = vec![q; 8];
        let inputs = BatchInputs::gather(&items, &[0; 8]).unwrap();
        let rep = train_step(&mut state, &inputs, &cfg).unwrap();
        assert!((rep.total - 8f64.ln()).abs() < 1e-12);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn runs_are_deterministic_and_kappa_stays_clamped() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let a = train_run::<f64>(&cfg, &data, &RunOptions::default()).unwrap();
        let b = train_run::<f64>(&cfg, &data, &RunOptions::default()).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.state, b.state);
        assert_eq!(a.metrics.len(), 5);
        assert!(a.steps.iter().all(|r| (0.1..=10.0).contains(&r.kappa)));
    }

    #[test]
    fn fixed_kappa_never_moves() {
        let data = tiny_data();
        let cfg = TrainConfig {
            kappa: KappaMode::Fixed(0.3),
            ..tiny_cfg()
        };
        let out = train_run::<f64>(&cfg, &data, &RunOptions::default()).unwrap();
        assert!(out.steps.iter().all(|r| (r.kappa - 0.3).abs() < 1e-15));
    }

    #[test]
    fn resume_continues_the_same_loss_curve() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let full = train_run::<f64>(&cfg, &data, &RunOptions::default()).unwrap();
        let half_cfg = TrainConfig {
            total_steps: 20,
            ..cfg.clone()
        };
        let mut state = ModelState::<f64>::init(&cfg, data.feature_dim).unwrap();
        let d: Dataset<f64> = convert_dataset(&data);
        let mut plan = BatchPlan::new(cfg.seed, d.len(), cfg.batch_size).unwrap();
        for _ in 0..9 {
            let idx = plan.indices(state.step);
            let items: Vec<_> = idx.iter().map(|&i| &d.items[i]).collect();
            let boxes = plan.boxes(state.step, &items);
            train_step(&mut state, &BatchInputs::gather(&items, &boxes).unwrap(), &half_cfg).unwrap();
        }
        let rest = continue_run(state, &half_cfg, &data, &RunOptions::default()).unwrap();
        assert_eq!(rest.steps[..], full.steps[9..]);
        assert_eq!(rest.state, full.state);
    }

    #[test]
    fn f32_training_runs() {
        let data = tiny_data();
        let out = train_run::<f32>(&tiny_cfg(), &data, &RunOptions::default()).unwrap();
        assert_eq!(out.state.step, 20);
        assert!(out.steps.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn batch_plan_covers_each_epoch() {
        let mut plan = BatchPlan::new(3, 10, 3).unwrap();
        assert_eq!(plan.batches_per_epoch(), 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|s| plan.indices(s)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_ne!(plan.indices(0), plan.indices(3));
        assert!(BatchPlan::new(0, 2, 3).is_err());
    }
}
