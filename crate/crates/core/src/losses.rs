//! Hierarchical compositional contrastive (hCC) and entailment (hCE) losses.
//!
//! Two entry points share one definition: plain functions over
//! [`HyperPoint`]s for evaluation, and [`build_hc_graph`], which records the
//! same computation on a [`Tape`] for training.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cones::{entailment_penalty, ApertureParams, DEFAULT_K};
use crate::error::{Error, Result};
use crate::manifold::{geodesic_distance, HyperPoint};
use crate::net::tape::{Tape, Tensor, Var};
use crate::scalar::Real;

/// The eight individually switchable loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossTerm {
    #[serde(rename = "cont_IT")]
    ContIT,
    #[serde(rename = "cont_TI")]
    ContTI,
    #[serde(rename = "cont_IboxT")]
    ContIboxT,
    #[serde(rename = "cont_TboxI")]
    ContTboxI,
    #[serde(rename = "ent_IboxTbox")]
    EntIboxTbox,
    #[serde(rename = "ent_IT")]
    EntIT,
    #[serde(rename = "ent_IIbox")]
    EntIIbox,
    #[serde(rename = "ent_TTbox")]
    EntTTbox,
}

impl LossTerm {
    pub const ALL: [LossTerm; 8] = [
        LossTerm::ContIT,
        LossTerm::ContTI,
        LossTerm::ContIboxT,
        LossTerm::ContTboxI,
        LossTerm::EntIboxTbox,
        LossTerm::EntIT,
        LossTerm::EntIIbox,
        LossTerm::EntTTbox,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::ContIT => "cont_IT",
            LossTerm::ContTI => "cont_TI",
            LossTerm::ContIboxT => "cont_IboxT",
            LossTerm::ContTboxI => "cont_TboxI",
            LossTerm::EntIboxTbox => "ent_IboxTbox",
            LossTerm::EntIT => "ent_IT",
            LossTerm::EntIIbox => "ent_IIbox",
            LossTerm::EntTTbox => "ent_TTbox",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossTerm::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            let names: Vec<_> = LossTerm::ALL.iter().map(|t| t.name()).collect();
            Error::Config(format!("unknown loss term `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights<T> {
    pub gamma: T,
    pub eta_inter: T,
    pub eta_intra: T,
}

impl<T: Real> Default for LossWeights<T> {
    fn default() -> Self {
        Self {
            gamma: T::lit(0.1),
            eta_inter: T::lit(0.7),
            eta_intra: T::lit(1.2),
        }
    }
}

/// Everything that shapes the objective besides the embeddings themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig<T> {
    pub weights: LossWeights<T>,
    /// Cone boundary constant `K`.
    pub k: T,
    /// Drop the positive pair from the softmax denominator.
    pub literal_denominator: bool,
    /// Terms removed from the objective. Removing a contrastive term keeps the ¼ factor.
    pub ablate: Vec<LossTerm>,
}

impl<T: Real> Default for LossConfig<T> {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            k: T::lit(DEFAULT_K),
            literal_denominator: false,
            ablate: Vec::new(),
        }
    }
}

impl<T: Real> LossConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if !(w.gamma >= T::zero()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", w.gamma)));
        }
        ApertureParams::new(self.k, w.eta_inter).map_err(|e| Error::Config(e.to_string()))?;
        ApertureParams::new(self.k, w.eta_intra).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn active(&self, term: LossTerm) -> bool {
        !self.ablate.contains(&term)
    }
}

/// The four embedded roles of a batch plus the softmax temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedBatch<T> {
    pub img: Vec<HyperPoint<T>>,
    pub txt: Vec<HyperPoint<T>>,
    pub img_box: Vec<HyperPoint<T>>,
    pub txt_box: Vec<HyperPoint<T>>,
    pub tau: T,
}

impl<T: Real> EmbeddedBatch<T> {
    pub fn new(
        img: Vec<HyperPoint<T>>,
        txt: Vec<HyperPoint<T>>,
        img_box: Vec<HyperPoint<T>>,
        txt_box: Vec<HyperPoint<T>>,
        tau: T,
    ) -> Result<Self> {
        let b = img.len();
        if txt.len() != b || img_box.len() != b || txt_box.len() != b {
            return Err(Error::contract("all four roles must have the same batch size"));
        }
        if !(tau > T::zero()) {
            return Err(Error::contract(format!("temperature must be > 0, got {tau}")));
        }
        if let Some(first) = img.first() {
            for p in txt.iter().chain(&img_box).chain(&txt_box).chain(&img) {
                if p.dim() != first.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: first.dim(),
                        got: p.dim(),
                    });
                }
                if p.curvature() != first.curvature() {
                    return Err(Error::CurvatureMismatch(
                        first.curvature().kappa().as_f64(),
                        p.curvature().kappa().as_f64(),
                    ));
                }
            }
        }
        Ok(Self {
            img,
            txt,
            img_box,
            txt_box,
            tau,
        })
    }

    pub fn len(&self) -> usize {
        self.img.len()
    }

    pub fn is_empty(&self) -> bool {
        self.img.is_empty()
    }
}

/// Values of the combined objective and each of its eight terms (before
/// the ¼ and γ factors).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub hcc: T,
    pub hce: T,
    pub total: T,
    pub terms: [T; 8],
}

/// Mean InfoNCE with logits `−d/τ` and the diagonal as positives.
pub fn contrastive_term<T: Real>(anchors: &[HyperPoint<T>], candidates: &[HyperPoint<T>], tau: T) -> Result<T> {
    contrastive_term_with(anchors, candidates, tau, false)
}

/// [`contrastive_term`] with the option to leave the positive out of the denominator.
pub fn contrastive_term_with<T: Real>(
    anchors: &[HyperPoint<T>],
    candidates: &[HyperPoint<T>],
    tau: T,
    exclude_positive: bool,
) -> Result<T> {
    let b = anchors.len();
    if b < 2 || candidates.len() != b {
        return Err(Error::contract(format!(
            "contrastive term needs two equal batches of size >= 2, got {} and {}",
            b,
            candidates.len()
        )));
    }
    let mut total = T::zero();
    let mut logits = vec![T::zero(); b];
    for (i, a) in anchors.iter().enumerate() {
        for (l, c) in logits.iter_mut().zip(candidates) {
            *l = -geodesic_distance(a, c)? / tau;
        }
        let max = logits
            .iter()
            .enumerate()
            .filter(|&(k, _)| !(exclude_positive && k == i))
            .map(|(_, &l)| l)
            .fold(T::neg_infinity(), T::max);
        let sum: T = logits
            .iter()
            .enumerate()
            .filter(|&(k, _)| !(exclude_positive && k == i))
            .map(|(_, &l)| (l - max).exp())
            .sum();
        total += max + sum.ln() - logits[i];
    }
    Ok(total / T::from_usize(b).expect("batch fits"))
}

fn contrastive_terms<T: Real>(batch: &EmbeddedBatch<T>, literal: bool) -> Result<[T; 4]> {
    let t = batch.tau;
    Ok([
        contrastive_term_with(&batch.img, &batch.txt, t, literal)?,
        contrastive_term_with(&batch.txt, &batch.img, t, literal)?,
        contrastive_term_with(&batch.img_box, &batch.txt, t, literal)?,
        contrastive_term_with(&batch.txt_box, &batch.img, t, literal)?,
    ])
}

fn entailment_terms<T: Real>(batch: &EmbeddedBatch<T>, weights: &LossWeights<T>, k: T) -> Result<[T; 4]> {
    if batch.is_empty() {
        return Err(Error::contract("entailment loss of an empty batch"));
    }
    let inter = ApertureParams::new(k, weights.eta_inter)?;
    let intra = ApertureParams::new(k, weights.eta_intra)?;
    let mut acc = [T::zero(); 4];
    for i in 0..batch.len() {
        acc[0] += entailment_penalty(&batch.img_box[i], &batch.txt_box[i], inter)?;
        acc[1] += entailment_penalty(&batch.img[i], &batch.txt[i], inter)?;
        acc[2] += entailment_penalty(&batch.img[i], &batch.img_box[i], intra)?;
        acc[3] += entailment_penalty(&batch.txt[i], &batch.txt_box[i], intra)?;
    }
    let n = T::from_usize(batch.len()).expect("batch fits");
    Ok(acc.map(|a| a / n))
}

/// `¼·(cont(I,T) + cont(T,I) + cont(Iᵇᵒˣ,T) + cont(Tᵇᵒˣ,I))`.
pub fn hcc_loss<T: Real>(batch: &EmbeddedBatch<T>) -> Result<T> {
    let terms = contrastive_terms(batch, false)?;
    Ok(terms.into_iter().sum::<T>() / T::lit(4.0))
}

/// Batch mean of the four entailment penalties, each `(specific, general)`:
/// `(Iᵇᵒˣ,Tᵇᵒˣ)` and `(I,T)` with `η_inter`, `(I,Iᵇᵒˣ)` and `(T,Tᵇᵒˣ)` with `η_intra`.
pub fn hce_loss<T: Real>(batch: &EmbeddedBatch<T>, weights: &LossWeights<T>, k: T) -> Result<T> {
    Ok(entailment_terms(batch, weights, k)?.into_iter().sum())
}

/// `hCC + γ·hCE`.
pub fn hc_loss<T: Real>(batch: &EmbeddedBatch<T>, weights: &LossWeights<T>, k: T) -> Result<T> {
    Ok(hcc_loss(batch)? + weights.gamma * hce_loss(batch, weights, k)?)
}

/// Full objective under a [`LossConfig`], with per-term values.
pub fn hc_breakdown<T: Real>(batch: &EmbeddedBatch<T>, cfg: &LossConfig<T>) -> Result<LossBreakdown<T>> {
    let cont = contrastive_terms(batch, cfg.literal_denominator)?;
    let ent = entailment_terms(batch, &cfg.weights, cfg.k)?;
    let mut terms = [T::zero(); 8];
    terms[..4].copy_from_slice(&cont);
    terms[4..].copy_from_slice(&ent);
    let pick = |range: std::ops::Range<usize>| -> T {
        LossTerm::ALL[range]
            .iter()
            .filter(|t| cfg.active(**t))
            .map(|t| terms[t.index()])
            .sum()
    };
    let hcc = pick(0..4) / T::lit(4.0);
    let hce = pick(4..8);
    Ok(LossBreakdown {
        hcc,
        hce,
        total: hcc + cfg.weights.gamma * hce,
        terms,
    })
}

/// Tape handles for the four embedded roles (spatial coordinates, `B×n`)
/// and the scalars they depend on.
#[derive(Clone, Copy, Debug)]
pub struct GraphEmbeddings {
    pub img: Var,
    pub txt: Var,
    pub img_box: Var,
    pub txt_box: Var,
    pub tau: Var,
    pub kappa: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GraphLoss {
    pub hcc: Var,
    pub hce: Var,
    pub total: Var,
}

fn graph_contrastive<T: Real>(tape: &mut Tape<T>, a: Var, c: Var, e: &GraphEmbeddings, literal: bool) -> Result<Var> {
    let d = tape.pair_dist(a, c, e.kappa)?;
    let scaled = tape.div_scalar(d, e.tau)?;
    let logits = tape.scale(scaled, -T::one())?;
    tape.info_nce(logits, literal)
}

fn graph_penalty<T: Real>(tape: &mut Tape<T>, specific: Var, general: Var, e: &GraphEmbeddings, k: T, eta: T) -> Result<Var> {
    let phi = tape.exterior_angle(specific, general, e.kappa)?;
    let omega = tape.half_aperture(general, e.kappa, k)?;
    let widened = tape.scale(omega, eta)?;
    let gap = tape.sub(phi, widened)?;
    let hinge = tape.relu(gap)?;
    tape.mean(hinge)
}

fn sum_vars<T: Real>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    match vars.split_first() {
        None => Ok(tape.constant(Tensor::scalar(T::zero()))),
        Some((&first, rest)) => rest.iter().try_fold(first, |acc, &v| tape.add(acc, v)),
    }
}

/// Records the configured objective on `tape`.
pub fn build_hc_graph<T: Real>(tape: &mut Tape<T>, e: &GraphEmbeddings, cfg: &LossConfig<T>) -> Result<GraphLoss> {
    let w = cfg.weights;
    let lit = cfg.literal_denominator;
    let mut cont = Vec::with_capacity(4);
    for (term, a, c) in [
        (LossTerm::ContIT, e.img, e.txt),
        (LossTerm::ContTI, e.txt, e.img),
        (LossTerm::ContIboxT, e.img_box, e.txt),
        (LossTerm::ContTboxI, e.txt_box, e.img),
    ] {
        if cfg.active(term) {
            cont.push(graph_contrastive(tape, a, c, e, lit)?);
        }
    }
    let mut ent = Vec::with_capacity(4);
    for (term, p, q, eta) in [
        (LossTerm::EntIboxTbox, e.img_box, e.txt_box, w.eta_inter),
        (LossTerm::EntIT, e.img, e.txt, w.eta_inter),
        (LossTerm::EntIIbox, e.img, e.img_box, w.eta_intra),
        (LossTerm::EntTTbox, e.txt, e.txt_box, w.eta_intra),
    ] {
        if cfg.active(term) {
            ent.push(graph_penalty(tape, p, q, e, cfg.k, eta)?);
        }
    }
    let cont_sum = sum_vars(tape, &cont)?;
    let hcc = tape.scale(cont_sum, T::lit(0.25))?;
    let hce = sum_vars(tape, &ent)?;
    let weighted = tape.scale(hce, w.gamma)?;
    let total = tape.add(hcc, weighted)?;
    Ok(GraphLoss { hcc, hce, total })
}
