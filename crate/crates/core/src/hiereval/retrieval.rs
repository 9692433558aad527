//! Zero-shot classification and nearest-neighbour retrieval by geodesic distance.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::manifold::{geodesic_distance, HyperPoint};
use crate::scalar::Real;
use crate::trainer::{Modality, ModelState};

/// One hyperbolic text embedding per class.
///
/// The prompts of a class are averaged as raw text-encoder outputs, then
/// scaled and projected once.
#[derive(Clone, Debug)]
pub struct ClassPrototypes<T> {
    pub embeddings: Vec<HyperPoint<T>>,
}

impl<T: Real> ClassPrototypes<T> {
    pub fn new(model: &ModelState<T>, class_texts: &[Vec<Vec<T>>]) -> Result<Self> {
        if class_texts.is_empty() {
            return Err(Error::Dataset("zero-shot classification needs at least one class".into()));
        }
        let embeddings = class_texts
            .iter()
            .enumerate()
            .map(|(c, prompts)| {
                if prompts.is_empty() {
                    return Err(Error::Dataset(format!("class {c} has no text prompts")));
                }
                let raw = model.raw(Modality::Text, prompts)?;
                let n = T::lit(raw.len() as f64);
                let mut mean = vec![T::zero(); raw[0].len()];
                for r in &raw {
                    for (m, &x) in mean.iter_mut().zip(r) {
                        *m += x;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                model.project(Modality::Text, &mean)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { embeddings })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    /// Index of the class nearest to an already embedded image.
    pub fn nearest(&self, image: &HyperPoint<T>) -> Result<usize> {
        let mut best = (0, T::infinity());
        for (c, e) in self.embeddings.iter().enumerate() {
            let d = geodesic_distance(image, e)?;
            if d < best.1 {
                best = (c, d);
            }
        }
        Ok(best.0)
    }

    /// Predicted class of each image feature vector.
    pub fn classify_batch(&self, model: &ModelState<T>, images: &[Vec<T>]) -> Result<Vec<usize>> {
        let emb = model.embed(Modality::Image, images)?;
        emb.par_iter().map(|e| self.nearest(e)).collect()
    }
}

/// Class whose averaged prompt embedding is geodesically closest to the image.
pub fn zero_shot_classify<T: Real>(model: &ModelState<T>, class_texts: &[Vec<Vec<T>>], image: &[T]) -> Result<usize> {
    let protos = ClassPrototypes::new(model, class_texts)?;
    let raw = model.raw(Modality::Image, &[image.to_vec()])?;
    protos.nearest(&model.project(Modality::Image, &raw[0])?)
}

/// Fraction of `predictions` equal to `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::Dataset(format!(
            "accuracy over {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Indices of the `k` gallery points nearest to `query`, nearest first.
/// Equal distances rank the lower index first.
pub fn retrieve_topk<T: Real>(query: &HyperPoint<T>, gallery: &[HyperPoint<T>], k: usize) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::Dataset("retrieval gallery is empty".into()));
    }
    if k > gallery.len() {
        return Err(Error::Config(format!("k = {k} exceeds the gallery size {}", gallery.len())));
    }
    let d = gallery
        .par_iter()
        .map(|g| geodesic_distance(query, g))
        .collect::<Result<Vec<T>>>()?;
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| d[a].as_f64().total_cmp(&d[b].as_f64()).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}
