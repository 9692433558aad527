//! Compositional quadruples, the JSONL dataset format and a synthetic
//! generator with a known concept hierarchy.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hiereval::taxonomy::TaxonomyGraph;
use crate::histogram::Histogram;
use crate::seed::{self, tags};

pub const FORMAT_VERSION: u32 = 1;

/// One training sample: full image, caption, and aligned local boxes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quadruple<T = f64> {
    pub id: u64,
    pub image: Vec<T>,
    pub text: Vec<T>,
    pub image_boxes: Vec<Vec<T>>,
    pub text_boxes: Vec<Vec<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_ratios: Option<Vec<f64>>,
    /// Ground-truth concept behind each box, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_concepts: Option<Vec<String>>,
}

impl<T> Quadruple<T> {
    pub fn num_boxes(&self) -> usize {
        self.image_boxes.len()
    }

    fn check(&self, dim: usize) -> std::result::Result<(), String> {
        if self.image_boxes.is_empty() {
            return Err("record has no boxes".into());
        }
        if self.image_boxes.len() != self.text_boxes.len() {
            return Err(format!(
                "{} image boxes but {} text boxes",
                self.image_boxes.len(),
                self.text_boxes.len()
            ));
        }
        let vectors = std::iter::once(&self.image)
            .chain(std::iter::once(&self.text))
            .chain(&self.image_boxes)
            .chain(&self.text_boxes);
        for v in vectors {
            if v.len() != dim {
                return Err(format!("feature vector of length {} (expected {dim})", v.len()));
            }
        }
        if let Some(r) = &self.box_ratios {
            if r.len() != self.image_boxes.len() {
                return Err("box_ratios must align with image_boxes".into());
            }
            if r.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
                return Err("box ratios must lie in (0, 1]".into());
            }
        }
        if let Some(c) = &self.box_concepts {
            if c.len() != self.image_boxes.len() {
                return Err("box_concepts must align with image_boxes".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    feature_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T = f64> {
    pub feature_dim: usize,
    pub items: Vec<Quadruple<T>>,
}

impl<T> Dataset<T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

impl<T: Serialize + DeserializeOwned> Dataset<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = Header {
            format_version: FORMAT_VERSION,
            feature_dim: self.feature_dim,
        };
        let io = |e| Error::io(path, e);
        serde_json::to_writer(&mut w, &header).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(io)?;
        for q in &self.items {
            serde_json::to_writer(&mut w, q).map_err(|e| Error::io(path, e.into()))?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Reads and validates a dataset. Records without boxes are rejected
    /// together, with their count and line numbers.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut header: Option<Header> = None;
        let mut items = Vec::new();
        let mut boxless = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let no = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let Some(h) = &header else {
                let h: Header = serde_json::from_str(&line).map_err(|e| perr(no, format!("bad header: {e}")))?;
                if h.format_version != FORMAT_VERSION {
                    return Err(perr(
                        no,
                        format!("format_version {} unsupported (expected {FORMAT_VERSION})", h.format_version),
                    ));
                }
                header = Some(h);
                continue;
            };
            let q: Quadruple<T> = serde_json::from_str(&line).map_err(|e| perr(no, e.to_string()))?;
            if q.image_boxes.is_empty() && q.text_boxes.is_empty() {
                boxless.push(no);
                continue;
            }
            q.check(h.feature_dim).map_err(|m| perr(no, m))?;
            items.push(q);
        }
        if !boxless.is_empty() {
            let shown: Vec<String> = boxless.iter().take(10).map(usize::to_string).collect();
            return Err(Error::Dataset(format!(
                "{}: {} record(s) without boxes (lines {}{})",
                path.display(),
                boxless.len(),
                shown.join(", "),
                if boxless.len() > 10 { ", ..." } else { "" }
            )));
        }
        let Some(h) = header else {
            log::warn!("{}: empty dataset file", path.display());
            return Ok(Self { feature_dim: 0, items });
        };
        if items.is_empty() {
            log::warn!("{}: dataset has no records", path.display());
        }
        Ok(Self {
            feature_dim: h.feature_dim,
            items,
        })
    }
}

/// Parameters of the synthetic world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub depth: usize,
    pub branching: usize,
    pub feature_dim: usize,
    /// Standard deviation of each level's offset from its parent concept.
    pub concept_scale: f64,
    /// Standard deviation of the fixed per-modality offsets.
    pub modality_offset_scale: f64,
    pub noise_sigma: f64,
    /// Fraction of the noise variance shared by all views of one sample.
    pub noise_correlation: f64,
    pub samples_per_leaf: usize,
    pub max_boxes: usize,
    pub box_ratio_alpha: f64,
    pub box_ratio_beta: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            depth: 3,
            branching: 4,
            feature_dim: 32,
            concept_scale: 1.0,
            modality_offset_scale: 0.5,
            noise_sigma: 0.3,
            noise_correlation: 0.8,
            samples_per_leaf: 64,
            max_boxes: 2,
            box_ratio_alpha: 2.0,
            box_ratio_beta: 2.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.depth == 0 {
            return bad("synthetic tree depth must be >= 1");
        }
        if self.branching == 0 || self.feature_dim == 0 || self.max_boxes == 0 {
            return bad("branching, feature_dim and max_boxes must be >= 1");
        }
        let positive = [
            self.concept_scale,
            self.modality_offset_scale,
            self.box_ratio_alpha,
            self.box_ratio_beta,
        ];
        if positive.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return bad("scales and box-ratio shape parameters must be > 0");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.noise_correlation) {
            return bad("noise_correlation must lie in [0, 1]");
        }
        if self.branching.checked_pow(self.depth as u32).is_none_or(|n| n > 1 << 20) {
            return bad("synthetic tree too large");
        }
        Ok(())
    }
}

/// Concept tree with one feature-space vector per concept, plus the two
/// modality offsets. Samples are drawn from it with fresh noise.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub spec: SynthSpec,
    pub taxonomy: TaxonomyGraph,
    pub concepts: Vec<Vec<f64>>,
    pub image_offset: Vec<f64>,
    pub text_offset: Vec<f64>,
}

impl SyntheticWorld {
    pub fn new(spec: SynthSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(spec.seed, tags::WORLD);
        let normal = Normal::new(0.0, spec.concept_scale).expect("valid scale");
        let mut edges = Vec::new();
        let mut frontier = vec!["root".to_string()];
        for _ in 0..spec.depth {
            let mut next = Vec::with_capacity(frontier.len() * spec.branching);
            for parent in &frontier {
                for c in 0..spec.branching {
                    let child = if parent == "root" {
                        format!("c{c}")
                    } else {
                        format!("{parent}.{c}")
                    };
                    edges.push((parent.clone(), child.clone(), 1.0));
                    next.push(child);
                }
            }
            frontier = next;
        }
        let taxonomy = TaxonomyGraph::from_edges("root", &edges)?;
        let dim = spec.feature_dim;
        let mut concepts = vec![vec![0.0; dim]; taxonomy.len()];
        // node ids are assigned in edge order, so parents precede children
        for id in 1..taxonomy.len() {
            let p = taxonomy.parent(id).expect("non-root");
            let base = concepts[p].clone();
            concepts[id] = base.iter().map(|&b| b + normal.sample(&mut rng)).collect();
        }
        let off = Normal::new(0.0, spec.modality_offset_scale).expect("valid scale");
        let image_offset = (0..dim).map(|_| off.sample(&mut rng)).collect();
        let text_offset = (0..dim).map(|_| off.sample(&mut rng)).collect();
        Ok(Self {
            spec,
            taxonomy,
            concepts,
            image_offset,
            text_offset,
        })
    }

    pub fn leaves(&self) -> Vec<usize> {
        self.taxonomy.leaves()
    }

    /// One quadruple for `leaf` with fresh noise.
    pub fn sample(&self, leaf: usize, id: u64, rng: &mut ChaCha8Rng) -> Quadruple<f64> {
        let s = &self.spec;
        let dim = s.feature_dim;
        let sd_shared = s.noise_sigma * s.noise_correlation.sqrt();
        let sd_own = s.noise_sigma * (1.0 - s.noise_correlation).sqrt();
        let gauss = |sd: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            if sd == 0.0 {
                return vec![0.0; dim];
            }
            let n = Normal::new(0.0, sd).expect("valid sd");
            (0..dim).map(|_| n.sample(rng)).collect()
        };
        let shared = gauss(sd_shared, rng);
        let view = |concept: usize, offset: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
            let own = gauss(sd_own, rng);
            (0..dim)
                .map(|j| self.concepts[concept][j] + offset[j] + shared[j] + own[j])
                .collect()
        };
        let image = view(leaf, &self.image_offset, rng);
        let text = view(leaf, &self.text_offset, rng);
        let candidates = self.taxonomy.proper_ancestors_below_root(leaf);
        let n_boxes = rng.random_range(1..=s.max_boxes);
        let beta = Beta::new(s.box_ratio_alpha, s.box_ratio_beta).expect("validated");
        let mut image_boxes = Vec::with_capacity(n_boxes);
        let mut text_boxes = Vec::with_capacity(n_boxes);
        let mut ratios = Vec::with_capacity(n_boxes);
        let mut box_concepts = Vec::with_capacity(n_boxes);
        for _ in 0..n_boxes {
            // a depth-1 leaf has no non-root ancestor and boxes itself
            let c = *candidates.choose(rng).unwrap_or(&leaf);
            image_boxes.push(view(c, &self.image_offset, rng));
            text_boxes.push(view(c, &self.text_offset, rng));
            let r: f64 = beta.sample(rng);
            ratios.push(r.max(f64::MIN_POSITIVE));
            box_concepts.push(self.taxonomy.label(c).to_string());
        }
        Quadruple {
            id,
            image,
            text,
            image_boxes,
            text_boxes,
            class_id: Some(self.taxonomy.label(leaf).to_string()),
            box_ratios: Some(ratios),
            box_concepts: Some(box_concepts),
        }
    }

    /// `per_leaf` samples for each leaf, interleaved leaf by leaf, from stream `tag`.
    pub fn sample_split(&self, tag: u64, per_leaf: usize, first_id: u64) -> Dataset<f64> {
        let mut rng = seed::rng(self.spec.seed, tag);
        let leaves = self.leaves();
        let mut items = Vec::with_capacity(per_leaf * leaves.len());
        let mut id = first_id;
        for _ in 0..per_leaf {
            for &leaf in &leaves {
                items.push(self.sample(leaf, id, &mut rng));
                id += 1;
            }
        }
        Dataset {
            feature_dim: self.spec.feature_dim,
            items,
        }
    }

    /// Fresh samples disjoint from the training split.
    pub fn held_out(&self, per_leaf: usize) -> Dataset<f64> {
        self.sample_split(tags::HELD_OUT, per_leaf, 1 << 40)
    }
}

/// Training dataset, its ground-truth taxonomy and the world that produced them.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Dataset<f64>, TaxonomyGraph, SyntheticWorld)> {
    let world = SyntheticWorld::new(spec.clone())?;
    let data = world.sample_split(tags::TRAIN_SAMPLES, spec.samples_per_leaf, 0);
    Ok((data, world.taxonomy.clone(), world))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRatioStats {
    pub count: usize,
    pub histogram: Option<Histogram>,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub frac_above_0_9: Option<f64>,
}

/// Histogram and summary of all box/image area ratios in the dataset.
pub fn box_ratio_stats<T>(data: &Dataset<T>, edges: Vec<f64>) -> Result<BoxRatioStats> {
    let mut ratios: Vec<f64> = data.items.iter().filter_map(|q| q.box_ratios.as_ref()).flatten().copied().collect();
    if ratios.is_empty() {
        Histogram::new(edges)?;
        return Ok(BoxRatioStats {
            count: 0,
            histogram: None,
            mean: None,
            median: None,
            frac_above_0_9: None,
        });
    }
    let n = ratios.len();
    let histogram = Histogram::from_values(edges, ratios.iter().copied())?;
    ratios.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        ratios[n / 2]
    } else {
        0.5 * (ratios[n / 2 - 1] + ratios[n / 2])
    };
    Ok(BoxRatioStats {
        count: n,
        histogram: Some(histogram),
        mean: Some(ratios.iter().sum::<f64>() / n as f64),
        median: Some(median),
        frac_above_0_9: Some(ratios.iter().filter(|&&r| r > 0.9).count() as f64 / n as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small() -> SynthSpec {
        SynthSpec {
            depth: 2,
            branching: 3,
            feature_dim: 8,
            samples_per_leaf: 4,
            seed: 5,
            ..SynthSpec::default()
        }
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    #[test]
    fn zero_noise_samples_of_a_leaf_coincide() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            ..small()
        };
        let (data, tax, _) = generate_synthetic(&spec).unwrap();
        let leaf = data.items[0].class_id.clone();
        let same: Vec<_> = data.items.iter().filter(|q| q.class_id == leaf).collect();
        assert_eq!(same.len(), 4);
        assert!(same.iter().all(|q| q.image == same[0].image && q.text == same[0].text));
        assert_eq!(tax.leaves().len(), 9);
    }

    #[test]
    fn depth_zero_is_rejected() {
        let spec = SynthSpec { depth: 0, ..small() };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn fixed_seed_gives_identical_bytes() {
        let dir = tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        generate_synthetic(&small()).unwrap().0.save(&a).unwrap();
        generate_synthetic(&small()).unwrap().0.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let (data, _, _) = generate_synthetic(&small()).unwrap();
        data.save(&p).unwrap();
        assert_eq!(Dataset::<f64>::load(&p).unwrap(), data);
    }

    #[test]
    fn boxes_come_from_strict_non_root_ancestors() {
        let (data, tax, _) = generate_synthetic(&SynthSpec::default()).unwrap();
        for q in &data.items {
            let leaf = tax.id(q.class_id.as_deref().unwrap()).unwrap();
            for c in q.box_concepts.as_ref().unwrap() {
                let c = tax.id(c).unwrap();
                assert!(tax.is_ancestor(c, leaf) && c != tax.root());
            }
        }
    }

    #[test]
    fn same_leaf_closer_than_cross_branch() {
        let (data, tax, _) = generate_synthetic(&SynthSpec::default()).unwrap();
        let top = |q: &Quadruple| {
            let id = tax.id(q.class_id.as_deref().unwrap()).unwrap();
            *tax.path_to_root(id).iter().rev().nth(1).unwrap()
        };
        let mut rng = seed::rng(99, 0);
        let (mut ok, mut total) = (0, 0);
        while total < 2000 {
            let a = data.items.choose(&mut rng).unwrap();
            let b = data.items.choose(&mut rng).unwrap();
            let c = data.items.choose(&mut rng).unwrap();
            if a.id == b.id || a.class_id != b.class_id || top(a) == top(c) {
                continue;
            }
            total += 1;
            if dist(&a.image, &b.image) < dist(&a.image, &c.image) {
                ok += 1;
            }
        }
        assert!(ok as f64 / total as f64 >= 0.99, "{ok}/{total}");
    }

    #[test]
    fn box_ratios_follow_the_configured_beta() {
        let spec = SynthSpec {
            box_ratio_alpha: 5.0,
            box_ratio_beta: 1.0,
            ..SynthSpec::default()
        };
        let (data, _, _) = generate_synthetic(&spec).unwrap();
        let st = box_ratio_stats(&data, vec![0.0, 0.5, 1.0]).unwrap();
        // Beta(5,1): mean 5/6, P(X > 0.9) = 1 − 0.9⁵
        assert!((st.mean.unwrap() - 5.0 / 6.0).abs() < 0.01);
        assert!((st.frac_above_0_9.unwrap() - (1.0 - 0.9f64.powi(5))).abs() < 0.02);
        assert_eq!(st.histogram.unwrap().total() as usize, st.count);
    }

    #[test]
    fn box_ratio_examples() {
        let mut q = generate_synthetic(&small()).unwrap().0.items[0].clone();
        q.image_boxes.truncate(1);
        q.text_boxes.truncate(1);
        let mk = |r: &[f64]| Dataset {
            feature_dim: 8,
            items: r
                .iter()
                .map(|&x| Quadruple {
                    box_ratios: Some(vec![x]),
                    ..q.clone()
                })
                .collect(),
        };
        let st = box_ratio_stats(&mk(&[1.0, 1.0]), vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(st.histogram.unwrap().counts, vec![0, 2]);
        let st = box_ratio_stats(&mk(&[0.1, 0.9]), vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(st.histogram.unwrap().counts, vec![1, 1]);
        let empty: Dataset<f64> = Dataset {
            feature_dim: 8,
            items: vec![],
        };
        assert_eq!(box_ratio_stats(&empty, vec![0.0, 1.0]).unwrap().count, 0);
    }

    #[test]
    fn load_validation() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(Dataset::<f64>::load(&p).unwrap().is_empty());

        let good = r#"{"id":0,"image":[1,2],"text":[1,2],"image_boxes":[[1,2]],"text_boxes":[[1,2]]}"#;
        let nobox = r#"{"id":1,"image":[1,2],"text":[1,2],"image_boxes":[],"text_boxes":[]}"#;
        let header = r#"{"format_version":1,"feature_dim":2}"#;
        std::fs::write(&p, format!("{header}\n{good}\n{nobox}\n{good}\n{nobox}\n")).unwrap();
        let err = Dataset::<f64>::load(&p).unwrap_err().to_string();
        assert!(err.contains("2 record(s) without boxes (lines 3, 5)"), "{err}");

        let short = r#"{"id":2,"image":[1],"text":[1,2],"image_boxes":[[1,2]],"text_boxes":[[1,2]]}"#;
        std::fs::write(&p, format!("{header}\n{good}\n{short}\n")).unwrap();
        assert!(matches!(Dataset::<f64>::load(&p), Err(Error::Parse { line: 3, .. })));

        std::fs::write(&p, format!("{header}\n{{not json\n")).unwrap();
        assert!(matches!(Dataset::<f64>::load(&p), Err(Error::Parse { line: 2, .. })));
    }
}
