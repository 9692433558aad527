//! Hierarchical classification metrics: tree-induced error, LCA error and the
//! ancestor-set Jaccard / precision / recall.

use std::collections::BTreeSet;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::taxonomy::TaxonomyGraph;
use crate::error::{Error, Result};

/// Which nodes an ancestor set contains besides the proper, non-root ancestors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AncestorConvention {
    pub include_self: bool,
    pub include_root: bool,
}

impl Default for AncestorConvention {
    fn default() -> Self {
        Self {
            include_self: true,
            include_root: false,
        }
    }
}

/// Exact set-based scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SetMetrics {
    pub jaccard: Ratio<u64>,
    pub p_h: Ratio<u64>,
    pub r_h: Ratio<u64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tie: f64,
    pub lca: f64,
    pub jaccard: f64,
    pub p_h: f64,
    pub r_h: f64,
}

/// Weighted length of the (undirected) path between two nodes.
pub fn tie_ids(g: &TaxonomyGraph, pred: usize, truth: usize) -> f64 {
    let l = g.lca(pred, truth);
    g.weighted_depth(pred) + g.weighted_depth(truth) - 2.0 * g.weighted_depth(l)
}

/// Distance from the true node to the deepest common ancestor of the pair.
pub fn lca_error_ids(g: &TaxonomyGraph, pred: usize, truth: usize) -> f64 {
    g.weighted_depth(truth) - g.weighted_depth(g.lca(pred, truth))
}

pub fn ancestor_set(g: &TaxonomyGraph, id: usize, conv: AncestorConvention) -> BTreeSet<usize> {
    g.path_to_root(id)
        .into_iter()
        .filter(|&u| (conv.include_self || u != id) && (conv.include_root || u != g.root()))
        .collect()
}

fn ratio(num: usize, den: usize, empty: u64) -> Ratio<u64> {
    if den == 0 {
        Ratio::from_integer(empty)
    } else {
        Ratio::new(num as u64, den as u64)
    }
}

/// `J = |Ŷ∩Y|/|Ŷ∪Y|`, `P_H = |Ŷ∩Y|/|Ŷ|`, `R_H = |Ŷ∩Y|/|Y|`.
///
/// Empty sets (possible only for the root under the default convention):
/// an empty union scores 1 everywhere; otherwise an empty denominator scores 0.
pub fn set_metrics_ids(g: &TaxonomyGraph, pred: usize, truth: usize, conv: AncestorConvention) -> SetMetrics {
    let yp = ancestor_set(g, pred, conv);
    let yt = ancestor_set(g, truth, conv);
    let inter = yp.intersection(&yt).count();
    let union = yp.len() + yt.len() - inter;
    if union == 0 {
        let one = Ratio::from_integer(1);
        return SetMetrics {
            jaccard: one,
            p_h: one,
            r_h: one,
        };
    }
    SetMetrics {
        jaccard: ratio(inter, union, 0),
        p_h: ratio(inter, yp.len(), 0),
        r_h: ratio(inter, yt.len(), 0),
    }
}

pub fn tie(g: &TaxonomyGraph, pred: &str, truth: &str) -> Result<f64> {
    Ok(tie_ids(g, g.id(pred)?, g.id(truth)?))
}

pub fn lca_error(g: &TaxonomyGraph, pred: &str, truth: &str) -> Result<f64> {
    Ok(lca_error_ids(g, g.id(pred)?, g.id(truth)?))
}

pub fn set_metrics(g: &TaxonomyGraph, pred: &str, truth: &str, conv: AncestorConvention) -> Result<SetMetrics> {
    Ok(set_metrics_ids(g, g.id(pred)?, g.id(truth)?, conv))
}

fn to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// All five metrics for a single prediction.
pub fn evaluate_pair(g: &TaxonomyGraph, pred: usize, truth: usize, conv: AncestorConvention) -> MetricReport {
    let s = set_metrics_ids(g, pred, truth, conv);
    MetricReport {
        tie: tie_ids(g, pred, truth),
        lca: lca_error_ids(g, pred, truth),
        jaccard: to_f64(s.jaccard),
        p_h: to_f64(s.p_h),
        r_h: to_f64(s.r_h),
    }
}

/// Mean of each metric over `(pred, truth)` label pairs.
pub fn evaluate_labels<S: AsRef<str>>(g: &TaxonomyGraph, pairs: &[(S, S)], conv: AncestorConvention) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Dataset("no predictions to evaluate".into()));
    }
    let mut acc = MetricReport::default();
    for (p, t) in pairs {
        let r = evaluate_pair(g, g.id(p.as_ref())?, g.id(t.as_ref())?, conv);
        acc.tie += r.tie;
        acc.lca += r.lca;
        acc.jaccard += r.jaccard;
        acc.p_h += r.p_h;
        acc.r_h += r.r_h;
    }
    let n = pairs.len() as f64;
    Ok(MetricReport {
        tie: acc.tie / n,
        lca: acc.lca / n,
        jaccard: acc.jaccard / n,
        p_h: acc.p_h / n,
        r_h: acc.r_h / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> TaxonomyGraph {
        TaxonomyGraph::from_edges("root", &[("root", "a", 1.0), ("a", "b", 1.0)]).unwrap()
    }

    fn siblings() -> TaxonomyGraph {
        TaxonomyGraph::from_edges("root", &[("root", "p", 1.0), ("p", "x", 1.0), ("p", "y", 1.0), ("root", "z", 1.0)]).unwrap()
    }

    #[test]
    fn identical_labels() {
        let g = siblings();
        assert_eq!(tie(&g, "x", "x").unwrap(), 0.0);
        assert_eq!(lca_error(&g, "x", "x").unwrap(), 0.0);
        let s = set_metrics(&g, "x", "x", AncestorConvention::default()).unwrap();
        assert_eq!(
            (s.jaccard, s.p_h, s.r_h),
            (Ratio::from_integer(1), Ratio::from_integer(1), Ratio::from_integer(1))
        );
    }

    #[test]
    fn sibling_examples() {
        let g = siblings();
        assert_eq!(tie(&g, "x", "y").unwrap(), 2.0);
        assert_eq!(lca_error(&g, "x", "y").unwrap(), 1.0);
        let s = set_metrics(&g, "x", "y", AncestorConvention::default()).unwrap();
        assert_eq!(s.jaccard, Ratio::new(1, 3));
        assert_eq!(s.p_h, Ratio::new(1, 2));
    }

    #[test]
    fn chain_example() {
        let g = chain();
        assert_eq!(lca_error(&g, "root", "b").unwrap(), 2.0);
        assert_eq!(tie(&g, "root", "b").unwrap(), 2.0);
        // predicting the root: empty predicted set
        let s = set_metrics(&g, "root", "b", AncestorConvention::default()).unwrap();
        assert_eq!(
            (s.jaccard, s.p_h, s.r_h),
            (Ratio::from_integer(0), Ratio::from_integer(0), Ratio::from_integer(0))
        );
        let s = set_metrics(&g, "root", "root", AncestorConvention::default()).unwrap();
        assert_eq!(s.jaccard, Ratio::from_integer(1));
    }

    #[test]
    fn disjoint_chains_have_zero_jaccard() {
        let g = siblings();
        let s = set_metrics(&g, "x", "z", AncestorConvention::default()).unwrap();
        assert_eq!(s.jaccard, Ratio::from_integer(0));
        let with_root = AncestorConvention {
            include_root: true,
            include_self: true,
        };
        assert_eq!(set_metrics(&g, "x", "z", with_root).unwrap().jaccard, Ratio::new(1, 4));
    }

    #[test]
    fn unknown_label_is_an_error() {
        let g = chain();
        assert!(matches!(tie(&g, "a", "nope"), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn weighted_path() {
        let g = TaxonomyGraph::from_edges("r", &[("r", "a", 2.0), ("r", "b", 5.0), ("b", "c", 1.0)]).unwrap();
        assert_eq!(tie(&g, "a", "c").unwrap(), 8.0);
        assert_eq!(lca_error(&g, "a", "c").unwrap(), 6.0);
    }

    #[test]
    fn report_averages() {
        let g = siblings();
        let r = evaluate_labels(&g, &[("x", "x"), ("x", "y")], AncestorConvention::default()).unwrap();
        assert_eq!(r.tie, 1.0);
        assert!((r.jaccard - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
    }
}
