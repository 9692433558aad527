//! Geodesic interpolation between embeddings and nearest-neighbour traversal.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{exp_map, geodesic_distance, log_map, Curvature, HyperPoint, TangentVector};
use crate::scalar::Real;

/// How repeated retrievals along a path are dropped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dedup {
    /// Drop an item only when it repeats the previous retrieval.
    #[default]
    Consecutive,
    /// Keep only the first retrieval of each item.
    Global,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathOptions {
    /// Also emit the source itself (`t = 0`).
    pub include_start: bool,
    pub dedup: Dedup,
}

/// Interpolation parameters `t_i = i/N` for `i = 1..=N` (from 0 with `include_start`).
pub fn path_times(n: usize, include_start: bool) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Config("interpolation needs N >= 1".into()));
    }
    let first = usize::from(!include_start);
    Ok((first..=n).map(|i| i as f64 / n as f64).collect())
}

/// Points on the line between `source` and `target` in the tangent space at
/// the origin, mapped back to the hyperboloid.
pub fn interpolate<T: Real>(source: &HyperPoint<T>, target: &HyperPoint<T>, n: usize, include_start: bool) -> Result<Vec<HyperPoint<T>>> {
    let ts = path_times(n, include_start)?;
    interpolate_at(source, target, &ts)
}

fn interpolate_at<T: Real>(source: &HyperPoint<T>, target: &HyperPoint<T>, ts: &[f64]) -> Result<Vec<HyperPoint<T>>> {
    let origin = HyperPoint::origin(source.dim(), source.curvature());
    let a = log_map(&origin, source)?.into_spatial();
    let b = log_map(&origin, target)?.into_spatial();
    let kappa = source.curvature();
    ts.par_iter()
        .map(|&t| {
            let t = T::lit(t);
            let v: Vec<T> = a.iter().zip(&b).map(|(&x, &y)| x + t * (y - x)).collect();
            exp_map(&origin, &TangentVector::at_origin(v, kappa))
        })
        .collect()
}

/// One retrieval along a traversal path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraversalStep {
    pub t: f64,
    pub item_id: u64,
    pub distance: f64,
}

/// Nearest gallery item for each interpolation point from `source` to
/// `target`, with duplicates dropped according to `opts.dedup`.
pub fn traverse<T: Real>(
    source: &HyperPoint<T>,
    target: &HyperPoint<T>,
    gallery: &[(u64, HyperPoint<T>)],
    n: usize,
    opts: PathOptions,
) -> Result<Vec<TraversalStep>> {
    if gallery.is_empty() {
        return Err(Error::Dataset("traversal gallery is empty".into()));
    }
    let ts = path_times(n, opts.include_start)?;
    let points = interpolate_at(source, target, &ts)?;
    let nearest = points
        .par_iter()
        .zip(&ts)
        .map(|(p, &t)| {
            let mut best: Option<(u64, f64)> = None;
            for (id, g) in gallery {
                let d = geodesic_distance(p, g)?.as_f64();
                if best.is_none_or(|(bid, bd)| d < bd || (d == bd && *id < bid)) {
                    best = Some((*id, d));
                }
            }
            let (item_id, distance) = best.expect("nonempty gallery");
            Ok(TraversalStep { t, item_id, distance })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out: Vec<TraversalStep> = Vec::new();
    let mut seen = HashSet::new();
    for s in nearest {
        let keep = match opts.dedup {
            Dedup::Consecutive => out.last().is_none_or(|l| l.item_id != s.item_id),
            Dedup::Global => seen.insert(s.item_id),
        };
        if keep {
            out.push(s);
        }
    }
    Ok(out)
}

/// The origin of the hyperboloid, which stands for the root of the hierarchy.
pub fn root_point<T: Real>(dim: usize, curvature: Curvature<T>) -> HyperPoint<T> {
    HyperPoint::origin(dim, curvature)
}

/// Arithmetic mean of Euclidean embeddings, the root of a flat embedding space.
pub fn centroid(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = embeddings.first() else {
        return Err(Error::Dataset("centroid of an empty set of embeddings".into()));
    };
    let mut sum = vec![0.0; first.len()];
    for e in embeddings {
        if e.len() != sum.len() {
            return Err(Error::Dataset(format!("embedding of length {} (expected {})", e.len(), sum.len())));
        }
        sum.iter_mut().zip(e).for_each(|(s, x)| *s += x);
    }
    let n = embeddings.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::lorentz_inner;
    use proptest::prelude::*;

    fn pt(v: &[f64], kappa: f64) -> HyperPoint<f64> {
        HyperPoint::new(v.to_vec(), Curvature::new(kappa).unwrap())
    }

    #[test]
    fn endpoint_reproduces_target() {
        let (s, t) = (pt(&[0.3, -1.2, 2.0], 0.6), pt(&[-2.5, 0.4, 0.1], 0.6));
        let path = interpolate(&s, &t, 7, false).unwrap();
        assert_eq!(path.len(), 7);
        assert!(geodesic_distance(path.last().unwrap(), &t).unwrap() < 1e-6);
        let with_start = interpolate(&s, &t, 7, true).unwrap();
        assert_eq!(with_start.len(), 8);
        assert!(geodesic_distance(&with_start[0], &s).unwrap() < 1e-6);
    }

    #[test]
    fn identical_endpoints_give_one_point() {
        let s = pt(&[1.0, 2.0], 1.0);
        let path = interpolate(&s, &s, 5, false).unwrap();
        for p in &path {
            assert!(geodesic_distance(p, &s).unwrap() < 1e-9);
        }
        assert!(interpolate(&s, &s, 0, false).is_err());
    }

    #[test]
    fn two_point_gallery_traversal() {
        let (s, t) = (pt(&[2.0, 0.0], 1.0), pt(&[0.0, -1.5], 1.0));
        let gallery = vec![(10, s.clone()), (20, t.clone())];
        let steps = traverse(&s, &t, &gallery, 100, PathOptions::default()).unwrap();
        let ids: Vec<u64> = steps.iter().map(|x| x.item_id).collect();
        assert_eq!(ids, vec![10, 20]);
        assert_eq!(traverse(&s, &t, &gallery, 100, PathOptions::default()).unwrap(), steps);
        assert!(traverse(&s, &t, &[], 3, PathOptions::default()).is_err());
    }

    #[test]
    fn global_dedup_drops_revisits() {
        // a path that passes a, then b, then comes back near a
        let k = 1.0;
        let s = pt(&[-2.0, 0.0], k);
        let t = pt(&[2.0, 0.0], k);
        let gallery = vec![(1, pt(&[-2.0, 0.1], k)), (2, pt(&[0.0, 0.1], k)), (3, pt(&[-2.0, 0.2], k))];
        let c = traverse(
            &s,
            &t,
            &gallery,
            50,
            PathOptions {
                include_start: true,
                dedup: Dedup::Consecutive,
            },
        )
        .unwrap();
        let g = traverse(
            &s,
            &t,
            &gallery,
            50,
            PathOptions {
                include_start: true,
                dedup: Dedup::Global,
            },
        )
        .unwrap();
        assert!(c.windows(2).all(|w| w[0].item_id != w[1].item_id));
        let mut ids: Vec<u64> = g.iter().map(|x| x.item_id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), g.len());
    }

    #[test]
    fn root_point_examples() {
        assert_eq!(root_point(3, Curvature::new(1.0).unwrap()).ambient(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(root_point(2, Curvature::new(4.0).unwrap()).ambient(), vec![0.5, 0.0, 0.0]);
    }

    #[test]
    fn centroid_matches_mean() {
        let e = vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![2.0, 3.0]];
        assert_eq!(centroid(&e).unwrap(), vec![2.0, 1.0]);
        assert!(centroid(&[]).is_err());
        assert!(centroid(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    proptest! {
        #[test]
        fn path_to_origin_contracts(v in prop::collection::vec(-4.0f64..4.0, 1..6), kappa in 0.1f64..10.0, n in 1usize..40) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
            let s = pt(&v, kappa);
            let o = root_point(v.len(), s.curvature());
            let path = interpolate(&s, &o, n, true).unwrap();
            for w in path.windows(2) {
                prop_assert!(w[1].spatial_norm() < w[0].spatial_norm());
            }
            for p in &path {
                let a = p.ambient();
                prop_assert!((kappa * lorentz_inner(&a, &a).unwrap() + 1.0).abs() <= 1e-8 * (1.0 + kappa * a[0] * a[0]));
            }
        }
    }
}
