//! Distribution of embedding distances from the origin.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::histogram::Histogram;
use crate::manifold::{geodesic_distance, HyperPoint};
use crate::scalar::Real;

pub const ROLES: [&str; 4] = ["img", "txt", "img_box", "txt_box"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleRadii {
    pub role: String,
    pub count: usize,
    /// `None` when the role has no embeddings.
    pub mean: Option<f64>,
    pub histogram: Histogram,
}

/// Geodesic distance of `p` from the origin of its hyperboloid.
pub fn radius<T: Real>(p: &HyperPoint<T>) -> f64 {
    let o = HyperPoint::origin(p.dim(), p.curvature());
    geodesic_distance(p, &o).expect("same space").as_f64()
}

/// Histograms of origin distances for the image, text, image-box and
/// text-box embeddings, over shared bin edges.
pub fn radius_histogram<T: Real>(roles: [&[HyperPoint<T>]; 4], edges: &[f64]) -> Result<Vec<RoleRadii>> {
    ROLES
        .iter()
        .zip(roles)
        .map(|(name, pts)| {
            let r: Vec<f64> = pts.iter().map(radius).collect();
            let mean = (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64);
            Ok(RoleRadii {
                role: name.to_string(),
                count: r.len(),
                mean,
                histogram: Histogram::from_values(edges.to_vec(), r)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{exp_map, Curvature, TangentVector};

    fn at_distance(d: f64) -> HyperPoint<f64> {
        let o = HyperPoint::origin(2, Curvature::unit());
        exp_map(&o, &TangentVector::at_origin(vec![d, 0.0], Curvature::unit())).unwrap()
    }

    #[test]
    fn origin_mass_lands_in_first_bin() {
        let o = vec![HyperPoint::origin(3, Curvature::new(2.0).unwrap()); 5];
        let h = radius_histogram([&o, &o, &o, &o], &[0.0, 1.0, 2.0]).unwrap();
        for r in &h {
            assert_eq!(r.histogram.counts, vec![5, 0]);
            assert_eq!(r.mean, Some(0.0));
        }
    }

    #[test]
    fn distances_one_and_three() {
        let pts = vec![at_distance(1.0), at_distance(3.0)];
        let h = radius_histogram([&pts, &pts, &[], &pts], &[0.0, 2.0, 4.0]).unwrap();
        assert_eq!(h[0].histogram.counts, vec![1, 1]);
        assert!((h[0].mean.unwrap() - 2.0).abs() < 1e-12);
        assert_eq!((h[2].count, h[2].mean), (0, None));
        assert_eq!(h[3].role, "txt_box");
    }

    #[test]
    fn bad_edges_are_rejected() {
        assert!(radius_histogram::<f64>([&[], &[], &[], &[]], &[1.0]).is_err());
    }
}
