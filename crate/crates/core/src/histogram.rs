//! Fixed-edge histograms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts over bins `[e₀,e₁), [e₁,e₂), …, [e_{m−1}, e_m]`; the last bin is closed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub below: u64,
    pub above: u64,
}

impl Histogram {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::Config("a histogram needs at least one bin (two edges)".into()));
        }
        if edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("histogram edges must be strictly increasing".into()));
        }
        let bins = edges.len() - 1;
        Ok(Self {
            edges,
            counts: vec![0; bins],
            below: 0,
            above: 0,
        })
    }

    /// `bins` equal-width bins over `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Config("bins must be >= 1".into()));
        }
        let w = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|i| lo + w * i as f64).collect();
        edges.push(hi);
        Self::new(edges)
    }

    pub fn from_values(edges: Vec<f64>, values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut h = Self::new(edges)?;
        for v in values {
            h.add(v);
        }
        Ok(h)
    }

    pub fn add(&mut self, v: f64) {
        let last = *self.edges.last().expect("two edges");
        if v < self.edges[0] || v.is_nan() {
            self.below += 1;
        } else if v > last {
            self.above += 1;
        } else if v == last {
            *self.counts.last_mut().expect("one bin") += 1;
        } else {
            // first edge strictly greater than v
            let i = self.edges.partition_point(|&e| e <= v);
            self.counts[i - 1] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.below + self.above
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let h = Histogram::from_values(vec![0.0, 2.0, 4.0], [1.0, 3.0]).unwrap();
        assert_eq!(h.counts, vec![1, 1]);
        let h = Histogram::from_values(vec![0.0, 0.5, 1.0], [0.1, 0.9]).unwrap();
        assert_eq!(h.counts, vec![1, 1]);
        let h = Histogram::from_values(vec![0.0, 0.5, 1.0], [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(h.counts, vec![0, 3]);
        let h = Histogram::from_values(vec![0.0, 1.0, 2.0], [0.0; 4]).unwrap();
        assert_eq!(h.counts, vec![4, 0]);
    }

    #[test]
    fn out_of_range_and_edges() {
        let h = Histogram::from_values(vec![0.0, 1.0, 2.0], [-1.0, 1.0, 5.0]).unwrap();
        assert_eq!((h.below, h.counts.clone(), h.above), (1, vec![0, 1], 1));
        assert_eq!(h.total(), 3);
        assert!(Histogram::new(vec![1.0]).is_err());
        assert!(Histogram::new(vec![1.0, 1.0]).is_err());
        assert_eq!(Histogram::uniform(0.0, 1.0, 4).unwrap().edges, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }
}
