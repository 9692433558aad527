//! Learnable temperature, projection scales and curvature, all stored in log space.

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use crate::error::Result;
use crate::manifold::{KAPPA_MAX, KAPPA_MIN};
use crate::scalar::Real;

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarParams<T> {
    pub log_tau: T,
    pub log_c_img: T,
    pub log_c_txt: T,
    pub log_kappa: T,
}

/// Scalars registered on a tape. `tau`, `c_img`, `c_txt` and `kappa` are the
/// clamped values the forward pass consumes.
#[derive(Clone, Copy, Debug)]
pub struct BoundScalars {
    pub log_tau: Var,
    pub log_c_img: Var,
    pub log_c_txt: Var,
    pub log_kappa: Var,
    pub tau: Var,
    pub c_img: Var,
    pub c_txt: Var,
    pub kappa: Var,
}

impl<T: Real> ScalarParams<T> {
    /// `τ = 0.07`, `c = 1/√embed_dim`, given κ.
    pub fn init(embed_dim: usize, kappa: f64) -> Self {
        let log_c = -0.5 * (embed_dim as f64).ln();
        Self {
            log_tau: T::lit(TAU_INIT.ln()),
            log_c_img: T::lit(log_c),
            log_c_txt: T::lit(log_c),
            log_kappa: T::lit(kappa.ln()),
        }
    }

    pub fn tau(&self) -> T {
        self.log_tau.exp().max(T::lit(TAU_MIN))
    }

    pub fn c_img(&self) -> T {
        self.log_c_img.exp()
    }

    pub fn c_txt(&self) -> T {
        self.log_c_txt.exp()
    }

    pub fn kappa(&self) -> T {
        self.log_kappa.exp().max(T::lit(KAPPA_MIN)).min(T::lit(KAPPA_MAX))
    }

    /// Pulls `log τ` and `log κ` back into their admissible ranges.
    pub fn clamp_in_place(&mut self) {
        self.log_tau = self.log_tau.max(T::lit(TAU_MIN.ln()));
        self.log_kappa = self.log_kappa.max(T::lit(KAPPA_MIN.ln())).min(T::lit(KAPPA_MAX.ln()));
    }

    pub fn as_array(&self) -> [T; 4] {
        [self.log_tau, self.log_c_img, self.log_c_txt, self.log_kappa]
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Self {
            log_tau: a[0],
            log_c_img: a[1],
            log_c_txt: a[2],
            log_kappa: a[3],
        }
    }

    pub fn as_mut_array(&mut self) -> [&mut T; 4] {
        [&mut self.log_tau, &mut self.log_c_img, &mut self.log_c_txt, &mut self.log_kappa]
    }

    /// Registers the log scalars as leaves; `learn_kappa` false keeps κ constant.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool, learn_kappa: bool) -> Result<BoundScalars> {
        let log_tau = tape.scalar(self.log_tau, trainable);
        let log_c_img = tape.scalar(self.log_c_img, trainable);
        let log_c_txt = tape.scalar(self.log_c_txt, trainable);
        let log_kappa = tape.scalar(self.log_kappa, trainable && learn_kappa);
        let e = tape.exp(log_tau)?;
        let tau = tape.clamp(e, T::lit(TAU_MIN), T::infinity())?;
        let c_img = tape.exp(log_c_img)?;
        let c_txt = tape.exp(log_c_txt)?;
        let e = tape.exp(log_kappa)?;
        let kappa = tape.clamp(e, T::lit(KAPPA_MIN), T::lit(KAPPA_MAX))?;
        Ok(BoundScalars {
            log_tau,
            log_c_img,
            log_c_txt,
            log_kappa,
            tau,
            c_img,
            c_txt,
            kappa,
        })
    }
}
