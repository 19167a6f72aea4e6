//! Types shared by the model-based oracle, the model-free learner and the
//! scheduler: the state-feedback gain and the tracking cost weights.

use nalgebra::{Matrix2, RowVector2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Augmented state `[x, r]`: phase current and reference sample.
pub type AugState = Vector2<f64>;

/// State-feedback gain `K = [K_x, K_r]` for the law `u = -K·[x, r]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyGain {
    pub k: RowVector2<f64>,
}

impl PolicyGain {
    pub fn new(k_x: f64, k_r: f64) -> Result<Self> {
        if !(k_x.is_finite() && k_r.is_finite()) {
            return Err(Error::NonFinite("policy gain"));
        }
        Ok(Self {
            k: RowVector2::new(k_x, k_r),
        })
    }

    pub fn zero() -> Self {
        Self {
            k: RowVector2::zeros(),
        }
    }

    pub fn k_x(&self) -> f64 {
        self.k[0]
    }

    pub fn k_r(&self) -> f64 {
        self.k[1]
    }

    /// Control input `-K·X`.
    pub fn control(&self, state: &AugState) -> f64 {
        -(self.k * state)[0]
    }

    pub fn distance(&self, other: &PolicyGain) -> f64 {
        (self.k - other.k).norm()
    }

    pub fn norm(&self) -> f64 {
        self.k.norm()
    }
}

impl Default for PolicyGain {
    fn default() -> Self {
        Self::zero()
    }
}

/// Designer-chosen tracking weights. These are the only "model" quantities a
/// learner may see: output weight `q` on `(r - C x)`, input weight `r_u`, and
/// the measurement row `C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingWeights {
    pub q: f64,
    pub r_u: f64,
    pub c: f64,
}

impl TrackingWeights {
    pub fn new(q: f64, r_u: f64, c: f64) -> Result<Self> {
        if !(q.is_finite() && r_u.is_finite() && c.is_finite()) {
            return Err(Error::NonFinite("tracking weights"));
        }
        if q < 0.0 {
            return Err(Error::InvalidParams(format!("output weight Q must be >= 0, got {q}")));
        }
        if r_u <= 0.0 {
            return Err(Error::InvalidParams(format!("input weight R must be > 0, got {r_u}")));
        }
        Ok(Self { q, r_u, c })
    }

    /// `Q_q = [C -1]ᵀ Q [C -1]`.
    pub fn q_q(&self) -> Matrix2<f64> {
        let row = RowVector2::new(self.c, -1.0);
        row.transpose() * self.q * row
    }

    /// `Xᵀ Q_q X + R u²`.
    pub fn stage_cost(&self, state: &AugState, u: f64) -> f64 {
        stage_cost(state, u, &self.q_q(), self.r_u)
    }
}

impl Default for TrackingWeights {
    fn default() -> Self {
        Self {
            q: 100.0,
            r_u: 1e-3,
            c: 1.0,
        }
    }
}

/// Quadratic stage cost `Xᵀ Q_q X + R_u u²`.
pub fn stage_cost(state: &AugState, u: f64, q_q: &Matrix2<f64>, r_u: f64) -> f64 {
    (state.transpose() * q_q * state)[0] + r_u * u * u
}
