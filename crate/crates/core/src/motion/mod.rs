//! Absolute rotations from relative measurements.
//!
//! Two solvers share the gauge convention of the view graph (vertex 0 is the
//! identity): a classical robust IRLS solver and a trainable message-passing
//! refiner. A linear translation solver completes the pose.

mod irls;
mod refiner;
mod translation;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use irls::{irls_from, irls_rotation_average, objective, robust_rotation_average, IrlsReport};
pub use refiner::{
    mra_loss, mra_loss_var, pretrained_refiner, refiner_forward, refiner_forward_from, refiner_forward_var, train_refiner, MraTargets,
    RefinerConfig, RefinerParams, TrainReport,
};
pub use translation::{translation_solve, RelativeTranslation};
pub(crate) use refiner::{conj, quat_const};

/// Robust penalty `rho(r)` on a geodesic residual `r` (radians).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RobustLoss {
    /// `r² / 2`
    L2,
    /// Quadratic below `delta`, linear above.
    Huber(f64),
    /// `(sigma² / 2) r² / (sigma² + r²)`
    GemanMcClure(f64),
}

impl RobustLoss {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RobustLoss::L2 => Ok(()),
            RobustLoss::Huber(p) | RobustLoss::GemanMcClure(p) if p > 0.0 && p.is_finite() => Ok(()),
            other => Err(Error::InvalidParameter(format!("robust loss scale must be > 0: {other:?}"))),
        }
    }

    pub fn rho(&self, r: f64) -> f64 {
        match *self {
            RobustLoss::L2 => 0.5 * r * r,
            RobustLoss::Huber(d) => {
                if r.abs() <= d {
                    0.5 * r * r
                } else {
                    d * (r.abs() - 0.5 * d)
                }
            }
            RobustLoss::GemanMcClure(s) => {
                let s2 = s * s;
                0.5 * s2 * r * r / (s2 + r * r)
            }
        }
    }

    /// IRLS weight `rho'(r) / r`.
    pub fn weight(&self, r: f64) -> f64 {
        match *self {
            RobustLoss::L2 => 1.0,
            RobustLoss::Huber(d) => {
                if r.abs() <= d {
                    1.0
                } else {
                    d / r.abs()
                }
            }
            RobustLoss::GemanMcClure(s) => {
                let s2 = s * s;
                let den = s2 + r * r;
                s2 * s2 / (den * den)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_match_numeric_derivative() {
        for loss in [RobustLoss::L2, RobustLoss::Huber(0.3), RobustLoss::GemanMcClure(0.2)] {
            for r in [0.05, 0.25, 0.7, 2.0] {
                let h = 1e-6;
                let deriv = (loss.rho(r + h) - loss.rho(r - h)) / (2.0 * h);
                assert!((deriv / r - loss.weight(r)).abs() < 1e-6, "{loss:?} at {r}");
            }
        }
    }

    #[test]
    fn rejects_non_positive_scale() {
        assert!(RobustLoss::Huber(0.0).validate().is_err());
        assert!(RobustLoss::GemanMcClure(-1.0).validate().is_err());
        assert!(RobustLoss::L2.validate().is_ok());
    }
}
