//! Neural fields: positional encoding, the geometry (SDF) and radiance
//! networks, and the trainable deviation scalar that sharpens the logistic
//! density around the zero level set.

pub mod encoding;
pub mod radiance;
pub mod sdf;

pub use encoding::PositionalEncoding;
pub use radiance::{RadianceConfig, RadianceNetwork, RadianceWorkspace};
pub use sdf::{SdfConfig, SdfNetwork, SdfWorkspace};

use crate::math::Real;
use serde::{Deserialize, Serialize};

/// Trainable sharpness of the logistic CDF used by the renderer. Stored in
/// log scale so the effective value stays positive; the factor of 10 keeps
/// its learning rate useful without a per-parameter schedule.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DeviationParam<S> {
    pub raw: S,
}

impl<S: Real> DeviationParam<S> {
    const LOG_SCALE: f64 = 10.0;

    pub fn new(initial_sharpness: f64) -> DeviationParam<S> {
        assert!(initial_sharpness > 0.0);
        DeviationParam {
            raw: S::from_f64(initial_sharpness.ln() / Self::LOG_SCALE),
        }
    }

    /// The sharpness s > 0 of the logistic Phi_s.
    #[inline]
    pub fn sharpness(&self) -> S {
        (S::from_f64(Self::LOG_SCALE) * self.raw).exp()
    }

    /// d sharpness / d raw.
    #[inline]
    pub fn sharpness_grad(&self) -> S {
        S::from_f64(Self::LOG_SCALE) * self.sharpness()
    }
}

/// Unit surface normal from a spatial SDF gradient, or `None` when the
/// gradient is degenerate (callers substitute the negated ray direction).
#[inline]
pub fn surface_normal_from_grad<S: Real>(grad: [S; 3], eps: f64) -> Option<[S; 3]> {
    let n2 = grad[0] * grad[0] + grad[1] * grad[1] + grad[2] * grad[2];
    let n = n2.sqrt();
    if n.to_f64() > eps {
        Some([grad[0] / n, grad[1] / n, grad[2] / n])
    } else {
        None
    }
}
