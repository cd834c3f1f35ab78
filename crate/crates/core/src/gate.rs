//! Local complementary gate.
//!
//! A soft mask `A = sigmoid(depthwise_conv_t(U))` splits frame-level features
//! into an identity part `A ⊙ U` and a sex part `(1 − A) ⊙ U` that add back to
//! `U`. Two regularizers act on the mask: a routing-mass term pulling the
//! global mean of `A` toward `rho_id`, and a saturation term pushing entries
//! toward 0 or 1.

use rand::Rng;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};

/// Default temporal width of the depthwise gate kernel.
pub const DEFAULT_GATE_WIDTH: usize = 5;

/// Spread of the near-zero gate kernel initialization.
const INIT_KERNEL_STD: f64 = 1e-3;

/// Depthwise kernel `[C,K]` and bias `[C]` of the gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<T = Tensor> {
    pub kernel: T,
    pub bias: T,
}

impl GateParams<Tensor> {
    /// Near-zero kernel and zero bias, so the initial mask is ≈ 0.5 everywhere.
    pub fn neutral<R: Rng + ?Sized>(channels: usize, width: usize, rng: &mut R) -> Self {
        Self {
            kernel: Tensor::randn([channels, width], INIT_KERNEL_STD, rng),
            bias: Tensor::zeros([channels]),
        }
    }

    pub fn zeros(channels: usize, width: usize) -> Self {
        Self {
            kernel: Tensor::zeros([channels, width]),
            bias: Tensor::zeros([channels]),
        }
    }
}

impl<T> GateParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> GateParams<U> {
        GateParams {
            kernel: f(&format!("{prefix}.kernel"), &self.kernel),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.kernel"), &mut self.kernel);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Soft routing mask `A`, same shape as the features it routes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateMask {
    pub mask: Var,
}

/// Complementary split of `U`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutedFeatures {
    pub identity: Var,
    pub sex: Var,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GateError {
    #[error("routing target rho_id must lie in (0,1), got {0}")]
    RhoOutOfRange(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// `A = sigmoid(depthwise_conv1d(U))`.
pub fn compute_mask(
    g: &mut Graph,
    features: Var,
    params: &GateParams<Var>,
) -> Result<GateMask, GateError> {
    let logits = g.depthwise_conv1d(features, params.kernel, params.bias)?;
    Ok(GateMask {
        mask: g.sigmoid(logits),
    })
}

/// Splits `U` into `A ⊙ U` and `U − A ⊙ U`.
///
/// The sex part is formed by subtraction, which equals `(1 − A) ⊙ U` in exact
/// arithmetic and keeps `identity + sex` within one ulp of `U` in floating point.
pub fn route(g: &mut Graph, features: Var, mask: GateMask) -> Result<RoutedFeatures, GateError> {
    let identity = g.mul(mask.mask, features)?;
    let sex = g.sub(features, identity)?;
    Ok(RoutedFeatures { identity, sex })
}

/// `(mean(A) − rho_id)²` with the mean over every batch, channel and frame entry.
pub fn cap_loss(g: &mut Graph, mask: GateMask, rho_id: f64) -> Result<Var, GateError> {
    if !(rho_id > 0.0 && rho_id < 1.0) {
        return Err(GateError::RhoOutOfRange(rho_id));
    }
    let mean = g.mean_all(mask.mask);
    let diff = g.add_scalar(mean, -rho_id);
    Ok(g.mul(diff, diff)?)
}

/// Mean of `A(1 − A)`; lies in `[0, 0.25]`.
pub fn sat_loss(g: &mut Graph, mask: GateMask) -> Var {
    let neg = g.scale(mask.mask, -1.0);
    let complement = g.add_scalar(neg, 1.0);
    let prod = g
        .mul(mask.mask, complement)
        .expect("complement has the mask's shape");
    g.mean_all(prod)
}
