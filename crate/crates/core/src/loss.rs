//! Loss functions, their first and second derivatives, and the in-sample and
//! exponentially weighted loss estimators.
//!
//! The smooth quantile loss is `tau * e + alpha * ln(1 + exp(-e / alpha))`.
//! `h1` and `h2` are the derivative terms used by the Newton steps; for the
//! quadratic loss they are `e` and `1` (half the true derivatives, which
//! cancels inside a Newton step).

use serde::{Deserialize, Serialize};

use crate::error::{MarketError, Result};

/// Beyond this value of `|e / alpha|` the softplus is replaced by its asymptote.
const SOFTPLUS_SWITCH: f64 = 30.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DerivativeVariant {
    /// Derivatives of the smooth quantile loss obtained by direct differentiation.
    #[default]
    Analytic,
    /// The `h1`/`h2` expressions exactly as printed in the original derivation.
    Printed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum LossFamily {
    Quadratic,
    SmoothQuantile { tau: f64, alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    #[serde(flatten)]
    pub family: LossFamily,
    #[serde(default)]
    pub variant: DerivativeVariant,
}

impl LossSpec {
    pub fn quadratic() -> Self {
        LossSpec {
            family: LossFamily::Quadratic,
            variant: DerivativeVariant::Analytic,
        }
    }

    pub fn smooth_quantile(tau: f64, alpha: f64) -> Result<Self> {
        let spec = LossSpec {
            family: LossFamily::SmoothQuantile { tau, alpha },
            variant: DerivativeVariant::Analytic,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_variant(mut self, variant: DerivativeVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let LossFamily::SmoothQuantile { tau, alpha } = self.family {
            if !(0.0..=1.0).contains(&tau) {
                return Err(MarketError::Parameter(format!("tau = {tau} outside [0, 1]")));
            }
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(MarketError::Parameter(format!("alpha = {alpha} must be positive")));
            }
        }
        Ok(())
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self.family, LossFamily::Quadratic)
    }

    /// Same loss family with analytic derivatives. Batch estimation always
    /// minimizes the loss itself, whatever variant the online steps use.
    pub fn analytic(&self) -> Self {
        LossSpec {
            family: self.family,
            variant: DerivativeVariant::Analytic,
        }
    }

    pub fn value(&self, eps: f64) -> Result<f64> {
        check(eps)?;
        Ok(self.value_unchecked(eps))
    }

    pub fn h1(&self, eps: f64) -> Result<f64> {
        check(eps)?;
        Ok(self.h1_unchecked(eps))
    }

    pub fn h2(&self, eps: f64) -> Result<f64> {
        check(eps)?;
        Ok(self.h2_unchecked(eps))
    }

    #[inline]
    pub(crate) fn value_unchecked(&self, eps: f64) -> f64 {
        match self.family {
            LossFamily::Quadratic => eps * eps,
            LossFamily::SmoothQuantile { tau, alpha } => tau * eps + alpha * softplus(-eps / alpha),
        }
    }

    #[inline]
    pub(crate) fn h1_unchecked(&self, eps: f64) -> f64 {
        match self.family {
            LossFamily::Quadratic => eps,
            LossFamily::SmoothQuantile { tau, alpha } => {
                let s = logistic_neg(eps / alpha);
                match self.variant {
                    DerivativeVariant::Analytic => tau - s,
                    // tau + (alpha - e^{-u}) / (1 + e^{-u})
                    DerivativeVariant::Printed => tau + alpha * (1.0 - s) - s,
                }
            }
        }
    }

    #[inline]
    pub(crate) fn h2_unchecked(&self, eps: f64) -> f64 {
        match self.family {
            LossFamily::Quadratic => 1.0,
            LossFamily::SmoothQuantile { alpha, .. } => {
                let e = (-(eps / alpha).abs()).exp();
                // floored so that far tails keep a positive curvature after underflow
                let bell = (e / ((1.0 + e) * (1.0 + e))).max(f64::MIN_POSITIVE);
                match self.variant {
                    DerivativeVariant::Analytic => bell / alpha,
                    DerivativeVariant::Printed => (1.0 + alpha) * bell,
                }
            }
        }
    }
}

fn check(eps: f64) -> Result<()> {
    if eps.is_finite() {
        Ok(())
    } else {
        Err(MarketError::Numeric(format!("residual {eps}")))
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > SOFTPLUS_SWITCH {
        z
    } else if z < -SOFTPLUS_SWITCH {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

/// `e^{-u} / (1 + e^{-u})`, evaluated on the stable branch.
#[inline]
fn logistic_neg(u: f64) -> f64 {
    if u >= 0.0 {
        let e = (-u).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + u.exp())
    }
}

/// Pinball (quantile) loss `e * (tau - 1{e <= 0})`.
pub fn pinball(eps: f64, tau: f64) -> f64 {
    if eps <= 0.0 {
        eps * (tau - 1.0)
    } else {
        eps * tau
    }
}

pub fn loss_value(eps: f64, spec: &LossSpec) -> Result<f64> {
    spec.value(eps)
}

pub fn loss_h1(eps: f64, spec: &LossSpec) -> Result<f64> {
    spec.h1(eps)
}

pub fn loss_h2(eps: f64, spec: &LossSpec) -> Result<f64> {
    spec.h2(eps)
}

/// Mean loss over a residual series.
pub fn insample_loss(residuals: &[f64], spec: &LossSpec) -> Result<f64> {
    if residuals.is_empty() {
        return Err(MarketError::Parameter("empty residual series".into()));
    }
    let mut sum = 0.0;
    for &e in residuals {
        sum += spec.value(e)?;
    }
    Ok(sum / residuals.len() as f64)
}

/// Exponentially weighted loss estimate with forgetting factor `lambda`.
///
/// For `lambda < 1` the update is `value' = lambda * value + l / n_lambda`
/// with `n_lambda = 1 / (1 - lambda)`. `lambda = 1` keeps a running mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EwmaLoss {
    pub value: f64,
    pub lambda: f64,
    #[serde(default)]
    pub count: u64,
}

impl EwmaLoss {
    pub fn new(lambda: f64, value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(MarketError::Parameter(format!(
                "forgetting factor {lambda} outside [0, 1]"
            )));
        }
        Ok(EwmaLoss {
            value,
            lambda,
            count: 0,
        })
    }

    /// Effective window size `(1 - lambda)^-1`; infinite for `lambda = 1`.
    pub fn window(&self) -> f64 {
        1.0 / (1.0 - self.lambda)
    }

    pub fn update(self, l_t: f64) -> Result<Self> {
        if !l_t.is_finite() {
            return Err(MarketError::Numeric(format!("instantaneous loss {l_t}")));
        }
        Ok(self.update_unchecked(l_t))
    }

    #[inline]
    pub(crate) fn update_unchecked(self, l_t: f64) -> Self {
        let count = self.count + 1;
        let value = if self.lambda < 1.0 {
            self.lambda * self.value + (1.0 - self.lambda) * l_t
        } else {
            self.value + (l_t - self.value) / count as f64
        };
        EwmaLoss { value, count, ..self }
    }
}

pub fn ewma_update(state: EwmaLoss, l_t: f64) -> Result<EwmaLoss> {
    state.update(l_t)
}
