//! The optimizer family: SGD-m, Adam, mini-block Fisher (practical and
//! exact per-sample variants), KFAC for fully-connected layers, and Shampoo.
//!
//! All methods share one step interface over [`Params`] plus a
//! method-specific state. Gradient momentum in the second-order methods uses
//! the uncorrected recurrence `𝒟Ŵ ← μ·𝒟Ŵ + 𝒟W̄` (no `1−μ` factor, no bias
//! correction), which is deliberately different from Adam's. Curvature
//! statistics refresh every `T₁` iterations and cached inverses every `T₂`.

mod firstorder;
mod kfac;
mod mbf;
mod shampoo;

pub use firstorder::{adam_step, sgdm_step, AdamState, SgdmState};
pub use kfac::{kfac_step, KfacObservation, KfacState};
pub use mbf::{generic_mbf_step, mbf_step, MbfLayerState, MbfState};
pub use shampoo::{shampoo_step, ShampooGroup, ShampooState};

use crate::error::{Error, Result};
use crate::nn::{NetworkSpec, Params};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sgdm,
    Adam,
    Mbf,
    MbfGeneric,
    Kfac,
    Shampoo,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Sgdm => "sgdm",
            Method::Adam => "adam",
            Method::Mbf => "mbf",
            Method::MbfGeneric => "mbf_generic",
            Method::Kfac => "kfac",
            Method::Shampoo => "shampoo",
        }
    }
}

/// Hyperparameters shared by all methods; fields a method does not use are
/// ignored by its step function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub method: Method,
    /// Initial learning rate η₀ (schedules apply on top).
    pub lr: f64,
    /// λ for mbf/kfac, ε for shampoo/adam.
    pub damping: f64,
    /// Decoupled weight decay γ.
    pub weight_decay: f64,
    /// Gradient momentum μ.
    pub momentum: f64,
    /// Curvature EMA decay β.
    pub ema: f64,
    /// Statistics update period T₁.
    pub stats_period: usize,
    /// Inverse update period T₂.
    pub inverse_period: usize,
    /// Adam first-moment decay.
    pub beta1: f64,
    /// Adam second-moment decay.
    pub beta2: f64,
    /// Dense layers above this many statistic floats (O·(I+1)²) share one
    /// spatially-averaged mini-block preconditioner.
    pub spatial_avg_threshold: usize,
}

impl OptimizerConfig {
    /// Method defaults: λ = 0.003 (mbf), 0.03 (kfac), ε = 0.01 (shampoo),
    /// 1e-8 (adam); μ = β = 0.9; β₁ = 0.9, β₂ = 0.999; T₁ = 1, T₂ = 20.
    pub fn defaults_for(method: Method) -> Self {
        let damping = match method {
            Method::Mbf | Method::MbfGeneric => 0.003,
            Method::Kfac => 0.03,
            Method::Shampoo => 0.01,
            Method::Adam => 1e-8,
            Method::Sgdm => 0.0,
        };
        OptimizerConfig {
            method,
            lr: 0.001,
            damping,
            weight_decay: 0.0,
            momentum: 0.9,
            ema: 0.9,
            stats_period: 1,
            inverse_period: 20,
            beta1: 0.9,
            beta2: 0.999,
            spatial_avg_threshold: crate::fisher::DEFAULT_SPATIAL_AVG_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |context: String| Err(Error::Config { context });
        if !(self.lr > 0.0) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.damping < 0.0 {
            return fail(format!("damping must be nonnegative, got {}", self.damping));
        }
        match self.method {
            Method::Mbf | Method::MbfGeneric | Method::Kfac | Method::Shampoo => {
                if self.damping == 0.0 {
                    return fail(format!("{} needs positive damping", self.method.name()));
                }
            }
            _ => {}
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("ema", self.ema),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if self.stats_period == 0 || self.inverse_period == 0 {
            return fail("update periods must be at least 1".into());
        }
        Ok(())
    }
}

/// Step-decay schedule: `η(epoch) = η₀ · 0.1^⌊epoch/K⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    /// Decay period K in epochs; 0 disables decay.
    pub decay_period: usize,
}

pub fn lr_schedule(schedule: &LrSchedule, epoch: usize) -> f64 {
    if schedule.decay_period == 0 {
        return schedule.initial;
    }
    schedule.initial * 0.1_f64.powi((epoch / schedule.decay_period) as i32)
}

/// A configured optimizer with its mutable state.
pub enum Optimizer {
    Sgdm(SgdmState),
    Adam(AdamState),
    Mbf(MbfState),
    Kfac(KfacState),
    Shampoo(ShampooState),
}

impl Optimizer {
    pub fn new(spec: &NetworkSpec, config: &OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(match config.method {
            Method::Sgdm => Optimizer::Sgdm(SgdmState::new(spec)),
            Method::Adam => Optimizer::Adam(AdamState::new(spec)),
            Method::Mbf => Optimizer::Mbf(MbfState::new(spec, config)?),
            Method::MbfGeneric => {
                return Err(Error::Config {
                    context: "the exact per-sample variant runs through the convergence harness, \
                              not the training loop"
                        .into(),
                })
            }
            Method::Kfac => Optimizer::Kfac(KfacState::new(spec, config)?),
            Method::Shampoo => Optimizer::Shampoo(ShampooState::new(spec, config)?),
        })
    }

    /// KFAC needs layer inputs and per-sample pre-activation derivatives in
    /// addition to the batch gradient.
    pub fn needs_observations(&self) -> bool {
        matches!(self, Optimizer::Kfac(_))
    }

    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &Params,
        observations: Option<&[KfacObservation]>,
        lr: f64,
        config: &OptimizerConfig,
    ) -> Result<()> {
        match self {
            Optimizer::Sgdm(state) => {
                sgdm_step(state, params, grads, lr, config);
                Ok(())
            }
            Optimizer::Adam(state) => {
                adam_step(state, params, grads, lr, config);
                Ok(())
            }
            Optimizer::Mbf(state) => mbf_step(state, params, grads, lr, config),
            Optimizer::Kfac(state) => {
                let obs = observations.ok_or_else(|| Error::Config {
                    context: "kfac step needs layer observations".into(),
                })?;
                kfac_step(state, params, grads, obs, lr, config)
            }
            Optimizer::Shampoo(state) => shampoo_step(state, params, grads, lr, config),
        }
    }

    /// Accumulate one warm-start batch (full-dataset statistics pass before
    /// iteration 1).
    pub fn warm_accumulate(
        &mut self,
        grads: &Params,
        observations: Option<&[KfacObservation]>,
    ) -> Result<()> {
        match self {
            Optimizer::Mbf(state) => {
                state.warm_accumulate(grads);
                Ok(())
            }
            Optimizer::Kfac(state) => {
                let obs = observations.ok_or_else(|| Error::Config {
                    context: "kfac warm start needs layer observations".into(),
                })?;
                state.warm_accumulate(obs)
            }
            Optimizer::Shampoo(state) => {
                state.warm_accumulate(grads);
                Ok(())
            }
            _ => Ok(()), // first-order methods have no curvature to warm
        }
    }

    /// Finish the warm-start pass and refresh all cached inverses.
    pub fn warm_finalize(&mut self, batches: usize, config: &OptimizerConfig) -> Result<()> {
        match self {
            Optimizer::Mbf(state) => state.warm_finalize(batches, config),
            Optimizer::Kfac(state) => state.warm_finalize(batches, config),
            Optimizer::Shampoo(state) => state.warm_finalize(batches, config),
            _ => Ok(()),
        }
    }

    /// Floats held by the curvature statistics (cached inverses mirror these
    /// sizes and are not counted). Adam counts both moment buffers.
    pub fn preconditioner_float_count(&self) -> usize {
        match self {
            Optimizer::Sgdm(state) => state.float_count(),
            Optimizer::Adam(state) => state.float_count(),
            Optimizer::Mbf(state) => state.float_count(),
            Optimizer::Kfac(state) => state.float_count(),
            Optimizer::Shampoo(state) => state.float_count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_by_tenth_every_period() {
        let s = LrSchedule {
            initial: 0.2,
            decay_period: 5,
        };
        assert_eq!(lr_schedule(&s, 0), 0.2);
        assert_eq!(lr_schedule(&s, 4), 0.2);
        assert!((lr_schedule(&s, 5) - 0.02).abs() < 1e-15);
        assert!((lr_schedule(&s, 11) - 0.002).abs() < 1e-15);
    }

    #[test]
    fn schedule_period_zero_is_constant() {
        let s = LrSchedule {
            initial: 0.3,
            decay_period: 0,
        };
        assert_eq!(lr_schedule(&s, 1000), 0.3);
    }

    #[test]
    fn defaults_match_paper_settings() {
        let mbf = OptimizerConfig::defaults_for(Method::Mbf);
        assert_eq!(mbf.damping, 0.003);
        assert_eq!(mbf.momentum, 0.9);
        assert_eq!(mbf.ema, 0.9);
        let kfac = OptimizerConfig::defaults_for(Method::Kfac);
        assert_eq!(kfac.damping, 0.03);
        let shampoo = OptimizerConfig::defaults_for(Method::Shampoo);
        assert_eq!(shampoo.damping, 0.01);
        let adam = OptimizerConfig::defaults_for(Method::Adam);
        assert_eq!(adam.damping, 1e-8);
        assert_eq!(adam.beta1, 0.9);
        assert_eq!(adam.beta2, 0.999);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = OptimizerConfig::defaults_for(Method::Mbf);
        c.lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = OptimizerConfig::defaults_for(Method::Mbf);
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        let mut c = OptimizerConfig::defaults_for(Method::Kfac);
        c.damping = 0.0;
        assert!(c.validate().is_err());
        let mut c = OptimizerConfig::defaults_for(Method::Adam);
        c.stats_period = 0;
        assert!(c.validate().is_err());
    }
}
