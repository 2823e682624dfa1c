use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::elvm::{ElvmConfig, LangevinConfig};
use crate::error::{DuqError, Result};
use crate::uncertainty::{HeadsConfig, LossMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// ELVM with Langevin inference, both uncertainty heads and consistency losses.
    #[default]
    Full,
    /// Deterministic branch trained with plain BCE.
    Base,
    /// Deterministic branch plus a learnable log-variance head under the
    /// attenuated loss, without consistency targets.
    DualHead,
    McDropout,
    DeepEnsemble,
    Gan,
    Cvae,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Full,
        Method::Base,
        Method::DualHead,
        Method::McDropout,
        Method::DeepEnsemble,
        Method::Gan,
        Method::Cvae,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Base => "base",
            Method::DualHead => "dual-head",
            Method::McDropout => "mc-dropout",
            Method::DeepEnsemble => "deep-ensemble",
            Method::Gan => "gan",
            Method::Cvae => "cvae",
        }
    }

    /// Methods whose uncertainty comes from repeated sampling.
    pub fn is_sampling(self) -> bool {
        matches!(
            self,
            Method::McDropout | Method::DeepEnsemble | Method::Gan | Method::Cvae
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = DuqError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| DuqError::Usage(format!("unknown method '{s}'")))
    }
}

/// Training configuration; serialized as one flat JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of `epochs` after which the rate is multiplied by `lr_decay_factor`.
    pub lr_decay_point: f64,
    pub lr_decay_factor: f64,
    pub langevin_steps: usize,
    pub langevin_step_size: f64,
    pub sigma_lik: f64,
    /// One latent per image for all heads instead of one chain state per head.
    pub shared_z: bool,
    pub ensemble_size: usize,
    pub latent_dim: usize,
    pub loss_mode: LossMode,
    pub seed: u64,
    /// Weight of the prior log-likelihood of the final chain state.
    pub prior_fit_weight: f64,
    pub encoder_channels: [usize; 3],
    pub decoder_width: usize,
    pub alpha_channels: [usize; 2],
    pub beta_channels: [usize; 4],
    pub dropout_rate: f64,
    pub mc_passes: usize,
    pub gan_lambda: f64,
    pub disc_width: usize,
    pub patch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Full,
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            lr_decay_point: 0.8,
            lr_decay_factor: 0.9,
            langevin_steps: 5,
            langevin_step_size: 0.1,
            sigma_lik: 0.3,
            shared_z: false,
            ensemble_size: 5,
            latent_dim: 8,
            loss_mode: LossMode::Regression,
            seed: 0,
            prior_fit_weight: 1.0,
            encoder_channels: [16, 32, 64],
            decoder_width: 16,
            alpha_channels: [16, 32],
            beta_channels: [64; 4],
            dropout_rate: crate::baselines::DROPOUT_RATE,
            mc_passes: crate::baselines::MC_PASSES,
            gan_lambda: crate::baselines::GAN_LAMBDA,
            disc_width: 16,
            patch_size: crate::metrics::DEFAULT_PATCH,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DuqError::InvalidConfig(m.into()));
        if !(self.lr_decay_point > 0.0 && self.lr_decay_point < 1.0) {
            return bad("lr_decay_point must lie in (0, 1)");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor must lie in (0, 1]");
        }
        if self.ensemble_size == 0 {
            return bad("ensemble_size must be at least 1");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if self.method.is_sampling() && self.mc_passes < 2 {
            return bad("sampling baselines need mc_passes >= 2");
        }
        if self.patch_size == 0 {
            return bad("patch_size must be positive");
        }
        self.langevin().validate()
    }

    pub fn langevin(&self) -> LangevinConfig {
        LangevinConfig {
            steps: self.langevin_steps,
            step_size: self.langevin_step_size,
            sigma_lik: self.sigma_lik,
            conditional: true,
            inject_noise: true,
        }
    }

    /// Only the full model uses more than one stochastic head.
    pub fn elvm(&self, image_size: usize) -> ElvmConfig {
        let single = !matches!(self.method, Method::Full | Method::DeepEnsemble);
        ElvmConfig {
            image_size,
            latent_dim: self.latent_dim,
            ensemble_size: if single { 1 } else { self.ensemble_size },
            encoder_channels: self.encoder_channels,
            decoder_width: self.decoder_width,
            ..ElvmConfig::default()
        }
    }

    pub fn heads(&self, image_size: usize) -> HeadsConfig {
        HeadsConfig {
            image_size,
            alpha_channels: self.alpha_channels,
            beta_channels: self.beta_channels,
        }
    }
}

/// Base rate before the decay point, `base·factor` at and after it.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    if epoch as f64 >= cfg.lr_decay_point * cfg.epochs as f64 {
        cfg.lr * cfg.lr_decay_factor
    } else {
        cfg.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(&cfg, 10), 1e-3);
        assert_eq!(lr_schedule(&cfg, 39), 1e-3);
        assert_eq!(lr_schedule(&cfg, 40), 0.9 * 1e-3);
        let one = TrainConfig { epochs: 1, ..cfg };
        assert_eq!(lr_schedule(&one, 0), 1e-3);
    }

    #[test]
    fn flat_json_and_validation() {
        let cfg: TrainConfig = serde_json::from_str(
            r#"{"epochs": 3, "method": "deep-ensemble", "loss_mode": "classification"}"#,
        )
        .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.method, Method::DeepEnsemble);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"langevin": {}}"#).is_err());
        assert!(TrainConfig {
            lr_decay_point: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr_decay_factor: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            ensemble_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }
}
