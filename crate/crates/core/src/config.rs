//! Model and training configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Detector architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full model: both attentions, stochastic latent, Koopman propagation.
    SaberVae,
    /// Full architecture with an unregularized deterministic latent.
    SaberAe,
    /// Recurrent autoencoder with vehicle-vehicle attention only.
    VvRae,
    /// Recurrent autoencoder on raw displacements, scored on prediction.
    RaePred,
    /// Same network as `RaePred`, trained and scored on reconstruction.
    RaeRecon,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SaberVae,
        Variant::SaberAe,
        Variant::VvRae,
        Variant::RaePred,
        Variant::RaeRecon,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SaberVae => "saber_vae",
            Variant::SaberAe => "saber_ae",
            Variant::VvRae => "vv_rae",
            Variant::RaePred => "rae_pred",
            Variant::RaeRecon => "rae_recon",
        }
    }

    pub fn uses_vehicle_attention(self) -> bool {
        matches!(self, Variant::SaberVae | Variant::SaberAe | Variant::VvRae)
    }

    /// Lane attention and lane-conditioned Koopman propagation.
    pub fn uses_lanes(self) -> bool {
        matches!(self, Variant::SaberVae | Variant::SaberAe)
    }

    pub fn is_stochastic(self) -> bool {
        self == Variant::SaberVae
    }

    /// Trained and scored on reconstruction rather than one-step prediction.
    pub fn reconstruction_only(self) -> bool {
        self == Variant::RaeRecon
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Recurrence cell family used by the sequence encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    #[default]
    Gru,
    Lstm,
}

/// Architecture hyperparameters; everything a checkpoint must agree on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Attention size `D`.
    pub attention_size: usize,
    pub heads: usize,
    /// Latent dimension `j`.
    pub latent_dim: usize,
    /// Recurrent hidden size; defaults to `attention_size`.
    pub hidden_size: usize,
    /// Width of the hidden layer in heads, auxiliary nets and decoder.
    pub mlp_hidden: usize,
    pub cell: CellKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive".into());
        }
        if self.hidden_size == 0 || self.mlp_hidden == 0 {
            return bad("hidden sizes must be positive".into());
        }
        if self.heads == 0 || self.attention_size == 0 || self.attention_size % self.heads != 0 {
            return bad(format!(
                "attention_size {} must be a positive multiple of heads {}",
                self.attention_size, self.heads
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Full training configuration, loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// KL weight on the propagated distribution.
    pub beta_pred: f64,
    /// KL weight on the current distribution.
    pub beta_recon: f64,
    pub latent_dim: usize,
    pub attention_size: usize,
    pub heads: usize,
    /// `None` ties the recurrent hidden size to `attention_size`.
    pub hidden_size: Option<usize>,
    pub mlp_hidden: usize,
    pub cell: CellKind,
    pub epochs: usize,
    /// Vehicle-vehicle observation radius in meters.
    pub neighbor_radius: f64,
    pub window_length: usize,
    pub window_stride: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::SaberVae,
            learning_rate: 3e-4,
            batch_size: 64,
            beta_pred: 1e-4,
            beta_recon: 1e-4,
            latent_dim: 2,
            attention_size: 32,
            heads: crate::attention::DEFAULT_HEADS,
            hidden_size: None,
            mlp_hidden: 32,
            cell: CellKind::Gru,
            epochs: 500,
            neighbor_radius: crate::scene::DEFAULT_NEIGHBOR_RADIUS,
            window_length: crate::scene::DEFAULT_WINDOW_LENGTH,
            window_stride: 1,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            attention_size: self.attention_size,
            heads: self.heads,
            latent_dim: self.latent_dim,
            hidden_size: self.hidden_size.unwrap_or(self.attention_size),
            mlp_hidden: self.mlp_hidden,
            cell: self.cell,
        }
    }

    /// KL weights actually applied; deterministic variants carry none.
    pub fn effective_betas(&self) -> (f64, f64) {
        if self.variant.is_stochastic() {
            (self.beta_pred, self.beta_recon)
        } else {
            (0.0, 0.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.beta_pred >= 0.0) || !(self.beta_recon >= 0.0) {
            return bad("beta weights must be non-negative");
        }
        if !(self.neighbor_radius > 0.0) {
            return bad("neighbor_radius must be positive");
        }
        if self.window_length < 2 {
            return bad("window_length must be at least 2");
        }
        if self.window_stride == 0 {
            return bad("window_stride must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        self.model().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = TrainConfig {
            variant: Variant::VvRae,
            hidden_size: Some(16),
            ..TrainConfig::default()
        };
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = TrainConfig::from_toml("variant = \"rae_pred\"\nepochs = 3\n").unwrap();
        assert_eq!(cfg.variant, Variant::RaePred);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.window_length, 15);
        assert_eq!(cfg.neighbor_radius, 45.0);
        assert_eq!(cfg.heads, 8);
        assert_eq!(cfg.model().hidden_size, 32);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("variant = \"stgae\"").is_err());
        assert!(TrainConfig::from_toml("attention_size = 30").is_err());
        assert!(TrainConfig::from_toml("learning_rate = 0.0").is_err());
        assert!(TrainConfig::from_toml("window_length = 1").is_err());
    }

    #[test]
    fn deterministic_variants_drop_kl() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.effective_betas(), (1e-4, 1e-4));
        cfg.variant = Variant::SaberAe;
        assert_eq!(cfg.effective_betas(), (0.0, 0.0));
    }

    #[test]
    fn hash_tracks_architecture() {
        let a = TrainConfig::default().model();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.latent_dim = 3;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn variant_parsing() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("cvm".parse::<Variant>().is_err());
    }
}
