//! Reference detectors sharing the scoring pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{TrainConfig, Variant};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scene::{Point, WindowBatch};
use crate::scoring::{Detector, WindowErrors};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Repeats the last displacement; no parameters.
    Cvm,
    /// No attention; raw displacements into the recurrent encoder and a
    /// perceptron latent propagator.
    RaePred,
    /// `RaePred` trained and scored on reconstruction.
    RaeRecon,
    /// `RaePred` plus vehicle-vehicle attention.
    VvRae,
    /// Full architecture, deterministic latent, no KL terms.
    SaberAe,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::Cvm,
        BaselineKind::RaePred,
        BaselineKind::RaeRecon,
        BaselineKind::VvRae,
        BaselineKind::SaberAe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Cvm => "cvm",
            BaselineKind::RaePred => "rae_pred",
            BaselineKind::RaeRecon => "rae_recon",
            BaselineKind::VvRae => "vv_rae",
            BaselineKind::SaberAe => "saber_ae",
        }
    }

    /// Learned variant behind this baseline; `None` for CVM.
    pub fn variant(self) -> Option<Variant> {
        match self {
            BaselineKind::Cvm => None,
            BaselineKind::RaePred => Some(Variant::RaePred),
            BaselineKind::RaeRecon => Some(Variant::RaeRecon),
            BaselineKind::VvRae => Some(Variant::VvRae),
            BaselineKind::SaberAe => Some(Variant::SaberAe),
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline `{s}`")))
    }
}

/// Next position under constant velocity: `c_t + (c_t - c_{t-1})`.
pub fn cvm_predict(previous: Point, current: Point) -> Point {
    [2.0 * current[0] - previous[0], 2.0 * current[1] - previous[1]]
}

/// CVM errors for a window: the step `k + 1` displacement is predicted to
/// equal the step `k` displacement, so the error is the norm of their
/// difference. Needs both steps present.
pub fn cvm_window_errors(window: &WindowBatch) -> WindowErrors {
    window
        .observations
        .iter()
        .map(|seq| {
            std::iter::once(None)
                .chain(seq.windows(2).map(|pair| match (&pair[0], &pair[1]) {
                    (Some(a), Some(b)) => {
                        let (x, y) = (b.displacement[0] - a.displacement[0], b.displacement[1] - a.displacement[1]);
                        Some(x.hypot(y))
                    }
                    _ => None,
                }))
                .collect()
        })
        .collect()
}

/// Untrained detector for `kind` with the architecture hyperparameters of
/// `config`; the config's own variant is overridden.
pub fn build_variant(kind: BaselineKind, config: &TrainConfig) -> Result<Detector> {
    match kind.variant() {
        None => Ok(Detector::Cvm),
        Some(variant) => {
            let cfg = TrainConfig {
                variant,
                ..config.clone()
            };
            cfg.validate()?;
            Ok(Detector::Model(Box::new(Model::new(cfg.model(), cfg.seed)?)))
        }
    }
}
