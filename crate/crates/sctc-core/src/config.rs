//! Run configuration: training hyperparameters, module toggles, and the
//! ablation arms that mirror them.

use crate::ctd::{AdjacencyNorm, RelationToggles};
use crate::error::{Error, Result};
use crate::sta::EdgeMode;
use serde::{Deserialize, Serialize};

/// Everything a training/evaluation run needs beyond the dataset itself.
///
/// Desk defaults train in seconds on one core; the published regime
/// (30 epochs, batch 8, step size 5e-5) stays reachable through the fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Top-K proposals kept after interactiveness ranking.
    pub k: usize,
    pub decoder_layers: usize,
    /// Loss weights for distillation, pairing, and action terms.
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub use_kd: bool,
    pub use_sta: bool,
    pub use_ctd: bool,
    /// Plain feature-fusion baseline; requires sta and ctd off.
    pub mlp_baseline: bool,
    pub edge_mode: EdgeMode,
    pub relations: RelationToggles,
    pub adjacency_norm: AdjacencyNorm,
    /// Negative-to-positive ratio for hard mining.
    pub hard_ratio: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Pairing loss over every candidate instead of the selected top-K.
    pub pair_loss_over_all: bool,
    /// Negative distillation targets average HOI rows only.
    pub kd_negative_hoi_rows_only: bool,
    /// Drop the interactiveness factor from composite scores.
    pub compose_without_interactiveness: bool,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            k: 32,
            decoder_layers: 6,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            epochs: 10,
            batch_size: 4,
            base_lr: 1e-3,
            weight_decay: 1e-4,
            use_kd: true,
            use_sta: true,
            use_ctd: true,
            mlp_baseline: false,
            edge_mode: EdgeMode::InteractionAndSpatial,
            relations: RelationToggles::default(),
            adjacency_norm: AdjacencyNorm::Softmax,
            hard_ratio: 3.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            pair_loss_over_all: false,
            kd_negative_hoi_rows_only: false,
            compose_without_interactiveness: false,
            threads: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mlp_baseline && (self.use_sta || self.use_ctd) {
            return Err(Error::Config(
                "mlp-baseline excludes the sta and ctd toggles".into(),
            ));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.hard_ratio <= 0.0 {
            return Err(Error::Config("hard-mining ratio must be positive".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Config("step size must be positive".into()));
        }
        if self.use_ctd {
            self.relations.validate()?;
        }
        Ok(())
    }
}

/// The main ablation rows: which of KD / STA / CTD run, with the plain
/// feature-fusion MLP as the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationArm {
    MlpBaseline,
    Kd,
    KdSta,
    KdCtd,
    Full,
}

impl AblationArm {
    pub const TABLE: [AblationArm; 5] = [
        AblationArm::MlpBaseline,
        AblationArm::Kd,
        AblationArm::KdSta,
        AblationArm::KdCtd,
        AblationArm::Full,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mlp" => Ok(Self::MlpBaseline),
            "kd" => Ok(Self::Kd),
            "kd+sta" => Ok(Self::KdSta),
            "kd+ctd" => Ok(Self::KdCtd),
            "kd+sta+ctd" | "full" => Ok(Self::Full),
            other => Err(Error::Config(format!(
                "unknown ablation arm '{other}' (expected mlp, kd, kd+sta, kd+ctd, kd+sta+ctd)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::MlpBaseline => "mlp",
            Self::Kd => "kd",
            Self::KdSta => "kd+sta",
            Self::KdCtd => "kd+ctd",
            Self::Full => "kd+sta+ctd",
        }
    }

    /// Same run config with only the module toggles changed.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        let (kd, sta, ctd) = match self {
            Self::MlpBaseline => (false, false, false),
            Self::Kd => (true, false, false),
            Self::KdSta => (true, true, false),
            Self::KdCtd => (true, false, true),
            Self::Full => (true, true, true),
        };
        cfg.use_kd = kd;
        cfg.use_sta = sta;
        cfg.use_ctd = ctd;
        cfg.mlp_baseline = matches!(self, Self::MlpBaseline);
        cfg
    }
}
