//! Per-depth value networks, rotation/gripper heads, losses, optimizers and
//! target-network synchronisation.

mod checkpoint;
mod depth;
mod head;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use depth::{Bottleneck, QDepthModel, QNetConfig, QValues, TdTarget};
pub use head::{HeadConfig, HeadModel, HeadValues, GRIPPER_BINS, HEADS};
pub use params::{apply_update, soft_update, Gradients, OptimizerConfig, OptimizerState, ParamBlock, Params};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QteError, Result};

/// Network widths shared by every depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub resolutions: Vec<usize>,
    pub feature_dim: usize,
    pub proprio_dim: usize,
    pub conv_width: usize,
    pub context_width: usize,
    pub hidden_width: usize,
    pub head_hidden_width: usize,
    pub rotation_bin_deg: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![8, 8],
            feature_dim: 1,
            proprio_dim: 2,
            conv_width: 16,
            context_width: 8,
            hidden_width: 32,
            head_hidden_width: 32,
            rotation_bin_deg: 5.0,
        }
    }
}

/// One value network per depth plus the final-depth heads. Used both for the
/// online networks and their target copies.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    pub depths: Vec<QDepthModel>,
    pub heads: HeadModel,
}

impl ModelSet {
    pub fn new<R: Rng>(cfg: &NetworkConfig, rng: &mut R) -> Result<Self> {
        if cfg.resolutions.is_empty() {
            return Err(QteError::Config("at least one depth is required".into()));
        }
        let depths = cfg
            .resolutions
            .iter()
            .enumerate()
            .map(|(n, &resolution)| {
                QDepthModel::new(
                    n,
                    QNetConfig {
                        resolution,
                        feature_dim: cfg.feature_dim,
                        proprio_dim: cfg.proprio_dim,
                        conv_width: cfg.conv_width,
                        context_width: cfg.context_width,
                        hidden_width: cfg.hidden_width,
                    },
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let heads = HeadModel::new(
            HeadConfig {
                bottleneck_width: cfg.hidden_width,
                hidden_width: cfg.head_hidden_width,
                rotation_bin_deg: cfg.rotation_bin_deg,
            },
            rng,
        )?;
        Ok(Self { depths, heads })
    }

    pub fn final_depth(&self) -> usize {
        self.depths.len() - 1
    }

    /// Named parameter tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &Params)> {
        let mut out: Vec<(String, &Params)> = self
            .depths
            .iter()
            .map(|d| (format!("depth{}", d.depth()), d.params()))
            .collect();
        out.push(("heads".into(), self.heads.params()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Params> {
        let mut out: Vec<&mut Params> = self.depths.iter_mut().map(|d| d.params_mut()).collect();
        out.push(self.heads.params_mut());
        out
    }

    /// Soft-updates every network of `self` towards `online`.
    pub fn soft_update_from(&mut self, online: &ModelSet, tau: f64) -> Result<()> {
        if self.depths.len() != online.depths.len() {
            return Err(QteError::Config("target and online depth counts differ".into()));
        }
        let sources: Vec<&Params> = online.tensors().into_iter().map(|(_, p)| p).collect();
        for (t, o) in self.tensors_mut().into_iter().zip(sources) {
            soft_update(t, o, tau)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, p)| p.is_finite())
    }
}
