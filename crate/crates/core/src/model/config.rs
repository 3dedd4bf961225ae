use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{ScenarioConfig, Skeleton};

/// Architecture and scenario settings. Serialized into checkpoints so a
/// saved model can be rebuilt without outside context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub scenario: ScenarioConfig,
    pub skeleton: Skeleton,
    /// Width of body-part tokens and the pose decoder.
    pub d_pose: usize,
    pub pose_heads: usize,
    pub pose_dk: usize,
    pub pose_ff: usize,
    pub pose_layers: usize,
    /// Width of the trajectory stream.
    pub d_traj: usize,
    pub traj_heads: usize,
    pub traj_dk: usize,
    pub traj_ff: usize,
    pub temporal_layers: usize,
    pub decoder_layers: usize,
    pub head_hidden: usize,
    /// Fixed factor on the pose head's coefficient output. Keeps per-step
    /// output changes small under a constant AdamW rate.
    pub pose_coeff_scale: f64,
    pub dropout: f64,
    /// Keep only the first `k` DCT coefficients; `None` keeps all.
    pub dct_keep: Option<usize>,
    /// When false the pose embedding does not enter the trajectory stream.
    pub use_pose: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            skeleton: Skeleton::default(),
            d_pose: 128,
            pose_heads: 8,
            pose_dk: 64,
            pose_ff: 1024,
            pose_layers: 2,
            d_traj: 96,
            traj_heads: 8,
            traj_dk: 12,
            traj_ff: 384,
            temporal_layers: 4,
            decoder_layers: 2,
            head_hidden: 256,
            pose_coeff_scale: 0.1,
            dropout: 0.2,
            dct_keep: None,
            use_pose: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        let positive = [
            ("d_pose", self.d_pose),
            ("pose_heads", self.pose_heads),
            ("pose_dk", self.pose_dk),
            ("pose_ff", self.pose_ff),
            ("d_traj", self.d_traj),
            ("traj_heads", self.traj_heads),
            ("traj_dk", self.traj_dk),
            ("traj_ff", self.traj_ff),
            ("head_hidden", self.head_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.pose_coeff_scale > 0.0 && self.pose_coeff_scale.is_finite()) {
            return Err(Error::Config(format!("pose_coeff_scale {} must be positive", self.pose_coeff_scale)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.dct_keep == Some(0) {
            return Err(Error::Config("dct_keep must be at least 1".into()));
        }
        Ok(())
    }

    /// Narrower layers (about a quarter of the parameters) for desk-scale
    /// training runs; scenario and skeleton are kept.
    pub fn compact(self) -> Self {
        Self {
            d_pose: 64,
            pose_heads: 4,
            pose_dk: 16,
            pose_ff: 256,
            d_traj: 64,
            traj_heads: 4,
            traj_dk: 16,
            traj_ff: 256,
            head_hidden: 128,
            ..self
        }
    }

    /// Number of DCT coefficients carried per channel.
    pub fn coeffs(&self) -> usize {
        let total = self.scenario.total();
        self.dct_keep.map_or(total, |k| k.min(total))
    }

    pub fn joints(&self) -> usize {
        self.skeleton.joint_count()
    }
}
