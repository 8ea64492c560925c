use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters shared by training, inference and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Depth of the prediction stack.
    pub layers: usize,
    /// Hidden width of every stack layer.
    pub hidden_dim: usize,
    /// Internal width of the additive attention.
    pub attention_dim: usize,
    /// Number of attended grid cells per frame.
    pub top_k: usize,
    /// Number of boxes emitted per frame.
    pub boxes_per_frame: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr0: f64,
    pub delta_minus: f64,
    pub delta_plus: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    pub seed: u64,
    pub feature_loss: bool,
    pub geometry_loss: bool,
    /// Lower clamp on predicted box width and height.
    pub min_box_size: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            hidden_dim: 512,
            attention_dim: 64,
            top_k: 5,
            boxes_per_frame: 10,
            lambda1: 1.0,
            lambda2: 1.0,
            lr0: 1e-10,
            delta_minus: 1e-1,
            delta_plus: 1e-2,
            lr_min: 1e-14,
            lr_max: 1e-2,
            seed: 0,
            feature_loss: true,
            geometry_loss: true,
            min_box_size: 1e-3,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("config: {what}")));
        if self.layers == 0 || self.hidden_dim == 0 || self.attention_dim == 0 {
            return bad("layers, hidden_dim and attention_dim must be positive");
        }
        if self.top_k == 0 || self.boxes_per_frame == 0 {
            return bad("top_k and boxes_per_frame must be positive");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be non-negative");
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return bad("need 0 < lr_min <= lr_max");
        }
        if !(self.lr0 >= self.lr_min && self.lr0 <= self.lr_max) {
            return bad("lr0 must lie in [lr_min, lr_max]");
        }
        if !(self.delta_minus >= 0.0 && (0.0..1.0).contains(&self.delta_plus)) {
            return bad("need delta_minus >= 0 and 0 <= delta_plus < 1");
        }
        if !(self.min_box_size > 0.0 && self.min_box_size < 1.0) {
            return bad("min_box_size must be in (0, 1)");
        }
        Ok(())
    }

    /// Checks the grid-dependent constraint `top_k <= c_x * c_y`.
    pub fn validate_for_grid(&self, width: usize, height: usize) -> Result<()> {
        self.validate()?;
        if self.top_k > width * height {
            return Err(Error::InvalidArgument(format!(
                "config: top_k = {} exceeds the {width}x{height} grid",
                self.top_k
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
