use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// Trainable query tokens at `H/32 × W/32`.
    Learned,
    /// The frozen positional embedding used as queries.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    /// Convex combination of the 3×3 coarse neighbourhood with predicted weights.
    Learned,
    /// Plain 8× bilinear interpolation of the coarse flow.
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalKind {
    Sine,
}

/// Architecture hyper-parameters. Serialized into checkpoints as canonical
/// JSON (field order as declared).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Channel widths of the three backbone stages.
    pub ladder: Vec<usize>,
    pub c_b: usize,
    pub encoder_blocks: usize,
    pub encoder_layers: usize,
    pub decoder_blocks: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    /// Hidden width of the two head branches.
    pub head_width: usize,
    pub query: QueryMode,
    pub upsample: UpsampleMode,
    pub positional: PositionalKind,
    /// Re-add the decoder positional embedding at the start of every block.
    pub decoder_pos_per_block: bool,
    /// Multiplier on the coarse-flow branch output, in pixels.
    pub flow_scale: f64,
}

/// Downsampling factor of the backbone output.
pub const BACKBONE_STRIDE: usize = 8;
/// Coarsest pyramid stride; inputs must be divisible by it.
pub const PYRAMID_STRIDE: usize = 32;
/// Fine positions per coarse flow cell along each axis.
pub const UPSAMPLE_FACTOR: usize = 8;

impl ModelConfig {
    /// The full-size network: 288×288 input, `C_b = 256`, eight heads.
    pub fn paper() -> Self {
        Self {
            height: 288,
            width: 288,
            ladder: vec![32, 64, 128],
            c_b: 256,
            encoder_blocks: 3,
            encoder_layers: 2,
            decoder_blocks: 3,
            decoder_layers: 2,
            heads: 8,
            ffn_width: 512,
            head_width: 256,
            query: QueryMode::Learned,
            upsample: UpsampleMode::Learned,
            positional: PositionalKind::Sine,
            decoder_pos_per_block: true,
            flow_scale: 32.0,
        }
    }

    /// Desk-scale network for 64×64 inputs.
    pub fn toy() -> Self {
        Self {
            height: 64,
            width: 64,
            ladder: vec![16, 32, 64],
            c_b: 64,
            heads: 4,
            ffn_width: 128,
            head_width: 512,
            ..Self::paper()
        }
    }

    /// Smallest valid network, used for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            height: 32,
            width: 32,
            ladder: vec![4, 8, 16],
            c_b: 32,
            heads: 4,
            ffn_width: 64,
            head_width: 16,
            ..Self::paper()
        }
    }

    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.height == 0 || self.width == 0 || self.height % PYRAMID_STRIDE != 0 || self.width % PYRAMID_STRIDE != 0 {
            return err(format!(
                "input {}x{} must be a positive multiple of {PYRAMID_STRIDE}",
                self.height, self.width
            ));
        }
        if self.ladder.len() != 3 || self.ladder.contains(&0) {
            return err(format!("backbone ladder {:?} must list three positive widths", self.ladder));
        }
        if self.heads == 0 || self.c_b % self.heads != 0 {
            return err(format!("C_b = {} is not divisible by {} heads", self.c_b, self.heads));
        }
        if self.c_b % 4 != 0 {
            return err(format!("C_b = {} must be divisible by 4 for the sinusoidal embedding", self.c_b));
        }
        if self.encoder_blocks != 3 || self.decoder_blocks != 3 {
            return err("the feature hierarchy needs exactly three encoder and three decoder blocks".into());
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 || self.ffn_width == 0 || self.head_width == 0 {
            return err("layer counts and widths must be positive".into());
        }
        if !(self.flow_scale.is_finite() && self.flow_scale > 0.0) {
            return err(format!("flow scale {} must be positive", self.flow_scale));
        }
        Ok(())
    }

    /// `(h, w)` of the pyramid level at `stride`.
    pub fn grid(&self, stride: usize) -> (usize, usize) {
        (self.height / stride, self.width / stride)
    }

    /// Canonical JSON (the form stored in checkpoints).
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
