//! Model dimension presets.
//!
//! `desk` is small enough to train in minutes on a laptop CPU and is what the
//! acceptance suite uses. `paper` carries the full-size dimensions of the
//! reference architecture (point encoder width 64, model width 512,
//! feed-forward 1024, 8 heads).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of player slots a session can hold.
pub const MAX_PLAYERS: usize = 6;

/// Kinesics part subset: indices into the 17-part skeleton for
/// [nose, l-eye, r-eye, l-shoulder, r-shoulder, l-elbow, r-elbow, l-wrist, r-wrist].
pub const KINESICS_PARTS: [usize; 9] = [0, 1, 2, 5, 6, 7, 8, 9, 10];

/// Head-related subset of `KINESICS_PARTS` (gaze cues): nose, l-eye, r-eye.
pub const GAZE_PART_IDX: [usize; 3] = [0, 1, 2];

/// Limb subset of `KINESICS_PARTS` (gesture cues): shoulders, elbows, wrists.
pub const GESTURE_PART_IDX: [usize; 6] = [3, 4, 5, 6, 7, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset '{other}' (desk|paper)"))),
        }
    }
}

/// Every width, depth and head count of the five encoder blocks plus the
/// trainable language encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Point encoder output width (each (x, y) pair maps to this).
    pub d_point: usize,
    /// Shared channel width of kinesics, position, context and fused features.
    pub d: usize,
    /// Point encoder depth.
    pub point_layers: usize,
    /// Kinesics encoder depth.
    pub kin_layers: usize,
    /// Position encoder depth.
    pub pos_layers: usize,
    /// Visual interaction encoder (transformer) depth / ffn / heads.
    pub visual_layers: usize,
    pub visual_ffn: usize,
    pub visual_heads: usize,
    /// Multimodal fusion transformer depth / ffn / heads.
    pub fusion_layers: usize,
    pub fusion_ffn: usize,
    pub fusion_heads: usize,
    /// Trainable masked-context language encoder.
    pub lang_width: usize,
    pub lang_layers: usize,
    pub lang_ffn: usize,
    pub lang_heads: usize,
    /// Maximum language sequence length after tokenization.
    pub max_len: usize,
    /// Dropout probability inside transformer blocks (train only).
    pub dropout: f64,
    /// Whether the point encoder is shared between the kinesics and position
    /// paths.
    pub share_point_encoder: bool,
}

impl ModelDims {
    pub fn desk() -> Self {
        ModelDims {
            d_point: 16,
            d: 64,
            point_layers: 3,
            kin_layers: 4,
            pos_layers: 4,
            visual_layers: 3,
            visual_ffn: 128,
            visual_heads: 4,
            fusion_layers: 2,
            fusion_ffn: 128,
            fusion_heads: 4,
            lang_width: 64,
            lang_layers: 2,
            lang_ffn: 128,
            lang_heads: 4,
            max_len: 128,
            dropout: 0.1,
            share_point_encoder: true,
        }
    }

    pub fn paper() -> Self {
        ModelDims {
            d_point: 64,
            d: 512,
            point_layers: 3,
            kin_layers: 4,
            pos_layers: 4,
            visual_layers: 3,
            visual_ffn: 1024,
            visual_heads: 8,
            fusion_layers: 2,
            fusion_ffn: 1024,
            fusion_heads: 8,
            lang_width: 512,
            lang_layers: 4,
            lang_ffn: 1024,
            lang_heads: 8,
            max_len: 128,
            dropout: 0.1,
            share_point_encoder: true,
        }
    }

    /// Tiny dims for end-to-end finite-difference checks.
    pub fn fd_tiny() -> Self {
        ModelDims {
            d_point: 4,
            d: 8,
            point_layers: 3,
            kin_layers: 4,
            pos_layers: 4,
            visual_layers: 1,
            visual_ffn: 16,
            visual_heads: 2,
            fusion_layers: 1,
            fusion_ffn: 16,
            fusion_heads: 2,
            lang_width: 8,
            lang_layers: 1,
            lang_ffn: 16,
            lang_heads: 2,
            max_len: 128,
            dropout: 0.0,
            share_point_encoder: true,
        }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => ModelDims::desk(),
            Preset::Paper => ModelDims::paper(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_dims_match_reference_table() {
        let p = ModelDims::paper();
        assert_eq!(p.d_point, 64);
        assert_eq!(p.d, 512);
        assert_eq!(p.point_layers, 3);
        assert_eq!(p.kin_layers, 4);
        assert_eq!(p.pos_layers, 4);
        assert_eq!((p.visual_layers, p.visual_ffn, p.visual_heads), (3, 1024, 8));
        assert_eq!((p.fusion_layers, p.fusion_ffn, p.fusion_heads), (2, 1024, 8));
    }
}
