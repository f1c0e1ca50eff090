use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture family and its size knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ArchSpec {
    TinyVit {
        patch_size: usize,
        embed_dim: usize,
        num_heads: usize,
        num_blocks: usize,
        mlp_ratio: usize,
    },
    TinyCnn {
        num_stages: usize,
        base_channels: usize,
    },
    TinyMlp {
        hidden: Vec<usize>,
    },
}

impl ArchSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ArchSpec::TinyVit { .. } => "tiny_vit",
            ArchSpec::TinyCnn { .. } => "tiny_cnn",
            ArchSpec::TinyMlp { .. } => "tiny_mlp",
        }
    }

    pub fn is_transformer(&self) -> bool {
        matches!(self, ArchSpec::TinyVit { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: ArchSpec,
    /// `(channels, height, width)`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// Output width of the two-layer projection head.
    pub proj_dim: usize,
}

impl ModelSpec {
    pub fn tiny_vit() -> Self {
        Self {
            arch: ArchSpec::TinyVit {
                patch_size: 4,
                embed_dim: 64,
                num_heads: 4,
                num_blocks: 4,
                mlp_ratio: 2,
            },
            input_shape: [3, 32, 32],
            num_classes: 10,
            proj_dim: 32,
        }
    }

    pub fn tiny_cnn() -> Self {
        Self {
            arch: ArchSpec::TinyCnn {
                num_stages: 3,
                base_channels: 16,
            },
            input_shape: [3, 32, 32],
            num_classes: 10,
            proj_dim: 32,
        }
    }

    pub fn tiny_mlp() -> Self {
        Self {
            arch: ArchSpec::TinyMlp {
                hidden: vec![128, 64],
            },
            input_shape: [3, 32, 32],
            num_classes: 10,
            proj_dim: 32,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidSpec("input dimensions must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("num_classes must be at least 2".into()));
        }
        if self.proj_dim == 0 {
            return Err(Error::InvalidSpec("proj_dim must be positive".into()));
        }
        match &self.arch {
            ArchSpec::TinyVit {
                patch_size,
                embed_dim,
                num_heads,
                num_blocks,
                mlp_ratio,
            } => {
                if *patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
                    return Err(Error::InvalidSpec(format!(
                        "input {h}x{w} is not divisible by patch size {patch_size}"
                    )));
                }
                if *num_heads == 0 || *embed_dim == 0 || embed_dim % num_heads != 0 {
                    return Err(Error::InvalidSpec(format!(
                        "embed_dim {embed_dim} is not divisible by num_heads {num_heads}"
                    )));
                }
                if *num_blocks == 0 || *mlp_ratio == 0 {
                    return Err(Error::InvalidSpec("num_blocks and mlp_ratio must be positive".into()));
                }
            }
            ArchSpec::TinyCnn {
                num_stages,
                base_channels,
            } => {
                if *num_stages == 0 || *base_channels == 0 {
                    return Err(Error::InvalidSpec("num_stages and base_channels must be positive".into()));
                }
                let shrink = 1usize << (num_stages - 1);
                if h < shrink || w < shrink {
                    return Err(Error::InvalidSpec(format!(
                        "{num_stages} stages downsample {h}x{w} below 1 pixel"
                    )));
                }
            }
            ArchSpec::TinyMlp { hidden } => {
                if hidden.is_empty() || hidden.contains(&0) {
                    return Err(Error::InvalidSpec("hidden widths must be non-empty and positive".into()));
                }
            }
        }
        Ok(())
    }
}
