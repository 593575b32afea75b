use serde::{Deserialize, Serialize};

use super::ModelError;

/// How the two epoch features are combined before the heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffMode {
    Signed,
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuseMode {
    Difference,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Bilinear,
    Learnable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub width: usize,
    pub blocks: usize,
    pub stride: usize,
}

/// Residual CNN plan: stem convolution, optional 3x3/2 max pooling, stages
/// of basic blocks, then a 1x1 projection to the feature width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub maxpool: bool,
    pub stages: Vec<StageSpec>,
}

impl BackboneSpec {
    /// 18-layer plan with every stage at stride 1 after the stem, so the
    /// final stage sits at stride 4.
    pub fn resnet18() -> Self {
        Self {
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            maxpool: true,
            stages: [64, 128, 256, 512]
                .into_iter()
                .map(|width| StageSpec {
                    width,
                    blocks: 2,
                    stride: 1,
                })
                .collect(),
        }
    }

    /// One 3x3 stem conv and a single residual block, all at full
    /// resolution.
    pub fn minimal(width: usize) -> Self {
        Self {
            stem_channels: width,
            stem_kernel: 3,
            stem_stride: 1,
            maxpool: false,
            stages: vec![StageSpec {
                width,
                blocks: 1,
                stride: 1,
            }],
        }
    }

    pub fn total_stride(&self) -> usize {
        let pool = if self.maxpool { 2 } else { 1 };
        self.stem_stride * pool * self.stages.iter().map(|s| s.stride).product::<usize>()
    }

    pub fn out_width(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub bands: usize,
    pub stride: usize,
    pub channels: usize,
    pub tokens: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub encoder_heads: usize,
    pub encoder_head_dim: usize,
    pub decoder_heads: usize,
    pub decoder_head_dim: usize,
    pub mlp_ratio: usize,
    pub backbone: BackboneSpec,
    pub diff_mode: DiffMode,
    pub fuse_mode: FuseMode,
    pub upsample_mode: UpsampleMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            bands: 3,
            stride: 4,
            channels: 32,
            tokens: 4,
            encoder_depth: 1,
            decoder_depth: 8,
            encoder_heads: 8,
            encoder_head_dim: 8,
            decoder_heads: 8,
            decoder_head_dim: 16,
            mlp_ratio: 2,
            backbone: BackboneSpec::resnet18(),
            diff_mode: DiffMode::Signed,
            fuse_mode: FuseMode::Difference,
            upsample_mode: UpsampleMode::Bilinear,
        }
    }
}

impl ModelConfig {
    /// 16x16 inputs, C=8, L=2, one encoder and one decoder layer, two heads
    /// of width 4 and a minimal backbone.
    pub fn tiny() -> Self {
        Self {
            input_size: 16,
            bands: 3,
            stride: 1,
            channels: 8,
            tokens: 2,
            encoder_depth: 1,
            decoder_depth: 1,
            encoder_heads: 2,
            encoder_head_dim: 4,
            decoder_heads: 2,
            decoder_head_dim: 4,
            mlp_ratio: 2,
            backbone: BackboneSpec::minimal(8),
            diff_mode: DiffMode::Signed,
            fuse_mode: FuseMode::Difference,
            upsample_mode: UpsampleMode::Bilinear,
        }
    }

    /// Side length of the feature map.
    pub fn feature_size(&self) -> usize {
        self.input_size / self.stride
    }

    /// Channels entering the prediction heads.
    pub fn head_channels(&self) -> usize {
        match self.fuse_mode {
            FuseMode::Difference => self.channels,
            FuseMode::Concat => 2 * self.channels,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("input_size", self.input_size),
            ("bands", self.bands),
            ("stride", self.stride),
            ("channels", self.channels),
            ("tokens", self.tokens),
            ("encoder_depth", self.encoder_depth),
            ("decoder_depth", self.decoder_depth),
            ("encoder_heads", self.encoder_heads),
            ("encoder_head_dim", self.encoder_head_dim),
            ("decoder_heads", self.decoder_heads),
            ("decoder_head_dim", self.decoder_head_dim),
            ("mlp_ratio", self.mlp_ratio),
            ("backbone.stem_channels", self.backbone.stem_channels),
            ("backbone.stem_kernel", self.backbone.stem_kernel),
            ("backbone.stem_stride", self.backbone.stem_stride),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if !self.input_size.is_multiple_of(self.stride) {
            return Err(ModelError::InvalidConfig(format!(
                "input_size {} is not divisible by stride {}",
                self.input_size, self.stride
            )));
        }
        for (i, s) in self.backbone.stages.iter().enumerate() {
            if s.width == 0 || s.blocks == 0 || s.stride == 0 {
                return Err(ModelError::InvalidConfig(format!(
                    "backbone stage {i} has a zero dimension"
                )));
            }
        }
        if self.backbone.stem_kernel.is_multiple_of(2) {
            return Err(ModelError::InvalidConfig("backbone.stem_kernel must be odd".into()));
        }
        if self.backbone.total_stride() != self.stride {
            return Err(ModelError::InvalidConfig(format!(
                "backbone stride {} does not match stride {}",
                self.backbone.total_stride(),
                self.stride
            )));
        }
        Ok(())
    }
}
