use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Cnn,
    HybridLstm,
    HybridTransformer,
    Vit,
    Swin,
}

impl Family {
    pub fn has_attention(self) -> bool {
        matches!(self, Family::HybridTransformer | Family::Vit | Family::Swin)
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Cnn => "cnn",
            Family::HybridLstm => "hybrid_lstm",
            Family::HybridTransformer => "hybrid_transformer",
            Family::Vit => "vit",
            Family::Swin => "swin",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Full,
    Desk,
}

/// What to do when a patch or window size does not divide the grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadPolicy {
    #[default]
    Strict,
    /// Zero-pad to the next multiple and mask the padded tokens.
    Pad,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    #[default]
    Basic,
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

/// Sequence aggregator of the hybrid models.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregatorConfig {
    /// LSTM units per direction.
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Add sinusoidal positional encodings to slice tokens.
    pub positional: bool,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            hidden: 256,
            layers: 6,
            heads: 8,
            dropout: 0.1,
            positional: true,
        }
    }
}

/// Declarative architecture description.
///
/// Field use by family:
/// - `cnn`: `stage_depths`, `widths` (one per stage), `block`, `stem_kernel`.
/// - `vit`: `stage_depths = [layers]`, `widths = [embed]`, `heads = [heads]`,
///   `patch_size`, `mlp_ratio`.
/// - `swin`: `stage_depths` (four stages), `widths = [base embed]` (doubling
///   per stage), `heads` per stage, `patch_size`, `window_size`, `mlp_ratio`.
/// - hybrids: the CNN fields describe the shared 2D slice encoder, and
///   `aggregator` the LSTM or transformer over slices.
///
/// Shapes are `[D, H, W]`; 2D models use `D = 1` and size-1 patch/window
/// depth. Hybrid inputs are `[slices, H, W]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub family: Family,
    pub input_dims: usize,
    pub input_shape: [usize; 3],
    pub scale: Scale,
    #[serde(default)]
    pub pad_policy: PadPolicy,
    #[serde(default)]
    pub stage_depths: Vec<usize>,
    #[serde(default)]
    pub widths: Vec<usize>,
    #[serde(default)]
    pub heads: Vec<usize>,
    #[serde(default = "unit3")]
    pub patch_size: [usize; 3],
    #[serde(default = "unit3")]
    pub window_size: [usize; 3],
    #[serde(default)]
    pub block: BlockKind,
    #[serde(default = "three")]
    pub stem_kernel: usize,
    #[serde(default = "four")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub aggregator: AggregatorConfig,
}

fn unit3() -> [usize; 3] {
    [1, 1, 1]
}

fn three() -> usize {
    3
}

fn four() -> usize {
    4
}

impl ModelConfig {
    fn base(name: &str, family: Family, input_dims: usize, input_shape: [usize; 3], scale: Scale) -> Self {
        ModelConfig {
            name: name.to_string(),
            family,
            input_dims,
            input_shape,
            scale,
            pad_policy: PadPolicy::Strict,
            stage_depths: Vec::new(),
            widths: Vec::new(),
            heads: Vec::new(),
            patch_size: unit3(),
            window_size: unit3(),
            block: BlockKind::Basic,
            stem_kernel: 3,
            mlp_ratio: 4,
            aggregator: AggregatorConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Width of the 2D encoder's pooled feature (CNN and hybrid encoders).
    pub fn cnn_feature_width(&self) -> usize {
        self.widths.last().copied().unwrap_or(0) * self.block.expansion()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dims != 2 && self.input_dims != 3 {
            return Err(invalid(format!("input_dims must be 2 or 3, got {}", self.input_dims)));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(invalid(format!("input shape {:?} must be positive", self.input_shape)));
        }
        let flat = self.input_dims == 2 && !self.is_hybrid();
        if flat && self.input_shape[0] != 1 {
            return Err(invalid("2D models take inputs of depth 1"));
        }
        match self.family {
            Family::Cnn | Family::HybridLstm | Family::HybridTransformer => {
                if self.stage_depths.is_empty() || self.stage_depths.len() != self.widths.len() {
                    return Err(invalid("CNN encoders need one width per stage"));
                }
                if self.stem_kernel == 0 || self.stem_kernel % 2 == 0 {
                    return Err(invalid("stem kernel must be odd"));
                }
                if self.is_hybrid() {
                    let a = &self.aggregator;
                    if self.family == Family::HybridLstm && a.hidden == 0 {
                        return Err(invalid("LSTM needs hidden units"));
                    }
                    if self.family == Family::HybridTransformer {
                        if a.layers == 0 || a.heads == 0 || self.cnn_feature_width() % a.heads != 0 {
                            return Err(invalid(format!(
                                "aggregator width {} not divisible by {} heads",
                                self.cnn_feature_width(),
                                a.heads
                            )));
                        }
                        if !(0.0..1.0).contains(&a.dropout) {
                            return Err(invalid("dropout must lie in [0, 1)"));
                        }
                    }
                }
            }
            Family::Vit => {
                if self.stage_depths.len() != 1 || self.widths.len() != 1 || self.heads.len() != 1 {
                    return Err(invalid("ViT takes one depth, one width and one head count"));
                }
                if self.heads[0] == 0 || self.widths[0] % self.heads[0] != 0 {
                    return Err(invalid("heads must divide the embedding width"));
                }
            }
            Family::Swin => {
                if self.stage_depths.len() != 4 || self.heads.len() != 4 || self.widths.len() != 1 {
                    return Err(invalid("Swin takes four stage depths, four head counts and one base width"));
                }
                for (s, &h) in self.heads.iter().enumerate() {
                    if h == 0 || (self.widths[0] << s) % h != 0 {
                        return Err(invalid(format!("stage {s}: heads must divide width {}", self.widths[0] << s)));
                    }
                }
                if self.window_size.iter().any(|&w| w == 0) {
                    return Err(invalid("window size must be positive"));
                }
            }
        }
        if matches!(self.family, Family::Vit | Family::Swin) {
            if self.patch_size.iter().any(|&p| p == 0) {
                return Err(invalid("patch size must be positive"));
            }
            if self.pad_policy == PadPolicy::Strict {
                for a in 0..3 {
                    if self.input_shape[a] % self.patch_size[a] != 0 {
                        return Err(invalid(format!(
                            "patch {:?} does not divide input {:?} (strict policy)",
                            self.patch_size, self.input_shape
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn is_hybrid(&self) -> bool {
        matches!(self.family, Family::HybridLstm | Family::HybridTransformer)
    }

    // ---- desk presets: CPU-sized, 32³ inputs ----

    /// ResNet-18 layout at 1/8 width.
    pub fn desk_cnn3d() -> Self {
        ModelConfig {
            stage_depths: vec![2, 2, 2, 2],
            widths: vec![8, 16, 32, 64],
            ..Self::base("cnn3d", Family::Cnn, 3, [32, 32, 32], Scale::Desk)
        }
    }

    pub fn desk_cnn2d() -> Self {
        ModelConfig {
            stage_depths: vec![2, 2, 2, 2],
            widths: vec![8, 16, 32, 64],
            ..Self::base("cnn2d", Family::Cnn, 2, [1, 32, 32], Scale::Desk)
        }
    }

    pub fn desk_hybrid_lstm() -> Self {
        ModelConfig {
            stage_depths: vec![1, 1, 1, 1],
            widths: vec![8, 16, 32, 64],
            aggregator: AggregatorConfig {
                hidden: 32,
                layers: 1,
                heads: 1,
                dropout: 0.0,
                positional: false,
            },
            ..Self::base("hybrid_lstm", Family::HybridLstm, 2, [32, 32, 32], Scale::Desk)
        }
    }

    pub fn desk_hybrid_transformer() -> Self {
        ModelConfig {
            stage_depths: vec![1, 1, 1, 1],
            widths: vec![8, 16, 32, 64],
            aggregator: AggregatorConfig {
                hidden: 0,
                layers: 2,
                heads: 4,
                dropout: 0.1,
                positional: true,
            },
            ..Self::base("hybrid_transformer", Family::HybridTransformer, 2, [32, 32, 32], Scale::Desk)
        }
    }

    /// D = 32, 2 layers, 2 heads, 4 × 8 × 8 patches on 32³.
    pub fn desk_vit3d() -> Self {
        ModelConfig {
            stage_depths: vec![2],
            widths: vec![32],
            heads: vec![2],
            patch_size: [4, 8, 8],
            ..Self::base("vit3d", Family::Vit, 3, [32, 32, 32], Scale::Desk)
        }
    }

    pub fn desk_vit2d() -> Self {
        ModelConfig {
            stage_depths: vec![2],
            widths: vec![32],
            heads: vec![2],
            patch_size: [1, 4, 4],
            ..Self::base("vit2d", Family::Vit, 2, [1, 32, 32], Scale::Desk)
        }
    }

    /// 4³ patches and 4³ windows on 32³: grids 8³ → 4³ → 2³ → 1³.
    pub fn desk_swin3d() -> Self {
        ModelConfig {
            stage_depths: vec![2, 2, 2, 2],
            widths: vec![16],
            heads: vec![2, 2, 4, 4],
            patch_size: [4, 4, 4],
            window_size: [4, 4, 4],
            ..Self::base("swin3d", Family::Swin, 3, [32, 32, 32], Scale::Desk)
        }
    }

    pub fn desk_swin2d() -> Self {
        ModelConfig {
            stage_depths: vec![2, 2, 2, 2],
            widths: vec![16],
            heads: vec![2, 2, 4, 4],
            patch_size: [1, 2, 2],
            window_size: [1, 4, 4],
            ..Self::base("swin2d", Family::Swin, 2, [1, 32, 32], Scale::Desk)
        }
    }

    /// Desk preset by name: `cnn3d`, `cnn2d`, `hybrid_lstm`,
    /// `hybrid_transformer`, `vit3d`, `vit2d`, `swin3d`, `swin2d`.
    pub fn desk_preset(name: &str) -> Result<Self> {
        Ok(match name {
            "cnn3d" => Self::desk_cnn3d(),
            "cnn2d" => Self::desk_cnn2d(),
            "hybrid_lstm" => Self::desk_hybrid_lstm(),
            "hybrid_transformer" => Self::desk_hybrid_transformer(),
            "vit3d" => Self::desk_vit3d(),
            "vit2d" => Self::desk_vit2d(),
            "swin3d" => Self::desk_swin3d(),
            "swin2d" => Self::desk_swin2d(),
            _ => return Err(invalid(format!("no desk preset {name:?}"))),
        })
    }

    /// One desk preset per family (3D where the family has a 3D variant).
    pub fn desk_presets() -> Vec<Self> {
        vec![
            Self::desk_cnn3d(),
            Self::desk_hybrid_lstm(),
            Self::desk_hybrid_transformer(),
            Self::desk_vit3d(),
            Self::desk_swin3d(),
        ]
    }

    // ---- full-size presets: for shape-level checks ----

    pub fn full_resnet(depth: usize, input_dims: usize) -> Result<Self> {
        let (depths, block) = match depth {
            18 => (vec![2, 2, 2, 2], BlockKind::Basic),
            50 => (vec![3, 4, 6, 3], BlockKind::Bottleneck),
            _ => return Err(invalid(format!("no ResNet-{depth} preset"))),
        };
        let shape = if input_dims == 2 { [1, 224, 224] } else { [112, 112, 80] };
        Ok(ModelConfig {
            stage_depths: depths,
            widths: vec![64, 128, 256, 512],
            block,
            stem_kernel: 7,
            ..Self::base(&format!("resnet{depth}_{input_dims}d"), Family::Cnn, input_dims, shape, Scale::Full)
        })
    }

    /// ResNet-18 slice encoder over 24 B-scans of 224 × 224.
    pub fn full_hybrid(family: Family) -> Result<Self> {
        let aggregator = match family {
            Family::HybridLstm => AggregatorConfig {
                hidden: 256,
                layers: 1,
                heads: 1,
                dropout: 0.0,
                positional: false,
            },
            Family::HybridTransformer => AggregatorConfig::default(),
            _ => return Err(invalid("not a hybrid family")),
        };
        Ok(ModelConfig {
            aggregator,
            ..Self::full_resnet(18, 2).map(|c| ModelConfig {
                name: family.name().to_string(),
                family,
                input_shape: [24, 224, 224],
                ..c
            })?
        })
    }

    /// ViT-Base (`large = false`) or ViT-Large. The 3D variant cuts the
    /// 112 × 112 × 80 volume into 16 × 16 × 4 patches.
    pub fn full_vit(large: bool, input_dims: usize) -> Self {
        let (layers, width, heads) = if large { (24, 1024, 16) } else { (12, 768, 12) };
        let (shape, patch) = if input_dims == 2 {
            ([1, 224, 224], [1, 16, 16])
        } else {
            ([112, 112, 80], [16, 16, 4])
        };
        let tag = if large { "l" } else { "b" };
        ModelConfig {
            stage_depths: vec![layers],
            widths: vec![width],
            heads: vec![heads],
            patch_size: patch,
            ..Self::base(&format!("vit_{tag}_{input_dims}d"), Family::Vit, input_dims, shape, Scale::Full)
        }
    }

    /// Swin-T/S/L (`size` = 't', 's' or 'l'): 7 × 7 windows in 2D, 4³ in 3D.
    pub fn full_swin(size: char, input_dims: usize) -> Result<Self> {
        let (width, depths, heads) = match size {
            't' => (96, vec![2, 2, 6, 2], vec![3, 6, 12, 24]),
            's' => (96, vec![2, 2, 18, 2], vec![3, 6, 12, 24]),
            'l' => (192, vec![2, 2, 18, 2], vec![6, 12, 24, 48]),
            _ => return Err(invalid(format!("no Swin-{size} preset"))),
        };
        let (shape, patch, window) = if input_dims == 2 {
            ([1, 224, 224], [1, 4, 4], [1, 7, 7])
        } else {
            ([112, 112, 80], [4, 4, 4], [4, 4, 4])
        };
        Ok(ModelConfig {
            stage_depths: depths,
            widths: vec![width],
            heads,
            patch_size: patch,
            window_size: window,
            pad_policy: PadPolicy::Pad,
            ..Self::base(&format!("swin_{size}_{input_dims}d"), Family::Swin, input_dims, shape, Scale::Full)
        })
    }
}
