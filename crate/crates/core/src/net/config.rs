use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;

/// One encoder stage: `convs` 3×3 conv + relu layers, then an optional 2×
/// max-pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    #[serde(default = "one")]
    pub convs: usize,
    pub downsample: bool,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    #[serde(default = "rgb")]
    pub in_channels: usize,
    pub blocks: Vec<BlockSpec>,
}

fn rgb() -> usize {
    3
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let block = |channels, downsample| BlockSpec {
            channels,
            convs: 1,
            downsample,
        };
        EncoderConfig {
            in_channels: 3,
            blocks: vec![
                block(8, true),
                block(16, true),
                block(32, true),
                block(32, false),
            ],
        }
    }
}

impl EncoderConfig {
    pub fn downsample_factor(&self) -> usize {
        1 << self.blocks.iter().filter(|b| b.downsample).count()
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::invalid("encoder config", "no blocks"));
        }
        if self.in_channels == 0 {
            return Err(Error::invalid("encoder config", "in_channels must be positive"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.convs == 0 {
                return Err(Error::invalid(
                    "encoder config",
                    format!("block {i} needs positive channels and conv count"),
                ));
            }
        }
        Ok(())
    }
}

/// Prediction head for one granularity level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub num_classes: usize,
    /// Encoder block (0-based) whose pre-pool output feeds this head.
    #[serde(default)]
    pub tap_block: Option<usize>,
    pub head_channels: usize,
    /// 3×3 conv + relu layers before the final 1×1 classifier, plus one.
    pub head_conv_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackedHeadConfig {
    pub levels: Vec<HeadSpec>,
}

impl StackedHeadConfig {
    /// One head per hierarchy level; finer heads tap progressively shallower
    /// blocks, the finest one tapping block 0.
    pub fn for_hierarchy(
        h: &LabelHierarchy,
        encoder: &EncoderConfig,
        head_channels: usize,
        head_conv_layers: usize,
    ) -> Self {
        let t = h.num_levels();
        let last_tap = encoder.blocks.len().saturating_sub(2);
        StackedHeadConfig {
            levels: (0..t)
                .map(|k| HeadSpec {
                    num_classes: h.num_classes(k),
                    // finer heads tap shallower blocks; heads past the encoder depth go without
                    tap_block: Some(t - 1 - k).filter(|&b| k > 0 && b <= last_tap),
                    head_channels,
                    head_conv_layers,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub encoder: EncoderConfig,
    pub heads: StackedHeadConfig,
}

impl NetConfig {
    pub fn for_hierarchy(
        h: &LabelHierarchy,
        encoder: EncoderConfig,
        head_channels: usize,
        head_conv_layers: usize,
    ) -> Self {
        let heads = StackedHeadConfig::for_hierarchy(h, &encoder, head_channels, head_conv_layers);
        NetConfig { encoder, heads }
    }

    pub fn validate(&self, h: &LabelHierarchy) -> Result<()> {
        self.encoder.validate()?;
        let levels = &self.heads.levels;
        if levels.len() != h.num_levels() {
            return Err(Error::invalid(
                "head config",
                format!("{} heads for {} hierarchy levels", levels.len(), h.num_levels()),
            ));
        }
        let mut prev_tap: Option<usize> = None;
        for (k, head) in levels.iter().enumerate() {
            if head.num_classes != h.num_classes(k) {
                return Err(Error::invalid(
                    "head config",
                    format!(
                        "head {k} predicts {} classes but level '{}' has {}",
                        head.num_classes,
                        h.levels()[k].name,
                        h.num_classes(k)
                    ),
                ));
            }
            if head.head_conv_layers == 0 {
                return Err(Error::invalid(
                    "head config",
                    format!("head {k} needs at least one layer"),
                ));
            }
            if head.head_conv_layers > 1 && head.head_channels == 0 {
                return Err(Error::invalid(
                    "head config",
                    format!("head {k} has zero hidden channels"),
                ));
            }
            match (k, head.tap_block) {
                (0, Some(_)) => {
                    return Err(Error::invalid(
                        "head config",
                        "the coarsest head reads the encoder output only",
                    ))
                }
                (_, Some(b)) => {
                    if b >= self.encoder.blocks.len() {
                        return Err(Error::invalid(
                            "head config",
                            format!("head {k} taps missing block {b}"),
                        ));
                    }
                    if prev_tap.is_some_and(|p| b >= p) {
                        return Err(Error::invalid(
                            "head config",
                            format!("head {k} must tap a shallower block than the previous head"),
                        ));
                    }
                    prev_tap = Some(b);
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// The four compared architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchMode {
    /// One network, one head, one level.
    Standalone,
    /// Independent full networks chained image → coarse → … → fine.
    StackFull,
    /// Shared encoder with chained heads.
    StackFc,
    /// Shared encoder with chained heads and shallow-layer taps.
    StackFcSkip,
}

impl ArchMode {
    pub const ALL: [ArchMode; 4] = [
        ArchMode::Standalone,
        ArchMode::StackFull,
        ArchMode::StackFc,
        ArchMode::StackFcSkip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchMode::Standalone => "standalone",
            ArchMode::StackFull => "stack_full",
            ArchMode::StackFc => "stack_fc",
            ArchMode::StackFcSkip => "stack_fc_skip",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid("mode", format!("unknown architecture mode '{s}'")))
    }
}

impl std::fmt::Display for ArchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
