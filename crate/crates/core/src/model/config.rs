use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ops::Pair;
use crate::nn::{BlockKind, BlockSpec};

pub const INPUT_CHANNELS: usize = 5;

/// Widths of the three MIM paths in the reference instantiation.
pub const BASE_TOP: [usize; 3] = [64, 128, 128];
pub const BASE_MIDDLE: [usize; 5] = [32, 64, 64, 128, 128];
pub const BASE_BOTTOM: [usize; 3] = [64, 128, 128];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfmConfig {
    /// Applied independently to each of the five input channels.
    pub stem: BlockSpec,
    pub blocks: Vec<BlockSpec>,
    /// Index (into the expanded `blocks`) of the block whose output feeds the
    /// UFM tap branch.
    pub tap_after: usize,
}

impl Default for MfmConfig {
    fn default() -> Self {
        Self {
            stem: BlockSpec::conv(3, 4),
            blocks: vec![
                BlockSpec::mobile(3, 20),
                BlockSpec::mobile(3, 24).stride(2, 4),
                BlockSpec::mobile(3, 24),
                BlockSpec::mobile(5, 40).stride(2, 2),
                BlockSpec::mobile(5, 40).times(2),
                BlockSpec::mobile(3, 80).times(4),
                BlockSpec::conv(1, 32),
            ],
            tap_after: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MimConfig {
    pub top: Vec<BlockSpec>,
    pub middle: Vec<BlockSpec>,
    pub bottom: Vec<BlockSpec>,
}

impl Default for MimConfig {
    fn default() -> Self {
        Self {
            top: path_blocks(BlockKind::Mobile, 3, &BASE_TOP),
            middle: path_blocks(BlockKind::Mobile, 5, &BASE_MIDDLE),
            bottom: path_blocks(BlockKind::Basic, 3, &BASE_BOTTOM),
        }
    }
}

/// `n` blocks of `kind` (k = 3) following a path's base widths: longer paths
/// append 128-channel blocks, shorter ones keep the last `n` widths.
pub fn path_blocks(kind: BlockKind, n: usize, base: &[usize]) -> Vec<BlockSpec> {
    let widths: Vec<usize> = if n >= base.len() {
        base.iter()
            .copied()
            .chain(std::iter::repeat_n(128, n - base.len()))
            .collect()
    } else {
        base[base.len() - n..].to_vec()
    };
    widths
        .into_iter()
        .map(|c| BlockSpec {
            kind,
            ..BlockSpec::conv(3, c)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UfmStage {
    /// Nearest-neighbour upsampling applied before `block`.
    pub upsample: Pair,
    pub block: BlockSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UfmConfig {
    /// 1×1 conv on the concatenated path outputs.
    pub fuse: BlockSpec,
    pub stages: Vec<UfmStage>,
    /// Blocks on the high-resolution tap branch.
    pub tap_blocks: Vec<BlockSpec>,
}

impl Default for UfmConfig {
    fn default() -> Self {
        Self {
            fuse: BlockSpec::conv(1, 32),
            stages: vec![
                UfmStage {
                    upsample: (1, 2),
                    block: BlockSpec::conv(3, 32),
                },
                UfmStage {
                    upsample: (4, 4),
                    block: BlockSpec::conv(3, 32),
                },
            ],
            tap_blocks: vec![BlockSpec::mobile(3, 32), BlockSpec::conv(1, 32)],
        }
    }
}

/// Which booster heads exist. The final semantic head always does.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heads {
    pub top: bool,
    pub middle: bool,
    pub bottom: bool,
    pub edge: bool,
}

impl Default for Heads {
    fn default() -> Self {
        Self {
            top: true,
            middle: true,
            bottom: false,
            edge: true,
        }
    }
}

impl Heads {
    pub fn none() -> Self {
        Self {
            top: false,
            middle: false,
            bottom: false,
            edge: false,
        }
    }

    /// Parses a comma list such as `top,mid,edge`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut h = Self::none();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "top" => h.top = true,
                "mid" | "middle" => h.middle = true,
                "bottom" | "bot" => h.bottom = true,
                "edge" => h.edge = true,
                other => {
                    return Err(Error::config(
                        "heads",
                        format!("unknown head `{other}`; expected top, mid, bottom or edge"),
                    ))
                }
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub mfm: MfmConfig,
    pub mim: MimConfig,
    pub interactions: bool,
    pub ufm: UfmConfig,
    pub mfm_tap: bool,
    pub heads: Heads,
    /// MobileBlock hidden width as a multiple of its input channels.
    pub expansion: usize,
}

impl ModelConfig {
    /// The reference instantiation with `num_classes` outputs.
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            mfm: MfmConfig::default(),
            mim: MimConfig::default(),
            interactions: true,
            ufm: UfmConfig::default(),
            mfm_tap: true,
            heads: Heads::default(),
            expansion: 2,
        }
    }

    /// Path composition by block kind and count, e.g. `(Mobile, 9)` for the
    /// top path of a "9×MB 5×MB 3×BB" variant.
    pub fn with_paths(
        mut self,
        top: (BlockKind, usize),
        middle: (BlockKind, usize),
        bottom: (BlockKind, usize),
    ) -> Self {
        self.mim = MimConfig {
            top: path_blocks(top.0, top.1, &BASE_TOP),
            middle: path_blocks(middle.0, middle.1, &BASE_MIDDLE),
            bottom: path_blocks(bottom.0, bottom.1, &BASE_BOTTOM),
        };
        self
    }

    /// Short path description such as `3×MB 5×MB 3×BB`.
    pub fn describe_paths(&self) -> String {
        [&self.mim.top, &self.mim.middle, &self.mim.bottom]
            .iter()
            .map(|p| {
                let blocks: Vec<BlockSpec> = p.iter().flat_map(BlockSpec::expand).collect();
                let kind = blocks.first().map_or("-", |b| b.kind.short());
                let uniform = blocks.iter().all(|b| b.kind.short() == kind);
                if uniform {
                    format!("{}×{kind}", blocks.len())
                } else {
                    format!("{}×mixed", blocks.len())
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Total downsampling of the MFM: `(vertical, horizontal)`.
    pub fn mfm_stride(&self) -> Pair {
        self.mfm
            .blocks
            .iter()
            .flat_map(BlockSpec::expand)
            .fold((1, 1), |(a, b), s| (a * s.stride.0, b * s.stride.1))
    }

    /// Input extents must be multiples of this.
    pub fn input_multiple(&self) -> Pair {
        let (a, b) = self.mfm_stride();
        (a * 4, b * 4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be ≥ 1"));
        }
        if self.expansion == 0 {
            return Err(Error::config("model.expansion", "must be ≥ 1"));
        }
        self.mfm.stem.validate("model.mfm.stem")?;
        if self.mfm.stem.stride != (1, 1) || self.mfm.stem.kind != BlockKind::Conv {
            return Err(Error::config(
                "model.mfm.stem",
                "the per-channel stem must be an unstrided conv",
            ));
        }
        check_list(&self.mfm.blocks, "model.mfm.blocks", true)?;
        let mfm_len: usize = self.mfm.blocks.iter().map(|b| b.repeat).sum();
        if self.mfm.tap_after >= mfm_len {
            return Err(Error::config(
                "model.mfm.tap_after",
                format!("index {} beyond the {mfm_len} MFM blocks", self.mfm.tap_after),
            ));
        }
        let tap_stride = self
            .mfm
            .blocks
            .iter()
            .flat_map(BlockSpec::expand)
            .take(self.mfm.tap_after + 1)
            .any(|b| b.stride != (1, 1));
        if tap_stride && self.mfm_tap {
            return Err(Error::config(
                "model.mfm.tap_after",
                "the tap must come before the first strided MFM block",
            ));
        }
        for (name, path) in [
            ("top", &self.mim.top),
            ("middle", &self.mim.middle),
            ("bottom", &self.mim.bottom),
        ] {
            check_list(path, &format!("model.mim.{name}"), false)?;
        }
        self.ufm.fuse.validate("model.ufm.fuse")?;
        if self.ufm.fuse.stride != (1, 1) {
            return Err(Error::config("model.ufm.fuse.s", "must be unstrided"));
        }
        let mut up = (1, 1);
        for (i, st) in self.ufm.stages.iter().enumerate() {
            let path = format!("model.ufm.stages[{i}]");
            st.block.validate(&format!("{path}.block"))?;
            if st.block.stride != (1, 1) {
                return Err(Error::config(format!("{path}.block.s"), "must be unstrided"));
            }
            if st.upsample.0 == 0 || st.upsample.1 == 0 {
                return Err(Error::config(format!("{path}.upsample"), "factors must be ≥ 1"));
            }
            up = (up.0 * st.upsample.0, up.1 * st.upsample.1);
        }
        if up != self.mfm_stride() {
            return Err(Error::config(
                "model.ufm.stages",
                format!(
                    "upsampling {up:?} does not undo the MFM downsampling {:?}",
                    self.mfm_stride()
                ),
            ));
        }
        if self.mfm_tap {
            check_list(&self.ufm.tap_blocks, "model.ufm.tap_blocks", false)?;
            let lower = self.feature_channels();
            let tap = self.ufm.tap_blocks.last().map(|b| b.c);
            if tap != Some(lower) {
                return Err(Error::config(
                    "model.ufm.tap_blocks",
                    format!("tap branch must end at {lower} channels to match the lower branch"),
                ));
            }
        }
        Ok(())
    }

    /// Channels of the full-resolution feature map feeding the heads.
    pub fn feature_channels(&self) -> usize {
        self.ufm.stages.last().map_or(self.ufm.fuse.c, |s| s.block.c)
    }

    /// First eight bytes (little-endian) of the SHA-256 of the canonical JSON
    /// serialization.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }
}

fn check_list(blocks: &[BlockSpec], path: &str, strides_allowed: bool) -> Result<()> {
    if blocks.is_empty() {
        return Err(Error::config(path, "at least one block is required"));
    }
    for (i, b) in blocks.iter().enumerate() {
        let p = format!("{path}[{i}]");
        b.validate(&p)?;
        if !strides_allowed && b.stride != (1, 1) {
            return Err(Error::config(
                format!("{p}.s"),
                "blocks here keep their resolution; stride must be 1",
            ));
        }
    }
    Ok(())
}

/// For each destination block, the source block whose output is added to it.
/// Walks both paths in order and pairs each destination with the next unused
/// source of the same width.
pub fn interaction_plan(source: &[usize], dest: &[usize]) -> Vec<Option<usize>> {
    let mut next = 0;
    dest.iter()
        .map(|&c| {
            let hit = (next..source.len()).find(|&s| source[s] == c);
            if let Some(s) = hit {
                next = s + 1;
            }
            hit
        })
        .collect()
}
