//! Training and evaluation data: border ground truth, crops, dataset
//! directories and synthetic road tiles.

mod borders;
mod dataset;
mod synth;

use ndarray::{Array2, Array3};

pub use borders::{balance_weights, border_pyramid, extract_border, BalanceWeights};
pub use dataset::{crop_origin, list_images, load_image, load_mask, DatasetSpec, DirectoryDataset, Split, MASK_THRESHOLD};
pub use synth::{synth_tile, synth_tiles, SynthSet, DEFAULT_ROAD_WIDTH};

use crate::error::{ensure, Result};

/// Binary mask, values in {0, 1}.
pub type Mask = Array2<u8>;
/// RGB tile, `3 × H × W`, values in [0, 1].
pub type Image = Array3<f32>;

/// Hierarchy levels that can carry border supervision, with the stride of
/// their feature maps.
pub const SUPERVISION_LEVELS: [usize; 3] = [2, 3, 4];

pub fn level_stride(level: usize) -> usize {
    1 << (level + 1)
}

/// Border ground truth for one hierarchy level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelBorder {
    pub level: usize,
    pub mask: Mask,
    pub weights: BalanceWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadSample {
    pub image: Image,
    pub road_mask: Mask,
    /// One entry per level in [`SUPERVISION_LEVELS`].
    pub border_masks: Vec<LevelBorder>,
    pub pos_weight: f64,
    pub neg_weight: f64,
}

impl RoadSample {
    /// Build a sample from an image/mask pair, deriving the border pyramid
    /// and balance weights from the mask.
    pub fn from_tile(image: Image, road_mask: Mask) -> Result<Self> {
        let (c, h, w) = image.dim();
        ensure!(c == 3, "image must have 3 channels, got {c}");
        ensure!(
            road_mask.dim() == (h, w),
            "mask dims {:?} differ from image dims {:?}",
            road_mask.dim(),
            (h, w)
        );
        let border = extract_border(&road_mask, 1)?;
        let strides: Vec<usize> = SUPERVISION_LEVELS.iter().map(|&l| level_stride(l)).collect();
        let pyramid = border_pyramid(&border, &strides)?;
        let border_masks = SUPERVISION_LEVELS
            .iter()
            .zip(pyramid)
            .map(|(&level, mask)| {
                let weights = balance_weights(&mask)?;
                Ok(LevelBorder { level, mask, weights })
            })
            .collect::<Result<Vec<_>>>()?;
        let bw = balance_weights(&road_mask)?;
        Ok(Self {
            image,
            road_mask,
            border_masks,
            pos_weight: bw.pos,
            neg_weight: bw.neg,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        self.road_mask.dim()
    }

    pub fn border(&self, level: usize) -> Option<&LevelBorder> {
        self.border_masks.iter().find(|b| b.level == level)
    }
}

/// Full image and mask for evaluation (any size).
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub name: String,
    pub image: Image,
    pub mask: Mask,
}

/// Random-access training samples. Pure in `(index, epoch)` so samples can
/// be produced by any number of workers.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn sample(&self, index: usize, epoch: u64) -> Result<RoadSample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Random-access evaluation items.
pub trait EvalSource: Sync {
    fn len(&self) -> usize;
    fn item(&self, index: usize) -> Result<EvalItem>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// SplitMix64 fold of several words into one seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        state ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(state << 6).wrapping_add(state >> 2);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    state
}
