use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mix_seed, EvalItem, EvalSource, Image, Mask, RoadSample, SampleSource};
use crate::error::{ensure, Error, Result};

/// 8-bit mask values at or above this are road.
pub const MASK_THRESHOLD: u8 = 128;

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "tif", "tiff", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub split: Split,
    pub image_dir: PathBuf,
    pub mask_dir: PathBuf,
    pub crop_size: usize,
    pub seed: u64,
    /// Tile stride for test-time tiling; `None` runs whole images.
    pub tile_stride: Option<usize>,
}

impl DatasetSpec {
    /// Standard layout: `<root>/<split>/images` and `<root>/<split>/masks`.
    pub fn under_root(root: &Path, split: Split, crop_size: usize, seed: u64) -> Self {
        let base = root.join(split.as_str());
        Self {
            split,
            image_dir: base.join("images"),
            mask_dir: base.join("masks"),
            crop_size,
            seed,
            tile_stride: None,
        }
    }
}

/// Top-left corner of the crop for `(seed, epoch, index)`; uniform over all
/// positions where the crop fits.
pub fn crop_origin(seed: u64, epoch: u64, index: usize, dims: (usize, usize), crop: usize) -> Result<(usize, usize)> {
    let (h, w) = dims;
    ensure!(crop > 0 && crop <= h && crop <= w, "crop {crop} does not fit {h}x{w}");
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch, index as u64]));
    Ok((rng.random_range(0..=h - crop), rng.random_range(0..=w - crop)))
}

pub fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
                return Err(Error::Validation(format!(
                    "duplicate basename '{stem}': {} and {}",
                    prev.display(),
                    path.display()
                )));
            }
        }
    }
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut out = Array3::<f32>::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        u8::from(img.get_pixel(x as u32, y as u32)[0] >= MASK_THRESHOLD)
    }))
}

/// Image/mask pairs matched by file stem.
#[derive(Debug, Clone)]
pub struct DirectoryDataset {
    spec: DatasetSpec,
    pairs: Vec<(String, PathBuf, PathBuf)>,
}

impl DirectoryDataset {
    pub fn open(spec: DatasetSpec) -> Result<Self> {
        let images = list_images(&spec.image_dir)?;
        let masks = list_images(&spec.mask_dir)?;
        let unmatched: Vec<String> = images
            .keys()
            .filter(|k| !masks.contains_key(*k))
            .map(|k| format!("image without mask: {k}"))
            .chain(
                masks
                    .keys()
                    .filter(|k| !images.contains_key(*k))
                    .map(|k| format!("mask without image: {k}")),
            )
            .collect();
        if !unmatched.is_empty() {
            return Err(Error::Validation(format!(
                "unmatched files in {} / {}: {}",
                spec.image_dir.display(),
                spec.mask_dir.display(),
                unmatched.join(", ")
            )));
        }
        let pairs = images
            .into_iter()
            .map(|(stem, img)| {
                let mask = masks[&stem].clone();
                (stem, img, mask)
            })
            .collect();
        Ok(Self { spec, pairs })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn load_pair(&self, index: usize) -> Result<EvalItem> {
        let (name, img_path, mask_path) = self
            .pairs
            .get(index)
            .ok_or_else(|| Error::Validation(format!("index {index} out of range")))?;
        let image = load_image(img_path)?;
        let mask = load_mask(mask_path)?;
        let (_, h, w) = image.dim();
        ensure!(
            mask.dim() == (h, w),
            "{}: mask dims {:?} differ from image dims {:?}",
            name,
            mask.dim(),
            (h, w)
        );
        Ok(EvalItem {
            name: name.clone(),
            image,
            mask,
        })
    }

    /// Deterministic random crop of pair `index` for `epoch`. Borders are
    /// recomputed on the crop itself.
    pub fn sample_crop(&self, index: usize, epoch: u64) -> Result<RoadSample> {
        let item = self.load_pair(index)?;
        crop_item(&item, self.spec.seed, epoch, index, self.spec.crop_size)
    }
}

pub(crate) fn crop_item(item: &EvalItem, seed: u64, epoch: u64, index: usize, crop: usize) -> Result<RoadSample> {
    let dims = item.mask.dim();
    let (y, x) = crop_origin(seed, epoch, index, dims, crop)?;
    let image = item.image.slice(s![.., y..y + crop, x..x + crop]).to_owned();
    let mask = item.mask.slice(s![y..y + crop, x..x + crop]).to_owned();
    RoadSample::from_tile(image, mask)
}

impl SampleSource for DirectoryDataset {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn sample(&self, index: usize, epoch: u64) -> Result<RoadSample> {
        self.sample_crop(index, epoch)
    }
}

impl EvalSource for DirectoryDataset {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn item(&self, index: usize) -> Result<EvalItem> {
        self.load_pair(index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_origin_stays_in_range() {
        let mut max_seen = (0, 0);
        for i in 0..2000 {
            let (y, x) = crop_origin(3, 0, i, (1500, 1500), 256).unwrap();
            assert!(y <= 1244 && x <= 1244);
            max_seen = (max_seen.0.max(y), max_seen.1.max(x));
        }
        assert!(max_seen.0 > 1200 && max_seen.1 > 1200);
        assert_eq!(crop_origin(1, 0, 0, (256, 256), 256).unwrap(), (0, 0));
        assert!(crop_origin(1, 0, 0, (100, 300), 256).is_err());
    }

    #[test]
    fn crop_origin_is_deterministic() {
        assert_eq!(
            crop_origin(9, 2, 5, (512, 512), 128).unwrap(),
            crop_origin(9, 2, 5, (512, 512), 128).unwrap()
        );
        assert_ne!(
            (0..8).map(|e| crop_origin(9, e, 5, (512, 512), 128).unwrap()).collect::<Vec<_>>(),
            vec![crop_origin(9, 0, 5, (512, 512), 128).unwrap(); 8]
        );
    }

    #[test]
    fn split_parsing() {
        assert_eq!("valid".parse::<Split>().unwrap(), Split::Val);
        assert!("holdout".parse::<Split>().is_err());
    }
}
