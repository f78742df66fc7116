//! 8-bit PNG output helpers.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::Array2;

use crate::data::{Image, Mask};
use crate::error::{Error, Result};

/// Overlay colour for predicted road.
pub const ROAD_COLOUR: [u8; 3] = [255, 0, 0];
/// Overlay colour for predicted border.
pub const BORDER_COLOUR: [u8; 3] = [0, 255, 255];

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write(img: impl Into<image::DynamicImage>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.into().save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn rgb_image(image: &Image) -> RgbImage {
    let (_, h, w) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([to_u8(image[[0, y, x]]), to_u8(image[[1, y, x]]), to_u8(image[[2, y, x]])])
    })
}

pub fn save_rgb(image: &Image, path: &Path) -> Result<()> {
    write(rgb_image(image), path)
}

/// Binary mask as 0/255.
pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([mask[[y as usize, x as usize]] * 255]));
    write(img, path)
}

/// Probability map as 8-bit grey.
pub fn save_prob(prob: &Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = prob.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(prob[[y as usize, x as usize]])]));
    write(img, path)
}

/// Source image with road pixels blended red and border pixels cyan.
/// `border` may be at a coarser resolution; it is sampled nearest-neighbour.
pub fn overlay(image: &Image, road: &Mask, border: Option<&Mask>) -> RgbImage {
    let mut img = rgb_image(image);
    let (h, w) = road.dim();
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel_mut(x as u32, y as u32);
            let on_border = border.is_some_and(|b| {
                let (bh, bw) = b.dim();
                b[[y * bh / h, x * bw / w]] == 1
            });
            let colour = if road[[y, x]] == 1 {
                Some(ROAD_COLOUR)
            } else if on_border {
                Some(BORDER_COLOUR)
            } else {
                None
            };
            if let Some(c) = colour {
                for k in 0..3 {
                    px[k] = ((px[k] as u16 + 2 * c[k] as u16) / 3) as u8;
                }
            }
        }
    }
    img
}

pub fn save_overlay(image: &Image, road: &Mask, border: Option<&Mask>, path: &Path) -> Result<()> {
    write(overlay(image, road, border), path)
}
