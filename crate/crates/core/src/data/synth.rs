//! Synthetic aerial-like tiles: curved roads of varying width over a
//! textured background with road-coloured distractor blobs.

use std::ops::RangeInclusive;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{mix_seed, EvalItem, EvalSource, Image, Mask, RoadSample, SampleSource};
use crate::error::{ensure, Error, Result};

pub const DEFAULT_ROAD_WIDTH: RangeInclusive<f64> = 3.0..=9.0;
const MAX_CURVES: usize = 4;
const MAX_ROAD_FRACTION: f64 = 0.45;
const CURVE_SEGMENTS: usize = 64;

type Point = (f64, f64);

fn edge_point(rng: &mut ChaCha8Rng, size: f64, edge: usize) -> Point {
    let t = rng.random_range(0.0..size);
    match edge {
        0 => (t, 0.0),
        1 => (size, t),
        2 => (t, size),
        _ => (0.0, t),
    }
}

fn bezier(p0: Point, p1: Point, p2: Point) -> Vec<Point> {
    (0..=CURVE_SEGMENTS)
        .map(|i| {
            let t = i as f64 / CURVE_SEGMENTS as f64;
            let u = 1.0 - t;
            (
                u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0,
                u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1,
            )
        })
        .collect()
}

fn segment_dist2(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    qx * qx + qy * qy
}

/// Pixels whose centre lies within `width / 2` of the polyline.
fn rasterize(poly: &[Point], width: f64, size: usize) -> Mask {
    let r2 = (width / 2.0).powi(2);
    Array2::from_shape_fn((size, size), |(y, x)| {
        let p = (x as f64 + 0.5, y as f64 + 0.5);
        u8::from(poly.windows(2).any(|s| segment_dist2(p, s[0], s[1]) <= r2))
    })
}

/// One tile for `seed`. Returns the image and its exact road mask.
pub fn synth_tile(size: usize, seed: u64, road_width: RangeInclusive<f64>) -> Result<(Image, Mask)> {
    ensure!(size >= 64, "synthetic tile size must be >= 64, got {size}");
    let (wmin, wmax) = (*road_width.start(), *road_width.end());
    ensure!(wmin > 0.0 && wmin <= wmax, "invalid road width range {wmin}..={wmax}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sz = size as f64;

    // Background: vegetation base colour with low-frequency texture.
    let base = [
        rng.random_range(0.20..0.40),
        rng.random_range(0.30..0.50),
        rng.random_range(0.15..0.30),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.12),
                rng.random_range(0.02..0.12),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.08),
            )
        })
        .collect();
    let mut image = Array3::<f32>::from_shape_fn((3, size, size), |(c, y, x)| {
        let tex: f64 = waves
            .iter()
            .map(|&(fx, fy, ph, amp)| amp * ((fx * x as f64 + fy * y as f64 + ph + c as f64 * 0.3).sin()))
            .sum();
        (base[c] + tex) as f32
    });

    // Distractors: compact blobs, some with road-like grey.
    for _ in 0..rng.random_range(2..=5) {
        let (cx, cy) = (rng.random_range(0.0..sz), rng.random_range(0.0..sz));
        let (rx, ry) = (rng.random_range(4.0..14.0), rng.random_range(4.0..14.0));
        let colour: [f64; 3] = if rng.random_bool(0.5) {
            let g = rng.random_range(0.45..0.65);
            [g, g, g * 0.95]
        } else {
            let g = rng.random_range(0.08..0.2);
            [g, g * 1.4, g]
        };
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                if dx * dx + dy * dy <= 1.0 {
                    for c in 0..3 {
                        image[[c, y, x]] = colour[c] as f32;
                    }
                }
            }
        }
    }

    // Roads.
    let mut mask = Mask::zeros((size, size));
    let curves = rng.random_range(1..=MAX_CURVES);
    for i in 0..curves {
        let e0 = rng.random_range(0..4);
        let e1 = (e0 + rng.random_range(1..4)) % 4;
        let p0 = edge_point(&mut rng, sz, e0);
        let p2 = edge_point(&mut rng, sz, e1);
        let p1 = (rng.random_range(0.1 * sz..0.9 * sz), rng.random_range(0.1 * sz..0.9 * sz));
        let width = rng.random_range(wmin..=wmax);
        let grey = rng.random_range(0.62..0.8);
        let road = rasterize(&bezier(p0, p1, p2), width, size);
        let mut merged = mask.clone();
        merged.zip_mut_with(&road, |m, &r| *m |= r);
        let fraction = merged.iter().filter(|&&v| v == 1).count() as f64 / (size * size) as f64;
        if i > 0 && fraction >= MAX_ROAD_FRACTION {
            continue;
        }
        for ((y, x), &r) in road.indexed_iter() {
            if r == 1 {
                image[[0, y, x]] = grey as f32;
                image[[1, y, x]] = grey as f32;
                image[[2, y, x]] = (grey * 1.05) as f32;
            }
        }
        mask = merged;
    }

    let noise = Normal::new(0.0, 0.03).map_err(|e| Error::Config(e.to_string()))?;
    image.mapv_inplace(|v| (v + noise.sample(&mut rng) as f32).clamp(0.0, 1.0));
    Ok((image, mask))
}

/// `count` tiles, tile `i` seeded by `(seed, i)`.
pub fn synth_tiles(count: usize, size: usize, seed: u64, road_width: RangeInclusive<f64>) -> Result<Vec<RoadSample>> {
    (0..count)
        .map(|i| {
            let (image, mask) = synth_tile(size, mix_seed(&[seed, i as u64]), road_width.clone())?;
            RoadSample::from_tile(image, mask)
        })
        .collect()
}

/// In-memory synthetic split usable for both training and evaluation.
#[derive(Debug, Clone)]
pub struct SynthSet {
    pub tiles: Vec<RoadSample>,
}

impl SynthSet {
    pub fn generate(count: usize, size: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            tiles: synth_tiles(count, size, seed, DEFAULT_ROAD_WIDTH)?,
        })
    }

    /// Write tiles as `images/tile_NNNNN.png` and `masks/tile_NNNNN.png`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        let masks = dir.join("masks");
        for d in [&images, &masks] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for (i, tile) in self.tiles.iter().enumerate() {
            let name = format!("tile_{i:05}.png");
            crate::io::save_rgb(&tile.image, &images.join(&name))?;
            crate::io::save_mask(&tile.road_mask, &masks.join(&name))?;
        }
        Ok(())
    }
}

impl SampleSource for SynthSet {
    fn len(&self) -> usize {
        self.tiles.len()
    }

    fn sample(&self, index: usize, _epoch: u64) -> Result<RoadSample> {
        self.tiles
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("index {index} out of range")))
    }
}

impl EvalSource for SynthSet {
    fn len(&self) -> usize {
        self.tiles.len()
    }

    fn item(&self, index: usize) -> Result<EvalItem> {
        let t = SampleSource::sample(self, index, 0)?;
        Ok(EvalItem {
            name: format!("tile_{index:05}"),
            image: t.image,
            mask: t.road_mask,
        })
    }
}
