//! Synthetic four-class scenes whose border class can only be resolved from
//! the context image.
//!
//! Classes: 0 background, 1 centred disk, 2 frame stripe, 3 corner square.
//! The stripe is the outer band of the tile and looks exactly like
//! background in HR. It is labelled 2 only when the surrounding tiles carry
//! the cue colour, which is visible in the LR context but never in the HR crop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use std::path::{Path, PathBuf};

use crate::error::Error;
use crate::geo::{make_pair, raster_from_image, raster_from_labels, write_manifest, GeoTile, TileDescriptor};
use crate::objectives::LabelMap;
use crate::tensor::Tensor;
use crate::train::Sample;

pub const NUM_CLASSES: usize = 4;
pub const BACKGROUND: u8 = 0;
pub const DISK: u8 = 1;
pub const STRIPE: u8 = 2;
pub const SQUARE: u8 = 3;

const BG_RGB: [f32; 3] = [0.45, 0.45, 0.42];
const DISK_RGB: [f32; 3] = [0.2, 0.75, 0.25];
const SQUARE_RGB: [f32; 3] = [0.15, 0.2, 0.85];
const CUE_RGB: [f32; 3] = [0.9, 0.1, 0.1];

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub tile: usize,
    pub stripe: usize,
    pub noise: f32,
    pub gsd: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            tile: 64,
            stripe: 4,
            noise: 0.02,
            gsd: 0.5,
        }
    }
}

/// One scene: the centre tile with labels and its eight context tiles.
#[derive(Debug, Clone)]
pub struct Scene {
    pub center: GeoTile,
    pub neighbors: Vec<GeoTile>,
    pub cue: bool,
}

fn in_band(i: usize, j: usize, p: usize, w: usize) -> bool {
    i < w || j < w || i + w >= p || j + w >= p
}

/// Pixels whose label depends on the context cue (the border band).
pub fn cue_dependent_mask(cfg: &SceneConfig) -> Vec<bool> {
    let p = cfg.tile;
    (0..p * p).map(|k| in_band(k / p, k % p, p, cfg.stripe)).collect()
}

pub fn scene(cfg: &SceneConfig, index: usize, cue: bool, seed: u64) -> Result<Scene> {
    let p = cfg.tile;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
    let c = p as f64 / 2.0 + rng.random_range(-0.06..0.06) * p as f64;
    let c2 = p as f64 / 2.0 + rng.random_range(-0.06..0.06) * p as f64;
    let radius = rng.random_range(0.12..0.18) * p as f64;
    let side = rng.random_range(p * 5 / 32..=p * 7 / 32);
    let corner = rng.random_range(0..4);
    let margin = cfg.stripe + p / 16;
    let (sy, sx) = match corner {
        0 => (margin, margin),
        1 => (margin, p - margin - side),
        2 => (p - margin - side, margin),
        _ => (p - margin - side, p - margin - side),
    };

    let mut image = Vec::with_capacity(p * p * 3);
    let mut labels = Vec::with_capacity(p * p);
    for i in 0..p {
        for j in 0..p {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let (rgb, label) = if (y - c).powi(2) + (x - c2).powi(2) <= radius * radius {
                (DISK_RGB, DISK)
            } else if (sy..sy + side).contains(&i) && (sx..sx + side).contains(&j) {
                (SQUARE_RGB, SQUARE)
            } else if cue && in_band(i, j, p, cfg.stripe) {
                (BG_RGB, STRIPE)
            } else {
                (BG_RGB, BACKGROUND)
            };
            for v in rgb {
                image.push((v + rng.random_range(-cfg.noise..=cfg.noise)).clamp(0.0, 1.0));
            }
            labels.push(label);
        }
    }
    let span = p as f64 * cfg.gsd;
    let (ox, oy) = (index as f64 * 10.0 * span, 0.0);
    let center = GeoTile {
        tile_id: format!("scene{index:03}"),
        image: Tensor::from_vec(image, &[p, p, 3])?,
        labels: Some(LabelMap::new(p, p, NUM_CLASSES, labels)?),
        origin_x: ox,
        origin_y: oy,
        gsd: cfg.gsd,
    };
    let fill = if cue { CUE_RGB } else { BG_RGB };
    let mut neighbors = Vec::with_capacity(8);
    for di in -1i64..=1 {
        for dj in -1i64..=1 {
            if di == 0 && dj == 0 {
                continue;
            }
            let data: Vec<f32> = (0..p * p)
                .flat_map(|_| fill.map(|v| (v + rng.random_range(-cfg.noise..=cfg.noise)).clamp(0.0, 1.0)))
                .collect();
            neighbors.push(GeoTile {
                tile_id: format!("scene{index:03}_n{}{}", di + 1, dj + 1),
                image: Tensor::from_vec(data, &[p, p, 3])?,
                labels: None,
                origin_x: ox + dj as f64 * span,
                origin_y: oy - di as f64 * span,
                gsd: cfg.gsd,
            });
        }
    }
    Ok(Scene { center, neighbors, cue })
}

/// `n` scenes, alternating cue on/off, as training samples built through
/// the regular pair construction.
pub fn dataset(cfg: &SceneConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| {
            let s = scene(cfg, i, i % 2 == 0, seed)?;
            let mut index = s.neighbors.clone();
            index.push(s.center.clone());
            Sample::from_pair(make_pair(&s.center, &index)?)
        })
        .collect()
}

/// Writes `n` scenes (centre tiles with labels plus unlabelled context
/// tiles) as PPM/PGM files under `dir` and returns the manifest path.
pub fn write_dataset(cfg: &SceneConfig, n: usize, seed: u64, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut descs = Vec::new();
    for i in 0..n {
        let s = scene(cfg, i, i % 2 == 0, seed)?;
        for t in std::iter::once(&s.center).chain(&s.neighbors) {
            let image_path = PathBuf::from(format!("{}.ppm", t.tile_id));
            raster_from_image(&t.image)?.write(&dir.join(&image_path))?;
            let label_path = match &t.labels {
                Some(m) => {
                    let lp = PathBuf::from(format!("{}_gt.pgm", t.tile_id));
                    raster_from_labels(m)?.write(&dir.join(&lp))?;
                    Some(lp)
                }
                None => None,
            };
            descs.push(TileDescriptor {
                tile_id: t.tile_id.clone(),
                image_path,
                label_path,
                origin_x: t.origin_x,
                origin_y: t.origin_y,
                gsd: t.gsd,
            });
        }
    }
    let path = dir.join("manifest.txt");
    write_manifest(&descs, &path)?;
    Ok(path)
}

/// `n` images of one flat random colour each, with matching flat context.
pub fn constant_corpus(n: usize, tile: usize, seed: u64) -> Result<Vec<(Tensor<f32>, Option<Tensor<f32>>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let rgb: [f32; 3] = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
            let img = Tensor::from_vec(rgb.repeat(tile * tile), &[tile, tile, 3])?;
            Ok((img.clone(), Some(img)))
        })
        .collect()
}

/// Fraction of pixels in `mask` (all pixels when `None`) where `pred` matches `gt`.
pub fn accuracy(pred: &LabelMap, gt: &LabelMap, mask: Option<&[bool]>) -> (usize, usize) {
    let mut hit = 0;
    let mut total = 0;
    for (k, (&a, &b)) in pred.labels.iter().zip(&gt.labels).enumerate() {
        if mask.is_some_and(|m| !m[k]) {
            continue;
        }
        total += 1;
        hit += (a == b) as usize;
    }
    (hit, total)
}
