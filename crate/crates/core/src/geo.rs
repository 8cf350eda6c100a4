//! Co-registered HR/LR pair construction from georeferenced tiles: 3×3
//! neighbourhood mosaic with black padding, a central 2P×2P context window
//! downsampled ×2 by area averaging, and the tab-separated tile manifest.
//!
//! World coordinates put the origin at a tile's north-west corner. Rows grow
//! southward, so the neighbour one row below has `origin_y - P·gsd`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::netpbm::Raster;
use crate::objectives::LabelMap;
use crate::tensor::{Scalar, Tensor};

/// Tolerance, in tile units, for deciding that two origins sit on the same grid node.
const GRID_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GeoTile {
    pub tile_id: String,
    /// P×P×3, values in [0, 1].
    pub image: Tensor<f32>,
    pub labels: Option<LabelMap>,
    pub origin_x: f64,
    pub origin_y: f64,
    pub gsd: f64,
}

impl GeoTile {
    pub fn size(&self) -> usize {
        self.image.shape()[0]
    }

    /// Ground extent of one tile side.
    pub fn span(&self) -> f64 {
        self.size() as f64 * self.gsd
    }
}

#[derive(Debug, Clone)]
pub struct TilePair {
    pub tile_id: String,
    pub hr: Tensor<f32>,
    pub lr: Tensor<f32>,
    pub labels: Option<LabelMap>,
    /// `[di+1][dj+1]` for row offset `di` and column offset `dj`.
    pub neighbor_presence: [[bool; 3]; 3],
}

pub type Neighborhood<'a> = [[Option<&'a GeoTile>; 3]; 3];

/// Grid offset of `other` relative to `center`, in whole tiles, if aligned.
fn grid_offset(center: &GeoTile, other: &GeoTile) -> Option<(i64, i64)> {
    let span = center.span();
    let dj = (other.origin_x - center.origin_x) / span;
    let di = (center.origin_y - other.origin_y) / span;
    let (ri, rj) = (di.round(), dj.round());
    ((di - ri).abs() < GRID_TOL && (dj - rj).abs() < GRID_TOL).then_some((ri as i64, rj as i64))
}

pub fn find_neighbors<'a>(center: &'a GeoTile, index: &'a [GeoTile]) -> Result<Neighborhood<'a>> {
    let mut out: Neighborhood<'a> = [[None; 3]; 3];
    out[1][1] = Some(center);
    for t in index {
        if std::ptr::eq(t, center) || t.tile_id == center.tile_id {
            continue;
        }
        if t.size() != center.size() || t.gsd != center.gsd {
            continue;
        }
        let Some((di, dj)) = grid_offset(center, t) else { continue };
        if di.abs() > 1 || dj.abs() > 1 {
            continue;
        }
        let cell = &mut out[(di + 1) as usize][(dj + 1) as usize];
        if let Some(prev) = cell {
            return Err(Error::Data(format!(
                "tiles `{}` and `{}` share one grid position",
                prev.tile_id, t.tile_id
            )));
        }
        *cell = Some(t);
    }
    Ok(out)
}

/// 3P×3P×3 mosaic, absent neighbours black.
pub fn assemble_context(neigh: &Neighborhood<'_>) -> Result<Tensor<f32>> {
    let center = neigh[1][1].ok_or_else(|| Error::Usage("neighbourhood without a centre tile".into()))?;
    let p = center.size();
    let side = 3 * p;
    let mut out = vec![0f32; side * side * 3];
    for (di, row) in neigh.iter().enumerate() {
        for (dj, cell) in row.iter().enumerate() {
            let Some(t) = cell else { continue };
            let src = t.image.data();
            for i in 0..p {
                let dst = ((di * p + i) * side + dj * p) * 3;
                out[dst..dst + p * 3].copy_from_slice(&src[i * p * 3..(i + 1) * p * 3]);
            }
        }
    }
    Tensor::from_vec(out, &[side, side, 3])
}

/// Rectangular window of an H×W×C image.
pub fn crop<T: Scalar>(x: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || top + h > s[0] || left + w > s[1] || h == 0 || w == 0 {
        return Err(Error::dim(format!("crop {h}×{w}@({top},{left}) outside {s:?}")));
    }
    let c = s[2];
    let mut out = Vec::with_capacity(h * w * c);
    for i in top..top + h {
        let start = (i * s[1] + left) * c;
        out.extend_from_slice(&x.data()[start..start + w * c]);
    }
    Tensor::from_vec(out, &[h, w, c])
}

/// Mean of each 2×2 block.
pub fn downsample_area2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || s[0] % 2 != 0 || s[1] % 2 != 0 {
        return Err(Error::dim(format!("area downsampling needs even H×W×C, got {s:?}")));
    }
    let (h, w, c) = (s[0] / 2, s[1] / 2, s[2]);
    let d = x.data();
    let at = |i: usize, j: usize, k: usize| d[(i * s[1] + j) * c + k];
    let quarter = T::of(0.25);
    let mut out = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                let sum = at(2 * i, 2 * j, k) + at(2 * i, 2 * j + 1, k) + at(2 * i + 1, 2 * j, k) + at(2 * i + 1, 2 * j + 1, k);
                out.push(sum * quarter);
            }
        }
    }
    Tensor::from_vec(out, &[h, w, c])
}

/// LR context from a 3P mosaic: the central 2P window, halved to P×P.
pub fn context_from_mosaic(mosaic: &Tensor<f32>, p: usize) -> Result<Tensor<f32>> {
    if p % 2 != 0 {
        return Err(Error::dim(format!("tile size {p} must be even")));
    }
    downsample_area2(&crop(mosaic, p / 2, p / 2, 2 * p, 2 * p)?)
}

pub fn make_pair(center: &GeoTile, index: &[GeoTile]) -> Result<TilePair> {
    let neigh = find_neighbors(center, index)?;
    let lr = context_from_mosaic(&assemble_context(&neigh)?, center.size())?;
    let mut presence = [[false; 3]; 3];
    for (i, row) in neigh.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            presence[i][j] = cell.is_some();
        }
    }
    Ok(TilePair {
        tile_id: center.tile_id.clone(),
        hr: center.image.clone(),
        lr,
        labels: center.labels.clone(),
        neighbor_presence: presence,
    })
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct TileDescriptor {
    pub tile_id: String,
    pub image_path: PathBuf,
    pub label_path: Option<PathBuf>,
    pub origin_x: f64,
    pub origin_y: f64,
    pub gsd: f64,
}

pub fn parse_manifest(text: &str) -> Result<Vec<TileDescriptor>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 6 {
            return Err(err(format!("expected 6 tab-separated fields, found {}", fields.len())));
        }
        let num = |idx: usize, what: &str| -> Result<f64> {
            fields[idx]
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad {what} `{}`", fields[idx])))
        };
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(err("empty tile id or image path".into()));
        }
        let gsd = num(5, "gsd")?;
        if gsd <= 0.0 {
            return Err(err(format!("gsd must be positive, got {gsd}")));
        }
        out.push(TileDescriptor {
            tile_id: fields[0].to_string(),
            image_path: PathBuf::from(fields[1]),
            label_path: (fields[2] != "-").then(|| PathBuf::from(fields[2])),
            origin_x: num(3, "origin_x")?,
            origin_y: num(4, "origin_y")?,
            gsd,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<TileDescriptor>> {
    parse_manifest(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn format_manifest(tiles: &[TileDescriptor]) -> String {
    let mut s = String::from("# tile_id\timage\tlabels\torigin_x\torigin_y\tgsd\n");
    for t in tiles {
        let labels = t
            .label_path
            .as_ref()
            .map_or("-".to_string(), |p| p.display().to_string());
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            t.tile_id,
            t.image_path.display(),
            labels,
            t.origin_x,
            t.origin_y,
            t.gsd
        ));
    }
    s
}

pub fn write_manifest(tiles: &[TileDescriptor], path: &Path) -> Result<()> {
    fs::write(path, format_manifest(tiles)).map_err(|e| Error::io(path, e))
}

pub fn image_from_raster(r: &Raster) -> Result<Tensor<f32>> {
    if r.channels != 3 {
        return Err(Error::Data(format!("expected an RGB image, got {} channel(s)", r.channels)));
    }
    let scale = 1.0 / r.maxval as f32;
    Tensor::from_vec(r.data.iter().map(|&v| v as f32 * scale).collect(), &[r.height, r.width, 3])
}

pub fn raster_from_image<T: Scalar>(x: &Tensor<T>) -> Result<Raster> {
    let s = x.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::dim(format!("expected H×W×3 image, got {s:?}")));
    }
    let bytes = x
        .data()
        .iter()
        .map(|v| (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Raster::rgb(s[1], s[0], bytes)
}

pub fn labels_from_raster(r: &Raster, num_classes: usize) -> Result<LabelMap> {
    if r.channels != 1 {
        return Err(Error::Data("label image must be single-channel".into()));
    }
    LabelMap::new(r.height, r.width, num_classes, r.data.clone())
}

pub fn raster_from_labels(m: &LabelMap) -> Result<Raster> {
    Raster::gray(m.width, m.height, m.labels.clone())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads every tile of a manifest; relative paths are taken from `base`.
/// Errors name the offending tile.
pub fn load_tiles(descs: &[TileDescriptor], base: &Path, num_classes: usize) -> Result<Vec<GeoTile>> {
    let mut out: Vec<GeoTile> = Vec::with_capacity(descs.len());
    for d in descs {
        let ctx = |e: Error| Error::Data(format!("tile `{}`: {e}", d.tile_id));
        let image = image_from_raster(&Raster::read(&resolve(base, &d.image_path)).map_err(ctx)?).map_err(ctx)?;
        if image.shape()[0] != image.shape()[1] {
            return Err(ctx(Error::dim("tile is not square")));
        }
        if let Some(first) = out.first() {
            if first.size() != image.shape()[0] {
                return Err(ctx(Error::dim(format!(
                    "tile size {} differs from dataset tile size {}",
                    image.shape()[0],
                    first.size()
                ))));
            }
        }
        let labels = match &d.label_path {
            Some(lp) => {
                let m = labels_from_raster(&Raster::read(&resolve(base, lp)).map_err(ctx)?, num_classes).map_err(ctx)?;
                if (m.height, m.width) != (image.shape()[0], image.shape()[1]) {
                    return Err(ctx(Error::dim("label map size differs from the image")));
                }
                Some(m)
            }
            None => None,
        };
        out.push(GeoTile {
            tile_id: d.tile_id.clone(),
            image,
            labels,
            origin_x: d.origin_x,
            origin_y: d.origin_y,
            gsd: d.gsd,
        });
    }
    Ok(out)
}
