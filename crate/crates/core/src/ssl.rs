//! Dual-stream masked-image pretraining: HR random masking, centred LR
//! masking, learnable mask tokens at the stage-1 embedding, and a
//! pixel-shuffle reconstruction head regressing HR pixels.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Caswit;
use crate::nn::{join, Init, Linear, ParamBuilder, ParamStore};
use crate::objectives::masked_l1;
use crate::tensor::{Scalar, Tensor};

pub const SSL_PREFIX: &str = "ssl";
pub const DEFAULT_HR_RATIO: f64 = 0.75;
pub const DEFAULT_LR_RATIO: f64 = 0.5;

/// Boolean grid over patch positions, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
}

impl MaskGrid {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![false; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.width + x]
    }

    /// Pixel-resolution mask, each cell expanded to `patch×patch` pixels.
    pub fn to_pixels(&self, patch: usize) -> Vec<bool> {
        let w = self.width * patch;
        let mut out = vec![false; self.height * patch * w];
        for (i, px) in out.iter_mut().enumerate() {
            *px = self.get(i / w / patch, i % w / patch);
        }
        out
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Parameter(format!("mask ratio {r} outside (0, 1)")));
    }
    Ok(())
}

/// Exactly `round(r·h·w)` uniformly chosen cells, deterministic in `seed`.
pub fn sample_hr_mask((h, w): (usize, usize), r: f64, seed: u64) -> Result<MaskGrid> {
    check_ratio(r)?;
    if h == 0 || w == 0 {
        return Err(Error::dim("mask grid has zero extent"));
    }
    let n = h * w;
    let k = (r * n as f64).round() as usize;
    let mut grid = MaskGrid::empty(h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in sample(&mut rng, n, k) {
        grid.cells[i] = true;
    }
    Ok(grid)
}

/// Centred rectangle of sides `round(dim·√r)`.
pub fn centered_lr_mask((h, w): (usize, usize), r: f64) -> Result<MaskGrid> {
    check_ratio(r)?;
    let side = |d: usize| ((d as f64 * r.sqrt()).round() as usize).clamp(1, d);
    let (sh, sw) = (side(h), side(w));
    let (oy, ox) = ((h - sh) / 2, (w - sw) / 2);
    let mut grid = MaskGrid::empty(h, w);
    for y in oy..oy + sh {
        for x in ox..ox + sw {
            grid.cells[y * w + x] = true;
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub hr_mask: MaskGrid,
    pub lr_mask: MaskGrid,
    pub r_hr: f64,
    pub r_lr: f64,
    pub seed: u64,
}

impl MaskSpec {
    pub fn sample(hr_grid: (usize, usize), lr_grid: (usize, usize), r_hr: f64, r_lr: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            hr_mask: sample_hr_mask(hr_grid, r_hr, seed)?,
            lr_mask: centered_lr_mask(lr_grid, r_lr)?,
            r_hr,
            r_lr,
            seed,
        })
    }
}

/// Replaces masked rows of an `h×w×C` (or `h·w×C`) embedding with `token`.
pub fn apply_mask_tokens<T: Scalar>(embedded: &Tensor<T>, mask: &MaskGrid, token: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = embedded.shape().to_vec();
    let c = *shape.last().unwrap();
    let rows = embedded.numel() / c;
    if rows != mask.cells.len() || (shape.len() == 3 && (shape[0], shape[1]) != (mask.height, mask.width)) {
        return Err(Error::dim(format!(
            "mask grid {}×{} does not match embedding {shape:?}",
            mask.height, mask.width
        )));
    }
    embedded
        .reshape(&[rows, c])?
        .replace_rows(&mask.cells, token)?
        .reshape(&shape)
}

/// Initial reconstruction bias: the centre of the [0, 1] pixel range.
pub const RECON_BIAS_INIT: f64 = 0.5;

/// 1×1 projection to `3s²` channels followed by pixel shuffle with stride `s`.
#[derive(Debug, Clone)]
pub struct ReconHead {
    pub proj: Linear,
    pub stride: usize,
}

impl ReconHead {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, prefix: &str, in_ch: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::with_bias_init(
                b,
                prefix,
                in_ch,
                3 * stride * stride,
                Init::TruncNormal(0.02),
                Some(Init::Constant(RECON_BIAS_INIT)),
            )?,
            stride,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x4: &Tensor<T>) -> Result<Tensor<T>> {
        self.proj.forward(p, x4)?.pixel_shuffle(self.stride)
    }
}

/// Mask tokens for both streams and the reconstruction head.
#[derive(Debug, Clone)]
pub struct SslHead {
    pub token_hr: String,
    pub token_lr: String,
    pub recon: ReconHead,
}

impl SslHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, model: &Caswit, seed: u64) -> Result<Self> {
        let cfg = &model.cfg.stream;
        let stride = cfg.total_stride();
        recon_stride_check(stride, cfg.patch_size)?;
        let mut b = ParamBuilder::new(store, seed);
        let c1 = cfg.channels[0];
        Ok(Self {
            token_hr: b.register(&join(SSL_PREFIX, "mask_token.hr"), &[c1], Init::TruncNormal(0.02))?,
            token_lr: b.register(&join(SSL_PREFIX, "mask_token.lr"), &[c1], Init::TruncNormal(0.02))?,
            recon: ReconHead::new(&mut b, &join(SSL_PREFIX, "recon"), cfg.channels[3], stride)?,
        })
    }
}

/// The reconstruction stride must undo the encoder's total downsampling.
pub fn recon_stride_check(stride: usize, patch_size: usize) -> Result<()> {
    if stride != patch_size * 8 {
        return Err(Error::config(format!(
            "reconstruction stride {stride} must equal patch_size·8 = {}",
            patch_size * 8
        )));
    }
    Ok(())
}

/// Reconstruction and loss of one pretraining forward.
#[derive(Debug, Clone)]
pub struct PretrainOutput<T: Scalar> {
    pub recon: Tensor<T>,
    pub loss: Tensor<T>,
    pub mask_pix: Vec<bool>,
}

/// Masked dual-stream encode, HR reconstruction, masked ℓ1 against `hr`.
pub fn pretrain_forward<T: Scalar>(
    p: &ParamStore<T>,
    model: &Caswit,
    head: &SslHead,
    hr: &Tensor<T>,
    lr: Option<&Tensor<T>>,
    masks: &MaskSpec,
) -> Result<PretrainOutput<T>> {
    let (h0, l0) = model.embed(p, hr, lr)?;
    let h0 = apply_mask_tokens(&h0, &masks.hr_mask, p.get(&head.token_hr)?)?;
    let l0 = match l0 {
        Some(l) => Some(apply_mask_tokens(&l, &masks.lr_mask, p.get(&head.token_lr)?)?),
        None => None,
    };
    let (hf, _) = model.encode_tokens(p, h0, l0)?;
    let recon = head.recon.forward(p, hf.stage(3))?;
    let mask_pix = masks.hr_mask.to_pixels(model.cfg.stream.patch_size);
    let loss = masked_l1(&recon, hr, &mask_pix)?;
    Ok(PretrainOutput { recon, loss, mask_pix })
}
