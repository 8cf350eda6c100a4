//! One hierarchical shifted-window transformer stream.
//!
//! Layout is H×W×C row-major everywhere; token order inside a window and in
//! flattened maps is row-major over (row, column).

use crate::error::{Error, Result};
use crate::nn::{join, Init, LayerNorm, Linear, Mlp, ParamBuilder, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Logit added to attention pairs that straddle a shifted-window seam.
const MASK_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    /// Pixels per side of a stage-1 patch.
    pub patch_size: usize,
    /// Tokens per window side.
    pub window: usize,
    pub depths: [usize; 4],
    pub channels: [usize; 4],
    pub heads: [usize; 4],
    pub mlp_ratio: f64,
}

impl StreamConfig {
    /// Reduced-width schedule for desk-scale runs.
    pub fn toy() -> Self {
        Self {
            patch_size: 4,
            window: 4,
            depths: [1, 1, 1, 1],
            channels: [32, 64, 128, 256],
            heads: [1, 2, 4, 8],
            mlp_ratio: 4.0,
        }
    }

    pub fn tiny() -> Self {
        Self {
            patch_size: 4,
            window: 8,
            depths: [2, 2, 6, 2],
            channels: [96, 192, 384, 768],
            heads: [3, 6, 12, 24],
            mlp_ratio: 4.0,
        }
    }

    pub fn base() -> Self {
        Self {
            patch_size: 4,
            window: 8,
            depths: [2, 2, 18, 2],
            channels: [128, 256, 512, 1024],
            heads: [4, 8, 16, 32],
            mlp_ratio: 4.0,
        }
    }

    /// Total downsampling from pixels to stage-4 tokens.
    pub fn total_stride(&self) -> usize {
        self.patch_size * 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.window == 0 {
            return Err(Error::config("patch_size and window must be ≥ 1"));
        }
        for s in 0..3 {
            if self.channels[s + 1] != 2 * self.channels[s] {
                return Err(Error::config(format!(
                    "channel schedule {:?} must double between stages",
                    self.channels
                )));
            }
        }
        for s in 0..4 {
            if self.heads[s] == 0 || self.channels[s] % self.heads[s] != 0 {
                return Err(Error::config(format!(
                    "stage {}: {} channels not divisible by {} heads",
                    s + 1,
                    self.channels[s],
                    self.heads[s]
                )));
            }
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        Ok(())
    }

    /// Spatial size of each stage for an `h×w` input, checking divisibility.
    pub fn stage_sizes(&self, h: usize, w: usize) -> Result<[(usize, usize); 4]> {
        let stride = self.total_stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::dim(format!(
                "input {h}×{w} must be divisible by patch_size·8 = {stride}"
            )));
        }
        let mut out = [(0, 0); 4];
        for (s, o) in out.iter_mut().enumerate() {
            let f = self.patch_size << s;
            *o = (h / f, w / f);
            let win = self.effective_window(*o);
            if o.0 % win != 0 || o.1 % win != 0 {
                return Err(Error::dim(format!(
                    "stage {} map {}×{} not divisible by window {win}",
                    s + 1,
                    o.0,
                    o.1
                )));
            }
        }
        Ok(out)
    }

    /// Windows never exceed the feature map; a map smaller than the window is
    /// one window.
    pub fn effective_window(&self, (h, w): (usize, usize)) -> usize {
        self.window.min(h).min(w)
    }
}

/// Per-stage feature maps `X_s` of shape `H_s×W_s×C_s`.
#[derive(Debug, Clone)]
pub struct StageFeatures<T: Scalar = f32> {
    pub stages: Vec<Tensor<T>>,
}

impl<T: Scalar> StageFeatures<T> {
    pub fn stage(&self, s: usize) -> &Tensor<T> {
        &self.stages[s]
    }
}

/// Cuts an H×W×3 image into non-overlapping `p×p` patches:
/// `(H/p · W/p) × (p·p·3)`, pixels inside a patch in (row, col, channel) order.
pub fn patchify<T: Scalar>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (h, w, c) = match *image.shape() {
        [h, w, c] => (h, w, c),
        ref s => return Err(Error::dim(format!("patchify: expected H×W×C image, got {s:?}"))),
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::dim(format!("patchify: {h}×{w} not divisible by patch size {p}")));
    }
    image
        .reshape(&[h / p, p, w / p, p, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[(h / p) * (w / p), p * p * c])
}

/// H×W×C → nWin×(window²)×C, windows in row-major order.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(x)?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::dim(format!(
            "window_partition: {h}×{w} not divisible by window {window}"
        )));
    }
    let (nh, nw) = (h / window, w / window);
    x.reshape(&[nh, window, nw, window, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[nh * nw, window * window, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(windows: &Tensor<T>, window: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let c = *windows.shape().last().unwrap_or(&0);
    let (nh, nw) = (h / window, w / window);
    if windows.shape() != [nh * nw, window * window, c] || h % window != 0 || w % window != 0 {
        return Err(Error::dim(format!(
            "window_reverse: {:?} does not tile {h}×{w} with window {window}",
            windows.shape()
        )));
    }
    windows
        .reshape(&[nh, nw, window, window, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[h, w, c])
}

/// Cyclic shift: output (i, j) = input ((i + dy) mod H, (j + dx) mod W).
pub fn cyclic_shift<T: Scalar>(x: &Tensor<T>, dy: isize, dx: isize) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(x)?;
    let (hi, wi) = (h as isize, w as isize);
    let index: Vec<usize> = (0..h)
        .flat_map(|i| {
            (0..w).map(move |j| {
                let si = (i as isize + dy).rem_euclid(hi) as usize;
                let sj = (j as isize + dx).rem_euclid(wi) as usize;
                si * w + sj
            })
        })
        .collect();
    x.reshape(&[h * w, c])?.gather_rows(&index)?.reshape(&[h, w, c])
}

fn hwc<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::dim(format!("expected H×W×C map, got {s:?}"))),
    }
}

/// Index into a `(2w−1)²` relative-offset table for every (query, key) pair of
/// a `w×w` window, row-major over queries then keys.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let t = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(t * t);
    for q in 0..t {
        let (qy, qx) = (q / window, q % window);
        for k in 0..t {
            let (ky, kx) = (k / window, k % window);
            let dy = qy + window - 1 - ky;
            let dx = qx + window - 1 - kx;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Region labels of the shifted map: tokens whose pre-shift positions were not
/// contiguous get different labels. Returned per window, row-major.
pub fn shifted_window_regions(h: usize, w: usize, window: usize, shift: usize) -> Vec<Vec<usize>> {
    let band = |v: usize, n: usize| {
        if v < n - window {
            0
        } else if v < n - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / window, w / window);
    let mut out = Vec::with_capacity(nh * nw);
    for wy in 0..nh {
        for wx in 0..nw {
            let mut labels = Vec::with_capacity(window * window);
            for i in 0..window {
                for j in 0..window {
                    let (y, x) = (wy * window + i, wx * window + j);
                    labels.push(band(y, h) * 3 + band(x, w));
                }
            }
            out.push(labels);
        }
    }
    out
}

/// Additive logit mask for shifted windows: nWin×T×T, 0 within a region and a
/// large negative value across regions.
pub fn shift_attention_mask(h: usize, w: usize, window: usize, shift: usize) -> Vec<f64> {
    let regions = shifted_window_regions(h, w, window, shift);
    let t = window * window;
    let mut mask = Vec::with_capacity(regions.len() * t * t);
    for labels in &regions {
        for q in 0..t {
            for k in 0..t {
                mask.push(if labels[q] == labels[k] { 0.0 } else { MASK_LOGIT });
            }
        }
    }
    mask
}

#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub patch_size: usize,
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, prefix: &str, patch_size: usize, dim: usize) -> Result<Self> {
        let in_dim = patch_size * patch_size * 3;
        Ok(Self {
            patch_size,
            proj: {
                let bound = 1.0 / (in_dim as f64).sqrt();
                Linear::with_bias_init(b, &join(prefix, "proj"), in_dim, dim, Init::Uniform(bound), Some(Init::Uniform(bound)))?
            },
            norm: LayerNorm::new(b, &join(prefix, "norm"), dim)?,
        })
    }

    /// Linear patch projection before normalisation, H₁×W₁×C₁.
    pub fn project<T: Scalar>(&self, p: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w, c) = hwc(image)?;
        if c != 3 {
            return Err(Error::dim(format!("patch_embed: expected 3 channels, got {c}")));
        }
        let ps = self.patch_size;
        let patches = patchify(image, ps)?;
        self.proj
            .forward(p, &patches)?
            .reshape(&[h / ps, w / ps, self.proj.out_dim])
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.norm.forward(p, &self.project(p, image)?)
    }
}

/// Multi-head self-attention inside windows with a learned relative-position bias.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub rel_bias: String,
    rel_index: Vec<usize>,
}

impl WindowAttention {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        window: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "window attention: {dim} channels not divisible by {heads} heads"
            )));
        }
        let init = Init::TruncNormal(0.02);
        let span = 2 * window - 1;
        Ok(Self {
            dim,
            heads,
            window,
            q: Linear::new(b, &join(prefix, "q"), dim, dim, true, init)?,
            k: Linear::new(b, &join(prefix, "k"), dim, dim, true, init)?,
            v: Linear::new(b, &join(prefix, "v"), dim, dim, true, init)?,
            proj: Linear::new(b, &join(prefix, "proj"), dim, dim, true, init)?,
            rel_bias: b.register(&join(prefix, "rel_bias"), &[span * span, heads], Init::Zeros)?,
            rel_index: relative_position_index(window),
        })
    }

    /// nWin×T×C → (nWin×T×C output, (nWin·heads)×T×T attention weights).
    pub fn forward_with_weights<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        windows: &Tensor<T>,
        mask: Option<&[f64]>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (nw, t, c) = match *windows.shape() {
            [a, b, c] => (a, b, c),
            ref s => return Err(Error::dim(format!("window attention: bad input {s:?}"))),
        };
        if t != self.window * self.window || c != self.dim {
            return Err(Error::dim(format!(
                "window attention: input {:?} does not match window {} / dim {}",
                windows.shape(),
                self.window,
                self.dim
            )));
        }
        let (h, d) = (self.heads, c / self.heads);
        let split = |x: Tensor<T>| -> Result<Tensor<T>> {
            x.reshape(&[nw, t, h, d])?.permute(&[0, 2, 1, 3])?.reshape(&[nw * h, t, d])
        };
        let q = split(self.q.forward(p, windows)?.scale(1.0 / (d as f64).sqrt()))?;
        let k = split(self.k.forward(p, windows)?)?.transpose(1, 2)?;
        let v = split(self.v.forward(p, windows)?)?;
        let mut logits = q.bmm(&k)?;

        // [span², h] -> [h, t·t] -> broadcast over windows
        let bias = p
            .get(&self.rel_bias)?
            .gather_rows(&self.rel_index)?
            .transpose(0, 1)?;
        let repeat: Vec<usize> = (0..nw).flat_map(|_| 0..h).collect();
        let bias = bias.gather_rows(&repeat)?.reshape(&[nw * h, t, t])?;
        logits = logits.add(&bias)?;
        if let Some(mask) = mask {
            if mask.len() != nw * t * t {
                return Err(Error::dim("window attention: mask size mismatch"));
            }
            let full: Vec<T> = (0..nw)
                .flat_map(|wi| (0..h).flat_map(move |_| mask[wi * t * t..(wi + 1) * t * t].iter()))
                .map(|&v| T::of(v))
                .collect();
            logits = logits.add(&Tensor::from_vec(full, &[nw * h, t, t])?)?;
        }
        let attn = logits.softmax_lastdim()?;
        let out = attn
            .bmm(&v)?
            .reshape(&[nw, h, t, d])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[nw, t, c])?;
        Ok((self.proj.forward(p, &out)?, attn))
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, windows: &Tensor<T>, mask: Option<&[f64]>) -> Result<Tensor<T>> {
        Ok(self.forward_with_weights(p, windows, mask)?.0)
    }
}

/// Pre-norm transformer block over windows, optionally on a shifted grid.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub resolution: (usize, usize),
    pub shift: usize,
    mask: Option<Vec<f64>>,
}

impl SwinBlock {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        window: usize,
        resolution: (usize, usize),
        shifted: bool,
        mlp_ratio: f64,
    ) -> Result<Self> {
        let shift = if shifted && window < resolution.0.min(resolution.1) {
            window / 2
        } else {
            0
        };
        let hidden = ((dim as f64) * mlp_ratio).round() as usize;
        Ok(Self {
            norm1: LayerNorm::new(b, &join(prefix, "norm1"), dim)?,
            attn: WindowAttention::new(b, &join(prefix, "attn"), dim, heads, window)?,
            norm2: LayerNorm::new(b, &join(prefix, "norm2"), dim)?,
            mlp: Mlp::new(b, &join(prefix, "mlp"), dim, hidden)?,
            resolution,
            shift,
            mask: (shift > 0).then(|| shift_attention_mask(resolution.0, resolution.1, window, shift)),
        })
    }

    /// Attention branch only: LN, optional shift, windowed MSA, unshift.
    pub fn attention_branch<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = self.resolution;
        let win = self.attn.window;
        let mut y = self.norm1.forward(p, x)?;
        let s = self.shift as isize;
        if s > 0 {
            y = cyclic_shift(&y, s, s)?;
        }
        let windows = window_partition(&y, win)?;
        let out = self.attn.forward(p, &windows, self.mask.as_deref())?;
        let mut y = window_reverse(&out, win, h, w)?;
        if s > 0 {
            y = cyclic_shift(&y, -s, -s)?;
        }
        Ok(y)
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape()[..2] != [self.resolution.0, self.resolution.1] {
            return Err(Error::dim(format!(
                "swin block expects {:?} map, got {:?}",
                self.resolution,
                x.shape()
            )));
        }
        let x = x.add(&self.attention_branch(p, x)?)?;
        x.add(&self.mlp.forward(p, &self.norm2.forward(p, &x)?)?)
    }
}

/// 2×2 neighbourhood concatenation, LN, and 4C → 2C projection.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduction: Linear,
    pub in_dim: usize,
}

impl PatchMerge {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, prefix: &str, in_dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(b, &join(prefix, "norm"), 4 * in_dim)?,
            reduction: Linear::new(
                b,
                &join(prefix, "reduction"),
                4 * in_dim,
                2 * in_dim,
                false,
                Init::TruncNormal(0.02),
            )?,
            in_dim,
        })
    }

    /// Neighbourhood concatenation only: H×W×C → (H/2)×(W/2)×4C with the
    /// 2×2 cells in row-major order.
    pub fn gather<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w, c) = hwc(x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("patch_merge: {h}×{w} has an odd side")));
        }
        x.reshape(&[h / 2, 2, w / 2, 2, c])?
            .permute(&[0, 2, 1, 3, 4])?
            .reshape(&[h / 2, w / 2, 4 * c])
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let merged = Self::gather(x)?;
        self.reduction.forward(p, &self.norm.forward(p, &merged)?)
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub merge: Option<PatchMerge>,
    pub blocks: Vec<SwinBlock>,
    pub resolution: (usize, usize),
}

/// A full encoder stream: patch embedding followed by four stages.
#[derive(Debug, Clone)]
pub struct SwinStream {
    pub cfg: StreamConfig,
    pub prefix: String,
    pub input: (usize, usize),
    pub embed: PatchEmbed,
    pub stages: Vec<Stage>,
}

impl SwinStream {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        prefix: &str,
        cfg: &StreamConfig,
        input: (usize, usize),
    ) -> Result<Self> {
        cfg.validate()?;
        let sizes = cfg.stage_sizes(input.0, input.1)?;
        let embed = PatchEmbed::new(b, &join(prefix, "patch_embed"), cfg.patch_size, cfg.channels[0])?;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let sp = join(prefix, &format!("stages.{s}"));
            let merge = if s > 0 {
                Some(PatchMerge::new(b, &join(&sp, "merge"), cfg.channels[s - 1])?)
            } else {
                None
            };
            let win = cfg.effective_window(sizes[s]);
            let blocks = (0..cfg.depths[s])
                .map(|i| {
                    SwinBlock::new(
                        b,
                        &join(&sp, &format!("blocks.{i}")),
                        cfg.channels[s],
                        cfg.heads[s],
                        win,
                        sizes[s],
                        i % 2 == 1,
                        cfg.mlp_ratio,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage {
                merge,
                blocks,
                resolution: sizes[s],
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            prefix: prefix.to_string(),
            input,
            embed,
            stages,
        })
    }

    pub fn check_input<T: Scalar>(&self, image: &Tensor<T>) -> Result<()> {
        if image.shape() != [self.input.0, self.input.1, 3] {
            return Err(Error::dim(format!(
                "stream `{}` built for {}×{}×3 input, got {:?}",
                self.prefix,
                self.input.0,
                self.input.1,
                image.shape()
            )));
        }
        Ok(())
    }

    /// Stage-1 token map (before any transformer block).
    pub fn embed<T: Scalar>(&self, p: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(image)?;
        self.embed.forward(p, image)
    }

    /// Runs stage `s` (0-based): merge from the previous stage if `s > 0`, then blocks.
    pub fn run_stage<T: Scalar>(&self, p: &ParamStore<T>, s: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let stage = &self.stages[s];
        let mut x = match &stage.merge {
            Some(m) => m.forward(p, x)?,
            None => x.clone(),
        };
        for block in &stage.blocks {
            x = block.forward(p, &x)?;
        }
        Ok(x)
    }

    pub fn encode<T: Scalar>(&self, p: &ParamStore<T>, image: &Tensor<T>) -> Result<StageFeatures<T>> {
        let mut x = self.embed(p, image)?;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            x = self.run_stage(p, s, &x)?;
            stages.push(x.clone());
        }
        Ok(StageFeatures { stages })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, max_rel_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    fn toy_stream(seed: u64, hw: usize) -> (ParamStore<f64>, SwinStream) {
        let mut p = ParamStore::new();
        let s = SwinStream::new(&mut ParamBuilder::new(&mut p, seed), "enc", &StreamConfig::toy(), (hw, hw)).unwrap();
        (p, s)
    }

    #[test]
    fn patch_embed_shapes_and_zero_image() {
        let mut p = ParamStore::<f64>::new();
        let pe = PatchEmbed::new(&mut ParamBuilder::new(&mut p, 0), "pe", 4, 32).unwrap();
        let img = rand_tensor(1, &[8, 8, 3]);
        assert_eq!(pe.forward(&p, &img).unwrap().shape(), &[2, 2, 32]);
        let zero = Tensor::zeros(&[8, 8, 3]);
        let bias = p.get("pe.proj.bias").unwrap().to_vec();
        assert!(bias.iter().any(|&v| v != 0.0));
        assert_eq!(pe.project(&p, &zero).unwrap().to_vec(), bias.repeat(4));
        assert!(pe.forward(&p, &Tensor::zeros(&[6, 8, 3])).is_err());
    }

    #[test]
    fn identity_projection_reproduces_flattened_patch() {
        let mut p = ParamStore::<f64>::new();
        let pe = PatchEmbed::new(&mut ParamBuilder::new(&mut p, 0), "pe", 4, 48).unwrap();
        let mut eye = vec![0.0; 48 * 48];
        (0..48).for_each(|i| eye[i * 48 + i] = 1.0);
        p.set_data("pe.proj.weight", eye).unwrap();
        p.set_data("pe.proj.bias", vec![0.0; 48]).unwrap();
        let img = rand_tensor(2, &[4, 4, 3]);
        let y = pe.project(&p, &img).unwrap();
        assert_eq!(y.shape(), &[1, 1, 48]);
        assert_eq!(y.to_vec(), img.to_vec());
    }

    #[test]
    fn window_partition_layout() {
        let x = Tensor::<f64>::from_f64(&(0..16).map(|v| v as f64).collect::<Vec<_>>(), &[4, 4, 1]).unwrap();
        let w = window_partition(&x, 2).unwrap();
        assert_eq!(w.shape(), &[4, 4, 1]);
        assert_eq!(&w.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&w.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        let single = window_partition(&x, 4).unwrap();
        assert_eq!(single.to_vec(), x.to_vec());
        assert!(window_partition(&x, 3).is_err());
    }

    #[test]
    fn window_round_trip() {
        let x = rand_tensor(3, &[8, 8, 4]);
        let back = window_reverse(&window_partition(&x, 4).unwrap(), 4, 8, 8).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
        let back = cyclic_shift(&cyclic_shift(&x, 2, 2).unwrap(), -2, -2).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    fn single_attention(dim: usize, heads: usize, window: usize) -> (ParamStore<f64>, WindowAttention) {
        let mut p = ParamStore::new();
        let a = WindowAttention::new(&mut ParamBuilder::new(&mut p, 5), "a", dim, heads, window).unwrap();
        (p, a)
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut p = ParamStore::<f64>::new();
        let e = WindowAttention::new(&mut ParamBuilder::new(&mut p, 0), "a", 6, 4, 2).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn singleton_window_attends_to_itself() {
        let (p, a) = single_attention(4, 2, 1);
        let x = rand_tensor(4, &[3, 1, 4]);
        let (_, w) = a.forward_with_weights(&p, &x, None).unwrap();
        assert!(w.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn uniform_logits_average_values() {
        let (mut p, a) = single_attention(4, 1, 2);
        p.set_data("a.q.weight", vec![0.0; 16]).unwrap();
        p.set_data("a.k.weight", vec![0.0; 16]).unwrap();
        let mut eye = vec![0.0; 16];
        (0..4).for_each(|i| eye[i * 4 + i] = 1.0);
        p.set_data("a.v.weight", eye.clone()).unwrap();
        p.set_data("a.proj.weight", eye).unwrap();
        let x = rand_tensor(6, &[1, 4, 4]);
        let y = a.forward(&p, &x, None).unwrap();
        for c in 0..4 {
            let mean: f64 = (0..4).map(|t| x.data()[t * 4 + c]).sum::<f64>() / 4.0;
            for t in 0..4 {
                assert!((y.data()[t * 4 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_value_projection_reduces_block_to_mlp() {
        let mut p = ParamStore::<f64>::new();
        let block = SwinBlock::new(&mut ParamBuilder::new(&mut p, 9), "b", 8, 2, 2, (4, 4), true, 4.0).unwrap();
        p.set_data("b.attn.v.weight", vec![0.0; 64]).unwrap();
        let x = rand_tensor(7, &[4, 4, 8]);
        let y = block.forward(&p, &x).unwrap();
        let want = x.add(&block.mlp.forward(&p, &block.norm2.forward(&p, &x).unwrap()).unwrap()).unwrap();
        assert_eq!(y.to_vec(), want.to_vec());
    }

    #[test]
    fn shifted_mask_blocks_cross_region_pairs() {
        let (h, w, win, shift) = (8, 8, 4, 2);
        let mut p = ParamStore::<f64>::new();
        let block = SwinBlock::new(&mut ParamBuilder::new(&mut p, 1), "b", 4, 1, win, (h, w), true, 2.0).unwrap();
        assert_eq!(block.shift, shift);
        let x = rand_tensor(8, &[h, w, 4]);
        let shifted = cyclic_shift(&block.norm1.forward(&p, &x).unwrap(), 2, 2).unwrap();
        let windows = window_partition(&shifted, win).unwrap();
        let (_, attn) = block.attn.forward_with_weights(&p, &windows, block.mask.as_deref()).unwrap();
        let regions = shifted_window_regions(h, w, win, shift);
        let t = win * win;
        let mut blocked = 0;
        for (wi, labels) in regions.iter().enumerate() {
            for q in 0..t {
                for k in 0..t {
                    let a = attn.data()[(wi * t + q) * t + k];
                    if labels[q] != labels[k] {
                        assert!(a <= 1e-8);
                        blocked += 1;
                    }
                }
            }
        }
        assert!(blocked > 0);
        // the last window mixes four regions; the first is untouched
        assert!(regions[0].iter().all(|&l| l == 0));
        let last: std::collections::BTreeSet<_> = regions[3].iter().collect();
        assert_eq!(last.len(), 4);
    }

    #[test]
    fn shift_alternates_and_degrades_at_depth_one() {
        let mut p = ParamStore::<f64>::new();
        let mut cfg = StreamConfig::toy();
        cfg.depths = [2, 2, 1, 1];
        let s = SwinStream::new(&mut ParamBuilder::new(&mut p, 0), "e", &cfg, (128, 128)).unwrap();
        assert_eq!(s.stages[0].blocks[0].shift, 0);
        assert_eq!(s.stages[0].blocks[1].shift, 2);
        // stage 2 map is 16×16, window 4: shift active on the second block
        assert_eq!(s.stages[1].blocks[1].shift, 2);
        assert_eq!(s.stages[2].blocks[0].shift, 0);
        // stage 4 is 4×4 = one window: never shifted
        assert_eq!(s.stages[3].blocks[0].attn.window, 4);
    }

    #[test]
    fn patch_merge_shapes_and_identity_construction() {
        let x = Tensor::<f64>::from_f64(&[1.0, 2.0, 3.0, 4.0], &[2, 2, 1]).unwrap();
        assert_eq!(PatchMerge::gather(&x).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        let mut p = ParamStore::<f64>::new();
        let m = PatchMerge::new(&mut ParamBuilder::new(&mut p, 0), "m", 1).unwrap();
        assert_eq!(m.forward(&p, &x).unwrap().shape(), &[1, 1, 2]);
        assert!(m.forward(&p, &Tensor::zeros(&[3, 2, 1])).is_err());

        // constant-per-channel input: LN affine set to undo the normalisation
        // (gamma = std, beta = mean of the pattern) and an averaging reduction
        // per channel keep the value pattern.
        let mut p = ParamStore::<f64>::new();
        let m = PatchMerge::new(&mut ParamBuilder::new(&mut p, 0), "m", 2).unwrap();
        let x = Tensor::from_f64(&[0.3, -0.6].repeat(16), &[4, 4, 2]).unwrap();
        let std = (0.45f64 * 0.45 + crate::nn::LN_EPS).sqrt();
        p.set_data("m.norm.weight", vec![std; 8]).unwrap();
        p.set_data("m.norm.bias", vec![-0.15; 8]).unwrap();
        let mut red = vec![0.0; 8 * 4];
        // out[j] = mean over the four neighbours of channel j
        for cell in 0..4 {
            for j in 0..2 {
                red[(cell * 2 + j) * 4 + j] = 0.25;
                red[(cell * 2 + j) * 4 + 2 + j] = 0.25;
            }
        }
        p.set_data("m.reduction.weight", red).unwrap();
        let y = m.forward(&p, &x).unwrap();
        assert_eq!(y.shape(), &[2, 2, 4]);
        for px in y.data().chunks(4) {
            for (v, want) in px.iter().zip([0.3, -0.6, 0.3, -0.6]) {
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn patch_merge_gradient() {
        let mut p = ParamStore::<f64>::new();
        let m = PatchMerge::new(&mut ParamBuilder::new(&mut p, 3), "m", 2).unwrap();
        let w = rand_tensor(4, &[2, 2, 4]);
        let x = rand_tensor(5, &[4, 4, 2]).requiring_grad();
        let f = |x: &Tensor<f64>| Ok(m.forward(&p, x)?.mul(&w)?.sum().item());
        m.forward(&p, &x).unwrap().mul(&w).unwrap().sum().backward().unwrap();
        let fd = finite_diff_grad(f, &x.detach(), 1e-6).unwrap();
        assert!(max_rel_error(&x.grad_vec().unwrap(), fd.data()) <= 1e-4);
    }

    #[test]
    fn encode_shape_schedule_and_determinism() {
        let (p, s) = toy_stream(11, 64);
        let img = rand_tensor(1, &[64, 64, 3]);
        let a = s.encode(&p, &img).unwrap();
        let b = s.encode(&p, &img).unwrap();
        let want = [(16, 32), (8, 64), (4, 128), (2, 256)];
        for (i, (hw, c)) in want.iter().enumerate() {
            assert_eq!(a.stage(i).shape(), &[*hw, *hw, *c]);
            assert_eq!(a.stage(i).to_vec(), b.stage(i).to_vec());
        }
        assert!(s.encode(&p, &rand_tensor(1, &[32, 32, 3])).is_err());
        assert!(SwinStream::new(&mut ParamBuilder::new(&mut ParamStore::<f64>::new(), 0), "x", &StreamConfig::toy(), (48, 48)).is_err());
    }

    #[test]
    fn encode_with_zero_values_is_mlp_cascade() {
        let (mut p, s) = toy_stream(12, 64);
        let names: Vec<String> = p.names().filter(|n| n.ends_with("attn.v.weight")).map(String::from).collect();
        assert_eq!(names.len(), 4);
        for n in names {
            let len = p.get(&n).unwrap().numel();
            p.set_data(&n, vec![0.0; len]).unwrap();
        }
        let img = rand_tensor(2, &[64, 64, 3]);
        let feats = s.encode(&p, &img).unwrap();
        let mut x = s.embed.forward(&p, &img).unwrap();
        for (si, stage) in s.stages.iter().enumerate() {
            if let Some(m) = &stage.merge {
                x = m.forward(&p, &x).unwrap();
            }
            for b in &stage.blocks {
                x = x.add(&b.mlp.forward(&p, &b.norm2.forward(&p, &x).unwrap()).unwrap()).unwrap();
            }
            assert_eq!(feats.stage(si).to_vec(), x.to_vec());
        }
    }

    #[test]
    fn translation_by_one_window_permutes_stage_one() {
        let (mut p, s) = toy_stream(13, 64);
        // non-trivial relative bias so position inside the window matters
        let rb = "enc.stages.0.blocks.0.attn.rel_bias";
        let n = p.get(rb).unwrap().numel();
        p.set_data(rb, rand_tensor(3, &[n]).to_vec()).unwrap();
        let img = rand_tensor(4, &[64, 64, 3]);
        let shift_px = (s.cfg.window * s.cfg.patch_size) as isize;
        let moved = cyclic_shift(&img, shift_px, 0).unwrap();
        let a = s.run_stage(&p, 0, &s.embed(&p, &img).unwrap()).unwrap();
        let b = s.run_stage(&p, 0, &s.embed(&p, &moved).unwrap()).unwrap();
        let want = cyclic_shift(&a, s.cfg.window as isize, 0).unwrap();
        assert_eq!(b.to_vec(), want.to_vec());
    }
}
