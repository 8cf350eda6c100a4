//! Stage-wise HR→LR cross-attention fusion.
//!
//! At an enabled stage the HR map is updated as
//!
//! ```text
//! A  = MHA(LN(x_hr)·W_Q, LN(x_lr)·W_K, LN(x_lr)·W_V)
//! H' = x_hr + γ·A          γ = tanh(g) when gated, 1 otherwise
//! H̃ = H' + MLP(H')
//! ```
//!
//! HR tokens are the queries and LR tokens the keys/values; both maps are
//! flattened row-major, and their spatial sizes may differ.

use std::path::Path;

use crate::error::{Error, Result};
use crate::netpbm::Raster;
use crate::nn::{join, Init, LayerNorm, Linear, Mlp, ParamBuilder, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Hidden width multiplier of the fusion MLP.
pub const FUSION_MLP_RATIO: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    /// Enabled stages, 1-based.
    pub enabled_stages: Vec<usize>,
    pub gated: bool,
    /// Heads per stage.
    pub heads: [usize; 4],
    /// Replace the cross-attention output by zeros while keeping the gate and
    /// MLP path. Used to check gate-zero equivalence.
    pub zero_attention: bool,
}

impl FusionConfig {
    pub fn all_stages(heads: [usize; 4], gated: bool) -> Self {
        Self {
            enabled_stages: vec![1, 2, 3, 4],
            gated,
            heads,
            zero_attention: false,
        }
    }

    pub fn disabled(heads: [usize; 4]) -> Self {
        Self {
            enabled_stages: Vec::new(),
            gated: false,
            heads,
            zero_attention: false,
        }
    }

    pub fn with_stages(mut self, stages: &[usize]) -> Self {
        self.enabled_stages = stages.to_vec();
        self
    }

    pub fn is_enabled(&self, stage: usize) -> bool {
        self.enabled_stages.contains(&stage)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.enabled_stages.iter().find(|&&s| !(1..=4).contains(&s)) {
            return Err(Error::config(format!("fusion stage {bad} is outside 1..=4")));
        }
        let mut sorted = self.enabled_stages.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.enabled_stages.len() {
            return Err(Error::config(format!(
                "fusion stages {:?} contain duplicates",
                self.enabled_stages
            )));
        }
        Ok(())
    }
}

/// Cross-attention with its LNs and projections, one per enabled stage.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub dim: usize,
    pub heads: usize,
    pub norm_hr: LayerNorm,
    pub norm_lr: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl CrossAttention {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "cross attention: {dim} channels not divisible by {heads} heads"
            )));
        }
        let init = Init::TruncNormal(0.02);
        Ok(Self {
            dim,
            heads,
            norm_hr: LayerNorm::new(b, &join(prefix, "norm_hr"), dim)?,
            norm_lr: LayerNorm::new(b, &join(prefix, "norm_lr"), dim)?,
            q: Linear::new(b, &join(prefix, "q"), dim, dim, false, init)?,
            k: Linear::new(b, &join(prefix, "k"), dim, dim, false, init)?,
            v: Linear::new(b, &join(prefix, "v"), dim, dim, false, init)?,
            out: Linear::new(b, &join(prefix, "out"), dim, dim, false, init)?,
        })
    }

    fn tokens<T: Scalar>(&self, x: &Tensor<T>, what: &str) -> Result<Tensor<T>> {
        let c = *x.shape().last().unwrap_or(&0);
        if c != self.dim {
            return Err(Error::config(format!(
                "cross attention: {what} has {c} channels, stage expects {}",
                self.dim
            )));
        }
        x.reshape(&[x.numel() / c, c])
    }

    /// Returns `A` shaped like `x_hr` and the heads×N_hr×N_lr attention weights.
    pub fn forward_with_weights<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x_hr: &Tensor<T>,
        x_lr: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let hr = self.tokens(x_hr, "HR input")?;
        let lr = self.tokens(x_lr, "LR input")?;
        let (n, m) = (hr.shape()[0], lr.shape()[0]);
        let (h, d) = (self.heads, self.dim / self.heads);

        let hr_n = self.norm_hr.forward(p, &hr)?;
        let lr_n = self.norm_lr.forward(p, &lr)?;
        let heads = |x: Tensor<T>, rows: usize| -> Result<Tensor<T>> {
            x.reshape(&[rows, h, d])?.permute(&[1, 0, 2])
        };
        let q = heads(self.q.forward(p, &hr_n)?.scale(1.0 / (d as f64).sqrt()), n)?;
        let k = heads(self.k.forward(p, &lr_n)?, m)?.transpose(1, 2)?;
        let v = heads(self.v.forward(p, &lr_n)?, m)?;
        let attn = q.bmm(&k)?.softmax_lastdim()?;
        let a = attn.bmm(&v)?.permute(&[1, 0, 2])?.reshape(&[n, self.dim])?;
        let a = self.out.forward(p, &a)?.reshape(x_hr.shape())?;
        Ok((a, attn))
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x_hr: &Tensor<T>, x_lr: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_weights(p, x_hr, x_lr)?.0)
    }
}

/// The fusion block of one stage.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub stage: usize,
    pub attn: CrossAttention,
    pub gate: Option<String>,
    pub mlp: Mlp,
    pub zero_attention: bool,
}

impl FusionBlock {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        prefix: &str,
        stage: usize,
        dim: usize,
        cfg: &FusionConfig,
    ) -> Result<Self> {
        let heads = cfg.heads[stage - 1];
        Ok(Self {
            stage,
            attn: CrossAttention::new(b, &join(prefix, "attn"), dim, heads)?,
            gate: if cfg.gated {
                Some(b.register(&join(prefix, "gate"), &[1], Init::Zeros)?)
            } else {
                None
            },
            mlp: Mlp::new(b, &join(prefix, "mlp"), dim, FUSION_MLP_RATIO * dim)?,
            zero_attention: cfg.zero_attention,
        })
    }

    /// Effective gate value γ = tanh(g), or `None` when ungated.
    pub fn gate_value<T: Scalar>(&self, p: &ParamStore<T>) -> Result<Option<T>> {
        Ok(match &self.gate {
            Some(g) => Some(p.get(g)?.item().tanh()),
            None => None,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x_hr: &Tensor<T>, x_lr: &Tensor<T>) -> Result<Tensor<T>> {
        let a = if self.zero_attention {
            // channel check still applies
            self.attn.tokens(x_lr, "LR input")?;
            Tensor::zeros(x_hr.shape())
        } else {
            self.attn.forward(p, x_hr, x_lr)?
        };
        let injected = match &self.gate {
            Some(g) => a.mul_scalar(&p.get(g)?.tanh())?,
            None => a,
        };
        let h = x_hr.add(&injected)?;
        h.add(&self.mlp.forward(p, &h)?)
    }
}

/// Fusion blocks for all four stages; disabled stages pass HR features through.
#[derive(Debug, Clone)]
pub struct CrossFusion {
    pub cfg: FusionConfig,
    pub blocks: [Option<FusionBlock>; 4],
}

impl CrossFusion {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, prefix: &str, channels: [usize; 4], cfg: &FusionConfig) -> Result<Self> {
        cfg.validate()?;
        let mut blocks: [Option<FusionBlock>; 4] = Default::default();
        for s in 1..=4 {
            if cfg.is_enabled(s) {
                blocks[s - 1] = Some(FusionBlock::new(
                    b,
                    &join(prefix, &format!("stages.{}", s - 1)),
                    s,
                    channels[s - 1],
                    cfg,
                )?);
            }
        }
        Ok(Self { cfg: cfg.clone(), blocks })
    }

    pub fn any_enabled(&self) -> bool {
        self.blocks.iter().any(Option::is_some)
    }

    /// `H̃_s` for 1-based `stage`; a disabled stage returns `x_hr` itself.
    pub fn fuse_stage<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        stage: usize,
        x_hr: &Tensor<T>,
        x_lr: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        match self.blocks.get(stage.wrapping_sub(1)).and_then(Option::as_ref) {
            Some(block) => block.forward(p, x_hr, x_lr),
            None => Ok(x_hr.clone()),
        }
    }

    /// Head-averaged attention row of HR token `query_index` at `stage`,
    /// reshaped to the LR grid Ĥ_s×Ŵ_s.
    pub fn export_attention_map<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        stage: usize,
        x_hr: &Tensor<T>,
        x_lr: &Tensor<T>,
        query_index: usize,
    ) -> Result<Tensor<T>> {
        let block = self
            .blocks
            .get(stage.wrapping_sub(1))
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::Usage(format!("fusion is not enabled at stage {stage}")))?;
        let n_hr = x_hr.numel() / x_hr.shape().last().copied().unwrap_or(1);
        if query_index >= n_hr {
            return Err(Error::Usage(format!(
                "query index {query_index} out of range for {n_hr} HR tokens"
            )));
        }
        let (lh, lw) = match *x_lr.shape() {
            [h, w, _] => (h, w),
            ref s => return Err(Error::dim(format!("LR map must be H×W×C, got {s:?}"))),
        };
        let _g = crate::tensor::no_grad();
        let (_, attn) = block.attn.forward_with_weights(p, x_hr, x_lr)?;
        let heads = block.attn.heads;
        let m = lh * lw;
        let mut row = vec![T::zero(); m];
        for hd in 0..heads {
            let off = (hd * n_hr + query_index) * m;
            for (r, &v) in row.iter_mut().zip(&attn.data()[off..off + m]) {
                *r = *r + v;
            }
        }
        let inv = T::of(1.0 / heads as f64);
        Tensor::from_vec(row.into_iter().map(|v| v * inv).collect(), &[lh, lw])
    }
}

/// Writes an attention map as an 8-bit P5 image scaled so the maximum weight
/// maps to 255, plus a one-line sidecar `<path>.txt`.
pub fn write_attention_map<T: Scalar>(
    path: &Path,
    map: &Tensor<T>,
    stage: usize,
    query_pixel: (usize, usize),
) -> Result<()> {
    let (h, w) = match *map.shape() {
        [h, w] => (h, w),
        ref s => return Err(Error::dim(format!("attention map must be 2-d, got {s:?}"))),
    };
    let max = map.data().iter().fold(0.0f64, |m, v| m.max(v.f64()));
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let bytes = map
        .data()
        .iter()
        .map(|v| (v.f64() * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    Raster::gray(w, h, bytes)?.write(path)?;
    let sidecar = sidecar_path(path);
    let line = format!(
        "stage {stage} query_row {} query_col {} lr_grid {h}x{w}\n",
        query_pixel.0, query_pixel.1
    );
    std::fs::write(&sidecar, line).map_err(|e| Error::io(&sidecar, e))
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    s.into()
}
