//! UPerNet-style decoder: pyramid pooling on the deepest stage, a top-down
//! feature pyramid, multi-level fusion, and a per-pixel classifier.

use crate::error::{Error, Result};
use crate::nn::{join, Conv3x3, Init, Linear, ParamBuilder, ParamStore};
use crate::swin::StageFeatures;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub fpn_channels: usize,
    pub ppm_bins: Vec<usize>,
    pub num_classes: usize,
}

impl DecoderConfig {
    pub fn toy(num_classes: usize) -> Self {
        Self {
            fpn_channels: 64,
            ppm_bins: vec![1, 2],
            num_classes,
        }
    }

    pub fn validate(&self, stage4: (usize, usize)) -> Result<()> {
        if self.fpn_channels == 0 || self.num_classes == 0 {
            return Err(Error::config("decoder needs fpn_channels ≥ 1 and at least one class"));
        }
        if self.ppm_bins.is_empty() || self.ppm_bins.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "ppm bins {:?} must be non-empty and strictly increasing",
                self.ppm_bins
            )));
        }
        for &b in &self.ppm_bins {
            if b == 0 || stage4.0 % b != 0 || stage4.1 % b != 0 {
                return Err(Error::config(format!(
                    "ppm bin {b} does not divide the stage-4 map {}×{}",
                    stage4.0, stage4.1
                )));
            }
        }
        Ok(())
    }
}

/// Average pooling of an H×W×C map down to `bins×bins` cells; `bins` must divide both sides.
pub fn adaptive_avg_pool<T: Scalar>(x: &Tensor<T>, bins: usize) -> Result<Tensor<T>> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    if bins == 0 || h % bins != 0 || w % bins != 0 || h / bins != w / bins {
        return Err(Error::config(format!("cannot pool {h}×{w} to {bins}×{bins}")));
    }
    x.avg_pool2d(h / bins)
}

#[derive(Debug, Clone)]
pub struct Ppm {
    pub bins: Vec<usize>,
    pub branches: Vec<Linear>,
    pub bottleneck: Linear,
}

impl Ppm {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, prefix: &str, in_ch: usize, cfg: &DecoderConfig) -> Result<Self> {
        let out = cfg.fpn_channels;
        let branches = cfg
            .ppm_bins
            .iter()
            .enumerate()
            .map(|(i, _)| {
                Linear::new(b, &join(prefix, &format!("branches.{i}")), in_ch, out, true, fan_in(in_ch))
            })
            .collect::<Result<Vec<_>>>()?;
        let cat = in_ch + out * cfg.ppm_bins.len();
        Ok(Self {
            bins: cfg.ppm_bins.clone(),
            branches,
            bottleneck: Linear::new(b, &join(prefix, "bottleneck"), cat, out, true, fan_in(cat))?,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x4: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = (x4.shape()[0], x4.shape()[1]);
        let mut parts = vec![x4.clone()];
        for (&bins, conv) in self.bins.iter().zip(&self.branches) {
            let pooled = adaptive_avg_pool(x4, bins)?;
            let y = conv.forward(p, &pooled)?.gelu();
            parts.push(y.upsample_bilinear(h, w)?);
        }
        Ok(self.bottleneck.forward(p, &Tensor::concat(&parts, 2)?)?.gelu())
    }
}

fn fan_in(n: usize) -> Init {
    Init::FanIn { fan_in: n, gain: 2.0 }
}

#[derive(Debug, Clone)]
pub struct UperDecoder {
    pub cfg: DecoderConfig,
    pub patch_size: usize,
    pub ppm: Ppm,
    pub laterals: Vec<Linear>,
    pub smooth: Vec<Conv3x3>,
    pub fuse: Linear,
    pub classifier: Linear,
}

impl UperDecoder {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        prefix: &str,
        channels: [usize; 4],
        stage4: (usize, usize),
        patch_size: usize,
        cfg: &DecoderConfig,
    ) -> Result<Self> {
        cfg.validate(stage4)?;
        let f = cfg.fpn_channels;
        let laterals = (0..3)
            .map(|s| Linear::new(b, &join(prefix, &format!("lateral.{s}")), channels[s], f, true, fan_in(channels[s])))
            .collect::<Result<Vec<_>>>()?;
        let smooth = (0..3)
            .map(|s| Conv3x3::new(b, &join(prefix, &format!("smooth.{s}")), f, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_size,
            ppm: Ppm::new(b, &join(prefix, "ppm"), channels[3], cfg)?,
            laterals,
            smooth,
            fuse: Linear::new(b, &join(prefix, "fuse"), 4 * f, f, true, fan_in(4 * f))?,
            classifier: Linear::new(b, &join(prefix, "classifier"), f, cfg.num_classes, true, Init::FanIn { fan_in: f, gain: 1.0 })?,
        })
    }

    /// Top-down pyramid over the four stage maps, fused at stage-1 resolution.
    pub fn fpn_decode<T: Scalar>(&self, p: &ParamStore<T>, feats: &StageFeatures<T>) -> Result<Tensor<T>> {
        if feats.stages.len() != 4 {
            return Err(Error::dim(format!("decoder needs 4 stages, got {}", feats.stages.len())));
        }
        for s in 0..3 {
            let (a, b) = (feats.stage(s).shape(), feats.stage(s + 1).shape());
            if a[0] != 2 * b[0] || a[1] != 2 * b[1] {
                return Err(Error::dim(format!(
                    "stage {} map {:?} is not twice stage {} map {:?}",
                    s + 1,
                    a,
                    s + 2,
                    b
                )));
            }
        }
        let mut levels = vec![self.ppm.forward(p, feats.stage(3))?];
        for s in (0..3).rev() {
            let x = feats.stage(s);
            let (h, w) = (x.shape()[0], x.shape()[1]);
            let lateral = self.laterals[s].forward(p, x)?.gelu();
            let top = levels.last().unwrap().upsample_bilinear(h, w)?;
            levels.push(lateral.add(&top)?);
        }
        // levels = [P4, P3, P2, P1] (pre-smoothing for P1..P3)
        levels.reverse();
        let (h1, w1) = (feats.stage(0).shape()[0], feats.stage(0).shape()[1]);
        let mut outs = Vec::with_capacity(4);
        for (s, level) in levels.iter().enumerate() {
            let y = if s < 3 {
                self.smooth[s].forward(p, level)?.gelu()
            } else {
                level.clone()
            };
            outs.push(if s == 0 { y } else { y.upsample_bilinear(h1, w1)? });
        }
        Ok(self.fuse.forward(p, &Tensor::concat(&outs, 2)?)?.gelu())
    }

    /// 1×1 classifier then bilinear upsampling by the patch size. Returns logits.
    pub fn head<T: Scalar>(&self, p: &ParamStore<T>, fused: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = (fused.shape()[0], fused.shape()[1]);
        self.classifier
            .forward(p, fused)?
            .upsample_bilinear(h * self.patch_size, w * self.patch_size)
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, feats: &StageFeatures<T>) -> Result<Tensor<T>> {
        self.head(p, &self.fpn_decode(p, feats)?)
    }
}
