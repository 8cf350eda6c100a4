//! Label maps and the training objectives: pixel cross-entropy for both
//! heads, their weighted sum, and the masked reconstruction loss.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Label value excluded from losses and metrics.
pub const VOID: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::dim(format!(
                "label map {height}×{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if num_classes == 0 || num_classes > VOID as usize {
            return Err(Error::config(format!("class count {num_classes} outside 1..=255")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != VOID && l as usize >= num_classes) {
            return Err(Error::Data(format!("label {bad} ≥ class count {num_classes}")));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, value: u8) -> Result<Self> {
        Self::new(height, width, num_classes, vec![value; height * width])
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn is_void(&self, y: usize, x: usize) -> bool {
        self.get(y, x) == VOID
    }

    pub fn targets(&self) -> Vec<Option<usize>> {
        self.labels
            .iter()
            .map(|&l| (l != VOID).then_some(l as usize))
            .collect()
    }

    pub fn count_valid(&self) -> usize {
        self.labels.iter().filter(|&&l| l != VOID).count()
    }
}

/// Mean pixel cross-entropy of `H×W×K` logits over non-void labels.
pub fn ce_loss<T: Scalar>(logits: &Tensor<T>, labels: &LabelMap) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.len() != 3 || s[0] != labels.height || s[1] != labels.width {
        return Err(Error::dim(format!(
            "logits {s:?} do not match labels {}×{}",
            labels.height, labels.width
        )));
    }
    if s[2] != labels.num_classes {
        return Err(Error::config(format!(
            "logits carry {} classes, labels declare {}",
            s[2], labels.num_classes
        )));
    }
    logits.reshape(&[s[0] * s[1], s[2]])?.cross_entropy(&labels.targets())
}

/// Nearest-neighbour label downsampling, top-left sample of each block.
pub fn downsample_labels_nn(labels: &LabelMap, factor: usize) -> Result<LabelMap> {
    if factor == 0 || labels.height % factor != 0 || labels.width % factor != 0 {
        return Err(Error::dim(format!(
            "label map {}×{} not divisible by {factor}",
            labels.height, labels.width
        )));
    }
    let (h, w) = (labels.height / factor, labels.width / factor);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            out.push(labels.get(i * factor, j * factor));
        }
    }
    LabelMap::new(h, w, labels.num_classes, out)
}

/// Labels for a context head of `lr_h×lr_w` pixels whose central half-extent
/// covers the labelled tile: `Y↓` in the middle, VOID around it.
pub fn context_labels(labels: &LabelMap, lr_h: usize, lr_w: usize) -> Result<LabelMap> {
    if lr_h % 4 != 0 || lr_w % 4 != 0 || labels.height % (lr_h / 2) != 0 || labels.width % (lr_w / 2) != 0 {
        return Err(Error::dim(format!(
            "context map {lr_h}×{lr_w} incompatible with labels {}×{}",
            labels.height, labels.width
        )));
    }
    let factor = labels.height / (lr_h / 2);
    if labels.width / (lr_w / 2) != factor {
        return Err(Error::dim("anisotropic context scaling"));
    }
    let small = downsample_labels_nn(labels, factor)?;
    let (oy, ox) = (lr_h / 4, lr_w / 4);
    let mut out = vec![VOID; lr_h * lr_w];
    for i in 0..small.height {
        let row = &small.labels[i * small.width..(i + 1) * small.width];
        out[(oy + i) * lr_w + ox..(oy + i) * lr_w + ox + small.width].copy_from_slice(row);
    }
    LabelMap::new(lr_h, lr_w, labels.num_classes, out)
}

/// `L_HR + α·L_LR`; the context head is scored against [`context_labels`].
pub fn total_loss<T: Scalar>(
    logits_hr: &Tensor<T>,
    logits_lr: &Tensor<T>,
    labels: &LabelMap,
    alpha: f64,
) -> Result<Tensor<T>> {
    let (lr_h, lr_w) = (logits_lr.shape()[0], logits_lr.shape()[1]);
    total_loss_with(logits_hr, logits_lr, labels, &context_labels(labels, lr_h, lr_w)?, alpha)
}

pub fn total_loss_with<T: Scalar>(
    logits_hr: &Tensor<T>,
    logits_lr: &Tensor<T>,
    labels: &LabelMap,
    lr_labels: &LabelMap,
    alpha: f64,
) -> Result<Tensor<T>> {
    if !(alpha >= 0.0) {
        return Err(Error::Parameter(format!("alpha must be ≥ 0, got {alpha}")));
    }
    let l_hr = ce_loss(logits_hr, labels)?;
    if alpha == 0.0 {
        return Ok(l_hr);
    }
    l_hr.add(&ce_loss(logits_lr, lr_labels)?.scale(alpha))
}

/// Mean absolute error over masked pixels and all three channels.
pub fn masked_l1<T: Scalar>(recon: &Tensor<T>, target: &Tensor<T>, mask_pix: &[bool]) -> Result<Tensor<T>> {
    let s = recon.shape();
    if s != target.shape() || s.len() != 3 || s[2] != 3 || mask_pix.len() != s[0] * s[1] {
        return Err(Error::dim(format!(
            "masked_l1: recon {s:?}, target {:?}, mask of {}",
            target.shape(),
            mask_pix.len()
        )));
    }
    let count = mask_pix.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Usage("masked_l1 over an empty mask".into()));
    }
    let weights: Vec<T> = mask_pix
        .iter()
        .flat_map(|&m| [if m { T::one() } else { T::zero() }; 3])
        .collect();
    let w = Tensor::from_vec(weights, s)?;
    Ok(recon
        .sub(target)?
        .abs()
        .mul(&w)?
        .sum()
        .scale(1.0 / (3 * count) as f64))
}
