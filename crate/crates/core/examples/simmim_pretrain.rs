//! Masked-image pretraining on flat-colour tiles: random HR patch masking,
//! a centred LR mask, and an L1 loss on masked pixels only.

use caswit::model::{Caswit, ModelConfig};
use caswit::nn::ParamStore;
use caswit::ssl::{pretrain_forward, MaskSpec, SslHead};
use caswit::synthetic::constant_corpus;
use caswit::train::{pretrain, AdamW, PretrainConfig};
use caswit::{no_grad, Result};

fn main() -> Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let corpus = constant_corpus(8, 32, 0)?;
    let mut cfg = ModelConfig::toy(4);
    cfg.tile = 32;
    cfg.share_streams = true;
    cfg.aux_head = false;
    cfg.segmentation = false;
    cfg.fusion.gated = false;
    let mut p = ParamStore::<f32>::new();
    let model = Caswit::new(&mut p, &cfg)?;
    let head = SslHead::new(&mut p, &model, 0)?;
    let masks = MaskSpec::sample((8, 8), (8, 8), 0.75, 0.5, 1)?;
    println!("HR mask {} of 64 patches, LR mask {} of 64", masks.hr_mask.count(), masks.lr_mask.count());
    let mut opt = AdamW::new(5e-4, 0.01);
    let pc = PretrainConfig { steps, batch: 8, lr_max: 5e-4, lr_min: 1e-6, weight_decay: 0.01, r_hr: 0.75, r_lr: 0.5, seed: 0 };
    pretrain(&model, &head, &mut p, &mut opt, &corpus, &pc, |step, loss| {
        if step % 20 == 0 || step == 1 {
            println!("step {step:4} masked L1 {loss:.4}");
        }
    })?;
    let _g = no_grad();
    let (hr, lr) = &corpus[0];
    let out = pretrain_forward(&p, &model, &head, hr, lr.as_ref(), &masks)?;
    println!("held-out mask L1 on image 0: {:.4}", out.loss.item());
    Ok(())
}
