//! Pretrains a shared-weight encoder, saves it, loads the overlapping tensors
//! into a supervised model, unties the context stream and fine-tunes.

use caswit::checkpoint::{Checkpoint, LoadMode};
use caswit::model::{copy_prefix, Caswit, ModelConfig};
use caswit::nn::ParamStore;
use caswit::ssl::SslHead;
use caswit::synthetic::{dataset, SceneConfig};
use caswit::train::{pretrain, train, AdamW, PretrainConfig, TrainConfig};
use caswit::Result;

fn main() -> Result<()> {
    let data = dataset(&SceneConfig::default(), 4, 0)?;
    let images: Vec<_> = data.iter().map(|s| (s.hr.clone(), s.lr.clone())).collect();

    let mut ssl_cfg = ModelConfig::toy(4);
    ssl_cfg.share_streams = true;
    ssl_cfg.aux_head = false;
    ssl_cfg.segmentation = false;
    let mut sp = ParamStore::<f32>::new();
    let ssl_model = Caswit::new(&mut sp, &ssl_cfg)?;
    let head = SslHead::new(&mut sp, &ssl_model, 0)?;
    let mut opt = AdamW::new(1e-4, 0.05);
    let pc = PretrainConfig { steps: 5, batch: 2, ..Default::default() };
    pretrain(&ssl_model, &head, &mut sp, &mut opt, &images, &pc, |s, l| println!("pretrain step {s} loss {l:.4}"))?;
    let path = std::env::temp_dir().join(format!("caswit-ssl-{}.cswt", std::process::id()));
    Checkpoint::from_store(&sp, Some(&opt), "").save(&path)?;

    let mut p = ParamStore::<f32>::new();
    let model = Caswit::new(&mut p, &ModelConfig::toy(4))?;
    let report = Checkpoint::load(&path)?.apply(&mut p, LoadMode::Intersect)?;
    std::fs::remove_file(&path).ok();
    println!("loaded {} skipped {} missing {}", report.loaded.len(), report.skipped.len(), report.missing.len());
    println!("skipped e.g. {:?}", report.skipped.first());
    println!("missing e.g. {:?}", report.missing.first());
    println!("copied {} tensors into the context stream", copy_prefix(&mut p, "encoder.hr", "encoder.lr"));

    let tc = TrainConfig { steps: 4, batch: 2, ..Default::default() };
    for log in train(&model, &mut p, &mut AdamW::new(6e-5, 0.01), &data, &tc, |_, _| Ok(true))? {
        println!("fine-tune step {} loss {:.4}", log.step, log.loss);
    }
    Ok(())
}
