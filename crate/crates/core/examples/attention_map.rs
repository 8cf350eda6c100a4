//! Exports the head-averaged cross-attention row of one HR query token over
//! the LR grid and writes it as a grey-level image.

use caswit::fusion::write_attention_map;
use caswit::model::{Caswit, ModelConfig};
use caswit::nn::ParamStore;
use caswit::synthetic::{dataset, SceneConfig};
use caswit::{no_grad, Result};

fn main() -> Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().display().to_string());
    let s = dataset(&SceneConfig::default(), 1, 0)?.remove(0);
    let mut cfg = ModelConfig::toy(4);
    cfg.fusion.gated = false;
    let mut p = ParamStore::<f32>::new();
    let model = Caswit::new(&mut p, &cfg)?;
    let lr = s.lr.as_ref().unwrap();
    let _g = no_grad();
    for stage in 1..=4 {
        let (h, l) = model.fusion_inputs(&p, &s.hr, lr, stage)?;
        let (gh, gw) = (h.shape()[0], h.shape()[1]);
        let query = (gh / 2) * gw + gw / 2;
        let map = model.fusion.export_attention_map(&p, stage, &h, &l, query)?;
        let total: f32 = map.data().iter().sum();
        let path = std::path::Path::new(&out).join(format!("attn_s{stage}.pgm"));
        write_attention_map(&path, &map, stage, (32, 32))?;
        println!("stage {stage}: HR grid {gh}x{gw}, LR grid {:?}, row sum {total:.4}, wrote {}", map.shape(), path.display());
    }
    Ok(())
}
