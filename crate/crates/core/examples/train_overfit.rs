//! Overfits the toy model on 16 synthetic scenes and reports accuracy on all
//! pixels and on pixels whose class depends on out-of-tile context.

use caswit::model::{Caswit, ModelConfig};
use caswit::nn::ParamStore;
use caswit::synthetic::{accuracy, cue_dependent_mask, dataset, SceneConfig};
use caswit::train::{evaluate, train, AdamW, TrainConfig};
use caswit::{no_grad, Result};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(150);
    let baseline = args.next().as_deref() == Some("baseline");
    let sc = SceneConfig::default();
    let mut data = dataset(&sc, 16, 0)?;
    let cfg = if baseline {
        data.iter_mut().for_each(|s| s.lr = None);
        ModelConfig::baseline(4)
    } else {
        ModelConfig::toy(4)
    };
    let band = cue_dependent_mask(&sc);
    let mut p = ParamStore::<f32>::new();
    let model = Caswit::new(&mut p, &cfg)?;
    let tc = TrainConfig { steps, batch: 4, lr_max: 1e-3, lr_min: 1e-6, weight_decay: 0.01, alpha: 0.5, ..Default::default() };
    train(&model, &mut p, &mut AdamW::new(1e-3, 0.01), &data, &tc, |log, p| {
        if log.step % 25 == 0 {
            let _g = no_grad();
            let (mut h, mut n, mut ch, mut cn) = (0, 0, 0, 0);
            for s in &data {
                let pred = model.predict(p, &s.hr, s.lr.as_ref())?;
                let (a, b) = accuracy(&pred, &s.labels, None);
                let (c, d) = accuracy(&pred, &s.labels, Some(&band));
                (h, n, ch, cn) = (h + a, n + b, ch + c, cn + d);
            }
            println!(
                "step {:4} loss {:.4} acc {:.3} cue-pixel acc {:.3}",
                log.step,
                log.loss,
                h as f64 / n as f64,
                ch as f64 / cn as f64
            );
        }
        Ok(true)
    })?;
    print!("{}", evaluate(&model, &p, &data, 2)?.to_text());
    Ok(())
}
