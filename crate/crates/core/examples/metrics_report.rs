//! Scores a corrupted copy of synthetic ground truth: confusion matrix,
//! per-class IoU/F1/BIoU and the boundary band of one class.

use caswit::metrics::{boundary_band, MetricAccumulator};
use caswit::objectives::LabelMap;
use caswit::synthetic::{scene, SceneConfig, NUM_CLASSES};
use caswit::Result;

fn main() -> Result<()> {
    let cfg = SceneConfig::default();
    let mut acc = MetricAccumulator::new(NUM_CLASSES, 2);
    for i in 0..4 {
        let gt = scene(&cfg, i, i % 2 == 0, 0)?.center.labels.expect("centre tiles are labelled");
        let corrupted: Vec<u8> = gt
            .labels
            .iter()
            .enumerate()
            .map(|(k, &c)| if k % 17 == 0 { (c + 1) % NUM_CLASSES as u8 } else { c })
            .collect();
        let pred = LabelMap::new(gt.height, gt.width, NUM_CLASSES, corrupted)?;
        acc.add(&pred, &gt)?;
        if i == 0 {
            let band = boundary_band(&gt, 1, 2)?;
            for row in band.chunks(gt.width).step_by(4) {
                println!("{}", row.iter().step_by(2).map(|&b| if b { '#' } else { '.' }).collect::<String>());
            }
        }
    }
    print!("{}", acc.report().to_text());
    Ok(())
}
