//! Window partitioning, the shifted-window region labels and attention mask,
//! and one Swin block applied to a small feature map.

use caswit::nn::{ParamBuilder, ParamStore};
use caswit::swin::{cyclic_shift, shift_attention_mask, shifted_window_regions, window_partition, window_reverse, SwinBlock};
use caswit::{Result, Tensor};

fn main() -> Result<()> {
    let (h, w, c, win) = (8, 8, 4, 4);
    let x = Tensor::<f32>::from_vec((0..h * w * c).map(|i| (i as f32 * 0.37).sin()).collect(), &[h, w, c])?;
    let windows = window_partition(&x, win)?;
    println!("{h}x{w} map -> windows {:?}", windows.shape());
    assert_eq!(window_reverse(&windows, win, h, w)?.to_vec(), x.to_vec());

    let shifted = cyclic_shift(&x, -(win as isize / 2), -(win as isize / 2))?;
    assert_eq!(cyclic_shift(&shifted, 2, 2)?.to_vec(), x.to_vec());

    let regions = shifted_window_regions(h, w, win, win / 2);
    for (k, r) in regions.iter().enumerate() {
        println!("window {k} regions {:?}", r.chunks(win).collect::<Vec<_>>());
    }
    let mask = shift_attention_mask(h, w, win, win / 2);
    let blocked = mask.iter().filter(|v| **v < 0.0).count();
    println!("shift mask: {blocked} of {} entries blocked", mask.len());

    let mut p = ParamStore::<f32>::new();
    let mut b = ParamBuilder::new(&mut p, 0);
    let block = SwinBlock::new(&mut b, "block", c, 2, win, (h, w), true, 4.0)?;
    let y = block.forward(&p, &x)?;
    println!("shifted Swin block output {:?}, mean {:.4}", y.shape(), y.mean().item());
    Ok(())
}
