//! Writes a synthetic georeferenced dataset, indexes it by coordinates and
//! builds co-registered HR/LR pairs with neighbour presence. Takes an
//! optional output directory.

use caswit::geo::{crop, downsample_area2, load_tiles, make_pair, read_manifest};
use caswit::synthetic::{write_dataset, SceneConfig, NUM_CLASSES};
use caswit::Result;

fn main() -> Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("caswit-tiles-{}", std::process::id())));
    let manifest = write_dataset(&SceneConfig::default(), 2, 0, &dir)?;
    let descs = read_manifest(&manifest)?;
    let tiles = load_tiles(&descs, manifest.parent().unwrap(), NUM_CLASSES)?;
    println!("{} tiles from {}", tiles.len(), manifest.display());
    for t in tiles.iter().take(4) {
        let pair = make_pair(t, &tiles)?;
        let p = t.size();
        let centre = crop(&pair.lr, p / 4, p / 4, p / 2, p / 2)?;
        let exact = centre.to_vec() == downsample_area2(&t.image)?.to_vec();
        let grid: Vec<String> = pair
            .neighbor_presence
            .iter()
            .map(|r| r.iter().map(|&b| if b { '#' } else { '.' }).collect())
            .collect();
        println!("{:<10} origin ({:.1}, {:.1}) neighbours {} co-registered {exact}", t.tile_id, t.origin_x, t.origin_y, grid.join("/"));
    }
    Ok(())
}

