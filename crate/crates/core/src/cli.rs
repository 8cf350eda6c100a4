//! Command-line surface: `caswit <command> --config <file> [--key value ...]`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{Checkpoint, LoadMode};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::write_attention_map;
use crate::geo::{load_tiles, make_pair, raster_from_image, raster_from_labels, read_manifest, GeoTile, TilePair};
use crate::metrics::MetricReport;
use crate::model::{copy_prefix, Caswit};
use crate::nn::ParamStore;
use crate::ssl::SslHead;
use crate::tensor::no_grad;
use crate::train::{evaluate, pretrain, train, AdamW, Sample};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "caswit", version, about = "Context-aware dual-stream segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Build HR/LR pairs from a manifest and write the LR context images.
    Tile(Args),
    /// Masked-image-modelling pretraining of both streams.
    Pretrain(Args),
    /// Supervised training with optional per-epoch validation.
    Train(Args),
    /// Evaluate a checkpoint and write metrics.txt.
    Eval(Args),
    /// Write one PGM class-id map per tile.
    Infer(Args),
    /// Write cross-fusion attention maps for one query pixel.
    Attnmap(Args),
}

#[derive(Debug, Clone, Copy, clap::Args)]
struct Args;

/// Splits raw arguments into the subcommand, an optional config path and
/// `key value` overrides. Flags may appear in any order.
fn split_args(args: &[OsString]) -> Result<(Command, Option<PathBuf>, Vec<(String, String)>)> {
    let head: Vec<OsString> = args.iter().take(2).cloned().collect();
    let cli = Cli::try_parse_from(head).map_err(|e| Error::Usage(e.to_string().trim_end().to_string()))?;
    let mut config = None;
    let mut overrides = Vec::new();
    let mut rest = args.iter().skip(2).map(|a| a.to_string_lossy().into_owned());
    while let Some(flag) = rest.next() {
        let body = flag
            .strip_prefix("--")
            .ok_or_else(|| Error::Usage(format!("expected `--key value`, got `{flag}`")))?;
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = rest
                    .next()
                    .ok_or_else(|| Error::Usage(format!("flag `--{body}` needs a value")))?;
                (body.to_string(), v)
            }
        };
        let key = key.replace('-', "_");
        if key == "config" {
            config = Some(PathBuf::from(value));
        } else {
            overrides.push((key, value));
        }
    }
    Ok((cli.command, config, overrides))
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Parameter(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Dimension(_)
        | Error::Data(_)
        | Error::Parse { .. }
        | Error::Format(_)
        | Error::Load(_)
        | Error::Io { .. } => EXIT_DATA,
    }
}

/// Resolves the run configuration: defaults, then the file, then overrides.
pub fn resolve_config(config: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses and runs a command line; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let is_meta = |a: &OsString| matches!(a.to_str(), Some("-h" | "--help" | "-V" | "--version"));
    if args.len() < 2 || args[1] == "help" || args.iter().skip(1).any(is_meta) {
        let head: Vec<&OsString> = args.iter().take_while(|a| !is_meta(a)).take(2).collect();
        let meta = args.iter().find(|a| is_meta(a));
        return match Cli::try_parse_from(head.into_iter().chain(meta)) {
            Ok(_) => EXIT_OK,
            Err(e) => {
                let _ = e.print();
                if e.use_stderr() {
                    EXIT_USAGE
                } else {
                    EXIT_OK
                }
            }
        };
    }
    let (command, config, overrides) = match split_args(&args) {
        Ok(v) => v,
        Err(Error::Usage(msg)) => {
            eprintln!("{msg}");
            return EXIT_USAGE;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let cfg = match resolve_config(config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let result = match command {
        Command::Tile(_) => cmd_tile(&cfg),
        Command::Pretrain(_) => cmd_pretrain(&cfg),
        Command::Train(_) => cmd_train(&cfg),
        Command::Eval(_) => cmd_eval(&cfg).map(|_| ()),
        Command::Infer(_) => cmd_infer(&cfg),
        Command::Attnmap(_) => cmd_attnmap(&cfg),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn tag(id: &str, e: Error) -> Error {
    match e {
        Error::Data(m) if !m.starts_with("tile `") => Error::Data(format!("tile `{id}`: {m}")),
        Error::Dimension(m) => Error::Data(format!("tile `{id}`: {m}")),
        e => e,
    }
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Usage(format!("`{key}` is required for this command")))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn load_manifest_tiles(path: &Path, cfg: &RunConfig) -> Result<Vec<GeoTile>> {
    let descs = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let tiles = load_tiles(&descs, base, cfg.num_classes)?;
    if tiles.is_empty() {
        return Err(Error::Data(format!("manifest {} lists no tiles", path.display())));
    }
    if let Some(t) = tiles.iter().find(|t| t.size() != cfg.tile) {
        return Err(Error::Data(format!(
            "tile `{}`: size {} differs from configured tile {}",
            t.tile_id,
            t.size(),
            cfg.tile
        )));
    }
    Ok(tiles)
}

/// One pair per tile; with `labelled` only tiles carrying labels are centres.
pub fn build_pairs(tiles: &[GeoTile], labelled: bool) -> Result<Vec<TilePair>> {
    tiles
        .iter()
        .filter(|t| !labelled || t.labels.is_some())
        .map(|t| make_pair(t, tiles).map_err(|e| tag(&t.tile_id, e)))
        .collect()
}

fn samples(pairs: Vec<TilePair>, context: bool) -> Result<Vec<Sample>> {
    pairs
        .into_iter()
        .map(|pair| {
            let id = pair.tile_id.clone();
            let mut s = Sample::from_pair(pair).map_err(|e| tag(&id, e))?;
            if !context {
                s.lr = None;
            }
            Ok(s)
        })
        .collect()
}

pub fn labelled_samples(manifest: &Path, cfg: &RunConfig) -> Result<Vec<Sample>> {
    let tiles = load_manifest_tiles(manifest, cfg)?;
    let data = samples(build_pairs(&tiles, true)?, cfg.context)?;
    if data.is_empty() {
        return Err(Error::Data(format!("manifest {} has no labelled tiles", manifest.display())));
    }
    Ok(data)
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("model.cswt"))
}

/// Builds the supervised model and loads a checkpoint strictly, rejecting a
/// class-count mismatch with the checkpoint's configuration snapshot.
pub fn load_model(cfg: &RunConfig) -> Result<(Caswit, ParamStore<f32>)> {
    let ck = Checkpoint::load(require(&cfg.checkpoint, "checkpoint")?)?;
    let snap = RunConfig::parse_text(&ck.config)
        .map_err(|e| Error::Format(format!("checkpoint configuration snapshot: {e}")))?;
    if snap.num_classes != cfg.num_classes {
        return Err(Error::Config(format!(
            "checkpoint was trained for {} classes, configuration asks for {}",
            snap.num_classes, cfg.num_classes
        )));
    }
    let mut p = ParamStore::new();
    let model = Caswit::new(&mut p, &cfg.model_config()?)?;
    ck.apply(&mut p, LoadMode::Strict)?;
    Ok((model, p))
}

fn cmd_tile(cfg: &RunConfig) -> Result<()> {
    let tiles = load_manifest_tiles(require(&cfg.manifest, "manifest")?, cfg)?;
    let pairs = build_pairs(&tiles, false)?;
    ensure_dir(&cfg.out_dir)?;
    let mut listing = String::from("# tile_id lr_image neighbors(row-major 3x3)\n");
    for pair in &pairs {
        let name = format!("{}_lr.ppm", pair.tile_id);
        raster_from_image(&pair.lr)?.write(&cfg.out_dir.join(&name))?;
        let bits: String = pair
            .neighbor_presence
            .iter()
            .flatten()
            .map(|&b| if b { '1' } else { '0' })
            .collect();
        let _ = writeln!(listing, "{} {name} {bits}", pair.tile_id);
    }
    let path = cfg.out_dir.join("pairs.txt");
    std::fs::write(&path, listing).map_err(|e| Error::io(&path, e))?;
    println!("wrote {} pairs to {}", pairs.len(), cfg.out_dir.display());
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let tiles = load_manifest_tiles(require(&cfg.manifest, "manifest")?, cfg)?;
    let images: Vec<_> = build_pairs(&tiles, false)?
        .into_iter()
        .map(|pair| (pair.hr, cfg.context.then_some(pair.lr)))
        .collect();
    let mut snapshot = cfg.clone();
    snapshot.share_streams = true;
    snapshot.aux_head = false;
    let mut mcfg = snapshot.model_config()?;
    mcfg.segmentation = false;
    let mut p = ParamStore::<f32>::new();
    let model = Caswit::new(&mut p, &mcfg)?;
    let head = SslHead::new(&mut p, &model, cfg.seed)?;
    let mut opt = AdamW::new(cfg.lr_max, cfg.weight_decay);
    let pcfg = cfg.pretrain_config();
    pretrain(&model, &head, &mut p, &mut opt, &images, &pcfg, |step, loss| {
        println!("step {step} ssl_loss {loss:.6}");
    })?;
    let path = checkpoint_path(cfg);
    ensure_dir(path.parent().unwrap_or(Path::new(".")))?;
    Checkpoint::from_store(&p, Some(&opt), &snapshot.to_text()).save(&path)?;
    println!("saved {}", path.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let data = labelled_samples(require(&cfg.manifest, "manifest")?, cfg)?;
    let val = match &cfg.val_manifest {
        Some(m) => Some(labelled_samples(m, cfg)?),
        None => None,
    };
    let mcfg = cfg.model_config()?;
    let mut p = ParamStore::<f32>::new();
    let model = Caswit::new(&mut p, &mcfg)?;
    if let Some(init) = &cfg.init_checkpoint {
        let report = Checkpoint::load(init)?.apply(&mut p, cfg.load_mode)?;
        println!(
            "init: loaded {} skipped {} missing {}",
            report.loaded.len(),
            report.skipped.len(),
            report.missing.len()
        );
        let lr_missing = report.missing.iter().any(|n| n.starts_with("encoder.lr."));
        let hr_loaded = report.loaded.iter().any(|n| n.starts_with("encoder.hr."));
        if mcfg.context && !mcfg.share_streams && lr_missing && hr_loaded {
            let n = copy_prefix(&mut p, "encoder.hr", "encoder.lr");
            println!("init: copied {n} shared encoder tensors into the context stream");
        }
    }
    let tcfg = cfg.train_config();
    let steps_per_epoch = data.len().div_ceil(tcfg.batch.max(1));
    let mut opt = AdamW::new(cfg.lr_max, cfg.weight_decay);
    train(&model, &mut p, &mut opt, &data, &tcfg, |log, p| {
        println!(
            "step {} loss {:.6} l_hr {:.6} l_lr {:.6} lr {:.3e}",
            log.step, log.loss, log.l_hr, log.l_lr, log.lr
        );
        if let Some(val) = &val {
            if log.step % steps_per_epoch == 0 || log.step == tcfg.steps {
                let r = evaluate(&model, p, val, cfg.band_radius)?;
                println!(
                    "epoch {} mIoU {:.4} mF1 {:.4} mBIoU {:.4}",
                    log.step.div_ceil(steps_per_epoch),
                    r.miou,
                    r.mf1,
                    r.mbiou
                );
            }
        }
        Ok(true)
    })?;
    let path = checkpoint_path(cfg);
    ensure_dir(path.parent().unwrap_or(Path::new(".")))?;
    Checkpoint::from_store(&p, Some(&opt), &cfg.to_text()).save(&path)?;
    println!("saved {}", path.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricReport> {
    let (model, p) = load_model(cfg)?;
    let data = labelled_samples(require(&cfg.manifest, "manifest")?, cfg)?;
    let report = evaluate(&model, &p, &data, cfg.band_radius)?;
    ensure_dir(&cfg.out_dir)?;
    let text = report.to_text();
    let path = cfg.out_dir.join("metrics.txt");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    print!("{text}");
    Ok(report)
}

fn cmd_infer(cfg: &RunConfig) -> Result<()> {
    let (model, p) = load_model(cfg)?;
    let tiles = load_manifest_tiles(require(&cfg.manifest, "manifest")?, cfg)?;
    ensure_dir(&cfg.out_dir)?;
    let _g = no_grad();
    for pair in build_pairs(&tiles, false)? {
        let lr = cfg.context.then_some(&pair.lr);
        let pred = model.predict(&p, &pair.hr, lr).map_err(|e| tag(&pair.tile_id, e))?;
        let path = cfg.out_dir.join(format!("{}_pred.pgm", pair.tile_id));
        raster_from_labels(&pred)?.write(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_attnmap(cfg: &RunConfig) -> Result<()> {
    if !cfg.context {
        return Err(Error::Usage("attention maps need the context stream".into()));
    }
    let (model, p) = load_model(cfg)?;
    let tiles = load_manifest_tiles(require(&cfg.manifest, "manifest")?, cfg)?;
    let (qr, qc) = cfg.attn_query;
    if qr >= cfg.tile || qc >= cfg.tile {
        return Err(Error::Usage(format!("attn_query ({qr}, {qc}) lies outside the {0}x{0} tile", cfg.tile)));
    }
    let stage = cfg.attn_stage;
    ensure_dir(&cfg.out_dir)?;
    let _g = no_grad();
    for pair in build_pairs(&tiles, false)? {
        let (h, l) = model.fusion_inputs(&p, &pair.hr, &pair.lr, stage)?;
        let (gh, gw) = (h.shape()[0], h.shape()[1]);
        let query = (qr * gh / cfg.tile) * gw + qc * gw / cfg.tile;
        let map = model.fusion.export_attention_map(&p, stage, &h, &l, query)?;
        let path = cfg.out_dir.join(format!("{}_attn_s{stage}.pgm", pair.tile_id));
        write_attention_map(&path, &map, stage, (qr, qc))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
