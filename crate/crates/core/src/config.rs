//! Flat `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint::LoadMode;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::ModelConfig;
use crate::swin::StreamConfig;
use crate::train::{PretrainConfig, TrainConfig, DEFAULT_ALPHA, DEFAULT_LR_MAX, DEFAULT_LR_MIN, DEFAULT_WEIGHT_DECAY};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Toy,
    Tiny,
    Base,
}

impl FromStr for Scale {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "toy" => Ok(Scale::Toy),
            "tiny" => Ok(Scale::Tiny),
            "base" => Ok(Scale::Base),
            _ => Err(format!("unknown model scale `{s}` (toy|tiny|base)")),
        }
    }
}

impl Scale {
    fn name(self) -> &'static str {
        match self {
            Scale::Toy => "toy",
            Scale::Tiny => "tiny",
            Scale::Base => "base",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: Scale,
    pub num_classes: usize,
    pub tile: usize,
    pub context: bool,
    /// 1-based fusion stages; empty disables fusion.
    pub fusion_stages: Vec<usize>,
    pub gated: bool,
    pub share_streams: bool,
    pub aux_head: bool,
    pub fpn_channels: usize,
    pub ppm_bins: Vec<usize>,
    pub alpha: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub augment: bool,
    pub seed: u64,
    pub r_hr: f64,
    pub r_lr: f64,
    pub band_radius: usize,
    pub manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub load_mode: LoadMode,
    pub out_dir: PathBuf,
    pub attn_stage: usize,
    pub attn_query: (usize, usize),
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: Scale::Toy,
            num_classes: 4,
            tile: 64,
            context: true,
            fusion_stages: vec![1, 2, 3, 4],
            gated: true,
            share_streams: false,
            aux_head: true,
            fpn_channels: 64,
            ppm_bins: vec![1, 2],
            alpha: DEFAULT_ALPHA,
            steps: 300,
            batch: 2,
            lr_max: DEFAULT_LR_MAX,
            lr_min: DEFAULT_LR_MIN,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            clip_norm: None,
            augment: false,
            seed: 0,
            r_hr: crate::ssl::DEFAULT_HR_RATIO,
            r_lr: crate::ssl::DEFAULT_LR_RATIO,
            band_radius: crate::metrics::DEFAULT_BAND_RADIUS,
            manifest: None,
            val_manifest: None,
            checkpoint: None,
            init_checkpoint: None,
            load_mode: LoadMode::Strict,
            out_dir: PathBuf::from("."),
            attn_stage: 1,
            attn_query: (0, 0),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v == "none" || v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join_list(v: &[usize]) -> String {
    if v.is_empty() {
        "none".into()
    } else {
        v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

pub const KEYS: &[&str] = &[
    "model", "num_classes", "tile", "context", "fusion_stages", "gated", "share_streams", "aux_head",
    "fpn_channels", "ppm_bins", "alpha", "steps", "batch", "lr_max", "lr_min", "weight_decay", "clip_norm",
    "augment", "seed", "r_hr", "r_lr", "band_radius", "manifest", "val_manifest", "checkpoint",
    "init_checkpoint", "load_mode", "out_dir", "attn_stage", "attn_query",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let path = || Some(PathBuf::from(v));
        match key {
            "model" => self.model = v.parse().map_err(Error::Config)?,
            "num_classes" => self.num_classes = parse(key, v)?,
            "tile" => self.tile = parse(key, v)?,
            "context" => self.context = parse_bool(key, v)?,
            "fusion_stages" => self.fusion_stages = parse_list(key, v)?,
            "gated" => self.gated = parse_bool(key, v)?,
            "share_streams" => self.share_streams = parse_bool(key, v)?,
            "aux_head" => self.aux_head = parse_bool(key, v)?,
            "fpn_channels" => self.fpn_channels = parse(key, v)?,
            "ppm_bins" => self.ppm_bins = parse_list(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "lr_max" => self.lr_max = parse(key, v)?,
            "lr_min" => self.lr_min = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "clip_norm" => self.clip_norm = if v == "none" { None } else { Some(parse(key, v)?) },
            "augment" => self.augment = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "r_hr" => self.r_hr = parse(key, v)?,
            "r_lr" => self.r_lr = parse(key, v)?,
            "band_radius" => self.band_radius = parse(key, v)?,
            "manifest" => self.manifest = path(),
            "val_manifest" => self.val_manifest = path(),
            "checkpoint" => self.checkpoint = path(),
            "init_checkpoint" => self.init_checkpoint = path(),
            "load_mode" => {
                self.load_mode = match v {
                    "strict" => LoadMode::Strict,
                    "intersect" => LoadMode::Intersect,
                    _ => return Err(Error::config(format!("`load_mode`: expected strict|intersect, got `{v}`"))),
                }
            }
            "out_dir" => self.out_dir = PathBuf::from(v),
            "attn_stage" => self.attn_stage = parse(key, v)?,
            "attn_query" => {
                let parts = parse_list(key, v)?;
                match parts[..] {
                    [r, c] => self.attn_query = (r, c),
                    _ => return Err(Error::config("`attn_query` expects `row,col`")),
                }
            }
            _ => return Err(Error::config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Parse { line: i + 1, msg },
                e => e,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::config(format!("alpha must be ≥ 0, got {}", self.alpha)));
        }
        for (name, r) in [("r_hr", self.r_hr), ("r_lr", self.r_lr)] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1), got {r}")));
            }
        }
        if self.band_radius == 0 {
            return Err(Error::config("band_radius must be ≥ 1"));
        }
        self.model_config()?.validate()
    }

    pub fn stream_config(&self) -> StreamConfig {
        match self.model {
            Scale::Toy => StreamConfig::toy(),
            Scale::Tiny => StreamConfig::tiny(),
            Scale::Base => StreamConfig::base(),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let stream = self.stream_config();
        let fusion = FusionConfig {
            enabled_stages: self.fusion_stages.clone(),
            gated: self.gated,
            heads: stream.heads,
            zero_attention: false,
        };
        Ok(ModelConfig {
            stream,
            fusion,
            decoder: DecoderConfig {
                fpn_channels: self.fpn_channels,
                ppm_bins: self.ppm_bins.clone(),
                num_classes: self.num_classes,
            },
            tile: self.tile,
            context: self.context,
            share_streams: self.share_streams,
            aux_head: self.aux_head,
            segmentation: true,
            seed: self.seed,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            weight_decay: self.weight_decay,
            alpha: self.alpha,
            seed: self.seed,
            clip_norm: self.clip_norm,
            augment: self.augment,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            weight_decay: self.weight_decay,
            r_hr: self.r_hr,
            r_lr: self.r_lr,
            seed: self.seed,
        }
    }

    /// Serialises every key; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model", self.model.name().into());
        kv("num_classes", self.num_classes.to_string());
        kv("tile", self.tile.to_string());
        kv("context", self.context.to_string());
        kv("fusion_stages", join_list(&self.fusion_stages));
        kv("gated", self.gated.to_string());
        kv("share_streams", self.share_streams.to_string());
        kv("aux_head", self.aux_head.to_string());
        kv("fpn_channels", self.fpn_channels.to_string());
        kv("ppm_bins", join_list(&self.ppm_bins));
        kv("alpha", self.alpha.to_string());
        kv("steps", self.steps.to_string());
        kv("batch", self.batch.to_string());
        kv("lr_max", self.lr_max.to_string());
        kv("lr_min", self.lr_min.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("clip_norm", self.clip_norm.map_or("none".into(), |v| v.to_string()));
        kv("augment", self.augment.to_string());
        kv("seed", self.seed.to_string());
        kv("r_hr", self.r_hr.to_string());
        kv("r_lr", self.r_lr.to_string());
        kv("band_radius", self.band_radius.to_string());
        for (k, v) in [
            ("manifest", opt(&self.manifest)),
            ("val_manifest", opt(&self.val_manifest)),
            ("checkpoint", opt(&self.checkpoint)),
            ("init_checkpoint", opt(&self.init_checkpoint)),
        ] {
            if let Some(v) = v {
                kv(k, v);
            }
        }
        kv(
            "load_mode",
            match self.load_mode {
                LoadMode::Strict => "strict".into(),
                LoadMode::Intersect => "intersect".into(),
            },
        );
        kv("out_dir", self.out_dir.display().to_string());
        kv("attn_stage", self.attn_stage.to_string());
        kv("attn_query", format!("{},{}", self.attn_query.0, self.attn_query.1));
        s
    }
}
