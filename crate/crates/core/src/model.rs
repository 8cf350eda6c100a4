//! The dual-stream segmentation network: an HR stream, an optional LR
//! context stream, stage-wise cross-fusion, the HR decoder and the auxiliary
//! LR decoder used only for training.

use std::cell::Cell;

use crate::decoder::{DecoderConfig, UperDecoder};
use crate::error::{Error, Result};
use crate::fusion::{CrossFusion, FusionConfig};
use crate::nn::{ParamBuilder, ParamStore};
use crate::objectives::LabelMap;
use crate::swin::{StageFeatures, StreamConfig, SwinStream};
use crate::tensor::{no_grad, Scalar, Tensor};

pub const HR_PREFIX: &str = "encoder.hr";
pub const LR_PREFIX: &str = "encoder.lr";
pub const FUSION_PREFIX: &str = "fusion";
pub const DECODER_PREFIX: &str = "decoder";
pub const AUX_PREFIX: &str = "aux_decoder";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stream: StreamConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    /// Side of the square HR tile and of the LR context image, in pixels.
    pub tile: usize,
    /// Build the LR context stream. Without it the model is the single-stream baseline.
    pub context: bool,
    /// Both streams read the HR stream's weights.
    pub share_streams: bool,
    /// Build the auxiliary LR decoder.
    pub aux_head: bool,
    /// Build the segmentation decoders at all (pretraining does not).
    pub segmentation: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn toy(num_classes: usize) -> Self {
        let stream = StreamConfig::toy();
        Self {
            fusion: FusionConfig::all_stages(stream.heads, true),
            stream,
            decoder: DecoderConfig::toy(num_classes),
            tile: 64,
            context: true,
            share_streams: false,
            aux_head: true,
            segmentation: true,
            seed: 0,
        }
    }

    /// Single-stream reference without context or fusion.
    pub fn baseline(num_classes: usize) -> Self {
        let mut cfg = Self::toy(num_classes);
        cfg.context = false;
        cfg.aux_head = false;
        cfg.fusion = FusionConfig::disabled(cfg.stream.heads);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.fusion.validate()?;
        self.stream.stage_sizes(self.tile, self.tile)?;
        if !self.context && (!self.fusion.enabled_stages.is_empty() || self.aux_head) {
            return Err(Error::config("fusion and the auxiliary head need the context stream"));
        }
        if self.tile % 4 != 0 {
            return Err(Error::config(format!("tile size {} must be a multiple of 4", self.tile)));
        }
        Ok(())
    }

    pub fn lr_prefix(&self) -> &'static str {
        if self.share_streams {
            HR_PREFIX
        } else {
            LR_PREFIX
        }
    }
}

/// Logits of one forward pass.
#[derive(Debug, Clone)]
pub struct Outputs<T: Scalar> {
    pub hr: Tensor<T>,
    pub lr: Option<Tensor<T>>,
}

#[derive(Debug)]
pub struct Caswit {
    pub cfg: ModelConfig,
    pub hr: SwinStream,
    pub lr: Option<SwinStream>,
    pub fusion: CrossFusion,
    pub decoder: Option<UperDecoder>,
    pub aux: Option<UperDecoder>,
    aux_calls: Cell<usize>,
}

impl Caswit {
    /// Registers all parameters into `store`. Every component draws its
    /// initial values from its own seed so toggling one component never
    /// changes another's weights.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let input = (cfg.tile, cfg.tile);
        let sizes = cfg.stream.stage_sizes(cfg.tile, cfg.tile)?;
        let seed = |k: u64| cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
        let hr = SwinStream::new(&mut ParamBuilder::new(store, seed(1)), HR_PREFIX, &cfg.stream, input)?;
        let lr = if cfg.context {
            Some(SwinStream::new(&mut ParamBuilder::new(store, seed(2)), cfg.lr_prefix(), &cfg.stream, input)?)
        } else {
            None
        };
        let fusion = CrossFusion::new(
            &mut ParamBuilder::new(store, seed(3)),
            FUSION_PREFIX,
            cfg.stream.channels,
            &cfg.fusion,
        )?;
        let build_decoder = |store: &mut ParamStore<T>, prefix: &str, k: u64| {
            UperDecoder::new(
                &mut ParamBuilder::new(store, seed(k)),
                prefix,
                cfg.stream.channels,
                sizes[3],
                cfg.stream.patch_size,
                &cfg.decoder,
            )
        };
        let decoder = if cfg.segmentation {
            Some(build_decoder(store, DECODER_PREFIX, 4)?)
        } else {
            None
        };
        let aux = if cfg.segmentation && cfg.aux_head {
            Some(build_decoder(store, AUX_PREFIX, 5)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            hr,
            lr,
            fusion,
            decoder,
            aux,
            aux_calls: Cell::new(0),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.decoder.num_classes
    }

    /// Number of auxiliary decoder evaluations so far.
    pub fn aux_calls(&self) -> usize {
        self.aux_calls.get()
    }

    fn context<'a, T: Scalar>(&self, lr: Option<&'a Tensor<T>>) -> Result<Option<(&SwinStream, &'a Tensor<T>)>> {
        match (&self.lr, lr) {
            (Some(s), Some(x)) => Ok(Some((s, x))),
            (Some(_), None) => Err(Error::Usage("model has a context stream but no LR image was given".into())),
            (None, _) => Ok(None),
        }
    }

    /// Stage-1 token maps of both streams.
    pub fn embed<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        hr: &Tensor<T>,
        lr: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let h = self.hr.embed(p, hr)?;
        let l = match self.context(lr)? {
            Some((s, x)) => Some(s.embed(p, x)?),
            None => None,
        };
        Ok((h, l))
    }

    /// Runs the stages from stage-1 tokens. Returns the fused HR features and
    /// the raw LR features.
    pub fn encode_tokens<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        h0: Tensor<T>,
        l0: Option<Tensor<T>>,
    ) -> Result<(StageFeatures<T>, Option<StageFeatures<T>>)> {
        let (mut h, mut l) = (h0, l0);
        let mut hs = Vec::with_capacity(4);
        let mut ls = Vec::with_capacity(4);
        for s in 0..4 {
            h = self.hr.run_stage(p, s, &h)?;
            if let (Some(stream), Some(x)) = (&self.lr, l.as_ref()) {
                let next = stream.run_stage(p, s, x)?;
                h = self.fusion.fuse_stage(p, s + 1, &h, &next)?;
                ls.push(next.clone());
                l = Some(next);
            }
            hs.push(h.clone());
        }
        let lr_feats = (!ls.is_empty()).then_some(StageFeatures { stages: ls });
        Ok((StageFeatures { stages: hs }, lr_feats))
    }

    /// HR and LR maps entering the fusion block of 1-based `stage`.
    pub fn fusion_inputs<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        hr: &Tensor<T>,
        lr: &Tensor<T>,
        stage: usize,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let stream = self
            .lr
            .as_ref()
            .ok_or_else(|| Error::Usage("model has no context stream".into()))?;
        if !(1..=4).contains(&stage) {
            return Err(Error::Usage(format!("stage {stage} outside 1..=4")));
        }
        let (mut h, mut l) = (self.hr.embed(p, hr)?, stream.embed(p, lr)?);
        for s in 0..stage {
            h = self.hr.run_stage(p, s, &h)?;
            l = stream.run_stage(p, s, &l)?;
            if s + 1 == stage {
                break;
            }
            h = self.fusion.fuse_stage(p, s + 1, &h, &l)?;
        }
        Ok((h, l))
    }

    pub fn encode<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        hr: &Tensor<T>,
        lr: Option<&Tensor<T>>,
    ) -> Result<(StageFeatures<T>, Option<StageFeatures<T>>)> {
        let (h, l) = self.embed(p, hr, lr)?;
        self.encode_tokens(p, h, l)
    }

    fn decoder(&self) -> Result<&UperDecoder> {
        self.decoder
            .as_ref()
            .ok_or_else(|| Error::Usage("model was built without segmentation heads".into()))
    }

    /// Training forward: HR logits plus auxiliary LR logits when that head exists.
    pub fn forward_train<T: Scalar>(&self, p: &ParamStore<T>, hr: &Tensor<T>, lr: Option<&Tensor<T>>) -> Result<Outputs<T>> {
        let (hf, lf) = self.encode(p, hr, lr)?;
        let logits = self.decoder()?.forward(p, &hf)?;
        let aux = match (&self.aux, lf) {
            (Some(dec), Some(lf)) => {
                self.aux_calls.set(self.aux_calls.get() + 1);
                Some(dec.forward(p, &lf)?)
            }
            _ => None,
        };
        Ok(Outputs { hr: logits, lr: aux })
    }

    /// Inference forward: HR logits only, the auxiliary head is never run.
    pub fn forward_infer<T: Scalar>(&self, p: &ParamStore<T>, hr: &Tensor<T>, lr: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (hf, _) = self.encode(p, hr, lr)?;
        self.decoder()?.forward(p, &hf)
    }

    /// Arg-max class map of the inference forward.
    pub fn predict<T: Scalar>(&self, p: &ParamStore<T>, hr: &Tensor<T>, lr: Option<&Tensor<T>>) -> Result<LabelMap> {
        let _g = no_grad();
        let logits = self.forward_infer(p, hr, lr)?;
        argmax_map(&logits)
    }
}

/// Per-pixel arg-max of `H×W×K` logits; ties go to the lower class id.
pub fn argmax_map<T: Scalar>(logits: &Tensor<T>) -> Result<LabelMap> {
    let s = logits.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("logits must be H×W×K, got {s:?}")));
    }
    let labels = logits
        .data()
        .chunks_exact(s[2])
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(s[0], s[1], s[2], labels)
}

/// Copies every `from.*` parameter onto the matching `to.*` name, creating
/// or overwriting it. Used to untie streams after shared-weight pretraining.
pub fn copy_prefix<T: Scalar>(p: &mut ParamStore<T>, from: &str, to: &str) -> usize {
    let src = format!("{from}.");
    let pairs: Vec<(String, Tensor<T>)> = p
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(&src).map(|rest| (format!("{to}.{rest}"), t.detach())))
        .collect();
    let n = pairs.len();
    for (name, t) in pairs {
        p.insert(name, t);
    }
    n
}
