//! Fusion of side-extractor features into backbone features, and the
//! assembled detector (backbone, optional side extractor, fusion sites, head).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::{apply_freeze, bind_frozen, init_dense, BackboneSpec, DenseLayer, Extractor, FreezePlan};
use crate::backbone::{check_image, standardize, ConvLayer};
use crate::detect::{self, DetBox, Head};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    #[default]
    None,
    Addition,
    WeightsGating,
    SeGating,
    ZeroConv,
    SelfWeighted,
}

impl FusionMethod {
    pub const SIDELOAD: [FusionMethod; 4] = [
        FusionMethod::Addition,
        FusionMethod::WeightsGating,
        FusionMethod::SeGating,
        FusionMethod::ZeroConv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMethod::None => "none",
            FusionMethod::Addition => "addition",
            FusionMethod::WeightsGating => "weights_gating",
            FusionMethod::SeGating => "se_gating",
            FusionMethod::ZeroConv => "zero_conv",
            FusionMethod::SelfWeighted => "self_weighted",
        }
    }

    /// Whether the method consumes side-extractor features.
    pub fn uses_side(self) -> bool {
        !matches!(self, FusionMethod::None | FusionMethod::SelfWeighted)
    }

    /// Whether the method has a per-channel gate `W` (exported by analysis).
    pub fn has_gates(self) -> bool {
        matches!(self, FusionMethod::WeightsGating | FusionMethod::SelfWeighted)
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Backbone,
    Blockwise,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Backbone => "backbone",
            Granularity::Blockwise => "blockwise",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub method: FusionMethod,
    pub granularity: Granularity,
    pub se_reduction: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            method: FusionMethod::None,
            granularity: Granularity::Backbone,
            se_reduction: 16,
        }
    }
}

impl FusionConfig {
    pub fn new(method: FusionMethod, granularity: Granularity) -> Self {
        FusionConfig {
            method,
            granularity,
            ..FusionConfig::default()
        }
    }

    /// Block indices after which a fusion site sits.
    pub fn site_blocks(&self, num_blocks: usize) -> Vec<usize> {
        match (self.method, self.granularity) {
            (FusionMethod::None, _) => Vec::new(),
            (_, Granularity::Backbone) => vec![num_blocks - 1],
            (_, Granularity::Blockwise) => (0..num_blocks).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method == FusionMethod::SelfWeighted && self.granularity != Granularity::Blockwise {
            return Err(Error::invalid("self_weighted gating is defined per block; use granularity blockwise"));
        }
        if self.se_reduction == 0 {
            return Err(Error::invalid("se_reduction must be positive"));
        }
        Ok(())
    }
}

/// Effective SE reduction for `channels`: `r` capped at `max(1, C/4)`, which
/// must divide `C`.
pub fn se_reduction_for(channels: usize, r: usize) -> Result<usize> {
    if r == 0 {
        return Err(Error::invalid("se_reduction must be positive"));
    }
    let eff = r.min((channels / 4).max(1));
    if channels % eff != 0 {
        return Err(Error::invalid(format!(
            "SE reduction {eff} (from {r}) does not divide {channels} channels"
        )));
    }
    Ok(eff)
}

pub fn fuse_addition(tape: &mut Tape<'_>, backbone: Var, side: Var) -> Result<Var> {
    tape.add(backbone, side)
}

/// `backbone + tanh(w) * side`, per channel.
pub fn fuse_weights_gating(tape: &mut Tape<'_>, backbone: Var, side: Var, w: Var) -> Result<Var> {
    let scale = tape.tanh(w);
    let gated = tape.mul_channelwise(side, scale)?;
    tape.add(backbone, gated)
}

/// `backbone + sigmoid(fc2(relu(fc1(gap(side))))) * side`, per channel.
pub fn fuse_se_gating(
    tape: &mut Tape<'_>,
    backbone: Var,
    side: Var,
    fc1: (Var, Var),
    fc2: (Var, Var),
) -> Result<Var> {
    let pooled = tape.global_avg_pool(side)?;
    let h = tape.dense(pooled, fc1.0, fc1.1)?;
    let h = tape.relu(h);
    let z = tape.dense(h, fc2.0, fc2.1)?;
    let s = tape.sigmoid(z);
    let gated = tape.mul_channelwise(side, s)?;
    tape.add(backbone, gated)
}

/// `backbone + conv1x1(side)`.
pub fn fuse_zero_conv(tape: &mut Tape<'_>, backbone: Var, side: Var, weight: Var, bias: Var) -> Result<Var> {
    let c = tape.conv2d(side, weight, bias, 1, 0)?;
    tape.add(backbone, c)
}

/// `(1 + tanh(w)) * features`, per channel, computed as
/// `features + tanh(w) * features`.
pub fn fuse_self_weighted(tape: &mut Tape<'_>, features: Var, w: Var) -> Result<Var> {
    let scale = tape.tanh(w);
    let gated = tape.mul_channelwise(features, scale)?;
    tape.add(features, gated)
}

#[derive(Clone, Debug)]
pub enum SiteParams {
    Addition,
    WeightsGating { w: ParamId },
    SeGating { fc1: DenseLayer, fc2: DenseLayer },
    ZeroConv { conv: ConvLayer },
    SelfWeighted { w: ParamId },
}

/// A fusion point after backbone block `block`, registered as
/// `fusion.site{block}.*`.
#[derive(Clone, Debug)]
pub struct FusionSite {
    pub block: usize,
    pub channels: usize,
    pub params: SiteParams,
}

impl FusionSite {
    fn register(
        store: &mut ParamStore,
        method: FusionMethod,
        block: usize,
        channels: usize,
        se_reduction: usize,
        rng: &mut rng::Rng,
    ) -> Result<Self> {
        let name = format!("fusion.site{block}");
        let params = match method {
            FusionMethod::None => return Err(Error::invalid("method none has no fusion sites")),
            FusionMethod::Addition => SiteParams::Addition,
            FusionMethod::WeightsGating => SiteParams::WeightsGating {
                w: store.insert(format!("{name}.w"), Tensor::zeros([channels]))?,
            },
            FusionMethod::SelfWeighted => SiteParams::SelfWeighted {
                w: store.insert(format!("{name}.w"), Tensor::zeros([channels]))?,
            },
            FusionMethod::SeGating => {
                let hidden = channels / se_reduction_for(channels, se_reduction)?;
                let (w1, b1) = init_dense(hidden, channels, rng);
                let (w2, b2) = init_dense(channels, hidden, rng);
                SiteParams::SeGating {
                    fc1: DenseLayer {
                        weight: store.insert(format!("{name}.fc1.weight"), w1)?,
                        bias: store.insert(format!("{name}.fc1.bias"), b1)?,
                    },
                    fc2: DenseLayer {
                        weight: store.insert(format!("{name}.fc2.weight"), w2)?,
                        bias: store.insert(format!("{name}.fc2.bias"), b2)?,
                    },
                }
            }
            FusionMethod::ZeroConv => SiteParams::ZeroConv {
                conv: ConvLayer {
                    weight: store.insert(format!("{name}.conv.weight"), Tensor::zeros([channels, channels, 1, 1]))?,
                    bias: store.insert(format!("{name}.conv.bias"), Tensor::zeros([channels]))?,
                    stride: 1,
                    padding: 0,
                },
            },
        };
        Ok(FusionSite { block, channels, params })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, bound: &[Var], features: Var, side: Option<Var>) -> Result<Var> {
        let need_side = || side.ok_or_else(|| Error::invalid(format!("fusion site {} needs side features", self.block)));
        match &self.params {
            SiteParams::Addition => fuse_addition(tape, features, need_side()?),
            SiteParams::WeightsGating { w } => fuse_weights_gating(tape, features, need_side()?, bound[w.index()]),
            SiteParams::SeGating { fc1, fc2 } => fuse_se_gating(
                tape,
                features,
                need_side()?,
                (bound[fc1.weight.index()], bound[fc1.bias.index()]),
                (bound[fc2.weight.index()], bound[fc2.bias.index()]),
            ),
            SiteParams::ZeroConv { conv } => fuse_zero_conv(
                tape,
                features,
                need_side()?,
                bound[conv.weight.index()],
                bound[conv.bias.index()],
            ),
            SiteParams::SelfWeighted { w } => fuse_self_weighted(tape, features, bound[w.index()]),
        }
    }

    pub fn gate(&self) -> Option<ParamId> {
        match self.params {
            SiteParams::WeightsGating { w } | SiteParams::SelfWeighted { w } => Some(w),
            _ => None,
        }
    }
}

/// Frozen-extractor activations precomputed for one frame. Frozen parameters
/// never change, so these are bit-identical to recomputing them inline.
#[derive(Clone, Debug, Default)]
pub struct FrameFeatures {
    /// Output of the first `backbone_depth` backbone blocks.
    backbone: Option<(usize, Tensor)>,
    /// Side taps by block index.
    side: Vec<Option<Tensor>>,
}

impl FrameFeatures {
    pub fn is_empty(&self) -> bool {
        self.backbone.is_none() && self.side.iter().all(Option::is_none)
    }
}

/// The fine-tuned model: backbone, optional side extractor, fusion sites,
/// and detection head in a single parameter store.
pub struct Detector {
    pub store: ParamStore,
    pub spec: BackboneSpec,
    pub backbone: Extractor,
    pub side: Option<Extractor>,
    pub sites: Vec<FusionSite>,
    pub head: Head,
    pub config: FusionConfig,
}

/// Initializes every group from its own seed stream, so e.g. the head is
/// identical across fusion methods for one seed.
pub fn assemble(
    spec: &BackboneSpec,
    backbone_ckpt: Option<&Checkpoint>,
    side_ckpt: Option<&Checkpoint>,
    fusion: &FusionConfig,
    freeze: FreezePlan,
    seed: u64,
) -> Result<Detector> {
    fusion.validate()?;
    let mut store = ParamStore::new();
    let backbone = Extractor::register(
        &mut store,
        "backbone",
        spec,
        &mut rng::stream(seed, &[rng::label("backbone-init")]),
    )?;
    if let Some(ckpt) = backbone_ckpt {
        store.load(ckpt, "backbone", "backbone")?;
    }
    let side = if fusion.method.uses_side() {
        let ckpt = side_ckpt.ok_or_else(|| {
            Error::invalid(format!(
                "fusion method {} needs a pretrained side checkpoint (run `sideload pretrain` first)",
                fusion.method
            ))
        })?;
        let ex = Extractor::register(&mut store, "side", spec, &mut rng::stream(seed, &[rng::label("side-init")]))?;
        store.load(ckpt, "side", "side")?;
        Some(ex)
    } else {
        None
    };
    let mut frng = rng::stream(seed, &[rng::label("fusion-init")]);
    let sites = fusion
        .site_blocks(spec.num_blocks())
        .into_iter()
        .map(|b| {
            FusionSite::register(
                &mut store,
                fusion.method,
                b,
                spec.block_channels[b],
                fusion.se_reduction,
                &mut frng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let head = Head::register(&mut store, spec.out_channels(), &mut rng::stream(seed, &[rng::label("head-init")]))?;
    let plan = FreezePlan {
        freeze_backbone: freeze.freeze_backbone,
        freeze_side: freeze.freeze_side && side.is_some(),
    };
    apply_freeze(&mut store, plan)?;
    Ok(Detector {
        store,
        spec: spec.clone(),
        backbone,
        side,
        sites,
        head,
        config: *fusion,
    })
}

fn is_frozen(store: &ParamStore, ex: &Extractor) -> bool {
    ex.param_ids().all(|id| store.get(id).frozen)
}

impl Detector {
    pub fn site_count(&self) -> usize {
        self.sites.len()
    }

    fn site_at(&self, block: usize) -> Option<&FusionSite> {
        self.sites.iter().find(|s| s.block == block)
    }

    /// Number of leading backbone blocks whose output can be cached.
    fn cacheable_depth(&self) -> usize {
        if !is_frozen(&self.store, &self.backbone) {
            return 0;
        }
        match self.sites.first() {
            Some(s) => s.block + 1,
            None => self.backbone.num_blocks(),
        }
    }

    fn side_frozen(&self) -> bool {
        self.side.as_ref().is_some_and(|s| is_frozen(&self.store, s))
    }

    /// Computes the activations of frozen extractors for `image`.
    pub fn precompute(&self, image: &Tensor) -> Result<FrameFeatures> {
        check_image(image)?;
        let mut feats = FrameFeatures::default();
        let depth = self.cacheable_depth();
        let mut tape = Tape::new();
        let bound = bind_frozen(&self.store, &mut tape);
        let x0 = tape.borrowed(image, false);
        if depth > 0 {
            let mut x = tape.constant(standardize(image));
            for i in 0..depth {
                x = self.backbone.block(&mut tape, &bound, i, x)?;
            }
            feats.backbone = Some((depth, tape.value(x).clone()));
        }
        if let (true, Some(side)) = (self.side_frozen(), &self.side) {
            let taps = side.forward(&mut tape, &bound, x0)?;
            feats.side = taps
                .iter()
                .enumerate()
                .map(|(i, v)| self.site_at(i).map(|_| tape.value(*v).clone()))
                .collect();
        }
        Ok(feats)
    }

    /// Head output `[5, 4, 4]` for `image`, using cached activations in
    /// `feats` where present.
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        bound: &[Var],
        image: &'a Tensor,
        feats: &'a FrameFeatures,
    ) -> Result<Var> {
        check_image(image)?;
        let x0 = tape.borrowed(image, false);
        let side_taps: Vec<Option<Var>> = match &self.side {
            Some(side) if feats.side.is_empty() => side.forward(tape, bound, x0)?.into_iter().map(Some).collect(),
            Some(_) => feats.side.iter().map(|t| t.as_ref().map(|t| tape.borrowed(t, false))).collect(),
            None => Vec::new(),
        };
        let (start, mut x) = match &feats.backbone {
            Some((depth, t)) => (*depth, tape.borrowed(t, false)),
            None => (0, tape.constant(standardize(image))),
        };
        for i in 0..self.backbone.num_blocks() {
            if i >= start {
                x = self.backbone.block(tape, bound, i, x)?;
            }
            if let Some(site) = self.site_at(i) {
                x = site.forward(tape, bound, x, side_taps.get(i).copied().flatten())?;
            }
        }
        self.head.forward(tape, bound, x)
    }

    pub fn predict(&self, image: &Tensor, feats: &FrameFeatures) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = bind_frozen(&self.store, &mut tape);
        let out = self.forward(&mut tape, &bound, image, feats)?;
        Ok(tape.value(out).clone())
    }

    pub fn detect(&self, image: &Tensor, feats: &FrameFeatures, conf_threshold: f32, nms_iou: f32) -> Result<Vec<DetBox>> {
        detect::decode(&self.predict(image, feats)?, conf_threshold, nms_iou)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.store.checkpoint(None)
    }

    /// Restores every parameter from a full detector checkpoint.
    pub fn load_all(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for group in ["backbone", "side", "fusion", "head"] {
            if self.store.iter().any(|(_, p)| p.name.starts_with(&format!("{group}."))) {
                self.store.load(ckpt, group, group)?;
            }
        }
        Ok(())
    }
}
