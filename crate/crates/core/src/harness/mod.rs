//! Experiment orchestration: upstream and side pretraining stages, seeded
//! fine-tuning with best-validation selection, and CSV emission.

mod report;
mod sweep;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use report::{population_std, Aggregate, RunReport, SeedFailure, SeedResult};
pub use sweep::{cross_validate, matrix_cells, matrix_dir, run_matrix, MatrixReport};

use crate::backbone::{upstream_pretrain, BackboneSpec, FreezePlan, UpstreamConfig};
use crate::contrastive::{pretrain_side, PretrainConfig};
use crate::detect::{detection_loss, evaluate, DetBox, EvalMetrics};
use crate::error::{Error, Result};
use crate::fusion::{assemble, Detector, FrameFeatures, FusionConfig, FusionMethod};
use crate::io::write_atomic;
use crate::rng;
use crate::synthdata::{self, Corpus, CorpusOptions, FrameRef, GtBox, Protocol, SplitPlan};
use crate::tensor::{Checkpoint, OptimizerKind, Tape, Tensor, Var};
use crate::train::{batch_grads, check_finite, SampleLoss, StepPos};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Upstream-initialized detector, every parameter trained.
    BaselineFull,
    /// Backbone initialized from the contrastive checkpoint and frozen.
    ClPretrainedFrozen,
    /// Upstream backbone frozen, no side extractor.
    FrozenBackbone,
    /// Upstream backbone and contrastive side extractor frozen; fusion trained.
    Sideload,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::BaselineFull => "baseline_full",
            Mode::ClPretrainedFrozen => "cl_pretrained_frozen",
            Mode::FrozenBackbone => "frozen_backbone",
            Mode::Sideload => "sideload",
        }
    }

    pub fn freeze_plan(self) -> FreezePlan {
        FreezePlan {
            freeze_backbone: self != Mode::BaselineFull,
            freeze_side: self == Mode::Sideload,
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f32,
    /// Detections below this confidence are dropped before matching.
    pub conf_threshold: f32,
    pub nms_iou: f32,
    /// Operating point for precision, recall and F-measure.
    pub prf_conf: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            conf_threshold: 0.01,
            nms_iou: 0.5,
            prf_conf: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Corpus directory written by `dataset gen`; generated in memory from
    /// `corpus_seed` and `corpus` when absent.
    pub corpus: Option<PathBuf>,
    /// Cache for upstream and side checkpoints.
    pub checkpoints: PathBuf,
    pub outputs: PathBuf,
    pub upstream_checkpoint: Option<PathBuf>,
    pub side_checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: None,
            checkpoints: "checkpoints".into(),
            outputs: "outputs".into(),
            upstream_checkpoint: None,
            side_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Output subdirectory; derived from mode and fusion when absent.
    pub run_id: Option<String>,
    pub mode: Mode,
    pub fusion: FusionConfig,
    pub protocol: Protocol,
    /// Each seed sets both the initialization of trained parts and the
    /// training-data order.
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub optimizer: OptimizerKind,
    pub backbone: BackboneSpec,
    pub corpus_seed: u64,
    pub corpus: CorpusOptions,
    pub proxy_frames: usize,
    pub upstream: UpstreamConfig,
    pub pretrain: PretrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: None,
            mode: Mode::Sideload,
            fusion: FusionConfig::new(FusionMethod::SeGating, Default::default()),
            protocol: Protocol::VideoLevel,
            seeds: vec![1, 2, 3],
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            backbone: BackboneSpec::default(),
            corpus_seed: 0,
            corpus: CorpusOptions::default(),
            proxy_frames: 2048,
            upstream: UpstreamConfig::default(),
            pretrain: PretrainConfig::default(),
            eval: EvalConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile {
                path: path.to_path_buf(),
                hint: "pass a JSON run configuration".into(),
            },
            _ => Error::Io(e),
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        match self.mode {
            Mode::Sideload if !self.fusion.method.uses_side() => {
                return Err(Error::invalid(format!(
                    "sideload mode needs a side-using fusion method, got {}",
                    self.fusion.method
                )))
            }
            Mode::Sideload => {}
            _ if self.fusion.method.uses_side() => {
                return Err(Error::invalid(format!(
                    "fusion {} is only available in sideload mode (mode is {})",
                    self.fusion.method, self.mode
                )))
            }
            _ => {}
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| match self.fusion.method {
            FusionMethod::None => self.mode.as_str().to_string(),
            m => format!("{}_{}_{}", self.mode, m, self.fusion.granularity),
        })
    }

    pub fn needs_side(&self) -> bool {
        matches!(self.mode, Mode::Sideload | Mode::ClPretrainedFrozen)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths.outputs.join(self.run_id())
    }
}

/// Inputs shared by every run over one corpus: data and the two frozen
/// feature sources.
pub struct Prepared {
    pub corpus: Corpus,
    pub upstream: Checkpoint,
    /// Contrastively trained extractor, named `side.*`.
    pub side: Option<Checkpoint>,
}

fn config_key<T: Serialize>(parts: &T) -> Result<String> {
    Ok(format!("{:016x}", rng::label(&serde_json::to_string(parts)?)))
}

fn read_checkpoint(path: &Path, hint: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile {
            path: path.to_path_buf(),
            hint: hint.into(),
        });
    }
    Checkpoint::load(path)
}

/// Copy of `ckpt` restricted to `from.*`, renamed to `to.*`.
pub fn rename_prefix(ckpt: &Checkpoint, from: &str, to: &str) -> Checkpoint {
    let mut out = Checkpoint::new();
    for (name, t) in ckpt.iter() {
        if let Some(rest) = name.strip_prefix(from).and_then(|r| r.strip_prefix('.')) {
            out.insert(format!("{to}.{rest}"), t.clone());
        }
    }
    out
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.paths.corpus {
        Some(dir) => synthdata::read_corpus(dir),
        None => synthdata::corpus_with(cfg.corpus_seed, &cfg.corpus),
    }
}

fn upstream_path(cfg: &RunConfig) -> Result<PathBuf> {
    Ok(match &cfg.paths.upstream_checkpoint {
        Some(p) => p.clone(),
        None => {
            let key = config_key(&(&cfg.backbone, cfg.proxy_frames, &cfg.upstream))?;
            cfg.paths.checkpoints.join(format!("upstream-{key}.ntb1"))
        }
    })
}

/// Loads the upstream checkpoint, training and caching it first if needed.
pub fn upstream_stage(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = upstream_path(cfg)?;
    if path.exists() {
        return Checkpoint::load(&path);
    }
    if cfg.paths.upstream_checkpoint.is_some() {
        return read_checkpoint(&path, "run `sideload upstream` to create it");
    }
    info!("upstream pretraining -> {}", path.display());
    let data = synthdata::proxy_dataset(cfg.proxy_frames, cfg.upstream.seed);
    let out = upstream_pretrain(&cfg.backbone, &data, &cfg.upstream)?;
    out.checkpoint.save(&path)?;
    Ok(out.checkpoint)
}

fn side_path(cfg: &RunConfig, corpus: &Corpus) -> Result<PathBuf> {
    let up = upstream_path(cfg)?;
    let key = config_key(&(
        &cfg.backbone,
        corpus.seed,
        &corpus.options,
        &cfg.pretrain,
        up.file_name().map(|s| s.to_string_lossy().into_owned()),
    ))?;
    Ok(cfg.paths.checkpoints.join(format!("side-{key}.ntb1")))
}

/// Loads the side checkpoint named in the config, or trains one from the
/// upstream weights on the unannotated pool (cached by configuration).
pub fn side_stage(cfg: &RunConfig, corpus: &Corpus, upstream: &Checkpoint) -> Result<Checkpoint> {
    if let Some(p) = &cfg.paths.side_checkpoint {
        let ck = read_checkpoint(p, "the side checkpoint is missing; run `sideload pretrain` first")?;
        return Ok(if ck.names().any(|n| n.starts_with("side.")) {
            ck
        } else {
            rename_prefix(&ck, "backbone", "side")
        });
    }
    let path = side_path(cfg, corpus)?;
    if path.exists() {
        return Checkpoint::load(&path);
    }
    train_side(cfg, corpus, upstream, &path)
}

/// Contrastive pretraining from the upstream weights; saves the extractor
/// to `path` and the step log next to it.
pub fn train_side(cfg: &RunConfig, corpus: &Corpus, upstream: &Checkpoint, path: &Path) -> Result<Checkpoint> {
    info!("side pretraining -> {}", path.display());
    let out = pretrain_side(&corpus.unannotated, &cfg.backbone, &cfg.pretrain, Some(upstream))?;
    out.checkpoint.save(path)?;
    out.write_log(&path.with_extension("log.csv"), &cfg.pretrain)?;
    Ok(out.checkpoint)
}

/// Where `sideload pretrain` writes: the configured side checkpoint, or the
/// configuration-keyed cache entry.
pub fn side_output_path(cfg: &RunConfig, corpus: &Corpus) -> Result<PathBuf> {
    match &cfg.paths.side_checkpoint {
        Some(p) => Ok(p.clone()),
        None => side_path(cfg, corpus),
    }
}

pub fn upstream_output_path(cfg: &RunConfig) -> Result<PathBuf> {
    upstream_path(cfg)
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let corpus = load_corpus(cfg)?;
    let upstream = upstream_stage(cfg)?;
    let side = if cfg.needs_side() {
        Some(side_stage(cfg, &corpus, &upstream)?)
    } else {
        None
    };
    Ok(Prepared { corpus, upstream, side })
}

/// Builds the detector for `cfg.mode` with trainable parts seeded by `seed`.
pub fn build_detector(cfg: &RunConfig, prep: &Prepared, seed: u64) -> Result<Detector> {
    let missing_side = || Error::invalid("this mode needs a side checkpoint (run `sideload pretrain` first)");
    match cfg.mode {
        Mode::ClPretrainedFrozen => {
            let cl = rename_prefix(prep.side.as_ref().ok_or_else(missing_side)?, "side", "backbone");
            assemble(&cfg.backbone, Some(&cl), None, &cfg.fusion, cfg.mode.freeze_plan(), seed)
        }
        Mode::Sideload => assemble(
            &cfg.backbone,
            Some(&prep.upstream),
            Some(prep.side.as_ref().ok_or_else(missing_side)?),
            &cfg.fusion,
            cfg.mode.freeze_plan(),
            seed,
        ),
        Mode::BaselineFull | Mode::FrozenBackbone => assemble(
            &cfg.backbone,
            Some(&prep.upstream),
            None,
            &cfg.fusion,
            cfg.mode.freeze_plan(),
            seed,
        ),
    }
}

/// Every frozen parameter must still equal the checkpoint it was loaded from.
pub fn audit_freeze(det: &Detector, upstream: &Checkpoint, side: Option<&Checkpoint>, mode: Mode) -> Result<()> {
    for (_, p) in det.store.iter().filter(|(_, p)| p.frozen) {
        let source = match (p.name.split('.').next(), mode) {
            (Some("backbone"), Mode::ClPretrainedFrozen) => {
                side.and_then(|s| s.get(&p.name.replacen("backbone.", "side.", 1)))
            }
            (Some("backbone"), _) => upstream.get(&p.name),
            (Some("side"), _) => side.and_then(|s| s.get(&p.name)),
            _ => None,
        };
        let source = source.ok_or_else(|| Error::Checkpoint(format!("frozen `{}` has no source tensor", p.name)))?;
        if !source.bit_eq(&p.tensor) {
            return Err(Error::Checkpoint(format!("frozen parameter `{}` changed during fine-tuning", p.name)));
        }
    }
    Ok(())
}

struct Sample<'c> {
    image: &'c Tensor,
    feats: &'c FrameFeatures,
    boxes: &'c [GtBox],
}

struct FinetuneLoss<'d> {
    det: &'d Detector,
}

impl<'c> SampleLoss<Sample<'c>> for FinetuneLoss<'_> {
    fn loss<'a>(&self, tape: &mut Tape<'a>, params: &[Var], s: &'a Sample<'c>) -> Result<Var> {
        let out = self.det.forward(tape, params, s.image, s.feats)?;
        detection_loss(tape, out, s.boxes)
    }
}

type FeatureCache = BTreeMap<FrameRef, FrameFeatures>;

fn precompute_all(det: &Detector, corpus: &Corpus, plan: &SplitPlan) -> Result<FeatureCache> {
    let mut refs: Vec<FrameRef> = plan.train.iter().chain(&plan.val).chain(&plan.test).copied().collect();
    refs.sort();
    refs.dedup();
    let feats: Vec<FrameFeatures> = refs
        .par_iter()
        .map(|r| det.precompute(corpus.image(*r)))
        .collect::<Result<_>>()?;
    Ok(refs.into_iter().zip(feats).collect())
}

/// Detections for `refs` and the metrics against their ground truth.
pub fn evaluate_frames(
    det: &Detector,
    corpus: &Corpus,
    refs: &[FrameRef],
    cache: Option<&FeatureCache>,
    eval: &EvalConfig,
) -> Result<(EvalMetrics, Vec<Vec<DetBox>>)> {
    let empty = FrameFeatures::default();
    let dets: Vec<Vec<DetBox>> = refs
        .par_iter()
        .map(|r| {
            let feats = cache.and_then(|c| c.get(r)).unwrap_or(&empty);
            det.detect(corpus.image(*r), feats, eval.conf_threshold, eval.nms_iou)
        })
        .collect::<Result<_>>()?;
    let gts: Vec<Vec<GtBox>> = refs.iter().map(|r| corpus.boxes(*r).to_vec()).collect();
    let m = evaluate(&dets, &gts, eval.iou_threshold, eval.prf_conf)?;
    Ok((m, dets))
}

/// Per-run training logs, appended to by every seed in order.
#[derive(Default)]
pub(crate) struct Logs {
    /// `seed,epoch,step,frames`
    pub batches: Vec<Vec<String>>,
    /// `seed,epoch,step,loss`
    pub losses: Vec<Vec<String>>,
}

fn train_seed(
    cfg: &RunConfig,
    prep: &Prepared,
    plan: &SplitPlan,
    seed: u64,
    logs: &mut Logs,
) -> Result<(SeedResult, Checkpoint)> {
    let corpus = &prep.corpus;
    let mut det = build_detector(cfg, prep, seed)?;
    let cache = precompute_all(&det, corpus, plan)?;
    let samples: Vec<Sample<'_>> = plan
        .train
        .iter()
        .map(|r| Sample {
            image: corpus.image(*r),
            feats: &cache[r],
            boxes: corpus.boxes(*r),
        })
        .collect();
    if samples.is_empty() {
        return Err(Error::Dataset(format!("split {} has no training frames", plan.name)));
    }
    let mut opt = cfg.optimizer.build(&det.store, cfg.learning_rate);
    let (val0, _) = evaluate_frames(&det, corpus, &plan.val, Some(&cache), &cfg.eval)?;
    let mut val_curve = vec![val0.map50];
    let mut best = (val0.map50, 0usize, det.checkpoint());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(seed, &[rng::label("finetune-order"), epoch as u64]));
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample<'_>> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, grads) = batch_grads(&det.store, &batch, &FinetuneLoss { det: &det })?;
            check_finite(loss, &grads, StepPos { epoch, step }, "fine-tuning")?;
            opt.step(&mut det.store, &grads)?;
            let frames: Vec<String> = chunk.iter().map(|&i| corpus.frame_id(plan.train[i])).collect();
            logs.batches.push(vec![seed.to_string(), epoch.to_string(), step.to_string(), frames.join(" ")]);
            logs.losses.push(vec![
                seed.to_string(),
                epoch.to_string(),
                step.to_string(),
                crate::io::fmt_f(f64::from(loss)),
            ]);
        }
        let (val, _) = evaluate_frames(&det, corpus, &plan.val, Some(&cache), &cfg.eval)?;
        val_curve.push(val.map50);
        if val.map50 > best.0 {
            best = (val.map50, epoch, det.checkpoint());
        }
        info!("{} seed {seed} epoch {epoch}: val mAP50 {:.4}", cfg.run_id(), val.map50);
    }
    audit_freeze(&det, &prep.upstream, prep.side.as_ref(), cfg.mode)?;
    let (_, best_epoch, best_ckpt) = best;
    det.load_all(&best_ckpt)?;
    let (val, _) = evaluate_frames(&det, corpus, &plan.val, Some(&cache), &cfg.eval)?;
    let (test, _) = evaluate_frames(&det, corpus, &plan.test, Some(&cache), &cfg.eval)?;
    Ok((
        SeedResult {
            seed,
            plan: plan.name.clone(),
            best_epoch,
            val,
            test,
            val_curve,
            checkpoint: PathBuf::new(),
        },
        best_ckpt,
    ))
}

/// Model description stored next to each saved checkpoint so `eval` can
/// rebuild the detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCard {
    pub mode: Mode,
    pub fusion: FusionConfig,
    pub backbone: BackboneSpec,
    pub protocol: Protocol,
    pub plan: String,
    pub corpus_seed: u64,
    pub corpus: CorpusOptions,
    pub corpus_path: Option<PathBuf>,
    pub eval: EvalConfig,
}

pub fn card_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

/// Rebuilds a fine-tuned detector from a saved checkpoint and its card.
pub fn load_model(ckpt_path: &Path) -> Result<(Detector, ModelCard)> {
    let ckpt = read_checkpoint(ckpt_path, "expected a checkpoint written by `sideload finetune`")?;
    let card_file = card_path(ckpt_path);
    let card: ModelCard = serde_json::from_slice(&std::fs::read(&card_file).map_err(|_| Error::MissingFile {
        path: card_file.clone(),
        hint: "model card written next to the checkpoint".into(),
    })?)?;
    let side = card.fusion.method.uses_side().then_some(&ckpt);
    let mut det = assemble(&card.backbone, Some(&ckpt), side, &card.fusion, card.mode.freeze_plan(), 0)?;
    det.load_all(&ckpt)?;
    Ok((det, card))
}

/// Fine-tunes and evaluates every seed on the single plan of
/// `cfg.protocol`, writing metrics, logs and best-validation checkpoints.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    run_prepared(cfg, &prep)
}

pub fn run_prepared(cfg: &RunConfig, prep: &Prepared) -> Result<RunReport> {
    let plans = synthdata::make_split(&prep.corpus, cfg.protocol)?;
    if plans.len() != 1 {
        return Err(Error::invalid(format!(
            "protocol {} has {} splits; use `crossval`",
            cfg.protocol,
            plans.len()
        )));
    }
    run_plan(cfg, prep, &plans[0], &cfg.output_dir())
}

pub(crate) fn run_plan(cfg: &RunConfig, prep: &Prepared, plan: &SplitPlan, out_dir: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let mut report = RunReport::new(cfg, &plan.name);
    let mut logs = Logs::default();
    for &seed in &cfg.seeds {
        match train_seed(cfg, prep, plan, seed, &mut logs) {
            Ok((mut result, ckpt)) => {
                let path = out_dir.join("models").join(format!("{}_seed{seed}.ntb1", plan.name));
                ckpt.save(&path)?;
                let card = ModelCard {
                    mode: cfg.mode,
                    fusion: cfg.fusion,
                    backbone: cfg.backbone.clone(),
                    protocol: cfg.protocol,
                    plan: plan.name.clone(),
                    corpus_seed: prep.corpus.seed,
                    corpus: prep.corpus.options.clone(),
                    corpus_path: cfg.paths.corpus.clone(),
                    eval: cfg.eval.clone(),
                };
                write_atomic(&card_path(&path), serde_json::to_string_pretty(&card)?.as_bytes())?;
                result.checkpoint = path;
                report.seeds.push(result);
            }
            Err(Error::NonFinite { context }) => {
                warn!("{} seed {seed} aborted: non-finite {context}", report.run_id);
                report.failures.push(SeedFailure {
                    seed,
                    plan: plan.name.clone(),
                    reason: format!("non-finite {context}"),
                });
            }
            Err(e) => return Err(e),
        }
    }
    report.write(out_dir, cfg, &logs)?;
    Ok(report)
}
