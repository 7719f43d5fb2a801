//! Contrastive pretraining of the side extractor on unannotated frames:
//! augmented view pairs, the margin contrastive loss and NT-Xent, and a
//! projection head that is discarded after training.

use std::fmt;
use std::path::Path;

use log::info;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, DenseLayer, Extractor, INPUT_SIZE};
use crate::error::{Error, Result};
use crate::io::{fmt_f, write_csv};
use crate::rng::{self, Rng};
use crate::synthdata::{render::blur_planar, SynthVideo};
use crate::tensor::{Checkpoint, Function, OptimizerKind, ParamGrads, ParamStore, Tape, Tensor, Var};
use crate::train::{check_finite, StepPos};

pub const EMBED_DIM: usize = 32;
const PROJ_HIDDEN: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationParams {
    pub crop_scale: (f32, f32),
    pub flip_prob: f32,
    pub max_rotation_deg: f32,
    /// Brightness, contrast and saturation factors drawn from [1-s, 1+s].
    pub jitter: f32,
    pub blur_sigma: (f32, f32),
    pub blur_prob: f32,
}

impl Default for AugmentationParams {
    fn default() -> Self {
        AugmentationParams {
            crop_scale: (0.6, 1.0),
            flip_prob: 0.5,
            max_rotation_deg: 15.0,
            jitter: 0.4,
            blur_sigma: (0.1, 1.5),
            blur_prob: 0.5,
        }
    }
}

fn bilinear(plane: &[f32], n: usize, x: f32, y: f32) -> f32 {
    let max = (n - 1) as f32;
    let (x, y) = (x.clamp(0.0, max), y.clamp(0.0, max));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(n - 1), (y0 + 1).min(n - 1));
    let (tx, ty) = (x - x0 as f32, y - y0 as f32);
    let top = plane[y0 * n + x0] * (1.0 - tx) + plane[y0 * n + x1] * tx;
    let bottom = plane[y1 * n + x0] * (1.0 - tx) + plane[y1 * n + x1] * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Random resized crop, horizontal flip, rotation, colour jitter, and blur.
/// Output keeps the input shape with values clamped to [0, 1].
pub fn augment(image: &Tensor, p: &AugmentationParams, rng: &mut Rng) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if c != 3 || h != w {
        return Err(Error::shape("augment", &[3, INPUT_SIZE, INPUT_SIZE], image.shape()));
    }
    let n = h;
    let nf = n as f32;
    let scale = rng.gen_range(p.crop_scale.0..=p.crop_scale.1);
    let side = scale.sqrt() * nf;
    let ox = rng.gen_range(0.0..=(nf - side));
    let oy = rng.gen_range(0.0..=(nf - side));
    let flip = rng.gen::<f32>() < p.flip_prob;
    let theta = rng.gen_range(-p.max_rotation_deg..=p.max_rotation_deg).to_radians();
    let (sin, cos) = theta.sin_cos();
    let brightness = rng.gen_range(1.0 - p.jitter..=1.0 + p.jitter);
    let contrast = rng.gen_range(1.0 - p.jitter..=1.0 + p.jitter);
    let saturation = rng.gen_range(1.0 - p.jitter..=1.0 + p.jitter);
    let blur = (rng.gen::<f32>() < p.blur_prob).then(|| rng.gen_range(p.blur_sigma.0..=p.blur_sigma.1));

    // Inverse map each output pixel: unrotate about the centre, unflip,
    // then scale into the crop window.
    let src = image.data();
    let mut out = vec![0.0f32; 3 * n * n];
    let half = nf / 2.0;
    let k = side / nf;
    for y in 0..n {
        for x in 0..n {
            let (u, v) = (x as f32 + 0.5 - half, y as f32 + 0.5 - half);
            let (mut u, v) = (cos * u + sin * v, -sin * u + cos * v);
            if flip {
                u = -u;
            }
            let sx = ox + (u + half) * k - 0.5;
            let sy = oy + (v + half) * k - 0.5;
            for ch in 0..3 {
                out[ch * n * n + y * n + x] = bilinear(&src[ch * n * n..(ch + 1) * n * n], n, sx, sy);
            }
        }
    }

    let plane = n * n;
    for v in out.iter_mut() {
        *v *= brightness;
    }
    let mean = out.iter().sum::<f32>() / out.len() as f32;
    for v in out.iter_mut() {
        *v = mean + contrast * (*v - mean);
    }
    for i in 0..plane {
        let gray = (out[i] + out[plane + i] + out[2 * plane + i]) / 3.0;
        for ch in 0..3 {
            let v = &mut out[ch * plane + i];
            *v = gray + saturation * (*v - gray);
        }
    }
    if let Some(sigma) = blur {
        blur_planar(&mut out, n, sigma);
    }
    for v in out.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// How similar (`y = 0`) and dissimilar (`y = 1`) pairs are mixed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMix {
    /// Exactly half of each kind.
    #[default]
    Balanced,
    /// Each pair's kind drawn independently with probability 1/2.
    Random,
    /// Only similar pairs (the layout NT-Xent expects).
    AllSimilar,
}

/// Frame index into the unannotated pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Source {
    pub video: usize,
    pub frame: usize,
}

#[derive(Clone, Debug)]
pub struct PairBatch {
    pub views_a: Vec<Tensor>,
    pub views_b: Vec<Tensor>,
    /// 0 = similar, 1 = dissimilar.
    pub labels: Vec<u8>,
    pub sources_a: Vec<Source>,
    pub sources_b: Vec<Source>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Samples `n_pairs` pairs. A similar pair is two augmentations of one
/// frame; a dissimilar pair augments frames from two different videos.
pub fn make_pairs(
    pool: &[SynthVideo],
    n_pairs: usize,
    mix: PairMix,
    aug: &AugmentationParams,
    seed: u64,
) -> Result<PairBatch> {
    if pool.iter().any(|v| v.frames.is_empty()) || pool.is_empty() {
        return Err(Error::invalid("pair pool must hold videos with at least one frame"));
    }
    if mix == PairMix::Balanced && n_pairs % 2 == 1 {
        return Err(Error::invalid(format!("balanced pairs need an even count, got {n_pairs}")));
    }
    if mix != PairMix::AllSimilar && n_pairs > 0 && pool.len() < 2 {
        return Err(Error::invalid("dissimilar pairs need at least two videos in the pool"));
    }
    let mut labels: Vec<u8> = match mix {
        PairMix::Balanced => (0..n_pairs).map(|i| u8::from(i >= n_pairs / 2)).collect(),
        PairMix::AllSimilar => vec![0; n_pairs],
        PairMix::Random => {
            let mut r = rng::stream(seed, &[rng::label("pair-kinds")]);
            (0..n_pairs).map(|_| u8::from(r.gen_bool(0.5))).collect()
        }
    };
    if mix == PairMix::Balanced {
        use rand::seq::SliceRandom;
        labels.shuffle(&mut rng::stream(seed, &[rng::label("pair-order")]));
    }
    let pairs: Vec<(Tensor, Tensor, Source, Source)> = labels
        .par_iter()
        .enumerate()
        .map(|(i, &y)| {
            let mut r = rng::stream(seed, &[rng::label("pair"), i as u64]);
            let va = r.gen_range(0..pool.len());
            let a = Source {
                video: va,
                frame: r.gen_range(0..pool[va].frames.len()),
            };
            let b = if y == 0 {
                a
            } else {
                let mut vb = r.gen_range(0..pool.len() - 1);
                if vb >= va {
                    vb += 1;
                }
                Source {
                    video: vb,
                    frame: r.gen_range(0..pool[vb].frames.len()),
                }
            };
            let view_a = augment(&pool[a.video].frames[a.frame].image, aug, &mut r)?;
            let view_b = augment(&pool[b.video].frames[b.frame].image, aug, &mut r)?;
            Ok((view_a, view_b, a, b))
        })
        .collect::<Result<_>>()?;
    let mut batch = PairBatch {
        views_a: Vec::with_capacity(n_pairs),
        views_b: Vec::with_capacity(n_pairs),
        labels,
        sources_a: Vec::with_capacity(n_pairs),
        sources_b: Vec::with_capacity(n_pairs),
    };
    for (a, b, sa, sb) in pairs {
        batch.views_a.push(a);
        batch.views_b.push(b);
        batch.sources_a.push(sa);
        batch.sources_b.push(sb);
    }
    Ok(batch)
}

fn rows(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::invalid(format!("expected an [N, D] embedding matrix, got {s:?}"))),
    }
}

/// `(1/N) sum[(1-y) d^2 + y max(0, margin - d)^2]` over rows of `[N, D]`
/// embedding matrices, `d` the Euclidean row distance. At `d = 0` on a
/// dissimilar pair the direction is undefined and the subgradient 0 is used.
pub struct ContrastiveLoss {
    pub labels: Vec<u8>,
    pub margin: f32,
}

impl ContrastiveLoss {
    fn check(&self, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
        let (n, d) = rows(a)?;
        if a.shape() != b.shape() {
            return Err(Error::shape("contrastive_loss", a.shape(), b.shape()));
        }
        if n == 0 || n != self.labels.len() {
            return Err(Error::invalid(format!("{n} embedding rows vs {} labels", self.labels.len())));
        }
        if !(self.margin > 0.0) {
            return Err(Error::invalid("margin must be positive"));
        }
        Ok((n, d))
    }

    fn distances(a: &Tensor, b: &Tensor, n: usize, d: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                (0..d)
                    .map(|k| {
                        let diff = f64::from(a.data()[i * d + k]) - f64::from(b.data()[i * d + k]);
                        diff * diff
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

impl Function for ContrastiveLoss {
    fn name(&self) -> &'static str {
        "contrastive_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (n, d) = self.check(inputs[0], inputs[1])?;
        let m = f64::from(self.margin);
        let total: f64 = Self::distances(inputs[0], inputs[1], n, d)
            .iter()
            .zip(&self.labels)
            .map(|(&dist, &y)| {
                if y == 0 {
                    dist * dist
                } else {
                    (m - dist).max(0.0).powi(2)
                }
            })
            .sum();
        Ok(Tensor::scalar((total / n as f64) as f32))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (n, d) = self.check(a, b)?;
        let m = f64::from(self.margin);
        let dist = Self::distances(a, b, n, d);
        let scale = f64::from(g.item()) / n as f64;
        let mut ga = vec![0.0f32; n * d];
        for i in 0..n {
            // dL/d(a_i - b_i) = coef * (a_i - b_i)
            let coef = if self.labels[i] == 0 {
                2.0
            } else if dist[i] < m && dist[i] > 0.0 {
                -2.0 * (m - dist[i]) / dist[i]
            } else {
                0.0
            };
            for k in 0..d {
                let diff = f64::from(a.data()[i * d + k]) - f64::from(b.data()[i * d + k]);
                ga[i * d + k] = (coef * diff * scale) as f32;
            }
        }
        let gb = ga.iter().map(|v| -v).collect();
        Ok(vec![Tensor::new([n, d], ga)?, Tensor::new([n, d], gb)?])
    }
}

pub fn contrastive_loss(tape: &mut Tape<'_>, emb_a: Var, emb_b: Var, labels: &[u8], margin: f32) -> Result<Var> {
    tape.apply(
        ContrastiveLoss {
            labels: labels.to_vec(),
            margin,
        },
        &[emb_a, emb_b],
    )
}

/// Normalized temperature-scaled cross entropy over a `[2N, D]` matrix whose
/// rows `2k` and `2k+1` are positives; every other row is a negative.
pub struct NtXent {
    pub temperature: f32,
}

impl NtXent {
    fn check(&self, z: &Tensor) -> Result<(usize, usize)> {
        let (rows2, d) = rows(z)?;
        if rows2 % 2 == 1 {
            return Err(Error::invalid("NT-Xent needs an even number of rows"));
        }
        if rows2 < 4 {
            return Err(Error::invalid("NT-Xent needs at least two positive pairs"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok((rows2, d))
    }

    /// Unit rows, their norms, and the softmax over non-self similarities.
    fn parts(&self, z: &Tensor, m: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
        let mut units = Vec::with_capacity(m);
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row: Vec<f64> = z.data()[i * d..(i + 1) * d].iter().map(|&v| f64::from(v)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            units.push(row.iter().map(|v| v / norm).collect::<Vec<f64>>());
            norms.push(norm);
        }
        let t = f64::from(self.temperature);
        let probs = (0..m)
            .map(|i| {
                let logits: Vec<f64> = (0..m)
                    .map(|j| {
                        if i == j {
                            f64::NEG_INFINITY
                        } else {
                            units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum::<f64>() / t
                        }
                    })
                    .collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            })
            .collect();
        (units, norms, probs)
    }
}

fn partner(i: usize) -> usize {
    i ^ 1
}

impl Function for NtXent {
    fn name(&self) -> &'static str {
        "ntxent_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (m, d) = self.check(inputs[0])?;
        let (_, _, probs) = self.parts(inputs[0], m, d);
        let total: f64 = (0..m).map(|i| -probs[i][partner(i)].max(f64::MIN_POSITIVE).ln()).sum();
        Ok(Tensor::scalar((total / m as f64) as f32))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Tensor>> {
        let z = inputs[0];
        let (m, d) = self.check(z)?;
        let (units, norms, probs) = self.parts(z, m, d);
        let t = f64::from(self.temperature);
        let scale = f64::from(g.item()) / m as f64;
        // Gradient with respect to the unit rows first.
        let mut gu = vec![vec![0.0f64; d]; m];
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                let target = if j == partner(i) { 1.0 } else { 0.0 };
                let ds = (probs[i][j] - target) / t * scale;
                for k in 0..d {
                    gu[i][k] += ds * units[j][k];
                    gu[j][k] += ds * units[i][k];
                }
            }
        }
        let mut gz = vec![0.0f32; m * d];
        for i in 0..m {
            let radial: f64 = gu[i].iter().zip(&units[i]).map(|(a, b)| a * b).sum();
            for k in 0..d {
                gz[i * d + k] = ((gu[i][k] - radial * units[i][k]) / norms[i]) as f32;
            }
        }
        Ok(vec![Tensor::new([m, d], gz)?])
    }
}

pub fn ntxent_loss(tape: &mut Tape<'_>, embeddings: Var, temperature: f32) -> Result<Var> {
    tape.apply(NtXent { temperature }, &[embeddings])
}

/// Global-average-pooled extractor output -> dense 64 (relu) -> dense 32.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    fc1: DenseLayer,
    fc2: DenseLayer,
}

impl ProjectionHead {
    pub fn register(store: &mut ParamStore, d_in: usize, rng: &mut Rng) -> Result<Self> {
        Ok(ProjectionHead {
            fc1: DenseLayer::register(store, "proj.fc1", d_in, PROJ_HIDDEN, rng)?,
            fc2: DenseLayer::register(store, "proj.fc2", PROJ_HIDDEN, EMBED_DIM, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, bound: &[Var], features: Var) -> Result<Var> {
        let pooled = tape.global_avg_pool(features)?;
        let h = self.fc1.forward(tape, bound, pooled)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, bound, h)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Contrastive,
    Ntxent,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Contrastive => "contrastive",
            LossKind::Ntxent => "ntxent",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub batch_pairs: usize,
    pub margin: f32,
    pub temperature: f32,
    pub learning_rate: f32,
    pub optimizer: OptimizerKind,
    pub mix: PairMix,
    pub augmentation: AugmentationParams,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            loss: LossKind::Contrastive,
            epochs: 20,
            pairs_per_epoch: 256,
            batch_pairs: 16,
            margin: 1.0,
            temperature: 0.5,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            mix: PairMix::Balanced,
            augmentation: AugmentationParams::default(),
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f32,
}

pub struct PretrainOutcome {
    /// Side extractor only (`side.*`); the projection head is dropped.
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepLog>,
    pub epoch_losses: Vec<f32>,
}

impl PretrainOutcome {
    /// `epoch,step,loss,loss_kind,seed`.
    pub fn write_log(&self, path: &Path, cfg: &PretrainConfig) -> Result<()> {
        let rows = self.steps.iter().map(|s| {
            vec![
                s.epoch.to_string(),
                s.step.to_string(),
                fmt_f(f64::from(s.loss)),
                cfg.loss.to_string(),
                cfg.seed.to_string(),
            ]
        });
        write_csv(path, &["epoch", "step", "loss", "loss_kind", "seed"], rows)
    }
}

struct SideModel {
    store: ParamStore,
    side: Extractor,
    proj: ProjectionHead,
}

/// Embeds each view on its own tape, evaluates the batch loss on the stacked
/// embeddings, then pushes each embedding's gradient back through its tape.
fn batch_loss_grads(model: &SideModel, views: &[&Tensor], loss: &dyn Function) -> Result<(f32, ParamGrads)> {
    let store = &model.store;
    let tapes: Vec<(Tape<'_>, Vec<Var>, Var)> = views
        .par_iter()
        .map(|img| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let x = tape.borrowed(img, false);
            let taps = model.side.forward(&mut tape, &bound, x)?;
            let e = model.proj.forward(&mut tape, &bound, *taps.last().expect("blocks"))?;
            Ok((tape, bound, e))
        })
        .collect::<Result<_>>()?;
    let stacked: Vec<f32> = tapes.iter().flat_map(|(t, _, e)| t.value(*e).data().to_vec()).collect();
    let z = Tensor::new([views.len(), EMBED_DIM], stacked)?;
    let value = loss.forward(&[&z])?.item();
    let upstream = loss.backward(&[&z], &Tensor::scalar(value), &Tensor::scalar(1.0))?;
    let rows = split_rows(&upstream[0]);
    let parts: Vec<ParamGrads> = tapes
        .into_par_iter()
        .zip(rows)
        .map(|((tape, bound, e), g)| {
            let mut grads = tape.backward_with(e, g)?;
            Ok(store.collect_grads(&bound, &mut grads))
        })
        .collect::<Result<_>>()?;
    let mut total = ParamGrads::empty(store.len());
    for p in &parts {
        total.accumulate(p);
    }
    Ok((value, total))
}

fn split_rows(t: &Tensor) -> Vec<Tensor> {
    let d = t.shape()[1];
    t.data()
        .chunks_exact(d)
        .map(|r| Tensor::new([d], r.to_vec()).expect("row"))
        .collect()
}

/// Adapts the two-input margin loss to a single stacked `[2N, D]` matrix
/// whose first `N` rows are the `a` views.
struct StackedContrastive(ContrastiveLoss);

impl Function for StackedContrastive {
    fn name(&self) -> &'static str {
        "contrastive_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (a, b) = halves(inputs[0])?;
        self.0.forward(&[&a, &b])
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Tensor>> {
        let (a, b) = halves(inputs[0])?;
        let parts = self.0.backward(&[&a, &b], out, g)?;
        let mut data = parts[0].data().to_vec();
        data.extend_from_slice(parts[1].data());
        Ok(vec![Tensor::new(inputs[0].shape().to_vec(), data)?])
    }
}

fn halves(z: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, d) = rows(z)?;
    let n = m / 2;
    Ok((
        Tensor::new([n, d], z.data()[..n * d].to_vec())?,
        Tensor::new([n, d], z.data()[n * d..].to_vec())?,
    ))
}

/// Trains the side extractor with a projection head on pairs drawn from
/// `pool`. Starts from `init` (a `backbone.*` or `side.*` checkpoint) when
/// given, otherwise from a seeded random initialization.
pub fn pretrain_side(
    pool: &[SynthVideo],
    spec: &BackboneSpec,
    cfg: &PretrainConfig,
    init: Option<&Checkpoint>,
) -> Result<PretrainOutcome> {
    if pool.is_empty() {
        return Err(Error::invalid("empty unannotated pool"));
    }
    if cfg.batch_pairs == 0 || cfg.pairs_per_epoch == 0 {
        return Err(Error::invalid("batch_pairs and pairs_per_epoch must be positive"));
    }
    let mut store = ParamStore::new();
    let mut r = rng::stream(cfg.seed, &[rng::label("side-pretrain-init")]);
    let side = Extractor::register(&mut store, "side", spec, &mut r)?;
    let proj = ProjectionHead::register(&mut store, spec.out_channels(), &mut r)?;
    if let Some(ckpt) = init {
        let from = if ckpt.names().any(|n| n.starts_with("side.")) { "side" } else { "backbone" };
        store.load(ckpt, from, "side")?;
    }
    let mut model = SideModel { store, side, proj };
    let mut opt = cfg.optimizer.build(&model.store, cfg.learning_rate);
    let mix = match cfg.loss {
        LossKind::Contrastive => cfg.mix,
        LossKind::Ntxent => PairMix::AllSimilar,
    };
    let mut steps = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut total, mut count) = (0.0f64, 0usize);
        let mut remaining = cfg.pairs_per_epoch;
        let mut step = 0;
        while remaining > 0 {
            let n = remaining.min(cfg.batch_pairs);
            remaining -= n;
            let batch_seed = rng::derive(cfg.seed, &[rng::label("pairs"), epoch as u64, step as u64]);
            let batch = make_pairs(pool, n, mix, &cfg.augmentation, batch_seed)?;
            let (loss, grads) = match cfg.loss {
                LossKind::Contrastive => {
                    let views: Vec<&Tensor> = batch.views_a.iter().chain(&batch.views_b).collect();
                    let f = StackedContrastive(ContrastiveLoss {
                        labels: batch.labels.clone(),
                        margin: cfg.margin,
                    });
                    batch_loss_grads(&model, &views, &f)?
                }
                LossKind::Ntxent => {
                    let views: Vec<&Tensor> = batch
                        .views_a
                        .iter()
                        .zip(&batch.views_b)
                        .flat_map(|(a, b)| [a, b])
                        .collect();
                    batch_loss_grads(&model, &views, &NtXent { temperature: cfg.temperature })?
                }
            };
            check_finite(loss, &grads, StepPos { epoch, step }, "contrastive pretraining")?;
            opt.step(&mut model.store, &grads)?;
            steps.push(StepLog { epoch, step, loss });
            total += f64::from(loss);
            count += 1;
            step += 1;
        }
        let mean = (total / count as f64) as f32;
        info!("side pretraining epoch {epoch}: {} loss {mean:.4}", cfg.loss);
        epoch_losses.push(mean);
    }
    Ok(PretrainOutcome {
        checkpoint: model.store.checkpoint(Some("side")),
        steps,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(rows: &[&[f32]]) -> Tensor {
        let d = rows[0].len();
        Tensor::new([rows.len(), d], rows.concat()).unwrap()
    }

    fn eq1(a: &Tensor, b: &Tensor, labels: &[u8], margin: f32) -> f32 {
        ContrastiveLoss {
            labels: labels.to_vec(),
            margin,
        }
        .forward(&[a, b])
        .unwrap()
        .item()
    }

    #[test]
    fn margin_loss_fixtures() {
        let z = emb(&[&[0.3, -0.2]]);
        assert_eq!(eq1(&z, &z, &[0], 1.0), 0.0);
        assert_eq!(eq1(&z, &z, &[1], 1.0), 1.0);
        assert_eq!(eq1(&emb(&[&[0.0, 0.0]]), &emb(&[&[1.5, 0.0]]), &[1], 1.0), 0.0);
        let a = emb(&[&[0.0, 0.0], &[0.0, 0.0]]);
        let b = emb(&[&[0.5, 0.0], &[0.0, 0.3]]);
        assert!((eq1(&a, &b, &[0, 1], 1.0) - 0.37).abs() < 1e-6);
        assert!(ContrastiveLoss { labels: vec![], margin: 1.0 }
            .forward(&[&Tensor::zeros([1, 2]), &Tensor::zeros([1, 2])])
            .is_err());
    }

    #[test]
    fn ntxent_needs_two_pairs() {
        assert!(NtXent { temperature: 0.5 }.forward(&[&Tensor::full([2, 3], 1.0)]).is_err());
    }

    #[test]
    fn augmentation_stays_in_range_and_is_seeded() {
        let mut r = rng::stream(1, &[]);
        let img = Tensor::from_fn([3, 64, 64], |_| r.gen());
        let p = AugmentationParams::default();
        let a = augment(&img, &p, &mut rng::stream(7, &[])).unwrap();
        let b = augment(&img, &p, &mut rng::stream(7, &[])).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(a.shape(), [3, 64, 64]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identity_augmentation_is_lossless() {
        let mut r = rng::stream(1, &[]);
        let img = Tensor::from_fn([3, 64, 64], |_| r.gen());
        let p = AugmentationParams {
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            max_rotation_deg: 0.0,
            jitter: 0.0,
            blur_sigma: (0.1, 0.1),
            blur_prob: 0.0,
        };
        let out = augment(&img, &p, &mut rng::stream(3, &[])).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-5);
    }

    fn random(shape: [usize; 2], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[]);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn margin_loss_gradients() {
        let (a, b) = (random([6, 4], 1), random([6, 4], 2));
        let labels = [0, 1, 0, 1, 1, 0];
        let rep = crate::tensor::grad_check(&[("a", a), ("b", b)], 1e-3, |tp, v| {
            contrastive_loss(tp, v[0], v[1], &labels, 2.0)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-3, "{rep:?}");
    }

    #[test]
    fn ntxent_gradients() {
        let z = random([6, 5], 3);
        let rep = crate::tensor::grad_check(&[("z", z)], 1e-3, |tp, v| ntxent_loss(tp, v[0], 0.5)).unwrap();
        assert!(rep.max_rel_error < 1e-3, "{rep:?}");
    }

    #[test]
    fn stacked_adapter_matches_two_input_form() {
        let (a, b) = (random([3, 4], 4), random([3, 4], 5));
        let labels = vec![1, 0, 1];
        let direct = eq1(&a, &b, &labels, 1.5);
        let z = Tensor::new([6, 4], [a.data(), b.data()].concat()).unwrap();
        let f = StackedContrastive(ContrastiveLoss { labels, margin: 1.5 });
        assert_eq!(f.forward(&[&z]).unwrap().item(), direct);
    }

    #[test]
    fn balanced_pairs_are_half_similar() {
        let pool: Vec<SynthVideo> = crate::synthdata::corpus_with(
            3,
            &crate::synthdata::CorpusOptions {
                annotated_frames: 1,
                pool_frames: 2,
                ..Default::default()
            },
        )
        .unwrap()
        .unannotated;
        let p = AugmentationParams::default();
        let batch = make_pairs(&pool, 8, PairMix::Balanced, &p, 9).unwrap();
        assert_eq!(batch.labels.iter().filter(|&&y| y == 1).count(), 4);
        for i in 0..8 {
            let same = batch.sources_a[i] == batch.sources_b[i];
            assert_eq!(same, batch.labels[i] == 0);
            if batch.labels[i] == 1 {
                assert_ne!(batch.sources_a[i].video, batch.sources_b[i].video);
            }
        }
        let again = make_pairs(&pool, 8, PairMix::Balanced, &p, 9).unwrap();
        assert!(batch.views_a.iter().zip(&again.views_a).all(|(x, y)| x.bit_eq(y)));
        assert!(make_pairs(&pool, 7, PairMix::Balanced, &p, 9).is_err());
        assert!(make_pairs(&pool[..1], 4, PairMix::Random, &p, 9).is_err());
        assert!(make_pairs(&pool[..1], 4, PairMix::AllSimilar, &p, 9).is_ok());
    }

    #[test]
    fn short_pretraining_emits_side_only() {
        let pool = crate::synthdata::corpus_with(
            4,
            &crate::synthdata::CorpusOptions {
                annotated_frames: 1,
                pool_frames: 4,
                ..Default::default()
            },
        )
        .unwrap()
        .unannotated;
        let spec = BackboneSpec::default();
        let cfg = PretrainConfig {
            epochs: 4,
            pairs_per_epoch: 32,
            batch_pairs: 16,
            ..Default::default()
        };
        let out = pretrain_side(&pool, &spec, &cfg, None).unwrap();
        assert!(out.checkpoint.names().all(|n| n.starts_with("side.")));
        assert!(out.epoch_losses.iter().all(|l| l.is_finite()));
        assert_eq!(out.steps.len(), 8);
    }
}
