//! Four-block convolutional feature extractor. The same layout serves as the
//! detector backbone (`backbone.*`) and as the contrastively trained side
//! extractor (`side.*`), so their feature taps line up one to one.

use log::info;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Checkpoint, Function, OptimizerKind, ParamId, ParamStore, Tape, Tensor, Var};
use crate::train::{self, StepPos};

pub const INPUT_CHANNELS: usize = 3;
pub const INPUT_SIZE: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub block_channels: Vec<usize>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            block_channels: vec![8, 16, 32, 64],
        }
    }
}

impl BackboneSpec {
    pub fn num_blocks(&self) -> usize {
        self.block_channels.len()
    }

    /// `[C, H, W]` of every block output for a 64x64 input.
    pub fn tap_shapes(&self) -> Vec<[usize; 3]> {
        let mut size = INPUT_SIZE;
        self.block_channels
            .iter()
            .map(|&c| {
                size = (size + 2 - 3) / 2 + 1;
                [c, size, size]
            })
            .collect()
    }

    pub fn out_channels(&self) -> usize {
        *self.block_channels.last().expect("non-empty spec")
    }
}

/// Convolution with its parameter handles.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

/// He-uniform weights, zero bias.
pub fn init_conv(c_out: usize, c_in: usize, k: usize, rng: &mut Rng) -> (Tensor, Tensor) {
    let fan_in = (c_in * k * k) as f32;
    let bound = (6.0 / fan_in).sqrt();
    let w = Tensor::from_fn([c_out, c_in, k, k], |_| rng.gen_range(-bound..bound));
    (w, Tensor::zeros([c_out]))
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
pub fn init_dense(d_out: usize, d_in: usize, rng: &mut Rng) -> (Tensor, Tensor) {
    let bound = 1.0 / (d_in as f32).sqrt();
    let w = Tensor::from_fn([d_out, d_in], |_| rng.gen_range(-bound..bound));
    let b = Tensor::from_fn([d_out], |_| rng.gen_range(-bound..bound));
    (w, b)
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (w, b) = init_conv(c_out, c_in, k, rng);
        Ok(ConvLayer {
            weight: store.insert(format!("{name}.weight"), w)?,
            bias: store.insert(format!("{name}.bias"), b)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, bound: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            bound[self.weight.index()],
            bound[self.bias.index()],
            self.stride,
            self.padding,
        )
    }
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseLayer {
    pub fn register(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        let (w, b) = init_dense(d_out, d_in, rng);
        Ok(DenseLayer {
            weight: store.insert(format!("{name}.weight"), w)?,
            bias: store.insert(format!("{name}.bias"), b)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, bound: &[Var], x: Var) -> Result<Var> {
        tape.dense(x, bound[self.weight.index()], bound[self.bias.index()])
    }
}

/// A backbone-shaped extractor registered under `prefix`
/// (`{prefix}.block{i}.conv{j}.{weight|bias}`).
#[derive(Clone, Debug)]
pub struct Extractor {
    pub prefix: String,
    pub spec: BackboneSpec,
    blocks: Vec<[ConvLayer; 2]>,
}

impl Extractor {
    pub fn register(store: &mut ParamStore, prefix: &str, spec: &BackboneSpec, rng: &mut Rng) -> Result<Self> {
        let mut c_in = INPUT_CHANNELS;
        let mut blocks = Vec::new();
        for (i, &c) in spec.block_channels.iter().enumerate() {
            let down = ConvLayer::register(store, &format!("{prefix}.block{i}.conv0"), c_in, c, 3, 2, 1, rng)?;
            let same = ConvLayer::register(store, &format!("{prefix}.block{i}.conv1"), c, c, 3, 1, 1, rng)?;
            blocks.push([down, same]);
            c_in = c;
        }
        Ok(Extractor {
            prefix: prefix.to_owned(),
            spec: spec.clone(),
            blocks,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Names of all parameters belonging to this extractor.
    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.blocks.iter().flatten().flat_map(|l| [l.weight, l.bias])
    }

    pub fn block(&self, tape: &mut Tape<'_>, bound: &[Var], i: usize, x: Var) -> Result<Var> {
        let [down, same] = &self.blocks[i];
        let h = down.forward(tape, bound, x)?;
        let h = tape.silu(h);
        let h = same.forward(tape, bound, h)?;
        Ok(tape.silu(h))
    }

    pub fn forward(&self, tape: &mut Tape<'_>, bound: &[Var], image: Var) -> Result<Vec<Var>> {
        check_image(tape.value(image))?;
        let mut taps = Vec::with_capacity(self.blocks.len());
        let mut x = tape.constant(standardize(tape.value(image)));
        for i in 0..self.blocks.len() {
            x = self.block(tape, bound, i, x)?;
            taps.push(x);
        }
        Ok(taps)
    }

    /// Forward pass outside any training graph.
    pub fn taps(&self, store: &ParamStore, image: &Tensor) -> Result<FeatureTaps> {
        let mut tape = Tape::new();
        let bound = bind_frozen(store, &mut tape);
        let x = tape.constant(image.clone());
        let vars = self.forward(&mut tape, &bound, x)?;
        Ok(FeatureTaps(vars.into_iter().map(|v| tape.value(v).clone()).collect()))
    }
}

/// Per-image zero mean, unit variance over all pixels and channels. Treated
/// as data preprocessing: no gradient flows back to the image. A constant
/// image maps to zeros.
pub fn standardize(image: &Tensor) -> Tensor {
    let d = image.data();
    let n = d.len() as f64;
    let mean = d.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let var = d.iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var.sqrt() + 1e-5);
    let mut out = image.clone();
    for x in out.data_mut() {
        *x = ((f64::from(*x) - mean) * inv) as f32;
    }
    out
}

/// Binds parameters without requesting any gradients (inference).
pub fn bind_frozen<'a>(store: &'a ParamStore, tape: &mut Tape<'a>) -> Vec<Var> {
    store.iter().map(|(_, p)| tape.borrowed(&p.tensor, false)).collect()
}

pub fn check_image(image: &Tensor) -> Result<()> {
    if image.shape() != [INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE] {
        return Err(Error::shape(
            "backbone input",
            &[INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE],
            image.shape(),
        ));
    }
    Ok(())
}

/// Block outputs, shallowest first.
#[derive(Clone, Debug)]
pub struct FeatureTaps(pub Vec<Tensor>);

/// Which extractor groups stay fixed during fine-tuning. Head, neck, and
/// fusion parameters are always trainable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePlan {
    pub freeze_backbone: bool,
    pub freeze_side: bool,
}

impl FreezePlan {
    pub fn groups(&self) -> Vec<&'static str> {
        let mut g = Vec::new();
        if self.freeze_backbone {
            g.push("backbone");
        }
        if self.freeze_side {
            g.push("side");
        }
        g
    }
}

/// Marks every parameter under each named group frozen and everything else
/// trainable. A group with no parameters in `store` is rejected.
pub fn freeze_groups(store: &mut ParamStore, groups: &[&str]) -> Result<()> {
    let all: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
    for g in groups {
        if !all.iter().any(|n| n.starts_with(&format!("{g}."))) {
            return Err(Error::UnknownGroup((*g).to_owned()));
        }
    }
    for name in &all {
        let frozen = groups.iter().any(|g| name.starts_with(&format!("{g}.")));
        let id = store.id(name).expect("listed");
        store.get_mut(id).frozen = frozen;
    }
    Ok(())
}

pub fn apply_freeze(store: &mut ParamStore, plan: FreezePlan) -> Result<()> {
    freeze_groups(store, &plan.groups())
}

/// Softmax cross-entropy of a logit vector against a class index.
pub struct SoftmaxCrossEntropy {
    pub target: usize,
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&z| f64::from(z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl Function for SoftmaxCrossEntropy {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let z = inputs[0].data();
        if self.target >= z.len() {
            return Err(Error::invalid(format!("class {} out of {} logits", self.target, z.len())));
        }
        let p = softmax(z);
        Ok(Tensor::scalar(-p[self.target].max(f64::MIN_POSITIVE).ln() as f32))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Tensor>> {
        let p = softmax(inputs[0].data());
        let gy = f64::from(g.item());
        let d = Tensor::from_fn(inputs[0].shape().to_vec(), |i| {
            let t = if i == self.target { 1.0 } else { 0.0 };
            ((p[i] - t) * gy) as f32
        });
        Ok(vec![d])
    }
}

#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpstreamConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for UpstreamConfig {
    fn default() -> Self {
        UpstreamConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

pub const PROXY_CLASSES: usize = 3;

/// Backbone plus a pooled linear classifier for the proxy counting task.
pub struct ProxyClassifier {
    pub store: ParamStore,
    pub backbone: Extractor,
    head: DenseLayer,
}

impl ProxyClassifier {
    pub fn new(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, &[rng::label("upstream-init")]);
        let backbone = Extractor::register(&mut store, "backbone", spec, &mut rng)?;
        let head = DenseLayer::register(&mut store, "cls.fc", spec.out_channels(), PROXY_CLASSES, &mut rng)?;
        Ok(ProxyClassifier { store, backbone, head })
    }

    fn logits(&self, tape: &mut Tape<'_>, bound: &[Var], image: Var) -> Result<Var> {
        let taps = self.backbone.forward(tape, bound, image)?;
        let pooled = tape.global_avg_pool(*taps.last().expect("blocks"))?;
        self.head.forward(tape, bound, pooled)
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        let mut tape = Tape::new();
        let bound = bind_frozen(&self.store, &mut tape);
        let x = tape.constant(image.clone());
        let z = self.logits(&mut tape, &bound, x)?;
        let z = tape.value(z).data();
        Ok((0..z.len()).max_by(|&a, &b| z[a].total_cmp(&z[b]).then(b.cmp(&a))).unwrap_or(0))
    }

    pub fn accuracy(&self, data: &[LabeledImage]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("accuracy over an empty set"));
        }
        let mut hits = 0usize;
        for s in data {
            hits += usize::from(self.predict(&s.image)? == s.label);
        }
        Ok(hits as f64 / data.len() as f64)
    }

    /// Backbone parameters only; the classifier is discarded.
    pub fn backbone_checkpoint(&self) -> Checkpoint {
        self.store.checkpoint(Some("backbone"))
    }
}

pub struct UpstreamOutcome {
    pub checkpoint: Checkpoint,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f32>,
    pub model: ProxyClassifier,
}

/// Supervised proxy pretraining standing in for large-scale upstream weights.
pub fn upstream_pretrain(spec: &BackboneSpec, data: &[LabeledImage], cfg: &UpstreamConfig) -> Result<UpstreamOutcome> {
    if data.is_empty() {
        return Err(Error::invalid("empty proxy dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let mut model = ProxyClassifier::new(spec, cfg.seed)?;
    let mut opt = cfg.optimizer.build(&model.store, cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = rng::stream(cfg.seed, &[rng::label("upstream-order"), epoch as u64]);
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&LabeledImage> = chunk.iter().map(|&i| &data[i]).collect();
            let backbone = model.backbone.clone();
            let head = model.head.clone();
            let f = move |tape: &mut Tape<'_>, bound: &[Var], s: &LabeledImage| -> Result<Var> {
                let x = tape.constant(s.image.clone());
                let taps = backbone.forward(tape, bound, x)?;
                let pooled = tape.global_avg_pool(*taps.last().expect("blocks"))?;
                let z = head.forward(tape, bound, pooled)?;
                tape.apply(SoftmaxCrossEntropy { target: s.label }, &[z])
            };
            let loss = train::batch_step(
                &mut model.store,
                opt.as_mut(),
                &batch,
                &f,
                StepPos { epoch, step },
                "upstream",
            )?;
            total += f64::from(loss);
            steps += 1;
        }
        let mean = (total / steps as f64) as f32;
        info!("upstream epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    Ok(UpstreamOutcome {
        checkpoint: model.backbone_checkpoint(),
        epoch_losses,
        model,
    })
}
