//! Independent reference implementations and helpers shared by the
//! integration suites. Oracles work in f64 with plain loops and never call
//! into the library code they check.
#![allow(dead_code)]

pub mod audits;
pub mod suites;

use rand::Rng as _;
use sideload_core::detect::{detection_loss, DetBox};
use sideload_core::fusion::{Detector, FrameFeatures};
use sideload_core::rng::{self, Rng};
use sideload_core::synthdata::render::Background;
use sideload_core::synthdata::{render_scene, DomainParams, GtBox, Scene};
use sideload_core::tensor::{Checkpoint, Function, OptimizerKind, Tape, Tensor, Var};
use sideload_core::train::{batch_grads, SampleLoss};
use sideload_core::Result;

pub fn rng(seed: u64, what: &str) -> Rng {
    rng::stream(seed, &[rng::label(what)])
}

pub fn uniform(shape: &[usize], lo: f32, hi: f32, r: &mut Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(lo..hi))
}

/// Uniform values with magnitude in [gap, hi], random sign; keeps
/// activations away from kinks at zero.
pub fn away_from_zero(shape: &[usize], gap: f32, hi: f32, r: &mut Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = r.gen_range(gap..hi);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(x * w)`: reduces any tensor to a scalar with a random projection so
/// every output element contributes to the gradient.
pub struct Dot(pub Tensor);

impl Function for Dot {
    fn name(&self) -> &'static str {
        "dot"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let s: f64 = inputs[0]
            .data()
            .iter()
            .zip(self.0.data())
            .map(|(&x, &w)| f64::from(x) * f64::from(w))
            .sum();
        Ok(Tensor::scalar(s as f32))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Tensor>> {
        let k = g.item();
        let d = self.0.data().iter().map(|&w| w * k).collect();
        Ok(vec![Tensor::new(inputs[0].shape().to_vec(), d)?])
    }
}

pub fn dot(tape: &mut Tape<'_>, x: Var, w: &Tensor) -> Result<Var> {
    tape.apply(Dot(w.clone()), &[x])
}

// ---------------------------------------------------------------- tensors

pub fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0f64; co * ho * wo];
    for o in 0..co {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = f64::from(b.data()[o]);
                for c in 0..ci {
                    for di in 0..k {
                        for dj in 0..k {
                            let y = (i * stride + di) as isize - pad as isize;
                            let xx = (j * stride + dj) as isize - pad as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                continue;
                            }
                            let xv = x.data()[(c * h + y as usize) * wd + xx as usize];
                            let wv = w.data()[((o * ci + c) * k + di) * k + dj];
                            acc += f64::from(xv) * f64::from(wv);
                        }
                    }
                }
                out[(o * ho + i) * wo + j] = acc;
            }
        }
    }
    (vec![co, ho, wo], out)
}

pub fn dense_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    (0..o)
        .map(|r| {
            let mut acc = f64::from(b.data()[r]);
            for c in 0..i {
                acc += f64::from(w.data()[r * i + c]) * f64::from(x.data()[c]);
            }
            acc
        })
        .collect()
}

pub fn silu_oracle(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn sigmoid_oracle(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (f64::from(x) - y).abs()).fold(0.0, f64::max)
}

// ------------------------------------------------------------ contrastive

/// Margin contrastive loss, one pair at a time.
pub fn eq1_oracle(a: &[Vec<f64>], b: &[Vec<f64>], labels: &[u8], margin: f64) -> f64 {
    let mut total = 0.0;
    for k in 0..labels.len() {
        let mut s = 0.0;
        for j in 0..a[k].len() {
            s += (a[k][j] - b[k][j]) * (a[k][j] - b[k][j]);
        }
        let d = s.sqrt();
        total += if labels[k] == 0 {
            d * d
        } else {
            let h = if margin - d > 0.0 { margin - d } else { 0.0 };
            h * h
        };
    }
    total / labels.len() as f64
}

/// NT-Xent by enumerating every (anchor, other) similarity term. Rows 2k
/// and 2k+1 are positives.
pub fn ntxent_oracle(z: &[Vec<f64>], t: f64) -> f64 {
    let m = z.len();
    let norm = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = |i: usize, j: usize| {
        let d: f64 = z[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum();
        d / (norm(&z[i]) * norm(&z[j]))
    };
    let mut total = 0.0;
    for i in 0..m {
        let p = i ^ 1;
        let mut denom = 0.0;
        for k in 0..m {
            if k != i {
                denom += (cos(i, k) / t).exp();
            }
        }
        total += -((cos(i, p) / t).exp() / denom).ln();
    }
    total / m as f64
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(|r| r.iter().map(|&x| f64::from(x)).collect()).collect()
}

// ---------------------------------------------------------------- metrics

pub fn iou_oracle(a: &GtBox, b: &GtBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.x1 as f64, a.y1 as f64, a.x2 as f64, a.y2 as f64);
    let (bx1, by1, bx2, by2) = (b.x1 as f64, b.y1 as f64, b.x2 as f64, b.y2 as f64);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn rect(d: &DetBox) -> GtBox {
    GtBox {
        x1: d.x1,
        y1: d.y1,
        x2: d.x2,
        y2: d.y2,
    }
}

/// (true positives, detections kept) when only detections with
/// `conf >= cut` exist, matched greedily from scratch.
fn tp_at_cut(dets: &[Vec<DetBox>], gts: &[Vec<GtBox>], iou_t: f64, cut: f32) -> (usize, usize) {
    let mut tp = 0;
    let mut kept = 0;
    let mut all: Vec<(f32, usize, usize)> = Vec::new();
    for (f, ds) in dets.iter().enumerate() {
        for (i, d) in ds.iter().enumerate() {
            if d.conf >= cut {
                all.push((d.conf, f, i));
            }
        }
    }
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    for (_, f, i) in all {
        kept += 1;
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[f].iter().enumerate() {
            let v = iou_oracle(&rect(&dets[f][i]), g);
            if !used[f][j] && v >= iou_t && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            used[f][j] = true;
            tp += 1;
        }
    }
    (tp, kept)
}

/// All-point interpolated AP by sweeping every distinct confidence as a cut:
/// each cut gives one (recall, precision) point and precision at recall r is
/// the best precision among cuts reaching at least r.
pub fn ap_oracle(dets: &[Vec<DetBox>], gts: &[Vec<GtBox>], iou_t: f64) -> f64 {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let mut cuts: Vec<f32> = dets.iter().flatten().map(|d| d.conf).collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();
    let pts: Vec<(f64, f64)> = cuts
        .iter()
        .map(|&c| {
            let (tp, kept) = tp_at_cut(dets, gts, iou_t, c);
            (tp as f64 / n_gt as f64, tp as f64 / kept as f64)
        })
        .collect();
    let mut recalls: Vec<f64> = pts.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    recalls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    recalls.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let p = pts.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

/// (precision, recall) at a fixed confidence.
pub fn prf_oracle(dets: &[Vec<DetBox>], gts: &[Vec<GtBox>], iou_t: f64, conf: f32) -> (f64, f64) {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let (tp, kept) = tp_at_cut(dets, gts, iou_t, conf);
    let p = if kept == 0 { 0.0 } else { tp as f64 / kept as f64 };
    (p, tp as f64 / n_gt as f64)
}

/// O(n^2) greedy suppression: repeatedly take the most confident remaining
/// box and discard everything overlapping it by more than `thr`.
pub fn nms_oracle(boxes: &[DetBox], thr: f64) -> Vec<DetBox> {
    let mut left: Vec<DetBox> = boxes.to_vec();
    let mut kept = Vec::new();
    while !left.is_empty() {
        let (bi, _) = left
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.conf.partial_cmp(&b.1.conf).unwrap())
            .unwrap();
        let best = left.remove(bi);
        left.retain(|d| iou_oracle(&rect(d), &rect(&best)) <= thr);
        kept.push(best);
    }
    kept
}

pub fn random_box(r: &mut Rng, min: f32, max: f32) -> GtBox {
    let w = r.gen_range(min..max);
    let h = r.gen_range(min..max);
    let x1 = r.gen_range(0.0..64.0 - w);
    let y1 = r.gen_range(0.0..64.0 - h);
    GtBox {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    }
}

/// Small random evaluation instance: detections are jittered copies of
/// ground truth plus clutter, with distinct confidences.
pub fn random_instance(r: &mut Rng) -> (Vec<Vec<DetBox>>, Vec<Vec<GtBox>>) {
    let frames = r.gen_range(1..4);
    let mut budget = 20usize;
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..frames {
        let ng = r.gen_range(0..4).min(budget);
        budget -= ng;
        let g: Vec<GtBox> = (0..ng).map(|_| random_box(r, 4.0, 16.0)).collect();
        let mut d = Vec::new();
        for b in &g {
            if r.gen_bool(0.7) && budget > 0 {
                budget -= 1;
                let j = r.gen_range(-3.0f32..3.0);
                d.push(DetBox {
                    x1: (b.x1 + j).max(0.0),
                    y1: b.y1,
                    x2: (b.x2 + j).min(64.0).max(b.x1 + j + 1.0),
                    y2: b.y2,
                    conf: r.gen_range(0.01..1.0),
                });
            }
        }
        let clutter = r.gen_range(0..3).min(budget);
        budget -= clutter;
        for _ in 0..clutter {
            let b = random_box(r, 4.0, 16.0);
            d.push(DetBox {
                x1: b.x1,
                y1: b.y1,
                x2: b.x2,
                y2: b.y2,
                conf: r.gen_range(0.01..1.0),
            });
        }
        dets.push(d);
        gts.push(g);
    }
    if gts.iter().all(Vec::is_empty) {
        gts[0].push(random_box(r, 4.0, 16.0));
    }
    (dets, gts)
}

// ------------------------------------------------------------------ gates

pub fn rms_oracle(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x * x;
    }
    (s / v.len() as f64).sqrt()
}

pub fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n).sqrt();
    let sb = (b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n).sqrt();
    cov / (sa * sb)
}

/// Population std of min-max scaled vectors, per channel.
pub fn xstd_oracle(models: &[Vec<f64>]) -> Vec<f64> {
    let scaled: Vec<Vec<f64>> = models
        .iter()
        .map(|v| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            v.iter().map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.5 }).collect()
        })
        .collect();
    let m = models.len() as f64;
    (0..models[0].len())
        .map(|c| {
            let mean = scaled.iter().map(|s| s[c]).sum::<f64>() / m;
            (scaled.iter().map(|s| (s[c] - mean).powi(2)).sum::<f64>() / m).sqrt()
        })
        .collect()
}

// ---------------------------------------------------------- training probes

pub fn scenes(n: usize, seed: u64) -> Vec<Scene> {
    (0..n as u64)
        .map(|i| {
            let d = DomainParams {
                snow_cover: 0.2,
                contrast: 0.9,
                blur: 0.2,
                texture_seed: seed + i,
                palette: (i % 4) as u8,
            };
            render_scene(&d, &Background::new(&d), 1 + (i as usize % 3), seed * 100 + i)
        })
        .collect()
}

pub struct Sample {
    scene: Scene,
    feats: FrameFeatures,
}

struct ProbeLoss<'d>(&'d Detector);

impl SampleLoss<Sample> for ProbeLoss<'_> {
    fn loss<'a>(&self, tape: &mut Tape<'a>, params: &[Var], s: &'a Sample) -> sideload_core::Result<Var> {
        let out = self.0.forward(tape, params, &s.scene.image, &s.feats)?;
        detection_loss(tape, out, &s.scene.boxes)
    }
}

pub fn train_steps(det: &mut Detector, data: Vec<Scene>, steps: usize) {
    train_steps_at(det, data, steps, 1e-2)
}

pub fn train_steps_at(det: &mut Detector, data: Vec<Scene>, steps: usize, lr: f32) {
    let data: Vec<Sample> = data
        .into_iter()
        .map(|scene| Sample {
            scene,
            feats: FrameFeatures::default(),
        })
        .collect();
    let mut opt = OptimizerKind::Adam.build(&det.store, lr);
    for step in 0..steps {
        let sample = &data[step % data.len()];
        let (_, grads) = batch_grads(&det.store, &[sample], &ProbeLoss(det)).unwrap();
        opt.step(&mut det.store, &grads).unwrap();
    }
}

pub fn changed(before: &Checkpoint, det: &Detector) -> Vec<String> {
    det.store
        .iter()
        .filter(|(_, p)| !p.tensor.bit_eq(before.get(&p.name).unwrap()))
        .map(|(_, p)| p.name.clone())
        .collect()
}

/// A run configuration small enough for integration tests: short videos,
/// a small proxy set, one-epoch pretraining, two fine-tuning epochs.
pub fn tiny_config(dir: &std::path::Path) -> sideload_core::harness::RunConfig {
    use sideload_core::harness::RunConfig;
    let mut cfg = RunConfig::default();
    cfg.seeds = vec![1, 2];
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.corpus.annotated_frames = 12;
    cfg.corpus.pool_frames = 6;
    cfg.proxy_frames = 64;
    cfg.upstream.epochs = 1;
    cfg.pretrain.epochs = 1;
    cfg.pretrain.pairs_per_epoch = 16;
    cfg.pretrain.batch_pairs = 8;
    cfg.paths.checkpoints = dir.join("checkpoints");
    cfg.paths.outputs = dir.join("outputs");
    cfg
}
