//! Checks shared by the module suites and the acceptance target.

use rand::Rng as _;

use sideload_core::analysis::{self, GatingRecord};
use sideload_core::backbone::{BackboneSpec, FreezePlan, ProxyClassifier};
use sideload_core::contrastive::{contrastive_loss, make_pairs, AugmentationParams, PairMix};
use sideload_core::detect::{evaluate, iou, nms, DetBox};
use sideload_core::fusion::{assemble, FusionConfig, FusionMethod, Granularity};
use sideload_core::synthdata::{GtBox, SynthVideo};
use sideload_core::tensor::{Checkpoint, Tape, Tensor};

use super::*;

pub fn eq1_value(a: &Tensor, b: &Tensor, labels: &[u8], margin: f32) -> f64 {
    let mut tape = Tape::new();
    let va = tape.constant(a.clone());
    let vb = tape.constant(b.clone());
    let l = contrastive_loss(&mut tape, va, vb, labels, margin).unwrap();
    f64::from(tape.value(l).item())
}

fn pair_rows(a: &[f32], b: &[f32]) -> (Tensor, Tensor) {
    (
        Tensor::new([1, a.len()], a.to_vec()).unwrap(),
        Tensor::new([1, b.len()], b.to_vec()).unwrap(),
    )
}

/// Worst |loss - oracle| over 100 random batches and the four hand fixtures.
pub fn eq1_audit() -> f64 {
    let mut r = rng(100, "eq1-audit");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = r.gen_range(1..=8);
        let d = r.gen_range(1..=32);
        let a = uniform(&[n, d], -0.5, 0.5, &mut r);
        let b = uniform(&[n, d], -0.5, 0.5, &mut r);
        let labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..2)).collect();
        let margin = r.gen_range(0.25f32..2.0);
        let want = eq1_oracle(&rows_of(&a), &rows_of(&b), &labels, f64::from(margin));
        worst = worst.max((eq1_value(&a, &b, &labels, margin) - want).abs());
    }
    let (a, b) = pair_rows(&[0.3, -0.2], &[0.3, -0.2]);
    worst = worst.max(eq1_value(&a, &b, &[0], 1.0).abs());
    worst = worst.max((eq1_value(&a, &b, &[1], 1.0) - 1.0).abs());
    let (a, b) = pair_rows(&[0.0, 0.0], &[1.5, 0.0]);
    worst = worst.max(eq1_value(&a, &b, &[1], 1.0).abs());
    let a = Tensor::new([2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
    let b = Tensor::new([2, 2], vec![0.5, 0.0, 0.0, 0.3]).unwrap();
    worst = worst.max((eq1_value(&a, &b, &[0, 1], 1.0) - 0.37).abs());
    worst
}

#[derive(Debug, Default)]
pub struct PairAudit {
    pub similar: usize,
    pub dissimilar: usize,
    /// Dissimilar pairs whose frames share a video id.
    pub same_video: usize,
    /// Similar pairs whose two views are not of one frame.
    pub split_similar: usize,
    /// Views that do not show the frame their source claims.
    pub wrong_content: usize,
}

impl PairAudit {
    pub fn passed(&self, n: usize) -> bool {
        self.similar + self.dissimilar == n
            && self.similar == self.dissimilar
            && self.same_video == 0
            && self.split_similar == 0
            && self.wrong_content == 0
    }
}

fn close(a: &Tensor, b: &Tensor) -> bool {
    a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-5)
}

/// Balanced sampling of `n` pairs, audited twice: provenance under the
/// default augmentation, and content under an identity augmentation drawn
/// with the same seed (which selects the same source frames).
pub fn pair_audit(pool: &[SynthVideo], n: usize, seed: u64) -> PairAudit {
    let batch = make_pairs(pool, n, PairMix::Balanced, &AugmentationParams::default(), seed).unwrap();
    let identity = AugmentationParams {
        crop_scale: (1.0, 1.0),
        flip_prob: 0.0,
        max_rotation_deg: 0.0,
        jitter: 0.0,
        blur_sigma: (0.1, 0.1),
        blur_prob: 0.0,
    };
    let plain = make_pairs(pool, n, PairMix::Balanced, &identity, seed).unwrap();
    let mut audit = PairAudit::default();
    for k in 0..batch.len() {
        let (sa, sb) = (batch.sources_a[k], batch.sources_b[k]);
        if batch.labels[k] == 0 {
            audit.similar += 1;
            audit.split_similar += usize::from(sa != sb);
        } else {
            audit.dissimilar += 1;
            audit.same_video += usize::from(pool[sa.video].video_id == pool[sb.video].video_id);
        }
        let same_sources = plain.sources_a[k] == sa && plain.sources_b[k] == sb;
        let a_ok = close(&plain.views_a[k], &pool[sa.video].frames[sa.frame].image);
        let b_ok = close(&plain.views_b[k], &pool[sb.video].frames[sb.frame].image);
        audit.wrong_content += usize::from(!(same_sources && a_ok && b_ok));
    }
    audit
}

/// Worst |mAP - oracle| over 100 random instances.
pub fn ap_audit() -> f64 {
    let mut r = rng(101, "ap-audit");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (dets, gts) = random_instance(&mut r);
        let m = evaluate(&dets, &gts, 0.5, 0.25).unwrap();
        worst = worst.max((m.map50 - ap_oracle(&dets, &gts, 0.5)).abs());
    }
    worst
}

pub fn gt(x1: f32, y1: f32, x2: f32, y2: f32) -> GtBox {
    GtBox { x1, y1, x2, y2 }
}

pub fn det(x1: f32, y1: f32, x2: f32, y2: f32, conf: f32) -> DetBox {
    DetBox { x1, y1, x2, y2, conf }
}

/// Exact IoU and NMS fixtures.
pub fn iou_nms_fixtures() -> bool {
    let third = iou(&gt(0.0, 0.0, 2.0, 2.0), &gt(1.0, 0.0, 3.0, 2.0)) == 1.0 / 3.0;
    let same = iou(&gt(1.0, 1.0, 5.0, 5.0), &gt(1.0, 1.0, 5.0, 5.0)) == 1.0;
    let apart = iou(&gt(0.0, 0.0, 1.0, 1.0), &gt(2.0, 2.0, 3.0, 3.0)) == 0.0;
    let boxes = nms_fixture();
    let kept = nms(boxes.clone(), 0.5);
    let want = nms_oracle(&boxes, 0.5);
    let expected = [0.9f32, 0.7, 0.6];
    third
        && same
        && apart
        && kept == want
        && kept.iter().map(|d| d.conf).collect::<Vec<_>>() == expected
}

/// Two overlapping clusters plus a loner.
pub fn nms_fixture() -> Vec<DetBox> {
    vec![
        det(0.0, 0.0, 10.0, 10.0, 0.9),
        det(1.0, 1.0, 11.0, 11.0, 0.8),
        det(30.0, 30.0, 40.0, 40.0, 0.7),
        det(31.0, 30.0, 41.0, 40.0, 0.65),
        det(50.0, 0.0, 60.0, 8.0, 0.6),
    ]
}

fn record(model: &str, layer: usize, values: Vec<f64>) -> GatingRecord {
    GatingRecord {
        model_id: model.into(),
        layer_index: layer,
        values,
    }
}

/// Worst deviation from the scalar oracles for deviation, cross-model std,
/// and pearson, over random gate vectors; `None` if an identity fails.
pub fn gate_audit() -> Option<f64> {
    let mut r = rng(102, "gate-audit");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let c = r.gen_range(2..=64);
        let m = r.gen_range(2..=5);
        let models: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..c).map(|_| r.gen_range(-3.0f64..3.0).tanh()).collect())
            .collect();
        let recs: Vec<GatingRecord> = models.iter().enumerate().map(|(i, v)| record(&format!("m{i}"), 0, v.clone())).collect();
        let dev = analysis::deviation(&recs[0]).unwrap();
        worst = worst.max((dev.d - rms_oracle(&models[0])).abs());
        let refs: Vec<&GatingRecord> = recs.iter().collect();
        let xs = analysis::cross_model_std(&refs).unwrap();
        for (got, want) in xs.per_channel.iter().zip(xstd_oracle(&models)) {
            worst = worst.max((got - want).abs());
        }
        let p = analysis::pearson(&recs[0], &recs[1]).unwrap().r?;
        worst = worst.max((p - pearson_oracle(&models[0], &models[1])).abs());
        let neg: Vec<f64> = models[0].iter().map(|x| -x).collect();
        let self_r = analysis::pearson_values(&models[0], &models[0]).unwrap().r?;
        let anti_r = analysis::pearson_values(&models[0], &neg).unwrap().r?;
        if (self_r - 1.0).abs() > 1e-12 || (anti_r + 1.0).abs() > 1e-12 {
            return None;
        }
    }
    let fixture = analysis::pearson_values(&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 5.0, 9.0]).unwrap().r?;
    worst = worst.max((fixture - pearson_oracle(&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 5.0, 9.0])).abs());
    Some(worst)
}

/// Upstream-shaped checkpoint and its `side.*` copy, from a fresh proxy model.
pub fn fresh_checkpoints(seed: u64) -> (Checkpoint, Checkpoint) {
    let up = ProxyClassifier::new(&BackboneSpec::default(), seed).unwrap().backbone_checkpoint();
    let mut side = Checkpoint::new();
    for (name, t) in up.iter() {
        side.insert(name.replacen("backbone.", "side.", 1), t.clone());
    }
    (up, side)
}

/// Frames (out of `frames`) where a freshly assembled model with `method`
/// differs in any output bit from the frozen-backbone baseline.
pub fn zero_init_mismatches(method: FusionMethod, granularity: Granularity, frames: usize) -> usize {
    let spec = BackboneSpec::default();
    let (up, side) = fresh_checkpoints(7);
    let plan = FreezePlan {
        freeze_backbone: true,
        freeze_side: true,
    };
    let base = assemble(&spec, Some(&up), None, &FusionConfig::new(FusionMethod::None, granularity), plan, 5).unwrap();
    let fused = assemble(&spec, Some(&up), Some(&side), &FusionConfig::new(method, granularity), plan, 5).unwrap();
    let mut r = rng(103, "zero-init");
    (0..frames)
        .filter(|_| {
            let image = uniform(&[3, 64, 64], 0.0, 1.0, &mut r);
            let a = base.predict(&image, &base.precompute(&image).unwrap()).unwrap();
            let b = fused.predict(&image, &fused.precompute(&image).unwrap()).unwrap();
            !a.bit_eq(&b)
        })
        .count()
}
