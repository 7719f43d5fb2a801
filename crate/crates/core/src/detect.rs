//! Single-scale 4x4-grid detection head, its loss, decoding with NMS, and
//! single-class precision / recall / F-measure / AP@0.5.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{init_conv, ConvLayer};
use crate::error::{Error, Result};
use crate::io::{csv_err, fmt_f, write_csv};
use crate::rng::Rng;
use crate::synthdata::GtBox;
use crate::tensor::kernels::sigmoid;
use crate::tensor::{Function, ParamStore, Tape, Tensor, Var};

pub const GRID: usize = 4;
pub const FRAME: f32 = 64.0;
pub const CELL: f32 = FRAME / GRID as f32;
/// Objectness logit, cx, cy (cell-relative), w, h (frame-relative).
pub const HEAD_OUT: usize = 5;
/// Weight of the box regression term relative to objectness.
pub const BOX_WEIGHT: f64 = 5.0;
/// Objectness bias at initialization (prior confidence about 0.12).
const OBJ_PRIOR_LOGIT: f32 = -2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    pub conf: f32,
}

impl DetBox {
    pub fn rect(&self) -> GtBox {
        GtBox {
            x1: self.x1,
            y1: self.y1,
            x2: self.x2,
            y2: self.y2,
        }
    }
}

pub fn iou(a: &GtBox, b: &GtBox) -> f32 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Neck conv (3x3, silu) then a 1x1 prediction conv to `HEAD_OUT` channels.
#[derive(Clone, Debug)]
pub struct Head {
    pub neck: ConvLayer,
    pub pred: ConvLayer,
}

impl Head {
    pub fn register(store: &mut ParamStore, channels: usize, rng: &mut Rng) -> Result<Self> {
        let neck = ConvLayer::register(store, "head.neck", channels, channels, 3, 1, 1, rng)?;
        let (mut w, mut b) = init_conv(HEAD_OUT, channels, 1, rng);
        w.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        b.data_mut()[0] = OBJ_PRIOR_LOGIT;
        let pred = ConvLayer {
            weight: store.insert("head.pred.weight", w)?,
            bias: store.insert("head.pred.bias", b)?,
            stride: 1,
            padding: 0,
        };
        Ok(Head { neck, pred })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, bound: &[Var], features: Var) -> Result<Var> {
        let h = self.neck.forward(tape, bound, features)?;
        let h = tape.silu(h);
        self.pred.forward(tape, bound, h)
    }
}

/// Per-cell regression targets.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Target {
    tx: f64,
    ty: f64,
    tw: f64,
    th: f64,
}

fn assign(gt: &[GtBox]) -> Result<Vec<Option<Target>>> {
    let mut cells = vec![None; GRID * GRID];
    for b in gt {
        b.validate()?;
        let (cx, cy) = b.center();
        let col = ((cx / CELL).floor() as usize).min(GRID - 1);
        let row = ((cy / CELL).floor() as usize).min(GRID - 1);
        let slot = &mut cells[row * GRID + col];
        if slot.is_some() {
            return Err(Error::Dataset(format!("two ground-truth boxes share grid cell ({row}, {col})")));
        }
        *slot = Some(Target {
            tx: f64::from(cx / CELL) - col as f64,
            ty: f64::from(cy / CELL) - row as f64,
            tw: f64::from(b.width() / FRAME),
            th: f64::from(b.height() / FRAME),
        });
    }
    Ok(cells)
}

fn sigmoid64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sum over cells of objectness BCE, plus `BOX_WEIGHT` times the squared
/// error of the sigmoid box outputs on cells that own a ground-truth box.
pub struct DetectionLoss {
    targets: Vec<Option<Target>>,
}

impl DetectionLoss {
    pub fn new(gt: &[GtBox]) -> Result<Self> {
        Ok(DetectionLoss { targets: assign(gt)? })
    }
}

fn check_head(t: &Tensor) -> Result<()> {
    if t.shape() != [HEAD_OUT, GRID, GRID] {
        return Err(Error::shape("detection head output", &[HEAD_OUT, GRID, GRID], t.shape()));
    }
    Ok(())
}

impl Function for DetectionLoss {
    fn name(&self) -> &'static str {
        "detection_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let out = inputs[0];
        check_head(out)?;
        let p = out.data();
        let n = GRID * GRID;
        let mut loss = 0.0f64;
        for (cell, target) in self.targets.iter().enumerate() {
            let z = f64::from(p[cell]);
            let t = if target.is_some() { 1.0 } else { 0.0 };
            loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
            if let Some(tg) = target {
                for (k, want) in [tg.tx, tg.ty, tg.tw, tg.th].into_iter().enumerate() {
                    let d = sigmoid64(f64::from(p[(k + 1) * n + cell])) - want;
                    loss += BOX_WEIGHT * d * d;
                }
            }
        }
        Ok(Tensor::scalar(loss as f32))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Result<Vec<Tensor>> {
        let out = inputs[0];
        let p = out.data();
        let n = GRID * GRID;
        let gy = f64::from(g.item());
        let mut d = vec![0.0f32; p.len()];
        for (cell, target) in self.targets.iter().enumerate() {
            let t = if target.is_some() { 1.0 } else { 0.0 };
            d[cell] = ((sigmoid64(f64::from(p[cell])) - t) * gy) as f32;
            if let Some(tg) = target {
                for (k, want) in [tg.tx, tg.ty, tg.tw, tg.th].into_iter().enumerate() {
                    let i = (k + 1) * n + cell;
                    let s = sigmoid64(f64::from(p[i]));
                    d[i] = (2.0 * BOX_WEIGHT * (s - want) * s * (1.0 - s) * gy) as f32;
                }
            }
        }
        Ok(vec![Tensor::new(out.shape().to_vec(), d)?])
    }
}

pub fn detection_loss(tape: &mut Tape<'_>, head_out: Var, gt: &[GtBox]) -> Result<Var> {
    tape.apply(DetectionLoss::new(gt)?, &[head_out])
}

fn by_confidence(a: &DetBox, b: &DetBox) -> Ordering {
    b.conf
        .total_cmp(&a.conf)
        .then(a.x1.total_cmp(&b.x1))
        .then(a.y1.total_cmp(&b.y1))
        .then(a.x2.total_cmp(&b.x2))
        .then(a.y2.total_cmp(&b.y2))
}

/// Greedy NMS: keep the most confident box, drop any remaining box with
/// IoU > `nms_iou` against a kept one. Equal-confidence boxes are ordered by
/// coordinates, so the result does not depend on input order.
pub fn nms(mut boxes: Vec<DetBox>, nms_iou: f32) -> Vec<DetBox> {
    boxes.sort_by(by_confidence);
    let mut kept: Vec<DetBox> = Vec::new();
    for b in boxes {
        if kept.iter().all(|k| iou(&k.rect(), &b.rect()) <= nms_iou) {
            kept.push(b);
        }
    }
    kept
}

pub fn decode(head_out: &Tensor, conf_threshold: f32, nms_iou: f32) -> Result<Vec<DetBox>> {
    check_head(head_out)?;
    if !(0.0..=1.0).contains(&conf_threshold) || !(0.0..=1.0).contains(&nms_iou) {
        return Err(Error::invalid("decode thresholds must lie in [0, 1]"));
    }
    let p = head_out.data();
    let n = GRID * GRID;
    let mut boxes = Vec::new();
    for cell in 0..n {
        let conf = sigmoid(p[cell]);
        if conf < conf_threshold {
            continue;
        }
        let (row, col) = (cell / GRID, cell % GRID);
        let cx = (col as f32 + sigmoid(p[n + cell])) * CELL;
        let cy = (row as f32 + sigmoid(p[2 * n + cell])) * CELL;
        let w = sigmoid(p[3 * n + cell]) * FRAME;
        let h = sigmoid(p[4 * n + cell]) * FRAME;
        let b = DetBox {
            x1: (cx - w / 2.0).clamp(0.0, FRAME),
            y1: (cy - h / 2.0).clamp(0.0, FRAME),
            x2: (cx + w / 2.0).clamp(0.0, FRAME),
            y2: (cy + h / 2.0).clamp(0.0, FRAME),
            conf,
        };
        if b.x2 > b.x1 && b.y2 > b.y1 {
            boxes.push(b);
        }
    }
    Ok(nms(boxes, nms_iou))
}

/// All values in [0, 1]. `undefined` marks an evaluation without ground
/// truth, where the metrics are reported as zero rather than by convention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub map50: f64,
    pub undefined: bool,
}

pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Greedy matching over all frames: detections in descending confidence
/// each take the unmatched ground truth of their frame with the highest
/// IoU >= `iou_thresh`. Returns (confidence, is_tp) in processing order.
fn match_detections(dets: &[Vec<DetBox>], gts: &[Vec<GtBox>], iou_thresh: f32) -> Vec<(f32, bool)> {
    let mut order: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(f, ds)| (0..ds.len()).map(move |i| (f, i)))
        .collect();
    order.sort_by(|&(fa, ia), &(fb, ib)| {
        dets[fb][ib]
            .conf
            .total_cmp(&dets[fa][ia].conf)
            .then(fa.cmp(&fb))
            .then(ia.cmp(&ib))
    });
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    order
        .into_iter()
        .map(|(f, i)| {
            let d = dets[f][i].rect();
            let mut best: Option<(usize, f32)> = None;
            for (j, g) in gts[f].iter().enumerate() {
                if used[f][j] {
                    continue;
                }
                let v = iou(&d, g);
                if v >= iou_thresh && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                used[f][j] = true;
            }
            (dets[f][i].conf, best.is_some())
        })
        .collect()
}

/// Area under the all-point interpolated precision-recall curve, with one
/// curve point per distinct confidence.
fn average_precision(matched: &[(f32, bool)], n_gt: usize) -> f64 {
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for (k, &(conf, hit)) in matched.iter().enumerate() {
        tp += usize::from(hit);
        seen += 1;
        let last_of_group = matched.get(k + 1).map_or(true, |&(c, _)| c != conf);
        if last_of_group {
            points.push((tp as f64 / n_gt as f64, tp as f64 / seen as f64));
        }
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for k in 0..points.len() {
        let p_interp = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (points[k].0 - prev_r) * p_interp;
        prev_r = points[k].0;
    }
    ap
}

pub fn evaluate(dets: &[Vec<DetBox>], gts: &[Vec<GtBox>], iou_thresh: f32, conf_for_prf: f32) -> Result<EvalMetrics> {
    if dets.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} detection frames vs {} ground-truth frames",
            dets.len(),
            gts.len()
        )));
    }
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Ok(EvalMetrics {
            undefined: true,
            ..EvalMetrics::default()
        });
    }
    let matched = match_detections(dets, gts, iou_thresh);
    let above: Vec<&(f32, bool)> = matched.iter().filter(|(c, _)| *c >= conf_for_prf).collect();
    let tp = above.iter().filter(|(_, hit)| *hit).count();
    let precision = if above.is_empty() { 0.0 } else { tp as f64 / above.len() as f64 };
    let recall = tp as f64 / n_gt as f64;
    Ok(EvalMetrics {
        precision,
        recall,
        f_measure: f_measure(precision, recall),
        map50: average_precision(&matched, n_gt),
        undefined: false,
    })
}

/// Writes `frame_id,x1,y1,x2,y2,conf` rows.
pub fn write_detections(path: &Path, frames: &[(String, Vec<DetBox>)]) -> Result<()> {
    let rows = frames.iter().flat_map(|(id, ds)| {
        ds.iter().map(move |d| {
            vec![
                id.clone(),
                fmt_f(f64::from(d.x1)),
                fmt_f(f64::from(d.y1)),
                fmt_f(f64::from(d.x2)),
                fmt_f(f64::from(d.y2)),
                fmt_f(f64::from(d.conf)),
            ]
        })
    });
    write_csv(path, &["frame_id", "x1", "y1", "x2", "y2", "conf"], rows)
}

/// Writes `frame_id,x1,y1,x2,y2` rows.
pub fn write_ground_truth(path: &Path, frames: &[(String, Vec<GtBox>)]) -> Result<()> {
    let rows = frames.iter().flat_map(|(id, gs)| {
        gs.iter().map(move |g| {
            vec![
                id.clone(),
                fmt_f(f64::from(g.x1)),
                fmt_f(f64::from(g.y1)),
                fmt_f(f64::from(g.x2)),
                fmt_f(f64::from(g.y2)),
            ]
        })
    });
    write_csv(path, &["frame_id", "x1", "y1", "x2", "y2"], rows)
}

/// Reads either interchange file; `conf` is `None` for ground truth.
pub fn read_boxes(path: &Path) -> Result<Vec<(String, GtBox, Option<f32>)>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let has_conf = r.headers().map_err(csv_err)?.iter().any(|h| h == "conf");
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let num = |i: usize| -> Result<f32> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Dataset(format!("{}: bad field {i} in {rec:?}", path.display())))
        };
        let b = GtBox {
            x1: num(1)?,
            y1: num(2)?,
            x2: num(3)?,
            y2: num(4)?,
        };
        let conf = if has_conf { Some(num(5)?) } else { None };
        out.push((rec.get(0).unwrap_or_default().to_owned(), b, conf));
    }
    Ok(out)
}
