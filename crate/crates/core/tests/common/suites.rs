//! Seeded finite-difference trials for every differentiable operation.
#![allow(dead_code)]

use rand::Rng as _;
use sideload_core::contrastive::{contrastive_loss, ntxent_loss};
use sideload_core::detect::detection_loss;
use sideload_core::fusion;
use sideload_core::rng::Rng;
use sideload_core::synthdata::GtBox;
use sideload_core::tensor::{grad_check, GradCheckReport, Tape, Var};
use sideload_core::Result;

use super::{away_from_zero, dot, rng, uniform};

pub const TRIALS: usize = 20;
pub const TOLERANCE: f64 = 1e-3;

/// Worst relative error over `TRIALS` seeded trials of one operation.
pub struct OpReport {
    pub op: &'static str,
    pub trials: usize,
    pub worst: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.trials >= TRIALS && self.worst < TOLERANCE
    }
}

fn run(op: &'static str, mut trial: impl FnMut(&mut Rng) -> Result<GradCheckReport>) -> OpReport {
    let mut r = rng(7, op);
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let rep = trial(&mut r).unwrap_or_else(|e| panic!("{op}: {e}"));
        assert!(rep.checked > 0, "{op}: nothing checked");
        worst = worst.max(rep.max_rel_error);
    }
    OpReport { op, trials: TRIALS, worst }
}

type Unary = fn(&mut Tape<'_>, Var) -> Var;

fn activation(op: &'static str, f: Unary) -> OpReport {
    run(op, |r| {
        let x = away_from_zero(&[2, 3, 3], 0.05, 3.0, r);
        let w = uniform(&[2, 3, 3], -1.0, 1.0, r);
        grad_check(&[("x", x)], 1e-3, |tape, v| {
            let y = f(tape, v[0]);
            dot(tape, y, &w)
        })
    })
}

/// Random ground truth with at most one box per grid cell.
pub fn random_gt(r: &mut Rng, max: usize) -> Vec<GtBox> {
    let n = r.gen_range(1..=max);
    let mut cells: Vec<usize> = Vec::new();
    while cells.len() < n {
        let c = r.gen_range(0..16);
        if !cells.contains(&c) {
            cells.push(c);
        }
    }
    cells
        .into_iter()
        .map(|c| {
            let (row, col) = ((c / 4) as f32, (c % 4) as f32);
            let cx = (col + r.gen_range(0.25..0.75)) * 16.0;
            let cy = (row + r.gen_range(0.25..0.75)) * 16.0;
            let (w, h) = (r.gen_range(4.0..7.5f32), r.gen_range(4.0..7.5f32));
            GtBox {
                x1: cx - w / 2.0,
                y1: cy - h / 2.0,
                x2: cx + w / 2.0,
                y2: cy + h / 2.0,
            }
        })
        .collect()
}

/// A fusion block followed by a 1x1 prediction conv and the detection loss.
fn fusion_block(op: &'static str, method: fusion::FusionMethod) -> OpReport {
    use fusion::FusionMethod as M;
    const C: usize = 8;
    run(op, |r| {
        let gt = random_gt(r, 3);
        let mut inputs = vec![
            ("backbone", uniform(&[C, 4, 4], -1.0, 1.0, r)),
            ("side", uniform(&[C, 4, 4], -1.0, 1.0, r)),
            ("head.w", uniform(&[5, C, 1, 1], -0.4, 0.4, r)),
            ("head.b", uniform(&[5], -0.5, 0.5, r)),
        ];
        match method {
            M::Addition => {}
            M::WeightsGating | M::SelfWeighted => inputs.push(("w", uniform(&[C], -1.0, 1.0, r))),
            M::SeGating => {
                let hidden = C / fusion::se_reduction_for(C, 16)?;
                // Keep the relu pre-activations clear of the kink at zero.
                let pooled: Vec<f32> = inputs[1].1.data().chunks(16).map(|c| c.iter().sum::<f32>() / 16.0).collect();
                let (w1, b1) = loop {
                    let w1 = uniform(&[hidden, C], -0.7, 0.7, r);
                    let b1 = uniform(&[hidden], -0.5, 0.5, r);
                    let clear = (0..hidden).all(|j| {
                        let z: f32 = (0..C).map(|c| w1.data()[j * C + c] * pooled[c]).sum::<f32>() + b1.data()[j];
                        z.abs() > 0.05
                    });
                    if clear {
                        break (w1, b1);
                    }
                };
                inputs.push(("fc1.w", w1));
                inputs.push(("fc1.b", b1));
                inputs.push(("fc2.w", uniform(&[C, hidden], -0.7, 0.7, r)));
                inputs.push(("fc2.b", uniform(&[C], -0.5, 0.5, r)));
            }
            M::ZeroConv => {
                inputs.push(("zc.w", uniform(&[C, C, 1, 1], -0.3, 0.3, r)));
                inputs.push(("zc.b", uniform(&[C], -0.3, 0.3, r)));
            }
            M::None => unreachable!(),
        }
        grad_check(&inputs, 1e-2, |tape, v| {
            let fused = match method {
                M::Addition => fusion::fuse_addition(tape, v[0], v[1])?,
                M::WeightsGating => fusion::fuse_weights_gating(tape, v[0], v[1], v[4])?,
                M::SelfWeighted => fusion::fuse_self_weighted(tape, v[0], v[4])?,
                M::SeGating => fusion::fuse_se_gating(tape, v[0], v[1], (v[4], v[5]), (v[6], v[7]))?,
                M::ZeroConv => fusion::fuse_zero_conv(tape, v[0], v[1], v[4], v[5])?,
                M::None => unreachable!(),
            };
            let out = tape.conv2d(fused, v[2], v[3], 1, 0)?;
            detection_loss(tape, out, &gt)
        })
    })
}

pub fn conv() -> OpReport {
    run("conv2d", |r| {
        let (ci, co) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let k = if r.gen_bool(0.5) { 1 } else { 3 };
        let (stride, pad) = (r.gen_range(1..=2), r.gen_range(0..=1));
        let (h, w) = (r.gen_range(k..=6), r.gen_range(k..=6));
        let x = uniform(&[ci, h, w], -1.0, 1.0, r);
        let wt = uniform(&[co, ci, k, k], -0.5, 0.5, r);
        let b = uniform(&[co], -0.5, 0.5, r);
        let probe = sideload_core::tensor::kernels::conv2d(&x, &wt, &b, stride, pad)?;
        let proj = uniform(probe.shape(), -1.0, 1.0, r);
        grad_check(&[("x", x), ("w", wt), ("b", b)], 1e-3, |tape, v| {
            let y = tape.conv2d(v[0], v[1], v[2], stride, pad)?;
            dot(tape, y, &proj)
        })
    })
}

pub fn dense() -> OpReport {
    run("dense", |r| {
        let (i, o) = (r.gen_range(1..=6), r.gen_range(1..=5));
        let x = uniform(&[i], -1.0, 1.0, r);
        let w = uniform(&[o, i], -1.0, 1.0, r);
        let b = uniform(&[o], -1.0, 1.0, r);
        let proj = uniform(&[o], -1.0, 1.0, r);
        grad_check(&[("x", x), ("w", w), ("b", b)], 1e-3, |tape, v| {
            let y = tape.dense(v[0], v[1], v[2])?;
            dot(tape, y, &proj)
        })
    })
}

pub fn relu() -> OpReport {
    activation("relu", |t, x| t.relu(x))
}

pub fn silu() -> OpReport {
    activation("silu", |t, x| t.silu(x))
}

pub fn tanh() -> OpReport {
    activation("tanh", |t, x| t.tanh(x))
}

pub fn sigmoid() -> OpReport {
    activation("sigmoid", |t, x| t.sigmoid(x))
}

pub fn pool() -> OpReport {
    run("global_avg_pool", |r| {
        let (c, h, w) = (r.gen_range(1..=4), r.gen_range(1..=5), r.gen_range(1..=5));
        let x = uniform(&[c, h, w], -1.0, 1.0, r);
        let proj = uniform(&[c], -1.0, 1.0, r);
        grad_check(&[("x", x)], 1e-3, |tape, v| {
            let y = tape.global_avg_pool(v[0])?;
            dot(tape, y, &proj)
        })
    })
}

pub fn add() -> OpReport {
    run("add", |r| {
        let a = uniform(&[2, 3, 3], -1.0, 1.0, r);
        let b = uniform(&[2, 3, 3], -1.0, 1.0, r);
        let proj = uniform(&[2, 3, 3], -1.0, 1.0, r);
        grad_check(&[("a", a), ("b", b)], 1e-3, |tape, v| {
            let y = tape.add(v[0], v[1])?;
            dot(tape, y, &proj)
        })
    })
}

pub fn mul_channelwise() -> OpReport {
    run("mul_channelwise", |r| {
        let c = r.gen_range(1..=4);
        let f = uniform(&[c, 3, 2], -1.0, 1.0, r);
        let s = uniform(&[c], -1.0, 1.0, r);
        let proj = uniform(&[c, 3, 2], -1.0, 1.0, r);
        grad_check(&[("features", f), ("scale", s)], 1e-3, |tape, v| {
            let y = tape.mul_channelwise(v[0], v[1])?;
            dot(tape, y, &proj)
        })
    })
}

pub fn addition_fusion() -> OpReport {
    fusion_block("fusion:addition", fusion::FusionMethod::Addition)
}

pub fn weights_gating_fusion() -> OpReport {
    fusion_block("fusion:weights_gating", fusion::FusionMethod::WeightsGating)
}

pub fn se_gating_fusion() -> OpReport {
    fusion_block("fusion:se_gating", fusion::FusionMethod::SeGating)
}

pub fn zero_conv_fusion() -> OpReport {
    fusion_block("fusion:zero_conv", fusion::FusionMethod::ZeroConv)
}

pub fn self_weighted_fusion() -> OpReport {
    fusion_block("fusion:self_weighted", fusion::FusionMethod::SelfWeighted)
}

pub fn margin_loss() -> OpReport {
    run("contrastive_loss", |r| {
        let (n, d) = (r.gen_range(1..=8), r.gen_range(2..=8));
        let margin = 1.0f32;
        let labels: Vec<u8> = (0..n).map(|_| u8::from(r.gen_bool(0.5))).collect();
        // Keep distances clear of the hinge at d = margin and of d = 0.
        let (a, b) = loop {
            let a = uniform(&[n, d], -1.0, 1.0, r);
            let b = uniform(&[n, d], -1.0, 1.0, r);
            let ok = a.data().chunks(d).zip(b.data().chunks(d)).all(|(x, y)| {
                let dist = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f32>().sqrt();
                dist > 0.1 && (dist - margin).abs() > 0.1
            });
            if ok {
                break (a, b);
            }
        };
        grad_check(&[("a", a), ("b", b)], 1e-3, |tape, v| contrastive_loss(tape, v[0], v[1], &labels, margin))
    })
}

pub fn ntxent() -> OpReport {
    run("ntxent_loss", |r| {
        let (pairs, d) = (r.gen_range(2..=4), r.gen_range(3..=8));
        let t = r.gen_range(0.3..1.0f32);
        let z = uniform(&[2 * pairs, d], -1.0, 1.0, r);
        grad_check(&[("z", z)], 1e-3, |tape, v| ntxent_loss(tape, v[0], t))
    })
}

pub fn detection() -> OpReport {
    run("detection_loss", |r| {
        let gt = if r.gen_bool(0.2) { Vec::new() } else { random_gt(r, 4) };
        let out = uniform(&[5, 4, 4], -2.0, 2.0, r);
        grad_check(&[("head", out)], 1e-2, |tape, v| detection_loss(tape, v[0], &gt))
    })
}

/// Every operation named by the gradient-integrity requirement.
pub fn all() -> Vec<OpReport> {
    vec![
        conv(),
        dense(),
        relu(),
        silu(),
        tanh(),
        sigmoid(),
        pool(),
        add(),
        mul_channelwise(),
        addition_fusion(),
        weights_gating_fusion(),
        se_gating_fusion(),
        zero_conv_fusion(),
        self_weighted_fusion(),
        margin_loss(),
        ntxent(),
        detection(),
    ]
}
