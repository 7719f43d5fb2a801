mod common;

use common::{suites, *};
use proptest::prelude::*;
use sideload_core::tensor::kernels::{self, Activation};
use sideload_core::tensor::{Checkpoint, OptimizerKind, ParamGrads, ParamStore, Tape, Tensor};

#[test]
fn conv_matches_nested_loops_for_every_stride_and_padding() {
    let mut r = rng(1, "conv-oracle");
    for stride in [1, 2] {
        for pad in [0, 1] {
            for _ in 0..10 {
                let ci = rand::Rng::gen_range(&mut r, 1..=4);
                let co = rand::Rng::gen_range(&mut r, 1..=4);
                let h = rand::Rng::gen_range(&mut r, 3..=8);
                let w = rand::Rng::gen_range(&mut r, 3..=8);
                let k = if rand::Rng::gen_bool(&mut r, 0.5) { 3 } else { 1 };
                let x = uniform(&[ci, h, w], -1.0, 1.0, &mut r);
                let wt = uniform(&[co, ci, k, k], -1.0, 1.0, &mut r);
                let b = uniform(&[co], -1.0, 1.0, &mut r);
                let got = kernels::conv2d(&x, &wt, &b, stride, pad).unwrap();
                let (shape, want) = conv_oracle(&x, &wt, &b, stride, pad);
                assert_eq!(got.shape(), shape.as_slice());
                let err = max_abs_diff(got.data(), &want);
                assert!(err < 1e-6 * 8.0, "stride {stride} pad {pad}: {err}");
            }
        }
    }
}

#[test]
fn conv_documented_fixture() {
    let mut r = rng(2, "conv-fixture");
    let x = uniform(&[2, 4, 4], -1.0, 1.0, &mut r);
    let w = uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
    let b = uniform(&[3], -1.0, 1.0, &mut r);
    let got = kernels::conv2d(&x, &w, &b, 2, 1).unwrap();
    assert_eq!(got.shape(), [3, 2, 2]);
    let (_, want) = conv_oracle(&x, &w, &b, 2, 1);
    assert!(max_abs_diff(got.data(), &want) < 1e-6);
}

#[test]
fn dense_matches_dot_product_loop() {
    let mut r = rng(3, "dense-oracle");
    let x = uniform(&[4], -1.0, 1.0, &mut r);
    let w = uniform(&[3, 4], -1.0, 1.0, &mut r);
    let b = uniform(&[3], -1.0, 1.0, &mut r);
    let got = kernels::dense(&x, &w, &b).unwrap();
    assert!(max_abs_diff(got.data(), &dense_oracle(&x, &w, &b)) < 1e-6);
    assert!(kernels::dense(&uniform(&[5], 0.0, 1.0, &mut r), &w, &b).is_err());
}

#[test]
fn activations_match_closed_forms() {
    for x in [-4.0f64, -1.0, -0.3, 0.0, 0.2, 1.0, 3.5] {
        let xf = x as f32;
        assert!((f64::from(Activation::Silu.apply(xf)) - silu_oracle(x)).abs() < 1e-6);
        assert!((f64::from(Activation::Sigmoid.apply(xf)) - sigmoid_oracle(x)).abs() < 1e-6);
        assert!((f64::from(Activation::Tanh.apply(xf)) - x.tanh()).abs() < 1e-6);
        assert_eq!(Activation::Relu.apply(xf), xf.max(0.0));
    }
    assert!((Activation::Tanh.apply(1.0) - 0.761594).abs() < 1e-6);
}

#[test]
fn every_differentiable_op_passes_gradient_checks() {
    let reports = vec![
        suites::conv(),
        suites::dense(),
        suites::relu(),
        suites::silu(),
        suites::tanh(),
        suites::sigmoid(),
        suites::pool(),
        suites::add(),
        suites::mul_channelwise(),
    ];
    for r in reports {
        assert!(r.passed(), "{}: worst relative error {:.3e} over {} trials", r.op, r.worst, r.trials);
    }
}

#[test]
fn composed_network_gradient() {
    let mut r = rng(4, "composed");
    let x = uniform(&[2, 6, 6], -1.0, 1.0, &mut r);
    let w = uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut r);
    let b = uniform(&[3], -0.2, 0.2, &mut r);
    let dw = uniform(&[2, 3], -1.0, 1.0, &mut r);
    let db = uniform(&[2], -1.0, 1.0, &mut r);
    let proj = uniform(&[2], -1.0, 1.0, &mut r);
    let rep = sideload_core::tensor::grad_check(
        &[("x", x), ("conv.w", w), ("conv.b", b), ("dense.w", dw), ("dense.b", db)],
        1e-3,
        |tape, v| {
            let h = tape.conv2d(v[0], v[1], v[2], 2, 1)?;
            let h = tape.silu(h);
            let p = tape.global_avg_pool(h)?;
            let y = tape.dense(p, v[3], v[4])?;
            dot(tape, y, &proj)
        },
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-3, "{rep:?}");
}

#[test]
fn forward_is_bit_deterministic() {
    let mut r = rng(5, "det");
    let x = uniform(&[3, 16, 16], 0.0, 1.0, &mut r);
    let w = uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut r);
    let b = uniform(&[4], -1.0, 1.0, &mut r);
    let a = kernels::conv2d(&x, &w, &b, 2, 1).unwrap();
    let c = kernels::conv2d(&x, &w, &b, 2, 1).unwrap();
    assert!(a.bit_eq(&c));
}

#[test]
fn checkpoint_header_layout() {
    let mut ck = Checkpoint::new();
    ck.insert("a", Tensor::new([2], vec![1.0, -2.0]).unwrap());
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"NTB1");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u16::from_le_bytes(bytes[8..10].try_into().unwrap()), 1);
    assert_eq!(bytes[10], b'a');
    assert_eq!(bytes[11], 1);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
    assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1.0);
    assert_eq!(bytes.len(), 24);
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
}

fn store_with_frozen(values: &[f32], frozen: &[bool]) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, (&v, &f)) in values.iter().zip(frozen).enumerate() {
        let id = s.insert(format!("p{i}"), Tensor::full([3], v)).unwrap();
        s.get_mut(id).frozen = f;
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn frozen_parameters_survive_any_number_of_steps(
        values in prop::collection::vec(-2.0f32..2.0, 1..5),
        mask in prop::collection::vec(any::<bool>(), 5),
        steps in 1usize..20,
        grad in -5.0f32..5.0,
        adam in any::<bool>(),
    ) {
        let frozen = &mask[..values.len()];
        let mut store = store_with_frozen(&values, frozen);
        let before = store.checkpoint(None);
        let kind = if adam { OptimizerKind::Adam } else { OptimizerKind::Sgd };
        let mut opt = kind.build(&store, 0.1);
        for _ in 0..steps {
            let mut g = ParamGrads::empty(store.len());
            for (id, _) in store.iter() {
                g.set(id, Tensor::full([3], grad));
            }
            opt.step(&mut store, &g).unwrap();
        }
        prop_assert_eq!(opt.steps(), steps as u64);
        for (i, f) in frozen.iter().enumerate() {
            let name = format!("p{i}");
            let same = store.by_name(&name).unwrap().tensor.bit_eq(before.get(&name).unwrap());
            if *f {
                prop_assert!(same);
            } else if grad != 0.0 {
                prop_assert!(!same);
            }
        }
    }

    #[test]
    fn channel_scale_by_ones_is_identity(c in 1usize..5, h in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed, "scale");
        let f = uniform(&[c, h, 2], -3.0, 3.0, &mut r);
        let out = kernels::mul_channelwise(&f, &Tensor::full([c], 1.0)).unwrap();
        prop_assert!(out.bit_eq(&f));
    }

    #[test]
    fn pooling_is_channel_mean(c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed, "pool");
        let x = uniform(&[c, h, w], -1.0, 1.0, &mut r);
        let got = kernels::global_avg_pool(&x).unwrap();
        for ch in 0..c {
            let m: f64 = x.channel(ch).iter().map(|&v| f64::from(v)).sum::<f64>() / (h * w) as f64;
            prop_assert!((f64::from(got.data()[ch]) - m).abs() < 1e-6);
        }
    }

    #[test]
    fn engine_outputs_stay_finite(seed in any::<u64>()) {
        let mut r = rng(seed, "finite");
        let x = uniform(&[2, 5, 5], -10.0, 10.0, &mut r);
        let w = uniform(&[2, 2, 3, 3], -3.0, 3.0, &mut r);
        let b = uniform(&[2], -3.0, 3.0, &mut r);
        let mut tape = Tape::new();
        let v: Vec<_> = [x, w, b].into_iter().map(|t| tape.leaf(t, true)).collect();
        let h = tape.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
        let s = tape.sigmoid(h);
        let t = tape.tanh(s);
        let p = tape.global_avg_pool(t).unwrap();
        prop_assert!(tape.value(p).is_finite());
        let proj = Tensor::full([2], 1.0);
        let out = dot(&mut tape, p, &proj).unwrap();
        let g = tape.backward(out).unwrap();
        for var in v {
            prop_assert!(g.get(var).unwrap().is_finite());
        }
    }
}
