use std::collections::BTreeMap;

use dismob_core::nn::checkpoint::{decode, encode};
use dismob_core::nn::gradcheck::{compare_gradients, grad_check, GradCheckOptions};
use dismob_core::nn::layers::{attention, cross_attention, dense, multi_head, AttnWeights};
use dismob_core::nn::optim::{sgd_step, Adam};
use dismob_core::nn::{glorot, Graph, ParamSet, Parameter, Tag, Tensor, Var};
use dismob_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn put(ps: &mut ParamSet, name: &str, t: Tensor) {
    ps.insert(Parameter::new(name, t, Tag::Shared)).unwrap();
}

fn weights_for(g: &Graph, v: Var, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..g.value(v).len()).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn opts(eps: f64) -> GradCheckOptions {
    GradCheckOptions { eps, ..GradCheckOptions::default() }
}

#[test]
fn dense_identity_and_zero_input() {
    let mut ps = ParamSet::new();
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 4] = 1.0;
    }
    put(&mut ps, "w", eye);
    put(&mut ps, "b", Tensor::zeros(&[1, 3]));
    put(&mut ps, "b2", Tensor::from_vec(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap());
    let mut g = Graph::new(&ps);
    let x = g.constant(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-4.0, 5.0, 0.25]]).unwrap());
    let (w, b) = (g.param("w").unwrap(), g.param("b").unwrap());
    let y = dense(&mut g, x, w, b).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let z = g.constant(&Tensor::zeros(&[2, 3]));
    let b2 = g.param("b2").unwrap();
    let y = dense(&mut g, z, w, b2).unwrap();
    assert_eq!(g.value(y), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
}

#[test]
fn dense_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamSet::new();
    put(&mut ps, "x", random(&mut rng, &[3, 4]));
    put(&mut ps, "w", random(&mut rng, &[4, 2]));
    put(&mut ps, "b", random(&mut rng, &[1, 2]));
    let report = grad_check(
        &ps,
        |g| {
            let (x, w, b) = (g.param("x")?, g.param("w")?, g.param("b")?);
            let y = dense(g, x, w, b)?;
            let t = g.silu(y);
            let wts = weights_for(g, t, 9);
            g.dot_const(t, &wts)
        },
        &opts(1e-3),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert_eq!(report.coords_checked, 12 + 8 + 2);
}

#[test]
fn linear_fragment_is_exact_and_corrupted_backward_is_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamSet::new();
    put(&mut ps, "w", random(&mut rng, &[4, 3]));
    put(&mut ps, "b", random(&mut rng, &[1, 3]));
    let x = random(&mut rng, &[5, 4]);
    let build = |g: &mut Graph| {
        let xv = g.constant(&x);
        let (w, b) = (g.param("w")?, g.param("b")?);
        let y = dense(g, xv, w, b)?;
        let wts = weights_for(g, y, 3);
        g.dot_const(y, &wts)
    };
    let report = grad_check(&ps, build, &opts(1e-3)).unwrap();
    assert!(report.max_rel_error < 1e-7, "{report:?}");

    let mut analytic = {
        let mut g = Graph::new(&ps);
        let out = build(&mut g).unwrap();
        g.backward(out).unwrap()
    };
    analytic.scale(1.5);
    let bad = compare_gradients(&ps, build, &analytic, &opts(1e-3)).unwrap();
    assert!(bad.max_rel_error > 1e-2, "{bad:?}");
}

#[test]
fn attention_single_token_and_identical_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamSet::new();
    for n in ["wq", "wk", "wv"] {
        put(&mut ps, n, random(&mut rng, &[8, 4]));
    }
    let mut g = Graph::new(&ps);
    let (wq, wk, wv) = (g.param("wq").unwrap(), g.param("wk").unwrap(), g.param("wv").unwrap());
    let x1 = g.constant(&random(&mut rng, &[1, 8]));
    let y = attention(&mut g, x1, wq, wk, wv).unwrap();
    let xv = g.matmul(x1, wv).unwrap();
    for (a, b) in g.value(y).iter().zip(g.value(xv)) {
        assert!((a - b).abs() < 1e-12);
    }

    let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
    let x = g.constant(&Tensor::from_rows(&[row.clone(), row.clone(), row]).unwrap());
    let y = attention(&mut g, x, wq, wk, wv).unwrap();
    let v = g.value(y);
    assert_eq!(&v[0..4], &v[4..8]);
    assert_eq!(&v[4..8], &v[8..12]);
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ps = ParamSet::new();
    put(&mut ps, "x", random(&mut rng, &[4, 8]));
    for n in ["wq", "wk", "wv"] {
        put(&mut ps, n, random(&mut rng, &[8, 5]));
    }
    let report = grad_check(
        &ps,
        |g| {
            let x = g.param("x")?;
            let (wq, wk, wv) = (g.param("wq")?, g.param("wk")?, g.param("wv")?);
            let y = attention(g, x, wq, wk, wv)?;
            let wts = weights_for(g, y, 5);
            g.dot_const(y, &wts)
        },
        &opts(1e-5),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn cross_attention_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = ParamSet::new();
    put(&mut ps, "wq", random(&mut rng, &[8, 4]));
    put(&mut ps, "wk", random(&mut rng, &[6, 4]));
    put(&mut ps, "wv", random(&mut rng, &[6, 3]));
    let mut g = Graph::new(&ps);
    let (wq, wk, wv) = (g.param("wq").unwrap(), g.param("wk").unwrap(), g.param("wv").unwrap());
    let q = g.constant(&random(&mut rng, &[4, 8]));
    let kv1 = g.constant(&random(&mut rng, &[1, 6]));
    let y = cross_attention(&mut g, q, kv1, wq, wk, wv).unwrap();
    let expect = g.matmul(kv1, wv).unwrap();
    let e = g.value(expect).to_vec();
    for r in g.value(y).chunks(3) {
        for (a, b) in r.iter().zip(&e) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let kv0 = g.constant(&Tensor::zeros(&[3, 6]));
    let y = cross_attention(&mut g, q, kv0, wq, wk, wv).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.0));

    put(&mut ps, "q", random(&mut rng, &[4, 8]));
    put(&mut ps, "kv", random(&mut rng, &[3, 6]));
    let report = grad_check(
        &ps,
        |g| {
            let (q, kv) = (g.param("q")?, g.param("kv")?);
            let (wq, wk, wv) = (g.param("wq")?, g.param("wk")?, g.param("wv")?);
            let y = cross_attention(g, q, kv, wq, wk, wv)?;
            let wts = weights_for(g, y, 6);
            g.dot_const(y, &wts)
        },
        &opts(1e-5),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ps = ParamSet::new();
    let mut g = Graph::new(&ps);
    let mut t = random(&mut rng, &[10, 7]);
    t.data_mut().iter_mut().for_each(|v| *v *= 50.0);
    let x = g.constant(&t);
    let s = g.softmax_rows(x);
    for row in g.value(s).chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}

/// Exercises every op of the tape in one fragment.
#[test]
fn composite_fragment_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ps = ParamSet::new();
    put(&mut ps, "table", random(&mut rng, &[5, 3]));
    put(&mut ps, "row", random(&mut rng, &[1, 6]));
    put(&mut ps, "alt", random(&mut rng, &[1, 6]));
    put(&mut ps, "gamma", random(&mut rng, &[1, 6]));
    put(&mut ps, "beta", random(&mut rng, &[1, 6]));
    put(&mut ps, "x", random(&mut rng, &[4, 3]));
    for n in ["wq", "wk", "wv", "wo"] {
        put(&mut ps, n, random(&mut rng, &[6, 6]));
    }
    let target: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
    let report = grad_check(
        &ps,
        |g| {
            let table = g.param("table")?;
            let gathered = g.gather_rows(table, &[0, 3, 3, 1])?;
            let x = g.param("x")?;
            let cat = g.concat_cols(&[x, gathered])?;
            let row = g.param("row")?;
            let cat = g.add_row(cat, row)?;
            let alt = g.param("alt")?;
            let rep = g.repeat_rows(alt, 4);
            let mixed = g.row_mix(cat, rep, &[true, false, true, true])?;
            let (gm, bt) = (g.param("gamma")?, g.param("beta")?);
            let ln = g.layer_norm(mixed, gm, bt)?;
            let w = AttnWeights { wq: g.param("wq")?, wk: g.param("wk")?, wv: g.param("wv")?, wo: g.param("wo")? };
            let att = multi_head(g, ln, ln, &w, 2, 2)?;
            let prod = g.mul(att, mixed)?;
            let diff = g.sub(prod, ln)?;
            let sc = g.row_scale(diff, &[0.5, 2.0, -1.0, 1.5])?;
            let s = g.silu(sc);
            let top = g.slice_cols(s, 1, 4)?;
            let bottom = g.slice_cols(s, 0, 2)?;
            let both = g.concat_cols(&[top, bottom])?;
            let nrm = g.row_normalize(both);
            let halves = g.concat_rows(&[nrm, nrm])?;
            let sc2 = g.scale(halves, 3.0);
            let sm = g.softmax_rows(sc2);
            let l1 = g.mse_const(both, &target)?;
            let wts = weights_for(g, sm, 8);
            let l2 = g.dot_const(sm, &wts)?;
            g.add(l1, l2)
        },
        &opts(1e-5),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut ps = ParamSet::new();
    ps.insert(Parameter::new("w", Tensor::from_vec(&[1, 1], vec![2.0]).unwrap(), Tag::Shared).frozen()).unwrap();
    put(&mut ps, "v", Tensor::from_vec(&[1, 1], vec![3.0]).unwrap());
    let mut g = Graph::new(&ps);
    let (w, v) = (g.param("w").unwrap(), g.param("v").unwrap());
    let y = g.mul(w, v).unwrap();
    let grads = g.backward(y).unwrap();
    assert!(grads.param_by_id(0).is_none());
    assert_eq!(grads.param_by_id(1).unwrap(), &[2.0]);
}

#[test]
fn shape_mismatch_is_reported() {
    let ps = ParamSet::new();
    let mut g = Graph::new(&ps);
    let a = g.constant(&Tensor::zeros(&[2, 3]));
    let b = g.constant(&Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::InvalidShape(_))));
    assert!(matches!(g.backward(a), Err(Error::InvalidShape(_))));
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ps = ParamSet::new();
    for n in ["wq", "wk", "wv"] {
        put(&mut ps, n, random(&mut rng, &[6, 6]));
    }
    let x = random(&mut rng, &[5, 6]);
    let run = || {
        let mut g = Graph::new(&ps);
        let xv = g.constant(&x);
        let (wq, wk, wv) = (g.param("wq").unwrap(), g.param("wk").unwrap(), g.param("wv").unwrap());
        let y = attention(&mut g, xv, wq, wk, wv).unwrap();
        g.value(y).to_vec()
    };
    assert_eq!(run(), run());
}

fn sample_set() -> ParamSet {
    let mut ps = ParamSet::new();
    ps.insert(Parameter::new("predictor.w", glorot(1, "predictor.w", 4, 3, &[4, 3]), Tag::Shared)).unwrap();
    ps.insert(Parameter::new("codec.Z", glorot(1, "codec.Z", 24, 8, &[24, 8]), Tag::Private("toy".into())))
        .unwrap();
    ps.insert(Parameter::new("codec.D", glorot(1, "codec.D", 9, 4, &[9, 4]), Tag::Private("toy".into())).frozen())
        .unwrap();
    ps
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let ps = sample_set();
    let mut meta = BTreeMap::new();
    meta.insert("width".to_string(), serde_json::json!(32));
    let bytes = encode(&ps, &meta).unwrap();
    let ck = decode(&bytes).unwrap();
    assert_eq!(ck.meta, meta);
    assert_eq!(ck.params.names(), ps.names());
    for (a, b) in ck.params.iter().zip(ps.iter()) {
        assert_eq!(a.tag, b.tag);
        assert_eq!(a.trainable, b.trainable);
        assert_eq!(a.value.shape(), b.value.shape());
        let ab: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
    }
}

#[test]
fn checkpoint_errors() {
    let bytes = encode(&sample_set(), &BTreeMap::new()).unwrap();
    assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Integrity(_))));
    let mut corrupt = bytes.clone();
    corrupt[20] = b'#';
    assert!(matches!(decode(&corrupt), Err(Error::Integrity(_))));
    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x40;
    assert!(matches!(decode(&flipped), Err(Error::Integrity(_))));
    assert!(matches!(decode(&bytes_with_version(&bytes, "7")), Err(Error::Version { .. })));
}

fn bytes_with_version(bytes: &[u8], v: &str) -> Vec<u8> {
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    let mut out = format!("DISMOB-CHECKPOINT {v}").into_bytes();
    out.extend_from_slice(&bytes[nl..]);
    out
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut ps = sample_set();
    for p in ps.iter_mut() {
        p.grad.fill(0.3);
    }
    let before = ps.clone();
    sgd_step(&mut ps, 0.0, |_| true).unwrap();
    assert_eq!(ps, before);
    let mut adam = Adam::new(0.0);
    adam.step(&mut ps, |_| true).unwrap();
    assert_eq!(ps.get("predictor.w").unwrap().value, before.get("predictor.w").unwrap().value);
}

#[test]
fn sgd_skips_frozen_and_applies_exact_delta() {
    let mut ps = sample_set();
    for p in ps.iter_mut() {
        p.grad.fill(0.25);
    }
    let before = ps.clone();
    sgd_step(&mut ps, 0.5, |_| true).unwrap();
    assert_eq!(ps.get("codec.D").unwrap().value, before.get("codec.D").unwrap().value);
    for (a, b) in ps.get("predictor.w").unwrap().value.data().iter().zip(before.get("predictor.w").unwrap().value.data()) {
        assert_eq!(*a, (b - 0.125) as f32 as f64);
    }
}

#[test]
fn non_finite_gradient_names_parameter() {
    let mut ps = sample_set();
    ps.get_mut("codec.Z").unwrap().grad.data_mut()[3] = f64::NAN;
    match sgd_step(&mut ps, 0.1, |_| true) {
        Err(Error::NumericFailure(msg)) => assert!(msg.contains("codec.Z")),
        other => panic!("{other:?}"),
    }
}
