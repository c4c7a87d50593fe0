mod common;

use std::collections::BTreeMap;

use common::{dataset, grid, tiny_model, TRUTH};
use dismob_core::meta::*;
use dismob_core::nn::checkpoint::{decode, encode};
use dismob_core::nn::{Graph, ParamSet, Parameter, Tag, Tensor};
use dismob_core::training::{evaluate_loss, prepare_city, DataMode};

fn scalar_set(name: &str, v: f64, tag: Tag) -> ParamSet {
    let mut ps = ParamSet::new();
    ps.insert(Parameter::new(name, Tensor::from_vec(&[1, 1], vec![v]).unwrap(), tag)).unwrap();
    ps
}

/// Fills the gradient of `(theta - c)^2` for the scalar parameter `name`.
fn quadratic_grad(m: &mut ParamSet, name: &str, c: f64) -> f64 {
    let grads = {
        let mut g = Graph::new(m);
        let p = g.param(name).unwrap();
        let loss = g.mse_const(p, &[c]).unwrap();
        g.backward(loss).unwrap()
    };
    m.accumulate_scaled(&grads, 1.0).unwrap();
    let v = m.get(name).unwrap().value.data()[0];
    (v - c).powi(2)
}

#[test]
fn assemble_isolates_copies() {
    let cfg = tiny_model();
    let g = grid(3, 3, 2);
    let mut store = ParamPartition::new(fresh_shared(&cfg, 1).unwrap());
    let private = store.private_for(&cfg, "a", &g, 1).unwrap().clone();
    let expected = fresh_private(&cfg, "a", &g, 1).unwrap();
    assert_eq!(private, expected);

    let mut m1 = assemble(&store.shared, &private).unwrap();
    let m2 = assemble(&store.shared, &private).unwrap();
    let before = store.clone();
    m1.get_mut("prompt.null").unwrap().value.data_mut()[0] += 1.0;
    m1.get_mut("codec.Z").unwrap().value.data_mut()[0] += 1.0;
    assert_eq!(m2, assemble(&store.shared, &private).unwrap());
    assert_eq!(store, before);

    let mut names = m2.names();
    names.sort();
    let mut want: Vec<String> = store.shared.names().into_iter().chain(private.names()).collect();
    want.sort();
    assert_eq!(names, want);
    assert!(store.shared.names().iter().all(|n| private.get(n).is_none()));
    store.validate().unwrap();
}

#[test]
fn descend_identity_and_closed_form() {
    let mut m = scalar_set("theta", 1.5, Tag::Shared);
    let before = m.clone();
    descend(&mut m, 3, 0.0, |m, _| Ok(quadratic_grad(m, "theta", 0.5))).unwrap();
    assert_eq!(m.get("theta").unwrap().value, before.get("theta").unwrap().value);

    descend(&mut m, 5, 0.7, |_, _| Ok(0.0)).unwrap();
    assert_eq!(m.get("theta").unwrap().value, before.get("theta").unwrap().value);

    // d/dtheta (theta - 0.5)^2 at 1.5 is 2, so one step of 0.25 lands on 1.0
    descend(&mut m, 1, 0.25, |m, _| Ok(quadratic_grad(m, "theta", 0.5))).unwrap();
    assert_eq!(m.get("theta").unwrap().value.data()[0], 1.0);
}

#[test]
fn meta_gradient_closed_form_and_isolation() {
    let mut shared = scalar_set("theta", 2.0, Tag::Shared);
    let mut adapted = scalar_set("theta", 1.25, Tag::Shared);
    adapted.insert(Parameter::new("p", Tensor::from_vec(&[1, 1], vec![3.0]).unwrap(), Tag::Private("a".into()))).unwrap();
    let private = scalar_set("p", 3.0, Tag::Private("a".into()));
    let mut store = ParamPartition { shared: shared.clone(), private: BTreeMap::from([("a".to_string(), private)]) };

    adapted.zero_grad();
    quadratic_grad(&mut adapted, "theta", 0.25);
    apply_meta_gradient(&mut shared, &adapted, 0.0).unwrap();
    assert_eq!(shared.get("theta").unwrap().value.data()[0], 2.0);

    // first-order step: gradient 2 * (1.25 - 0.25) = 2 taken at the adapted value
    apply_meta_gradient(&mut store.shared, &adapted, 0.125).unwrap();
    assert_eq!(store.shared.get("theta").unwrap().value.data()[0], 2.0 - 0.125 * 2.0);
    assert_eq!(store.private["a"].get("p").unwrap().value.data()[0], 3.0);
}

#[test]
fn meta_store_round_trips_through_checkpoint() {
    let cfg = tiny_model();
    let g = grid(3, 3, 2);
    let mut store = ParamPartition::new(fresh_shared(&cfg, 2).unwrap());
    store.private_for(&cfg, "a", &g, 2).unwrap();
    store.private_for(&cfg, "b", &g, 2).unwrap();
    let bytes = encode(&store.flatten().unwrap(), &BTreeMap::new()).unwrap();
    let back = ParamPartition::unflatten(&decode(&bytes).unwrap().params).unwrap();
    assert_eq!(back, store);

    // a meta checkpoint assembled for an unseen city: shared loaded, private fresh
    let mut loaded = back.clone();
    let fresh = loaded.private_for(&cfg, "unseen", &g, 2).unwrap().clone();
    assert_eq!(fresh, fresh_private(&cfg, "unseen", &g, 2).unwrap());
    let model = assemble(&loaded.shared, &fresh).unwrap();
    assert_eq!(model.get("prompt.null").unwrap().value, store.shared.get("prompt.null").unwrap().value);
}

#[test]
fn unflatten_rejects_mismatched_tags() {
    let mut flat = ParamSet::new();
    flat.insert(Parameter::new("codec.Z", Tensor::zeros(&[1, 1]), Tag::Private("a".into()))).unwrap();
    assert!(ParamPartition::unflatten(&flat).is_err());
}

fn meta_fixture() -> (Vec<dismob_core::diffusion::CityData>, dismob_core::diffusion::ModelConfig) {
    let g = grid(3, 3, 3);
    let a = prepare_city(&dataset("a", &g, 60, 1), &TRUTH, DataMode::Disaster).unwrap();
    let b = prepare_city(&dataset("b", &g, 60, 2), &TRUTH, DataMode::Disaster).unwrap();
    (vec![a, b], tiny_model())
}

#[test]
fn one_round_equals_inner_plus_meta_step() {
    let (cities, cfg) = meta_fixture();
    let meta = MetaConfig { inner_steps: 3, meta_rounds: 1, batch_size: 4, val_windows: 4, ..MetaConfig::default() };
    let mut store = ParamPartition::new(fresh_shared(&cfg, 3).unwrap());
    meta_train(&mut store, &cities[..1], &cfg, &meta, 3).unwrap();

    let mut manual = ParamPartition::new(fresh_shared(&cfg, 3).unwrap());
    let city = &cities[0];
    let private = manual.private_for(&cfg, &city.name, &city.grid, 3).unwrap().clone();
    let mut adapted = assemble(&manual.shared, &private).unwrap();
    let visit = dismob_core::rng::derive_seed(3, "round0/a");
    inner_update(&mut adapted, &cfg, city, 3, meta.lr_inner, 4, visit).unwrap();
    meta_update(&mut manual.shared, &mut adapted, &cfg, city, meta.lr_meta, 4, visit).unwrap();
    assert_eq!(manual.shared, store.shared);
}

#[test]
fn meta_training_is_deterministic_and_improves() {
    let (cities, cfg) = meta_fixture();
    let meta = MetaConfig {
        inner_steps: 4,
        meta_rounds: 10,
        batch_size: 8,
        val_windows: 16,
        lr_inner: 0.05,
        lr_meta: 0.05,
        ..MetaConfig::default()
    };
    let run = || {
        let mut store = ParamPartition::new(fresh_shared(&cfg, 4).unwrap());
        let log = meta_train(&mut store, &cities, &cfg, &meta, 4).unwrap();
        (store, log)
    };
    let (a, log) = run();
    let (b, _) = run();
    assert_eq!(a.flatten().unwrap(), b.flatten().unwrap());
    let mean = |r: usize| log.iter().filter(|l| l.round == r).map(|l| l.val_loss).sum::<f64>() / 2.0;
    assert!(mean(9) < mean(0), "round 1 {} round 10 {}", mean(0), mean(9));
}

#[test]
fn zero_learning_rates_leave_everything_unchanged() {
    let (cities, cfg) = meta_fixture();
    let meta = MetaConfig { inner_steps: 2, meta_rounds: 2, batch_size: 4, val_windows: 4, lr_inner: 0.0, lr_meta: 0.0, ..MetaConfig::default() };
    let mut store = ParamPartition::new(fresh_shared(&cfg, 5).unwrap());
    let shared_before = store.shared.clone();
    meta_train(&mut store, &cities, &cfg, &meta, 5).unwrap();
    let values = |a: &ParamSet| a.iter().map(|p| p.value.clone()).collect::<Vec<_>>();
    assert_eq!(values(&store.shared), values(&shared_before));
    for c in &cities {
        assert_eq!(values(&store.private[&c.name]), values(&fresh_private(&cfg, &c.name, &c.grid, 5).unwrap()));
    }
}

#[test]
fn adaptation_leaves_store_and_starts_from_assembly() {
    let (cities, cfg) = meta_fixture();
    let shared = fresh_shared(&cfg, 6).unwrap();
    let target = &cities[1];
    let meta = MetaConfig { target_steps: 0, batch_size: 4, ..MetaConfig::default() };
    let (m, log) = adapt_target(&shared, target, &cfg, &meta, 6).unwrap();
    assert!(log.is_empty());
    assert_eq!(m, assemble(&shared, &fresh_private(&cfg, &target.name, &target.grid, 6).unwrap()).unwrap());

    let before = shared.clone();
    let meta = MetaConfig { target_steps: 5, batch_size: 4, ..MetaConfig::default() };
    let (m, log) = adapt_target(&shared, target, &cfg, &meta, 6).unwrap();
    assert_eq!(log.len(), 5);
    assert_eq!(shared, before);
    assert!(evaluate_loss(&m, &cfg, target, &target.train, 8, 1).unwrap().is_finite());

    let mut empty = target.clone();
    empty.train.clear();
    assert!(matches!(adapt_target(&shared, &empty, &cfg, &meta, 6), Err(dismob_core::Error::InsufficientData(_))));
}

#[test]
fn config_rejects_bad_rates() {
    let bad = MetaConfig { lr_inner: -1.0, ..MetaConfig::default() };
    match bad.validate() {
        Err(dismob_core::Error::InvalidConfig { path, .. }) => assert_eq!(path, "meta.lr_inner"),
        other => panic!("{other:?}"),
    }
}
