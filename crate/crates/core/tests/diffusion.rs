use dismob_core::codec::{encode, CodecConfig};
use dismob_core::conditioning::{PredictorConfig, PromptContext};
use dismob_core::diffusion::*;
use dismob_core::mobility::{GridSpec, Trajectory};
use dismob_core::nn::gradcheck::GradCheckOptions;
use dismob_core::nn::optim::{Optimizer, OptimizerKind};
use dismob_core::nn::{Graph, Tensor};
use dismob_core::physics::{physics_loss, DecayParams};
use dismob_core::synthworld::{build_city_dataset, DisasterScenario, WorldConfig};
use dismob_core::training::{gradcheck_model, init_model, prepare_city, train_steps, DataMode};
use dismob_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn grid() -> GridSpec {
    GridSpec { rows: 4, cols: 4, cell_km: 1.0, slots_per_day: 24, days: 2, slot_minutes: 60 }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        predictor: PredictorConfig {
            layers: 1,
            heads: 2,
            model_width: 16,
            d_k: 16,
            d_c: 4,
            prompt_mlp_widths: vec![8],
            ffn_width: 32,
            ..PredictorConfig::default()
        },
        codec: CodecConfig { spatial_width: 6, temporal_width: 3, radius_cells: 1.5 },
        schedule: ScheduleConfig { kind: ScheduleKind::Linear, steps: 20, beta_min: 1e-3, beta_max: 0.3 },
        ..ModelConfig::default()
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[test]
fn linear_schedule_matches_product() {
    let s = make_schedule(ScheduleKind::Linear, 100, 1e-4, 2e-2).unwrap();
    assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
    let mut prod = 1.0;
    for i in 0..100 {
        prod *= 1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 99.0);
    }
    assert!((s.alpha_bars[99] - prod).abs() < 1e-12);
    assert_eq!(s.alpha_bars[0], s.alphas[0]);
}

#[test]
fn cosine_schedule_endpoints() {
    let t = 100;
    let s = make_schedule(ScheduleKind::Cosine, t, 1e-4, 2e-2).unwrap();
    let f = |x: f64| (((x / t as f64) + 0.008) / 1.008 * std::f64::consts::PI / 2.0).cos().powi(2);
    assert!((s.alpha_bars[0] - f(1.0) / f(0.0)).abs() < 1e-12);
    assert!((s.alpha_bars[0] - 1.0).abs() < 1e-2);
    assert!(s.alpha_bars[t - 1] < 0.05);
    assert!(s.betas.iter().all(|&b| b > 0.0 && b <= 0.999));
    assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn forward_noise_identity_and_zero_cases() {
    let s = make_schedule(ScheduleKind::Linear, 10, 1e-3, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let e0 = Tensor::from_vec(&[3, 5], normals(&mut rng, 15)).unwrap();
    let eps = normals(&mut rng, 9);
    assert_eq!(forward_noise(&e0, 3, 0, &eps, &s).unwrap(), e0);

    let zero = Tensor::zeros(&[3, 5]);
    let et = forward_noise(&zero, 3, 7, &eps, &s).unwrap();
    let b = (1.0 - s.alpha_bars[6]).sqrt();
    for r in 0..3 {
        for j in 0..3 {
            assert_eq!(et.get(r, j), b * eps[r * 3 + j]);
        }
        assert_eq!(&et.row(r)[3..], &[0.0, 0.0]);
    }
    assert!(matches!(forward_noise(&e0, 3, 7, &eps[..8], &s), Err(Error::InvalidShape(_))));
}

#[test]
fn forward_noise_inverts_exactly() {
    let s = make_schedule(ScheduleKind::Linear, 50, 1e-4, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let e0 = Tensor::from_vec(&[20, 4], normals(&mut rng, 80)).unwrap();
    for t in [1, 25, 50] {
        let eps = normals(&mut rng, 80);
        let et = forward_noise(&e0, 4, t, &eps, &s).unwrap();
        let ab = s.alpha_bars[t - 1];
        for i in 0..80 {
            let back = (et.data()[i] - (1.0 - ab).sqrt() * eps[i]) / ab.sqrt();
            assert!((back - e0.data()[i]).abs() < 1e-6);
        }
    }
}

#[test]
fn guided_noise_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = normals(&mut rng, 12);
    let u = normals(&mut rng, 12);
    assert_eq!(guided_noise(&c, &u, 0.0).unwrap(), c);
    assert_eq!(guided_noise(&c, &c, 3.7).unwrap(), c);
    let g = guided_noise(&c, &u, 0.5).unwrap();
    for i in 0..12 {
        assert!((g[i] - (1.5 * c[i] - 0.5 * u[i])).abs() < 1e-15);
    }
    let g0 = guided_noise(&c, &u, 0.0).unwrap();
    for omega in [0.3, 1.0, 2.5] {
        let g = guided_noise(&c, &u, omega).unwrap();
        for i in 0..12 {
            assert!((g[i] - g0[i] - omega * (c[i] - u[i])).abs() < 1e-12);
        }
    }
}

#[test]
fn denoise_step_matches_formula() {
    let s = make_schedule(ScheduleKind::Linear, 30, 1e-3, 0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let e = normals(&mut rng, 10);
    let eps = normals(&mut rng, 10);
    let z = normals(&mut rng, 10);

    let at1 = denoise_step(&e, 1, &eps, &s, &z).unwrap();
    let at1_no_z = denoise_step(&e, 1, &eps, &s, &[0.0; 10]).unwrap();
    assert_eq!(at1, at1_no_z);

    let t = 17;
    let out = denoise_step(&e, t, &eps, &s, &z).unwrap();
    let beta = 1e-3 + (0.2 - 1e-3) * (t - 1) as f64 / 29.0;
    let mut ab = 1.0;
    let mut ab_prev = 1.0;
    for i in 0..t {
        ab_prev = ab;
        ab *= 1.0 - (1e-3 + (0.2 - 1e-3) * i as f64 / 29.0);
    }
    let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
    for i in 0..10 {
        let want = (e[i] - beta / (1.0 - ab).sqrt() * eps[i]) / (1.0 - beta).sqrt() + sigma * z[i];
        assert!((out[i] - want).abs() < 1e-10);
    }
    assert!(matches!(denoise_step(&e, 31, &eps, &s, &z), Err(Error::Domain(_))));
}

fn loss_fixture() -> (dismob_core::nn::ParamSet, Vec<Trajectory>, GridSpec) {
    let grid = grid();
    let cfg = tiny_model();
    let params = init_model(&cfg, &grid, "c", 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let trajs = (0..64)
        .map(|i| {
            let locs: Vec<usize> = (0..24).map(|_| rng.random_range(0..16)).collect();
            Trajectory::new(format!("u{i}"), 0, &locs).unwrap()
        })
        .collect();
    (params, trajs, grid)
}

#[test]
fn oracle_predictor_has_zero_loss() {
    let (params, trajs, grid) = loss_fixture();
    let s = tiny_model().schedule.build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draws: Vec<NoiseDraw> = trajs.iter().map(|t| draw_noise(&mut rng, t.len(), 6, &s, 0.1)).collect();
    let refs: Vec<&Trajectory> = trajs.iter().collect();
    let eps: Vec<f64> = draws.iter().flat_map(|d| d.eps.clone()).collect();
    let ctx = PromptContext::no_disaster(&grid);

    let mut g = Graph::new(&params);
    let truth = Tensor::from_vec(&[eps.len() / 6, 6], eps).unwrap();
    let loss = diffusion_loss_with(&mut g, |g, _, _| Ok(g.constant(&truth)), &refs, &draws, &s, &grid, &ctx).unwrap();
    assert_eq!(g.scalar(loss), 0.0);

    let mut g = Graph::new(&params);
    let zeros = Tensor::zeros(truth.shape());
    let loss = diffusion_loss_with(&mut g, |g, _, _| Ok(g.constant(&zeros)), &refs, &draws, &s, &grid, &ctx).unwrap();
    let n = zeros.numel() as f64;
    let se = (2.0 / n).sqrt();
    assert!((g.scalar(loss) - 1.0).abs() < 3.0 * se, "loss {} se {se}", g.scalar(loss));
}

#[test]
fn non_finite_prediction_names_example() {
    let (params, trajs, grid) = loss_fixture();
    let s = tiny_model().schedule.build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let draws: Vec<NoiseDraw> = trajs[..3].iter().map(|t| draw_noise(&mut rng, t.len(), 6, &s, 0.0)).collect();
    let refs: Vec<&Trajectory> = trajs[..3].iter().collect();
    let mut bad = Tensor::zeros(&[72, 6]);
    bad.data_mut()[24 * 6 + 2] = f64::NAN;
    let mut g = Graph::new(&params);
    let ctx = PromptContext::no_disaster(&grid);
    let err = diffusion_loss_with(&mut g, |g, _, _| Ok(g.constant(&bad)), &refs, &draws, &s, &grid, &ctx).unwrap_err();
    assert!(err.to_string().contains("example 1"), "{err}");
}

#[test]
fn total_loss_recomposes() {
    let (params, trajs, grid) = loss_fixture();
    let cfg = tiny_model();
    let s = cfg.schedule.build().unwrap();
    let refs: Vec<&Trajectory> = trajs[..8].iter().collect();
    let ctx = PromptContext::no_disaster(&grid);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (diff, _) = diffusion_loss(&params, &cfg, &s, &refs, &grid, &ctx, &mut rng).unwrap();
    assert_eq!(total_loss(&LossWeights { w_diff: 1.0, w_phy: 0.0 }, diff, None).unwrap(), diff);

    let f = dismob_core::mobility::FlowMatrix::from_vec(2, 2, vec![1.0, 4.0, 0.0, 2.5]).unwrap();
    let zero_phy = physics_loss(&f, &f).unwrap();
    assert_eq!(total_loss(&LossWeights { w_diff: 0.0, w_phy: 1.0 }, diff, Some(zero_phy)).unwrap(), 0.0);

    let g = dismob_core::mobility::FlowMatrix::from_vec(2, 2, vec![2.0, 4.0, 1.0, 0.5]).unwrap();
    let phy = physics_loss(&g, &f).unwrap();
    assert_eq!(phy, (1.0 + 0.0 + 1.0 + 4.0) / 4.0);
    let w = LossWeights { w_diff: 0.7, w_phy: 0.2 };
    assert!((total_loss(&w, diff, Some(phy)).unwrap() - (0.7 * diff + 0.2 * phy)).abs() < 1e-15);
    let heavier = LossWeights { w_diff: 0.7, w_phy: 0.4 };
    assert!(total_loss(&heavier, diff, Some(phy)).unwrap() >= total_loss(&w, diff, Some(phy)).unwrap());
}

#[test]
fn loss_weights_and_guidance_validate() {
    assert!(LossWeights { w_diff: 0.0, w_phy: 0.0 }.validate().is_err());
    assert!(GuidanceConfig { omega: 0.0, p_drop: 1.0 }.validate().is_err());
    assert!(GuidanceConfig { omega: -1.0, p_drop: 0.1 }.validate().is_err());
}

#[test]
fn sampling_is_valid_and_reproducible() {
    let grid = grid();
    let mut cfg = tiny_model();
    cfg.schedule.steps = 4;
    let params = init_model(&cfg, &grid, "c", 2).unwrap();
    let s = cfg.schedule.build().unwrap();
    let ctx = PromptContext::no_disaster(&grid);
    for seed in 0..100 {
        let req = SampleRequest { n_users: 2, start_slot: 3, len: 5, omega: (seed % 3) as f64 * 0.5, seed };
        let out = sample(&params, &cfg, &s, &grid, &ctx, &req).unwrap();
        assert_eq!(out.len(), 2);
        for t in &out {
            assert_eq!(t.len(), 5);
            assert_eq!(t.start_slot(), 3);
            assert!(t.points().iter().all(|p| p.loc < 16));
        }
    }
    let req = SampleRequest { n_users: 6, start_slot: 0, len: 24, omega: 0.5, seed: 42 };
    let a = sample(&params, &cfg, &s, &grid, &ctx, &req).unwrap();
    let b = sample(&params, &cfg, &s, &grid, &ctx, &req).unwrap();
    assert_eq!(a, b);
    let bad = SampleRequest { n_users: 1, start_slot: 40, len: 24, omega: 0.0, seed: 1 };
    assert!(sample(&params, &cfg, &s, &grid, &ctx, &bad).is_err());
}

#[test]
fn temporal_segment_passes_through_noise() {
    let grid = grid();
    let cfg = tiny_model();
    let params = init_model(&cfg, &grid, "c", 3).unwrap();
    let t = Trajectory::new("u", 5, &[1, 2, 3]).unwrap();
    let get = |n: &str| params.get(n).unwrap().value.clone();
    let e0 = encode(&t, &get("codec.P"), &get("codec.Z"), &get("codec.D"), &grid).unwrap();
    let s = cfg.schedule.build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let et = forward_noise(&e0, 6, 10, &normals(&mut rng, 18), &s).unwrap();
    for r in 0..3 {
        assert_eq!(&et.row(r)[6..], &e0.row(r)[6..]);
    }
}

#[test]
fn full_stack_gradients_check() {
    let cfg = tiny_model();
    let opts = GradCheckOptions { max_coords: 250, ..GradCheckOptions::default() };
    let report = gradcheck_model(&cfg, &grid(), 2, &opts, 5).unwrap();
    assert!(report.coords_checked >= 200);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn short_training_lowers_loss() {
    let g = GridSpec { rows: 4, cols: 4, cell_km: 1.0, slots_per_day: 24, days: 3, slot_minutes: 60 };
    let world = WorldConfig {
        grid: g.clone(),
        n_users: 120,
        home_work_fraction: 0.4,
        epr_rho: 0.6,
        epr_gamma: 0.21,
        stay_prob: 0.6,
        seed: 3,
    };
    let sc = DisasterScenario {
        epicenter: 5,
        peak_intensity: 1.0,
        spatial_sigma_km: 1.5,
        onset_slot: 32,
        duration_slots: 8,
        truth_decay: DecayParams { k0: 0.6, alpha_decay: 0.15, rho_km: 2.0 },
        disaster_type: "rainstorm".into(),
    };
    let ds = build_city_dataset("toy", &world, &sc).unwrap();
    let cfg = tiny_model();
    let data = prepare_city(&ds, &sc.truth_decay, DataMode::Disaster).unwrap();
    let mut params = init_model(&cfg, &g, "toy", 4).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::Adam, 3e-3);
    let log = train_steps(&mut params, &cfg, &data, 300, 8, &mut opt, 4).unwrap();
    let mean = |r: &[LogRow]| r.iter().map(|x| x.loss_diff).sum::<f64>() / r.len() as f64;
    let (head, tail) = (mean(&log[..20]), mean(&log[280..]));
    assert!(tail < head, "head {head} tail {tail}");
}
