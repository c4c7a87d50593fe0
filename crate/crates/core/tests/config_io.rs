mod common;

use std::fs;

use common::{dataset, grid};
use dismob_core::config::{load_config, parse_config, CityRole};
use dismob_core::diffusion::LogRow;
use dismob_core::io::*;
use dismob_core::mobility::{aggregate_flow, Trajectory};
use dismob_core::Error;
use proptest::prelude::*;

const MINIMAL: &str = r#"
seed = 7

[[world.cities]]
name = "alpha"
n_users = 50
grid = { rows = 6, cols = 6, cell_km = 1.0, slots_per_day = 24, days = 3, slot_minutes = 60 }
scenario = { epicenter = 14, peak_intensity = 1.0, spatial_sigma_km = 1.5, onset_slot = 32, duration_slots = 10, truth_decay = { k0 = 0.6, alpha_decay = 0.15, rho_km = 2.0 } }
"#;

fn tmpdir(name: &str) -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("dismob-test-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn minimal_config_gets_defaults() {
    let c = parse_config(MINIMAL).unwrap();
    assert_eq!(c.seed, 7);
    assert_eq!(c.world.cities[0].role, CityRole::Source);
    assert_eq!(c.world.cities[0].stay_prob, 0.6);
    assert_eq!(c.eval.bins, 30);
    assert_eq!(c.model.guidance.omega, 0.0);
    assert_eq!(c.model.guidance.p_drop, 0.1);
    assert_eq!(c.target().name, "alpha");
    assert_eq!(c.sources().count(), 1);
}

#[test]
fn config_round_trips_through_toml() {
    let c = parse_config(MINIMAL).unwrap();
    let again = parse_config(&c.to_toml().unwrap()).unwrap();
    assert_eq!(c, again);
}

#[test]
fn invalid_values_name_their_field() {
    let text = format!("{MINIMAL}\n[meta]\nlr_inner = -1.0\n");
    match parse_config(&text) {
        Err(Error::InvalidConfig { path, .. }) => assert_eq!(path, "meta.lr_inner"),
        other => panic!("{other:?}"),
    }
    let text = MINIMAL.replace("n_users = 50", "n_users = 0");
    match parse_config(&text) {
        Err(Error::InvalidConfig { path, .. }) => assert_eq!(path, "world.cities[0].n_users"),
        other => panic!("{other:?}"),
    }
    let text = MINIMAL.replace("rows = 6", "rows = 0");
    match parse_config(&text) {
        Err(Error::InvalidConfig { path, .. }) => assert!(path.starts_with("world.cities[0].grid"), "{path}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn syntax_errors_carry_a_position() {
    let text = MINIMAL.replace("n_users = 50", "n_users = = 50");
    match parse_config(&text) {
        Err(Error::Parse { line, column, .. }) => {
            let want = text.lines().position(|l| l.contains("= = 50")).unwrap() + 1;
            assert_eq!(line, want);
            assert!(column > 1);
        }
        other => panic!("{other:?}"),
    }
    let text = format!("{MINIMAL}\n[train]\nstepz = 3\n");
    assert!(matches!(parse_config(&text), Err(Error::Parse { .. })));
}

#[test]
fn relative_out_dir_resolves_against_the_config_file() {
    let d = tmpdir("cfg");
    let p = d.join("run.toml");
    fs::write(&p, format!("{MINIMAL}\n[io]\nout_dir = \"out\"\n")).unwrap();
    assert_eq!(load_config(&p).unwrap().io.out_dir, d.join("out"));
    assert!(load_config(&d.join("missing.toml")).is_err());
}

#[test]
fn trajectories_field_and_flow_round_trip() {
    let g = grid(5, 5, 2);
    let ds = dataset("c", &g, 30, 9);
    let d = tmpdir("io");

    write_trajectories(&d.join("t.csv"), &ds.disaster).unwrap();
    let back = read_trajectories(&d.join("t.csv"), &g).unwrap();
    let mut want = ds.disaster.clone();
    want.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    assert_eq!(back, want);
    // rewriting what was read gives the same bytes
    assert_eq!(trajectories_to_csv(&back).unwrap(), fs::read(d.join("t.csv")).unwrap());

    write_field(&d.join("f.csv"), &ds.field).unwrap();
    let f = read_field(&d.join("f.csv"), &g, ds.field.onset_slot, &ds.field.disaster_type, &ds.field.city).unwrap();
    assert_eq!(f, ds.field);

    let flow = aggregate_flow(&ds.normal, &g).unwrap();
    write_atomic(&d.join("flow.csv"), &flow_to_csv(&flow).unwrap()).unwrap();
    assert_eq!(read_flow(&d.join("flow.csv"), &g).unwrap(), flow);
    assert!(!d.join("flow.csv.tmp").exists());
}

#[test]
fn malformed_files_are_rejected() {
    let g = grid(3, 3, 1);
    let d = tmpdir("bad");
    fs::write(d.join("h.csv"), "user,slot,loc\nu,0,1\n").unwrap();
    assert!(matches!(read_trajectories(&d.join("h.csv"), &g), Err(Error::Parse { line: 1, .. })));
    fs::write(d.join("r.csv"), "user_id,slot,loc\nu,0,1\nu,x,1\n").unwrap();
    assert!(matches!(read_trajectories(&d.join("r.csv"), &g), Err(Error::Parse { line: 3, .. })));
    fs::write(d.join("o.csv"), "user_id,slot,loc\nu,0,99\n").unwrap();
    assert!(read_trajectories(&d.join("o.csv"), &g).is_err());
    fs::write(d.join("n.csv"), "loc,slot,count\n0,0,-1\n").unwrap();
    assert!(read_flow(&d.join("n.csv"), &g).is_err());
}

#[test]
fn log_csv_has_fixed_header() {
    let rows = [LogRow { step: 1, loss_diff: 0.5, loss_phy: 0.0, loss_total: 0.5 }];
    let s = String::from_utf8(log_to_csv(&rows).unwrap()).unwrap();
    assert!(s.starts_with("step,loss_diff,loss_phy,loss_total\n1,0.5,0.0,0.5"), "{s}");
}

proptest! {
    #[test]
    fn arbitrary_trajectories_round_trip(users in proptest::collection::vec(
        (0usize..10, proptest::collection::vec(0usize..9, 1..20)), 1..6)) {
        let g = grid(3, 3, 2);
        let trajs: Vec<Trajectory> = users
            .iter()
            .enumerate()
            .map(|(i, (start, locs))| Trajectory::new(format!("u{i}"), *start, locs).unwrap())
            .collect();
        let bytes = trajectories_to_csv(&trajs).unwrap();
        let d = tmpdir("prop");
        write_atomic(&d.join("t.csv"), &bytes).unwrap();
        prop_assert_eq!(read_trajectories(&d.join("t.csv"), &g).unwrap(), trajs);
    }
}
