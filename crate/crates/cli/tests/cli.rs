use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dismob_cli::stages::Run;
use dismob_core::nn::checkpoint::load_checkpoint;
use dismob_core::nn::Tag;

const TINY: &str = include_str!("tiny.toml");

fn workdir(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("dismob-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    d
}

fn dismob(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dismob")).current_dir(dir).args(args).output().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_1() {
    let d = workdir("unknown");
    let o = dismob(&d, &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("Usage"), "{}", text(&o));
    assert_eq!(dismob(&d, &["train", "--config", "tiny.toml"]).status.code(), Some(1));
}

#[test]
fn invalid_config_exits_1_naming_the_field() {
    let d = workdir("invalid");
    fs::write(d.join("bad.toml"), TINY.replace("inner_steps = 3", "inner_steps = 3\nlr_inner = -0.5")).unwrap();
    let o = dismob(&d, &["make-world", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("meta.lr_inner"), "{}", text(&o));
    assert_eq!(dismob(&d, &["make-world", "--config", "missing.toml"]).status.code(), Some(1));
}

#[test]
fn generate_without_checkpoint_exits_1() {
    let d = workdir("nockpt");
    let o = dismob(&d, &["generate", "--config", "tiny.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("missing artifact"), "{}", text(&o));
}

#[test]
fn gradcheck_on_the_default_model_passes() {
    let d = workdir("gradcheck");
    let o = dismob(&d, &["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(text(&o).contains("max relative error"));
}

#[test]
fn stages_resume_and_skip_when_up_to_date() {
    let d = workdir("stages");
    for args in [
        &["make-world", "--config", "tiny.toml"][..],
        &["fit-physics", "--config", "tiny.toml"],
        &["train", "--config", "tiny.toml", "--meta"],
        &["adapt", "--config", "tiny.toml"],
        &["generate", "--config", "tiny.toml"],
        &["evaluate", "--config", "tiny.toml"],
    ] {
        let o = dismob(&d, args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", text(&o));
        assert!(text(&o).contains(": done"));
    }
    let run = d.join("run");
    assert!(run.join("metrics/south.csv").exists());
    assert!(!run.join(".dismob.lock").exists());
    let before = tree(&run);

    // the pipeline finds every stage complete and changes nothing
    let o = dismob(&d, &["pipeline", "--config", "tiny.toml"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(!text(&o).contains(": done"), "{}", text(&o));
    assert_eq!(text(&o).matches("up to date").count(), 8);
    assert_eq!(tree(&run), before);

    // a removed output reruns only the stage that made it
    fs::remove_file(run.join("generated/south.csv")).unwrap();
    let o = dismob(&d, &["pipeline", "--config", "tiny.toml"]);
    assert!(text(&o).contains("generate-south: done"), "{}", text(&o));
    assert!(text(&o).contains("train-meta: up to date"));
    assert_eq!(tree(&run), before);

    // a single-city run leaves the world files untouched
    let world = tree(&run.join("world"));
    let o = dismob(&d, &["train", "--config", "tiny.toml", "--single-city", "--city", "north"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(run.join("checkpoints/single-north.ckpt").exists());
    assert_eq!(tree(&run.join("world")), world);

    let o = dismob(&d, &["evaluate", "--config", "tiny.toml", "--plots"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let svg = fs::read_to_string(run.join("plots/south-radius.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn held_lock_blocks_a_second_command() {
    let d = workdir("lock");
    fs::create_dir_all(d.join("run")).unwrap();
    fs::write(d.join("run/.dismob.lock"), "").unwrap();
    let o = dismob(&d, &["make-world", "--config", "tiny.toml"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(text(&o).contains("another command"), "{}", text(&o));
}

#[test]
fn meta_checkpoint_serves_an_unseen_city() {
    let d = workdir("unseen");
    assert_eq!(dismob(&d, &["pipeline", "--config", "tiny.toml"]).status.code(), Some(0));
    let run = Run::load(&d.join("tiny.toml")).unwrap();
    let ckpt = run.meta_checkpoint();
    let stored = load_checkpoint(&ckpt).unwrap().params;
    // only the source city has private parameters in the meta checkpoint
    assert!(stored.iter().all(|p| p.tag != Tag::Private("south".into())));
    let south = run.city(Some("south")).unwrap();
    let model = run.model_from(&ckpt, south).unwrap();
    for p in model.iter() {
        match &p.tag {
            Tag::Shared => assert_eq!(p.value, stored.get(&p.name).unwrap().value, "{}", p.name),
            Tag::Private(c) => assert_eq!(c, "south"),
        }
    }
    assert!(model.iter().any(|p| p.tag == Tag::Private("south".into())));
    // an adapted checkpoint for one city is refused for another
    let north = run.city(Some("north")).unwrap();
    assert!(run.model_from(&run.adapted_checkpoint("south"), north).is_err());
}
