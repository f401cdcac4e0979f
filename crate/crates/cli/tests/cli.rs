use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3
output_dir = "out"
[train]
dimension = 8
epochs = 2
negative = 3
[synth]
n_users = 30
sessions_per_user = 60
[synth.panel]
n_users = 100
[synth.did]
n_units = 100
"#;

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.toml");
    fs::write(&cfg, format!("{SMALL}\n{extra}")).unwrap();
    (dir, cfg)
}

fn run(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tastetrace"))
        .arg("run")
        .args(args)
        .arg("--config")
        .arg(cfg)
        .env_remove("TASTETRACE_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            if rel == "timings" {
                continue;
            }
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn missing_upstream_names_earliest_stage() {
    let (dir, cfg) = setup("");
    let o = run(&cfg, &["regress"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("`synth`"), "{}", stderr(&o));

    for s in ["synth", "ingest", "train"] {
        let o = run(&cfg, &[s]);
        assert!(o.status.success(), "{s}: {}", stderr(&o));
    }
    let o = run(&cfg, &["regress"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`vectors`"), "{}", stderr(&o));
    assert!(!dir.path().join("out/regress").exists());

    // A tampered upstream output counts as missing.
    fs::write(dir.path().join("out/train/loss.tsv"), "epoch\tloss\n").unwrap();
    let o = run(&cfg, &["vectors"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`train`"), "{}", stderr(&o));
}

#[test]
fn rerun_is_a_no_op_and_output_is_deterministic() {
    let (dir, cfg) = setup("");
    let first = run(&cfg, &["all"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let out = dir.path().join("out");
    let before = tree(&out);
    for stage in ["synth", "ingest", "train", "vectors", "metrics", "regress", "did", "report"] {
        assert!(before.contains_key(&format!("{stage}/manifest.json")), "{stage}");
    }
    for f in ["report/summary.md", "report/event_study.svg", "train/songs.s2vb", "did/results.json"] {
        assert!(before.contains_key(f), "{f}");
    }
    let mtime = fs::metadata(out.join("train/songs.s2vb")).unwrap().modified().unwrap();

    let second = run(&cfg, &["all"]);
    assert!(second.status.success());
    let stdout = String::from_utf8_lossy(&second.stdout);
    assert_eq!(stdout.matches("up to date").count(), 8, "{stdout}");
    assert_eq!(fs::metadata(out.join("train/songs.s2vb")).unwrap().modified().unwrap(), mtime);
    assert_eq!(tree(&out), before);

    let (other, cfg2) = setup("");
    assert!(run(&cfg2, &["all"]).status.success());
    let again = tree(&other.path().join("out"));
    assert_eq!(again.keys().collect::<Vec<_>>(), before.keys().collect::<Vec<_>>());
    for (k, v) in &before {
        assert!(again[k] == *v, "{k} differs between runs");
    }
}

#[test]
fn seed_override_reruns_stages() {
    let (dir, cfg) = setup("");
    assert!(run(&cfg, &["synth"]).status.success());
    let a = fs::read(dir.path().join("out/synth/streams.tsv")).unwrap();
    let o = run(&cfg, &["synth", "--seed", "4"]);
    assert!(o.status.success());
    assert!(!String::from_utf8_lossy(&o.stdout).contains("up to date"));
    assert_ne!(fs::read(dir.path().join("out/synth/streams.tsv")).unwrap(), a);
}

#[test]
fn output_dir_from_environment() {
    let (dir, cfg) = setup("");
    let target = dir.path().join("elsewhere");
    let o = Command::new(env!("CARGO_BIN_EXE_tastetrace"))
        .args(["run", "synth", "--config"])
        .arg(&cfg)
        .env("TASTETRACE_OUTPUT_DIR", &target)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(target.join("synth/manifest.json").exists());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn configuration_errors_exit_1() {
    let (dir, cfg) = setup("[did]\nn_leads = 0\n");
    let o = run(&cfg, &["all"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("did.n_leads"));

    let (_d, cfg) = setup("[train]\nbogus = 1\n");
    assert_eq!(run(&cfg, &["synth"]).status.code(), Some(1));

    let (_d, cfg) = setup("");
    assert_eq!(run(&cfg, &["polish"]).status.code(), Some(1));
    assert_eq!(run(&dir.path().join("absent.toml"), &["all"]).status.code(), Some(1));

    let o = Command::new(env!("CARGO_BIN_EXE_tastetrace")).arg("run").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn external_log_without_gazetteer_is_a_config_error() {
    let (dir, cfg) = setup("");
    fs::write(dir.path().join("log.tsv"), "user_id\n").unwrap();
    let text = fs::read_to_string(&cfg).unwrap();
    fs::write(&cfg, format!("{text}\n[input]\nlog = \"log.tsv\"\n")).unwrap();
    let o = run(&cfg, &["ingest"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("input.gazetteer"));
}
