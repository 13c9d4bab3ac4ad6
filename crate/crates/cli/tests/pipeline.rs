use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use zcbf_core::bounds;
use zcbf_core::config::ConfigFile;

fn zcbf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zcbf")).args(args).output().expect("spawn zcbf")
}

fn write_config(dir: &Path, name: &str, cfg: &ConfigFile) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stage(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", s(cfg), "--out", s(out)];
    args.extend_from_slice(extra);
    zcbf(&args)
}

fn sorted_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    assert_eq!(zcbf(&["simulate", "--config", s(&missing)]).status.code(), Some(2));
    assert_eq!(zcbf(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(zcbf(&["generate"]).status.code(), Some(2));
    assert_eq!(zcbf(&["--help"]).status.code(), Some(0));

    let mut cfg = ConfigFile::case_a();
    cfg.dataset.n_sims = 0;
    let path = write_config(tmp.path(), "zero.json", &cfg);
    let o = stage("generate", &path, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_sims"));

    fs::write(tmp.path().join("broken.json"), "{ not json").unwrap();
    let o = stage("generate", &tmp.path().join("broken.json"), &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn case_a_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "case_a.json", &ConfigFile::case_a());
    let out = tmp.path().join("out");

    let o = stage("generate", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let files = sorted_files(&out.join("datasets"));
    assert_eq!(files.len(), 8, "{files:?}");
    for id in ["lf_0_1", "lf_0_2", "ll_0_3", "lf_2_3"] {
        assert!(files.contains(&format!("{id}.csv")) && files.contains(&format!("{id}.json")), "{id}");
    }

    // simulate before fitting names the missing candidate
    let o = stage("simulate", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lf_0_1"));

    let o = stage("fit-bounds", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(sorted_files(&out.join("bounds")).len(), 4);

    let o = stage("simulate", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    for f in ["trajectory.csv", "inputs.csv", "h_values.csv", "metrics.json"] {
        assert!(out.join("run").join(f).is_file(), "{f}");
    }
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["violations_after_warmup"], 0);

    let o = stage("simulate", &cfg, &out, &["--no-filter"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("safety violation"));
    assert!(out.join("run_nofilter/h_values.csv").is_file());
}

#[test]
fn stages_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "case_a.json", &ConfigFile::case_a());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(stage("generate", &cfg, out, &[]).status.code(), Some(0));
        assert_eq!(stage("fit-bounds", &cfg, out, &[]).status.code(), Some(0));
        assert_eq!(stage("simulate", &cfg, out, &[]).status.code(), Some(0));
    }
    for sub in ["datasets", "bounds", "run"] {
        let files = sorted_files(&a.join(sub));
        assert_eq!(files, sorted_files(&b.join(sub)));
        for f in files {
            assert_eq!(fs::read(a.join(sub).join(&f)).unwrap(), fs::read(b.join(sub).join(&f)).unwrap(), "{sub}/{f}");
        }
    }

    // a different seed changes the data
    let c = tmp.path().join("c");
    assert_eq!(stage("generate", &cfg, &c, &["--seed", "5"]).status.code(), Some(0));
    assert_ne!(fs::read(a.join("datasets/lf_0_1.csv")).unwrap(), fs::read(c.join("datasets/lf_0_1.csv")).unwrap());
}

#[test]
fn scale_flag_multiplies_bounds() {
    let tmp = tempfile::tempdir().unwrap();
    let mut small = ConfigFile::case_a();
    small.dataset.n_sims = 5;
    let cfg = write_config(tmp.path(), "small.json", &small);
    let (one, two) = (tmp.path().join("one"), tmp.path().join("two"));
    assert_eq!(stage("generate", &cfg, &one, &[]).status.code(), Some(0));
    assert_eq!(stage("generate", &cfg, &two, &[]).status.code(), Some(0));
    assert_eq!(stage("fit-bounds", &cfg, &one, &[]).status.code(), Some(0));
    assert_eq!(stage("fit-bounds", &cfg, &two, &["--scale", "2"]).status.code(), Some(0));
    assert_eq!(stage("fit-bounds", &cfg, &two, &["--scale", "0"]).status.code(), Some(2));
    for id in ["lf_0_1", "lf_0_2", "ll_0_3", "lf_2_3"] {
        let b1 = bounds::load(&one.join("bounds"), id).unwrap();
        let b2 = bounds::load(&two.join("bounds"), id).unwrap();
        for (w1, w2) in b1.widths().iter().zip(b2.widths()) {
            assert!((2.0 * w1 - w2).abs() <= 1e-12 * (1.0 + w2.abs()), "{id}: {w1} vs {w2}");
        }
        assert_eq!(b2.meta.scale, 2.0);
    }
}

#[test]
fn case_b_generates_all_four_candidates() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "case_b.json", &ConfigFile::case_b());
    let out = tmp.path().join("out");
    let o = stage("generate", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let files = sorted_files(&out.join("datasets"));
    assert_eq!(files.len(), 8, "{files:?}");
    let stdout = String::from_utf8_lossy(&o.stdout);
    for id in ["lf_0_1", "ff_par_1_2", "ff_orth_1_2", "lf_2_3"] {
        assert!(stdout.contains(id), "{id}");
    }
}
