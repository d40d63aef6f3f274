use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn mobility(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mobility"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn synth(dir: &Path, name: &str, cohorts: &str, families: &str, seed: &str) {
    ok(&mobility(
        &[
            "synth",
            "--planted",
            "0.289,0.257,0.632,0.368,0.591",
            "--cohorts",
            cohorts,
            "--families",
            families,
            "--seed",
            seed,
            "--out",
            name,
        ],
        dir,
    ));
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

const SMALL_RUN: &str = "
seed = 3
cohorts = [1962, 1964]
output_dir = \"out\"

[input]
microdata = \"data.csv\"

[calibrate]
n_sim = 4000
max_iters = 8
map_knots = 200
";

#[test]
fn synth_seeds_change_data_not_truth() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "a.csv", "1951:1951", "10", "1");
    synth(dir.path(), "b.csv", "1951:1951", "10", "2");
    let read = |f: &str| std::fs::read_to_string(dir.path().join(f)).unwrap();
    assert_eq!(read("a.csv").lines().count(), 41);
    assert_ne!(read("a.csv"), read("b.csv"));
    // every column except `seed` (the 8th) must agree
    let without_seed = |t: String| -> Vec<Vec<String>> {
        t.lines()
            .map(|l| {
                l.split('\t')
                    .enumerate()
                    .filter(|(i, _)| *i != 7)
                    .map(|(_, v)| v.to_string())
                    .collect()
            })
            .collect()
    };
    assert_eq!(without_seed(read("a.truth.tsv")), without_seed(read("b.truth.tsv")));
}

#[test]
fn estimate_only_gives_one_row_per_cohort_and_spec() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data.csv", "1962:1964", "500", "9");
    std::fs::write(dir.path().join("run.toml"), SMALL_RUN).unwrap();
    ok(&mobility(&["estimate", "--config", "run.toml"], dir.path()));
    let text = std::fs::read_to_string(dir.path().join("out/estimates.tsv")).unwrap();
    let mut per_spec: BTreeMap<String, usize> = BTreeMap::new();
    for line in text.lines().skip(1).filter(|l| l.starts_with("ira\t")) {
        *per_spec
            .entry(line.split('\t').nth(1).unwrap().to_string())
            .or_default() += 1;
    }
    assert_eq!(per_spec.len(), 5);
    assert!(per_spec.values().all(|&n| n == 3), "{per_spec:?}");
    let manifest = std::fs::read_to_string(dir.path().join("out/manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"not_selected\""));
    assert!(!dir.path().join("out/calibrated.tsv").exists());
}

#[test]
fn full_pipeline_is_complete_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data.csv", "1962:1964", "500", "9");
    std::fs::write(dir.path().join("run.toml"), SMALL_RUN).unwrap();
    ok(&mobility(&["pipeline", "--config", "run.toml"], dir.path()));
    let first = read_dir(&dir.path().join("out"));
    for f in [
        "estimates.tsv",
        "lw.tsv",
        "calibrated.tsv",
        "decomposition.tsv",
        "manifest.json",
    ] {
        assert!(first.contains_key(f), "{f} missing");
    }
    std::fs::remove_dir_all(dir.path().join("out")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mobility"))
        .args(["pipeline", "--config", "run.toml"])
        .current_dir(dir.path())
        .env("MOBILITY_THREADS", "2")
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(first, read_dir(&dir.path().join("out")));
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data.csv", "1962:1964", "300", "9");
    std::fs::write(dir.path().join("run.toml"), SMALL_RUN).unwrap();
    ok(&mobility(
        &[
            "estimate",
            "-c",
            "run.toml",
            "--cohorts",
            "1963:1964",
            "--output-dir",
            "elsewhere",
            "--seed",
            "11",
        ],
        dir.path(),
    ));
    let text = std::fs::read_to_string(dir.path().join("elsewhere/estimates.tsv")).unwrap();
    assert!(!text.contains("\t1962\t"));
    assert!(text.contains("\t1963\t"));
    let manifest = std::fs::read_to_string(dir.path().join("elsewhere/manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 11"));
}

#[test]
fn failure_exits_nonzero_and_marks_manifest() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data.csv", "1962:1964", "300", "9");
    std::fs::write(dir.path().join("run.toml"), SMALL_RUN).unwrap();
    // decompose without a calibrated chain
    let out = mobility(&["decompose", "-c", "run.toml"], dir.path());
    assert!(!out.status.success());
    let manifest = std::fs::read_to_string(dir.path().join("out/manifest.json")).unwrap();
    assert!(manifest.contains("\"failed_stage\": \"decompose\""));

    // missing input file: validation fails, later stages are skipped
    let out = mobility(
        &["pipeline", "-c", "run.toml", "--input", "nope.csv", "-o", "bad"],
        dir.path(),
    );
    assert!(!out.status.success());
    let manifest = std::fs::read_to_string(dir.path().join("bad/manifest.json")).unwrap();
    assert!(manifest.contains("\"failed_stage\": \"setup\""));
    assert!(manifest.contains("\"status\": \"skipped\""));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "sed = 4\n").unwrap();
    let out = mobility(&["pipeline", "-c", "run.toml"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sed"));
}
