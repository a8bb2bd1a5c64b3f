use std::ffi::OsString;
use std::fs;
use std::path::Path;

use kcchain::cli::{run, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME};
use kcchain::output::read_table;
use serde::Deserialize;

fn kcchain(args: &[&str], env: &[(&str, &str)]) -> i32 {
    let mut full: Vec<OsString> = vec!["kcchain".into()];
    full.extend(args.iter().map(OsString::from));
    let env: Vec<(String, String)> = env.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    run(full, &env)
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[derive(Deserialize)]
struct ReturnRow {
    t: f64,
    #[serde(rename = "L")]
    l: f64,
}

#[derive(Deserialize)]
struct LightconeRow {
    site: usize,
    distance: usize,
    drop_time: Option<f64>,
}

#[test]
fn selftest_passes() {
    assert_eq!(kcchain(&["selftest"], &[]), EXIT_OK);
}

#[test]
fn bad_values_exit_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = path(tmp.path(), "out");
    assert_eq!(
        kcchain(&["evolve", "--threshold", "1.5", "--out", &out], &[]),
        EXIT_CONFIG
    );
    assert_eq!(kcchain(&["evolve", "--n", "ten", "--out", &out], &[]), EXIT_CONFIG);
    assert_eq!(
        kcchain(&["evolve", "--out", &out], &[("KCCHAIN_TIME_DT", "-1")]),
        EXIT_CONFIG
    );
    let cfg = path(tmp.path(), "bad.toml");
    fs::write(&cfg, "[model]\nn = 10\nsize = 3\n").unwrap();
    assert_eq!(kcchain(&["evolve", "--config", &cfg, "--out", &out], &[]), EXIT_CONFIG);
    assert_eq!(kcchain(&["nonsense"], &[]), EXIT_CONFIG);
    assert!(!Path::new(&out).join("return.csv").exists());
}

#[test]
fn flags_override_environment_and_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = path(tmp.path(), "run.toml");
    fs::write(&cfg, "[model]\nn = 6\n[time]\ntmax = 2\n").unwrap();
    let out = path(tmp.path(), "out");
    let code = kcchain(
        &["evolve", "--config", &cfg, "--n", "8", "--out", &out],
        &[("KCCHAIN_MODEL_N", "10"), ("KCCHAIN_TIME_DT", "0.5")],
    );
    assert_eq!(code, EXIT_OK);
    let (meta, rows): (_, Vec<ReturnRow>) = read_table(&Path::new(&out).join("return.csv")).unwrap();
    assert!(meta.iter().any(|(k, v)| k == "N" && v == "8"), "{meta:?}");
    let times: Vec<f64> = rows.iter().map(|r| r.t).collect();
    assert_eq!(times, [0.0, 0.5, 1.0, 1.5, 2.0]);
    assert_eq!(rows[0].l, 1.0);
    let snapshot = fs::read_to_string(Path::new(&out).join("config.toml")).unwrap();
    assert!(snapshot.contains("n = \"8\""), "{snapshot}");
    assert!(Path::new(&out).join("manifest.json").exists());
}

#[test]
fn merge_rejects_different_sweeps() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (path(tmp.path(), "a"), path(tmp.path(), "b"));
    let common = ["--n", "8", "--mu-over-n", "0.3", "--realisations", "2"];
    for (out, seed, start) in [(&a, "1", "0"), (&b, "2", "2")] {
        let mut args = vec!["levels"];
        args.extend(common);
        args.extend(["--seed", seed, "--realisation-start", start, "--out", out]);
        assert_eq!(kcchain(&args, &[]), EXIT_OK);
    }
    let merged = path(tmp.path(), "merged");
    let inputs = [
        format!("{a}/level_realisations.csv"),
        format!("{b}/level_realisations.csv"),
    ];
    assert_eq!(
        kcchain(&["merge", &inputs[0], &inputs[1], "--out", &merged], &[]),
        EXIT_RUNTIME
    );
    assert!(!Path::new(&merged).join("levels.csv").exists());
}

#[test]
fn merge_rejects_overlapping_realisations() {
    let tmp = tempfile::tempdir().unwrap();
    let a = path(tmp.path(), "a");
    let args = [
        "levels",
        "--n",
        "8",
        "--mu-over-n",
        "0.3",
        "--realisations",
        "2",
        "--out",
        &a,
    ];
    assert_eq!(kcchain(&args, &[]), EXIT_OK);
    let input = format!("{a}/level_realisations.csv");
    let merged = path(tmp.path(), "merged");
    assert_eq!(kcchain(&["merge", &input, &input, "--out", &merged], &[]), EXIT_RUNTIME);
}

#[test]
fn defect_lightcone_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = path(tmp.path(), "out");
    assert_eq!(
        kcchain(&["defect", "--n", "8", "--q", "2", "--tmax", "15", "--out", &out], &[]),
        EXIT_OK
    );
    let (_, rows): (_, Vec<LightconeRow>) = read_table(&Path::new(&out).join("lightcone.csv")).unwrap();
    assert_eq!(rows.len(), 8);
    let at_defect = rows.iter().find(|r| r.distance == 0).unwrap();
    assert_eq!(at_defect.site, 4);
    assert!(at_defect.drop_time.is_some());
    for name in ["return.csv", "overlaps.csv", "density.csv"] {
        assert!(Path::new(&out).join(name).exists(), "{name}");
    }
}

#[test]
fn pxp_defect_of_unit_strength_keeps_z2_revivals() {
    let tmp = tempfile::tempdir().unwrap();
    let (q1, q2) = (path(tmp.path(), "q1"), path(tmp.path(), "q2"));
    let crossings = |out: &str, q: &str| {
        assert_eq!(kcchain(&["defect", "--n", "10", "--q", q, "--out", out], &[]), EXIT_OK);
        let (_, rows): (_, Vec<ReturnRow>) = read_table(&Path::new(out).join("return.csv")).unwrap();
        rows.windows(2).filter(|w| w[0].l < 0.5 && w[1].l >= 0.5).count()
    };
    assert!(crossings(&q1, "1") >= 3);
    assert!(crossings(&q2, "2") < 3);
}
