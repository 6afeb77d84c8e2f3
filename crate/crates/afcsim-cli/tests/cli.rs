use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn afcsim(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afcsim"))
        .args(args)
        .current_dir(cwd)
        .env_remove("AFCSIM_OUT_DIR")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn list_names_bundled_scenarios() {
    let d = tempfile::tempdir().unwrap();
    let o = afcsim(&["list"], d.path());
    assert_eq!(code(&o), 0);
    for n in ["fig3_afc", "fig2_lifetime", "thermal_hole", "fig4_noise", "projection"] {
        assert!(stdout(&o).lines().any(|l| l == n), "{n} missing");
    }
}

#[test]
fn usage_errors_exit_1() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&afcsim(&["frobnicate"], d.path())), 1);
    assert_eq!(code(&afcsim(&["run"], d.path())), 1);
    assert_eq!(code(&afcsim(&["run", "--config", "a.toml", "--bundled", "projection"], d.path())), 1);
    assert_eq!(code(&afcsim(&["optimize", "--peak-od-db", "many"], d.path())), 1);
    assert_eq!(code(&afcsim(&["--help"], d.path())), 0);
}

#[test]
fn config_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert_eq!(code(&afcsim(&["run", "--config", "missing.toml"], p)), 2);
    assert_eq!(code(&afcsim(&["run", "--bundled", "no_such_scenario"], p)), 2);
    fs::write(p.join("bad.toml"), "name = \"x\"\nanalyses = [\"lifetime\"]\n[lifetime]\ninterval_s = \"-1 s\"\n").unwrap();
    let o = afcsim(&["run", "--config", "bad.toml"], p);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("interval_s"));
    assert_eq!(code(&afcsim(&["optimize", "--peak-od-db=-3"], p)), 2);
}

#[test]
fn project_writes_table_and_manifest() {
    let d = tempfile::tempdir().unwrap();
    let o = afcsim(&["project", "--out", "res"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(d.path().join("res/projection.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(d.path().join("res/manifest.json").exists());
    assert!(stdout(&o).contains("0.89"));
}

#[test]
fn quiet_prints_nothing() {
    let d = tempfile::tempdir().unwrap();
    let o = afcsim(&["optimize", "--quiet", "--out", "q"], d.path());
    assert_eq!(code(&o), 0);
    assert!(o.stdout.is_empty());
    assert!(d.path().join("q/optimize.csv").exists());
}

#[test]
fn output_dir_from_environment_then_fallback() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_afcsim"))
        .args(["optimize", "-q"])
        .current_dir(d.path())
        .env("AFCSIM_OUT_DIR", d.path().join("from_env"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(d.path().join("from_env/optimize.csv").exists());
    assert_eq!(code(&afcsim(&["optimize", "-q"], d.path())), 0);
    assert!(d.path().join("afcsim-out/optimize.csv").exists());
}

#[test]
fn seed_flag_reaches_manifest_and_reruns_match() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let args = |out: &'static str| ["noise", "--events", "5000", "--seed", "42", "-q", "--out", out];
    assert_eq!(code(&afcsim(&args("a"), p)), 0);
    assert_eq!(code(&afcsim(&args("b"), p)), 0);
    let m = fs::read_to_string(p.join("a/manifest.json")).unwrap();
    assert!(m.contains("\"seed\": 42"), "{m}");
    for f in ["noise_bins.csv", "manifest.json"] {
        assert_eq!(fs::read(p.join("a").join(f)).unwrap(), fs::read(p.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_file_run() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::write(
        p.join("s.toml"),
        "name = \"opt\"\nanalyses = [\"optimize\"]\n[optimize]\npeak_od_db = 18.0\nbackground_db = 1.0\n",
    )
    .unwrap();
    let o = afcsim(&["run", "-c", "s.toml", "-o", "r"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("finesse 3.189"), "{}", stdout(&o));
}
