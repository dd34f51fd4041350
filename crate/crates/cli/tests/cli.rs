use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const LQ: &str = r#"
seed = 11

[model]
family = "LQ_MEANFIELD"
horizon = [0.0, 0.5]
convex = true
mean_coupling = 1.0
terminal_curvature = 1.0
terminal_mean_coupling = 0.5

[model.initial]
mean = 0.5
std = 0.5

[numerics.grid]
n_points = 161

[numerics.mesh]
dt = 5e-3

[numerics.mc]
n_particles = 3000
record_every = 10
"#;

fn mftc(args: &[&str], workdir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mftc"))
        .args(args)
        .current_dir(workdir)
        .env_remove("MFTC_WORKERS")
        .output()
        .expect("binary runs")
}

fn setup(config: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn audit_prints_the_value_window() {
    let dir = setup(
        r#"
[model]
family = "COLE_HOPF"
horizon = [0.0, 0.5]
terminal_curvature = 0.0

[model.constants]
c = 1.0
c_t = 0.0
delta = 1.0
"#,
    );
    let o = mftc(
        &["audit", "--config", "run.toml", "--out-dir", "out"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("window_V = 0.785398"), "{}", stdout(&o));
    let audit = fs::read_to_string(dir.path().join("out/audit.json")).unwrap();
    assert!(audit.contains("\"window_v\": 0.785398"));
}

#[test]
fn missing_model_section_exits_2() {
    let dir = setup("seed = 1\n[numerics.mesh]\ndt = 0.01\n");
    let o = mftc(
        &["solve", "--config", "run.toml", "--out-dir", "out"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("[model]"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = setup(&format!("{LQ}\n[extra]\nkey = 1\n"));
    let o = mftc(&["solve", "--config", "run.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("extra"), "{}", stderr(&o));

    let dir = setup(LQ);
    let o = mftc(
        &[
            "solve",
            "--config",
            "run.toml",
            "--set",
            "numerics.grid.n_points=3",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let o = mftc(&["solve", "--config", "missing.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = mftc(&["solve"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn solve_writes_tables_and_manifest() {
    let dir = setup(LQ);
    let o = mftc(
        &[
            "solve",
            "--config",
            "run.toml",
            "--out-dir",
            "out",
            "--seed",
            "5",
            "--format",
            "both",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("CONVERGED"));
    let out = dir.path().join("out");
    for f in [
        "solution.csv",
        "solution.bin",
        "flow.csv",
        "iterations.csv",
        "report.json",
        "config.toml",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let bin = fs::read(out.join("flow.bin")).unwrap();
    assert_eq!(&bin[..8], b"MFTCTAB1");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["exit_code"], 0);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(manifest["files"].as_array().unwrap().len() >= 6);

    // The effective config alone reproduces the run.
    let again = mftc(
        &["solve", "--config", "out/config.toml", "--out-dir", "out2"],
        dir.path(),
    );
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(
        fs::read(out.join("solution.bin")).unwrap(),
        fs::read(dir.path().join("out2/solution.bin")).unwrap()
    );
}

#[test]
fn default_output_directory_uses_the_subcommand() {
    let dir = setup(LQ);
    let o = mftc(
        &[
            "validate",
            "--config",
            "run.toml",
            "--set",
            "output.dir=\"res\"",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("res/validate/validation.json").exists());
}

#[test]
fn nonconvex_long_horizon_warns_and_records_the_verdict() {
    let dir = setup(LQ);
    let o = mftc(
        &[
            "solve",
            "--config",
            "run.toml",
            "--out-dir",
            "out",
            "--set",
            "model.convex=false",
            "--set",
            "model.horizon=[0.0, 1.0]",
            "--set",
            "numerics.mesh.dt=0.01",
        ],
        dir.path(),
    );
    assert!(stderr(&o).contains("feasibility windows"), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["majorant_mode"], "NONE");
    assert!(!report["warnings"].as_array().unwrap().is_empty());
    let converged = report["verdict"] == "CONVERGED";
    assert_eq!(o.status.code(), Some(if converged { 0 } else { 1 }));
}

#[test]
fn solver_errors_exit_1_with_a_record() {
    let dir = setup(LQ);
    let o = mftc(
        &[
            "solve",
            "--config",
            "run.toml",
            "--out-dir",
            "out",
            "--set",
            "numerics.grid.x_min=-1.5",
            "--set",
            "numerics.grid.x_max=1.5",
            "--set",
            "model.initial.std=1.0",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let err: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/error.json")).unwrap())
            .unwrap();
    assert_eq!(err["kind"], "MASS_LEAK");
    assert!(dir.path().join("out/manifest.json").exists());
}

fn output_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn outputs_are_identical_across_runs_and_worker_counts() {
    let dir = setup(LQ);
    for (out, workers) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let o = mftc(
            &[
                "simulate",
                "--config",
                "run.toml",
                "--out-dir",
                out,
                "--workers",
                workers,
            ],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let a = output_files(&dir.path().join("a"));
    assert!(a.len() >= 6);
    assert_eq!(a, output_files(&dir.path().join("b")));
    assert_eq!(a, output_files(&dir.path().join("c")));
}

#[test]
fn value_verify_derivative_and_master_run() {
    let dir = setup(LQ);
    let runs: [(&[&str], &str); 4] = [
        (&["value"], "value.json"),
        (&["verify", "--perturbations", "2"], "verify.json"),
        (&["derivative", "--eps", "1e-3"], "derivative.json"),
        (&["master", "--probes", "-1,0,1"], "master.json"),
    ];
    for (i, (cmd, record)) in runs.iter().enumerate() {
        let out = format!("out{i}");
        let mut args = cmd.to_vec();
        args.extend(["--config", "run.toml", "--out-dir", &out]);
        let o = mftc(&args, dir.path());
        assert!(
            matches!(o.status.code(), Some(0 | 1)),
            "{cmd:?}: {}",
            stderr(&o)
        );
        assert!(dir.path().join(&out).join(record).exists(), "{cmd:?}");
    }
    let master = fs::read_to_string(dir.path().join("out3/master.csv")).unwrap();
    assert_eq!(master.lines().count(), 4);
}

#[test]
fn cole_hopf_validation_passes_on_the_default_mesh_only() {
    let dir = TempDir::new().unwrap();
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/cole_hopf.toml");
    let o = mftc(
        &["validate", "--config", config, "--out-dir", "fine"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let o = mftc(
        &[
            "validate",
            "--config",
            config,
            "--out-dir",
            "coarse",
            "--set",
            "numerics.grid.n_points=161",
            "--set",
            "numerics.mesh.dt=5e-3",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    let record: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("coarse/validation.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(record["passed"], false);
    assert!(!dir.path().join("coarse/error.json").exists());
}
