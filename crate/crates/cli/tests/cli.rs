use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hetpf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetpf")).args(args).output().unwrap()
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_is_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let config = configs().join("lorenz96.toml");
    let mut files = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}.csv"));
        let o = hetpf(&[
            "run",
            "--config",
            path_str(&config),
            "--seed",
            "3",
            "--cycles",
            "40",
            "--out",
            path_str(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let stdout = String::from_utf8(o.stdout).unwrap();
        assert!(stdout.starts_with("rmse=") && stdout.contains("cycles=40"), "{stdout}");
        files.push(fs::read(&out).unwrap());
    }
    assert_eq!(files[0], files[1]);
    assert!(files[0].starts_with(b"cycle,rmse,alpha_mean,alpha_min,alpha_max,ess_mean\n"));
}

#[test]
fn csv_goes_to_stdout_without_out() {
    let o = hetpf(&["run", "--model", "lorenz63", "--cycles", "15", "--seed", "2"]);
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 16);
    assert!(String::from_utf8(o.stderr).unwrap().starts_with("rmse="));
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[model]\nkind = \"lorenz63\"\n[filter]\nalpah = 0.2\n").unwrap();
    let o = hetpf(&["run", "--config", path_str(&config)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8(o.stderr).unwrap().contains("alpah"));
}

#[test]
fn sweep_writes_one_block_per_job() {
    let config = configs().join("sweep.toml");
    let o = hetpf(&["sweep", "--config", path_str(&config), "--cycles", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1 + 21 * 5);
    assert_eq!(String::from_utf8(o.stderr).unwrap().lines().count(), 21);
}

#[test]
fn sweep_without_grid_fails() {
    let o = hetpf(&["sweep", "--model", "lorenz63", "--cycles", "5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn small_convergence_study() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("conv.toml");
    fs::write(
        &config,
        "ensemble_sizes = [4, 16]\nalphas = [0.0, 0.5, 1.0]\nrepeats = 200\n",
    )
    .unwrap();
    let out = dir.path().join("conv.csv");
    let o = hetpf(&["converge", "--config", path_str(&config), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().next(), Some("ensemble_size,optimal_alpha,rmse"));
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 2);
}
