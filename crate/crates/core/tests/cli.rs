use std::path::Path;
use std::process::{Command, Output};

fn rstc(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rstc")).args(args).arg("--out").arg(out).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn simulate_reports_the_braking_dichotomy() {
    let dir = tempfile::tempdir().unwrap();
    let nominal = rstc(&["simulate", "--mode", "nominal"], dir.path());
    assert!(nominal.status.success());
    assert!(stdout(&nominal).contains("vehicle cav"), "{}", stdout(&nominal));

    let robust = rstc(&["simulate", "--mode", "rstc-full"], dir.path());
    assert!(robust.status.success());
    assert!(stdout(&robust).contains("collision  none"), "{}", stdout(&robust));
    let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3200);
}

#[test]
fn off_grid_step_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = rstc(&["simulate", "--dt", "0.013"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not an integer multiple"));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = rstc(&["diagnose", "--config", "/nonexistent/rstc.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn empty_mode_list_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[sweep]\nmodes = []\n").unwrap();
    let o = rstc(&["sweep", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_table_has_one_row_per_vehicle_and_chain_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[sweep]\nscenarios = [\"head-brake\"]\nsettle = 12.0\n").unwrap();
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let o = rstc(&["sweep", "--config", cfg.to_str().unwrap(), "--jobs", "2"], &out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out.join("safety_region.csv")).unwrap()
    };
    let first = run("a");
    let text = String::from_utf8(first.clone()).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "scenario,mode,tau_u,vehicle,boundary_speed_mps");
    // 2 modes × 4 delays × (3 vehicles + chain)
    assert_eq!(lines.count(), 32);
    assert_eq!(run("b"), first);
}

#[test]
fn diagnose_prints_model_and_structural_checks() {
    let dir = tempfile::tempdir().unwrap();
    let o = rstc(&["diagnose"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("s*   24.097"), "{text}");
    assert!(text.contains("a2 = 1.500000, a3 = 0.900000"), "{text}");
    assert_eq!(text.matches("PASS").count(), 2, "{text}");
    assert!(text.contains("Hurwitz (Lyapunov certified)"), "{text}");

    let undelayed = rstc(&["diagnose", "--tau-u", "0"], dir.path());
    assert!(stdout(&undelayed).contains("||e^(A tau_u)||_2    1.000000"), "{}", stdout(&undelayed));
}

#[test]
fn constraints_dump_writes_every_row_of_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "[scenario]\nonset = 0.5\nsettle = 0.5\n[scenario.head_brake]\nmagnitude = 5.0\nduration = 0.5\n",
    )
    .unwrap();
    let o = rstc(&["constraints-dump", "--config", cfg.to_str().unwrap(), "--mode", "rstc-observer"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dump = std::fs::read_to_string(dir.path().join("constraints.txt")).unwrap();
    let mut lines = dump.lines();
    assert_eq!(lines.next().unwrap(), "t,label,coeff_u,rhs,h_value,M,Z,active");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 200 * 5);
    assert!(rows[0].starts_with("0.0000,cav,"));
    assert!(rows[4].starts_with("0.0000,hv4,"));

    let nominal = rstc(&["constraints-dump", "--mode", "nominal"], dir.path());
    assert_eq!(nominal.status.code(), Some(2));
}
