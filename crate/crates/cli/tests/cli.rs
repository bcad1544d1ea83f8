use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use iscap_cli::{dump_design, Axis, CliError, Config, DumpFiles, SweepSpec};
use iscap_core::ao_driver::{AoOptions, SchemeId};
use proptest::prelude::*;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("iscap-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn iscap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iscap")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = scratch("usage");
    let cfg = write_config(&dir, "[sweep]\naxis = \"sinr_db\"\nvalues = [2.0, 4.0]\nschemes = []\nseeds = [0]\n");
    let out = dir.join("out.csv");
    let r = iscap(&["--config", &cfg, "sweep", "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(!out.exists());

    let empty = write_config(&dir, "");
    let r = iscap(&["--config", &empty, "sweep", "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));

    let r = iscap(&["dump", "--scheme", "hybrid", "--out", "x"]);
    assert_eq!(r.status.code(), Some(1));
    let r = iscap(&["frobnicate"]);
    assert_eq!(r.status.code(), Some(1));
    let r = iscap(&["--help"]);
    assert_eq!(r.status.code(), Some(0));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn infeasible_dump_writes_nothing() {
    let dir = scratch("infeasible");
    let cfg = write_config(&dir, "[scenario.thresholds]\nsinr_db = 90.0\n");
    let prefix = dir.join("tight");
    let r = iscap(&["--config", &cfg, "dump", "--scheme", "no_onoff", "--out", prefix.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
    let files = DumpFiles::for_prefix(&prefix);
    assert!(!files.antennas_csv.exists() && !files.mask_grid.exists() && !files.report_json.exists());

    let cfg = write_config(
        &dir,
        "[scenario.thresholds]\nsinr_db = 90.0\n[sweep]\naxis = \"crb_max\"\nvalues = [1e-5]\nschemes = [\"no_onoff\"]\nseeds = [0]\n",
    );
    let out = dir.join("sweep.csv");
    let r = iscap(&["--config", &cfg, "sweep", "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    let text = std::fs::read_to_string(&out).unwrap();
    let row = text.lines().nth(2).unwrap();
    assert!(row.starts_with("crb_max,0.00001,no_onoff,0,infeasible,,"), "{row}");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn dumps_side_by_side_for_two_amplifier_models() {
    let dir = scratch("dump");
    let cfg = Config::default();
    let opts = AoOptions::default();
    for (beta, name) in [(0.5, "beta05"), (0.0, "beta0")] {
        let mut sc = cfg.scenario.clone();
        sc.hardware.beta_pa = beta;
        let scn = sc.build(0, &sc.thresholds).unwrap();
        let (result, files) = dump_design(&scn, SchemeId::Joint, &opts, &dir.join(name)).unwrap();
        let grid = std::fs::read_to_string(&files.mask_grid).unwrap();
        let rows: Vec<&str> = grid.lines().collect();
        assert_eq!(rows.len(), scn.dims.n_tx);
        assert!(rows.iter().all(|r| r.len() == scn.dims.n_rf && r.chars().all(|c| c == '0' || c == '1')));

        let mut reader = csv::Reader::from_path(&files.antennas_csv).unwrap();
        let powers: Vec<f64> = reader.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
        assert_eq!(powers.len(), scn.dims.n_tx);
        let d = result.design.as_ref().unwrap();
        let trace = d.tx_covariance().trace().re;
        let sum: f64 = powers.iter().sum();
        assert!((sum - trace).abs() <= 1e-8 * trace, "{sum} vs {trace}");
    }
    assert!(DumpFiles::for_prefix(&dir.join("beta05")).antennas_csv.exists());
    assert!(DumpFiles::for_prefix(&dir.join("beta0")).antennas_csv.exists());
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn binary_dump_reports_files() {
    let dir = scratch("bin-dump");
    let prefix = dir.join("d");
    let r = iscap(&["dump", "--scheme", "rf_only", "--seed", "2", "--beta-pa", "0", "--out", prefix.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let files = DumpFiles::for_prefix(&prefix);
    let text = std::fs::read_to_string(&files.antennas_csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "antenna,p_out_w,active");
    assert_eq!(text.lines().count(), 9);
    let report = std::fs::read_to_string(&files.report_json).unwrap();
    for key in ["\"scheme\": \"rf_only\"", "\"slacks\"", "\"trace\"", "\"candidates\"", "\"total\""] {
        assert!(report.contains(key), "report lacks {key}");
    }
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn shipped_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/sinr_sweep.toml");
    let cfg = Config::load(&path).unwrap();
    let spec = cfg.sweep.unwrap();
    spec.validate().unwrap();
    assert_eq!(spec.axis, Axis::SinrDb);
    assert!(spec.continuation);
    assert!(cfg.scenario.build(0, &cfg.scenario.thresholds).is_ok());
}

proptest! {
    #[test]
    fn sweep_values_must_be_strictly_monotone(mut v in proptest::collection::vec(-50.0..50.0f64, 1..8), dup in 0usize..8) {
        v.sort_by(f64::total_cmp);
        v.dedup();
        let spec = |values: Vec<f64>| SweepSpec { axis: Axis::SinrDb, values, schemes: vec![SchemeId::Joint], seeds: vec![0], continuation: true };
        prop_assert!(spec(v.clone()).validate().is_ok());
        let mut rev = v.clone();
        rev.reverse();
        prop_assert!(spec(rev).validate().is_ok());
        if !v.is_empty() {
            let mut bad = v.clone();
            bad.insert(dup % v.len(), v[dup % v.len()]);
            prop_assert!(matches!(spec(bad).validate(), Err(CliError::Usage(_))));
        }
    }
}
