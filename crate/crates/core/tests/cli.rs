use std::path::Path;
use std::process::{Command, Output};

use cellsim::io::load_trajectory;
use cellsim::Termination;

fn cellsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cellsim")).args(args).output().unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn one_c_discharge_ends_at_the_cutoff() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "cc.csv");
    let r = cellsim(&["simulate", "--preset", "ncm523", "--standard", "1", "--out", &out]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let tr = load_trajectory(&out).unwrap();
    assert_eq!(tr.termination, Termination::CutOff);
    assert!(tr.records.windows(2).all(|w| w[1].t > w[0].t));
    let v_min = cellsim::Params64::preset("ncm523").unwrap().cell.v_min;
    assert!(tr.last().unwrap().v <= v_min + 1e-9);
}

#[test]
fn outputs_are_diff_stable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (path(dir.path(), "a.csv"), path(dir.path(), "b.csv"));
    for out in [&a, &b] {
        let r = cellsim(&["simulate", "--preset", "ncm811", "--standard", "6", "--out", out]);
        assert_eq!(r.status.code(), Some(0));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert!(text.lines().any(|l| l.starts_with("# seed=")));
}

#[test]
fn acc_output_has_electrolyte_traces_at_every_position() {
    let r = cellsim(&["simulate", "--preset", "ncm811", "--standard", "5"]);
    assert_eq!(r.status.code(), Some(0));
    let text = String::from_utf8(r.stdout).unwrap();
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
    let ce: Vec<&str> = header.split(',').filter(|c| c.starts_with("ce_")).collect();
    assert_eq!(ce.len(), 8, "{header}");
    assert_eq!(ce.iter().filter(|c| c.starts_with("ce_n")).count(), 4);
}

#[test]
fn usage_and_file_errors_exit_2() {
    let r = cellsim(&["simulate", "--params", "/nonexistent/cell.toml", "--standard", "1"]);
    assert_eq!(r.status.code(), Some(2));
    let r = cellsim(&["simulate", "--preset", "ncm523"]);
    assert_eq!(r.status.code(), Some(2));
    let r = cellsim(&["simulate", "--preset", "ncm523", "--standard", "9"]);
    assert_eq!(r.status.code(), Some(2));
    let r = cellsim(&["bogus"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn strict_model_errors_exit_1() {
    // Too cold for the electrolyte diffusivity correlation.
    let dir = tempfile::tempdir().unwrap();
    let sc = path(dir.path(), "cold.toml");
    std::fs::write(&sc, "name = \"cold\"\nt_amb = 236.0\n[[phase]]\nkind = \"cc\"\nc_rate = 1.0\nduration = 100.0\n").unwrap();
    let lenient = cellsim(&["simulate", "--preset", "ncm523", "--scenario", &sc, "--soc0", "0.9"]);
    assert_eq!(lenient.status.code(), Some(0));
    assert!(String::from_utf8(lenient.stdout).unwrap().contains("# termination=failed: electrolyte diffusivity"));
    let strict = cellsim(&["simulate", "--preset", "ncm523", "--scenario", &sc, "--soc0", "0.9", "--strict"]);
    assert_eq!(strict.status.code(), Some(1));
    // An impossible initial charge is an input error.
    let r = cellsim(&["simulate", "--preset", "ncm523", "--standard", "1", "--soc0", "1.5"]);
    assert_eq!(r.status.code(), Some(2));
    let r = cellsim(&["p2d", "--preset", "ncm523", "--standard", "1", "--ocv0", "9.0"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn compare_of_a_run_with_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "cc.csv");
    let rep = path(dir.path(), "rep.csv");
    assert_eq!(cellsim(&["simulate", "--preset", "lfpo", "--standard", "2", "--out", &out]).status.code(), Some(0));
    let r = cellsim(&["compare", &out, &out, "--fields", "V,SOC,xss", "--preset", "lfpo", "--out", &rep]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let mut rd = csv::Reader::from_path(&rep).unwrap();
    let mut rows = 0;
    for rec in rd.records() {
        let rec = rec.unwrap();
        assert_eq!(rec[3].parse::<f64>().unwrap(), 0.0);
        assert_eq!(rec[4].parse::<f64>().unwrap(), 0.0);
        if !rec[2].is_empty() {
            assert_eq!(rec[2].parse::<f64>().unwrap(), 1.0);
        }
        rows += 1;
    }
    assert_eq!(rows, 2 + 8);
    // Stoichiometry fields need a cell.
    assert_eq!(cellsim(&["compare", &out, &out, "--fields", "xs"]).status.code(), Some(2));
}

#[test]
fn socv_spans_the_voltage_window() {
    let r = cellsim(&["socv", "--preset", "ncm523", "--points", "11"]);
    assert_eq!(r.status.code(), Some(0));
    let mut rd = csv::Reader::from_reader(r.stdout.as_slice());
    let rows: Vec<(f64, f64)> = rd.records().map(|r| {
        let r = r.unwrap();
        (r[0].parse().unwrap(), r[1].parse().unwrap())
    }).collect();
    assert_eq!(rows.len(), 11);
    let p = cellsim::Params64::preset("ncm523").unwrap();
    assert!((rows[0].1 - p.cell.v_min).abs() < 1e-6);
    assert!((rows[10].1 - p.cell.v_max).abs() < 1e-6);
}

#[test]
fn closed_loop_replay_from_a_reference_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let truth = path(dir.path(), "truth.csv");
    let out = path(dir.path(), "closed.csv");
    let r = cellsim(&["p2d", "--preset", "ncm523", "--standard", "6", "--cells", "12", "4", "12", "--shells", "6", "--out", &truth]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let r = cellsim(&[
        "simulate", "--preset", "ncm523", "--standard", "6", "--soc0", "0.8", "--closed-loop", "--measurements", &truth,
        "--out", &out,
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let tr = load_trajectory(&out).unwrap();
    assert!(tr.records.iter().any(|r| r.flags.contains(cellsim::Flags::CORRECTED)));
    // Measurements without the switch are refused.
    let r = cellsim(&["simulate", "--preset", "ncm523", "--standard", "6", "--measurements", &truth]);
    assert_eq!(r.status.code(), Some(2));
}
