use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DMatrix;
use plmm::io::{load_hsm, matrix_to_stack, read_pgm16, save_hsm, stack_to_matrix};

fn plmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plmm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = plmm(args);
    assert!(
        out.status.success(),
        "plmm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("truth");
    let mut args = vec!["synth", "--width", "6", "--height", "4", "--bands", "12", "--out-dir", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn csv_row(path: &Path) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "seed,aSAM_deg,GMSE_A,GMSE_dM,RE,wall_time_s");
    lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect()
}

/// Copies the ground truth into an estimate directory under the names
/// written by `unmix`.
fn truth_as_estimate(truth: &Path, est: &Path, perm: &[usize]) {
    fs::create_dir_all(est).unwrap();
    let m = load_hsm(truth.join("M_true.hsm")).unwrap();
    let a = load_hsm(truth.join("A_true.hsm")).unwrap();
    let (l, k) = m.shape();
    let dm = matrix_to_stack(&load_hsm(truth.join("dM_true.hsm")).unwrap(), l, k).unwrap();
    let mp = DMatrix::from_fn(l, k, |r, c| m[(r, perm[c])]);
    let ap = DMatrix::from_fn(k, a.ncols(), |r, c| a[(perm[r], c)]);
    let dmp: Vec<_> = dm.iter().map(|d| DMatrix::from_fn(l, k, |r, c| d[(r, perm[c])])).collect();
    save_hsm(est.join("M.hsm"), &mp).unwrap();
    save_hsm(est.join("A.hsm"), &ap).unwrap();
    save_hsm(est.join("dM.hsm"), &stack_to_matrix(&dmp, l, k).unwrap()).unwrap();
}

#[test]
fn synth_writes_expected_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    let t = synth(tmp.path(), &["--endmembers", "4"]);
    assert_eq!(load_hsm(t.join("Y.hsm")).unwrap().shape(), (12, 24));
    assert_eq!(load_hsm(t.join("M_true.hsm")).unwrap().shape(), (12, 4));
    assert_eq!(load_hsm(t.join("A_true.hsm")).unwrap().shape(), (4, 24));
    assert_eq!(load_hsm(t.join("dM_true.hsm")).unwrap().shape(), (48, 24));
    let spec = fs::read_to_string(t.join("spec.cfg")).unwrap();
    assert!(spec.contains("width=6\n") && spec.contains("endmembers=4\n"));
}

#[test]
fn synth_defaults_follow_the_standard_scene() {
    let out = Command::new(env!("CARGO_BIN_EXE_plmm"))
        .args(["synth", "--help"])
        .output()
        .unwrap();
    let help = String::from_utf8_lossy(&out.stdout);
    assert!(help.contains("[default: 128]") && help.contains("[default: 64]"));
    assert!(help.contains("[default: 30]") && help.contains("[default: 0.25]"));
}

#[test]
fn noiseless_zero_variability_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let t = synth(tmp.path(), &["--cvar-top", "0", "--cvar-bottom", "0", "--snr-db", "inf"]);
    let dm = load_hsm(t.join("dM_true.hsm")).unwrap();
    assert!(dm.iter().all(|&v| v == 0.0));
    let y = load_hsm(t.join("Y.hsm")).unwrap();
    let m = load_hsm(t.join("M_true.hsm")).unwrap();
    let a = load_hsm(t.join("A_true.hsm")).unwrap();
    assert!((y - m * a).amax() < 1e-14);
}

#[test]
fn reference_file_sets_dimensions() {
    let tmp = tempfile::tempdir().unwrap();
    let reference = tmp.path().join("ref.hsm");
    save_hsm(&reference, &DMatrix::from_fn(7, 2, |r, c| 0.2 + 0.1 * (r + c) as f64)).unwrap();
    let t = tmp.path().join("truth");
    ok(&["synth", "--width", "3", "--height", "2", "--reference", s(&reference), "--out-dir", s(&t)]);
    assert_eq!(load_hsm(t.join("M_true.hsm")).unwrap().shape(), (7, 2));
    assert_eq!(load_hsm(t.join("Y.hsm")).unwrap().shape(), (7, 6));
    let out = plmm(&["synth", "--reference", s(&reference), "--endmembers", "3", "--out-dir", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_exits_2_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("est");
    let out = plmm(&["unmix", "--input", s(&tmp.path().join("absent.hsm")), "--endmembers", "3", "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn bad_flags_and_config_keys_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(plmm(&["synth", "--width", "-3", "--out-dir", "x"]).status.code(), Some(2));
    assert_eq!(plmm(&["frobnicate"]).status.code(), Some(2));
    let t = synth(tmp.path(), &[]);
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "alpha=0\nlambda=3\n").unwrap();
    let out_dir = tmp.path().join("est");
    let out = plmm(&["unmix", "--input", s(&t.join("Y.hsm")), "--config", s(&cfg), "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));
    assert!(!out_dir.exists());
    let out = plmm(&["unmix", "--input", s(&t.join("Y.hsm")), "--penalty", "dist", "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unmix_writes_every_output() {
    let tmp = tempfile::tempdir().unwrap();
    let t = synth(tmp.path(), &[]);
    let est = tmp.path().join("est");
    ok(&["unmix", "--input", s(&t.join("Y.hsm")), "--penalty", "none", "--gamma", "1", "--out-dir", s(&est)]);
    assert_eq!(load_hsm(est.join("M.hsm")).unwrap().shape(), (12, 3));
    assert_eq!(load_hsm(est.join("A.hsm")).unwrap().shape(), (3, 24));
    assert_eq!(load_hsm(est.join("dM.hsm")).unwrap().shape(), (36, 24));
    let trace = fs::read_to_string(est.join("objective_trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next().unwrap(), "iteration,J,data_term,phi,psi,upsilon");
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first.len(), 6);
    assert_eq!(first[0], "0");
    let report = fs::read_to_string(est.join("report.txt")).unwrap();
    assert!(report.contains("penalty=none\n") && report.contains("converged="));
}

#[test]
fn every_penalty_variant_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let t = synth(tmp.path(), &[]);
    let reference = t.join("M_true.hsm");
    let y = t.join("Y.hsm");
    for (name, extra) in [
        ("ss", vec!["--alpha", "0.5"]),
        ("mv", vec!["--alpha", "0.5", "--beta", "1e-3"]),
        ("vca", vec!["--alpha", "0.5", "--beta", "0.1"]),
        ("dist", vec!["--beta", "0.1", "--reference", s(&reference)]),
        ("mutual", vec!["--beta", "0.01"]),
    ] {
        let est = tmp.path().join(name);
        let mut args = vec!["unmix", "--input", s(&y), "--penalty", name, "--out-dir", s(&est)];
        args.extend(extra);
        args.extend(["--set", "max_outer_iters=5"]);
        ok(&args);
        let report = fs::read_to_string(est.join("report.txt")).unwrap();
        assert!(report.contains(&format!("penalty={name}\n")), "{report}");
    }
}

#[test]
fn single_thread_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for run in 0..2 {
        let t = tmp.path().join(format!("t{run}"));
        let e = tmp.path().join(format!("e{run}"));
        ok(&["--threads", "1", "synth", "--width", "5", "--height", "4", "--bands", "10", "--seed", "9", "--out-dir", s(&t)]);
        ok(&["--threads", "1", "unmix", "--input", s(&t.join("Y.hsm")), "--seed", "9", "--out-dir", s(&e)]);
        dirs.push((t, e));
    }
    for f in ["Y.hsm", "M_true.hsm", "A_true.hsm", "dM_true.hsm", "spec.cfg"] {
        assert_eq!(fs::read(dirs[0].0.join(f)).unwrap(), fs::read(dirs[1].0.join(f)).unwrap(), "{f}");
    }
    for f in ["M.hsm", "A.hsm", "dM.hsm", "objective_trace.csv", "report.txt", "run.cfg"] {
        assert_eq!(fs::read(dirs[0].1.join(f)).unwrap(), fs::read(dirs[1].1.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_of_truth_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let t = synth(tmp.path(), &["--snr-db", "inf", "--seed", "4"]);
    let est = tmp.path().join("est");
    truth_as_estimate(&t, &est, &[0, 1, 2]);
    ok(&["eval", "--truth", s(&t), "--estimate", s(&est)]);
    let row = csv_row(&est.join("report.csv"));
    assert_eq!(row[0], 4.0);
    assert!(row[1].abs() < 1e-6);
    assert_eq!(&row[2..5], &[0.0, 0.0, 0.0]);
    assert!(row[5].is_nan());
}

#[test]
fn eval_ignores_endmember_order() {
    let tmp = tempfile::tempdir().unwrap();
    let t = synth(tmp.path(), &[]);
    let e1 = tmp.path().join("e1");
    let e2 = tmp.path().join("e2");
    ok(&["unmix", "--input", s(&t.join("Y.hsm")), "--out-dir", s(&e1)]);
    // reorder the estimate's columns by hand
    let m = load_hsm(e1.join("M.hsm")).unwrap();
    let a = load_hsm(e1.join("A.hsm")).unwrap();
    let dm = matrix_to_stack(&load_hsm(e1.join("dM.hsm")).unwrap(), 12, 3).unwrap();
    let perm = [2, 0, 1];
    fs::create_dir_all(&e2).unwrap();
    save_hsm(e2.join("M.hsm"), &DMatrix::from_fn(12, 3, |r, c| m[(r, perm[c])])).unwrap();
    save_hsm(e2.join("A.hsm"), &DMatrix::from_fn(3, 24, |r, c| a[(perm[r], c)])).unwrap();
    let dmp: Vec<_> = dm.iter().map(|d| DMatrix::from_fn(12, 3, |r, c| d[(r, perm[c])])).collect();
    save_hsm(e2.join("dM.hsm"), &stack_to_matrix(&dmp, 12, 3).unwrap()).unwrap();
    ok(&["eval", "--truth", s(&t), "--estimate", s(&e1)]);
    ok(&["eval", "--truth", s(&t), "--estimate", s(&e2)]);
    let r1 = csv_row(&e1.join("report.csv"));
    let r2 = csv_row(&e2.join("report.csv"));
    for i in 1..5 {
        assert!((r1[i] - r2[i]).abs() <= 1e-12 * r1[i].abs().max(1e-300), "column {i}");
    }
    assert!(r1[5] >= 0.0);
}

#[test]
fn eval_appends_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let t = synth(tmp.path(), &[]);
    let est = tmp.path().join("est");
    truth_as_estimate(&t, &est, &[0, 1, 2]);
    let csv = tmp.path().join("all.csv");
    ok(&["eval", "--truth", s(&t), "--estimate", s(&est), "--out", s(&csv), "--append"]);
    ok(&["eval", "--truth", s(&t), "--estimate", s(&est), "--out", s(&csv), "--append"]);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 3);
}

#[test]
fn eval_shape_mismatch_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let t = synth(tmp.path(), &[]);
    let est = tmp.path().join("est");
    truth_as_estimate(&t, &est, &[0, 1, 2]);
    save_hsm(est.join("A.hsm"), &DMatrix::from_element(3, 5, 0.3)).unwrap();
    assert_eq!(plmm(&["eval", "--truth", s(&t), "--estimate", s(&est)]).status.code(), Some(1));
}

#[test]
fn constant_abundance_map_is_black() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("A.hsm");
    save_hsm(&a, &DMatrix::from_element(2, 6, 0.5)).unwrap();
    let maps = tmp.path().join("maps");
    ok(&["export-maps", "--input", s(&a), "--kind", "abundance", "--width", "3", "--height", "2", "--out-dir", s(&maps)]);
    for k in 1..=2 {
        let (w, h, px) = read_pgm16(fs::File::open(maps.join(format!("abundance_{k}.pgm"))).unwrap()).unwrap();
        assert_eq!((w, h), (3, 2));
        assert!(px.iter().all(|&v| v == 0));
        let scale = fs::read_to_string(maps.join(format!("abundance_{k}.scale.txt"))).unwrap();
        assert_eq!(scale, "min=5e-1\nmax=5e-1\n");
    }
}

#[test]
fn variability_energy_map_of_hand_norms() {
    // L = 4, K = 1, 2x2 image; column norms 0, 2, 4, 6 give energies 0, 1, 2, 3
    let tmp = tempfile::tempdir().unwrap();
    let dm = DMatrix::from_columns(&[
        nalgebra::DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0]),
        nalgebra::DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0]),
        nalgebra::DVector::from_vec(vec![4.0, 0.0, 0.0, 0.0]),
        nalgebra::DVector::from_vec(vec![3.0, -3.0, 3.0, -3.0]),
    ]);
    let path = tmp.path().join("dM.hsm");
    save_hsm(&path, &dm).unwrap();
    let maps = tmp.path().join("maps");
    ok(&[
        "export-maps", "--input", s(&path), "--kind", "variability", "--endmembers", "1", "--width", "2", "--height",
        "2", "--out-dir", s(&maps),
    ]);
    let (_, _, px) = read_pgm16(fs::File::open(maps.join("variability_1.pgm")).unwrap()).unwrap();
    let scale = fs::read_to_string(maps.join("variability_1.scale.txt")).unwrap();
    assert_eq!(scale, "min=0e0\nmax=3e0\n");
    let values: Vec<f64> = px.iter().map(|&p| 3.0 * p as f64 / 65535.0).collect();
    for (v, want) in values.iter().zip([0.0, 1.0, 2.0, 3.0]) {
        assert!((v - want).abs() <= 3.0 / 65535.0);
    }
}

#[test]
fn export_maps_reads_layout_from_unmix_report() {
    let tmp = tempfile::tempdir().unwrap();
    let t = synth(tmp.path(), &[]);
    let est = tmp.path().join("est");
    ok(&["unmix", "--input", s(&t.join("Y.hsm")), "--out-dir", s(&est)]);
    let maps = tmp.path().join("maps");
    ok(&["export-maps", "--input", s(&est.join("dM.hsm")), "--kind", "variability", "--out-dir", s(&maps)]);
    let (w, h, _) = read_pgm16(fs::File::open(maps.join("variability_3.pgm")).unwrap()).unwrap();
    assert_eq!((w, h), (6, 4));
}
