use std::io::Write as _;

use anyhow::{anyhow, Context};
use plmm::io::matrix_to_stack;
use plmm::{evaluate, HsiMatrix, PlmmState};

use crate::fsutil::{load_key_values, load_matrix, SPEC_FILE, TIMING_FILE};
use crate::{runtime, usage, CliResult, EvalArgs};

pub const HEADER: &str = "seed,aSAM_deg,GMSE_A,GMSE_dM,RE,wall_time_s";

fn state(m: nalgebra::DMatrix<f64>, a: nalgebra::DMatrix<f64>, dm: nalgebra::DMatrix<f64>) -> CliResult<PlmmState> {
    let (l, k) = m.shape();
    let dm = matrix_to_stack(&dm, l, k).map_err(runtime)?;
    PlmmState::new(m, a, dm).map_err(runtime)
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    let t = &args.truth;
    let e = &args.estimate;
    let y = load_matrix(&t.join("Y.hsm"))?;
    let truth = (
        load_matrix(&t.join("M_true.hsm"))?,
        load_matrix(&t.join("A_true.hsm"))?,
        load_matrix(&t.join("dM_true.hsm"))?,
    );
    let est = (
        load_matrix(&e.join("M.hsm"))?,
        load_matrix(&e.join("A.hsm"))?,
        load_matrix(&e.join("dM.hsm"))?,
    );
    let spec = load_key_values(&t.join(SPEC_FILE))?;
    let seed = spec.get("seed").cloned().unwrap_or_default();
    let timing = e.join(TIMING_FILE);
    let wall = if timing.is_file() {
        load_key_values(&timing)?
            .get("wall_time_s")
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| usage(anyhow!("no wall_time_s in {}", timing.display())))?
    } else {
        f64::NAN
    };

    let truth = state(truth.0, truth.1, truth.2)?;
    let est = state(est.0, est.1, est.2)?;
    let y = HsiMatrix::from_columns(y).map_err(runtime)?;
    let r = evaluate(&y, &truth, &est).map_err(runtime)?;

    let row = format!("{seed},{},{},{},{},{wall}\n", r.asam_deg, r.gmse_a, r.gmse_dm, r.re);
    let path = args.out.clone().unwrap_or_else(|| e.join("report.csv"));
    let fresh = !args.append || !path.is_file();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&path)
        .with_context(|| format!("cannot open {}", path.display()))
        .map_err(runtime)?;
    let text = if fresh { format!("{HEADER}\n{row}") } else { row };
    f.write_all(text.as_bytes()).map_err(runtime)?;
    Ok(())
}
