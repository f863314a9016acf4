use std::fmt::Write as _;
use std::time::Instant;

use anyhow::{anyhow, Context};
use plmm::io::{stack_to_matrix, PsiChoice, RunConfig};
use plmm::{
    fit_projection, initialize, unmix, BcdConfig, HsiMatrix, InitSpec, PenaltyConfig, PsiKind, SmoothnessOperator,
    UnmixResult,
};

use crate::fsutil::{layout, load_matrix, sibling_spec, spec_usize, Outputs, REPORT_FILE, TIMING_FILE};
use crate::{runtime, usage, CliResult, PenaltyArg, UnmixArgs};

enum Reference {
    None,
    Vca,
    File,
}

fn load_config(args: &UnmixArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))
            .map_err(usage)?;
        cfg.apply_text(&text)
            .with_context(|| format!("in {}", path.display()))
            .map_err(usage)?;
    }
    for entry in &args.overrides {
        let (k, v) = entry
            .split_once('=')
            .ok_or_else(|| usage(anyhow!("--set expects KEY=VALUE, got {entry:?}")))?;
        cfg.set(&k.trim().to_ascii_lowercase(), v.trim()).map_err(usage)?;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.beta {
        cfg.beta = v;
    }
    if let Some(v) = args.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    Ok(cfg)
}

/// Resolves the endmember penalty from `--penalty` or the configuration.
fn psi_choice(args: &UnmixArgs, cfg: &mut RunConfig) -> CliResult<(PsiChoice, Reference)> {
    let choice = match args.penalty {
        None => match cfg.psi_kind {
            PsiChoice::Dist => (PsiChoice::Dist, Reference::File),
            other => (other, Reference::None),
        },
        Some(PenaltyArg::None) => {
            if cfg.alpha != 0.0 || cfg.beta != 0.0 {
                return Err(usage(anyhow!("--penalty none requires alpha = beta = 0")));
            }
            (PsiChoice::None, Reference::None)
        }
        Some(PenaltyArg::Ss) => {
            if cfg.beta != 0.0 {
                log::warn!("beta = {} has no effect with --penalty ss", cfg.beta);
            }
            (PsiChoice::None, Reference::None)
        }
        Some(PenaltyArg::Mv) => (PsiChoice::Volume, Reference::None),
        Some(PenaltyArg::Vca) => (PsiChoice::Dist, Reference::Vca),
        Some(PenaltyArg::Dist) => (PsiChoice::Dist, Reference::File),
        Some(PenaltyArg::Mutual) => (PsiChoice::Mutual, Reference::None),
    };
    cfg.psi_kind = choice.0;
    if matches!(choice.1, Reference::File) && args.reference.is_none() {
        return Err(usage(anyhow!("the dist penalty needs --reference")));
    }
    Ok(choice)
}

pub fn run(args: &UnmixArgs) -> CliResult<()> {
    let mut cfg = load_config(args)?;
    let (psi, reference) = psi_choice(args, &mut cfg)?;
    let data = load_matrix(&args.input)?;
    let spec = sibling_spec(&args.input)?;
    let k = match args.endmembers {
        Some(k) => k,
        None => spec_usize(spec.as_ref(), "endmembers")?
            .ok_or_else(|| usage(anyhow!("--endmembers is required without a spec.cfg next to the input")))?,
    };
    let (width, height) = layout(args.width, args.height, spec.as_ref(), data.ncols())?;
    let y = HsiMatrix::new(data, width, height).map_err(usage)?;
    let m0 = match (&reference, &args.reference) {
        (Reference::File, Some(path)) => {
            let m0 = load_matrix(path)?;
            if m0.shape() != (y.bands(), k) {
                return Err(usage(anyhow!(
                    "reference is {}x{}, expected {}x{k}",
                    m0.nrows(),
                    m0.ncols(),
                    y.bands()
                )));
            }
            Some(m0)
        }
        _ => None,
    };

    let started = Instant::now();
    let init = initialize(
        &y,
        k,
        &InitSpec {
            seed: cfg.seed,
            ..Default::default()
        },
    )
    .map_err(runtime)?;
    let psi_kind = match (psi, reference) {
        (PsiChoice::None, _) => PsiKind::None,
        (PsiChoice::Mutual, _) => PsiKind::MutualDist,
        (PsiChoice::Volume, _) => PsiKind::Volume,
        (PsiChoice::Dist, Reference::Vca) => PsiKind::DistToRef(init.m.clone()),
        (PsiChoice::Dist, _) => PsiKind::DistToRef(m0.expect("reference loaded above")),
    };
    let smoothness = if cfg.alpha > 0.0 {
        Some(SmoothnessOperator::new(width, height).map_err(usage)?)
    } else {
        None
    };
    let frame = if psi_kind == PsiKind::Volume {
        Some(fit_projection(&y, k).map_err(runtime)?)
    } else {
        None
    };
    let bcd = BcdConfig {
        penalty: PenaltyConfig {
            alpha: cfg.alpha,
            beta: cfg.beta,
            gamma: cfg.gamma,
            psi: psi_kind,
            smoothness,
            frame,
        },
        admm: cfg.admm.clone(),
        outer_tol: cfg.outer_tol,
        max_outer_iters: cfg.max_outer_iters,
        sweep: cfg.sweep,
    };
    bcd.validate().map_err(usage)?;
    let result = unmix(&y, init, &bcd).map_err(runtime)?;
    let elapsed = started.elapsed().as_secs_f64();

    let dir = &args.out_dir;
    let state = &result.state;
    let mut out = Outputs::default();
    out.matrix(dir.join("M.hsm"), &state.m)?;
    out.matrix(dir.join("A.hsm"), &state.a)?;
    out.matrix(
        dir.join("dM.hsm"),
        &stack_to_matrix(&state.dm, state.bands(), k).map_err(runtime)?,
    )?;
    out.text(dir.join("objective_trace.csv"), trace_csv(&result));
    out.text(dir.join(REPORT_FILE), report(&result, args.penalty, &cfg, width, height));
    out.text(dir.join("run.cfg"), cfg.to_text());
    out.text(dir.join(TIMING_FILE), format!("wall_time_s={elapsed}\n"));
    out.commit(dir)?;
    log::info!(
        "{} outer iterations, J = {:e}, {elapsed:.2} s",
        result.trace.len().saturating_sub(1),
        result.trace.last().map_or(f64::NAN, |r| r.objective)
    );
    Ok(())
}

fn trace_csv(result: &UnmixResult) -> String {
    let mut s = String::from("iteration,J,data_term,phi,psi,upsilon\n");
    for r in &result.trace {
        let t = &r.terms;
        let _ = writeln!(s, "{},{},{},{},{},{}", r.iteration, r.objective, t.data, t.phi, t.psi, t.upsilon);
    }
    s
}

fn report(result: &UnmixResult, penalty: Option<PenaltyArg>, cfg: &RunConfig, width: usize, height: usize) -> String {
    let state = &result.state;
    let v = state.constraint_violation();
    let penalty = match penalty {
        Some(p) => format!("{p:?}").to_ascii_lowercase(),
        None => cfg.psi_kind.name().to_string(),
    };
    let (mut a_solves, mut a_conv, mut m_solves, mut m_conv, mut d_solves, mut d_conv) = (0, 0, 0, 0, 0, 0);
    for r in &result.trace {
        a_solves += r.a_stats.solves;
        a_conv += r.a_stats.converged;
        m_solves += r.m_stats.solves;
        m_conv += r.m_stats.converged;
        d_solves += r.dm_stats.solves;
        d_conv += r.dm_stats.converged;
    }
    let entries = [
        ("penalty", penalty),
        ("bands", state.bands().to_string()),
        ("endmembers", state.endmembers().to_string()),
        ("width", width.to_string()),
        ("height", height.to_string()),
        ("outer_iterations", result.trace.len().saturating_sub(1).to_string()),
        ("converged", result.converged.to_string()),
        ("objective", result.trace.last().map_or(f64::NAN, |r| r.objective).to_string()),
        ("monotonicity_violations", result.monotonicity_violations.to_string()),
        ("min_abundance", v.min_abundance.to_string()),
        ("max_sum_to_one_error", v.max_sum_to_one_error.to_string()),
        ("min_endmember", v.min_endmember.to_string()),
        ("min_perturbed_endmember", v.min_perturbed_endmember.to_string()),
        ("abundance_solves_converged", format!("{a_conv}/{a_solves}")),
        ("endmember_solves_converged", format!("{m_conv}/{m_solves}")),
        ("variability_solves_converged", format!("{d_conv}/{d_solves}")),
    ];
    let mut s = String::new();
    for (k, v) in entries {
        let _ = writeln!(s, "{k}={v}");
    }
    s
}
