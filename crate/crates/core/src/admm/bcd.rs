//! Outer block coordinate descent: abundances, then endmembers, then
//! variability, until the objective stalls.

use super::{update_abundances, update_endmembers, update_variability, AdmmConfig, StepStats, SweepOrder};
use crate::error::{PlmmError, Result};
use crate::model::{objective_terms, HsiMatrix, ObjectiveBreakdown, PenaltyConfig, PlmmState};

/// Increases of `J` larger than this are counted as monotonicity violations.
pub const MONOTONICITY_SLACK: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct BcdConfig {
    pub penalty: PenaltyConfig,
    pub admm: AdmmConfig,
    /// Stop once `|J_prev − J| ≤ outer_tol · |J_prev|`.
    pub outer_tol: f64,
    pub max_outer_iters: usize,
    pub sweep: SweepOrder,
}

impl Default for BcdConfig {
    fn default() -> Self {
        Self {
            penalty: PenaltyConfig::default(),
            admm: AdmmConfig::synthetic(),
            outer_tol: 1e-3,
            max_outer_iters: 100,
            sweep: SweepOrder::RedBlack,
        }
    }
}

impl BcdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.outer_tol > 0.0) {
            return Err(PlmmError::Config(format!("outer_tol must be > 0, got {}", self.outer_tol)));
        }
        self.admm.validate()
    }
}

/// Objective after one outer iteration (iteration 0 is the initial state).
#[derive(Debug, Clone, PartialEq)]
pub struct OuterRecord {
    pub iteration: usize,
    pub terms: ObjectiveBreakdown,
    pub objective: f64,
    /// `J` went up by more than [`MONOTONICITY_SLACK`].
    pub increased: bool,
    pub a_stats: StepStats,
    pub m_stats: StepStats,
    pub dm_stats: StepStats,
}

#[derive(Debug, Clone)]
pub struct UnmixResult {
    pub state: PlmmState,
    pub trace: Vec<OuterRecord>,
    /// `false` when `max_outer_iters` was reached first.
    pub converged: bool,
    pub monotonicity_violations: usize,
}

impl UnmixResult {
    pub fn objective_values(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.objective).collect()
    }
}

/// Runs block coordinate descent from `init`.
pub fn unmix(y: &HsiMatrix, init: PlmmState, bcd: &BcdConfig) -> Result<UnmixResult> {
    bcd.validate()?;
    init.check_dims()?;
    let pen = &bcd.penalty;
    pen.validate(init.bands(), init.endmembers(), init.pixels())?;

    let mut state = init;
    let terms = objective_terms(y, &state, pen)?;
    let mut prev = terms.total();
    let mut trace = vec![OuterRecord {
        iteration: 0,
        terms,
        objective: prev,
        increased: false,
        a_stats: StepStats::default(),
        m_stats: StepStats::default(),
        dm_stats: StepStats::default(),
    }];
    let mut violations = 0;
    let mut converged = false;

    for it in 1..=bcd.max_outer_iters {
        let (a, a_stats) = update_abundances(
            y,
            &state.m,
            Some(&state.dm),
            &state.a,
            pen.smoothness.as_ref(),
            pen.alpha,
            &bcd.admm,
            bcd.sweep,
        )?;
        state.a = a;
        let (m, m_stats) = update_endmembers(
            y,
            &state.a,
            &state.dm,
            &state.m,
            &pen.psi,
            pen.beta,
            &bcd.admm,
            pen.frame.as_ref(),
        )?;
        state.m = m;
        let (dm, dm_stats) = update_variability(y, &state.m, &state.a, pen.gamma, &bcd.admm)?;
        state.dm = dm;

        let terms = objective_terms(y, &state, pen)?;
        let j = terms.total();
        if !j.is_finite() {
            return Err(PlmmError::NonFinite(format!("objective at outer iteration {it}")));
        }
        let increased = j > prev + MONOTONICITY_SLACK;
        if increased {
            violations += 1;
            log::warn!("objective increased at outer iteration {it}: {prev:.6e} -> {j:.6e}");
        }
        log::debug!("outer iteration {it}: J = {j:.6e}");
        trace.push(OuterRecord {
            iteration: it,
            terms,
            objective: j,
            increased,
            a_stats,
            m_stats,
            dm_stats,
        });
        let change = (prev - j).abs();
        prev = j;
        if change <= bcd.outer_tol * trace[trace.len() - 2].objective.abs().max(f64::EPSILON) {
            converged = true;
            break;
        }
    }
    Ok(UnmixResult {
        state,
        trace,
        converged,
        monotonicity_violations: violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn stationary_single_endmember_stops_quickly() {
        let m = DMatrix::from_column_slice(4, 1, &[0.2, 0.4, 0.6, 0.8]);
        let y = HsiMatrix::from_columns(DMatrix::from_fn(4, 6, |r, _| m[(r, 0)])).unwrap();
        let init = PlmmState::with_uniform_variability(m.clone(), DMatrix::from_element(1, 6, 1.0), 0.0).unwrap();
        let cfg = BcdConfig {
            admm: AdmmConfig {
                eps_abs: 1e-10,
                eps_rel: 1e-10,
                rho0_a: 1.0,
                rho0_m: 1.0,
                rho0_dm: 1.0,
                max_inner_iters: 5000,
                ..AdmmConfig::synthetic()
            },
            ..Default::default()
        };
        let res = unmix(&y, init, &cfg).unwrap();
        assert!(res.converged);
        assert!(res.trace.len() - 1 <= 2);
        assert!((res.state.m - m).amax() < 1e-6);
        assert!((res.state.a.add_scalar(-1.0)).amax() < 1e-6);
        assert!(res.state.dm.iter().all(|d| d.amax() < 1e-6));
    }

    #[test]
    fn rejects_non_positive_tolerance() {
        let cfg = BcdConfig {
            outer_tol: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
