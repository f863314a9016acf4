//! Scaled-form ADMM machinery and the block solvers built on it.
//!
//! Each block update (abundances, endmembers, variability) splits its
//! constraints into a non-negative auxiliary variable, alternates a
//! closed-form primal solve with an element-wise projection, and stops on the
//! usual primal/dual residual test. The penalty parameter ρ is rebalanced
//! between the two residuals a bounded number of times.

mod abundances;
mod bcd;
mod endmembers;
mod variability;

pub use abundances::{
    abundance_primal_step, abundance_splitting_step, solve_abundance_pixel, update_abundances, AbundanceDual, PixelQp,
    SweepOrder,
};
pub use bcd::{unmix, BcdConfig, OuterRecord, UnmixResult};
pub use endmembers::{
    endmember_row_primal_step, update_endmembers, volume_row_primal_step, EndmemberRowProblem,
    VolumeRowConstraints,
};
pub use variability::{solve_variability_pixel, update_variability, variability_primal_step};

use nalgebra::{DMatrix, DVector};

use crate::error::{PlmmError, Result};

/// ADMM tolerances and penalty-parameter schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmConfig {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub tau_incr: f64,
    pub tau_decr: f64,
    /// Residual balance factor of the ρ update rule.
    pub mu: f64,
    pub rho0_a: f64,
    pub rho0_m: f64,
    pub rho0_dm: f64,
    pub max_inner_iters: usize,
    pub max_rho_updates: usize,
}

impl AdmmConfig {
    /// Parameters used on the synthetic benchmarks.
    pub fn synthetic() -> Self {
        Self {
            eps_abs: 1e-1,
            eps_rel: 1e-4,
            tau_incr: 1.1,
            tau_decr: 1.1,
            mu: 10.0,
            rho0_a: 1e-4,
            rho0_m: 1e-8,
            rho0_dm: 1e-4,
            max_inner_iters: 100,
            max_rho_updates: 50,
        }
    }

    /// Parameters used on real scenes (tighter absolute tolerance).
    pub fn real() -> Self {
        Self {
            eps_abs: 1e-2,
            ..Self::synthetic()
        }
    }

    /// Tight tolerances for stand-alone solves where the constrained
    /// minimizer itself is wanted (FCLS, reference runs).
    pub fn precise() -> Self {
        Self {
            eps_abs: 1e-10,
            eps_rel: 1e-10,
            rho0_a: 1.0,
            rho0_m: 1.0,
            rho0_dm: 1.0,
            max_inner_iters: 5000,
            ..Self::synthetic()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eps_abs", self.eps_abs),
            ("rho0_a", self.rho0_a),
            ("rho0_m", self.rho0_m),
            ("rho0_dm", self.rho0_dm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PlmmError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.eps_rel >= 0.0) {
            return Err(PlmmError::Config(format!("eps_rel must be >= 0, got {}", self.eps_rel)));
        }
        // τ = 1 switches the adaptation off
        for (name, v) in [("tau_incr", self.tau_incr), ("tau_decr", self.tau_decr), ("mu", self.mu)] {
            if !(v >= 1.0 && v.is_finite()) {
                return Err(PlmmError::Config(format!("{name} must be >= 1, got {v}")));
            }
        }
        if self.max_inner_iters == 0 {
            return Err(PlmmError::Config("max_inner_iters must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self::synthetic()
    }
}

/// Residual norms and stopping thresholds of one ADMM iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    pub r_norm: f64,
    pub s_norm: f64,
    pub eps_pri: f64,
    pub eps_dual: f64,
}

impl Residuals {
    pub fn converged(&self) -> bool {
        self.r_norm <= self.eps_pri && self.s_norm <= self.eps_dual
    }
}

/// Residuals of `min f(x) + g(z) s.t. Ax + Bz = c` in scaled form.
///
/// `u` is the scaled dual (the unscaled multiplier is `ρu`).
/// * `r = Ax + Bz − c`, `s = ρ AᵀB (z − z_prev)`
/// * `ε_pri = √p ε_abs + ε_rel max(‖Ax‖, ‖Bz‖, ‖c‖)`
/// * `ε_dual = √n ε_abs + ε_rel ‖Aᵀ(ρu)‖`
#[allow(clippy::too_many_arguments)]
pub fn admm_residuals(
    x: &DVector<f64>,
    z: &DVector<f64>,
    z_prev: &DVector<f64>,
    u: &DVector<f64>,
    a_op: &DMatrix<f64>,
    b_op: &DMatrix<f64>,
    c: &DVector<f64>,
    rho: f64,
    eps_abs: f64,
    eps_rel: f64,
) -> Residuals {
    let ax = a_op * x;
    let bz = b_op * z;
    let r = &ax + &bz - c;
    let s = (a_op.transpose() * b_op * (z - z_prev)) * rho;
    let p = a_op.nrows() as f64;
    let n = a_op.ncols() as f64;
    Residuals {
        r_norm: r.norm(),
        s_norm: s.norm(),
        eps_pri: p.sqrt() * eps_abs + eps_rel * ax.norm().max(bz.norm()).max(c.norm()),
        eps_dual: n.sqrt() * eps_abs + eps_rel * (a_op.transpose() * u * rho).norm(),
    }
}

/// Three-branch ρ rule: grow when the primal residual dominates, shrink when
/// the dual residual dominates, otherwise keep.
pub fn adjust_rho(rho: f64, r_norm: f64, s_norm: f64, cfg: &AdmmConfig) -> f64 {
    if r_norm > cfg.mu * s_norm {
        rho * cfg.tau_incr
    } else if s_norm > cfg.mu * r_norm {
        rho / cfg.tau_decr
    } else {
        rho
    }
}

/// ρ with a cap on the number of changes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoSchedule {
    pub rho: f64,
    pub updates: usize,
}

impl RhoSchedule {
    pub fn new(rho0: f64) -> Self {
        Self { rho: rho0, updates: 0 }
    }

    /// Applies [`adjust_rho`] unless the change budget is spent. Returns
    /// `old / new` when ρ changed, the factor the scaled dual must be
    /// multiplied by.
    pub fn update(&mut self, r_norm: f64, s_norm: f64, cfg: &AdmmConfig) -> Option<f64> {
        if self.updates >= cfg.max_rho_updates {
            return None;
        }
        let next = adjust_rho(self.rho, r_norm, s_norm, cfg);
        if next == self.rho {
            return None;
        }
        let ratio = self.rho / next;
        self.rho = next;
        self.updates += 1;
        Some(ratio)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIters,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub r_norm: f64,
    pub s_norm: f64,
    pub eps_pri: f64,
    pub eps_dual: f64,
    pub rho: f64,
}

/// Per-iteration history of one ADMM solve.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmTrace {
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
}

impl AdmmTrace {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }
}

/// Aggregate over the many small solves of one block update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub solves: usize,
    pub converged: usize,
    pub total_iterations: usize,
    pub max_iterations: usize,
}

impl StepStats {
    pub(crate) fn record(&mut self, trace: &AdmmTrace) {
        self.solves += 1;
        if trace.termination == Termination::Converged {
            self.converged += 1;
        }
        self.total_iterations += trace.iterations();
        self.max_iterations = self.max_iterations.max(trace.iterations());
    }

    pub fn merge(mut self, other: StepStats) -> StepStats {
        self.solves += other.solves;
        self.converged += other.converged;
        self.total_iterations += other.total_iterations;
        self.max_iterations = self.max_iterations.max(other.max_iterations);
        self
    }
}

pub(crate) enum Control {
    Stop,
    /// Continue; carries `old ρ / new ρ` when ρ changed.
    Continue(Option<f64>),
}

/// Bookkeeping shared by every inner loop: trace, stopping test, ρ schedule.
pub(crate) struct InnerLoop<'a> {
    cfg: &'a AdmmConfig,
    schedule: RhoSchedule,
    records: Vec<IterationRecord>,
}

impl<'a> InnerLoop<'a> {
    pub(crate) fn new(cfg: &'a AdmmConfig, rho0: f64) -> Self {
        Self {
            cfg,
            schedule: RhoSchedule::new(rho0),
            records: Vec::new(),
        }
    }

    pub(crate) fn rho(&self) -> f64 {
        self.schedule.rho
    }

    pub(crate) fn eps(&self) -> (f64, f64) {
        (self.cfg.eps_abs, self.cfg.eps_rel)
    }

    pub(crate) fn step(&mut self, res: Residuals) -> Control {
        self.records.push(IterationRecord {
            r_norm: res.r_norm,
            s_norm: res.s_norm,
            eps_pri: res.eps_pri,
            eps_dual: res.eps_dual,
            rho: self.schedule.rho,
        });
        if res.converged() || self.records.len() >= self.cfg.max_inner_iters {
            return Control::Stop;
        }
        Control::Continue(self.schedule.update(res.r_norm, res.s_norm, self.cfg))
    }

    pub(crate) fn finish(self) -> AdmmTrace {
        let termination = match self.records.last() {
            Some(r)
                if r.r_norm <= r.eps_pri && r.s_norm <= r.eps_dual =>
            {
                Termination::Converged
            }
            _ => Termination::MaxIters,
        };
        AdmmTrace {
            records: self.records,
            termination,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table_cfg() -> AdmmConfig {
        AdmmConfig::synthetic()
    }

    #[test]
    fn rho_grows_when_primal_dominates() {
        let cfg = table_cfg();
        assert!((adjust_rho(2.0, 11.0, 1.0, &cfg) - 2.2).abs() < 1e-15);
    }

    #[test]
    fn rho_shrinks_when_dual_dominates() {
        let cfg = table_cfg();
        assert!((adjust_rho(2.2, 1.0, 11.0, &cfg) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn rho_kept_when_balanced() {
        let cfg = table_cfg();
        assert_eq!(adjust_rho(3.0, 5.0, 5.0, &cfg), 3.0);
        // boundary: exactly μ times larger is not strictly larger
        assert_eq!(adjust_rho(3.0, 10.0, 1.0, &cfg), 3.0);
        assert_eq!(adjust_rho(3.0, 1.0, 10.0, &cfg), 3.0);
    }

    #[test]
    fn rho_update_budget_is_enforced() {
        let cfg = AdmmConfig {
            max_rho_updates: 3,
            ..table_cfg()
        };
        let mut s = RhoSchedule::new(1.0);
        for _ in 0..10 {
            s.update(100.0, 1.0, &cfg);
        }
        assert_eq!(s.updates, 3);
        assert!((s.rho - 1.1f64.powi(3)).abs() < 1e-12);
        assert_eq!(s.update(100.0, 1.0, &cfg), None);
    }

    #[test]
    fn residuals_vanish_at_feasible_fixed_point() {
        let a_op = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b_op = -DMatrix::<f64>::identity(2, 2);
        let x = DVector::from_column_slice(&[0.3, 0.4]);
        let z = x.clone();
        let c = DVector::zeros(2);
        let u = DVector::zeros(2);
        let res = admm_residuals(&x, &z, &z, &u, &a_op, &b_op, &c, 1.0, 1e-3, 1e-3);
        assert_eq!(res.r_norm, 0.0);
        assert_eq!(res.s_norm, 0.0);
        assert!(res.converged());
    }

    #[test]
    fn residual_equals_violation_when_z_is_still() {
        let a_op = DMatrix::<f64>::identity(3, 3);
        let b_op = -DMatrix::<f64>::identity(3, 3);
        let z = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        let v = DVector::from_column_slice(&[0.5, -1.0, 2.0]);
        let x = &z + &v;
        let c = DVector::zeros(3);
        let res = admm_residuals(&x, &z, &z, &c, &a_op, &b_op, &c, 2.0, 0.0, 0.0);
        assert_eq!(res.s_norm, 0.0);
        assert!((res.r_norm - v.norm()).abs() < 1e-15);
    }

    #[test]
    fn residuals_match_entrywise_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let (p, n, m) = (5, 3, 4);
            let a_op = DMatrix::from_fn(p, n, |_, _| rng.random::<f64>() - 0.5);
            let b_op = DMatrix::from_fn(p, m, |_, _| rng.random::<f64>() - 0.5);
            let x = DVector::from_fn(n, |_, _| rng.random::<f64>());
            let z = DVector::from_fn(m, |_, _| rng.random::<f64>());
            let zp = DVector::from_fn(m, |_, _| rng.random::<f64>());
            let u = DVector::from_fn(p, |_, _| rng.random::<f64>());
            let c = DVector::from_fn(p, |_, _| rng.random::<f64>());
            let rho = 0.7;
            let res = admm_residuals(&x, &z, &zp, &u, &a_op, &b_op, &c, rho, 1e-2, 1e-3);

            // independent loop evaluation
            let mut r2 = 0.0;
            let mut ax2 = 0.0;
            let mut bz2 = 0.0;
            for i in 0..p {
                let ax: f64 = (0..n).map(|j| a_op[(i, j)] * x[j]).sum();
                let bz: f64 = (0..m).map(|j| b_op[(i, j)] * z[j]).sum();
                r2 += (ax + bz - c[i]).powi(2);
                ax2 += ax * ax;
                bz2 += bz * bz;
            }
            let mut s2 = 0.0;
            let mut aty2 = 0.0;
            for j in 0..n {
                let mut acc = 0.0;
                let mut aty = 0.0;
                for i in 0..p {
                    let bdz: f64 = (0..m).map(|q| b_op[(i, q)] * (z[q] - zp[q])).sum();
                    acc += a_op[(i, j)] * bdz;
                    aty += a_op[(i, j)] * rho * u[i];
                }
                s2 += (rho * acc).powi(2);
                aty2 += aty * aty;
            }
            let c2: f64 = c.iter().map(|v| v * v).sum();
            let eps_pri = (p as f64).sqrt() * 1e-2 + 1e-3 * ax2.sqrt().max(bz2.sqrt()).max(c2.sqrt());
            let eps_dual = (n as f64).sqrt() * 1e-2 + 1e-3 * aty2.sqrt();
            assert!((res.r_norm - r2.sqrt()).abs() <= 1e-12);
            assert!((res.s_norm - s2.sqrt()).abs() <= 1e-12);
            assert!((res.eps_pri - eps_pri).abs() <= 1e-12);
            assert!((res.eps_dual - eps_dual).abs() <= 1e-12);
        }
    }

    #[test]
    fn table_values() {
        let s = AdmmConfig::synthetic();
        assert_eq!((s.tau_incr, s.tau_decr, s.mu), (1.1, 1.1, 10.0));
        assert_eq!((s.rho0_a, s.rho0_m, s.rho0_dm), (1e-4, 1e-8, 1e-4));
        assert_eq!((s.eps_abs, s.eps_rel), (1e-1, 1e-4));
        assert_eq!(AdmmConfig::real().eps_abs, 1e-2);
        assert!(s.validate().is_ok());
        assert!(AdmmConfig { tau_incr: 0.5, ..s.clone() }.validate().is_err());
    }

    #[test]
    fn inner_loop_stops_on_cap() {
        let cfg = AdmmConfig {
            max_inner_iters: 3,
            ..AdmmConfig::synthetic()
        };
        let mut lp = InnerLoop::new(&cfg, 1.0);
        let res = Residuals {
            r_norm: 1.0,
            s_norm: 1.0,
            eps_pri: 0.0,
            eps_dual: 0.0,
        };
        let mut n = 0;
        while let Control::Continue(_) = lp.step(res) {
            n += 1;
        }
        assert_eq!(n, 2);
        let t = lp.finish();
        assert_eq!(t.iterations(), 3);
        assert_eq!(t.termination, Termination::MaxIters);
    }
}
