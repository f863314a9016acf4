//! Endmember block.
//!
//! Without the volume penalty the problem separates over bands: each row
//! `m̃_ℓ` of `M` solves a `K`-dimensional ridge problem with the constraints
//! `m̃_ℓ ⪰ 0` and `m̃_ℓ + dm̃_{n,ℓ} ⪰ 0`, stacked as `e m̃_ℓ + F_ℓ = W_ℓ ⪰ 0`.
//! With the volume penalty the unknowns are the rows of the projected
//! endmembers `T`, solved one after another.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{AdmmConfig, AdmmTrace, Control, InnerLoop, Residuals, StepStats};
use crate::error::{ensure_shape, PlmmError, Result};
use crate::linalg::{ShiftedSolver, SpdSolver};
use crate::model::{HsiMatrix, PsiKind};
use crate::penalties::MutualDistOperator;
use crate::subspace::{positivity_bounds, PcaFrame, VolumeContext};

/// Sub-problem for one band `ℓ`:
/// `½ m̃ S m̃ᵀ − m̃ b + ρ/2 ‖e m̃ + F − W + Λ‖²_F` where `S` is `system` and
/// `b` is `rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct EndmemberRowProblem {
    /// `AAᵀ`, `AAᵀ + βI` or `AAᵀ + βS_G`.
    pub system: DMatrix<f64>,
    /// `(ỹ_ℓ − δ̃_ℓ)Aᵀ`, plus `β m̃_{ℓ,0}` for the reference penalty.
    pub rhs: DVector<f64>,
    /// `F_ℓ`, `(N+1) × K`: a zero row, then row `ℓ` of every `dM_n`.
    pub offsets: DMatrix<f64>,
}

impl EndmemberRowProblem {
    fn shifted_rhs(&self, w: &DMatrix<f64>, lambda: &DMatrix<f64>, rho: f64) -> DVector<f64> {
        let k = self.rhs.len();
        DVector::from_fn(k, |r, _| {
            let mut acc = 0.0;
            for i in 0..self.offsets.nrows() {
                acc += w[(i, r)] - self.offsets[(i, r)] - lambda[(i, r)];
            }
            self.rhs[r] + rho * acc
        })
    }
}

/// Closed-form minimizer over `m̃`:
/// `m̃ [S + ρ(N+1)I] = b + ρ eᵀ(W − F − Λ)`.
pub fn endmember_row_primal_step(
    problem: &EndmemberRowProblem,
    w: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    rho: f64,
) -> DVector<f64> {
    let rows = problem.offsets.nrows() as f64;
    ShiftedSolver::new(problem.system.clone()).solve(rho * rows, &problem.shifted_rhs(w, lambda, rho))
}

fn solve_endmember_row(
    problem: &EndmemberRowProblem,
    solver: &ShiftedSolver,
    cfg: &AdmmConfig,
    rho0: f64,
) -> (DVector<f64>, AdmmTrace) {
    let (rows, k) = problem.offsets.shape();
    let mut w = DMatrix::zeros(rows, k);
    let mut lambda = DMatrix::zeros(rows, k);
    let f_norm = problem.offsets.norm();
    let p = ((rows * k) as f64).sqrt();
    let mut lp = InnerLoop::new(cfg, rho0);
    let (eps_abs, eps_rel) = lp.eps();
    let mut x;
    loop {
        let rho = lp.rho();
        x = solver.solve(rho * rows as f64, &problem.shifted_rhs(&w, &lambda, rho));
        let mut r2 = 0.0;
        let mut dw = DVector::<f64>::zeros(k);
        let mut lam_sum = DVector::<f64>::zeros(k);
        for r in 0..k {
            for i in 0..rows {
                let v = x[r] + problem.offsets[(i, r)];
                let new_w = (v + lambda[(i, r)]).max(0.0);
                dw[r] += new_w - w[(i, r)];
                w[(i, r)] = new_w;
                let ri = v - new_w;
                lambda[(i, r)] += ri;
                lam_sum[r] += lambda[(i, r)];
                r2 += ri * ri;
            }
        }
        let res = Residuals {
            r_norm: r2.sqrt(),
            s_norm: rho * dw.norm(),
            eps_pri: p * eps_abs
                + eps_rel * ((rows as f64).sqrt() * x.norm()).max(w.norm()).max(f_norm),
            eps_dual: (k as f64).sqrt() * eps_abs + eps_rel * rho * lam_sum.norm(),
        };
        match lp.step(res) {
            Control::Stop => break,
            Control::Continue(None) => {}
            Control::Continue(Some(ratio)) => lambda *= ratio,
        }
    }
    (x, lp.finish())
}

/// Constraints `σ_i t + o_i ⪰ 0` on one row of `T`, in the row order of
/// [`crate::subspace::g_constraint`]. Non-finite offsets mark an unbounded
/// side and are skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeRowConstraints {
    pub sign: Vec<f64>,
    /// `2(N+1) × K`.
    pub offset: DMatrix<f64>,
}

impl VolumeRowConstraints {
    pub fn from_context(ctx: &VolumeContext) -> Self {
        let n = ctx.pixels();
        let k = ctx.lower.len();
        let rows = 2 * (n + 1);
        let mut sign = vec![1.0; rows];
        let mut offset = DMatrix::zeros(rows, k);
        sign[1] = -1.0;
        for s in sign.iter_mut().skip(2 + n) {
            *s = -1.0;
        }
        for r in 0..k {
            offset[(0, r)] = -ctx.lower[r];
            offset[(1, r)] = ctx.upper[r];
            for p in 0..n {
                let shift = ctx.z[r] + ctx.dt[(p, r)];
                offset[(2 + p, r)] = shift - ctx.pixel_lower[(p, r)];
                offset[(2 + n + p, r)] = -shift + ctx.pixel_upper[(p, r)];
            }
        }
        Self { sign, offset }
    }

    pub fn is_active(&self, i: usize, r: usize) -> bool {
        self.offset[(i, r)].is_finite()
    }

    /// Number of finite constraints per column.
    pub fn counts(&self) -> DVector<f64> {
        DVector::from_fn(self.offset.ncols(), |r, _| {
            (0..self.sign.len()).filter(|&i| self.is_active(i, r)).count() as f64
        })
    }

    /// `σ_i t + o_i` for the active entries, zero elsewhere.
    pub fn evaluate(&self, t: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.sign.len(), t.len(), |i, r| {
            if self.is_active(i, r) {
                self.sign[i] * t[r] + self.offset[(i, r)]
            } else {
                0.0
            }
        })
    }

    fn shifted_rhs(&self, target: &DVector<f64>, w: &DMatrix<f64>, lambda: &DMatrix<f64>, rho: f64) -> DVector<f64> {
        DVector::from_fn(target.len(), |r, _| {
            let mut acc = 0.0;
            for i in 0..self.sign.len() {
                if self.is_active(i, r) {
                    acc += self.sign[i] * (self.offset[(i, r)] - w[(i, r)] + lambda[(i, r)]);
                }
            }
            target[r] - rho * acc
        })
    }
}

fn volume_system(gram: &DMatrix<f64>, counts: &DVector<f64>, rho: f64) -> DMatrix<f64> {
    let mut s = gram.clone();
    for r in 0..counts.len() {
        s[(r, r)] += rho * counts[r];
    }
    s
}

/// Closed-form minimizer over the row `t` of
/// `½ t G tᵀ − t b + ρ/2 Σ_active (σ_i t_r + o_ir − W_ir + Λ_ir)²`,
/// where `G = AAᵀ + β/(K−1)!² f fᵀ` and `b = R_k Aᵀ`.
pub fn volume_row_primal_step(
    gram: &DMatrix<f64>,
    target: &DVector<f64>,
    constraints: &VolumeRowConstraints,
    w: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    rho: f64,
) -> DVector<f64> {
    let sys = volume_system(gram, &constraints.counts(), rho);
    SpdSolver::new(sys).solve(&constraints.shifted_rhs(target, w, lambda, rho))
}

fn solve_volume_row(
    gram: &DMatrix<f64>,
    target: &DVector<f64>,
    cons: &VolumeRowConstraints,
    cfg: &AdmmConfig,
    rho0: f64,
) -> (DVector<f64>, AdmmTrace) {
    let (rows, k) = cons.offset.shape();
    let counts = cons.counts();
    let active = counts.sum();
    let o_norm = cons
        .offset
        .iter()
        .filter(|v| v.is_finite())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let mut w = DMatrix::zeros(rows, k);
    let mut lambda = DMatrix::zeros(rows, k);
    let mut lp = InnerLoop::new(cfg, rho0);
    let (eps_abs, eps_rel) = lp.eps();
    let mut solver = SpdSolver::new(volume_system(gram, &counts, lp.rho()));
    let mut t;
    loop {
        let rho = lp.rho();
        t = solver.solve(&cons.shifted_rhs(target, &w, &lambda, rho));
        let mut r2 = 0.0;
        let mut dw = DVector::<f64>::zeros(k);
        let mut lam_sum = DVector::<f64>::zeros(k);
        for r in 0..k {
            for i in 0..rows {
                if !cons.is_active(i, r) {
                    continue;
                }
                let sigma = cons.sign[i];
                let v = sigma * t[r] + cons.offset[(i, r)];
                let new_w = (v + lambda[(i, r)]).max(0.0);
                dw[r] += sigma * (new_w - w[(i, r)]);
                w[(i, r)] = new_w;
                let ri = v - new_w;
                lambda[(i, r)] += ri;
                lam_sum[r] += sigma * lambda[(i, r)];
                r2 += ri * ri;
            }
        }
        let at = (0..k).map(|r| counts[r] * t[r] * t[r]).sum::<f64>().sqrt();
        let res = Residuals {
            r_norm: r2.sqrt(),
            s_norm: rho * dw.norm(),
            eps_pri: active.sqrt() * eps_abs + eps_rel * at.max(w.norm()).max(o_norm),
            eps_dual: (k as f64).sqrt() * eps_abs + eps_rel * rho * lam_sum.norm(),
        };
        match lp.step(res) {
            Control::Stop => break,
            Control::Continue(None) => {}
            Control::Continue(Some(ratio)) => {
                lambda *= ratio;
                solver = SpdSolver::new(volume_system(gram, &counts, lp.rho()));
            }
        }
    }
    (t, lp.finish())
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// `Δ = [dM_1 a_1 | … | dM_N a_N]`.
fn variability_term(dm: &[DMatrix<f64>], a: &DMatrix<f64>, bands: usize) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = dm.par_iter().enumerate().map(|(p, d)| d * a.column(p)).collect();
    let mut out = DMatrix::zeros(bands, a.ncols());
    for (p, c) in cols.into_iter().enumerate() {
        out.set_column(p, &c);
    }
    out
}

/// One endmember update. `m` is the current estimate, used as the starting
/// point of the row sweep for the volume penalty.
#[allow(clippy::too_many_arguments)]
pub fn update_endmembers(
    y: &HsiMatrix,
    a: &DMatrix<f64>,
    dm: &[DMatrix<f64>],
    m: &DMatrix<f64>,
    psi: &PsiKind,
    beta: f64,
    cfg: &AdmmConfig,
    frame: Option<&PcaFrame>,
) -> Result<(DMatrix<f64>, StepStats)> {
    let (l, k) = m.shape();
    let n = y.pixels();
    ensure_shape(y.bands() == l, || format!("data has {} bands, endmembers {}", y.bands(), l))?;
    ensure_shape(a.shape() == (k, n), || format!("abundances are {:?}, expected {:?}", a.shape(), (k, n)))?;
    ensure_shape(dm.len() == n, || "variability stack length differs from pixel count".into())?;
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(PlmmError::Config(format!("beta must be finite and >= 0, got {beta}")));
    }
    let delta = variability_term(dm, a, l);
    let gram = a * a.transpose();

    if let PsiKind::Volume = psi {
        let frame = frame.ok_or_else(|| PlmmError::Config("volume penalty requires a PCA frame".into()))?;
        return update_volume(y, a, dm, m, beta, cfg, frame, &delta, &gram);
    }

    let mut system = gram;
    let mut rhs_all = (y.data() - &delta) * a.transpose();
    match psi {
        PsiKind::None => {}
        PsiKind::DistToRef(m0) => {
            ensure_shape(m0.shape() == (l, k), || "reference endmembers have the wrong shape".into())?;
            for i in 0..k {
                system[(i, i)] += beta;
            }
            rhs_all += m0 * beta;
        }
        PsiKind::MutualDist => system += MutualDistOperator::new(k).matrix() * beta,
        PsiKind::Volume => unreachable!(),
    }
    let solver = ShiftedSolver::new(system.clone());
    let solved: Vec<(DVector<f64>, AdmmTrace)> = (0..l)
        .into_par_iter()
        .map(|band| {
            let mut offsets = DMatrix::zeros(n + 1, k);
            for (p, d) in dm.iter().enumerate() {
                offsets.row_mut(p + 1).copy_from(&d.row(band));
            }
            let problem = EndmemberRowProblem {
                system: system.clone(),
                rhs: rhs_all.row(band).transpose(),
                offsets,
            };
            solve_endmember_row(&problem, &solver, cfg, cfg.rho0_m)
        })
        .collect();
    let mut out = DMatrix::zeros(l, k);
    let mut stats = StepStats::default();
    for (band, (row, trace)) in solved.into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(PlmmError::NonFinite(format!("endmember band {band}")));
        }
        out.row_mut(band).copy_from(&row.transpose());
        stats.record(&trace);
    }
    Ok((out, stats))
}

#[allow(clippy::too_many_arguments)]
fn update_volume(
    y: &HsiMatrix,
    a: &DMatrix<f64>,
    dm: &[DMatrix<f64>],
    m: &DMatrix<f64>,
    beta: f64,
    cfg: &AdmmConfig,
    frame: &PcaFrame,
    delta: &DMatrix<f64>,
    gram: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, StepStats)> {
    let k = m.ncols();
    ensure_shape(frame.endmembers() == k && frame.bands() == m.nrows(), || {
        "PCA frame does not match the endmember matrix".into()
    })?;
    let mut t = frame.project(m)?;
    let dts = dm
        .iter()
        .map(|d| frame.project_variability(d))
        .collect::<Result<Vec<_>>>()?;
    // R = V (Y − Ȳ₂A − Δ); Ȳ₂A repeats the mean scaled by the column sums of A
    let mut centered = y.data() - delta;
    for (p, mut col) in centered.column_iter_mut().enumerate() {
        col.axpy(-a.column(p).sum(), frame.mean(), 1.0);
    }
    let targets = frame.v() * centered * a.transpose();
    let scale = beta / factorial(k - 1).powi(2);
    let mut stats = StepStats::default();
    for row in 0..k - 1 {
        let ctx = match positivity_bounds(frame, &t, row, Some(&dts)) {
            Ok(ctx) => ctx,
            Err(PlmmError::InfeasibleBounds { .. }) if !dts.is_empty() => {
                log::warn!("per-pixel bounds on row {row} are infeasible; using endmember bounds only");
                positivity_bounds(frame, &t, row, None)?
            }
            Err(e) => return Err(e),
        };
        let cons = VolumeRowConstraints::from_context(&ctx);
        let mut g = gram.clone();
        g.ger(scale, &ctx.f, &ctx.f, 1.0);
        let target = targets.row(row).transpose();
        let (new_row, trace) = solve_volume_row(&g, &target, &cons, cfg, cfg.rho0_m);
        if new_row.iter().any(|v| !v.is_finite()) {
            return Err(PlmmError::NonFinite(format!("projected endmember row {row}")));
        }
        t.row_mut(row).copy_from(&new_row.transpose());
        stats.record(&trace);
    }
    Ok((frame.lift(&t)?, stats))
}
