//! Variability block: per-pixel ridge regression on `dM_n` with
//! `M + dM_n ⪰ 0`.

use nalgebra::{DMatrix, DVector, DVectorView};
use rayon::prelude::*;

use super::{AdmmConfig, AdmmTrace, Control, InnerLoop, Residuals, StepStats};
use crate::error::{ensure_shape, PlmmError, Result};
use crate::model::HsiMatrix;

/// Closed-form minimizer over `D` of
/// `½‖y − (M + D)a‖² + γ/2 ‖D‖² + ρ/2 ‖D + M − W + Λ‖²`, i.e.
/// `[(y − Ma)aᵀ + ρ(W − M − Λ)] (aaᵀ + (ρ+γ)I)⁻¹`.
pub fn variability_primal_step(
    y: DVectorView<f64>,
    m: &DMatrix<f64>,
    a: DVectorView<f64>,
    w: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    gamma: f64,
    rho: f64,
) -> DMatrix<f64> {
    let resid = y - m * a;
    let mut x = (w - m - lambda) * rho;
    x.ger(1.0, &resid, &a, 1.0);
    apply_inverse(x, a, rho + gamma)
}

/// `X (aaᵀ + cI)⁻¹` by Sherman–Morrison.
fn apply_inverse(x: DMatrix<f64>, a: DVectorView<f64>, c: f64) -> DMatrix<f64> {
    let xa = &x * a;
    let mut out = x / c;
    out.ger(-1.0 / (c * (c + a.norm_squared())), &xa, &a, 1.0);
    out
}

/// Runs the ADMM iterations for one pixel from `W = 0`, `Λ = 0`.
pub fn solve_variability_pixel(
    y: DVectorView<f64>,
    m: &DMatrix<f64>,
    a: DVectorView<f64>,
    gamma: f64,
    cfg: &AdmmConfig,
    rho0: f64,
) -> (DMatrix<f64>, AdmmTrace) {
    let (l, k) = m.shape();
    let resid: DVector<f64> = y - m * a;
    let a_norm2 = a.norm_squared();
    let m_norm = m.norm();
    let p = ((l * k) as f64).sqrt();
    let mut w = DMatrix::zeros(l, k);
    let mut lambda = DMatrix::zeros(l, k);
    let mut lp = InnerLoop::new(cfg, rho0);
    let (eps_abs, eps_rel) = lp.eps();
    let mut d;
    loop {
        let rho = lp.rho();
        let c = rho + gamma;
        let mut x = (&w - m - &lambda) * rho;
        x.ger(1.0, &resid, &a, 1.0);
        let xa = &x * a;
        d = x / c;
        d.ger(-1.0 / (c * (c + a_norm2)), &xa, &a, 1.0);

        let w_prev = std::mem::replace(&mut w, DMatrix::zeros(l, k));
        let mut r2 = 0.0;
        for i in 0..l * k {
            let v = d[i] + m[i];
            w[i] = (v + lambda[i]).max(0.0);
            let ri = v - w[i];
            lambda[i] += ri;
            r2 += ri * ri;
        }
        let res = Residuals {
            r_norm: r2.sqrt(),
            s_norm: rho * (&w - &w_prev).norm(),
            eps_pri: p * eps_abs + eps_rel * d.norm().max(w.norm()).max(m_norm),
            eps_dual: p * eps_abs + eps_rel * rho * lambda.norm(),
        };
        match lp.step(res) {
            Control::Stop => break,
            Control::Continue(None) => {}
            Control::Continue(Some(ratio)) => lambda *= ratio,
        }
    }
    (d, lp.finish())
}

/// One variability sweep over all pixels.
pub fn update_variability(
    y: &HsiMatrix,
    m: &DMatrix<f64>,
    a: &DMatrix<f64>,
    gamma: f64,
    cfg: &AdmmConfig,
) -> Result<(Vec<DMatrix<f64>>, StepStats)> {
    let (l, k) = m.shape();
    let n = y.pixels();
    ensure_shape(y.bands() == l, || format!("data has {} bands, endmembers {}", y.bands(), l))?;
    ensure_shape(a.shape() == (k, n), || format!("abundances are {:?}, expected {:?}", a.shape(), (k, n)))?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(PlmmError::Config(format!("gamma must be finite and >= 0, got {gamma}")));
    }
    let solved: Vec<(DMatrix<f64>, AdmmTrace)> = (0..n)
        .into_par_iter()
        .map(|p| solve_variability_pixel(y.data().column(p), m, a.column(p), gamma, cfg, cfg.rho0_dm))
        .collect();
    let mut stats = StepStats::default();
    let mut out = Vec::with_capacity(n);
    for (p, (d, trace)) in solved.into_iter().enumerate() {
        if d.iter().any(|v| !v.is_finite()) {
            return Err(PlmmError::NonFinite(format!("variability of pixel {p}")));
        }
        stats.record(&trace);
        out.push(d);
    }
    Ok((out, stats))
}
