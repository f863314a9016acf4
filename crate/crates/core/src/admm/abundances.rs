//! Abundance block: per-pixel simplex-constrained least squares with the
//! spatial smoothness coupling.

use nalgebra::{DMatrix, DVector, DVectorView};
use rayon::prelude::*;

use super::{AdmmConfig, AdmmTrace, Control, InnerLoop, Residuals, StepStats};
use crate::error::{ensure_shape, PlmmError, Result};
use crate::linalg::SpdSolver;
use crate::model::HsiMatrix;
use crate::penalties::SmoothnessOperator;

/// How neighbour abundances are read while sweeping the pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum SweepOrder {
    /// Checkerboard: update one colour in parallel, then the other with the
    /// freshly updated neighbours. Each pixel update is then an exact block
    /// minimization of the objective.
    #[default]
    RedBlack,
    /// Every pixel reads the abundances from the start of the sweep.
    Jacobi,
}

/// Unconstrained part of one pixel's sub-problem:
/// `½ aᵀ G a − bᵀ a` with `G = BᵀB (+ smoothness)`, `b = Bᵀy (− smoothness)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelQp {
    pub gram: DMatrix<f64>,
    pub lin: DVector<f64>,
}

impl PixelQp {
    /// `B` is the pixel's perturbed endmember matrix `M + dM_n`.
    pub fn new(endmembers: &DMatrix<f64>, y: DVectorView<f64>) -> Self {
        Self {
            gram: endmembers.tr_mul(endmembers),
            lin: endmembers.tr_mul(&y),
        }
    }

    /// Adds the `a_n`-dependent part of `α½‖AH‖²_F`.
    ///
    /// With `(cA, c)` from [`SmoothnessOperator::smoothness_terms`], that part
    /// is `α (cA ‖a‖² + 2 cᵀa)`: every neighbour pair is seen by two
    /// directional blocks of `H`, once centred on each pixel.
    pub fn with_smoothness(mut self, alpha: f64, ca: f64, c: &DVector<f64>) -> Self {
        let k = self.lin.len();
        for i in 0..k {
            self.gram[(i, i)] += 2.0 * alpha * ca;
        }
        self.lin.axpy(-2.0 * alpha, c, 1.0);
        self
    }

    pub fn endmembers(&self) -> usize {
        self.lin.len()
    }

    fn system(&self, rho: f64) -> DMatrix<f64> {
        let k = self.endmembers();
        // ρ QᵀQ = ρ (I + 11ᵀ)
        DMatrix::from_fn(k, k, |i, j| {
            self.gram[(i, j)] + rho * if i == j { 2.0 } else { 1.0 }
        })
    }
}

/// Splitting variable `w ∈ ℝ^K` and scaled dual `λ ∈ ℝ^{K+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceDual {
    pub w: DVector<f64>,
    pub lambda: DVector<f64>,
}

impl AbundanceDual {
    pub fn zeros(k: usize) -> Self {
        Self {
            w: DVector::zeros(k),
            lambda: DVector::zeros(k + 1),
        }
    }
}

fn primal_rhs(qp: &PixelQp, dual: &AbundanceDual, rho: f64) -> DVector<f64> {
    let k = qp.endmembers();
    // Qᵀ(s − Rw − λ) = w − λ_{1:K} + (1 − λ_{K+1}) 1
    let tail = 1.0 - dual.lambda[k];
    DVector::from_fn(k, |i, _| qp.lin[i] + rho * (dual.w[i] - dual.lambda[i] + tail))
}

/// Closed-form minimizer over `a` of the scaled augmented Lagrangian
/// `½aᵀGa − bᵀa + ρ/2 ‖Qa + Rw − s + λ‖²`.
pub fn abundance_primal_step(qp: &PixelQp, dual: &AbundanceDual, rho: f64) -> DVector<f64> {
    SpdSolver::new(qp.system(rho)).solve(&primal_rhs(qp, dual, rho))
}

/// Splitting update `w = max(a + λ_{1:K}, 0)`.
pub fn abundance_splitting_step(a: &DVector<f64>, dual: &AbundanceDual) -> DVector<f64> {
    DVector::from_fn(a.len(), |i, _| (a[i] + dual.lambda[i]).max(0.0))
}

/// Runs the ADMM iterations for one pixel, starting from `w = 0`, `λ = 0`.
pub fn solve_abundance_pixel(qp: &PixelQp, cfg: &AdmmConfig, rho0: f64) -> (DVector<f64>, AdmmTrace) {
    let k = qp.endmembers();
    let mut dual = AbundanceDual::zeros(k);
    let mut lp = InnerLoop::new(cfg, rho0);
    let mut solver = SpdSolver::new(qp.system(lp.rho()));
    let (eps_abs, eps_rel) = lp.eps();
    let mut a;
    loop {
        let rho = lp.rho();
        a = solver.solve(&primal_rhs(qp, &dual, rho));
        let w_next = abundance_splitting_step(&a, &dual);
        let w_prev = std::mem::replace(&mut dual.w, w_next);
        let sum = a.sum();
        let mut r2 = 0.0;
        for i in 0..k {
            let ri = a[i] - dual.w[i];
            dual.lambda[i] += ri;
            r2 += ri * ri;
        }
        dual.lambda[k] += sum - 1.0;
        r2 += (sum - 1.0).powi(2);

        let qa = (a.norm_squared() + sum * sum).sqrt();
        let lam_tail = dual.lambda[k];
        let qt_lambda = (0..k)
            .map(|i| (dual.lambda[i] + lam_tail).powi(2))
            .sum::<f64>()
            .sqrt();
        let res = Residuals {
            r_norm: r2.sqrt(),
            s_norm: rho * (&dual.w - &w_prev).norm(),
            eps_pri: ((k + 1) as f64).sqrt() * eps_abs + eps_rel * qa.max(dual.w.norm()).max(1.0),
            eps_dual: (k as f64).sqrt() * eps_abs + eps_rel * rho * qt_lambda,
        };
        match lp.step(res) {
            Control::Stop => break,
            Control::Continue(None) => {}
            Control::Continue(Some(ratio)) => {
                dual.lambda *= ratio;
                solver = SpdSolver::new(qp.system(lp.rho()));
            }
        }
    }
    (a, lp.finish())
}

/// One abundance sweep: every column of `A` is re-estimated.
///
/// `dm = None` treats the perturbations as zero. `a` provides the neighbour
/// values for the smoothness term and the output shape.
#[allow(clippy::too_many_arguments)]
pub fn update_abundances(
    y: &HsiMatrix,
    m: &DMatrix<f64>,
    dm: Option<&[DMatrix<f64>]>,
    a: &DMatrix<f64>,
    smoothness: Option<&SmoothnessOperator>,
    alpha: f64,
    cfg: &AdmmConfig,
    sweep: SweepOrder,
) -> Result<(DMatrix<f64>, StepStats)> {
    let (l, k) = m.shape();
    let n = y.pixels();
    ensure_shape(y.bands() == l, || format!("data has {} bands, endmembers {}", y.bands(), l))?;
    ensure_shape(a.shape() == (k, n), || format!("abundances are {:?}, expected {:?}", a.shape(), (k, n)))?;
    if let Some(dm) = dm {
        ensure_shape(dm.len() == n, || "variability stack length differs from pixel count".into())?;
    }
    if !(alpha >= 0.0) {
        return Err(PlmmError::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    let smooth = match smoothness {
        Some(op) if alpha > 0.0 => {
            ensure_shape(op.pixels() == n, || "smoothness operator size differs from pixel count".into())?;
            Some(op)
        }
        None if alpha > 0.0 => {
            return Err(PlmmError::Config("alpha > 0 requires a smoothness operator".into()))
        }
        _ => None,
    };

    let groups: Vec<Vec<usize>> = match (smooth, sweep) {
        (Some(op), SweepOrder::RedBlack) => (0..2)
            .map(|c| (0..n).filter(|&p| op.color(p) == c).collect())
            .collect(),
        _ => vec![(0..n).collect()],
    };

    let mut out = a.clone();
    let mut stats = StepStats::default();
    for group in groups {
        let neighbors = match sweep {
            SweepOrder::Jacobi => a,
            SweepOrder::RedBlack => &out,
        };
        let solved: Vec<(usize, DVector<f64>, AdmmTrace)> = group
            .par_iter()
            .map(|&p| {
                let qp = match dm {
                    Some(dm) => PixelQp::new(&(m + &dm[p]), y.data().column(p)),
                    None => PixelQp::new(m, y.data().column(p)),
                };
                let qp = match smooth {
                    Some(op) => {
                        let (ca, c) = op.smoothness_terms(neighbors, p);
                        qp.with_smoothness(alpha, ca, &c)
                    }
                    None => qp,
                };
                let (col, trace) = solve_abundance_pixel(&qp, cfg, cfg.rho0_a);
                (p, col, trace)
            })
            .collect();
        for (p, col, trace) in solved {
            if col.iter().any(|v| !v.is_finite()) {
                return Err(PlmmError::NonFinite(format!("abundances of pixel {p}")));
            }
            out.set_column(p, &col);
            stats.record(&trace);
        }
    }
    Ok((out, stats))
}
