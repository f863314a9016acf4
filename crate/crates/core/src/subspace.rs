//! PCA subspace used by the simplex-volume penalty.
//!
//! Endmembers are written `M = U T + Ȳ₂` where `U` spans the `K − 1`
//! leading principal directions of the data and `Ȳ₂` repeats the data mean.
//! Positivity of `M` (and of `M + dM_n`) becomes a set of interval
//! constraints on each row `t_k` of `T`, conditional on the other rows.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{ensure_shape, PlmmError, Result};
use crate::model::HsiMatrix;

/// Directions with `|u_ℓk|` below this are left out of both index sets.
pub const DIRECTION_EPS: f64 = 1e-12;
/// Tolerance allowed on crossing bounds before they are reported infeasible.
pub const BOUND_WIDENING: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaFrame {
    /// `L × (K−1)`, orthonormal columns.
    u: DMatrix<f64>,
    /// `(K−1) × L`, equal to `Uᵀ`.
    v: DMatrix<f64>,
    ybar: DVector<f64>,
    /// `(K−1) × K`, `V Ȳ₂`.
    z: DMatrix<f64>,
    eigenvalues: DVector<f64>,
}

impl PcaFrame {
    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.ybar
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    /// Eigenvalues of the centered covariance, descending, all `L` of them.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn bands(&self) -> usize {
        self.u.nrows()
    }

    pub fn endmembers(&self) -> usize {
        self.u.ncols() + 1
    }

    /// Builds a frame from explicit pieces (no orthonormality check).
    pub fn from_parts(u: DMatrix<f64>, ybar: DVector<f64>) -> Result<Self> {
        ensure_shape(u.nrows() == ybar.len(), || "U and mean disagree on band count".into())?;
        let v = u.transpose();
        let k = u.ncols() + 1;
        let z = &v * repeat_column(&ybar, k);
        Ok(Self {
            u,
            v,
            ybar,
            z,
            eigenvalues: DVector::zeros(0),
        })
    }

    /// `T = V (M − Ȳ₂)`.
    pub fn project(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        ensure_shape(m.nrows() == self.bands(), || {
            format!("matrix has {} bands, frame has {}", m.nrows(), self.bands())
        })?;
        let centered = m - repeat_column(&self.ybar, m.ncols());
        Ok(&self.v * centered)
    }

    /// `M = U T + Ȳ₂`.
    pub fn lift(&self, t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        ensure_shape(t.nrows() == self.u.ncols(), || {
            format!("T has {} rows, frame has {} directions", t.nrows(), self.u.ncols())
        })?;
        Ok(&self.u * t + repeat_column(&self.ybar, t.ncols()))
    }

    /// `dT_n = V (dM_n − Ȳ₂)`, so that `T + dT_n + Z = V (M + dM_n − Ȳ₂)`.
    pub fn project_variability(&self, dm: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.project(dm)
    }
}

pub(crate) fn repeat_column(v: &DVector<f64>, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(v.len(), cols, |r, _| v[r])
}

/// Fits the `(K−1)`-dimensional principal subspace of `Y`.
///
/// Directions are the leading eigenvectors of the centered covariance, each
/// signed so that its first non-negligible coordinate is positive.
pub fn fit_projection(y: &HsiMatrix, k: usize) -> Result<PcaFrame> {
    if k < 2 {
        return Err(PlmmError::Config(format!("volume subspace needs K >= 2, got {k}")));
    }
    let data = y.data();
    let (l, n) = data.shape();
    if n < k {
        return Err(PlmmError::Config(format!("need at least K = {k} pixels, got {n}")));
    }
    if l < k - 1 {
        return Err(PlmmError::DegenerateSubspace {
            rank: l,
            required: k - 1,
        });
    }
    let ybar = data.column_mean();
    let centered = data - repeat_column(&ybar, n);
    let cov = &centered * centered.transpose() / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = DVector::from_iterator(l, order.iter().map(|&i| eig.eigenvalues[i]));

    // relative to the data energy so that rounding noise on constant data
    // does not count as a direction
    let floor = 1e-12 * eigenvalues[0].max(data.norm_squared() / n as f64);
    let rank = eigenvalues.iter().filter(|&&e| e > floor && e > 0.0).count();
    if rank < k - 1 {
        return Err(PlmmError::DegenerateSubspace {
            rank,
            required: k - 1,
        });
    }

    let mut u = DMatrix::zeros(l, k - 1);
    for (c, &idx) in order.iter().take(k - 1).enumerate() {
        let mut col = eig.eigenvectors.column(idx).clone_owned();
        if let Some(first) = col.iter().find(|x| x.abs() > DIRECTION_EPS) {
            if *first < 0.0 {
                col = -col;
            }
        }
        u.set_column(c, &col);
    }
    let mut frame = PcaFrame::from_parts(u, ybar)?;
    frame.eigenvalues = eigenvalues;
    Ok(frame)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// `[T; 1ᵀ]`, a `K × K` matrix.
fn augmented(t: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, k) = t.shape();
    DMatrix::from_fn(r + 1, k, |i, j| if i < r { t[(i, j)] } else { 1.0 })
}

/// Simplex volume `|det([T; 1ᵀ])| / (K−1)!`.
pub fn simplex_volume(t: &DMatrix<f64>) -> f64 {
    let k = t.ncols();
    augmented(t).determinant().abs() / factorial(k - 1)
}

/// `ψ = ½ V²(T)`.
pub fn volume_psi(t: &DMatrix<f64>) -> f64 {
    let v = simplex_volume(t);
    0.5 * v * v
}

/// Cofactor vector `f_k` of `[T; 1ᵀ]` along row `k`, so that
/// `det([T; 1ᵀ]) = t_k · f_k`.
pub fn cofactor_row(t: &DMatrix<f64>, k: usize) -> DVector<f64> {
    let x = augmented(t);
    let size = x.nrows();
    DVector::from_fn(size, |j, _| {
        let minor = x.clone().remove_row(k).remove_column(j);
        let det = if minor.nrows() == 0 { 1.0 } else { minor.determinant() };
        if (k + j).is_multiple_of(2) {
            det
        } else {
            -det
        }
    })
}

/// Gradient of `½ V²(T)` with respect to row `t_k`:
/// `(t_k f_k) f_k / (K−1)!²`.
pub fn volume_psi_row_gradient(t: &DMatrix<f64>, k: usize) -> DVector<f64> {
    let f = cofactor_row(t, k);
    let det = t.row(k).transpose().dot(&f);
    let scale = factorial(t.ncols() - 1).powi(2);
    f * (det / scale)
}

/// Interval constraints on row `t_k` that keep `U T + Ȳ₂` (and the per-pixel
/// `U T_n + Ȳ₂`) non-negative, given the other rows.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeContext {
    pub row: usize,
    /// Cofactors of `[T; 1ᵀ]` along `row`.
    pub f: DVector<f64>,
    /// `t_k⁻`, entries may be `-∞`.
    pub lower: DVector<f64>,
    /// `t_k⁺`, entries may be `+∞`.
    pub upper: DVector<f64>,
    /// Row `k` of `Z = V Ȳ₂`.
    pub z: DVector<f64>,
    /// Row `k` of each `dT_n` (`N × K`); empty without variability.
    pub dt: DMatrix<f64>,
    /// `t_{n,k}⁻` per pixel (`N × K`).
    pub pixel_lower: DMatrix<f64>,
    /// `t_{n,k}⁺` per pixel (`N × K`).
    pub pixel_upper: DMatrix<f64>,
    /// Bands with `u_ℓk > 0`.
    pub plus_set: Vec<usize>,
    /// Bands with `u_ℓk < 0`.
    pub minus_set: Vec<usize>,
}

impl VolumeContext {
    pub fn pixels(&self) -> usize {
        self.dt.nrows()
    }

    /// Feasible interval for entry `r` of the row once every pixel
    /// constraint is mapped back onto `t_k`.
    pub fn combined_interval(&self, r: usize) -> (f64, f64) {
        let mut lo = self.lower[r];
        let mut hi = self.upper[r];
        for n in 0..self.pixels() {
            let shift = self.z[r] + self.dt[(n, r)];
            lo = lo.max(self.pixel_lower[(n, r)] - shift);
            hi = hi.min(self.pixel_upper[(n, r)] - shift);
        }
        (lo, hi)
    }
}

fn row_bounds(
    u: &DMatrix<f64>,
    ybar: &DVector<f64>,
    k: usize,
    plus: &[usize],
    minus: &[usize],
    other: impl Fn(usize, usize) -> f64,
    r: usize,
) -> (f64, f64) {
    let rows = u.ncols();
    let bound = |l: usize| {
        let mut acc = ybar[l];
        for j in (0..rows).filter(|&j| j != k) {
            acc += u[(l, j)] * other(j, r);
        }
        -acc / u[(l, k)]
    };
    let lo = plus.iter().map(|&l| bound(l)).fold(f64::NEG_INFINITY, f64::max);
    let hi = minus.iter().map(|&l| bound(l)).fold(f64::INFINITY, f64::min);
    (lo, hi)
}

fn check_interval(row: usize, col: usize, lo: &mut f64, hi: &mut f64) -> Result<()> {
    if *lo > *hi {
        *lo -= BOUND_WIDENING;
        *hi += BOUND_WIDENING;
        if *lo > *hi {
            return Err(PlmmError::InfeasibleBounds {
                row,
                col,
                lower: *lo,
                upper: *hi,
            });
        }
    }
    Ok(())
}

/// Positivity bounds on row `k` of `T`.
///
/// `dt` holds the projected perturbations `dT_n = V(dM_n − Ȳ₂)`; when given,
/// per-pixel bounds for `t_k^n = t_k + dt_{n,k} + z_k` are computed too.
pub fn positivity_bounds(
    frame: &PcaFrame,
    t: &DMatrix<f64>,
    k: usize,
    dt: Option<&[DMatrix<f64>]>,
) -> Result<VolumeContext> {
    let kk = frame.endmembers();
    ensure_shape(t.shape() == (kk - 1, kk), || {
        format!("T is {:?}, expected {:?}", t.shape(), (kk - 1, kk))
    })?;
    ensure_shape(k < kk - 1, || format!("row {k} out of range"))?;
    let u = frame.u();
    let ybar = frame.mean();
    let (plus_set, minus_set): (Vec<usize>, Vec<usize>) = {
        let mut p = Vec::new();
        let mut m = Vec::new();
        for l in 0..u.nrows() {
            let c = u[(l, k)];
            if c > DIRECTION_EPS {
                p.push(l);
            } else if c < -DIRECTION_EPS {
                m.push(l);
            }
        }
        (p, m)
    };

    let mut lower = DVector::zeros(kk);
    let mut upper = DVector::zeros(kk);
    for r in 0..kk {
        let (mut lo, mut hi) = row_bounds(u, ybar, k, &plus_set, &minus_set, |j, c| t[(j, c)], r);
        check_interval(k, r, &mut lo, &mut hi)?;
        lower[r] = lo;
        upper[r] = hi;
    }

    let z = frame.z().row(k).transpose();
    let dts = dt.unwrap_or(&[]);
    let n = dts.len();
    let mut dt_rows = DMatrix::zeros(n, kk);
    let mut pixel_lower = DMatrix::zeros(n, kk);
    let mut pixel_upper = DMatrix::zeros(n, kk);
    for (p, dtn) in dts.iter().enumerate() {
        ensure_shape(dtn.shape() == t.shape(), || format!("dT_{p} has wrong shape"))?;
        for r in 0..kk {
            dt_rows[(p, r)] = dtn[(k, r)];
            let tn = |j: usize, c: usize| t[(j, c)] + dtn[(j, c)] + frame.z()[(j, c)];
            let (mut lo, mut hi) = row_bounds(u, ybar, k, &plus_set, &minus_set, tn, r);
            check_interval(k, r, &mut lo, &mut hi)?;
            pixel_lower[(p, r)] = lo;
            pixel_upper[(p, r)] = hi;
        }
    }

    let ctx = VolumeContext {
        row: k,
        f: cofactor_row(t, k),
        lower,
        upper,
        z,
        dt: dt_rows,
        pixel_lower,
        pixel_upper,
        plus_set,
        minus_set,
    };
    for r in 0..kk {
        let (mut lo, mut hi) = ctx.combined_interval(r);
        check_interval(k, r, &mut lo, &mut hi)?;
    }
    Ok(ctx)
}

/// Stacked constraint values `g_k(x)`, a `2(N+1) × K` matrix; `x` is
/// feasible iff every entry is `>= 0`. Unbounded sides evaluate to `+∞`.
pub fn g_constraint(ctx: &VolumeContext, x: &DVector<f64>) -> DMatrix<f64> {
    let n = ctx.pixels();
    let k = x.len();
    let mut g = DMatrix::zeros(2 * (n + 1), k);
    for r in 0..k {
        g[(0, r)] = x[r] - ctx.lower[r];
        g[(1, r)] = -x[r] + ctx.upper[r];
        for p in 0..n {
            let shifted = x[r] + ctx.z[r] + ctx.dt[(p, r)];
            g[(2 + p, r)] = shifted - ctx.pixel_lower[(p, r)];
            g[(2 + n + p, r)] = -shifted + ctx.pixel_upper[(p, r)];
        }
    }
    g
}
