//! Starting points: VCA endmembers, FCLS abundances, constant perturbations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::admm::{update_abundances, AdmmConfig, StepStats, SweepOrder};
use crate::error::{PlmmError, Result};
use crate::model::{HsiMatrix, PlmmState};
use crate::subspace::repeat_column;

/// Double-precision machine epsilon, the default fill of the initial `dM_n`.
pub const DEFAULT_DM_INIT: f64 = 2.22e-16;

#[derive(Debug, Clone)]
pub enum InitMethod {
    VcaFcls,
    Provided(PlmmState),
}

#[derive(Debug, Clone)]
pub struct InitSpec {
    pub method: InitMethod,
    pub seed: u64,
    pub dm_init_value: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            method: InitMethod::VcaFcls,
            seed: 0,
            dm_init_value: DEFAULT_DM_INIT,
        }
    }
}

/// Builds the initial state for `k` endmembers.
///
/// A provided state is returned unchanged apart from the dimension check.
pub fn initialize(y: &HsiMatrix, k: usize, spec: &InitSpec) -> Result<PlmmState> {
    match &spec.method {
        InitMethod::Provided(state) => {
            state.check_dims()?;
            if state.bands() != y.bands() || state.pixels() != y.pixels() || state.endmembers() != k {
                return Err(PlmmError::Shape("provided initial state does not match the data".into()));
            }
            Ok(state.clone())
        }
        InitMethod::VcaFcls => {
            let m = vca(y, k, spec.seed)?;
            let (a, _) = fcls(y, &m)?;
            PlmmState::with_uniform_variability(m, a, spec.dm_init_value)
        }
    }
}

fn leading_eigenvectors(c: DMatrix<f64>, d: usize) -> DMatrix<f64> {
    let l = c.nrows();
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut u = DMatrix::zeros(l, d);
    for (c, &idx) in order.iter().take(d).enumerate() {
        u.set_column(c, &eig.eigenvectors.column(idx));
    }
    u
}

/// Vertex component analysis: picks `k` columns of `Y` that are extreme
/// points of the data cloud.
///
/// The data is reduced to `k` dimensions (projective projection at high
/// SNR, centered `k − 1` dimensional PCA plus a constant coordinate at low
/// SNR); then `k` times a random direction orthogonal to the vertices found
/// so far is drawn and the pixel with the largest absolute projection is
/// kept. Returns the selected columns of `Y` itself.
pub fn vca(y: &HsiMatrix, k: usize, seed: u64) -> Result<DMatrix<f64>> {
    let data = y.data();
    let (l, n) = data.shape();
    if k < 2 || n < k {
        return Err(PlmmError::Config(format!("VCA needs N >= K >= 2, got N = {n}, K = {k}")));
    }
    if l < k {
        return Err(PlmmError::DegenerateData(format!("{l} bands cannot hold {k} endmembers")));
    }
    let nf = n as f64;
    let mean = data.column_mean();
    let centered = data - repeat_column(&mean, n);
    let ud = leading_eigenvectors(&centered * centered.transpose() / nf, k);
    let xp = ud.tr_mul(&centered);

    let p_y = data.norm_squared() / nf;
    let p_x = xp.norm_squared() / nf + mean.norm_squared();
    let snr = 10.0 * ((p_x - k as f64 / l as f64 * p_y) / (p_y - p_x)).log10();
    let threshold = 15.0 + 10.0 * (k as f64).log10();
    let low_snr = snr.is_finite() && snr < threshold;
    log::debug!("VCA SNR estimate {snr:.2} dB (threshold {threshold:.2} dB)");

    let proj = if low_snr {
        let x = xp.rows(0, k - 1).into_owned();
        let c = x.column_iter().map(|col| col.norm()).fold(0.0, f64::max);
        DMatrix::from_fn(k, n, |r, j| if r < k - 1 { x[(r, j)] } else { c })
    } else {
        let ud = leading_eigenvectors(data * data.transpose() / nf, k);
        let xp = ud.tr_mul(data);
        let u = xp.column_mean();
        let mut out = xp.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let denom = xp.column(j).dot(&u);
            if denom.abs() < f64::MIN_POSITIVE {
                return Err(PlmmError::DegenerateData(format!("pixel {j} is orthogonal to the mean direction")));
            }
            col /= denom;
        }
        out
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis = DMatrix::zeros(k, k);
    basis[(k - 1, 0)] = 1.0;
    let mut picked = Vec::with_capacity(k);
    for i in 0..k {
        let w = DVector::from_fn(k, |_, _| rng.random::<f64>());
        let pinv = basis
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| PlmmError::DegenerateData(e.to_string()))?;
        let mut f = &w - &basis * (pinv * &w);
        let norm = f.norm();
        if !(norm > 1e-12) {
            return Err(PlmmError::DegenerateData("no direction orthogonal to the selected vertices".into()));
        }
        f /= norm;
        let v = f.tr_mul(&proj);
        let (idx, best) = v
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (j, x)| if x.abs() > acc.1 { (j, x.abs()) } else { acc });
        if !(best > 0.0) {
            return Err(PlmmError::DegenerateData("data collapsed onto the selected vertices".into()));
        }
        basis.set_column(i, &proj.column(idx));
        picked.push(idx);
    }
    let mut m = DMatrix::zeros(l, k);
    for (c, &idx) in picked.iter().enumerate() {
        m.set_column(c, &data.column(idx));
    }
    Ok(m)
}

/// Fully constrained least squares: per-pixel `min ½‖y − Ma‖²` over the
/// simplex, solved with [`AdmmConfig::precise`].
pub fn fcls(y: &HsiMatrix, m: &DMatrix<f64>) -> Result<(DMatrix<f64>, StepStats)> {
    fcls_with(y, m, &AdmmConfig::precise())
}

pub fn fcls_with(y: &HsiMatrix, m: &DMatrix<f64>, cfg: &AdmmConfig) -> Result<(DMatrix<f64>, StepStats)> {
    let k = m.ncols();
    let a0 = DMatrix::from_element(k, y.pixels(), 1.0 / k as f64);
    update_abundances(y, m, None, &a0, None, 0.0, cfg, SweepOrder::Jacobi)
}
