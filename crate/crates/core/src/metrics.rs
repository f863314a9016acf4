//! Evaluation against a known ground truth.

use itertools::Itertools;
use nalgebra::{DMatrix, DVectorView};

use crate::error::{ensure_shape, PlmmError, Result};
use crate::model::{reconstruct, HsiMatrix, PlmmState};

/// Above this many endmembers the matching is greedy instead of exhaustive.
pub const EXHAUSTIVE_MATCH_LIMIT: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub asam_deg: f64,
    pub gmse_a: f64,
    pub gmse_dm: f64,
    pub re: f64,
    /// `permutation[k]` is the estimated endmember matched to true endmember `k`.
    pub permutation: Vec<usize>,
}

/// Angle between two spectra in radians, cosine clamped to `[−1, 1]`.
pub fn spectral_angle(a: DVectorView<f64>, b: DVectorView<f64>, col: usize) -> Result<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(PlmmError::UndefinedAngle(col));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0).acos())
}

fn angle_table(m_true: &DMatrix<f64>, m_est: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_shape(m_true.shape() == m_est.shape(), || {
        format!("endmembers {:?} vs {:?}", m_true.shape(), m_est.shape())
    })?;
    let k = m_true.ncols();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            t[(i, j)] = spectral_angle(m_true.column(i), m_est.column(j), i.max(j))?;
        }
    }
    Ok(t)
}

/// Assignment of estimated to true endmembers minimizing the summed angle.
pub fn match_endmembers(m_true: &DMatrix<f64>, m_est: &DMatrix<f64>) -> Result<Vec<usize>> {
    let table = angle_table(m_true, m_est)?;
    let k = table.nrows();
    if k <= EXHAUSTIVE_MATCH_LIMIT {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for perm in (0..k).permutations(k) {
            let cost: f64 = perm.iter().enumerate().map(|(i, &j)| table[(i, j)]).sum();
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, perm));
            }
        }
        return Ok(best.map(|(_, p)| p).unwrap_or_default());
    }
    // greedy: repeatedly take the globally smallest remaining angle
    let mut perm = vec![usize::MAX; k];
    let mut used = vec![false; k];
    for _ in 0..k {
        let (i, j) = (0..k)
            .filter(|&i| perm[i] == usize::MAX)
            .cartesian_product((0..k).filter(|&j| !used[j]))
            .min_by(|&(a, b), &(c, d)| table[(a, b)].total_cmp(&table[(c, d)]))
            .expect("unmatched pair remains");
        perm[i] = j;
        used[j] = true;
    }
    Ok(perm)
}

/// Reorders the endmembers of `state` so that new endmember `k` is old
/// endmember `perm[k]`.
pub fn apply_permutation(state: &PlmmState, perm: &[usize]) -> Result<PlmmState> {
    let k = state.endmembers();
    let mut seen = vec![false; k];
    ensure_shape(perm.len() == k, || "permutation length differs from K".into())?;
    for &p in perm {
        if p >= k || seen[p] {
            return Err(PlmmError::Config("not a permutation".into()));
        }
        seen[p] = true;
    }
    let m = DMatrix::from_fn(state.bands(), k, |r, c| state.m[(r, perm[c])]);
    let a = DMatrix::from_fn(k, state.pixels(), |r, c| state.a[(perm[r], c)]);
    let dm = state
        .dm
        .iter()
        .map(|d| DMatrix::from_fn(d.nrows(), k, |r, c| d[(r, perm[c])]))
        .collect();
    PlmmState::new(m, a, dm)
}

/// Mean spectral angle in degrees over matched columns.
pub fn asam(m_true: &DMatrix<f64>, m_est: &DMatrix<f64>) -> Result<f64> {
    ensure_shape(m_true.shape() == m_est.shape(), || "endmember shapes differ".into())?;
    let k = m_true.ncols();
    let mut total = 0.0;
    for c in 0..k {
        total += spectral_angle(m_true.column(c), m_est.column(c), c)?;
    }
    Ok((total / k as f64).to_degrees())
}

/// `‖A − Â‖²_F / (KN)`.
pub fn gmse_a(a_true: &DMatrix<f64>, a_est: &DMatrix<f64>) -> Result<f64> {
    ensure_shape(a_true.shape() == a_est.shape(), || "abundance shapes differ".into())?;
    Ok((a_true - a_est).norm_squared() / a_true.len() as f64)
}

/// `Σ_n ‖dM_n − d̂M_n‖²_F / (NLK)`.
pub fn gmse_dm(dm_true: &[DMatrix<f64>], dm_est: &[DMatrix<f64>]) -> Result<f64> {
    ensure_shape(dm_true.len() == dm_est.len(), || "variability stacks differ in length".into())?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, e) in dm_true.iter().zip(dm_est) {
        ensure_shape(t.shape() == e.shape(), || "variability shapes differ".into())?;
        total += (t - e).norm_squared();
        count += t.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// `‖Y − Ŷ‖²_F / (LN)`.
pub fn re(y: &DMatrix<f64>, y_hat: &DMatrix<f64>) -> Result<f64> {
    ensure_shape(y.shape() == y_hat.shape(), || "data shapes differ".into())?;
    Ok((y - y_hat).norm_squared() / y.len() as f64)
}

/// Matches `estimate` to `truth`, then computes every metric.
pub fn evaluate(y: &HsiMatrix, truth: &PlmmState, estimate: &PlmmState) -> Result<EvalReport> {
    truth.check_dims()?;
    estimate.check_dims()?;
    ensure_shape(
        truth.bands() == estimate.bands()
            && truth.endmembers() == estimate.endmembers()
            && truth.pixels() == estimate.pixels(),
        || "truth and estimate dimensions differ".into(),
    )?;
    let perm = match_endmembers(&truth.m, &estimate.m)?;
    let est = apply_permutation(estimate, &perm)?;
    Ok(EvalReport {
        asam_deg: asam(&truth.m, &est.m)?,
        gmse_a: gmse_a(&truth.a, &est.a)?,
        gmse_dm: gmse_dm(&truth.dm, &est.dm)?,
        re: re(y.data(), &reconstruct(estimate)?)?,
        permutation: perm,
    })
}
