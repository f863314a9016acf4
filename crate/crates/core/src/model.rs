//! Data types of the perturbed linear mixing model, the forward model and the
//! regularized objective.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{ensure_shape, PlmmError, Result};
use crate::penalties::{self, SmoothnessOperator};
use crate::subspace::{self, PcaFrame};

/// Observation matrix: `bands × pixels`, one pixel spectrum per column.
///
/// Pixels are ordered row-major over the image grid: pixel `(i, j)` (row `i`,
/// column `j`) lives in column `i * width + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiMatrix {
    data: DMatrix<f64>,
    width: usize,
    height: usize,
}

impl HsiMatrix {
    pub fn new(data: DMatrix<f64>, width: usize, height: usize) -> Result<Self> {
        ensure_shape(data.nrows() >= 1, || "at least one band is required".into())?;
        ensure_shape(width >= 1 && height >= 1, || "image dimensions must be positive".into())?;
        ensure_shape(data.ncols() == width * height, || {
            format!(
                "{} pixels stored but image is {}x{}",
                data.ncols(),
                width,
                height
            )
        })?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PlmmError::NonFinite("observation matrix".into()));
        }
        Ok(Self {
            data,
            width,
            height,
        })
    }

    /// Wraps a matrix as a single-row image (`width = N`, `height = 1`).
    pub fn from_columns(data: DMatrix<f64>) -> Result<Self> {
        let n = data.ncols();
        Self::new(data, n, 1)
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.data
    }

    pub fn bands(&self) -> usize {
        self.data.nrows()
    }

    pub fn pixels(&self) -> usize {
        self.data.ncols()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }
}

/// Endmembers, abundances and per-pixel endmember perturbations.
#[derive(Debug, Clone, PartialEq)]
pub struct PlmmState {
    /// `L × K` endmember matrix.
    pub m: DMatrix<f64>,
    /// `K × N` abundance matrix.
    pub a: DMatrix<f64>,
    /// `N` perturbation matrices, each `L × K`.
    pub dm: Vec<DMatrix<f64>>,
}

impl PlmmState {
    pub fn new(m: DMatrix<f64>, a: DMatrix<f64>, dm: Vec<DMatrix<f64>>) -> Result<Self> {
        let state = Self { m, a, dm };
        state.check_dims()?;
        Ok(state)
    }

    /// State with every perturbation entry set to `fill`.
    pub fn with_uniform_variability(m: DMatrix<f64>, a: DMatrix<f64>, fill: f64) -> Result<Self> {
        let dm = vec![DMatrix::from_element(m.nrows(), m.ncols(), fill); a.ncols()];
        Self::new(m, a, dm)
    }

    pub fn bands(&self) -> usize {
        self.m.nrows()
    }

    pub fn endmembers(&self) -> usize {
        self.m.ncols()
    }

    pub fn pixels(&self) -> usize {
        self.a.ncols()
    }

    pub fn check_dims(&self) -> Result<()> {
        let (l, k) = self.m.shape();
        ensure_shape(self.a.nrows() == k, || {
            format!("abundances have {} rows, expected {}", self.a.nrows(), k)
        })?;
        ensure_shape(self.dm.len() == self.a.ncols(), || {
            format!(
                "{} variability matrices for {} pixels",
                self.dm.len(),
                self.a.ncols()
            )
        })?;
        for (n, d) in self.dm.iter().enumerate() {
            ensure_shape(d.shape() == (l, k), || {
                format!("variability matrix {n} is {:?}, expected {:?}", d.shape(), (l, k))
            })?;
        }
        Ok(())
    }

    /// Largest violation of the abundance, endmember and perturbed-endmember
    /// constraints (0 when feasible).
    pub fn constraint_violation(&self) -> ConstraintViolation {
        let min_a = self.a.iter().cloned().fold(f64::INFINITY, f64::min);
        let sum_err = self
            .a
            .column_iter()
            .map(|c| (c.sum() - 1.0).abs())
            .fold(0.0, f64::max);
        let min_m = self.m.iter().cloned().fold(f64::INFINITY, f64::min);
        let min_perturbed = self
            .dm
            .iter()
            .map(|d| {
                self.m
                    .iter()
                    .zip(d.iter())
                    .map(|(m, d)| m + d)
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(f64::INFINITY, f64::min);
        ConstraintViolation {
            min_abundance: min_a,
            max_sum_to_one_error: sum_err,
            min_endmember: min_m,
            min_perturbed_endmember: min_perturbed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintViolation {
    pub min_abundance: f64,
    pub max_sum_to_one_error: f64,
    pub min_endmember: f64,
    pub min_perturbed_endmember: f64,
}

/// Endmember regularizer.
#[derive(Debug, Clone, PartialEq)]
pub enum PsiKind {
    None,
    /// Distance to reference signatures `M0` (`L × K`).
    DistToRef(DMatrix<f64>),
    MutualDist,
    /// Simplex volume in the PCA subspace; needs [`PenaltyConfig::frame`].
    Volume,
}

impl PsiKind {
    pub fn name(&self) -> &'static str {
        match self {
            PsiKind::None => "none",
            PsiKind::DistToRef(_) => "dist",
            PsiKind::MutualDist => "mutual",
            PsiKind::Volume => "volume",
        }
    }
}

/// Penalty weights and the data each penalty needs.
#[derive(Debug, Clone)]
pub struct PenaltyConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub psi: PsiKind,
    /// Needed whenever `alpha > 0`.
    pub smoothness: Option<SmoothnessOperator>,
    /// Needed for [`PsiKind::Volume`].
    pub frame: Option<PcaFrame>,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 1.0,
            psi: PsiKind::None,
            smoothness: None,
            frame: None,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self, bands: usize, endmembers: usize, pixels: usize) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(PlmmError::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if self.alpha > 0.0 {
            match &self.smoothness {
                None => {
                    return Err(PlmmError::Config(
                        "alpha > 0 requires a smoothness operator".into(),
                    ))
                }
                Some(op) => ensure_shape(op.pixels() == pixels, || {
                    format!("smoothness operator built for {} pixels, data has {pixels}", op.pixels())
                })?,
            }
        }
        match &self.psi {
            PsiKind::DistToRef(m0) => ensure_shape(m0.shape() == (bands, endmembers), || {
                format!("reference endmembers are {:?}, expected {:?}", m0.shape(), (bands, endmembers))
            })?,
            PsiKind::Volume => match &self.frame {
                None => return Err(PlmmError::Config("volume penalty requires a PCA frame".into())),
                Some(f) => ensure_shape(f.bands() == bands && f.endmembers() == endmembers, || {
                    "PCA frame does not match the state dimensions".into()
                })?,
            },
            PsiKind::None | PsiKind::MutualDist => {}
        }
        Ok(())
    }
}

/// Per-pixel reconstruction `ŷ_n = (M + dM_n) a_n`.
pub fn reconstruct(state: &PlmmState) -> Result<DMatrix<f64>> {
    state.check_dims()?;
    let (l, _) = state.m.shape();
    let n = state.pixels();
    let cols: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|p| {
            let a = state.a.column(p);
            &state.m * a + &state.dm[p] * a
        })
        .collect();
    let mut out = DMatrix::zeros(l, n);
    for (p, c) in cols.into_iter().enumerate() {
        out.set_column(p, &c);
    }
    Ok(out)
}

/// The four terms of the objective, unweighted, with the weights used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveBreakdown {
    /// `½‖Y − MA − Δ‖²_F`
    pub data: f64,
    pub phi: f64,
    pub psi: f64,
    pub upsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl ObjectiveBreakdown {
    pub fn total(&self) -> f64 {
        self.data + self.alpha * self.phi + self.beta * self.psi + self.gamma * self.upsilon
    }
}

/// Evaluates `J = ½‖Y − MA − Δ‖²_F + αΦ(A) + βΨ(M) + γΥ(dM)` term by term.
pub fn objective_terms(
    y: &HsiMatrix,
    state: &PlmmState,
    cfg: &PenaltyConfig,
) -> Result<ObjectiveBreakdown> {
    ensure_shape(y.bands() == state.bands() && y.pixels() == state.pixels(), || {
        format!(
            "data is {}x{}, state is {}x{}",
            y.bands(),
            y.pixels(),
            state.bands(),
            state.pixels()
        )
    })?;
    cfg.validate(state.bands(), state.endmembers(), state.pixels())?;
    let yhat = reconstruct(state)?;
    let data = 0.5 * (y.data() - yhat).norm_squared();
    let phi = match &cfg.smoothness {
        Some(op) if op.pixels() == state.pixels() => op.phi_value(&state.a)?,
        _ => 0.0,
    };
    let psi = match &cfg.psi {
        PsiKind::None => 0.0,
        PsiKind::DistToRef(m0) => penalties::psi_dist_value(&state.m, m0)?,
        PsiKind::MutualDist => penalties::psi_mutual_value(&state.m),
        PsiKind::Volume => {
            let frame = cfg
                .frame
                .as_ref()
                .ok_or_else(|| PlmmError::Config("volume penalty requires a PCA frame".into()))?;
            subspace::volume_psi(&frame.project(&state.m)?)
        }
    };
    let upsilon = penalties::upsilon_value(&state.dm);
    Ok(ObjectiveBreakdown {
        data,
        phi,
        psi,
        upsilon,
        alpha: cfg.alpha,
        beta: cfg.beta,
        gamma: cfg.gamma,
    })
}

/// Scalar objective value.
pub fn objective(y: &HsiMatrix, state: &PlmmState, cfg: &PenaltyConfig) -> Result<f64> {
    objective_terms(y, state, cfg).map(|t| t.total())
}
