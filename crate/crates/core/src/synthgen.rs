//! Synthetic scenes with per-pixel endmember variability.
//!
//! Every pixel gets its own random curve per endmember, multiplied onto the
//! reference spectrum. Abundances are uniform on the simplex and white
//! Gaussian noise is added at a target SNR.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;

use crate::error::{ensure_shape, PlmmError, Result};
use crate::model::{HsiMatrix, PlmmState};

/// Default cap on the largest abundance when pure pixels are excluded.
pub const DEFAULT_MAX_ABUNDANCE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    /// Reference endmembers, `L × K`, non-negative.
    pub reference: DMatrix<f64>,
    /// Variability coefficient per pixel (row-major).
    pub cvar_map: Vec<f64>,
    /// `f64::INFINITY` disables the noise.
    pub snr_db: f64,
    pub pure_pixels: bool,
    /// Rejection threshold on `max_k a_kn` without pure pixels.
    pub max_abundance: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 30 dB, variability 0.1 in the upper half and 0.25 in the lower half,
    /// pure pixels present.
    pub fn new(width: usize, height: usize, reference: DMatrix<f64>) -> Self {
        Self {
            width,
            height,
            reference,
            cvar_map: split_cvar(width, height, 0.1, 0.25),
            snr_db: 30.0,
            pure_pixels: true,
            max_abundance: DEFAULT_MAX_ABUNDANCE,
            seed: 0,
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    fn validate(&self) -> Result<()> {
        let (l, k) = self.reference.shape();
        let n = self.pixels();
        ensure_shape(n >= 1, || "image must have at least one pixel".into())?;
        ensure_shape(l >= 3, || format!("at least 3 bands are needed, got {l}"))?;
        ensure_shape(k >= 1, || "at least one endmember is needed".into())?;
        ensure_shape(self.cvar_map.len() == n, || {
            format!("variability map has {} entries for {n} pixels", self.cvar_map.len())
        })?;
        if self.reference.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(PlmmError::Config("reference endmembers must be finite and non-negative".into()));
        }
        if self.cvar_map.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(PlmmError::Config("variability coefficients must be finite and >= 0".into()));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(PlmmError::Config(format!("invalid SNR {}", self.snr_db)));
        }
        if self.pure_pixels && n < k {
            return Err(PlmmError::Config(format!("{n} pixels cannot hold {k} pure pixels")));
        }
        if !self.pure_pixels && !(self.max_abundance > 1.0 / k as f64) {
            return Err(PlmmError::Config(format!(
                "max abundance {} leaves no room on the {k}-simplex",
                self.max_abundance
            )));
        }
        Ok(())
    }
}

/// Variability map with `top` on rows `< height / 2` and `bottom` below.
pub fn split_cvar(width: usize, height: usize, top: f64, bottom: f64) -> Vec<f64> {
    (0..width * height)
        .map(|n| if n / width < height / 2 { top } else { bottom })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub y: HsiMatrix,
    pub truth: PlmmState,
    pub noise_sigma: f64,
}

/// Breakpoint band (1-based) of the curve: `⌊L/2 + ⌊L·U/3⌋⌋` clamped to
/// `[2, L−1]`.
pub fn break_band(l: usize, u: f64) -> usize {
    let lf = l as f64;
    let raw = (lf / 2.0 + (lf * u / 3.0).floor()).floor();
    raw.clamp(2.0, lf - 1.0) as usize
}

/// Curve through `(1, ξ₁)`, `(L_break, ξ₂)`, `(L, ξ₃)` (bands 1-based).
pub fn piecewise_affine_curve(l: usize, xi: [f64; 3], l_break: usize) -> DVector<f64> {
    DVector::from_fn(l, |i, _| {
        let b = i + 1;
        if b <= l_break {
            let t = (b - 1) as f64 / (l_break - 1) as f64;
            (1.0 - t) * xi[0] + t * xi[1]
        } else {
            let t = (b - l_break) as f64 / (l - l_break) as f64;
            (1.0 - t) * xi[1] + t * xi[2]
        }
    })
}

/// Draws one variability curve: `ξ_i ~ U[1 − c/2, 1 + c/2]`, `U ~ N(0, 1)`.
pub fn piecewise_affine_factor<R: Rng + ?Sized>(l: usize, c_var: f64, rng: &mut R) -> DVector<f64> {
    let xi = [0; 3].map(|_| 1.0 + c_var * (rng.random::<f64>() - 0.5));
    let u: f64 = StandardNormal.sample(rng);
    piecewise_affine_curve(l, xi, break_band(l, u))
}

fn dirichlet_ones<R: Rng + ?Sized>(k: usize, rng: &mut R) -> DVector<f64> {
    let mut a = DVector::from_fn(k, |_, _| Exp1.sample(rng));
    let s = a.sum();
    a /= s;
    a
}

fn pixel_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Pixel index of the pure pixel planted for endmember `k`.
pub fn pure_pixel_index(k: usize, endmembers: usize, pixels: usize) -> usize {
    ((2 * k + 1) * pixels) / (2 * endmembers)
}

/// Draws a scene. Each pixel uses its own random stream, so the output does
/// not depend on the thread count.
pub fn generate(spec: &SyntheticSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let m = &spec.reference;
    let (l, k) = m.shape();
    let n = spec.pixels();
    let pure: Vec<Option<usize>> = (0..n)
        .map(|p| {
            if spec.pure_pixels {
                (0..k).find(|&e| pure_pixel_index(e, k, n) == p)
            } else {
                None
            }
        })
        .collect();

    let pixels: Vec<(DVector<f64>, DMatrix<f64>, DVector<f64>)> = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut rng = pixel_rng(spec.seed, 2 * p as u64);
            let a = match pure[p] {
                Some(e) => {
                    let mut a = DVector::zeros(k);
                    a[e] = 1.0;
                    a
                }
                None => loop {
                    let a = dirichlet_ones(k, &mut rng);
                    if spec.pure_pixels || a.max() <= spec.max_abundance {
                        break a;
                    }
                },
            };
            let mut dm = DMatrix::zeros(l, k);
            for e in 0..k {
                let f = piecewise_affine_factor(l, spec.cvar_map[p], &mut rng);
                for b in 0..l {
                    dm[(b, e)] = (f[b] - 1.0) * m[(b, e)];
                }
            }
            let x = m * &a + &dm * &a;
            (a, dm, x)
        })
        .collect();

    let mut a_mat = DMatrix::zeros(k, n);
    let mut x_mat = DMatrix::zeros(l, n);
    let mut dms = Vec::with_capacity(n);
    for (p, (a, dm, x)) in pixels.into_iter().enumerate() {
        a_mat.set_column(p, &a);
        x_mat.set_column(p, &x);
        dms.push(dm);
    }

    let sigma = if spec.snr_db.is_infinite() {
        0.0
    } else {
        (x_mat.norm_squared() / ((l * n) as f64 * 10f64.powf(spec.snr_db / 10.0))).sqrt()
    };
    let mut y = x_mat;
    if sigma > 0.0 {
        let noise: Vec<DVector<f64>> = (0..n)
            .into_par_iter()
            .map(|p| {
                let mut rng = pixel_rng(spec.seed, 2 * p as u64 + 1);
                DVector::from_fn(l, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sigma * z
                })
            })
            .collect();
        for (p, e) in noise.into_iter().enumerate() {
            let mut col = y.column_mut(p);
            col += e;
        }
    }
    Ok(GroundTruth {
        y: HsiMatrix::new(y, spec.width, spec.height)?,
        truth: PlmmState::new(m.clone(), a_mat, dms)?,
        noise_sigma: sigma,
    })
}

/// Smooth non-negative spectra built from Gaussian bumps on a baseline, for
/// use when no reference library is supplied.
pub fn gaussian_bump_endmembers(bands: usize, endmembers: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = DMatrix::zeros(bands, endmembers);
    let lf = bands.max(2) as f64 - 1.0;
    for e in 0..endmembers {
        let base = 0.05 + 0.15 * rng.random::<f64>();
        let bumps: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                let centre = rng.random::<f64>();
                let width = 0.05 + 0.2 * rng.random::<f64>();
                let height = 0.2 + 0.6 * rng.random::<f64>();
                (centre, width, height)
            })
            .collect();
        for b in 0..bands {
            let x = b as f64 / lf;
            let v: f64 = bumps
                .iter()
                .map(|(c, w, h)| h * (-(x - c).powi(2) / (2.0 * w * w)).exp())
                .sum();
            m[(b, e)] = base + v;
        }
    }
    m
}
