//! On-disk formats: HSM matrices, `key=value` configuration files and
//! 16-bit PGM maps.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::admm::{AdmmConfig, BcdConfig, SweepOrder};
use crate::error::{ensure_shape, PlmmError, Result};

const HSM_MAGIC: &str = "HSM1";
const MAX_HEADER: usize = 64;

/// Writes `"HSM1 <rows> <cols>\n"` followed by the entries as row-major
/// little-endian `f64`.
pub fn write_hsm<W: Write>(mut w: W, m: &DMatrix<f64>) -> Result<()> {
    writeln!(w, "{HSM_MAGIC} {} {}", m.nrows(), m.ncols())?;
    let mut buf = Vec::with_capacity(8 * m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            buf.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_hsm<R: Read>(mut r: R) -> Result<DMatrix<f64>> {
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(PlmmError::Format("truncated HSM header".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
        if header.len() > MAX_HEADER {
            return Err(PlmmError::Format("HSM header too long".into()));
        }
    }
    let header = std::str::from_utf8(&header).map_err(|_| PlmmError::Format("HSM header is not ASCII".into()))?;
    let parts: Vec<&str> = header.split(' ').collect();
    if parts.len() != 3 || parts[0] != HSM_MAGIC {
        return Err(PlmmError::Format(format!("bad HSM header {header:?}")));
    }
    let dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| PlmmError::Format(format!("bad HSM dimension {s:?}")))
    };
    let (rows, cols) = (dim(parts[1])?, dim(parts[2])?);
    let len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| PlmmError::Format("HSM dimensions overflow".into()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != len {
        return Err(PlmmError::Format(format!(
            "HSM payload has {} bytes, expected {len}",
            payload.len()
        )));
    }
    let mut m = DMatrix::zeros(rows, cols);
    for (i, chunk) in payload.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8 bytes"));
        m[(i / cols, i % cols)] = v;
    }
    Ok(m)
}

pub fn save_hsm(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    write_hsm(BufWriter::new(File::create(path)?), m)
}

pub fn load_hsm(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    read_hsm(BufReader::new(File::open(path)?))
}

/// Flattens `N` matrices of size `L × K` into an `(L·K) × N` matrix; entry
/// `(ℓ, k)` of `dM_n` goes to row `k·L + ℓ`, column `n`.
pub fn stack_to_matrix(dm: &[DMatrix<f64>], bands: usize, endmembers: usize) -> Result<DMatrix<f64>> {
    for d in dm {
        ensure_shape(d.shape() == (bands, endmembers), || "variability matrix has the wrong shape".into())?;
    }
    Ok(DMatrix::from_fn(bands * endmembers, dm.len(), |r, n| {
        dm[n][(r % bands, r / bands)]
    }))
}

pub fn matrix_to_stack(m: &DMatrix<f64>, bands: usize, endmembers: usize) -> Result<Vec<DMatrix<f64>>> {
    ensure_shape(m.nrows() == bands * endmembers, || {
        format!("stacked variability has {} rows, expected {}", m.nrows(), bands * endmembers)
    })?;
    Ok((0..m.ncols())
        .map(|n| DMatrix::from_fn(bands, endmembers, |l, k| m[(k * bands + l, n)]))
        .collect())
}

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; keys are lower-cased.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| PlmmError::Format(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        out.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| PlmmError::Format(format!("invalid value {v:?} for {key}")))
}

/// Endmember penalty selected in a run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsiChoice {
    None,
    Dist,
    Mutual,
    Volume,
}

impl PsiChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(PsiChoice::None),
            "dist" => Ok(PsiChoice::Dist),
            "mutual" => Ok(PsiChoice::Mutual),
            "volume" => Ok(PsiChoice::Volume),
            other => Err(PlmmError::Format(format!("unknown psi_kind {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PsiChoice::None => "none",
            PsiChoice::Dist => "dist",
            PsiChoice::Mutual => "mutual",
            PsiChoice::Volume => "volume",
        }
    }
}

/// Flat run configuration. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub psi_kind: PsiChoice,
    pub admm: AdmmConfig,
    pub outer_tol: f64,
    pub max_outer_iters: usize,
    pub sweep: SweepOrder,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bcd = BcdConfig::default();
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 1.0,
            psi_kind: PsiChoice::None,
            admm: AdmmConfig::synthetic(),
            outer_tol: bcd.outer_tol,
            max_outer_iters: bcd.max_outer_iters,
            sweep: bcd.sweep,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Applies the entries of a `key=value` file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let a = &mut self.admm;
        match key {
            "alpha" => self.alpha = parse_value(key, v)?,
            "beta" => self.beta = parse_value(key, v)?,
            "gamma" => self.gamma = parse_value(key, v)?,
            "psi_kind" => self.psi_kind = PsiChoice::parse(v)?,
            "eps_abs" => a.eps_abs = parse_value(key, v)?,
            "eps_rel" => a.eps_rel = parse_value(key, v)?,
            "tau_incr" => a.tau_incr = parse_value(key, v)?,
            "tau_decr" => a.tau_decr = parse_value(key, v)?,
            "mu" => a.mu = parse_value(key, v)?,
            "rho0_a" => a.rho0_a = parse_value(key, v)?,
            "rho0_m" => a.rho0_m = parse_value(key, v)?,
            "rho0_dm" => a.rho0_dm = parse_value(key, v)?,
            "max_inner_iters" => a.max_inner_iters = parse_value(key, v)?,
            "max_rho_updates" => a.max_rho_updates = parse_value(key, v)?,
            "outer_tol" => self.outer_tol = parse_value(key, v)?,
            "max_outer_iters" => self.max_outer_iters = parse_value(key, v)?,
            "sweep" => {
                self.sweep = match v.to_ascii_lowercase().as_str() {
                    "red-black" | "redblack" => SweepOrder::RedBlack,
                    "jacobi" => SweepOrder::Jacobi,
                    other => return Err(PlmmError::Format(format!("unknown sweep {other:?}"))),
                }
            }
            "seed" => self.seed = parse_value(key, v)?,
            other => return Err(PlmmError::Format(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let a = &self.admm;
        let sweep = match self.sweep {
            SweepOrder::RedBlack => "red-black",
            SweepOrder::Jacobi => "jacobi",
        };
        let mut s = String::new();
        let entries: [(&str, String); 18] = [
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("gamma", self.gamma.to_string()),
            ("psi_kind", self.psi_kind.name().to_string()),
            ("eps_abs", a.eps_abs.to_string()),
            ("eps_rel", a.eps_rel.to_string()),
            ("tau_incr", a.tau_incr.to_string()),
            ("tau_decr", a.tau_decr.to_string()),
            ("mu", a.mu.to_string()),
            ("rho0_A", a.rho0_a.to_string()),
            ("rho0_M", a.rho0_m.to_string()),
            ("rho0_dM", a.rho0_dm.to_string()),
            ("outer_tol", self.outer_tol.to_string()),
            ("max_outer_iters", self.max_outer_iters.to_string()),
            ("max_inner_iters", a.max_inner_iters.to_string()),
            ("max_rho_updates", a.max_rho_updates.to_string()),
            ("sweep", sweep.to_string()),
            ("seed", self.seed.to_string()),
        ];
        for (k, v) in entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// Value range recorded next to an exported map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapScale {
    pub min: f64,
    pub max: f64,
}

impl MapScale {
    /// Grey level of `v`; a degenerate range maps everything to 0.
    pub fn level(&self, v: f64) -> u16 {
        if !(self.max > self.min) {
            return 0;
        }
        (((v - self.min) / (self.max - self.min)).clamp(0.0, 1.0) * 65535.0).round() as u16
    }

    /// Inverse of [`MapScale::level`] up to quantization.
    pub fn value(&self, level: u16) -> f64 {
        if !(self.max > self.min) {
            return self.min;
        }
        self.min + (self.max - self.min) * level as f64 / 65535.0
    }
}

/// Writes a binary 16-bit PGM (`P5`, big-endian samples) with min/max
/// scaling and returns the scale used.
pub fn write_pgm16<W: Write>(mut w: W, width: usize, height: usize, values: &[f64]) -> Result<MapScale> {
    ensure_shape(values.len() == width * height, || {
        format!("{} values for a {width}x{height} map", values.len())
    })?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(PlmmError::NonFinite("map values".into()));
    }
    let scale = MapScale {
        min: values.iter().cloned().fold(f64::INFINITY, f64::min),
        max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    };
    write!(w, "P5\n{width} {height}\n65535\n")?;
    let mut buf = Vec::with_capacity(2 * values.len());
    for &v in values {
        buf.extend_from_slice(&scale.level(v).to_be_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(scale)
}

/// Reads a file produced by [`write_pgm16`].
pub fn read_pgm16<R: Read>(mut r: R) -> Result<(usize, usize, Vec<u16>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(PlmmError::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(PlmmError::Format("not a 16-bit binary PGM".into()));
    }
    let width: usize = parse_value("width", &fields[1])?;
    let height: usize = parse_value("height", &fields[2])?;
    let data = bytes.get(pos..).unwrap_or(&[]);
    if data.len() != 2 * width * height {
        return Err(PlmmError::Format("PGM payload length mismatch".into()));
    }
    let px = data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((width, height, px))
}

/// Writes `<stem>.pgm` and `<stem>.scale.txt` (`min=…`, `max=…`).
pub fn export_map(dir: &Path, stem: &str, width: usize, height: usize, values: &[f64]) -> Result<MapScale> {
    let scale = write_pgm16(BufWriter::new(File::create(dir.join(format!("{stem}.pgm")))?), width, height, values)?;
    std::fs::write(
        dir.join(format!("{stem}.scale.txt")),
        format!("min={:e}\nmax={:e}\n", scale.min, scale.max),
    )?;
    Ok(scale)
}

/// Per-pixel energy `‖dm_{n,k}‖₂ / √L` of endmember `k`.
pub fn variability_energy(dm: &[DMatrix<f64>], k: usize) -> Vec<f64> {
    dm.iter()
        .map(|d| d.column(k).norm() / (d.nrows() as f64).sqrt())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hsm_header_layout() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut buf = Vec::new();
        write_hsm(&mut buf, &m).unwrap();
        assert!(buf.starts_with(b"HSM1 2 3\n"));
        assert_eq!(buf.len(), 9 + 48);
        // row-major: second value is m[(0, 1)]
        assert_eq!(&buf[17..25], &2.0f64.to_le_bytes());
    }

    #[test]
    fn hsm_rejects_bad_payload() {
        let mut buf = Vec::new();
        write_hsm(&mut buf, &DMatrix::from_element(2, 2, 1.0)).unwrap();
        buf.pop();
        assert!(matches!(read_hsm(&buf[..]), Err(PlmmError::Format(_))));
        buf.extend_from_slice(&[0, 0]);
        assert!(matches!(read_hsm(&buf[..]), Err(PlmmError::Format(_))));
        assert!(matches!(read_hsm(&b"HSM2 1 1\n"[..]), Err(PlmmError::Format(_))));
    }

    #[test]
    fn hsm_empty_matrix() {
        let m = DMatrix::<f64>::zeros(0, 4);
        let mut buf = Vec::new();
        write_hsm(&mut buf, &m).unwrap();
        assert_eq!(read_hsm(&buf[..]).unwrap().shape(), (0, 4));
    }

    proptest! {
        #[test]
        fn hsm_round_trip_is_bit_exact(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            let mut state = seed;
            let m = DMatrix::from_fn(rows, cols, |_, _| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits(state)
            });
            let mut buf = Vec::new();
            write_hsm(&mut buf, &m).unwrap();
            let back = read_hsm(&buf[..]).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in back.iter().zip(m.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn stack_round_trip(l in 1usize..5, k in 1usize..4, n in 0usize..5) {
            let dm: Vec<_> = (0..n).map(|p| DMatrix::from_fn(l, k, |i, j| (p * 100 + i * 10 + j) as f64)).collect();
            let flat = stack_to_matrix(&dm, l, k).unwrap();
            prop_assert_eq!(matrix_to_stack(&flat, l, k).unwrap(), dm);
        }
    }

    #[test]
    fn stack_row_index() {
        let mut d = DMatrix::zeros(3, 2);
        d[(1, 1)] = 7.0;
        let flat = stack_to_matrix(&[d], 3, 2).unwrap();
        assert_eq!(flat[(3 + 1, 0)], 7.0);
    }

    #[test]
    fn config_round_trip_and_rejection() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\nalpha = 1.4\nbeta=2.5e-5\nrho0_A=0.5\npsi_kind=volume\n").unwrap();
        assert_eq!(cfg.alpha, 1.4);
        assert_eq!(cfg.beta, 2.5e-5);
        assert_eq!(cfg.admm.rho0_a, 0.5);
        assert_eq!(cfg.psi_kind, PsiChoice::Volume);
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(RunConfig::from_text("lambda=1").is_err());
        assert!(RunConfig::from_text("alpha").is_err());
        assert!(RunConfig::from_text("alpha=x").is_err());
    }

    #[test]
    fn config_defaults() {
        let c = RunConfig::default();
        assert_eq!((c.admm.tau_incr, c.admm.tau_decr, c.admm.mu), (1.1, 1.1, 10.0));
        assert_eq!((c.admm.rho0_a, c.admm.rho0_m, c.admm.rho0_dm), (1e-4, 1e-8, 1e-4));
        assert_eq!((c.admm.eps_abs, c.admm.eps_rel), (1e-1, 1e-4));
        assert_eq!(c.outer_tol, 1e-3);
    }

    #[test]
    fn constant_map_is_black() {
        let mut buf = Vec::new();
        let s = write_pgm16(&mut buf, 2, 2, &[0.3; 4]).unwrap();
        assert_eq!((s.min, s.max), (0.3, 0.3));
        let (w, h, px) = read_pgm16(&buf[..]).unwrap();
        assert_eq!((w, h), (2, 2));
        assert!(px.iter().all(|&p| p == 0));
    }

    #[test]
    fn energy_map_of_known_norms() {
        // L = 4; column norms 0, 2, 4, 6 -> energies 0, 1, 2, 3
        let dm: Vec<_> = [0.0, 1.0, 2.0, 3.0]
            .iter()
            .map(|&v| DMatrix::from_element(4, 1, v))
            .collect();
        let e = variability_energy(&dm, 0);
        assert_eq!(e, vec![0.0, 1.0, 2.0, 3.0]);
        let mut buf = Vec::new();
        let s = write_pgm16(&mut buf, 2, 2, &e).unwrap();
        let (_, _, px) = read_pgm16(&buf[..]).unwrap();
        for (p, want) in px.iter().zip(&e) {
            assert!((s.value(*p) - want).abs() <= 3.0 / 65535.0);
        }
        assert_eq!(px, vec![0, 21845, 43690, 65535]);
    }
}
