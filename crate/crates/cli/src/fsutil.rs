//! Shared file helpers for the subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use nalgebra::DMatrix;
use plmm::io;

use crate::{usage, CliResult};

pub const SPEC_FILE: &str = "spec.cfg";
pub const TIMING_FILE: &str = "timing.txt";
pub const REPORT_FILE: &str = "report.txt";

/// Loads an HSM file; any failure is an input error.
pub fn load_matrix(path: &Path) -> CliResult<DMatrix<f64>> {
    io::load_hsm(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(usage)
}

/// Reads a `key=value` file into a map.
pub fn load_key_values(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(usage)?;
    let pairs = io::parse_key_values(&text)
        .with_context(|| format!("in {}", path.display()))
        .map_err(usage)?;
    Ok(pairs.into_iter().collect())
}

/// Layout description next to `file`: `spec.cfg` from `synth`, else
/// `report.txt` from `unmix`.
pub fn sibling_spec(file: &Path) -> CliResult<Option<BTreeMap<String, String>>> {
    let dir = file.parent().unwrap_or(Path::new("."));
    for name in [SPEC_FILE, REPORT_FILE] {
        let path = dir.join(name);
        if path.is_file() {
            return load_key_values(&path).map(Some);
        }
    }
    Ok(None)
}

pub fn spec_usize(spec: Option<&BTreeMap<String, String>>, key: &str) -> CliResult<Option<usize>> {
    match spec.and_then(|s| s.get(key)) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| usage(anyhow!("invalid {key} {v:?} in {SPEC_FILE}"))),
    }
}

/// Picks the image layout: explicit flags, then `spec.cfg`, then one row.
pub fn layout(
    width: Option<usize>,
    height: Option<usize>,
    spec: Option<&BTreeMap<String, String>>,
    pixels: usize,
) -> CliResult<(usize, usize)> {
    let w = match width {
        Some(w) => Some(w),
        None => spec_usize(spec, "width")?,
    };
    let h = match height {
        Some(h) => Some(h),
        None => spec_usize(spec, "height")?,
    };
    let (w, h) = match (w, h) {
        (Some(w), Some(h)) => (w, h),
        (Some(w), None) if w > 0 && pixels.is_multiple_of(w) => (w, pixels / w),
        (None, Some(h)) if h > 0 && pixels.is_multiple_of(h) => (pixels / h, h),
        (None, None) => (pixels, 1),
        _ => return Err(usage(anyhow!("image size does not divide {pixels} pixels"))),
    };
    if w * h != pixels {
        return Err(usage(anyhow!("{w}x{h} image does not match {pixels} pixels")));
    }
    Ok((w, h))
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(usage)
}

/// Files to write once every result is known, so a failed run leaves
/// nothing behind.
#[derive(Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn matrix(&mut self, path: PathBuf, m: &DMatrix<f64>) -> CliResult<()> {
        let mut buf = Vec::new();
        io::write_hsm(&mut buf, m).map_err(crate::runtime)?;
        self.files.push((path, buf));
        Ok(())
    }

    pub fn text(&mut self, path: PathBuf, text: String) {
        self.files.push((path, text.into_bytes()));
    }

    pub fn commit(self, dir: &Path) -> CliResult<()> {
        create_dir(dir)?;
        for (path, bytes) in self.files {
            std::fs::write(&path, bytes)
                .with_context(|| format!("cannot write {}", path.display()))
                .map_err(crate::runtime)?;
        }
        Ok(())
    }
}
