use std::fmt::Write as _;

use anyhow::anyhow;
use plmm::io::stack_to_matrix;
use plmm::synthgen::{gaussian_bump_endmembers, split_cvar};
use plmm::{generate, SyntheticSpec};

use crate::fsutil::{load_matrix, Outputs, SPEC_FILE};
use crate::{runtime, usage, CliResult, SynthArgs};

const DEFAULT_BANDS: usize = 413;
const DEFAULT_ENDMEMBERS: usize = 3;

pub fn run(args: &SynthArgs) -> CliResult<()> {
    let reference = match &args.reference {
        Some(path) => {
            let m = load_matrix(path)?;
            for (flag, given, actual) in [("bands", args.bands, m.nrows()), ("endmembers", args.endmembers, m.ncols())] {
                if given.is_some_and(|g| g != actual) {
                    return Err(usage(anyhow!("--{flag} conflicts with the reference file ({actual})")));
                }
            }
            m
        }
        None => gaussian_bump_endmembers(
            args.bands.unwrap_or(DEFAULT_BANDS),
            args.endmembers.unwrap_or(DEFAULT_ENDMEMBERS),
            args.seed,
        ),
    };
    let (bands, endmembers) = reference.shape();
    let mut spec = SyntheticSpec::new(args.width, args.height, reference);
    spec.cvar_map = split_cvar(args.width, args.height, args.cvar_top, args.cvar_bottom);
    spec.snr_db = args.snr_db;
    spec.pure_pixels = args.pure_pixels;
    spec.seed = args.seed;
    let gt = generate(&spec).map_err(usage)?;

    let dir = &args.out_dir;
    let mut out = Outputs::default();
    out.matrix(dir.join("Y.hsm"), gt.y.data())?;
    out.matrix(dir.join("M_true.hsm"), &gt.truth.m)?;
    out.matrix(dir.join("A_true.hsm"), &gt.truth.a)?;
    out.matrix(
        dir.join("dM_true.hsm"),
        &stack_to_matrix(&gt.truth.dm, bands, endmembers).map_err(runtime)?,
    )?;
    let mut cfg = String::new();
    let source = match &args.reference {
        Some(p) => p.display().to_string(),
        None => "gaussian-bumps".to_string(),
    };
    let entries = [
        ("width", args.width.to_string()),
        ("height", args.height.to_string()),
        ("bands", bands.to_string()),
        ("endmembers", endmembers.to_string()),
        ("snr_db", args.snr_db.to_string()),
        ("cvar_top", args.cvar_top.to_string()),
        ("cvar_bottom", args.cvar_bottom.to_string()),
        ("pure_pixels", args.pure_pixels.to_string()),
        ("seed", args.seed.to_string()),
        ("noise_sigma", gt.noise_sigma.to_string()),
        ("reference", source),
    ];
    for (k, v) in entries {
        let _ = writeln!(cfg, "{k}={v}");
    }
    out.text(dir.join(SPEC_FILE), cfg);
    out.commit(dir)
}
