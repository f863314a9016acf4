use anyhow::anyhow;
use plmm::io::{export_map, matrix_to_stack, variability_energy};

use crate::fsutil::{create_dir, layout, load_matrix, sibling_spec, spec_usize};
use crate::{runtime, usage, CliResult, MapKind, MapsArgs};

pub fn run(args: &MapsArgs) -> CliResult<()> {
    let data = load_matrix(&args.input)?;
    let spec = sibling_spec(&args.input)?;
    let n = data.ncols();
    let (width, height) = layout(args.width, args.height, spec.as_ref(), n)?;
    let maps: Vec<Vec<f64>> = match args.kind {
        MapKind::Abundance => data.row_iter().map(|r| r.iter().copied().collect()).collect(),
        MapKind::Variability => {
            let k = match args.endmembers {
                Some(k) => k,
                None => spec_usize(spec.as_ref(), "endmembers")?
                    .ok_or_else(|| usage(anyhow!("--endmembers is required for variability maps")))?,
            };
            if k == 0 || data.nrows() % k != 0 {
                return Err(usage(anyhow!("{} rows cannot hold {k} endmembers", data.nrows())));
            }
            let dm = matrix_to_stack(&data, data.nrows() / k, k).map_err(usage)?;
            (0..k).map(|e| variability_energy(&dm, e)).collect()
        }
    };
    let prefix = args.prefix.clone().unwrap_or_else(|| {
        match args.kind {
            MapKind::Abundance => "abundance",
            MapKind::Variability => "variability",
        }
        .to_string()
    });
    create_dir(&args.out_dir)?;
    for (e, values) in maps.iter().enumerate() {
        export_map(&args.out_dir, &format!("{prefix}_{}", e + 1), width, height, values).map_err(runtime)?;
    }
    Ok(())
}
