use serde::{Deserialize, Serialize};

use super::{CellCategory, CellGenotype, Genotype};
use crate::error::{Error, Result};

const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Cells {
    s_nc: CellGenotype,
    s_rc: CellGenotype,
    t_nc: CellGenotype,
    t_rc: CellGenotype,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenotypeFile {
    version: u32,
    cells: Cells,
}

pub fn genotype_to_json(g: &Genotype) -> String {
    let file = GenotypeFile {
        version: VERSION,
        cells: Cells {
            s_nc: g.cell(CellCategory::SpatialNormal).clone(),
            s_rc: g.cell(CellCategory::SpatialReduction).clone(),
            t_nc: g.cell(CellCategory::TemporalNormal).clone(),
            t_rc: g.cell(CellCategory::TemporalReduction).clone(),
        },
    };
    serde_json::to_string_pretty(&file).expect("genotype serialises")
}

/// Parses a version-1 genotype file. Errors carry the line and column.
pub fn genotype_from_json(text: &str) -> Result<Genotype> {
    let file: GenotypeFile = serde_json::from_str(text).map_err(|e| {
        Error::parse(format!("genotype line {} column {}", e.line(), e.column()), e.to_string())
    })?;
    if file.version != VERSION {
        return Err(Error::parse(
            "genotype field version",
            format!("unsupported version {}", file.version),
        ));
    }
    let c = file.cells;
    Ok(Genotype::new([c.s_nc, c.s_rc, c.t_nc, c.t_rc]))
}
