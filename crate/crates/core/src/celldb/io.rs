use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CellDatabase, CellError};

pub const CELLS_FORMAT: &str = "textloc-cells";
pub const CELLS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellsFile {
    format: String,
    version: u32,
    database: CellDatabase,
}

pub fn write_database<W: Write>(db: &CellDatabase, w: W) -> Result<(), CellError> {
    #[derive(Serialize)]
    struct Out<'a> {
        format: &'a str,
        version: u32,
        database: &'a CellDatabase,
    }
    serde_json::to_writer(
        w,
        &Out {
            format: CELLS_FORMAT,
            version: CELLS_VERSION,
            database: db,
        },
    )
    .map_err(|e| CellError::Format(e.to_string()))
}

pub fn read_database<R: Read>(r: R) -> Result<CellDatabase, CellError> {
    let f: CellsFile = serde_json::from_reader(r).map_err(|e| CellError::Format(e.to_string()))?;
    if f.format != CELLS_FORMAT || f.version != CELLS_VERSION {
        return Err(CellError::Format(format!(
            "expected {CELLS_FORMAT} version {CELLS_VERSION}, found {} version {}",
            f.format, f.version
        )));
    }
    let db = f.database;
    let n = db.config.num_padded;
    if db.grid.len() != db.anchor_count()
        || db.cells.iter().enumerate().any(|(i, c)| c.id != i || c.instances.len() != n || c.num_real > n)
    {
        return Err(CellError::Format("inconsistent cell records".into()));
    }
    Ok(db)
}

pub fn save_database(db: &CellDatabase, path: &Path) -> Result<(), CellError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_database(db, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_database(path: &Path) -> Result<CellDatabase, CellError> {
    read_database(BufReader::new(File::open(path)?))
}
