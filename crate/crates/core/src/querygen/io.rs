//! Line-delimited JSON dataset files, one description per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{QueryDescription, QueryError};

pub fn write_dataset<W: Write>(descriptions: &[QueryDescription], mut w: W) -> Result<(), QueryError> {
    for d in descriptions {
        let line = serde_json::to_string(d).map_err(|e| QueryError::Format {
            line: d.id,
            msg: e.to_string(),
        })?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<Vec<QueryDescription>, QueryError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: QueryDescription = serde_json::from_str(&line).map_err(|e| QueryError::Format {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if let Some(h) = d.hints.iter().find(|h| h.text != h.rerender()) {
            return Err(QueryError::Format {
                line: i + 1,
                msg: format!("hint text `{}` does not match its fields", h.text),
            });
        }
        out.push(d);
    }
    Ok(out)
}

pub fn save_dataset(descriptions: &[QueryDescription], path: &Path) -> Result<(), QueryError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(descriptions, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<QueryDescription>, QueryError> {
    read_dataset(File::open(path)?)
}
