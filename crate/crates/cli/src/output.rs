//! CSV emission, written atomically through a sibling temp file.

use std::io::Write;
use std::path::Path;

use compound_forms::accomplex::ResidualRow;
use compound_forms::FlowRecord;
use serde::Serialize;

use crate::CliError;

#[derive(Serialize)]
struct FlowRow {
    step: usize,
    time: f64,
    energy: f64,
    grad_norm: f64,
    #[serde(rename = "P_residual_norm")]
    p_residual_norm: f64,
}

pub fn flow_csv(history: &[FlowRecord]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in history {
        w.serialize(FlowRow {
            step: r.step,
            time: r.time,
            energy: r.energy,
            grad_norm: r.grad_norm,
            p_residual_norm: r.p_residual,
        })
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn residual_csv(rows: &[ResidualRow]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Writes `bytes` to a temp file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |source| CliError::Io {
        path: path.to_owned(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}
