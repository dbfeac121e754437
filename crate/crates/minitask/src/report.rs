//! Run artifacts: JSONL metric streams and CSV dumps. Writers are
//! byte-deterministic for a given input, so fixed-seed runs can be compared
//! by file hash.

use crate::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

/// Streaming JSONL sink, one serialized record per line.
pub struct JsonlWriter {
    file: BufWriter<std::fs::File>,
    path: PathBuf,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<JsonlWriter> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(JsonlWriter {
            file: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn push<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Contract(format!("unserializable record: {e}")))?;
        self.file
            .write_all(line.as_bytes())
            .and_then(|()| self.file.write_all(b"\n"))
            .map_err(|e| Error::io(self.path.display().to_string(), e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.file
            .flush()
            .map_err(|e| Error::io(self.path.display().to_string(), e))
    }
}

/// Writes all records in one call; identical bytes to streaming them.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = JsonlWriter::create(path)?;
    for r in records {
        w.push(r)?;
    }
    w.finish()
}

/// Reads a JSONL file back, naming the 1-based line of any malformed record.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Data {
            row: i + 1,
            msg: format!("bad record: {e}"),
        })?);
    }
    Ok(out)
}

/// Human-readable config snapshot (pretty JSON with a trailing newline).
pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Contract(format!("unserializable config: {e}")))?;
    std::fs::write(path, body + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

/// One full-width embedding row in a JSONL dump, the interchange format
/// between a training run and the 2-D projection step.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct EmbeddingRecord {
    pub source: String,
    pub label: String,
    pub values: Vec<f64>,
}

/// One 2-D point of an embedding scatter, tagged with where it came from
/// ("real", "generated", a task name) and its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPoint {
    pub source: String,
    pub label: String,
    pub x: f64,
    pub y: f64,
}

fn csv_field(s: &str) -> Result<&str> {
    if s.contains([',', '"', '\n', '\r']) {
        return Err(Error::Contract(format!(
            "csv field {s:?} needs quoting, which this writer does not do"
        )));
    }
    Ok(s)
}

/// `source,label,x,y` rows for plotting tools.
pub fn write_embedding_csv(path: &Path, points: &[EmbeddingPoint]) -> Result<()> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut file = BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    writeln!(file, "source,label,x,y").map_err(io_err)?;
    for p in points {
        writeln!(
            file,
            "{},{},{},{}",
            csv_field(&p.source)?,
            csv_field(&p.label)?,
            p.x,
            p.y
        )
        .map_err(io_err)?;
    }
    file.flush().map_err(io_err)
}

/// Lower-triangular p-value matrix as CSV: row and column headers are the
/// masking fractions, cells above the diagonal stay empty.
pub fn write_p_matrix_csv(path: &Path, lambdas: &[f64], matrix: &[Vec<f64>]) -> Result<()> {
    if matrix.len() != lambdas.len() {
        return Err(Error::Contract(format!(
            "{} matrix rows for {} fractions",
            matrix.len(),
            lambdas.len()
        )));
    }
    for (r, row) in matrix.iter().enumerate() {
        if row.len() != r + 1 {
            return Err(Error::Contract(format!(
                "matrix row {r} has {} entries; a lower triangle needs {}",
                row.len(),
                r + 1
            )));
        }
    }
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut file = BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    write!(file, "lambda").map_err(io_err)?;
    for l in lambdas {
        write!(file, ",{l}").map_err(io_err)?;
    }
    writeln!(file).map_err(io_err)?;
    for (r, row) in matrix.iter().enumerate() {
        write!(file, "{}", lambdas[r]).map_err(io_err)?;
        for p in row {
            write!(file, ",{p}").map_err(io_err)?;
        }
        for _ in row.len()..lambdas.len() {
            write!(file, ",").map_err(io_err)?;
        }
        writeln!(file).map_err(io_err)?;
    }
    file.flush().map_err(io_err)
}
