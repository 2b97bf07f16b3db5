//! Line-oriented dataset files.
//!
//! The first line is a header object
//! `{"format":"multiattn-dataset","version":1,"task":"<name>"}`; every
//! following line is one [`ParallelExample`] as a JSON object:
//!
//! ```text
//! {"sources":[{"tokens":["w1","<mask>"]},{"grid":[[0.1,0.2],[0.3,0.4]]}],
//!  "target":["w1","w7"],"annotation":[0,1]}
//! ```
//!
//! `annotation` is optional and gives, per target position, the index of the
//! source that position depends on.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "multiattn-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Tokens(Vec<String>),
    /// Rows of a feature grid, one row per cell.
    Grid(Vec<Vec<f64>>),
}

impl Source {
    pub fn len(&self) -> usize {
        match self {
            Source::Tokens(t) => t.len(),
            Source::Grid(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelExample {
    pub sources: Vec<Source>,
    pub target: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<Vec<usize>>,
}

impl ParallelExample {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Dataset("example has no sources".into()));
        }
        if self.target.is_empty() {
            return Err(Error::Dataset("example has an empty target".into()));
        }
        for (k, s) in self.sources.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Dataset(format!("source {k} is empty")));
            }
            if let Source::Grid(rows) = s {
                let d = rows[0].len();
                if d == 0 || rows.iter().any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
                    return Err(Error::Dataset(format!("source {k} grid is ragged or non-finite")));
                }
            }
        }
        if let Some(ann) = &self.annotation {
            if ann.len() != self.target.len() || ann.iter().any(|&k| k >= self.sources.len()) {
                return Err(Error::Dataset("annotation does not match target and sources".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    task: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: String,
    pub examples: Vec<ParallelExample>,
}

pub fn write_dataset(path: &Path, task: &str, examples: &[ParallelExample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        task: task.into(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or_else(|| Error::Dataset("empty file".into()))??;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Dataset(format!("bad header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(Error::Dataset(format!("unknown format {:?}", header.format)));
    }
    if header.version != DATASET_VERSION {
        return Err(Error::Dataset(format!("unsupported version {}", header.version)));
    }
    let mut examples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: ParallelExample =
            serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("line {}: {e}", i + 2)))?;
        ex.validate().map_err(|e| Error::Dataset(format!("line {}: {e}", i + 2)))?;
        examples.push(ex);
    }
    Ok(Dataset {
        task: header.task,
        examples,
    })
}
