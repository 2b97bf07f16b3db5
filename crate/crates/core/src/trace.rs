//! Per-step attention mass traces and their text/image renderings.

use std::io::Write;

use crate::error::{Error, Result};

/// Attention mass assigned to each source at one decoder step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// Token predicted (or emitted) at this step.
    pub token: usize,
    /// One entry per encoder, plus a trailing sentinel entry when the model
    /// has one. Entries sum to 1.
    pub masses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub encoders: usize,
    pub has_sentinel: bool,
    pub rows: Vec<TraceRow>,
}

impl AttentionTrace {
    pub fn sentinel_mass(&self, row: usize) -> Option<f64> {
        if self.has_sentinel {
            self.rows[row].masses.last().copied()
        } else {
            None
        }
    }

    /// Column labels: `src0..srcN-1` and optionally `sentinel`.
    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = (0..self.encoders).map(|k| format!("src{k}")).collect();
        if self.has_sentinel {
            cols.push("sentinel".into());
        }
        cols
    }

    /// Tab-separated table with a header, one row per step.
    pub fn write_tsv<W: Write>(&self, mut out: W, token_name: impl Fn(usize) -> String) -> Result<()> {
        writeln!(out, "step\ttoken\t{}", self.columns().join("\t"))?;
        for (i, row) in self.rows.iter().enumerate() {
            let masses: Vec<String> = row.masses.iter().map(|m| format!("{m:.6}")).collect();
            writeln!(out, "{i}\t{}\t{}", token_name(row.token), masses.join("\t"))?;
        }
        Ok(())
    }

    /// Binary greyscale PGM (`P5`) heat map: one column per step, one row
    /// per source (sentinel last), each cell `cell`×`cell` pixels. Black is
    /// zero mass, white is full mass.
    pub fn write_pgm<W: Write>(&self, mut out: W, cell: usize) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Empty("attention trace"));
        }
        let cell = cell.max(1);
        let sources = self.rows[0].masses.len();
        let (width, height) = (self.rows.len() * cell, sources * cell);
        write!(out, "P5\n{width} {height}\n255\n")?;
        let mut line = Vec::with_capacity(width);
        for src in 0..sources {
            line.clear();
            for row in &self.rows {
                let level = (row.masses[src].clamp(0.0, 1.0) * 255.0).round() as u8;
                line.extend(std::iter::repeat_n(level, cell));
            }
            for _ in 0..cell {
                out.write_all(&line)?;
            }
        }
        Ok(())
    }
}
