//! Versioned CSV output. One writer owns each file; rows arrive tagged with
//! their cell index and are written in index order, so the bytes do not
//! depend on how many workers produced them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

pub const SCHEMA_LINE: &str = "# schema=v1";

pub const THEORY_COLUMNS: &[&str] = &[
    "mdp_seed",
    "S",
    "A",
    "T",
    "N",
    "delta",
    "var_total",
    "var_marg",
    "var_poldep",
    "delta_N",
    "delta_T",
    "thm_lhs",
    "thm_rhs",
    "ma_preferred",
    "verdict_matches",
];
pub const FIG1_COLUMNS: &[&str] = &["batch", "N", "seed", "steps_to_solve", "mean_update_gain"];
pub const CURVES_COLUMNS: &[&str] = &["variant", "seed", "step", "eval_return"];
pub const BIAS_VARIANCE_COLUMNS: &[&str] =
    &["checkpoint", "method", "rel_bias", "rel_var", "mean_grad_norm", "excluded_params"];
pub const RUN_RECORD_COLUMNS: &[&str] =
    &["config_hash", "artifact_version", "kind", "cell", "seed", "outcome", "rows", "started_unix_ms", "wall_ms"];

pub struct CsvSink<W: Write> {
    out: W,
    width: usize,
    next: usize,
    pending: BTreeMap<usize, String>,
    rows_written: usize,
}

impl CsvSink<File> {
    pub fn create(path: &Path, columns: &[&str]) -> io::Result<Self> {
        CsvSink::new(File::create(path)?, columns)
    }
}

impl<W: Write> CsvSink<W> {
    pub fn new(mut out: W, columns: &[&str]) -> io::Result<Self> {
        writeln!(out, "{SCHEMA_LINE}")?;
        writeln!(out, "{}", columns.join(","))?;
        out.flush()?;
        Ok(CsvSink { out, width: columns.len(), next: 0, pending: BTreeMap::new(), rows_written: 0 })
    }

    /// Queue the rows of cell `index`; everything now contiguous with what
    /// was already written goes out, each cell in a single write.
    pub fn submit(&mut self, index: usize, rows: Vec<Vec<String>>) -> io::Result<()> {
        for r in &rows {
            if r.len() != self.width {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidInput,
                    format!("row has {} fields, schema has {}", r.len(), self.width),
                ));
            }
        }
        let mut chunk = String::new();
        for r in rows {
            chunk.push_str(&r.join(","));
            chunk.push('\n');
        }
        self.pending.insert(index, chunk);
        while let Some(chunk) = self.pending.remove(&self.next) {
            self.rows_written += chunk.matches('\n').count();
            self.out.write_all(chunk.as_bytes())?;
            self.out.flush()?;
            self.next += 1;
        }
        Ok(())
    }

    /// Cells still waiting on an earlier index.
    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn rows_written(&self) -> usize {
        self.rows_written
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Shortest decimal that reads back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:?}")
    }
}
