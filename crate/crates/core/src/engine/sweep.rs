//! Parallel 2-D parameter sweep with a crash-safe journal.
//!
//! Every finished cell is appended to the journal as one JSON line and
//! flushed; a resumed sweep reloads the journal and only computes the missing
//! cells. Cell tasks must be pure functions of `(index, x, y)` so that the
//! result does not depend on worker count or completion order.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub values: Vec<f64>,
}

impl Axis {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self { name: name.into(), values }
    }

    /// `n` evenly spaced values from `lo` to `hi` inclusive.
    pub fn linspace(name: impl Into<String>, lo: f64, hi: f64, n: usize) -> Self {
        let values = match n {
            0 => vec![],
            1 => vec![lo],
            _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
        };
        Self::new(name, values)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x: Axis,
    pub y: Axis,
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.x.values.len() * self.y.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cell `k` sits at `(k % nx, k / nx)`.
    pub fn cell(&self, k: usize) -> (usize, usize, f64, f64) {
        let nx = self.x.values.len();
        let (ix, iy) = (k % nx, k / nx);
        (ix, iy, self.x.values[ix], self.y.values[iy])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
    Marginal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub index: usize,
    pub ix: usize,
    pub iy: usize,
    pub x: f64,
    pub y: f64,
    pub status: CellStatus,
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// What a cell task reports on success.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CellOutput {
    pub status: Option<CellStatus>,
    pub label: String,
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanGrid {
    pub axes: GridSpec,
    pub cells: Vec<CellRecord>,
}

impl ScanGrid {
    pub fn get(&self, ix: usize, iy: usize) -> &CellRecord {
        &self.cells[ix + self.axes.x.values.len() * iy]
    }

    /// Serialised payload used for determinism comparisons and persistence.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json_atomic(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }
}

#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    /// Worker threads; `0` uses the rayon default.
    pub workers: usize,
    pub journal: Option<PathBuf>,
    /// Reuse cells already present in the journal.
    pub resume: bool,
}

/// Parse a journal file. A truncated final line (crash mid-write) is
/// ignored; any other malformed line is an error.
pub fn read_journal<R: BufRead>(reader: R) -> Result<Vec<CellRecord>> {
    let mut lines: Vec<String> = Vec::new();
    for line in reader.lines() {
        lines.push(line?);
    }
    let mut out = Vec::with_capacity(lines.len());
    let last = lines.len().saturating_sub(1);
    for (k, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CellRecord>(line) {
            Ok(rec) => out.push(rec),
            Err(_) if k == last => break,
            Err(e) => return Err(Error::Journal(format!("line {}: {e}", k + 1))),
        }
    }
    Ok(out)
}

fn load_completed(path: &Path, grid: &GridSpec) -> Result<BTreeMap<usize, CellRecord>> {
    let mut done = BTreeMap::new();
    if !path.exists() {
        return Ok(done);
    }
    for rec in read_journal(BufReader::new(File::open(path)?))? {
        if rec.index >= grid.len() {
            return Err(Error::Journal(format!("cell {} outside a grid of {}", rec.index, grid.len())));
        }
        let (ix, iy, x, y) = grid.cell(rec.index);
        if rec.ix != ix || rec.iy != iy || rec.x.to_bits() != x.to_bits() || rec.y.to_bits() != y.to_bits() {
            return Err(Error::Journal(format!("cell {} does not match the current grid", rec.index)));
        }
        done.insert(rec.index, rec);
    }
    Ok(done)
}

/// Evaluate `task` on every grid cell.
pub fn sweep<F>(grid: &GridSpec, opts: &SweepOptions, task: F) -> Result<ScanGrid>
where
    F: Fn(usize, f64, f64) -> Result<CellOutput> + Sync,
{
    let done = match (&opts.journal, opts.resume) {
        (Some(p), true) => load_completed(p, grid)?,
        _ => BTreeMap::new(),
    };
    let journal = match &opts.journal {
        Some(p) => {
            let mut o = OpenOptions::new();
            o.create(true);
            if opts.resume {
                o.append(true);
            } else {
                o.write(true).truncate(true);
            }
            Some(Mutex::new(o.open(p)?))
        }
        None => None,
    };

    let run_cell = |k: usize| -> Result<CellRecord> {
        if let Some(rec) = done.get(&k) {
            return Ok(rec.clone());
        }
        let (ix, iy, x, y) = grid.cell(k);
        let outcome = catch_unwind(AssertUnwindSafe(|| task(k, x, y)));
        let rec = match outcome {
            Ok(Ok(out)) => CellRecord {
                index: k,
                ix,
                iy,
                x,
                y,
                status: out.status.unwrap_or(CellStatus::Ok),
                label: out.label,
                values: out.values,
                error: None,
            },
            Ok(Err(e)) => failed(k, ix, iy, x, y, e.to_string()),
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                failed(k, ix, iy, x, y, format!("panic: {msg}"))
            }
        };
        if let Some(j) = &journal {
            let line = serde_json::to_string(&rec)?;
            let mut f = j.lock().unwrap_or_else(|p| p.into_inner());
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        Ok(rec)
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let cells: Result<Vec<CellRecord>> = pool.install(|| (0..grid.len()).into_par_iter().map(run_cell).collect());
    Ok(ScanGrid { axes: grid.clone(), cells: cells? })
}

fn failed(index: usize, ix: usize, iy: usize, x: f64, y: f64, msg: String) -> CellRecord {
    CellRecord {
        index,
        ix,
        iy,
        x,
        y,
        status: CellStatus::Failed,
        label: "failed".into(),
        values: BTreeMap::new(),
        error: Some(msg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec { x: Axis::linspace("delta", -1.0, 1.0, 5), y: Axis::linspace("omega", 0.0, 2.0, 4) }
    }

    fn task(k: usize, x: f64, y: f64) -> Result<CellOutput> {
        if k == 7 {
            return Err(Error::InvalidParameter("deliberate".into()));
        }
        let mut values = BTreeMap::new();
        values.insert("f".into(), (x * 3.1).sin() * y.exp() + k as f64 * 1e-3);
        Ok(CellOutput { values, ..Default::default() })
    }

    #[test]
    fn failing_cell_is_isolated() {
        let g = sweep(&grid(), &SweepOptions { workers: 2, ..Default::default() }, task).unwrap();
        assert_eq!(g.cells.len(), 20);
        assert_eq!(g.cells[7].status, CellStatus::Failed);
        assert!(g.cells.iter().filter(|c| c.index != 7).all(|c| c.status == CellStatus::Ok));
    }

    #[test]
    fn panicking_cell_is_isolated() {
        let g = sweep(&grid(), &SweepOptions { workers: 1, ..Default::default() }, |k, x, y| {
            if k == 3 {
                panic!("boom");
            }
            task(k, x, y)
        })
        .unwrap();
        assert_eq!(g.cells[3].status, CellStatus::Failed);
        assert!(g.cells[3].error.as_deref().unwrap().contains("boom"));
    }

    #[test]
    fn truncated_journal_tail_is_ignored() {
        let text = "{\"index\":0,\"ix\":0,\"iy\":0,\"x\":1.0,\"y\":2.0,\"status\":\"ok\"}\n{\"index\":1,\"ix\":1";
        let recs = read_journal(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 1);
        let bad = "garbage\n{\"index\":0,\"ix\":0,\"iy\":0,\"x\":1.0,\"y\":2.0,\"status\":\"ok\"}\n";
        assert!(read_journal(bad.as_bytes()).is_err());
    }

    #[test]
    fn journal_values_round_trip_bitwise() {
        let mut values = BTreeMap::new();
        for (k, v) in [0.1 + 0.2, 1.0 / 3.0, 2.2250738585072014e-308, 6.02214076e23, -7.1e-17].into_iter().enumerate() {
            values.insert(format!("v{k}"), v);
        }
        let rec = CellRecord { index: 0, ix: 0, iy: 0, x: 0.1, y: 0.7, status: CellStatus::Ok, label: String::new(), values, error: None };
        let line = serde_json::to_string(&rec).unwrap();
        let back = &read_journal(line.as_bytes()).unwrap()[0];
        for (a, b) in rec.values.values().zip(back.values.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
