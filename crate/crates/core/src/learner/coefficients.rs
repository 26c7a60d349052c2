use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::softmax;
use crate::stats::MergeMode;

/// Tolerance on per-layer coefficient sums.
pub const SUM_TOL: f64 = 1e-9;

/// Merging coefficients, stored `K x L` (`L = 1` for task-wise tables).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientTable {
    mode: MergeMode,
    values: Vec<Vec<f64>>,
}

impl CoefficientTable {
    /// Validates a table given explicitly: rectangular, entries in `[0, 1]`
    /// and every layer column summing to 1.
    pub fn new(mode: MergeMode, values: Vec<Vec<f64>>) -> Result<Self> {
        let table = Self { mode, values };
        table.check_shape()?;
        for l in 0..table.num_layers() {
            let col: Vec<f64> = table.values.iter().map(|row| row[l]).collect();
            if col.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::param(format!("layer {l} coefficients outside [0, 1]: {col:?}")));
            }
            let sum: f64 = col.iter().sum();
            if (sum - 1.0).abs() > SUM_TOL {
                return Err(Error::param(format!("layer {l} coefficients sum to {sum}")));
            }
        }
        Ok(table)
    }

    pub fn task_wise(values: Vec<f64>) -> Result<Self> {
        Self::new(MergeMode::TaskWise, values.into_iter().map(|v| vec![v]).collect())
    }

    /// `1/K` everywhere.
    pub fn uniform(mode: MergeMode, num_tasks: usize, num_layers: usize) -> Self {
        let l = match mode {
            MergeMode::TaskWise => 1,
            MergeMode::LayerWise => num_layers,
        };
        let v = 1.0 / num_tasks as f64;
        Self {
            mode,
            values: vec![vec![v; l]; num_tasks],
        }
    }

    fn check_shape(&self) -> Result<()> {
        let width = self.values.first().map(Vec::len).unwrap_or(0);
        if width == 0 || self.values.iter().any(|r| r.len() != width) {
            return Err(Error::shape("coefficient table must be rectangular and non-empty"));
        }
        if self.mode == MergeMode::TaskWise && width != 1 {
            return Err(Error::shape("task-wise table must have a single column"));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::param("non-finite coefficient"));
        }
        Ok(())
    }

    pub fn mode(&self) -> MergeMode {
        self.mode
    }

    pub fn num_tasks(&self) -> usize {
        self.values.len()
    }

    /// Columns stored (1 for task-wise).
    pub fn num_layers(&self) -> usize {
        self.values[0].len()
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Coefficient of task `k` at model layer `l`; task-wise tables ignore `l`.
    pub fn lambda(&self, k: usize, l: usize) -> f64 {
        match self.mode {
            MergeMode::TaskWise => self.values[k][0],
            MergeMode::LayerWise => self.values[k][l],
        }
    }

    /// Every entry in the open interval `(0, 1)` and every column summing to 1.
    pub fn satisfies_invariants(&self) -> bool {
        (0..self.num_layers()).all(|l| {
            let sum: f64 = self.values.iter().map(|r| r[l]).sum();
            (sum - 1.0).abs() <= SUM_TOL
        }) && self.values.iter().flatten().all(|&v| v > 0.0 && v < 1.0)
    }

    /// Writes `task,layer,lambda` rows with round-trip precision.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["task", "layer", "lambda"])
            .map_err(|e| csv_error(path, e))?;
        for (k, row) in self.values.iter().enumerate() {
            for (l, v) in row.iter().enumerate() {
                // `{:?}` prints the shortest representation that parses back exactly.
                w.write_record([k.to_string(), l.to_string(), format!("{v:?}")])
                    .map_err(|e| csv_error(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a table written by [`CoefficientTable::write_csv`]. Without a
    /// mode, a single layer column is read as task-wise.
    pub fn read_csv(path: &Path, mode: Option<MergeMode>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut entries = Vec::new();
        for rec in r.deserialize() {
            let (k, l, v): (usize, usize, f64) = rec.map_err(|e| csv_error(path, e))?;
            entries.push((k, l, v));
        }
        let k_max = entries
            .iter()
            .map(|e| e.0)
            .max()
            .ok_or_else(|| Error::param("empty coefficient CSV"))?;
        let l_max = entries.iter().map(|e| e.1).max().unwrap_or(0);
        let mut values = vec![vec![f64::NAN; l_max + 1]; k_max + 1];
        for (k, l, v) in entries {
            values[k][l] = v;
        }
        let mode = mode.unwrap_or(if l_max == 0 {
            MergeMode::TaskWise
        } else {
            MergeMode::LayerWise
        });
        Self::new(mode, values)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::param(format!("{}: {other:?}", path.display())),
    }
}

/// Softmax over the task axis, independently for each layer column.
pub fn normalize(raw_scores: &[Vec<f64>], mode: MergeMode) -> Result<CoefficientTable> {
    let width = raw_scores.first().map(Vec::len).unwrap_or(0);
    if width == 0 || raw_scores.iter().any(|r| r.len() != width) {
        return Err(Error::shape("raw score table must be rectangular and non-empty"));
    }
    if mode == MergeMode::TaskWise && width != 1 {
        return Err(Error::shape("task-wise scores must have a single column"));
    }
    let mut values = vec![vec![0.0; width]; raw_scores.len()];
    for l in 0..width {
        let col: Vec<f64> = raw_scores.iter().map(|r| r[l]).collect();
        for (k, p) in softmax(&col).into_iter().enumerate() {
            values[k][l] = p;
        }
    }
    let table = CoefficientTable { mode, values };
    table.check_shape()?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_scores_uniform() {
        let t = normalize(&vec![vec![0.7]; 4], MergeMode::TaskWise).unwrap();
        assert!(t.values().iter().all(|r| r[0] == 0.25));
    }

    #[test]
    fn ln_two_scores() {
        let t = normalize(&[vec![2f64.ln()], vec![0.0]], MergeMode::TaskWise).unwrap();
        assert!((t.lambda(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((t.lambda(1, 0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn per_layer_shift_invariance() {
        let raw = vec![vec![0.3, -1.0, 2.0], vec![1.1, 0.5, -0.2]];
        let shifted: Vec<Vec<f64>> = raw.iter().map(|r| vec![r[0] + 5.0, r[1], r[2] - 3.0]).collect();
        let a = normalize(&raw, MergeMode::LayerWise).unwrap();
        let b = normalize(&shifted, MergeMode::LayerWise).unwrap();
        for k in 0..2 {
            for l in 0..3 {
                assert!((a.lambda(k, l) - b.lambda(k, l)).abs() < 1e-15);
            }
        }
        assert!(a.satisfies_invariants());
    }

    #[test]
    fn explicit_table_validation() {
        assert!(CoefficientTable::task_wise(vec![0.5, 0.6]).is_err());
        assert!(CoefficientTable::task_wise(vec![1.5, -0.5]).is_err());
        assert!(CoefficientTable::task_wise(vec![1.0, 0.0]).is_ok());
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let t = normalize(
            &[vec![0.1, 0.7], vec![-0.3, 0.2], vec![0.05, 1e-3]],
            MergeMode::LayerWise,
        )
        .unwrap();
        t.write_csv(&p).unwrap();
        assert_eq!(CoefficientTable::read_csv(&p, None).unwrap(), t);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("task,layer,lambda\n"));
    }
}
