//! Piecewise-linear lookup tables and the plain-text tabular file format.
//!
//! Text tables are whitespace- or comma-separated numeric columns. Blank lines
//! and anything after a `#` are ignored.

use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("table needs at least one row")]
    Empty,
    #[error("table abscissae must be strictly increasing (row {0})")]
    NotIncreasing(usize),
    #[error("non-finite value in table (row {0})")]
    NonFinite(usize),
    #[error("line {line}: expected {expected} columns, found {found}")]
    ColumnCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: cannot parse {text:?} as a number")]
    Parse { line: usize, text: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Piecewise-linear function of one variable, held constant beyond its end knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct Table1D {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl Table1D {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, TableError> {
        if points.is_empty() {
            return Err(TableError::Empty);
        }
        for (i, (x, y)) in points.iter().enumerate() {
            if !x.is_finite() || !y.is_finite() {
                return Err(TableError::NonFinite(i));
            }
            if i > 0 && *x <= points[i - 1].0 {
                return Err(TableError::NotIncreasing(i));
            }
        }
        let (xs, ys) = points.into_iter().unzip();
        Ok(Self { xs, ys })
    }

    pub fn constant(y: f64) -> Self {
        Self {
            xs: vec![0.0],
            ys: vec![y],
        }
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.xs.iter().copied().zip(self.ys.iter().copied())
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    /// Index `i` of the cell `[xs[i], xs[i+1]]` containing `x`, or `None` when
    /// `x` lies outside the knot span (or the table has a single knot).
    fn cell(&self, x: f64) -> Option<usize> {
        let n = self.xs.len();
        if n < 2 || x <= self.xs[0] || x >= self.xs[n - 1] {
            return None;
        }
        let i = self.xs.partition_point(|&k| k <= x);
        Some(i - 1)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.eval_with_slope(x).0
    }

    /// Value and slope at `x`. The slope is zero in the flat extrapolation
    /// regions and is the right-hand slope exactly at an interior knot.
    pub fn eval_with_slope(&self, x: f64) -> (f64, f64) {
        let n = self.xs.len();
        match self.cell(x) {
            Some(i) => {
                let (x0, x1) = (self.xs[i], self.xs[i + 1]);
                let (y0, y1) = (self.ys[i], self.ys[i + 1]);
                let slope = (y1 - y0) / (x1 - x0);
                (y0 + slope * (x - x0), slope)
            }
            None if x <= self.xs[0] => (self.ys[0], 0.0),
            None => (self.ys[n - 1], 0.0),
        }
    }

    pub fn min_value(&self) -> f64 {
        self.ys.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.ys.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl TryFrom<Vec<(f64, f64)>> for Table1D {
    type Error = TableError;

    fn try_from(points: Vec<(f64, f64)>) -> Result<Self, Self::Error> {
        Self::new(points)
    }
}

impl From<Table1D> for Vec<(f64, f64)> {
    fn from(t: Table1D) -> Self {
        t.xs.into_iter().zip(t.ys).collect()
    }
}

/// Reads numeric rows with exactly `columns` entries each.
pub fn read_rows<R: BufRead>(reader: R, columns: usize) -> Result<Vec<Vec<f64>>, TableError> {
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        if fields.len() != columns {
            return Err(TableError::ColumnCount {
                line: idx + 1,
                expected: columns,
                found: fields.len(),
            });
        }
        let row = fields
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| TableError::Parse {
                    line: idx + 1,
                    text: f.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(TableError::Empty);
    }
    Ok(rows)
}

/// Reads a two-column table file into a [`Table1D`].
pub fn read_table1d<R: BufRead>(reader: R) -> Result<Table1D, TableError> {
    let rows = read_rows(reader, 2)?;
    Table1D::new(rows.into_iter().map(|r| (r[0], r[1])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_and_clamps() {
        let t = Table1D::new(vec![(0.0, 1.0), (2.0, 3.0), (4.0, 3.0)]).unwrap();
        assert_eq!(t.eval(-1.0), 1.0);
        assert_eq!(t.eval(1.0), 2.0);
        assert_eq!(t.eval(2.0), 3.0);
        assert_eq!(t.eval(9.0), 3.0);
        assert_eq!(t.eval_with_slope(0.5).1, 1.0);
        assert_eq!(t.eval_with_slope(3.0).1, 0.0);
    }

    #[test]
    fn rejects_unsorted() {
        assert!(matches!(
            Table1D::new(vec![(0.0, 1.0), (0.0, 2.0)]),
            Err(TableError::NotIncreasing(1))
        ));
    }

    #[test]
    fn reads_commented_rows() {
        let text = "# header\n0, 1.0\n\n  10 2.5 # trailing\n";
        let t = read_table1d(text.as_bytes()).unwrap();
        assert_eq!(t.eval(5.0), 1.75);
        let err = read_rows("1 2 3\n".as_bytes(), 2).unwrap_err();
        assert!(matches!(err, TableError::ColumnCount { found: 3, .. }));
    }
}
