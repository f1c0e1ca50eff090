//! CKA matrices and their CSV / PGM forms.
//!
//! CSV layout:
//!
//! ```text
//! # epoch_tag=20
//! label,block0,block1,pooled
//! client0,0.93,0.88,UNDEFINED
//! ```
//!
//! Values are written in shortest round-trip form, so reloading is exact.
//! The PGM is binary (`P5`), one `cell × cell` square per entry, gray level
//! `round(clamp(v, 0, 1) · 255)`; undefined cells are black.

use std::path::Path;

use super::hsic::CkaScore;
use crate::error::{Error, Result};
use crate::params::write_atomic;

const UNDEFINED: &str = "UNDEFINED";

#[derive(Debug, Clone, PartialEq)]
pub struct CkaMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// Row-major raw scores, not clamped.
    pub values: Vec<CkaScore>,
    pub epoch_tag: usize,
}

impl CkaMatrix {
    pub fn new(rows: Vec<String>, cols: Vec<String>, values: Vec<CkaScore>, epoch_tag: usize) -> Self {
        assert_eq!(values.len(), rows.len() * cols.len(), "CKA matrix size");
        Self {
            rows,
            cols,
            values,
            epoch_tag,
        }
    }

    pub fn with_labels(mut self, rows: Vec<String>, cols: Vec<String>) -> Self {
        assert_eq!((rows.len(), cols.len()), (self.rows.len(), self.cols.len()));
        self.rows = rows;
        self.cols = cols;
        self
    }

    pub fn with_epoch_tag(mut self, tag: usize) -> Self {
        self.epoch_tag = tag;
        self
    }

    pub fn get(&self, i: usize, j: usize) -> CkaScore {
        self.values[i * self.cols.len() + j]
    }

    pub fn value(&self, i: usize, j: usize) -> Option<f64> {
        self.get(i, j).value()
    }

    /// Mean over defined entries.
    pub fn mean(&self) -> Option<f64> {
        let v: Vec<f64> = self.values.iter().filter_map(|s| s.value()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# epoch_tag={}\nlabel", self.epoch_tag);
        for c in &self.cols {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            s.push_str(r);
            for j in 0..self.cols.len() {
                s.push(',');
                match self.get(i, j) {
                    CkaScore::Value(v) => s.push_str(&v.to_string()),
                    CkaScore::Undefined => s.push_str(UNDEFINED),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("CKA CSV: {m}"));
        let mut lines = text.lines();
        let tag_line = lines.next().ok_or_else(|| bad("empty".into()))?;
        let epoch_tag = tag_line
            .strip_prefix("# epoch_tag=")
            .and_then(|t| t.trim().parse().ok())
            .ok_or_else(|| bad(format!("bad tag line `{tag_line}`")))?;
        let header = lines.next().ok_or_else(|| bad("missing header".into()))?;
        let mut head = header.split(',');
        if head.next() != Some("label") {
            return Err(bad("header must start with `label`".into()));
        }
        let cols: Vec<String> = head.map(str::to_string).collect();
        let mut rows = Vec::new();
        let mut values = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut f = line.split(',');
            rows.push(f.next().unwrap_or_default().to_string());
            let cells: Vec<&str> = f.collect();
            if cells.len() != cols.len() {
                return Err(bad(format!("row {n} has {} cells, expected {}", cells.len(), cols.len())));
            }
            for c in cells {
                values.push(if c == UNDEFINED {
                    CkaScore::Undefined
                } else {
                    CkaScore::Value(c.parse().map_err(|_| bad(format!("bad value `{c}`")))?)
                });
            }
        }
        Ok(Self::new(rows, cols, values, epoch_tag))
    }

    pub fn to_pgm(&self, cell: usize) -> Vec<u8> {
        let cell = cell.max(1);
        let (w, h) = (self.cols.len() * cell, self.rows.len() * cell);
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        for i in 0..self.rows.len() {
            let line: Vec<u8> = (0..self.cols.len())
                .flat_map(|j| {
                    let g = match self.get(i, j) {
                        CkaScore::Value(v) if v.is_finite() => (v.clamp(0.0, 1.0) * 255.0).round() as u8,
                        _ => 0,
                    };
                    std::iter::repeat_n(g, cell)
                })
                .collect();
            for _ in 0..cell {
                out.extend_from_slice(&line);
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    pub fn write_pgm(&self, path: &Path, cell: usize) -> Result<()> {
        write_atomic(path, &self.to_pgm(cell))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CkaMatrix {
        CkaMatrix::new(
            vec!["client0".into(), "client1".into()],
            vec!["block0".into(), "pooled".into()],
            vec![
                CkaScore::Value(0.1 + 0.2),
                CkaScore::Value(1.0000001),
                CkaScore::Undefined,
                CkaScore::Value(-3e-7),
            ],
            40,
        )
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = sample();
        let back = CkaMatrix::from_csv(&m.to_csv()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_pgm(3), m.to_pgm(3));
    }

    #[test]
    fn pgm_layout() {
        let p = sample().to_pgm(2);
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&p[..header.len()], header);
        let px = &p[header.len()..];
        assert_eq!(px.len(), 16);
        assert_eq!(px[0], 77); // 0.3 * 255 = 76.5
        assert_eq!(px[2], 255);
        assert_eq!(px[8], 0);
        assert_eq!(px[10], 0);
    }

    #[test]
    fn malformed_csv() {
        assert!(CkaMatrix::from_csv("label,a\nx,1\n").is_err());
        assert!(CkaMatrix::from_csv("# epoch_tag=1\nlabel,a\nx,1,2\n").is_err());
        assert!(CkaMatrix::from_csv("# epoch_tag=1\nlabel,a\nx,abc\n").is_err());
    }
}
