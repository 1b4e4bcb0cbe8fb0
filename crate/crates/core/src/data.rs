//! Design points, labeled/unlabeled samples and their CSV representation.
//!
//! Labeled files carry a header `x1,...,xd,y`; unlabeled files carry `x1,...,xd`.
//! Numbers are written with the shortest representation that parses back to the
//! same double.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point of the design space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DesignPoint(pub Vec<f64>);

impl DesignPoint {
    pub fn scalar(x: f64) -> Self {
        DesignPoint(vec![x])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn squared_distance(&self, other: &DesignPoint) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

impl From<f64> for DesignPoint {
    fn from(x: f64) -> Self {
        DesignPoint::scalar(x)
    }
}

/// Wraps a slice of scalars as one-dimensional design points.
pub fn scalar_points(xs: &[f64]) -> Vec<DesignPoint> {
    xs.iter().copied().map(DesignPoint::scalar).collect()
}

/// A training sample plus optional unlabeled test design points.
///
/// In simulations the test labels are kept in `hidden_y` so that test-set risks
/// can be evaluated; estimators never read them unless a bound is explicitly run
/// in simulation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train_x: Vec<DesignPoint>,
    pub train_y: Vec<f64>,
    pub test_x: Vec<DesignPoint>,
    pub hidden_y: Option<Vec<f64>>,
}

impl Dataset {
    pub fn labeled(train_x: Vec<DesignPoint>, train_y: Vec<f64>) -> Result<Self> {
        Self::new(train_x, train_y, Vec::new(), None)
    }

    pub fn new(
        train_x: Vec<DesignPoint>,
        train_y: Vec<f64>,
        test_x: Vec<DesignPoint>,
        hidden_y: Option<Vec<f64>>,
    ) -> Result<Self> {
        if train_x.len() != train_y.len() {
            return Err(Error::data(format!(
                "{} training points but {} labels",
                train_x.len(),
                train_y.len()
            )));
        }
        if let Some(h) = &hidden_y {
            if h.len() != test_x.len() {
                return Err(Error::data(format!(
                    "{} test points but {} hidden labels",
                    test_x.len(),
                    h.len()
                )));
            }
        }
        let dim = train_x.first().or(test_x.first()).map(DesignPoint::dim);
        if let Some(d) = dim {
            if d == 0 {
                return Err(Error::data("design points must have dimension >= 1"));
            }
            for (i, p) in train_x.iter().chain(&test_x).enumerate() {
                if p.dim() != d {
                    return Err(Error::data(format!(
                        "point {i} has dimension {} but expected {d}",
                        p.dim()
                    )));
                }
            }
        }
        for (i, v) in train_y.iter().chain(hidden_y.iter().flatten()).enumerate() {
            if !v.is_finite() {
                return Err(Error::data(format!("label {i} is not finite")));
            }
        }
        Ok(Dataset {
            train_x,
            train_y,
            test_x,
            hidden_y,
        })
    }

    pub fn n_train(&self) -> usize {
        self.train_x.len()
    }

    pub fn n_test(&self) -> usize {
        self.test_x.len()
    }

    pub fn dim(&self) -> Option<usize> {
        self.train_x
            .first()
            .or(self.test_x.first())
            .map(DesignPoint::dim)
    }

    /// Test multiplier `k` such that there are `k * N` test points.
    pub fn test_multiplier(&self) -> Result<usize> {
        let n = self.n_train();
        if n == 0 {
            return Err(Error::data("empty training sample"));
        }
        if !self.n_test().is_multiple_of(n) {
            return Err(Error::data(format!(
                "test size {} is not a multiple of the training size {n}",
                self.n_test()
            )));
        }
        Ok(self.n_test() / n)
    }

    /// Train points followed by test points, the row order of transductive feature matrices.
    pub fn all_points(&self) -> Vec<DesignPoint> {
        self.train_x.iter().chain(&self.test_x).cloned().collect()
    }

    /// Drops the hidden labels.
    pub fn without_hidden_labels(&self) -> Dataset {
        Dataset {
            hidden_y: None,
            ..self.clone()
        }
    }
}

fn parse_number(field: &str, row: usize, col: usize) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| {
        Error::data(format!(
            "row {row}, column {col}: cannot parse {field:?} as a number"
        ))
    })?;
    if !v.is_finite() {
        return Err(Error::data(format!(
            "row {row}, column {col}: non-finite value {field:?}"
        )));
    }
    Ok(v)
}

fn check_header(header: &csv::StringRecord, labeled: bool) -> Result<usize> {
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    let d = if labeled {
        if cols.last() != Some(&"y") {
            return Err(Error::data("labeled CSV header must end with column `y`"));
        }
        cols.len() - 1
    } else {
        cols.len()
    };
    if d == 0 {
        return Err(Error::data("CSV header names no design columns"));
    }
    for (j, c) in cols.iter().take(d).enumerate() {
        if *c != format!("x{}", j + 1) {
            return Err(Error::data(format!(
                "CSV header column {} is {c:?}, expected \"x{}\"",
                j + 1,
                j + 1
            )));
        }
    }
    Ok(d)
}

fn read_rows<R: Read>(reader: R, labeled: bool) -> Result<(Vec<DesignPoint>, Vec<f64>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let d = check_header(&header, labeled)?;
    let width = if labeled { d + 1 } else { d };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::data(format!("row {row}: {e}")))?;
        if rec.len() != width {
            return Err(Error::data(format!(
                "row {row}: expected {width} fields, found {}",
                rec.len()
            )));
        }
        let mut coords = Vec::with_capacity(d);
        for (j, f) in rec.iter().take(d).enumerate() {
            coords.push(parse_number(f, row, j + 1)?);
        }
        xs.push(DesignPoint(coords));
        if labeled {
            ys.push(parse_number(&rec[d], row, d + 1)?);
        }
    }
    Ok((xs, ys))
}

/// Reads a labeled CSV (`x1..xd,y`).
pub fn read_labeled<R: Read>(reader: R) -> Result<(Vec<DesignPoint>, Vec<f64>)> {
    read_rows(reader, true)
}

/// Reads an unlabeled CSV (`x1..xd`).
pub fn read_unlabeled<R: Read>(reader: R) -> Result<Vec<DesignPoint>> {
    read_rows(reader, false).map(|(xs, _)| xs)
}

pub fn read_labeled_file(path: &Path) -> Result<(Vec<DesignPoint>, Vec<f64>)> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    read_labeled(f)
}

pub fn read_unlabeled_file(path: &Path) -> Result<Vec<DesignPoint>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    read_unlabeled(f)
}

/// Shortest decimal string that parses back to the same double.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn header(d: usize, labeled: bool) -> Vec<String> {
    let mut h: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    if labeled {
        h.push("y".to_string());
    }
    h
}

pub fn write_labeled<W: Write>(writer: W, xs: &[DesignPoint], ys: &[f64]) -> Result<()> {
    let d = xs.first().map(DesignPoint::dim).unwrap_or(1);
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header(d, true))?;
    for (x, y) in xs.iter().zip(ys) {
        let mut rec: Vec<String> = x.0.iter().map(|v| fmt_f64(*v)).collect();
        rec.push(fmt_f64(*y));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_unlabeled<W: Write>(writer: W, xs: &[DesignPoint]) -> Result<()> {
    let d = xs.first().map(DesignPoint::dim).unwrap_or(1);
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header(d, false))?;
    for x in xs {
        w.write_record(x.0.iter().map(|v| fmt_f64(*v)))?;
    }
    w.flush()?;
    Ok(())
}
