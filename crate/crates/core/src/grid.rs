//! Regularly sampled log-price panels and their increments.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// n×d log-prices observed every `delta_n` time units.
#[derive(Debug, Clone, PartialEq)]
pub struct LogPriceGrid {
    values: Mat,
    delta_n: f64,
    labels: Vec<String>,
}

/// (n−1)×d first differences; row i−1 holds Y_i − Y_{i−1}.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementSeries {
    pub values: Mat,
    pub delta_n: f64,
}

impl LogPriceGrid {
    pub fn new(values: Mat, delta_n: f64, labels: Vec<String>) -> Result<Self> {
        if !(delta_n > 0.0 && delta_n < 1.0) {
            return Err(Error::Config(format!("delta_n must lie in (0, 1), got {delta_n}")));
        }
        if values.nrows() < 2 {
            return Err(Error::Data(format!("need at least 2 observations, got {}", values.nrows())));
        }
        if values.ncols() == 0 {
            return Err(Error::Data("grid has no columns".into()));
        }
        if labels.len() != values.ncols() {
            return Err(Error::Format(format!(
                "{} labels for {} columns",
                labels.len(),
                values.ncols()
            )));
        }
        if let Some(pos) = values.iter().position(|x| !x.is_finite()) {
            let n = values.nrows();
            return Err(Error::Data(format!("non-finite value at row {}, column {}", pos % n, pos / n)));
        }
        Ok(LogPriceGrid { values, delta_n, labels })
    }

    pub fn with_default_labels(values: Mat, delta_n: f64) -> Result<Self> {
        let labels = (1..=values.ncols()).map(|j| format!("asset{j}")).collect();
        Self::new(values, delta_n, labels)
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }
    pub fn delta_n(&self) -> f64 {
        self.delta_n
    }
    pub fn labels(&self) -> &[String] {
        &self.labels
    }
    pub fn n(&self) -> usize {
        self.values.nrows()
    }
    pub fn d(&self) -> usize {
        self.values.ncols()
    }

    /// n·Δₙ
    pub fn t_total(&self) -> f64 {
        self.n() as f64 * self.delta_n
    }

    /// Span covered by the increments, (n−1)·Δₙ. This is the t used by the
    /// window bookkeeping.
    pub fn horizon(&self) -> f64 {
        (self.n() - 1) as f64 * self.delta_n
    }

    pub fn increments(&self) -> IncrementSeries {
        let n = self.n();
        let d = self.d();
        let v = &self.values;
        let inc = Mat::from_fn(n - 1, d, |i, j| v[(i + 1, j)] - v[(i, j)]);
        IncrementSeries { values: inc, delta_n: self.delta_n }
    }

    /// Rows [from, to) as a new grid.
    pub fn slice(&self, from: usize, to: usize) -> Result<Self> {
        if to > self.n() || to < from + 2 {
            return Err(Error::Size(format!("bad slice [{from}, {to}) of {} rows", self.n())));
        }
        let sub = self.values.rows(from, to - from).into_owned();
        Self::new(sub, self.delta_n, self.labels.clone())
    }

    pub fn load_csv(path: impl AsRef<Path>, delta_n: f64, raw_prices: bool) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref())?;
        Self::read_csv(f, delta_n, raw_prices)
    }

    pub fn read_csv<R: Read>(reader: R, delta_n: f64, raw_prices: bool) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
        let labels: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Format(e.to_string()))?
            .iter()
            .map(|s| s.trim().to_string())
            .collect();
        let d = labels.len();
        let mut flat: Vec<f64> = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            if rec.len() != d {
                return Err(Error::Format(format!(
                    "row {} has {} fields, header has {d}",
                    row + 1,
                    rec.len()
                )));
            }
            for field in rec.iter() {
                let x: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("row {}: cannot parse {field:?}", row + 1)))?;
                let x = if raw_prices {
                    if !(x.is_finite() && x > 0.0) {
                        return Err(Error::Data(format!("row {}: raw price {x} is not positive", row + 1)));
                    }
                    x.ln()
                } else {
                    x
                };
                flat.push(x);
            }
        }
        let n = flat.len() / d.max(1);
        if n < 2 {
            return Err(Error::Data(format!("need at least 2 observations, got {n}")));
        }
        let values = Mat::from_row_slice(n, d, &flat);
        Self::new(values, delta_n, labels)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
        wr.write_record(&self.labels).map_err(io)?;
        for i in 0..self.n() {
            let row: Vec<String> = (0..self.d()).map(|j| format!("{:?}", self.values[(i, j)])).collect();
            wr.write_record(&row).map_err(io)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path.as_ref())?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

impl IncrementSeries {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }
    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }
    pub fn d(&self) -> usize {
        self.values.ncols()
    }

    /// Cumulative sum starting from `first`, reproducing the grid.
    pub fn integrate(&self, first: &[f64]) -> Mat {
        let n = self.len() + 1;
        let d = self.d();
        let mut out = Mat::zeros(n, d);
        for j in 0..d {
            out[(0, j)] = first[j];
            for i in 1..n {
                out[(i, j)] = out[(i - 1, j)] + self.values[(i - 1, j)];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ingest_identity() {
        let g = LogPriceGrid::read_csv("x\n0.0\n0.1\n0.2\n".as_bytes(), 1.0 / 23400.0, false).unwrap();
        assert_eq!((g.n(), g.d()), (3, 1));
        assert_eq!(g.values()[(2, 0)], 0.2);
        assert!((g.t_total() - 3.0 / 23400.0).abs() < 1e-18);
    }

    #[test]
    fn raw_prices_are_logged() {
        let g = LogPriceGrid::read_csv("p\n100\n101\n".as_bytes(), 0.01, true).unwrap();
        assert_eq!(g.values()[(0, 0)], 100f64.ln());
        assert_eq!(g.values()[(1, 0)], 101f64.ln());
        let e = LogPriceGrid::read_csv("p\n100\n-1\n".as_bytes(), 0.01, true).unwrap_err();
        assert!(matches!(e, Error::Data(_)));
    }

    #[test]
    fn ragged_rows_rejected() {
        let e = LogPriceGrid::read_csv("a,b,c\n1,2,3\n1,2\n".as_bytes(), 0.01, false).unwrap_err();
        assert!(matches!(e, Error::Format(_)));
    }

    #[test]
    fn too_short_rejected() {
        let e = LogPriceGrid::read_csv("a\n1\n".as_bytes(), 0.01, false).unwrap_err();
        assert!(matches!(e, Error::Data(_)));
    }

    #[test]
    fn increments_examples() {
        let g = LogPriceGrid::with_default_labels(Mat::from_column_slice(3, 1, &[0.0, 1.0, 3.0]), 0.1).unwrap();
        assert_eq!(g.increments().values.as_slice(), &[1.0, 2.0]);
        let g = LogPriceGrid::with_default_labels(Mat::from_row_slice(2, 2, &[0.0, 0.0, 1.0, -1.0]), 0.1).unwrap();
        assert_eq!(g.increments().values, Mat::from_row_slice(1, 2, &[1.0, -1.0]));
        let g = LogPriceGrid::with_default_labels(Mat::from_element(5, 1, 2.5), 0.1).unwrap();
        assert!(g.increments().values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn delta_out_of_range() {
        let v = Mat::zeros(3, 1);
        assert!(LogPriceGrid::with_default_labels(v.clone(), 1.0).is_err());
        assert!(LogPriceGrid::with_default_labels(v, 0.0).is_err());
    }
}
