//! Column-named numeric datasets and CSV ingestion.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// An n-by-m data matrix with named columns.
#[derive(Debug, Clone)]
pub struct Dataset {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    data: DMatrix<f64>,
}

impl Dataset {
    pub fn new(names: Vec<String>, data: DMatrix<f64>) -> Result<Self> {
        if names.len() != data.ncols() {
            return Err(Error::InvalidConfig(format!(
                "{} column names for {} data columns",
                names.len(),
                data.ncols()
            )));
        }
        let mut index = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate column name `{n}`")));
            }
        }
        Ok(Self { names, index, data })
    }

    /// Read a headed CSV file. Empty cells, `NA`, `NaN` and `.` become NaN;
    /// anything else that fails to parse as a number is an error.
    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Csv { path: display.clone(), message: e.to_string() })?;
        let names: Vec<String> = reader
            .headers()
            .map_err(|e| Error::Csv { path: display.clone(), message: e.to_string() })?
            .iter()
            .map(|s| s.to_string())
            .collect();

        let mut values: Vec<f64> = Vec::new();
        let mut rows = 0usize;
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Csv {
                path: display.clone(),
                message: format!("row {}: {e}", i + 2),
            })?;
            if record.len() != names.len() {
                return Err(Error::Csv {
                    path: display.clone(),
                    message: format!("row {}: {} fields, expected {}", i + 2, record.len(), names.len()),
                });
            }
            for (j, field) in record.iter().enumerate() {
                let v = match field {
                    "" | "NA" | "na" | "NaN" | "nan" | "." => f64::NAN,
                    s => s.parse::<f64>().map_err(|_| Error::Csv {
                        path: display.clone(),
                        message: format!("row {}, column `{}`: `{s}` is not numeric", i + 2, names[j]),
                    })?,
                };
                values.push(v);
            }
            rows += 1;
        }
        let data = DMatrix::from_row_slice(rows, names.len(), &values);
        Self::new(names, data)
    }

    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn column(&self, name: &str) -> Result<DVector<f64>> {
        let idx = *self
            .index
            .get(name)
            .ok_or_else(|| Error::MissingColumn { name: name.to_string() })?;
        Ok(self.data.column(idx).clone_owned())
    }

    /// Matrix of the requested columns, in the requested order.
    pub fn columns(&self, names: &[String]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.n_rows(), names.len());
        for (j, name) in names.iter().enumerate() {
            out.set_column(j, &self.column(name)?);
        }
        Ok(out)
    }

    /// Keep rows with finite values in every referenced column.
    ///
    /// Returns the filtered dataset (all columns retained) and the number of
    /// dropped rows.
    pub fn listwise_complete(&self, referenced: &[String]) -> Result<(Dataset, usize)> {
        let mut cols = Vec::new();
        for name in referenced {
            let idx = *self
                .index
                .get(name)
                .ok_or_else(|| Error::MissingColumn { name: name.clone() })?;
            cols.push(idx);
        }
        let keep: Vec<usize> = (0..self.data.nrows())
            .filter(|&i| cols.iter().all(|&j| self.data[(i, j)].is_finite()))
            .collect();
        let dropped = self.data.nrows() - keep.len();
        let mut data = DMatrix::zeros(keep.len(), self.data.ncols());
        for (new_i, &old_i) in keep.iter().enumerate() {
            for j in 0..self.data.ncols() {
                data[(new_i, j)] = self.data[(old_i, j)];
            }
        }
        Ok((Dataset { names: self.names.clone(), index: self.index.clone(), data }, dropped))
    }
}
