//! Per-cell covariates and the design matrix built from them.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GplvmError, Result};

/// Raw covariate strings keyed by cell id, in file column order.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    pub cell_ids: Vec<String>,
    pub columns: Vec<(String, Vec<String>)>,
}

impl CovariateTable {
    pub fn new(cell_ids: Vec<String>, columns: Vec<(String, Vec<String>)>) -> Result<Self> {
        for (name, values) in &columns {
            if values.len() != cell_ids.len() {
                return Err(GplvmError::dims(
                    format!("covariate column '{name}'"),
                    cell_ids.len(),
                    values.len(),
                ));
            }
        }
        let mut seen = BTreeSet::new();
        for c in &cell_ids {
            if !seen.insert(c) {
                return Err(GplvmError::InvalidArgument(format!(
                    "cell '{c}' appears twice in the covariate table"
                )));
            }
        }
        Ok(CovariateTable { cell_ids, columns })
    }

    /// CSV with a header row; the first column holds cell ids.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| GplvmError::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(file);
        let parse = |line: usize, message: String| GplvmError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let headers = reader
            .headers()
            .map_err(|e| parse(1, e.to_string()))?
            .clone();
        let names: Vec<String> = headers
            .iter()
            .skip(1)
            .map(|s| s.trim().to_string())
            .collect();
        let mut cell_ids = Vec::new();
        let mut values: Vec<Vec<String>> = vec![Vec::new(); names.len()];
        for record in reader.records() {
            let record = record
                .map_err(|e| parse(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            if record.len() != names.len() + 1 {
                return Err(parse(
                    line,
                    format!(
                        "expected {} fields, found {}",
                        names.len() + 1,
                        record.len()
                    ),
                ));
            }
            cell_ids.push(record[0].trim().to_string());
            for (k, field) in record.iter().skip(1).enumerate() {
                let v = field.trim();
                if v.is_empty() {
                    return Err(parse(line, format!("empty value in column '{}'", names[k])));
                }
                values[k].push(v.to_string());
            }
        }
        Self::new(cell_ids, names.into_iter().zip(values).collect())
    }

    pub fn column(&self, name: &str) -> Result<&[String]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| {
                GplvmError::InvalidArgument(format!("covariate column '{name}' not found"))
            })
    }

    /// Reorders rows to follow `cell_ids`; every requested cell must be present.
    pub fn align(&self, cell_ids: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = self
            .cell_ids
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let mut rows = Vec::with_capacity(cell_ids.len());
        let mut missing = Vec::new();
        for c in cell_ids {
            match index.get(c.as_str()) {
                Some(&i) => rows.push(i),
                None => missing.push(c.clone()),
            }
        }
        if !missing.is_empty() {
            missing.truncate(10);
            return Err(GplvmError::InvalidArgument(format!(
                "cells missing from the covariate table: {}",
                missing.join(", ")
            )));
        }
        let columns = self
            .columns
            .iter()
            .map(|(n, v)| (n.clone(), rows.iter().map(|&i| v[i].clone()).collect()))
            .collect();
        Ok(CovariateTable {
            cell_ids: cell_ids.to_vec(),
            columns,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnKind {
    Categorical,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

impl ColumnSpec {
    /// `name` is categorical; `name:continuous` (or `name:num`) is continuous.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, kind) = match s.split_once(':') {
            None => (s, ColumnKind::Categorical),
            Some((n, "continuous" | "num")) => (n, ColumnKind::Continuous),
            Some((n, "categorical" | "cat")) => (n, ColumnKind::Categorical),
            Some((_, other)) => {
                return Err(GplvmError::InvalidArgument(format!(
                    "unknown column kind '{other}' in '{s}'"
                )));
            }
        };
        if name.is_empty() {
            return Err(GplvmError::InvalidArgument(format!(
                "empty column name in '{s}'"
            )));
        }
        Ok(ColumnSpec {
            name: name.to_string(),
            kind,
        })
    }
}

/// What is needed to rebuild the same columns for other cells.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DesignEncoding {
    /// Column name and its sorted levels.
    pub categorical: Vec<(String, Vec<String>)>,
    /// Column name, training mean and standard deviation.
    pub continuous: Vec<(String, f64, f64)>,
}

impl DesignEncoding {
    pub fn width(&self) -> usize {
        self.categorical.iter().map(|(_, l)| l.len()).sum::<usize>() + self.continuous.len()
    }

    pub fn labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.width());
        for (name, levels) in &self.categorical {
            out.extend(levels.iter().map(|l| format!("{name}={l}")));
        }
        out.extend(self.continuous.iter().map(|(n, _, _)| n.clone()));
        out
    }

    /// Design rows for the cells of `cov`, using training levels and moments.
    pub fn apply(&self, cov: &CovariateTable) -> Result<DMatrix<f64>> {
        let n = cov.cell_ids.len();
        let mut out = DMatrix::zeros(n, self.width());
        let mut col = 0;
        for (name, levels) in &self.categorical {
            let values = cov.column(name)?;
            let unseen: BTreeSet<&String> = values.iter().filter(|v| !levels.contains(v)).collect();
            if !unseen.is_empty() {
                return Err(GplvmError::UnseenLevel {
                    column: name.clone(),
                    levels: unseen.into_iter().cloned().collect(),
                });
            }
            for (i, v) in values.iter().enumerate() {
                let k = levels.iter().position(|l| l == v).expect("checked above");
                out[(i, col + k)] = 1.0;
            }
            col += levels.len();
        }
        for (name, mean, sd) in &self.continuous {
            let values = parse_numbers(name, cov.column(name)?)?;
            for (i, v) in values.iter().enumerate() {
                out[(i, col)] = (v - mean) / sd;
            }
            col += 1;
        }
        Ok(out)
    }
}

fn parse_numbers(name: &str, values: &[String]) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|v| {
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| {
                    GplvmError::InvalidArgument(format!("column '{name}': '{v}' is not a number"))
                })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    /// N×P
    pub values: DMatrix<f64>,
    pub labels: Vec<String>,
    pub encoding: DesignEncoding,
}

impl DesignMatrix {
    /// A design with no columns.
    pub fn empty(n: usize) -> Self {
        DesignMatrix {
            values: DMatrix::zeros(n, 0),
            labels: Vec::new(),
            encoding: DesignEncoding::default(),
        }
    }
}

/// One-hot blocks for categorical columns (spec order, levels sorted), then
/// standardized continuous columns (spec order).
pub fn build_design(cov: &CovariateTable, spec: &[ColumnSpec]) -> Result<DesignMatrix> {
    let mut encoding = DesignEncoding::default();
    for c in spec.iter().filter(|c| c.kind == ColumnKind::Categorical) {
        let levels: BTreeSet<String> = cov.column(&c.name)?.iter().cloned().collect();
        encoding
            .categorical
            .push((c.name.clone(), levels.into_iter().collect()));
    }
    for c in spec.iter().filter(|c| c.kind == ColumnKind::Continuous) {
        let values = parse_numbers(&c.name, cov.column(&c.name)?)?;
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(sd > 0.0) {
            return Err(GplvmError::ZeroVariance(c.name.clone()));
        }
        encoding.continuous.push((c.name.clone(), mean, sd));
    }
    let values = encoding.apply(cov)?;
    Ok(DesignMatrix {
        values,
        labels: encoding.labels(),
        encoding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(cols: &[(&str, &[&str])]) -> CovariateTable {
        let n = cols[0].1.len();
        CovariateTable::new(
            (0..n).map(|i| format!("c{i}")).collect(),
            cols.iter()
                .map(|(n, v)| (n.to_string(), v.iter().map(|s| s.to_string()).collect()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_level_one_hot() {
        let t = table(&[("batch", &["b", "a", "b"])]);
        let d = build_design(&t, &[ColumnSpec::parse("batch").unwrap()]).unwrap();
        assert_eq!(
            d.values,
            DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0])
        );
        assert_eq!(d.labels, vec!["batch=a", "batch=b"]);
    }

    #[test]
    fn constant_continuous_column_fails() {
        let t = table(&[("age", &["3", "3", "3"])]);
        let err = build_design(&t, &[ColumnSpec::parse("age:continuous").unwrap()]).unwrap_err();
        assert!(matches!(err, GplvmError::ZeroVariance(c) if c == "age"));
    }

    #[test]
    fn gender_and_ethnicity_give_ten_columns() {
        let gender: Vec<&str> = (0..16)
            .map(|i| if i % 2 == 0 { "f" } else { "m" })
            .collect();
        let eth_levels = ["e1", "e2", "e3", "e4", "e5", "e6", "e7", "e8"];
        let eth: Vec<&str> = (0..16).map(|i| eth_levels[i % 8]).collect();
        let t = table(&[("gender", &gender), ("ethnicity", &eth)]);
        let spec = [
            ColumnSpec::parse("gender").unwrap(),
            ColumnSpec::parse("ethnicity").unwrap(),
        ];
        let d = build_design(&t, &spec).unwrap();
        assert_eq!(d.values.ncols(), 10);
        for i in 0..16 {
            assert_eq!(d.values.row(i).columns(0, 2).sum(), 1.0);
            assert_eq!(d.values.row(i).columns(2, 8).sum(), 1.0);
        }
    }

    #[test]
    fn continuous_columns_come_last_and_are_standardized() {
        let t = table(&[
            ("age", &["1", "2", "3", "6"]),
            ("batch", &["x", "y", "x", "y"]),
        ]);
        let spec = [
            ColumnSpec::parse("age:num").unwrap(),
            ColumnSpec::parse("batch").unwrap(),
        ];
        let d = build_design(&t, &spec).unwrap();
        assert_eq!(d.labels, vec!["batch=x", "batch=y", "age"]);
        let age = d.values.column(2);
        assert!(age.sum().abs() < 1e-12);
        assert!((age.norm_squared() / 4.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unseen_level_is_listed() {
        let t = table(&[("batch", &["a", "b"])]);
        let d = build_design(&t, &[ColumnSpec::parse("batch").unwrap()]).unwrap();
        let other = table(&[("batch", &["a", "z"])]);
        match d.encoding.apply(&other) {
            Err(GplvmError::UnseenLevel { column, levels }) => {
                assert_eq!(column, "batch");
                assert_eq!(levels, vec!["z"]);
            }
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn align_reorders_and_reports_missing() {
        let t = table(&[("batch", &["a", "b", "c"])]);
        let a = t.align(&["c2".to_string(), "c0".to_string()]).unwrap();
        assert_eq!(
            a.column("batch").unwrap(),
            &["c".to_string(), "a".to_string()]
        );
        assert!(t.align(&["c9".to_string()]).is_err());
    }
}
