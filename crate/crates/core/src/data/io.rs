//! Reading and writing labeled expression matrices (cells × genes).
//!
//! Two layouts are supported: a dense CSV whose header row holds gene ids and
//! whose first column holds cell ids, and a MatrixMarket coordinate file with
//! separate cell and gene label files (one label per line, first
//! tab-separated field used).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{GplvmError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    /// N×D, cells in rows.
    pub values: DMatrix<f64>,
    pub cell_ids: Vec<String>,
    pub gene_ids: Vec<String>,
    /// Set once normalization and log1p have been applied.
    pub processed: bool,
}

impl ExpressionMatrix {
    pub fn new(values: DMatrix<f64>, cell_ids: Vec<String>, gene_ids: Vec<String>) -> Result<Self> {
        if cell_ids.len() != values.nrows() {
            return Err(GplvmError::dims(
                "cell labels",
                values.nrows(),
                cell_ids.len(),
            ));
        }
        if gene_ids.len() != values.ncols() {
            return Err(GplvmError::dims(
                "gene labels",
                values.ncols(),
                gene_ids.len(),
            ));
        }
        Ok(ExpressionMatrix {
            values,
            cell_ids,
            gene_ids,
            processed: false,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_genes(&self) -> usize {
        self.values.ncols()
    }

    pub fn gene_index(&self, gene: &str) -> Option<usize> {
        self.gene_ids.iter().position(|g| g == gene)
    }
}

/// Compressed-column counts; gene columns are densified on request.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCounts {
    pub n_cells: usize,
    pub n_genes: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseCounts {
    /// Builds from (cell, gene, value) triplets; duplicate coordinates are summed.
    pub fn from_triplets(
        n_cells: usize,
        n_genes: usize,
        mut entries: Vec<(usize, usize, f64)>,
    ) -> Self {
        entries.sort_by_key(|&(r, c, _)| (c, r));
        let mut col_ptr = vec![0usize; n_genes + 1];
        let mut row_idx = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *values.last_mut().expect("entry pushed before") += v;
                continue;
            }
            row_idx.push(r);
            values.push(v);
            col_ptr[c + 1] += 1;
            last = Some((r, c));
        }
        for c in 0..n_genes {
            col_ptr[c + 1] += col_ptr[c];
        }
        SparseCounts {
            n_cells,
            n_genes,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn gene_column(&self, gene: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cells];
        for k in self.col_ptr[gene]..self.col_ptr[gene + 1] {
            out[self.row_idx[k]] = self.values[k];
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_cells, self.n_genes);
        for g in 0..self.n_genes {
            for k in self.col_ptr[g]..self.col_ptr[g + 1] {
                m[(self.row_idx[k], g)] = self.values[k];
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MatrixFormat {
    DenseCsv,
    MatrixMarket { cells: PathBuf, genes: PathBuf },
}

pub fn load_expression(path: &Path, format: &MatrixFormat) -> Result<ExpressionMatrix> {
    match format {
        MatrixFormat::DenseCsv => read_dense_csv(path),
        MatrixFormat::MatrixMarket { cells, genes } => {
            let cell_ids = read_labels(cells)?;
            let gene_ids = read_labels(genes)?;
            let counts = read_matrix_market(path, cell_ids.len(), gene_ids.len())?;
            ExpressionMatrix::new(counts.to_dense(), cell_ids, gene_ids)
        }
    }
}

pub fn write_expression(m: &ExpressionMatrix, path: &Path, format: &MatrixFormat) -> Result<()> {
    match format {
        MatrixFormat::DenseCsv => write_dense_csv(m, path),
        MatrixFormat::MatrixMarket { cells, genes } => {
            write_labels(&m.cell_ids, cells)?;
            write_labels(&m.gene_ids, genes)?;
            write_matrix_market(&m.values, path)
        }
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| GplvmError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| GplvmError::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> GplvmError {
    GplvmError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn read_labels(path: &Path) -> Result<Vec<String>> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| GplvmError::io(path, e))?;
        let label = line.split('\t').next().unwrap_or("").trim();
        if label.is_empty() {
            return Err(parse_err(path, i + 1, "empty label"));
        }
        out.push(label.to_string());
    }
    Ok(out)
}

pub fn write_labels(labels: &[String], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    for l in labels {
        writeln!(w, "{l}").map_err(|e| GplvmError::io(path, e))?;
    }
    w.flush().map_err(|e| GplvmError::io(path, e))
}

/// Reads a coordinate file laid out cells × genes. A file stored genes ×
/// cells (as many single-cell tools write it) is transposed when only that
/// orientation matches the label counts.
pub fn read_matrix_market(path: &Path, n_cells: usize, n_genes: usize) -> Result<SparseCounts> {
    let reader = BufReader::new(open(path)?);
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let header = header.map_err(|e| GplvmError::io(path, e))?;
    let lower = header.to_ascii_lowercase();
    if !lower.starts_with("%%matrixmarket") || !lower.contains("coordinate") {
        return Err(parse_err(
            path,
            1,
            "expected a MatrixMarket coordinate header",
        ));
    }
    if lower.contains("complex") || lower.contains("symmetric") || lower.contains("hermitian") {
        return Err(parse_err(
            path,
            1,
            "only real general matrices are supported",
        ));
    }
    let pattern = lower.contains("pattern");

    let mut size: Option<(usize, usize, usize)> = None;
    let mut entries = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| GplvmError::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| parse_err(path, lineno, format!("bad integer '{s}'")))
        };
        match size {
            None => {
                if fields.len() != 3 {
                    return Err(parse_err(
                        path,
                        lineno,
                        "size line needs rows, columns and entry count",
                    ));
                }
                size = Some((int(fields[0])?, int(fields[1])?, int(fields[2])?));
            }
            Some((rows, cols, _)) => {
                let want = if pattern { 2 } else { 3 };
                if fields.len() != want {
                    return Err(parse_err(path, lineno, format!("expected {want} fields")));
                }
                let (r, c) = (int(fields[0])?, int(fields[1])?);
                if r == 0 || c == 0 || r > rows || c > cols {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("coordinate ({r}, {c}) outside {rows}×{cols}"),
                    ));
                }
                let v = if pattern {
                    1.0
                } else {
                    fields[2].parse::<f64>().map_err(|_| {
                        parse_err(path, lineno, format!("bad value '{}'", fields[2]))
                    })?
                };
                entries.push((r - 1, c - 1, v, lineno));
            }
        }
    }
    let (rows, cols, nnz) = size.ok_or_else(|| parse_err(path, 1, "missing size line"))?;
    if entries.len() != nnz {
        return Err(parse_err(
            path,
            entries.last().map_or(2, |e| e.3),
            format!("header announces {nnz} entries, found {}", entries.len()),
        ));
    }
    let transpose = if (rows, cols) == (n_cells, n_genes) {
        false
    } else if (rows, cols) == (n_genes, n_cells) {
        log::info!("{}: stored genes × cells, transposing", path.display());
        true
    } else {
        return Err(parse_err(
            path,
            1,
            format!("matrix is {rows}×{cols} but labels give {n_cells} cells and {n_genes} genes"),
        ));
    };
    let triplets = entries
        .into_iter()
        .map(|(r, c, v, _)| if transpose { (c, r, v) } else { (r, c, v) })
        .collect();
    Ok(SparseCounts::from_triplets(n_cells, n_genes, triplets))
}

pub fn write_matrix_market(values: &DMatrix<f64>, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let nnz = values.iter().filter(|v| **v != 0.0).count();
    let io = |e| GplvmError::io(path, e);
    writeln!(w, "%%MatrixMarket matrix coordinate real general").map_err(io)?;
    writeln!(w, "{} {} {}", values.nrows(), values.ncols(), nnz).map_err(io)?;
    for c in 0..values.ncols() {
        for r in 0..values.nrows() {
            let v = values[(r, c)];
            if v != 0.0 {
                writeln!(w, "{} {} {}", r + 1, c + 1, v).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

fn read_dense_csv(path: &Path) -> Result<ExpressionMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(open(path)?);
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if headers.len() < 2 {
        return Err(parse_err(
            path,
            1,
            "header needs a cell-id column and at least one gene",
        ));
    }
    let gene_ids: Vec<String> = headers
        .iter()
        .skip(1)
        .map(|s| s.trim().to_string())
        .collect();
    let d = gene_ids.len();
    let mut cell_ids = Vec::new();
    let mut data = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != d + 1 {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", d + 1, record.len()),
            ));
        }
        cell_ids.push(record[0].trim().to_string());
        for field in record.iter().skip(1) {
            let v = field
                .trim()
                .parse::<f64>()
                .map_err(|_| parse_err(path, line, format!("bad number '{field}'")))?;
            data.push(v);
        }
    }
    let n = cell_ids.len();
    ExpressionMatrix::new(DMatrix::from_row_slice(n, d, &data), cell_ids, gene_ids)
}

fn write_dense_csv(m: &ExpressionMatrix, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let csv_err = |e: csv::Error| parse_err(path, 0, e.to_string());
    let mut header = vec!["cell".to_string()];
    header.extend(m.gene_ids.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (i, cell) in m.cell_ids.iter().enumerate() {
        let mut row = vec![cell.clone()];
        row.extend(m.values.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| GplvmError::io(path, e))
}
