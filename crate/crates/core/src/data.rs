//! Count matrices, cell metadata, QC filtering and the normalization
//! pipelines that feed each likelihood.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cells × genes matrix of raw counts with per-cell labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CountDataset {
    pub counts: Array2<u32>,
    pub cell_ids: Vec<String>,
    pub gene_ids: Vec<String>,
    pub batch_labels: Vec<String>,
    pub celltype_labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountFormat {
    Csv,
    MtxTriplet,
}

impl CountDataset {
    pub fn new(
        counts: Array2<u32>,
        cell_ids: Vec<String>,
        gene_ids: Vec<String>,
        batch_labels: Vec<String>,
        celltype_labels: Option<Vec<String>>,
    ) -> Result<Self> {
        let (n, d) = counts.dim();
        if cell_ids.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} cell ids for {n} rows",
                cell_ids.len()
            )));
        }
        if gene_ids.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "{} gene ids for {d} columns",
                gene_ids.len()
            )));
        }
        if batch_labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} batch labels for {n} cells",
                batch_labels.len()
            )));
        }
        if let Some(ct) = &celltype_labels {
            if ct.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "{} cell-type labels for {n} cells",
                    ct.len()
                )));
            }
        }
        Ok(Self {
            counts,
            cell_ids,
            gene_ids,
            batch_labels,
            celltype_labels,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.counts.nrows()
    }

    pub fn n_genes(&self) -> usize {
        self.counts.ncols()
    }

    /// Sorted distinct batch levels.
    pub fn batch_levels(&self) -> Vec<String> {
        levels(&self.batch_labels)
    }

    pub fn design(&self) -> DesignMatrix {
        one_hot_design(&self.batch_labels)
    }

    pub fn library_sizes(&self) -> Vec<f64> {
        self.counts
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&c| c as f64).sum())
            .collect()
    }

    /// Keeps the given cells (in order) and genes (in order).
    pub fn subset(&self, cells: &[usize], genes: &[usize]) -> CountDataset {
        let counts = self.counts.select(Axis(0), cells).select(Axis(1), genes);
        CountDataset {
            counts,
            cell_ids: cells.iter().map(|&i| self.cell_ids[i].clone()).collect(),
            gene_ids: genes.iter().map(|&j| self.gene_ids[j].clone()).collect(),
            batch_labels: cells.iter().map(|&i| self.batch_labels[i].clone()).collect(),
            celltype_labels: self
                .celltype_labels
                .as_ref()
                .map(|ct| cells.iter().map(|&i| ct[i].clone()).collect()),
        }
    }
}

/// One-hot encoding of the batch covariate, one column per sorted level.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub phi: Array2<f64>,
    pub levels: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PipelineTag {
    /// Rows rescaled to sum to `target`.
    LibraryNormalized { target: f64 },
    /// `log1p` of library-normalized rows.
    LogGaussian,
    /// Untransformed counts.
    RawCounts,
}

impl PipelineTag {
    pub fn name(&self) -> &'static str {
        match self {
            PipelineTag::LibraryNormalized { .. } => "library_normalized",
            PipelineTag::LogGaussian => "log_gaussian",
            PipelineTag::RawCounts => "raw_counts",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedMatrix {
    pub values: Array2<f64>,
    pub tag: PipelineTag,
}

pub(crate) fn levels(labels: &[String]) -> Vec<String> {
    labels
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Maps labels to indices into their sorted distinct levels.
pub fn label_indices(labels: &[String]) -> (Vec<usize>, Vec<String>) {
    let lv = levels(labels);
    let index: HashMap<&str, usize> = lv.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    (labels.iter().map(|l| index[l.as_str()]).collect(), lv)
}

pub fn one_hot_design(labels: &[String]) -> DesignMatrix {
    let (idx, levels) = label_indices(labels);
    let mut phi = Array2::zeros((labels.len(), levels.len()));
    for (n, &c) in idx.iter().enumerate() {
        phi[[n, c]] = 1.0;
    }
    DesignMatrix { phi, levels }
}

/// Removes cells with fewer than `min_cell_counts` total counts, then genes
/// detected in at most `min_cells_per_gene` cells. The two passes repeat
/// until nothing else is removed.
pub fn filter_qc(
    ds: &CountDataset,
    min_cell_counts: u64,
    min_cells_per_gene: usize,
) -> Result<CountDataset> {
    let mut cells: Vec<usize> = (0..ds.n_cells()).collect();
    let mut genes: Vec<usize> = (0..ds.n_genes()).collect();
    loop {
        let kept_cells: Vec<usize> = cells
            .iter()
            .copied()
            .filter(|&i| {
                let total: u64 = genes.iter().map(|&j| ds.counts[[i, j]] as u64).sum();
                total >= min_cell_counts
            })
            .collect();
        if kept_cells.is_empty() {
            return Err(Error::EmptyResult("cell"));
        }
        let kept_genes: Vec<usize> = genes
            .iter()
            .copied()
            .filter(|&j| {
                let detected = kept_cells.iter().filter(|&&i| ds.counts[[i, j]] > 0).count();
                detected > min_cells_per_gene
            })
            .collect();
        if kept_genes.is_empty() {
            return Err(Error::EmptyResult("gene"));
        }
        let stable = kept_cells.len() == cells.len() && kept_genes.len() == genes.len();
        cells = kept_cells;
        genes = kept_genes;
        if stable {
            break;
        }
    }
    Ok(ds.subset(&cells, &genes))
}

pub fn library_normalize(ds: &CountDataset, target: f64) -> Result<ProcessedMatrix> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::Domain(format!("normalization target {target}")));
    }
    let mut values = ds.counts.mapv(|c| c as f64);
    for (n, mut row) in values.rows_mut().into_iter().enumerate() {
        let total: f64 = row.sum();
        if total == 0.0 {
            return Err(Error::ZeroRow(n));
        }
        let s = target / total;
        row.mapv_inplace(|v| v * s);
    }
    Ok(ProcessedMatrix {
        values,
        tag: PipelineTag::LibraryNormalized { target },
    })
}

/// Library normalization followed by `log1p`. With `standardize`, each gene
/// is additionally centred and scaled to unit variance.
pub fn gaussian_pipeline(ds: &CountDataset, target: f64, standardize: bool) -> Result<ProcessedMatrix> {
    let mut values = library_normalize(ds, target)?.values;
    values.mapv_inplace(f64::ln_1p);
    if standardize {
        for mut col in values.columns_mut() {
            let n = col.len() as f64;
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            col.mapv_inplace(|v| (v - mean) / sd);
        }
    }
    Ok(ProcessedMatrix {
        values,
        tag: PipelineTag::LogGaussian,
    })
}

pub fn raw_counts(ds: &CountDataset) -> ProcessedMatrix {
    ProcessedMatrix {
        values: ds.counts.mapv(|c| c as f64),
        tag: PipelineTag::RawCounts,
    }
}

fn parse_count(path: &Path, line: usize, tok: &str) -> Result<u32> {
    let v: f64 = tok
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, format!("line {line}: `{tok}` is not a number")))?;
    if !v.is_finite() || v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
        return Err(Error::parse(
            path,
            format!("line {line}: `{tok}` is not a nonnegative integer count"),
        ));
    }
    Ok(v as u32)
}

struct CountTable {
    counts: Array2<u32>,
    cell_ids: Option<Vec<String>>,
    gene_ids: Vec<String>,
}

fn read_dense_csv(path: &Path) -> Result<CountTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let header = rdr
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .clone();
    if header.len() < 2 {
        return Err(Error::parse(path, "header needs a cell-id column and at least one gene"));
    }
    let gene_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let d = gene_ids.len();
    let mut cell_ids = Vec::new();
    let mut flat = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        let line = i + 2;
        if rec.len() != d + 1 {
            return Err(Error::parse(
                path,
                format!("line {line}: expected {} fields, found {}", d + 1, rec.len()),
            ));
        }
        cell_ids.push(rec[0].to_string());
        for tok in rec.iter().skip(1) {
            flat.push(parse_count(path, line, tok)?);
        }
    }
    let n = cell_ids.len();
    let counts = Array2::from_shape_vec((n, d), flat).expect("row lengths checked");
    Ok(CountTable {
        counts,
        cell_ids: Some(cell_ids),
        gene_ids,
    })
}

fn read_triplet(path: &Path) -> Result<CountTable> {
    let reader = BufReader::new(File::open(path)?);
    let mut shape: Option<(usize, usize)> = None;
    let mut counts: Option<Array2<u32>> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(rest) = t.strip_prefix("%%shape") {
            let dims: Vec<usize> = rest
                .split_whitespace()
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(path, format!("line {lineno}: bad %%shape header")))?;
            if dims.len() != 2 {
                return Err(Error::parse(path, format!("line {lineno}: %%shape needs N and D")));
            }
            shape = Some((dims[0], dims[1]));
            counts = Some(Array2::zeros((dims[0], dims[1])));
            continue;
        }
        if t.starts_with('%') {
            continue;
        }
        let m = counts
            .as_mut()
            .ok_or_else(|| Error::parse(path, "entries before %%shape header"))?;
        let (n, d) = shape.expect("set with counts");
        let toks: Vec<&str> = t.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(Error::parse(path, format!("line {lineno}: expected `row col value`")));
        }
        let idx = |s: &str, bound: usize| -> Result<usize> {
            let v: usize = s
                .parse()
                .map_err(|_| Error::parse(path, format!("line {lineno}: bad index `{s}`")))?;
            if v == 0 || v > bound {
                return Err(Error::parse(path, format!("line {lineno}: index {v} outside 1..={bound}")));
            }
            Ok(v - 1)
        };
        let r = idx(toks[0], n)?;
        let c = idx(toks[1], d)?;
        let v = parse_count(path, lineno, toks[2])?;
        m[[r, c]] = m[[r, c]].saturating_add(v);
    }
    let counts = counts.ok_or_else(|| Error::parse(path, "missing %%shape header"))?;
    let d = counts.ncols();
    Ok(CountTable {
        counts,
        cell_ids: None,
        gene_ids: (1..=d).map(|j| format!("gene{j}")).collect(),
    })
}

pub struct Metadata {
    pub cell_ids: Vec<String>,
    pub batch: Vec<String>,
    pub celltype: Option<Vec<String>>,
}

pub fn read_metadata(path: &Path) -> Result<Metadata> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let header = rdr.headers().map_err(|e| Error::parse(path, e.to_string()))?.clone();
    let col = |name: &str| header.iter().position(|h| h.trim() == name);
    let id_col = col("cell_id").ok_or_else(|| Error::parse(path, "missing `cell_id` column"))?;
    let batch_col = col("batch").ok_or_else(|| Error::parse(path, "missing `batch` column"))?;
    let ct_col = col("celltype");
    let mut cell_ids = Vec::new();
    let mut batch = Vec::new();
    let mut celltype = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        let get = |c: usize| rec.get(c).unwrap_or("").trim().to_string();
        cell_ids.push(get(id_col));
        batch.push(get(batch_col));
        celltype.push(ct_col.map(get).unwrap_or_default());
    }
    let celltype = if celltype.iter().all(String::is_empty) {
        None
    } else {
        Some(celltype)
    };
    Ok(Metadata {
        cell_ids,
        batch,
        celltype,
    })
}

/// Reads a count matrix plus its metadata sidecar. For dense CSV input the
/// metadata is matched to rows by `cell_id`; triplet input takes cell ids
/// from the metadata in file order.
pub fn load_dataset(counts_path: &Path, meta_path: &Path, format: CountFormat) -> Result<CountDataset> {
    let table = match format {
        CountFormat::Csv => read_dense_csv(counts_path)?,
        CountFormat::MtxTriplet => read_triplet(counts_path)?,
    };
    let meta = read_metadata(meta_path)?;
    let n = table.counts.nrows();
    if meta.cell_ids.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "metadata has {} rows but the count matrix has {n} cells",
            meta.cell_ids.len()
        )));
    }
    let (cell_ids, batch, celltype) = match table.cell_ids {
        None => (meta.cell_ids, meta.batch, meta.celltype),
        Some(ids) => {
            let pos: HashMap<&str, usize> = meta
                .cell_ids
                .iter()
                .enumerate()
                .map(|(i, s)| (s.as_str(), i))
                .collect();
            let mut batch = Vec::with_capacity(n);
            let mut ct = meta.celltype.as_ref().map(|_| Vec::with_capacity(n));
            for id in &ids {
                let &i = pos.get(id.as_str()).ok_or_else(|| {
                    Error::ShapeMismatch(format!("cell `{id}` missing from metadata"))
                })?;
                batch.push(meta.batch[i].clone());
                if let (Some(out), Some(src)) = (ct.as_mut(), meta.celltype.as_ref()) {
                    out.push(src[i].clone());
                }
            }
            (ids, batch, ct)
        }
    };
    CountDataset::new(table.counts, cell_ids, table.gene_ids, batch, celltype)
}

pub fn write_dense_csv(ds: &CountDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "cell_id")?;
    for g in &ds.gene_ids {
        write!(w, ",{g}")?;
    }
    writeln!(w)?;
    for (id, row) in ds.cell_ids.iter().zip(ds.counts.rows()) {
        write!(w, "{id}")?;
        for v in row {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_triplet(ds: &CountDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "%%shape {} {}", ds.n_cells(), ds.n_genes())?;
    for ((i, j), &v) in ds.counts.indexed_iter() {
        if v > 0 {
            writeln!(w, "{} {} {v}", i + 1, j + 1)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_metadata(ds: &CountDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "cell_id,batch,celltype")?;
    for n in 0..ds.n_cells() {
        let ct = ds.celltype_labels.as_ref().map(|c| c[n].as_str()).unwrap_or("");
        writeln!(w, "{},{},{ct}", ds.cell_ids[n], ds.batch_labels[n])?;
    }
    w.flush()?;
    Ok(())
}
