//! CSV ingestion into in-memory classification datasets.
//!
//! Files must be headered. Feature columns that parse as numbers throughout
//! are taken as-is; any other column is integer-encoded by first appearance.
//! The label column is always first-appearance encoded to `0..K`. Rows with
//! missing cells are dropped and counted, never imputed. Features are kept
//! raw here; the evaluation harness z-scores them per cross-validation fold.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cell values treated as missing (case-insensitive, after trimming).
const MISSING_MARKERS: [&str; 5] = ["", "na", "nan", "?", "null"];

/// One loaded classification dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub name: String,
    /// `[n x f]`, fully finite.
    pub features: Tensor,
    /// One class index in `0..n_classes` per row.
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// Label strings in encoding order: `class_names[labels[i]]` is row i's
    /// original label.
    pub class_names: Vec<String>,
    pub feature_names: Vec<String>,
    /// Rows discarded because of missing or non-finite cells.
    pub dropped_rows: usize,
}

impl TabularDataset {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rank() != 2 || self.features.rows() != self.labels.len() {
            return Err(Error::Contract(
                "dataset features and labels disagree on row count".into(),
            ));
        }
        if !self.features.is_finite() {
            return Err(Error::Contract("dataset features must be finite".into()));
        }
        if self.n_classes < 2 || self.labels.iter().any(|&y| y >= self.n_classes) {
            return Err(Error::Contract("dataset labels outside 0..n_classes".into()));
        }
        if self.n_rows() < 2 * self.n_classes {
            return Err(Error::Contract(format!(
                "dataset needs at least 2 rows per class: {} rows for {} classes",
                self.n_rows(),
                self.n_classes
            )));
        }
        Ok(())
    }
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    if MISSING_MARKERS.iter().any(|m| t.eq_ignore_ascii_case(m)) {
        return true;
    }
    // Numerals that overflow to infinity would smuggle non-finite values
    // into the feature matrix; treat them like missing cells.
    matches!(t.parse::<f64>(), Ok(v) if !v.is_finite())
}

fn parse_numeric(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn ingestion_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Loads a headered CSV, using `label_column` as the class column and every
/// other column as a feature. The dataset name defaults to the file stem.
pub fn load_csv(path: &Path, label_column: &str) -> Result<TabularDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ingestion_err(path, format!("cannot open CSV: {e}")))?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| ingestion_err(path, format!("cannot read header: {e}")))?
        .iter()
        .map(|h| h.to_string())
        .collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            ingestion_err(
                path,
                format!(
                    "label column {label_column:?} not found; columns are [{}]",
                    headers.join(", ")
                ),
            )
        })?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    if feature_names.is_empty() {
        return Err(ingestion_err(
            path,
            "dataset has no feature columns besides the label",
        ));
    }

    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut dropped_rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| ingestion_err(path, format!("row {}: {e}", i + 2)))?;
        if record.len() != headers.len() {
            return Err(ingestion_err(
                path,
                format!(
                    "row {}: has {} cells, header has {}",
                    i + 2,
                    record.len(),
                    headers.len()
                ),
            ));
        }
        let cells: Vec<String> = record.iter().map(|c| c.to_string()).collect();
        if cells.iter().any(|c| is_missing(c)) {
            dropped_rows += 1;
            continue;
        }
        rows.push(cells);
    }
    if rows.len() < 2 {
        return Err(ingestion_err(
            path,
            format!(
                "only {} usable rows after dropping {dropped_rows} with missing cells",
                rows.len()
            ),
        ));
    }

    // A feature column is numeric only if every retained cell parses as a
    // finite number; otherwise the whole column is first-appearance encoded.
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != label_idx).collect();
    let numeric: Vec<bool> = feature_cols
        .iter()
        .map(|&c| rows.iter().all(|row| parse_numeric(&row[c]).is_some()))
        .collect();

    let n = rows.len();
    let f = feature_cols.len();
    let mut features = vec![0.0; n * f];
    let mut encoders: Vec<Vec<String>> = vec![Vec::new(); f];
    for (r, row) in rows.iter().enumerate() {
        for (j, &c) in feature_cols.iter().enumerate() {
            features[r * f + j] = if numeric[j] {
                parse_numeric(&row[c]).expect("checked numeric above")
            } else {
                let seen = &mut encoders[j];
                let code = seen.iter().position(|s| s == &row[c]).unwrap_or_else(|| {
                    seen.push(row[c].clone());
                    seen.len() - 1
                });
                code as f64
            };
        }
    }

    let mut class_names: Vec<String> = Vec::new();
    let mut labels = Vec::with_capacity(n);
    for row in &rows {
        let cell = &row[label_idx];
        let code = class_names
            .iter()
            .position(|s| s == cell)
            .unwrap_or_else(|| {
                class_names.push(cell.clone());
                class_names.len() - 1
            });
        labels.push(code);
    }
    let n_classes = class_names.len();
    if n_classes < 2 {
        return Err(ingestion_err(
            path,
            format!("label column {label_column:?} holds a single class {:?}", class_names[0]),
        ));
    }
    if n < 2 * n_classes {
        return Err(ingestion_err(
            path,
            format!("{n} rows cannot support {n_classes} classes (need at least 2 per class)"),
        ));
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let ds = TabularDataset {
        name,
        features: Tensor::new(features, vec![n, f])?,
        labels,
        n_classes,
        class_names,
        feature_names,
        dropped_rows,
    };
    ds.validate()?;
    Ok(ds)
}
