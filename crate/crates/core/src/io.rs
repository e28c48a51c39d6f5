//! CSV interchange formats.
//!
//! | file | columns |
//! |------|---------|
//! | annotations | `image_id,rater_id,pn,u,on,mg,ml,sw,at` |
//! | labels / predictions / sr / truth | `image_id,pn,u,on,mg,ml,sw,at[,bcc]` |
//! | folds | `image_id,fold` |
//! | saliency manifest | `image_id,heatmap_path,mask_path,correct` |
//!
//! Column lookup is by header name (case-insensitive); extra columns are
//! ignored.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::folds::{FoldAssignment, FoldError};
use crate::model::{
    validate_dataset, AnnotationDataset, AnnotationRecord, DatasetError, Pattern, PatternVector, RawRecord,
};
use crate::saliency::ManifestEntry;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Dataset {
        path: PathBuf,
        #[source]
        source: DatasetError,
    },
}

impl IoError {
    fn schema(path: &Path, message: impl Into<String>) -> Self {
        IoError::Schema {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, IoError::Io { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> IoError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => IoError::Io {
                path: path.to_path_buf(),
                source,
            },
            _ => unreachable!(),
        }
    } else {
        IoError::schema(path, e.to_string())
    }
}

struct Table {
    path: PathBuf,
    columns: BTreeMap<String, usize>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Table, IoError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(file);
        let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
        let columns = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.to_ascii_lowercase(), i))
            .collect();
        let rows = reader
            .records()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(Table {
            path: path.to_path_buf(),
            columns,
            rows,
        })
    }

    fn column(&self, name: &str) -> Result<usize, IoError> {
        self.columns
            .get(name)
            .copied()
            .ok_or_else(|| IoError::schema(&self.path, format!("missing column {name:?}")))
    }

    fn optional_column(&self, name: &str) -> Option<usize> {
        self.columns.get(name).copied()
    }

    fn pattern_columns(&self) -> Result<Vec<usize>, IoError> {
        Pattern::ALL.iter().map(|p| self.column(p.code())).collect()
    }

    fn cell<'a>(&self, row: &'a csv::StringRecord, col: usize, row_no: usize) -> Result<&'a str, IoError> {
        row.get(col)
            .ok_or_else(|| IoError::schema(&self.path, format!("row {row_no}: missing field {col}")))
    }

    fn vector(&self, row: &csv::StringRecord, cols: &[usize], row_no: usize) -> Result<PatternVector, IoError> {
        let digits = cols
            .iter()
            .map(|&c| self.cell(row, c, row_no))
            .collect::<Result<Vec<_>, _>>()?;
        PatternVector::from_digits(&digits)
            .map_err(|e| IoError::schema(&self.path, format!("row {row_no}: {e}")))
    }
}

fn parse_bool(path: &Path, value: &str, row_no: usize, column: &str) -> Result<bool, IoError> {
    match value {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(IoError::schema(
            path,
            format!("row {row_no}: column {column} must be 0 or 1, found {other:?}"),
        )),
    }
}

fn digit(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub fn read_annotations(path: &Path) -> Result<AnnotationDataset, IoError> {
    let table = Table::read(path)?;
    let image = table.column("image_id")?;
    let rater = table.column("rater_id")?;
    let pattern_cols = table.pattern_columns()?;
    let raw = table
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let row_no = i + 1;
            Ok(RawRecord {
                row: row_no,
                image_id: table.cell(row, image, row_no)?.to_string(),
                rater_id: table.cell(row, rater, row_no)?.to_string(),
                digits: pattern_cols
                    .iter()
                    .map(|&c| row.get(c).unwrap_or("").to_string())
                    .filter(|d| !d.is_empty())
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>, IoError>>()?;
    validate_dataset(raw).map_err(|source| IoError::Dataset {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> Result<csv::Writer<File>, IoError> {
    let file = File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(file))
}

fn header(first: &[&str], with_bcc: bool) -> Vec<String> {
    let mut h: Vec<String> = first.iter().map(|s| s.to_string()).collect();
    h.extend(Pattern::ALL.iter().map(|p| p.code().to_string()));
    if with_bcc {
        h.push("bcc".into());
    }
    h
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<(), IoError> {
    let mut w = create(path)?;
    let result = (|| {
        w.write_record(header(&["image_id", "rater_id"], false))?;
        for r in records {
            let mut row = vec![r.image_id.as_str(), r.rater_id.as_str()];
            row.extend(r.labels.bits().iter().map(|&b| digit(b)));
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    })();
    result.map_err(|e: csv::Error| csv_err(path, e))
}

/// One row of a per-image label file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelRow {
    pub labels: PatternVector,
    /// Explicit binary diagnosis column, if the file has one.
    pub bcc: Option<bool>,
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<String, LabelRow>, IoError> {
    let table = Table::read(path)?;
    if table.columns.is_empty() && table.rows.is_empty() {
        return Ok(BTreeMap::new());
    }
    let image = table.column("image_id")?;
    let pattern_cols = table.pattern_columns()?;
    let bcc_col = table.optional_column("bcc");
    let mut out = BTreeMap::new();
    for (i, row) in table.rows.iter().enumerate() {
        let row_no = i + 1;
        let id = table.cell(row, image, row_no)?.to_string();
        if id.is_empty() {
            return Err(IoError::schema(path, format!("row {row_no}: empty image_id")));
        }
        let labels = table.vector(row, &pattern_cols, row_no)?;
        let bcc = match bcc_col {
            Some(c) => Some(parse_bool(path, table.cell(row, c, row_no)?, row_no, "bcc")?),
            None => None,
        };
        if out.insert(id.clone(), LabelRow { labels, bcc }).is_some() {
            return Err(IoError::schema(path, format!("row {row_no}: duplicate image_id {id:?}")));
        }
    }
    Ok(out)
}

pub fn write_labels<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = (&'a str, PatternVector, Option<bool>)>,
    with_bcc: bool,
) -> Result<(), IoError> {
    let mut w = create(path)?;
    let result = (|| {
        w.write_record(header(&["image_id"], with_bcc))?;
        for (id, v, bcc) in rows {
            let mut row = vec![id];
            row.extend(v.bits().iter().map(|&b| digit(b)));
            if with_bcc {
                row.push(digit(bcc.unwrap_or(false)));
            }
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    })();
    result.map_err(|e: csv::Error| csv_err(path, e))
}

pub fn read_folds(path: &Path) -> Result<FoldAssignment, IoError> {
    let table = Table::read(path)?;
    let image = table.column("image_id")?;
    let fold = table.column("fold")?;
    let mut assignment = BTreeMap::new();
    for (i, row) in table.rows.iter().enumerate() {
        let row_no = i + 1;
        let id = table.cell(row, image, row_no)?.to_string();
        let f: usize = table
            .cell(row, fold, row_no)?
            .parse()
            .map_err(|_| IoError::schema(path, format!("row {row_no}: fold must be a non-negative integer")))?;
        if assignment.insert(id.clone(), f).is_some() {
            return Err(IoError::schema(path, format!("row {row_no}: duplicate image_id {id:?}")));
        }
    }
    let k = assignment.values().max().map_or(1, |m| m + 1);
    FoldAssignment::new(k, assignment).map_err(|e: FoldError| IoError::schema(path, e.to_string()))
}

pub fn write_folds(path: &Path, fa: &FoldAssignment) -> Result<(), IoError> {
    let mut w = create(path)?;
    let result = (|| {
        w.write_record(["image_id", "fold"])?;
        for (id, f) in fa.assignment() {
            w.write_record([id.as_str(), &f.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })();
    result.map_err(|e: csv::Error| csv_err(path, e))
}

pub fn read_saliency_manifest(path: &Path) -> Result<Vec<ManifestEntry>, IoError> {
    let table = Table::read(path)?;
    let image = table.column("image_id")?;
    let heatmap = table.column("heatmap_path")?;
    let mask = table.column("mask_path")?;
    let correct = table.column("correct")?;
    table
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let row_no = i + 1;
            Ok(ManifestEntry {
                image_id: table.cell(row, image, row_no)?.to_string(),
                heatmap_path: PathBuf::from(table.cell(row, heatmap, row_no)?),
                mask_path: PathBuf::from(table.cell(row, mask, row_no)?),
                correct: parse_bool(path, table.cell(row, correct, row_no)?, row_no, "correct")?,
            })
        })
        .collect()
}

/// Writes `bin_center,pdf_fg,pdf_bg`.
pub fn write_density_csv(path: &Path, centers: &[f64], fg: &[f64], bg: &[f64]) -> Result<(), IoError> {
    let mut w = create(path)?;
    let result = (|| {
        w.write_record(["bin_center", "pdf_fg", "pdf_bg"])?;
        for ((c, f), b) in centers.iter().zip(fg).zip(bg) {
            w.write_record([c.to_string(), f.to_string(), b.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })();
    result.map_err(|e: csv::Error| csv_err(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    let mut f = File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_text(path, &text)
}
