use std::fs;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::denseengine::DenseMatrix;
use crate::engine::MatrixError;
use crate::relengine::{self, RelMatrix};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("dataset is empty")]
    Empty,
    #[error("row {row}, column {col}: cannot parse `{value}` as a number")]
    Parse { row: usize, col: usize, value: String },
    #[error("row {row}: expected {expected} fields, found {found}")]
    Width { row: usize, expected: usize, found: usize },
    #[error("row {row}: label {label} outside 0..{classes}")]
    LabelOutOfRange { row: usize, label: i64, classes: usize },
    #[error("label column {col} does not exist ({width} columns)")]
    LabelColumn { col: usize, width: usize },
    #[error("synthetic row count {rows} must be between 1 and {max}")]
    SyntheticRows { rows: usize, max: usize },
    #[error("replication factor must be at least 1")]
    Replicate,
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Column layout of a CSV file with a header row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schema {
    /// Four numeric attributes followed by an integer species label in 0..3.
    Iris,
    /// Numeric attributes with the integer label at this 0-based column.
    Generic { label_col: usize },
}

impl Schema {
    pub fn default_scale(self) -> f64 {
        match self {
            Schema::Iris => 10.0,
            Schema::Generic { .. } => 1.0,
        }
    }
}

impl FromStr for Schema {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "iris" {
            return Ok(Schema::Iris);
        }
        match s.strip_prefix("generic:").map(str::parse::<usize>) {
            Some(Ok(label_col)) => Ok(Schema::Generic { label_col }),
            _ => Err(format!("schema must be `iris` or `generic:<labelcol>`, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: DenseMatrix,
    /// 0-based class per row.
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }
}

/// Reads a headed CSV, dividing every feature by `scale` (schema default when
/// `None`). Iris declares three classes; a generic file has `max label + 1`
/// classes unless `num_classes` is given.
pub fn load_csv(path: &Path, schema: Schema, scale: Option<f64>, num_classes: Option<usize>) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(path)
        .map_err(|e| DatasetError::Io { path: path.display().to_string(), message: e.to_string() })?;
    let name = path.file_stem().map_or_else(|| "data".to_string(), |s| s.to_string_lossy().into_owned());
    parse_csv(&text, &name, schema, scale, num_classes)
}

pub fn parse_csv(
    text: &str,
    name: &str,
    schema: Schema,
    scale: Option<f64>,
    num_classes: Option<usize>,
) -> Result<Dataset, DatasetError> {
    let scale = scale.unwrap_or(schema.default_scale());
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let width = reader.headers().map_err(|e| DatasetError::Csv(e.to_string()))?.len();
    let (label_col, declared) = match schema {
        Schema::Iris => (4, Some(num_classes.unwrap_or(3))),
        Schema::Generic { label_col } => (label_col, num_classes),
    };
    if label_col >= width {
        return Err(DatasetError::LabelColumn { col: label_col, width });
    }

    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| DatasetError::Csv(e.to_string()))?;
        if record.len() != width {
            return Err(DatasetError::Width { row, expected: width, found: record.len() });
        }
        for (c, field) in record.iter().enumerate() {
            let bad = || DatasetError::Parse { row, col: c + 1, value: field.to_string() };
            if c == label_col {
                raw_labels.push(field.parse::<i64>().map_err(|_| bad())?);
            } else {
                values.push(field.parse::<f64>().map_err(|_| bad())? / scale);
            }
        }
    }
    if raw_labels.is_empty() {
        return Err(DatasetError::Empty);
    }
    let classes = declared.unwrap_or_else(|| raw_labels.iter().copied().max().map_or(0, |m| m.max(0) as usize + 1));
    let mut labels = Vec::with_capacity(raw_labels.len());
    for (r, &l) in raw_labels.iter().enumerate() {
        if l < 0 || l as usize >= classes {
            return Err(DatasetError::LabelOutOfRange { row: r + 1, label: l, classes });
        }
        labels.push(l as usize);
    }
    let features = DenseMatrix::new(labels.len(), width - 1, values)?;
    Ok(Dataset { name: name.to_string(), features, labels, num_classes: classes })
}

/// The rows repeated `k` times in order.
pub fn replicate(ds: &Dataset, k: usize) -> Result<Dataset, DatasetError> {
    if k == 0 {
        return Err(DatasetError::Replicate);
    }
    let mut values = Vec::with_capacity(ds.features.len() * k);
    let mut labels = Vec::with_capacity(ds.labels.len() * k);
    for _ in 0..k {
        values.extend_from_slice(ds.features.values());
        labels.extend_from_slice(&ds.labels);
    }
    let name = if k == 1 { ds.name.clone() } else { format!("{}x{k}", ds.name) };
    Ok(Dataset {
        name,
        features: DenseMatrix::new(ds.rows() * k, ds.features.cols(), values)?,
        labels,
        num_classes: ds.num_classes,
    })
}

/// `img` with the row number as `i` and attribute position as `j`, and the
/// dense one-hot label relation.
pub fn encode(ds: &Dataset) -> Result<(RelMatrix, RelMatrix), DatasetError> {
    let img = relengine::from_dense(&ds.features);
    let one_hot = relengine::one_hot(&ds.labels, ds.rows(), ds.num_classes)?;
    Ok((img, one_hot))
}

/// Writes `img.csv` and `one_hot.csv` into `dir`.
pub fn write_encoded(dir: &Path, img: &RelMatrix, one_hot: &RelMatrix) -> Result<(), DatasetError> {
    let io = |p: &Path, e: std::io::Error| DatasetError::Io { path: p.display().to_string(), message: e.to_string() };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    for (file, m) in [("img.csv", img), ("one_hot.csv", one_hot)] {
        let p = dir.join(file);
        fs::write(&p, m.to_csv()).map_err(|e| io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "sepal_length,sepal_width,petal_length,petal_width,species\n5.1,3.5,1.4,0.2,0\n7.0,3.2,4.7,1.4,1\n";

    #[test]
    fn iris_row_is_scaled() {
        let ds = parse_csv(SMALL, "iris", Schema::Iris, None, None).unwrap();
        assert_eq!(ds.features.row(0), &[0.51, 0.35, 0.13999999999999999, 0.02]);
        assert_eq!(ds.labels, vec![0, 1]);
        assert_eq!(ds.num_classes, 3);
    }

    #[test]
    fn header_only_is_empty() {
        let err = parse_csv("a,b,species\n", "x", Schema::Generic { label_col: 2 }, None, None).unwrap_err();
        assert!(matches!(err, DatasetError::Empty));
    }

    #[test]
    fn bad_cell_reports_position() {
        let err = parse_csv("a,b\n1,0\nx,1\n", "x", Schema::Generic { label_col: 1 }, None, None).unwrap_err();
        assert!(matches!(err, DatasetError::Parse { row: 2, col: 1, .. }), "{err}");
        let err = parse_csv(SMALL, "x", Schema::Iris, None, Some(1)).unwrap_err();
        assert!(matches!(err, DatasetError::LabelOutOfRange { row: 2, label: 1, classes: 1 }));
    }

    #[test]
    fn generic_label_first() {
        let ds = parse_csv("label,p1,p2\n3,255,0\n0,51,102\n", "px", Schema::Generic { label_col: 0 }, Some(255.0), None)
            .unwrap();
        assert_eq!(ds.num_classes, 4);
        assert_eq!(ds.features.values(), &[1.0, 0.0, 0.2, 0.4]);
    }

    #[test]
    fn replicate_and_encode() {
        let ds = parse_csv(SMALL, "iris", Schema::Iris, None, None).unwrap();
        assert_eq!(replicate(&ds, 1).unwrap().features, ds.features);
        let two = replicate(&ds, 2).unwrap();
        assert_eq!(two.features.row(2), ds.features.row(0));
        assert_eq!(two.labels, vec![0, 1, 0, 1]);
        assert!(replicate(&ds, 0).is_err());
        let (img, one_hot) = encode(&ds).unwrap();
        assert_eq!(img.len(), 8);
        assert_eq!(RelMatrix::from_csv(&one_hot.to_csv()).unwrap(), one_hot);
    }
}
