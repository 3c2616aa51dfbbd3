//! JSON weight dumps for trained models.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ranker::sorted_columns;
use super::{EncoderModel, RankerModel};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid model file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported format_version {0}")]
    Version(u32),
    #[error("expected a {expected} model, found {found}")]
    Kind { expected: &'static str, found: String },
    #[error("column {0} has wrong length")]
    Shape(u32),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    dim_in: u32,
    d: usize,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    header: Header,
    /// `(column index, values)` for every trained column, ascending.
    columns: Vec<(u32, Vec<f64>)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<f64>,
}

fn dump(kind: &str, enc: &EncoderModel, head: Option<Vec<f64>>, bias: Option<f64>) -> ModelFile {
    ModelFile {
        header: Header {
            format_version: MODEL_FORMAT_VERSION,
            kind: kind.into(),
            dim_in: enc.dim_in(),
            d: enc.dim_out(),
            seed: enc.seed(),
        },
        columns: sorted_columns(enc).into_iter().collect(),
        head,
        bias,
    }
}

fn restore(
    file: ModelFile,
    expected: &'static str,
    namespace: &'static str,
) -> Result<(EncoderModel, ModelFile), ModelFileError> {
    if file.header.format_version != MODEL_FORMAT_VERSION {
        return Err(ModelFileError::Version(file.header.format_version));
    }
    if file.header.kind != expected {
        return Err(ModelFileError::Kind { expected, found: file.header.kind });
    }
    let mut enc = EncoderModel::with_namespace(file.header.dim_in, file.header.d, file.header.seed, namespace);
    let mut cols = std::collections::HashMap::new();
    for (c, v) in &file.columns {
        if v.len() != file.header.d {
            return Err(ModelFileError::Shape(*c));
        }
        cols.insert(*c, v.clone());
    }
    enc.set_columns(cols);
    Ok((enc, file))
}

impl EncoderModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&dump("retriever", self, None, None)).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ModelFileError> {
        Ok(restore(serde_json::from_str(s)?, "retriever", "text")?.0)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelFileError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelFileError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

impl RankerModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&dump("ranker", &self.encoder, Some(self.head.clone()), Some(self.bias)))
            .expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ModelFileError> {
        let (encoder, file) = restore(serde_json::from_str(s)?, "ranker", "ranker")?;
        let head = file.head.unwrap_or_default();
        if head.len() != encoder.dim_out() {
            return Err(ModelFileError::Shape(u32::MAX));
        }
        Ok(Self { encoder, head, bias: file.bias.unwrap_or(0.0) })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelFileError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelFileError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
