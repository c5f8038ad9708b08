//! Model JSON documents and dataset CSV files.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, GpModel, Hyperparams};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: &str = "gptube-model/1";

/// Serialized form of a [`GpModel`]. The factorization is rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: String,
    pub hyperparams: Vec<Hyperparams>,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Row-major, `len * input_dim` values.
    pub inputs: Vec<f64>,
    /// Row-major, `len * output_dim` values.
    pub targets: Vec<f64>,
}

impl From<&GpModel> for ModelDocument {
    fn from(m: &GpModel) -> Self {
        let data = m.dataset();
        Self {
            format_version: MODEL_FORMAT_VERSION.to_string(),
            hyperparams: m.hyperparams(),
            input_dim: data.input_dim(),
            output_dim: data.output_dim(),
            inputs: data.inputs.clone(),
            targets: data.targets.clone(),
        }
    }
}

impl ModelDocument {
    pub fn into_model(self) -> Result<GpModel> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported model format `{}` (expected `{MODEL_FORMAT_VERSION}`)",
                self.format_version
            )));
        }
        let data = Dataset::from_flat(self.input_dim, self.output_dim, self.inputs, self.targets)?;
        GpModel::new(data, self.hyperparams)
    }
}

impl GpModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDocument::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<ModelDocument>(s)?.into_model()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Writes `x_1..x_d, y_1..y_n` columns.
pub fn write_dataset_csv<W: Write>(data: &Dataset, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let header: Vec<String> = (1..=data.input_dim())
        .map(|k| format!("x_{k}"))
        .chain((1..=data.output_dim()).map(|k| format!("y_{k}")))
        .collect();
    out.write_record(&header)?;
    for j in 0..data.len() {
        out.write_record(data.input(j).iter().chain(data.target(j)).map(|v| format!("{v:e}")))?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset whose header names inputs `x_*` and targets `y_*`.
pub fn read_dataset_csv<R: Read>(r: R) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let mut x_cols = Vec::new();
    let mut y_cols = Vec::new();
    for (c, name) in header.iter().enumerate() {
        let name = name.trim();
        if name.starts_with("x_") {
            x_cols.push(c);
        } else if name.starts_with("y_") {
            y_cols.push(c);
        } else {
            return Err(Error::InvalidArgument(format!("unexpected dataset column `{name}`")));
        }
    }
    if x_cols.is_empty() || y_cols.is_empty() {
        return Err(Error::InvalidArgument("dataset needs x_* and y_* columns".into()));
    }
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let parse = |c: usize| -> Result<f64> {
            rec.get(c)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("bad numeric field in column {c}")))
        };
        for &c in &x_cols {
            inputs.push(parse(c)?);
        }
        for &c in &y_cols {
            targets.push(parse(c)?);
        }
    }
    Dataset::from_flat(x_cols.len(), y_cols.len(), inputs, targets)
}

pub fn load_dataset_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset_csv(std::fs::File::open(path)?)
}
