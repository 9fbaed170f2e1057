//! Model and training-report files.
//!
//! A model file is one JSON document:
//!
//! ```text
//! {"format": "tdm-1", "n": …, "d": …, "vocabulary": [...],
//!  "P_L": M, "P_R": M, "M": [M, …]}
//! ```
//!
//! where each matrix `M` is a `d×d` row-major nested array of `[re, im]`
//! pairs. Floats are written in shortest round-trip form and parsed with
//! correct rounding, so a write/read cycle reproduces every entry exactly.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Result, TdmError};
use crate::linalg::{c, CMatrix};
use crate::model::{Density, Dictionary, TraceDensityModel};
use crate::training::{TrainConfig, TrainReport};

pub const MODEL_FORMAT: &str = "tdm-1";

type MatrixRepr = Vec<Vec<[f64; 2]>>;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    n: usize,
    d: usize,
    vocabulary: Vec<String>,
    #[serde(rename = "P_L")]
    p_left: MatrixRepr,
    #[serde(rename = "P_R")]
    p_right: MatrixRepr,
    #[serde(rename = "M")]
    m: Vec<MatrixRepr>,
}

fn to_repr(a: &CMatrix) -> MatrixRepr {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| [a[(i, j)].re, a[(i, j)].im]).collect())
        .collect()
}

fn from_repr(rows: &MatrixRepr, d: usize, what: &str) -> Result<CMatrix> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(TdmError::Validation(format!("{what} is not {d}×{d}")));
    }
    Ok(CMatrix::from_fn(d, d, |i, j| c(rows[i][j][0], rows[i][j][1])))
}

pub fn model_to_json(model: &TraceDensityModel) -> Result<String> {
    let file = ModelFile {
        format: MODEL_FORMAT.to_string(),
        n: model.n(),
        d: model.d(),
        vocabulary: model.vocab().words().to_vec(),
        p_left: to_repr(model.p_left().matrix()),
        p_right: to_repr(model.p_right().matrix()),
        m: model.dict().mats().iter().map(to_repr).collect(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn model_from_json(text: &str) -> Result<TraceDensityModel> {
    let file: ModelFile = serde_json::from_str(text)?;
    if file.format != MODEL_FORMAT {
        return Err(TdmError::Validation(format!(
            "unsupported model format {:?}, expected {MODEL_FORMAT:?}",
            file.format
        )));
    }
    if file.vocabulary.len() != file.n || file.m.len() != file.n {
        return Err(TdmError::Validation(format!(
            "n = {} but the file has {} vocabulary entries and {} matrices",
            file.n,
            file.vocabulary.len(),
            file.m.len()
        )));
    }
    let d = file.d;
    let mats = file
        .m
        .iter()
        .enumerate()
        .map(|(i, m)| from_repr(m, d, &format!("M[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    let vocab = Arc::new(Vocabulary::new(file.vocabulary)?);
    TraceDensityModel::new(
        vocab,
        Dictionary::new(mats)?,
        Density::new(from_repr(&file.p_left, d, "P_L")?)?,
        Density::new(from_repr(&file.p_right, d, "P_R")?)?,
    )
}

pub fn write_model(model: &TraceDensityModel, path: &Path) -> Result<()> {
    fs::write(path, model_to_json(model)?)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<TraceDensityModel> {
    model_from_json(&fs::read_to_string(path)?)
}

/// Training report with one array per diagnostic, indexed by epoch.
#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct ReportFile {
    pub config: TrainConfig,
    pub best_epoch: Option<usize>,
    pub stop_gradient_right_density: bool,
    pub epoch: Vec<usize>,
    pub nll: Vec<f64>,
    pub perplexity: Vec<f64>,
    pub left_residual: Vec<f64>,
    pub right_residual: Vec<f64>,
    pub fp_iterations: Vec<usize>,
    pub fp_failures: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub rejected_steps: Vec<usize>,
    pub flagged: Vec<bool>,
}

impl ReportFile {
    pub fn new(report: &TrainReport, config: &TrainConfig) -> Self {
        let r = &report.records;
        ReportFile {
            config: config.clone(),
            best_epoch: report.best_epoch,
            stop_gradient_right_density: report.stop_gradient_right_density,
            epoch: r.iter().map(|e| e.epoch).collect(),
            nll: r.iter().map(|e| e.nll).collect(),
            perplexity: r.iter().map(|e| e.perplexity).collect(),
            left_residual: r.iter().map(|e| e.left_residual).collect(),
            right_residual: r.iter().map(|e| e.right_residual).collect(),
            fp_iterations: r.iter().map(|e| e.fp_iterations).collect(),
            fp_failures: r.iter().map(|e| e.fp_failures).collect(),
            learning_rate: r.iter().map(|e| e.learning_rate).collect(),
            rejected_steps: r.iter().map(|e| e.rejected_steps).collect(),
            flagged: r.iter().map(|e| e.flagged).collect(),
        }
    }
}

pub fn write_report(report: &TrainReport, config: &TrainConfig, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&ReportFile::new(report, config))?;
    fs::write(path, text)?;
    Ok(())
}
