//! Versioned JSON model files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{Calibration, CalibrationKind, CoxCalibrator, IsotonicCalibrator};
use crate::data::SurvivalDataset;
use crate::error::{GraftError, Result};
use crate::experiment::ISOTONIC_GRID_POINTS;
use crate::km::KmCurve;
use crate::metrics::CensoringKm;
use crate::trainer::TrainedModel;

pub const FORMAT_NAME: &str = "graft-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub model: TrainedModel,
    pub cox: CoxCalibrator,
    /// Absent when the training data could not support the isotonic maps.
    pub isotonic: Option<IsotonicCalibrator>,
    /// Censoring distribution of the training data, for IPCW weights.
    pub censoring: KmCurve,
}

impl ModelFile {
    /// Fits both calibrators and the censoring curve on the data the model
    /// was trained on.
    pub fn fit(model: TrainedModel, train: &SurvivalDataset) -> Result<Self> {
        let scores = model.predict_scores(&train.features)?;
        let cox = CoxCalibrator::fit(&scores, &train.times, &train.events)?;
        let isotonic = IsotonicCalibrator::fit(&scores, &train.times, &train.events, ISOTONIC_GRID_POINTS).ok();
        let censoring = CensoringKm::fit(&train.times, &train.events)?.0;
        Ok(Self {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            model,
            cox,
            isotonic,
            censoring,
        })
    }

    pub fn calibration(&self, kind: CalibrationKind) -> Result<Calibration> {
        match kind {
            CalibrationKind::Cox => Ok(Calibration::Cox(self.cox.clone())),
            CalibrationKind::Isotonic => self
                .isotonic
                .clone()
                .map(Calibration::Isotonic)
                .ok_or_else(|| GraftError::Config("model file has no isotonic calibration".into())),
        }
    }

    pub fn censoring_km(&self) -> CensoringKm {
        CensoringKm(self.censoring.clone())
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let value = serde_json::to_value(self).map_err(|e| GraftError::ModelFile(e.to_string()))?;
        if has_null(&value) {
            // JSON has no encoding for NaN or infinity
            return Err(GraftError::Numeric("model contains non-finite values".into()));
        }
        serde_json::to_writer(writer, &value).map_err(|e| GraftError::ModelFile(e.to_string()))
    }

    pub fn to_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.to_writer(&mut buf)?;
        Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
    }

    /// Parses and checks a model file. Never panics on malformed input.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let file: ModelFile = serde_json::from_reader(reader).map_err(|e| GraftError::ModelFile(e.to_string()))?;
        file.check()?;
        Ok(file)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        Self::from_reader(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| GraftError::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.to_writer(&mut w)?;
        w.flush().map_err(|e| GraftError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| GraftError::io(path, e))?;
        Self::from_reader(BufReader::new(f))
    }

    fn check(&self) -> Result<()> {
        if self.format != FORMAT_NAME {
            return Err(GraftError::ModelFile(format!("not a model file (format `{}`)", self.format)));
        }
        if self.version != FORMAT_VERSION {
            return Err(GraftError::ModelFile(format!(
                "unsupported model file version {} (expected {FORMAT_VERSION})",
                self.version
            )));
        }
        let m = &self.model;
        let p = m.scaler.means.len();
        let net = &m.state.params;
        let shapes_ok = m.scaler.stds.len() == p
            && m.feature_names.len() == p
            && m.state.gates.eta.len() == p
            && net.beta.len() == p
            && net.check_shapes().is_ok();
        if !shapes_ok {
            return Err(GraftError::ModelFile("parameter shapes are inconsistent".into()));
        }
        Ok(())
    }
}

fn has_null(v: &serde_json::Value) -> bool {
    match v {
        serde_json::Value::Null => true,
        serde_json::Value::Array(a) => a.iter().any(has_null),
        serde_json::Value::Object(o) => o.values().any(has_null),
        _ => false,
    }
}
