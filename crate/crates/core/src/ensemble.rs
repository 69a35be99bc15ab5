//! Multi-stream training and softmax-score fusion.
//!
//! A stream is one model trained on one input modality (joint coordinates or
//! parent-relative bones) with one Gaussian width. The fused prediction is the
//! unweighted mean of the streams' softmax scores.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, LocatedError, Result};
use crate::skeleton::Dataset;
use crate::training::{argmax, evaluate, fit, FitResult, TrainConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    #[default]
    Joint,
    Bone,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Joint => "joint",
            Modality::Bone => "bone",
        }
    }

    /// The dataset as seen by a stream of this modality.
    pub fn apply(self, data: &Dataset) -> Result<Dataset> {
        match self {
            Modality::Joint => Ok(data.clone()),
            Modality::Bone => data.to_bone_stream(),
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Modality::Joint),
            "bone" => Ok(Modality::Bone),
            other => Err(Error::InvalidParameter(format!(
                "unknown modality '{other}' (expected joint or bone)"
            ))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub modality: Modality,
    /// Overrides the Gaussian width of the base configuration.
    pub delta: f64,
}

impl StreamSpec {
    pub fn new(modality: Modality, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "stream delta must be positive, got {delta}"
            )));
        }
        Ok(Self { modality, delta })
    }

    /// `{joint, bone} x {1, 9}`.
    pub fn four_stream() -> Vec<StreamSpec> {
        [Modality::Joint, Modality::Bone]
            .into_iter()
            .flat_map(|m| {
                [1.0, 9.0].map(|d| StreamSpec {
                    modality: m,
                    delta: d,
                })
            })
            .collect()
    }

    pub fn id(&self) -> String {
        format!("{}-d{}", self.modality, self.delta)
    }

    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            delta: self.delta,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamPrediction {
    pub stream_id: String,
    pub sample_ids: Vec<usize>,
    /// One softmax row per sample.
    pub scores: Array2<f64>,
    pub labels: Vec<Option<usize>>,
}

impl StreamPrediction {
    pub fn validate(&self) -> Result<()> {
        let n = self.scores.nrows();
        if self.sample_ids.len() != n || self.labels.len() != n {
            return Err(Error::Shape(format!(
                "stream {}: {n} score rows, {} ids, {} labels",
                self.stream_id,
                self.sample_ids.len(),
                self.labels.len()
            )));
        }
        for (i, row) in self.scores.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if row.iter().any(|&p| p.is_nan() || p < 0.0) || (sum - 1.0).abs() > 1e-8 {
                return Err(Error::InvalidParameter(format!(
                    "stream {}: row {i} is not a probability vector (sum {sum})",
                    self.stream_id
                )));
            }
        }
        Ok(())
    }
}

pub struct StreamRun {
    pub spec: StreamSpec,
    pub fit: FitResult,
    pub prediction: StreamPrediction,
    pub test_accuracy: f64,
    pub warnings: Vec<String>,
}

fn zero_warning(data: &Dataset, spec: &StreamSpec) -> Option<String> {
    let zeros = data.sequences.iter().filter(|s| s.is_all_zero()).count();
    (zeros > 0).then(|| {
        format!(
            "{} stream: {zeros} of {} {} sequences are all-zero",
            spec.id(),
            data.len(),
            data.split.as_str()
        )
    })
}

/// Trains one stream on `train` and scores `test`.
pub fn run_stream(
    train: &Dataset,
    test: &Dataset,
    spec: &StreamSpec,
    config: &TrainConfig,
) -> Result<StreamRun> {
    let train = spec.modality.apply(train)?;
    let test = spec.modality.apply(test)?;
    let mut warnings = Vec::new();
    for data in [&train, &test] {
        if let Some(w) = zero_warning(data, spec) {
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    let cfg = spec.config(config);
    let fit = fit(&train, Some(&test), &cfg)?;
    if let Some(d) = &fit.diverged {
        return Err(Error::NonFinite(format!(
            "stream {} diverged at epoch {}: {}",
            spec.id(),
            d.epoch,
            d.reason
        )));
    }
    let eval = evaluate(&fit.model, &test)?;
    let prediction = StreamPrediction {
        stream_id: spec.id(),
        sample_ids: (0..test.len()).collect(),
        scores: eval.scores.clone(),
        labels: test.sequences.iter().map(|s| s.label).collect(),
    };
    Ok(StreamRun {
        spec: *spec,
        fit,
        prediction,
        test_accuracy: eval.accuracy,
        warnings,
    })
}

/// Independent streams, trained in parallel. Each stream is deterministic on
/// its own, so the result does not depend on scheduling.
pub fn run_streams(
    train: &Dataset,
    test: &Dataset,
    specs: &[StreamSpec],
    config: &TrainConfig,
) -> Result<Vec<StreamRun>> {
    specs
        .par_iter()
        .map(|spec| run_stream(train, test, spec, config))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrediction {
    pub scores: Array2<f64>,
    pub predictions: Vec<usize>,
}

/// Mean of the streams' score vectors, summed in stream-id order.
pub fn ensemble_average(predictions: &[StreamPrediction]) -> Result<FusedPrediction> {
    let first = predictions
        .first()
        .ok_or_else(|| Error::Empty("no streams to fuse".into()))?;
    for p in predictions {
        p.validate()?;
        if p.scores.dim() != first.scores.dim() {
            return Err(Error::Shape(format!(
                "stream {} has scores {:?}, stream {} has {:?}",
                p.stream_id,
                p.scores.dim(),
                first.stream_id,
                first.scores.dim()
            )));
        }
        if p.sample_ids != first.sample_ids {
            return Err(Error::Shape(format!(
                "streams {} and {} cover different samples",
                p.stream_id, first.stream_id
            )));
        }
    }
    let mut ordered: Vec<&StreamPrediction> = predictions.iter().collect();
    ordered.sort_by(|a, b| a.stream_id.cmp(&b.stream_id));
    let mut scores = Array2::zeros(first.scores.dim());
    for p in ordered {
        scores += &p.scores;
    }
    scores /= predictions.len() as f64;
    let predictions = scores.rows().into_iter().map(argmax).collect();
    Ok(FusedPrediction {
        scores,
        predictions,
    })
}

/// `sample_id,score_0..score_{k-1},label,stream_id`; `label` is empty for
/// unlabeled samples.
pub fn write_predictions(p: &StreamPrediction) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let k = p.scores.ncols();
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..k).map(|c| format!("score_{c}")));
    header.extend(["label".to_string(), "stream_id".to_string()]);
    let io = |e: csv::Error| Error::InvalidParameter(format!("csv: {e}"));
    w.write_record(&header).map_err(io)?;
    for (i, row) in p.scores.rows().into_iter().enumerate() {
        let mut record = vec![p.sample_ids[i].to_string()];
        record.extend(row.iter().map(|v| v.to_string()));
        record.push(p.labels[i].map_or_else(String::new, |l| l.to_string()));
        record.push(p.stream_id.clone());
        w.write_record(&record).map_err(io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidParameter(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn read_predictions(text: &str) -> std::result::Result<StreamPrediction, LocatedError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| LocatedError::new(1, e.to_string()))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    let k = cols.len().saturating_sub(3);
    let expected_scores: Vec<String> = (0..k).map(|c| format!("score_{c}")).collect();
    if cols.len() < 4
        || cols[0] != "sample_id"
        || cols[1..=k]
            != expected_scores
                .iter()
                .map(String::as_str)
                .collect::<Vec<_>>()[..]
        || cols[k + 1] != "label"
        || cols[k + 2] != "stream_id"
    {
        return Err(LocatedError::new(
            1,
            "expected header sample_id,score_0,...,label,stream_id",
        ));
    }
    let mut stream_id: Option<String> = None;
    let mut sample_ids = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| LocatedError::new(line, e.to_string()))?;
        if record.len() != k + 3 {
            return Err(LocatedError::new(
                line,
                format!("expected {} fields, found {}", k + 3, record.len()),
            ));
        }
        let parse = |s: &str, what: &str| -> std::result::Result<f64, LocatedError> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| LocatedError::new(line, format!("invalid {what} '{s}'")))
        };
        sample_ids.push(
            record[0].trim().parse::<usize>().map_err(|_| {
                LocatedError::new(line, format!("invalid sample id '{}'", &record[0]))
            })?,
        );
        for c in 0..k {
            values.push(parse(&record[c + 1], "score")?);
        }
        let label = record[k + 1].trim();
        labels.push(if label.is_empty() {
            None
        } else {
            Some(
                label
                    .parse::<usize>()
                    .map_err(|_| LocatedError::new(line, format!("invalid label '{label}'")))?,
            )
        });
        let id = &record[k + 2];
        match &stream_id {
            None => stream_id = Some(id.to_string()),
            Some(s) if s != id => {
                return Err(LocatedError::new(
                    line,
                    format!("mixed stream ids '{s}' and '{id}'"),
                ))
            }
            _ => {}
        }
    }
    let n = sample_ids.len();
    let p = StreamPrediction {
        stream_id: stream_id.unwrap_or_default(),
        sample_ids,
        scores: Array2::from_shape_vec((n, k), values).expect("row-major scores"),
        labels,
    };
    p.validate()
        .map_err(|e| LocatedError::new(n + 1, e.to_string()))?;
    Ok(p)
}
