//! Prediction CSV files shared by the predict, ensemble, and evaluate
//! stages.
//!
//! Layout: `sample_id,label,prob_0,prob_1` with a header row. The `label`
//! column may be empty when ground truth is unknown; evaluation requires
//! it.

use std::path::Path;

use crate::classifier::Prediction;
use crate::dataprep::Label;
use crate::error::{Error, Result};

/// One scored sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub sample_id: String,
    pub label: Option<Label>,
    pub prob_0: f64,
    pub prob_1: f64,
}

impl PredictionRow {
    pub fn new(sample_id: impl Into<String>, label: Option<Label>, probs: [f64; 2]) -> Self {
        PredictionRow {
            sample_id: sample_id.into(),
            label,
            prob_0: probs[0],
            prob_1: probs[1],
        }
    }

    /// Probability of the positive (malignant) class.
    pub fn score(&self) -> f64 {
        self.prob_1
    }

    pub fn prediction(&self) -> Result<Prediction> {
        Prediction::from_probs([self.prob_0, self.prob_1])
    }
}

pub fn write_prediction_csv(path: impl AsRef<Path>, rows: &[PredictionRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    writer.write_record(["sample_id", "label", "prob_0", "prob_1"])?;
    for r in rows {
        // Display prints the shortest string that parses back to the same
        // f64, so probabilities round-trip exactly.
        writer.write_record([
            r.sample_id.as_str(),
            r.label.map(|l| l.as_str()).unwrap_or(""),
            &r.prob_0.to_string(),
            &r.prob_1.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_prediction_csv(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let labelled = match headers.len() {
        4 => true,
        3 => false,
        n => {
            return Err(Error::invalid_input(format!(
                "prediction CSV has {} columns, expected 3 or 4",
                n
            )));
        }
    };
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid_input(format!("bad probability {:?}", s)))
        };
        let (label, p0_idx) = if labelled {
            let raw = record[1].trim();
            let label = if raw.is_empty() {
                None
            } else {
                Some(Label::parse(raw)?)
            };
            (label, 2)
        } else {
            (None, 1)
        };
        let prob_0 = parse(&record[p0_idx])?;
        let prob_1 = parse(&record[p0_idx + 1])?;
        if !(prob_0.is_finite() && prob_1.is_finite()) {
            return Err(Error::invalid_input("probabilities must be finite"));
        }
        rows.push(PredictionRow {
            sample_id: record[0].trim().to_string(),
            label,
            prob_0,
            prob_1,
        });
    }
    Ok(rows)
}

/// Pull (scores, labels, confidences) for [`crate::metrics::compute_report`]
/// out of rows; every row must carry a label.
pub fn evaluation_inputs(rows: &[PredictionRow]) -> Result<(Vec<f64>, Vec<u8>, Vec<f64>)> {
    let mut scores = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    let mut confidences = Vec::with_capacity(rows.len());
    for r in rows {
        let label = r.label.ok_or_else(|| {
            Error::invalid_input(format!(
                "sample {} has no label; cannot evaluate",
                r.sample_id
            ))
        })?;
        let pred = r.prediction()?;
        scores.push(r.score());
        labels.push(label.as_index() as u8);
        confidences.push(pred.confidence);
    }
    Ok((scores, labels, confidences))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_preserves_probabilities_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.csv");
        let rows = vec![
            PredictionRow::new("s0001", Some(Label::Benign), [0.125, 0.875]),
            PredictionRow::new("s0002", None, [1.0 / 3.0, 2.0 / 3.0]),
        ];
        write_prediction_csv(&path, &rows).unwrap();
        let back = read_prediction_csv(&path).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn reads_three_column_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.csv");
        std::fs::write(&path, "sample_id,prob_0,prob_1\na,0.25,0.75\n").unwrap();
        let rows = read_prediction_csv(&path).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].label, None);
        assert_eq!(rows[0].score(), 0.75);
    }

    #[test]
    fn evaluation_requires_labels() {
        let rows = vec![PredictionRow::new("a", None, [0.5, 0.5])];
        assert!(evaluation_inputs(&rows).is_err());
    }
}
