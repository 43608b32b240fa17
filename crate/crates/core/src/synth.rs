//! Synthetic complementary-signal dataset and the end-to-end demo run.
//!
//! The construction gives each record two latent bits and labels it with
//! their XOR. Bit A is drawn only in the still-image stream (a bright blob
//! on the left or right half); bit B is drawn only in the slice-stack
//! stream (slice intensity ramps up or down along a fixed spatial
//! gradient, so the pooled dynamic feature image flips orientation with
//! the bit). Marginally, neither stream carries any label information, so
//! a single-modality classifier can do no better than chance while the
//! fused classifier can recover the XOR. The demo runs the whole pipeline:
//! pool -> extract -> train the three classifiers -> predict -> ensemble
//! -> evaluate.

use ndarray::{Array2, Array4};
use rand::Rng;

use crate::classifier::{
    input_from_feature_map, input_from_fused, train, Classifier, ClassifierSpec, Prediction,
    TrainConfig,
};
use crate::dataprep::{partition, DatasetManifest, Label, SampleRecord, SplitRatio, View};
use crate::ensemble::{ensemble_predict, EnsembleConfig};
use crate::error::Result;
use crate::features::{
    concat_modality, raster_to_input, FeatureMap, Modality, ToyExtractor, ToyExtractorSpec,
};
use crate::metrics::{compute_report, EvalReport};
use crate::predictions::PredictionRow;
use crate::rankpool::{pool_volume, RankPoolConfig};
use crate::volume::Volume;

/// Knobs of the synthetic run. The defaults are the frozen demo setting.
#[derive(Debug, Clone)]
pub struct DemoParams {
    /// Total synthetic patients, half per class, one record each.
    pub n_patients: usize,
    /// Side length of the square synthetic images.
    pub image_size: usize,
    /// Slices per synthetic stack.
    pub t_slices: usize,
    /// Amplitude of the uniform pixel noise.
    pub noise: f64,
    /// Training epochs for each of the three classifiers.
    pub epochs: usize,
    pub rankpool: RankPoolConfig,
    /// Extractor stage widths.
    pub extractor_channels: Vec<usize>,
}

impl Default for DemoParams {
    fn default() -> Self {
        DemoParams {
            n_patients: 500,
            image_size: 32,
            t_slices: 6,
            noise: 0.05,
            epochs: 150,
            rankpool: RankPoolConfig {
                max_iters: 200,
                tolerance: 1e-8,
                ..Default::default()
            },
            extractor_channels: vec![8, 16, 32],
        }
    }
}

/// One generated record before feature extraction.
pub struct SyntheticRecord {
    pub record: SampleRecord,
    pub bit_a: bool,
    pub bit_b: bool,
    pub dm_image: Array2<f64>,
    pub dbt_volume: Volume,
}

/// Per-classifier evaluation of the demo run.
pub struct DemoOutcome {
    pub report_dm: EvalReport,
    pub report_dbt: EvalReport,
    pub report_dual: EvalReport,
    pub report_ensemble: EvalReport,
    /// Test-fold prediction rows per classifier, for export.
    pub predictions_dm: Vec<PredictionRow>,
    pub predictions_dbt: Vec<PredictionRow>,
    pub predictions_dual: Vec<PredictionRow>,
    pub predictions_ensemble: Vec<PredictionRow>,
}

impl DemoOutcome {
    pub fn named_reports(&self) -> [(&'static str, &EvalReport); 4] {
        [
            ("dm", &self.report_dm),
            ("dbt", &self.report_dbt),
            ("dm-dbt", &self.report_dual),
            ("ensemble", &self.report_ensemble),
        ]
    }
}

/// A bright half-image blob: left half for `bit = false`, right for `true`.
fn dm_image(size: usize, bit: bool, noise: f64, rng: &mut impl Rng) -> Array2<f64> {
    let half = size / 2;
    Array2::from_shape_fn((size, size), |(_, x)| {
        let bright = if bit { x >= half } else { x < half };
        let base = if bright { 0.75 } else { 0.25 };
        (base + rng.gen_range(-noise..noise)).clamp(0.0, 1.0)
    })
}

/// A slice stack whose intensity ramps along a fixed left-to-right
/// gradient; `bit` selects whether later slices are brighter or darker.
fn dbt_volume(
    size: usize,
    t_slices: usize,
    bit: bool,
    noise: f64,
    source_id: &str,
    rng: &mut impl Rng,
) -> Result<Volume> {
    let mut slices = Vec::with_capacity(t_slices);
    for t in 0..t_slices {
        let progress = t as f64 / (t_slices - 1) as f64;
        let ramp = if bit { progress } else { 1.0 - progress };
        let level = 0.15 + 0.7 * ramp;
        let slice = Array2::from_shape_fn((size, size), |(_, x)| {
            let gradient = x as f64 / (size - 1) as f64;
            (0.1 + level * gradient * 0.8 + rng.gen_range(-noise..noise)).clamp(0.0, 1.0)
        });
        slices.push(slice);
    }
    Volume::new(slices, source_id)
}

fn validate_params(params: &DemoParams) -> Result<()> {
    if params.n_patients < 4 {
        return Err(crate::error::Error::InvalidInput(
            "demo needs at least 4 patients (2 per class) to split".to_string(),
        ));
    }
    if params.t_slices < 2 {
        return Err(crate::error::Error::InvalidInput(
            "demo stacks need at least 2 slices for rank pooling".to_string(),
        ));
    }
    if params.image_size < 4 {
        return Err(crate::error::Error::InvalidInput(
            "demo images must be at least 4x4".to_string(),
        ));
    }
    Ok(())
}

/// Generate the full record set: balanced labels, `A` uniform, `B = A xor
/// label`.
pub fn generate_dataset(seed: u64, params: &DemoParams) -> Result<Vec<SyntheticRecord>> {
    validate_params(params)?;
    let mut rng = crate::rng::stream(seed, "synth-dataset");
    let mut records = Vec::with_capacity(params.n_patients);
    for p in 0..params.n_patients {
        let label = if p % 2 == 0 {
            Label::Benign
        } else {
            Label::Malignant
        };
        let bit_a: bool = rng.gen();
        let bit_b = bit_a ^ (label == Label::Malignant);
        let patient_id = format!("p{p:04}");
        let dm = dm_image(params.image_size, bit_a, params.noise, &mut rng);
        let volume = dbt_volume(
            params.image_size,
            params.t_slices,
            bit_b,
            params.noise,
            &patient_id,
            &mut rng,
        )?;
        records.push(SyntheticRecord {
            record: SampleRecord {
                patient_id: patient_id.clone(),
                view: View::CC,
                label,
                dm_path: format!("synthetic://{patient_id}/dm").into(),
                dbt_path: format!("synthetic://{patient_id}/dbt").into(),
            },
            bit_a,
            bit_b,
            dm_image: dm,
            dbt_volume: volume,
        });
    }
    Ok(records)
}

struct FeatureSet {
    dm: Vec<Array4<f64>>,
    dbt: Vec<Array4<f64>>,
    fused: Vec<Array4<f64>>,
    labels: Vec<Label>,
    ids: Vec<String>,
}

/// Run the demo pipeline end to end. Deterministic per seed.
pub fn run_e2e_synthetic(seed: u64, params: &DemoParams) -> Result<DemoOutcome> {
    let records = generate_dataset(seed, params)?;

    // Pool every stack into a dynamic feature image, then extract feature
    // maps for both modalities with the shared frozen extractor.
    let extractor = ToyExtractor::new(&ToyExtractorSpec {
        stage_channels: params.extractor_channels.clone(),
        rng_seed: seed ^ 0xfeed,
    })?;
    let mut maps: Vec<(FeatureMap, FeatureMap)> = Vec::with_capacity(records.len());
    for r in &records {
        let dfi = pool_volume(&r.dbt_volume, &params.rankpool)?;
        let (h, w, _) = dfi.raster.dim();
        let dfi_gray =
            Array2::from_shape_fn((h, w), |(y, x)| f64::from(dfi.raster[(y, x, 0)]) / 255.0);
        let dm_map = extractor.extract(&raster_to_input(&r.dm_image), Modality::DM)?;
        let dbt_map = extractor.extract(&raster_to_input(&dfi_gray), Modality::DBT)?;
        maps.push((dm_map, dbt_map));
    }

    // Patient-level stratified split.
    let manifest = DatasetManifest::new(records.iter().map(|r| r.record.clone()).collect(), seed)?;
    let split = partition(&manifest, SplitRatio::default(), seed)?;
    let test_ids: std::collections::HashSet<&str> =
        split.test.iter().map(|r| r.patient_id.as_str()).collect();

    let mut folds = (
        FeatureSet {
            dm: vec![],
            dbt: vec![],
            fused: vec![],
            labels: vec![],
            ids: vec![],
        },
        FeatureSet {
            dm: vec![],
            dbt: vec![],
            fused: vec![],
            labels: vec![],
            ids: vec![],
        },
    );
    for (r, (dm_map, dbt_map)) in records.iter().zip(&maps) {
        let fused = concat_modality(dm_map, dbt_map)?;
        let fold = if test_ids.contains(r.record.patient_id.as_str()) {
            &mut folds.1
        } else {
            &mut folds.0
        };
        fold.dm.push(input_from_feature_map(dm_map));
        fold.dbt.push(input_from_feature_map(dbt_map));
        fold.fused.push(input_from_fused(&fused));
        fold.labels.push(r.record.label);
        fold.ids.push(r.record.patient_id.clone());
    }
    let (train_fold, test_fold) = folds;

    // Train the three classifiers.
    let (h, w, c) = maps[0].0.dim();
    let single_spec = ClassifierSpec::single(h, w, c);
    let dual_spec = ClassifierSpec::dual(h, w, c);
    let train_cfg = |stream_index: u64| TrainConfig {
        epochs: params.epochs,
        seed: seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(stream_index),
        ..Default::default()
    };
    let dm_model = train(
        &single_spec,
        &train_fold.dm,
        &train_fold.labels,
        &train_cfg(1),
    )?;
    let dbt_model = train(
        &single_spec,
        &train_fold.dbt,
        &train_fold.labels,
        &train_cfg(2),
    )?;
    let dual_model = train(
        &dual_spec,
        &train_fold.fused,
        &train_fold.labels,
        &train_cfg(3),
    )?;

    // Test-fold predictions and ensemble.
    let predict_all = |model: &Classifier, inputs: &[Array4<f64>]| -> Result<Vec<Prediction>> {
        inputs.iter().map(|x| model.predict(x)).collect()
    };
    let dm_preds = predict_all(&dm_model.classifier, &test_fold.dm)?;
    let dbt_preds = predict_all(&dbt_model.classifier, &test_fold.dbt)?;
    let dual_preds = predict_all(&dual_model.classifier, &test_fold.fused)?;
    let cfg = EnsembleConfig::uniform(3)?;
    let ensemble_preds: Vec<Prediction> = (0..test_fold.ids.len())
        .map(|i| {
            ensemble_predict(
                &[
                    dm_preds[i].clone(),
                    dbt_preds[i].clone(),
                    dual_preds[i].clone(),
                ],
                &cfg,
            )
        })
        .collect::<Result<_>>()?;

    let rows = |preds: &[Prediction]| -> Vec<PredictionRow> {
        test_fold
            .ids
            .iter()
            .zip(&test_fold.labels)
            .zip(preds)
            .map(|((id, &label), p)| PredictionRow::new(id.clone(), Some(label), p.probs))
            .collect()
    };
    let report = |preds: &[Prediction]| -> Result<EvalReport> {
        let scores: Vec<f64> = preds.iter().map(|p| p.probs[1]).collect();
        let labels: Vec<u8> = test_fold
            .labels
            .iter()
            .map(|l| l.as_index() as u8)
            .collect();
        let confidences: Vec<f64> = preds.iter().map(|p| p.confidence).collect();
        compute_report(&scores, &labels, &confidences)
    };

    Ok(DemoOutcome {
        report_dm: report(&dm_preds)?,
        report_dbt: report(&dbt_preds)?,
        report_dual: report(&dual_preds)?,
        report_ensemble: report(&ensemble_preds)?,
        predictions_dm: rows(&dm_preds),
        predictions_dbt: rows(&dbt_preds),
        predictions_dual: rows(&dual_preds),
        predictions_ensemble: rows(&ensemble_preds),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> DemoParams {
        DemoParams {
            n_patients: 40,
            image_size: 16,
            t_slices: 4,
            noise: 0.05,
            epochs: 2,
            extractor_channels: vec![4, 8],
            ..Default::default()
        }
    }

    #[test]
    fn dataset_is_balanced_and_xor_consistent() {
        let params = small_params();
        let records = generate_dataset(3, &params).unwrap();
        assert_eq!(records.len(), 40);
        let malignant = records
            .iter()
            .filter(|r| r.record.label == Label::Malignant)
            .count();
        assert_eq!(malignant, 20);
        for r in &records {
            let expected = r.bit_a ^ r.bit_b;
            assert_eq!(expected, r.record.label == Label::Malignant);
            assert_eq!(r.dbt_volume.len(), 4);
        }
    }

    #[test]
    fn demo_is_deterministic_per_seed() {
        let params = small_params();
        let a = run_e2e_synthetic(11, &params).unwrap();
        let b = run_e2e_synthetic(11, &params).unwrap();
        assert_eq!(a.report_dm, b.report_dm);
        assert_eq!(a.report_ensemble, b.report_ensemble);
        assert_eq!(a.predictions_dual, b.predictions_dual);
    }
}
