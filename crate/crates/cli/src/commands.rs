//! Subcommand implementations.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dynafuse::classifier::{
    self, input_from_feature_map, input_from_fused, Classifier, ClassifierSpec, TrainConfig,
};
use dynafuse::dataprep::{
    augment, downsample, partition, DatasetManifest, Label, SplitManifest, SplitRatio,
    AUGMENT_VARIANTS,
};
use dynafuse::ensemble::{ensemble_predict, EnsembleConfig};
use dynafuse::features::{
    concat_modality, export_feature_map, import_feature_map, raster_to_input, Modality,
    ToyExtractor, ToyExtractorSpec,
};
use dynafuse::metrics::{compute_report, report_table};
use dynafuse::predictions::{
    evaluation_inputs, read_prediction_csv, write_prediction_csv, PredictionRow,
};
use dynafuse::rankpool::{pool_volume, pool_volume_approximate};
use dynafuse::synth::{run_e2e_synthetic, DemoParams};
use dynafuse::volume::{load_grayscale, Volume};

use crate::config::PipelineConfig;
use crate::{
    DemoArgs, EnsembleArgs, EvaluateArgs, ExtractArgs, Fold, PoolArgs, PredictArgs, PrepArgs,
    TrainArgs, WhichClassifier,
};

fn sample_id(index: usize) -> String {
    format!("s{index:04}")
}

// ---------------------------------------------------------------------------
// pool

pub fn pool(config: &PipelineConfig, args: PoolArgs) -> anyhow::Result<()> {
    let mut section = config.rankpool.clone();
    if let Some(v) = args.lambda {
        section.lambda = v;
    }
    if let Some(v) = args.max_iters {
        section.max_iters = v;
    }
    if let Some(v) = args.tolerance {
        section.tolerance = v;
    }
    if let Some(v) = args.step_rule {
        section.step_rule = v;
    }
    if let Some(v) = args.fixed_step {
        section.fixed_step = v;
    }
    let cfg = section.to_config()?;

    let jobs: Vec<(PathBuf, String)> = if let Some(manifest) = &args.manifest {
        let manifest = DatasetManifest::from_csv(manifest, 0)?;
        manifest
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.dbt_path.clone(), sample_id(i)))
            .collect()
    } else if args.volumes.is_empty() {
        bail!("nothing to pool: pass volume directories or --manifest");
    } else {
        args.volumes
            .iter()
            .map(|dir| {
                let name = dir
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or("volume")
                    .to_string();
                (dir.clone(), name)
            })
            .collect()
    };

    std::fs::create_dir_all(&args.out)?;
    let run_one = |(dir, name): &(PathBuf, String)| -> anyhow::Result<()> {
        let volume = Volume::from_slice_dir(dir)
            .with_context(|| format!("loading volume {}", dir.display()))?;
        let dfi = if args.approx {
            pool_volume_approximate(&volume, &cfg)
        } else {
            pool_volume(&volume, &cfg)
        }
        .with_context(|| format!("pooling volume {}", dir.display()))?;
        dfi.save_png(args.out.join(format!("{name}.png")))?;
        let sidecar = serde_json::to_vec_pretty(&dfi.record())?;
        std::fs::write(args.out.join(format!("{name}.json")), sidecar)?;
        eprintln!(
            "pooled {} (T={}, {} iterations, objective {:.6})",
            name, dfi.t_len, dfi.iterations, dfi.final_objective
        );
        Ok(())
    };

    if args.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(args.workers)
            .build()?;
        pool.install(|| {
            use rayon::prelude::*;
            jobs.par_iter()
                .map(run_one)
                .collect::<anyhow::Result<Vec<_>>>()
        })?;
    } else {
        for job in &jobs {
            run_one(job)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// prep

pub fn prep(config: &PipelineConfig, args: PrepArgs) -> anyhow::Result<()> {
    let seed = args.seed.unwrap_or(config.split.seed);
    let ratio = SplitRatio {
        train: args.train_ratio.unwrap_or(config.split.train),
        test: args.test_ratio.unwrap_or(config.split.test),
    };
    let manifest = DatasetManifest::from_csv(&args.manifest, seed)?;
    let split = partition(&manifest, ratio, seed)?;
    let out = SplitManifest::from_split(&split, seed);
    std::fs::write(&args.out, serde_json::to_vec_pretty(&out)?)?;
    eprintln!(
        "split {} records into {} train / {} test patients",
        manifest.records.len(),
        out.train.len(),
        out.test.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// extract

/// One row of the feature index written next to the TNSR files.
#[derive(Debug, Clone)]
pub struct FeatureIndexRow {
    pub sample_id: String,
    pub base_id: String,
    pub patient_id: String,
    pub label: Label,
    pub dm_file: String,
    pub dbt_file: String,
}

pub fn write_feature_index(dir: &Path, rows: &[FeatureIndexRow]) -> anyhow::Result<()> {
    let mut writer = csv::WriterBuilder::new().from_path(dir.join("index.csv"))?;
    writer.write_record([
        "sample_id",
        "base_id",
        "patient_id",
        "label",
        "dm_file",
        "dbt_file",
    ])?;
    for r in rows {
        writer.write_record([
            &r.sample_id,
            &r.base_id,
            &r.patient_id,
            &r.label.as_str().to_string(),
            &r.dm_file,
            &r.dbt_file,
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_feature_index(dir: &Path) -> anyhow::Result<Vec<FeatureIndexRow>> {
    let path = dir.join("index.csv");
    let mut reader = csv::Reader::from_path(&path)
        .with_context(|| format!("reading feature index {}", path.display()))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        rows.push(FeatureIndexRow {
            sample_id: record[0].to_string(),
            base_id: record[1].to_string(),
            patient_id: record[2].to_string(),
            label: Label::parse(&record[3]).map_err(anyhow::Error::from)?,
            dm_file: record[4].to_string(),
            dbt_file: record[5].to_string(),
        });
    }
    Ok(rows)
}

pub fn extract(config: &PipelineConfig, args: ExtractArgs) -> anyhow::Result<()> {
    let manifest = DatasetManifest::from_csv(&args.manifest, 0)?;
    std::fs::create_dir_all(&args.out)?;
    let mut index = Vec::new();

    if let Some(import_dir) = &args.import_dir {
        // Precomputed maps: validate and copy into the feature directory.
        for (i, record) in manifest.records.iter().enumerate() {
            let sid = sample_id(i);
            for (suffix, modality) in [("dm", Modality::DM), ("dbt", Modality::DBT)] {
                let src = import_dir.join(format!("{sid}.{suffix}.tnsr"));
                let map = import_feature_map(&src, modality)
                    .with_context(|| format!("importing {}", src.display()))?;
                export_feature_map(&map, args.out.join(format!("{sid}.orig.{suffix}.tnsr")))?;
            }
            index.push(FeatureIndexRow {
                sample_id: format!("{sid}.orig"),
                base_id: sid.clone(),
                patient_id: record.patient_id.clone(),
                label: record.label,
                dm_file: format!("{sid}.orig.dm.tnsr"),
                dbt_file: format!("{sid}.orig.dbt.tnsr"),
            });
        }
        write_feature_index(&args.out, &index)?;
        eprintln!(
            "imported {} precomputed feature-map pairs",
            manifest.records.len()
        );
        return Ok(());
    }

    let dfi_dir = args
        .dfi_dir
        .as_ref()
        .expect("clap enforces dfi_dir without import_dir");
    let target = args.target.unwrap_or(config.extractor.target);
    let channels = args
        .channels
        .unwrap_or_else(|| config.extractor.channels.clone());
    let seed = args.extractor_seed.unwrap_or(config.extractor.seed);
    let extractor = ToyExtractor::new(&ToyExtractorSpec {
        stage_channels: channels,
        rng_seed: seed,
    })?;

    for (i, record) in manifest.records.iter().enumerate() {
        let sid = sample_id(i);
        let dm = downsample(
            &load_grayscale(&record.dm_path)
                .with_context(|| format!("loading {}", record.dm_path.display()))?,
            (target, target),
        )?;
        let dfi_path = dfi_dir.join(format!("{sid}.png"));
        let dfi = downsample(
            &load_grayscale(&dfi_path)
                .with_context(|| format!("loading pooled image {}", dfi_path.display()))?,
            (target, target),
        )?;

        let (dm_variants, dfi_variants) = if args.augment {
            (augment(&dm)?, augment(&dfi)?)
        } else {
            (vec![dm], vec![dfi])
        };
        for (v, (dm_v, dfi_v)) in dm_variants.iter().zip(&dfi_variants).enumerate() {
            let variant = if args.augment {
                AUGMENT_VARIANTS[v]
            } else {
                "orig"
            };
            let dm_map = extractor.extract(&raster_to_input(dm_v), Modality::DM)?;
            let dbt_map = extractor.extract(&raster_to_input(dfi_v), Modality::DBT)?;
            let dm_file = format!("{sid}.{variant}.dm.tnsr");
            let dbt_file = format!("{sid}.{variant}.dbt.tnsr");
            export_feature_map(&dm_map, args.out.join(&dm_file))?;
            export_feature_map(&dbt_map, args.out.join(&dbt_file))?;
            index.push(FeatureIndexRow {
                sample_id: format!("{sid}.{variant}"),
                base_id: sid.clone(),
                patient_id: record.patient_id.clone(),
                label: record.label,
                dm_file,
                dbt_file,
            });
        }
        eprintln!("extracted {sid} ({})", record.patient_id);
    }
    write_feature_index(&args.out, &index)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train / predict

fn fold_patients(split_path: &Path, fold: Fold) -> anyhow::Result<HashSet<String>> {
    let split: SplitManifest = serde_json::from_slice(
        &std::fs::read(split_path).with_context(|| format!("reading {}", split_path.display()))?,
    )?;
    Ok(match fold {
        Fold::Train => split.train.into_iter().collect(),
        Fold::Test => split.test.into_iter().collect(),
    })
}

/// Load the classifier input for one index row.
fn load_input(
    featdir: &Path,
    row: &FeatureIndexRow,
    which: WhichClassifier,
) -> anyhow::Result<ndarray::Array4<f64>> {
    let dm = || import_feature_map(featdir.join(&row.dm_file), Modality::DM);
    let dbt = || import_feature_map(featdir.join(&row.dbt_file), Modality::DBT);
    Ok(match which {
        WhichClassifier::Dm => input_from_feature_map(&dm()?),
        WhichClassifier::Dbt => input_from_feature_map(&dbt()?),
        WhichClassifier::Dual => input_from_fused(&concat_modality(&dm()?, &dbt()?)?),
    })
}

fn spec_for(which: WhichClassifier, dim: (usize, usize, usize, usize)) -> ClassifierSpec {
    let (h, w, _, c) = dim;
    match which {
        WhichClassifier::Dm | WhichClassifier::Dbt => ClassifierSpec::single(h, w, c),
        WhichClassifier::Dual => ClassifierSpec::dual(h, w, c),
    }
}

pub fn train(config: &PipelineConfig, args: TrainArgs) -> anyhow::Result<()> {
    let patients = fold_patients(&args.split, Fold::Train)?;
    let index = read_feature_index(&args.features)?;
    let rows: Vec<_> = index
        .iter()
        .filter(|r| patients.contains(&r.patient_id))
        .collect();
    if rows.is_empty() {
        bail!("no training rows: feature index and split do not overlap");
    }
    let mut inputs = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for row in &rows {
        inputs.push(load_input(&args.features, row, args.classifier)?);
        labels.push(row.label);
    }
    let spec = spec_for(args.classifier, inputs[0].dim());
    let cfg = TrainConfig {
        lr: args.lr.unwrap_or(config.train.lr),
        batch_size: args.batch_size.unwrap_or(config.train.batch_size),
        epochs: args.epochs.unwrap_or(config.train.epochs),
        seed: args.seed.unwrap_or(config.train.seed),
        ..Default::default()
    };
    eprintln!(
        "training {:?} classifier on {} samples for {} epochs",
        args.classifier,
        inputs.len(),
        cfg.epochs
    );
    let outcome = classifier::train(&spec, &inputs, &labels, &cfg)?;
    outcome.classifier.save(&args.out)?;

    let mut writer = csv::Writer::from_path(args.out.join("loss.csv"))?;
    writer.write_record(["epoch", "mean_loss"])?;
    for (epoch, loss) in outcome.loss_trace.iter().enumerate() {
        writer.write_record([&(epoch + 1).to_string(), &format!("{loss:.17}")])?;
    }
    writer.flush()?;
    eprintln!(
        "final epoch loss {:.6}; weights in {}",
        outcome.loss_trace.last().unwrap(),
        args.out.display()
    );
    Ok(())
}

pub fn predict(_config: &PipelineConfig, args: PredictArgs) -> anyhow::Result<()> {
    let patients = fold_patients(&args.split, args.fold)?;
    let index = read_feature_index(&args.features)?;
    // Score only the un-augmented variant of each record.
    let rows: Vec<_> = index
        .iter()
        .filter(|r| patients.contains(&r.patient_id) && r.sample_id.ends_with(".orig"))
        .collect();
    if rows.is_empty() {
        bail!("no rows to score in the requested fold");
    }
    let model = Classifier::load(&args.weights)?;
    let mut out_rows = Vec::with_capacity(rows.len());
    for row in &rows {
        let input = load_input(&args.features, row, args.classifier)?;
        let pred = model.predict(&input)?;
        out_rows.push(PredictionRow::new(
            row.base_id.clone(),
            Some(row.label),
            pred.probs,
        ));
    }
    write_prediction_csv(&args.out, &out_rows)?;
    eprintln!(
        "scored {} samples into {}",
        out_rows.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ensemble / evaluate

pub fn ensemble(config: &PipelineConfig, args: EnsembleArgs) -> anyhow::Result<()> {
    let files: Vec<Vec<PredictionRow>> = args
        .inputs
        .iter()
        .map(|p| read_prediction_csv(p).with_context(|| format!("reading {}", p.display())))
        .collect::<anyhow::Result<_>>()?;
    let k = files.len();
    let n = files[0].len();
    for (path, rows) in args.inputs.iter().zip(&files) {
        if rows.len() != n {
            bail!("{} has {} rows, expected {}", path.display(), rows.len(), n);
        }
    }
    let weights = match args
        .weights
        .or_else(|| (!config.ensemble.weights.is_empty()).then(|| config.ensemble.weights.clone()))
    {
        Some(w) => EnsembleConfig::new(w)?,
        None => EnsembleConfig::uniform(k)?,
    };
    if weights.len() != k {
        bail!("{} weights for {} prediction files", weights.len(), k);
    }

    let mut out_rows = Vec::with_capacity(n);
    for i in 0..n {
        let id = &files[0][i].sample_id;
        let mut label = files[0][i].label;
        let mut members = Vec::with_capacity(k);
        for rows in &files {
            let row = &rows[i];
            if &row.sample_id != id {
                bail!(
                    "sample order mismatch at row {i}: {} vs {}",
                    row.sample_id,
                    id
                );
            }
            match (label, row.label) {
                (Some(a), Some(b)) if a != b => {
                    bail!("label mismatch for sample {}", id)
                }
                (None, Some(b)) => label = Some(b),
                _ => {}
            }
            members.push(row.prediction()?);
        }
        let combined = ensemble_predict(&members, &weights)?;
        out_rows.push(PredictionRow::new(id.clone(), label, combined.probs));
    }
    write_prediction_csv(&args.out, &out_rows)?;
    eprintln!(
        "ensembled {k} files ({n} samples) into {}",
        args.out.display()
    );
    Ok(())
}

pub fn evaluate(_config: &PipelineConfig, args: EvaluateArgs) -> anyhow::Result<()> {
    let rows = read_prediction_csv(&args.predictions)?;
    let (scores, labels, confidences) = evaluation_inputs(&rows)?;
    let report = compute_report(&scores, &labels, &confidences)?;
    print!("{}", report_table(&[(args.name.as_str(), &report)]));
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_vec_pretty(&report)?)?;
        eprintln!("report written to {}", out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// demo

pub fn demo(_config: &PipelineConfig, args: DemoArgs) -> anyhow::Result<()> {
    let mut params = DemoParams::default();
    if let Some(n) = args.patients {
        params.n_patients = n;
    }
    if let Some(e) = args.epochs {
        params.epochs = e;
    }
    eprintln!(
        "running synthetic end-to-end demo: {} patients, {} epochs, seed {}",
        params.n_patients, params.epochs, args.seed
    );
    let outcome = run_e2e_synthetic(args.seed, &params)?;
    std::fs::create_dir_all(&args.out)?;
    let reports = [
        ("dm", &outcome.report_dm, &outcome.predictions_dm),
        ("dbt", &outcome.report_dbt, &outcome.predictions_dbt),
        ("dm_dbt", &outcome.report_dual, &outcome.predictions_dual),
        (
            "ensemble",
            &outcome.report_ensemble,
            &outcome.predictions_ensemble,
        ),
    ];
    for (name, report, predictions) in reports {
        std::fs::write(
            args.out.join(format!("report_{name}.json")),
            serde_json::to_vec_pretty(report)?,
        )?;
        write_prediction_csv(
            args.out.join(format!("predictions_{name}.csv")),
            predictions,
        )?;
    }
    print!("{}", report_table(&outcome.named_reports()));
    Ok(())
}
