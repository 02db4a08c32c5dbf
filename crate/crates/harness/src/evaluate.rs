//! Evaluation: batched prediction, radial errors in the original image
//! frame, and report files.

use std::fmt::Write as _;
use std::path::Path;

use hyatt_core::heatmap::{mre, EvalReport, LandmarkSet};
use hyatt_core::net::HyattNet;
use hyatt_core::nn::ParamStore;
use serde::Serialize;

use crate::error::{write_bytes, HarnessError, Result};
use crate::manifest::{load_samples, DatasetManifest, Sample};
use crate::train::make_batch;

const EVAL_BATCH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SamplePrediction {
    pub image: String,
    /// Original image frame.
    pub predicted: Vec<[f64; 2]>,
    pub ground_truth: Vec<[f64; 2]>,
    pub radial_errors: Vec<f64>,
}

/// Predicted landmarks in the target frame, one set per sample.
pub fn predict(net: &HyattNet, store: &ParamStore<f32>, samples: &[Sample]) -> Result<Vec<LandmarkSet>> {
    let mut out = Vec::with_capacity(samples.len());
    let refs: Vec<&Sample> = samples.iter().collect();
    for chunk in refs.chunks(EVAL_BATCH) {
        let (images, _) = make_batch(chunk)?;
        out.extend(net.predict(store, &images)?);
    }
    Ok(out)
}

/// Radial errors for target-frame predictions, pooled into a report.
pub fn score(
    samples: &[Sample],
    predicted: &[LandmarkSet],
    thresholds: &[f64],
) -> Result<(EvalReport, Vec<SamplePrediction>)> {
    let physical = samples[0].spacing_mm.is_some();
    if samples.iter().any(|s| s.spacing_mm.is_some() != physical) {
        return Err(HarnessError::Manifest(
            "spacing_mm must be given for all samples or for none".into(),
        ));
    }
    let mut pooled = Vec::new();
    let mut per_sample = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(predicted) {
        let pred = LandmarkSet::new(s.to_original(&p.points), s.spacing_mm)?;
        let gt = LandmarkSet::new(s.to_original(&s.landmarks.points), s.spacing_mm)?;
        let r = mre(&pred, &gt)?;
        pooled.extend_from_slice(&r.per_point);
        per_sample.push(SamplePrediction {
            image: s.name.clone(),
            predicted: pred.points,
            ground_truth: gt.points,
            radial_errors: r.per_point,
        });
    }
    Ok((EvalReport::from_errors(pooled, physical, thresholds), per_sample))
}

pub fn evaluate(
    net: &HyattNet,
    store: &ParamStore<f32>,
    samples: &[Sample],
    thresholds: &[f64],
) -> Result<(EvalReport, Vec<SamplePrediction>)> {
    let predicted = predict(net, store, samples)?;
    score(samples, &predicted, thresholds)
}

pub fn check_compatible(net: &HyattNet, manifest: &DatasetManifest) -> Result<()> {
    let cfg = &net.cfg;
    if manifest.num_landmarks != cfg.num_landmarks {
        return Err(HarnessError::Manifest(format!(
            "manifest has {} landmarks, checkpoint predicts {}",
            manifest.num_landmarks, cfg.num_landmarks
        )));
    }
    if manifest.target_size != cfg.input_size {
        return Err(HarnessError::Manifest(format!(
            "manifest target_size {:?} differs from checkpoint input_size {:?}",
            manifest.target_size, cfg.input_size
        )));
    }
    Ok(())
}

pub fn per_point_csv(preds: &[SamplePrediction]) -> String {
    let mut s = String::from("image,landmark,pred_x,pred_y,gt_x,gt_y,radial_error\n");
    for p in preds {
        for (i, r) in p.radial_errors.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                p.image, i, p.predicted[i][0], p.predicted[i][1], p.ground_truth[i][0], p.ground_truth[i][1], r
            );
        }
    }
    s
}

/// The `eval` subcommand.
pub fn run(checkpoint_path: &Path, manifest_path: &Path, out: &Path, thresholds: &[f64]) -> Result<EvalReport> {
    crate::config::validate_thresholds(thresholds)?;
    let (net, store) = hyatt_core::checkpoint::restore(&crate::error::read_bytes(checkpoint_path)?)?;
    let manifest = DatasetManifest::read(manifest_path)?;
    check_compatible(&net, &manifest)?;
    let samples = load_samples(&manifest, manifest_path)?;
    let (report, preds) = evaluate(&net, &store, &samples, thresholds)?;
    write_bytes(&out.join("sdr.csv"), report.sdr_csv().as_bytes())?;
    write_bytes(&out.join("summary.csv"), report.summary_csv().as_bytes())?;
    write_bytes(&out.join("per_point.csv"), per_point_csv(&preds).as_bytes())?;
    Ok(report)
}
