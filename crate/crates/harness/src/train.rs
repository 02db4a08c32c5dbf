//! Training driver: batching, AdamW updates, per-epoch logging, checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use hyatt_core::checkpoint;
use hyatt_core::heatmap::LandmarkSet;
use hyatt_core::net::HyattNet;
use hyatt_core::nn::{apply_bn_updates, Ctx, ParamStore};
use hyatt_core::optim::AdamW;
use hyatt_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::Similarity;
use crate::config::RunConfig;
use crate::error::{write_bytes, HarnessError, Result};
use crate::evaluate::evaluate;
use crate::manifest::{load_samples, DatasetManifest, Sample};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub iterations: usize,
    /// Mean batch loss over the epoch, computed before each step.
    pub loss: f64,
    pub val_mre: Option<f64>,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,iterations,loss,val_mre\n");
    for e in log {
        let val = e.val_mre.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", e.epoch, e.iterations, e.loss, val);
    }
    s
}

/// Stack samples into `[B,1,H,W]` with their landmarks.
pub fn make_batch(samples: &[&Sample]) -> Result<(Tensor<f32>, Vec<LandmarkSet>)> {
    let shape = samples[0].image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * samples[0].image.len());
    for s in samples {
        data.extend_from_slice(s.image.data());
    }
    let images = Tensor::new(&[samples.len(), shape[0], shape[1], shape[2]], data)?;
    Ok((images, samples.iter().map(|s| s.landmarks.clone()).collect()))
}

/// Training-mode loss without any parameter or statistics update.
pub fn batch_loss(net: &HyattNet, store: &ParamStore<f32>, samples: &[&Sample]) -> Result<f64> {
    let (images, landmarks) = make_batch(samples)?;
    let mut ctx = Ctx::build(store, true, false);
    let loss = net.loss(&mut ctx, &images, &landmarks)?;
    Ok(ctx.tape.value(loss).item() as f64)
}

fn augmented(sample: &Sample, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let s = sample.image.shape();
    let size = [s[1], s[2]];
    let t = Similarity::random(rng, size);
    let image = Tensor::new(s, t.warp(sample.image.data(), size))?;
    let pts = sample.landmarks.points.iter().map(|&p| t.apply(p, size)).collect();
    Ok(Sample {
        image,
        landmarks: LandmarkSet::new(pts, None)?,
        ..sample.clone()
    })
}

pub struct Trained {
    pub net: HyattNet,
    pub store: ParamStore<f32>,
    pub log: Vec<EpochLog>,
    pub iterations: usize,
}

/// Train from a fresh initialisation. `on_epoch` sees each log row as it is produced.
pub fn train(
    cfg: &RunConfig,
    samples: &[Sample],
    val: Option<&[Sample]>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Trained> {
    cfg.validate()?;
    check_samples(cfg, samples)?;
    if let Some(v) = val {
        check_samples(cfg, v)?;
    }
    let m = &cfg.model;
    let (mut net, mut store) = HyattNet::new::<f32>(m)?;
    net.mode = cfg.attention;
    let mut opt = AdamW::new(m.optimizer.clone(), &store);
    let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
    rng.set_stream(2);
    let bs = m.batch_size.min(samples.len());
    let max_iter = cfg.max_iterations.unwrap_or(usize::MAX);

    let val_mre = |net: &HyattNet, store: &ParamStore<f32>| -> Result<Option<f64>> {
        val.map(|v| evaluate(net, store, v, &cfg.sdr_thresholds).map(|r| r.0.mre))
            .transpose()
    };

    let refs: Vec<&Sample> = samples.iter().collect();
    let initial: f64 = {
        let chunks: Vec<_> = refs.chunks(bs).collect();
        let mut total = 0.0;
        for c in &chunks {
            total += batch_loss(&net, &store, c)?;
        }
        total / chunks.len() as f64
    };
    let mut log = vec![EpochLog {
        epoch: 0,
        iterations: 0,
        loss: initial,
        val_mre: val_mre(&net, &store)?,
    }];
    on_epoch(&log[0]);

    let mut iterations = 0;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=m.epochs {
        if iterations >= max_iter {
            break;
        }
        order.shuffle(&mut rng);
        let (mut total, mut steps) = (0.0, 0);
        for chunk in order.chunks(bs) {
            if iterations >= max_iter {
                break;
            }
            let owned: Vec<Sample> = if cfg.augment {
                chunk
                    .iter()
                    .map(|&i| augmented(&samples[i], &mut rng))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let batch: Vec<&Sample> = if cfg.augment {
                owned.iter().collect()
            } else {
                chunk.iter().map(|&i| &samples[i]).collect()
            };
            let (images, landmarks) = make_batch(&batch)?;
            let mut ctx = Ctx::train(&store);
            let loss = net.loss(&mut ctx, &images, &landmarks)?;
            let value = ctx.tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(HarnessError::Config(format!("loss diverged at iteration {iterations}")));
            }
            ctx.tape.backward(loss)?;
            let grads = ctx.param_grads();
            let bn = ctx.take_bn_updates();
            drop(ctx);
            opt.step(&mut store, &grads)?;
            apply_bn_updates(&mut store, &bn);
            total += value;
            steps += 1;
            iterations += 1;
        }
        let row = EpochLog {
            epoch,
            iterations,
            loss: total / steps as f64,
            val_mre: val_mre(&net, &store)?,
        };
        on_epoch(&row);
        log.push(row);
    }
    Ok(Trained {
        net,
        store,
        log,
        iterations,
    })
}

fn check_samples(cfg: &RunConfig, samples: &[Sample]) -> Result<()> {
    let m = &cfg.model;
    if samples.is_empty() {
        return Err(HarnessError::Manifest("no samples".into()));
    }
    for s in samples {
        let sh = s.image.shape();
        if sh[1..] != m.input_size {
            return Err(HarnessError::Manifest(format!(
                "{}: image is {}x{}, model expects {}x{}",
                s.name, sh[1], sh[2], m.input_size[0], m.input_size[1]
            )));
        }
        if s.landmarks.len() != m.num_landmarks {
            return Err(HarnessError::Manifest(format!(
                "{}: {} landmarks, model expects {}",
                s.name,
                s.landmarks.len(),
                m.num_landmarks
            )));
        }
    }
    Ok(())
}

pub const CHECKPOINT_NAME: &str = "checkpoint.bin";
pub const LOG_NAME: &str = "loss.csv";

/// The `train` subcommand: validate everything, train, write outputs.
pub fn run(cfg: &RunConfig, out: &Path, mut progress: impl FnMut(&EpochLog)) -> Result<Trained> {
    cfg.validate()?;
    let manifest = DatasetManifest::read(&cfg.train_manifest)?;
    let samples = load_samples(&manifest, &cfg.train_manifest)?;
    let val = match &cfg.val_manifest {
        Some(p) => Some(load_samples(&DatasetManifest::read(p)?, p)?),
        None => None,
    };
    let trained = train(cfg, &samples, val.as_deref(), &mut progress)?;
    write_bytes(&out.join(LOG_NAME), log_csv(&trained.log).as_bytes())?;
    write_bytes(
        &out.join(CHECKPOINT_NAME),
        &checkpoint::encode(&cfg.model, &trained.store)?,
    )?;
    Ok(trained)
}
