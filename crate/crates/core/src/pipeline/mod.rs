//! Three-stage training, inference and evaluation.

pub mod checkpoint;
pub mod config;
mod reference;
pub mod selftest;

use std::path::PathBuf;

use rcad_tensor::{par, Exec, Tensor};

pub use checkpoint::{store_hash, Checkpoint};
pub use config::{DataSource, PipelineConfig, Preset, SynthSettings};

use crate::crd::{self, detection_volume};
use crate::dataio::{resize_bilinear, DatasetIndex};
use crate::dpn::{self, batch1};
use crate::error::{Error, Result};
use crate::metrics::{self, AnomalyMap, EvalReport, ScoredImage};
use crate::rcae::{self, RcaeModel, Stage1Config};
use crate::train::EpochLoss;
use checkpoint::streams;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub exec: Exec,
    /// Writes `checkpoint_stage{k}.rcad` after each stage when set.
    pub out_dir: Option<PathBuf>,
    /// Stops once this stage has completed.
    pub stop_after: Option<u8>,
}

/// Trains all stages from scratch.
pub fn run_training(
    config: PipelineConfig,
    data: &DatasetIndex,
    opts: &RunOptions,
    log: &mut dyn FnMut(EpochLoss),
) -> Result<Checkpoint> {
    config.validate()?;
    resume_training(Checkpoint::initialize(config)?, data, opts, log)
}

/// Runs the stages after `ckpt.stage_completed`, verifying after each that
/// earlier stages' parameters are untouched.
pub fn resume_training(
    mut ckpt: Checkpoint,
    data: &DatasetIndex,
    opts: &RunOptions,
    log: &mut dyn FnMut(EpochLoss),
) -> Result<Checkpoint> {
    let images = training_images(&ckpt.config, data)?;
    let last = opts.stop_after.unwrap_or(3).min(3);
    while ckpt.stage_completed < last {
        let stage = ckpt.stage_completed + 1;
        let before = (ckpt.rcae_hash(), ckpt.dpn_hash());
        let cfg = ckpt.config.clone();
        let mut rng = cfg.rng(streams::STAGE[stage as usize - 1]);
        let result = match stage {
            1 => rcae::train_stage1(&mut ckpt.rcae, &images, &cfg.stage1(opts.exec), &mut rng, log),
            2 => {
                ckpt.rcae.store.set_trainable(false);
                dpn::train_stage2(&mut ckpt.dpn, &ckpt.rcae, &images, &cfg.stage2(opts.exec), &mut rng, log)
            }
            _ => {
                ckpt.dpn.store.set_trainable(false);
                crd::train_stage3(
                    &mut ckpt.crd,
                    &ckpt.rcae,
                    &ckpt.dpn,
                    &images,
                    &cfg.stage3(opts.exec),
                    &mut rng,
                    log,
                )
            }
        };
        result.map_err(|e| e.context(format!("stage {stage}")))?;
        if stage >= 2 && ckpt.rcae_hash() != before.0 {
            return Err(Error::Checkpoint(format!("stage {stage} modified the RcAE parameters")));
        }
        if stage >= 3 && ckpt.dpn_hash() != before.1 {
            return Err(Error::Checkpoint(format!("stage {stage} modified the DPN parameters")));
        }
        ckpt.stage_completed = stage;
        if let Some(dir) = &opts.out_dir {
            ckpt.save(&dir.join(format!("checkpoint_stage{stage}.rcad")))?;
        }
    }
    Ok(ckpt)
}

fn training_images(config: &PipelineConfig, data: &DatasetIndex) -> Result<Vec<Tensor>> {
    let images = data.train_images();
    if images.is_empty() {
        return Err(Error::Usage("dataset has no training images".into()));
    }
    images.iter().map(|i| fit_resolution(i, config.resolution)).collect()
}

fn fit_resolution(img: &Tensor, res: usize) -> Result<Tensor> {
    match *img.shape() {
        [3, h, w] if h == res && w == res => Ok(img.clone()),
        [3, _, _] => resize_bilinear(img, res, res),
        _ => Err(Error::Usage(format!("expected a 3×H×W image, got {:?}", img.shape()))),
    }
}

fn require_complete(ckpt: &Checkpoint) -> Result<()> {
    if ckpt.stage_completed < 3 {
        return Err(Error::Usage(format!(
            "checkpoint completed stage {} of 3; inference needs all three",
            ckpt.stage_completed
        )));
    }
    Ok(())
}

/// Anomaly map of one C×H×W image from the full pipeline.
pub fn infer_one(ckpt: &Checkpoint, image: &Tensor) -> Result<AnomalyMap> {
    require_complete(ckpt)?;
    let x = batch1(&fit_resolution(image, ckpt.config.resolution)?)?;
    let volume = detection_volume(&ckpt.rcae, &ckpt.dpn, &x, &ckpt.crd.config.steps)?;
    AnomalyMap::new(ckpt.crd.forward(&volume)?, ckpt.config.k_fraction)
}

/// Anomaly maps of C×H×W images, in input order.
pub fn run_inference(ckpt: &Checkpoint, images: &[Tensor], exec: Exec) -> Result<Vec<AnomalyMap>> {
    require_complete(ckpt)?;
    par::try_map(exec, images, |img| infer_one(ckpt, img))
}

/// Which signal produces the anomaly map during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreSource {
    /// Detector output.
    Full,
    /// `|I − R_N|` averaged over channels.
    RcaeResidual,
    /// `|I − I_D^N|` averaged over channels.
    DpnResidual,
}

/// Channel-mean absolute difference of two 1×C×H×W tensors as 1×1×H×W.
pub fn residual_map(input: &Tensor, recon: &Tensor) -> Result<Tensor> {
    let diff = input.zip_map(recon, |a, b| (a - b).abs())?;
    let [1, c, h, w] = *diff.shape() else {
        return Err(Error::Usage(format!("expected 1×C×H×W, got {:?}", diff.shape())));
    };
    let plane = h * w;
    let d = diff.data();
    let data = (0..plane)
        .map(|i| (0..c).map(|ch| d[ch * plane + i]).sum::<f32>() / c as f32)
        .collect();
    Ok(Tensor::new(&[1, 1, h, w], data)?)
}

fn quality(input: &Tensor, recon: &Tensor) -> Result<(f64, f64)> {
    Ok((metrics::ssim(recon, input)?, metrics::psnr(recon, input)?))
}

/// Map plus the final reconstruction used for quality metrics.
fn score_image(ckpt: &Checkpoint, source: ScoreSource, image: &Tensor) -> Result<(AnomalyMap, Tensor, Tensor)> {
    let x = batch1(&fit_resolution(image, ckpt.config.resolution)?)?;
    let depth = ckpt.config.depth;
    let recon = ckpt.rcae.reconstruction(&x, depth)?;
    let detail = ckpt.dpn.forward(&recon, &x)?.1;
    let map = match source {
        ScoreSource::RcaeResidual => residual_map(&x, &recon)?,
        ScoreSource::DpnResidual => residual_map(&x, &detail)?,
        ScoreSource::Full => {
            require_complete(ckpt)?;
            ckpt.crd.forward(&detection_volume(&ckpt.rcae, &ckpt.dpn, &x, &ckpt.crd.config.steps)?)?
        }
    };
    let final_recon = if source == ScoreSource::RcaeResidual { recon } else { detail };
    Ok((AnomalyMap::new(map, ckpt.config.k_fraction)?, x, final_recon))
}

fn collect_report<F>(data: &DatasetIndex, k_fraction: f32, exec: Exec, score: F) -> Result<EvalReport>
where
    F: Fn(&Tensor) -> Result<(AnomalyMap, Tensor, Tensor)> + Sync + Send,
{
    let tests: Vec<_> = data.test_samples().collect();
    if tests.is_empty() {
        return Err(Error::Usage("dataset has no test images".into()));
    }
    let scored = par::try_map(exec, &tests, |&(category, s)| {
        let (map, x, recon) = score(&s.image).map_err(|e| e.context(s.id.clone()))?;
        let quality = if s.label { None } else { Some(quality(&x, &recon)?) };
        let mask = match &s.mask {
            Some(m) if m.len() != map.scores.len() => {
                let [_, h, w] = *m.shape() else { unreachable!("masks are 1×H×W") };
                let side = (map.scores.len() as f64).sqrt() as usize;
                Some(nearest_mask(m, h, w, side))
            }
            other => other.clone(),
        };
        Ok::<_, Error>(ScoredImage {
            id: s.id.clone(),
            category: category.to_string(),
            label: s.label,
            map,
            mask,
            quality,
        })
    })?;
    metrics::summarize(&scored, k_fraction)
}

fn nearest_mask(m: &Tensor, h: usize, w: usize, side: usize) -> Tensor {
    let d = m.data();
    let data = (0..side * side)
        .map(|i| d[(i / side) * h / side * w + (i % side) * w / side])
        .collect();
    Tensor::new(&[1, side, side], data).expect("side × side")
}

/// Evaluates the full pipeline on the dataset's test split.
pub fn evaluate(ckpt: &Checkpoint, data: &DatasetIndex, exec: Exec) -> Result<EvalReport> {
    evaluate_with(ckpt, data, ScoreSource::Full, exec)
}

pub fn evaluate_with(ckpt: &Checkpoint, data: &DatasetIndex, source: ScoreSource, exec: Exec) -> Result<EvalReport> {
    if source != ScoreSource::Full && ckpt.stage_completed < 1 {
        return Err(Error::Usage("residual scoring needs a trained RcAE".into()));
    }
    collect_report(data, ckpt.config.k_fraction, exec, |img| score_image(ckpt, source, img))
}

/// Trains the plain autoencoder baseline on clean images at full depth.
pub fn train_baseline(
    config: &PipelineConfig,
    data: &DatasetIndex,
    exec: Exec,
    log: &mut dyn FnMut(EpochLoss),
) -> Result<RcaeModel> {
    config.validate()?;
    let images = training_images(config, data)?;
    let mut model = rcae::build_convae_baseline(&config.rcae_config(), &mut config.rng(streams::BASELINE))?;
    let cfg = Stage1Config {
        corrupt_probability: 0.0,
        random_depth: false,
        ..config.stage1(exec)
    };
    let mut rng = config.rng(streams::STAGE[0]);
    rcae::train_stage1(&mut model, &images, &cfg, &mut rng, log)?;
    Ok(model)
}

/// Evaluates a baseline autoencoder by its reconstruction residual.
pub fn evaluate_baseline(
    model: &RcaeModel,
    config: &PipelineConfig,
    data: &DatasetIndex,
    exec: Exec,
) -> Result<EvalReport> {
    collect_report(data, config.k_fraction, exec, |img| {
        let x = batch1(&fit_resolution(img, config.resolution)?)?;
        let recon = model.forward(&x, model.config.max_depth)?;
        let map = AnomalyMap::new(residual_map(&x, &recon)?, config.k_fraction)?;
        Ok((map, x, recon))
    })
}
