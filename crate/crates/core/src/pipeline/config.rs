//! Pipeline configuration and its flat `key = value` text form.
//!
//! Every field has one key; unknown keys, duplicate keys and ill-typed values
//! are rejected. `#` starts a comment.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rcad_tensor::{Adam, Exec};

use crate::augment::AugmentConfig;
use crate::crd::{self, CrdConfig, Stage3Config};
use crate::dataio::{self, DatasetIndex, SynthSpec, Texture};
use crate::dpn::Stage2Config;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_K_FRACTION;
use crate::rcae::{RcaeConfig, Stage1Config};
use crate::train::TrainOptions;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    pub textures: Vec<Texture>,
    pub train_count: usize,
    pub test_count: usize,
    pub period: usize,
    pub min_anomaly_pixels: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let s = SynthSpec::default();
        SynthSettings {
            textures: s.textures,
            train_count: s.train_count,
            test_count: s.test_count,
            period: s.period,
            min_anomaly_pixels: s.min_anomaly_pixels,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Folder(PathBuf),
    Synthetic(SynthSettings),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// 64², N = 3, 30/10/10 epochs on synthetic stripes and checkerboards.
    Desk,
    /// N = 5 at 1024², 1500/400/300 epochs.
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk, paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub depth: usize,
    pub resolution: usize,
    pub hidden_width: usize,
    pub epochs: [usize; 3],
    pub batch_size: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub k_fraction: f32,
    pub seed: u64,
    pub data: DataSource,
    pub augment: AugmentConfig,
    pub stage1_corrupt_probability: f32,
    pub stage3_clean_fraction: f32,
    pub cross_skips: bool,
    pub weight_sharing: bool,
    pub intermediate_trace: bool,
    /// `None` feeds every depth to the detector.
    pub crd_steps: Option<Vec<usize>>,
    pub crd_width: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let adam = Adam::default();
        PipelineConfig {
            depth: 5,
            resolution: 128,
            hidden_width: 32,
            epochs: [1500, 400, 300],
            batch_size: 4,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            k_fraction: DEFAULT_K_FRACTION,
            seed: 7,
            data: DataSource::Synthetic(SynthSettings::default()),
            augment: AugmentConfig::default(),
            stage1_corrupt_probability: 1.0,
            stage3_clean_fraction: 0.1,
            cross_skips: false,
            weight_sharing: true,
            intermediate_trace: false,
            crd_steps: None,
            crd_width: 8,
        }
    }
}

impl PipelineConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => PipelineConfig {
                depth: 3,
                resolution: 64,
                epochs: [30, 10, 10],
                lr: 1e-3,
                augment: AugmentConfig {
                    reference_resolution: 256,
                    ..AugmentConfig::default()
                },
                ..PipelineConfig::default()
            },
            Preset::Paper => PipelineConfig {
                resolution: 1024,
                ..PipelineConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.depth > 8 {
            return bad(format!("depth {} outside [1, 8]", self.depth));
        }
        if self.resolution == 0 || !self.resolution.is_multiple_of(1 << self.depth) {
            return bad(format!(
                "resolution {} is not divisible by 2^{}",
                self.resolution, self.depth
            ));
        }
        if !self.resolution.is_multiple_of(crd::SPATIAL_FACTOR) {
            return bad(format!(
                "resolution {} is not divisible by {}",
                self.resolution,
                crd::SPATIAL_FACTOR
            ));
        }
        if self.epochs.contains(&0) {
            return bad("every stage needs at least one epoch".into());
        }
        if self.batch_size == 0 || self.hidden_width == 0 || self.crd_width == 0 {
            return bad("batch size and widths must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad("lr and eps must be positive".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} = {b} outside [0, 1)"));
            }
        }
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return bad(format!("k_fraction {} outside (0, 1]", self.k_fraction));
        }
        for (name, p) in [
            ("stage1_corrupt_probability", self.stage1_corrupt_probability),
            ("stage3_clean_fraction", self.stage3_clean_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if let Some(steps) = &self.crd_steps {
            crd::validate_steps(steps, self.depth)?;
        }
        if let DataSource::Synthetic(s) = &self.data {
            if s.textures.is_empty() || s.train_count == 0 {
                return bad("synthetic data needs a texture and training images".into());
            }
        }
        self.augment.validate()
    }

    pub fn steps(&self) -> Vec<usize> {
        self.crd_steps.clone().unwrap_or_else(|| (1..=self.depth).collect())
    }

    pub fn adam(&self) -> Adam {
        Adam {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn rcae_config(&self) -> RcaeConfig {
        RcaeConfig {
            channels: 3,
            hidden_width: self.hidden_width,
            max_depth: self.depth,
            weight_sharing: self.weight_sharing,
            unit_skips: true,
            cross_skips: self.cross_skips,
            intermediate_trace: self.intermediate_trace,
        }
    }

    pub fn crd_config(&self) -> CrdConfig {
        CrdConfig {
            channels: 3,
            width: self.crd_width,
            steps: self.steps(),
        }
    }

    fn train_options(&self, stage: usize, exec: Exec) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs[stage - 1],
            batch_size: self.batch_size,
            adam: self.adam(),
            exec,
        }
    }

    pub fn stage1(&self, exec: Exec) -> Stage1Config {
        Stage1Config {
            train: self.train_options(1, exec),
            augment: self.augment.clone(),
            corrupt_probability: self.stage1_corrupt_probability,
            random_depth: true,
        }
    }

    pub fn stage2(&self, exec: Exec) -> Stage2Config {
        Stage2Config {
            train: self.train_options(2, exec),
        }
    }

    pub fn stage3(&self, exec: Exec) -> Stage3Config {
        Stage3Config {
            train: self.train_options(3, exec),
            augment: self.augment.clone(),
            clean_batch_fraction: self.stage3_clean_fraction,
        }
    }

    pub fn synth_spec(&self, s: &SynthSettings) -> SynthSpec {
        SynthSpec {
            textures: s.textures.clone(),
            resolution: self.resolution,
            train_count: s.train_count,
            test_count: s.test_count,
            period: s.period,
            seed: self.seed,
            augment: AugmentConfig {
                clean_probability: 0.0,
                ..self.augment.clone()
            },
            min_anomaly_pixels: s.min_anomaly_pixels,
        }
    }

    /// Loads or generates the configured dataset at the configured resolution.
    pub fn load_data(&self) -> Result<DatasetIndex> {
        match &self.data {
            DataSource::Folder(p) => dataio::load_dataset(p, self.resolution),
            DataSource::Synthetic(s) => dataio::generate_synthetic(&self.synth_spec(s)),
        }
    }

    /// Independent rng stream for one consumer of the seed.
    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        kv("depth", self.depth.to_string());
        kv("resolution", self.resolution.to_string());
        kv("hidden_width", self.hidden_width.to_string());
        for (i, e) in self.epochs.iter().enumerate() {
            kv(&format!("epochs_stage{}", i + 1), e.to_string());
        }
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("eps", self.eps.to_string());
        kv("k_fraction", self.k_fraction.to_string());
        kv("seed", self.seed.to_string());
        match &self.data {
            DataSource::Folder(p) => kv("data", p.display().to_string()),
            DataSource::Synthetic(s) => {
                kv("data", "synthetic".into());
                let names: Vec<_> = s.textures.iter().map(|t| t.name()).collect();
                kv("synth.textures", names.join(","));
                kv("synth.train_count", s.train_count.to_string());
                kv("synth.test_count", s.test_count.to_string());
                kv("synth.period", s.period.to_string());
                kv("synth.min_anomaly_pixels", s.min_anomaly_pixels.to_string());
            }
        }
        let a = &self.augment;
        kv("augment.block_sizes", list(&a.block_sizes));
        kv("augment.reference_resolution", a.reference_resolution.to_string());
        kv("augment.coverage_min", a.coverage.0.to_string());
        kv("augment.coverage_max", a.coverage.1.to_string());
        kv("augment.line_count_min", a.line_count.0.to_string());
        kv("augment.line_count_max", a.line_count.1.to_string());
        kv("augment.line_length_min", a.line_length.0.to_string());
        kv("augment.line_length_max", a.line_length.1.to_string());
        kv("augment.line_width_min", a.line_width.0.to_string());
        kv("augment.line_width_max", a.line_width.1.to_string());
        kv("augment.clean_probability", a.clean_probability.to_string());
        kv("stage1_corrupt_probability", self.stage1_corrupt_probability.to_string());
        kv("stage3_clean_fraction", self.stage3_clean_fraction.to_string());
        kv("cross_skips", self.cross_skips.to_string());
        kv("weight_sharing", self.weight_sharing.to_string());
        kv("intermediate_trace", self.intermediate_trace.to_string());
        kv(
            "crd_steps",
            self.crd_steps.as_deref().map_or_else(|| "all".into(), list),
        );
        kv("crd_width", self.crd_width.to_string());
        out
    }

    /// Applies the assignments in `text` on top of `self` and validates.
    pub fn apply_text(mut self, text: &str) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {key}: {e}", lineno + 1)))?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        PipelineConfig::default().apply_text(text)
    }

    fn synth_mut(&mut self) -> std::result::Result<&mut SynthSettings, String> {
        match &mut self.data {
            DataSource::Synthetic(s) => Ok(s),
            DataSource::Folder(_) => Err("only valid with data = synthetic".into()),
        }
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse {v:?}"))
        }
        fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
            v.split(',').map(|s| num(s.trim())).collect()
        }
        match key {
            "depth" => self.depth = num(v)?,
            "resolution" => self.resolution = num(v)?,
            "hidden_width" => self.hidden_width = num(v)?,
            "epochs_stage1" => self.epochs[0] = num(v)?,
            "epochs_stage2" => self.epochs[1] = num(v)?,
            "epochs_stage3" => self.epochs[2] = num(v)?,
            "batch_size" => self.batch_size = num(v)?,
            "lr" => self.lr = num(v)?,
            "beta1" => self.beta1 = num(v)?,
            "beta2" => self.beta2 = num(v)?,
            "eps" => self.eps = num(v)?,
            "k_fraction" => self.k_fraction = num(v)?,
            "seed" => self.seed = num(v)?,
            "data" => {
                self.data = if v == "synthetic" {
                    match &self.data {
                        DataSource::Synthetic(_) => self.data.clone(),
                        DataSource::Folder(_) => DataSource::Synthetic(SynthSettings::default()),
                    }
                } else {
                    DataSource::Folder(PathBuf::from(v))
                }
            }
            "synth.textures" => {
                let t = v
                    .split(',')
                    .map(Texture::parse)
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| e.to_string())?;
                self.synth_mut()?.textures = t;
            }
            "synth.train_count" => self.synth_mut()?.train_count = num(v)?,
            "synth.test_count" => self.synth_mut()?.test_count = num(v)?,
            "synth.period" => self.synth_mut()?.period = num(v)?,
            "synth.min_anomaly_pixels" => self.synth_mut()?.min_anomaly_pixels = num(v)?,
            "augment.block_sizes" => self.augment.block_sizes = list(v)?,
            "augment.reference_resolution" => self.augment.reference_resolution = num(v)?,
            "augment.coverage_min" => self.augment.coverage.0 = num(v)?,
            "augment.coverage_max" => self.augment.coverage.1 = num(v)?,
            "augment.line_count_min" => self.augment.line_count.0 = num(v)?,
            "augment.line_count_max" => self.augment.line_count.1 = num(v)?,
            "augment.line_length_min" => self.augment.line_length.0 = num(v)?,
            "augment.line_length_max" => self.augment.line_length.1 = num(v)?,
            "augment.line_width_min" => self.augment.line_width.0 = num(v)?,
            "augment.line_width_max" => self.augment.line_width.1 = num(v)?,
            "augment.clean_probability" => self.augment.clean_probability = num(v)?,
            "stage1_corrupt_probability" => self.stage1_corrupt_probability = num(v)?,
            "stage3_clean_fraction" => self.stage3_clean_fraction = num(v)?,
            "cross_skips" => self.cross_skips = num(v)?,
            "weight_sharing" => self.weight_sharing = num(v)?,
            "intermediate_trace" => self.intermediate_trace = num(v)?,
            "crd_steps" => self.crd_steps = if v == "all" { None } else { Some(list(v)?) },
            "crd_width" => self.crd_width = num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }
}
