//! Run configuration: every knob of generation, training and evaluation in
//! one TOML-serializable structure. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::PolarGridSpec;
use crate::error::{Error, Result};
use crate::eval::IouOptions;
use crate::losses::LossConfig;
use crate::nn::{CameraWidths, FusionMode, Geometry, ModelConfig, RadarWidths, Tasks, CANONICAL_WIDTH_MULT};
use crate::synth::{CameraIntrinsics, RadarConfig, SceneConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// Multiplicative step-size decay applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_decay: 0.9,
            decay_every: 10,
            batch_size: 4,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    /// Step size used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every.max(1)) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Parameter initialization.
    pub model: u64,
    /// Dataset generation.
    pub data: u64,
    /// Epoch shuffling.
    pub shuffle: u64,
    /// Latent noise draws during training.
    pub sampling: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            model: 0,
            data: 0,
            shuffle: 1,
            sampling: 2,
        }
    }
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            model: seed,
            data: seed,
            shuffle: seed.wrapping_add(1),
            sampling: seed.wrapping_add(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Total frames across all splits.
    pub frames: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub scene: SceneConfig,
    pub noise_sigma: f64,
    pub rx_spacing: f64,
    pub doppler_res_mps: f64,
    pub amplitude: f64,
    pub horizontal_fov_deg: f64,
    pub camera_height_m: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            frames: 100,
            split: [0.7, 0.15, 0.15],
            scene: SceneConfig::default(),
            noise_sigma: 0.05,
            rx_spacing: 0.5,
            doppler_res_mps: 0.1,
            amplitude: 1.0,
            horizontal_fov_deg: 100.0,
            camera_height_m: 1.6,
        }
    }
}

impl DataConfig {
    /// Frame counts per split, rounding the cumulative boundaries.
    pub fn split_counts(&self) -> Result<[usize; 3]> {
        let total: f64 = self.split.iter().sum();
        if self.split.iter().any(|&f| !(f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::config("split fractions must be non-negative and sum to 1"));
        }
        let n = self.frames as f64;
        let b1 = ((n * self.split[0]).round() as usize).min(self.frames);
        let b2 = ((n * (self.split[0] + self.split[1])).round() as usize).clamp(b1, self.frames);
        Ok([b1, b2 - b1, self.frames - b2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Write a checkpoint every this many epochs (and always at the end).
    pub checkpoint_every: usize,
    /// Frames read ahead by the loader thread; 0 loads inline.
    pub prefetch: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
    /// Train on the first `max_frames` frames of the split only.
    pub max_frames: Option<usize>,
    pub shuffle: bool,
    /// Chebyshev radius of the positive blob marked around each label in
    /// the training targets. Evaluation always uses single cells.
    pub target_dilation: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            checkpoint_every: 10,
            prefetch: 2,
            max_steps: None,
            max_frames: None,
            shuffle: true,
            target_dilation: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    pub miou: IouOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.2,
            iou_threshold: 0.5,
            miou: IouOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset root holding `train/`, `val/` and `test/`.
    pub dataset: PathBuf,
    /// Checkpoints and the training log go here.
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            output: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: FusionMode,
    pub tasks: Tasks,
    /// Sample the latent code during training; off uses the mean only.
    pub variational: bool,
    pub width_mult: f64,
    pub geometry: Geometry,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub seeds: Seeds,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Fusion,
            tasks: Tasks::Multitask,
            variational: true,
            width_mult: CANONICAL_WIDTH_MULT,
            geometry: Geometry::canonical(),
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            seeds: Seeds::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from_io(e, path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if !(self.width_mult > 0.0) {
            return Err(Error::config("width_mult must be positive"));
        }
        let o = &self.optimizer;
        if o.batch_size == 0 || !(o.lr > 0.0) || !(o.lr_decay > 0.0) {
            return Err(Error::config("batch_size, lr and lr_decay must be positive"));
        }
        let l = &self.loss;
        let weights = [l.alpha, l.beta, l.focal_gamma, l.focal_alpha, l.kl_weight];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        self.data.split_counts()?;
        self.radar_config().validate()?;
        self.data.scene.validate(&[self.detection_grid()])?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            geometry: self.geometry.clone(),
            radar: RadarWidths::scaled(self.width_mult),
            camera: CameraWidths::default(),
            mode: self.mode,
            tasks: self.tasks,
            variational: self.variational,
        }
    }

    pub fn detection_grid(&self) -> PolarGridSpec {
        self.geometry.detection_grid()
    }

    pub fn segmentation_grid(&self) -> PolarGridSpec {
        self.geometry.segmentation_grid()
    }

    /// Radar simulation matching the network input extents; the range axis
    /// always spans the detection grid's coverage.
    pub fn radar_config(&self) -> RadarConfig {
        let g = &self.geometry;
        RadarConfig {
            n_tx: g.n_tx,
            n_rx: g.rx_channels,
            range_bins: g.range_bins,
            d_max: g.doppler_bins,
            delta: g.delta,
            rx_spacing: self.data.rx_spacing,
            noise_sigma: self.data.noise_sigma,
            range_res_m: self.detection_grid().range_max() / g.range_bins as f64,
            doppler_res_mps: self.data.doppler_res_mps,
            amplitude: self.data.amplitude,
            rng_seed: self.seeds.data,
        }
    }

    pub fn camera_intrinsics(&self) -> CameraIntrinsics {
        let (h, w) = (self.geometry.image_height, self.geometry.image_width);
        let fx = (w as f64 / 2.0) / (self.data.horizontal_fov_deg / 2.0).to_radians().tan();
        CameraIntrinsics {
            width: w,
            height: h,
            fx,
            fy: fx,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            mount_height: self.data.camera_height_m,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.optimizer.lr, 1e-4);
        assert_eq!(c.optimizer.batch_size, 4);
        assert_eq!(c.optimizer.epochs, 100);
        assert_eq!(c.data.split_counts().unwrap(), [70, 15, 15]);
        let canon = crate::synth::RadarConfig::default();
        let derived = c.radar_config();
        assert_eq!(derived.range_bins, canon.range_bins);
        assert!((derived.range_res_m - canon.range_res_m).abs() < 1e-12);
        assert_eq!(c.camera_intrinsics(), CameraIntrinsics::default());
        c.validate().unwrap();
    }

    #[test]
    fn lr_schedule_steps_every_ten_epochs() {
        let o = OptimizerConfig::default();
        assert_eq!(o.lr_at(0), 1e-4);
        assert_eq!(o.lr_at(9), 1e-4);
        assert!((o.lr_at(10) - 0.9e-4).abs() < 1e-18);
        assert!((o.lr_at(25) - 1e-4 * 0.81).abs() < 1e-18);
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        let partial = RunConfig::from_toml("mode = \"camera_only\"\n[optimizer]\nepochs = 3\n").unwrap();
        assert_eq!(partial.mode, FusionMode::CameraOnly);
        assert_eq!(partial.optimizer.epochs, 3);
        assert_eq!(partial.optimizer.lr, 1e-4);
        assert!(matches!(RunConfig::from_toml("bogus = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[optimizer]\nlearning_rate = 1\n"), Err(Error::Config(_))));
    }
}
