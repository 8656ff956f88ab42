//! Network definition. Layers run on `candle` tensors so the same model can be
//! instantiated in single precision for training and in double precision for
//! gradient checks.

pub mod camera;
mod conv;
mod norm;
pub mod heads;
pub mod layers;
pub mod radar;

use candle_core::{DType, Tensor};
use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use camera::{reparameterize, CameraNet, CameraOutputs, LatentDistribution, LatentSampling, SkipAlign};
pub use heads::{DetectionHead, SegmentationHead, DETECTION_FILTERS, SEGMENTATION_WIDTHS};
pub use layers::{bilinear_resize, swap_channel_width, ParamStore, Phase};
pub use radar::{rearrange_complex, restore_complex, MimoPreEncoder, RadarNet, RadarOutputs, RadarPyramid};

use crate::datamodel::PolarGridSpec;
use crate::error::{Error, Result};

/// Residual layers per encoder block, shared by both branches.
pub const ENCODER_DEPTHS: [usize; 4] = [3, 6, 6, 3];

/// Input and output extents of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub rx_channels: usize,
    pub range_bins: usize,
    pub doppler_bins: usize,
    pub n_tx: usize,
    pub delta: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub azimuth_bins: usize,
    pub latent_dim: usize,
    /// Side of the square seed map the latent code is reshaped into.
    pub seed_side: usize,
}

impl Geometry {
    pub fn canonical() -> Self {
        Self {
            rx_channels: 16,
            range_bins: 512,
            doppler_bins: 256,
            n_tx: 12,
            delta: 16,
            image_height: 270,
            image_width: 480,
            azimuth_bins: 224,
            latent_dim: 512,
            seed_side: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.range_bins % 16 != 0 || self.doppler_bins % 16 != 0 || self.range_bins == 0 || self.doppler_bins == 0 {
            return Err(Error::config("range and Doppler bins must be positive multiples of 16"));
        }
        if self.delta == 0 || self.n_tx * self.delta > self.doppler_bins {
            return Err(Error::config("n_tx * delta must fit the Doppler axis"));
        }
        let side = self.seed_side;
        if side == 0 || self.latent_dim % (side * side) != 0 {
            return Err(Error::config("latent_dim must be a multiple of seed_side^2"));
        }
        if self.image_height < 16 || self.image_width < 16 || self.azimuth_bins == 0 || self.rx_channels == 0 {
            return Err(Error::config("image must be at least 16x16"));
        }
        Ok(())
    }

    /// Spatial size of camera pyramid level `level` (0 = pre-encoder).
    pub fn camera_level_hw(&self, level: usize) -> (usize, usize) {
        let (mut h, mut w) = (self.image_height, self.image_width);
        for _ in 0..level {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }

    /// Side of the square camera BEV feature map.
    pub fn camera_out_side(&self) -> usize {
        self.seed_side * 8
    }

    pub fn detection_hw(&self) -> (usize, usize) {
        (self.range_bins / 4, self.azimuth_bins)
    }

    pub fn segmentation_hw(&self) -> (usize, usize) {
        (self.range_bins / 2, self.azimuth_bins)
    }

    /// Detection grid covering 102.4 m at this geometry's resolution.
    pub fn detection_grid(&self) -> PolarGridSpec {
        let (r, a) = self.detection_hw();
        let canon = PolarGridSpec::detection();
        let az_span = canon.azimuth_res * canon.azimuth_bins as f64;
        PolarGridSpec {
            range_bins: r,
            azimuth_bins: a,
            range_res: canon.range_max() / r as f64,
            azimuth_res: az_span / a as f64,
            azimuth_min: canon.azimuth_min,
            range_min: 0.0,
        }
    }

    pub fn segmentation_grid(&self) -> PolarGridSpec {
        let (r, a) = self.segmentation_hw();
        let canon = PolarGridSpec::segmentation();
        PolarGridSpec {
            range_bins: r,
            azimuth_bins: a,
            range_res: canon.range_max() / r as f64,
            azimuth_res: 90.0 / a as f64,
            azimuth_min: canon.azimuth_min,
            range_min: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarWidths {
    pub pre: usize,
    pub blocks: [usize; 4],
    pub det: usize,
    pub seg: usize,
}

/// Encoder widths before the width multiplier is applied.
pub const RADAR_BASE_WIDTHS: [usize; 4] = [192, 256, 384, 512];

impl RadarWidths {
    pub fn scaled(width_mult: f64) -> Self {
        Self {
            pre: 192,
            blocks: RADAR_BASE_WIDTHS.map(|c| ((c as f64 * width_mult).round() as usize).max(1)),
            det: 128,
            seg: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraWidths {
    pub pre: usize,
    pub blocks: [usize; 4],
    pub latent_hidden: usize,
    pub seed: usize,
    pub decoder: [usize; 3],
    pub out: usize,
}

impl Default for CameraWidths {
    fn default() -> Self {
        Self {
            pre: 16,
            blocks: [32, 64, 128, 128],
            latent_hidden: 128,
            seed: 128,
            decoder: [64, 64, 32],
            out: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Fusion,
    CameraOnly,
    RadarOnly,
}

impl FusionMode {
    pub fn uses_radar(self) -> bool {
        self != FusionMode::CameraOnly
    }

    pub fn uses_camera(self) -> bool {
        self != FusionMode::RadarOnly
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tasks {
    Detection,
    Segmentation,
    Multitask,
}

impl Tasks {
    pub fn detection(self) -> bool {
        self != Tasks::Segmentation
    }

    pub fn segmentation(self) -> bool {
        self != Tasks::Detection
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub geometry: Geometry,
    pub radar: RadarWidths,
    pub camera: CameraWidths,
    pub mode: FusionMode,
    pub tasks: Tasks,
    pub variational: bool,
}

/// Radar encoder multiplier that puts the canonical multitask fusion model
/// at roughly 7.3 M parameters.
pub const CANONICAL_WIDTH_MULT: f64 = 0.325;

impl ModelConfig {
    pub fn canonical(width_mult: f64) -> Self {
        Self {
            geometry: Geometry::canonical(),
            radar: RadarWidths::scaled(width_mult),
            camera: CameraWidths::default(),
            mode: FusionMode::Fusion,
            tasks: Tasks::Multitask,
            variational: true,
        }
    }
}

/// One forward pass worth of predictions. Absent tasks are `None`.
#[derive(Debug, Clone)]
pub struct ModelOutputs {
    /// `(B, 1, R/4, A)`
    pub cls: Option<Tensor>,
    /// `(B, 2, R/4, A)`
    pub reg: Option<Tensor>,
    /// `(B, 1, R/2, A)`
    pub seg: Option<Tensor>,
    pub latent: Option<LatentDistribution>,
}

/// The full fusion model with its parameters.
pub struct RefNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    radar: Option<RadarNet>,
    camera: Option<CameraNet>,
    det: Option<DetectionHead>,
    seg: Option<SegmentationHead>,
}

impl RefNet {
    pub fn new(config: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.geometry.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let radar = config
            .mode
            .uses_radar()
            .then(|| RadarNet::new(&mut store, &config.geometry, &config.radar))
            .transpose()?;
        let camera = config
            .mode
            .uses_camera()
            .then(|| CameraNet::new(&mut store, &config.geometry, &config.camera, config.variational))
            .transpose()?;
        let cam_c = config.camera.out;
        let det = config
            .tasks
            .detection()
            .then(|| DetectionHead::new(&mut store, config.radar.det + cam_c))
            .transpose()?;
        let seg = config
            .tasks
            .segmentation()
            .then(|| SegmentationHead::new(&mut store, config.radar.seg + cam_c))
            .transpose()?;
        Ok(Self {
            config,
            store,
            radar,
            camera,
            det,
            seg,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// `rd`: `(B, 2C, R, D)`, `image`: `(B, 3, H, W)`. A disabled branch
    /// contributes zeros of the shape it would have produced.
    pub fn forward(
        &self,
        rd: &Tensor,
        image: &Tensor,
        phase: Phase,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<ModelOutputs> {
        let b = rd.dim(0)?;
        let g = &self.config.geometry;
        let dtype = self.store.dtype();
        let dev = self.store.device();
        let (det_h, az) = g.detection_hw();
        let (seg_h, _) = g.segmentation_hw();

        let (ra_latent, ra_highres) = match &self.radar {
            Some(net) => {
                let (_, out) = net.forward(rd, phase)?;
                (out.ra_latent, out.ra_highres)
            }
            None => (
                Tensor::zeros((b, self.config.radar.det, det_h, az), dtype, dev)?,
                Tensor::zeros((b, self.config.radar.seg, seg_h, az), dtype, dev)?,
            ),
        };
        let (cam, latent) = match &self.camera {
            Some(net) => {
                let out = net.forward(image, phase, rng)?;
                (out.features, Some(out.latent))
            }
            None => {
                let s = g.camera_out_side();
                (Tensor::zeros((b, self.config.camera.out, s, s), dtype, dev)?, None)
            }
        };
        let (cls, reg) = match &self.det {
            Some(head) => {
                let (c, r) = head.forward(&ra_latent, &cam, phase)?;
                (Some(c), Some(r))
            }
            None => (None, None),
        };
        let seg = self
            .seg
            .as_ref()
            .map(|head| head.forward(&ra_highres, &cam, phase))
            .transpose()?;
        Ok(ModelOutputs { cls, reg, seg, latent })
    }

    pub fn radar(&self) -> Option<&RadarNet> {
        self.radar.as_ref()
    }

    pub fn camera(&self) -> Option<&CameraNet> {
        self.camera.as_ref()
    }
}

impl Geometry {
    /// A small geometry for fast structural tests and quick experiments.
    pub fn tiny() -> Self {
        Geometry {
            rx_channels: 2,
            range_bins: 32,
            doppler_bins: 32,
            n_tx: 12,
            delta: 2,
            image_height: 24,
            image_width: 32,
            azimuth_bins: 8,
            latent_dim: 8,
            seed_side: 2,
        }
    }
}
