//! Domain types shared by every stage of the pipeline: the BEV-polar grids,
//! vehicle labels and their dense target encoding, and the per-frame sensor
//! payloads (complex range-Doppler cube, camera raster, free-space mask).

mod io;

pub use io::{
    read_frame, read_rd_tensor, write_frame, write_rd_tensor, Dataset, FrameEntry, Manifest, MANIFEST_FILE,
    RD_MAGIC, RD_VERSION,
};

use log::warn;
use ndarray::{Array2, Array3};
use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of a range/azimuth polar grid.
///
/// Bin `i` covers `[range_min + i * range_res, range_min + (i + 1) * range_res)`
/// and is represented by its center; azimuth bins follow the same rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarGridSpec {
    pub range_bins: usize,
    pub azimuth_bins: usize,
    /// Meters per range bin.
    pub range_res: f64,
    /// Degrees per azimuth bin.
    pub azimuth_res: f64,
    /// Lower azimuth edge of bin 0, in degrees.
    pub azimuth_min: f64,
    #[serde(default)]
    pub range_min: f64,
}

impl PolarGridSpec {
    pub fn new(
        range_bins: usize,
        azimuth_bins: usize,
        range_res: f64,
        azimuth_res: f64,
        azimuth_min: f64,
    ) -> Result<Self> {
        let grid = Self {
            range_bins,
            azimuth_bins,
            range_res,
            azimuth_res,
            azimuth_min,
            range_min: 0.0,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// The 128x224 detection grid: 0.8 m and 0.8 deg per bin over [-89.6, 89.6] deg.
    pub fn detection() -> Self {
        Self {
            range_bins: 128,
            azimuth_bins: 224,
            range_res: 0.8,
            azimuth_res: 0.8,
            azimuth_min: -89.6,
            range_min: 0.0,
        }
    }

    /// The 256x224 free-space grid: 0.4 m per range bin, 224 bins spanning [-45, 45] deg.
    pub fn segmentation() -> Self {
        Self {
            range_bins: 256,
            azimuth_bins: 224,
            range_res: 0.4,
            azimuth_res: 90.0 / 224.0,
            azimuth_min: -45.0,
            range_min: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.range_bins == 0 || self.azimuth_bins == 0 {
            return Err(Error::config("grid must have at least one bin per axis"));
        }
        if !(self.range_res > 0.0 && self.azimuth_res > 0.0) {
            return Err(Error::config("grid resolutions must be positive"));
        }
        if !(self.azimuth_min.is_finite() && self.range_min.is_finite() && self.range_min >= 0.0)
        {
            return Err(Error::config("grid origin must be finite and range_min >= 0"));
        }
        Ok(())
    }

    pub fn range_max(&self) -> f64 {
        self.range_min + self.range_bins as f64 * self.range_res
    }

    pub fn azimuth_max(&self) -> f64 {
        self.azimuth_min + self.azimuth_bins as f64 * self.azimuth_res
    }

    pub fn range_center(&self, bin: usize) -> f64 {
        self.range_min + (bin as f64 + 0.5) * self.range_res
    }

    pub fn azimuth_center(&self, bin: usize) -> f64 {
        self.azimuth_min + (bin as f64 + 0.5) * self.azimuth_res
    }

    pub fn contains(&self, range: f64, azimuth: f64) -> bool {
        self.bin_of(range, azimuth).is_some()
    }

    /// Quantizes a continuous position to its `(range_bin, azimuth_bin)`.
    pub fn bin_of(&self, range: f64, azimuth: f64) -> Option<(usize, usize)> {
        let r = ((range - self.range_min) / self.range_res).floor();
        let a = ((azimuth - self.azimuth_min) / self.azimuth_res).floor();
        if !(r.is_finite() && a.is_finite()) || r < 0.0 || a < 0.0 {
            return None;
        }
        let (r, a) = (r as usize, a as usize);
        (r < self.range_bins && a < self.azimuth_bins).then_some((r, a))
    }
}

/// A labeled vehicle, located by the center of its footprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleLabel {
    pub id: i64,
    #[serde(rename = "range_m")]
    pub range: f64,
    #[serde(rename = "azimuth_deg")]
    pub azimuth: f64,
    #[serde(rename = "doppler_mps", default)]
    pub doppler: f64,
}

impl VehicleLabel {
    pub fn new(id: i64, range: f64, azimuth: f64) -> Self {
        Self {
            id,
            range,
            azimuth,
            doppler: 0.0,
        }
    }

    fn out_of_grid(&self) -> Error {
        Error::OutOfGrid {
            id: self.id,
            range_m: self.range,
            azimuth_deg: self.azimuth,
        }
    }
}

/// Dense supervision for the detection head.
///
/// `reg` holds per-axis offsets of the true position from the bin center, in
/// units of bins (channel 0 range, channel 1 azimuth).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTargets {
    pub cls: Array2<f32>,
    pub reg: Array3<f32>,
}

impl DetectionTargets {
    pub fn zeros(grid: &PolarGridSpec) -> Self {
        Self {
            cls: Array2::zeros((grid.range_bins, grid.azimuth_bins)),
            reg: Array3::zeros((2, grid.range_bins, grid.azimuth_bins)),
        }
    }

    pub fn positives(&self) -> usize {
        self.cls.iter().filter(|&&v| v > 0.0).count()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeOptions {
    /// Chebyshev radius of the positive blob around each label's cell. The
    /// default of 0 marks a single cell per label.
    pub dilation: usize,
}

/// Encodes labels as a single-cell classification map plus bin-relative
/// regression offsets.
///
/// When two labels quantize to the same cell the nearer one wins.
pub fn encode_detection_targets(
    labels: &[VehicleLabel],
    grid: &PolarGridSpec,
) -> Result<DetectionTargets> {
    encode_detection_targets_with(labels, grid, EncodeOptions::default())
}

pub fn encode_detection_targets_with(
    labels: &[VehicleLabel],
    grid: &PolarGridSpec,
    opts: EncodeOptions,
) -> Result<DetectionTargets> {
    let mut targets = DetectionTargets::zeros(grid);
    // range of the label currently owning each cell
    let mut owner = Array2::<f64>::from_elem((grid.range_bins, grid.azimuth_bins), f64::INFINITY);

    for label in labels {
        let (rb, ab) = grid
            .bin_of(label.range, label.azimuth)
            .ok_or_else(|| label.out_of_grid())?;
        let k = opts.dilation as isize;
        for dr in -k..=k {
            for da in -k..=k {
                let (r, a) = (rb as isize + dr, ab as isize + da);
                if r < 0 || a < 0 || r >= grid.range_bins as isize || a >= grid.azimuth_bins as isize
                {
                    continue;
                }
                let (r, a) = (r as usize, a as usize);
                if owner[[r, a]].is_finite() {
                    if owner[[r, a]] <= label.range {
                        if dr == 0 && da == 0 {
                            warn!(
                                "label {} collides with a nearer label in cell ({r}, {a}); dropped",
                                label.id
                            );
                        }
                        continue;
                    }
                    if dr == 0 && da == 0 {
                        warn!("label {} replaces a farther label in cell ({r}, {a})", label.id);
                    }
                }
                owner[[r, a]] = label.range;
                targets.cls[[r, a]] = 1.0;
                targets.reg[[0, r, a]] =
                    ((label.range - grid.range_center(r)) / grid.range_res) as f32;
                targets.reg[[1, r, a]] =
                    ((label.azimuth - grid.azimuth_center(a)) / grid.azimuth_res) as f32;
            }
        }
    }
    Ok(targets)
}

/// Ego-frame Cartesian position: `x` lateral (positive right), `y` forward.
pub fn polar_to_cartesian(range: f64, azimuth_deg: f64) -> (f64, f64) {
    let az = azimuth_deg.to_radians();
    (range * az.sin(), range * az.cos())
}

pub fn cartesian_to_polar(x: f64, y: f64) -> (f64, f64) {
    (x.hypot(y), x.atan2(y).to_degrees())
}

/// Binary drivable-area raster on the segmentation grid (1 = free).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreeSpaceMask {
    pub mask: Array2<u8>,
}

impl FreeSpaceMask {
    pub fn new(mask: Array2<u8>) -> Result<Self> {
        if mask.iter().any(|&v| v > 1) {
            return Err(Error::format("free-space mask values must be 0 or 1"));
        }
        Ok(Self { mask })
    }

    pub fn free_cells(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1).count()
    }
}

/// Complex range-Doppler cube, indexed `[rx_channel, range_bin, doppler_bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexRdTensor {
    pub data: Array3<Complex32>,
}

impl ComplexRdTensor {
    pub const CHANNELS: usize = 16;
    pub const RANGE_BINS: usize = 512;
    pub const DOPPLER_BINS: usize = 256;

    pub fn zeros(channels: usize, range_bins: usize, doppler_bins: usize) -> Self {
        Self {
            data: Array3::zeros((channels, range_bins, doppler_bins)),
        }
    }

    pub fn new(data: Array3<Complex32>) -> Result<Self> {
        if data.iter().any(|c| !(c.re.is_finite() && c.im.is_finite())) {
            return Err(Error::Numeric("range-Doppler tensor has non-finite entries".into()));
        }
        Ok(Self { data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn nonzero_count(&self) -> usize {
        self.data
            .iter()
            .filter(|c| c.re != 0.0 || c.im != 0.0)
            .count()
    }
}

/// RGB raster `[channel, row, column]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub image: Array3<f32>,
}

impl CameraFrame {
    pub const HEIGHT: usize = 270;
    pub const WIDTH: usize = 480;

    pub fn new(image: Array3<f32>) -> Result<Self> {
        if image.dim().0 != 3 {
            return Err(Error::shape(format!(
                "camera frame needs 3 channels, got {:?}",
                image.dim()
            )));
        }
        if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Numeric("camera values must lie in [0, 1]".into()));
        }
        Ok(Self { image })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.image.dim()
    }
}

/// Detection head output for one frame: `cls` probabilities `(R, A)` and
/// `reg` offsets `(2, R, A)` in bin units.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionPrediction {
    pub cls: Array2<f32>,
    pub reg: Array3<f32>,
}

impl From<DetectionTargets> for DetectionPrediction {
    fn from(t: DetectionTargets) -> Self {
        Self { cls: t.cls, reg: t.reg }
    }
}

/// Segmentation head output for one frame: drivable probability `(R, A)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationPrediction {
    pub seg: Array2<f32>,
}

impl From<&FreeSpaceMask> for SegmentationPrediction {
    fn from(m: &FreeSpaceMask) -> Self {
        Self {
            seg: m.mask.mapv(f32::from),
        }
    }
}

/// One synchronized record.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub frame_id: u64,
    pub seed: u64,
    pub rd: ComplexRdTensor,
    pub camera: CameraFrame,
    pub labels: Vec<VehicleLabel>,
    pub freespace: FreeSpaceMask,
}
