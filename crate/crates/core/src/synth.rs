//! Synthetic frames built from the MIMO Doppler-multiplexing signal model.
//!
//! Every transmitter `k` imprints a Doppler shift of `k * delta` bins, so a
//! target at `(range_bin, doppler_bin)` shows up at 12 folded Doppler
//! positions on each receive channel, with a per-channel phase ramp set by
//! its azimuth. The camera raster and the free-space mask are rendered from
//! the same scene so the three modalities stay consistent.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use num_complex::Complex32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    polar_to_cartesian, CameraFrame, ComplexRdTensor, FrameSample, FreeSpaceMask, PolarGridSpec,
    VehicleLabel,
};
use crate::error::{Error, Result};

pub const MAX_TX: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadarConfig {
    pub n_tx: usize,
    pub n_rx: usize,
    pub range_bins: usize,
    /// Number of Doppler bins (`D_max`).
    pub d_max: usize,
    /// Doppler-bin shift between consecutive transmitters.
    pub delta: usize,
    /// Receive antenna spacing in wavelengths.
    pub rx_spacing: f64,
    pub noise_sigma: f64,
    pub range_res_m: f64,
    pub doppler_res_mps: f64,
    pub amplitude: f64,
    pub rng_seed: u64,
}

impl Default for RadarConfig {
    fn default() -> Self {
        Self {
            n_tx: 12,
            n_rx: 16,
            range_bins: 512,
            d_max: 256,
            delta: 16,
            rx_spacing: 0.5,
            noise_sigma: 0.05,
            range_res_m: 0.2,
            doppler_res_mps: 0.1,
            amplitude: 1.0,
            rng_seed: 0,
        }
    }
}

impl RadarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tx == 0 || self.n_tx > MAX_TX {
            return Err(Error::config(format!("n_tx must be in 1..={MAX_TX}")));
        }
        if self.delta == 0 || self.delta >= self.d_max {
            return Err(Error::config("delta must satisfy 0 < delta < d_max"));
        }
        if self.n_rx == 0 || self.range_bins == 0 {
            return Err(Error::config("radar needs at least one channel and range bin"));
        }
        if !(self.noise_sigma >= 0.0 && self.range_res_m > 0.0 && self.doppler_res_mps > 0.0) {
            return Err(Error::config("radar resolutions must be positive, noise non-negative"));
        }
        Ok(())
    }

    pub fn doppler_bin(&self, doppler_mps: f64) -> usize {
        ((doppler_mps / self.doppler_res_mps).round() as i64).rem_euclid(self.d_max as i64) as usize
    }

    pub fn range_bin(&self, range_m: f64) -> Option<usize> {
        let b = (range_m / self.range_res_m).floor();
        (b >= 0.0 && (b as usize) < self.range_bins).then_some(b as usize)
    }
}

/// Doppler bin at which transmitter `k` (1-based) observes a target whose
/// own Doppler bin is `d`, wrapping modulo `d_max`.
pub fn fold_doppler(d: usize, k: usize, delta: usize, d_max: usize) -> Result<usize> {
    if !(1..=MAX_TX).contains(&k) {
        return Err(Error::InvalidTxIndex(k));
    }
    Ok((d + k * delta) % d_max)
}

/// A point scatterer expressed in radar bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarTarget {
    pub range_bin: usize,
    pub doppler_bin: usize,
    pub azimuth_deg: f64,
    pub amplitude: f64,
    /// Common phase offset in radians.
    pub phase: f64,
}

/// Places every target's signatures into a fresh cube. Entries touched by
/// more than one target accumulate.
pub fn synthesize_rd(targets: &[RadarTarget], radar: &RadarConfig) -> Result<ComplexRdTensor> {
    radar.validate()?;
    let mut rd = ComplexRdTensor::zeros(radar.n_rx, radar.range_bins, radar.d_max);
    for t in targets {
        if t.range_bin >= radar.range_bins || t.doppler_bin >= radar.d_max {
            return Err(Error::OutOfGrid {
                id: -1,
                range_m: t.range_bin as f64 * radar.range_res_m,
                azimuth_deg: t.azimuth_deg,
            });
        }
        let step = 2.0 * PI * radar.rx_spacing * t.azimuth_deg.to_radians().sin();
        for ch in 0..radar.n_rx {
            let phase = t.phase + step * ch as f64;
            let z = Complex32::new(
                (t.amplitude * phase.cos()) as f32,
                (t.amplitude * phase.sin()) as f32,
            );
            for k in 1..=radar.n_tx {
                let d = fold_doppler(t.doppler_bin, k, radar.delta, radar.d_max)?;
                rd.data[[ch, t.range_bin, d]] += z;
            }
        }
    }
    Ok(rd)
}

fn add_noise(rd: &mut ComplexRdTensor, sigma: f64, rng: &mut impl Rng) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite");
    for z in rd.data.iter_mut() {
        z.re += normal.sample(rng) as f32;
        z.im += normal.sample(rng) as f32;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub n_targets: (usize, usize),
    pub range_m: (f64, f64),
    pub azimuth_deg: (f64, f64),
    pub doppler_mps: (f64, f64),
    pub road_half_width: f64,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    pub vehicle_height: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_targets: (1, 4),
            range_m: (6.0, 90.0),
            azimuth_deg: (-44.0, 44.0),
            doppler_mps: (-12.0, 12.0),
            road_half_width: 6.0,
            vehicle_length: 4.0,
            vehicle_width: 1.8,
            vehicle_height: 1.5,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self, grids: &[PolarGridSpec]) -> Result<()> {
        let (nmin, nmax) = self.n_targets;
        if nmin > nmax {
            return Err(Error::config("n_targets min exceeds max"));
        }
        if !(self.range_m.0 > 0.0 && self.range_m.0 <= self.range_m.1) {
            return Err(Error::config("range bounds must be positive and ordered"));
        }
        if self.azimuth_deg.0 > self.azimuth_deg.1 || self.doppler_mps.0 > self.doppler_mps.1 {
            return Err(Error::config("azimuth and doppler bounds must be ordered"));
        }
        if self.road_half_width < self.vehicle_width / 2.0 {
            return Err(Error::config("road narrower than a vehicle"));
        }
        for g in grids {
            if self.range_m.1 >= g.range_max()
                || self.azimuth_deg.0 < g.azimuth_min
                || self.azimuth_deg.1 >= g.azimuth_max()
            {
                return Err(Error::config("scene bounds exceed grid coverage"));
            }
        }
        Ok(())
    }

    pub fn footprint(&self, label: &VehicleLabel) -> Footprint {
        let (x, y) = polar_to_cartesian(label.range, label.azimuth);
        Footprint {
            x_min: x - self.vehicle_width / 2.0,
            x_max: x + self.vehicle_width / 2.0,
            y_min: y - self.vehicle_length / 2.0,
            y_max: y + self.vehicle_length / 2.0,
        }
    }
}

/// Axis-aligned ground-plane rectangle in ego Cartesian coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Footprint {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    fn overlaps(&self, other: &Footprint, margin: f64) -> bool {
        self.x_min - margin < other.x_max
            && other.x_min - margin < self.x_max
            && self.y_min - margin < other.y_max
            && other.y_min - margin < self.y_max
    }

    /// Distance along the unit ray `(dx, dy)` from the origin at which it
    /// enters the rectangle.
    pub fn ray_entry(&self, dx: f64, dy: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for (d, lo, hi) in [(dx, self.x_min, self.x_max), (dy, self.y_min, self.y_max)] {
            if d.abs() < 1e-15 {
                if lo > 0.0 || hi < 0.0 {
                    return None;
                }
            } else {
                let (a, b) = (lo / d, hi / d);
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
        }
        (t0 <= t1).then_some(t0)
    }
}

/// Draws vehicle labels fully on the road, without overlapping footprints
/// and on distinct radar range bins.
pub fn sample_scene(
    scene: &SceneConfig,
    radar: &RadarConfig,
    rng: &mut impl Rng,
) -> Result<Vec<VehicleLabel>> {
    let (nmin, nmax) = scene.n_targets;
    let lateral = scene.road_half_width - scene.vehicle_width / 2.0;
    for _ in 0..100 {
        let n = rng.random_range(nmin..=nmax);
        let mut labels: Vec<VehicleLabel> = Vec::with_capacity(n);
        let mut tries = 0;
        while labels.len() < n && tries < 500 {
            tries += 1;
            let range = rng.random_range(scene.range_m.0..=scene.range_m.1);
            let x = rng.random_range(-lateral..=lateral);
            if x.abs() >= range {
                continue;
            }
            let azimuth = x.atan2((range * range - x * x).sqrt()).to_degrees();
            if azimuth < scene.azimuth_deg.0 || azimuth > scene.azimuth_deg.1 {
                continue;
            }
            let label = VehicleLabel {
                id: labels.len() as i64,
                range,
                azimuth,
                doppler: rng.random_range(scene.doppler_mps.0..=scene.doppler_mps.1),
            };
            let fp = scene.footprint(&label);
            let rb = radar.range_bin(range);
            if rb.is_none()
                || labels.iter().any(|o| {
                    scene.footprint(o).overlaps(&fp, 0.5) || radar.range_bin(o.range) == rb
                })
            {
                continue;
            }
            labels.push(label);
        }
        if labels.len() == n {
            return Ok(labels);
        }
    }
    Err(Error::config("could not place the requested number of vehicles"))
}

/// Cell is free iff its center is on the road, outside every footprint and
/// not behind a footprint along its own azimuth ray.
pub fn rasterize_freespace(
    labels: &[VehicleLabel],
    scene: &SceneConfig,
    grid: &PolarGridSpec,
) -> FreeSpaceMask {
    let footprints: Vec<Footprint> = labels.iter().map(|l| scene.footprint(l)).collect();
    let mut mask = Array2::<u8>::zeros((grid.range_bins, grid.azimuth_bins));
    for a in 0..grid.azimuth_bins {
        let az = grid.azimuth_center(a).to_radians();
        let (dx, dy) = (az.sin(), az.cos());
        let shadow = footprints
            .iter()
            .filter_map(|f| f.ray_entry(dx, dy))
            .fold(f64::INFINITY, f64::min);
        for r in 0..grid.range_bins {
            let range = grid.range_center(r);
            let (x, y) = (range * dx, range * dy);
            let free = x.abs() <= scene.road_half_width
                && range < shadow
                && !footprints.iter().any(|f| f.contains(x, y));
            mask[[r, a]] = free as u8;
        }
    }
    FreeSpaceMask { mask }
}

/// Pinhole camera looking along +y from `mount_height` above the ground.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub mount_height: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        // 100 deg horizontal field of view on the 480x270 raster
        let fx = 240.0 / 50f64.to_radians().tan();
        Self {
            width: CameraFrame::WIDTH,
            height: CameraFrame::HEIGHT,
            fx,
            fy: fx,
            cx: 240.0,
            cy: 135.0,
            mount_height: 1.6,
        }
    }
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0
}

/// Ray-casts the scene: sky gradient, grass, a gray road, and flat-shaded
/// vehicle boxes. Values are quantized to 8 bits so frames survive PNG
/// storage bit-exactly.
pub fn render_camera(
    labels: &[VehicleLabel],
    scene: &SceneConfig,
    cam: &CameraIntrinsics,
) -> CameraFrame {
    let boxes: Vec<(Footprint, [f64; 3])> = labels
        .iter()
        .map(|l| {
            let tint = (l.id.rem_euclid(4)) as f64 * 0.08;
            (scene.footprint(l), [0.75 - tint, 0.15 + tint, 0.12])
        })
        .collect();
    let h = cam.mount_height;
    let mut image = Array3::<f32>::zeros((3, cam.height, cam.width));
    for v in 0..cam.height {
        for u in 0..cam.width {
            let dx = (u as f64 + 0.5 - cam.cx) / cam.fx;
            let dz = -(v as f64 + 0.5 - cam.cy) / cam.fy;
            // ray origin (0, 0, h), direction (dx, 1, dz)
            let mut best: Option<(f64, [f64; 3])> = None;
            for (fp, color) in &boxes {
                if let Some((t, face)) = ray_box(dx, dz, h, fp, scene.vehicle_height) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        let shade = [1.0, 0.7, 1.25][face];
                        best = Some((t, color.map(|c| c * shade)));
                    }
                }
            }
            let rgb = if let Some((_, c)) = best {
                c
            } else if dz < 0.0 {
                let t = h / -dz;
                let (x, y) = (t * dx, t);
                let fade = (y / 120.0).min(1.0);
                if x.abs() <= scene.road_half_width {
                    let g = 0.35 + 0.2 * fade;
                    [g, g, g + 0.02]
                } else {
                    [0.2 + 0.2 * fade, 0.45 + 0.1 * fade, 0.18 + 0.2 * fade]
                }
            } else {
                let up = (dz * 2.0).min(1.0);
                [0.55 - 0.2 * up, 0.7 - 0.15 * up, 0.95]
            };
            for ch in 0..3 {
                image[[ch, v, u]] = quantize(rgb[ch]);
            }
        }
    }
    CameraFrame { image }
}

/// Slab intersection of the ray `(0, 0, h) + t (dx, 1, dz)` with a box.
/// Returns the entry parameter and the face hit: 0 rear, 1 side, 2 top.
fn ray_box(dx: f64, dz: f64, h: f64, fp: &Footprint, height: f64) -> Option<(f64, usize)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    let mut face = 0;
    for (axis, (o, d, lo, hi)) in [
        (0.0, dx, fp.x_min, fp.x_max),
        (0.0, 1.0, fp.y_min, fp.y_max),
        (h, dz, 0.0, height),
    ]
    .into_iter()
    .enumerate()
    {
        if d.abs() < 1e-12 {
            if o < lo || o > hi {
                return None;
            }
            continue;
        }
        let (a, b) = ((lo - o) / d, (hi - o) / d);
        let near = a.min(b);
        if near > t0 {
            t0 = near;
            face = [1, 0, 2][axis];
        }
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1 && t0 > 0.0).then_some((t0, face))
}

/// Per-frame seed derived from the dataset seed, independent of generation order.
pub fn frame_seed(dataset_seed: u64, frame_id: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    rng.set_stream(frame_id);
    rng.random()
}

/// Generates one consistent record: sampled scene, radar cube, camera raster,
/// labels and free-space mask on the segmentation grid.
pub fn synthesize_frame(
    scene: &SceneConfig,
    radar: &RadarConfig,
    cam: &CameraIntrinsics,
    grids: (&PolarGridSpec, &PolarGridSpec),
    frame_id: u64,
    seed: u64,
) -> Result<FrameSample> {
    let (det_grid, seg_grid) = grids;
    radar.validate()?;
    scene.validate(&[*det_grid])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = sample_scene(scene, radar, &mut rng)?;
    synthesize_frame_from_labels(labels, scene, radar, cam, (det_grid, seg_grid), frame_id, seed, &mut rng)
}

#[allow(clippy::too_many_arguments)]
pub fn synthesize_frame_from_labels(
    labels: Vec<VehicleLabel>,
    scene: &SceneConfig,
    radar: &RadarConfig,
    cam: &CameraIntrinsics,
    grids: (&PolarGridSpec, &PolarGridSpec),
    frame_id: u64,
    seed: u64,
    rng: &mut impl Rng,
) -> Result<FrameSample> {
    let (det_grid, seg_grid) = grids;
    let mut targets = Vec::with_capacity(labels.len());
    for l in &labels {
        let range_bin = radar.range_bin(l.range);
        if range_bin.is_none() || !det_grid.contains(l.range, l.azimuth) {
            return Err(Error::OutOfGrid {
                id: l.id,
                range_m: l.range,
                azimuth_deg: l.azimuth,
            });
        }
        targets.push(RadarTarget {
            range_bin: range_bin.unwrap(),
            doppler_bin: radar.doppler_bin(l.doppler),
            azimuth_deg: l.azimuth,
            amplitude: radar.amplitude,
            phase: rng.random_range(0.0..2.0 * PI),
        });
    }
    let mut rd = synthesize_rd(&targets, radar)?;
    add_noise(&mut rd, radar.noise_sigma, rng);
    Ok(FrameSample {
        frame_id,
        seed,
        rd,
        camera: render_camera(&labels, scene, cam),
        freespace: rasterize_freespace(&labels, scene, seg_grid),
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_examples() {
        assert_eq!(fold_doppler(250, 1, 10, 256).unwrap(), 4);
        assert_eq!(fold_doppler(10, 2, 10, 256).unwrap(), 30);
        assert_eq!(fold_doppler(240, 12, 16, 256).unwrap(), 176);
        assert!(matches!(fold_doppler(0, 0, 1, 256), Err(Error::InvalidTxIndex(0))));
        assert!(matches!(fold_doppler(0, 13, 1, 256), Err(Error::InvalidTxIndex(13))));
    }

    #[test]
    fn fold_positions_distinct() {
        for delta in 1..21 {
            for d in [0, 17, 255] {
                let mut pos: Vec<_> = (1..=12).map(|k| fold_doppler(d, k, delta, 256).unwrap()).collect();
                pos.sort_unstable();
                pos.dedup();
                assert_eq!(pos.len(), 12, "delta {delta}");
            }
        }
    }

    fn target(range_bin: usize, doppler_bin: usize, azimuth_deg: f64) -> RadarTarget {
        RadarTarget {
            range_bin,
            doppler_bin,
            azimuth_deg,
            amplitude: 1.0,
            phase: 0.3,
        }
    }

    #[test]
    fn single_target_signature() {
        let radar = RadarConfig {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let rd = synthesize_rd(&[target(50, 20, 0.0)], &radar).unwrap();
        assert_eq!(rd.nonzero_count(), 12 * 16);
        for ch in 0..16 {
            let plane = rd.data.index_axis(ndarray::Axis(0), ch);
            // range-axis magnitude argmax
            let energy: Vec<f32> = plane.rows().into_iter().map(|row| row.iter().map(|z| z.norm()).sum()).collect();
            let argmax = energy.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(argmax, 50);
            let nz: Vec<usize> = (0..256).filter(|&d| plane[[50, d]].norm() > 0.0).collect();
            let mut expected: Vec<usize> = (1..=12).map(|k| fold_doppler(20, k, 16, 256).unwrap()).collect();
            expected.sort_unstable();
            assert_eq!(nz, expected);
        }
        // boresight: identical phase on every channel
        let z0 = rd.data[[0, 50, 36]];
        for ch in 1..16 {
            assert_eq!(rd.data[[ch, 50, 36]], z0);
        }
    }

    #[test]
    fn phase_ramp_follows_azimuth() {
        let radar = RadarConfig {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let az: f64 = 20.0;
        let rd = synthesize_rd(&[target(10, 0, az)], &radar).unwrap();
        let d = fold_doppler(0, 1, 16, 256).unwrap();
        let step = 2.0 * PI * 0.5 * az.to_radians().sin();
        let diff = (rd.data[[1, 10, d]] / rd.data[[0, 10, d]]).arg() as f64;
        assert!((diff - step).abs() < 1e-5);
    }

    #[test]
    fn empty_scene_is_zero() {
        let radar = RadarConfig {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let scene = SceneConfig::default();
        let cam = CameraIntrinsics::default();
        let (det, seg) = (PolarGridSpec::detection(), PolarGridSpec::segmentation());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = synthesize_frame_from_labels(vec![], &scene, &radar, &cam, (&det, &seg), 0, 0, &mut rng).unwrap();
        assert_eq!(f.rd.nonzero_count(), 0);
        assert_eq!(f.rd.dims(), (16, 512, 256));
        // every road cell free
        for ((r, a), &v) in f.freespace.mask.indexed_iter() {
            let (x, _) = polar_to_cartesian(seg.range_center(r), seg.azimuth_center(a));
            assert_eq!(v == 1, x.abs() <= scene.road_half_width);
        }
    }

    #[test]
    fn occlusion_shadow_matches_ray_march() {
        let scene = SceneConfig::default();
        let grid = PolarGridSpec::segmentation();
        let labels = [VehicleLabel::new(0, 40.0, 0.0)];
        let mask = rasterize_freespace(&labels, &scene, &grid);
        let fp = scene.footprint(&labels[0]);
        for a in 0..grid.azimuth_bins {
            let az = grid.azimuth_center(a);
            for r in 0..grid.range_bins {
                let range = grid.range_center(r);
                let (x, y) = polar_to_cartesian(range, az);
                // march from the sensor toward the cell in 1 cm steps
                let steps = (range / 0.01) as usize;
                let blocked = (0..=steps).any(|i| {
                    let (px, py) = polar_to_cartesian(i as f64 * 0.01, az);
                    fp.contains(px, py)
                }) || fp.contains(x, y);
                let on_road = x.abs() <= scene.road_half_width;
                let expect = on_road && !blocked;
                // skip cells within one march step of the footprint edge
                let edge = fp.ray_entry(az.to_radians().sin(), az.to_radians().cos());
                if edge.is_some_and(|t| (t - range).abs() < 0.02) {
                    continue;
                }
                assert_eq!(mask.mask[[r, a]] == 1, expect, "cell ({r},{a}) at {range} m {az} deg");
                if az.abs() < 0.25 && range > 42.0 {
                    assert_eq!(mask.mask[[r, a]], 0);
                }
                if fp.contains(x, y) {
                    assert_eq!(mask.mask[[r, a]], 0);
                }
            }
        }
    }

    #[test]
    fn frames_are_reproducible() {
        let radar = RadarConfig::default();
        let scene = SceneConfig::default();
        let cam = CameraIntrinsics::default();
        let (det, seg) = (PolarGridSpec::detection(), PolarGridSpec::segmentation());
        let seed = frame_seed(7, 3);
        let a = synthesize_frame(&scene, &radar, &cam, (&det, &seg), 3, seed).unwrap();
        let b = synthesize_frame(&scene, &radar, &cam, (&det, &seg), 3, seed).unwrap();
        assert_eq!(a, b);
        assert!((1..=4).contains(&a.labels.len()));
        assert_ne!(frame_seed(7, 3), frame_seed(7, 4));
        assert_ne!(frame_seed(7, 3), frame_seed(8, 3));
    }

    #[test]
    fn camera_shows_vehicle() {
        let scene = SceneConfig::default();
        let cam = CameraIntrinsics::default();
        let empty = render_camera(&[], &scene, &cam);
        let with = render_camera(&[VehicleLabel::new(0, 15.0, 0.0)], &scene, &cam);
        let changed: Vec<(usize, usize)> = (0..cam.height)
            .flat_map(|v| (0..cam.width).map(move |u| (v, u)))
            .filter(|&(v, u)| (0..3).any(|c| empty.image[[c, v, u]] != with.image[[c, v, u]]))
            .collect();
        assert!(changed.len() > 100);
        // centered on the image column of boresight
        let mean_u = changed.iter().map(|p| p.1 as f64).sum::<f64>() / changed.len() as f64;
        assert!((mean_u - 240.0).abs() < 3.0);
    }

    #[test]
    fn out_of_grid_target_rejected() {
        let radar = RadarConfig::default();
        let scene = SceneConfig::default();
        let cam = CameraIntrinsics::default();
        let (det, seg) = (PolarGridSpec::detection(), PolarGridSpec::segmentation());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let res = synthesize_frame_from_labels(
            vec![VehicleLabel::new(4, 110.0, 0.0)],
            &scene,
            &radar,
            &cam,
            (&det, &seg),
            0,
            0,
            &mut rng,
        );
        assert!(matches!(res, Err(Error::OutOfGrid { id: 4, .. })));
    }
}
