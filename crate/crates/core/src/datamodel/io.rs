//! On-disk dataset layout.
//!
//! A split is a directory holding `manifest.json` and, per frame,
//! `<stem>.rd` (complex cube), `<stem>.png` or `<stem>.cam` (camera),
//! `<stem>.labels.json` and `<stem>.mask` (one byte per free-space cell).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use super::{CameraFrame, ComplexRdTensor, FreeSpaceMask, FrameSample, PolarGridSpec, VehicleLabel};
use crate::error::{Error, Result};

pub const RD_MAGIC: &[u8; 4] = b"RDF1";
pub const RD_VERSION: u32 = 1;
const RD_HEADER_LEN: usize = 20;

const CAM_MAGIC: &[u8; 4] = b"CAMF";
const CAM_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::from_io(e, path))
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

pub fn write_rd_tensor(rd: &ComplexRdTensor, path: &Path) -> Result<()> {
    let (c, r, d) = rd.dims();
    let mut buf = Vec::with_capacity(RD_HEADER_LEN + c * r * d * 8);
    buf.extend_from_slice(RD_MAGIC);
    for v in [RD_VERSION, c as u32, r as u32, d as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for z in rd.data.iter() {
        buf.extend_from_slice(&z.re.to_le_bytes());
        buf.extend_from_slice(&z.im.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_rd_tensor(path: &Path) -> Result<ComplexRdTensor> {
    let bytes = read_file(path)?;
    if bytes.len() < RD_HEADER_LEN || &bytes[..4] != RD_MAGIC {
        return Err(Error::format(format!("{}: bad RD magic", path.display())));
    }
    let version = u32_at(&bytes, 4);
    if version != RD_VERSION {
        return Err(Error::format(format!("{}: unsupported RD version {version}", path.display())));
    }
    let (c, r, d) = (
        u32_at(&bytes, 8) as usize,
        u32_at(&bytes, 12) as usize,
        u32_at(&bytes, 16) as usize,
    );
    let payload = &bytes[RD_HEADER_LEN..];
    if payload.len() != c * r * d * 8 {
        return Err(Error::format(format!(
            "{}: payload of {} bytes does not match header dims {c}x{r}x{d}",
            path.display(),
            payload.len()
        )));
    }
    let data: Vec<Complex32> = payload
        .chunks_exact(8)
        .map(|ch| {
            Complex32::new(
                f32::from_le_bytes(ch[..4].try_into().unwrap()),
                f32::from_le_bytes(ch[4..].try_into().unwrap()),
            )
        })
        .collect();
    let data = Array3::from_shape_vec((c, r, d), data).map_err(|e| Error::format(e.to_string()))?;
    ComplexRdTensor::new(data)
}

fn png_exact(image: &Array3<f32>) -> bool {
    image
        .iter()
        .all(|&v| ((v * 255.0).round() as u8) as f32 / 255.0 == v)
}

fn write_camera(cam: &CameraFrame, stem: &Path) -> Result<PathBuf> {
    let (c, h, w) = cam.dims();
    if c == 3 && png_exact(&cam.image) {
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            for ch in 0..3 {
                px.0[ch] = (cam.image[[ch, y as usize, x as usize]] * 255.0).round() as u8;
            }
        }
        let path = stem.with_extension("png");
        img.save(&path)?;
        Ok(path)
    } else {
        let path = stem.with_extension("cam");
        let mut buf = Vec::with_capacity(20 + c * h * w * 4);
        buf.extend_from_slice(CAM_MAGIC);
        for v in [CAM_VERSION, c as u32, h as u32, w as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in cam.image.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, buf)?;
        Ok(path)
    }
}

/// Reads a camera raster from a PNG or a raw little-endian float raster.
pub fn read_camera(path: &Path) -> Result<CameraFrame> {
    let bytes = read_file(path)?;
    if bytes.starts_with(CAM_MAGIC) {
        if bytes.len() < 20 || u32_at(&bytes, 4) != CAM_VERSION {
            return Err(Error::format(format!("{}: bad camera header", path.display())));
        }
        let (c, h, w) = (
            u32_at(&bytes, 8) as usize,
            u32_at(&bytes, 12) as usize,
            u32_at(&bytes, 16) as usize,
        );
        let payload = &bytes[20..];
        if payload.len() != c * h * w * 4 {
            return Err(Error::format(format!("{}: camera payload size mismatch", path.display())));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()))
            .collect();
        let image =
            Array3::from_shape_vec((c, h, w), data).map_err(|e| Error::format(e.to_string()))?;
        return CameraFrame::new(image);
    }
    let img = image::load_from_memory(&bytes)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut image = Array3::<f32>::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            image[[ch, y as usize, x as usize]] = px.0[ch] as f32 / 255.0;
        }
    }
    CameraFrame::new(image)
}

/// One manifest row; file names are relative to the split directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame_id: u64,
    pub seed: u64,
    pub rd: String,
    pub image: String,
    pub labels: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub split: String,
    pub detection_grid: PolarGridSpec,
    pub segmentation_grid: PolarGridSpec,
    pub frames: Vec<FrameEntry>,
    /// Generation parameters, recorded verbatim.
    #[serde(default)]
    pub generation: serde_json::Value,
}

impl Manifest {
    pub fn new(split: &str, detection_grid: PolarGridSpec, segmentation_grid: PolarGridSpec) -> Self {
        Self {
            version: MANIFEST_VERSION,
            split: split.to_string(),
            detection_grid,
            segmentation_grid,
            frames: Vec::new(),
            generation: serde_json::Value::Null,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut f = fs::File::create(dir.join(MANIFEST_FILE))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let manifest: Manifest = serde_json::from_slice(&read_file(&path)?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::format(format!("unsupported manifest version {}", manifest.version)));
        }
        let mut ids: Vec<u64> = manifest.frames.iter().map(|f| f.frame_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::format("duplicate frame ids in manifest"));
        }
        Ok(manifest)
    }
}

/// Writes every file of a frame into `dir` and returns its manifest row.
pub fn write_frame(sample: &FrameSample, dir: &Path) -> Result<FrameEntry> {
    let stem = dir.join(format!("frame_{:06}", sample.frame_id));
    let name = |p: &Path| p.file_name().unwrap().to_string_lossy().into_owned();

    let rd = stem.with_extension("rd");
    write_rd_tensor(&sample.rd, &rd)?;
    let image = write_camera(&sample.camera, &stem)?;
    let labels = stem.with_extension("labels.json");
    fs::write(&labels, serde_json::to_vec_pretty(&sample.labels)?)?;
    let mask = stem.with_extension("mask");
    fs::write(&mask, sample.freespace.mask.as_slice().expect("standard layout"))?;

    Ok(FrameEntry {
        frame_id: sample.frame_id,
        seed: sample.seed,
        rd: name(&rd),
        image: name(&image),
        labels: name(&labels),
        mask: name(&mask),
    })
}

pub fn read_frame(dir: &Path, entry: &FrameEntry, seg_grid: &PolarGridSpec) -> Result<FrameSample> {
    let rd = read_rd_tensor(&dir.join(&entry.rd))?;
    let camera = read_camera(&dir.join(&entry.image))?;
    let labels: Vec<VehicleLabel> = serde_json::from_slice(&read_file(&dir.join(&entry.labels))?)?;
    let mask_bytes = read_file(&dir.join(&entry.mask))?;
    let (h, w) = (seg_grid.range_bins, seg_grid.azimuth_bins);
    if mask_bytes.len() != h * w {
        return Err(Error::format(format!(
            "{}: mask has {} cells, grid expects {h}x{w}",
            entry.mask,
            mask_bytes.len()
        )));
    }
    let freespace = FreeSpaceMask::new(
        Array2::from_shape_vec((h, w), mask_bytes).map_err(|e| Error::format(e.to_string()))?,
    )?;
    Ok(FrameSample {
        frame_id: entry.frame_id,
        seed: entry.seed,
        rd,
        camera,
        labels,
        freespace,
    })
}

/// Read access to one split directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = Manifest::read(&dir)?;
        Ok(Self { dir, manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frames.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<FrameSample> {
        let entry = self
            .manifest
            .frames
            .get(index)
            .ok_or_else(|| Error::format(format!("frame index {index} out of bounds")))?;
        read_frame(&self.dir, entry, &self.manifest.segmentation_grid)
    }
}
