//! End-to-end stages behind the command-line tool: dataset generation,
//! training, evaluation, benchmarking and inference.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{EvalConfig, RunConfig};
use crate::datamodel::{
    encode_detection_targets, encode_detection_targets_with, write_frame, EncodeOptions, Dataset, DetectionPrediction, DetectionTargets, FrameSample, Manifest,
    SegmentationPrediction,
};
use crate::error::{Error, Result};
use crate::eval::{decode_detections, fps_stats, match_and_score, miou, Detection, EvalAccumulator, MetricsReport};
use crate::losses::{detection_loss, kl_divergence, mtl_loss, scalar, segmentation_loss};
use crate::nn::camera::image_batch;
use crate::nn::radar::rd_batch;
use crate::nn::{Phase, RefNet, Tasks};
use crate::optim::Adam;
use crate::synth::{frame_seed, synthesize_frame};

/// Split directory names, in generation order.
pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const LOG_FILE: &str = "train_log.ndjson";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";

/// Writes `train/`, `val/` and `test/` under `root`. Frame ids are global
/// and each frame's content depends only on the data seed and its id.
pub fn run_generate(cfg: &RunConfig, root: &Path) -> Result<Vec<Manifest>> {
    cfg.validate()?;
    let counts = cfg.data.split_counts()?;
    let radar = cfg.radar_config();
    let cam = cfg.camera_intrinsics();
    let (det, seg) = (cfg.detection_grid(), cfg.segmentation_grid());
    let generation = serde_json::json!({
        "seed": cfg.seeds.data,
        "geometry": cfg.geometry,
        "data": cfg.data,
    });

    let mut manifests = Vec::new();
    let mut frame_id = 0u64;
    for (split, n) in SPLITS.iter().zip(counts) {
        let dir = root.join(split);
        fs::create_dir_all(&dir)?;
        let mut manifest = Manifest::new(split, det, seg);
        manifest.generation = generation.clone();
        for _ in 0..n {
            let seed = frame_seed(cfg.seeds.data, frame_id);
            let sample = synthesize_frame(&cfg.data.scene, &radar, &cam, (&det, &seg), frame_id, seed)?;
            manifest.frames.push(write_frame(&sample, &dir)?);
            frame_id += 1;
        }
        manifest.write(&dir)?;
        log::info!("{split}: {n} frames written to {}", dir.display());
        manifests.push(manifest);
    }
    Ok(manifests)
}

/// Frame visiting order for one epoch; a pure function of its arguments.
pub fn epoch_order(n: usize, seed: u64, epoch: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    order
}

/// Reads frames in `order`. With `prefetch > 0` a loader thread stays up to
/// `prefetch` frames ahead; the yielded sequence is the same either way.
pub fn stream_frames(
    dataset: &Dataset,
    order: Vec<usize>,
    prefetch: usize,
) -> Box<dyn Iterator<Item = Result<FrameSample>> + Send> {
    let ds = dataset.clone();
    if prefetch == 0 {
        return Box::new(order.into_iter().map(move |i| ds.get(i)));
    }
    let (tx, rx) = mpsc::sync_channel(prefetch);
    std::thread::spawn(move || {
        for i in order {
            // a closed receiver means the consumer stopped early
            if tx.send(ds.get(i)).is_err() {
                break;
            }
        }
    });
    Box::new(rx.into_iter())
}

/// Network inputs and dense targets for a batch of frames.
pub struct TensorBatch {
    pub rd: Tensor,
    pub image: Tensor,
    pub cls: Tensor,
    pub reg: Tensor,
    pub seg: Tensor,
}

pub fn make_batch(frames: &[FrameSample], cfg: &RunConfig, dtype: DType) -> Result<TensorBatch> {
    if frames.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dev = Device::Cpu;
    let det_grid = cfg.detection_grid();
    let seg_grid = cfg.segmentation_grid();
    let rds: Vec<_> = frames.iter().map(|f| &f.rd).collect();
    let cams: Vec<_> = frames.iter().map(|f| &f.camera).collect();
    let rd = rd_batch(&rds, &cfg.geometry, dtype)?;
    let image = image_batch(&cams, dtype)?;
    let expected_hw = (cfg.geometry.image_height, cfg.geometry.image_width);
    if image.dims()[2..] != [expected_hw.0, expected_hw.1] {
        return Err(Error::shape(format!(
            "camera frames are {:?}, geometry expects {expected_hw:?}",
            &image.dims()[2..]
        )));
    }

    let (b, r, a) = (frames.len(), det_grid.range_bins, det_grid.azimuth_bins);
    let mut cls = Vec::with_capacity(b * r * a);
    let mut reg = Vec::with_capacity(2 * b * r * a);
    let mut seg = Vec::with_capacity(b * seg_grid.range_bins * seg_grid.azimuth_bins);
    for f in frames {
        let opts = EncodeOptions { dilation: cfg.train.target_dilation };
        let t: DetectionTargets = encode_detection_targets_with(&f.labels, &det_grid, opts)?;
        cls.extend(t.cls.iter().copied());
        reg.extend(t.reg.iter().copied());
        if f.freespace.mask.dim() != (seg_grid.range_bins, seg_grid.azimuth_bins) {
            return Err(Error::shape("free-space mask does not match the segmentation grid"));
        }
        seg.extend(f.freespace.mask.iter().map(|&v| v as f32));
    }
    let cls = Tensor::from_vec(cls, (b, 1, r, a), &dev)?.to_dtype(dtype)?;
    let reg = Tensor::from_vec(reg, (b, 2, r, a), &dev)?.to_dtype(dtype)?;
    let seg = Tensor::from_vec(seg, (b, 1, seg_grid.range_bins, seg_grid.azimuth_bins), &dev)?.to_dtype(dtype)?;
    Ok(TensorBatch {
        rd,
        image,
        cls,
        reg,
        seg,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: u64,
    pub step: u64,
    pub l_det: f64,
    pub l_seg: f64,
    pub l_mtl: f64,
    pub lr: f64,
}

/// Model, optimizer and loader position.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: RefNet,
    pub opt: Adam,
    /// Epoch in progress.
    pub epoch: u64,
    /// Batches of the current epoch already consumed.
    pub batch: u64,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Self::with_dtype(cfg, DType::F32)
    }

    pub fn with_dtype(cfg: &RunConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let model = RefNet::new(cfg.model_config(), dtype, cfg.seeds.model)?;
        let opt = Adam::new(&cfg.optimizer, &model.store)?;
        Ok(Self {
            cfg: cfg.clone(),
            model,
            opt,
            epoch: 0,
            batch: 0,
        })
    }

    /// Continues from `ck`; its model description must equal `cfg`'s.
    pub fn resume(cfg: &RunConfig, ck: &Checkpoint) -> Result<Self> {
        if ck.config.model_config() != cfg.model_config() {
            return Err(Error::config("checkpoint was trained with a different model configuration"));
        }
        let model = ck.build_model()?;
        let mut opt = Adam::new(&cfg.optimizer, &model.store)?;
        ck.restore_optimizer(&mut opt, model.store.device())?;
        Ok(Self {
            cfg: cfg.clone(),
            model,
            opt,
            epoch: ck.epoch,
            batch: ck.batch,
        })
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(&self.cfg, &self.model, Some(&self.opt), self.epoch, self.batch)
    }

    /// One optimizer update on `frames`. A non-finite loss leaves the
    /// parameters untouched and returns a numeric error.
    pub fn train_step(&mut self, frames: &[FrameSample]) -> Result<LogRecord> {
        let tasks = self.cfg.tasks;
        let loss_cfg = &self.cfg.loss;
        let lr = self.cfg.optimizer.lr_at(self.epoch as usize);
        let batch = make_batch(frames, &self.cfg, self.model.store.dtype())?;

        // latent noise keyed by step so a resumed run draws the same values
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seeds.sampling);
        rng.set_stream(self.opt.step);
        let out = self.model.forward(&batch.rd, &batch.image, Phase::Train, Some(&mut rng))?;

        let l_det = match (&out.cls, &out.reg) {
            (Some(c), Some(r)) => Some(detection_loss(c, r, &batch.cls, &batch.reg, loss_cfg)?),
            _ => None,
        };
        let l_seg = out
            .seg
            .as_ref()
            .map(|s| segmentation_loss(s, &batch.seg, loss_cfg))
            .transpose()?;
        let mut total = crate::losses::mtl_tensor(l_det.as_ref(), l_seg.as_ref(), loss_cfg.beta)?;
        if loss_cfg.kl_weight > 0.0 {
            if let Some(lat) = &out.latent {
                total = (total + (kl_divergence(&lat.mu, &lat.log_var)? * loss_cfg.kl_weight)?)?;
            }
        }
        let d = l_det.as_ref().map(scalar).transpose()?.unwrap_or(0.0);
        let s = l_seg.as_ref().map(scalar).transpose()?.unwrap_or(0.0);
        let t = scalar(&total)?;
        if !(d.is_finite() && s.is_finite() && t.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {} (l_det {d}, l_seg {s})",
                self.opt.step + 1
            )));
        }
        let breakdown = mtl_loss(d, s, loss_cfg.beta, loss_cfg.alpha, tasks)?;
        let grads = total.backward()?;
        self.opt.step(&self.model.store, &grads, lr)?;
        Ok(LogRecord {
            epoch: self.epoch,
            step: self.opt.step,
            l_det: breakdown.l_det,
            l_seg: breakdown.l_seg,
            l_mtl: breakdown.l_mtl,
            lr,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub records: Vec<LogRecord>,
}

fn check_grids(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    let m = &ds.manifest;
    if m.detection_grid != cfg.detection_grid() || m.segmentation_grid != cfg.segmentation_grid() {
        return Err(Error::config(format!(
            "dataset {} was generated for a different geometry",
            ds.dir.display()
        )));
    }
    Ok(())
}

/// Trains on `train`, appending to `out/train_log.ndjson` and refreshing
/// `out/latest.ckpt`. With `resume`, continues from that state.
pub fn run_training(cfg: &RunConfig, train: &Dataset, out: &Path, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    check_grids(cfg, train)?;
    let n = cfg.train.max_frames.map_or(train.len(), |m| m.min(train.len()));
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    fs::create_dir_all(out)?;
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(cfg, ck)?,
        None => Trainer::new(cfg)?,
    };
    let log_path = out.join(LOG_FILE);
    let mut log = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)?;
    let latest = out.join(LATEST_CHECKPOINT);
    let bs = cfg.optimizer.batch_size;
    let max_steps = cfg.train.max_steps.unwrap_or(u64::MAX);
    let mut records = Vec::new();

    'epochs: while (trainer.epoch as usize) < cfg.optimizer.epochs {
        let order = epoch_order(n, cfg.seeds.shuffle, trainer.epoch, cfg.train.shuffle);
        let skip = (trainer.batch as usize * bs).min(n);
        let mut frames = stream_frames(train, order[skip..].to_vec(), cfg.train.prefetch);
        loop {
            if trainer.step() >= max_steps {
                break 'epochs;
            }
            let chunk: Vec<FrameSample> = frames.by_ref().take(bs).collect::<Result<_>>()?;
            if chunk.is_empty() {
                break;
            }
            let buffers = snapshot_buffers(&trainer.model)?;
            let rec = match trainer.train_step(&chunk) {
                Ok(r) => r,
                Err(Error::Numeric(msg)) => {
                    restore_buffers(&trainer.model, &buffers)?;
                    let path = out.join(LAST_GOOD_CHECKPOINT);
                    trainer.checkpoint()?.save(&path)?;
                    return Err(Error::Numeric(format!("{msg}; last good state saved to {}", path.display())));
                }
                Err(e) => return Err(e),
            };
            trainer.batch += 1;
            serde_json::to_writer(&mut log, &rec)?;
            log.write_all(b"\n")?;
            log::info!(
                "epoch {} step {} l_det {:.5} l_seg {:.5} l_mtl {:.5}",
                rec.epoch,
                rec.step,
                rec.l_det,
                rec.l_seg,
                rec.l_mtl
            );
            records.push(rec);
        }
        trainer.epoch += 1;
        trainer.batch = 0;
        if trainer.epoch as usize % cfg.train.checkpoint_every.max(1) == 0 {
            trainer.checkpoint()?.save(&latest)?;
        }
    }
    log.flush()?;
    trainer.checkpoint()?.save(&latest)?;
    Ok(TrainOutcome {
        checkpoint: latest,
        records,
    })
}

fn snapshot_buffers(model: &RefNet) -> Result<Vec<(String, Tensor)>> {
    Ok(model
        .store
        .buffers()
        .iter()
        .map(|(k, v)| (k.clone(), v.as_tensor().copy()))
        .map(|(k, t)| t.map(|t| (k, t)))
        .collect::<std::result::Result<_, _>>()?)
}

fn restore_buffers(model: &RefNet, saved: &[(String, Tensor)]) -> Result<()> {
    for (k, t) in saved {
        model.store.assign(k, t)?;
    }
    Ok(())
}

/// Reads the training log written by [`run_training`].
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::from_io(e, path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Dense maps for one frame; absent tasks are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub det: Option<DetectionPrediction>,
    pub seg: Option<SegmentationPrediction>,
}

/// Anything that maps a frame to prediction maps.
pub trait Predictor {
    fn tasks(&self) -> Tasks;
    fn predict(&mut self, frame: &FrameSample) -> Result<FramePrediction>;
    fn param_count(&self) -> usize {
        0
    }
    fn model_size_bytes(&self) -> usize {
        0
    }
}

/// Runs the network in inference mode, one frame at a time.
pub struct ModelPredictor {
    pub cfg: RunConfig,
    pub model: RefNet,
}

impl ModelPredictor {
    pub fn new(cfg: RunConfig, model: RefNet) -> Self {
        Self { cfg, model }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self::new(ck.config.clone(), ck.build_model()?))
    }
}

fn to_f32_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
}

/// Splits batched head outputs into per-frame maps.
pub fn predict_frames(model: &RefNet, cfg: &RunConfig, frames: &[FrameSample]) -> Result<Vec<FramePrediction>> {
    let dtype = model.store.dtype();
    let rds: Vec<_> = frames.iter().map(|f| &f.rd).collect();
    let cams: Vec<_> = frames.iter().map(|f| &f.camera).collect();
    let rd = rd_batch(&rds, &cfg.geometry, dtype)?;
    let image = image_batch(&cams, dtype)?;
    let out = model.forward(&rd, &image, Phase::Infer, None)?;
    let (r, a) = cfg.geometry.detection_hw();
    let (rs, _) = cfg.geometry.segmentation_hw();
    let cls = out.cls.as_ref().map(to_f32_vec).transpose()?;
    let reg = out.reg.as_ref().map(to_f32_vec).transpose()?;
    let seg = out.seg.as_ref().map(to_f32_vec).transpose()?;
    let mut preds = Vec::with_capacity(frames.len());
    for i in 0..frames.len() {
        let det = match (&cls, &reg) {
            (Some(c), Some(g)) => Some(DetectionPrediction {
                cls: ndarray::Array2::from_shape_vec((r, a), c[i * r * a..(i + 1) * r * a].to_vec())
                    .map_err(|e| Error::shape(e.to_string()))?,
                reg: ndarray::Array3::from_shape_vec((2, r, a), g[i * 2 * r * a..(i + 1) * 2 * r * a].to_vec())
                    .map_err(|e| Error::shape(e.to_string()))?,
            }),
            _ => None,
        };
        let seg = seg
            .as_ref()
            .map(|s| {
                ndarray::Array2::from_shape_vec((rs, a), s[i * rs * a..(i + 1) * rs * a].to_vec())
                    .map(|seg| SegmentationPrediction { seg })
                    .map_err(|e| Error::shape(e.to_string()))
            })
            .transpose()?;
        preds.push(FramePrediction { det, seg });
    }
    Ok(preds)
}

impl Predictor for ModelPredictor {
    fn tasks(&self) -> Tasks {
        self.cfg.tasks
    }

    fn predict(&mut self, frame: &FrameSample) -> Result<FramePrediction> {
        Ok(predict_frames(&self.model, &self.cfg, std::slice::from_ref(frame))?.remove(0))
    }

    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    fn model_size_bytes(&self) -> usize {
        self.model.param_count() * self.model.store.dtype().size_in_bytes()
    }
}

/// Emits the ground-truth encoding of each frame: a perfect model.
pub struct OraclePredictor {
    pub tasks: Tasks,
    pub cfg: RunConfig,
}

impl Predictor for OraclePredictor {
    fn tasks(&self) -> Tasks {
        self.tasks
    }

    fn predict(&mut self, frame: &FrameSample) -> Result<FramePrediction> {
        let det = self
            .tasks
            .detection()
            .then(|| encode_detection_targets(&frame.labels, &self.cfg.detection_grid()).map(Into::into))
            .transpose()?;
        let seg = self
            .tasks
            .segmentation()
            .then(|| SegmentationPrediction::from(&frame.freespace));
        Ok(FramePrediction { det, seg })
    }
}

/// Scores `predictor` on every frame of `ds`, in manifest order.
pub fn evaluate(predictor: &mut dyn Predictor, ds: &Dataset, eval: &EvalConfig) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let det_grid = ds.manifest.detection_grid;
    let seg_grid = ds.manifest.segmentation_grid;
    let mut acc = EvalAccumulator::default();
    for i in 0..ds.len() {
        let frame = ds.get(i)?;
        let pred = predictor.predict(&frame)?;
        if let Some(det) = &pred.det {
            let found = decode_detections(det, &det_grid, eval.conf_threshold);
            acc.add_detection(&match_and_score(&found, &frame.labels, eval.iou_threshold));
        }
        if let Some(seg) = &pred.seg {
            acc.add_iou(miou(seg, &frame.freespace, &seg_grid, eval.miou));
        }
    }
    let tasks = predictor.tasks();
    let mut report = acc.report(tasks.detection(), tasks.segmentation());
    report.param_count = predictor.param_count();
    report.model_size_bytes = predictor.model_size_bytes();
    Ok(report)
}

pub fn run_eval(ck: &Checkpoint, ds: &Dataset, conf_threshold: Option<f64>) -> Result<MetricsReport> {
    check_grids(&ck.config, ds)?;
    let mut eval = ck.config.eval.clone();
    if let Some(t) = conf_threshold {
        eval.conf_threshold = t;
    }
    evaluate(&mut ModelPredictor::from_checkpoint(ck)?, ds, &eval)
}

/// Times one prediction per frame and fills the throughput fields.
pub fn benchmark(predictor: &mut dyn Predictor, ds: &Dataset) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut seconds = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let frame = ds.get(i)?;
        let t0 = Instant::now();
        std::hint::black_box(predictor.predict(&frame)?);
        seconds.push(t0.elapsed().as_secs_f64());
    }
    let (fps, avg, sigma) = fps_stats(&seconds);
    Ok(MetricsReport {
        fps,
        avg_fps: Some(avg),
        sigma_fps: Some(sigma),
        param_count: predictor.param_count(),
        model_size_bytes: predictor.model_size_bytes(),
        ..MetricsReport::default()
    })
}

pub fn run_bench(ck: &Checkpoint, ds: &Dataset) -> Result<MetricsReport> {
    check_grids(&ck.config, ds)?;
    benchmark(&mut ModelPredictor::from_checkpoint(ck)?, ds)
}

/// Decoded output for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRecord {
    pub frame_id: u64,
    pub detections: Vec<Detection>,
    /// Cells predicted drivable.
    pub free_cells: Option<usize>,
}

pub fn run_infer(ck: &Checkpoint, ds: &Dataset, conf_threshold: Option<f64>) -> Result<Vec<InferRecord>> {
    check_grids(&ck.config, ds)?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let threshold = conf_threshold.unwrap_or(ck.config.eval.conf_threshold);
    let mut predictor = ModelPredictor::from_checkpoint(ck)?;
    let mut out = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let frame = ds.get(i)?;
        let pred = predictor.predict(&frame)?;
        out.push(InferRecord {
            frame_id: frame.frame_id,
            detections: pred
                .det
                .as_ref()
                .map(|d| decode_detections(d, &ds.manifest.detection_grid, threshold))
                .unwrap_or_default(),
            free_cells: pred
                .seg
                .as_ref()
                .map(|s| s.seg.iter().filter(|&&p| p as f64 >= ck.config.eval.miou.threshold).count()),
        });
    }
    Ok(out)
}
