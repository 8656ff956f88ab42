//! Turning prediction maps into objects and scoring them.

use serde::{Deserialize, Serialize};

use crate::datamodel::{
    polar_to_cartesian, DetectionPrediction, FreeSpaceMask, PolarGridSpec, SegmentationPrediction, VehicleLabel,
};

/// Box footprint used for IoU matching, in meters.
pub const BOX_LATERAL: f64 = 1.8;
pub const BOX_LONGITUDINAL: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub range: f64,
    pub azimuth: f64,
    pub confidence: f64,
}

/// Local maxima of the classification map above `threshold`, each refined
/// by its regression offsets.
///
/// A cell survives if no 3x3 neighbor is larger; among equal neighbors the
/// one with the lower range bin (then lower azimuth bin) wins.
pub fn decode_detections(pred: &DetectionPrediction, grid: &PolarGridSpec, threshold: f64) -> Vec<Detection> {
    let cls = &pred.cls;
    let (rows, cols) = cls.dim();
    let mut out = Vec::new();
    for r in 0..rows {
        for a in 0..cols {
            let v = cls[[r, a]];
            if (v as f64) < threshold {
                continue;
            }
            let mut peak = true;
            'window: for nr in r.saturating_sub(1)..=(r + 1).min(rows - 1) {
                for na in a.saturating_sub(1)..=(a + 1).min(cols - 1) {
                    if (nr, na) == (r, a) {
                        continue;
                    }
                    let n = cls[[nr, na]];
                    if n > v || (n == v && (nr, na) < (r, a)) {
                        peak = false;
                        break 'window;
                    }
                }
            }
            if peak {
                out.push(Detection {
                    range: grid.range_center(r) + pred.reg[[0, r, a]] as f64 * grid.range_res,
                    azimuth: grid.azimuth_center(a) + pred.reg[[1, r, a]] as f64 * grid.azimuth_res,
                    confidence: v as f64,
                });
            }
        }
    }
    out
}

/// Axis-aligned ego-frame box `(x_min, x_max, y_min, y_max)` around a polar point.
fn ego_box(range: f64, azimuth: f64) -> (f64, f64, f64, f64) {
    let (x, y) = polar_to_cartesian(range, azimuth);
    (
        x - BOX_LATERAL / 2.0,
        x + BOX_LATERAL / 2.0,
        y - BOX_LONGITUDINAL / 2.0,
        y + BOX_LONGITUDINAL / 2.0,
    )
}

pub fn box_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (ax0, ax1, ay0, ay1) = ego_box(a.0, a.1);
    let (bx0, bx1, by0, by1) = ego_box(b.0, b.1);
    let w = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let h = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = w * h;
    let area = BOX_LATERAL * BOX_LONGITUDINAL;
    inter / (2.0 * area - inter)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(prediction index, label index)`
    pub pairs: Vec<(usize, usize)>,
    pub range_abs_err: f64,
    pub azimuth_abs_err: f64,
}

impl MatchResult {
    /// Mean absolute range error over matched pairs (0 without matches).
    pub fn re(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.range_abs_err / self.tp as f64
        }
    }

    pub fn ae(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.azimuth_abs_err / self.tp as f64
        }
    }
}

/// Greedy matching in descending confidence: each prediction takes the
/// unmatched label with the highest IoU, if that IoU reaches the threshold.
pub fn match_and_score(preds: &[Detection], gts: &[VehicleLabel], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| preds[j].confidence.total_cmp(&preds[i].confidence).then(i.cmp(&j)));
    let mut taken = vec![false; gts.len()];
    let mut res = MatchResult::default();
    for i in order {
        let p = &preds[i];
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, _)| !taken[*j])
            .map(|(j, g)| (j, box_iou((p.range, p.azimuth), (g.range, g.azimuth))))
            .filter(|&(_, iou)| iou >= iou_threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((j, _)) => {
                taken[j] = true;
                res.tp += 1;
                res.pairs.push((i, j));
                res.range_abs_err += (p.range - gts[j].range).abs();
                res.azimuth_abs_err += (p.azimuth - gts[j].azimuth).abs();
            }
            None => res.fp += 1,
        }
    }
    res.fn_ = gts.len() - res.tp;
    res
}

/// Precision, recall and F1 in percent from dataset-level counts.
pub fn ap_ar_f1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ap = if tp + fp == 0 {
        0.0
    } else {
        100.0 * tp as f64 / (tp + fp) as f64
    };
    let ar = if tp + fn_ == 0 {
        100.0
    } else {
        100.0 * tp as f64 / (tp + fn_) as f64
    };
    (ap, ar, f1_score(ap, ar))
}

pub fn f1_score(ap: f64, ar: f64) -> f64 {
    if ap + ar > 0.0 {
        2.0 * ap * ar / (ap + ar)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    /// IoU of the free-space class.
    #[default]
    FreeSpace,
    /// Mean of free-space and occupied IoUs.
    TwoClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouOptions {
    pub max_range: f64,
    pub threshold: f64,
    pub mode: IouMode,
}

impl Default for IouOptions {
    fn default() -> Self {
        Self {
            max_range: 50.0,
            threshold: 0.5,
            mode: IouMode::FreeSpace,
        }
    }
}

/// Free-space IoU on range bins `[0, floor(max_range / range_res))`.
pub fn miou(pred: &SegmentationPrediction, gt: &FreeSpaceMask, grid: &PolarGridSpec, opts: IouOptions) -> f64 {
    let rows = (((opts.max_range - grid.range_min) / grid.range_res).floor().max(0.0) as usize)
        .min(pred.seg.nrows())
        .min(gt.mask.nrows());
    let (mut inter, mut union) = ([0usize; 2], [0usize; 2]);
    for r in 0..rows {
        for (p, &g) in pred.seg.row(r).iter().zip(gt.mask.row(r).iter()) {
            let p = (*p as f64 >= opts.threshold) as usize;
            let g = g as usize;
            for class in 0..2 {
                let (pc, gc) = (p == class, g == class);
                inter[class] += (pc && gc) as usize;
                union[class] += (pc || gc) as usize;
            }
        }
    }
    let iou = |c: usize| {
        if union[c] == 0 {
            1.0
        } else {
            inter[c] as f64 / union[c] as f64
        }
    };
    match opts.mode {
        IouMode::FreeSpace => iou(1),
        IouMode::TwoClass => 0.5 * (iou(0) + iou(1)),
    }
}

/// Running totals over a dataset split.
#[derive(Debug, Clone, Default)]
pub struct EvalAccumulator {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    range_abs_err: f64,
    azimuth_abs_err: f64,
    iou_sum: f64,
    iou_frames: usize,
}

impl EvalAccumulator {
    pub fn add_detection(&mut self, m: &MatchResult) {
        self.tp += m.tp;
        self.fp += m.fp;
        self.fn_ += m.fn_;
        self.range_abs_err += m.range_abs_err;
        self.azimuth_abs_err += m.azimuth_abs_err;
    }

    pub fn add_iou(&mut self, iou: f64) {
        self.iou_sum += iou;
        self.iou_frames += 1;
    }

    pub fn detection_frames_seen(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    pub fn report(&self, detection: bool, segmentation: bool) -> MetricsReport {
        let mut r = MetricsReport::default();
        if detection {
            let (ap, ar, f1) = ap_ar_f1(self.tp, self.fp, self.fn_);
            let n = self.tp.max(1) as f64;
            r.ap = Some(ap);
            r.ar = Some(ar);
            r.f1 = Some(f1);
            r.re = Some(self.range_abs_err / n);
            r.ae = Some(self.azimuth_abs_err / n);
        }
        if segmentation && self.iou_frames > 0 {
            r.miou = Some(self.iou_sum / self.iou_frames as f64);
        }
        r
    }
}

/// Frames per second for each timing sample, their mean and population
/// standard deviation.
pub fn fps_stats(frame_seconds: &[f64]) -> (Vec<f64>, f64, f64) {
    let fps: Vec<f64> = frame_seconds.iter().map(|s| 1.0 / s.max(f64::MIN_POSITIVE)).collect();
    if fps.is_empty() {
        return (fps, 0.0, 0.0);
    }
    let n = fps.len() as f64;
    let mean = fps.iter().sum::<f64>() / n;
    let var = fps.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / n;
    (fps, mean, var.sqrt())
}

/// Evaluation summary; absent metrics serialize as `null`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Precision, percent.
    pub ap: Option<f64>,
    /// Recall, percent.
    pub ar: Option<f64>,
    pub f1: Option<f64>,
    /// Mean absolute range error of matched detections, meters.
    pub re: Option<f64>,
    /// Mean absolute azimuth error of matched detections, degrees.
    pub ae: Option<f64>,
    /// Free-space IoU within the evaluation range, as a fraction.
    pub miou: Option<f64>,
    pub fps: Vec<f64>,
    pub avg_fps: Option<f64>,
    pub sigma_fps: Option<f64>,
    pub param_count: usize,
    pub model_size_bytes: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::encode_detection_targets;
    use ndarray::{Array2, Array3};

    fn det_pred(grid: &PolarGridSpec) -> DetectionPrediction {
        DetectionPrediction {
            cls: Array2::zeros((grid.range_bins, grid.azimuth_bins)),
            reg: Array3::zeros((2, grid.range_bins, grid.azimuth_bins)),
        }
    }

    #[test]
    fn decode_single_cell() {
        let grid = PolarGridSpec::detection();
        let mut p = det_pred(&grid);
        p.cls[[50, 112]] = 0.9;
        let d = decode_detections(&p, &grid, 0.5);
        assert_eq!(d.len(), 1);
        assert!((d[0].range - 40.4).abs() < 1e-9);
        assert!((d[0].azimuth - 0.4).abs() < 1e-9);
        assert!((d[0].confidence - 0.9).abs() < 1e-6);
        // agrees with encoding the same label
        let t = encode_detection_targets(&[VehicleLabel::new(0, 40.4, 0.4)], &grid).unwrap();
        let back = decode_detections(&t.into(), &grid, 0.5);
        assert!((back[0].range - 40.4).abs() < 1e-5);
    }

    #[test]
    fn decode_thresholds_and_suppresses() {
        let grid = PolarGridSpec::detection();
        let mut p = det_pred(&grid);
        p.cls[[10, 10]] = 0.1;
        assert!(decode_detections(&p, &grid, 0.2).is_empty());
        p.cls[[10, 10]] = 0.9;
        p.cls[[10, 11]] = 0.8;
        assert_eq!(decode_detections(&p, &grid, 0.2).len(), 1);
        // plateau of equal values: lowest (range, azimuth) wins
        let mut p = det_pred(&grid);
        for a in 20..23 {
            p.cls[[30, a]] = 0.7;
            p.cls[[31, a]] = 0.7;
        }
        let d = decode_detections(&p, &grid, 0.2);
        assert_eq!(d.len(), 1);
        assert!((d[0].range - grid.range_center(30)).abs() < 1e-9);
        assert!((d[0].azimuth - grid.azimuth_center(20)).abs() < 1e-9);
    }

    fn det(range: f64, azimuth: f64, confidence: f64) -> Detection {
        Detection {
            range,
            azimuth,
            confidence,
        }
    }

    #[test]
    fn matching_examples() {
        let gts = [VehicleLabel::new(0, 20.0, 5.0), VehicleLabel::new(1, 50.0, -3.0)];
        let preds: Vec<_> = gts.iter().map(|g| det(g.range, g.azimuth, 0.9)).collect();
        let m = match_and_score(&preds, &gts, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (2, 0, 0));
        assert_eq!(m.re(), 0.0);
        assert_eq!(m.ae(), 0.0);

        let m = match_and_score(&[det(80.0, 30.0, 0.9)], &gts[..1], 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
    }

    #[test]
    fn higher_confidence_matches_first() {
        let gts = [VehicleLabel::new(0, 20.0, 0.0)];
        let preds = [det(20.3, 0.0, 0.4), det(20.1, 0.0, 0.8)];
        let m = match_and_score(&preds, &gts, 0.5);
        assert_eq!(m.pairs, vec![(1, 0)]);
        assert_eq!((m.tp, m.fp), (1, 1));
        assert!((m.re() - 0.1).abs() < 1e-9);
    }

    #[test]
    fn iou_of_shifted_boxes() {
        // 1 m longitudinal shift: overlap 3 x 1.8 of 4 x 1.8 boxes
        let iou = box_iou((20.0, 0.0), (21.0, 0.0));
        assert!((iou - 3.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn f1_rows() {
        for (ap, ar, f1) in [(96.92, 90.68, 93.70), (95.75, 91.35, 93.49), (96.16, 89.43, 92.67)] {
            assert!((f1_score(ap, ar) - f1).abs() <= 0.01, "{ap} {ar}");
        }
        assert!((f1_score(42.0, 42.0) - 42.0).abs() < 1e-12);
        assert_eq!(f1_score(100.0, 0.0), 0.0);
        assert_eq!(ap_ar_f1(0, 0, 0), (0.0, 100.0, 0.0));
        assert_eq!(ap_ar_f1(3, 1, 1), (75.0, 75.0, 75.0));
    }

    #[test]
    fn miou_cases() {
        let grid = PolarGridSpec::segmentation();
        let mut gt = Array2::<u8>::zeros((256, 224));
        gt.slice_mut(ndarray::s![0..60, 100..124]).fill(1);
        let gt = FreeSpaceMask::new(gt).unwrap();
        let same = SegmentationPrediction::from(&gt);
        assert_eq!(miou(&same, &gt, &grid, IouOptions::default()), 1.0);

        let mut other = Array2::<f32>::zeros((256, 224));
        other.slice_mut(ndarray::s![70..80, 0..10]).fill(1.0);
        let disjoint = SegmentationPrediction { seg: other.clone() };
        // the disjoint blob lies beyond 50 m: cropped away, pred empty inside the crop
        assert_eq!(miou(&disjoint, &gt, &grid, IouOptions::default()), 0.0);

        // identical inside 50 m (bins 0..125), arbitrary beyond
        let mut beyond = same.clone();
        beyond.seg.slice_mut(ndarray::s![125.., ..]).fill(0.9);
        assert_eq!(miou(&beyond, &gt, &grid, IouOptions::default()), 1.0);
        beyond.seg[[124, 0]] = 0.9;
        assert!(miou(&beyond, &gt, &grid, IouOptions::default()) < 1.0);

        let empty = FreeSpaceMask::new(Array2::zeros((256, 224))).unwrap();
        let none = SegmentationPrediction::from(&empty);
        assert_eq!(miou(&none, &empty, &grid, IouOptions::default()), 1.0);
    }

    #[test]
    fn fps_population_std() {
        let (fps, mean, sigma) = fps_stats(&[0.5, 0.25]);
        assert_eq!(fps, vec![2.0, 4.0]);
        assert_eq!(mean, 3.0);
        assert_eq!(sigma, 1.0);
    }
}
