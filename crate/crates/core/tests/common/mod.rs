//! Randomized oracle trials shared by the invariant tests and the acceptance
//! harness. Every trial draws its inputs from the given generator and returns
//! a description of the first violation it finds.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use num_complex::Complex32;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use refnet::datamodel::{encode_detection_targets, ComplexRdTensor, PolarGridSpec, VehicleLabel};
use refnet::eval::{box_iou, decode_detections, match_and_score, Detection, BOX_LATERAL, BOX_LONGITUDINAL};
use refnet::nn::layers::{bilinear_resize, swap_channel_height, swap_channel_width, ParamStore, Phase};
use refnet::nn::radar::{rearrange_complex, restore_complex, MimoPreEncoder};
use refnet::nn::Geometry;
use refnet::synth::{fold_doppler, synthesize_frame, CameraIntrinsics, RadarConfig, SceneConfig};

pub type Trial = Result<(), String>;

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
}

/// Complex-to-real stacking and its inverse compose to the identity both ways.
pub fn rearrange_trial(rng: &mut ChaCha8Rng) -> Trial {
    let dims = (rng.random_range(1..5), rng.random_range(1..9), rng.random_range(1..9));
    let data = Array3::from_shape_fn(dims, |_| {
        Complex32::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))
    });
    let rd = ComplexRdTensor::new(data).map_err(|e| e.to_string())?;
    let real = rearrange_complex(&rd, dims).map_err(|e| e.to_string())?;
    if real.dim() != (2 * dims.0, dims.1, dims.2) {
        return Err(format!("real layout {:?} for complex {dims:?}", real.dim()));
    }
    if restore_complex(&real).map_err(|e| e.to_string())? != rd {
        return Err(format!("restore(rearrange(x)) != x for {dims:?}"));
    }
    let again = rearrange_complex(&restore_complex(&real).unwrap(), dims).unwrap();
    if again != real {
        return Err(format!("rearrange(restore(y)) != y for {dims:?}"));
    }
    Ok(())
}

/// Both channel swaps are involutions and move elements where they claim to.
pub fn swap_trial(rng: &mut ChaCha8Rng) -> Trial {
    let dims: Vec<usize> = (0..4).map(|_| rng.random_range(1..6)).collect();
    let x = random_tensor(rng, &dims);
    let xs = values(&x);
    for (name, swap) in [
        ("channel/width", swap_channel_width as fn(&Tensor) -> refnet::Result<Tensor>),
        ("channel/height", swap_channel_height),
    ] {
        let once = swap(&x).map_err(|e| e.to_string())?;
        let twice = swap(&once).map_err(|e| e.to_string())?;
        if values(&twice) != xs {
            return Err(format!("{name} swap is not an involution on {dims:?}"));
        }
    }
    let (b, c, h, w) = (dims[0] - 1, dims[1] - 1, dims[2] - 1, dims[3] - 1);
    let at = |t: &Tensor, i: [usize; 4]| -> f64 {
        t.get(i[0]).unwrap().get(i[1]).unwrap().get(i[2]).unwrap().get(i[3]).unwrap().to_scalar().unwrap()
    };
    let sw = swap_channel_width(&x).unwrap();
    if at(&sw, [b, w, h, c]) != at(&x, [b, c, h, w]) {
        return Err("channel/width swap misplaces elements".into());
    }
    Ok(())
}

fn roll_last(x: &Tensor, shift: usize) -> Tensor {
    let d = x.dim(3).unwrap();
    let s = shift % d;
    if s == 0 {
        return x.clone();
    }
    Tensor::cat(&[x.narrow(3, d - s, s).unwrap(), x.narrow(3, 0, d - s).unwrap()], 3).unwrap()
}

/// A pre-encoder with random weights, in inference mode.
pub fn mimo_fixture(seed: u64) -> (MimoPreEncoder, Geometry) {
    let geometry = Geometry {
        rx_channels: 2,
        doppler_bins: 32,
        delta: 2,
        range_bins: 16,
        ..Geometry::tiny()
    };
    let mut store = ParamStore::new(DType::F64, seed);
    let pre = MimoPreEncoder::new(&mut store, "pre", &geometry, 5).unwrap();
    (pre, geometry)
}

/// Circularly shifting the input along Doppler shifts the output identically.
pub fn mimo_shift_trial(rng: &mut ChaCha8Rng, pre: &MimoPreEncoder, g: &Geometry) -> Trial {
    let x = random_tensor(rng, &[1, 2 * g.rx_channels, g.range_bins, g.doppler_bins]);
    let shift = rng.random_range(1..g.doppler_bins);
    let a = roll_last(&pre.forward(&x, Phase::Infer).map_err(|e| e.to_string())?, shift);
    let b = pre.forward(&roll_last(&x, shift), Phase::Infer).map_err(|e| e.to_string())?;
    let err = values(&(a - b).unwrap().abs().unwrap()).into_iter().fold(0.0, f64::max);
    if err > 1e-9 {
        return Err(format!("shift {shift}: outputs differ by {err}"));
    }
    Ok(())
}

/// Identity at equal size, constants preserved, outputs within the input range.
pub fn bilinear_trial(rng: &mut ChaCha8Rng) -> Trial {
    let (c, h, w) = (rng.random_range(1..4), rng.random_range(1..8), rng.random_range(1..8));
    let (oh, ow) = (rng.random_range(1..10), rng.random_range(1..10));
    let x = random_tensor(rng, &[1, c, h, w]);
    let same = bilinear_resize(&x, h, w).map_err(|e| e.to_string())?;
    if values(&same) != values(&x) {
        return Err(format!("resize to the same {h}x{w} changed values"));
    }
    let v = rng.random_range(-5.0..5.0);
    let k = (Tensor::ones((1, c, h, w), DType::F64, &Device::Cpu).unwrap() * v).unwrap();
    let out = values(&bilinear_resize(&k, oh, ow).unwrap());
    if let Some(bad) = out.iter().find(|&&o| (o - v).abs() > 1e-12) {
        return Err(format!("constant {v} became {bad} at {h}x{w} -> {oh}x{ow}"));
    }
    let xs = values(&x);
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let out = values(&bilinear_resize(&x, oh, ow).unwrap());
    if out.iter().any(|&o| o < lo - 1e-12 || o > hi + 1e-12) {
        return Err(format!("resize {h}x{w} -> {oh}x{ow} left the input range"));
    }
    Ok(())
}

/// Up to eight labels on distinct, pairwise non-adjacent cells of `grid`.
/// Physical vehicles are at least a cell apart at every resolution used here,
/// so adjacent positives never need to be resolved.
pub fn random_labels(rng: &mut ChaCha8Rng, grid: &PolarGridSpec) -> Vec<VehicleLabel> {
    let n = rng.random_range(0..=8);
    let mut cells: Vec<(usize, usize)> = Vec::new();
    let mut labels = Vec::new();
    while labels.len() < n {
        let r = rng.random_range(grid.range_min..grid.range_max());
        let a = rng.random_range(grid.azimuth_min..grid.azimuth_max());
        let Some((rb, ab)) = grid.bin_of(r, a) else { continue };
        if cells.iter().any(|&(cr, ca)| cr.abs_diff(rb) <= 1 && ca.abs_diff(ab) <= 1) {
            continue;
        }
        cells.push((rb, ab));
        labels.push(VehicleLabel::new(labels.len() as i64, r, a));
    }
    labels
}

/// Encoding then decoding recovers every label to 1e-4 m and 1e-4 deg.
pub fn roundtrip_trial(rng: &mut ChaCha8Rng, grid: &PolarGridSpec) -> Trial {
    let labels = random_labels(rng, grid);
    let targets = encode_detection_targets(&labels, grid).map_err(|e| e.to_string())?;
    let dets = decode_detections(&targets.into(), grid, 0.5);
    if dets.len() != labels.len() {
        return Err(format!("{} labels decoded into {} detections", labels.len(), dets.len()));
    }
    for l in &labels {
        let hit = dets
            .iter()
            .any(|d| (d.range - l.range).abs() <= 1e-4 && (d.azimuth - l.azimuth).abs() <= 1e-4);
        if !hit {
            return Err(format!("label at ({}, {}) not recovered", l.range, l.azimuth));
        }
    }
    Ok(())
}

fn boxes_overlap(a: &VehicleLabel, b: &VehicleLabel) -> bool {
    let (ax, ay) = refnet::datamodel::polar_to_cartesian(a.range, a.azimuth);
    let (bx, by) = refnet::datamodel::polar_to_cartesian(b.range, b.azimuth);
    (ax - bx).abs() < BOX_LATERAL && (ay - by).abs() < BOX_LONGITUDINAL
}

/// Ground truth without overlapping boxes, and predictions that are either
/// jittered copies of it or placed at random.
pub fn matching_instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<VehicleLabel>) {
    let n_gt = rng.random_range(0..=6);
    let mut gts: Vec<VehicleLabel> = Vec::new();
    while gts.len() < n_gt {
        let x: f64 = rng.random_range(-8.0..8.0);
        let y: f64 = rng.random_range(4.0..30.0);
        let label = VehicleLabel::new(gts.len() as i64, x.hypot(y), x.atan2(y).to_degrees());
        if gts.iter().all(|g| !boxes_overlap(g, &label)) {
            gts.push(label);
        }
    }
    let n_pred = rng.random_range(0..=6);
    let preds = (0..n_pred)
        .map(|_| {
            let (range, azimuth) = if !gts.is_empty() && rng.random_bool(0.7) {
                let g = &gts[rng.random_range(0..gts.len())];
                (g.range + rng.random_range(-1.5..1.5), g.azimuth + rng.random_range(-2.0..2.0))
            } else {
                let x: f64 = rng.random_range(-8.0..8.0);
                let y: f64 = rng.random_range(4.0..30.0);
                (x.hypot(y), x.atan2(y).to_degrees())
            };
            Detection {
                range,
                azimuth,
                confidence: rng.random_range(0.0..1.0),
            }
        })
        .collect();
    (preds, gts)
}

/// Size of a maximum matching on the IoU >= threshold graph, by exhaustive search.
pub fn brute_force_tp(preds: &[Detection], gts: &[VehicleLabel], threshold: f64) -> usize {
    fn go(i: usize, used: &mut Vec<bool>, edges: &[Vec<usize>]) -> usize {
        if i == edges.len() {
            return 0;
        }
        let mut best = go(i + 1, used, edges);
        for &j in &edges[i] {
            if !used[j] {
                used[j] = true;
                best = best.max(1 + go(i + 1, used, edges));
                used[j] = false;
            }
        }
        best
    }
    let edges: Vec<Vec<usize>> = preds
        .iter()
        .map(|p| {
            (0..gts.len())
                .filter(|&j| box_iou((p.range, p.azimuth), (gts[j].range, gts[j].azimuth)) >= threshold)
                .collect()
        })
        .collect();
    go(0, &mut vec![false; gts.len()], &edges)
}

/// The greedy matcher finds a maximum matching.
pub fn matching_trial(rng: &mut ChaCha8Rng) -> Trial {
    let (preds, gts) = matching_instance(rng);
    let greedy = match_and_score(&preds, &gts, 0.5);
    let optimal = brute_force_tp(&preds, &gts, 0.5);
    if greedy.tp != optimal {
        return Err(format!("greedy TP {} vs optimal {optimal}", greedy.tp));
    }
    if greedy.tp + greedy.fp != preds.len() || greedy.tp + greedy.fn_ != gts.len() {
        return Err("TP/FP/FN do not partition the inputs".into());
    }
    Ok(())
}

/// A noise-free frame puts each target on exactly `n_tx` Doppler bins of its
/// range bin on every channel, at the folded positions, and the range
/// profile of each of those Doppler columns peaks at the target's bin.
pub fn signal_trial(rng: &mut ChaCha8Rng, radar: &RadarConfig) -> Trial {
    let scene = SceneConfig::default();
    let grids = (&PolarGridSpec::detection(), &PolarGridSpec::segmentation());
    let frame = synthesize_frame(&scene, radar, &CameraIntrinsics::default(), grids, 0, rng.random())
        .map_err(|e| e.to_string())?;
    let rd = &frame.rd.data;
    let expected_total = frame.labels.len() * radar.n_tx * radar.n_rx;
    if frame.rd.nonzero_count() != expected_total {
        return Err(format!("{} nonzero entries, expected {expected_total}", frame.rd.nonzero_count()));
    }
    for l in &frame.labels {
        let rb = radar.range_bin(l.range).ok_or("label outside the radar range")?;
        let db = radar.doppler_bin(l.doppler);
        let mut folds: Vec<usize> = (1..=radar.n_tx)
            .map(|k| fold_doppler(db, k, radar.delta, radar.d_max).unwrap())
            .collect();
        folds.sort_unstable();
        for ch in 0..radar.n_rx {
            let nz: Vec<usize> = (0..radar.d_max).filter(|&d| rd[[ch, rb, d]].norm() != 0.0).collect();
            if nz != folds {
                return Err(format!("label {} channel {ch}: Doppler support {nz:?}, expected {folds:?}", l.id));
            }
            for &d in &folds {
                let peak = (0..radar.range_bins).map(|r| rd[[ch, r, d]].norm()).fold(0f32, f32::max);
                // equal amplitudes at different phases differ by rounding only
                if rd[[ch, rb, d]].norm() < peak * (1.0 - 1e-6) {
                    return Err(format!("label {} channel {ch} Doppler {d}: range peak not at bin {rb}", l.id));
                }
            }
        }
    }
    Ok(())
}

/// Runs `n` trials from one seed, stopping at the first failure.
pub fn repeat(n: usize, seed: u64, mut trial: impl FnMut(&mut ChaCha8Rng) -> Trial) -> Result<usize, String> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        trial(&mut rng).map_err(|e| format!("trial {i}: {e}"))?;
    }
    Ok(n)
}

/// Compares the autodiff gradient of `loss` with respect to `var` against a
/// fourth-order central difference at the flat indices `coords`. The
/// variable is restored before returning.
pub fn fd_check(
    var: &candle_core::Var,
    coords: &[usize],
    h: f64,
    rel: f64,
    abs: f64,
    loss: &dyn Fn() -> Tensor,
) -> Trial {
    let grads = loss().backward().map_err(|e| e.to_string())?;
    let analytic = values(grads.get(var).ok_or("variable takes no part in the loss")?);
    let base = values(var.as_tensor());
    let shape = var.shape().clone();
    let set = |v: Vec<f64>| var.set(&Tensor::from_vec(v, &shape, &Device::Cpu).unwrap()).unwrap();
    let at = |i: usize, offset: f64| {
        let mut shifted = base.clone();
        shifted[i] += offset;
        set(shifted);
        loss().to_scalar::<f64>().unwrap()
    };
    let mut verdict = Ok(());
    for &i in coords {
        let fd = (8.0 * (at(i, h) - at(i, -h)) - (at(i, 2.0 * h) - at(i, -2.0 * h))) / (12.0 * h);
        if (fd - analytic[i]).abs() > rel * fd.abs().max(analytic[i].abs()) + abs {
            verdict = Err(format!("coordinate {i}: finite difference {fd}, autodiff {}", analytic[i]));
            break;
        }
    }
    set(base);
    verdict
}
