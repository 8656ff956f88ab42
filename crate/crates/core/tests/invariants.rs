//! Randomized structural invariants checked against independent oracles.

mod common;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refnet::datamodel::{PolarGridSpec, VehicleLabel};
use refnet::nn::camera::{reparameterize, LatentDistribution, LatentSampling};
use refnet::nn::layers::bilinear_resize;
use refnet::synth::{rasterize_freespace, RadarConfig, SceneConfig};

fn ok(r: Result<usize, String>) {
    if let Err(e) = r {
        panic!("{e}");
    }
}

#[test]
fn rearrangement_is_a_bijection() {
    ok(common::repeat(300, 11, common::rearrange_trial));
}

#[test]
fn channel_swaps_are_involutions() {
    ok(common::repeat(300, 12, common::swap_trial));
}

#[test]
fn pre_encoder_commutes_with_doppler_rotation() {
    let (pre, g) = common::mimo_fixture(13);
    ok(common::repeat(100, 13, |rng| common::mimo_shift_trial(rng, &pre, &g)));
}

#[test]
fn bilinear_resize_properties() {
    ok(common::repeat(300, 14, common::bilinear_trial));
}

#[test]
fn bilinear_hand_example() {
    let x = Tensor::new(&[[[[1.0f64, 2.0], [3.0, 4.0]]]], &Device::Cpu).unwrap();
    let y = bilinear_resize(&x, 3, 3).unwrap();
    let v: Vec<Vec<f64>> = y.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
    assert!((v[1][1] - 2.5).abs() < 1e-12);
    // corners clamp to the source corners
    assert_eq!((v[0][0], v[2][2]), (1.0, 4.0));
}

#[test]
fn detection_targets_round_trip() {
    let grid = PolarGridSpec::detection();
    ok(common::repeat(300, 15, |rng| common::roundtrip_trial(rng, &grid)));
}

#[test]
fn greedy_matching_is_maximum() {
    ok(common::repeat(300, 16, common::matching_trial));
}

#[test]
fn noise_free_frames_are_sparse_and_folded() {
    let radar = RadarConfig {
        noise_sigma: 0.0,
        ..RadarConfig::default()
    };
    ok(common::repeat(10, 17, |rng| common::signal_trial(rng, &radar)));
}

#[test]
fn adding_a_vehicle_never_frees_a_cell() {
    use rand::Rng;
    let scene = SceneConfig::default();
    let grid = PolarGridSpec::segmentation();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..20 {
        let mut labels = Vec::new();
        let mut before = rasterize_freespace(&labels, &scene, &grid);
        for id in 0..3 {
            let x = rng.random_range(-5.0..5.0f64);
            let y = rng.random_range(5.0..45.0f64);
            labels.push(VehicleLabel::new(id, x.hypot(y), x.atan2(y).to_degrees()));
            let after = rasterize_freespace(&labels, &scene, &grid);
            for (a, b) in after.mask.iter().zip(before.mask.iter()) {
                assert!(*a <= *b, "a cell became free when a vehicle was added");
            }
            before = after;
        }
    }
}

#[test]
fn sampled_latent_has_unit_variance() {
    let n = 10_000;
    let dist = LatentDistribution {
        mu: Tensor::zeros((n, 4), DType::F64, &Device::Cpu).unwrap(),
        log_var: Tensor::zeros((n, 4), DType::F64, &Device::Cpu).unwrap(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let z = reparameterize(&dist, LatentSampling::Sample(&mut rng)).unwrap();
    let var: Vec<f64> = z.sqr().unwrap().mean(0).unwrap().to_vec1().unwrap();
    let mean: Vec<f64> = z.mean(0).unwrap().to_vec1().unwrap();
    for (m, v) in mean.iter().zip(&var) {
        let sample_var = (v - m * m) * n as f64 / (n - 1) as f64;
        assert!((sample_var - 1.0).abs() < 0.05, "variance {sample_var}");
    }
    let fixed = reparameterize(&dist, LatentSampling::Mean).unwrap();
    assert_eq!(
        fixed.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
        dist.mu.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    );
}
