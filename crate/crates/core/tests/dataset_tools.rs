use nalgebra::Matrix3;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trimodal::data_model::{generate_with_scene, DegradationProfile, Image, SceneConfig, Sequence};
use trimodal::dataset_tools::*;

fn smooth_image(h: usize, w: usize) -> Image {
    Image::from_array(Array3::from_shape_fn((1, h, w), |(_, y, x)| {
        (0.5 + 0.3 * (x as f32 * 0.11).sin() * (y as f32 * 0.07).cos()) as f32
    }))
}

#[test]
fn warp_then_inverse_warp_restores_interior() {
    let img = smooth_image(64, 64);
    let m = Matrix3::new(1.02, 0.03, 1.5, -0.02, 0.98, -2.0, 1e-4, -5e-5, 1.0);
    let fwd = AlignmentMap::from_matrix(m).unwrap();
    let inv = AlignmentMap::from_matrix(m.try_inverse().unwrap()).unwrap();
    let back = apply_alignment(&inv, &apply_alignment(&fwd, &img, 64, 64).unwrap(), 64, 64).unwrap();
    for y in 8..56 {
        for x in 8..56 {
            assert!((back.get(0, y, x) - img.get(0, y, x)).abs() <= 2.0 / 255.0, "({y}, {x})");
        }
    }
}

#[test]
fn identity_map_keeps_image() {
    let img = smooth_image(20, 30);
    assert_eq!(apply_alignment(&AlignmentMap::identity(), &img, 20, 30).unwrap(), img);
}

#[test]
fn affine_model_recovers_affine_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = Matrix3::new(0.9, 0.1, 4.0, -0.05, 1.1, -3.0, 0.0, 0.0, 1.0);
    let truth = AlignmentMap::from_matrix(m).unwrap();
    let pts: Vec<(Point, Point)> = (0..10)
        .map(|_| {
            let p = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
            (p, truth.apply(p))
        })
        .collect();
    let est = estimate_alignment_with(&pts, MotionModel::Affine).unwrap();
    assert!(est.rms_error < 1e-9);
    assert!((est.matrix - m).abs().max() < 1e-9);
}

/// Segment of frame `t` when `segments` equal runs split the sequence.
fn segment_of(t: usize, segments: usize, len: usize) -> usize {
    (t * segments / len).min(segments - 1)
}

fn three_segment_sequence(seed: u64) -> Sequence {
    let scene = SceneConfig {
        segments: 3,
        ..SceneConfig::default()
    };
    generate_with_scene(30, &DegradationProfile::none(), &scene, seed).unwrap()
}

#[test]
fn selected_frames_sit_closest_to_their_own_segment() {
    let seq = three_segment_sequence(9);
    let selection = select_representative_frames(&seq, 3, 0).unwrap();
    // Independent oracle: raw RGB distance to each segment's mean frame.
    let len = seq.len();
    let mut means = vec![Array3::<f64>::zeros(seq.frames[0].rgb.data().dim()); 3];
    let mut counts = [0usize; 3];
    for (t, f) in seq.frames.iter().enumerate() {
        let s = segment_of(t, 3, len);
        means[s] = &means[s] + &f.rgb.data().mapv(f64::from);
        counts[s] += 1;
    }
    for (m, n) in means.iter_mut().zip(counts) {
        *m /= n as f64;
    }
    let mut seen = [false; 3];
    for &t in &selection.indices {
        let px = seq.frames[t].rgb.data().mapv(f64::from);
        let dist: Vec<f64> = means.iter().map(|m| (&px - m).mapv(|v| v * v).sum()).collect();
        let nearest = (0..3).min_by(|&a, &b| dist[a].total_cmp(&dist[b])).unwrap();
        assert_eq!(nearest, segment_of(t, 3, len), "frame {t}");
        seen[nearest] = true;
    }
    assert_eq!(seen, [true; 3]);
}
