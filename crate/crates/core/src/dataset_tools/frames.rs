//! K-means over downscaled grayscale frames.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data_model::{Image, Sequence};
use crate::error::{Error, Result};

pub const DESCRIPTOR_SIDE: usize = 16;
pub const MAX_ITERATIONS: usize = 300;
pub const TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameDescriptor {
    pub frame_index: usize,
    pub feature: Vec<f64>,
}

/// Area-averaged `side × side` grayscale thumbnail, flattened row-major.
pub fn thumbnail(rgb: &Image, side: usize) -> Vec<f64> {
    let (h, w) = rgb.size();
    let data = rgb.data();
    let mut sums = vec![0.0; side * side];
    let mut counts = vec![0usize; side * side];
    for y in 0..h {
        let ty = y * side / h;
        for x in 0..w {
            let tx = x * side / w;
            let gray = (0..rgb.channels()).map(|c| data[[c, y, x]] as f64).sum::<f64>() / rgb.channels() as f64;
            sums[ty * side + tx] += gray;
            counts[ty * side + tx] += 1;
        }
    }
    sums.iter().zip(&counts).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect()
}

pub fn frame_descriptors(seq: &Sequence) -> Vec<FrameDescriptor> {
    seq.frames
        .iter()
        .enumerate()
        .map(|(i, f)| FrameDescriptor {
            frame_index: i,
            feature: thumbnail(&f.rgb, DESCRIPTOR_SIDE),
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// `k × d`.
    pub centroids: Array2<f64>,
    pub assignment: Vec<usize>,
    pub iterations: usize,
}

fn nearest(centroids: &Array2<f64>, p: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.axis_iter(Axis(0)).enumerate() {
        let d = sq_dist(c.as_slice().expect("row-major"), p);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// Lloyd iterations from a k-means++ start. Stops when no centroid moves
/// more than [`TOLERANCE`] or after [`MAX_ITERATIONS`].
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::Argument(format!("k = {k} must lie in 1..={}", points.len())));
    }
    let d = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::zeros((k, d));
    let first = rng.random_range(0..points.len());
    centroids.row_mut(0).assign(&ndarray::ArrayView1::from(&points[first]));
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    for j in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &di) in dist.iter().enumerate() {
                if r < di {
                    chosen = i;
                    break;
                }
                r -= di;
            }
            chosen
        } else {
            // Every point coincides with a chosen center.
            0
        };
        centroids.row_mut(j).assign(&ndarray::ArrayView1::from(&points[pick]));
        for (i, p) in points.iter().enumerate() {
            dist[i] = dist[i].min(sq_dist(p, &points[pick]));
        }
    }

    let mut assignment = vec![0; points.len()];
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        for (i, p) in points.iter().enumerate() {
            assignment[i] = nearest(&centroids, p);
        }
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            let mut row = sums.row_mut(a);
            row += &ndarray::ArrayView1::from(p);
            counts[a] += 1;
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let new = sums.row(j).mapv(|v| v / counts[j] as f64);
            shift = shift.max(sq_dist(new.as_slice().unwrap(), centroids.row(j).as_slice().unwrap()).sqrt());
            centroids.row_mut(j).assign(&new);
        }
        if shift <= TOLERANCE {
            break;
        }
    }
    for (i, p) in points.iter().enumerate() {
        assignment[i] = nearest(&centroids, p);
    }
    Ok(KMeans {
        centroids,
        assignment,
        iterations,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    /// Strictly increasing frame indices.
    pub indices: Vec<usize>,
    /// Clusters that ended up empty and contributed no frame.
    pub collapsed: usize,
}

/// One frame per cluster: the member nearest the centroid, ties to the
/// lowest frame index.
pub fn select_representative_frames(seq: &Sequence, k: usize, seed: u64) -> Result<Selection> {
    if k == 0 || k > seq.len() {
        return Err(Error::Argument(format!("k = {k} must lie in 1..={} for {}", seq.len(), seq.name)));
    }
    let desc = frame_descriptors(seq);
    let points: Vec<Vec<f64>> = desc.into_iter().map(|d| d.feature).collect();
    let km = kmeans(&points, k, seed)?;
    let mut indices = Vec::with_capacity(k);
    let mut collapsed = 0;
    for (j, c) in km.centroids.axis_iter(Axis(0)).enumerate() {
        let c = c.as_slice().expect("row-major");
        let best = points
            .iter()
            .enumerate()
            .filter(|(i, _)| km.assignment[*i] == j)
            .map(|(i, p)| (i, sq_dist(p, c)))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd <= d => best,
                _ => Some((i, d)),
            });
        match best {
            Some((i, _)) => indices.push(i),
            None => collapsed += 1,
        }
    }
    indices.sort_unstable();
    indices.dedup();
    Ok(Selection { indices, collapsed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{DegradationProfile, TriModalFrame};
    use std::collections::BTreeMap;

    #[test]
    fn k_equals_frame_count_selects_all() {
        let seq = crate::data_model::generate_synthetic_sequence(6, &DegradationProfile::none(), 3).unwrap();
        assert_eq!(select_representative_frames(&seq, 6, 0).unwrap().indices, (0..6).collect::<Vec<_>>());
        assert!(select_representative_frames(&seq, 7, 0).is_err());
    }

    #[test]
    fn identical_frames_pick_index_zero() {
        let frame = TriModalFrame::new(Image::filled(3, 8, 8, 0.4), Image::zeros(1, 8, 8), Image::zeros(1, 8, 8), 0).unwrap();
        let mut ann = BTreeMap::new();
        ann.insert(0, crate::data_model::BoundingBox::new(1.0, 1.0, 2.0, 2.0).unwrap());
        let seq = Sequence::new("same", vec![frame; 5], ann).unwrap();
        let sel = select_representative_frames(&seq, 1, 9).unwrap();
        assert_eq!(sel.indices, vec![0]);
        let sel = select_representative_frames(&seq, 3, 9).unwrap();
        assert_eq!(sel.indices, vec![0]);
        assert_eq!(sel.collapsed, 2);
    }

    #[test]
    fn thumbnail_averages_blocks() {
        let img = Image::from_array(ndarray::Array3::from_shape_fn((3, 4, 4), |(_, y, _)| if y < 2 { 0.0 } else { 1.0 }));
        assert_eq!(thumbnail(&img, 2), vec![0.0, 0.0, 1.0, 1.0]);
    }
}
