//! Thermal-to-RGB alignment from manual point correspondences.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::data_model::Image;
use crate::error::{Error, Result};

/// Homogeneous 3×3 map from thermal pixels to RGB pixels, with `m[2][2] = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentMap {
    pub matrix: Matrix3<f64>,
    /// RMS reprojection error over the fitting correspondences, in pixels.
    pub rms_error: f64,
    pub condition_number: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MotionModel {
    /// Eight degrees of freedom.
    #[default]
    Homography,
    /// Six degrees of freedom; needs only 3 points.
    Affine,
}

pub type Point = (f64, f64);

fn transform(m: &Matrix3<f64>, p: Point) -> Point {
    let v = m * Vector3::new(p.0, p.1, 1.0);
    (v[0] / v[2], v[1] / v[2])
}

impl AlignmentMap {
    pub fn identity() -> Self {
        Self::from_matrix(Matrix3::identity()).expect("identity is invertible")
    }

    /// Normalizes so the bottom-right entry is 1.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let s = m[(2, 2)];
        if s.abs() < 1e-12 {
            return Err(Error::Singular("bottom-right entry is zero".into()));
        }
        let matrix = m / s;
        Ok(Self {
            matrix,
            rms_error: 0.0,
            condition_number: condition_number(&matrix),
        })
    }

    pub fn apply(&self, p: Point) -> Point {
        transform(&self.matrix, p)
    }

    pub fn rms(&self, correspondences: &[(Point, Point)]) -> f64 {
        let n = correspondences.len() as f64;
        let sum: f64 = correspondences
            .iter()
            .map(|&(src, dst)| {
                let (x, y) = self.apply(src);
                (x - dst.0).powi(2) + (y - dst.1).powi(2)
            })
            .sum();
        (sum / n).sqrt()
    }
}

fn condition_number(m: &Matrix3<f64>) -> f64 {
    let sv = m.singular_values();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        sv.max() / min
    }
}

/// Nine whitespace-separated numbers, row-major.
impl fmt::Display for AlignmentMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..3 {
            let row: Vec<String> = (0..3).map(|c| format!("{:e}", self.matrix[(r, c)])).collect();
            writeln!(f, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

impl FromStr for AlignmentMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let values = s
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|e| Error::Parse {
                    line: 1,
                    reason: format!("bad matrix entry {t:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != 9 {
            return Err(Error::Parse {
                line: 1,
                reason: format!("expected 9 numbers, found {}", values.len()),
            });
        }
        Self::from_matrix(Matrix3::from_row_slice(&values))
    }
}

/// Hartley normalization: centroid to the origin, mean distance `sqrt(2)`.
fn normalize(points: &[Point]) -> (Vec<Point>, Matrix3<f64>) {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mean = points.iter().map(|p| (p.0 - cx).hypot(p.1 - cy)).sum::<f64>() / n;
    let s = if mean > 1e-12 { 2f64.sqrt() / mean } else { 1.0 };
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    (points.iter().map(|&p| transform(&t, p)).collect(), t)
}

pub fn estimate_alignment(correspondences: &[(Point, Point)]) -> Result<AlignmentMap> {
    estimate_alignment_with(correspondences, MotionModel::Homography)
}

/// Least-squares fit over all `(thermal, rgb)` correspondences.
pub fn estimate_alignment_with(correspondences: &[(Point, Point)], model: MotionModel) -> Result<AlignmentMap> {
    let min_points = match model {
        MotionModel::Homography => 4,
        MotionModel::Affine => 3,
    };
    if correspondences.len() < min_points {
        return Err(Error::Argument(format!(
            "{min_points} correspondences needed, got {}",
            correspondences.len()
        )));
    }
    let src: Vec<Point> = correspondences.iter().map(|c| c.0).collect();
    let dst: Vec<Point> = correspondences.iter().map(|c| c.1).collect();
    let (s, ts) = normalize(&src);
    let (d, td) = normalize(&dst);
    let hn = match model {
        MotionModel::Homography => dlt(&s, &d)?,
        MotionModel::Affine => affine(&s, &d)?,
    };
    let td_inv = td.try_inverse().ok_or_else(|| Error::Singular("normalizing transform".into()))?;
    let mut map = AlignmentMap::from_matrix(td_inv * hn * ts)?;
    map.rms_error = map.rms(correspondences);
    Ok(map)
}

/// Relative size below which a singular value counts as zero.
const RANK_TOL: f64 = 1e-9;

fn dlt(s: &[Point], d: &[Point]) -> Result<Matrix3<f64>> {
    let n = s.len();
    // At least 9 rows so the SVD exposes the full right null space.
    let mut a = DMatrix::<f64>::zeros((2 * n).max(9), 9);
    for (k, (&(x, y), &(u, v))) in s.iter().zip(d).enumerate() {
        let r = 2 * k;
        a.row_mut(r).copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Singular("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let largest = svd.singular_values[order[0]];
    // A unique solution needs a one-dimensional null space.
    if svd.singular_values[order[7]] <= RANK_TOL * largest {
        return Err(Error::RankDeficient(
            "correspondences do not determine a unique homography (collinear points?)".into(),
        ));
    }
    let h = vt.row(order[8]);
    Ok(Matrix3::from_iterator(h.iter().copied()).transpose())
}

fn affine(s: &[Point], d: &[Point]) -> Result<Matrix3<f64>> {
    let n = s.len();
    let mut a = DMatrix::<f64>::zeros(2 * n, 6);
    let mut b = nalgebra::DVector::<f64>::zeros(2 * n);
    for (k, (&(x, y), &(u, v))) in s.iter().zip(d).enumerate() {
        a.row_mut(2 * k).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0]);
        a.row_mut(2 * k + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0]);
        b[2 * k] = u;
        b[2 * k + 1] = v;
    }
    let svd = a.clone().svd(true, true);
    let sv = &svd.singular_values;
    if sv.min() <= RANK_TOL * sv.max() {
        return Err(Error::RankDeficient("correspondences are collinear".into()));
    }
    let p = svd.solve(&b, 0.0).map_err(|e| Error::Argument(e.to_string()))?;
    Ok(Matrix3::new(p[0], p[1], p[2], p[3], p[4], p[5], 0.0, 0.0, 1.0))
}

/// Warps a thermal image into the RGB frame: each output pixel is sampled
/// bilinearly at the inverse-mapped location; uncovered pixels are 0.
pub fn apply_alignment(map: &AlignmentMap, img: &Image, out_height: usize, out_width: usize) -> Result<Image> {
    let singular = || Error::Singular(format!("alignment matrix is not invertible:\n{map}"));
    let inv = map.matrix.try_inverse().ok_or_else(singular)?;
    if !inv.iter().all(|v| v.is_finite()) {
        return Err(singular());
    }
    let mut out = Image::zeros(img.channels(), out_height, out_width);
    let data = out.data_mut();
    for y in 0..out_height {
        for x in 0..out_width {
            let (sx, sy) = transform(&inv, (x as f64, y as f64));
            for c in 0..img.channels() {
                if let Some(v) = img.sample_bilinear(c, sx, sy) {
                    data[[c, y, x]] = v as f32;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Vec<Point> {
        (0..n).map(|i| ((i % 4) as f64 * 13.0 + 2.0, (i / 4) as f64 * 9.0 + (i % 3) as f64)).collect()
    }

    #[test]
    fn identity_correspondences() {
        let pts: Vec<(Point, Point)> = grid(8).into_iter().map(|p| (p, p)).collect();
        let m = estimate_alignment(&pts).unwrap();
        assert!((m.matrix - Matrix3::identity()).abs().max() < 1e-10);
        assert!(m.rms_error < 1e-10);
    }

    #[test]
    fn translation_recovered() {
        let pts: Vec<(Point, Point)> = grid(6).into_iter().map(|p| (p, (p.0 + 5.0, p.1 + 3.0))).collect();
        let m = estimate_alignment(&pts).unwrap();
        assert!((m.matrix[(0, 2)] - 5.0).abs() < 1e-9 && (m.matrix[(1, 2)] - 3.0).abs() < 1e-9);
        assert!(m.rms_error < 1e-9);
        let a = estimate_alignment_with(&pts, MotionModel::Affine).unwrap();
        assert!((a.matrix[(0, 2)] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        let few: Vec<(Point, Point)> = grid(3).into_iter().map(|p| (p, p)).collect();
        assert!(matches!(estimate_alignment(&few), Err(Error::Argument(_))));
        let line: Vec<(Point, Point)> = (0..6).map(|i| ((i as f64, 2.0 * i as f64), (i as f64, 2.0 * i as f64))).collect();
        assert!(matches!(estimate_alignment(&line), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn text_round_trip() {
        let m = AlignmentMap::from_matrix(Matrix3::new(1.1, 0.02, 3.0, -0.01, 0.95, -2.5, 1e-4, 2e-5, 1.0)).unwrap();
        let back: AlignmentMap = m.to_string().parse().unwrap();
        assert_eq!(back.matrix, m.matrix);
    }

    #[test]
    fn integer_shift_zero_fills() {
        let img = Image::from_array(ndarray::Array3::from_shape_fn((1, 5, 6), |(_, y, x)| (y * 6 + x) as f32 + 1.0));
        let m = AlignmentMap::from_matrix(Matrix3::new(1.0, 0.0, 2.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0)).unwrap();
        let out = apply_alignment(&m, &img, 5, 6).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                let expected = if x >= 2 && y >= 1 { img.get(0, y - 1, x - 2) } else { 0.0 };
                assert_eq!(out.get(0, y, x), expected);
            }
        }
    }
}
