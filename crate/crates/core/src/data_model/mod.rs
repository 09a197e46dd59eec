//! Boxes, images, tri-modal frames and sequences.

mod io;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{format_groundtruth, list_sequences, load_image, load_sequence, parse_groundtruth, save_image, save_sequence};
pub use synth::{
    generate_synthetic_sequence, generate_with_scene, DarkenInterval, DegradationProfile,
    FrameRange, NoiseSigma, SceneConfig,
};

/// Axis-aligned box, `[x, y, w, h]` with `(x, y)` the top-left corner in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    /// Checked constructor: width and height must be finite and positive.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(Error::Argument(format!("non-finite box {self}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Argument(format!(
                "box width and height must be positive, got w={} h={}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.x, self.y, self.w, self.h)
    }
}

impl FromStr for BoundingBox {
    type Err = Error;

    /// Parses `x,y,w,h`; whitespace around fields is ignored.
    fn from_str(s: &str) -> Result<Self> {
        let fields: Vec<&str> = s.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Argument(format!("expected 4 comma-separated fields, got {}", fields.len())));
        }
        let mut v = [0.0; 4];
        for (slot, field) in v.iter_mut().zip(&fields) {
            *slot = field
                .parse::<f64>()
                .map_err(|e| Error::Argument(format!("bad number `{field}`: {e}")))?;
        }
        Self::new(v[0], v[1], v[2], v[3])
    }
}

/// Channel-major image, `channels × height × width`, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    data: Array3<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((channels, height, width)),
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            data: Array3::from_elem((channels, height, width), value),
        }
    }

    pub fn from_array(data: Array3<f32>) -> Self {
        Self { data }
    }

    /// Single-channel image from a `height × width` plane.
    pub fn from_plane(plane: Array2<f32>) -> Self {
        Self {
            data: plane.insert_axis(ndarray::Axis(0)),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[[c, y, x]]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn channel_means(&self) -> Vec<f64> {
        self.data
            .outer_iter()
            .map(|plane| plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64)
            .collect()
    }

    /// Bilinear sample of channel `c` at continuous pixel coordinates, where
    /// integer coordinates are pixel centres. `None` outside the image.
    pub fn sample_bilinear(&self, c: usize, x: f64, y: f64) -> Option<f64> {
        let (h, w) = self.size();
        if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let p = |yy: usize, xx: usize| self.data[[c, yy, xx]] as f64;
        let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
        let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    pub fn clamp_unit(&mut self) {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
}

/// RGB, depth and thermal images of one time step, spatially aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct TriModalFrame {
    pub rgb: Image,
    pub depth: Image,
    pub tir: Image,
    pub timestamp_index: usize,
}

impl TriModalFrame {
    pub fn new(rgb: Image, depth: Image, tir: Image, timestamp_index: usize) -> Result<Self> {
        if rgb.channels() != 3 {
            return Err(Error::shape("rgb channels", 3, rgb.channels()));
        }
        for (name, img) in [("depth", &depth), ("tir", &tir)] {
            if img.channels() != 1 {
                return Err(Error::shape(format!("{name} channels"), 1, img.channels()));
            }
            if img.size() != rgb.size() {
                return Err(Error::Alignment(format!(
                    "{name} is {:?} but rgb is {:?} at frame {timestamp_index}",
                    img.size(),
                    rgb.size()
                )));
            }
        }
        Ok(Self {
            rgb,
            depth,
            tir,
            timestamp_index,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        self.rgb.size()
    }
}

/// An annotated tri-modal video.
///
/// Annotations are a partial map from frame index to box: dense for test
/// sequences, sparse (selected frames only) for training ones. Frame 0 is
/// always annotated since trackers are initialized from it.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<TriModalFrame>,
    pub annotations: BTreeMap<usize, BoundingBox>,
}

impl Sequence {
    pub fn new(
        name: impl Into<String>,
        frames: Vec<TriModalFrame>,
        annotations: BTreeMap<usize, BoundingBox>,
    ) -> Result<Self> {
        let name = name.into();
        if frames.is_empty() {
            return Err(Error::Argument(format!("sequence `{name}` has no frames")));
        }
        let size = frames[0].size();
        if let Some(f) = frames.iter().find(|f| f.size() != size) {
            return Err(Error::Alignment(format!(
                "frame {} is {:?}, expected {:?}",
                f.timestamp_index,
                f.size(),
                size
            )));
        }
        if let Some((&i, _)) = annotations.range(frames.len()..).next() {
            return Err(Error::Argument(format!(
                "annotation for frame {i} but `{name}` has {} frames",
                frames.len()
            )));
        }
        if !annotations.contains_key(&0) {
            return Err(Error::Argument(format!("frame 0 of `{name}` is not annotated")));
        }
        Ok(Self {
            name,
            frames,
            annotations,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_size(&self) -> (usize, usize) {
        self.frames[0].size()
    }

    pub fn is_dense(&self) -> bool {
        self.annotations.len() == self.frames.len()
    }

    /// Every frame's box, if the annotation is dense.
    pub fn dense_boxes(&self) -> Option<Vec<BoundingBox>> {
        self.is_dense().then(|| self.annotations.values().copied().collect())
    }

    /// Copy of this sequence keeping only the listed annotations (plus frame 0).
    pub fn sparsified(&self, keep: &[usize]) -> Self {
        let annotations = self
            .annotations
            .iter()
            .filter(|(i, _)| **i == 0 || keep.contains(i))
            .map(|(&i, &b)| (i, b))
            .collect();
        Self {
            name: self.name.clone(),
            frames: self.frames.clone(),
            annotations,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_parse_and_display() {
        let b: BoundingBox = "10, 20.5,30,40".parse().unwrap();
        assert_eq!(b, BoundingBox { x: 10.0, y: 20.5, w: 30.0, h: 40.0 });
        assert_eq!(b.to_string().parse::<BoundingBox>().unwrap(), b);
        assert_eq!(b.center(), (25.0, 40.5));
    }

    #[test]
    fn box_rejects_degenerate() {
        assert!("10,20,0,30".parse::<BoundingBox>().is_err());
        assert!("10,20,5,-1".parse::<BoundingBox>().is_err());
        assert!("10,20,5".parse::<BoundingBox>().is_err());
        assert!(BoundingBox::new(-5.0, -3.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn frame_rejects_misaligned_modalities() {
        let err = TriModalFrame::new(
            Image::zeros(3, 8, 8),
            Image::zeros(1, 8, 8),
            Image::zeros(1, 8, 7),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Alignment(_)));
    }

    #[test]
    fn sequence_requires_frame_zero() {
        let f = TriModalFrame::new(Image::zeros(3, 4, 4), Image::zeros(1, 4, 4), Image::zeros(1, 4, 4), 0)
            .unwrap();
        let mut ann = BTreeMap::new();
        ann.insert(1, BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap());
        assert!(Sequence::new("s", vec![f.clone(), f.clone()], ann.clone()).is_err());
        ann.insert(0, BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap());
        assert!(Sequence::new("s", vec![f.clone(), f.clone()], ann.clone()).is_ok());
        ann.insert(2, BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap());
        assert!(Sequence::new("s", vec![f.clone(), f], ann).is_err());
    }

    #[test]
    fn bilinear_sampling() {
        let mut img = Image::zeros(1, 2, 2);
        img.data_mut()[[0, 0, 1]] = 1.0;
        img.data_mut()[[0, 1, 1]] = 1.0;
        assert_eq!(img.sample_bilinear(0, 0.5, 0.5), Some(0.5));
        assert_eq!(img.sample_bilinear(0, 1.0, 0.0), Some(1.0));
        assert_eq!(img.sample_bilinear(0, 1.5, 0.0), None);
    }
}
