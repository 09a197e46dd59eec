//! Square crops around a box and the one-pass tracking loop.

use ndarray::Array3;

use super::model::{PatchInputs, TrackerModel};
use crate::data_model::{BoundingBox, Image, Sequence, TriModalFrame};
use crate::error::{Error, Result};
use crate::tokenizer::{image_patches, to_three_channel};

/// A square window of side `side` image pixels centred on `(cx, cy)`,
/// resampled to `out × out` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    pub out: usize,
}

impl CropWindow {
    /// Window of side `factor * sqrt(w * h)` around the box center.
    pub fn around(b: &BoundingBox, factor: f64, out: usize) -> Self {
        let (cx, cy) = b.center();
        Self {
            cx,
            cy,
            side: (factor * (b.w * b.h).sqrt()).max(1.0),
            out,
        }
    }

    /// Crop pixels per image pixel.
    pub fn scale(&self) -> f64 {
        self.out as f64 / self.side
    }

    /// Image coordinates → crop pixel coordinates.
    pub fn to_crop(&self, b: &BoundingBox) -> BoundingBox {
        let s = self.scale();
        let x0 = self.cx - self.side / 2.0;
        let y0 = self.cy - self.side / 2.0;
        BoundingBox {
            x: (b.x - x0) * s,
            y: (b.y - y0) * s,
            w: b.w * s,
            h: b.h * s,
        }
    }

    /// Crop pixel coordinates `(cx, cy, w, h)` → image box.
    pub fn to_image(&self, cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        let s = self.scale();
        BoundingBox::from_center(
            self.cx - self.side / 2.0 + cx / s,
            self.cy - self.side / 2.0 + cy / s,
            w / s,
            h / s,
        )
    }
}

/// Bilinear resampling of `window`; out-of-frame pixels take the per-channel
/// image mean.
pub fn crop_image(img: &Image, window: &CropWindow) -> Image {
    let (h, w) = img.size();
    let means = img.channel_means();
    let n = window.out;
    let step = window.side / n as f64;
    let x0 = window.cx - window.side / 2.0;
    let y0 = window.cy - window.side / 2.0;
    let mut out = Array3::<f32>::zeros((img.channels(), n, n));
    for i in 0..n {
        // Pixel-centre convention: pixel k covers [k, k + 1).
        let v = y0 + (i as f64 + 0.5) * step - 0.5;
        let v_inside = v >= -0.5 && v <= h as f64 - 0.5;
        for j in 0..n {
            let u = x0 + (j as f64 + 0.5) * step - 0.5;
            let inside = v_inside && u >= -0.5 && u <= w as f64 - 0.5;
            for (c, &mean) in means.iter().enumerate() {
                out[[c, i, j]] = if inside {
                    let uc = u.clamp(0.0, (w - 1) as f64);
                    let vc = v.clamp(0.0, (h - 1) as f64);
                    img.sample_bilinear(c, uc, vc).expect("clamped into the image") as f32
                } else {
                    mean as f32
                };
            }
        }
    }
    Image::from_array(out)
}

impl TrackerModel {
    /// Patch matrices of the modalities in use for one template/search pair.
    pub fn crop_inputs(
        &self,
        template: &TriModalFrame,
        z_window: &CropWindow,
        search: &TriModalFrame,
        x_window: &CropWindow,
    ) -> Result<PatchInputs> {
        let p = &self.config.patch;
        let pair = |a: &Image, b: &Image| -> Result<_> {
            let z = image_patches(&to_three_channel(&crop_image(a, z_window)), p.template_size, p.patch_size, "template")?;
            let x = image_patches(&to_three_channel(&crop_image(b, x_window)), p.search_size, p.patch_size, "search")?;
            Ok((z, x))
        };
        let mods = self.config.modalities;
        Ok(PatchInputs {
            rgb: pair(&template.rgb, &search.rgb)?,
            depth: if mods.has_depth() { Some(pair(&template.depth, &search.depth)?) } else { None },
            tir: if mods.has_tir() { Some(pair(&template.tir, &search.tir)?) } else { None },
        })
    }

    pub fn template_window(&self, b: &BoundingBox) -> CropWindow {
        CropWindow::around(b, self.config.template_factor, self.config.patch.template_size)
    }

    pub fn search_window(&self, b: &BoundingBox) -> CropWindow {
        CropWindow::around(b, self.config.search_factor, self.config.patch.search_size)
    }

    /// One-pass tracking: the template comes from frame 0 and the search
    /// region follows the previous prediction. Frame 0 reports the
    /// initialization box.
    pub fn track_sequence(&self, seq: &Sequence) -> Result<Vec<BoundingBox>> {
        let init = *seq
            .annotations
            .get(&0)
            .ok_or_else(|| Error::Evaluation {
                sequence: seq.name.clone(),
                reason: "frame 0 is not annotated".into(),
            })?;
        let (fh, fw) = seq.frame_size();
        let z_window = self.template_window(&init);
        let mut boxes = Vec::with_capacity(seq.len());
        boxes.push(init);
        let mut prev = init;
        for frame in &seq.frames[1..] {
            let x_window = self.search_window(&prev);
            let inputs = self.crop_inputs(&seq.frames[0], &z_window, frame, &x_window)?;
            let out = self.predict(&inputs)?;
            let [cx, cy, w, h] = out.decode(out.argmax());
            let side = self.config.patch.search_size as f64;
            let b = x_window.to_image(cx * side, cy * side, w * side, h * side);
            let (bcx, bcy) = b.center();
            let next = BoundingBox::from_center(
                bcx.clamp(0.0, fw as f64),
                bcy.clamp(0.0, fh as f64),
                b.w.max(1.0),
                b.h.max(1.0),
            );
            boxes.push(next);
            prev = next;
        }
        Ok(boxes)
    }
}
