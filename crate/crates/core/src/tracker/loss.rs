//! Composite tracking loss: focal classification on a Gaussian center map,
//! GIoU and L1 on the box decoded at the ground-truth cell.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::{HeadOutput, HeadVars};
use crate::autodiff::{Tape, Var};
use crate::data_model::BoundingBox;
use crate::error::{Error, Result};

const P_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub giou: f64,
    pub l1: f64,
    /// Kept for configuration compatibility; the soft-target focal term
    /// has no class-balance factor.
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            giou: 2.0,
            l1: 5.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("giou", self.giou),
            ("l1", self.l1),
            ("focal_alpha", self.focal_alpha),
            ("focal_gamma", self.focal_gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Everything the loss needs to know about the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTarget {
    /// `1 × grid²`, row-major.
    pub heatmap: Array2<f64>,
    pub cell: usize,
    pub grid: usize,
    /// `[x1, y1, x2, y2]` as fractions of the crop side.
    pub xyxy: [f64; 4],
}

impl LossTarget {
    /// `None` when the box center falls outside the `crop_side` square.
    pub fn new(gt: &BoundingBox, crop_side: f64, grid: usize) -> Option<Self> {
        let (cx, cy) = gt.center();
        let (ux, uy) = (cx / crop_side, cy / crop_side);
        if !(0.0..1.0).contains(&ux) || !(0.0..1.0).contains(&uy) {
            return None;
        }
        let gx = ((ux * grid as f64) as usize).min(grid - 1);
        let gy = ((uy * grid as f64) as usize).min(grid - 1);
        let heatmap = target_heatmap(gx, gy, gt.w / crop_side, gt.h / crop_side, grid)
            .into_shape_with_order((1, grid * grid))
            .expect("grid² cells");
        Some(Self {
            heatmap,
            cell: gy * grid + gx,
            grid,
            xyxy: [
                gt.x / crop_side,
                gt.y / crop_side,
                gt.right() / crop_side,
                gt.bottom() / crop_side,
            ],
        })
    }
}

/// Gaussian bump peaked (value 1) at cell `(gx, gy)`. The spread follows the
/// box size in cells, with a floor of half a cell.
pub fn target_heatmap(gx: usize, gy: usize, w_frac: f64, h_frac: f64, grid: usize) -> Array2<f64> {
    let g = grid as f64;
    let sigma = ((w_frac * g) * (h_frac * g)).sqrt() / 4.0;
    let sigma = sigma.max(0.5);
    Array2::from_shape_fn((grid, grid), |(y, x)| {
        let d2 = (x as f64 - gx as f64).powi(2) + (y as f64 - gy as f64).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp()
    })
}

/// Loss nodes on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub giou: Var,
    pub l1: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    /// `1 - GIoU`.
    pub giou: f64,
    pub l1: f64,
}

impl LossBreakdown {
    pub fn from_tape(tape: &Tape, v: LossVars) -> Self {
        Self {
            total: tape.scalar(v.total),
            cls: tape.scalar(v.cls),
            giou: tape.scalar(v.giou),
            l1: tape.scalar(v.l1),
        }
    }
}

/// `-sum |y - p|^gamma [y ln p + (1 - y) ln(1 - p)]` over soft targets `y`.
/// The modulating factor vanishes at `p = y`.
fn focal_on(tape: &mut Tape, score: Var, target: &Array2<f64>, gamma: f64) -> Var {
    let p = tape.clamp(score, P_CLAMP, 1.0 - P_CLAMP);
    let y = tape.constant(target.clone());
    let one_minus_y = tape.constant(target.mapv(|v| 1.0 - v));
    let diff = tape.sub(p, y);
    let diff2 = tape.square(diff);
    let modulation = if gamma == 2.0 { diff2 } else { tape.pow_const(diff2, gamma / 2.0) };
    let ln_p = tape.ln(p);
    let neg_p = tape.neg(p);
    let q = tape.add_scalar(neg_p, 1.0);
    let ln_q = tape.ln(q);
    let a = tape.mul(y, ln_p);
    let b = tape.mul(one_minus_y, ln_q);
    let ce = tape.add(a, b);
    let weighted = tape.mul(modulation, ce);
    let s = tape.sum_all(weighted);
    tape.neg(s)
}

fn scalar_at(tape: &mut Tape, m: Var, row: usize, col: usize) -> Var {
    let c = tape.slice_cols(m, col, col + 1);
    tape.slice_rows(c, row, row + 1)
}

/// `(1 - GIoU, L1)` between a predicted `[x1, y1, x2, y2]` (as nodes) and
/// a constant box.
fn box_terms(tape: &mut Tape, pred: [Var; 4], gt: [f64; 4]) -> (Var, Var) {
    let [px1, py1, px2, py2] = pred;
    let g: Vec<Var> = gt.iter().map(|&v| tape.scalar_constant(v)).collect();
    let (gx1, gy1, gx2, gy2) = (g[0], g[1], g[2], g[3]);

    let ix1 = tape.maximum(px1, gx1);
    let iy1 = tape.maximum(py1, gy1);
    let ix2 = tape.minimum(px2, gx2);
    let iy2 = tape.minimum(py2, gy2);
    let iw = tape.sub(ix2, ix1);
    let iw = tape.clamp(iw, 0.0, f64::INFINITY);
    let ih = tape.sub(iy2, iy1);
    let ih = tape.clamp(ih, 0.0, f64::INFINITY);
    let inter = tape.mul(iw, ih);

    let pw = tape.sub(px2, px1);
    let ph = tape.sub(py2, py1);
    let area_p = tape.mul(pw, ph);
    let area_g = (gt[2] - gt[0]) * (gt[3] - gt[1]);
    let union = tape.add_scalar(area_p, area_g);
    let union = tape.sub(union, inter);
    let iou = tape.div(inter, union);

    let cx1 = tape.minimum(px1, gx1);
    let cy1 = tape.minimum(py1, gy1);
    let cx2 = tape.maximum(px2, gx2);
    let cy2 = tape.maximum(py2, gy2);
    let cw = tape.sub(cx2, cx1);
    let ch = tape.sub(cy2, cy1);
    let enclosing = tape.mul(cw, ch);
    let slack = tape.sub(enclosing, union);
    let penalty = tape.div(slack, enclosing);
    let giou = tape.sub(iou, penalty);
    let neg = tape.neg(giou);
    let giou_loss = tape.add_scalar(neg, 1.0);

    let mut l1_terms = Vec::with_capacity(4);
    for (p, gv) in pred.into_iter().zip(g) {
        let d = tape.sub(p, gv);
        l1_terms.push(tape.abs(d));
    }
    let stacked = tape.concat_cols(&l1_terms);
    let l1 = tape.mean_all(stacked);
    (giou_loss, l1)
}

/// Records the composite loss for one sample.
pub fn loss_on(tape: &mut Tape, head: HeadVars, target: &LossTarget, w: &LossWeights) -> LossVars {
    let cls = focal_on(tape, head.score, &target.heatmap, w.focal_gamma);
    let grid = target.grid as f64;
    let (gx, gy) = ((target.cell % target.grid) as f64, (target.cell / target.grid) as f64);
    let ox = scalar_at(tape, head.offset, 0, target.cell);
    let oy = scalar_at(tape, head.offset, 1, target.cell);
    let sw = scalar_at(tape, head.size, 0, target.cell);
    let sh = scalar_at(tape, head.size, 1, target.cell);
    let cx = tape.add_scalar(ox, gx);
    let cx = tape.scale(cx, 1.0 / grid);
    let cy = tape.add_scalar(oy, gy);
    let cy = tape.scale(cy, 1.0 / grid);
    let half_w = tape.scale(sw, 0.5);
    let half_h = tape.scale(sh, 0.5);
    let pred = [
        tape.sub(cx, half_w),
        tape.sub(cy, half_h),
        tape.add(cx, half_w),
        tape.add(cy, half_h),
    ];
    let (giou, l1) = box_terms(tape, pred, target.xyxy);
    let wg = tape.scale(giou, w.giou);
    let wl = tape.scale(l1, w.l1);
    let total = tape.add(cls, wg);
    let total = tape.add(total, wl);
    LossVars { total, cls, giou, l1 }
}

/// Loss of plain head outputs against a box in search-crop pixels.
pub fn compute_loss(pred: &HeadOutput, gt: &BoundingBox, crop_side: f64, w: &LossWeights) -> Result<LossBreakdown> {
    let grid = pred.grid();
    let target = LossTarget::new(gt, crop_side, grid)
        .ok_or_else(|| Error::Argument(format!("ground-truth center of {gt} lies outside the search crop")))?;
    let mut tape = Tape::new();
    let head = HeadVars {
        score: tape.constant(pred.score.clone().into_shape_with_order((1, grid * grid)).expect("grid²")),
        offset: tape.constant(pred.offset.clone()),
        size: tape.constant(pred.size.clone()),
    };
    let v = loss_on(&mut tape, head, &target, w);
    Ok(LossBreakdown::from_tape(&tape, v))
}
