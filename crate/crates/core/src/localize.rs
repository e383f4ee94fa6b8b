//! Activation map → bounding box, and the Top-1 / Top-5 / GT-known metrics.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Pixel box, inclusive `x0,y0`, exclusive `x1,y1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::param(format!("degenerate box ({x0},{y0},{x1},{y1})")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: w,
            y1: h,
        }
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.x1 <= w && self.y1 <= h
    }
}

/// Binary `h×w` grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// `cam > tau · max(cam)`.
pub fn threshold_mask(cam: &Tensor, tau: f64) -> Result<Mask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::param(format!("threshold must lie in (0,1), got {tau}")));
    }
    let [h, w] = *cam.shape() else {
        return Err(Error::dim(format!("threshold_mask expects h×w, got {:?}", cam.shape())));
    };
    let cut = tau * cam.max();
    Ok(Mask {
        h,
        w,
        bits: cam.data().iter().map(|&v| v > cut).collect(),
    })
}

/// Tight box of the largest 4-connected component. Ties go to the component
/// found first in row-major scan order; an empty mask yields the full image.
pub fn largest_component_bbox(mask: &Mask) -> BBox {
    let (h, w) = (mask.h, mask.w);
    let mut seen = vec![false; h * w];
    let mut best: Option<(usize, BBox)> = None;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut area = 0;
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            let mut visit = |q: usize| {
                if mask.bits[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        if best.is_none_or(|(a, _)| area > a) {
            best = Some((area, BBox { x0, y0, x1, y1 }));
        }
    }
    best.map_or(BBox::full(h, w), |(_, b)| b)
}

/// Threshold then box the largest component.
pub fn localize(cam: &Tensor, tau: f64) -> Result<BBox> {
    Ok(largest_component_bbox(&threshold_mask(cam, tau)?))
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0));
    let iy = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0));
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Per-image prediction bundle.
///
/// `pred_box` is localized on the top-1 class channel. When the ground-truth
/// class differs from the top-1 class, `gt_class_box` holds the box localized
/// on the ground-truth channel; GT-known and Top-5 are judged on it.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub image_id: String,
    pub top5: Vec<usize>,
    pub pred_box: BBox,
    pub gt_class_box: Option<BBox>,
    pub gt_class: usize,
    pub gt_boxes: Vec<BBox>,
    pub best_iou: f64,
}

impl EvalRecord {
    /// Builds the record and computes `best_iou` against every ground-truth box.
    pub fn new(
        image_id: impl Into<String>,
        top5: Vec<usize>,
        pred_box: BBox,
        gt_class_box: Option<BBox>,
        gt_class: usize,
        gt_boxes: Vec<BBox>,
    ) -> Result<Self> {
        let image_id = image_id.into();
        if top5.is_empty() {
            return Err(Error::param(format!("{image_id}: empty top-5 list")));
        }
        let mut sorted = top5.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != top5.len() {
            return Err(Error::param(format!("{image_id}: repeated class in top-5")));
        }
        if gt_boxes.is_empty() {
            return Err(Error::param(format!("{image_id}: no ground-truth boxes")));
        }
        let judged = gt_class_box.unwrap_or(pred_box);
        let best_iou = gt_boxes.iter().map(|g| iou(&judged, g)).fold(0.0, f64::max);
        Ok(Self {
            image_id,
            top5,
            pred_box,
            gt_class_box,
            gt_class,
            gt_boxes,
            best_iou,
        })
    }

    pub fn localized(&self) -> bool {
        self.best_iou > 0.5
    }

    pub fn top1_hit(&self) -> bool {
        self.localized() && self.top5[0] == self.gt_class
    }

    pub fn top5_hit(&self) -> bool {
        self.localized() && self.top5.contains(&self.gt_class)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub top1: f64,
    pub top5: f64,
    pub gt_known: f64,
    pub count: usize,
}

pub fn evaluate(records: &[EvalRecord]) -> Result<Metrics> {
    if records.is_empty() {
        return Err(Error::param("cannot evaluate an empty record set"));
    }
    let n = records.len() as f64;
    let frac = |f: fn(&EvalRecord) -> bool| records.iter().filter(|r| f(r)).count() as f64 / n;
    Ok(Metrics {
        top1: frac(EvalRecord::top1_hit),
        top5: frac(EvalRecord::top5_hit),
        gt_known: frac(EvalRecord::localized),
        count: records.len(),
    })
}

/// Classification accuracy of the top-1 prediction.
pub fn classification_accuracy(records: &[EvalRecord]) -> f64 {
    let hits = records.iter().filter(|r| r.top5[0] == r.gt_class).count();
    hits as f64 / records.len().max(1) as f64
}
