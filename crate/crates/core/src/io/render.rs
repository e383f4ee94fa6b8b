//! Heatmap overlays and segment boundary overlays.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::image::write_image;
use crate::localize::BBox;
use crate::numerics::Tensor;
use crate::segmenter::SegmentMap;

/// Fixed five-stop ramp: blue → cyan → green → yellow → red at 0, ¼, ½, ¾, 1.
pub const RAMP: [[f64; 3]; 5] = [
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [0.0, 1.0, 0.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
];

pub const OVERLAY_ALPHA: f64 = 0.5;
pub const PRED_COLOR: [f64; 3] = [0.0, 1.0, 0.0];
pub const GT_COLOR: [f64; 3] = [1.0, 0.0, 0.0];
pub const BOUNDARY_COLOR: [f64; 3] = [1.0, 1.0, 0.0];

/// Piecewise-linear ramp colour of `v ∈ [0,1]` (clamped).
pub fn ramp(v: f64) -> [f64; 3] {
    let t = v.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (t.floor() as usize).min(RAMP.len() - 2);
    let f = t - i as f64;
    std::array::from_fn(|c| RAMP[i][c] * (1.0 - f) + RAMP[i + 1][c] * f)
}

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w, 3] => Ok((h, w)),
        ref s => Err(Error::dim(format!("overlay needs an h×w×3 image, got {s:?}"))),
    }
}

fn put(out: &mut Tensor, w: usize, y: usize, x: usize, color: [f64; 3]) {
    let i = (y * w + x) * 3;
    out.data_mut()[i..i + 3].copy_from_slice(&color);
}

/// Draws the one-pixel outline of `b` (clipped to the image).
pub fn draw_box(out: &mut Tensor, b: &BBox, color: [f64; 3]) -> Result<()> {
    let (h, w) = check_image(out)?;
    if b.x0 >= w || b.y0 >= h {
        return Ok(());
    }
    let (x1, y1) = (b.x1.min(w) - 1, b.y1.min(h) - 1);
    for x in b.x0..=x1 {
        put(out, w, b.y0, x, color);
        put(out, w, y1, x, color);
    }
    for y in b.y0..=y1 {
        put(out, w, y, b.x0, color);
        put(out, w, y, x1, color);
    }
    Ok(())
}

/// `h×w×3` overlay: ramp colour of `cam` blended at [`OVERLAY_ALPHA`] over
/// `image`, ground-truth boxes in red, then the predicted box in green.
pub fn heatmap_overlay(cam: &Tensor, image: &Tensor, pred: Option<&BBox>, gt: &[BBox]) -> Result<Tensor> {
    let (h, w) = check_image(image)?;
    if cam.shape() != [h, w] {
        return Err(Error::dim(format!(
            "CAM {:?} does not match the {h}×{w} image",
            cam.shape()
        )));
    }
    let mut out = image.clone();
    for (p, &v) in cam.data().iter().enumerate() {
        let col = ramp(v);
        for (c, &rc) in col.iter().enumerate() {
            let px = &mut out.data_mut()[p * 3 + c];
            *px = OVERLAY_ALPHA * rc + (1.0 - OVERLAY_ALPHA) * *px;
        }
    }
    for b in gt {
        draw_box(&mut out, b, GT_COLOR)?;
    }
    if let Some(b) = pred {
        draw_box(&mut out, b, PRED_COLOR)?;
    }
    Ok(out)
}

pub fn render_heatmap(cam: &Tensor, image: &Tensor, pred: Option<&BBox>, gt: &[BBox], path: &Path) -> Result<()> {
    write_image(path, &heatmap_overlay(cam, image, pred, gt)?)
}

/// The image with segment boundaries painted yellow.
pub fn boundary_overlay(seg: &SegmentMap, image: &Tensor) -> Result<Tensor> {
    let (h, w) = check_image(image)?;
    if (seg.h, seg.w) != (h, w) {
        return Err(Error::dim(format!(
            "segments {}×{} do not match the {h}×{w} image",
            seg.h, seg.w
        )));
    }
    let mut out = image.clone();
    for (p, &edge) in seg.boundaries().iter().enumerate() {
        if edge {
            put(&mut out, w, p / w, p % w, BOUNDARY_COLOR);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints_and_midpoint() {
        assert_eq!(ramp(0.0), RAMP[0]);
        assert_eq!(ramp(1.0), RAMP[4]);
        assert_eq!(ramp(0.5), RAMP[2]);
        assert_eq!(ramp(-3.0), RAMP[0]);
    }

    #[test]
    fn zero_cam_keeps_image_visible() {
        let img = Tensor::full(&[2, 3, 3], 0.6);
        let out = heatmap_overlay(&Tensor::zeros(&[2, 3]), &img, None, &[]).unwrap();
        assert_eq!(out.shape(), img.shape());
        for px in out.data().chunks(3) {
            assert_eq!(px, &[0.3, 0.3, 0.8]);
        }
    }

    #[test]
    fn peak_gets_ramp_max() {
        let img = Tensor::zeros(&[3, 3, 3]);
        let mut cam = Tensor::zeros(&[3, 3]);
        cam.set(&[1, 1], 1.0);
        let out = heatmap_overlay(&cam, &img, None, &[]).unwrap();
        let i = (3 + 1) * 3;
        assert_eq!(&out.data()[i..i + 3], &[0.5, 0.0, 0.0]);
    }

    #[test]
    fn boxes_are_drawn_pred_over_gt() {
        let img = Tensor::zeros(&[4, 4, 3]);
        let b = BBox::new(0, 0, 2, 2).unwrap();
        let out = heatmap_overlay(&Tensor::zeros(&[4, 4]), &img, Some(&b), &[b]).unwrap();
        assert_eq!(&out.data()[0..3], &PRED_COLOR);
        assert_eq!(&out.data()[(3 * 4 + 3) * 3..(3 * 4 + 3) * 3 + 3], &[0.0, 0.0, 0.5]);
    }

    #[test]
    fn mismatched_shapes_fail() {
        let img = Tensor::zeros(&[4, 4, 3]);
        assert!(heatmap_overlay(&Tensor::zeros(&[3, 4]), &img, None, &[]).is_err());
        let seg = SegmentMap::from_labels(1, 2, vec![0, 1]).unwrap();
        assert!(boundary_overlay(&seg, &img).is_err());
    }
}
