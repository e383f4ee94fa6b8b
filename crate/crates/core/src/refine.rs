//! Clustering-guided refinement: pull each pixel's activation toward the mean
//! activation of its segment.

use crate::error::{Error, Result};
use crate::numerics::{minmax_normalize, Tensor};
use crate::segmenter::SegmentMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineParams {
    /// Weight on the original map; `1 − lambda` goes to the segment mean.
    pub lambda: f64,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self { lambda: 0.5 }
    }
}

impl RefineParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::param(format!("lambda must lie in [0,1], got {}", self.lambda)));
        }
        Ok(())
    }
}

fn check_extents(cam: &Tensor, seg: &SegmentMap) -> Result<()> {
    if cam.shape() != [seg.h, seg.w] {
        return Err(Error::dim(format!(
            "map {:?} does not match segmentation {}×{}",
            cam.shape(),
            seg.h,
            seg.w
        )));
    }
    Ok(())
}

/// Every pixel replaced by the mean activation of its segment.
pub fn cluster_mean_activation(cam: &Tensor, seg: &SegmentMap) -> Result<Tensor> {
    check_extents(cam, seg)?;
    let means = segment_means(cam.data(), seg);
    Tensor::new(
        cam.shape().to_vec(),
        seg.labels.iter().map(|&l| means[l as usize]).collect(),
    )
}

fn segment_means(values: &[f64], seg: &SegmentMap) -> Vec<f64> {
    let mut sum = vec![0.0; seg.num_segments];
    let mut count = vec![0usize; seg.num_segments];
    for (&l, &v) in seg.labels.iter().zip(values) {
        sum[l as usize] += v;
        count[l as usize] += 1;
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}

/// `lambda·cam + (1 − lambda)·segment_mean`, before normalization.
pub fn blend(cam: &Tensor, seg: &SegmentMap, p: RefineParams) -> Result<Tensor> {
    p.validate()?;
    let means = cluster_mean_activation(cam, seg)?;
    let l = p.lambda;
    Ok(Tensor::from_fn(cam.shape(), |i| {
        l * cam.data()[i] + (1.0 - l) * means.data()[i]
    }))
}

/// Blended map, min-max normalized to `[0,1]`.
pub fn refine_cam(cam: &Tensor, seg: &SegmentMap, p: RefineParams) -> Result<Tensor> {
    Ok(minmax_normalize(&blend(cam, seg, p)?))
}

/// Refine every channel of an `h×w×C` map with one segmentation.
pub fn refine_channels(cams: &Tensor, seg: &SegmentMap, p: RefineParams) -> Result<Tensor> {
    let [_, _, c] = *cams.shape() else {
        return Err(Error::dim(format!("expected h×w×C maps, got {:?}", cams.shape())));
    };
    let maps = (0..c)
        .map(|k| refine_cam(&cams.channel(k)?, seg, p))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_channels(&maps)
}
