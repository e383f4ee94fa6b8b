//! Unsupervised pixel clustering: SLIC superpixels and a small convolutional
//! clustering network trained per image against superpixel-majority labels.

mod dpc;
mod slic;

pub use dpc::{
    dpc_assign, dpc_features, dpc_train, dpc_train_with_trace, DpcConfig, DpcParams, DpcTrace,
};
pub use slic::{slic_superpixels, SlicParams};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-pixel segment labels, dense in `0..num_segments`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentMap {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u32>,
    pub num_segments: usize,
}

impl SegmentMap {
    /// Relabel arbitrary ids densely in order of first appearance.
    pub fn from_labels(h: usize, w: usize, raw: Vec<u32>) -> Result<Self> {
        if h == 0 || w == 0 || raw.len() != h * w {
            return Err(Error::dim(format!("{} labels for a {h}×{w} grid", raw.len())));
        }
        let mut map = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|&l| {
                let next = map.len() as u32;
                *map.entry(l).or_insert(next)
            })
            .collect();
        Ok(Self {
            h,
            w,
            labels,
            num_segments: map.len(),
        })
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.w + x]
    }

    /// Every label in range and every label used.
    pub fn is_dense(&self) -> bool {
        let mut used = vec![false; self.num_segments];
        for &l in &self.labels {
            match used.get_mut(l as usize) {
                Some(u) => *u = true,
                None => return false,
            }
        }
        used.iter().all(|&u| u)
    }

    /// Whether each label's pixels form one 4-connected region.
    pub fn is_connected(&self) -> bool {
        let (h, w) = (self.h, self.w);
        let mut seen = vec![false; h * w];
        let mut visited_label = vec![false; self.num_segments];
        let mut stack = Vec::new();
        for start in 0..h * w {
            if seen[start] {
                continue;
            }
            let l = self.labels[start];
            if std::mem::replace(&mut visited_label[l as usize], true) {
                return false;
            }
            seen[start] = true;
            stack.push(start);
            while let Some(p) = stack.pop() {
                for q in neighbours(p, h, w) {
                    if !seen[q] && self.labels[q] == l {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        true
    }

    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_segments];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    /// Pixels whose right or lower neighbour carries a different label.
    pub fn boundaries(&self) -> Vec<bool> {
        let (h, w) = (self.h, self.w);
        (0..h * w)
            .map(|p| {
                let (y, x) = (p / w, p % w);
                (x + 1 < w && self.labels[p + 1] != self.labels[p])
                    || (y + 1 < h && self.labels[p + w] != self.labels[p])
            })
            .collect()
    }
}

pub(crate) fn neighbours(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (p / w, p % w);
    [
        (x > 0).then(|| p - 1),
        (x + 1 < w).then(|| p + 1),
        (y > 0).then(|| p - w),
        (y + 1 < h).then(|| p + w),
    ]
    .into_iter()
    .flatten()
}

/// SLIC superpixels → per-image clustering network training → final
/// argmax labels.
pub fn segment_image(image: &Tensor, slic: &SlicParams, dpc: &DpcConfig) -> Result<SegmentMap> {
    let superpixels = slic_superpixels(image, slic)?;
    let init = DpcParams::init(dpc)?;
    let trained = dpc_train(image, &superpixels, init)?;
    dpc_assign(&dpc_features(image, &trained)?)
}
