//! Three-level image pyramid, per-branch evaluation and CAM fusion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cam::{
    average_attention, build_cam, class_score_map, class_scores, foreground_map, Cam, COMBINED_SCALE_ID,
};
use crate::encoder::{encode, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::{bilinear_resize, minmax_normalize, softmax, Tensor};

pub const NUM_SCALES: usize = 3;

/// How normalized per-scale maps are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fusion {
    #[default]
    Mean,
    Max,
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Fusion::Mean),
            "max" => Ok(Fusion::Max),
            other => Err(Error::param(format!("unknown fusion `{other}` (mean|max)"))),
        }
    }
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Fusion::Mean => "mean",
            Fusion::Max => "max",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PyramidConfig {
    pub scales: [EncoderConfig; NUM_SCALES],
    pub fusion: Fusion,
}

impl PyramidConfig {
    /// Three branches sharing everything except the image side.
    pub fn new(sides: [usize; NUM_SCALES], base: EncoderConfig) -> Result<Self> {
        let cfg = Self {
            scales: sides.map(|image_side| EncoderConfig { image_side, ..base }),
            fusion: Fusion::Mean,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sides (96, 128, 160), patch 16, D = 64, B = 4, M = 4.
    pub fn desk(num_classes: usize) -> Self {
        Self::new(
            [96, 128, 160],
            EncoderConfig {
                image_side: 0,
                patch_side: 16,
                embed_dim: 64,
                num_heads: 4,
                num_blocks: 4,
                num_classes,
                mlp_hidden: 128,
            },
        )
        .expect("desk configuration is valid")
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.scales {
            s.validate()?;
        }
        let [a, b, c] = self.sides();
        if !(a < b && b < c) {
            return Err(Error::param(format!(
                "pyramid sides must increase strictly, got {a}, {b}, {c}"
            )));
        }
        let first = &self.scales[0];
        if self.scales.iter().any(|s| {
            (s.embed_dim, s.num_heads, s.num_blocks, s.num_classes)
                != (first.embed_dim, first.num_heads, first.num_blocks, first.num_classes)
        }) {
            return Err(Error::param("branches must share D, M, B and C"));
        }
        Ok(())
    }

    pub fn sides(&self) -> [usize; NUM_SCALES] {
        self.scales.map(|s| s.image_side)
    }

    pub fn num_classes(&self) -> usize {
        self.scales[0].num_classes
    }

    /// Patch grid of the finest branch, `N₃`.
    pub fn finest_grid(&self) -> usize {
        self.scales[NUM_SCALES - 1].grid()
    }
}

/// Independent parameters for the three branches.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiscaleParams {
    pub branches: Vec<EncoderParams>,
}

impl MultiscaleParams {
    /// Seeded initialization; branch `i` draws from its own stream.
    pub fn init(pcfg: &PyramidConfig, seed: u64) -> Result<Self> {
        let branches = pcfg
            .scales
            .iter()
            .enumerate()
            .map(|(i, cfg)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                EncoderParams::init(cfg, &mut rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { branches })
    }

    pub fn check(&self, pcfg: &PyramidConfig) -> Result<()> {
        if self.branches.len() != NUM_SCALES {
            return Err(Error::dim(format!(
                "expected {NUM_SCALES} branches, got {}",
                self.branches.len()
            )));
        }
        for (p, cfg) in self.branches.iter().zip(&pcfg.scales) {
            p.check(cfg)?;
        }
        Ok(())
    }
}

pub fn build_pyramid(image: &Tensor, pcfg: &PyramidConfig) -> Result<Vec<Tensor>> {
    if image.rank() != 3 || image.shape()[2] != 3 {
        return Err(Error::dim(format!("expected an h×w×3 image, got {:?}", image.shape())));
    }
    pcfg.sides()
        .iter()
        .map(|&s| bilinear_resize(image, s, s))
        .collect()
}

/// Output of one branch: its CAM and raw class scores.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutput {
    pub cam: Cam,
    pub scores: Tensor,
}

/// encode → averaged attention → foreground map × class score map.
pub fn run_branch(level: &Tensor, params: &EncoderParams, cfg: &EncoderConfig, scale_id: i32) -> Result<BranchOutput> {
    let (z, stack) = encode(level, params, cfg)?;
    let abar = average_attention(&stack)?;
    let fg = foreground_map(&abar, cfg)?;
    let smap = class_score_map(&z, &params.score_kernel, cfg)?;
    let scores = class_scores(&smap)?;
    Ok(BranchOutput {
        cam: build_cam(&fg, &smap, scale_id)?,
        scores,
    })
}

pub fn run_scales(image: &Tensor, params: &MultiscaleParams, pcfg: &PyramidConfig) -> Result<Vec<BranchOutput>> {
    params.check(pcfg)?;
    let levels = build_pyramid(image, pcfg)?;
    (0..NUM_SCALES)
        .into_par_iter()
        .map(|i| run_branch(&levels[i], &params.branches[i], &pcfg.scales[i], i as i32))
        .collect()
}

/// Fused single-class map on the finest grid plus its normalized inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedCam {
    pub class_id: usize,
    pub map: Tensor,
    pub per_scale_normalized: Vec<Tensor>,
}

/// Upsample channel `class_id` of each CAM to the largest grid, min-max
/// normalize each, then combine pointwise.
pub fn fuse_cams(cams: &[Cam], class_id: usize, fusion: Fusion) -> Result<CombinedCam> {
    let first = cams.first().ok_or_else(|| Error::param("no maps to fuse"))?;
    let classes = first.map.shape().get(2).copied().unwrap_or(0);
    if cams.iter().any(|c| c.map.rank() != 3 || c.map.shape()[2] != classes) {
        return Err(Error::dim("fused maps must be h×w×C with a shared C"));
    }
    if class_id >= classes {
        return Err(Error::param(format!("class {class_id} not below {classes}")));
    }
    let (h, w) = cams
        .iter()
        .map(|c| (c.map.shape()[0], c.map.shape()[1]))
        .max_by_key(|&(h, w)| h * w)
        .expect("non-empty");
    let per_scale_normalized = cams
        .iter()
        .map(|c| Ok(minmax_normalize(&bilinear_resize(&c.map.channel(class_id)?, h, w)?)))
        .collect::<Result<Vec<_>>>()?;
    let n = per_scale_normalized.len() as f64;
    let map = Tensor::from_fn(&[h, w], |i| {
        let vals = per_scale_normalized.iter().map(|m| m.data()[i]);
        match fusion {
            Fusion::Mean => vals.sum::<f64>() / n,
            Fusion::Max => vals.fold(0.0, f64::max),
        }
    });
    Ok(CombinedCam {
        class_id,
        map,
        per_scale_normalized,
    })
}

/// Fused maps for every class, stacked to `N₃×N₃×C`.
pub fn fuse_all(cams: &[Cam], fusion: Fusion) -> Result<Cam> {
    let classes = cams
        .first()
        .and_then(|c| c.map.shape().get(2).copied())
        .ok_or_else(|| Error::param("no maps to fuse"))?;
    let maps = (0..classes)
        .map(|c| fuse_cams(cams, c, fusion).map(|f| f.map))
        .collect::<Result<Vec<_>>>()?;
    Ok(Cam {
        map: Tensor::stack_channels(&maps)?,
        scale_id: COMBINED_SCALE_ID,
    })
}

/// Mean of the per-branch softmax distributions.
pub fn combine_scores(scores: &[Tensor]) -> Result<Tensor> {
    let first = scores.first().ok_or_else(|| Error::param("no scores to combine"))?;
    if scores.iter().any(|s| s.shape() != first.shape() || s.rank() != 1) {
        return Err(Error::dim("score vectors must share one length"));
    }
    let mut acc = vec![0.0; first.len()];
    for s in scores {
        let p = softmax(s, 0)?;
        acc.iter_mut().zip(p.data()).for_each(|(a, v)| *a += v);
    }
    let n = scores.len() as f64;
    Tensor::new(vec![acc.len()], acc.into_iter().map(|v| v / n).collect())
}

/// Indices of the `k` largest entries, descending; ties go to the lower index.
pub fn top_k(probs: &Tensor, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs.data()[b].total_cmp(&probs.data()[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
