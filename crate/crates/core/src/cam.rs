//! Class score maps and attention-derived class activation maps for one
//! branch.

use crate::encoder::{AttentionStack, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{conv2d, global_avg_pool, GradTape, Tensor, Var};

/// Per-patch class scores, `N×N×C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScoreMap {
    pub map: Tensor,
}

/// Class activation map of one branch, `N×N×C`. `scale_id` is the pyramid
/// level (0-based); fused maps use −1 and refined maps −2.
#[derive(Clone, Debug, PartialEq)]
pub struct Cam {
    pub map: Tensor,
    pub scale_id: i32,
}

pub const COMBINED_SCALE_ID: i32 = -1;
pub const REFINED_SCALE_ID: i32 = -2;

/// Sum over blocks of the head-averaged attention.
pub fn average_attention(stack: &AttentionStack) -> Result<Tensor> {
    if stack.maps.is_empty() || stack.heads == 0 || stack.blocks == 0 {
        return Err(Error::Contract("average_attention of an empty stack".into()));
    }
    if stack.maps.len() != stack.blocks * stack.heads {
        return Err(Error::Contract(format!(
            "stack holds {} maps, expected {}×{}",
            stack.maps.len(),
            stack.blocks,
            stack.heads
        )));
    }
    let shape = stack.maps[0].shape();
    if shape.len() != 2 || shape[0] != shape[1] || stack.maps.iter().any(|m| m.shape() != shape) {
        return Err(Error::dim("attention maps must share one square shape"));
    }
    let inv_heads = 1.0 / stack.heads as f64;
    let mut acc = vec![0.0; stack.maps[0].len()];
    for block in stack.maps.chunks(stack.heads) {
        let mut mean = vec![0.0; acc.len()];
        for m in block {
            mean.iter_mut().zip(m.data()).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().zip(&mean).for_each(|(a, v)| *a += v * inv_heads);
    }
    Tensor::new(shape.to_vec(), acc)
}

/// Class-token attention over the patch tokens (row 0 of `abar` without its
/// first entry), reshaped row-major to `N×N`.
pub fn foreground_map(abar: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    let (n, l) = (cfg.grid(), cfg.tokens());
    if abar.shape() != [l, l] {
        return Err(Error::dim(format!(
            "averaged attention {:?} does not match {l}×{l}",
            abar.shape()
        )));
    }
    Tensor::new(vec![n, n], abar.data()[1..l].to_vec())
}

pub(crate) fn score_map_on_tape(
    tape: &mut GradTape,
    embeddings: Var,
    kernel: Var,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let (n, d) = (cfg.grid(), cfg.embed_dim);
    if tape.shape(embeddings) != [cfg.tokens(), d] {
        return Err(Error::dim(format!(
            "embeddings {:?} do not match {}×{d}",
            tape.shape(embeddings),
            cfg.tokens()
        )));
    }
    let patches = tape.slice_rows(embeddings, 1, n * n)?;
    let grid = tape.reshape(patches, &[n, n, d])?;
    tape.conv2d(grid, kernel, 0)
}

/// Drop the class token, reshape to `N×N×D` and apply the `1×1×D×C` kernel.
pub fn class_score_map(embeddings: &Tensor, kernel: &Tensor, cfg: &EncoderConfig) -> Result<ClassScoreMap> {
    let (n, d) = (cfg.grid(), cfg.embed_dim);
    if embeddings.shape() != [cfg.tokens(), d] {
        return Err(Error::dim(format!(
            "embeddings {:?} do not match {}×{d}",
            embeddings.shape(),
            cfg.tokens()
        )));
    }
    if kernel.shape() != [1, 1, d, cfg.num_classes] {
        return Err(Error::dim(format!(
            "score kernel {:?} does not match 1×1×{d}×{}",
            kernel.shape(),
            cfg.num_classes
        )));
    }
    let grid = Tensor::new(vec![n, n, d], embeddings.data()[d..].to_vec())?;
    Ok(ClassScoreMap {
        map: conv2d(&grid, kernel, 0)?,
    })
}

/// Global average of the score map, one logit per class.
pub fn class_scores(smap: &ClassScoreMap) -> Result<Tensor> {
    global_avg_pool(&smap.map)
}

/// `cam[y,x,c] = fg[y,x] · S[y,x,c]`.
pub fn build_cam(fg: &Tensor, smap: &ClassScoreMap, scale_id: i32) -> Result<Cam> {
    let s = smap.map.shape();
    if s.len() != 3 || fg.shape() != &s[..2] {
        return Err(Error::dim(format!(
            "foreground {:?} does not match score map {s:?}",
            fg.shape()
        )));
    }
    let c = s[2];
    let data = smap
        .map
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| fg.data()[i / c] * v)
        .collect();
    Ok(Cam {
        map: Tensor::new(s.to_vec(), data)?,
        scale_id,
    })
}
