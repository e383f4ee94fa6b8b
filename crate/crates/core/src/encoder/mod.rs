//! One object localization transformer branch.
//!
//! An image of side `H` is cut into an `N×N` grid of `P×P` patches
//! (`N = H / P`), projected to `D`-dimensional tokens, prefixed with a class
//! token and passed through `B` pre-norm transformer blocks with `M` heads.
//! The branch exposes the output patch embeddings and every attention matrix.

mod checkpoint;
mod forward;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    block_forward, bind, embed_tokens, encode, encode_on_tape, msa_forward, patchify,
    standardize_pixels, AttentionStack, BranchVars, TokenEmbedding,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub num_classes: usize,
    pub mlp_hidden: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_side", self.image_side),
            ("patch_side", self.patch_side),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("num_blocks", self.num_blocks),
            ("num_classes", self.num_classes),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::param(format!("{name} must be positive")));
        }
        if !self.image_side.is_multiple_of(self.patch_side) {
            return Err(Error::param(format!(
                "image side {} is not a multiple of patch side {}",
                self.image_side, self.patch_side
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::param(format!(
                "embedding width {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Patches per side, `N`.
    pub fn grid(&self) -> usize {
        self.image_side / self.patch_side
    }

    /// Sequence length including the class token, `N² + 1`.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch_side * self.patch_side
    }
}

/// Number of trainable scalars for `cfg`:
///
/// ```text
/// patch projection   3P²·D + D
/// class token        D
/// position embedding L·D
/// embedding norm     2D
/// per block          2D                     (pre-attention norm)
///                  + M·3·(d² + d)           (per-head q/k/v, d = D/M)
///                  + D² + D                 (head merge projection)
///                  + 2D                     (pre-MLP norm)
///                  + D·H + H + H·D + D      (two-layer MLP)
/// score map          D·C                    (1×1 convolution, no bias)
/// ```
pub fn parameter_count(cfg: &EncoderConfig) -> usize {
    let (d_model, d_head, heads) = (cfg.embed_dim, cfg.head_dim(), cfg.num_heads);
    let hidden = cfg.mlp_hidden;
    let block = 2 * d_model
        + heads * 3 * (d_head * d_head + d_head)
        + d_model * d_model
        + d_model
        + 2 * d_model
        + d_model * hidden
        + hidden
        + hidden * d_model
        + d_model;
    cfg.patch_len() * d_model
        + d_model
        + d_model
        + cfg.tokens() * d_model
        + 2 * d_model
        + cfg.num_blocks * block
        + d_model * cfg.num_classes
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<T> {
    pub q_weight: T,
    pub q_bias: T,
    pub k_weight: T,
    pub k_bias: T,
    pub v_weight: T,
    pub v_bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<T> {
    pub norm1_gamma: T,
    pub norm1_beta: T,
    pub heads: Vec<HeadWeights<T>>,
    pub proj_weight: T,
    pub proj_bias: T,
    pub norm2_gamma: T,
    pub norm2_beta: T,
    pub fc1_weight: T,
    pub fc1_bias: T,
    pub fc2_weight: T,
    pub fc2_bias: T,
}

/// Every learnable tensor of one branch, generic over the leaf type so the
/// same tree can hold tensors, tape handles or gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T> {
    pub patch_weight: T,
    pub patch_bias: T,
    pub cls_token: T,
    pub pos_embed: T,
    pub embed_gamma: T,
    pub embed_beta: T,
    pub blocks: Vec<BlockWeights<T>>,
    pub score_kernel: T,
}

pub type EncoderParams = EncoderWeights<Tensor>;
pub type BlockParams = BlockWeights<Tensor>;
pub type HeadParams = HeadWeights<Tensor>;

impl<T> HeadWeights<T> {
    fn try_map<U, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U, E>) -> Result<HeadWeights<U>, E> {
        Ok(HeadWeights {
            q_weight: f(&format!("{prefix}.q.weight"), &self.q_weight)?,
            q_bias: f(&format!("{prefix}.q.bias"), &self.q_bias)?,
            k_weight: f(&format!("{prefix}.k.weight"), &self.k_weight)?,
            k_bias: f(&format!("{prefix}.k.bias"), &self.k_bias)?,
            v_weight: f(&format!("{prefix}.v.weight"), &self.v_weight)?,
            v_bias: f(&format!("{prefix}.v.bias"), &self.v_bias)?,
        })
    }

    fn leaves_mut(&mut self) -> [&mut T; 6] {
        [
            &mut self.q_weight,
            &mut self.q_bias,
            &mut self.k_weight,
            &mut self.k_bias,
            &mut self.v_weight,
            &mut self.v_bias,
        ]
    }
}

impl<T> BlockWeights<T> {
    pub fn map<U>(&self, prefix: &str, mut f: impl FnMut(&str, &T) -> U) -> BlockWeights<U> {
        self.try_map(prefix, &mut |n: &str, t: &T| Ok::<_, std::convert::Infallible>(f(n, t)))
            .unwrap_or_else(|e| match e {})
    }

    fn try_map<U, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U, E>) -> Result<BlockWeights<U>, E> {
        Ok(BlockWeights {
            norm1_gamma: f(&format!("{prefix}.norm1.gamma"), &self.norm1_gamma)?,
            norm1_beta: f(&format!("{prefix}.norm1.beta"), &self.norm1_beta)?,
            heads: self
                .heads
                .iter()
                .enumerate()
                .map(|(m, h)| h.try_map(&format!("{prefix}.heads.{m}"), f))
                .collect::<Result<_, E>>()?,
            proj_weight: f(&format!("{prefix}.proj.weight"), &self.proj_weight)?,
            proj_bias: f(&format!("{prefix}.proj.bias"), &self.proj_bias)?,
            norm2_gamma: f(&format!("{prefix}.norm2.gamma"), &self.norm2_gamma)?,
            norm2_beta: f(&format!("{prefix}.norm2.beta"), &self.norm2_beta)?,
            fc1_weight: f(&format!("{prefix}.fc1.weight"), &self.fc1_weight)?,
            fc1_bias: f(&format!("{prefix}.fc1.bias"), &self.fc1_bias)?,
            fc2_weight: f(&format!("{prefix}.fc2.weight"), &self.fc2_weight)?,
            fc2_bias: f(&format!("{prefix}.fc2.bias"), &self.fc2_bias)?,
        })
    }

    fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.norm1_gamma, &mut self.norm1_beta];
        for h in &mut self.heads {
            out.extend(h.leaves_mut());
        }
        out.extend([
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.norm2_gamma,
            &mut self.norm2_beta,
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]);
        out
    }
}

impl<T> EncoderWeights<T> {
    /// Map every leaf, in canonical order, together with its dotted name.
    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &T) -> Result<U, E>) -> Result<EncoderWeights<U>, E> {
        Ok(EncoderWeights {
            patch_weight: f("patch.weight", &self.patch_weight)?,
            patch_bias: f("patch.bias", &self.patch_bias)?,
            cls_token: f("cls_token", &self.cls_token)?,
            pos_embed: f("pos_embed", &self.pos_embed)?,
            embed_gamma: f("embed_norm.gamma", &self.embed_gamma)?,
            embed_beta: f("embed_norm.beta", &self.embed_beta)?,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(b, blk)| blk.try_map(&format!("blocks.{b}"), &mut f))
                .collect::<Result<_, E>>()?,
            score_kernel: f("score.kernel", &self.score_kernel)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> EncoderWeights<U> {
        self.try_map(|n, t| Ok::<_, std::convert::Infallible>(f(n, t)))
            .unwrap_or_else(|e| match e {})
    }

    /// Visit every leaf in canonical order.
    pub fn visit(&self, mut f: impl FnMut(&str, &T)) {
        self.map(|n, t| f(n, t));
    }

    /// Mutable leaves in canonical order.
    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![
            &mut self.patch_weight,
            &mut self.patch_bias,
            &mut self.cls_token,
            &mut self.pos_embed,
            &mut self.embed_gamma,
            &mut self.embed_beta,
        ];
        for b in &mut self.blocks {
            out.extend(b.leaves_mut());
        }
        out.push(&mut self.score_kernel);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(|n, _| names.push(n.to_string()));
        names
    }
}

impl EncoderParams {
    /// Shape-correct parameters filled with `value` (layer-norm gains included).
    pub fn filled(cfg: &EncoderConfig, value: f64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::build(cfg, &mut |shape: &[usize], _| Tensor::full(shape, value)))
    }

    /// Truncated-normal (σ = 0.02, cut at 2σ) projections and embeddings,
    /// zero biases, unit layer-norm gains.
    pub fn init(cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut make = |shape: &[usize], kind: Kind| match kind {
            Kind::Weight => Tensor::from_fn(shape, |_| loop {
                let v: f64 = normal.sample(rng);
                if v.abs() <= 2.0 * INIT_STD {
                    break v;
                }
            }),
            Kind::Bias => Tensor::zeros(shape),
            Kind::Gain => Tensor::full(shape, 1.0),
        };
        Ok(Self::build(cfg, &mut make))
    }

    fn build(cfg: &EncoderConfig, make: &mut impl FnMut(&[usize], Kind) -> Tensor) -> Self {
        let (d, dh, hid) = (cfg.embed_dim, cfg.head_dim(), cfg.mlp_hidden);
        let patch_weight = make(&[cfg.patch_len(), d], Kind::Weight);
        let patch_bias = make(&[d], Kind::Bias);
        let cls_token = make(&[1, d], Kind::Weight);
        let pos_embed = make(&[cfg.tokens(), d], Kind::Weight);
        let embed_gamma = make(&[d], Kind::Gain);
        let embed_beta = make(&[d], Kind::Bias);
        let blocks = (0..cfg.num_blocks)
            .map(|_| BlockWeights {
                norm1_gamma: make(&[d], Kind::Gain),
                norm1_beta: make(&[d], Kind::Bias),
                heads: (0..cfg.num_heads)
                    .map(|_| HeadWeights {
                        q_weight: make(&[dh, dh], Kind::Weight),
                        q_bias: make(&[dh], Kind::Bias),
                        k_weight: make(&[dh, dh], Kind::Weight),
                        k_bias: make(&[dh], Kind::Bias),
                        v_weight: make(&[dh, dh], Kind::Weight),
                        v_bias: make(&[dh], Kind::Bias),
                    })
                    .collect(),
                proj_weight: make(&[d, d], Kind::Weight),
                proj_bias: make(&[d], Kind::Bias),
                norm2_gamma: make(&[d], Kind::Gain),
                norm2_beta: make(&[d], Kind::Bias),
                fc1_weight: make(&[d, hid], Kind::Weight),
                fc1_bias: make(&[hid], Kind::Bias),
                fc2_weight: make(&[hid, d], Kind::Weight),
                fc2_bias: make(&[d], Kind::Bias),
            })
            .collect();
        let score_kernel = make(&[1, 1, d, cfg.num_classes], Kind::Weight);
        EncoderWeights {
            patch_weight,
            patch_bias,
            cls_token,
            pos_embed,
            embed_gamma,
            embed_beta,
            blocks,
            score_kernel,
        }
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.len());
        n
    }

    /// Check every tensor against the shapes `cfg` dictates.
    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        let template = Self::filled(cfg, 0.0)?;
        if template.blocks.len() != self.blocks.len()
            || template
                .blocks
                .iter()
                .zip(&self.blocks)
                .any(|(a, b)| a.heads.len() != b.heads.len())
        {
            return Err(Error::dim("parameter tree does not match block/head counts"));
        }
        let mut shapes = Vec::new();
        template.visit(|n, t| shapes.push((n.to_string(), t.shape().to_vec())));
        let mut k = 0;
        let mut bad = None;
        self.visit(|n, t| {
            if bad.is_none() && (shapes[k].0 != n || shapes[k].1 != t.shape()) {
                bad = Some(format!("{n} has shape {:?}, expected {:?}", t.shape(), shapes[k].1));
            }
            k += 1;
        });
        bad.map_or(Ok(()), |m| Err(Error::dim(m)))
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Weight,
    Bias,
    Gain,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig {
            image_side: 32,
            patch_side: 16,
            embed_dim: 8,
            num_heads: 2,
            num_blocks: 1,
            num_classes: 2,
            mlp_hidden: 16,
        };
        assert!(cfg.validate().is_ok());
        assert_eq!((cfg.grid(), cfg.tokens(), cfg.head_dim()), (2, 5, 4));
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
        cfg.num_heads = 2;
        cfg.image_side = 30;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn parameter_count_matches_random_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let heads = rng.random_range(1..4);
            let cfg = EncoderConfig {
                patch_side: rng.random_range(1..5),
                image_side: 0,
                embed_dim: heads * rng.random_range(1..5),
                num_heads: heads,
                num_blocks: rng.random_range(1..4),
                num_classes: rng.random_range(1..5),
                mlp_hidden: rng.random_range(1..9),
            };
            let cfg = EncoderConfig {
                image_side: cfg.patch_side * rng.random_range(1..4),
                ..cfg
            };
            let p = EncoderParams::init(&cfg, &mut rng).unwrap();
            assert_eq!(p.count(), parameter_count(&cfg), "{cfg:?}");
            p.check(&cfg).unwrap();
        }
    }

    #[test]
    fn init_is_truncated_and_seeded() {
        let cfg = EncoderConfig {
            image_side: 8,
            patch_side: 4,
            embed_dim: 8,
            num_heads: 2,
            num_blocks: 2,
            num_classes: 3,
            mlp_hidden: 16,
        };
        let a = EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.patch_weight.data().iter().all(|v| v.abs() <= 0.04));
        assert!(a.patch_bias.data().iter().all(|&v| v == 0.0));
        assert!(a.embed_gamma.data().iter().all(|&v| v == 1.0));
        assert_eq!(a.names().len(), a.clone().leaves_mut().len());
    }
}
