use crate::encoder::{BlockParams, BlockWeights, EncoderConfig, EncoderParams, EncoderWeights, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::numerics::{GradTape, Tensor, Var};

/// Tape handles for one branch's parameters.
pub type BranchVars = EncoderWeights<Var>;

/// Token sequence `L×D`: class token at row 0, then patch tokens in
/// row-major patch order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbedding {
    pub tokens: Tensor,
}

/// All `B×M` attention matrices of one branch, block-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    pub blocks: usize,
    pub heads: usize,
    pub maps: Vec<Tensor>,
}

impl AttentionStack {
    pub fn get(&self, block: usize, head: usize) -> &Tensor {
        &self.maps[block * self.heads + head]
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Map `[0,1]` pixels to `[-1,1]` (channel mean 0.5, std 0.5).
pub fn standardize_pixels(image: &Tensor) -> Tensor {
    image.map(|v| (v - 0.5) / 0.5)
}

/// Cut an `H×H×3` image into `N²` rows of `3·P²` values. Row `j` is patch
/// `(j / N, j % N)`, flattened channel-last.
pub fn patchify(image: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    cfg.validate()?;
    let side = cfg.image_side;
    if image.shape() != [side, side, 3] {
        return Err(Error::dim(format!(
            "patchify expects a {side}×{side}×3 image, got {:?}",
            image.shape()
        )));
    }
    let (n, p) = (cfg.grid(), cfg.patch_side);
    let src = image.data();
    let mut out = Vec::with_capacity(image.len());
    for pr in 0..n {
        for pc in 0..n {
            for y in 0..p {
                let row = (pr * p + y) * side + pc * p;
                out.extend_from_slice(&src[row * 3..(row + p) * 3]);
            }
        }
    }
    Tensor::new(vec![n * n, cfg.patch_len()], out)
}

/// Record every parameter of a branch on `tape`.
pub fn bind(tape: &mut GradTape, params: &EncoderParams, trainable: bool) -> BranchVars {
    params.map(|_, t| tape.leaf(t.clone().with_requires_grad(trainable)))
}

fn bind_block(tape: &mut GradTape, block: &BlockParams) -> BlockWeights<Var> {
    block.map("block", |_, t| tape.constant(t.clone()))
}

pub(crate) fn embed_on_tape(
    tape: &mut GradTape,
    w: &BranchVars,
    cfg: &EncoderConfig,
    patches: Var,
) -> Result<Var> {
    let expected = [cfg.grid() * cfg.grid(), cfg.patch_len()];
    if tape.shape(patches) != expected {
        return Err(Error::dim(format!(
            "patch matrix {:?} does not match {expected:?}",
            tape.shape(patches)
        )));
    }
    let x = tape.matmul(patches, w.patch_weight)?;
    let x = tape.add_bias(x, w.patch_bias)?;
    let tokens = tape.concat_rows(&[w.cls_token, x])?;
    let tokens = tape.add(tokens, w.pos_embed)?;
    tape.layer_norm(tokens, w.embed_gamma, w.embed_beta, 1, LAYER_NORM_EPS)
}

pub(crate) fn msa_on_tape(
    tape: &mut GradTape,
    w: &BlockWeights<Var>,
    cfg: &EncoderConfig,
    z: Var,
) -> Result<(Var, Vec<Var>)> {
    let dh = cfg.head_dim();
    if tape.shape(z).len() != 2 || tape.shape(z)[1] != cfg.embed_dim {
        return Err(Error::dim(format!(
            "attention input {:?} does not have width {}",
            tape.shape(z),
            cfg.embed_dim
        )));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(cfg.num_heads);
    let mut attn = Vec::with_capacity(cfg.num_heads);
    for (m, head) in w.heads.iter().enumerate() {
        let part = tape.slice_cols(z, m * dh, dh)?;
        let q = tape.matmul(part, head.q_weight)?;
        let q = tape.add_bias(q, head.q_bias)?;
        let k = tape.matmul(part, head.k_weight)?;
        let k = tape.add_bias(k, head.k_bias)?;
        let v = tape.matmul(part, head.v_weight)?;
        let v = tape.add_bias(v, head.v_bias)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, scale);
        let a = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(a, v)?);
        attn.push(a);
    }
    let merged = tape.concat_cols(&outs)?;
    let out = tape.matmul(merged, w.proj_weight)?;
    let out = tape.add_bias(out, w.proj_bias)?;
    Ok((out, attn))
}

pub(crate) fn block_on_tape(
    tape: &mut GradTape,
    w: &BlockWeights<Var>,
    cfg: &EncoderConfig,
    z: Var,
) -> Result<(Var, Vec<Var>)> {
    let h = tape.layer_norm(z, w.norm1_gamma, w.norm1_beta, 1, LAYER_NORM_EPS)?;
    let (msa, attn) = msa_on_tape(tape, w, cfg, h)?;
    let z = tape.add(z, msa)?;
    let h = tape.layer_norm(z, w.norm2_gamma, w.norm2_beta, 1, LAYER_NORM_EPS)?;
    let h = tape.matmul(h, w.fc1_weight)?;
    let h = tape.add_bias(h, w.fc1_bias)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, w.fc2_weight)?;
    let h = tape.add_bias(h, w.fc2_bias)?;
    Ok((tape.add(z, h)?, attn))
}

/// Full branch forward on `tape`: returns the output token embeddings and
/// all attention matrices in execution order.
pub fn encode_on_tape(
    tape: &mut GradTape,
    w: &BranchVars,
    cfg: &EncoderConfig,
    image: &Tensor,
) -> Result<(Var, Vec<Var>)> {
    let patches = patchify(&standardize_pixels(image), cfg)?;
    let patches = tape.constant(patches);
    let mut z = embed_on_tape(tape, w, cfg, patches)?;
    let mut attn = Vec::with_capacity(cfg.num_blocks * cfg.num_heads);
    for block in &w.blocks {
        let (next, a) = block_on_tape(tape, block, cfg, z)?;
        z = next;
        attn.extend(a);
    }
    Ok((z, attn))
}

/// `LayerNorm(concat(class_token, patches·W + b) + position_embedding)`.
pub fn embed_tokens(patches: &Tensor, params: &EncoderParams, cfg: &EncoderConfig) -> Result<TokenEmbedding> {
    let mut tape = GradTape::new();
    let w = bind(&mut tape, params, false);
    let p = tape.constant(patches.clone());
    let z = embed_on_tape(&mut tape, &w, cfg, p)?;
    Ok(TokenEmbedding {
        tokens: tape.take_value(z),
    })
}

/// Multi-head self-attention on an (already normalized) `L×D` sequence.
/// Head `m` projects columns `m·d..(m+1)·d` of the input, `d = D/M`.
pub fn msa_forward(z: &Tensor, block: &BlockParams, cfg: &EncoderConfig) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = GradTape::new();
    let w = bind_block(&mut tape, block);
    let zv = tape.constant(z.clone());
    let (out, attn) = msa_on_tape(&mut tape, &w, cfg, zv)?;
    let attn = attn.into_iter().map(|a| tape.take_value(a)).collect();
    Ok((tape.take_value(out), attn))
}

/// One pre-norm transformer block with residual attention and MLP.
pub fn block_forward(z: &Tensor, block: &BlockParams, cfg: &EncoderConfig) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = GradTape::new();
    let w = bind_block(&mut tape, block);
    let zv = tape.constant(z.clone());
    let (out, attn) = block_on_tape(&mut tape, &w, cfg, zv)?;
    let attn = attn.into_iter().map(|a| tape.take_value(a)).collect();
    Ok((tape.take_value(out), attn))
}

pub fn encode(image: &Tensor, params: &EncoderParams, cfg: &EncoderConfig) -> Result<(Tensor, AttentionStack)> {
    let mut tape = GradTape::new();
    let w = bind(&mut tape, params, false);
    let (z, attn) = encode_on_tape(&mut tape, &w, cfg, image)?;
    let maps = attn.into_iter().map(|a| tape.take_value(a)).collect();
    Ok((
        tape.take_value(z),
        AttentionStack {
            blocks: cfg.num_blocks,
            heads: cfg.num_heads,
            maps,
        },
    ))
}
