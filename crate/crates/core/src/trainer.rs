//! Image-level supervision of all three branches: cross-entropy on the
//! globally pooled class score map, summed over scales and batch.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cam::{class_scores, score_map_on_tape, ClassScoreMap};
use crate::encoder::{bind, encode_on_tape, read_checkpoint, write_checkpoint, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::multiscale::{build_pyramid, MultiscaleParams, PyramidConfig, NUM_SCALES};
use crate::numerics::{GradTape, Tensor};

/// Update rule applied to the summed-loss gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    /// `θ ← θ − lr·g`
    Sgd,
    /// `v ← μ·v + g; θ ← θ − lr·v`
    Momentum(f64),
    /// Bias-corrected first/second moment scaling with `β₁ = 0.9`,
    /// `β₂ = 0.999`, `ε = 1e-8`.
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Momentum(0.9)
    }
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "momentum" => Ok(Optimizer::default()),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::param(format!("unknown optimizer `{other}` (sgd|momentum|adam)"))),
        }
    }
}

impl std::fmt::Display for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Optimizer::Sgd => f.write_str("sgd"),
            Optimizer::Momentum(_) => f.write_str("momentum"),
            Optimizer::Adam => f.write_str("adam"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Weight on each branch's loss term.
    pub scale_weights: [f64; NUM_SCALES],
    /// Write checkpoints every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 0.01,
            seed: 0,
            optimizer: Optimizer::default(),
            scale_weights: [1.0; NUM_SCALES],
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted so a step can be checked to be inert.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::param(format!(
                "epochs and batch size must be positive, got {} and {}",
                self.epochs, self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if let Optimizer::Momentum(mu) = self.optimizer {
            if !(0.0..1.0).contains(&mu) {
                return Err(Error::param(format!("momentum must lie in [0,1), got {mu}")));
            }
        }
        if self.scale_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::param(format!(
                "scale weights must be non-negative, got {:?}",
                self.scale_weights
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub image: Tensor,
    pub class_id: usize,
}

fn check_label(y: usize, c: usize) -> Result<()> {
    if y >= c {
        return Err(Error::param(format!("class {y} not below {c}")));
    }
    Ok(())
}

/// `−ln softmax(GAP(S))[y]` as a scalar tensor.
pub fn cross_entropy_loss(smap: &ClassScoreMap, y: usize) -> Result<Tensor> {
    let logits = class_scores(smap)?;
    check_label(y, logits.len())?;
    let m = logits.max();
    let log_z = m + logits.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(Tensor::scalar(log_z - logits.data()[y]))
}

/// Loss of one branch on one pyramid level, and the gradient of
/// `weight·loss` with respect to that branch's parameters.
fn branch_loss_grad(
    level: &Tensor,
    y: usize,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    weight: f64,
) -> Result<(f64, EncoderParams)> {
    let mut tape = GradTape::new();
    let w = bind(&mut tape, params, true);
    let (z, _) = encode_on_tape(&mut tape, &w, cfg, level)?;
    let smap = score_map_on_tape(&mut tape, z, w.score_kernel, cfg)?;
    let pooled = tape.global_avg_pool(smap)?;
    let loss = tape.cross_entropy(pooled, &[y])?;
    let value = tape.value(loss).item()?;
    let weighted = tape.scale(loss, weight);
    tape.backward(weighted)?;
    let grads = w.try_map(|_, &v| {
        let shape = tape.shape(v).to_vec();
        match tape.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()),
            None => Ok(Tensor::zeros(&shape)),
        }
    })?;
    Ok((value, grads))
}

fn add_assign(acc: &mut EncoderParams, other: &EncoderParams) {
    for (a, b) in acc.leaves_mut().into_iter().zip(other.clone().leaves_mut()) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

/// Per-branch gradients of a loss, shaped like the parameters.
pub type Gradients = Vec<EncoderParams>;

/// Summed weighted loss over the batch and the three branches, and its
/// gradient. Examples run concurrently; gradients are reduced in batch order.
pub fn loss_and_gradients(
    batch: &[LabeledExample],
    params: &MultiscaleParams,
    pcfg: &PyramidConfig,
    scale_weights: [f64; NUM_SCALES],
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    params.check(pcfg)?;
    let c = pcfg.num_classes();
    let per_example: Vec<(f64, Gradients)> = batch
        .par_iter()
        .map(|ex| {
            check_label(ex.class_id, c)?;
            let levels = build_pyramid(&ex.image, pcfg)?;
            let mut loss = 0.0;
            let mut grads = Vec::with_capacity(NUM_SCALES);
            for i in 0..NUM_SCALES {
                let (l, g) = branch_loss_grad(
                    &levels[i],
                    ex.class_id,
                    &params.branches[i],
                    &pcfg.scales[i],
                    scale_weights[i],
                )?;
                loss += scale_weights[i] * l;
                grads.push(g);
            }
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;
    let mut iter = per_example.into_iter();
    let (mut total, mut acc) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        total += l;
        for (a, b) in acc.iter_mut().zip(&g) {
            add_assign(a, b);
        }
    }
    Ok((total, acc))
}

/// Summed weighted loss without gradients (inference path).
pub fn batch_loss(
    batch: &[LabeledExample],
    params: &MultiscaleParams,
    pcfg: &PyramidConfig,
    scale_weights: [f64; NUM_SCALES],
) -> Result<f64> {
    params.check(pcfg)?;
    let mut total = 0.0;
    for ex in batch {
        let levels = build_pyramid(&ex.image, pcfg)?;
        for i in 0..NUM_SCALES {
            let cfg = &pcfg.scales[i];
            let (z, _) = crate::encoder::encode(&levels[i], &params.branches[i], cfg)?;
            let smap = crate::cam::class_score_map(&z, &params.branches[i].score_kernel, cfg)?;
            total += scale_weights[i] * cross_entropy_loss(&smap, ex.class_id)?.item()?;
        }
    }
    Ok(total)
}

/// Parameters plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: MultiscaleParams,
    /// Momentum buffer, or Adam's first moment.
    velocity: Option<Gradients>,
    /// Adam's second moment.
    second_moment: Option<Gradients>,
    steps: u64,
}

impl TrainState {
    pub fn new(params: MultiscaleParams) -> Self {
        Self {
            params,
            velocity: None,
            second_moment: None,
            steps: 0,
        }
    }
}

fn zeros_like(grads: &Gradients) -> Gradients {
    grads.iter().map(|g| g.map(|_, t| Tensor::zeros(t.shape()))).collect()
}

/// Apply `f(state_value, gradient_value)` elementwise over matching leaves.
fn zip_update(state: &mut Gradients, grads: &Gradients, f: impl Fn(&mut f64, f64)) {
    for (sb, gb) in state.iter_mut().zip(grads) {
        let mut g = gb.clone();
        for (st, gt) in sb.leaves_mut().into_iter().zip(g.leaves_mut()) {
            for (a, &b) in st.data_mut().iter_mut().zip(gt.data()) {
                f(a, b);
            }
        }
    }
}

/// One optimizer update on `batch`; returns the mean (over examples) of the
/// summed branch losses before the update.
pub fn train_step(
    batch: &[LabeledExample],
    state: &mut TrainState,
    pcfg: &PyramidConfig,
    tcfg: &TrainConfig,
) -> Result<f64> {
    tcfg.validate()?;
    let (total, grads) = loss_and_gradients(batch, &state.params, pcfg, tcfg.scale_weights)?;
    if !total.is_finite() {
        return Err(Error::Training {
            iteration: 0,
            message: format!("non-finite loss {total}"),
        });
    }
    let lr = tcfg.learning_rate;
    state.steps += 1;
    let step = match tcfg.optimizer {
        Optimizer::Sgd => grads,
        Optimizer::Momentum(mu) => {
            let v = state.velocity.get_or_insert_with(|| zeros_like(&grads));
            zip_update(v, &grads, |a, b| *a = mu * *a + b);
            v.clone()
        }
        Optimizer::Adam => {
            let m = state.velocity.get_or_insert_with(|| zeros_like(&grads));
            zip_update(m, &grads, |a, b| *a = ADAM_BETA1 * *a + (1.0 - ADAM_BETA1) * b);
            let v = state.second_moment.get_or_insert_with(|| zeros_like(&grads));
            zip_update(v, &grads, |a, b| *a = ADAM_BETA2 * *a + (1.0 - ADAM_BETA2) * b * b);
            let t = state.steps as i32;
            let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
            let mut step = m.clone();
            zip_update(&mut step, v, |a, b| *a = (*a / c1) / ((b / c2).sqrt() + ADAM_EPS));
            step
        }
    };
    for (pb, sb) in state.params.branches.iter_mut().zip(&step) {
        let mut s = sb.clone();
        for (p, g) in pb.leaves_mut().into_iter().zip(s.leaves_mut()) {
            for (a, b) in p.data_mut().iter_mut().zip(g.data()) {
                *a -= lr * b;
            }
        }
    }
    Ok(total / batch.len() as f64)
}

/// Result of a full training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: MultiscaleParams,
    /// Mean per-example loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// Stream reserved for the epoch shuffle; branch initializers use 1..=3.
const SHUFFLE_STREAM: u64 = NUM_SCALES as u64 + 1;
/// Seeded initialization and epoch loop over shuffled batches.
pub fn train(dataset: &[LabeledExample], pcfg: &PyramidConfig, tcfg: &TrainConfig) -> Result<MultiscaleParams> {
    Ok(train_with(dataset, pcfg, tcfg, None, |_, _| {})?.params)
}

/// [`train`] with optional checkpoint directory and a per-epoch callback
/// receiving `(epoch, mean_loss)`.
pub fn train_with(
    dataset: &[LabeledExample],
    pcfg: &PyramidConfig,
    tcfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::param("empty training set"));
    }
    tcfg.validate()?;
    pcfg.validate()?;
    let mut state = TrainState::new(MultiscaleParams::init(pcfg, tcfg.seed)?);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(tcfg.epochs);
    let mut iteration = 0;
    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<LabeledExample> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let mean = train_step(&batch, &mut state, pcfg, tcfg).map_err(|e| match e {
                Error::Training { message, .. } => Error::Training { iteration, message },
                other => other,
            })?;
            sum += mean * batch.len() as f64;
            iteration += 1;
        }
        let mean = sum / dataset.len() as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, mean);
        let last = epoch + 1 == tcfg.epochs;
        let periodic = tcfg.checkpoint_every > 0 && (epoch + 1) % tcfg.checkpoint_every == 0;
        if let (Some(dir), true) = (checkpoint_dir, last || periodic) {
            write_checkpoints(dir, pcfg, &state.params)?;
        }
    }
    Ok(TrainOutcome {
        params: state.params,
        epoch_losses,
    })
}

pub const CHECKPOINT_MANIFEST: &str = "checkpoints.txt";

fn branch_file(i: usize) -> String {
    format!("branch{i}.ckpt")
}

/// One checkpoint per branch plus a manifest listing them in scale order.
pub fn write_checkpoints(dir: &Path, pcfg: &PyramidConfig, params: &MultiscaleParams) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    let mut paths = Vec::with_capacity(NUM_SCALES);
    for i in 0..NUM_SCALES {
        let name = branch_file(i);
        let path = dir.join(&name);
        write_checkpoint(&path, &pcfg.scales[i], &params.branches[i])?;
        manifest.push_str(&format!("{name}\n"));
        paths.push(path);
    }
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(paths)
}

/// Load the three branches named by a checkpoint manifest. The fusion rule
/// is not stored and defaults to mean.
pub fn read_checkpoints(dir: &Path) -> Result<(PyramidConfig, MultiscaleParams)> {
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let names: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if names.len() != NUM_SCALES {
        return Err(Error::parse(
            mpath.display().to_string(),
            format!("expected {NUM_SCALES} checkpoint entries, found {}", names.len()),
        ));
    }
    let mut cfgs = Vec::with_capacity(NUM_SCALES);
    let mut branches = Vec::with_capacity(NUM_SCALES);
    for name in names {
        let (cfg, p) = read_checkpoint(&dir.join(name))?;
        cfgs.push(cfg);
        branches.push(p);
    }
    let scales: [EncoderConfig; NUM_SCALES] = cfgs.try_into().expect("three configs");
    let pcfg = PyramidConfig {
        scales,
        fusion: Default::default(),
    };
    pcfg.validate()?;
    let params = MultiscaleParams { branches };
    params.check(&pcfg)?;
    Ok((pcfg, params))
}
