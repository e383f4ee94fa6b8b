//! Deep pixel clustering: a three-layer convolutional extractor whose
//! per-pixel argmax is the cluster label, trained per image against
//! superpixel-majority self-labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{normalize_axis, GradTape, Tensor, Var};
use crate::segmenter::SegmentMap;

const NUM_LAYERS: usize = 3;
const KERNEL_SIDE: usize = 3;
const RESPONSE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpcConfig {
    pub num_channels: usize,
    pub train_iterations: usize,
    pub learning_rate: f64,
    pub min_clusters: usize,
    pub seed: u64,
}

impl Default for DpcConfig {
    fn default() -> Self {
        Self {
            num_channels: 32,
            train_iterations: 64,
            learning_rate: 0.1,
            min_clusters: 2,
            seed: 0,
        }
    }
}

impl DpcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.num_channels >= self.min_clusters && self.min_clusters >= 2) {
            return Err(Error::param(format!(
                "need channels ≥ min_clusters ≥ 2, got {} and {}",
                self.num_channels, self.min_clusters
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Extractor weights plus the training settings they were made with.
#[derive(Clone, Debug, PartialEq)]
pub struct DpcParams {
    pub config: DpcConfig,
    /// `3×3×cin×Q` kernels, input layer first.
    pub kernels: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    /// Per-channel gain and offset applied after response normalization.
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
}

impl DpcParams {
    /// Uniform init in `±1/√fan_in`, seeded by `config.seed`.
    pub fn init(config: &DpcConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let q = config.num_channels;
        let mut kernels = Vec::with_capacity(NUM_LAYERS);
        let mut biases = Vec::with_capacity(NUM_LAYERS);
        for layer in 0..NUM_LAYERS {
            let cin = if layer == 0 { 3 } else { q };
            let bound = 1.0 / ((KERNEL_SIDE * KERNEL_SIDE * cin) as f64).sqrt();
            let shape = [KERNEL_SIDE, KERNEL_SIDE, cin, q];
            kernels.push(Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound)));
            biases.push(Tensor::from_fn(&[q], |_| rng.random_range(-bound..bound)));
        }
        Ok(Self {
            config: *config,
            kernels,
            biases,
            norm_gain: Tensor::full(&[q], 1.0),
            norm_bias: Tensor::zeros(&[q]),
        })
    }

    /// All convolution weights zero; useful for checking the bias path.
    pub fn zeros(config: &DpcConfig) -> Result<Self> {
        let mut p = Self::init(config)?;
        for t in p.kernels.iter_mut().chain(p.biases.iter_mut()) {
            t.data_mut().fill(0.0);
        }
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        self.config.validate()?;
        let q = self.config.num_channels;
        if self.kernels.len() != NUM_LAYERS || self.biases.len() != NUM_LAYERS {
            return Err(Error::dim(format!("extractor needs {NUM_LAYERS} layers")));
        }
        for (layer, (k, b)) in self.kernels.iter().zip(&self.biases).enumerate() {
            let cin = if layer == 0 { 3 } else { q };
            if k.shape() != [KERNEL_SIDE, KERNEL_SIDE, cin, q] || b.shape() != [q] {
                return Err(Error::dim(format!(
                    "layer {layer}: kernel {:?}, bias {:?}",
                    k.shape(),
                    b.shape()
                )));
            }
        }
        if self.norm_gain.shape() != [q] || self.norm_bias.shape() != [q] {
            return Err(Error::dim(format!(
                "normalization gain {:?} / offset {:?} for {q} channels",
                self.norm_gain.shape(),
                self.norm_bias.shape()
            )));
        }
        Ok(())
    }
}

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w, 3] => Ok((h, w)),
        ref s => Err(Error::dim(format!("expected an h×w×3 image, got {s:?}"))),
    }
}

/// Records the extractor; returns the normalized `hw×Q` responses.
fn features_on_tape(tape: &mut GradTape, image: &Tensor, params: &DpcParams, w: &Bound) -> Result<Var> {
    let (h, wd) = check_image(image)?;
    let layers = &w.layers;
    let mut x = tape.constant(padded_input(image, h, wd));
    for (i, &(k, b)) in layers.iter().enumerate() {
        let y = tape.conv2d(x, k, 0)?;
        x = tape.add_bias(y, b)?;
        if i + 1 < layers.len() {
            x = tape.relu(x);
        }
    }
    let flat = tape.reshape(x, &[h * wd, params.config.num_channels])?;
    let norm = tape.normalize(flat, 0, RESPONSE_EPS)?;
    let scaled = tape.mul_last(norm, w.gain)?;
    tape.add_bias(scaled, w.offset)
}

/// Centred pixels, edge-replicated by the receptive-field radius so the
/// unpadded convolutions return the input extent and uniform regions stay
/// uniform up to the border.
fn padded_input(image: &Tensor, h: usize, w: usize) -> Tensor {
    let r = NUM_LAYERS * (KERNEL_SIDE / 2);
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    Tensor::from_fn(&[ph, pw, 3], |i| {
        let (p, c) = (i / 3, i % 3);
        let y = (p / pw).saturating_sub(r).min(h - 1);
        let x = (p % pw).saturating_sub(r).min(w - 1);
        2.0 * image.data()[(y * w + x) * 3 + c] - 1.0
    })
}

struct Bound {
    layers: Vec<(Var, Var)>,
    gain: Var,
    offset: Var,
}

fn bind(tape: &mut GradTape, params: &DpcParams, trainable: bool) -> Bound {
    let mut put = |t: &Tensor| {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    let layers = params
        .kernels
        .iter()
        .zip(&params.biases)
        .map(|(k, b)| (put(k), put(b)))
        .collect();
    Bound {
        layers,
        gain: put(&params.norm_gain),
        offset: put(&params.norm_bias),
    }
}

/// Per-pixel responses, each channel standardized across pixels.
pub fn dpc_features(image: &Tensor, params: &DpcParams) -> Result<Tensor> {
    params.check()?;
    let (h, w) = check_image(image)?;
    let mut tape = GradTape::new();
    let layers = bind(&mut tape, params, false);
    let out = features_on_tape(&mut tape, image, params, &layers)?;
    tape.take_value(out).reshape(&[h, w, params.config.num_channels])
}

fn argmax_rows(data: &[f64], q: usize) -> Vec<u32> {
    data.chunks_exact(q)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

/// Channel argmax per pixel (lowest channel on ties), compacted densely.
pub fn dpc_assign(features: &Tensor) -> Result<SegmentMap> {
    let [h, w, q] = *features.shape() else {
        return Err(Error::dim(format!("expected h×w×Q features, got {:?}", features.shape())));
    };
    SegmentMap::from_labels(h, w, argmax_rows(features.data(), q))
}

fn count_distinct(labels: &[u32]) -> usize {
    let mut seen = std::collections::BTreeSet::new();
    labels.iter().for_each(|&l| {
        seen.insert(l);
    });
    seen.len()
}

/// Most frequent label inside each superpixel, painted over its pixels.
fn majority_targets(labels: &[u32], superpixels: &SegmentMap, q: usize) -> Vec<usize> {
    let mut votes = vec![0usize; superpixels.num_segments * q];
    for (&s, &l) in superpixels.labels.iter().zip(labels) {
        votes[s as usize * q + l as usize] += 1;
    }
    let winners: Vec<usize> = votes
        .chunks_exact(q)
        .map(|v| {
            let mut best = 0;
            for (i, &c) in v.iter().enumerate() {
                if c > v[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    superpixels.labels.iter().map(|&s| winners[s as usize]).collect()
}

/// Training record: per-iteration loss and label count before each update.
#[derive(Clone, Debug)]
pub struct DpcTrace {
    pub params: DpcParams,
    pub losses: Vec<f64>,
    pub label_counts: Vec<usize>,
}

/// Self-labelling loop. Returns the last weights whose label count is
/// between `min_clusters` and the initial count.
pub fn dpc_train(image: &Tensor, superpixels: &SegmentMap, params: DpcParams) -> Result<DpcParams> {
    Ok(dpc_train_with_trace(image, superpixels, params)?.params)
}

pub fn dpc_train_with_trace(image: &Tensor, superpixels: &SegmentMap, params: DpcParams) -> Result<DpcTrace> {
    params.check()?;
    let (h, w) = check_image(image)?;
    if (superpixels.h, superpixels.w) != (h, w) {
        return Err(Error::dim(format!(
            "superpixels {}×{} do not cover a {h}×{w} image",
            superpixels.h, superpixels.w
        )));
    }
    let cfg = params.config;
    let q = cfg.num_channels;
    let mut current = params;
    let mut accepted = current.clone();
    let mut initial_count = None;
    let mut losses = Vec::new();
    let mut label_counts = Vec::new();

    for iteration in 0..=cfg.train_iterations {
        let mut tape = GradTape::new();
        let layers = bind(&mut tape, &current, true);
        let responses = features_on_tape(&mut tape, image, &current, &layers)?;
        let labels = argmax_rows(tape.value(responses).data(), q);
        let count = count_distinct(&labels);
        let initial = *initial_count.get_or_insert(count);
        if initial < cfg.min_clusters {
            // featureless input: nothing to separate
            break;
        }
        if count < cfg.min_clusters {
            if iteration == 1 {
                return Err(Error::Training {
                    iteration: 0,
                    message: format!("clusters collapsed to {count} below minimum {}", cfg.min_clusters),
                });
            }
            break;
        }
        if count <= initial {
            accepted = current.clone();
        }
        if iteration == cfg.train_iterations {
            break;
        }
        label_counts.push(count);
        let targets = majority_targets(&labels, superpixels, q);
        let loss = tape.cross_entropy(responses, &targets)?;
        losses.push(tape.value(loss).item()?);
        tape.backward(loss)?;
        let lr = cfg.learning_rate;
        let mut pairs: Vec<(&mut Tensor, Var)> = Vec::new();
        for ((k, b), &(kv, bv)) in current
            .kernels
            .iter_mut()
            .zip(current.biases.iter_mut())
            .zip(&layers.layers)
        {
            pairs.push((k, kv));
            pairs.push((b, bv));
        }
        pairs.push((&mut current.norm_gain, layers.gain));
        pairs.push((&mut current.norm_bias, layers.offset));
        for (t, v) in pairs {
            let Some(g) = tape.grad(v) else { continue };
            for (p, g) in t.data_mut().iter_mut().zip(g) {
                *p -= lr * g;
            }
        }
    }
    Ok(DpcTrace {
        params: accepted,
        losses,
        label_counts,
    })
}

/// Reference forward without the tape, used to cross-check.
#[allow(dead_code)]
pub(crate) fn features_reference(image: &Tensor, params: &DpcParams) -> Result<Tensor> {
    let (h, w) = check_image(image)?;
    let mut x = padded_input(image, h, w);
    for layer in 0..NUM_LAYERS {
        let mut y = crate::numerics::conv2d(&x, &params.kernels[layer], 0)?;
        let q = params.config.num_channels;
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += params.biases[layer].data()[i % q];
        }
        x = if layer + 1 < NUM_LAYERS { crate::numerics::relu(&y) } else { y };
    }
    let q = params.config.num_channels;
    let mut y = normalize_axis(&x.reshape(&[h * w, q])?, 0, RESPONSE_EPS)?;
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v = *v * params.norm_gain.data()[i % q] + params.norm_bias.data()[i % q];
    }
    y.reshape(&[h, w, q])
}
