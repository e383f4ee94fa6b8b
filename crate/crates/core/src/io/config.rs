//! Flat `key = value` run configuration with command-line overrides.

use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::multiscale::{Fusion, PyramidConfig, NUM_SCALES};
use crate::refine::RefineParams;
use crate::segmenter::{DpcConfig, SlicParams};
use crate::trainer::{Optimizer, TrainConfig};

/// Everything needed to reproduce a run, besides the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub sides: [usize; NUM_SCALES],
    pub patch_side: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub num_classes: usize,
    pub mlp_hidden: usize,
    pub fusion: Fusion,
    pub slic: SlicParams,
    pub dpc: DpcConfig,
    pub refine: RefineParams,
    pub tau: f64,
    pub train: TrainConfig,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sides: [96, 128, 160],
            patch_side: 16,
            embed_dim: 64,
            num_heads: 4,
            num_blocks: 4,
            num_classes: 2,
            mlp_hidden: 128,
            fusion: Fusion::Mean,
            slic: SlicParams::default(),
            dpc: DpcConfig::default(),
            refine: RefineParams::default(),
            tau: 0.2,
            train: TrainConfig::default(),
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Every recognized key with a one-line description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("sides", "pyramid image sides, three increasing integers `a,b,c`"),
    ("patch_side", "patch side P in pixels"),
    ("embed_dim", "token dimension D"),
    ("num_heads", "attention heads M"),
    ("num_blocks", "transformer blocks B"),
    ("num_classes", "number of classes C"),
    ("mlp_hidden", "hidden width of the block MLP"),
    ("fusion", "per-scale CAM fusion: mean | max"),
    ("slic.segments", "SLIC target segment count K"),
    ("slic.compactness", "SLIC compactness m"),
    ("slic.iterations", "SLIC iterations"),
    ("dpc.channels", "clustering network channels Q"),
    ("dpc.iterations", "clustering network training iterations"),
    ("dpc.learning_rate", "clustering network step size"),
    ("dpc.min_clusters", "minimum cluster count during clustering"),
    ("refine.lambda", "weight of the original map in refinement"),
    ("tau", "relative localization threshold"),
    ("train.epochs", "training epochs"),
    ("train.batch_size", "examples per update"),
    ("train.learning_rate", "step size"),
    ("train.optimizer", "sgd | momentum | adam"),
    ("train.momentum", "momentum coefficient"),
    ("train.scale_weights", "loss weight per branch `a,b,c`"),
    ("train.checkpoint_every", "checkpoint period in epochs (0: end only)"),
    ("seed", "seed for initialization, shuffling and clustering"),
];

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::param(format!("{key} = `{value}`: {why}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e| bad(key, value, e))
}

fn triple<T: std::str::FromStr + Copy>(key: &str, value: &str) -> Result<[T; NUM_SCALES]>
where
    T::Err: std::fmt::Display,
{
    let parts = value
        .split(',')
        .map(|p| num::<T>(key, p))
        .collect::<Result<Vec<T>>>()?;
    parts
        .try_into()
        .map_err(|_| bad(key, value, format!("expected {NUM_SCALES} comma-separated values")))
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Assign one key; the value is validated when the config is checked.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "sides" => self.sides = triple(key, v)?,
            "patch_side" => self.patch_side = num(key, v)?,
            "embed_dim" => self.embed_dim = num(key, v)?,
            "num_heads" => self.num_heads = num(key, v)?,
            "num_blocks" => self.num_blocks = num(key, v)?,
            "num_classes" => self.num_classes = num(key, v)?,
            "mlp_hidden" => self.mlp_hidden = num(key, v)?,
            "fusion" => self.fusion = v.parse()?,
            "slic.segments" => self.slic.target_segments = num(key, v)?,
            "slic.compactness" => self.slic.compactness = num(key, v)?,
            "slic.iterations" => self.slic.iterations = num(key, v)?,
            "dpc.channels" => self.dpc.num_channels = num(key, v)?,
            "dpc.iterations" => self.dpc.train_iterations = num(key, v)?,
            "dpc.learning_rate" => self.dpc.learning_rate = num(key, v)?,
            "dpc.min_clusters" => self.dpc.min_clusters = num(key, v)?,
            "refine.lambda" => self.refine.lambda = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "train.epochs" => self.train.epochs = num(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            "train.learning_rate" => self.train.learning_rate = num(key, v)?,
            "train.optimizer" => self.train.optimizer = v.parse()?,
            "train.momentum" => self.momentum = num(key, v)?,
            "train.scale_weights" => self.train.scale_weights = triple(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            other => return Err(Error::param(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Apply `key=value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let loc = format!("{source}:{}", i + 1);
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(&loc, "expected `key = value`"))?;
            self.set(k.trim(), v).map_err(|e| Error::parse(&loc, e.to_string()))?;
        }
        Ok(())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, source)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Apply `key=value` override strings, as given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::param(format!("override `{o}` is not `key=value`")))?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid()?;
        self.slic.validate()?;
        self.dpc_config().validate()?;
        self.refine.validate()?;
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::param(format!("tau must lie in [0,1], got {}", self.tau)));
        }
        self.train_config().validate()
    }

    pub fn encoder_base(&self) -> EncoderConfig {
        EncoderConfig {
            image_side: 0,
            patch_side: self.patch_side,
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            num_blocks: self.num_blocks,
            num_classes: self.num_classes,
            mlp_hidden: self.mlp_hidden,
        }
    }

    pub fn pyramid(&self) -> Result<PyramidConfig> {
        let mut p = PyramidConfig::new(self.sides, self.encoder_base())?;
        p.fusion = self.fusion;
        Ok(p)
    }

    /// Clustering settings with the run seed.
    pub fn dpc_config(&self) -> DpcConfig {
        DpcConfig {
            seed: self.seed,
            ..self.dpc
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            optimizer: match self.train.optimizer {
                Optimizer::Momentum(_) => Optimizer::Momentum(self.momentum),
                other => other,
            },
            ..self.train
        }
    }

    /// Serialized form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let values: Vec<String> = vec![
            join(&self.sides),
            self.patch_side.to_string(),
            self.embed_dim.to_string(),
            self.num_heads.to_string(),
            self.num_blocks.to_string(),
            self.num_classes.to_string(),
            self.mlp_hidden.to_string(),
            self.fusion.to_string(),
            self.slic.target_segments.to_string(),
            self.slic.compactness.to_string(),
            self.slic.iterations.to_string(),
            self.dpc.num_channels.to_string(),
            self.dpc.train_iterations.to_string(),
            self.dpc.learning_rate.to_string(),
            self.dpc.min_clusters.to_string(),
            self.refine.lambda.to_string(),
            self.tau.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.learning_rate.to_string(),
            t.optimizer.to_string(),
            self.momentum.to_string(),
            join(&t.scale_weights),
            t.checkpoint_every.to_string(),
            self.seed.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|((k, _), v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text(), "t").unwrap(), c);
    }

    #[test]
    fn every_key_is_settable() {
        let text = RunConfig::default().to_text();
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn overrides_and_comments() {
        let mut c = RunConfig::parse("# comment\ntau = 0.3  # inline\nseed=7\n", "t").unwrap();
        assert_eq!((c.tau, c.seed), (0.3, 7));
        c.apply_overrides(&["train.epochs=3", "fusion=max", "sides=32,48,64"]).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.fusion, Fusion::Max);
        assert_eq!(c.pyramid().unwrap().sides(), [32, 48, 64]);
        assert_eq!(c.train_config().seed, 7);
    }

    #[test]
    fn errors_carry_location() {
        match RunConfig::parse("tau = 0.2\nbogus = 1\n", "cfg.txt") {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "cfg.txt:2"),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::parse("sides = 96,128\n", "c").is_err());
        assert!(RunConfig::parse("sides = 128,96,160\n", "c").is_err());
        assert!(RunConfig::parse("tau = 2\n", "c").is_err());
        let mut c = RunConfig::default();
        assert!(c.apply_overrides(&["tau"]).is_err());
    }
}
