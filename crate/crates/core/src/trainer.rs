//! Alternating back-propagation, the direct-regression baselines, the cVAE
//! baseline and the ablation harness.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{epoch_order, Dataset};
use crate::eval::{self, EvalError, MetricReport};
use crate::inference::{self, InferenceError, LangevinConfig, LatentStore, NoiseAwareModel, StartMode};
use crate::model::checkpoint::{Checkpoint, CheckpointError};
use crate::model::{Bound, GeneratorConfig, Init, ModelError, ModelParams, ParamMap, PredictorConfig, RunningStats};
use crate::objective::{self, EdgeLossConfig, LossReport, ObjectiveError};
use crate::rng::{self, purpose};
use crate::tensor::{AdamConfig, AdamState, Graph, NodeId, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("non-finite {what} at epoch {epoch}, step {step}; last good checkpoint: {last_good:?}")]
    Diverged {
        what: String,
        epoch: usize,
        step: u64,
        last_good: Option<PathBuf>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    F1,
    F1Ls,
    FLc,
    Cvae,
    CleanF,
    CleanF1,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::F1,
        Variant::F1Ls,
        Variant::FLc,
        Variant::Cvae,
        Variant::CleanF,
        Variant::CleanF1,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::F1 => "f1",
            Variant::F1Ls => "f1+ls",
            Variant::FLc => "f+lc",
            Variant::Cvae => "cvae",
            Variant::CleanF => "clean-f",
            Variant::CleanF1 => "clean-f1",
        }
    }

    /// Trains the noise generator with Langevin-inferred latents.
    pub fn is_abp(self) -> bool {
        matches!(self, Variant::Full | Variant::FLc | Variant::CleanF)
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, Variant::F1 | Variant::F1Ls | Variant::CleanF1)
    }

    /// Trains on clean labels instead of noisy ones.
    pub fn uses_clean_labels(self) -> bool {
        matches!(self, Variant::CleanF | Variant::CleanF1)
    }

    fn regularizer(self) -> Regularizer {
        match self {
            Variant::F1 | Variant::CleanF1 => Regularizer::None,
            Variant::FLc => Regularizer::EdgeCrossEntropy,
            _ => Regularizer::Smoothness,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.tag() == s).ok_or_else(|| {
            let tags: Vec<&str> = Variant::ALL.iter().map(|v| v.tag()).collect();
            TrainError::Config(format!("unknown variant `{s}`; valid: {}", tags.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Regularizer {
    None,
    Smoothness,
    EdgeCrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate multiplier for the noise generator and the cVAE encoder.
    pub noise_lr_scale: f64,
    /// Multiplier applied to the learning rate once the decay point is passed.
    pub lr_decay: f64,
    /// Fraction of `epochs` after which the decay applies.
    pub decay_after: f64,
    pub langevin: LangevinConfig,
    pub lambda: f64,
    pub alpha: f64,
    /// Divide the smoothness sum by its number of terms.
    pub smooth_normalize: bool,
    pub edge: EdgeLossConfig,
    pub kl_weight: f64,
    pub resolution: usize,
    pub seed: u64,
    pub predictor: PredictorConfig,
    pub generator: GeneratorConfig,
    /// Widths of the four stride-2 convolutions of the cVAE encoder.
    pub encoder_widths: [usize; 4],
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            epochs: 20,
            batch_size: 10,
            lr: 1e-4,
            noise_lr_scale: 1.0,
            lr_decay: 0.9,
            decay_after: 0.8,
            langevin: LangevinConfig::default(),
            lambda: 0.7,
            alpha: 10.0,
            smooth_normalize: false,
            edge: EdgeLossConfig::default(),
            kl_weight: 1.0,
            resolution: 64,
            seed: 0,
            predictor: PredictorConfig::default(),
            generator: GeneratorConfig::default(),
            encoder_widths: [16, 32, 32, 32],
            adam: AdamConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| TrainError::Config(format!("`{key}` = `{value}`: {e}")))
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let items: Vec<usize> = value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| TrainError::Config(format!("`{key}` needs {N} comma-separated widths")))
}

fn list(v: &[usize]) -> String {
    v.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_init(key: &str, value: &str) -> Result<Init> {
    match value.split_once(':') {
        Some(("normal", std)) => Ok(Init::TruncatedNormal { std: parse(key, std)? }),
        Some(("fanin", gain)) => Ok(Init::FanInTruncatedNormal { gain: parse(key, gain)? }),
        _ => Err(TrainError::Config(format!("`{key}` = `{value}`: expected normal:<std> or fanin:<gain>"))),
    }
}

fn init_text(i: Init) -> String {
    match i {
        Init::TruncatedNormal { std } => format!("normal:{std}"),
        Init::FanInTruncatedNormal { gain } => format!("fanin:{gain}"),
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 29] = [
        "variant",
        "epochs",
        "batch_size",
        "lr",
        "noise_lr_scale",
        "lr_decay",
        "decay_after",
        "langevin_steps",
        "langevin_step_size",
        "sigma",
        "start",
        "lambda",
        "alpha",
        "smooth_normalize",
        "edge_kappa",
        "edge_threshold",
        "kl_weight",
        "resolution",
        "seed",
        "latent_dim",
        "predictor_widths",
        "reduced_width",
        "generator_widths",
        "encoder_widths",
        "predictor_init",
        "generator_init",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
    ];

    /// Defaults adjusted for training the predictor from scratch at 64×64:
    /// fan-in scaled predictor init and `γ = 1e-3`.
    pub fn desk_scale() -> Self {
        let mut cfg = Self::default();
        cfg.predictor.init = Init::FanInTruncatedNormal {
            gain: std::f64::consts::SQRT_2,
        };
        cfg.lr = 1e-3;
        cfg
    }

    /// Named starting points for [`TrainConfig::apply_text`]: `paper` or `desk`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::default()),
            "desk" => Ok(Self::desk_scale()),
            _ => Err(TrainError::Config(format!("unknown preset `{name}` (expected paper or desk)"))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "variant" => self.variant = v.parse()?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "noise_lr_scale" => self.noise_lr_scale = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "decay_after" => self.decay_after = parse(key, v)?,
            "langevin_steps" => self.langevin.steps = parse(key, v)?,
            "langevin_step_size" => self.langevin.step_size = parse(key, v)?,
            "sigma" => self.langevin.sigma = parse(key, v)?,
            "start" => {
                self.langevin.start = match v {
                    "warm" => StartMode::Warm,
                    "cold" => StartMode::Cold,
                    _ => return Err(TrainError::Config(format!("`start` = `{v}`: expected warm or cold"))),
                }
            }
            "lambda" => self.lambda = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "smooth_normalize" => self.smooth_normalize = parse(key, v)?,
            "edge_kappa" => self.edge.kappa = parse(key, v)?,
            "edge_threshold" => self.edge.threshold = parse(key, v)?,
            "kl_weight" => self.kl_weight = parse(key, v)?,
            "resolution" => self.resolution = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "latent_dim" => self.generator.latent_dim = parse(key, v)?,
            "predictor_widths" => self.predictor.widths = parse_list(key, v)?,
            "reduced_width" => self.predictor.reduced = parse(key, v)?,
            "generator_widths" => self.generator.widths = parse_list(key, v)?,
            "encoder_widths" => self.encoder_widths = parse_list(key, v)?,
            "predictor_init" => self.predictor.init = parse_init(key, v)?,
            "generator_init" => self.generator.init = parse_init(key, v)?,
            "adam_beta1" => self.adam.beta1 = parse(key, v)?,
            "adam_beta2" => self.adam.beta2 = parse(key, v)?,
            "adam_eps" => self.adam.eps = parse(key, v)?,
            _ => return Err(TrainError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            let v = match key {
                "variant" => self.variant.tag().to_string(),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "lr" => self.lr.to_string(),
                "noise_lr_scale" => self.noise_lr_scale.to_string(),
                "lr_decay" => self.lr_decay.to_string(),
                "decay_after" => self.decay_after.to_string(),
                "langevin_steps" => self.langevin.steps.to_string(),
                "langevin_step_size" => self.langevin.step_size.to_string(),
                "sigma" => self.langevin.sigma.to_string(),
                "start" => match self.langevin.start {
                    StartMode::Warm => "warm".into(),
                    StartMode::Cold => "cold".into(),
                },
                "lambda" => self.lambda.to_string(),
                "alpha" => self.alpha.to_string(),
                "smooth_normalize" => self.smooth_normalize.to_string(),
                "edge_kappa" => self.edge.kappa.to_string(),
                "edge_threshold" => self.edge.threshold.to_string(),
                "kl_weight" => self.kl_weight.to_string(),
                "resolution" => self.resolution.to_string(),
                "seed" => self.seed.to_string(),
                "latent_dim" => self.generator.latent_dim.to_string(),
                "predictor_widths" => list(&self.predictor.widths),
                "reduced_width" => self.predictor.reduced.to_string(),
                "generator_widths" => list(&self.generator.widths),
                "encoder_widths" => list(&self.encoder_widths),
                "predictor_init" => init_text(self.predictor.init),
                "generator_init" => init_text(self.generator.init),
                "adam_beta1" => self.adam.beta1.to_string(),
                "adam_beta2" => self.adam.beta2.to_string(),
                "adam_eps" => self.adam.eps.to_string(),
                _ => unreachable!(),
            };
            writeln!(s, "{key} = {v}").unwrap();
        }
        s
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 {
            return err("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1");
        }
        if !(self.lr > 0.0) || !(self.noise_lr_scale > 0.0) {
            return err("lr and noise_lr_scale must be positive");
        }
        if !(self.lambda >= 0.0) || !(self.alpha > 0.0) {
            return err("lambda must be non-negative and alpha positive");
        }
        if !(0.0..=1.0).contains(&self.decay_after) {
            return err("decay_after must lie in [0, 1]");
        }
        self.langevin.validate()?;
        crate::model::check_resolution(self.resolution, self.resolution)?;
        Ok(())
    }
}

/// Learning rate for 1-based `epoch`: `γ` up to `⌈decay_after·K⌉`, `lr_decay·γ` afterwards.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let boundary = (cfg.decay_after * cfg.epochs as f64 - 1e-9).ceil() as usize;
    if epoch > boundary {
        cfg.lr * cfg.lr_decay
    } else {
        cfg.lr
    }
}

/// cVAE amortized encoder `q_φ(Z | X, Y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceNetParams {
    pub tensors: ParamMap,
}

impl InferenceNetParams {
    pub fn init(widths: [usize; 4], latent_dim: usize, resolution: usize, init: Init, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[purpose::INIT, 3]);
        let mut t = ParamMap::new();
        let mut cin = 4;
        for (i, &w) in widths.iter().enumerate() {
            t.insert(format!("conv{}.w", i + 1), init.sample(&[w, cin, 3, 3], cin * 9, &mut r));
            t.insert(format!("conv{}.b", i + 1), Tensor::zeros([w]));
            cin = w;
        }
        let feat = cin * (resolution / 16) * (resolution / 16);
        t.insert("fc.w".into(), init.sample(&[2 * latent_dim, feat], feat, &mut r));
        t.insert("fc.b".into(), Tensor::zeros([2 * latent_dim]));
        Self { tensors: t }
    }

    /// Appends the encoder, returning `(μ, log v)` nodes of shape `N×d`.
    pub fn build(&self, g: &mut Graph, p: &Bound, x: NodeId, y: NodeId, batch: usize, d: usize) -> Result<(NodeId, NodeId)> {
        let mut h = g.concat(&[x, y]);
        for i in 1..=4 {
            h = g.conv2d(h, p.get(&format!("conv{i}.w"))?, Some(p.get(&format!("conv{i}.b"))?), 2, 1);
            h = g.relu(h);
        }
        let feat = self.tensors["fc.w"].shape()[1];
        let flat = g.reshape(h, [batch, feat]);
        let out = g.linear(flat, p.get("fc.w")?, Some(p.get("fc.b")?));
        Ok((g.slice_cols(out, 0, d), g.slice_cols(out, d, 2 * d)))
    }
}

/// Everything needed to continue training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub encoder: Option<InferenceNetParams>,
    pub adam: AdamState,
    pub latents: Option<LatentStore>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, dataset_len: usize) -> Self {
        let params = ModelParams::init(cfg.predictor.clone(), cfg.generator.clone(), cfg.seed);
        let encoder = (cfg.variant == Variant::Cvae)
            .then(|| InferenceNetParams::init(cfg.encoder_widths, cfg.generator.latent_dim, cfg.resolution, cfg.generator.init, cfg.seed));
        let latents = cfg.variant.is_abp().then(|| LatentStore::new(dataset_len, cfg.generator.latent_dim, cfg.seed));
        Self {
            params,
            encoder,
            adam: AdamState::new(cfg.adam),
            latents,
            epoch: 0,
            step: 0,
        }
    }

    fn trainable(&self, variant: Variant) -> ParamMap {
        let mut out = ParamMap::new();
        for (k, v) in &self.params.predictor.tensors {
            out.insert(format!("f1.{k}"), v.clone());
        }
        if !variant.is_baseline() {
            for (k, v) in &self.params.generator.tensors {
                out.insert(format!("f2.{k}"), v.clone());
            }
        }
        if let Some(e) = &self.encoder {
            for (k, v) in &e.tensors {
                out.insert(format!("phi.{k}"), v.clone());
            }
        }
        out
    }

    fn set_trainable(&mut self, flat: ParamMap) {
        for (k, v) in flat {
            let (target, name) = if let Some(n) = k.strip_prefix("f1.") {
                (&mut self.params.predictor.tensors, n)
            } else if let Some(n) = k.strip_prefix("f2.") {
                (&mut self.params.generator.tensors, n)
            } else if let Some(n) = k.strip_prefix("phi.") {
                (&mut self.encoder.as_mut().expect("encoder present").tensors, n)
            } else {
                unreachable!("unprefixed parameter {k}")
            };
            target.insert(name.to_string(), v);
        }
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut c = Checkpoint {
            manifest: serde_json::json!({
                "config": cfg.to_text(),
                "config_hash": cfg.hash(),
                "variant": cfg.variant.tag(),
                "epoch": self.epoch,
                "step": self.step,
            }),
            ..Default::default()
        };
        c.insert_all("f1.", &self.params.predictor.tensors);
        c.insert_all("f2.", &self.params.generator.tensors);
        for (name, r) in &self.params.generator.running {
            let n = r.mean.len();
            c.tensors.insert(format!("running.{name}.mean"), Tensor::new([n], r.mean.clone()).unwrap());
            c.tensors.insert(format!("running.{name}.var"), Tensor::new([n], r.var.clone()).unwrap());
        }
        if let Some(e) = &self.encoder {
            c.insert_all("phi.", &e.tensors);
        }
        c.insert_all("adam.m.", &self.adam.first);
        c.insert_all("adam.v.", &self.adam.second);
        c.counters.insert("adam.step".into(), vec![self.adam.step]);
        c.counters.insert("progress".into(), vec![self.epoch as u64, self.step]);
        if let Some(l) = &self.latents {
            c.tensors
                .insert("latent.z".into(), Tensor::new([l.len(), l.dim()], l.values().to_vec()).unwrap());
            c.counters.insert("latent.seeds".into(), l.seeds().to_vec());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<(TrainConfig, Self)> {
        let text = c.manifest["config"]
            .as_str()
            .ok_or_else(|| TrainError::Config("checkpoint manifest has no config".into()))?;
        let cfg = TrainConfig::from_text(text)?;
        let mut state = TrainState::new(&cfg, 0);
        let fill = |target: &mut ParamMap, prefix: &str| -> Result<()> {
            for (k, v) in target.iter_mut() {
                *v = c.tensor(&format!("{prefix}{k}"))?.clone();
            }
            Ok(())
        };
        fill(&mut state.params.predictor.tensors, "f1.")?;
        fill(&mut state.params.generator.tensors, "f2.")?;
        for (name, r) in state.params.generator.running.iter_mut() {
            *r = RunningStats {
                mean: c.tensor(&format!("running.{name}.mean"))?.data().to_vec(),
                var: c.tensor(&format!("running.{name}.var"))?.data().to_vec(),
            };
        }
        if let Some(e) = &mut state.encoder {
            fill(&mut e.tensors, "phi.")?;
        }
        state.adam.first = c.with_prefix("adam.m.").into_iter().collect::<BTreeMap<_, _>>();
        state.adam.second = c.with_prefix("adam.v.").into_iter().collect::<BTreeMap<_, _>>();
        state.adam.step = c.counter("adam.step")?[0];
        let progress = c.counter("progress")?;
        state.epoch = progress[0] as usize;
        state.step = progress[1];
        if cfg.variant.is_abp() {
            let z = c.tensor("latent.z")?;
            state.latents = Some(LatentStore::from_parts(z.shape()[1], z.data().to_vec(), c.counter("latent.seeds")?.to_vec())?);
        }
        Ok((cfg, state))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: LossReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub inference_phases: usize,
    pub update_phases: usize,
    /// `(epoch, report)` from per-epoch evaluation.
    pub evals: Vec<(usize, MetricReport)>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,step,lr,recon,smooth,kl,total";

    pub fn csv_row(r: &LogRow) -> String {
        format!(
            "{},{},{:e},{:.9e},{:.9e},{:.9e},{:.9e}",
            r.epoch, r.step, r.lr, r.loss.recon, r.loss.smooth, r.loss.kl, r.loss.total
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&Self::csv_row(r));
            s.push('\n');
        }
        s
    }
}

/// Where and how to persist a run.
#[derive(Clone, Debug, Default)]
pub struct RunOptions<'a> {
    /// Directory for `epoch_NNN.ckpt`, `last.ckpt` and `best.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Held-out clean-labelled set evaluated after every epoch.
    pub eval: Option<&'a Dataset>,
    /// Stop after this many completed epochs (the state stays resumable).
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    pub state: TrainState,
    pub log: TrainLog,
    /// `(epoch, mae)` of the best evaluated epoch.
    pub best: Option<(usize, f64)>,
}

fn check_dataset(data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(TrainError::Data("training set is empty".into()));
    }
    if data.resolution() != Some((cfg.resolution, cfg.resolution)) {
        return Err(TrainError::Data(format!(
            "dataset resolution {:?} differs from configured {}",
            data.resolution(),
            cfg.resolution
        )));
    }
    if cfg.variant.uses_clean_labels() && !data.has_clean() {
        return Err(TrainError::Data(format!("variant {} needs clean labels", cfg.variant)));
    }
    Ok(())
}

/// Trains the noise-aware model by alternating back-propagation.
pub fn train_abp(data: &Dataset, cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainOutcome> {
    if !cfg.variant.is_abp() {
        return Err(TrainError::Config(format!("{} is not an alternating back-propagation variant", cfg.variant)));
    }
    train(data, cfg, opts, None)
}

/// Trains the predictor alone by direct regression on the labels.
pub fn train_baseline(data: &Dataset, cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainOutcome> {
    if !cfg.variant.is_baseline() {
        return Err(TrainError::Config(format!("{} is not a predictor-only variant", cfg.variant)));
    }
    train(data, cfg, opts, None)
}

/// Trains predictor, generator and amortized encoder as a conditional VAE.
pub fn train_cvae(data: &Dataset, cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainOutcome> {
    if cfg.variant != Variant::Cvae {
        return Err(TrainError::Config(format!("{} is not the cvae variant", cfg.variant)));
    }
    train(data, cfg, opts, None)
}

/// Continues a run from a checkpoint written by [`train`].
pub fn resume(data: &Dataset, checkpoint: &Path, opts: &RunOptions) -> Result<TrainOutcome> {
    let (cfg, state) = TrainState::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    train(data, &cfg, opts, Some(state))
}

/// Checkpoint committed after `epoch` completed epochs.
pub fn epoch_checkpoint(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

/// Dispatches on `cfg.variant`, optionally starting from `state`.
pub fn train(data: &Dataset, cfg: &TrainConfig, opts: &RunOptions, state: Option<TrainState>) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(data, cfg)?;
    let owned;
    let data = if cfg.variant.uses_clean_labels() {
        owned = data.with_clean_labels();
        &owned
    } else {
        data
    };
    let mut state = state.unwrap_or_else(|| TrainState::new(cfg, data.len()));
    if let Some(l) = &state.latents {
        if l.len() != data.len() {
            return Err(TrainError::Data(format!("latent store holds {} entries, dataset has {}", l.len(), data.len())));
        }
    }
    let mut log = TrainLog::default();
    let mut best: Option<(usize, f64)> = None;
    let mut last_good: Option<PathBuf> = None;
    let end = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    while state.epoch < end {
        let epoch = state.epoch + 1;
        let lr = lr_at(epoch, cfg);
        let order = epoch_order(data.len(), cfg.seed, epoch as u64);
        for batch in order.chunks(cfg.batch_size) {
            let step = state.step + 1;
            let diverged = |what: String| TrainError::Diverged {
                what,
                epoch,
                step,
                last_good: last_good.clone(),
            };
            let report = match learning_step(data, batch, cfg, &mut state, lr, epoch, &mut log) {
                Ok(r) => r,
                Err(TrainError::Objective(ObjectiveError::NonFinite(what))) => return Err(diverged(what.into())),
                Err(TrainError::Tensor(e @ (TensorError::NonFinite { .. } | TensorError::NonFiniteGradient(_)))) => return Err(diverged(e.to_string())),
                Err(TrainError::Inference(e @ InferenceError::NonFinite { .. })) => return Err(diverged(e.to_string())),
                Err(e) => return Err(e),
            };
            state.step = step;
            log.rows.push(LogRow { epoch, step, lr, loss: report });
        }
        state.epoch = epoch;
        log::info!(
            "{} epoch {epoch}/{}: mean total {:.4e}",
            cfg.variant,
            cfg.epochs,
            log.rows
                .iter()
                .rev()
                .take(order.len().div_ceil(cfg.batch_size))
                .map(|r| r.loss.total)
                .sum::<f64>()
                / order.len().div_ceil(cfg.batch_size) as f64
        );
        let mut improved = false;
        if let Some(ev) = opts.eval {
            let (report, _) = eval::evaluate(&state.params.predictor, ev)?;
            if best.is_none_or(|(_, m)| report.mae < m) {
                best = Some((epoch, report.mae));
                improved = true;
            }
            log.evals.push((epoch, report));
        }
        if let Some(dir) = &opts.checkpoint_dir {
            let ckpt = state.to_checkpoint(cfg);
            let path = epoch_checkpoint(dir, epoch);
            ckpt.save(&path)?;
            ckpt.save(&dir.join("last.ckpt"))?;
            if improved {
                ckpt.save(&dir.join("best.ckpt"))?;
            }
            last_good = Some(path);
        }
    }
    Ok(TrainOutcome {
        config: cfg.clone(),
        state,
        log,
        best,
    })
}

/// Builds the learning objective for one batch, runs the inference phase where
/// the variant needs it, and applies one Adam update.
fn learning_step(data: &Dataset, batch: &[usize], cfg: &TrainConfig, state: &mut TrainState, lr: f64, epoch: usize, log: &mut TrainLog) -> Result<LossReport> {
    let (x, y) = data.batch(batch);
    let n = batch.len();
    let r = cfg.resolution;
    let d = cfg.generator.latent_dim;
    let mut g = Graph::new();
    let p1 = Bound::new(&mut g, &state.params.predictor.tensors, "f1.", true);
    let xn = g.constant(x.clone());
    let yn = g.constant(y.clone());
    let s = state.params.predictor.build(&mut g, &p1, xn, r, r)?;

    let mut kl_node = None;
    let mut batch_norms = Vec::new();
    let f = if cfg.variant.is_baseline() {
        s
    } else {
        let p2 = Bound::new(&mut g, &state.params.generator.tensors, "f2.", true);
        let z = if cfg.variant.is_abp() {
            g.forward(&HashMap::new())?;
            let saliency = g.value(s)?.clone();
            let model = NoiseAwareModel {
                saliency: &saliency,
                generator: &state.params.generator,
            };
            let store = state.latents.as_mut().expect("ABP variants carry latents");
            let z = inference::infer_latent(batch, &model, &y, &cfg.langevin, store, epoch as u64)?;
            log.inference_phases += 1;
            g.constant(z)
        } else {
            let enc = state.encoder.as_ref().expect("cVAE carries an encoder");
            let pe = Bound::new(&mut g, &enc.tensors, "phi.", true);
            let (mu, logvar) = enc.build(&mut g, &pe, xn, yn, n, d)?;
            let mut eta_rng = rng::stream(cfg.seed, &[purpose::REPARAM, state.step + 1]);
            let eta: Vec<f64> = (0..n * d).map(|_| eta_rng.sample(StandardNormal)).collect();
            let eta = g.constant(Tensor::new([n, d], eta)?);
            let half = g.scale(logvar, 0.5);
            let std = g.exp(half);
            let noise = g.mul(std, eta);
            kl_node = Some((objective::kl_term(&mut g, mu, logvar, n, d), logvar));
            g.add(mu, noise)
        };
        let out = state.params.generator.build(&mut g, &p2, z, n, r, r, true)?;
        batch_norms = out.batch_norms;
        g.add(s, out.delta)
    };

    let recon = objective::recon_term(&mut g, yn, f, cfg.langevin.sigma, n);
    let reg = match cfg.variant.regularizer() {
        Regularizer::None => None,
        Regularizer::Smoothness => Some(objective::smoothness_term(&mut g, &x, s, cfg.alpha, cfg.smooth_normalize)?),
        Regularizer::EdgeCrossEntropy => Some(objective::edge_crossentropy_term(&mut g, &x, s, &cfg.edge)?),
    };
    let mut total = recon;
    if let Some(reg) = reg {
        let weighted = g.scale(reg, cfg.lambda);
        total = g.add(total, weighted);
    }
    if let Some((kl, _)) = kl_node {
        let weighted = g.scale(kl, cfg.kl_weight);
        total = g.add(total, weighted);
    }
    g.forward(&HashMap::new())?;
    let value = |node: Option<NodeId>| -> Result<f64> { node.map_or(Ok(0.0), |n| Ok(g.value(n)?.item())) };
    let report = LossReport::new(value(Some(recon))?, value(reg)?, value(kl_node.map(|k| k.0))?, cfg.lambda, cfg.kl_weight)?;
    if let Some((_, logvar)) = kl_node {
        let mean_v = g.value(logvar)?.data().iter().map(|v| v.exp()).sum::<f64>() / (n * d) as f64;
        if mean_v < 1e-6 {
            log::warn!("posterior collapse: mean encoder variance {mean_v:.3e}");
        }
    }

    let grads: ParamMap = g.backward(total)?.named().into_iter().collect();
    let observed: Vec<_> = batch_norms
        .iter()
        .filter_map(|(name, node)| g.batch_stats(*node).map(|s| (name.clone(), s.clone())))
        .collect();
    let mut flat = state.trainable(cfg.variant);
    let scale = cfg.noise_lr_scale;
    state
        .adam
        .step_scaled(&mut flat, &grads, lr, |name| if name.starts_with("f1.") { 1.0 } else { scale })?;
    state.set_trainable(flat);
    state.params.generator.update_running(&observed);
    log.update_phases += 1;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mae: f64,
    pub mean_f: f64,
    pub max_f: f64,
    pub mean_pred: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(7).max(7);
        let mut s = format!("{:<width$}  {:>8}  {:>8}  {:>8}  {:>9}\n", "variant", "mae", "mean_f", "max_f", "mean_pred");
        for r in &self.rows {
            writeln!(
                s,
                "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>9.4}",
                r.variant, r.mae, r.mean_f, r.max_f, r.mean_pred
            )
            .unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,mae,mean_f,max_f,mean_pred\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{},{}", r.variant, r.mae, r.mean_f, r.max_f, r.mean_pred).unwrap();
        }
        s
    }

    pub fn get(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Trains every variant from the same base configuration and evaluates the
/// final predictor on `eval_set`.
pub fn run_ablation(train_set: &Dataset, eval_set: &Dataset, base: &TrainConfig, variants: &[Variant]) -> Result<(AblationTable, Vec<TrainOutcome>)> {
    let mut table = AblationTable::default();
    let mut outcomes = Vec::new();
    for &v in variants {
        let cfg = TrainConfig { variant: v, ..base.clone() };
        let out = train(train_set, &cfg, &RunOptions::default(), None)?;
        let (report, _) = eval::evaluate(&out.state.params.predictor, eval_set)?;
        table.rows.push(AblationRow {
            variant: v.tag().into(),
            mae: report.mae,
            mean_f: report.mean_f,
            max_f: report.max_f,
            mean_pred: report.mean_pred,
        });
        outcomes.push(out);
    }
    Ok((table, outcomes))
}

/// Mean `|Δ|` of the trained generator at each example's stored latent.
pub fn mean_abs_noise(state: &TrainState, resolution: usize) -> Result<f64> {
    let store = state.latents.as_ref().ok_or_else(|| TrainError::Config("run has no latent store".into()))?;
    let idx: Vec<usize> = (0..store.len()).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(50) {
        let z = store.gather(chunk)?;
        let delta = crate::model::generate_noise(&state.params.generator, &z, resolution, resolution)?;
        total += delta.data().iter().map(|v| v.abs()).sum::<f64>();
        count += delta.numel();
    }
    Ok(total / count as f64)
}
