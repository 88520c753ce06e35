//! Saliency predictor `S = f1(X)`, noise generator `Δ = f2(Z)` and their
//! composition `Ŷ = S + Δ`.

pub mod checkpoint;

use std::collections::{BTreeMap, HashMap};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{self, purpose, Rng};
use crate::tensor::{BatchNormMode, Graph, NodeId, Tensor, TensorError};

pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("spatial size {height}×{width} is not divisible by 16; pad to {padded_h}×{padded_w}")]
    Resolution {
        height: usize,
        width: usize,
        padded_h: usize,
        padded_w: usize,
    },
    #[error("latent vectors have length {got}, generator expects {expected}")]
    LatentLength { expected: usize, got: usize },
    #[error("fusion inputs must have {expected} channels, got high={high} low={low}")]
    ChannelWidth { expected: usize, high: usize, low: usize },
    #[error("fusion input {high:?} is not one stage coarser than {low:?}")]
    FusionGeometry { high: (usize, usize), low: (usize, usize) },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Weight initialization policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Gaussian with fixed stddev, resampled outside two standard deviations.
    TruncatedNormal { std: f64 },
    /// Truncated Gaussian with stddev `gain / sqrt(fan_in)`.
    FanInTruncatedNormal { gain: f64 },
}

impl Init {
    fn std(&self, fan_in: usize) -> f64 {
        match *self {
            Init::TruncatedNormal { std } => std,
            Init::FanInTruncatedNormal { gain } => gain / (fan_in as f64).sqrt(),
        }
    }

    pub(crate) fn sample(&self, shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
        let std = self.std(fan_in);
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = rng.sample(StandardNormal);
                if v.abs() <= 2.0 {
                    break v * std;
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape and data agree")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub in_channels: usize,
    /// Output widths of the five encoder groups.
    pub widths: [usize; 5],
    /// Shared width of the channel-reduced side outputs.
    pub reduced: usize,
    pub init: Init,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: [8, 16, 32, 32, 32],
            reduced: 8,
            init: Init::TruncatedNormal { std: 0.01 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    /// Output widths of the first three transposed convolutions; the fourth emits one channel.
    pub widths: [usize; 3],
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub init: Init,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            widths: [32, 16, 8],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            init: Init::TruncatedNormal { std: 0.01 },
        }
    }
}

/// Side length of the generator's native output before upsampling to the label size.
pub const GENERATOR_NATIVE: usize = 16;

/// Parameters of `f1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams {
    pub config: PredictorConfig,
    pub tensors: ParamMap,
}

/// Per-channel running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Parameters of `f2` plus its batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub config: GeneratorConfig,
    pub tensors: ParamMap,
    pub running: BTreeMap<String, RunningStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub predictor: PredictorParams,
    pub generator: GeneratorParams,
}

fn conv_params(map: &mut ParamMap, name: &str, cout: usize, cin: usize, k: usize, init: Init, rng: &mut Rng) {
    map.insert(format!("{name}.w"), init.sample(&[cout, cin, k, k], cin * k * k, rng));
    map.insert(format!("{name}.b"), Tensor::zeros([cout]));
}

fn linear_params(map: &mut ParamMap, name: &str, out: usize, inp: usize, init: Init, rng: &mut Rng) {
    map.insert(format!("{name}.w"), init.sample(&[out, inp], inp, rng));
    map.insert(format!("{name}.b"), Tensor::zeros([out]));
}

impl PredictorParams {
    pub fn init(config: PredictorConfig, rng: &mut Rng) -> Self {
        let mut t = ParamMap::new();
        let init = config.init;
        let mut cin = config.in_channels;
        for (g, &w) in config.widths.iter().enumerate() {
            conv_params(&mut t, &format!("enc{}.conv1", g + 1), w, cin, 3, init, rng);
            conv_params(&mut t, &format!("enc{}.conv2", g + 1), w, w, 3, init, rng);
            conv_params(&mut t, &format!("red{}", g + 1), config.reduced, w, 1, init, rng);
            cin = w;
        }
        let cr = config.reduced;
        for m in 1..=4 {
            linear_params(&mut t, &format!("fuse{m}.squeeze"), cr, 2 * cr, init, rng);
            linear_params(&mut t, &format!("fuse{m}.excite"), 2 * cr, cr, init, rng);
            if m > 1 {
                conv_params(&mut t, &format!("fuse{m}.proj"), cr, 2 * cr, 1, init, rng);
            }
        }
        conv_params(&mut t, "head", 1, 2 * cr, 3, init, rng);
        Self { config, tensors: t }
    }
}

impl GeneratorParams {
    pub fn init(config: GeneratorConfig, rng: &mut Rng) -> Self {
        let mut t = ParamMap::new();
        let mut running = BTreeMap::new();
        let init = config.init;
        let mut cin = config.latent_dim;
        let outs = [config.widths[0], config.widths[1], config.widths[2], 1];
        for (i, &cout) in outs.iter().enumerate() {
            let name = format!("deconv{}", i + 1);
            t.insert(format!("{name}.w"), init.sample(&[cin, cout, 4, 4], cin * 16, rng));
            t.insert(format!("{name}.b"), Tensor::zeros([cout]));
            if i < 3 {
                let bn = format!("bn{}", i + 1);
                t.insert(format!("{bn}.gamma"), Tensor::full([cout], 1.0));
                t.insert(format!("{bn}.beta"), Tensor::zeros([cout]));
                running.insert(
                    bn,
                    RunningStats {
                        mean: vec![0.0; cout],
                        var: vec![1.0; cout],
                    },
                );
            }
            cin = cout;
        }
        Self { config, tensors: t, running }
    }

    /// Blends observed batch statistics into the running averages.
    pub fn update_running(&mut self, observed: &[(String, crate::tensor::BatchStats)]) {
        let mom = self.config.bn_momentum;
        for (name, stats) in observed {
            if let Some(r) = self.running.get_mut(name) {
                for (rm, &m) in r.mean.iter_mut().zip(&stats.mean) {
                    *rm = (1.0 - mom) * *rm + mom * m;
                }
                for (rv, &v) in r.var.iter_mut().zip(&stats.var) {
                    *rv = (1.0 - mom) * *rv + mom * v;
                }
            }
        }
    }
}

impl ModelParams {
    pub fn init(predictor: PredictorConfig, generator: GeneratorConfig, seed: u64) -> Self {
        let mut rp = rng::stream(seed, &[purpose::INIT, 1]);
        let mut rg = rng::stream(seed, &[purpose::INIT, 2]);
        Self {
            predictor: PredictorParams::init(predictor, &mut rp),
            generator: GeneratorParams::init(generator, &mut rg),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.predictor.tensors.values().chain(self.generator.tensors.values()).all(Tensor::is_finite)
    }
}

/// Graph handles for a parameter map.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    nodes: HashMap<String, NodeId>,
    prefix: String,
}

impl Bound {
    /// Inserts every tensor as a trainable leaf named `prefix + name`, or as a constant.
    pub fn new(g: &mut Graph, params: &ParamMap, prefix: &str, trainable: bool) -> Self {
        let nodes = params
            .iter()
            .map(|(name, t)| {
                let id = if trainable {
                    g.param(&format!("{prefix}{name}"), t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), id)
            })
            .collect();
        Self {
            nodes,
            prefix: prefix.to_string(),
        }
    }

    /// Wraps nodes that already exist in the graph.
    pub fn from_nodes(prefix: &str, nodes: impl IntoIterator<Item = (String, NodeId)>) -> Self {
        Self {
            nodes: nodes.into_iter().collect(),
            prefix: prefix.to_string(),
        }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(format!("{}{name}", self.prefix)))
    }

    /// Pairs of (unprefixed parameter name, node).
    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.nodes.iter()
    }
}

/// A graph node with statically tracked `C×H×W` geometry.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub node: NodeId,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

fn conv(g: &mut Graph, p: &Bound, name: &str, x: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(g.conv2d(x, w, Some(b), stride, pad))
}

/// Residual channel-attention fusion of a coarse map into a finer one.
///
/// The coarse map is upsampled to the fine resolution and concatenated with
/// it; a squeeze-and-excitation gate (global pool, FC to half width, ReLU, FC
/// back, sigmoid) rescales the concatenation, which is added back residually.
pub fn rca_fuse(g: &mut Graph, p: &Bound, name: &str, reduced: usize, high: FeatureMap, low: FeatureMap) -> Result<FeatureMap> {
    if high.channels != reduced || low.channels != reduced {
        return Err(ModelError::ChannelWidth {
            expected: reduced,
            high: high.channels,
            low: low.channels,
        });
    }
    if high.height * 2 != low.height || high.width * 2 != low.width {
        return Err(ModelError::FusionGeometry {
            high: (high.height, high.width),
            low: (low.height, low.width),
        });
    }
    let up = g.upsample(high.node, low.height, low.width);
    let cat = g.concat(&[up, low.node]);
    let pooled = g.global_avg_pool(cat);
    let sq = g.linear(pooled, p.get(&format!("{name}.squeeze.w"))?, Some(p.get(&format!("{name}.squeeze.b"))?));
    let sq = g.relu(sq);
    let ex = g.linear(sq, p.get(&format!("{name}.excite.w"))?, Some(p.get(&format!("{name}.excite.b"))?));
    let gate = g.sigmoid(ex);
    let attended = g.scale_channels(cat, gate);
    let fused = g.add(cat, attended);
    Ok(FeatureMap {
        node: fused,
        channels: 2 * reduced,
        height: low.height,
        width: low.width,
    })
}

pub fn check_resolution(height: usize, width: usize) -> Result<()> {
    if !height.is_multiple_of(16) || !width.is_multiple_of(16) || height == 0 || width == 0 {
        let pad = |v: usize| v.div_ceil(16).max(1) * 16;
        return Err(ModelError::Resolution {
            height,
            width,
            padded_h: pad(height),
            padded_w: pad(width),
        });
    }
    Ok(())
}

impl PredictorParams {
    /// Appends `f1` to the graph for an `N×C×H×W` input, returning the
    /// `N×1×H×W` saliency node (sigmoid head).
    pub fn build(&self, g: &mut Graph, p: &Bound, x: NodeId, height: usize, width: usize) -> Result<NodeId> {
        let logits = self.build_logits(g, p, x, height, width)?;
        Ok(g.sigmoid(logits))
    }

    fn build_logits(&self, g: &mut Graph, p: &Bound, x: NodeId, height: usize, width: usize) -> Result<NodeId> {
        check_resolution(height, width)?;
        let cfg = &self.config;
        let mut h = x;
        let mut side = Vec::with_capacity(5);
        for gi in 1..=5 {
            let stride = if gi == 1 { 1 } else { 2 };
            h = conv(g, p, &format!("enc{gi}.conv1"), h, stride, 1)?;
            h = g.relu(h);
            h = conv(g, p, &format!("enc{gi}.conv2"), h, 1, 1)?;
            h = g.relu(h);
            let reduced = conv(g, p, &format!("red{gi}"), h, 1, 0)?;
            let scale = 1 << (gi - 1);
            side.push(FeatureMap {
                node: reduced,
                channels: cfg.reduced,
                height: height / scale,
                width: width / scale,
            });
        }
        let mut coarse = side[4];
        for m in (1..=4).rev() {
            let fused = rca_fuse(g, p, &format!("fuse{m}"), cfg.reduced, coarse, side[m - 1])?;
            if m == 1 {
                return conv(g, p, "head", fused.node, 1, 1);
            }
            let proj = conv(g, p, &format!("fuse{m}.proj"), fused.node, 1, 0)?;
            coarse = FeatureMap {
                node: g.relu(proj),
                channels: cfg.reduced,
                ..fused
            };
        }
        unreachable!("loop returns at the finest level")
    }
}

/// Generator graph handles: the noise node plus training-mode batch-norm nodes.
#[derive(Clone, Debug)]
pub struct GeneratorNodes {
    pub delta: NodeId,
    pub batch_norms: Vec<(String, NodeId)>,
}

impl GeneratorParams {
    /// Appends `f2` for an `N×d` latent node, producing `N×1×H×W` noise in `[-1, 1]`.
    pub fn build(&self, g: &mut Graph, p: &Bound, z: NodeId, batch: usize, height: usize, width: usize, train: bool) -> Result<GeneratorNodes> {
        let d = self.config.latent_dim;
        let mut h = g.reshape(z, [batch, d, 1, 1]);
        let mut batch_norms = Vec::new();
        for i in 1..=4 {
            let w = p.get(&format!("deconv{i}.w"))?;
            let b = p.get(&format!("deconv{i}.b"))?;
            h = g.conv_transpose2d(h, w, Some(b), 2, 1);
            if i < 4 {
                let bn = format!("bn{i}");
                let mode = if train {
                    BatchNormMode::Train
                } else {
                    let r = &self.running[&bn];
                    BatchNormMode::Eval {
                        mean: r.mean.clone(),
                        var: r.var.clone(),
                    }
                };
                let gamma = p.get(&format!("{bn}.gamma"))?;
                let beta = p.get(&format!("{bn}.beta"))?;
                h = g.batch_norm(h, gamma, beta, self.config.bn_eps, mode);
                if train {
                    batch_norms.push((bn, h));
                }
                h = g.relu(h);
            }
        }
        h = g.tanh(h);
        let delta = if (height, width) == (GENERATOR_NATIVE, GENERATOR_NATIVE) {
            h
        } else {
            g.upsample(h, height, width)
        };
        Ok(GeneratorNodes { delta, batch_norms })
    }
}

fn image_dims(x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(ModelError::Shape(format!("expected N×C×H×W image, got {s:?}"))),
    }
}

/// Evaluates `S = f1(X)` with frozen parameters.
pub fn predict_saliency(params: &PredictorParams, x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = image_dims(x)?;
    check_resolution(h, w)?;
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &params.tensors, "", false);
    let xn = g.constant(x.clone());
    let s = params.build(&mut g, &p, xn, h, w)?;
    g.forward(&HashMap::new())?;
    Ok(g.value(s)?.clone())
}

/// Evaluates `Δ = f2(Z)` for `N×d` latents with running batch-norm statistics.
pub fn generate_noise(params: &GeneratorParams, z: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let d = params.config.latent_dim;
    let got = z.shape().last().copied().unwrap_or(0);
    if z.shape().len() != 2 || got != d {
        return Err(ModelError::LatentLength { expected: d, got });
    }
    if !z.is_finite() {
        return Err(ModelError::Shape("latent contains non-finite values".into()));
    }
    let mut g = Graph::new();
    let p = Bound::new(&mut g, &params.tensors, "", false);
    let zn = g.constant(z.clone());
    let out = params.build(&mut g, &p, zn, z.shape()[0], height, width, false)?;
    g.forward(&HashMap::new())?;
    Ok(g.value(out.delta)?.clone())
}

/// `Ŷ = S + Δ`, deliberately unclipped.
pub fn compose(saliency: &Tensor, noise: &Tensor) -> Result<Tensor> {
    if saliency.shape() != noise.shape() {
        return Err(ModelError::Shape(format!("saliency {:?} vs noise {:?}", saliency.shape(), noise.shape())));
    }
    let mut out = saliency.clone();
    out.axpy(1.0, noise)?;
    Ok(out)
}
