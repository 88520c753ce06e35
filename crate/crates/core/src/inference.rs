//! Langevin sampling of per-example latent vectors from `p(Z | X, Y)`.

use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::{Bound, GeneratorParams, ModelError};
use crate::rng::{self, purpose, Rng};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("non-finite value in the {term} term")]
    NonFinite { term: &'static str },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid Langevin configuration: {0}")]
    Config(String),
    #[error("latent store has {len} entries, index {index} requested")]
    Index { index: usize, len: usize },
}

pub type Result<T, E = InferenceError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StartMode {
    /// Fresh standard Gaussian at every inference phase.
    Cold,
    /// Continue from the stored value of the previous phase.
    Warm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangevinConfig {
    pub steps: usize,
    pub step_size: f64,
    pub sigma: f64,
    pub start: StartMode,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        Self {
            steps: 6,
            step_size: 0.3,
            sigma: 0.1,
            start: StartMode::Warm,
        }
    }
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(InferenceError::Config("steps must be at least 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(InferenceError::Config(format!("step size {} must be positive", self.step_size)));
        }
        if !(self.sigma > 0.0) {
            return Err(InferenceError::Config(format!("sigma {} must be positive", self.sigma)));
        }
        Ok(())
    }
}

/// A conditional observation model `f(X, Z)` with `X` fixed.
pub trait LatentModel {
    fn latent_dim(&self) -> usize;
    /// Appends `f(X, Z)` for an `N×d` latent node.
    fn observe(&self, g: &mut Graph, z: NodeId) -> Result<NodeId>;
}

/// `f(X, Z) = Z`, the conjugate diagnostic with a closed-form posterior.
#[derive(Clone, Copy, Debug)]
pub struct LinearDiagnostic {
    pub dim: usize,
}

impl LatentModel for LinearDiagnostic {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn observe(&self, _g: &mut Graph, z: NodeId) -> Result<NodeId> {
        Ok(z)
    }
}

/// `f(X, Z) = S + f2(Z)` with the saliency `S` held fixed.
///
/// Batch norm runs on batch statistics so inference sees the same `f2` as the
/// learning step that follows it.
pub struct NoiseAwareModel<'a> {
    pub saliency: &'a Tensor,
    pub generator: &'a GeneratorParams,
}

impl LatentModel for NoiseAwareModel<'_> {
    fn latent_dim(&self) -> usize {
        self.generator.config.latent_dim
    }

    fn observe(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let [n, _, h, w] = *self.saliency.shape() else {
            return Err(ModelError::Shape(format!("saliency shape {:?}", self.saliency.shape())).into());
        };
        let p = Bound::new(g, &self.generator.tensors, "", false);
        let out = self.generator.build(g, &p, z, n, h, w, true)?;
        let s = g.constant(self.saliency.clone());
        Ok(g.add(s, out.delta))
    }
}

/// `∂/∂Z log p(Y, Z | X) = (1/σ²)(Y − f)ᵀ ∂f/∂Z − Z`, evaluated for every row of `z`.
pub fn posterior_grad(model: &dyn LatentModel, z: &Tensor, y: &Tensor, sigma: f64) -> Result<Tensor> {
    if !z.is_finite() {
        return Err(InferenceError::NonFinite { term: "latent" });
    }
    let mut g = Graph::new();
    let zn = g.param("z", z.clone());
    let f = model.observe(&mut g, zn)?;
    let model_end = g.len();
    let yn = g.constant(y.clone());
    let r = g.sub(yn, f);
    let r2 = g.mul(r, r);
    let sse = g.sum(r2);
    let loglik = g.scale(sse, -0.5 / (sigma * sigma));
    let likelihood_end = g.len();
    let z2 = g.mul(zn, zn);
    let zs = g.sum(z2);
    let logprior = g.scale(zs, -0.5);
    let total = g.add(loglik, logprior);
    g.forward(&HashMap::new()).map_err(|e| match e {
        TensorError::NonFinite { node, .. } if node < model_end => InferenceError::NonFinite { term: "model" },
        TensorError::NonFinite { node, .. } if node < likelihood_end => InferenceError::NonFinite { term: "likelihood" },
        TensorError::NonFinite { .. } => InferenceError::NonFinite { term: "prior" },
        other => other.into(),
    })?;
    let grad = g.backward(total)?.get(zn);
    if !grad.is_finite() {
        return Err(InferenceError::NonFinite { term: "gradient" });
    }
    Ok(grad)
}

/// `Z + (s²/2)·grad + s·η`.
pub fn langevin_update(z: &Tensor, grad: &Tensor, step_size: f64, noise: &Tensor) -> Result<Tensor> {
    let mut next = z.clone();
    next.axpy(0.5 * step_size * step_size, grad)?;
    next.axpy(step_size, noise)?;
    Ok(next)
}

fn gaussian(rng: &mut Rng, n: usize) -> impl Iterator<Item = f64> + '_ {
    (0..n).map(move |_| rng.sample(StandardNormal))
}

/// One Langevin transition with noise drawn from `rngs[i]` for row `i` of `z`.
pub fn langevin_step(model: &dyn LatentModel, z: &Tensor, y: &Tensor, cfg: &LangevinConfig, rngs: &mut [Rng]) -> Result<Tensor> {
    let grad = posterior_grad(model, z, y, cfg.sigma)?;
    let d = model.latent_dim();
    let noise: Vec<f64> = rngs.iter_mut().flat_map(|r| gaussian(r, d).collect::<Vec<_>>()).collect();
    let noise = Tensor::new(z.shape().to_vec(), noise)?;
    langevin_update(z, &grad, cfg.step_size, &noise)
}

/// Persistent per-example latents and the seeds of their noise streams.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStore {
    dim: usize,
    z: Vec<f64>,
    seeds: Vec<u64>,
}

impl LatentStore {
    /// Draws every `Zᵢ` from the standard Gaussian prior.
    pub fn new(len: usize, dim: usize, seed: u64) -> Self {
        let mut z = Vec::with_capacity(len * dim);
        let mut seeds = Vec::with_capacity(len);
        for i in 0..len as u64 {
            z.extend(gaussian(&mut rng::stream(seed, &[purpose::LATENT_INIT, i]), dim));
            seeds.push(rng::derive(seed, &[purpose::LANGEVIN, i]));
        }
        Self { dim, z, seeds }
    }

    pub fn from_parts(dim: usize, z: Vec<f64>, seeds: Vec<u64>) -> Result<Self> {
        if z.len() != dim * seeds.len() {
            return Err(InferenceError::Config(format!(
                "latent block of {} values does not hold {} vectors of length {dim}",
                z.len(),
                seeds.len()
            )));
        }
        Ok(Self { dim, z, seeds })
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn values(&self) -> &[f64] {
        &self.z
    }

    pub fn get(&self, i: usize) -> Result<&[f64]> {
        self.check(i)?;
        Ok(&self.z[i * self.dim..(i + 1) * self.dim])
    }

    /// Rows `indices` as an `N×d` tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.get(i)?);
        }
        Ok(Tensor::new([indices.len(), self.dim], data)?)
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(InferenceError::Index { index: i, len: self.len() });
        }
        Ok(())
    }

    fn scatter(&mut self, indices: &[usize], z: &Tensor) -> Result<()> {
        for (row, &i) in indices.iter().enumerate() {
            self.check(i)?;
            self.z[i * self.dim..(i + 1) * self.dim].copy_from_slice(&z.data()[row * self.dim..(row + 1) * self.dim]);
        }
        Ok(())
    }

    /// Noise stream for example `i` during `epoch`.
    pub fn stream(&self, i: usize, epoch: u64) -> Rng {
        rng::stream(self.seeds[i], &[epoch])
    }
}

/// Runs `cfg.steps` joint Langevin transitions for the examples `indices`,
/// writes the final latents back to `store` and returns them.
pub fn infer_latent(indices: &[usize], model: &dyn LatentModel, y: &Tensor, cfg: &LangevinConfig, store: &mut LatentStore, epoch: u64) -> Result<Tensor> {
    cfg.validate()?;
    if store.dim != model.latent_dim() {
        return Err(ModelError::LatentLength {
            expected: model.latent_dim(),
            got: store.dim,
        }
        .into());
    }
    for &i in indices {
        store.check(i)?;
    }
    let mut rngs: Vec<Rng> = indices.iter().map(|&i| store.stream(i, epoch)).collect();
    let mut z = match cfg.start {
        StartMode::Warm => store.gather(indices)?,
        StartMode::Cold => {
            let data = rngs.iter_mut().flat_map(|r| gaussian(r, store.dim).collect::<Vec<_>>()).collect();
            Tensor::new([indices.len(), store.dim], data)?
        }
    };
    for _ in 0..cfg.steps {
        z = langevin_step(model, &z, y, cfg, &mut rngs)?;
    }
    store.scatter(indices, &z)?;
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::new([1, 1], vec![v]).unwrap()
    }

    #[test]
    fn linear_diagnostic_gradient() {
        let g = posterior_grad(&LinearDiagnostic { dim: 1 }, &scalar(1.0), &scalar(0.0), 1.0).unwrap();
        assert_eq!(g.item(), -2.0);
    }

    #[test]
    fn zero_residual_at_origin_gives_zero_gradient() {
        let g = posterior_grad(&LinearDiagnostic { dim: 3 }, &Tensor::zeros([2, 3]), &Tensor::zeros([2, 3]), 0.1).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matched_observation_leaves_prior_pull() {
        let z = Tensor::new([1, 2], vec![0.7, -1.3]).unwrap();
        let g = posterior_grad(&LinearDiagnostic { dim: 2 }, &z, &z, 0.1).unwrap();
        assert_eq!(g.data(), &[-0.7, 1.3]);
    }

    #[test]
    fn deterministic_update() {
        let next = langevin_update(&scalar(1.0), &scalar(-2.0), 0.3, &scalar(0.0)).unwrap();
        assert!((next.item() - 0.91).abs() < 1e-15);
        let same = langevin_update(&scalar(1.0), &scalar(0.0), 0.3, &scalar(0.0)).unwrap();
        assert_eq!(same.item(), 1.0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            LangevinConfig {
                steps: 0,
                ..Default::default()
            },
            LangevinConfig {
                step_size: 0.0,
                ..Default::default()
            },
            LangevinConfig {
                sigma: -1.0,
                ..Default::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn one_step_inference_equals_one_langevin_step() {
        let model = LinearDiagnostic { dim: 2 };
        let y = Tensor::new([1, 2], vec![0.5, 1.0]).unwrap();
        let mut store = LatentStore::new(3, 2, 9);
        let start = store.gather(&[1]).unwrap();
        let cfg = LangevinConfig {
            steps: 1,
            sigma: 1.0,
            ..Default::default()
        };
        let mut rngs = vec![store.stream(1, 4)];
        let expected = langevin_step(&model, &start, &y, &cfg, &mut rngs).unwrap();
        let got = infer_latent(&[1], &model, &y, &cfg, &mut store, 4).unwrap();
        assert_eq!(got, expected);
        assert_eq!(store.get(1).unwrap(), got.data());
    }

    #[test]
    fn warm_start_continues_from_previous_phase() {
        let model = LinearDiagnostic { dim: 1 };
        let y = scalar(1.0);
        let cfg = LangevinConfig {
            sigma: 1.0,
            ..Default::default()
        };
        let mut store = LatentStore::new(1, 1, 3);
        let first = infer_latent(&[0], &model, &y, &cfg, &mut store, 1).unwrap();
        let mut rngs = vec![store.stream(0, 2)];
        let mut z = first.clone();
        for _ in 0..cfg.steps {
            z = langevin_step(&model, &z, &y, &cfg, &mut rngs).unwrap();
        }
        assert_eq!(infer_latent(&[0], &model, &y, &cfg, &mut store, 2).unwrap(), z);
    }

    #[test]
    fn chains_differ_only_through_noise() {
        let model = LinearDiagnostic { dim: 1 };
        let cfg = LangevinConfig {
            sigma: 1.0,
            ..Default::default()
        };
        let run = |seed: u64| {
            let mut st = LatentStore::from_parts(1, vec![0.2], vec![seed]).unwrap();
            infer_latent(&[0], &model, &scalar(1.0), &cfg, &mut st, 0).unwrap().item()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn out_of_range_index_is_reported() {
        let mut store = LatentStore::new(2, 1, 0);
        let err = infer_latent(&[2], &LinearDiagnostic { dim: 1 }, &scalar(0.0), &LangevinConfig::default(), &mut store, 0);
        assert!(matches!(err, Err(InferenceError::Index { index: 2, len: 2 })));
    }

    #[test]
    fn non_finite_observation_names_the_term() {
        let err = posterior_grad(&LinearDiagnostic { dim: 1 }, &scalar(1.0), &scalar(f64::INFINITY), 1.0);
        assert!(matches!(err, Err(InferenceError::NonFinite { term: "likelihood" })), "{err:?}");
    }
}
