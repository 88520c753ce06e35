//! Training objectives: Gaussian reconstruction, edge-aware smoothness,
//! edge cross-entropy and the diagonal-Gaussian KL term.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::model::{Bound, ModelError, ModelParams, ParamMap};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

pub const CHARBONNIER_EPS: f64 = 1e-6;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("map of size {height}×{width} has no forward differences")]
    Degenerate { height: usize, width: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("variance {value} at index {index} is not positive")]
    Variance { index: usize, value: f64 },
    #[error("non-finite {0} term")]
    NonFinite(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = ObjectiveError> = std::result::Result<T, E>;

fn as_nchw(m: &Tensor) -> Result<[usize; 4]> {
    match *m.shape() {
        [h, w] => Ok([1, 1, h, w]),
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(ObjectiveError::Shape(format!("expected H×W or N×C×H×W, got {s:?}"))),
    }
}

/// Reduces `N×3×H×W` to `N×1×H×W` luminance; single-channel maps pass through.
pub fn luminance(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = as_nchw(x)?;
    match c {
        1 => Ok(x.clone().reshape([n, 1, h, w])?),
        3 => {
            let plane = h * w;
            let mut out = vec![0.0; n * plane];
            for (i, o) in out.chunks_mut(plane).enumerate() {
                for (ch, k) in LUMA.iter().enumerate() {
                    let src = &x.data()[(i * 3 + ch) * plane..(i * 3 + ch + 1) * plane];
                    for (a, b) in o.iter_mut().zip(src) {
                        *a += k * b;
                    }
                }
            }
            Ok(Tensor::new([n, 1, h, w], out)?)
        }
        c => Err(ObjectiveError::Shape(format!("cannot reduce {c} channels to luminance"))),
    }
}

/// Forward differences `(∂ₓ, ∂ᵧ)` on the valid region, after luminance reduction.
pub fn image_gradients(m: &Tensor) -> Result<(Tensor, Tensor)> {
    let lum = luminance(m)?;
    let [n, _, h, w] = as_nchw(&lum)?;
    if h < 2 || w < 2 {
        return Err(ObjectiveError::Degenerate { height: h, width: w });
    }
    let mut dx = Vec::with_capacity(n * h * (w - 1));
    let mut dy = Vec::with_capacity(n * (h - 1) * w);
    for p in lum.data().chunks(h * w) {
        for u in 0..h {
            for v in 0..w - 1 {
                dx.push(p[u * w + v + 1] - p[u * w + v]);
            }
        }
        for u in 0..h - 1 {
            for v in 0..w {
                dy.push(p[(u + 1) * w + v] - p[u * w + v]);
            }
        }
    }
    Ok((Tensor::new([n, 1, h, w - 1], dx)?, Tensor::new([n, 1, h - 1, w], dy)?))
}

pub fn charbonnier(x: &Tensor) -> Tensor {
    x.map(|v| (v * v + CHARBONNIER_EPS).sqrt())
}

/// Edge-stopping weights `exp(−α|∂X|)` in both directions.
pub fn edge_weights(x: &Tensor, alpha: f64) -> Result<(Tensor, Tensor)> {
    let (dx, dy) = image_gradients(x)?;
    let f = |v: f64| (-alpha * v.abs()).exp();
    Ok((dx.map(f), dy.map(f)))
}

fn check_spatial(x: &Tensor, s: &Tensor) -> Result<()> {
    let ([nx, _, hx, wx], [ns, cs, hs, ws]) = (as_nchw(x)?, as_nchw(s)?);
    if (nx, hx, wx) != (ns, hs, ws) || cs != 1 {
        return Err(ObjectiveError::Shape(format!("image {:?} vs saliency {:?}", x.shape(), s.shape())));
    }
    Ok(())
}

/// `Σ_d Σ Ψ(|∂_d S|·exp(−α|∂_d X|))` over all valid difference positions.
pub fn smoothness_loss(x: &Tensor, s: &Tensor, alpha: f64) -> Result<f64> {
    check_spatial(x, s)?;
    let (wx, wy) = edge_weights(x, alpha)?;
    let (sx, sy) = image_gradients(s)?;
    let term = |d: &Tensor, w: &Tensor| -> f64 {
        d.data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| ((a.abs() * b).powi(2) + CHARBONNIER_EPS).sqrt())
            .sum()
    };
    Ok(term(&sx, &wx) + term(&sy, &wy))
}

/// Graph form of [`smoothness_loss`] for an `N×1×H×W` saliency node, divided by
/// `N` (batch mean) and additionally by the number of terms per image when `normalize`.
pub fn smoothness_term(g: &mut Graph, x: &Tensor, s: NodeId, alpha: f64, normalize: bool) -> Result<NodeId> {
    let (wx, wy) = edge_weights(x, alpha)?;
    let [n, _, h, w] = as_nchw(x)?;
    let mut parts = Vec::with_capacity(2);
    for (diff, weight) in [(g.diff_x(s), wx), (g.diff_y(s), wy)] {
        // Ψ is even and the weight is positive, so |∂S| needs no explicit abs.
        let wn = g.constant(weight);
        let weighted = g.mul(diff, wn);
        let psi = g.charbonnier(weighted, CHARBONNIER_EPS);
        parts.push(g.sum(psi));
    }
    let total = g.add(parts[0], parts[1]);
    let per_image = if normalize { (h * (w - 1) + (h - 1) * w) as f64 } else { 1.0 };
    Ok(g.scale(total, 1.0 / (n as f64 * per_image)))
}

/// `(1/(2σ²))·‖Y − f‖²`, averaged over the batch.
pub fn recon_term(g: &mut Graph, y: NodeId, f: NodeId, sigma: f64, batch: usize) -> NodeId {
    let r = g.sub(y, f);
    let r2 = g.mul(r, r);
    let sse = g.sum(r2);
    g.scale(sse, 0.5 / (sigma * sigma * batch as f64))
}

/// Log-likelihood gradient `Σ (1/σ²)(Y − f)ᵀ ∂f/∂θ` (batch-averaged) for both
/// networks, keyed `f1.<name>` and `f2.<name>`. This is the ascent direction,
/// i.e. the negated gradient of [`recon_term`].
pub fn recon_grad(params: &ModelParams, x: &Tensor, y: &Tensor, z: &Tensor, sigma: f64) -> Result<ParamMap> {
    let [n, _, h, w] = as_nchw(x)?;
    let mut g = Graph::new();
    let p1 = Bound::new(&mut g, &params.predictor.tensors, "f1.", true);
    let p2 = Bound::new(&mut g, &params.generator.tensors, "f2.", true);
    let xn = g.constant(x.clone());
    let zn = g.constant(z.clone());
    let yn = g.constant(y.clone());
    let s = params.predictor.build(&mut g, &p1, xn, h, w)?;
    let delta = params.generator.build(&mut g, &p2, zn, n, h, w, true)?.delta;
    let f = g.add(s, delta);
    let loss = recon_term(&mut g, yn, f, sigma, n);
    g.forward(&HashMap::new())?;
    let grads = g.backward(loss)?;
    let mut out = ParamMap::new();
    for (name, t) in grads.named() {
        if !t.is_finite() {
            return Err(ObjectiveError::NonFinite("reconstruction gradient"));
        }
        out.insert(name, t.map(|v| -v));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeLossConfig {
    /// Slope of the squashing `sigmoid(κ·|∂S|)`.
    pub kappa: f64,
    /// `|∂X|` above which a position counts as an image edge.
    pub threshold: f64,
}

impl Default for EdgeLossConfig {
    fn default() -> Self {
        Self { kappa: 5.0, threshold: 0.1 }
    }
}

/// Binary edge targets `|∂X| > threshold`.
pub fn edge_targets(x: &Tensor, threshold: f64) -> Result<(Tensor, Tensor)> {
    let (dx, dy) = image_gradients(x)?;
    let f = |v: f64| if v.abs() > threshold { 1.0 } else { 0.0 };
    Ok((dx.map(f), dy.map(f)))
}

/// Mean BCE between `sigmoid(κ·|∂S|)` and the image edge targets.
pub fn edge_crossentropy_term(g: &mut Graph, x: &Tensor, s: NodeId, cfg: &EdgeLossConfig) -> Result<NodeId> {
    let (tx, ty) = edge_targets(x, cfg.threshold)?;
    let count = (tx.numel() + ty.numel()) as f64;
    let mut parts = Vec::with_capacity(2);
    for (diff, target) in [(g.diff_x(s), tx), (g.diff_y(s), ty)] {
        let mag = g.abs(diff);
        let logits = g.scale(mag, cfg.kappa);
        let t = g.constant(target);
        let bce = g.bce_with_logits(logits, t);
        parts.push(g.sum(bce));
    }
    let total = g.add(parts[0], parts[1]);
    Ok(g.scale(total, 1.0 / count))
}

pub fn edge_crossentropy_loss(x: &Tensor, s: &Tensor, cfg: &EdgeLossConfig) -> Result<f64> {
    check_spatial(x, s)?;
    let mut g = Graph::new();
    let sn = g.constant(s.clone().reshape(as_nchw(s)?.to_vec())?);
    let l = edge_crossentropy_term(&mut g, x, sn, cfg)?;
    g.forward(&Default::default())?;
    Ok(g.value(l)?.item())
}

/// `KL(N(μ, diag v) ‖ N(0, I)) = ½·Σ(μ² + v − log v − 1)`.
pub fn kl_diag_gaussian(mu: &[f64], var: &[f64]) -> Result<f64> {
    if mu.len() != var.len() {
        return Err(ObjectiveError::Shape(format!("μ has {} entries, v has {}", mu.len(), var.len())));
    }
    let mut kl = 0.0;
    for (index, (&m, &v)) in mu.iter().zip(var).enumerate() {
        if !(v > 0.0) {
            return Err(ObjectiveError::Variance { index, value: v });
        }
        kl += m * m + v - v.ln() - 1.0;
    }
    Ok(0.5 * kl)
}

/// Graph form of the KL term from `N×d` mean and log-variance nodes, averaged over the batch.
pub fn kl_term(g: &mut Graph, mu: NodeId, logvar: NodeId, batch: usize, dim: usize) -> NodeId {
    let m2 = g.mul(mu, mu);
    let v = g.exp(logvar);
    let a = g.add(m2, v);
    let b = g.sub(a, logvar);
    let s = g.sum(b);
    let s = g.add_scalar(s, -((batch * dim) as f64));
    g.scale(s, 0.5 / batch as f64)
}

/// Per-batch objective values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon: f64,
    /// Smoothness or edge cross-entropy, whichever the variant uses.
    pub smooth: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(recon: f64, smooth: f64, kl: f64, lambda: f64, kl_weight: f64) -> Result<Self> {
        let r = Self {
            recon,
            smooth,
            kl,
            total: recon + lambda * smooth + kl_weight * kl,
        };
        for (name, v) in [("reconstruction", recon), ("smoothness", smooth), ("KL", kl), ("total", r.total)] {
            if !v.is_finite() {
                return Err(ObjectiveError::NonFinite(name));
            }
        }
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        Tensor::new([h, w], (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
    }

    #[test]
    fn hand_differences() {
        let (dx, dy) = image_gradients(&map(2, 2, |u, v| [[0.0, 1.0], [2.0, 4.0]][u][v])).unwrap();
        assert_eq!(dx.data(), &[1.0, 2.0]);
        assert_eq!(dy.data(), &[2.0, 3.0]);
        assert_eq!(dx.shape(), &[1, 1, 2, 1]);
    }

    #[test]
    fn ramp_and_constant() {
        let (dx, dy) = image_gradients(&map(4, 5, |_, v| v as f64)).unwrap();
        assert!(dx.data().iter().all(|&d| d == 1.0));
        assert!(dy.data().iter().all(|&d| d == 0.0));
        let (cx, cy) = image_gradients(&map(3, 3, |_, _| 0.4)).unwrap();
        assert!(cx.data().iter().chain(cy.data()).all(|&d| d == 0.0));
        assert!(matches!(image_gradients(&map(1, 4, |_, _| 0.0)), Err(ObjectiveError::Degenerate { .. })));
    }

    #[test]
    fn luminance_weights() {
        let x = Tensor::new([1, 3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(luminance(&x).unwrap().item(), 0.299);
        let gray = Tensor::new([1, 3, 1, 2], vec![0.5, 0.2, 0.5, 0.2, 0.5, 0.2]).unwrap();
        let l = luminance(&gray).unwrap();
        assert!((l.data()[0] - 0.5).abs() < 1e-15 && (l.data()[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn charbonnier_values() {
        let c = charbonnier(&Tensor::new([3], vec![0.0, 1.0, -1.0]).unwrap());
        assert_eq!(c.data()[0], 1e-3);
        assert!((c.data()[1] - 1.0000005).abs() < 1e-12);
        assert_eq!(c.data()[1], c.data()[2]);
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_diag_gaussian(&[0.0; 4], &[1.0; 4]).unwrap(), 0.0);
        assert_eq!(kl_diag_gaussian(&[1.0], &[1.0]).unwrap(), 0.5);
        let e = std::f64::consts::E;
        assert!((kl_diag_gaussian(&[0.0], &[e]).unwrap() - 0.5 * (e - 2.0)).abs() < 1e-15);
        assert!(matches!(
            kl_diag_gaussian(&[0.0, 0.0], &[1.0, 0.0]),
            Err(ObjectiveError::Variance { index: 1, .. })
        ));
    }

    #[test]
    fn bce_at_half_prediction() {
        let x = Tensor::zeros([1, 1, 4, 4]);
        let s = Tensor::zeros([1, 1, 4, 4]);
        let l = edge_crossentropy_loss(&x, &s, &EdgeLossConfig::default()).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn report_rejects_non_finite() {
        assert!(LossReport::new(1.0, f64::NAN, 0.0, 0.7, 1.0).is_err());
        let r = LossReport::new(2.0, 10.0, 1.0, 0.7, 1.0).unwrap();
        assert!((r.total - 10.0).abs() < 1e-12);
    }
}
