#![allow(dead_code)]

use nae_core::tensor::gradcheck::{self, GradCheck};
use nae_core::tensor::{BatchNormMode, Graph, NodeId, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Builder = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

pub struct OpCase {
    pub name: &'static str,
    pub make: fn(u64) -> (Vec<Tensor>, Builder),
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so kinks at 0 stay outside the FD stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x9e37_79b9 ^ seed)
}

/// Wraps a builder producing `out_shape` in a random projection to a scalar.
fn projected(seed: u64, out_shape: &'static [usize], f: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'static) -> Builder {
    let weights = uniform(&mut rng(seed.wrapping_add(1_000)), out_shape, -1.0, 1.0);
    Box::new(move |g, ids| {
        let out = f(g, ids)?;
        Ok(gradcheck::project(g, out, weights.clone()))
    })
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "conv2d_stride1",
            make: |s| {
                let mut r = rng(s);
                let leaves = vec![
                    uniform(&mut r, &[2, 2, 5, 5], -1.0, 1.0),
                    uniform(&mut r, &[3, 2, 3, 3], -0.5, 0.5),
                    uniform(&mut r, &[3], -0.5, 0.5),
                ];
                (leaves, projected(s, &[2, 3, 5, 5], |g, i| Ok(g.conv2d(i[0], i[1], Some(i[2]), 1, 1))))
            },
        },
        OpCase {
            name: "conv2d_stride2",
            make: |s| {
                let mut r = rng(s);
                let leaves = vec![
                    uniform(&mut r, &[2, 2, 6, 6], -1.0, 1.0),
                    uniform(&mut r, &[3, 2, 3, 3], -0.5, 0.5),
                    uniform(&mut r, &[3], -0.5, 0.5),
                ];
                (leaves, projected(s, &[2, 3, 3, 3], |g, i| Ok(g.conv2d(i[0], i[1], Some(i[2]), 2, 1))))
            },
        },
        OpCase {
            name: "conv2d_pointwise",
            make: |s| {
                let mut r = rng(s);
                let leaves = vec![uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0), uniform(&mut r, &[2, 3, 1, 1], -0.5, 0.5)];
                (leaves, projected(s, &[2, 2, 4, 4], |g, i| Ok(g.conv2d(i[0], i[1], None, 1, 0))))
            },
        },
        OpCase {
            name: "conv_transpose2d_stride2",
            make: |s| {
                let mut r = rng(s);
                let leaves = vec![
                    uniform(&mut r, &[2, 3, 2, 2], -1.0, 1.0),
                    uniform(&mut r, &[3, 2, 4, 4], -0.5, 0.5),
                    uniform(&mut r, &[2], -0.5, 0.5),
                ];
                (leaves, projected(s, &[2, 2, 4, 4], |g, i| Ok(g.conv_transpose2d(i[0], i[1], Some(i[2]), 2, 1))))
            },
        },
        OpCase {
            name: "relu",
            make: |s| {
                let leaves = vec![away_from_zero(&mut rng(s), &[3, 7])];
                (leaves, projected(s, &[3, 7], |g, i| Ok(g.relu(i[0]))))
            },
        },
        OpCase {
            name: "tanh",
            make: |s| {
                let leaves = vec![uniform(&mut rng(s), &[3, 7], -2.0, 2.0)];
                (leaves, projected(s, &[3, 7], |g, i| Ok(g.tanh(i[0]))))
            },
        },
        OpCase {
            name: "sigmoid",
            make: |s| {
                let leaves = vec![uniform(&mut rng(s), &[3, 7], -3.0, 3.0)];
                (leaves, projected(s, &[3, 7], |g, i| Ok(g.sigmoid(i[0]))))
            },
        },
        OpCase {
            name: "exp",
            make: |s| {
                let leaves = vec![uniform(&mut rng(s), &[3, 7], -2.0, 2.0)];
                (leaves, projected(s, &[3, 7], |g, i| Ok(g.exp(i[0]))))
            },
        },
        OpCase {
            name: "abs",
            make: |s| {
                let leaves = vec![away_from_zero(&mut rng(s), &[3, 7])];
                (leaves, projected(s, &[3, 7], |g, i| Ok(g.abs(i[0]))))
            },
        },
        OpCase {
            name: "add_sub_mul",
            make: |s| {
                let mut r = rng(s);
                let leaves = vec![uniform(&mut r, &[2, 5], -1.0, 1.0), uniform(&mut r, &[2, 5], -1.0, 1.0)];
                (
                    leaves,
                    projected(s, &[2, 5], |g, i| {
                        let a = g.add(i[0], i[1]);
                        let b = g.sub(i[0], i[1]);
                        Ok(g.mul(a, b))
                    }),
                )
            },
        },
        OpCase {
            name: "scale_add_scalar",
            make: |s| {
                let leaves = vec![uniform(&mut rng(s), &[4, 3], -1.0, 1.0)];
                (
                    leaves,
                    projected(s, &[4, 3], |g, i| {
                        let a = g.scale(i[0], -2.5);
                        let b = g.add_scalar(a, 0.75);
                        Ok(g.mul(b, i[0]))
                    }),
                )
            },
        },
        OpCase {
            name: "batch_norm_train",
            make: |s| {
                let mut r = rng(s);
                let leaves = vec![
                    uniform(&mut r, &[3, 2, 2, 2], -1.0, 1.0),
                    uniform(&mut r, &[2], 0.5, 1.5),
                    uniform(&mut r, &[2], -0.5, 0.5),
                ];
                (
                    leaves,
                    projected(s, &[3, 2, 2, 2], |g, i| Ok(g.batch_norm(i[0], i[1], i[2], 1e-5, BatchNormMode::Train))),
                )
            },
        },
        OpCase {
            name: "batch_norm_eval",
            make: |s| {
                let mut r = rng(s);
                let leaves = vec![
                    uniform(&mut r, &[2, 3, 2, 2], -1.0, 1.0),
                    uniform(&mut r, &[3], 0.5, 1.5),
                    uniform(&mut r, &[3], -0.5, 0.5),
                ];
                let mean = uniform(&mut r, &[3], -0.2, 0.2).into_data();
                let var = uniform(&mut r, &[3], 0.5, 2.0).into_data();
                (
                    leaves,
                    projected(s, &[2, 3, 2, 2], move |g, i| {
                        let mode = BatchNormMode::Eval {
                            mean: mean.clone(),
                            var: var.clone(),
                        };
                        Ok(g.batch_norm(i[0], i[1], i[2], 1e-5, mode))
                    }),
                )
            },
        },
        OpCase {
            name: "global_avg_pool",
            make: |s| {
                let leaves = vec![uniform(&mut rng(s), &[2, 3, 3, 4], -1.0, 1.0)];
                (leaves, projected(s, &[2, 3], |g, i| Ok(g.global_avg_pool(i[0]))))
            },
        },
        OpCase {
            name: "linear",
            make: |s| {
                let mut r = rng(s);
                let leaves = vec![
                    uniform(&mut r, &[3, 4], -1.0, 1.0),
                    uniform(&mut r, &[2, 4], -1.0, 1.0),
                    uniform(&mut r, &[2], -1.0, 1.0),
                ];
                (leaves, projected(s, &[3, 2], |g, i| Ok(g.linear(i[0], i[1], Some(i[2])))))
            },
        },
        OpCase {
            name: "scale_channels",
            make: |s| {
                let mut r = rng(s);
                let leaves = vec![uniform(&mut r, &[2, 3, 2, 3], -1.0, 1.0), uniform(&mut r, &[2, 3], 0.0, 1.0)];
                (leaves, projected(s, &[2, 3, 2, 3], |g, i| Ok(g.scale_channels(i[0], i[1]))))
            },
        },
        OpCase {
            name: "concat",
            make: |s| {
                let mut r = rng(s);
                let leaves = vec![uniform(&mut r, &[2, 1, 3, 3], -1.0, 1.0), uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0)];
                (leaves, projected(s, &[2, 3, 3, 3], |g, i| Ok(g.concat(&[i[0], i[1]]))))
            },
        },
        OpCase {
            name: "bilinear_upsample",
            make: |s| {
                let leaves = vec![uniform(&mut rng(s), &[2, 2, 3, 2], -1.0, 1.0)];
                (leaves, projected(s, &[2, 2, 7, 5], |g, i| Ok(g.upsample(i[0], 7, 5))))
            },
        },
        OpCase {
            name: "reshape_slice",
            make: |s| {
                let leaves = vec![uniform(&mut rng(s), &[2, 3, 2, 1], -1.0, 1.0)];
                (
                    leaves,
                    projected(s, &[2, 4], |g, i| {
                        let flat = g.reshape(i[0], [2, 6]);
                        Ok(g.slice_cols(flat, 1, 5))
                    }),
                )
            },
        },
        OpCase {
            name: "sum_mean",
            make: |s| {
                let mut r = rng(s);
                let leaves = vec![uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[3, 4], -1.0, 1.0)];
                (
                    leaves,
                    Box::new(|g: &mut Graph, i: &[NodeId]| {
                        let p = g.mul(i[0], i[1]);
                        let a = g.sum(p);
                        let q = g.mul(i[0], i[0]);
                        let b = g.mean(q);
                        let ab = g.mul(a, b);
                        Ok(g.add(ab, a))
                    }),
                )
            },
        },
        OpCase {
            name: "diff_x_diff_y",
            make: |s| {
                let leaves = vec![uniform(&mut rng(s), &[1, 2, 4, 5], -1.0, 1.0)];
                (
                    leaves,
                    Box::new(move |g: &mut Graph, i: &[NodeId]| {
                        let dx = g.diff_x(i[0]);
                        let dy = g.diff_y(i[0]);
                        let wx = uniform(&mut rng(s + 7), &[1, 2, 4, 4], -1.0, 1.0);
                        let wy = uniform(&mut rng(s + 8), &[1, 2, 3, 5], -1.0, 1.0);
                        let a = gradcheck::project(g, dx, wx);
                        let b = gradcheck::project(g, dy, wy);
                        Ok(g.add(a, b))
                    }),
                )
            },
        },
        OpCase {
            name: "charbonnier",
            make: |s| {
                let leaves = vec![uniform(&mut rng(s), &[3, 5], -0.01, 0.01)];
                (leaves, projected(s, &[3, 5], |g, i| Ok(g.charbonnier(i[0], 1e-6))))
            },
        },
        OpCase {
            name: "bce_with_logits",
            make: |s| {
                let mut r = rng(s);
                let leaves = vec![uniform(&mut r, &[3, 5], -3.0, 3.0)];
                let targets = Tensor::new([3, 5], (0..15).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect()).unwrap();
                (
                    leaves,
                    Box::new(move |g: &mut Graph, i: &[NodeId]| {
                        let t = g.constant(targets.clone());
                        let l = g.bce_with_logits(i[0], t);
                        Ok(g.sum(l))
                    }),
                )
            },
        },
    ]
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const FD_SEEDS: u64 = 20;

/// Worst report over seeds, with evaluation and straddle counts summed.
pub fn merge(acc: Option<GradCheck>, r: GradCheck) -> GradCheck {
    match acc {
        None => r,
        Some(a) => {
            let (evaluations, straddled) = (a.evaluations + r.evaluations, a.straddled + r.straddled);
            let w = if r.max_rel_error > a.max_rel_error { r } else { a };
            GradCheck { evaluations, straddled, ..w }
        }
    }
}

/// Largest fraction of FD stencils allowed to straddle a kink and be skipped.
pub const MAX_STRADDLED: f64 = 0.02;

pub fn straddled_fraction(r: &GradCheck) -> f64 {
    2.0 * r.straddled as f64 / r.evaluations.max(1) as f64
}

/// Worst relative error over `FD_SEEDS` seeds of one op case.
pub fn check_case(case: &OpCase) -> GradCheck {
    let mut worst: Option<GradCheck> = None;
    for seed in 0..FD_SEEDS {
        let (leaves, build) = (case.make)(seed);
        let r = gradcheck::check(&leaves, FD_STEP, build).unwrap();
        worst = Some(merge(worst, r));
    }
    worst.unwrap()
}

pub mod objectives {
    use super::{merge, rng, uniform, Builder, FD_SEEDS, FD_STEP, FD_TOL};
    use nae_core::model::{Bound, GeneratorConfig, Init, ModelParams, PredictorConfig};
    use nae_core::objective;
    use nae_core::tensor::gradcheck::{self, GradCheck};
    use nae_core::tensor::{Graph, NodeId, Tensor};
    use nae_core::trainer::InferenceNetParams;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    pub const RES: usize = 16;
    pub const BATCH: usize = 2;
    pub const LATENT: usize = 2;

    pub fn tiny_model(seed: u64) -> ModelParams {
        let init = Init::FanInTruncatedNormal { gain: 1.4 };
        ModelParams::init(
            PredictorConfig {
                in_channels: 3,
                widths: [2; 5],
                reduced: 2,
                init,
            },
            GeneratorConfig {
                latent_dim: LATENT,
                widths: [3, 2, 2],
                init,
                ..GeneratorConfig::default()
            },
            seed,
        )
    }

    /// Shifts every parameter by a random offset so no ReLU sits exactly at its kink.
    fn jitter(r: &mut ChaCha8Rng, t: &Tensor) -> Tensor {
        let mut t = t.clone();
        t.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.3..0.3));
        t
    }

    struct Layout {
        predictor: Vec<String>,
        generator: Vec<String>,
        encoder: Vec<String>,
    }

    impl Layout {
        fn bind(&self, ids: &[NodeId]) -> (Bound, Bound, Bound, usize) {
            let mut k = 0;
            let mut take = |names: &[String]| {
                let b = names.iter().map(|n| {
                    k += 1;
                    (n.clone(), ids[k - 1])
                });
                b.collect::<Vec<_>>()
            };
            let p = Bound::from_nodes("f1.", take(&self.predictor));
            let q = Bound::from_nodes("f2.", take(&self.generator));
            let e = Bound::from_nodes("phi.", take(&self.encoder));
            (p, q, e, k)
        }
    }

    /// Biases of the transposed convolutions feeding batch norm; batch statistics remove them exactly.
    fn cancelled_by_batch_norm(name: &str) -> bool {
        matches!(name, "deconv1.b" | "deconv2.b" | "deconv3.b")
    }

    fn leaves_for(seed: u64, with_encoder: bool) -> (Vec<Tensor>, Layout, ModelParams, Option<InferenceNetParams>) {
        let model = tiny_model(seed);
        let mut r = rng(seed.wrapping_add(77));
        let mut leaves = Vec::new();
        let mut layout = Layout {
            predictor: Vec::new(),
            generator: Vec::new(),
            encoder: Vec::new(),
        };
        for (name, t) in &model.predictor.tensors {
            layout.predictor.push(name.clone());
            leaves.push(jitter(&mut r, t));
        }
        for (name, t) in &model.generator.tensors {
            layout.generator.push(name.clone());
            leaves.push(jitter(&mut r, t));
        }
        let encoder = with_encoder.then(|| {
            let enc = InferenceNetParams::init([2; 4], LATENT, RES, Init::FanInTruncatedNormal { gain: 1.4 }, seed);
            for (name, t) in &enc.tensors {
                layout.encoder.push(name.clone());
                leaves.push(jitter(&mut r, t));
            }
            enc
        });
        (leaves, layout, model, encoder)
    }

    fn image(r: &mut ChaCha8Rng) -> Tensor {
        uniform(r, &[BATCH, 3, RES, RES], 0.0, 1.0)
    }

    fn label(r: &mut ChaCha8Rng) -> Tensor {
        uniform(r, &[BATCH, 1, RES, RES], 0.0, 1.0)
    }

    /// Reconstruction term through both networks, differentiated in all weights and in `Z`.
    fn recon(seed: u64) -> (Vec<Tensor>, Builder) {
        let (mut leaves, layout, model, _) = leaves_for(seed, false);
        let mut r = rng(seed.wrapping_add(5));
        let (x, y) = (image(&mut r), label(&mut r));
        leaves.push(uniform(&mut r, &[BATCH, LATENT], -1.5, 1.5));
        let build = move |g: &mut Graph, ids: &[NodeId]| {
            let (p, q, _, k) = layout.bind(ids);
            let xn = g.constant(x.clone());
            let yn = g.constant(y.clone());
            let s = model.predictor.build(g, &p, xn, RES, RES).expect("predictor builds");
            let delta = model.generator.build(g, &q, ids[k], BATCH, RES, RES, true).expect("generator builds").delta;
            let f = g.add(s, delta);
            Ok(objective::recon_term(g, yn, f, 1.0, BATCH))
        };
        (leaves, Box::new(build))
    }

    /// Edge-aware smoothness of a free saliency map.
    fn smoothness(seed: u64) -> (Vec<Tensor>, Builder) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[BATCH, 3, 6, 7], 0.0, 1.0);
        let s = uniform(&mut r, &[BATCH, 1, 6, 7], 0.0, 1.0);
        let normalize = seed % 2 == 1;
        let alpha = if seed.is_multiple_of(3) { 10.0 } else { r.gen_range(0.5..5.0) };
        let build = move |g: &mut Graph, ids: &[NodeId]| Ok(objective::smoothness_term(g, &x, ids[0], alpha, normalize).expect("shapes agree"));
        (vec![s], Box::new(build))
    }

    /// Smoothness through the predictor, differentiated in its weights.
    fn smoothness_predictor(seed: u64) -> (Vec<Tensor>, Builder) {
        let (leaves, layout, model, _) = leaves_for(seed, false);
        let mut r = rng(seed.wrapping_add(9));
        let x = image(&mut r);
        let count = model.predictor.tensors.len();
        let build = move |g: &mut Graph, ids: &[NodeId]| {
            let p = Bound::from_nodes("f1.", layout.predictor.iter().cloned().zip(ids.iter().copied()));
            let xn = g.constant(x.clone());
            let s = model.predictor.build(g, &p, xn, RES, RES).expect("predictor builds");
            Ok(objective::smoothness_term(g, &x, s, 10.0, false).expect("shapes agree"))
        };
        (leaves[..count].to_vec(), Box::new(build))
    }

    /// Reparameterized reconstruction plus KL through encoder and generator.
    fn cvae(seed: u64) -> (Vec<Tensor>, Builder) {
        let (leaves, layout, model, enc) = leaves_for(seed, true);
        let enc = enc.expect("encoder requested");
        let mut r = rng(seed.wrapping_add(13));
        let (x, y) = (image(&mut r), label(&mut r));
        let eta = uniform(&mut r, &[BATCH, LATENT], -2.0, 2.0);
        let build = move |g: &mut Graph, ids: &[NodeId]| {
            let (p, q, e, _) = layout.bind(ids);
            let xn = g.constant(x.clone());
            let yn = g.constant(y.clone());
            let s = model.predictor.build(g, &p, xn, RES, RES).expect("predictor builds");
            let (mu, logvar) = enc.build(g, &e, xn, yn, BATCH, LATENT).expect("encoder builds");
            let half = g.scale(logvar, 0.5);
            let std = g.exp(half);
            let en = g.constant(eta.clone());
            let noise = g.mul(std, en);
            let z = g.add(mu, noise);
            let delta = model.generator.build(g, &q, z, BATCH, RES, RES, true).expect("generator builds").delta;
            let f = g.add(s, delta);
            let recon = objective::recon_term(g, yn, f, 1.0, BATCH);
            let kl = objective::kl_term(g, mu, logvar, BATCH, LATENT);
            Ok(g.add(recon, kl))
        };
        (leaves, Box::new(build))
    }

    pub struct ObjectiveCase {
        pub name: &'static str,
        pub make: fn(u64) -> (Vec<Tensor>, Builder),
        /// Leaf names in build order, empty for cases with anonymous leaves.
        pub names: fn() -> Vec<String>,
        /// Whether the per-element check is numerically meaningful at `FD_STEP`.
        pub elementwise: bool,
    }

    fn model_names(with_encoder: bool) -> Vec<String> {
        let (_, layout, _, _) = leaves_for(0, with_encoder);
        layout.predictor.into_iter().chain(layout.generator).chain(layout.encoder).collect()
    }

    pub fn objective_cases() -> Vec<ObjectiveCase> {
        vec![
            ObjectiveCase {
                name: "recon_end_to_end",
                make: recon,
                names: || {
                    let mut n = model_names(false);
                    n.push("z".into());
                    n
                },
                elementwise: true,
            },
            ObjectiveCase {
                name: "smoothness_free_map",
                make: smoothness,
                names: || vec!["s".into()],
                elementwise: true,
            },
            ObjectiveCase {
                name: "smoothness_through_predictor",
                make: smoothness_predictor,
                names: || tiny_model(0).predictor.tensors.keys().cloned().collect(),
                elementwise: true,
            },
            ObjectiveCase {
                name: "cvae_pathwise",
                make: cvae,
                names: || model_names(true),
                elementwise: true,
            },
        ]
    }

    /// Directional checks along one random direction per leaf plus one joint
    /// direction, over `FD_SEEDS` seeds. Leaves whose influence batch norm
    /// cancels are instead required to have a vanishing analytic gradient.
    pub fn check_objective(case: &ObjectiveCase) -> Result<GradCheck, String> {
        let names = (case.names)();
        let mut worst: Option<GradCheck> = None;
        for seed in 0..FD_SEEDS {
            let (leaves, build) = (case.make)(seed);
            let live: Vec<bool> = names.iter().map(|n| !cancelled_by_batch_norm(n)).collect();
            let mut r = rng(seed.wrapping_add(31));
            let zero: Vec<Tensor> = leaves.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
            let mut dirs = Vec::new();
            for (i, t) in leaves.iter().enumerate() {
                if live[i] {
                    let mut d = zero.clone();
                    d[i] = uniform(&mut r, t.shape(), -1.0, 1.0);
                    dirs.push(d);
                }
            }
            dirs.push(
                leaves
                    .iter()
                    .zip(&live)
                    .map(|(t, &l)| {
                        if l {
                            uniform(&mut r, t.shape(), -1.0, 1.0)
                        } else {
                            Tensor::zeros(t.shape().to_vec())
                        }
                    })
                    .collect(),
            );
            let res = gradcheck::check_directions(&leaves, FD_STEP, &dirs, &build).map_err(|e| e.to_string())?;
            if case.elementwise {
                let live_leaves: Vec<Tensor> = leaves.iter().zip(&live).filter(|(_, &l)| l).map(|(t, _)| t.clone()).collect();
                let with_fixed = |g: &mut Graph, live_ids: &[NodeId]| {
                    let mut it = live_ids.iter();
                    let ids: Vec<NodeId> = leaves
                        .iter()
                        .zip(&live)
                        .map(|(t, &l)| {
                            if l {
                                *it.next().expect("one id per live leaf")
                            } else {
                                g.constant(t.clone())
                            }
                        })
                        .collect();
                    build(g, &ids)
                };
                let el = gradcheck::check(&live_leaves, FD_STEP, with_fixed).map_err(|e| e.to_string())?;
                if el.max_rel_error >= FD_TOL {
                    return Err(format!("{} seed {seed} elementwise: {el:?}", case.name));
                }
                worst = Some(merge(worst, el));
            }
            let mut g = Graph::new();
            let ids: Vec<NodeId> = leaves.iter().map(|t| g.param("leaf", t.clone())).collect();
            let loss = build(&mut g, &ids).map_err(|e| e.to_string())?;
            g.forward(&Default::default()).map_err(|e| e.to_string())?;
            let grads = g.backward(loss).map_err(|e| e.to_string())?;
            let scale = ids.iter().map(|&i| grads.get(i).max_abs()).fold(1.0, f64::max);
            for (i, &id) in ids.iter().enumerate() {
                if !live[i] && grads.get(id).max_abs() > 1e-9 * scale {
                    return Err(format!("{} seed {seed}: {} should not influence the loss", case.name, names[i]));
                }
            }
            worst = Some(merge(worst, res));
        }
        Ok(worst.expect("at least one seed"))
    }
}

pub mod langevin {
    use nae_core::inference::{self, LangevinConfig, LatentStore, LinearDiagnostic, StartMode};
    use nae_core::tensor::Tensor;

    pub const CHAINS: usize = 10_000;
    pub const STEPS: usize = 200;

    pub struct OracleRun {
        pub mean: f64,
        pub var: f64,
        pub std_error: f64,
    }

    /// Independent chains on `f(Z) = Z`, `σ = 1`, `Y = 1`, started from the prior.
    pub fn linear_gaussian(seed: u64) -> OracleRun {
        let cfg = LangevinConfig {
            steps: STEPS,
            step_size: 0.3,
            sigma: 1.0,
            start: StartMode::Cold,
        };
        let mut store = LatentStore::new(CHAINS, 1, seed);
        let idx: Vec<usize> = (0..CHAINS).collect();
        let y = Tensor::full([CHAINS, 1], 1.0);
        let z = inference::infer_latent(&idx, &LinearDiagnostic { dim: 1 }, &y, &cfg, &mut store, 0).unwrap();
        let n = CHAINS as f64;
        let mean = z.data().iter().sum::<f64>() / n;
        let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        OracleRun {
            mean,
            var,
            std_error: (var / n).sqrt(),
        }
    }
}

pub mod metrics {
    use rand::Rng;

    /// Small map with quantized, continuous and extreme prediction values.
    pub fn random_map(seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut r = super::rng(seed.wrapping_add(500));
        let n = r.gen_range(4..40);
        let positives = r.gen_range(0.0..1.0);
        let pred = (0..n)
            .map(|_| match r.gen_range(0..4) {
                0 => r.gen_range(0..256) as f64 / 255.0,
                1 => 0.0,
                2 => 1.0,
                _ => r.gen_range(0.0..1.0),
            })
            .collect();
        let gt = (0..n).map(|_| if r.gen_bool(positives) { 1.0 } else { 0.0 }).collect();
        (pred, gt)
    }

    pub fn brute_mae(pred: &[f64], gt: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..pred.len() {
            s += (pred[i] - gt[i]).abs();
        }
        s / pred.len() as f64
    }

    /// Per-threshold confusion matrices counted pixel by pixel.
    pub fn brute_curve(pred: &[f64], gt: &[f64]) -> Vec<f64> {
        (0..256)
            .map(|k| {
                let t = k as f64 / 255.0;
                let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
                for (&p, &g) in pred.iter().zip(gt) {
                    match (p >= t, g == 1.0) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        (false, false) => {}
                    }
                }
                if tp == 0 {
                    return 0.0;
                }
                let precision = tp as f64 / (tp + fp) as f64;
                let recall = tp as f64 / (tp + fn_) as f64;
                (1.0 + 0.3) * precision * recall / (0.3 * precision + recall)
            })
            .collect()
    }

    /// Macro averages over images of MAE and of the curve.
    pub fn brute_report(maps: &[(Vec<f64>, Vec<f64>)]) -> (f64, Vec<f64>) {
        let n = maps.len() as f64;
        let mut curve = vec![0.0; 256];
        let mut mae = 0.0;
        for (p, g) in maps {
            for (a, b) in curve.iter_mut().zip(brute_curve(p, g)) {
                *a += b;
            }
            mae += brute_mae(p, g);
        }
        (mae / n, curve.into_iter().map(|c| c / n).collect())
    }
}
