//! Acceptance criteria, run in order with one PASS/FAIL line each.
//!
//! The training criteria use the desk-scale configuration on synthbench-v1
//! and take on the order of an hour on one core. Failures of the training
//! criteria are printed but only asserted with `NAE_ACCEPTANCE_STRICT=1`.

mod common;

use std::time::{Duration, Instant};

use common::{check_case, op_cases, straddled_fraction, FD_TOL, MAX_STRADDLED};
use nae_core::data::{BenchSpec, Dataset, NoiseSpec};
use nae_core::eval::{self, MetricReport};
use nae_core::objective;
use nae_core::tensor::Tensor;
use nae_core::trainer::{self, RunOptions, TrainConfig, TrainOutcome, Variant};

/// Training-outcome criteria; the rest check the implementation itself.
const EMPIRICAL: [usize; 5] = [4, 5, 6, 7, 8];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

struct Bench {
    train: Dataset,
    eval: Dataset,
    base: TrainConfig,
}

impl Bench {
    fn new() -> Self {
        let (train, eval) = BenchSpec::synthbench_v1().build().unwrap();
        Self {
            train,
            eval,
            base: TrainConfig::desk_scale(),
        }
    }

    fn run(&self, cfg: TrainConfig) -> (TrainOutcome, MetricReport) {
        let out = trainer::train(&self.train, &cfg, &RunOptions::default(), None).unwrap();
        let (report, _) = eval::evaluate(&out.state.params.predictor, &self.eval).unwrap();
        eprintln!(
            "  {} seed {} lambda {}: mae {:.4} mean_f {:.4} mean_s {:.4}",
            cfg.variant, cfg.seed, cfg.lambda, report.mae, report.mean_f, report.mean_pred
        );
        (out, report)
    }

    fn variant(&self, v: Variant) -> TrainConfig {
        TrainConfig {
            variant: v,
            ..self.base.clone()
        }
    }
}

/// Runs shared between criteria, keyed by role.
#[derive(Default)]
struct Shared {
    full: Option<MetricReport>,
    f1: Option<MetricReport>,
}

fn gradient_correctness() -> Verdict {
    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    for case in op_cases() {
        let r = check_case(&case);
        worst = worst.max(r.max_rel_error);
        if r.max_rel_error >= FD_TOL || r.straddled > 0 {
            bad.push(case.name.to_string());
        }
    }
    for case in common::objectives::objective_cases() {
        match common::objectives::check_objective(&case) {
            Ok(r) => {
                worst = worst.max(r.max_rel_error);
                if r.max_rel_error >= FD_TOL || straddled_fraction(&r) > MAX_STRADDLED {
                    bad.push(case.name.to_string());
                }
            }
            Err(e) => bad.push(e),
        }
    }
    verdict(
        bad.is_empty(),
        format!("max rel error {worst:.2e} over {} seeds, failing: {bad:?}", common::FD_SEEDS),
    )
}

fn langevin_oracle() -> Verdict {
    let run = common::langevin::linear_gaussian(11);
    let mean_ok = (run.mean - 0.5).abs() <= 3.0 * run.std_error;
    let var_ok = (run.var - 0.5).abs() <= 0.15 * 0.5;
    verdict(
        mean_ok && var_ok,
        format!("mean {:.4} (se {:.4}), variance {:.4}", run.mean, run.std_error, run.var),
    )
}

fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
    let plane: Vec<f64> = (0..h * w).map(|i| f(i / w, i % w)).collect();
    Tensor::new([1, 3, h, w], plane.repeat(3)).unwrap()
}

fn smoothness_exactness() -> Verdict {
    let s_const = Tensor::full([1, 1, 2, 2], 0.42);
    let constant = objective::smoothness_loss(&gray(2, 2, |u, v| (u * 2 + v) as f64 * 0.3), &s_const, 10.0).unwrap();
    let step = Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    let weak = objective::smoothness_loss(&gray(2, 2, |_, v| 0.1 * v as f64), &step, 10.0).unwrap();
    let psi = ((-1.0f64).exp().powi(2) + 1e-6).sqrt();
    let ok = (constant - 4e-3).abs() < 1e-9 && (weak - (2.0 * psi + 2e-3)).abs() < 1e-9 && (psi - 0.367881).abs() < 1e-6;
    verdict(ok, format!("constant {constant:.12}, weak edge {weak:.12}"))
}

fn trivial_collapse(bench: &Bench, shared: &mut Shared) -> Verdict {
    let zero = bench.run(TrainConfig {
        lambda: 0.0,
        ..bench.variant(Variant::Full)
    });
    let (_, full) = bench.run(bench.variant(Variant::Full));
    let detail = format!("mean S with lambda 0: {:.4}, with lambda 0.7: {:.4}", zero.1.mean_pred, full.mean_pred);
    let pass = zero.1.mean_pred < 0.05 && full.mean_pred > 0.1;
    shared.full = Some(full);
    verdict(pass, detail)
}

fn ablation_ordering(bench: &Bench, shared: &mut Shared) -> Verdict {
    let (_, f1) = bench.run(bench.variant(Variant::F1));
    let (_, ls) = bench.run(bench.variant(Variant::F1Ls));
    let (_, lc) = bench.run(bench.variant(Variant::FLc));
    let full = shared.full.clone().unwrap_or_else(|| bench.run(bench.variant(Variant::Full)).1);
    let f = |r: &MetricReport| r.mean_f;
    let pass = f(&full) > f(&ls) && f(&ls) > f(&f1) && f(&full) > f(&lc) && f(&lc) >= f(&ls) && f(&full) - f(&f1) >= 0.05;
    let detail = format!("mean F: full {:.4}, f&lc {:.4}, f1&ls {:.4}, f1 {:.4}", f(&full), f(&lc), f(&ls), f(&f1));
    shared.f1 = Some(f1);
    shared.full = Some(full);
    verdict(pass, detail)
}

fn noise_awareness(shared: &Shared) -> Verdict {
    let (full, f1) = (shared.full.as_ref().unwrap(), shared.f1.as_ref().unwrap());
    let gain = 1.0 - full.mae / f1.mae;
    verdict(
        gain >= 0.2,
        format!("MAE full {:.4}, f1 {:.4}, relative reduction {:.1}%", full.mae, f1.mae, 100.0 * gain),
    )
}

fn clean_degeneracy(bench: &Bench) -> Verdict {
    let (out, _) = bench.run(bench.variant(Variant::CleanF));
    let m = trainer::mean_abs_noise(&out.state, bench.base.resolution).unwrap();
    verdict(m < 0.05, format!("mean |delta| {m:.4} over training examples"))
}

fn abp_vs_cvae(bench: &Bench, shared: &Shared) -> Verdict {
    let mut wins = 0;
    let mut maes = Vec::new();
    for k in 0..3u64 {
        let seed = bench.base.seed + k;
        let abp = match (k, &shared.full) {
            (0, Some(r)) => r.clone(),
            _ => {
                bench
                    .run(TrainConfig {
                        seed,
                        ..bench.variant(Variant::Full)
                    })
                    .1
            }
        };
        let cvae = bench
            .run(TrainConfig {
                seed,
                ..bench.variant(Variant::Cvae)
            })
            .1;
        if abp.mae <= cvae.mae {
            wins += 1;
        }
        maes.push(format!("seed {seed}: {:.4} vs {:.4}", abp.mae, cvae.mae));
    }
    verdict(wins >= 2, format!("ABP vs cVAE MAE, {}; ABP wins {wins}/3", maes.join(", ")))
}

fn metric_oracle() -> Verdict {
    let maps: Vec<_> = (0..20).map(common::metrics::random_map).collect();
    let mut ok = maps.iter().all(|(p, g)| {
        eval::mae(p, g).unwrap() == common::metrics::brute_mae(p, g) && eval::f_measure_curve(p, g).unwrap() == common::metrics::brute_curve(p, g)
    });
    let report = MetricReport::from_maps(maps.iter().enumerate().map(|(i, (p, g))| (i, &p[..], &g[..]))).unwrap();
    let (mae, curve) = common::metrics::brute_report(&maps);
    ok &= report.mae == mae && report.f_curve == curve;
    verdict(ok, "20 maps compared for exact equality".into())
}

fn determinism_and_resume() -> Verdict {
    let spec = BenchSpec {
        train: 12,
        eval: 0,
        ..BenchSpec::synthbench_v1()
    };
    let train = nae_core::data::synth_dataset("det", spec.seed, 0, spec.train, 32, &NoiseSpec::mixture(1)).unwrap();
    let mut failures = Vec::new();
    for v in [Variant::Full, Variant::Cvae, Variant::F1Ls] {
        let mut cfg = TrainConfig::desk_scale();
        cfg.variant = v;
        cfg.resolution = 32;
        cfg.epochs = 4;
        let a = trainer::train(&train, &cfg, &RunOptions::default(), None).unwrap();
        let b = trainer::train(&train, &cfg, &RunOptions::default(), None).unwrap();
        let bytes = |o: &TrainOutcome| {
            let mut buf = Vec::new();
            o.state.to_checkpoint(&cfg).write_to(&mut buf).unwrap();
            buf
        };
        if bytes(&a) != bytes(&b) {
            failures.push(format!("{v}: same-seed runs differ"));
        }
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            stop_after: Some(2),
            ..Default::default()
        };
        trainer::train(&train, &cfg, &opts, None).unwrap();
        let resumed = trainer::resume(&train, &trainer::epoch_checkpoint(dir.path(), 2), &RunOptions::default()).unwrap();
        if bytes(&resumed) != bytes(&a) {
            failures.push(format!("{v}: resumed run differs"));
        }
    }
    verdict(failures.is_empty(), format!("full, cvae and f1&ls checked; {failures:?}"))
}

fn report(lines: &mut Vec<(usize, bool)>, id: usize, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Verdict) {
    let t = Instant::now();
    let v = f();
    let took = t.elapsed();
    let over = budget.is_some_and(|b| took > b);
    let pass = v.pass && !over;
    let budget_note = budget.map_or(String::new(), |b| format!(" (budget {}s)", b.as_secs()));
    println!(
        "criterion {id:>2} {name}: {} in {:.1}s{budget_note}; {}",
        if pass { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        v.detail
    );
    lines.push((id, pass));
}

fn main() {
    let mut lines = Vec::new();
    let min = |m: u64| Some(Duration::from_secs(60 * m));
    report(&mut lines, 1, "gradient correctness", min(2), gradient_correctness);
    report(&mut lines, 2, "Langevin posterior oracle", min(1), langevin_oracle);
    report(&mut lines, 3, "smoothness loss exactness", None, smoothness_exactness);
    let bench = Bench::new();
    let mut shared = Shared::default();
    report(&mut lines, 4, "trivial-solution collapse", min(20), || trivial_collapse(&bench, &mut shared));
    report(&mut lines, 5, "ablation ordering", min(90), || ablation_ordering(&bench, &mut shared));
    report(&mut lines, 6, "noise-awareness benefit", None, || noise_awareness(&shared));
    report(&mut lines, 7, "clean-label degeneracy", None, || clean_degeneracy(&bench));
    report(&mut lines, 8, "ABP vs cVAE", None, || abp_vs_cvae(&bench, &shared));
    report(&mut lines, 9, "metric oracle", None, metric_oracle);
    report(&mut lines, 10, "determinism and resume", None, determinism_and_resume);
    let failed: Vec<usize> = lines.iter().filter(|(_, p)| !p).map(|(i, _)| *i).collect();
    println!("acceptance: {}/{} criteria passed", lines.len() - failed.len(), lines.len());
    let strict = std::env::var("NAE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let gating: Vec<usize> = failed.iter().copied().filter(|i| strict || !EMPIRICAL.contains(i)).collect();
    if gating.len() < failed.len() {
        println!("acceptance: empirical criteria reported but not asserted; set NAE_ACCEPTANCE_STRICT=1 to assert them");
    }
    assert!(gating.is_empty(), "failed criteria: {gating:?}");
}
