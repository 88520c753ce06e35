use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use nae_core::data::{self, BenchSpec, Dataset, NoiseSpec};
use nae_core::eval::{self, MetricReport};
use nae_core::inference::LatentStore;
use nae_core::model::checkpoint::Checkpoint;
use nae_core::model::{self, GeneratorParams};
use nae_core::trainer::{self, RunOptions, TrainConfig, TrainOutcome, TrainState, Variant};
use serde_json::json;

use crate::run::{self, DatasetRef, RunDir, RunManifest};
use crate::{AblateArgs, ConfigArgs, EvalArgs, InspectArgs, SynthArgs, TrainArgs};

pub fn synth(a: &SynthArgs) -> Result<()> {
    run::prepare_output(&a.out, a.force)?;
    match a.bench.as_deref() {
        Some("synthbench-v1") => {
            let (train, test) = BenchSpec::synthbench_v1().build()?;
            data::write_dataset(&a.out.join("train"), &train)?;
            data::write_dataset(&a.out.join("eval"), &test)?;
            println!(
                "wrote synthbench-v1: {} train and {} eval pairs to {}",
                train.len(),
                test.len(),
                a.out.display()
            );
        }
        Some(other) => bail!("unknown benchmark `{other}` (expected synthbench-v1)"),
        None => {
            let noise = NoiseSpec::parse(&a.noise, a.seed)?;
            let ds = data::synth_multi_label(&a.name, a.seed, a.split, a.count, a.labels_per_image, a.resolution, &noise)?;
            data::write_dataset(&a.out, &ds)?;
            println!("wrote {} pairs to {}", ds.len(), a.out.display());
        }
    }
    Ok(())
}

/// Resolves preset, config file and flags into a validated configuration.
pub fn resolve_config(c: &ConfigArgs, variant: Option<&str>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::preset(c.preset.as_deref().unwrap_or("paper"))?;
    if let Some(path) = &c.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
    }
    let mut flags: Vec<(String, String)> = Vec::new();
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            flags.push((k.into(), v));
        }
    };
    flag("variant", variant.map(str::to_string));
    flag("epochs", c.epochs.map(|v| v.to_string()));
    flag("lambda", c.lambda.map(|v| v.to_string()));
    flag("lr", c.lr.map(|v| v.to_string()));
    flag("batch_size", c.batch_size.map(|v| v.to_string()));
    flag("seed", c.seed.map(|v| v.to_string()));
    flag("resolution", c.resolution.map(|v| v.to_string()));
    flag("langevin_steps", c.langevin_steps.map(|v| v.to_string()));
    for kv in &c.sets {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        flags.push((k.trim().into(), v.trim().into()));
    }
    for (k, v) in &flags {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(dir: &Path, resolution: usize) -> Result<Dataset> {
    data::load_dir(dir, Some((resolution, resolution))).with_context(|| format!("loading dataset {}", dir.display()))
}

fn dataset_ref(dir: &Path, ds: &Dataset) -> DatasetRef {
    DatasetRef {
        dir: fs::canonicalize(dir).unwrap_or_else(|_| dir.to_path_buf()),
        name: ds.manifest.as_ref().map(|m| m.name.clone()),
        count: ds.len(),
    }
}

fn eval_csv(evals: &[(usize, MetricReport)]) -> String {
    let mut s = String::from("epoch,mae,mean_f,max_f,mean_pred\n");
    for (e, r) in evals {
        writeln!(s, "{e},{},{},{},{}", r.mae, r.mean_f, r.max_f, r.mean_pred).unwrap();
    }
    s
}

/// Keeps the header and the rows of `path` whose first field is at most `epoch`.
fn truncated_log(path: &Path, epoch: usize) -> String {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut lines = text.lines();
    let mut out = String::new();
    if let Some(h) = lines.next() {
        out.push_str(h);
        out.push('\n');
    }
    for l in lines {
        if l.split(',').next().and_then(|v| v.parse::<usize>().ok()).is_some_and(|e| e <= epoch) {
            out.push_str(l);
            out.push('\n');
        }
    }
    out
}

fn body(csv: &str) -> &str {
    csv.split_once('\n').map_or("", |(_, rest)| rest)
}

fn summarize(out: &TrainOutcome) {
    if let Some(last) = out.log.rows.last() {
        println!(
            "epoch {} step {}: loss {:.6e} (recon {:.6e}, smooth {:.6e}, kl {:.6e})",
            last.epoch, last.step, last.loss.total, last.loss.recon, last.loss.smooth, last.loss.kl
        );
    }
    if let Some((e, r)) = out.log.evals.last() {
        println!("eval after epoch {e}: mae {:.4} mean_f {:.4} max_f {:.4}", r.mae, r.mean_f, r.max_f);
    }
}

pub fn train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    if let Some(root) = &a.resume {
        if !a.config.is_empty() || a.variant.is_some() {
            bail!("configuration flags cannot be combined with --resume; the checkpoint's configuration is used");
        }
        return resume(root, a);
    }
    let (cfg, dataset_dir, eval_dir) = match &a.replay {
        Some(path) => {
            if !a.config.is_empty() || a.variant.is_some() {
                bail!("configuration flags cannot be combined with --replay");
            }
            let m = RunManifest::load(path)?;
            let cfg = TrainConfig::from_text(&m.config)?;
            let ds = a.dataset.clone().or(m.dataset.map(|d| d.dir)).context("manifest has no dataset")?;
            (cfg, ds, a.eval_dir.clone().or(m.eval_dataset.map(|d| d.dir)))
        }
        None => {
            let ds = a.dataset.clone().context("--dataset is required")?;
            (resolve_config(&a.config, a.variant.as_deref())?, ds, a.eval_dir.clone())
        }
    };
    let out = a.out.as_ref().context("--out is required")?;
    let t = Instant::now();
    let ds = load_dataset(&dataset_dir, cfg.resolution)?;
    let ev = eval_dir.as_deref().map(|d| load_dataset(d, cfg.resolution)).transpose()?;
    let load_secs = t.elapsed().as_secs_f64();

    let dir = RunDir::create(out, a.force)?;
    let mut manifest = RunManifest {
        command: argv.join(" "),
        config: cfg.to_text(),
        config_hash: cfg.hash(),
        dataset: Some(dataset_ref(&dataset_dir, &ds)),
        eval_dataset: eval_dir.as_deref().zip(ev.as_ref()).map(|(d, e)| dataset_ref(d, e)),
        build: run::build_id(),
        ..Default::default()
    };
    manifest.time("load", load_secs);
    fs::write(dir.root.join("config.txt"), cfg.to_text())?;
    dir.write_manifest(&manifest)?;

    let opts = RunOptions {
        checkpoint_dir: Some(dir.checkpoints()),
        eval: ev.as_ref(),
        stop_after: a.stop_after,
    };
    let t = Instant::now();
    let outcome = trainer::train(&ds, &cfg, &opts, None)?;
    manifest.time("train", t.elapsed().as_secs_f64());
    fs::write(dir.logs().join("train.csv"), outcome.log.to_csv())?;
    fs::write(dir.logs().join("eval.csv"), eval_csv(&outcome.log.evals))?;
    manifest.extra.insert("epochs_completed".into(), json!(outcome.state.epoch));
    dir.write_manifest(&manifest)?;
    summarize(&outcome);
    println!("run written to {}", dir.root.display());
    Ok(())
}

fn resume(root: &Path, a: &TrainArgs) -> Result<()> {
    let dir = RunDir::open(root)?;
    let mut manifest = dir.manifest()?;
    let ckpt = dir.checkpoints().join("last.ckpt");
    let (cfg, state) = TrainState::from_checkpoint(&Checkpoint::load(&ckpt)?)?;
    let dataset_dir = a
        .dataset
        .clone()
        .or(manifest.dataset.as_ref().map(|d| d.dir.clone()))
        .context("no dataset recorded")?;
    let eval_dir = a.eval_dir.clone().or(manifest.eval_dataset.as_ref().map(|d| d.dir.clone()));
    let ds = load_dataset(&dataset_dir, cfg.resolution)?;
    let ev = eval_dir.as_deref().map(|d| load_dataset(d, cfg.resolution)).transpose()?;
    let start = state.epoch;
    let opts = RunOptions {
        checkpoint_dir: Some(dir.checkpoints()),
        eval: ev.as_ref(),
        stop_after: a.stop_after,
    };
    let t = Instant::now();
    let outcome = trainer::train(&ds, &cfg, &opts, Some(state))?;
    manifest.time(&format!("train (resumed at epoch {start})"), t.elapsed().as_secs_f64());
    let train_csv = truncated_log(&dir.logs().join("train.csv"), start);
    fs::write(dir.logs().join("train.csv"), train_csv + body(&outcome.log.to_csv()))?;
    let eval_log = truncated_log(&dir.logs().join("eval.csv"), start);
    fs::write(dir.logs().join("eval.csv"), eval_log + body(&eval_csv(&outcome.log.evals)))?;
    manifest.extra.insert("epochs_completed".into(), json!(outcome.state.epoch));
    dir.write_manifest(&manifest)?;
    summarize(&outcome);
    Ok(())
}

fn checkpoint_path(dir: &RunDir, which: &str) -> PathBuf {
    match which {
        "last" | "best" => dir.checkpoints().join(format!("{which}.ckpt")),
        n if n.parse::<usize>().is_ok() => trainer::epoch_checkpoint(&dir.checkpoints(), n.parse().unwrap()),
        path => PathBuf::from(path),
    }
}

fn has_generator(v: Variant) -> bool {
    v.is_abp() || v == Variant::Cvae
}

/// Noise maps for every example: stored latents on the training set, prior draws elsewhere.
fn noise_maps(gen: &GeneratorParams, latents: &LatentStore, res: usize) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = (0..latents.len()).collect();
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(50) {
        let d = model::generate_noise(gen, &latents.gather(chunk)?, res, res)?;
        out.extend((0..chunk.len()).map(|i| d.sample(i).data().to_vec()));
    }
    Ok(out)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let dir = RunDir::open(&a.run)?;
    let mut manifest = dir.manifest()?;
    let ckpt_path = checkpoint_path(&dir, &a.checkpoint);
    let (cfg, state) = TrainState::from_checkpoint(&Checkpoint::load(&ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?)?;
    let t = Instant::now();
    let ds = load_dataset(&a.dataset, cfg.resolution)?;
    if !ds.has_clean() {
        bail!("{} has no clean labels (expected a clean/ directory)", a.dataset.display());
    }
    let (report, preds) = eval::evaluate(&state.params.predictor, &ds)?;
    let name = a
        .name
        .clone()
        .or_else(|| fs::canonicalize(&a.dataset).ok()?.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "eval".into());

    fs::write(dir.reports().join(format!("{name}.txt")), report.to_text())?;
    eval::write_curve_png(&dir.reports().join(format!("{name}_curve.png")), &[&report.f_curve])?;
    let res = cfg.resolution;
    let sal_dir = dir.viz().join(&name).join("saliency");
    fs::create_dir_all(&sal_dir)?;
    for (p, s) in ds.pairs.iter().zip(&preds) {
        data::save_gray(&sal_dir.join(format!("{:04}.png", p.id)), s.data(), res, res)?;
    }
    let mut latent_source = None;
    if has_generator(cfg.variant) {
        let here = dataset_ref(&a.dataset, &ds);
        let stored = state
            .latents
            .as_ref()
            .filter(|l| manifest.dataset.as_ref().is_some_and(|d| d.dir == here.dir) && l.len() == ds.len());
        let (latents, source) = match stored {
            Some(l) => (l.clone(), "stored"),
            None => (LatentStore::new(ds.len(), cfg.generator.latent_dim, a.seed.unwrap_or(cfg.seed)), "prior"),
        };
        let noise_dir = dir.viz().join(&name).join("noise");
        fs::create_dir_all(&noise_dir)?;
        for (p, d) in ds.pairs.iter().zip(noise_maps(&state.params.generator, &latents, res)?) {
            let shifted: Vec<f64> = d.iter().map(|v| (v + 1.0) / 2.0).collect();
            data::save_gray(&noise_dir.join(format!("{:04}.png", p.id)), &shifted, res, res)?;
        }
        latent_source = Some(source);
    }
    manifest.time(&format!("eval {name}"), t.elapsed().as_secs_f64());
    let evals = manifest.extra.entry("evals".to_string()).or_insert_with(|| json!({}));
    evals[&name] = json!({
        "dataset": fs::canonicalize(&a.dataset).unwrap_or_else(|_| a.dataset.clone()),
        "checkpoint": ckpt_path,
        "mae": report.mae,
        "mean_f": report.mean_f,
        "noise_latents": latent_source,
    });
    dir.write_manifest(&manifest)?;
    println!(
        "{name}: mae {:.4} mean_f {:.4} max_f {:.4} mean_pred {:.4}",
        report.mae, report.mean_f, report.max_f, report.mean_pred
    );
    Ok(())
}

pub fn ablate(a: &AblateArgs, argv: &[String]) -> Result<()> {
    let variants: Vec<Variant> = a.variants.split(',').map(|v| v.trim().parse()).collect::<Result<_, _>>()?;
    if variants.is_empty() {
        bail!("--variants is empty");
    }
    let base = resolve_config(&a.config, None)?;
    let t = Instant::now();
    let ds = load_dataset(&a.dataset, base.resolution)?;
    let ev = load_dataset(&a.eval_dir, base.resolution)?;
    let dir = RunDir::create(&a.out, a.force)?;
    let mut manifest = RunManifest {
        command: argv.join(" "),
        config: base.to_text(),
        config_hash: base.hash(),
        dataset: Some(dataset_ref(&a.dataset, &ds)),
        eval_dataset: Some(dataset_ref(&a.eval_dir, &ev)),
        build: run::build_id(),
        ..Default::default()
    };
    manifest.time("load", t.elapsed().as_secs_f64());
    manifest
        .extra
        .insert("variants".into(), json!(variants.iter().map(|v| v.tag()).collect::<Vec<_>>()));
    dir.write_manifest(&manifest)?;

    let t = Instant::now();
    let (table, outcomes) = trainer::run_ablation(&ds, &ev, &base, &variants)?;
    manifest.time("ablation", t.elapsed().as_secs_f64());
    let mut curves = Vec::new();
    for (i, out) in outcomes.iter().enumerate() {
        let tag = out.config.variant.tag().replace('+', "_");
        out.state
            .to_checkpoint(&out.config)
            .save(&dir.checkpoints().join(format!("{i:02}_{tag}.ckpt")))?;
        fs::write(dir.logs().join(format!("{i:02}_{tag}.csv")), out.log.to_csv())?;
        curves.push(eval::evaluate(&out.state.params.predictor, &ev)?.0.f_curve);
    }
    let refs: Vec<&[f64]> = curves.iter().map(Vec::as_slice).collect();
    eval::write_curve_png(&dir.reports().join("ablation_curves.png"), &refs)?;
    fs::write(dir.reports().join("ablation.txt"), table.to_text())?;
    fs::write(dir.reports().join("ablation.csv"), table.to_csv())?;
    dir.write_manifest(&manifest)?;
    print!("{}", table.to_text());
    Ok(())
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    let mut out = std::io::stdout().lock();
    if a.path.is_dir() {
        let dir = RunDir::open(&a.path)?;
        writeln!(out, "{}", serde_json::to_string_pretty(&dir.manifest()?)?)?;
        let mut names: Vec<String> = fs::read_dir(dir.checkpoints())?
            .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect();
        names.sort();
        writeln!(out, "checkpoints: {}", names.join(" "))?;
        return Ok(());
    }
    let c = Checkpoint::load(&a.path)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&c.manifest)?)?;
    let mut groups: Vec<(String, usize, usize)> = Vec::new();
    for (name, t) in &c.tensors {
        let prefix = name.split('.').next().unwrap_or("").to_string();
        match groups.iter_mut().find(|g| g.0 == prefix) {
            Some(g) => {
                g.1 += 1;
                g.2 += t.numel();
            }
            None => groups.push((prefix, 1, t.numel())),
        }
    }
    for (prefix, n, numel) in groups {
        writeln!(out, "{prefix:<10} {n:>4} tensors {numel:>10} values")?;
    }
    for (name, v) in &c.counters {
        if v.len() <= 4 {
            writeln!(out, "{name}: {v:?}")?;
        } else {
            writeln!(out, "{name}: {} entries", v.len())?;
        }
    }
    Ok(())
}
