use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use multiresnet::data::{load_cifar10, Augment, Dataset, Normalization, Split, SynthSpec};
use multiresnet::model::{build_network, load_checkpoint, save_checkpoint, BlockKind, NetworkConfig, Topology};
use multiresnet::paths::{
    compare_scaling, effective_range, effective_range_csv, empirical_path_gradient, fit_decay, gradient_contribution,
    lesion_sweep, toy_linear_network,
};
use multiresnet::sim::{
    self, parse_kv, parse_reference_csv, reference_csv, sim_result_csv, simulate_step, speedup_csv, speedup_markdown,
    speedup_percent, CostModel, Observation, SimScenario, Strategy,
};
use multiresnet::train::{self as trainer, evaluate as eval_error, HyperParams};

use crate::settings::{Run, Settings};
use crate::{
    flags, AnalyzeArgs, CalibrateArgs, CostArgs, DataArgs, EvalArgs, PathGradientArgs, SimulateArgs, SpeedupArgs,
    TrainArgs,
};

const DATA_DEFAULTS: [(&str, &str); 8] = [
    ("dataset", "synth"),
    ("data_dir", ""),
    ("samples", "4000"),
    ("test_samples", "800"),
    ("classes", "2"),
    ("image_size", "8"),
    ("noise", "0.25"),
    ("data_seed", "0"),
];

const COST_DEFAULTS: [(&str, &str); 8] = [
    ("cost", ""),
    ("t_fn", ""),
    ("t_fixed", ""),
    ("activation_bytes", ""),
    ("param_bytes_per_fn", ""),
    ("bandwidth", ""),
    ("latency", ""),
    ("warp", ""),
];

fn with<'a>(base: &[(&'a str, &'a str)], extra: &[(&'a str, &'a str)]) -> Vec<(&'a str, &'a str)> {
    base.iter().chain(extra).copied().collect()
}

fn data_flags(d: &DataArgs) -> Vec<(&'static str, Option<String>)> {
    flags!(d; dataset, data_dir, samples, test_samples, classes, image_size, noise, data_seed)
}

fn cost_flags(c: &CostArgs) -> Vec<(&'static str, Option<String>)> {
    flags!(c; cost, t_fn, t_fixed, activation_bytes, param_bytes_per_fn, bandwidth, latency, warp)
}

/// Train and test splits described by the data keys.
fn load_data(s: &Settings) -> Result<(Dataset, Dataset)> {
    match s.raw("dataset") {
        "synth" => {
            let all = SynthSpec::new(s.get("samples")?, s.get("classes")?, s.get("image_size")?)
                .with_noise(s.get("noise")?)
                .generate(s.get("data_seed")?)?;
            let (train, test) = all.split_off(s.get("test_samples")?)?;
            Ok((train, test))
        }
        "cifar10" => {
            let dir = s.path("data_dir").context("dataset cifar10 needs --data-dir")?;
            Ok((load_cifar10(&dir, Split::Train)?, load_cifar10(&dir, Split::Test)?))
        }
        other => bail!("unknown dataset `{other}` (expected synth or cifar10)"),
    }
}

pub fn train(out: &Path, a: TrainArgs) -> Result<PathBuf> {
    let defaults = with(
        &DATA_DEFAULTS,
        &[
            ("depth", "14"),
            ("k", "2"),
            ("w", "1"),
            ("block", "basic"),
            ("topology", "residual"),
            ("epochs", "10"),
            ("batch", "32"),
            ("lr", "0.1"),
            ("momentum", "0.9"),
            ("weight_decay", "0.0001"),
            ("lr_decay", "0.1"),
            ("milestones", "0.5,0.75"),
            ("augment", "auto"),
            ("seed", "0"),
        ],
    );
    let mut overrides = data_flags(&a.data);
    overrides.extend(flags!(a; depth, k, w, block, topology, epochs, batch, lr, momentum, weight_decay, lr_decay, milestones, augment, seed));
    let s = Settings::resolve("train", &defaults, a.config.as_deref(), overrides)?;

    let kind = BlockKind::parse(s.raw("block"))?;
    let cfg = NetworkConfig::from_depth(s.get("depth")?, s.get("k")?, s.get("w")?, kind)?
        .with_topology(Topology::parse(s.raw("topology"))?);
    let augment = match s.raw("augment") {
        "on" => true,
        "off" => false,
        "auto" => s.raw("dataset") == "cifar10",
        other => bail!("augment must be on, off or auto, got `{other}`"),
    };
    let hyper = HyperParams {
        lr: s.get("lr")?,
        milestones: s.list("milestones")?,
        lr_decay: s.get("lr_decay")?,
        momentum: s.get("momentum")?,
        weight_decay: s.get("weight_decay")?,
        batch_size: s.get("batch")?,
        epochs: s.get("epochs")?,
        seed: s.get("seed")?,
        augment: augment.then(Augment::default),
        ..HyperParams::default()
    };
    hyper.validate()?;
    let (train_set, test_set) = load_data(&s)?;
    let cfg = cfg.with_classes(train_set.num_classes()).with_input(train_set.shape());
    let network = build_network(&cfg, hyper.seed)?;

    let mut run = Run::start(out, "train", s)?;
    let trained = trainer::train(network, &train_set, Some(&test_set), &hyper)?;
    let ckpt = run.dir.join("checkpoint.bin");
    save_checkpoint(&ckpt, &trained.network, &trained.normalization.to_tensors())?;
    run.artifact("checkpoint.bin");
    run.write("train_log.csv", trained.log.metrics_csv())?;
    run.write("steps.csv", trained.log.steps_csv())?;
    run.result("parameters", trained.network.count_parameters());
    if let Some(last) = trained.log.epochs.last() {
        run.result("final_train_err", last.train_err);
        run.result("final_test_err", last.test_err.unwrap_or(f64::NAN));
    }
    let secs: Vec<String> = trained.log.epochs.iter().map(|e| format!("{:.3}", e.seconds)).collect();
    run.timing("epoch_seconds", secs.join(","));
    run.finish()
}

fn eval_settings(sub: &str, a: &EvalArgs) -> Result<Settings> {
    let defaults = with(&DATA_DEFAULTS, &[("checkpoint", ""), ("seed", "0")]);
    let mut overrides = data_flags(&a.data);
    overrides.extend(flags!(a; checkpoint));
    Settings::resolve(sub, &defaults, a.config.as_deref(), overrides)
}

fn load_trained(s: &Settings) -> Result<(multiresnet::model::Network, Option<Normalization>)> {
    let path = s.path("checkpoint").context("--checkpoint is required")?;
    let ckpt = load_checkpoint(&path)?;
    let norm = Normalization::from_tensors(&ckpt.extras);
    Ok((ckpt.network, norm))
}

fn check_fit(net: &multiresnet::model::Network, data: &Dataset) -> Result<()> {
    let cfg = net.config();
    ensure!(
        cfg.input_shape == data.shape() && cfg.num_classes == data.num_classes(),
        "checkpoint expects {:?} images and {} classes, dataset has {:?} and {}",
        cfg.input_shape,
        cfg.num_classes,
        data.shape(),
        data.num_classes()
    );
    Ok(())
}

pub fn evaluate(out: &Path, a: EvalArgs) -> Result<PathBuf> {
    let s = eval_settings("evaluate", &a)?;
    let (net, norm) = load_trained(&s)?;
    let (train_set, test_set) = load_data(&s)?;
    check_fit(&net, &test_set)?;
    let mut csv = String::from("split,samples,error\n");
    let mut errors = Vec::new();
    for (name, ds) in [("train", &train_set), ("test", &test_set)] {
        let err = eval_error(&net, ds, norm.as_ref())?;
        let _ = writeln!(csv, "{name},{},{err}", ds.len());
        errors.push(err);
    }
    let mut run = Run::start(out, "evaluate", s)?;
    run.write("eval.csv", csv)?;
    run.result("test_err", errors[1]);
    run.finish()
}

pub fn lesion(out: &Path, a: EvalArgs) -> Result<PathBuf> {
    let s = eval_settings("lesion", &a)?;
    let (net, norm) = load_trained(&s)?;
    let (_, test_set) = load_data(&s)?;
    check_fit(&net, &test_set)?;
    let report = lesion_sweep(&net, &test_set, norm.as_ref())?;
    let mut run = Run::start(out, "lesion", s)?;
    run.write("lesion.csv", report.to_csv())?;
    run.result("baseline_err", report.baseline);
    run.result("max_abs_delta", report.max_delta());
    run.result("mean_delta", report.mean_delta());
    run.finish()
}

pub fn analyze(out: &Path, a: AnalyzeArgs) -> Result<PathBuf> {
    let defaults = [
        ("n", "18"),
        ("k", "1"),
        ("r", "0.5"),
        ("p", "0.95"),
        ("c", "2"),
        ("seed", "0"),
    ];
    let s = Settings::resolve("analyze", &defaults, a.config.as_deref(), flags!(a; n, k, r, p, c))?;
    let (n, k, r, p, c): (usize, usize, f64, f64, usize) =
        (s.get("n")?, s.get("k")?, s.get("r")?, s.get("p")?, s.get("c")?);
    ensure!(p > 0.0 && p < 1.0, "coverage p = {p} outside (0, 1)");
    let curve = gradient_contribution(n, k, r)?;
    let range = effective_range(&curve, p)?;
    let mut rows = vec![("curve".to_string(), range.clone())];
    let mut scaling = None;
    if c > 1 {
        let rep = compare_scaling(n, c, r, p)?;
        rows.push((format!("n{n}_k1"), rep.base.clone()));
        rows.push((format!("n{}_k1", c * n), rep.deep.clone()));
        rows.push((format!("n{n}_k{c}"), rep.wide.clone()));
        scaling = Some(rep);
    }
    let mut run = Run::start(out, "analyze", s)?;
    run.write("distribution.csv", curve.to_csv())?;
    run.write("effective_range.csv", effective_range_csv(&rows))?;
    run.result("mode", curve.mode());
    run.result("range", format!("{}..{}", range.a, range.b));
    if let Some(rep) = scaling {
        run.result("deeper_is_sublinear", rep.is_sublinear());
        if let Some(ratio) = rep.ratio() {
            run.result("deep_over_linear", ratio);
        }
    }
    run.finish()
}

pub fn path_gradient(out: &Path, a: PathGradientArgs) -> Result<PathBuf> {
    let defaults = with(
        &DATA_DEFAULTS,
        &[
            ("checkpoint", ""),
            ("toy_factor", "0.5"),
            ("toy_blocks", "4"),
            ("toy_k", "2"),
            ("max_depth", "8"),
            ("paths", "8"),
            ("images", "8"),
            ("seed", "0"),
        ],
    );
    let mut overrides = data_flags(&a.data);
    overrides.extend(flags!(a; checkpoint, toy_factor, toy_blocks, toy_k, max_depth, paths, images, seed));
    let s = Settings::resolve("path-gradient", &defaults, a.config.as_deref(), overrides)?;
    let (_, test_set) = load_data(&s)?;
    let (net, norm) = if s.path("checkpoint").is_some() {
        let (net, norm) = load_trained(&s)?;
        check_fit(&net, &test_set)?;
        (net, norm)
    } else {
        // raw non-negative pixels keep the toy network's ReLUs transparent
        let net = toy_linear_network(
            s.get("toy_blocks")?,
            s.get("toy_k")?,
            s.get("toy_factor")?,
            test_set.num_classes(),
            test_set.shape(),
            s.get("seed")?,
        )?;
        (net, None)
    };
    let images: usize = s.get("images")?;
    ensure!(
        images >= 1 && images <= test_set.len(),
        "images must lie in 1..={}",
        test_set.len()
    );
    let idx: Vec<usize> = (0..images).collect();
    let (batch, labels) = test_set.batch(&idx, norm.as_ref(), None);
    let max_depth: usize = s.get("max_depth")?;
    let (paths, seed): (usize, u64) = (s.get("paths")?, s.get("seed")?);
    let mut points = Vec::new();
    let mut csv = String::from("depth,mean,std,relative\n");
    for d in 0..=max_depth {
        let g = empirical_path_gradient(&net, &batch, &labels, d, paths, seed)?;
        let rel = g.mean
            / points
                .first()
                .map_or(g.mean, |p: &multiresnet::paths::PathGradient| p.mean);
        let _ = writeln!(csv, "{d},{},{},{rel}", g.mean, g.std);
        points.push(g);
    }
    let mut run = Run::start(out, "path-gradient", s)?;
    run.write("path_gradient.csv", csv)?;
    if let Ok(r) = fit_decay(&points) {
        run.result("fitted_decay", r);
    }
    run.finish()
}

/// Cost model from defaults, then the `cost` file, then individual keys.
fn resolve_cost(s: &Settings) -> Result<CostModel> {
    let mut model = CostModel::default();
    if let Some(path) = s.path("cost") {
        let text = fs::read_to_string(&path).with_context(|| format!("reading cost model {}", path.display()))?;
        model = CostModel::from_kv(parse_kv(&text)?, &model)?;
    }
    let keys = [
        "t_fn",
        "t_fixed",
        "activation_bytes",
        "param_bytes_per_fn",
        "bandwidth",
        "latency",
        "warp",
    ];
    let set: BTreeMap<String, String> = keys
        .iter()
        .filter(|k| !s.raw(k).is_empty())
        .map(|k| (k.to_string(), s.raw(k).to_string()))
        .collect();
    Ok(CostModel::from_kv(set, &model)?)
}

pub fn simulate(out: &Path, a: SimulateArgs) -> Result<PathBuf> {
    let defaults = with(
        &COST_DEFAULTS,
        &[
            ("blocks", ""),
            ("depth", ""),
            ("k", "2"),
            ("batch", "32"),
            ("workers", "2"),
            ("strategy", "model"),
            ("seed", "0"),
        ],
    );
    let mut overrides = cost_flags(&a.cost);
    overrides.extend(flags!(a; blocks, depth, k, batch, workers, strategy));
    let s = Settings::resolve("simulate", &defaults, a.config.as_deref(), overrides)?;
    let cost = resolve_cost(&s)?;
    let mut keys: BTreeMap<String, String> = ["blocks", "depth", "k", "batch", "workers", "strategy"]
        .iter()
        .filter(|k| !s.raw(k).is_empty())
        .map(|k| (k.to_string(), s.raw(k).to_string()))
        .collect();
    let scenario = SimScenario::from_kv(&mut keys)?;
    let result = simulate_step(&scenario, &cost)?;
    let mut run = Run::start(out, "simulate", s)?;
    run.write("sim.csv", sim_result_csv(&[(scenario, result.clone())]))?;
    run.write("cost_model.txt", cost.to_kv())?;
    run.result("step_ms", result.step_time * 1e3);
    run.finish()
}

pub fn calibrate(out: &Path, a: CalibrateArgs) -> Result<PathBuf> {
    let defaults = [
        ("observations", ""),
        ("fit_batches", "128"),
        ("warp", "32"),
        ("seed", "0"),
    ];
    let s = Settings::resolve(
        "calibrate",
        &defaults,
        a.config.as_deref(),
        flags!(a; observations, fit_batches, warp),
    )?;
    let pairs = match s.path("observations") {
        Some(p) => {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            parse_reference_csv(&text, &p.display().to_string())?
        }
        None => parse_reference_csv(reference_csv(), "bundled step times")?,
    };
    let fit_batches: Vec<usize> = s.list("fit_batches")?;
    let initial = CostModel {
        warp: s.get("warp")?,
        ..CostModel::default()
    };
    let fitted: Vec<&sim::ReferencePair> = pairs
        .iter()
        .filter(|p| fit_batches.is_empty() || fit_batches.contains(&p.batch))
        .collect();
    let obs: Vec<Observation> = fitted
        .iter()
        .map(|p| p.observations())
        .collect::<multiresnet::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let fit = sim::calibrate(&obs, &initial)?;

    let mut residuals = String::from("batch,depth,k,strategy,observed_ms,predicted_ms,residual_ms\n");
    for (o, r) in obs.iter().zip(&fit.residuals) {
        let _ = writeln!(
            residuals,
            "{},{},{},{},{},{},{}",
            o.scenario.batch,
            o.scenario.depth(),
            o.scenario.k,
            o.scenario.strategy.name(),
            o.seconds * 1e3,
            (o.seconds + r) * 1e3,
            r * 1e3
        );
    }
    let mut predictions = String::from(
        "baseline_depth,depth,k,batch,baseline_ms,predicted_baseline_ms,ms,predicted_ms,speedup_pct,predicted_speedup_pct,fitted\n",
    );
    for p in &pairs {
        let (b, c) = p.scenarios()?;
        let bt = simulate_step(&b, &fit.model)?.step_time * 1e3;
        let ct = simulate_step(&c, &fit.model)?.step_time * 1e3;
        let observed = p.speedup_pct.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            predictions,
            "{},{},{},{},{},{bt},{},{ct},{observed},{},{}",
            p.baseline_depth,
            p.depth,
            p.k,
            p.batch,
            p.baseline_ms,
            p.ms,
            speedup_percent(bt, ct),
            fit_batches.is_empty() || fit_batches.contains(&p.batch)
        );
    }
    let mut run = Run::start(out, "calibrate", s)?;
    run.write("cost_model.txt", fit.model.to_kv())?;
    run.write("residuals.csv", residuals)?;
    run.write("predictions.csv", predictions)?;
    run.result("rms_ms", fit.rms() * 1e3);
    run.finish()
}

pub fn speedup_table(out: &Path, a: SpeedupArgs) -> Result<PathBuf> {
    let defaults = with(
        &COST_DEFAULTS,
        &[
            ("depth", ""),
            ("ks", ""),
            ("batches", ""),
            ("workers", "2"),
            ("seed", "0"),
        ],
    );
    let mut overrides = cost_flags(&a.cost);
    overrides.extend(flags!(a; depth, ks, batches, workers));
    let s = Settings::resolve("speedup-table", &defaults, a.config.as_deref(), overrides)?;
    let cost = resolve_cost(&s)?;
    let pairs: Vec<(SimScenario, SimScenario)> = match s.opt::<usize>("depth")? {
        None => parse_reference_csv(reference_csv(), "bundled step times")?
            .iter()
            .map(|p| p.scenarios())
            .collect::<multiresnet::Result<_>>()?,
        Some(depth) => {
            let (ks, batches): (Vec<usize>, Vec<usize>) = (s.list("ks")?, s.list("batches")?);
            ensure!(
                !ks.is_empty() && !batches.is_empty(),
                "--depth needs --ks and --batches"
            );
            let workers: usize = s.get("workers")?;
            let mut out = Vec::new();
            for &batch in &batches {
                for &k in &ks {
                    let cand = SimScenario::from_depth(depth, k, batch, workers, Strategy::Model)?;
                    let base = SimScenario::new(cand.functions(), 1, batch, workers, Strategy::Data);
                    out.push((base, cand));
                }
            }
            out
        }
    };
    let rows = sim::speedup_table(&pairs, &cost)?;
    let mut run = Run::start(out, "speedup-table", s)?;
    run.write("speedup.csv", speedup_csv(&rows))?;
    run.write("speedup.md", speedup_markdown(&rows))?;
    run.write("cost_model.txt", cost.to_kv())?;
    run.finish()
}
