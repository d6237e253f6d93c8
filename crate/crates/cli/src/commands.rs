use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use metacal::autodiff::GradCheckOptions;
use metacal::checkpoint::{load_params, save_params};
use metacal::checks::{
    dece_grad_check, hypergrad_suite, op_suite, random_prediction_batch, HypergradSuiteOptions, NamedCheck,
};
use metacal::dece::DeceConfig;
use metacal::fidelity::{metric_row, rows_to_csv, summarize, FidelitySummary, MetricRow};
use metacal::io::{read_to_string, write_atomic};
use metacal::losses::HyperParams;
use metacal::meta::{
    prepare_data, retrain_with_fixed_hparams, run_training, write_report, MetaConfig, MetaObjective, RunOutput,
    RunReport, Splits, TrainConfig, Variant,
};
use metacal::metrics::{ece_with_bins, fit_temperature, nll_at_temperature, PredictionBatch, TemperatureGrid};
use metacal::nn::ModelParams;
use metacal::stats::median;
use metacal::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{
    AblateArgs, ConfigArgs, GradCheckArgs, HypergradCheckArgs, MetricCompareArgs, RetrainArgs, RunArgs, TempScaleArgs,
    TrainArgs,
};
use crate::error::{CliError, Result};

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(metacal::Error::from)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Merges the config file, `--set` overrides and dedicated flags, in that
/// order.
pub fn load_config(args: &ConfigArgs, extra: &[String]) -> Result<TrainConfig> {
    let base = match &args.config {
        Some(path) => {
            let text = read_to_string(path).map_err(|e| CliError::Config(e.to_string()))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => json!({}),
    };
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    overrides.extend_from_slice(extra);
    Ok(TrainConfig::with_overrides(base, &overrides)?)
}

fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..cfg.clone() }
}

/// Writes every artifact of one run into `dir`.
fn write_run(out: &RunOutput, dir: &Path) -> Result<()> {
    write_report(&out.report, dir)?;
    let mut cfg = out.report.config.to_json()?;
    cfg.push('\n');
    write_atomic(&dir.join("config.json"), cfg.as_bytes())?;
    save_params(&out.params, &dir.join("model.json"))?;
    if let Some(om) = &out.omega {
        write_atomic(&dir.join("omega.json"), om.to_json()?.as_bytes())?;
    }
    for (epoch, params) in &out.snapshots {
        save_params(params, &dir.join("checkpoints").join(format!("epoch-{epoch:04}.json")))?;
    }
    Ok(())
}

fn print_run(label: &str, r: &RunReport) {
    let mut line = format!(
        "{label}: test error {:.4}, ECE {:.4}, DECE {:.4}, NLL {:.4}",
        r.test.error, r.test.ece, r.test.dece, r.test.nll
    );
    if let Some(d) = &r.corrupted_domains {
        let _ = write!(line, ", corrupted-domain ECE {:.4}", d.mean_ece);
    }
    println!("{line}");
}

#[derive(Debug, Serialize)]
struct SeedRow {
    seed: u64,
    test_error: f64,
    test_ece: f64,
    test_dece: f64,
    test_nll: f64,
    ece_after_temperature: f64,
    corrupted_domain_ece: Option<f64>,
}

impl SeedRow {
    fn new(r: &RunReport) -> Self {
        Self {
            seed: r.seed,
            test_error: r.test.error,
            test_ece: r.test.ece,
            test_dece: r.test.dece,
            test_nll: r.test.nll,
            ece_after_temperature: r.test.ece_after_temperature,
            corrupted_domain_ece: r.corrupted_domains.as_ref().map(|d| d.mean_ece),
        }
    }
}

fn medians(rows: &[SeedRow]) -> Result<Value> {
    let m = |f: fn(&SeedRow) -> f64| median(&rows.iter().map(f).collect::<Vec<_>>());
    let domains: Option<Vec<f64>> = rows.iter().map(|r| r.corrupted_domain_ece).collect();
    Ok(json!({
        "test_error": m(|r| r.test_error)?,
        "test_ece": m(|r| r.test_ece)?,
        "test_dece": m(|r| r.test_dece)?,
        "test_nll": m(|r| r.test_nll)?,
        "ece_after_temperature": m(|r| r.ece_after_temperature)?,
        "corrupted_domain_ece": match domains {
            Some(d) => Some(median(&d)?),
            None => None,
        },
    }))
}

pub fn gen_data(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = load_config(args, &[])?;
    let data = prepare_data(&cfg)?;
    let pool = data.train.concat(&data.val)?.concat(&data.metaval)?;
    pool.save_csv(&out.join("train.csv"))?;
    data.test.save_csv(&out.join("test.csv"))?;
    write_json(
        &out.join("data.json"),
        &json!({ "seed": cfg.seed, "data": cfg.data, "summary": data.summary() }),
    )?;
    println!(
        "wrote {} training and {} test samples to {}",
        pool.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

fn train_seeds(cfg: &TrainConfig, seeds: &[u64], out: &Path, label: &str) -> Result<Vec<SeedRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let cfg = with_seed(cfg, seed);
        let run = run_training(&cfg, &prepare_data(&cfg)?)?;
        write_run(&run, &out.join(format!("seed-{seed}")))?;
        print_run(&format!("{label}seed {seed}"), &run.report);
        rows.push(SeedRow::new(&run.report));
    }
    Ok(rows)
}

pub fn train(args: &TrainArgs, out: &Path) -> Result<()> {
    let extra: Vec<String> = if args.multi_domain {
        [
            "meta.enabled=true",
            "meta.multi_domain=true",
            "eval.corrupted_domains=true",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    } else {
        Vec::new()
    };
    let cfg = load_config(&args.config, &extra)?;
    if args.seeds.is_empty() {
        let run = run_training(&cfg, &prepare_data(&cfg)?)?;
        write_run(&run, out)?;
        print_run(&format!("seed {}", cfg.seed), &run.report);
        return Ok(());
    }
    let rows = train_seeds(&cfg, &args.seeds, out, "")?;
    write_json(
        &out.join("summary.json"),
        &json!({ "runs": rows, "median": medians(&rows)? }),
    )?;
    Ok(())
}

pub fn ablate(args: &AblateArgs, out: &Path) -> Result<()> {
    let variants = args
        .variants
        .iter()
        .map(|v| Variant::parse(v))
        .collect::<metacal::Result<Vec<_>>>()?;
    if args.seeds.is_empty() {
        return Err(CliError::Usage("--seeds must not be empty".into()));
    }
    let mut csv = String::from("variant,seed,test_error,test_ece,test_dece,test_nll,ece_after_temperature\n");
    let mut summary = Vec::new();
    for v in variants {
        let cfg = load_config(&args.config, &v.overrides())?;
        let rows = train_seeds(&cfg, &args.seeds, &out.join(v.name()), &format!("{} ", v.name()))?;
        for r in &rows {
            let _ = writeln!(
                csv,
                "{},{},{:?},{:?},{:?},{:?},{:?}",
                v.name(),
                r.seed,
                r.test_error,
                r.test_ece,
                r.test_dece,
                r.test_nll,
                r.ece_after_temperature
            );
        }
        let med = medians(&rows)?;
        println!(
            "{} ({}): median test ECE {:.4}, error {:.4}",
            v.name(),
            v.description(),
            med["test_ece"].as_f64().unwrap_or(f64::NAN),
            med["test_error"].as_f64().unwrap_or(f64::NAN)
        );
        summary.push(json!({ "variant": v.name(), "description": v.description(), "median": med, "runs": rows }));
    }
    write_atomic(&out.join("ablation.csv"), csv.as_bytes())?;
    write_json(&out.join("ablation.json"), &summary)?;
    Ok(())
}

/// Config, final parameters and data of a run directory.
struct LoadedRun {
    cfg: TrainConfig,
    params: ModelParams,
    data: Splits,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let report = RunReport::from_json(&read_to_string(&dir.join("report.json"))?)?;
    let params = load_params(&dir.join("model.json"))?;
    let data = prepare_data(&report.config)?;
    Ok(LoadedRun {
        cfg: report.config,
        params,
        data,
    })
}

fn snapshot_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let ck = dir.join("checkpoints");
    if !ck.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&ck)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", ck.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    Ok(paths)
}

fn batch_rows(
    name: &str,
    params: &ModelParams,
    data: &Splits,
    size: usize,
    cfg: &DeceConfig,
) -> Result<Vec<MetricRow>> {
    let test = &data.test;
    let logits = params.predict(test.x())?;
    let k = logits.shape()[1];
    let mut rows = Vec::new();
    for (b, start) in (0..test.len()).step_by(size).enumerate() {
        let end = (start + size).min(test.len());
        if end - start < size {
            break;
        }
        let z = Tensor::matrix(end - start, k, logits.data()[start * k..end * k].to_vec())?;
        rows.push(metric_row(name, b, &z, &test.y()[start..end], cfg)?);
    }
    Ok(rows)
}

fn maybe_summary(rows: &[MetricRow]) -> Result<Option<FidelitySummary>> {
    if rows.len() < 2 {
        return Ok(None);
    }
    Ok(Some(summarize(rows)?))
}

pub fn metric_compare(args: &MetricCompareArgs, out: &Path) -> Result<()> {
    let cfg = DeceConfig::new(args.bins, args.tau_a, args.tau_b)?;
    if args.batch_size == 0 || args.classes < 2 {
        return Err(CliError::Usage(
            "--batch-size must be positive and --classes at least 2".into(),
        ));
    }
    if args.run.is_none() && args.random_batches == 0 {
        return Err(CliError::Usage(
            "nothing to compare: pass --run or a positive --random-batches".into(),
        ));
    }
    let mut random = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    for b in 0..args.random_batches {
        let (z, y) = random_prediction_batch(&mut rng, args.batch_size, args.classes)?;
        random.push(metric_row("random", b, &z, &y, &cfg)?);
    }
    let mut trained = Vec::new();
    if let Some(dir) = &args.run {
        let run = load_run(dir)?;
        for path in snapshot_paths(dir)? {
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            trained.extend(batch_rows(
                &name,
                &load_params(&path)?,
                &run.data,
                args.batch_size,
                &cfg,
            )?);
        }
        trained.extend(batch_rows("final", &run.params, &run.data, args.batch_size, &cfg)?);
    }
    let all: Vec<MetricRow> = random.iter().chain(&trained).cloned().collect();
    write_atomic(&out.join("compare.csv"), rows_to_csv(&all)?.as_bytes())?;
    let summary = json!({
        "dece": cfg,
        "random": maybe_summary(&random)?,
        "checkpoints": maybe_summary(&trained)?,
        "overall": maybe_summary(&all)?,
    });
    write_json(&out.join("compare_summary.json"), &summary)?;
    if let Some(s) = maybe_summary(&all)? {
        println!(
            "{} batches: pearson {:.4}, spearman {:.4}, mean DECE {:.4}, mean ECE {:.4}",
            s.count, s.pearson_dece, s.spearman_dece, s.mean_dece, s.mean_ece
        );
    }
    Ok(())
}

fn temperature_grid(min: f64, max: f64, step: f64) -> Result<TemperatureGrid> {
    let centi = |v: f64, name: &str| -> Result<u32> {
        let c = (v * 100.0).round();
        if !(v.is_finite() && c >= 0.0 && c <= u32::MAX as f64 && (c / 100.0 - v).abs() < 1e-9) {
            return Err(CliError::Usage(format!(
                "{name} must be a non-negative multiple of 0.01, got {v}"
            )));
        }
        Ok(c as u32)
    };
    let grid = TemperatureGrid {
        start_centi: centi(min, "--t-min")?,
        stop_centi: centi(max, "--t-max")?,
        step_centi: centi(step, "--t-step")?,
    };
    grid.points().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(grid)
}

fn scaled(logits: &Tensor, t: f64) -> Tensor {
    logits.map(|v| v / t)
}

pub fn reliability(args: &RunArgs, out: &Path) -> Result<()> {
    let run = load_run(&args.run)?;
    let bins = run.cfg.eval.bins;
    let test = &run.data.test;
    let logits = run.params.predict(test.x())?;
    let (ece, stats) = ece_with_bins(&PredictionBatch::from_logits(&logits, test.y().to_vec())?, bins)?;
    let fit = fit_temperature(
        &run.params.predict(run.data.val.x())?,
        run.data.val.y(),
        TemperatureGrid::default(),
    )?;
    let (ece_t, stats_t) = ece_with_bins(
        &PredictionBatch::from_logits(&scaled(&logits, fit.temperature), test.y().to_vec())?,
        bins,
    )?;
    write_atomic(&out.join("reliability.csv"), stats.to_csv().as_bytes())?;
    write_atomic(&out.join("reliability_temperature.csv"), stats_t.to_csv().as_bytes())?;
    write_json(
        &out.join("reliability.json"),
        &json!({ "bins": bins, "ece": ece, "temperature": fit.temperature, "ece_after_temperature": ece_t }),
    )?;
    println!("ECE {ece:.4}; at T = {:.2}, ECE {ece_t:.4}", fit.temperature);
    Ok(())
}

pub fn temp_scale(args: &TempScaleArgs, out: &Path) -> Result<()> {
    let grid = temperature_grid(args.t_min, args.t_max, args.t_step)?;
    let run = load_run(&args.run.run)?;
    let bins = run.cfg.eval.bins;
    let val_logits = run.params.predict(run.data.val.x())?;
    let fit = fit_temperature(&val_logits, run.data.val.y(), grid)?;
    let test = &run.data.test;
    let logits = run.params.predict(test.x())?;
    let ece_at = |t: f64| -> Result<f64> {
        Ok(ece_with_bins(
            &PredictionBatch::from_logits(&scaled(&logits, t), test.y().to_vec())?,
            bins,
        )?
        .0)
    };
    let summary = json!({
        "temperature": fit.temperature,
        "val_nll_before": nll_at_temperature(&val_logits, run.data.val.y(), 1.0)?,
        "val_nll_after": fit.nll,
        "test_nll_before": nll_at_temperature(&logits, test.y(), 1.0)?,
        "test_nll_after": nll_at_temperature(&logits, test.y(), fit.temperature)?,
        "test_ece_before": ece_at(1.0)?,
        "test_ece_after": ece_at(fit.temperature)?,
        "grid": grid,
    });
    write_json(&out.join("temperature.json"), &summary)?;
    println!(
        "T = {:.2}: test ECE {:.4} -> {:.4}",
        fit.temperature,
        summary["test_ece_before"].as_f64().unwrap_or(f64::NAN),
        summary["test_ece_after"].as_f64().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn report_checks(checks: &[NamedCheck], path: &Path) -> Result<()> {
    for c in checks {
        println!(
            "{:<28} max rel error {:.3e} (tol {:.0e}) {}",
            c.name,
            c.max_rel_error,
            c.tol,
            if c.passed { "pass" } else { "FAIL" }
        );
    }
    let passed = checks.iter().all(|c| c.passed);
    write_json(path, &json!({ "passed": passed, "checks": checks }))?;
    if passed {
        Ok(())
    } else {
        let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(CliError::Runtime(format!("checks failed: {}", failed.join(", "))))
    }
}

pub fn grad_check(args: &GradCheckArgs, out: &Path) -> Result<()> {
    let opts = GradCheckOptions {
        step: args.step,
        tol: args.tol,
        floor: args.floor,
    };
    let mut checks = op_suite(args.seed, opts)?;
    let dece_opts = GradCheckOptions {
        tol: args.dece_tol,
        ..opts
    };
    checks.push(dece_grad_check(args.seed, &DeceConfig::default(), dece_opts)?);
    report_checks(&checks, &out.join("grad_check.json"))
}

pub fn hypergrad_check(args: &HypergradCheckArgs, out: &Path) -> Result<()> {
    let objective: MetaObjective = serde_json::from_value(Value::String(args.objective.clone()))
        .map_err(|_| CliError::Usage(format!("unknown objective `{}`", args.objective)))?;
    let meta = MetaConfig {
        objective,
        ..MetaConfig::default()
    };
    let opts = HypergradSuiteOptions {
        alpha: args.alpha,
        step: args.step,
        tol: args.tol,
        floor: args.floor,
    };
    let checks = hypergrad_suite(args.seed, &meta, &DeceConfig::default(), opts)?;
    report_checks(&checks, &out.join("hypergrad_check.json"))
}

pub fn retrain(args: &RetrainArgs, out: &Path) -> Result<()> {
    let text = read_to_string(&args.omega).map_err(|e| CliError::Config(e.to_string()))?;
    let omega =
        HyperParams::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", args.omega.display())))?;
    let kind = omega.kind.name();
    let cfg = load_config(&args.config, &[format!("meta.hyper={kind}")])?;
    let run = retrain_with_fixed_hparams(&omega, &cfg, &prepare_data(&cfg)?)?;
    write_run(&run, out)?;
    print_run(&format!("retrain seed {}", cfg.seed), &run.report);
    Ok(())
}
