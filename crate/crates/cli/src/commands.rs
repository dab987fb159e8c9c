use std::fs;
use std::path::{Path, PathBuf};

use chrono::Utc;
use gmrl_core::data::{generate_synthetic, load_dataset, parse_timestamp, format_timestamp, save_csv, DataFormat, TtsDataset};
use gmrl_core::model::{diff_keys, load_checkpoint, save_checkpoint, total_loss, DataDims, ForecastReport, GmrlModel, Manifest};
use gmrl_core::tensor::{grad_check_piecewise, GradCheckOptions, Tensor};
use gmrl_core::trainer::{
    baseline_forecast, cluster_recovery, collect_diagnostics, evaluate, predict_window, run_ablation, train,
    write_history_jsonl, BaselineKind, PreparedData, Variant,
};
use gmrl_core::{GmrlError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::{Cli, Command};

/// A fresh `<parent>/<command>-<UTC timestamp>` directory.
struct RunDir {
    path: PathBuf,
}

impl RunDir {
    fn create(parent: &Path, command: &str) -> Result<Self> {
        let stamp = Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = parent.join(format!("{command}-{stamp}"));
        let mut path = base.clone();
        let mut n = 1;
        while path.exists() {
            n += 1;
            path = PathBuf::from(format!("{}-{n}", base.display()));
        }
        fs::create_dir_all(&path).map_err(|e| io_err(&path, e))?;
        Ok(RunDir { path })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, contents).map_err(|e| io_err(&p, e))
    }

    fn write_json(&self, name: &str, value: &impl serde::Serialize) -> Result<()> {
        self.write(name, serde_json::to_string_pretty(value)? + "\n")
    }

    fn create_file(&self, name: &str) -> Result<fs::File> {
        let p = self.file(name);
        fs::File::create(&p).map_err(|e| io_err(&p, e))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> GmrlError {
    GmrlError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn run(cli: Cli) -> Result<u8> {
    let common = &cli.common;
    let mut cfg = RunConfig::load(common.config.as_deref(), std::env::vars())?;
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    if let Some(seed) = common.seed {
        match (&cli.command, cfg.data.synth.as_mut()) {
            (Command::Synth, Some(spec)) => spec.seed = seed,
            _ => cfg.train.seed = seed,
        }
    }
    if let Some(v) = &common.variant {
        if matches!(cli.command, Command::Ablate) {
            cfg.ablation.suite = v.split(',').map(|s| s.trim().to_string()).collect();
        } else {
            let variant: Variant = v.parse()?;
            let (m, t) = variant.apply(&cfg.model, &cfg.train);
            cfg.model = m;
            cfg.train = t;
        }
    }
    if common.threads == 0 {
        return Err(GmrlError::Config("--threads must be at least 1".into()));
    }
    cfg.validate()?;

    match &cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Evaluate { checkpoint } => cmd_evaluate(&cfg, checkpoint),
        Command::Forecast { checkpoint, input } => cmd_forecast(&cfg, checkpoint, input.as_deref()),
        Command::Synth => cmd_synth(&cfg),
        Command::Gradcheck => cmd_gradcheck(&cfg),
        Command::Ablate => cmd_ablate(&cfg, common.threads),
    }
}

/// The configured dataset and, for synthetic data, its component labels.
fn load_data(cfg: &RunConfig) -> Result<(TtsDataset, Option<Vec<usize>>)> {
    match (&cfg.data.path, &cfg.data.synth) {
        (Some(_), Some(_)) => Err(GmrlError::Config("set only one of data.path and data.synth".into())),
        (Some(p), None) => {
            let format = cfg.data.format.unwrap_or_else(|| DataFormat::from_path(p));
            Ok((load_dataset(p, format)?, None))
        }
        (None, Some(spec)) => {
            let (ds, labels) = generate_synthetic(spec)?;
            Ok((ds, Some(labels)))
        }
        (None, None) => Err(GmrlError::Config("set data.path or data.synth".into())),
    }
}

fn prepare(cfg: &RunConfig, ds: &TtsDataset) -> Result<PreparedData> {
    PreparedData::new(
        ds,
        cfg.split_for(ds.steps()),
        cfg.model.input_len,
        cfg.model.horizon,
        cfg.data.norm,
    )
}

fn dims_of(ds: &TtsDataset) -> DataDims {
    DataDims {
        locations: ds.locations(),
        sources: ds.sources(),
    }
}

fn write_report(dir: &RunDir, stem: &str, report: &ForecastReport) -> Result<()> {
    dir.write_json(&format!("{stem}.json"), report)?;
    dir.write(&format!("{stem}.txt"), report.to_text())
}

fn write_diagnostics(dir: &RunDir, model: &GmrlModel, data: &PreparedData) -> Result<()> {
    let diag = collect_diagnostics(model, &data.test, model_batch(data))?;
    if model.cfg.gmre {
        dir.write("gmre.json", diag.gmre_json()? + "\n")?;
        diag.write_traces_csv(dir.create_file("cluster_traces.csv")?)?;
    }
    if model.cfg.hra {
        dir.write("attention.json", diag.attention_json()? + "\n")?;
    }
    Ok(())
}

fn model_batch(data: &PreparedData) -> usize {
    data.test.len().clamp(1, 64)
}

fn write_baselines(dir: &RunDir, cfg: &RunConfig, data: &PreparedData) -> Result<()> {
    let kinds = [
        BaselineKind::Persistence,
        BaselineKind::SeasonalMean {
            period: cfg.baseline.seasonal_period,
        },
    ];
    let mut reports = Vec::new();
    let mut text = String::new();
    for kind in kinds {
        match baseline_forecast(kind, data, &data.test) {
            Ok(r) => {
                text.push_str(&r.to_text());
                text.push('\n');
                reports.push(r);
            }
            Err(e) => log::warn!("skipping baseline {}: {e}", kind.name()),
        }
    }
    dir.write_json("baselines.json", &reports)?;
    dir.write("baselines.txt", text)
}

fn cmd_train(cfg: &RunConfig) -> Result<u8> {
    let (ds, labels) = load_data(cfg)?;
    let data = prepare(cfg, &ds)?;
    let mut model = GmrlModel::new(cfg.model.clone(), dims_of(&ds), cfg.train.seed)?;
    let dir = RunDir::create(&cfg.output.dir, "train")?;
    dir.write("config.toml", cfg.to_toml()?)?;
    log::info!(
        "training {} parameters on {} windows ({} validation, {} test)",
        model.params.num_scalars(),
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    let outcome = train(&mut model, &data, &cfg.train, |_| {})?;
    write_history_jsonl(&outcome.history, dir.create_file("history.jsonl")?)?;

    let val = evaluate(&model, &data, &data.val, cfg.train.eval_batch_size, "val")?;
    let test = evaluate(&model, &data, &data.test, cfg.train.eval_batch_size, "test")?;
    let manifest = Manifest::for_model(
        &model,
        cfg.train.seed,
        data.norm.clone(),
        ds.location_ids().to_vec(),
        ds.source_ids().to_vec(),
        json!({ "best_epoch": outcome.best_epoch, "split": data.split }),
    );
    save_checkpoint(&dir.file("model.ckpt"), &model, &manifest)?;
    write_report(&dir, "report_val", &val)?;
    write_report(&dir, "report_test", &test)?;
    write_baselines(&dir, cfg, &data)?;
    write_diagnostics(&dir, &model, &data)?;
    let recovery = match (&labels, model.cfg.gmre) {
        (Some(labels), true) => Some(cluster_recovery(&model, &data.test, labels, model_batch(&data))?),
        _ => None,
    };
    if let Some(r) = &recovery {
        dir.write_json("cluster_recovery.json", r)?;
    }
    dir.write_json(
        "summary.json",
        &json!({
            "epochs": outcome.history.len(),
            "best_epoch": outcome.best_epoch,
            "best_val_mae": outcome.best_val_mae,
            "stopped_early": outcome.stopped_early,
            "test_mae": test.overall.mae,
            "test_rmse": test.overall.rmse,
        }),
    )?;
    println!("{}", test.to_text());
    println!("run directory: {}", dir.path.display());
    Ok(0)
}

fn check_ids(ds: &TtsDataset, manifest: &Manifest) -> Result<()> {
    if ds.location_ids() != manifest.location_ids.as_slice() || ds.source_ids() != manifest.source_ids.as_slice() {
        return Err(GmrlError::Data(format!(
            "dataset has locations {:?} and sources {:?} but the checkpoint expects {:?} and {:?}",
            ds.location_ids(),
            ds.source_ids(),
            manifest.location_ids,
            manifest.source_ids
        )));
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path) -> Result<u8> {
    let (model, manifest) = load_checkpoint(checkpoint)?;
    let differing: Vec<String> = diff_keys(
        &serde_json::to_value(&manifest.model)?,
        &serde_json::to_value(&cfg.model)?,
    )
    .into_iter()
    .map(|k| format!("model.{k}"))
    .collect();
    if !differing.is_empty() {
        return Err(GmrlError::Config(format!(
            "{} was trained with a different model configuration; differing keys: {}",
            checkpoint.display(),
            differing.join(", ")
        )));
    }
    let (ds, _) = load_data(cfg)?;
    check_ids(&ds, &manifest)?;
    let data = prepare(cfg, &ds)?;
    if data.norm != manifest.norm {
        return Err(GmrlError::Data(
            "normalization statistics differ from the checkpoint's; the data or split changed".into(),
        ));
    }
    let dir = RunDir::create(&cfg.output.dir, "evaluate")?;
    dir.write("config.toml", cfg.to_toml()?)?;
    let val = evaluate(&model, &data, &data.val, cfg.train.eval_batch_size, "val")?;
    let test = evaluate(&model, &data, &data.test, cfg.train.eval_batch_size, "test")?;
    write_report(&dir, "report_val", &val)?;
    write_report(&dir, "report_test", &test)?;
    write_baselines(&dir, cfg, &data)?;
    write_diagnostics(&dir, &model, &data)?;
    println!("{}", test.to_text());
    println!("run directory: {}", dir.path.display());
    Ok(0)
}

fn cmd_forecast(cfg: &RunConfig, checkpoint: &Path, input: Option<&Path>) -> Result<u8> {
    let (model, manifest) = load_checkpoint(checkpoint)?;
    let ds = match input {
        Some(p) => load_dataset(p, DataFormat::from_path(p))?,
        None => load_data(cfg)?.0,
    };
    check_ids(&ds, &manifest)?;
    let (t, o) = (model.cfg.input_len, model.cfg.horizon);
    let (nl, ns) = (ds.locations(), ds.sources());
    if ds.steps() < t {
        return Err(GmrlError::Data(format!(
            "the input has {} steps but the model needs a window of {t}",
            ds.steps()
        )));
    }
    let plane = nl * ns;
    let start = ds.steps() - t;
    let window = Tensor::from_vec(&[t, nl, ns], ds.values().data()[start * plane..].to_vec())?;
    let pred = predict_window(&model, &manifest.norm, &window)?;

    let index = ds.time_index();
    let last = parse_timestamp(&index[index.len() - 1]);
    let step = match (index.len() >= 2).then(|| parse_timestamp(&index[index.len() - 2])).flatten() {
        Some(prev) => last.map(|l| l - prev),
        None => None,
    };
    let stamp = |h: usize| match (last, step) {
        (Some(l), Some(s)) => format_timestamp(l + s * h as i64),
        _ => format!("t+{h}"),
    };

    let dir = RunDir::create(&cfg.output.dir, "forecast")?;
    dir.write("config.toml", cfg.to_toml()?)?;
    let mut csv = String::from("timestamp,location,source,value\n");
    let mut nested = Vec::with_capacity(o);
    for h in 0..o {
        let mut rows = Vec::with_capacity(nl);
        for (l, loc) in ds.location_ids().iter().enumerate() {
            let mut cols = Vec::with_capacity(ns);
            for (s, src) in ds.source_ids().iter().enumerate() {
                let v = pred.at(&[h, l, s]);
                csv.push_str(&format!("{},{loc},{src},{v}\n", stamp(h + 1)));
                cols.push(v);
            }
            rows.push(cols);
        }
        nested.push(rows);
    }
    dir.write("forecast.csv", &csv)?;
    dir.write_json(
        "forecast.json",
        &json!({
            "origin": index[index.len() - 1],
            "timestamps": (1..=o).map(stamp).collect::<Vec<_>>(),
            "location_ids": ds.location_ids(),
            "source_ids": ds.source_ids(),
            "values": nested,
        }),
    )?;
    print!("{csv}");
    println!("run directory: {}", dir.path.display());
    Ok(0)
}

fn cmd_synth(cfg: &RunConfig) -> Result<u8> {
    let spec = cfg
        .data
        .synth
        .as_ref()
        .ok_or_else(|| GmrlError::Config("`synth` needs a [data.synth] table".into()))?;
    let (ds, labels) = generate_synthetic(spec)?;
    let dir = RunDir::create(&cfg.output.dir, "synth")?;
    dir.write("config.toml", cfg.to_toml()?)?;
    save_csv(&ds, &dir.file("dataset.csv"))?;
    let mut text = String::from("location,source,component\n");
    for (i, k) in labels.iter().enumerate() {
        let (l, s) = (i / ds.sources(), i % ds.sources());
        text.push_str(&format!("{},{},{k}\n", ds.location_ids()[l], ds.source_ids()[s]));
    }
    dir.write("labels.csv", text)?;
    println!(
        "{} steps x {} locations x {} sources",
        ds.steps(),
        ds.locations(),
        ds.sources()
    );
    println!("run directory: {}", dir.path.display());
    Ok(0)
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<u8> {
    let gc = &cfg.gradcheck;
    let dims = DataDims {
        locations: gc.locations,
        sources: gc.sources,
    };
    let model = GmrlModel::new(cfg.model.clone(), dims, cfg.train.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let mut random = |d: &[usize]| -> Result<Tensor> {
        let n = d.iter().product();
        Tensor::from_vec(d, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
    };
    let (b, t, o) = (gc.batch_size, cfg.model.input_len, cfg.model.horizon);
    let x = random(&[b, t, gc.locations, gc.sources])?;
    let y = random(&[b, o, gc.locations, gc.sources])?;
    let lambda = cfg.train.lambda;
    let mut store = model.params.clone();
    let report = grad_check_piecewise(
        &mut store,
        |p, g| {
            let out = model.forward_with(g, p, &x)?;
            let key = out.region_key(g);
            Ok((total_loss(g, out.y_hat, &y, out.cluster, lambda)?.total, key))
        },
        &GradCheckOptions {
            delta: gc.delta,
            tol: gc.tol,
            max_entries_per_param: gc.max_entries_per_param,
            seed: gc.seed,
            ..GradCheckOptions::default()
        },
    )?;
    let dir = RunDir::create(&cfg.output.dir, "gradcheck")?;
    dir.write("config.toml", cfg.to_toml()?)?;
    dir.write_json("gradcheck.json", &report)?;
    let width = report.params.iter().map(|p| p.name.len()).max().unwrap_or(0);
    for p in &report.params {
        println!(
            "{:width$}  checked {:5}  skipped {:3}  max rel error {:.3e}",
            p.name, p.entries_checked, p.entries_skipped, p.max_rel_error
        );
    }
    println!(
        "{} entries, {} skipped at kinks, max rel error {:.3e} (tolerance {:.1e})",
        report.entries_checked(),
        report.entries_skipped(),
        report.max_rel_error(),
        report.tol
    );
    println!("run directory: {}", dir.path.display());
    if report.passed() {
        Ok(0)
    } else {
        eprintln!("error: gradient check failed");
        Ok(4)
    }
}

fn cmd_ablate(cfg: &RunConfig, threads: usize) -> Result<u8> {
    let suite = cfg.suite()?;
    let (ds, _) = load_data(cfg)?;
    let data = prepare(cfg, &ds)?;
    let dir = RunDir::create(&cfg.output.dir, "ablate")?;
    dir.write("config.toml", cfg.to_toml()?)?;
    let results = run_ablation(&suite, &data, dims_of(&ds), &cfg.model, &cfg.train, threads)?;
    let persistence = baseline_forecast(BaselineKind::Persistence, &data, &data.test)?;

    let reference = results.iter().find(|r| r.variant == Variant::Full).map(|r| r.test.overall.mae);
    let mut text = format!(
        "{:<18} {:>10} {:>10} {:>10} {:>10}\n",
        "variant", "val_mae", "test_mae", "test_rmse", "vs_full"
    );
    let mut rows = Vec::new();
    for r in &results {
        write_history_jsonl(&r.history, dir.create_file(&format!("history_{}.jsonl", r.variant))?)?;
        write_report(&dir, &format!("report_test_{}", r.variant), &r.test)?;
        let rel = reference.map(|f| format!("{:+.2}%", 100.0 * (r.test.overall.mae / f - 1.0)));
        text.push_str(&format!(
            "{:<18} {:>10.4} {:>10.4} {:>10.4} {:>10}\n",
            r.variant.name(),
            r.val_mae,
            r.test.overall.mae,
            r.test.overall.rmse,
            rel.as_deref().unwrap_or("-")
        ));
        rows.push(json!({
            "variant": r.variant,
            "best_epoch": r.best_epoch,
            "val_mae": r.val_mae,
            "test_mae": r.test.overall.mae,
            "test_rmse": r.test.overall.rmse,
        }));
    }
    text.push_str(&format!(
        "{:<18} {:>10} {:>10.4} {:>10.4} {:>10}\n",
        "persistence", "-", persistence.overall.mae, persistence.overall.rmse, "-"
    ));
    dir.write_json(
        "ablation.json",
        &json!({ "split_hash": results[0].split_hash, "variants": rows, "persistence_test_mae": persistence.overall.mae }),
    )?;
    dir.write("ablation.txt", &text)?;
    print!("{text}");
    println!("run directory: {}", dir.path.display());
    Ok(0)
}
