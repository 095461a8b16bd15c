use std::path::{Path, PathBuf};

use logo_core::backbone::{load_weights_checked, save_weights};
use logo_core::config::RunConfig;
use logo_core::data::{split, windows, Segment, SeriesDataset};
use logo_core::diagnostics::{
    grad_check_config, model_grad_check, probe as probe_taps, GRAD_CHECK_TOLERANCE,
};
use logo_core::mixers::write_similarity_csv;
use logo_core::model::Forecaster;
use logo_core::synth::{generate, write_csv, SynthSpec};
use logo_core::train::{
    ablation_csv, ablation_report, ablation_sweep, evaluate_only, metrics_csv, report_text,
    run_protocol, timing_csv, Protocol, RunOutput, RunReport,
};
use logo_core::{Error, Result};

use crate::Common;

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(c.config.as_deref(), &c.set)?;
    if let Some(out) = &c.out {
        cfg.output.root = out.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

fn run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `weights.bin` for a single horizon, `weights_h<T>.bin` for several.
fn weights_path(dir: &Path, cfg: &RunConfig, horizon: usize) -> PathBuf {
    if cfg.train.horizons.len() == 1 {
        dir.join("weights.bin")
    } else {
        dir.join(format!("weights_h{horizon}.bin"))
    }
}

fn print_reports(reports: &[RunReport]) {
    for r in reports {
        println!(
            "{} {} T={}: mse {:.6} mae {:.6} (persistence mse {:.6}) params {}/{} steps {}",
            r.dataset,
            r.protocol,
            r.horizon,
            r.mse,
            r.mae,
            r.persistence_mse,
            r.params_trainable,
            r.params_total,
            r.steps
        );
    }
}

fn finish_runs(cfg: &RunConfig, outputs: Vec<RunOutput>) -> Result<()> {
    let dir = run_dir(cfg)?;
    for o in &outputs {
        save_weights(weights_path(&dir, cfg, o.report.horizon), &o.model.params)?;
    }
    let reports: Vec<RunReport> = outputs.into_iter().map(|o| o.report).collect();
    write(&dir.join("report.txt"), &report_text(cfg, &reports)?)?;
    write(&dir.join("metrics.csv"), &metrics_csv(&reports)?)?;
    write(&dir.join("timing.csv"), &timing_csv(&reports)?)?;
    print_reports(&reports);
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn train(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let ds = cfg.data.load()?;
    let outputs = run_protocol(&cfg, Protocol::LongTerm, &ds, None, c.jobs)?;
    finish_runs(&cfg, outputs)
}

pub fn fewshot(c: &Common, fraction: Option<f64>) -> Result<()> {
    let mut cfg = load_config(c)?;
    if let Some(f) = fraction {
        cfg.protocol.few_shot_fraction = f;
    }
    let ds = cfg.data.load()?;
    let protocol = Protocol::FewShot {
        fraction: cfg.protocol.few_shot_fraction,
    };
    let outputs = run_protocol(&cfg, protocol, &ds, None, c.jobs)?;
    finish_runs(&cfg, outputs)
}

pub fn zeroshot(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let source = cfg.data.load()?;
    let target = cfg.target.load()?;
    let outputs = run_protocol(&cfg, Protocol::ZeroShot, &source, Some(&target), c.jobs)?;
    finish_runs(&cfg, outputs)
}

fn model_for(cfg: &RunConfig, horizon: usize, weights: Option<&Path>) -> Result<Forecaster> {
    let mut mcfg = cfg.model.clone();
    mcfg.horizon = horizon;
    let mut model = Forecaster::new(mcfg, cfg.train.seed)?;
    if let Some(path) = weights {
        let params = load_weights_checked(path, &model.params)?;
        model.set_params(params)?;
    }
    Ok(model)
}

pub fn eval(c: &Common, weights: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(c)?;
    if weights.is_some() && cfg.train.horizons.len() != 1 {
        return Err(Error::Config(
            "--weights needs exactly one entry in train.horizons".into(),
        ));
    }
    let ds = cfg.data.load()?;
    let dir = run_dir(&cfg)?;
    let mut reports = Vec::new();
    for &h in &cfg.train.horizons {
        let path = weights
            .clone()
            .unwrap_or_else(|| weights_path(&dir, &cfg, h));
        let model = model_for(&cfg, h, Some(&path))?;
        reports.push(evaluate_only(&cfg, &model, &ds)?);
    }
    write(&dir.join("metrics_eval.csv"), &metrics_csv(&reports)?)?;
    print_reports(&reports);
    Ok(())
}

pub fn ablate(c: &Common, axis: Option<String>, values: Option<String>) -> Result<()> {
    let cfg = load_config(c)?;
    let axis = match axis {
        Some(a) => a.parse()?,
        None => cfg.ablation.axis,
    };
    let values: Vec<String> = match values {
        Some(v) => v
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
        None if !cfg.ablation.values.is_empty() => cfg.ablation.values.clone(),
        None => axis.default_values(&cfg),
    };
    let ds = cfg.data.load()?;
    let rows = ablation_sweep(&cfg, axis, &values, &ds, c.jobs)?;
    let dir = run_dir(&cfg)?;
    write(&dir.join("ablation.csv"), &ablation_csv(&rows)?)?;
    write(&dir.join("report.txt"), &ablation_report(&cfg, &rows)?)?;
    for r in &rows {
        println!(
            "{}={}: mse {:.6} mae {:.6} trainable {}/{}",
            r.axis, r.value, r.mse, r.mae, r.params_trainable, r.params_total
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn probe_window(cfg: &RunConfig, ds: &SeriesDataset, horizon: usize) -> Result<Vec<f64>> {
    let l = cfg.model.input_len;
    let r = split(ds.len(), &cfg.data.split_spec()?, l, horizon)?;
    let ws = windows(&r, Segment::Test, l, horizon, ds.num_channels(), true)?;
    let per_channel = ws.len() / ds.num_channels();
    if cfg.probe.channel >= ds.num_channels() || cfg.probe.window >= per_channel {
        return Err(Error::Config(format!(
            "probe window {} / channel {} out of range ({per_channel} windows, {} channels)",
            cfg.probe.window,
            cfg.probe.channel,
            ds.num_channels()
        )));
    }
    Ok(ds
        .input(&ws[cfg.probe.channel * per_channel + cfg.probe.window])
        .to_vec())
}

pub fn probe(c: &Common, layer: &str, weights: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(c)?;
    let n = cfg.model.backbone.n_layers;
    let layers: Vec<usize> = if layer.eq_ignore_ascii_case("all") {
        (0..=n).collect()
    } else {
        let k: usize = layer.parse().map_err(|_| {
            Error::Config(format!("--layer must be `all` or an index, got `{layer}`"))
        })?;
        if k > n {
            return Err(Error::Config(format!("--layer {k} out of range 0..={n}")));
        }
        vec![k]
    };
    let horizon = cfg.train.horizons[0];
    let ds = cfg.data.load()?;
    let dir = run_dir(&cfg)?;
    let weights = weights.or_else(|| {
        let saved = weights_path(&dir, &cfg, horizon);
        saved.exists().then_some(saved)
    });
    match &weights {
        Some(p) => println!("probing weights {}", p.display()),
        None => println!("probing freshly initialized weights"),
    }
    let model = model_for(&cfg, horizon, weights.as_deref())?;
    let window = probe_window(&cfg, &ds, horizon)?;
    let matrices = probe_taps(&model, &window)?;
    for k in layers {
        let path = dir.join(format!("sim_layer_{k}.csv"));
        write_similarity_csv(&path, &matrices[k])?;
        if !matrices[k].zero_rows.is_empty() {
            println!(
                "layer {k}: zero hidden vectors at patches {:?}",
                matrices[k].zero_rows
            );
        }
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn gradcheck(seed: u64, h: f64) -> Result<()> {
    let cfg = grad_check_config();
    let report = model_grad_check(&cfg, seed, 2, h)?;
    println!(
        "checked {} scalars, skipped {} tensors",
        report.checked,
        report.skipped.len()
    );
    println!("max relative error: {:.3e}", report.max_rel_err);
    if let Some(w) = &report.worst {
        println!(
            "worst: {}[{}] analytic {:.6e} numeric {:.6e}",
            w.name, w.index, w.analytic, w.numeric
        );
    }
    if report.max_rel_err > GRAD_CHECK_TOLERANCE {
        return Err(Error::Numerical(format!(
            "max relative error {:.3e} exceeds {GRAD_CHECK_TOLERANCE:e}",
            report.max_rel_err
        )));
    }
    println!("pass (tolerance {GRAD_CHECK_TOLERANCE:e})");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn synth(
    kind: &str,
    length: usize,
    channels: usize,
    seed: u64,
    noise: f64,
    input_len: usize,
    horizon: usize,
    path: &Path,
) -> Result<()> {
    let spec = SynthSpec {
        kind: kind.parse()?,
        length,
        channels,
        seed,
        noise,
        input_len,
        horizon,
    };
    let ds = generate(&spec)?;
    write_csv(&ds, path)?;
    println!(
        "wrote {} ({} rows, {} channels)",
        path.display(),
        ds.len(),
        ds.num_channels()
    );
    Ok(())
}
