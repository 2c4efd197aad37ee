//! Subcommand bodies. Each returns the lines it wants printed.

use std::path::{Path, PathBuf};

use leocsi::autodiff::{grad_check_with, AutodiffError, BlobType, Graph, ParamStore};
use leocsi::beamform::LinkConfig;
use leocsi::channel::ScenarioConfig;
use leocsi::dataset::{build_dataset, Dataset, DatasetSpec, SnrPolicy, SpeedPolicy};
use leocsi::evaluation::{evaluate, run_sweep, Entry, MetricValue, Predictor, SweepKind, SweepPoint};
use leocsi::models::{LlmModel, ModelConfig, ModelInput, Task};
use leocsi::training::{
    adapt_from_pretrained, bf_loss_graph, fit_with, future_planes, nmse_loss_graph, pretrain_backbone,
};

use crate::config::RunConfig;
use crate::run::RunDir;
use crate::CliError;

pub const GRAD_TOL: f64 = 1e-4;

fn load_data(path: &Path) -> Result<Dataset, CliError> {
    Dataset::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<LlmModel, CliError> {
    LlmModel::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn link_of(s: &ScenarioConfig) -> Result<LinkConfig, CliError> {
    LinkConfig::new(s.noise_power, s.total_power).map_err(|e| CliError::Config(e.to_string()))
}

fn format_metric(v: &MetricValue) -> String {
    match v.reported {
        Some(x) => format!("{x:.4}"),
        None => "floor".into(),
    }
}

fn check_finite(v: &MetricValue) -> Result<(), CliError> {
    if v.linear.is_nan() {
        return Err(CliError::Numeric("metric evaluated to NaN".into()));
    }
    Ok(())
}

pub fn generate(cfg: &RunConfig, run: &mut RunDir) -> Result<Vec<String>, CliError> {
    let mut lines = Vec::new();
    for (name, spec) in [("train", cfg.train_spec()), ("test", cfg.test_spec())] {
        let d = build_dataset(&spec)?;
        d.save(&run.join(name))?;
        lines.push(format!("{name}: {} samples -> {}", d.len(), run.join(name).display()));
    }
    Ok(lines)
}

pub fn pretrain(cfg: &RunConfig, data: &Path, run: &mut RunDir) -> Result<Vec<String>, CliError> {
    run.add_input(data)?;
    let d = load_data(data)?;
    let (model, report) = pretrain_backbone(&d, &cfg.model, &cfg.train)?;
    model.save(&run.join("model"), BlobType::F32)?;
    report.write_csv(&run.join("loss.csv"))?;
    Ok(vec![format!(
        "pretrained {} steps, loss {:.4} -> {:.4}",
        report.step_losses.len(),
        report.initial_loss().unwrap_or(f64::NAN),
        report.final_loss().unwrap_or(f64::NAN)
    )])
}

/// Fine-tunes a prediction or beamforming model, writing the latest
/// checkpoint after every epoch and the final model at the end.
pub fn train(
    cfg: &RunConfig,
    task: Task,
    data: &Path,
    pretrained: Option<&Path>,
    run: &mut RunDir,
) -> Result<Vec<String>, CliError> {
    run.add_input(data)?;
    let d = load_data(data)?;
    let mut mc = cfg.model.clone();
    mc.task = task;
    let mut model = match pretrained {
        Some(p) => {
            run.add_input(p)?;
            let pm = load_model(p)?;
            adapt_from_pretrained(mc, &pm, true, cfg.seed)?
        }
        None => LlmModel::new(mc, cfg.seed)?,
    };
    let ckpt = run.join("checkpoint");
    let tmp = run.join("checkpoint.tmp");
    let mut on_epoch = |e: &leocsi::training::EpochSummary, m: &LlmModel| -> leocsi::training::Result<()> {
        log::info!("epoch {} steps {} mean loss {:.6}", e.epoch, e.steps, e.mean_loss);
        m.save(&tmp, BlobType::F32)?;
        if ckpt.exists() {
            std::fs::remove_dir_all(&ckpt)?;
        }
        std::fs::rename(&tmp, &ckpt)?;
        Ok(())
    };
    let report = fit_with(&mut model, &d, &cfg.train, &mut on_epoch)?;
    model.save(&run.join("model"), BlobType::F32)?;
    report.write_csv(&run.join("loss.csv"))?;
    Ok(vec![format!(
        "trained {} steps over {} epochs, loss {:.4} -> {:.4}, {} trainable of {} parameters",
        report.step_losses.len(),
        report.epochs.len(),
        report.initial_loss().unwrap_or(f64::NAN),
        report.final_loss().unwrap_or(f64::NAN),
        model.params.num_trainable(),
        model.params.num_elements()
    )])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Baseline {
    Persistence,
    Ar,
    MrtOutdated,
    WmmsePerfect,
}

impl Baseline {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        <Baseline as clap::ValueEnum>::from_str(s, true)
            .map_err(|_| CliError::Config(format!("unknown baseline `{s}`")))
    }

    pub fn label(&self) -> &'static str {
        match self {
            Baseline::Persistence => "persistence",
            Baseline::Ar => "ar",
            Baseline::MrtOutdated => "mrt_outdated",
            Baseline::WmmsePerfect => "wmmse_perfect",
        }
    }

    fn predictor(&self, ar_order: usize) -> Predictor<'static> {
        match self {
            Baseline::Persistence => Predictor::Persistence,
            Baseline::Ar => Predictor::Ar { order: ar_order },
            Baseline::MrtOutdated => Predictor::MrtOutdated,
            Baseline::WmmsePerfect => Predictor::WmmsePerfect,
        }
    }
}

fn model_predictor(m: &LlmModel, horizon: usize) -> Predictor<'_> {
    match m.config.task {
        Task::Beamforming => Predictor::Beamformer(m),
        Task::Prediction if m.config.t_f == 1 && horizon > 1 => Predictor::Autoregressive(m),
        Task::Prediction => Predictor::Csi(m),
    }
}

fn model_label(m: &LlmModel) -> &'static str {
    match m.config.task {
        Task::Prediction => "cpllm",
        Task::Beamforming => "bfllm",
    }
}

pub struct EvalArgs<'a> {
    pub data: &'a Path,
    pub model: Option<&'a Path>,
    pub baseline: Option<Baseline>,
    pub horizon: Option<usize>,
}

pub fn eval(cfg: &RunConfig, args: EvalArgs<'_>, run: &mut RunDir) -> Result<Vec<String>, CliError> {
    run.add_input(args.data)?;
    let d = load_data(args.data)?;
    let link = link_of(&d.meta.scenario)?;
    let model = match args.model {
        Some(p) => {
            run.add_input(p)?;
            Some(load_model(p)?)
        }
        None => None,
    };
    let (label, predictor, horizon) = match (&model, args.baseline) {
        (Some(m), None) => {
            let h = args.horizon.unwrap_or(if m.config.t_f == 1 { d.meta.t_f } else { m.config.t_f });
            (model_label(m).to_string(), model_predictor(m, h), h)
        }
        (None, Some(b)) => {
            let h = args.horizon.unwrap_or(d.meta.t_f);
            (b.label().to_string(), b.predictor(cfg.sweep.ar_order), h)
        }
        _ => return Err(CliError::Config("eval needs exactly one of --model and --baseline".into())),
    };
    let v = evaluate(predictor, &d, horizon, link)?;
    check_finite(&v)?;
    let record = serde_json::json!({
        "label": label,
        "metric": predictor.metric(),
        "t_f": horizon,
        "samples": d.len(),
        "value": v,
    });
    std::fs::write(run.join("eval.json"), serde_json::to_string_pretty(&record).expect("json"))?;
    Ok(vec![format!("{label} {} {}", predictor.metric(), format_metric(&v))])
}

/// Test set for one sweep value: the config's test section with the swept
/// variable overridden.
fn point_spec(cfg: &RunConfig, kind: SweepKind, value: f64) -> Result<(DatasetSpec, usize), CliError> {
    let mut scenario = cfg.scenario.clone();
    let mut speed = cfg.data.test_speed.clone();
    let mut snr = cfg.data.test_snr.clone();
    let (mut t_p, mut t_f) = (cfg.data.t_p, cfg.data.t_f);
    let as_count = |v: f64| -> Result<usize, CliError> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(CliError::Config(format!("sweep value {v} must be a positive integer")))
        }
    };
    match kind {
        SweepKind::Velocity => speed = SpeedPolicy::Discrete { speeds_kmh: vec![value] },
        SweepKind::Snr => snr = SnrPolicy::FixedPast { snr_db: value },
        SweepKind::History => t_p = as_count(value)?,
        SweepKind::Power => scenario.total_power = 10f64.powf(value / 10.0),
        SweepKind::Devices => scenario.num_devices = as_count(value)?,
        SweepKind::Horizon => t_f = as_count(value)?,
        SweepKind::LoraRank => {}
    }
    let spec = DatasetSpec {
        speed_policy: speed,
        snr_policy: snr,
        ..DatasetSpec::test(scenario, cfg.sweep.count, t_p, t_f, cfg.seed ^ 0x7377_6565)
    };
    Ok((spec, t_f))
}

pub fn sweep(cfg: &RunConfig, models: &[PathBuf], run: &mut RunDir) -> Result<Vec<String>, CliError> {
    let kind = cfg.sweep.kind;
    let baselines = cfg
        .sweep
        .baselines
        .iter()
        .map(|b| Baseline::parse(b))
        .collect::<Result<Vec<_>, _>>()?;
    let mut loaded = Vec::new();
    for p in models {
        run.add_input(p)?;
        loaded.push(load_model(p)?);
    }
    let labels: Vec<String> = loaded
        .iter()
        .enumerate()
        .map(|(i, m)| if loaded.len() == 1 { model_label(m).to_string() } else { format!("{}{i}", model_label(m)) })
        .collect();
    let baseline_entries = || -> Vec<Entry<'static>> {
        baselines
            .iter()
            .map(|b| Entry {
                label: b.label().to_string(),
                predictor: b.predictor(cfg.sweep.ar_order),
            })
            .collect()
    };
    let mut points = Vec::new();
    if kind == SweepKind::LoraRank {
        if loaded.is_empty() {
            return Err(CliError::Config("a lora_rank sweep needs at least one --model".into()));
        }
        let (spec, t_f) = point_spec(cfg, kind, 0.0)?;
        let data = build_dataset(&spec)?;
        let link = link_of(&spec.scenario)?;
        for m in &loaded {
            let mut entries = vec![Entry {
                label: model_label(m).to_string(),
                predictor: model_predictor(m, t_f),
            }];
            entries.extend(baseline_entries());
            points.push(SweepPoint {
                value: m.config.lora_rank as f64,
                data: data.clone(),
                t_f,
                link,
                entries,
            });
        }
    } else {
        if cfg.sweep.values.is_empty() {
            return Err(CliError::Config("sweep.values is empty".into()));
        }
        for &v in &cfg.sweep.values {
            let (spec, t_f) = point_spec(cfg, kind, v)?;
            let data = build_dataset(&spec)?;
            let link = link_of(&spec.scenario)?;
            let mut entries: Vec<Entry<'_>> = loaded
                .iter()
                .zip(&labels)
                .map(|(m, l)| Entry {
                    label: l.clone(),
                    predictor: model_predictor(m, t_f),
                })
                .collect();
            entries.extend(baseline_entries());
            points.push(SweepPoint {
                value: v,
                data,
                t_f,
                link,
                entries,
            });
        }
    }
    let config = serde_json::to_value(cfg).expect("config serializes");
    let result = run_sweep(kind, &points, cfg.seed, config)?;
    for r in &result.rows {
        check_finite(&r.value)?;
    }
    result.write_csv(&run.join("results.csv"))?;
    result.write_json(&run.join("results.json"))?;
    let mut lines = vec![format!("{:<16} {:>14} {:>12}", "label", result.sweep_var, "value")];
    for r in &result.rows {
        lines.push(format!("{:<16} {:>14} {:>12}", r.label, r.point, format_metric(&r.value)));
    }
    Ok(lines)
}

/// Finite-difference check of both end-to-end losses on the tiny model,
/// with inputs drawn from the simulator. Returns the worst relative error
/// per task.
pub fn grad_check(seed: u64) -> Result<Vec<(Task, f64)>, CliError> {
    let base = ModelConfig::tiny();
    let scenario = ScenarioConfig {
        num_devices: base.num_devices,
        n_x: 2,
        n_y: 2,
        ..Default::default()
    };
    let mut spec = DatasetSpec::train(scenario.clone(), 2, base.t_p, base.t_f, seed);
    spec.snr_policy = SnrPolicy::Clean;
    let data = build_dataset(&spec)?;
    let samples: Vec<_> = data.samples.iter().collect();
    let input = ModelInput::from_histories(samples.iter().map(|s| &s.past))?;
    let target = future_planes(&samples, base.t_f)?;
    let mut out = Vec::new();
    for task in [Task::Prediction, Task::Beamforming] {
        let config = ModelConfig { task, ..base.clone() };
        let mut model = LlmModel::new(config.clone(), seed)?;
        jitter(&mut model.params);
        let report = grad_check_with(
            |g: &mut Graph, s: &ParamStore| {
                let shape = |e: String| AutodiffError::Shape(e);
                let m = LlmModel::with_params(config.clone(), s.clone()).map_err(|e| shape(e.to_string()))?;
                let y = m.forward(g, &input).map_err(|e| shape(e.to_string()))?;
                let l = match task {
                    Task::Prediction => nmse_loss_graph(g, y, &target),
                    Task::Beamforming => bf_loss_graph(g, y, &target, scenario.noise_power),
                };
                l.map_err(|e| shape(e.to_string()))
            },
            &model.params,
            1e-5,
            Some(12),
        )
        .map_err(|e| CliError::Numeric(e.to_string()))?;
        if report.max_rel_error.is_nan() {
            return Err(CliError::Numeric(format!("{task:?}: gradient check produced NaN")));
        }
        log::debug!("{task:?}: worst entry {:?}", report.worst);
        out.push((task, report.max_rel_error));
    }
    Ok(out)
}

/// Deterministic perturbation so zero-initialized adapters get nonzero
/// gradients.
fn jitter(store: &mut ParamStore) {
    for (pi, (_, p)) in store.iter_mut().enumerate() {
        for (i, v) in p.value.data_mut().iter_mut().enumerate() {
            *v += 0.1 * ((pi * 7919 + i) as f64 * 12.9898).sin();
        }
    }
}
