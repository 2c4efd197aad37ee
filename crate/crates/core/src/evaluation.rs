//! Metrics, classical predictors and sweep runners.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::beamform::{mrt, sum_rate, wmmse, BeamformError, LinkConfig, WmmseOptions};
use crate::channel::{CsiError, CsiTensor};
use crate::dataset::{Dataset, SampleRecord};
use crate::models::{planes_to_csi, LlmModel, ModelError, ModelInput, Task};
use crate::training::check_compatible;

pub const AR_RIDGE: f64 = 1e-6;
const EVAL_CHUNK: usize = 128;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("ground truth {0} has zero energy")]
    ZeroNormTruth(usize),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("sweep point {point}, `{label}`: {reason}")]
    Incompatible {
        point: usize,
        label: String,
        reason: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Beamform(#[from] BeamformError),
    #[error(transparent)]
    Csi(#[from] CsiError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// NMSE averaged in the linear domain. A perfect prediction has no finite
/// dB value and is reported through `floor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nmse {
    pub linear: f64,
    pub floor: bool,
}

impl Nmse {
    pub fn from_linear(linear: f64) -> Self {
        Nmse {
            linear,
            floor: linear == 0.0,
        }
    }

    pub fn db(&self) -> Option<f64> {
        if self.floor {
            None
        } else {
            Some(10.0 * self.linear.log10())
        }
    }
}

/// `sum_t ||H_t - Ĥ_t||² / sum_t ||H_t||²` for one sample.
pub fn nmse_linear(pred: &CsiTensor, truth: &CsiTensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(EvalError::Shape(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let energy = truth.sq_norm();
    if energy == 0.0 {
        return Err(EvalError::ZeroNormTruth(0));
    }
    let err: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    Ok(err / energy)
}

/// Test-set NMSE: per-sample ratios averaged linearly.
pub fn nmse_metric(preds: &[CsiTensor], truths: &[CsiTensor]) -> Result<Nmse> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(EvalError::Shape(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            truths.len()
        )));
    }
    let mut sum = 0.0;
    for (i, (p, t)) in preds.iter().zip(truths).enumerate() {
        sum += nmse_linear(p, t).map_err(|e| match e {
            EvalError::ZeroNormTruth(_) => EvalError::ZeroNormTruth(i),
            e => e,
        })?;
    }
    Ok(Nmse::from_linear(sum / preds.len() as f64))
}

/// Repeats the newest history slot `t_f` times.
pub fn persistence_baseline(past: &CsiTensor, t_f: usize) -> Result<CsiTensor> {
    if past.slots() == 0 {
        return Err(EvalError::Precondition("history is empty".into()));
    }
    let last = past.slot(past.slots() - 1);
    let data = (0..t_f).flat_map(|_| last.iter().copied()).collect();
    Ok(CsiTensor::new(
        [t_f, past.devices(), past.antennas()],
        data,
        past.slot_interval_s,
        past.origin_slot + past.slots(),
    )?)
}

/// Least-squares AR(`order`) fit per antenna entry, rolled forward `t_f`
/// slots. Falls back to ridge regularization when the normal equations are
/// singular.
pub fn ar_baseline(past: &CsiTensor, order: usize, t_f: usize) -> Result<CsiTensor> {
    let [t_p, k, n] = past.shape();
    if order == 0 || t_p <= order {
        return Err(EvalError::Precondition(format!(
            "AR order must satisfy 1 ≤ p < T_P, got p = {order}, T_P = {t_p}"
        )));
    }
    let w = k * n;
    let mut out = vec![Complex64::new(0.0, 0.0); t_f * w];
    for e in 0..w {
        let mut series: Vec<Complex64> = (0..t_p).map(|t| past.slot(t)[e]).collect();
        let coef = fit_ar(&series, order);
        for s in 0..t_f {
            let len = series.len();
            let next: Complex64 = (0..order).map(|i| coef[i] * series[len - 1 - i]).sum();
            out[s * w + e] = next;
            series.push(next);
        }
    }
    Ok(CsiTensor::new(
        [t_f, k, n],
        out,
        past.slot_interval_s,
        past.origin_slot + t_p,
    )?)
}

/// Coefficients `a` of `x_t = sum_i a_i x_{t-1-i}`.
fn fit_ar(x: &[Complex64], p: usize) -> Vec<Complex64> {
    let rows = x.len() - p;
    let a = DMatrix::from_fn(rows, p, |r, c| x[r + p - 1 - c]);
    let b = DVector::from_fn(rows, |r, _| x[r + p]);
    let ah = a.adjoint();
    let mut gram = &ah * &a;
    let rhs = &ah * &b;
    let sv = gram.clone().singular_values();
    let (lo, hi) = (sv.min(), sv.max());
    if hi == 0.0 {
        return vec![Complex64::new(0.0, 0.0); p];
    }
    if lo <= 1e-12 * hi {
        log::warn!("AR normal equations are singular; using ridge {AR_RIDGE:e}");
        for i in 0..p {
            gram[(i, i)] += Complex64::new(AR_RIDGE, 0.0);
        }
    }
    match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs).iter().copied().collect(),
        None => gram
            .lu()
            .solve(&rhs)
            .map(|v| v.iter().copied().collect())
            .unwrap_or_else(|| vec![Complex64::new(0.0, 0.0); p]),
    }
}

/// Something that produces a value for every test sample.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    /// Trained CSI predictor, parallel decoding.
    Csi(&'a LlmModel),
    /// One-slot CSI predictor rolled forward autoregressively.
    Autoregressive(&'a LlmModel),
    Persistence,
    Ar { order: usize },
    /// Trained beamformer.
    Beamformer(&'a LlmModel),
    /// MRT designed on the newest (noisy) history slot.
    MrtOutdated,
    /// WMMSE on the true future channels.
    WmmsePerfect,
}

impl Predictor<'_> {
    /// Name of the metric this predictor is scored with.
    pub fn metric(&self) -> &'static str {
        match self {
            Predictor::Beamformer(_) | Predictor::MrtOutdated | Predictor::WmmsePerfect => {
                "sum_rate"
            }
            _ => "nmse_db",
        }
    }
}

/// Value of a metric at one sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    /// NMSE (linear) or sum rate (bits/s/Hz).
    pub linear: f64,
    /// dB for NMSE; `None` marks the perfect-prediction floor. Equal to
    /// `linear` for sum rate.
    pub reported: Option<f64>,
}

impl MetricValue {
    fn nmse(n: Nmse) -> Self {
        MetricValue {
            linear: n.linear,
            reported: n.db(),
        }
    }

    fn rate(r: f64) -> Self {
        MetricValue {
            linear: r,
            reported: Some(r),
        }
    }
}

/// CSI predictions of `model` for every sample, batched.
pub fn predict_csi(model: &LlmModel, samples: &[&SampleRecord]) -> Result<Vec<CsiTensor>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let input = ModelInput::from_histories(chunk.iter().map(|s| &s.past))?;
        let mut g = Graph::new();
        let y = model.forward(&mut g, &input)?;
        let c = &model.config;
        let per = c.t_f * c.slot_width();
        for (s, block) in chunk.iter().zip(g.value(y).data().chunks(per)) {
            let planes = crate::autodiff::Tensor::new(
                vec![c.t_f, 2, c.num_devices, c.num_antennas],
                block.to_vec(),
            )
            .map_err(ModelError::from)?;
            out.push(planes_to_csi(
                &planes,
                s.past.slot_interval_s,
                s.past.origin_slot + c.t_p,
            )?);
        }
    }
    Ok(out)
}

/// Mean per-slot sum rate of `w` (one `[T_F, 2, K, N]` planes block per
/// sample, laid out like the model output) on the samples' true futures.
fn mean_rate_of_planes(
    planes: &[f64],
    samples: &[&SampleRecord],
    t_f: usize,
    noise: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, s) in samples.iter().enumerate() {
        let [_, k, n] = s.future.shape();
        let kn = k * n;
        for t in 0..t_f {
            let base = (i * t_f + t) * 2 * kn;
            let data = (0..kn)
                .map(|e| Complex64::new(planes[base + e], planes[base + kn + e]))
                .collect();
            let w = crate::beamform::BeamformingMatrix::new(k, n, data)?;
            total += sum_rate(s.future.slot(t), &w, noise)?;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Scores `predictor` on `data`, using the first `t_f` future slots.
pub fn evaluate(
    predictor: Predictor<'_>,
    data: &Dataset,
    t_f: usize,
    link: LinkConfig,
) -> Result<MetricValue> {
    let samples: Vec<&SampleRecord> = data.samples.iter().collect();
    if samples.is_empty() {
        return Err(EvalError::Precondition("empty dataset".into()));
    }
    if data.meta.t_f < t_f {
        return Err(EvalError::Precondition(format!(
            "dataset holds {} future slots, {t_f} requested",
            data.meta.t_f
        )));
    }
    let truths: Vec<CsiTensor> = samples
        .iter()
        .map(|s| s.future.slice_slots(0, t_f))
        .collect::<std::result::Result<_, _>>()?;
    let check = |m: &LlmModel, want: Task, tf: usize| -> Result<()> {
        if m.config.task != want {
            return Err(EvalError::Precondition(format!(
                "model task is {:?}, expected {want:?}",
                m.config.task
            )));
        }
        if m.config.t_f != tf {
            return Err(EvalError::Precondition(format!(
                "model predicts {} slots, evaluation needs {tf}",
                m.config.t_f
            )));
        }
        check_compatible(&m.config, data).map_err(|e| EvalError::Precondition(e.to_string()))
    };
    match predictor {
        Predictor::Csi(m) => {
            check(m, Task::Prediction, t_f)?;
            let preds = predict_csi(m, &samples)?;
            Ok(MetricValue::nmse(nmse_metric(&preds, &truths)?))
        }
        Predictor::Autoregressive(m) => {
            check(m, Task::Prediction, 1)?;
            let preds = samples
                .iter()
                .map(|s| m.autoregressive_predict(&s.past, t_f).map_err(EvalError::from))
                .collect::<Result<Vec<_>>>()?;
            Ok(MetricValue::nmse(nmse_metric(&preds, &truths)?))
        }
        Predictor::Persistence => {
            let preds = samples
                .iter()
                .map(|s| persistence_baseline(&s.past, t_f))
                .collect::<Result<Vec<_>>>()?;
            Ok(MetricValue::nmse(nmse_metric(&preds, &truths)?))
        }
        Predictor::Ar { order } => {
            let preds = samples
                .iter()
                .map(|s| ar_baseline(&s.past, order, t_f))
                .collect::<Result<Vec<_>>>()?;
            Ok(MetricValue::nmse(nmse_metric(&preds, &truths)?))
        }
        Predictor::Beamformer(m) => {
            check(m, Task::Beamforming, t_f)?;
            let mut total = 0.0;
            for chunk in samples.chunks(EVAL_CHUNK) {
                let input = ModelInput::from_histories(chunk.iter().map(|s| &s.past))?;
                let mut g = Graph::new();
                let y = m.forward(&mut g, &input)?;
                total += mean_rate_of_planes(g.value(y).data(), chunk, t_f, link.noise_power)?
                    * chunk.len() as f64;
            }
            Ok(MetricValue::rate(total / samples.len() as f64))
        }
        Predictor::MrtOutdated => {
            let mut total = 0.0;
            for s in &samples {
                let k = s.past.devices();
                let w = mrt(s.past.slot(s.past.slots() - 1), k, link.total_power)?;
                for t in 0..t_f {
                    total += sum_rate(s.future.slot(t), &w, link.noise_power)?;
                }
            }
            Ok(MetricValue::rate(total / (samples.len() * t_f) as f64))
        }
        Predictor::WmmsePerfect => {
            let rates = samples
                .par_iter()
                .map(|s| -> Result<f64> {
                    let k = s.future.devices();
                    let mut acc = 0.0;
                    for t in 0..t_f {
                        let h = s.future.slot(t);
                        let init = mrt(h, k, link.total_power)?;
                        let (_, trace) = wmmse(h, link, &init, WmmseOptions::default())?;
                        acc += trace.last().copied().unwrap_or(0.0);
                    }
                    Ok(acc)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MetricValue::rate(
                rates.iter().sum::<f64>() / (samples.len() * t_f) as f64,
            ))
        }
    }
}

/// Per-slot NMSE (linear) of a predictor over the horizon.
pub fn nmse_per_slot(preds: &[CsiTensor], truths: &[CsiTensor]) -> Result<Vec<f64>> {
    let t_f = truths.first().map(|t| t.slots()).unwrap_or(0);
    (0..t_f)
        .map(|t| {
            let p: Vec<CsiTensor> = preds
                .iter()
                .map(|x| x.slice_slots(t, t + 1))
                .collect::<std::result::Result<_, _>>()?;
            let q: Vec<CsiTensor> = truths
                .iter()
                .map(|x| x.slice_slots(t, t + 1))
                .collect::<std::result::Result<_, _>>()?;
            Ok(nmse_metric(&p, &q)?.linear)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Velocity,
    Snr,
    History,
    Power,
    Devices,
    LoraRank,
    Horizon,
}

impl SweepKind {
    pub fn variable(&self) -> &'static str {
        match self {
            SweepKind::Velocity => "velocity_kmh",
            SweepKind::Snr => "snr_db",
            SweepKind::History => "t_p",
            SweepKind::Power => "total_power_dbw",
            SweepKind::Devices => "num_devices",
            SweepKind::LoraRank => "lora_rank",
            SweepKind::Horizon => "t_f",
        }
    }
}

/// One labelled predictor at a sweep point.
#[derive(Debug, Clone)]
pub struct Entry<'a> {
    pub label: String,
    pub predictor: Predictor<'a>,
}

/// Test data and predictors for one sweep value.
#[derive(Debug, Clone)]
pub struct SweepPoint<'a> {
    pub value: f64,
    pub data: Dataset,
    pub t_f: usize,
    pub link: LinkConfig,
    pub entries: Vec<Entry<'a>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: String,
    pub point: f64,
    pub metric: String,
    pub value: MetricValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub kind: SweepKind,
    pub sweep_var: String,
    pub points: Vec<f64>,
    pub rows: Vec<ResultRow>,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl ExperimentResult {
    /// Rows of one label in sweep order.
    pub fn series(&self, label: &str) -> Vec<&ResultRow> {
        self.rows.iter().filter(|r| r.label == label).collect()
    }

    /// Whether the label's metric never decreases along the sweep.
    pub fn is_non_decreasing(&self, label: &str) -> bool {
        let s = self.series(label);
        s.windows(2).all(|w| w[1].value.linear >= w[0].value.linear)
    }

    /// Whether the label's metric never increases along the sweep.
    pub fn is_non_increasing(&self, label: &str) -> bool {
        let s = self.series(label);
        s.windows(2).all(|w| w[1].value.linear <= w[0].value.linear)
    }

    /// Columns `label,sweep_var,value,metric,seed`; `sweep_var` holds the
    /// point value and a perfect-prediction NMSE is written as `floor`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "label,sweep_var,value,metric,seed")?;
        for r in &self.rows {
            let v = match r.value.reported {
                Some(x) => format!("{x:.6}"),
                None => "floor".to_string(),
            };
            writeln!(f, "{},{},{v},{},{}", r.label, r.point, r.metric, self.seed)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Evaluates every entry at every point. Points run in parallel; rows are
/// ordered by point, then entry.
pub fn run_sweep(
    kind: SweepKind,
    points: &[SweepPoint<'_>],
    seed: u64,
    config: serde_json::Value,
) -> Result<ExperimentResult> {
    let per_point: Vec<Vec<ResultRow>> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            p.entries
                .iter()
                .map(|e| {
                    let value = evaluate(e.predictor, &p.data, p.t_f, p.link).map_err(|err| {
                        EvalError::Incompatible {
                            point: i,
                            label: e.label.clone(),
                            reason: err.to_string(),
                        }
                    })?;
                    Ok(ResultRow {
                        label: e.label.clone(),
                        point: p.value,
                        metric: e.predictor.metric().to_string(),
                        value,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult {
        kind,
        sweep_var: kind.variable().to_string(),
        points: points.iter().map(|p| p.value).collect(),
        rows: per_point.into_iter().flatten().collect(),
        seed,
        config,
    })
}

/// Splits a test set into one dataset per distinct device speed, in
/// ascending speed order. Values are km/h, rounded to 1e-6.
pub fn split_by_speed(data: &Dataset) -> Vec<(f64, Dataset)> {
    let mut speeds: Vec<f64> = data
        .samples
        .iter()
        .map(|s| s.device_speeds_mps.first().copied().unwrap_or(0.0))
        .collect();
    speeds.sort_by(f64::total_cmp);
    speeds.dedup();
    speeds
        .into_iter()
        .map(|v| {
            let idx: Vec<usize> = data
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.device_speeds_mps.first().copied().unwrap_or(0.0) == v)
                .map(|(i, _)| i)
                .collect();
            let kmh = (crate::channel::mps_to_kmh(v) * 1e6).round() / 1e6;
            (kmh, data.select(&idx))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(t: usize, f: impl Fn(usize) -> Complex64) -> CsiTensor {
        CsiTensor::new([t, 1, 2], (0..t * 2).map(|i| f(i / 2) * (1.0 + (i % 2) as f64)).collect(), 5e-4, 0)
            .unwrap()
    }

    #[test]
    fn nmse_reference_values() {
        let truth = series(3, |t| Complex64::new(1.0 + t as f64, -0.5));
        let perfect = nmse_metric(&[truth.clone()], &[truth.clone()]).unwrap();
        assert!(perfect.floor);
        assert_eq!(perfect.db(), None);
        let zero = CsiTensor::zeros([3, 1, 2], 5e-4);
        assert_eq!(nmse_metric(&[zero.clone()], &[truth.clone()]).unwrap().db(), Some(0.0));
        let mut double = truth.clone();
        double.data_mut().iter_mut().for_each(|z| *z *= 2.0);
        assert!(nmse_metric(&[double], &[truth.clone()]).unwrap().db().unwrap().abs() < 1e-12);
        assert!(matches!(
            nmse_metric(&[truth.clone()], &[zero]),
            Err(EvalError::ZeroNormTruth(0))
        ));
    }

    #[test]
    fn persistence_repeats_last_slot() {
        let past = series(4, |t| Complex64::new(t as f64, 1.0));
        let p = persistence_baseline(&past, 3).unwrap();
        for t in 0..3 {
            assert_eq!(p.slot(t), past.slot(3));
        }
        assert_eq!(p.origin_slot, 4);
    }

    #[test]
    fn ar1_extrapolates_complex_exponential() {
        let w = 0.37;
        let past = series(8, |t| Complex64::from_polar(1.3, w * t as f64 + 0.2));
        let pred = ar_baseline(&past, 1, 4).unwrap();
        let truth = series(12, |t| Complex64::from_polar(1.3, w * t as f64 + 0.2))
            .slice_slots(8, 12)
            .unwrap();
        for (a, b) in pred.data().iter().zip(truth.data()) {
            assert!((a - b).norm() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn ar_on_constant_sequence_stays_constant() {
        let c = Complex64::new(0.8, -0.3);
        let past = series(6, |_| c);
        for p in 1..6 {
            let pred = ar_baseline(&past, p, 3).unwrap();
            for t in 0..3 {
                for (a, b) in pred.slot(t).iter().zip(past.slot(0)) {
                    assert!((a - b).norm() < 1e-6, "p={p}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn ar_order_must_be_below_history() {
        let past = series(4, |_| Complex64::new(1.0, 0.0));
        assert!(matches!(ar_baseline(&past, 4, 1), Err(EvalError::Precondition(_))));
        assert!(ar_baseline(&past, 0, 1).is_err());
    }
}
