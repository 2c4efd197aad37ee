//! Losses and training loops: CSI prediction (NMSE), beamforming (negative
//! sum rate) and backbone pretraining.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_grad_norm, AdamW, AdamWConfig, AutodiffError, Graph, Tensor, Var};
use crate::channel::CsiTensor;
use crate::dataset::{Dataset, SampleRecord};
use crate::models::{csi_to_planes, FreezePolicy, LlmModel, ModelConfig, ModelError, ModelInput, Task};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("dataset does not fit the model: {0}")]
    Mismatch(String),
    #[error("ground-truth sample {0} has zero energy")]
    ZeroNormTruth(usize),
    #[error("loss became non-finite at step {step}")]
    NonFinite { step: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// One epoch is a shuffled pass over the training set in
    /// `ceil(M / batch_size)` batches.
    pub epochs: usize,
    /// Stops after this many optimizer steps if set, regardless of `epochs`.
    pub max_steps: Option<usize>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub freeze: FreezePolicy,
    /// Receiver noise power used by the beamforming loss.
    pub noise_power: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 300,
            max_steps: None,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            seed: 0,
            freeze: FreezePolicy::Adapters,
            noise_power: 0.1,
        }
    }
}

impl TrainConfig {
    /// Small-model preset: larger step size and a fixed step budget.
    pub fn desk(steps: usize, seed: u64) -> Self {
        TrainConfig {
            batch_size: 32,
            max_steps: Some(steps),
            epochs: usize::MAX,
            lr: 1e-3,
            seed,
            ..Default::default()
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.noise_power > 0.0) {
            return Err(TrainError::Config("noise_power must be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(TrainError::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sample NMSE of `pred` against `truth`, both `[B, ...]`, averaged over
/// the batch. Rejects any all-zero truth sample.
pub fn nmse_loss_graph(g: &mut Graph, pred: Var, truth: &Tensor) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    if shape != truth.shape() || shape.is_empty() {
        return Err(TrainError::Mismatch(format!(
            "prediction {shape:?} vs truth {:?}",
            truth.shape()
        )));
    }
    let b = shape[0];
    let per = truth.numel() / b.max(1);
    let energy: Vec<f64> = truth
        .data()
        .chunks(per)
        .map(|c| c.iter().map(|v| v * v).sum())
        .collect();
    if let Some(i) = energy.iter().position(|e| *e == 0.0) {
        return Err(TrainError::ZeroNormTruth(i));
    }
    let t = g.constant(truth.clone().reshaped(&[b, per])?);
    let p = g.reshape(pred, &[b, per])?;
    let d = g.sub(p, t)?;
    let d = g.square(d)?;
    let err = g.sum_axis(d, 1, false)?;
    let inv = g.constant(Tensor::new(vec![b], energy.iter().map(|e| 1.0 / e).collect())?);
    let r = g.mul(err, inv)?;
    Ok(g.mean_all(r)?)
}

/// Value of [`nmse_loss_graph`].
pub fn nmse_loss(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let l = nmse_loss_graph(&mut g, p, truth)?;
    Ok(g.value(l).item()?)
}

/// Negative sum rate per slot, averaged over batch and slots, for
/// beamformers `w` evaluated on channels `h`. Both are `[B, T_F, 2, K, N]`
/// real/imaginary planes.
pub fn bf_loss_graph(g: &mut Graph, w: Var, h: &Tensor, noise_power: f64) -> Result<Var> {
    let shape = g.shape(w).to_vec();
    if shape != h.shape() || shape.len() != 5 || shape[2] != 2 {
        return Err(TrainError::Mismatch(format!(
            "beamformers {shape:?} vs channels {:?}",
            h.shape()
        )));
    }
    let (b, t, k, n) = (shape[0], shape[1], shape[3], shape[4]);
    let bt = b * t;
    let hv = g.constant(h.clone());
    let part = |g: &mut Graph, x: Var, c: usize| -> Result<Var> {
        let s = g.slice(x, 2, c, c + 1)?;
        Ok(g.reshape(s, &[bt, k, n])?)
    };
    let (h_re, h_im) = (part(g, hv, 0)?, part(g, hv, 1)?);
    let (w_re, w_im) = (part(g, w, 0)?, part(g, w, 1)?);
    // entry (k, j) is h_k^H w_j
    let rr = g.matmul_opt(h_re, w_re, true)?;
    let ii = g.matmul_opt(h_im, w_im, true)?;
    let re = g.add(rr, ii)?;
    let ri = g.matmul_opt(h_re, w_im, true)?;
    let ir = g.matmul_opt(h_im, w_re, true)?;
    let im = g.sub(ri, ir)?;
    let re2 = g.square(re)?;
    let im2 = g.square(im)?;
    let gain = g.add(re2, im2)?;
    let eye = g.constant(Tensor::from_fn(&[k, k], |i| if i / k == i % k { 1.0 } else { 0.0 }));
    let own = g.mul(gain, eye)?;
    let signal = g.sum_axis(own, 2, false)?;
    let total = g.sum_axis(gain, 2, false)?;
    let interference = g.sub(total, signal)?;
    let denom = g.add_scalar(interference, noise_power);
    let sinr = g.div(signal, denom)?;
    let one_plus = g.add_scalar(sinr, 1.0);
    let nats = g.log(one_plus);
    let rate = g.sum_all(nats)?;
    Ok(g.scale(rate, -1.0 / (bt as f64 * std::f64::consts::LN_2)))
}

/// Value of [`bf_loss_graph`].
pub fn bf_loss(w: &Tensor, h: &Tensor, noise_power: f64) -> Result<f64> {
    let mut g = Graph::new();
    let wv = g.constant(w.clone());
    let l = bf_loss_graph(&mut g, wv, h, noise_power)?;
    Ok(g.value(l).item()?)
}

/// Stacks the first `t_f` future slots of each sample into `[B, t_f, 2, K, N]`.
pub fn future_planes(samples: &[&SampleRecord], t_f: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape = None;
    for s in samples {
        let f: CsiTensor = s
            .future
            .slice_slots(0, t_f)
            .map_err(|e| TrainError::Mismatch(e.to_string()))?;
        let p = csi_to_planes(&f);
        shape = Some(p.shape().to_vec());
        data.extend_from_slice(p.data());
    }
    let mut full = vec![samples.len()];
    full.extend(shape.ok_or_else(|| TrainError::Mismatch("empty batch".into()))?);
    Ok(Tensor::new(full, data)?)
}

pub fn check_compatible(model: &ModelConfig, data: &Dataset) -> Result<()> {
    let m = &data.meta;
    let k = m.scenario.num_devices;
    let n = m.scenario.num_antennas();
    if m.t_p != model.t_p || m.t_f < model.t_f || k != model.num_devices || n != model.num_antennas {
        return Err(TrainError::Mismatch(format!(
            "dataset has T_P={}, T_F={}, K={k}, N={n}; model needs T_P={}, T_F≤{}, K={}, N={}",
            m.t_p, m.t_f, model.t_p, m.t_f, model.num_devices, model.num_antennas
        )));
    }
    if data.samples.is_empty() {
        return Err(TrainError::Mismatch("dataset is empty".into()));
    }
    Ok(())
}

/// Task loss of `model` on a batch of samples. Returns the graph and the
/// scalar loss node.
pub fn batch_loss(
    model: &LlmModel,
    samples: &[&SampleRecord],
    noise_power: f64,
) -> Result<(Graph, Var)> {
    let input = ModelInput::from_histories(samples.iter().map(|s| &s.past))?;
    let target = future_planes(samples, model.config.t_f)?;
    let mut g = Graph::new();
    let out = model.forward(&mut g, &input)?;
    let loss = match model.config.task {
        Task::Prediction => nmse_loss_graph(&mut g, out, &target)?,
        Task::Beamforming => bf_loss_graph(&mut g, out, &target, noise_power)?,
    };
    Ok((g, loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of every optimizer step, before the update.
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.step_losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.step_losses.last().copied()
    }

    /// Writes `step,epoch,loss` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,epoch,loss")?;
        let mut step = 0;
        for e in &self.epochs {
            for _ in 0..e.steps {
                writeln!(f, "{step},{},{:e}", e.epoch, self.step_losses[step])?;
                step += 1;
            }
        }
        f.flush()?;
        Ok(())
    }
}

/// Trains `model` on `data` with the loss implied by its task. `on_epoch`
/// runs after every epoch, e.g. to write a checkpoint.
pub fn fit_with(
    model: &mut LlmModel,
    data: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochSummary, &LlmModel) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_compatible(&model.config, data)?;
    model.apply_freeze(cfg.freeze);
    let mut opt = AdamW::new(cfg.adamw());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    let budget = cfg.max_steps.unwrap_or(usize::MAX);
    let mut epoch = 0;
    while epoch < cfg.epochs && report.step_losses.len() < budget {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if report.step_losses.len() >= budget {
                break;
            }
            let batch: Vec<&SampleRecord> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let (g, loss) = batch_loss(model, &batch, cfg.noise_power)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    step: report.step_losses.len(),
                });
            }
            let mut grads = g.backward(loss)?.params();
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(&model.params, &mut grads, max);
            }
            opt.step(&mut model.params, &grads);
            report.step_losses.push(value);
            sum += value;
            steps += 1;
        }
        let summary = EpochSummary {
            epoch,
            steps,
            mean_loss: sum / steps.max(1) as f64,
        };
        on_epoch(&summary, model)?;
        report.epochs.push(summary);
        epoch += 1;
    }
    Ok(report)
}

pub fn fit(model: &mut LlmModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    fit_with(model, data, cfg, &mut |_, _| Ok(()))
}

/// Fine-tunes a CSI predictor. The model's task must be prediction.
pub fn finetune_cp(model: &mut LlmModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if model.config.task != Task::Prediction {
        return Err(TrainError::Config("finetune_cp needs a prediction model".into()));
    }
    fit(model, data, cfg)
}

/// Fine-tunes a beamformer. The model's task must be beamforming.
pub fn finetune_bf(model: &mut LlmModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if model.config.task != Task::Beamforming {
        return Err(TrainError::Config("finetune_bf needs a beamforming model".into()));
    }
    fit(model, data, cfg)
}

/// Trains a full model on next-slot prediction (one-slot head, no
/// adapters, every weight trainable), then freezes its backbone.
pub fn pretrain_backbone(
    data: &Dataset,
    config: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(LlmModel, TrainReport)> {
    let mut c = config.clone();
    c.task = Task::Prediction;
    c.t_f = 1;
    c.lora_rank = 0;
    let mut model = LlmModel::new(c, cfg.seed)?;
    let mut t = cfg.clone();
    t.freeze = FreezePolicy::None;
    let report = fit(&mut model, data, &t)?;
    model.apply_freeze(FreezePolicy::Adapters);
    Ok((model, report))
}

/// Fresh model for `config` whose backbone base weights (and, when
/// `reuse_encoder`, encoder) come from `pretrained`. Adapters and the head
/// start from their initializers; the backbone is frozen.
pub fn adapt_from_pretrained(
    config: ModelConfig,
    pretrained: &LlmModel,
    reuse_encoder: bool,
    seed: u64,
) -> Result<LlmModel> {
    let mut model = LlmModel::new(config, seed)?;
    let prefixes: &[&str] = if reuse_encoder { &["llm.", "enc."] } else { &["llm."] };
    model.load_from(&pretrained.params, prefixes)?;
    model.apply_freeze(FreezePolicy::Adapters);
    Ok(model)
}
