//! CSI prediction and beamforming models built from a ViT-style CSI encoder,
//! a causal Transformer backbone with LoRA adapters and an MLP decoder head.
//!
//! Parameter layout in the [`ParamStore`]:
//!
//! * `enc.*`: patch projection, class token, position table, encoder layers,
//!   readout MLP
//! * `llm.*`: backbone decoder layers and final layer norm; LoRA adapters
//!   live under `llm.layer<i>.attn.{q,k,v}.lora_{a,b}`
//! * `dec.*`: two-layer head producing all future slots at once

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, BlobType, Graph, ParamStore, Tensor, Var};
use crate::beamform::BeamformingMatrix;
use crate::channel::CsiTensor;
use crate::nn::{sinusoidal_pe, Activation, LayerNorm, Linear, PatchEmbed, TransformerLayer};

pub const SIGMA_FLOOR: f64 = 1e-6;
pub const MODEL_FILE: &str = "model.json";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("decoder produced an all-zero beamformer for future slot {slot}")]
    DegenerateOutput { slot: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which slot index feeds the temporal encoding of each history image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    /// Absolute slot index of the image within its episode, modulo `pe_period`.
    #[default]
    Absolute,
    /// Position within the history window, `0..T_P`.
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Future CSI, denormalized with the history statistics.
    #[default]
    Prediction,
    /// Future beamformers, normalized per slot to the power budget.
    Beamforming,
}

/// Which parameters receive gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Backbone base weights frozen; encoder, adapters and head train.
    #[default]
    Adapters,
    /// Everything trains.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    pub t_p: usize,
    pub t_f: usize,
    pub num_devices: usize,
    pub num_antennas: usize,
    pub patch: usize,
    pub d_enc: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub d_llm: usize,
    pub backbone_layers: usize,
    pub heads: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Hidden width of the decoder head; `None` means `4 * d_llm`.
    pub decoder_hidden: Option<usize>,
    pub total_power: f64,
    pub pe_mode: PeMode,
    pub pe_period: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            task: Task::Prediction,
            t_p: 16,
            t_f: 4,
            num_devices: 10,
            num_antennas: 16,
            patch: 2,
            d_enc: 512,
            encoder_layers: 2,
            encoder_heads: 8,
            d_llm: 1024,
            backbone_layers: 24,
            heads: 16,
            lora_rank: 8,
            lora_alpha: 32.0,
            decoder_hidden: None,
            total_power: 1.0,
            pe_mode: PeMode::Absolute,
            pe_period: 10_000,
        }
    }
}

impl ModelConfig {
    /// Small shapes used for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            t_p: 4,
            t_f: 2,
            num_devices: 2,
            num_antennas: 4,
            d_enc: 16,
            encoder_layers: 1,
            encoder_heads: 2,
            d_llm: 16,
            backbone_layers: 1,
            heads: 2,
            lora_rank: 2,
            lora_alpha: 4.0,
            ..Default::default()
        }
    }

    /// The desk-scale learning configuration: two encoder and two backbone
    /// layers at width 64.
    pub fn desk() -> Self {
        ModelConfig {
            t_p: 8,
            t_f: 2,
            num_devices: 2,
            num_antennas: 4,
            d_enc: 32,
            encoder_layers: 2,
            encoder_heads: 4,
            d_llm: 64,
            backbone_layers: 2,
            heads: 4,
            lora_rank: 8,
            lora_alpha: 32.0,
            ..Default::default()
        }
    }

    pub fn decoder_hidden(&self) -> usize {
        self.decoder_hidden.unwrap_or(4 * self.d_llm)
    }

    /// Patches per CSI image.
    pub fn num_patches(&self) -> usize {
        (self.num_devices / self.patch) * (self.num_antennas / self.patch)
    }

    /// Values per future slot, `2 * K * N`.
    pub fn slot_width(&self) -> usize {
        2 * self.num_devices * self.num_antennas
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.t_p == 0 || self.t_f == 0 || self.num_devices == 0 || self.num_antennas == 0 {
            return err("t_p, t_f, num_devices and num_antennas must be positive".into());
        }
        if self.d_enc == 0 || self.d_llm == 0 {
            return err("d_enc and d_llm must be positive".into());
        }
        if self.patch == 0
            || self.num_devices % self.patch != 0
            || self.num_antennas % self.patch != 0
        {
            return err(format!(
                "patch {} must divide K={} and N={}",
                self.patch, self.num_devices, self.num_antennas
            ));
        }
        if self.encoder_heads == 0 || self.d_enc % self.encoder_heads != 0 {
            return err(format!(
                "encoder heads {} must divide d_enc {}",
                self.encoder_heads, self.d_enc
            ));
        }
        if self.heads == 0 || self.d_llm % self.heads != 0 {
            return err(format!("heads {} must divide d_llm {}", self.heads, self.d_llm));
        }
        if self.lora_rank > 0 && !(self.lora_alpha > 0.0) {
            return err("lora_alpha must be positive".into());
        }
        if !(self.total_power > 0.0 && self.total_power.is_finite()) {
            return err(format!("total power must be positive, got {}", self.total_power));
        }
        if self.pe_period == 0 {
            return err("pe_period must be positive".into());
        }
        Ok(())
    }

    fn patch_embed(&self) -> PatchEmbed {
        PatchEmbed::new("enc.patch", 2, self.patch, self.d_enc)
    }

    fn encoder_layer(&self, i: usize) -> TransformerLayer {
        TransformerLayer {
            activation: Activation::Gelu,
            ..TransformerLayer::encoder(format!("enc.layer{i}"), self.d_enc, self.encoder_heads)
        }
    }

    fn backbone_layer(&self, i: usize) -> TransformerLayer {
        TransformerLayer::decoder(
            format!("llm.layer{i}"),
            self.d_llm,
            self.heads,
            self.lora_rank,
            self.lora_alpha,
        )
    }

    fn enc_ln(&self) -> LayerNorm {
        LayerNorm::new("enc.ln_f", self.d_enc)
    }

    fn enc_fc1(&self) -> Linear {
        Linear::new("enc.head.fc1", self.d_enc, self.d_llm)
    }

    fn enc_fc2(&self) -> Linear {
        Linear::new("enc.head.fc2", self.d_llm, self.d_llm)
    }

    fn llm_ln(&self) -> LayerNorm {
        LayerNorm::new("llm.ln_f", self.d_llm)
    }

    fn dec_fc1(&self) -> Linear {
        Linear::new("dec.fc1", self.t_p * self.d_llm, self.decoder_hidden())
    }

    fn dec_fc2(&self) -> Linear {
        Linear::new("dec.fc2", self.decoder_hidden(), self.t_f * self.slot_width())
    }

    /// Closed-form number of parameters trained under [`FreezePolicy::Adapters`].
    pub fn adapter_trainable_count(&self) -> usize {
        self.encoder_param_count()
            + self.decoder_param_count()
            + 2 * self.lora_rank * self.d_llm * 3 * self.backbone_layers
    }

    pub fn encoder_param_count(&self) -> usize {
        let d = self.d_enc;
        let c = 2 * self.patch * self.patch;
        let m = self.num_patches();
        let layer = 2 * 2 * d + 3 * d * d + (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d);
        (c * d + d) + d + (m + 1) * d + self.encoder_layers * layer + 2 * d
            + (d * self.d_llm + self.d_llm)
            + (self.d_llm * self.d_llm + self.d_llm)
    }

    pub fn decoder_param_count(&self) -> usize {
        let h = self.decoder_hidden();
        let out = self.t_f * self.slot_width();
        (self.t_p * self.d_llm * h + h) + (h * out + out)
    }

    pub fn backbone_base_count(&self) -> usize {
        let d = self.d_llm;
        let layer = 2 * 2 * d + 3 * d * d + (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d);
        self.backbone_layers * layer + 2 * d
    }
}

/// Per-sample standardization statistics of a CSI history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: f64,
    pub sigma: f64,
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats { mu: 0.0, sigma: 1.0 }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mu) / self.sigma
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        self.sigma * v + self.mu
    }
}

/// `[T, K, N]` complex to `[T, 2, K, N]` real/imaginary planes.
pub fn csi_to_planes(csi: &CsiTensor) -> Tensor {
    let [t, k, n] = csi.shape();
    let w = k * n;
    let mut out = vec![0.0; t * 2 * w];
    for s in 0..t {
        for (i, z) in csi.slot(s).iter().enumerate() {
            out[(2 * s) * w + i] = z.re;
            out[(2 * s + 1) * w + i] = z.im;
        }
    }
    Tensor::new(vec![t, 2, k, n], out).expect("consistent shape")
}

/// `[T, 2, K, N]` planes back to complex CSI.
pub fn planes_to_csi(
    planes: &Tensor,
    slot_interval_s: f64,
    origin_slot: usize,
) -> Result<CsiTensor> {
    let s = planes.shape();
    if s.len() != 4 || s[1] != 2 {
        return Err(ModelError::Shape(format!("expected [T, 2, K, N], got {s:?}")));
    }
    let (t, k, n) = (s[0], s[2], s[3]);
    let w = k * n;
    let d = planes.data();
    let mut data = Vec::with_capacity(t * w);
    for slot in 0..t {
        for i in 0..w {
            data.push(Complex64::new(d[(2 * slot) * w + i], d[(2 * slot + 1) * w + i]));
        }
    }
    CsiTensor::new([t, k, n], data, slot_interval_s, origin_slot)
        .map_err(|e| ModelError::Shape(e.to_string()))
}

/// Splits the history into real/imaginary images and standardizes them with
/// the mean and standard deviation of all their values.
pub fn preprocess(past: &CsiTensor) -> (Tensor, NormStats) {
    let planes = csi_to_planes(past);
    let n = planes.numel() as f64;
    let mu = planes.sum() / n;
    let var = planes.data().iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let stats = NormStats {
        mu,
        sigma: var.sqrt().max(SIGMA_FLOOR),
    };
    (planes.map(|v| stats.normalize(v)), stats)
}

/// Scales each future slot of `raw` (`[T_F, 2, K, N]`) to Frobenius norm
/// `sqrt(total_power)` and returns one beamforming matrix per slot.
pub fn normalize_beamformers(raw: &Tensor, total_power: f64) -> Result<Vec<BeamformingMatrix>> {
    let s = raw.shape();
    if s.len() != 4 || s[1] != 2 {
        return Err(ModelError::Shape(format!("expected [T_F, 2, K, N], got {s:?}")));
    }
    let (t, k, n) = (s[0], s[2], s[3]);
    let w = k * n;
    (0..t)
        .map(|slot| {
            let block = &raw.data()[slot * 2 * w..(slot + 1) * 2 * w];
            let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(ModelError::DegenerateOutput { slot });
            }
            let c = total_power.sqrt() / norm;
            let data = (0..w)
                .map(|i| Complex64::new(block[i] * c, block[w + i] * c))
                .collect();
            Ok(BeamformingMatrix::new(k, n, data).expect("consistent shape"))
        })
        .collect()
}

/// Preprocessed model inputs for a batch of histories.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// `[B, T_P, 2, K, N]` standardized images.
    pub images: Tensor,
    pub stats: Vec<NormStats>,
    /// Episode slot index of each history's first image.
    pub origins: Vec<usize>,
}

impl ModelInput {
    pub fn from_histories<'a>(past: impl IntoIterator<Item = &'a CsiTensor>) -> Result<Self> {
        let mut data = Vec::new();
        let mut stats = Vec::new();
        let mut origins = Vec::new();
        let mut shape: Option<[usize; 3]> = None;
        for p in past {
            if let Some(s) = shape {
                if s != p.shape() {
                    return Err(ModelError::Shape(format!(
                        "histories differ in shape: {s:?} vs {:?}",
                        p.shape()
                    )));
                }
            }
            shape = Some(p.shape());
            let (img, st) = preprocess(p);
            data.extend_from_slice(img.data());
            stats.push(st);
            origins.push(p.origin_slot);
        }
        let [t, k, n] = shape.ok_or_else(|| ModelError::Shape("empty batch".into()))?;
        let images = Tensor::new(vec![stats.len(), t, 2, k, n], data)?;
        Ok(ModelInput {
            images,
            stats,
            origins,
        })
    }

    pub fn batch(&self) -> usize {
        self.stats.len()
    }
}

/// A CPLLM or BFLLM instance: configuration plus parameters.
#[derive(Debug)]
pub struct LlmModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    backbone_calls: AtomicUsize,
}

impl Clone for LlmModel {
    fn clone(&self) -> Self {
        LlmModel {
            config: self.config.clone(),
            params: self.params.clone(),
            backbone_calls: AtomicUsize::new(self.backbone_calls()),
        }
    }
}

impl LlmModel {
    /// Randomly initialized model. Adapters start with `B = 0`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        config.patch_embed().init(&mut store, &mut rng)?;
        let small = Normal::new(0.0, 0.02).expect("valid std");
        let mut gauss = |shape: &[usize]| Tensor::from_fn(shape, |_| small.sample(&mut rng));
        let cls = gauss(&[1, 1, config.d_enc]);
        let pos = gauss(&[config.num_patches() + 1, config.d_enc]);
        store.insert("enc.cls", cls, true, false)?;
        store.insert("enc.pos", pos, true, false)?;
        for i in 0..config.encoder_layers {
            config.encoder_layer(i).init(&mut store, &mut rng)?;
        }
        config.enc_ln().init(&mut store)?;
        config.enc_fc1().init(&mut store, &mut rng)?;
        config.enc_fc2().init(&mut store, &mut rng)?;
        for i in 0..config.backbone_layers {
            config.backbone_layer(i).init(&mut store, &mut rng)?;
        }
        config.llm_ln().init(&mut store)?;
        config.dec_fc1().init(&mut store, &mut rng)?;
        config.dec_fc2().init(&mut store, &mut rng)?;
        Ok(LlmModel {
            config,
            params: store,
            backbone_calls: AtomicUsize::new(0),
        })
    }

    /// Wraps existing parameters. Shapes are not checked until use.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(LlmModel {
            config,
            params,
            backbone_calls: AtomicUsize::new(0),
        })
    }

    /// Marks parameters trainable or frozen according to `policy`.
    pub fn apply_freeze(&mut self, policy: FreezePolicy) {
        self.params.set_trainable_where(|_| true, true);
        if policy == FreezePolicy::Adapters {
            self.params
                .set_trainable_where(|n| is_backbone_base(n), false);
        }
    }

    /// Copies every parameter of `source` whose name starts with one of
    /// `prefixes` and also exists here. Returns how many were copied.
    pub fn load_from(&mut self, source: &ParamStore, prefixes: &[&str]) -> Result<usize> {
        let mut copied = 0;
        for (name, p) in source.iter() {
            if !prefixes.iter().any(|pre| name.starts_with(pre)) {
                continue;
            }
            if let Some(dst) = self.params.get_mut(name) {
                if dst.shape() != p.value.shape() {
                    return Err(ModelError::Shape(format!(
                        "`{name}`: {:?} here, {:?} in source",
                        dst.shape(),
                        p.value.shape()
                    )));
                }
                *dst = p.value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// SHA-256 over the backbone base weights (adapters excluded).
    pub fn backbone_checksum(&self) -> String {
        self.params.checksum_where(is_backbone_base)
    }

    pub fn backbone_calls(&self) -> usize {
        self.backbone_calls.load(Ordering::Relaxed)
    }

    pub fn reset_backbone_calls(&self) {
        self.backbone_calls.store(0, Ordering::Relaxed);
    }

    fn pe_table(&self, origins: &[usize]) -> Tensor {
        let c = &self.config;
        let mut data = Vec::with_capacity(origins.len() * c.t_p * c.d_llm);
        for &o in origins {
            for i in 0..c.t_p {
                let t = match c.pe_mode {
                    PeMode::Absolute => (o + i) % c.pe_period,
                    PeMode::Relative => i,
                };
                data.extend(sinusoidal_pe(t as f64, c.d_llm));
            }
        }
        Tensor::new(vec![origins.len(), c.t_p, c.d_llm], data).expect("consistent shape")
    }

    fn check_images(&self, images: &Tensor) -> Result<usize> {
        let c = &self.config;
        let s = images.shape();
        let want = [c.t_p, 2, c.num_devices, c.num_antennas];
        if s.len() != 5 || s[1..] != want {
            return Err(ModelError::Shape(format!(
                "model expects [B, {}, 2, {}, {}] images, got {s:?}",
                c.t_p, c.num_devices, c.num_antennas
            )));
        }
        Ok(s[0])
    }

    /// Images `[B, T_P, 2, K, N]` to slot embeddings `[B, T_P, d_llm]`.
    pub fn encode(&self, g: &mut Graph, images: &Tensor, origins: &[usize]) -> Result<Var> {
        let c = &self.config;
        let b = self.check_images(images)?;
        if origins.len() != b {
            return Err(ModelError::Shape(format!("{} origins for batch {b}", origins.len())));
        }
        let bt = b * c.t_p;
        let flat = images.clone().reshaped(&[bt, 2, c.num_devices, c.num_antennas])?;
        let s = &self.params;
        let x = c.patch_embed().forward(g, s, &flat)?;
        let cls = g.param(s, "enc.cls")?;
        let cls = g.broadcast_to(cls, &[bt, 1, c.d_enc])?;
        let mut x = g.concat(&[cls, x], 1)?;
        let pos = g.param(s, "enc.pos")?;
        x = g.add(x, pos)?;
        for i in 0..c.encoder_layers {
            x = c.encoder_layer(i).forward(g, s, x)?;
        }
        x = c.enc_ln().forward(g, s, x)?;
        let x = g.slice(x, 1, 0, 1)?;
        let x = g.reshape(x, &[bt, c.d_enc])?;
        let x = c.enc_fc1().forward(g, s, x)?;
        let x = g.gelu(x);
        let x = c.enc_fc2().forward(g, s, x)?;
        let x = g.reshape(x, &[b, c.t_p, c.d_llm])?;
        let pe = g.constant(self.pe_table(origins));
        Ok(g.add(x, pe)?)
    }

    /// Causal backbone over `[B, T_P, d_llm]`.
    pub fn backbone(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let c = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != c.d_llm {
            return Err(ModelError::Shape(format!(
                "backbone expects [B, T, {}], got {shape:?}",
                c.d_llm
            )));
        }
        self.backbone_calls.fetch_add(1, Ordering::Relaxed);
        let mut x = x;
        for i in 0..c.backbone_layers {
            x = c.backbone_layer(i).forward(g, &self.params, x)?;
        }
        Ok(c.llm_ln().forward(g, &self.params, x)?)
    }

    /// Backbone output `[B, T_P, d_llm]` to raw head output `[B, T_F, 2, K, N]`.
    pub fn head(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let c = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1..] != [c.t_p, c.d_llm] {
            return Err(ModelError::Shape(format!(
                "head expects [B, {}, {}], got {shape:?}",
                c.t_p, c.d_llm
            )));
        }
        let b = shape[0];
        let x = g.reshape(x, &[b, c.t_p * c.d_llm])?;
        let x = c.dec_fc1().forward(g, &self.params, x)?;
        let x = g.gelu(x);
        let x = c.dec_fc2().forward(g, &self.params, x)?;
        Ok(g.reshape(x, &[b, c.t_f, 2, c.num_devices, c.num_antennas])?)
    }

    /// Full forward pass to the task output `[B, T_F, 2, K, N]`: denormalized
    /// CSI planes for prediction, power-normalized beamformers otherwise.
    pub fn forward(&self, g: &mut Graph, input: &ModelInput) -> Result<Var> {
        let e = self.encode(g, &input.images, &input.origins)?;
        let h = self.backbone(g, e)?;
        let raw = self.head(g, h)?;
        match self.config.task {
            Task::Prediction => self.denormalize(g, raw, &input.stats),
            Task::Beamforming => self.power_normalize(g, raw),
        }
    }

    fn denormalize(&self, g: &mut Graph, raw: Var, stats: &[NormStats]) -> Result<Var> {
        let b = stats.len();
        let sig = g.constant(Tensor::new(
            vec![b, 1, 1, 1, 1],
            stats.iter().map(|s| s.sigma).collect(),
        )?);
        let mu = g.constant(Tensor::new(
            vec![b, 1, 1, 1, 1],
            stats.iter().map(|s| s.mu).collect(),
        )?);
        let y = g.mul(raw, sig)?;
        Ok(g.add(y, mu)?)
    }

    fn power_normalize(&self, g: &mut Graph, raw: Var) -> Result<Var> {
        let c = &self.config;
        let b = g.shape(raw)[0];
        let flat = g.reshape(raw, &[b, c.t_f, c.slot_width()])?;
        for (i, row) in g.value(flat).data().chunks(c.slot_width()).enumerate() {
            if row.iter().all(|v| *v == 0.0) {
                return Err(ModelError::DegenerateOutput { slot: i % c.t_f });
            }
        }
        let sq = g.square(flat)?;
        let norm = g.sum_axis(sq, 2, true)?;
        let norm = g.sqrt(norm);
        let y = g.div(flat, norm)?;
        let y = g.scale(y, c.total_power.sqrt());
        Ok(g.reshape(y, &[b, c.t_f, 2, c.num_devices, c.num_antennas])?)
    }

    fn check_past(&self, past: &CsiTensor) -> Result<()> {
        let c = &self.config;
        if past.shape() != [c.t_p, c.num_devices, c.num_antennas] {
            return Err(ModelError::Shape(format!(
                "model expects a [{}, {}, {}] history, got {:?}",
                c.t_p,
                c.num_devices,
                c.num_antennas,
                past.shape()
            )));
        }
        Ok(())
    }

    /// Slot embeddings `[T_P, d_llm]` of one preprocessed history `[T_P, 2, K, N]`.
    pub fn encode_csi(&self, images: &Tensor, origin_slot: usize) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(images.shape());
        let batched = images.clone().reshaped(&shape)?;
        let mut g = Graph::new();
        let e = self.encode(&mut g, &batched, &[origin_slot])?;
        Ok(g.value(e).clone().reshaped(&[self.config.t_p, self.config.d_llm])?)
    }

    /// Backbone on `[T, d_llm]` embeddings.
    pub fn backbone_forward(&self, embeddings: &Tensor) -> Result<Tensor> {
        let s = embeddings.shape().to_vec();
        if s.len() != 2 {
            return Err(ModelError::Shape(format!("expected [T, d_llm], got {s:?}")));
        }
        let mut g = Graph::new();
        let x = g.constant(embeddings.clone().reshaped(&[1, s[0], s[1]])?);
        let y = self.backbone(&mut g, x)?;
        Ok(g.value(y).clone().reshaped(&s)?)
    }

    fn head_values(&self, llm_out: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let mut g = Graph::new();
        let mut shape = vec![1];
        shape.extend_from_slice(llm_out.shape());
        let x = g.constant(llm_out.clone().reshaped(&shape)?);
        let y = self.head(&mut g, x)?;
        Ok(g
            .value(y)
            .clone()
            .reshaped(&[c.t_f, 2, c.num_devices, c.num_antennas])?)
    }

    /// Decoder head plus denormalization and complex recombination.
    pub fn decode_csi(
        &self,
        llm_out: &Tensor,
        stats: NormStats,
        slot_interval_s: f64,
        origin_slot: usize,
    ) -> Result<CsiTensor> {
        let raw = self.head_values(llm_out)?;
        let planes = raw.map(|v| stats.denormalize(v));
        planes_to_csi(&planes, slot_interval_s, origin_slot)
    }

    /// Decoder head plus per-slot power normalization.
    pub fn decode_bf(&self, llm_out: &Tensor) -> Result<Vec<BeamformingMatrix>> {
        let raw = self.head_values(llm_out)?;
        normalize_beamformers(&raw, self.config.total_power)
    }

    /// Predicts the next `T_F` slots of CSI from one history, in one pass.
    pub fn cpllm_predict(&self, past: &CsiTensor) -> Result<CsiTensor> {
        self.check_past(past)?;
        let (images, stats) = preprocess(past);
        let e = self.encode_csi(&images, past.origin_slot)?;
        let h = self.backbone_forward(&e)?;
        self.decode_csi(
            &h,
            stats,
            past.slot_interval_s,
            past.origin_slot + self.config.t_p,
        )
    }

    /// Beamformers for the next `T_F` slots from one history.
    pub fn bfllm_predict(&self, past: &CsiTensor) -> Result<Vec<BeamformingMatrix>> {
        self.check_past(past)?;
        let (images, _) = preprocess(past);
        let e = self.encode_csi(&images, past.origin_slot)?;
        let h = self.backbone_forward(&e)?;
        self.decode_bf(&h)
    }

    /// Rolls a one-slot model forward `t_f` times, feeding each prediction
    /// back into the history window.
    pub fn autoregressive_predict(&self, past: &CsiTensor, t_f: usize) -> Result<CsiTensor> {
        if self.config.t_f != 1 {
            return Err(ModelError::Config(format!(
                "autoregressive decoding needs a one-slot head, this one emits {}",
                self.config.t_f
            )));
        }
        self.check_past(past)?;
        let mut window = past.clone();
        let mut out: Option<CsiTensor> = None;
        for _ in 0..t_f {
            let next = self.cpllm_predict(&window)?;
            let extended = window.concat(&next).map_err(|e| ModelError::Shape(e.to_string()))?;
            window = extended
                .slice_slots(1, self.config.t_p + 1)
                .map_err(|e| ModelError::Shape(e.to_string()))?;
            out = Some(match out {
                None => next,
                Some(acc) => acc.concat(&next).map_err(|e| ModelError::Shape(e.to_string()))?,
            });
        }
        out.ok_or_else(|| ModelError::Config("t_f must be at least 1".into()))
    }

    /// Writes `model.json` and the parameter checkpoint into `dir`.
    pub fn save(&self, dir: &Path, dtype: BlobType) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&self.config)?;
        std::fs::write(dir.join(MODEL_FILE), json)?;
        self.params.save(dir, dtype)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MODEL_FILE))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        config.validate()?;
        let params = ParamStore::load(dir)?;
        let reference = LlmModel::new(config.clone(), 0)?;
        for (name, p) in reference.params.iter() {
            match params.get(name) {
                Some(t) if t.shape() == p.value.shape() => {}
                Some(t) => {
                    return Err(ModelError::Shape(format!(
                        "checkpoint `{name}` has shape {:?}, config implies {:?}",
                        t.shape(),
                        p.value.shape()
                    )))
                }
                None => return Err(AutodiffError::MissingParam(name.clone()).into()),
            }
        }
        Ok(LlmModel {
            config,
            params,
            backbone_calls: AtomicUsize::new(0),
        })
    }
}

/// Backbone weights other than LoRA adapters.
pub fn is_backbone_base(name: &str) -> bool {
    name.starts_with("llm.") && !name.contains(".lora_")
}
