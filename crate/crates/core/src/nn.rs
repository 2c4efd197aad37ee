//! Neural building blocks on top of [`crate::autodiff`]: linear and LoRA
//! layers, patch embedding, pre-norm Transformer layers and the sinusoidal
//! slot encoding.
//!
//! Blocks are plain descriptors (names and sizes). Their weights live in a
//! [`ParamStore`] under `<name>.<field>` keys.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, ParamStore, Result, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Relu => g.relu(x),
        }
    }
}

fn gaussian(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

/// `y = x Wᵀ + b`, `W` stored `[d_out × d_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self {
            name: name.into(),
            d_in,
            d_out,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let std = 1.0 / (self.d_in as f64).sqrt();
        store.insert(
            &format!("{}.w", self.name),
            gaussian(rng, &[self.d_out, self.d_in], std),
            true,
            true,
        )?;
        if self.bias {
            store.insert(&format!("{}.b", self.name), Tensor::zeros(&[self.d_out]), true, false)?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.w", self.name))?;
        let y = g.matmul_opt(x, w, true)?;
        if self.bias {
            let b = g.param(store, &format!("{}.b", self.name))?;
            g.add(y, b)
        } else {
            Ok(y)
        }
    }
}

/// Linear map with a low-rank adapter: `y = x Wᵀ + (α/r)·x Aᵀ Bᵀ`.
///
/// `A` is `[r × d_in]` (Gaussian init), `B` is `[d_out × r]` (zero init), so
/// a fresh adapter leaves the base map untouched. Rank 0 means no adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLinear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraLinear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Self {
        Self {
            name: name.into(),
            d_in,
            d_out,
            rank,
            alpha,
        }
    }

    pub fn base_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn a_name(&self) -> String {
        format!("{}.lora_a", self.name)
    }

    pub fn b_name(&self) -> String {
        format!("{}.lora_b", self.name)
    }

    pub fn init_base(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let std = 1.0 / (self.d_in as f64).sqrt();
        store.insert(&self.base_name(), gaussian(rng, &[self.d_out, self.d_in], std), true, true)
    }

    pub fn init_adapter(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        if self.rank == 0 {
            return Ok(());
        }
        let std = 1.0 / (self.d_in as f64).sqrt();
        store.insert(&self.a_name(), gaussian(rng, &[self.rank, self.d_in], std), true, false)?;
        store.insert(&self.b_name(), Tensor::zeros(&[self.d_out, self.rank]), true, false)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.init_base(store, rng)?;
        self.init_adapter(store, rng)
    }

    pub fn scaling(&self) -> f64 {
        if self.rank == 0 {
            0.0
        } else {
            self.alpha / self.rank as f64
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.base_name())?;
        let base = g.matmul_opt(x, w, true)?;
        if self.rank == 0 {
            return Ok(base);
        }
        let a = g.param(store, &self.a_name())?;
        let b = g.param(store, &self.b_name())?;
        let down = g.matmul_opt(x, a, true)?;
        let up = g.matmul_opt(down, b, true)?;
        let up = g.scale(up, self.scaling());
        g.add(base, up)
    }

    /// Merged weight `W + (α/r)·B·A`, `[d_out × d_in]`.
    pub fn effective_weight(&self, store: &ParamStore) -> Result<Tensor> {
        let w = store
            .get(&self.base_name())
            .ok_or_else(|| AutodiffError::MissingParam(self.base_name()))?;
        let mut out = w.clone();
        if self.rank == 0 {
            return Ok(out);
        }
        let a = store.get(&self.a_name()).ok_or_else(|| AutodiffError::MissingParam(self.a_name()))?;
        let b = store.get(&self.b_name()).ok_or_else(|| AutodiffError::MissingParam(self.b_name()))?;
        let s = self.scaling();
        let (r, d_in) = (self.rank, self.d_in);
        let od = out.data_mut();
        for o in 0..self.d_out {
            for i in 0..d_in {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += b.data()[o * r + k] * a.data()[k * d_in + i];
                }
                od[o * d_in + i] += s * acc;
            }
        }
        Ok(out)
    }
}

/// Layer norm over the last axis with learned gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub name: String,
    pub width: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, width: usize) -> Self {
        Self {
            name: name.into(),
            width,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(&format!("{}.g", self.name), Tensor::full(&[self.width], 1.0), true, false)?;
        store.insert(&format!("{}.b", self.name), Tensor::zeros(&[self.width]), true, false)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let axis = g.shape(x).len() - 1;
        let y = g.layer_norm(x, axis, LN_EPS)?;
        let gain = g.param(store, &format!("{}.g", self.name))?;
        let bias = g.param(store, &format!("{}.b", self.name))?;
        let y = g.mul(y, gain)?;
        g.add(y, bias)
    }
}

/// Splits `[.., C, K, N]` images into non-overlapping `P×P` patches, giving
/// `[.., M, C·P·P]` with `M = (K/P)·(N/P)` in row-major patch order. Each
/// patch vector is ordered (channel, row, column), matching a flattened
/// convolution kernel.
pub fn extract_patches(images: &Tensor, patch: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() < 3 {
        return Err(AutodiffError::Shape(format!("patchify needs [.., C, K, N], got {s:?}")));
    }
    let r = s.len();
    let (c, k, n) = (s[r - 3], s[r - 2], s[r - 1]);
    if patch == 0 || k % patch != 0 || n % patch != 0 {
        return Err(AutodiffError::Shape(format!(
            "patch size {patch} must divide both K={k} and N={n}"
        )));
    }
    let lead: usize = s[..r - 3].iter().product();
    let (pk, pn) = (k / patch, n / patch);
    let m = pk * pn;
    let width = c * patch * patch;
    let src = images.data();
    let mut out = Vec::with_capacity(lead * m * width);
    for b in 0..lead {
        let img = &src[b * c * k * n..(b + 1) * c * k * n];
        for bi in 0..pk {
            for bj in 0..pn {
                for ch in 0..c {
                    for i in 0..patch {
                        let row = bi * patch + i;
                        let start = (ch * k + row) * n + bj * patch;
                        out.extend_from_slice(&img[start..start + patch]);
                    }
                }
            }
        }
    }
    let mut shape = s[..r - 3].to_vec();
    shape.extend([m, width]);
    Tensor::new(shape, out)
}

/// Patch extraction followed by one shared linear projection to `d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbed {
    pub patch: usize,
    pub channels: usize,
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new(name: &str, channels: usize, patch: usize, d_model: usize) -> Self {
        Self {
            patch,
            channels,
            proj: Linear::new(format!("{name}.proj"), channels * patch * patch, d_model),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.proj.init(store, rng)
    }

    /// `[.., C, K, N]` images to `[.., M, d_model]` patch embeddings.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: &Tensor) -> Result<Var> {
        let patches = extract_patches(images, self.patch)?;
        let x = g.constant(patches);
        self.proj.forward(g, store, x)
    }
}

/// Pre-norm Transformer layer: `x + Attn(LN(x))` then `x + MLP(LN(x))`.
/// With `causal`, position `i` only attends to positions `≤ i`. With a
/// nonzero `lora_rank`, Q/K/V projections carry LoRA adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub prefix: String,
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub activation: Activation,
    pub causal: bool,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl TransformerLayer {
    pub fn encoder(prefix: impl Into<String>, width: usize, heads: usize) -> Self {
        Self {
            prefix: prefix.into(),
            width,
            heads,
            mlp_hidden: 4 * width,
            activation: Activation::Gelu,
            causal: false,
            lora_rank: 0,
            lora_alpha: 1.0,
        }
    }

    pub fn decoder(prefix: impl Into<String>, width: usize, heads: usize, lora_rank: usize, lora_alpha: f64) -> Self {
        Self {
            causal: true,
            lora_rank,
            lora_alpha,
            ..Self::encoder(prefix, width, heads)
        }
    }

    pub fn qkv(&self) -> [LoraLinear; 3] {
        ["q", "k", "v"].map(|p| {
            LoraLinear::new(
                format!("{}.attn.{p}", self.prefix),
                self.width,
                self.width,
                self.lora_rank,
                self.lora_alpha,
            )
        })
    }

    pub fn out_proj(&self) -> Linear {
        Linear::new(format!("{}.attn.o", self.prefix), self.width, self.width)
    }

    pub fn fc1(&self) -> Linear {
        Linear::new(format!("{}.mlp.fc1", self.prefix), self.width, self.mlp_hidden)
    }

    pub fn fc2(&self) -> Linear {
        Linear::new(format!("{}.mlp.fc2", self.prefix), self.mlp_hidden, self.width)
    }

    pub fn ln1(&self) -> LayerNorm {
        LayerNorm::new(format!("{}.ln1", self.prefix), self.width)
    }

    pub fn ln2(&self) -> LayerNorm {
        LayerNorm::new(format!("{}.ln2", self.prefix), self.width)
    }

    fn check(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(AutodiffError::Shape(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    /// Base weights and (if any) adapters.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.check()?;
        self.ln1().init(store)?;
        for p in self.qkv() {
            p.init_base(store, rng)?;
        }
        self.out_proj().init(store, rng)?;
        self.ln2().init(store)?;
        self.fc1().init(store, rng)?;
        self.fc2().init(store, rng)?;
        self.init_adapters(store, rng)
    }

    pub fn init_adapters(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for p in self.qkv() {
            p.init_adapter(store, rng)?;
        }
        Ok(())
    }

    /// `x` is `[B, S, d]` or `[S, d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.check()?;
        let shape = g.shape(x).to_vec();
        let x3 = match shape.len() {
            2 => g.reshape(x, &[1, shape[0], shape[1]])?,
            3 => x,
            _ => return Err(AutodiffError::Shape(format!("layer input must be rank 2 or 3, got {shape:?}"))),
        };
        if g.shape(x3)[2] != self.width {
            return Err(AutodiffError::Shape(format!(
                "layer width {} but input is {shape:?}",
                self.width
            )));
        }
        let h = self.ln1().forward(g, store, x3)?;
        let a = self.attention(g, store, h)?;
        let x3 = g.add(x3, a)?;
        let h = self.ln2().forward(g, store, x3)?;
        let h = self.fc1().forward(g, store, h)?;
        let h = self.activation.apply(g, h);
        let h = self.fc2().forward(g, store, h)?;
        let y = g.add(x3, h)?;
        if shape.len() == 2 {
            g.reshape(y, &shape)
        } else {
            Ok(y)
        }
    }

    fn attention(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, len, d) = (s[0], s[1], s[2]);
        let h = self.heads;
        let dh = d / h;
        let [pq, pk, pv] = self.qkv();
        let split = |g: &mut Graph, p: &LoraLinear| -> Result<Var> {
            let y = p.forward(g, store, x)?;
            let y = g.reshape(y, &[b, len, h, dh])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            g.reshape(y, &[b * h, len, dh])
        };
        let q = split(g, &pq)?;
        let k = split(g, &pk)?;
        let v = split(g, &pv)?;
        let scores = g.matmul_opt(q, k, true)?;
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        if self.causal {
            let mask = g.constant(causal_mask(len));
            scores = g.add(scores, mask)?;
        }
        let attn = g.softmax(scores, 2)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.reshape(ctx, &[b, h, len, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, len, d])?;
        self.out_proj().forward(g, store, ctx)
    }
}

/// `[S × S]` additive mask: 0 on and below the diagonal, large negative above.
pub fn causal_mask(len: usize) -> Tensor {
    Tensor::from_fn(&[len, len], |i| if i % len > i / len { MASKED } else { 0.0 })
}

/// Slot encoding with 1-based component index `i`:
/// `sin(t / 10000^(i/d))` for even `i`, `cos(t / 10000^((i-1)/d))` for odd `i`.
pub fn sinusoidal_pe(t: f64, d: usize) -> Vec<f64> {
    (1..=d)
        .map(|i| {
            if i % 2 == 0 {
                (t / 10000f64.powf(i as f64 / d as f64)).sin()
            } else {
                (t / 10000f64.powf((i - 1) as f64 / d as f64)).cos()
            }
        })
        .collect()
}
