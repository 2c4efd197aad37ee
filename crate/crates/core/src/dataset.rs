//! (history, future) CSI pairs with simulated estimation noise, and their
//! on-disk form: a directory holding `meta.json` and `data.bin`.
//!
//! `data.bin` is a headerless stream of little-endian `f32`, laid out
//! `[sample][slot][re/im][K][N]` with the `t_p` history slots before the
//! `t_f` future slots of each sample.

use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    derive_seed, generate_episode, kmh_to_mps, ChannelError, CsiError, CsiTensor, ScenarioConfig,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("short read: expected {expected} bytes, found {found}")]
    ShortRead { expected: u64, found: u64 },
    #[error("invalid dataset request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Csi(#[from] CsiError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// How device speeds are assigned to samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpeedPolicy {
    /// Every device draws its own speed uniformly from the range.
    Uniform { min_kmh: f64, max_kmh: f64 },
    /// Samples cycle through the listed speeds in equal shares; all devices
    /// of a sample share the speed.
    Discrete { speeds_kmh: Vec<f64> },
}

impl SpeedPolicy {
    pub fn train_default() -> Self {
        Self::Uniform {
            min_kmh: 10.0,
            max_kmh: 100.0,
        }
    }

    /// 10, 20, …, 100 km/h.
    pub fn test_default() -> Self {
        Self::Discrete {
            speeds_kmh: (1..=10).map(|i| 10.0 * i as f64).collect(),
        }
    }
}

/// How estimation noise is injected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SnrPolicy {
    /// One SNR per sample, uniform in the range, applied to history and future.
    UniformBoth { min_db: f64, max_db: f64 },
    /// Fixed SNR on the history only; future labels stay clean.
    FixedPast { snr_db: f64 },
    Clean,
}

impl SnrPolicy {
    pub fn train_default() -> Self {
        Self::UniformBoth {
            min_db: 5.0,
            max_db: 20.0,
        }
    }

    pub fn test_default() -> Self {
        Self::FixedPast { snr_db: 15.0 }
    }

    pub fn noises_future(&self) -> bool {
        matches!(self, Self::UniformBoth { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub past: CsiTensor,
    pub future: CsiTensor,
    pub device_speeds_mps: Vec<f64>,
    /// `None` when no noise was added.
    pub noise_snr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub scenario: ScenarioConfig,
    pub m: usize,
    pub t_p: usize,
    pub t_f: usize,
    pub split: Split,
    pub seed: u64,
    pub snr_policy: SnrPolicy,
    pub speed_policy: SpeedPolicy,
    /// Whether future slots carry estimation noise.
    pub future_noised: bool,
    /// Number of `f32` values in `data.bin`.
    pub payload_values: u64,
    /// Per-sample device speeds (m/s), `m × K`.
    pub speeds_mps: Vec<Vec<f64>>,
    /// Per-sample SNR, `null` for clean samples.
    pub noise_snr_db: Vec<Option<f64>>,
}

impl DatasetMeta {
    pub fn values_per_sample(&self) -> usize {
        (self.t_p + self.t_f) * 2 * self.scenario.num_devices * self.scenario.num_antennas()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<SampleRecord>,
}

/// Adds circularly-symmetric Gaussian noise with per-element power
/// `mean(|csi|²) / 10^(snr_db/10)`. `+∞` leaves the input unchanged.
pub fn add_estimation_noise(csi: &CsiTensor, snr_db: f64, rng_seed: u64) -> CsiTensor {
    if snr_db == f64::INFINITY {
        return csi.clone();
    }
    let noise_power = csi.mean_power() / 10f64.powf(snr_db / 10.0);
    let sd = (noise_power / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = csi.clone();
    for v in out.data_mut() {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *v += Complex64::new(re * sd, im * sd);
    }
    out
}

fn round_f32(mut csi: CsiTensor) -> CsiTensor {
    for v in csi.data_mut() {
        *v = Complex64::new(v.re as f32 as f64, v.im as f32 as f64);
    }
    csi
}

/// Everything that defines a dataset build.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub scenario: ScenarioConfig,
    pub count: usize,
    pub speed_policy: SpeedPolicy,
    pub snr_policy: SnrPolicy,
    pub t_p: usize,
    pub t_f: usize,
    pub split: Split,
    pub seed: u64,
}

impl DatasetSpec {
    /// Training split: uniform speeds, noise on history and future.
    pub fn train(scenario: ScenarioConfig, count: usize, t_p: usize, t_f: usize, seed: u64) -> Self {
        Self {
            scenario,
            count,
            speed_policy: SpeedPolicy::train_default(),
            snr_policy: SnrPolicy::train_default(),
            t_p,
            t_f,
            split: Split::Train,
            seed,
        }
    }

    /// Test split: ten discrete speeds, noise on history only.
    pub fn test(scenario: ScenarioConfig, count: usize, t_p: usize, t_f: usize, seed: u64) -> Self {
        Self {
            scenario,
            count,
            speed_policy: SpeedPolicy::test_default(),
            snr_policy: SnrPolicy::test_default(),
            t_p,
            t_f,
            split: Split::Test,
            seed,
        }
    }
}

/// Builds the dataset described by `spec`. Samples are generated in parallel
/// from per-sample seeds, so the result does not depend on thread count.
/// Values are rounded to `f32` precision so the persisted form is exact.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.scenario.validate()?;
    if spec.count == 0 || spec.t_p == 0 || spec.t_f == 0 {
        return Err(DatasetError::Invalid(
            "count, t_p and t_f must all be ≥ 1".into(),
        ));
    }
    match &spec.speed_policy {
        SpeedPolicy::Discrete { speeds_kmh } => {
            if speeds_kmh.is_empty() || spec.count % speeds_kmh.len() != 0 {
                return Err(DatasetError::Invalid(format!(
                    "count {} is not a multiple of the {} discrete speeds",
                    spec.count,
                    speeds_kmh.len()
                )));
            }
        }
        SpeedPolicy::Uniform { min_kmh, max_kmh } => {
            if !(*min_kmh >= 0.0 && max_kmh >= min_kmh) {
                return Err(DatasetError::Invalid("bad uniform speed range".into()));
            }
        }
    }
    let samples = (0..spec.count)
        .into_par_iter()
        .map(|i| build_sample(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let k = spec.scenario.num_devices;
    let n = spec.scenario.num_antennas();
    let meta = DatasetMeta {
        schema_version: SCHEMA_VERSION,
        scenario: spec.scenario.clone(),
        m: spec.count,
        t_p: spec.t_p,
        t_f: spec.t_f,
        split: spec.split,
        seed: spec.seed,
        snr_policy: spec.snr_policy.clone(),
        speed_policy: spec.speed_policy.clone(),
        future_noised: spec.snr_policy.noises_future(),
        payload_values: (spec.count * (spec.t_p + spec.t_f) * 2 * k * n) as u64,
        speeds_mps: samples.iter().map(|s| s.device_speeds_mps.clone()).collect(),
        noise_snr_db: samples.iter().map(|s| s.noise_snr_db).collect(),
    };
    Ok(Dataset { meta, samples })
}

fn build_sample(spec: &DatasetSpec, index: usize) -> Result<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index as u64));
    let k = spec.scenario.num_devices;
    let speeds: Vec<f64> = match &spec.speed_policy {
        SpeedPolicy::Uniform { min_kmh, max_kmh } => (0..k)
            .map(|_| {
                let v = if max_kmh > min_kmh {
                    rng.random_range(*min_kmh..=*max_kmh)
                } else {
                    *min_kmh
                };
                kmh_to_mps(v)
            })
            .collect(),
        SpeedPolicy::Discrete { speeds_kmh } => {
            let per = spec.count / speeds_kmh.len();
            vec![kmh_to_mps(speeds_kmh[index / per]); k]
        }
    };
    let episode_seed: u64 = rng.random();
    let noise_seed: u64 = rng.random();
    let total = spec.t_p + spec.t_f;
    let episode = generate_episode(&spec.scenario, &speeds, total, episode_seed)?;
    let (past, future, snr) = match spec.snr_policy {
        SnrPolicy::UniformBoth { min_db, max_db } => {
            let snr = if max_db > min_db {
                rng.random_range(min_db..=max_db)
            } else {
                min_db
            };
            let noisy = add_estimation_noise(&episode, snr, noise_seed);
            (
                noisy.slice_slots(0, spec.t_p)?,
                noisy.slice_slots(spec.t_p, total)?,
                Some(snr),
            )
        }
        SnrPolicy::FixedPast { snr_db } => {
            let past = episode.slice_slots(0, spec.t_p)?;
            (
                add_estimation_noise(&past, snr_db, noise_seed),
                episode.slice_slots(spec.t_p, total)?,
                Some(snr_db),
            )
        }
        SnrPolicy::Clean => (
            episode.slice_slots(0, spec.t_p)?,
            episode.slice_slots(spec.t_p, total)?,
            None,
        ),
    };
    Ok(SampleRecord {
        past: round_f32(past),
        future: round_f32(future),
        device_speeds_mps: speeds,
        noise_snr_db: snr,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Copy holding only the samples at `indices`.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let samples: Vec<SampleRecord> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        let mut meta = self.meta.clone();
        meta.m = samples.len();
        meta.payload_values = (samples.len() * meta.values_per_sample()) as u64;
        meta.speeds_mps = samples.iter().map(|s| s.device_speeds_mps.clone()).collect();
        meta.noise_snr_db = samples.iter().map(|s| s.noise_snr_db).collect();
        Dataset { meta, samples }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| DatasetError::CorruptHeader(e.to_string()))?;
        fs::write(dir.join("meta.json"), json)?;
        let mut buf = Vec::with_capacity(self.meta.payload_values as usize * 4);
        for s in &self.samples {
            for csi in [&s.past, &s.future] {
                write_csi(&mut buf, csi);
            }
        }
        let mut f = fs::File::create(dir.join("data.bin"))?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let text = fs::read_to_string(dir.join("meta.json"))?;
        let meta: DatasetMeta =
            serde_json::from_str(&text).map_err(|e| DatasetError::CorruptHeader(e.to_string()))?;
        if meta.schema_version != SCHEMA_VERSION {
            return Err(DatasetError::CorruptHeader(format!(
                "unsupported schema_version {}",
                meta.schema_version
            )));
        }
        let k = meta.scenario.num_devices;
        let n = meta.scenario.num_antennas();
        let per_sample = meta.values_per_sample();
        if meta.payload_values != (meta.m * per_sample) as u64 {
            return Err(DatasetError::DimensionMismatch(format!(
                "payload holds {} values but m={} t_p={} t_f={} K={k} N={n} need {}",
                meta.payload_values,
                meta.m,
                meta.t_p,
                meta.t_f,
                meta.m * per_sample
            )));
        }
        if meta.speeds_mps.len() != meta.m
            || meta.speeds_mps.iter().any(|s| s.len() != k)
            || meta.noise_snr_db.len() != meta.m
        {
            return Err(DatasetError::DimensionMismatch(
                "per-sample speed/SNR labels do not match m × K".into(),
            ));
        }
        let bytes = fs::read(dir.join("data.bin"))?;
        let expected = meta.payload_values * 4;
        let found = bytes.len() as u64;
        if found < expected {
            return Err(DatasetError::ShortRead { expected, found });
        }
        if found > expected {
            return Err(DatasetError::DimensionMismatch(format!(
                "data.bin has {found} bytes, meta describes {expected}"
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let dt = meta.scenario.slot_interval_s;
        let samples = values
            .chunks_exact(per_sample)
            .enumerate()
            .map(|(i, chunk)| {
                let split_at = meta.t_p * 2 * k * n;
                let past = read_csi(&chunk[..split_at], meta.t_p, k, n, dt, 0)?;
                let future = read_csi(&chunk[split_at..], meta.t_f, k, n, dt, meta.t_p)?;
                Ok(SampleRecord {
                    past,
                    future,
                    device_speeds_mps: meta.speeds_mps[i].clone(),
                    noise_snr_db: meta.noise_snr_db[i],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { meta, samples })
    }
}

fn write_csi(buf: &mut Vec<u8>, csi: &CsiTensor) {
    let w = csi.devices() * csi.antennas();
    for t in 0..csi.slots() {
        let slot = csi.slot(t);
        for part in 0..2 {
            for v in &slot[..w] {
                let x = if part == 0 { v.re } else { v.im };
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
}

fn read_csi(
    values: &[f32],
    slots: usize,
    k: usize,
    n: usize,
    dt: f64,
    origin: usize,
) -> Result<CsiTensor> {
    let w = k * n;
    let mut data = Vec::with_capacity(slots * w);
    for t in 0..slots {
        let base = t * 2 * w;
        for i in 0..w {
            data.push(Complex64::new(values[base + i] as f64, values[base + w + i] as f64));
        }
    }
    Ok(CsiTensor::new([slots, k, n], data, dt, origin)?)
}
