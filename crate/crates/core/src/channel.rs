//! Time-correlated downlink CSI for a LEO satellite serving K single-antenna
//! devices from a uniform planar array.
//!
//! Each device sees a Rician channel: a LOS path plus `L` scattered paths.
//! All paths of one device share the satellite Doppler; every path carries
//! its own device Doppler. Propagation parameters are drawn once per device
//! and held for the whole episode.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Propagation speed used for wavelength and Doppler (m/s).
pub const SPEED_OF_LIGHT: f64 = 3.0e8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ChannelError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("a device needs at least one scattered path")]
    NoPaths,
    #[error("expected {expected} device speeds, got {found}")]
    SpeedCount { expected: usize, found: usize },
    #[error("episode length must be at least one slot")]
    EmptyEpisode,
}

pub type Result<T> = std::result::Result<T, ChannelError>;

/// Uniform planar array: `n_x × n_y` elements with spacing `spacing` (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub n_x: usize,
    pub n_y: usize,
    pub spacing: f64,
    pub wavelength: f64,
}

impl ArrayGeometry {
    /// Half-wavelength array for the given carrier.
    pub fn half_wavelength(n_x: usize, n_y: usize, carrier_hz: f64) -> Self {
        let wavelength = SPEED_OF_LIGHT / carrier_hz;
        Self {
            n_x,
            n_y,
            spacing: wavelength / 2.0,
            wavelength,
        }
    }

    pub fn num_antennas(&self) -> usize {
        self.n_x * self.n_y
    }
}

/// Steering vector of the UPA towards (`theta`, `phi`).
///
/// Element `p * n_y + q` is `exp(-j2πd(p sinθ sinφ + q cosφ)/λ) / √N`, i.e.
/// the x-axis factor is the outer factor of the Kronecker product.
pub fn array_response(theta: f64, phi: f64, geometry: &ArrayGeometry) -> Vec<Complex64> {
    let n = geometry.num_antennas();
    let norm = 1.0 / (n as f64).sqrt();
    let k = 2.0 * PI * geometry.spacing / geometry.wavelength;
    let ux = theta.sin() * phi.sin();
    let uy = phi.cos();
    let mut out = Vec::with_capacity(n);
    for p in 0..geometry.n_x {
        for q in 0..geometry.n_y {
            let phase = -k * (p as f64 * ux + q as f64 * uy);
            out.push(Complex64::from_polar(norm, phase));
        }
    }
    out
}

/// Physical parameters of the link. Defaults reproduce the reference LEO
/// setting: 5 GHz carrier, 600 km altitude, 7.5 km/s, 6 scattered paths,
/// 10 dB Rician factor, 4×4 array, 10 devices, 0.5 ms slots, 30 ns maximum
/// delay spread, noise −10 dBW and 0 dBW transmit power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub carrier_hz: f64,
    pub altitude_m: f64,
    pub sat_speed_mps: f64,
    pub num_paths: usize,
    pub rician_db: f64,
    pub num_devices: usize,
    pub slot_interval_s: f64,
    pub max_delay_spread_s: f64,
    /// Inclusive range device speeds are drawn from when a policy asks for it.
    pub device_speed_range_mps: [f64; 2],
    pub noise_power: f64,
    pub total_power: f64,
    pub n_x: usize,
    pub n_y: usize,
    /// Element spacing in wavelengths.
    pub spacing_wavelengths: f64,
    pub angles: AngleModel,
    /// Removes the common satellite Doppler term from every path.
    pub compensate_sat_doppler: bool,
}

/// Distributions for directions and Doppler geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AngleModel {
    pub los_theta_range: [f64; 2],
    pub los_phi_range: [f64; 2],
    /// Half-width of the uniform offset of scattered-path angles around LOS.
    pub nlos_spread_rad: f64,
    /// Satellite Doppler uses cos β with β ~ U[0, this].
    pub sat_doppler_max_angle: f64,
}

impl Default for AngleModel {
    fn default() -> Self {
        Self {
            los_theta_range: [-PI / 3.0, PI / 3.0],
            los_phi_range: [PI / 3.0, 2.0 * PI / 3.0],
            nlos_spread_rad: 15f64.to_radians(),
            sat_doppler_max_angle: PI / 4.0,
        }
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            carrier_hz: 5e9,
            altitude_m: 600e3,
            sat_speed_mps: 7.5e3,
            num_paths: 6,
            rician_db: 10.0,
            num_devices: 10,
            slot_interval_s: 0.5e-3,
            max_delay_spread_s: 30e-9,
            device_speed_range_mps: [kmh_to_mps(10.0), kmh_to_mps(100.0)],
            noise_power: 0.1,
            total_power: 1.0,
            n_x: 4,
            n_y: 4,
            spacing_wavelengths: 0.5,
            angles: AngleModel::default(),
            compensate_sat_doppler: false,
        }
    }
}

pub fn kmh_to_mps(v: f64) -> f64 {
    v / 3.6
}

pub fn mps_to_kmh(v: f64) -> f64 {
    v * 3.6
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

impl ScenarioConfig {
    pub fn geometry(&self) -> ArrayGeometry {
        let wavelength = SPEED_OF_LIGHT / self.carrier_hz;
        ArrayGeometry {
            n_x: self.n_x,
            n_y: self.n_y,
            spacing: self.spacing_wavelengths * wavelength,
            wavelength,
        }
    }

    pub fn num_antennas(&self) -> usize {
        self.n_x * self.n_y
    }

    pub fn kappa(&self) -> f64 {
        db_to_linear(self.rician_db)
    }

    /// Largest satellite Doppler magnitude the sampler can produce.
    pub fn max_sat_doppler_hz(&self) -> f64 {
        self.sat_speed_mps / SPEED_OF_LIGHT * self.carrier_hz
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("carrier_hz", self.carrier_hz),
            ("altitude_m", self.altitude_m),
            ("slot_interval_s", self.slot_interval_s),
            ("max_delay_spread_s", self.max_delay_spread_s),
            ("noise_power", self.noise_power),
            ("total_power", self.total_power),
            ("spacing_wavelengths", self.spacing_wavelengths),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ChannelError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.sat_speed_mps.is_finite() && self.sat_speed_mps >= 0.0) {
            return Err(ChannelError::InvalidConfig("sat_speed_mps must be ≥ 0".into()));
        }
        if !self.rician_db.is_finite() {
            return Err(ChannelError::InvalidConfig("rician_db must be finite".into()));
        }
        if self.num_paths == 0 {
            return Err(ChannelError::NoPaths);
        }
        if self.num_devices == 0 || self.n_x == 0 || self.n_y == 0 {
            return Err(ChannelError::InvalidConfig(
                "num_devices, n_x and n_y must be ≥ 1".into(),
            ));
        }
        let [lo, hi] = self.device_speed_range_mps;
        if !(lo >= 0.0 && hi >= lo) {
            return Err(ChannelError::InvalidConfig(format!(
                "device_speed_range_mps must satisfy 0 ≤ lo ≤ hi, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPath {
    pub gain: Complex64,
    pub theta: f64,
    pub phi: f64,
    pub excess_delay_s: f64,
    pub dev_doppler_hz: f64,
}

/// Propagation parameters of one device, fixed for an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceChannelParams {
    pub los_gain: Complex64,
    pub los_theta: f64,
    pub los_phi: f64,
    pub los_delay_s: f64,
    pub sat_doppler_hz: f64,
    pub dev_doppler_los_hz: f64,
    pub paths: Vec<ScatterPath>,
}

fn phasor(cycles: f64) -> Complex64 {
    Complex64::from_polar(1.0, 2.0 * PI * cycles)
}

/// LOS contribution at time `t` and frequency `f`.
pub fn los_component(
    t: f64,
    f: f64,
    params: &DeviceChannelParams,
    geometry: &ArrayGeometry,
) -> Vec<Complex64> {
    let rot = params.los_gain
        * phasor(t * (params.sat_doppler_hz + params.dev_doppler_los_hz) - f * params.los_delay_s);
    array_response(params.los_theta, params.los_phi, geometry)
        .into_iter()
        .map(|u| rot * u)
        .collect()
}

/// Scattered contribution at time `t` and frequency `f`, normalized by `1/√L`.
pub fn nlos_component(
    t: f64,
    f: f64,
    params: &DeviceChannelParams,
    geometry: &ArrayGeometry,
) -> Result<Vec<Complex64>> {
    if params.paths.is_empty() {
        return Err(ChannelError::NoPaths);
    }
    let mut out = vec![Complex64::new(0.0, 0.0); geometry.num_antennas()];
    for path in &params.paths {
        let rot = path.gain
            * phasor(t * (params.sat_doppler_hz + path.dev_doppler_hz))
            * phasor(-f * (path.excess_delay_s + params.los_delay_s));
        for (o, u) in out.iter_mut().zip(array_response(path.theta, path.phi, geometry)) {
            *o += rot * u;
        }
    }
    let norm = 1.0 / (params.paths.len() as f64).sqrt();
    out.iter_mut().for_each(|v| *v *= norm);
    Ok(out)
}

/// Rician combination `√(κ/(κ+1))·LOS + √(1/(κ+1))·NLOS`. `kappa` is linear
/// and may be `f64::INFINITY` for a pure LOS channel.
pub fn channel_at(
    t: f64,
    f: f64,
    params: &DeviceChannelParams,
    geometry: &ArrayGeometry,
    kappa: f64,
) -> Result<Vec<Complex64>> {
    if !(kappa >= 0.0) {
        return Err(ChannelError::InvalidConfig(format!("kappa must be ≥ 0, got {kappa}")));
    }
    let (w_los, w_nlos) = if kappa.is_infinite() {
        (1.0, 0.0)
    } else {
        ((kappa / (kappa + 1.0)).sqrt(), (1.0 / (kappa + 1.0)).sqrt())
    };
    let nlos = nlos_component(t, f, params, geometry)?;
    if w_los == 0.0 {
        return Ok(nlos);
    }
    let los = los_component(t, f, params, geometry);
    Ok(los
        .into_iter()
        .zip(nlos)
        .map(|(l, n)| w_los * l + w_nlos * n)
        .collect())
}

fn complex_normal(rng: &mut impl Rng) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws one device's propagation parameters. Pure in (`config`, speed, seed).
pub fn sample_device_params(
    config: &ScenarioConfig,
    device_speed_mps: f64,
    rng_seed: u64,
) -> Result<DeviceChannelParams> {
    if !(device_speed_mps >= 0.0 && device_speed_mps.is_finite()) {
        return Err(ChannelError::InvalidConfig(format!(
            "device speed must be ≥ 0, got {device_speed_mps}"
        )));
    }
    if config.num_paths == 0 {
        return Err(ChannelError::NoPaths);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let am = &config.angles;
    let fc = config.carrier_hz;
    let dev_max = device_speed_mps / SPEED_OF_LIGHT * fc;

    let los_gain = phasor(rng.random::<f64>());
    let los_theta = uniform(&mut rng, am.los_theta_range);
    let los_phi = uniform(&mut rng, am.los_phi_range);
    // slant range from the off-nadir angle
    let los_delay_s = config.altitude_m / (SPEED_OF_LIGHT * los_theta.cos().max(0.1));
    let beta = uniform(&mut rng, [0.0, am.sat_doppler_max_angle]);
    let sat_doppler_hz = if config.compensate_sat_doppler {
        0.0
    } else {
        config.max_sat_doppler_hz() * beta.cos()
    };
    let dev_doppler_los_hz = dev_max * (2.0 * PI * rng.random::<f64>()).cos();

    let spread = [-am.nlos_spread_rad, am.nlos_spread_rad];
    let paths = (0..config.num_paths)
        .map(|_| {
            let gain = complex_normal(&mut rng);
            let theta = los_theta + uniform(&mut rng, spread);
            let phi = los_phi + uniform(&mut rng, spread);
            let excess_delay_s = uniform(&mut rng, [0.0, config.max_delay_spread_s]);
            let dev_doppler_hz = dev_max * (2.0 * PI * rng.random::<f64>()).cos();
            ScatterPath {
                gain,
                theta,
                phi,
                excess_delay_s,
                dev_doppler_hz,
            }
        })
        .collect();

    Ok(DeviceChannelParams {
        los_gain,
        los_theta,
        los_phi,
        los_delay_s,
        sat_doppler_hz,
        dev_doppler_los_hz,
        paths,
    })
}

/// Complex CSI laid out `[slot][device][antenna]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiTensor {
    slots: usize,
    devices: usize,
    antennas: usize,
    data: Vec<Complex64>,
    pub slot_interval_s: f64,
    /// Absolute index of the first slot within its episode.
    pub origin_slot: usize,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CsiError {
    #[error("CSI dimensions must be positive, got {0:?}")]
    EmptyDimension([usize; 3]),
    #[error("CSI shape {shape:?} needs {expected} values, got {found}")]
    Length {
        shape: [usize; 3],
        expected: usize,
        found: usize,
    },
    #[error("CSI contains NaN or infinite values")]
    NonFinite,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
}

impl CsiTensor {
    pub fn new(
        shape: [usize; 3],
        data: Vec<Complex64>,
        slot_interval_s: f64,
        origin_slot: usize,
    ) -> std::result::Result<Self, CsiError> {
        let [slots, devices, antennas] = shape;
        if slots == 0 || devices == 0 || antennas == 0 {
            return Err(CsiError::EmptyDimension(shape));
        }
        let expected = slots * devices * antennas;
        if data.len() != expected {
            return Err(CsiError::Length {
                shape,
                expected,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CsiError::NonFinite);
        }
        Ok(Self {
            slots,
            devices,
            antennas,
            data,
            slot_interval_s,
            origin_slot,
        })
    }

    pub fn zeros(shape: [usize; 3], slot_interval_s: f64) -> Self {
        Self::new(
            shape,
            vec![Complex64::new(0.0, 0.0); shape.iter().product()],
            slot_interval_s,
            0,
        )
        .expect("positive shape")
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.slots, self.devices, self.antennas]
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn get(&self, t: usize, k: usize, n: usize) -> Complex64 {
        self.data[(t * self.devices + k) * self.antennas + n]
    }

    /// `[K × N]` matrix of slot `t`, row-major.
    pub fn slot(&self, t: usize) -> &[Complex64] {
        let w = self.devices * self.antennas;
        &self.data[t * w..(t + 1) * w]
    }

    pub fn slot_mut(&mut self, t: usize) -> &mut [Complex64] {
        let w = self.devices * self.antennas;
        &mut self.data[t * w..(t + 1) * w]
    }

    /// Slots `start..end` as a new tensor.
    pub fn slice_slots(&self, start: usize, end: usize) -> std::result::Result<Self, CsiError> {
        let w = self.devices * self.antennas;
        if end > self.slots || start >= end {
            return Err(CsiError::EmptyDimension([
                end.saturating_sub(start),
                self.devices,
                self.antennas,
            ]));
        }
        Ok(Self {
            slots: end - start,
            devices: self.devices,
            antennas: self.antennas,
            data: self.data[start * w..end * w].to_vec(),
            slot_interval_s: self.slot_interval_s,
            origin_slot: self.origin_slot + start,
        })
    }

    /// Concatenates along the slot axis.
    pub fn concat(&self, other: &CsiTensor) -> std::result::Result<Self, CsiError> {
        if self.devices != other.devices || self.antennas != other.antennas {
            return Err(CsiError::ShapeMismatch(self.shape(), other.shape()));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            slots: self.slots + other.slots,
            devices: self.devices,
            antennas: self.antennas,
            data,
            slot_interval_s: self.slot_interval_s,
            origin_slot: self.origin_slot,
        })
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn mean_power(&self) -> f64 {
        self.sq_norm() / self.data.len() as f64
    }
}

/// Derives a per-item seed so parallel generation does not depend on
/// scheduling.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.random()
}

/// Simulates `total_slots` consecutive slots for all devices. Device `k` uses
/// parameters drawn from `derive_seed(rng_seed, k)`.
pub fn generate_episode(
    config: &ScenarioConfig,
    device_speeds_mps: &[f64],
    total_slots: usize,
    rng_seed: u64,
) -> Result<CsiTensor> {
    config.validate()?;
    if total_slots == 0 {
        return Err(ChannelError::EmptyEpisode);
    }
    let k_dev = config.num_devices;
    if device_speeds_mps.len() != k_dev {
        return Err(ChannelError::SpeedCount {
            expected: k_dev,
            found: device_speeds_mps.len(),
        });
    }
    let geometry = config.geometry();
    let kappa = config.kappa();
    let n = geometry.num_antennas();
    let params = device_speeds_mps
        .iter()
        .enumerate()
        .map(|(k, &v)| sample_device_params(config, v, derive_seed(rng_seed, k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(total_slots * k_dev * n);
    for t in 0..total_slots {
        let time = t as f64 * config.slot_interval_s;
        for p in &params {
            data.extend(channel_at(time, config.carrier_hz, p, &geometry, kappa)?);
        }
    }
    Ok(CsiTensor::new([total_slots, k_dev, n], data, config.slot_interval_s, 0)
        .expect("simulated CSI is finite and well-shaped"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[Complex64]) -> f64 {
        v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
    }

    fn geom(n_x: usize, n_y: usize) -> ArrayGeometry {
        ArrayGeometry::half_wavelength(n_x, n_y, 5e9)
    }

    #[test]
    fn single_antenna_response_is_one() {
        let u = array_response(0.7, 1.1, &geom(1, 1));
        assert_eq!(u, vec![Complex64::new(1.0, 0.0)]);
    }

    #[test]
    fn broadside_response_is_flat() {
        let u = array_response(0.0, PI / 2.0, &geom(4, 4));
        assert_eq!(u.len(), 16);
        for v in u {
            assert!((v - Complex64::new(0.25, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn endfire_pair_alternates_sign() {
        let u = array_response(PI / 2.0, PI / 2.0, &geom(2, 1));
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((u[0] - Complex64::new(s, 0.0)).norm() < 1e-15);
        assert!((u[1] - Complex64::new(-s, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn kronecker_order_has_x_outer() {
        // only the x phase varies when cos φ = 0, so entries repeat in blocks of n_y
        let u = array_response(0.4, PI / 2.0, &geom(2, 3));
        assert!((u[0] - u[1]).norm() < 1e-12);
        assert!((u[1] - u[2]).norm() < 1e-12);
        assert!((u[2] - u[3]).norm() > 0.1);
    }

    fn simple_params(theta: f64, phi: f64) -> DeviceChannelParams {
        DeviceChannelParams {
            los_gain: Complex64::new(1.0, 0.0),
            los_theta: theta,
            los_phi: phi,
            los_delay_s: 0.0,
            sat_doppler_hz: 1000.0,
            dev_doppler_los_hz: 250.0,
            paths: vec![ScatterPath {
                gain: Complex64::new(1.0, 0.0),
                theta: 0.3,
                phi: 1.2,
                excess_delay_s: 0.0,
                dev_doppler_hz: 0.0,
            }],
        }
    }

    #[test]
    fn los_at_origin_is_steering_vector() {
        let g = geom(4, 4);
        let p = simple_params(0.2, 1.3);
        assert_eq!(los_component(0.0, 5e9, &p, &g), array_response(0.2, 1.3, &g));
    }

    #[test]
    fn los_norm_and_period() {
        let g = geom(4, 4);
        let mut p = simple_params(0.2, 1.3);
        p.los_gain = Complex64::from_polar(1.0, 0.9);
        let h0 = los_component(0.0, 5e9, &p, &g);
        assert!((norm(&h0) - 1.0).abs() < 1e-12);
        let period = 1.0 / (p.sat_doppler_hz + p.dev_doppler_los_hz);
        let h1 = los_component(period, 5e9, &p, &g);
        for (a, b) in h0.iter().zip(&h1) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn single_zero_phase_path() {
        let g = geom(2, 2);
        let mut p = simple_params(0.0, 1.0);
        p.sat_doppler_hz = 0.0;
        assert_eq!(
            nlos_component(0.0, 5e9, &p, &g).unwrap(),
            array_response(0.3, 1.2, &g)
        );
    }

    #[test]
    fn nlos_rejects_empty_paths() {
        let mut p = simple_params(0.0, 1.0);
        p.paths.clear();
        assert_eq!(nlos_component(0.0, 5e9, &p, &geom(2, 2)), Err(ChannelError::NoPaths));
    }

    #[test]
    fn rician_limits() {
        let g = geom(4, 4);
        let cfg = ScenarioConfig::default();
        let p = sample_device_params(&cfg, 10.0, 3).unwrap();
        let t = 1.7e-3;
        let nlos = nlos_component(t, 5e9, &p, &g).unwrap();
        assert_eq!(channel_at(t, 5e9, &p, &g, 0.0).unwrap(), nlos);
        let los = los_component(t, 5e9, &p, &g);
        let h = channel_at(t, 5e9, &p, &g, 1e12).unwrap();
        let diff: Vec<Complex64> = h.iter().zip(&los).map(|(a, b)| a - b).collect();
        assert!(norm(&diff) / norm(&los) < 1e-5);
    }

    #[test]
    fn doppler_bounds_and_static_device() {
        let cfg = ScenarioConfig::default();
        assert!((cfg.max_sat_doppler_hz() - 125e3).abs() < 1e-6);
        for seed in 0..200 {
            let p = sample_device_params(&cfg, 0.0, seed).unwrap();
            assert!(p.sat_doppler_hz.abs() <= 125e3);
            assert_eq!(p.dev_doppler_los_hz, 0.0);
            assert!(p.paths.iter().all(|q| q.dev_doppler_hz == 0.0));
            assert!(p
                .paths
                .iter()
                .all(|q| (0.0..=cfg.max_delay_spread_s).contains(&q.excess_delay_s)));
        }
        let v = kmh_to_mps(100.0);
        let bound = v / SPEED_OF_LIGHT * cfg.carrier_hz;
        let p = sample_device_params(&cfg, v, 9).unwrap();
        assert!(p.paths.iter().all(|q| q.dev_doppler_hz.abs() <= bound));
        assert_eq!(p, sample_device_params(&cfg, v, 9).unwrap());
    }

    #[test]
    fn episode_shape_and_validation() {
        let cfg = ScenarioConfig::default();
        let h = generate_episode(&cfg, &[kmh_to_mps(30.0); 10], 20, 1).unwrap();
        assert_eq!(h.shape(), [20, 10, 16]);
        assert_eq!(
            generate_episode(&cfg, &[1.0; 3], 20, 1),
            Err(ChannelError::SpeedCount {
                expected: 10,
                found: 3
            })
        );
        assert_eq!(generate_episode(&cfg, &[1.0; 10], 0, 1), Err(ChannelError::EmptyEpisode));
    }

    #[test]
    fn csi_tensor_rejects_nan() {
        let d = vec![Complex64::new(f64::NAN, 0.0)];
        assert_eq!(CsiTensor::new([1, 1, 1], d, 1e-3, 0), Err(CsiError::NonFinite));
    }
}
