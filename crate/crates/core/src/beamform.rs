//! Multi-user MISO downlink: SINR, sum rate and classical precoders.
//!
//! Channels and beamformers are both `K x N` complex matrices stored row
//! major; row `k` is user `k`'s channel `h_k` or beamformer `w_k`. The user
//! receives `h_k^H w_j s_j` from stream `j`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum BeamformError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid link config: {0}")]
    InvalidConfig(String),
    #[error("channel matrix is rank deficient (rank {rank} < {devices} users)")]
    RankDeficient { rank: usize, devices: usize },
    #[error("all-zero beamformer cannot be scaled to the power budget")]
    ZeroPower,
    #[error(
        "power multiplier search failed at iteration {iteration}: \
         mu_hi = {mu_hi:e}, power(mu_hi) = {power:e}, budget = {budget:e}"
    )]
    Bisection {
        iteration: usize,
        mu_hi: f64,
        power: f64,
        budget: f64,
    },
}

pub type Result<T> = std::result::Result<T, BeamformError>;

/// Noise power and total transmit power, both linear.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub noise_power: f64,
    pub total_power: f64,
}

impl LinkConfig {
    pub fn new(noise_power: f64, total_power: f64) -> Result<Self> {
        let cfg = LinkConfig {
            noise_power,
            total_power,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_power > 0.0 && self.noise_power.is_finite()) {
            return Err(BeamformError::InvalidConfig(format!(
                "noise power must be positive, got {}",
                self.noise_power
            )));
        }
        if !(self.total_power > 0.0 && self.total_power.is_finite()) {
            return Err(BeamformError::InvalidConfig(format!(
                "total power must be positive, got {}",
                self.total_power
            )));
        }
        Ok(())
    }
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            noise_power: 0.1,
            total_power: 1.0,
        }
    }
}

/// `K x N` complex matrix, one row per user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamformingMatrix {
    devices: usize,
    antennas: usize,
    data: Vec<Complex64>,
}

impl BeamformingMatrix {
    pub fn new(devices: usize, antennas: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != devices * antennas {
            return Err(BeamformError::Shape(format!(
                "{} values for a {devices}x{antennas} matrix",
                data.len()
            )));
        }
        Ok(BeamformingMatrix {
            devices,
            antennas,
            data,
        })
    }

    pub fn zeros(devices: usize, antennas: usize) -> Self {
        BeamformingMatrix {
            devices,
            antennas,
            data: vec![Complex64::new(0.0, 0.0); devices * antennas],
        }
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

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn row(&self, k: usize) -> &[Complex64] {
        &self.data[k * self.antennas..(k + 1) * self.antennas]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [Complex64] {
        &mut self.data[k * self.antennas..(k + 1) * self.antennas]
    }

    /// Total transmit power `sum_k ||w_k||^2`.
    pub fn power(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Rescales every row by the same factor so that the total power is `p`.
    pub fn scale_to_power(&mut self, p: f64) -> Result<()> {
        let cur = self.power();
        if cur <= 0.0 || !cur.is_finite() {
            return Err(BeamformError::ZeroPower);
        }
        let s = (p / cur).sqrt();
        self.data.iter_mut().for_each(|z| *z *= s);
        Ok(())
    }
}

fn check_channel(h: &[Complex64], devices: usize) -> Result<usize> {
    if devices == 0 || h.len() % devices != 0 || h.is_empty() {
        return Err(BeamformError::Shape(format!(
            "{} channel values for {devices} users",
            h.len()
        )));
    }
    Ok(h.len() / devices)
}

/// `h^H w`.
fn inner(h: &[Complex64], w: &[Complex64]) -> Complex64 {
    h.iter().zip(w).map(|(a, b)| a.conj() * b).sum()
}

/// Per-user SINR of beamformers `w` on channels `h` (`K x N`, row major).
pub fn sinr(h: &[Complex64], w: &BeamformingMatrix, noise_power: f64) -> Result<Vec<f64>> {
    let k = w.devices;
    let n = check_channel(h, k)?;
    if n != w.antennas {
        return Err(BeamformError::Shape(format!(
            "channel has {n} antennas, beamformer {}",
            w.antennas
        )));
    }
    Ok((0..k)
        .map(|i| {
            let hi = &h[i * n..(i + 1) * n];
            let mut signal = 0.0;
            let mut interference = 0.0;
            for j in 0..k {
                let g = inner(hi, w.row(j)).norm_sqr();
                if i == j {
                    signal = g;
                } else {
                    interference += g;
                }
            }
            signal / (interference + noise_power)
        })
        .collect())
}

/// Sum of `log2(1 + SINR_k)` in bits/s/Hz.
pub fn sum_rate(h: &[Complex64], w: &BeamformingMatrix, noise_power: f64) -> Result<f64> {
    Ok(sinr(h, w, noise_power)?
        .into_iter()
        .map(|g| (1.0 + g).log2())
        .sum())
}

/// Maximum ratio transmission with equal power per user.
pub fn mrt(h: &[Complex64], devices: usize, total_power: f64) -> Result<BeamformingMatrix> {
    let n = check_channel(h, devices)?;
    let amp = (total_power / devices as f64).sqrt();
    let mut w = BeamformingMatrix::zeros(devices, n);
    for k in 0..devices {
        let hk = &h[k * n..(k + 1) * n];
        let norm = hk.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(BeamformError::ZeroPower);
        }
        for (dst, src) in w.row_mut(k).iter_mut().zip(hk) {
            *dst = src * (amp / norm);
        }
    }
    Ok(w)
}

/// Power split across zero-forcing directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZfPower {
    #[default]
    Equal,
    WaterFilling,
}

/// Zero-forcing with equal power `P_T / K` per user.
pub fn zero_forcing(h: &[Complex64], devices: usize, total_power: f64) -> Result<BeamformingMatrix> {
    zero_forcing_with(
        h,
        devices,
        LinkConfig {
            noise_power: 1.0,
            total_power,
        },
        ZfPower::Equal,
    )
}

pub fn zero_forcing_with(
    h: &[Complex64],
    devices: usize,
    link: LinkConfig,
    power: ZfPower,
) -> Result<BeamformingMatrix> {
    let n = check_channel(h, devices)?;
    if devices > n {
        return Err(BeamformError::RankDeficient {
            rank: n,
            devices,
        });
    }
    // rows of G are h_k^H, so G W^T = I gives h_j^H w_k = 0 for j != k
    let g = DMatrix::from_fn(devices, n, |r, c| h[r * n + c].conj());
    let svd = g.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * n as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < devices || smax == 0.0 {
        return Err(BeamformError::RankDeficient { rank, devices });
    }
    let pinv = svd
        .pseudo_inverse(tol)
        .map_err(|e| BeamformError::Shape(e.to_string()))?;

    let mut dirs = Vec::with_capacity(devices);
    let mut gains = Vec::with_capacity(devices);
    for k in 0..devices {
        let col: Vec<Complex64> = (0..n).map(|r| pinv[(r, k)]).collect();
        let norm = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let unit: Vec<Complex64> = col.iter().map(|z| z / norm).collect();
        gains.push(inner(&h[k * n..(k + 1) * n], &unit).norm_sqr());
        dirs.push(unit);
    }
    let powers = match power {
        ZfPower::Equal => vec![link.total_power / devices as f64; devices],
        ZfPower::WaterFilling => water_fill(&gains, link.noise_power, link.total_power),
    };
    let mut w = BeamformingMatrix::zeros(devices, n);
    for k in 0..devices {
        let amp = powers[k].sqrt();
        for (dst, src) in w.row_mut(k).iter_mut().zip(&dirs[k]) {
            *dst = src * amp;
        }
    }
    Ok(w)
}

/// Classic water-filling of `budget` over parallel channels with gains `g`.
fn water_fill(gains: &[f64], noise: f64, budget: f64) -> Vec<f64> {
    let floors: Vec<f64> = gains.iter().map(|g| noise / g).collect();
    let mut order: Vec<usize> = (0..gains.len()).collect();
    order.sort_by(|&a, &b| floors[a].total_cmp(&floors[b]));
    let mut active = order.len();
    let mut level = 0.0;
    while active > 0 {
        let sum: f64 = order[..active].iter().map(|&i| floors[i]).sum();
        level = (budget + sum) / active as f64;
        if level > floors[order[active - 1]] {
            break;
        }
        active -= 1;
    }
    floors.iter().map(|f| (level - f).max(0.0)).collect()
}

/// WMMSE stopping rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WmmseOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for WmmseOptions {
    fn default() -> Self {
        WmmseOptions {
            tol: 1e-5,
            max_iter: 200,
        }
    }
}

/// Weighted-MMSE sum-rate ascent from `init`.
///
/// Returns the final beamformers and the sum rate of every iterate, starting
/// with the rate of `init` after scaling it to the power budget. Every
/// iterate uses the full budget.
pub fn wmmse(
    h: &[Complex64],
    link: LinkConfig,
    init: &BeamformingMatrix,
    opts: WmmseOptions,
) -> Result<(BeamformingMatrix, Vec<f64>)> {
    link.validate()?;
    if !(opts.tol > 0.0) {
        return Err(BeamformError::InvalidConfig(format!(
            "tolerance must be positive, got {}",
            opts.tol
        )));
    }
    let k = init.devices;
    let n = check_channel(h, k)?;
    if n != init.antennas {
        return Err(BeamformError::Shape(format!(
            "channel has {n} antennas, init {}",
            init.antennas
        )));
    }
    let sigma2 = link.noise_power;
    let mut w = init.clone();
    w.scale_to_power(link.total_power)?;
    let mut trace = vec![sum_rate(h, &w, sigma2)?];
    let rows: Vec<&[Complex64]> = (0..k).map(|i| &h[i * n..(i + 1) * n]).collect();

    for iteration in 0..opts.max_iter {
        let mut u = vec![Complex64::new(0.0, 0.0); k];
        let mut weight = vec![0.0; k];
        for i in 0..k {
            let gains: Vec<Complex64> = (0..k).map(|j| inner(rows[i], w.row(j))).collect();
            let total: f64 = gains.iter().map(|g| g.norm_sqr()).sum::<f64>() + sigma2;
            u[i] = gains[i] / total;
            let mse = 1.0 - gains[i].norm_sqr() / total;
            weight[i] = 1.0 / mse;
        }

        let a = DMatrix::from_fn(n, n, |r, c| {
            (0..k)
                .map(|j| rows[j][r] * rows[j][c].conj() * (weight[j] * u[j].norm_sqr()))
                .sum::<Complex64>()
        });
        let eig = a.symmetric_eigen();
        let vals: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0)).collect();
        let uh = eig.eigenvectors.adjoint();
        // projected right-hand sides weight_k u_k U^H h_k
        let rhs: Vec<Vec<Complex64>> = (0..k)
            .map(|i| {
                let coef = u[i] * weight[i];
                (0..n)
                    .map(|r| (0..n).map(|c| uh[(r, c)] * rows[i][c]).sum::<Complex64>() * coef)
                    .collect()
            })
            .collect();
        let phi: Vec<f64> = (0..n)
            .map(|r| rhs.iter().map(|v| v[r].norm_sqr()).sum())
            .collect();
        let power_at = |mu: f64| -> f64 {
            phi.iter()
                .zip(&vals)
                .map(|(&p, &l)| if p == 0.0 { 0.0 } else { p / (l + mu).powi(2) })
                .sum()
        };
        let mu = solve_multiplier(&power_at, link.total_power, &vals, iteration)?;

        let v = &eig.eigenvectors;
        let mut next = BeamformingMatrix::zeros(k, n);
        for i in 0..k {
            let scaled: Vec<Complex64> = (0..n)
                .map(|r| {
                    let d = vals[r] + mu;
                    if rhs[i][r] == Complex64::new(0.0, 0.0) || d == 0.0 {
                        Complex64::new(0.0, 0.0)
                    } else {
                        rhs[i][r] / d
                    }
                })
                .collect();
            for (c, dst) in next.row_mut(i).iter_mut().enumerate() {
                *dst = (0..n).map(|r| v[(c, r)] * scaled[r]).sum();
            }
        }
        // uniform scaling raises every SINR, so filling the budget never lowers the rate
        next.scale_to_power(link.total_power)?;
        let rate = sum_rate(h, &next, sigma2)?;
        let prev = *trace.last().expect("trace starts non-empty");
        w = next;
        trace.push(rate);
        if (rate - prev).abs() < opts.tol {
            break;
        }
    }
    Ok((w, trace))
}

/// Smallest `mu >= 0` with `power(mu) <= budget`, found by bisection.
fn solve_multiplier(
    power: &dyn Fn(f64) -> f64,
    budget: f64,
    eigenvalues: &[f64],
    iteration: usize,
) -> Result<f64> {
    let p0 = power(0.0);
    if p0.is_finite() && p0 <= budget {
        return Ok(0.0);
    }
    let mut hi = eigenvalues.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let mut grow = 0;
    while !(power(hi) <= budget) {
        hi *= 2.0;
        grow += 1;
        if grow > 2000 || !hi.is_finite() {
            return Err(BeamformError::Bisection {
                iteration,
                mu_hi: hi,
                power: power(hi),
                budget,
            });
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        if hi - lo <= 1e-8 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if power(mid) <= budget {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn bf(k: usize, n: usize, v: &[Complex64]) -> BeamformingMatrix {
        BeamformingMatrix::new(k, n, v.to_vec()).unwrap()
    }

    #[test]
    fn single_user_sinr() {
        let h = [c(1.0, 0.0), c(0.0, 0.0)];
        let w = bf(1, 2, &[c(2f64.sqrt(), 0.0), c(0.0, 0.0)]);
        let g = sinr(&h, &w, 1.0).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_and_aligned_users() {
        let one = c(1.0, 0.0);
        let zero = c(0.0, 0.0);
        let h = [one, zero, zero, one];
        let w = bf(2, 2, &[one, zero, zero, one]);
        assert_eq!(sinr(&h, &w, 1.0).unwrap(), vec![1.0, 1.0]);
        assert!((sum_rate(&h, &w, 1.0).unwrap() - 2.0).abs() < 1e-12);

        let h = [one, zero, one, zero];
        let w = bf(2, 2, &[one, zero, one, zero]);
        assert_eq!(sinr(&h, &w, 1.0).unwrap(), vec![0.5, 0.5]);
        let expect = 2.0 * 1.5f64.log2();
        assert!((sum_rate(&h, &w, 1.0).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 1.1699).abs() < 1e-4);
    }

    #[test]
    fn zero_beamformer_has_zero_rate() {
        let h = [c(0.3, 1.0), c(-2.0, 0.5)];
        let w = BeamformingMatrix::zeros(1, 2);
        assert_eq!(sum_rate(&h, &w, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let h = [c(1.0, 0.0); 6];
        let w = BeamformingMatrix::zeros(2, 2);
        assert!(sinr(&h, &w, 1.0).is_err());
        assert!(BeamformingMatrix::new(2, 2, vec![c(0.0, 0.0); 3]).is_err());
    }

    #[test]
    fn zf_rejects_rank_deficient_and_wide() {
        let h = [c(1.0, 0.0), c(2.0, 0.0), c(2.0, 0.0), c(4.0, 0.0)];
        assert!(matches!(
            zero_forcing(&h, 2, 1.0),
            Err(BeamformError::RankDeficient { .. })
        ));
        let h = [c(1.0, 0.0), c(0.0, 1.0), c(2.0, 0.0)];
        assert!(zero_forcing(&h, 3, 1.0).is_err());
    }

    #[test]
    fn water_filling_spends_budget() {
        let p = water_fill(&[4.0, 1.0, 0.01], 1.0, 2.0);
        assert!((p.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert_eq!(p[2], 0.0);
        assert!(p[0] > p[1]);
    }

    #[test]
    fn wmmse_rejects_bad_options() {
        let h = [c(1.0, 0.0), c(0.0, 0.0)];
        let w = mrt(&h, 1, 1.0).unwrap();
        let opts = WmmseOptions {
            tol: 0.0,
            max_iter: 5,
        };
        assert!(wmmse(&h, LinkConfig::default(), &w, opts).is_err());
        assert!(LinkConfig::new(0.0, 1.0).is_err());
        let zero = BeamformingMatrix::zeros(1, 2);
        assert!(matches!(
            wmmse(&h, LinkConfig::default(), &zero, WmmseOptions::default()),
            Err(BeamformError::ZeroPower)
        ));
    }
}
