//! Network geometry, fading realizations and the combined BS-to-user channel.
//!
//! Conventions: positions are 2-D in meters, the BS sits at a corner of a
//! square area. BS-MU and RIS-MU links are Rayleigh, the BS-RIS link is
//! Rician with a uniform-linear-array line-of-sight component.
//!
//! Large-scale loss: the BS-MU link uses `d^-alpha`, the reflected path is
//! the product of a BS-RIS loss `d_br^-2.2` (applied to `H_BR`) and a RIS-MU
//! loss `d_rk^-alpha` (applied to `h_R`).

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seeding;
use crate::tape::{ComplexVar, Tape, Var};

pub type Point = [f64; 2];

/// Static network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TopologyConfig {
    /// Side of the square service area, meters.
    pub area_width: f64,
    pub bs_position: Point,
    /// Fixed RIS position; `None` draws one uniformly per scenario.
    pub ris_position: Option<Point>,
    /// BS antennas `M`.
    pub num_antennas: usize,
    /// RIS elements `N`.
    pub num_elements: usize,
    /// Users `K`, even.
    pub num_users: usize,
    pub path_loss_exponent: f64,
    /// Exponent of the BS-RIS link loss.
    pub ris_link_exponent: f64,
    /// Linear Rician factor of the BS-RIS link.
    pub rician_factor: f64,
    /// Total bandwidth, Hz.
    pub bandwidth: f64,
    /// Noise power spectral density, dBm/Hz.
    pub noise_psd: f64,
    /// Transmit power budget, watts.
    pub p_max: f64,
    /// QoS requirements are drawn uniformly from this range, bit/s.
    pub qos_range: (f64, f64),
    /// Minimum separation between any two nodes when sampling positions.
    pub min_distance: f64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            area_width: 10.0,
            bs_position: [0.0, 0.0],
            ris_position: None,
            num_antennas: 16,
            num_elements: 16,
            num_users: 4,
            path_loss_exponent: 3.0,
            ris_link_exponent: 2.2,
            rician_factor: 10.0,
            bandwidth: 4e6,
            noise_psd: -169.0,
            p_max: dbm_to_watts(20.0),
            qos_range: (0.5e6, 2.5e6),
            min_distance: 1.0,
        }
    }
}

impl TopologyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let k = self.num_users;
        if k < 2 || k % 2 != 0 {
            return bad(format!("number of users must be even and at least 2, got {k}"));
        }
        if self.num_antennas < k / 2 {
            return bad(format!(
                "zero-forcing needs at least K/2 = {} antennas, got {}",
                k / 2,
                self.num_antennas
            ));
        }
        if self.num_elements == 0 {
            return bad("the RIS needs at least one element".into());
        }
        if !(self.area_width > 0.0) {
            return bad(format!("area width must be positive, got {}", self.area_width));
        }
        if !(self.path_loss_exponent > 0.0) || !(self.ris_link_exponent > 0.0) {
            return bad("path loss exponents must be positive".into());
        }
        if !(self.rician_factor >= 0.0) {
            return bad(format!("Rician factor must be nonnegative, got {}", self.rician_factor));
        }
        if !(self.bandwidth > 0.0) {
            return bad(format!("bandwidth must be positive, got {}", self.bandwidth));
        }
        if !(self.p_max > 0.0) {
            return bad(format!("power budget must be positive, got {}", self.p_max));
        }
        if !self.noise_psd.is_finite() {
            return bad("noise PSD must be finite".into());
        }
        let (lo, hi) = self.qos_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad(format!("QoS range must be positive and ordered, got ({lo}, {hi})"));
        }
        if !(self.min_distance > 0.0) || self.min_distance * 4.0 >= self.area_width {
            return bad(format!("minimum distance {} is out of range", self.min_distance));
        }
        if let Some(p) = self.ris_position {
            if !self.contains(p) {
                return bad(format!("RIS position {p:?} lies outside the area"));
            }
        }
        Ok(())
    }

    /// The OMA baseline additionally assumes `M >= K`.
    pub fn validate_for_oma(&self) -> Result<()> {
        self.validate()?;
        if self.num_antennas < self.num_users {
            return Err(Error::InvalidConfig(format!(
                "the OMA baseline needs M >= K, got M={} K={}",
                self.num_antennas, self.num_users
            )));
        }
        Ok(())
    }

    fn contains(&self, p: Point) -> bool {
        (0.0..=self.area_width).contains(&p[0]) && (0.0..=self.area_width).contains(&p[1])
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

/// Noise power over `bandwidth` Hz for a PSD in dBm/Hz.
pub fn noise_power(noise_psd: f64, bandwidth: f64) -> f64 {
    dbm_to_watts(noise_psd) * bandwidth
}

/// `d^-alpha`.
pub fn path_loss(d: f64, alpha: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::InvalidDistance(d));
    }
    Ok(d.powf(-alpha))
}

pub fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// One static network snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub config: TopologyConfig,
    pub ris_position: Point,
    pub mu_positions: Vec<Point>,
    /// Per-user QoS requirement, bit/s.
    pub qos: Vec<f64>,
    /// Noise power over the full bandwidth, watts.
    pub noise_power: f64,
}

impl Scenario {
    pub fn num_users(&self) -> usize {
        self.mu_positions.len()
    }

    /// BS-MU path loss per user.
    pub fn path_losses(&self) -> Result<Vec<f64>> {
        let c = &self.config;
        self.mu_positions
            .iter()
            .map(|&p| path_loss(distance(c.bs_position, p), c.path_loss_exponent))
            .collect()
    }
}

fn sample_point<R: Rng>(rng: &mut R, width: f64) -> Point {
    [rng.random::<f64>() * width, rng.random::<f64>() * width]
}

fn sample_point_away<R: Rng>(rng: &mut R, width: f64, avoid: &[Point], min_distance: f64) -> Point {
    loop {
        let p = sample_point(rng, width);
        if avoid.iter().all(|&q| distance(p, q) >= min_distance) {
            return p;
        }
    }
}

/// Draws RIS (unless fixed) and user positions plus QoS requirements.
pub fn generate_topology(config: &TopologyConfig, seed: u64) -> Result<Scenario> {
    config.validate()?;
    let mut rng = seeding::rng(seed);
    let w = config.area_width;
    let ris_position = match config.ris_position {
        Some(p) => p,
        None => sample_point_away(&mut rng, w, &[config.bs_position], config.min_distance),
    };
    let avoid = [config.bs_position, ris_position];
    let mu_positions: Vec<Point> = (0..config.num_users)
        .map(|_| sample_point_away(&mut rng, w, &avoid, config.min_distance))
        .collect();
    let (lo, hi) = config.qos_range;
    let qos = (0..config.num_users)
        .map(|_| lo + (hi - lo) * rng.random::<f64>())
        .collect();
    Ok(Scenario {
        config: config.clone(),
        ris_position,
        mu_positions,
        qos,
        noise_power: noise_power(config.noise_psd, config.bandwidth),
    })
}

/// Fading realization for one scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSet {
    /// BS-RIS link `H_BR`, N rows of M entries.
    pub h_bru: Vec<Vec<Complex64>>,
    /// BS-MU links `h_B`, one length-M vector per user.
    pub h_direct: Vec<Vec<Complex64>>,
    /// RIS-MU links `h_R`, one length-N vector per user.
    pub h_ris: Vec<Vec<Complex64>>,
    /// BS-MU path loss per user.
    pub path_loss: Vec<f64>,
}

impl ChannelSet {
    pub fn num_users(&self) -> usize {
        self.h_direct.len()
    }
    pub fn num_antennas(&self) -> usize {
        self.h_direct.first().map_or(0, Vec::len)
    }
    pub fn num_elements(&self) -> usize {
        self.h_bru.len()
    }

    /// `||h_B,k||^2` per user.
    pub fn direct_gains(&self) -> Vec<f64> {
        self.h_direct
            .iter()
            .map(|h| h.iter().map(Complex64::norm_sqr).sum())
            .collect()
    }
}

fn cscg<R: Rng>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

/// Unit-modulus ULA response with half-wavelength spacing.
fn steering(len: usize, angle: f64) -> Vec<Complex64> {
    (0..len)
        .map(|i| Complex64::from_polar(1.0, PI * i as f64 * angle.cos()))
        .collect()
}

pub fn sample_channels(scenario: &Scenario, seed: u64) -> Result<ChannelSet> {
    let c = &scenario.config;
    let (m, n) = (c.num_antennas, c.num_elements);
    let mut rng = seeding::rng(seed);

    let br_loss = path_loss(distance(c.bs_position, scenario.ris_position), c.ris_link_exponent)?;
    let kappa = c.rician_factor;
    let los_weight = (kappa / (1.0 + kappa)).sqrt() * br_loss.sqrt();
    let nlos_weight = (1.0 / (1.0 + kappa)).sqrt() * br_loss.sqrt();
    let arrival: f64 = rng.random::<f64>() * PI;
    let departure: f64 = rng.random::<f64>() * PI;
    let a_ris = steering(n, arrival);
    let a_bs = steering(m, departure);
    let h_bru = (0..n)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let los = a_ris[i] * a_bs[j].conj();
                    los * los_weight + cscg(&mut rng, 1.0) * nlos_weight
                })
                .collect()
        })
        .collect();

    let direct_loss = scenario.path_losses()?;
    let mut h_direct = Vec::with_capacity(direct_loss.len());
    let mut h_ris = Vec::with_capacity(direct_loss.len());
    for (k, &pos) in scenario.mu_positions.iter().enumerate() {
        h_direct.push((0..m).map(|_| cscg(&mut rng, direct_loss[k])).collect());
        let rk_loss = path_loss(distance(scenario.ris_position, pos), c.path_loss_exponent)?;
        h_ris.push((0..n).map(|_| cscg(&mut rng, rk_loss)).collect());
    }
    Ok(ChannelSet {
        h_bru,
        h_direct,
        h_ris,
        path_loss: direct_loss,
    })
}

/// Combined channels `h_k` with `h_k^H = h_B,k^H + h_R,k^H diag(e^{j theta}) H_BR`.
pub fn combined_channel(channels: &ChannelSet, theta: &[f64]) -> Vec<Vec<Complex64>> {
    assert_eq!(theta.len(), channels.num_elements(), "phase vector length");
    let phases: Vec<Complex64> = theta.iter().map(|&t| Complex64::from_polar(1.0, t)).collect();
    channels
        .h_direct
        .iter()
        .zip(&channels.h_ris)
        .map(|(hb, hr)| {
            (0..hb.len())
                .map(|j| {
                    let reflected: Complex64 = (0..phases.len())
                        .map(|i| hr[i].conj() * phases[i] * channels.h_bru[i][j])
                        .sum();
                    (hb[j].conj() + reflected).conj()
                })
                .collect()
        })
        .collect()
}

/// A [`ChannelSet`] loaded on a tape for repeated differentiable evaluation.
///
/// The per-user products `conj(h_R,k[n]) * H_BR[n][m]` are folded into
/// constants once, so each evaluation costs `O(KNM)` nodes.
pub struct TapeChannels {
    base: Vec<Vec<(Var, Var)>>,
    folded: Vec<Vec<Vec<(Var, Var)>>>,
    num_elements: usize,
}

impl TapeChannels {
    pub fn load(tape: &mut Tape, channels: &ChannelSet) -> Result<Self> {
        let mut base = Vec::with_capacity(channels.num_users());
        let mut folded = Vec::with_capacity(channels.num_users());
        for (hb, hr) in channels.h_direct.iter().zip(&channels.h_ris) {
            base.push(
                hb.iter()
                    .map(|z| Ok((tape.constant(z.re)?, tape.constant(z.im)?)))
                    .collect::<Result<Vec<_>>>()?,
            );
            let mut per_element = Vec::with_capacity(hr.len());
            for (i, r) in hr.iter().enumerate() {
                per_element.push(
                    channels.h_bru[i]
                        .iter()
                        .map(|&g| {
                            let q = r.conj() * g;
                            Ok((tape.constant(q.re)?, tape.constant(q.im)?))
                        })
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            folded.push(per_element);
        }
        Ok(TapeChannels {
            base,
            folded,
            num_elements: channels.num_elements(),
        })
    }

    /// Combined channels as tape values, differentiable in `theta`.
    pub fn combined(&self, tape: &mut Tape, theta: &[Var]) -> Result<Vec<Vec<ComplexVar>>> {
        assert_eq!(theta.len(), self.num_elements, "phase vector length");
        let mut cs = Vec::with_capacity(theta.len());
        for &t in theta {
            cs.push((tape.cos(t)?, tape.sin(t)?));
        }
        let mut out = Vec::with_capacity(self.base.len());
        for (base, folded) in self.base.iter().zip(&self.folded) {
            let mut h = Vec::with_capacity(base.len());
            for (j, &(b_re, b_im)) in base.iter().enumerate() {
                // h = conj(g): Re h = Re(hB) + sum(c q.re - s q.im),
                //              Im h = Im(hB) - sum(c q.im + s q.re)
                let mut re = b_re;
                let mut im = b_im;
                for (&(c, s), row) in cs.iter().zip(folded) {
                    let (q_re, q_im) = row[j];
                    let t = tape.mul(c, q_re)?;
                    re = tape.add(re, t)?;
                    let t = tape.mul(s, q_im)?;
                    re = tape.sub(re, t)?;
                    let t = tape.mul(c, q_im)?;
                    im = tape.sub(im, t)?;
                    let t = tape.mul(s, q_re)?;
                    im = tape.sub(im, t)?;
                }
                h.push(ComplexVar { re, im });
            }
            out.push(h);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_loss_values() {
        assert_eq!(path_loss(1.0, 3.0).unwrap(), 1.0);
        assert!((path_loss(10.0, 3.0).unwrap() - 1e-3).abs() < 1e-18);
        assert_eq!(path_loss(2.0, 3.0).unwrap(), 0.125);
        assert!(matches!(path_loss(0.0, 3.0), Err(Error::InvalidDistance(_))));
        assert!(matches!(path_loss(-1.0, 3.0), Err(Error::InvalidDistance(_))));
    }

    #[test]
    fn noise_power_values() {
        // -169 dBm/Hz = 10^-16.9 mW/Hz = 10^-19.9 W/Hz, times 4 MHz
        let expected = 10f64.powf(-19.9) * 4e6;
        let got = noise_power(-169.0, 4e6);
        assert!((got - expected).abs() / expected < 1e-12);
        assert!((got - 5.036e-14).abs() / 5.036e-14 < 1e-3);
        assert!((noise_power(-30.0, 1.0) - 1e-6).abs() < 1e-18);
        let a = noise_power(-150.0, 2e5);
        let b = noise_power(-150.0, 1e5);
        assert!((a - 2.0 * b).abs() <= 1e-15 * a);
    }

    #[test]
    fn topology_is_deterministic_and_in_range() {
        let cfg = TopologyConfig::default();
        let a = generate_topology(&cfg, 1).unwrap();
        let b = generate_topology(&cfg, 1).unwrap();
        assert_eq!(a, b);
        for p in a.mu_positions.iter().chain([&a.ris_position]) {
            assert!((0.0..=10.0).contains(&p[0]) && (0.0..=10.0).contains(&p[1]));
        }
        assert!(a.qos.iter().all(|&q| (0.5e6..=2.5e6).contains(&q)));
    }

    #[test]
    fn odd_user_count_is_rejected() {
        let cfg = TopologyConfig {
            num_users: 3,
            ..Default::default()
        };
        assert!(matches!(generate_topology(&cfg, 1), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn too_few_antennas_rejected() {
        let cfg = TopologyConfig {
            num_users: 8,
            num_antennas: 3,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TopologyConfig {
            num_users: 8,
            num_antennas: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_ok());
        assert!(cfg.validate_for_oma().is_err());
    }

    fn fixed_scenario(kappa: f64, n: usize, m: usize) -> Scenario {
        let cfg = TopologyConfig {
            num_antennas: m,
            num_elements: n,
            num_users: 2,
            rician_factor: kappa,
            ris_position: Some([3.0, 4.0]),
            ..Default::default()
        };
        generate_topology(&cfg, 5).unwrap()
    }

    #[test]
    fn pure_line_of_sight_has_equal_magnitudes() {
        let s = fixed_scenario(1e9, 6, 5);
        let ch = sample_channels(&s, 3).unwrap();
        let reference = ch.h_bru[0][0].norm();
        for row in &ch.h_bru {
            for z in row {
                assert!((z.norm() - reference).abs() / reference < 1e-3);
            }
        }
        // d_br = 5 m
        let expected = 5f64.powf(-2.2).sqrt();
        assert!((reference - expected).abs() / expected < 1e-3);
    }

    #[test]
    fn rayleigh_bs_ris_variance_matches_link_loss() {
        let s = fixed_scenario(0.0, 1, 1);
        let expected = 5f64.powf(-2.2);
        let draws = 10_000;
        let mut sum = 0.0;
        for seed in 0..draws {
            sum += sample_channels(&s, seed).unwrap().h_bru[0][0].norm_sqr();
        }
        let var = sum / draws as f64;
        assert!((var - expected).abs() / expected < 0.05, "{var} vs {expected}");
    }

    #[test]
    fn direct_links_are_zero_mean_with_path_loss_variance() {
        let s = fixed_scenario(10.0, 1, 1);
        let pl = s.path_losses().unwrap()[0];
        let draws = 10_000;
        let mut mean = Complex64::new(0.0, 0.0);
        let mut power = 0.0;
        for seed in 0..draws {
            let z = sample_channels(&s, seed).unwrap().h_direct[0][0];
            mean += z;
            power += z.norm_sqr();
        }
        mean /= draws as f64;
        power /= draws as f64;
        let std = pl.sqrt();
        assert!(mean.norm() < 3.0 * std / (draws as f64).sqrt());
        assert!((power - pl).abs() / pl < 0.05);
    }

    fn tiny_set(hb: Complex64, hr: Complex64, hbr: Complex64) -> ChannelSet {
        ChannelSet {
            h_bru: vec![vec![hbr]],
            h_direct: vec![vec![hb]],
            h_ris: vec![vec![hr]],
            path_loss: vec![1.0],
        }
    }

    #[test]
    fn single_entry_combined_channel() {
        let z = |re, im| Complex64::new(re, im);
        let ch = tiny_set(z(0.0, 0.0), z(1.0, 0.0), z(1.0, 0.0));
        let h = combined_channel(&ch, &[PI / 2.0])[0][0];
        // h^H = 1 * e^{j pi/2} * 1, so h = e^{-j pi/2} = -j
        assert!((h.norm() - 1.0).abs() < 1e-15);
        assert!((h - z(0.0, -1.0)).norm() < 1e-15);
    }

    #[test]
    fn no_reflection_leaves_direct_link() {
        let s = fixed_scenario(10.0, 4, 3);
        let mut ch = sample_channels(&s, 9).unwrap();
        let theta = [0.3, 1.0, 2.0, 5.0];
        let mut no_ris = ch.clone();
        for h in &mut no_ris.h_ris {
            h.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        }
        assert_eq!(combined_channel(&no_ris, &theta), no_ris.h_direct);
        for row in &mut ch.h_bru {
            row.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        }
        assert_eq!(combined_channel(&ch, &theta), ch.h_direct);
    }

    #[test]
    fn tape_combined_channel_matches_numeric_and_is_periodic() {
        let s = fixed_scenario(10.0, 4, 3);
        let ch = sample_channels(&s, 2).unwrap();
        let theta = [0.3, 1.0, 2.0, 5.0];
        let numeric = combined_channel(&ch, &theta);
        let mut tape = Tape::new();
        let tc = TapeChannels::load(&mut tape, &ch).unwrap();
        let vars = tape.constants(&theta).unwrap();
        let h = tc.combined(&mut tape, &vars).unwrap();
        for (hk, nk) in h.iter().zip(&numeric) {
            for (z, w) in hk.iter().zip(nk) {
                assert!((tape.c_value(*z) - w).norm() < 1e-15);
            }
        }
        let mut shifted = theta;
        shifted[2] += 2.0 * PI;
        let moved = combined_channel(&ch, &shifted);
        for (a, b) in moved.iter().flatten().zip(numeric.iter().flatten()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn tape_gradient_in_theta_matches_finite_difference() {
        let s = fixed_scenario(10.0, 4, 3);
        let ch = sample_channels(&s, 4).unwrap();
        let theta = [0.3, 1.0, 2.0, 5.0];
        let power = |t: &[f64]| -> f64 {
            combined_channel(&ch, t)
                .iter()
                .flatten()
                .map(Complex64::norm_sqr)
                .sum()
        };
        let mut tape = Tape::new();
        let tc = TapeChannels::load(&mut tape, &ch).unwrap();
        let vars = tape.constants(&theta).unwrap();
        let h = tc.combined(&mut tape, &vars).unwrap();
        let terms: Vec<Var> = h.iter().flatten().map(|&z| tape.c_abs2(z).unwrap()).collect();
        let total = tape.sum(&terms).unwrap();
        let grad = tape.backward(total, &vars);
        for i in 0..theta.len() {
            let step = 1e-6 * theta[i].abs().max(1.0);
            let (mut up, mut down) = (theta, theta);
            up[i] += step;
            down[i] -= step;
            let fd = (power(&up) - power(&down)) / (2.0 * step);
            let scale = fd.abs().max(grad[i].abs()).max(1e-12);
            assert!((grad[i] - fd).abs() / scale < 1e-5, "theta_{i}: {} vs {fd}", grad[i]);
        }
    }
}
