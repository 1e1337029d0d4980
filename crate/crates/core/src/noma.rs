//! Clustering, zero-forcing precoding and SINR/rate evaluation.
//!
//! Users are paired into clusters of one strong and one weak member. Strong
//! users are served interference-free through zero-forcing on the stacked
//! strong-user channels plus SIC; weak users decode directly and see both
//! intra- and inter-cluster interference.
//!
//! Power vectors are in *slot order*: `(p_1s, p_1w, p_2s, p_2w, ...)` for
//! NOMA and plain user order for OMA. Rate reports are always per user index.

use std::f64::consts::LN_2;

use num_complex::Complex64;

use crate::channel::{self, ChannelSet, Scenario, TapeChannels};
use crate::error::{Error, Result};
use crate::tape::{ComplexVar, Tape, Var};

/// Largest user count accepted by [`oracle_best_clustering`].
pub const ORACLE_MAX_USERS: usize = 10;

/// Ordered `(strong, weak)` user pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clustering {
    pub pairs: Vec<(usize, usize)>,
}

impl Clustering {
    pub fn num_users(&self) -> usize {
        self.pairs.len() * 2
    }

    /// Users in power-vector order `(s_1, w_1, s_2, w_2, ...)`.
    pub fn slots(&self) -> Vec<usize> {
        self.pairs.iter().flat_map(|&(s, w)| [s, w]).collect()
    }

    pub fn strong_users(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|p| p.0)
    }

    /// Checks that every user in `0..k` appears exactly once.
    pub fn validate(&self, k: usize) -> Result<()> {
        let mut seen = vec![false; k];
        for &(s, w) in &self.pairs {
            for u in [s, w] {
                if u >= k || seen[u] {
                    return Err(Error::InvalidConfig(format!("clustering {:?} is not a perfect matching of {k} users", self.pairs)));
                }
                seen[u] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidConfig(format!("clustering {:?} misses users", self.pairs)));
        }
        Ok(())
    }

    /// `min_l (qos[strong_l] - qos[weak_l])`.
    pub fn min_deviation(&self, qos: &[f64]) -> f64 {
        self.pairs
            .iter()
            .map(|&(s, w)| qos[s] - qos[w])
            .fold(f64::INFINITY, f64::min)
    }
}

/// Sorts users by descending key (ties by ascending index) and pairs rank `k`
/// with rank `k + K/2`.
fn fold_pairing(keys: &[f64]) -> Result<Clustering> {
    let k = keys.len();
    if k % 2 != 0 {
        return Err(Error::OddUserCount(k));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    let half = k / 2;
    Ok(Clustering {
        pairs: (0..half).map(|i| (order[i], order[i + half])).collect(),
    })
}

/// Pairing that maximizes the minimum in-cluster QoS gap; the higher-QoS
/// member is strong.
pub fn cluster_by_qos(qos: &[f64]) -> Result<Clustering> {
    fold_pairing(qos)
}

/// Same folding rule keyed on direct-link gains `||h_B,k||^2`.
pub fn cluster_by_channel(gains: &[f64]) -> Result<Clustering> {
    fold_pairing(gains)
}

/// Exhaustive search over all perfect matchings for the max-min QoS gap.
pub fn oracle_best_clustering(qos: &[f64]) -> Result<(Clustering, f64)> {
    let k = qos.len();
    if k % 2 != 0 {
        return Err(Error::OddUserCount(k));
    }
    if k > ORACLE_MAX_USERS {
        return Err(Error::TooLarge {
            users: k,
            limit: ORACLE_MAX_USERS,
        });
    }

    fn search(qos: &[f64], free: &mut Vec<usize>, current: &mut Vec<(usize, usize)>, best: &mut Option<(Vec<(usize, usize)>, f64)>) {
        let Some(&first) = free.first() else {
            let score = current
                .iter()
                .map(|&(s, w)| qos[s] - qos[w])
                .fold(f64::INFINITY, f64::min);
            if best.as_ref().is_none_or(|(_, b)| score > *b) {
                *best = Some((current.clone(), score));
            }
            return;
        };
        for j in 1..free.len() {
            let partner = free[j];
            let pair = if qos[first] >= qos[partner] { (first, partner) } else { (partner, first) };
            let mut rest: Vec<usize> = free.iter().copied().filter(|&u| u != first && u != partner).collect();
            current.push(pair);
            search(qos, &mut rest, current, best);
            current.pop();
        }
    }

    let mut free: Vec<usize> = (0..k).collect();
    let mut best = None;
    search(qos, &mut free, &mut Vec::new(), &mut best);
    let (pairs, score) = best.unwrap_or((Vec::new(), f64::INFINITY));
    Ok((Clustering { pairs }, score))
}

/// Unit-norm ZF beams (one per cluster) and their normalizers.
#[derive(Clone, Debug, PartialEq)]
pub struct Precoder {
    /// `beams[l]` is the length-M vector `w_l`.
    pub beams: Vec<Vec<Complex64>>,
    /// `rho[l] = ||v_l||^2` with `v_l` the unnormalized pseudo-inverse column.
    pub rho: Vec<f64>,
}

/// Precoder whose entries live on a tape.
pub struct TapePrecoder {
    pub beams: Vec<Vec<ComplexVar>>,
    pub rho: Vec<Var>,
}

/// Zero-forcing over the stacked strong channels: `V = H_s (H_s^H H_s)^-1`,
/// `rho_l = ||v_l||^2`, `w_l = v_l / ||v_l||`, so that `h_j^H w_l = 0` for
/// `j != l` and `h_l^H w_l = 1/sqrt(rho_l)`.
pub fn zf_precoder_on_tape(tape: &mut Tape, strong: &[&[ComplexVar]]) -> Result<TapePrecoder> {
    let l = strong.len();
    let m = strong.first().map_or(0, |h| h.len());
    if m < l {
        return Err(Error::DimensionMismatch(format!("zero-forcing {l} clusters needs at least {l} antennas, got {m}")));
    }
    let mut gram: Vec<Vec<Option<ComplexVar>>> = vec![vec![None; l]; l];
    for i in 0..l {
        for j in i..l {
            let g = tape.c_inner(strong[i], strong[j])?;
            gram[i][j] = Some(g);
            if i != j {
                gram[j][i] = Some(tape.c_conj(g)?);
            }
        }
    }
    let gram: Vec<Vec<ComplexVar>> = gram
        .into_iter()
        .map(|row| row.into_iter().map(|z| z.expect("filled")).collect())
        .collect();
    let zero = tape.c_constant(Complex64::new(0.0, 0.0))?;
    let one = tape.c_constant(Complex64::new(1.0, 0.0))?;
    let identity: Vec<Vec<ComplexVar>> = (0..l)
        .map(|i| (0..l).map(|j| if i == j { one } else { zero }).collect())
        .collect();
    let inverse = tape.solve_many(&gram, &identity)?;

    let mut beams = Vec::with_capacity(l);
    let mut rho = Vec::with_capacity(l);
    for col in 0..l {
        let mut v = Vec::with_capacity(m);
        for ant in 0..m {
            let mut acc: Option<ComplexVar> = None;
            for (j, h) in strong.iter().enumerate() {
                let t = tape.c_mul(h[ant], inverse[j][col])?;
                acc = Some(match acc {
                    Some(a) => tape.c_add(a, t)?,
                    None => t,
                });
            }
            v.push(acc.expect("at least one cluster"));
        }
        let mut power: Option<Var> = None;
        for z in &v {
            let a = tape.c_abs2(*z)?;
            power = Some(match power {
                Some(p) => tape.add(p, a)?,
                None => a,
            });
        }
        let power = power.expect("at least one antenna");
        let norm = tape.sqrt(power)?;
        beams.push(v.iter().map(|&z| tape.c_div_real(z, norm)).collect::<Result<Vec<_>>>()?);
        rho.push(power);
    }
    Ok(TapePrecoder { beams, rho })
}

pub fn zf_precoder(strong: &[Vec<Complex64>]) -> Result<Precoder> {
    let mut tape = Tape::new();
    let vars: Vec<Vec<ComplexVar>> = strong
        .iter()
        .map(|h| h.iter().map(|&z| tape.c_constant(z)).collect())
        .collect::<Result<_>>()?;
    let refs: Vec<&[ComplexVar]> = vars.iter().map(Vec::as_slice).collect();
    let p = zf_precoder_on_tape(&mut tape, &refs)?;
    Ok(Precoder {
        beams: p
            .beams
            .iter()
            .map(|b| b.iter().map(|&z| tape.c_value(z)).collect())
            .collect(),
        rho: tape.values(&p.rho),
    })
}

/// Strong-user SINR `p / (rho sigma^2)`.
pub fn sinr_strong(p: f64, rho: f64, sigma2: f64) -> f64 {
    p / (rho * sigma2)
}

/// `|h^H w|^2`.
pub fn beam_gain(h: &[Complex64], w: &[Complex64]) -> f64 {
    h.iter().zip(w).map(|(a, b)| a.conj() * b).sum::<Complex64>().norm_sqr()
}

/// Weak-user SINR of cluster `cluster` with the inter-cluster term averaged
/// over unit-power independent symbols. `powers` is in slot order.
pub fn sinr_weak(h_weak: &[Complex64], precoder: &Precoder, powers: &[f64], sigma2: f64, cluster: usize) -> f64 {
    let own = beam_gain(h_weak, &precoder.beams[cluster]);
    let inter: f64 = precoder
        .beams
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != cluster)
        .map(|(j, w)| beam_gain(h_weak, w) * (powers[2 * j] + powers[2 * j + 1]))
        .sum();
    own * powers[2 * cluster + 1] / (own * powers[2 * cluster] + inter + sigma2)
}

/// Transmit powers, watts.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerAllocation(pub Vec<f64>);

impl PowerAllocation {
    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Per-user outcome of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct RateReport {
    pub sinr: Vec<f64>,
    /// bit/s
    pub rate: Vec<f64>,
    /// bit/s
    pub sum_rate: f64,
    /// `max(qos - rate, 0)` per user, bit/s.
    pub qos_violation: Vec<f64>,
}

impl RateReport {
    pub fn new(sinr: Vec<f64>, rate: Vec<f64>, qos: &[f64]) -> Self {
        let sum_rate = rate.iter().sum();
        let qos_violation = rate.iter().zip(qos).map(|(r, q)| (q - r).max(0.0)).collect();
        RateReport {
            sinr,
            rate,
            sum_rate,
            qos_violation,
        }
    }

    pub fn sum_rate_mbps(&self) -> f64 {
        self.sum_rate / 1e6
    }

    pub fn total_violation_mbps(&self) -> f64 {
        self.qos_violation.iter().sum::<f64>() / 1e6
    }
}

/// SINRs and rates (Mbit/s) per user index, as tape values.
pub struct TapeRates {
    pub sinr: Vec<Var>,
    pub rate_mbps: Vec<Var>,
}

impl TapeRates {
    pub fn report(&self, tape: &Tape, qos: &[f64]) -> RateReport {
        let rate = self.rate_mbps.iter().map(|&r| tape.value(r) * 1e6).collect();
        RateReport::new(tape.values(&self.sinr), rate, qos)
    }
}

/// `bandwidth * log2(1 + sinr)` in Mbit/s.
fn rate_mbps(tape: &mut Tape, sinr: Var, one: Var, bandwidth: f64) -> Result<Var> {
    let arg = tape.add(one, sinr)?;
    let nats = tape.ln(arg)?;
    tape.scale(nats, bandwidth / 1e6 / LN_2)
}

/// NOMA SINRs and rates for combined channels `h` (per user index) and
/// powers in slot order.
pub fn noma_rates_on_tape(
    tape: &mut Tape,
    h: &[Vec<ComplexVar>],
    clustering: &Clustering,
    powers: &[Var],
    sigma2: f64,
    bandwidth: f64,
) -> Result<TapeRates> {
    let k = h.len();
    clustering.validate(k)?;
    if powers.len() != k {
        return Err(Error::DimensionMismatch(format!("{} powers for {k} users", powers.len())));
    }
    let strong: Vec<&[ComplexVar]> = clustering.strong_users().map(|s| h[s].as_slice()).collect();
    let precoder = zf_precoder_on_tape(tape, &strong)?;
    let noise = tape.constant(sigma2)?;
    let one = tape.constant(1.0)?;

    let mut sinr: Vec<Option<Var>> = vec![None; k];
    let cluster_power: Vec<Var> = (0..clustering.pairs.len())
        .map(|j| tape.add(powers[2 * j], powers[2 * j + 1]))
        .collect::<Result<_>>()?;
    for (l, &(s, w)) in clustering.pairs.iter().enumerate() {
        let denom = tape.mul(precoder.rho[l], noise)?;
        sinr[s] = Some(tape.div(powers[2 * l], denom)?);

        let mut own = None;
        let mut interference = noise;
        for (j, beam) in precoder.beams.iter().enumerate() {
            let proj = tape.c_inner(&h[w], beam)?;
            let gain = tape.c_abs2(proj)?;
            if j == l {
                own = Some(gain);
            } else {
                let t = tape.mul(gain, cluster_power[j])?;
                interference = tape.add(interference, t)?;
            }
        }
        let own = own.expect("own beam visited");
        let intra = tape.mul(own, powers[2 * l])?;
        let denom = tape.add(intra, interference)?;
        let signal = tape.mul(own, powers[2 * l + 1])?;
        sinr[w] = Some(tape.div(signal, denom)?);
    }
    let sinr: Vec<Var> = sinr.into_iter().map(|s| s.expect("every user clustered")).collect();
    let rate_mbps = sinr
        .iter()
        .map(|&g| rate_mbps(tape, g, one, bandwidth))
        .collect::<Result<_>>()?;
    Ok(TapeRates { sinr, rate_mbps })
}

/// OMA baseline: each user gets `B/K` of spectrum and a maximum-ratio beam,
/// `R_k = (B/K) log2(1 + p_k ||h_k||^2 / sigma_k^2)` with noise over `B/K`.
/// `powers` is in user order.
pub fn oma_rates_on_tape(tape: &mut Tape, h: &[Vec<ComplexVar>], powers: &[Var], noise_psd: f64, bandwidth: f64) -> Result<TapeRates> {
    let k = h.len();
    if powers.len() != k {
        return Err(Error::DimensionMismatch(format!("{} powers for {k} users", powers.len())));
    }
    let band = bandwidth / k as f64;
    let noise = tape.constant(channel::noise_power(noise_psd, band))?;
    let one = tape.constant(1.0)?;
    let mut sinr = Vec::with_capacity(k);
    let mut rates = Vec::with_capacity(k);
    for (hk, &p) in h.iter().zip(powers) {
        let gains = hk.iter().map(|&z| tape.c_abs2(z)).collect::<Result<Vec<_>>>()?;
        let gain = tape.sum(&gains)?;
        let rx = tape.mul(p, gain)?;
        let g = tape.div(rx, noise)?;
        rates.push(rate_mbps(tape, g, one, band)?);
        sinr.push(g);
    }
    Ok(TapeRates { sinr, rate_mbps: rates })
}

fn load_problem(tape: &mut Tape, channels: &ChannelSet, theta: &[f64], powers: &[f64]) -> Result<(Vec<Vec<ComplexVar>>, Vec<Var>)> {
    let loaded = TapeChannels::load(tape, channels)?;
    let theta = tape.constants(theta)?;
    let h = loaded.combined(tape, &theta)?;
    let p = tape.constants(powers)?;
    Ok((h, p))
}

/// NOMA rates at phase shifts `theta` and slot-ordered powers.
pub fn sum_rate(channels: &ChannelSet, theta: &[f64], clustering: &Clustering, power: &PowerAllocation, scenario: &Scenario) -> Result<RateReport> {
    let mut tape = Tape::new();
    let (h, p) = load_problem(&mut tape, channels, theta, &power.0)?;
    let rates = noma_rates_on_tape(&mut tape, &h, clustering, &p, scenario.noise_power, scenario.config.bandwidth)?;
    Ok(rates.report(&tape, &scenario.qos))
}

/// OMA rates at phase shifts `theta` and user-ordered powers.
pub fn oma_sum_rate(channels: &ChannelSet, theta: &[f64], power: &PowerAllocation, scenario: &Scenario) -> Result<RateReport> {
    let mut tape = Tape::new();
    let (h, p) = load_problem(&mut tape, channels, theta, &power.0)?;
    let rates = oma_rates_on_tape(&mut tape, &h, &p, scenario.config.noise_psd, scenario.config.bandwidth)?;
    Ok(rates.report(&tape, &scenario.qos))
}
