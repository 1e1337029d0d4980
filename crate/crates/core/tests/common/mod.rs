//! Reference computations written directly from the model equations with
//! dense complex matrices, sharing no code with the tape.
#![allow(dead_code)]

use nalgebra::{Complex, DMatrix, DVector};
use rnm_core::channel::{ChannelSet, Scenario};
use rnm_core::maml::{ClusteringRule, LossWeights};
use rnm_core::policy::NetworkWeights;

pub type C = Complex<f64>;

pub fn vector(v: &[C]) -> DVector<C> {
    DVector::from_column_slice(v)
}

/// Column vectors `h_k` with `h_k^H = h_B^H + h_R^H diag(e^{j theta}) H_BR`.
pub fn combined(ch: &ChannelSet, theta: &[f64]) -> Vec<DVector<C>> {
    let n = ch.h_bru.len();
    let m = ch.h_direct[0].len();
    let h_br = DMatrix::from_fn(n, m, |i, j| ch.h_bru[i][j]);
    let phi = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| C::from_polar(1.0, theta[i])));
    ch.h_direct
        .iter()
        .zip(&ch.h_ris)
        .map(|(hb, hr)| {
            let row = vector(hb).adjoint() + vector(hr).adjoint() * &phi * &h_br;
            row.adjoint()
        })
        .collect()
}

/// Unit-norm ZF beams and `rho_l = ||v_l||^2` from `V = H (H^H H)^-1`.
pub fn zf(strong: &[DVector<C>]) -> (Vec<DVector<C>>, Vec<f64>) {
    let h = DMatrix::from_columns(strong);
    let gram = h.adjoint() * &h;
    let v = &h * gram.try_inverse().expect("invertible Gram matrix");
    let mut beams = Vec::new();
    let mut rho = Vec::new();
    for col in v.column_iter() {
        let norm = col.norm();
        rho.push(norm * norm);
        beams.push(col.into_owned() / C::new(norm, 0.0));
    }
    (beams, rho)
}

/// `|h^H w|^2`.
pub fn gain(h: &DVector<C>, w: &DVector<C>) -> f64 {
    h.dotc(w).norm_sqr()
}

/// Pairs `(strong, weak)` by sorting `key` descending (ties by index) and
/// matching rank `i` with rank `i + K/2`.
pub fn fold_pairs(key: &[f64]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..key.len()).collect();
    order.sort_by(|&a, &b| key[b].partial_cmp(&key[a]).unwrap().then(a.cmp(&b)));
    let half = key.len() / 2;
    (0..half).map(|i| (order[i], order[i + half])).collect()
}

pub fn pairs(rule: ClusteringRule, scenario: &Scenario, ch: &ChannelSet) -> Vec<(usize, usize)> {
    match rule {
        ClusteringRule::Qos => fold_pairs(&scenario.qos),
        ClusteringRule::Channel => {
            let gains: Vec<f64> = ch.h_direct.iter().map(|h| vector(h).norm_squared()).collect();
            fold_pairs(&gains)
        }
    }
}

/// NOMA SINRs per user; `powers[2l]`, `powers[2l+1]` belong to the strong
/// and weak member of pair `l`.
pub fn noma_sinr(h: &[DVector<C>], pairs: &[(usize, usize)], powers: &[f64], sigma2: f64) -> Vec<f64> {
    let strong: Vec<DVector<C>> = pairs.iter().map(|&(s, _)| h[s].clone()).collect();
    let (beams, rho) = zf(&strong);
    let mut sinr = vec![0.0; h.len()];
    for (l, &(s, w)) in pairs.iter().enumerate() {
        let (ps, pw) = (powers[2 * l], powers[2 * l + 1]);
        sinr[s] = gain(&h[s], &beams[l]) * ps / sigma2;
        debug_assert!((sinr[s] * rho[l] * sigma2 / ps - 1.0).abs() < 1e-6);
        let own = gain(&h[w], &beams[l]);
        let mut inter = 0.0;
        for j in 0..pairs.len() {
            if j != l {
                inter += gain(&h[w], &beams[j]) * (powers[2 * j] + powers[2 * j + 1]);
            }
        }
        sinr[w] = own * pw / (own * ps + inter + sigma2);
    }
    sinr
}

/// OMA SINRs: `B/K` of spectrum per user, MRT beam, noise over `B/K`.
pub fn oma_sinr(h: &[DVector<C>], powers: &[f64], noise_psd_dbm: f64, bandwidth: f64) -> Vec<f64> {
    let band = bandwidth / h.len() as f64;
    let sigma2 = 10f64.powf(noise_psd_dbm / 10.0) * 1e-3 * band;
    h.iter().zip(powers).map(|(hk, p)| p * hk.norm_squared() / sigma2).collect()
}

pub fn rate_bps(bandwidth: f64, sinr: f64) -> f64 {
    bandwidth * (1.0 + sinr).log2()
}

pub fn mlp(weights: &NetworkWeights, input: &[f64]) -> Vec<f64> {
    let layers = weights.layers();
    let mut x = DVector::from_column_slice(input);
    for (i, l) in layers.iter().enumerate() {
        let w = DMatrix::from_row_slice(l.outputs, l.inputs, &l.weights);
        let mut y = w * x + DVector::from_column_slice(&l.bias);
        if i + 1 < layers.len() {
            y.apply(|v| *v = v.tanh());
        }
        x = y;
    }
    x.iter().copied().collect()
}

/// Softmax over all logits; the users share `(1 - 2^-40) p_max`.
pub fn softmax_power(logits: &[f64], p_max: f64) -> Vec<f64> {
    let budget = p_max * (1.0 - 2f64.powi(-40));
    let e: Vec<f64> = logits.iter().map(|z| z.exp()).collect();
    let total: f64 = e.iter().sum();
    e[..e.len() - 1].iter().map(|v| budget * v / total).collect()
}

/// Loss, sum rate (Mbit/s) and slot-ordered powers of the full pipeline.
pub struct Evaluation {
    pub loss: f64,
    pub sum_rate_mbps: f64,
    pub powers: Vec<f64>,
    pub rates_bps: Vec<f64>,
}

/// `slots` lists user indices in network order; for NOMA it must be
/// `s_0, w_0, s_1, w_1, ...` of `pairs`.
pub fn evaluate(
    scenario: &Scenario,
    ch: &ChannelSet,
    theta: &[f64],
    weights: &NetworkWeights,
    pairs: Option<&[(usize, usize)]>,
    loss_weights: LossWeights,
) -> Evaluation {
    let h = combined(ch, theta);
    let slots: Vec<usize> = match pairs {
        Some(p) => p.iter().flat_map(|&(s, w)| [s, w]).collect(),
        None => (0..h.len()).collect(),
    };
    let mut input = Vec::new();
    for &u in &slots {
        for z in h[u].iter() {
            input.push(z.re);
            input.push(z.im);
        }
    }
    input.extend(slots.iter().map(|&u| scenario.qos[u] / 1e6));
    input.extend(slots.iter().map(|&u| ch.path_loss[u].log10()));
    let powers = softmax_power(&mlp(weights, &input), scenario.config.p_max);
    let cfg = &scenario.config;
    let rates_bps: Vec<f64> = match pairs {
        Some(p) => noma_sinr(&h, p, &powers, scenario.noise_power)
            .into_iter()
            .map(|g| rate_bps(cfg.bandwidth, g))
            .collect(),
        None => oma_sinr(&h, &powers, cfg.noise_psd, cfg.bandwidth)
            .into_iter()
            .map(|g| rate_bps(cfg.bandwidth / h.len() as f64, g))
            .collect(),
    };
    let sum_rate_mbps = rates_bps.iter().sum::<f64>() / 1e6;
    let shortfall: f64 = rates_bps
        .iter()
        .zip(&scenario.qos)
        .map(|(r, q)| ((q - r) / 1e6).max(0.0))
        .sum();
    Evaluation {
        loss: loss_weights.w1 * sum_rate_mbps + loss_weights.w2 * shortfall,
        sum_rate_mbps,
        powers,
        rates_bps,
    }
}

/// Symmetric relative difference.
pub fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Fourth-order central difference of `f` at `x` along a unit step.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
}
