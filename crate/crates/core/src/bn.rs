//! Batch-normalization state and its statistics-update regimes.
//!
//! Three ways to move the running statistics:
//! - training: EMA with the layer's fixed momentum after every forward pass;
//! - adaptation: EMA with a weight supplied per step, normally the decaying
//!   `ρ_k + ζ` from [`MomentumSchedule`];
//! - recompute: replace them outright (weight 1), as the NORM baseline does.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Error, Result};
use crate::layers::LayerGrad;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TRAIN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub train_momentum: f64,
}

impl BatchNormState {
    /// Fresh state: zero mean, unit variance, identity affine.
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: DEFAULT_EPS,
            train_momentum: DEFAULT_TRAIN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return dim_err(format!(
                "batch norm arrays disagree on channel count: gamma {}, beta {}, mean {}, var {}",
                c,
                self.beta.len(),
                self.running_mean.len(),
                self.running_var.len()
            ));
        }
        if !(self.eps > 0.0) {
            return param_err(format!("batch norm eps must be > 0, got {}", self.eps));
        }
        if !(self.train_momentum > 0.0 && self.train_momentum <= 1.0) {
            return param_err(format!(
                "batch norm momentum must lie in (0, 1], got {}",
                self.train_momentum
            ));
        }
        if let Some(v) = self.running_var.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Numeric(format!("negative running variance {v}")));
        }
        Ok(())
    }
}

/// Per-channel mean and biased variance over the N, H, W axes.
///
/// Streams the elements in row-major order through Welford's update.
pub fn batch_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let [n, c, h, w] = x.shape();
    let per_channel = n * h * w;
    if per_channel == 0 {
        return dim_err(format!(
            "batch statistics need n·h·w >= 1, got shape {:?}",
            x.shape()
        ));
    }
    let plane = h * w;
    let mut mean = vec![0.0; c];
    let mut m2 = vec![0.0; c];
    let mut count = vec![0usize; c];
    for i in 0..n {
        let item = x.item(i);
        for ch in 0..c {
            let (mut mu, mut s, mut k) = (mean[ch], m2[ch], count[ch]);
            for &v in &item[ch * plane..(ch + 1) * plane] {
                k += 1;
                let delta = v - mu;
                mu += delta / k as f64;
                s += delta * (v - mu);
            }
            mean[ch] = mu;
            m2[ch] = s;
            count[ch] = k;
        }
    }
    let var = m2.iter().map(|s| (s / per_channel as f64).max(0.0)).collect();
    Ok((mean, var))
}

/// `(x − μ)/√(σ² + ε)·γ + β`, per channel.
pub fn bn_normalize(x: &Tensor, mu: &[f64], var: &[f64], state: &BatchNormState) -> Result<Tensor> {
    normalize_with_eps(x, mu, var, &state.gamma, &state.beta, state.eps)
}

fn normalize_with_eps(
    x: &Tensor,
    mu: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let mut out = x.clone();
    normalize_in_place(&mut out, mu, var, gamma, beta, eps)?;
    Ok(out)
}

fn normalize_in_place(
    x: &mut Tensor,
    mu: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<()> {
    let c = x.c();
    if mu.len() != c || var.len() != c || gamma.len() != c || beta.len() != c {
        return dim_err(format!(
            "normalize: channel axis is {} but mean/var/gamma/beta lengths are {}/{}/{}/{}",
            c,
            mu.len(),
            var.len(),
            gamma.len(),
            beta.len()
        ));
    }
    if let Some(v) = var.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Numeric(format!("variance entry {v} is negative")));
    }
    let plane = x.h() * x.w();
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "zero variance with eps = 0 gives an infinite scale".into(),
        ));
    }
    for item in x.data_mut().chunks_mut(c * plane) {
        for ch in 0..c {
            let (m, s, g, b) = (mu[ch], inv[ch], gamma[ch], beta[ch]);
            for v in &mut item[ch * plane..(ch + 1) * plane] {
                *v = (*v - m) * s * g + b;
            }
        }
    }
    Ok(())
}

/// [`bn_forward_eval`] overwriting its input.
pub fn bn_forward_eval_in_place(x: &mut Tensor, state: &BatchNormState) -> Result<()> {
    normalize_in_place(
        x,
        &state.running_mean,
        &state.running_var,
        &state.gamma,
        &state.beta,
        state.eps,
    )
}

/// `(1 − w)·prev + w·batch`, elementwise, for `w` in (0, 1].
pub fn ema_update(prev: &[f64], batch: &[f64], w: f64) -> Result<Vec<f64>> {
    if !(w > 0.0 && w <= 1.0) {
        return param_err(format!("EMA weight must lie in (0, 1], got {w}"));
    }
    if prev.len() != batch.len() {
        return dim_err(format!(
            "EMA: running statistic has {} channels, batch statistic {}",
            prev.len(),
            batch.len()
        ));
    }
    Ok(prev
        .iter()
        .zip(batch)
        .map(|(p, b)| (1.0 - w) * p + w * b)
        .collect())
}

/// Decaying momentum `ρ_k = ρ_{k−1}·ω` with floor `ζ`; the weight applied at
/// step `k` is `ρ_k + ζ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumSchedule {
    pub rho0: f64,
    pub omega: f64,
    pub zeta: f64,
    pub rho_k: f64,
    pub k: u64,
}

impl Default for MomentumSchedule {
    fn default() -> Self {
        MomentumSchedule::new(0.1, 0.94, 0.005).expect("default schedule is valid")
    }
}

impl MomentumSchedule {
    pub fn new(rho0: f64, omega: f64, zeta: f64) -> Result<Self> {
        let s = MomentumSchedule {
            rho0,
            omega,
            zeta,
            rho_k: rho0,
            k: 0,
        };
        s.validate()?;
        Ok(s)
    }

    /// Constant weight `rho`: `ω = 1`, `ζ = 0`.
    pub fn fixed(rho: f64) -> Result<Self> {
        Self::new(rho, 1.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho0 >= 0.0 && self.rho0 <= 1.0) {
            return param_err(format!("rho0 must lie in [0, 1], got {}", self.rho0));
        }
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return param_err(format!("omega must lie in (0, 1], got {}", self.omega));
        }
        // ζ = ρ₀ = 0 is the degenerate never-update schedule.
        if !(self.zeta >= 0.0 && (self.zeta < self.rho0 || self.zeta == 0.0)) {
            return param_err(format!(
                "zeta must satisfy 0 <= zeta < rho0, got zeta {} rho0 {}",
                self.zeta, self.rho0
            ));
        }
        if self.rho0 + self.zeta > 1.0 {
            return param_err("rho0 + zeta must not exceed 1");
        }
        Ok(())
    }

    /// Decays once and returns the new weight `w_k = ρ_k + ζ`. The first
    /// call already applies one decay: `w₁ = ρ₀·ω + ζ`.
    pub fn step(&mut self) -> f64 {
        self.rho_k *= self.omega;
        self.k += 1;
        self.weight()
    }

    /// Weight of the most recent step (`ρ₀ + ζ` before any step).
    pub fn weight(&self) -> f64 {
        self.rho_k + self.zeta
    }

    pub fn reset(&mut self) {
        self.rho_k = self.rho0;
        self.k = 0;
    }
}

/// Which running statistics normalize the adapt-mode output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsTiming {
    /// After this step's update.
    #[default]
    Post,
    /// Before this step's update.
    Pre,
}

/// Values kept by a training-mode forward for the backward pass.
#[derive(Debug, Clone)]
pub struct BnTrainCache {
    /// Normalized input before the affine map.
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Training path: normalize with the batch statistics, then fold them into
/// the running statistics with weight `rho`.
pub fn bn_forward_train(x: &Tensor, state: &mut BatchNormState, rho: f64) -> Result<Tensor> {
    bn_forward_train_cached(x, state, rho).map(|(y, _)| y)
}

pub fn bn_forward_train_cached(
    x: &Tensor,
    state: &mut BatchNormState,
    rho: f64,
) -> Result<(Tensor, BnTrainCache)> {
    let (mu, var) = batch_stats(x)?;
    let c = state.channels();
    let ones = vec![1.0; c];
    let zeros = vec![0.0; c];
    let xhat = normalize_with_eps(x, &mu, &var, &ones, &zeros, state.eps)?;
    let new_mean = ema_update(&state.running_mean, &mu, rho)?;
    let new_var = ema_update(&state.running_var, &var, rho)?;
    state.running_mean = new_mean;
    state.running_var = new_var;

    let plane = x.h() * x.w();
    let mut y = xhat.clone();
    for item in y.data_mut().chunks_mut(c * plane) {
        for ch in 0..c {
            let (g, b) = (state.gamma[ch], state.beta[ch]);
            for v in &mut item[ch * plane..(ch + 1) * plane] {
                *v = *v * g + b;
            }
        }
    }
    let inv_std = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    Ok((y, BnTrainCache { xhat, inv_std }))
}

/// Backward of the training path, treating the batch statistics as
/// functions of the input.
pub fn bn_backward_train(cache: &BnTrainCache, gamma: &[f64], out_grad: &Tensor) -> Result<LayerGrad> {
    let xhat = &cache.xhat;
    if xhat.shape() != out_grad.shape() {
        return dim_err(format!(
            "batch norm backward: out_grad {:?} vs input {:?}",
            out_grad.shape(),
            xhat.shape()
        ));
    }
    let c = xhat.c();
    let plane = xhat.h() * xhat.w();
    let m = (xhat.n() * plane) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..xhat.n() {
        let (xi, gi) = (xhat.item(i), out_grad.item(i));
        for ch in 0..c {
            let r = ch * plane..(ch + 1) * plane;
            for (xv, gv) in xi[r.clone()].iter().zip(&gi[r]) {
                dbeta[ch] += gv;
                dgamma[ch] += gv * xv;
            }
        }
    }
    let mut dx = out_grad.clone();
    let xd = xhat.data();
    for (i, item) in dx.data_mut().chunks_mut(c * plane).enumerate() {
        for ch in 0..c {
            let k = gamma[ch] * cache.inv_std[ch] / m;
            let base = i * c * plane + ch * plane;
            for (j, v) in item[ch * plane..(ch + 1) * plane].iter_mut().enumerate() {
                *v = k * (m * *v - dbeta[ch] - xd[base + j] * dgamma[ch]);
            }
        }
    }
    let mut param_grads = BTreeMap::new();
    param_grads.insert("gamma".to_string(), dgamma);
    param_grads.insert("beta".to_string(), dbeta);
    Ok(LayerGrad {
        input_grad: dx,
        param_grads,
    })
}

/// Inference path: frozen running statistics, no mutation.
pub fn bn_forward_eval(x: &Tensor, state: &BatchNormState) -> Result<Tensor> {
    bn_normalize(x, &state.running_mean, &state.running_var, state)
}

/// Adaptation path: mean then variance move toward this batch's statistics
/// with the same weight `w`; `w = 0` leaves the state alone. γ and β are
/// never touched.
pub fn bn_forward_adapt(
    x: &Tensor,
    state: &mut BatchNormState,
    w: f64,
    timing: StatsTiming,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&w) {
        return param_err(format!("adaptation weight must lie in [0, 1], got {w}"));
    }
    if w == 0.0 {
        return bn_forward_eval(x, state);
    }
    let (mu, var) = batch_stats(x)?;
    let pre = match timing {
        StatsTiming::Pre => Some(bn_forward_eval(x, state)?),
        StatsTiming::Post => None,
    };
    state.running_mean = ema_update(&state.running_mean, &mu, w)?;
    state.running_var = ema_update(&state.running_var, &var, w)?;
    match pre {
        Some(y) => Ok(y),
        None => bn_forward_eval(x, state),
    }
}
