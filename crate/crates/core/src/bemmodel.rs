//! The variational model linking a prior embedding `w` and an observed
//! embedding `z`.
//!
//! Per entity the latents are a correction `delta` (normal) and a positive
//! variance scale `s` (log-normal, carried as `ell = log s`). The projection
//! `f` maps `w + delta` to `nu` in the observation space. An edge function `g`
//! turns two entities into the quantity modeled as Gaussian:
//!
//! ```text
//! g(z_i, z_j) ~ N(g(nu_i, nu_j), diag(theta_ij))
//! ```
//!
//! with `theta_ij = s_i + s_j` for the translation and inner-product edges.
//! For the identity edge the variance is the concatenation `(s_i, s_j)`, which
//! makes the pair likelihood factor into two per-node likelihoods.
//!
//! The inference network `h` maps `(z, w)` to posterior means and standard
//! deviations of `delta` and `ell`. The ELBO is the single-sample
//! reconstruction log-density minus the exact Gaussian KL to a batch prior.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::diffcore::{DiffNet, ForwardCache, NetGrads};
use crate::error::{BemError, Result};

/// Lower bound for every prior variance.
pub const VAR_FLOOR: f64 = 1e-6;
/// Added to every posterior standard deviation after the softplus.
pub const SIGMA_FLOOR: f64 = 1e-4;
const LOG_S_VAR_MIN: f64 = 1e-6;
const LOG_S_VAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeFunction {
    /// `g(x, y) = x - y`
    Translation,
    /// `g(x, y) = <x, y>`
    InnerProduct,
    /// `g(x, y) = (x, y)`
    Identity,
}

impl EdgeFunction {
    /// Length of `g(x, y)` for inputs of length `d`.
    pub fn output_dim(self, d: usize) -> usize {
        match self {
            EdgeFunction::Translation => d,
            EdgeFunction::InnerProduct => 1,
            EdgeFunction::Identity => 2 * d,
        }
    }

    /// Length of the per-entity scale latent `s` for observations of length `d`.
    pub fn latent_scale_dim(self, d: usize) -> usize {
        match self {
            EdgeFunction::Translation => d,
            EdgeFunction::InnerProduct => 1,
            EdgeFunction::Identity => d,
        }
    }

    /// Pairs with `i == j` carry no signal when `g(x, x)` is constant.
    pub fn allows_self_pairs(self) -> bool {
        self == EdgeFunction::Identity
    }

    pub fn apply(self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        if x.len() != y.len() {
            return Err(BemError::shape(format!(
                "edge function inputs differ in length: {} vs {}",
                x.len(),
                y.len()
            )));
        }
        Ok(match self {
            EdgeFunction::Translation => x.iter().zip(y).map(|(a, b)| a - b).collect(),
            EdgeFunction::InnerProduct => vec![x.iter().zip(y).map(|(a, b)| a * b).sum()],
            EdgeFunction::Identity => x.iter().chain(y).copied().collect(),
        })
    }

    /// Diagonal observation variance of a pair.
    pub fn pair_variance(self, s_i: &[f64], s_j: &[f64]) -> Vec<f64> {
        match self {
            EdgeFunction::Translation | EdgeFunction::InnerProduct => {
                s_i.iter().zip(s_j).map(|(a, b)| a + b).collect()
            }
            EdgeFunction::Identity => s_i.iter().chain(s_j).copied().collect(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EdgeFunction::Translation => "translation",
            EdgeFunction::InnerProduct => "inner",
            EdgeFunction::Identity => "identity",
        }
    }
}

impl fmt::Display for EdgeFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EdgeFunction {
    type Err = BemError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translation" => Ok(EdgeFunction::Translation),
            "inner" | "inner-product" | "similarity" => Ok(EdgeFunction::InnerProduct),
            "identity" => Ok(EdgeFunction::Identity),
            other => Err(BemError::config(format!(
                "unknown edge function `{other}` (expected translation, inner or identity)"
            ))),
        }
    }
}

/// Prior shared by every entity on one side of a sampled batch pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPrior {
    /// Always zero.
    pub mu_delta: Vec<f64>,
    pub var_delta: Vec<f64>,
    pub log_s_mean: Vec<f64>,
    pub log_s_var: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Posterior means and standard deviations of `delta` and `ell = log s`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStats {
    pub mu_delta_hat: Vec<f64>,
    pub sigma_delta_hat: Vec<f64>,
    pub mu_logs_hat: Vec<f64>,
    pub sigma_logs_hat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub delta: Vec<f64>,
    pub s: Vec<f64>,
}

/// Standard normal draws for one entity.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeNoise {
    pub delta: Vec<f64>,
    pub logs: Vec<f64>,
}

impl NodeNoise {
    pub fn zeros(d_w: usize, d_s: usize) -> Self {
        NodeNoise {
            delta: vec![0.0; d_w],
            logs: vec![0.0; d_s],
        }
    }

    pub fn sample<R: Rng + ?Sized>(d_w: usize, d_s: usize, rng: &mut R) -> Self {
        use rand_distr::StandardNormal;
        NodeNoise {
            delta: (0..d_w).map(|_| rng.sample(StandardNormal)).collect(),
            logs: (0..d_s).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSettings {
    pub bootstrap_reps: usize,
    pub lambda1: f64,
    pub lambda2: f64,
}

fn column_mean(rows: &[&[f64]], k: usize) -> f64 {
    rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64
}

/// Unbiased per-coordinate variance (divisor `n - 1`).
fn sample_variance(rows: &[&[f64]], dim: usize) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..dim)
        .map(|k| {
            let mean = column_mean(rows, k);
            rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / (n - 1.0)
        })
        .collect()
}

/// Per-coordinate mean squared deviation (divisor `n`) of the rows picked by `idx`.
fn mean_sq_deviation(
    rows: &[Vec<f64>],
    idx: impl Iterator<Item = usize> + Clone,
    dim: usize,
) -> Vec<f64> {
    let n = idx.clone().count() as f64;
    let mut mean = vec![0.0; dim];
    for i in idx.clone() {
        for (m, v) in mean.iter_mut().zip(&rows[i]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut out = vec![0.0; dim];
    for i in idx {
        for k in 0..dim {
            out[k] += (rows[i][k] - mean[k]).powi(2);
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Batch prior estimation for a paired batch `(a_m, b_m)`.
///
/// - `var_delta`: unbiased per-coordinate variance of `w` on each side.
/// - `mu_s`: mean squared deviation of `g(z_a, z_b)` around its batch mean.
/// - `sigma_s`: spread of `mu_s` over `bootstrap_reps` resamples of the pairs.
///
/// The `s` moments are moved to log space with the delta method:
/// `log_s_mean = ln(max(mu_s, floor))`, `log_s_var = (sigma_s / max(mu_s, floor))^2`.
pub fn estimate_prior<R: Rng + ?Sized>(
    w_a: &[&[f64]],
    w_b: &[&[f64]],
    z_a: &[&[f64]],
    z_b: &[&[f64]],
    edge: EdgeFunction,
    settings: PriorSettings,
    rng: &mut R,
) -> Result<(BatchPrior, BatchPrior)> {
    let n = w_a.len();
    if n < 2 {
        return Err(BemError::config(format!(
            "batch size must be at least 2, got {n}"
        )));
    }
    if w_b.len() != n || z_a.len() != n || z_b.len() != n {
        return Err(BemError::shape("paired batches differ in size"));
    }
    if settings.bootstrap_reps == 0 {
        return Err(BemError::config("bootstrap replicates must be positive"));
    }
    let d_w = w_a[0].len();
    let d_z = z_a[0].len();
    if w_a.iter().chain(w_b).any(|r| r.len() != d_w)
        || z_a.iter().chain(z_b).any(|r| r.len() != d_z)
    {
        return Err(BemError::shape("ragged rows in batch"));
    }

    let var_a: Vec<f64> = sample_variance(w_a, d_w)
        .into_iter()
        .map(|v| v.max(VAR_FLOOR))
        .collect();
    let var_b: Vec<f64> = sample_variance(w_b, d_w)
        .into_iter()
        .map(|v| v.max(VAR_FLOOR))
        .collect();

    let g_rows: Vec<Vec<f64>> = z_a
        .iter()
        .zip(z_b)
        .map(|(a, b)| edge.apply(a, b))
        .collect::<Result<_>>()?;
    let d_g = edge.output_dim(d_z);
    let mu_s = mean_sq_deviation(&g_rows, 0..n, d_g);

    let reps = settings.bootstrap_reps;
    let mut boot = Vec::with_capacity(reps);
    let mut picks = vec![0usize; n];
    for _ in 0..reps {
        picks.iter_mut().for_each(|p| *p = rng.random_range(0..n));
        boot.push(mean_sq_deviation(&g_rows, picks.iter().copied(), d_g));
    }
    let sigma_s: Vec<f64> = (0..d_g)
        .map(|k| {
            let mean = boot.iter().map(|b| b[k]).sum::<f64>() / reps as f64;
            let var = boot.iter().map(|b| (b[k] - mean).powi(2)).sum::<f64>() / reps as f64;
            var.sqrt()
        })
        .collect();

    let (log_mean, log_var): (Vec<f64>, Vec<f64>) = mu_s
        .iter()
        .zip(&sigma_s)
        .map(|(&m, &s)| {
            let m = m.max(VAR_FLOOR);
            (
                m.ln(),
                ((s / m).powi(2)).clamp(LOG_S_VAR_MIN, LOG_S_VAR_MAX),
            )
        })
        .unzip();

    let (s_a, s_b) = match edge {
        EdgeFunction::Identity => {
            let (ma, mb) = log_mean.split_at(d_z);
            let (va, vb) = log_var.split_at(d_z);
            ((ma.to_vec(), va.to_vec()), (mb.to_vec(), vb.to_vec()))
        }
        _ => ((log_mean.clone(), log_var.clone()), (log_mean, log_var)),
    };
    let make = |var_delta: Vec<f64>, (log_s_mean, log_s_var): (Vec<f64>, Vec<f64>)| BatchPrior {
        mu_delta: vec![0.0; d_w],
        var_delta,
        log_s_mean,
        log_s_var,
        lambda1: settings.lambda1,
        lambda2: settings.lambda2,
    };
    Ok((make(var_a, s_a), make(var_b, s_b)))
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Latent dimensions `(d_w, d_s)` implied by an inference network.
fn posterior_dims(h: &DiffNet, d_w: usize, d_z: usize) -> Result<usize> {
    if h.in_dim() != d_w + d_z {
        return Err(BemError::shape(format!(
            "inference network takes {} inputs, but d_w + d_z = {}",
            h.in_dim(),
            d_w + d_z
        )));
    }
    let out = h.out_dim();
    if out <= 2 * d_w || !(out - 2 * d_w).is_multiple_of(2) {
        return Err(BemError::shape(format!(
            "inference network output {out} is not 2*d_w + 2*d_s for d_w = {d_w}"
        )));
    }
    Ok((out - 2 * d_w) / 2)
}

fn split_raw(raw: &[f64], d_w: usize, d_s: usize) -> PosteriorStats {
    let sig = |v: &[f64]| v.iter().map(|&r| softplus(r) + SIGMA_FLOOR).collect();
    PosteriorStats {
        mu_delta_hat: raw[..d_w].to_vec(),
        sigma_delta_hat: sig(&raw[d_w..2 * d_w]),
        mu_logs_hat: raw[2 * d_w..2 * d_w + d_s].to_vec(),
        sigma_logs_hat: sig(&raw[2 * d_w + d_s..]),
    }
}

fn posterior_input(w: &[f64], z: &[f64]) -> Vec<f64> {
    z.iter().chain(w).copied().collect()
}

/// Runs `h` on `(z, w)` and splits its output into
/// `(mu_delta, sigma_delta, mu_ell, sigma_ell)`; both sigma blocks go through
/// `softplus(.) + SIGMA_FLOOR`.
pub fn infer_posterior(h: &DiffNet, w: &[f64], z: &[f64]) -> Result<PosteriorStats> {
    let d_s = posterior_dims(h, w.len(), z.len())?;
    let raw = h.forward(&posterior_input(w, z))?;
    Ok(split_raw(&raw, w.len(), d_s))
}

pub fn reparametrize(
    stats: &PosteriorStats,
    eps_delta: &[f64],
    eps_logs: &[f64],
) -> Result<LatentSample> {
    if eps_delta.len() != stats.mu_delta_hat.len() || eps_logs.len() != stats.mu_logs_hat.len() {
        return Err(BemError::shape("noise length does not match posterior"));
    }
    let delta = stats
        .mu_delta_hat
        .iter()
        .zip(&stats.sigma_delta_hat)
        .zip(eps_delta)
        .map(|((m, s), e)| m + s * e)
        .collect();
    let s = stats
        .mu_logs_hat
        .iter()
        .zip(&stats.sigma_logs_hat)
        .zip(eps_logs)
        .map(|((m, s), e)| (m + s * e).exp())
        .collect();
    Ok(LatentSample { delta, s })
}

/// `-sum_k [ log(v_k)/2 + r_k^2 / (2 v_k) ]` for residual `r` and variance `v`.
fn gaussian_recon(target: &[f64], pred: &[f64], var: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for ((t, p), &v) in target.iter().zip(pred).zip(var) {
        if v <= 0.0 || !v.is_finite() {
            return Err(BemError::Domain(format!(
                "observation variance must be positive, got {v}"
            )));
        }
        let r = t - p;
        total -= 0.5 * v.ln() + r * r / (2.0 * v);
    }
    Ok(total)
}

/// Log-density of `g(z_i, z_j)` under `N(g(nu_i, nu_j), diag(theta))`, dropping
/// the `(d_g / 2) log(2 pi)` constant.
pub fn reconstruction_term(
    edge: EdgeFunction,
    z_i: &[f64],
    z_j: &[f64],
    nu_i: &[f64],
    nu_j: &[f64],
    s_i: &[f64],
    s_j: &[f64],
) -> Result<f64> {
    let target = edge.apply(z_i, z_j)?;
    let pred = edge.apply(nu_i, nu_j)?;
    if s_i.len() != s_j.len() {
        return Err(BemError::shape("scale latents differ in length"));
    }
    let var = edge.pair_variance(s_i, s_j);
    if var.len() != target.len() {
        return Err(BemError::shape(format!(
            "variance has length {}, edge output has length {}",
            var.len(),
            target.len()
        )));
    }
    gaussian_recon(&target, &pred, &var)
}

/// `KL(N(mu_q, sigma_q^2) || N(mu_p, var_p))` summed over coordinates.
pub fn gaussian_kl(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], var_p: &[f64]) -> f64 {
    mu_q.iter()
        .zip(sigma_q)
        .zip(mu_p.iter().zip(var_p))
        .map(|((mq, sq), (mp, vp))| {
            let ratio = sq * sq / vp;
            0.5 * (-ratio.ln() + ratio + (mq - mp).powi(2) / vp - 1.0)
        })
        .sum()
}

fn scaled(v: &[f64], lambda: f64) -> Vec<f64> {
    v.iter().map(|x| x * lambda).collect()
}

/// KL of one entity's posterior to the lambda-scaled batch prior: the `delta`
/// block against `N(0, lambda1 * var_delta)` plus the `ell` block against
/// `N(log_s_mean, lambda2 * log_s_var)`. The log-normal KL on `s` equals the
/// normal KL on `ell`.
pub fn kl_penalty(stats: &PosteriorStats, prior: &BatchPrior) -> Result<f64> {
    if stats.mu_delta_hat.len() != prior.var_delta.len()
        || stats.mu_logs_hat.len() != prior.log_s_var.len()
    {
        return Err(BemError::shape("posterior and prior dimensions differ"));
    }
    let delta = gaussian_kl(
        &stats.mu_delta_hat,
        &stats.sigma_delta_hat,
        &prior.mu_delta,
        &scaled(&prior.var_delta, prior.lambda1),
    );
    let logs = gaussian_kl(
        &stats.mu_logs_hat,
        &stats.sigma_logs_hat,
        &prior.log_s_mean,
        &scaled(&prior.log_s_var, prior.lambda2),
    );
    Ok(delta + logs)
}

/// One ELBO estimate and its split.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElboParts {
    pub elbo: f64,
    pub reconstruction: f64,
    /// Sum of the KL penalties of every entity involved.
    pub kl: f64,
}

impl std::ops::AddAssign for ElboParts {
    fn add_assign(&mut self, rhs: Self) {
        self.elbo += rhs.elbo;
        self.reconstruction += rhs.reconstruction;
        self.kl += rhs.kl;
    }
}

/// The inputs of one entity.
#[derive(Debug, Clone, Copy)]
pub struct Entity<'a> {
    pub w: &'a [f64],
    pub z: &'a [f64],
}

/// Everything the backward pass needs about one entity.
struct NodeState {
    h_cache: ForwardCache,
    stats: PosteriorStats,
    sample: LatentSample,
    f_cache: ForwardCache,
}

impl NodeState {
    fn nu(&self) -> &[f64] {
        &self.f_cache.output
    }
}

fn node_forward(
    f: &DiffNet,
    h: &DiffNet,
    node: Entity<'_>,
    noise: &NodeNoise,
) -> Result<NodeState> {
    let d_w = node.w.len();
    if f.in_dim() != d_w || f.out_dim() != node.z.len() {
        return Err(BemError::shape(format!(
            "projection network is {}->{}, data is {}->{}",
            f.in_dim(),
            f.out_dim(),
            d_w,
            node.z.len()
        )));
    }
    let d_s = posterior_dims(h, d_w, node.z.len())?;
    let h_cache = h.forward_cached(&posterior_input(node.w, node.z))?;
    let stats = split_raw(&h_cache.output, d_w, d_s);
    let sample = reparametrize(&stats, &noise.delta, &noise.logs)?;
    let u: Vec<f64> = node
        .w
        .iter()
        .zip(&sample.delta)
        .map(|(a, b)| a + b)
        .collect();
    let f_cache = f.forward_cached(&u)?;
    Ok(NodeState {
        h_cache,
        stats,
        sample,
        f_cache,
    })
}

/// Gradient of `-KL` for one Gaussian block: returns `(d/d mu, d/d sigma)`.
fn neg_kl_grads(
    mu_q: &[f64],
    sigma_q: &[f64],
    mu_p: &[f64],
    var_p: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let d_mu = mu_q
        .iter()
        .zip(mu_p)
        .zip(var_p)
        .map(|((m, mp), v)| -(m - mp) / v)
        .collect();
    let d_sigma = sigma_q
        .iter()
        .zip(var_p)
        .map(|(s, v)| 1.0 / s - s / v)
        .collect();
    (d_mu, d_sigma)
}

/// Backward pass for one entity. `d_nu` and `d_s` are gradients of
/// `scale * reconstruction`; the entity's `-scale * KL` is added here.
#[allow(clippy::too_many_arguments)]
fn node_backward(
    f: &DiffNet,
    h: &DiffNet,
    st: &NodeState,
    prior: &BatchPrior,
    noise: &NodeNoise,
    d_nu: &[f64],
    d_s: &[f64],
    scale: f64,
    f_grads: &mut NetGrads,
    h_grads: &mut NetGrads,
) -> Result<()> {
    let d_u = f.backward_accumulate(&st.f_cache, d_nu, f_grads)?;
    let stats = &st.stats;
    let (kl_mu_d, kl_sig_d) = neg_kl_grads(
        &stats.mu_delta_hat,
        &stats.sigma_delta_hat,
        &prior.mu_delta,
        &scaled(&prior.var_delta, prior.lambda1),
    );
    let (kl_mu_l, kl_sig_l) = neg_kl_grads(
        &stats.mu_logs_hat,
        &stats.sigma_logs_hat,
        &prior.log_s_mean,
        &scaled(&prior.log_s_var, prior.lambda2),
    );

    let d_w = d_u.len();
    let d_s_dim = d_s.len();
    let raw = &st.h_cache.output;
    let mut d_raw = Vec::with_capacity(raw.len());
    // delta = mu + sigma * eps, so d/dmu = d_delta and d/dsigma = d_delta * eps.
    for k in 0..d_w {
        d_raw.push(d_u[k] + scale * kl_mu_d[k]);
    }
    for k in 0..d_w {
        let d_sigma = d_u[k] * noise.delta[k] + scale * kl_sig_d[k];
        d_raw.push(d_sigma * sigmoid(raw[d_w + k]));
    }
    // s = exp(ell) so d_ell = d_s * s.
    let d_ell: Vec<f64> = d_s.iter().zip(&st.sample.s).map(|(g, s)| g * s).collect();
    for k in 0..d_s_dim {
        d_raw.push(d_ell[k] + scale * kl_mu_l[k]);
    }
    for k in 0..d_s_dim {
        let d_sigma = d_ell[k] * noise.logs[k] + scale * kl_sig_l[k];
        d_raw.push(d_sigma * sigmoid(raw[2 * d_w + d_s_dim + k]));
    }
    h.backward_accumulate(&st.h_cache, &d_raw, h_grads)?;
    Ok(())
}

fn check_noise(noise: &NodeNoise, d_w: usize, d_s: usize) -> Result<()> {
    if noise.delta.len() != d_w || noise.logs.len() != d_s {
        return Err(BemError::shape(format!(
            "noise lengths ({}, {}) do not match latents ({d_w}, {d_s})",
            noise.delta.len(),
            noise.logs.len()
        )));
    }
    Ok(())
}

/// Gradient accumulators for both networks.
pub struct GradSink<'a> {
    pub f: &'a mut NetGrads,
    pub h: &'a mut NetGrads,
    /// Gradients are taken of `scale * elbo`.
    pub scale: f64,
}

/// Single-sample ELBO of the pairwise model for entities `i` and `j`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_pair(
    f: &DiffNet,
    h: &DiffNet,
    edge: EdgeFunction,
    i: Entity<'_>,
    j: Entity<'_>,
    prior_i: &BatchPrior,
    prior_j: &BatchPrior,
    noise_i: &NodeNoise,
    noise_j: &NodeNoise,
) -> Result<ElboParts> {
    elbo_pair_impl(
        f,
        h,
        edge,
        i,
        j,
        (prior_i, prior_j),
        (noise_i, noise_j),
        None,
    )
}

/// [`elbo_pair`] that also accumulates gradients of `sink.scale * elbo`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_pair_grad(
    f: &DiffNet,
    h: &DiffNet,
    edge: EdgeFunction,
    i: Entity<'_>,
    j: Entity<'_>,
    prior_i: &BatchPrior,
    prior_j: &BatchPrior,
    noise_i: &NodeNoise,
    noise_j: &NodeNoise,
    sink: GradSink<'_>,
) -> Result<ElboParts> {
    elbo_pair_impl(
        f,
        h,
        edge,
        i,
        j,
        (prior_i, prior_j),
        (noise_i, noise_j),
        Some(sink),
    )
}

#[allow(clippy::too_many_arguments)]
fn elbo_pair_impl(
    f: &DiffNet,
    h: &DiffNet,
    edge: EdgeFunction,
    i: Entity<'_>,
    j: Entity<'_>,
    priors: (&BatchPrior, &BatchPrior),
    noises: (&NodeNoise, &NodeNoise),
    sink: Option<GradSink<'_>>,
) -> Result<ElboParts> {
    let d_z = i.z.len();
    let d_s = edge.latent_scale_dim(d_z);
    check_noise(noises.0, i.w.len(), d_s)?;
    check_noise(noises.1, j.w.len(), d_s)?;
    let st_i = node_forward(f, h, i, noises.0)?;
    let st_j = node_forward(f, h, j, noises.1)?;
    if st_i.sample.s.len() != d_s {
        return Err(BemError::shape(format!(
            "inference network emits {} scale latents, the {edge} edge needs {d_s}",
            st_i.sample.s.len()
        )));
    }

    let target = edge.apply(i.z, j.z)?;
    let pred = edge.apply(st_i.nu(), st_j.nu())?;
    let var = edge.pair_variance(&st_i.sample.s, &st_j.sample.s);
    let reconstruction = gaussian_recon(&target, &pred, &var)?;
    let kl = kl_penalty(&st_i.stats, priors.0)? + kl_penalty(&st_j.stats, priors.1)?;
    let parts = ElboParts {
        elbo: reconstruction - kl,
        reconstruction,
        kl,
    };

    let Some(sink) = sink else {
        return Ok(parts);
    };
    let c = sink.scale;
    // d recon / d pred = r / v ; d recon / d v = -1/(2v) + r^2/(2v^2)
    let mut d_pred = Vec::with_capacity(var.len());
    let mut d_var = Vec::with_capacity(var.len());
    for ((t, p), v) in target.iter().zip(&pred).zip(&var) {
        let r = t - p;
        d_pred.push(c * r / v);
        d_var.push(c * (-0.5 / v + r * r / (2.0 * v * v)));
    }
    let (d_nu_i, d_nu_j): (Vec<f64>, Vec<f64>) = match edge {
        EdgeFunction::Translation => (d_pred.clone(), d_pred.iter().map(|g| -g).collect()),
        EdgeFunction::InnerProduct => (
            st_j.nu().iter().map(|v| d_pred[0] * v).collect(),
            st_i.nu().iter().map(|v| d_pred[0] * v).collect(),
        ),
        EdgeFunction::Identity => (d_pred[..d_z].to_vec(), d_pred[d_z..].to_vec()),
    };
    let (d_s_i, d_s_j) = match edge {
        EdgeFunction::Identity => (d_var[..d_z].to_vec(), d_var[d_z..].to_vec()),
        _ => (d_var.clone(), d_var),
    };
    node_backward(
        f, h, &st_i, priors.0, noises.0, &d_nu_i, &d_s_i, c, sink.f, sink.h,
    )?;
    node_backward(
        f, h, &st_j, priors.1, noises.1, &d_nu_j, &d_s_j, c, sink.f, sink.h,
    )?;
    Ok(parts)
}

/// Single-sample ELBO of the independent model for one entity:
/// `z ~ N(nu, diag(s))` with the same latents and prior as the pairwise model.
pub fn elbo_node(
    f: &DiffNet,
    h: &DiffNet,
    node: Entity<'_>,
    prior: &BatchPrior,
    noise: &NodeNoise,
) -> Result<ElboParts> {
    elbo_node_impl(f, h, node, prior, noise, None)
}

pub fn elbo_node_grad(
    f: &DiffNet,
    h: &DiffNet,
    node: Entity<'_>,
    prior: &BatchPrior,
    noise: &NodeNoise,
    sink: GradSink<'_>,
) -> Result<ElboParts> {
    elbo_node_impl(f, h, node, prior, noise, Some(sink))
}

fn elbo_node_impl(
    f: &DiffNet,
    h: &DiffNet,
    node: Entity<'_>,
    prior: &BatchPrior,
    noise: &NodeNoise,
    sink: Option<GradSink<'_>>,
) -> Result<ElboParts> {
    let d_z = node.z.len();
    check_noise(noise, node.w.len(), d_z)?;
    let st = node_forward(f, h, node, noise)?;
    if st.sample.s.len() != d_z {
        return Err(BemError::shape(
            "independent model needs one scale latent per observed coordinate",
        ));
    }
    let reconstruction = gaussian_recon(node.z, st.nu(), &st.sample.s)?;
    let kl = kl_penalty(&st.stats, prior)?;
    let parts = ElboParts {
        elbo: reconstruction - kl,
        reconstruction,
        kl,
    };
    let Some(sink) = sink else {
        return Ok(parts);
    };
    let c = sink.scale;
    let mut d_nu = Vec::with_capacity(d_z);
    let mut d_s = Vec::with_capacity(d_z);
    for ((t, p), v) in node.z.iter().zip(st.nu()).zip(&st.sample.s) {
        let r = t - p;
        d_nu.push(c * r / v);
        d_s.push(c * (-0.5 / v + r * r / (2.0 * v * v)));
    }
    node_backward(f, h, &st, prior, noise, &d_nu, &d_s, c, sink.f, sink.h)?;
    Ok(parts)
}
