//! The training loop and the refinement pass.
//!
//! Each step samples two batches, pairs them position by position, estimates
//! the batch priors, draws fresh noise, evaluates the mean ELBO over the pairs
//! and takes `n_iter` joint Adam steps on the projection network `f` and the
//! inference network `h`. After training, every entity is refined with the
//! posterior mean of its correction: `w_hat = w + mu_delta`, `z_hat = f(w_hat)`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;

use crate::bemmodel::{
    elbo_node_grad, elbo_pair_grad, estimate_prior, infer_posterior, EdgeFunction, ElboParts,
    Entity, GradSink, NodeNoise, PriorSettings,
};
use crate::dataio::{align, AlignPolicy, EmbeddingTable};
use crate::diffcore::{param_slots, AdamState, DiffNet, NetGrads};
use crate::error::{BemError, Result};
use crate::rng;

/// Which generative model the ELBO is taken under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Pairwise interactions through the edge function.
    Pairwise,
    /// Every entity on its own: `z_i ~ N(nu_i, diag(s_i))`. Requires the
    /// identity edge, whose pairwise form it must reproduce.
    Independent,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Pairwise => "p",
            Mode::Independent => "i",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = BemError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p" | "pairwise" => Ok(Mode::Pairwise),
            "i" | "independent" => Ok(Mode::Independent),
            other => Err(BemError::config(format!(
                "unknown mode `{other}` (expected p or i)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Passes over the data; the step count is `ceil(epochs * N / batch_size)`.
    pub epochs: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub hidden_dim: usize,
    pub bootstrap_reps: usize,
    pub edge: EdgeFunction,
    pub mode: Mode,
    /// Adam steps per sampled batch.
    pub n_iter: usize,
    pub seed: u64,
    /// L2-normalize the rows of both tables before training.
    pub normalize_inputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 500,
            epochs: 20.0,
            lambda1: 1.0,
            lambda2: 1.0,
            learning_rate: 0.001,
            hidden_dim: 500,
            bootstrap_reps: 30,
            edge: EdgeFunction::Translation,
            mode: Mode::Pairwise,
            n_iter: 1,
            seed: 0,
            normalize_inputs: true,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 12] = [
        "batch_size",
        "epochs",
        "lambda1",
        "lambda2",
        "learning_rate",
        "hidden_dim",
        "bootstrap_reps",
        "edge",
        "mode",
        "n_iter",
        "seed",
        "normalize_inputs",
    ];

    pub fn steps(&self, n: usize) -> usize {
        ((self.epochs * n as f64) / self.batch_size as f64)
            .ceil()
            .max(1.0) as usize
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.batch_size < 2 {
            return Err(BemError::config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.batch_size > n {
            return Err(BemError::config(format!(
                "batch size {} exceeds the {n} aligned entities",
                self.batch_size
            )));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(BemError::config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(BemError::config(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.hidden_dim == 0 || self.bootstrap_reps == 0 || self.n_iter == 0 {
            return Err(BemError::config(
                "hidden_dim, bootstrap_reps and n_iter must be positive",
            ));
        }
        if self.mode == Mode::Independent && self.edge != EdgeFunction::Identity {
            return Err(BemError::config(
                "the independent mode uses the identity edge",
            ));
        }
        Ok(())
    }

    /// `key = value` lines, one per field, in [`Self::KEYS`] order.
    pub fn to_kv(&self) -> String {
        let values = [
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.lambda1.to_string(),
            self.lambda2.to_string(),
            self.learning_rate.to_string(),
            self.hidden_dim.to_string(),
            self.bootstrap_reps.to_string(),
            self.edge.to_string(),
            self.mode.to_string(),
            self.n_iter.to_string(),
            self.seed.to_string(),
            self.normalize_inputs.to_string(),
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Sets one field from its text form. Returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| BemError::config(format!("`{key}`: cannot parse `{value}`")))
        }
        match key {
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "lambda1" => self.lambda1 = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "bootstrap_reps" => self.bootstrap_reps = num(key, value)?,
            "edge" => self.edge = value.parse()?,
            "mode" => self.mode = value.parse()?,
            "n_iter" => self.n_iter = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "normalize_inputs" => self.normalize_inputs = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Defaults overridden by every known key of `kv`; other keys are ignored.
    pub fn from_kv(kv: &HashMap<String, String>) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for key in Self::KEYS {
            if let Some(v) = kv.get(key) {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub elbo: f64,
    pub reconstruction: f64,
    pub kl: f64,
    /// Seconds since training started, measured after the step.
    pub wall_clock: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    /// CRC32 of the final parameters of `f` followed by `h`.
    pub checksum: u32,
    pub seed: u64,
}

impl TrainReport {
    /// Equality ignoring wall-clock timings.
    pub fn same_trajectory(&self, other: &TrainReport) -> bool {
        self.checksum == other.checksum
            && self.seed == other.seed
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.step == b.step
                    && a.elbo.to_bits() == b.elbo.to_bits()
                    && a.reconstruction.to_bits() == b.reconstruction.to_bits()
                    && a.kl.to_bits() == b.kl.to_bits()
            })
    }

    pub fn elbo_trace(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.elbo).collect()
    }

    pub fn total_seconds(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.wall_clock)
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub f: DiffNet,
    pub h: DiffNet,
    pub report: TrainReport,
}

pub fn parameter_checksum(f: &DiffNet, h: &DiffNet) -> u32 {
    let mut hasher = crc32fast::Hasher::new();
    f.feed_checksum(&mut hasher);
    h.feed_checksum(&mut hasher);
    hasher.finalize()
}

/// Two uniform samples of `n_b` distinct entities, paired by position.
///
/// When self-pairs are not allowed, any `a_m == b_m` is fixed by swapping
/// `b_m` with another random position of batch b; since both batches hold
/// distinct entities the swap never creates a new self-pair.
pub fn sample_paired_batches<R: Rng + ?Sized>(
    n: usize,
    n_b: usize,
    allow_self_pairs: bool,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    if n < 2 {
        return Err(BemError::config(format!(
            "need at least 2 entities, got {n}"
        )));
    }
    if n_b < 2 || n_b > n {
        return Err(BemError::config(format!(
            "batch size {n_b} must lie in [2, {n}]"
        )));
    }
    let a = index::sample(rng, n, n_b).into_vec();
    let mut b = index::sample(rng, n, n_b).into_vec();
    if !allow_self_pairs {
        for m in 0..n_b {
            if a[m] == b[m] {
                let mut other = rng.random_range(0..n_b - 1);
                if other >= m {
                    other += 1;
                }
                b.swap(m, other);
            }
        }
    }
    Ok(a.into_iter().zip(b).collect())
}

fn check_aligned(kg: &EmbeddingTable, bg: &EmbeddingTable) -> Result<()> {
    if kg.ids() == bg.ids() {
        return Ok(());
    }
    align(kg, bg, AlignPolicy::Strict)?;
    Err(BemError::Alignment(
        "tables hold the same entities in a different order; align them first".into(),
    ))
}

/// Runs the full training loop on two aligned tables.
pub fn train(kg: &EmbeddingTable, bg: &EmbeddingTable, cfg: &TrainConfig) -> Result<Trained> {
    let mut rng = rng::stream(cfg.seed, rng::TRAIN);
    let f = DiffNet::glorot(kg.dim(), cfg.hidden_dim, bg.dim(), &mut rng)?;
    let d_s = cfg.edge.latent_scale_dim(bg.dim());
    let h = DiffNet::glorot(
        kg.dim() + bg.dim(),
        cfg.hidden_dim,
        2 * kg.dim() + 2 * d_s,
        &mut rng,
    )?;
    train_from(kg, bg, cfg, f, h, &mut rng)
}

/// Training loop starting from given networks and random stream.
pub fn train_from<R: Rng + ?Sized>(
    kg: &EmbeddingTable,
    bg: &EmbeddingTable,
    cfg: &TrainConfig,
    mut f: DiffNet,
    mut h: DiffNet,
    rng: &mut R,
) -> Result<Trained> {
    check_aligned(kg, bg)?;
    let n = kg.len();
    cfg.validate(n)?;
    let (kg, bg) = if cfg.normalize_inputs {
        (kg.l2_normalized(), bg.l2_normalized())
    } else {
        (kg.clone(), bg.clone())
    };
    let d_w = kg.dim();
    let d_z = bg.dim();
    let d_s = cfg.edge.latent_scale_dim(d_z);
    if f.in_dim() != d_w
        || f.out_dim() != d_z
        || h.in_dim() != d_w + d_z
        || h.out_dim() != 2 * d_w + 2 * d_s
    {
        return Err(BemError::shape(
            "initial networks do not match the table dimensions",
        ));
    }

    let lens: Vec<usize> = f
        .tensors()
        .iter()
        .chain(h.tensors().iter())
        .map(|t| t.len())
        .collect();
    let mut adam = AdamState::new(&lens, cfg.learning_rate);
    let mut f_grads = NetGrads::zeros_like(&f);
    let mut h_grads = NetGrads::zeros_like(&h);
    let settings = PriorSettings {
        bootstrap_reps: cfg.bootstrap_reps,
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
    };
    let steps = cfg.steps(n);
    let n_b = cfg.batch_size;
    let scale = -1.0 / n_b as f64;
    let started = Instant::now();
    let mut records = Vec::with_capacity(steps);

    for step in 0..steps {
        let pairs = sample_paired_batches(n, n_b, cfg.edge.allows_self_pairs(), rng)?;
        let w_a: Vec<&[f64]> = pairs.iter().map(|&(a, _)| kg.row(a)).collect();
        let w_b: Vec<&[f64]> = pairs.iter().map(|&(_, b)| kg.row(b)).collect();
        let z_a: Vec<&[f64]> = pairs.iter().map(|&(a, _)| bg.row(a)).collect();
        let z_b: Vec<&[f64]> = pairs.iter().map(|&(_, b)| bg.row(b)).collect();
        let (prior_a, prior_b) = estimate_prior(&w_a, &w_b, &z_a, &z_b, cfg.edge, settings, rng)?;
        let noise: Vec<(NodeNoise, NodeNoise)> = (0..n_b)
            .map(|_| {
                let na = NodeNoise::sample(d_w, d_s, rng);
                let nb = NodeNoise::sample(d_w, d_s, rng);
                (na, nb)
            })
            .collect();

        let mut first = None;
        for _ in 0..cfg.n_iter {
            f_grads.clear();
            h_grads.clear();
            let mut total = ElboParts::default();
            for (m, (na, nb)) in noise.iter().enumerate() {
                let i = Entity {
                    w: w_a[m],
                    z: z_a[m],
                };
                let j = Entity {
                    w: w_b[m],
                    z: z_b[m],
                };
                let parts = match cfg.mode {
                    Mode::Pairwise => elbo_pair_grad(
                        &f,
                        &h,
                        cfg.edge,
                        i,
                        j,
                        &prior_a,
                        &prior_b,
                        na,
                        nb,
                        GradSink {
                            f: &mut f_grads,
                            h: &mut h_grads,
                            scale,
                        },
                    ),
                    Mode::Independent => {
                        let mut p = elbo_node_grad(
                            &f,
                            &h,
                            i,
                            &prior_a,
                            na,
                            GradSink {
                                f: &mut f_grads,
                                h: &mut h_grads,
                                scale,
                            },
                        )?;
                        p += elbo_node_grad(
                            &f,
                            &h,
                            j,
                            &prior_b,
                            nb,
                            GradSink {
                                f: &mut f_grads,
                                h: &mut h_grads,
                                scale,
                            },
                        )?;
                        Ok(p)
                    }
                }
                .map_err(|e| match e {
                    BemError::Domain(msg) => BemError::Training { step, msg },
                    other => other,
                })?;
                total += parts;
            }
            let mean = ElboParts {
                elbo: total.elbo / n_b as f64,
                reconstruction: total.reconstruction / n_b as f64,
                kl: total.kl / n_b as f64,
            };
            if !mean.elbo.is_finite() {
                return Err(BemError::Training {
                    step,
                    msg: format!("non-finite ELBO {}", mean.elbo),
                });
            }
            first.get_or_insert(mean);

            let mut slots = param_slots(&mut f, &f_grads, "f.");
            slots.extend(param_slots(&mut h, &h_grads, "h."));
            adam.step(&mut slots).map_err(|e| BemError::Training {
                step,
                msg: e.to_string(),
            })?;
        }
        let mean = first.expect("n_iter >= 1");
        records.push(StepRecord {
            step,
            elbo: mean.elbo,
            reconstruction: mean.reconstruction,
            kl: mean.kl,
            wall_clock: started.elapsed().as_secs_f64(),
        });
    }

    let checksum = parameter_checksum(&f, &h);
    Ok(Trained {
        f,
        h,
        report: TrainReport {
            records,
            checksum,
            seed: cfg.seed,
        },
    })
}

/// Refined tables: `w_hat = w + mu_delta_hat(w, z)` and `z_hat = f(w_hat)`.
///
/// Inputs must already be preprocessed the way they were for training.
pub fn refine(
    kg: &EmbeddingTable,
    bg: &EmbeddingTable,
    f: &DiffNet,
    h: &DiffNet,
) -> Result<(EmbeddingTable, EmbeddingTable)> {
    check_aligned(kg, bg)?;
    if f.in_dim() != kg.dim() {
        return Err(BemError::shape(format!(
            "kg table has dimension {}, model expects {}",
            kg.dim(),
            f.in_dim()
        )));
    }
    if f.out_dim() != bg.dim() {
        return Err(BemError::shape(format!(
            "bg table has dimension {}, model expects {}",
            bg.dim(),
            f.out_dim()
        )));
    }
    let mut w_hat = Vec::with_capacity(kg.data().len());
    let mut z_hat = Vec::with_capacity(bg.data().len());
    for (w, z) in kg.rows().zip(bg.rows()) {
        let stats = infer_posterior(h, w, z)?;
        let shifted: Vec<f64> = w
            .iter()
            .zip(&stats.mu_delta_hat)
            .map(|(a, b)| a + b)
            .collect();
        z_hat.extend(f.forward(&shifted)?);
        w_hat.extend(shifted);
    }
    Ok((
        EmbeddingTable::new(kg.ids().to_vec(), w_hat, kg.dim())?,
        EmbeddingTable::new(bg.ids().to_vec(), z_hat, bg.dim())?,
    ))
}

/// Applies the training-time preprocessing of `cfg` to a table.
pub fn preprocess(table: &EmbeddingTable, cfg: &TrainConfig) -> EmbeddingTable {
    if cfg.normalize_inputs {
        table.l2_normalized()
    } else {
        table.clone()
    }
}
