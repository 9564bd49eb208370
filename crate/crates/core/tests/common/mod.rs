#![allow(dead_code)]

use std::time::Instant;

use bem_core::bemmodel::{
    elbo_node, elbo_node_grad, elbo_pair, elbo_pair_grad, infer_posterior, reparametrize,
    BatchPrior, EdgeFunction, ElboParts, Entity, GradSink, NodeNoise,
};
use bem_core::dataio::EmbeddingTable;
use bem_core::diffcore::{DiffNet, NetGrads};
use bem_core::synthgen::{generate, oracle_error, SynthSpec, SynthTruth};
use bem_core::trainer::{refine, train, TrainConfig, TrainReport};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gauss_vec<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn random_prior<R: Rng>(rng: &mut R, d_w: usize, d_s: usize) -> BatchPrior {
    BatchPrior {
        mu_delta: vec![0.0; d_w],
        var_delta: (0..d_w).map(|_| rng.random_range(0.1..1.0)).collect(),
        log_s_mean: gauss_vec(rng, d_s, 0.5),
        log_s_var: (0..d_s).map(|_| rng.random_range(0.1..1.0)).collect(),
        lambda1: rng.random_range(0.5..2.0),
        lambda2: rng.random_range(0.5..2.0),
    }
}

/// Which ELBO an [`ElboCase`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Pair(EdgeFunction),
    /// Independent model, one entity.
    Node,
}

impl Objective {
    pub fn all() -> [Objective; 4] {
        [
            Objective::Pair(EdgeFunction::Translation),
            Objective::Pair(EdgeFunction::InnerProduct),
            Objective::Pair(EdgeFunction::Identity),
            Objective::Node,
        ]
    }

    fn d_s(self, d_z: usize) -> usize {
        match self {
            Objective::Pair(edge) => edge.latent_scale_dim(d_z),
            Objective::Node => d_z,
        }
    }
}

/// A fully specified single-sample ELBO: networks, data, priors and noise.
pub struct ElboCase {
    pub objective: Objective,
    pub f: DiffNet,
    pub h: DiffNet,
    pub w: [Vec<f64>; 2],
    pub z: [Vec<f64>; 2],
    pub prior: [BatchPrior; 2],
    pub noise: [NodeNoise; 2],
}

impl ElboCase {
    pub fn random<R: Rng>(
        rng: &mut R,
        objective: Objective,
        d_w: usize,
        d_z: usize,
        n_h: usize,
    ) -> Self {
        let d_s = objective.d_s(d_z);
        loop {
            let f = DiffNet::glorot(d_w, n_h, d_z, rng).unwrap();
            let mut h = DiffNet::glorot(d_w + d_z, n_h, 2 * d_w + 2 * d_s, rng).unwrap();
            // nonzero biases so the check covers them too
            for b in [1, 3] {
                for v in h.tensors_mut()[b].iter_mut() {
                    *v = rng.random_range(-0.3..0.3);
                }
            }
            let case = ElboCase {
                objective,
                f,
                h,
                w: [gauss_vec(rng, d_w, 1.0), gauss_vec(rng, d_w, 1.0)],
                z: [gauss_vec(rng, d_z, 1.0), gauss_vec(rng, d_z, 1.0)],
                prior: [random_prior(rng, d_w, d_s), random_prior(rng, d_w, d_s)],
                noise: [
                    NodeNoise::sample(d_w, d_s, rng),
                    NodeNoise::sample(d_w, d_s, rng),
                ],
            };
            if case.kink_margin() > 1e-3 {
                return case;
            }
        }
    }

    /// Smallest |pre-activation| of any ReLU touched by the ELBO.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for k in 0..2 {
            let input: Vec<f64> = self.z[k].iter().chain(&self.w[k]).copied().collect();
            let hc = self.h.forward_cached(&input).unwrap();
            let stats = infer_posterior(&self.h, &self.w[k], &self.z[k]).unwrap();
            let sample = reparametrize(&stats, &self.noise[k].delta, &self.noise[k].logs).unwrap();
            let u: Vec<f64> = self.w[k]
                .iter()
                .zip(&sample.delta)
                .map(|(a, b)| a + b)
                .collect();
            let fc = self.f.forward_cached(&u).unwrap();
            for p in hc.pre_activation.iter().chain(&fc.pre_activation) {
                margin = margin.min(p.abs());
            }
        }
        margin
    }

    fn entity(&self, k: usize) -> Entity<'_> {
        Entity {
            w: &self.w[k],
            z: &self.z[k],
        }
    }

    pub fn value(&self, f: &DiffNet, h: &DiffNet) -> ElboParts {
        match self.objective {
            Objective::Pair(edge) => elbo_pair(
                f,
                h,
                edge,
                self.entity(0),
                self.entity(1),
                &self.prior[0],
                &self.prior[1],
                &self.noise[0],
                &self.noise[1],
            )
            .unwrap(),
            Objective::Node => {
                elbo_node(f, h, self.entity(0), &self.prior[0], &self.noise[0]).unwrap()
            }
        }
    }

    pub fn gradients(&self) -> (NetGrads, NetGrads) {
        let mut gf = NetGrads::zeros_like(&self.f);
        let mut gh = NetGrads::zeros_like(&self.h);
        let sink = GradSink {
            f: &mut gf,
            h: &mut gh,
            scale: 1.0,
        };
        match self.objective {
            Objective::Pair(edge) => {
                elbo_pair_grad(
                    &self.f,
                    &self.h,
                    edge,
                    self.entity(0),
                    self.entity(1),
                    &self.prior[0],
                    &self.prior[1],
                    &self.noise[0],
                    &self.noise[1],
                    sink,
                )
                .unwrap();
            }
            Objective::Node => {
                elbo_node_grad(
                    &self.f,
                    &self.h,
                    self.entity(0),
                    &self.prior[0],
                    &self.noise[0],
                    sink,
                )
                .unwrap();
            }
        }
        (gf, gh)
    }

    /// Largest relative error between the analytic gradient and central
    /// differences with step `eps`, over every parameter of `f` and `h`.
    /// The denominator is floored at 1e-4 so near-zero entries are compared
    /// absolutely.
    pub fn max_relative_error(&self, eps: f64) -> f64 {
        let (gf, gh) = self.gradients();
        let mut worst: f64 = 0.0;
        for (which, grads) in [(0, &gf), (1, &gh)] {
            for (t, g) in grads.tensors().iter().enumerate() {
                for (k, &analytic) in g.iter().enumerate() {
                    let bump = |delta: f64| {
                        let mut f = self.f.clone();
                        let mut h = self.h.clone();
                        let net = if which == 0 { &mut f } else { &mut h };
                        net.tensors_mut()[t][k] += delta;
                        self.value(&f, &h).elbo
                    };
                    let numeric = (bump(eps) - bump(-eps)) / (2.0 * eps);
                    let denom = analytic.abs().max(numeric.abs()).max(1e-4);
                    worst = worst.max((analytic - numeric).abs() / denom);
                }
            }
        }
        worst
    }
}

/// Training settings of the synthetic acceptance runs: the defaults with
/// batch size 200, unnormalized inputs.
pub fn synthetic_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 200,
        epochs: 20.0,
        normalize_inputs: false,
        seed,
        ..TrainConfig::default()
    }
}

pub struct SyntheticRun {
    pub kg_refined: EmbeddingTable,
    pub bg_refined: EmbeddingTable,
    pub report: TrainReport,
    pub seconds: f64,
}

pub fn synthetic_run(truth: &SynthTruth, cfg: &TrainConfig) -> SyntheticRun {
    let start = Instant::now();
    let trained = train(&truth.w, &truth.z, cfg).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let (kg_refined, bg_refined) = refine(&truth.w, &truth.z, &trained.f, &trained.h).unwrap();
    SyntheticRun {
        kg_refined,
        bg_refined,
        report: trained.report,
        seconds,
    }
}

pub fn default_truth() -> SynthTruth {
    generate(&SynthSpec::default()).unwrap()
}

/// Oracle error after removing the per-coordinate mean difference.
pub fn centred_error(table: &EmbeddingTable, truth: &SynthTruth) -> f64 {
    let d = table.dim();
    let n = table.len() as f64;
    let offset: Vec<f64> = (0..d)
        .map(|k| {
            table
                .rows()
                .zip(truth.nu.rows())
                .map(|(a, b)| a[k] - b[k])
                .sum::<f64>()
                / n
        })
        .collect();
    oracle_error(table, truth).unwrap() - offset.iter().map(|o| o * o).sum::<f64>() / d as f64
}

pub fn smoothed(trace: &[f64], window: usize) -> Vec<f64> {
    trace
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub mod strategies {
    use bem_core::bemmodel::EdgeFunction;
    use bem_core::dataio::EmbeddingTable;
    use bem_core::diffcore::DiffNet;
    use bem_core::trainer::{Mode, TrainConfig};
    use proptest::prelude::*;

    pub fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![
            any::<f64>().prop_filter("finite", |v| v.is_finite()),
            -10.0..10.0f64,
            Just(0.0),
            Just(-0.0),
        ]
    }

    pub fn table() -> impl Strategy<Value = EmbeddingTable> {
        (
            1usize..8,
            prop::collection::btree_set("[A-Za-z0-9_:./-]{1,12}", 1..20),
        )
            .prop_flat_map(|(dim, ids)| {
                let ids: Vec<String> = ids.into_iter().collect();
                let n = ids.len();
                prop::collection::vec(finite(), n * dim)
                    .prop_map(move |data| EmbeddingTable::new(ids.clone(), data, dim).unwrap())
            })
    }

    fn edge() -> impl Strategy<Value = EdgeFunction> {
        prop_oneof![
            Just(EdgeFunction::Translation),
            Just(EdgeFunction::InnerProduct),
            Just(EdgeFunction::Identity),
        ]
    }

    pub fn config() -> impl Strategy<Value = TrainConfig> {
        (
            (
                2usize..2000,
                1e-3..100.0f64,
                1e-3..10.0f64,
                1e-3..10.0f64,
                0.0..1.0f64,
            ),
            (
                1usize..1000,
                1usize..100,
                edge(),
                any::<bool>(),
                1usize..5,
                any::<u64>(),
                any::<bool>(),
            ),
        )
            .prop_map(
                |(
                    (batch_size, epochs, lambda1, lambda2, learning_rate),
                    (hidden_dim, bootstrap_reps, edge, indep, n_iter, seed, normalize_inputs),
                )| {
                    let mode = if indep && edge == EdgeFunction::Identity {
                        Mode::Independent
                    } else {
                        Mode::Pairwise
                    };
                    TrainConfig {
                        batch_size,
                        epochs,
                        lambda1,
                        lambda2,
                        learning_rate,
                        hidden_dim,
                        bootstrap_reps,
                        edge,
                        mode,
                        n_iter,
                        seed,
                        normalize_inputs,
                    }
                },
            )
    }

    fn net(i: usize, hd: usize, o: usize) -> impl Strategy<Value = DiffNet> {
        (
            prop::collection::vec(finite(), hd * i),
            prop::collection::vec(finite(), hd),
            prop::collection::vec(finite(), o * hd),
            prop::collection::vec(finite(), o),
        )
            .prop_map(move |(w1, b1, w2, b2)| {
                DiffNet::from_parts(i, hd, o, w1, b1, w2, b2).unwrap()
            })
    }

    pub fn model() -> impl Strategy<Value = (DiffNet, DiffNet, TrainConfig)> {
        (config(), 1usize..5, 1usize..5, 1usize..6, 1usize..6).prop_flat_map(
            |(cfg, d_w, d_z, hf, hh)| {
                let d_s = cfg.edge.latent_scale_dim(d_z);
                (
                    net(d_w, hf, d_z),
                    net(d_w + d_z, hh, 2 * d_w + 2 * d_s),
                    Just(cfg),
                )
            },
        )
    }

    pub fn same_bits(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
    }
}
