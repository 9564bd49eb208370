//! Synthetic tables drawn from the generative model with known ground truth.
//!
//! Cluster centers lie on the unit sphere; each entity gets
//! `w = normalize(center + jitter)`, a true correction `delta`, the noise-free
//! observation `nu = F*(w + delta)` through a fixed random network `F*`, and
//! `z = nu + noise`.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::dataio::{EmbeddingTable, LabelTable};
use crate::diffcore::DiffNet;
use crate::error::{BemError, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub d_w: usize,
    pub d_z: usize,
    pub n_clusters: usize,
    /// Standard deviation of the true correction.
    pub delta_scale: f64,
    /// Standard deviation of the observation noise on `z`.
    pub noise_scale: f64,
    /// Hidden width of the true projection.
    pub hidden_dim: usize,
    /// Standard deviation of the per-entity jitter around its cluster center,
    /// applied before projecting back onto the sphere.
    pub cluster_spread: f64,
    /// Multiplier on the output layer of the true projection.
    pub signal_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n: 2000,
            d_w: 16,
            d_z: 32,
            n_clusters: 10,
            delta_scale: 0.1,
            noise_scale: 0.3,
            hidden_dim: 64,
            cluster_spread: 0.2,
            signal_scale: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0
            || self.d_w == 0
            || self.d_z == 0
            || self.hidden_dim == 0
            || self.n_clusters == 0
        {
            return Err(BemError::config("synthetic sizes must all be positive"));
        }
        if self.n_clusters > self.n {
            return Err(BemError::config(format!(
                "{} clusters cannot be filled by {} entities",
                self.n_clusters, self.n
            )));
        }
        for (name, v) in [
            ("delta_scale", self.delta_scale),
            ("noise_scale", self.noise_scale),
            ("cluster_spread", self.cluster_spread),
            ("signal_scale", self.signal_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(BemError::config(format!(
                    "{name} must be a non-negative number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthTruth {
    pub w: EmbeddingTable,
    pub delta: EmbeddingTable,
    pub nu: EmbeddingTable,
    pub z: EmbeddingTable,
    /// Cluster of each entity, as a one-element label set.
    pub labels: LabelTable,
    pub clusters: Vec<usize>,
    /// Attribute id of each cluster.
    pub attributes: Vec<String>,
    pub projection: DiffNet,
}

impl SynthTruth {
    /// Attribute of every entity, keyed by id.
    pub fn attribute_map(&self) -> std::collections::HashMap<String, String> {
        self.w
            .ids()
            .iter()
            .zip(&self.clusters)
            .map(|(id, &c)| (id.clone(), self.attributes[c].clone()))
            .collect()
    }
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, len: usize, std: f64) -> Vec<f64> {
    (0..len)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Draws a full synthetic dataset; deterministic in `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<SynthTruth> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, rng::SYNTH);
    let (n, d_w, d_z, hid) = (spec.n, spec.d_w, spec.d_z, spec.hidden_dim);

    let centers: Vec<Vec<f64>> = (0..spec.n_clusters)
        .map(|_| {
            let mut c = normal_vec(&mut rng, d_w, 1.0);
            normalize(&mut c);
            c
        })
        .collect();

    // He scaling keeps nu at the scale of its input
    let w1 = normal_vec(&mut rng, hid * d_w, (2.0 / d_w as f64).sqrt());
    let b1 = vec![0.0; hid];
    let w2 = normal_vec(
        &mut rng,
        d_z * hid,
        spec.signal_scale * (2.0 / hid as f64).sqrt(),
    );
    let b2 = vec![0.0; d_z];
    let projection = DiffNet::from_parts(d_w, hid, d_z, w1, b1, w2, b2)?;

    let ids: Vec<String> = (0..n).map(|i| format!("e{i}")).collect();
    let clusters: Vec<usize> = (0..n).map(|i| i % spec.n_clusters).collect();
    let delta_dist =
        Normal::new(0.0, spec.delta_scale).map_err(|e| BemError::config(e.to_string()))?;
    let noise_dist =
        Normal::new(0.0, spec.noise_scale).map_err(|e| BemError::config(e.to_string()))?;

    let mut w = Vec::with_capacity(n * d_w);
    let mut delta = Vec::with_capacity(n * d_w);
    let mut nu = Vec::with_capacity(n * d_z);
    let mut z = Vec::with_capacity(n * d_z);
    for &c in &clusters {
        let jitter = normal_vec(&mut rng, d_w, spec.cluster_spread);
        let mut wi: Vec<f64> = centers[c].iter().zip(&jitter).map(|(a, b)| a + b).collect();
        normalize(&mut wi);
        let di: Vec<f64> = (0..d_w).map(|_| delta_dist.sample(&mut rng)).collect();
        let x: Vec<f64> = wi.iter().zip(&di).map(|(a, b)| a + b).collect();
        let nui = projection.forward(&x)?;
        z.extend(nui.iter().map(|v| v + noise_dist.sample(&mut rng)));
        nu.extend(nui);
        w.extend(wi);
        delta.extend(di);
    }

    let attributes: Vec<String> = (0..spec.n_clusters).map(|c| format!("c{c}")).collect();
    let labels = LabelTable::new(
        ids.clone(),
        clusters
            .iter()
            .map(|&c| vec![attributes[c].clone()])
            .collect(),
    )?;
    Ok(SynthTruth {
        w: EmbeddingTable::new(ids.clone(), w, d_w)?,
        delta: EmbeddingTable::new(ids.clone(), delta, d_w)?,
        nu: EmbeddingTable::new(ids.clone(), nu, d_z)?,
        z: EmbeddingTable::new(ids, z, d_z)?,
        labels,
        clusters,
        attributes,
        projection,
    })
}

/// Mean squared error of `refined` against the noise-free `nu`, matched by id.
pub fn oracle_error(refined: &EmbeddingTable, truth: &SynthTruth) -> Result<f64> {
    table_mse(refined, &truth.nu)
}

/// `(1 / (N d)) sum_i ||a_i - reference_i||^2` over the entities of `reference`,
/// looked up in `a` by id.
pub fn table_mse(a: &EmbeddingTable, reference: &EmbeddingTable) -> Result<f64> {
    if a.dim() != reference.dim() {
        return Err(BemError::shape(format!(
            "table has dimension {}, reference has {}",
            a.dim(),
            reference.dim()
        )));
    }
    let index = a.index();
    let mut total = 0.0;
    for (i, id) in reference.ids().iter().enumerate() {
        let &r = index
            .get(id.as_str())
            .ok_or_else(|| BemError::Alignment(format!("table lacks entity `{id}`")))?;
        total += a
            .row(r)
            .iter()
            .zip(reference.row(i))
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>();
    }
    Ok(total / (reference.len() * reference.dim()) as f64)
}
