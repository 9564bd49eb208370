//! Dense two-layer perceptrons with hand-written gradients, plus Adam.
//!
//! A [`DiffNet`] computes `W2 · relu(W1 · x + b1) + b2`. Weights are stored
//! row-major (`W1` is `hidden × in`, `W2` is `out × hidden`). All arithmetic is
//! `f64` and every loop runs in a fixed order, so results are bit-reproducible.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{BemError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DiffNet {
    in_dim: usize,
    hidden_dim: usize,
    out_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

/// Gradients shaped exactly like the parameters of a [`DiffNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl NetGrads {
    pub fn zeros_like(net: &DiffNet) -> Self {
        NetGrads {
            w1: vec![0.0; net.w1.len()],
            b1: vec![0.0; net.b1.len()],
            w2: vec![0.0; net.w2.len()],
            b2: vec![0.0; net.b2.len()],
        }
    }

    pub fn clear(&mut self) {
        for t in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            t.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

pub const TENSOR_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

fn check_dims(in_dim: usize, hidden_dim: usize, out_dim: usize) -> Result<()> {
    if in_dim == 0 || hidden_dim == 0 || out_dim == 0 {
        return Err(BemError::shape(format!(
            "network dims must be positive, got {in_dim}x{hidden_dim}x{out_dim}"
        )));
    }
    Ok(())
}

impl DiffNet {
    /// All-zero network.
    pub fn zeros(in_dim: usize, hidden_dim: usize, out_dim: usize) -> Result<Self> {
        check_dims(in_dim, hidden_dim, out_dim)?;
        Ok(DiffNet {
            in_dim,
            hidden_dim,
            out_dim,
            w1: vec![0.0; hidden_dim * in_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; out_dim * hidden_dim],
            b2: vec![0.0; out_dim],
        })
    }

    /// Glorot-uniform weights, zero biases. `W1` is drawn before `W2`, row by row.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(in_dim, hidden_dim, out_dim)?;
        let limit1 = (6.0 / (in_dim + hidden_dim) as f64).sqrt();
        let limit2 = (6.0 / (hidden_dim + out_dim) as f64).sqrt();
        let u1 = Uniform::new_inclusive(-limit1, limit1).expect("finite bounds");
        let u2 = Uniform::new_inclusive(-limit2, limit2).expect("finite bounds");
        net.w1.iter_mut().for_each(|w| *w = u1.sample(rng));
        net.w2.iter_mut().for_each(|w| *w = u2.sample(rng));
        Ok(net)
    }

    /// Builds a network from explicit tensors, validating every shape.
    pub fn from_parts(
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        check_dims(in_dim, hidden_dim, out_dim)?;
        let expected = [
            hidden_dim * in_dim,
            hidden_dim,
            out_dim * hidden_dim,
            out_dim,
        ];
        let got = [w1.len(), b1.len(), w2.len(), b2.len()];
        for ((name, e), g) in TENSOR_NAMES.iter().zip(expected).zip(got) {
            if e != g {
                return Err(BemError::shape(format!(
                    "tensor {name}: expected {e} values, got {g}"
                )));
            }
        }
        let net = DiffNet {
            in_dim,
            hidden_dim,
            out_dim,
            w1,
            b1,
            w2,
            b2,
        };
        if let Some(name) = net.first_non_finite() {
            return Err(BemError::Domain(format!(
                "tensor {name} has non-finite values"
            )));
        }
        Ok(net)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Parameter tensors in the fixed order `w1, b1, w2, b2`.
    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        TENSOR_NAMES
            .iter()
            .zip(self.tensors())
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| *n)
    }

    pub fn is_finite(&self) -> bool {
        self.first_non_finite().is_none()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.output)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.in_dim {
            return Err(BemError::shape(format!(
                "network input: expected length {}, got {}",
                self.in_dim,
                x.len()
            )));
        }
        let mut pre = self.b1.clone();
        for (j, p) in pre.iter_mut().enumerate() {
            let row = &self.w1[j * self.in_dim..(j + 1) * self.in_dim];
            *p += dot(row, x);
        }
        let hidden: Vec<f64> = pre.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let mut output = self.b2.clone();
        for (k, o) in output.iter_mut().enumerate() {
            let row = &self.w2[k * self.hidden_dim..(k + 1) * self.hidden_dim];
            *o += dot(row, &hidden);
        }
        Ok(ForwardCache {
            input: x.to_vec(),
            pre_activation: pre,
            hidden,
            output,
        })
    }

    /// Gradients of `upstream · output` with respect to every parameter and
    /// to the input.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(NetGrads, Vec<f64>)> {
        let cache = self.forward_cached(x)?;
        let mut grads = NetGrads::zeros_like(self);
        let input_grad = self.backward_accumulate(&cache, upstream, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Adds the parameter gradients into `grads` and returns the input gradient.
    /// The ReLU derivative at exactly zero is taken as zero.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grads: &mut NetGrads,
    ) -> Result<Vec<f64>> {
        if upstream.len() != self.out_dim {
            return Err(BemError::shape(format!(
                "upstream gradient: expected length {}, got {}",
                self.out_dim,
                upstream.len()
            )));
        }
        if cache.hidden.len() != self.hidden_dim || cache.input.len() != self.in_dim {
            return Err(BemError::shape(
                "forward cache does not belong to this network",
            ));
        }
        let mut grad_hidden = vec![0.0; self.hidden_dim];
        for (k, &gy) in upstream.iter().enumerate() {
            grads.b2[k] += gy;
            let span = k * self.hidden_dim..(k + 1) * self.hidden_dim;
            for (((gw, &w), gh), &a) in grads.w2[span.clone()]
                .iter_mut()
                .zip(&self.w2[span])
                .zip(&mut grad_hidden)
                .zip(&cache.hidden)
            {
                *gw += gy * a;
                *gh += w * gy;
            }
        }
        let mut input_grad = vec![0.0; self.in_dim];
        for (j, &ga) in grad_hidden.iter().enumerate() {
            if cache.pre_activation[j] <= 0.0 {
                continue;
            }
            grads.b1[j] += ga;
            let span = j * self.in_dim..(j + 1) * self.in_dim;
            for (((gw, &w), gi), &x) in grads.w1[span.clone()]
                .iter_mut()
                .zip(&self.w1[span])
                .zip(&mut input_grad)
                .zip(&cache.input)
            {
                *gw += ga * x;
                *gi += w * ga;
            }
        }
        Ok(input_grad)
    }

    /// CRC32 over the little-endian bytes of all tensors.
    pub fn checksum(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        self.feed_checksum(&mut hasher);
        hasher.finalize()
    }

    pub(crate) fn feed_checksum(&self, hasher: &mut crc32fast::Hasher) {
        for t in self.tensors() {
            for v in t {
                hasher.update(&v.to_le_bytes());
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One named parameter tensor together with its gradient.
pub struct ParamSlot<'a> {
    pub name: String,
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
}

/// Pairs each tensor of `net` with the matching tensor of `grads`.
pub fn param_slots<'a>(
    net: &'a mut DiffNet,
    grads: &'a NetGrads,
    prefix: &str,
) -> Vec<ParamSlot<'a>> {
    net.tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(TENSOR_NAMES)
        .map(|((value, grad), name)| ParamSlot {
            name: format!("{prefix}{name}"),
            value,
            grad,
        })
        .collect()
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(tensor_lens: &[usize], learning_rate: f64) -> Self {
        AdamState {
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second_moment
    }

    /// Applies one update. Nothing is modified unless every gradient is finite
    /// and every shape matches the state.
    pub fn step(&mut self, slots: &mut [ParamSlot<'_>]) -> Result<()> {
        if slots.len() != self.first_moment.len() {
            return Err(BemError::shape(format!(
                "optimizer tracks {} tensors, got {}",
                self.first_moment.len(),
                slots.len()
            )));
        }
        for (slot, m) in slots.iter().zip(&self.first_moment) {
            if slot.value.len() != m.len() || slot.grad.len() != m.len() {
                return Err(BemError::shape(format!(
                    "tensor `{}`: optimizer expects {} values",
                    slot.name,
                    m.len()
                )));
            }
            if slot.grad.iter().any(|g| !g.is_finite()) {
                return Err(BemError::NonFiniteGradient {
                    tensor: slot.name.clone(),
                });
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for ((slot, m), v) in slots
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for i in 0..m.len() {
                let g = slot.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                slot.value[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
