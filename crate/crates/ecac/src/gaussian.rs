//! Diagonal-Gaussian distribution math: reparameterized sampling,
//! log-density, and closed-form entropy, cross-entropy, and KL divergence.
//!
//! [`DiagGaussian`] is the plain single-distribution form used for acting,
//! telemetry, and Monte-Carlo oracles. The `tape_*` functions build the same
//! quantities on an autodiff tape for batches of distributions, with the
//! second (old) distribution frozen so gradients flow only into the first.

use crate::autodiff::{Array, Tape, Var};
use crate::error::{Error, Result};

pub const HALF_LN_TAU: f64 = 0.918_938_533_204_672_7; // 0.5 * ln(2*pi)

fn check_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

/// Factored Gaussian over a `d`-dimensional action: a mean vector and a
/// log-standard-deviation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Array,
    pub log_std: Array,
}

impl DiagGaussian {
    pub fn new(mean: Array, log_std: Array) -> Result<DiagGaussian> {
        check_dims("DiagGaussian::new", mean.shape(), log_std.shape())?;
        Ok(DiagGaussian { mean, log_std })
    }

    pub fn dim(&self) -> usize {
        self.mean.numel()
    }

    /// `mu + sigma (.) noise`, with `noise` drawn from N(0, I) by the caller.
    pub fn sample_reparameterized(&self, noise: &Array) -> Result<Array> {
        check_dims("sample_reparameterized", self.mean.shape(), noise.shape())?;
        let values = self
            .mean
            .values()
            .iter()
            .zip(self.log_std.values())
            .zip(noise.values())
            .map(|((&m, &ls), &xi)| m + ls.exp() * xi)
            .collect();
        Array::new(self.mean.shape().to_vec(), values)
    }

    /// Differential entropy in nats: `sum_i(log_std_i + (1 + ln 2pi)/2)`.
    pub fn entropy(&self) -> f64 {
        let d = self.dim() as f64;
        self.log_std.values().iter().sum::<f64>() + d * (0.5 + HALF_LN_TAU)
    }

    /// Cross entropy `H(p, q) = -E_p[log q]` in nats.
    pub fn cross_entropy(&self, q: &DiagGaussian) -> Result<f64> {
        check_dims("cross_entropy", self.mean.shape(), q.mean.shape())?;
        let mut total = 0.0;
        for i in 0..self.dim() {
            let var_p = (2.0 * self.log_std.values()[i]).exp();
            let var_q = (2.0 * q.log_std.values()[i]).exp();
            let dmu = self.mean.values()[i] - q.mean.values()[i];
            total += q.log_std.values()[i] + HALF_LN_TAU + (var_p + dmu * dmu) / (2.0 * var_q);
        }
        Ok(total)
    }

    /// `KL(p || q)`, computed as cross entropy minus entropy so the identity
    /// between the three closed forms holds to rounding.
    pub fn kl(&self, q: &DiagGaussian) -> Result<f64> {
        Ok(self.cross_entropy(q)? - self.entropy())
    }

    pub fn log_prob(&self, action: &Array) -> Result<f64> {
        check_dims("log_prob", self.mean.shape(), action.shape())?;
        let mut total = 0.0;
        for i in 0..self.dim() {
            let ls = self.log_std.values()[i];
            let z = (action.values()[i] - self.mean.values()[i]) / ls.exp();
            total += -HALF_LN_TAU - ls - 0.5 * z * z;
        }
        Ok(total)
    }
}

/// A batch of `n` diagonal Gaussians over a `d`-dimensional action space,
/// as emitted by the policy network.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBatch {
    pub mean: Array,
    pub log_std: Array,
}

impl GaussianBatch {
    pub fn new(mean: Array, log_std: Array) -> Result<GaussianBatch> {
        check_dims("GaussianBatch::new", mean.shape(), log_std.shape())?;
        Ok(GaussianBatch { mean, log_std })
    }

    pub fn len(&self) -> usize {
        self.mean.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.mean.cols()
    }

    pub fn row(&self, r: usize) -> DiagGaussian {
        DiagGaussian {
            mean: Array::vector(self.mean.row(r).to_vec()),
            log_std: Array::vector(self.log_std.row(r).to_vec()),
        }
    }

    /// Batch mean of per-distribution entropies.
    pub fn mean_entropy(&self) -> f64 {
        let n = self.len() as f64;
        let d = self.dim() as f64;
        self.log_std.values().iter().sum::<f64>() / n + d * (0.5 + HALF_LN_TAU)
    }

    /// Batch mean of rowwise `H(p_i, q_i)`.
    pub fn mean_cross_entropy(&self, q: &GaussianBatch) -> Result<f64> {
        check_dims("mean_cross_entropy", self.mean.shape(), q.mean.shape())?;
        let n = self.len();
        let mut total = 0.0;
        for ((&mp, &lsp), (&mq, &lsq)) in self
            .mean
            .values()
            .iter()
            .zip(self.log_std.values())
            .zip(q.mean.values().iter().zip(q.log_std.values()))
        {
            let dmu = mp - mq;
            total += lsq + HALF_LN_TAU + ((2.0 * lsp).exp() + dmu * dmu) / (2.0 * (2.0 * lsq).exp());
        }
        Ok(total / n as f64)
    }

    /// Batch mean of rowwise `KL(p_i || q_i)`, as cross entropy minus entropy.
    pub fn mean_kl(&self, q: &GaussianBatch) -> Result<f64> {
        Ok(self.mean_cross_entropy(q)? - self.mean_entropy())
    }

    /// Rowwise `mu + sigma (.) noise` for an `[n, d]` noise array.
    pub fn sample_reparameterized(&self, noise: &Array) -> Result<Array> {
        check_dims("batch_sample", self.mean.shape(), noise.shape())?;
        let values = self
            .mean
            .values()
            .iter()
            .zip(self.log_std.values())
            .zip(noise.values())
            .map(|((&m, &ls), &xi)| m + ls.exp() * xi)
            .collect();
        Array::new(self.mean.shape().to_vec(), values)
    }
}

/// Tape handles for a batch policy head: `[n, d]` mean and log-std nodes.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_std: Var,
}

/// Reparameterized batch sample on the tape: `mean + exp(log_std) (.) noise`.
/// `noise` enters as a constant leaf, so gradients flow to mean and log_std.
pub fn tape_sample(tape: &mut Tape, dist: GaussianVars, noise: &Array) -> Result<Var> {
    let sigma = tape.exp(dist.log_std)?;
    let xi = tape.input(noise.clone());
    let scaled = tape.mul(sigma, xi)?;
    tape.add(dist.mean, scaled)
}

/// Batch-mean entropy as a scalar tape node.
pub fn tape_mean_entropy(tape: &mut Tape, dist: GaussianVars) -> Result<Var> {
    let shape = tape.value(dist.log_std).shape().to_vec();
    let (n, d) = (shape[0] as f64, shape[1] as f64);
    let s = tape.sum(dist.log_std)?;
    let per = tape.scale(s, 1.0 / n)?;
    tape.add_scalar(per, d * (0.5 + HALF_LN_TAU))
}

/// Batch-mean cross entropy against a frozen snapshot `q` as a scalar tape
/// node. `q` enters as constants: gradients flow to `p` only.
pub fn tape_mean_cross_entropy(
    tape: &mut Tape,
    p: GaussianVars,
    q: &GaussianBatch,
) -> Result<Var> {
    let p_shape = tape.value(p.mean).shape().to_vec();
    check_dims("tape_mean_cross_entropy", &p_shape, q.mean.shape())?;
    let (n, d) = (p_shape[0] as f64, p_shape[1] as f64);

    let two_lsp = tape.scale(p.log_std, 2.0)?;
    let var_p = tape.exp(two_lsp)?;
    let q_mean = tape.input(q.mean.clone());
    let dmu = tape.sub(p.mean, q_mean)?;
    let dmu2 = tape.square(dmu)?;
    let inner = tape.add(var_p, dmu2)?;
    // 1 / (2 sigma_q^2), precomputed as a constant
    let inv = Array::new(
        q.log_std.shape().to_vec(),
        q.log_std
            .values()
            .iter()
            .map(|&ls| 0.5 * (-2.0 * ls).exp())
            .collect(),
    )?;
    let inv = tape.input(inv);
    let weighted = tape.mul(inner, inv)?;
    let s = tape.sum(weighted)?;
    let scaled = tape.scale(s, 1.0 / n)?;
    let const_part = q.log_std.values().iter().sum::<f64>() / n + d * HALF_LN_TAU;
    tape.add_scalar(scaled, const_part)
}
