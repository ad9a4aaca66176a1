//! Function approximators and their training machinery: MLPs with uniform
//! fan-based init, the policy and Q-network heads, Polyak target updates,
//! and an adaptive-moment (Adam) optimizer with bias correction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Array, Tape, Var};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianBatch, GaussianVars};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Fully connected network: per-layer weight matrices `[in, out]` and bias
/// vectors, relu between layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    pub weights: Vec<Array>,
    pub biases: Vec<Array>,
}

/// Tape handles for one registration of an [`Mlp`]'s parameters.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl Mlp {
    /// Initialize with weights uniform in `+-sqrt(6 / (fan_in + fan_out))`
    /// and zero biases. Deterministic for a given generator state.
    pub fn init(sizes: &[usize], rng: &mut ChaCha8Rng) -> Result<Mlp> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(vec![format!(
                "mlp layer sizes must be >= 2 non-zero entries, got {sizes:?}"
            )]));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let values = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            weights.push(Array::new(vec![fan_in, fan_out], values)?);
            biases.push(Array::zeros(vec![fan_out]));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|a| a.numel()).sum()
    }

    /// Parameter blocks in a fixed order: `w0, b0, w1, b1, ...`
    pub fn blocks(&self) -> Vec<&Array> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Array> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// Block names aligned with [`Mlp::blocks`], e.g. `layer0.weight`.
    pub fn block_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for i in 0..self.weights.len() {
            out.push(format!("layer{i}.weight"));
            out.push(format!("layer{i}.bias"));
        }
        out
    }

    /// Plain batch forward: `[n, in] -> [n, out]`.
    pub fn forward(&self, x: &Array) -> Result<Array> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "mlp_forward",
                lhs: x.shape().to_vec(),
                rhs: vec![x.shape()[0], self.input_dim()],
            });
        }
        let last = self.weights.len() - 1;
        let mut h = x.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (n, k, m) = (h.rows(), w.rows(), w.cols());
            let mut out = vec![0.0; n * m];
            unsafe {
                matrixmultiply::dgemm(
                    n,
                    k,
                    m,
                    1.0,
                    h.values().as_ptr(),
                    k as isize,
                    1,
                    w.values().as_ptr(),
                    m as isize,
                    1,
                    0.0,
                    out.as_mut_ptr(),
                    m as isize,
                    1,
                );
            }
            for r in 0..n {
                for c in 0..m {
                    let v = out[r * m + c] + b.values()[c];
                    out[r * m + c] = if i < last { v.max(0.0) } else { v };
                }
            }
            h = Array::new(vec![n, m], out)?;
        }
        Ok(h)
    }

    /// Register parameters on a tape.
    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            weights: self.weights.iter().map(|w| tape.param(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.param(b.clone())).collect(),
        }
    }

    /// Register parameters as constants (no gradients tracked).
    pub fn register_frozen(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            weights: self.weights.iter().map(|w| tape.input(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.input(b.clone())).collect(),
        }
    }

    /// Tape forward through registered parameters.
    pub fn forward_on(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        let last = vars.weights.len() - 1;
        let mut h = x;
        for i in 0..vars.weights.len() {
            let z = tape.matmul(h, vars.weights[i])?;
            let z = tape.add(z, vars.biases[i])?;
            h = if i < last { tape.relu(z)? } else { z };
        }
        Ok(h)
    }

    /// Collect this network's gradients from a backward pass, in block order.
    pub fn collect_grads(&self, vars: &MlpVars, grads: &crate::autodiff::Gradients) -> Vec<Array> {
        let mut out = Vec::with_capacity(2 * vars.weights.len());
        for (w, b) in vars.weights.iter().zip(&vars.biases) {
            out.push(grads.grad(*w));
            out.push(grads.grad(*b));
        }
        out
    }
}

/// In-place Polyak update: `target <- tau * online + (1 - tau) * target`.
pub fn polyak_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<()> {
    if target.sizes != online.sizes {
        return Err(Error::ShapeMismatch {
            op: "polyak_update",
            lhs: target.sizes.clone(),
            rhs: online.sizes.clone(),
        });
    }
    let online_blocks = online.blocks();
    for (t, o) in target.blocks_mut().into_iter().zip(online_blocks) {
        for (tv, ov) in t.values_mut().iter_mut().zip(o.values()) {
            *tv = tau * ov + (1.0 - tau) * *tv;
        }
    }
    Ok(())
}

/// Adam over a fixed list of parameter blocks. Decay rates 0.9/0.999,
/// epsilon 1e-8, bias-corrected.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

impl Adam {
    pub fn new(blocks: &[&Array], lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: blocks.iter().map(|a| Array::zeros(a.shape().to_vec())).collect(),
            v: blocks.iter().map(|a| Array::zeros(a.shape().to_vec())).collect(),
        }
    }

    pub fn for_mlp(mlp: &Mlp, lr: f64) -> Adam {
        Adam::new(&mlp.blocks(), lr)
    }

    /// One update step across all blocks. `names` labels blocks in errors.
    pub fn step(
        &mut self,
        mut params: Vec<&mut Array>,
        grads: &[Array],
        names: &[String],
    ) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        for (i, g) in grads.iter().enumerate() {
            if !g.values().iter().all(|v| v.is_finite()) {
                return Err(Error::non_finite(format!(
                    "gradient for parameter block {}",
                    names.get(i).map(String::as_str).unwrap_or("?")
                )));
            }
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (bi, grad) in grads.iter().enumerate() {
            let p = params[bi].values_mut();
            let m = self.m[bi].values_mut();
            let v = self.v[bi].values_mut();
            for i in 0..p.len() {
                let g = grad.values()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_mlp(&mut self, mlp: &mut Mlp, grads: &[Array]) -> Result<()> {
        let names = mlp.block_names();
        self.step(mlp.blocks_mut(), grads, &names)
    }
}

/// Adam for a single scalar parameter (the tuned coefficients).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub m: f64,
    pub v: f64,
}

impl ScalarAdam {
    pub fn new(lr: f64) -> ScalarAdam {
        ScalarAdam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: 0.0,
            v: 0.0,
        }
    }

    pub fn step(&mut self, param: &mut f64, grad: f64) {
        self.step_count += 1;
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad;
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad;
        let m_hat = self.m / (1.0 - self.beta1.powi(self.step_count as i32));
        let v_hat = self.v / (1.0 - self.beta2.powi(self.step_count as i32));
        *param -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
    }
}

/// Policy head: an MLP whose final layer emits `2d` values, split into an
/// unconstrained mean and a log-std clamped to `[-20, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub mlp: Mlp,
    act_dim: usize,
}

impl PolicyNet {
    pub fn init(obs_dim: usize, act_dim: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Result<PolicyNet> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * act_dim);
        Ok(PolicyNet {
            mlp: Mlp::init(&sizes, rng)?,
            act_dim,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    /// Batch forward to distribution parameters.
    pub fn forward(&self, states: &Array) -> Result<GaussianBatch> {
        let out = self.mlp.forward(states)?;
        let (n, d) = (out.rows(), self.act_dim);
        let mut mean = Vec::with_capacity(n * d);
        let mut log_std = Vec::with_capacity(n * d);
        for r in 0..n {
            let row = out.row(r);
            mean.extend_from_slice(&row[..d]);
            log_std.extend(row[d..].iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)));
        }
        GaussianBatch::new(Array::new(vec![n, d], mean)?, Array::new(vec![n, d], log_std)?)
    }

    /// Single-state distribution.
    pub fn dist(&self, state: &[f64]) -> Result<crate::gaussian::DiagGaussian> {
        let batch = self.forward(&Array::matrix(1, state.len(), state.to_vec())?)?;
        Ok(batch.row(0))
    }

    /// Tape forward through registered parameters.
    pub fn forward_on(&self, tape: &mut Tape, vars: &MlpVars, states: Var) -> Result<GaussianVars> {
        let out = self.mlp.forward_on(tape, vars, states)?;
        let d = self.act_dim;
        let mean = tape.slice_cols(out, 0, d)?;
        let raw = tape.slice_cols(out, d, 2 * d)?;
        let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX)?;
        Ok(GaussianVars { mean, log_std })
    }
}

/// Q head: an MLP over the concatenation `[state, action]` (state first)
/// emitting one scalar per row.
#[derive(Debug, Clone, PartialEq)]
pub struct QNet {
    pub mlp: Mlp,
    obs_dim: usize,
    act_dim: usize,
}

impl QNet {
    pub fn init(obs_dim: usize, act_dim: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Result<QNet> {
        let mut sizes = vec![obs_dim + act_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(QNet {
            mlp: Mlp::init(&sizes, rng)?,
            obs_dim,
            act_dim,
        })
    }

    /// Batch of Q estimates as a flat vector.
    pub fn forward(&self, states: &Array, actions: &Array) -> Result<Vec<f64>> {
        let x = concat_cols(states, actions)?;
        Ok(self.mlp.forward(&x)?.values().to_vec())
    }

    pub fn forward_one(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let s = Array::matrix(1, state.len(), state.to_vec())?;
        let a = Array::matrix(1, action.len(), action.to_vec())?;
        Ok(self.forward(&s, &a)?[0])
    }

    /// Tape forward; `actions` may be a differentiable node (actor path).
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        states: Var,
        actions: Var,
    ) -> Result<Var> {
        let x = tape.concat_cols(states, actions)?;
        self.mlp.forward_on(tape, vars, x)
    }
}

/// Row-wise `[n, p] ++ [n, q]` concatenation of plain arrays, state first.
pub fn concat_cols(a: &Array, b: &Array) -> Result<Array> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.rows() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "concat_cols",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (n, p, q) = (a.rows(), a.cols(), b.cols());
    let mut out = Vec::with_capacity(n * (p + q));
    for r in 0..n {
        out.extend_from_slice(a.row(r));
        out.extend_from_slice(b.row(r));
    }
    Array::new(vec![n, p + q], out)
}
