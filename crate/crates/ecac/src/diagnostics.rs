//! Measurement apparatus for the critic's approximation error: Monte-Carlo
//! ground-truth Q estimates, the normalized error ratio, consecutive-policy
//! KL tracking, and estimates of the three terms bounding the error of the
//! Q-network from above (the fit residual on the previous targets, the
//! target shift between consecutive policies, and the discounted
//! policy-shift term).
//!
//! Probes are read-only over the agent: they take references or their own
//! scratch environment and never mutate training state.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Array;
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::networks::{PolicyNet, QNet};
use crate::replay::Batch;
use crate::rng::standard_normals;

/// Division guard for the normalized error: probes whose ground-truth value
/// is this close to zero are excluded and counted rather than divided.
pub const EPS_DIV: f64 = 1e-6;

/// Probe sizing. Cadence is in environment steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorProbeConfig {
    pub probe_states: usize,
    pub episodes_per_state: usize,
    pub cadence: usize,
    pub horizon: usize,
    pub inner_samples: usize,
}

impl Default for ErrorProbeConfig {
    fn default() -> ErrorProbeConfig {
        ErrorProbeConfig {
            probe_states: 100,
            episodes_per_state: 20,
            cadence: 10_000,
            horizon: 500,
            inner_samples: 16,
        }
    }
}

/// Monte-Carlo estimates of the three error-bound terms, with standard
/// errors and the sample count behind them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTermsReport {
    pub source_error: f64,
    pub source_error_se: f64,
    pub target_shift: f64,
    pub target_shift_se: f64,
    pub policy_shift: f64,
    pub policy_shift_se: f64,
    pub samples: usize,
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Ground-truth Q estimate: the average over `episodes` rollouts of the
/// discounted return starting from `(state, action)` and then following
/// `policy` samples, with rewards scaled by `reward_scale` to match what
/// the critics are trained on.
///
/// Episode time limits are treated as non-terminal (the rollout continues
/// from the same state), consistent with the trainer storing truncations
/// as bootstrappable; only true termination ends a rollout early. The
/// horizon cap bounds the truncation error by `gamma^horizon / (1 - gamma)`
/// times the reward bound.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_q(
    env: &mut dyn Env,
    policy: &PolicyNet,
    state: &[f64],
    action: &[f64],
    gamma: f64,
    episodes: usize,
    horizon: usize,
    reward_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if !env.supports_state_injection() {
        return Err(Error::Checkpoint(format!(
            "environment {} does not support state injection probes",
            env.name()
        )));
    }
    let act_dim = env.spec().act_dim;
    let mut total = 0.0;
    for _ in 0..episodes {
        env.set_state(state);
        let mut ret = 0.0;
        let mut discount = 1.0;
        let first = env.step(&Array::vector(action.to_vec()))?;
        ret += discount * first.reward * reward_scale;
        let mut terminal = first.terminal;
        let mut t = 1;
        while !terminal && t < horizon && discount.abs() > 0.0 {
            if gamma == 0.0 {
                break;
            }
            discount *= gamma;
            let obs = env.observation();
            let dist = policy.dist(obs.values())?;
            let noise = Array::vector(standard_normals(rng, act_dim));
            let a = dist.sample_reparameterized(&noise)?;
            let sr = env.step(&a)?;
            ret += discount * sr.reward * reward_scale;
            terminal = sr.terminal;
            if sr.truncated && !sr.terminal {
                // time limit is not dynamics; keep rolling from this state
                let elapsed_state = env.state();
                env.set_state(&elapsed_state);
            }
            t += 1;
        }
        total += ret;
    }
    Ok(total / episodes as f64)
}

/// `|q_approx - q_true| / |q_true|`; `None` marks an excluded sample whose
/// ground truth is too close to zero to divide by.
pub fn normalized_q_error(q_approx: f64, q_true: f64) -> Option<f64> {
    if q_true.abs() <= EPS_DIV {
        return None;
    }
    Some((q_approx - q_true).abs() / q_true.abs())
}

/// Batch-mean closed-form KL between the two parameter sets on probe states.
pub fn consecutive_policy_kl(
    policy_new: &PolicyNet,
    policy_old: &PolicyNet,
    states: &Array,
) -> Result<f64> {
    let new_batch = policy_new.forward(states)?;
    let old_batch = policy_old.forward(states)?;
    new_batch.mean_kl(&old_batch)
}

/// Monte-Carlo estimates of the three bound terms on a replay sample.
///
/// Per transition: the source term compares the current critic against the
/// previous iteration's target `r + gamma Q_old(s', a' ~ pi_old)`; the
/// target-shift term compares that with the current target
/// `r + gamma Q_new(s', a' ~ pi_new)` (fresh samples per policy); the
/// policy-shift term is `gamma |E_new Q_new - E_old Q_new|` with the inner
/// expectations averaged over `inner_samples` common-random-number draws,
/// which makes the estimate exactly zero for identical policies. True
/// terminals mask the bootstrap everywhere, matching the TD targets.
#[allow(clippy::too_many_arguments)]
pub fn estimate_bound_terms(
    q_new: &QNet,
    q_old: &QNet,
    policy_new: &PolicyNet,
    policy_old: &PolicyNet,
    batch: &Batch,
    gamma: f64,
    inner_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BoundTermsReport> {
    let n = batch.len();
    let dists_new = policy_new.forward(&batch.next_states)?;
    let dists_old = policy_old.forward(&batch.next_states)?;
    let d = dists_new.dim();

    let noise_old = Array::new(vec![n, d], standard_normals(rng, n * d))?;
    let a_old = dists_old.sample_reparameterized(&noise_old)?;
    let q_y_old = q_old.forward(&batch.next_states, &a_old)?;

    let noise_new = Array::new(vec![n, d], standard_normals(rng, n * d))?;
    let a_new = dists_new.sample_reparameterized(&noise_new)?;
    let q_y_new = q_new.forward(&batch.next_states, &a_new)?;

    let q_sa = q_new.forward(&batch.states, &batch.actions)?;

    let mask: Vec<f64> = batch
        .terminals
        .iter()
        .map(|&t| if t { 0.0 } else { 1.0 })
        .collect();

    let mut source = Vec::with_capacity(n);
    let mut shift = Vec::with_capacity(n);
    for i in 0..n {
        let y_old = batch.rewards[i] + gamma * mask[i] * q_y_old[i];
        let y_new = batch.rewards[i] + gamma * mask[i] * q_y_new[i];
        source.push((q_sa[i] - y_old).abs());
        shift.push((y_new - y_old).abs());
    }

    // inner expectations under both policies with common random numbers
    let mut acc_new = vec![0.0; n];
    let mut acc_old = vec![0.0; n];
    for _ in 0..inner_samples {
        let xi = Array::new(vec![n, d], standard_normals(rng, n * d))?;
        let an = dists_new.sample_reparameterized(&xi)?;
        let ao = dists_old.sample_reparameterized(&xi)?;
        let qn = q_new.forward(&batch.next_states, &an)?;
        let qo = q_new.forward(&batch.next_states, &ao)?;
        for i in 0..n {
            acc_new[i] += qn[i];
            acc_old[i] += qo[i];
        }
    }
    let m = inner_samples as f64;
    let policy_shift: Vec<f64> = (0..n)
        .map(|i| gamma * mask[i] * ((acc_new[i] - acc_old[i]) / m).abs())
        .collect();

    let (source_error, source_error_se) = mean_and_se(&source);
    let (target_shift, target_shift_se) = mean_and_se(&shift);
    let (policy_shift, policy_shift_se) = mean_and_se(&policy_shift);
    Ok(BoundTermsReport {
        source_error,
        source_error_se,
        target_shift,
        target_shift_se,
        policy_shift,
        policy_shift_se,
        samples: n,
    })
}

/// Median of the included values; `None` when all were excluded.
pub fn median(values: &mut Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    })
}
