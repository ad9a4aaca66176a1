//! Clipped double-Q temporal-difference learning: target construction from
//! the smaller of two bootstrap estimates and the paired MSE losses.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Array, Tape};
use crate::error::Result;
use crate::networks::{polyak_update, Adam, PolicyNet, QNet};
use crate::replay::Batch;
use crate::rng::standard_normals;

/// Which networks supply the bootstrap value in the TD target. Slowly
/// tracking target copies are the default; the online variant exists for
/// ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BootstrapNets {
    Target,
    Online,
}

/// Twin online critics with their target copies and optimizers. Targets
/// start as exact copies of the online networks.
#[derive(Debug, Clone)]
pub struct CriticPair {
    pub q1: QNet,
    pub q2: QNet,
    pub target1: QNet,
    pub target2: QNet,
    pub opt1: Adam,
    pub opt2: Adam,
    pub tau: f64,
    pub bootstrap: BootstrapNets,
}

impl CriticPair {
    pub fn init(
        obs_dim: usize,
        act_dim: usize,
        hidden: &[usize],
        lr: f64,
        tau: f64,
        bootstrap: BootstrapNets,
        rng1: &mut ChaCha8Rng,
        rng2: &mut ChaCha8Rng,
    ) -> Result<CriticPair> {
        let q1 = QNet::init(obs_dim, act_dim, hidden, rng1)?;
        let q2 = QNet::init(obs_dim, act_dim, hidden, rng2)?;
        Ok(CriticPair {
            target1: q1.clone(),
            target2: q2.clone(),
            opt1: Adam::for_mlp(&q1.mlp, lr),
            opt2: Adam::for_mlp(&q2.mlp, lr),
            q1,
            q2,
            tau,
            bootstrap,
        })
    }

    /// `min(Q1, Q2)` of the online critics, per row.
    pub fn min_q(&self, states: &Array, actions: &Array) -> Result<Vec<f64>> {
        let a = self.q1.forward(states, actions)?;
        let b = self.q2.forward(states, actions)?;
        Ok(a.into_iter().zip(b).map(|(x, y)| x.min(y)).collect())
    }

    fn bootstrap_nets(&self) -> (&QNet, &QNet) {
        match self.bootstrap {
            BootstrapNets::Target => (&self.target1, &self.target2),
            BootstrapNets::Online => (&self.q1, &self.q2),
        }
    }
}

/// TD targets `y = r + gamma (1 - terminal) min_i Q_i(s', a')` with one
/// fresh reparameterized action sample per transition. No gradient flows
/// through the result; it re-enters update tapes as a constant.
pub fn td_target(
    pair: &CriticPair,
    policy: &PolicyNet,
    batch: &Batch,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let n = batch.len();
    let dists = policy.forward(&batch.next_states)?;
    let noise = Array::new(vec![n, dists.dim()], standard_normals(rng, n * dists.dim()))?;
    let next_actions = dists.sample_reparameterized(&noise)?;
    let (b1, b2) = pair.bootstrap_nets();
    let q1 = b1.forward(&batch.next_states, &next_actions)?;
    let q2 = b2.forward(&batch.next_states, &next_actions)?;
    Ok((0..n)
        .map(|i| {
            let mask = if batch.terminals[i] { 0.0 } else { 1.0 };
            batch.rewards[i] + gamma * mask * q1[i].min(q2[i])
        })
        .collect())
}

/// Mean squared errors of both online critics against shared targets.
pub fn critic_losses(pair: &CriticPair, batch: &Batch, targets: &[f64]) -> Result<(f64, f64)> {
    let q1 = pair.q1.forward(&batch.states, &batch.actions)?;
    let q2 = pair.q2.forward(&batch.states, &batch.actions)?;
    let n = targets.len() as f64;
    let mse = |qs: &[f64]| {
        qs.iter()
            .zip(targets)
            .map(|(q, y)| (q - y) * (q - y))
            .sum::<f64>()
            / n
    };
    Ok((mse(&q1), mse(&q2)))
}

/// One descent step on each online critic from its own loss, then a Polyak
/// update of both targets. Returns the pre-step losses.
pub fn critic_update_step(
    pair: &mut CriticPair,
    policy: &PolicyNet,
    batch: &Batch,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let targets = td_target(pair, policy, batch, gamma, rng)?;
    let n = batch.len();
    let y = Array::new(vec![n, 1], targets.clone())?;

    let mut tape = Tape::new();
    let states = tape.input(batch.states.clone());
    let actions = tape.input(batch.actions.clone());
    let y_const = tape.input(y);

    let vars1 = pair.q1.mlp.register(&mut tape);
    let pred1 = pair.q1.forward_on(&mut tape, &vars1, states, actions)?;
    let resid1 = tape.sub(pred1, y_const)?;
    let sq1 = tape.square(resid1)?;
    let loss1 = tape.mean(sq1)?;

    let vars2 = pair.q2.mlp.register(&mut tape);
    let pred2 = pair.q2.forward_on(&mut tape, &vars2, states, actions)?;
    let resid2 = tape.sub(pred2, y_const)?;
    let sq2 = tape.square(resid2)?;
    let loss2 = tape.mean(sq2)?;

    let g1 = tape.backpropagate(loss1)?;
    let g2 = tape.backpropagate(loss2)?;
    let grads1 = pair.q1.mlp.collect_grads(&vars1, &g1);
    let grads2 = pair.q2.mlp.collect_grads(&vars2, &g2);
    pair.opt1.step_mlp(&mut pair.q1.mlp, &grads1)?;
    pair.opt2.step_mlp(&mut pair.q2.mlp, &grads2)?;

    polyak_update(&mut pair.target1.mlp, &pair.q1.mlp, pair.tau)?;
    polyak_update(&mut pair.target2.mlp, &pair.q2.mlp, pair.tau)?;

    Ok((tape.value(loss1).item(), tape.value(loss2).item()))
}
