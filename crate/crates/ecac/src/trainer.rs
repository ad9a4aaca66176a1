//! End-to-end training orchestration: environment interaction, the
//! per-step update sequence (critic, snapshot backup, coefficient tuning,
//! actor), evaluation cadence, error probes, checkpointing, and metrics
//! emission.
//!
//! Determinism contract: one root seed fans out into named substreams
//! (`warmup`, `action`, `replay`, `target`, `actor` advance with training
//! and are checkpointed; `env`, `eval`, and `probe` derive a fresh seed per
//! event from the step or episode index). Identical (config, seed) produce
//! bit-identical metrics files up to the wall-clock column. Resuming
//! restores everything except the replay buffer, which refills from
//! scratch; rows that depend on replay contents diverge until the buffer
//! refills, all other columns match the uninterrupted run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::actor::{actor_update_step, CoefficientState};
use crate::autodiff::Array;
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::critic::{critic_update_step, CriticPair};
use crate::diagnostics::{
    estimate_bound_terms, median, monte_carlo_q, normalized_q_error,
};
use crate::envs::{clamp_action, make_env, Env};
use crate::error::{Error, Result};
use crate::metrics::{MetricsRecord, MetricsWriter, RowKind};
use crate::networks::{Adam, PolicyNet};
use crate::replay::{ReplayBuffer, Transition};
use crate::rng;

/// Artifacts of a completed run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub steps_run: u64,
}

/// Return statistics of an evaluation round (raw, unscaled rewards).
#[derive(Debug, Clone)]
pub struct EvalStats {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub std: f64,
}

impl EvalStats {
    fn from_returns(returns: Vec<f64>) -> EvalStats {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let min = returns.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        EvalStats {
            returns,
            mean,
            min,
            max,
            std: var.sqrt(),
        }
    }
}

struct Trainer {
    cfg: TrainConfig,
    env: Box<dyn Env>,
    obs: Array,
    policy: PolicyNet,
    policy_opt: Adam,
    critics: CriticPair,
    coeffs: CoefficientState,
    replay: ReplayBuffer,
    warmup_rng: ChaCha8Rng,
    action_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    target_rng: ChaCha8Rng,
    actor_rng: ChaCha8Rng,
    step: u64,
    episode_index: u64,
    episode_return: f64,
}

impl Trainer {
    fn fresh(cfg: &TrainConfig) -> Result<Trainer> {
        let mut env = make_env(&cfg.env)?;
        let spec = env.spec().clone();
        let seed = cfg.seed;
        let obs = env.reset(rng::indexed_seed(seed, "env", 0));
        let policy = PolicyNet::init(
            spec.obs_dim,
            spec.act_dim,
            &cfg.hidden,
            &mut rng::substream(seed, "net.policy"),
        )?;
        let critics = CriticPair::init(
            spec.obs_dim,
            spec.act_dim,
            &cfg.hidden,
            cfg.lr,
            cfg.tau,
            cfg.bootstrap,
            &mut rng::substream(seed, "net.q1"),
            &mut rng::substream(seed, "net.q2"),
        )?;
        let delta_entropy = cfg.effective_delta_entropy(spec.act_dim);
        let coeffs = CoefficientState::new(
            cfg.alpha_init,
            cfg.beta_init,
            cfg.lr,
            cfg.delta_kl,
            delta_entropy,
        );
        Ok(Trainer {
            policy_opt: Adam::for_mlp(&policy.mlp, cfg.lr),
            obs,
            policy,
            critics,
            coeffs,
            replay: ReplayBuffer::new(cfg.buffer_capacity),
            warmup_rng: rng::substream(seed, "warmup"),
            action_rng: rng::substream(seed, "action"),
            replay_rng: rng::substream(seed, "replay"),
            target_rng: rng::substream(seed, "target"),
            actor_rng: rng::substream(seed, "actor"),
            step: 0,
            episode_index: 0,
            episode_return: 0.0,
            env,
            cfg: cfg.clone(),
        })
    }

    fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.put_string("env.name", &self.cfg.env);
        ck.put_string("config.echo", &self.cfg.echo());
        ck.put_uint("trainer.step", self.step);
        ck.put_uint("trainer.episode_index", self.episode_index);
        ck.put_f64("trainer.episode_return", self.episode_return);
        ck.put_floats("env.state", &[self.env.state().len()], &self.env.state());
        ck.put_uint("env.elapsed", self.env.elapsed() as u64);
        let hidden: Vec<f64> = self.cfg.hidden.iter().map(|&h| h as f64).collect();
        ck.put_floats("net.hidden", &[hidden.len()], &hidden);
        ck.put_uint("net.obs_dim", self.policy.obs_dim() as u64);
        ck.put_uint("net.act_dim", self.policy.act_dim() as u64);

        ck.put_mlp("policy", &self.policy.mlp);
        ck.put_mlp("q1", &self.critics.q1.mlp);
        ck.put_mlp("q2", &self.critics.q2.mlp);
        ck.put_mlp("target1", &self.critics.target1.mlp);
        ck.put_mlp("target2", &self.critics.target2.mlp);
        ck.put_adam("adam.policy", &self.policy.mlp.block_names(), &self.policy_opt);
        ck.put_adam("adam.q1", &self.critics.q1.mlp.block_names(), &self.critics.opt1);
        ck.put_adam("adam.q2", &self.critics.q2.mlp.block_names(), &self.critics.opt2);

        ck.put_f64("coeff.log_alpha", self.coeffs.log_alpha);
        ck.put_f64("coeff.log_beta", self.coeffs.log_beta);
        ck.put_scalar_adam("adam.alpha", &self.coeffs.alpha_opt);
        ck.put_scalar_adam("adam.beta", &self.coeffs.beta_opt);

        ck.put_rng("rng.warmup", &rng::capture(&self.warmup_rng));
        ck.put_rng("rng.action", &rng::capture(&self.action_rng));
        ck.put_rng("rng.replay", &rng::capture(&self.replay_rng));
        ck.put_rng("rng.target", &rng::capture(&self.target_rng));
        ck.put_rng("rng.actor", &rng::capture(&self.actor_rng));
        ck.save(path)
    }

    fn resume(cfg: &TrainConfig, path: &Path) -> Result<Trainer> {
        let ck = Checkpoint::load(path)?;
        let env_name = ck.get_string("env.name")?;
        if env_name != cfg.env {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on {env_name:?} but the config selects {:?}",
                cfg.env
            )));
        }
        let hidden: Vec<usize> = ck
            .get_array("net.hidden")?
            .values()
            .iter()
            .map(|&h| h as usize)
            .collect();
        if hidden != cfg.hidden {
            return Err(Error::Checkpoint(format!(
                "checkpoint hidden sizes {hidden:?} do not match config {:?}",
                cfg.hidden
            )));
        }

        let mut t = Trainer::fresh(cfg)?;
        ck.load_mlp("policy", &mut t.policy.mlp)?;
        ck.load_mlp("q1", &mut t.critics.q1.mlp)?;
        ck.load_mlp("q2", &mut t.critics.q2.mlp)?;
        ck.load_mlp("target1", &mut t.critics.target1.mlp)?;
        ck.load_mlp("target2", &mut t.critics.target2.mlp)?;
        ck.load_adam("adam.policy", &t.policy.mlp.block_names(), &mut t.policy_opt)?;
        ck.load_adam("adam.q1", &t.critics.q1.mlp.block_names(), &mut t.critics.opt1)?;
        ck.load_adam("adam.q2", &t.critics.q2.mlp.block_names(), &mut t.critics.opt2)?;
        t.coeffs.log_alpha = ck.get_f64("coeff.log_alpha")?;
        t.coeffs.log_beta = ck.get_f64("coeff.log_beta")?;
        ck.load_scalar_adam("adam.alpha", &mut t.coeffs.alpha_opt)?;
        ck.load_scalar_adam("adam.beta", &mut t.coeffs.beta_opt)?;
        t.warmup_rng = rng::restore(&ck.get_rng("rng.warmup")?);
        t.action_rng = rng::restore(&ck.get_rng("rng.action")?);
        t.replay_rng = rng::restore(&ck.get_rng("rng.replay")?);
        t.target_rng = rng::restore(&ck.get_rng("rng.target")?);
        t.actor_rng = rng::restore(&ck.get_rng("rng.actor")?);
        t.step = ck.get_uint("trainer.step")?;
        t.episode_index = ck.get_uint("trainer.episode_index")?;
        t.episode_return = ck.get_f64("trainer.episode_return")?;
        let env_state = ck.get_array("env.state")?;
        t.env.set_state(env_state.values());
        t.env.set_elapsed(ck.get_uint("env.elapsed")? as usize);
        t.obs = t.env.observation();
        Ok(t)
    }

    /// Training action: uniform random during warmup, then a reparameterized
    /// policy sample. Either way the executed (clamped) action is returned.
    fn select_action(&mut self) -> Result<Array> {
        let spec = self.env.spec().clone();
        if self.step <= self.cfg.warmup_steps {
            let values: Vec<f64> = (0..spec.act_dim)
                .map(|i| self.warmup_rng.gen_range(spec.action_low[i]..spec.action_high[i]))
                .collect();
            return Ok(Array::vector(values));
        }
        let dist = self.policy.dist(self.obs.values())?;
        let noise = Array::vector(rng::standard_normals(&mut self.action_rng, spec.act_dim));
        let raw = dist.sample_reparameterized(&noise)?;
        Ok(Array::vector(clamp_action(&raw, &spec)?))
    }

    fn write_probe_rows(
        &mut self,
        writer: &mut MetricsWriter,
        start: &Instant,
        batch: &crate::replay::Batch,
        q1_old: &crate::networks::QNet,
        policy_old: &PolicyNet,
    ) -> Result<()> {
        let mut probe_rng = rng::substream_indexed(self.cfg.seed, "probe", self.step);

        // normalized error against Monte-Carlo ground truth on states drawn
        // uniformly from replay; the approximate value is min(Q1, Q2)
        let indices = self.replay.sample_indices(self.cfg.probe_states, &mut probe_rng)?;
        let mut scratch = make_env(&self.cfg.env)?;
        scratch.reset(0);
        let mut eqs = Vec::new();
        let mut excluded = 0u64;
        for i in indices {
            let t = self.replay.get(i).clone();
            let s = Array::matrix(1, t.state.numel(), t.state.values().to_vec())?;
            let a = Array::matrix(1, t.action.numel(), t.action.values().to_vec())?;
            let q_approx = self.critics.min_q(&s, &a)?[0];
            let q_true = monte_carlo_q(
                scratch.as_mut(),
                &self.policy,
                t.state.values(),
                t.action.values(),
                self.cfg.gamma,
                self.cfg.probe_episodes,
                self.cfg.probe_horizon,
                self.cfg.reward_scale,
                &mut probe_rng,
            )?;
            match normalized_q_error(q_approx, q_true) {
                Some(eq) => eqs.push(eq),
                None => excluded += 1,
            }
        }
        let mut eq_row = MetricsRecord::new(self.step, RowKind::Probe, start.elapsed().as_secs_f64());
        eq_row.probe_type = Some("eq".to_string());
        eq_row.eq_median = median(&mut eqs);
        eq_row.eq_excluded = Some(excluded);
        writer.write(&eq_row)?;

        // error-bound terms against the pre-update snapshots
        let report = estimate_bound_terms(
            &self.critics.q1,
            q1_old,
            &self.policy,
            policy_old,
            batch,
            self.cfg.gamma,
            self.cfg.probe_inner_samples,
            &mut probe_rng,
        )?;
        let mut bound_row =
            MetricsRecord::new(self.step, RowKind::Probe, start.elapsed().as_secs_f64());
        bound_row.probe_type = Some("bound".to_string());
        bound_row.bound_source = Some(report.source_error);
        bound_row.bound_target_shift = Some(report.target_shift);
        bound_row.bound_policy_shift = Some(report.policy_shift);
        writer.write(&bound_row)?;
        Ok(())
    }

    fn run(&mut self, out_dir: &Path, writer: &mut MetricsWriter) -> Result<PathBuf> {
        let start = Instant::now();
        while self.step < self.cfg.total_steps {
            self.step += 1;

            // -- act and store ------------------------------------------
            let action = self.select_action()?;
            let sr = self.env.step(&action)?;
            self.episode_return += sr.reward;
            self.replay.push(Transition {
                state: Array::vector(self.obs.values().to_vec()),
                action,
                reward: sr.reward * self.cfg.reward_scale,
                next_state: Array::vector(sr.obs.values().to_vec()),
                terminal: sr.terminal,
            })?;
            self.obs = sr.obs;
            if sr.terminal || sr.truncated {
                let mut row =
                    MetricsRecord::new(self.step, RowKind::Episode, start.elapsed().as_secs_f64());
                row.episode = Some(self.episode_index);
                row.episode_return = Some(self.episode_return);
                writer.write(&row)?;
                self.episode_index += 1;
                self.episode_return = 0.0;
                self.obs = self
                    .env
                    .reset(rng::indexed_seed(self.cfg.seed, "env", self.episode_index));
            }

            // -- update sequence: critic, backup, tune, actor ------------
            if self.step > self.cfg.warmup_steps && self.replay.len() >= self.cfg.batch_size {
                let batch = self
                    .replay
                    .sample_uniform(self.cfg.batch_size, &mut self.replay_rng)?;
                let probing = self.step % self.cfg.probe_every == 0;
                let probe_snapshot = if probing {
                    Some((self.critics.q1.clone(), self.policy.clone()))
                } else {
                    None
                };

                let (loss_q1, loss_q2) = critic_update_step(
                    &mut self.critics,
                    &self.policy,
                    &batch,
                    self.cfg.gamma,
                    &mut self.target_rng,
                )?;

                let snapshot = self.policy.clone();
                let pre = self.policy.forward(&batch.states)?;
                let h = pre.mean_entropy();
                let h_cross = pre.mean_cross_entropy(&pre)?;
                if self.cfg.kl_limitation {
                    self.coeffs.tune_alpha(h_cross);
                }
                self.coeffs.tune_beta(h);
                let alpha = if self.cfg.kl_limitation {
                    self.coeffs.alpha()
                } else {
                    0.0
                };
                let beta = self.coeffs.beta();

                let telemetry = actor_update_step(
                    &mut self.policy,
                    &snapshot,
                    &self.critics,
                    &batch.states,
                    alpha,
                    beta,
                    &mut self.policy_opt,
                    &mut self.actor_rng,
                    self.cfg.objective,
                )?;

                let mut row =
                    MetricsRecord::new(self.step, RowKind::Train, start.elapsed().as_secs_f64());
                row.loss_q1 = Some(loss_q1);
                row.loss_q2 = Some(loss_q2);
                row.actor_objective = Some(telemetry.objective);
                row.kl = Some(telemetry.kl);
                row.entropy = Some(telemetry.entropy);
                row.cross_entropy = Some(telemetry.cross_entropy);
                row.alpha = Some(alpha);
                row.beta = Some(beta);
                writer.write(&row)?;

                if let Some((q1_old, policy_old)) = probe_snapshot {
                    self.write_probe_rows(writer, &start, &batch, &q1_old, &policy_old)?;
                }
            }

            // -- evaluation cadence --------------------------------------
            if self.step % self.cfg.eval_every == 0 {
                let stats = evaluate_policy(
                    &self.policy,
                    &self.cfg.env,
                    self.cfg.eval_episodes,
                    rng::indexed_seed(self.cfg.seed, "eval", self.step),
                )?;
                let mut row =
                    MetricsRecord::new(self.step, RowKind::Eval, start.elapsed().as_secs_f64());
                row.eval_mean = Some(stats.mean);
                row.eval_min = Some(stats.min);
                row.eval_max = Some(stats.max);
                writer.write(&row)?;
            }

            if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                self.save_checkpoint(&out_dir.join(format!("checkpoint_{}.eckp", self.step)))?;
            }
        }

        let final_path = out_dir.join("checkpoint_final.eckp");
        self.save_checkpoint(&final_path)?;
        writer.flush()?;
        Ok(final_path)
    }
}

/// Run the full training loop described by `cfg`, writing `metrics.csv`,
/// periodic checkpoints, the echoed config, and a final checkpoint into
/// `out_dir`.
///
/// On a numeric failure the error propagates after metrics are flushed;
/// periodic checkpoints already on disk are the last-good state.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.txt"), cfg.echo())?;
    let mut trainer = match &cfg.resume {
        Some(path) => Trainer::resume(cfg, Path::new(path))?,
        None => Trainer::fresh(cfg)?,
    };
    let metrics_path = out_dir.join("metrics.csv");
    let mut writer = MetricsWriter::create(&metrics_path)?;
    let result = trainer.run(out_dir, &mut writer);
    writer.flush()?;
    let final_checkpoint = result?;
    Ok(TrainOutcome {
        metrics_path,
        final_checkpoint,
        steps_run: trainer.step,
    })
}

/// Paired ablation runs: identical config and seed, with and without the
/// KL limitation. The off-variant pins `alpha = 0` and disables its tuning
/// while keeping the entropy term. Outputs land side by side in `kl_on/`
/// and `kl_off/`.
pub fn ablate(cfg: &TrainConfig, out_dir: &Path) -> Result<(TrainOutcome, TrainOutcome)> {
    let mut on_cfg = cfg.clone();
    on_cfg.kl_limitation = true;
    let mut off_cfg = cfg.clone();
    off_cfg.kl_limitation = false;
    let on = train(&on_cfg, &out_dir.join("kl_on"))?;
    let off = train(&off_cfg, &out_dir.join("kl_off"))?;
    Ok((on, off))
}

/// Deterministic-mean-action rollouts of a policy on a named environment.
pub fn evaluate_policy(
    policy: &PolicyNet,
    env_name: &str,
    episodes: usize,
    seed: u64,
) -> Result<EvalStats> {
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut env = make_env(env_name)?;
        let mut obs = env.reset(rng::indexed_seed(seed, "eval.episode", ep as u64));
        let mut total = 0.0;
        loop {
            let dist = policy.dist(obs.values())?;
            let action = Array::vector(clamp_action(&dist.mean, env.spec())?);
            let sr = env.step(&action)?;
            total += sr.reward;
            obs = sr.obs;
            if sr.terminal || sr.truncated {
                break;
            }
        }
        returns.push(total);
    }
    Ok(EvalStats::from_returns(returns))
}

/// Rebuild the policy stored in a checkpoint.
pub fn load_policy(ck: &Checkpoint) -> Result<(PolicyNet, String)> {
    let env_name = ck.get_string("env.name")?;
    let obs_dim = ck.get_uint("net.obs_dim")? as usize;
    let act_dim = ck.get_uint("net.act_dim")? as usize;
    let hidden: Vec<usize> = ck
        .get_array("net.hidden")?
        .values()
        .iter()
        .map(|&h| h as usize)
        .collect();
    let mut policy = PolicyNet::init(obs_dim, act_dim, &hidden, &mut rng::substream(0, "load"))?;
    ck.load_mlp("policy", &mut policy.mlp)?;
    Ok((policy, env_name))
}

/// Evaluate a checkpoint: deterministic-mean rollouts, raw-return stats.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    env_override: Option<&str>,
    episodes: usize,
    seed: u64,
) -> Result<EvalStats> {
    let ck = Checkpoint::load(checkpoint)?;
    let (policy, env_name) = load_policy(&ck)?;
    let env_name = env_override.unwrap_or(&env_name);
    evaluate_policy(&policy, env_name, episodes, seed)
}
