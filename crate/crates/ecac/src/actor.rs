//! Policy improvement: the regularized objective over reparameterized
//! actions and the automatic tuning of the cross-entropy and entropy
//! coefficients.
//!
//! The default objective ascends the smaller of the two online Q estimates
//! minus `alpha` times the cross entropy against the previous policy plus
//! `beta` times the entropy. The `Q1Kl` variant ascends the first critic
//! with an entropy bonus and a direct KL penalty instead.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Array, Tape, Var};
use crate::critic::CriticPair;
use crate::error::Result;
use crate::gaussian::{tape_mean_cross_entropy, tape_mean_entropy, tape_sample, GaussianBatch};
use crate::networks::{Adam, PolicyNet, ScalarAdam};
use crate::rng::standard_normals;

/// Objective variants. `MinQCrossEntropy` is the default; `Q1Kl` swaps in
/// the first critic alone, an entropy bonus scaled by `alpha`, and a KL
/// penalty scaled by `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    MinQCrossEntropy,
    Q1Kl,
}

/// Tuned regularization coefficients, kept in log space so both stay
/// strictly positive, with their setpoints and optimizer states.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientState {
    pub log_alpha: f64,
    pub log_beta: f64,
    pub alpha_opt: ScalarAdam,
    pub beta_opt: ScalarAdam,
    pub delta_kl: f64,
    pub delta_entropy: f64,
}

impl CoefficientState {
    pub fn new(
        alpha_init: f64,
        beta_init: f64,
        lr: f64,
        delta_kl: f64,
        delta_entropy: f64,
    ) -> CoefficientState {
        assert!(alpha_init > 0.0 && beta_init > 0.0);
        CoefficientState {
            log_alpha: alpha_init.ln(),
            log_beta: beta_init.ln(),
            alpha_opt: ScalarAdam::new(lr),
            beta_opt: ScalarAdam::new(lr),
            delta_kl,
            delta_entropy,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn beta(&self) -> f64 {
        self.log_beta.exp()
    }

    /// One descent step on `log_alpha * ((delta_kl + delta_entropy) - H_cross)`
    /// in `log_alpha`: alpha rises when the measured cross entropy exceeds
    /// the target sum.
    pub fn tune_alpha(&mut self, h_cross: f64) {
        let grad = (self.delta_kl + self.delta_entropy) - h_cross;
        self.alpha_opt.step(&mut self.log_alpha, grad);
    }

    /// One descent step on `log_beta * (H - delta_entropy)` in `log_beta`:
    /// beta rises when entropy falls below its target.
    pub fn tune_beta(&mut self, h: f64) {
        let grad = h - self.delta_entropy;
        self.beta_opt.step(&mut self.log_beta, grad);
    }
}

/// Telemetry from one actor step. The divergence fields compare the
/// post-step policy with the pre-step snapshot via the closed forms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorTelemetry {
    pub objective: f64,
    pub kl: f64,
    pub entropy: f64,
    pub cross_entropy: f64,
}

/// Build the scalar objective (to maximize) on a tape.
///
/// Gradients flow only into the policy parameters: critic weights are
/// registered frozen and the snapshot enters through constant arrays.
pub fn actor_objective(
    tape: &mut Tape,
    policy: &PolicyNet,
    policy_vars: &crate::networks::MlpVars,
    critics: &CriticPair,
    snapshot: &GaussianBatch,
    states: &Array,
    alpha: f64,
    beta: f64,
    noise: &Array,
    kind: ObjectiveKind,
) -> Result<Var> {
    let states_const = tape.input(states.clone());
    let dist = policy.forward_on(tape, policy_vars, states_const)?;
    let actions = tape_sample(tape, dist, noise)?;

    let q1_vars = critics.q1.mlp.register_frozen(tape);
    let q1 = critics.q1.forward_on(tape, &q1_vars, states_const, actions)?;

    let q_term = match kind {
        ObjectiveKind::MinQCrossEntropy => {
            let q2_vars = critics.q2.mlp.register_frozen(tape);
            let q2 = critics.q2.forward_on(tape, &q2_vars, states_const, actions)?;
            let min_q = tape.min(q1, q2)?;
            tape.mean(min_q)?
        }
        ObjectiveKind::Q1Kl => tape.mean(q1)?,
    };

    let h = tape_mean_entropy(tape, dist)?;
    let h_cross = tape_mean_cross_entropy(tape, dist, snapshot)?;
    match kind {
        ObjectiveKind::MinQCrossEntropy => {
            // q - alpha * H(pi, pi_old) + beta * H(pi)
            let penalty = tape.scale(h_cross, alpha)?;
            let partial = tape.sub(q_term, penalty)?;
            let bonus = tape.scale(h, beta)?;
            tape.add(partial, bonus)
        }
        ObjectiveKind::Q1Kl => {
            // q1 + alpha * H(pi) - beta * KL(pi, pi_old)
            let kl = tape.sub(h_cross, h)?;
            let penalty = tape.scale(kl, beta)?;
            let partial = tape.sub(q_term, penalty)?;
            let bonus = tape.scale(h, alpha)?;
            tape.add(partial, bonus)
        }
    }
}

/// One ascent step on the objective. Returns the pre-step objective value
/// and post-step divergence telemetry against the snapshot.
#[allow(clippy::too_many_arguments)]
pub fn actor_update_step(
    policy: &mut PolicyNet,
    snapshot: &PolicyNet,
    critics: &CriticPair,
    states: &Array,
    alpha: f64,
    beta: f64,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
    kind: ObjectiveKind,
) -> Result<ActorTelemetry> {
    let n = states.rows();
    let d = policy.act_dim();
    let snapshot_batch = snapshot.forward(states)?;
    let noise = Array::new(vec![n, d], standard_normals(rng, n * d))?;

    let mut tape = Tape::new();
    let vars = policy.mlp.register(&mut tape);
    let objective = actor_objective(
        &mut tape,
        policy,
        &vars,
        critics,
        &snapshot_batch,
        states,
        alpha,
        beta,
        &noise,
        kind,
    )?;
    let objective_value = tape.value(objective).item();
    let loss = tape.scale(objective, -1.0)?;
    let grads = tape.backpropagate(loss)?;
    let grad_blocks = policy.mlp.collect_grads(&vars, &grads);
    opt.step_mlp(&mut policy.mlp, &grad_blocks)?;

    let after = policy.forward(states)?;
    let entropy = after.mean_entropy();
    let cross_entropy = after.mean_cross_entropy(&snapshot_batch)?;
    Ok(ActorTelemetry {
        objective: objective_value,
        kl: cross_entropy - entropy,
        entropy,
        cross_entropy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::BootstrapNets;
    use crate::networks::QNet;
    use crate::rng::substream;

    fn make_critics(obs: usize, act: usize, seed: u64) -> CriticPair {
        CriticPair::init(
            obs,
            act,
            &[8],
            1e-3,
            5e-3,
            BootstrapNets::Target,
            &mut substream(seed, "q1"),
            &mut substream(seed, "q2-init"),
        )
        .unwrap()
    }

    fn eval_objective(
        policy: &PolicyNet,
        critics: &CriticPair,
        snapshot: &GaussianBatch,
        states: &Array,
        alpha: f64,
        beta: f64,
        noise: &Array,
        kind: ObjectiveKind,
    ) -> f64 {
        let mut tape = Tape::new();
        let vars = policy.mlp.register(&mut tape);
        let obj = actor_objective(
            &mut tape, policy, &vars, critics, snapshot, states, alpha, beta, noise, kind,
        )
        .unwrap();
        tape.value(obj).item()
    }

    #[test]
    fn objective_reduces_to_clipped_q_without_coefficients() {
        let mut rng = substream(70, "states");
        let policy = PolicyNet::init(3, 2, &[8], &mut substream(71, "p")).unwrap();
        let critics = make_critics(3, 2, 72);
        let states = Array::new(vec![5, 3], standard_normals(&mut rng, 15)).unwrap();
        let noise = Array::new(vec![5, 2], standard_normals(&mut rng, 10)).unwrap();
        let snapshot = policy.forward(&states).unwrap();

        let obj = eval_objective(
            &policy,
            &critics,
            &snapshot,
            &states,
            0.0,
            0.0,
            &noise,
            ObjectiveKind::MinQCrossEntropy,
        );
        let dists = policy.forward(&states).unwrap();
        let actions = dists.sample_reparameterized(&noise).unwrap();
        let min_q = critics.min_q(&states, &actions).unwrap();
        let expected = min_q.iter().sum::<f64>() / min_q.len() as f64;
        assert!((obj - expected).abs() < 1e-12, "obj={obj} expected={expected}");
    }

    #[test]
    fn regularization_cancels_at_snapshot_with_equal_coefficients() {
        let mut rng = substream(73, "states");
        let policy = PolicyNet::init(2, 1, &[6], &mut substream(74, "p")).unwrap();
        let critics = make_critics(2, 1, 75);
        let states = Array::new(vec![4, 2], standard_normals(&mut rng, 8)).unwrap();
        let noise = Array::new(vec![4, 1], standard_normals(&mut rng, 4)).unwrap();
        let snapshot = policy.forward(&states).unwrap();

        let alpha = 0.7;
        let with_reg = eval_objective(
            &policy,
            &critics,
            &snapshot,
            &states,
            alpha,
            alpha,
            &noise,
            ObjectiveKind::MinQCrossEntropy,
        );
        let without = eval_objective(
            &policy,
            &critics,
            &snapshot,
            &states,
            0.0,
            0.0,
            &noise,
            ObjectiveKind::MinQCrossEntropy,
        );
        // at theta == theta_old the cross entropy equals the entropy, so
        // the two terms cancel to alpha * KL(pi, pi) = 0
        assert!((with_reg - without).abs() < 1e-12);
    }

    #[test]
    fn objective_combines_terms_linearly() {
        let mut rng = substream(76, "states");
        let policy = PolicyNet::init(2, 2, &[6], &mut substream(77, "p")).unwrap();
        let other = PolicyNet::init(2, 2, &[6], &mut substream(78, "p2")).unwrap();
        let critics = make_critics(2, 2, 79);
        let states = Array::new(vec![3, 2], standard_normals(&mut rng, 6)).unwrap();
        let noise = Array::new(vec![3, 2], standard_normals(&mut rng, 6)).unwrap();
        let snapshot = other.forward(&states).unwrap();

        let (alpha, beta) = (0.5, 0.1);
        let obj = eval_objective(
            &policy,
            &critics,
            &snapshot,
            &states,
            alpha,
            beta,
            &noise,
            ObjectiveKind::MinQCrossEntropy,
        );

        let dists = policy.forward(&states).unwrap();
        let actions = dists.sample_reparameterized(&noise).unwrap();
        let min_q = critics.min_q(&states, &actions).unwrap();
        let q_mean = min_q.iter().sum::<f64>() / min_q.len() as f64;
        let h_cross = dists.mean_cross_entropy(&snapshot).unwrap();
        let h = dists.mean_entropy();
        let expected = q_mean - alpha * h_cross + beta * h;
        assert!((obj - expected).abs() < 1e-12, "obj={obj} expected={expected}");
    }

    #[test]
    fn q1_kl_variant_combines_terms_verbatim() {
        let mut rng = substream(80, "states");
        let policy = PolicyNet::init(2, 1, &[6], &mut substream(81, "p")).unwrap();
        let other = PolicyNet::init(2, 1, &[6], &mut substream(82, "p2")).unwrap();
        let critics = make_critics(2, 1, 83);
        let states = Array::new(vec![3, 2], standard_normals(&mut rng, 6)).unwrap();
        let noise = Array::new(vec![3, 1], standard_normals(&mut rng, 3)).unwrap();
        let snapshot = other.forward(&states).unwrap();

        let (alpha, beta) = (0.3, 0.9);
        let obj = eval_objective(
            &policy,
            &critics,
            &snapshot,
            &states,
            alpha,
            beta,
            &noise,
            ObjectiveKind::Q1Kl,
        );
        let dists = policy.forward(&states).unwrap();
        let actions = dists.sample_reparameterized(&noise).unwrap();
        let q1 = critics.q1.forward(&states, &actions).unwrap();
        let q_mean = q1.iter().sum::<f64>() / q1.len() as f64;
        let h = dists.mean_entropy();
        let kl = dists.mean_kl(&snapshot).unwrap();
        let expected = q_mean + alpha * h - beta * kl;
        assert!((obj - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_emits_telemetry_without_moving() {
        let mut rng = substream(84, "states");
        let mut policy = PolicyNet::init(2, 1, &[6], &mut substream(85, "p")).unwrap();
        let critics = make_critics(2, 1, 86);
        let states = Array::new(vec![4, 2], standard_normals(&mut rng, 8)).unwrap();
        let snapshot = policy.clone();
        let before = policy.clone();
        let mut opt = Adam::for_mlp(&policy.mlp, 0.0);
        let telemetry = actor_update_step(
            &mut policy,
            &snapshot,
            &critics,
            &states,
            0.5,
            0.5,
            &mut opt,
            &mut substream(87, "noise"),
            ObjectiveKind::MinQCrossEntropy,
        )
        .unwrap();
        assert_eq!(policy, before);
        assert!(telemetry.objective.is_finite());
        assert!(telemetry.kl.abs() < 1e-12); // policy did not move
    }

    #[test]
    fn telemetry_kl_identity_holds() {
        let mut rng = substream(88, "states");
        let mut policy = PolicyNet::init(2, 1, &[6], &mut substream(89, "p")).unwrap();
        let critics = make_critics(2, 1, 90);
        let states = Array::new(vec![8, 2], standard_normals(&mut rng, 16)).unwrap();
        let snapshot = policy.clone();
        let mut opt = Adam::for_mlp(&policy.mlp, 1e-3);
        let t = actor_update_step(
            &mut policy,
            &snapshot,
            &critics,
            &states,
            0.5,
            0.2,
            &mut opt,
            &mut substream(91, "noise"),
            ObjectiveKind::MinQCrossEntropy,
        )
        .unwrap();
        assert!((t.kl - (t.cross_entropy - t.entropy)).abs() <= 1e-12);
        assert!(t.kl >= -1e-12);
    }

    #[test]
    fn actor_step_touches_only_policy_parameters() {
        let mut rng = substream(92, "states");
        let mut policy = PolicyNet::init(2, 1, &[6], &mut substream(93, "p")).unwrap();
        let critics = make_critics(2, 1, 94);
        let states = Array::new(vec![4, 2], standard_normals(&mut rng, 8)).unwrap();
        let snapshot = policy.clone();
        let critics_before = critics.clone();
        let snapshot_before = snapshot.clone();
        let mut opt = Adam::for_mlp(&policy.mlp, 1e-2);
        actor_update_step(
            &mut policy,
            &snapshot,
            &critics,
            &states,
            0.5,
            0.2,
            &mut opt,
            &mut substream(95, "noise"),
            ObjectiveKind::MinQCrossEntropy,
        )
        .unwrap();
        assert_ne!(policy, snapshot_before); // it did move
        assert_eq!(critics.q1, critics_before.q1);
        assert_eq!(critics.q2, critics_before.q2);
        assert_eq!(critics.target1, critics_before.target1);
        assert_eq!(critics.target2, critics_before.target2);
        assert_eq!(snapshot, snapshot_before);
    }

    #[test]
    fn analytic_optimum_drives_mean_to_zero() {
        // Q(s, a) = -|a| built exactly from relu units; the expected value
        // of -|mu + sigma xi| is uniquely maximized at mu = 0, so repeated
        // ascent steps must drive the policy mean there.
        let mut q = QNet::init(1, 1, &[2], &mut substream(96, "q")).unwrap();
        for block in q.mlp.blocks_mut() {
            for v in block.values_mut() {
                *v = 0.0;
            }
        }
        // hidden: [relu(a), relu(-a)] reading only the action column
        q.mlp.weights[0].values_mut()[2] = 1.0; // action -> h0
        q.mlp.weights[0].values_mut()[3] = -1.0; // action -> h1
        q.mlp.weights[1].values_mut()[0] = -1.0;
        q.mlp.weights[1].values_mut()[1] = -1.0;

        let mut critics = make_critics(1, 1, 97);
        critics.q1 = q.clone();
        critics.q2 = q;

        let mut policy = PolicyNet::init(1, 1, &[8], &mut substream(98, "p")).unwrap();
        // start the mean well away from the optimum
        let last = policy.mlp.biases.len() - 1;
        policy.mlp.biases[last].values_mut()[0] = 2.0;

        let states = Array::matrix(1, 1, vec![0.7]).unwrap();
        let mut opt = Adam::for_mlp(&policy.mlp, 1e-2);
        let mut rng = substream(99, "noise");
        for _ in 0..600 {
            let snapshot = policy.clone();
            actor_update_step(
                &mut policy,
                &snapshot,
                &critics,
                &states,
                0.0,
                0.0,
                &mut opt,
                &mut rng,
                ObjectiveKind::MinQCrossEntropy,
            )
            .unwrap();
        }
        let mu = policy.forward(&states).unwrap().mean.values()[0];
        assert!(mu.abs() < 0.05, "mu={mu}");
    }

    #[test]
    fn tune_alpha_fixed_point_and_signs() {
        let mk = || CoefficientState::new(1.0, 1.0, 1e-3, 5e-3, -1.0);
        let target = 5e-3 - 1.0;

        let mut at_target = mk();
        at_target.tune_alpha(target);
        assert_eq!(at_target.log_alpha, 0.0);
        assert_eq!(at_target.alpha(), 1.0);

        let mut above = mk();
        above.tune_alpha(target + 0.3);
        assert!(above.log_alpha > 0.0);

        let mut below = mk();
        below.tune_alpha(target - 0.3);
        assert!(below.log_alpha < 0.0);
    }

    #[test]
    fn tune_beta_fixed_point_and_signs() {
        let mk = || CoefficientState::new(1.0, 1.0, 1e-3, 5e-3, -1.0);

        let mut at_target = mk();
        at_target.tune_beta(-1.0);
        assert_eq!(at_target.log_beta, 0.0);

        let mut low_entropy = mk();
        low_entropy.tune_beta(-1.4);
        assert!(low_entropy.log_beta > 0.0, "entropy below target must raise beta");

        let mut high_entropy = mk();
        high_entropy.tune_beta(-0.6);
        assert!(high_entropy.log_beta < 0.0);
    }

    #[test]
    fn default_entropy_target_is_half_the_action_dim() {
        // -dim(A)/2, e.g. -3 for a 6-dimensional action space
        let dim_a = 6.0;
        let coeffs = CoefficientState::new(1.0, 1.0, 1e-3, 5e-3, -dim_a / 2.0);
        assert_eq!(coeffs.delta_entropy, -3.0);
    }

    #[test]
    fn coefficients_stay_positive_under_random_tuning() {
        let mut rng = substream(100, "tuning");
        let mut coeffs = CoefficientState::new(1.0, 1.0, 1e-3, 5e-3, -1.0);
        for _ in 0..100_000 {
            coeffs.tune_alpha(standard_normals(&mut rng, 1)[0] * 10.0);
            coeffs.tune_beta(standard_normals(&mut rng, 1)[0] * 10.0);
        }
        assert!(coeffs.alpha() > 0.0 && coeffs.alpha().is_finite());
        assert!(coeffs.beta() > 0.0 && coeffs.beta().is_finite());
    }

    #[test]
    fn alpha_response_is_monotone_in_cross_entropy() {
        // one step from a fresh state: a larger measured cross entropy
        // never yields a smaller post-update alpha
        let mut prev = f64::NEG_INFINITY;
        for i in 0..200 {
            let h_cross = -2.0 + i as f64 * 0.02;
            let mut coeffs = CoefficientState::new(1.0, 1.0, 1e-3, 5e-3, -1.0);
            coeffs.tune_alpha(h_cross);
            assert!(
                coeffs.log_alpha >= prev - 1e-15,
                "h_cross={h_cross}: {} < {prev}",
                coeffs.log_alpha
            );
            prev = coeffs.log_alpha;
        }
    }
}
