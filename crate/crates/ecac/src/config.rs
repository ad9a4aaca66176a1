//! Training configuration: a flat key-value file with command-line
//! overrides. Every knob has exactly one source of truth (file values are
//! overridden by explicit `key=value` pairs), and the effective config is
//! echoed into the run directory for provenance.

use std::fmt::Write as _;
use std::path::Path;

use crate::actor::ObjectiveKind;
use crate::critic::BootstrapNets;
use crate::error::{Error, Result};

/// All trainer knobs. `delta_entropy` defaults to `-act_dim / 2`, which is
/// only known once the environment is chosen, hence the `Option`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub env: String,
    pub seed: u64,
    pub total_steps: u64,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub tau: f64,
    pub delta_kl: f64,
    pub delta_entropy: Option<f64>,
    pub reward_scale: f64,
    pub warmup_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub probe_every: u64,
    pub probe_states: usize,
    pub probe_episodes: usize,
    pub probe_horizon: usize,
    pub probe_inner_samples: usize,
    pub hidden: Vec<usize>,
    pub objective: ObjectiveKind,
    pub kl_limitation: bool,
    pub bootstrap: BootstrapNets,
    pub checkpoint_every: u64,
    pub alpha_init: f64,
    pub beta_init: f64,
    pub resume: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            env: "pointmass2d".to_string(),
            seed: 0,
            total_steps: 20_000,
            gamma: 0.99,
            lr: 1e-3,
            batch_size: 128,
            buffer_capacity: 500_000,
            tau: 5e-3,
            delta_kl: 5e-3,
            delta_entropy: None,
            reward_scale: 5.0,
            warmup_steps: 1000,
            eval_every: 1000,
            eval_episodes: 5,
            probe_every: 10_000,
            probe_states: 100,
            probe_episodes: 20,
            probe_horizon: 500,
            probe_inner_samples: 16,
            hidden: vec![256, 256],
            objective: ObjectiveKind::MinQCrossEntropy,
            kl_limitation: true,
            bootstrap: BootstrapNets::Target,
            checkpoint_every: 10_000,
            alpha_init: 1.0,
            beta_init: 1.0,
            resume: None,
        }
    }
}

impl TrainConfig {
    /// Parse a flat key-value file (`key = value`, `#` comments) on top of
    /// the defaults.
    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = TrainConfig::default();
        let mut errors = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((key, value)) => {
                    if let Err(e) = cfg.set(key.trim(), value.trim()) {
                        errors.push(format!("line {}: {e}", lineno + 1));
                    }
                }
                None => errors.push(format!("line {}: expected key=value, got {line:?}", lineno + 1)),
            }
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Apply `key=value` overrides (command line wins over the file).
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        let mut errors = Vec::new();
        for pair in pairs {
            match pair.split_once('=') {
                Some((key, value)) => {
                    if let Err(e) = self.set(key.trim(), value.trim()) {
                        errors.push(e);
                    }
                }
                None => errors.push(format!("override {pair:?} is not key=value")),
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value
                .parse::<T>()
                .map_err(|_| format!("{key}: cannot parse {value:?}"))
        }
        match key {
            "env" => self.env = value.to_string(),
            "seed" => self.seed = parse(key, value)?,
            "total_steps" => self.total_steps = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "buffer_capacity" => self.buffer_capacity = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "delta_kl" => self.delta_kl = parse(key, value)?,
            "delta_entropy" => self.delta_entropy = Some(parse(key, value)?),
            "reward_scale" => self.reward_scale = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "probe_every" => self.probe_every = parse(key, value)?,
            "probe_states" => self.probe_states = parse(key, value)?,
            "probe_episodes" => self.probe_episodes = parse(key, value)?,
            "probe_horizon" => self.probe_horizon = parse(key, value)?,
            "probe_inner_samples" => self.probe_inner_samples = parse(key, value)?,
            "hidden" => {
                let mut sizes = Vec::new();
                for part in value.split(',') {
                    sizes.push(parse::<usize>(key, part.trim())?);
                }
                self.hidden = sizes;
            }
            "objective" => {
                self.objective = match value {
                    "minq-ce" => ObjectiveKind::MinQCrossEntropy,
                    "q1-kl" => ObjectiveKind::Q1Kl,
                    other => return Err(format!("objective: expected minq-ce or q1-kl, got {other:?}")),
                }
            }
            "kl_limitation" => {
                self.kl_limitation = match value {
                    "on" => true,
                    "off" => false,
                    other => return Err(format!("kl_limitation: expected on or off, got {other:?}")),
                }
            }
            "bootstrap" => {
                self.bootstrap = match value {
                    "target" => BootstrapNets::Target,
                    "online" => BootstrapNets::Online,
                    other => return Err(format!("bootstrap: expected target or online, got {other:?}")),
                }
            }
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "alpha_init" => self.alpha_init = parse(key, value)?,
            "beta_init" => self.beta_init = parse(key, value)?,
            "resume" => self.resume = Some(value.to_string()),
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Validate everything at once; the error lists every violation.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if crate::envs::make_env(&self.env).is_err() {
            errors.push(format!(
                "env: unknown environment {:?} (expected pointmass2d, pendulum, or mountaincar_c)",
                self.env
            ));
        }
        if self.total_steps == 0 {
            errors.push("total_steps must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            errors.push(format!("gamma must be in [0, 1], got {}", self.gamma));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            errors.push(format!("lr must be a finite non-negative real, got {}", self.lr));
        }
        if self.batch_size == 0 {
            errors.push("batch_size must be >= 1".to_string());
        }
        if self.buffer_capacity == 0 {
            errors.push("buffer_capacity must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            errors.push(format!("tau must be in [0, 1], got {}", self.tau));
        }
        if !self.delta_kl.is_finite() {
            errors.push("delta_kl must be finite".to_string());
        }
        if !self.reward_scale.is_finite() || self.reward_scale <= 0.0 {
            errors.push(format!("reward_scale must be positive, got {}", self.reward_scale));
        }
        if self.eval_every == 0 {
            errors.push("eval_every must be >= 1".to_string());
        }
        if self.eval_episodes == 0 {
            errors.push("eval_episodes must be >= 1".to_string());
        }
        if self.probe_every == 0 {
            errors.push("probe_every must be >= 1".to_string());
        }
        for (name, v) in [
            ("probe_states", self.probe_states),
            ("probe_episodes", self.probe_episodes),
            ("probe_horizon", self.probe_horizon),
            ("probe_inner_samples", self.probe_inner_samples),
        ] {
            if v == 0 {
                errors.push(format!("{name} must be >= 1"));
            }
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            errors.push(format!("hidden layer sizes must be non-empty and non-zero, got {:?}", self.hidden));
        }
        if self.alpha_init <= 0.0 {
            errors.push(format!("alpha_init must be positive, got {}", self.alpha_init));
        }
        if self.beta_init <= 0.0 {
            errors.push(format!("beta_init must be positive, got {}", self.beta_init));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Entropy target: configured value, or `-act_dim / 2`.
    pub fn effective_delta_entropy(&self, act_dim: usize) -> f64 {
        self.delta_entropy.unwrap_or(-(act_dim as f64) / 2.0)
    }

    /// Render the effective configuration in the file format.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "env = {}", self.env);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "total_steps = {}", self.total_steps);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "buffer_capacity = {}", self.buffer_capacity);
        let _ = writeln!(s, "tau = {}", self.tau);
        let _ = writeln!(s, "delta_kl = {}", self.delta_kl);
        match self.delta_entropy {
            Some(v) => {
                let _ = writeln!(s, "delta_entropy = {v}");
            }
            None => {
                let _ = writeln!(s, "# delta_entropy = -act_dim / 2 (default)");
            }
        }
        let _ = writeln!(s, "reward_scale = {}", self.reward_scale);
        let _ = writeln!(s, "warmup_steps = {}", self.warmup_steps);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "eval_episodes = {}", self.eval_episodes);
        let _ = writeln!(s, "probe_every = {}", self.probe_every);
        let _ = writeln!(s, "probe_states = {}", self.probe_states);
        let _ = writeln!(s, "probe_episodes = {}", self.probe_episodes);
        let _ = writeln!(s, "probe_horizon = {}", self.probe_horizon);
        let _ = writeln!(s, "probe_inner_samples = {}", self.probe_inner_samples);
        let _ = writeln!(
            s,
            "hidden = {}",
            self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(
            s,
            "objective = {}",
            match self.objective {
                ObjectiveKind::MinQCrossEntropy => "minq-ce",
                ObjectiveKind::Q1Kl => "q1-kl",
            }
        );
        let _ = writeln!(s, "kl_limitation = {}", if self.kl_limitation { "on" } else { "off" });
        let _ = writeln!(
            s,
            "bootstrap = {}",
            match self.bootstrap {
                BootstrapNets::Target => "target",
                BootstrapNets::Online => "online",
            }
        );
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "alpha_init = {}", self.alpha_init);
        let _ = writeln!(s, "beta_init = {}", self.beta_init);
        if let Some(resume) = &self.resume {
            let _ = writeln!(s, "resume = {resume}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn file_parsing_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# a config\nenv = pendulum\nseed = 9\nhidden = 64, 64\nkl_limitation = off\n",
        )
        .unwrap();
        let mut cfg = TrainConfig::from_file(&path).unwrap();
        assert_eq!(cfg.env, "pendulum");
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.hidden, vec![64, 64]);
        assert!(!cfg.kl_limitation);

        cfg.apply_overrides(&["seed=11".to_string(), "objective=q1-kl".to_string()])
            .unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.objective, ObjectiveKind::Q1Kl);
    }

    #[test]
    fn validation_reports_all_errors_at_once() {
        let mut cfg = TrainConfig::default();
        cfg.env = "mujoco".to_string();
        cfg.gamma = 1.5;
        cfg.batch_size = 0;
        cfg.reward_scale = -1.0;
        match cfg.validate() {
            Err(Error::Config(errors)) => {
                assert!(errors.len() >= 4, "{errors:?}");
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn delta_entropy_default_tracks_action_dim() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.effective_delta_entropy(6), -3.0);
        assert_eq!(cfg.effective_delta_entropy(1), -0.5);
        let mut fixed = cfg;
        fixed.delta_entropy = Some(-2.0);
        assert_eq!(fixed.effective_delta_entropy(6), -2.0);
    }

    #[test]
    fn echo_roundtrips_through_parser() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = TrainConfig::default();
        cfg.env = "mountaincar_c".to_string();
        cfg.hidden = vec![32, 16];
        cfg.delta_entropy = Some(-0.25);
        cfg.objective = ObjectiveKind::Q1Kl;
        let path = dir.path().join("echo.cfg");
        std::fs::write(&path, cfg.echo()).unwrap();
        let reparsed = TrainConfig::from_file(&path).unwrap();
        assert_eq!(cfg, reparsed);
    }

    #[test]
    fn unknown_keys_are_rejected_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        std::fs::write(&path, "env = pendulum\nwat = 7\n").unwrap();
        match TrainConfig::from_file(&path) {
            Err(Error::Config(errors)) => assert!(errors[0].contains("line 2")),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
