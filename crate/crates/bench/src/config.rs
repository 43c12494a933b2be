//! Flat `key=value` experiment configuration with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. The same keys are
//! accepted as `--key=value` overrides on the command line.

use std::path::PathBuf;

use qte_core::agent::{AgentConfig, ExpansionMode};
use qte_core::env::SceneSpec;
use qte_core::expansion::ExpansionConfig;
use qte_core::par::ExecPolicy;
use qte_core::qmodel::{NetworkConfig, OptimizerConfig};

use crate::error::BenchError;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "QTE_OUT";
const DEFAULT_OUT: &str = "qte-out";

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: String,
    pub demos: usize,
    pub steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    pub k: usize,
    pub mode: ExpansionMode,
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub train_every: u64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Defaults to `steps` when unset.
    pub eps_decay_steps: Option<u64>,
    pub resolutions: Vec<usize>,
    pub zoom_margin: f64,
    pub reexpand: bool,
    pub rotation_bin_deg: f64,
    pub reward_scale: f64,
    pub q_clip: bool,
    pub conv_width: usize,
    pub context_width: usize,
    pub hidden_width: usize,
    pub head_hidden_width: usize,
    pub parallel: bool,
    pub wall_clock: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let net = NetworkConfig::default();
        Self {
            task: "reach_ambiguous_k3".into(),
            demos: 10,
            steps: 2000,
            eval_interval: 100,
            eval_episodes: 20,
            seeds: vec![0, 1, 2, 3, 4],
            k: 10,
            mode: ExpansionMode::Both,
            gamma: 0.99,
            tau: 0.005,
            lr: 1e-4,
            momentum: 0.9,
            clip_norm: None,
            batch_size: 64,
            buffer_capacity: 100_000,
            train_every: 1,
            eps_start: 0.1,
            eps_end: 0.01,
            eps_decay_steps: None,
            resolutions: net.resolutions,
            zoom_margin: 1.0,
            reexpand: false,
            rotation_bin_deg: net.rotation_bin_deg,
            reward_scale: 100.0,
            q_clip: true,
            conv_width: net.conv_width,
            context_width: net.context_width,
            hidden_width: net.hidden_width,
            head_hidden_width: net.head_hidden_width,
            parallel: true,
            wall_clock: false,
            out_dir: None,
        }
    }
}

/// Named starting points; keys set afterwards still override them.
pub const NAMED_CONFIGS: [&str; 4] = ["desk", "full_scale", "demos20", "demos40"];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, BenchError> {
    value.parse().map_err(|_| BenchError::InvalidValue {
        key: key.into(),
        value: value.into(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, BenchError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(BenchError::InvalidValue {
            key: key.into(),
            value: value.into(),
        }),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, BenchError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// `(line, key, value)` triples of a config text; lines are 1-based.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>, BenchError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| BenchError::Parse {
            line: n + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(BenchError::Parse {
                line: n + 1,
                msg: "empty key".into(),
            });
        }
        out.push((n + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn named(name: &str) -> Result<Self, BenchError> {
        let base = Self::default();
        Ok(match name {
            "desk" => base,
            "full_scale" => Self {
                resolutions: vec![16, 16],
                ..base
            },
            "demos20" => Self {
                task: "stack2_ambiguous".into(),
                demos: 20,
                ..base
            },
            "demos40" => Self {
                task: "stack2_ambiguous".into(),
                demos: 40,
                ..base
            },
            other => return Err(BenchError::UnknownPreset(other.into())),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), BenchError> {
        match key {
            "task" => self.task = value.into(),
            "demos" => self.demos = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "eval.interval" => self.eval_interval = parse(key, value)?,
            "eval.episodes" => self.eval_episodes = parse(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "agent.k" => self.k = parse(key, value)?,
            "agent.mode" => {
                self.mode = value.parse().map_err(|_| BenchError::InvalidValue {
                    key: key.into(),
                    value: value.into(),
                })?
            }
            "agent.gamma" => self.gamma = parse(key, value)?,
            "agent.tau" => self.tau = parse(key, value)?,
            "agent.lr" => self.lr = parse(key, value)?,
            "agent.momentum" => self.momentum = parse(key, value)?,
            "agent.clip_norm" => {
                self.clip_norm = match value {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "agent.batch_size" => self.batch_size = parse(key, value)?,
            "agent.buffer_capacity" => self.buffer_capacity = parse(key, value)?,
            "agent.train_every" => self.train_every = parse(key, value)?,
            "agent.eps_start" => self.eps_start = parse(key, value)?,
            "agent.eps_end" => self.eps_end = parse(key, value)?,
            "agent.eps_decay_steps" => self.eps_decay_steps = Some(parse(key, value)?),
            "agent.resolutions" => self.resolutions = parse_list(key, value)?,
            "agent.zoom_margin" => self.zoom_margin = parse(key, value)?,
            "agent.reexpand" => self.reexpand = parse_bool(key, value)?,
            "agent.rotation_bin_deg" => self.rotation_bin_deg = parse(key, value)?,
            "agent.reward_scale" => self.reward_scale = parse(key, value)?,
            "agent.q_clip" => self.q_clip = parse_bool(key, value)?,
            "net.conv_width" => self.conv_width = parse(key, value)?,
            "net.context_width" => self.context_width = parse(key, value)?,
            "net.hidden_width" => self.hidden_width = parse(key, value)?,
            "net.head_hidden_width" => self.head_hidden_width = parse(key, value)?,
            "exec.parallel" => self.parallel = parse_bool(key, value)?,
            "bench.wall_clock" => self.wall_clock = parse_bool(key, value)?,
            "out.dir" => self.out_dir = Some(PathBuf::from(value)),
            _ => return Err(BenchError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Applies a config text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), BenchError> {
        for (line, k, v) in parse_pairs(text)? {
            self.set(&k, &v).map_err(|e| BenchError::Parse {
                line,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        self.scene()?;
        if self.seeds.is_empty() {
            return Err(BenchError::Invalid("seeds must be nonempty".into()));
        }
        if self.eval_interval == 0 {
            return Err(BenchError::Invalid("eval.interval must be positive".into()));
        }
        self.agent()?.validate()?;
        Ok(())
    }

    /// Task preset adapted to the configured pyramid and reward scale.
    pub fn scene(&self) -> Result<SceneSpec, BenchError> {
        let mut s = SceneSpec::preset(&self.task).map_err(|_| BenchError::UnknownPreset(self.task.clone()))?;
        s.resolutions = self.resolutions.clone();
        s.reward_success = self.reward_scale;
        s.validate()?;
        Ok(s)
    }

    pub fn exec(&self) -> ExecPolicy {
        if self.parallel {
            ExecPolicy::Parallel
        } else {
            ExecPolicy::Sequential
        }
    }

    pub fn agent(&self) -> Result<AgentConfig, BenchError> {
        let scene = self.scene()?;
        let cfg = AgentConfig {
            network: NetworkConfig {
                resolutions: self.resolutions.clone(),
                feature_dim: qte_core::env::FEATURE_DIM,
                proprio_dim: qte_core::env::PROPRIO_DIM,
                conv_width: self.conv_width,
                context_width: self.context_width,
                hidden_width: self.hidden_width,
                head_hidden_width: self.head_hidden_width,
                rotation_bin_deg: self.rotation_bin_deg,
            },
            expansion: ExpansionConfig {
                k: self.k,
                resolutions: self.resolutions.clone(),
                zoom_margin: self.zoom_margin,
                reexpand_per_depth: self.reexpand,
                exec: self.exec(),
            },
            mode: self.mode,
            workspace_center: scene.workspace_center,
            workspace_extent: scene.workspace_extent,
            gamma: self.gamma,
            tau: self.tau,
            optimizer: OptimizerConfig {
                learning_rate: self.lr,
                momentum: self.momentum,
                clip_norm: self.clip_norm,
            },
            batch_size: self.batch_size,
            buffer_capacity: self.buffer_capacity,
            eps_start: self.eps_start,
            eps_end: self.eps_end,
            eps_decay_steps: self.eps_decay_steps.unwrap_or(self.steps),
            reward_max: self.reward_scale,
            q_clip: self.q_clip,
            train_every: self.train_every,
            keyframe_velocity_threshold: None,
            batch_exec: self.exec(),
        };
        Ok(cfg)
    }

    /// `out.dir`, else `$QTE_OUT`, else `./qte-out`.
    pub fn out_root(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    /// Stem shared by the per-seed and merged CSVs of this configuration.
    pub fn run_name(&self) -> String {
        format!("{}_k{}_{}", self.task, self.k, self.mode)
    }
}
