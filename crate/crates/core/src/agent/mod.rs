//! The control loop: demo bootstrapping, replay, action selection and
//! per-depth Q-learning with optional tree-expanded targets.

mod demo;
mod replay;

pub use demo::{augmented_pairs, keyframes, read_demos, write_demos, Demo, DemoState, DEMO_FORMAT, DEMO_VERSION};
pub use replay::ReplayBuffer;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{QteError, Result};
use crate::expansion::{select_coords, select_coords_from, ExpansionConfig, Selection};
use crate::par::ExecPolicy;
use crate::qmodel::{
    apply_update, Gradients, ModelSet, NetworkConfig, OptimizerConfig, OptimizerState, TdTarget, HEADS,
};
use crate::voxelgrid::{child_spec, voxelize, GridSpec, PointCloudObservation, Vec3, VoxelIndex};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentAction {
    pub translation: Vec3,
    pub rotation: [usize; 3],
    /// 0 open, 1 closed.
    pub gripper: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: PointCloudObservation,
    pub action: AgentAction,
    /// Selected voxel per depth.
    pub coords: Vec<VoxelIndex>,
    pub reward: f64,
    pub next_obs: PointCloudObservation,
    pub terminal: bool,
    pub is_demo: bool,
}

/// Where tree expansion replaces plain per-depth argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpansionMode {
    None,
    Act,
    Target,
    Both,
}

impl ExpansionMode {
    pub const ALL: [ExpansionMode; 4] = [Self::None, Self::Act, Self::Target, Self::Both];

    pub fn expands_action(self) -> bool {
        matches!(self, Self::Act | Self::Both)
    }

    pub fn expands_target(self) -> bool {
        matches!(self, Self::Target | Self::Both)
    }
}

impl fmt::Display for ExpansionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Act => "act",
            Self::Target => "target",
            Self::Both => "both",
        })
    }
}

impl FromStr for ExpansionMode {
    type Err = QteError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "act" => Ok(Self::Act),
            "target" => Ok(Self::Target),
            "both" => Ok(Self::Both),
            _ => Err(QteError::Config(format!("unknown expansion mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub network: NetworkConfig,
    /// `k`, resolutions and zoom margin of the pyramid; `exec` drives branch fan-out.
    pub expansion: ExpansionConfig,
    pub mode: ExpansionMode,
    pub workspace_center: Vec3,
    pub workspace_extent: f64,
    pub gamma: f64,
    pub tau: f64,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Env steps over which epsilon anneals linearly.
    pub eps_decay_steps: u64,
    /// Bound on per-step rewards, used to clip targets.
    pub reward_max: f64,
    pub q_clip: bool,
    pub train_every: u64,
    pub keyframe_velocity_threshold: Option<f64>,
    /// Fan-out of per-sample gradients within a batch.
    pub batch_exec: ExecPolicy,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            expansion: ExpansionConfig::default(),
            mode: ExpansionMode::Both,
            workspace_center: [0.0; 3],
            workspace_extent: 1.6,
            gamma: 0.99,
            tau: 0.005,
            optimizer: OptimizerConfig::default(),
            batch_size: 64,
            buffer_capacity: 100_000,
            eps_start: 0.1,
            eps_end: 0.01,
            eps_decay_steps: 2000,
            reward_max: 100.0,
            q_clip: true,
            train_every: 1,
            keyframe_velocity_threshold: None,
            batch_exec: ExecPolicy::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        self.expansion.validate()?;
        let bad = |m: &str| Err(QteError::Config(m.into()));
        if self.network.resolutions != self.expansion.resolutions {
            return bad("network and expansion resolutions differ");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must be in [0, 1]");
        }
        if self.batch_size == 0 || self.train_every == 0 {
            return bad("batch_size and train_every must be positive");
        }
        if !(0.0..=1.0).contains(&self.eps_start) || !(0.0..=1.0).contains(&self.eps_end) {
            return bad("epsilon must be in [0, 1]");
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }

    pub fn root_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.expansion.resolutions[0], self.workspace_center, self.workspace_extent)
    }

    /// Largest magnitude a clipped target can take.
    pub fn value_bound(&self) -> f64 {
        self.reward_max / (1.0 - self.gamma)
    }
}

/// Chosen action with the per-depth selection behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct ActOutput {
    pub action: AgentAction,
    pub selection: Selection,
    pub explored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub depths: Vec<f64>,
    pub heads: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub action: AgentAction,
    pub reward: f64,
    pub explored: bool,
    pub losses: Option<StepLosses>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub success: bool,
    pub total_return: f64,
    pub steps: Vec<StepDiagnostics>,
}

struct SampleGrads {
    losses: Vec<f64>,
    grads: Vec<Gradients>,
    head_loss: f64,
    head_grads: Gradients,
}

pub struct Agent {
    cfg: AgentConfig,
    online: ModelSet,
    target: ModelSet,
    opt: Vec<OptimizerState>,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    env_steps: u64,
    train_steps: u64,
}

impl Agent {
    /// Online and target networks start identical.
    pub fn new(cfg: AgentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let online = ModelSet::new(&cfg.network, &mut rng)?;
        let target = online.clone();
        let opt = online.tensors().iter().map(|(_, p)| OptimizerState::new(p)).collect();
        let buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
        Ok(Self {
            cfg,
            online,
            target,
            opt,
            buffer,
            rng,
            env_steps: 0,
            train_steps: 0,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn online(&self) -> &ModelSet {
        &self.online
    }

    pub fn online_mut(&mut self) -> &mut ModelSet {
        &mut self.online
    }

    pub fn target(&self) -> &ModelSet {
        &self.target
    }

    pub fn target_mut(&mut self) -> &mut ModelSet {
        &mut self.target
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn set_mode(&mut self, mode: ExpansionMode) {
        self.cfg.mode = mode;
    }

    pub fn epsilon(&self) -> f64 {
        let c = &self.cfg;
        let frac = if c.eps_decay_steps == 0 {
            1.0
        } else {
            (self.env_steps as f64 / c.eps_decay_steps as f64).min(1.0)
        };
        c.eps_start + (c.eps_end - c.eps_start) * frac
    }

    fn decide(&self, models: &ModelSet, obs: &PointCloudObservation, forced: Option<VoxelIndex>) -> Result<ActOutput> {
        let root = self.cfg.root_spec()?;
        let selection = select_coords_from(
            models,
            obs,
            &root,
            &self.cfg.expansion,
            self.cfg.mode.expands_action(),
            forced,
        )?;
        let last = selection.coords.len() - 1;
        let grid = voxelize(obs, &selection.specs[last]);
        let (_, bottleneck) = models.depths[last].q_at(&grid, obs.proprio(), selection.coords[last])?;
        let bins = models.heads.heads_q(&bottleneck)?.argmax();
        Ok(ActOutput {
            action: AgentAction {
                translation: selection.translation,
                rotation: [bins[0], bins[1], bins[2]],
                gripper: bins[3],
            },
            selection,
            explored: forced.is_some(),
        })
    }

    /// Greedy action from the online networks; touches no random state.
    pub fn greedy(&self, obs: &PointCloudObservation) -> Result<ActOutput> {
        self.decide(&self.online, obs, None)
    }

    /// Epsilon-greedy over the root voxel when `explore` is set.
    pub fn act(&mut self, obs: &PointCloudObservation, explore: bool) -> Result<ActOutput> {
        let forced = if explore && self.rng.gen::<f64>() < self.epsilon() {
            let e = self.cfg.expansion.resolutions[0];
            Some(VoxelIndex::new(
                self.rng.gen_range(0..e),
                self.rng.gen_range(0..e),
                self.rng.gen_range(0..e),
            ))
        } else {
            None
        };
        self.decide(&self.online, obs, forced)
    }

    /// Per-depth voxel indices containing `t`, walking the pyramid from the root.
    pub fn coords_for_translation(&self, t: Vec3) -> Result<Vec<VoxelIndex>> {
        let ex = &self.cfg.expansion;
        let mut spec = self.cfg.root_spec()?;
        let mut out = Vec::with_capacity(ex.resolutions.len());
        for n in 0..ex.resolutions.len() {
            let idx = spec
                .locate(t)
                .ok_or_else(|| QteError::Data(format!("translation {t:?} outside the depth-{n} grid")))?;
            out.push(idx);
            if n + 1 < ex.resolutions.len() {
                spec = child_spec(&spec, idx, ex.zoom_margin, ex.resolutions[n + 1])?;
            }
        }
        Ok(out)
    }

    pub fn store(&mut self, t: Transition) -> Result<()> {
        if t.coords.len() != self.cfg.expansion.resolutions.len() {
            return Err(QteError::Precondition("transition coords do not cover every depth".into()));
        }
        self.buffer.push(t);
        Ok(())
    }

    /// Keyframes plus augmentation into demo-flagged transitions. Returns the
    /// number stored.
    pub fn ingest_demos(&mut self, demos: &[Demo]) -> Result<usize> {
        let mut count = 0;
        for d in demos {
            let last = d.states.len().saturating_sub(1);
            for (start, key) in augmented_pairs(d, self.cfg.keyframe_velocity_threshold)? {
                let k = &d.states[key];
                let t = Transition {
                    obs: d.states[start].obs.clone(),
                    action: k.action,
                    coords: self.coords_for_translation(k.action.translation)?,
                    reward: k.reward,
                    next_obs: k.obs.clone(),
                    terminal: key == last,
                    is_demo: true,
                };
                self.store(t)?;
                count += 1;
            }
        }
        Ok(count)
    }

    fn clip(&self, v: f64) -> f64 {
        if self.cfg.q_clip {
            let b = self.cfg.value_bound();
            v.clamp(-b, b)
        } else {
            v
        }
    }

    fn sample_grads(&self, t: &Transition) -> Result<SampleGrads> {
        let ex = &self.cfg.expansion;
        let depths = ex.resolutions.len();
        let (next_values, next_heads) = if t.terminal {
            (vec![0.0; depths], [0.0; HEADS])
        } else {
            let root = self.cfg.root_spec()?;
            let sel = select_coords(&self.target, &t.next_obs, &root, ex, self.cfg.mode.expands_target())?;
            let last = depths - 1;
            let grid = voxelize(&t.next_obs, &sel.specs[last]);
            let (_, bn) = self.target.depths[last].q_at(&grid, t.next_obs.proprio(), sel.coords[last])?;
            let hv = self.target.heads.heads_q(&bn)?;
            let nh = hv.at(hv.argmax()).map(|v| self.clip(v));
            (sel.values.iter().map(|&v| self.clip(v)).collect(), nh)
        };

        let mut spec = self.cfg.root_spec()?;
        let mut losses = Vec::with_capacity(depths);
        let mut grads = Vec::with_capacity(depths);
        let mut head = None;
        for n in 0..depths {
            let grid = voxelize(&t.obs, &spec);
            let target = TdTarget {
                reward: t.reward,
                discount: self.cfg.gamma,
                terminal: t.terminal,
                next_value: next_values[n],
            };
            let (l, g) = self.online.depths[n].td_loss(&grid, t.obs.proprio(), t.coords[n], &target)?;
            losses.push(l);
            grads.push(g);
            if n + 1 < depths {
                spec = child_spec(&spec, t.coords[n], ex.zoom_margin, ex.resolutions[n + 1])?;
            } else {
                let (_, bn) = self.online.depths[n].q_at(&grid, t.obs.proprio(), t.coords[n])?;
                let targets: [f64; HEADS] = std::array::from_fn(|h| {
                    TdTarget {
                        reward: t.reward,
                        discount: self.cfg.gamma,
                        terminal: t.terminal,
                        next_value: next_heads[h],
                    }
                    .value()
                });
                head = Some(self.online.heads.head_loss(&bn, t.action.bins(), targets, [true; HEADS])?);
            }
        }
        let (head_loss, head_grads) = head.expect("final depth reached");
        Ok(SampleGrads {
            losses,
            grads,
            head_loss,
            head_grads,
        })
    }

    /// One batch update of every depth and the heads, followed by the soft
    /// target update. Nothing changes if any loss or gradient is non-finite.
    pub fn train_step(&mut self) -> Result<StepLosses> {
        let idx = self.buffer.sample_indices(&mut self.rng, self.cfg.batch_size)?;
        self.train_on(&idx)
    }

    /// [`Agent::train_step`] on explicit buffer indices.
    pub fn train_on(&mut self, indices: &[usize]) -> Result<StepLosses> {
        if indices.is_empty() {
            return Err(QteError::Precondition("empty batch".into()));
        }
        let batch: Vec<&Transition> = indices
            .iter()
            .map(|&i| {
                self.buffer
                    .get(i)
                    .ok_or_else(|| QteError::Precondition(format!("buffer index {i} out of range")))
            })
            .collect::<Result<_>>()?;
        let per_sample = self.cfg.batch_exec.map(&batch, |t| self.sample_grads(t));
        let depths = self.online.depths.len();
        let mut sum_grads: Vec<Gradients> = self
            .online
            .tensors()
            .iter()
            .map(|(_, p)| Gradients::zeros(p.len()))
            .collect();
        let mut losses = vec![0.0; depths];
        let mut head_loss = 0.0;
        for s in per_sample {
            let s = s?;
            for n in 0..depths {
                losses[n] += s.losses[n];
                sum_grads[n].add_assign(&s.grads[n]);
            }
            head_loss += s.head_loss;
            sum_grads[depths].add_assign(&s.head_grads);
        }
        let b = indices.len() as f64;
        losses.iter_mut().for_each(|l| *l /= b);
        head_loss /= b;
        if losses.iter().chain([&head_loss]).any(|l| !l.is_finite()) {
            return Err(QteError::Training(format!("non-finite loss at train step {}", self.train_steps)));
        }
        for g in &mut sum_grads {
            g.scale(1.0 / b);
            if g.0.iter().any(|v| !v.is_finite()) {
                return Err(QteError::Training("non-finite gradient".into()));
            }
        }
        let opt_cfg = self.cfg.optimizer;
        for (n, g) in sum_grads.iter().enumerate() {
            let params = if n < depths {
                self.online.depths[n].params_mut()
            } else {
                self.online.heads.params_mut()
            };
            apply_update(params, g, &mut self.opt[n], &opt_cfg)?;
        }
        self.target.soft_update_from(&self.online, self.cfg.tau)?;
        self.train_steps += 1;
        Ok(StepLosses {
            depths: losses,
            heads: head_loss,
        })
    }

    /// Acts with exploration until the episode ends, storing every transition
    /// and training every `train_every` env steps when `train` is set.
    pub fn run_episode<E: Environment>(&mut self, env: &mut E, seed: u64, train: bool) -> Result<EpisodeRecord> {
        let mut obs = env.reset(seed)?;
        let mut steps = Vec::new();
        let mut total_return = 0.0;
        loop {
            let out = self.act(&obs, true)?;
            let step = env.step(&out.action)?;
            total_return += step.reward;
            self.store(Transition {
                obs: obs.clone(),
                action: out.action,
                coords: out.selection.coords.clone(),
                reward: step.reward,
                next_obs: step.obs.clone(),
                terminal: step.done,
                is_demo: false,
            })?;
            self.env_steps += 1;
            let losses = if train && self.env_steps.is_multiple_of(self.cfg.train_every) {
                Some(self.train_step()?)
            } else {
                None
            };
            steps.push(StepDiagnostics {
                action: out.action,
                reward: step.reward,
                explored: out.explored,
                losses,
            });
            if step.done {
                return Ok(EpisodeRecord {
                    success: step.success,
                    total_return,
                    steps,
                });
            }
            obs = step.obs;
        }
    }

    /// Greedy rollout without storing or training.
    pub fn evaluate_episode<E: Environment>(&self, env: &mut E, seed: u64) -> Result<EpisodeRecord> {
        let mut obs = env.reset(seed)?;
        let mut steps = Vec::new();
        let mut total_return = 0.0;
        loop {
            let out = self.greedy(&obs)?;
            let step = env.step(&out.action)?;
            total_return += step.reward;
            steps.push(StepDiagnostics {
                action: out.action,
                reward: step.reward,
                explored: false,
                losses: None,
            });
            if step.done {
                return Ok(EpisodeRecord {
                    success: step.success,
                    total_return,
                    steps,
                });
            }
            obs = step.obs;
        }
    }
}
