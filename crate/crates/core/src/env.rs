//! Synthetic sparse-reward reach and stack tasks with controllable coarse
//! ambiguity, plus privileged scripted experts.
//!
//! Every object is a cube of `object_cells^3` points, one at the center of each
//! finest-grid cell it covers, and lies entirely inside one cell of the
//! second-to-last depth. Each point carries one binary feature. Target and
//! distractors carry the same number of ones, so any cell that contains a
//! whole object has bit-identical mean features; only the arrangement of the
//! ones differs, and the target is the only object whose center point is lit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentAction, Demo, DemoState};
use crate::error::{QteError, Result};
use crate::voxelgrid::{GridSpec, PointCloudObservation, Vec3};

/// Proprio layout: `[gripper_closed, holding]`.
pub const PROPRIO_DIM: usize = 2;
pub const FEATURE_DIM: usize = 1;
const PAD_FEATURE: f64 = 0.5;
const MAX_PLACEMENT_TRIES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    /// Reach the target: one decision.
    Reach,
    /// Grasp the target (gripper closed), then release it over the pad.
    Stack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub kind: TaskKind,
    pub workspace_center: Vec3,
    pub workspace_extent: f64,
    /// Grid resolution of every depth of the agent's pyramid; object geometry
    /// is laid out on the same lattice.
    pub resolutions: Vec<usize>,
    /// Objects including the target.
    pub object_count: usize,
    /// Object edge length in finest cells; odd.
    pub object_cells: usize,
    /// Distractors share the target's coarse appearance.
    pub ambiguous: bool,
    pub horizon: usize,
    /// Success radius around the goal; `None` means half the object size.
    pub tolerance: Option<f64>,
    pub reward_success: f64,
}

impl SceneSpec {
    pub fn preset(name: &str) -> Result<Self> {
        let base = SceneSpec {
            kind: TaskKind::Reach,
            workspace_center: [0.0, 0.0, 0.0],
            workspace_extent: 1.6,
            resolutions: vec![8, 8],
            object_count: 1,
            object_cells: 3,
            ambiguous: true,
            horizon: 1,
            tolerance: None,
            reward_success: 100.0,
        };
        Ok(match name {
            "reach_unique" => base,
            "reach_ambiguous_k3" => SceneSpec {
                object_count: 3,
                ..base
            },
            "reach_ambiguous_k5" => SceneSpec {
                object_count: 5,
                ..base
            },
            "stack2_ambiguous" => SceneSpec {
                kind: TaskKind::Stack,
                object_count: 3,
                horizon: 2,
                ..base
            },
            other => {
                return Err(QteError::Config(format!(
                    "unknown task preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    /// Edge of one finest-grid cell.
    pub fn finest_cell(&self) -> f64 {
        self.workspace_extent / self.resolutions.iter().map(|&e| e as f64).product::<f64>()
    }

    pub fn object_size(&self) -> f64 {
        self.object_cells as f64 * self.finest_cell()
    }

    /// Cell size of the finest grid at which objects remain indistinguishable.
    pub fn ambiguity_scale(&self) -> f64 {
        let last = self.resolutions.len() - 1;
        self.workspace_extent
            / self.resolutions[..last]
                .iter()
                .map(|&e| e as f64)
                .product::<f64>()
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance.unwrap_or(self.object_size() / 2.0)
    }

    /// Objects placed in the scene, counting the stack pad.
    fn placed(&self) -> usize {
        self.object_count + usize::from(self.kind == TaskKind::Stack)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(QteError::Config(m));
        if self.resolutions.len() < 2 || self.resolutions.iter().any(|&e| e < 2) {
            return bad("scene needs at least two depths of resolution >= 2".into());
        }
        if self.object_count == 0 {
            return bad("at least one object is required".into());
        }
        if self.object_cells < 3 || self.object_cells.is_multiple_of(2) {
            return bad(format!("object_cells must be odd and >= 3, got {}", self.object_cells));
        }
        if self.object_cells > *self.resolutions.last().unwrap() {
            return bad("object does not fit in one cell of the second-to-last depth".into());
        }
        if !(self.object_size() < self.workspace_extent / self.placed() as f64) {
            return bad("object size must be below workspace extent / object count".into());
        }
        if !(self.ambiguity_scale() > self.finest_cell()) {
            return bad("ambiguity scale must exceed the finest cell size".into());
        }
        if self.horizon == 0 || (self.kind == TaskKind::Stack && self.horizon < 2) {
            return bad("horizon too short for the task".into());
        }
        Ok(())
    }

    pub fn workspace_grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.resolutions[0], self.workspace_center, self.workspace_extent)
    }
}

pub const PRESETS: [&str; 4] = [
    "reach_unique",
    "reach_ambiguous_k3",
    "reach_ambiguous_k5",
    "stack2_ambiguous",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub center: Vec3,
    /// Row-major `object_cells^3` binary pattern.
    pub pattern: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub spec: SceneSpec,
    pub objects: Vec<SceneObject>,
    pub target: usize,
    /// Release location of the stack task.
    pub pad: Option<SceneObject>,
}

fn rotate_pattern(pattern: &[f64], n: usize, perm: [usize; 3], flip: [bool; 3]) -> Vec<f64> {
    let mut out = vec![0.0; pattern.len()];
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                let src = [a, b, c];
                let mut dst = [0; 3];
                for axis in 0..3 {
                    let v = src[perm[axis]];
                    dst[axis] = if flip[axis] { n - 1 - v } else { v };
                }
                out[(dst[0] * n + dst[1]) * n + dst[2]] = pattern[(a * n + b) * n + c];
            }
        }
    }
    out
}

/// One of the 24 proper rotations of the cube lattice.
fn random_rotation<R: Rng>(rng: &mut R) -> ([usize; 3], [bool; 3]) {
    const PERMS: [([usize; 3], bool); 6] = [
        ([0, 1, 2], true),
        ([1, 2, 0], true),
        ([2, 0, 1], true),
        ([0, 2, 1], false),
        ([2, 1, 0], false),
        ([1, 0, 2], false),
    ];
    let (perm, even) = PERMS[rng.gen_range(0..6)];
    let mut flip = [rng.gen::<bool>(), rng.gen::<bool>(), false];
    // determinant +1: odd permutation needs an odd number of flips
    let flips = flip[0] as usize + flip[1] as usize;
    flip[2] = (flips % 2 == 1) == even;
    (perm, flip)
}

fn make_pattern<R: Rng>(rng: &mut R, n: usize, is_target: bool, ambiguous: bool) -> Vec<f64> {
    let cells = n * n * n;
    let center = cells / 2;
    if !is_target && !ambiguous {
        return vec![0.0; cells];
    }
    let ones = cells / 3;
    let mut others: Vec<usize> = (0..cells).filter(|&c| c != center).collect();
    others.shuffle(rng);
    let mut pattern = vec![0.0; cells];
    let lit = if is_target {
        pattern[center] = 1.0;
        ones - 1
    } else {
        ones
    };
    for &c in &others[..lit] {
        pattern[c] = 1.0;
    }
    let (perm, flip) = random_rotation(rng);
    rotate_pattern(&pattern, n, perm, flip)
}

/// Samples a task instance. Objects land in distinct root cells, each wholly
/// inside one cell of the second-to-last depth.
pub fn generate(spec: &SceneSpec, seed: u64) -> Result<TaskInstance> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = spec.resolutions.len() - 1;
    let fine = spec.finest_cell();
    let inner = spec.resolutions[last];
    let cells_per_axis: usize = spec.resolutions[..last].iter().product();
    let root_per_axis = spec.resolutions[0];
    let sub_per_root = cells_per_axis / root_per_axis;
    let half = (spec.object_cells - 1) / 2;
    let lo = spec.workspace_center.map(|c| c - spec.workspace_extent / 2.0);

    let mut used_roots = Vec::new();
    let mut centers = Vec::new();
    let mut tries = 0;
    while centers.len() < spec.placed() {
        tries += 1;
        if tries > MAX_PLACEMENT_TRIES {
            return Err(QteError::Generation(format!(
                "could not place {} objects without overlap",
                spec.placed()
            )));
        }
        let cell: [usize; 3] = std::array::from_fn(|_| rng.gen_range(0..cells_per_axis));
        let root = cell.map(|c| c / sub_per_root);
        if used_roots.contains(&root) {
            continue;
        }
        let offset: [usize; 3] = std::array::from_fn(|_| rng.gen_range(half..inner - half));
        let center: Vec3 =
            std::array::from_fn(|a| lo[a] + ((cell[a] * inner + offset[a]) as f64 + 0.5) * fine);
        used_roots.push(root);
        centers.push(center);
    }

    let target = rng.gen_range(0..spec.object_count);
    let n = spec.object_cells;
    let objects = (0..spec.object_count)
        .map(|o| SceneObject {
            center: centers[o],
            pattern: make_pattern(&mut rng, n, o == target, spec.ambiguous),
        })
        .collect();
    let pad = (spec.kind == TaskKind::Stack).then(|| SceneObject {
        center: centers[spec.object_count],
        pattern: vec![PAD_FEATURE; n * n * n],
    });
    Ok(TaskInstance {
        spec: spec.clone(),
        objects,
        target,
        pad,
    })
}

impl TaskInstance {
    fn object_points(&self, obj: &SceneObject, points: &mut Vec<Vec3>, feats: &mut Vec<f64>) {
        let n = self.spec.object_cells;
        let h = ((n - 1) / 2) as f64;
        let f = self.spec.finest_cell();
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let d = [a as f64 - h, b as f64 - h, c as f64 - h];
                    points.push(std::array::from_fn(|ax| obj.center[ax] + d[ax] * f));
                    feats.push(obj.pattern[(a * n + b) * n + c]);
                }
            }
        }
    }

    /// Scene as observed; a held target is no longer part of it.
    pub fn observe(&self, holding: bool) -> PointCloudObservation {
        let mut points = Vec::new();
        let mut feats = Vec::new();
        for (o, obj) in self.objects.iter().enumerate() {
            if !(holding && o == self.target) {
                self.object_points(obj, &mut points, &mut feats);
            }
        }
        if let Some(pad) = &self.pad {
            self.object_points(pad, &mut points, &mut feats);
        }
        let h = if holding { 1.0 } else { 0.0 };
        PointCloudObservation::new(points, feats, FEATURE_DIM, vec![h, h])
            .expect("generated geometry is finite")
    }

    pub fn target_center(&self) -> Vec3 {
        self.objects[self.target].center
    }

    /// Same scene moved rigidly by `offset`.
    pub fn translated(&self, offset: Vec3) -> TaskInstance {
        let shift = |c: Vec3| std::array::from_fn(|a| c[a] + offset[a]);
        let mut out = self.clone();
        out.spec.workspace_center = shift(out.spec.workspace_center);
        for o in &mut out.objects {
            o.center = shift(o.center);
        }
        if let Some(p) = &mut out.pad {
            p.center = shift(p.center);
        }
        out
    }

    /// Uniform choice among the objects; the chance baseline of a root
    /// policy that always lands on some object.
    pub fn random_object_action<R: Rng>(&self, rng: &mut R) -> AgentAction {
        let o = rng.gen_range(0..self.objects.len());
        AgentAction {
            translation: self.objects[o].center,
            rotation: [0; 3],
            gripper: 1,
        }
    }
}

fn distance(a: Vec3, b: Vec3) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Distance from the action to the current goal (target, or pad while holding).
    pub distance_to_goal: f64,
    /// Object within tolerance of the action, if any.
    pub selected_object: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub obs: PointCloudObservation,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    pub info: StepInfo,
}

/// A running episode: the immutable instance plus remaining horizon and grasp state.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    instance: TaskInstance,
    remaining: usize,
    holding: bool,
    done: bool,
}

impl Episode {
    pub fn new(instance: TaskInstance) -> Self {
        let remaining = instance.spec.horizon;
        Self {
            instance,
            remaining,
            holding: false,
            done: false,
        }
    }

    pub fn instance(&self) -> &TaskInstance {
        &self.instance
    }

    pub fn observe(&self) -> PointCloudObservation {
        self.instance.observe(self.holding)
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn step(&mut self, action: &AgentAction) -> Result<StepOutcome> {
        if self.done {
            return Err(QteError::Precondition("step on a finished episode".into()));
        }
        if action.translation.iter().any(|v| !v.is_finite()) {
            return Err(QteError::Precondition("non-finite action translation".into()));
        }
        let inst = &self.instance;
        let tol = inst.spec.tolerance();
        let selected_object = inst
            .objects
            .iter()
            .position(|o| distance(o.center, action.translation) <= tol);
        let (goal, success, grasped) = match (inst.spec.kind, self.holding) {
            (TaskKind::Reach, _) => {
                let d = distance(inst.target_center(), action.translation);
                (d, d <= tol, false)
            }
            (TaskKind::Stack, false) => {
                let d = distance(inst.target_center(), action.translation);
                (d, false, d <= tol && action.gripper == 1)
            }
            (TaskKind::Stack, true) => {
                let pad = inst.pad.as_ref().expect("stack task has a pad");
                let d = distance(pad.center, action.translation);
                (d, d <= tol && action.gripper == 0, false)
            }
        };
        if grasped {
            self.holding = true;
        }
        self.remaining -= 1;
        self.done = success || self.remaining == 0;
        Ok(StepOutcome {
            obs: self.observe(),
            reward: if success { inst.spec.reward_success } else { 0.0 },
            done: self.done,
            success,
            info: StepInfo {
                distance_to_goal: goal,
                selected_object,
            },
        })
    }
}

/// Something the agent can act in.
pub trait Environment {
    fn reset(&mut self, seed: u64) -> Result<PointCloudObservation>;
    fn step(&mut self, action: &AgentAction) -> Result<StepOutcome>;
}

/// Environment that draws a fresh instance of one scene spec on every reset.
#[derive(Debug, Clone)]
pub struct TaskEnv {
    spec: SceneSpec,
    episode: Option<Episode>,
}

impl TaskEnv {
    pub fn new(spec: SceneSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, episode: None })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn episode(&self) -> Option<&Episode> {
        self.episode.as_ref()
    }
}

impl Environment for TaskEnv {
    fn reset(&mut self, seed: u64) -> Result<PointCloudObservation> {
        let ep = Episode::new(generate(&self.spec, seed)?);
        let obs = ep.observe();
        self.episode = Some(ep);
        Ok(obs)
    }

    fn step(&mut self, action: &AgentAction) -> Result<StepOutcome> {
        self.episode
            .as_mut()
            .ok_or_else(|| QteError::Precondition("step before reset".into()))?
            .step(action)
    }
}

fn lerp(a: Vec3, b: Vec3, t: f64) -> Vec3 {
    std::array::from_fn(|i| a[i] + (b[i] - a[i]) * t)
}

/// Privileged expert: moves through waypoints from the workspace center to
/// the goal, toggling the gripper at grasp and release for the stack task.
pub fn scripted_expert(instance: &TaskInstance) -> Demo {
    let home = instance.spec.workspace_center;
    let target = instance.target_center();
    let r = instance.spec.reward_success;
    let free = instance.observe(false);
    let state = |obs: &PointCloudObservation, pos: Vec3, gripper: usize, reward: f64| DemoState {
        obs: obs.clone(),
        action: AgentAction {
            translation: pos,
            rotation: [0; 3],
            gripper,
        },
        reward,
    };
    let mut states = vec![state(&free, home, 0, 0.0)];
    match instance.spec.kind {
        TaskKind::Reach => {
            states.push(state(&free, lerp(home, target, 1.0 / 3.0), 0, 0.0));
            states.push(state(&free, lerp(home, target, 2.0 / 3.0), 0, 0.0));
            states.push(state(&free, target, 0, r));
        }
        TaskKind::Stack => {
            let held = instance.observe(true);
            let pad = instance.pad.as_ref().expect("stack task has a pad").center;
            states.push(state(&free, lerp(home, target, 0.5), 0, 0.0));
            states.push(state(&held, target, 1, 0.0));
            states.push(state(&held, lerp(target, pad, 0.5), 1, 0.0));
            states.push(state(&held, pad, 0, r));
        }
    }
    Demo { states }
}
