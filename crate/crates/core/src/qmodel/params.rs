use rand::Rng;

use crate::error::{QteError, Result};

/// A named `rows x cols` slice of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter storage shared by every network in the crate. Weight
/// matrices are stored row-major as `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    blocks: Vec<ParamBlock>,
    data: Vec<f64>,
}

impl Params {
    pub(crate) fn zeros(shapes: &[(&'static str, usize, usize)]) -> Self {
        let mut offset = 0;
        let blocks = shapes
            .iter()
            .map(|&(name, rows, cols)| {
                let b = ParamBlock {
                    name,
                    rows,
                    cols,
                    offset,
                };
                offset += rows * cols;
                b
            })
            .collect();
        Self {
            blocks,
            data: vec![0.0; offset],
        }
    }

    /// Fills each weight block and the bias block that follows it with
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`. Blocks come in (weight, bias) pairs.
    pub(crate) fn init_uniform<R: Rng>(&mut self, rng: &mut R) {
        for pair in self.blocks.chunks(2) {
            let fan_in = pair[0].rows.max(1);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for b in pair {
                for v in &mut self.data[b.range()] {
                    *v = rng.gen_range(-bound..=bound);
                }
            }
        }
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> &[f64] {
        let b = self.find(name);
        &self.data[b.range()]
    }

    pub fn block_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self.find(name).range();
        &mut self.data[r]
    }

    fn find(&self, name: &str) -> &ParamBlock {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .unwrap_or_else(|| panic!("no parameter block named {name}"))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        self.blocks == other.blocks
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn zeros_like(&self) -> Gradients {
        Gradients(vec![0.0; self.data.len()])
    }
}

/// Gradient vector laid out exactly like the [`Params`] it was computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Gradients(vec![0.0; len])
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Heavy-ball momentum; 0 gives plain SGD.
    pub momentum: f64,
    /// Rescale gradients whose L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.0,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<f64>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(params: &Params) -> Self {
        Self {
            velocity: vec![0.0; params.len()],
            steps: 0,
        }
    }
}

/// One optimizer step. Non-finite gradients leave the parameters untouched.
pub fn apply_update(
    params: &mut Params,
    grads: &Gradients,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if grads.0.len() != params.len() || state.velocity.len() != params.len() {
        return Err(QteError::Config(format!(
            "gradient length {} does not match {} parameters",
            grads.0.len(),
            params.len()
        )));
    }
    if grads.0.iter().any(|g| !g.is_finite()) {
        return Err(QteError::Training("non-finite gradient".into()));
    }
    let scale = match cfg.clip_norm {
        Some(c) => {
            let n = grads.norm();
            if n > c {
                c / n
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let lr = cfg.learning_rate;
    if cfg.momentum == 0.0 {
        for (p, g) in params.data.iter_mut().zip(&grads.0) {
            *p -= lr * (g * scale);
        }
    } else {
        for ((p, g), v) in params
            .data
            .iter_mut()
            .zip(&grads.0)
            .zip(state.velocity.iter_mut())
        {
            *v = cfg.momentum * *v + g * scale;
            *p -= lr * *v;
        }
    }
    state.steps += 1;
    Ok(())
}

/// `target <- tau * online + (1 - tau) * target`, element-wise.
pub fn soft_update(target: &mut Params, online: &Params, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(QteError::Precondition(format!("tau must be in [0, 1], got {tau}")));
    }
    if !target.same_shape(online) {
        return Err(QteError::Config("soft update between differently shaped models".into()));
    }
    for (t, o) in target.data.iter_mut().zip(&online.data) {
        *t = tau * o + (1.0 - tau) * *t;
    }
    Ok(())
}
