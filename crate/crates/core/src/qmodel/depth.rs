use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Gradients, Params};
use crate::error::{QteError, Result};
use crate::voxelgrid::{cell_center, VoxelGrid, VoxelIndex};

/// Neighbourhood offsets of the shared per-voxel encoder, `(di, dj, dk)` in
/// lexicographic order.
const NEIGHBOURS: usize = 27;

/// Shape of one depth's value network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QNetConfig {
    pub resolution: usize,
    pub feature_dim: usize,
    pub proprio_dim: usize,
    /// Width of the 3x3x3 neighbourhood encoder.
    pub conv_width: usize,
    /// Width of the proprio context embedding.
    pub context_width: usize,
    /// Width of the last hidden layer; this is also the bottleneck width.
    pub hidden_width: usize,
}

impl QNetConfig {
    /// Per-cell input channels: offset of the mean position from the cell
    /// center (3), features (M), occupancy (1).
    pub fn cell_channels(&self) -> usize {
        3 + self.feature_dim + 1
    }

    fn patch_width(&self) -> usize {
        NEIGHBOURS * self.cell_channels()
    }

    fn shapes(&self) -> [(&'static str, usize, usize); 8] {
        [
            ("conv_w", self.patch_width(), self.conv_width),
            ("conv_b", 1, self.conv_width),
            ("ctx_w", self.proprio_dim, self.context_width),
            ("ctx_b", 1, self.context_width),
            ("hid_w", self.conv_width + self.context_width, self.hidden_width),
            ("hid_b", 1, self.hidden_width),
            ("out_w", self.hidden_width, 1),
            ("out_b", 1, 1),
        ]
    }
}

/// Bottleneck features (last hidden activations) at one voxel of the final depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck(pub Vec<f64>);

/// Output of a forward pass over a whole grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QValues {
    /// One value per voxel, row-major.
    pub values: Vec<f64>,
    /// Bottleneck at the argmax voxel.
    pub bottleneck: Bottleneck,
}

/// Activations of one voxel, kept for backprop.
#[derive(Debug, Clone)]
struct VoxelActs {
    patch: Vec<f64>,
    a1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    h2: Vec<f64>,
    q: f64,
}

#[derive(Debug, Clone)]
struct Context {
    ac: Vec<f64>,
    g: Vec<f64>,
}

/// Value function `Q_n` for one coarse-to-fine depth: a weight-shared
/// per-voxel network over the voxel's 3x3x3 neighbourhood, joined with a
/// proprio context embedding, producing one scalar per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct QDepthModel {
    depth: usize,
    config: QNetConfig,
    params: Params,
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `out[c] = b[c] + sum_r x[r] * w[r, c]`, skipping zero inputs.
fn affine(x: &[f64], w: &[f64], b: &[f64], out: &mut Vec<f64>) {
    let cols = b.len();
    out.clear();
    out.extend_from_slice(b);
    for (r, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xv * wv;
        }
    }
}

impl QDepthModel {
    pub fn new<R: Rng>(depth: usize, config: QNetConfig, rng: &mut R) -> Result<Self> {
        if config.resolution < 2 || config.conv_width == 0 || config.hidden_width == 0 {
            return Err(QteError::Config(format!("invalid value network shape {config:?}")));
        }
        let mut params = Params::zeros(&config.shapes());
        params.init_uniform(rng);
        Ok(Self {
            depth,
            config,
            params,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn config(&self) -> &QNetConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn check_inputs(&self, grid: &VoxelGrid, proprio: &[f64]) -> Result<()> {
        let c = &self.config;
        if grid.spec().resolution() != c.resolution || grid.feature_dim() != c.feature_dim {
            return Err(QteError::Config(format!(
                "depth {} expects a {}^3 grid with {} features, got {}^3 with {}",
                self.depth,
                c.resolution,
                c.feature_dim,
                grid.spec().resolution(),
                grid.feature_dim()
            )));
        }
        if proprio.len() != c.proprio_dim {
            return Err(QteError::Config(format!(
                "depth {} expects {} proprio values, got {}",
                self.depth,
                c.proprio_dim,
                proprio.len()
            )));
        }
        Ok(())
    }

    fn context(&self, proprio: &[f64]) -> Context {
        let mut ac = Vec::new();
        affine(proprio, self.params.block("ctx_w"), self.params.block("ctx_b"), &mut ac);
        let g = ac.iter().map(|&v| relu(v)).collect();
        Context { ac, g }
    }

    /// Model input for one cell: mean-position offset from the cell center in
    /// cell units, features, occupancy. Empty cells encode as all zeros.
    fn encode_cell(grid: &VoxelGrid, l: usize, out: &mut [f64]) {
        if !grid.occupied_linear(l) {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let spec = grid.spec();
        let idx = VoxelIndex::from_linear(l, spec.resolution());
        let center = cell_center(spec, idx).expect("linear index in range");
        let pos = grid.position_linear(l);
        let cs = spec.cell_size();
        for a in 0..3 {
            out[a] = (pos[a] - center[a]) / cs;
        }
        let m = grid.feature_dim();
        out[3..3 + m].copy_from_slice(grid.features_linear(l));
        out[3 + m] = 1.0;
    }

    fn patch(&self, grid: &VoxelGrid, idx: VoxelIndex) -> Vec<f64> {
        let cc = self.config.cell_channels();
        let e = self.config.resolution as isize;
        let mut patch = vec![0.0; self.config.patch_width()];
        let mut n = 0;
        for di in -1isize..=1 {
            for dj in -1isize..=1 {
                for dk in -1isize..=1 {
                    let (i, j, k) = (idx.i as isize + di, idx.j as isize + dj, idx.k as isize + dk);
                    if (0..e).contains(&i) && (0..e).contains(&j) && (0..e).contains(&k) {
                        let l = ((i * e + j) * e + k) as usize;
                        Self::encode_cell(grid, l, &mut patch[n * cc..(n + 1) * cc]);
                    }
                    n += 1;
                }
            }
        }
        patch
    }

    fn voxel_forward(&self, patch: Vec<f64>, ctx: &Context) -> VoxelActs {
        let p = &self.params;
        let mut a1 = Vec::new();
        affine(&patch, p.block("conv_w"), p.block("conv_b"), &mut a1);
        let h1: Vec<f64> = a1.iter().map(|&v| relu(v)).collect();
        let mut joined = h1.clone();
        joined.extend_from_slice(&ctx.g);
        let mut a2 = Vec::new();
        affine(&joined, p.block("hid_w"), p.block("hid_b"), &mut a2);
        let h2: Vec<f64> = a2.iter().map(|&v| relu(v)).collect();
        let q = p.block("out_b")[0]
            + h2
                .iter()
                .zip(p.block("out_w"))
                .map(|(h, w)| h * w)
                .sum::<f64>();
        VoxelActs {
            patch,
            a1,
            h1,
            a2,
            h2,
            q,
        }
    }

    /// Cells whose neighbourhood contains at least one occupied cell. All
    /// other cells see an all-zero patch and share one output.
    fn active_cells(grid: &VoxelGrid) -> Vec<bool> {
        let e = grid.spec().resolution();
        let mut active = vec![false; e * e * e];
        for l in grid.occupied_cells() {
            let idx = VoxelIndex::from_linear(l, e);
            for i in idx.i.saturating_sub(1)..(idx.i + 2).min(e) {
                for j in idx.j.saturating_sub(1)..(idx.j + 2).min(e) {
                    for k in idx.k.saturating_sub(1)..(idx.k + 2).min(e) {
                        active[(i * e + j) * e + k] = true;
                    }
                }
            }
        }
        active
    }

    /// Forward pass over every voxel of `grid`.
    pub fn q_values(&self, grid: &VoxelGrid, proprio: &[f64]) -> Result<QValues> {
        self.check_inputs(grid, proprio)?;
        let ctx = self.context(proprio);
        let e = self.config.resolution;
        let background = self.voxel_forward(vec![0.0; self.config.patch_width()], &ctx);
        let active = Self::active_cells(grid);
        let mut values = vec![background.q; e * e * e];
        // (value, h2) of the first voxel holding the maximum
        let mut best: Option<(f64, Vec<f64>)> = None;
        for (l, v) in values.iter_mut().enumerate() {
            if active[l] {
                let acts = self.voxel_forward(self.patch(grid, VoxelIndex::from_linear(l, e)), &ctx);
                *v = acts.q;
                if best.as_ref().is_none_or(|b| acts.q > b.0) {
                    best = Some((acts.q, acts.h2));
                }
            } else if best.as_ref().is_none_or(|b| background.q > b.0) {
                best = Some((background.q, background.h2.clone()));
            }
        }
        let bottleneck = Bottleneck(best.map(|b| b.1).unwrap_or_default());
        Ok(QValues { values, bottleneck })
    }

    /// Dense reference forward pass that evaluates every voxel independently.
    pub fn q_values_dense(&self, grid: &VoxelGrid, proprio: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(grid, proprio)?;
        let ctx = self.context(proprio);
        let e = self.config.resolution;
        Ok((0..e * e * e)
            .map(|l| self.voxel_forward(self.patch(grid, VoxelIndex::from_linear(l, e)), &ctx).q)
            .collect())
    }

    /// Value and bottleneck of a single voxel.
    pub fn q_at(&self, grid: &VoxelGrid, proprio: &[f64], idx: VoxelIndex) -> Result<(f64, Bottleneck)> {
        self.check_inputs(grid, proprio)?;
        if !grid.spec().contains_index(idx) {
            return Err(QteError::Precondition(format!("action index {idx} out of bounds")));
        }
        let acts = self.voxel_forward(self.patch(grid, idx), &self.context(proprio));
        Ok((acts.q, Bottleneck(acts.h2)))
    }

    /// Squared TD error at `action` and its exact gradient w.r.t. every parameter.
    pub fn td_loss(
        &self,
        grid: &VoxelGrid,
        proprio: &[f64],
        action: VoxelIndex,
        target: &TdTarget,
    ) -> Result<(f64, Gradients)> {
        self.check_inputs(grid, proprio)?;
        if !grid.spec().contains_index(action) {
            return Err(QteError::Precondition(format!("action index {action} out of bounds")));
        }
        let ctx = self.context(proprio);
        let acts = self.voxel_forward(self.patch(grid, action), &ctx);
        let delta = acts.q - target.value();
        let loss = delta * delta;
        let grads = self.backward(&acts, &ctx, proprio, 2.0 * delta);
        Ok((loss, grads))
    }

    fn backward(&self, acts: &VoxelActs, ctx: &Context, proprio: &[f64], dq: f64) -> Gradients {
        let p = &self.params;
        let c = &self.config;
        let mut grads = p.zeros_like();
        let off = |name: &str| {
            p.blocks()
                .iter()
                .find(|b| b.name == name)
                .map(|b| b.offset)
                .expect("known block")
        };
        let g = &mut grads.0;

        // output layer
        let out_w = p.block("out_w");
        let o = off("out_w");
        for (r, h) in acts.h2.iter().enumerate() {
            g[o + r] = dq * h;
        }
        g[off("out_b")] = dq;
        let da2: Vec<f64> = acts
            .a2
            .iter()
            .zip(out_w)
            .map(|(&a, &w)| if a > 0.0 { dq * w } else { 0.0 })
            .collect();

        // hidden layer over [h1; ctx]
        let h2w = c.hidden_width;
        let hid_w = p.block("hid_w");
        let o = off("hid_w");
        let joined = acts.h1.iter().chain(ctx.g.iter());
        let mut djoined = vec![0.0; c.conv_width + c.context_width];
        for (r, &x) in joined.enumerate() {
            let row = &hid_w[r * h2w..(r + 1) * h2w];
            let mut acc = 0.0;
            for (col, &d) in da2.iter().enumerate() {
                g[o + r * h2w + col] = x * d;
                acc += row[col] * d;
            }
            djoined[r] = acc;
        }
        let o = off("hid_b");
        g[o..o + h2w].copy_from_slice(&da2);

        // neighbourhood encoder
        let da1: Vec<f64> = acts
            .a1
            .iter()
            .zip(&djoined[..c.conv_width])
            .map(|(&a, &d)| if a > 0.0 { d } else { 0.0 })
            .collect();
        let cw = c.conv_width;
        let o = off("conv_w");
        for (r, &x) in acts.patch.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (col, &d) in da1.iter().enumerate() {
                g[o + r * cw + col] = x * d;
            }
        }
        let o = off("conv_b");
        g[o..o + cw].copy_from_slice(&da1);

        // proprio context
        let dac: Vec<f64> = ctx
            .ac
            .iter()
            .zip(&djoined[c.conv_width..])
            .map(|(&a, &d)| if a > 0.0 { d } else { 0.0 })
            .collect();
        let xw = c.context_width;
        let o = off("ctx_w");
        for (r, &x) in proprio.iter().enumerate() {
            for (col, &d) in dac.iter().enumerate() {
                g[o + r * xw + col] = x * d;
            }
        }
        let o = off("ctx_b");
        g[o..o + xw].copy_from_slice(&dac);
        grads
    }
}

/// TD regression target `r + (1 - terminal) * discount * next_value`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdTarget {
    pub reward: f64,
    pub discount: f64,
    pub terminal: bool,
    pub next_value: f64,
}

impl TdTarget {
    pub fn value(&self) -> f64 {
        if self.terminal {
            self.reward
        } else {
            self.reward + self.discount * self.next_value
        }
    }
}
