use rand::Rng;
use serde::{Deserialize, Serialize};

use super::depth::Bottleneck;
use super::params::{Gradients, Params};
use crate::error::{QteError, Result};

/// Number of output heads: three rotation axes and the gripper.
pub const HEADS: usize = 4;
pub const GRIPPER_BINS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub bottleneck_width: usize,
    pub hidden_width: usize,
    /// Rotation bin width in degrees.
    pub rotation_bin_deg: f64,
}

impl HeadConfig {
    /// `ceil(360 / bin width)` bins per rotation axis.
    pub fn rotation_bins(&self) -> usize {
        (360.0 / self.rotation_bin_deg).ceil() as usize
    }

    pub fn head_sizes(&self) -> [usize; HEADS] {
        let r = self.rotation_bins();
        [r, r, r, GRIPPER_BINS]
    }

    fn outputs(&self) -> usize {
        self.head_sizes().iter().sum()
    }
}

/// Per-bin values for alpha, beta, gamma and the gripper.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadValues(pub [Vec<f64>; HEADS]);

impl HeadValues {
    /// Argmax per head, ties to the lowest bin.
    pub fn argmax(&self) -> [usize; HEADS] {
        let mut out = [0; HEADS];
        for (h, vals) in self.0.iter().enumerate() {
            let mut best = 0;
            for (b, &v) in vals.iter().enumerate() {
                if v > vals[best] {
                    best = b;
                }
            }
            out[h] = best;
        }
        out
    }

    pub fn at(&self, bins: [usize; HEADS]) -> [f64; HEADS] {
        std::array::from_fn(|h| self.0[h][bins[h]])
    }
}

/// MLP branch from the final-depth bottleneck to rotation and gripper values.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    config: HeadConfig,
    params: Params,
}

struct HeadActs {
    a: Vec<f64>,
    h: Vec<f64>,
    out: Vec<f64>,
}

impl HeadModel {
    pub fn new<R: Rng>(config: HeadConfig, rng: &mut R) -> Result<Self> {
        if !(config.rotation_bin_deg > 0.0) || config.hidden_width == 0 {
            return Err(QteError::Config(format!("invalid head shape {config:?}")));
        }
        let mut params = Params::zeros(&[
            ("h_w", config.bottleneck_width, config.hidden_width),
            ("h_b", 1, config.hidden_width),
            ("out_w", config.hidden_width, config.outputs()),
            ("out_b", 1, config.outputs()),
        ]);
        params.init_uniform(rng);
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn forward(&self, bottleneck: &Bottleneck) -> Result<HeadActs> {
        let x = &bottleneck.0;
        if x.len() != self.config.bottleneck_width {
            return Err(QteError::Config(format!(
                "head expects bottleneck width {}, got {}",
                self.config.bottleneck_width,
                x.len()
            )));
        }
        let p = &self.params;
        let hw = self.config.hidden_width;
        let mut a = p.block("h_b").to_vec();
        let w = p.block("h_w");
        for (r, &xv) in x.iter().enumerate() {
            for (c, av) in a.iter_mut().enumerate() {
                *av += xv * w[r * hw + c];
            }
        }
        let h: Vec<f64> = a.iter().map(|&v| v.max(0.0)).collect();
        let no = self.config.outputs();
        let mut out = p.block("out_b").to_vec();
        let w = p.block("out_w");
        for (r, &hv) in h.iter().enumerate() {
            for (c, ov) in out.iter_mut().enumerate() {
                *ov += hv * w[r * no + c];
            }
        }
        Ok(HeadActs { a, h, out })
    }

    fn split(&self, out: &[f64]) -> HeadValues {
        let sizes = self.config.head_sizes();
        let mut start = 0;
        HeadValues(std::array::from_fn(|h| {
            let v = out[start..start + sizes[h]].to_vec();
            start += sizes[h];
            v
        }))
    }

    pub fn heads_q(&self, bottleneck: &Bottleneck) -> Result<HeadValues> {
        Ok(self.split(&self.forward(bottleneck)?.out))
    }

    /// Sum over unmasked heads of the squared error between the value of the
    /// chosen bin and its TD target, with exact gradients. The bottleneck is
    /// treated as a constant input.
    pub fn head_loss(
        &self,
        bottleneck: &Bottleneck,
        bins: [usize; HEADS],
        targets: [f64; HEADS],
        mask: [bool; HEADS],
    ) -> Result<(f64, Gradients)> {
        let sizes = self.config.head_sizes();
        for h in 0..HEADS {
            if bins[h] >= sizes[h] {
                return Err(QteError::Precondition(format!(
                    "bin {} out of range for head {h} of size {}",
                    bins[h], sizes[h]
                )));
            }
        }
        let acts = self.forward(bottleneck)?;
        let no = self.config.outputs();
        let mut dout = vec![0.0; no];
        let mut loss = 0.0;
        let mut start = 0;
        for h in 0..HEADS {
            if mask[h] {
                let o = start + bins[h];
                let delta = acts.out[o] - targets[h];
                loss += delta * delta;
                dout[o] = 2.0 * delta;
            }
            start += sizes[h];
        }

        let p = &self.params;
        let hw = self.config.hidden_width;
        let mut grads = p.zeros_like();
        let offset = |name: &str| p.blocks().iter().find(|b| b.name == name).expect("block").offset;
        let (o_hw, o_hb, o_ow, o_ob) = (offset("h_w"), offset("h_b"), offset("out_w"), offset("out_b"));
        let g = &mut grads.0;
        let w_out = p.block("out_w");
        let mut dh = vec![0.0; hw];
        for (r, &hv) in acts.h.iter().enumerate() {
            for (c, &d) in dout.iter().enumerate() {
                if d != 0.0 {
                    g[o_ow + r * no + c] = hv * d;
                    dh[r] += w_out[r * no + c] * d;
                }
            }
        }
        g[o_ob..o_ob + no].copy_from_slice(&dout);
        let da: Vec<f64> = acts
            .a
            .iter()
            .zip(&dh)
            .map(|(&a, &d)| if a > 0.0 { d } else { 0.0 })
            .collect();
        for (r, &xv) in bottleneck.0.iter().enumerate() {
            for (c, &d) in da.iter().enumerate() {
                g[o_hw + r * hw + c] = xv * d;
            }
        }
        g[o_hb..o_hb + hw].copy_from_slice(&da);
        Ok((loss, grads))
    }
}
