//! Argmax extraction, top-k selection and recursive Q-attention tree expansion.
//!
//! Ordering is deterministic everywhere: values descending, then lowest
//! row-major linear index. When two branches accumulate the same value, the
//! branch whose root ranked higher in the top-k list wins.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{QteError, Result};
use crate::par::ExecPolicy;
use crate::qmodel::ModelSet;
use crate::voxelgrid::{cell_center, child_spec, voxelize, GridSpec, PointCloudObservation, Vec3, VoxelIndex};

/// Anything that yields one value per voxel of a depth's grid.
pub trait QAttention: Sync {
    fn depth_count(&self) -> usize;

    fn evaluate(&self, depth: usize, obs: &PointCloudObservation, spec: &GridSpec) -> Result<Vec<f64>>;
}

impl QAttention for ModelSet {
    fn depth_count(&self) -> usize {
        self.depths.len()
    }

    fn evaluate(&self, depth: usize, obs: &PointCloudObservation, spec: &GridSpec) -> Result<Vec<f64>> {
        let model = self
            .depths
            .get(depth)
            .ok_or_else(|| QteError::Config(format!("no model for depth {depth}")))?;
        let grid = voxelize(obs, spec);
        Ok(model.q_values(&grid, obs.proprio())?.values)
    }
}

/// Adapter turning a closure over `(depth, grid spec)` into a [`QAttention`];
/// the observation is ignored.
pub struct FnAttention<F> {
    depths: usize,
    f: F,
}

impl<F> FnAttention<F>
where
    F: Fn(usize, &GridSpec) -> Vec<f64> + Sync,
{
    pub fn new(depths: usize, f: F) -> Self {
        Self { depths, f }
    }
}

impl<F> QAttention for FnAttention<F>
where
    F: Fn(usize, &GridSpec) -> Vec<f64> + Sync,
{
    fn depth_count(&self) -> usize {
        self.depths
    }

    fn evaluate(&self, depth: usize, _obs: &PointCloudObservation, spec: &GridSpec) -> Result<Vec<f64>> {
        Ok((self.f)(depth, spec))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionConfig {
    /// Branches expanded per depth.
    pub k: usize,
    /// Grid resolution of every depth; the final depth is `len - 1`.
    pub resolutions: Vec<usize>,
    pub zoom_margin: f64,
    /// Call the expansion afresh at every depth instead of reusing the best
    /// path of the root expansion.
    pub reexpand_per_depth: bool,
    /// Branch fan-out policy.
    pub exec: ExecPolicy,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            k: 10,
            resolutions: vec![8, 8],
            zoom_margin: 1.0,
            reexpand_per_depth: false,
            exec: ExecPolicy::Sequential,
        }
    }
}

impl ExpansionConfig {
    pub fn final_depth(&self) -> usize {
        self.resolutions.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(QteError::Config("k must be at least 1".into()));
        }
        if self.resolutions.is_empty() {
            return Err(QteError::Config("at least one depth is required".into()));
        }
        if !(self.zoom_margin >= 1.0) {
            return Err(QteError::Config(format!("zoom margin must be >= 1, got {}", self.zoom_margin)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionResult {
    /// Accumulated value of the best branch.
    pub value: f64,
    /// Selected voxel at the entry depth.
    pub root_index: VoxelIndex,
    /// Best path from the entry depth to the final depth.
    pub path: Vec<VoxelIndex>,
    /// Raw value of each voxel on `path` at its own depth.
    pub path_values: Vec<f64>,
}

/// One visited node of the expansion tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    pub index: VoxelIndex,
    /// Value of this voxel at its own depth.
    pub q: f64,
    /// `(q + child value) / 2`, or `q` at the final depth.
    pub accumulated: f64,
}

/// Writes trace records as `id parent depth i j k q accumulated` lines; a
/// root's parent is written as `-`.
pub fn write_trace<W: Write>(records: &[TraceRecord], mut w: W) -> std::io::Result<()> {
    for r in records {
        let parent = r.parent.map_or_else(|| "-".to_string(), |p| p.to_string());
        writeln!(
            w,
            "{} {} {} {} {} {} {} {}",
            r.id, parent, r.depth, r.index.i, r.index.j, r.index.k, r.q, r.accumulated
        )?;
    }
    Ok(())
}

fn resolution_of(len: usize) -> Result<usize> {
    let e = (len as f64).cbrt().round() as usize;
    if e == 0 || e * e * e != len {
        return Err(QteError::Config(format!("{len} values do not form a cubic grid")));
    }
    Ok(e)
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(QteError::Precondition("empty value array".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(QteError::Evaluation("NaN in Q-values".into()));
    }
    Ok(())
}

/// Index of the largest value; ties go to the lowest linear index.
pub fn argmax3d(values: &[f64], resolution: usize) -> Result<VoxelIndex> {
    check_finite(values)?;
    if values.len() != resolution.pow(3) {
        return Err(QteError::Config(format!(
            "{} values for a {resolution}^3 grid",
            values.len()
        )));
    }
    let mut best = 0;
    for (l, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = l;
        }
    }
    Ok(VoxelIndex::from_linear(best, resolution))
}

fn rank_order(values: &[f64], a: usize, b: usize) -> Ordering {
    values[b].total_cmp(&values[a]).then(a.cmp(&b))
}

/// The `k` best voxels, value descending then lowest linear index.
pub fn topk_voxels(values: &[f64], k: usize) -> Result<Vec<(f64, VoxelIndex)>> {
    check_finite(values)?;
    let e = resolution_of(values.len())?;
    if k == 0 || k > values.len() {
        return Err(QteError::Config(format!(
            "k = {k} outside 1..={}",
            values.len()
        )));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, |&a, &b| rank_order(values, a, b));
        order.truncate(k);
    }
    order.sort_unstable_by(|&a, &b| rank_order(values, a, b));
    Ok(order
        .into_iter()
        .map(|l| (values[l], VoxelIndex::from_linear(l, e)))
        .collect())
}

struct Expander<'a, A: QAttention + ?Sized> {
    models: &'a A,
    obs: &'a PointCloudObservation,
    cfg: &'a ExpansionConfig,
}

impl<A: QAttention + ?Sized> Expander<'_, A> {
    fn values(&self, depth: usize, spec: &GridSpec) -> Result<Vec<f64>> {
        let v = self.models.evaluate(depth, self.obs, spec)?;
        if v.len() != spec.cell_count() {
            return Err(QteError::Config(format!(
                "depth {depth} produced {} values for {} cells",
                v.len(),
                spec.cell_count()
            )));
        }
        check_finite(&v)?;
        Ok(v)
    }

    fn child(&self, depth: usize, spec: &GridSpec, idx: VoxelIndex) -> Result<GridSpec> {
        child_spec(spec, idx, self.cfg.zoom_margin, self.cfg.resolutions[depth + 1])
    }

    fn expand(&self, depth: usize, spec: &GridSpec) -> Result<ExpansionResult> {
        let values = self.values(depth, spec)?;
        if depth == self.cfg.final_depth() {
            let idx = argmax3d(&values, spec.resolution())?;
            let q = values[idx.linear(spec.resolution())];
            return Ok(ExpansionResult {
                value: q,
                root_index: idx,
                path: vec![idx],
                path_values: vec![q],
            });
        }
        let k = self.cfg.k.min(values.len());
        let top = topk_voxels(&values, k)?;
        let branches: Vec<Result<_>> = self.cfg.exec.map(&top, |&(q, idx)| {
            let child = self.child(depth, spec, idx)?;
            let sub = self.expand(depth + 1, &child)?;
            Ok(((q + sub.value) / 2.0, q, idx, sub))
        });
        let mut best: Option<(f64, f64, VoxelIndex, ExpansionResult)> = None;
        for b in branches {
            let b = b?;
            if best.as_ref().is_none_or(|cur| b.0 > cur.0) {
                best = Some(b);
            }
        }
        let (value, q, idx, sub) = best.expect("k >= 1");
        let mut path = Vec::with_capacity(sub.path.len() + 1);
        path.push(idx);
        path.extend(sub.path);
        let mut path_values = Vec::with_capacity(path.len());
        path_values.push(q);
        path_values.extend(sub.path_values);
        Ok(ExpansionResult {
            value,
            root_index: idx,
            path,
            path_values,
        })
    }

    fn expand_traced(
        &self,
        depth: usize,
        spec: &GridSpec,
        parent: Option<usize>,
        trace: &mut Vec<TraceRecord>,
    ) -> Result<ExpansionResult> {
        let values = self.values(depth, spec)?;
        if depth == self.cfg.final_depth() {
            let idx = argmax3d(&values, spec.resolution())?;
            let q = values[idx.linear(spec.resolution())];
            trace.push(TraceRecord {
                id: trace.len(),
                parent,
                depth,
                index: idx,
                q,
                accumulated: q,
            });
            return Ok(ExpansionResult {
                value: q,
                root_index: idx,
                path: vec![idx],
                path_values: vec![q],
            });
        }
        let top = topk_voxels(&values, self.cfg.k.min(values.len()))?;
        let mut best: Option<ExpansionResult> = None;
        for (q, idx) in top {
            let id = trace.len();
            trace.push(TraceRecord {
                id,
                parent,
                depth,
                index: idx,
                q,
                accumulated: f64::NAN,
            });
            let child = self.child(depth, spec, idx)?;
            let sub = self.expand_traced(depth + 1, &child, Some(id), trace)?;
            let acc = (q + sub.value) / 2.0;
            trace[id].accumulated = acc;
            if best.as_ref().is_none_or(|b| acc > b.value) {
                let mut path = vec![idx];
                path.extend(sub.path);
                let mut path_values = vec![q];
                path_values.extend(sub.path_values);
                best = Some(ExpansionResult {
                    value: acc,
                    root_index: idx,
                    path,
                    path_values,
                });
            }
        }
        Ok(best.expect("k >= 1"))
    }
}

fn check_depth<A: QAttention + ?Sized>(models: &A, depth: usize, cfg: &ExpansionConfig) -> Result<()> {
    cfg.validate()?;
    if models.depth_count() != cfg.resolutions.len() {
        return Err(QteError::Config(format!(
            "{} value functions for {} configured depths",
            models.depth_count(),
            cfg.resolutions.len()
        )));
    }
    if depth > cfg.final_depth() {
        return Err(QteError::Precondition(format!(
            "depth {depth} beyond final depth {}",
            cfg.final_depth()
        )));
    }
    Ok(())
}

/// Expands the top-`k` voxels at `depth` recursively down to the final
/// depth, scoring each branch as `(q + child value) / 2`.
pub fn qte<A: QAttention + ?Sized>(
    models: &A,
    depth: usize,
    obs: &PointCloudObservation,
    spec: &GridSpec,
    cfg: &ExpansionConfig,
) -> Result<ExpansionResult> {
    check_depth(models, depth, cfg)?;
    Expander { models, obs, cfg }.expand(depth, spec)
}

/// Sequential [`qte`] that also records every visited node.
pub fn qte_traced<A: QAttention + ?Sized>(
    models: &A,
    depth: usize,
    obs: &PointCloudObservation,
    spec: &GridSpec,
    cfg: &ExpansionConfig,
) -> Result<(ExpansionResult, Vec<TraceRecord>)> {
    check_depth(models, depth, cfg)?;
    let mut trace = Vec::new();
    let r = Expander { models, obs, cfg }.expand_traced(depth, spec, None, &mut trace)?;
    Ok((r, trace))
}

/// Per-depth selection for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Selected voxel at every depth.
    pub coords: Vec<VoxelIndex>,
    /// Grid used at every depth.
    pub specs: Vec<GridSpec>,
    /// Raw value of the selected voxel at every depth.
    pub values: Vec<f64>,
    /// Root score: accumulated expansion value, or the root max without expansion.
    pub root_value: f64,
    /// Center of the final selected cell, the continuous translation.
    pub translation: Vec3,
}

/// Walks depths `0..=N` from `root_spec`, selecting one voxel per depth by
/// expansion or by plain argmax and re-centering on it.
pub fn select_coords<A: QAttention + ?Sized>(
    models: &A,
    obs: &PointCloudObservation,
    root_spec: &GridSpec,
    cfg: &ExpansionConfig,
    use_expansion: bool,
) -> Result<Selection> {
    select_coords_from(models, obs, root_spec, cfg, use_expansion, None)
}

/// [`select_coords`] with an optional externally chosen root voxel, as used
/// for exploration.
pub fn select_coords_from<A: QAttention + ?Sized>(
    models: &A,
    obs: &PointCloudObservation,
    root_spec: &GridSpec,
    cfg: &ExpansionConfig,
    use_expansion: bool,
    forced_root: Option<VoxelIndex>,
) -> Result<Selection> {
    check_depth(models, 0, cfg)?;
    if root_spec.resolution() != cfg.resolutions[0] {
        return Err(QteError::Config(format!(
            "root grid resolution {} differs from configured {}",
            root_spec.resolution(),
            cfg.resolutions[0]
        )));
    }
    let ex = Expander { models, obs, cfg };
    let last = cfg.final_depth();
    let mut coords = Vec::with_capacity(last + 1);
    let mut specs = Vec::with_capacity(last + 1);
    let mut values = Vec::with_capacity(last + 1);
    let mut root_value = f64::NAN;
    let mut spec = *root_spec;
    let mut depth = 0;

    if let Some(root) = forced_root {
        if !spec.contains_index(root) {
            return Err(QteError::Precondition(format!("forced root {root} out of bounds")));
        }
        let v = ex.values(0, &spec)?;
        let q = v[root.linear(spec.resolution())];
        coords.push(root);
        specs.push(spec);
        values.push(q);
        root_value = q;
        if last > 0 {
            spec = ex.child(0, &spec, root)?;
        }
        depth = 1;
    }

    while depth <= last {
        if use_expansion {
            let r = ex.expand(depth, &spec)?;
            if depth == 0 {
                root_value = r.value;
            }
            if cfg.reexpand_per_depth {
                coords.push(r.root_index);
                specs.push(spec);
                values.push(r.path_values[0]);
                if depth < last {
                    spec = ex.child(depth, &spec, r.root_index)?;
                }
                depth += 1;
            } else {
                for (n, (&idx, &q)) in r.path.iter().zip(&r.path_values).enumerate() {
                    coords.push(idx);
                    specs.push(spec);
                    values.push(q);
                    if depth + n < last {
                        spec = ex.child(depth + n, &spec, idx)?;
                    }
                }
                depth = last + 1;
            }
        } else {
            let v = ex.values(depth, &spec)?;
            let idx = argmax3d(&v, spec.resolution())?;
            let q = v[idx.linear(spec.resolution())];
            if depth == 0 {
                root_value = q;
            }
            coords.push(idx);
            specs.push(spec);
            values.push(q);
            if depth < last {
                spec = ex.child(depth, &spec, idx)?;
            }
            depth += 1;
        }
    }

    let final_spec = specs[last];
    let translation = cell_center(&final_spec, coords[last])?;
    Ok(Selection {
        coords,
        specs,
        values,
        root_value,
        translation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn empty_obs() -> PointCloudObservation {
        PointCloudObservation::new(vec![], vec![], 1, vec![]).unwrap()
    }

    /// Deterministic pseudo-random values keyed on depth and grid center.
    fn hashed_values(seed: u64, depth: usize, spec: &GridSpec) -> Vec<f64> {
        let mut h = seed ^ (depth as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        for c in spec.center() {
            h = (h ^ c.to_bits()).wrapping_mul(0x100_0000_01B3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        (0..spec.cell_count()).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn cfg(k: usize, res: Vec<usize>) -> ExpansionConfig {
        ExpansionConfig {
            k,
            resolutions: res,
            ..Default::default()
        }
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax3d(&[0.5; 64], 4).unwrap(), VoxelIndex::new(0, 0, 0));
        let mut v = vec![0.0; 64];
        v[VoxelIndex::new(3, 1, 2).linear(4)] = 1.0;
        assert_eq!(argmax3d(&v, 4).unwrap(), VoxelIndex::new(3, 1, 2));
        v[5] = f64::NAN;
        assert!(matches!(argmax3d(&v, 4), Err(QteError::Evaluation(_))));
        assert!(argmax3d(&[], 0).is_err());
    }

    #[test]
    fn argmax_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let e = rng.gen_range(2..7);
            // coarse values force frequent ties
            let v: Vec<f64> = (0..e * e * e).map(|_| rng.gen_range(0..5) as f64).collect();
            let mut best = 0;
            for l in 1..v.len() {
                if v[l] > v[best] {
                    best = l;
                }
            }
            assert_eq!(argmax3d(&v, e).unwrap(), VoxelIndex::from_linear(best, e));
        }
    }

    #[test]
    fn topk_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let e = rng.gen_range(2..6);
            let v: Vec<f64> = (0..e * e * e).map(|_| rng.gen_range(0..6) as f64).collect();
            let mut sorted: Vec<(f64, usize)> = v.iter().copied().zip(0..).collect();
            sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            for k in [1, 5.min(v.len()), v.len()] {
                let got = topk_voxels(&v, k).unwrap();
                let want: Vec<(f64, VoxelIndex)> = sorted[..k]
                    .iter()
                    .map(|&(x, l)| (x, VoxelIndex::from_linear(l, e)))
                    .collect();
                assert_eq!(got, want);
            }
            assert_eq!(topk_voxels(&v, 1).unwrap()[0].1, argmax3d(&v, e).unwrap());
        }
    }

    #[test]
    fn topk_rejects_bad_k() {
        let v = vec![0.0; 8];
        assert!(matches!(topk_voxels(&v, 0), Err(QteError::Config(_))));
        assert!(matches!(topk_voxels(&v, 9), Err(QteError::Config(_))));
    }

    /// Depth 0 has two candidates A (0.9) and B (0.5); A's child peaks at 0.1
    /// and B's at 0.8.
    fn reversal_fixture() -> (FnAttention<impl Fn(usize, &GridSpec) -> Vec<f64> + Sync>, GridSpec) {
        let root = GridSpec::new(2, [0.0; 3], 2.0).unwrap();
        let a = VoxelIndex::new(0, 0, 0);
        let b = VoxelIndex::new(1, 1, 1);
        let a_center = cell_center(&root, a).unwrap();
        let att = FnAttention::new(2, move |depth, spec: &GridSpec| {
            let mut v = vec![-1e9; 8];
            if depth == 0 {
                v[a.linear(2)] = 0.9;
                v[b.linear(2)] = 0.5;
            } else if spec.center() == a_center {
                v[3] = 0.1;
            } else {
                v[6] = 0.8;
            }
            v
        });
        (att, root)
    }

    #[test]
    fn coarse_ambiguity_reversal() {
        let (att, root) = reversal_fixture();
        let obs = empty_obs();
        let r1 = qte(&att, 0, &obs, &root, &cfg(1, vec![2, 2])).unwrap();
        assert_eq!(r1.root_index, VoxelIndex::new(0, 0, 0));
        assert!((r1.value - 0.5).abs() < 1e-15);
        let r2 = qte(&att, 0, &obs, &root, &cfg(2, vec![2, 2])).unwrap();
        assert_eq!(r2.root_index, VoxelIndex::new(1, 1, 1));
        assert!((r2.value - 0.65).abs() < 1e-15);
        assert_eq!(r2.path, vec![VoxelIndex::new(1, 1, 1), VoxelIndex::from_linear(6, 2)]);
        assert_eq!(r2.path_values, vec![0.5, 0.8]);
    }

    #[test]
    fn k1_follows_argmax_descent() {
        let obs = empty_obs();
        for seed in 0..100 {
            let att = FnAttention::new(3, move |d, s: &GridSpec| hashed_values(seed, d, s));
            let root = GridSpec::new(4, [0.0; 3], 1.0).unwrap();
            let c = cfg(1, vec![4, 3, 4]);
            let plain = select_coords(&att, &obs, &root, &c, false).unwrap();
            let expanded = select_coords(&att, &obs, &root, &c, true).unwrap();
            assert_eq!(plain.coords, expanded.coords);
            assert_eq!(plain.translation, expanded.translation);
            assert_eq!(plain.values, expanded.values);
        }
    }

    /// Literal nested accumulation over every root x child path.
    fn enumerate_two_depths(att: &impl QAttention, root: &GridSpec, res1: usize) -> (f64, VoxelIndex) {
        let obs = empty_obs();
        let v0 = att.evaluate(0, &obs, root).unwrap();
        let mut best = (f64::NEG_INFINITY, VoxelIndex::new(0, 0, 0));
        for (l0, &q0) in v0.iter().enumerate() {
            let idx = VoxelIndex::from_linear(l0, root.resolution());
            let child = child_spec(root, idx, 1.0, res1).unwrap();
            for &q1 in &att.evaluate(1, &obs, &child).unwrap() {
                let acc = (q0 + q1) / 2.0;
                if acc > best.0 {
                    best = (acc, idx);
                }
            }
        }
        best
    }

    #[test]
    fn full_width_equals_exhaustive_enumeration() {
        let obs = empty_obs();
        for seed in 0..50 {
            let att = FnAttention::new(2, move |d, s: &GridSpec| hashed_values(seed, d, s));
            let root = GridSpec::new(2, [0.0; 3], 1.0).unwrap();
            let r = qte(&att, 0, &obs, &root, &cfg(8, vec![2, 2])).unwrap();
            let (value, idx) = enumerate_two_depths(&att, &root, 2);
            assert_eq!(r.value, value);
            assert_eq!(r.root_index, idx);
        }
    }

    #[test]
    fn value_is_monotone_in_k() {
        let obs = empty_obs();
        for seed in 0..30 {
            let att = FnAttention::new(3, move |d, s: &GridSpec| hashed_values(seed, d, s));
            let root = GridSpec::new(3, [0.0; 3], 1.0).unwrap();
            let mut prev = f64::NEG_INFINITY;
            for k in 1..=27 {
                let v = qte(&att, 0, &obs, &root, &cfg(k, vec![3, 2, 2])).unwrap().value;
                assert!(v >= prev);
                prev = v;
            }
        }
    }

    #[test]
    fn selection_is_affine_invariant() {
        let obs = empty_obs();
        for seed in 0..40 {
            let root = GridSpec::new(3, [0.0; 3], 1.0).unwrap();
            let base = FnAttention::new(2, move |d, s: &GridSpec| hashed_values(seed, d, s));
            let shifted = FnAttention::new(2, move |d, s: &GridSpec| {
                hashed_values(seed, d, s).into_iter().map(|v| 3.0 * v + 0.25).collect()
            });
            let c = cfg(5, vec![3, 3]);
            let a = qte(&base, 0, &obs, &root, &c).unwrap();
            let b = qte(&shifted, 0, &obs, &root, &c).unwrap();
            assert_eq!(a.root_index, b.root_index);
            assert_eq!(a.path, b.path);
        }
    }

    #[test]
    fn parallel_branches_match_sequential() {
        let obs = empty_obs();
        for seed in 0..20 {
            let att = FnAttention::new(3, move |d, s: &GridSpec| hashed_values(seed, d, s));
            let root = GridSpec::new(4, [0.0; 3], 1.0).unwrap();
            let mut c = cfg(6, vec![4, 3, 3]);
            let seq = qte(&att, 0, &obs, &root, &c).unwrap();
            c.exec = ExecPolicy::Parallel;
            assert_eq!(seq, qte(&att, 0, &obs, &root, &c).unwrap());
        }
    }

    #[test]
    fn equal_branches_prefer_higher_rank() {
        // every child peaks at the same value, so the best root by q wins;
        // two roots tie on q too, so the lower linear index must win
        let att = FnAttention::new(2, |d, _s: &GridSpec| {
            let mut v = vec![0.0; 8];
            if d == 0 {
                v[2] = 1.0;
                v[5] = 1.0;
            } else {
                v[0] = 0.5;
            }
            v
        });
        let root = GridSpec::new(2, [0.0; 3], 1.0).unwrap();
        let r = qte(&att, 0, &empty_obs(), &root, &cfg(8, vec![2, 2])).unwrap();
        assert_eq!(r.root_index, VoxelIndex::from_linear(2, 2));
    }

    #[test]
    fn reexpansion_matches_path_reuse() {
        let obs = empty_obs();
        for seed in 0..50 {
            let att = FnAttention::new(3, move |d, s: &GridSpec| hashed_values(seed, d, s));
            let root = GridSpec::new(3, [0.1, 0.2, 0.3], 1.0).unwrap();
            let mut c = cfg(4, vec![3, 3, 2]);
            let reuse = select_coords(&att, &obs, &root, &c, true).unwrap();
            c.reexpand_per_depth = true;
            let again = select_coords(&att, &obs, &root, &c, true).unwrap();
            assert_eq!(reuse.coords, again.coords);
            assert_eq!(reuse.translation, again.translation);
        }
    }

    #[test]
    fn trace_agrees_with_expansion() {
        let obs = empty_obs();
        let att = FnAttention::new(2, |d, s: &GridSpec| hashed_values(7, d, s));
        let root = GridSpec::new(2, [0.0; 3], 1.0).unwrap();
        let c = cfg(3, vec![2, 2]);
        let (r, trace) = qte_traced(&att, 0, &obs, &root, &c).unwrap();
        assert_eq!(r, qte(&att, 0, &obs, &root, &c).unwrap());
        assert_eq!(trace.len(), 6);
        let roots: Vec<_> = trace.iter().filter(|t| t.parent.is_none()).collect();
        assert_eq!(roots.len(), 3);
        let best = roots.iter().map(|t| t.accumulated).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best, r.value);
        let mut out = Vec::new();
        write_trace(&trace, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 6);
    }

    #[test]
    fn depth_beyond_final_is_rejected() {
        let att = FnAttention::new(2, |_, s: &GridSpec| vec![0.0; s.cell_count()]);
        let root = GridSpec::new(2, [0.0; 3], 1.0).unwrap();
        assert!(qte(&att, 2, &empty_obs(), &root, &cfg(1, vec![2, 2])).is_err());
        assert!(qte(&att, 0, &empty_obs(), &root, &cfg(1, vec![2, 2, 2])).is_err());
    }
}
