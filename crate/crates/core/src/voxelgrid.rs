//! Point-cloud voxelization and the grid geometry used to zoom between depths.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{config, QteError, Result};

pub type Vec3 = [f64; 3];

/// A scene as seen by the agent: points with per-point features, plus a
/// proprioceptive vector that is carried to the value model unvoxelized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloudObservation {
    points: Vec<Vec3>,
    /// Row-major `points.len() x feature_dim`.
    features: Vec<f64>,
    feature_dim: usize,
    proprio: Vec<f64>,
}

impl PointCloudObservation {
    pub fn new(
        points: Vec<Vec3>,
        features: Vec<f64>,
        feature_dim: usize,
        proprio: Vec<f64>,
    ) -> Result<Self> {
        if features.len() != points.len() * feature_dim {
            return Err(QteError::Data(format!(
                "{} feature values for {} points with {} channels",
                features.len(),
                points.len(),
                feature_dim
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(QteError::Data("non-finite point position".into()));
        }
        Ok(Self {
            points,
            features,
            feature_dim,
            proprio,
        })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn point_features(&self, p: usize) -> &[f64] {
        &self.features[p * self.feature_dim..(p + 1) * self.feature_dim]
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn proprio(&self) -> &[f64] {
        &self.proprio
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A cubic region split into `resolution` cells per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    resolution: usize,
    center: Vec3,
    extent: f64,
}

impl GridSpec {
    pub fn new(resolution: usize, center: Vec3, extent: f64) -> Result<Self> {
        if !(extent > 0.0) || !extent.is_finite() {
            return config(format!("grid extent must be positive, got {extent}"));
        }
        if resolution < 2 {
            return config(format!("grid resolution must be >= 2, got {resolution}"));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return config("grid center must be finite");
        }
        Ok(Self {
            resolution,
            center,
            extent,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn cell_size(&self) -> f64 {
        self.extent / self.resolution as f64
    }

    pub fn cell_count(&self) -> usize {
        self.resolution.pow(3)
    }

    /// Lower corner of the cube.
    pub fn lower(&self) -> Vec3 {
        let h = self.extent / 2.0;
        [self.center[0] - h, self.center[1] - h, self.center[2] - h]
    }

    pub fn contains_index(&self, idx: VoxelIndex) -> bool {
        idx.i < self.resolution && idx.j < self.resolution && idx.k < self.resolution
    }

    /// Cell containing `p` under half-open binning, or `None` outside the cube.
    pub fn locate(&self, p: Vec3) -> Option<VoxelIndex> {
        let lo = self.lower();
        let e = self.resolution as f64;
        let mut out = [0usize; 3];
        for a in 0..3 {
            let t = (p[a] - lo[a]) / self.extent * e;
            if !(t >= 0.0 && t < e) {
                return None;
            }
            out[a] = (t.floor() as usize).min(self.resolution - 1);
        }
        Some(VoxelIndex::new(out[0], out[1], out[2]))
    }
}

/// Cell coordinates within a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelIndex {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl VoxelIndex {
    pub const fn new(i: usize, j: usize, k: usize) -> Self {
        Self { i, j, k }
    }

    /// Row-major linear index, `i` slowest.
    pub fn linear(self, resolution: usize) -> usize {
        (self.i * resolution + self.j) * resolution + self.k
    }

    pub fn from_linear(l: usize, resolution: usize) -> Self {
        Self {
            i: l / (resolution * resolution),
            j: (l / resolution) % resolution,
            k: l % resolution,
        }
    }
}

impl std::fmt::Display for VoxelIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.i, self.j, self.k)
    }
}

/// Dense `resolution^3` grid; each cell carries a mean position, `M` mean
/// features and an occupancy flag (`3 + M + 1` channels).
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    spec: GridSpec,
    feature_dim: usize,
    positions: Vec<Vec3>,
    features: Vec<f64>,
    counts: Vec<u32>,
}

impl VoxelGrid {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn channel_count(&self) -> usize {
        3 + self.feature_dim + 1
    }

    pub fn occupied(&self, idx: VoxelIndex) -> bool {
        self.counts[idx.linear(self.spec.resolution)] > 0
    }

    pub fn occupied_linear(&self, l: usize) -> bool {
        self.counts[l] > 0
    }

    pub fn point_count(&self, idx: VoxelIndex) -> u32 {
        self.counts[idx.linear(self.spec.resolution)]
    }

    pub fn occupied_count(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn mean_position(&self, idx: VoxelIndex) -> Vec3 {
        self.positions[idx.linear(self.spec.resolution)]
    }

    pub fn features(&self, idx: VoxelIndex) -> &[f64] {
        self.features_linear(idx.linear(self.spec.resolution))
    }

    pub fn features_linear(&self, l: usize) -> &[f64] {
        &self.features[l * self.feature_dim..(l + 1) * self.feature_dim]
    }

    pub fn position_linear(&self, l: usize) -> Vec3 {
        self.positions[l]
    }

    /// All `3 + M + 1` channels of one cell.
    pub fn channels(&self, idx: VoxelIndex) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.channel_count());
        out.extend_from_slice(&self.mean_position(idx));
        out.extend_from_slice(self.features(idx));
        out.push(if self.occupied(idx) { 1.0 } else { 0.0 });
        out
    }

    /// Linear indices of occupied cells, ascending.
    pub fn occupied_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(l, _)| l)
    }

    /// Line-delimited dump: `i j k occupancy f0 f1 ...`, one cell per line.
    pub fn write_records<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let e = self.spec.resolution;
        for l in 0..self.spec.cell_count() {
            let idx = VoxelIndex::from_linear(l, e);
            write!(w, "{} {} {} {}", idx.i, idx.j, idx.k, u8::from(self.counts[l] > 0))?;
            for f in self.features_linear(l) {
                write!(w, " {f}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn point_order(obs: &PointCloudObservation, a: usize, b: usize) -> Ordering {
    let (pa, pb) = (obs.points[a], obs.points[b]);
    pa.iter()
        .zip(pb.iter())
        .map(|(x, y)| x.total_cmp(y))
        .chain(
            obs.point_features(a)
                .iter()
                .zip(obs.point_features(b))
                .map(|(x, y)| x.total_cmp(y)),
        )
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Bins every in-cube point into its cell and averages positions and features.
///
/// Points in a cell are summed in a canonical (sorted) order, so the result is
/// bit-identical under any permutation of the input.
pub fn voxelize(obs: &PointCloudObservation, spec: &GridSpec) -> VoxelGrid {
    let e = spec.resolution;
    let n_cells = spec.cell_count();
    let m = obs.feature_dim;

    let mut binned: Vec<(usize, usize)> = obs
        .points
        .iter()
        .enumerate()
        .filter_map(|(p, &pt)| spec.locate(pt).map(|idx| (idx.linear(e), p)))
        .collect();
    binned.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| point_order(obs, a.1, b.1)));

    let mut positions = vec![[0.0; 3]; n_cells];
    let mut features = vec![0.0; n_cells * m];
    let mut counts = vec![0u32; n_cells];
    for &(l, p) in &binned {
        counts[l] += 1;
        let pt = obs.points[p];
        for a in 0..3 {
            positions[l][a] += pt[a];
        }
        for (acc, f) in features[l * m..(l + 1) * m]
            .iter_mut()
            .zip(obs.point_features(p))
        {
            *acc += f;
        }
    }
    for l in 0..n_cells {
        if counts[l] == 0 {
            positions[l] = cell_center_unchecked(spec, VoxelIndex::from_linear(l, e));
            continue;
        }
        let c = f64::from(counts[l]);
        for v in positions[l].iter_mut() {
            *v /= c;
        }
        for v in features[l * m..(l + 1) * m].iter_mut() {
            *v /= c;
        }
    }

    VoxelGrid {
        spec: *spec,
        feature_dim: m,
        positions,
        features,
        counts,
    }
}

fn cell_center_unchecked(spec: &GridSpec, idx: VoxelIndex) -> Vec3 {
    let lo = spec.lower();
    let cs = spec.cell_size();
    [
        lo[0] + (idx.i as f64 + 0.5) * cs,
        lo[1] + (idx.j as f64 + 0.5) * cs,
        lo[2] + (idx.k as f64 + 0.5) * cs,
    ]
}

/// Geometric center of cell `idx`, in world units.
pub fn cell_center(spec: &GridSpec, idx: VoxelIndex) -> Result<Vec3> {
    if !spec.contains_index(idx) {
        return Err(QteError::Precondition(format!(
            "voxel index {idx} out of bounds for resolution {}",
            spec.resolution
        )));
    }
    Ok(cell_center_unchecked(spec, idx))
}

/// Grid for the next depth, centered on cell `idx` of `parent`.
pub fn child_spec(
    parent: &GridSpec,
    idx: VoxelIndex,
    zoom_margin: f64,
    child_resolution: usize,
) -> Result<GridSpec> {
    if !(zoom_margin >= 1.0) {
        return Err(QteError::Precondition(format!(
            "zoom margin must be >= 1, got {zoom_margin}"
        )));
    }
    let center = cell_center(parent, idx)?;
    GridSpec::new(child_resolution, center, parent.cell_size() * zoom_margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obs(points: Vec<Vec3>, feats: Vec<f64>, m: usize) -> PointCloudObservation {
        PointCloudObservation::new(points, feats, m, vec![]).unwrap()
    }

    #[test]
    fn single_point_at_center_lands_in_center_cell() {
        for e in [2usize, 4, 8, 16] {
            let spec = GridSpec::new(e, [0.3, -0.2, 1.0], 1.6).unwrap();
            let g = voxelize(&obs(vec![[0.3, -0.2, 1.0]], vec![0.7], 1), &spec);
            assert_eq!(g.occupied_count(), 1);
            let c = VoxelIndex::new(e / 2, e / 2, e / 2);
            assert!(g.occupied(c));
            assert_eq!(g.features(c), &[0.7]);
        }
    }

    #[test]
    fn nothing_inside_gives_empty_grid() {
        let spec = GridSpec::new(4, [0.0; 3], 1.0).unwrap();
        let g = voxelize(&obs(vec![[5.0, 0.0, 0.0]], vec![1.0, 1.0], 2), &spec);
        assert_eq!(g.occupied_count(), 0);
        for l in 0..spec.cell_count() {
            assert!(g.features_linear(l).iter().all(|&f| f == 0.0));
            let idx = VoxelIndex::from_linear(l, 4);
            assert_eq!(g.mean_position(idx), cell_center(&spec, idx).unwrap());
        }
        assert_eq!(g.channel_count(), 3 + 2 + 1);
    }

    #[test]
    fn upper_boundary_is_discarded() {
        let spec = GridSpec::new(2, [0.0; 3], 2.0).unwrap();
        let g = voxelize(
            &obs(vec![[1.0, 0.0, 0.0], [-1.0, -1.0, -1.0]], vec![1.0, 2.0], 1),
            &spec,
        );
        assert_eq!(g.occupied_count(), 1);
        assert!(g.occupied(VoxelIndex::new(0, 0, 0)));
    }

    #[test]
    fn two_points_share_a_cell_mean() {
        let spec = GridSpec::new(2, [0.0; 3], 2.0).unwrap();
        let a = obs(vec![[0.2, 0.2, 0.2], [0.6, 0.4, 0.3]], vec![0.1, 0.9, 0.5, 0.25], 2);
        let b = obs(vec![[0.6, 0.4, 0.3], [0.2, 0.2, 0.2]], vec![0.5, 0.25, 0.1, 0.9], 2);
        let ga = voxelize(&a, &spec);
        assert_eq!(ga, voxelize(&b, &spec));
        let idx = VoxelIndex::new(1, 1, 1);
        assert_eq!(ga.features(idx), &[(0.1 + 0.5) / 2.0, (0.9 + 0.25) / 2.0]);
        assert_eq!(ga.point_count(idx), 2);
    }

    /// Brute-force oracle: per cell, scan every point and test containment
    /// against explicit cell bounds.
    fn oracle_cell(o: &PointCloudObservation, spec: &GridSpec, idx: VoxelIndex) -> (u32, Vec<f64>) {
        let lo = spec.lower();
        let e = spec.resolution() as f64;
        let mut n = 0;
        let mut sum = vec![0.0; o.feature_dim()];
        for (p, pt) in o.points().iter().enumerate() {
            let ijk = [idx.i, idx.j, idx.k];
            let inside = (0..3).all(|a| {
                let t = (pt[a] - lo[a]) / spec.extent() * e;
                t >= ijk[a] as f64 && t < ijk[a] as f64 + 1.0 && t < e
            });
            if inside {
                n += 1;
                for (s, f) in sum.iter_mut().zip(o.point_features(p)) {
                    *s += f;
                }
            }
        }
        if n > 0 {
            sum.iter_mut().for_each(|s| *s /= n as f64);
        }
        (n, sum)
    }

    #[test]
    fn matches_brute_force_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let spec = GridSpec::new(rng.gen_range(2..6), [0.0, 0.5, -0.5], 2.0).unwrap();
            let n = rng.gen_range(1..60);
            let pts: Vec<Vec3> = (0..n)
                .map(|_| [rng.gen_range(-1.3..1.3), rng.gen_range(-0.8..1.8), rng.gen_range(-1.8..0.8)])
                .collect();
            let feats: Vec<f64> = (0..n * 2).map(|_| rng.gen::<f64>()).collect();
            let o = obs(pts, feats, 2);
            let g = voxelize(&o, &spec);
            for l in 0..spec.cell_count() {
                let idx = VoxelIndex::from_linear(l, spec.resolution());
                let (count, mean) = oracle_cell(&o, &spec, idx);
                assert_eq!(g.point_count(idx), count);
                for (a, b) in g.features(idx).iter().zip(&mean) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cell_center_examples() {
        let spec = GridSpec::new(2, [0.0; 3], 2.0).unwrap();
        assert_eq!(cell_center(&spec, VoxelIndex::new(0, 0, 0)).unwrap(), [-0.5; 3]);
        assert_eq!(cell_center(&spec, VoxelIndex::new(1, 1, 1)).unwrap(), [0.5; 3]);
        assert!(matches!(
            cell_center(&spec, VoxelIndex::new(2, 0, 0)),
            Err(QteError::Precondition(_))
        ));
    }

    #[test]
    fn cell_center_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let e = rng.gen_range(2..20);
            let c = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let spec = GridSpec::new(e, c, rng.gen_range(0.01..10.0)).unwrap();
            let idx = VoxelIndex::new(rng.gen_range(0..e), rng.gen_range(0..e), rng.gen_range(0..e));
            let p = cell_center(&spec, idx).unwrap();
            assert_eq!(spec.locate(p), Some(idx));
            let g = voxelize(&obs(vec![p], vec![1.0], 1), &spec);
            assert!(g.occupied(idx));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(matches!(GridSpec::new(1, [0.0; 3], 1.0), Err(QteError::Config(_))));
        assert!(matches!(GridSpec::new(4, [0.0; 3], 0.0), Err(QteError::Config(_))));
        assert!(matches!(GridSpec::new(4, [0.0; 3], -1.0), Err(QteError::Config(_))));
    }

    #[test]
    fn child_spec_arithmetic() {
        let parent = GridSpec::new(16, [0.0; 3], 1.6).unwrap();
        let child = child_spec(&parent, VoxelIndex::new(3, 9, 15), 1.0, 16).unwrap();
        assert!((child.extent() - 0.1).abs() < 1e-15);
        let grand = child_spec(&child, VoxelIndex::new(0, 0, 0), 1.0, 16).unwrap();
        assert!((grand.extent() - 1.6 / 256.0).abs() < 1e-15);
        assert!(child_spec(&parent, VoxelIndex::new(0, 0, 0), 0.5, 16).is_err());
    }

    #[test]
    fn child_of_child_is_nested_in_parent_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let parent = GridSpec::new(8, [0.1, 0.2, 0.3], 1.6).unwrap();
            let pick = |rng: &mut ChaCha8Rng, e: usize| {
                VoxelIndex::new(rng.gen_range(0..e), rng.gen_range(0..e), rng.gen_range(0..e))
            };
            let idx = pick(&mut rng, 8);
            let child = child_spec(&parent, idx, 1.0, 8).unwrap();
            let grand = child_spec(&child, pick(&mut rng, 8), 1.0, 8).unwrap();
            let cell_lo = parent.lower();
            let cs = parent.cell_size();
            let ijk = [idx.i, idx.j, idx.k];
            for a in 0..3 {
                let lo = cell_lo[a] + ijk[a] as f64 * cs;
                let g_lo = grand.lower()[a];
                assert!(g_lo >= lo - 1e-12 && g_lo + grand.extent() <= lo + cs + 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_bounded(
            pts in prop::collection::vec((-1.2f64..1.2, -1.2f64..1.2, -1.2f64..1.2, 0.0f64..1.0), 1..80),
            seed in any::<u64>(),
        ) {
            let spec = GridSpec::new(4, [0.0; 3], 2.0).unwrap();
            let points: Vec<Vec3> = pts.iter().map(|p| [p.0, p.1, p.2]).collect();
            let feats: Vec<f64> = pts.iter().map(|p| p.3).collect();
            let a = obs(points.clone(), feats.clone(), 1);
            let mut order: Vec<usize> = (0..points.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..order.len()).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let b = obs(
                order.iter().map(|&i| points[i]).collect(),
                order.iter().map(|&i| feats[i]).collect(),
                1,
            );
            let ga = voxelize(&a, &spec);
            prop_assert_eq!(&ga, &voxelize(&b, &spec));
            let in_cube = points.iter().filter(|p| spec.locate(**p).is_some()).count();
            prop_assert!(ga.occupied_count() <= in_cube);
            for p in &points {
                if let Some(idx) = spec.locate(*p) {
                    let c = cell_center(&spec, idx).unwrap();
                    let h = spec.cell_size() / 2.0;
                    for a in 0..3 {
                        prop_assert!(p[a] >= c[a] - h - 1e-12 && p[a] < c[a] + h + 1e-12);
                    }
                }
            }
        }
    }
}
