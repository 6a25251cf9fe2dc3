//! Voxelization, the stride-2 voxel hierarchy used by the encoder, and the
//! point gather that maps voxel features back to points.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Width of the per-voxel input feature: offset from the voxel center in
/// voxel units (3) and intensity (1, zero when the cloud has none).
pub const VOXEL_FEATURES: usize = 4;

pub type VoxelIndex = [i64; 3];

/// Occupied voxels of one cloud, in lexicographic index order.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    voxel_size: f32,
    origin: [f32; 3],
    voxels: Vec<VoxelIndex>,
    point_to_voxel: Vec<usize>,
    features: Tensor,
}

impl VoxelGrid {
    pub fn voxel_size(&self) -> f32 {
        self.voxel_size
    }

    pub fn origin(&self) -> [f32; 3] {
        self.origin
    }

    pub fn voxels(&self) -> &[VoxelIndex] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn point_to_voxel(&self) -> &[usize] {
        &self.point_to_voxel
    }

    /// Mean input feature of each voxel's member points, `len() x VOXEL_FEATURES`.
    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Center of a voxel at `level` of the stride-2 hierarchy, in meters.
    pub fn center(&self, index: VoxelIndex, level: usize) -> [f32; 3] {
        let cell = self.voxel_size as f64 * (1u64 << level) as f64;
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[k] = (self.origin[k] as f64 + (index[k] as f64 + 0.5) * cell) as f32;
        }
        out
    }
}

/// Voxel index of a point: `floor((p - origin) / voxel_size)` per axis.
pub fn voxel_index(p: [f32; 3], origin: [f32; 3], voxel_size: f32) -> VoxelIndex {
    let mut idx = [0i64; 3];
    for k in 0..3 {
        idx[k] = libm::floor((p[k] as f64 - origin[k] as f64) / voxel_size as f64) as i64;
    }
    idx
}

/// Groups points into cubic voxels of edge `voxel_size` anchored at `origin`.
pub fn voxelize(pc: &PointCloud, voxel_size: f32, origin: [f32; 3]) -> Result<VoxelGrid> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::contract(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    let keys: Vec<VoxelIndex> = pc
        .coords()
        .iter()
        .map(|&p| voxel_index(p, origin, voxel_size))
        .collect();
    let mut voxels = keys.clone();
    voxels.sort_unstable();
    voxels.dedup();
    let point_to_voxel: Vec<usize> = keys
        .iter()
        .map(|k| voxels.binary_search(k).expect("key present"))
        .collect();

    let mut sums = vec![0.0f64; voxels.len() * VOXEL_FEATURES];
    let mut counts = vec![0u32; voxels.len()];
    for (i, (&v, p)) in point_to_voxel.iter().zip(pc.coords()).enumerate() {
        let key = voxels[v];
        let row = &mut sums[v * VOXEL_FEATURES..(v + 1) * VOXEL_FEATURES];
        for k in 0..3 {
            let center = origin[k] as f64 + (key[k] as f64 + 0.5) * voxel_size as f64;
            row[k] += (p[k] as f64 - center) / voxel_size as f64;
        }
        row[3] += pc.intensity().map_or(0.0, |it| it[i] as f64);
        counts[v] += 1;
    }
    let data = sums
        .chunks(VOXEL_FEATURES)
        .zip(&counts)
        .flat_map(|(row, &n)| row.iter().map(move |s| (s / n as f64) as f32))
        .collect();
    let features = Tensor::matrix(voxels.len(), VOXEL_FEATURES, data)?;
    Ok(VoxelGrid {
        voxel_size,
        origin,
        voxels,
        point_to_voxel,
        features,
    })
}

/// Gives each point its voxel's feature row. The gradient of the gather is
/// a scatter-add, so a voxel receives the summed gradient of its members.
pub fn devoxelize<T: Real>(g: &mut Graph<T>, voxel_features: Var, grid: &VoxelGrid) -> Result<Var> {
    let rows = g.value(voxel_features).rows();
    if rows != grid.len() {
        return Err(Error::contract(format!(
            "{rows} feature rows for a grid of {} voxels",
            grid.len()
        )));
    }
    g.gather_rows(voxel_features, grid.point_to_voxel())
}

/// One level of the stride-2 hierarchy.
#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub voxels: Vec<VoxelIndex>,
    /// Index of each voxel's parent in the next coarser level (empty at the top).
    pub parent: Vec<usize>,
    /// Position of each voxel inside its parent's 2x2x2 block, `0..8`.
    pub offset: Vec<u8>,
}

/// Level 0 holds the grid voxels; level `l` has cells `2^l` voxels wide.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelHierarchy {
    levels: Vec<Level>,
}

impl VoxelHierarchy {
    pub fn build(grid: &VoxelGrid, depth: usize) -> Self {
        let mut levels = vec![Level {
            voxels: grid.voxels().to_vec(),
            parent: Vec::new(),
            offset: Vec::new(),
        }];
        for _ in 0..depth {
            let child = levels.last_mut().expect("non-empty");
            let keys: Vec<VoxelIndex> = child
                .voxels
                .iter()
                .map(|v| [v[0].div_euclid(2), v[1].div_euclid(2), v[2].div_euclid(2)])
                .collect();
            let mut parents = keys.clone();
            parents.sort_unstable();
            parents.dedup();
            child.parent = keys
                .iter()
                .map(|k| parents.binary_search(k).expect("parent present"))
                .collect();
            child.offset = child
                .voxels
                .iter()
                .map(|v| {
                    (v[0].rem_euclid(2) | v[1].rem_euclid(2) << 1 | v[2].rem_euclid(2) << 2) as u8
                })
                .collect();
            levels.push(Level {
                voxels: parents,
                parent: Vec::new(),
                offset: Vec::new(),
            });
        }
        VoxelHierarchy { levels }
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, l: usize) -> &Level {
        &self.levels[l]
    }

    /// im2col slots for a 2x2x2 stride-2 convolution from level `l` to `l + 1`:
    /// eight slots per parent, filled with the child at that offset.
    pub fn down_slots(&self, l: usize) -> Vec<Option<usize>> {
        let child = &self.levels[l];
        let mut slots = vec![None; self.levels[l + 1].voxels.len() * 8];
        for (c, (&p, &o)) in child.parent.iter().zip(&child.offset).enumerate() {
            slots[p * 8 + o as usize] = Some(c);
        }
        slots
    }

    /// Slots for the transposed convolution from level `l + 1` back to `l`:
    /// each child row places its parent in the slot of its own offset.
    pub fn up_slots(&self, l: usize) -> Vec<Option<usize>> {
        let child = &self.levels[l];
        let mut slots = vec![None; child.voxels.len() * 8];
        for (c, (&p, &o)) in child.parent.iter().zip(&child.offset).enumerate() {
            slots[c * 8 + o as usize] = Some(p);
        }
        slots
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: Vec<[f32; 3]>) -> PointCloud {
        PointCloud::new(points, None, None).unwrap()
    }

    #[test]
    fn nearby_points_share_a_voxel() {
        let g = voxelize(
            &cloud(vec![[0.10, 0.10, 0.10], [0.11, 0.10, 0.10]]),
            0.05,
            [0.0; 3],
        )
        .unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.point_to_voxel(), &[0, 0]);
    }

    #[test]
    fn distant_points_get_separate_voxels() {
        let g = voxelize(
            &cloud(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
            0.05,
            [0.0; 3],
        )
        .unwrap();
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn non_positive_voxel_size_is_rejected() {
        assert!(voxelize(&cloud(vec![[0.0; 3]]), 0.0, [0.0; 3]).is_err());
        assert!(voxelize(&cloud(vec![[0.0; 3]]), -1.0, [0.0; 3]).is_err());
    }

    #[test]
    fn features_are_mean_offsets_and_intensity() {
        let pc = PointCloud::new(
            vec![[0.01, 0.02, 0.03], [0.03, 0.02, 0.01]],
            Some(vec![0.2, 0.4]),
            None,
        )
        .unwrap();
        let g = voxelize(&pc, 0.1, [0.0; 3]).unwrap();
        let f = g.features().row(0);
        // Mean point (0.02, 0.02, 0.02), center (0.05, 0.05, 0.05).
        for k in 0..3 {
            assert!((f[k] + 0.3).abs() < 1e-6, "{f:?}");
        }
        assert!((f[3] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn hierarchy_offsets_and_parents() {
        let pc = cloud(vec![
            [0.5, 0.5, 0.5],
            [1.5, 0.5, 0.5],
            [2.5, 2.5, 2.5],
            [-0.5, 0.5, 0.5],
        ]);
        let g = voxelize(&pc, 1.0, [0.0; 3]).unwrap();
        let h = VoxelHierarchy::build(&g, 2);
        assert_eq!(h.depth(), 2);
        let l0 = h.level(0);
        // Voxels sorted: (-1,0,0), (0,0,0), (1,0,0), (2,2,2).
        assert_eq!(l0.voxels[0], [-1, 0, 0]);
        assert_eq!(l0.offset, vec![1, 0, 1, 0]);
        let l1 = h.level(1);
        assert_eq!(l1.voxels, vec![[-1, 0, 0], [0, 0, 0], [1, 1, 1]]);
        assert_eq!(l0.parent, vec![0, 1, 1, 2]);
        assert_eq!(h.level(2).voxels.len(), 2);
        let down = h.down_slots(0);
        assert_eq!(down.len(), 3 * 8);
        assert_eq!(down[8], Some(1));
        assert_eq!(down[8 + 1], Some(2));
        let up = h.up_slots(0);
        assert_eq!(up[2 * 8 + 1], Some(1));
    }

    #[test]
    fn devoxelize_single_voxel_rows_identical() {
        let pc = cloud(vec![
            [0.01, 0.01, 0.01],
            [0.02, 0.02, 0.02],
            [0.03, 0.01, 0.02],
        ]);
        let grid = voxelize(&pc, 0.05, [0.0; 3]).unwrap();
        let mut g: Graph = Graph::new();
        let v = g.param(Tensor::matrix(1, 2, vec![0.7, -1.5]).unwrap());
        let f = devoxelize(&mut g, v, &grid).unwrap();
        for i in 0..3 {
            assert_eq!(g.value(f).row(i), &[0.7, -1.5]);
        }
        let s = g.sum(f);
        g.backward(s).unwrap();
        // The adjoint of the gather counts member points.
        assert_eq!(g.grad(v).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn devoxelize_rejects_mismatched_rows() {
        let grid = voxelize(&cloud(vec![[0.0; 3], [1.0, 1.0, 1.0]]), 0.05, [0.0; 3]).unwrap();
        let mut g: Graph = Graph::new();
        let v = g.constant(Tensor::zeros(&[1, 2]));
        assert!(devoxelize(&mut g, v, &grid).is_err());
    }
}
