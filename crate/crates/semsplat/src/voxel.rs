//! Sparse voxelization of the canonical cloud: integer coordinates by floor
//! division, per-voxel input features as the mean semantic vector of member
//! points, and an open-addressing hash index over 3-int coordinates.

use crate::error::{Error, Result};
use nalgebra::Vector3;

/// Open-addressing hash from voxel coordinates to slot indices. Rebuilt from
/// scratch whenever positions change.
#[derive(Debug, Clone)]
pub struct VoxelHash {
    mask: u64,
    keys: Vec<[i32; 3]>,
    slots: Vec<i32>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix_coord(c: [i32; 3]) -> u64 {
    let mut h = splitmix64(c[0] as u32 as u64);
    h = splitmix64(h ^ (c[1] as u32 as u64));
    splitmix64(h ^ (c[2] as u32 as u64))
}

impl VoxelHash {
    pub fn build(coords: &[[i32; 3]]) -> Self {
        let cap = (coords.len() * 2).next_power_of_two().max(8);
        let mut hash = VoxelHash {
            mask: cap as u64 - 1,
            keys: vec![[i32::MIN; 3]; cap],
            slots: vec![-1; cap],
        };
        for (slot, c) in coords.iter().enumerate() {
            let mut pos = (mix_coord(*c) & hash.mask) as usize;
            loop {
                if hash.slots[pos] < 0 {
                    hash.keys[pos] = *c;
                    hash.slots[pos] = slot as i32;
                    break;
                }
                debug_assert_ne!(hash.keys[pos], *c, "duplicate voxel coordinate");
                pos = (pos + 1) & hash.mask as usize;
            }
        }
        hash
    }

    pub fn lookup(&self, c: [i32; 3]) -> Option<usize> {
        let mut pos = (mix_coord(c) & self.mask) as usize;
        loop {
            let s = self.slots[pos];
            if s < 0 {
                return None;
            }
            if self.keys[pos] == c {
                return Some(s as usize);
            }
            pos = (pos + 1) & self.mask as usize;
        }
    }
}

/// Voxelized cloud: unique coordinates in lexicographic slot order, mean
/// semantic input features, and the point-to-voxel assignment.
#[derive(Debug, Clone)]
pub struct SparseVoxelGrid {
    pub grid_size: f64,
    pub coords: Vec<[i32; 3]>,
    /// `M × feature_width` flattened.
    pub features: Vec<f64>,
    pub feature_width: usize,
    /// Voxel slot of each input point.
    pub point_voxel: Vec<usize>,
    /// Member count per voxel.
    pub counts: Vec<usize>,
    pub hash: VoxelHash,
}

impl SparseVoxelGrid {
    pub fn voxel_count(&self) -> usize {
        self.coords.len()
    }
}

/// Integer voxel coordinate of a position: componentwise floor division.
pub fn voxel_coord(p: Vector3<f64>, v: f64) -> [i32; 3] {
    [
        (p.x / v).floor() as i32,
        (p.y / v).floor() as i32,
        (p.z / v).floor() as i32,
    ]
}

/// Partitions points into voxels of edge `v`. The per-voxel input feature is
/// the mean of member points' semantic vectors.
pub fn voxelize(
    positions: &[Vector3<f64>],
    semantics: &[f64],
    parts: usize,
    v: f64,
) -> Result<SparseVoxelGrid> {
    if v <= 0.0 || !v.is_finite() {
        return Err(Error::Config(format!("grid size must be positive, got {v}")));
    }
    let n = positions.len();
    debug_assert_eq!(semantics.len(), n * parts);
    let point_coords: Vec<[i32; 3]> = positions.iter().map(|p| voxel_coord(*p, v)).collect();
    let mut coords = point_coords.clone();
    coords.sort_unstable();
    coords.dedup();
    let hash = VoxelHash::build(&coords);
    let m = coords.len();
    let mut features = vec![0.0; m * parts];
    let mut counts = vec![0usize; m];
    let mut point_voxel = vec![0usize; n];
    for (i, c) in point_coords.iter().enumerate() {
        let slot = hash.lookup(*c).expect("point coordinate present in grid");
        point_voxel[i] = slot;
        counts[slot] += 1;
        for k in 0..parts {
            features[slot * parts + k] += semantics[i * parts + k];
        }
    }
    for (slot, cnt) in counts.iter().enumerate() {
        let inv = 1.0 / *cnt as f64;
        for k in 0..parts {
            features[slot * parts + k] *= inv;
        }
    }
    Ok(SparseVoxelGrid {
        grid_size: v,
        coords,
        features,
        feature_width: parts,
        point_voxel,
        counts,
        hash,
    })
}

/// Adjoint of the per-voxel mean: distributes voxel-feature gradients back
/// to each member point's semantic vector.
pub fn voxelize_backward(grid: &SparseVoxelGrid, grad_features: &[f64]) -> Vec<f64> {
    let parts = grid.feature_width;
    let n = grid.point_voxel.len();
    let mut out = vec![0.0; n * parts];
    for i in 0..n {
        let slot = grid.point_voxel[i];
        let inv = 1.0 / grid.counts[slot] as f64;
        for k in 0..parts {
            out[i * parts + k] = grad_features[slot * parts + k] * inv;
        }
    }
    out
}
