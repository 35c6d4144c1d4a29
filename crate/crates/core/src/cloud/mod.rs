//! Point clouds, rigid transforms, and the two-level superpoint hierarchy.

pub mod io;
pub mod kdtree;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat3, Vec3, IDENTITY3};
use crate::tensor::Tensor;

pub use kdtree::{KdTree, Neighbor};

/// Non-empty ordered set of finite 3D points (meters).
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Data("point cloud is empty".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Data(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub fn select(&self, idx: &[usize]) -> Result<PointCloud> {
        PointCloud::new(idx.iter().map(|&i| self.points[i]).collect())
    }

    pub fn centroid(&self) -> Vec3 {
        let mut c = [0.0; 3];
        for p in &self.points {
            c = linalg::add(&c, p);
        }
        linalg::scale(&c, 1.0 / self.points.len() as f64)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            self.points.len(),
            3,
            self.points.iter().flatten().copied().collect(),
        )
    }

    /// Stable 64-bit digest of the coordinates, used in error reports.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.points.iter().flatten() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// `p ↦ R·p + t` with `R` a proper rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub const ORTHONORMAL_TOL: f64 = 1e-9;

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn identity() -> Self {
        Self {
            rotation: IDENTITY3,
            translation: [0.0; 3],
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: IDENTITY3,
            translation: t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rtr = linalg::mat_mul(&linalg::transpose(&self.rotation), &self.rotation);
        let err = rtr
            .iter()
            .flatten()
            .zip(IDENTITY3.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if !(err <= Self::ORTHONORMAL_TOL) {
            return Err(Error::Parameter(format!(
                "rotation is not orthonormal (max |RᵀR − I| = {err:e})"
            )));
        }
        let d = linalg::det(&self.rotation);
        if (d - 1.0).abs() > Self::ORTHONORMAL_TOL {
            return Err(Error::Parameter(format!("rotation determinant is {d}")));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("translation is not finite".into()));
        }
        Ok(())
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        linalg::add(&linalg::mat_vec(&self.rotation, p), &self.translation)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: linalg::mat_mul(&self.rotation, &other.rotation),
            translation: self.apply(&other.translation),
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = linalg::transpose(&self.rotation);
        let t = linalg::mat_vec(&rt, &self.translation);
        RigidTransform {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    /// Row-major homogeneous 4×4 matrix.
    pub fn to_matrix4(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2], 0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_matrix4(m: &[f64; 16]) -> Result<Self> {
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::Data("last row of a rigid transform must be 0 0 0 1".into()));
        }
        Self::new(
            [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]],
            [m[3], m[7], m[11]],
        )
    }

    /// Rotation angle to `other` in degrees.
    pub fn rotation_error_deg(&self, other: &RigidTransform) -> f64 {
        linalg::rotation_angle(&self.rotation, &other.rotation).to_degrees()
    }

    pub fn translation_error(&self, other: &RigidTransform) -> f64 {
        linalg::norm(&linalg::sub(&self.translation, &other.translation))
    }
}

pub fn apply_transform(pc: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: pc.points.iter().map(|p| t.apply(p)).collect(),
    }
}

/// One centroid per occupied voxel, in order of first occupancy.
pub fn voxel_downsample(pc: &PointCloud, voxel: f64) -> Result<PointCloud> {
    if !(voxel > 0.0) || !voxel.is_finite() {
        return Err(Error::Parameter(format!("voxel size must be positive, got {voxel}")));
    }
    let mut slot: HashMap<[i64; 3], usize> = HashMap::new();
    let mut acc: Vec<(Vec3, usize)> = Vec::new();
    for p in &pc.points {
        let key = [
            (p[0] / voxel).floor() as i64,
            (p[1] / voxel).floor() as i64,
            (p[2] / voxel).floor() as i64,
        ];
        let s = *slot.entry(key).or_insert_with(|| {
            acc.push(([0.0; 3], 0));
            acc.len() - 1
        });
        acc[s].0 = linalg::add(&acc[s].0, p);
        acc[s].1 += 1;
    }
    PointCloud::new(
        acc.into_iter()
            .map(|(sum, n)| linalg::scale(&sum, 1.0 / n as f64))
            .collect(),
    )
}

/// `k` nearest neighbours in `base` for every query point.
pub fn knn(query: &PointCloud, base: &PointCloud, k: usize) -> Result<Vec<Vec<Neighbor>>> {
    if k > base.len() {
        return Err(Error::Parameter(format!(
            "k = {k} exceeds the base cloud size {}",
            base.len()
        )));
    }
    let tree = KdTree::build(base.points());
    Ok(query.points.iter().map(|q| tree.knn(q, k)).collect())
}

/// Dense points, superpoints, and the Voronoi patches linking them, plus the
/// per-level feature matrices once computed.
#[derive(Clone, Debug)]
pub struct SuperpointGraph {
    pub dense_points: PointCloud,
    pub superpoints: PointCloud,
    /// Superpoint index of each dense point.
    pub patch_of: Vec<usize>,
    /// Dense indices of each patch, ascending.
    pub patches: Vec<Vec<usize>>,
    pub dense_features: Option<Tensor>,
    pub superpoint_features: Option<Tensor>,
}

impl SuperpointGraph {
    pub fn num_dense(&self) -> usize {
        self.dense_points.len()
    }

    pub fn num_superpoints(&self) -> usize {
        self.superpoints.len()
    }

    pub fn patch_points(&self, s: usize) -> Vec<Vec3> {
        self.patches[s]
            .iter()
            .map(|&i| self.dense_points.points()[i])
            .collect()
    }

    /// Same graph with both levels moved by `t`; patches are unchanged.
    pub fn transformed(&self, t: &RigidTransform) -> SuperpointGraph {
        SuperpointGraph {
            dense_points: apply_transform(&self.dense_points, t),
            superpoints: apply_transform(&self.superpoints, t),
            ..self.clone()
        }
    }
}

/// Assigns every dense point to its nearest superpoint (lower index on ties)
/// and drops superpoints whose patch ends up empty.
pub fn group_points(dense: &PointCloud, supers: &PointCloud) -> SuperpointGraph {
    let tree = KdTree::build(supers.points());
    let nearest: Vec<usize> = dense
        .points
        .iter()
        .map(|p| tree.knn(p, 1)[0].index)
        .collect();
    let mut raw: Vec<Vec<usize>> = vec![Vec::new(); supers.len()];
    for (i, &s) in nearest.iter().enumerate() {
        raw[s].push(i);
    }
    let mut remap = vec![usize::MAX; supers.len()];
    let mut kept_points = Vec::new();
    let mut patches = Vec::new();
    for (s, members) in raw.into_iter().enumerate() {
        if !members.is_empty() {
            remap[s] = patches.len();
            kept_points.push(supers.points[s]);
            patches.push(members);
        }
    }
    let patch_of = nearest.iter().map(|&s| remap[s]).collect();
    SuperpointGraph {
        dense_points: dense.clone(),
        superpoints: PointCloud { points: kept_points },
        patch_of,
        patches,
        dense_features: None,
        superpoint_features: None,
    }
}

/// Dense level from `dense_voxel`, superpoints by further downsampling the
/// dense level with `super_voxel`, then grouping.
pub fn build_hierarchy(pc: &PointCloud, dense_voxel: f64, super_voxel: f64) -> Result<SuperpointGraph> {
    if super_voxel < dense_voxel {
        return Err(Error::Parameter(format!(
            "superpoint voxel {super_voxel} is finer than the dense voxel {dense_voxel}"
        )));
    }
    let dense = voxel_downsample(pc, dense_voxel)?;
    let supers = voxel_downsample(&dense, super_voxel)?;
    Ok(group_points(&dense, &supers))
}
