//! Per-point input features for both hierarchy levels.
//!
//! The built-in descriptor only looks at distances and second moments inside
//! a ball, so it is unchanged by rigid motion of the cloud. Each point gets,
//! per radius scale, an 8-bin soft histogram of neighbour distances and the
//! three sorted eigenvalue ratios of the neighbourhood covariance. A learnable
//! affine lift then maps the descriptor to the working widths `d̃` / `d̂`.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::cloud::{KdTree, SuperpointGraph};
use crate::error::{Error, Result};
use crate::linalg::{self, Vec3};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const HIST_BINS: usize = 8;
pub const CHANNELS_PER_SCALE: usize = HIST_BINS + 3;

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorConfig {
    pub dense_voxel: f64,
    pub super_voxel: f64,
    /// Ball radii as multiples of the level's voxel size.
    pub radius_scales: Vec<f64>,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            dense_voxel: 0.05,
            super_voxel: 0.2,
            radius_scales: vec![2.5],
        }
    }
}

impl DescriptorConfig {
    pub fn width(&self) -> usize {
        CHANNELS_PER_SCALE * self.radius_scales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dense_voxel > 0.0 && self.super_voxel > 0.0) {
            return Err(Error::Config("voxel sizes must be positive".into()));
        }
        if self.radius_scales.is_empty() || self.radius_scales.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("radius scales must be positive and non-empty".into()));
        }
        Ok(())
    }
}

/// Raw (pre-lift) features for the two levels of one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFeatures {
    pub dense: Tensor,
    pub superpoint: Tensor,
}

#[derive(Clone, Debug)]
pub enum FeatureProvider {
    Builtin(DescriptorConfig),
    /// Precomputed features; the lift is applied on top like for the builtin
    /// descriptor.
    FileLoaded { dense: Tensor, superpoint: Tensor },
}

impl FeatureProvider {
    pub const DENSE_ENTRY: &'static str = "dense_feats";
    pub const SUPER_ENTRY: &'static str = "super_feats";

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let get = |name: &str| -> Result<Tensor> {
            let t = store.require(name)?.clone();
            if t.rank() != 2 {
                return Err(Error::Data(format!("`{name}` must be a matrix")));
            }
            if !t.all_finite() {
                return Err(Error::Data(format!("`{name}` has non-finite entries")));
            }
            Ok(t)
        };
        Ok(Self::FileLoaded {
            dense: get(Self::DENSE_ENTRY)?,
            superpoint: get(Self::SUPER_ENTRY)?,
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(&ParamStore::load(path)?)
    }

    /// Input widths `(dense, superpoint)` before the lift.
    pub fn input_dims(&self) -> (usize, usize) {
        match self {
            Self::Builtin(cfg) => (cfg.width(), cfg.width()),
            Self::FileLoaded { dense, superpoint } => (dense.cols(), superpoint.cols()),
        }
    }

    pub fn raw(&self, graph: &SuperpointGraph) -> Result<RawFeatures> {
        match self {
            Self::Builtin(cfg) => {
                cfg.validate()?;
                let dense = graph.dense_points.points();
                Ok(RawFeatures {
                    dense: describe(dense, dense, cfg.dense_voxel, &cfg.radius_scales),
                    superpoint: describe(
                        graph.superpoints.points(),
                        dense,
                        cfg.super_voxel,
                        &cfg.radius_scales,
                    ),
                })
            }
            Self::FileLoaded { dense, superpoint } => {
                if dense.rows() != graph.num_dense() {
                    return Err(Error::Data(format!(
                        "dense level: file has {} rows, graph has {} points",
                        dense.rows(),
                        graph.num_dense()
                    )));
                }
                if superpoint.rows() != graph.num_superpoints() {
                    return Err(Error::Data(format!(
                        "superpoint level: file has {} rows, graph has {} superpoints",
                        superpoint.rows(),
                        graph.num_superpoints()
                    )));
                }
                Ok(RawFeatures {
                    dense: dense.clone(),
                    superpoint: superpoint.clone(),
                })
            }
        }
    }
}

/// Descriptor of every `centers` point against the `support` cloud.
pub fn describe(centers: &[Vec3], support: &[Vec3], voxel: f64, scales: &[f64]) -> Tensor {
    let tree = KdTree::build(support);
    let width = CHANNELS_PER_SCALE * scales.len();
    let mut out = Vec::with_capacity(centers.len() * width);
    for c in centers {
        for &s in scales {
            out.extend_from_slice(&ball_descriptor(&tree, support, c, s * voxel));
        }
    }
    Tensor::new(vec![centers.len(), width], out).expect("descriptor size")
}

fn ball_descriptor(
    tree: &KdTree<'_>,
    support: &[Vec3],
    c: &Vec3,
    radius: f64,
) -> [f64; CHANNELS_PER_SCALE] {
    let mut d = [0.0; CHANNELS_PER_SCALE];
    let idx = tree.within(c, radius);
    // Smooth window so points crossing the ball boundary change nothing
    // abruptly.
    let mut total = 0.0;
    let mut mean = [0.0; 3];
    let mut weighted = Vec::with_capacity(idx.len());
    for &i in &idx {
        let p = support[i];
        let t = linalg::norm(&linalg::sub(&p, c)) / radius;
        let w = (1.0 - t * t).max(0.0).powi(2);
        if w == 0.0 {
            continue;
        }
        // Triangular binning over bin centres (b + 0.5)/HIST_BINS.
        let x = t * HIST_BINS as f64 - 0.5;
        let lo = x.floor();
        let frac = x - lo;
        let lo = lo as isize;
        for (b, share) in [(lo, 1.0 - frac), (lo + 1, frac)] {
            let b = b.clamp(0, HIST_BINS as isize - 1) as usize;
            d[b] += w * share;
        }
        total += w;
        mean = linalg::add(&mean, &linalg::scale(&p, w));
        weighted.push((p, w));
    }
    if total == 0.0 {
        return d;
    }
    // Unit mean per bin keeps the histogram on the same scale as the
    // eigenvalue ratios.
    for v in d.iter_mut().take(HIST_BINS) {
        *v *= HIST_BINS as f64 / total;
    }
    mean = linalg::scale(&mean, 1.0 / total);
    let mut cov = [[0.0; 3]; 3];
    for (p, w) in &weighted {
        let q = linalg::sub(p, &mean);
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += w * q[a] * q[b];
            }
        }
    }
    let (ev, _) = linalg::sym_eig3(&cov);
    let ev = ev.map(|v| v.max(0.0));
    let sum: f64 = ev.iter().sum();
    if sum > 0.0 {
        for k in 0..3 {
            d[HIST_BINS + k] = ev[k] / sum;
        }
    }
    d
}

/// Affine map of raw features to the working width of one level.
#[derive(Clone, Debug)]
pub struct Lift {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Lift {
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / input as f64).sqrt()).expect("valid std");
        Self {
            weight: Tensor::from_fn(input, output, |_, _| normal.sample(rng)),
            bias: Tensor::zeros(1, output),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.weight)?;
        let c = y.cols();
        for row in y.data_mut().chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Ok(y)
    }

    pub fn on_tape(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = tape.matmul(x, weight)?;
        tape.add_row(y, bias)
    }
}

/// Fills both feature matrices of `graph` by lifting the provider's raw
/// features.
pub fn compute_features(
    graph: &SuperpointGraph,
    provider: &FeatureProvider,
    dense_lift: &Lift,
    super_lift: &Lift,
) -> Result<SuperpointGraph> {
    let raw = provider.raw(graph)?;
    let dense = dense_lift.apply(&raw.dense)?;
    let sup = super_lift.apply(&raw.superpoint)?;
    if !dense.all_finite() || !sup.all_finite() {
        return Err(Error::Data("features contain non-finite values".into()));
    }
    let mut out = graph.clone();
    out.dense_features = Some(dense);
    out.superpoint_features = Some(sup);
    Ok(out)
}
