//! Built-in shapes and partial-overlap pair generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::cloud::{apply_transform, PointCloud, RigidTransform};
use crate::error::{Error, Result};
use crate::linalg::{self, axis_angle, Mat3, Vec3};
use crate::registration::PairSet;

/// Crop attempts before giving up.
pub const MAX_CROP_RETRIES: usize = 100;

/// Surface patches that shapes are assembled from.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Ellipsoid { center: Vec3, radii: Vec3, rotation: Mat3 },
    Cuboid { center: Vec3, half: Vec3, rotation: Mat3 },
    Cylinder { center: Vec3, radius: f64, half_height: f64, rotation: Mat3 },
    /// Parallelogram `center + a·u + b·v` for `a, b ∈ [−1, 1]`.
    Quad { center: Vec3, u: Vec3, v: Vec3 },
}

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn unit_vector(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v: Vec3 = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = linalg::norm(&v);
        if n > 1e-12 {
            return linalg::scale(&v, 1.0 / n);
        }
    }
}

impl Primitive {
    pub fn area(&self) -> f64 {
        use std::f64::consts::PI;
        match self {
            Primitive::Ellipsoid { radii: [a, b, c], .. } => {
                // Thomsen's approximation.
                let p = 1.6075;
                let s = ((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0;
                4.0 * PI * s.powf(1.0 / p)
            }
            Primitive::Cuboid { half: [a, b, c], .. } => 8.0 * (a * b + b * c + a * c),
            Primitive::Cylinder { radius, half_height, .. } => {
                4.0 * PI * radius * half_height + 2.0 * PI * radius * radius
            }
            Primitive::Quad { u, v, .. } => 4.0 * linalg::norm(&linalg::cross(u, v)),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec3 {
        let place = |center: &Vec3, rot: &Mat3, local: Vec3| linalg::add(center, &linalg::mat_vec(rot, &local));
        match self {
            Primitive::Ellipsoid { center, radii, rotation } => {
                let u = unit_vector(rng);
                place(center, rotation, [u[0] * radii[0], u[1] * radii[1], u[2] * radii[2]])
            }
            Primitive::Cuboid { center, half, rotation } => {
                let [a, b, c] = *half;
                let faces = [b * c, b * c, a * c, a * c, a * b, a * b];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.random::<f64>() * total;
                let mut f = 0;
                while f < 5 && pick >= faces[f] {
                    pick -= faces[f];
                    f += 1;
                }
                let s = rng.random_range(-1.0..1.0);
                let t = rng.random_range(-1.0..1.0);
                let sign = if f % 2 == 0 { 1.0 } else { -1.0 };
                let local = match f / 2 {
                    0 => [sign * a, s * b, t * c],
                    1 => [s * a, sign * b, t * c],
                    _ => [s * a, t * b, sign * c],
                };
                place(center, rotation, local)
            }
            Primitive::Cylinder { center, radius, half_height, rotation } => {
                let side = 2.0 * half_height;
                let cap = *radius;
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let local = if rng.random::<f64>() * (side + cap) < side {
                    [radius * theta.cos(), radius * theta.sin(), rng.random_range(-1.0..1.0) * half_height]
                } else {
                    let r = radius * rng.random::<f64>().sqrt();
                    let z = if rng.random::<bool>() { *half_height } else { -half_height };
                    [r * theta.cos(), r * theta.sin(), z]
                };
                place(center, rotation, local)
            }
            Primitive::Quad { center, u, v } => {
                let a = rng.random_range(-1.0..1.0);
                let b = rng.random_range(-1.0..1.0);
                linalg::add(center, &linalg::add(&linalg::scale(u, a), &linalg::scale(v, b)))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Sphere,
    Box { half: Vec3 },
    /// Rabbit-like composite of ellipsoids.
    Bunny,
    /// Floor, two walls and a table.
    Room,
    Composite(Vec<Primitive>),
}

impl Shape {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "sphere" => Ok(Shape::Sphere),
            "box" => Ok(Shape::Box { half: [0.8, 0.5, 0.3] }),
            "bunny" => Ok(Shape::Bunny),
            "room" => Ok(Shape::Room),
            _ => Err(Error::Config(format!("unknown shape `{name}`"))),
        }
    }

    pub fn primitives(&self) -> Vec<Primitive> {
        let ell = |center: Vec3, radii: Vec3| Primitive::Ellipsoid { center, radii, rotation: IDENTITY };
        match self {
            Shape::Sphere => vec![ell([0.0; 3], [1.0; 3])],
            Shape::Box { half } => vec![Primitive::Cuboid {
                center: [0.0; 3],
                half: *half,
                rotation: IDENTITY,
            }],
            Shape::Bunny => vec![
                ell([0.0, 0.0, 0.0], [0.55, 0.4, 0.42]),
                ell([0.5, 0.0, 0.35], [0.25, 0.22, 0.22]),
                Primitive::Ellipsoid {
                    center: [0.5, 0.1, 0.72],
                    radii: [0.06, 0.05, 0.25],
                    rotation: axis_angle(&[1.0, 0.0, 0.0], -0.3),
                },
                Primitive::Ellipsoid {
                    center: [0.45, -0.1, 0.7],
                    radii: [0.06, 0.05, 0.22],
                    rotation: axis_angle(&[0.0, 1.0, 0.0], 0.5),
                },
                ell([-0.58, 0.0, 0.1], [0.1, 0.1, 0.1]),
                ell([0.3, 0.2, -0.38], [0.18, 0.08, 0.06]),
                ell([0.3, -0.2, -0.38], [0.18, 0.08, 0.06]),
            ],
            Shape::Room => vec![
                Primitive::Quad { center: [0.0, 0.0, -0.5], u: [1.0, 0.0, 0.0], v: [0.0, 0.8, 0.0] },
                Primitive::Quad { center: [0.0, 0.8, 0.1], u: [1.0, 0.0, 0.0], v: [0.0, 0.0, 0.6] },
                Primitive::Quad { center: [-1.0, 0.0, 0.1], u: [0.0, 0.8, 0.0], v: [0.0, 0.0, 0.6] },
                Primitive::Cuboid {
                    center: [0.3, -0.1, -0.3],
                    half: [0.3, 0.2, 0.02],
                    rotation: axis_angle(&[0.0, 0.0, 1.0], 0.3),
                },
                Primitive::Cylinder {
                    center: [-0.5, 0.4, -0.3],
                    radius: 0.12,
                    half_height: 0.2,
                    rotation: IDENTITY,
                },
            ],
            Shape::Composite(p) => p.clone(),
        }
    }

    /// `n` surface points, area-weighted across primitives.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<PointCloud> {
        let prims = self.primitives();
        let areas: Vec<f64> = prims.iter().map(Primitive::area).collect();
        let total: f64 = areas.iter().sum();
        if n == 0 || prims.is_empty() || !(total > 0.0) {
            return Err(Error::Generation("shape has no surface to sample".into()));
        }
        let mut pts = Vec::with_capacity(n);
        for _ in 0..n {
            let mut pick = rng.random::<f64>() * total;
            let mut k = 0;
            while k + 1 < prims.len() && pick >= areas[k] {
                pick -= areas[k];
                k += 1;
            }
            pts.push(prims[k].sample(rng));
        }
        PointCloud::new(pts)
    }

    /// Random asymmetric union of 3 to 5 primitives.
    pub fn random_composite(rng: &mut impl Rng) -> Shape {
        let count = rng.random_range(3..=5);
        let mut prims = Vec::with_capacity(count);
        for _ in 0..count {
            let center = [
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
            ];
            let rotation = axis_angle(&unit_vector(rng), rng.random_range(0.0..std::f64::consts::PI));
            let kind = rng.random_range(0..3);
            let size: Vec3 = [
                rng.random_range(0.15..0.6),
                rng.random_range(0.15..0.6),
                rng.random_range(0.15..0.6),
            ];
            prims.push(match kind {
                0 => Primitive::Ellipsoid { center, radii: size, rotation },
                1 => Primitive::Cuboid { center, half: size, rotation },
                _ => Primitive::Cylinder { center, radius: size[0] * 0.6, half_height: size[1], rotation },
            });
        }
        Shape::Composite(prims)
    }
}

/// Centred on the centroid and scaled so the farthest point has norm 1.
pub fn normalize_unit_sphere(pc: &PointCloud) -> Result<PointCloud> {
    let c = pc.centroid();
    let r = pc
        .points()
        .iter()
        .map(|p| linalg::norm(&linalg::sub(p, &c)))
        .fold(0.0, f64::max);
    if !(r > 0.0) {
        return Err(Error::Generation("cloud collapses to a point".into()));
    }
    PointCloud::new(
        pc.points()
            .iter()
            .map(|p| linalg::scale(&linalg::sub(p, &c), 1.0 / r))
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub keep_ratio: f64,
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    /// Zero disables the jitter.
    pub noise_sigma: f64,
    pub noise_clip: f64,
    /// Points sampled from a built-in shape before cropping.
    pub shape_points: usize,
    pub sample_count: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            keep_ratio: 0.7,
            max_rotation_deg: 45.0,
            max_translation: 0.5,
            noise_sigma: 0.01,
            noise_clip: 0.05,
            shape_points: 1024,
            sample_count: 717,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(Error::Config("keep_ratio must lie in (0, 1]".into()));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg <= 180.0) {
            return Err(Error::Config("max_rotation must lie in [0, 180] degrees".into()));
        }
        if !(self.max_translation >= 0.0) || !(self.noise_sigma >= 0.0) || !(self.noise_clip >= 0.0) {
            return Err(Error::Config("translation and noise ranges must be nonnegative".into()));
        }
        if self.sample_count == 0 || self.shape_points == 0 {
            return Err(Error::Config("point counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthPair {
    pub source: PointCloud,
    pub target: PointCloud,
    /// Maps `source` onto `target`.
    pub transform: RigidTransform,
    /// The complete noise-free shape in the source frame.
    pub clean_source: PointCloud,
    /// The complete noise-free shape in the target frame.
    pub clean_target: PointCloud,
}

/// Keeps the `round(p·n)` points farthest along a random direction.
pub fn crop_half_space(pc: &PointCloud, keep_ratio: f64, rng: &mut impl Rng) -> Result<PointCloud> {
    let keep = (keep_ratio * pc.len() as f64).round() as usize;
    for _ in 0..MAX_CROP_RETRIES {
        let dir = unit_vector(rng);
        if keep == 0 {
            continue;
        }
        let proj: Vec<f64> = pc.points().iter().map(|p| linalg::dot(p, &dir)).collect();
        let mut idx: Vec<usize> = (0..pc.len()).collect();
        idx.sort_by(|&a, &b| proj[b].total_cmp(&proj[a]).then(a.cmp(&b)));
        idx.truncate(keep);
        idx.sort_unstable();
        return pc.select(&idx);
    }
    Err(Error::Generation(format!(
        "crop kept no points after {MAX_CROP_RETRIES} attempts (keep_ratio {keep_ratio})"
    )))
}

/// Rotation by an angle uniform in `[0, max_deg]` about a uniform axis and a
/// translation uniform in `[−max_t, max_t]³`.
pub fn random_transform(max_deg: f64, max_t: f64, rng: &mut impl Rng) -> RigidTransform {
    let axis = unit_vector(rng);
    let angle = rng.random::<f64>() * max_deg.to_radians();
    let t = [
        (rng.random::<f64>() * 2.0 - 1.0) * max_t,
        (rng.random::<f64>() * 2.0 - 1.0) * max_t,
        (rng.random::<f64>() * 2.0 - 1.0) * max_t,
    ];
    RigidTransform::new(axis_angle(&axis, angle), t).expect("rodrigues output is a rotation")
}

fn jitter(pc: &PointCloud, sigma: f64, clip: f64, rng: &mut impl Rng) -> Result<PointCloud> {
    if sigma == 0.0 {
        return Ok(pc.clone());
    }
    let n = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    PointCloud::new(
        pc.points()
            .iter()
            .map(|p| {
                let mut q = *p;
                for c in q.iter_mut() {
                    *c += n.sample(rng).clamp(-clip, clip);
                }
                q
            })
            .collect(),
    )
}

fn subsample(pc: &PointCloud, count: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    let mut idx: Vec<usize> = (0..pc.len()).collect();
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx.truncate(count.min(pc.len()));
    pc.select(&idx)
}

/// Two independently cropped, jittered and subsampled views of `shape`; the
/// source view is additionally moved by a random rigid motion.
pub fn make_pair(shape: &PointCloud, cfg: &SynthConfig) -> Result<SynthPair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = normalize_unit_sphere(shape)?;
    let crop_p = crop_half_space(&base, cfg.keep_ratio, &mut rng)?;
    let crop_q = crop_half_space(&base, cfg.keep_ratio, &mut rng)?;
    let motion = random_transform(cfg.max_rotation_deg, cfg.max_translation, &mut rng);
    let p = jitter(&apply_transform(&crop_p, &motion), cfg.noise_sigma, cfg.noise_clip, &mut rng)?;
    let q = jitter(&crop_q, cfg.noise_sigma, cfg.noise_clip, &mut rng)?;
    Ok(SynthPair {
        source: subsample(&p, cfg.sample_count, &mut rng)?,
        target: subsample(&q, cfg.sample_count, &mut rng)?,
        transform: motion.inverse(),
        clean_source: apply_transform(&base, &motion),
        clean_target: base,
    })
}

/// Samples a built-in shape with the config's seed and generates a pair.
pub fn make_shape_pair(shape: &Shape, cfg: &SynthConfig) -> Result<SynthPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5a4e);
    let pc = shape.sample(cfg.shape_points, &mut rng)?;
    make_pair(&pc, cfg)
}

/// `count` pairs of random composite shapes with consecutive seeds.
pub fn composite_pairs(count: usize, cfg: &SynthConfig) -> Result<Vec<SynthPair>> {
    (0..count)
        .map(|k| {
            let c = SynthConfig {
                seed: cfg.seed.wrapping_add(k as u64),
                ..cfg.clone()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0xc0_3b05);
            make_shape_pair(&Shape::random_composite(&mut rng), &c)
        })
        .collect()
}

/// Synthetic putative correspondences with a known fraction of inliers,
/// grouped the way superpoint matches group them.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedConfig {
    pub pairs: usize,
    pub inlier_ratio: f64,
    pub groups: usize,
    /// Inlier share inside a correctly matched group.
    pub group_purity: f64,
    pub patch_radius: f64,
    pub noise_sigma: f64,
    pub noise_clip: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            pairs: 5000,
            inlier_ratio: 0.4,
            groups: 50,
            group_purity: 0.8,
            patch_radius: 0.15,
            noise_sigma: 0.01,
            noise_clip: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlantedSet {
    pub groups: Vec<PairSet>,
    /// All groups concatenated in order.
    pub all: PairSet,
    /// Whether each pair of `all` was planted as an inlier.
    pub inlier: Vec<bool>,
    pub transform: RigidTransform,
}

fn in_ball(center: &Vec3, r: f64, rng: &mut impl Rng) -> Vec3 {
    let d = unit_vector(rng);
    linalg::add(center, &linalg::scale(&d, r * rng.random::<f64>().cbrt()))
}

/// Correctly matched groups map their patch through the ground truth and
/// hold `group_purity` inliers, the rest being local mismatches; the other
/// groups follow their own random rigid motion. Exactly
/// `round(inlier_ratio · pairs)` pairs are inliers.
pub fn planted_correspondences(cfg: &PlantedConfig) -> Result<PlantedSet> {
    let ok = cfg.pairs >= cfg.groups
        && cfg.groups > 0
        && (0.0..=1.0).contains(&cfg.inlier_ratio)
        && cfg.group_purity > 0.0
        && cfg.group_purity <= 1.0
        && cfg.patch_radius > 0.0;
    if !ok {
        return Err(Error::Config(format!("invalid planted correspondence settings {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let transform = random_transform(180.0, 0.5, &mut rng);
    let size = cfg.pairs / cfg.groups;
    let sizes: Vec<usize> = (0..cfg.groups)
        .map(|g| size + usize::from(g < cfg.pairs % cfg.groups))
        .collect();
    let inliers = (cfg.inlier_ratio * cfg.pairs as f64).round() as usize;
    let per_correct = ((cfg.group_purity * size as f64).round() as usize).max(1);
    let n_correct = inliers.div_ceil(per_correct).min(cfg.groups);
    let mut order: Vec<usize> = (0..cfg.groups).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    // Inlier quota per group, spread as evenly as possible over the correct ones.
    let mut quota = vec![0usize; cfg.groups];
    let mut left = inliers;
    for (rank, &g) in order.iter().take(n_correct).enumerate() {
        let share = left.div_ceil(n_correct - rank).min(sizes[g]);
        quota[g] = share;
        left -= share;
    }
    if left > 0 {
        return Err(Error::Config("inlier ratio too high for the group purity".into()));
    }
    let jit = |p: Vec3, rng: &mut ChaCha8Rng| -> Vec3 {
        if cfg.noise_sigma == 0.0 {
            return p;
        }
        p.map(|c| c + noise.sample(rng).clamp(-cfg.noise_clip, cfg.noise_clip))
    };
    let mut out = PlantedSet {
        groups: Vec::with_capacity(cfg.groups),
        all: PairSet::default(),
        inlier: Vec::with_capacity(cfg.pairs),
        transform,
    };
    for g in 0..cfg.groups {
        let center = in_ball(&[0.0; 3], 1.0, &mut rng);
        let correct = order[..n_correct].contains(&g);
        let motion = if correct { transform } else { random_transform(180.0, 0.5, &mut rng) };
        let mut set = PairSet::default();
        for k in 0..sizes[g] {
            let p = in_ball(&center, cfg.patch_radius, &mut rng);
            let is_inlier = k < quota[g];
            let q = if !correct || is_inlier {
                jit(motion.apply(&p), &mut rng)
            } else {
                // A wrong point near the right location, clearly beyond
                // any inlier radius in use.
                let off = linalg::scale(&unit_vector(&mut rng), rng.random_range(0.15..0.45));
                linalg::add(&transform.apply(&p), &off)
            };
            let w = rng.random_range(0.1..1.0);
            set.push(p, q, w);
            out.all.push(p, q, w);
            out.inlier.push(is_inlier);
        }
        out.groups.push(set);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape_cloud(seed: u64) -> PointCloud {
        Shape::Bunny.sample(1024, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn clean_full_overlap_is_exactly_registrable() {
        let cfg = SynthConfig {
            keep_ratio: 1.0,
            max_rotation_deg: 0.0,
            noise_sigma: 0.0,
            sample_count: 1024,
            seed: 3,
            ..Default::default()
        };
        let pair = make_pair(&shape_cloud(1), &cfg).unwrap();
        assert_eq!(linalg::rotation_angle(&pair.transform.rotation, &IDENTITY), 0.0);
        let mut a: Vec<Vec3> = pair.source.points().iter().map(|p| pair.transform.apply(p)).collect();
        let mut b = pair.target.points().to_vec();
        let key = |v: &Vec3| (v[0] * 1e6).round() as i64;
        a.sort_by_key(key);
        b.sort_by_key(key);
        for (x, y) in a.iter().zip(&b) {
            assert!(linalg::norm(&linalg::sub(x, y)) < 1e-12);
        }
    }

    #[test]
    fn crop_keeps_the_requested_fraction() {
        let pc = normalize_unit_sphere(&shape_cloud(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let c = crop_half_space(&pc, 0.7, &mut rng).unwrap();
            let frac = c.len() as f64 / pc.len() as f64;
            assert!((frac - 0.7).abs() <= 0.02);
        }
        assert!(matches!(
            crop_half_space(&pc, 1e-6, &mut rng),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn crop_is_a_half_space() {
        let pc = normalize_unit_sphere(&shape_cloud(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut probe = rng.clone();
        let c = crop_half_space(&pc, 0.7, &mut rng).unwrap();
        let dir = unit_vector(&mut probe);
        let kept_min = c.points().iter().map(|p| linalg::dot(p, &dir)).fold(f64::INFINITY, f64::min);
        let above = pc.points().iter().filter(|p| linalg::dot(p, &dir) >= kept_min).count();
        assert_eq!(above, c.len());
    }

    #[test]
    fn same_seed_same_pair() {
        let cfg = SynthConfig {
            seed: 11,
            ..Default::default()
        };
        let s = shape_cloud(5);
        let (a, b) = (make_pair(&s, &cfg).unwrap(), make_pair(&s, &cfg).unwrap());
        assert_eq!(a.source, b.source);
        assert_eq!(a.target, b.target);
        assert_eq!(a.transform, b.transform);
        assert_eq!(a.source.len(), 717);
        let other = make_pair(&s, &SynthConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.source, other.source);
    }

    #[test]
    fn transform_respects_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let t = random_transform(45.0, 0.5, &mut rng);
            assert!(linalg::rotation_angle(&t.rotation, &IDENTITY).to_degrees() <= 45.0 + 1e-9);
            assert!(t.translation.iter().all(|c| c.abs() <= 0.5));
        }
    }

    #[test]
    fn noise_is_clipped() {
        let pc = PointCloud::new(vec![[0.0; 3]; 500]).unwrap();
        let j = jitter(&pc, 1.0, 0.05, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(j.points().iter().flatten().all(|c| c.abs() <= 0.05));
    }

    #[test]
    fn builtin_shapes_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for name in ["sphere", "box", "bunny", "room"] {
            let pc = Shape::by_name(name).unwrap().sample(300, &mut rng).unwrap();
            let n = normalize_unit_sphere(&pc).unwrap();
            let r = n.points().iter().map(linalg::norm).fold(0.0, f64::max);
            assert!((r - 1.0).abs() < 1e-12);
        }
        assert!(Shape::by_name("teapot").is_err());
        let c = Shape::random_composite(&mut rng);
        assert!(c.sample(100, &mut rng).is_ok());
    }

    #[test]
    fn planted_sets_hit_the_inlier_count() {
        let cfg = PlantedConfig {
            seed: 3,
            ..Default::default()
        };
        let set = planted_correspondences(&cfg).unwrap();
        assert_eq!(set.all.len(), 5000);
        assert_eq!(set.groups.iter().map(|g| g.len()).sum::<usize>(), 5000);
        assert_eq!(set.inlier.iter().filter(|&&b| b).count(), 2000);
        // Planted labels agree with residuals under the ground truth.
        for k in 0..set.all.len() {
            let r = linalg::norm(&linalg::sub(&set.transform.apply(&set.all.src[k]), &set.all.dst[k]));
            if set.inlier[k] {
                assert!(r <= 0.05 * 3f64.sqrt() + 1e-12);
            } else {
                assert!(r > 0.1, "outlier {k} lies {r} from truth");
            }
        }
        let again = planted_correspondences(&cfg).unwrap();
        assert_eq!(again.all, set.all);
    }
}
