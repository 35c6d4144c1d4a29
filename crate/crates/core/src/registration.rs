//! Rigid pose estimation from point correspondences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cloud::{PointCloud, RigidTransform};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat3, Vec3};
use crate::matching::{CorrespondenceSet, Level};

/// Second singular value below this fraction of the first means the
/// correspondences do not span a plane.
pub const DEGENERATE_RATIO: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub tau_a: f64,
    pub n_r: usize,
    pub min_local_corr: usize,
    pub ransac_iters: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            tau_a: 0.1,
            n_r: 5,
            min_local_corr: 3,
            ransac_iters: 50_000,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_a > 0.0) {
            return Err(Error::Config("tau_a must be positive".into()));
        }
        if self.min_local_corr < 3 {
            return Err(Error::Config("min_local_corr must be at least 3".into()));
        }
        Ok(())
    }
}

/// Aligned source/target coordinates of a set of correspondences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairSet {
    pub src: Vec<Vec3>,
    pub dst: Vec<Vec3>,
    pub weights: Vec<f64>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn push(&mut self, p: Vec3, q: Vec3, w: f64) {
        self.src.push(p);
        self.dst.push(q);
        self.weights.push(w);
    }

    /// Point-level correspondences resolved against the two dense clouds,
    /// weighted by their scores.
    pub fn from_corr(corr: &CorrespondenceSet, p: &PointCloud, q: &PointCloud) -> Result<Self> {
        if corr.level != Level::Point {
            return Err(Error::Data("pose estimation needs point-level correspondences".into()));
        }
        corr.validate(p.len(), q.len())?;
        let mut s = PairSet::default();
        for (k, &(i, j)) in corr.pairs.iter().enumerate() {
            s.push(p.points()[i], q.points()[j], corr.scores[k]);
        }
        Ok(s)
    }

    /// One set per group id, in id order (ids without pairs yield empty sets).
    pub fn split_groups(corr: &CorrespondenceSet, p: &PointCloud, q: &PointCloud) -> Result<Vec<Self>> {
        let all = Self::from_corr(corr, p, q)?;
        let groups = corr
            .group_of
            .as_ref()
            .ok_or_else(|| Error::Data("correspondences carry no group ids".into()))?;
        let n = groups.iter().map(|g| g + 1).max().unwrap_or(0);
        let mut out = vec![PairSet::default(); n];
        for (k, &g) in groups.iter().enumerate() {
            out[g].push(all.src[k], all.dst[k], all.weights[k]);
        }
        Ok(out)
    }

    pub fn select(&self, idx: &[usize]) -> PairSet {
        PairSet {
            src: idx.iter().map(|&i| self.src[i]).collect(),
            dst: idx.iter().map(|&i| self.dst[i]).collect(),
            weights: idx.iter().map(|&i| self.weights[i]).collect(),
        }
    }

    pub fn residual(&self, k: usize, t: &RigidTransform) -> f64 {
        linalg::norm(&linalg::sub(&t.apply(&self.src[k]), &self.dst[k]))
    }
}

/// Closed-form minimizer of `Σ w_j ‖R·p_j + t − q_j‖²`.
pub fn weighted_svd(src: &[Vec3], dst: &[Vec3], weights: &[f64]) -> Result<RigidTransform> {
    if src.len() != dst.len() || src.len() != weights.len() {
        return Err(Error::Dimension("pair and weight counts differ".into()));
    }
    if src.len() < 3 {
        return Err(Error::Estimation(format!("need at least 3 pairs, got {}", src.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Estimation("weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Estimation("all weights are zero".into()));
    }
    let mut cp = [0.0; 3];
    let mut cq = [0.0; 3];
    for ((p, q), w) in src.iter().zip(dst).zip(weights) {
        cp = linalg::add(&cp, &linalg::scale(p, *w));
        cq = linalg::add(&cq, &linalg::scale(q, *w));
    }
    cp = linalg::scale(&cp, 1.0 / total);
    cq = linalg::scale(&cq, 1.0 / total);
    let mut h: Mat3 = [[0.0; 3]; 3];
    for ((p, q), w) in src.iter().zip(dst).zip(weights) {
        let a = linalg::sub(p, &cp);
        let b = linalg::sub(q, &cq);
        for r in 0..3 {
            for c in 0..3 {
                h[r][c] += w * a[r] * b[c];
            }
        }
    }
    let svd = linalg::svd3(&h);
    if !(svd.s[1] > DEGENERATE_RATIO * svd.s[0]) {
        return Err(Error::Degenerate(format!(
            "cross-covariance singular values {:?}",
            svd.s
        )));
    }
    // H = U S Vᵀ ⇒ R = V·diag(1, 1, d)·Uᵀ with d fixing reflections.
    let vut = linalg::mat_mul(&svd.v, &linalg::transpose(&svd.u));
    let d = if linalg::det(&vut) < 0.0 { -1.0 } else { 1.0 };
    let mut vd = svd.v;
    for row in vd.iter_mut() {
        row[2] *= d;
    }
    let r = linalg::mat_mul(&vd, &linalg::transpose(&svd.u));
    let t = linalg::sub(&cq, &linalg::mat_vec(&r, &cp));
    RigidTransform::new(r, t).map_err(|e| Error::Estimation(format!("solver produced {e}")))
}

pub fn weighted_svd_pairs(set: &PairSet) -> Result<RigidTransform> {
    weighted_svd(&set.src, &set.dst, &set.weights)
}

/// Indices of pairs with residual strictly below `tau`.
pub fn inlier_indices(set: &PairSet, t: &RigidTransform, tau: f64) -> Vec<usize> {
    (0..set.len()).filter(|&k| set.residual(k, t) < tau).collect()
}

pub fn count_inliers(set: &PairSet, t: &RigidTransform, tau: f64) -> usize {
    (0..set.len()).filter(|&k| set.residual(k, t) < tau).count()
}

fn mean_residual(set: &PairSet, idx: &[usize], t: &RigidTransform) -> f64 {
    if idx.is_empty() {
        return f64::INFINITY;
    }
    idx.iter().map(|&k| set.residual(k, t)).sum::<f64>() / idx.len() as f64
}

#[derive(Clone, Debug)]
pub struct LgrOutcome {
    pub transform: RigidTransform,
    /// Indices into the global pair set of the final inliers.
    pub inliers: Vec<usize>,
    /// Inlier count of the selected candidate followed by the count after
    /// each refinement round.
    pub history: Vec<usize>,
    /// Number of local hypotheses that were solved.
    pub candidates: usize,
    /// Pose before any refinement.
    pub unrefined: RigidTransform,
}

/// Local hypotheses from each qualifying group, global selection by inlier
/// count over `all`, then `n_r` refinement rounds on the current inliers.
pub fn local_to_global(groups: &[PairSet], all: &PairSet, cfg: &EstimatorConfig) -> Result<LgrOutcome> {
    cfg.validate()?;
    let mut best: Option<(usize, f64, RigidTransform)> = None;
    let mut candidates = 0;
    for g in groups.iter().filter(|g| g.len() >= cfg.min_local_corr) {
        let t = match weighted_svd_pairs(g) {
            Ok(t) => t,
            Err(Error::Degenerate(_)) | Err(Error::Estimation(_)) => continue,
            Err(e) => return Err(e),
        };
        candidates += 1;
        let inl = inlier_indices(all, &t, cfg.tau_a);
        let score = (inl.len(), mean_residual(all, &inl, &t));
        let better = match &best {
            None => true,
            Some((n, r, _)) => score.0 > *n || (score.0 == *n && score.1 < *r),
        };
        if better {
            best = Some((score.0, score.1, t));
        }
    }
    let Some((count, _, mut t)) = best else {
        return Err(Error::Estimation(format!(
            "no group with at least {} usable correspondences",
            cfg.min_local_corr
        )));
    };
    let unrefined = t;
    let mut history = vec![count];
    let mut best = (count, t);
    for _ in 0..cfg.n_r {
        let inl = inlier_indices(all, &t, cfg.tau_a);
        let mut sub = all.select(&inl);
        sub.weights.iter_mut().for_each(|w| *w = 1.0);
        match weighted_svd_pairs(&sub) {
            Ok(next) => t = next,
            Err(Error::Degenerate(_)) | Err(Error::Estimation(_)) => break,
            Err(e) => return Err(e),
        }
        // A least-squares refit can shed a marginal inlier; the iteration
        // carries on from the refit but the best pose so far is returned.
        let n = count_inliers(all, &t, cfg.tau_a);
        if n >= best.0 {
            best = (n, t);
        }
        history.push(best.0);
    }
    let t = best.1;
    Ok(LgrOutcome {
        transform: t,
        inliers: inlier_indices(all, &t, cfg.tau_a),
        history,
        candidates,
        unrefined,
    })
}

/// Classic 3-point RANSAC with a final refit on the best inlier set.
pub fn ransac_estimate(set: &PairSet, cfg: &EstimatorConfig, seed: u64) -> Result<RigidTransform> {
    cfg.validate()?;
    let n = set.len();
    if n < 3 {
        return Err(Error::Estimation(format!("need at least 3 pairs, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ones = [1.0; 3];
    let mut best: Option<(usize, RigidTransform)> = None;
    for _ in 0..cfg.ransac_iters {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let mut c = rng.random_range(0..n - 2);
        for lo in [a.min(b), a.max(b)] {
            if c >= lo {
                c += 1;
            }
        }
        let src = [set.src[a], set.src[b], set.src[c]];
        let dst = [set.dst[a], set.dst[b], set.dst[c]];
        let Ok(t) = weighted_svd(&src, &dst, &ones) else { continue };
        let k = count_inliers(set, &t, cfg.tau_a);
        if best.as_ref().is_none_or(|(bk, _)| k > *bk) {
            best = Some((k, t));
        }
    }
    let Some((_, t)) = best else {
        return Err(Error::Estimation("every sampled triplet was degenerate".into()));
    };
    let inl = inlier_indices(set, &t, cfg.tau_a);
    if inl.len() < 3 {
        return Ok(t);
    }
    let mut sub = set.select(&inl);
    sub.weights.iter_mut().for_each(|w| *w = 1.0);
    Ok(weighted_svd_pairs(&sub).unwrap_or(t))
}

/// Weighted SVD on the `n` highest-scoring correspondences.
pub fn svd_top_n(set: &PairSet, n: usize) -> Result<RigidTransform> {
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.sort_by(|&a, &b| set.weights[b].total_cmp(&set.weights[a]).then(a.cmp(&b)));
    idx.truncate(n);
    weighted_svd_pairs(&set.select(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::axis_angle;

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
        RigidTransform::new(
            axis_angle(&axis, rng.random_range(0.0..std::f64::consts::PI)),
            [rng.random::<f64>() - 0.5, rng.random::<f64>(), rng.random::<f64>() * 2.0],
        )
        .unwrap()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5])
            .collect()
    }

    fn planted(rng: &mut ChaCha8Rng, t: &RigidTransform, n: usize) -> PairSet {
        let mut s = PairSet::default();
        for p in random_points(rng, n) {
            s.push(p, t.apply(&p), 1.0);
        }
        s
    }

    #[test]
    fn aligned_pairs_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = planted(&mut rng, &RigidTransform::identity(), 10);
        let t = weighted_svd_pairs(&s).unwrap();
        assert!(t.rotation_error_deg(&RigidTransform::identity()).to_radians() < 1e-9);
        assert!(t.translation_error(&RigidTransform::identity()) < 1e-9);
    }

    #[test]
    fn recovers_planted_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let gt = random_transform(&mut rng);
            let t = weighted_svd_pairs(&planted(&mut rng, &gt, 10)).unwrap();
            assert!(t.rotation_error_deg(&gt).to_radians() < 1e-9);
            assert!(t.translation_error(&gt) < 1e-9);
        }
    }

    #[test]
    fn zero_weight_outlier_is_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_transform(&mut rng);
        let mut s = planted(&mut rng, &gt, 8);
        s.push([0.1, 0.2, 0.3], [50.0, -40.0, 3.0], 0.0);
        let t = weighted_svd_pairs(&s).unwrap();
        assert!(t.rotation_error_deg(&gt).to_radians() < 1e-9);
        assert!(t.translation_error(&gt) < 1e-9);
    }

    #[test]
    fn error_contracts() {
        let p = [[0.0; 3], [1.0, 0.0, 0.0]];
        assert!(matches!(weighted_svd(&p, &p, &[1.0, 1.0]), Err(Error::Estimation(_))));
        let p = [[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert!(matches!(weighted_svd(&p, &p, &[0.0; 3]), Err(Error::Estimation(_))));
        let line = [[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        assert!(matches!(weighted_svd(&line, &line, &[1.0; 4]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn planar_points_are_not_reflected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_transform(&mut rng);
        let mut s = PairSet::default();
        for _ in 0..10 {
            let p = [rng.random::<f64>(), rng.random::<f64>(), 0.0];
            s.push(p, gt.apply(&p), 1.0);
        }
        let t = weighted_svd_pairs(&s).unwrap();
        assert!((linalg::det(&t.rotation) - 1.0).abs() < 1e-9);
        assert!(t.rotation_error_deg(&gt) < 1e-7);
    }

    #[test]
    fn solution_is_locally_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_transform(&mut rng);
        let mut s = planted(&mut rng, &gt, 20);
        for (q, w) in s.dst.iter_mut().zip(s.weights.iter_mut()) {
            for c in q.iter_mut() {
                *c += 0.05 * (rng.random::<f64>() - 0.5);
            }
            *w = rng.random::<f64>() + 0.1;
        }
        let obj = |t: &RigidTransform| -> f64 {
            (0..s.len()).map(|k| s.weights[k] * s.residual(k, t).powi(2)).sum()
        };
        let t = weighted_svd_pairs(&s).unwrap();
        let base = obj(&t);
        for _ in 0..100 {
            let axis = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
            let d = RigidTransform::new(
                axis_angle(&axis, 1e-3 * rng.random::<f64>()),
                [1e-3 * (rng.random::<f64>() - 0.5), 0.0, 1e-3 * (rng.random::<f64>() - 0.5)],
            )
            .unwrap();
            assert!(base <= obj(&d.compose(&t)) + 1e-15);
        }
    }

    #[test]
    fn count_inliers_by_hand() {
        let mut s = PairSet::default();
        for (k, off) in [0.0, 0.05, 0.099, 0.2, 0.1].iter().enumerate() {
            let p = [0.0, k as f64, 0.0];
            s.push(p, [*off, k as f64, 0.0], 1.0);
        }
        assert_eq!(count_inliers(&s, &RigidTransform::identity(), 0.1), 3);
        let far = RigidTransform::from_translation([100.0, 0.0, 0.0]);
        assert_eq!(count_inliers(&s, &far, 0.1), 0);
    }

    #[test]
    fn lgr_single_exact_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = random_transform(&mut rng);
        let s = planted(&mut rng, &gt, 12);
        let out = local_to_global(std::slice::from_ref(&s), &s, &EstimatorConfig::default()).unwrap();
        assert!(out.transform.rotation_error_deg(&gt) < 1e-7);
        assert_eq!(out.inliers.len(), 12);
    }

    #[test]
    fn lgr_picks_majority_candidate_and_skips_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt = random_transform(&mut rng);
        let wrong = random_transform(&mut rng);
        let good = planted(&mut rng, &gt, 14);
        let bad = planted(&mut rng, &wrong, 6);
        let mut all = good.clone();
        for k in 0..bad.len() {
            all.push(bad.src[k], bad.dst[k], 1.0);
        }
        let line = PairSet {
            src: vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            dst: vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            weights: vec![1.0; 3],
        };
        let cfg = EstimatorConfig {
            n_r: 0,
            ..Default::default()
        };
        let out = local_to_global(&[bad, line, good], &all, &cfg).unwrap();
        assert_eq!(out.candidates, 2);
        assert_eq!(out.inliers.len(), 14);
        assert!(out.transform.rotation_error_deg(&gt) < 1e-7);
        assert_eq!(out.transform, out.unrefined);
        assert_eq!(out.history.len(), 1);
        let empty = local_to_global(&[PairSet::default()], &all, &cfg);
        assert!(matches!(empty, Err(Error::Estimation(_))));
    }

    #[test]
    fn ransac_recovers_with_half_outliers_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt = random_transform(&mut rng);
        let mut s = planted(&mut rng, &gt, 100);
        for k in 0..50 {
            s.dst[k] = [rng.random::<f64>() * 4.0, rng.random::<f64>() * 4.0, rng.random::<f64>() * 4.0];
        }
        let cfg = EstimatorConfig {
            ransac_iters: 1000,
            ..Default::default()
        };
        let a = ransac_estimate(&s, &cfg, 42).unwrap();
        assert!(a.rotation_error_deg(&gt).to_radians() < 1e-3);
        assert!(a.translation_error(&gt) < 1e-3);
        let b = ransac_estimate(&s, &cfg, 42).unwrap();
        assert_eq!(a, b);
        assert!(ransac_estimate(&s.select(&[0, 1]), &cfg, 1).is_err());
    }

    #[test]
    fn equivariance_under_frame_changes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt = random_transform(&mut rng);
        let (ta, tb) = (random_transform(&mut rng), random_transform(&mut rng));
        let mut s = planted(&mut rng, &gt, 30);
        for q in s.dst.iter_mut() {
            q[0] += 0.01 * (rng.random::<f64>() - 0.5);
        }
        let moved = PairSet {
            src: s.src.iter().map(|p| ta.apply(p)).collect(),
            dst: s.dst.iter().map(|q| tb.apply(q)).collect(),
            weights: s.weights.clone(),
        };
        let cfg = EstimatorConfig::default();
        let t = local_to_global(std::slice::from_ref(&s), &s, &cfg).unwrap().transform;
        let t2 = local_to_global(std::slice::from_ref(&moved), &moved, &cfg).unwrap().transform;
        let expect = tb.compose(&t).compose(&ta.inverse());
        assert!(t2.rotation_error_deg(&expect).to_radians() < 1e-6);
        assert!(t2.translation_error(&expect) < 1e-6);
    }
}
