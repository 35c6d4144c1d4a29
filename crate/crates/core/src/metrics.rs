//! Registration quality measures.

use serde::Serialize;

use crate::cloud::{KdTree, PointCloud, RigidTransform, SuperpointGraph};
use crate::error::{Error, Result};
use crate::linalg::{self, Vec3};
use crate::matching::{CorrespondenceSet, Level};
use crate::training::{compute_overlap, make_gt_point_matches};

/// How a single pair is judged successfully registered.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecallProtocol {
    /// RMSE of ground-truth-corresponding points below `max`.
    Rmse { max: f64 },
    Pose { max_rre_deg: f64, max_rte: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Thresholds {
    pub inlier_radius: f64,
    pub fmr_min_ir: f64,
    pub recall: RecallProtocol,
    /// Radius used to decide that two patches overlap and to extract
    /// ground-truth point pairs.
    pub overlap_radius: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            inlier_radius: 0.1,
            fmr_min_ir: 0.05,
            recall: RecallProtocol::Rmse { max: 0.2 },
            overlap_radius: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub ir: Option<f64>,
    pub fmr: Option<f64>,
    pub rr: Option<f64>,
    pub pir: Option<f64>,
    pub rre_deg: Option<f64>,
    pub rte: Option<f64>,
    pub rmse: Option<f64>,
    pub chamfer: Option<f64>,
    pub num_correspondences: usize,
    pub num_superpoint_matches: usize,
    pub thresholds: Thresholds,
}

/// Fraction of pairs with residual strictly below `radius` under `t`.
pub fn inlier_ratio(src: &[Vec3], dst: &[Vec3], t: &RigidTransform, radius: f64) -> Option<f64> {
    if src.is_empty() {
        return None;
    }
    let hits = src
        .iter()
        .zip(dst)
        .filter(|(p, q)| linalg::norm(&linalg::sub(&t.apply(p), q)) < radius)
        .count();
    Some(hits as f64 / src.len() as f64)
}

/// Geodesic rotation error in degrees.
pub fn rre_deg(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    est.rotation_error_deg(gt)
}

pub fn rte(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    est.translation_error(gt)
}

/// Root-mean-square displacement between the two poses over `points`.
pub fn rmse(points: &[Vec3], est: &RigidTransform, gt: &RigidTransform) -> Option<f64> {
    if points.is_empty() {
        return None;
    }
    let s: f64 = points.iter().map(|p| linalg::dist2(&est.apply(p), &gt.apply(p))).sum();
    Some((s / points.len() as f64).sqrt())
}

fn mean_nn_sq(query: &[Vec3], base: &[Vec3]) -> f64 {
    let tree = KdTree::build(base);
    query
        .iter()
        .map(|q| {
            let d = tree.knn(q, 1)[0].distance;
            d * d
        })
        .sum::<f64>()
        / query.len() as f64
}

/// Modified Chamfer distance: each partial cloud against the other side's
/// complete clean shape, after moving the source by `est`.
pub fn modified_chamfer(
    source: &PointCloud,
    target: &PointCloud,
    clean_source: &PointCloud,
    clean_target: &PointCloud,
    est: &RigidTransform,
) -> f64 {
    let moved: Vec<Vec3> = source.points().iter().map(|p| est.apply(p)).collect();
    let moved_clean: Vec<Vec3> = clean_source.points().iter().map(|p| est.apply(p)).collect();
    mean_nn_sq(&moved, clean_target.points()) + mean_nn_sq(target.points(), &moved_clean)
}

/// Whether one pair counts as registered.
pub fn is_registered(
    protocol: RecallProtocol,
    est: &RigidTransform,
    gt: &RigidTransform,
    rmse_value: Option<f64>,
) -> Option<bool> {
    match protocol {
        RecallProtocol::Rmse { max } => rmse_value.map(|r| r < max),
        RecallProtocol::Pose { max_rre_deg, max_rte } => {
            Some(rre_deg(est, gt) < max_rre_deg && rte(est, gt) < max_rte)
        }
    }
}

pub struct MetricsInput<'a> {
    pub corr: &'a CorrespondenceSet,
    pub supermatches: &'a CorrespondenceSet,
    pub estimate: Option<&'a RigidTransform>,
    pub ground_truth: Option<&'a RigidTransform>,
    pub graph_p: &'a SuperpointGraph,
    pub graph_q: &'a SuperpointGraph,
    /// Complete clean shapes in the source and target frames.
    pub clean: Option<(&'a PointCloud, &'a PointCloud)>,
}

pub fn compute_metrics(input: &MetricsInput, th: &Thresholds) -> Result<MetricsReport> {
    let (gp, gq) = (input.graph_p, input.graph_q);
    if input.corr.level != Level::Point || input.supermatches.level != Level::Superpoint {
        return Err(Error::Data("metrics need point and superpoint correspondence sets".into()));
    }
    input.corr.validate(gp.num_dense(), gq.num_dense())?;
    input.supermatches.validate(gp.num_superpoints(), gq.num_superpoints())?;
    let mut r = MetricsReport {
        ir: None,
        fmr: None,
        rr: None,
        pir: None,
        rre_deg: None,
        rte: None,
        rmse: None,
        chamfer: None,
        num_correspondences: input.corr.len(),
        num_superpoint_matches: input.supermatches.len(),
        thresholds: *th,
    };
    if let Some(gt) = input.ground_truth {
        let (pp, qp) = (gp.dense_points.points(), gq.dense_points.points());
        let src: Vec<Vec3> = input.corr.pairs.iter().map(|&(i, _)| pp[i]).collect();
        let dst: Vec<Vec3> = input.corr.pairs.iter().map(|&(_, j)| qp[j]).collect();
        r.ir = Some(inlier_ratio(&src, &dst, gt, th.inlier_radius).unwrap_or(0.0));
        r.fmr = r.ir.map(|ir| if ir >= th.fmr_min_ir { 1.0 } else { 0.0 });
        if !input.supermatches.is_empty() {
            let table = compute_overlap(gp, gq, gt, th.overlap_radius);
            let hits = input
                .supermatches
                .pairs
                .iter()
                .filter(|&&(i, j)| table.forward.get(i, j) > 0.0)
                .count();
            r.pir = Some(hits as f64 / input.supermatches.len() as f64);
        }
        if let Some(est) = input.estimate {
            r.rre_deg = Some(rre_deg(est, gt));
            r.rte = Some(rte(est, gt));
            let gtm = make_gt_point_matches(pp, qp, gt, th.overlap_radius);
            let pts: Vec<Vec3> = if gtm.pairs.is_empty() {
                pp.to_vec()
            } else {
                gtm.pairs.iter().map(|&(i, _)| pp[i]).collect()
            };
            r.rmse = rmse(&pts, est, gt);
            r.rr = is_registered(th.recall, est, gt, r.rmse).map(|b| if b { 1.0 } else { 0.0 });
        }
    }
    if let (Some(est), Some((cs, ct))) = (input.estimate, input.clean) {
        r.chamfer = Some(modified_chamfer(&gp.dense_points, &gq.dense_points, cs, ct, est));
    }
    Ok(r)
}

/// Median of finite values; `None` when there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::group_points;
    use crate::linalg::axis_angle;

    #[test]
    fn exact_estimate_is_perfect() {
        let t = RigidTransform::new(axis_angle(&[0.0, 0.0, 1.0], 0.4), [0.1, 0.2, 0.3]).unwrap();
        let p: Vec<Vec3> = (0..10).map(|i| [i as f64, (i * i) as f64 * 0.1, 1.0]).collect();
        let q: Vec<Vec3> = p.iter().map(|x| t.apply(x)).collect();
        assert_eq!(inlier_ratio(&p, &q, &t, 0.1), Some(1.0));
        assert_eq!(rre_deg(&t, &t), 0.0);
        assert_eq!(rte(&t, &t), 0.0);
        assert_eq!(rmse(&p, &t, &t), Some(0.0));
    }

    #[test]
    fn quarter_turn_is_ninety_degrees() {
        let a = RigidTransform::identity();
        let b = RigidTransform::new(axis_angle(&[0.3, -0.2, 1.0], std::f64::consts::FRAC_PI_2), [0.0; 3]).unwrap();
        assert!((rre_deg(&b, &a) - 90.0).abs() < 1e-9);
    }

    #[test]
    fn inlier_ratio_by_hand() {
        let p = vec![[0.0; 3]; 4];
        let q = vec![[0.05, 0.0, 0.0], [0.0, 0.09, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.3]];
        assert_eq!(inlier_ratio(&p, &q, &RigidTransform::identity(), 0.1), Some(0.75));
        assert_eq!(inlier_ratio(&[], &[], &RigidTransform::identity(), 0.1), None);
    }

    #[test]
    fn report_fields_follow_availability() {
        let pts: Vec<Vec3> = (0..20).map(|i| [(i % 5) as f64 * 0.1, (i / 5) as f64 * 0.1, 0.0]).collect();
        let pc = PointCloud::new(pts).unwrap();
        let sp = PointCloud::new(vec![[0.1, 0.1, 0.0], [0.3, 0.2, 0.0]]).unwrap();
        let g = group_points(&pc, &sp);
        let mut corr = CorrespondenceSet::new(Level::Point);
        corr.pairs = vec![(0, 0), (1, 1), (2, 7)];
        corr.scores = vec![1.0; 3];
        let mut sm = CorrespondenceSet::new(Level::Superpoint);
        sm.pairs = vec![(0, 0), (1, 1)];
        sm.scores = vec![1.0; 2];
        let id = RigidTransform::identity();
        let input = MetricsInput {
            corr: &corr,
            supermatches: &sm,
            estimate: None,
            ground_truth: None,
            graph_p: &g,
            graph_q: &g,
            clean: None,
        };
        let th = Thresholds::default();
        let r = compute_metrics(&input, &th).unwrap();
        assert!(r.ir.is_none() && r.rre_deg.is_none() && r.chamfer.is_none());
        let input = MetricsInput {
            estimate: Some(&id),
            ground_truth: Some(&id),
            clean: Some((&pc, &pc)),
            ..input
        };
        let r = compute_metrics(&input, &th).unwrap();
        assert!((r.ir.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.fmr, Some(1.0));
        assert_eq!(r.pir, Some(1.0));
        assert_eq!(r.rr, Some(1.0));
        assert_eq!(r.chamfer, Some(0.0));
    }

    #[test]
    fn median_and_mean() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(mean(&[1.0, 2.0]), Some(1.5));
    }
}
