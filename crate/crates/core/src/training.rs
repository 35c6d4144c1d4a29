//! Supervision from a known pose, the two losses, and an adaptive-moment
//! optimizer for small-scale training.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cloud::{KdTree, RigidTransform, SuperpointGraph};
use crate::error::{Error, Result};
use crate::linalg::{dist2, Vec3};
use crate::matching::sinkhorn_on_tape;
use crate::model::{forward_on_tape, ModelConfig, Prepared};
use crate::params::{Bindings, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Overlap ratio from which a patch pair counts as positive.
pub const POSITIVE_OVERLAP: f64 = 0.1;

/// Patch overlap ratios in both directions, indexed `[i_P][j_Q]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapTable {
    /// Fraction of the points of P-patch `i` with a point of Q-patch `j`
    /// within `tau` under the pose.
    pub forward: Tensor,
    /// Fraction of the points of Q-patch `j` with a point of P-patch `i`
    /// within `tau`.
    pub backward: Tensor,
}

impl OverlapTable {
    pub fn shape(&self) -> (usize, usize) {
        (self.forward.rows(), self.forward.cols())
    }

    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        self.forward.get(i, j) >= POSITIVE_OVERLAP
    }

    pub fn is_negative(&self, i: usize, j: usize) -> bool {
        self.forward.get(i, j) == 0.0 && self.backward.get(i, j) == 0.0
    }

    /// Positive pairs (by the forward ratio) in row-major order.
    pub fn positives(&self) -> Vec<(usize, usize)> {
        let (n, m) = self.shape();
        (0..n)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .filter(|&(i, j)| self.is_positive(i, j))
            .collect()
    }

    /// P-patches with at least one positive.
    pub fn anchors_p(&self) -> Vec<usize> {
        let (n, m) = self.shape();
        (0..n).filter(|&i| (0..m).any(|j| self.is_positive(i, j))).collect()
    }

    /// Q-patches with at least one positive by the backward ratio.
    pub fn anchors_q(&self) -> Vec<usize> {
        let (n, m) = self.shape();
        (0..m)
            .filter(|&j| (0..n).any(|i| self.backward.get(i, j) >= POSITIVE_OVERLAP))
            .collect()
    }
}

/// Counts, for every dense point of `from`, the patches of `to` that have a
/// point strictly within `tau`. `from_pts` are already in the frame of `to`.
fn hit_fractions(from_pts: &[Vec3], from: &SuperpointGraph, to: &SuperpointGraph, tau: f64) -> Tensor {
    let tree = KdTree::build(to.dense_points.points());
    let to_pts = to.dense_points.points();
    let (n, m) = (from.num_superpoints(), to.num_superpoints());
    let mut counts = Tensor::zeros(n, m);
    let mut seen = vec![usize::MAX; m];
    for (k, p) in from_pts.iter().enumerate() {
        let a = from.patch_of[k];
        for idx in tree.within(p, tau) {
            if dist2(p, &to_pts[idx]) < tau * tau {
                let b = to.patch_of[idx];
                if seen[b] != k {
                    seen[b] = k;
                    counts.set(a, b, counts.get(a, b) + 1.0);
                }
            }
        }
    }
    Tensor::from_fn(n, m, |a, b| counts.get(a, b) / from.patches[a].len() as f64)
}

pub fn compute_overlap(gp: &SuperpointGraph, gq: &SuperpointGraph, t: &RigidTransform, tau: f64) -> OverlapTable {
    let moved = gp.transformed(t);
    let forward = hit_fractions(moved.dense_points.points(), &moved, gq, tau);
    let backward = hit_fractions(gq.dense_points.points(), gq, &moved, tau).transpose();
    OverlapTable { forward, backward }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub delta_p: f64,
    pub delta_n: f64,
    pub gamma: f64,
    pub n_g: usize,
    /// Matching radius of ground-truth point pairs and of the overlap table.
    pub tau: f64,
    /// Sinkhorn iterations unrolled on the tape.
    pub sinkhorn_iters: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            delta_p: 0.1,
            delta_n: 1.4,
            gamma: 24.0,
            n_g: 128,
            tau: 0.05,
            sinkhorn_iters: 10,
        }
    }
}

impl LossConfig {
    /// Defaults with `tau` set to the model's dense voxel size.
    pub fn for_model(cfg: &ModelConfig) -> Self {
        Self {
            tau: cfg.descriptor.dense_voxel,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_p < self.delta_n) {
            return Err(Error::Config("delta_p must be below delta_n".into()));
        }
        if self.n_g == 0 || self.sinkhorn_iters == 0 || !(self.tau > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::Config("n_g, sinkhorn_iters, tau and gamma must be positive".into()));
        }
        Ok(())
    }
}

/// Pairwise feature distances of unit-normalized rows.
fn unit_distances(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (a, b) = (tape.normalize_rows(a)?, tape.normalize_rows(b)?);
    let dots = tape.matmul_nt(a, b)?;
    let d2 = tape.scale(dots, -2.0);
    let d2 = tape.add_scalar(d2, 2.0);
    let d2 = tape.relu(d2);
    let d2 = tape.add_scalar(d2, 1e-12);
    Ok(tape.sqrt(d2))
}

/// One direction of the loss: rows of `d` are anchors' candidates, `overlap`
/// has the same layout. `None` when no row qualifies as an anchor.
fn circle_side(
    tape: &mut Tape,
    d: Var,
    overlap: &Tensor,
    negative: &dyn Fn(usize, usize) -> bool,
    cfg: &LossConfig,
) -> Result<Option<Var>> {
    let (n, m) = (overlap.rows(), overlap.cols());
    let pos: Vec<bool> = overlap.data().iter().map(|&o| o >= POSITIVE_OVERLAP).collect();
    let neg: Vec<bool> = (0..n * m).map(|k| negative(k / m, k % m)).collect();
    let anchors: Vec<usize> = (0..n).filter(|&i| pos[i * m..(i + 1) * m].iter().any(|&b| b)).collect();
    if anchors.is_empty() {
        return Ok(None);
    }
    let lambda = tape.constant(overlap.map(f64::sqrt));
    // γ·λ·max(d − Δp, 0)·(d − Δp)
    let a = tape.add_scalar(d, -cfg.delta_p);
    let ra = tape.relu(a);
    let pl = tape.mul(ra, a)?;
    let pl = tape.mul(pl, lambda)?;
    let pl = tape.scale(pl, cfg.gamma);
    // γ·max(Δn − d, 0)·(Δn − d)
    let b = tape.scale(d, -1.0);
    let b = tape.add_scalar(b, cfg.delta_n);
    let rb = tape.relu(b);
    let nl = tape.mul(rb, b)?;
    let nl = tape.scale(nl, cfg.gamma);
    let lp = tape.masked_lse_rows(pl, &pos)?;
    let ln = tape.masked_lse_rows(nl, &neg)?;
    let s = tape.add(lp, ln)?;
    let s = tape.gather_rows(s, &anchors)?;
    let s = tape.softplus(s);
    Ok(Some(tape.mean(s)))
}

/// Overlap-weighted circle loss on the hybrid superpoint features, averaged
/// over both directions.
pub fn overlap_circle_loss(tape: &mut Tape, hp: Var, hq: Var, table: &OverlapTable, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let (n, m) = table.shape();
    if tape.value(hp).rows() != n || tape.value(hq).rows() != m {
        return Err(Error::Dimension("overlap table does not match the feature rows".into()));
    }
    let d = unit_distances(tape, hp, hq)?;
    let lp = circle_side(tape, d, &table.forward, &|i, j| table.is_negative(i, j), cfg)?;
    let dt = tape.transpose(d);
    let back = table.backward.transpose();
    let lq = circle_side(tape, dt, &back, &|j, i| table.is_negative(i, j), cfg)?;
    match (lp, lq) {
        (Some(a), Some(b)) => {
            let s = tape.add(a, b)?;
            Ok(tape.scale(s, 0.5))
        }
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Err(Error::Loss("no anchor patches in either cloud".into())),
    }
}

/// Ground-truth point pairs of one patch pair (local indices).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GtMatches {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_p: Vec<usize>,
    pub unmatched_q: Vec<usize>,
    pub n_p: usize,
    pub n_q: usize,
}

fn nearest(q: &Vec3, pts: &[Vec3]) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (k, p) in pts.iter().enumerate() {
        let d = dist2(q, p);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Mutual nearest neighbours closer than `tau` under `t`; all other points
/// are unmatched.
pub fn make_gt_point_matches(patch_p: &[Vec3], patch_q: &[Vec3], t: &RigidTransform, tau: f64) -> GtMatches {
    let moved: Vec<Vec3> = patch_p.iter().map(|p| t.apply(p)).collect();
    let mut out = GtMatches {
        n_p: patch_p.len(),
        n_q: patch_q.len(),
        ..Default::default()
    };
    if patch_p.is_empty() || patch_q.is_empty() {
        out.unmatched_p = (0..patch_p.len()).collect();
        out.unmatched_q = (0..patch_q.len()).collect();
        return out;
    }
    let back: Vec<usize> = patch_q.iter().map(|q| nearest(q, &moved).0).collect();
    let mut matched_q = vec![false; patch_q.len()];
    for (x, p) in moved.iter().enumerate() {
        let (y, d2) = nearest(p, patch_q);
        if back[y] == x && d2 < tau * tau {
            out.pairs.push((x, y));
            matched_q[y] = true;
        } else {
            out.unmatched_p.push(x);
        }
    }
    out.unmatched_q = (0..patch_q.len()).filter(|&y| !matched_q[y]).collect();
    out
}

/// Negative log-likelihood of the ground truth under an `(n+1)×(m+1)`
/// log-assignment (dustbins last).
pub fn point_matching_loss(tape: &mut Tape, log_z: Var, gt: &GtMatches) -> Result<Var> {
    let (r, c) = (tape.value(log_z).rows(), tape.value(log_z).cols());
    if r != gt.n_p + 1 || c != gt.n_q + 1 {
        return Err(Error::Dimension(format!(
            "assignment is {r}×{c}, ground truth expects {}×{}",
            gt.n_p + 1,
            gt.n_q + 1
        )));
    }
    let mut idx = gt.pairs.clone();
    idx.extend(gt.unmatched_p.iter().map(|&x| (x, gt.n_q)));
    idx.extend(gt.unmatched_q.iter().map(|&y| (gt.n_p, y)));
    if idx.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let picked = tape.gather_elems(log_z, &idx)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0))
}

/// Point-matching loss averaged over sampled positive patch pairs.
#[allow(clippy::too_many_arguments)]
pub fn sampled_point_loss(
    tape: &mut Tape,
    dp: Var,
    dq: Var,
    alpha: Var,
    gp: &SuperpointGraph,
    gq: &SuperpointGraph,
    pairs: &[(usize, usize)],
    t: &RigidTransform,
    tau: f64,
    iters: usize,
) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let scale = 1.0 / (tape.value(dp).cols() as f64).sqrt();
    let mut total: Option<Var> = None;
    for &(a, b) in pairs {
        let (ip, iq) = (&gp.patches[a], &gq.patches[b]);
        let fp = tape.gather_rows(dp, ip)?;
        let fq = tape.gather_rows(dq, iq)?;
        let c = tape.matmul_nt(fp, fq)?;
        let c = tape.scale(c, scale);
        let log_z = sinkhorn_on_tape(tape, c, alpha, iters)?;
        let gt = make_gt_point_matches(&gp.patch_points(a), &gq.patch_points(b), t, tau);
        let l = point_matching_loss(tape, log_z, &gt)?;
        total = Some(match total {
            Some(s) => tape.add(s, l)?,
            None => l,
        });
    }
    let s = total.expect("non-empty pair list");
    Ok(tape.scale(s, 1.0 / pairs.len() as f64))
}

/// Up to `n_g` positives drawn uniformly without replacement, in draw order.
pub fn sample_positives(table: &OverlapTable, n_g: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let pos = table.positives();
    let k = n_g.min(pos.len());
    sample(rng, pos.len(), k).into_iter().map(|i| pos[i]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Multiplier applied to the learning rate after every step.
    pub lr_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
            lr_decay: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Learning rate of the next step.
    pub fn lr(&self) -> f64 {
        self.cfg.lr * self.cfg.lr_decay.powf(self.t as f64)
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &HashMap<String, Tensor>) -> Result<()> {
        let lr = self.lr();
        self.t += 1;
        let c = &self.cfg;
        let b1t = 1.0 - c.beta1.powf(self.t as f64);
        let b2t = 1.0 - c.beta2.powf(self.t as f64);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.len() != p.len() {
                return Err(Error::Dimension(format!("gradient of `{name}` has the wrong size")));
            }
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(1, p.len()));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(1, p.len()));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi + c.weight_decay * *w;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mh = *mi / b1t;
                let vh = *vi / b2t;
                *w -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// One training pair with its precomputed supervision.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub p: Prepared,
    pub q: Prepared,
    pub transform: RigidTransform,
    pub overlap: OverlapTable,
}

impl TrainSample {
    pub fn new(p: Prepared, q: Prepared, transform: RigidTransform, loss: &LossConfig) -> Self {
        let overlap = compute_overlap(&p.graph, &q.graph, &transform, loss.tau);
        Self {
            p,
            q,
            transform,
            overlap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss_oc: f64,
    pub loss_p: f64,
    pub lr: f64,
}

impl StepLog {
    pub fn total(&self) -> f64 {
        self.loss_oc + self.loss_p
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

/// Both losses on a fresh tape; returns the tape, the bindings, and the
/// handles of `(loss_oc, loss_p, total)`.
pub fn loss_on_tape(
    sample: &TrainSample,
    params: &ParamStore,
    model: &ModelConfig,
    loss: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tape, Bindings, Var, Var, Var)> {
    let mut tape = Tape::new();
    let vars = Bindings::bind(&mut tape, params, true);
    let f = forward_on_tape(&mut tape, &vars, &sample.p, &sample.q, model)?;
    let oc = overlap_circle_loss(&mut tape, f.hp, f.hq, &sample.overlap, loss)?;
    let pairs = sample_positives(&sample.overlap, loss.n_g, rng);
    let lp = sampled_point_loss(
        &mut tape,
        f.dp,
        f.dq,
        f.alpha,
        &sample.p.graph,
        &sample.q.graph,
        &pairs,
        &sample.transform,
        loss.tau,
        loss.sinkhorn_iters,
    )?;
    let total = tape.add(oc, lp)?;
    Ok((tape, vars, oc, lp, total))
}

/// Forward, backward and one optimizer update.
pub fn train_step(
    sample: &TrainSample,
    params: &mut ParamStore,
    opt: &mut Adam,
    model: &ModelConfig,
    loss: &LossConfig,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<StepLog> {
    let (tape, vars, oc, lp, total) = loss_on_tape(sample, params, model, loss, rng)?;
    let log = StepLog {
        step,
        loss_oc: tape.scalar(oc),
        loss_p: tape.scalar(lp),
        lr: opt.lr(),
    };
    if !log.total().is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss at step {step}: oc = {}, p = {}",
            log.loss_oc, log.loss_p
        )));
    }
    let mut g = tape.backward(total)?;
    let grads: HashMap<String, Tensor> = vars
        .iter()
        .filter_map(|(name, v)| g.take(v).map(|t| (name.to_string(), t)))
        .collect();
    opt.step(params, &grads)?;
    Ok(log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub seed: u64,
}

/// Cycles through `samples` in a seeded order, calling `on_step` after every
/// update.
pub fn train(
    samples: &[TrainSample],
    params: &mut ParamStore,
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    if samples.is_empty() {
        return Err(Error::Training("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.adam.clone());
    let mut order: Vec<usize> = Vec::new();
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if order.is_empty() {
            order = sample(&mut rng, samples.len(), samples.len()).into_vec();
            order.reverse();
        }
        let k = order.pop().expect("refilled above");
        let log = train_step(&samples[k], params, &mut opt, model, &cfg.loss, &mut rng, step)?;
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{build_hierarchy, group_points, PointCloud};
    use crate::gradcheck::{check, DEFAULT_STEP};
    use crate::matching::sinkhorn;
    use rand::Rng;

    #[test]
    fn overlap_of_identical_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pc = PointCloud::new(
            (0..300)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect(),
        )
        .unwrap();
        let g = build_hierarchy(&pc, 0.05, 0.5).unwrap();
        let t = compute_overlap(&g, &g, &RigidTransform::identity(), 0.01);
        for i in 0..g.num_superpoints() {
            assert_eq!(t.forward.get(i, i), 1.0);
            assert_eq!(t.backward.get(i, i), 1.0);
        }
        let far = compute_overlap(&g, &g, &RigidTransform::from_translation([10.0, 0.0, 0.0]), 0.1);
        assert!(far.forward.data().iter().all(|&o| o == 0.0));
        assert!(far.anchors_p().is_empty() && far.anchors_q().is_empty());
    }

    #[test]
    fn overlap_by_hand() {
        // P has two patches of 2 points; Q has two patches. Only the first
        // point of P-patch 0 lies near Q-patch 0.
        let p = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [10.0, 0.0, 0.0], [11.0, 0.0, 0.0]]).unwrap();
        let sp = PointCloud::new(vec![[0.5, 0.0, 0.0], [10.5, 0.0, 0.0]]).unwrap();
        let q = PointCloud::new(vec![[0.0, 0.05, 0.0], [0.0, 5.0, 0.0], [30.0, 0.0, 0.0]]).unwrap();
        let sq = PointCloud::new(vec![[0.0, 2.5, 0.0], [30.0, 0.0, 0.0]]).unwrap();
        let (gp, gq) = (group_points(&p, &sp), group_points(&q, &sq));
        let t = compute_overlap(&gp, &gq, &RigidTransform::identity(), 0.1);
        assert_eq!(t.forward.get(0, 0), 0.5);
        assert_eq!(t.backward.get(0, 0), 0.5);
        assert_eq!(t.forward.get(1, 0), 0.0);
        assert!(t.is_positive(0, 0) && t.is_negative(1, 1) && !t.is_negative(0, 0));
        assert_eq!(t.anchors_p(), vec![0]);
    }

    #[test]
    fn overlap_swap_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cloud = |n| {
            PointCloud::new(
                (0..n)
                    .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.2..0.2)])
                    .collect(),
            )
            .unwrap()
        };
        let (a, b) = (cloud(250), cloud(250));
        let (ga, gb) = (build_hierarchy(&a, 0.05, 0.4).unwrap(), build_hierarchy(&b, 0.05, 0.4).unwrap());
        let t = RigidTransform::from_translation([0.05, 0.0, 0.0]);
        let x = compute_overlap(&ga, &gb, &t, 0.1);
        let y = compute_overlap(&gb, &ga, &t.inverse(), 0.1);
        assert!(x.forward.max_abs_diff(&y.backward.transpose()) < 1e-12);
        assert!(x.backward.max_abs_diff(&y.forward.transpose()) < 1e-12);
    }

    fn table(forward: &[&[f64]]) -> OverlapTable {
        let t = Tensor::from_fn(forward.len(), forward[0].len(), |i, j| forward[i][j]);
        OverlapTable {
            forward: t.clone(),
            backward: t,
        }
    }

    fn unit_at_angle(theta: f64) -> [f64; 2] {
        [theta.cos(), theta.sin()]
    }

    /// Angle between unit vectors whose chord is `d`.
    fn angle_for(d: f64) -> f64 {
        2.0 * (d / 2.0).asin()
    }

    #[test]
    fn circle_loss_matches_scalar_oracle() {
        let cfg = LossConfig::default();
        let (d_pos, d_neg) = (0.5, 0.9);
        let hp = Tensor::from_rows(&[unit_at_angle(0.0)]).unwrap();
        let hq = Tensor::from_rows(&[unit_at_angle(angle_for(d_pos)), unit_at_angle(-angle_for(d_neg))]).unwrap();
        let tab = table(&[&[1.0, 0.0]]);
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(hp), tape.constant(hq));
        let l = overlap_circle_loss(&mut tape, a, b, &tab, &cfg).unwrap();
        let bp = cfg.gamma * (d_pos - cfg.delta_p);
        let bn = cfg.gamma * (cfg.delta_n - d_neg);
        let side = (1.0 + (bp * (d_pos - cfg.delta_p)).exp() * (bn * (cfg.delta_n - d_neg)).exp()).ln();
        // The Q side: patch 0 of Q is the only anchor and sees P-patch 0 as
        // positive but has no negative.
        let expect = (side + 0.0) / 2.0;
        assert!((tape.scalar(l) - expect).abs() < 1e-9, "{} vs {expect}", tape.scalar(l));
    }

    #[test]
    fn circle_loss_at_margins() {
        let cfg = LossConfig::default();
        let hp = Tensor::from_rows(&[unit_at_angle(0.0)]).unwrap();
        let hq = Tensor::from_rows(&[
            unit_at_angle(angle_for(cfg.delta_p)),
            unit_at_angle(-angle_for(cfg.delta_n)),
            unit_at_angle(angle_for(cfg.delta_n)),
        ])
        .unwrap();
        let tab = table(&[&[1.0, 0.0, 0.0]]);
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(hp), tape.constant(hq));
        let l = overlap_circle_loss(&mut tape, a, b, &tab, &cfg).unwrap();
        // Every exponent vanishes: log(1 + |pos|·|neg|) on P, zero on Q.
        let expect = (1.0 + 2.0f64).ln() / 2.0;
        assert!((tape.scalar(l) - expect).abs() < 1e-9);
    }

    #[test]
    fn circle_loss_without_anchors_fails() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[[0.0, 1.0]]).unwrap());
        let r = overlap_circle_loss(&mut tape, a, b, &table(&[&[0.05]]), &LossConfig::default());
        assert!(matches!(r, Err(Error::Loss(_))));
    }

    #[test]
    fn circle_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = LossConfig {
            gamma: 4.0,
            ..Default::default()
        };
        for _ in 0..5 {
            let hp = Tensor::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
            let hq = Tensor::from_fn(5, 6, |_, _| rng.random_range(-1.0..1.0));
            let o = Tensor::from_fn(4, 5, |_, _| {
                let u: f64 = rng.random();
                if u < 0.4 { 0.0 } else if u < 0.5 { 0.05 } else { u }
            });
            let tab = OverlapTable {
                forward: o.clone(),
                backward: o.map(|v| (v * 1.1).min(1.0)),
            };
            let rep = check(&[hp, hq], DEFAULT_STEP, |t, v| overlap_circle_loss(t, v[0], v[1], &tab, &cfg)).unwrap();
            assert!(rep.max_rel_error() < 1e-4, "{:?}", rep.rel_errors);
        }
    }

    #[test]
    fn higher_overlap_positive_gets_larger_gradient() {
        let cfg = LossConfig::default();
        let d = 0.4;
        let hp = Tensor::from_rows(&[unit_at_angle(0.0)]).unwrap();
        let hq = Tensor::from_rows(&[
            unit_at_angle(angle_for(d)),
            unit_at_angle(-angle_for(d)),
            unit_at_angle(std::f64::consts::PI),
        ])
        .unwrap();
        let tab = table(&[&[0.9, 0.2, 0.0]]);
        let mut tape = Tape::new();
        let a = tape.constant(hp);
        let b = tape.param(hq);
        let l = overlap_circle_loss(&mut tape, a, b, &tab, &cfg).unwrap();
        let g = tape.backward(l).unwrap();
        let gq = g.get(b).unwrap();
        let n = |r: usize| gq.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(n(0) > n(1));
    }

    #[test]
    fn circle_loss_is_monotone_in_positive_distance() {
        let cfg = LossConfig::default();
        let value = |d: f64| {
            let hp = Tensor::from_rows(&[unit_at_angle(0.0)]).unwrap();
            let hq = Tensor::from_rows(&[unit_at_angle(angle_for(d)), unit_at_angle(-angle_for(1.0))]).unwrap();
            let mut tape = Tape::new();
            let (a, b) = (tape.constant(hp), tape.constant(hq));
            let l = overlap_circle_loss(&mut tape, a, b, &table(&[&[0.8, 0.0]]), &cfg).unwrap();
            tape.scalar(l)
        };
        let mut last = f64::INFINITY;
        for d in [0.9, 0.7, 0.5, 0.3, 0.2] {
            let v = value(d);
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn gt_matches_identity_and_far() {
        let pts: Vec<Vec3> = (0..6).map(|i| [i as f64 * 0.1, 0.0, 0.0]).collect();
        let g = make_gt_point_matches(&pts, &pts, &RigidTransform::identity(), 0.01);
        assert_eq!(g.pairs, (0..6).map(|i| (i, i)).collect::<Vec<_>>());
        assert!(g.unmatched_p.is_empty() && g.unmatched_q.is_empty());
        let g = make_gt_point_matches(&pts, &pts, &RigidTransform::from_translation([5.0, 0.0, 0.0]), 0.01);
        assert!(g.pairs.is_empty());
        assert_eq!(g.unmatched_p.len(), 6);
        assert_eq!(g.unmatched_q.len(), 6);
    }

    #[test]
    fn gt_matches_staggered_line_against_exhaustive_scan() {
        let tau = 1.0;
        let p: Vec<Vec3> = (0..8).map(|i| [i as f64 * 0.6, 0.0, 0.0]).collect();
        let q: Vec<Vec3> = (0..8).map(|i| [i as f64 * 0.6 + 0.25 + 0.03 * i as f64, 0.0, 0.0]).collect();
        let g = make_gt_point_matches(&p, &q, &RigidTransform::identity(), tau);
        let d = |a: &Vec3, b: &Vec3| (a[0] - b[0]).abs();
        let mut expect = Vec::new();
        for x in 0..p.len() {
            let y = (0..q.len()).min_by(|&a, &b| d(&p[x], &q[a]).total_cmp(&d(&p[x], &q[b]))).unwrap();
            let back = (0..p.len()).min_by(|&a, &b| d(&q[y], &p[a]).total_cmp(&d(&q[y], &p[b]))).unwrap();
            if back == x && d(&p[x], &q[y]) < tau {
                expect.push((x, y));
            }
        }
        assert_eq!(g.pairs, expect);
        assert_eq!(g.unmatched_p.len() + g.pairs.len(), p.len());
    }

    #[test]
    fn point_loss_on_uniform_assignment() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::full(2, 2, 0.25f64.ln()));
        let gt = GtMatches {
            pairs: vec![(0, 0)],
            n_p: 1,
            n_q: 1,
            ..Default::default()
        };
        let l = point_matching_loss(&mut tape, z, &gt).unwrap();
        assert!((tape.scalar(l) + 0.25f64.ln()).abs() < 1e-15);
        let empty = GtMatches {
            n_p: 1,
            n_q: 1,
            ..Default::default()
        };
        let l = point_matching_loss(&mut tape, z, &empty).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn point_loss_vanishes_for_confident_assignment() {
        let gt = GtMatches {
            pairs: vec![(0, 0), (1, 1)],
            n_p: 2,
            n_q: 2,
            ..Default::default()
        };
        let mut last = f64::INFINITY;
        for s in [5.0, 10.0, 20.0] {
            let cost = Tensor::from_rows(&[[s, -s], [-s, s]]).unwrap();
            let a = sinkhorn(&cost, -s, 2000).unwrap();
            let mut tape = Tape::new();
            let z = tape.constant(a.log_augmented);
            let l = point_matching_loss(&mut tape, z, &gt).unwrap();
            let v = tape.scalar(l);
            assert!(v > 0.0 && v < last);
            last = v;
        }
        assert!(last < 1e-3, "{last}");
    }

    #[test]
    fn point_loss_gradient_through_sinkhorn() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = GtMatches {
            pairs: vec![(0, 1), (2, 0)],
            unmatched_p: vec![1],
            unmatched_q: vec![2, 3],
            n_p: 3,
            n_q: 4,
        };
        for _ in 0..3 {
            let c = Tensor::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
            let alpha = Tensor::scalar(rng.random_range(-0.5..1.5));
            let rep = check(&[c, alpha], DEFAULT_STEP, |t, v| {
                let z = sinkhorn_on_tape(t, v[0], v[1], 20)?;
                point_matching_loss(t, z, &gt)
            })
            .unwrap();
            assert!(rep.max_rel_error() < 1e-4, "{:?}", rep.rel_errors);
        }
    }

    #[test]
    fn adam_with_zero_lr_keeps_parameters() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_rows(&[[0.3, -1.2]]).unwrap());
        let before = store.clone();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.0,
            ..Default::default()
        });
        let grads = HashMap::from([("w".to_string(), Tensor::from_rows(&[[1.0, -2.0]]).unwrap())]);
        opt.step(&mut store, &grads).unwrap();
        assert_eq!(store.require("w").unwrap(), before.require("w").unwrap());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_rows(&[[1.0, 1.0]]).unwrap());
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        let grads = HashMap::from([("w".to_string(), Tensor::from_rows(&[[3.0, -0.5]]).unwrap())]);
        opt.step(&mut store, &grads).unwrap();
        let w = store.require("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] - 1.1).abs() < 1e-7);
    }
}
