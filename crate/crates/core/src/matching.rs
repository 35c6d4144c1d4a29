//! Superpoint correspondences from hybrid features and dense point
//! correspondences inside matched patches via optimal transport.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::cloud::SuperpointGraph;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Augmentation count of threshold mode.
pub const THRESHOLD_MIN_MATCHES: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Superpoint,
    Point,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Superpoint => "superpoint",
            Level::Point => "point",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    pub level: Level,
    pub pairs: Vec<(usize, usize)>,
    pub scores: Vec<f64>,
    /// Superpoint-match id of each point pair.
    pub group_of: Option<Vec<usize>>,
}

impl CorrespondenceSet {
    pub fn new(level: Level) -> Self {
        Self {
            level,
            pairs: Vec::new(),
            scores: Vec::new(),
            group_of: None,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Checks index ranges, finiteness and uniqueness.
    pub fn validate(&self, n_p: usize, n_q: usize) -> Result<()> {
        if self.scores.len() != self.pairs.len()
            || self.group_of.as_ref().is_some_and(|g| g.len() != self.pairs.len())
        {
            return Err(Error::Data("correspondence columns differ in length".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for (k, &(i, j)) in self.pairs.iter().enumerate() {
            if i >= n_p || j >= n_q {
                return Err(Error::Data(format!("pair {k} = ({i}, {j}) out of range")));
            }
            if !self.scores[k].is_finite() {
                return Err(Error::Data(format!("pair {k} has a non-finite score")));
            }
            if !seen.insert((i, j)) {
                return Err(Error::Data(format!("duplicate pair ({i}, {j})")));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,ip,iq,score,group\n");
        for (k, &(i, j)) in self.pairs.iter().enumerate() {
            let g = self
                .group_of
                .as_ref()
                .map(|g| g[k].to_string())
                .unwrap_or_default();
            let _ = writeln!(s, "{},{i},{j},{},{g}", self.level.as_str(), self.scores[k]);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("level,ip,iq,score,group") {
            return Err(Error::Data("missing correspondence CSV header".into()));
        }
        let mut level = None;
        let mut out = CorrespondenceSet::new(Level::Point);
        let mut groups = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Data(format!("CSV row {}: malformed", n + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let l = match f[0] {
                "superpoint" => Level::Superpoint,
                "point" => Level::Point,
                _ => return Err(bad()),
            };
            if *level.get_or_insert(l) != l {
                return Err(Error::Data("mixed levels in one correspondence file".into()));
            }
            out.pairs
                .push((f[1].parse().map_err(|_| bad())?, f[2].parse().map_err(|_| bad())?));
            out.scores.push(f[3].parse().map_err(|_| bad())?);
            groups.push(if f[4].is_empty() {
                None
            } else {
                Some(f[4].parse::<usize>().map_err(|_| bad())?)
            });
        }
        out.level = level.unwrap_or(Level::Point);
        if groups.iter().all(Option::is_some) && !groups.is_empty() {
            out.group_of = Some(groups.into_iter().map(Option::unwrap).collect());
        } else if groups.iter().any(Option::is_some) {
            return Err(Error::Data("group column is only partly filled".into()));
        }
        Ok(out)
    }
}

/// Rows scaled to unit L2 norm; a zero row is an error naming it.
pub fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let n = t.normalize_rows(v)?;
    Ok(t.value(n).clone())
}

/// `s_ij = exp(−‖h_i − h_j‖²)` on unit-normalized rows.
pub fn gaussian_correlation(hp: &Tensor, hq: &Tensor) -> Result<Tensor> {
    let (a, b) = (normalize_rows(hp)?, normalize_rows(hq)?);
    let dots = a.matmul_nt(&b)?;
    Ok(dots.map(|d| (-(2.0 - 2.0 * d).max(0.0)).exp()))
}

/// `s̄_ij = s_ij² / (Σ_k s_ik · Σ_k s_kj)`.
pub fn dual_normalize(s: &Tensor) -> Tensor {
    let (rs, cs) = (s.row_sums(), s.col_sums());
    Tensor::from_fn(s.rows(), s.cols(), |i, j| {
        let v = s.get(i, j);
        v * v / (rs.data()[i] * cs.data()[j])
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MatchMode {
    TopK,
    /// Unit-feature distance threshold.
    Threshold(f64),
}

/// Entries sorted by descending value, ties by `(i, j)`.
fn ranked(s: &Tensor) -> Vec<(usize, usize)> {
    let mut idx: Vec<(usize, usize)> = (0..s.rows())
        .flat_map(|i| (0..s.cols()).map(move |j| (i, j)))
        .collect();
    idx.sort_by(|a, b| s.get(b.0, b.1).total_cmp(&s.get(a.0, a.1)).then(a.cmp(b)));
    idx
}

/// Superpoint correspondences scored by the dual-normalized correlation.
pub fn superpoint_match(hp: &Tensor, hq: &Tensor, n_c: usize, mode: MatchMode) -> Result<CorrespondenceSet> {
    let s = gaussian_correlation(hp, hq)?;
    let sb = dual_normalize(&s);
    let order = ranked(&sb);
    let picked: Vec<(usize, usize)> = match mode {
        MatchMode::TopK => order.into_iter().take(n_c).collect(),
        MatchMode::Threshold(t) => {
            // ‖a − b‖² = −ln s for unit rows.
            let close = |&(i, j): &(usize, usize)| (-s.get(i, j).ln()).max(0.0).sqrt() < t;
            let mut sel: Vec<(usize, usize)> = order.iter().copied().filter(close).collect();
            if sel.len() < THRESHOLD_MIN_MATCHES {
                for &p in order.iter().take(THRESHOLD_MIN_MATCHES) {
                    if !sel.contains(&p) {
                        sel.push(p);
                    }
                }
                sel.sort_by(|a, b| sb.get(b.0, b.1).total_cmp(&sb.get(a.0, a.1)).then(a.cmp(b)));
            }
            sel
        }
    };
    Ok(CorrespondenceSet {
        level: Level::Superpoint,
        scores: picked.iter().map(|&(i, j)| sb.get(i, j)).collect(),
        pairs: picked,
        group_of: None,
    })
}

fn lse(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Output of the optimal-transport layer.
#[derive(Clone, Debug)]
pub struct AssignmentMatrix {
    /// `(n+1)×(m+1)` log-assignment including the dustbins.
    pub log_augmented: Tensor,
    /// `(n+1)×(m+1)` assignment.
    pub augmented: Tensor,
    /// `n×m` assignment without dustbins.
    pub truncated: Tensor,
}

fn augmented_scores(cost: &Tensor, alpha: f64) -> Tensor {
    let (n, m) = (cost.rows(), cost.cols());
    Tensor::from_fn(n + 1, m + 1, |i, j| if i < n && j < m { cost.get(i, j) } else { alpha })
}

/// `(log μ, log ν, norm)` for an `n×m` problem: every real row/column has
/// mass 1, the dustbins absorb `m` and `n`, and everything is scaled by
/// `1/(n+m)` during the iterations.
fn marginals(n: usize, m: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let norm = -((n + m) as f64).ln();
    let mut mu = vec![norm; n + 1];
    mu[n] = (m as f64).ln() + norm;
    let mut nu = vec![norm; m + 1];
    nu[m] = (n as f64).ln() + norm;
    (mu, nu, norm)
}

/// Log-domain Sinkhorn on the dustbin-augmented scores.
pub fn sinkhorn(cost: &Tensor, alpha: f64, iters: usize) -> Result<AssignmentMatrix> {
    if iters == 0 {
        return Err(Error::Parameter("sinkhorn needs at least one iteration".into()));
    }
    if !cost.all_finite() || !alpha.is_finite() {
        return Err(Error::Data("sinkhorn input is not finite".into()));
    }
    let (n, m) = (cost.rows(), cost.cols());
    let z = augmented_scores(cost, alpha);
    let (mu, nu, norm) = marginals(n, m);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    for _ in 0..iters {
        for i in 0..=n {
            u[i] = mu[i] - lse((0..=m).map(|j| z.get(i, j) + v[j]));
        }
        for j in 0..=m {
            v[j] = nu[j] - lse((0..=n).map(|i| z.get(i, j) + u[i]));
        }
    }
    let log_augmented = Tensor::from_fn(n + 1, m + 1, |i, j| z.get(i, j) + u[i] + v[j] - norm);
    let augmented = log_augmented.map(f64::exp);
    let truncated = Tensor::from_fn(n, m, |i, j| augmented.get(i, j));
    Ok(AssignmentMatrix {
        log_augmented,
        augmented,
        truncated,
    })
}

/// Differentiable unrolled Sinkhorn; returns the `(n+1)×(m+1)`
/// log-assignment.
pub fn sinkhorn_on_tape(tape: &mut Tape, cost: Var, alpha: Var, iters: usize) -> Result<Var> {
    if iters == 0 {
        return Err(Error::Parameter("sinkhorn needs at least one iteration".into()));
    }
    let (n, m) = (tape.value(cost).rows(), tape.value(cost).cols());
    let z = tape.augment(cost, alpha)?;
    let (mu, nu, norm) = marginals(n, m);
    let mu = tape.constant(Tensor::new(vec![n + 1, 1], mu)?);
    let nu = tape.constant(Tensor::new(vec![1, m + 1], nu)?);
    let mut v = tape.constant(Tensor::zeros(1, m + 1));
    let mut u = tape.constant(Tensor::zeros(n + 1, 1));
    for _ in 0..iters {
        let zv = tape.add_row(z, v)?;
        let l = tape.lse_rows(zv);
        u = tape.sub(mu, l)?;
        let zu = tape.add_col(z, u)?;
        let l = tape.lse_cols(zu);
        v = tape.sub(nu, l)?;
    }
    let out = tape.add_col(z, u)?;
    let out = tape.add_row(out, v)?;
    Ok(tape.add_scalar(out, -norm))
}

/// Pairs in the top `k` of both their row and their column (ties toward the
/// lower index), sorted by `(i, j)`.
pub fn mutual_topk(z: &Tensor, k: usize) -> Vec<(usize, usize)> {
    let (n, m) = (z.rows(), z.cols());
    let top = |len: usize, val: &dyn Fn(usize) -> f64| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.sort_by(|&a, &b| val(b).total_cmp(&val(a)).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    };
    let mut in_row = vec![false; n * m];
    for i in 0..n {
        for j in top(m, &|j| z.get(i, j)) {
            in_row[i * m + j] = true;
        }
    }
    let mut out = Vec::new();
    let mut in_col = vec![false; n * m];
    for j in 0..m {
        for i in top(n, &|i| z.get(i, j)) {
            in_col[i * m + j] = true;
        }
    }
    for i in 0..n {
        for j in 0..m {
            if in_row[i * m + j] && in_col[i * m + j] {
                out.push((i, j));
            }
        }
    }
    out
}

/// Mutual top-k pairs of the truncated assignment with their assignment
/// values. With `dustbin_gate` a pair must also beat both its row and its
/// column dustbin.
pub fn select_point_pairs(a: &AssignmentMatrix, k: usize, dustbin_gate: bool) -> Vec<((usize, usize), f64)> {
    let z = &a.augmented;
    let (n, m) = (a.truncated.rows(), a.truncated.cols());
    mutual_topk(&a.truncated, k)
        .into_iter()
        .filter(|&(i, j)| !dustbin_gate || (z.get(i, j) > z.get(i, m) && z.get(i, j) > z.get(n, j)))
        .map(|(i, j)| ((i, j), z.get(i, j)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointMatchConfig {
    pub k_mutual: usize,
    pub iters: usize,
    pub alpha: f64,
    /// Drop pairs that lose to a dustbin.
    pub dustbin_gate: bool,
}

impl Default for PointMatchConfig {
    fn default() -> Self {
        Self {
            k_mutual: 3,
            iters: 100,
            alpha: 1.0,
            dustbin_gate: false,
        }
    }
}

fn dense_feats(g: &SuperpointGraph) -> Result<&Tensor> {
    g.dense_features
        .as_ref()
        .ok_or_else(|| Error::Data("dense features have not been computed".into()))
}

/// `C = F_P·F_Qᵀ/√d̃` between two patches.
pub fn patch_cost(fp: &Tensor, fq: &Tensor, ip: &[usize], iq: &[usize]) -> Result<Tensor> {
    let (a, b) = (fp.select_rows(ip), fq.select_rows(iq));
    Ok(a.matmul_nt(&b)?.scale(1.0 / (fp.cols() as f64).sqrt()))
}

/// Per superpoint match, the dense correspondences it produces (dense
/// indices of the whole clouds), in superpoint-match order.
pub fn point_match_groups(
    gp: &SuperpointGraph,
    gq: &SuperpointGraph,
    supermatches: &CorrespondenceSet,
    cfg: &PointMatchConfig,
) -> Result<Vec<CorrespondenceSet>> {
    if supermatches.level != Level::Superpoint {
        return Err(Error::Data("point matching needs superpoint-level matches".into()));
    }
    let (fp, fq) = (dense_feats(gp)?, dense_feats(gq)?);
    if fp.cols() != fq.cols() {
        return Err(Error::Dimension("dense feature widths differ".into()));
    }
    let mut groups = Vec::with_capacity(supermatches.len());
    for (g, &(x, y)) in supermatches.pairs.iter().enumerate() {
        let (ip, iq) = (&gp.patches[x], &gq.patches[y]);
        let cost = patch_cost(fp, fq, ip, iq)?;
        let a = sinkhorn(&cost, cfg.alpha, cfg.iters)?;
        let mut set = CorrespondenceSet::new(Level::Point);
        for ((i, j), s) in select_point_pairs(&a, cfg.k_mutual, cfg.dustbin_gate) {
            set.pairs.push((ip[i], iq[j]));
            set.scores.push(s);
        }
        set.group_of = Some(vec![g; set.pairs.len()]);
        groups.push(set);
    }
    Ok(groups)
}

/// Union of per-group correspondences; a pair found by several groups keeps
/// its highest score and that group's id.
pub fn merge_groups(groups: &[CorrespondenceSet]) -> CorrespondenceSet {
    let mut best: HashMap<(usize, usize), usize> = HashMap::new();
    let mut out = CorrespondenceSet::new(Level::Point);
    let mut group_of = Vec::new();
    for (g, set) in groups.iter().enumerate() {
        for (k, &p) in set.pairs.iter().enumerate() {
            let s = set.scores[k];
            match best.get(&p) {
                Some(&slot) => {
                    if s > out.scores[slot] {
                        out.scores[slot] = s;
                        group_of[slot] = g;
                    }
                }
                None => {
                    best.insert(p, out.pairs.len());
                    out.pairs.push(p);
                    out.scores.push(s);
                    group_of.push(g);
                }
            }
        }
    }
    out.group_of = Some(group_of);
    out
}

pub fn point_match(
    gp: &SuperpointGraph,
    gq: &SuperpointGraph,
    supermatches: &CorrespondenceSet,
    cfg: &PointMatchConfig,
) -> Result<CorrespondenceSet> {
    Ok(merge_groups(&point_match_groups(gp, gq, supermatches, cfg)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{build_hierarchy, PointCloud};
    use crate::gradcheck::{check, DEFAULT_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dual_normalization_by_hand() {
        let s = Tensor::from_rows(&[[0.9, 0.1], [0.2, 0.8]]).unwrap();
        let d = dual_normalize(&s);
        assert!((d.get(0, 0) - 0.81 / (1.0 * 1.1)).abs() < 1e-15);
        assert!((d.get(0, 0) - 0.736_363_636_363_636_4).abs() < 1e-12);
        assert!((d.get(1, 1) - 0.64 / (1.0 * 0.9)).abs() < 1e-15);
        assert!((d.get(0, 1) - 0.01 / (1.0 * 0.9)).abs() < 1e-15);
    }

    #[test]
    fn identical_single_rows_match() {
        let h = Tensor::from_rows(&[[0.3, 0.4]]).unwrap();
        let c = superpoint_match(&h, &h, 5, MatchMode::TopK).unwrap();
        assert_eq!(c.pairs, vec![(0, 0)]);
        assert!((c.scores[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_row_is_named() {
        let a = Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(
            superpoint_match(&a, &a, 1, MatchMode::TopK),
            Err(Error::ZeroRow { row: 1 })
        ));
    }

    #[test]
    fn oversized_nc_returns_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::from_fn(3, 4, |_, _| rng.random::<f64>() - 0.5);
        let b = Tensor::from_fn(2, 4, |_, _| rng.random::<f64>() - 0.5);
        let c = superpoint_match(&a, &b, 100, MatchMode::TopK).unwrap();
        assert_eq!(c.len(), 6);
        assert!(c.scores.windows(2).all(|w| w[0] >= w[1]));
        c.validate(3, 2).unwrap();
    }

    #[test]
    fn threshold_mode_augments_to_128() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::from_fn(20, 8, |_, _| rng.random::<f64>() - 0.5);
        let b = Tensor::from_fn(20, 8, |_, _| rng.random::<f64>() - 0.5);
        // Nothing is that close, so exactly the top 128 are returned.
        let c = superpoint_match(&a, &b, 0, MatchMode::Threshold(1e-3)).unwrap();
        let t = superpoint_match(&a, &b, 128, MatchMode::TopK).unwrap();
        assert_eq!(c.pairs, t.pairs);
        // Everything is within distance 2 on the unit sphere.
        let all = superpoint_match(&a, &b, 0, MatchMode::Threshold(2.1)).unwrap();
        assert_eq!(all.len(), 400);
    }

    #[test]
    fn sinkhorn_forced_match_and_symmetry() {
        // The plain iteration approaches a boundary solution at rate 1/t.
        let a = sinkhorn(&Tensor::scalar(0.0), -1e4, 100).unwrap();
        assert!((a.truncated.get(0, 0) - 1.0).abs() < 1e-2);
        let a = sinkhorn(&Tensor::scalar(0.0), -1e4, 2000).unwrap();
        assert!((a.truncated.get(0, 0) - 1.0).abs() < 1e-3);
        let u = sinkhorn(&Tensor::full(2, 2, 0.3), 0.3, 50).unwrap();
        let z = u.truncated.data();
        assert!(z.iter().all(|v| (v - z[0]).abs() < 1e-14));
    }

    #[test]
    fn sinkhorn_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(n, m) in &[(3, 3), (10, 10), (4, 7)] {
            let c = Tensor::from_fn(n, m, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            let a = sinkhorn(&c, 1.0, 100).unwrap();
            let (rs, cs) = (a.augmented.row_sums(), a.augmented.col_sums());
            for i in 0..n {
                assert!((rs.data()[i] - 1.0).abs() < 1e-6);
            }
            assert!((rs.data()[n] - m as f64).abs() < 1e-6);
            for j in 0..m {
                assert!((cs.data()[j] - 1.0).abs() < 1e-6);
            }
            assert!((cs.data()[m] - n as f64).abs() < 1e-6);
            assert!(a.truncated.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn tape_sinkhorn_matches_plain_and_differentiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = Tensor::from_fn(3, 4, |_, _| rng.random::<f64>() - 0.5);
        let mut t = Tape::new();
        let (cv, av) = (t.constant(c.clone()), t.constant(Tensor::scalar(0.7)));
        let l = sinkhorn_on_tape(&mut t, cv, av, 20).unwrap();
        let plain = sinkhorn(&c, 0.7, 20).unwrap();
        assert!(t.value(l).max_abs_diff(&plain.log_augmented) < 1e-12);
        let w = Tensor::from_fn(4, 5, |_, _| rng.random::<f64>());
        let rep = check(&[c, Tensor::scalar(0.7)], DEFAULT_STEP, |t, v| {
            let l = sinkhorn_on_tape(t, v[0], v[1], 10)?;
            let wv = t.constant(w.clone());
            let x = t.mul(l, wv)?;
            Ok(t.sum(x))
        })
        .unwrap();
        assert!(rep.max_rel_error() < 1e-6, "{:?}", rep.rel_errors);
    }

    #[test]
    fn mutual_topk_against_scan() {
        let z = Tensor::from_rows(&[[0.5, 0.2, 0.1], [0.4, 0.3, 0.05], [0.1, 0.6, 0.2]]).unwrap();
        assert_eq!(mutual_topk(&z, 1), vec![(0, 0), (2, 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (n, m) = (rng.random_range(1..6), rng.random_range(1..6));
            let z = Tensor::from_fn(n, m, |_, _| rng.random::<f64>());
            let k = rng.random_range(1..4);
            let got = mutual_topk(&z, k);
            let mut expect = Vec::new();
            for i in 0..n {
                for j in 0..m {
                    let above_row = (0..m).filter(|&c| z.get(i, c) > z.get(i, j)).count();
                    let above_col = (0..n).filter(|&r| z.get(r, j) > z.get(i, j)).count();
                    if above_row < k && above_col < k {
                        expect.push((i, j));
                    }
                }
            }
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn single_point_patches_need_to_beat_dustbins() {
        let weak = sinkhorn(&Tensor::scalar(-5.0), 1.0, 100).unwrap();
        assert!(select_point_pairs(&weak, 3, true).is_empty());
        let strong = sinkhorn(&Tensor::scalar(5.0), 1.0, 100).unwrap();
        assert_eq!(select_point_pairs(&strong, 3, true).len(), 1);
    }

    #[test]
    fn large_k_keeps_all_pairs_above_dustbins() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = Tensor::from_fn(4, 5, |_, _| rng.random::<f64>() * 6.0 - 3.0);
        let a = sinkhorn(&c, 0.0, 100).unwrap();
        let got: Vec<(usize, usize)> = select_point_pairs(&a, 5, true).into_iter().map(|p| p.0).collect();
        let z = &a.augmented;
        let mut expect = Vec::new();
        for i in 0..4 {
            for j in 0..5 {
                if z.get(i, j) > z.get(i, 5) && z.get(i, j) > z.get(4, j) {
                    expect.push((i, j));
                }
            }
        }
        assert_eq!(got, expect);
    }

    #[test]
    fn merge_keeps_max_score() {
        let mk = |pairs: Vec<(usize, usize)>, scores: Vec<f64>| CorrespondenceSet {
            level: Level::Point,
            pairs,
            scores,
            group_of: None,
        };
        let m = merge_groups(&[mk(vec![(0, 0), (1, 1)], vec![0.5, 0.2]), mk(vec![(1, 1), (2, 2)], vec![0.4, 0.1])]);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(m.scores, vec![0.5, 0.4, 0.1]);
        assert_eq!(m.group_of, Some(vec![0, 1, 1]));
    }

    #[test]
    fn point_match_scores_are_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<[f64; 3]> = (0..300).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let pc = PointCloud::new(pts).unwrap();
        let mut g = build_hierarchy(&pc, 0.1, 0.4).unwrap();
        g.dense_features = Some(Tensor::from_fn(g.num_dense(), 6, |_, _| rng.random::<f64>() * 6.0 - 3.0));
        let n = g.num_superpoints();
        let sm = CorrespondenceSet {
            level: Level::Superpoint,
            pairs: (0..n).map(|i| (i, i)).collect(),
            scores: vec![1.0; n],
            group_of: None,
        };
        let cfg = PointMatchConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let c = point_match(&g, &g, &sm, &cfg).unwrap();
        c.validate(g.num_dense(), g.num_dense()).unwrap();
        assert!(c.scores.iter().all(|&s| s > 0.0 && s < 1.0));
        assert!(!c.is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let c = CorrespondenceSet {
            level: Level::Point,
            pairs: vec![(1, 2), (3, 4)],
            scores: vec![0.25, 0.125],
            group_of: Some(vec![0, 5]),
        };
        let text = c.to_csv();
        assert!(text.starts_with("level,ip,iq,score,group\npoint,1,2,0.25,0\n"));
        assert_eq!(CorrespondenceSet::from_csv(&text).unwrap(), c);
        let s = CorrespondenceSet {
            level: Level::Superpoint,
            ..CorrespondenceSet::new(Level::Superpoint)
        };
        assert_eq!(CorrespondenceSet::from_csv(&s.to_csv()).unwrap().pairs.len(), 0);
    }
}
