//! Geometric structure embeddings and the interleaved self/cross-attention
//! stack that turns superpoint features into hybrid features.
//!
//! Pairwise embeddings are stored flattened: entry `(i, j)` is row `i·M + j`
//! of an `M²×d_t` matrix, and the angular entry `(i, j, x)` is row
//! `(i·M + j)·k + x` of an `M²k×d_t` matrix.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::cloud::{KdTree, PointCloud};
use crate::error::{Error, Result};
use crate::linalg::{self, Vec3};
use crate::params::{Bindings, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const LN_EPS: f64 = 1e-5;
pub const FFN_EXPANSION: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct GeoEmbeddingConfig {
    pub sigma_d: f64,
    /// Degrees.
    pub sigma_a: f64,
    pub k_neighbors: usize,
    pub d_t: usize,
}

impl Default for GeoEmbeddingConfig {
    fn default() -> Self {
        Self {
            sigma_d: 0.2,
            sigma_a: 15.0,
            k_neighbors: 3,
            d_t: 128,
        }
    }
}

impl GeoEmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_d > 0.0) || !(self.sigma_a > 0.0) {
            return Err(Error::Config("sigma_d and sigma_a must be positive".into()));
        }
        if self.k_neighbors == 0 {
            return Err(Error::Config("k_neighbors must be at least 1".into()));
        }
        if self.d_t == 0 || self.d_t % 2 != 0 {
            return Err(Error::Config(format!("d_t must be even, got {}", self.d_t)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// Per-layer projection of the embedding inside the score.
    Standard,
    /// One global, nonlinearly pre-projected embedding reused by every layer.
    Shared,
    /// No geometric term.
    Vanilla,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "shared" => Ok(Self::Shared),
            "vanilla" => Ok(Self::Vanilla),
            _ => Err(Error::Config(format!("unknown attention mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub embed: GeoEmbeddingConfig,
    pub heads: usize,
    pub layers: usize,
    pub mode: AttentionMode,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            embed: GeoEmbeddingConfig::default(),
            heads: 4,
            layers: 3,
            mode: AttentionMode::Standard,
        }
    }
}

impl TransformerConfig {
    pub fn d_t(&self) -> usize {
        self.embed.d_t
    }

    pub fn validate(&self) -> Result<()> {
        self.embed.validate()?;
        if self.heads == 0 || self.d_t() % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide d_t = {}",
                self.heads,
                self.d_t()
            )));
        }
        Ok(())
    }
}

fn inv_freqs(d_t: usize) -> Vec<f64> {
    (0..d_t / 2)
        .map(|k| 1.0 / 10000f64.powf(2.0 * k as f64 / d_t as f64))
        .collect()
}

fn sinusoid(v: f64, freqs: &[f64], out: &mut [f64]) {
    for (k, f) in freqs.iter().enumerate() {
        let a = v * f;
        out[2 * k] = a.sin();
        out[2 * k + 1] = a.cos();
    }
}

/// `M×M×d_t` sinusoidal embedding of pairwise distances.
pub fn distance_embedding(supers: &PointCloud, cfg: &GeoEmbeddingConfig) -> Result<Tensor> {
    cfg.validate()?;
    let pts = supers.points();
    let (m, d) = (pts.len(), cfg.d_t);
    let freqs = inv_freqs(d);
    let mut out = vec![0.0; m * m * d];
    for i in 0..m {
        for j in 0..m {
            let rho = linalg::norm(&linalg::sub(&pts[i], &pts[j]));
            let o = (i * m + j) * d;
            sinusoid(rho / cfg.sigma_d, &freqs, &mut out[o..o + d]);
        }
    }
    Tensor::new(vec![m, m, d], out)
}

/// Angle between two vectors in `[0, π]`; zero if either is zero.
pub fn vector_angle(a: &Vec3, b: &Vec3) -> f64 {
    let c = linalg::norm(&linalg::cross(a, b));
    let d = linalg::dot(a, b);
    if c == 0.0 && d == 0.0 {
        0.0
    } else {
        c.atan2(d)
    }
}

/// `M×M×k×d_t` embedding of the angles at `p_i` between each of its `k`
/// nearest neighbours (self excluded) and `p_j`. Diagonal entries are zero.
pub fn angular_embedding(supers: &PointCloud, cfg: &GeoEmbeddingConfig) -> Result<Tensor> {
    cfg.validate()?;
    let pts = supers.points();
    let (m, k, d) = (pts.len(), cfg.k_neighbors, cfg.d_t);
    if m <= k {
        return Err(Error::Parameter(format!(
            "angular embedding needs more than k = {k} superpoints, got {m}"
        )));
    }
    let freqs = inv_freqs(d);
    let sigma = cfg.sigma_a.to_radians();
    let tree = KdTree::build(pts);
    let mut out = vec![0.0; m * m * k * d];
    for i in 0..m {
        let nbrs: Vec<usize> = tree
            .knn(&pts[i], k + 1)
            .into_iter()
            .map(|n| n.index)
            .filter(|&x| x != i)
            .take(k)
            .collect();
        for j in 0..m {
            if j == i {
                continue;
            }
            let dji = linalg::sub(&pts[j], &pts[i]);
            for (xi, &x) in nbrs.iter().enumerate() {
                let dxi = linalg::sub(&pts[x], &pts[i]);
                let alpha = vector_angle(&dxi, &dji);
                let o = ((i * m + j) * k + xi) * d;
                sinusoid(alpha / sigma, &freqs, &mut out[o..o + d]);
            }
        }
    }
    Tensor::new(vec![m, m, k, d], out)
}

/// `r = r^D·W^D + max_x r^A·W^A`, returned as `M×M×d_t`.
pub fn aggregate_embedding(dist: &Tensor, ang: &Tensor, wd: &Tensor, wa: &Tensor) -> Result<Tensor> {
    let s = dist.shape();
    if s.len() != 3 || ang.rank() != 4 || ang.shape()[..2] != s[..2] {
        return Err(Error::Dimension(format!(
            "embedding shapes {:?} and {:?}",
            dist.shape(),
            ang.shape()
        )));
    }
    let (m, k) = (s[0], ang.shape()[2]);
    let mut tape = Tape::new();
    let rd = tape.constant(rows_of_last(dist.clone()));
    let ra = tape.constant(rows_of_last(ang.clone()));
    let (wd, wa) = (tape.constant(wd.clone()), tape.constant(wa.clone()));
    let r = aggregate_on_tape(&mut tape, rd, Some((ra, k)), wd, wa)?;
    let d = tape.value(r).cols();
    tape.value(r).clone().reshape(vec![m, m, d])
}

/// Flattens all leading extents, keeping the last one as columns.
fn rows_of_last(t: Tensor) -> Tensor {
    let d = *t.shape().last().expect("non-empty shape");
    let n = t.len() / d;
    t.reshape(vec![n, d]).expect("same size")
}

fn aggregate_on_tape(
    tape: &mut Tape,
    rd: Var,
    ra: Option<(Var, usize)>,
    wd: Var,
    wa: Var,
) -> Result<Var> {
    let a = tape.matmul(rd, wd)?;
    match ra {
        Some((ra, k)) => {
            let b = tape.matmul(ra, wa)?;
            let p = tape.max_pool_groups(b, k)?;
            tape.add(a, p)
        }
        None => Ok(a),
    }
}

/// Both raw embeddings of one cloud, computed once and shared by all layers.
#[derive(Clone, Debug)]
pub struct GeoEmbedding {
    pub m: usize,
    /// `M²×d_t`.
    pub dist: Arc<Tensor>,
    /// `M²k×d_t` and the effective `k`; absent when the cloud has a single
    /// superpoint.
    pub ang: Option<(Arc<Tensor>, usize)>,
}

impl GeoEmbedding {
    /// `k` is reduced to `M − 1` for clouds with too few superpoints.
    pub fn compute(supers: &PointCloud, cfg: &GeoEmbeddingConfig) -> Result<Self> {
        let m = supers.len();
        let dist = Arc::new(rows_of_last(distance_embedding(supers, cfg)?));
        let k = cfg.k_neighbors.min(m.saturating_sub(1));
        let ang = if k == 0 {
            None
        } else {
            let c = GeoEmbeddingConfig {
                k_neighbors: k,
                ..cfg.clone()
            };
            Some((Arc::new(rows_of_last(angular_embedding(supers, &c)?)), k))
        };
        Ok(Self { m, dist, ang })
    }

    /// Aggregated embedding `M²×d_t` on the tape (plus the shared projection
    /// in shared mode); `None` in vanilla mode.
    pub fn on_tape(&self, tape: &mut Tape, vars: &Bindings, mode: AttentionMode) -> Result<Option<Var>> {
        if mode == AttentionMode::Vanilla {
            return Ok(None);
        }
        let rd = tape.constant_shared(self.dist.clone());
        let ra = self
            .ang
            .as_ref()
            .map(|(a, k)| (tape.constant_shared(a.clone()), *k));
        let r = aggregate_on_tape(tape, rd, ra, vars.var("embed.wd")?, vars.var("embed.wa")?)?;
        if mode == AttentionMode::Shared {
            let s = tape.leaky_relu(r, LEAKY_SLOPE);
            return Ok(Some(tape.matmul(s, vars.var("shared.wr")?)?));
        }
        Ok(Some(r))
    }
}

/// Role names of one attention block.
fn block_roles(kind: &str, standard: bool) -> Vec<String> {
    let mut v: Vec<String> = [
        "wq", "wk", "wv", "wo", "bo", "ln1.g", "ln1.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
        "ln2.g", "ln2.b",
    ]
    .iter()
    .map(|r| format!("{kind}.{r}"))
    .collect();
    if standard {
        v.push(format!("{kind}.wr"));
    }
    v
}

/// Initial parameters of the attention stack (`input_dim` is the width of
/// the incoming superpoint features).
pub fn init_params(cfg: &TransformerConfig, input_dim: usize, rng: &mut impl Rng, store: &mut ParamStore) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_t();
    let mat = |r: usize, c: usize, rng: &mut dyn rand::RngCore| {
        let n = Normal::new(0.0, (1.0 / r as f64).sqrt()).expect("valid std");
        Tensor::from_fn(r, c, |_, _| n.sample(rng))
    };
    if input_dim != d {
        store.insert("input.w", mat(input_dim, d, rng));
        store.insert("input.b", Tensor::zeros(1, d));
    }
    store.insert("embed.wd", mat(d, d, rng));
    store.insert("embed.wa", mat(d, d, rng));
    if cfg.mode == AttentionMode::Shared {
        store.insert("shared.wr", mat(d, d, rng));
    }
    let h = FFN_EXPANSION * d;
    for i in 0..cfg.layers {
        for kind in ["self", "cross"] {
            let standard = kind == "self" && cfg.mode == AttentionMode::Standard;
            for role in block_roles(kind, standard) {
                let name = format!("layer{i}.{role}");
                let t = match role.split_once('.').map(|(_, r)| r).unwrap_or("") {
                    "wq" | "wk" | "wv" | "wo" | "wr" => mat(d, d, rng),
                    "ffn.w1" => mat(d, h, rng),
                    "ffn.w2" => mat(h, d, rng),
                    "ffn.b1" => Tensor::zeros(1, h),
                    "ln1.g" | "ln2.g" => Tensor::full(1, d, 1.0),
                    _ => Tensor::zeros(1, d),
                };
                store.insert(name, t);
            }
        }
    }
    Ok(())
}

/// Multi-head scaled dot-product attention of `xq` rows over `xkv` rows
/// with an optional pair-specific key offset `geo` (`(M·N)×d_t`).
fn attend(
    tape: &mut Tape,
    vars: &Bindings,
    prefix: &str,
    xq: Var,
    xkv: Var,
    geo: Option<Var>,
    heads: usize,
) -> Result<Var> {
    let q = tape.matmul(xq, vars.var(&format!("{prefix}.wq"))?)?;
    let k = tape.matmul(xkv, vars.var(&format!("{prefix}.wk"))?)?;
    let v = tape.matmul(xkv, vars.var(&format!("{prefix}.wv"))?)?;
    let d = tape.value(q).cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, s, e)?, tape.slice_cols(k, s, e)?, tape.slice_cols(v, s, e)?)
        };
        let mut sc = tape.matmul_nt(qh, kh)?;
        if let Some(g) = geo {
            let gh = if heads == 1 { g } else { tape.slice_cols(g, s, e)? };
            let gs = tape.geo_scores(qh, gh)?;
            sc = tape.add(sc, gs)?;
        }
        let sc = tape.scale(sc, scale);
        let a = tape.softmax_rows(sc);
        outs.push(tape.matmul(a, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

fn layer_norm_affine(tape: &mut Tape, vars: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let n = tape.layer_norm_rows(x, LN_EPS);
    let g = tape.mul_row(n, vars.var(&format!("{prefix}.g"))?)?;
    tape.add_row(g, vars.var(&format!("{prefix}.b"))?)
}

fn linear(tape: &mut Tape, vars: &Bindings, w: &str, b: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, vars.var(w)?)?;
    tape.add_row(y, vars.var(b)?)
}

/// Attention → output projection → residual + norm → feed-forward →
/// residual + norm.
fn block(
    tape: &mut Tape,
    vars: &Bindings,
    prefix: &str,
    xq: Var,
    xkv: Var,
    geo: Option<Var>,
    heads: usize,
) -> Result<Var> {
    let z = attend(tape, vars, prefix, xq, xkv, geo, heads)?;
    let o = linear(tape, vars, &format!("{prefix}.wo"), &format!("{prefix}.bo"), z)?;
    let y = tape.add(xq, o)?;
    let y = layer_norm_affine(tape, vars, &format!("{prefix}.ln1"), y)?;
    let f = linear(tape, vars, &format!("{prefix}.ffn.w1"), &format!("{prefix}.ffn.b1"), y)?;
    let f = tape.relu(f);
    let f = linear(tape, vars, &format!("{prefix}.ffn.w2"), &format!("{prefix}.ffn.b2"), f)?;
    let y2 = tape.add(y, f)?;
    layer_norm_affine(tape, vars, &format!("{prefix}.ln2"), y2)
}

/// Self-attention block of `layer`. `r` is the aggregated embedding in
/// standard mode, the pre-projected one in shared mode, ignored in vanilla.
pub fn self_attention_on_tape(
    tape: &mut Tape,
    vars: &Bindings,
    layer: usize,
    x: Var,
    r: Option<Var>,
    cfg: &TransformerConfig,
) -> Result<Var> {
    let prefix = format!("layer{layer}.self");
    let geo = match (cfg.mode, r) {
        (AttentionMode::Vanilla, _) | (_, None) => None,
        (AttentionMode::Standard, Some(r)) => {
            Some(tape.matmul(r, vars.var(&format!("{prefix}.wr"))?)?)
        }
        (AttentionMode::Shared, Some(r)) => Some(r),
    };
    block(tape, vars, &prefix, x, x, geo, cfg.heads)
}

pub fn cross_attention_on_tape(
    tape: &mut Tape,
    vars: &Bindings,
    layer: usize,
    xp: Var,
    xq: Var,
    cfg: &TransformerConfig,
) -> Result<Var> {
    let (a, b) = (tape.value(xp).cols(), tape.value(xq).cols());
    if a != cfg.d_t() || b != cfg.d_t() {
        return Err(Error::Config(format!(
            "cross-attention widths {a} and {b} differ from d_t = {}",
            cfg.d_t()
        )));
    }
    block(tape, vars, &format!("layer{layer}.cross"), xp, xq, None, cfg.heads)
}

/// The full interleaved stack on a tape. Inputs are superpoint features of
/// both clouds; outputs are the hybrid features.
pub fn transformer_on_tape(
    tape: &mut Tape,
    vars: &Bindings,
    fp: Var,
    fq: Var,
    geo_p: &GeoEmbedding,
    geo_q: &GeoEmbedding,
    cfg: &TransformerConfig,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let (mut xp, mut xq) = if vars.has("input.w") {
        (
            linear(tape, vars, "input.w", "input.b", fp)?,
            linear(tape, vars, "input.w", "input.b", fq)?,
        )
    } else {
        (fp, fq)
    };
    if tape.value(xp).cols() != cfg.d_t() || tape.value(xq).cols() != cfg.d_t() {
        return Err(Error::Config("superpoint feature width does not match d_t".into()));
    }
    if cfg.layers == 0 {
        return Ok((xp, xq));
    }
    let rp = geo_p.on_tape(tape, vars, cfg.mode)?;
    let rq = geo_q.on_tape(tape, vars, cfg.mode)?;
    for i in 0..cfg.layers {
        let sp = self_attention_on_tape(tape, vars, i, xp, rp, cfg)?;
        let sq = self_attention_on_tape(tape, vars, i, xq, rq, cfg)?;
        xp = cross_attention_on_tape(tape, vars, i, sp, sq, cfg)?;
        xq = cross_attention_on_tape(tape, vars, i, sq, sp, cfg)?;
    }
    Ok((xp, xq))
}

fn as_pairs(r: &Tensor, m: usize) -> Result<Tensor> {
    if r.len() % (m * m) != 0 {
        return Err(Error::Dimension(format!(
            "embedding {:?} is not {m}×{m}×d",
            r.shape()
        )));
    }
    r.clone().reshape(vec![m * m, r.len() / (m * m)])
}

/// Plain-value self-attention block (see [`self_attention_on_tape`]).
pub fn geometric_self_attention(
    x: &Tensor,
    r: &Tensor,
    params: &ParamStore,
    layer: usize,
    cfg: &TransformerConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let vars = Bindings::bind(&mut tape, params, false);
    let xv = tape.constant(x.clone());
    let rv = tape.constant(as_pairs(r, x.rows())?);
    let out = self_attention_on_tape(&mut tape, &vars, layer, xv, Some(rv), cfg)?;
    Ok(tape.value(out).clone())
}

/// Plain-value cross-attention block: `xp` attends over `xq`.
pub fn cross_attention(
    xp: &Tensor,
    xq: &Tensor,
    params: &ParamStore,
    layer: usize,
    cfg: &TransformerConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let vars = Bindings::bind(&mut tape, params, false);
    let (a, b) = (tape.constant(xp.clone()), tape.constant(xq.clone()));
    let out = cross_attention_on_tape(&mut tape, &vars, layer, a, b, cfg)?;
    Ok(tape.value(out).clone())
}

/// Hybrid features for both clouds from their graphs' superpoint features.
pub fn run_transformer(
    graph_p: &crate::cloud::SuperpointGraph,
    graph_q: &crate::cloud::SuperpointGraph,
    params: &ParamStore,
    cfg: &TransformerConfig,
) -> Result<(Tensor, Tensor)> {
    let get = |g: &crate::cloud::SuperpointGraph| {
        g.superpoint_features
            .clone()
            .ok_or_else(|| Error::Data("superpoint features have not been computed".into()))
    };
    let (fp, fq) = (get(graph_p)?, get(graph_q)?);
    let geo_p = GeoEmbedding::compute(&graph_p.superpoints, &cfg.embed)?;
    let geo_q = GeoEmbedding::compute(&graph_q.superpoints, &cfg.embed)?;
    let mut tape = Tape::new();
    let vars = Bindings::bind(&mut tape, params, false);
    let (a, b) = (tape.constant(fp), tape.constant(fq));
    let (hp, hq) = transformer_on_tape(&mut tape, &vars, a, b, &geo_p, &geo_q, cfg)?;
    Ok((tape.value(hp).clone(), tape.value(hq).clone()))
}

/// The per-layer projections of one self-attention call: `X·W^{Q,K,V}` in
/// every mode, plus `r·W^R` over all `M²` pairs in standard mode. This is
/// the work the shared variant removes from the layers.
pub fn projection_stage(
    x: &Tensor,
    r: &Tensor,
    params: &ParamStore,
    layer: usize,
    mode: AttentionMode,
) -> Result<Vec<Tensor>> {
    let p = |role: &str| params.require(&format!("layer{layer}.self.{role}"));
    let mut out = vec![x.matmul(p("wq")?)?, x.matmul(p("wk")?)?, x.matmul(p("wv")?)?];
    if mode == AttentionMode::Standard {
        out.push(r.matmul(p("wr")?)?);
    }
    Ok(out)
}
