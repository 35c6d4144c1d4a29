//! The full learnable model: descriptor lifts, the attention stack and the
//! dustbin score, with a forward pass on the tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, GeoEmbedding, TransformerConfig};
use crate::cloud::{build_hierarchy, PointCloud, SuperpointGraph};
use crate::error::{Error, Result};
use crate::features::{DescriptorConfig, FeatureProvider, Lift, RawFeatures};
use crate::matching::PointMatchConfig;
use crate::params::{Bindings, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DENSE_W: &str = "lift.dense.w";
pub const DENSE_B: &str = "lift.dense.b";
pub const SUPER_W: &str = "lift.super.w";
pub const SUPER_B: &str = "lift.super.b";
pub const ALPHA: &str = "ot.alpha";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub descriptor: DescriptorConfig,
    pub transformer: TransformerConfig,
    /// Width of the dense (point-level) features.
    pub dense_dim: usize,
    pub point: PointMatchConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            descriptor: DescriptorConfig::default(),
            transformer: TransformerConfig::default(),
            dense_dim: 64,
            point: PointMatchConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.descriptor.validate()?;
        self.transformer.validate()?;
        if self.dense_dim == 0 {
            return Err(Error::Config("dense_dim must be positive".into()));
        }
        if self.point.k_mutual == 0 || self.point.iters == 0 {
            return Err(Error::Config("k_mutual and sinkhorn iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Fresh parameters for raw feature widths `(dense, superpoint)`.
pub fn init_params(cfg: &ModelConfig, input_dims: (usize, usize), seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let d = Lift::init(input_dims.0, cfg.dense_dim, &mut rng);
    store.insert(DENSE_W, d.weight);
    store.insert(DENSE_B, d.bias);
    let s = Lift::init(input_dims.1, cfg.transformer.d_t(), &mut rng);
    store.insert(SUPER_W, s.weight);
    store.insert(SUPER_B, s.bias);
    store.insert(ALPHA, Tensor::scalar(cfg.point.alpha));
    attention::init_params(&cfg.transformer, cfg.transformer.d_t(), &mut rng, &mut store)?;
    Ok(store)
}

/// Everything about one cloud that does not depend on the parameters.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub graph: SuperpointGraph,
    pub raw: RawFeatures,
    pub geo: GeoEmbedding,
}

impl Prepared {
    pub fn new(pc: &PointCloud, cfg: &ModelConfig, provider: &FeatureProvider) -> Result<Self> {
        let graph = build_hierarchy(pc, cfg.descriptor.dense_voxel, cfg.descriptor.super_voxel)?;
        Self::from_graph(graph, cfg, provider)
    }

    pub fn from_graph(graph: SuperpointGraph, cfg: &ModelConfig, provider: &FeatureProvider) -> Result<Self> {
        let raw = provider.raw(&graph)?;
        let geo = GeoEmbedding::compute(&graph.superpoints, &cfg.transformer.embed)?;
        Ok(Self { graph, raw, geo })
    }

    pub fn builtin(pc: &PointCloud, cfg: &ModelConfig) -> Result<Self> {
        Self::new(pc, cfg, &FeatureProvider::Builtin(cfg.descriptor.clone()))
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Hybrid superpoint features.
    pub hp: Var,
    pub hq: Var,
    /// Dense point features.
    pub dp: Var,
    pub dq: Var,
    pub alpha: Var,
}

pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &Bindings,
    p: &Prepared,
    q: &Prepared,
    cfg: &ModelConfig,
) -> Result<Forward> {
    let lift = |tape: &mut Tape, x: &Tensor, w: &str, b: &str| -> Result<Var> {
        let x = tape.constant(x.clone());
        Lift::on_tape(tape, x, vars.var(w)?, vars.var(b)?)
    };
    let dp = lift(tape, &p.raw.dense, DENSE_W, DENSE_B)?;
    let dq = lift(tape, &q.raw.dense, DENSE_W, DENSE_B)?;
    let sp = lift(tape, &p.raw.superpoint, SUPER_W, SUPER_B)?;
    let sq = lift(tape, &q.raw.superpoint, SUPER_W, SUPER_B)?;
    let (hp, hq) = attention::transformer_on_tape(tape, vars, sp, sq, &p.geo, &q.geo, &cfg.transformer)?;
    Ok(Forward {
        hp,
        hq,
        dp,
        dq,
        alpha: vars.var(ALPHA)?,
    })
}

/// Both graphs with their dense features and hybrid superpoint features
/// filled in, plus the learned dustbin score.
#[derive(Clone, Debug)]
pub struct Inference {
    pub graph_p: SuperpointGraph,
    pub graph_q: SuperpointGraph,
    pub alpha: f64,
}

pub fn infer(params: &ParamStore, cfg: &ModelConfig, p: &Prepared, q: &Prepared) -> Result<Inference> {
    let mut tape = Tape::new();
    let vars = Bindings::bind(&mut tape, params, false);
    let f = forward_on_tape(&mut tape, &vars, p, q, cfg)?;
    let fill = |g: &SuperpointGraph, dense: Var, sup: Var| {
        let mut g = g.clone();
        g.dense_features = Some(tape.value(dense).clone());
        g.superpoint_features = Some(tape.value(sup).clone());
        g
    };
    Ok(Inference {
        graph_p: fill(&p.graph, f.dp, f.hp),
        graph_q: fill(&q.graph, f.dq, f.hq),
        alpha: tape.scalar(f.alpha),
    })
}
