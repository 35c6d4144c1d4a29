//! Fixtures shared by the criterion benches.

use georeg::attention::{self, AttentionMode, GeoEmbedding, GeoEmbeddingConfig, TransformerConfig};
use georeg::synth::{planted_correspondences, PlantedConfig, PlantedSet};
use georeg::{ParamStore, PointCloud, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new(
        (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect(),
    )
    .expect("finite points")
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// 5000 putative pairs, 40% of them inliers.
pub fn planted(seed: u64) -> PlantedSet {
    planted_correspondences(&PlantedConfig {
        seed,
        ..Default::default()
    })
    .expect("default planted settings are valid")
}

/// Features, aggregated embedding and parameters for one self-attention
/// layer over `m` superpoints.
pub struct AttentionFixture {
    pub x: Tensor,
    pub r: Tensor,
    pub params: ParamStore,
    pub cfg: TransformerConfig,
}

pub fn attention_fixture(m: usize, d_t: usize, mode: AttentionMode) -> AttentionFixture {
    let cfg = TransformerConfig {
        embed: GeoEmbeddingConfig {
            d_t,
            ..Default::default()
        },
        heads: 4,
        layers: 1,
        mode,
    };
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(m as u64);
    attention::init_params(&cfg, d_t, &mut rng, &mut params).expect("valid transformer settings");
    let geo = GeoEmbedding::compute(&random_cloud(m, 1), &cfg.embed).expect("embedding");
    AttentionFixture {
        x: random_matrix(m, d_t, 2),
        r: (*geo.dist).clone(),
        params,
        cfg,
    }
}
