//! End-to-end registration of one pair and its on-disk artifacts.

use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::cloud::{PointCloud, RigidTransform};
use crate::error::{Error, Result};
use crate::matching::{merge_groups, point_match_groups, superpoint_match, CorrespondenceSet, MatchMode, PointMatchConfig};
use crate::metrics::{compute_metrics, MetricsInput, MetricsReport, Thresholds};
use crate::model::{infer, ModelConfig, Prepared};
use crate::params::ParamStore;
use crate::registration::{local_to_global, ransac_estimate, svd_top_n, EstimatorConfig, PairSet};

/// Correspondences used by the plain weighted-SVD estimator.
pub const SVD_TOP_N: usize = 250;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    Lgr,
    Ransac,
    /// Weighted SVD on the `n` best correspondences.
    Svd(usize),
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lgr" => Ok(Estimator::Lgr),
            "ransac" => Ok(Estimator::Ransac),
            "svd" => Ok(Estimator::Svd(SVD_TOP_N)),
            _ => Err(Error::Config(format!("unknown estimator `{s}` (lgr, ransac, svd)"))),
        }
    }
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Lgr => "lgr",
            Estimator::Ransac => "ransac",
            Estimator::Svd(_) => "svd",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub n_c: usize,
    pub match_mode: MatchMode,
    pub estimator: Estimator,
    pub estimation: EstimatorConfig,
    pub thresholds: Thresholds,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            n_c: 256,
            match_mode: MatchMode::TopK,
            estimator: Estimator::Lgr,
            estimation: EstimatorConfig::default(),
            thresholds: Thresholds::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PairInput {
    pub source: PointCloud,
    pub target: PointCloud,
    pub ground_truth: Option<RigidTransform>,
    /// Complete clean shapes in the source and target frames.
    pub clean: Option<(PointCloud, PointCloud)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Timings {
    pub model_s: f64,
    pub pose_s: f64,
    pub total_s: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: MetricsReport,
    pub supermatches: CorrespondenceSet,
    pub correspondences: CorrespondenceSet,
    pub transform: RigidTransform,
    pub timings: Timings,
}

/// Tags an error with the stage it came from and the input digest.
fn stage<T>(name: &'static str, digest: u64, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: name,
            digest,
            source: Box::new(other),
        },
    })
}

pub fn input_digest(input: &PairInput) -> u64 {
    input.source.digest().rotate_left(17) ^ input.target.digest()
}

/// Model stages up to the matched correspondences, then pose estimation
/// and metrics.
pub fn register_pair(params: &ParamStore, cfg: &PipelineConfig, input: &PairInput) -> Result<RunOutput> {
    let digest = input_digest(input);
    let start = Instant::now();
    let p = stage("preprocess", digest, Prepared::builtin(&input.source, &cfg.model))?;
    let q = stage("preprocess", digest, Prepared::builtin(&input.target, &cfg.model))?;
    run_prepared(params, cfg, input, &p, &q, start)
}

/// As [`register_pair`] with both clouds already prepared; `start` is the
/// instant model time is counted from.
pub fn run_prepared(
    params: &ParamStore,
    cfg: &PipelineConfig,
    input: &PairInput,
    p: &Prepared,
    q: &Prepared,
    start: Instant,
) -> Result<RunOutput> {
    let digest = input_digest(input);
    let inf = stage("transformer", digest, infer(params, &cfg.model, p, q))?;
    let (gp, gq) = (&inf.graph_p, &inf.graph_q);
    let hp = gp.superpoint_features.as_ref().expect("filled by infer");
    let hq = gq.superpoint_features.as_ref().expect("filled by infer");
    let n_c = cfg.n_c.min(hp.rows() * hq.rows());
    let supermatches = stage("superpoint_match", digest, superpoint_match(hp, hq, n_c, cfg.match_mode))?;
    let pm = PointMatchConfig {
        alpha: inf.alpha,
        ..cfg.model.point
    };
    let groups = stage("point_match", digest, point_match_groups(gp, gq, &supermatches, &pm))?;
    let correspondences = merge_groups(&groups);
    let model_done = Instant::now();

    let transform = stage(
        "estimator",
        digest,
        estimate(&groups, &correspondences, gp, gq, cfg),
    )?;
    let pose_done = Instant::now();

    let metrics = stage(
        "metrics",
        digest,
        compute_metrics(
            &MetricsInput {
                corr: &correspondences,
                supermatches: &supermatches,
                estimate: Some(&transform),
                ground_truth: input.ground_truth.as_ref(),
                graph_p: gp,
                graph_q: gq,
                clean: input.clean.as_ref().map(|(a, b)| (a, b)),
            },
            &cfg.thresholds,
        ),
    )?;
    let model_s = (model_done - start).as_secs_f64();
    let pose_s = (pose_done - model_done).as_secs_f64();
    Ok(RunOutput {
        metrics,
        supermatches,
        correspondences,
        transform,
        timings: Timings {
            model_s,
            pose_s,
            total_s: model_s + pose_s,
        },
    })
}

fn estimate(
    groups: &[CorrespondenceSet],
    all: &CorrespondenceSet,
    gp: &crate::cloud::SuperpointGraph,
    gq: &crate::cloud::SuperpointGraph,
    cfg: &PipelineConfig,
) -> Result<RigidTransform> {
    let pairs = PairSet::from_corr(all, &gp.dense_points, &gq.dense_points)?;
    match cfg.estimator {
        Estimator::Lgr => {
            let local = groups
                .iter()
                .map(|g| PairSet::from_corr(g, &gp.dense_points, &gq.dense_points))
                .collect::<Result<Vec<_>>>()?;
            Ok(local_to_global(&local, &pairs, &cfg.estimation)?.transform)
        }
        Estimator::Ransac => ransac_estimate(&pairs, &cfg.estimation, cfg.seed),
        Estimator::Svd(n) => svd_top_n(&pairs, n),
    }
}

/// 16 row-major entries of the 4×4 matrix, four per line.
pub fn format_pose(t: &RigidTransform) -> String {
    let m = t.to_matrix4();
    let mut s = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:.17e}", m[4 * r + c])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_pose(text: &str) -> Result<RigidTransform> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|w| w.parse::<f64>().map_err(|e| Error::Data(format!("pose entry `{w}`: {e}"))))
        .collect::<Result<_>>()?;
    let m: [f64; 16] = vals
        .try_into()
        .map_err(|v: Vec<f64>| Error::Data(format!("pose needs 16 numbers, found {}", v.len())))?;
    RigidTransform::from_matrix4(&m)
}

/// Writes `metrics.json`, `corr.csv`, `pose.txt` and `timings.json`.
pub fn write_artifacts(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&out.metrics)?)?;
    fs::write(dir.join("corr.csv"), out.correspondences.to_csv())?;
    fs::write(dir.join("pose.txt"), format_pose(&out.transform))?;
    fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&out.timings)?)?;
    Ok(())
}
