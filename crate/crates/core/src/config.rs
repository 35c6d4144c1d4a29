//! Flat `key = value` configuration with command-line overrides.
//!
//! Later sources win: defaults, then the file, then overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::attention::AttentionMode;
use crate::error::{Error, Result};
use crate::matching::MatchMode;
use crate::metrics::RecallProtocol;
use crate::pipeline::{Estimator, PipelineConfig};
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

/// Everything the command-line tools can be configured with.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    /// Built-in shape for single-pair commands.
    pub shape: String,
    /// Number of pairs in a benchmark set.
    pub pairs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pipeline = PipelineConfig::default();
        let train = TrainConfig {
            steps: 200,
            adam: Default::default(),
            loss: crate::training::LossConfig::for_model(&pipeline.model),
            seed: 0,
        };
        Self {
            pipeline,
            synth: SynthConfig::default(),
            train,
            shape: "bunny".into(),
            pairs: 20,
        }
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, found `{v}`"))),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|x| num(key, x.trim())).collect()
}

pub fn parse_mode(v: &str) -> Result<MatchMode> {
    match v {
        "topk" => Ok(MatchMode::TopK),
        "threshold" => Ok(MatchMode::Threshold(0.75)),
        _ => match v.strip_prefix("threshold:") {
            Some(t) => Ok(MatchMode::Threshold(num("match.mode", t)?)),
            None => Err(Error::Config(format!("unknown match mode `{v}` (topk, threshold[:t])"))),
        },
    }
}

pub fn parse_attention(v: &str) -> Result<AttentionMode> {
    match v {
        "standard" => Ok(AttentionMode::Standard),
        "shared" => Ok(AttentionMode::Shared),
        "vanilla" => Ok(AttentionMode::Vanilla),
        _ => Err(Error::Config(format!("unknown attention mode `{v}` (standard, shared, vanilla)"))),
    }
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = &mut self.pipeline;
        let m = &mut p.model;
        match key {
            "seed" => {
                let s: u64 = num(key, v)?;
                p.seed = s;
                self.synth.seed = s;
                self.train.seed = s;
            }
            "shape" => self.shape = v.to_string(),
            "pairs" => self.pairs = num(key, v)?,

            "dense_voxel" => m.descriptor.dense_voxel = num(key, v)?,
            "super_voxel" => m.descriptor.super_voxel = num(key, v)?,
            "radius_scales" => m.descriptor.radius_scales = list(key, v)?,
            "dense_dim" => m.dense_dim = num(key, v)?,
            "d_t" => m.transformer.embed.d_t = num(key, v)?,
            "heads" => m.transformer.heads = num(key, v)?,
            "layers" => m.transformer.layers = num(key, v)?,
            "attention" => m.transformer.mode = parse_attention(v)?,
            "sigma_d" => m.transformer.embed.sigma_d = num(key, v)?,
            "sigma_a" => m.transformer.embed.sigma_a = num(key, v)?,
            "angle_k" => m.transformer.embed.k_neighbors = num(key, v)?,
            "k_mutual" => m.point.k_mutual = num(key, v)?,
            "sinkhorn_iters" => m.point.iters = num(key, v)?,
            "alpha" => m.point.alpha = num(key, v)?,
            "dustbin_gate" => m.point.dustbin_gate = flag(key, v)?,

            "nc" => p.n_c = num(key, v)?,
            "mode" => p.match_mode = parse_mode(v)?,
            "estimator" => p.estimator = Estimator::from_str(v)?,
            "tau_a" => p.estimation.tau_a = num(key, v)?,
            "n_r" => p.estimation.n_r = num(key, v)?,
            "min_local_corr" => p.estimation.min_local_corr = num(key, v)?,
            "ransac_iters" => p.estimation.ransac_iters = num(key, v)?,
            "inlier_radius" => p.thresholds.inlier_radius = num(key, v)?,
            "fmr_min_ir" => p.thresholds.fmr_min_ir = num(key, v)?,
            "overlap_radius" => p.thresholds.overlap_radius = num(key, v)?,
            "recall_rmse" => p.thresholds.recall = RecallProtocol::Rmse { max: num(key, v)? },
            "recall_pose" => {
                let t = list(key, v)?;
                let [max_rre_deg, max_rte] = t[..] else {
                    return Err(Error::Config("`recall_pose` takes `degrees, distance`".into()));
                };
                p.thresholds.recall = RecallProtocol::Pose { max_rre_deg, max_rte };
            }

            "keep_ratio" => self.synth.keep_ratio = num(key, v)?,
            "max_rotation" => self.synth.max_rotation_deg = num(key, v)?,
            "max_translation" => self.synth.max_translation = num(key, v)?,
            "noise_sigma" => self.synth.noise_sigma = num(key, v)?,
            "noise_clip" => self.synth.noise_clip = num(key, v)?,
            "shape_points" => self.synth.shape_points = num(key, v)?,
            "sample_count" => self.synth.sample_count = num(key, v)?,

            "steps" => self.train.steps = num(key, v)?,
            "lr" => self.train.adam.lr = num(key, v)?,
            "weight_decay" => self.train.adam.weight_decay = num(key, v)?,
            "lr_decay" => self.train.adam.lr_decay = num(key, v)?,
            "delta_p" => self.train.loss.delta_p = num(key, v)?,
            "delta_n" => self.train.loss.delta_n = num(key, v)?,
            "gamma" => self.train.loss.gamma = num(key, v)?,
            "n_g" => self.train.loss.n_g = num(key, v)?,
            "match_radius" => self.train.loss.tau = num(key, v)?,
            "train_sinkhorn_iters" => self.train.loss.sinkhorn_iters = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then `file` if given, then `overrides`; validated.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path)?;
            cfg.apply(&parse_pairs(&text)?)?;
        }
        cfg.apply(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.model.validate()?;
        self.pipeline.estimation.validate()?;
        self.synth.validate()?;
        self.train.loss.validate()?;
        if self.pipeline.n_c == 0 {
            return Err(Error::Config("nc must be positive".into()));
        }
        if self.pairs == 0 {
            return Err(Error::Config("pairs must be positive".into()));
        }
        Ok(())
    }

    /// Settings as `key = value` lines that [`RunConfig::set`] reads back.
    pub fn to_pairs(&self) -> BTreeMap<&'static str, String> {
        let p = &self.pipeline;
        let m = &p.model;
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut out = BTreeMap::new();
        out.insert("seed", p.seed.to_string());
        out.insert("shape", self.shape.clone());
        out.insert("pairs", self.pairs.to_string());
        out.insert("dense_voxel", m.descriptor.dense_voxel.to_string());
        out.insert("super_voxel", m.descriptor.super_voxel.to_string());
        out.insert("radius_scales", join(&m.descriptor.radius_scales));
        out.insert("dense_dim", m.dense_dim.to_string());
        out.insert("d_t", m.transformer.embed.d_t.to_string());
        out.insert("heads", m.transformer.heads.to_string());
        out.insert("layers", m.transformer.layers.to_string());
        out.insert(
            "attention",
            match m.transformer.mode {
                AttentionMode::Standard => "standard",
                AttentionMode::Shared => "shared",
                AttentionMode::Vanilla => "vanilla",
            }
            .into(),
        );
        out.insert("sigma_d", m.transformer.embed.sigma_d.to_string());
        out.insert("sigma_a", m.transformer.embed.sigma_a.to_string());
        out.insert("angle_k", m.transformer.embed.k_neighbors.to_string());
        out.insert("k_mutual", m.point.k_mutual.to_string());
        out.insert("sinkhorn_iters", m.point.iters.to_string());
        out.insert("alpha", m.point.alpha.to_string());
        out.insert("dustbin_gate", m.point.dustbin_gate.to_string());
        out.insert("nc", p.n_c.to_string());
        out.insert(
            "mode",
            match p.match_mode {
                MatchMode::TopK => "topk".into(),
                MatchMode::Threshold(t) => format!("threshold:{t}"),
            },
        );
        out.insert("estimator", p.estimator.name().into());
        out.insert("tau_a", p.estimation.tau_a.to_string());
        out.insert("n_r", p.estimation.n_r.to_string());
        out.insert("min_local_corr", p.estimation.min_local_corr.to_string());
        out.insert("ransac_iters", p.estimation.ransac_iters.to_string());
        out.insert("inlier_radius", p.thresholds.inlier_radius.to_string());
        out.insert("fmr_min_ir", p.thresholds.fmr_min_ir.to_string());
        out.insert("overlap_radius", p.thresholds.overlap_radius.to_string());
        match p.thresholds.recall {
            RecallProtocol::Rmse { max } => out.insert("recall_rmse", max.to_string()),
            RecallProtocol::Pose { max_rre_deg, max_rte } => {
                out.insert("recall_pose", format!("{max_rre_deg},{max_rte}"))
            }
        };
        out.insert("keep_ratio", self.synth.keep_ratio.to_string());
        out.insert("max_rotation", self.synth.max_rotation_deg.to_string());
        out.insert("max_translation", self.synth.max_translation.to_string());
        out.insert("noise_sigma", self.synth.noise_sigma.to_string());
        out.insert("noise_clip", self.synth.noise_clip.to_string());
        out.insert("shape_points", self.synth.shape_points.to_string());
        out.insert("sample_count", self.synth.sample_count.to_string());
        out.insert("steps", self.train.steps.to_string());
        out.insert("lr", self.train.adam.lr.to_string());
        out.insert("weight_decay", self.train.adam.weight_decay.to_string());
        out.insert("lr_decay", self.train.adam.lr_decay.to_string());
        out.insert("delta_p", self.train.loss.delta_p.to_string());
        out.insert("delta_n", self.train.loss.delta_n.to_string());
        out.insert("gamma", self.train.loss.gamma.to_string());
        out.insert("n_g", self.train.loss.n_g.to_string());
        out.insert("match_radius", self.train.loss.tau.to_string());
        out.insert("train_sinkhorn_iters", self.train.loss.sinkhorn_iters.to_string());
        out
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn precedence_is_cli_then_file_then_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\nnc = 64\nestimator = ransac  # trailing\n\nk_mutual=2\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), &[kv("nc", "32")]).unwrap();
        assert_eq!(cfg.pipeline.n_c, 32);
        assert_eq!(cfg.pipeline.estimator, Estimator::Ransac);
        assert_eq!(cfg.pipeline.model.point.k_mutual, 2);
        assert_eq!(cfg.pipeline.estimation, RunConfig::default().pipeline.estimation);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply(&[
            kv("seed", "9"),
            kv("mode", "threshold:0.5"),
            kv("radius_scales", "2.5, 5"),
            kv("recall_pose", "5, 2"),
            kv("attention", "shared"),
        ])
        .unwrap();
        let back = {
            let mut c = RunConfig::default();
            c.apply(&parse_pairs(&cfg.to_text()).unwrap()).unwrap();
            c
        };
        assert_eq!(back, cfg);
        assert_eq!(back.train.seed, 9);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(parse_pairs("no equals sign").is_err());
        assert!(parse_pairs(" = 3").is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg.set("bogus", "1").is_err());
        assert!(cfg.set("nc", "many").is_err());
        assert!(cfg.set("estimator", "icp").is_err());
        assert!(cfg.set("dustbin_gate", "maybe").is_err());
        assert!(RunConfig::resolve(None, &[kv("nc", "0")]).is_err());
    }
}
