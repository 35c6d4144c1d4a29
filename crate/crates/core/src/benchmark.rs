//! Evaluation of a set of pairs and the aggregate report.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::Serialize;

use crate::error::Result;
use crate::metrics::MetricsReport;
use crate::params::ParamStore;
use crate::pipeline::{register_pair, PairInput, PipelineConfig, RunOutput, Timings};
use crate::synth::SynthPair;

impl From<&SynthPair> for PairInput {
    fn from(p: &SynthPair) -> Self {
        PairInput {
            source: p.source.clone(),
            target: p.target.clone(),
            ground_truth: Some(p.transform),
            clean: Some((p.clean_source.clone(), p.clean_target.clone())),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PairResult {
    pub index: usize,
    pub metrics: Option<MetricsReport>,
    pub timings: Option<Timings>,
    pub error: Option<String>,
}

/// Runs every pair, `threads` at a time. Results come back in input order
/// whatever the scheduling.
pub fn run_set(
    params: &ParamStore,
    cfg: &PipelineConfig,
    inputs: &[PairInput],
    threads: usize,
    mut on_done: impl FnMut(usize, &Result<RunOutput>) + Send,
) -> Vec<PairResult> {
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(inputs.len()));
    let callback = Mutex::new(&mut on_done);
    thread::scope(|s| {
        for _ in 0..threads.max(1) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= inputs.len() {
                    break;
                }
                let out = register_pair(params, cfg, &inputs[k]);
                (callback.lock().expect("callback lock"))(k, &out);
                let r = match out {
                    Ok(o) => PairResult {
                        index: k,
                        metrics: Some(o.metrics),
                        timings: Some(o.timings),
                        error: None,
                    },
                    Err(e) => PairResult {
                        index: k,
                        metrics: None,
                        timings: None,
                        error: Some(e.to_string()),
                    },
                };
                results.lock().expect("results lock").push(r);
            });
        }
    });
    let mut v = results.into_inner().expect("results lock");
    v.sort_by_key(|r| r.index);
    v
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub pairs: usize,
    pub failures: usize,
    /// Failed pairs count as unbounded errors.
    pub median_rre_deg: f64,
    pub median_rte: f64,
    /// Failed pairs count as zero.
    pub mean_ir: f64,
    pub mean_pir: Option<f64>,
    pub fmr: f64,
    pub rr: f64,
    pub mean_chamfer: Option<f64>,
    pub mean_model_s: f64,
    pub mean_pose_s: f64,
    /// Digest of every per-pair report except the timings.
    pub digest: String,
}

fn median_with_inf(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn mean_of(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn summarize(results: &[PairResult]) -> Summary {
    let n = results.len();
    let ok: Vec<&MetricsReport> = results.iter().filter_map(|r| r.metrics.as_ref()).collect();
    let rre = results
        .iter()
        .map(|r| r.metrics.as_ref().and_then(|m| m.rre_deg).unwrap_or(f64::INFINITY))
        .collect();
    let rte = results
        .iter()
        .map(|r| r.metrics.as_ref().and_then(|m| m.rte).unwrap_or(f64::INFINITY))
        .collect();
    let per_pair = |f: fn(&MetricsReport) -> Option<f64>| -> f64 {
        results.iter().map(|r| r.metrics.as_ref().and_then(f).unwrap_or(0.0)).sum::<f64>() / n.max(1) as f64
    };
    let pir: Vec<f64> = ok.iter().filter_map(|m| m.pir).collect();
    let chamfer: Vec<f64> = ok.iter().filter_map(|m| m.chamfer).collect();
    let timings: Vec<&Timings> = results.iter().filter_map(|r| r.timings.as_ref()).collect();
    let model: Vec<f64> = timings.iter().map(|t| t.model_s).collect();
    let pose: Vec<f64> = timings.iter().map(|t| t.pose_s).collect();

    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for r in results {
        let text = serde_json::to_string(&(&r.index, &r.metrics, &r.error)).unwrap_or_default();
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    Summary {
        pairs: n,
        failures: n - ok.len(),
        median_rre_deg: median_with_inf(rre),
        median_rte: median_with_inf(rte),
        mean_ir: per_pair(|m| m.ir),
        mean_pir: mean_of(&pir),
        fmr: per_pair(|m| m.fmr),
        rr: per_pair(|m| m.rr),
        mean_chamfer: mean_of(&chamfer),
        mean_model_s: mean_of(&model).unwrap_or(0.0),
        mean_pose_s: mean_of(&pose).unwrap_or(0.0),
        digest: format!("{h:016x}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Thresholds;

    fn report(ir: f64, rre: f64) -> MetricsReport {
        MetricsReport {
            ir: Some(ir),
            fmr: Some(if ir >= 0.05 { 1.0 } else { 0.0 }),
            rr: Some(if rre < 5.0 { 1.0 } else { 0.0 }),
            pir: Some(0.5),
            rre_deg: Some(rre),
            rte: Some(rre / 100.0),
            rmse: None,
            chamfer: None,
            num_correspondences: 10,
            num_superpoint_matches: 4,
            thresholds: Thresholds::default(),
        }
    }

    #[test]
    fn failures_count_against_the_summary() {
        let ok = |i, ir, rre| PairResult {
            index: i,
            metrics: Some(report(ir, rre)),
            timings: Some(Timings::default()),
            error: None,
        };
        let results = vec![
            ok(0, 0.5, 1.0),
            ok(1, 0.3, 2.0),
            PairResult {
                index: 2,
                metrics: None,
                timings: None,
                error: Some("boom".into()),
            },
        ];
        let s = summarize(&results);
        assert_eq!(s.failures, 1);
        assert_eq!(s.median_rre_deg, 2.0);
        assert!((s.mean_ir - 0.8 / 3.0).abs() < 1e-15);
        assert!((s.rr - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.mean_pir, Some(0.5));
        assert_eq!(summarize(&results).digest, s.digest);
    }
}
