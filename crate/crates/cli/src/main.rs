use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use georeg::benchmark::{run_set, summarize};
use georeg::cloud::io::{read_cloud, write_xyz};
use georeg::config::RunConfig;
use georeg::model::{init_params, Prepared};
use georeg::pipeline::{format_pose, parse_pose, register_pair, write_artifacts, PairInput};
use georeg::synth::{composite_pairs, make_shape_pair, Shape, SynthPair};
use georeg::training::{train, TrainSample};
use georeg::{Error, ParamStore, PointCloud, Result};

#[derive(Parser)]
#[command(name = "georeg", version, about = "Point cloud registration with geometric attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// lgr, ransac or svd.
    #[arg(long)]
    estimator: Option<String>,
    /// Superpoint matching: topk or threshold[:t].
    #[arg(long)]
    mode: Option<String>,
    /// Number of superpoint matches.
    #[arg(long)]
    nc: Option<usize>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Any other setting, as `key=value`; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut over = Vec::new();
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{s}`")))?;
            over.push((k.trim().to_string(), v.trim().to_string()));
        }
        let named = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("estimator", self.estimator.clone()),
            ("mode", self.mode.clone()),
            ("nc", self.nc.map(|v| v.to_string())),
        ];
        over.extend(named.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        RunConfig::resolve(self.config.as_deref(), &over)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic pairs (`shape = composite` for random composites).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Register one pair, given as files or generated from the configured shape.
    Register {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires = "target")]
        source: Option<PathBuf>,
        #[arg(long, requires = "source")]
        target: Option<PathBuf>,
        /// Ground-truth pose file (4×4, row-major) mapping source onto target.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Evaluate a set of pairs from a directory or generated synthetically.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Directory of pair directories as written by `synth`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Train a small model on synthetic pairs.
    Train {
        #[command(flatten)]
        common: Common,
        /// Start from these weights instead of a fresh initialization.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Load a weights file, list its tensors and evaluate it on synthetic pairs.
    EvalWeights {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
}

fn synth_pairs(cfg: &RunConfig, count: usize) -> Result<Vec<SynthPair>> {
    if cfg.shape == "composite" {
        return composite_pairs(count, &cfg.synth);
    }
    let shape = Shape::by_name(&cfg.shape)?;
    (0..count)
        .map(|k| {
            let mut s = cfg.synth.clone();
            s.seed = s.seed.wrapping_add(k as u64);
            make_shape_pair(&shape, &s)
        })
        .collect()
}

fn save_cloud(pc: &PointCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_xyz(pc, &mut w)?;
    w.flush()?;
    Ok(())
}

fn write_pair(p: &SynthPair, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_cloud(&p.source, &dir.join("source.xyz"))?;
    save_cloud(&p.target, &dir.join("target.xyz"))?;
    save_cloud(&p.clean_source, &dir.join("clean_source.xyz"))?;
    save_cloud(&p.clean_target, &dir.join("clean_target.xyz"))?;
    fs::write(dir.join("gt_pose.txt"), format_pose(&p.transform))?;
    Ok(())
}

fn find_cloud(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["xyz", "ply", "txt"]
        .iter()
        .map(|e| dir.join(format!("{stem}.{e}")))
        .find(|p| p.is_file())
}

fn read_pair(dir: &Path) -> Result<PairInput> {
    let need = |stem: &str| {
        find_cloud(dir, stem)
            .ok_or_else(|| Error::Data(format!("{}: no {stem}.xyz or {stem}.ply", dir.display())))
    };
    let gt = dir.join("gt_pose.txt");
    let clean = match (find_cloud(dir, "clean_source"), find_cloud(dir, "clean_target")) {
        (Some(a), Some(b)) => Some((read_cloud(a)?, read_cloud(b)?)),
        _ => None,
    };
    Ok(PairInput {
        source: read_cloud(need("source")?)?,
        target: read_cloud(need("target")?)?,
        ground_truth: if gt.is_file() { Some(parse_pose(&fs::read_to_string(gt)?)?) } else { None },
        clean,
    })
}

fn load_or_init(weights: Option<&Path>, cfg: &RunConfig) -> Result<ParamStore> {
    match weights {
        Some(p) => ParamStore::load(p),
        None => {
            let w = cfg.pipeline.model.descriptor.width();
            init_params(&cfg.pipeline.model, (w, w), cfg.pipeline.seed)
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn bench(cfg: &RunConfig, params: &ParamStore, inputs: &[PairInput], threads: usize, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let n = inputs.len();
    let results = run_set(params, &cfg.pipeline, inputs, threads, |k, r| {
        let dir = out.join(format!("pair_{k:04}"));
        match r {
            Ok(o) => {
                if let Err(e) = write_artifacts(o, &dir) {
                    eprintln!("pair {k}: could not write artifacts: {e}");
                }
                eprintln!(
                    "pair {k}/{n}: ir {:.3} rre {:.2} rte {:.3}",
                    o.metrics.ir.unwrap_or(f64::NAN),
                    o.metrics.rre_deg.unwrap_or(f64::NAN),
                    o.metrics.rte.unwrap_or(f64::NAN),
                );
            }
            Err(e) => eprintln!("pair {k}/{n}: {e}"),
        }
    });
    let summary = summarize(&results);
    write_json(&out.join("results.json"), &results)?;
    write_json(&out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = common.resolve()?;
            for (k, p) in synth_pairs(&cfg, cfg.pairs)?.iter().enumerate() {
                write_pair(p, &common.out_dir.join(format!("pair_{k:04}")))?;
            }
            fs::write(common.out_dir.join("config.txt"), cfg.to_text())?;
            println!("wrote {} pairs to {}", cfg.pairs, common.out_dir.display());
        }
        Command::Register {
            common,
            source,
            target,
            gt,
            weights,
        } => {
            let cfg = common.resolve()?;
            let input = match (source, target) {
                (Some(s), Some(t)) => PairInput {
                    source: read_cloud(s)?,
                    target: read_cloud(t)?,
                    ground_truth: gt.map(|g| fs::read_to_string(g).map_err(Error::from).and_then(|s| parse_pose(&s))).transpose()?,
                    clean: None,
                },
                _ => PairInput::from(&synth_pairs(&cfg, 1)?[0]),
            };
            let params = load_or_init(weights.as_deref(), &cfg)?;
            let out = register_pair(&params, &cfg.pipeline, &input)?;
            write_artifacts(&out, &common.out_dir)?;
            println!("{}", serde_json::to_string_pretty(&out.metrics)?);
        }
        Command::Bench {
            common,
            data,
            weights,
            threads,
        } => {
            let cfg = common.resolve()?;
            let inputs = match data {
                Some(dir) => {
                    let mut dirs: Vec<PathBuf> = fs::read_dir(&dir)?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.is_dir())
                        .collect();
                    dirs.sort();
                    dirs.iter().map(|d| read_pair(d)).collect::<Result<Vec<_>>>()?
                }
                None => synth_pairs(&cfg, cfg.pairs)?.iter().map(PairInput::from).collect(),
            };
            let params = load_or_init(weights.as_deref(), &cfg)?;
            bench(&cfg, &params, &inputs, threads, &common.out_dir)?;
        }
        Command::Train { common, weights } => {
            let cfg = common.resolve()?;
            let model = &cfg.pipeline.model;
            let mut params = load_or_init(weights.as_deref(), &cfg)?;
            let samples = synth_pairs(&cfg, cfg.pairs)?
                .iter()
                .map(|p| {
                    Ok(TrainSample::new(
                        Prepared::builtin(&p.source, model)?,
                        Prepared::builtin(&p.target, model)?,
                        p.transform,
                        &cfg.train.loss,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            fs::create_dir_all(&common.out_dir)?;
            let mut log = BufWriter::new(File::create(common.out_dir.join("train_log.jsonl"))?);
            let mut io_err = None;
            train(&samples, &mut params, model, &cfg.train, |s| {
                if let Err(e) = writeln!(log, "{}", s.to_json()) {
                    io_err.get_or_insert(e);
                }
                if s.step % 50 == 0 {
                    eprintln!("step {} loss {:.4}", s.step, s.total());
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            log.flush()?;
            params.save(common.out_dir.join("weights.bin"))?;
            fs::write(common.out_dir.join("config.txt"), cfg.to_text())?;
            println!("wrote {}", common.out_dir.join("weights.bin").display());
        }
        Command::EvalWeights {
            common,
            weights,
            threads,
        } => {
            let cfg = common.resolve()?;
            let params = ParamStore::load(&weights)?;
            for (name, t) in params.iter() {
                println!("{name}: {}×{}", t.rows(), t.cols());
            }
            println!("{} tensors, {} scalars", params.len(), params.scalar_count());
            let inputs: Vec<PairInput> = synth_pairs(&cfg, cfg.pairs)?.iter().map(PairInput::from).collect();
            bench(&cfg, &params, &inputs, threads, &common.out_dir)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
