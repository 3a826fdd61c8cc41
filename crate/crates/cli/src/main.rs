//! `smn`: generate synthetic scenes, train the detector and its spatial
//! memory, evaluate, compare methods, and inspect what the memory does.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use smn_core::checkpoint;
use smn_core::config::{Emission, ProposalMode, RunConfig};
use smn_core::dataset;
use smn_core::error::Error;
use smn_core::eval::EvalResult;
use smn_core::methods::{self, MethodSpec, Protocol};
use smn_core::rng;
use smn_core::rollout;
use smn_core::scene;
use smn_core::trainer::{self, CheckpointSink};
use smn_core::weights::{BaseWeights, MlpWeights, NamedParams, SmnWeights};
use smn_core::Result;
use smn_tensor::io as tio;

#[derive(Parser)]
#[command(name = "smn", version, about = "sequential detection with a spatial memory")]
struct Cli {
    /// Path to a JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in profile when no config file is given (toy, paper-reference).
    #[arg(long, global = true, default_value = "toy")]
    profile: String,
    /// Master seed; overrides train.seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Dotted-path config overrides, e.g. --set train.base_steps=500.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Baseline,
    Mlp,
    Smn,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Smn,
    Mlp,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset file plus JSONL annotations.
    GenData {
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Output file stem inside --out.
        #[arg(long, default_value = "dataset")]
        name: String,
    },
    /// Train the plain two-stage detector.
    TrainBase {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the memory stage (or the MLP ablation) on a frozen detector.
    TrainSmn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, value_enum, default_value = "smn")]
        ablation: AblationArg,
    },
    /// Evaluate one method (or a detections file) on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        smn: Option<PathBuf>,
        #[arg(long)]
        mlp: Option<PathBuf>,
        /// Pre-computed detections (JSONL); skips model inference.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "baseline")]
        method: MethodArg,
        /// Per-image detection cap.
        #[arg(long, default_value_t = 10)]
        cap: usize,
    },
    /// Side-by-side evaluation of baseline, MLP, and memory network.
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        mlp: Option<PathBuf>,
        #[arg(long)]
        smn: Option<PathBuf>,
        /// Detection caps, comma separated.
        #[arg(long, default_value = "5,10")]
        caps: String,
        /// Also sweep emission mode and proposal mode.
        #[arg(long, default_value_t = false)]
        grid: bool,
    },
    /// Finite-difference verification of every op and composite path.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Per-iteration read-off of how the memory changes the predictions.
    Explain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        smn: PathBuf,
        /// Image index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Write the memory grid after every iteration as tensor files.
    DumpMemory {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        smn: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Render SVG charts from comparison results and training logs.
    Report {
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Checkpoint(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::Numerical(_) | Error::Tensor(_) => 4,
        _ => 1,
    }
}

/// SMN_THREADS caps the rayon pool; unset uses every core.
fn init_threads() {
    #[cfg(feature = "parallel")]
    if let Ok(v) = std::env::var("SMN_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::profile(&cli.profile)?,
    };
    for set in &cli.sets {
        cfg.apply_override(set)?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.ensure_executable()?;
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig, path: &Path) -> Result<Vec<scene::SceneRecord>> {
    let (records, stored_digest) = dataset::read_dataset(path)?;
    let current = smn_core::digest::config_digest(&cfg.scene);
    if stored_digest != current {
        return Err(Error::Config(format!(
            "dataset {} was generated under a different scene config (digest {} vs {})",
            path.display(),
            smn_core::digest::hex(&stored_digest)[..12].to_string(),
            smn_core::digest::hex(&current)[..12].to_string(),
        )));
    }
    Ok(records)
}

fn load_base(cfg: &RunConfig, path: &Path) -> Result<BaseWeights> {
    let map = checkpoint::load(path, checkpoint::base_digest(cfg))?;
    let (weights, _) = checkpoint::split_opt_state(map);
    let mut w = BaseWeights::init(&cfg.detector, cfg.class_count(), &cfg.train, &mut rng::stream(0));
    w.load_named(&weights)?;
    Ok(w)
}

fn load_smn(cfg: &RunConfig, path: &Path) -> Result<(SmnWeights, BTreeMap<String, smn_tensor::Tensor>)> {
    let map = checkpoint::load(path, checkpoint::smn_digest(cfg))?;
    let (weights, opt) = checkpoint::split_opt_state(map);
    let mut w = SmnWeights::init(&cfg.detector, &cfg.memory, &cfg.context, cfg.class_count(), &cfg.train, &mut rng::stream(0));
    w.load_named(&weights)?;
    Ok((w, opt))
}

fn load_mlp(cfg: &RunConfig, path: &Path) -> Result<MlpWeights> {
    let map = checkpoint::load(path, checkpoint::smn_digest(cfg))?;
    let (weights, _) = checkpoint::split_opt_state(map);
    let mut w = MlpWeights::init(&cfg.detector, &cfg.context, cfg.class_count(), &cfg.train, &mut rng::stream(0));
    w.load_named(&weights)?;
    Ok(w)
}

fn print_result(method: &str, protocol: &str, r: &EvalResult) {
    println!("{}", EvalResult::CSV_HEADER);
    println!("{}", r.csv_row(method, protocol));
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    std::fs::create_dir_all(&cli.out)?;
    match &cli.cmd {
        Cmd::GenData { count, name } => {
            let records = scene::generate_dataset(&cfg.scene, cfg.train.seed, *count)?;
            let bytes = dataset::encode_dataset(&cfg.scene, &records);
            let digest = smn_core::digest::hex(&smn_core::digest::sha256(&bytes));
            let path = cli.out.join(format!("{name}.smnd"));
            std::fs::write(&path, &bytes)?;
            dataset::write_annotations_jsonl(&cli.out.join(format!("{name}.jsonl")), &records)?;
            println!("wrote {} records to {}", records.len(), path.display());
            println!("dataset digest: {digest}");
        }
        Cmd::TrainBase { data } => {
            let records = load_dataset(&cfg, data)?;
            let mut r = rng::stream(cfg.train.seed);
            let sink = CheckpointSink {
                dir: cli.out.clone(),
                digest: checkpoint::base_digest(&cfg),
                prefix: "base".into(),
                every: cfg.train.checkpoint_every,
            };
            let (mut weights, log) = trainer::train_base(&cfg, &records, &mut r, Some(&sink))?;
            let path = cli.out.join("base.smnc");
            checkpoint::save(&path, checkpoint::base_digest(&cfg), &weights.named())?;
            trainer::write_log_csv(&cli.out.join("train_base.csv"), &log)?;
            let last = log.last().map(|r| r.total).unwrap_or(f64::NAN);
            println!("trained {} steps (final loss {last:.4}); checkpoint at {}", log.len(), path.display());
        }
        Cmd::TrainSmn { data, base, ablation } => {
            let records = load_dataset(&cfg, data)?;
            let mut base_w = load_base(&cfg, base)?;
            let mut r = rng::stream(cfg.train.seed.wrapping_add(1));
            match ablation {
                AblationArg::Smn => {
                    let sink = CheckpointSink {
                        dir: cli.out.clone(),
                        digest: checkpoint::smn_digest(&cfg),
                        prefix: "smn".into(),
                        every: cfg.train.checkpoint_every,
                    };
                    let schedule = if cfg.train.curriculum.is_empty() {
                        vec![(cfg.train.unroll, cfg.train.smn_steps)]
                    } else {
                        cfg.train.curriculum.clone()
                    };
                    let before = base_w.checksum();
                    let (mut smn, log) =
                        trainer::curriculum_train(&cfg, &records, &mut base_w, &schedule, &mut r, Some(&sink))?;
                    assert_eq!(base_w.checksum(), before, "base weights must stay frozen");
                    let path = cli.out.join("smn.smnc");
                    checkpoint::save(&path, checkpoint::smn_digest(&cfg), &smn.named())?;
                    trainer::write_log_csv(&cli.out.join("train_smn.csv"), &log)?;
                    println!("trained {} steps; checkpoint at {}", log.len(), path.display());
                }
                AblationArg::Mlp => {
                    let (mut mlp, log) =
                        trainer::train_mlp(&cfg, &records, &base_w, cfg.train.smn_steps, &mut r)?;
                    let path = cli.out.join("mlp.smnc");
                    checkpoint::save(&path, checkpoint::smn_digest(&cfg), &mlp.named())?;
                    trainer::write_log_csv(&cli.out.join("train_mlp.csv"), &log)?;
                    println!("trained {} steps; checkpoint at {}", log.len(), path.display());
                }
            }
        }
        Cmd::Eval { data, base, smn, mlp, detections, method, cap } => {
            let records = load_dataset(&cfg, data)?;
            let gts: Vec<_> = records.iter().map(|r| r.instances.clone()).collect();
            let mut eval_cfg = cfg.eval.clone();
            eval_cfg.max_dets = if *cap > 1 { vec![1, *cap] } else { vec![1] };
            let result = if let Some(det_path) = detections {
                let dets = dataset::read_detections_jsonl(det_path, records.len())?;
                smn_core::eval::evaluate(&dets, &gts, &eval_cfg, cfg.class_count())?
            } else {
                let base_path = base.as_ref().ok_or_else(|| {
                    Error::MissingArtifact("--base checkpoint (or --detections) is required".into())
                })?;
                let base_w = load_base(&cfg, base_path)?;
                let protocol = Protocol::standard(&cfg, *cap);
                let spec = match method {
                    MethodArg::Baseline => MethodSpec::Baseline { base: &base_w },
                    MethodArg::Mlp => {
                        let p = mlp.as_ref().ok_or_else(|| Error::MissingArtifact("--mlp checkpoint".into()))?;
                        let mlp_w = Box::leak(Box::new(load_mlp(&cfg, p)?));
                        MethodSpec::Mlp { base: &base_w, mlp: mlp_w }
                    }
                    MethodArg::Smn => {
                        let p = smn.as_ref().ok_or_else(|| Error::MissingArtifact("--smn checkpoint".into()))?;
                        let smn_w = Box::leak(Box::new(load_smn(&cfg, p)?.0));
                        MethodSpec::Smn { base: &base_w, smn: smn_w }
                    }
                };
                methods::evaluate_protocol(&cfg, spec, &protocol, &records)?
            };
            print_result("eval", &format!("n{cap}"), &result);
            std::fs::write(
                cli.out.join("results.csv"),
                format!("{}\n{}\n", EvalResult::CSV_HEADER, result.csv_row("eval", &format!("n{cap}"))),
            )?;
        }
        Cmd::Compare { data, base, mlp, smn, caps, grid } => {
            let records = load_dataset(&cfg, data)?;
            let base_w = load_base(&cfg, base)?;
            let mlp_w = match mlp {
                Some(p) => Some(load_mlp(&cfg, p)?),
                None => None,
            };
            let smn_w = match smn {
                Some(p) => Some(load_smn(&cfg, p)?.0),
                None => None,
            };
            let mut method_list: Vec<(String, MethodSpec)> =
                vec![("baseline".into(), MethodSpec::Baseline { base: &base_w })];
            if let Some(m) = &mlp_w {
                method_list.push(("mlp".into(), MethodSpec::Mlp { base: &base_w, mlp: m }));
            }
            if let Some(s) = &smn_w {
                method_list.push(("smn".into(), MethodSpec::Smn { base: &base_w, smn: s }));
            }
            let cap_list: Vec<usize> = caps
                .split(',')
                .map(|c| c.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad cap '{c}'"))))
                .collect::<Result<_>>()?;
            let mut protocols = Vec::new();
            for &cap in &cap_list {
                if *grid {
                    for emission in [Emission::Softmax, Emission::Hardmax] {
                        for pm in [ProposalMode::TopKPrime, ProposalMode::NmsTopK] {
                            let mut p = Protocol::standard(&cfg, cap);
                            p.emission = emission;
                            p.proposal_mode = pm;
                            p.name = format!(
                                "n{cap}-{}-{}",
                                match emission {
                                    Emission::Softmax => "soft",
                                    Emission::Hardmax => "hard",
                                },
                                match pm {
                                    ProposalMode::TopKPrime => "topk",
                                    ProposalMode::NmsTopK => "nms",
                                }
                            );
                            protocols.push(p);
                        }
                    }
                } else {
                    protocols.push(Protocol::standard(&cfg, cap));
                }
            }
            let rows = methods::compare(&cfg, &method_list, &protocols, &records)?;
            let csv = methods::compare_csv(&rows);
            print!("{csv}");
            std::fs::write(cli.out.join("comparison.csv"), &csv)?;
            write_comparison_chart(&cli.out.join("comparison.svg"), &rows)?;
            println!("wrote {}", cli.out.join("comparison.csv").display());
        }
        Cmd::Gradcheck { seeds } => {
            let entries = smn_core::gradsuite::run_suite(*seeds)?;
            let tol = smn_core::gradsuite::TOLERANCE;
            let mut worst: f64 = 0.0;
            println!("{:<28} {:>14}  status", "op", "max rel err");
            for e in &entries {
                let ok = e.max_rel_err < tol;
                println!(
                    "{:<28} {:>14.3e}  {}",
                    e.name,
                    e.max_rel_err,
                    if ok { "ok" } else { "FAIL" }
                );
                worst = worst.max(e.max_rel_err);
            }
            if worst >= tol {
                return Err(Error::Numerical(format!(
                    "gradient check failed: max relative error {worst:.3e} >= {tol:.0e}"
                )));
            }
            println!("all {} checks below {tol:.0e} ({seeds} seeds)", entries.len());
        }
        Cmd::Explain { data, base, smn, index } => {
            let records = load_dataset(&cfg, data)?;
            let rec = records.get(*index).ok_or_else(|| {
                Error::Config(format!("index {index} out of range ({} records)", records.len()))
            })?;
            let base_w = load_base(&cfg, base)?;
            let (smn_w, _) = load_smn(&cfg, smn)?;
            let trace = rollout::detect_sequence(&cfg, &base_w, &smn_w, &rec.image, &cfg.rollout)?;
            println!("image {index} (seed {}): {} iterations", rec.seed, trace.iterations.len());
            let class_names: Vec<&str> = cfg.scene.classes.iter().map(|c| c.name.as_str()).collect();
            for it in &trace.iterations {
                let best = it
                    .scores
                    .iter()
                    .enumerate()
                    .skip(1)
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                let name = if best == 0 { "background" } else { class_names[best - 1] };
                let delta = if it.base_logits.is_empty() {
                    "memory off".to_string()
                } else {
                    format!(
                        "base logit {:+.3} -> fused {:+.3} (memory {:+.3})",
                        it.base_logits[best], it.fused_logits[best], it.memory_logits[best]
                    )
                };
                println!(
                    "  iter {:>2}: box [{:5.1} {:5.1} {:5.1} {:5.1}] {:<10} p={:.3}  {}  emitted {}",
                    it.iteration,
                    it.selected_box.x1,
                    it.selected_box.y1,
                    it.selected_box.x2,
                    it.selected_box.y2,
                    name,
                    it.scores[best],
                    delta,
                    it.emitted.len(),
                );
            }
            let trace_path = cli.out.join(format!("trace_{index}.jsonl"));
            let mut f = std::fs::File::create(&trace_path)?;
            trace.write_jsonl(&mut f)?;
            println!("trace written to {}", trace_path.display());
        }
        Cmd::DumpMemory { data, base, smn, index } => {
            let records = load_dataset(&cfg, data)?;
            let rec = records.get(*index).ok_or_else(|| {
                Error::Config(format!("index {index} out of range ({} records)", records.len()))
            })?;
            let base_w = load_base(&cfg, base)?;
            let (smn_w, _) = load_smn(&cfg, smn)?;
            let trace = rollout::detect_sequence(&cfg, &base_w, &smn_w, &rec.image, &cfg.rollout)?;
            let grids = rollout::replay_memory_grids(&cfg, &base_w, &smn_w, &rec.image, &trace)?;
            for (i, (grid, digest)) in grids.iter().enumerate() {
                let path = cli.out.join(format!("memory_{index}_iter{i:02}.smnt"));
                tio::write_tensor_file(&path, grid, tio::Dtype::F64)?;
                println!("iter {i:>2}: digest {digest} -> {}", path.display());
            }
            if grids.is_empty() {
                println!("no iterations ran; nothing to dump");
            }
        }
        Cmd::Report { results, log } => {
            let mut wrote = false;
            if let Some(results) = results {
                if !results.exists() {
                    return Err(Error::MissingArtifact(format!("results file {}", results.display())));
                }
                let text = std::fs::read_to_string(results)?;
                let chart = report_from_csv(&text)?;
                let path = cli.out.join("report_metrics.svg");
                std::fs::write(&path, chart)?;
                println!("wrote {}", path.display());
                wrote = true;
            }
            if let Some(log) = log {
                if !log.exists() {
                    return Err(Error::MissingArtifact(format!("log file {}", log.display())));
                }
                let text = std::fs::read_to_string(log)?;
                let chart = loss_chart_from_csv(&text)?;
                let path = cli.out.join("report_loss.svg");
                std::fs::write(&path, chart)?;
                println!("wrote {}", path.display());
                wrote = true;
            }
            if !wrote {
                return Err(Error::Config("report needs --results and/or --log".into()));
            }
        }
    }
    Ok(())
}

fn write_comparison_chart(path: &Path, rows: &[methods::CompareRow]) -> Result<()> {
    let labels: Vec<String> = vec!["AP".into(), "AP-.5".into(), "AR-10".into()];
    let series: Vec<(String, Vec<f64>)> = rows
        .iter()
        .map(|r| {
            (
                format!("{}/{}", r.method, r.protocol),
                vec![r.result.ap, r.result.ap50, r.result.ar10],
            )
        })
        .collect();
    std::fs::write(path, smn_core::plot::bar_chart("method comparison", &labels, &series))?;
    Ok(())
}

fn report_from_csv(text: &str) -> Result<String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Config("empty results csv".into()))?
        .split(',')
        .collect();
    let metric_cols: Vec<usize> = (2..header.len()).collect();
    let labels: Vec<String> = metric_cols.iter().map(|&i| header[i].to_string()).collect();
    let mut series = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(Error::Config(format!("bad results row: {line}")));
        }
        let values: Vec<f64> = metric_cols
            .iter()
            .map(|&i| cells[i].parse::<f64>().unwrap_or(0.0))
            .collect();
        series.push((format!("{}/{}", cells[0], cells[1]), values));
    }
    Ok(smn_core::plot::bar_chart("detection metrics", &labels, &series))
}

fn loss_chart_from_csv(text: &str) -> Result<String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Config("empty log csv".into()))?
        .split(',')
        .collect();
    let step_col = header.iter().position(|&h| h == "step").unwrap_or(0);
    let total_col = header
        .iter()
        .position(|&h| h == "total")
        .ok_or_else(|| Error::Config("log csv has no 'total' column".into()))?;
    let mut points = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let step: f64 = cells.get(step_col).and_then(|c| c.parse().ok()).unwrap_or(0.0);
        let total: f64 = cells.get(total_col).and_then(|c| c.parse().ok()).unwrap_or(0.0);
        points.push((step, total));
    }
    Ok(smn_core::plot::line_chart("training loss", &[("total".to_string(), points)]))
}
