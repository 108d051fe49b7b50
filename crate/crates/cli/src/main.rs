use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use sctn::ablation::{ablate, AblationConfig};
use sctn::config::{load_config_file, RunConfig, SynthSet};
use sctn::container::{load_checkpoint, restore_split, save_checkpoint, segment_cache, Container};
use sctn::data::{
    build_samples, parse_trajectory_csv, synthesize_mixed, synthesize_scenes, DatasetSplit, SegmentSample,
    SynthOptions,
};
use sctn::metrics::{evaluate, predict_denormalized};
use sctn::model::{Model, ModelConfig, Profile};
use sctn::numcore::GradCheckOptions;
use sctn::train::{loss_gradient_check, loss_trace_csv, run_log_jsonl, train, TrainConfig};
use sctn::{Error, ErrorKind, Result};

/// Largest relative gradient error `gradcheck` accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "sctn", version, about = "Spatial-channel transformer for vehicle trajectory prediction")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Model size profile: desk or paper.
    #[arg(long, global = true)]
    profile: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    out: PathBuf,
    /// Agent channels per scene, target included.
    #[arg(long, global = true, value_name = "N")]
    neighbors: Option<usize>,
    /// Squeeze-and-excitation block: on or off.
    #[arg(long, global = true)]
    se: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    /// Coordinate units of trajectory CSV input: feet or meters.
    #[arg(long, global = true)]
    units: Option<String>,
    /// Any configuration key, e.g. `--set lr=0.001`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert a trajectory CSV into a split segment cache.
    Prepare {
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
    },
    /// Generate a synthetic segment cache.
    Synth,
    /// Train a model and write a checkpoint.
    Train {
        /// Segment cache (.sctn) or trajectory CSV.
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
    },
    /// Report ADE/FDE/RMSE per horizon on one split.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Dump observed, ground-truth and predicted tracks of one segment.
    Predict {
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "INDEX")]
        segment: usize,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Neighbor-count by SE ablation grid (synthetic data unless --data is given).
    Ablate {
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of the full model loss gradient.
    Gradcheck {
        /// Coordinates sampled per weight tensor.
        #[arg(long, default_value_t = 4)]
        coords: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            })
        }
    }
}

fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let file = match &g.config {
        Some(p) => load_config_file(p)?,
        None => Vec::new(),
    };
    let mut flags = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            flags.push((k.to_string(), v));
        }
    };
    push("seed", g.seed.map(|s| s.to_string()));
    push("neighbors", g.neighbors.map(|n| n.to_string()));
    push("se", g.se.clone());
    push("epochs", g.epochs.map(|n| n.to_string()));
    push("batch", g.batch.map(|n| n.to_string()));
    push("units", g.units.clone());
    for o in &g.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        flags.push((k.trim().to_string(), v.trim().to_string()));
    }
    let profile = g.profile.as_deref().map(str::parse::<Profile>).transpose()?;
    RunConfig::resolve(&file, &flags, profile)
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = resolve_config(&cli.global)?;
    let out = cli.global.out.as_path();
    match cli.command {
        Command::Prepare { data } => {
            let split = split_from_csv(&data, &cfg)?;
            write_cache(out, &cfg, &split)?;
        }
        Command::Synth => {
            let samples = synthesize(&cfg, &cfg.synth)?;
            let split = DatasetSplit::new(samples, cfg.split, cfg.seed)?;
            write_cache(out, &cfg, &split)?;
        }
        Command::Train { data } => {
            let split = load_split(&data, &cfg)?;
            let split = fit_channels(split, cfg.model.agents)?;
            prepare_out(out, &cfg)?;
            let model = Model::<f32>::new(cfg.model.clone())?;
            eprintln!(
                "training {} parameters on {} segments ({} validation)",
                model.weights().num_params(),
                split.train.len(),
                split.val.len()
            );
            let outcome = train(model, &split.train, &split.val, &cfg.train)?;
            save_checkpoint(&out.join("checkpoint.sctn"), &outcome.best)?;
            fs::write(out.join("run_log.jsonl"), run_log_jsonl(&outcome.epochs))?;
            fs::write(out.join("loss_trace.csv"), loss_trace_csv(&outcome.step_losses))?;
            if let Some(last) = outcome.epochs.last() {
                println!(
                    "epochs={} final_train_loss={:.6} best_epoch={}",
                    outcome.epochs.len(),
                    last.train_loss,
                    outcome.best_epoch.map_or("none".into(), |e| e.to_string())
                );
            }
        }
        Command::Evaluate { data, checkpoint, split } => {
            let model = load_checkpoint(&checkpoint)?;
            cfg.model = model.config().clone();
            let samples = pick_split(fit_channels(load_split(&data, &cfg)?, cfg.model.agents)?, &split)?;
            prepare_out(out, &cfg)?;
            let report = evaluate(&model, &samples, cfg.rmse_mode)?;
            fs::write(out.join("report.csv"), report.to_csv())?;
            println!("{report}");
        }
        Command::Predict {
            data,
            checkpoint,
            segment,
            split,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            cfg.model = model.config().clone();
            let samples = pick_split(fit_channels(load_split(&data, &cfg)?, cfg.model.agents)?, &split)?;
            let sample = samples.get(segment).ok_or_else(|| {
                Error::Usage(format!("segment {segment} out of range; {split} split has {}", samples.len()))
            })?;
            prepare_out(out, &cfg)?;
            let dump = trajectory_dump(&model, sample, segment)?;
            fs::write(out.join("trajectories.csv"), dump)?;
            println!("wrote {}", out.join("trajectories.csv").display());
        }
        Command::Ablate { data } => run_ablation(out, &cfg, data.as_deref())?,
        Command::Gradcheck { coords } => {
            prepare_out(out, &cfg)?;
            return gradcheck(&cfg, coords);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn synthesize(cfg: &RunConfig, opts: &SynthOptions) -> Result<Vec<SegmentSample>> {
    match cfg.synth_set {
        SynthSet::Mixed => synthesize_mixed(cfg.synth_count, cfg.seed, opts),
        SynthSet::Kind(k) => synthesize_scenes(cfg.synth_count, k, cfg.seed, opts),
    }
}

fn split_from_csv(path: &Path, cfg: &RunConfig) -> Result<DatasetSplit> {
    let records = parse_trajectory_csv(path, cfg.units)?;
    let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
    let samples = build_samples(&records, &name, &cfg.pipeline)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("{} yields no complete segments", path.display())));
    }
    DatasetSplit::new(samples, cfg.split, cfg.seed)
}

/// Reads a segment cache (`.sctn`) or runs the CSV pipeline.
fn load_split(path: &Path, cfg: &RunConfig) -> Result<DatasetSplit> {
    if path.extension().is_some_and(|e| e == "sctn") {
        restore_split(&Container::load(path)?)
    } else {
        split_from_csv(path, cfg)
    }
}

fn fit_channels(split: DatasetSplit, n: usize) -> Result<DatasetSplit> {
    let fit = |v: Vec<SegmentSample>| -> Result<Vec<SegmentSample>> {
        v.into_iter()
            .map(|s| {
                Ok(SegmentSample {
                    scene: s.scene.with_channels(n)?,
                    source: s.source,
                })
            })
            .collect()
    };
    Ok(DatasetSplit {
        train: fit(split.train)?,
        val: fit(split.val)?,
        test: fit(split.test)?,
        seed: split.seed,
    })
}

fn pick_split(split: DatasetSplit, name: &str) -> Result<Vec<SegmentSample>> {
    match name {
        "train" => Ok(split.train),
        "val" => Ok(split.val),
        "test" => Ok(split.test),
        other => Err(Error::Usage(format!("--split must be train, val or test, got {other:?}"))),
    }
}

fn write_cache(out: &Path, cfg: &RunConfig, split: &DatasetSplit) -> Result<()> {
    prepare_out(out, cfg)?;
    segment_cache(split)?.save(&out.join("segments.sctn"))?;
    let mut manifest = String::from("split,index,file,vehicle_id,start_frame,real_agents\n");
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for (i, s) in part.iter().enumerate() {
            let _ = writeln!(
                manifest,
                "{name},{i},{},{},{},{}",
                s.source.file,
                s.source.vehicle_id,
                s.source.start_frame,
                s.scene.real_agents()
            );
        }
    }
    fs::write(out.join("manifest.txt"), manifest)?;
    println!(
        "segments: train={} val={} test={} -> {}",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        out.join("segments.sctn").display()
    );
    Ok(())
}

/// `segment_id,agent,role,t,x,y` rows for every real agent: observed frames,
/// then ground truth and prediction over the future frames.
fn trajectory_dump(model: &Model<f32>, sample: &SegmentSample, segment: usize) -> Result<String> {
    let cfg = model.config();
    let (pred, gt) = predict_denormalized(model, sample)?;
    let source = sample.scene.denormalized();
    let mut out = String::from("segment_id,agent,role,t,x,y\n");
    for agent in (0..source.agents()).filter(|&a| source.channel_mask()[a]) {
        for t in 0..cfg.obs_len {
            let [x, y] = source.point(agent, t);
            let _ = writeln!(out, "{segment},{agent},obs,{t},{x:.4},{y:.4}");
        }
        for (role, points) in [("gt", &gt), ("pred", &pred)] {
            for k in 0..cfg.pred_len {
                let p = &points.data()[(agent * cfg.pred_len + k) * 2..][..2];
                let _ = writeln!(out, "{segment},{agent},{role},{},{:.4},{:.4}", cfg.obs_len + k, p[0], p[1]);
            }
        }
    }
    Ok(out)
}

fn run_ablation(out: &Path, cfg: &RunConfig, data: Option<&Path>) -> Result<()> {
    let widest = cfg.ablation_neighbors.iter().copied().max().unwrap_or(cfg.model.agents);
    let split = match data {
        Some(p) if p.extension().is_some_and(|e| e == "sctn") => restore_split(&Container::load(p)?)?,
        Some(p) => {
            let mut wide = cfg.clone();
            wide.pipeline.agents = widest;
            split_from_csv(p, &wide)?
        }
        None => {
            let opts = SynthOptions {
                agents: widest,
                ..cfg.synth.clone()
            };
            DatasetSplit::new(synthesize(cfg, &opts)?, cfg.split, cfg.seed)?
        }
    };
    prepare_out(out, cfg)?;
    let mut ab = AblationConfig::new(
        cfg.model.clone(),
        TrainConfig {
            epochs: cfg.ablation_epochs,
            ..cfg.train.clone()
        },
    );
    ab.neighbors = cfg.ablation_neighbors.clone();
    ab.se = cfg.ablation_se.clone();
    ab.rmse_mode = cfg.rmse_mode;
    ab.budget = Some(Duration::from_secs_f64(cfg.ablation_budget_s));
    let report = ablate(&ab, &split)?;
    fs::write(out.join("ablation.csv"), report.to_csv())?;
    fs::write(out.join("ablation_deltas.csv"), report.deltas_csv())?;
    fs::write(out.join("ablation_errors.csv"), report.errors_csv())?;
    print!("{}", report.to_csv());
    println!("{}", report.reference_line());
    for c in &report.cells {
        if let Err(e) = &c.result {
            eprintln!("cell {} failed ({}): {}", c.label(), e.kind, e.message);
        }
    }
    Ok(())
}

fn gradcheck(cfg: &RunConfig, coords: usize) -> Result<ExitCode> {
    let model = Model::<f64>::new(ModelConfig {
        dropout: 0.0,
        ..cfg.model.clone()
    })?;
    let opts = SynthOptions {
        vehicles: cfg.synth.vehicles.min(cfg.model.agents),
        ..cfg.synth.clone()
    };
    let sample = synthesize_mixed(1, cfg.seed, &opts)?.remove(0);
    let report = loss_gradient_check(
        &model,
        &sample,
        &GradCheckOptions {
            step: 1e-5,
            max_coords_per_input: Some(coords.max(1)),
            seed: cfg.seed,
        },
    )?;
    println!(
        "max relative error {:.3e} over {} coordinates (tolerance {GRADCHECK_TOLERANCE:.0e})",
        report.max_rel_error, report.coords_checked
    );
    Ok(if report.max_rel_error < GRADCHECK_TOLERANCE {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(3)
    })
}
