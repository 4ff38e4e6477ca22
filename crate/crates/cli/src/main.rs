//! `criticvio`: synthesize data, train, evaluate, run inference and
//! benchmark iteration counts.
//!
//! Exit codes: 0 ok, 2 bad arguments or config, 3 I/O or malformed data,
//! 4 non-finite values during training, 5 incompatible checkpoint.

mod config;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use criticvio_core::checkpoint;
use criticvio_core::data::{
    covering_windows, list_sequences, load_sequence, make_windows, synth_dataset, write_kitti_poses, write_sequence,
    NormStats, SequenceData, SynthConfig,
};
use criticvio_core::losses::LossBreakdown;
use criticvio_core::model::Model;
use criticvio_core::policy::PolicyTrace;
use criticvio_core::training::{benchmark_iterations, evaluate, predict_sequence, EvalConfig, EvalReport, Trainer};
use criticvio_core::Error;

use config::{RunConfig, SEED_ENV};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn args(msg: String) -> Self {
        Self { code: 2, msg }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            code: 3,
            msg: format!("{}: {e}", path.display()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_)
            | Error::Parse { .. }
            | Error::BadRotation { .. }
            | Error::MissingInterval(_)
            | Error::UnsupportedChannels(_)
            | Error::Json(_) => 3,
            Error::NonFiniteActivation(_) | Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => 4,
            Error::Version(_) => 5,
            _ => 2,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "criticvio", version, about = "Critic-guided iterative-refinement visual-inertial odometry")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset (poses.txt, imu.csv, flow.bin, flow.json per sequence).
    Synth(SynthArgs),
    /// Train from a TOML run configuration.
    Train(TrainArgs),
    /// Monte-Carlo evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Predicted trajectories, policy traces and plot data.
    Infer(InferArgs),
    /// Metrics and runtime for several iteration counts.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    sequences: usize,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// IMU samples per frame interval.
    #[arg(long, default_value_t = 11)]
    imu_k: usize,
    #[arg(long)]
    noiseless: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct DataSel {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated sequence ids; all sequences under the root by default.
    #[arg(long, value_delimiter = ',')]
    sequences: Vec<String>,
    /// Noise seed; CRITICVIO_SEED overrides.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    sel: DataSel,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    /// Refinement iterations; the trained value by default.
    #[arg(long)]
    iterations: Option<usize>,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    sel: DataSel,
    #[arg(long)]
    iterations: Option<usize>,
    /// Output directory; one subdirectory per sequence.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    sel: DataSel,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    iterations: Vec<usize>,
    /// Timing runs per iteration count; the fastest is reported.
    #[arg(long, default_value_t = 3)]
    timing_repeats: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn seed_override(seed: u64) -> CliResult<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .parse()
            .map_err(|_| CliError::args(format!("{SEED_ENV}={s} is not an unsigned integer"))),
        Err(_) => Ok(seed),
    }
}

fn create_dir(p: &Path) -> CliResult {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::args(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    if a.sequences == 0 || a.frames < 2 || a.height == 0 || a.width == 0 || a.imu_k < 2 {
        return Err(CliError::args(
            "need --sequences >= 1, --frames >= 2, positive size and --imu-k >= 2".into(),
        ));
    }
    let mut cfg = SynthConfig {
        height: a.height,
        width: a.width,
        k: a.imu_k,
        ..SynthConfig::default()
    };
    if a.noiseless {
        cfg = cfg.noiseless();
    }
    let seqs = synth_dataset(seed_override(a.seed)?, a.sequences, a.frames, &cfg)?;
    create_dir(&a.out)?;
    for s in &seqs {
        write_sequence(&a.out, s)?;
    }
    println!("wrote {} sequences of {} frames to {}", seqs.len(), a.frames, a.out.display());
    Ok(())
}

fn load_all(root: &Path, ids: &[String], model: &Model) -> CliResult<Vec<SequenceData>> {
    ids.iter()
        .map(|id| load_sequence(root, id, model.cfg.imu_k, model.cfg.image).map_err(CliError::from))
        .collect()
}

const LOG_HEADER: &str = "step,l_g,l_pt,l_pr,l_critic_term,l_c,l_gp,w_mean";
const EPOCH_HEADER: &str = "epoch,l_g,l_pose,l_pt,l_pr,l_critic_term,l_c,l_gp,w_mean,val_pose_loss,lr_g,lr_c";

fn log_row(step: usize, b: &LossBreakdown) -> String {
    format!(
        "{step},{},{},{},{},{},{},{}",
        b.l_g, b.l_pt, b.l_pr, b.l_critic_term, b.l_c, b.l_gp, b.w_mean
    )
}

/// Opens a CSV log for appending, keeping only rows whose leading counter is
/// at most `keep` (earlier rows of a resumed run).
fn open_log(path: &Path, header: &str, keep: usize) -> CliResult<BufWriter<File>> {
    let mut rows = Vec::new();
    if keep > 0 && path.exists() {
        let f = File::open(path).map_err(|e| CliError::io(path, e))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| CliError::io(path, e))?;
            let n: usize = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
            if n <= keep {
                rows.push(line);
            }
        }
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?);
    let io = |e| CliError::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for r in rows {
        writeln!(w, "{r}").map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(w)
}

fn print_report(r: &EvalReport) {
    let fmt = |m: Option<criticvio_core::training::MeanStd>| match m {
        Some(m) => format!("{:.4} +- {:.4}", m.mean, m.std),
        None => "n/a".to_string(),
    };
    println!("t_rel  (%)        {}", fmt(r.t_rel));
    println!("r_rel  (deg/100m) {}", fmt(r.r_rel));
    println!("t_rmse (m)        {}", fmt(r.t_rmse));
    println!("r_rmse (deg)      {}", fmt(r.r_rmse));
    println!("iteration mse     {:?}", r.iteration_mse);
    println!("selected mse      {}", r.selected_mse);
    println!("selection counts  {:?}", r.selection_histogram);
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let cfg = RunConfig::from_file(&a.config)?;
    let mcfg = cfg.model_config()?;
    let (train_ids, eval_ids) = cfg.split()?;
    create_dir(&cfg.out_dir.join("checkpoints"))?;

    let mut trainer = match &a.resume {
        Some(p) => {
            let t = checkpoint::load_trainer(p)?;
            if t.model.cfg != mcfg || t.cfg != cfg.train {
                log::warn!("configuration differs from the checkpoint; continuing with the checkpoint's");
            }
            t
        }
        None => {
            let model = Model::new(&mcfg, cfg.train.seed)?;
            Trainer::new(model, cfg.train.clone(), NormStats::default())?
        }
    };
    let train = load_all(&cfg.data.root, &train_ids, &trainer.model)?;
    let eval = load_all(&cfg.data.root, &eval_ids, &trainer.model)?;
    if a.resume.is_none() {
        trainer.norm = NormStats::compute(&train);
    }
    let s = trainer.model.cfg.seq_len;
    let mut windows = Vec::new();
    for seq in &train {
        windows.extend(make_windows(seq, s, cfg.data.stride)?);
    }
    let mut val = Vec::new();
    for seq in &eval {
        val.extend(covering_windows(seq, s)?);
    }
    println!(
        "{} training windows, {} validation windows, {} generator / {} critic parameters",
        windows.len(),
        val.len(),
        trainer.model.generator.store.numel(),
        trainer.model.critic.store.numel()
    );

    let log_path = cfg.out_dir.join("train_log.csv");
    let epoch_path = cfg.out_dir.join("epoch_metrics.csv");
    let mut log = open_log(&log_path, LOG_HEADER, trainer.step)?;
    let mut epochs = open_log(&epoch_path, EPOCH_HEADER, trainer.epoch)?;
    let mut io_err = None;
    while trainer.epoch < trainer.cfg.epochs {
        let res = trainer.run_epoch(&windows, &val, &mut |step, b| {
            if let Err(e) = writeln!(log, "{}", log_row(step, b)) {
                io_err.get_or_insert(e);
            }
        });
        if let Some(e) = io_err.take() {
            return Err(CliError::io(&log_path, e));
        }
        let summary = match res {
            Ok(s) => s,
            Err(Error::NonFiniteLoss { step, breakdown }) => {
                let dump = cfg.out_dir.join("nonfinite.json");
                let _ = log.flush();
                write_json(&dump, &serde_json::json!({ "step": step, "breakdown": *breakdown }))?;
                eprintln!("non-finite loss at step {step}; diagnostics in {}", dump.display());
                return Err(CliError {
                    code: 4,
                    msg: "training aborted".into(),
                });
            }
            Err(e) => return Err(e.into()),
        };
        let b = summary.train;
        let val_s = summary.val_pose_loss.map(|v| v.to_string()).unwrap_or_default();
        let io = |e| CliError::io(&epoch_path, e);
        writeln!(
            epochs,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            summary.epoch, b.l_g, b.l_pose, b.l_pt, b.l_pr, b.l_critic_term, b.l_c, b.l_gp, b.w_mean, val_s, summary.lr_g,
            summary.lr_c
        )
        .map_err(io)?;
        epochs.flush().map_err(io)?;
        log.flush().map_err(|e| CliError::io(&log_path, e))?;
        let ck = cfg.out_dir.join("checkpoints").join(format!("epoch_{:04}.ckpt", summary.epoch));
        checkpoint::save(&ck, &trainer)?;
        let last = cfg.out_dir.join("last.ckpt");
        fs::copy(&ck, &last).map_err(|e| CliError::io(&last, e))?;
        println!(
            "epoch {:>3}  pose {:.5e}  l_c {:.4e}  val {}  lr {:.2e}",
            summary.epoch, b.l_pose, b.l_c, val_s, summary.lr_g
        );
    }

    if !eval.is_empty() {
        let ecfg = EvalConfig::new(cfg.eval_repeats, trainer.model.iterations(), trainer.cfg.seed);
        let report = evaluate(&trainer.model, &trainer.norm, &eval, &ecfg)?;
        print_report(&report);
        write_json(&cfg.out_dir.join("metrics.json"), &report)?;
    }
    Ok(())
}

fn load_for_eval(sel: &DataSel) -> CliResult<(Model, NormStats, Vec<SequenceData>, u64)> {
    let (model, norm, _) = checkpoint::load_model(&sel.checkpoint)?;
    if !sel.data.is_dir() {
        return Err(CliError::args(format!("data root {} is not a directory", sel.data.display())));
    }
    let ids = if sel.sequences.is_empty() {
        list_sequences(&sel.data)?
    } else {
        sel.sequences.clone()
    };
    if ids.is_empty() {
        return Err(CliError::args(format!("no sequences under {}", sel.data.display())));
    }
    let seqs = load_all(&sel.data, &ids, &model)?;
    Ok((model, norm, seqs, seed_override(sel.seed)?))
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let (model, norm, seqs, seed) = load_for_eval(&a.sel)?;
    let iters = a.iterations.unwrap_or(model.iterations());
    if a.repeats == 0 || iters == 0 {
        return Err(CliError::args("--repeats and --iterations must be >= 1".into()));
    }
    let report = evaluate(&model, &norm, &seqs, &EvalConfig::new(a.repeats, iters, seed))?;
    print_report(&report);
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    Ok(())
}

fn cmd_infer(a: InferArgs) -> CliResult {
    let (model, norm, seqs, seed) = load_for_eval(&a.sel)?;
    let iters = a.iterations.unwrap_or(model.iterations());
    if iters == 0 {
        return Err(CliError::args("--iterations must be >= 1".into()));
    }
    for seq in &seqs {
        let dir = a.out.join(&seq.id);
        create_dir(&dir)?;
        let (traj, raw) = predict_sequence(&model, &norm, seq, iters, seed)?;
        write_kitti_poses(&dir.join("poses.txt"), &traj)?;
        let trace = PolicyTrace::new(seq.id.clone(), (1..seq.frames()).collect(), raw);
        trace.write_csv(&dir.join("policy.csv"))?;
        let path = dir.join("path.csv");
        let io = |e| CliError::io(&path, e);
        let mut w = BufWriter::new(File::create(&path).map_err(io)?);
        writeln!(w, "frame,x,y,z,n_flow,n_imu_rot,n_imu_trans").map_err(io)?;
        for (k, n) in trace.normalized.iter().enumerate() {
            let t = traj.poses[k + 1].translation;
            writeln!(w, "{},{},{},{},{},{},{}", k + 1, t[0], t[1], t[2], n[0], n[1], n[2]).map_err(io)?;
        }
        w.flush().map_err(io)?;
        println!("{}: {} poses written to {}", seq.id, traj.len(), dir.display());
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CliResult {
    let (model, norm, seqs, seed) = load_for_eval(&a.sel)?;
    if a.iterations.is_empty() || a.iterations.contains(&0) {
        return Err(CliError::args("--iterations needs positive counts".into()));
    }
    let rows = benchmark_iterations(&model, &norm, &seqs, &a.iterations, seed, a.timing_repeats)?;
    println!("{:>5} {:>10} {:>9} {:>12} {:>12}", "I", "seconds", "relative", "final_mse", "selected_mse");
    for r in &rows {
        println!(
            "{:>5} {:>10.4} {:>9.4} {:>12.4e} {:>12.4e}",
            r.iterations,
            r.seconds,
            r.relative,
            r.report.iteration_mse.last().copied().unwrap_or(f64::NAN),
            r.report.selected_mse
        );
    }
    if let Some(p) = &a.out {
        write_json(p, &rows)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Bench(a) => cmd_bench(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
