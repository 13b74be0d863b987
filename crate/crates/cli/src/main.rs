//! `bird`: synthesize data, train, run inference, evaluate and benchmark.
//!
//! A run directory holds `config.txt`, `loss.log`, `ckpt.bin`, `preds.txt`,
//! `metrics.txt` and `pr.png`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bird::checkpoint::Checkpoint;
use bird::config::{ModelConfig, RunConfig};
use bird::detection::{read_predictions, write_predictions, FramePredictions};
use bird::eval::{bench_table, benchmark, evaluate, join_predictions, write_pr_png, GroundTruthSet, IOU_THRESH};
use bird::propagation::{InferMode, Model};
use bird::synthdata::{generate_dataset, read_dataset, write_dataset, DatasetSpec};
use bird::train::{format_loss_log, train, TrainOptions, TrainSequence};
use bird::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bird", version, about = "Bidirectional propagation detector for moving infrared small targets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and write config, loss log and checkpoint into a run directory.
    Train(TrainArgs),
    /// Run a trained model over a dataset and write `preds.txt`.
    Infer(InferArgs),
    /// Score a prediction file against a dataset's annotations.
    Eval(EvalArgs),
    /// Time recursive against sliding-window inference.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    seqs: usize,
    #[arg(long, default_value_t = 40, value_parser = positive)]
    len: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    targets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dim events per sequence.
    #[arg(long, default_value_t = 0)]
    dim_events: usize,
    #[arg(long, default_value_t = 3)]
    dim_span: usize,
    /// Contrast multiplier inside a dim event.
    #[arg(long, default_value_t = 0.0)]
    dim_multiplier: f64,
    /// Largest initial speed in pixels per frame.
    #[arg(long)]
    max_speed: Option<f64>,
}

#[derive(Args)]
struct ModelFlags {
    /// Start from a `key=value` config file (for example a previous run's `config.txt`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the reduced desk-scale widths.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    no_bp: bool,
    #[arg(long)]
    no_fp: bool,
    #[arg(long)]
    no_ltmf: bool,
    #[arg(long)]
    no_gtmf: bool,
    #[arg(long)]
    no_stf: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    run: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print a progress line every this many steps (0 disables).
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Recursive,
    Sliding,
}

impl From<Mode> for InferMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Recursive => InferMode::Recursive,
            Mode::Sliding => InferMode::Sliding,
        }
    }
}

#[derive(Args)]
struct InferArgs {
    /// Run directory with `config.txt` and `ckpt.bin`; `preds.txt` is written here.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    n_infer: Option<usize>,
    #[arg(long, value_enum, default_value_t = Mode::Recursive)]
    mode: Mode,
    #[arg(long)]
    score_thresh: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    preds: PathBuf,
    /// Dataset whose annotations are the ground truth.
    #[arg(long)]
    data: PathBuf,
    /// Directory for `metrics.txt` and `pr.png`.
    #[arg(long)]
    out: PathBuf,
    /// Score threshold for precision, recall and F1.
    #[arg(long, default_value_t = 0.05)]
    score_thresh: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sequence index in the dataset.
    #[arg(long, default_value_t = 0)]
    seq: usize,
    /// Inference mode; repeat together with `--frames` for a side-by-side table.
    #[arg(long, value_enum, required = true)]
    mode: Vec<Mode>,
    /// Clip length for each `--mode`.
    #[arg(long, required = true)]
    frames: Vec<usize>,
}

fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn run_config(flags: &ModelFlags) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if flags.desk {
        cfg.model = ModelConfig::desk();
    }
    let a = &mut cfg.ablation;
    a.backward_prop &= !flags.no_bp;
    a.forward_prop &= !flags.no_fp;
    a.ltmf &= !flags.no_ltmf;
    a.gtmf &= !flags.no_gtmf;
    a.stf &= !flags.no_stf;
    Ok(cfg)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = DatasetSpec {
        sequences: a.seqs,
        length: a.len,
        size: a.size,
        targets: a.targets,
        dim_events: a.dim_events,
        dim_span: a.dim_span,
        dim_multiplier: a.dim_multiplier,
        seed: a.seed,
        ..DatasetSpec::default()
    };
    if let Some(v) = a.max_speed {
        spec.max_speed = v;
    }
    let seqs = generate_dataset(&spec)?;
    write_dataset(&a.out, &seqs)?;
    println!("wrote {} sequences of {} frames to {}", seqs.len(), spec.length, a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = run_config(&a.model)?;
    if let Some(d) = a.data {
        cfg.data = d;
    }
    if let Some(r) = a.run {
        cfg.run_dir = r;
    }
    if let Some(v) = a.steps {
        cfg.steps = Some(v);
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.n_train {
        cfg.n_train = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.apply_env()?;
    cfg.validate()?;
    let seqs = read_dataset(&cfg.data)?;
    let data: Vec<TrainSequence> = seqs.iter().map(TrainSequence::from).collect();
    create_dir(&cfg.run_dir)?;
    cfg.save(&cfg.run_dir.join("config.txt"))?;
    let opts = TrainOptions::from_run(&cfg, &data);
    let mut model = Model::new(cfg.model, cfg.ablation, cfg.seed)?;
    eprintln!(
        "training {} parameters for {} steps on {} sequences",
        model.params.num_scalars(),
        opts.steps,
        data.len()
    );
    let every = a.log_every;
    let log = train(&mut model, &data, &opts, |e| {
        if every > 0 && (e.step % every == 0 || e.step + 1 == opts.steps) {
            eprintln!(
                "step {:>6}  loss {:.4}  detection {:.4}  stf {:.4}",
                e.step, e.total, e.detection, e.stf
            );
        }
    })?;
    write(&cfg.run_dir.join("loss.log"), &format_loss_log(&log))?;
    Checkpoint::from_model(&model, cfg.n_train).save(&cfg.run_dir.join("ckpt.bin"))?;
    println!("run written to {}", cfg.run_dir.display());
    Ok(())
}

fn load_run(run: &Path) -> Result<(RunConfig, Model)> {
    let cfg = RunConfig::load(&run.join("config.txt"))?;
    let model = Checkpoint::load(&run.join("ckpt.bin"))?.into_model()?;
    Ok((cfg, model))
}

fn infer(a: InferArgs) -> Result<()> {
    let (mut cfg, model) = load_run(&a.run)?;
    if let Some(d) = a.data {
        cfg.data = d;
    }
    if let Some(n) = a.n_infer {
        cfg.n_infer = n;
    }
    if let Some(t) = a.score_thresh {
        cfg.score_thresh = t;
    }
    cfg.validate()?;
    let seqs = read_dataset(&cfg.data)?;
    let mut out = Vec::new();
    for s in &seqs {
        let dets = model.infer_sequence(&s.frames, cfg.n_infer, a.mode.into(), cfg.score_thresh, cfg.nms_iou)?;
        out.extend(dets.iter().enumerate().map(|(f, d)| FramePredictions::new(&s.id, f, d)));
    }
    let path = a.run.join("preds.txt");
    write_predictions(&path, &out)?;
    println!("{} frames of predictions written to {}", out.len(), path.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let preds = read_predictions(&a.preds)?;
    let mut gt = GroundTruthSet::new();
    for s in read_dataset(&a.data)? {
        for f in 0..s.frames.len() {
            gt.insert((s.id.clone(), f), s.boxes(f));
        }
    }
    let frames = join_predictions(&preds, &gt)?;
    let report = evaluate(&frames, a.score_thresh, IOU_THRESH)?;
    create_dir(&a.out)?;
    write(&a.out.join("metrics.txt"), &report.to_text())?;
    write_pr_png(&a.out.join("pr.png"), &report.pr_points)?;
    print!("{}", report.to_text());
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    if a.mode.len() != a.frames.len() {
        return Err(Error::config("give one --frames value per --mode"));
    }
    let (cfg, model) = load_run(&a.run)?;
    let data = a.data.unwrap_or(cfg.data);
    let seqs = read_dataset(&data)?;
    let seq = seqs
        .get(a.seq)
        .ok_or_else(|| Error::input(format!("dataset has {} sequences, asked for {}", seqs.len(), a.seq)))?;
    let results = a
        .mode
        .iter()
        .zip(&a.frames)
        .map(|(&m, &n)| benchmark(&model, &seq.frames, m.into(), n))
        .collect::<Result<Vec<_>>>()?;
    print!("{}", bench_table(&results));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
