//! Clip-sampling training loop with Adam on the joint clip objective.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::backbone::Frame;
use crate::config::RunConfig;
use crate::detection::GroundTruth;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::Adam;
use crate::propagation::{pad_clip, ClipBatch, Model};
use crate::synthdata::{stream, Sequence};
use crate::tensor::Tensor;

/// One training sequence: frames and per-frame targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSequence {
    pub frames: Vec<Frame>,
    pub targets: Vec<Vec<GroundTruth>>,
}

impl From<&Sequence> for TrainSequence {
    fn from(s: &Sequence) -> Self {
        TrainSequence {
            frames: s.frames.clone(),
            targets: s
                .annotations
                .iter()
                .map(|a| a.iter().map(|t| GroundTruth::from(t.bbox)).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub clip_len: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
    pub eta: f64,
    pub seed: u64,
}

impl TrainOptions {
    /// Step budget from the run config; `epochs` passes over every
    /// non-overlapping clip when no explicit step count is set.
    pub fn from_run(cfg: &RunConfig, data: &[TrainSequence]) -> Self {
        let clips: usize = data.iter().map(|s| s.frames.len().div_ceil(cfg.n_train)).sum();
        let steps = cfg
            .steps
            .unwrap_or_else(|| (cfg.epochs * clips).div_ceil(cfg.batch_size.max(1)));
        TrainOptions {
            clip_len: cfg.n_train,
            batch_size: cfg.batch_size,
            steps,
            lr: cfg.lr,
            lambda: cfg.lambda,
            eta: cfg.effective_eta(),
            seed: cfg.seed,
        }
    }
}

/// Batch-averaged losses of one optimiser step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossLogEntry {
    pub step: usize,
    pub total: f64,
    pub detection: f64,
    /// η-weighted fusion loss, so `total = detection + stf`.
    pub stf: f64,
}

pub const LOSS_LOG_HEADER: &str = "# step total detection stf";

pub fn format_loss_log(entries: &[LossLogEntry]) -> String {
    let mut s = String::from(LOSS_LOG_HEADER);
    s.push('\n');
    for e in entries {
        let _ = writeln!(s, "{} {} {} {}", e.step, e.total, e.detection, e.stf);
    }
    s
}

pub fn parse_loss_log(text: &str, path: &Path) -> Result<Vec<LossLogEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let bad = |m: String| Error::parse(path, i + 1, m);
            if f.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", f.len())));
            }
            let real = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
            Ok(LossLogEntry {
                step: f[0].parse().map_err(|e| bad(format!("step: {e}")))?,
                total: real(f[1])?,
                detection: real(f[2])?,
                stf: real(f[3])?,
            })
        })
        .collect()
}

/// Draws a clip of `n` consecutive frames (padded when the sequence is shorter).
pub fn sample_clip<R: Rng + ?Sized>(data: &[TrainSequence], n: usize, rng: &mut R) -> Result<ClipBatch> {
    if data.is_empty() {
        return Err(Error::input("no training sequences"));
    }
    let s = &data[rng.random_range(0..data.len())];
    if s.frames.is_empty() {
        return Err(Error::input("empty training sequence"));
    }
    let start = rng.random_range(0..=s.frames.len().saturating_sub(n));
    let end = (start + n).min(s.frames.len());
    pad_clip(s.frames[start..end].to_vec(), n)?.with_ground_truth(s.targets[start..end].to_vec())
}

/// Trains `model` in place; `on_step` sees every log entry as it is produced.
pub fn train(
    model: &mut Model,
    data: &[TrainSequence],
    opts: &TrainOptions,
    mut on_step: impl FnMut(&LossLogEntry),
) -> Result<Vec<LossLogEntry>> {
    if opts.clip_len == 0 || opts.batch_size == 0 {
        return Err(Error::config("clip length and batch size must be positive"));
    }
    let mut rng = stream(opts.seed, 0, 0, "train");
    let mut adam = Adam::new(&model.params, opts.lr);
    let mut log = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut acc: Vec<Option<Tensor>> = vec![None; model.params.len()];
        let mut entry = LossLogEntry {
            step,
            total: 0.0,
            detection: 0.0,
            stf: 0.0,
        };
        let scale = 1.0 / opts.batch_size as f64;
        for _ in 0..opts.batch_size {
            let clip = sample_clip(data, opts.clip_len, &mut rng)?;
            let mut g = Graph::new(&model.params);
            let (loss, report, _) = model.clip_loss(&mut g, &clip, opts.lambda, opts.eta)?;
            let grads = g.backward(loss);
            for (slot, gr) in acc.iter_mut().zip(g.param_grads(&grads)) {
                let Some(mut gr) = gr else { continue };
                gr.scale_assign(scale);
                match slot {
                    Some(a) => a.add_assign(&gr),
                    None => *slot = Some(gr),
                }
            }
            entry.total += scale * report.total;
            entry.detection += scale * report.detection_sum();
            entry.stf += scale * report.eta * report.stf_sum();
        }
        if !entry.total.is_finite() {
            return Err(Error::input(format!("loss became non-finite at step {step}")));
        }
        adam.step(&mut model.params, &acc);
        on_step(&entry);
        log.push(entry);
    }
    Ok(log)
}
