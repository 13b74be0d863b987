//! Detection metrics and the recursive-vs-sliding throughput benchmark.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use image::{ImageBuffer, Rgb};

use crate::backbone::Frame;
use crate::bbox::BBox;
use crate::detection::{Detection, FramePredictions};
use crate::error::{Error, Result};
use crate::propagation::{CallCounts, InferMode, Model};

pub const IOU_THRESH: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl std::ops::AddAssign for MatchCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// For each prediction (already in descending score order), whether it is a
/// true positive. A prediction takes the highest-IoU unmatched GT with
/// IoU ≥ `iou_thresh`; equal IoUs go to the lower GT index.
pub fn match_flags(preds: &[BBox], gts: &[BBox], iou_thresh: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let iou = p.iou(g);
                if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Greedy matching of score-sorted predictions against GT boxes.
pub fn match_detections(preds: &[Detection], gts: &[BBox], iou_thresh: f64) -> MatchCounts {
    let boxes: Vec<BBox> = preds.iter().map(|d| d.bbox).collect();
    let tp = match_flags(&boxes, gts, iou_thresh).into_iter().filter(|&m| m).count();
    MatchCounts {
        tp,
        fp: preds.len() - tp,
        fn_: gts.len() - tp,
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `(precision, recall, f1)`; `0/0` is taken as 0.
pub fn prf1(c: MatchCounts) -> (f64, f64, f64) {
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// One evaluated frame: score-sorted predictions and its GT boxes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalFrame {
    pub preds: Vec<Detection>,
    pub gts: Vec<BBox>,
}

/// All-points AP over pooled frames and its raw PR points `(recall, precision)`,
/// one point per distinct score.
pub fn average_precision(frames: &[EvalFrame], iou_thresh: f64) -> Result<(f64, Vec<(f64, f64)>)> {
    let n_gt: usize = frames.iter().map(|f| f.gts.len()).sum();
    if n_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for f in frames {
        let mut preds = f.preds.clone();
        preds.sort_by(|a, b| b.score.total_cmp(&a.score));
        let boxes: Vec<BBox> = preds.iter().map(|d| d.bbox).collect();
        let flags = match_flags(&boxes, &f.gts, iou_thresh);
        scored.extend(preds.iter().zip(flags).map(|(d, m)| (d.score, m)));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, hit)) in scored.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = scored.get(i + 1).is_none_or(|n| n.0 != score);
        if last_of_group {
            points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let envelope = precision_envelope(&points);
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (&(r, _), &p) in points.iter().zip(&envelope) {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    Ok((ap, points))
}

/// Interpolated precision: at each point, the max precision at any recall ≥ its own.
pub fn precision_envelope(points: &[(f64, f64)]) -> Vec<f64> {
    let mut env = vec![0.0; points.len()];
    let mut best: f64 = 0.0;
    for i in (0..points.len()).rev() {
        best = best.max(points[i].1);
        env[i] = best;
    }
    env
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub counts: MatchCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap50: f64,
    pub pr_points: Vec<(f64, f64)>,
    pub score_thresh: f64,
    pub frames: usize,
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        format!(
            "frames={}\nscore_thresh={}\ntp={}\nfp={}\nfn={}\nprecision={}\nrecall={}\nf1={}\nap50={}\nmap50={}\n",
            self.frames,
            self.score_thresh,
            self.counts.tp,
            self.counts.fp,
            self.counts.fn_,
            self.precision,
            self.recall,
            self.f1,
            self.ap50,
            self.ap50
        )
    }
}

/// P/R/F1 over predictions scoring at least `score_thresh`, plus pooled AP50.
pub fn evaluate(frames: &[EvalFrame], score_thresh: f64, iou_thresh: f64) -> Result<MetricReport> {
    let (ap50, pr_points) = average_precision(frames, iou_thresh)?;
    let mut counts = MatchCounts::default();
    for f in frames {
        let mut kept: Vec<Detection> = f.preds.iter().filter(|d| d.score >= score_thresh).copied().collect();
        kept.sort_by(|a, b| b.score.total_cmp(&a.score));
        counts += match_detections(&kept, &f.gts, iou_thresh);
    }
    let (precision, recall, f1) = prf1(counts);
    Ok(MetricReport {
        counts,
        precision,
        recall,
        f1,
        ap50,
        pr_points,
        score_thresh,
        frames: frames.len(),
    })
}

/// GT boxes keyed by `(sequence id, frame)`.
pub type GroundTruthSet = BTreeMap<(String, usize), Vec<BBox>>;

/// Joins a prediction dump with ground truth; GT frames without a
/// prediction record count as frames with no detections.
pub fn join_predictions(preds: &[FramePredictions], gt: &GroundTruthSet) -> Result<Vec<EvalFrame>> {
    let mut by_key: BTreeMap<(String, usize), Vec<Detection>> = BTreeMap::new();
    for p in preds {
        let key = (p.seq.clone(), p.frame);
        if !gt.contains_key(&key) {
            return Err(Error::input(format!(
                "prediction for sequence {} frame {} has no ground truth",
                p.seq, p.frame
            )));
        }
        by_key.entry(key).or_default().extend(p.detections());
    }
    Ok(gt
        .iter()
        .map(|(k, gts)| EvalFrame {
            preds: by_key.remove(k).unwrap_or_default(),
            gts: gts.clone(),
        })
        .collect())
}

/// Draws the interpolated PR curve on a white canvas.
pub fn write_pr_png(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    const S: u32 = 400;
    const M: u32 = 30;
    let mut img = ImageBuffer::from_pixel(S, S, Rgb([255u8, 255, 255]));
    let span = (S - 2 * M) as f64;
    let to_px = |r: f64, p: f64| -> (f64, f64) { (M as f64 + r * span, (S - M) as f64 - p * span) };
    let line = |img: &mut ImageBuffer<Rgb<u8>, Vec<u8>>, a: (f64, f64), b: (f64, f64), c: [u8; 3]| {
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = (a.0 + t * (b.0 - a.0)).round() as u32;
            let y = (a.1 + t * (b.1 - a.1)).round() as u32;
            if x < S && y < S {
                img.put_pixel(x, y, Rgb(c));
            }
        }
    };
    let black = [0, 0, 0];
    line(&mut img, to_px(0.0, 0.0), to_px(1.0, 0.0), black);
    line(&mut img, to_px(0.0, 0.0), to_px(0.0, 1.0), black);
    let env = precision_envelope(points);
    let red = [200, 30, 30];
    let (mut r0, mut p0) = (0.0, env.first().copied().unwrap_or(0.0));
    for (&(r, _), &p) in points.iter().zip(&env) {
        line(&mut img, to_px(r0, p0), to_px(r0, p), red);
        line(&mut img, to_px(r0, p), to_px(r, p), red);
        (r0, p0) = (r, p);
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub mode: InferMode,
    pub clip_len: usize,
    pub frames: usize,
    pub counts: CallCounts,
    pub seconds: f64,
    pub fps: f64,
}

impl BenchResult {
    pub fn mode_name(&self) -> &'static str {
        match self.mode {
            InferMode::Recursive => "recursive",
            InferMode::Sliding => "sliding",
        }
    }
}

/// Times inference over `frames` and records how often each stage ran.
pub fn benchmark(model: &Model, frames: &[Frame], mode: InferMode, n: usize) -> Result<BenchResult> {
    model.counters.reset();
    let start = Instant::now();
    let out = model.infer_sequence(frames, n, mode, 0.05, 0.5)?;
    let seconds = start.elapsed().as_secs_f64();
    debug_assert_eq!(out.len(), frames.len());
    Ok(BenchResult {
        mode,
        clip_len: n,
        frames: frames.len(),
        counts: model.call_counts(),
        seconds,
        fps: frames.len() as f64 / seconds.max(1e-12),
    })
}

/// Side-by-side text table of benchmark results.
pub fn bench_table(results: &[BenchResult]) -> String {
    let mut s = String::from("mode       N  frames  backbone  local  global  seconds    fps\n");
    for r in results {
        s.push_str(&format!(
            "{:<9} {:>2} {:>7} {:>9} {:>6} {:>7} {:>8.3} {:>6.2}\n",
            r.mode_name(),
            r.clip_len,
            r.frames,
            r.counts.backbone,
            r.counts.local,
            r.counts.global,
            r.seconds,
            r.fps
        ));
    }
    let rec = results.iter().find(|r| r.mode == InferMode::Recursive);
    let sld = results.iter().find(|r| r.mode == InferMode::Sliding);
    if let (Some(r), Some(w)) = (rec, sld) {
        s.push_str(&format!("recursive_over_sliding_fps={:.3}\n", r.fps / w.fps));
    }
    s
}
