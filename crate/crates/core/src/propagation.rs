//! Clip-level forward pass: per-frame extraction, backward propagation,
//! forward propagation over the backward features, and the final fusion.
//!
//! Two execution modes share the same recursion: a training mode that
//! records everything on one [`Graph`], and an inference mode that evaluates
//! each step on a throwaway graph and keeps only the resulting maps.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, Frame, STRIDE};
use crate::blocks::{Act, Conv};
use crate::config::{Ablation, ModelConfig};
use crate::detection::{
    decode, detection_loss_var, total_loss, Detection, DetectionLossParts, GroundTruth, Head, HeadOutput,
    LossReport, StfParts,
};
use crate::error::{Error, Result};
use crate::fusion::Branch;
use crate::graph::{Graph, Var};
use crate::params::ParamSet;
use crate::tensor::{FeatureMap, Tensor};

/// A clip padded to the configured length.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipBatch {
    pub frames: Vec<Frame>,
    pub original_length: usize,
    /// Per-frame targets, training only.
    pub ground_truth: Option<Vec<Vec<GroundTruth>>>,
}

impl ClipBatch {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `true` for frames that are not padding.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| i < self.original_length).collect()
    }

    pub fn with_ground_truth(mut self, gt: Vec<Vec<GroundTruth>>) -> Result<Self> {
        if gt.is_empty() || gt.len() > self.len() {
            return Err(Error::input(format!(
                "{} ground-truth lists for a clip of {}",
                gt.len(),
                self.len()
            )));
        }
        let mut gt = gt;
        while gt.len() < self.len() {
            gt.push(gt[gt.len() - 1].clone());
        }
        self.ground_truth = Some(gt);
        Ok(self)
    }
}

/// Pads `frames` to `n` by repeating the last frame.
pub fn pad_clip(frames: Vec<Frame>, n: usize) -> Result<ClipBatch> {
    if frames.is_empty() {
        return Err(Error::input("cannot build a clip from zero frames"));
    }
    if frames.len() > n {
        return Err(Error::input(format!(
            "clip of {} frames exceeds the clip length {n}",
            frames.len()
        )));
    }
    let original_length = frames.len();
    let mut frames = frames;
    while frames.len() < n {
        frames.push(frames[frames.len() - 1].clone());
    }
    Ok(ClipBatch {
        frames,
        original_length,
        ground_truth: None,
    })
}

/// All intermediates of one clip, each list of length N.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeatures {
    pub extracted: Vec<FeatureMap>,
    pub backward: Vec<FeatureMap>,
    pub local_backward: Vec<FeatureMap>,
    pub forward: Vec<FeatureMap>,
    pub local_forward: Vec<FeatureMap>,
    pub fused: Vec<FeatureMap>,
}

/// Graph handles for the same intermediates.
#[derive(Debug, Clone)]
pub struct ClipVars {
    pub frames: Vec<Var>,
    pub extracted: Vec<Var>,
    pub backward: Vec<Var>,
    pub local_backward: Vec<Var>,
    pub forward: Vec<Var>,
    pub local_forward: Vec<Var>,
    pub fused: Vec<Var>,
}

/// Shared recursion. Visits `inputs` from the last index down when `reverse`,
/// otherwise from the first; out-of-range neighbours repeat the boundary
/// element and the initial carried state is `zero`. `step(prev, cur, next,
/// carried)` returns `(local, new_state)`. Returns `(states, locals)`.
pub fn recur<H: Clone>(
    inputs: &[H],
    zero: H,
    reverse: bool,
    mut step: impl FnMut(&H, &H, &H, &H) -> Result<(H, H)>,
) -> Result<(Vec<H>, Vec<H>)> {
    let n = inputs.len();
    if n == 0 {
        return Err(Error::input("propagation over an empty clip"));
    }
    let mut states: Vec<Option<H>> = vec![None; n];
    let mut locals: Vec<Option<H>> = vec![None; n];
    let mut carried = zero;
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..n).rev())
    } else {
        Box::new(0..n)
    };
    for i in order {
        let prev = &inputs[i.saturating_sub(1)];
        let next = &inputs[(i + 1).min(n - 1)];
        let (local, state) = step(prev, &inputs[i], next, &carried)?;
        carried = state.clone();
        states[i] = Some(state);
        locals[i] = Some(local);
    }
    Ok((
        states.into_iter().map(Option::unwrap).collect(),
        locals.into_iter().map(Option::unwrap).collect(),
    ))
}

/// Call counts for the single-visit checks.
#[derive(Debug, Default)]
pub struct Counters {
    backbone: AtomicUsize,
    local: AtomicUsize,
    global: AtomicUsize,
}

/// Snapshot of [`Counters`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CallCounts {
    pub backbone: usize,
    pub local: usize,
    pub global: usize,
}

impl Counters {
    pub fn snapshot(&self) -> CallCounts {
        CallCounts {
            backbone: self.backbone.load(Ordering::Relaxed),
            local: self.local.load(Ordering::Relaxed),
            global: self.global.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.backbone.store(0, Ordering::Relaxed);
        self.local.store(0, Ordering::Relaxed);
        self.global.store(0, Ordering::Relaxed);
    }
}

impl Clone for Counters {
    fn clone(&self) -> Self {
        Counters::default()
    }
}

/// The complete detector.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub params: ParamSet,
    pub backbone: Backbone,
    pub backward_branch: Option<Branch>,
    pub forward_branch: Option<Branch>,
    /// `[F^E, F^B, F^F]` → `F^D`.
    pub fuse: Conv,
    pub head: Head,
    pub counters: Counters,
}

/// How a long sequence is split for inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMode {
    /// Consecutive non-overlapping clips; every frame is extracted once.
    Recursive,
    /// One window of N frames per output frame.
    Sliding,
}

impl Model {
    pub fn new(config: ModelConfig, ablation: Ablation, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let backbone = Backbone::new(&mut ps, &mut rng, "backbone", &config);
        let backward_branch = if ablation.backward_prop {
            Some(Branch::new(&mut ps, &mut rng, "bp", &config, ablation.ltmf, ablation.gtmf)?)
        } else {
            None
        };
        let forward_branch = if ablation.forward_prop {
            Some(Branch::new(&mut ps, &mut rng, "fp", &config, ablation.ltmf, ablation.gtmf)?)
        } else {
            None
        };
        let c = config.feat;
        let fuse = Conv::new(&mut ps, &mut rng, "fuse", 3 * c, c, 3, 1, Act::Linear);
        let head = Head::new(&mut ps, &mut rng, "head", &config, STRIDE);
        Ok(Model {
            config,
            ablation,
            params: ps,
            backbone,
            backward_branch,
            forward_branch,
            fuse,
            head,
            counters: Counters::default(),
        })
    }

    pub fn call_counts(&self) -> CallCounts {
        self.counters.snapshot()
    }

    fn extract(&self, g: &mut Graph<'_>, frame: Var) -> Result<Var> {
        self.counters.backbone.fetch_add(1, Ordering::Relaxed);
        self.backbone.forward(g, frame)
    }

    /// One recursion step of `branch`: `(local, new_state)`.
    fn branch_step(
        &self,
        g: &mut Graph<'_>,
        branch: &Branch,
        prev: Var,
        cur: Var,
        next: Var,
        carried: Var,
    ) -> Result<(Var, Var)> {
        self.counters.local.fetch_add(1, Ordering::Relaxed);
        let local = branch.local.forward(g, prev, cur, next)?.fused;
        let state = match &branch.global {
            Some(gm) => {
                self.counters.global.fetch_add(1, Ordering::Relaxed);
                gm.forward(g, local, carried)?
            }
            None => local,
        };
        Ok((local, state))
    }

    fn zeros_like(g: &mut Graph<'_>, v: Var) -> Var {
        let z = Tensor::zeros(g.value(v).shape());
        g.input(z)
    }

    /// Backward recursion over the extracted features: `(F^B, F^b)`.
    /// With the branch disabled both lists are zero maps.
    pub fn backward_pass(&self, g: &mut Graph<'_>, extracted: &[Var]) -> Result<(Vec<Var>, Vec<Var>)> {
        self.run_branch(g, self.backward_branch.as_ref(), extracted, true)
    }

    /// Forward recursion over `inputs` (the backward features, or the
    /// extracted ones when the backward branch is off): `(F^F, F^f)`.
    pub fn forward_pass(&self, g: &mut Graph<'_>, inputs: &[Var]) -> Result<(Vec<Var>, Vec<Var>)> {
        self.run_branch(g, self.forward_branch.as_ref(), inputs, false)
    }

    fn run_branch(
        &self,
        g: &mut Graph<'_>,
        branch: Option<&Branch>,
        inputs: &[Var],
        reverse: bool,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let first = *inputs.first().ok_or_else(|| Error::input("propagation over an empty clip"))?;
        let zero = Self::zeros_like(g, first);
        match branch {
            Some(b) => recur(inputs, zero, reverse, |p, c, n, s| self.branch_step(g, b, *p, *c, *n, *s)),
            None => Ok((vec![zero; inputs.len()], vec![zero; inputs.len()])),
        }
    }

    /// Records the whole clip on `g`. Frames enter as differentiable variables.
    pub fn clip_graph(&self, g: &mut Graph<'_>, clip: &ClipBatch) -> Result<ClipVars> {
        let frames: Vec<Var> = clip.frames.iter().map(|f| g.variable(f.pixels.clone())).collect();
        let extracted = frames
            .iter()
            .map(|&f| self.extract(g, f))
            .collect::<Result<Vec<_>>>()?;
        let (backward, local_backward) = self.backward_pass(g, &extracted)?;
        let fp_inputs = if self.backward_branch.is_some() {
            &backward
        } else {
            &extracted
        };
        let (forward, local_forward) = self.forward_pass(g, fp_inputs)?;
        let fused = (0..extracted.len())
            .map(|i| {
                let cat = g.concat(&[extracted[i], backward[i], forward[i]])?;
                self.fuse.forward(g, cat)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClipVars {
            frames,
            extracted,
            backward,
            local_backward,
            forward,
            local_forward,
            fused,
        })
    }

    /// Clip objective on `g`. Returns the scalar loss var and its breakdown.
    pub fn clip_loss(
        &self,
        g: &mut Graph<'_>,
        clip: &ClipBatch,
        lambda: f64,
        eta: f64,
    ) -> Result<(Var, LossReport, ClipVars)> {
        let gt = clip
            .ground_truth
            .as_ref()
            .ok_or_else(|| Error::input("training clip has no ground truth"))?;
        let vars = self.clip_graph(g, clip)?;
        let mask = clip.mask();
        let mut terms = Vec::new();
        let mut det_parts = Vec::with_capacity(clip.len());
        let mut stf_parts = Vec::with_capacity(clip.len());
        for i in 0..clip.len() {
            let hv = self.head.forward(g, vars.fused[i])?;
            let (ld, parts, _) = detection_loss_var(g, &hv, STRIDE, &gt[i], lambda)?;
            det_parts.push(parts);
            let mut stf = StfParts::default();
            let mut stf_vars = Vec::new();
            if self.backward_branch.is_some() {
                let v = g.l1_mean(vars.extracted[i], vars.local_backward[i])?;
                stf.backward = g.value(v).item();
                stf_vars.push(v);
            }
            if self.forward_branch.is_some() {
                let src = if self.backward_branch.is_some() {
                    vars.backward[i]
                } else {
                    vars.extracted[i]
                };
                let v = g.l1_mean(src, vars.local_forward[i])?;
                stf.forward = g.value(v).item();
                stf_vars.push(v);
            }
            stf_parts.push(stf);
            if mask[i] {
                terms.push((ld, 1.0));
                if eta != 0.0 {
                    terms.extend(stf_vars.into_iter().map(|v| (v, eta)));
                }
            }
        }
        let loss = g.weighted_sum(&terms);
        let report = total_loss(det_parts, stf_parts, eta, mask, lambda)?;
        Ok((loss, report, vars))
    }

    /// Runs one step on its own graph and keeps only the output map.
    fn eval_step(&self, inputs: &[&Tensor], f: impl FnOnce(&mut Graph<'_>, &[Var]) -> Result<Var>) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input((*t).clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).clone())
    }

    fn eval_branch(
        &self,
        branch: Option<&Branch>,
        inputs: &[Tensor],
        reverse: bool,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let zero = Tensor::zeros(inputs[0].shape());
        let Some(b) = branch else {
            return Ok((vec![zero.clone(); inputs.len()], vec![zero; inputs.len()]));
        };
        recur(inputs, zero, reverse, |p, c, n, s| {
            let mut g = Graph::new(&self.params);
            let v: Vec<Var> = [p, c, n, s].iter().map(|t| g.input((*t).clone())).collect();
            let (local, state) = self.branch_step(&mut g, b, v[0], v[1], v[2], v[3])?;
            Ok((g.value(local).clone(), g.value(state).clone()))
        })
    }

    /// Inference-mode clip pass; all lists have the padded length.
    pub fn bird_forward(&self, clip: &ClipBatch) -> Result<ClipFeatures> {
        if clip.is_empty() {
            return Err(Error::input("empty clip"));
        }
        let extracted = clip
            .frames
            .iter()
            .map(|f| self.eval_step(&[&f.pixels], |g, v| self.extract(g, v[0])))
            .collect::<Result<Vec<_>>>()?;
        let (backward, local_backward) = self.eval_branch(self.backward_branch.as_ref(), &extracted, true)?;
        let fp_inputs = if self.backward_branch.is_some() {
            &backward
        } else {
            &extracted
        };
        let (forward, local_forward) = self.eval_branch(self.forward_branch.as_ref(), fp_inputs, false)?;
        let fused = (0..extracted.len())
            .map(|i| {
                self.eval_step(&[&extracted[i], &backward[i], &forward[i]], |g, v| {
                    let cat = g.concat(v)?;
                    self.fuse.forward(g, cat)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClipFeatures {
            extracted,
            backward,
            local_backward,
            forward,
            local_forward,
            fused,
        })
    }

    pub fn head_outputs(&self, features: &ClipFeatures) -> Result<Vec<HeadOutput>> {
        features
            .fused
            .iter()
            .map(|f| self.head.head_forward(&self.params, f))
            .collect()
    }

    /// Detections for the unpadded frames of `clip`.
    pub fn detect_clip(&self, clip: &ClipBatch, score_thresh: f64, nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
        let feats = self.bird_forward(clip)?;
        let outs = self.head_outputs(&feats)?;
        Ok(outs
            .iter()
            .take(clip.original_length)
            .map(|o| decode(o, score_thresh, nms_iou))
            .collect())
    }

    /// Detections for every frame of a sequence, clip length `n`.
    pub fn infer_sequence(
        &self,
        frames: &[Frame],
        n: usize,
        mode: InferMode,
        score_thresh: f64,
        nms_iou: f64,
    ) -> Result<Vec<Vec<Detection>>> {
        if n == 0 {
            return Err(Error::config("clip length must be at least 1"));
        }
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        match mode {
            InferMode::Recursive => {
                let mut out = Vec::with_capacity(frames.len());
                for chunk in frames.chunks(n) {
                    let clip = pad_clip(chunk.to_vec(), n)?;
                    out.extend(self.detect_clip(&clip, score_thresh, nms_iou)?);
                }
                Ok(out)
            }
            InferMode::Sliding => {
                let t_len = frames.len();
                (0..t_len)
                    .map(|t| {
                        let start = sliding_window_start(t, n, t_len);
                        let end = (start + n).min(t_len);
                        let clip = pad_clip(frames[start..end].to_vec(), n)?;
                        let mut dets = self.detect_clip(&clip, score_thresh, nms_iou)?;
                        Ok(dets.swap_remove(t - start))
                    })
                    .collect()
            }
        }
    }
}

/// First frame of the window centred (as far as the sequence allows) on `t`.
pub fn sliding_window_start(t: usize, n: usize, t_len: usize) -> usize {
    let latest = t_len.saturating_sub(n);
    t.saturating_sub(n / 2).min(latest)
}

/// Per-frame detection loss parts of a clip without recording a graph.
pub fn clip_detection_parts(model: &Model, clip: &ClipBatch, lambda: f64) -> Result<Vec<DetectionLossParts>> {
    let gt = clip
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::input("clip has no ground truth"))?;
    let feats = model.bird_forward(clip)?;
    model
        .head_outputs(&feats)?
        .iter()
        .zip(gt)
        .map(|(o, t)| crate::detection::detection_loss(o, t, lambda))
        .collect()
}
