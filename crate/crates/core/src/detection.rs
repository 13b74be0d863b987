//! Single-scale anchor-free detection head, decoding with NMS, centre-cell
//! label assignment and the clip objective (detection + fusion losses).

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::blocks::{Act, Conv};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, Var};
use crate::params::ParamSet;
use crate::tensor::{FeatureMap, Tensor};

/// Weight of the box regression term in the detection loss.
pub const LAMBDA: f64 = 5.0;
/// Weight of the fusion (STF) loss in the clip objective.
pub const ETA: f64 = 1.0;
/// Log-size outputs are clamped to this magnitude before exponentiation.
const LOG_SIZE_LIMIT: f64 = 8.0;
/// Prior probability used to initialise the objectness / class biases.
const PRIOR: f64 = 0.01;

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit, numerically stable form.
pub fn bce_with_logit(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

impl From<BBox> for GroundTruth {
    fn from(bbox: BBox) -> Self {
        GroundTruth { bbox, class_id: 0 }
    }
}

/// Per-cell raw predictions over the `h × w` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `4 × h × w`: centre offsets `(dx, dy)` in cells and log sizes `(lw, lh)` in strides.
    pub reg: Tensor,
    /// `1 × h × w` objectness logits.
    pub obj: Tensor,
    /// `classes × h × w` class logits.
    pub cls: Tensor,
    pub stride: usize,
}

impl HeadOutput {
    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.obj.chw();
        (h, w)
    }

    /// Box predicted at `(row, col)`.
    pub fn cell_box(&self, row: usize, col: usize) -> BBox {
        let (h, w) = self.grid();
        let hw = h * w;
        let p = row * w + col;
        let r = self.reg.data();
        decode_cell(row, col, self.stride, [r[p], r[hw + p], r[2 * hw + p], r[3 * hw + p]])
    }
}

fn decode_cell(row: usize, col: usize, stride: usize, reg: [f64; 4]) -> BBox {
    let s = stride as f64;
    let cx = (col as f64 + 0.5 + reg[0]) * s;
    let cy = (row as f64 + 0.5 + reg[1]) * s;
    let w = reg[2].clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT).exp() * s;
    let h = reg[3].clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT).exp() * s;
    BBox::from_center(cx, cy, w, h)
}

/// Graph handles of one head evaluation.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub reg: Var,
    pub obj: Var,
    pub cls: Var,
}

/// Two conv stacks: box regression + objectness, and classification.
#[derive(Debug, Clone)]
pub struct Head {
    pub reg_hidden: Conv,
    pub reg_out: Conv,
    pub cls_hidden: Conv,
    pub cls_out: Conv,
    pub channels: usize,
    pub num_classes: usize,
    pub stride: usize,
}

impl Head {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        cfg: &ModelConfig,
        stride: usize,
    ) -> Self {
        let c = cfg.feat;
        let hw = cfg.head_width;
        let reg_hidden = Conv::new(ps, rng, &format!("{name}.reg.hidden"), c, hw, 3, 1, Act::Relu);
        let reg_out = Conv::new(ps, rng, &format!("{name}.reg.out"), hw, 5, 3, 1, Act::Linear);
        let cls_hidden = Conv::new(ps, rng, &format!("{name}.cls.hidden"), c, hw, 3, 1, Act::Relu);
        let cls_out = Conv::new(
            ps,
            rng,
            &format!("{name}.cls.out"),
            hw,
            cfg.num_classes,
            3,
            1,
            Act::Linear,
        );
        let prior_bias = -((1.0 - PRIOR) / PRIOR).ln();
        // small initial box deltas; biased objectness / class logits
        let w = ps.get_mut(reg_out.w);
        let per_out = w.len() / 5;
        w.data_mut()[..4 * per_out].iter_mut().for_each(|v| *v *= 0.1);
        ps.get_mut(reg_out.b).data_mut()[4] = prior_bias;
        ps.get_mut(cls_out.b).data_mut().fill(prior_bias);
        Head {
            reg_hidden,
            reg_out,
            cls_hidden,
            cls_out,
            channels: c,
            num_classes: cfg.num_classes,
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, fused: Var) -> Result<HeadVars> {
        let (c, _, _) = g.value(fused).chw();
        if c != self.channels {
            return Err(Error::config(format!(
                "head expects {} channels, got {c}",
                self.channels
            )));
        }
        let r = self.reg_hidden.forward(g, fused)?;
        let r = self.reg_out.forward(g, r)?;
        let reg = g.slice_channels(r, 0, 4)?;
        let obj = g.slice_channels(r, 4, 1)?;
        let k = self.cls_hidden.forward(g, fused)?;
        let cls = self.cls_out.forward(g, k)?;
        Ok(HeadVars { reg, obj, cls })
    }

    pub fn output(&self, g: &Graph<'_>, v: &HeadVars) -> HeadOutput {
        HeadOutput {
            reg: g.value(v.reg).clone(),
            obj: g.value(v.obj).clone(),
            cls: g.value(v.cls).clone(),
            stride: self.stride,
        }
    }

    /// Head on a standalone fused map.
    pub fn head_forward(&self, ps: &ParamSet, fused: &FeatureMap) -> Result<HeadOutput> {
        let mut g = Graph::new(ps);
        let x = g.input(fused.clone());
        let v = self.forward(&mut g, x)?;
        Ok(self.output(&g, &v))
    }
}

fn score_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score)
}

/// Greedy non-maximum suppression; keeps boxes in descending score order and
/// drops any box whose IoU with a kept one exceeds `iou_thresh`.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(score_order);
    let mut keep: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if keep
            .iter()
            .all(|k| k.class_id != d.class_id || k.bbox.iou(&d.bbox) <= iou_thresh)
        {
            keep.push(d);
        }
    }
    keep
}

/// Scores every cell as `σ(obj)·σ(cls)`, thresholds, clips to the frame and
/// applies NMS. Output is sorted by score, highest first.
pub fn decode(out: &HeadOutput, score_thresh: f64, nms_iou: f64) -> Vec<Detection> {
    let (h, w) = out.grid();
    let hw = h * w;
    let (fw, fh) = ((w * out.stride) as f64, (h * out.stride) as f64);
    let (nc, _, _) = out.cls.chw();
    let mut dets = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let p = row * w + col;
            let obj = sigmoid(out.obj.data()[p]);
            let (class_id, cls) = (0..nc)
                .map(|k| (k, sigmoid(out.cls.data()[k * hw + p])))
                .fold((0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best });
            let score = obj * cls;
            if score < score_thresh {
                continue;
            }
            let bbox = out.cell_box(row, col).clip(fw, fh);
            if !bbox.is_valid() {
                continue;
            }
            dets.push(Detection {
                bbox,
                score,
                class_id,
            });
        }
    }
    nms(dets, nms_iou)
}

/// Centre-cell assignment result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub grid: (usize, usize),
    /// `(row·w + col, gt index)`, one entry per positive cell.
    pub positives: Vec<(usize, usize)>,
    /// GT indices that lost their cell to a lower-index GT.
    pub missed: Vec<usize>,
}

impl Assignment {
    pub fn is_positive(&self, cell: usize) -> bool {
        self.positives.iter().any(|&(c, _)| c == cell)
    }
}

/// Marks the cell containing each GT centre as positive for it; on a shared
/// cell the lower GT index wins.
pub fn assign_targets(gt: &[GroundTruth], grid: (usize, usize), stride: usize) -> Result<Assignment> {
    let (h, w) = grid;
    let (fw, fh) = ((w * stride) as f64, (h * stride) as f64);
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    let mut missed = Vec::new();
    for (i, t) in gt.iter().enumerate() {
        let b = &t.bbox;
        if !b.is_valid() || b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > fw || b.y2 > fh {
            return Err(Error::input(format!(
                "ground-truth box {i} {b:?} lies outside the {fw}×{fh} frame"
            )));
        }
        let (cx, cy) = b.center();
        let col = ((cx / stride as f64).floor() as usize).min(w - 1);
        let row = ((cy / stride as f64).floor() as usize).min(h - 1);
        let cell = row * w + col;
        match owner[cell] {
            None => owner[cell] = Some(i),
            Some(_) => missed.push(i),
        }
    }
    let positives = owner
        .iter()
        .enumerate()
        .filter_map(|(c, o)| o.map(|i| (c, i)))
        .collect();
    Ok(Assignment {
        grid,
        positives,
        missed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DetectionLossParts {
    pub reg: f64,
    pub cls: f64,
    pub obj: f64,
    /// `λ·reg + cls + obj`.
    pub total: f64,
}

/// `IoU(pred, gt)` and its gradient w.r.t. `(dx, dy, lw, lh)` of the cell.
fn iou_and_grad(row: usize, col: usize, stride: usize, reg: [f64; 4], gt: &BBox) -> (f64, [f64; 4]) {
    let s = stride as f64;
    let cx = (col as f64 + 0.5 + reg[0]) * s;
    let cy = (row as f64 + 0.5 + reg[1]) * s;
    let lw_in = (-LOG_SIZE_LIMIT..=LOG_SIZE_LIMIT).contains(&reg[2]);
    let lh_in = (-LOG_SIZE_LIMIT..=LOG_SIZE_LIMIT).contains(&reg[3]);
    let w = reg[2].clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT).exp() * s;
    let h = reg[3].clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT).exp() * s;
    let (x1, x2, y1, y2) = (cx - w / 2.0, cx + w / 2.0, cy - h / 2.0, cy + h / 2.0);
    let iw = x2.min(gt.x2) - x1.max(gt.x1);
    let ih = y2.min(gt.y2) - y1.max(gt.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = w * h + gt.area() - inter;
    let iou = inter / union;
    let d_inter = (union + inter) / (union * union);
    let d_area = -inter / (union * union);
    // ∂inter/∂(x1, x2, y1, y2)
    let di_x1 = if x1 > gt.x1 { -ih } else { 0.0 };
    let di_x2 = if x2 < gt.x2 { ih } else { 0.0 };
    let di_y1 = if y1 > gt.y1 { -iw } else { 0.0 };
    let di_y2 = if y2 < gt.y2 { iw } else { 0.0 };
    let d_cx = d_inter * (di_x1 + di_x2);
    let d_cy = d_inter * (di_y1 + di_y2);
    let d_w = d_inter * 0.5 * (di_x2 - di_x1) + d_area * h;
    let d_h = d_inter * 0.5 * (di_y2 - di_y1) + d_area * w;
    let g_lw = if lw_in { d_w * w } else { 0.0 };
    let g_lh = if lh_in { d_h * h } else { 0.0 };
    (iou, [d_cx * s, d_cy * s, g_lw, g_lh])
}

#[derive(Debug)]
struct DetectionLossOp {
    assignment: Assignment,
    targets: Vec<GroundTruth>,
    stride: usize,
    lambda: f64,
}

impl DetectionLossOp {
    /// Loss parts and, when requested, gradients for (reg, obj, cls).
    fn eval(&self, reg: &Tensor, obj: &Tensor, cls: &Tensor, grads: bool) -> (DetectionLossParts, Option<[Tensor; 3]>) {
        let (h, w) = self.assignment.grid;
        let hw = h * w;
        let (nc, _, _) = cls.chw();
        let n_pos = self.assignment.positives.len();
        let mut g_reg = Tensor::zeros(reg.shape());
        let mut g_obj = Tensor::zeros(obj.shape());
        let mut g_cls = Tensor::zeros(cls.shape());
        let mut parts = DetectionLossParts::default();

        let obj_norm = n_pos.max(1) as f64;
        for p in 0..hw {
            let z = obj.data()[p];
            let t = if self.assignment.is_positive(p) { 1.0 } else { 0.0 };
            parts.obj += bce_with_logit(z, t) / obj_norm;
            if grads {
                g_obj.data_mut()[p] = (sigmoid(z) - t) / obj_norm;
            }
        }
        if n_pos > 0 {
            let pn = n_pos as f64;
            let cls_norm = pn * nc as f64;
            for &(cell, gi) in &self.assignment.positives {
                let (row, col) = (cell / w, cell % w);
                let r = reg.data();
                let rv = [r[cell], r[hw + cell], r[2 * hw + cell], r[3 * hw + cell]];
                let (iou, d) = iou_and_grad(row, col, self.stride, rv, &self.targets[gi].bbox);
                parts.reg += (1.0 - iou) / pn;
                for k in 0..nc {
                    let z = cls.data()[k * hw + cell];
                    let t = if k == self.targets[gi].class_id { 1.0 } else { 0.0 };
                    parts.cls += bce_with_logit(z, t) / cls_norm;
                    if grads {
                        g_cls.data_mut()[k * hw + cell] = (sigmoid(z) - t) / cls_norm;
                    }
                }
                if grads {
                    for (j, dj) in d.iter().enumerate() {
                        g_reg.data_mut()[j * hw + cell] = -self.lambda * dj / pn;
                    }
                }
            }
        }
        parts.total = self.lambda * parts.reg + parts.cls + parts.obj;
        (parts, grads.then_some([g_reg, g_obj, g_cls]))
    }
}

impl CustomOp for DetectionLossOp {
    fn backward(&self, inputs: &[&Tensor], out_grad: &Tensor) -> Vec<Option<Tensor>> {
        let (_, g) = self.eval(inputs[0], inputs[1], inputs[2], true);
        let k = out_grad.item();
        g.unwrap()
            .into_iter()
            .map(|mut t| {
                t.scale_assign(k);
                Some(t)
            })
            .collect()
    }
}

/// Records `L_D` for one frame on the graph; returns the scalar var and its parts.
pub fn detection_loss_var(
    g: &mut Graph<'_>,
    head: &HeadVars,
    stride: usize,
    gt: &[GroundTruth],
    lambda: f64,
) -> Result<(Var, DetectionLossParts, Assignment)> {
    let (_, h, w) = g.value(head.obj).chw();
    let assignment = assign_targets(gt, (h, w), stride)?;
    let op = DetectionLossOp {
        assignment: assignment.clone(),
        targets: gt.to_vec(),
        stride,
        lambda,
    };
    let (parts, _) = op.eval(g.value(head.reg), g.value(head.obj), g.value(head.cls), false);
    let v = g.custom(&[head.reg, head.obj, head.cls], Tensor::scalar(parts.total), Box::new(op));
    Ok((v, parts, assignment))
}

/// `L_D = λ·L_reg + L_cls + L_obj` for concrete head outputs.
pub fn detection_loss(out: &HeadOutput, gt: &[GroundTruth], lambda: f64) -> Result<DetectionLossParts> {
    let assignment = assign_targets(gt, out.grid(), out.stride)?;
    let op = DetectionLossOp {
        assignment,
        targets: gt.to_vec(),
        stride: out.stride,
        lambda,
    };
    Ok(op.eval(&out.reg, &out.obj, &out.cls, false).0)
}

/// Fusion losses of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StfParts {
    /// `L1(F^E_i, F^b_i)`.
    pub backward: f64,
    /// `L1(F^B_i, F^f_i)`.
    pub forward: f64,
}

impl StfParts {
    pub fn total(&self) -> f64 {
        self.backward + self.forward
    }
}

pub fn l1_mean(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::input(format!(
            "L1 shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Per-frame fusion losses from concrete feature lists.
pub fn stf_loss(
    extracted: &[Tensor],
    local_backward: &[Tensor],
    backward: &[Tensor],
    local_forward: &[Tensor],
) -> Result<Vec<StfParts>> {
    let n = extracted.len();
    if local_backward.len() != n || backward.len() != n || local_forward.len() != n {
        return Err(Error::input("fusion-loss feature lists differ in length"));
    }
    (0..n)
        .map(|i| {
            Ok(StfParts {
                backward: l1_mean(&extracted[i], &local_backward[i])?,
                forward: l1_mean(&backward[i], &local_forward[i])?,
            })
        })
        .collect()
}

/// Everything needed to audit one clip's objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub detection: Vec<DetectionLossParts>,
    pub stf: Vec<StfParts>,
    /// `true` for frames that count (not padding).
    pub mask: Vec<bool>,
    pub lambda: f64,
    pub eta: f64,
}

impl LossReport {
    pub fn detection_sum(&self) -> f64 {
        self.detection
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(d, _)| d.total)
            .sum()
    }

    pub fn stf_sum(&self) -> f64 {
        self.stf
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(s, _)| s.total())
            .sum()
    }
}

/// `L = Σ_{unpadded i} (L_{i,D} + η·L_{i,STF})`.
pub fn total_loss(
    detection: Vec<DetectionLossParts>,
    stf: Vec<StfParts>,
    eta: f64,
    mask: Vec<bool>,
    lambda: f64,
) -> Result<LossReport> {
    if detection.len() != stf.len() || detection.len() != mask.len() {
        return Err(Error::input("loss part lists differ in length"));
    }
    let total = detection
        .iter()
        .zip(&stf)
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|((d, s), _)| d.total + eta * s.total())
        .sum();
    Ok(LossReport {
        total,
        detection,
        stf,
        mask,
        lambda,
        eta,
    })
}

/// One line of the prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePredictions {
    pub seq: String,
    pub frame: usize,
    /// `[x1, y1, x2, y2, score]` per detection, frame pixels.
    pub boxes: Vec<[f64; 5]>,
}

impl FramePredictions {
    pub fn new(seq: &str, frame: usize, dets: &[Detection]) -> Self {
        FramePredictions {
            seq: seq.to_string(),
            frame,
            boxes: dets
                .iter()
                .map(|d| [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.score])
                .collect(),
        }
    }

    pub fn detections(&self) -> Vec<Detection> {
        let mut d: Vec<Detection> = self
            .boxes
            .iter()
            .map(|b| Detection {
                bbox: BBox::new(b[0], b[1], b[2], b[3]),
                score: b[4],
                class_id: 0,
            })
            .collect();
        d.sort_by(score_order);
        d
    }
}

/// Writes one JSON object per line.
pub fn write_predictions(path: &Path, preds: &[FramePredictions]) -> Result<()> {
    let mut s = String::new();
    for p in preds {
        s.push_str(&serde_json::to_string(p).expect("prediction records serialise"));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<FramePredictions>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, i + 1, e.to_string())))
        .collect()
}
