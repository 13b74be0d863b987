//! Brute-force scalar reference implementations used as test oracles.

use bird::bbox::BBox;
use bird::blocks::{Act, ChannelAttention, Conv, Rdb, SpatialAttention};
use bird::detection::Detection;
use bird::eval::EvalFrame;
use bird::params::ParamSet;
use bird::Tensor;
use rand::Rng;

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn conv_ref(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize, relu: bool) -> Tensor {
    let (cin, h, wd) = x.chw();
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    for o in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = b.map_or(0.0, |b| b.data()[o]);
                for c in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                s += w.data()[((o * cin + c) * k + ky) * k + kx] * x.at3(c, iy as usize, ix as usize);
                            }
                        }
                    }
                }
                out.data_mut()[(o * ho + oy) * wo + ox] = if relu { s.max(0.0) } else { s };
            }
        }
    }
    out
}

pub fn layer_ref(ps: &ParamSet, conv: &Conv, x: &Tensor) -> Tensor {
    conv_ref(
        x,
        ps.get(conv.w),
        Some(ps.get(conv.b)),
        conv.stride,
        conv.k / 2,
        conv.act == Act::Relu,
    )
}

/// Bilinear read as a sum of tent weights over every grid point.
pub fn bilinear_ref(x: &Tensor, c: usize, py: f64, px: f64) -> f64 {
    let (_, h, w) = x.chw();
    let mut s = 0.0;
    for qy in 0..h {
        for qx in 0..w {
            let wy = (1.0 - (py - qy as f64).abs()).max(0.0);
            let wx = (1.0 - (px - qx as f64).abs()).max(0.0);
            s += wy * wx * x.at3(c, qy, qx);
        }
    }
    s
}

pub fn deform_ref(x: &Tensor, w: &Tensor, b: &Tensor, off: &Tensor, mask: &Tensor, groups: usize) -> Tensor {
    let (cin, h, wd) = x.chw();
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let kk = k * k;
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros(&[cout, h, wd]);
    for o in 0..cout {
        for py in 0..h {
            for px in 0..wd {
                let mut s = b.data()[o];
                for c in 0..cin {
                    let grp = c / (cin / groups);
                    for t in 0..kk {
                        let (dy, dx) = ((t / k) as isize - r, (t % k) as isize - r);
                        let oy = off.at3(grp * 2 * kk + 2 * t, py, px);
                        let ox = off.at3(grp * 2 * kk + 2 * t + 1, py, px);
                        let m = mask.at3(grp * kk + t, py, px);
                        let v = bilinear_ref(x, c, py as f64 + dy as f64 + oy, px as f64 + dx as f64 + ox);
                        s += w.data()[(o * cin + c) * kk + t] * m * v;
                    }
                }
                out.data_mut()[(o * h + py) * wd + px] = s;
            }
        }
    }
    out
}

pub fn concat(parts: &[&Tensor]) -> Tensor {
    Tensor::concat_channels(parts).unwrap()
}

pub fn scale_channels(x: &Tensor, s: &[f64]) -> Tensor {
    let (_, h, w) = x.chw();
    Tensor::from_fn(x.shape(), |i| x.data()[i] * s[i / (h * w)])
}

pub fn ca_ref(ps: &ParamSet, ca: &ChannelAttention, x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    let plane = |ch: usize| &x.data()[ch * h * w..(ch + 1) * h * w];
    let avg: Vec<f64> = (0..c).map(|ch| plane(ch).iter().sum::<f64>() / (h * w) as f64).collect();
    let max: Vec<f64> = (0..c).map(|ch| plane(ch).iter().cloned().fold(f64::MIN, f64::max)).collect();
    let (w1, b1, w2, b2) = (ps.get(ca.fc1_w), ps.get(ca.fc1_b), ps.get(ca.fc2_w), ps.get(ca.fc2_b));
    let mlp = |v: &[f64]| -> Vec<f64> {
        let hid: Vec<f64> = (0..ca.hidden)
            .map(|j| (b1.data()[j] + (0..c).map(|i| w1.data()[j * c + i] * v[i]).sum::<f64>()).max(0.0))
            .collect();
        (0..c)
            .map(|i| b2.data()[i] + (0..ca.hidden).map(|j| w2.data()[i * ca.hidden + j] * hid[j]).sum::<f64>())
            .collect()
    };
    let (ma, mm) = (mlp(&avg), mlp(&max));
    let s: Vec<f64> = ma.iter().zip(&mm).map(|(a, b)| sigmoid(a + b)).collect();
    scale_channels(x, &s)
}

pub fn sa_ref(ps: &ParamSet, sa: &SpatialAttention, x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    let mut pooled = Tensor::zeros(&[2, h, w]);
    for p in 0..h * w {
        let vals: Vec<f64> = (0..c).map(|ch| x.data()[ch * h * w + p]).collect();
        pooled.data_mut()[p] = vals.iter().sum::<f64>() / c as f64;
        pooled.data_mut()[h * w + p] = vals.iter().cloned().fold(f64::MIN, f64::max);
    }
    let logits = layer_ref(ps, &sa.conv, &pooled);
    Tensor::from_fn(x.shape(), |i| x.data()[i] * sigmoid(logits.data()[i % (h * w)]))
}

pub fn rdb_ref(ps: &ParamSet, rdb: &Rdb, x: &Tensor) -> Tensor {
    let mut feats = vec![x.clone()];
    for layer in &rdb.layers {
        let inp = concat(&feats.iter().collect::<Vec<_>>());
        feats.push(layer_ref(ps, layer, &inp));
    }
    let fused = layer_ref(ps, &rdb.fusion, &concat(&feats.iter().collect::<Vec<_>>()));
    Tensor::from_fn(x.shape(), |i| x.data()[i] + fused.data()[i])
}

pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Greedy matching in descending score order over the full IoU matrix.
pub fn match_ref(preds: &[Detection], gts: &[BBox], thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let iou: Vec<Vec<f64>> = preds.iter().map(|p| gts.iter().map(|g| iou_ref(&p.bbox, g)).collect()).collect();
    let mut taken = vec![false; gts.len()];
    let mut hit = vec![false; preds.len()];
    for i in order {
        let mut best = None;
        for j in 0..gts.len() {
            if !taken[j] && iou[i][j] >= thresh && best.is_none_or(|b: usize| iou[i][j] > iou[i][b]) {
                best = Some(j);
            }
        }
        if let Some(j) = best {
            taken[j] = true;
            hit[i] = true;
        }
    }
    hit
}

pub fn random_box<R: Rng>(r: &mut R) -> BBox {
    let (x, y) = (r.random_range(0.0..20.0), r.random_range(0.0..20.0));
    BBox::new(x, y, x + r.random_range(2.0..8.0), y + r.random_range(2.0..8.0))
}

pub fn random_frames<R: Rng>(r: &mut R) -> Vec<EvalFrame> {
    (0..r.random_range(1..=4))
        .map(|_| {
            let gts: Vec<BBox> = (0..r.random_range(0..=4)).map(|_| random_box(r)).collect();
            let mut preds: Vec<Detection> = Vec::new();
            for g in &gts {
                if r.random_bool(0.7) {
                    let j = r.random_range(-1.5..1.5);
                    preds.push(Detection {
                        bbox: BBox::new(g.x1 + j, g.y1 + j, g.x2 + j, g.y2 + j),
                        score: r.random_range(0.0..1.0),
                        class_id: 0,
                    });
                }
            }
            for _ in 0..r.random_range(0..=3) {
                preds.push(Detection {
                    bbox: random_box(r),
                    score: r.random_range(0.0..1.0),
                    class_id: 0,
                });
            }
            preds.sort_by(|a, b| b.score.total_cmp(&a.score));
            EvalFrame { preds, gts }
        })
        .collect()
}


/// Precision and recall at every score threshold by re-matching the kept
/// predictions, then the area under the monotone envelope.
pub fn ap_ref(frames: &[EvalFrame], thresh: f64) -> f64 {
    let n_gt: usize = frames.iter().map(|f| f.gts.len()).sum();
    let mut scores: Vec<f64> = frames.iter().flat_map(|f| f.preds.iter().map(|d| d.score)).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    let mut pr = Vec::new();
    for &t in &scores {
        let (mut tp, mut kept) = (0, 0);
        for f in frames {
            let preds: Vec<Detection> = f.preds.iter().filter(|d| d.score >= t).cloned().collect();
            kept += preds.len();
            tp += match_ref(&preds, &f.gts, thresh).iter().filter(|&&h| h).count();
        }
        pr.push((tp as f64 / n_gt as f64, tp as f64 / kept as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (i, &(rec, _)) in pr.iter().enumerate() {
        let best = pr[i..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (rec - prev) * best;
        prev = rec;
    }
    ap
}
