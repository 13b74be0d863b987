//! Blocks, head, propagation and metrics against brute-force scalar oracles.

mod common;

use bird::backbone::Frame;
use bird::blocks::{apply, modulated_deform_conv, Agrd, ChannelAttention, DeformParams, Rdb, SpatialAttention};
use bird::config::{Ablation, ModelConfig};
use bird::detection::Head;
use bird::eval::{average_precision, match_detections};
use bird::graph::Graph;
use bird::params::ParamSet;
use bird::propagation::{pad_clip, Model};
use bird::Tensor;
use common::reference::*;
use common::{rng, uniform};
use rand::Rng;

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-10;

fn assert_close(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape");
    let d = a.max_abs_diff(b);
    assert!(d < TOL * (1.0 + b.max_abs()), "{what}: max abs diff {d:e}");
}

#[test]
fn deform_conv_matches_direct_sum() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (cin, cout, groups, h, w, k) = if seed == 0 {
            (1, 1, 1, 4, 4, 3)
        } else {
            let groups = r.random_range(1..=2);
            (
                groups * r.random_range(1..=3),
                r.random_range(1..=3),
                groups,
                r.random_range(3..=7),
                r.random_range(3..=7),
                [1, 3][r.random_range(0..2)],
            )
        };
        let x = uniform(&[cin, h, w], -1.0, 1.0, &mut r);
        let wt = uniform(&[cout, cin, k, k], -1.0, 1.0, &mut r);
        let b = uniform(&[cout], -1.0, 1.0, &mut r);
        let off = uniform(&[groups * 2 * k * k, h, w], -1.0, 1.0, &mut r);
        let mask = uniform(&[groups * k * k, h, w], 0.0, 1.0, &mut r);
        let params = DeformParams::new(off.clone(), mask.clone(), groups, k).unwrap();
        let got = modulated_deform_conv(&x, &wt, Some(&b), &params).unwrap();
        assert_close(&got, &deform_ref(&x, &wt, &b, &off, &mask, groups), &format!("seed {seed}"));
    }
}

#[test]
fn deform_conv_with_integer_offsets_is_a_shifted_conv() {
    for seed in 0..INSTANCES {
        let mut r = rng(100 + seed);
        let (c, h, w) = (r.random_range(1..=3), r.random_range(3..=6), r.random_range(3..=6));
        let x = uniform(&[c, h, w], -1.0, 1.0, &mut r);
        let wt = uniform(&[2, c, 3, 3], -1.0, 1.0, &mut r);
        let b = uniform(&[2], -1.0, 1.0, &mut r);
        let off = Tensor::from_fn(&[18, h, w], |_| r.random_range(-2..=2) as f64);
        let mask = uniform(&[9, h, w], 0.0, 1.0, &mut r);
        let params = DeformParams::new(off.clone(), mask.clone(), 1, 3).unwrap();
        let got = modulated_deform_conv(&x, &wt, Some(&b), &params).unwrap();
        assert_close(&got, &deform_ref(&x, &wt, &b, &off, &mask, 1), &format!("seed {seed}"));
        let still = DeformParams::identity(1, 3, h, w);
        let plain = modulated_deform_conv(&x, &wt, Some(&b), &still).unwrap();
        assert_close(&plain, &conv_ref(&x, &wt, Some(&b), 1, 1, false), &format!("identity seed {seed}"));
    }
}

#[test]
fn channel_attention_matches_scalar_mlp() {
    for seed in 0..INSTANCES {
        let mut r = rng(200 + seed);
        let (c, h, w) = if seed == 0 {
            (8, 5, 5)
        } else {
            (r.random_range(1..=8), r.random_range(1..=6), r.random_range(1..=6))
        };
        let mut ps = ParamSet::new();
        let ca = ChannelAttention::new(&mut ps, &mut r, "ca", c, 2, 2);
        let b1 = ps.get_mut(ca.fc1_b);
        *b1 = uniform(b1.shape(), -0.5, 0.5, &mut r);
        let x = uniform(&[c, h, w], -2.0, 2.0, &mut r);
        let got = apply(&ps, &x, |g, v| ca.forward(g, v)).unwrap();
        assert_close(&got, &ca_ref(&ps, &ca, &x), &format!("seed {seed}"));
    }
}

#[test]
fn spatial_attention_matches_scalar_pooling() {
    for seed in 0..INSTANCES {
        let mut r = rng(300 + seed);
        let (c, h, w) = if seed == 0 {
            (4, 6, 6)
        } else {
            (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=8))
        };
        let mut ps = ParamSet::new();
        let sa = SpatialAttention::new(&mut ps, &mut r, "sa", [3, 7][seed as usize % 2]);
        let x = uniform(&[c, h, w], -2.0, 2.0, &mut r);
        let got = apply(&ps, &x, |g, v| sa.forward(g, v)).unwrap();
        assert_close(&got, &sa_ref(&ps, &sa, &x), &format!("seed {seed}"));
    }
}

#[test]
fn rdb_matches_dense_loop() {
    for seed in 0..INSTANCES {
        let mut r = rng(400 + seed);
        let (c, h, w) = if seed == 0 {
            (16, 4, 4)
        } else {
            (r.random_range(1..=8), r.random_range(2..=6), r.random_range(2..=6))
        };
        let (growth, layers) = (r.random_range(1..=6), r.random_range(1..=4));
        let mut ps = ParamSet::new();
        let rdb = Rdb::new(&mut ps, &mut r, "rdb", c, growth, layers);
        let x = uniform(&[c, h, w], -1.0, 1.0, &mut r);
        let got = apply(&ps, &x, |g, v| rdb.forward(g, v)).unwrap();
        assert_close(&got, &rdb_ref(&ps, &rdb, &x), &format!("seed {seed}"));
    }
}

#[test]
fn rdca_mixes_skip_and_branch_with_alpha_beta() {
    for seed in 0..INSTANCES {
        let mut r = rng(500 + seed);
        let (c, h, w) = (r.random_range(2..=8), r.random_range(2..=6), r.random_range(2..=6));
        let mut ps = ParamSet::new();
        let rdca = Rdb::new_rdca(&mut ps, &mut r, "rdca", c, 4, 3, 2, 2);
        let (alpha, beta) = if seed == 0 {
            (2.0, 1.0)
        } else {
            (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0))
        };
        *ps.get_mut(rdca.alpha.unwrap()) = Tensor::scalar(alpha);
        *ps.get_mut(rdca.beta.unwrap()) = Tensor::scalar(beta);
        let x = uniform(&[c, h, w], -1.0, 1.0, &mut r);
        let got = apply(&ps, &x, |g, v| rdca.forward(g, v)).unwrap();
        let branch = apply(&ps, &x, |g, v| rdca.branch(g, v)).unwrap();
        let want = Tensor::from_fn(x.shape(), |i| alpha * x.data()[i] + beta * branch.data()[i]);
        assert_close(&got, &want, &format!("seed {seed}"));
        // the branch itself: dense loop, channel attention, 1x1 fusion
        let mut feats = vec![x.clone()];
        for layer in &rdca.layers {
            let inp = concat(&feats.iter().collect::<Vec<_>>());
            feats.push(layer_ref(&ps, layer, &inp));
        }
        let dense = concat(&feats.iter().collect::<Vec<_>>());
        let attended = ca_ref(&ps, rdca.attention.as_ref().unwrap(), &dense);
        assert_close(&branch, &layer_ref(&ps, &rdca.fusion, &attended), &format!("branch seed {seed}"));
    }
}

#[test]
fn agrd_is_the_composition_of_its_parts() {
    for seed in 0..INSTANCES {
        let mut r = rng(600 + seed);
        let c = 2 * r.random_range(1..=4);
        let (h, w) = (r.random_range(2..=6), r.random_range(2..=6));
        let n_rdb = r.random_range(1..=3);
        let mut ps = ParamSet::new();
        let agrd = Agrd::new(&mut ps, &mut r, "agrd", c, 4, 2, n_rdb, 2, 2, 3).unwrap();
        let x = uniform(&[c, h, w], -1.0, 1.0, &mut r);
        let got = apply(&ps, &x, |g, v| agrd.forward(g, v)).unwrap();
        let mut y = layer_ref(&ps, &agrd.reduce, &x);
        y = ca_ref(&ps, &agrd.ca, &y);
        y = sa_ref(&ps, &agrd.sa, &y);
        for rdb in &agrd.rdbs {
            y = rdb_ref(&ps, rdb, &y);
        }
        y = layer_ref(&ps, &agrd.restore, &y);
        assert_close(&got, &y, &format!("seed {seed}"));
    }
}

#[test]
fn head_is_two_conv_stacks() {
    for seed in 0..INSTANCES {
        let mut r = rng(700 + seed);
        let cfg = ModelConfig {
            feat: r.random_range(1..=8),
            head_width: r.random_range(1..=8),
            num_classes: r.random_range(1..=3),
            ..ModelConfig::desk()
        };
        let (h, w) = (r.random_range(1..=6), r.random_range(1..=6));
        let mut ps = ParamSet::new();
        let head = Head::new(&mut ps, &mut r, "head", &cfg, 4);
        let x = uniform(&[cfg.feat, h, w], -1.0, 1.0, &mut r);
        let out = head.head_forward(&ps, &x).unwrap();
        let reg = layer_ref(&ps, &head.reg_out, &layer_ref(&ps, &head.reg_hidden, &x));
        let cls = layer_ref(&ps, &head.cls_out, &layer_ref(&ps, &head.cls_hidden, &x));
        assert_close(&out.reg, &reg.channels(0, 4), "reg");
        assert_close(&out.obj, &reg.channels(4, 1), "obj");
        assert_close(&out.cls, &cls, "cls");
        assert_eq!(out.stride, 4);
    }
}

fn tiny_model(seed: u64, ablation: Ablation) -> Model {
    let cfg = ModelConfig {
        backbone_width: 4,
        feat: 4,
        growth: 2,
        dense_layers: 2,
        deform_groups: 2,
        agrd_blocks: 1,
        rdb_per_agrd: 1,
        rdca_blocks: 1,
        ca_reduction: 2,
        ca_min_hidden: 2,
        sa_kernel: 3,
        head_width: 4,
        ..ModelConfig::desk()
    };
    let mut m = Model::new(cfg, ablation, seed).unwrap();
    // move the zero-initialised offset heads off their special point
    let mut r = rng(seed);
    let ids: Vec<_> = m.params.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for v in m.params.get_mut(id).data_mut() {
            *v += r.random_range(-0.05..0.05);
        }
    }
    m
}

#[test]
fn propagation_matches_unrolled_recursion() {
    for seed in 0..INSTANCES {
        let model = tiny_model(seed, Ablation::full());
        let mut r = rng(800 + seed);
        let frames: Vec<Frame> = (0..3)
            .map(|i| Frame::new(uniform(&[1, 16, 16], 0.0, 1.0, &mut r), i).unwrap())
            .collect();
        let clip = pad_clip(frames.clone(), 3).unwrap();
        let got = model.bird_forward(&clip).unwrap();

        let ps = &model.params;
        let mut g = Graph::new(ps);
        let e: Vec<_> = frames
            .iter()
            .map(|f| {
                let v = g.input(f.pixels.clone());
                model.backbone.forward(&mut g, v).unwrap()
            })
            .collect();
        let zero = g.input(Tensor::zeros(g.value(e[0]).shape()));
        let bb = model.backward_branch.as_ref().unwrap();
        let fb = model.forward_branch.as_ref().unwrap();
        let bl = |g: &mut Graph, p, c, n| bb.local.forward(g, p, c, n).unwrap().fused;
        let fl = |g: &mut Graph, p, c, n| fb.local.forward(g, p, c, n).unwrap().fused;
        let bg = |g: &mut Graph, l, s| bb.global.as_ref().unwrap().forward(g, l, s).unwrap();
        let fg = |g: &mut Graph, l, s| fb.global.as_ref().unwrap().forward(g, l, s).unwrap();

        let b2 = bl(&mut g, e[1], e[2], e[2]);
        let big_b2 = bg(&mut g, b2, zero);
        let b1 = bl(&mut g, e[0], e[1], e[2]);
        let big_b1 = bg(&mut g, b1, big_b2);
        let b0 = bl(&mut g, e[0], e[0], e[1]);
        let big_b0 = bg(&mut g, b0, big_b1);
        let bs = [big_b0, big_b1, big_b2];
        let f0 = fl(&mut g, bs[0], bs[0], bs[1]);
        let big_f0 = fg(&mut g, f0, zero);
        let f1 = fl(&mut g, bs[0], bs[1], bs[2]);
        let big_f1 = fg(&mut g, f1, big_f0);
        let f2 = fl(&mut g, bs[1], bs[2], bs[2]);
        let big_f2 = fg(&mut g, f2, big_f1);
        let fs = [big_f0, big_f1, big_f2];
        for i in 0..3 {
            let cat = g.concat(&[e[i], bs[i], fs[i]]).unwrap();
            let fused = model.fuse.forward(&mut g, cat).unwrap();
            assert_close(&got.extracted[i], g.value(e[i]), "extracted");
            assert_close(&got.local_backward[i], g.value([b0, b1, b2][i]), "local backward");
            assert_close(&got.backward[i], g.value(bs[i]), "backward");
            assert_close(&got.local_forward[i], g.value([f0, f1, f2][i]), "local forward");
            assert_close(&got.forward[i], g.value(fs[i]), "forward");
            assert_close(&got.fused[i], g.value(fused), "fused");
        }
    }
}

#[test]
fn matching_matches_exhaustive_iou() {
    for seed in 0..INSTANCES {
        let mut r = rng(900 + seed);
        for f in random_frames(&mut r) {
            let hits = match_ref(&f.preds, &f.gts, 0.5);
            let tp = hits.iter().filter(|&&h| h).count();
            let c = match_detections(&f.preds, &f.gts, 0.5);
            assert_eq!((c.tp, c.fp, c.fn_), (tp, f.preds.len() - tp, f.gts.len() - tp), "seed {seed}");
        }
    }
}

#[test]
fn average_precision_matches_threshold_sweep() {
    let mut done = 0;
    let mut seed = 0;
    while done < INSTANCES {
        let mut r = rng(1000 + seed);
        seed += 1;
        let frames = random_frames(&mut r);
        if frames.iter().all(|f| f.gts.is_empty()) {
            assert!(average_precision(&frames, 0.5).is_err());
            continue;
        }
        let (ap, _) = average_precision(&frames, 0.5).unwrap();
        let want = ap_ref(&frames, 0.5);
        assert!((ap - want).abs() < 1e-12, "seed {seed}: {ap} vs {want}");
        done += 1;
    }
}
