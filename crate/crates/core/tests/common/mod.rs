//! Shared helpers for the integration tests: a central-difference gradient
//! checker and small random-instance builders.

#![allow(dead_code)]

use bird::graph::{Graph, Var};
use bird::params::ParamSet;
use bird::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;
/// Coordinates checked per tensor; smaller tensors are checked exhaustively.
pub const MAX_COORDS: usize = 48;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradReport {
    pub fn merge(&mut self, other: &GradReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst.clone();
        }
    }

    pub fn skip_fraction(&self) -> f64 {
        self.skipped as f64 / (self.checked + self.skipped).max(1) as f64
    }

    pub fn ok(&self) -> bool {
        self.max_rel < REL_TOL && self.skip_fraction() < 0.01 && self.checked > 0
    }
}

pub type Build<'a> = dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var> + 'a;

fn loss(ps: &ParamSet, inputs: &[Tensor], r: &Tensor, f: &Build<'_>) -> f64 {
    let mut g = Graph::new(ps);
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = f(&mut g, &vars).expect("forward");
    let l = g.dot_const(y, r.clone()).expect("projection");
    g.value(l).item()
}

fn coords<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    if n <= MAX_COORDS {
        (0..n).collect()
    } else {
        (0..MAX_COORDS).map(|_| rng.random_range(0..n)).collect()
    }
}

fn compare(report: &mut GradReport, label: String, analytic: f64, mut eval: impl FnMut(f64) -> f64) {
    let fd = |e: &mut dyn FnMut(f64) -> f64, h: f64| (e(h) - e(-h)) / (2.0 * h);
    let n1 = fd(&mut eval, FD_STEP);
    let n2 = fd(&mut eval, FD_STEP / 2.0);
    // a kink inside the stencil shows up as disagreement between the two steps
    if (n1 - n2).abs() > 1e-6 * n1.abs().max(1.0) {
        report.skipped += 1;
        return;
    }
    report.checked += 1;
    let rel = (analytic - n1).abs() / analytic.abs().max(n1.abs()).max(REL_FLOOR);
    if rel > report.max_rel {
        report.max_rel = rel;
        report.worst = format!("{label}: analytic {analytic:e}, numeric {n1:e}");
    }
}

/// Checks the gradient of `<R, f(inputs)>` for a fixed random `R` w.r.t. every
/// input tensor and every parameter in `ps`.
pub fn gradcheck(ps: &ParamSet, inputs: &[Tensor], seed: u64, f: &Build<'_>) -> GradReport {
    let mut rng = rng(seed ^ 0x9e37_79b9);
    let mut g = Graph::new(ps);
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let y = f(&mut g, &vars).expect("forward");
    let r = Tensor::uniform(g.value(y).shape(), -1.0, 1.0, &mut rng);
    let l = g.dot_const(y, r.clone()).expect("projection");
    let grads = g.backward(l);
    let input_grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.of(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let param_grads = g.param_grads(&grads);
    drop(g);

    let mut report = GradReport::default();
    for (i, t) in inputs.iter().enumerate() {
        for j in coords(t.len(), &mut rng) {
            let a = input_grads[i].data()[j];
            compare(&mut report, format!("input {i}[{j}]"), a, |h| {
                let mut pert = inputs.to_vec();
                pert[i].data_mut()[j] += h;
                loss(ps, &pert, &r, f)
            });
        }
    }
    let ids: Vec<_> = ps.iter().map(|(id, name, _)| (id, name.to_string())).collect();
    for (k, (id, name)) in ids.into_iter().enumerate() {
        let n = ps.get(id).len();
        let zero = Tensor::zeros(ps.get(id).shape());
        let ga = param_grads[k].as_ref().unwrap_or(&zero);
        for j in coords(n, &mut rng) {
            let a = ga.data()[j];
            compare(&mut report, format!("{name}[{j}]"), a, |h| {
                let mut p = ps.clone();
                p.get_mut(id).data_mut()[j] += h;
                loss(&p, inputs, &r, f)
            });
        }
    }
    report
}

/// Uniform values whose fractional parts stay at least `margin` away from an
/// integer, so bilinear sampling positions never sit on a cell boundary.
pub fn off_grid<R: Rng>(shape: &[usize], lo: f64, hi: f64, margin: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.random_range(lo..hi);
        let frac = v - v.floor();
        if frac > margin && frac < 1.0 - margin {
            break v;
        }
    })
}

pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

pub mod reference;

pub mod suites {
    use super::*;
    use bird::blocks::{Agrd, ChannelAttention, Rdb, SpatialAttention};
    use bird::config::ModelConfig;
    use bird::detection::{detection_loss_var, GroundTruth, Head, HeadVars};
    use bird::bbox::BBox;
    use bird::fusion::{Gtmf, Ltmf};

    pub const INSTANCES: u64 = 5;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
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
        }
    }

    /// Replaces every parameter with fresh uniform values so that zero-init
    /// biases and heads are exercised away from their special points.
    fn jitter<R: Rng>(ps: &mut ParamSet, scale: f64, rng: &mut R) {
        let ids: Vec<_> = ps.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            for v in ps.get_mut(id).data_mut() {
                *v += rng.random_range(-scale..scale);
            }
        }
    }

    fn run(seed_base: u64, mut one: impl FnMut(u64) -> GradReport) -> GradReport {
        let mut total = GradReport::default();
        for s in 0..INSTANCES {
            total.merge(&one(seed_base + s));
        }
        total
    }

    pub fn conv() -> GradReport {
        run(100, |seed| {
            let mut r = rng(seed);
            let (cin, cout) = (r.random_range(1..=4), r.random_range(1..=4));
            let k = [1, 3, 5][r.random_range(0..3)];
            let stride = r.random_range(1..=2);
            let (h, w) = (r.random_range(4..=8), r.random_range(4..=8));
            let inputs = vec![
                uniform(&[cin, h, w], -1.0, 1.0, &mut r),
                uniform(&[cout, cin, k, k], -0.5, 0.5, &mut r),
                uniform(&[cout], -0.5, 0.5, &mut r),
            ];
            let ps = ParamSet::new();
            gradcheck(&ps, &inputs, seed, &|g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, k / 2))
        })
    }

    /// A 1×1 deformable conv is a masked bilinear read at the offset position.
    pub fn bilinear() -> GradReport {
        run(200, |seed| {
            let mut r = rng(seed);
            let c = r.random_range(1..=4);
            let (h, w) = (r.random_range(3..=8), r.random_range(3..=8));
            let inputs = vec![
                uniform(&[c, h, w], -1.0, 1.0, &mut r),
                off_grid(&[2, h, w], -2.5, 2.5, 0.05, &mut r),
                uniform(&[1, h, w], 0.1, 1.0, &mut r),
                uniform(&[c, c, 1, 1], -1.0, 1.0, &mut r),
            ];
            let ps = ParamSet::new();
            gradcheck(&ps, &inputs, seed, &|g, v| g.deform_conv(v[0], v[1], v[2], v[3], None, 1))
        })
    }

    pub fn deform_conv() -> GradReport {
        run(300, |seed| {
            let mut r = rng(seed);
            let groups = r.random_range(1..=2);
            let cin = groups * r.random_range(1..=4);
            let cout = r.random_range(1..=4);
            let (h, w) = (r.random_range(4..=8), r.random_range(4..=8));
            let k = 3;
            let inputs = vec![
                uniform(&[cin, h, w], -1.0, 1.0, &mut r),
                off_grid(&[groups * 2 * k * k, h, w], -1.0, 1.0, 0.05, &mut r),
                uniform(&[groups * k * k, h, w], 0.05, 0.95, &mut r),
                uniform(&[cout, cin, k, k], -0.5, 0.5, &mut r),
                uniform(&[cout], -0.5, 0.5, &mut r),
            ];
            let ps = ParamSet::new();
            gradcheck(&ps, &inputs, seed, &|g, v| {
                g.deform_conv(v[0], v[1], v[2], v[3], Some(v[4]), groups)
            })
        })
    }

    pub fn channel_attention() -> GradReport {
        run(400, |seed| {
            let mut r = rng(seed);
            let c = r.random_range(2..=8);
            let (h, w) = (r.random_range(2..=8), r.random_range(2..=8));
            let mut ps = ParamSet::new();
            let ca = ChannelAttention::new(&mut ps, &mut r, "ca", c, 2, 2);
            jitter(&mut ps, 0.3, &mut r);
            let inputs = vec![uniform(&[c, h, w], -1.0, 1.0, &mut r)];
            gradcheck(&ps, &inputs, seed, &|g, v| ca.forward(g, v[0]))
        })
    }

    pub fn spatial_attention() -> GradReport {
        run(500, |seed| {
            let mut r = rng(seed);
            let c = r.random_range(1..=8);
            let (h, w) = (r.random_range(2..=8), r.random_range(2..=8));
            let k = [3, 7][r.random_range(0..2)];
            let mut ps = ParamSet::new();
            let sa = SpatialAttention::new(&mut ps, &mut r, "sa", k);
            jitter(&mut ps, 0.3, &mut r);
            let inputs = vec![uniform(&[c, h, w], -1.0, 1.0, &mut r)];
            gradcheck(&ps, &inputs, seed, &|g, v| sa.forward(g, v[0]))
        })
    }

    pub fn rdb() -> GradReport {
        run(600, |seed| {
            let mut r = rng(seed);
            let c = r.random_range(1..=4);
            let growth = r.random_range(1..=2);
            let layers = r.random_range(1..=3);
            let (h, w) = (r.random_range(3..=6), r.random_range(3..=6));
            let mut ps = ParamSet::new();
            let block = Rdb::new(&mut ps, &mut r, "rdb", c, growth, layers);
            jitter(&mut ps, 0.2, &mut r);
            let inputs = vec![uniform(&[c, h, w], -1.0, 1.0, &mut r)];
            gradcheck(&ps, &inputs, seed, &|g, v| block.forward(g, v[0]))
        })
    }

    pub fn rdca() -> GradReport {
        run(700, |seed| {
            let mut r = rng(seed);
            let c = r.random_range(2..=4);
            let (h, w) = (r.random_range(3..=6), r.random_range(3..=6));
            let mut ps = ParamSet::new();
            let block = Rdb::new_rdca(&mut ps, &mut r, "rdca", c, 2, 2, 2, 2);
            jitter(&mut ps, 0.2, &mut r);
            let inputs = vec![uniform(&[c, h, w], -1.0, 1.0, &mut r)];
            gradcheck(&ps, &inputs, seed, &|g, v| block.forward(g, v[0]))
        })
    }

    pub fn agrd() -> GradReport {
        run(800, |seed| {
            let mut r = rng(seed);
            let c = 2 * r.random_range(1..=3);
            let (h, w) = (r.random_range(3..=6), r.random_range(3..=6));
            let n_rdb = r.random_range(1..=2);
            let mut ps = ParamSet::new();
            let block = Agrd::new(&mut ps, &mut r, "agrd", c, 2, 2, n_rdb, 2, 2, 3).unwrap();
            jitter(&mut ps, 0.2, &mut r);
            let inputs = vec![uniform(&[c, h, w], -1.0, 1.0, &mut r)];
            gradcheck(&ps, &inputs, seed, &|g, v| block.forward(g, v[0]))
        })
    }

    pub fn ltmf() -> GradReport {
        run(900, |seed| {
            let mut r = rng(seed);
            let cfg = tiny_model();
            let (h, w) = (r.random_range(3..=5), r.random_range(3..=5));
            let mut ps = ParamSet::new();
            let m = Ltmf::new(&mut ps, &mut r, "ltmf", &cfg).unwrap();
            jitter(&mut ps, 0.2, &mut r);
            let inputs: Vec<Tensor> = (0..3).map(|_| uniform(&[cfg.feat, h, w], -1.0, 1.0, &mut r)).collect();
            gradcheck(&ps, &inputs, seed, &|g, v| Ok(m.forward(g, v[0], v[1], v[2])?.fused))
        })
    }

    pub fn gtmf() -> GradReport {
        run(1000, |seed| {
            let mut r = rng(seed);
            let cfg = tiny_model();
            let (h, w) = (r.random_range(3..=5), r.random_range(3..=5));
            let mut ps = ParamSet::new();
            let m = Gtmf::new(&mut ps, &mut r, "gtmf", &cfg);
            jitter(&mut ps, 0.2, &mut r);
            let inputs: Vec<Tensor> = (0..2).map(|_| uniform(&[cfg.feat, h, w], -1.0, 1.0, &mut r)).collect();
            gradcheck(&ps, &inputs, seed, &|g, v| m.forward(g, v[0], v[1]))
        })
    }

    pub fn head() -> GradReport {
        run(1100, |seed| {
            let mut r = rng(seed);
            let cfg = tiny_model();
            let (h, w) = (r.random_range(2..=5), r.random_range(2..=5));
            let mut ps = ParamSet::new();
            let m = Head::new(&mut ps, &mut r, "head", &cfg, 4);
            jitter(&mut ps, 0.2, &mut r);
            let inputs = vec![uniform(&[cfg.feat, h, w], -1.0, 1.0, &mut r)];
            gradcheck(&ps, &inputs, seed, &|g, v| {
                let HeadVars { reg, obj, cls } = m.forward(g, v[0])?;
                g.concat(&[reg, obj, cls])
            })
        })
    }

    pub fn detection_loss() -> GradReport {
        run(1200, |seed| {
            let mut r = rng(seed);
            let stride = 4;
            let (h, w) = (r.random_range(3..=6), r.random_range(3..=6));
            let nc = r.random_range(1..=2);
            let n_gt = r.random_range(0..=3);
            let gt: Vec<GroundTruth> = (0..n_gt)
                .map(|_| {
                    let (bw, bh) = (r.random_range(3.0..9.0), r.random_range(3.0..9.0));
                    let cx = r.random_range(bw / 2.0..(w * stride) as f64 - bw / 2.0);
                    let cy = r.random_range(bh / 2.0..(h * stride) as f64 - bh / 2.0);
                    GroundTruth {
                        bbox: BBox::new(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0),
                        class_id: r.random_range(0..nc),
                    }
                })
                .collect();
            let inputs = vec![
                uniform(&[4, h, w], -1.0, 1.0, &mut r),
                uniform(&[1, h, w], -3.0, 3.0, &mut r),
                uniform(&[nc, h, w], -3.0, 3.0, &mut r),
            ];
            let ps = ParamSet::new();
            gradcheck(&ps, &inputs, seed, &|g, v| {
                let head = HeadVars {
                    reg: v[0],
                    obj: v[1],
                    cls: v[2],
                };
                Ok(detection_loss_var(g, &head, stride, &gt, 5.0)?.0)
            })
        })
    }

    pub fn fusion_loss() -> GradReport {
        run(1300, |seed| {
            let mut r = rng(seed);
            let c = r.random_range(1..=8);
            let (h, w) = (r.random_range(2..=8), r.random_range(2..=8));
            let inputs = vec![
                uniform(&[c, h, w], -1.0, 1.0, &mut r),
                uniform(&[c, h, w], -1.0, 1.0, &mut r),
            ];
            let ps = ParamSet::new();
            gradcheck(&ps, &inputs, seed, &|g, v| g.l1_mean(v[0], v[1]))
        })
    }

    pub fn all() -> Vec<(&'static str, fn() -> GradReport)> {
        vec![
            ("conv", conv),
            ("bilinear", bilinear),
            ("deform_conv", deform_conv),
            ("channel_attention", channel_attention),
            ("spatial_attention", spatial_attention),
            ("rdb", rdb),
            ("rdca", rdca),
            ("agrd", agrd),
            ("ltmf", ltmf),
            ("gtmf", gtmf),
            ("head", head),
            ("detection_loss", detection_loss),
            ("fusion_loss", fusion_loss),
        ]
    }
}
