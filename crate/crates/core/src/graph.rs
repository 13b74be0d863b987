//! Reverse-mode differentiation over a recorded tape of tensor ops.
//!
//! A [`Graph`] borrows the model's [`ParamSet`] read-only, records every op
//! applied during a forward pass, and [`Graph::backward`] walks the tape in
//! reverse accumulating analytic gradients. Each op's adjoint is hand-written
//! and checked against central differences in the gradient test suite.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, DeformGeom, DeformGrads};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An op whose forward value is computed outside the graph and whose adjoint
/// is supplied by the implementor.
pub trait CustomOp: std::fmt::Debug {
    /// Gradients w.r.t. each input, given the inputs and the output gradient.
    fn backward(&self, inputs: &[&Tensor], out_grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    DeformConv {
        x: Var,
        offsets: Var,
        masks: Var,
        w: Var,
        b: Option<Var>,
        geom: DeformGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    MulScalar {
        x: Var,
        s: Var,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    GlobalAvgPool(Var),
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    ScaleChannels {
        x: Var,
        s: Var,
    },
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    ScaleSpatial {
        x: Var,
        s: Var,
    },
    L1Mean(Var, Var),
    WeightedSum(Vec<(Var, f64)>),
    DotConst {
        x: Var,
        r: Tensor,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => self.nodes[v.0].value.as_ref().expect("non-param node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient is accumulated for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, wd) = self.value(x).chw();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] {
            return Err(Error::config(format!(
                "conv weight {ws:?} does not fit input with {cin} channels"
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [ws[0]] {
                return Err(Error::config(format!(
                    "conv bias {:?} does not match {} outputs",
                    self.value(b).shape(),
                    ws[0]
                )));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            cout: ws[0],
            k: ws[2],
            stride,
            pad,
        };
        if h + 2 * pad < geom.k || wd + 2 * pad < geom.k {
            return Err(Error::config("conv kernel larger than padded input"));
        }
        let (ho, wo) = geom.out_hw();
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(&[geom.cout, ho, wo], out)?,
            Op::Conv { x, w, b, geom },
            rg,
        ))
    }

    /// Modulated deformable convolution with `groups` offset groups.
    pub fn deform_conv(
        &mut self,
        x: Var,
        offsets: Var,
        masks: Var,
        w: Var,
        b: Option<Var>,
        groups: usize,
    ) -> Result<Var> {
        let (cin, h, wd) = self.value(x).chw();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::config(format!(
                "deformable weight {ws:?} does not fit input with {cin} channels (odd square kernel required)"
            )));
        }
        if groups == 0 || cin % groups != 0 {
            return Err(Error::config(format!(
                "{cin} channels not divisible into {groups} deformable groups"
            )));
        }
        let geom = DeformGeom {
            cin,
            h,
            w: wd,
            cout: ws[0],
            k: ws[2],
            groups,
        };
        let want_off = [geom.offset_channels(), h, wd];
        let want_mask = [geom.mask_channels(), h, wd];
        if self.value(offsets).shape() != want_off || self.value(masks).shape() != want_mask {
            return Err(Error::config(format!(
                "deformable params {:?}/{:?}, expected {want_off:?}/{want_mask:?}",
                self.value(offsets).shape(),
                self.value(masks).shape()
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [geom.cout] {
                return Err(Error::config("deformable bias does not match outputs"));
            }
        }
        let out = kernels::deform_conv_forward(
            &geom,
            self.value(x).data(),
            self.value(offsets).data(),
            self.value(masks).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = [x, offsets, masks, w].iter().any(|&v| self.rg(v)) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(&[geom.cout, h, wd], out)?,
            Op::DeformConv {
                x,
                offsets,
                masks,
                w,
                b,
                geom,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::config(format!(
                "add shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `x · s` for a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::config("mul_scalar expects a one-element factor"));
        }
        let k = self.value(s).item();
        let out = self.value(x).map(|v| v * k);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::MulScalar { x, s }, rg))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&vals)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (c, _, _) = self.value(x).chw();
        if start + len > c {
            return Err(Error::config(format!(
                "channel slice {start}..{} out of {c}",
                start + len
            )));
        }
        let out = self.value(x).channels(start, len);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Slice { x, start }, rg))
    }

    /// Spatial mean per channel: `c×h×w → [c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.chw();
        let hw = (h * w) as f64;
        let out: Vec<f64> = t.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(&[c], out).unwrap(), Op::GlobalAvgPool(x), rg)
    }

    /// Spatial max per channel: `c×h×w → [c]`.
    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.chw();
        let mut out = Vec::with_capacity(c);
        let mut argmax = Vec::with_capacity(c);
        for p in t.data().chunks(h * w) {
            let (i, v) = p
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
            out.push(v);
            argmax.push(i);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[c], out).unwrap(), Op::GlobalMaxPool { x, argmax }, rg)
    }

    /// Dense layer on a vector: `w: m×n`, `b: [m]`, `x: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ws = self.value(w).shape().to_vec();
        let n = self.value(x).len();
        if ws.len() != 2 || ws[1] != n || self.value(b).shape() != [ws[0]] {
            return Err(Error::config(format!(
                "linear weight {ws:?} / bias {:?} do not fit input of length {n}",
                self.value(b).shape()
            )));
        }
        let mut out = self.value(b).data().to_vec();
        gemm(ws[0], n, 1, 1.0, self.value(w).data(), self.value(x).data(), &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(&[ws[0]], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Multiplies channel `c` of `x` by `s[c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw();
        if self.value(s).len() != c {
            return Err(Error::config("scale_channels length mismatch"));
        }
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for (p, k) in out.data_mut().chunks_mut(h * w).zip(&sv) {
            p.iter_mut().for_each(|v| *v *= k);
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleChannels { x, s }, rg))
    }

    /// Mean across channels: `c×h×w → 1×h×w`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.chw();
        let hw = h * w;
        let mut out = vec![0.0; hw];
        for p in t.data().chunks(hw) {
            out.iter_mut().zip(p).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= c as f64);
        let rg = self.rg(x);
        self.push(Tensor::new(&[1, h, w], out).unwrap(), Op::ChannelMean(x), rg)
    }

    /// Max across channels: `c×h×w → 1×h×w`.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (_, h, w) = t.chw();
        let hw = h * w;
        let mut out = vec![f64::NEG_INFINITY; hw];
        let mut argmax = vec![0; hw];
        for (ci, p) in t.data().chunks(hw).enumerate() {
            for i in 0..hw {
                if p[i] > out[i] {
                    out[i] = p[i];
                    argmax[i] = ci;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[1, h, w], out).unwrap(), Op::ChannelMax { x, argmax }, rg)
    }

    /// Multiplies every channel of `x` by the `1×h×w` map `s`.
    pub fn scale_spatial(&mut self, x: Var, s: Var) -> Result<Var> {
        let (_, h, w) = self.value(x).chw();
        if self.value(s).shape() != [1, h, w] {
            return Err(Error::config("scale_spatial map mismatch"));
        }
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for p in out.data_mut().chunks_mut(h * w) {
            p.iter_mut().zip(&sv).for_each(|(v, k)| *v *= k);
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleSpatial { x, s }, rg))
    }

    /// Mean absolute difference, a scalar.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::input(format!(
                "L1 shape mismatch {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).abs()).sum();
        let out = Tensor::scalar(s / ta.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::L1Mean(a, b), rg))
    }

    /// `Σ wᵢ·xᵢ` over one-element vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let s: f64 = terms.iter().map(|&(v, k)| k * self.value(v).item()).sum();
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// `Σ x ⊙ r` for a constant `r`; used to seed arbitrary upstream gradients.
    pub fn dot_const(&mut self, x: Var, r: Tensor) -> Result<Var> {
        if self.value(x).shape() != r.shape() {
            return Err(Error::config("dot_const shape mismatch"));
        }
        let s: f64 = self.value(x).data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::DotConst { x, r }, rg))
    }

    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Gradients of the one-element `loss` w.r.t. every node that requires them.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Gradients { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backward_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = gout.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv { x, w, b, geom } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = self.acc(grads, *x).map(|d| d.to_vec());
                let mut dw = self.acc(grads, *w).map(|d| d.to_vec());
                let mut db = b.and_then(|b| self.acc(grads, b)).map(|d| d.to_vec());
                kernels::conv2d_backward(geom, xv, wv, g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                self.store(grads, *x, dx);
                self.store(grads, *w, dw);
                if let Some(b) = b {
                    self.store(grads, *b, db);
                }
            }
            Op::DeformConv {
                x,
                offsets,
                masks,
                w,
                b,
                geom,
            } => {
                let mut dx = self.acc(grads, *x).map(|d| d.to_vec());
                let mut doff = self.acc(grads, *offsets).map(|d| d.to_vec());
                let mut dm = self.acc(grads, *masks).map(|d| d.to_vec());
                let mut dw = self.acc(grads, *w).map(|d| d.to_vec());
                let mut db = b.and_then(|b| self.acc(grads, b)).map(|d| d.to_vec());
                kernels::deform_conv_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*offsets).data(),
                    self.value(*masks).data(),
                    self.value(*w).data(),
                    g,
                    DeformGrads {
                        dx: dx.as_deref_mut(),
                        doffsets: doff.as_deref_mut(),
                        dmasks: dm.as_deref_mut(),
                        dw: dw.as_deref_mut(),
                        db: db.as_deref_mut(),
                    },
                );
                self.store(grads, *x, dx);
                self.store(grads, *offsets, doff);
                self.store(grads, *masks, dm);
                self.store(grads, *w, dw);
                if let Some(b) = b {
                    self.store(grads, *b, db);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    for j in 0..d.len() {
                        if xv[j] > 0.0 {
                            d[j] += g[j];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.as_ref().unwrap().data();
                if let Some(d) = self.acc(grads, *x) {
                    for j in 0..d.len() {
                        d[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::MulScalar { x, s } => {
                let k = self.value(*s).item();
                let xv = self.value(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += k * g);
                }
                if let Some(d) = self.acc(grads, *s) {
                    d[0] += xv.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(d) = self.acc(grads, p) {
                        d.iter_mut().zip(&g[off..off + n]).for_each(|(d, g)| *d += g);
                    }
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let (_, h, w) = self.value(*x).chw();
                let off = start * h * w;
                if let Some(d) = self.acc(grads, *x) {
                    d[off..off + g.len()].iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::GlobalAvgPool(x) => {
                let (_, h, w) = self.value(*x).chw();
                let hw = h * w;
                if let Some(d) = self.acc(grads, *x) {
                    for (ci, p) in d.chunks_mut(hw).enumerate() {
                        let v = g[ci] / hw as f64;
                        p.iter_mut().for_each(|d| *d += v);
                    }
                }
            }
            Op::GlobalMaxPool { x, argmax } => {
                let (_, h, w) = self.value(*x).chw();
                if let Some(d) = self.acc(grads, *x) {
                    for (ci, &a) in argmax.iter().enumerate() {
                        d[ci * h * w + a] += g[ci];
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.value(*w).shape();
                let (m, n) = (ws[0], ws[1]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(d) = self.acc(grads, *x) {
                    gemm_tn(n, m, 1, 1.0, wv, g, d);
                }
                if let Some(d) = self.acc(grads, *w) {
                    gemm_nt(m, 1, n, 1.0, g, xv, d);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::ScaleChannels { x, s } => {
                let (_, h, w) = self.value(*x).chw();
                let hw = h * w;
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                if let Some(d) = self.acc(grads, *x) {
                    for (ci, p) in d.chunks_mut(hw).enumerate() {
                        p.iter_mut().zip(&g[ci * hw..]).for_each(|(d, g)| *d += sv[ci] * g);
                    }
                }
                if let Some(d) = self.acc(grads, *s) {
                    for (ci, ds) in d.iter_mut().enumerate() {
                        *ds += xv[ci * hw..(ci + 1) * hw]
                            .iter()
                            .zip(&g[ci * hw..(ci + 1) * hw])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
            }
            Op::ChannelMean(x) => {
                let (c, h, w) = self.value(*x).chw();
                let hw = h * w;
                if let Some(d) = self.acc(grads, *x) {
                    for p in d.chunks_mut(hw) {
                        p.iter_mut().zip(g).for_each(|(d, g)| *d += g / c as f64);
                    }
                }
            }
            Op::ChannelMax { x, argmax } => {
                let (_, h, w) = self.value(*x).chw();
                let hw = h * w;
                if let Some(d) = self.acc(grads, *x) {
                    for (p, &ci) in argmax.iter().enumerate() {
                        d[ci * hw + p] += g[p];
                    }
                }
            }
            Op::ScaleSpatial { x, s } => {
                let (_, h, w) = self.value(*x).chw();
                let hw = h * w;
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                if let Some(d) = self.acc(grads, *x) {
                    for (ci, p) in d.chunks_mut(hw).enumerate() {
                        for j in 0..hw {
                            p[j] += sv[j] * g[ci * hw + j];
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *s) {
                    for (ci, xp) in xv.chunks(hw).enumerate() {
                        for j in 0..hw {
                            d[j] += xp[j] * g[ci * hw + j];
                        }
                    }
                }
            }
            Op::L1Mean(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let k = g[0] / av.len() as f64;
                let sign: Vec<f64> = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| if x > y { k } else if x < y { -k } else { 0.0 })
                    .collect();
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(&sign).for_each(|(d, s)| *d += s);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(&sign).for_each(|(d, s)| *d -= s);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, k) in terms {
                    if let Some(d) = self.acc(grads, v) {
                        d[0] += k * g[0];
                    }
                }
            }
            Op::DotConst { x, r } => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(r.data()).for_each(|(d, r)| *d += g[0] * r);
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&vals, gout);
                for (&v, gv) in inputs.iter().zip(gs) {
                    if let (Some(gv), Some(d)) = (gv, self.acc(grads, v)) {
                        d.iter_mut().zip(gv.data()).for_each(|(d, g)| *d += g);
                    }
                }
            }
        }
    }

    fn store(&self, grads: &mut [Option<Tensor>], v: Var, d: Option<Vec<f64>>) {
        if let (Some(d), Some(slot)) = (d, grads[v.0].as_mut()) {
            slot.data_mut().copy_from_slice(&d);
        }
    }

    /// Gradients aligned with the parameter set; `None` for unused parameters.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.param_vars
            .iter()
            .map(|v| v.and_then(|v| grads.of(v).cloned()))
            .collect()
    }
}
