//! Differentiable building blocks: convolution, modulated deformable
//! convolution, CBAM-style channel/spatial attention, residual dense blocks
//! and their composites (AGRD, RDCA).
//!
//! Every block owns only [`ParamId`]s; the tensors live in a [`ParamSet`] and
//! a forward pass records onto a [`Graph`]. All blocks run at stride 1 and
//! preserve the spatial size of their input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::params::{fan_in_uniform, ParamId, ParamSet};
use crate::tensor::{FeatureMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    Linear,
}

fn init_bound(act: Act) -> f64 {
    // He-uniform for rectified layers, LeCun-uniform otherwise
    match act {
        Act::Relu => 6f64.sqrt(),
        Act::Linear => 3f64.sqrt(),
    }
}

/// A square convolution with bias and an optional ReLU.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub act: Act,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        act: Act,
    ) -> Self {
        let fan_in = cin * k * k;
        let mut w = fan_in_uniform(&[cout, cin, k, k], fan_in, rng);
        w.scale_assign(init_bound(act));
        let w = ps.add(format!("{name}.w"), w);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv {
            w,
            b,
            cin,
            cout,
            k,
            stride,
            act,
        }
    }

    /// Same layout, all-zero weights and bias.
    pub fn zeroed(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize, act: Act) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor::zeros(&[cout, cin, k, k]));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv {
            w,
            b,
            cin,
            cout,
            k,
            stride: 1,
            act,
        }
    }

    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.conv2d(x, w, Some(b), self.stride, self.pad())?;
        Ok(match self.act {
            Act::Relu => g.relu(y),
            Act::Linear => y,
        })
    }
}

/// Offsets and modulation masks for one deformable convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformParams {
    /// `groups·2K² × h × w`, `(dy, dx)` interleaved per tap.
    pub offsets: Tensor,
    /// `groups·K² × h × w`, each entry in `[0, 1]`.
    pub masks: Tensor,
    pub groups: usize,
    pub kernel: usize,
}

impl DeformParams {
    pub fn new(offsets: Tensor, masks: Tensor, groups: usize, kernel: usize) -> Result<Self> {
        let (oc, oh, ow) = offsets.chw();
        let (mc, mh, mw) = masks.chw();
        let kk = kernel * kernel;
        if oc != groups * 2 * kk || mc != groups * kk || (oh, ow) != (mh, mw) {
            return Err(Error::config(format!(
                "deformable params {:?}/{:?} do not match {groups} groups of {kernel}×{kernel}",
                offsets.shape(),
                masks.shape()
            )));
        }
        if masks.data().iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::config("modulation masks must lie in [0, 1]"));
        }
        Ok(DeformParams {
            offsets,
            masks,
            groups,
            kernel,
        })
    }

    /// Zero offsets and unit masks: the deformable conv degenerates to a plain one.
    pub fn identity(groups: usize, kernel: usize, h: usize, w: usize) -> Self {
        let kk = kernel * kernel;
        DeformParams {
            offsets: Tensor::zeros(&[groups * 2 * kk, h, w]),
            masks: Tensor::full(&[groups * kk, h, w], 1.0),
            groups,
            kernel,
        }
    }
}

/// Per-channel bilinear read of `feature` at row `y`, column `x`; zero outside.
pub fn bilinear_sample(feature: &FeatureMap, y: f64, x: f64) -> Vec<f64> {
    let (c, h, w) = feature.chw();
    (0..c)
        .map(|ch| kernels::bilinear(&feature.data()[ch * h * w..(ch + 1) * h * w], h, w, y, x))
        .collect()
}

/// Modulated deformable convolution on plain tensors (stride 1, same padding).
pub fn modulated_deform_conv(
    x: &FeatureMap,
    weight: &Tensor,
    bias: Option<&Tensor>,
    params: &DeformParams,
) -> Result<FeatureMap> {
    let ps = ParamSet::new();
    let mut g = Graph::new(&ps);
    let xv = g.input(x.clone());
    let off = g.input(params.offsets.clone());
    let m = g.input(params.masks.clone());
    let w = g.input(weight.clone());
    if weight.shape().len() != 4 || weight.shape()[2] != params.kernel {
        return Err(Error::config(format!(
            "weight {:?} does not match kernel {}",
            weight.shape(),
            params.kernel
        )));
    }
    let b = bias.map(|b| g.input(b.clone()));
    let y = g.deform_conv(xv, off, m, w, b, params.groups)?;
    Ok(g.value(y).clone())
}

/// Plain convolution on tensors, stride 1 and same padding.
pub fn conv_same(x: &FeatureMap, weight: &Tensor, bias: Option<&Tensor>) -> Result<FeatureMap> {
    let ps = ParamSet::new();
    let mut g = Graph::new(&ps);
    let xv = g.input(x.clone());
    let w = g.input(weight.clone());
    let b = bias.map(|b| g.input(b.clone()));
    let pad = weight.shape().get(2).copied().unwrap_or(1) / 2;
    let y = g.conv2d(xv, w, b, 1, pad)?;
    Ok(g.value(y).clone())
}

/// Runs a block on a concrete map without keeping the tape.
pub fn apply(
    ps: &ParamSet,
    x: &FeatureMap,
    f: impl FnOnce(&mut Graph<'_>, Var) -> Result<Var>,
) -> Result<FeatureMap> {
    let mut g = Graph::new(ps);
    let xv = g.input(x.clone());
    let y = f(&mut g, xv)?;
    Ok(g.value(y).clone())
}

/// CBAM channel attention: `x · σ(MLP(avg(x)) + MLP(max(x)))` with a shared
/// two-layer MLP.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub channels: usize,
    pub hidden: usize,
}

impl ChannelAttention {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        channels: usize,
        reduction: usize,
        min_hidden: usize,
    ) -> Self {
        let hidden = (channels / reduction).max(min_hidden);
        let mut w1 = fan_in_uniform(&[hidden, channels], channels, rng);
        w1.scale_assign(init_bound(Act::Relu));
        let mut w2 = fan_in_uniform(&[channels, hidden], hidden, rng);
        w2.scale_assign(init_bound(Act::Linear));
        ChannelAttention {
            fc1_w: ps.add(format!("{name}.fc1.w"), w1),
            fc1_b: ps.add(format!("{name}.fc1.b"), Tensor::zeros(&[hidden])),
            fc2_w: ps.add(format!("{name}.fc2.w"), w2),
            fc2_b: ps.add(format!("{name}.fc2.b"), Tensor::zeros(&[channels])),
            channels,
            hidden,
        }
    }

    fn mlp(&self, g: &mut Graph<'_>, v: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            g.param(self.fc1_w),
            g.param(self.fc1_b),
            g.param(self.fc2_w),
            g.param(self.fc2_b),
        );
        let h = g.linear(v, w1, b1)?;
        let h = g.relu(h);
        g.linear(h, w2, b2)
    }

    /// The per-channel factors in `(0, 1)`.
    pub fn scales(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (c, _, _) = g.value(x).chw();
        if c != self.channels {
            return Err(Error::config(format!(
                "channel attention built for {} channels, got {c}",
                self.channels
            )));
        }
        let avg = g.global_avg_pool(x);
        let max = g.global_max_pool(x);
        let a = self.mlp(g, avg)?;
        let m = self.mlp(g, max)?;
        let s = g.add(a, m)?;
        Ok(g.sigmoid(s))
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let s = self.scales(g, x)?;
        g.scale_channels(x, s)
    }
}

/// CBAM spatial attention: `x · σ(conv([mean_c(x); max_c(x)]))`.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: Conv,
}

impl SpatialAttention {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, rng: &mut R, name: &str, kernel: usize) -> Self {
        SpatialAttention {
            conv: Conv::new(ps, rng, &format!("{name}.conv"), 2, 1, kernel, 1, Act::Linear),
        }
    }

    pub fn scales(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let avg = g.channel_mean(x);
        let max = g.channel_max(x);
        let cat = g.concat(&[avg, max])?;
        let logits = self.conv.forward(g, cat)?;
        Ok(g.sigmoid(logits))
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let s = self.scales(g, x)?;
        g.scale_spatial(x, s)
    }
}

/// Residual dense block. With `attention` set it becomes the RDCA variant:
/// channel attention over the dense concatenation before the 1×1 local
/// fusion, and the output is `α·x + β·fused` with learnable `α`, `β`.
#[derive(Debug, Clone)]
pub struct Rdb {
    pub layers: Vec<Conv>,
    pub fusion: Conv,
    pub attention: Option<ChannelAttention>,
    pub alpha: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub channels: usize,
}

/// Initial values of the RDCA mixing scalars.
pub const RDCA_ALPHA_INIT: f64 = 1.0;
pub const RDCA_BETA_INIT: f64 = 0.2;

impl Rdb {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        channels: usize,
        growth: usize,
        n_layers: usize,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| {
                Conv::new(
                    ps,
                    rng,
                    &format!("{name}.dense{i}"),
                    channels + i * growth,
                    growth,
                    3,
                    1,
                    Act::Relu,
                )
            })
            .collect();
        let fusion = Conv::new(
            ps,
            rng,
            &format!("{name}.fusion"),
            channels + n_layers * growth,
            channels,
            1,
            1,
            Act::Linear,
        );
        Rdb {
            layers,
            fusion,
            attention: None,
            alpha: None,
            beta: None,
            channels,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new_rdca<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        channels: usize,
        growth: usize,
        n_layers: usize,
        reduction: usize,
        min_hidden: usize,
    ) -> Self {
        let mut rdb = Self::new(ps, rng, name, channels, growth, n_layers);
        rdb.attention = Some(ChannelAttention::new(
            ps,
            rng,
            &format!("{name}.ca"),
            channels + n_layers * growth,
            reduction,
            min_hidden,
        ));
        rdb.alpha = Some(ps.add(format!("{name}.alpha"), Tensor::scalar(RDCA_ALPHA_INIT)));
        rdb.beta = Some(ps.add(format!("{name}.beta"), Tensor::scalar(RDCA_BETA_INIT)));
        rdb
    }

    /// Dense layers, optional attention and local fusion, without the skip.
    pub fn branch(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (c, _, _) = g.value(x).chw();
        if c != self.channels {
            return Err(Error::config(format!(
                "residual dense block built for {} channels, got {c}",
                self.channels
            )));
        }
        let mut feats = vec![x];
        for layer in &self.layers {
            let inp = if feats.len() == 1 { x } else { g.concat(&feats)? };
            let y = layer.forward(g, inp)?;
            feats.push(y);
        }
        let mut dense = g.concat(&feats)?;
        if let Some(ca) = &self.attention {
            dense = ca.forward(g, dense)?;
        }
        self.fusion.forward(g, dense)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let branch = self.branch(g, x)?;
        match (self.alpha, self.beta) {
            (Some(a), Some(b)) => {
                let (a, b) = (g.param(a), g.param(b));
                let skip = g.mul_scalar(x, a)?;
                let res = g.mul_scalar(branch, b)?;
                g.add(skip, res)
            }
            _ => g.add(x, branch),
        }
    }
}

/// Attention-guided residual dense block: halve channels, channel then
/// spatial attention, cascaded RDBs, restore channels.
#[derive(Debug, Clone)]
pub struct Agrd {
    pub reduce: Conv,
    pub ca: ChannelAttention,
    pub sa: SpatialAttention,
    pub rdbs: Vec<Rdb>,
    pub restore: Conv,
    pub channels: usize,
}

impl Agrd {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        channels: usize,
        growth: usize,
        dense_layers: usize,
        n_rdb: usize,
        reduction: usize,
        min_hidden: usize,
        sa_kernel: usize,
    ) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::config(format!(
                "AGRD needs an even channel count, got {channels}"
            )));
        }
        let half = channels / 2;
        Ok(Agrd {
            reduce: Conv::new(ps, rng, &format!("{name}.reduce"), channels, half, 3, 1, Act::Relu),
            ca: ChannelAttention::new(ps, rng, &format!("{name}.ca"), half, reduction, min_hidden),
            sa: SpatialAttention::new(ps, rng, &format!("{name}.sa"), sa_kernel),
            rdbs: (0..n_rdb)
                .map(|i| Rdb::new(ps, rng, &format!("{name}.rdb{i}"), half, growth, dense_layers))
                .collect(),
            restore: Conv::new(ps, rng, &format!("{name}.restore"), half, channels, 3, 1, Act::Linear),
            channels,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (c, _, _) = g.value(x).chw();
        if c != self.channels || c % 2 != 0 {
            return Err(Error::config(format!(
                "AGRD built for {} channels, got {c}",
                self.channels
            )));
        }
        let mut y = self.reduce.forward(g, x)?;
        y = self.ca.forward(g, y)?;
        y = self.sa.forward(g, y)?;
        for rdb in &self.rdbs {
            y = rdb.forward(g, y)?;
        }
        self.restore.forward(g, y)
    }
}
