//! Temporal fusion units used inside each propagation branch.
//!
//! * [`Ltmf`]: local fusion of a frame with its two neighbours. The three
//!   maps are concatenated, squeezed by a 1×1 bottleneck, and a stack of AGRD
//!   blocks predicts offsets and modulation masks for a modulated deformable
//!   conv over the bottleneck output.
//! * [`Gtmf`]: global fusion of the local result with the carried
//!   propagation feature through a conv, RDCA blocks and a conv.

use rand::Rng;

use crate::blocks::{Act, Agrd, Conv, Rdb};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{fan_in_uniform, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Graph handles of one local fusion call.
#[derive(Debug, Clone, Copy)]
pub struct LocalOutput {
    pub fused: Var,
    /// `None` for the plain concat+conv replacement.
    pub offsets: Option<Var>,
    pub masks: Option<Var>,
}

fn check_same(g: &Graph<'_>, vars: &[Var], channels: usize) -> Result<()> {
    let want = [channels, g.value(vars[0]).shape()[1], g.value(vars[0]).shape()[2]];
    for &v in vars {
        if g.value(v).shape() != want {
            return Err(Error::input(format!(
                "fusion inputs must all be {want:?}, got {:?}",
                g.value(v).shape()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Ltmf {
    pub bottleneck: Conv,
    pub agrds: Vec<Agrd>,
    /// Emits `d·2K²` offset channels followed by `d·K²` mask logits.
    pub param_head: Conv,
    pub deform_w: ParamId,
    pub deform_b: ParamId,
    pub groups: usize,
    pub kernel: usize,
    pub channels: usize,
}

impl Ltmf {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, rng: &mut R, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.feat;
        let kk = cfg.kernel * cfg.kernel;
        let bottleneck = Conv::new(ps, rng, &format!("{name}.bottleneck"), 3 * c, c, 1, 1, Act::Linear);
        let agrds = (0..cfg.agrd_blocks)
            .map(|i| {
                Agrd::new(
                    ps,
                    rng,
                    &format!("{name}.agrd{i}"),
                    c,
                    cfg.growth,
                    cfg.dense_layers,
                    cfg.rdb_per_agrd,
                    cfg.ca_reduction,
                    cfg.ca_min_hidden,
                    cfg.sa_kernel,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        // starts at zero offsets and masks σ(0) = 0.5
        let param_head = Conv::zeroed(
            ps,
            &format!("{name}.param_head"),
            c,
            cfg.deform_groups * 3 * kk,
            3,
            Act::Linear,
        );
        let fan_in = c * kk;
        let mut w = fan_in_uniform(&[c, c, cfg.kernel, cfg.kernel], fan_in, rng);
        w.scale_assign(3f64.sqrt());
        let deform_w = ps.add(format!("{name}.deform.w"), w);
        let deform_b = ps.add(format!("{name}.deform.b"), Tensor::zeros(&[c]));
        Ok(Ltmf {
            bottleneck,
            agrds,
            param_head,
            deform_w,
            deform_b,
            groups: cfg.deform_groups,
            kernel: cfg.kernel,
            channels: c,
        })
    }

    pub fn offset_channels(&self) -> usize {
        self.groups * 2 * self.kernel * self.kernel
    }

    pub fn mask_channels(&self) -> usize {
        self.groups * self.kernel * self.kernel
    }

    pub fn forward(&self, g: &mut Graph<'_>, prev: Var, cur: Var, next: Var) -> Result<LocalOutput> {
        check_same(g, &[prev, cur, next], self.channels)?;
        let cat = g.concat(&[prev, cur, next])?;
        let fc = self.bottleneck.forward(g, cat)?;
        let mut y = fc;
        for agrd in &self.agrds {
            y = agrd.forward(g, y)?;
        }
        let raw = self.param_head.forward(g, y)?;
        let offsets = g.slice_channels(raw, 0, self.offset_channels())?;
        let logits = g.slice_channels(raw, self.offset_channels(), self.mask_channels())?;
        let masks = g.sigmoid(logits);
        let (w, b) = (g.param(self.deform_w), g.param(self.deform_b));
        let fused = g.deform_conv(fc, offsets, masks, w, Some(b), self.groups)?;
        Ok(LocalOutput {
            fused,
            offsets: Some(offsets),
            masks: Some(masks),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Gtmf {
    pub entry: Conv,
    pub rdca: Vec<Rdb>,
    pub exit: Conv,
    pub channels: usize,
}

impl Gtmf {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, rng: &mut R, name: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.feat;
        Gtmf {
            entry: Conv::new(ps, rng, &format!("{name}.entry"), 2 * c, c, 3, 1, Act::Linear),
            rdca: (0..cfg.rdca_blocks)
                .map(|i| {
                    Rdb::new_rdca(
                        ps,
                        rng,
                        &format!("{name}.rdca{i}"),
                        c,
                        cfg.growth,
                        cfg.dense_layers,
                        cfg.ca_reduction,
                        cfg.ca_min_hidden,
                    )
                })
                .collect(),
            exit: Conv::new(ps, rng, &format!("{name}.exit"), c, c, 3, 1, Act::Linear),
            channels: c,
        }
    }

    /// New propagation feature from the local fused map and the carried state.
    pub fn forward(&self, g: &mut Graph<'_>, local: Var, propagated: Var) -> Result<Var> {
        check_same(g, &[local, propagated], self.channels)?;
        let cat = g.concat(&[propagated, local])?;
        let mut y = self.entry.forward(g, cat)?;
        for block in &self.rdca {
            y = block.forward(g, y)?;
        }
        self.exit.forward(g, y)
    }
}

/// Local fusion stage of a branch: the deformable module, or the plain
/// concat+conv used when it is ablated.
#[derive(Debug, Clone)]
pub enum LocalFusion {
    Ltmf(Ltmf),
    Plain { conv: Conv, channels: usize },
}

impl LocalFusion {
    pub fn forward(&self, g: &mut Graph<'_>, prev: Var, cur: Var, next: Var) -> Result<LocalOutput> {
        match self {
            LocalFusion::Ltmf(m) => m.forward(g, prev, cur, next),
            LocalFusion::Plain { conv, channels } => {
                check_same(g, &[prev, cur, next], *channels)?;
                let cat = g.concat(&[prev, cur, next])?;
                Ok(LocalOutput {
                    fused: conv.forward(g, cat)?,
                    offsets: None,
                    masks: None,
                })
            }
        }
    }
}

/// One propagation branch's parameters (backward and forward never share).
#[derive(Debug, Clone)]
pub struct Branch {
    pub local: LocalFusion,
    /// `None` when the global module is ablated: the local result is passed through.
    pub global: Option<Gtmf>,
}

impl Branch {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        rng: &mut R,
        name: &str,
        cfg: &ModelConfig,
        use_ltmf: bool,
        use_gtmf: bool,
    ) -> Result<Self> {
        let c = cfg.feat;
        let local = if use_ltmf {
            LocalFusion::Ltmf(Ltmf::new(ps, rng, &format!("{name}.ltmf"), cfg)?)
        } else {
            LocalFusion::Plain {
                conv: Conv::new(ps, rng, &format!("{name}.local"), 3 * c, c, 3, 1, Act::Linear),
                channels: c,
            }
        };
        let global = use_gtmf.then(|| Gtmf::new(ps, rng, &format!("{name}.gtmf"), cfg));
        Ok(Branch { local, global })
    }
}
