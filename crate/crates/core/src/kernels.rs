//! Numeric kernels behind the graph ops: im2col convolution, bilinear sampling
//! and the modulated deformable column transform, each with its adjoint.

use std::cell::RefCell;

use crate::tensor::{gemm, gemm_nt, gemm_tn, gemm_tn_beta};

/// Upper bound on the number of column-buffer entries materialised at once.
const COL_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn rows_per_chunk(&self) -> usize {
        let (ho, wo) = self.out_hw();
        let per_row = self.cin * self.k * self.k * wo;
        (COL_BUDGET / per_row.max(1)).clamp(1, ho)
    }
}

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` on a reusable buffer of `len` entries with unspecified contents.
fn with_scratch<T>(len: usize, f: impl FnOnce(&mut [f64]) -> T) -> T {
    SCRATCH.with(|s| {
        let mut buf = s.take();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        let r = f(&mut buf[..len]);
        s.replace(buf);
        r
    })
}

/// Columns for output rows `[r0, r1)`: `(cin·k·k) × ((r1-r0)·wo)`.
fn im2col(g: &ConvGeom, x: &[f64], r0: usize, r1: usize, cols: &mut [f64]) {
    let (_, wo) = g.out_hw();
    let n = (r1 - r0) * wo;
    let kk = g.k * g.k;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((c * kk) + ky * g.k + kx) * n..][..n];
                let (lo, hi) = valid_range(g, kx, wo);
                for (oy, out) in (r0..r1).zip(row.chunks_exact_mut(wo)) {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        out.fill(0.0);
                        continue;
                    }
                    let line = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&line[first..first + hi - lo]);
                    } else {
                        for (o, &v) in out[lo..hi]
                            .iter_mut()
                            .zip(line[first..].iter().step_by(g.stride))
                        {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
fn valid_range(g: &ConvGeom, kx: usize, wo: usize) -> (usize, usize) {
    // ox·stride + kx − pad ∈ [0, w)
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.w + g.pad > kx {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(wo)
    } else {
        0
    };
    (lo.min(wo), hi.max(lo.min(wo)))
}

fn col2im(g: &ConvGeom, cols: &[f64], r0: usize, r1: usize, dx: &mut [f64]) {
    let (_, wo) = g.out_hw();
    let n = (r1 - r0) * wo;
    let kk = g.k * g.k;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((c * kk) + ky * g.k + kx) * n..][..n];
                let (lo, hi) = valid_range(g, kx, wo);
                if lo >= hi {
                    continue;
                }
                for (oy, src) in (r0..r1).zip(row.chunks_exact(wo)) {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let first = lo * g.stride + kx - g.pad;
                    for (d, &v) in line[first..].iter_mut().step_by(g.stride).zip(&src[lo..hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Dense convolution. `weight` is `cout × cin × k × k`, output `cout × ho × wo`.
pub fn conv2d_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let ckk = g.cin * g.k * g.k;
    let mut out = vec![0.0; g.cout * p];
    if let Some(b) = bias {
        for (o, &bo) in b.iter().enumerate() {
            out[o * p..(o + 1) * p].fill(bo);
        }
    }
    let step = g.rows_per_chunk();
    if step == ho {
        with_scratch(ckk * p, |cols| {
            im2col(g, x, 0, ho, cols);
            gemm(g.cout, ckk, p, 1.0, weight, cols, &mut out);
        });
        return out;
    }
    let mut tmp = vec![0.0; g.cout * step * wo];
    with_scratch(ckk * step * wo, |cols| {
        let mut r0 = 0;
        while r0 < ho {
            let r1 = (r0 + step).min(ho);
            let n = (r1 - r0) * wo;
            im2col(g, x, r0, r1, &mut cols[..ckk * n]);
            tmp[..g.cout * n].fill(0.0);
            gemm(
                g.cout,
                ckk,
                n,
                1.0,
                weight,
                &cols[..ckk * n],
                &mut tmp[..g.cout * n],
            );
            for o in 0..g.cout {
                let dst = &mut out[o * p + r0 * wo..o * p + r1 * wo];
                for (d, s) in dst.iter_mut().zip(&tmp[o * n..(o + 1) * n]) {
                    *d += s;
                }
            }
            r0 = r1;
        }
    });
    out
}

/// Accumulates input, weight and bias gradients of [`conv2d_forward`].
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let ckk = g.cin * g.k * g.k;
    if let Some(db) = db {
        for (o, d) in db.iter_mut().enumerate() {
            *d += dy[o * p..(o + 1) * p].iter().sum::<f64>();
        }
    }
    let step = g.rows_per_chunk();
    let mut dx = dx;
    let mut dw = dw;
    let mut dy_chunk = if step == ho {
        Vec::new()
    } else {
        vec![0.0; g.cout * step * wo]
    };
    with_scratch(ckk * step * wo, |cols| {
        let mut r0 = 0;
        while r0 < ho {
            let r1 = (r0 + step).min(ho);
            let n = (r1 - r0) * wo;
            let dyc: &[f64] = if step == ho {
                dy
            } else {
                for o in 0..g.cout {
                    dy_chunk[o * n..(o + 1) * n]
                        .copy_from_slice(&dy[o * p + r0 * wo..o * p + r1 * wo]);
                }
                &dy_chunk[..g.cout * n]
            };
            if let Some(dw) = dw.as_deref_mut() {
                im2col(g, x, r0, r1, &mut cols[..ckk * n]);
                gemm_nt(g.cout, n, ckk, 1.0, dyc, &cols[..ckk * n], dw);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dcols = &mut cols[..ckk * n];
                gemm_tn_beta(ckk, g.cout, n, 1.0, weight, dyc, 0.0, dcols);
                col2im(g, dcols, r0, r1, dx);
            }
            r0 = r1;
        }
    });
}

/// Zero-padded bilinear read of one plane at fractional `(y, x)`.
#[inline]
pub fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if !(y > -1.0 && x > -1.0 && y < h as f64 && x < w as f64) {
        return 0.0;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| -> f64 {
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            plane[yy as usize * w + xx as usize]
        } else {
            0.0
        }
    };
    (1.0 - ly) * (1.0 - lx) * at(y0, x0)
        + (1.0 - ly) * lx * at(y0, x0 + 1)
        + ly * (1.0 - lx) * at(y0 + 1, x0)
        + ly * lx * at(y0 + 1, x0 + 1)
}

/// Scatters `g` into the four bilinear neighbours and returns `(dv/dy, dv/dx)`.
#[inline]
fn bilinear_backward(
    plane: &[f64],
    dplane: Option<&mut [f64]>,
    h: usize,
    w: usize,
    y: f64,
    x: f64,
    g: f64,
) -> (f64, f64) {
    if !(y > -1.0 && x > -1.0 && y < h as f64 && x < w as f64) {
        return (0.0, 0.0);
    }
    let y0f = y.floor();
    let x0f = x.floor();
    let ly = y - y0f;
    let lx = x - x0f;
    let (y0, x0) = (y0f as isize, x0f as isize);
    let inside =
        |yy: isize, xx: isize| yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w;
    let at = |yy: isize, xx: isize| {
        if inside(yy, xx) {
            plane[yy as usize * w + xx as usize]
        } else {
            0.0
        }
    };
    let (v00, v01, v10, v11) = (
        at(y0, x0),
        at(y0, x0 + 1),
        at(y0 + 1, x0),
        at(y0 + 1, x0 + 1),
    );
    if let Some(dp) = dplane {
        let corners = [
            (y0, x0, (1.0 - ly) * (1.0 - lx)),
            (y0, x0 + 1, (1.0 - ly) * lx),
            (y0 + 1, x0, ly * (1.0 - lx)),
            (y0 + 1, x0 + 1, ly * lx),
        ];
        for (yy, xx, wt) in corners {
            if inside(yy, xx) {
                dp[yy as usize * w + xx as usize] += g * wt;
            }
        }
    }
    let dvdy = (1.0 - lx) * (v10 - v00) + lx * (v11 - v01);
    let dvdx = (1.0 - ly) * (v01 - v00) + ly * (v11 - v10);
    (dvdy, dvdx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeformGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub groups: usize,
}

impl DeformGeom {
    pub fn offset_channels(&self) -> usize {
        self.groups * 2 * self.k * self.k
    }

    pub fn mask_channels(&self) -> usize {
        self.groups * self.k * self.k
    }
}

/// Sampled-and-modulated columns `(cin·K²) × (h·w)`.
///
/// Offsets for group `g`, tap `t` live at channels `g·2K² + 2t` (dy) and
/// `g·2K² + 2t + 1` (dx); masks at `g·K² + t`.
fn deform_im2col(g: &DeformGeom, x: &[f64], offsets: &[f64], masks: &[f64], cols: &mut [f64]) {
    let hw = g.h * g.w;
    let kk = g.k * g.k;
    let pad = (g.k / 2) as f64;
    let per_group = g.cin / g.groups;
    for c in 0..g.cin {
        let grp = c / per_group;
        let plane = &x[c * hw..(c + 1) * hw];
        for t in 0..kk {
            let (ky, kx) = ((t / g.k) as f64, (t % g.k) as f64);
            let oy = &offsets[(grp * 2 * kk + 2 * t) * hw..][..hw];
            let ox = &offsets[(grp * 2 * kk + 2 * t + 1) * hw..][..hw];
            let m = &masks[(grp * kk + t) * hw..][..hw];
            let row = &mut cols[(c * kk + t) * hw..][..hw];
            for p in 0..hw {
                let py = (p / g.w) as f64 - pad + ky + oy[p];
                let px = (p % g.w) as f64 - pad + kx + ox[p];
                row[p] = m[p] * bilinear(plane, g.h, g.w, py, px);
            }
        }
    }
}

/// Modulated deformable convolution, stride 1, "same" padding.
pub fn deform_conv_forward(
    g: &DeformGeom,
    x: &[f64],
    offsets: &[f64],
    masks: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let hw = g.h * g.w;
    let ckk = g.cin * g.k * g.k;
    let mut cols = vec![0.0; ckk * hw];
    deform_im2col(g, x, offsets, masks, &mut cols);
    let mut out = vec![0.0; g.cout * hw];
    if let Some(b) = bias {
        for (o, &bo) in b.iter().enumerate() {
            out[o * hw..(o + 1) * hw].fill(bo);
        }
    }
    gemm(g.cout, ckk, hw, 1.0, weight, &cols, &mut out);
    out
}

pub struct DeformGrads<'a> {
    pub dx: Option<&'a mut [f64]>,
    pub doffsets: Option<&'a mut [f64]>,
    pub dmasks: Option<&'a mut [f64]>,
    pub dw: Option<&'a mut [f64]>,
    pub db: Option<&'a mut [f64]>,
}

pub fn deform_conv_backward(
    g: &DeformGeom,
    x: &[f64],
    offsets: &[f64],
    masks: &[f64],
    weight: &[f64],
    dy: &[f64],
    grads: DeformGrads<'_>,
) {
    let hw = g.h * g.w;
    let kk = g.k * g.k;
    let ckk = g.cin * kk;
    let DeformGrads {
        mut dx,
        mut doffsets,
        mut dmasks,
        dw,
        db,
    } = grads;
    if let Some(db) = db {
        for (o, d) in db.iter_mut().enumerate() {
            *d += dy[o * hw..(o + 1) * hw].iter().sum::<f64>();
        }
    }
    if let Some(dw) = dw {
        let mut cols = vec![0.0; ckk * hw];
        deform_im2col(g, x, offsets, masks, &mut cols);
        gemm_nt(g.cout, hw, ckk, 1.0, dy, &cols, dw);
    }
    if dx.is_none() && doffsets.is_none() && dmasks.is_none() {
        return;
    }
    let mut dcols = vec![0.0; ckk * hw];
    gemm_tn(ckk, g.cout, hw, 1.0, weight, dy, &mut dcols);
    let pad = (g.k / 2) as f64;
    let per_group = g.cin / g.groups;
    for c in 0..g.cin {
        let grp = c / per_group;
        let plane = &x[c * hw..(c + 1) * hw];
        for t in 0..kk {
            let (ky, kx) = ((t / g.k) as f64, (t % g.k) as f64);
            let oy_base = (grp * 2 * kk + 2 * t) * hw;
            let ox_base = oy_base + hw;
            let m_base = (grp * kk + t) * hw;
            let drow = &dcols[(c * kk + t) * hw..][..hw];
            for p in 0..hw {
                let gcol = drow[p];
                if gcol == 0.0 {
                    continue;
                }
                let m = masks[m_base + p];
                let py = (p / g.w) as f64 - pad + ky + offsets[oy_base + p];
                let px = (p % g.w) as f64 - pad + kx + offsets[ox_base + p];
                if let Some(dm) = dmasks.as_deref_mut() {
                    dm[m_base + p] += gcol * bilinear(plane, g.h, g.w, py, px);
                }
                let dplane = dx.as_deref_mut().map(|d| &mut d[c * hw..(c + 1) * hw]);
                let (dvdy, dvdx) = bilinear_backward(plane, dplane, g.h, g.w, py, px, gcol * m);
                if let Some(doff) = doffsets.as_deref_mut() {
                    doff[oy_base + p] += gcol * m * dvdy;
                    doff[ox_base + p] += gcol * m * dvdx;
                }
            }
        }
    }
}
