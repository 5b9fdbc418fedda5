//! Forward and backward kernels on plain tensors.
//!
//! These are the numeric bodies behind the differentiable ops in
//! [`crate::autodiff`]. They are usable directly for inference and as
//! reference values in tests.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// Output spatial size of a 3×3 convolution.
pub fn conv_out_size(size: usize, stride: usize, padding: usize) -> Result<usize> {
    if !(1..=2).contains(&stride) {
        return Err(Error::shape("conv2d_3x3", format!("stride must be 1 or 2, got {stride}")));
    }
    if size + 2 * padding < KERNEL {
        return Err(Error::shape(
            "conv2d_3x3",
            format!("spatial size {size} with padding {padding} is smaller than the kernel"),
        ));
    }
    Ok((size + 2 * padding - KERNEL) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one sample `[cin, h, w]` into `[cin * 9, ho * wo]`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.plane();
        for ci in 0..self.cin {
            let xc = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = &mut cols[((ci * KERNEL + ky) * KERNEL + kx) * p..][..p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &xc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters columns back onto `dx`.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.plane();
        for ci in 0..self.cin {
            let dxc = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = &cols[((ci * KERNEL + ky) * KERNEL + kx) * p..][..p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dxc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, ConvGeom)> {
    let (b, cin, h, w) = input.dims4("conv2d_3x3")?;
    let (cout, wcin, kh, kw) = weight.dims4("conv2d_3x3")?;
    if (kh, kw) != (KERNEL, KERNEL) {
        return Err(Error::shape("conv2d_3x3", format!("kernel must be 3x3, got {kh}x{kw}")));
    }
    if wcin != cin {
        return Err(Error::shape(
            "conv2d_3x3",
            format!("input has {cin} channels, weight expects {wcin}"),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape("conv2d_3x3", format!("bias {:?} for {cout} filters", bias.shape())));
    }
    let ho = conv_out_size(h, stride, padding)?;
    let wo = conv_out_size(w, stride, padding)?;
    Ok((b, cout, ConvGeom { cin, h, w, ho, wo, stride, pad: padding }))
}

/// 3×3 cross-correlation over `[B, Cin, H, W]` with `[Cout, Cin, 3, 3]` filters.
pub fn conv2d_3x3(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (batch, cout, g) = conv_geom(input, weight, bias, stride, padding)?;
    let p = g.plane();
    let k = g.cin * TAPS;
    let in_len = g.cin * g.h * g.w;
    let (x, wt, bs) = (input.data(), weight.data(), bias.data());
    let mut out = vec![0.0; batch * cout * p];
    par::for_each_chunk(&mut out, cout * p, |bi, o| {
        let mut cols = vec![0.0; k * p];
        g.im2col(&x[bi * in_len..(bi + 1) * in_len], &mut cols);
        for co in 0..cout {
            let orow = &mut o[co * p..(co + 1) * p];
            orow.fill(bs[co]);
            for (ki, &wv) in wt[co * k..(co + 1) * k].iter().enumerate() {
                let crow = &cols[ki * p..(ki + 1) * p];
                for (ov, cv) in orow.iter_mut().zip(crow) {
                    *ov += wv * cv;
                }
            }
        }
    });
    Tensor::new(vec![batch, cout, g.ho, g.wo], out)
}

/// Gradients of a 3×3 convolution. Input and weight gradients are only
/// computed when requested; the bias gradient is always cheap.
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_3x3_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    need: [bool; 3],
) -> Result<ConvGrads> {
    let (batch, cout, g) = conv_geom(input, weight, bias, stride, padding)?;
    let p = g.plane();
    let k = g.cin * TAPS;
    let in_len = g.cin * g.h * g.w;
    let (x, wt, go) = (input.data(), weight.data(), grad_out.data());
    let [need_x, need_w, need_b] = need;

    // Per-sample pieces: (input grad, weight grad partial).
    let pieces = par::map_range(batch, |bi| {
        let gob = &go[bi * cout * p..(bi + 1) * cout * p];
        let mut cols = vec![0.0; k * p];
        let gw = if need_w {
            g.im2col(&x[bi * in_len..(bi + 1) * in_len], &mut cols);
            let mut gw = vec![0.0; cout * k];
            for co in 0..cout {
                let grow = &gob[co * p..(co + 1) * p];
                for ki in 0..k {
                    let crow = &cols[ki * p..(ki + 1) * p];
                    gw[co * k + ki] = grow.iter().zip(crow).map(|(a, b)| a * b).sum();
                }
            }
            gw
        } else {
            Vec::new()
        };
        let gx = if need_x {
            cols.fill(0.0);
            for co in 0..cout {
                let grow = &gob[co * p..(co + 1) * p];
                for ki in 0..k {
                    let wv = wt[co * k + ki];
                    if wv == 0.0 {
                        continue;
                    }
                    for (c, gv) in cols[ki * p..(ki + 1) * p].iter_mut().zip(grow) {
                        *c += wv * gv;
                    }
                }
            }
            let mut gx = vec![0.0; in_len];
            g.col2im(&cols, &mut gx);
            gx
        } else {
            Vec::new()
        };
        (gx, gw)
    });

    let (gxs, gws): (Vec<_>, Vec<_>) = pieces.into_iter().unzip();
    let input_grad = if need_x {
        Some(Tensor::new(input.shape().to_vec(), gxs.concat())?)
    } else {
        None
    };
    let weight_grad = if need_w {
        Some(Tensor::new(weight.shape().to_vec(), par::sum_in_order(gws, cout * k))?)
    } else {
        None
    };
    let bias_grad = if need_b {
        let mut gb = vec![0.0; cout];
        for bi in 0..batch {
            for (co, acc) in gb.iter_mut().enumerate() {
                *acc += go[(bi * cout + co) * p..(bi * cout + co + 1) * p].iter().sum::<f64>();
            }
        }
        Some(Tensor::vector(&gb))
    } else {
        None
    };
    Ok(ConvGrads { input: input_grad, weight: weight_grad, bias: bias_grad })
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor::from_fn(input.shape(), |i| input.data()[i].max(0.0))
}

/// Per-channel spatial mean: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4("global_avg_pool")?;
    let n = h * w;
    if n == 0 {
        return Err(Error::shape("global_avg_pool", "empty spatial extent"));
    }
    let data = input.data().chunks_exact(n).map(|ch| ch.iter().sum::<f64>() / n as f64).collect();
    Tensor::new(vec![b, c], data)
}

/// `x · Wᵀ + b` for `x: [B, Din]`, `W: [Dout, Din]`, `b: [Dout]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, din) = input.dims2("linear")?;
    let (dout, wdin) = weight.dims2("linear")?;
    if wdin != din || bias.shape() != [dout] {
        return Err(Error::shape(
            "linear",
            format!("input {:?}, weight {:?}, bias {:?}", input.shape(), weight.shape(), bias.shape()),
        ));
    }
    let (x, wt, bs) = (input.data(), weight.data(), bias.data());
    let mut out = vec![0.0; b * dout];
    for (row, orow) in x.chunks_exact(din).zip(out.chunks_exact_mut(dout)) {
        for (o, ov) in orow.iter_mut().enumerate() {
            *ov = bs[o] + wt[o * din..(o + 1) * din].iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Tensor::new(vec![b, dout], out)
}

/// Per-(sample, channel) spatial statistics of a feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceStats {
    /// `[B, C]` spatial means.
    pub mean: Tensor,
    /// `[B, C]` values of `sqrt(population variance + eps)`.
    pub std: Tensor,
}

pub fn instance_stats(input: &Tensor, eps: f64) -> Result<InstanceStats> {
    let (b, c, h, w) = input.dims4("instance_stats")?;
    let n = h * w;
    if n == 0 {
        return Err(Error::shape("instance_stats", "empty spatial extent"));
    }
    let mut mean = Vec::with_capacity(b * c);
    let mut std = Vec::with_capacity(b * c);
    for ch in input.data().chunks_exact(n) {
        let (m, s) = channel_stats(ch, eps);
        mean.push(m);
        std.push(s);
    }
    Ok(InstanceStats {
        mean: Tensor::new(vec![b, c], mean)?,
        std: Tensor::new(vec![b, c], std)?,
    })
}

pub(crate) fn channel_stats(ch: &[f64], eps: f64) -> (f64, f64) {
    let n = ch.len() as f64;
    let m = if ch.iter().all(|&v| v == ch[0]) { ch[0] } else { ch.iter().sum::<f64>() / n };
    let var = ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, (var + eps).sqrt())
}

/// `scale · (x − mean) / std + shift`, with `[B, C]` scale and shift
/// broadcast over the spatial axes.
pub fn normalize_scale_shift(
    input: &Tensor,
    stats: &InstanceStats,
    scale: &Tensor,
    shift: &Tensor,
) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4("normalize_scale_shift")?;
    for t in [&stats.mean, &stats.std, scale, shift] {
        if t.shape() != [b, c] {
            return Err(Error::shape(
                "normalize_scale_shift",
                format!("expected [{b}, {c}] per-channel values, got {:?}", t.shape()),
            ));
        }
    }
    if stats.std.data().iter().any(|&s| s <= 0.0) {
        return Err(Error::Numeric("normalize_scale_shift: zero standard deviation".into()));
    }
    let n = h * w;
    let mut out = input.data().to_vec();
    for (bc, ch) in out.chunks_exact_mut(n).enumerate() {
        let (m, s) = (stats.mean.data()[bc], stats.std.data()[bc]);
        let (a, t) = (scale.data()[bc], shift.data()[bc]);
        for v in ch {
            *v = a * ((*v - m) / s) + t;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Divides each row by `max(‖row‖₂, eps)`.
pub fn l2_normalize(v: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, d) = v.dims2("l2_normalize")?;
    let mut out = v.data().to_vec();
    for row in out.chunks_exact_mut(d) {
        let n = row_norm(row).max(eps);
        row.iter_mut().for_each(|x| *x /= n);
    }
    Tensor::new(v.shape().to_vec(), out)
}

pub(crate) fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt()
}
