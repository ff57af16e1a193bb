//! Raw NCHW kernels shared by the forward and backward passes.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Output extent of a strided, padded, dilated window; `None` when empty.
pub(crate) fn out_extent(
    size: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
) -> Option<usize> {
    let span = dil * (k - 1) + 1;
    let padded = size + 2 * pad;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
}

pub(crate) fn conv2d_forward(x: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let (ph, pw) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    let mut out = vec![0.0; g.n * g.cout * ohw];
    let mut xp = vec![0.0; cin_g * ph * pw];
    for n in 0..g.n {
        for grp in 0..g.groups {
            for ci in 0..cin_g {
                let cin = grp * cin_g + ci;
                pad_plane(
                    &x[(n * g.cin + cin) * hw..][..hw],
                    g,
                    &mut xp[ci * ph * pw..][..ph * pw],
                );
            }
            for co in grp * cout_g..(grp + 1) * cout_g {
                let out_plane = &mut out[(n * g.cout + co) * ohw..][..ohw];
                for ci in 0..cin_g {
                    let x_plane = &xp[ci * ph * pw..][..ph * pw];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let wv = wt[((co * cin_g + ci) * g.kh + ky) * g.kw + kx];
                            for oy in 0..g.oh {
                                let xrow =
                                    &x_plane[(oy * g.stride + ky * g.dil) * pw + kx * g.dil..];
                                let orow = &mut out_plane[oy * g.ow..][..g.ow];
                                if g.stride == 1 {
                                    for (o, &xv) in orow.iter_mut().zip(&xrow[..g.ow]) {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for (o, &xv) in
                                        orow.iter_mut().zip(xrow.iter().step_by(g.stride))
                                    {
                                        *o += wv * xv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Copies an `h × w` plane into the centre of a zero-bordered buffer.
fn pad_plane(src: &[f64], g: &ConvGeom, dst: &mut [f64]) {
    let pw = g.w + 2 * g.pad;
    for y in 0..g.h {
        dst[(y + g.pad) * pw + g.pad..][..g.w].copy_from_slice(&src[y * g.w..][..g.w]);
    }
}

/// Returns `(dx, dw)` for upstream gradient `dy`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    wt: &[f64],
    dy: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let (ph, pw) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; wt.len()];
    let mut xp = vec![0.0; cin_g * ph * pw];
    let mut dxp = vec![0.0; cin_g * ph * pw];
    for n in 0..g.n {
        for grp in 0..g.groups {
            for ci in 0..cin_g {
                let cin = grp * cin_g + ci;
                pad_plane(
                    &x[(n * g.cin + cin) * hw..][..hw],
                    g,
                    &mut xp[ci * ph * pw..][..ph * pw],
                );
            }
            dxp.iter_mut().for_each(|v| *v = 0.0);
            for co in grp * cout_g..(grp + 1) * cout_g {
                let dy_plane = &dy[(n * g.cout + co) * ohw..][..ohw];
                for ci in 0..cin_g {
                    let x_plane = &xp[ci * ph * pw..][..ph * pw];
                    let dx_plane = &mut dxp[ci * ph * pw..][..ph * pw];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let widx = ((co * cin_g + ci) * g.kh + ky) * g.kw + kx;
                            let wv = wt[widx];
                            let mut acc = 0.0;
                            for oy in 0..g.oh {
                                let off = (oy * g.stride + ky * g.dil) * pw + kx * g.dil;
                                let drow = &dy_plane[oy * g.ow..][..g.ow];
                                let xrow = &x_plane[off..];
                                let dxrow = &mut dx_plane[off..];
                                if g.stride == 1 {
                                    for ((&d, &xv), dxv) in
                                        drow.iter().zip(&xrow[..g.ow]).zip(&mut dxrow[..g.ow])
                                    {
                                        acc += d * xv;
                                        *dxv += d * wv;
                                    }
                                } else {
                                    for ((&d, &xv), dxv) in drow
                                        .iter()
                                        .zip(xrow.iter().step_by(g.stride))
                                        .zip(dxrow.iter_mut().step_by(g.stride))
                                    {
                                        acc += d * xv;
                                        *dxv += d * wv;
                                    }
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
            for ci in 0..cin_g {
                let cin = grp * cin_g + ci;
                let dst = &mut dx[(n * g.cin + cin) * hw..][..hw];
                let src = &dxp[ci * ph * pw..][..ph * pw];
                for y in 0..g.h {
                    dst[y * g.w..][..g.w].copy_from_slice(&src[(y + g.pad) * pw + g.pad..][..g.w]);
                }
            }
        }
    }
    (dx, dw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Max pooling; padded positions never win. Returns `(out, argmax)` with flat input indices.
pub(crate) fn max_pool_forward(x: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.n * g.c * g.oh * g.ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..g.n * g.c {
        let base = plane * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * g.w + ix as usize;
                        if x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// Average pooling over in-bounds positions only (padding not counted).
pub(crate) fn avg_pool_forward(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.n * g.c * g.oh * g.ow);
    for plane in 0..g.n * g.c {
        let base = plane * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (mut acc, mut cnt) = (0.0, 0usize);
                for_window(g, oy, ox, |iy, ix| {
                    acc += x[base + iy * g.w + ix];
                    cnt += 1;
                });
                out.push(acc / cnt as f64);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(dy: &[f64], g: &PoolGeom) -> Vec<f64> {
    let mut dx = vec![0.0; g.n * g.c * g.h * g.w];
    let mut o = 0;
    for plane in 0..g.n * g.c {
        let base = plane * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut cnt = 0usize;
                for_window(g, oy, ox, |_, _| cnt += 1);
                let share = dy[o] / cnt as f64;
                for_window(g, oy, ox, |iy, ix| dx[base + iy * g.w + ix] += share);
                o += 1;
            }
        }
    }
    dx
}

#[inline]
fn for_window(g: &PoolGeom, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
    for ky in 0..g.k {
        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
        if iy < 0 || iy >= g.h as isize {
            continue;
        }
        for kx in 0..g.k {
            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
            if ix < 0 || ix >= g.w as isize {
                continue;
            }
            f(iy as usize, ix as usize);
        }
    }
}

/// Per-channel batch statistics over `(N, spatial)`. Returns `(xhat, inv_std)`.
pub(crate) fn batch_norm_forward(
    x: &[f64],
    n: usize,
    c: usize,
    spatial: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let m = (n * spatial) as f64;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let mut mean = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * spatial;
            mean += x[off..off + spatial].iter().sum::<f64>();
        }
        mean /= m;
        let mut var = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * spatial;
            var += x[off..off + spatial]
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>();
        }
        var /= m;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[ch] = is;
        for b in 0..n {
            let off = (b * c + ch) * spatial;
            for i in off..off + spatial {
                xhat[i] = (x[i] - mean) * is;
            }
        }
    }
    (xhat, inv_std)
}

pub(crate) fn batch_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    n: usize,
    c: usize,
    spatial: usize,
) -> Vec<f64> {
    let m = (n * spatial) as f64;
    let mut dx = vec![0.0; dy.len()];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for b in 0..n {
            let off = (b * c + ch) * spatial;
            for i in off..off + spatial {
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * xhat[i];
            }
        }
        let k = inv_std[ch] / m;
        for b in 0..n {
            let off = (b * c + ch) * spatial;
            for i in off..off + spatial {
                dx[i] = k * (m * dy[i] - sum_dy - xhat[i] * sum_dy_xhat);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extents() {
        assert_eq!(out_extent(8, 3, 1, 1, 1), Some(8));
        assert_eq!(out_extent(8, 3, 2, 1, 1), Some(4));
        assert_eq!(out_extent(8, 3, 1, 2, 2), Some(8));
        assert_eq!(out_extent(8, 5, 1, 4, 2), Some(8));
        assert_eq!(out_extent(2, 5, 1, 0, 1), None);
    }

    #[test]
    fn identity_kernel_conv() {
        let g = ConvGeom {
            n: 1,
            cin: 1,
            h: 3,
            w: 3,
            cout: 1,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            dil: 1,
            groups: 1,
            oh: 3,
            ow: 3,
        };
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        assert_eq!(conv2d_forward(&x, &w, &g), x);
    }
}
