//! Low-level numeric kernels shared by the autograd ops.

/// 2D convolution geometry: stride, zero padding and channel groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvGeom {
            stride: (stride, stride),
            padding: (padding, padding),
            groups: 1,
        }
    }

    pub fn with_padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

impl Default for ConvGeom {
    fn default() -> Self {
        ConvGeom::new(1, 0)
    }
}

/// Output extent of a sliding window, `None` when the window does not fit.
pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// `c = alpha * op(a) * op(b) + beta * c` over strided row-major views.
///
/// `a` is `m x k` with strides `(rsa, csa)`, `b` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(max_index(m, k, rsa, csa) < a.len().max(1) || k == 0);
    debug_assert!(max_index(k, n, rsb, csb) < b.len().max(1) || k == 0);
    debug_assert!(max_index(m, n, rsc, csc) < c.len());
    // SAFETY: the debug assertions above describe the contract; every caller
    // in this crate derives strides from contiguous buffers of matching size.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn max_index(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize
}

/// Row-major `m x k` times `k x n` into a fresh buffer.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(
        m, k, n, 1.0, a, k as isize, 1, b, n as isize, 1, 0.0, &mut c, n as isize, 1,
    );
    c
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvShape {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

/// Unfold `c x h x w` into a `(c*kh*kw) x (oh*ow)` column matrix.
pub(crate) fn im2col(x: &[f64], s: &ConvShape, cols: &mut [f64]) {
    let plane = s.oh * s.ow;
    for ci in 0..s.c {
        let xc = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let row = (ci * s.kh + ki) * s.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..s.oh {
                    let iy = (oy * s.sh + ki) as isize - s.ph as isize;
                    let drow = &mut dst[oy * s.ow..(oy + 1) * s.ow];
                    if iy < 0 || iy >= s.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * s.sw + kj) as isize - s.pw as isize;
                        *d = if ix < 0 || ix >= s.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `c x h x w`.
pub(crate) fn col2im(cols: &[f64], s: &ConvShape, x: &mut [f64]) {
    let plane = s.oh * s.ow;
    for ci in 0..s.c {
        let xc = &mut x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let row = (ci * s.kh + ki) * s.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..s.oh {
                    let iy = (oy * s.sh + ki) as isize - s.ph as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let drow = &mut xc[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for ox in 0..s.ow {
                        let ix = (ox * s.sw + kj) as isize - s.pw as isize;
                        if ix >= 0 && ix < s.w as isize {
                            drow[ix as usize] += src[oy * s.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeom,
}

impl ConvDims {
    fn group_shape(&self) -> ConvShape {
        ConvShape {
            c: self.cin / self.geom.groups,
            h: self.h,
            w: self.w,
            kh: self.kh,
            kw: self.kw,
            oh: self.oh,
            ow: self.ow,
            sh: self.geom.stride.0,
            sw: self.geom.stride.1,
            ph: self.geom.padding.0,
            pw: self.geom.padding.1,
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let g = d.geom.groups;
    let s = d.group_shape();
    let cg = d.cin / g;
    let og = d.cout / g;
    let kdim = cg * d.kh * d.kw;
    let plane = d.oh * d.ow;
    let in_plane = d.h * d.w;
    let mut out = vec![0.0; d.n * d.cout * plane];
    let mut cols = if s.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kdim * plane]
    };
    for n in 0..d.n {
        for grp in 0..g {
            let xs = &x[(n * d.cin + grp * cg) * in_plane..(n * d.cin + (grp + 1) * cg) * in_plane];
            let b: &[f64] = if s.is_pointwise() {
                xs
            } else {
                im2col(xs, &s, &mut cols);
                &cols
            };
            let ws = &w[grp * og * kdim..(grp + 1) * og * kdim];
            let os = &mut out[(n * d.cout + grp * og) * plane..(n * d.cout + (grp + 1) * og) * plane];
            gemm(
                og, kdim, plane, 1.0, ws, kdim as isize, 1, b, plane as isize, 1, 0.0, os,
                plane as isize, 1,
            );
        }
        if let Some(bias) = bias {
            for o in 0..d.cout {
                let row = &mut out[(n * d.cout + o) * plane..(n * d.cout + o + 1) * plane];
                row.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
    }
    out
}

/// Gradients of a convolution: `(dx, dw, db)`, each only when requested.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    d: &ConvDims,
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let g = d.geom.groups;
    let s = d.group_shape();
    let cg = d.cin / g;
    let og = d.cout / g;
    let kdim = cg * d.kh * d.kw;
    let plane = d.oh * d.ow;
    let in_plane = d.h * d.w;
    let pointwise = s.is_pointwise();

    let mut dx = want_x.then(|| vec![0.0; d.n * d.cin * in_plane]);
    let mut dw = want_w.then(|| vec![0.0; w.len()]);
    let db = want_b.then(|| {
        let mut db = vec![0.0; d.cout];
        for n in 0..d.n {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += gout[(n * d.cout + o) * plane..(n * d.cout + o + 1) * plane]
                    .iter()
                    .sum::<f64>();
            }
        }
        db
    });

    let mut cols = vec![0.0; if pointwise { 0 } else { kdim * plane }];
    let mut dcols = vec![0.0; if want_x && !pointwise { kdim * plane } else { 0 }];
    for n in 0..d.n {
        for grp in 0..g {
            let go = &gout[(n * d.cout + grp * og) * plane..(n * d.cout + (grp + 1) * og) * plane];
            let ws = &w[grp * og * kdim..(grp + 1) * og * kdim];
            let x_range = (n * d.cin + grp * cg) * in_plane..(n * d.cin + (grp + 1) * cg) * in_plane;
            if let Some(dw) = dw.as_mut() {
                let b: &[f64] = if pointwise {
                    &x[x_range.clone()]
                } else {
                    im2col(&x[x_range.clone()], &s, &mut cols);
                    &cols
                };
                // dW_g += gout_g [og x plane] * cols^T [plane x kdim]
                let dws = &mut dw[grp * og * kdim..(grp + 1) * og * kdim];
                gemm(
                    og, plane, kdim, 1.0, go, plane as isize, 1, b, 1, plane as isize, 1.0, dws,
                    kdim as isize, 1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                // dcols = W_g^T [kdim x og] * gout_g [og x plane]
                if pointwise {
                    let dxs = &mut dx[x_range];
                    gemm(
                        kdim, og, plane, 1.0, ws, 1, kdim as isize, go, plane as isize, 1, 1.0,
                        dxs, plane as isize, 1,
                    );
                } else {
                    gemm(
                        kdim, og, plane, 1.0, ws, 1, kdim as isize, go, plane as isize, 1, 0.0,
                        &mut dcols, plane as isize, 1,
                    );
                    col2im(&dcols, &s, &mut dx[x_range]);
                }
            }
        }
    }
    (dx, dw, db)
}

/// Window pooling geometry (square or rectangular kernels).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl PoolGeom {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        PoolGeom {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }
}

/// Max pooling over `planes` independent `h x w` planes; returns values and argmax offsets.
pub(crate) fn max_pool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    p: &PoolGeom,
    oh: usize,
    ow: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![f64::NEG_INFINITY; planes * oh * ow];
    let mut arg = vec![usize::MAX; planes * oh * ow];
    for pl in 0..planes {
        let xs = &x[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = pl * oh * ow + oy * ow + ox;
                for ki in 0..p.kernel.0 {
                    let iy = (oy * p.stride.0 + ki) as isize - p.padding.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..p.kernel.1 {
                        let ix = (ox * p.stride.1 + kj) as isize - p.padding.1 as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        if xs[idx] > out[o] {
                            out[o] = xs[idx];
                            arg[o] = pl * h * w + idx;
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

/// Average pooling with zero padding counted in the divisor.
pub(crate) fn avg_pool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    p: &PoolGeom,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let inv = 1.0 / (p.kernel.0 * p.kernel.1) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for pl in 0..planes {
        let xs = &x[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ki in 0..p.kernel.0 {
                    let iy = (oy * p.stride.0 + ki) as isize - p.padding.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..p.kernel.1 {
                        let ix = (ox * p.stride.1 + kj) as isize - p.padding.1 as isize;
                        if ix >= 0 && ix < w as isize {
                            acc += xs[iy as usize * w + ix as usize];
                        }
                    }
                }
                out[pl * oh * ow + oy * ow + ox] = acc * inv;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(
    gout: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    p: &PoolGeom,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let inv = 1.0 / (p.kernel.0 * p.kernel.1) as f64;
    let mut dx = vec![0.0; planes * h * w];
    for pl in 0..planes {
        let dxs = &mut dx[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gout[pl * oh * ow + oy * ow + ox] * inv;
                for ki in 0..p.kernel.0 {
                    let iy = (oy * p.stride.0 + ki) as isize - p.padding.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..p.kernel.1 {
                        let ix = (ox * p.stride.1 + kj) as isize - p.padding.1 as isize;
                        if ix >= 0 && ix < w as isize {
                            dxs[iy as usize * w + ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}
