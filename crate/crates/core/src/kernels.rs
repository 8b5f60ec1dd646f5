//! Raw forward/backward kernels over flat slices. The tape in `graph` owns
//! shape checking; these functions assume consistent extents.

/// Geometry of a square-kernel convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    /// Output extent of a convolution; `None` unless `(n + 2p - k)` is a
    /// non-negative multiple of the stride.
    pub fn conv_out(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        if self.kernel == 0 || self.stride == 0 || padded < self.kernel {
            return None;
        }
        let span = padded - self.kernel;
        span.is_multiple_of(self.stride).then(|| span / self.stride + 1)
    }

    /// Output extent of a pooling window (floor division).
    pub fn pool_out(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        if self.kernel == 0 || self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution: `(n - 1)·s + k - 2p`.
    pub fn transposed_out(&self, n: usize) -> Option<usize> {
        if n == 0 || self.kernel == 0 || self.stride == 0 {
            return None;
        }
        ((n - 1) * self.stride + self.kernel)
            .checked_sub(2 * self.pad)
            .filter(|&v| v > 0)
    }
}

/// `c = alpha·a·b + beta·c` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
/// `trans_a`/`trans_b` read the operand as its transpose (stored `k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths were checked above against the m/k/n extents
    // and the strides describe exactly those row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `[c, h, w]` image into a `[c·k·k, oh·ow]` column matrix.
pub(crate) fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    g: ConvGeom,
    (oh, ow): (usize, usize),
    cols: &mut [f64],
) {
    let k = g.kernel;
    let plane = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
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

/// Adjoint of [`im2col`]: accumulates columns back into a `[c, h, w]` image.
pub(crate) fn col2im(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    g: ConvGeom,
    (oh, ow): (usize, usize),
    x: &mut [f64],
) {
    let k = g.kernel;
    let plane = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Extents shared by the convolution kernels: `[b, cin, h, w] -> [b, cout, oh, ow]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeom,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.cin * self.geom.kernel * self.geom.kernel
    }
}

/// Convolution forward; weight `[cout, cin, k, k]`.
pub(crate) fn conv2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, d: ConvDims) -> Vec<f64> {
    let in_sz = d.cin * d.h * d.w;
    let out_plane = d.oh * d.ow;
    let mut out = vec![0.0; d.batch * d.cout * out_plane];
    let mut cols = vec![0.0; d.patch() * out_plane];
    for b in 0..d.batch {
        im2col(&x[b * in_sz..(b + 1) * in_sz], (d.cin, d.h, d.w), d.geom, (d.oh, d.ow), &mut cols);
        let o = &mut out[b * d.cout * out_plane..(b + 1) * d.cout * out_plane];
        if let Some(bias) = bias {
            for (co, chunk) in o.chunks_mut(out_plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[co]);
            }
        }
        gemm(d.cout, d.patch(), out_plane, weight, false, &cols, false, 1.0, o);
    }
    out
}

/// Gradients of the convolution with respect to input, weight and bias.
pub(crate) fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    d: ConvDims,
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let in_sz = d.cin * d.h * d.w;
    let out_plane = d.oh * d.ow;
    let patch = d.patch();
    let mut gx = need_input.then(|| vec![0.0; x.len()]);
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; d.cout];
    let mut cols = vec![0.0; patch * out_plane];
    let mut dcols = vec![0.0; patch * out_plane];
    for b in 0..d.batch {
        let go = &grad_out[b * d.cout * out_plane..(b + 1) * d.cout * out_plane];
        for (co, chunk) in go.chunks(out_plane).enumerate() {
            gb[co] += chunk.iter().sum::<f64>();
        }
        im2col(&x[b * in_sz..(b + 1) * in_sz], (d.cin, d.h, d.w), d.geom, (d.oh, d.ow), &mut cols);
        // gw += go · colsᵀ
        gemm(d.cout, out_plane, patch, go, false, &cols, true, 1.0, &mut gw);
        if let Some(gx) = gx.as_mut() {
            // dcols = wᵀ · go
            gemm(patch, d.cout, out_plane, weight, true, go, false, 0.0, &mut dcols);
            col2im(&dcols, (d.cin, d.h, d.w), d.geom, (d.oh, d.ow), &mut gx[b * in_sz..(b + 1) * in_sz]);
        }
    }
    (gx, gw, gb)
}

/// Transposed convolution forward; weight `[cin, cout, k, k]`. Here `(h, w)`
/// is the input extent and `(oh, ow)` the larger output extent.
pub(crate) fn deconv2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, d: ConvDims) -> Vec<f64> {
    let k = d.geom.kernel;
    let patch = d.cout * k * k;
    let in_plane = d.h * d.w;
    let out_sz = d.cout * d.oh * d.ow;
    let mut out = vec![0.0; d.batch * out_sz];
    let mut cols = vec![0.0; patch * in_plane];
    for b in 0..d.batch {
        let xb = &x[b * d.cin * in_plane..(b + 1) * d.cin * in_plane];
        // cols = wᵀ · x   ([cout·k·k, cin] · [cin, h·w])
        gemm(patch, d.cin, in_plane, weight, true, xb, false, 0.0, &mut cols);
        let o = &mut out[b * out_sz..(b + 1) * out_sz];
        col2im(&cols, (d.cout, d.oh, d.ow), d.geom, (d.h, d.w), o);
        if let Some(bias) = bias {
            let plane = d.oh * d.ow;
            for (co, chunk) in o.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
    }
    out
}

pub(crate) fn deconv2d_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    d: ConvDims,
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let k = d.geom.kernel;
    let patch = d.cout * k * k;
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    let out_sz = d.cout * out_plane;
    let mut gx = need_input.then(|| vec![0.0; x.len()]);
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; d.cout];
    let mut cols = vec![0.0; patch * in_plane];
    for b in 0..d.batch {
        let go = &grad_out[b * out_sz..(b + 1) * out_sz];
        for (co, chunk) in go.chunks(out_plane).enumerate() {
            gb[co] += chunk.iter().sum::<f64>();
        }
        im2col(go, (d.cout, d.oh, d.ow), d.geom, (d.h, d.w), &mut cols);
        let xb = &x[b * d.cin * in_plane..(b + 1) * d.cin * in_plane];
        // gw += x · colsᵀ   ([cin, h·w] · [h·w, cout·k·k])
        gemm(d.cin, in_plane, patch, xb, false, &cols, true, 1.0, &mut gw);
        if let Some(gx) = gx.as_mut() {
            // gx = w · cols   ([cin, cout·k·k] · [cout·k·k, h·w])
            gemm(
                d.cin,
                patch,
                in_plane,
                weight,
                false,
                &cols,
                false,
                0.0,
                &mut gx[b * d.cin * in_plane..(b + 1) * d.cin * in_plane],
            );
        }
    }
    (gx, gw, gb)
}

/// Max pooling over each `[h, w]` plane of `planes` planes. Returns values and,
/// per output entry, the flat index of the selected input entry. Padding cells
/// are never selected; ties resolve to the first maximum in row-major order.
pub(crate) fn maxpool_forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    g: ConvGeom,
    (oh, ow): (usize, usize),
) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ki in 0..g.kernel {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..g.kernel {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                idx.push(best_i);
            }
        }
    }
    (out, idx)
}

/// Batch-norm statistics per channel for `[b, c, plane]` data.
pub(crate) fn channel_stats(x: &[f64], b: usize, c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (b * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            let off = (bi * c + ch) * plane;
            s += x[off..off + plane].iter().sum::<f64>();
        }
        let m = s / n;
        let mut v = 0.0;
        for bi in 0..b {
            let off = (bi * c + ch) * plane;
            v += x[off..off + plane].iter().map(|&t| (t - m) * (t - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / n;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_rules() {
        let g = ConvGeom::new(5, 1, 0);
        assert_eq!(g.conv_out(120), Some(116));
        assert_eq!(g.conv_out(4), None);
        assert_eq!(ConvGeom::new(3, 2, 0).conv_out(6), None);
        assert_eq!(ConvGeom::new(2, 2, 0).pool_out(5), Some(2));
        assert_eq!(ConvGeom::new(3, 1, 0).transposed_out(1), Some(3));
        assert_eq!(ConvGeom::new(2, 2, 0).transposed_out(3), Some(6));
    }

    #[test]
    fn gemm_handles_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // aᵀ stored as 3×2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, 0.0, &mut c2);
        assert_eq!(c2, c);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(3, 2, 1);
        let (c, h, w) = (2, 5, 4);
        let oh = g.conv_out(h).unwrap();
        let ow = g.pool_out(w).unwrap();
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * 9 * oh * ow).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, (c, h, w), g, (oh, ow), &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, (c, h, w), g, (oh, ow), &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
