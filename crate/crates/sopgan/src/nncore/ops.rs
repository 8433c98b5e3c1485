//! Raw compute kernels behind the graph ops.
//!
//! Convolutions are expressed as im2col/col2im plus GEMM so that the
//! transposed convolution is the exact adjoint of the forward convolution:
//! both directions share the same gather/scatter index map. All loops are
//! serial with a fixed accumulation order.

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T  (row-by-row dot products)
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[m,n] += a[k,m]^T * b[k,n]
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let aip = a_row[i];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// Geometry of one conv application on a single sample.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(ch: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        ConvGeom { ch, h, w, kh, kw, stride, pad, oh, ow }
    }

    pub fn cols_rows(&self) -> usize {
        self.ch * self.kh * self.kw
    }

    pub fn frames(&self) -> usize {
        self.oh * self.ow
    }
}

/// Gather one sample [ch,h,w] into cols [ch*kh*kw, oh*ow]. Out-of-bounds
/// (zero-padded) taps write 0.
pub(crate) fn im2col(src: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    debug_assert_eq!(src.len(), g.ch * g.h * g.w);
    debug_assert_eq!(cols.len(), g.cols_rows() * g.frames());
    let frames = g.frames();
    for ci in 0..g.ch {
        let plane = &src[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let out_row = &mut cols[row * frames..(row + 1) * frames];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out_row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        for d in dst.iter_mut() {
                            *d = 0.0;
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[ox] = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add cols [ch*kh*kw, oh*ow] back into one sample [ch,h,w]; the
/// exact adjoint of `im2col`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dst: &mut [f64]) {
    debug_assert_eq!(dst.len(), g.ch * g.h * g.w);
    debug_assert_eq!(cols.len(), g.cols_rows() * g.frames());
    let frames = g.frames();
    for ci in 0..g.ch {
        let plane = &mut dst[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * frames..(row + 1) * frames];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let plane_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &src_row[oy * g.ow..(oy + 1) * g.ow];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane_row[ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// conv2d forward. x [n,ci,h,w], w [co,ci,kh,kw] -> out [n,co,oh,ow].
pub(crate) fn conv2d_fwd(
    x: &[f64],
    w: &[f64],
    n: usize,
    g: &ConvGeom,
    co: usize,
    out: &mut [f64],
) {
    let in_sz = g.ch * g.h * g.w;
    let out_sz = co * g.frames();
    let mut cols = vec![0.0; g.cols_rows() * g.frames()];
    for s in 0..n {
        im2col(&x[s * in_sz..(s + 1) * in_sz], g, &mut cols);
        matmul_nn(
            w,
            &cols,
            co,
            g.cols_rows(),
            g.frames(),
            &mut out[s * out_sz..(s + 1) * out_sz],
        );
    }
}

/// conv2d backward: accumulates dx and dw.
pub(crate) fn conv2d_bwd(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    n: usize,
    g: &ConvGeom,
    co: usize,
    dx: &mut [f64],
    dw: &mut [f64],
) {
    let in_sz = g.ch * g.h * g.w;
    let out_sz = co * g.frames();
    let mut cols = vec![0.0; g.cols_rows() * g.frames()];
    let mut dcols = vec![0.0; g.cols_rows() * g.frames()];
    for s in 0..n {
        let dout_s = &dout[s * out_sz..(s + 1) * out_sz];
        im2col(&x[s * in_sz..(s + 1) * in_sz], g, &mut cols);
        // dW += dOut × cols^T
        matmul_nt(dout_s, &cols, co, g.frames(), g.cols_rows(), dw);
        // dX += col2im(W^T × dOut)
        dcols.iter_mut().for_each(|v| *v = 0.0);
        matmul_tn(w, dout_s, g.cols_rows(), co, g.frames(), &mut dcols);
        col2im(&dcols, g, &mut dx[s * in_sz..(s + 1) * in_sz]);
    }
}

/// conv2d_transpose forward. x [n,ci,hi,wi], w [ci,co,kh,kw] ->
/// out [n,co,ho,wo] with ho = (hi-1)*stride - 2*pad + kh. `g` describes the
/// corresponding forward conv on the OUTPUT image, so g.ch = co, g.oh = hi.
pub(crate) fn convt2d_fwd(
    x: &[f64],
    w: &[f64],
    n: usize,
    g: &ConvGeom,
    ci: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(w.len(), ci * g.cols_rows());
    let in_sz = ci * g.frames();
    let out_sz = g.ch * g.h * g.w;
    let mut cols = vec![0.0; g.cols_rows() * g.frames()];
    for s in 0..n {
        cols.iter_mut().for_each(|v| *v = 0.0);
        // cols = W^T × x  ([co*kh*kw, hi*wi])
        matmul_tn(
            w,
            &x[s * in_sz..(s + 1) * in_sz],
            g.cols_rows(),
            ci,
            g.frames(),
            &mut cols,
        );
        col2im(&cols, g, &mut out[s * out_sz..(s + 1) * out_sz]);
    }
}

/// conv2d_transpose backward: accumulates dx and dw.
pub(crate) fn convt2d_bwd(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    n: usize,
    g: &ConvGeom,
    ci: usize,
    dx: &mut [f64],
    dw: &mut [f64],
) {
    let in_sz = ci * g.frames();
    let out_sz = g.ch * g.h * g.w;
    let mut dcols = vec![0.0; g.cols_rows() * g.frames()];
    for s in 0..n {
        im2col(&dout[s * out_sz..(s + 1) * out_sz], g, &mut dcols);
        // dX += W × im2col(dOut)
        matmul_nn(
            w,
            &dcols,
            ci,
            g.cols_rows(),
            g.frames(),
            &mut dx[s * in_sz..(s + 1) * in_sz],
        );
        // dW += x × im2col(dOut)^T
        matmul_nt(
            &x[s * in_sz..(s + 1) * in_sz],
            &dcols,
            ci,
            g.frames(),
            g.cols_rows(),
            dw,
        );
    }
}

/// Per-channel mean and biased variance over (N, H, W) of x [n,c,h,w].
pub(crate) fn channel_stats(x: &[f64], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let cnt = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let plane = &x[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            let m = &mut mean[ch];
            for &v in plane {
                *m += v;
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= cnt;
    }
    for s in 0..n {
        for ch in 0..c {
            let plane = &x[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            let m = mean[ch];
            let vv = &mut var[ch];
            for &v in plane {
                let d = v - m;
                *vv += d * d;
            }
        }
    }
    for v in var.iter_mut() {
        *v /= cnt;
    }
    (mean, var)
}
