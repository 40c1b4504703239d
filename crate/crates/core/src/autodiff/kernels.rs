//! Raw convolution / pooling kernels over flat `[c, h, w]` buffers.

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`, where `a_t`/`b_t` mean the operand
/// is stored transposed (`[k×m]` resp. `[n×k]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents asserted above.
    unsafe {
        matrixmultiply::sgemm(
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad` is in range.
fn valid_span(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let off = kx as isize - g.pad as isize;
    let s = g.stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi_excl = (g.w as isize - off + s - 1) / s;
    let hi = hi_excl.clamp(0, g.w_out as isize);
    (lo.min(g.w_out as isize) as usize, hi.max(lo) as usize)
}

/// Unfolds `input` into a `[c_in·k·k, h_out·w_out]` column matrix.
pub(crate) fn im2col(g: &ConvGeom, input: &[f32], cols: &mut [f32]) {
    let n = g.out_len();
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let (lo, hi) = valid_span(g, kx);
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].fill(0.0);
                    drow[hi..].fill(0.0);
                    let first = (lo * g.stride + kx) - g.pad;
                    if g.stride == 1 {
                        drow[lo..hi].copy_from_slice(&srow[first..first + (hi - lo)]);
                    } else {
                        for (j, d) in drow[lo..hi].iter_mut().enumerate() {
                            *d = srow[first + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `out`.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f32], out: &mut [f32]) {
    let n = g.out_len();
    for ci in 0..g.c_in {
        let plane = &mut out[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                let (lo, hi) = valid_span(g, kx);
                if lo >= hi {
                    continue;
                }
                let first = (lo * g.stride + kx) - g.pad;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.w_out + lo..oy * g.w_out + hi];
                    if g.stride == 1 {
                        for (p, v) in prow[first..first + (hi - lo)].iter_mut().zip(srow) {
                            *p += v;
                        }
                    } else {
                        for (j, v) in srow.iter().enumerate() {
                            prow[first + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f32], weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let n = g.out_len();
    let mut out = vec![0.0f32; g.c_out * n];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(b[co]);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if g.is_pointwise() {
        gemm(g.c_out, g.patch(), n, weight, false, input, false, beta, &mut out);
    } else {
        let mut cols = vec![0.0f32; g.patch() * n];
        im2col(g, input, &mut cols);
        gemm(g.c_out, g.patch(), n, weight, false, &cols, false, beta, &mut out);
    }
    out
}

/// Gradients of a convolution; each requested output is `Some`.
pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    want: (bool, bool, bool),
) -> ConvGrads {
    let n = g.out_len();
    let patch = g.patch();
    let mut grads = ConvGrads {
        input: None,
        weight: None,
        bias: None,
    };
    if want.1 {
        let mut dw = vec![0.0f32; g.c_out * patch];
        if g.is_pointwise() {
            gemm(g.c_out, n, patch, grad_out, false, input, true, 0.0, &mut dw);
        } else {
            let mut cols = vec![0.0f32; patch * n];
            im2col(g, input, &mut cols);
            // Explicit transpose: gemm packs a row-major colsᵀ far faster than
            // a strided view of cols.
            let cols_t = transpose(&cols, patch, n);
            gemm(g.c_out, n, patch, grad_out, false, &cols_t, false, 0.0, &mut dw);
        }
        grads.weight = Some(dw);
    }
    if want.2 {
        grads.bias = Some(
            grad_out
                .chunks(n)
                .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() as f32)
                .collect(),
        );
    }
    if want.0 {
        let mut dcols = vec![0.0f32; patch * n];
        gemm(patch, g.c_out, n, weight, true, grad_out, false, 0.0, &mut dcols);
        if g.is_pointwise() {
            grads.input = Some(dcols);
        } else {
            let mut dx = vec![0.0f32; g.c_in * g.h * g.w];
            col2im(g, &dcols, &mut dx);
            grads.input = Some(dx);
        }
    }
    grads
}

/// Row-major `[rows × cols]` to `[cols × rows]`, blocked for cache reuse.
fn transpose(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    const B: usize = 32;
    let mut dst = vec![0.0f32; rows * cols];
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    dst
}

/// 2×2 max pooling, stride 2. Returns outputs and the flat argmax index per output.
pub(crate) fn maxpool2_forward(c: usize, h: usize, w: usize, input: &[f32]) -> (Vec<f32>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] || input[idx].is_nan() {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2_forward(c: usize, h: usize, w: usize, input: &[f32]) -> Vec<f32> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; c * h2 * w2];
    for ci in 0..c {
        for y in 0..h2 {
            let src = &input[ci * h * w + (y / 2) * w..ci * h * w + (y / 2 + 1) * w];
            let dst = &mut out[ci * h2 * w2 + y * w2..ci * h2 * w2 + (y + 1) * w2];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = src[x / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(c: usize, h: usize, w: usize, grad_out: &[f32]) -> Vec<f32> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![0.0f32; c * h * w];
    for ci in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                dx[ci * h * w + (y / 2) * w + x / 2] += grad_out[ci * h2 * w2 + y * w2 + x];
            }
        }
    }
    dx
}
