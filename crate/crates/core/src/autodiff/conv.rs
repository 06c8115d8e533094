//! Direct (loop) kernels for 2-D cross-correlation and the stride-2 2x2
//! transposed convolution. All tensors are `[C, H, W]` row-major.

/// Output index range `[start, end)` along one axis for kernel tap `k`,
/// plus the signed offset to add to an output index to get the input index.
#[inline]
fn tap_range(out_len: usize, in_len: usize, k: usize, pad: usize) -> Option<(usize, usize, isize)> {
    let offset = k as isize - pad as isize;
    let start = (-offset).max(0) as usize;
    let end = (in_len as isize - offset).min(out_len as isize);
    if end <= start as isize {
        return None;
    }
    Some((start, end as usize, offset))
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad_h + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad_w + 1 - self.kw
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut out = vec![0.0; g.c_out * plane];
    for co in 0..g.c_out {
        let out_c = &mut out[co * plane..(co + 1) * plane];
        out_c.fill(bias[co]);
        for y in 0..oh {
            let out_row = &mut out_c[y * ow..(y + 1) * ow];
            for ci in 0..g.c_in {
                let in_c = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                let k_base = (co * g.c_in + ci) * g.kh * g.kw;
                for ky in 0..g.kh {
                    let iy = y as isize + ky as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let in_row = &in_c[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for kx in 0..g.kw {
                        let Some((x0, x1, off)) = tap_range(ow, g.w, kx, g.pad_w) else {
                            continue;
                        };
                        let wv = kernel[k_base + ky * g.kw + kx];
                        let src = &in_row[(x0 as isize + off) as usize..(x1 as isize + off) as usize];
                        for (o, &i) in out_row[x0..x1].iter_mut().zip(src) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_kernel, grad_bias)`.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let in_plane = g.h * g.w;
    let mut grad_in = vec![0.0; g.c_in * in_plane];
    let mut grad_k = vec![0.0; kernel.len()];
    let mut grad_b = vec![0.0; g.c_out];

    for co in 0..g.c_out {
        let go_c = &grad_out[co * plane..(co + 1) * plane];
        grad_b[co] = go_c.iter().sum();
        for y in 0..oh {
            let go_row = &go_c[y * ow..(y + 1) * ow];
            for ci in 0..g.c_in {
                let k_base = (co * g.c_in + ci) * g.kh * g.kw;
                for ky in 0..g.kh {
                    let iy = y as isize + ky as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let row_start = ci * in_plane + iy as usize * g.w;
                    for kx in 0..g.kw {
                        let Some((x0, x1, off)) = tap_range(ow, g.w, kx, g.pad_w) else {
                            continue;
                        };
                        let (s0, s1) = ((x0 as isize + off) as usize, (x1 as isize + off) as usize);
                        let in_row = &input[row_start + s0..row_start + s1];
                        let go = &go_row[x0..x1];
                        let mut acc = 0.0;
                        for (a, b) in go.iter().zip(in_row) {
                            acc += a * b;
                        }
                        grad_k[k_base + ky * g.kw + kx] += acc;

                        let wv = kernel[k_base + ky * g.kw + kx];
                        let gi_row = &mut grad_in[row_start + s0..row_start + s1];
                        for (d, &gv) in gi_row.iter_mut().zip(go) {
                            *d += wv * gv;
                        }
                    }
                }
            }
        }
    }
    (grad_in, grad_k, grad_b)
}

/// Transposed convolution, kernel `[C_in, C_out, 2, 2]`, stride 2, no cropping.
pub(crate) fn upconv2x2_forward(
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        let out_c = &mut out[co * oh * ow..(co + 1) * oh * ow];
        out_c.fill(bias[co]);
        for ci in 0..c_in {
            let k = &kernel[(ci * c_out + co) * 4..(ci * c_out + co) * 4 + 4];
            let in_c = &input[ci * h * w..(ci + 1) * h * w];
            for y in 0..h {
                let in_row = &in_c[y * w..(y + 1) * w];
                for dy in 0..2 {
                    let out_row = &mut out_c[(2 * y + dy) * ow..(2 * y + dy + 1) * ow];
                    let (k0, k1) = (k[dy * 2], k[dy * 2 + 1]);
                    for (pair, &v) in out_row.chunks_exact_mut(2).zip(in_row) {
                        pair[0] += k0 * v;
                        pair[1] += k1 * v;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn upconv2x2_backward(
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (2 * h, 2 * w);
    let mut grad_in = vec![0.0; c_in * h * w];
    let mut grad_k = vec![0.0; kernel.len()];
    let mut grad_b = vec![0.0; c_out];
    for co in 0..c_out {
        let go_c = &grad_out[co * oh * ow..(co + 1) * oh * ow];
        grad_b[co] = go_c.iter().sum();
        for ci in 0..c_in {
            let kb = (ci * c_out + co) * 4;
            let in_c = &input[ci * h * w..(ci + 1) * h * w];
            let gi_c = &mut grad_in[ci * h * w..(ci + 1) * h * w];
            let mut gk = [0.0; 4];
            for y in 0..h {
                let in_row = &in_c[y * w..(y + 1) * w];
                let gi_row = &mut gi_c[y * w..(y + 1) * w];
                for dy in 0..2 {
                    let go_row = &go_c[(2 * y + dy) * ow..(2 * y + dy + 1) * ow];
                    let (k0, k1) = (kernel[kb + dy * 2], kernel[kb + dy * 2 + 1]);
                    for ((pair, &v), gi) in go_row.chunks_exact(2).zip(in_row).zip(gi_row.iter_mut()) {
                        gk[dy * 2] += pair[0] * v;
                        gk[dy * 2 + 1] += pair[1] * v;
                        *gi += k0 * pair[0] + k1 * pair[1];
                    }
                }
            }
            for (d, s) in grad_k[kb..kb + 4].iter_mut().zip(gk) {
                *d += s;
            }
        }
    }
    (grad_in, grad_k, grad_b)
}
