//! Direct cross-correlation kernels shared by `conv2d` and its transpose.
//!
//! All three kernels accumulate into their output buffer. Layouts are
//! `input[C_in, H_in, W_in]`, `kernel[C_out, C_in, kH, kW]` and
//! `output[C_out, H_out, W_out]`, with `in = out * stride + k - pad`.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn input_len(&self) -> usize {
        self.c_in * self.h_in * self.w_in
    }

    pub fn output_len(&self) -> usize {
        self.c_out * self.h_out * self.w_out
    }

    #[cfg(test)]
    pub fn kernel_len(&self) -> usize {
        self.c_out * self.c_in * self.kh * self.kw
    }
}

/// Output indices `lo..hi` whose input coordinate `o * stride + k - pad`
/// falls inside `0..n_in`.
#[inline]
fn valid_range(k: usize, stride: usize, pad: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let offset = k as isize - pad as isize;
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = n_in as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { (last / s + 1).min(n_out as isize) };
    (lo as usize, hi.max(lo) as usize)
}

/// Unfolds `input` into `[C_in * kH * kW, H_out * W_out]`, zero outside
/// the padded border.
#[inline(always)]
fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane_in = g.h_in * g.w_in;
    let p = g.h_out * g.w_out;
    let mut cols = vec![0.0; g.c_in * g.kh * g.kw * p];
    for ci in 0..g.c_in {
        let in_c = &input[ci * plane_in..(ci + 1) * plane_in];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ky, g.stride, g.pad, g.h_in, g.h_out);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(kx, g.stride, g.pad, g.w_in, g.w_out);
                let r = (ci * g.kh + ky) * g.kw + kx;
                let col = &mut cols[r * p..(r + 1) * p];
                for oy in oy_lo..oy_hi {
                    let row_in = &in_c[(oy * g.stride + ky - g.pad) * g.w_in..];
                    let row_out = &mut col[oy * g.w_out..(oy + 1) * g.w_out];
                    for ox in ox_lo..ox_hi {
                        row_out[ox] = row_in[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
    cols
}

/// Adds the columns back onto `grad_in`, the adjoint of [`im2col`].
#[inline(always)]
fn col2im(cols: &[f64], g: &ConvGeom, grad_in: &mut [f64]) {
    let plane_in = g.h_in * g.w_in;
    let p = g.h_out * g.w_out;
    for ci in 0..g.c_in {
        let gin_c = &mut grad_in[ci * plane_in..(ci + 1) * plane_in];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ky, g.stride, g.pad, g.h_in, g.h_out);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(kx, g.stride, g.pad, g.w_in, g.w_out);
                let r = (ci * g.kh + ky) * g.kw + kx;
                let col = &cols[r * p..(r + 1) * p];
                for oy in oy_lo..oy_hi {
                    let base = (oy * g.stride + ky - g.pad) * g.w_in;
                    let row = &col[oy * g.w_out..(oy + 1) * g.w_out];
                    for ox in ox_lo..ox_hi {
                        gin_c[base + ox * g.stride + kx - g.pad] += row[ox];
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[inline(always)]
fn forward_body(input: &[f64], kernel: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let cols = im2col(input, g);
    let p = g.h_out * g.w_out;
    let rows = g.c_in * g.kh * g.kw;
    for co in 0..g.c_out {
        let out_c = &mut out[co * p..(co + 1) * p];
        for (r, &w) in kernel[co * rows..(co + 1) * rows].iter().enumerate() {
            if w != 0.0 {
                axpy(out_c, w, &cols[r * p..(r + 1) * p]);
            }
        }
    }
}

#[inline(always)]
fn backward_input_body(grad_out: &[f64], kernel: &[f64], g: &ConvGeom, grad_in: &mut [f64]) {
    let p = g.h_out * g.w_out;
    let rows = g.c_in * g.kh * g.kw;
    let mut cols = vec![0.0; rows * p];
    for co in 0..g.c_out {
        let gout_c = &grad_out[co * p..(co + 1) * p];
        if gout_c.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (r, &w) in kernel[co * rows..(co + 1) * rows].iter().enumerate() {
            if w != 0.0 {
                axpy(&mut cols[r * p..(r + 1) * p], w, gout_c);
            }
        }
    }
    col2im(&cols, g, grad_in);
}

#[inline(always)]
fn backward_kernel_body(grad_out: &[f64], input: &[f64], g: &ConvGeom, grad_k: &mut [f64]) {
    let cols = im2col(input, g);
    let p = g.h_out * g.w_out;
    let rows = g.c_in * g.kh * g.kw;
    for co in 0..g.c_out {
        let gout_c = &grad_out[co * p..(co + 1) * p];
        if gout_c.iter().all(|&v| v == 0.0) {
            continue;
        }
        for r in 0..rows {
            grad_k[co * rows + r] += dot(gout_c, &cols[r * p..(r + 1) * p]);
        }
    }
}

/// Compiles a kernel twice, plain and with AVX2 enabled, and picks one at
/// run time. The arithmetic is unchanged (no fused multiply-add), so both
/// paths give identical results.
macro_rules! dispatch {
    ($name:ident, $body:ident, $avx:ident, ($($arg:ident: $ty:ty),*)) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        unsafe fn $avx($($arg: $ty),*) {
            $body($($arg),*)
        }

        pub(crate) fn $name($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the CPU supports AVX2.
                return unsafe { $avx($($arg),*) };
            }
            $body($($arg),*)
        }
    };
}

dispatch!(forward, forward_body, forward_avx2, (input: &[f64], kernel: &[f64], g: &ConvGeom, out: &mut [f64]));
dispatch!(backward_input, backward_input_body, backward_input_avx2, (grad_out: &[f64], kernel: &[f64], g: &ConvGeom, grad_in: &mut [f64]));
dispatch!(backward_kernel, backward_kernel_body, backward_kernel_avx2, (grad_out: &[f64], input: &[f64], g: &ConvGeom, grad_k: &mut [f64]));
