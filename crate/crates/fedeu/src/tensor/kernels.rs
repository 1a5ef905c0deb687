//! Raw numeric kernels behind the tensor ops.
//!
//! Reductions and matmul accumulate in f64 so that central-difference
//! gradient checks stay well above f32 rounding noise; conv2d accumulates in
//! f32 because it dominates runtime and its checks carry a looser tolerance.

/// c[m,n] = a[m,k] * b[k,n]
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut row = vec![0.0f64; n];
    for i in 0..m {
        row.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let aip = a[i * k + p] as f64;
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (acc, &bv) in row.iter_mut().zip(brow) {
                *acc += aip * bv as f64;
            }
        }
        for (o, &acc) in out[i * n..(i + 1) * n].iter_mut().zip(row.iter()) {
            *o = acc as f32;
        }
    }
    out
}

/// c[m,n] = a[m,k] * b[n,k]^T
pub fn matmul_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av as f64 * bv as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    out
}

/// c[k,n] = a[m,k]^T * b[m,n]
pub fn matmul_at(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p] as f64;
            if aip == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let arow = &mut acc[p * n..(p + 1) * n];
            for (o, &bv) in arow.iter_mut().zip(brow) {
                *o += aip * bv as f64;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    /// Range of output columns whose input column `ow*stride + s - padding`
    /// lands inside `[0, w)`.
    fn col_range(&self, s: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(s).div_ceil(self.stride);
        let hi_num = self.w + self.padding;
        let hi = if hi_num > s {
            (((hi_num - s - 1) / self.stride) + 1).min(self.ow)
        } else {
            0
        };
        (lo.min(self.ow), hi)
    }

    fn row_at(&self, o: usize, k: usize) -> Option<usize> {
        let i = o * self.stride + k;
        if i >= self.padding && i - self.padding < self.h {
            Some(i - self.padding)
        } else {
            None
        }
    }
}

pub fn conv2d_forward(input: &[f32], kernel: &[f32], d: &ConvDims) -> Vec<f32> {
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    let mut out = vec![0.0f32; d.batch * d.c_out * out_plane];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let out_base = (b * d.c_out + co) * out_plane;
            for ci in 0..d.c_in {
                let in_base = (b * d.c_in + ci) * in_plane;
                let k_base = (co * d.c_in + ci) * d.kh * d.kw;
                for r in 0..d.kh {
                    for s in 0..d.kw {
                        let wv = kernel[k_base + r * d.kw + s];
                        if wv == 0.0 {
                            continue;
                        }
                        let (c0, c1) = d.col_range(s);
                        for o_r in 0..d.oh {
                            let Some(i_r) = d.row_at(o_r, r) else { continue };
                            let orow = out_base + o_r * d.ow;
                            let irow = in_base + i_r * d.w;
                            let off = s as isize - d.padding as isize;
                            if d.stride == 1 {
                                let src =
                                    &input[(irow as isize + c0 as isize + off) as usize..];
                                let dst = &mut out[orow + c0..orow + c1];
                                for (o, &x) in dst.iter_mut().zip(src) {
                                    *o += wv * x;
                                }
                            } else {
                                for oc in c0..c1 {
                                    let ic = (oc * d.stride) as isize + off;
                                    out[orow + oc] += wv * input[irow + ic as usize];
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

/// Gradient of the conv output w.r.t. its input.
pub fn conv2d_backward_input(grad_out: &[f32], kernel: &[f32], d: &ConvDims) -> Vec<f32> {
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    let mut grad_in = vec![0.0f32; d.batch * d.c_in * in_plane];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let out_base = (b * d.c_out + co) * out_plane;
            for ci in 0..d.c_in {
                let in_base = (b * d.c_in + ci) * in_plane;
                let k_base = (co * d.c_in + ci) * d.kh * d.kw;
                for r in 0..d.kh {
                    for s in 0..d.kw {
                        let wv = kernel[k_base + r * d.kw + s];
                        if wv == 0.0 {
                            continue;
                        }
                        let (c0, c1) = d.col_range(s);
                        for o_r in 0..d.oh {
                            let Some(i_r) = d.row_at(o_r, r) else { continue };
                            let orow = out_base + o_r * d.ow;
                            let irow = in_base + i_r * d.w;
                            let off = s as isize - d.padding as isize;
                            if d.stride == 1 {
                                let dst = &mut grad_in
                                    [(irow as isize + c0 as isize + off) as usize..];
                                for (g, &go) in
                                    dst.iter_mut().zip(&grad_out[orow + c0..orow + c1])
                                {
                                    *g += wv * go;
                                }
                            } else {
                                for oc in c0..c1 {
                                    let ic = (oc * d.stride) as isize + off;
                                    grad_in[irow + ic as usize] += wv * grad_out[orow + oc];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Gradient of the conv output w.r.t. the kernel (f64 accumulation).
pub fn conv2d_backward_kernel(grad_out: &[f32], input: &[f32], d: &ConvDims) -> Vec<f32> {
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    let mut acc = vec![0.0f64; d.c_out * d.c_in * d.kh * d.kw];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let out_base = (b * d.c_out + co) * out_plane;
            for ci in 0..d.c_in {
                let in_base = (b * d.c_in + ci) * in_plane;
                let k_base = (co * d.c_in + ci) * d.kh * d.kw;
                for r in 0..d.kh {
                    for s in 0..d.kw {
                        let (c0, c1) = d.col_range(s);
                        let mut sum = 0.0f64;
                        for o_r in 0..d.oh {
                            let Some(i_r) = d.row_at(o_r, r) else { continue };
                            let orow = out_base + o_r * d.ow;
                            let irow = in_base + i_r * d.w;
                            let off = s as isize - d.padding as isize;
                            for oc in c0..c1 {
                                let ic = (oc * d.stride) as isize + off;
                                sum += grad_out[orow + oc] as f64
                                    * input[irow + ic as usize] as f64;
                            }
                        }
                        acc[k_base + r * d.kw + s] += sum;
                    }
                }
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &[f32], kernel: &[f32], d: &ConvDims) -> Vec<f32> {
        let mut out = vec![0.0f32; d.batch * d.c_out * d.oh * d.ow];
        for b in 0..d.batch {
            for co in 0..d.c_out {
                for o_r in 0..d.oh {
                    for o_c in 0..d.ow {
                        let mut acc = 0.0f64;
                        for ci in 0..d.c_in {
                            for r in 0..d.kh {
                                for s in 0..d.kw {
                                    let ir = o_r as isize * d.stride as isize + r as isize
                                        - d.padding as isize;
                                    let ic = o_c as isize * d.stride as isize + s as isize
                                        - d.padding as isize;
                                    if ir < 0
                                        || ic < 0
                                        || ir >= d.h as isize
                                        || ic >= d.w as isize
                                    {
                                        continue;
                                    }
                                    let iv = input
                                        [((b * d.c_in + ci) * d.h + ir as usize) * d.w
                                            + ic as usize];
                                    let kv = kernel
                                        [((co * d.c_in + ci) * d.kh + r) * d.kw + s];
                                    acc += iv as f64 * kv as f64;
                                }
                            }
                        }
                        out[((b * d.c_out + co) * d.oh + o_r) * d.ow + o_c] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_reference() {
        for &(stride, padding, h, w) in &[(1usize, 1usize, 5usize, 7usize), (2, 1, 6, 8), (1, 0, 5, 5)] {
            let d = ConvDims {
                batch: 2,
                c_in: 3,
                h,
                w,
                c_out: 4,
                kh: 3,
                kw: 3,
                stride,
                padding,
                oh: (h + 2 * padding - 3) / stride + 1,
                ow: (w + 2 * padding - 3) / stride + 1,
            };
            let input: Vec<f32> = (0..d.batch * d.c_in * h * w)
                .map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.13)
                .collect();
            let kernel: Vec<f32> = (0..d.c_out * d.c_in * 9)
                .map(|i| ((i * 53 % 17) as f32 - 8.0) * 0.07)
                .collect();
            let fast = conv2d_forward(&input, &kernel, &d);
            let slow = naive_conv(&input, &kernel, &d);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-4, "stride={stride} pad={padding}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn matmul_identity() {
        let a = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), b);
    }
}
