//! Dense numeric kernels behind the tape operations.
//!
//! Everything here works on flat row-major `f64` slices with explicit
//! dimensions. Loop order is fixed so results are bit-reproducible across
//! runs of the same build.

/// Output spatial size of a convolution/pool window sweep.
pub fn conv_out_dim(dim: usize, k: usize, stride: usize, pad: usize) -> usize {
    (dim + 2 * pad - k) / stride + 1
}

/// Cross-correlation of `x` (c_in, h, w) with `w` (c_out, c_in, k, k),
/// zero padding. `bias` is per output channel when present.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    for oc in 0..c_out {
        let b = bias.map_or(0.0, |b| b[oc]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for ic in 0..c_in {
                    let wbase = ((oc * c_in + ic) * k) * k;
                    let xbase = ic * h * w;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += weight[wbase + ky * k + kx]
                                * x[xbase + iy as usize * w + ix as usize];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    d_out: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    d_x: &mut [f64],
    d_weight: &mut [f64],
    d_bias: Option<&mut [f64]>,
) {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    if let Some(d_bias) = d_bias {
        for oc in 0..c_out {
            let mut acc = 0.0;
            for oy in 0..oh {
                for ox in 0..ow {
                    acc += d_out[(oc * oh + oy) * ow + ox];
                }
            }
            d_bias[oc] += acc;
        }
    }
    for oc in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = d_out[(oc * oh + oy) * ow + ox];
                for ic in 0..c_in {
                    let wbase = ((oc * c_in + ic) * k) * k;
                    let xbase = ic * h * w;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = xbase + iy as usize * w + ix as usize;
                            d_x[xi] += g * weight[wbase + ky * k + kx];
                            d_weight[wbase + ky * k + kx] += g * x[xi];
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise convolution of the channel group `[c0, c0+count)` with per-channel
/// k x k kernels and "same" zero padding. `weight` is (count, k, k).
#[allow(clippy::too_many_arguments)]
pub fn depthwise_same_forward(
    x: &[f64],
    weight: &[f64],
    c0: usize,
    count: usize,
    h: usize,
    w: usize,
    k: usize,
    out: &mut [f64],
) {
    let pad = k / 2;
    for ci in 0..count {
        let c = c0 + ci;
        let xbase = c * h * w;
        let wbase = ci * k * k;
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = 0.0;
                for ky in 0..k {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += weight[wbase + ky * k + kx] * x[xbase + iy as usize * w + ix as usize];
                    }
                }
                out[xbase + oy * w + ox] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_same_backward(
    x: &[f64],
    weight: &[f64],
    d_out: &[f64],
    c0: usize,
    count: usize,
    h: usize,
    w: usize,
    k: usize,
    d_x: &mut [f64],
    d_weight: &mut [f64],
) {
    let pad = k / 2;
    for ci in 0..count {
        let c = c0 + ci;
        let xbase = c * h * w;
        let wbase = ci * k * k;
        for oy in 0..h {
            for ox in 0..w {
                let g = d_out[xbase + oy * w + ox];
                for ky in 0..k {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xi = xbase + iy as usize * w + ix as usize;
                        d_x[xi] += g * weight[wbase + ky * k + kx];
                        d_weight[wbase + ky * k + kx] += g * x[xi];
                    }
                }
            }
        }
    }
}

/// Mean over each k x k window, stride `stride`, no padding.
pub fn avgpool2d_forward(x: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, out: &mut [f64]) {
    let oh = conv_out_dim(h, k, stride, 0);
    let ow = conv_out_dim(w, k, stride, 0);
    let inv = 1.0 / (k * k) as f64;
    for ch in 0..c {
        let xbase = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        acc += x[xbase + (oy * stride + ky) * w + (ox * stride + kx)];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
}

pub fn avgpool2d_backward(d_out: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, d_x: &mut [f64]) {
    let oh = conv_out_dim(h, k, stride, 0);
    let ow = conv_out_dim(w, k, stride, 0);
    let inv = 1.0 / (k * k) as f64;
    for ch in 0..c {
        let xbase = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = d_out[(ch * oh + oy) * ow + ox] * inv;
                for ky in 0..k {
                    for kx in 0..k {
                        d_x[xbase + (oy * stride + ky) * w + (ox * stride + kx)] += g;
                    }
                }
            }
        }
    }
}

/// Nearest-neighbor resize from (c, h_in, w_in) to (c, h_out, w_out).
/// Source index is floor(i * in / out), so upsampling replicates pixels.
pub fn upsample_nearest_forward(
    x: &[f64],
    c: usize,
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    out: &mut [f64],
) {
    for ch in 0..c {
        for oy in 0..h_out {
            let iy = oy * h_in / h_out;
            for ox in 0..w_out {
                let ix = ox * w_in / w_out;
                out[(ch * h_out + oy) * w_out + ox] = x[(ch * h_in + iy) * w_in + ix];
            }
        }
    }
}

pub fn upsample_nearest_backward(
    d_out: &[f64],
    c: usize,
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    d_x: &mut [f64],
) {
    for ch in 0..c {
        for oy in 0..h_out {
            let iy = oy * h_in / h_out;
            for ox in 0..w_out {
                let ix = ox * w_in / w_out;
                d_x[(ch * h_in + iy) * w_in + ix] += d_out[(ch * h_out + oy) * w_out + ox];
            }
        }
    }
}

/// Row-wise softmax with max subtraction; `x` and `out` are (rows, cols).
pub fn softmax_rows_forward(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let base = r * cols;
        let row = &x[base..base + cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..cols {
            let e = (row[c] - max).exp();
            out[base + c] = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for c in 0..cols {
            out[base + c] *= inv;
        }
    }
}

pub fn softmax_rows_backward(out: &[f64], d_out: &[f64], rows: usize, cols: usize, d_x: &mut [f64]) {
    for r in 0..rows {
        let base = r * cols;
        let mut dot = 0.0;
        for c in 0..cols {
            dot += d_out[base + c] * out[base + c];
        }
        for c in 0..cols {
            d_x[base + c] += out[base + c] * (d_out[base + c] - dot);
        }
    }
}

/// Per-channel statistics of a (c, h, w) map over its h*w positions.
/// Variance is the biased (population) estimator, matching the normalizer.
pub fn channel_stats(x: &[f64], c: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let inv = 1.0 / spatial as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let base = ch * spatial;
        let mut acc = 0.0;
        for i in 0..spatial {
            acc += x[base + i];
        }
        mean[ch] = acc * inv;
        let mut vacc = 0.0;
        for i in 0..spatial {
            let d = x[base + i] - mean[ch];
            vacc += d * d;
        }
        var[ch] = vacc * inv;
    }
    (mean, var)
}

/// Normalize per channel with the given statistics: gamma * (x - mean)/sqrt(var + eps) + beta.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_apply(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    c: usize,
    spatial: usize,
    out: &mut [f64],
) {
    for ch in 0..c {
        let ivar = 1.0 / (var[ch] + eps).sqrt();
        let g = gamma[ch];
        let b = beta[ch];
        let m = mean[ch];
        let base = ch * spatial;
        for i in 0..spatial {
            out[base + i] = g * (x[base + i] - m) * ivar + b;
        }
    }
}

/// Backward through normalization with batch statistics (mean/var computed
/// from `x` itself, so gradients flow through them).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_train_backward(
    x: &[f64],
    gamma: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    c: usize,
    spatial: usize,
    d_out: &[f64],
    d_x: &mut [f64],
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
) {
    let n = spatial as f64;
    for ch in 0..c {
        let base = ch * spatial;
        let ivar = 1.0 / (var[ch] + eps).sqrt();
        let m = mean[ch];
        let g = gamma[ch];

        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for i in 0..spatial {
            let xhat = (x[base + i] - m) * ivar;
            sum_dy += d_out[base + i];
            sum_dy_xhat += d_out[base + i] * xhat;
        }
        d_gamma[ch] += sum_dy_xhat;
        d_beta[ch] += sum_dy;

        // d_x = (g*ivar/n) * (n*dy - sum(dy) - xhat * sum(dy*xhat))
        let scale = g * ivar / n;
        for i in 0..spatial {
            let xhat = (x[base + i] - m) * ivar;
            d_x[base + i] += scale * (n * d_out[base + i] - sum_dy - xhat * sum_dy_xhat);
        }
    }
}

/// Backward through normalization with fixed (running) statistics.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_eval_backward(
    x: &[f64],
    gamma: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    c: usize,
    spatial: usize,
    d_out: &[f64],
    d_x: &mut [f64],
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
) {
    for ch in 0..c {
        let base = ch * spatial;
        let ivar = 1.0 / (var[ch] + eps).sqrt();
        let m = mean[ch];
        let g = gamma[ch];
        for i in 0..spatial {
            let xhat = (x[base + i] - m) * ivar;
            d_gamma[ch] += d_out[base + i] * xhat;
            d_beta[ch] += d_out[base + i];
            d_x[base + i] += d_out[base + i] * g * ivar;
        }
    }
}

/// out (m, n) = a (m, k) @ b (k, n)
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i * k + l] * b[l * n + j];
            }
            out[i * n + j] = acc;
        }
    }
}

/// out (m, n) = a (m, k) @ b (n, k)^T
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i * k + l] * b[j * k + l];
            }
            out[i * n + j] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_out_dim_matches_floor_formula() {
        assert_eq!(conv_out_dim(8, 3, 1, 1), 8);
        assert_eq!(conv_out_dim(8, 3, 2, 0), 3);
        assert_eq!(conv_out_dim(11, 2, 2, 0), 5);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = vec![1.0, 2.0, 3.0, -4.0, 0.0, 4.0];
        let mut out = vec![0.0; 6];
        softmax_rows_forward(&x, 2, 3, &mut out);
        for r in 0..2 {
            let s: f64 = out[r * 3..r * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_stats_on_constant_channel() {
        let x = vec![5.0; 8];
        let (mean, var) = channel_stats(&x, 2, 4);
        assert_eq!(mean, vec![5.0, 5.0]);
        assert_eq!(var, vec![0.0, 0.0]);
    }

    #[test]
    fn upsample_then_index_is_replication() {
        // 1x2x2 -> 1x4x4: each source pixel becomes a 2x2 block.
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let mut out = vec![0.0; 16];
        upsample_nearest_forward(&x, 1, 2, 2, 4, 4, &mut out);
        assert_eq!(out[0], 1.0);
        assert_eq!(out[1], 1.0);
        assert_eq!(out[2], 2.0);
        assert_eq!(out[5], 1.0);
        assert_eq!(out[15], 4.0);
    }
}
