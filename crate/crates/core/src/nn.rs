//! Differentiable 3D primitives with hand-written backward passes.
//!
//! Kernels are stored row-major as `[out, in, kd, kh, kw]`. Every forward
//! function returns whatever it needs to run its backward pass; nothing is
//! cached implicitly.

use crate::tensor::{index3, voxel_count, Dims, FeatureMap};

pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

/// `C = alpha * A * B + beta * C` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + k.saturating_sub(1) * csa || k == 0);
    debug_assert!(b.len() > k.saturating_sub(1) * rsb + (n - 1) * csb || k == 0);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the debug assertions above spell out the bounds every caller
    // upholds; matrixmultiply reads/writes exactly those index ranges.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Valid output range along one axis for kernel tap `k` of a 3-wide, pad-1 conv.
#[inline]
fn tap_range(k: usize, len: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { len.saturating_sub(1) } else { len };
    (lo, hi)
}

fn im2col3(x: &FeatureMap) -> Vec<f64> {
    let n = x.voxels();
    let [d, h, w] = x.dims;
    let mut cols = vec![0.0; x.channels * 27 * n];
    for ci in 0..x.channels {
        let src = x.channel(ci);
        for kz in 0..3 {
            let (z0, z1) = tap_range(kz, d);
            for ky in 0..3 {
                let (y0, y1) = tap_range(ky, h);
                for kx in 0..3 {
                    let (x0, x1) = tap_range(kx, w);
                    let row = (ci * 27 + kz * 9 + ky * 3 + kx) * n;
                    let dst = &mut cols[row..row + n];
                    for z in z0..z1 {
                        for y in y0..y1 {
                            let o = index3(x.dims, z, y, 0);
                            let s = index3(x.dims, z + kz - 1, y + ky - 1, 0);
                            let xs = x0 + kx - 1;
                            dst[o + x0..o + x1].copy_from_slice(&src[s + xs..s + xs + (x1 - x0)]);
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im3(cols: &[f64], channels: usize, dims: Dims) -> FeatureMap {
    let n = voxel_count(dims);
    let [d, h, w] = dims;
    let mut out = FeatureMap::zeros(channels, dims);
    for ci in 0..channels {
        let dst = out.channel_mut(ci);
        for kz in 0..3 {
            let (z0, z1) = tap_range(kz, d);
            for ky in 0..3 {
                let (y0, y1) = tap_range(ky, h);
                for kx in 0..3 {
                    let (x0, x1) = tap_range(kx, w);
                    let row = (ci * 27 + kz * 9 + ky * 3 + kx) * n;
                    let src = &cols[row..row + n];
                    for z in z0..z1 {
                        for y in y0..y1 {
                            let o = index3(dims, z, y, 0);
                            let s = index3(dims, z + kz - 1, y + ky - 1, 0);
                            let xs = x0 + kx - 1;
                            for i in 0..(x1 - x0) {
                                dst[s + xs + i] += src[o + x0 + i];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// 3x3x3 convolution, stride 1, zero padding 1.
pub struct Conv3Cache {
    cols: Vec<f64>,
    in_channels: usize,
    dims: Dims,
}

pub fn conv3_forward(
    x: &FeatureMap,
    kernel: &[f64],
    bias: Option<&[f64]>,
    out_channels: usize,
) -> (FeatureMap, Conv3Cache) {
    let n = x.voxels();
    let kdim = x.channels * 27;
    assert_eq!(kernel.len(), out_channels * kdim, "conv3 kernel size");
    let cols = im2col3(x);
    let mut y = FeatureMap::zeros(out_channels, x.dims);
    gemm(
        out_channels,
        kdim,
        n,
        1.0,
        kernel,
        kdim,
        1,
        &cols,
        n,
        1,
        0.0,
        &mut y.data,
        n,
        1,
    );
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            y.channel_mut(co).iter_mut().for_each(|v| *v += bv);
        }
    }
    (
        y,
        Conv3Cache {
            cols,
            in_channels: x.channels,
            dims: x.dims,
        },
    )
}

/// Returns `dx`; writes (overwrites) `dkernel` and, when given, `dbias`.
pub fn conv3_backward(
    cache: &Conv3Cache,
    kernel: &[f64],
    dy: &FeatureMap,
    dkernel: &mut [f64],
    dbias: Option<&mut [f64]>,
) -> FeatureMap {
    let n = voxel_count(cache.dims);
    let kdim = cache.in_channels * 27;
    let out = dy.channels;
    gemm(
        out,
        n,
        kdim,
        1.0,
        &dy.data,
        n,
        1,
        &cache.cols,
        1,
        n,
        0.0,
        dkernel,
        kdim,
        1,
    );
    if let Some(db) = dbias {
        for (co, g) in db.iter_mut().enumerate() {
            *g = dy.channel(co).iter().sum();
        }
    }
    let mut dcols = vec![0.0; kdim * n];
    gemm(
        kdim, out, n, 1.0, kernel, 1, kdim, &dy.data, n, 1, 0.0, &mut dcols, n, 1,
    );
    col2im3(&dcols, cache.in_channels, cache.dims)
}

/// 2x2x2 transposed convolution with stride 2 (doubles every spatial dim).
pub fn upconv2_forward(
    x: &FeatureMap,
    kernel: &[f64],
    bias: Option<&[f64]>,
    out_channels: usize,
) -> FeatureMap {
    let cin = x.channels;
    let n = x.voxels();
    assert_eq!(kernel.len(), out_channels * cin * 8, "upconv2 kernel size");
    let [d, h, w] = x.dims;
    let odims = [2 * d, 2 * h, 2 * w];
    let mut y = FeatureMap::zeros(out_channels, odims);
    let mut tmp = vec![0.0; out_channels * n];
    for o in 0..8 {
        let (a, b, c) = (o >> 2, (o >> 1) & 1, o & 1);
        gemm(
            out_channels,
            cin,
            n,
            1.0,
            &kernel[o..],
            cin * 8,
            8,
            &x.data,
            n,
            1,
            0.0,
            &mut tmp,
            n,
            1,
        );
        for co in 0..out_channels {
            let src = &tmp[co * n..(co + 1) * n];
            let dst = y.channel_mut(co);
            for z in 0..d {
                for yy in 0..h {
                    for xx in 0..w {
                        dst[index3(odims, 2 * z + a, 2 * yy + b, 2 * xx + c)] +=
                            src[index3([d, h, w], z, yy, xx)];
                    }
                }
            }
        }
    }
    if let Some(bv) = bias {
        for (co, &b) in bv.iter().enumerate() {
            y.channel_mut(co).iter_mut().for_each(|v| *v += b);
        }
    }
    y
}

pub fn upconv2_backward(
    x: &FeatureMap,
    kernel: &[f64],
    dy: &FeatureMap,
    dkernel: &mut [f64],
    dbias: Option<&mut [f64]>,
) -> FeatureMap {
    let cin = x.channels;
    let n = x.voxels();
    let out = dy.channels;
    let [d, h, w] = x.dims;
    let odims = dy.dims;
    let mut dx = FeatureMap::zeros(cin, x.dims);
    let mut gathered = vec![0.0; out * n];
    for o in 0..8 {
        let (a, b, c) = (o >> 2, (o >> 1) & 1, o & 1);
        for co in 0..out {
            let src = dy.channel(co);
            let dst = &mut gathered[co * n..(co + 1) * n];
            for z in 0..d {
                for yy in 0..h {
                    for xx in 0..w {
                        dst[index3([d, h, w], z, yy, xx)] =
                            src[index3(odims, 2 * z + a, 2 * yy + b, 2 * xx + c)];
                    }
                }
            }
        }
        gemm(
            out,
            n,
            cin,
            1.0,
            &gathered,
            n,
            1,
            &x.data,
            1,
            n,
            0.0,
            &mut dkernel[o..],
            cin * 8,
            8,
        );
        gemm(
            cin,
            out,
            n,
            1.0,
            &kernel[o..],
            8,
            cin * 8,
            &gathered,
            n,
            1,
            1.0,
            &mut dx.data,
            n,
            1,
        );
    }
    if let Some(db) = dbias {
        for (co, g) in db.iter_mut().enumerate() {
            *g = dy.channel(co).iter().sum();
        }
    }
    dx
}

/// 1x1x1 convolution.
pub fn pointwise_forward(
    x: &FeatureMap,
    kernel: &[f64],
    bias: &[f64],
    out_channels: usize,
) -> FeatureMap {
    let n = x.voxels();
    let mut y = FeatureMap::zeros(out_channels, x.dims);
    gemm(
        out_channels,
        x.channels,
        n,
        1.0,
        kernel,
        x.channels,
        1,
        &x.data,
        n,
        1,
        0.0,
        &mut y.data,
        n,
        1,
    );
    for (co, &b) in bias.iter().enumerate() {
        y.channel_mut(co).iter_mut().for_each(|v| *v += b);
    }
    y
}

pub fn pointwise_backward(
    x: &FeatureMap,
    kernel: &[f64],
    dy: &FeatureMap,
    dkernel: &mut [f64],
    dbias: &mut [f64],
) -> FeatureMap {
    let n = x.voxels();
    let cin = x.channels;
    gemm(
        dy.channels,
        n,
        cin,
        1.0,
        &dy.data,
        n,
        1,
        &x.data,
        1,
        n,
        1.0,
        dkernel,
        cin,
        1,
    );
    for (co, g) in dbias.iter_mut().enumerate() {
        *g += dy.channel(co).iter().sum::<f64>();
    }
    let mut dx = FeatureMap::zeros(cin, x.dims);
    gemm(
        cin,
        dy.channels,
        n,
        1.0,
        kernel,
        1,
        cin,
        &dy.data,
        n,
        1,
        0.0,
        &mut dx.data,
        n,
        1,
    );
    dx
}

/// 2x2x2 max pooling; returns the pooled map and flat argmax indices.
pub fn maxpool2_forward(x: &FeatureMap) -> (FeatureMap, Vec<usize>) {
    let [d, h, w] = x.dims;
    let odims = [d / 2, h / 2, w / 2];
    let mut y = FeatureMap::zeros(x.channels, odims);
    let mut arg = vec![0usize; y.data.len()];
    let on = voxel_count(odims);
    let n = x.voxels();
    for c in 0..x.channels {
        let src = x.channel(c);
        for z in 0..odims[0] {
            for yy in 0..odims[1] {
                for xx in 0..odims[2] {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for o in 0..8 {
                        let i = index3(
                            x.dims,
                            2 * z + (o >> 2),
                            2 * yy + ((o >> 1) & 1),
                            2 * xx + (o & 1),
                        );
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                    let oi = c * on + index3(odims, z, yy, xx);
                    y.data[oi] = best;
                    arg[oi] = c * n + best_i;
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward(argmax: &[usize], dy: &FeatureMap, in_dims: Dims) -> FeatureMap {
    let mut dx = FeatureMap::zeros(dy.channels, in_dims);
    for (g, &i) in dy.data.iter().zip(argmax) {
        dx.data[i] += g;
    }
    dx
}

/// Per-channel instance normalization with an affine transform.
pub struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

pub fn instance_norm_forward(
    x: &FeatureMap,
    gamma: &[f64],
    beta: &[f64],
) -> (FeatureMap, NormCache) {
    let n = x.voxels() as f64;
    let mut y = FeatureMap::zeros(x.channels, x.dims);
    let mut xhat = vec![0.0; x.data.len()];
    let mut inv_std = vec![0.0; x.channels];
    let nv = x.voxels();
    for c in 0..x.channels {
        let src = x.channel(c);
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let istd = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[c] = istd;
        let xh = &mut xhat[c * nv..(c + 1) * nv];
        let dst = &mut y.data[c * nv..(c + 1) * nv];
        for i in 0..nv {
            xh[i] = (src[i] - mean) * istd;
            dst[i] = gamma[c] * xh[i] + beta[c];
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// Returns `dx`; accumulates into `dgamma` and `dbeta`.
pub fn instance_norm_backward(
    cache: &NormCache,
    gamma: &[f64],
    dy: &FeatureMap,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> FeatureMap {
    let nv = dy.voxels();
    let n = nv as f64;
    let mut dx = FeatureMap::zeros(dy.channels, dy.dims);
    for c in 0..dy.channels {
        let g = dy.channel(c);
        let xh = &cache.xhat[c * nv..(c + 1) * nv];
        let sum_g: f64 = g.iter().sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
        dgamma[c] += sum_gx;
        dbeta[c] += sum_g;
        let scale = gamma[c] * cache.inv_std[c] / n;
        let dst = dx.channel_mut(c);
        for i in 0..nv {
            dst[i] = scale * (n * g[i] - sum_g - xh[i] * sum_gx);
        }
    }
    dx
}

pub fn leaky_relu_inplace(x: &mut FeatureMap) {
    for v in x.data.iter_mut() {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Backward through leaky ReLU given the activation *output* (sign is preserved).
pub fn leaky_relu_backward_inplace(out: &FeatureMap, dy: &mut FeatureMap) {
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

/// Softmax over a 2-channel logit map; returns the foreground probability per voxel.
pub fn foreground_probability(logits: &FeatureMap) -> Vec<f64> {
    debug_assert_eq!(logits.channels, 2);
    logits
        .channel(0)
        .iter()
        .zip(logits.channel(1))
        .map(|(&l0, &l1)| sigmoid(l1 - l0))
        .collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, dims: Dims) -> FeatureMap {
        let data = (0..c * voxel_count(dims))
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        FeatureMap::from_vec(c, dims, data).unwrap()
    }

    fn direct_conv3(x: &FeatureMap, k: &[f64], out: usize) -> FeatureMap {
        let [d, h, w] = x.dims;
        let mut y = FeatureMap::zeros(out, x.dims);
        for co in 0..out {
            for z in 0..d as isize {
                for yy in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = 0.0;
                        for ci in 0..x.channels {
                            for kz in 0..3isize {
                                for ky in 0..3isize {
                                    for kx in 0..3isize {
                                        let (sz, sy, sx) = (z + kz - 1, yy + ky - 1, xx + kx - 1);
                                        if sz < 0
                                            || sy < 0
                                            || sx < 0
                                            || sz >= d as isize
                                            || sy >= h as isize
                                            || sx >= w as isize
                                        {
                                            continue;
                                        }
                                        let kv = k[((co * x.channels + ci) * 27)
                                            + (kz * 9 + ky * 3 + kx) as usize];
                                        acc += kv
                                            * x.channel(ci)[index3(
                                                x.dims,
                                                sz as usize,
                                                sy as usize,
                                                sx as usize,
                                            )];
                                    }
                                }
                            }
                        }
                        y.data[co * x.voxels()
                            + index3(x.dims, z as usize, yy as usize, xx as usize)] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv3_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_map(&mut rng, 2, [3, 4, 5]);
        let k: Vec<f64> = (0..3 * 2 * 27).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (y, _) = conv3_forward(&x, &k, None, 3);
        let r = direct_conv3(&x, &k, 3);
        for (a, b) in y.data.iter().zip(&r.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    // Adjoint identity: <conv(x), dy> == <x, conv^T(dy)> and the kernel gradient
    // is the derivative of that same bilinear form.
    #[test]
    fn conv3_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_map(&mut rng, 2, [4, 3, 4]);
        let k: Vec<f64> = (0..2 * 2 * 27).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dy = random_map(&mut rng, 2, [4, 3, 4]);
        let (y, cache) = conv3_forward(&x, &k, None, 2);
        let mut dk = vec![0.0; k.len()];
        let dx = conv3_backward(&cache, &k, &dy, &mut dk, None);
        let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        let via_k: f64 = k.iter().zip(&dk).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
        assert!((lhs - via_k).abs() < 1e-9);
    }

    #[test]
    fn upconv2_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_map(&mut rng, 3, [2, 2, 3]);
        let k: Vec<f64> = (0..2 * 3 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = upconv2_forward(&x, &k, None, 2);
        assert_eq!(y.dims, [4, 4, 6]);
        let dy = random_map(&mut rng, 2, y.dims);
        let mut dk = vec![0.0; k.len()];
        let dx = upconv2_backward(&x, &k, &dy, &mut dk, None);
        let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        let via_k: f64 = k.iter().zip(&dk).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
        assert!((lhs - via_k).abs() < 1e-9);
    }

    #[test]
    fn upconv2_places_each_tap() {
        // single input voxel, single channel: output block equals the kernel taps
        let x = FeatureMap::from_vec(1, [1, 1, 1], vec![2.0]).unwrap();
        let k: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let y = upconv2_forward(&x, &k, Some(&[0.5]), 1);
        for o in 0..8 {
            let i = index3([2, 2, 2], o >> 2, (o >> 1) & 1, o & 1);
            assert_eq!(y.data[i], 2.0 * o as f64 + 0.5);
        }
    }

    #[test]
    fn instance_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_map(&mut rng, 2, [2, 2, 2]);
        let gamma = [1.3, 0.7];
        let beta = [0.1, -0.2];
        let w = random_map(&mut rng, 2, [2, 2, 2]);
        let loss = |x: &FeatureMap| {
            let (y, _) = instance_norm_forward(x, &gamma, &beta);
            y.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = instance_norm_forward(&x, &gamma, &beta);
        let mut dg = [0.0; 2];
        let mut db = [0.0; 2];
        let dx = instance_norm_backward(&cache, &gamma, &w, &mut dg, &mut db);
        let h = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6, "{fd} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut x = FeatureMap::zeros(1, [2, 2, 2]);
        x.data[5] = 3.0;
        let (y, arg) = maxpool2_forward(&x);
        assert_eq!(y.data, vec![3.0]);
        let dy = FeatureMap::from_vec(1, [1, 1, 1], vec![1.5]).unwrap();
        let dx = maxpool2_backward(&arg, &dy, [2, 2, 2]);
        assert_eq!(dx.data[5], 1.5);
        assert_eq!(dx.data.iter().sum::<f64>(), 1.5);
    }
}
