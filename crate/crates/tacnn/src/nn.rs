//! Neural net primitives: convolution, max pooling, fully connected
//! layers, their backward passes, and the momentum SGD update. All
//! arithmetic is `f64`. Convolution is cross-correlation (no kernel
//! flip) with zero padding; relu is fused into conv and optionally fc
//! forward passes, so backward passes gate on the cached output.

use crate::error::Error;
use crate::tensor::Tensor;
use crate::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const MOMENTUM: f64 = 0.9;
pub const WEIGHT_DECAY: f64 = 0.001;

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable ln(1 + e^t).
#[inline]
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Elementwise max(0, x).
pub fn relu(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

/// Half-width of the uniform init range for a layer with the given fans.
pub fn init_half_width(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Fill with uniform draws in [-half_width, half_width].
pub fn init_uniform(rng: &mut ChaCha8Rng, n: usize, half_width: f64) -> Vec<f64> {
    (0..n)
        .map(|_| rng.gen_range(-half_width..=half_width))
        .collect()
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    /// Kernels, row-major [out_ch, in_ch, kh, kw].
    pub kernels: Vec<f64>,
    /// One bias per output channel.
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvLayer {
            out_ch,
            in_ch,
            kh,
            kw,
            stride,
            pad,
            kernels: vec![0.0; out_ch * in_ch * kh * kw],
            bias: vec![0.0; out_ch],
        }
    }

    pub fn init(
        rng: &mut ChaCha8Rng,
        out_ch: usize,
        in_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * kh * kw;
        let fan_out = out_ch * kh * kw;
        let hw = init_half_width(fan_in, fan_out);
        ConvLayer {
            kernels: init_uniform(rng, out_ch * in_ch * kh * kw, hw),
            ..ConvLayer::zeros(out_ch, in_ch, kh, kw, stride, pad)
        }
    }

    #[inline]
    fn k(&self, v: usize, u: usize, a: usize, b: usize) -> f64 {
        self.kernels[((v * self.in_ch + u) * self.kh + a) * self.kw + b]
    }

    /// Output spatial extents for an input of the given extents.
    pub fn out_extents(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let hp = h + 2 * self.pad;
        let wp = w + 2 * self.pad;
        if hp < self.kh {
            return Err(Error::Shape {
                axis: 1,
                expected: self.kh,
                got: hp,
                context: "padded input height smaller than kernel".into(),
            });
        }
        if wp < self.kw {
            return Err(Error::Shape {
                axis: 2,
                expected: self.kw,
                got: wp,
                context: "padded input width smaller than kernel".into(),
            });
        }
        Ok((
            (hp - self.kh) / self.stride + 1,
            (wp - self.kw) / self.stride + 1,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Forward convolution with fused relu:
/// out[v] = relu(bias[v] + sum_u kernel[v][u] cross-correlated with in[u]).
pub fn conv_forward(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if c != layer.in_ch {
        return Err(Error::Shape {
            axis: 0,
            expected: layer.in_ch,
            got: c,
            context: "conv input channels".into(),
        });
    }
    let (oh, ow) = layer.out_extents(h, w)?;
    let mut out = vec![0.0; layer.out_ch * oh * ow];
    let in_data = input.data();
    for v in 0..layer.out_ch {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = layer.bias[v];
                for u in 0..layer.in_ch {
                    for a in 0..layer.kh {
                        let ih = (i * layer.stride + a) as isize - layer.pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let row = (u * h + ih as usize) * w;
                        for b in 0..layer.kw {
                            let iw = (j * layer.stride + b) as isize - layer.pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            acc += layer.k(v, u, a, b) * in_data[row + iw as usize];
                        }
                    }
                }
                out[(v * oh + i) * ow + j] = acc.max(0.0);
            }
        }
    }
    Tensor::chw(layer.out_ch, oh, ow, out)
}

/// Backward pass for `conv_forward`. `output` is the cached forward
/// result; relu is gated where the output is strictly positive.
/// Returns kernel and bias gradients plus the error w.r.t. the input.
pub fn conv_backward(
    layer: &ConvLayer,
    input: &Tensor,
    output: &Tensor,
    upstream: &Tensor,
) -> Result<(ConvGrads, Tensor)> {
    let (c, h, w) = input.dims3()?;
    let (oc, oh, ow) = output.dims3()?;
    if upstream.shape() != output.shape() {
        return Err(Error::Dimension(format!(
            "conv upstream shape {:?} does not match output {:?}",
            upstream.shape(),
            output.shape()
        )));
    }
    let mut dk = vec![0.0; layer.kernels.len()];
    let mut db = vec![0.0; layer.bias.len()];
    let mut dx = vec![0.0; c * h * w];
    let in_data = input.data();
    for v in 0..oc {
        for i in 0..oh {
            for j in 0..ow {
                let o = (v * oh + i) * ow + j;
                if output.data()[o] <= 0.0 {
                    continue;
                }
                let g = upstream.data()[o];
                if g == 0.0 {
                    continue;
                }
                db[v] += g;
                for u in 0..c {
                    for a in 0..layer.kh {
                        let ih = (i * layer.stride + a) as isize - layer.pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let row = (u * h + ih as usize) * w;
                        for b in 0..layer.kw {
                            let iw = (j * layer.stride + b) as isize - layer.pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let ki = ((v * c + u) * layer.kh + a) * layer.kw + b;
                            dk[ki] += g * in_data[row + iw as usize];
                            dx[row + iw as usize] += g * layer.kernels[ki];
                        }
                    }
                }
            }
        }
    }
    Ok((
        ConvGrads {
            kernels: dk,
            bias: db,
        },
        Tensor::chw(c, h, w, dx)?,
    ))
}

// ---------------------------------------------------------------------------
// Max pooling

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub fn square(cell: usize, stride: usize) -> Self {
        PoolSpec {
            h: cell,
            w: cell,
            stride,
        }
    }

    pub fn out_extents(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h < self.h {
            return Err(Error::Shape {
                axis: 1,
                expected: self.h,
                got: h,
                context: "pool input height smaller than cell".into(),
            });
        }
        if w < self.w {
            return Err(Error::Shape {
                axis: 2,
                expected: self.w,
                got: w,
                context: "pool input width smaller than cell".into(),
            });
        }
        Ok((
            (h - self.h) / self.stride + 1,
            (w - self.w) / self.stride + 1,
        ))
    }
}

/// Max pooling. Also returns, per output element, the flat input index of
/// the winning element; ties go to the first index in row-major window
/// order, which keeps the argmax map deterministic.
pub fn pool_forward(input: &Tensor, spec: &PoolSpec) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = input.dims3()?;
    let (oh, ow) = spec.out_extents(h, w)?;
    let mut out = vec![0.0; c * oh * ow];
    let mut arg = vec![0usize; c * oh * ow];
    let data = input.data();
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for a in 0..spec.h {
                    let ih = i * spec.stride + a;
                    let row = (ch * h + ih) * w;
                    for b in 0..spec.w {
                        let idx = row + j * spec.stride + b;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ch * oh + i) * ow + j;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    Ok((Tensor::chw(c, oh, ow, out)?, arg))
}

/// Route upstream error to the winning input positions. Accumulates,
/// since overlapping windows (stride < cell) can share a winner.
pub fn pool_backward(argmax: &[usize], input_shape: &[usize], upstream: &Tensor) -> Result<Tensor> {
    if argmax.len() != upstream.len() {
        return Err(Error::Dimension(format!(
            "pool argmax map has {} entries, upstream has {}",
            argmax.len(),
            upstream.len()
        )));
    }
    let n: usize = input_shape.iter().product();
    let mut dx = vec![0.0; n];
    for (o, &idx) in argmax.iter().enumerate() {
        dx[idx] += upstream.data()[o];
    }
    Tensor::new(input_shape.to_vec(), dx)
}

// ---------------------------------------------------------------------------
// Fully connected

#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub out_dim: usize,
    pub in_dim: usize,
    /// Weights, row-major [out_dim, in_dim].
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FcLayer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        FcLayer {
            out_dim,
            in_dim,
            weights: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn init(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> Self {
        let hw = init_half_width(in_dim, out_dim);
        FcLayer {
            weights: init_uniform(rng, out_dim * in_dim, hw),
            ..FcLayer::zeros(out_dim, in_dim)
        }
    }
}

#[derive(Debug, Clone)]
pub struct FcGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// out = (relu?)(W x + b) for a flat input.
pub fn fc_forward(input: &[f64], layer: &FcLayer, apply_relu: bool) -> Result<Tensor> {
    if input.len() != layer.in_dim {
        return Err(Error::Shape {
            axis: 0,
            expected: layer.in_dim,
            got: input.len(),
            context: "fc input length".into(),
        });
    }
    let mut out = vec![0.0; layer.out_dim];
    for (i, o) in out.iter_mut().enumerate() {
        let row = &layer.weights[i * layer.in_dim..(i + 1) * layer.in_dim];
        let mut acc = layer.bias[i];
        for (wv, xv) in row.iter().zip(input) {
            acc += wv * xv;
        }
        *o = if apply_relu { acc.max(0.0) } else { acc };
    }
    Ok(Tensor::flat(out))
}

/// Backward pass for `fc_forward`. When the forward pass applied relu,
/// pass the cached output and `had_relu = true` so the gate matches.
pub fn fc_backward(
    layer: &FcLayer,
    input: &[f64],
    output: &Tensor,
    upstream: &[f64],
    had_relu: bool,
) -> Result<(FcGrads, Vec<f64>)> {
    if upstream.len() != layer.out_dim {
        return Err(Error::Shape {
            axis: 0,
            expected: layer.out_dim,
            got: upstream.len(),
            context: "fc upstream length".into(),
        });
    }
    let mut dw = vec![0.0; layer.weights.len()];
    let mut db = vec![0.0; layer.out_dim];
    let mut dx = vec![0.0; layer.in_dim];
    for i in 0..layer.out_dim {
        let g = if had_relu && output.data()[i] <= 0.0 {
            0.0
        } else {
            upstream[i]
        };
        if g == 0.0 {
            continue;
        }
        db[i] = g;
        let row = i * layer.in_dim;
        for j in 0..layer.in_dim {
            dw[row + j] = g * input[j];
            dx[j] += g * layer.weights[row + j];
        }
    }
    Ok((
        FcGrads {
            weights: dw,
            bias: db,
        },
        dx,
    ))
}

// ---------------------------------------------------------------------------
// Optimizer

/// One momentum SGD step over a parameter array, in place:
/// delta' = 0.9 delta - 0.001 eps w - eps g, then w += delta'.
/// The momentum and decay constants are part of the update rule, not
/// tunables. Rejects non-finite gradients so divergence surfaces at the
/// step that produced it.
pub fn sgd_step(params: &mut [f64], grads: &[f64], momentum: &mut [f64], eps: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != momentum.len() {
        return Err(Error::Dimension(format!(
            "sgd_step lengths differ: params {}, grads {}, momentum {}",
            params.len(),
            grads.len(),
            momentum.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient component {i} is {g}; aborting update"
            )));
        }
        let d = MOMENTUM * momentum[i] - WEIGHT_DECAY * eps * params[i] - eps * g;
        momentum[i] = d;
        params[i] += d;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central-difference gradient of a scalar function; the testing oracle
/// for every analytic backward pass in the crate.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + step;
        let fp = f(&xs);
        xs[i] = orig - step;
        let fm = f(&xs);
        xs[i] = orig;
        g[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Relative error between a numeric and an analytic value, guarded for
/// near-zero magnitudes.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Independent quadruple-loop convolution oracle (pre-activation,
    /// then relu), deliberately written without the production code's
    /// index tricks.
    fn conv_oracle(input: &Tensor, layer: &ConvLayer) -> Tensor {
        let (c, h, w) = input.dims3().unwrap();
        let (oh, ow) = layer.out_extents(h, w).unwrap();
        let mut out = Tensor::zeros(vec![layer.out_ch, oh, ow]);
        for v in 0..layer.out_ch {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = layer.bias[v];
                    for u in 0..c {
                        for a in 0..layer.kh {
                            for b in 0..layer.kw {
                                let ih = (i * layer.stride + a) as isize - layer.pad as isize;
                                let iw = (j * layer.stride + b) as isize - layer.pad as isize;
                                let x =
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w
                                    {
                                        input.at3(u, ih as usize, iw as usize)
                                    } else {
                                        0.0
                                    };
                                s += layer.k(v, u, a, b) * x;
                            }
                        }
                    }
                    out.set3(v, i, j, s.max(0.0));
                }
            }
        }
        out
    }

    #[test]
    fn relu_matches_definition() {
        let t = Tensor::flat(vec![-1.0, 0.0, 2.5]);
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn identity_kernel_preserves_nonnegative_input() {
        let mut layer = ConvLayer::zeros(1, 1, 1, 1, 1, 0);
        layer.kernels[0] = 1.0;
        let input = Tensor::chw(1, 2, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let out = conv_forward(&input, &layer).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn zero_kernels_emit_relu_of_bias() {
        let mut layer = ConvLayer::zeros(2, 1, 3, 3, 1, 0);
        layer.bias = vec![0.7, -0.7];
        let input = Tensor::chw(1, 4, 4, (0..16).map(|v| v as f64).collect()).unwrap();
        let out = conv_forward(&input, &layer).unwrap();
        for i in 0..out.shape()[1] * out.shape()[2] {
            assert_eq!(out.data()[i], 0.7);
            assert_eq!(out.data()[out.shape()[1] * out.shape()[2] + i], 0.0);
        }
    }

    #[test]
    fn conv_matches_quadruple_loop_oracle() {
        let mut r = rng(11);
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 0), (2, 1)] {
            let layer = ConvLayer::init(&mut r, 3, 2, 3, 3, stride, pad);
            let input =
                Tensor::chw(2, 6, 5, (0..60).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
            let got = conv_forward(&input, &layer).unwrap();
            let want = conv_oracle(&input, &layer);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_too_small_input() {
        let layer = ConvLayer::zeros(1, 1, 5, 5, 1, 0);
        let input = Tensor::chw(1, 4, 8, vec![0.0; 32]).unwrap();
        let err = conv_forward(&input, &layer).unwrap_err();
        assert!(err.to_string().contains("axis 1"), "{err}");
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let layer = ConvLayer::zeros(1, 3, 3, 3, 1, 0);
        let input = Tensor::chw(2, 5, 5, vec![0.0; 50]).unwrap();
        let err = conv_forward(&input, &layer).unwrap_err();
        assert!(err.to_string().contains("axis 0"), "{err}");
    }

    #[test]
    fn pool_constant_map_stays_constant() {
        let input = Tensor::chw(1, 4, 4, vec![3.3; 16]).unwrap();
        let (out, _) = pool_forward(&input, &PoolSpec::square(2, 2)).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 3.3));
    }

    #[test]
    fn pool_is_invariant_to_permutation_within_cell() {
        let a = Tensor::chw(1, 2, 2, vec![1.0, 4.0, 2.0, 3.0]).unwrap();
        let b = Tensor::chw(1, 2, 2, vec![4.0, 2.0, 3.0, 1.0]).unwrap();
        let spec = PoolSpec::square(2, 2);
        let (oa, _) = pool_forward(&a, &spec).unwrap();
        let (ob, _) = pool_forward(&b, &spec).unwrap();
        assert_eq!(oa.data(), ob.data());
    }

    #[test]
    fn pool_matches_exhaustive_max() {
        let mut r = rng(5);
        let input =
            Tensor::chw(2, 4, 6, (0..48).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap();
        let spec = PoolSpec::square(2, 2);
        let (out, arg) = pool_forward(&input, &spec).unwrap();
        for c in 0..2 {
            for i in 0..2 {
                for j in 0..3 {
                    let mut want = f64::NEG_INFINITY;
                    for a in 0..2 {
                        for b in 0..2 {
                            want = want.max(input.at3(c, 2 * i + a, 2 * j + b));
                        }
                    }
                    let o = (c * 2 + i) * 3 + j;
                    assert_eq!(out.data()[o], want);
                    assert_eq!(input.data()[arg[o]], want);
                }
            }
        }
    }

    #[test]
    fn pool_tie_goes_to_first_row_major_index() {
        let input = Tensor::chw(1, 2, 2, vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let (_, arg) = pool_forward(&input, &PoolSpec::square(2, 2)).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn pool_backward_routes_to_winners() {
        let input = Tensor::chw(1, 2, 2, vec![1.0, 9.0, 2.0, 3.0]).unwrap();
        let (_, arg) = pool_forward(&input, &PoolSpec::square(2, 2)).unwrap();
        let up = Tensor::chw(1, 1, 1, vec![2.5]).unwrap();
        let dx = pool_backward(&arg, input.shape(), &up).unwrap();
        assert_eq!(dx.data(), &[0.0, 2.5, 0.0, 0.0]);
    }

    #[test]
    fn overlapping_pool_backward_accumulates() {
        // stride 1 with 2-wide cells: the middle element can win twice.
        let input = Tensor::chw(1, 1, 3, vec![0.0, 9.0, 0.0]).unwrap();
        let spec = PoolSpec {
            h: 1,
            w: 2,
            stride: 1,
        };
        let (_, arg) = pool_forward(&input, &spec).unwrap();
        let up = Tensor::chw(1, 1, 2, vec![1.0, 1.0]).unwrap();
        let dx = pool_backward(&arg, input.shape(), &up).unwrap();
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn fc_identity_weights() {
        let mut layer = FcLayer::zeros(3, 3);
        for i in 0..3 {
            layer.weights[i * 3 + i] = 1.0;
        }
        let out = fc_forward(&[1.0, -2.0, 3.0], &layer, false).unwrap();
        assert_eq!(out.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn fc_matches_matvec_oracle() {
        let mut r = rng(17);
        let layer = FcLayer::init(&mut r, 4, 6);
        let x: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
        let out = fc_forward(&x, &layer, false).unwrap();
        for i in 0..4 {
            let mut want = layer.bias[i];
            for j in 0..6 {
                want += layer.weights[i * 6 + j] * x[j];
            }
            assert!((out.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut r = rng(23);
        let layer = ConvLayer::init(&mut r, 2, 2, 3, 3, 1, 1);
        let input =
            Tensor::chw(2, 5, 4, (0..40).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let out = conv_forward(&input, &layer).unwrap();
        // Linear readout makes the finite-difference target exact up to
        // relu kinks; the seed keeps pre-activations away from zero.
        let coef: Vec<f64> = (0..out.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let upstream = Tensor::new(out.shape().to_vec(), coef.clone()).unwrap();
        let (grads, dx) = conv_backward(&layer, &input, &out, &upstream).unwrap();

        let loss = |l: &ConvLayer, x: &Tensor| -> f64 {
            conv_forward(x, l)
                .unwrap()
                .data()
                .iter()
                .zip(&coef)
                .map(|(o, c)| o * c)
                .sum()
        };
        let fd_k = finite_diff_grad(
            |k| {
                let mut l = layer.clone();
                l.kernels = k.to_vec();
                loss(&l, &input)
            },
            &layer.kernels,
            1e-5,
        );
        for (a, b) in grads.kernels.iter().zip(&fd_k) {
            assert!(relative_error(*a, *b) < 1e-6, "{a} vs {b}");
        }
        let fd_b = finite_diff_grad(
            |bv| {
                let mut l = layer.clone();
                l.bias = bv.to_vec();
                loss(&l, &input)
            },
            &layer.bias,
            1e-5,
        );
        for (a, b) in grads.bias.iter().zip(&fd_b) {
            assert!(relative_error(*a, *b) < 1e-6);
        }
        let fd_x = finite_diff_grad(
            |xv| {
                let x = Tensor::new(input.shape().to_vec(), xv.to_vec()).unwrap();
                loss(&layer, &x)
            },
            input.data(),
            1e-5,
        );
        for (a, b) in dx.data().iter().zip(&fd_x) {
            assert!(relative_error(*a, *b) < 1e-6);
        }
    }

    #[test]
    fn fc_backward_matches_finite_differences() {
        let mut r = rng(29);
        let layer = FcLayer::init(&mut r, 5, 7);
        let x: Vec<f64> = (0..7).map(|_| r.gen_range(-1.0..1.0)).collect();
        let coef: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
        for &had_relu in &[false, true] {
            let out = fc_forward(&x, &layer, had_relu).unwrap();
            let up: Vec<f64> = coef.clone();
            let (grads, dx) = fc_backward(&layer, &x, &out, &up, had_relu).unwrap();
            let loss = |l: &FcLayer, xv: &[f64]| -> f64 {
                fc_forward(xv, l, had_relu)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(&coef)
                    .map(|(o, c)| o * c)
                    .sum()
            };
            let fd_w = finite_diff_grad(
                |wv| {
                    let mut l = layer.clone();
                    l.weights = wv.to_vec();
                    loss(&l, &x)
                },
                &layer.weights,
                1e-5,
            );
            for (a, b) in grads.weights.iter().zip(&fd_w) {
                assert!(relative_error(*a, *b) < 1e-6);
            }
            let fd_x = finite_diff_grad(|xv| loss(&layer, xv), &x, 1e-5);
            for (a, b) in dx.iter().zip(&fd_x) {
                assert!(relative_error(*a, *b) < 1e-6);
            }
        }
    }

    #[test]
    fn zero_upstream_yields_zero_grads() {
        let mut r = rng(31);
        let layer = ConvLayer::init(&mut r, 2, 1, 3, 3, 1, 0);
        let input = Tensor::chw(1, 5, 5, (0..25).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
        let out = conv_forward(&input, &layer).unwrap();
        let up = Tensor::zeros(out.shape().to_vec());
        let (grads, dx) = conv_backward(&layer, &input, &out, &up).unwrap();
        assert!(grads.kernels.iter().all(|&v| v == 0.0));
        assert!(grads.bias.iter().all(|&v| v == 0.0));
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sgd_step_worked_example() {
        // W=1, delta=0, g=0.5, eps=0.01 -> delta'=-0.00501, W'=0.99499.
        let mut w = vec![1.0];
        let mut m = vec![0.0];
        sgd_step(&mut w, &[0.5], &mut m, 0.01).unwrap();
        assert!((m[0] - (-0.00501)).abs() < 1e-15);
        assert!((w[0] - 0.99499).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_zero_momentum_applies_pure_decay() {
        let mut w = vec![2.0];
        let mut m = vec![0.0];
        sgd_step(&mut w, &[0.0], &mut m, 0.1).unwrap();
        // shrink by 0.001 * eps * W = 0.0002
        assert!((w[0] - 1.9998).abs() < 1e-15);
    }

    #[test]
    fn sgd_two_steps_match_symbolic_unroll() {
        let (w0, g1, g2, eps) = (0.8, 0.3, -0.2, 0.05);
        let mut w = vec![w0];
        let mut m = vec![0.0];
        sgd_step(&mut w, &[g1], &mut m, eps).unwrap();
        sgd_step(&mut w, &[g2], &mut m, eps).unwrap();
        let d1 = -WEIGHT_DECAY * eps * w0 - eps * g1;
        let w1 = w0 + d1;
        let d2 = MOMENTUM * d1 - WEIGHT_DECAY * eps * w1 - eps * g2;
        let w2 = w1 + d2;
        assert!((w[0] - w2).abs() < 1e-15);
        assert!((m[0] - d2).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut w = vec![1.0];
        let mut m = vec![0.0];
        let err = sgd_step(&mut w, &[f64::NAN], &mut m, 0.01).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn finite_diff_on_square_and_linear() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_diff_grad(|x| 4.0 * x[0] - 2.0 * x[1], &[1.0, 2.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-9);
        assert!((g[1] + 2.0).abs() < 1e-9);
    }

    #[test]
    fn stable_sigmoid_and_softplus() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-300);
        assert!((softplus(800.0) - 800.0).abs() < 1e-9);
        assert!(softplus(-800.0).abs() < 1e-300);
    }
}
