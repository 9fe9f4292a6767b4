//! The patch classifier. Four conv + max-pool blocks, one hidden fc
//! layer, then a top hidden layer that fuses the structure projection
//! vector: h = relu(W h_prev + b + Wz z + bz). Nineteen sigmoid bits
//! read h through a weight matrix with no bias. Loss and gradients honor
//! the per-bit observation mask and per-task importance coefficients:
//! an unobserved bit contributes exactly nothing to either.

use crate::error::Error;
use crate::nn::{
    self, conv_backward, conv_forward, fc_backward, fc_forward, pool_backward, pool_forward,
    ConvGrads, ConvLayer, FcGrads, FcLayer, PoolSpec,
};
use crate::taskcodec::{LabelVector, TaskLayout, Viewpoint, MAIN_TASK, NUM_BITS, VIEWPOINT_TASK};
use crate::tensor::Tensor;
use crate::Result;
use rand_chacha::ChaCha8Rng;

/// Architecture geometry. Everything is overridable from config; the
/// defaults describe a 64x32 grayscale patch flowing through kernel
/// sizes 5,3,3,3 and 2x2/stride-2 pools down to a 3x1 map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Geometry {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub conv_channels: [usize; 4],
    pub conv_kernels: [usize; 4],
    pub conv_pads: [usize; 4],
    pub pool_cell: usize,
    pub pool_stride: usize,
    pub fc5: usize,
    pub hidden: usize,
    pub spv_dim: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            in_ch: 1,
            in_h: 64,
            in_w: 32,
            conv_channels: [8, 16, 32, 32],
            conv_kernels: [5, 3, 3, 3],
            conv_pads: [0, 1, 1, 1],
            pool_cell: 2,
            pool_stride: 2,
            fc5: 256,
            hidden: 200,
            spv_dim: 100,
        }
    }
}

impl Geometry {
    /// A small geometry for gradient checks and other tests that walk
    /// the full stack many times.
    pub fn tiny() -> Self {
        Geometry {
            conv_channels: [2, 2, 3, 2],
            fc5: 8,
            hidden: 6,
            spv_dim: 4,
            ..Geometry::default()
        }
    }

    /// Spatial extents after each conv/pool block; errors if any stage
    /// collapses below its kernel or cell.
    pub fn stage_extents(&self) -> Result<Vec<(usize, usize)>> {
        let pool = PoolSpec::square(self.pool_cell, self.pool_stride);
        let (mut h, mut w) = (self.in_h, self.in_w);
        let mut out = Vec::new();
        for i in 0..4 {
            let conv = ConvLayer::zeros(
                self.conv_channels[i],
                1,
                self.conv_kernels[i],
                self.conv_kernels[i],
                1,
                self.conv_pads[i],
            );
            let (ch, cw) = conv.out_extents(h, w)?;
            let (ph, pw) = pool.out_extents(ch, cw)?;
            h = ph;
            w = pw;
            out.push((h, w));
        }
        Ok(out)
    }

    /// Flattened length after the last pool.
    pub fn flat_dim(&self) -> Result<usize> {
        let stages = self.stage_extents()?;
        let (h, w) = stages[3];
        Ok(self.conv_channels[3] * h * w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaCnnModel {
    pub geometry: Geometry,
    pub conv: Vec<ConvLayer>,
    pub pool: PoolSpec,
    pub fc5: FcLayer,
    pub fc6: FcLayer,
    /// SPV fusion weights, row-major [hidden, spv_dim], and bias.
    pub spv_w: Vec<f64>,
    pub spv_b: Vec<f64>,
    /// Task readout, row-major [NUM_BITS, hidden]; sigmoid, no bias.
    pub task_w: Vec<f64>,
}

impl TaCnnModel {
    pub fn init(geometry: &Geometry, rng: &mut ChaCha8Rng) -> Result<TaCnnModel> {
        let flat = geometry.flat_dim()?;
        let mut conv = Vec::new();
        let mut in_ch = geometry.in_ch;
        for i in 0..4 {
            conv.push(ConvLayer::init(
                rng,
                geometry.conv_channels[i],
                in_ch,
                geometry.conv_kernels[i],
                geometry.conv_kernels[i],
                1,
                geometry.conv_pads[i],
            ));
            in_ch = geometry.conv_channels[i];
        }
        let fc5 = FcLayer::init(rng, geometry.fc5, flat);
        let fc6 = FcLayer::init(rng, geometry.hidden, geometry.fc5);
        let spv_hw = nn::init_half_width(geometry.spv_dim, geometry.hidden);
        let spv_w = nn::init_uniform(rng, geometry.hidden * geometry.spv_dim, spv_hw);
        let task_hw = nn::init_half_width(geometry.hidden, NUM_BITS);
        let task_w = nn::init_uniform(rng, NUM_BITS * geometry.hidden, task_hw);
        Ok(TaCnnModel {
            geometry: geometry.clone(),
            conv,
            pool: PoolSpec::square(geometry.pool_cell, geometry.pool_stride),
            fc5,
            fc6,
            spv_w,
            spv_b: vec![0.0; geometry.hidden],
            task_w,
        })
    }

    /// Parameter arrays in checkpoint order.
    pub fn named_arrays(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        for (i, c) in self.conv.iter().enumerate() {
            out.push((
                format!("conv{}.k", i + 1),
                vec![c.out_ch, c.in_ch, c.kh, c.kw],
                &c.kernels,
            ));
            out.push((format!("conv{}.b", i + 1), vec![c.out_ch], &c.bias));
        }
        out.push((
            "fc5.w".into(),
            vec![self.fc5.out_dim, self.fc5.in_dim],
            &self.fc5.weights,
        ));
        out.push(("fc5.b".into(), vec![self.fc5.out_dim], &self.fc5.bias));
        out.push((
            "fc6.w".into(),
            vec![self.fc6.out_dim, self.fc6.in_dim],
            &self.fc6.weights,
        ));
        out.push(("fc6.b".into(), vec![self.fc6.out_dim], &self.fc6.bias));
        out.push((
            "spv.w".into(),
            vec![self.geometry.hidden, self.geometry.spv_dim],
            &self.spv_w,
        ));
        out.push(("spv.b".into(), vec![self.geometry.hidden], &self.spv_b));
        out.push((
            "task.w".into(),
            vec![NUM_BITS, self.geometry.hidden],
            &self.task_w,
        ));
        out
    }
}

/// Network output for one patch.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Per-bit sigmoid probabilities.
    pub probs: [f64; NUM_BITS],
    /// Pre-sigmoid logits; kept so losses stay stable at saturation.
    pub logits: [f64; NUM_BITS],
    /// Top hidden layer activations.
    pub features: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: [f64; NUM_BITS], features: Vec<f64>) -> Prediction {
        let mut probs = [0.0; NUM_BITS];
        for (p, t) in probs.iter_mut().zip(logits.iter()) {
            *p = nn::sigmoid(*t);
        }
        Prediction {
            probs,
            logits,
            features,
        }
    }

    pub fn viewpoint(&self) -> Viewpoint {
        crate::taskcodec::decode_viewpoint(self.probs[9], self.probs[10])
    }
}

/// Everything backward needs from a forward pass.
pub struct ForwardCache {
    patch: Tensor,
    z: Vec<f64>,
    conv_out: Vec<Tensor>,
    pool_out: Vec<Tensor>,
    pool_arg: Vec<Vec<usize>>,
    fc5_out: Tensor,
    hidden: Vec<f64>,
}

impl TaCnnModel {
    pub fn forward(&self, patch: &Tensor, z: &[f64]) -> Result<Prediction> {
        self.forward_cached(patch, z).map(|(p, _)| p)
    }

    pub fn forward_cached(&self, patch: &Tensor, z: &[f64]) -> Result<(Prediction, ForwardCache)> {
        let g = &self.geometry;
        let (c, h, w) = patch.dims3()?;
        if (c, h, w) != (g.in_ch, g.in_h, g.in_w) {
            return Err(Error::Dimension(format!(
                "patch shape ({c},{h},{w}) does not match geometry ({},{},{})",
                g.in_ch, g.in_h, g.in_w
            )));
        }
        if z.len() != g.spv_dim {
            return Err(Error::Shape {
                axis: 0,
                expected: g.spv_dim,
                got: z.len(),
                context: "spv vector length".into(),
            });
        }
        let mut conv_out = Vec::with_capacity(4);
        let mut pool_out = Vec::with_capacity(4);
        let mut pool_arg = Vec::with_capacity(4);
        let mut cur = patch.clone();
        for layer in &self.conv {
            let co = conv_forward(&cur, layer)?;
            let (po, arg) = pool_forward(&co, &self.pool)?;
            conv_out.push(co);
            pool_arg.push(arg);
            cur = po.clone();
            pool_out.push(po);
        }
        let flat = cur.data();
        let fc5_out = fc_forward(flat, &self.fc5, true)?;
        // h = relu(W6 h5 + b6 + Wz z + bz)
        let pre = fc_forward(fc5_out.data(), &self.fc6, false)?;
        let mut hidden = pre.into_data();
        for (i, hv) in hidden.iter_mut().enumerate() {
            let row = &self.spv_w[i * g.spv_dim..(i + 1) * g.spv_dim];
            let mut acc = self.spv_b[i];
            for (wv, zv) in row.iter().zip(z) {
                acc += wv * zv;
            }
            *hv = (*hv + acc).max(0.0);
        }
        let mut logits = [0.0; NUM_BITS];
        for (b, t) in logits.iter_mut().enumerate() {
            let row = &self.task_w[b * g.hidden..(b + 1) * g.hidden];
            *t = row.iter().zip(&hidden).map(|(wv, hv)| wv * hv).sum();
        }
        let pred = Prediction::from_logits(logits, hidden.clone());
        let cache = ForwardCache {
            patch: patch.clone(),
            z: z.to_vec(),
            conv_out,
            pool_out,
            pool_arg,
            fc5_out,
            hidden,
        };
        Ok((pred, cache))
    }
}

// ---------------------------------------------------------------------------
// Loss and gradients

/// Masked, coefficient-weighted cross entropy:
/// E = -sum_b mask_b lambda_b [y_b ln p_b + (1-y_b) ln(1-p_b)].
/// Computed from logits via softplus so saturated bits stay finite.
/// Unobserved bits are skipped outright, never multiplied by zero.
pub fn weighted_ce_loss(
    pred: &Prediction,
    label: &LabelVector,
    lambda_bits: &[f64; NUM_BITS],
) -> f64 {
    let mut e = 0.0;
    for b in 0..NUM_BITS {
        if !label.mask[b] {
            continue;
        }
        let t = pred.logits[b];
        let term = if label.bits[b] {
            nn::softplus(-t)
        } else {
            nn::softplus(t)
        };
        e += lambda_bits[b] * term;
    }
    e
}

/// Per-bit output error, (prediction - target) on observed bits and
/// exactly 0 elsewhere. This is the gradient of the unit-coefficient
/// loss with respect to the logits.
pub fn masked_output_error(pred: &Prediction, label: &LabelVector) -> [f64; NUM_BITS] {
    let mut e = [0.0; NUM_BITS];
    for b in 0..NUM_BITS {
        if label.mask[b] {
            e[b] = pred.probs[b] - label.value(b);
        }
    }
    e
}

#[derive(Debug, Clone)]
pub struct Grads {
    pub conv: Vec<ConvGrads>,
    pub fc5: FcGrads,
    pub fc6: FcGrads,
    pub spv_w: Vec<f64>,
    pub spv_b: Vec<f64>,
    pub task_w: Vec<f64>,
}

impl Grads {
    pub fn zeros_like(model: &TaCnnModel) -> Grads {
        Grads {
            conv: model
                .conv
                .iter()
                .map(|c| ConvGrads {
                    kernels: vec![0.0; c.kernels.len()],
                    bias: vec![0.0; c.bias.len()],
                })
                .collect(),
            fc5: FcGrads {
                weights: vec![0.0; model.fc5.weights.len()],
                bias: vec![0.0; model.fc5.bias.len()],
            },
            fc6: FcGrads {
                weights: vec![0.0; model.fc6.weights.len()],
                bias: vec![0.0; model.fc6.bias.len()],
            },
            spv_w: vec![0.0; model.spv_w.len()],
            spv_b: vec![0.0; model.spv_b.len()],
            task_w: vec![0.0; model.task_w.len()],
        }
    }

    /// self += scale * other, in a fixed array order.
    pub fn axpy(&mut self, other: &Grads, scale: f64) {
        fn acc(dst: &mut [f64], src: &[f64], s: f64) {
            for (d, v) in dst.iter_mut().zip(src) {
                *d += s * v;
            }
        }
        for (d, s) in self.conv.iter_mut().zip(&other.conv) {
            acc(&mut d.kernels, &s.kernels, scale);
            acc(&mut d.bias, &s.bias, scale);
        }
        acc(&mut self.fc5.weights, &other.fc5.weights, scale);
        acc(&mut self.fc5.bias, &other.fc5.bias, scale);
        acc(&mut self.fc6.weights, &other.fc6.weights, scale);
        acc(&mut self.fc6.bias, &other.fc6.bias, scale);
        acc(&mut self.spv_w, &other.spv_w, scale);
        acc(&mut self.spv_b, &other.spv_b, scale);
        acc(&mut self.task_w, &other.task_w, scale);
    }

    pub fn scale(&mut self, s: f64) {
        for c in &mut self.conv {
            c.kernels.iter_mut().for_each(|v| *v *= s);
            c.bias.iter_mut().for_each(|v| *v *= s);
        }
        for arr in [
            &mut self.fc5.weights,
            &mut self.fc5.bias,
            &mut self.fc6.weights,
            &mut self.fc6.bias,
            &mut self.spv_w,
            &mut self.spv_b,
            &mut self.task_w,
        ] {
            arr.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Full backward pass for one patch. The output-layer error is the
/// masked per-bit error scaled by the expanded coefficients; everything
/// below is plain backprop through the cached forward pass.
pub fn backward(
    model: &TaCnnModel,
    pred: &Prediction,
    cache: &ForwardCache,
    label: &LabelVector,
    lambda_bits: &[f64; NUM_BITS],
) -> Result<Grads> {
    let g = &model.geometry;
    let err = masked_output_error(pred, label);
    let mut dlogit = [0.0; NUM_BITS];
    for b in 0..NUM_BITS {
        dlogit[b] = lambda_bits[b] * err[b];
    }

    // task_w grads and hidden error
    let mut task_w_grad = vec![0.0; model.task_w.len()];
    let mut dhidden = vec![0.0; g.hidden];
    for b in 0..NUM_BITS {
        if dlogit[b] == 0.0 {
            continue;
        }
        let row = b * g.hidden;
        for j in 0..g.hidden {
            task_w_grad[row + j] = dlogit[b] * cache.hidden[j];
            dhidden[j] += dlogit[b] * model.task_w[row + j];
        }
    }

    // relu gate at the fused hidden layer
    for (j, d) in dhidden.iter_mut().enumerate() {
        if cache.hidden[j] <= 0.0 {
            *d = 0.0;
        }
    }

    // split the pre-activation error into fc6 and spv fusion parts
    let mut spv_w_grad = vec![0.0; model.spv_w.len()];
    let mut spv_b_grad = vec![0.0; g.hidden];
    for j in 0..g.hidden {
        let d = dhidden[j];
        if d == 0.0 {
            continue;
        }
        spv_b_grad[j] = d;
        let row = j * g.spv_dim;
        for (k, zv) in cache.z.iter().enumerate() {
            spv_w_grad[row + k] = d * zv;
        }
    }
    let pseudo_out = Tensor::flat(cache.hidden.clone());
    let (fc6_grads, dfc5) = fc_backward(
        &model.fc6,
        cache.fc5_out.data(),
        &pseudo_out,
        &dhidden,
        false,
    )?;

    let (fc5_grads, dflat) = fc_backward(
        &model.fc5,
        cache.pool_out[3].data(),
        &cache.fc5_out,
        &dfc5,
        true,
    )?;

    // back through the four pool/conv blocks
    let mut conv_grads: Vec<ConvGrads> = Vec::with_capacity(4);
    let mut upstream = Tensor::new(cache.pool_out[3].shape().to_vec(), dflat)?;
    for i in (0..4).rev() {
        let dconv = pool_backward(&cache.pool_arg[i], cache.conv_out[i].shape(), &upstream)?;
        let input = if i == 0 {
            &cache.patch
        } else {
            &cache.pool_out[i - 1]
        };
        let (cg, dx) = conv_backward(&model.conv[i], input, &cache.conv_out[i], &dconv)?;
        conv_grads.push(cg);
        upstream = dx;
    }
    conv_grads.reverse();

    Ok(Grads {
        conv: conv_grads,
        fc5: fc5_grads,
        fc6: fc6_grads,
        spv_w: spv_w_grad,
        spv_b: spv_b_grad,
        task_w: task_w_grad,
    })
}

/// Momentum buffers matching the model's parameter arrays.
#[derive(Debug, Clone)]
pub struct SgdBuffers {
    arrays: Vec<Vec<f64>>,
}

impl SgdBuffers {
    pub fn zeros_like(model: &TaCnnModel) -> SgdBuffers {
        let mut arrays = Vec::new();
        for c in &model.conv {
            arrays.push(vec![0.0; c.kernels.len()]);
            arrays.push(vec![0.0; c.bias.len()]);
        }
        arrays.push(vec![0.0; model.fc5.weights.len()]);
        arrays.push(vec![0.0; model.fc5.bias.len()]);
        arrays.push(vec![0.0; model.fc6.weights.len()]);
        arrays.push(vec![0.0; model.fc6.bias.len()]);
        arrays.push(vec![0.0; model.spv_w.len()]);
        arrays.push(vec![0.0; model.spv_b.len()]);
        arrays.push(vec![0.0; model.task_w.len()]);
        SgdBuffers { arrays }
    }
}

/// Apply one SGD step to every parameter array.
pub fn apply_sgd(
    model: &mut TaCnnModel,
    grads: &Grads,
    bufs: &mut SgdBuffers,
    eps: f64,
) -> Result<()> {
    let mut it = bufs.arrays.iter_mut();
    for (c, gc) in model.conv.iter_mut().zip(&grads.conv) {
        nn::sgd_step(&mut c.kernels, &gc.kernels, it.next().unwrap(), eps)?;
        nn::sgd_step(&mut c.bias, &gc.bias, it.next().unwrap(), eps)?;
    }
    nn::sgd_step(
        &mut model.fc5.weights,
        &grads.fc5.weights,
        it.next().unwrap(),
        eps,
    )?;
    nn::sgd_step(
        &mut model.fc5.bias,
        &grads.fc5.bias,
        it.next().unwrap(),
        eps,
    )?;
    nn::sgd_step(
        &mut model.fc6.weights,
        &grads.fc6.weights,
        it.next().unwrap(),
        eps,
    )?;
    nn::sgd_step(
        &mut model.fc6.bias,
        &grads.fc6.bias,
        it.next().unwrap(),
        eps,
    )?;
    nn::sgd_step(&mut model.spv_w, &grads.spv_w, it.next().unwrap(), eps)?;
    nn::sgd_step(&mut model.spv_b, &grads.spv_b, it.next().unwrap(), eps)?;
    nn::sgd_step(&mut model.task_w, &grads.task_w, it.next().unwrap(), eps)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Per-task softmax formulation (comparison only)

/// Separate softmax heads over shared features: seventeen 2-state tasks
/// plus the 4-state viewpoint. Twice the readout parameters of the joint
/// sigmoid layer; kept for head-to-head comparison, not used in training.
#[derive(Debug, Clone)]
pub struct SoftmaxHeads {
    pub hidden: usize,
    /// [17, 2, hidden]: binary tasks in task order, skipping viewpoint.
    pub binary_w: Vec<f64>,
    /// [4, hidden] for the viewpoint states.
    pub view_w: Vec<f64>,
}

impl SoftmaxHeads {
    pub fn zeros(hidden: usize) -> SoftmaxHeads {
        SoftmaxHeads {
            hidden,
            binary_w: vec![0.0; 17 * 2 * hidden],
            view_w: vec![0.0; 4 * hidden],
        }
    }

    pub fn init(rng: &mut ChaCha8Rng, hidden: usize) -> SoftmaxHeads {
        let hw = nn::init_half_width(hidden, 2);
        SoftmaxHeads {
            hidden,
            binary_w: nn::init_uniform(rng, 17 * 2 * hidden, hw),
            view_w: nn::init_uniform(rng, 4 * hidden, nn::init_half_width(hidden, 4)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.binary_w.len() + self.view_w.len()
    }

    /// Row index into binary_w for a non-viewpoint task.
    fn binary_slot(task: usize) -> usize {
        assert_ne!(task, VIEWPOINT_TASK);
        if task < VIEWPOINT_TASK {
            task
        } else {
            task - 1
        }
    }
}

fn log_softmax_pick(logits: &[f64], state: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
    logits[state] - lse
}

/// Loss of the per-task softmax formulation on one sample: a weighted
/// sum of per-task NLLs over the sample's observed tasks. The main task
/// weight is fixed at 1; alpha covers the nine pedestrian attribute
/// tasks (viewpoint last), beta the shared and gamma the unshared scene
/// tasks.
pub fn per_task_softmax_loss(
    heads: &SoftmaxHeads,
    features: &[f64],
    label: &LabelVector,
    layout: &TaskLayout,
    alpha: &[f64; 9],
    beta: &[f64; 4],
    gamma: &[f64; 4],
) -> Result<f64> {
    if features.len() != heads.hidden {
        return Err(Error::Shape {
            axis: 0,
            expected: heads.hidden,
            got: features.len(),
            context: "softmax head features".into(),
        });
    }
    let mut loss = 0.0;
    for task in 0..crate::taskcodec::NUM_TASKS {
        let bits = layout.task_bits(task);
        if !bits.clone().all(|b| label.mask[b]) {
            continue;
        }
        let coeff = match task {
            MAIN_TASK => 1.0,
            1..=8 => alpha[task - 1],
            VIEWPOINT_TASK => alpha[8],
            10..=13 => beta[task - 10],
            _ => gamma[task - 14],
        };
        if coeff == 0.0 {
            continue;
        }
        let nll = if task == VIEWPOINT_TASK {
            let state = Viewpoint::from_bits(label.bits[9], label.bits[10]).index();
            let mut logits = [0.0; 4];
            for (s, t) in logits.iter_mut().enumerate() {
                let row = &heads.view_w[s * heads.hidden..(s + 1) * heads.hidden];
                *t = row.iter().zip(features).map(|(w, f)| w * f).sum();
            }
            -log_softmax_pick(&logits, state)
        } else {
            let slot = SoftmaxHeads::binary_slot(task);
            let state = label.bits[bits.start] as usize;
            let mut logits = [0.0; 2];
            for (s, t) in logits.iter_mut().enumerate() {
                let row = &heads.binary_w
                    [(slot * 2 + s) * heads.hidden..(slot * 2 + s + 1) * heads.hidden];
                *t = row.iter().zip(features).map(|(w, f)| w * f).sum();
            }
            -log_softmax_pick(&logits, state)
        };
        loss += coeff * nll;
    }
    Ok(loss)
}
