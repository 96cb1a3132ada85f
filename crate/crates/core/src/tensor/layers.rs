use super::kernels::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Channel groups; 1 is an ordinary convolution.
    pub groups: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolParams {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
}

/// Across-channel local response normalization constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrnParams {
    pub size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub k: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        Self {
            size: 5,
            alpha: 1e-4,
            beta: 0.75,
            k: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv(ConvParams),
    Pool(PoolParams),
    FullyConnected {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    Lrn(LrnParams),
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv(_) => "conv",
            LayerKind::Pool(PoolParams {
                kind: PoolKind::Max,
                ..
            }) => "max-pool",
            LayerKind::Pool(_) => "avg-pool",
            LayerKind::FullyConnected { .. } => "fully-connected",
            LayerKind::Relu => "relu",
            LayerKind::Lrn(_) => "lrn",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv(_) | LayerKind::FullyConnected { .. })
    }
}

/// One layer of a network: its kind plus, for conv and FC, its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T = f32> {
    pub kind: LayerKind,
    pub weights: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Per-layer parameter gradient accumulators, detached from the layer so that
/// workers can accumulate independently.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_for(layer: &Layer<T>) -> Self {
        Self {
            weights: vec![T::zero(); layer.weights.as_ref().map_or(0, Tensor::len)],
            bias: vec![T::zero(); layer.bias.as_ref().map_or(0, Tensor::len)],
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += *b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += *b;
        }
    }
}

/// Whatever a layer's backward pass needs from its forward pass.
#[derive(Clone, Debug)]
pub enum LayerCache<T> {
    Conv { input: Tensor<T> },
    MaxPool { input_shape: Vec<usize>, argmax: Vec<u32> },
    AvgPool { input_shape: Vec<usize> },
    FullyConnected { input: Tensor<T> },
    Relu { input: Tensor<T> },
    Lrn { input: Tensor<T>, scale: Vec<T> },
}

impl<T: Scalar> LayerCache<T> {
    /// Appends the discrete state that makes the layer locally linear
    /// (relu sign pattern, max-pool winners). Two evaluations with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn kink_signature(&self, out: &mut Vec<u32>) {
        match self {
            LayerCache::Relu { input } => {
                out.extend(input.values().iter().map(|&v| u32::from(v > T::zero())))
            }
            LayerCache::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
            _ => {}
        }
    }
}

pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Ceiling-mode pooled size; the final window may hang over the edge and is clamped.
pub fn pool_output_dim(input: usize, window: usize, stride: usize) -> Option<usize> {
    if stride == 0 || window == 0 || window > input {
        return None;
    }
    let out = (input - window).div_ceil(stride) + 1;
    // the last window must start inside the input
    Some(if (out - 1) * stride >= input { out - 1 } else { out })
}

impl<T: Scalar> Layer<T> {
    pub fn relu() -> Self {
        Self::param_free(LayerKind::Relu)
    }

    pub fn pool(kind: PoolKind, window: usize, stride: usize) -> Self {
        Self::param_free(LayerKind::Pool(PoolParams {
            kind,
            window,
            stride,
        }))
    }

    pub fn lrn(params: LrnParams) -> Self {
        Self::param_free(LayerKind::Lrn(params))
    }

    fn param_free(kind: LayerKind) -> Self {
        Self {
            kind,
            weights: None,
            bias: None,
        }
    }

    /// Conv layer with zeroed parameters of the right shapes.
    pub fn conv(params: ConvParams) -> Result<Self, TensorError> {
        if params.groups == 0
            || !params.in_channels.is_multiple_of(params.groups)
            || !params.out_channels.is_multiple_of(params.groups)
        {
            return Err(TensorError::InvalidHyperparameter(format!(
                "conv groups {} must divide in_channels {} and out_channels {}",
                params.groups, params.in_channels, params.out_channels
            )));
        }
        if params.stride == 0 || params.kernel == 0 {
            return Err(TensorError::InvalidHyperparameter(
                "conv stride and kernel must be >= 1".into(),
            ));
        }
        let w = Tensor::zeros(&[
            params.out_channels,
            params.in_channels / params.groups,
            params.kernel,
            params.kernel,
        ]);
        let b = Tensor::zeros(&[params.out_channels]);
        Ok(Self {
            kind: LayerKind::Conv(params),
            weights: Some(w),
            bias: Some(b),
        })
    }

    pub fn fully_connected(in_features: usize, out_features: usize) -> Self {
        Self {
            kind: LayerKind::FullyConnected {
                in_features,
                out_features,
            },
            weights: Some(Tensor::zeros(&[out_features, in_features])),
            bias: Some(Tensor::zeros(&[out_features])),
        }
    }

    /// Builds a layer from explicit parameter values (checked against the kind).
    pub fn with_params(mut self, weights: Vec<T>, bias: Vec<T>) -> Result<Self, TensorError> {
        let (w, b) = match (self.weights.as_mut(), self.bias.as_mut()) {
            (Some(w), Some(b)) => (w, b),
            _ => {
                return Err(TensorError::InvalidHyperparameter(format!(
                    "{} layer has no parameters",
                    self.kind.name()
                )))
            }
        };
        if w.len() != weights.len() || b.len() != bias.len() {
            return Err(TensorError::ShapeMismatch {
                op: "with_params",
                expected: format!("{} weights, {} biases", w.len(), b.len()),
                found: format!("{} weights, {} biases", weights.len(), bias.len()),
            });
        }
        w.values_mut().copy_from_slice(&weights);
        b.values_mut().copy_from_slice(&bias);
        Ok(self)
    }

    pub fn param_count(&self) -> usize {
        self.weights.as_ref().map_or(0, Tensor::len) + self.bias.as_ref().map_or(0, Tensor::len)
    }

    /// Output shape for a batch input of shape `input` (rank 2 or 4).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, TensorError> {
        let dims = match input {
            &[n, c, h, w] => [n, c, h, w],
            &[n, f] => [n, f, 1, 1],
            other => {
                return Err(TensorError::ShapeMismatch {
                    op: self.kind.name(),
                    expected: "rank 2 or rank 4 input".into(),
                    found: format!("{other:?}"),
                })
            }
        };
        let [n, c, h, w] = dims;
        match &self.kind {
            LayerKind::Conv(p) => {
                if c != p.in_channels {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv2d",
                        expected: format!("{} input channels", p.in_channels),
                        found: format!("{c} channels (input shape {input:?})"),
                    });
                }
                let oh = conv_output_dim(h, p.kernel, p.stride, p.pad);
                let ow = conv_output_dim(w, p.kernel, p.stride, p.pad);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![n, p.out_channels, oh, ow]),
                    _ => Err(TensorError::InvalidOutput {
                        op: "conv2d",
                        detail: format!(
                            "kernel {} stride {} pad {} on {h}x{w} input gives no output",
                            p.kernel, p.stride, p.pad
                        ),
                    }),
                }
            }
            LayerKind::Pool(p) => {
                let oh = pool_output_dim(h, p.window, p.stride);
                let ow = pool_output_dim(w, p.window, p.stride);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![n, c, oh, ow]),
                    _ => Err(TensorError::InvalidOutput {
                        op: "pool2d",
                        detail: format!(
                            "window {} stride {} does not fit {h}x{w} input",
                            p.window, p.stride
                        ),
                    }),
                }
            }
            LayerKind::FullyConnected {
                in_features,
                out_features,
            } => {
                if c * h * w != *in_features {
                    return Err(TensorError::ShapeMismatch {
                        op: "fully_connected",
                        expected: format!("{in_features} input features"),
                        found: format!("{} (input shape {input:?})", c * h * w),
                    });
                }
                Ok(vec![n, *out_features])
            }
            LayerKind::Relu | LayerKind::Lrn(_) => Ok(input.to_vec()),
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, LayerCache<T>), TensorError> {
        let out_shape = self.output_shape(input.shape())?;
        match &self.kind {
            LayerKind::Conv(p) => {
                let out = self.conv_forward(p, input, out_shape);
                Ok((
                    out,
                    LayerCache::Conv {
                        input: input.clone(),
                    },
                ))
            }
            LayerKind::Pool(p) => Ok(pool_forward(p, input, out_shape)),
            LayerKind::FullyConnected { .. } => {
                let out = self.fc_forward(input, out_shape);
                Ok((
                    out,
                    LayerCache::FullyConnected {
                        input: input.clone(),
                    },
                ))
            }
            LayerKind::Relu => {
                let values = input
                    .values()
                    .iter()
                    .map(|&v| if v > T::zero() { v } else { T::zero() })
                    .collect();
                let out = Tensor::new(out_shape, values)?;
                Ok((
                    out,
                    LayerCache::Relu {
                        input: input.clone(),
                    },
                ))
            }
            LayerKind::Lrn(p) => lrn_forward(p, input),
        }
    }

    /// Forward without keeping a cache.
    pub fn apply(&self, input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Reverse pass: accumulates parameter gradients into `grads` and returns
    /// the gradient with respect to the layer input.
    pub fn backward(
        &self,
        cache: &LayerCache<T>,
        grad_out: &Tensor<T>,
        grads: &mut ParamGrads<T>,
    ) -> Tensor<T> {
        match (&self.kind, cache) {
            (LayerKind::Conv(p), LayerCache::Conv { input }) => {
                self.conv_backward(p, input, grad_out, grads)
            }
            (LayerKind::Pool(p), LayerCache::MaxPool { input_shape, argmax }) => {
                debug_assert_eq!(p.kind, PoolKind::Max);
                let mut g = Tensor::zeros(input_shape);
                let [n, c, h, w] = dims4_of(input_shape);
                let plane_out = grad_out.len() / (n * c);
                let gv = g.values_mut();
                for nc in 0..n * c {
                    let base = nc * h * w;
                    for o in 0..plane_out {
                        let idx = nc * plane_out + o;
                        gv[base + argmax[idx] as usize] += grad_out.values()[idx];
                    }
                }
                g
            }
            (LayerKind::Pool(p), LayerCache::AvgPool { input_shape }) => {
                avg_pool_backward(p, input_shape, grad_out)
            }
            (LayerKind::FullyConnected { .. }, LayerCache::FullyConnected { input }) => {
                self.fc_backward(input, grad_out, grads)
            }
            (LayerKind::Relu, LayerCache::Relu { input }) => {
                let values = input
                    .values()
                    .iter()
                    .zip(grad_out.values())
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                Tensor::new(input.shape().to_vec(), values).expect("relu grad shape")
            }
            (LayerKind::Lrn(p), LayerCache::Lrn { input, scale }) => {
                lrn_backward(p, input, scale, grad_out)
            }
            (kind, _) => panic!("cache does not belong to a {} layer", kind.name()),
        }
    }

    fn conv_forward(&self, p: &ConvParams, input: &Tensor<T>, out_shape: Vec<usize>) -> Tensor<T> {
        let [n, c, h, w] = dims4_of(input.shape());
        let (oh, ow) = (out_shape[2], out_shape[3]);
        let weights = self.weights.as_ref().expect("conv weights").values();
        let bias = self.bias.as_ref().expect("conv bias").values();
        let cin_g = c / p.groups;
        let cout_g = p.out_channels / p.groups;
        let rows = cin_g * p.kernel * p.kernel;
        let cols = oh * ow;
        let mut out = Tensor::zeros(&out_shape);
        let mut col = vec![T::zero(); rows * cols];
        let ov = out.values_mut();
        for s in 0..n {
            let sample = input.sample(s);
            for g in 0..p.groups {
                let plane = &sample[g * cin_g * h * w..(g + 1) * cin_g * h * w];
                im2col(plane, cin_g, h, w, p, oh, ow, &mut col);
                let out_block = &mut ov[(s * p.out_channels + g * cout_g) * cols
                    ..(s * p.out_channels + (g + 1) * cout_g) * cols];
                for (o, chunk) in out_block.chunks_mut(cols).enumerate() {
                    chunk.fill(bias[g * cout_g + o]);
                }
                let wg = &weights[g * cout_g * rows..(g + 1) * cout_g * rows];
                matmul_acc(out_block, wg, &col, cout_g, rows, cols);
            }
        }
        out
    }

    fn conv_backward(
        &self,
        p: &ConvParams,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: &mut ParamGrads<T>,
    ) -> Tensor<T> {
        let [n, c, h, w] = dims4_of(input.shape());
        let [_, _, oh, ow] = dims4_of(grad_out.shape());
        let weights = self.weights.as_ref().expect("conv weights").values();
        let cin_g = c / p.groups;
        let cout_g = p.out_channels / p.groups;
        let rows = cin_g * p.kernel * p.kernel;
        let cols = oh * ow;
        let mut col = vec![T::zero(); rows * cols];
        let mut dcol = vec![T::zero(); rows * cols];
        let mut grad_in = Tensor::zeros(input.shape());
        for s in 0..n {
            let sample = input.sample(s);
            let gout = grad_out.sample(s);
            for g in 0..p.groups {
                let plane = &sample[g * cin_g * h * w..(g + 1) * cin_g * h * w];
                im2col(plane, cin_g, h, w, p, oh, ow, &mut col);
                let gblock = &gout[g * cout_g * cols..(g + 1) * cout_g * cols];
                for (o, chunk) in gblock.chunks(cols).enumerate() {
                    let acc: T = chunk.iter().copied().sum();
                    grads.bias[g * cout_g + o] += acc;
                }
                let wg_grad = &mut grads.weights[g * cout_g * rows..(g + 1) * cout_g * rows];
                matmul_bt_acc(wg_grad, gblock, &col, cout_g, cols, rows);
                let wg = &weights[g * cout_g * rows..(g + 1) * cout_g * rows];
                dcol.fill(T::zero());
                matmul_at_acc(&mut dcol, wg, gblock, cout_g, rows, cols);
                let gin = &mut grad_in.values_mut()
                    [(s * c + g * cin_g) * h * w..(s * c + (g + 1) * cin_g) * h * w];
                col2im(&dcol, cin_g, h, w, p, oh, ow, gin);
            }
        }
        grad_in
    }

    fn fc_forward(&self, input: &Tensor<T>, out_shape: Vec<usize>) -> Tensor<T> {
        let n = input.batch();
        let fin = input.sample_len();
        let fout = out_shape[1];
        let weights = self.weights.as_ref().expect("fc weights").values();
        let bias = self.bias.as_ref().expect("fc bias").values();
        let mut out = Tensor::zeros(&out_shape);
        let ov = out.values_mut();
        for row in ov.chunks_mut(fout) {
            row.copy_from_slice(bias);
        }
        // out[n x fout] += x[n x fin] * W[fout x fin]^T
        matmul_bt_acc(ov, input.values(), weights, n, fin, fout);
        out
    }

    fn fc_backward(
        &self,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: &mut ParamGrads<T>,
    ) -> Tensor<T> {
        let n = input.batch();
        let fin = input.sample_len();
        let fout = grad_out.sample_len();
        let weights = self.weights.as_ref().expect("fc weights").values();
        for row in grad_out.values().chunks(fout) {
            for (b, &g) in grads.bias.iter_mut().zip(row) {
                *b += g;
            }
        }
        // dW[fout x fin] += G[n x fout]^T * X[n x fin]
        matmul_at_acc(&mut grads.weights, grad_out.values(), input.values(), n, fout, fin);
        // dX[n x fin] = G[n x fout] * W[fout x fin]
        let mut grad_in = Tensor::zeros(input.shape());
        matmul_acc(grad_in.values_mut(), grad_out.values(), weights, n, fout, fin);
        grad_in
    }
}

fn dims4_of(shape: &[usize]) -> [usize; 4] {
    match shape {
        &[n, c, h, w] => [n, c, h, w],
        &[n, f] => [n, f, 1, 1],
        other => panic!("expected rank 2 or 4 shape, got {other:?}"),
    }
}

/// Output columns `lo..hi` whose tap at kernel offset `kx` lands inside a
/// row of width `w`.
fn valid_outputs(kx: usize, p: &ConvParams, w: usize, ow: usize) -> (usize, usize) {
    let lo = p.pad.saturating_sub(kx).div_ceil(p.stride);
    let hi = (w + p.pad).saturating_sub(kx).div_ceil(p.stride).min(ow);
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    plane: &[T],
    channels: usize,
    h: usize,
    w: usize,
    p: &ConvParams,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let k = p.kernel;
    let cols = oh * ow;
    for c in 0..channels {
        let chan = &plane[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((c * k + ky) * k + kx) * cols..][..cols];
                let (lo, hi) = valid_outputs(kx, p, w, ow);
                for oy in 0..oh {
                    let iy = (oy * p.stride + ky) as isize - p.pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &chan[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if lo < hi {
                        let ix0 = lo * p.stride + kx - p.pad;
                        if p.stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (d, &v) in dst[lo..hi].iter_mut().zip(src[ix0..].iter().step_by(p.stride)) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    channels: usize,
    h: usize,
    w: usize,
    p: &ConvParams,
    oh: usize,
    ow: usize,
    plane: &mut [T],
) {
    let k = p.kernel;
    let cols = oh * ow;
    for c in 0..channels {
        let chan = &mut plane[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((c * k + ky) * k + kx) * cols..][..cols];
                let (lo, hi) = valid_outputs(kx, p, w, ow);
                for oy in 0..oh {
                    let iy = (oy * p.stride + ky) as isize - p.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * w..(iy as usize + 1) * w];
                    if lo < hi {
                        let ix0 = lo * p.stride + kx - p.pad;
                        let src = &row[oy * ow + lo..oy * ow + hi];
                        for (d, &v) in dst[ix0..].iter_mut().step_by(p.stride).zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn pool_forward<T: Scalar>(
    p: &PoolParams,
    input: &Tensor<T>,
    out_shape: Vec<usize>,
) -> (Tensor<T>, LayerCache<T>) {
    let [n, c, h, w] = dims4_of(input.shape());
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let mut out = Tensor::zeros(&out_shape);
    let mut argmax = match p.kind {
        PoolKind::Max => vec![0u32; n * c * oh * ow],
        PoolKind::Average => Vec::new(),
    };
    let ov = out.values_mut();
    for nc in 0..n * c {
        let plane = &input.values()[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            let y0 = oy * p.stride;
            let y1 = (y0 + p.window).min(h);
            for ox in 0..ow {
                let x0 = ox * p.stride;
                let x1 = (x0 + p.window).min(w);
                let o = nc * oh * ow + oy * ow + ox;
                match p.kind {
                    PoolKind::Max => {
                        let mut best = plane[y0 * w + x0];
                        let mut best_idx = y0 * w + x0;
                        for y in y0..y1 {
                            for x in x0..x1 {
                                let v = plane[y * w + x];
                                // strict comparison keeps the first maximum in scan order;
                                // selects instead of branches, the winner is unpredictable
                                let better = v > best;
                                best = if better { v } else { best };
                                best_idx = if better { y * w + x } else { best_idx };
                            }
                        }
                        ov[o] = best;
                        argmax[o] = best_idx as u32;
                    }
                    PoolKind::Average => {
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            for x in x0..x1 {
                                acc += plane[y * w + x];
                            }
                        }
                        let count = T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                        ov[o] = acc / count;
                    }
                }
            }
        }
    }
    let cache = match p.kind {
        PoolKind::Max => LayerCache::MaxPool {
            input_shape: input.shape().to_vec(),
            argmax,
        },
        PoolKind::Average => LayerCache::AvgPool {
            input_shape: input.shape().to_vec(),
        },
    };
    (out, cache)
}

fn avg_pool_backward<T: Scalar>(
    p: &PoolParams,
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let [n, c, h, w] = dims4_of(input_shape);
    let [_, _, oh, ow] = dims4_of(grad_out.shape());
    let mut g = Tensor::zeros(input_shape);
    let gv = g.values_mut();
    for nc in 0..n * c {
        let plane = &mut gv[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            let y0 = oy * p.stride;
            let y1 = (y0 + p.window).min(h);
            for ox in 0..ow {
                let x0 = ox * p.stride;
                let x1 = (x0 + p.window).min(w);
                let count = T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                let share = grad_out.values()[nc * oh * ow + oy * ow + ox] / count;
                for y in y0..y1 {
                    for x in x0..x1 {
                        plane[y * w + x] += share;
                    }
                }
            }
        }
    }
    g
}

fn lrn_window(c: usize, size: usize, channels: usize) -> std::ops::Range<usize> {
    let pre = (size - 1) / 2;
    let start = c.saturating_sub(pre);
    let end = (c + size - pre).min(channels);
    start..end
}

fn lrn_forward<T: Scalar>(
    p: &LrnParams,
    input: &Tensor<T>,
) -> Result<(Tensor<T>, LayerCache<T>), TensorError> {
    if p.size == 0 {
        return Err(TensorError::InvalidHyperparameter(
            "lrn window size must be >= 1".into(),
        ));
    }
    let [n, c, h, w] = input.dims4()?;
    let hw = h * w;
    let alpha_n = T::from_f64_lossy(p.alpha / p.size as f64);
    let k = T::from_f64_lossy(p.k);
    let beta = T::from_f64_lossy(p.beta);
    let mut scale = vec![k; input.len()];
    for s in 0..n {
        let base = s * c * hw;
        for ch in 0..c {
            let dst = base + ch * hw;
            for src_c in lrn_window(ch, p.size, c) {
                let src = base + src_c * hw;
                for i in 0..hw {
                    let a = input.values()[src + i];
                    scale[dst + i] += alpha_n * a * a;
                }
            }
        }
    }
    let values = input
        .values()
        .iter()
        .zip(&scale)
        .map(|(&a, &s)| a * s.powf(-beta))
        .collect();
    let out = Tensor::new(input.shape().to_vec(), values)?;
    Ok((
        out,
        LayerCache::Lrn {
            input: input.clone(),
            scale,
        },
    ))
}

fn lrn_backward<T: Scalar>(
    p: &LrnParams,
    input: &Tensor<T>,
    scale: &[T],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let [n, c, h, w] = dims4_of(input.shape());
    let hw = h * w;
    let beta = T::from_f64_lossy(p.beta);
    let coeff = T::from_f64_lossy(2.0 * p.alpha * p.beta / p.size as f64);
    let a = input.values();
    let g = grad_out.values();
    // t_c = g_c * a_c * s_c^(-beta-1)
    let t: Vec<T> = (0..a.len())
        .map(|i| g[i] * a[i] * scale[i].powf(-beta - T::one()))
        .collect();
    let mut grad_in: Vec<T> = (0..a.len()).map(|i| g[i] * scale[i].powf(-beta)).collect();
    for s in 0..n {
        let base = s * c * hw;
        for ch in 0..c {
            let src = base + ch * hw;
            for j in lrn_window(ch, p.size, c) {
                let dst = base + j * hw;
                for i in 0..hw {
                    grad_in[dst + i] -= coeff * a[dst + i] * t[src + i];
                }
            }
        }
    }
    Tensor::new(input.shape().to_vec(), grad_in).expect("lrn grad shape")
}

/// Convenience wrapper: conv forward on `input`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, layer: &Layer<T>) -> Result<Tensor<T>, TensorError> {
    expect_kind(layer, "conv2d", |k| matches!(k, LayerKind::Conv(_)))?;
    layer.apply(input)
}

pub fn pool2d<T: Scalar>(input: &Tensor<T>, layer: &Layer<T>) -> Result<Tensor<T>, TensorError> {
    expect_kind(layer, "pool2d", |k| matches!(k, LayerKind::Pool(_)))?;
    layer.apply(input)
}

pub fn fully_connected<T: Scalar>(
    input: &Tensor<T>,
    layer: &Layer<T>,
) -> Result<Tensor<T>, TensorError> {
    expect_kind(layer, "fully_connected", |k| {
        matches!(k, LayerKind::FullyConnected { .. })
    })?;
    layer.apply(input)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    Layer::relu().apply(input).expect("relu accepts any shape")
}

pub fn lrn<T: Scalar>(input: &Tensor<T>, layer: &Layer<T>) -> Result<Tensor<T>, TensorError> {
    expect_kind(layer, "lrn", |k| matches!(k, LayerKind::Lrn(_)))?;
    layer.apply(input)
}

fn expect_kind<T: Scalar>(
    layer: &Layer<T>,
    op: &'static str,
    ok: impl Fn(&LayerKind) -> bool,
) -> Result<(), TensorError> {
    if ok(&layer.kind) {
        Ok(())
    } else {
        Err(TensorError::InvalidHyperparameter(format!(
            "{op} called with a {} layer",
            layer.kind.name()
        )))
    }
}
