//! Baseline convolutional network: layer specification, deterministic
//! initialization, forward pass with per-layer activation capture, and
//! mini-batch SGD training on sigmoid outputs with mean-squared error.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CdlError, Result};
use crate::tensor::{
    conv2d_valid, conv2d_valid_grad, dense, dense_grad, maxpool, maxpool_grad, sigmoid_grad_scalar,
    sigmoid_inplace, sigmoid_vec, ConvKernelBank, Tensor,
};

/// One layer of the topology. Convolution kernels are square and applied
/// without padding at stride 1; pooling windows are non-overlapping with
/// stride equal to the window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { kernel: usize, out_maps: usize },
    Pool { window: usize },
    FullyConnected { out_units: usize },
}

/// Network topology: input dimensions, ordered layers, and the class count.
///
/// A valid spec is one or more convolution/pooling pairs followed by exactly
/// one fully connected output layer whose unit count equals `class_count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
}

/// A layer with its propagated input and output dimensions.
#[derive(Debug, Clone)]
pub struct ResolvedLayer {
    pub spec: LayerSpec,
    pub in_dims: [usize; 3],
    /// For the fully connected layer this is `[1, 1, out_units]`.
    pub out_dims: [usize; 3],
}

impl NetworkSpec {
    /// The 6-layer topology: 28x28 input, 5x5 convolution to 24x24 across
    /// 6 maps, 2x2 pooling to 12x12, 5x5 convolution to 8x8 across 12 maps,
    /// 2x2 pooling to 4x4, fully connected to 10 classes.
    pub fn table1() -> Self {
        NetworkSpec {
            input_shape: [1, 28, 28],
            layers: vec![
                LayerSpec::Conv { kernel: 5, out_maps: 6 },
                LayerSpec::Pool { window: 2 },
                LayerSpec::Conv { kernel: 5, out_maps: 12 },
                LayerSpec::Pool { window: 2 },
                LayerSpec::FullyConnected { out_units: 10 },
            ],
            class_count: 10,
        }
    }

    /// The 8-layer topology: 28x28 input, 3x3 convolution to 26x26 across
    /// 3 maps, 2x2 pooling to 13x13, 4x4 convolution to 10x10 across 6 maps,
    /// 2x2 pooling to 5x5, 3x3 convolution to 3x3 across 9 maps, window-1
    /// (identity) pooling, fully connected to 10 classes.
    pub fn table2() -> Self {
        NetworkSpec {
            input_shape: [1, 28, 28],
            layers: vec![
                LayerSpec::Conv { kernel: 3, out_maps: 3 },
                LayerSpec::Pool { window: 2 },
                LayerSpec::Conv { kernel: 4, out_maps: 6 },
                LayerSpec::Pool { window: 2 },
                LayerSpec::Conv { kernel: 3, out_maps: 9 },
                LayerSpec::Pool { window: 1 },
                LayerSpec::FullyConnected { out_units: 10 },
            ],
            class_count: 10,
        }
    }

    /// Propagates the input shape through every layer, checking structure
    /// and dimensions. The error names the first failing layer.
    pub fn resolve(&self) -> Result<Vec<ResolvedLayer>> {
        let fail = |layer: usize, reason: String| CdlError::InvalidSpec { layer, reason };
        if self.class_count == 0 {
            return Err(fail(0, "class_count must be >= 1".into()));
        }
        if self.layers.len() < 3 {
            return Err(fail(
                self.layers.len(),
                "need at least one convolution/pooling pair and a fully connected layer".into(),
            ));
        }
        let mut dims = self.input_shape;
        if dims.iter().any(|&e| e == 0) {
            return Err(fail(0, format!("input shape {dims:?} has a zero extent")));
        }
        let mut resolved = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate() {
            let in_dims = dims;
            let out_dims = match (idx == last, idx % 2, layer) {
                (true, _, LayerSpec::FullyConnected { out_units }) => {
                    if *out_units != self.class_count {
                        return Err(fail(
                            idx,
                            format!(
                                "fully connected layer has {out_units} units but class_count is {}",
                                self.class_count
                            ),
                        ));
                    }
                    [1, 1, *out_units]
                }
                (true, _, other) => {
                    return Err(fail(idx, format!("last layer must be fully connected, got {other:?}")))
                }
                (false, 0, LayerSpec::Conv { kernel, out_maps }) => {
                    if *kernel == 0 || *out_maps == 0 {
                        return Err(fail(idx, "convolution kernel and out_maps must be >= 1".into()));
                    }
                    if dims[1] < *kernel || dims[2] < *kernel {
                        return Err(fail(
                            idx,
                            format!("{}x{} input too small for {kernel}x{kernel} kernel", dims[1], dims[2]),
                        ));
                    }
                    [*out_maps, dims[1] - kernel + 1, dims[2] - kernel + 1]
                }
                (false, 1, LayerSpec::Pool { window }) => {
                    if *window == 0 {
                        return Err(fail(idx, "pooling window must be >= 1".into()));
                    }
                    if dims[1] % window != 0 || dims[2] % window != 0 {
                        return Err(fail(
                            idx,
                            format!("{}x{} extents not divisible by pooling window {window}", dims[1], dims[2]),
                        ));
                    }
                    [dims[0], dims[1] / window, dims[2] / window]
                }
                (false, _, other) => {
                    return Err(fail(
                        idx,
                        format!("layers must alternate convolution and pooling, got {other:?}"),
                    ))
                }
            };
            dims = out_dims;
            resolved.push(ResolvedLayer {
                spec: layer.clone(),
                in_dims,
                out_dims,
            });
        }
        Ok(resolved)
    }

    /// Number of pooling layers, which is also the number of candidate
    /// early-exit stages.
    pub fn pool_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Pool { .. }))
            .count()
    }

    /// Flattened length of the final pooling output, the fully connected
    /// layer's input width.
    pub fn fc_input_len(&self) -> Result<usize> {
        let resolved = self.resolve()?;
        let before_fc = &resolved[resolved.len() - 2];
        Ok(before_fc.out_dims.iter().product())
    }
}

/// Learned parameters for one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv(ConvKernelBank),
    Pool { window: usize },
    Dense { weights: Tensor, bias: Vec<f64> },
}

/// Bookkeeping captured during training, persisted with the model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

/// A network together with its parameters (possibly still at their random
/// initialization) and training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedNetwork {
    pub spec: NetworkSpec,
    pub params: Vec<LayerParams>,
    pub meta: TrainingMeta,
}

/// Per-layer activations from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Post-activation output of every convolution/pooling layer, in order.
    pub layer_outputs: Vec<Tensor>,
    /// Argmax source index per output element, one entry per pooling layer.
    pub pool_argmax: Vec<Vec<usize>>,
    /// Sigmoid outputs of the fully connected layer, one per class.
    pub output: Vec<f64>,
}

impl ForwardTrace {
    /// Output tensor of the `stage`-th pooling layer (1-based).
    pub fn pooled(&self, stage: usize) -> Option<&Tensor> {
        // Pool layers sit at odd positions: outputs 1, 3, 5, ...
        self.layer_outputs.get(stage.checked_mul(2)?.checked_sub(1)?)
    }
}

/// Builds a randomly initialized network. Weights and biases are drawn
/// uniformly from `[-a, a)` with `a = 1 / sqrt(fan_in)`; the draw order is
/// fixed, so a seed fully determines the parameters.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<TrainedNetwork> {
    let resolved = spec.resolve()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(resolved.len());
    for layer in &resolved {
        match layer.spec {
            LayerSpec::Conv { kernel, out_maps } => {
                let in_maps = layer.in_dims[0];
                let fan_in = in_maps * kernel * kernel;
                let a = 1.0 / (fan_in as f64).sqrt();
                let weights: Vec<f64> = (0..out_maps * in_maps * kernel * kernel)
                    .map(|_| rng.random_range(-a..a))
                    .collect();
                let bias: Vec<f64> = (0..out_maps).map(|_| rng.random_range(-a..a)).collect();
                params.push(LayerParams::Conv(ConvKernelBank::new(
                    out_maps,
                    in_maps,
                    kernel,
                    Tensor::new(vec![out_maps, in_maps, kernel, kernel], weights)?,
                    bias,
                )?));
            }
            LayerSpec::Pool { window } => params.push(LayerParams::Pool { window }),
            LayerSpec::FullyConnected { out_units } => {
                let in_len: usize = layer.in_dims.iter().product();
                let a = 1.0 / (in_len as f64).sqrt();
                let weights: Vec<f64> = (0..out_units * in_len).map(|_| rng.random_range(-a..a)).collect();
                let bias: Vec<f64> = (0..out_units).map(|_| rng.random_range(-a..a)).collect();
                params.push(LayerParams::Dense {
                    weights: Tensor::new(vec![out_units, in_len], weights)?,
                    bias,
                });
            }
        }
    }
    Ok(TrainedNetwork {
        spec: spec.clone(),
        params,
        meta: TrainingMeta {
            epochs: 0,
            batch_size: 0,
            learning_rate: 0.0,
            seed,
            epoch_losses: Vec::new(),
            train_accuracy: None,
            test_accuracy: None,
        },
    })
}

/// Runs the network on one input, capturing every layer's activations.
///
/// Convolution outputs pass through the sigmoid; pooling takes the windowed
/// maximum; the fully connected layer consumes the final pooled tensor
/// flattened map-major then row-major and emits sigmoid outputs.
pub fn forward(net: &TrainedNetwork, input: &Tensor) -> Result<ForwardTrace> {
    if input.shape() != net.spec.input_shape {
        return Err(CdlError::ShapeMismatch {
            context: "forward input".into(),
            expected: format!("{:?}", net.spec.input_shape),
            actual: format!("{:?}", input.shape()),
        });
    }
    let mut layer_outputs = Vec::with_capacity(net.params.len() - 1);
    let mut pool_argmax = Vec::new();
    let mut output = Vec::new();
    for params in &net.params {
        match params {
            LayerParams::Conv(bank) => {
                let prev = layer_outputs.last().unwrap_or(input);
                let mut out = conv2d_valid(prev, bank)?;
                sigmoid_inplace(&mut out);
                layer_outputs.push(out);
            }
            LayerParams::Pool { window } => {
                let prev = layer_outputs.last().unwrap_or(input);
                let rec = maxpool(prev, *window)?;
                pool_argmax.push(rec.argmax);
                layer_outputs.push(rec.output);
            }
            LayerParams::Dense { weights, bias } => {
                let prev = layer_outputs.last().unwrap_or(input);
                output = sigmoid_vec(&dense(prev.data(), weights, bias)?);
            }
        }
    }
    Ok(ForwardTrace {
        layer_outputs,
        pool_argmax,
        output,
    })
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Classifies one input with the full network: the predicted label and the
/// final confidence vector.
pub fn predict(net: &TrainedNetwork, input: &Tensor) -> Result<(usize, Vec<f64>)> {
    let trace = forward(net, input)?;
    Ok((argmax(&trace.output), trace.output))
}

/// Fraction of inputs whose predicted label matches the ground truth.
pub fn accuracy(net: &TrainedNetwork, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Err(CdlError::InvalidArgument {
            op: "accuracy",
            reason: "empty input set".into(),
        });
    }
    let mut hits = 0usize;
    for (img, &label) in images.iter().zip(labels) {
        if predict(net, img)?.0 == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / images.len() as f64)
}

/// Hyperparameters for [`train`].
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Seed for the per-epoch shuffle (independent of the init seed).
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 20,
            batch_size: 50,
            learning_rate: 1.0,
            seed: 0,
        }
    }
}

/// Per-output mean squared error between a sigmoid output vector and the
/// one-hot encoding of `label`.
pub fn per_output_mse(output: &[f64], label: usize) -> f64 {
    let c = output.len() as f64;
    output
        .iter()
        .enumerate()
        .map(|(j, &y)| {
            let t = if j == label { 1.0 } else { 0.0 };
            (y - t) * (y - t)
        })
        .sum::<f64>()
        / c
}

/// Per-layer gradient buffers mirroring the parameter layout.
#[derive(Debug, Clone)]
pub enum LayerGrads {
    Conv { weights: Tensor, bias: Vec<f64> },
    Pool,
    Dense { weights: Tensor, bias: Vec<f64> },
}

fn zero_grads(params: &[LayerParams]) -> Vec<LayerGrads> {
    params
        .iter()
        .map(|p| match p {
            LayerParams::Conv(bank) => LayerGrads::Conv {
                weights: Tensor::zeros(bank.weights.shape().to_vec()),
                bias: vec![0.0; bank.out_maps],
            },
            LayerParams::Pool { .. } => LayerGrads::Pool,
            LayerParams::Dense { weights, bias } => LayerGrads::Dense {
                weights: Tensor::zeros(weights.shape().to_vec()),
                bias: vec![0.0; bias.len()],
            },
        })
        .collect()
}

/// Loss and parameter gradients of one sample, for gradient checking and
/// custom training loops.
pub fn sample_gradients(net: &TrainedNetwork, input: &Tensor, label: usize) -> Result<(f64, Vec<LayerGrads>)> {
    let mut grads = zero_grads(&net.params);
    let loss = backprop_sample(net, input, label, &mut grads)?;
    Ok((loss, grads))
}

/// Backpropagates one sample, accumulating parameter gradients into `grads`
/// and returning the sample's per-output mean squared error.
fn backprop_sample(
    net: &TrainedNetwork,
    input: &Tensor,
    label: usize,
    grads: &mut [LayerGrads],
) -> Result<f64> {
    let trace = forward(net, input)?;
    let loss = per_output_mse(&trace.output, label);
    let class_count = trace.output.len() as f64;

    // d(loss)/d(pre-sigmoid fc output).
    let delta_fc: Vec<f64> = trace
        .output
        .iter()
        .enumerate()
        .map(|(j, &y)| {
            let t = if j == label { 1.0 } else { 0.0 };
            2.0 * (y - t) / class_count * sigmoid_grad_scalar(y)
        })
        .collect();

    let last_hidden = trace
        .layer_outputs
        .last()
        .expect("validated spec has at least one hidden layer");
    let fc_idx = net.params.len() - 1;
    let (fc_weights, _) = match &net.params[fc_idx] {
        LayerParams::Dense { weights, bias } => (weights, bias),
        _ => unreachable!("validated spec ends with a fully connected layer"),
    };
    let fc_grads = dense_grad(last_hidden.data(), fc_weights, &delta_fc)?;
    match &mut grads[fc_idx] {
        LayerGrads::Dense { weights, bias } => {
            add_assign(weights.data_mut(), fc_grads.weights.data());
            add_assign(bias, &fc_grads.bias);
        }
        _ => unreachable!("gradient layout mirrors the parameters"),
    }

    // Gradient flowing backward through the hidden layers.
    let mut grad = Tensor::new(last_hidden.shape().to_vec(), fc_grads.input)?;
    let mut pool_seen = trace.pool_argmax.len();
    for idx in (0..fc_idx).rev() {
        let layer_in = if idx == 0 { input } else { &trace.layer_outputs[idx - 1] };
        match &net.params[idx] {
            LayerParams::Pool { .. } => {
                pool_seen -= 1;
                let rec = crate::tensor::PoolRecord {
                    output: trace.layer_outputs[idx].clone(),
                    argmax: trace.pool_argmax[pool_seen].clone(),
                };
                grad = maxpool_grad(&rec, layer_in.shape(), &grad)?;
            }
            LayerParams::Conv(bank) => {
                // Fold the sigmoid derivative into the incoming gradient.
                let activated = &trace.layer_outputs[idx];
                for (g, &y) in grad.data_mut().iter_mut().zip(activated.data()) {
                    *g *= sigmoid_grad_scalar(y);
                }
                let conv_grads = conv2d_valid_grad(layer_in, bank, &grad)?;
                let slot = &mut grads[idx];
                add_assign(slot.conv_w.as_mut().unwrap().data_mut(), conv_grads.weights.data());
                add_assign(slot.conv_b.as_mut().unwrap(), &conv_grads.bias);
                grad = conv_grads.input;
            }
            LayerParams::Dense { .. } => unreachable!("dense layer only at the end"),
        }
    }
    Ok(loss)
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn apply_step(params: &mut [LayerParams], grads: &[LayerGrads], scale: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        match p {
            LayerParams::Conv(bank) => {
                step(bank.weights.data_mut(), g.conv_w.as_ref().unwrap().data(), scale);
                step(&mut bank.bias, g.conv_b.as_ref().unwrap(), scale);
            }
            LayerParams::Dense { weights, bias } => {
                step(weights.data_mut(), g.dense_w.as_ref().unwrap().data(), scale);
                step(bias, g.dense_b.as_ref().unwrap(), scale);
            }
            LayerParams::Pool { .. } => {}
        }
    }
}

fn step(dst: &mut [f64], grad: &[f64], scale: f64) {
    for (d, g) in dst.iter_mut().zip(grad) {
        *d -= scale * g;
    }
}

/// Trains the network in place with mini-batch SGD on one-hot targets.
///
/// The learning rate halves whenever an epoch's mean loss fails to improve
/// on the previous epoch. Labels must lie in `[0, class_count)`; a
/// non-finite loss aborts with a diagnostic.
pub fn train(net: &mut TrainedNetwork, images: &[Tensor], labels: &[usize], opts: &TrainOptions) -> Result<()> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(CdlError::InvalidArgument {
            op: "train",
            reason: format!("{} images vs {} labels (both must be nonempty and equal)", images.len(), labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= net.spec.class_count) {
        return Err(CdlError::InvalidArgument {
            op: "train",
            reason: format!("label {bad} outside [0, {})", net.spec.class_count),
        });
    }
    if opts.batch_size == 0 {
        return Err(CdlError::InvalidArgument {
            op: "train",
            reason: "batch_size must be >= 1".into(),
        });
    }
    net.spec.resolve()?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut lr = opts.learning_rate;
    let mut prev_loss = f64::INFINITY;
    let mut grads = zero_grads(&net.params);

    for epoch in 0..opts.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(opts.batch_size).enumerate() {
            for slot in &mut grads {
                if let Some(t) = slot.conv_w.as_mut() {
                    t.data_mut().fill(0.0);
                }
                if let Some(b) = slot.conv_b.as_mut() {
                    b.fill(0.0);
                }
                if let Some(t) = slot.dense_w.as_mut() {
                    t.data_mut().fill(0.0);
                }
                if let Some(b) = slot.dense_b.as_mut() {
                    b.fill(0.0);
                }
            }
            let mut batch_loss = 0.0;
            for &i in batch {
                batch_loss += backprop_sample(net, &images[i], labels[i], &mut grads)?;
            }
            if !batch_loss.is_finite() {
                return Err(CdlError::NonFiniteLoss { epoch, batch: batch_idx });
            }
            apply_step(&mut net.params, &grads, lr / batch.len() as f64);
            epoch_loss += batch_loss;
        }
        epoch_loss /= images.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(CdlError::NonFiniteLoss { epoch, batch: 0 });
        }
        if epoch_loss >= prev_loss {
            lr *= 0.5;
        }
        prev_loss = epoch_loss;
        net.meta.epoch_losses.push(epoch_loss);
    }

    net.meta.epochs += opts.epochs;
    net.meta.batch_size = opts.batch_size;
    net.meta.learning_rate = opts.learning_rate;
    Ok(())
}

/// Fisher-Yates with a caller-supplied generator, so training order is a
/// pure function of the seed.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            input_shape: [1, 8, 8],
            layers: vec![
                LayerSpec::Conv { kernel: 3, out_maps: 2 },
                LayerSpec::Pool { window: 2 },
                LayerSpec::FullyConnected { out_units: 4 },
            ],
            class_count: 4,
        }
    }

    fn dims_of(spec: &NetworkSpec) -> Vec<[usize; 3]> {
        spec.resolve().unwrap().iter().map(|l| l.out_dims).collect()
    }

    #[test]
    fn table1_dimensions_propagate() {
        assert_eq!(
            dims_of(&NetworkSpec::table1()),
            vec![[6, 24, 24], [6, 12, 12], [12, 8, 8], [12, 4, 4], [1, 1, 10]]
        );
    }

    #[test]
    fn table2_dimensions_propagate() {
        assert_eq!(
            dims_of(&NetworkSpec::table2()),
            vec![
                [3, 26, 26],
                [3, 13, 13],
                [6, 10, 10],
                [6, 5, 5],
                [9, 3, 3],
                [9, 3, 3],
                [1, 1, 10]
            ]
        );
    }

    #[test]
    fn table1_fc_consumes_flattened_final_pool() {
        assert_eq!(NetworkSpec::table1().fc_input_len().unwrap(), 192);
    }

    #[test]
    fn invalid_specs_name_the_failing_layer() {
        let mut spec = NetworkSpec::table1();
        spec.layers[1] = LayerSpec::Conv { kernel: 3, out_maps: 2 };
        match spec.resolve() {
            Err(CdlError::InvalidSpec { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("expected InvalidSpec, got {other:?}"),
        }

        let mut spec = NetworkSpec::table2();
        spec.layers[3] = LayerSpec::Pool { window: 3 }; // 10x10 not divisible by 3
        match spec.resolve() {
            Err(CdlError::InvalidSpec { layer, .. }) => assert_eq!(layer, 3),
            other => panic!("expected InvalidSpec, got {other:?}"),
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_network(&NetworkSpec::table2(), 42).unwrap();
        let b = build_network(&NetworkSpec::table2(), 42).unwrap();
        assert_eq!(a.params, b.params);
        let c = build_network(&NetworkSpec::table2(), 43).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn zero_weight_network_outputs_sigmoid_bias() {
        let mut net = build_network(&tiny_spec(), 0).unwrap();
        for p in &mut net.params {
            match p {
                LayerParams::Conv(bank) => {
                    bank.weights.data_mut().fill(0.0);
                    bank.bias.fill(0.0);
                }
                LayerParams::Dense { weights, bias } => {
                    weights.data_mut().fill(0.0);
                    *bias = vec![-1.0, 0.0, 1.0, 2.0];
                }
                LayerParams::Pool { .. } => {}
            }
        }
        let expected: Vec<f64> = [-1.0, 0.0, 1.0, 2.0]
            .iter()
            .map(|&b| crate::tensor::sigmoid_scalar(b))
            .collect();
        for seed in 0..3u64 {
            let img = random_image(seed, 8);
            let trace = forward(&net, &img).unwrap();
            assert_eq!(trace.output, expected);
        }
    }

    #[test]
    fn forward_is_pure() {
        let net = build_network(&tiny_spec(), 5).unwrap();
        let img = random_image(1, 8);
        let a = forward(&net, &img).unwrap();
        let b = forward(&net, &img).unwrap();
        assert_eq!(a.output, b.output);
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let net = build_network(&tiny_spec(), 5).unwrap();
        let img = Tensor::zeros(vec![1, 7, 7]);
        assert!(forward(&net, &img).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.9, 0.2]), 1);
        assert_eq!(argmax(&[0.5, 0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn predict_matches_forward_argmax() {
        let net = build_network(&tiny_spec(), 9).unwrap();
        let img = random_image(3, 8);
        let trace = forward(&net, &img).unwrap();
        let (label, conf) = predict(&net, &img).unwrap();
        assert_eq!(label, argmax(&trace.output));
        assert_eq!(conf, trace.output);
    }

    #[test]
    fn train_rejects_bad_labels() {
        let mut net = build_network(&tiny_spec(), 0).unwrap();
        let imgs = vec![random_image(0, 8)];
        let err = train(&mut net, &imgs, &[7], &TrainOptions::default()).unwrap_err();
        assert!(err.to_string().contains("label 7"));
    }

    #[test]
    fn memorizes_a_single_example() {
        let mut net = build_network(&tiny_spec(), 11).unwrap();
        let img = random_image(4, 8);
        let opts = TrainOptions {
            epochs: 200,
            batch_size: 1,
            learning_rate: 1.0,
            seed: 0,
        };
        train(&mut net, std::slice::from_ref(&img), &[2], &opts).unwrap();
        assert_eq!(predict(&net, &img).unwrap().0, 2);
    }

    #[test]
    fn one_small_step_reduces_loss() {
        let mut net = build_network(&tiny_spec(), 13).unwrap();
        let img = random_image(6, 8);
        let before = per_output_mse(&forward(&net, &img).unwrap().output, 1);
        let opts = TrainOptions {
            epochs: 1,
            batch_size: 1,
            learning_rate: 1e-2,
            seed: 0,
        };
        train(&mut net, std::slice::from_ref(&img), &[1], &opts).unwrap();
        let after = per_output_mse(&forward(&net, &img).unwrap().output, 1);
        assert!(after < before, "loss went {before} -> {after}");
    }

    #[test]
    fn training_is_reproducible() {
        let imgs: Vec<Tensor> = (0..8).map(|s| random_image(s, 8)).collect();
        let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
        let opts = TrainOptions {
            epochs: 3,
            batch_size: 4,
            learning_rate: 0.5,
            seed: 77,
        };
        let mut a = build_network(&tiny_spec(), 3).unwrap();
        train(&mut a, &imgs, &labels, &opts).unwrap();
        let mut b = build_network(&tiny_spec(), 3).unwrap();
        train(&mut b, &imgs, &labels, &opts).unwrap();
        assert_eq!(a.params, b.params);
    }

    fn random_image(seed: u64, side: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
        Tensor::new(
            vec![1, side, side],
            (0..side * side).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }
}
