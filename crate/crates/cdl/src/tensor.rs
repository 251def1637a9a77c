//! Minimal dense tensor arithmetic: valid convolution, max pooling with
//! argmax tracking, fully connected transforms, the sigmoid nonlinearity,
//! and the gradient form of each.
//!
//! Everything is 64-bit floating point over row-major flat storage with
//! explicit index arithmetic, so the operation-count model in [`crate::metrics`]
//! can be audited directly against these loops.

use crate::error::{CdlError, Result};

/// Inputs to the sigmoid are clamped to this magnitude before
/// exponentiation; at 64-bit precision the output is already exactly 0.0
/// or 1.0 well inside the clamp.
const SIGMOID_CLAMP: f64 = 40.0;

/// Dense multi-dimensional array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating that the extents are positive and their
    /// product matches the payload length.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(CdlError::InvalidArgument {
                op: "Tensor::new",
                reason: format!("all extents must be >= 1, got {shape:?}"),
            });
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(CdlError::ShapeMismatch {
                context: "Tensor::new".into(),
                expected: format!("{expect} elements for shape {shape:?}"),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Flat offset of `[m, y, x]` in a 3-D tensor.
    #[inline]
    pub fn idx3(&self, m: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (m * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get3(&self, m: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx3(m, y, x)]
    }

    #[inline]
    pub fn set3(&mut self, m: usize, y: usize, x: usize, v: f64) {
        let i = self.idx3(m, y, x);
        self.data[i] = v;
    }

    fn expect_3d(&self, context: &str) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [m, h, w] => Ok((*m, *h, *w)),
            other => Err(CdlError::ShapeMismatch {
                context: context.into(),
                expected: "rank-3 tensor [maps, height, width]".into(),
                actual: format!("rank-{} tensor {other:?}", other.len()),
            }),
        }
    }
}

/// A bank of convolution kernels: `out_maps` filters, each spanning all
/// `in_maps` of the input, with one bias per output map.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernelBank {
    pub out_maps: usize,
    pub in_maps: usize,
    pub kernel: usize,
    /// Shape `[out_maps, in_maps, kernel, kernel]`.
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl ConvKernelBank {
    pub fn new(out_maps: usize, in_maps: usize, kernel: usize, weights: Tensor, bias: Vec<f64>) -> Result<Self> {
        if out_maps == 0 || in_maps == 0 || kernel == 0 {
            return Err(CdlError::InvalidArgument {
                op: "ConvKernelBank::new",
                reason: format!("out_maps={out_maps}, in_maps={in_maps}, kernel={kernel} must all be >= 1"),
            });
        }
        let want = [out_maps, in_maps, kernel, kernel];
        if weights.shape() != want {
            return Err(CdlError::ShapeMismatch {
                context: "ConvKernelBank::new weights".into(),
                expected: format!("{want:?}"),
                actual: format!("{:?}", weights.shape()),
            });
        }
        if bias.len() != out_maps {
            return Err(CdlError::ShapeMismatch {
                context: "ConvKernelBank::new bias".into(),
                expected: format!("[{out_maps}]"),
                actual: format!("[{}]", bias.len()),
            });
        }
        Ok(ConvKernelBank {
            out_maps,
            in_maps,
            kernel,
            weights,
            bias,
        })
    }

    #[inline]
    fn weight_base(&self, o: usize, i: usize, ky: usize) -> usize {
        ((o * self.in_maps + i) * self.kernel + ky) * self.kernel
    }
}

/// Max-pooling output together with the source coordinate of every maximum,
/// kept so the backward pass can route gradients.
#[derive(Debug, Clone)]
pub struct PoolRecord {
    pub output: Tensor,
    /// Flat index into the pooling *input* for each output element.
    pub argmax: Vec<usize>,
}

/// Valid (no padding, stride 1) 2-D convolution of a `[in_maps, H, W]`
/// tensor, producing `[out_maps, H-k+1, W-k+1]`.
pub fn conv2d_valid(input: &Tensor, bank: &ConvKernelBank) -> Result<Tensor> {
    let (maps, h, w) = input.expect_3d("conv2d_valid input")?;
    if maps != bank.in_maps {
        return Err(CdlError::ShapeMismatch {
            context: "conv2d_valid input maps".into(),
            expected: format!("{} maps", bank.in_maps),
            actual: format!("{maps} maps"),
        });
    }
    let k = bank.kernel;
    if h < k || w < k {
        return Err(CdlError::ShapeMismatch {
            context: "conv2d_valid spatial extents".into(),
            expected: format!("height and width >= kernel {k}"),
            actual: format!("{h}x{w}"),
        });
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = Tensor::zeros(vec![bank.out_maps, oh, ow]);
    let in_data = input.data();
    let w_data = bank.weights.data();
    for o in 0..bank.out_maps {
        let out_map = &mut out.data[o * oh * ow..(o + 1) * oh * ow];
        out_map.fill(bank.bias[o]);
        for i in 0..bank.in_maps {
            for ky in 0..k {
                let wrow = &w_data[bank.weight_base(o, i, ky)..bank.weight_base(o, i, ky) + k];
                for (kx, &wv) in wrow.iter().enumerate() {
                    for y in 0..oh {
                        let in_base = (i * h + y + ky) * w + kx;
                        let in_row = &in_data[in_base..in_base + ow];
                        let out_row = &mut out_map[y * ow..y * ow + ow];
                        for (ov, &iv) in out_row.iter_mut().zip(in_row) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_valid`] with respect to its input, weights and bias.
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

/// Backward pass of the valid convolution. `grad_out` is the gradient with
/// respect to the (pre-activation) convolution output.
pub fn conv2d_valid_grad(input: &Tensor, bank: &ConvKernelBank, grad_out: &Tensor) -> Result<ConvGrads> {
    let (maps, h, w) = input.expect_3d("conv2d_valid_grad input")?;
    let k = bank.kernel;
    let (oh, ow) = (h - k + 1, w - k + 1);
    if maps != bank.in_maps || grad_out.shape() != [bank.out_maps, oh, ow] {
        return Err(CdlError::ShapeMismatch {
            context: "conv2d_valid_grad".into(),
            expected: format!("input [{}, {h}, {w}], grad [{}, {oh}, {ow}]", bank.in_maps, bank.out_maps),
            actual: format!("input {:?}, grad {:?}", input.shape(), grad_out.shape()),
        });
    }
    let mut g_in = Tensor::zeros(vec![maps, h, w]);
    let mut g_w = Tensor::zeros(vec![bank.out_maps, bank.in_maps, k, k]);
    let mut g_b = vec![0.0; bank.out_maps];
    let in_data = input.data();
    let w_data = bank.weights.data();
    let go_data = grad_out.data();
    for o in 0..bank.out_maps {
        let go_map = &go_data[o * oh * ow..(o + 1) * oh * ow];
        g_b[o] = go_map.iter().sum();
        for i in 0..bank.in_maps {
            for ky in 0..k {
                let wbase = bank.weight_base(o, i, ky);
                for kx in 0..k {
                    let wv = w_data[wbase + kx];
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let in_base = (i * h + y + ky) * w + kx;
                        let in_row = &in_data[in_base..in_base + ow];
                        let gi_row = &mut g_in.data[in_base..in_base + ow];
                        let go_row = &go_map[y * ow..y * ow + ow];
                        for ((gi, &go), &iv) in gi_row.iter_mut().zip(go_row).zip(in_row) {
                            *gi += wv * go;
                            acc += go * iv;
                        }
                    }
                    g_w.data[wbase + kx] = acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: g_in,
        weights: g_w,
        bias: g_b,
    })
}

/// Non-overlapping max pooling with window (and stride) `window`. The window
/// must divide both spatial extents exactly.
pub fn maxpool(input: &Tensor, window: usize) -> Result<PoolRecord> {
    let (maps, h, w) = input.expect_3d("maxpool input")?;
    if window == 0 {
        return Err(CdlError::InvalidArgument {
            op: "maxpool",
            reason: "window must be >= 1".into(),
        });
    }
    if h % window != 0 || w % window != 0 {
        return Err(CdlError::ShapeMismatch {
            context: "maxpool spatial extents".into(),
            expected: format!("height and width divisible by window {window}"),
            actual: format!("{h}x{w}"),
        });
    }
    let (oh, ow) = (h / window, w / window);
    let mut out = Tensor::zeros(vec![maps, oh, ow]);
    let mut argmax = vec![0usize; maps * oh * ow];
    let in_data = input.data();
    for m in 0..maps {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = (m * h + oy * window) * w + ox * window;
                let mut best = in_data[best_idx];
                for wy in 0..window {
                    for wx in 0..window {
                        if wy == 0 && wx == 0 {
                            continue;
                        }
                        let idx = (m * h + oy * window + wy) * w + ox * window + wx;
                        if in_data[idx] > best {
                            best = in_data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let oi = (m * oh + oy) * ow + ox;
                out.data[oi] = best;
                argmax[oi] = best_idx;
            }
        }
    }
    Ok(PoolRecord { output: out, argmax })
}

/// Backward pass of max pooling: the incoming gradient flows to the argmax
/// cell of each window, all other cells receive zero.
pub fn maxpool_grad(record: &PoolRecord, input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != record.output.shape() {
        return Err(CdlError::ShapeMismatch {
            context: "maxpool_grad".into(),
            expected: format!("{:?}", record.output.shape()),
            actual: format!("{:?}", grad_out.shape()),
        });
    }
    let mut g_in = Tensor::zeros(input_shape.to_vec());
    for (&src, &g) in record.argmax.iter().zip(grad_out.data()) {
        g_in.data[src] += g;
    }
    Ok(g_in)
}

/// Fully connected transform: `out[j] = bias[j] + sum_i weights[j][i] * input[i]`.
/// `weights` has shape `[out, in]`.
pub fn dense(input: &[f64], weights: &Tensor, bias: &[f64]) -> Result<Vec<f64>> {
    let (m, n) = match weights.shape() {
        [m, n] => (*m, *n),
        other => {
            return Err(CdlError::ShapeMismatch {
                context: "dense weights".into(),
                expected: "rank-2 tensor [out, in]".into(),
                actual: format!("{other:?}"),
            })
        }
    };
    if input.len() != n || bias.len() != m {
        return Err(CdlError::ShapeMismatch {
            context: "dense".into(),
            expected: format!("input [{n}], bias [{m}]"),
            actual: format!("input [{}], bias [{}]", input.len(), bias.len()),
        });
    }
    let w = weights.data();
    let out = (0..m)
        .map(|j| {
            let row = &w[j * n..(j + 1) * n];
            bias[j] + row.iter().zip(input).map(|(&wv, &iv)| wv * iv).sum::<f64>()
        })
        .collect();
    Ok(out)
}

/// Gradients of [`dense`].
pub struct DenseGrads {
    pub input: Vec<f64>,
    /// Shape `[out, in]`.
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

/// Backward pass of the fully connected transform. `grad_out` is the gradient
/// with respect to the (pre-activation) output.
pub fn dense_grad(input: &[f64], weights: &Tensor, grad_out: &[f64]) -> Result<DenseGrads> {
    let (m, n) = match weights.shape() {
        [m, n] => (*m, *n),
        other => {
            return Err(CdlError::ShapeMismatch {
                context: "dense_grad weights".into(),
                expected: "rank-2 tensor [out, in]".into(),
                actual: format!("{other:?}"),
            })
        }
    };
    if input.len() != n || grad_out.len() != m {
        return Err(CdlError::ShapeMismatch {
            context: "dense_grad".into(),
            expected: format!("input [{n}], grad_out [{m}]"),
            actual: format!("input [{}], grad_out [{}]", input.len(), grad_out.len()),
        });
    }
    let w = weights.data();
    let mut g_in = vec![0.0; n];
    let mut g_w = Tensor::zeros(vec![m, n]);
    for j in 0..m {
        let g = grad_out[j];
        let w_row = &w[j * n..(j + 1) * n];
        let gw_row = &mut g_w.data[j * n..(j + 1) * n];
        for i in 0..n {
            g_in[i] += g * w_row[i];
            gw_row[i] = g * input[i];
        }
    }
    Ok(DenseGrads {
        input: g_in,
        weights: g_w,
        bias: grad_out.to_vec(),
    })
}

/// Numerically safe logistic function.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    let x = x.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| sigmoid_scalar(v)).collect(),
    }
}

pub fn sigmoid_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sigmoid_scalar(v)).collect()
}

/// Apply the sigmoid elementwise in place.
pub fn sigmoid_inplace(x: &mut Tensor) {
    for v in &mut x.data {
        *v = sigmoid_scalar(*v);
    }
}

/// Derivative of the sigmoid expressed through its output: `y * (1 - y)`.
#[inline]
pub fn sigmoid_grad_scalar(y: f64) -> f64 {
    y * (1.0 - y)
}

pub fn sigmoid_grad(y: &Tensor) -> Tensor {
    Tensor {
        shape: y.shape.clone(),
        data: y.data.iter().map(|&v| sigmoid_grad_scalar(v)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor3(m: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![m, h, w], data).unwrap()
    }

    #[test]
    fn tensor_rejects_zero_extent() {
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn tensor_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn conv_uniform_sum() {
        // 3x3 of ones through a 2x2 all-ones kernel: every output is 4.
        let input = tensor3(1, 3, 3, vec![1.0; 9]);
        let bank = ConvKernelBank::new(
            1,
            1,
            2,
            Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap(),
            vec![0.0],
        )
        .unwrap();
        let out = conv2d_valid(&input, &bank).unwrap();
        assert_eq!(out.shape(), [1, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let input = tensor3(1, 3, 3, vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.5, -0.5, 4.0, 9.0]);
        let bank = ConvKernelBank::new(
            1,
            1,
            1,
            Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
            vec![0.0],
        )
        .unwrap();
        let out = conv2d_valid(&input, &bank).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_rejects_map_mismatch() {
        let input = tensor3(2, 3, 3, vec![0.0; 18]);
        let bank = ConvKernelBank::new(
            1,
            1,
            2,
            Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap(),
            vec![0.0],
        )
        .unwrap();
        let err = conv2d_valid(&input, &bank).unwrap_err();
        assert!(err.to_string().contains("maps"));
    }

    #[test]
    fn conv_rejects_small_input() {
        let input = tensor3(1, 2, 2, vec![0.0; 4]);
        let bank = ConvKernelBank::new(
            1,
            1,
            3,
            Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap(),
            vec![0.0],
        )
        .unwrap();
        assert!(conv2d_valid(&input, &bank).is_err());
    }

    #[test]
    fn maxpool_single_window() {
        let input = tensor3(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let rec = maxpool(&input, 2).unwrap();
        assert_eq!(rec.output.shape(), [1, 1, 1]);
        assert_eq!(rec.output.data(), [4.0]);
        // (1,1) in the 2x2 input is flat index 3.
        assert_eq!(rec.argmax, vec![3]);
    }

    #[test]
    fn maxpool_window_one_is_identity() {
        let input = tensor3(2, 2, 2, vec![1.0, -2.0, 3.0, 0.5, 9.0, 8.0, 7.0, 6.0]);
        let rec = maxpool(&input, 1).unwrap();
        assert_eq!(rec.output, input);
    }

    #[test]
    fn maxpool_rejects_nondivisible() {
        let input = tensor3(1, 3, 3, vec![0.0; 9]);
        assert!(maxpool(&input, 2).is_err());
    }

    #[test]
    fn maxpool_grad_routes_to_argmax() {
        let input = tensor3(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let rec = maxpool(&input, 2).unwrap();
        let g = Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap();
        let g_in = maxpool_grad(&rec, input.shape(), &g).unwrap();
        assert_eq!(g_in.data(), [0.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn dense_identity_weights() {
        let w = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let x = [0.3, -0.7, 2.0];
        let out = dense(&x, &w, &[0.0; 3]).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn dense_zero_weights_returns_bias() {
        let w = Tensor::zeros(vec![2, 4]);
        let out = dense(&[1.0, 2.0, 3.0, 4.0], &w, &[0.25, -0.5]).unwrap();
        assert_eq!(out, vec![0.25, -0.5]);
    }

    #[test]
    fn dense_rejects_dim_mismatch() {
        let w = Tensor::zeros(vec![2, 4]);
        assert!(dense(&[1.0; 3], &w, &[0.0; 2]).is_err());
        assert!(dense(&[1.0; 4], &w, &[0.0; 3]).is_err());
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
    }

    #[test]
    fn sigmoid_symmetry() {
        for &x in &[-7.3, -1.0, 0.1, 2.5, 19.0] {
            let s = sigmoid_scalar(x) + sigmoid_scalar(-x);
            assert!((s - 1.0).abs() < 1e-15, "sigmoid({x}) symmetry broke: {s}");
        }
    }

    #[test]
    fn sigmoid_saturates_finite() {
        let hi = sigmoid_scalar(1e9);
        let lo = sigmoid_scalar(-1e9);
        assert!(hi.is_finite() && lo.is_finite());
        assert_eq!(hi, 1.0);
        assert!(lo > 0.0 && lo < 1e-15);
        // Clamping makes the extremes plateaus, not overflow sites.
        assert_eq!(hi, sigmoid_scalar(f64::MAX));
        assert_eq!(lo, sigmoid_scalar(f64::MIN));
    }

    #[test]
    fn sigmoid_grad_at_half() {
        assert_eq!(sigmoid_grad_scalar(0.5), 0.25);
    }
}
