//! Minimal reverse-mode tensor engine.
//!
//! A [`Tape`] records every forward op into an arena of nodes; [`Tape::backward`]
//! walks the arena in reverse accumulating gradients. One tape corresponds to
//! one forward/backward pass: persistent parameters live in a
//! [`params::ParamStore`] and are re-inserted as leaves each step.
//!
//! Conventions:
//! - Shapes are row-major; feature maps are `[N, C, H, W]`, token sequences
//!   `[N, L, D]`.
//! - `conv2d` uses cross-correlation semantics (no kernel flip), the dominant
//!   deep-learning convention.
//! - The element type is a generic [`Scalar`] (`f32` or `f64`), selected once
//!   per run: 32-bit for training speed, 64-bit for gradient checks.

pub mod adam;
pub mod attention;
pub mod conv;
pub mod gradcheck;
pub mod matmul;
pub mod params;

use std::fmt;

use attention::{AttnGeometry, AttnWeights};
use conv::ConvGeometry;

/// Element dtype tag, stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Float element type for tensors. Implemented by `f32` and `f64`.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le_bytes(self, out: &mut Vec<u8>);
    fn read_le_bytes(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le_bytes(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le_bytes(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Errors from tensor construction, forward ops, and backward.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Data length does not match the product of the shape.
    DataLength { expected: usize, got: usize },
    /// Two operands (or an operand and its parameter) have incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A dimension must divide evenly and does not.
    NotDivisible {
        op: &'static str,
        value: usize,
        divisor: usize,
    },
    /// Geometry or hyperparameter invalid for the op.
    InvalidArgument { op: &'static str, message: String },
    /// `backward` was called on a non-scalar value.
    NonScalarLoss { shape: Vec<usize> },
    /// A computation produced or encountered a non-finite value.
    NonFinite { context: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} vs {right:?}")
            }
            TensorError::NotDivisible { op, value, divisor } => {
                write!(f, "{op}: {value} is not divisible by {divisor}")
            }
            TensorError::InvalidArgument { op, message } => write!(f, "{op}: {message}"),
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            TensorError::NonFinite { context } => {
                write!(f, "non-finite value encountered: {context}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

pub type TensorResult<V> = Result<V, TensorError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { lhs: usize, rhs: usize },
    Sub { lhs: usize, rhs: usize },
    Mul { lhs: usize, rhs: usize },
    Scale { input: usize, factor: f64 },
    AddScalar { input: usize },
    Sigmoid { input: usize },
    Silu { input: usize },
    Tanh { input: usize },
    Abs { input: usize },
    Clamp01 { input: usize },
    Reshape { input: usize },
    Linear { input: usize, weight: usize, bias: usize },
    Conv2d { input: usize, weight: usize, bias: usize, geometry: ConvGeometry },
    GroupNorm { input: usize, gamma: usize, beta: usize, groups: usize, eps: f64 },
    NearestUpsample { input: usize, factor_h: usize, factor_w: usize },
    GlobalAvgPool { input: usize },
    MeanAll { input: usize },
    ConcatChannels { lhs: usize, rhs: usize },
    MapToTokens { input: usize },
    TokensToMap { input: usize, grid_h: usize, grid_w: usize },
    Attention {
        tokens: usize,
        wq: usize,
        wk: usize,
        wv: usize,
        wo: usize,
        bo: usize,
        heads: usize,
    },
}

struct Node<T> {
    data: Vec<T>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation graph for one forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Vec<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorRef {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { data, shape, requires_grad, op });
        TensorRef(self.nodes.len() - 1)
    }

    /// Insert a trainable leaf.
    pub fn param(&mut self, data: Vec<T>, shape: Vec<usize>) -> TensorResult<TensorRef> {
        self.leaf(data, shape, true)
    }

    /// Insert a constant leaf (inputs, targets, encoded priors).
    pub fn constant(&mut self, data: Vec<T>, shape: Vec<usize>) -> TensorResult<TensorRef> {
        self.leaf(data, shape, false)
    }

    fn leaf(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> TensorResult<TensorRef> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength { expected, got: data.len() });
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    pub fn data(&self, id: TensorRef) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorRef) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: TensorRef) -> usize {
        self.nodes[id.0].data.len()
    }

    pub fn requires_grad(&self, id: TensorRef) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` call, zero-filled for leaves that were
    /// not on the loss path. Empty before `backward`.
    pub fn grad(&self, id: TensorRef) -> &[T] {
        &self.grads[id.0]
    }

    pub fn scalar_value(&self, id: TensorRef) -> T {
        debug_assert_eq!(self.numel(id), 1);
        self.nodes[id.0].data[0]
    }

    // ── Elementwise and shape ops ───────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        lhs: TensorRef,
        rhs: TensorRef,
    ) -> TensorResult<()> {
        if self.nodes[lhs.0].shape != self.nodes[rhs.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                left: self.nodes[lhs.0].shape.clone(),
                right: self.nodes[rhs.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, lhs: TensorRef, rhs: TensorRef) -> TensorResult<TensorRef> {
        self.binary_same_shape("add", lhs, rhs)?;
        let data: Vec<T> = self.nodes[lhs.0]
            .data
            .iter()
            .zip(self.nodes[rhs.0].data.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        let shape = self.nodes[lhs.0].shape.clone();
        Ok(self.push(data, shape, false, Op::Add { lhs: lhs.0, rhs: rhs.0 }))
    }

    pub fn sub(&mut self, lhs: TensorRef, rhs: TensorRef) -> TensorResult<TensorRef> {
        self.binary_same_shape("sub", lhs, rhs)?;
        let data: Vec<T> = self.nodes[lhs.0]
            .data
            .iter()
            .zip(self.nodes[rhs.0].data.iter())
            .map(|(&a, &b)| a - b)
            .collect();
        let shape = self.nodes[lhs.0].shape.clone();
        Ok(self.push(data, shape, false, Op::Sub { lhs: lhs.0, rhs: rhs.0 }))
    }

    pub fn mul(&mut self, lhs: TensorRef, rhs: TensorRef) -> TensorResult<TensorRef> {
        self.binary_same_shape("mul", lhs, rhs)?;
        let data: Vec<T> = self.nodes[lhs.0]
            .data
            .iter()
            .zip(self.nodes[rhs.0].data.iter())
            .map(|(&a, &b)| a * b)
            .collect();
        let shape = self.nodes[lhs.0].shape.clone();
        Ok(self.push(data, shape, false, Op::Mul { lhs: lhs.0, rhs: rhs.0 }))
    }

    pub fn scale(&mut self, input: TensorRef, factor: f64) -> TensorRef {
        let fac = T::from_f64(factor);
        let data: Vec<T> = self.nodes[input.0].data.iter().map(|&v| v * fac).collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(data, shape, false, Op::Scale { input: input.0, factor })
    }

    pub fn add_scalar(&mut self, input: TensorRef, value: f64) -> TensorRef {
        let c = T::from_f64(value);
        let data: Vec<T> = self.nodes[input.0].data.iter().map(|&v| v + c).collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(data, shape, false, Op::AddScalar { input: input.0 })
    }

    pub fn sigmoid(&mut self, input: TensorRef) -> TensorRef {
        let one = T::one();
        let data: Vec<T> = self.nodes[input.0]
            .data
            .iter()
            .map(|&v| one / (one + (-v).exp()))
            .collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(data, shape, false, Op::Sigmoid { input: input.0 })
    }

    pub fn silu(&mut self, input: TensorRef) -> TensorRef {
        let one = T::one();
        let data: Vec<T> = self.nodes[input.0]
            .data
            .iter()
            .map(|&v| v / (one + (-v).exp()))
            .collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(data, shape, false, Op::Silu { input: input.0 })
    }

    pub fn tanh(&mut self, input: TensorRef) -> TensorRef {
        let data: Vec<T> = self.nodes[input.0].data.iter().map(|&v| v.tanh()).collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(data, shape, false, Op::Tanh { input: input.0 })
    }

    pub fn abs(&mut self, input: TensorRef) -> TensorRef {
        let data: Vec<T> = self.nodes[input.0].data.iter().map(|&v| v.abs()).collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(data, shape, false, Op::Abs { input: input.0 })
    }

    /// Clamp to `[0, 1]`; gradient passes only where the input is strictly
    /// inside the interval.
    pub fn clamp01(&mut self, input: TensorRef) -> TensorRef {
        let (zero, one) = (T::zero(), T::one());
        let data: Vec<T> = self.nodes[input.0]
            .data
            .iter()
            .map(|&v| if v < zero { zero } else if v > one { one } else { v })
            .collect();
        let shape = self.nodes[input.0].shape.clone();
        self.push(data, shape, false, Op::Clamp01 { input: input.0 })
    }

    pub fn reshape(&mut self, input: TensorRef, shape: Vec<usize>) -> TensorResult<TensorRef> {
        let expected: usize = shape.iter().product();
        if expected != self.nodes[input.0].data.len() {
            return Err(TensorError::DataLength { expected, got: self.nodes[input.0].data.len() });
        }
        let data = self.nodes[input.0].data.clone();
        Ok(self.push(data, shape, false, Op::Reshape { input: input.0 }))
    }

    // ── Structured ops ──────────────────────────────────────────────────

    /// Affine map over the trailing dimension, broadcast over leading dims.
    /// `input [..., D_in] · weight [D_out, D_in]ᵀ + bias [D_out]`.
    pub fn linear(
        &mut self,
        input: TensorRef,
        weight: TensorRef,
        bias: TensorRef,
    ) -> TensorResult<TensorRef> {
        let in_shape = self.nodes[input.0].shape.clone();
        let w_shape = self.nodes[weight.0].shape.clone();
        if w_shape.len() != 2 || in_shape.is_empty() || *in_shape.last().unwrap() != w_shape[1] {
            return Err(TensorError::ShapeMismatch { op: "linear", left: in_shape, right: w_shape });
        }
        let (d_out, d_in) = (w_shape[0], w_shape[1]);
        if self.nodes[bias.0].shape != [d_out] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: self.nodes[bias.0].shape.clone(),
                right: vec![d_out],
            });
        }
        let rows = self.nodes[input.0].data.len() / d_in;
        let wt = matmul::transpose(&self.nodes[weight.0].data, d_out, d_in);
        let mut data = matmul::matmul_nn(&self.nodes[input.0].data, &wt, rows, d_in, d_out);
        for r in 0..rows {
            for (o, &b) in data[r * d_out..(r + 1) * d_out]
                .iter_mut()
                .zip(self.nodes[bias.0].data.iter())
            {
                *o = *o + b;
            }
        }
        let mut out_shape = in_shape;
        *out_shape.last_mut().unwrap() = d_out;
        Ok(self.push(
            data,
            out_shape,
            false,
            Op::Linear { input: input.0, weight: weight.0, bias: bias.0 },
        ))
    }

    /// Cross-correlation convolution with zero padding.
    pub fn conv2d(
        &mut self,
        input: TensorRef,
        weight: TensorRef,
        bias: TensorRef,
        stride: usize,
        padding: usize,
    ) -> TensorResult<TensorRef> {
        self.conv2d_dilated(input, weight, bias, stride, padding, 1)
    }

    pub fn conv2d_dilated(
        &mut self,
        input: TensorRef,
        weight: TensorRef,
        bias: TensorRef,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> TensorResult<TensorRef> {
        let in_shape = self.nodes[input.0].shape.clone();
        let w_shape = self.nodes[weight.0].shape.clone();
        if in_shape.len() != 4 || w_shape.len() != 4 || in_shape[1] != w_shape[1] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", left: in_shape, right: w_shape });
        }
        let (batch, c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
        let (c_out, kh, kw) = (w_shape[0], w_shape[2], w_shape[3]);
        if self.nodes[bias.0].shape != [c_out] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: self.nodes[bias.0].shape.clone(),
                right: vec![c_out],
            });
        }
        let h_out = conv::conv_out_dim(h, kh, stride, padding, dilation);
        let w_out = conv::conv_out_dim(w, kw, stride, padding, dilation);
        let (h_out, w_out) = match (h_out, w_out) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "conv2d",
                    message: format!(
                        "kernel {kh}x{kw} (stride {stride}, padding {padding}, dilation {dilation}) \
                         does not fit input {h}x{w}"
                    ),
                })
            }
        };
        let geometry = ConvGeometry {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            dilation,
            h_out,
            w_out,
        };
        let data = conv::conv2d_forward(
            &self.nodes[input.0].data,
            &self.nodes[weight.0].data,
            &self.nodes[bias.0].data,
            &geometry,
        );
        Ok(self.push(
            data,
            vec![batch, c_out, h_out, w_out],
            false,
            Op::Conv2d { input: input.0, weight: weight.0, bias: bias.0, geometry },
        ))
    }

    /// Per-(sample, group) standardization followed by a per-channel affine.
    pub fn group_norm(
        &mut self,
        input: TensorRef,
        groups: usize,
        gamma: TensorRef,
        beta: TensorRef,
        eps: f64,
    ) -> TensorResult<TensorRef> {
        let shape = self.nodes[input.0].shape.clone();
        if shape.len() != 4 {
            return Err(TensorError::InvalidArgument {
                op: "group_norm",
                message: format!("expected [N,C,H,W] input, got {shape:?}"),
            });
        }
        let channels = shape[1];
        if groups == 0 || channels % groups != 0 {
            return Err(TensorError::NotDivisible {
                op: "group_norm",
                value: channels,
                divisor: groups.max(1),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument {
                op: "group_norm",
                message: format!("eps must be > 0, got {eps}"),
            });
        }
        for (name, t) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[t.0].shape != [channels] {
                return Err(TensorError::InvalidArgument {
                    op: "group_norm",
                    message: format!(
                        "{name} shape {:?} does not match {channels} channels",
                        self.nodes[t.0].shape
                    ),
                });
            }
        }
        let (batch, spatial) = (shape[0], shape[2] * shape[3]);
        let per_group = channels / groups;
        let group_len = per_group * spatial;
        let eps_t = T::from_f64(eps);
        let x = &self.nodes[input.0].data;
        let gamma_d = &self.nodes[gamma.0].data;
        let beta_d = &self.nodes[beta.0].data;
        let mut data = vec![T::zero(); x.len()];
        for n in 0..batch {
            for g in 0..groups {
                let start = n * channels * spatial + g * group_len;
                let slice = &x[start..start + group_len];
                let m = T::from_f64(group_len as f64);
                let mut mean = T::zero();
                for &v in slice {
                    mean = mean + v;
                }
                mean = mean / m;
                let mut var = T::zero();
                for &v in slice {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var / m;
                let inv_std = T::one() / (var + eps_t).sqrt();
                for c_local in 0..per_group {
                    let c = g * per_group + c_local;
                    let (ga, be) = (gamma_d[c], beta_d[c]);
                    for s in 0..spatial {
                        let idx = start + c_local * spatial + s;
                        data[idx] = (x[idx] - mean) * inv_std * ga + be;
                    }
                }
            }
        }
        Ok(self.push(
            data,
            shape,
            false,
            Op::GroupNorm { input: input.0, gamma: gamma.0, beta: beta.0, groups, eps },
        ))
    }

    /// Nearest-neighbor upsampling by integer replication factors.
    pub fn nearest_upsample(
        &mut self,
        input: TensorRef,
        out_h: usize,
        out_w: usize,
    ) -> TensorResult<TensorRef> {
        let shape = self.nodes[input.0].shape.clone();
        if shape.len() != 4 {
            return Err(TensorError::InvalidArgument {
                op: "nearest_upsample",
                message: format!("expected [N,C,H,W] input, got {shape:?}"),
            });
        }
        let (batch, channels, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if out_h < h || out_h % h != 0 {
            return Err(TensorError::NotDivisible { op: "nearest_upsample", value: out_h, divisor: h });
        }
        if out_w < w || out_w % w != 0 {
            return Err(TensorError::NotDivisible { op: "nearest_upsample", value: out_w, divisor: w });
        }
        let (fh, fw) = (out_h / h, out_w / w);
        let x = &self.nodes[input.0].data;
        let mut data = vec![T::zero(); batch * channels * out_h * out_w];
        for nc in 0..batch * channels {
            let src = &x[nc * h * w..(nc + 1) * h * w];
            let dst = &mut data[nc * out_h * out_w..(nc + 1) * out_h * out_w];
            for oy in 0..out_h {
                let iy = oy / fh;
                for ox in 0..out_w {
                    dst[oy * out_w + ox] = src[iy * w + ox / fw];
                }
            }
        }
        Ok(self.push(
            data,
            vec![batch, channels, out_h, out_w],
            false,
            Op::NearestUpsample { input: input.0, factor_h: fh, factor_w: fw },
        ))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: TensorRef) -> TensorResult<TensorRef> {
        let shape = self.nodes[input.0].shape.clone();
        if shape.len() != 4 {
            return Err(TensorError::InvalidArgument {
                op: "global_avg_pool",
                message: format!("expected [N,C,H,W] input, got {shape:?}"),
            });
        }
        let (batch, channels, spatial) = (shape[0], shape[1], shape[2] * shape[3]);
        let inv = T::from_f64(1.0 / spatial as f64);
        let x = &self.nodes[input.0].data;
        let mut data = vec![T::zero(); batch * channels];
        for nc in 0..batch * channels {
            let mut s = T::zero();
            for &v in &x[nc * spatial..(nc + 1) * spatial] {
                s = s + v;
            }
            data[nc] = s * inv;
        }
        Ok(self.push(data, vec![batch, channels], false, Op::GlobalAvgPool { input: input.0 }))
    }

    /// Mean over every element, producing a `[1]` scalar.
    pub fn mean_all(&mut self, input: TensorRef) -> TensorRef {
        let x = &self.nodes[input.0].data;
        let mut s = T::zero();
        for &v in x {
            s = s + v;
        }
        let mean = s / T::from_f64(x.len() as f64);
        self.push(vec![mean], vec![1], false, Op::MeanAll { input: input.0 })
    }

    /// Concatenate two `[N, C, H, W]` maps along the channel axis.
    pub fn concat_channels(&mut self, lhs: TensorRef, rhs: TensorRef) -> TensorResult<TensorRef> {
        let a = self.nodes[lhs.0].shape.clone();
        let b = self.nodes[rhs.0].shape.clone();
        if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2] != b[2] || a[3] != b[3] {
            return Err(TensorError::ShapeMismatch { op: "concat_channels", left: a, right: b });
        }
        let (batch, spatial) = (a[0], a[2] * a[3]);
        let (ca, cb) = (a[1], b[1]);
        let mut data = vec![T::zero(); batch * (ca + cb) * spatial];
        for n in 0..batch {
            let dst = &mut data[n * (ca + cb) * spatial..(n + 1) * (ca + cb) * spatial];
            dst[..ca * spatial]
                .copy_from_slice(&self.nodes[lhs.0].data[n * ca * spatial..(n + 1) * ca * spatial]);
            dst[ca * spatial..]
                .copy_from_slice(&self.nodes[rhs.0].data[n * cb * spatial..(n + 1) * cb * spatial]);
        }
        Ok(self.push(
            data,
            vec![batch, ca + cb, a[2], a[3]],
            false,
            Op::ConcatChannels { lhs: lhs.0, rhs: rhs.0 },
        ))
    }

    /// `[N, C, H, W] -> [N, H·W, C]`: one token per spatial position.
    pub fn map_to_tokens(&mut self, input: TensorRef) -> TensorResult<TensorRef> {
        let shape = self.nodes[input.0].shape.clone();
        if shape.len() != 4 {
            return Err(TensorError::InvalidArgument {
                op: "map_to_tokens",
                message: format!("expected [N,C,H,W] input, got {shape:?}"),
            });
        }
        let (batch, channels, spatial) = (shape[0], shape[1], shape[2] * shape[3]);
        let x = &self.nodes[input.0].data;
        let mut data = vec![T::zero(); x.len()];
        for n in 0..batch {
            for c in 0..channels {
                for s in 0..spatial {
                    data[n * spatial * channels + s * channels + c] =
                        x[n * channels * spatial + c * spatial + s];
                }
            }
        }
        Ok(self.push(data, vec![batch, spatial, channels], false, Op::MapToTokens { input: input.0 }))
    }

    /// `[N, gh·gw, C] -> [N, C, gh, gw]`: inverse of [`Tape::map_to_tokens`].
    pub fn tokens_to_map(
        &mut self,
        input: TensorRef,
        grid_h: usize,
        grid_w: usize,
    ) -> TensorResult<TensorRef> {
        let shape = self.nodes[input.0].shape.clone();
        if shape.len() != 3 || shape[1] != grid_h * grid_w {
            return Err(TensorError::InvalidArgument {
                op: "tokens_to_map",
                message: format!("expected [N,{}, C] tokens, got {shape:?}", grid_h * grid_w),
            });
        }
        let (batch, spatial, channels) = (shape[0], shape[1], shape[2]);
        let x = &self.nodes[input.0].data;
        let mut data = vec![T::zero(); x.len()];
        for n in 0..batch {
            for s in 0..spatial {
                for c in 0..channels {
                    data[n * channels * spatial + c * spatial + s] =
                        x[n * spatial * channels + s * channels + c];
                }
            }
        }
        Ok(self.push(
            data,
            vec![batch, channels, grid_h, grid_w],
            false,
            Op::TokensToMap { input: input.0, grid_h, grid_w },
        ))
    }

    /// Multi-head self-attention over `[N, L, D]` tokens with residual:
    /// `tokens + Wo(MHA(tokens)) + bo`. Softmax runs over the token axis.
    /// Q/K/V projections are bias-free (see `attention` module docs).
    #[allow(clippy::too_many_arguments)]
    pub fn self_attention(
        &mut self,
        tokens: TensorRef,
        heads: usize,
        wq: TensorRef,
        wk: TensorRef,
        wv: TensorRef,
        wo: TensorRef,
        bo: TensorRef,
    ) -> TensorResult<TensorRef> {
        let shape = self.nodes[tokens.0].shape.clone();
        if shape.len() != 3 {
            return Err(TensorError::InvalidArgument {
                op: "self_attention",
                message: format!("expected [N,L,D] tokens, got {shape:?}"),
            });
        }
        let (batch, len, dim) = (shape[0], shape[1], shape[2]);
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::NotDivisible {
                op: "self_attention",
                value: dim,
                divisor: heads.max(1),
            });
        }
        for w in [wq, wk, wv, wo] {
            if self.nodes[w.0].shape != [dim, dim] {
                return Err(TensorError::ShapeMismatch {
                    op: "self_attention",
                    left: self.nodes[w.0].shape.clone(),
                    right: vec![dim, dim],
                });
            }
        }
        if self.nodes[bo.0].shape != [dim] {
            return Err(TensorError::ShapeMismatch {
                op: "self_attention",
                left: self.nodes[bo.0].shape.clone(),
                right: vec![dim],
            });
        }
        let geometry = AttnGeometry { batch, len, dim, heads };
        let weights = AttnWeights {
            wq: &self.nodes[wq.0].data,
            wk: &self.nodes[wk.0].data,
            wv: &self.nodes[wv.0].data,
            wo: &self.nodes[wo.0].data,
            bo: &self.nodes[bo.0].data,
        };
        let data = attention::attention_forward(&self.nodes[tokens.0].data, &weights, &geometry);
        Ok(self.push(
            data,
            shape,
            false,
            Op::Attention {
                tokens: tokens.0,
                wq: wq.0,
                wk: wk.0,
                wv: wv.0,
                wo: wo.0,
                bo: bo.0,
                heads,
            },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode accumulation from a scalar loss. Gradients of previous
    /// calls are discarded; leaves off the loss path end up with zeros.
    pub fn backward(&mut self, loss: TensorRef) -> TensorResult<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.nodes[loss.0].shape.clone() });
        }
        self.grads = self.nodes.iter().map(|n| vec![T::zero(); n.data.len()]).collect();
        self.grads[loss.0][0] = T::one();

        for i in (0..self.nodes.len()).rev() {
            let g = std::mem::take(&mut self.grads[i]);
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add { lhs, rhs } => {
                    acc(&mut self.grads[lhs], &g);
                    acc(&mut self.grads[rhs], &g);
                }
                Op::Sub { lhs, rhs } => {
                    acc(&mut self.grads[lhs], &g);
                    for (d, &gv) in self.grads[rhs].iter_mut().zip(g.iter()) {
                        *d = *d - gv;
                    }
                }
                Op::Mul { lhs, rhs } => {
                    let (ld, rd) = (&self.nodes[lhs].data, &self.nodes[rhs].data);
                    let dl: Vec<T> = g.iter().zip(rd.iter()).map(|(&gv, &r)| gv * r).collect();
                    let dr: Vec<T> = g.iter().zip(ld.iter()).map(|(&gv, &l)| gv * l).collect();
                    acc(&mut self.grads[lhs], &dl);
                    acc(&mut self.grads[rhs], &dr);
                }
                Op::Scale { input, factor } => {
                    let f = T::from_f64(factor);
                    for (d, &gv) in self.grads[input].iter_mut().zip(g.iter()) {
                        *d = *d + gv * f;
                    }
                }
                Op::AddScalar { input } => acc(&mut self.grads[input], &g),
                Op::Sigmoid { input } => {
                    let out = &self.nodes[i].data;
                    for ((d, &gv), &s) in
                        self.grads[input].iter_mut().zip(g.iter()).zip(out.iter())
                    {
                        *d = *d + gv * s * (T::one() - s);
                    }
                }
                Op::Silu { input } => {
                    let x = &self.nodes[input].data;
                    let one = T::one();
                    for ((d, &gv), &xv) in self.grads[input].iter_mut().zip(g.iter()).zip(x.iter())
                    {
                        let s = one / (one + (-xv).exp());
                        *d = *d + gv * s * (one + xv * (one - s));
                    }
                }
                Op::Tanh { input } => {
                    let out = &self.nodes[i].data;
                    for ((d, &gv), &t) in self.grads[input].iter_mut().zip(g.iter()).zip(out.iter())
                    {
                        *d = *d + gv * (T::one() - t * t);
                    }
                }
                Op::Abs { input } => {
                    let x = &self.nodes[input].data;
                    let zero = T::zero();
                    for ((d, &gv), &xv) in self.grads[input].iter_mut().zip(g.iter()).zip(x.iter())
                    {
                        if xv > zero {
                            *d = *d + gv;
                        } else if xv < zero {
                            *d = *d - gv;
                        }
                    }
                }
                Op::Clamp01 { input } => {
                    let x = &self.nodes[input].data;
                    let (zero, one) = (T::zero(), T::one());
                    for ((d, &gv), &xv) in self.grads[input].iter_mut().zip(g.iter()).zip(x.iter())
                    {
                        if xv > zero && xv < one {
                            *d = *d + gv;
                        }
                    }
                }
                Op::Reshape { input } => acc(&mut self.grads[input], &g),
                Op::Linear { input, weight, bias } => {
                    let w_shape = &self.nodes[weight].shape;
                    let (d_out, d_in) = (w_shape[0], w_shape[1]);
                    let rows = self.nodes[input].data.len() / d_in;
                    // d_input = g · W
                    let d_in_mat =
                        matmul::matmul_nn(&g, &self.nodes[weight].data, rows, d_out, d_in);
                    acc(&mut self.grads[input], &d_in_mat);
                    // d_weight = gᵀ · input
                    let g_t = matmul::transpose(&g, rows, d_out);
                    let mut dw = std::mem::take(&mut self.grads[weight]);
                    matmul::matmul_nn_acc(&g_t, &self.nodes[input].data, &mut dw, d_out, rows, d_in);
                    self.grads[weight] = dw;
                    for r in 0..rows {
                        for (b, &gv) in
                            self.grads[bias].iter_mut().zip(g[r * d_out..(r + 1) * d_out].iter())
                        {
                            *b = *b + gv;
                        }
                    }
                }
                Op::Conv2d { input, weight, bias, geometry } => {
                    let (dx, dw, db) = conv::conv2d_backward(
                        &self.nodes[input].data,
                        &self.nodes[weight].data,
                        &g,
                        &geometry,
                    );
                    acc(&mut self.grads[input], &dx);
                    acc(&mut self.grads[weight], &dw);
                    acc(&mut self.grads[bias], &db);
                }
                Op::GroupNorm { input, gamma, beta, groups, eps } => {
                    self.group_norm_backward(i, input, gamma, beta, groups, eps, &g);
                }
                Op::NearestUpsample { input, factor_h, factor_w } => {
                    let in_shape = &self.nodes[input].shape;
                    let (h, w) = (in_shape[2], in_shape[3]);
                    let (out_h, out_w) = (h * factor_h, w * factor_w);
                    let planes = in_shape[0] * in_shape[1];
                    let mut dx = vec![T::zero(); self.nodes[input].data.len()];
                    for nc in 0..planes {
                        let src = &g[nc * out_h * out_w..(nc + 1) * out_h * out_w];
                        let dst = &mut dx[nc * h * w..(nc + 1) * h * w];
                        for oy in 0..out_h {
                            let iy = oy / factor_h;
                            for ox in 0..out_w {
                                let idx = iy * w + ox / factor_w;
                                dst[idx] = dst[idx] + src[oy * out_w + ox];
                            }
                        }
                    }
                    acc(&mut self.grads[input], &dx);
                }
                Op::GlobalAvgPool { input } => {
                    let in_shape = &self.nodes[input].shape;
                    let spatial = in_shape[2] * in_shape[3];
                    let inv = T::from_f64(1.0 / spatial as f64);
                    let dx_grad = &mut self.grads[input];
                    for (nc, &gv) in g.iter().enumerate() {
                        let gs = gv * inv;
                        for d in dx_grad[nc * spatial..(nc + 1) * spatial].iter_mut() {
                            *d = *d + gs;
                        }
                    }
                }
                Op::MeanAll { input } => {
                    let n = self.nodes[input].data.len();
                    let gs = g[0] * T::from_f64(1.0 / n as f64);
                    for d in self.grads[input].iter_mut() {
                        *d = *d + gs;
                    }
                }
                Op::ConcatChannels { lhs, rhs } => {
                    let (a, b) = (&self.nodes[lhs].shape, &self.nodes[rhs].shape);
                    let (batch, spatial) = (a[0], a[2] * a[3]);
                    let (ca, cb) = (a[1], b[1]);
                    for n in 0..batch {
                        let src = &g[n * (ca + cb) * spatial..(n + 1) * (ca + cb) * spatial];
                        for (d, &gv) in self.grads[lhs][n * ca * spatial..(n + 1) * ca * spatial]
                            .iter_mut()
                            .zip(src[..ca * spatial].iter())
                        {
                            *d = *d + gv;
                        }
                        for (d, &gv) in self.grads[rhs][n * cb * spatial..(n + 1) * cb * spatial]
                            .iter_mut()
                            .zip(src[ca * spatial..].iter())
                        {
                            *d = *d + gv;
                        }
                    }
                }
                Op::MapToTokens { input } => {
                    let in_shape = &self.nodes[input].shape;
                    let (batch, channels, spatial) = (in_shape[0], in_shape[1], in_shape[2] * in_shape[3]);
                    let dx_grad = &mut self.grads[input];
                    for n in 0..batch {
                        for c in 0..channels {
                            for s in 0..spatial {
                                let idx = n * channels * spatial + c * spatial + s;
                                dx_grad[idx] =
                                    dx_grad[idx] + g[n * spatial * channels + s * channels + c];
                            }
                        }
                    }
                }
                Op::TokensToMap { input, grid_h, grid_w } => {
                    let in_shape = &self.nodes[input].shape;
                    let (batch, spatial, channels) = (in_shape[0], in_shape[1], in_shape[2]);
                    debug_assert_eq!(spatial, grid_h * grid_w);
                    let dx_grad = &mut self.grads[input];
                    for n in 0..batch {
                        for s in 0..spatial {
                            for c in 0..channels {
                                let idx = n * spatial * channels + s * channels + c;
                                dx_grad[idx] =
                                    dx_grad[idx] + g[n * channels * spatial + c * spatial + s];
                            }
                        }
                    }
                }
                Op::Attention { tokens, wq, wk, wv, wo, bo, heads } => {
                    let shape = &self.nodes[tokens].shape;
                    let geometry =
                        AttnGeometry { batch: shape[0], len: shape[1], dim: shape[2], heads };
                    let weights = AttnWeights {
                        wq: &self.nodes[wq].data,
                        wk: &self.nodes[wk].data,
                        wv: &self.nodes[wv].data,
                        wo: &self.nodes[wo].data,
                        bo: &self.nodes[bo].data,
                    };
                    let gr = attention::attention_backward(
                        &self.nodes[tokens].data,
                        &weights,
                        &g,
                        &geometry,
                    );
                    acc(&mut self.grads[tokens], &gr.d_tokens);
                    acc(&mut self.grads[wq], &gr.d_wq);
                    acc(&mut self.grads[wk], &gr.d_wk);
                    acc(&mut self.grads[wv], &gr.d_wv);
                    acc(&mut self.grads[wo], &gr.d_wo);
                    acc(&mut self.grads[bo], &gr.d_bo);
                }
            }
            self.grads[i] = g;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &mut self,
        out_idx: usize,
        input: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        eps: f64,
        g: &[T],
    ) {
        let shape = &self.nodes[input].shape;
        let (batch, channels, spatial) = (shape[0], shape[1], shape[2] * shape[3]);
        let per_group = channels / groups;
        let group_len = per_group * spatial;
        let eps_t = T::from_f64(eps);
        let _ = out_idx;
        let x = &self.nodes[input].data;
        let gamma_d = &self.nodes[gamma].data;

        let mut dx = vec![T::zero(); x.len()];
        let mut dgamma = vec![T::zero(); channels];
        let mut dbeta = vec![T::zero(); channels];

        for n in 0..batch {
            for gi in 0..groups {
                let start = n * channels * spatial + gi * group_len;
                let xs = &x[start..start + group_len];
                let gs = &g[start..start + group_len];
                let m = T::from_f64(group_len as f64);
                let mut mean = T::zero();
                for &v in xs {
                    mean = mean + v;
                }
                mean = mean / m;
                let mut var = T::zero();
                for &v in xs {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var / m;
                let inv_std = T::one() / (var + eps_t).sqrt();

                // Per-channel affine grads and the two group-wide sums.
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for c_local in 0..per_group {
                    let c = gi * per_group + c_local;
                    let ga = gamma_d[c];
                    for s in 0..spatial {
                        let j = c_local * spatial + s;
                        let xhat = (xs[j] - mean) * inv_std;
                        dgamma[c] = dgamma[c] + gs[j] * xhat;
                        dbeta[c] = dbeta[c] + gs[j];
                        let dxhat = gs[j] * ga;
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                    }
                }
                let inv_m = T::one() / m;
                for c_local in 0..per_group {
                    let c = gi * per_group + c_local;
                    let ga = gamma_d[c];
                    for s in 0..spatial {
                        let j = c_local * spatial + s;
                        let xhat = (xs[j] - mean) * inv_std;
                        let dxhat = gs[j] * ga;
                        dx[start + j] = dx[start + j]
                            + inv_std * (dxhat - inv_m * sum_dxhat - xhat * inv_m * sum_dxhat_xhat);
                    }
                }
            }
        }
        acc(&mut self.grads[input], &dx);
        acc(&mut self.grads[gamma], &dgamma);
        acc(&mut self.grads[beta], &dbeta);
    }
}

fn acc<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d = *d + s;
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::finite_difference_check;
    use super::*;
    use crate::rng::Seed;

    fn rand_vec(n: usize, rng: &mut crate::rng::Rng) -> Vec<f64> {
        (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }

    // ── conv2d ──────────────────────────────────────────────────────────

    #[test]
    fn conv2d_unit_kernel_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1.0, 2.0, 3.0, 4.0], vec![1, 1, 2, 2]).unwrap();
        let w = tape.constant(vec![1.0], vec![1, 1, 1, 1]).unwrap();
        let b = tape.constant(vec![0.0], vec![1]).unwrap();
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn conv2d_all_ones_kernel_sums() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1.0, 2.0, 3.0, 4.0], vec![1, 1, 2, 2]).unwrap();
        let w = tape.constant(vec![1.0; 4], vec![1, 1, 2, 2]).unwrap();
        let b = tape.constant(vec![0.0], vec![1]).unwrap();
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.data(y), &[10.0]);
    }

    #[test]
    fn conv2d_weight_gradient_matches_finite_differences() {
        let mut rng = Seed::new(11).rng();
        let x = rand_vec(16, &mut rng);
        let w = rand_vec(9, &mut rng);
        let b = rand_vec(1, &mut rng);
        let params = vec![
            (x, vec![1usize, 1, 4, 4]),
            (w, vec![1usize, 1, 3, 3]),
            (b, vec![1usize]),
        ];
        let err = finite_difference_check(&params, 1e-5, |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
            let m = tape.mean_all(y);
            Ok(tape.scale(m, 16.0))
        })
        .unwrap();
        assert!(err < 1e-4, "conv2d fd error {err}");
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![0.0; 2 * 4], vec![1, 2, 2, 2]).unwrap();
        let w = tape.constant(vec![0.0; 3 * 9], vec![1, 3, 3, 3]).unwrap();
        let b = tape.constant(vec![0.0], vec![1]).unwrap();
        let err = tape.conv2d(x, w, b, 1, 1).unwrap_err();
        match err {
            TensorError::ShapeMismatch { op: "conv2d", left, right } => {
                assert_eq!(left, vec![1, 2, 2, 2]);
                assert_eq!(right, vec![1, 3, 3, 3]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn conv2d_stride_and_dilation_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![0.0; 49], vec![1, 1, 7, 7]).unwrap();
        let w = tape.constant(vec![0.0; 9], vec![1, 1, 3, 3]).unwrap();
        let b = tape.constant(vec![0.0], vec![1]).unwrap();
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
        let y = tape.conv2d_dilated(x, w, b, 1, 2, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 7, 7]);
    }

    // ── linear ──────────────────────────────────────────────────────────

    #[test]
    fn linear_identity_and_bias_broadcast() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3]).unwrap();
        let eye = tape
            .constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![3, 3])
            .unwrap();
        let zero_b = tape.constant(vec![0.0; 3], vec![3]).unwrap();
        let y = tape.linear(x, eye, zero_b).unwrap();
        assert_eq!(tape.data(y), tape.data(x));

        let zero_w = tape.constant(vec![0.0; 9], vec![3, 3]).unwrap();
        let b = tape.constant(vec![0.5, -1.0, 2.0], vec![3]).unwrap();
        let y = tape.linear(x, zero_w, b).unwrap();
        assert_eq!(tape.data(y), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn linear_matches_dot_product_oracle() {
        let mut rng = Seed::new(21).rng();
        let x = rand_vec(2 * 5, &mut rng);
        let w = rand_vec(3 * 5, &mut rng);
        let b = rand_vec(3, &mut rng);
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(x.clone(), vec![2, 5]).unwrap();
        let wi = tape.constant(w.clone(), vec![3, 5]).unwrap();
        let bi = tape.constant(b.clone(), vec![3]).unwrap();
        let y = tape.linear(xi, wi, bi).unwrap();
        for r in 0..2 {
            for o in 0..3 {
                let mut expect = b[o];
                for i in 0..5 {
                    expect += x[r * 5 + i] * w[o * 5 + i];
                }
                assert!((tape.data(y)[r * 3 + o] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn linear_rejects_dim_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![0.0; 4], vec![1, 4]).unwrap();
        let w = tape.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = tape.constant(vec![0.0; 2], vec![2]).unwrap();
        assert!(matches!(
            tape.linear(x, w, b),
            Err(TensorError::ShapeMismatch { op: "linear", .. })
        ));
    }

    // ── group_norm ──────────────────────────────────────────────────────

    #[test]
    fn group_norm_constant_input_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![3.5; 2 * 4 * 2 * 2], vec![2, 4, 2, 2]).unwrap();
        let gamma = tape.constant(vec![1.0; 4], vec![4]).unwrap();
        let beta = tape.constant(vec![0.0; 4], vec![4]).unwrap();
        let y = tape.group_norm(x, 2, gamma, beta, 1e-5).unwrap();
        for &v in tape.data(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn group_norm_standardizes_each_group() {
        let mut rng = Seed::new(31).rng();
        let x = rand_vec(1 * 8 * 3 * 3, &mut rng);
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(x, vec![1, 8, 3, 3]).unwrap();
        let gamma = tape.constant(vec![1.0; 8], vec![8]).unwrap();
        let beta = tape.constant(vec![0.0; 8], vec![8]).unwrap();
        let y = tape.group_norm(xi, 4, gamma, beta, 1e-8).unwrap();
        let out = tape.data(y);
        let group_len = 2 * 9;
        for g in 0..4 {
            let slice = &out[g * group_len..(g + 1) * group_len];
            let mean: f64 = slice.iter().sum::<f64>() / group_len as f64;
            let var: f64 =
                slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group_len as f64;
            assert!(mean.abs() < 1e-6, "group {g} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "group {g} var {var}");
        }
    }

    #[test]
    fn group_norm_matches_two_pass_oracle() {
        let mut rng = Seed::new(41).rng();
        let x = rand_vec(2 * 4 * 2 * 2, &mut rng);
        let gamma = rand_vec(4, &mut rng);
        let beta = rand_vec(4, &mut rng);
        let eps = 1e-5;
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(x.clone(), vec![2, 4, 2, 2]).unwrap();
        let gi = tape.constant(gamma.clone(), vec![4]).unwrap();
        let bi = tape.constant(beta.clone(), vec![4]).unwrap();
        let y = tape.group_norm(xi, 2, gi, bi, eps).unwrap();
        // Direct two-pass oracle, groups of 2 channels.
        let spatial = 4;
        let group_len = 2 * spatial;
        for n in 0..2 {
            for g in 0..2 {
                let start = n * 4 * spatial + g * group_len;
                let slice = &x[start..start + group_len];
                let mean: f64 = slice.iter().sum::<f64>() / group_len as f64;
                let var: f64 =
                    slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group_len as f64;
                for c_local in 0..2 {
                    let c = g * 2 + c_local;
                    for s in 0..spatial {
                        let idx = start + c_local * spatial + s;
                        let expect = (x[idx] - mean) / (var + eps).sqrt() * gamma[c] + beta[c];
                        assert!((tape.data(y)[idx] - expect).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn group_norm_rejects_indivisible_channels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![0.0; 6 * 4], vec![1, 6, 2, 2]).unwrap();
        let gamma = tape.constant(vec![1.0; 6], vec![6]).unwrap();
        let beta = tape.constant(vec![0.0; 6], vec![6]).unwrap();
        assert!(matches!(
            tape.group_norm(x, 4, gamma, beta, 1e-5),
            Err(TensorError::NotDivisible { op: "group_norm", value: 6, divisor: 4 })
        ));
    }

    // ── nearest_upsample ────────────────────────────────────────────────

    #[test]
    fn upsample_identity_and_broadcast() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1.0, 2.0, 3.0, 4.0], vec![1, 1, 2, 2]).unwrap();
        let y = tape.nearest_upsample(x, 2, 2).unwrap();
        assert_eq!(tape.data(y), tape.data(x));

        let v = tape.constant(vec![0.7], vec![1, 1, 1, 1]).unwrap();
        let y = tape.nearest_upsample(v, 8, 8).unwrap();
        assert!(tape.data(y).iter().all(|&o| o == 0.7));
    }

    #[test]
    fn upsample_blocks_and_block_sum_gradient() {
        let mut rng = Seed::new(51).rng();
        let x = rand_vec(49, &mut rng);
        let mut tape = Tape::<f64>::new();
        let xi = tape.param(x.clone(), vec![1, 1, 7, 7]).unwrap();
        let y = tape.nearest_upsample(xi, 56, 56).unwrap();
        for oy in 0..56 {
            for ox in 0..56 {
                assert_eq!(tape.data(y)[oy * 56 + ox], x[(oy / 8) * 7 + ox / 8]);
            }
        }
        // Sum loss: every upstream gradient is 1, so each source cell gets 64.
        let m = tape.mean_all(y);
        let loss = tape.scale(m, (56 * 56) as f64);
        tape.backward(loss).unwrap();
        for &gv in tape.grad(xi) {
            assert!((gv - 64.0).abs() < 1e-9);
        }
    }

    #[test]
    fn upsample_rejects_non_integer_factor() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![0.0; 9], vec![1, 1, 3, 3]).unwrap();
        assert!(matches!(
            tape.nearest_upsample(x, 7, 9),
            Err(TensorError::NotDivisible { op: "nearest_upsample", .. })
        ));
    }

    // ── self_attention ──────────────────────────────────────────────────

    fn attn_params(d: usize, rng: &mut crate::rng::Rng) -> Vec<(Vec<f64>, Vec<usize>)> {
        let mut out = Vec::new();
        for _ in 0..4 {
            out.push((rand_vec(d * d, rng), vec![d, d]));
        }
        out.push((rand_vec(d, rng), vec![d]));
        out
    }

    fn tape_attention(
        tape: &mut Tape<f64>,
        tokens: TensorRef,
        heads: usize,
        ids: &[TensorRef],
    ) -> TensorResult<TensorRef> {
        tape.self_attention(tokens, heads, ids[0], ids[1], ids[2], ids[3], ids[4])
    }

    #[test]
    fn attention_single_token_reduces_to_value_projection() {
        let d = 4;
        let mut rng = Seed::new(61).rng();
        let params = attn_params(d, &mut rng);
        let x = rand_vec(d, &mut rng);
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(x.clone(), vec![1, 1, d]).unwrap();
        let ids: Vec<TensorRef> = params
            .iter()
            .map(|(data, shape)| tape.constant(data.clone(), shape.clone()).unwrap())
            .collect();
        let y = tape_attention(&mut tape, xi, 1, &ids).unwrap();
        // With one token the softmax weight is exactly 1, so the output is
        // residual + Wo(value(x)) + bo.
        let wv = &params[2].0;
        let (wo, bo) = (&params[3].0, &params[4].0);
        let mut v = vec![0.0; d];
        for o in 0..d {
            v[o] = (0..d).map(|i| x[i] * wv[o * d + i]).sum::<f64>();
        }
        for o in 0..d {
            let proj = bo[o] + (0..d).map(|i| v[i] * wo[o * d + i]).sum::<f64>();
            assert!((tape.data(y)[o] - (x[o] + proj)).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let (l, d) = (5, 6);
        let mut rng = Seed::new(71).rng();
        let params = attn_params(d, &mut rng);
        let x = rand_vec(l * d, &mut rng);
        let run = |tokens: &[f64]| -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let xi = tape.constant(tokens.to_vec(), vec![1, l, d]).unwrap();
            let ids: Vec<TensorRef> = params
                .iter()
                .map(|(data, shape)| tape.constant(data.clone(), shape.clone()).unwrap())
                .collect();
            let y = tape_attention(&mut tape, xi, 2, &ids).unwrap();
            tape.data(y).to_vec()
        };
        let base = run(&x);
        let perm = [3usize, 0, 4, 1, 2];
        let mut shuffled = vec![0.0; l * d];
        for (dst, &src) in perm.iter().enumerate() {
            shuffled[dst * d..(dst + 1) * d].copy_from_slice(&x[src * d..(src + 1) * d]);
        }
        let permuted = run(&shuffled);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..d {
                assert!((permuted[dst * d + c] - base[src * d + c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_matches_brute_force_formula() {
        let (l, d) = (2, 4);
        let mut rng = Seed::new(81).rng();
        let params = attn_params(d, &mut rng);
        let x = rand_vec(l * d, &mut rng);
        let mut tape = Tape::<f64>::new();
        let xi = tape.constant(x.clone(), vec![1, l, d]).unwrap();
        let ids: Vec<TensorRef> = params
            .iter()
            .map(|(data, shape)| tape.constant(data.clone(), shape.clone()).unwrap())
            .collect();
        let y = tape_attention(&mut tape, xi, 1, &ids).unwrap();

        // Independent enumeration of the attention formula.
        let project = |w: &[f64], row: &[f64]| -> Vec<f64> {
            (0..d).map(|o| (0..d).map(|i| row[i] * w[o * d + i]).sum::<f64>()).collect()
        };
        let rows: Vec<&[f64]> = (0..l).map(|r| &x[r * d..(r + 1) * d]).collect();
        let q: Vec<Vec<f64>> = rows.iter().map(|r| project(&params[0].0, r)).collect();
        let k: Vec<Vec<f64>> = rows.iter().map(|r| project(&params[1].0, r)).collect();
        let v: Vec<Vec<f64>> = rows.iter().map(|r| project(&params[2].0, r)).collect();
        let scale = 1.0 / (d as f64).sqrt();
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            let mixed: Vec<f64> = (0..d)
                .map(|c| (0..l).map(|j| exps[j] / denom * v[j][c]).sum::<f64>())
                .collect();
            let bo = &params[4].0;
            let proj = project(&params[3].0, &mixed);
            for c in 0..d {
                assert!(
                    (tape.data(y)[i * d + c] - (x[i * d + c] + proj[c] + bo[c])).abs() < 1e-6,
                    "mismatch at token {i} channel {c}"
                );
            }
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let (l, d) = (3, 4);
        let mut rng = Seed::new(91).rng();
        let mut params = vec![(rand_vec(l * d, &mut rng), vec![1usize, l, d])];
        params.extend(attn_params(d, &mut rng));
        // A generic linear probe as the loss functional: under a plain mean,
        // the key bias has an exactly-zero gradient (softmax shift
        // invariance), which degenerates the relative-error comparison.
        let probe = rand_vec(l * d, &mut rng);
        let err = finite_difference_check(&params, 1e-5, |tape, ids| {
            let y = tape_attention(tape, ids[0], 2, &ids[1..])?;
            let p = tape.constant(probe.clone(), vec![1, l, d])?;
            let weighted = tape.mul(y, p)?;
            Ok(tape.mean_all(weighted))
        })
        .unwrap();
        assert!(err < 1e-4, "attention fd error {err}");
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![0.0; 6], vec![1, 1, 6]).unwrap();
        let w = tape.constant(vec![0.0; 36], vec![6, 6]).unwrap();
        let b = tape.constant(vec![0.0; 6], vec![6]).unwrap();
        assert!(matches!(
            tape.self_attention(x, 4, w, w, w, w, b),
            Err(TensorError::NotDivisible { op: "self_attention", value: 6, divisor: 4 })
        ));
    }

    // ── backward ────────────────────────────────────────────────────────

    #[test]
    fn backward_identity_and_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(vec![3.0], vec![1]).unwrap();
        tape.backward(x).unwrap();
        assert_eq!(tape.grad(x), &[1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(vec![3.0], vec![1]).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(vec![1.0, 2.0], vec![2]).unwrap();
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn backward_off_path_parameter_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(vec![2.0], vec![1]).unwrap();
        let unused = tape.param(vec![5.0, 6.0], vec![2]).unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(unused), &[0.0, 0.0]);
    }

    #[test]
    fn backward_composite_graph_matches_finite_differences() {
        let mut rng = Seed::new(101).rng();
        let params = vec![
            (rand_vec(2 * 2 * 4 * 4, &mut rng), vec![2usize, 2, 4, 4]),
            (rand_vec(4 * 2 * 3 * 3, &mut rng), vec![4usize, 2, 3, 3]),
            (rand_vec(4, &mut rng), vec![4usize]),
            (rand_vec(4, &mut rng), vec![4usize]),
            (rand_vec(4, &mut rng), vec![4usize]),
            (rand_vec(3 * 4, &mut rng), vec![3usize, 4]),
            (rand_vec(3, &mut rng), vec![3usize]),
        ];
        let err = finite_difference_check(&params, 1e-5, |tape, ids| {
            let conv = tape.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
            let norm = tape.group_norm(conv, 2, ids[3], ids[4], 1e-5)?;
            let act = tape.silu(norm);
            let pooled = tape.global_avg_pool(act)?;
            let fc = tape.linear(pooled, ids[5], ids[6])?;
            let sig = tape.sigmoid(fc);
            Ok(tape.mean_all(sig))
        })
        .unwrap();
        assert!(err < 1e-4, "composite fd error {err}");
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || -> (Vec<u8>, Vec<u8>) {
            let mut rng = Seed::new(77).rng();
            let x = rand_vec(2 * 3 * 4 * 4, &mut rng);
            let w = rand_vec(2 * 3 * 3 * 3, &mut rng);
            let b = rand_vec(2, &mut rng);
            let mut tape = Tape::<f64>::new();
            let xi = tape.param(x, vec![2, 3, 4, 4]).unwrap();
            let wi = tape.param(w, vec![2, 3, 3, 3]).unwrap();
            let bi = tape.param(b, vec![2]).unwrap();
            let y = tape.conv2d(xi, wi, bi, 1, 1).unwrap();
            let act = tape.silu(y);
            let loss = tape.mean_all(act);
            tape.backward(loss).unwrap();
            let bytes = |vals: &[f64]| {
                let mut out = Vec::new();
                for &v in vals {
                    v.write_le_bytes(&mut out);
                }
                out
            };
            (bytes(tape.data(loss)), bytes(tape.grad(wi)))
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    // ── elementwise and shape ops ───────────────────────────────────────

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = Seed::new(111).rng();
        // Offset inputs away from the |x| kink so central differences hold.
        let x: Vec<f64> =
            (0..12).map(|_| rng.uniform(0.2, 1.0) * if rng.next_f64() < 0.5 { -1.0 } else { 1.0 }).collect();
        let params = vec![(x, vec![12usize])];
        let err = finite_difference_check(&params, 1e-6, |tape, ids| {
            let s = tape.sigmoid(ids[0]);
            let si = tape.silu(s);
            let t = tape.tanh(si);
            let a = tape.abs(t);
            let sc = tape.scale(a, 1.7);
            let ad = tape.add_scalar(sc, 0.3);
            Ok(tape.mean_all(ad))
        })
        .unwrap();
        assert!(err < 1e-4, "elementwise fd error {err}");
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = Seed::new(121).rng();
        let params = vec![
            (rand_vec(2 * 2 * 2 * 2, &mut rng), vec![2usize, 2, 2, 2]),
            (rand_vec(2 * 3 * 2 * 2, &mut rng), vec![2usize, 3, 2, 2]),
        ];
        let err = finite_difference_check(&params, 1e-5, |tape, ids| {
            let cat = tape.concat_channels(ids[0], ids[1])?;
            let up = tape.nearest_upsample(cat, 4, 4)?;
            let tokens = tape.map_to_tokens(up)?;
            let back = tape.tokens_to_map(tokens, 4, 4)?;
            let pooled = tape.global_avg_pool(back)?;
            let r = tape.reshape(pooled, vec![2, 5, 1, 1])?;
            Ok(tape.mean_all(r))
        })
        .unwrap();
        assert!(err < 1e-4, "structural fd error {err}");
    }

    #[test]
    fn clamp01_saturates_and_blocks_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(vec![-0.5, 0.25, 1.5], vec![3]).unwrap();
        let y = tape.clamp01(x);
        assert_eq!(tape.data(y), &[0.0, 0.25, 1.0]);
        let loss = tape.mean_all(y);
        tape.backward(loss).unwrap();
        let g = tape.grad(x);
        assert_eq!(g[0], 0.0);
        assert!((g[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(g[2], 0.0);
    }

    // ── finite_difference_check itself ──────────────────────────────────

    #[test]
    fn fd_check_is_exact_for_linear_functions() {
        let params = vec![(vec![0.3, -0.7, 1.1], vec![3usize])];
        let err = finite_difference_check(&params, 1e-5, |tape, ids| {
            let s = tape.scale(ids[0], 2.5);
            let m = tape.mean_all(s);
            Ok(tape.add_scalar(m, 1.0))
        })
        .unwrap();
        assert!(err < 1e-10, "linear fd error {err}");
    }

    #[test]
    fn fd_check_quadratic() {
        let params = vec![(vec![0.4, -1.2, 0.9], vec![3usize])];
        let err = finite_difference_check(&params, 1e-5, |tape, ids| {
            let sq = tape.mul(ids[0], ids[0])?;
            Ok(tape.mean_all(sq))
        })
        .unwrap();
        assert!(err < 1e-7, "quadratic fd error {err}");
    }

    #[test]
    fn fd_check_rejects_bad_eps() {
        let params = vec![(vec![1.0], vec![1usize])];
        assert!(finite_difference_check(&params, 0.0, |_, ids| Ok(ids[0])).is_err());
    }

    // ── adam ────────────────────────────────────────────────────────────

    #[test]
    fn adam_zero_gradients_leave_params_unchanged() {
        let mut store = ParamStoreF64::new();
        store.register("p", vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut state = adam::AdamState::for_store(&store);
        let grads = vec![vec![0.0; 3]];
        adam::adam_step(&mut store, &grads, &mut state, &adam::AdamHyper::default()).unwrap();
        assert_eq!(store.entry(params::ParamSlot(0)).data, vec![1.0, -2.0, 0.5]);
        assert_eq!(state.step_count, 1);
    }

    type ParamStoreF64 = params::ParamStore<f64>;

    #[test]
    fn adam_single_step_matches_closed_form() {
        let hyper = adam::AdamHyper { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut store = ParamStoreF64::new();
        store.register("p", vec![2], vec![1.0, -1.0]).unwrap();
        let mut state = adam::AdamState::for_store(&store);
        let g = vec![vec![0.3, -0.2]];
        adam::adam_step(&mut store, &g, &mut state, &hyper).unwrap();
        // Fresh state: m_hat = g, v_hat = g², so the step is lr·g/(|g|+eps).
        for (i, (&p0, &gv)) in [1.0, -1.0].iter().zip(g[0].iter()).enumerate() {
            let expect = p0 - hyper.lr * gv / (gv.abs() + hyper.eps);
            let got = store.entry(params::ParamSlot(0)).data[i];
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut rng = Seed::new(5).rng();
            let mut store = ParamStoreF64::new();
            store.register("p", vec![4], rand_vec(4, &mut rng)).unwrap();
            let mut state = adam::AdamState::for_store(&store);
            for _ in 0..10 {
                let g = vec![rand_vec(4, &mut rng)];
                adam::adam_step(&mut store, &g, &mut state, &adam::AdamHyper::default()).unwrap();
            }
            store.entry(params::ParamSlot(0)).data.clone()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn adam_rejects_mismatched_grads() {
        let mut store = ParamStoreF64::new();
        store.register("p", vec![2], vec![0.0; 2]).unwrap();
        let mut state = adam::AdamState::for_store(&store);
        let wrong = vec![vec![0.0; 3]];
        assert!(adam::adam_step(&mut store, &wrong, &mut state, &adam::AdamHyper::default()).is_err());
    }
}

