//! Dense `f64` tensors on a reverse-mode gradient tape.
//!
//! One [`Tape`] lives for one forward/backward pass: leaves go in, ops are
//! recorded in topological order, [`Tape::backward`] walks them once in
//! reverse, then the tape is dropped. Only leading batch-dimension broadcast
//! is supported in [`Tape::matmul`]; elementwise binaries require equal
//! shapes, with [`Tape::add_broadcast`] covering bias-style suffix adds.
//! Values are 64-bit floats throughout.

mod adam;
mod kernels;

pub use adam::Adam;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} values, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("invalid optimizer config: {0}")]
    Config(String),
}

/// Dense n-dimensional tensor, row-major.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub type TensorId = usize;

/// Which bucket a matmul's multiply-accumulates land in. Callers that care
/// about the complexity audit label their hot matmuls; everything else is
/// `Other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacClass {
    Attention,
    Ffn,
    Other,
}

/// Multiply-accumulate tally of every matmul recorded on a tape.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacTally {
    pub attention: u64,
    pub ffn: u64,
    pub other: u64,
}

impl MacTally {
    pub fn total(&self) -> u64 {
        self.attention + self.ffn + self.other
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Hadamard { a: TensorId, b: TensorId },
    Minimum { a: TensorId, b: TensorId },
    AddBroadcast { x: TensorId, t: TensorId },
    MulScalar { x: TensorId, c: f64 },
    AddScalar { x: TensorId },
    Relu { x: TensorId },
    Gelu { x: TensorId },
    Tanh { x: TensorId },
    Exp { x: TensorId },
    Ln { x: TensorId },
    Square { x: TensorId },
    Clamp { x: TensorId, lo: f64, hi: f64 },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: f64 },
    Softmax { x: TensorId, axis: usize },
    SumAll { x: TensorId },
    MeanAll { x: TensorId },
    SumAxis { x: TensorId, axis: usize },
    ConcatLast { a: TensorId, b: TensorId },
    Reshape { x: TensorId },
    Permute { x: TensorId, axes: Vec<usize> },
    ExpandAddPos { z: TensorId, e: TensorId },
}

/// Records one forward pass and replays it backwards.
pub struct Tape {
    tensors: Vec<Tensor>,
    ops: Vec<Op>,
    macs: MacTally,
    mac_class: MacClass,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// GELU, tanh approximation.
pub fn gelu_value(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu_value`].
pub fn gelu_slope(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            tensors: Vec::new(),
            ops: Vec::new(),
            macs: MacTally::default(),
            mac_class: MacClass::Other,
        }
    }

    /// Inserts an existing tensor as a leaf (parameter or input).
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        self.push(t, Op::Leaf)
    }

    /// Inserts a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        let t = Tensor::new(shape, data).expect("constant: shape/data mismatch");
        self.push(t, Op::Leaf)
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        self.push(Tensor::scalar(v), Op::Leaf)
    }

    fn push(&mut self, t: Tensor, op: Op) -> TensorId {
        debug_assert!(t.all_finite(), "non-finite values after {:?}", op);
        let id = self.tensors.len();
        self.tensors.push(t);
        self.ops.push(op);
        id
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.tensors[id].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id].grad.as_deref()
    }

    pub fn value_scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.tensors[id].numel(), 1);
        self.tensors[id].data[0]
    }

    pub fn macs(&self) -> MacTally {
        self.macs
    }

    /// Labels subsequent matmuls for the complexity audit.
    pub fn set_mac_class(&mut self, class: MacClass) {
        self.mac_class = class;
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// Batched matrix product. `a` is `[..batch, m, k]`, `b` is either
    /// `[..batch, k, n]` or plain `[k, n]` (broadcast across `a`'s batches).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (a_shape, b_shape) = (&self.tensors[a].shape, &self.tensors[b].shape);
        assert!(
            a_shape.len() >= 2 && b_shape.len() >= 2,
            "matmul needs >=2-d operands, got {:?} x {:?}",
            a_shape,
            b_shape
        );
        let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (kb, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
        assert_eq!(
            k, kb,
            "matmul inner dimensions disagree: {:?} x {:?}",
            a_shape, b_shape
        );
        let a_batch = &a_shape[..a_shape.len() - 2];
        let b_batch = &b_shape[..b_shape.len() - 2];
        assert!(
            b_batch.is_empty() || a_batch == b_batch,
            "matmul batch dimensions incompatible: {:?} x {:?}",
            a_shape,
            b_shape
        );
        let batch: usize = a_batch.iter().product();
        let mut out_shape = a_batch.to_vec();
        out_shape.push(m);
        out_shape.push(n);

        let mut out = vec![0.0; batch * m * n];
        {
            let a_data = &self.tensors[a].data;
            let b_data = &self.tensors[b].data;
            let b_stride = if b_batch.is_empty() { 0 } else { k * n };
            for i in 0..batch {
                kernels::matmul_nn(
                    &a_data[i * m * k..(i + 1) * m * k],
                    &b_data[i * b_stride..i * b_stride + k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let macs = (batch * m * k * n) as u64;
        match self.mac_class {
            MacClass::Attention => self.macs.attention += macs,
            MacClass::Ffn => self.macs.ffn += macs,
            MacClass::Other => self.macs.other += macs,
        }
        let t = Tensor::new(out_shape, out).expect("matmul output");
        self.push(t, Op::Matmul { a, b })
    }

    fn binary_same_shape(&self, a: TensorId, b: TensorId, what: &str) {
        assert_eq!(
            self.tensors[a].shape, self.tensors[b].shape,
            "{what}: shapes disagree: {:?} vs {:?}",
            self.tensors[a].shape, self.tensors[b].shape
        );
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_same_shape(a, b, "add");
        let data: Vec<f64> = self.tensors[a]
            .data
            .iter()
            .zip(&self.tensors[b].data)
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.tensors[a].shape.clone(), data).unwrap();
        self.push(t, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_same_shape(a, b, "sub");
        let data: Vec<f64> = self.tensors[a]
            .data
            .iter()
            .zip(&self.tensors[b].data)
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.tensors[a].shape.clone(), data).unwrap();
        self.push(t, Op::Sub { a, b })
    }

    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_same_shape(a, b, "hadamard");
        let data: Vec<f64> = self.tensors[a]
            .data
            .iter()
            .zip(&self.tensors[b].data)
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.tensors[a].shape.clone(), data).unwrap();
        self.push(t, Op::Hadamard { a, b })
    }

    /// Elementwise minimum; the gradient routes to whichever side is smaller
    /// (ties go to `a`).
    pub fn minimum(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_same_shape(a, b, "minimum");
        let data: Vec<f64> = self.tensors[a]
            .data
            .iter()
            .zip(&self.tensors[b].data)
            .map(|(x, y)| x.min(*y))
            .collect();
        let t = Tensor::new(self.tensors[a].shape.clone(), data).unwrap();
        self.push(t, Op::Minimum { a, b })
    }

    /// `x + t` where `t`'s shape is a suffix of `x`'s shape (bias adds,
    /// positional tables). The gradient of `t` sums over the leading dims.
    pub fn add_broadcast(&mut self, x: TensorId, t: TensorId) -> TensorId {
        let xs = self.tensors[x].shape.clone();
        let ts = self.tensors[t].shape.clone();
        assert!(
            ts.len() <= xs.len() && xs[xs.len() - ts.len()..] == ts[..],
            "add_broadcast: {:?} is not a suffix of {:?}",
            ts,
            xs
        );
        let tn = self.tensors[t].numel();
        let data: Vec<f64> = self.tensors[x]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + self.tensors[t].data[i % tn])
            .collect();
        let out = Tensor::new(xs, data).unwrap();
        self.push(out, Op::AddBroadcast { x, t })
    }

    pub fn mul_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.tensors[x].data.iter().map(|v| v * c).collect();
        let t = Tensor::new(self.tensors[x].shape.clone(), data).unwrap();
        self.push(t, Op::MulScalar { x, c })
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.tensors[x].data.iter().map(|v| v + c).collect();
        let t = Tensor::new(self.tensors[x].shape.clone(), data).unwrap();
        self.push(t, Op::AddScalar { x })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.tensors[x].data.iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(self.tensors[x].shape.clone(), data).unwrap();
        self.push(t, Op::Relu { x })
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.tensors[x].data.iter().map(|v| gelu_value(*v)).collect();
        let t = Tensor::new(self.tensors[x].shape.clone(), data).unwrap();
        self.push(t, Op::Gelu { x })
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.tensors[x].data.iter().map(|v| v.tanh()).collect();
        let t = Tensor::new(self.tensors[x].shape.clone(), data).unwrap();
        self.push(t, Op::Tanh { x })
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.tensors[x].data.iter().map(|v| v.exp()).collect();
        let t = Tensor::new(self.tensors[x].shape.clone(), data).unwrap();
        self.push(t, Op::Exp { x })
    }

    pub fn ln(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.tensors[x].data.iter().map(|v| v.ln()).collect();
        let t = Tensor::new(self.tensors[x].shape.clone(), data).unwrap();
        self.push(t, Op::Ln { x })
    }

    pub fn square(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.tensors[x].data.iter().map(|v| v * v).collect();
        let t = Tensor::new(self.tensors[x].shape.clone(), data).unwrap();
        self.push(t, Op::Square { x })
    }

    /// Hard clamp; gradient passes only strictly inside the interval.
    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> TensorId {
        let data: Vec<f64> = self.tensors[x].data.iter().map(|v| v.clamp(lo, hi)).collect();
        let t = Tensor::new(self.tensors[x].shape.clone(), data).unwrap();
        self.push(t, Op::Clamp { x, lo, hi })
    }

    /// Layer normalization over the last axis: `gain ⊙ (x−μ)/√(σ²+eps) + bias`.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> TensorId {
        let xs = self.tensors[x].shape.clone();
        let d = *xs.last().expect("layer_norm needs >=1-d input");
        assert!(d > 0, "layer_norm: empty last axis on shape {:?}", xs);
        assert!(eps > 0.0, "layer_norm: eps must be positive");
        assert_eq!(self.tensors[gain].shape, vec![d], "layer_norm gain shape");
        assert_eq!(self.tensors[bias].shape, vec![d], "layer_norm bias shape");
        let rows = self.tensors[x].numel() / d;
        let mut data = vec![0.0; rows * d];
        {
            let xd = &self.tensors[x].data;
            let g = &self.tensors[gain].data;
            let b = &self.tensors[bias].data;
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    data[r * d + j] = g[j] * (row[j] - mean) * inv_std + b[j];
                }
            }
        }
        let t = Tensor::new(xs, data).unwrap();
        self.push(t, Op::LayerNorm { x, gain, bias, eps })
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> TensorId {
        let xs = self.tensors[x].shape.clone();
        assert!(axis < xs.len(), "softmax axis {} out of range for {:?}", axis, xs);
        let len = xs[axis];
        assert!(len >= 1, "softmax: empty axis");
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut data = vec![0.0; self.tensors[x].numel()];
        {
            let xd = &self.tensors[x].data;
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..len {
                        max = max.max(xd[base + j * inner]);
                    }
                    let mut sum = 0.0;
                    for j in 0..len {
                        let e = (xd[base + j * inner] - max).exp();
                        data[base + j * inner] = e;
                        sum += e;
                    }
                    for j in 0..len {
                        data[base + j * inner] /= sum;
                    }
                }
            }
        }
        let t = Tensor::new(xs, data).unwrap();
        self.push(t, Op::Softmax { x, axis })
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.tensors[x].data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.tensors[x].numel() as f64;
        let s: f64 = self.tensors[x].data.iter().sum();
        self.push(Tensor::scalar(s / n), Op::MeanAll { x })
    }

    /// Sum along `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> TensorId {
        let xs = self.tensors[x].shape.clone();
        assert!(axis < xs.len(), "sum_axis {} out of range for {:?}", axis, xs);
        let len = xs[axis];
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = xs[..axis].to_vec();
        out_shape.extend_from_slice(&xs[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut data = vec![0.0; outer * inner];
        {
            let xd = &self.tensors[x].data;
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        data[o * inner + i] += xd[o * len * inner + j * inner + i];
                    }
                }
            }
        }
        let t = Tensor::new(out_shape, data).unwrap();
        self.push(t, Op::SumAxis { x, axis })
    }

    /// Concatenation along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let ash = self.tensors[a].shape.clone();
        let bsh = self.tensors[b].shape.clone();
        assert_eq!(ash.len(), bsh.len(), "concat_last rank mismatch: {:?} vs {:?}", ash, bsh);
        assert_eq!(
            ash[..ash.len() - 1],
            bsh[..bsh.len() - 1],
            "concat_last leading dims disagree: {:?} vs {:?}",
            ash,
            bsh
        );
        let da = ash[ash.len() - 1];
        let db = bsh[bsh.len() - 1];
        let rows: usize = ash[..ash.len() - 1].iter().product();
        let mut out_shape = ash.clone();
        *out_shape.last_mut().unwrap() = da + db;
        let mut data = vec![0.0; rows * (da + db)];
        {
            let ad = &self.tensors[a].data;
            let bd = &self.tensors[b].data;
            for r in 0..rows {
                data[r * (da + db)..r * (da + db) + da].copy_from_slice(&ad[r * da..(r + 1) * da]);
                data[r * (da + db) + da..(r + 1) * (da + db)]
                    .copy_from_slice(&bd[r * db..(r + 1) * db]);
            }
        }
        let t = Tensor::new(out_shape, data).unwrap();
        self.push(t, Op::ConcatLast { a, b })
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> TensorId {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            self.tensors[x].numel(),
            "reshape {:?} -> {:?} changes element count",
            self.tensors[x].shape,
            shape
        );
        let t = Tensor::new(shape, self.tensors[x].data.clone()).unwrap();
        self.push(t, Op::Reshape { x })
    }

    /// Axis permutation; `axes` is a permutation of `0..rank`.
    pub fn permute(&mut self, x: TensorId, axes: &[usize]) -> TensorId {
        let xs = self.tensors[x].shape.clone();
        assert_eq!(axes.len(), xs.len(), "permute axes rank mismatch");
        let out_shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
        let data = permute_data(&self.tensors[x].data, &xs, axes);
        let t = Tensor::new(out_shape, data).unwrap();
        self.push(
            t,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        )
    }

    /// Tiles `z` `[B, d]` into `[B, H, d]` tokens, adding row `i` of the
    /// positional table `e` `[H, d]` to token `i`.
    pub fn expand_add_pos(&mut self, z: TensorId, e: TensorId) -> TensorId {
        let zs = self.tensors[z].shape.clone();
        let es = self.tensors[e].shape.clone();
        assert_eq!(zs.len(), 2, "expand_add_pos: z must be [B, d], got {:?}", zs);
        assert_eq!(es.len(), 2, "expand_add_pos: e must be [H, d], got {:?}", es);
        assert_eq!(zs[1], es[1], "expand_add_pos feature dims disagree: {:?} vs {:?}", zs, es);
        let (b, d) = (zs[0], zs[1]);
        let h = es[0];
        let mut data = vec![0.0; b * h * d];
        {
            let zd = &self.tensors[z].data;
            let ed = &self.tensors[e].data;
            for bi in 0..b {
                for hi in 0..h {
                    for j in 0..d {
                        data[(bi * h + hi) * d + j] = zd[bi * d + j] + ed[hi * d + j];
                    }
                }
            }
        }
        let t = Tensor::new(vec![b, h, d], data).unwrap();
        self.push(t, Op::ExpandAddPos { z, e })
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Every tensor reachable from the loss
    /// gets its gradient populated; unreachable tensors are left untouched.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(
            self.tensors[loss].numel(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.tensors[loss].shape
        );
        assert!(!self.tensors.is_empty(), "backward on an empty tape");
        self.tensors[loss].grad = Some(vec![1.0]);

        for id in (0..self.ops.len()).rev() {
            let grad = match &self.tensors[id].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.ops[id].clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => self.backward_matmul(id, a, b, &grad),
                Op::Add { a, b } => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::Sub { a, b } => {
                    self.accumulate(a, &grad);
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    self.accumulate(b, &neg);
                }
                Op::Hadamard { a, b } => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.tensors[b].data)
                        .map(|(g, v)| g * v)
                        .collect();
                    let db: Vec<f64> = grad
                        .iter()
                        .zip(&self.tensors[a].data)
                        .map(|(g, v)| g * v)
                        .collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Minimum { a, b } => {
                    let (mut da, mut db) = (vec![0.0; grad.len()], vec![0.0; grad.len()]);
                    for i in 0..grad.len() {
                        if self.tensors[a].data[i] <= self.tensors[b].data[i] {
                            da[i] = grad[i];
                        } else {
                            db[i] = grad[i];
                        }
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::AddBroadcast { x, t } => {
                    self.accumulate(x, &grad);
                    let tn = self.tensors[t].numel();
                    let mut dt = vec![0.0; tn];
                    for (i, g) in grad.iter().enumerate() {
                        dt[i % tn] += g;
                    }
                    self.accumulate(t, &dt);
                }
                Op::MulScalar { x, c } => {
                    let dx: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    self.accumulate(x, &dx);
                }
                Op::AddScalar { x } => self.accumulate(x, &grad),
                Op::Relu { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(&self.tensors[x].data)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Gelu { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(&self.tensors[x].data)
                        .map(|(g, v)| g * gelu_slope(*v))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Tanh { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(&self.tensors[id].data)
                        .map(|(g, t)| g * (1.0 - t * t))
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Exp { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(&self.tensors[id].data)
                        .map(|(g, e)| g * e)
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Ln { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(&self.tensors[x].data)
                        .map(|(g, v)| g / v)
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Square { x } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(&self.tensors[x].data)
                        .map(|(g, v)| g * 2.0 * v)
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Clamp { x, lo, hi } => {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(&self.tensors[x].data)
                        .map(|(g, v)| if *v > lo && *v < hi { *g } else { 0.0 })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    self.backward_layer_norm(x, gain, bias, eps, &grad);
                }
                Op::Softmax { x, axis } => {
                    let xs = self.tensors[id].shape.clone();
                    let len = xs[axis];
                    let outer: usize = xs[..axis].iter().product();
                    let inner: usize = xs[axis + 1..].iter().product();
                    let s = &self.tensors[id].data;
                    let mut dx = vec![0.0; grad.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                let idx = base + j * inner;
                                dot += grad[idx] * s[idx];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                dx[idx] = s[idx] * (grad[idx] - dot);
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::SumAll { x } => {
                    let dx = vec![grad[0]; self.tensors[x].numel()];
                    self.accumulate(x, &dx);
                }
                Op::MeanAll { x } => {
                    let n = self.tensors[x].numel();
                    let dx = vec![grad[0] / n as f64; n];
                    self.accumulate(x, &dx);
                }
                Op::SumAxis { x, axis } => {
                    let xs = self.tensors[x].shape.clone();
                    let len = xs[axis];
                    let outer: usize = xs[..axis].iter().product();
                    let inner: usize = xs[axis + 1..].iter().product();
                    let mut dx = vec![0.0; self.tensors[x].numel()];
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                dx[o * len * inner + j * inner + i] = grad[o * inner + i];
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::ConcatLast { a, b } => {
                    let da_len = *self.tensors[a].shape.last().unwrap();
                    let db_len = *self.tensors[b].shape.last().unwrap();
                    let rows = self.tensors[a].numel() / da_len;
                    let mut da = vec![0.0; rows * da_len];
                    let mut db = vec![0.0; rows * db_len];
                    let w = da_len + db_len;
                    for r in 0..rows {
                        da[r * da_len..(r + 1) * da_len]
                            .copy_from_slice(&grad[r * w..r * w + da_len]);
                        db[r * db_len..(r + 1) * db_len]
                            .copy_from_slice(&grad[r * w + da_len..(r + 1) * w]);
                    }
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Reshape { x } => self.accumulate(x, &grad),
                Op::Permute { x, axes } => {
                    let mut inverse = vec![0usize; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let dx = permute_data(&grad, &self.tensors[id].shape, &inverse);
                    self.accumulate(x, &dx);
                }
                Op::ExpandAddPos { z, e } => {
                    let (b, d) = (self.tensors[z].shape[0], self.tensors[z].shape[1]);
                    let h = self.tensors[e].shape[0];
                    let mut dz = vec![0.0; b * d];
                    let mut de = vec![0.0; h * d];
                    for bi in 0..b {
                        for hi in 0..h {
                            for j in 0..d {
                                let g = grad[(bi * h + hi) * d + j];
                                dz[bi * d + j] += g;
                                de[hi * d + j] += g;
                            }
                        }
                    }
                    self.accumulate(z, &dz);
                    self.accumulate(e, &de);
                }
            }
        }
    }

    fn accumulate(&mut self, id: TensorId, contribution: &[f64]) {
        let t = &mut self.tensors[id];
        debug_assert_eq!(t.numel(), contribution.len());
        match &mut t.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => t.grad = Some(contribution.to_vec()),
        }
    }

    fn backward_matmul(&mut self, out: TensorId, a: TensorId, b: TensorId, grad: &[f64]) {
        let a_shape = self.tensors[a].shape.clone();
        let b_shape = self.tensors[b].shape.clone();
        let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let n = b_shape[b_shape.len() - 1];
        let batch: usize = a_shape[..a_shape.len() - 2].iter().product();
        let b_batched = b_shape.len() > 2;
        let b_stride = if b_batched { k * n } else { 0 };
        let _ = out;

        let mut da = vec![0.0; batch * m * k];
        let mut db = vec![0.0; self.tensors[b].numel()];
        {
            let a_data = &self.tensors[a].data;
            let b_data = &self.tensors[b].data;
            for i in 0..batch {
                let g = &grad[i * m * n..(i + 1) * m * n];
                // dA = dC·Bᵀ
                kernels::matmul_nt_acc(
                    g,
                    &b_data[i * b_stride..i * b_stride + k * n],
                    &mut da[i * m * k..(i + 1) * m * k],
                    m,
                    n,
                    k,
                );
                // dB = Aᵀ·dC, summed over broadcast batches
                kernels::matmul_tn_acc(
                    &a_data[i * m * k..(i + 1) * m * k],
                    g,
                    &mut db[i * b_stride..i * b_stride + k * n],
                    m,
                    k,
                    n,
                );
            }
        }
        self.accumulate(a, &da);
        self.accumulate(b, &db);
    }

    fn backward_layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
        grad: &[f64],
    ) {
        let d = *self.tensors[x].shape.last().unwrap();
        let rows = self.tensors[x].numel() / d;
        let mut dx = vec![0.0; rows * d];
        let mut dgain = vec![0.0; d];
        let mut dbias = vec![0.0; d];
        {
            let xd = &self.tensors[x].data;
            let g = &self.tensors[gain].data;
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let grow = &grad[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv_std = 1.0 / (var + eps).sqrt();

                let mut dxhat = vec![0.0; d];
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for j in 0..d {
                    let xhat = (row[j] - mean) * inv_std;
                    dgain[j] += grow[j] * xhat;
                    dbias[j] += grow[j];
                    dxhat[j] = grow[j] * g[j];
                    sum_dxhat += dxhat[j];
                    sum_dxhat_xhat += dxhat[j] * xhat;
                }
                let df = d as f64;
                for j in 0..d {
                    let xhat = (row[j] - mean) * inv_std;
                    dx[r * d + j] = inv_std / df * (df * dxhat[j] - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
        self.accumulate(x, &dx);
        self.accumulate(gain, &dgain);
        self.accumulate(bias, &dbias);
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = vec![0.0; data.len()];
    let mut coords = vec![0usize; rank];
    for (flat, slot) in out.iter_mut().enumerate() {
        // decompose flat output index into output coordinates
        let mut rem = flat;
        for i in (0..rank).rev() {
            coords[i] = rem % out_shape[i];
            rem /= out_shape[i];
        }
        let mut src = 0;
        for i in 0..rank {
            src += coords[i] * in_strides[axes[i]];
        }
        *slot = data[src];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = tape.constant(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = tape.matmul(i, b);
        assert_eq!(tape.data(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1, 2], vec![1.0, 2.0]);
        let b = tape.constant(vec![2, 1], vec![3.0, 4.0]);
        let c = tape.matmul(a, b);
        assert_eq!(tape.data(c), &[11.0]);
    }

    #[test]
    fn matmul_batched_broadcast() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let c = tape.matmul(a, b);
        assert_eq!(tape.shape(c), &[2, 1, 2]);
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    #[should_panic(expected = "inner dimensions disagree")]
    fn matmul_shape_mismatch_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]);
        let b = tape.constant(vec![2, 2], vec![0.0; 4]);
        tape.matmul(a, b);
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 3], vec![1.0, 1.0, 1.0]);
        let g = tape.constant(vec![3], vec![1.0, 1.0, 1.0]);
        let b = tape.constant(vec![3], vec![0.5, -0.5, 0.0]);
        let y = tape.layer_norm(x, g, b, 1e-5);
        for (got, want) in tape.data(y).iter().zip(&[0.5, -0.5, 0.0]) {
            assert!(close(*got, *want, 1e-12));
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_var_passthrough() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![-1.0, 1.0]);
        let g = tape.constant(vec![2], vec![1.0, 1.0]);
        let b = tape.constant(vec![2], vec![0.0, 0.0]);
        let y = tape.layer_norm(x, g, b, 1e-12);
        assert!(close(tape.data(y)[0], -1.0, 1e-5));
        assert!(close(tape.data(y)[1], 1.0, 1e-5));
    }

    #[test]
    fn layer_norm_rows_normalized() {
        use rand::Rng;
        let mut rng = crate::rng::stream(7, "ln-test");
        let d = 8;
        let rows = 4;
        let data: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(vec![rows, d], data);
        let g = tape.constant(vec![d], vec![1.0; d]);
        let b = tape.constant(vec![d], vec![0.0; d]);
        let y = tape.layer_norm(x, g, b, 1e-10);
        for r in 0..rows {
            let row = &tape.data(y)[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-9, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "row var {var}");
        }
    }

    #[test]
    #[should_panic(expected = "empty last axis")]
    fn layer_norm_empty_axis_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 0], vec![]);
        let g = tape.constant(vec![0], vec![]);
        let b = tape.constant(vec![0], vec![]);
        tape.layer_norm(x, g, b, 1e-5);
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3], vec![0.0, 0.0, 0.0]);
        let s = tape.softmax(x, 0);
        for v in tape.data(s) {
            assert!(close(*v, 1.0 / 3.0, 1e-12));
        }
    }

    #[test]
    fn softmax_large_magnitude_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![1000.0, 0.0]);
        let s = tape.softmax(x, 0);
        let out = tape.data(s);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(close(out[0], 1.0, 1e-12));
        assert!(close(out[1], 0.0, 1e-12));
        assert!(close(out[0] + out[1], 1.0, 1e-9));
    }

    #[test]
    fn softmax_sums_to_one_along_axis() {
        use rand::Rng;
        let mut rng = crate::rng::stream(3, "softmax-test");
        let (a, b, c) = (2, 5, 3);
        let data: Vec<f64> = (0..a * b * c).map(|_| rng.gen_range(-1e3..1e3)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(vec![a, b, c], data);
        let s = tape.softmax(x, 1);
        let out = tape.data(s);
        for i in 0..a {
            for k in 0..c {
                let sum: f64 = (0..b).map(|j| out[(i * b + j) * c + k]).sum();
                assert!((sum - 1.0).abs() < 1e-9, "axis sum {sum}");
            }
        }
    }

    #[test]
    fn elementwise_trivials() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![-1.0, 2.0]);
        let r = tape.relu(x);
        assert_eq!(tape.data(r), &[0.0, 2.0]);
        let m = tape.mean_all(x);
        assert_eq!(tape.value_scalar(m), 0.5);
        let y = tape.constant(vec![2], vec![2.0, 4.0]);
        let my = tape.mean_all(y);
        assert_eq!(tape.value_scalar(my), 3.0);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
        let loss = tape.sum_all(x);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_chain() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let sq = tape.hadamard(x, x);
        let loss = tape.sum_all(sq);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_leaves_unreachable_untouched() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        let orphan = tape.leaf(Tensor::new(vec![2], vec![5.0, 6.0]).unwrap().with_grad());
        let loss = tape.sum_all(x);
        tape.backward(loss);
        assert!(tape.grad(x).is_some());
        assert!(tape.grad(orphan).is_none());
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2], vec![1.0, 2.0]);
        tape.backward(x);
    }

    #[test]
    fn backward_bitwise_repeatable() {
        use rand::Rng;
        let run = || {
            let mut rng = crate::rng::stream(11, "repeat");
            let mut tape = Tape::new();
            let xd: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let wd: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let x = tape.leaf(Tensor::new(vec![3, 4], xd).unwrap().with_grad());
            let w = tape.leaf(Tensor::new(vec![4, 3], wd).unwrap().with_grad());
            let y = tape.matmul(x, w);
            let g = tape.gelu(y);
            let s = tape.softmax(g, 1);
            let loss = tape.mean_all(s);
            tape.backward(loss);
            (
                tape.grad(x).unwrap().to_vec(),
                tape.grad(w).unwrap().to_vec(),
            )
        };
        let (gx1, gw1) = run();
        let (gx2, gw2) = run();
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    #[test]
    fn permute_roundtrip() {
        use rand::Rng;
        let mut rng = crate::rng::stream(5, "permute");
        let data: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 3, 4], data.clone());
        let p = tape.permute(x, &[2, 0, 1]);
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        let back = tape.permute(p, &[1, 2, 0]);
        assert_eq!(tape.data(back), &data[..]);
    }

    #[test]
    fn concat_and_splitback() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad());
        let b = tape.leaf(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap().with_grad());
        let c = tape.concat_last(a, b);
        assert_eq!(tape.data(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let loss = tape.sum_all(c);
        tape.backward(loss);
        assert_eq!(tape.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0; 2]);
    }

    #[test]
    fn expand_add_pos_matches_manual() {
        let mut tape = Tape::new();
        let z = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let e = tape.constant(vec![3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let out = tape.expand_add_pos(z, e);
        assert_eq!(tape.shape(out), &[2, 3, 2]);
        let d = tape.data(out);
        assert!(close(d[0], 1.1, 1e-12));
        assert!(close(d[1], 2.2, 1e-12));
        assert!(close(d[2], 1.3, 1e-12));
        assert!(close(d[6], 3.1, 1e-12));
    }

    #[test]
    fn mac_tally_counts_matmuls() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]);
        let b = tape.constant(vec![3, 4], vec![0.0; 12]);
        tape.set_mac_class(MacClass::Attention);
        tape.matmul(a, b);
        assert_eq!(tape.macs().attention, 24);
        assert_eq!(tape.macs().ffn, 0);
    }
}
