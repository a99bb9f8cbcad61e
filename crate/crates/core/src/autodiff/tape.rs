use rand::Rng;

use super::kernels::{axpy, dot, matmul, matmul_at, matmul_bt, sigmoid, softmax_row, softplus};
use super::params::{ParamId, ParamStore};
use super::{Real, GELU_CUBIC, GELU_SQRT_2_OVER_PI, LAYER_NORM_EPS};
use crate::error::{ensure_dims, Error, Result};

/// Handle of a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// User-defined differentiable operation whose forward value is computed by the caller.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns `dL/d input` for every input in order, given `dL/d output`.
    /// `None` means the op does not propagate into that input.
    fn backward(&self, inputs: &[&[T]], output: &[T], grad_out: &[T]) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    ConcatCols(Var, Var),
    GatedMix {
        gate: Var,
        x: Var,
        y: Var,
    },
    Sequence {
        cls: Var,
        z: Var,
        weight: Var,
        bias: Var,
        embed: Var,
    },
    TakeRows {
        x: Var,
        stride: usize,
        offset: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<T>,
        probs: Vec<T>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Real> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, b } => {
                let mut p = vec![*x, *w];
                p.extend(b.iter().copied());
                p
            }
            Op::Add(a, b) | Op::Mul(a, b) | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Sum(x) | Op::Gelu(x) | Op::Softmax(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Dropout { x, .. } => vec![*x],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::GatedMix { gate, x, y } => vec![*gate, *x, *y],
            Op::Sequence {
                cls,
                z,
                weight,
                bias,
                embed,
            } => vec![*cls, *z, *weight, *bias, *embed],
            Op::TakeRows { x, .. } => vec![*x],
            Op::BceWithLogits { logits, .. } | Op::SoftmaxCrossEntropy { logits, .. } => {
                vec![*logits]
            }
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

/// One recorded tensor: its value, its gradient and the operation that produced it.
pub struct TensorNode<T: Real> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

impl<T: Real> TensorNode<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn value(&self) -> &[T] {
        &self.value
    }

    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn parents(&self) -> Vec<Var> {
        self.op.parents()
    }
}

/// Records one forward pass and differentiates it in reverse.
pub struct Tape<T: Real> {
    nodes: Vec<TensorNode<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => {
            let c = *shape.last().unwrap();
            (shape.iter().product::<usize>() / c, c)
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &TensorNode<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &[T] {
        &self.nodes[v.0].grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        self.nodes.push(TensorNode {
            shape,
            value,
            grad,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn leaf(&mut self, shape: &[usize], value: Vec<T>, requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        ensure_dims!(
            numel == value.len() && numel > 0,
            "leaf of shape {shape:?} given {} values",
            value.len()
        );
        Ok(self.push(shape.to_vec(), value, Op::Leaf, requires_grad))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], value: Vec<T>) -> Result<Var> {
        self.leaf(shape, value, false)
    }

    /// Input whose gradient is tracked, e.g. for gradient checks.
    pub fn variable(&mut self, shape: &[usize], value: Vec<T>) -> Result<Var> {
        self.leaf(shape, value, true)
    }

    /// Copies a trainable parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(
            store.shape(id).to_vec(),
            store.value(id).to_vec(),
            Op::Param(id),
            true,
        )
    }

    /// Adds every parameter gradient on this tape into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for node in &self.nodes {
            if let Op::Param(id) = node.op {
                for (g, &d) in store.grad_mut(id).iter_mut().zip(&node.grad) {
                    *g = *g + d;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Matrix product `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(self.shape(a));
        let (k2, n) = rows_cols(self.shape(b));
        ensure_dims!(
            self.shape(a).len() == 2 && self.shape(b).len() == 2 && k == k2,
            "matmul of {:?} and {:?}",
            self.shape(a),
            self.shape(b)
        );
        let value = matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], value, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Affine map `x[n x in] * w[out x in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fan_in) = rows_cols(self.shape(x));
        let (fan_out, w_in) = rows_cols(self.shape(w));
        ensure_dims!(
            self.shape(w).len() == 2 && fan_in == w_in,
            "linear input {:?} against weight {:?}",
            self.shape(x),
            self.shape(w)
        );
        let mut value = matmul_bt(self.value(x), self.value(w), n, fan_in, fan_out);
        if let Some(b) = b {
            ensure_dims!(
                self.value(b).len() == fan_out,
                "bias {:?} for {fan_out} outputs",
                self.shape(b)
            );
            let bias = self.value(b);
            for row in value.chunks_mut(fan_out) {
                for (v, &bb) in row.iter_mut().zip(bias) {
                    *v = *v + bb;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.any_grad(&parents);
        Ok(self.push(vec![n, fan_out], value, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_dims!(
            self.shape(a) == self.shape(b),
            "add of {:?} and {:?}",
            self.shape(a),
            self.shape(b)
        );
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_dims!(
            self.shape(a) == self.shape(b),
            "mul of {:?} and {:?}",
            self.shape(a),
            self.shape(b)
        );
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).iter().map(|&v| v * factor).collect();
        let rg = self.any_grad(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Scale(x, factor), rg)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(vec![1], vec![total], Op::Sum(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::lit(GELU_SQRT_2_OVER_PI);
        let a = T::lit(GELU_CUBIC);
        let half = T::lit(0.5);
        let value = self
            .value(x)
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let rg = self.any_grad(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Gelu(x), rg)
    }

    /// Per-row normalization to zero mean and unit variance followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = rows_cols(self.shape(x));
        ensure_dims!(
            self.value(gain).len() == d && self.value(bias).len() == d,
            "layer norm over {d} features given gain {:?} and bias {:?}",
            self.shape(gain),
            self.shape(bias)
        );
        let eps = T::lit(LAYER_NORM_EPS);
        let dt = T::from_usize(d).unwrap();
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut value = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                value[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            self.shape(x).to_vec(),
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Inverted dropout. In evaluation mode, or with `p == 0`, this returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let value = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Dropout { x, mask }, rg))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, c) = rows_cols(self.shape(x));
        let mut value = self.value(x).to_vec();
        value.chunks_mut(c).for_each(softmax_row);
        let rg = self.any_grad(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Softmax(x), rg)
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k` and `v` hold `batch * seq` rows of width `D`; each consecutive
    /// block of `seq` rows is one sequence. Head `h` uses columns
    /// `h*D/heads .. (h+1)*D/heads` and scores are scaled by `1/sqrt(D/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Result<Var> {
        let (rows, d) = rows_cols(self.shape(q));
        ensure_dims!(
            self.shape(k) == self.shape(q) && self.shape(v) == self.shape(q),
            "attention inputs {:?} {:?} {:?}",
            self.shape(q),
            self.shape(k),
            self.shape(v)
        );
        ensure_dims!(
            seq > 0 && rows % seq == 0,
            "{rows} rows do not split into sequences of {seq}"
        );
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let batch = rows / seq;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let p_block = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * d + h * dh..][..dh];
                    let row = &mut p_block[i * seq..(i + 1) * seq];
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &kv[(b * seq + j) * d + h * dh..][..dh];
                        *r = dot(qi, kj) * scale;
                    }
                    softmax_row(row);
                    let oi = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for (j, &pij) in row.iter().enumerate() {
                        axpy(pij, &vv[(b * seq + j) * d + h * dh..][..dh], oi);
                    }
                }
            }
        }
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            vec![rows, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention weights cached by an [`Tape::attention`] node, laid out as
    /// `[batch][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Column-wise concatenation `[a | b]` of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca) = rows_cols(self.shape(a));
        let (nb, cb) = rows_cols(self.shape(b));
        ensure_dims!(n == nb, "concat of {n} rows with {nb} rows");
        let mut value = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            value.extend_from_slice(&self.value(a)[i * ca..(i + 1) * ca]);
            value.extend_from_slice(&self.value(b)[i * cb..(i + 1) * cb]);
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![n, ca + cb], value, Op::ConcatCols(a, b), rg))
    }

    /// `sigmoid(gate) * x + (1 - sigmoid(gate)) * y` for a scalar `gate`.
    pub fn gated_mix(&mut self, gate: Var, x: Var, y: Var) -> Result<Var> {
        ensure_dims!(
            self.value(gate).len() == 1,
            "gate must be a scalar, got {:?}",
            self.shape(gate)
        );
        ensure_dims!(
            self.shape(x) == self.shape(y),
            "gated mix of {:?} and {:?}",
            self.shape(x),
            self.shape(y)
        );
        let alpha = sigmoid(self.value(gate)[0]);
        let value = self
            .value(x)
            .iter()
            .zip(self.value(y))
            .map(|(&a, &b)| alpha * a + (T::one() - alpha) * b)
            .collect();
        let rg = self.any_grad(&[gate, x, y]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::GatedMix { gate, x, y }, rg))
    }

    /// Builds packed token sequences `[cls_b; z_b1 * w + bias + e_1; ...]` for each row `b`.
    ///
    /// `cls` is `[B x D]`, `z` is `[B x M]`, `weight` and `bias` hold `D` values and
    /// `embed` is `[M x D]`. The result has `B * (M + 1)` rows.
    pub fn token_sequence(
        &mut self,
        cls: Var,
        z: Var,
        weight: Var,
        bias: Var,
        embed: Var,
    ) -> Result<Var> {
        let (batch, d) = rows_cols(self.shape(cls));
        let (zb, m) = rows_cols(self.shape(z));
        ensure_dims!(zb == batch, "{batch} class tokens but {zb} readout rows");
        ensure_dims!(
            self.value(weight).len() == d && self.value(bias).len() == d,
            "token projection must have width {d}"
        );
        ensure_dims!(
            self.value(embed).len() == m * d,
            "identity embeddings {:?} for {m} tokens of width {d}",
            self.shape(embed)
        );
        let seq = m + 1;
        let mut value = vec![T::zero(); batch * seq * d];
        let (cv, zv, wv, bv, ev) = (
            self.value(cls),
            self.value(z),
            self.value(weight),
            self.value(bias),
            self.value(embed),
        );
        for b in 0..batch {
            value[b * seq * d..][..d].copy_from_slice(&cv[b * d..(b + 1) * d]);
            for t in 0..m {
                let zt = zv[b * m + t];
                let row = &mut value[(b * seq + 1 + t) * d..][..d];
                for j in 0..d {
                    row[j] = zt * wv[j] + bv[j] + ev[t * d + j];
                }
            }
        }
        let rg = self.any_grad(&[cls, z, weight, bias, embed]);
        Ok(self.push(
            vec![batch * seq, d],
            value,
            Op::Sequence {
                cls,
                z,
                weight,
                bias,
                embed,
            },
            rg,
        ))
    }

    /// Selects rows `offset, offset + stride, ...`.
    pub fn take_rows(&mut self, x: Var, stride: usize, offset: usize) -> Result<Var> {
        let (n, d) = rows_cols(self.shape(x));
        ensure_dims!(
            stride > 0 && offset < stride && n % stride == 0,
            "cannot take every {stride}th row at offset {offset} of {n} rows"
        );
        let out_rows = n / stride;
        let mut value = Vec::with_capacity(out_rows * d);
        for r in 0..out_rows {
            let src = r * stride + offset;
            value.extend_from_slice(&self.value(x)[src * d..(src + 1) * d]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            vec![out_rows, d],
            value,
            Op::TakeRows { x, stride, offset },
            rg,
        ))
    }

    /// Mean sigmoid cross-entropy of single-logit predictions against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        ensure_dims!(
            self.value(logits).len() == targets.len() && !targets.is_empty(),
            "{} logits for {} binary targets",
            self.value(logits).len(),
            targets.len()
        );
        let n = T::from_usize(targets.len()).unwrap();
        let loss = self
            .value(logits)
            .iter()
            .zip(targets)
            .map(|(&l, &y)| softplus(l) - l * y)
            .sum::<T>()
            / n;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Mean cross-entropy of softmax predictions against target distributions
    /// (one row of `C` probabilities per sample).
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let (n, c) = rows_cols(self.shape(logits));
        ensure_dims!(
            targets.len() == n * c,
            "target distribution of {} values for logits {:?}",
            targets.len(),
            self.shape(logits)
        );
        let mut probs = self.value(logits).to_vec();
        let mut total = T::zero();
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let lrow = &self.nodes[logits.0].value[i * c..(i + 1) * c];
            let max = lrow.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + lrow.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
            for (j, &l) in lrow.iter().enumerate() {
                total = total - targets[i * c + j] * (l - lse);
            }
            softmax_row(row);
        }
        let loss = total / T::from_usize(n).unwrap();
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Records a caller-evaluated operation with a custom backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: &[usize],
        value: Vec<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        ensure_dims!(
            shape.iter().product::<usize>() == value.len(),
            "custom op {} produced {} values for shape {shape:?}",
            op.name(),
            value.len()
        );
        let rg = self.any_grad(inputs);
        Ok(self.push(
            shape.to_vec(),
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        ))
    }

    /// Seeds `d loss / d loss = 1` and propagates gradients to every reachable node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.nodes[loss.0].grad[0] = self.nodes[loss.0].grad[0] + T::one();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.iter().all(|g| g.is_zero()) {
                continue;
            }
            for (parent, contribution) in self.local_grads(i) {
                let node = &mut self.nodes[parent.0];
                if node.requires_grad {
                    for (g, c) in node.grad.iter_mut().zip(contribution) {
                        *g = *g + c;
                    }
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` with respect to each of its parents.
    fn local_grads(&self, i: usize) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let g = &node.grad;
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, m, k, n } => {
                if wants(*a) {
                    out.push((*a, matmul_bt(g, val(*b), *m, *n, *k)));
                }
                if wants(*b) {
                    out.push((*b, matmul_at(val(*a), g, *m, *k, *n)));
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fan_in) = rows_cols(&self.nodes[x.0].shape);
                let fan_out = node.shape[1];
                if wants(*x) {
                    out.push((*x, matmul(g, val(*w), n, fan_out, fan_in)));
                }
                if wants(*w) {
                    out.push((*w, matmul_at(g, val(*x), n, fan_out, fan_in)));
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let mut db = vec![T::zero(); fan_out];
                        for row in g.chunks(fan_out) {
                            axpy(T::one(), row, &mut db);
                        }
                        out.push((*b, db));
                    }
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                out.push((*a, g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect()));
                out.push((*b, g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect()));
            }
            Op::Scale(x, f) => out.push((*x, g.iter().map(|&gi| gi * *f).collect())),
            Op::Sum(x) => out.push((*x, vec![g[0]; val(*x).len()])),
            Op::Gelu(x) => {
                let c = T::lit(GELU_SQRT_2_OVER_PI);
                let a = T::lit(GELU_CUBIC);
                let half = T::lit(0.5);
                let three_a = T::lit(3.0 * GELU_CUBIC);
                let dx = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let du = c * (T::one() + three_a * v * v);
                        gi * (half * (T::one() + t) + half * v * (T::one() - t * t) * du)
                    })
                    .collect();
                out.push((*x, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let n = g.len() / d;
                let gv = val(*gain);
                let dt = T::from_usize(d).unwrap();
                if wants(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    for r in 0..n {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dx[r * d + j] = rstd[r] / dt * (dt * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    out.push((*x, dx));
                }
                if wants(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + gr[j] * hr[j];
                        }
                    }
                    out.push((*gain, dg));
                }
                if wants(*bias) {
                    let mut db = vec![T::zero(); d];
                    for gr in g.chunks(d) {
                        axpy(T::one(), gr, &mut db);
                    }
                    out.push((*bias, db));
                }
            }
            Op::Dropout { x, mask } => {
                out.push((*x, g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect()));
            }
            Op::Softmax(x) => {
                let c = *node.shape.last().unwrap();
                let mut dx = vec![T::zero(); g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c)) {
                    let s = dot(gr, yr);
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                out.push((*x, dx));
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            } => {
                let (seq, heads) = (*seq, *heads);
                let d = node.shape[1];
                let dh = d / heads;
                let batch = node.shape[0] / seq;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                let mut dp = vec![T::zero(); seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let p_block = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                        let at = |r: usize| (b * seq + r) * d + h * dh;
                        for i in 0..seq {
                            let gi = &g[at(i)..][..dh];
                            let prow = &p_block[i * seq..(i + 1) * seq];
                            for j in 0..seq {
                                axpy(prow[j], gi, &mut dv[at(j)..][..dh]);
                                dp[j] = dot(gi, &vv[at(j)..][..dh]);
                            }
                            let s = dot(&dp, prow);
                            for j in 0..seq {
                                let ds = prow[j] * (dp[j] - s) * scale;
                                if ds != T::zero() {
                                    axpy(ds, &kv[at(j)..][..dh], &mut dq[at(i)..][..dh]);
                                    axpy(ds, &qv[at(i)..][..dh], &mut dk[at(j)..][..dh]);
                                }
                            }
                        }
                    }
                }
                out.push((*q, dq));
                out.push((*k, dk));
                out.push((*v, dv));
            }
            Op::ConcatCols(a, b) => {
                let ca = rows_cols(&self.nodes[a.0].shape).1;
                let cb = rows_cols(&self.nodes[b.0].shape).1;
                let mut da = Vec::with_capacity(g.len());
                let mut db = Vec::with_capacity(g.len());
                for row in g.chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::GatedMix { gate, x, y } => {
                let alpha = sigmoid(val(*gate)[0]);
                let (xv, yv) = (val(*x), val(*y));
                let dgate = g
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(&gi, (&a, &b))| gi * (a - b))
                    .sum::<T>()
                    * alpha
                    * (T::one() - alpha);
                out.push((*gate, vec![dgate]));
                out.push((*x, g.iter().map(|&gi| gi * alpha).collect()));
                out.push((*y, g.iter().map(|&gi| gi * (T::one() - alpha)).collect()));
            }
            Op::Sequence {
                cls,
                z,
                weight,
                bias,
                embed,
            } => {
                let d = node.shape[1];
                let (batch, m) = rows_cols(&self.nodes[z.0].shape);
                let seq = m + 1;
                let (zv, wv) = (val(*z), val(*weight));
                let mut dcls = vec![T::zero(); batch * d];
                let mut dz = vec![T::zero(); batch * m];
                let mut dw = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                let mut de = vec![T::zero(); m * d];
                for b in 0..batch {
                    dcls[b * d..(b + 1) * d].copy_from_slice(&g[b * seq * d..][..d]);
                    for t in 0..m {
                        let gr = &g[(b * seq + 1 + t) * d..][..d];
                        dz[b * m + t] = dot(gr, wv);
                        axpy(zv[b * m + t], gr, &mut dw);
                        axpy(T::one(), gr, &mut db);
                        axpy(T::one(), gr, &mut de[t * d..(t + 1) * d]);
                    }
                }
                out.push((*cls, dcls));
                out.push((*z, dz));
                out.push((*weight, dw));
                out.push((*bias, db));
                out.push((*embed, de));
            }
            Op::TakeRows { x, stride, offset } => {
                let d = node.shape[1];
                let mut dx = vec![T::zero(); val(*x).len()];
                for (r, gr) in g.chunks(d).enumerate() {
                    let dst = r * stride + offset;
                    dx[dst * d..(dst + 1) * d].copy_from_slice(gr);
                }
                out.push((*x, dx));
            }
            Op::BceWithLogits { logits, targets } => {
                let n = T::from_usize(targets.len()).unwrap();
                let dl = val(*logits)
                    .iter()
                    .zip(targets)
                    .map(|(&l, &y)| g[0] * (sigmoid(l) - y) / n)
                    .collect();
                out.push((*logits, dl));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                // Rows of `targets` sum to one, so d/dl = p - y.
                let c = *self.nodes[logits.0].shape.last().unwrap();
                let n = T::from_usize(probs.len() / c).unwrap();
                let dl = probs
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| g[0] * (p - y) / n)
                    .collect();
                out.push((*logits, dl));
            }
            Op::Custom { inputs, op } => {
                let input_values: Vec<&[T]> = inputs.iter().map(|v| val(*v)).collect();
                let grads = op.backward(&input_values, &node.value, g);
                for (v, grad) in inputs.iter().zip(grads) {
                    if let Some(grad) = grad {
                        out.push((*v, grad));
                    }
                }
            }
        }
        out
    }
}
