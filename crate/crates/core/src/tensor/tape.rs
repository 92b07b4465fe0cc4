use std::fmt;

use super::kernels::{self, ConvGeometry};
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Relu,
    Sigmoid,
    Softmax,
    LayerNorm,
    Conv2d,
    AddBias,
    MaskedFill,
    Concat,
    Mean,
    Sum,
    Narrow,
    Reshape,
    CosineRows,
}

impl OpKind {
    /// Every op with a backward rule.
    pub const DIFFERENTIABLE: [OpKind; 21] = [
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Conv2d,
        OpKind::AddBias,
        OpKind::MaskedFill,
        OpKind::Concat,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Narrow,
        OpKind::Reshape,
        OpKind::CosineRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Conv2d => "conv2d",
            OpKind::AddBias => "add_bias",
            OpKind::MaskedFill => "masked_fill",
            OpKind::Concat => "concat",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Narrow => "narrow",
            OpKind::Reshape => "reshape",
            OpKind::CosineRows => "cosine",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Recoverable degeneracies noticed during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Warning {
    ZeroNormCosine,
    EmptyPoolingMask,
    EmptyAttentionMask,
}

impl Warning {
    pub const ALL: [Warning; 3] = [
        Warning::ZeroNormCosine,
        Warning::EmptyPoolingMask,
        Warning::EmptyAttentionMask,
    ];
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Warnings {
    counts: [usize; 3],
}

impl Warnings {
    pub fn record(&mut self, w: Warning) {
        self.counts[w as usize] += 1;
    }

    pub fn count(&self, w: Warning) -> usize {
        self.counts[w as usize]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &Warnings) {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
    }
}

enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cols: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
        cout: usize,
        cols: Vec<F>,
    },
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    MaskedFill {
        x: Var,
        keep: Vec<bool>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    CosineRows {
        x: Var,
        v: Var,
        cols: usize,
        cos: Vec<F>,
        xnorm: Vec<F>,
        vnorm: F,
    },
}

impl<F> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::MaskedFill { .. } => OpKind::MaskedFill,
            Op::Concat { .. } => OpKind::Concat,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum(..) => OpKind::Sum,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Reshape(..) => OpKind::Reshape,
            Op::CosineRows { .. } => OpKind::CosineRows,
        }
    }
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Vec<F>>>,
    visits: Vec<u32>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of times backward processed the node behind `v`.
    pub fn visits(&self, v: Var) -> u32 {
        self.visits.get(v.0).copied().unwrap_or(0)
    }

    pub fn visited_nodes(&self) -> usize {
        self.visits.iter().filter(|&&c| c > 0).count()
    }

    pub fn max_visits(&self) -> u32 {
        self.visits.iter().copied().max().unwrap_or(0)
    }
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in execution order, so the tape is topologically sorted
/// by construction and backward is a single reverse sweep.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    warnings: Warnings,
    fault: Option<OpKind>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            warnings: Warnings::default(),
            fault: None,
        }
    }

    /// Test hook: perturbs the backward rule of `kind` by 1% so that
    /// gradient checks can be shown to catch a wrong derivative.
    pub fn inject_gradient_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn warnings(&self) -> &Warnings {
        &self.warnings
    }

    pub fn warn(&mut self, w: Warning) {
        self.warnings.record(w);
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, shape: Shape, data: Vec<F>, op: Op<F>, requires_grad: bool) -> Var {
        let mut value = Tensor::from_parts(shape, data);
        value = value.with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let req = t.requires_grad();
        let shape = t.shape().clone();
        self.push(shape, t.into_data(), Op::Leaf, req)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.rank() != 2 || sb.rank() != 2 || sa.dim(1) != sb.dim(0) {
            return Err(Error::dim("matmul", format!("{sa} × {sb}")));
        }
        let (m, k, n) = (sa.dim(0), sa.dim(1), sb.dim(1));
        let mut out = vec![F::zero(); m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Shape(vec![m, n]), out, Op::MatMul { a, b, m, k, n }, req))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.rank() != 2 {
            return Err(Error::dim("transpose", format!("expected rank 2, got {s}")));
        }
        let (rows, cols) = (s.dim(0), s.dim(1));
        let out = kernels::transpose(rows, cols, self.value(x).data());
        let req = self.requires(x);
        Ok(self.push(Shape(vec![cols, rows]), out, Op::Transpose { x, rows, cols }, req))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                name,
                format!("{} vs {}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let req = self.requires(a) || self.requires(b);
        let shape = self.shape(a).clone();
        Ok(self.push(shape, out, op, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let out = self.value(x).data().iter().map(|&v| f(v)).collect();
        let req = self.requires(x);
        let shape = self.shape(x).clone();
        self.push(shape, out, op, req)
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > F::zero() { v } else { F::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| F::one() / (F::one() + (-v).exp()), Op::Sigmoid(x))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).clone();
        shape.check_axis("softmax", axis)?;
        let (outer, n, inner) = shape.split_at_axis(axis);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut max = F::neg_infinity();
                for j in 0..n {
                    max = max.max(src[at(j)]);
                }
                let mut total = F::zero();
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, req))
    }

    /// Row-wise layer normalisation of `x[T×D]` with per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        if eps <= F::zero() {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let s = self.shape(x).clone();
        if s.rank() != 2 {
            return Err(Error::dim("layer_norm", format!("expected [T×D], got {s}")));
        }
        let (rows, cols) = (s.dim(0), s.dim(1));
        for p in [gain, bias] {
            if self.shape(p).dims() != [cols] {
                return Err(Error::dim(
                    "layer_norm",
                    format!("parameter {} for input {s}", self.shape(p)),
                ));
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let n = F::lit(cols as f64);
        let mut xhat = vec![F::zero(); rows * cols];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(
            s,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                xhat,
                rstd,
            },
            req,
        ))
    }

    /// Cross-correlation of `x[Cin×H×W]` with `w[Cout×Cin×k×k]`.
    ///
    /// Output extents are `(H + 2·pad − k)/stride + 1`, rounded down.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).clone(), self.shape(w).clone());
        if sx.rank() != 3 || sw.rank() != 4 {
            return Err(Error::dim("conv2d", format!("input {sx}, weight {sw}")));
        }
        let (cin, h, wd) = (sx.dim(0), sx.dim(1), sx.dim(2));
        let (cout, k) = (sw.dim(0), sw.dim(2));
        if sw.dim(1) != cin || sw.dim(3) != k {
            return Err(Error::dim("conv2d", format!("input {sx}, weight {sw}")));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel must be odd, got {k}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be ≥ 1".into()));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Config(format!(
                "conv2d kernel {k} with pad {pad} does not fit input {sx}"
            )));
        }
        let geom = ConvGeometry {
            channels: cin,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
            out_height: (h + 2 * pad - k) / stride + 1,
            out_width: (wd + 2 * pad - k) / stride + 1,
        };
        let cols = kernels::im2col(&geom, self.value(x).data());
        let mut out = vec![F::zero(); cout * geom.col_cols()];
        kernels::gemm_nn(
            cout,
            geom.col_rows(),
            geom.col_cols(),
            self.value(w).data(),
            &cols,
            &mut out,
        );
        let req = self.requires(x) || self.requires(w);
        let shape = Shape(vec![cout, geom.out_height, geom.out_width]);
        Ok(self.push(
            shape,
            out,
            Op::Conv2d {
                x,
                w,
                geom,
                cout,
                cols,
            },
            req,
        ))
    }

    /// Adds `bias[n]` along `axis` (extent n), broadcasting over every other axis.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).clone();
        s.check_axis("add_bias", axis)?;
        if self.shape(bias).dims() != [s.dim(axis)] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {} on axis {axis} of {s}", self.shape(bias)),
            ));
        }
        let (outer, n, inner) = s.split_at_axis(axis);
        let mut out = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for v in &mut out[base..base + inner] {
                    *v += b[j];
                }
            }
        }
        let req = self.requires(x) || self.requires(bias);
        Ok(self.push(s, out, Op::AddBias { x, bias, axis }, req))
    }

    /// Keeps `x` where `mask` is 1 and writes `value` where it is 0.
    ///
    /// `mask` must be binary and either match `x` or match its trailing
    /// dimensions, in which case it is repeated over the leading ones.
    pub fn masked_fill(&mut self, x: Var, mask: &Tensor<F>, value: F) -> Result<Var> {
        let s = self.shape(x).clone();
        let md = mask.dims();
        if md.len() > s.rank() || s.dims()[s.rank() - md.len()..] != *md {
            return Err(Error::dim(
                "masked_fill",
                format!("mask {} not broadcastable to {s}", mask.shape()),
            ));
        }
        if !mask.is_binary() {
            return Err(Error::Validation("masked_fill mask must be binary".into()));
        }
        let period = mask.numel();
        let keep: Vec<bool> = mask.data().iter().map(|&m| m == F::one()).collect();
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if keep[i % period] { v } else { value })
            .collect();
        let req = self.requires(x);
        Ok(self.push(s, out, Op::MaskedFill { x, keep }, req))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::dim("concat", "no inputs"));
        };
        let s0 = self.shape(first).clone();
        s0.check_axis("concat", axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.rank() == s0.rank()
                && s.dims()
                    .iter()
                    .zip(s0.dims())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", format!("{s} vs {s0} on axis {axis}")));
            }
            total += s.dim(axis);
        }
        let mut dims = s0.dims().to_vec();
        dims[axis] = total;
        let shape = Shape(dims);
        let (outer, _, inner) = shape.split_at_axis(axis);
        let mut out = Vec::with_capacity(shape.numel());
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v).dim(axis);
                let chunk = n * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let req = inputs.iter().any(|&v| self.requires(v));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            req,
        ))
    }

    /// Mean over `axis`; the axis is removed (rank-1 inputs give `[1]`).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).clone();
        s.check_axis("mean", axis)?;
        let (outer, n, inner) = s.split_at_axis(axis);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); outer * inner];
        let inv = F::one() / F::lit(n as f64);
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * n + j) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut dims: Vec<usize> = s.dims().to_vec();
        dims.remove(axis);
        if dims.is_empty() {
            dims.push(1);
        }
        let req = self.requires(x);
        Ok(self.push(Shape(dims), out, Op::Mean { x, axis }, req))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let req = self.requires(x);
        self.push(Shape(vec![1]), vec![total], Op::Sum(x), req)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).clone();
        s.check_axis("narrow", axis)?;
        if len == 0 || start + len > s.dim(axis) {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} on axis {axis} of {s}", start + len),
            ));
        }
        let (outer, n, inner) = s.split_at_axis(axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut dims = s.dims().to_vec();
        dims[axis] = len;
        let req = self.requires(x);
        Ok(self.push(Shape(dims), out, Op::Narrow { x, axis, start }, req))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.shape(x).numel() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {} as {shape}", self.shape(x)),
            ));
        }
        let data = self.value(x).data().to_vec();
        let req = self.requires(x);
        Ok(self.push(shape, data, Op::Reshape(x), req))
    }

    /// Cosine similarity of every row of `x[T×D]` with `v` (`[D]` or `[1×D]`).
    ///
    /// Rows or vectors with zero norm yield 0 and record
    /// [`Warning::ZeroNormCosine`].
    pub fn cosine_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        let s = self.shape(x).clone();
        if s.rank() != 2 || self.shape(v).numel() != s.dim(1) {
            return Err(Error::dim(
                "cosine",
                format!("rows {s} vs vector {}", self.shape(v)),
            ));
        }
        let (rows, cols) = (s.dim(0), s.dim(1));
        let xs = self.value(x).data();
        let vs = self.value(v).data();
        let vnorm = vs.iter().map(|&a| a * a).sum::<F>().sqrt();
        let mut cos = vec![F::zero(); rows];
        let mut xnorm = vec![F::zero(); rows];
        let mut degenerate = 0;
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let n = row.iter().map(|&a| a * a).sum::<F>().sqrt();
            xnorm[r] = n;
            if n == F::zero() || vnorm == F::zero() {
                degenerate += 1;
                continue;
            }
            let dot: F = row.iter().zip(vs).map(|(&a, &b)| a * b).sum();
            cos[r] = (dot / (n * vnorm)).max(-F::one()).min(F::one());
        }
        for _ in 0..degenerate {
            self.warn(Warning::ZeroNormCosine);
        }
        let req = self.requires(x) || self.requires(v);
        Ok(self.push(
            Shape(vec![rows]),
            cos.clone(),
            Op::CosineRows {
                x,
                v,
                cols,
                cos,
                xnorm,
                vnorm,
            },
            req,
        ))
    }

    /// Cosine similarity of two vectors of equal length, as a `[1]` tensor.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.shape(a).numel();
        if self.shape(b).numel() != n {
            return Err(Error::dim(
                "cosine",
                format!("{} vs {}", self.shape(a), self.shape(b)),
            ));
        }
        let row = self.reshape(a, &[1, n])?;
        self.cosine_rows(row, b)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visits = vec![0u32; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.value.requires_grad() {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visits[idx] += 1;
            let mut contributions = self.node_backward(node, &g);
            if self.fault == Some(node.op.kind()) {
                let bump = F::lit(1.01);
                for (_, c) in &mut contributions {
                    c.iter_mut().for_each(|v| *v *= bump);
                }
            }
            for (var, c) in contributions {
                if !self.requires(var) {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, visits })
    }

    fn node_backward(&self, node: &Node<F>, g: &[F]) -> Vec<(Var, Vec<F>)> {
        let val = |v: Var| self.value(v).data();
        let zero = F::zero();
        match &node.op {
            Op::Leaf => Vec::new(),
            &Op::MatMul { a, b, m, k, n } => {
                let mut out = Vec::new();
                if self.requires(a) {
                    let mut da = vec![zero; m * k];
                    kernels::gemm_nt(m, n, k, g, val(b), &mut da);
                    out.push((a, da));
                }
                if self.requires(b) {
                    let mut db = vec![zero; k * n];
                    kernels::gemm_tn(k, m, n, val(a), g, &mut db);
                    out.push((b, db));
                }
                out
            }
            &Op::Transpose { x, rows, cols } => {
                vec![(x, kernels::transpose(cols, rows, g))]
            }
            &Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            &Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|&v| -v).collect())],
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                vec![
                    (a, g.iter().zip(bv).map(|(&d, &y)| d * y).collect()),
                    (b, g.iter().zip(av).map(|(&d, &x)| d * x).collect()),
                ]
            }
            &Op::Div(a, b) => {
                let (av, bv) = (val(a), val(b));
                let da = g.iter().zip(bv).map(|(&d, &y)| d / y).collect();
                let db = g
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(&d, (&x, &y))| -d * x / (y * y))
                    .collect();
                vec![(a, da), (b, db)]
            }
            &Op::Scale(x, f) => vec![(x, g.iter().map(|&d| d * f).collect())],
            &Op::AddScalar(x) => vec![(x, g.to_vec())],
            &Op::Relu(x) => {
                let xv = val(x);
                vec![(
                    x,
                    g.iter()
                        .zip(xv)
                        .map(|(&d, &v)| if v > zero { d } else { zero })
                        .collect(),
                )]
            }
            &Op::Sigmoid(x) => {
                let y = node.value.data();
                vec![(
                    x,
                    g.iter()
                        .zip(y)
                        .map(|(&d, &s)| d * s * (F::one() - s))
                        .collect(),
                )]
            }
            &Op::Softmax { x, axis } => {
                let (outer, n, inner) = node.value.shape().split_at_axis(axis);
                let y = node.value.data();
                let mut dx = vec![zero; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: F = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![(x, dx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                xhat,
                rstd,
            } => {
                let cols = *cols;
                let rows = rstd.len();
                let gv = val(*gain);
                let n = F::lit(cols as f64);
                let mut dx = vec![zero; rows * cols];
                let mut dg = vec![zero; cols];
                let mut db = vec![zero; cols];
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let mut sum_d = zero;
                    let mut sum_dh = zero;
                    for c in 0..cols {
                        let dh = gr[c] * gv[c];
                        sum_d += dh;
                        sum_dh += dh * hr[c];
                        dg[c] += gr[c] * hr[c];
                        db[c] += gr[c];
                    }
                    for c in 0..cols {
                        let dh = gr[c] * gv[c];
                        dx[r * cols + c] = rstd[r] / n * (n * dh - sum_d - hr[c] * sum_dh);
                    }
                }
                vec![(*x, dx), (*gain, dg), (*bias, db)]
            }
            Op::Conv2d {
                x,
                w,
                geom,
                cout,
                cols,
            } => {
                let mut out = Vec::new();
                let (rows_n, cols_n) = (geom.col_rows(), geom.col_cols());
                if self.requires(*w) {
                    let mut dw = vec![zero; cout * rows_n];
                    kernels::gemm_nt(*cout, cols_n, rows_n, g, cols, &mut dw);
                    out.push((*w, dw));
                }
                if self.requires(*x) {
                    let mut dcols = vec![zero; rows_n * cols_n];
                    kernels::gemm_tn(rows_n, *cout, cols_n, val(*w), g, &mut dcols);
                    let mut dx = vec![zero; geom.channels * geom.height * geom.width];
                    kernels::col2im(geom, &dcols, &mut dx);
                    out.push((*x, dx));
                }
                out
            }
            &Op::AddBias { x, bias, axis } => {
                let (outer, n, inner) = node.value.shape().split_at_axis(axis);
                let mut db = vec![zero; n];
                for o in 0..outer {
                    for (j, acc) in db.iter_mut().enumerate() {
                        let base = (o * n + j) * inner;
                        *acc += g[base..base + inner].iter().copied().sum::<F>();
                    }
                }
                vec![(x, g.to_vec()), (bias, db)]
            }
            Op::MaskedFill { x, keep } => {
                let period = keep.len();
                vec![(
                    *x,
                    g.iter()
                        .enumerate()
                        .map(|(i, &d)| if keep[i % period] { d } else { zero })
                        .collect(),
                )]
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = node.value.shape().split_at_axis(*axis);
                let mut parts: Vec<Vec<F>> = inputs
                    .iter()
                    .map(|&v| Vec::with_capacity(self.value(v).numel()))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (k, &v) in inputs.iter().enumerate() {
                        let chunk = self.shape(v).dim(*axis) * inner;
                        parts[k].extend_from_slice(&g[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                inputs.iter().copied().zip(parts).collect()
            }
            &Op::Mean { x, axis } => {
                let (outer, n, inner) = self.shape(x).split_at_axis(axis);
                let inv = F::one() / F::lit(n as f64);
                let mut dx = vec![zero; outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            dx[(o * n + j) * inner + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                vec![(x, dx)]
            }
            &Op::Sum(x) => vec![(x, vec![g[0]; self.value(x).numel()])],
            &Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = self.shape(x).split_at_axis(axis);
                let len = node.value.shape().dim(axis);
                let mut dx = vec![zero; outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(x, dx)]
            }
            &Op::Reshape(x) => vec![(x, g.to_vec())],
            Op::CosineRows {
                x,
                v,
                cols,
                cos,
                xnorm,
                vnorm,
            } => {
                let cols = *cols;
                let xs = val(*x);
                let vs = val(*v);
                let mut dx = vec![zero; xs.len()];
                let mut dv = vec![zero; cols];
                for (r, &c) in cos.iter().enumerate() {
                    let n = xnorm[r];
                    if n == zero || *vnorm == zero || g[r] == zero {
                        continue;
                    }
                    let row = &xs[r * cols..(r + 1) * cols];
                    let inv = F::one() / (n * *vnorm);
                    for j in 0..cols {
                        dx[r * cols + j] += g[r] * (vs[j] * inv - c * row[j] / (n * n));
                        dv[j] += g[r] * (row[j] * inv - c * vs[j] / (*vnorm * *vnorm));
                    }
                }
                vec![(*x, dx), (*v, dv)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_and_ones() {
        let mut tape = Tape::new();
        let id = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }).unwrap());
        let b_t = Tensor::from_fn(&[3, 2], |i| i as f64 * 1.5 - 2.0).unwrap();
        let b = tape.constant(b_t.clone());
        let c = tape.matmul(id, b).unwrap();
        assert_eq!(tape.value(c), &b_t);

        let k = 7;
        let row = tape.constant(Tensor::ones(&[1, k]).unwrap());
        let col = tape.constant(Tensor::ones(&[k, 1]).unwrap());
        let s = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(s).data(), &[k as f64]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2×3] × [2×3]"), "{err}");
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);

        let c = tape.constant(t(&[4], &[7.5; 4]));
        let y = tape.softmax(c, 0).unwrap();
        assert!(tape.value(y).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let x = tape.constant(t(&[3], &[f64::NEG_INFINITY, 1.0, 2.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.0);

        assert!(matches!(tape.softmax(x, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[2]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]).unwrap());
        let x = tape.constant(t(&[2, 2], &[3.0, 3.0, 1.0, -1.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert!((v[2] - 1.0).abs() < 1e-9 && (v[3] + 1.0).abs() < 1e-9);
        assert!(matches!(tape.layer_norm(x, g, b, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn conv_identity_and_box() {
        let mut tape = Tape::new();
        let img = Tensor::from_fn(&[1, 4, 4], |i| i as f64).unwrap();
        let x = tape.constant(img.clone());
        let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]).unwrap());
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), img.data());

        let hot = Tensor::from_fn(&[1, 5, 5], |i| if i == 12 { 1.0 } else { 0.0 }).unwrap();
        let x = tape.constant(hot);
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]).unwrap());
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        let out = tape.value(y);
        for r in 0..5 {
            for c in 0..5 {
                let inside = (1..=3).contains(&r) && (1..=3).contains(&c);
                assert_eq!(out.at(&[0, r, c]), if inside { 1.0 } else { 0.0 });
            }
        }
        let w2 = tape.constant(Tensor::ones(&[1, 1, 2, 2]).unwrap());
        assert!(matches!(tape.conv2d(x, w2, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn masked_fill_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let ones = Tensor::ones(&[3]).unwrap();
        let y = tape.masked_fill(x, &ones, -1e9).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let zeros = Tensor::zeros(&[2, 3]).unwrap();
        let y = tape.masked_fill(x, &zeros, -1e9).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == -1e9));
        let mixed = t(&[3], &[1.0, 0.0, 1.0]);
        let y = tape.masked_fill(x, &mixed, -5.0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -5.0, 3.0, 4.0, -5.0, 6.0]);
        let bad = t(&[3], &[1.0, 0.5, 1.0]);
        assert!(matches!(tape.masked_fill(x, &bad, 0.0), Err(Error::Validation(_))));
        let wrong = Tensor::ones(&[2]).unwrap();
        assert!(matches!(tape.masked_fill(x, &wrong, 0.0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cosine_cases_and_zero_norm_warning() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[1.0, -2.0, 0.5]));
        let neg = tape.scale(a, -1.0);
        let c = tape.cosine_similarity(a, a).unwrap();
        assert!((tape.value(c).data()[0] - 1.0).abs() < 1e-12);
        let c = tape.cosine_similarity(a, neg).unwrap();
        assert!((tape.value(c).data()[0] + 1.0).abs() < 1e-12);
        let e0 = tape.constant(t(&[2], &[1.0, 0.0]));
        let e1 = tape.constant(t(&[2], &[0.0, 1.0]));
        let c = tape.cosine_similarity(e0, e1).unwrap();
        assert_eq!(tape.value(c).data()[0], 0.0);

        let z = tape.constant(Tensor::zeros(&[2]).unwrap());
        let c = tape.cosine_similarity(e0, z).unwrap();
        assert_eq!(tape.value(c).data()[0], 0.0);
        assert_eq!(tape.warnings().count(Warning::ZeroNormCosine), 1);
    }

    #[test]
    fn backward_sum_and_product() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 4]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.param(Tensor::scalar(-4.0));
        let p = tape.mul(x, y).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.get(x).unwrap(), &[-4.0]);
        assert_eq!(g.get(y).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_accumulates_fan_out_and_visits_once() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let a = tape.mul(x, x).unwrap();
        let b = tape.add(a, x).unwrap();
        let c = tape.add(b, a).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        // d/dx (2x² + x) = 4x + 1
        assert_eq!(g.get(x).unwrap(), &[5.0, 9.0]);
        assert_eq!(g.max_visits(), 1);
        assert_eq!(g.visited_nodes(), tape.len());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
        let empty = Tape::<f64>::new();
        assert!(matches!(empty.backward(Var(0)), Err(Error::Usage(_))));
    }
}
