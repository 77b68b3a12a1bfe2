use super::kernels;
use super::{NumError, Result, Tensor, LAYER_NORM_EPS};
use crate::scalar::{count, lit, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Input,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Ln(Var),
    Exp(Var),
    Sqrt(Var),
    DivScalar(Var, Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    Reshape(Var),
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Concat(Vec<Var>),
    Softmax(Var),
    MaskedLogSoftmax {
        x: Var,
        mask: Vec<bool>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of primitive operations.
///
/// Operands always precede their results, so the backward pass is a single
/// reverse sweep over the node list.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every [`Tape::param`] node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Same value as `v`, cut from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul_nt")?;
        let (n, k2) = self.value(b).dims2("matmul_nt")?;
        if k != k2 {
            return Err(NumError::shape(
                "matmul_nt",
                format!("{:?} · {:?}ᵀ", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::MatMulNt(a, b), g))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumError::shape(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), g))
    }

    /// Adds `bias` (length = last dim of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.last_dim();
        if tb.len() != n {
            return Err(NumError::shape(
                "add_row",
                format!("bias {:?} does not match rows of {:?}", tb.shape(), tx.shape()),
            ));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            kernels::add_assign(row, tb.data());
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let g = self.grad_of(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), g))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let g = self.grad_of(&[x]);
        self.push(value, Op::Scale(x, c), g)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        let g = self.grad_of(&[x]);
        self.push(value, Op::AddScalar(x), g)
    }

    /// Natural logarithm; inputs must be positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= T::zero()) {
            return Err(NumError::Contract("ln of a non-positive value".into()));
        }
        let value = self.value(x).map(T::ln);
        let g = self.grad_of(&[x]);
        Ok(self.push(value, Op::Ln(x), g))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::exp);
        let g = self.grad_of(&[x]);
        self.push(value, Op::Exp(x), g)
    }

    /// Square root; inputs must be positive.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= T::zero()) {
            return Err(NumError::Contract("sqrt of a non-positive value".into()));
        }
        let value = self.value(x).map(T::sqrt);
        let g = self.grad_of(&[x]);
        Ok(self.push(value, Op::Sqrt(x), g))
    }

    /// Divides every element of `a` by the single element of `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        if sv == T::zero() {
            return Err(NumError::Contract("division by zero".into()));
        }
        let value = self.value(a).map(|v| v / sv);
        let g = self.grad_of(&[a, s]);
        Ok(self.push(value, Op::DivScalar(a, s), g))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let g = self.grad_of(&[x]);
        self.push(value, Op::SumAll(x), g)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, T::one() / count::<T>(n))
    }

    /// Column sums of a matrix: `[m×n] → [1×n]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2("sum_rows")?;
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            kernels::add_assign(&mut out, t.row(i));
        }
        let value = Tensor::new(vec![1, n], out)?;
        let g = self.grad_of(&[x]);
        Ok(self.push(value, Op::SumRows(x), g))
    }

    /// Row sums of a matrix: `[m×n] → [m×1]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, _) = t.dims2("sum_cols")?;
        let out = (0..m).map(|i| t.row(i).iter().copied().sum()).collect();
        let value = Tensor::new(vec![m, 1], out)?;
        let g = self.grad_of(&[x]);
        Ok(self.push(value, Op::SumCols(x), g))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let g = self.grad_of(&[x]);
        Ok(self.push(value, Op::Reshape(x), g))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let g = self.grad_of(&[x]);
        Ok(self.push(value, Op::Transpose(x), g))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2("slice_cols")?;
        if len == 0 || start + len > n {
            return Err(NumError::shape(
                "slice_cols",
                format!("columns {start}..{} out of range for {:?}", start + len, t.shape()),
            ));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let value = Tensor::new(vec![m, len], out)?;
        let g = self.grad_of(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumError::shape("concat_cols", "no inputs"));
        }
        let m = self.value(parts[0]).dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.value(p).dims2("concat_cols")?;
            if mp != m {
                return Err(NumError::shape(
                    "concat_cols",
                    format!("row counts differ: {m} vs {mp}"),
                ));
            }
            widths.push(np);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let g = self.grad_of(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), g))
    }

    fn concat_flat(&mut self, op: &'static str, parts: &[Var], shape: Vec<usize>) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(shape, out).map_err(|e| NumError::shape(op, e.to_string()))?;
        let g = self.grad_of(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), g))
    }

    /// Stacks equal-width rows or matrices vertically: each part is `[n]`,
    /// `[1×n]` or `[m_p×n]`; the result is `[Σm_p × n]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumError::shape("concat_rows", "no inputs"));
        }
        let n = self.value(parts[0]).last_dim();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.ndim() > 2 || t.last_dim() != n {
                return Err(NumError::shape(
                    "concat_rows",
                    format!("part {:?} vs width {n}", t.shape()),
                ));
            }
            rows += t.num_rows();
        }
        self.concat_flat("concat_rows", parts, vec![rows, n])
    }

    /// Stacks same-shape tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumError::shape("stack", "no inputs"));
        }
        let inner = self.value(parts[0]).shape().to_vec();
        for &p in parts {
            if self.value(p).shape() != inner.as_slice() {
                return Err(NumError::shape(
                    "stack",
                    format!("{:?} vs {:?}", self.value(p).shape(), inner),
                ));
            }
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        self.concat_flat("stack", parts, shape)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).softmax_lastdim()?;
        let g = self.grad_of(&[x]);
        Ok(self.push(value, Op::Softmax(x), g))
    }

    /// Row-wise log-softmax over the entries where `mask` is true. Masked-out
    /// entries produce 0 and receive no gradient. Every row needs at least one
    /// unmasked entry.
    pub fn masked_log_softmax(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(NumError::shape(
                "masked_log_softmax",
                format!("mask of {} entries for {:?}", mask.len(), t.shape()),
            ));
        }
        let n = t.last_dim();
        let mut out = vec![T::zero(); t.len()];
        for (r, row) in t.data().chunks(n).enumerate() {
            let m = &mask[r * n..(r + 1) * n];
            if !m.iter().any(|&keep| keep) {
                return Err(NumError::Contract(format!("row {r} has no unmasked entries")));
            }
            // Non-finite logits pass through so callers see a non-finite loss.
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            let sum: T = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| (v - max).exp())
                .sum();
            let lse = max + sum.ln();
            for j in 0..n {
                if m[j] {
                    out[r * n + j] = row[j] - lse;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let g = self.grad_of(&[x]);
        Ok(self.push(value, Op::MaskedLogSoftmax { x, mask }, g))
    }

    /// Gathers single elements by flat index into a `[len]` vector.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if idx.is_empty() {
            return Err(NumError::shape("pick", "no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.len()) {
            return Err(NumError::shape(
                "pick",
                format!("index {bad} out of range for {:?}", t.shape()),
            ));
        }
        let out = idx.iter().map(|&i| t.data()[i]).collect::<Vec<_>>();
        let value = Tensor::new(vec![out.len()], out)?;
        let g = self.grad_of(&[x]);
        Ok(self.push(value, Op::Pick { x, idx }, g))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a) = (lit::<T>(GELU_C), lit::<T>(GELU_A));
        let half = lit::<T>(0.5);
        let value = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        let g = self.grad_of(&[x]);
        self.push(value, Op::Gelu(x), g)
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(NumError::shape(
                "layer_norm",
                format!("gain/bias do not match width {n}"),
            ));
        }
        let eps = lit::<T>(LAYER_NORM_EPS);
        let nf = count::<T>(n);
        let rows = t.num_rows();
        let mut xhat = vec![T::zero(); t.len()];
        let mut rstd = vec![T::zero(); rows];
        for (r, row) in t.data().chunks(n).enumerate() {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let out = xhat
            .chunks(n)
            .flat_map(|row| row.iter().zip(gv).zip(bv).map(|((&h, &g), &b)| h * g + b))
            .collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let g = self.grad_of(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            g,
        ))
    }

    /// Rows of `table` selected by `ids`: `[V×d] → [len×d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = t.dims2("gather_rows")?;
        if ids.is_empty() {
            return Err(NumError::shape("gather_rows", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NumError::shape(
                "gather_rows",
                format!("id {bad} out of range for {v} rows"),
            ));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let g = self.grad_of(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    /// Scales every row to unit Euclidean norm. Rows with norm ≤ 1e-12 are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        let mut norms = Vec::with_capacity(t.num_rows());
        let mut out = Vec::with_capacity(t.len());
        for (r, row) in t.data().chunks(n).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm <= lit::<T>(1e-12) {
                return Err(NumError::Contract(format!("row {r} has zero norm")));
            }
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let g = self.grad_of(&[x]);
        Ok(self.push(value, Op::L2NormalizeRows { x, norms }, g))
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let t = self.value(loss);
        if t.len() != 1 {
            return Err(NumError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        let seed = Tensor::filled(t.shape().to_vec(), T::one())?;
        self.backward_with_seed(loss, seed)
    }

    /// Reverse pass from an arbitrary node, seeded with `d(out)/d(node) = seed`.
    pub fn backward_with_seed(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.value(output).shape() {
            return Err(NumError::shape(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.into_data());
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Input = node.op {
                leaves[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        // Accumulator for operand `v`, or None when it does not need a gradient.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].needs_grad {
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]))
                } else {
                    None
                }
            }};
        }
        let val = |v: Var| nodes[v.0].value.data();
        let y = node.value.data();

        match &node.op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if let Some(da) = acc!(*a) {
                    kernels::matmul_nt_acc(g, val(*b), da, m, n, k);
                }
                if let Some(db) = acc!(*b) {
                    kernels::matmul_tn_acc(val(*a), g, db, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[0];
                if let Some(da) = acc!(*a) {
                    kernels::matmul_acc(g, val(*b), da, m, n, k);
                }
                if let Some(db) = acc!(*b) {
                    kernels::matmul_tn_acc(g, val(*a), db, m, n, k);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = acc!(*a) {
                    kernels::add_assign(da, g);
                }
                if let Some(db) = acc!(*b) {
                    kernels::add_assign(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = acc!(*a) {
                    kernels::add_assign(da, g);
                }
                if let Some(db) = acc!(*b) {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = acc!(*a) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(val(*b)) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = acc!(*b) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(val(*a)) {
                        *d += gv * av;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(dx) = acc!(*x) {
                    kernels::add_assign(dx, g);
                }
                if let Some(db) = acc!(*bias) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        kernels::add_assign(db, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = acc!(*x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * *c;
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(dx) = acc!(*x) {
                    kernels::add_assign(dx, g);
                }
            }
            Op::Ln(x) => {
                if let Some(dx) = acc!(*x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(val(*x)) {
                        *d += gv / xv;
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(dx) = acc!(*x) {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * yv;
                    }
                }
            }
            Op::Sqrt(x) => {
                let half = lit::<T>(0.5);
                if let Some(dx) = acc!(*x) {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * half / yv;
                    }
                }
            }
            Op::DivScalar(a, s) => {
                let sv = val(*s)[0];
                if let Some(da) = acc!(*a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv / sv;
                    }
                }
                if let Some(ds) = acc!(*s) {
                    let dot: T = g.iter().zip(val(*a)).map(|(&gv, &av)| gv * av).sum();
                    ds[0] -= dot / (sv * sv);
                }
            }
            Op::SumAll(x) => {
                if let Some(dx) = acc!(*x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::SumRows(x) => {
                if let Some(dx) = acc!(*x) {
                    for row in dx.chunks_mut(g.len()) {
                        kernels::add_assign(row, g);
                    }
                }
            }
            Op::SumCols(x) => {
                let n = nodes[x.0].value.last_dim();
                if let Some(dx) = acc!(*x) {
                    for (row, &gv) in dx.chunks_mut(n).zip(g) {
                        for d in row.iter_mut() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                if let Some(dx) = acc!(*x) {
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let n = nodes[x.0].value.last_dim();
                let len = node.value.last_dim();
                if let Some(dx) = acc!(*x) {
                    for (row, grow) in dx.chunks_mut(n).zip(g.chunks(len)) {
                        kernels::add_assign(&mut row[*start..*start + len], grow);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.last_dim();
                    if let Some(dp) = acc!(p) {
                        for (row, grow) in dp.chunks_mut(w).zip(g.chunks(n)) {
                            kernels::add_assign(row, &grow[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(dp) = acc!(p) {
                        kernels::add_assign(dp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                if let Some(dx) = acc!(*x) {
                    for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::MaskedLogSoftmax { x, mask } => {
                let n = node.value.last_dim();
                if let Some(dx) = acc!(*x) {
                    for (r, (drow, grow)) in dx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        let m = &mask[r * n..(r + 1) * n];
                        let yrow = &y[r * n..(r + 1) * n];
                        let gsum: T = grow.iter().zip(m).filter(|(_, &k)| k).map(|(&v, _)| v).sum();
                        for j in 0..n {
                            if m[j] {
                                drow[j] += grow[j] - yrow[j].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::Pick { x, idx } => {
                if let Some(dx) = acc!(*x) {
                    for (&i, &gv) in idx.iter().zip(g) {
                        dx[i] += gv;
                    }
                }
            }
            Op::Gelu(x) => {
                let (c, a) = (lit::<T>(GELU_C), lit::<T>(GELU_A));
                let (half, three) = (lit::<T>(0.5), lit::<T>(3.0));
                if let Some(dx) = acc!(*x) {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(val(*x)) {
                        let th = (c * (v + a * v * v * v)).tanh();
                        let dudx = c * (T::one() + three * a * v * v);
                        let deriv = half * (T::one() + th) + half * v * (T::one() - th * th) * dudx;
                        *d += gv * deriv;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.last_dim();
                let nf = count::<T>(n);
                let gam = val(*gamma);
                if let Some(dgamma) = acc!(*gamma) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((d, &gv), &h) in dgamma.iter_mut().zip(grow).zip(hrow) {
                            *d += gv * h;
                        }
                    }
                }
                if let Some(dbeta) = acc!(*beta) {
                    for grow in g.chunks(n) {
                        kernels::add_assign(dbeta, grow);
                    }
                }
                if let Some(dx) = acc!(*x) {
                    for (r, (drow, grow)) in dx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        let hrow = &xhat[r * n..(r + 1) * n];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..n {
                            let dh = grow[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh /= nf;
                        mean_dh_h /= nf;
                        for j in 0..n {
                            let dh = grow[j] * gam[j];
                            drow[j] += rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = node.value.last_dim();
                if let Some(dt) = acc!(*table) {
                    for (&id, grow) in ids.iter().zip(g.chunks(d)) {
                        kernels::add_assign(&mut dt[id * d..(id + 1) * d], grow);
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let n = node.value.last_dim();
                if let Some(dx) = acc!(*x) {
                    for (r, (drow, grow)) in dx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        let yrow = &y[r * n..(r + 1) * n];
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += (gv - yv * dot) / norms[r];
                        }
                    }
                }
            }
        }
    }
}
