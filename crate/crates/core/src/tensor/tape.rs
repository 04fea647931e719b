use rand::Rng;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    /// Gradient passes through unchanged (reshape, additive constant mask).
    Alias(Var),
    MatMul(MatMul),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Sigmoid(Var),
    Relu(Var),
    Normalize {
        x: Var,
        inv_std: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Narrow {
        x: Var,
        outer: usize,
        chunk: usize,
        start: usize,
        len: usize,
    },
    Permute {
        x: Var,
        inverse: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Blend {
        r: Var,
        a: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
        weights: Vec<T>,
        smoothing: T,
    },
    Sum(Var),
}

#[derive(Debug, Clone, Copy)]
struct MatMul {
    a: Var,
    b: Var,
    ta: bool,
    tb: bool,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

impl MatMul {
    fn a_strides(&self) -> (isize, isize) {
        if self.ta {
            (1, self.m as isize)
        } else {
            (self.k as isize, 1)
        }
    }

    fn b_strides(&self) -> (isize, isize) {
        if self.tb {
            (1, self.k as isize)
        } else {
            (self.n as isize, 1)
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardReport {
    /// Number of recorded operations whose gradient was propagated.
    pub visited: usize,
}

/// Ordered record of executed operations.
///
/// Values are computed eagerly when an operation is recorded, so the node list
/// is always in topological order and a reverse sweep differentiates it.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    let (last_extent, last_stride) = (out_shape[last], strides[last]);
    loop {
        for j in 0..last_extent {
            out.push(data[offset + j * last_stride]);
        }
        // advance the odometer over all but the last output axis
        let mut d = last;
        loop {
            if d == 0 {
                return (out, out_shape);
            }
            d -= 1;
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name.to_string() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        check_same(name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(name, value, op, rg)
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

    fn row_op(&mut self, name: &'static str, x: Var, row: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(row) != [n] {
            return Err(Error::shape(
                name,
                format!(
                    "row {:?} does not match last extent of {:?}",
                    self.shape(row),
                    self.shape(x)
                ),
            ));
        }
        let r = self.value(row).data();
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.data().len());
        for chunk in xv.data().chunks_exact(n) {
            data.extend(chunk.iter().zip(r).map(|(&a, &b)| f(a, b)));
        }
        Ok((Tensor::new(xv.shape().to_vec(), data)?, self.rg(&[x, row])))
    }

    /// `x + row`, broadcasting `row` over all leading axes.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (value, rg) = self.row_op("add_row", x, row, |a, b| a + b)?;
        self.push("add_row", value, Op::AddRow(x, row), rg)
    }

    /// `x ⊙ row`, broadcasting `row` over all leading axes.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (value, rg) = self.row_op("mul_row", x, row, |a, b| a * b)?;
        self.push("mul_row", value, Op::MulRow(x, row), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v * c).collect())?;
        let rg = self.rg(&[x]);
        self.push("scale", value, Op::Scale(x, c), rg)
    }

    /// Adds a constant that is broadcast over axis 1 of `x` (the head axis of
    /// attention scores). `constant` has the shape of `x` with axis 1 removed.
    pub fn add_broadcast_constant(&mut self, x: Var, constant: &Tensor<T>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut expected = shape.clone();
        if expected.len() < 2 {
            return Err(Error::shape("add_mask", format!("rank of {shape:?} below 2")));
        }
        expected.remove(1);
        if constant.shape() != expected.as_slice() {
            return Err(Error::shape(
                "add_mask",
                format!("constant {:?} does not broadcast to {shape:?}", constant.shape()),
            ));
        }
        let block: usize = shape[2..].iter().product();
        let xv = self.value(x).data();
        let c = constant.data();
        let mut data = Vec::with_capacity(xv.len());
        for (i, chunk) in xv.chunks_exact(block).enumerate() {
            let batch = i / shape[1];
            let cb = &c[batch * block..(batch + 1) * block];
            data.extend(chunk.iter().zip(cb).map(|(&a, &b)| a + b));
        }
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        self.push("add_mask", value, Op::Alias(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        self.push("reshape", value, Op::Alias(x), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    /// Batched matrix product over the last two axes, optionally transposing
    /// either operand. A rank-2 `b` is shared across every leading index of `a`.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::shape("matmul", format!("cannot multiply {sa:?} by {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != kb {
            return Err(mismatch());
        }
        let lead_a = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if !shared_b && lead_a != &sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let mut out_shape = lead_a.to_vec();
        out_shape.extend([m, n]);
        let mut mm = MatMul {
            a,
            b,
            ta,
            tb,
            batch: lead_a.iter().product(),
            m,
            k,
            n,
            shared_b,
        };
        if shared_b && !ta {
            // fold the leading axes of `a` into its row count
            mm.m *= mm.batch;
            mm.batch = 1;
        }
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (a_step, b_step, c_step) = (mm.m * mm.k, if shared_b { 0 } else { mm.k * mm.n }, mm.m * mm.n);
        for i in 0..mm.batch {
            T::gemm(
                mm.m,
                mm.k,
                mm.n,
                &av[i * a_step..],
                mm.a_strides(),
                &bv[i * b_step..],
                mm.b_strides(),
                T::zero(),
                &mut out[i * c_step..],
                (mm.n as isize, 1),
            );
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[a, b]);
        self.push("matmul", value, Op::MatMul(mm), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xv[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        self.push("softmax", value, Op::Softmax { x, outer, len, inner }, rg)
    }

    /// Logistic function. Saturated outputs are held inside the open unit
    /// interval at the nearest representable value.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let hi = T::one() - T::epsilon() / T::of(2.0);
        let lo = T::min_positive_value();
        let data = xv.data().iter().map(|&v| sigmoid(v).max(lo).min(hi)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push("sigmoid", value, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push("relu", value, Op::Relu(x), rg)
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine).
    pub fn normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let nf = T::of(n as f64);
        let eps = T::of(eps);
        let mut out = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.numel() / n);
        for row in xv.data().chunks_exact(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            out.extend(row.iter().map(|&v| (v - mean) * inv));
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push("layer_norm", value, Op::Normalize { x, inv_std }, rg)
    }

    /// Row lookup: `table` is `[rows, d]`, the result is `lead + [d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("gather", format!("table must be rank 2, got {ts:?}")));
        }
        if lead.iter().product::<usize>() != ids.len() {
            return Err(Error::shape(
                "gather",
                format!("{} ids do not fill leading shape {lead:?}", ids.len()),
            ));
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for table with {rows} rows"
            )));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[table]);
        self.push(
            "gather",
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        let mut chunks = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("cannot join {first:?} with {s:?}")));
            }
            shape[axis] += s[axis];
            chunks.push(s[axis..].iter().product::<usize>());
        }
        let outer: usize = first[..axis].iter().product();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for (&p, &c) in parts.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(p).data()[o * c..(o + 1) * c]);
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(parts);
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                chunks,
            },
            rg,
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} invalid on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let chunk = extent * inner;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * chunk + start * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[x]);
        self.push(
            "narrow",
            value,
            Op::Narrow {
                x,
                outer,
                chunk,
                start: start * inner,
                len: len * inner,
            },
            rg,
        )
    }

    /// Splits `x` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let extent = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("split", format!("axis {axis} out of range")))?;
        if sizes.iter().sum::<usize>() != extent {
            return Err(Error::shape(
                "split",
                format!("sizes {sizes:?} do not sum to extent {extent}"),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[x]);
        self.push("permute", value, Op::Permute { x, inverse }, rg)
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} must be below 1")));
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push("dropout", value, Op::Dropout { x, mask }, rg)
    }

    /// `r ⊙ a + (1 − r) ⊙ b`, held inside `[min(a, b), max(a, b)]` elementwise.
    pub fn blend(&mut self, r: Var, a: Var, b: Var) -> Result<Var> {
        check_same("blend", self.shape(r), self.shape(a))?;
        check_same("blend", self.shape(a), self.shape(b))?;
        let (rv, av, bv) = (self.value(r).data(), self.value(a).data(), self.value(b).data());
        let data = rv
            .iter()
            .zip(av.iter().zip(bv))
            .map(|(&r, (&a, &b))| {
                let mixed = r * a + (T::one() - r) * b;
                mixed.max(a.min(b)).min(a.max(b))
            })
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[r, a, b]);
        self.push("blend", value, Op::Blend { r, a, b }, rg)
    }

    /// Weighted cross-entropy of `logits` (`[rows, classes]`) against target
    /// ids: `sum_i weights[i] * CE_i`. Rows with zero weight are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64], smoothing: f64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || weights.len() != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "logits {shape:?} vs {} targets / {} weights",
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        let v = shape[1];
        if let Some(&bad) = targets
            .iter()
            .zip(weights)
            .find(|(&t, &w)| w != 0.0 && t >= v)
            .map(|(t, _)| t)
        {
            return Err(Error::InvalidArgument(format!(
                "target {bad} out of range for {v} classes"
            )));
        }
        let eps = T::of(smoothing);
        let off = eps / T::of(v as f64);
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for (i, row) in lv.chunks_exact(v).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&x| (x - max).exp()).sum();
            let log_z = max + total.ln();
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
            let w = T::of(weights[i]);
            if w == T::zero() {
                continue;
            }
            let mut row_loss = -(T::one() - eps) * (row[targets[i]] - log_z);
            if smoothing > 0.0 {
                row_loss -= off * row.iter().map(|&x| x - log_z).sum::<T>();
            }
            loss += w * row_loss;
        }
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                weights: weights.iter().map(|&w| T::of(w)).collect(),
                smoothing: eps,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Gradient of the last `backward` target with respect to `v`.
    ///
    /// `None` when `v` does not require a gradient or no backward pass ran;
    /// zeros when `v` requires a gradient but does not influence the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        if !self.backward_done || !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.shape(v).to_vec();
        Some(match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        })
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn backward(&mut self, loss: Var) -> Result<BackwardReport> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            visited += 1;
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        self.backward_done = true;
        Ok(BackwardReport { visited })
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn acc_with(&mut self, v: Var, f: impl Fn(usize) -> T) {
        if let Some(buf) = self.acc(v) {
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot += f(i);
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Move the op out so the match can borrow `self` mutably; it is restored below.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_with(*a, |j| g[j]);
                self.acc_with(*b, |j| g[j]);
            }
            Op::Sub(a, b) => {
                self.acc_with(*a, |j| g[j]);
                self.acc_with(*b, |j| -g[j]);
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).clone();
                let av = self.value(*a).clone();
                self.acc_with(*a, |j| g[j] * bv.data()[j]);
                self.acc_with(*b, |j| g[j] * av.data()[j]);
            }
            Op::AddRow(x, row) => {
                self.acc_with(*x, |j| g[j]);
                if let Some(buf) = self.acc(*row) {
                    let n = buf.len();
                    for chunk in g.chunks_exact(n) {
                        for (s, &v) in buf.iter_mut().zip(chunk) {
                            *s += v;
                        }
                    }
                }
            }
            Op::MulRow(x, row) => {
                let rv = self.value(*row).clone();
                let xv = self.value(*x).clone();
                let n = rv.numel();
                self.acc_with(*x, |j| g[j] * rv.data()[j % n]);
                if let Some(buf) = self.acc(*row) {
                    for (gc, xc) in g.chunks_exact(n).zip(xv.data().chunks_exact(n)) {
                        for ((s, &gv), &xv) in buf.iter_mut().zip(gc).zip(xc) {
                            *s += gv * xv;
                        }
                    }
                }
            }
            Op::Scale(x, c) => self.acc_with(*x, |j| g[j] * *c),
            Op::Alias(x) => self.acc_with(*x, |j| g[j]),
            Op::MatMul(mm) => self.matmul_backward(mm, g),
            Op::Softmax { x, outer, len, inner } => {
                let y = self.nodes[i].value.clone();
                let y = y.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                if let Some(buf) = self.acc(*x) {
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + k;
                            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                buf[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.clone();
                self.acc_with(*x, |j| {
                    let s = y.data()[j];
                    g[j] * s * (T::one() - s)
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).clone();
                self.acc_with(*x, |j| if xv.data()[j] > T::zero() { g[j] } else { T::zero() });
            }
            Op::Normalize { x, inv_std } => {
                let y = self.nodes[i].value.clone();
                let n = *y.shape().last().unwrap();
                let nf = T::of(n as f64);
                if let Some(buf) = self.acc(*x) {
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let span = r * n..(r + 1) * n;
                        let (gr, yr) = (&g[span.clone()], &y.data()[span.clone()]);
                        let mean_g = gr.iter().copied().sum::<T>() / nf;
                        let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for ((s, &gv), &yv) in buf[span].iter_mut().zip(gr).zip(yr) {
                            *s += inv * (gv - mean_g - yv * mean_gy);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(buf) = self.acc(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (s, &v) in buf[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *s += v;
                        }
                    }
                }
            }
            Op::Concat { parts, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&p, &c) in parts.iter().zip(chunks) {
                    if let Some(buf) = self.acc(p) {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + c];
                            for (s, &v) in buf[o * c..(o + 1) * c].iter_mut().zip(src) {
                                *s += v;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Narrow {
                x,
                outer,
                chunk,
                start,
                len,
            } => {
                if let Some(buf) = self.acc(*x) {
                    for o in 0..*outer {
                        let dst = &mut buf[o * chunk + start..o * chunk + start + len];
                        for (s, &v) in dst.iter_mut().zip(&g[o * len..(o + 1) * len]) {
                            *s += v;
                        }
                    }
                }
            }
            Op::Permute { x, inverse } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (back, _) = permute_data(g, &out_shape, inverse);
                self.acc_with(*x, |j| back[j]);
            }
            Op::Dropout { x, mask } => self.acc_with(*x, |j| g[j] * mask[j]),
            Op::Blend { r, a, b } => {
                let (rv, av, bv) = (self.value(*r).clone(), self.value(*a).clone(), self.value(*b).clone());
                let (rv, av, bv) = (rv.data(), av.data(), bv.data());
                self.acc_with(*r, |j| g[j] * (av[j] - bv[j]));
                self.acc_with(*a, |j| g[j] * rv[j]);
                self.acc_with(*b, |j| g[j] * (T::one() - rv[j]));
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                weights,
                smoothing,
            } => {
                let v = self.shape(*logits)[1];
                let off = *smoothing / T::of(v as f64);
                let top = g[0];
                if let Some(buf) = self.acc(*logits) {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let scale = top * w;
                        for c in 0..v {
                            let q = if c == t { T::one() - *smoothing + off } else { off };
                            buf[r * v + c] += scale * (probs[r * v + c] - q);
                        }
                    }
                }
            }
            Op::Sum(x) => self.acc_with(*x, |_| g[0]),
        }
        self.nodes[i].op = op;
    }

    fn matmul_backward(&mut self, mm: &MatMul, g: &[T]) {
        let (m, k, n) = (mm.m, mm.k, mm.n);
        let a_step = m * k;
        let b_step = if mm.shared_b { 0 } else { k * n };
        let c_step = m * n;
        let (sa, sb) = (mm.a_strides(), mm.b_strides());
        if self.nodes[mm.a.0].requires_grad {
            let bv = self.value(mm.b).clone();
            let buf = self.acc(mm.a).unwrap();
            for i in 0..mm.batch {
                // dA' = dC · op(B)ᵀ, written through A's storage strides
                T::gemm(
                    m,
                    n,
                    k,
                    &g[i * c_step..],
                    (n as isize, 1),
                    &bv.data()[i * b_step..],
                    (sb.1, sb.0),
                    T::one(),
                    &mut buf[i * a_step..],
                    sa,
                );
            }
        }
        if self.nodes[mm.b.0].requires_grad {
            let av = self.value(mm.a).clone();
            let buf = self.acc(mm.b).unwrap();
            for i in 0..mm.batch {
                // dB' = op(A)ᵀ · dC
                T::gemm(
                    k,
                    m,
                    n,
                    &av.data()[i * a_step..],
                    (sa.1, sa.0),
                    &g[i * c_step..],
                    (n as isize, 1),
                    T::one(),
                    &mut buf[i * b_step..],
                    sb,
                );
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
