//! Wengert tape: every op is executed eagerly and recorded with references to
//! its parents. `backward` replays the record in reverse.

use super::tensor::{Real, Tensor};
use super::AutodiffError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMulT { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: F },
    RowScale { x: Var, s: Var },
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { x: Var, start: usize },
    Reshape { x: Var },
    MeanAxis { x: Var, axis: usize },
    Sum { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Exp { x: Var },
    Ln { x: Var },
    CosineRows { x: Var, v: Var },
    SoftmaxPair { a: Var, b: Var, tau: Var },
    SoftmaxRows { x: Var },
    WeightedMean { values: Var, weights: Var },
    Bce { s: Var, targets: Vec<F>, weights: Vec<F>, eps: F },
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Ordered op record. Node order is execution order, which is a valid
/// topological order for the reverse sweep.
#[derive(Debug, Clone, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Sign of every element fed to a recorded `relu`, in recording order.
    pub fn relu_signs(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { x } => Some(&self.nodes[x.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|&v| v > F::zero()))
            .collect()
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// `y = x·W + b`. A 1-D `x` of length `k` is treated as a single row and
    /// yields a 1-D output.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || xs.is_empty() || xs.len() > 2 {
            return Err(mismatch("linear", format!("x {:?}, W {:?}", xs, ws)));
        }
        let (n, k) = if xs.len() == 1 { (1, xs[0]) } else { (xs[0], xs[1]) };
        let m = ws[1];
        if ws[0] != k {
            return Err(mismatch("linear", format!("x {:?}, W {:?}", xs, ws)));
        }
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(mismatch("linear", format!("bias {:?}, expected [{}]", self.shape(b), m)));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![F::zero(); n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let xip = xv[i * k + p];
                if xip == F::zero() {
                    continue;
                }
                let wrow = &wv[p * m..(p + 1) * m];
                for (o, &wj) in orow.iter_mut().zip(wrow) {
                    *o = *o + xip * wj;
                }
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(m) {
                for (o, &bj) in row.iter_mut().zip(bv) {
                    *o = *o + bj;
                }
            }
        }
        let shape = if xs.len() == 1 { vec![m] } else { vec![n, m] };
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push("linear", Tensor::new(shape, out)?, Op::Linear { x, w, b }, &parents)
    }

    /// `a·bᵀ` for `a: [n×k]`, `b: [m×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return Err(mismatch("matmul_t", format!("{:?} · {:?}ᵀ", as_, bs)));
        }
        let (n, k, m) = (as_[0], as_[1], bs[0]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![F::zero(); n * m];
        for i in 0..n {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..m {
                let brow = &bv[j * k..(j + 1) * k];
                out[i * m + j] = arow.iter().zip(brow).map(|(&p, &q)| p * q).sum();
            }
        }
        self.push("matmul_t", Tensor::new(vec![n, m], out)?, Op::MatMulT { a, b }, &[a, b])
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var, AutodiffError> {
        self.same_shape(name, a, b)?;
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("add", a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("sub", a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("mul", a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var, AutodiffError> {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, Op::Scale { x, c }, &[x])
    }

    /// Multiplies row `i` of `x: [n×d]` by `s[i]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var, AutodiffError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || self.shape(s) != [xs[0]] {
            return Err(mismatch("row_scale", format!("x {:?}, s {:?}", xs, self.shape(s))));
        }
        let d = xs[1];
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (row, &si) in data.chunks_mut(d).zip(sv) {
            for v in row {
                *v = *v * si;
            }
        }
        self.push("row_scale", Tensor::new(xs, data)?, Op::RowScale { x, s }, &[x, s])
    }

    /// Concatenates 1-D tensors end to end (`axis` 0), or 2-D tensors by rows
    /// (`axis` 0) or columns (`axis` 1).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or_else(|| mismatch("concat", "no inputs".into()))?;
        let rank = self.shape(*first).len();
        let out = match (rank, axis) {
            (1, 0) => {
                let mut data = Vec::new();
                for p in parts {
                    if self.shape(*p).len() != 1 {
                        return Err(mismatch("concat", "mixed ranks".into()));
                    }
                    data.extend_from_slice(self.value(*p).data());
                }
                Tensor::vector(data)
            }
            (2, 0) => {
                let c = self.shape(*first)[1];
                let mut data = Vec::new();
                let mut r = 0;
                for p in parts {
                    let s = self.shape(*p);
                    if s.len() != 2 || s[1] != c {
                        return Err(mismatch("concat", format!("{:?} vs cols {}", s, c)));
                    }
                    r += s[0];
                    data.extend_from_slice(self.value(*p).data());
                }
                Tensor::new(vec![r, c], data)?
            }
            (2, 1) => {
                let r = self.shape(*first)[0];
                let mut widths = Vec::with_capacity(parts.len());
                for p in parts {
                    let s = self.shape(*p);
                    if s.len() != 2 || s[0] != r {
                        return Err(mismatch("concat", format!("{:?} vs rows {}", s, r)));
                    }
                    widths.push(s[1]);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(r * total);
                for i in 0..r {
                    for p in parts {
                        data.extend_from_slice(self.value(*p).row(i));
                    }
                }
                Tensor::new(vec![r, total], data)?
            }
            _ => return Err(mismatch("concat", format!("rank {} axis {}", rank, axis))),
        };
        self.push("concat", out, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || start + len > xs[1] {
            return Err(mismatch("slice_cols", format!("{:?}[.., {}..{}]", xs, start, start + len)));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xs[0] * len);
        for i in 0..xs[0] {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        self.push("slice_cols", Tensor::new(vec![xs[0], len], data)?, Op::SliceCols { x, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let out = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", out, Op::Reshape { x }, &[x])
    }

    /// Mean of a 2-D tensor over `axis` (0: across rows, 1: across columns).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || axis > 1 || xs[axis] == 0 {
            return Err(mismatch("mean_axis", format!("{:?} axis {}", xs, axis)));
        }
        let (r, c) = (xs[0], xs[1]);
        let xv = self.value(x);
        let out = if axis == 0 {
            let inv = F::one() / F::from_f64(r as f64);
            let mut acc = vec![F::zero(); c];
            for i in 0..r {
                for (a, &v) in acc.iter_mut().zip(xv.row(i)) {
                    *a = *a + v;
                }
            }
            acc.iter().map(|&a| a * inv).collect()
        } else {
            let inv = F::one() / F::from_f64(c as f64);
            (0..r).map(|i| xv.row(i).iter().copied().sum::<F>() * inv).collect()
        };
        self.push("mean_axis", Tensor::vector(out), Op::MeanAxis { x, axis }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let out = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        self.push("relu", out, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid { x }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let out = self.value(x).map(F::exp);
        self.push("exp", out, Op::Exp { x }, &[x])
    }

    pub fn ln(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let out = self.value(x).map(F::ln);
        self.push("ln", out, Op::Ln { x }, &[x])
    }

    /// Cosine similarity of every row of `x` against `v`. A 1-D `x` is one row.
    pub fn cosine_rows(&mut self, x: Var, v: Var) -> Result<Var, AutodiffError> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap_or(&0);
        if xs.is_empty() || xs.len() > 2 || self.shape(v) != [d] {
            return Err(mismatch("cosine", format!("x {:?}, v {:?}", xs, self.shape(v))));
        }
        let vv = self.value(v);
        let vn = vv.norm();
        if vn == F::zero() {
            return Err(AutodiffError::DegenerateVector { op: "cosine" });
        }
        let xv = self.value(x);
        let n = xv.rows();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let xn = row.iter().map(|&a| a * a).sum::<F>().sqrt();
            if xn == F::zero() {
                return Err(AutodiffError::DegenerateVector { op: "cosine" });
            }
            let dot: F = row.iter().zip(vv.data()).map(|(&a, &b)| a * b).sum();
            out.push(dot / (xn * vn));
        }
        self.push("cosine", Tensor::vector(out), Op::CosineRows { x, v }, &[x, v])
    }

    /// Scalar cosine similarity of two vectors.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.shape(a).len() != 1 {
            return Err(mismatch("cosine", format!("expected a vector, got {:?}", self.shape(a))));
        }
        let c = self.cosine_rows(a, b)?;
        self.reshape(c, &[])
    }

    /// Elementwise `exp(a/τ) / (exp(a/τ) + exp(b/τ))` with max subtraction.
    /// `tau` is a scalar node so it can optionally be trained.
    pub fn softmax_pair(&mut self, a: Var, b: Var, tau: Var) -> Result<Var, AutodiffError> {
        self.same_shape("softmax_pair", a, b)?;
        if self.value(tau).numel() != 1 {
            return Err(mismatch("softmax_pair", format!("tau {:?}", self.shape(tau))));
        }
        let t = self.value(tau).item();
        if !(t > F::zero()) {
            return Err(AutodiffError::InvalidArgument(format!("temperature must be positive, got {}", t)));
        }
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| softmax_pair_value(x, y, t))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push("softmax_pair", out, Op::SoftmaxPair { a, b, tau }, &[a, b, tau])
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(mismatch("softmax_rows", format!("{:?}", xs)));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.numel());
        for i in 0..xs[0] {
            let row = xv.row(i);
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let e: Vec<F> = row.iter().map(|&v| (v - mx).exp()).collect();
            let z: F = e.iter().copied().sum();
            data.extend(e.into_iter().map(|v| v / z));
        }
        self.push("softmax_rows", Tensor::new(xs, data)?, Op::SoftmaxRows { x }, &[x])
    }

    /// `Σᵢ wᵢ·valuesᵢ / Σᵢ wᵢ` over the rows of `values: [n×d]`.
    pub fn weighted_mean(&mut self, values: Var, weights: Var) -> Result<Var, AutodiffError> {
        let vs = self.shape(values).to_vec();
        if vs.len() != 2 || self.shape(weights) != [vs[0]] {
            return Err(mismatch("weighted_mean", format!("values {:?}, weights {:?}", vs, self.shape(weights))));
        }
        let wv = self.value(weights).data();
        let total: F = wv.iter().copied().sum();
        if !(total > F::zero()) {
            return Err(AutodiffError::DegenerateWeights);
        }
        let vv = self.value(values);
        let mut acc = vec![F::zero(); vs[1]];
        for (i, &w) in wv.iter().enumerate() {
            for (a, &v) in acc.iter_mut().zip(vv.row(i)) {
                *a = *a + w * v;
            }
        }
        let out = Tensor::vector(acc.into_iter().map(|a| a / total).collect());
        self.push("weighted_mean", out, Op::WeightedMean { values, weights }, &[values, weights])
    }

    /// Weighted binary cross entropy `(1/n) Σ wᵢ·[−yᵢ ln sᵢ − (1−yᵢ) ln(1−sᵢ)]`
    /// with probabilities clamped to `[eps, 1−eps]`.
    pub fn bce(&mut self, s: Var, targets: &[F], weights: &[F], eps: F) -> Result<Var, AutodiffError> {
        let n = self.value(s).numel();
        if self.shape(s).len() != 1 || targets.len() != n || weights.len() != n || n == 0 {
            return Err(mismatch("bce", format!("scores {:?}, {} targets, {} weights", self.shape(s), targets.len(), weights.len())));
        }
        let sv = self.value(s).data();
        let mut loss = F::zero();
        for i in 0..n {
            let c = clamp(sv[i], eps, F::one() - eps);
            let y = targets[i];
            loss = loss + weights[i] * (-(y * c.ln()) - (F::one() - y) * (F::one() - c).ln());
        }
        loss = loss / F::from_f64(n as f64);
        let op = Op::Bce { s, targets: targets.to_vec(), weights: weights.to_vec(), eps };
        self.push("bce", Tensor::scalar(loss), op, &[s])
    }

    /// Reverse sweep from a scalar `loss`. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), F::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<(), AutodiffError> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (k, m) = (wv.shape()[0], wv.shape()[1]);
                let n = xv.numel() / k;
                let gd = g.data();
                if self.requires_grad(*x) {
                    let mut gx = vec![F::zero(); n * k];
                    for i in 0..n {
                        let grow = &gd[i * m..(i + 1) * m];
                        for p in 0..k {
                            let wrow = &wv.data()[p * m..(p + 1) * m];
                            gx[i * k + p] = grow.iter().zip(wrow).map(|(&a, &b)| a * b).sum();
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![F::zero(); k * m];
                    for i in 0..n {
                        let grow = &gd[i * m..(i + 1) * m];
                        for p in 0..k {
                            let xip = xv.data()[i * k + p];
                            if xip == F::zero() {
                                continue;
                            }
                            for (o, &gj) in gw[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o = *o + xip * gj;
                            }
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(vec![k, m], gw)?);
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut gb = vec![F::zero(); m];
                        for row in gd.chunks(m) {
                            for (o, &v) in gb.iter_mut().zip(row) {
                                *o = *o + v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::vector(gb));
                    }
                }
            }
            Op::MatMulT { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                if self.requires_grad(*a) {
                    let mut ga = vec![F::zero(); n * k];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g.data()[i * m + j];
                            for (o, &bv) in ga[i * k..(i + 1) * k].iter_mut().zip(bv.row(j)) {
                                *o = *o + gij * bv;
                            }
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(vec![n, k], ga)?);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![F::zero(); m * k];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g.data()[i * m + j];
                            for (o, &av) in gb[j * k..(j + 1) * k].iter_mut().zip(av.row(i)) {
                                *o = *o + gij * av;
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![m, k], gb)?);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d)?);
                }
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::RowScale { x, s } => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let d = xv.cols();
                if self.requires_grad(*x) {
                    let mut gx = g.data().to_vec();
                    for (row, &si) in gx.chunks_mut(d).zip(sv.data()) {
                        for v in row {
                            *v = *v * si;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                }
                if self.requires_grad(*s) {
                    let gs = (0..xv.rows())
                        .map(|i| g.row(i).iter().zip(xv.row(i)).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *s, Tensor::vector(gs));
                }
            }
            Op::Concat { parts, axis } => {
                let rank = out.shape().len();
                if rank == 1 || *axis == 0 {
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let n = pv.numel();
                        let slice = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        self.accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), slice)?);
                    }
                } else {
                    let mut col = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let (r, w) = (pv.shape()[0], pv.shape()[1]);
                        let mut gp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            gp.extend_from_slice(&g.row(i)[col..col + w]);
                        }
                        col += w;
                        self.accumulate(grads, *p, Tensor::new(vec![r, w], gp)?);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (r, c) = (xv.shape()[0], xv.shape()[1]);
                let len = out.shape()[1];
                let mut gx = vec![F::zero(); r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, Tensor::new(vec![r, c], gx)?);
            }
            Op::Reshape { x } => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshaped(&shape)?);
            }
            Op::MeanAxis { x, axis } => {
                let xv = self.value(*x);
                let (r, c) = (xv.shape()[0], xv.shape()[1]);
                let mut gx = vec![F::zero(); r * c];
                if *axis == 0 {
                    let inv = F::one() / F::from_f64(r as f64);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = g.data()[j] * inv;
                        }
                    }
                } else {
                    let inv = F::one() / F::from_f64(c as f64);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = g.data()[i] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![r, c], gx)?);
            }
            Op::Sum { x } => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let d = g.data().iter().zip(xv.data()).map(|(&gv, &v)| if v > F::zero() { gv } else { F::zero() }).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Sigmoid { x } => {
                let d = g.data().iter().zip(out.data()).map(|(&gv, &y)| gv * y * (F::one() - y)).collect();
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::Exp { x } => {
                let d = g.data().iter().zip(out.data()).map(|(&gv, &y)| gv * y).collect();
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::Ln { x } => {
                let xv = self.value(*x);
                let d = g.data().iter().zip(xv.data()).map(|(&gv, &v)| gv / v).collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::CosineRows { x, v } => {
                let (xv, vv) = (self.value(*x), self.value(*v));
                let d = vv.numel();
                let vn = vv.norm();
                let mut gx = vec![F::zero(); xv.numel()];
                let mut gvv = vec![F::zero(); d];
                for i in 0..xv.rows() {
                    let row = xv.row(i);
                    let xn = row.iter().map(|&a| a * a).sum::<F>().sqrt();
                    let y = out.data()[i];
                    let gi = g.data()[i];
                    let inv = F::one() / (xn * vn);
                    for k in 0..d {
                        gx[i * d + k] = gi * (vv.data()[k] * inv - y * row[k] / (xn * xn));
                        gvv[k] = gvv[k] + gi * (row[k] * inv - y * vv.data()[k] / (vn * vn));
                    }
                }
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                }
                self.accumulate(grads, *v, Tensor::vector(gvv));
            }
            Op::SoftmaxPair { a, b, tau } => {
                let t = self.value(*tau).item();
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = out.numel();
                let mut ga = Vec::with_capacity(n);
                let mut gt = F::zero();
                for i in 0..n {
                    let p = out.data()[i];
                    let dp = g.data()[i] * p * (F::one() - p);
                    ga.push(dp / t);
                    gt = gt - dp * (av.data()[i] - bv.data()[i]) / (t * t);
                }
                let shape = out.shape().to_vec();
                self.accumulate(grads, *a, Tensor::new(shape.clone(), ga.clone())?);
                self.accumulate(grads, *b, Tensor::new(shape, ga.into_iter().map(|v| -v).collect())?);
                let tshape = self.shape(*tau).to_vec();
                self.accumulate(grads, *tau, Tensor::new(tshape, vec![gt])?);
            }
            Op::SoftmaxRows { x } => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut gx = vec![F::zero(); r * c];
                for i in 0..r {
                    let y = out.row(i);
                    let gr = g.row(i);
                    let dot: F = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = y[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![r, c], gx)?);
            }
            Op::WeightedMean { values, weights } => {
                let (vv, wv) = (self.value(*values), self.value(*weights));
                let total: F = wv.data().iter().copied().sum();
                let (n, d) = (vv.shape()[0], vv.shape()[1]);
                if self.requires_grad(*values) {
                    let mut gvals = Vec::with_capacity(n * d);
                    for &w in wv.data() {
                        gvals.extend(g.data().iter().map(|&gv| gv * w / total));
                    }
                    self.accumulate(grads, *values, Tensor::new(vec![n, d], gvals)?);
                }
                if self.requires_grad(*weights) {
                    let g_dot_r: F = g.data().iter().zip(out.data()).map(|(&a, &b)| a * b).sum();
                    let gw = (0..n)
                        .map(|i| {
                            let g_dot_v: F = g.data().iter().zip(vv.row(i)).map(|(&a, &b)| a * b).sum();
                            (g_dot_v - g_dot_r) / total
                        })
                        .collect();
                    self.accumulate(grads, *weights, Tensor::vector(gw));
                }
            }
            Op::Bce { s, targets, weights, eps } => {
                let sv = self.value(*s);
                let n = sv.numel();
                let scale = g.item() / F::from_f64(n as f64);
                let hi = F::one() - *eps;
                let gs = (0..n)
                    .map(|i| {
                        let p = sv.data()[i];
                        if p < *eps || p > hi {
                            return F::zero();
                        }
                        let y = targets[i];
                        scale * weights[i] * (-y / p + (F::one() - y) / (F::one() - p))
                    })
                    .collect();
                self.accumulate(grads, *s, Tensor::vector(gs));
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softmax_pair_value<F: Real>(a: F, b: F, tau: F) -> F {
    let (x, y) = (a / tau, b / tau);
    let m = x.max(y);
    let ex = (x - m).exp();
    let ey = (y - m).exp();
    ex / (ex + ey)
}

fn clamp<F: Real>(v: F, lo: F, hi: F) -> F {
    v.max(lo).min(hi)
}
