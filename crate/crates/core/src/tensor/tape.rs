use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{shape_numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Bmm(Var, Var),
    BmmT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    AddBroadcast(Var, Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Reshape(Var),
    Permute {
        x: Var,
        map: Vec<usize>,
    },
    PrependToken {
        x: Var,
        token: Var,
    },
    SelectToken {
        x: Var,
        index: usize,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a computation for reverse-mode differentiation.
///
/// A tape is single-use: build the forward graph, call [`Tape::backward`]
/// once per root you need gradients for, then drop it.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

/// GELU, tanh approximation:
/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(SQRT_2_OVER_PI);
    let k = T::from_f64(GELU_COEFF);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(SQRT_2_OVER_PI);
    let k = T::from_f64(GELU_COEFF);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

/// Per-row `logsumexp(row) - row[label]` without recording anything.
pub fn per_sample_cross_entropy<T: Scalar>(
    logits: &[T],
    classes: usize,
    labels: &[usize],
) -> Result<Vec<T>> {
    if classes == 0 || logits.len() != classes * labels.len() {
        return Err(Error::shape(format!(
            "logits of length {} for {} labels over {classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    labels
        .iter()
        .zip(logits.chunks(classes))
        .map(|(&y, row)| {
            if y >= classes {
                return Err(Error::Index(format!("label {y} outside [0, {classes})")));
            }
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            Ok(lse - row[y])
        })
        .collect()
}

fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel = shape_numel(shape);
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        map.push(off);
        for j in (0..rank).rev() {
            idx[j] += 1;
            off += strides[j];
            if idx[j] < out_shape[j] {
                break;
            }
            off -= strides[j] * out_shape[j];
            idx[j] = 0;
        }
    }
    map
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape_numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Copies a tensor onto the tape; it receives a gradient iff it
    /// `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape values are well-formed")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    /// `a[m×k] · b[n×k]ᵀ`, i.e. a linear layer with weight `b`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape(format!("matmul_t {sa:?} x {sb:?}ᵀ")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMulT(a, b)))
    }

    /// Batched `a[b×m×k] · b[b×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape(format!("bmm {sa:?} x {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bs * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..bs {
            gemm_nn(
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![bs, m, n], out, rg, Op::Bmm(a, b)))
    }

    /// Batched `a[b×m×k] · b[b×n×k]ᵀ`.
    pub fn bmm_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::shape(format!("bmm_t {sa:?} x {sb:?}ᵀ")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![T::zero(); bs * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..bs {
            gemm_nt(
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * n * k..(i + 1) * n * k],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![bs, m, n], out, rg, Op::BmmT(a, b)))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{name} {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Sub(a, b)))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Scale(a, s))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Gelu(a))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape
    /// (bias rows, positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let vb = self.value(b);
        let nb = vb.len();
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb[i % nb])
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::AddBroadcast(a, b)))
    }

    /// Softmax along `axis`, stabilized by subtracting the running max.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index(format!("softmax axis {axis} for rank {}", shape.len())));
        }
        let outer = shape_numel(&shape[..axis]);
        let len = shape[axis];
        let inner = shape_numel(&shape[axis + 1..]);
        let v = self.value(x);
        let mut out = vec![T::zero(); v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(v[base + j * inner]));
                let mut total = T::zero();
                for j in 0..len {
                    let e = (v[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[base + j * inner] = out[base + j * inner] / total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, rg, Op::Softmax { x, outer, len, inner }))
    }

    /// Normalizes over the last axis with population variance, then applies
    /// `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("rank >= 1");
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape(format!(
                "layer_norm over {n} features with gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps <= T::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let v = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = v.len() / n;
        let nf = T::from_f64(n as f64);
        let mut xhat = vec![T::zero(); v.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); v.len()];
        for r in 0..rows {
            let row = &v[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape(format!(
                "cross_entropy logits {shape:?} with {} labels",
                labels.len()
            )));
        }
        let classes = shape[1];
        let per = per_sample_cross_entropy(self.value(logits), classes, labels)?;
        let loss = per.iter().copied().sum::<T>() / T::from_f64(labels.len() as f64);
        let mut probs = Vec::with_capacity(self.value(logits).len());
        for row in self.value(logits).chunks(classes) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            probs.extend(row.iter().map(|&v| (v - max).exp() / total));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.value(a).len() as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.is_empty() || shape.contains(&0) || shape_numel(shape) != self.value(a).len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {shape:?}",
                self.shape(a)
            )));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), out, rg, Op::Reshape(a)))
    }

    /// Reorders axes: output axis `j` is input axis `axes[j]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::Index(format!("permute {axes:?} of rank {}", shape.len())));
        }
        let map = permute_map(&shape, axes);
        let v = self.value(x);
        let out = map.iter().map(|&i| v[i]).collect();
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(out_shape, out, rg, Op::Permute { x, map }))
    }

    /// `x[b×t×d]`, `token[d]` → `[b×(t+1)×d]` with the token first.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.value(token).len() != s[2] {
            return Err(Error::shape(format!(
                "prepend token {:?} to {s:?}",
                self.shape(token)
            )));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let (vx, vt) = (self.value(x), self.value(token));
        let mut out = Vec::with_capacity(b * (t + 1) * d);
        for i in 0..b {
            out.extend_from_slice(vt);
            out.extend_from_slice(&vx[i * t * d..(i + 1) * t * d]);
        }
        let rg = self.rg(&[x, token]);
        Ok(self.push(vec![b, t + 1, d], out, rg, Op::PrependToken { x, token }))
    }

    /// `x[b×t×d]` → `[b×d]`, the `index`-th token of every sequence.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("select_token on {s:?}")));
        }
        if index >= s[1] {
            return Err(Error::Index(format!("token {index} of {}", s[1])));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let vx = self.value(x);
        let mut out = Vec::with_capacity(b * d);
        for i in 0..b {
            let off = (i * t + index) * d;
            out.extend_from_slice(&vx[off..off + d]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![b, d], out, rg, Op::SelectToken { x, index }))
    }

    /// Reverse pass from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.node(root).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.node(root).shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.node(root).requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        let n = &self.nodes[v.0];
        if !n.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n.value.len()]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(ga) = self.slot(grads, *a) {
                    gemm_nt(g, self.value(*b), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm_tn(self.value(*a), g, gb, m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if let Some(ga) = self.slot(grads, *a) {
                    gemm_nn(g, self.value(*b), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm_tn(g, self.value(*a), gb, m, n, k);
                }
            }
            Op::Bmm(a, b) => {
                let s = self.shape(*a);
                let (bs, m, k) = (s[0], s[1], s[2]);
                let n = self.shape(*b)[2];
                if let Some(ga) = self.slot(grads, *a) {
                    let vb = self.value(*b);
                    for i in 0..bs {
                        gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let va = self.value(*a);
                    for i in 0..bs {
                        gemm_tn(
                            &va[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::BmmT(a, b) => {
                let s = self.shape(*a);
                let (bs, m, k) = (s[0], s[1], s[2]);
                let n = self.shape(*b)[1];
                if let Some(ga) = self.slot(grads, *a) {
                    let vb = self.value(*b);
                    for i in 0..bs {
                        gemm_nn(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb[i * n * k..(i + 1) * n * k],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let va = self.value(*a);
                    for i in 0..bs {
                        gemm_tn(
                            &g[i * m * n..(i + 1) * m * n],
                            &va[i * m * k..(i + 1) * m * k],
                            &mut gb[i * n * k..(i + 1) * n * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, &d)| *o = *o - d);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let vb = self.value(*b);
                    for ((o, &d), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *o = *o + d * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let va = self.value(*a);
                    for ((o, &d), &x) in gb.iter_mut().zip(g).zip(va) {
                        *o = *o + d * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d * *s);
                }
            }
            Op::Gelu(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let va = self.value(*a);
                    for ((o, &d), &x) in ga.iter_mut().zip(g).zip(va) {
                        *o = *o + d * gelu_grad(x);
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let nb = gb.len();
                    for (i, &d) in g.iter().enumerate() {
                        gb[i % nb] = gb[i % nb] + d;
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let y = &node.value;
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * len * inner + i;
                            let dot = (0..*len)
                                .map(|j| g[base + j * inner] * y[base + j * inner])
                                .sum::<T>();
                            for j in 0..*len {
                                let p = base + j * inner;
                                gx[p] = gx[p] + y[p] * (g[p] - dot);
                            }
                        }
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
                let n = self.value(*gamma).len();
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (r, row) in g.chunks(n).enumerate() {
                        for j in 0..n {
                            gg[j] = gg[j] + row[j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for row in g.chunks(n) {
                        for j in 0..n {
                            gb[j] = gb[j] + row[j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let gam = self.value(*gamma);
                    let nf = T::from_f64(n as f64);
                    for (r, row) in g.chunks(n).enumerate() {
                        let h = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<T> = row.iter().zip(gam).map(|(&d, &w)| d * w).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / nf;
                        let mean_dh_h = dh.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for j in 0..n {
                            let p = r * n + j;
                            gx[p] = gx[p] + rstd[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if let Some(gl) = self.slot(grads, *logits) {
                    let classes = probs.len() / labels.len();
                    let w = g[0] / T::from_f64(labels.len() as f64);
                    for (r, &y) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let p = r * classes + c;
                            let onehot = if c == y { T::one() } else { T::zero() };
                            gl[p] = gl[p] + w * (probs[p] - onehot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|o| *o = *o + g[0]);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d);
                }
            }
            Op::Permute { x, map } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (&src, &d) in map.iter().zip(g) {
                        gx[src] = gx[src] + d;
                    }
                }
            }
            Op::PrependToken { x, token } => {
                let s = self.shape(*x);
                let (b, t, d) = (s[0], s[1], s[2]);
                if let Some(gt) = self.slot(grads, *token) {
                    for i in 0..b {
                        let off = i * (t + 1) * d;
                        for j in 0..d {
                            gt[j] = gt[j] + g[off + j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..b {
                        let src = &g[i * (t + 1) * d + d..(i + 1) * (t + 1) * d];
                        let dst = &mut gx[i * t * d..(i + 1) * t * d];
                        dst.iter_mut().zip(src).for_each(|(o, &v)| *o = *o + v);
                    }
                }
            }
            Op::SelectToken { x, index } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let s = self.shape(*x);
                    let (b, t, d) = (s[0], s[1], s[2]);
                    for i in 0..b {
                        let off = (i * t + index) * d;
                        for j in 0..d {
                            gx[off + j] = gx[off + j] + g[i * d + j];
                        }
                    }
                }
            }
        }
    }
}

/// Result of a reverse pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` for values that do not depend on any requires-grad leaf or
    /// were not reached from the root.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t` if `t` requires grad and `v` was
    /// reached.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        if !t.requires_grad() {
            return Ok(());
        }
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0]);

        let r = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let c = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(y), &[11.0]);

        let a = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        let b = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        let z = tape.leaf(&t(&[3], &[0.0; 3]));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let w = tape.leaf(&t(&[3], &[4.0, 5.0, 6.0]));
        let p = tape.mul(x, w).unwrap();
        assert_eq!(tape.value(p), &[4.0, 10.0, 18.0]);
        let zero = tape.leaf(&t(&[1], &[0.0]));
        let g = tape.gelu(zero);
        assert_eq!(tape.value(g), &[0.0]);
        let bad = tape.leaf(&t(&[2], &[0.0; 2]));
        assert!(matches!(tape.add(x, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
        let x = tape.leaf(&t(&[2], &[2f64.ln(), 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y)[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((tape.value(y)[1] - 1.0 / 3.0).abs() < 1e-12);
        let x = tape.leaf(&t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert!(tape.value(y).iter().all(|v| v.is_finite()));
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-12);
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let g = tape.leaf(&t(&[2], &[1.0, 1.0]));
        let b0 = tape.leaf(&t(&[2], &[0.0, 0.0]));
        let b = tape.leaf(&t(&[2], &[0.7, 0.7]));
        let c = tape.leaf(&t(&[2], &[5.0, 5.0]));
        let y = tape.layer_norm(c, g, b0, 1e-5).unwrap();
        assert!(tape.value(y).iter().all(|v| v.abs() < 1e-9));
        let y = tape.layer_norm(c, g, b, 1e-5).unwrap();
        assert!(tape.value(y).iter().all(|v| (v - 0.7).abs() < 1e-9));
        let x = tape.leaf(&t(&[2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, g, b0, 1e-12).unwrap();
        assert!((tape.value(y)[0] + 1.0).abs() < 1e-9);
        assert!((tape.value(y)[1] - 1.0).abs() < 1e-9);
        let g3 = tape.leaf(&t(&[3], &[1.0; 3]));
        assert!(tape.layer_norm(x, g3, b0, 1e-5).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let u = tape.leaf(&t(&[1, 10], &[0.3; 10]));
        let l = tape.cross_entropy(u, &[4]).unwrap();
        assert!((tape.item(l) - 10f64.ln()).abs() < 1e-12);
        let x = tape.leaf(&t(&[1, 2], &[2f64.ln(), 0.0]));
        let l = tape.cross_entropy(x, &[0]).unwrap();
        assert!((tape.item(l) - 0.405_465_108_108_164_4).abs() < 1e-12);
        let big = tape.leaf(&t(&[1, 2], &[1e4, 0.0]));
        let l = tape.cross_entropy(big, &[0]).unwrap();
        assert!(tape.item(l).abs() < 1e-12);
        assert!(matches!(tape.cross_entropy(x, &[2]), Err(Error::Index(_))));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::<f64>::new();
        let xt = t(&[1], &[3.0]).with_requires_grad(true);
        let x = tape.leaf(&xt);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);

        let c = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(c).is_none());

        assert!(matches!(tape.backward(sq), Ok(_)));
        let v = tape.leaf(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates_into_tensor() {
        let mut xt = t(&[1], &[3.0]).with_requires_grad(true);
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.leaf(&xt);
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap().accumulate_into(x, &mut xt).unwrap();
        }
        assert_eq!(xt.grad().unwrap(), &[12.0]);
    }

    #[test]
    fn permute_round_trips() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.leaf(&t(&[2, 3, 4], &data));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // out[k, i, j] = in[i, j, k]
        assert_eq!(tape.value(p)[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back), &data[..]);
        assert!(tape.permute(x, &[0, 0, 1]).is_err());
    }
}
