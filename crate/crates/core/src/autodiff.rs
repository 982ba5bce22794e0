//! Tape-based reverse-mode automatic differentiation.
//!
//! Every forward op appends a node holding its output value and the handles
//! of its inputs. Nodes are only ever appended, so the node list is already
//! in topological order and `backward` is a single reverse sweep.
//!
//! Most data movement (transposes, window partitioning, padding, im2col,
//! upsampling, max pooling) is expressed through one [`Tape::gather`]
//! primitive whose backward pass scatter-adds.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{numel, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Mul,
}

/// Where the smaller operand of a broadcast op sits inside the larger one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    /// `b.shape` equals the trailing extents of `x.shape` (`b` repeats over rows).
    Suffix,
    /// `b.shape` equals the leading extents of `x.shape` (each `b` value covers a block).
    Prefix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Relu,
    Gelu,
    Sqrt,
    Square,
    Recip,
}

// tanh-approximate GELU: 0.5·x·(1 + tanh(0.7978845608·(x + 0.044715·x³)))
const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608;
const GELU_CUBIC: f64 = 0.044715;

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        p: usize,
        shared_rhs: bool,
    },
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    Concat {
        xs: Vec<Var>,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    AddScalar {
        x: Var,
    },
    Broadcast {
        x: Var,
        b: Var,
        kind: BinaryKind,
        layout: Broadcast,
    },
    Unary {
        x: Var,
        f: Unary,
    },
    SumAll {
        x: Var,
    },
    SumLast {
        x: Var,
        n: usize,
    },
    Softmax {
        x: Var,
        n: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        n: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed differentiable ops.
///
/// A tape also carries a multiplication counter: while counting is enabled,
/// every matrix product (and hence every convolution) adds its scalar
/// multiplication count. Nothing else is counted.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    counter: FlopCounter,
    kink_margin: f64,
    kink_pattern: DefaultHasher,
}

/// Accumulated scalar multiplications of matrix products within a counting scope.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCounter {
    enabled: bool,
    count: u64,
}

impl FlopCounter {
    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    fn add(&mut self, n: u64) {
        if self.enabled {
            self.count += n;
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            counter: FlopCounter::default(),
            kink_margin: f64::INFINITY,
            kink_pattern: DefaultHasher::new(),
        }
    }

    /// Smallest distance of any recorded ReLU input from 0, or of any max-pool
    /// winner from its runner-up. A finite-difference step that moves values
    /// by more than this may cross a point where the tape is not differentiable.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    pub(crate) fn note_kink(&mut self, distance: f64) {
        self.kink_margin = self.kink_margin.min(distance);
    }

    /// Hash of every ReLU sign and max-pool winner recorded so far. Two
    /// evaluations with equal patterns lie on the same smooth piece.
    pub fn kink_pattern(&self) -> u64 {
        self.kink_pattern.finish()
    }

    pub(crate) fn note_pattern(&mut self, pieces: impl IntoIterator<Item = usize>) {
        for p in pieces {
            p.hash(&mut self.kink_pattern);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- flop counting -------------------------------------------------

    /// Starts a fresh counting scope.
    pub fn start_counting(&mut self) {
        self.counter = FlopCounter {
            enabled: true,
            count: 0,
        };
    }

    /// Ends the scope and returns the multiplications counted in it.
    pub fn stop_counting(&mut self) -> u64 {
        self.counter.enabled = false;
        self.counter.count
    }

    pub fn flops(&self) -> FlopCounter {
        self.counter
    }

    // ---- leaves --------------------------------------------------------

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn variable(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_requires_grad(true), Op::Leaf, true)
    }

    /// Binds a named parameter from `store`. Repeated lookups of the same
    /// name on one tape share a single leaf, so gradients accumulate there.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let needs = t.requires_grad();
        let mut value = t.clone();
        value.zero_grad();
        let v = self.push(value, Op::Leaf, needs);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound to this tape, by name.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- linear algebra ------------------------------------------------

    /// Matrix product `a [..., m, k] × b [..., k, p]`.
    ///
    /// `b` either carries the same leading (batch) extents as `a` or is a
    /// plain `[k, p]` matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", format!("operands {sa:?} and {sb:?} need rank >= 2")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner extents differ: {sa:?} x {sb:?}")));
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared_rhs = batch_b.is_empty();
        if !shared_rhs && batch_a != batch_b {
            return Err(Error::dim("matmul", format!("batch extents differ: {sa:?} x {sb:?}")));
        }
        let batch = numel(batch_a);
        let mut out = vec![T::zero(); batch * m * p];
        {
            let (da, db) = (self.data(a), self.data(b));
            for bi in 0..batch {
                let bo = if shared_rhs { 0 } else { bi * k * p };
                gemm_nn(
                    &da[bi * m * k..(bi + 1) * m * k],
                    &db[bo..bo + k * p],
                    &mut out[bi * m * p..(bi + 1) * m * p],
                    m,
                    k,
                    p,
                );
            }
        }
        self.counter.add((batch * m * k * p) as u64);
        let mut shape = batch_a.to_vec();
        shape.extend([m, p]);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                p,
                shared_rhs,
            },
            needs,
        ))
    }

    /// `x · w + b` over the last dimension of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.broadcast(y, b, BinaryKind::Add, Broadcast::Suffix),
            None => Ok(y),
        }
    }

    // ---- data movement -------------------------------------------------

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).gather(&index, shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Gather { x, index }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().with_requires_grad(false).reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    /// Axis permutation; `perm[i]` names the source axis of output axis `i`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let (index, shape) = crate::index::permute(self.shape(x), perm)?;
        self.gather(x, Arc::new(index), &shape)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    /// Keeps `len` entries of the last axis starting at `start`.
    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::dim("narrow_last", "scalar input"))?;
        if start + len > n {
            return Err(Error::dim("narrow_last", format!("{start}+{len} exceeds {n}")));
        }
        let rows = numel(&shape) / n.max(1);
        let index: Vec<usize> = (0..rows)
            .flat_map(|r| (start..start + len).map(move |j| r * n + j))
            .collect();
        let mut out = shape;
        *out.last_mut().unwrap() = len;
        self.gather(x, Arc::new(index), &out)
    }

    /// Concatenates along a new or existing leading axis; all operands must
    /// share a shape, and the result has shape `[xs.len(), ...]`.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("stack", "no operands"))?;
        let shape = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(numel(&shape) * xs.len());
        for &x in xs {
            if self.shape(x) != shape.as_slice() {
                return Err(Error::dim(
                    "stack",
                    format!("{:?} vs {shape:?}", self.shape(x)),
                ));
            }
            data.extend_from_slice(self.data(x));
        }
        let mut out_shape = vec![xs.len()];
        out_shape.extend(&shape);
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Concat { xs: xs.to_vec() }, needs))
    }

    // ---- elementwise ---------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|e| e * s);
        let needs = self.needs(x);
        self.push(v, Op::Scale { x, s }, needs)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|e| e + s);
        let needs = self.needs(x);
        self.push(v, Op::AddScalar { x }, needs)
    }

    /// `x ⊕ b` with `b` repeated according to `layout`.
    pub fn broadcast(&mut self, x: Var, b: Var, kind: BinaryKind, layout: Broadcast) -> Result<Var> {
        let sx = self.shape(x);
        let sb = self.shape(b);
        let ok = sb.len() <= sx.len()
            && match layout {
                Broadcast::Suffix => sx[sx.len() - sb.len()..] == *sb,
                Broadcast::Prefix => sx[..sb.len()] == *sb,
            };
        if !ok {
            return Err(Error::dim(
                "broadcast",
                format!("{sb:?} does not broadcast into {sx:?} as {layout:?}"),
            ));
        }
        let (dx, db) = (self.data(x), self.data(b));
        let (nb, block) = (db.len(), dx.len() / db.len().max(1));
        let data = dx
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let j = match layout {
                    Broadcast::Suffix => i % nb,
                    Broadcast::Prefix => i / block,
                };
                match kind {
                    BinaryKind::Add => v + db[j],
                    BinaryKind::Mul => v * db[j],
                }
            })
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(value, Op::Broadcast { x, b, kind, layout }, needs))
    }

    fn unary(&mut self, x: Var, f: Unary) -> Var {
        if f == Unary::Relu {
            let m = self.value(x).data().iter().fold(f64::INFINITY, |m, e| m.min(e.as_f64().abs()));
            self.note_kink(m);
            let signs: Vec<usize> = self.value(x).data().iter().map(|e| (*e > T::zero()) as usize).collect();
            self.note_pattern(signs);
        }
        let v = self.value(x).map(|e| match f {
            Unary::Relu => e.max(T::zero()),
            Unary::Gelu => gelu(e),
            Unary::Sqrt => e.sqrt(),
            Unary::Square => e * e,
            Unary::Recip => e.recip(),
        });
        let needs = self.needs(x);
        self.push(v, Op::Unary { x, f }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    /// GELU with the tanh approximation (constants 0.7978845608 and 0.044715).
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Recip)
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Sums over the last axis.
    pub fn sum_lastdim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::dim("sum_lastdim", "scalar input"))?;
        let out: Vec<T> = self
            .data(x)
            .chunks(n.max(1))
            .map(|c| c.iter().copied().sum())
            .collect();
        let value = Tensor::new(&shape[..shape.len() - 1], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SumLast { x, n }, needs))
    }

    pub fn mean_lastdim(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        let s = self.sum_lastdim(x)?;
        Ok(self.scale(s, T::one() / T::c(n as f64)))
    }

    /// Mean squared difference of two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    // ---- normalisation -------------------------------------------------

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = match shape.last() {
            Some(&n) if n >= 1 => n,
            _ => return Err(Error::dim("softmax", "empty last dimension")),
        };
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, n }, needs))
    }

    /// Normalises each last-axis slice to zero mean and unit (population)
    /// variance, then applies `gamma · x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} must be [{n}]",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = T::c(eps);
        let nt = T::c(n as f64);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = Vec::with_capacity(self.value(x).numel());
        let mut rstd = Vec::with_capacity(self.value(x).numel() / n.max(1));
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let r = (var + eps).sqrt().recip();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                n,
            },
            needs,
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients of every value that
    /// depends on a gradient-requiring leaf are returned; contributions from
    /// multiple uses accumulate.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                p,
                shared_rhs,
            } => {
                let (da, db) = (self.data(a), self.data(b));
                if self.needs(a) {
                    let ga = slot(grads, a, da.len());
                    for bi in 0..batch {
                        let bo = if shared_rhs { 0 } else { bi * k * p };
                        gemm_nt(
                            &g[bi * m * p..(bi + 1) * m * p],
                            &db[bo..bo + k * p],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            p,
                            k,
                        );
                    }
                }
                if self.needs(b) {
                    let gb = slot(grads, b, db.len());
                    for bi in 0..batch {
                        let bo = if shared_rhs { 0 } else { bi * k * p };
                        gemm_tn(
                            &da[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * p..(bi + 1) * m * p],
                            &mut gb[bo..bo + k * p],
                            m,
                            k,
                            p,
                        );
                    }
                }
            }
            Op::Gather { x, index } => {
                let gx = slot(grads, *x, self.value(*x).numel());
                for (gi, &src) in g.iter().zip(index.iter()) {
                    gx[src] += *gi;
                }
            }
            Op::Concat { xs } => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    if self.needs(x) {
                        add_into(slot(grads, x, n), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            &Op::Reshape { x } | &Op::AddScalar { x } | &Op::SumAll { x } => {
                let n = self.value(x).numel();
                let gx = slot(grads, x, n);
                if matches!(node.op, Op::SumAll { .. }) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                } else {
                    add_into(gx, g);
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            &Op::Sub { a, b } => {
                if self.needs(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
                if self.needs(b) {
                    slot(grads, b, g.len())
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &v)| *d -= v);
                }
            }
            &Op::Mul { a, b } => {
                let (da, db) = (self.data(a), self.data(b));
                if self.needs(a) {
                    let ga = slot(grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * db[i];
                    }
                }
                if self.needs(b) {
                    let gb = slot(grads, b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * da[i];
                    }
                }
            }
            &Op::Scale { x, s } => {
                slot(grads, x, g.len())
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &v)| *d += v * s);
            }
            &Op::Broadcast { x, b, kind, layout } => {
                let (dx, db) = (self.data(x), self.data(b));
                let (nb, block) = (db.len(), dx.len() / db.len().max(1));
                let j_of = |i: usize| match layout {
                    Broadcast::Suffix => i % nb,
                    Broadcast::Prefix => i / block,
                };
                if self.needs(x) {
                    let gx = slot(grads, x, dx.len());
                    for i in 0..g.len() {
                        gx[i] += match kind {
                            BinaryKind::Add => g[i],
                            BinaryKind::Mul => g[i] * db[j_of(i)],
                        };
                    }
                }
                if self.needs(b) {
                    let gb = slot(grads, b, nb);
                    for i in 0..g.len() {
                        gb[j_of(i)] += match kind {
                            BinaryKind::Add => g[i],
                            BinaryKind::Mul => g[i] * dx[i],
                        };
                    }
                }
            }
            &Op::Unary { x, f } => {
                let dx = self.data(x);
                let gx = slot(grads, x, dx.len());
                for i in 0..g.len() {
                    let d = match f {
                        Unary::Relu => {
                            if dx[i] > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Gelu => gelu_grad(dx[i]),
                        Unary::Sqrt => T::c(0.5) / out[i],
                        Unary::Square => T::c(2.0) * dx[i],
                        Unary::Recip => -(out[i] * out[i]),
                    };
                    gx[i] += g[i] * d;
                }
            }
            &Op::SumLast { x, n } => {
                let gx = slot(grads, x, self.value(x).numel());
                for (row, &gv) in gx.chunks_mut(n).zip(g) {
                    row.iter_mut().for_each(|d| *d += gv);
                }
            }
            &Op::Softmax { x, n } => {
                let gx = slot(grads, x, out.len());
                for ((gr, yr), dr) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                n,
            } => {
                let n = *n;
                let gam = self.data(*gamma);
                if self.needs(*gamma) {
                    let gg = slot(grads, *gamma, n);
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let gb = slot(grads, *beta, n);
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                }
                if self.needs(*x) {
                    let nt = T::c(n as f64);
                    let gx = slot(grads, *x, g.len());
                    for (r, ((gr, hr), dr)) in g
                        .chunks(n)
                        .zip(xhat.chunks(n))
                        .zip(gx.chunks_mut(n))
                        .enumerate()
                    {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d = mean_d / nt;
                        mean_dh = mean_dh / nt;
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            dr[j] += rstd[r] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros shaped like it when nothing flowed there.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        let shape = tape.shape(v);
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad matches value"),
            None => Tensor::zeros(shape),
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let k = T::c(GELU_SQRT_2_OVER_PI);
    let c = T::c(GELU_CUBIC);
    T::c(0.5) * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::c(GELU_SQRT_2_OVER_PI);
    let c = T::c(GELU_CUBIC);
    let t = (k * (x + c * x * x * x)).tanh();
    let half = T::c(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::c(3.0) * c * x * x)
}

/// `c[m,p] += a[m,k] · b[k,p]`
fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let crow = &mut c[i * p..(i + 1) * p];
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::zero() {
                continue;
            }
            let brow = &b[l * p..(l + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += g[m,p] · b[k,p]ᵀ`
fn gemm_nt<T: Real>(g: &[T], b: &[T], c: &mut [T], m: usize, p: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for l in 0..k {
            let brow = &b[l * p..(l + 1) * p];
            let dot: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            c[i * k + l] += dot;
        }
    }
}

/// `c[k,p] += a[m,k]ᵀ · g[m,p]`
fn gemm_tn<T: Real>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[l * p..(l + 1) * p];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}
