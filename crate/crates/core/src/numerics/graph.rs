//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is the tape: every operation appends a node holding its
//! forward value, and [`Graph::backward`] walks the nodes in exact reverse
//! order of recording. Nodes are only given a backward rule when at least
//! one input requires a gradient; everything else is recorded as a constant.

use rand::Rng;

use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Debug)]
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
}

impl MatMulDims {
    // (row stride, col stride, batch stride) of the stored operands.
    fn a_strides(&self) -> (isize, isize, usize) {
        let (m, k) = (self.m as isize, self.k as isize);
        if self.ta {
            (1, m, self.m * self.k)
        } else {
            (k, 1, self.m * self.k)
        }
    }

    fn b_strides(&self) -> (isize, isize, usize) {
        let (k, n) = (self.k as isize, self.n as isize);
        if self.tb {
            (1, k, self.k * self.n)
        } else {
            (n, 1, self.k * self.n)
        }
    }
}

#[derive(Clone, Debug)]
struct ConvDims {
    batch: usize,
    t_in: usize,
    t_out: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<F>),
    Scale(Var, F),
    AddScalar(Var),
    MatMul(Var, Var, MatMulDims),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Gelu(Var),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<F>,
        dims: ConvDims,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad: usize,
        smoothing: F,
        probs: Vec<F>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::AddBroadcast(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b, _) => vec![*a, *b],
            Op::MulConst(a, _)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Concat(parts, _) => parts.clone(),
            Op::Softmax { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Conv1d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Tape of recorded tensor operations.
pub struct Graph<F: Element = f32> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn accumulate<F: Element>(slot: &mut Option<Vec<F>>, len: usize) -> &mut Vec<F> {
    slot.get_or_insert_with(|| vec![F::zero(); len])
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert!(
            matches!(op, Op::Leaf)
                || value.all_finite()
                || op.inputs().iter().any(|v| !self.nodes[v.0].value.all_finite()),
            "non-finite output from finite inputs in {op:?}"
        );
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---- elementwise -------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape and is
    /// repeated over the leading dimensions (bias rows, position tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add_broadcast", sa, sb));
        }
        let tb = self.value(b).data();
        let nb = tb.len().max(1);
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb[i % nb])
            .collect();
        let out = Tensor::from_parts(sa.to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddBroadcast(a, b), rg))
    }

    /// Adds a constant tensor (masks, positional tables); broadcasts like
    /// [`Graph::add_broadcast`].
    pub fn add_const(&mut self, a: Var, c: Tensor<F>) -> Result<Var> {
        let cv = self.constant(c);
        self.add_broadcast(a, cv)
    }

    /// Elementwise product with a constant of identical shape.
    pub fn mul_const(&mut self, a: Var, c: Vec<F>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(shape_err("mul_const", self.shape(a), &[c.len()]));
        }
        let data = self.value(a).data().iter().zip(&c).map(|(&x, &m)| x * m).collect();
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulConst(a, c), rg))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`. Identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        let keep = F::lit(1.0 / (1.0 - p));
        let mask = (0..self.value(a).len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.mul_const(a, mask)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (F::lit(GELU_C), F::lit(GELU_A));
        let half = F::lit(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(F::zero()));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    // ---- linear algebra ----------------------------------------------

    /// Batched matrix product over the last two axes. Both operands must have
    /// the same rank (2 or 3) and matching leading batch size; `ta`/`tb`
    /// transpose the respective operand's last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || shape_err("matmul", &sa, &sb);
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return Err(bad());
        }
        let r = sa.len();
        let batch = if r == 3 { sa[0] } else { 1 };
        if r == 3 && sb[0] != batch {
            return Err(bad());
        }
        let (m, ka) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (kb, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if ka != kb {
            return Err(bad());
        }
        let dims = MatMulDims {
            batch,
            m,
            k: ka,
            n,
            ta,
            tb,
        };
        let mut out = vec![F::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let (rsa, csa, bsa) = dims.a_strides();
            let (rsb, csb, bsb) = dims.b_strides();
            for i in 0..batch {
                F::gemm(
                    m,
                    ka,
                    n,
                    F::one(),
                    &av[i * bsa..],
                    rsa,
                    csa,
                    &bv[i * bsb..],
                    rsb,
                    csb,
                    F::zero(),
                    &mut out[i * m * n..],
                    n as isize,
                    1,
                );
            }
        }
        let shape = if r == 3 { vec![batch, m, n] } else { vec![m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b, dims), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x · w (+ bias)` applied to the last axis of `x` of any rank.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(shape_err("linear", &sx, &sw));
        }
        let rows = sx[..sx.len() - 1].iter().product();
        let flat = self.reshape(x, &[rows, sw[0]])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = bias {
            y = self.add_broadcast(y, b)?;
        }
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = sw[1];
        self.reshape(y, &out_shape)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::invalid("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&x| x >= s.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(shape_err("permute", &s, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&i| s[i]).collect();
        let src = permute_index(&s, axes);
        let input = self.value(a).data();
        let data = src.iter().map(|&i| input[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute(a, axes.to_vec()), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec(), axis), rg))
    }

    // ---- normalisation and activations over an axis ------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut y = vec![F::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = F::neg_infinity();
                for j in 0..len {
                    mx = mx.max(x[base + j * inner]);
                }
                let mut sum = F::zero();
                for j in 0..len {
                    let e = (x[base + j * inner] - mx).exp();
                    y[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    y[base + j * inner] = y[base + j * inner] / sum;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(s, y),
            Op::Softmax {
                x: a,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Normalises each vector along the last axis to zero mean and unit
    /// population variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", &s, self.shape(gain)));
        }
        let rows = self.value(x).len() / d.max(1);
        let (xv, g, b) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let eps = F::lit(eps);
        let inv_d = F::lit(1.0 / d as f64);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut y = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mut m = F::zero();
            for &v in row {
                m += v;
            }
            m = m * inv_d;
            let mut var = F::zero();
            for &v in row {
                var += (v - m) * (v - m);
            }
            let rs = F::one() / (var * inv_d + eps).sqrt();
            for j in 0..d {
                y[r * d + j] = (row[j] - m) * rs * g[j] + b[j];
            }
            mean.push(m);
            rstd.push(rs);
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(s, y),
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// 1-D convolution over time. `x` is `[T, C_in]` or `[B, T, C_in]`, the
    /// kernel is `[K, C_in, C_out]`, the bias `[C_out]`. Zero padding of
    /// `padding` frames on both sides; output length
    /// `floor((T + 2p - K) / stride) + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (batch, t_in, c_in) = match sx.as_slice() {
            [t, c] => (1, *t, *c),
            [bt, t, c] => (*bt, *t, *c),
            _ => return Err(shape_err("conv1d", &sx, &sw)),
        };
        if sw.len() != 3 || sw[1] != c_in || self.shape(b) != [sw[2]] {
            return Err(shape_err("conv1d", &sx, &sw));
        }
        if stride == 0 {
            return Err(Error::invalid("conv1d", "stride must be >= 1"));
        }
        let (kernel, c_out) = (sw[0], sw[2]);
        let t_out = conv_out_len(t_in, kernel, stride, padding).ok_or_else(|| {
            Error::invalid(
                "conv1d",
                format!("input length {t_in} too short for kernel {kernel} with padding {padding}"),
            )
        })?;
        let dims = ConvDims {
            batch,
            t_in,
            t_out,
            c_in,
            c_out,
            kernel,
            stride,
            padding,
        };
        let kc = kernel * c_in;
        let xv = self.value(x).data();
        let mut cols = vec![F::zero(); batch * t_out * kc];
        for bi in 0..batch {
            for t in 0..t_out {
                let row = &mut cols[(bi * t_out + t) * kc..(bi * t_out + t + 1) * kc];
                for k in 0..kernel {
                    let src = (t * stride + k) as isize - padding as isize;
                    if src >= 0 && (src as usize) < t_in {
                        let off = (bi * t_in + src as usize) * c_in;
                        row[k * c_in..(k + 1) * c_in].copy_from_slice(&xv[off..off + c_in]);
                    }
                }
            }
        }
        let rows = batch * t_out;
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(rows * c_out);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        F::gemm(
            rows,
            kc,
            c_out,
            F::one(),
            &cols,
            kc as isize,
            1,
            self.value(w).data(),
            c_out as isize,
            1,
            F::one(),
            &mut out,
            c_out as isize,
            1,
        );
        let shape = if sx.len() == 2 { vec![t_out, c_out] } else { vec![batch, t_out, c_out] };
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv1d { x, w, b, cols, dims }, rg))
    }

    /// Gathers rows of `table` (`[V, d]`); output shape `ids_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(shape_err("embedding", &st, ids_shape));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&id) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::IdOutOfRange { id, vocab: v });
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    // ---- losses and reductions ---------------------------------------

    /// Mean token-level cross entropy over rows of `logits` (`[..., V]`)
    /// whose target is not `pad`, with label smoothing `smoothing` spread
    /// uniformly over the vocabulary. Returns a scalar; 0 when every
    /// position is padding.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize, smoothing: f64) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let v = *s.last().ok_or_else(|| Error::invalid("cross_entropy", "scalar logits"))?;
        let rows = self.value(logits).len() / v.max(1);
        if rows != targets.len() {
            return Err(shape_err("cross_entropy", &s, &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::IdOutOfRange { id: t, vocab: v });
        }
        let x = self.value(logits).data();
        let eps = F::lit(smoothing);
        let uniform = eps / F::lit(v as f64);
        let mut probs = vec![F::zero(); x.len()];
        let mut total = F::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == pad {
                continue;
            }
            count += 1;
            let row = &x[r * v..(r + 1) * v];
            let mx = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let mut sum = F::zero();
            for &z in row {
                sum += (z - mx).exp();
            }
            let lse = mx + sum.ln();
            let mut loss = -(F::one() - eps) * (row[t] - lse);
            if smoothing > 0.0 {
                let mut acc = F::zero();
                for &z in row {
                    acc += z - lse;
                }
                loss -= uniform * acc;
            }
            total += loss;
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
        }
        let value = if count == 0 { F::zero() } else { total / F::lit(count as f64) };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                smoothing: eps,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Negative log-likelihood without smoothing.
    pub fn nll_loss(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
        self.cross_entropy(logits, targets, pad, 0.0)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut acc = F::zero();
        for &x in self.value(a).data() {
            acc += x;
        }
        let rg = self.rg(a);
        self.push(Tensor::scalar(acc), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let mut acc = F::zero();
        for &x in self.value(a).data() {
            acc += x;
        }
        if n > 0 {
            acc = acc / F::lit(n as f64);
        }
        let rg = self.rg(a);
        self.push(Tensor::scalar(acc), Op::Mean(a), rg)
    }

    // ---- backward ----------------------------------------------------

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last [`Graph::backward`] call with respect to `v`;
    /// zeros when `v` was unreachable from the loss.
    pub fn grad(&self, v: Var) -> Tensor<F> {
        let shape = self.shape(v).to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Moves the gradient out without copying.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn backward_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let len_of = |v: Var| self.nodes[v.0].value.len();
        macro_rules! slot {
            ($v:expr) => {
                accumulate(&mut grads[$v.0], len_of($v))
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        for (d, &x) in slot!(v).iter_mut().zip(g) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    for (d, &x) in slot!(*a).iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if self.rg(*b) {
                    for (d, &x) in slot!(*b).iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if self.rg(*a) {
                    for (d, &x) in slot!(*a).iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if self.rg(*b) {
                    let nb = len_of(*b).max(1);
                    let gb = slot!(*b);
                    for (j, &x) in g.iter().enumerate() {
                        gb[j % nb] += x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    for ((d, &x), &y) in slot!(*a).iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                }
                if self.rg(*b) {
                    for ((d, &x), &y) in slot!(*b).iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                }
            }
            Op::MulConst(a, c) => {
                for ((d, &x), &m) in slot!(*a).iter_mut().zip(g).zip(c) {
                    *d += x * m;
                }
            }
            Op::Scale(a, s) => {
                for (d, &x) in slot!(*a).iter_mut().zip(g) {
                    *d += x * *s;
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                for (d, &x) in slot!(*a).iter_mut().zip(g) {
                    *d += x;
                }
            }
            Op::MatMul(a, b, dims) => {
                let MatMulDims { batch, m, k, n, .. } = *dims;
                let (rsa, csa, bsa) = dims.a_strides();
                let (rsb, csb, bsb) = dims.b_strides();
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let ga = slot!(*a);
                    for i in 0..batch {
                        // dA' = dC · B'^T, written through A's own strides.
                        F::gemm(
                            m,
                            n,
                            k,
                            F::one(),
                            &g[i * m * n..],
                            n as isize,
                            1,
                            &bv[i * bsb..],
                            csb,
                            rsb,
                            F::one(),
                            &mut ga[i * bsa..],
                            rsa,
                            csa,
                        );
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let gb = slot!(*b);
                    for i in 0..batch {
                        // dB' = A'^T · dC
                        F::gemm(
                            k,
                            m,
                            n,
                            F::one(),
                            &av[i * bsa..],
                            csa,
                            rsa,
                            &g[i * m * n..],
                            n as isize,
                            1,
                            F::one(),
                            &mut gb[i * bsb..],
                            rsb,
                            csb,
                        );
                    }
                }
            }
            Op::Permute(a, axes) => {
                let src = permute_index(self.shape(*a), axes);
                let ga = slot!(*a);
                for (&s, &x) in src.iter().zip(g) {
                    ga[s] += x;
                }
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut offset = 0;
                for o in 0..outer {
                    for &p in parts {
                        let chunk = self.shape(p)[*axis] * inner;
                        if self.rg(p) {
                            let gp = slot!(p);
                            for (d, &x) in gp[o * chunk..(o + 1) * chunk].iter_mut().zip(&g[offset..offset + chunk]) {
                                *d += x;
                            }
                        }
                        offset += chunk;
                    }
                }
            }
            Op::Gelu(a) => {
                let (c, k) = (F::lit(GELU_C), F::lit(GELU_A));
                let (half, three) = (F::lit(0.5), F::lit(3.0));
                let xv = self.value(*a).data();
                for ((d, &gy), &x) in slot!(*a).iter_mut().zip(g).zip(xv) {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let dt = (F::one() - t * t) * c * (F::one() + three * k * x * x);
                    *d += gy * (half * (F::one() + t) + half * x * dt);
                }
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                for ((d, &gy), &x) in slot!(*a).iter_mut().zip(g).zip(xv) {
                    if x > F::zero() {
                        *d += gy;
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let gx = slot!(*x);
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let mut dot = F::zero();
                        for j in 0..*len {
                            dot += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..*len {
                            let idx = base + j * inner;
                            gx[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let d = *node.value.shape().last().unwrap();
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let rows = mean.len();
                let xhat = |r: usize, j: usize| (xv[r * d + j] - mean[r]) * rstd[r];
                if self.rg(*gain) {
                    let gg = slot!(*gain);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat(r, j);
                        }
                    }
                }
                if self.rg(*bias) {
                    let gb = slot!(*bias);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let inv_d = F::lit(1.0 / d as f64);
                    let gx = slot!(*x);
                    for r in 0..rows {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xhat(r, j);
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            gx[r * d + j] += rstd[r] * (dxh - m1 - xhat(r, j) * m2);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, cols, dims } => {
                let ConvDims {
                    batch,
                    t_in,
                    t_out,
                    c_in,
                    c_out,
                    kernel,
                    stride,
                    padding,
                } = *dims;
                let kc = kernel * c_in;
                let rows = batch * t_out;
                if self.rg(*b) {
                    let gb = slot!(*b);
                    for r in 0..rows {
                        for j in 0..c_out {
                            gb[j] += g[r * c_out + j];
                        }
                    }
                }
                if self.rg(*w) {
                    let gw = slot!(*w);
                    F::gemm(
                        kc,
                        rows,
                        c_out,
                        F::one(),
                        cols,
                        1,
                        kc as isize,
                        g,
                        c_out as isize,
                        1,
                        F::one(),
                        gw,
                        c_out as isize,
                        1,
                    );
                }
                if self.rg(*x) {
                    let mut gcols = vec![F::zero(); rows * kc];
                    F::gemm(
                        rows,
                        c_out,
                        kc,
                        F::one(),
                        g,
                        c_out as isize,
                        1,
                        self.value(*w).data(),
                        1,
                        c_out as isize,
                        F::zero(),
                        &mut gcols,
                        kc as isize,
                        1,
                    );
                    let gx = slot!(*x);
                    for bi in 0..batch {
                        for t in 0..t_out {
                            let row = &gcols[(bi * t_out + t) * kc..(bi * t_out + t + 1) * kc];
                            for k in 0..kernel {
                                let src = (t * stride + k) as isize - padding as isize;
                                if src >= 0 && (src as usize) < t_in {
                                    let off = (bi * t_in + src as usize) * c_in;
                                    for c in 0..c_in {
                                        gx[off + c] += row[k * c_in + c];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let gt = slot!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                smoothing,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let v = *self.shape(*logits).last().unwrap();
                let scale = g[0] / F::lit(*count as f64);
                let uniform = *smoothing / F::lit(v as f64);
                let gl = slot!(*logits);
                for (r, &t) in targets.iter().enumerate() {
                    if t == *pad {
                        continue;
                    }
                    for j in 0..v {
                        let mut q = uniform;
                        if j == t {
                            q += F::one() - *smoothing;
                        }
                        gl[r * v + j] += scale * (probs[r * v + j] - q);
                    }
                }
            }
            Op::Sum(a) => {
                for d in slot!(*a).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(a) => {
                let n = F::lit(len_of(*a).max(1) as f64);
                for d in slot!(*a).iter_mut() {
                    *d += g[0] / n;
                }
            }
        }
    }
}

/// `floor((t + 2p - k) / s) + 1`, or `None` when no output frame fits.
pub fn conv_out_len(t: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = t + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

// For every output element of a permutation, the flat index of its source.
fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let r = shape.len();
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&i| shape[i]).collect();
    let strides: Vec<usize> = axes.iter().map(|&i| in_strides[i]).collect();
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(src);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
