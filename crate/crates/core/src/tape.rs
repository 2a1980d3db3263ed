//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate value produced during a forward pass.
//! Nodes are appended in execution order, so walking the node list backwards
//! is a valid reverse topological order and each node is visited once.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, Tensor};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Gelu(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Log(Var),
    Recip(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, inv_std: Vec<F> },
    Attention { qkv: Var, batch: usize, tokens: usize, heads: usize, probs: Vec<F> },
    AssembleTokens { prefix: Var, body: Var, body_rows: usize },
    OverwriteRows { x: Var, src: Var, block: usize, offset: usize },
    GatherBlockRows { x: Var, block: usize, start: usize, count: usize },
    Pick { x: Var, cols: Vec<usize> },
}

#[derive(Debug)]
struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<F: Element = f32> {
    nodes: Vec<Node<F>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

fn accumulate<F: Element>(slot: &mut Option<Vec<F>>, len: usize) -> &mut Vec<F> {
    slot.get_or_insert_with(|| vec![F::zero(); len])
}

fn dot<F: Element>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `y += a * x`
fn axpy<F: Element>(y: &mut [F], a: F, x: &[F]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + a * xv;
    }
}

fn gelu_parts<F: Element>(x: F) -> (F, F) {
    let c = F::from_f64(0.797_884_560_802_865_4).unwrap();
    let a = F::from_f64(0.044_715).unwrap();
    let half = F::from_f64(0.5).unwrap();
    let three = F::from_f64(3.0).unwrap();
    let u = c * (x + a * x * x * x);
    let two = F::one() + F::one();
    let t = F::one() - two / ((u + u).exp() + F::one());
    let y = half * x * (F::one() + t);
    let dy = half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x);
    (y, dy)
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all recorded nodes, keeping the allocation.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    /// Copy a node's value out as an `f32` tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(
            n.shape.clone(),
            n.value.iter().map(|x| x.to_f32_lossy()).collect(),
        )
        .expect("node shape matches value")
    }

    /// Record a tensor as a leaf. Its `requires_grad` flag decides whether
    /// backward produces a gradient for it.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&x| F::from_f32_lossy(x)).collect();
        self.push(t.shape().to_vec(), value, Op::Leaf, t.requires_grad)
    }

    /// Leaf that always requires a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&x| F::from_f32_lossy(x)).collect();
        self.push(t.shape().to_vec(), value, Op::Leaf, true)
    }

    /// Leaf from native-precision values (used by gradient checks).
    pub fn leaf_raw(&mut self, shape: Vec<usize>, value: Vec<F>, requires_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::shape("leaf", &shape, &[value.len()]));
        }
        Ok(self.push(shape, value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&x| F::from_f32_lossy(x)).collect();
        self.push(t.shape().to_vec(), value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// `x + y` where `y` repeats along the flattened `x` (bias rows,
    /// positional tables tiled across a batch).
    pub fn add_tiled(&mut self, x: Var, y: Var) -> Result<Var> {
        let nx = self.value(x).len();
        let ny = self.value(y).len();
        let (_, cx) = rows_cols(self.shape(x));
        let (_, cy) = rows_cols(self.shape(y));
        if ny == 0 || nx % ny != 0 || cx != cy {
            return Err(Error::shape("add_tiled", self.shape(x), self.shape(y)));
        }
        let yv = self.value(y);
        let out = self
            .value(x)
            .chunks(ny)
            .flat_map(|c| c.iter().zip(yv).map(|(&a, &b)| a + b))
            .collect();
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddTiled(x, y), rg))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), rg))
    }

    pub fn add_scalar(&mut self, x: Var, s: F) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v + s).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddScalar(x), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| gelu_parts(v).0).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", &s, &[2]));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, r], out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let (_, cols) = rows_cols(self.shape(first));
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if c != cols {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        if start + len > r {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, len]));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![len, c], out, Op::SliceRows { x, start }, rg))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = rows_cols(self.shape(table));
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { index: id, len: v });
            }
            out.extend_from_slice(&self.value(table)[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        Ok(self.push(vec![], vec![s], Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let s: F = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        Ok(self.push(vec![], vec![s / F::from_usize(n).unwrap()], Op::Mean(x), rg))
    }

    /// Mean squared difference `mean((a - b)^2)`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Contract("mse of empty tensor".into()));
        }
        let s: F = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![], vec![s / F::from_usize(n).unwrap()], Op::Mse(a, b), rg))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.ln()).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Log(x), rg))
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.recip()).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Recip(x), rg))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len().max(1) {
            return Err(Error::Contract(format!(
                "softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        let xs = self.value(x);
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let (outer, len, inner) = if shape.is_empty() {
            (1, 1, 1)
        } else {
            (
                shape[..axis].iter().product::<usize>(),
                shape[axis],
                shape[axis + 1..].iter().product::<usize>(),
            )
        };
        let mut out = vec![F::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut m = F::neg_infinity();
                for j in 0..len {
                    m = m.max(xs[at(j)]);
                }
                let mut z = F::zero();
                for j in 0..len {
                    let e = (xs[at(j)] - m).exp();
                    out[at(j)] = e;
                    z = z + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Row-wise log-softmax over the last axis of a 2-D tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (r, c) = rows_cols(&shape);
        let xs = self.value(x);
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("log_softmax input is not finite".into()));
        }
        let mut out = vec![F::zero(); xs.len()];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::LogSoftmax(x), rg))
    }

    /// Row-wise layer normalization with affine `gain`/`bias` over the last dim.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (r, c) = rows_cols(&shape);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let xs = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let cf = F::from_usize(c).unwrap();
        let mut xhat = vec![F::zero(); xs.len()];
        let mut inv_std = vec![F::zero(); r];
        let mut out = vec![F::zero(); xs.len()];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mu = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / cf;
            let is = (var + eps).sqrt().recip();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[batch*tokens, 3*width]` with query, key and value blocks
    /// side by side; each sample attends only within its own `tokens` rows.
    /// Output is `[batch*tokens, width]` with heads concatenated.
    pub fn attention(&mut self, qkv: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let (r, c3) = rows_cols(self.shape(qkv));
        if r != batch * tokens || c3 % 3 != 0 || heads == 0 || (c3 / 3) % heads != 0 {
            return Err(Error::shape("attention", self.shape(qkv), &[batch, tokens, heads]));
        }
        let width = c3 / 3;
        let dh = width / heads;
        let scale = F::from_usize(dh).unwrap().sqrt().recip();
        let src = self.value(qkv);
        let mut out = vec![F::zero(); r * width];
        let mut probs = vec![F::zero(); batch * heads * tokens * tokens];
        let mut scores = vec![F::zero(); tokens];
        for b in 0..batch {
            let base = b * tokens;
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, width + h * dh, 2 * width + h * dh);
                let pb = (b * heads + h) * tokens * tokens;
                for i in 0..tokens {
                    let q = &src[(base + i) * c3 + qo..(base + i) * c3 + qo + dh];
                    let mut m = F::neg_infinity();
                    for (j, s) in scores.iter_mut().enumerate() {
                        let k = &src[(base + j) * c3 + ko..(base + j) * c3 + ko + dh];
                        let dot: F = q.iter().zip(k).map(|(&a, &b)| a * b).sum();
                        *s = dot * scale;
                        m = m.max(*s);
                    }
                    let mut z = F::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - m).exp();
                        z = z + *s;
                    }
                    let o = &mut out[(base + i) * width + h * dh..(base + i) * width + (h + 1) * dh];
                    for (j, &s) in scores.iter().enumerate() {
                        let p = s / z;
                        probs[pb + i * tokens + j] = p;
                        let v = &src[(base + j) * c3 + vo..(base + j) * c3 + vo + dh];
                        for (ov, &vv) in o.iter_mut().zip(v) {
                            *ov = *ov + p * vv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(qkv);
        Ok(self.push(
            vec![r, width],
            out,
            Op::Attention {
                qkv,
                batch,
                tokens,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Build per-sample token blocks `[prefix rows.., body rows of sample b..]`.
    ///
    /// `prefix` is `[p, d]` and shared by all samples; `body` is
    /// `[batch*body_rows, d]`. Output is `[batch*(p+body_rows), d]`.
    pub fn assemble_tokens(&mut self, prefix: Var, body: Var, body_rows: usize) -> Result<Var> {
        let (p, d) = rows_cols(self.shape(prefix));
        let (br, bd) = rows_cols(self.shape(body));
        if d != bd || body_rows == 0 || br % body_rows != 0 {
            return Err(Error::shape("assemble_tokens", self.shape(prefix), self.shape(body)));
        }
        let batch = br / body_rows;
        let block = p + body_rows;
        let mut out = Vec::with_capacity(batch * block * d);
        let pv = self.value(prefix);
        let bv = self.value(body);
        for b in 0..batch {
            out.extend_from_slice(pv);
            out.extend_from_slice(&bv[b * body_rows * d..(b + 1) * body_rows * d]);
        }
        let rg = self.rg(prefix) || self.rg(body);
        Ok(self.push(
            vec![batch * block, d],
            out,
            Op::AssembleTokens {
                prefix,
                body,
                body_rows,
            },
            rg,
        ))
    }

    /// Replace rows `offset..offset+src_rows` of every `block`-row group of `x`
    /// with the rows of `src`.
    pub fn overwrite_rows(&mut self, x: Var, src: Var, block: usize, offset: usize) -> Result<Var> {
        let (r, d) = rows_cols(self.shape(x));
        let (s, sd) = rows_cols(self.shape(src));
        if d != sd || block == 0 || r % block != 0 || offset + s > block {
            return Err(Error::shape("overwrite_rows", self.shape(x), self.shape(src)));
        }
        let mut out = self.value(x).to_vec();
        let sv = self.value(src);
        for b in 0..r / block {
            let at = (b * block + offset) * d;
            out[at..at + s * d].copy_from_slice(sv);
        }
        let rg = self.rg(x) || self.rg(src);
        Ok(self.push(
            vec![r, d],
            out,
            Op::OverwriteRows {
                x,
                src,
                block,
                offset,
            },
            rg,
        ))
    }

    /// Rows `start..start+count` of every `block`-row group, flattened to one
    /// output row per group: `[groups, count*d]`.
    pub fn gather_block_rows(&mut self, x: Var, block: usize, start: usize, count: usize) -> Result<Var> {
        let (r, d) = rows_cols(self.shape(x));
        if block == 0 || r % block != 0 || start + count > block {
            return Err(Error::shape("gather_block_rows", self.shape(x), &[block, start, count]));
        }
        let groups = r / block;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(groups * count * d);
        for g in 0..groups {
            let at = (g * block + start) * d;
            out.extend_from_slice(&xv[at..at + count * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![groups, count * d],
            out,
            Op::GatherBlockRows {
                x,
                block,
                start,
                count,
            },
            rg,
        ))
    }

    /// One entry per row: `out[i] = x[i, cols[i]]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        if cols.len() != r {
            return Err(Error::shape("pick", self.shape(x), &[cols.len()]));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r);
        for (i, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(Error::Index { index: j, len: c });
            }
            out.push(xv[i * c + j]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r], out, Op::Pick { x, cols: cols.to_vec() }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sa = &self.nodes[a.0].shape;
                let (m, k) = (sa[0], sa[1]);
                let n = self.nodes[b.0].shape[1];
                if self.rg(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    gemm(m, n, k, g, false, self.value(*b), true, ga, true);
                }
                if self.rg(*b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    gemm(k, m, n, self.value(*a), true, g, false, gb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        let gv = accumulate(&mut grads[v.0], g.len());
                        gv.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    let gv = accumulate(&mut grads[a.0], g.len());
                    gv.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                }
                if self.rg(*b) {
                    let gv = accumulate(&mut grads[b.0], g.len());
                    gv.iter_mut().zip(g).for_each(|(d, &s)| *d = *d - s);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let gv = accumulate(&mut grads[a.0], g.len());
                    for ((d, &s), &o) in gv.iter_mut().zip(g).zip(bv) {
                        *d = *d + s * o;
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let gv = accumulate(&mut grads[b.0], g.len());
                    for ((d, &s), &o) in gv.iter_mut().zip(g).zip(av) {
                        *d = *d + s * o;
                    }
                }
            }
            Op::AddTiled(x, y) => {
                if self.rg(*x) {
                    let gv = accumulate(&mut grads[x.0], g.len());
                    gv.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                }
                if self.rg(*y) {
                    let ny = len(*y);
                    let gy = accumulate(&mut grads[y.0], ny);
                    for chunk in g.chunks(ny) {
                        gy.iter_mut().zip(chunk).for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.rg(*x) {
                    let gv = accumulate(&mut grads[x.0], g.len());
                    gv.iter_mut().zip(g).for_each(|(d, &u)| *d = *d + u * *s);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if self.rg(*x) {
                    let gv = accumulate(&mut grads[x.0], g.len());
                    gv.iter_mut().zip(g).for_each(|(d, &u)| *d = *d + u);
                }
            }
            Op::Gelu(x) => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let gv = accumulate(&mut grads[x.0], g.len());
                    for ((d, &u), &xi) in gv.iter_mut().zip(g).zip(xv) {
                        *d = *d + u * gelu_parts(xi).1;
                    }
                }
            }
            Op::Transpose(x) => {
                if self.rg(*x) {
                    let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let gv = accumulate(&mut grads[x.0], r * c);
                    for i in 0..r {
                        for j in 0..c {
                            gv[i * c + j] = gv[i * c + j] + g[j * r + i];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = len(p);
                    if self.rg(p) {
                        let gv = accumulate(&mut grads[p.0], n);
                        gv.iter_mut().zip(&g[at..at + n]).for_each(|(d, &u)| *d = *d + u);
                    }
                    at += n;
                }
            }
            Op::SliceRows { x, start } => {
                if self.rg(*x) {
                    let (_, c) = rows_cols(&self.nodes[x.0].shape);
                    let gv = accumulate(&mut grads[x.0], len(*x));
                    let at = start * c;
                    gv[at..at + g.len()].iter_mut().zip(g).for_each(|(d, &u)| *d = *d + u);
                }
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let (_, d) = rows_cols(&self.nodes[table.0].shape);
                    let gv = accumulate(&mut grads[table.0], len(*table));
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gv[id * d + j] = gv[id * d + j] + g[r * d + j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    let n = len(*x);
                    let gv = accumulate(&mut grads[x.0], n);
                    gv.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean(x) => {
                if self.rg(*x) {
                    let n = len(*x);
                    let s = g[0] / F::from_usize(n).unwrap();
                    let gv = accumulate(&mut grads[x.0], n);
                    gv.iter_mut().for_each(|d| *d = *d + s);
                }
            }
            Op::Mse(a, b) => {
                let n = len(*a);
                let two = F::from_f64(2.0).unwrap() * g[0] / F::from_usize(n).unwrap();
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let gv = accumulate(&mut grads[a.0], n);
                    for ((d, &x), &y) in gv.iter_mut().zip(av).zip(bv) {
                        *d = *d + two * (x - y);
                    }
                }
                if self.rg(*b) {
                    let gv = accumulate(&mut grads[b.0], n);
                    for ((d, &x), &y) in gv.iter_mut().zip(av).zip(bv) {
                        *d = *d - two * (x - y);
                    }
                }
            }
            Op::Log(x) => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let gv = accumulate(&mut grads[x.0], g.len());
                    for ((d, &u), &xi) in gv.iter_mut().zip(g).zip(xv) {
                        *d = *d + u / xi;
                    }
                }
            }
            Op::Recip(x) => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let gv = accumulate(&mut grads[x.0], g.len());
                    for ((d, &u), &xi) in gv.iter_mut().zip(g).zip(xv) {
                        *d = *d - u / (xi * xi);
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len: n,
                inner,
            } => {
                if self.rg(*x) {
                    let y = &node.value;
                    let gv = accumulate(&mut grads[x.0], y.len());
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: F = (0..*n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*n {
                                gv[at(j)] = gv[at(j)] + y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if self.rg(*x) {
                    let y = &node.value;
                    let (r, c) = rows_cols(&node.shape);
                    let gv = accumulate(&mut grads[x.0], y.len());
                    for i in 0..r {
                        let gs: F = g[i * c..(i + 1) * c].iter().copied().sum();
                        for j in 0..c {
                            let k = i * c + j;
                            gv[k] = gv[k] + g[k] - y[k].exp() * gs;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = rows_cols(&node.shape);
                let gw = self.value(*gain);
                if self.rg(*gain) {
                    let gg = accumulate(&mut grads[gain.0], c);
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] = gg[j] + g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let gb = accumulate(&mut grads[bias.0], c);
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] = gb[j] + g[i * c + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let cf = F::from_usize(c).unwrap();
                    let gx = accumulate(&mut grads[x.0], r * c);
                    for i in 0..r {
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..c {
                            let dh = g[i * c + j] * gw[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * xhat[i * c + j];
                        }
                        let k = inv_std[i] / cf;
                        for j in 0..c {
                            let dh = g[i * c + j] * gw[j];
                            gx[i * c + j] = gx[i * c + j] + k * (cf * dh - s1 - xhat[i * c + j] * s2);
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                batch,
                tokens,
                heads,
                probs,
            } => {
                if !self.rg(*qkv) {
                    return;
                }
                let (t, nh) = (*tokens, *heads);
                let src = self.value(*qkv);
                let c3 = src.len() / (batch * t);
                let width = c3 / 3;
                let dh = width / nh;
                let scale = F::from_usize(dh).unwrap().sqrt().recip();
                let gq = accumulate(&mut grads[qkv.0], src.len());
                let mut dp = vec![F::zero(); t];
                let mut dq = vec![F::zero(); dh];
                let mut dk = vec![F::zero(); t * dh];
                let mut dv = vec![F::zero(); t * dh];
                for b in 0..*batch {
                    let base = b * t;
                    let row = |j: usize, off: usize| &src[(base + j) * c3 + off..(base + j) * c3 + off + dh];
                    for h in 0..nh {
                        let (qo, ko, vo) = (h * dh, width + h * dh, 2 * width + h * dh);
                        let pb = (b * nh + h) * t * t;
                        dk.fill(F::zero());
                        dv.fill(F::zero());
                        for i in 0..t {
                            let go = &g[(base + i) * width + h * dh..(base + i) * width + (h + 1) * dh];
                            let p = &probs[pb + i * t..pb + (i + 1) * t];
                            // dP[i, j] = dO[i] . V[j]; dV[j] += P[i, j] dO[i]
                            for j in 0..t {
                                dp[j] = dot(go, row(j, vo));
                                axpy(&mut dv[j * dh..(j + 1) * dh], p[j], go);
                            }
                            let pd = dot(&dp, p);
                            dq.fill(F::zero());
                            let q = row(i, qo);
                            for j in 0..t {
                                let ds = p[j] * (dp[j] - pd) * scale;
                                axpy(&mut dq, ds, row(j, ko));
                                axpy(&mut dk[j * dh..(j + 1) * dh], ds, q);
                            }
                            let at = (base + i) * c3 + qo;
                            axpy(&mut gq[at..at + dh], F::one(), &dq);
                        }
                        for j in 0..t {
                            let at = (base + j) * c3;
                            axpy(&mut gq[at + ko..at + ko + dh], F::one(), &dk[j * dh..(j + 1) * dh]);
                            axpy(&mut gq[at + vo..at + vo + dh], F::one(), &dv[j * dh..(j + 1) * dh]);
                        }
                    }
                }
            }
            Op::AssembleTokens {
                prefix,
                body,
                body_rows,
            } => {
                let (p, d) = rows_cols(&self.nodes[prefix.0].shape);
                let block = p + body_rows;
                let batch = node.value.len() / (block * d);
                if self.rg(*prefix) {
                    let gp = accumulate(&mut grads[prefix.0], p * d);
                    for b in 0..batch {
                        let at = b * block * d;
                        gp.iter_mut().zip(&g[at..at + p * d]).for_each(|(x, &u)| *x = *x + u);
                    }
                }
                if self.rg(*body) {
                    let gb = accumulate(&mut grads[body.0], batch * body_rows * d);
                    for b in 0..batch {
                        let at = (b * block + p) * d;
                        let to = b * body_rows * d;
                        gb[to..to + body_rows * d]
                            .iter_mut()
                            .zip(&g[at..at + body_rows * d])
                            .for_each(|(x, &u)| *x = *x + u);
                    }
                }
            }
            Op::OverwriteRows {
                x,
                src,
                block,
                offset,
            } => {
                let (r, d) = rows_cols(&node.shape);
                let s = len(*src) / d;
                if self.rg(*x) {
                    let gx = accumulate(&mut grads[x.0], r * d);
                    for b in 0..r / block {
                        for row in 0..*block {
                            if row >= *offset && row < offset + s {
                                continue;
                            }
                            let at = (b * block + row) * d;
                            gx[at..at + d].iter_mut().zip(&g[at..at + d]).for_each(|(v, &u)| *v = *v + u);
                        }
                    }
                }
                if self.rg(*src) {
                    let gs = accumulate(&mut grads[src.0], s * d);
                    for b in 0..r / block {
                        let at = (b * block + offset) * d;
                        gs.iter_mut().zip(&g[at..at + s * d]).for_each(|(v, &u)| *v = *v + u);
                    }
                }
            }
            Op::GatherBlockRows {
                x,
                block,
                start,
                count,
            } => {
                if self.rg(*x) {
                    let (r, d) = rows_cols(&self.nodes[x.0].shape);
                    let gx = accumulate(&mut grads[x.0], r * d);
                    let w = count * d;
                    for grp in 0..r / block {
                        let at = (grp * block + start) * d;
                        gx[at..at + w]
                            .iter_mut()
                            .zip(&g[grp * w..(grp + 1) * w])
                            .for_each(|(v, &u)| *v = *v + u);
                    }
                }
            }
            Op::Pick { x, cols } => {
                if self.rg(*x) {
                    let (_, c) = rows_cols(&self.nodes[x.0].shape);
                    let gx = accumulate(&mut grads[x.0], len(*x));
                    for (i, &j) in cols.iter().enumerate() {
                        gx[i * c + j] = gx[i * c + j] + g[i];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let mut tape = Tape::<f32>::new();
        let i2 = tape.constant(&t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(&t(&[2, 2], &[1., 2., 3., 4.]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out), &[1., 2., 3., 4.]);

        let a = tape.constant(&t(&[1, 2], &[1., 0.]));
        let b = tape.constant(&t(&[2, 1], &[0., 1.]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(out), &[1, 1]);
        assert_eq!(tape.value(out), &[0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_symmetric_and_stabilized() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(&t(&[2], &[0., 0.]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
        let x = tape.constant(&t(&[2], &[1000., 1000.]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_extended_precision_reference() {
        // reference evaluated in f64 directly from the definition
        let xs = [1.0f64, 2.0, 3.0];
        let z: f64 = xs.iter().map(|v| v.exp()).sum();
        let reference: Vec<f64> = xs.iter().map(|v| v.exp() / z).collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(&t(&[3], &[1., 2., 3.]));
        let y = tape.softmax(x, 0).unwrap();
        for (a, b) in tape.value(y).iter().zip(&reference) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_non_finite_is_numeric_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(&t(&[2], &[f32::NAN, 0.]));
        assert!(matches!(tape.softmax(x, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_inner_axis() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(&t(&[2, 2], &[0., 5., 0., 5.]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_edge_rows() {
        let mut tape = Tape::<f32>::new();
        let g = tape.constant(&Tensor::ones(&[2]));
        let b = tape.constant(&Tensor::zeros(&[2]));
        let x = tape.constant(&t(&[1, 2], &[3., 3.]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0., 0.]);
        let x = tape.constant(&t(&[1, 2], &[1., -1.]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y), &[1., -1.]);
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(&t(&[3], &[1., -2., 0.5]));
        let s = tape.sum(w).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), &[1., 1., 1.]);

        let mut tape = Tape::<f32>::new();
        let w = tape.param(&t(&[3], &[1., -2., 0.5]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), &[2., -4., 1.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(&t(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(&t(&[2], &[1., 2.]));
        let c = tape.constant(&t(&[2], &[3., 4.]));
        let p = tape.mul(w, c).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), &[3., 4.]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn block_row_ops_layout() {
        let mut tape = Tape::<f32>::new();
        let prefix = tape.constant(&t(&[2, 1], &[10., 11.]));
        let body = tape.constant(&t(&[4, 1], &[1., 2., 3., 4.]));
        let x = tape.assemble_tokens(prefix, body, 2).unwrap();
        assert_eq!(tape.value(x), &[10., 11., 1., 2., 10., 11., 3., 4.]);
        let src = tape.constant(&t(&[1, 1], &[7.]));
        let y = tape.overwrite_rows(x, src, 4, 1).unwrap();
        assert_eq!(tape.value(y), &[10., 7., 1., 2., 10., 7., 3., 4.]);
        let z = tape.gather_block_rows(y, 4, 0, 2).unwrap();
        assert_eq!(tape.shape(z), &[2, 2]);
        assert_eq!(tape.value(z), &[10., 7., 10., 7.]);
    }
}
