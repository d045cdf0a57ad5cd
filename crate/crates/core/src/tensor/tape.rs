use super::ops::{
    broadcast_index_map, broadcast_shape, gelu, gelu_grad, gemm, permute_index_map, sigmoid,
    softmax_row, split_dims,
};
use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        dims: (usize, usize, usize),
        a_map: Vec<usize>,
        b_map: Vec<usize>,
        folded: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Expand { src: Var, map: Vec<usize> },
    SumAll(Var),
    SumAxis { src: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { src: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { src: Var, map: Vec<usize> },
    IndexSelect { src: Var, indices: Vec<usize> },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    Elementwise { src: Var, df: fn(f64) -> f64 },
    InvSigmoid { src: Var, eps: f64 },
    LayerNorm { src: Var, inv_std: Vec<f64> },
    Softmax(Var),
    Bilinear { grid: Var, points: Var },
    CrossEntropy { logits: Var, probs: Vec<f64>, targets: Vec<usize>, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Per-pass computation graph. Nodes are appended in execution order, so the
/// node list is already topologically sorted and backward is a reverse scan.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
}

/// Gradients of every `requires_grad` leaf, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations executed by matmuls on this tape.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the value into a fresh constant leaf; no gradient flows back.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, rg, op)
    }

    fn check_axis(&self, v: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(v).len() {
            return dim_err(format!("axis {} out of range for shape {:?}", axis, self.shape(v)));
        }
        Ok(())
    }

    /// Batched matrix product `[.., m, k] @ [.., k, n]` with broadcasting over
    /// leading batch extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return dim_err(format!("matmul: incompatible shapes {:?} and {:?}", sa, sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let Some(batch) = broadcast_shape(ba, bb) else {
            return dim_err(format!("matmul: batch extents of {:?} and {:?} do not broadcast", sa, sb));
        };
        let nb: usize = batch.iter().product();
        let folded = bb.iter().product::<usize>() == 1 && ba.iter().product::<usize>() == nb;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; nb * m * n];
        let (a_map, b_map) = if folded {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            gemm(nb * m, k, n, av, (k, 1), bv, (n, 1), &mut out, false);
            (Vec::new(), Vec::new())
        } else {
            let a_map = broadcast_index_map(&batch, ba);
            let b_map = broadcast_index_map(&batch, bb);
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for o in 0..nb {
                let ao = a_map[o] * m * k;
                let bo = b_map[o] * k * n;
                gemm(m, k, n, &av[ao..], (k, 1), &bv[bo..], (n, 1), &mut out[o * m * n..], false);
            }
            (a_map, b_map)
        };
        self.macs += (nb * m * k * n) as u64;
        let rg = self.rg(&[a, b]);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            rg,
            Op::MatMul {
                a,
                b,
                dims: (m, k, n),
                a_map,
                b_map,
                folded,
            },
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{}: shapes {:?} and {:?} differ", what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    /// Broadcasts `a` to `shape` (right-aligned; extents must match or be 1).
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        if broadcast_shape(&src, shape).as_deref() != Some(shape) {
            return dim_err(format!("cannot expand {:?} to {:?}", src, shape));
        }
        let map = broadcast_index_map(shape, &src);
        let sv = self.value(a).data();
        let data = map.iter().map(|&i| sv[i]).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Expand { src: a, map }))
    }

    /// `a + b` where `b` broadcasts to `a`'s shape (bias adds).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let be = if self.shape(b) == shape.as_slice() { b } else { self.expand(b, &shape)? };
        self.add(a, be)
    }

    /// `a * b` where `b` broadcasts to `a`'s shape.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let be = if self.shape(b) == shape.as_slice() { b } else { self.expand(b, &shape)? };
        self.mul(a, be)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis` (the axis is removed from the shape).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_dims(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::SumAxis { src: a, axis }))
    }

    /// Averages out `axis` (the axis is removed from the shape).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let len = self.shape(a)[axis];
        if len == 0 {
            return dim_err("mean over empty axis");
        }
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return dim_err("concat of zero tensors");
        };
        self.check_axis(first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return dim_err(format!("concat along {}: shapes {:?} and {:?} disagree", axis, base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_dims(&out_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            value,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        if start + len > shape[axis] {
            return dim_err(format!("narrow [{}, {}) exceeds axis {} of {:?}", start, start + len, axis, shape));
        }
        let (outer, alen, inner) = split_dims(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * alen + start) * inner;
            out.extend_from_slice(&src[b..b + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Narrow { src: a, axis, start }))
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        self.check_axis(a, axis)?;
        if sizes.iter().sum::<usize>() != self.shape(a)[axis] {
            return dim_err(format!("split sizes {:?} do not cover axis {} of {:?}", sizes, axis, self.shape(a)));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &s in sizes {
            parts.push(self.narrow(a, axis, start, s)?);
            start += s;
        }
        Ok(parts)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!("invalid permutation {:?} for shape {:?}", perm, shape));
        }
        let map = permute_index_map(&shape, perm);
        let src = self.value(a).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = Tensor::new(&out_shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Permute { src: a, map }))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return dim_err(format!("transpose_last2 on shape {:?}", self.shape(a)));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(a, &perm)
    }

    /// Gathers slices along axis 0.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || indices.iter().any(|&i| i >= shape[0]) {
            return dim_err(format!("index_select {:?} out of range for {:?}", indices, shape));
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            value,
            rg,
            Op::IndexSelect {
                src: a,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Elementwise `f` whose backward rule multiplies by the supplied `df`.
    /// The tape trusts `df`; the gradient checker is what validates it.
    pub fn elementwise(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        self.unary(a, f, Op::Elementwise { src: a, df })
    }

    /// `ln(x / (1 - x))` with `x` clamped to `[eps, 1 - eps]`; zero gradient
    /// where the clamp is active.
    pub fn inverse_sigmoid(&mut self, a: Var, eps: f64) -> Var {
        self.unary(
            a,
            move |x| {
                let x = x.clamp(eps, 1.0 - eps);
                (x / (1.0 - x)).ln()
            },
            Op::InvSigmoid { src: a, eps },
        )
    }

    /// Normalizes each row of the last axis to zero mean and unit variance.
    pub fn layer_norm_lastdim(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some(&d) = shape.last().filter(|&&d| d > 0) else {
            return dim_err(format!("layer_norm on shape {:?}", shape));
        };
        let src = self.value(a).data();
        let rows = src.len() / d;
        let mut out = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(rows);
        for r in src.chunks_exact(d) {
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(r.iter().map(|x| (x - mean) * is));
        }
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::LayerNorm { src: a, inv_std }))
    }

    /// Max-stabilized softmax over the last axis. NaN inputs propagate.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some(&d) = shape.last().filter(|&&d| d > 0) else {
            return dim_err(format!("softmax on shape {:?}", shape));
        };
        let mut out = self.value(a).data().to_vec();
        out.chunks_exact_mut(d).for_each(softmax_row);
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Softmax(a)))
    }

    /// Bilinear lookup of `grid[C, H, W]` at `points[P, 2]` given as
    /// normalized `(x, y)` in `[0, 1]²`; x runs along W, y along H, cell
    /// centers sit at `(i + 0.5) / extent`. Points are clamped to the border
    /// cell centers. Returns `[P, C]`.
    pub fn bilinear_sample(&mut self, grid: Var, points: Var) -> Result<Var> {
        let gs = self.shape(grid).to_vec();
        let ps = self.shape(points).to_vec();
        if gs.len() != 3 || ps.len() != 2 || ps[1] != 2 || gs[1] == 0 || gs[2] == 0 {
            return dim_err(format!("bilinear_sample: grid {:?}, points {:?}", gs, ps));
        }
        let (c, h, w) = (gs[0], gs[1], gs[2]);
        let g = self.value(grid).data();
        let p = self.value(points).data();
        let np = ps[0];
        let mut out = vec![0.0; np * c];
        for i in 0..np {
            let s = BilinearSite::new(p[2 * i], p[2 * i + 1], h, w);
            for ch in 0..c {
                out[i * c + ch] = s.sample(&g[ch * h * w..(ch + 1) * h * w], w);
            }
        }
        let value = Tensor::new(&[np, c], out)?;
        let rg = self.rg(&[grid, points]);
        Ok(self.push(value, rg, Op::Bilinear { grid, points }))
    }

    /// Weighted mean cross-entropy of `logits[R, K]` against class indices.
    /// `weights` (one per row) default to 1.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || targets.iter().any(|&t| t >= shape[1]) {
            return dim_err(format!("cross_entropy: logits {:?} with {} targets", shape, targets.len()));
        }
        let weights = match weights {
            Some(w) if w.len() == targets.len() => w.to_vec(),
            Some(w) => return dim_err(format!("cross_entropy: {} weights for {} rows", w.len(), targets.len())),
            None => vec![1.0; targets.len()],
        };
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(Error::Contract("cross_entropy weights must have positive sum".into()));
        }
        let k = shape[1];
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_exact_mut(k).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += weights[r] * (lse - row[targets[r]]);
            softmax_row(row);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / wsum),
            rg,
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                weights: weights.iter().map(|w| w / wsum).collect(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..nodes.len()).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
        }
        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match (&n.op, g) {
                (Op::Leaf, Some(g)) if n.requires_grad => Some(Tensor {
                    shape: n.value.shape().to_vec(),
                    data: g,
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

struct BilinearSite {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: f64,
    wy: f64,
    // d(fx)/d(u) and d(fy)/d(v); zero when clamped.
    dx: f64,
    dy: f64,
}

impl BilinearSite {
    fn new(u: f64, v: f64, h: usize, w: usize) -> Self {
        let (x0, x1, wx, dx) = Self::axis(u, w);
        let (y0, y1, wy, dy) = Self::axis(v, h);
        Self { x0, x1, y0, y1, wx, wy, dx, dy }
    }

    fn axis(t: f64, extent: usize) -> (usize, usize, f64, f64) {
        if extent == 1 {
            return (0, 0, 0.0, 0.0);
        }
        let hi = (extent - 1) as f64;
        let f = t * extent as f64 - 0.5;
        if f.is_nan() {
            return (0, 1, f64::NAN, 0.0);
        }
        let (fc, d) = if f <= 0.0 {
            (0.0, 0.0)
        } else if f >= hi {
            (hi, 0.0)
        } else {
            (f, extent as f64)
        };
        let i0 = (fc.floor() as usize).min(extent - 2);
        (i0, i0 + 1, fc - i0 as f64, d)
    }

    fn sample(&self, plane: &[f64], w: usize) -> f64 {
        let v00 = plane[self.y0 * w + self.x0];
        let v01 = plane[self.y0 * w + self.x1];
        let v10 = plane[self.y1 * w + self.x0];
        let v11 = plane[self.y1 * w + self.x1];
        let top = v00 + (v01 - v00) * self.wx;
        let bot = v10 + (v11 - v10) * self.wx;
        top + (bot - top) * self.wy
    }
}

fn accum<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul {
            a,
            b,
            dims: (m, k, n),
            a_map,
            b_map,
            folded,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (val(*a), val(*b));
            if *folded {
                let rows = g.len() / n;
                if let Some(ga) = accum(grads, nodes, *a) {
                    gemm(rows, n, k, g, (n, 1), bv, (1, n), ga, true);
                }
                if let Some(gb) = accum(grads, nodes, *b) {
                    gemm(k, rows, n, av, (1, k), g, (n, 1), gb, true);
                }
            } else {
                let nb = a_map.len();
                if let Some(ga) = accum(grads, nodes, *a) {
                    for o in 0..nb {
                        let ao = a_map[o] * m * k;
                        let bo = b_map[o] * k * n;
                        gemm(m, n, k, &g[o * m * n..], (n, 1), &bv[bo..], (1, n), &mut ga[ao..], true);
                    }
                }
                if let Some(gb) = accum(grads, nodes, *b) {
                    for o in 0..nb {
                        let ao = a_map[o] * m * k;
                        let bo = b_map[o] * k * n;
                        gemm(k, m, n, &av[ao..], (1, k), &g[o * m * n..], (n, 1), &mut gb[bo..], true);
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for (v, s) in [(*a, 1.0), (*b, 1.0)] {
                if let Some(gv) = accum(grads, nodes, v) {
                    gv.iter_mut().zip(g).for_each(|(x, d)| *x += s * d);
                }
            }
        }
        Op::Sub(a, b) => {
            for (v, s) in [(*a, 1.0), (*b, -1.0)] {
                if let Some(gv) = accum(grads, nodes, v) {
                    gv.iter_mut().zip(g).for_each(|(x, d)| *x += s * d);
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = accum(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = accum(grads, nodes, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = accum(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += s * d);
            }
        }
        Op::Expand { src, map } => {
            if let Some(gs) = accum(grads, nodes, *src) {
                for (o, &i) in map.iter().enumerate() {
                    gs[i] += g[o];
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(ga) = accum(grads, nodes, *a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::SumAxis { src, axis } => {
            let (outer, len, inner) = split_dims(nodes[src.0].value.shape(), *axis);
            if let Some(gs) = accum(grads, nodes, *src) {
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            gs[base + i] += g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_dims(node.value.shape(), *axis);
            let mut offset = 0;
            for &v in inputs {
                let len = nodes[v.0].value.shape()[*axis];
                if let Some(gv) = accum(grads, nodes, v) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        for i in 0..len * inner {
                            gv[dst + i] += g[src + i];
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Narrow { src, axis, start } => {
            let (outer, alen, inner) = split_dims(nodes[src.0].value.shape(), *axis);
            let len = node.value.shape()[*axis];
            if let Some(gs) = accum(grads, nodes, *src) {
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    let srci = o * len * inner;
                    for i in 0..len * inner {
                        gs[dst + i] += g[srci + i];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = accum(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
            }
        }
        Op::Permute { src, map } => {
            if let Some(gs) = accum(grads, nodes, *src) {
                for (o, &i) in map.iter().enumerate() {
                    gs[i] += g[o];
                }
            }
        }
        Op::IndexSelect { src, indices } => {
            let inner = node.value.numel() / indices.len().max(1);
            if let Some(gs) = accum(grads, nodes, *src) {
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..inner {
                        gs[i * inner + j] += g[r * inner + j];
                    }
                }
            }
        }
        Op::Relu(a) => {
            let av = val(*a);
            if let Some(ga) = accum(grads, nodes, *a) {
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let av = val(*a);
            if let Some(ga) = accum(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * gelu_grad(av[i]);
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = accum(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        Op::Elementwise { src, df } => {
            let av = val(*src);
            if let Some(ga) = accum(grads, nodes, *src) {
                for i in 0..g.len() {
                    ga[i] += g[i] * df(av[i]);
                }
            }
        }
        Op::Sin(a) => {
            let av = val(*a);
            if let Some(ga) = accum(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * av[i].cos();
                }
            }
        }
        Op::Cos(a) => {
            let av = val(*a);
            if let Some(ga) = accum(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] -= g[i] * av[i].sin();
                }
            }
        }
        Op::Abs(a) => {
            let av = val(*a);
            if let Some(ga) = accum(grads, nodes, *a) {
                for i in 0..g.len() {
                    let s = if av[i] > 0.0 {
                        1.0
                    } else if av[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    ga[i] += g[i] * s;
                }
            }
        }
        Op::InvSigmoid { src, eps } => {
            let av = val(*src);
            if let Some(ga) = accum(grads, nodes, *src) {
                for i in 0..g.len() {
                    let x = av[i];
                    if x > *eps && x < 1.0 - eps {
                        ga[i] += g[i] / (x * (1.0 - x));
                    }
                }
            }
        }
        Op::LayerNorm { src, inv_std } => {
            let d = *node.value.shape().last().unwrap();
            if let Some(gs) = accum(grads, nodes, *src) {
                for (r, &is) in inv_std.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mg = gr.iter().sum::<f64>() / d as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gs[r * d + j] += is * (gr[j] - mg - yr[j] * mgy);
                    }
                }
            }
        }
        Op::Softmax(a) => {
            let d = *node.value.shape().last().unwrap();
            if let Some(ga) = accum(grads, nodes, *a) {
                for r in 0..y.len() / d {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..d {
                        ga[r * d + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::Bilinear { grid, points } => {
            let gs = nodes[grid.0].value.shape();
            let (c, h, w) = (gs[0], gs[1], gs[2]);
            let gv = val(*grid);
            let pv = val(*points);
            let np = pv.len() / 2;
            let sites: Vec<BilinearSite> =
                (0..np).map(|i| BilinearSite::new(pv[2 * i], pv[2 * i + 1], h, w)).collect();
            if let Some(gg) = accum(grads, nodes, *grid) {
                for (i, s) in sites.iter().enumerate() {
                    for ch in 0..c {
                        let d = g[i * c + ch];
                        let base = ch * h * w;
                        gg[base + s.y0 * w + s.x0] += d * (1.0 - s.wx) * (1.0 - s.wy);
                        gg[base + s.y0 * w + s.x1] += d * s.wx * (1.0 - s.wy);
                        gg[base + s.y1 * w + s.x0] += d * (1.0 - s.wx) * s.wy;
                        gg[base + s.y1 * w + s.x1] += d * s.wx * s.wy;
                    }
                }
            }
            if let Some(gp) = accum(grads, nodes, *points) {
                for (i, s) in sites.iter().enumerate() {
                    let (mut du, mut dv) = (0.0, 0.0);
                    for ch in 0..c {
                        let d = g[i * c + ch];
                        let plane = &gv[ch * h * w..(ch + 1) * h * w];
                        let v00 = plane[s.y0 * w + s.x0];
                        let v01 = plane[s.y0 * w + s.x1];
                        let v10 = plane[s.y1 * w + s.x0];
                        let v11 = plane[s.y1 * w + s.x1];
                        du += d * ((v01 - v00) * (1.0 - s.wy) + (v11 - v10) * s.wy);
                        dv += d * ((v10 - v00) * (1.0 - s.wx) + (v11 - v01) * s.wx);
                    }
                    gp[2 * i] += du * s.dx;
                    gp[2 * i + 1] += dv * s.dy;
                }
            }
        }
        Op::CrossEntropy {
            logits,
            probs,
            targets,
            weights,
        } => {
            let k = nodes[logits.0].value.shape()[1];
            if let Some(gl) = accum(grads, nodes, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    let s = g[0] * weights[r];
                    for j in 0..k {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[r * k + j] += s * (probs[r * k + j] - onehot);
                    }
                }
            }
        }
    }
}
