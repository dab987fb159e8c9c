use std::collections::HashMap;

use super::{ParamId, ParamStore, Shape, Tensor};
use crate::error::{GmrlError, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    ClampMin(Var, f64),
    MatMul(Var, Var),
    BatchedMatMul(Var, Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    SumAxis(Var),
    SumAll(Var),
    BroadcastTo(Var),
    Gather { src: Var, axis: usize, index: Vec<usize> },
    Conv1d { input: Var, kernel: Var, dilation: usize },
    Reshape(Var),
    Permute(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitive applications in execution order; since operands always
/// precede results, a reverse sweep over the node list is a valid
/// topological order for the backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn mismatch(op: &'static str, lhs: &Shape, rhs: &Shape) -> GmrlError {
    GmrlError::ShapeMismatch {
        op,
        lhs: lhs.clone(),
        rhs: rhs.clone(),
    }
}

fn broadcast_shape(op: &'static str, a: &Shape, b: &Shape) -> Result<Shape> {
    if a.rank() != b.rank() {
        return Err(mismatch(op, a, b));
    }
    let mut dims = Vec::with_capacity(a.rank());
    for (&x, &y) in a.dims().iter().zip(b.dims()) {
        dims.push(match (x, y) {
            _ if x == y => x,
            (1, _) => y,
            (_, 1) => x,
            _ => return Err(mismatch(op, a, b)),
        });
    }
    Shape::new(dims)
}

/// Strides of `src` read as if it were expanded to `out`; broadcast axes get 0.
fn expand_strides(src: &Shape, out: &Shape) -> Vec<usize> {
    let strides = src.strides();
    src.dims()
        .iter()
        .zip(out.dims())
        .zip(strides)
        .map(|((&s, &o), st)| if s == 1 && o != 1 { 0 } else { st })
        .collect()
}

/// Visits every output position of `out` with the matching offsets into two
/// strided operands.
fn for_each_offset2(
    out: &Shape,
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let dims = out.dims();
    let rank = dims.len();
    let n = out.numel();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = [0usize; Shape::MAX_RANK];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        let mut ax = rank - 1;
        loop {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < dims[ax] {
                break;
            }
            ia -= sa[ax] * dims[ax];
            ib -= sb[ax] * dims[ax];
            idx[ax] = 0;
            if ax == 0 {
                break;
            }
            ax -= 1;
        }
    }
}

/// Sums `g` (shaped like the broadcast output) back down to `target`.
fn reduce_to(g: &Tensor, target: &Shape) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let mut out = Tensor::zeros(target.clone());
    let st = expand_strides(target, g.shape());
    let zeros = vec![0; st.len()];
    let gd = g.data();
    let od = out.data_mut();
    for_each_offset2(g.shape(), &st, &zeros, |o, i, _| od[i] += gd[o]);
    out
}

fn check_axis(op: &'static str, shape: &Shape, axis: usize) -> Result<()> {
    if axis >= shape.rank() {
        return Err(GmrlError::InvalidShape(format!(
            "{op}: axis {axis} out of range for {shape}"
        )));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(GmrlError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input. Gradients with respect to it are available
    /// through [`Graph::grad_of`].
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf)
    }

    /// Records (once) the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push("param", store.value(id).clone(), Op::Param(id))?;
        self.params.insert(id, v);
        Ok(v)
    }

    // ---------------------------------------------------------------- binary

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).clone(), self.shape(b).clone());
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut data = vec![0.0; out_shape.numel()];
            let (ea, eb) = (expand_strides(&sa, &out_shape), expand_strides(&sb, &out_shape));
            for_each_offset2(&out_shape, &ea, &eb, |o, i, j| data[o] = f(ad[i], bd[j]));
            data
        };
        self.push(name, Tensor::new(out_shape, data)?, op)
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

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    /// Adds a rank-1 `bias[n]` along the last axis of `x[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let rank = self.shape(x).rank();
        let sb = self.shape(bias).clone();
        if sb.rank() != 1 || rank == 0 {
            return Err(mismatch("add_bias", self.shape(x), &sb));
        }
        let mut dims = vec![1; rank];
        dims[rank - 1] = sb.dims()[0];
        let b = self.reshape(bias, &dims)?;
        self.add(x, b)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary("clamp_min", x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    // ---------------------------------------------------------- linear maps

    /// `x[..., k] · w[k, n] -> [..., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).clone(), self.shape(w).clone());
        if sw.rank() != 2 || sx.rank() == 0 || sx.dims()[sx.rank() - 1] != sw.dims()[0] {
            return Err(mismatch("matmul", &sx, &sw));
        }
        let (k, n) = (sw.dims()[0], sw.dims()[1]);
        let rows = sx.numel() / k;
        let mut dims = sx.dims().to_vec();
        *dims.last_mut().unwrap() = n;
        let mut out = vec![0.0; rows * n];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        for r in 0..rows {
            let orow = &mut out[r * n..(r + 1) * n];
            for (kk, &a) in xd[r * k..(r + 1) * k].iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(&wd[kk * n..(kk + 1) * n]) {
                    *o += a * b;
                }
            }
        }
        self.push("matmul", Tensor::new(Shape::new(dims)?, out)?, Op::MatMul(x, w))
    }

    /// `a[g, m, p] · b[g, p, n] -> [g, m, n]`.
    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).clone(), self.shape(b).clone());
        let (da, db) = (sa.dims(), sb.dims());
        if sa.rank() != 3 || sb.rank() != 3 || da[0] != db[0] || da[2] != db[1] {
            return Err(mismatch("batched_matmul", &sa, &sb));
        }
        let (g, m, p, n) = (da[0], da[1], da[2], db[2]);
        let mut out = vec![0.0; g * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for gi in 0..g {
            for mi in 0..m {
                let orow = &mut out[(gi * m + mi) * n..(gi * m + mi + 1) * n];
                let arow = &ad[(gi * m + mi) * p..(gi * m + mi + 1) * p];
                for (pi, &x) in arow.iter().enumerate() {
                    let brow = &bd[(gi * p + pi) * n..(gi * p + pi + 1) * n];
                    for (o, &y) in orow.iter_mut().zip(brow) {
                        *o += x * y;
                    }
                }
            }
        }
        self.push(
            "batched_matmul",
            Tensor::from_vec(&[g, m, n], out)?,
            Op::BatchedMatMul(a, b),
        )
    }

    // ------------------------------------------------------------ softmaxes

    fn lanewise(&mut self, name: &'static str, x: Var, axis: usize, log: bool, op: Op) -> Result<Var> {
        let shape = self.shape(x).clone();
        check_axis(name, &shape, axis)?;
        let (outer, n, inner) = shape.lanes(axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| xd[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = (0..n).map(|j| (xd[at(j)] - max).exp()).sum();
                let lse = max + denom.ln();
                for j in 0..n {
                    out[at(j)] = if log {
                        xd[at(j)] - lse
                    } else {
                        (xd[at(j)] - max).exp() / denom
                    };
                }
            }
        }
        self.push(name, Tensor::new(shape, out)?, op)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.lanewise("softmax", x, axis, false, Op::Softmax(x, axis))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.lanewise("log_softmax", x, axis, true, Op::LogSoftmax(x, axis))
    }

    // ---------------------------------------------------- structural / shape

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .map(|&v| self.shape(v).clone())
            .ok_or_else(|| GmrlError::InvalidShape("concat of zero operands".into()))?;
        check_axis("concat", &first, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same_elsewhere = s.rank() == first.rank()
                && s.dims()
                    .iter()
                    .zip(first.dims())
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !same_elsewhere {
                return Err(mismatch("concat", &first, s));
            }
            total += s.dims()[axis];
        }
        let mut dims = first.dims().to_vec();
        dims[axis] = total;
        let out_shape = Shape::new(dims)?;
        let (outer, _, inner) = out_shape.lanes(axis);
        let mut out = Vec::with_capacity(out_shape.numel());
        for o in 0..outer {
            for &v in xs {
                let width = self.shape(v).dims()[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * width..(o + 1) * width]);
            }
        }
        self.push("concat", Tensor::new(out_shape, out)?, Op::Concat(xs.to_vec(), axis))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).clone();
        check_axis("slice", &shape, axis)?;
        if len == 0 || start + len > shape.dims()[axis] {
            return Err(GmrlError::InvalidShape(format!(
                "slice [{start}, {}) out of range for axis {axis} of {shape}",
                start + len
            )));
        }
        let (outer, n, inner) = shape.lanes(axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut dims = shape.dims().to_vec();
        dims[axis] = len;
        self.push(
            "slice",
            Tensor::from_vec(&dims, out)?,
            Op::Slice { x, axis, start },
        )
    }

    /// Sum along `axis`, keeping it as an extent-1 axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).clone();
        check_axis("sum_axis", &shape, axis)?;
        let (outer, n, inner) = shape.lanes(axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &xd[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut dims = shape.dims().to_vec();
        dims[axis] = 1;
        self.push("sum_axis", Tensor::from_vec(&dims, out)?, Op::SumAxis(x))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self
            .shape(x)
            .dims()
            .get(axis)
            .copied()
            .ok_or_else(|| GmrlError::InvalidShape(format!("mean_axis: bad axis {axis}")))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        self.push("sum_all", Tensor::scalar(total), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Expands extent-1 axes to `dims` (ranks must agree).
    pub fn broadcast_to(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let src = self.shape(x).clone();
        let target = Shape::new(dims)?;
        let out_shape = broadcast_shape("broadcast_to", &src, &target)?;
        if out_shape != target {
            return Err(mismatch("broadcast_to", &src, &target));
        }
        let es = expand_strides(&src, &target);
        let zeros = vec![0; es.len()];
        let xd = self.value(x).data();
        let mut out = vec![0.0; target.numel()];
        for_each_offset2(&target, &es, &zeros, |o, i, _| out[o] = xd[i]);
        self.push("broadcast_to", Tensor::new(target, out)?, Op::BroadcastTo(x))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(dims)?;
        self.push("reshape", value, Op::Reshape(x))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).clone();
        let mut seen = vec![false; shape.rank()];
        if axes.len() != shape.rank()
            || axes.iter().any(|&a| a >= shape.rank() || std::mem::replace(&mut seen[a], true))
        {
            return Err(GmrlError::InvalidShape(format!(
                "permute: {axes:?} is not a permutation of the axes of {shape}"
            )));
        }
        let out_shape = Shape::new(axes.iter().map(|&a| shape.dims()[a]).collect::<Vec<_>>())?;
        let strides = shape.strides();
        let ps: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
        let zeros = vec![0; ps.len()];
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for_each_offset2(&out_shape, &ps, &zeros, |o, i, _| out[o] = xd[i]);
        self.push(
            "permute",
            Tensor::new(out_shape, out)?,
            Op::Permute(x, axes.to_vec()),
        )
    }

    /// `out[.., j, ..] = src[.., index[.., j, ..], ..]` along `axis`; `index`
    /// has the shape of the output and agrees with `src` off `axis`.
    pub fn gather(&mut self, src: Var, axis: usize, index: &[usize], index_dims: &[usize]) -> Result<Var> {
        let ss = self.shape(src).clone();
        let is = Shape::new(index_dims)?;
        check_axis("gather", &ss, axis)?;
        let agree = ss.rank() == is.rank()
            && ss
                .dims()
                .iter()
                .zip(is.dims())
                .enumerate()
                .all(|(ax, (a, b))| ax == axis || a == b);
        if !agree || index.len() != is.numel() {
            return Err(mismatch("gather", &ss, &is));
        }
        let (outer, n_src, inner) = ss.lanes(axis);
        let (_, n_idx, _) = is.lanes(axis);
        if let Some(&bad) = index.iter().find(|&&k| k >= n_src) {
            return Err(GmrlError::InvalidShape(format!(
                "gather: index {bad} out of range for axis {axis} of {ss}"
            )));
        }
        let sd = self.value(src).data();
        let mut out = vec![0.0; index.len()];
        for o in 0..outer {
            for j in 0..n_idx {
                for i in 0..inner {
                    let p = (o * n_idx + j) * inner + i;
                    out[p] = sd[(o * n_src + index[p]) * inner + i];
                }
            }
        }
        self.push(
            "gather",
            Tensor::new(is, out)?,
            Op::Gather {
                src,
                axis,
                index: index.to_vec(),
            },
        )
    }

    /// Dilated causal convolution along axis 1 of `input[b, t, n, c_in]` with
    /// `kernel[tap, c_in, c_out]`. The input is left-padded with
    /// `dilation * (taps - 1)` zeros so the time extent is preserved; the last
    /// tap reads the current step and tap `j` reads `t - dilation * (taps-1-j)`.
    pub fn dilated_causal_conv1d(&mut self, input: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).clone(), self.shape(kernel).clone());
        if si.rank() != 4 || sk.rank() != 3 || si.dims()[3] != sk.dims()[1] || dilation == 0 {
            return Err(mismatch("dilated_causal_conv1d", &si, &sk));
        }
        let [b, t, n, cin] = [si.dims()[0], si.dims()[1], si.dims()[2], si.dims()[3]];
        let (taps, cout) = (sk.dims()[0], sk.dims()[2]);
        let (xd, kd) = (self.value(input).data(), self.value(kernel).data());
        let mut out = vec![0.0; b * t * n * cout];
        for bi in 0..b {
            for ti in 0..t {
                for j in 0..taps {
                    let shift = dilation * (taps - 1 - j);
                    if shift > ti {
                        continue;
                    }
                    let src_t = ti - shift;
                    let kj = &kd[j * cin * cout..(j + 1) * cin * cout];
                    for ni in 0..n {
                        let xrow = &xd[((bi * t + src_t) * n + ni) * cin..][..cin];
                        let orow = &mut out[((bi * t + ti) * n + ni) * cout..][..cout];
                        for (c, &x) in xrow.iter().enumerate() {
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &w) in orow.iter_mut().zip(&kj[c * cout..(c + 1) * cout]) {
                                *o += x * w;
                            }
                        }
                    }
                }
            }
        }
        self.push(
            "dilated_causal_conv1d",
            Tensor::from_vec(&[b, t, n, cout], out)?,
            Op::Conv1d {
                input,
                kernel,
                dilation,
            },
        )
    }

    // -------------------------------------------------------------- backward

    /// Reverse sweep from a single-element `loss`; returns the adjoint of
    /// every node (None where the loss does not depend on it).
    fn adjoints(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(GmrlError::NonScalarLoss(ls.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(ls.clone(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    /// Zeroes every parameter gradient in `store`, then fills the gradients of
    /// the parameters reachable from `loss`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.adjoints(loss)?;
        store.zero_grad();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
        Ok(())
    }

    /// Gradients of `loss` with respect to arbitrary recorded values.
    pub fn grad_of(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.adjoints(loss)?;
        Ok(wrt
            .iter()
            .map(|v| match grads.get(v.0) {
                Some(Some(g)) => g.clone(),
                _ => Tensor::zeros(self.shape(*v).clone()),
            })
            .collect())
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, reduce_to(g, self.shape(*a)));
                acc(*b, reduce_to(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                acc(*a, reduce_to(g, self.shape(*a)));
                acc(*b, reduce_to(&g.map(|x| -x), self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (ga, gb) = self.binary_vjp(*a, *b, g, |_, y| y, |x, _| x);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Div(a, b) => {
                let (ga, gb) = self.binary_vjp(*a, *b, g, |_, y| 1.0 / y, |x, y| -x / (y * y));
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Exp(x) => acc(*x, zip_map(g, y, |g, y| g * y)),
            Op::Log(x) => acc(*x, zip_map(g, self.value(*x), |g, x| g / x)),
            Op::Tanh(x) => acc(*x, zip_map(g, y, |g, y| g * (1.0 - y * y))),
            Op::Sigmoid(x) => acc(*x, zip_map(g, y, |g, y| g * y * (1.0 - y))),
            Op::Relu(x) => acc(*x, zip_map(g, self.value(*x), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::ClampMin(x, floor) => {
                let f = *floor;
                acc(*x, zip_map(g, self.value(*x), |g, x| if x > f { g } else { 0.0 }))
            }
            Op::MatMul(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (k, n) = (wv.dims()[0], wv.dims()[1]);
                let rows = xv.numel() / k;
                let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
                let mut gx = vec![0.0; xv.numel()];
                let mut gw = vec![0.0; wv.numel()];
                for r in 0..rows {
                    let grow = &gd[r * n..(r + 1) * n];
                    for kk in 0..k {
                        let wrow = &wd[kk * n..(kk + 1) * n];
                        gx[r * k + kk] = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                        let a = xd[r * k + kk];
                        if a != 0.0 {
                            for (o, &gg) in gw[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                                *o += a * gg;
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(xv.shape().clone(), gx).expect("shape"));
                acc(*w, Tensor::new(wv.shape().clone(), gw).expect("shape"));
            }
            Op::BatchedMatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (gn, m, p, n) = (av.dims()[0], av.dims()[1], av.dims()[2], bv.dims()[2]);
                let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                let mut ga = vec![0.0; av.numel()];
                let mut gb = vec![0.0; bv.numel()];
                for gi in 0..gn {
                    for mi in 0..m {
                        let grow = &gd[(gi * m + mi) * n..][..n];
                        for pi in 0..p {
                            let brow = &bd[(gi * p + pi) * n..][..n];
                            ga[(gi * m + mi) * p + pi] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            let x = ad[(gi * m + mi) * p + pi];
                            for (o, &gg) in gb[(gi * p + pi) * n..][..n].iter_mut().zip(grow) {
                                *o += x * gg;
                            }
                        }
                    }
                }
                acc(*a, Tensor::new(av.shape().clone(), ga).expect("shape"));
                acc(*b, Tensor::new(bv.shape().clone(), gb).expect("shape"));
            }
            Op::Softmax(x, axis) | Op::LogSoftmax(x, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let (outer, n, inner) = y.shape().lanes(*axis);
                let (yd, gd) = (y.data(), g.data());
                let mut gx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        if log {
                            let gsum: f64 = (0..n).map(|j| gd[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] = gd[at(j)] - yd[at(j)].exp() * gsum;
                            }
                        } else {
                            let dot: f64 = (0..n).map(|j| gd[at(j)] * yd[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(y.shape().clone(), gx).expect("shape"));
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = y.shape().lanes(*axis);
                let gd = g.data();
                let mut offset = 0;
                for &v in xs {
                    let s = self.shape(v);
                    let width = s.dims()[*axis];
                    let mut part = Vec::with_capacity(s.numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        part.extend_from_slice(&gd[base..base + width * inner]);
                    }
                    offset += width;
                    acc(v, Tensor::new(s.clone(), part).expect("shape"));
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let (outer, n, inner) = s.lanes(*axis);
                let len = y.dims()[*axis];
                let mut gx = vec![0.0; s.numel()];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, Tensor::new(s.clone(), gx).expect("shape"));
            }
            Op::BroadcastTo(x) => acc(*x, reduce_to(g, self.shape(*x))),
            Op::SumAxis(x) => {
                let s = self.shape(*x).clone();
                let es = expand_strides(g.shape(), &s);
                let zeros = vec![0; es.len()];
                let gd = g.data();
                let mut gx = vec![0.0; s.numel()];
                for_each_offset2(&s, &es, &zeros, |o, i, _| gx[o] = gd[i]);
                acc(*x, Tensor::new(s, gx).expect("shape"));
            }
            Op::SumAll(x) => acc(*x, Tensor::full(self.shape(*x).clone(), g.item())),
            Op::Gather { src, axis, index } => {
                let ss = self.shape(*src);
                let (outer, n_src, inner) = ss.lanes(*axis);
                let n_idx = y.dims()[*axis];
                let gd = g.data();
                let mut gs = vec![0.0; ss.numel()];
                for o in 0..outer {
                    for j in 0..n_idx {
                        for i in 0..inner {
                            let p = (o * n_idx + j) * inner + i;
                            gs[(o * n_src + index[p]) * inner + i] += gd[p];
                        }
                    }
                }
                acc(*src, Tensor::new(ss.clone(), gs).expect("shape"));
            }
            Op::Conv1d {
                input,
                kernel,
                dilation,
            } => {
                let (xv, kv) = (self.value(*input), self.value(*kernel));
                let [b, t, n, cin] = [xv.dims()[0], xv.dims()[1], xv.dims()[2], xv.dims()[3]];
                let (taps, cout) = (kv.dims()[0], kv.dims()[2]);
                let (xd, kd, gd) = (xv.data(), kv.data(), g.data());
                let mut gx = vec![0.0; xv.numel()];
                let mut gk = vec![0.0; kv.numel()];
                for bi in 0..b {
                    for ti in 0..t {
                        for j in 0..taps {
                            let shift = dilation * (taps - 1 - j);
                            if shift > ti {
                                continue;
                            }
                            let src_t = ti - shift;
                            let kj = &kd[j * cin * cout..(j + 1) * cin * cout];
                            let gkj = &mut gk[j * cin * cout..(j + 1) * cin * cout];
                            for ni in 0..n {
                                let xoff = ((bi * t + src_t) * n + ni) * cin;
                                let grow = &gd[((bi * t + ti) * n + ni) * cout..][..cout];
                                for c in 0..cin {
                                    let krow = &kj[c * cout..(c + 1) * cout];
                                    gx[xoff + c] += grow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                                    let x = xd[xoff + c];
                                    for (o, &gg) in gkj[c * cout..(c + 1) * cout].iter_mut().zip(grow) {
                                        *o += x * gg;
                                    }
                                }
                            }
                        }
                    }
                }
                acc(*input, Tensor::new(xv.shape().clone(), gx).expect("shape"));
                acc(*kernel, Tensor::new(kv.shape().clone(), gk).expect("shape"));
            }
            Op::Reshape(x) => {
                let s = self.shape(*x);
                acc(*x, Tensor::new(s.clone(), g.data().to_vec()).expect("shape"));
            }
            Op::Permute(x, axes) => {
                let s = self.shape(*x);
                let strides = s.strides();
                let ps: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
                let zeros = vec![0; ps.len()];
                let gd = g.data();
                let mut gx = vec![0.0; s.numel()];
                for_each_offset2(y.shape(), &ps, &zeros, |o, i, _| gx[i] = gd[o]);
                acc(*x, Tensor::new(s.clone(), gx).expect("shape"));
            }
        }
    }

    fn binary_vjp(
        &self,
        a: Var,
        b: Var,
        g: &Tensor,
        dfa: impl Fn(f64, f64) -> f64,
        dfb: impl Fn(f64, f64) -> f64,
    ) -> (Tensor, Tensor) {
        let (av, bv) = (self.value(a), self.value(b));
        let out = g.shape();
        let mut ga = vec![0.0; av.numel()];
        let mut gb = vec![0.0; bv.numel()];
        let (ad, bd, gd) = (av.data(), bv.data(), g.data());
        let (ea, eb) = (expand_strides(av.shape(), out), expand_strides(bv.shape(), out));
        for_each_offset2(out, &ea, &eb, |o, i, j| {
            ga[i] += gd[o] * dfa(ad[i], bd[j]);
            gb[j] += gd[o] * dfb(ad[i], bd[j]);
        });
        (
            Tensor::new(av.shape().clone(), ga).expect("shape"),
            Tensor::new(bv.shape().clone(), gb).expect("shape"),
        )
    }
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(g.shape().clone(), data).expect("shape")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
