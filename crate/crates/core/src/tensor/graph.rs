use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::ops::{col2im, conv_out_extent, im2col, matmul_acc, pool_bounds};
use super::{dim_err, Real, Tensor, TensorError, NORM_EPS};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Constant,
    Leaf,
    Op,
}

struct Ctx<'a, T> {
    grad: &'a [T],
    out: &'a Tensor<T>,
    inputs: Vec<&'a Tensor<T>>,
    needs: Vec<bool>,
}

type BackwardFn<T> = Box<dyn Fn(&Ctx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    op: &'static str,
    kind: Kind,
    value: Tensor<T>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// A tape of recorded operations.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the backward sweep is a single reverse pass.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar loss with respect to every node of a graph.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; all zeros for constants and nodes the loss does not reach.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn slice(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(dim_err(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_node("constant", Kind::Constant, t, Vec::new(), false, None)
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push_node("leaf", Kind::Leaf, t, Vec::new(), true, None)
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

    /// Hash of the recorded structure: operator names, shapes and wiring, not values.
    pub fn structure_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for n in &self.nodes {
            n.op.hash(&mut h);
            (n.kind as u8).hash(&mut h);
            n.value.shape().hash(&mut h);
            n.parents.hash(&mut h);
        }
        h.finish()
    }

    fn push_node(
        &mut self,
        op: &'static str,
        kind: Kind,
        value: Tensor<T>,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> Var {
        self.nodes.push(Node {
            op,
            kind,
            value,
            parents,
            requires_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var],
        backward: BackwardFn<T>,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let parents = parents.iter().map(|p| p.0).collect();
        self.push_node(op, Kind::Op, value, parents, requires_grad, Some(backward))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.kind != Kind::Op {
                continue;
            }
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let backward = node
                .backward
                .as_ref()
                .expect("op nodes carry a backward fn");
            let ctx = Ctx {
                grad: &grad,
                out: &node.value,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(grad);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "add")?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push_op(
            "add",
            out,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.to_vec()),
                    c.needs[1].then(|| c.grad.to_vec()),
                ]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "sub")?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| *x - *y)
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push_op(
            "sub",
            out,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad.to_vec()),
                    c.needs[1].then(|| c.grad.iter().map(|g| -*g).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "mul")?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| *x * *y)
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push_op(
            "mul",
            out,
            &[a, b],
            Box::new(|c| {
                let prod =
                    |o: &Tensor<T>| c.grad.iter().zip(o.data()).map(|(g, v)| *g * *v).collect();
                vec![
                    c.needs[0].then(|| prod(c.inputs[1])),
                    c.needs[1].then(|| prod(c.inputs[0])),
                ]
            }),
        ))
    }

    /// `scale * a + shift` with scalar constants.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let out = self.value(a).map(|v| scale * v + shift);
        self.push_op(
            "affine",
            out,
            &[a],
            Box::new(move |c| vec![Some(c.grad.iter().map(|g| *g * scale).collect())]),
        )
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.affine(a, s, T::zero())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.push_op(
            "relu",
            out,
            &[a],
            Box::new(|c| {
                let g = c
                    .grad
                    .iter()
                    .zip(c.inputs[0].data())
                    .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push_op(
            "reshape",
            out,
            &[a],
            Box::new(|c| vec![Some(c.grad.to_vec())]),
        ))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        self.push_op(
            "sum",
            Tensor::scalar(T::of(s)),
            &[a],
            Box::new(|c| vec![Some(vec![c.grad[0]; c.inputs[0].numel()])]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.numel().max(1);
        let s: f64 = av.data().iter().map(|v| v.as_f64()).sum();
        self.push_op(
            "mean",
            Tensor::scalar(T::of(s / n as f64)),
            &[a],
            Box::new(move |c| vec![Some(vec![c.grad[0] / T::of(n as f64); n])]),
        )
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var, TensorError> {
        if terms.is_empty() {
            return Err(TensorError::Contract("weighted_sum of no terms".into()));
        }
        let mut s = 0.0f64;
        for (v, w) in terms {
            let val = self.value(*v);
            if val.numel() != 1 {
                return Err(dim_err(format!(
                    "weighted_sum term of shape {:?}",
                    val.shape()
                )));
            }
            s += val.item().as_f64() * w.as_f64();
        }
        let weights: Vec<T> = terms.iter().map(|t| t.1).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push_op(
            "weighted_sum",
            Tensor::scalar(T::of(s)),
            &vars,
            Box::new(move |c| weights.iter().map(|w| Some(vec![c.grad[0] * *w])).collect()),
        ))
    }

    /// Packs scalar nodes into a `[1, k]` row, e.g. logits of one example.
    pub fn stack_scalars(&mut self, items: &[Var]) -> Result<Var, TensorError> {
        let mut data = Vec::with_capacity(items.len());
        for v in items {
            let val = self.value(*v);
            if val.numel() != 1 {
                return Err(dim_err(format!(
                    "stack_scalars item of shape {:?}",
                    val.shape()
                )));
            }
            data.push(val.item());
        }
        let out = Tensor::new(&[1, items.len()], data)?;
        Ok(self.push_op(
            "stack_scalars",
            out,
            items,
            Box::new(|c| c.grad.iter().map(|g| Some(vec![*g])).collect()),
        ))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let (n, k) = match lv.shape() {
            [n, k] => (*n, *k),
            s => {
                return Err(dim_err(format!(
                    "cross_entropy expects [N, K] logits, got {s:?}"
                )))
            }
        };
        if targets.len() != n || targets.iter().any(|&t| t >= k) {
            return Err(dim_err(format!(
                "cross_entropy: {} targets for {n} rows of {k} classes",
                targets.len()
            )));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut loss = 0.0f64;
        for (i, row) in lv.data().chunks(k).enumerate() {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let z: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
            for (j, v) in row.iter().enumerate() {
                probs[i * k + j] = T::of((v.as_f64() - m).exp() / z);
            }
            loss += m + z.ln() - row[targets[i]].as_f64();
        }
        let targets = targets.to_vec();
        Ok(self.push_op(
            "cross_entropy",
            Tensor::scalar(T::of(loss / n as f64)),
            &[logits],
            Box::new(move |c| {
                let scale = c.grad[0] / T::of(n as f64);
                let mut g = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    g[i * k + t] -= T::one();
                }
                g.iter_mut().for_each(|v| *v *= scale);
                vec![Some(g)]
            }),
        ))
    }

    // ---------------------------------------------------------------- dense layers

    /// `x · wᵀ + b` for `x: [N, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, i, o) = match (xv.shape(), wv.shape()) {
            ([n, i], [o, i2]) if i == i2 => (*n, *i, *o),
            (xs, ws) => return Err(dim_err(format!("linear: input {xs:?} with weight {ws:?}"))),
        };
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(dim_err(format!(
                    "linear: bias {:?} for {o} outputs",
                    self.shape(b)
                )));
            }
        }
        let mut out = vec![T::zero(); n * o];
        for r in 0..n {
            let xr = &xv.data()[r * i..(r + 1) * i];
            for q in 0..o {
                let wr = &wv.data()[q * i..(q + 1) * i];
                out[r * o + q] = xr.iter().zip(wr).fold(T::zero(), |s, (a, b)| s + *a * *b);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bv).for_each(|(v, b)| *v += *b);
            }
        }
        let out = Tensor::new(&[n, o], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push_op(
            "linear",
            out,
            &parents,
            Box::new(move |c| {
                let (xd, wd, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad);
                let dx = c.needs[0].then(|| {
                    let mut dx = vec![T::zero(); n * i];
                    for r in 0..n {
                        for q in 0..o {
                            let gv = g[r * o + q];
                            let wr = &wd[q * i..(q + 1) * i];
                            dx[r * i..(r + 1) * i]
                                .iter_mut()
                                .zip(wr)
                                .for_each(|(d, w)| *d += gv * *w);
                        }
                    }
                    dx
                });
                let dw = c.needs[1].then(|| {
                    let mut dw = vec![T::zero(); o * i];
                    for r in 0..n {
                        let xr = &xd[r * i..(r + 1) * i];
                        for q in 0..o {
                            let gv = g[r * o + q];
                            dw[q * i..(q + 1) * i]
                                .iter_mut()
                                .zip(xr)
                                .for_each(|(d, x)| *d += gv * *x);
                        }
                    }
                    dw
                });
                let mut res = vec![dx, dw];
                if c.inputs.len() == 3 {
                    res.push(c.needs[2].then(|| {
                        let mut db = vec![T::zero(); o];
                        for row in g.chunks(o) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += *v);
                        }
                        db
                    }));
                }
                res
            }),
        ))
    }

    /// 2-D convolution (cross-correlation) of `x: [N, Cin, H, W]` with
    /// `w: [Cout, Cin, KH, KW]`, zero padding and a common stride.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let [n, cin, h, wd] = self.value(x).dims4()?;
        let [cout, cin2, kh, kw] = self.value(w).dims4()?;
        if cin != cin2 || stride == 0 {
            return Err(dim_err(format!(
                "conv2d: input {:?} with weight {:?}, stride {stride}",
                self.shape(x),
                self.shape(w)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(dim_err(format!(
                    "conv2d: bias {:?} for {cout} outputs",
                    self.shape(b)
                )));
            }
        }
        let oh = conv_out_extent(h, kh, stride, pad)
            .ok_or_else(|| dim_err(format!("conv2d: kernel {kh} does not fit height {h}")))?;
        let ow = conv_out_extent(wd, kw, stride, pad)
            .ok_or_else(|| dim_err(format!("conv2d: kernel {kw} does not fit width {wd}")))?;
        let geo = ConvGeometry {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let kdim = cin * kh * kw;
        let l = oh * ow;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * cout * l];
        let mut cols = vec![T::zero(); kdim * l];
        for bi in 0..n {
            let xb = &xv[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let src = if geo.is_pointwise() {
                xb
            } else {
                im2col(xb, &geo.im(), &mut cols);
                &cols[..]
            };
            matmul_acc(
                wv,
                src,
                &mut out[bi * cout * l..(bi + 1) * cout * l],
                cout,
                kdim,
                l,
            );
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for img in out.chunks_mut(cout * l) {
                for (co, plane) in img.chunks_mut(l).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bv[co]);
                }
            }
        }
        let out = Tensor::new(&[n, cout, oh, ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push_op(
            "conv2d",
            out,
            &parents,
            Box::new(move |c| {
                let (xd, wdat, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad);
                let img = cin * geo.h * geo.w;
                let mut dx = c.needs[0].then(|| vec![T::zero(); n * img]);
                let mut dw = c.needs[1].then(|| vec![T::zero(); cout * kdim]);
                let mut cols = vec![T::zero(); kdim * l];
                let mut dcols = vec![T::zero(); kdim * l];
                for bi in 0..n {
                    let gb = &g[bi * cout * l..(bi + 1) * cout * l];
                    if let Some(dw) = dw.as_mut() {
                        let xb = &xd[bi * img..(bi + 1) * img];
                        let src = if geo.is_pointwise() {
                            xb
                        } else {
                            im2col(xb, &geo.im(), &mut cols);
                            &cols[..]
                        };
                        for co in 0..cout {
                            let grow = &gb[co * l..(co + 1) * l];
                            let drow = &mut dw[co * kdim..(co + 1) * kdim];
                            for (kk, d) in drow.iter_mut().enumerate() {
                                let srow = &src[kk * l..(kk + 1) * l];
                                *d += grow
                                    .iter()
                                    .zip(srow)
                                    .fold(T::zero(), |s, (a, b)| s + *a * *b);
                            }
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxb = &mut dx[bi * img..(bi + 1) * img];
                        let target: &mut [T] = if geo.is_pointwise() { dxb } else { &mut dcols };
                        target.iter_mut().for_each(|v| *v = T::zero());
                        for co in 0..cout {
                            let grow = &gb[co * l..(co + 1) * l];
                            for kk in 0..kdim {
                                let wv = wdat[co * kdim + kk];
                                if wv == T::zero() {
                                    continue;
                                }
                                target[kk * l..(kk + 1) * l]
                                    .iter_mut()
                                    .zip(grow)
                                    .for_each(|(d, gv)| *d += wv * *gv);
                            }
                        }
                        if !geo.is_pointwise() {
                            col2im(&dcols, &geo.im(), &mut dx[bi * img..(bi + 1) * img]);
                        }
                    }
                }
                let mut res = vec![dx, dw];
                if c.inputs.len() == 3 {
                    res.push(c.needs[2].then(|| {
                        let mut db = vec![T::zero(); cout];
                        for gb in g.chunks(cout * l) {
                            for (co, plane) in gb.chunks(l).enumerate() {
                                db[co] += plane.iter().copied().sum::<T>();
                            }
                        }
                        db
                    }));
                }
                res
            }),
        ))
    }

    // ---------------------------------------------------------------- feature-map ops

    /// Standardizes every channel with statistics pooled over batch and space.
    pub fn normalize_channels(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let [n, ch, h, w] = xv.dims4()?;
        let (mean, std) = super::ops::channel_stats(xv)?;
        let hw = h * w;
        let mut out = vec![T::zero(); xv.numel()];
        for b in 0..n {
            for c in 0..ch {
                let base = (b * ch + c) * hw;
                for p in 0..hw {
                    out[base + p] = (xv.data()[base + p] - mean[c]) / std[c];
                }
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let m = (n * hw) as f64;
        Ok(self.push_op(
            "normalize_channels",
            out,
            &[x],
            Box::new(move |c| {
                let (g, y) = (c.grad, c.out.data());
                let mut dx = vec![T::zero(); g.len()];
                for ci in 0..ch {
                    let (mut sg, mut sgy) = (0.0f64, 0.0f64);
                    for b in 0..n {
                        let base = (b * ch + ci) * hw;
                        for p in base..base + hw {
                            sg += g[p].as_f64();
                            sgy += (g[p] * y[p]).as_f64();
                        }
                    }
                    let (mg, mgy) = (T::of(sg / m), T::of(sgy / m));
                    let inv = T::one() / std[ci];
                    for b in 0..n {
                        let base = (b * ch + ci) * hw;
                        for p in base..base + hw {
                            dx[p] = inv * (g[p] - mg - y[p] * mgy);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Per-channel affine re-styling: `out[:, c] = sigma[c] * x[:, c] + mu[c]`.
    pub fn apply_style(&mut self, x: Var, mu: Var, sigma: Var) -> Result<Var, TensorError> {
        let [n, ch, h, w] = self.value(x).dims4()?;
        if self.shape(mu) != [ch] || self.shape(sigma) != [ch] {
            return Err(dim_err(format!(
                "apply_style: {ch} channels but style vectors of shape {:?} and {:?}",
                self.shape(mu),
                self.shape(sigma)
            )));
        }
        let hw = h * w;
        let (xd, md, sd) = (
            self.value(x).data(),
            self.value(mu).data(),
            self.value(sigma).data(),
        );
        let mut out = vec![T::zero(); xd.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let c = (i / hw) % ch;
            *o = sd[c] * xd[i] + md[c];
        }
        let out = Tensor::new(&[n, ch, h, w], out)?;
        Ok(self.push_op(
            "apply_style",
            out,
            &[x, mu, sigma],
            Box::new(move |c| {
                let (g, xd, sd) = (c.grad, c.inputs[0].data(), c.inputs[2].data());
                let dx = c.needs[0].then(|| {
                    g.iter()
                        .enumerate()
                        .map(|(i, gv)| *gv * sd[(i / hw) % ch])
                        .collect()
                });
                let (mut dmu, mut dsig) = (vec![0.0f64; ch], vec![0.0f64; ch]);
                for (i, gv) in g.iter().enumerate() {
                    let c = (i / hw) % ch;
                    dmu[c] += gv.as_f64();
                    dsig[c] += (*gv * xd[i]).as_f64();
                }
                let conv = |v: Vec<f64>| v.into_iter().map(T::of).collect();
                vec![
                    dx,
                    c.needs[1].then(|| conv(dmu)),
                    c.needs[2].then(|| conv(dsig)),
                ]
            }),
        ))
    }

    /// Mean over batch and spatial positions of the cosine between the channel
    /// vector of `a` at each position and `b`.
    ///
    /// `b` is either a map of the same shape as `a` or a single `[C]` vector
    /// shared by every position. Positions where either vector has zero norm
    /// contribute a similarity of 0.
    pub fn channel_cosine(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let [n, ch, h, w] = self.value(a).dims4()?;
        let shared = match self.shape(b) {
            s if s == self.shape(a) => false,
            [c] if *c == ch => true,
            s => {
                return Err(dim_err(format!(
                    "channel_cosine: {:?} against {s:?}",
                    self.shape(a)
                )))
            }
        };
        let geo = CosGeometry {
            n,
            ch,
            hw: h * w,
            shared,
        };
        let stats = geo.stats(self.value(a).data(), self.value(b).data());
        let total = (n * h * w) as f64;
        let mean = stats.iter().map(|s| s.cos).sum::<f64>() / total;
        Ok(self.push_op(
            "channel_cosine",
            Tensor::scalar(T::of(mean)),
            &[a, b],
            Box::new(move |c| {
                let (ad, bd) = (c.inputs[0].data(), c.inputs[1].data());
                let gs = c.grad[0].as_f64() / total;
                let mut da = c.needs[0].then(|| vec![T::zero(); ad.len()]);
                let mut db = c.needs[1].then(|| vec![0.0f64; bd.len()]);
                for (pos, s) in stats.iter().enumerate() {
                    if !s.valid {
                        continue;
                    }
                    let inv = 1.0 / (s.na * s.nb);
                    for ci in 0..geo.ch {
                        let ia = geo.a_index(pos, ci);
                        let ib = geo.b_index(pos, ci);
                        let (av, bv) = (ad[ia].as_f64(), bd[ib].as_f64());
                        if let Some(da) = da.as_mut() {
                            da[ia] = T::of(gs * (bv * inv - s.cos * av / (s.na * s.na)));
                        }
                        if let Some(db) = db.as_mut() {
                            db[ib] += gs * (av * inv - s.cos * bv / (s.nb * s.nb));
                        }
                    }
                }
                vec![da, db.map(|v| v.into_iter().map(T::of).collect())]
            }),
        ))
    }

    /// Projects every channel vector of `x: [N, C, H, W]` with `proj: [D, C]`.
    pub fn project_channels(&mut self, x: Var, proj: Var) -> Result<Var, TensorError> {
        let (d, c) = match self.shape(proj) {
            [d, c] => (*d, *c),
            s => return Err(dim_err(format!("projection must be [D, C], got {s:?}"))),
        };
        let w = self.reshape(proj, &[d, c, 1, 1])?;
        self.conv2d(x, w, None, 1, 0)
    }

    /// Unit-normalizes the channel vector at every position (guarded by [`NORM_EPS`]).
    pub fn l2_normalize_channels(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, ch, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let xd = self.value(x).data();
        let mut norms = vec![0.0f64; n * hw];
        for b in 0..n {
            for p in 0..hw {
                let s: f64 = (0..ch)
                    .map(|c| xd[(b * ch + c) * hw + p].as_f64().powi(2))
                    .sum();
                norms[b * hw + p] = s.sqrt().max(NORM_EPS);
            }
        }
        let out: Vec<T> = xd
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let (b, p) = (i / (ch * hw), i % hw);
                T::of(v.as_f64() / norms[b * hw + p])
            })
            .collect();
        let out = Tensor::new(&[n, ch, h, w], out)?;
        Ok(self.push_op(
            "l2_normalize_channels",
            out,
            &[x],
            Box::new(move |c| {
                let (g, y) = (c.grad, c.out.data());
                let mut dx = vec![T::zero(); g.len()];
                for b in 0..n {
                    for p in 0..hw {
                        let nrm = norms[b * hw + p];
                        let idx = |ci: usize| (b * ch + ci) * hw + p;
                        let dot: f64 = if nrm > NORM_EPS {
                            (0..ch).map(|ci| (g[idx(ci)] * y[idx(ci)]).as_f64()).sum()
                        } else {
                            0.0
                        };
                        for ci in 0..ch {
                            let i = idx(ci);
                            dx[i] = T::of((g[i].as_f64() - y[i].as_f64() * dot) / nrm);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Unit-normalizes each contiguous run of the last axis.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let len = *xv
            .shape()
            .last()
            .ok_or_else(|| dim_err("l2_normalize_rows on a scalar"))?;
        if len == 0 {
            return Err(dim_err("l2_normalize_rows on empty rows"));
        }
        let norms: Vec<f64> = xv
            .data()
            .chunks(len)
            .map(|r| {
                r.iter()
                    .map(|v| v.as_f64().powi(2))
                    .sum::<f64>()
                    .sqrt()
                    .max(NORM_EPS)
            })
            .collect();
        let out: Vec<T> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| T::of(v.as_f64() / norms[i / len]))
            .collect();
        let out = Tensor::new(xv.shape(), out)?;
        Ok(self.push_op(
            "l2_normalize_rows",
            out,
            &[x],
            Box::new(move |c| {
                let (g, y) = (c.grad, c.out.data());
                let mut dx = Vec::with_capacity(g.len());
                for (r, (gr, yr)) in g.chunks(len).zip(y.chunks(len)).enumerate() {
                    let nrm = norms[r];
                    let dot: f64 = if nrm > NORM_EPS {
                        gr.iter().zip(yr).map(|(a, b)| (*a * *b).as_f64()).sum()
                    } else {
                        0.0
                    };
                    dx.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(gv, yv)| T::of((gv.as_f64() - yv.as_f64() * dot) / nrm)),
                    );
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Softmax across the channel axis at every position.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, ch, h, w] = self.value(x).dims4()?;
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for p in 0..hw {
                let idx = |ci: usize| (b * ch + ci) * hw + p;
                let m = (0..ch).fold(f64::NEG_INFINITY, |m, ci| m.max(xd[idx(ci)].as_f64()));
                let z: f64 = (0..ch).map(|ci| (xd[idx(ci)].as_f64() - m).exp()).sum();
                for ci in 0..ch {
                    out[idx(ci)] = T::of((xd[idx(ci)].as_f64() - m).exp() / z);
                }
            }
        }
        let out = Tensor::new(&[n, ch, h, w], out)?;
        Ok(self.push_op(
            "softmax_channels",
            out,
            &[x],
            Box::new(move |c| {
                let (g, y) = (c.grad, c.out.data());
                let mut dx = vec![T::zero(); g.len()];
                for b in 0..n {
                    for p in 0..hw {
                        let idx = |ci: usize| (b * ch + ci) * hw + p;
                        let dot: f64 = (0..ch).map(|ci| (g[idx(ci)] * y[idx(ci)]).as_f64()).sum();
                        for ci in 0..ch {
                            let i = idx(ci);
                            dx[i] = T::of(y[i].as_f64() * (g[i].as_f64() - dot));
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Assignment-weighted residual sums `r[n,k,:] = Σ_p θ[n,k,p] (f[n,:,p] − centers[k,:])`.
    ///
    /// Shapes: `f: [N, C, H, W]`, `theta: [N, K, H, W]`, `centers: [K, C]`, output `[N, K, C]`.
    pub fn assignment_residuals(
        &mut self,
        f: Var,
        theta: Var,
        centers: Var,
    ) -> Result<Var, TensorError> {
        let [n, ch, h, w] = self.value(f).dims4()?;
        let [n2, k, h2, w2] = self.value(theta).dims4()?;
        if n != n2 || h != h2 || w != w2 || self.shape(centers) != [k, ch] {
            return Err(dim_err(format!(
                "assignment_residuals: features {:?}, assignment {:?}, centers {:?}",
                self.shape(f),
                self.shape(theta),
                self.shape(centers)
            )));
        }
        let hw = h * w;
        let (fd, td, cd) = (
            self.value(f).data(),
            self.value(theta).data(),
            self.value(centers).data(),
        );
        let mut out = vec![T::zero(); n * k * ch];
        for b in 0..n {
            for kk in 0..k {
                let th = &td[(b * k + kk) * hw..(b * k + kk + 1) * hw];
                let mass: f64 = th.iter().map(|v| v.as_f64()).sum();
                for ci in 0..ch {
                    let fr = &fd[(b * ch + ci) * hw..(b * ch + ci + 1) * hw];
                    let s: f64 = th
                        .iter()
                        .zip(fr)
                        .map(|(t, x)| t.as_f64() * x.as_f64())
                        .sum();
                    out[(b * k + kk) * ch + ci] = T::of(s - cd[kk * ch + ci].as_f64() * mass);
                }
            }
        }
        let out = Tensor::new(&[n, k, ch], out)?;
        Ok(self.push_op(
            "assignment_residuals",
            out,
            &[f, theta, centers],
            Box::new(move |c| {
                let (fd, td, cd, g) = (
                    c.inputs[0].data(),
                    c.inputs[1].data(),
                    c.inputs[2].data(),
                    c.grad,
                );
                let df = c.needs[0].then(|| {
                    let mut df = vec![T::zero(); fd.len()];
                    for b in 0..n {
                        for kk in 0..k {
                            let th = &td[(b * k + kk) * hw..(b * k + kk + 1) * hw];
                            for ci in 0..ch {
                                let gv = g[(b * k + kk) * ch + ci];
                                df[(b * ch + ci) * hw..(b * ch + ci + 1) * hw]
                                    .iter_mut()
                                    .zip(th)
                                    .for_each(|(d, t)| *d += gv * *t);
                            }
                        }
                    }
                    df
                });
                let dt = c.needs[1].then(|| {
                    let mut dt = vec![T::zero(); td.len()];
                    for b in 0..n {
                        for kk in 0..k {
                            for p in 0..hw {
                                let s: f64 = (0..ch)
                                    .map(|ci| {
                                        g[(b * k + kk) * ch + ci].as_f64()
                                            * (fd[(b * ch + ci) * hw + p] - cd[kk * ch + ci])
                                                .as_f64()
                                    })
                                    .sum();
                                dt[(b * k + kk) * hw + p] = T::of(s);
                            }
                        }
                    }
                    dt
                });
                let dc = c.needs[2].then(|| {
                    let mut dc = vec![0.0f64; k * ch];
                    for b in 0..n {
                        for kk in 0..k {
                            let mass: f64 = td[(b * k + kk) * hw..(b * k + kk + 1) * hw]
                                .iter()
                                .map(|v| v.as_f64())
                                .sum();
                            for ci in 0..ch {
                                dc[kk * ch + ci] -= g[(b * k + kk) * ch + ci].as_f64() * mass;
                            }
                        }
                    }
                    dc.into_iter().map(T::of).collect()
                });
                vec![df, dt, dc]
            }),
        ))
    }

    /// Averages `x: [N, K, C]` over `K` and broadcasts the result to `[N, C, h, w]`.
    pub fn mean_broadcast_spatial(
        &mut self,
        x: Var,
        h: usize,
        w: usize,
    ) -> Result<Var, TensorError> {
        let (n, k, ch) = match self.shape(x) {
            [n, k, c] => (*n, *k, *c),
            s => {
                return Err(dim_err(format!(
                    "mean_broadcast_spatial expects [N, K, C], got {s:?}"
                )))
            }
        };
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * ch * hw];
        for b in 0..n {
            for ci in 0..ch {
                let m: f64 = (0..k)
                    .map(|kk| xd[(b * k + kk) * ch + ci].as_f64())
                    .sum::<f64>()
                    / k as f64;
                out[(b * ch + ci) * hw..(b * ch + ci + 1) * hw].fill(T::of(m));
            }
        }
        let out = Tensor::new(&[n, ch, h, w], out)?;
        Ok(self.push_op(
            "mean_broadcast_spatial",
            out,
            &[x],
            Box::new(move |c| {
                let g = c.grad;
                let mut dx = vec![T::zero(); n * k * ch];
                for b in 0..n {
                    for ci in 0..ch {
                        let s: f64 = g[(b * ch + ci) * hw..(b * ch + ci + 1) * hw]
                            .iter()
                            .map(|v| v.as_f64())
                            .sum();
                        for kk in 0..k {
                            dx[(b * k + kk) * ch + ci] = T::of(s / k as f64);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let [n, ca, h, w] = self.value(a).dims4()?;
        let [n2, cb, h2, w2] = self.value(b).dims4()?;
        if n != n2 || h != h2 || w != w2 {
            return Err(dim_err(format!(
                "concat_channels: {:?} with {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (ia, ib) = (ca * h * w, cb * h * w);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ia + ib));
        for bi in 0..n {
            out.extend_from_slice(&ad[bi * ia..(bi + 1) * ia]);
            out.extend_from_slice(&bd[bi * ib..(bi + 1) * ib]);
        }
        let out = Tensor::new(&[n, ca + cb, h, w], out)?;
        Ok(self.push_op(
            "concat_channels",
            out,
            &[a, b],
            Box::new(move |c| {
                let g = c.grad;
                let split = |first: bool| {
                    let mut v = Vec::with_capacity(n * if first { ia } else { ib });
                    for row in g.chunks(ia + ib) {
                        v.extend_from_slice(if first { &row[..ia] } else { &row[ia..] });
                    }
                    v
                };
                vec![
                    c.needs[0].then(|| split(true)),
                    c.needs[1].then(|| split(false)),
                ]
            }),
        ))
    }

    /// Adaptive average pooling to an `oh × ow` grid (window bounds as in the
    /// usual floor/ceil partition). A grid larger than the input replicates
    /// cells.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var, TensorError> {
        let [n, ch, h, w] = self.value(x).dims4()?;
        if oh == 0 || ow == 0 || h == 0 || w == 0 {
            return Err(dim_err(format!("adaptive_avg_pool: {h}x{w} to {oh}x{ow}")));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * ch * oh * ow];
        for plane in 0..n * ch {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                let (y0, y1) = pool_bounds(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = pool_bounds(ox, w, ow);
                    let mut s = 0.0f64;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            s += src[yy * w + xx].as_f64();
                        }
                    }
                    out[plane * oh * ow + oy * ow + ox] = T::of(s / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        let out = Tensor::new(&[n, ch, oh, ow], out)?;
        Ok(self.push_op(
            "adaptive_avg_pool",
            out,
            &[x],
            Box::new(move |c| {
                let g = c.grad;
                let mut dx = vec![T::zero(); n * ch * h * w];
                for plane in 0..n * ch {
                    for oy in 0..oh {
                        let (y0, y1) = pool_bounds(oy, h, oh);
                        for ox in 0..ow {
                            let (x0, x1) = pool_bounds(ox, w, ow);
                            let share = g[plane * oh * ow + oy * ow + ox]
                                / T::of(((y1 - y0) * (x1 - x0)) as f64);
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    dx[plane * h * w + yy * w + xx] += share;
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Global average pooling to `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, ch, _, _] = self.value(x).dims4()?;
        let pooled = self.adaptive_avg_pool(x, 1, 1)?;
        self.reshape(pooled, &[n, ch])
    }
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im(&self) -> super::ops::Im2Col {
        super::ops::Im2Col {
            cin: self.cin,
            h: self.h,
            w: self.w,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad: self.pad,
            oh: self.oh,
            ow: self.ow,
        }
    }
}

#[derive(Clone, Copy)]
struct CosGeometry {
    n: usize,
    ch: usize,
    hw: usize,
    shared: bool,
}

struct PosStat {
    cos: f64,
    na: f64,
    nb: f64,
    valid: bool,
}

impl CosGeometry {
    fn a_index(&self, pos: usize, c: usize) -> usize {
        let (b, p) = (pos / self.hw, pos % self.hw);
        (b * self.ch + c) * self.hw + p
    }

    fn b_index(&self, pos: usize, c: usize) -> usize {
        if self.shared {
            c
        } else {
            self.a_index(pos, c)
        }
    }

    fn stats<T: Real>(&self, a: &[T], b: &[T]) -> Vec<PosStat> {
        (0..self.n * self.hw)
            .map(|pos| {
                let (mut dot, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
                for c in 0..self.ch {
                    let (x, y) = (
                        a[self.a_index(pos, c)].as_f64(),
                        b[self.b_index(pos, c)].as_f64(),
                    );
                    dot += x * y;
                    aa += x * x;
                    bb += y * y;
                }
                let (na, nb) = (aa.sqrt(), bb.sqrt());
                if na * nb < NORM_EPS {
                    PosStat {
                        cos: 0.0,
                        na,
                        nb,
                        valid: false,
                    }
                } else {
                    PosStat {
                        cos: dot / (na * nb),
                        na,
                        nb,
                        valid: true,
                    }
                }
            })
            .collect()
    }
}
