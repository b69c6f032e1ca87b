//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied, so a graph lives no
//! longer than the store it reads from. [`Graph::backward`] walks the tape in
//! reverse and returns gradients for every node that requires them.

use std::borrow::Cow;

use crate::kernels::{self, ConvDims, ConvGeom, PoolGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<'p> = Box<dyn Fn(&Graph<'p>, &Tensor) -> Vec<(NodeId, Tensor)> + 'p>;

struct Node<'p> {
    value: Cow<'p, Tensor>,
    requires_grad: bool,
    backward: Option<BackwardFn<'p>>,
}

/// Batch statistics observed by a training-mode batch norm, to be folded
/// into the running buffers after the step.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub batch_mean: Vec<f64>,
    /// Biased (divide by count) variance, the same one used to normalize.
    pub batch_var: Vec<f64>,
}

pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    store: Option<&'p ParamStore>,
    bound: Vec<Option<NodeId>>,
    track_params: bool,
    training: bool,
    stat_updates: Vec<StatUpdate>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph without a parameter store, for standalone op tests.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            bound: Vec::new(),
            track_params: true,
            training: false,
            stat_updates: Vec::new(),
        }
    }

    /// A graph reading parameters from `store`. `track_params` decides whether
    /// trainable parameters require gradients.
    pub fn with_params(store: &'p ParamStore, training: bool, track_params: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            store: Some(store),
            bound: vec![None; store.len()],
            track_params,
            training,
            stat_updates: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stat_updates
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    pub(crate) fn record_stats(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    fn push(&mut self, value: Cow<'p, Tensor>, requires_grad: bool, backward: Option<BackwardFn<'p>>) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        NodeId(self.nodes.len() - 1)
    }

    fn op(&mut self, value: Tensor, inputs: &[NodeId], backward: BackwardFn<'p>) -> NodeId {
        let rg = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.push(Cow::Owned(value), rg, Some(backward))
    }

    /// A constant input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Cow::Owned(value), false, None)
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Cow::Owned(value), true, None)
    }

    /// Bind a stored parameter (or buffer) into the graph, once per graph.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        let store = self.store.expect("graph has no parameter store");
        if let Some(node) = self.bound[id.index()] {
            return node;
        }
        let rg = self.track_params && store.is_trainable(id);
        let node = self.push(Cow::Borrowed(store.get(id)), rg, None);
        self.bound[id.index()] = Some(node);
        node
    }

    pub fn param_tensor(&self, id: ParamId) -> &'p Tensor {
        self.store.expect("graph has no parameter store").get(id)
    }

    /// Reverse pass seeded with ones at `root` (usually a scalar loss).
    pub fn backward(&self, root: NodeId) -> Grads {
        let seed = Tensor::full(self.shape(root), 1.0);
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: NodeId, seed: Tensor) -> Grads {
        assert_eq!(seed.shape(), self.shape(root), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].as_ref() else {
                continue;
            };
            for (parent, pg) in bw(self, g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match grads[parent.0].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[parent.0] = Some(pg),
                }
            }
        }
        let param_nodes = self.bound.clone();
        Grads { grads, param_nodes }
    }

    // ----- elementwise -------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape(), data);
        self.op(out, &[a, b], Box::new(move |_, g| vec![(a, g.clone()), (b, g.clone())]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape(), data);
        self.op(
            out,
            &[a, b],
            Box::new(move |gr, g| {
                let (va, vb) = (gr.value(a), gr.value(b));
                let mut res = Vec::new();
                if gr.requires_grad(a) {
                    let d = g.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    res.push((a, Tensor::new(g.shape(), d)));
                }
                if gr.requires_grad(b) {
                    let d = g.data().iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    res.push((b, Tensor::new(g.shape(), d)));
                }
                res
            }),
        )
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.value(a).map(|v| v * s);
        self.op(out, &[a], Box::new(move |_, g| vec![(a, g.map(|v| v * s))]))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| v.max(0.0));
        self.op(
            out,
            &[a],
            Box::new(move |gr, g| {
                let x = gr.value(a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(a, Tensor::new(g.shape(), d))]
            }),
        )
    }

    /// `x + y` where `y`'s shape equals the trailing dimensions of `x`.
    pub fn add_broadcast(&mut self, x: NodeId, y: NodeId) -> NodeId {
        let (vx, vy) = (self.value(x), self.value(y));
        let inner = vy.numel();
        let xs = vx.shape();
        assert!(
            xs.len() >= vy.rank() && xs[xs.len() - vy.rank()..] == *vy.shape(),
            "add_broadcast: {:?} does not end with {:?}",
            xs,
            vy.shape()
        );
        let mut data = vx.data().to_vec();
        for chunk in data.chunks_mut(inner) {
            chunk.iter_mut().zip(vy.data()).for_each(|(a, b)| *a += b);
        }
        let out = Tensor::new(xs, data);
        let yshape = vy.shape().to_vec();
        self.op(
            out,
            &[x, y],
            Box::new(move |gr, g| {
                let mut res = vec![(x, g.clone())];
                if gr.requires_grad(y) {
                    let mut acc = vec![0.0; inner];
                    for chunk in g.data().chunks(inner) {
                        acc.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                    res.push((y, Tensor::new(&yshape, acc)));
                }
                res
            }),
        )
    }

    // ----- shape -----------------------------------------------------------

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let src = self.shape(a).to_vec();
        let out = self.value(a).clone().reshape(shape);
        self.op(out, &[a], Box::new(move |_, g| vec![(a, g.clone().reshape(&src))]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> NodeId {
        let out = permute_tensor(self.value(a), perm);
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.op(out, &[a], Box::new(move |_, g| vec![(a, permute_tensor(g, &inv))]))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        let first = &shapes[0];
        for s in &shapes {
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&x, &y)) in s.iter().zip(first).enumerate() {
                assert!(d == axis || x == y, "concat shape mismatch {s:?} vs {first:?}");
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inners: Vec<usize> = shapes.iter().map(|s| s[axis..].iter().product()).collect();
        let total_inner: usize = inners.iter().sum();
        let mut data = Vec::with_capacity(outer * total_inner);
        for o in 0..outer {
            for (p, &inner) in parts.iter().zip(&inners) {
                data.extend_from_slice(&self.value(*p).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = shapes.iter().map(|s| s[axis]).sum();
        let out = Tensor::new(&shape, data);
        let parts_v = parts.to_vec();
        self.op(
            out,
            parts,
            Box::new(move |gr, g| {
                let mut res = Vec::new();
                let mut offset = 0;
                for (i, &p) in parts_v.iter().enumerate() {
                    let inner = inners[i];
                    if gr.requires_grad(p) {
                        let mut d = Vec::with_capacity(outer * inner);
                        for o in 0..outer {
                            let base = o * total_inner + offset;
                            d.extend_from_slice(&g.data()[base..base + inner]);
                        }
                        res.push((p, Tensor::new(&shapes[i], d)));
                    }
                    offset += inner;
                }
                res
            }),
        )
    }

    // ----- convolution and pooling ----------------------------------------

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>, geom: ConvGeom) -> NodeId {
        let (n, cin, h, wd) = self.value(x).dims4();
        let (cout, cg, kh, kw) = self.value(w).dims4();
        assert!(geom.groups > 0 && cin % geom.groups == 0 && cout % geom.groups == 0);
        assert_eq!(cg, cin / geom.groups, "conv2d weight/input channel mismatch");
        let oh = kernels::out_extent(h, kh, geom.stride.0, geom.padding.0)
            .expect("conv2d kernel larger than padded input");
        let ow = kernels::out_extent(wd, kw, geom.stride.1, geom.padding.1)
            .expect("conv2d kernel larger than padded input");
        let dims = ConvDims {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            oh,
            ow,
            geom,
        };
        let b = bias.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), b, &dims);
        let out = Tensor::new(&[n, cout, oh, ow], out);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.op(
            out,
            &inputs,
            Box::new(move |gr, g| {
                let want_x = gr.requires_grad(x);
                let want_w = gr.requires_grad(w);
                let want_b = bias.is_some_and(|b| gr.requires_grad(b));
                let (dx, dw, db) = kernels::conv2d_backward(
                    gr.value(x).data(),
                    gr.value(w).data(),
                    g.data(),
                    &dims,
                    want_x,
                    want_w,
                    want_b,
                );
                let mut res = Vec::new();
                if let Some(dx) = dx {
                    res.push((x, Tensor::new(gr.shape(x), dx)));
                }
                if let Some(dw) = dw {
                    res.push((w, Tensor::new(gr.shape(w), dw)));
                }
                if let (Some(db), Some(b)) = (db, bias) {
                    res.push((b, Tensor::new(gr.shape(b), db)));
                }
                res
            }),
        )
    }

    pub fn max_pool2d(&mut self, x: NodeId, p: PoolGeom) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        let oh = kernels::out_extent(h, p.kernel.0, p.stride.0, p.padding.0).expect("pool window too large");
        let ow = kernels::out_extent(w, p.kernel.1, p.stride.1, p.padding.1).expect("pool window too large");
        let (out, arg) = kernels::max_pool_forward(self.value(x).data(), n * c, h, w, &p, oh, ow);
        let in_len = n * c * h * w;
        let out = Tensor::new(&[n, c, oh, ow], out);
        self.op(
            out,
            &[x],
            Box::new(move |gr, g| {
                let mut dx = vec![0.0; in_len];
                for (gv, &ai) in g.data().iter().zip(&arg) {
                    if ai != usize::MAX {
                        dx[ai] += gv;
                    }
                }
                vec![(x, Tensor::new(gr.shape(x), dx))]
            }),
        )
    }

    pub fn avg_pool2d(&mut self, x: NodeId, p: PoolGeom) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        let oh = kernels::out_extent(h, p.kernel.0, p.stride.0, p.padding.0).expect("pool window too large");
        let ow = kernels::out_extent(w, p.kernel.1, p.stride.1, p.padding.1).expect("pool window too large");
        let out = kernels::avg_pool_forward(self.value(x).data(), n * c, h, w, &p, oh, ow);
        let out = Tensor::new(&[n, c, oh, ow], out);
        self.op(
            out,
            &[x],
            Box::new(move |gr, g| {
                let dx = kernels::avg_pool_backward(g.data(), n * c, h, w, &p, oh, ow);
                vec![(x, Tensor::new(gr.shape(x), dx))]
            }),
        )
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::new(&[n, c], data);
        self.op(
            out,
            &[x],
            Box::new(move |_, g| {
                let mut dx = Vec::with_capacity(n * c * plane);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / plane as f64, plane));
                }
                vec![(x, Tensor::new(&[n, c, h, w], dx))]
            }),
        )
    }

    /// Nearest-neighbour resize of `[N, C, H, W]` to `oh x ow`.
    pub fn upsample_nearest(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        let rows: Vec<usize> = (0..oh).map(|i| i * h / oh).collect();
        let cols: Vec<usize> = (0..ow).map(|j| j * w / ow).collect();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for &r in &rows {
                for &cc in &cols {
                    data.push(src[p * h * w + r * w + cc]);
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], data);
        self.op(
            out,
            &[x],
            Box::new(move |_, g| {
                let mut dx = vec![0.0; n * c * h * w];
                let gd = g.data();
                for p in 0..n * c {
                    for (i, &r) in rows.iter().enumerate() {
                        for (j, &cc) in cols.iter().enumerate() {
                            dx[p * h * w + r * w + cc] += gd[(p * oh + i) * ow + j];
                        }
                    }
                }
                vec![(x, Tensor::new(&[n, c, h, w], dx))]
            }),
        )
    }

    // ----- normalization ---------------------------------------------------

    /// Batch normalization over axis 1 of `[N, C, ...]` using batch statistics.
    /// Returns the output node, the batch mean and the batch variance.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> (NodeId, Vec<f64>, Vec<f64>) {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let m = (n * inner) as f64;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let s = &xv[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                mean[ch] += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for b in 0..n {
            for ch in 0..c {
                let s = &xv[(b * c + ch) * inner..(b * c + ch + 1) * inner];
                var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                for i in r {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let out = Tensor::new(&xs, out);
        let node = self.op(
            out,
            &[x, gamma, beta],
            Box::new(move |gr, g| {
                let gd = g.data();
                let gam = gr.value(gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                            sum_g[ch] += gd[i];
                            sum_gx[ch] += gd[i] * xhat[i];
                        }
                    }
                }
                let mut res = Vec::new();
                if gr.requires_grad(x) {
                    let mut dx = vec![0.0; gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch] / m;
                            for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                                dx[i] = k * (m * gd[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                            }
                        }
                    }
                    res.push((x, Tensor::new(&xs, dx)));
                }
                if gr.requires_grad(gamma) {
                    res.push((gamma, Tensor::new(&[c], sum_gx.clone())));
                }
                if gr.requires_grad(beta) {
                    res.push((beta, Tensor::new(&[c], sum_g.clone())));
                }
                res
            }),
        );
        (node, mean, var)
    }

    /// Batch normalization with fixed statistics (inference mode).
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> NodeId {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                    out[i] = gv[ch] * (xv[i] - mean[ch]) * inv_std[ch] + bv[ch];
                }
            }
        }
        let out = Tensor::new(&xs, out);
        self.op(
            out,
            &[x, gamma, beta],
            Box::new(move |gr, g| {
                let gd = g.data();
                let xv = gr.value(x).data();
                let gam = gr.value(gamma).data();
                let mut res = Vec::new();
                if gr.requires_grad(x) {
                    let mut dx = vec![0.0; gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                                dx[i] = gd[i] * gam[ch] * inv_std[ch];
                            }
                        }
                    }
                    res.push((x, Tensor::new(&xs, dx)));
                }
                let mut dg = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                            dg[ch] += gd[i] * (xv[i] - mean[ch]) * inv_std[ch];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if gr.requires_grad(gamma) {
                    res.push((gamma, Tensor::new(&[c], dg)));
                }
                if gr.requires_grad(beta) {
                    res.push((beta, Tensor::new(&[c], dbeta)));
                }
                res
            }),
        )
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().expect("layer_norm on rank-0 tensor");
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let s = &xv[r * d..(r + 1) * d];
            let mean = s.iter().sum::<f64>() / d as f64;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (s[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let out = Tensor::new(&xs, out);
        self.op(
            out,
            &[x, gamma, beta],
            Box::new(move |gr, g| {
                let gd = g.data();
                let gam = gr.value(gamma).data();
                let mut res = Vec::new();
                if gr.requires_grad(x) {
                    let mut dx = vec![0.0; gd.len()];
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gam[j];
                            s1 += dh;
                            s2 += dh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dh = gd[r * d + j] * gam[j];
                            dx[r * d + j] =
                                inv_std[r] / d as f64 * (d as f64 * dh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                    res.push((x, Tensor::new(&xs, dx)));
                }
                if gr.requires_grad(gamma) || gr.requires_grad(beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                            db[j] += gd[r * d + j];
                        }
                    }
                    res.push((gamma, Tensor::new(&[d], dg)));
                    res.push((beta, Tensor::new(&[d], db)));
                }
                res
            }),
        )
    }

    // ----- linear algebra ---------------------------------------------------

    /// `x W^T + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().unwrap();
        assert_eq!(ws.len(), 2, "linear weight must be rank 2");
        assert_eq!(ws[1], din, "linear: input dim {din} vs weight {ws:?}");
        let dout = ws[0];
        let rows = self.value(x).numel() / din;
        let mut out = vec![0.0; rows * dout];
        kernels::gemm(
            rows, din, dout, 1.0, self.value(x).data(), din as isize, 1, self.value(w).data(), 1,
            din as isize, 0.0, &mut out, dout as isize, 1,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in out.chunks_mut(dout) {
                r.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let mut oshape = xs.clone();
        *oshape.last_mut().unwrap() = dout;
        let out = Tensor::new(&oshape, out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.op(
            out,
            &inputs,
            Box::new(move |gr, g| {
                let gd = g.data();
                let mut res = Vec::new();
                if gr.requires_grad(x) {
                    let mut dx = vec![0.0; rows * din];
                    kernels::gemm(
                        rows, dout, din, 1.0, gd, dout as isize, 1, gr.value(w).data(), din as isize,
                        1, 0.0, &mut dx, din as isize, 1,
                    );
                    res.push((x, Tensor::new(&xs, dx)));
                }
                if gr.requires_grad(w) {
                    let mut dw = vec![0.0; dout * din];
                    kernels::gemm(
                        dout, rows, din, 1.0, gd, 1, dout as isize, gr.value(x).data(), din as isize,
                        1, 0.0, &mut dw, din as isize, 1,
                    );
                    res.push((w, Tensor::new(&ws, dw)));
                }
                if let Some(b) = b {
                    if gr.requires_grad(b) {
                        let mut db = vec![0.0; dout];
                        for r in gd.chunks(dout) {
                            db.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                        }
                        res.push((b, Tensor::new(&[dout], db)));
                    }
                }
                res
            }),
        )
    }

    /// Batched matrix product of `[B, m, k]` and `[B, k, n]`; either operand
    /// may be transposed in its last two axes.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> NodeId {
        let asz = self.shape(a).to_vec();
        let bsz = self.shape(b).to_vec();
        assert_eq!(asz.len(), 3, "bmm lhs must be rank 3");
        assert_eq!(bsz.len(), 3, "bmm rhs must be rank 3");
        assert_eq!(asz[0], bsz[0], "bmm batch mismatch");
        let batch = asz[0];
        let (m, k) = if trans_a { (asz[2], asz[1]) } else { (asz[1], asz[2]) };
        let (k2, n) = if trans_b { (bsz[2], bsz[1]) } else { (bsz[1], bsz[2]) };
        assert_eq!(k, k2, "bmm inner dimension mismatch: {asz:?} x {bsz:?}");
        let (ra, ca) = strides(asz[2], trans_a);
        let (rb, cb) = strides(bsz[2], trans_b);
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    1.0,
                    &av[i * m * k..(i + 1) * m * k],
                    ra,
                    ca,
                    &bv[i * k * n..(i + 1) * k * n],
                    rb,
                    cb,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        let out = Tensor::new(&[batch, m, n], out);
        self.op(
            out,
            &[a, b],
            Box::new(move |gr, g| {
                let gd = g.data();
                let av = gr.value(a).data();
                let bv = gr.value(b).data();
                let mut res = Vec::new();
                if gr.requires_grad(a) {
                    // dA_eff (m x k) = G (m x n) * B_eff^T (n x k)
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let (rc, cc) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                        kernels::gemm(
                            m,
                            n,
                            k,
                            1.0,
                            &gd[i * m * n..(i + 1) * m * n],
                            n as isize,
                            1,
                            &bv[i * k * n..(i + 1) * k * n],
                            cb,
                            rb,
                            0.0,
                            &mut da[i * m * k..(i + 1) * m * k],
                            rc,
                            cc,
                        );
                    }
                    res.push((a, Tensor::new(&asz, da)));
                }
                if gr.requires_grad(b) {
                    // dB_eff (k x n) = A_eff^T (k x m) * G (m x n)
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let (rc, cc) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                        kernels::gemm(
                            k,
                            m,
                            n,
                            1.0,
                            &av[i * m * k..(i + 1) * m * k],
                            ca,
                            ra,
                            &gd[i * m * n..(i + 1) * m * n],
                            n as isize,
                            1,
                            0.0,
                            &mut db[i * k * n..(i + 1) * k * n],
                            rc,
                            cc,
                        );
                    }
                    res.push((b, Tensor::new(&bsz, db)));
                }
                res
            }),
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        let xs = self.shape(x).to_vec();
        let outer: usize = xs[..axis].iter().product();
        let len = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let out = softmax_along(self.value(x).data(), outer, len, inner);
        let y = Tensor::new(&xs, out);
        let yc = y.clone();
        self.op(
            y,
            &[x],
            Box::new(move |_, g| {
                let yd = yc.data();
                let gd = g.data();
                let mut dx = vec![0.0; gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|j| gd[base + j * inner] * yd[base + j * inner]).sum();
                        for j in 0..len {
                            let idx = base + j * inner;
                            dx[idx] = yd[idx] * (gd[idx] - dot);
                        }
                    }
                }
                vec![(x, Tensor::new(&xs, dx))]
            }),
        )
    }

    /// Row lookup `table[idx[i]]` producing `[len(idx), D]`.
    pub fn embedding(&mut self, table: NodeId, idx: &[usize]) -> NodeId {
        let ts = self.shape(table).to_vec();
        let d = ts[1];
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < ts[0], "embedding index {i} out of range {}", ts[0]);
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[idx.len(), d], data);
        let idx = idx.to_vec();
        self.op(
            out,
            &[table],
            Box::new(move |_, g| {
                let mut dt = vec![0.0; ts[0] * d];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g.data()[r * d + j];
                    }
                }
                vec![(table, Tensor::new(&ts, dt))]
            }),
        )
    }

    // ----- reductions and losses --------------------------------------------

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let out = Tensor::scalar(self.value(x).sum());
        self.op(out, &[x], Box::new(move |_, g| vec![(x, Tensor::full(&shape, g.item()))]))
    }

    /// `sum(x * weights)` against a constant weight tensor.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor) -> NodeId {
        assert_eq!(self.shape(x), weights.shape(), "weighted_sum shape mismatch");
        let s = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        self.op(
            Tensor::scalar(s),
            &[x],
            Box::new(move |_, g| vec![(x, weights.map(|w| w * g.item()))]),
        )
    }

    /// Mean smooth-L1 loss between predictions (any shape with one value per
    /// target) and constant targets.
    pub fn smooth_l1_loss(&mut self, pred: NodeId, targets: &[f64]) -> NodeId {
        let pv = self.value(pred).data();
        assert_eq!(pv.len(), targets.len(), "smooth_l1_loss length mismatch");
        let n = targets.len() as f64;
        let loss = pv
            .iter()
            .zip(targets)
            .map(|(&p, &t)| crate::training::smooth_l1(t - p))
            .sum::<f64>()
            / n;
        let targets = targets.to_vec();
        self.op(
            Tensor::scalar(loss),
            &[pred],
            Box::new(move |gr, g| {
                let pv = gr.value(pred);
                let scale = g.item() / n;
                let d = pv
                    .data()
                    .iter()
                    .zip(&targets)
                    .map(|(&p, &t)| crate::training::smooth_l1_grad(p - t) * scale)
                    .collect();
                vec![(pred, Tensor::new(pv.shape(), d))]
            }),
        )
    }
}

fn strides(cols: usize, trans: bool) -> (isize, isize) {
    if trans {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

pub(crate) fn softmax_along(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len).map(|j| x[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                z += e;
            }
            for j in 0..len {
                out[base + j * inner] /= z;
            }
        }
    }
    out
}

pub(crate) fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    assert_eq!(perm.len(), shape.len(), "permute rank mismatch");
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let src = t.data();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        data.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, data)
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    param_nodes: Vec<Option<NodeId>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].take()
    }

    /// Gradient of a bound parameter, if it was used and tracked.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_nodes
            .get(id.index())
            .copied()
            .flatten()
            .and_then(|n| self.grads[n.0].as_ref())
    }

    /// Move all parameter gradients out, indexed by parameter id.
    pub fn into_param_grads(mut self) -> Vec<Option<Tensor>> {
        let nodes = std::mem::take(&mut self.param_nodes);
        nodes
            .into_iter()
            .map(|n| n.and_then(|n| self.grads[n.0].take()))
            .collect()
    }
}
