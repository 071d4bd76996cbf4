//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records a DAG of operations as it evaluates them. Calling
//! [`Tape::backward`] on a scalar node walks the recorded nodes in reverse and
//! accumulates gradients for every node that (transitively) depends on a
//! trainable leaf. All arithmetic is double precision so analytic gradients
//! can be validated against central finite differences at tight tolerances.
//!
//! The op set is deliberately small: just what transformer encoders,
//! contrastive/distillation losses, and quadratic parameter penalties need.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};

/// Dense dynamic-dimensional tensor. Everything on the tape is one of these.
pub type Arr = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

type BackwardFn = Box<dyn Fn(&Arr, &[&Arr], &Arr) -> Vec<Arr>>;

struct Node {
    value: Arr,
    parents: Vec<TensorId>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`TensorId`].
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the given node, if it received any.
    pub fn get(&self, id: TensorId) -> Option<&Arr> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or zeros of the given shape when none flowed.
    pub fn get_or_zeros(&self, id: TensorId, shape: &[usize]) -> Arr {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Arr::zeros(IxDyn(shape)),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn var(&mut self, value: Arr) -> TensorId {
        self.leaf(value, true)
    }

    /// Non-trainable leaf: no gradient flows into or through it.
    pub fn constant(&mut self, value: Arr) -> TensorId {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Arr, needs_grad: bool) -> TensorId {
        assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite leaf value on tape"
        );
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: TensorId) -> &Arr {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar(&self, id: TensorId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1);
        v.iter().next().copied().unwrap()
    }

    fn push(&mut self, value: Arr, parents: Vec<TensorId>, backward: BackwardFn) -> TensorId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: if needs_grad { Some(backward) } else { None },
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = self.value(a) + self.value(b);
        self.push(v, vec![a, b], Box::new(|g, _, _| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = self.value(a) - self.value(b);
        self.push(v, vec![a, b], Box::new(|g, _, _| vec![g.clone(), -g]))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = self.value(a) * self.value(b);
        self.push(
            v,
            vec![a, b],
            Box::new(|g, p, _| vec![g * p[1], g * p[0]]),
        )
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = self.value(a) * c;
        self.push(v, vec![a], Box::new(move |g, _, _| vec![g * c]))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        const S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C: f64 = 0.044715;
        let v = self.value(a).mapv(|x| {
            let u = S * (x + C * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push(
            v,
            vec![a],
            Box::new(|g, p, _| {
                let dx = p[0].mapv(|x| {
                    let u = S * (x + C * x * x * x);
                    let t = u.tanh();
                    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * S * (1.0 + 3.0 * C * x * x)
                });
                vec![g * &dx]
            }),
        )
    }

    // ── broadcasting adds ───────────────────────────────────────────────

    /// `x + b` where `b` broadcasts over every axis of `x` except the last.
    pub fn add_bias(&mut self, x: TensorId, b: TensorId) -> TensorId {
        let v = self.value(x) + self.value(b);
        self.push(
            v,
            vec![x, b],
            Box::new(|g, p, _| {
                let bias_len = p[1].len();
                let mut gb = Array1::<f64>::zeros(bias_len);
                for (chunk, _) in g
                    .as_standard_layout()
                    .as_slice()
                    .unwrap()
                    .chunks(bias_len)
                    .zip(0..)
                {
                    for (acc, gi) in gb.iter_mut().zip(chunk) {
                        *acc += gi;
                    }
                }
                vec![g.clone(), gb.into_dyn().into_shape_with_order(p[1].raw_dim()).unwrap()]
            }),
        )
    }

    /// `x + p` where `p`'s shape equals `x`'s shape without the leading axis.
    pub fn add_bcast0(&mut self, x: TensorId, p: TensorId) -> TensorId {
        let v = self.value(x) + self.value(p);
        self.push(
            v,
            vec![x, p],
            Box::new(|g, parents, _| {
                let gp = g.sum_axis(Axis(0));
                debug_assert_eq!(gp.shape(), parents[1].shape());
                vec![g.clone(), gp]
            }),
        )
    }

    /// Repeat a `(1, N)` or `(N,)` row `n` times into `(n, N)`.
    pub fn tile0(&mut self, x: TensorId, n: usize) -> TensorId {
        let row = self.value(x).clone();
        let cols = row.len();
        let flat: Vec<f64> = row.iter().copied().collect();
        let mut out = Vec::with_capacity(n * cols);
        for _ in 0..n {
            out.extend_from_slice(&flat);
        }
        let v = Array2::from_shape_vec((n, cols), out).unwrap().into_dyn();
        self.push(
            v,
            vec![x],
            Box::new(|g, p, _| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let gp = g2.sum_axis(Axis(0));
                vec![gp.into_dyn().into_shape_with_order(p[0].raw_dim()).unwrap()]
            }),
        )
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> TensorId {
        let v = self
            .value(x)
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: size mismatch");
        self.push(
            v,
            vec![x],
            Box::new(|g, p, _| {
                vec![g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(p[0].raw_dim())
                    .unwrap()]
            }),
        )
    }

    pub fn permute(&mut self, x: TensorId, axes: &[usize]) -> TensorId {
        let axes_v = axes.to_vec();
        let v = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes_v.len()];
        for (i, &a) in axes_v.iter().enumerate() {
            inverse[a] = i;
        }
        self.push(
            v,
            vec![x],
            Box::new(move |g, _, _| {
                vec![g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned()]
            }),
        )
    }

    pub fn transpose2(&mut self, x: TensorId) -> TensorId {
        self.permute(x, &[1, 0])
    }

    /// Select one index along axis 1 of a 3-d tensor: `(B, L, D) -> (B, D)`.
    pub fn take_axis1(&mut self, x: TensorId, pos: usize) -> TensorId {
        let v = self
            .value(x)
            .index_axis(Axis(1), pos)
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        self.push(
            v,
            vec![x],
            Box::new(move |g, p, _| {
                let mut gx = Arr::zeros(p[0].raw_dim());
                gx.index_axis_mut(Axis(1), pos).assign(g);
                vec![gx]
            }),
        )
    }

    /// Concatenate two tensors along axis 1 (used to prepend a CLS slot).
    pub fn concat1(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat1: incompatible shapes")
            .as_standard_layout()
            .to_owned();
        let split = self.value(a).shape()[1];
        self.push(
            v,
            vec![a, b],
            Box::new(move |g, _, _| {
                let ga = g.slice_axis(Axis(1), ndarray::Slice::from(0..split));
                let gb = g.slice_axis(Axis(1), ndarray::Slice::from(split..));
                vec![
                    ga.as_standard_layout().to_owned(),
                    gb.as_standard_layout().to_owned(),
                ]
            }),
        )
    }

    // ── matrix products ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        let v = av.dot(&bv).into_dyn();
        self.push(
            v,
            vec![a, b],
            Box::new(|g, p, _| {
                let g2 = as2(g);
                let av = as2(p[0]);
                let bv = as2(p[1]);
                vec![g2.dot(&bv.t()).into_dyn(), av.t().dot(&g2).into_dyn()]
            }),
        )
    }

    /// Batched matmul: `(B, M, K) x (B, K, N) -> (B, M, N)`.
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let v = bmm_raw(self.value(a), self.value(b));
        self.push(
            v,
            vec![a, b],
            Box::new(|g, p, _| {
                let bt = permute3_021(p[1]);
                let at = permute3_021(p[0]);
                vec![bmm_raw(g, &bt), bmm_raw(&at, g)]
            }),
        )
    }

    // ── row gathers / scatters ──────────────────────────────────────────

    /// Gather rows of a `(V, D)` table: output `(idx.len(), D)`.
    pub fn gather_rows(&mut self, table: TensorId, idx: &[usize]) -> TensorId {
        let t = as2(self.value(table));
        let d = t.ncols();
        let mut out = Array2::<f64>::zeros((idx.len(), d));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&t.row(i));
        }
        let idx_v = idx.to_vec();
        self.push(
            out.into_dyn(),
            vec![table],
            Box::new(move |g, p, _| {
                let g2 = as2(g);
                let mut gt = Array2::<f64>::zeros((p[0].shape()[0], p[0].shape()[1]));
                for (r, &i) in idx_v.iter().enumerate() {
                    let mut dst = gt.row_mut(i);
                    dst += &g2.row(r);
                }
                vec![gt.into_dyn()]
            }),
        )
    }

    /// Keep a subset of rows of a `(M, N)` matrix, in the given order.
    pub fn take_rows(&mut self, x: TensorId, idx: &[usize]) -> TensorId {
        self.gather_rows(x, idx)
    }

    /// Per-row element pick: `(M, N)` with `idx.len() == M` -> `(M,)`.
    pub fn select_last(&mut self, x: TensorId, idx: &[usize]) -> TensorId {
        let xv = as2(self.value(x));
        let out = Array1::from_iter(idx.iter().enumerate().map(|(r, &c)| xv[(r, c)]));
        let idx_v = idx.to_vec();
        self.push(
            out.into_dyn(),
            vec![x],
            Box::new(move |g, p, _| {
                let mut gx = Array2::<f64>::zeros((p[0].shape()[0], p[0].shape()[1]));
                for (r, &c) in idx_v.iter().enumerate() {
                    gx[(r, c)] += g[r];
                }
                vec![gx.into_dyn()]
            }),
        )
    }

    // ── normalizations and softmaxes (all over the last axis) ───────────

    pub fn softmax_last(&mut self, x: TensorId) -> TensorId {
        let v = softmax_raw(self.value(x));
        self.push(
            v,
            vec![x],
            Box::new(|g, _, out| {
                let n = out.shape().last().copied().unwrap();
                let mut gx = g * out;
                let rows = gx.len() / n;
                let mut flat = gx
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[rows, n]))
                    .unwrap();
                let yf = out
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[rows, n]))
                    .unwrap();
                for r in 0..rows {
                    let s: f64 = flat.index_axis(Axis(0), r).sum();
                    let mut row = flat.index_axis_mut(Axis(0), r);
                    let yr = yf.index_axis(Axis(0), r);
                    row.zip_mut_with(&yr, |go, &y| *go -= s * y);
                }
                gx = flat.into_shape_with_order(g.raw_dim()).unwrap();
                vec![gx]
            }),
        )
    }

    pub fn log_softmax_last(&mut self, x: TensorId) -> TensorId {
        let v = log_softmax_raw(self.value(x));
        self.push(
            v,
            vec![x],
            Box::new(|g, _, out| {
                let n = out.shape().last().copied().unwrap();
                let rows = g.len() / n;
                let gf = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[rows, n]))
                    .unwrap();
                let yf = out
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[rows, n]))
                    .unwrap();
                let mut gx = gf.clone();
                for r in 0..rows {
                    let s: f64 = gf.index_axis(Axis(0), r).sum();
                    let mut row = gx.index_axis_mut(Axis(0), r);
                    let yr = yf.index_axis(Axis(0), r);
                    row.zip_mut_with(&yr, |go, &ly| *go -= s * ly.exp());
                }
                vec![gx.into_shape_with_order(g.raw_dim()).unwrap()]
            }),
        )
    }

    /// L2-normalize rows: `y = x / (‖x‖₂ + eps)`, guarded for zero vectors.
    pub fn l2_normalize_last(&mut self, x: TensorId, eps: f64) -> TensorId {
        let xv = self.value(x);
        let n = xv.shape().last().copied().unwrap();
        let rows = xv.len() / n;
        let xf = xv
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(&[rows, n]))
            .unwrap();
        let mut out = xf.clone();
        for r in 0..rows {
            let norm = xf.index_axis(Axis(0), r).mapv(|v| v * v).sum().sqrt();
            let denom = norm + eps;
            out.index_axis_mut(Axis(0), r).mapv_inplace(|v| v / denom);
        }
        let v = out.into_shape_with_order(xv.raw_dim()).unwrap();
        self.push(
            v,
            vec![x],
            Box::new(move |g, p, _| {
                let n = p[0].shape().last().copied().unwrap();
                let rows = g.len() / n;
                let xf = p[0]
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[rows, n]))
                    .unwrap();
                let gf = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&[rows, n]))
                    .unwrap();
                let mut gx = gf.clone();
                for r in 0..rows {
                    let xr = xf.index_axis(Axis(0), r);
                    let gr = gf.index_axis(Axis(0), r);
                    let norm = xr.mapv(|v| v * v).sum().sqrt();
                    let denom = norm + eps;
                    let dot: f64 = xr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    let coef = if norm > 0.0 {
                        dot / (denom * denom * norm)
                    } else {
                        0.0
                    };
                    let mut row = gx.index_axis_mut(Axis(0), r);
                    row.zip_mut_with(&xr, |go, &xi| *go = *go / denom - coef * xi);
                }
                vec![gx.into_shape_with_order(g.raw_dim()).unwrap()]
            }),
        )
    }

    /// LayerNorm over the last axis with scale `gamma` and shift `beta`.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> TensorId {
        let xv = self.value(x);
        let n = xv.shape().last().copied().unwrap();
        let rows = xv.len() / n;
        let xf = flat2(xv, rows, n);
        let gv = self.value(gamma).iter().copied().collect::<Vec<_>>();
        let bv = self.value(beta).iter().copied().collect::<Vec<_>>();
        let mut out = Array2::<f64>::zeros((rows, n));
        for r in 0..rows {
            let xr = xf.index_axis(Axis(0), r);
            let mu = xr.mean().unwrap();
            let var = xr.mapv(|v| (v - mu) * (v - mu)).mean().unwrap();
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..n {
                out[(r, c)] = (xr[c] - mu) * inv * gv[c] + bv[c];
            }
        }
        let v = out.into_dyn().into_shape_with_order(xv.raw_dim()).unwrap();
        self.push(
            v,
            vec![x, gamma, beta],
            Box::new(move |g, p, _| {
                let n = p[0].shape().last().copied().unwrap();
                let rows = g.len() / n;
                let xf = flat2(p[0], rows, n);
                let gf = flat2(g, rows, n);
                let gamma_v: Vec<f64> = p[1].iter().copied().collect();
                let mut gx = Array2::<f64>::zeros((rows, n));
                let mut ggamma = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                for r in 0..rows {
                    let xr = xf.index_axis(Axis(0), r);
                    let gr = gf.index_axis(Axis(0), r);
                    let mu = xr.mean().unwrap();
                    let var = xr.mapv(|v| (v - mu) * (v - mu)).mean().unwrap();
                    let inv = 1.0 / (var + eps).sqrt();
                    // accumulate parameter grads via xhat
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let mut dxhat = vec![0.0; n];
                    for c in 0..n {
                        let xhat = (xr[c] - mu) * inv;
                        ggamma[c] += gr[c] * xhat;
                        gbeta[c] += gr[c];
                        dxhat[c] = gr[c] * gamma_v[c];
                        sum_dxhat += dxhat[c];
                        sum_dxhat_xhat += dxhat[c] * xhat;
                    }
                    let nf = n as f64;
                    for c in 0..n {
                        let xhat = (xr[c] - mu) * inv;
                        gx[(r, c)] =
                            inv / nf * (nf * dxhat[c] - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
                vec![
                    gx.into_dyn().into_shape_with_order(g.raw_dim()).unwrap(),
                    Array1::from(ggamma)
                        .into_dyn()
                        .into_shape_with_order(p[1].raw_dim())
                        .unwrap(),
                    Array1::from(gbeta)
                        .into_dyn()
                        .into_shape_with_order(p[2].raw_dim())
                        .unwrap(),
                ]
            }),
        )
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s = self.value(x).sum();
        let v = ndarray::arr0(s).into_dyn();
        self.push(
            v,
            vec![x],
            Box::new(|g, p, _| {
                let gs = g.iter().next().copied().unwrap();
                vec![Arr::from_elem(p[0].raw_dim(), gs)]
            }),
        )
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let len = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / len as f64)
    }

    /// Sum over the last axis: `(..., N) -> (...)`.
    pub fn sum_last(&mut self, x: TensorId) -> TensorId {
        let xv = self.value(x);
        let last = xv.ndim() - 1;
        let v = xv.sum_axis(Axis(last));
        self.push(
            v,
            vec![x],
            Box::new(move |g, p, _| {
                let n = p[0].shape().last().copied().unwrap();
                let mut gx = Arr::zeros(p[0].raw_dim());
                let rows = gx.len() / n;
                let gflat: Vec<f64> = g.iter().copied().collect();
                let mut gx2 = gx
                    .view_mut()
                    .into_shape_with_order((rows, n))
                    .unwrap();
                for r in 0..rows {
                    gx2.row_mut(r).fill(gflat[r]);
                }
                vec![gx]
            }),
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Backpropagate from a scalar node; returns per-node gradients.
    pub fn backward(&self, loss: TensorId) -> Gradients {
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Arr::ones(self.nodes[loss.0].value.raw_dim());
        debug_assert_eq!(seed.len(), 1, "backward() expects a scalar loss");
        grads[loss.0] = Some(seed);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(ref back) = node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else { continue };
            let parent_vals: Vec<&Arr> = node
                .parents
                .iter()
                .map(|p| &self.nodes[p.0].value)
                .collect();
            let parent_grads = back(&g, &parent_vals, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (pid, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[pid.0].needs_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[pid.0].value.shape());
                match &mut grads[pid.0] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

// ── raw helpers ────────────────────────────────────────────────────────

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected 2-d tensor")
}

fn flat2(a: &Arr, rows: usize, n: usize) -> Array2<f64> {
    a.as_standard_layout()
        .to_owned()
        .into_shape_with_order((rows, n))
        .unwrap()
}

fn permute3_021(a: &Arr) -> Arr {
    a.view()
        .permuted_axes(IxDyn(&[0, 2, 1]))
        .as_standard_layout()
        .to_owned()
}

fn bmm_raw(a: &Arr, b: &Arr) -> Arr {
    let av = a
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("bmm: lhs must be 3-d");
    let bv = b
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("bmm: rhs must be 3-d");
    let (bs, m, _k) = av.dim();
    let n = bv.dim().2;
    assert_eq!(av.dim().2, bv.dim().1, "bmm: inner dims differ");
    assert_eq!(bs, bv.dim().0, "bmm: batch dims differ");
    let mut out = ndarray::Array3::<f64>::zeros((bs, m, n));
    for i in 0..bs {
        let prod = av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i));
        out.index_axis_mut(Axis(0), i).assign(&prod);
    }
    out.into_dyn()
}

/// Numerically stable softmax over the last axis (plain array, no tape).
pub fn softmax_raw(x: &Arr) -> Arr {
    let n = x.shape().last().copied().unwrap();
    let rows = x.len() / n;
    let mut out = flat2(x, rows, n);
    for r in 0..rows {
        let mut row = out.index_axis_mut(Axis(0), r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out.into_dyn().into_shape_with_order(x.raw_dim()).unwrap()
}

/// Numerically stable log-softmax over the last axis (plain array, no tape).
pub fn log_softmax_raw(x: &Arr) -> Arr {
    let n = x.shape().last().copied().unwrap();
    let rows = x.len() / n;
    let mut out = flat2(x, rows, n);
    for r in 0..rows {
        let mut row = out.index_axis_mut(Axis(0), r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out.into_dyn().into_shape_with_order(x.raw_dim()).unwrap()
}
