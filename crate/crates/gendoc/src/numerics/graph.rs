//! Reverse-mode autodiff over a recorded operation graph.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Each op
//! pushes a node holding its output plus a closure that maps the output
//! gradient to input gradients. [`Graph::backward`] replays those closures in
//! reverse topological (= insertion) order.
//!
//! Nodes whose inputs all come from constants skip gradient recording
//! entirely, so inference-only forwards pay no autodiff cost.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

pub(crate) type BackFn<F> = Box<dyn Fn(&Tensor<F>) -> Vec<Option<Tensor<F>>>>;

struct BackEntry<F> {
    parents: Vec<NodeId>,
    run: BackFn<F>,
}

struct Node<F> {
    value: Tensor<F>,
    requires: bool,
    is_param: bool,
    back: Option<BackEntry<F>>,
}

/// Gradients keyed by node id, populated by [`Graph::backward`].
pub struct GradStore<F> {
    slots: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> GradStore<F> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<F>> {
        self.slots.get_mut(id.0).and_then(|s| s.take())
    }
}

#[derive(Default)]
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Insert a value that never receives gradients.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, false, false, None)
    }

    /// Insert a trainable leaf; its gradient survives `backward`.
    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, true, true, None)
    }

    fn push(
        &mut self,
        value: Tensor<F>,
        requires: bool,
        is_param: bool,
        back: Option<BackEntry<F>>,
    ) -> NodeId {
        self.nodes.push(Node {
            value,
            requires,
            is_param,
            back,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires)
    }

    /// Record an op: `value` plus a backward closure over `parents`.
    /// The closure is dropped when no parent needs gradients.
    pub(crate) fn op(
        &mut self,
        parents: Vec<NodeId>,
        value: Tensor<F>,
        make_back: impl FnOnce() -> BackFn<F>,
    ) -> NodeId {
        let requires = self.requires(&parents);
        let back = requires.then(|| BackEntry {
            parents,
            run: make_back(),
        });
        self.push(value, requires, false, back)
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients for
    /// every parameter leaf reachable from `loss`.
    pub fn backward(&self, loss: NodeId) -> GradStore<F> {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward() needs a scalar loss"
        );
        let mut slots: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::scalar_value(F::one()));

        for id in (0..=loss.0).rev() {
            let Some(grad) = slots[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if let Some(entry) = &node.back {
                let contribs = (entry.run)(&grad);
                debug_assert_eq!(contribs.len(), entry.parents.len());
                for (pid, contrib) in entry.parents.iter().zip(contribs) {
                    let Some(contrib) = contrib else { continue };
                    if !self.nodes[pid.0].requires {
                        continue;
                    }
                    match &mut slots[pid.0] {
                        Some(acc) => acc.accumulate(&contrib),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            if node.is_param {
                slots[id] = Some(grad);
            }
        }
        GradStore { slots }
    }

    // ── element-wise ────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = Tensor::from_vec(va.shape(), data).unwrap();
        self.op(vec![a, b], out, || {
            Box::new(move |g| vec![Some(g.clone()), Some(g.clone())])
        })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| *x - *y)
            .collect();
        let out = Tensor::from_vec(va.shape(), data).unwrap();
        self.op(vec![a, b], out, || {
            Box::new(move |g| {
                let neg = g.data().iter().map(|v| -*v).collect();
                vec![
                    Some(g.clone()),
                    Some(Tensor::from_vec(g.shape(), neg).unwrap()),
                ]
            })
        })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| *x * *y)
            .collect();
        let out = Tensor::from_vec(va.shape(), data).unwrap();
        let (ca, cb) = (va.clone(), vb.clone());
        self.op(vec![a, b], out, move || {
            Box::new(move |g| {
                let da = g
                    .data()
                    .iter()
                    .zip(cb.data())
                    .map(|(gv, bv)| *gv * *bv)
                    .collect();
                let db = g
                    .data()
                    .iter()
                    .zip(ca.data())
                    .map(|(gv, av)| *gv * *av)
                    .collect();
                vec![
                    Some(Tensor::from_vec(g.shape(), da).unwrap()),
                    Some(Tensor::from_vec(g.shape(), db).unwrap()),
                ]
            })
        })
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| *x * c).collect();
        let out = Tensor::from_vec(va.shape(), data).unwrap();
        self.op(vec![a], out, || {
            Box::new(move |g| {
                let dg = g.data().iter().map(|v| *v * c).collect();
                vec![Some(Tensor::from_vec(g.shape(), dg).unwrap())]
            })
        })
    }

    /// `x: n×d` plus a length-`d` bias broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        assert_eq!(vx.shape().len(), 2);
        let (n, d) = (vx.shape()[0], vx.shape()[1]);
        assert_eq!(vb.numel(), d, "add_bias: bias length mismatch");
        let mut data = vx.data().to_vec();
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] += vb.data()[c];
            }
        }
        let out = Tensor::from_vec(vx.shape(), data).unwrap();
        let bshape = vb.shape().to_vec();
        self.op(vec![x, bias], out, move || {
            Box::new(move |g| {
                let mut db = vec![F::zero(); d];
                for r in 0..n {
                    for c in 0..d {
                        db[c] += g.data()[r * d + c];
                    }
                }
                vec![
                    Some(g.clone()),
                    Some(Tensor::from_vec(&bshape, db).unwrap()),
                ]
            })
        })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let data = vx
            .data()
            .iter()
            .map(|v| if *v > F::zero() { *v } else { F::zero() })
            .collect();
        let out = Tensor::from_vec(vx.shape(), data).unwrap();
        let cx = vx.clone();
        self.op(vec![x], out, move || {
            Box::new(move |g| {
                let dx = g
                    .data()
                    .iter()
                    .zip(cx.data())
                    .map(|(gv, xv)| if *xv > F::zero() { *gv } else { F::zero() })
                    .collect();
                vec![Some(Tensor::from_vec(g.shape(), dx).unwrap())]
            })
        })
    }

    /// Gelu, tanh approximation. Smooth everywhere, which keeps the
    /// finite-difference oracle well-behaved.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let s = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let c = F::from_f64(0.044715);
        let half = F::from_f64(0.5);
        let data = vx
            .data()
            .iter()
            .map(|&v| {
                let t = (s * (v + c * v * v * v)).tanh();
                half * v * (F::one() + t)
            })
            .collect();
        let out = Tensor::from_vec(vx.shape(), data).unwrap();
        let cx = vx.clone();
        self.op(vec![x], out, move || {
            Box::new(move |g| {
                let three = F::from_f64(3.0);
                let dx = g
                    .data()
                    .iter()
                    .zip(cx.data())
                    .map(|(&gv, &v)| {
                        let inner = s * (v + c * v * v * v);
                        let t = inner.tanh();
                        let dinner = s * (F::one() + three * c * v * v);
                        let d = half * (F::one() + t)
                            + half * v * (F::one() - t * t) * dinner;
                        gv * d
                    })
                    .collect();
                vec![Some(Tensor::from_vec(g.shape(), dx).unwrap())]
            })
        })
    }

    // ── matrix products ─────────────────────────────────────────────

    /// `a: m×k` times `b: k×n`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape().len(), 2);
        assert_eq!(vb.shape().len(), 2);
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(k, k2, "matmul: inner dims {} vs {}", k, k2);
        let out = Tensor::from_vec(&[m, n], matmul_raw(va.data(), vb.data(), m, k, n)).unwrap();
        let (ca, cb) = (va.clone(), vb.clone());
        self.op(vec![a, b], out, move || {
            Box::new(move |g| {
                // da = g @ b^T, db = a^T @ g
                let mut da = vec![F::zero(); m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = F::zero();
                        for j in 0..n {
                            acc += g.data()[i * n + j] * cb.data()[p * n + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                let mut db = vec![F::zero(); k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = ca.data()[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += av * g.data()[i * n + j];
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(&[m, k], da).unwrap()),
                    Some(Tensor::from_vec(&[k, n], db).unwrap()),
                ]
            })
        })
    }

    /// `a: m×k` times `b: n×k` transposed, giving `m×n`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape().len(), 2);
        assert_eq!(vb.shape().len(), 2);
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (n, k2) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(k, k2, "matmul_nt: inner dims {} vs {}", k, k2);
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = F::zero();
                for p in 0..k {
                    acc += va.data()[i * k + p] * vb.data()[j * k + p];
                }
                data[i * n + j] = acc;
            }
        }
        let out = Tensor::from_vec(&[m, n], data).unwrap();
        let (ca, cb) = (va.clone(), vb.clone());
        self.op(vec![a, b], out, move || {
            Box::new(move |g| {
                // da = g @ b, db = g^T @ a
                let da = matmul_raw(g.data(), cb.data(), m, n, k);
                let mut db = vec![F::zero(); n * k];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g.data()[i * n + j];
                        for p in 0..k {
                            db[j * k + p] += gv * ca.data()[i * k + p];
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(&[m, k], da).unwrap()),
                    Some(Tensor::from_vec(&[n, k], db).unwrap()),
                ]
            })
        })
    }

    // ── gathers, slices, concats ────────────────────────────────────

    /// Row gather: `out[i] = table[ids[i]]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let vt = &self.nodes[table.0].value;
        assert_eq!(vt.shape().len(), 2);
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding id {} out of range {}", id, v);
            data.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_vec(&[ids.len(), d], data).unwrap();
        let ids = ids.to_vec();
        self.op(vec![table], out, move || {
            Box::new(move |g| {
                let mut dt = vec![F::zero(); v * d];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += g.data()[r * d + c];
                    }
                }
                vec![Some(Tensor::from_vec(&[v, d], dt).unwrap())]
            })
        })
    }

    /// Per-row column gather: `out[i][j] = x[i][idx[i*m + j]]` with `idx`
    /// holding `n×m` indices row-major. Used to spread relative-bucket
    /// scores over position pairs.
    pub fn gather_cols_per_row(&mut self, x: NodeId, idx: &[usize], m: usize) -> NodeId {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.shape().len(), 2);
        let (n, c) = (vx.shape()[0], vx.shape()[1]);
        assert_eq!(idx.len(), n * m, "gather_cols_per_row: index count");
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                let k = idx[i * m + j];
                debug_assert!(k < c);
                data.push(vx.data()[i * c + k]);
            }
        }
        let out = Tensor::from_vec(&[n, m], data).unwrap();
        let idx = idx.to_vec();
        self.op(vec![x], out, move || {
            Box::new(move |g| {
                let mut dx = vec![F::zero(); n * c];
                for i in 0..n {
                    for j in 0..m {
                        dx[i * c + idx[i * m + j]] += g.data()[i * m + j];
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c], dx).unwrap())]
            })
        })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let (n, d) = (vx.shape()[0], vx.shape()[1]);
        assert!(start + len <= d);
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&vx.data()[r * d + start..r * d + start + len]);
        }
        let out = Tensor::from_vec(&[n, len], data).unwrap();
        self.op(vec![x], out, move || {
            Box::new(move |g| {
                let mut dx = vec![F::zero(); n * d];
                for r in 0..n {
                    for c in 0..len {
                        dx[r * d + start + c] = g.data()[r * len + c];
                    }
                }
                vec![Some(Tensor::from_vec(&[n, d], dx).unwrap())]
            })
        })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].0].value.shape()[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let v = &self.nodes[p.0].value;
                assert_eq!(v.shape()[0], n);
                v.shape()[1]
            })
            .collect();
        let d: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * d);
        for r in 0..n {
            for (p, w) in parts.iter().zip(&widths) {
                let v = &self.nodes[p.0].value;
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_vec(&[n, d], data).unwrap();
        let widths2 = widths.clone();
        self.op(parts.to_vec(), out, move || {
            Box::new(move |g| {
                let mut outs = Vec::with_capacity(widths2.len());
                let mut off = 0;
                for &w in &widths2 {
                    let mut part = Vec::with_capacity(n * w);
                    for r in 0..n {
                        part.extend_from_slice(&g.data()[r * d + off..r * d + off + w]);
                    }
                    outs.push(Some(Tensor::from_vec(&[n, w], part).unwrap()));
                    off += w;
                }
                outs
            })
        })
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let (n, d) = (vx.shape()[0], vx.shape()[1]);
        assert!(start + len <= n);
        let data = vx.data()[start * d..(start + len) * d].to_vec();
        let out = Tensor::from_vec(&[len, d], data).unwrap();
        self.op(vec![x], out, move || {
            Box::new(move |g| {
                let mut dx = vec![F::zero(); n * d];
                dx[start * d..(start + len) * d].copy_from_slice(g.data());
                vec![Some(Tensor::from_vec(&[n, d], dx).unwrap())]
            })
        })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let d = self.nodes[parts[0].0].value.shape()[1];
        let heights: Vec<usize> = parts
            .iter()
            .map(|p| {
                let v = &self.nodes[p.0].value;
                assert_eq!(v.shape()[1], d);
                v.shape()[0]
            })
            .collect();
        let n: usize = heights.iter().sum();
        let mut data = Vec::with_capacity(n * d);
        for p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let out = Tensor::from_vec(&[n, d], data).unwrap();
        let heights2 = heights.clone();
        self.op(parts.to_vec(), out, move || {
            Box::new(move |g| {
                let mut outs = Vec::with_capacity(heights2.len());
                let mut off = 0;
                for &h in &heights2 {
                    let part = g.data()[off * d..(off + h) * d].to_vec();
                    outs.push(Some(Tensor::from_vec(&[h, d], part).unwrap()));
                    off += h;
                }
                outs
            })
        })
    }

    /// Replace rows flagged `true` with a single learnable row vector.
    /// The replacement keeps its own gradient (sum over replaced rows).
    pub fn replace_rows(&mut self, x: NodeId, replacement: NodeId, flags: &[bool]) -> NodeId {
        let (vx, vr) = (&self.nodes[x.0].value, &self.nodes[replacement.0].value);
        let (n, d) = (vx.shape()[0], vx.shape()[1]);
        assert_eq!(flags.len(), n);
        assert_eq!(vr.numel(), d);
        let mut data = vx.data().to_vec();
        for (r, &f) in flags.iter().enumerate() {
            if f {
                data[r * d..(r + 1) * d].copy_from_slice(vr.data());
            }
        }
        let out = Tensor::from_vec(vx.shape(), data).unwrap();
        let flags = flags.to_vec();
        let rshape = vr.shape().to_vec();
        self.op(vec![x, replacement], out, move || {
            Box::new(move |g| {
                let mut dx = g.data().to_vec();
                let mut dr = vec![F::zero(); d];
                for (r, &f) in flags.iter().enumerate() {
                    if f {
                        for c in 0..d {
                            dr[c] += g.data()[r * d + c];
                            dx[r * d + c] = F::zero();
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(&[n, d], dx).unwrap()),
                    Some(Tensor::from_vec(&rshape, dr).unwrap()),
                ]
            })
        })
    }

    // ── normalization & attention pieces ────────────────────────────

    /// Row-wise softmax, stabilized by row-max subtraction.
    /// Rejects NaN input.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.masked_softmax_rows(x, None)
    }

    /// Row-wise softmax with an optional boolean keep-mask (`n×m`,
    /// row-major). Masked-out entries get exactly zero weight.
    pub fn masked_softmax_rows(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.shape().len(), 2);
        let (n, m) = (vx.shape()[0], vx.shape()[1]);
        if let Some(mk) = mask {
            assert_eq!(mk.len(), n * m, "softmax mask length");
        }
        if vx.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax input contains NaN".to_string()));
        }
        let mut data = vec![F::zero(); n * m];
        for i in 0..n {
            let row = &vx.data()[i * m..(i + 1) * m];
            let keep = |j: usize| mask.map_or(true, |mk| mk[i * m + j]);
            let mut mx = F::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > mx {
                    mx = v;
                }
            }
            if mx == F::neg_infinity() {
                return Err(Error::invalid(format!(
                    "softmax row {} has no unmasked entries",
                    i
                )));
            }
            let mut z = F::zero();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - mx).exp();
                    data[i * m + j] = e;
                    z += e;
                }
            }
            for j in 0..m {
                data[i * m + j] = data[i * m + j] / z;
            }
        }
        let out = Tensor::from_vec(&[n, m], data).unwrap();
        let cy = out.clone();
        Ok(self.op(vec![x], out, move || {
            Box::new(move |g| {
                // dx = y * (g - sum(g*y))
                let mut dx = vec![F::zero(); n * m];
                for i in 0..n {
                    let mut dot = F::zero();
                    for j in 0..m {
                        dot += g.data()[i * m + j] * cy.data()[i * m + j];
                    }
                    for j in 0..m {
                        dx[i * m + j] = cy.data()[i * m + j] * (g.data()[i * m + j] - dot);
                    }
                }
                vec![Some(Tensor::from_vec(&[n, m], dx).unwrap())]
            })
        }))
    }

    /// LayerNorm over the last axis of an `n×d` input.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let (n, d) = (vx.shape()[0], vx.shape()[1]);
        let vg = &self.nodes[gamma.0].value;
        let vb = &self.nodes[beta.0].value;
        assert_eq!(vg.numel(), d);
        assert_eq!(vb.numel(), d);
        let epsf = F::from_f64(eps);
        let dn = F::from_usize(d);
        let mut xhat = vec![F::zero(); n * d];
        let mut inv_sigma = vec![F::zero(); n];
        let mut data = vec![F::zero(); n * d];
        for i in 0..n {
            let row = &vx.data()[i * d..(i + 1) * d];
            let mut mean = F::zero();
            for &v in row {
                mean += v;
            }
            mean = mean / dn;
            let mut var = F::zero();
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var = var / dn;
            let inv = (var + epsf).sqrt().recip();
            inv_sigma[i] = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat[i * d + j] = xh;
                data[i * d + j] = vg.data()[j] * xh + vb.data()[j];
            }
        }
        let out = Tensor::from_vec(&[n, d], data).unwrap();
        let cg = vg.clone();
        let gshape = vg.shape().to_vec();
        let bshape = vb.shape().to_vec();
        self.op(vec![x, gamma, beta], out, move || {
            Box::new(move |g| {
                let mut dx = vec![F::zero(); n * d];
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                for i in 0..n {
                    let mut sum_dxhat = F::zero();
                    let mut sum_dxhat_xhat = F::zero();
                    for j in 0..d {
                        let gv = g.data()[i * d + j];
                        let xh = xhat[i * d + j];
                        dgamma[j] += gv * xh;
                        dbeta[j] += gv;
                        let dxh = gv * cg.data()[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh;
                    }
                    let m1 = sum_dxhat / dn;
                    let m2 = sum_dxhat_xhat / dn;
                    for j in 0..d {
                        let dxh = g.data()[i * d + j] * cg.data()[j];
                        dx[i * d + j] = inv_sigma[i] * (dxh - m1 - xhat[i * d + j] * m2);
                    }
                }
                vec![
                    Some(Tensor::from_vec(&[n, d], dx).unwrap()),
                    Some(Tensor::from_vec(&gshape, dgamma).unwrap()),
                    Some(Tensor::from_vec(&bshape, dbeta).unwrap()),
                ]
            })
        })
    }

    // ── reductions & losses ─────────────────────────────────────────

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let mut acc = F::zero();
        for &v in vx.data() {
            acc += v;
        }
        let shape = vx.shape().to_vec();
        self.op(vec![x], Tensor::scalar_value(acc), move || {
            Box::new(move |g| {
                let gv = g.item();
                vec![Some(Tensor::filled(&shape, gv))]
            })
        })
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].value.numel();
        let s = self.sum_all(x);
        self.scale(s, F::from_usize(n).recip())
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mse: shape mismatch");
        let n = va.numel();
        let nf = F::from_usize(n);
        let mut acc = F::zero();
        let diff: Vec<F> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| {
                let d = *x - *y;
                acc += d * d;
                d
            })
            .collect();
        let shape = va.shape().to_vec();
        let two = F::from_f64(2.0);
        self.op(vec![a, b], Tensor::scalar_value(acc / nf), move || {
            Box::new(move |g| {
                let gv = g.item();
                let k = two * gv / nf;
                let da: Vec<F> = diff.iter().map(|d| *d * k).collect();
                let db: Vec<F> = da.iter().map(|v| -*v).collect();
                vec![
                    Some(Tensor::from_vec(&shape, da).unwrap()),
                    Some(Tensor::from_vec(&shape, db).unwrap()),
                ]
            })
        })
    }

    /// Smoothed cross-entropy over rows of `logits` (`n×V`).
    ///
    /// Target distribution per row: `(1-s)` on the gold id plus `s/V`
    /// uniform. Rows whose `ignore` flag is set are excluded from the mean.
    /// With zero non-ignored rows the loss is a constant 0.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        ignore: &[bool],
        smoothing: f64,
        weight: f64,
    ) -> Result<NodeId> {
        let vl = &self.nodes[logits.0].value;
        assert_eq!(vl.shape().len(), 2);
        let (n, v) = (vl.shape()[0], vl.shape()[1]);
        if targets.len() != n {
            return Err(Error::invalid(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                n
            )));
        }
        if !ignore.is_empty() && ignore.len() != n {
            return Err(Error::invalid("cross_entropy: ignore length"));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid("cross_entropy: smoothing not in [0,1)"));
        }
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::invalid(format!(
                    "cross_entropy: target id {} at row {} out of vocab range {}",
                    t, i, v
                )));
            }
        }
        let ignored = |i: usize| !ignore.is_empty() && ignore[i];
        let active: usize = (0..n).filter(|&i| !ignored(i)).count();
        if active == 0 {
            return Ok(self.op(vec![logits], Tensor::scalar_value(F::zero()), || {
                Box::new(move |_| vec![None])
            }));
        }

        let s = F::from_f64(smoothing);
        let w = F::from_f64(weight);
        let vf = F::from_usize(v);
        let one_minus_s = F::one() - s;
        let s_over_v = s / vf;
        let mut probs = vec![F::zero(); n * v];
        let mut total = F::zero();
        for i in 0..n {
            if ignored(i) {
                continue;
            }
            let row = &vl.data()[i * v..(i + 1) * v];
            let mut mx = F::neg_infinity();
            for &x in row {
                if x > mx {
                    mx = x;
                }
            }
            let mut z = F::zero();
            let mut sum_x = F::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                probs[i * v + j] = e;
                z += e;
                sum_x += x;
            }
            let lse = mx + z.ln();
            for j in 0..v {
                probs[i * v + j] = probs[i * v + j] / z;
            }
            // (1-s)(lse - x_t) + (s/V)(V*lse - sum_x)
            let gold = row[targets[i]];
            total += one_minus_s * (lse - gold) + s_over_v * (vf * lse - sum_x);
        }
        let nf = F::from_usize(active);
        let loss = w * total / nf;
        let targets = targets.to_vec();
        let ignore = ignore.to_vec();
        self.check_finite_scalar(loss, "cross_entropy")?;
        Ok(self.op(vec![logits], Tensor::scalar_value(loss), move || {
            Box::new(move |g| {
                let gv = g.item();
                let k = gv * w / nf;
                let mut dl = vec![F::zero(); n * v];
                for i in 0..n {
                    if !ignore.is_empty() && ignore[i] {
                        continue;
                    }
                    for j in 0..v {
                        let q = if j == targets[i] {
                            one_minus_s + s_over_v
                        } else {
                            s_over_v
                        };
                        dl[i * v + j] = k * (probs[i * v + j] - q);
                    }
                }
                vec![Some(Tensor::from_vec(&[n, v], dl).unwrap())]
            })
        }))
    }

    fn check_finite_scalar(&self, v: F, what: &str) -> Result<()> {
        if v.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{} produced {}", what, v)))
        }
    }

    /// Sum a list of same-shape nodes (used to combine per-task losses).
    pub fn sum_nodes(&mut self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty());
        let mut acc = ids[0];
        for &id in &ids[1..] {
            acc = self.add(acc, id);
        }
        acc
    }
}

pub(crate) fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn t2(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t2(&[2, 2], &[0.0, 0.0, 5.5, 5.5]));
        let y = g.softmax_rows(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        let mut g = Graph::<f64>::new();
        let x = g.constant(t2(&[1, 3], &[-7.25, -7.25, -7.25]));
        let y = g.softmax_rows(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t2(&[1, 3], &[1.0, 2.0, 3.0]));
        let y = g.softmax_rows(x).unwrap();
        // direct 64-bit exp/normalize oracle
        let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = exps.iter().sum();
        for (a, e) in g.value(y).data().iter().zip(&exps) {
            assert!((a - e / z).abs() < 1e-15);
        }
        let total: f64 = g.value(y).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t2(&[1, 2], &[f64::NAN, 0.0]));
        assert!(g.softmax_rows(x).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_vocab() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 16]));
        let loss = g.cross_entropy(x, &[3], &[], 0.0, 1.0).unwrap();
        assert!((g.value(loss).item() - (16f64).ln()).abs() < 1e-4);
        // also for a handful of other vocab sizes
        for v in [2usize, 7, 100, 1000] {
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::zeros(&[1, v]));
            let loss = g.cross_entropy(x, &[v - 1], &[], 0.0, 1.0).unwrap();
            assert!((g.value(loss).item() - (v as f64).ln()).abs() < 1e-4);
        }
    }

    #[test]
    fn cross_entropy_confident_prediction_is_tiny() {
        let mut g = Graph::<f64>::new();
        let mut t = Tensor::zeros(&[1, 8]);
        t.data_mut()[2] = 30.0;
        let x = g.constant(t);
        let loss = g.cross_entropy(x, &[2], &[], 0.0, 1.0).unwrap();
        assert!(g.value(loss).item() < 1e-3);
    }

    #[test]
    fn cross_entropy_smoothed_matches_direct_formula() {
        // vocab=4, logits=(1,0,0,0), target=0, smoothing=0.1
        let logits = [1.0f64, 0.0, 0.0, 0.0];
        let s = 0.1;
        let v = 4usize;
        // independent direct evaluation of -sum_j q_j log p_j
        let z: f64 = logits.iter().map(|x| x.exp()).sum();
        let expected: f64 = -(0..v)
            .map(|j| {
                let q = if j == 0 { 1.0 - s + s / v as f64 } else { s / v as f64 };
                let logp = logits[j] - z.ln();
                q * logp
            })
            .sum::<f64>();
        let mut g = Graph::<f64>::new();
        let x = g.constant(t2(&[1, 4], &logits));
        let loss = g.cross_entropy(x, &[0], &[], s, 1.0).unwrap();
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 4]));
        assert!(g.cross_entropy(x, &[4], &[], 0.0, 1.0).is_err());
    }

    #[test]
    fn cross_entropy_all_ignored_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        let loss = g.cross_entropy(x, &[0, 1], &[true, true], 0.0, 1.0).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn backward_through_matmul_chain() {
        // loss = sum(a @ b); da = ones @ b^T, db = a^T @ ones
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t2(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(t2(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(a, b);
        let loss = g.sum_all(c);
        let grads = g.backward(loss);
        let da = grads.get(a).unwrap();
        let db = grads.get(b).unwrap();
        assert_eq!(da.data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(db.data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn sum_of_softmax_row_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t2(&[1, 4], &[0.3, -1.2, 2.0, 0.5]));
        let y = g.softmax_rows(x).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        for &v in grads.get(x).unwrap().data() {
            assert!(v.abs() < 1e-14, "softmax-sum grad should vanish, got {}", v);
        }
    }

    #[test]
    fn grad_of_square_at_three_is_six() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar_value(3.0));
        let y = g.mul(x, x);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        assert!((grads.get(x).unwrap().item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t2(&[1, 3], &[1.0, 100.0, 2.0]));
        let y = g
            .masked_softmax_rows(x, Some(&[true, false, true]))
            .unwrap();
        let v = g.value(y).data();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embedding_scatter_accumulates() {
        let mut g = Graph::<f64>::new();
        let table = g.leaf(t2(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let rows = g.embedding(table, &[1, 1, 0]);
        let loss = g.sum_all(rows);
        let grads = g.backward(loss);
        assert_eq!(grads.get(table).unwrap().data(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn purity_identical_inputs_bitwise_identical_outputs() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.constant(Tensor::from_vec(&[2, 3], vec![0.1, -0.4, 2.2, 1.0, 0.0, -3.5]).unwrap());
            let y = g.gelu(x);
            let z = g.softmax_rows(y).unwrap();
            g.value(z).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
