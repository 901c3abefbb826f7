//! Reverse-mode automatic differentiation over [`Tensor`].
//!
//! Eager tape: every op computes its value immediately and, while gradient
//! recording is enabled, registers a backward closure. `backward()` on a
//! scalar walks the graph in reverse topological order and accumulates
//! gradients into each node. Inference paths wrap themselves in [`no_grad`]
//! so no graph is retained.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Real, Tensor};
use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

/// Run `f` with gradient recording disabled (inference mode).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    GRAD_ENABLED.with(|g| {
        let prev = g.get();
        g.set(false);
        let out = f();
        g.set(prev);
        out
    })
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

fn next_id() -> u64 {
    NEXT_ID.with(|n| {
        let id = n.get();
        n.set(id + 1);
        id
    })
}

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &[Var<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    id: u64,
    value: RefCell<Tensor<T>>,
    grad: RefCell<Option<Tensor<T>>>,
    parents: Vec<Var<T>>,
    backward: Option<BackFn<T>>,
    requires_grad: bool,
}

/// A value in the autodiff graph.
#[derive(Clone)]
pub struct Var<T: Real = f32> {
    node: Rc<Node<T>>,
}

impl<T: Real> Var<T> {
    /// Trainable leaf.
    pub fn param(value: Tensor<T>) -> Self {
        Var {
            node: Rc::new(Node {
                id: next_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                requires_grad: true,
            }),
        }
    }

    /// Non-trainable leaf.
    pub fn constant(value: Tensor<T>) -> Self {
        Var {
            node: Rc::new(Node {
                id: next_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                requires_grad: false,
            }),
        }
    }

    fn from_op(value: Tensor<T>, parents: Vec<Var<T>>, backward: BackFn<T>) -> Self {
        let record = grad_enabled() && parents.iter().any(|p| p.node.requires_grad);
        if record {
            Var {
                node: Rc::new(Node {
                    id: next_id(),
                    value: RefCell::new(value),
                    grad: RefCell::new(None),
                    parents,
                    backward: Some(backward),
                    requires_grad: true,
                }),
            }
        } else {
            Var::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn value(&self) -> Tensor<T> {
        self.node.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.node.value.borrow().numel()
    }

    pub fn item(&self) -> T {
        self.node.value.borrow().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Overwrite a leaf's value in place (optimizer updates, checkpoint load).
    pub fn set_value(&self, value: Tensor<T>) {
        assert_eq!(
            self.node.value.borrow().shape(),
            value.shape(),
            "set_value shape mismatch"
        );
        *self.node.value.borrow_mut() = value;
    }

    /// Mutate a leaf's value in place.
    pub fn update_value(&self, f: impl FnOnce(&mut Tensor<T>)) {
        f(&mut self.node.value.borrow_mut());
    }

    fn accumulate_grad(&self, g: Tensor<T>) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => existing.add_assign(&g),
            None => *slot = Some(g),
        }
    }

    /// Reverse-mode backward pass from a scalar.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() requires a scalar loss");
        // Iterative post-order topological sort over the recorded graph.
        let mut order: Vec<Var<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((var, processed)) = stack.pop() {
            if processed {
                order.push(var);
                continue;
            }
            if !visited.insert(var.node.id) {
                continue;
            }
            stack.push((var.clone(), true));
            for p in &var.node.parents {
                if p.node.requires_grad && !visited.contains(&p.node.id) {
                    stack.push((p.clone(), false));
                }
            }
        }

        self.accumulate_grad(Tensor::full(&[1], T::one()));
        for var in order.iter().rev() {
            let Some(back) = var.node.backward.as_ref() else { continue };
            let grad_out = match var.node.grad.borrow().clone() {
                Some(g) => g,
                None => continue,
            };
            let value = var.node.value.borrow().clone();
            let parent_grads = back(&grad_out, &var.node.parents, &value);
            for (p, g) in var.node.parents.iter().zip(parent_grads) {
                if let Some(g) = g {
                    if p.node.requires_grad {
                        p.accumulate_grad(g);
                    }
                }
            }
            // Non-leaf grads are no longer needed; free them eagerly.
            if var.node.backward.is_some() {
                *var.node.grad.borrow_mut() = None;
            }
        }
    }

    // ----- elementwise -----

    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let v = self.node.value.borrow().add(&other.node.value.borrow()).expect("add");
        Var::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let v = self.node.value.borrow().sub(&other.node.value.borrow()).expect("sub");
        Var::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.scale(-T::one()))]),
        )
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let v = self.node.value.borrow().mul(&other.node.value.borrow()).expect("mul");
        Var::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents, _| {
                let da = parents[0]
                    .node
                    .requires_grad
                    .then(|| g.mul(&parents[1].node.value.borrow()).unwrap());
                let db = parents[1]
                    .node
                    .requires_grad
                    .then(|| g.mul(&parents[0].node.value.borrow()).unwrap());
                vec![da, db]
            }),
        )
    }

    pub fn scale(&self, c: T) -> Var<T> {
        let v = self.node.value.borrow().scale(c);
        Var::from_op(
            v,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.scale(c))]),
        )
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        let v = self.node.value.borrow().map(|x| x + c);
        Var::from_op(v, vec![self.clone()], Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    pub fn silu(&self) -> Var<T> {
        let v = self.node.value.borrow().map(|x| x * sigmoid_scalar(x));
        Var::from_op(
            v,
            vec![self.clone()],
            Box::new(|g, parents, _| {
                let x = parents[0].node.value.borrow();
                let dx = x.map(|x| {
                    let s = sigmoid_scalar(x);
                    s * (T::one() + x * (T::one() - s))
                });
                vec![Some(g.mul(&dx).unwrap())]
            }),
        )
    }

    pub fn sigmoid(&self) -> Var<T> {
        let v = self.node.value.borrow().map(sigmoid_scalar);
        Var::from_op(
            v,
            vec![self.clone()],
            Box::new(|g, _, y| {
                let dy = y.map(|y| y * (T::one() - y));
                vec![Some(g.mul(&dy).unwrap())]
            }),
        )
    }

    pub fn exp(&self) -> Var<T> {
        let v = self.node.value.borrow().map(|x| x.exp());
        Var::from_op(
            v,
            vec![self.clone()],
            Box::new(|g, _, y| vec![Some(g.mul(y).unwrap())]),
        )
    }

    pub fn rsqrt(&self) -> Var<T> {
        let v = self.node.value.borrow().map(|x| T::one() / x.sqrt());
        Var::from_op(
            v,
            vec![self.clone()],
            Box::new(|g, _, y| {
                let half = T::from_f64(0.5);
                let dy = y.map(|y| -half * y * y * y);
                vec![Some(g.mul(&dy).unwrap())]
            }),
        )
    }

    // ----- shape -----

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let v = self.node.value.borrow().reshape(shape).expect("reshape");
        let old_shape = self.shape();
        Var::from_op(
            v,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.reshape(&old_shape).unwrap())]),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Var<T> {
        let v = self.node.value.borrow().permute(axes).expect("permute");
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Var::from_op(
            v,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.permute(&inverse).unwrap())]),
        )
    }

    pub fn transpose(&self) -> Var<T> {
        self.permute(&[1, 0])
    }

    pub fn concat(parts: &[Var<T>], axis: usize) -> Var<T> {
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().collect();
        let v = Tensor::concat(&refs, axis).expect("concat");
        let extents: Vec<usize> = values.iter().map(|t| t.shape()[axis]).collect();
        Var::from_op(
            v,
            parts.to_vec(),
            Box::new(move |g, parents, _| {
                let shape = g.shape().to_vec();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[axis];
                let gd = g.data();
                let mut grads = Vec::with_capacity(parents.len());
                let mut offset = 0usize;
                for (pi, &ext) in extents.iter().enumerate() {
                    let mut shp = shape.clone();
                    shp[axis] = ext;
                    let mut part = Tensor::zeros(&shp);
                    {
                        let pd = part.data_mut();
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * ext * inner;
                            pd[dst..dst + ext * inner]
                                .copy_from_slice(&gd[src..src + ext * inner]);
                        }
                    }
                    offset += ext;
                    if parents[pi].node.requires_grad {
                        grads.push(Some(part));
                    } else {
                        grads.push(None);
                    }
                }
                grads
            }),
        )
    }

    /// Select rows of a rank-2 tensor. Duplicate indices accumulate in backward.
    pub fn gather_rows(&self, indices: &[usize]) -> Var<T> {
        let value = self.node.value.borrow();
        assert_eq!(value.rank(), 2, "gather_rows expects rank-2");
        let (rows, cols) = (value.shape()[0], value.shape()[1]);
        let mut out = Tensor::zeros(&[indices.len(), cols]);
        for (i, &r) in indices.iter().enumerate() {
            assert!(r < rows, "gather_rows index {r} out of {rows}");
            out.data_mut()[i * cols..(i + 1) * cols]
                .copy_from_slice(&value.data()[r * cols..(r + 1) * cols]);
        }
        drop(value);
        let idx = indices.to_vec();
        let src_rows = rows;
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let cols = g.shape()[1];
                let mut dx = Tensor::zeros(&[src_rows, cols]);
                for (i, &r) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dx.data_mut()[r * cols + c] += g.data()[i * cols + c];
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    // ----- linear algebra -----

    pub fn matmul(&self, other: &Var<T>) -> Var<T> {
        let v = ops::matmul(&self.node.value.borrow(), &other.node.value.borrow()).expect("matmul");
        Var::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents, _| {
                let da = parents[0].node.requires_grad.then(|| {
                    ops::matmul_nt(g, &parents[1].node.value.borrow()).unwrap()
                });
                let db = parents[1].node.requires_grad.then(|| {
                    ops::matmul_tn(&parents[0].node.value.borrow(), g).unwrap()
                });
                vec![da, db]
            }),
        )
    }

    /// Batched matmul over (B x M x K) and (B x K x N).
    pub fn bmm(&self, other: &Var<T>) -> Var<T> {
        let v = ops::batch_matmul(&self.node.value.borrow(), &other.node.value.borrow(), false, false)
            .expect("bmm");
        Var::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents, _| {
                let da = parents[0].node.requires_grad.then(|| {
                    ops::batch_matmul(g, &parents[1].node.value.borrow(), false, true).unwrap()
                });
                let db = parents[1].node.requires_grad.then(|| {
                    ops::batch_matmul(&parents[0].node.value.borrow(), g, true, false).unwrap()
                });
                vec![da, db]
            }),
        )
    }

    /// Batched matmul with the second operand transposed:
    /// (B x M x K) x (B x N x K)^T -> (B x M x N).
    pub fn bmm_nt(&self, other: &Var<T>) -> Var<T> {
        let v = ops::batch_matmul(&self.node.value.borrow(), &other.node.value.borrow(), false, true)
            .expect("bmm_nt");
        Var::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents, _| {
                let da = parents[0].node.requires_grad.then(|| {
                    ops::batch_matmul(g, &parents[1].node.value.borrow(), false, false).unwrap()
                });
                let db = parents[1].node.requires_grad.then(|| {
                    ops::batch_matmul(g, &parents[0].node.value.borrow(), true, false).unwrap()
                });
                vec![da, db]
            }),
        )
    }

    pub fn softmax_rows(&self) -> Var<T> {
        let v = ops::softmax_rows(&self.node.value.borrow()).expect("softmax");
        Var::from_op(
            v,
            vec![self.clone()],
            Box::new(|g, _, y| {
                let (rows, cols) = (y.shape()[0], y.shape()[1]);
                let mut dx = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    for c in 0..cols {
                        dx.data_mut()[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    // ----- reductions and broadcasts -----

    pub fn sum_all(&self) -> Var<T> {
        let v = Tensor::scalar(self.node.value.borrow().sum());
        let shape = self.shape();
        Var::from_op(
            v,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean_all(&self) -> Var<T> {
        let n = self.numel();
        self.sum_all().scale(T::one() / T::from_f64(n as f64))
    }

    /// Row means of a rank-2 tensor: (R x C) -> (R x 1).
    pub fn mean_rows(&self) -> Var<T> {
        let value = self.node.value.borrow();
        assert_eq!(value.rank(), 2);
        let (rows, cols) = (value.shape()[0], value.shape()[1]);
        let inv = T::one() / T::from_f64(cols as f64);
        let mut out = Tensor::zeros(&[rows, 1]);
        for r in 0..rows {
            let s: T = value.data()[r * cols..(r + 1) * cols].iter().copied().sum();
            out.data_mut()[r] = s * inv;
        }
        drop(value);
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, parents, _| {
                let shape = parents[0].shape();
                let (rows, cols) = (shape[0], shape[1]);
                let mut dx = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    let gv = g.data()[r] * inv;
                    for c in 0..cols {
                        dx.data_mut()[r * cols + c] = gv;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// (R x C) minus a per-row column (R x 1).
    pub fn sub_col(&self, col: &Var<T>) -> Var<T> {
        let x = self.node.value.borrow();
        let c = col.node.value.borrow();
        assert_eq!(x.shape()[0], c.shape()[0]);
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let mut out = x.clone();
        for r in 0..rows {
            let cv = c.data()[r];
            for j in 0..cols {
                out.data_mut()[r * cols + j] -= cv;
            }
        }
        drop(x);
        drop(c);
        Var::from_op(
            out,
            vec![self.clone(), col.clone()],
            Box::new(|g, _, _| {
                let (rows, cols) = (g.shape()[0], g.shape()[1]);
                let mut dc = Tensor::zeros(&[rows, 1]);
                for r in 0..rows {
                    let s: T = g.data()[r * cols..(r + 1) * cols].iter().copied().sum();
                    dc.data_mut()[r] = -s;
                }
                vec![Some(g.clone()), Some(dc)]
            }),
        )
    }

    /// (R x C) multiplied by a per-row column (R x 1).
    pub fn mul_col(&self, col: &Var<T>) -> Var<T> {
        let x = self.node.value.borrow();
        let c = col.node.value.borrow();
        assert_eq!(x.shape()[0], c.shape()[0]);
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let mut out = x.clone();
        for r in 0..rows {
            let cv = c.data()[r];
            for j in 0..cols {
                out.data_mut()[r * cols + j] *= cv;
            }
        }
        drop(x);
        drop(c);
        Var::from_op(
            out,
            vec![self.clone(), col.clone()],
            Box::new(|g, parents, _| {
                let x = parents[0].node.value.borrow();
                let c = parents[1].node.value.borrow();
                let (rows, cols) = (g.shape()[0], g.shape()[1]);
                let mut dx = Tensor::zeros(&[rows, cols]);
                let mut dc = Tensor::zeros(&[rows, 1]);
                for r in 0..rows {
                    let cv = c.data()[r];
                    let mut acc = T::zero();
                    for j in 0..cols {
                        let gi = g.data()[r * cols + j];
                        dx.data_mut()[r * cols + j] = gi * cv;
                        acc += gi * x.data()[r * cols + j];
                    }
                    dc.data_mut()[r] = acc;
                }
                vec![Some(dx), Some(dc)]
            }),
        )
    }

    /// (M x N) plus a bias vector (N) broadcast over rows.
    pub fn add_row_bias(&self, bias: &Var<T>) -> Var<T> {
        let x = self.node.value.borrow();
        let b = bias.node.value.borrow();
        assert_eq!(x.shape()[1], b.numel());
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let mut out = x.clone();
        for r in 0..rows {
            for j in 0..cols {
                out.data_mut()[r * cols + j] += b.data()[j];
            }
        }
        drop(x);
        drop(b);
        Var::from_op(
            out,
            vec![self.clone(), bias.clone()],
            Box::new(|g, parents, _| {
                let (rows, cols) = (g.shape()[0], g.shape()[1]);
                let bias_shape = parents[1].shape();
                let mut db = Tensor::zeros(&bias_shape);
                for r in 0..rows {
                    for j in 0..cols {
                        db.data_mut()[j] += g.data()[r * cols + j];
                    }
                }
                vec![Some(g.clone()), Some(db)]
            }),
        )
    }

    /// (B x C x S) scaled per channel by a (C) vector.
    pub fn mul_channel(&self, weight: &Var<T>) -> Var<T> {
        let x = self.node.value.borrow();
        let w = weight.node.value.borrow();
        assert_eq!(x.rank(), 3);
        assert_eq!(x.shape()[1], w.numel());
        let (b, c, s) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = x.clone();
        for bi in 0..b {
            for ci in 0..c {
                let wv = w.data()[ci];
                let base = (bi * c + ci) * s;
                for si in 0..s {
                    out.data_mut()[base + si] *= wv;
                }
            }
        }
        drop(x);
        drop(w);
        Var::from_op(
            out,
            vec![self.clone(), weight.clone()],
            Box::new(|g, parents, _| {
                let x = parents[0].node.value.borrow();
                let w = parents[1].node.value.borrow();
                let (b, c, s) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut dx = Tensor::zeros(x.shape());
                let mut dw = Tensor::zeros(&[c]);
                for bi in 0..b {
                    for ci in 0..c {
                        let wv = w.data()[ci];
                        let base = (bi * c + ci) * s;
                        let mut acc = T::zero();
                        for si in 0..s {
                            let gi = g.data()[base + si];
                            dx.data_mut()[base + si] = gi * wv;
                            acc += gi * x.data()[base + si];
                        }
                        dw.data_mut()[ci] += acc;
                    }
                }
                vec![Some(dx), Some(dw)]
            }),
        )
    }

    /// (B x C x S) plus a (C) bias broadcast over batch and positions.
    pub fn add_channel(&self, bias: &Var<T>) -> Var<T> {
        let x = self.node.value.borrow();
        let bt = bias.node.value.borrow();
        assert_eq!(x.rank(), 3);
        assert_eq!(x.shape()[1], bt.numel());
        let (b, c, s) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = x.clone();
        for bi in 0..b {
            for ci in 0..c {
                let bv = bt.data()[ci];
                let base = (bi * c + ci) * s;
                for si in 0..s {
                    out.data_mut()[base + si] += bv;
                }
            }
        }
        drop(x);
        drop(bt);
        Var::from_op(
            out,
            vec![self.clone(), bias.clone()],
            Box::new(|g, parents, _| {
                let shape = parents[0].shape();
                let (b, c, s) = (shape[0], shape[1], shape[2]);
                let mut db = Tensor::zeros(&[c]);
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * s;
                        let mut acc = T::zero();
                        for si in 0..s {
                            acc += g.data()[base + si];
                        }
                        db.data_mut()[ci] += acc;
                    }
                }
                vec![Some(g.clone()), Some(db)]
            }),
        )
    }

    /// (B x C x S) plus a per-sample channel vector (B x C), broadcast over S.
    pub fn add_sample_channel(&self, emb: &Var<T>) -> Var<T> {
        let x = self.node.value.borrow();
        let e = emb.node.value.borrow();
        assert_eq!(x.rank(), 3);
        assert_eq!(e.rank(), 2);
        assert_eq!(x.shape()[0], e.shape()[0]);
        assert_eq!(x.shape()[1], e.shape()[1]);
        let (b, c, s) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = x.clone();
        for bi in 0..b {
            for ci in 0..c {
                let ev = e.data()[bi * c + ci];
                let base = (bi * c + ci) * s;
                for si in 0..s {
                    out.data_mut()[base + si] += ev;
                }
            }
        }
        drop(x);
        drop(e);
        Var::from_op(
            out,
            vec![self.clone(), emb.clone()],
            Box::new(|g, parents, _| {
                let shape = parents[0].shape();
                let (b, c, s) = (shape[0], shape[1], shape[2]);
                let mut de = Tensor::zeros(&[b, c]);
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * s;
                        let mut acc = T::zero();
                        for si in 0..s {
                            acc += g.data()[base + si];
                        }
                        de.data_mut()[bi * c + ci] = acc;
                    }
                }
                vec![Some(g.clone()), Some(de)]
            }),
        )
    }

    // ----- structured ops -----

    /// 3-d convolution; see [`ops::conv3d`].
    pub fn conv3d(&self, weight: &Var<T>, bias: &Var<T>, spec: ops::Conv3dSpec) -> Var<T> {
        let v = ops::conv3d(
            &self.node.value.borrow(),
            &weight.node.value.borrow(),
            Some(&bias.node.value.borrow()),
            spec,
        )
        .expect("conv3d");
        Var::from_op(
            v,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |g, parents, _| {
                let x = parents[0].node.value.borrow();
                let w = parents[1].node.value.borrow();
                let need = (
                    parents[0].node.requires_grad,
                    parents[1].node.requires_grad,
                    parents[2].node.requires_grad,
                );
                let (dx, dw, db) = ops::conv3d_backward(&x, &w, g, spec, need).unwrap();
                vec![dx, dw, db]
            }),
        )
    }

    /// 2-d convolution on (B,C,H,W).
    pub fn conv2d(
        &self,
        weight: &Var<T>,
        bias: &Var<T>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Var<T> {
        let shape = self.shape();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let wshape = weight.shape();
        let (oc, ic, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        let spec = ops::Conv3dSpec { stride: (1, stride.0, stride.1), pad: (0, pad.0, pad.1) };
        let x5 = self.reshape(&[b, c, 1, h, w]);
        let w5 = weight.reshape(&[oc, ic, 1, kh, kw]);
        let out = x5.conv3d(&w5, bias, spec);
        let oshape = out.shape();
        out.reshape(&[oshape[0], oshape[1], oshape[3], oshape[4]])
    }

    /// Nearest-neighbor 2x upsampling on (B,C,H,W).
    pub fn upsample_nearest_2x(&self) -> Var<T> {
        let v = ops::upsample_nearest_2x(&self.node.value.borrow()).expect("upsample");
        Var::from_op(
            v,
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(ops::downsum_2x(g).unwrap())]),
        )
    }

    /// Embedding lookup: rows of `table` (V x d) selected by `ids`.
    pub fn embedding(table: &Var<T>, ids: &[usize]) -> Var<T> {
        table.gather_rows(ids)
    }

    /// Mean cross-entropy of logits (B x K) against integer targets.
    pub fn cross_entropy_logits(&self, targets: &[usize]) -> Var<T> {
        let logits = self.node.value.borrow();
        assert_eq!(logits.rank(), 2);
        let (b, k) = (logits.shape()[0], logits.shape()[1]);
        assert_eq!(targets.len(), b);
        let probs = ops::softmax_rows(&logits).unwrap();
        let mut loss = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < k, "target {t} out of {k} classes");
            loss -= probs.data()[i * k + t].to_f64().max(1e-300).ln();
        }
        drop(logits);
        let value = Tensor::scalar(T::from_f64(loss / b as f64));
        let targets = targets.to_vec();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, parents, _| {
                let logits = parents[0].node.value.borrow();
                let (b, k) = (logits.shape()[0], logits.shape()[1]);
                let mut dx = ops::softmax_rows(&logits).unwrap();
                for (i, &t) in targets.iter().enumerate() {
                    dx.data_mut()[i * k + t] -= T::one();
                }
                let scale = g.item() / T::from_f64(b as f64);
                vec![Some(dx.scale(scale))]
            }),
        )
    }

    /// Mean squared error against `other`.
    pub fn mse(&self, other: &Var<T>) -> Var<T> {
        let d = self.sub(other);
        d.mul(&d).mean_all()
    }
}

fn sigmoid_scalar<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Scaled dot-product attention as a differentiable composite.
pub fn attention<T: Real>(q: &Var<T>, k: &Var<T>, v: &Var<T>) -> Var<T> {
    let d = q.shape()[1];
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let scores = q.matmul(&k.transpose()).scale(scale);
    scores.softmax_rows().matmul(v)
}

/// Maximum relative error between analytic and central-difference gradients
/// of a scalar function `f` at `x`.
///
/// The checked subgraph runs in 64-bit. `f` must be smooth at `x`; functions
/// with kinks (hard max/min at the evaluation point) are unsupported and the
/// caller must avoid them. `eps` must lie in [1e-5, 1e-3].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Var<f64>) -> Var<f64>,
{
    if !(1e-5..=1e-3).contains(&eps) {
        return Err(Error::input(format!("grad_check eps {eps} outside [1e-5, 1e-3]")));
    }
    let leaf = Var::param(x.clone());
    let loss = f(&leaf);
    if loss.numel() != 1 {
        return Err(Error::input("grad_check requires scalar function"));
    }
    if !loss.value().is_finite() {
        return Err(Error::numeric("grad_check: non-finite loss"));
    }
    loss.backward();
    let analytic = leaf
        .grad()
        .ok_or_else(|| Error::numeric("grad_check: no gradient reached input"))?;

    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let v = no_grad(|| f(&Var::constant(t.clone())).item());
        if !v.is_finite() {
            return Err(Error::numeric("grad_check: non-finite intermediate"));
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// Freeze helper: a HashMap view of named parameter tensors.
pub type ParamMap<T> = HashMap<String, Tensor<T>>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn quadratic_gradient_exact() {
        // f(x) = sum(x^2), grad = 2x.
        let x = Tensor::new(&[3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let rel = grad_check(|v| v.mul(v).sum_all(), &x, 1e-4).unwrap();
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn quadratic_analytic_values() {
        let x = Var::param(Tensor::new(&[3], vec![1.0f64, 2.0, 3.0]).unwrap());
        let loss = x.mul(&x).sum_all();
        loss.backward();
        let g = x.grad().unwrap();
        assert_eq!(g.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn attention_gradient() {
        let mut rng = RngState::new(11, 1).rng();
        let q = Tensor::<f64>::randn(&[3, 4], &mut rng);
        let k = Var::constant(Tensor::<f64>::randn(&[3, 4], &mut rng));
        let v = Var::constant(Tensor::<f64>::randn(&[3, 4], &mut rng));
        let rel = grad_check(|x| attention(x, &k, &v).sum_all(), &q, 1e-4).unwrap();
        assert!(rel < 1e-3, "rel err {rel}");
    }

    #[test]
    fn matmul_and_bias_gradient() {
        let mut rng = RngState::new(12, 1).rng();
        let w = Tensor::<f64>::randn(&[4, 5], &mut rng);
        let x = Var::constant(Tensor::<f64>::randn(&[3, 4], &mut rng));
        let rel = grad_check(|wv| x.matmul(wv).sum_all(), &w, 1e-4).unwrap();
        assert!(rel < 1e-6);
    }

    #[test]
    fn conv2d_gradient_wrt_input_and_weight() {
        let mut rng = RngState::new(13, 1).rng();
        let x = Tensor::<f64>::randn(&[1, 2, 5, 5], &mut rng);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3], &mut rng);
        let b = Tensor::<f64>::randn(&[3], &mut rng);
        let coef = Var::constant(Tensor::<f64>::randn(&[1, 3, 5, 5], &mut rng));

        let wv = Var::constant(w.clone());
        let bv = Var::constant(b.clone());
        let rel = grad_check(
            |xv| xv.conv2d(&wv, &bv, (1, 1), (1, 1)).mul(&coef).sum_all(),
            &x,
            1e-4,
        )
        .unwrap();
        assert!(rel < 1e-6, "input grad rel {rel}");

        let xv = Var::constant(x.clone());
        let rel = grad_check(
            |wv| xv.conv2d(wv, &bv, (1, 1), (1, 1)).mul(&coef).sum_all(),
            &w,
            1e-4,
        )
        .unwrap();
        assert!(rel < 1e-6, "weight grad rel {rel}");
    }

    #[test]
    fn softmax_gradient() {
        let mut rng = RngState::new(14, 1).rng();
        let x = Tensor::<f64>::randn(&[3, 5], &mut rng);
        let coef = Var::constant(Tensor::<f64>::randn(&[3, 5], &mut rng));
        let rel = grad_check(|v| v.softmax_rows().mul(&coef).sum_all(), &x, 1e-4).unwrap();
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = RngState::new(15, 1).rng();
        let x = Tensor::<f64>::randn(&[4, 3], &mut rng);
        let targets = [0usize, 2, 1, 1];
        let rel = grad_check(|v| v.cross_entropy_logits(&targets), &x, 1e-4).unwrap();
        assert!(rel < 1e-6, "rel {rel}");
    }

    #[test]
    fn gather_concat_gradients() {
        let mut rng = RngState::new(16, 1).rng();
        let x = Tensor::<f64>::randn(&[4, 3], &mut rng);
        let coef = Var::constant(Tensor::<f64>::randn(&[5, 3], &mut rng));
        // Duplicate index 1 checks accumulation.
        let rel = grad_check(
            |v| {
                let g = v.gather_rows(&[1, 0, 1, 3, 2]);
                g.mul(&coef).sum_all()
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(rel < 1e-6);

        let other = Var::constant(Tensor::<f64>::randn(&[2, 3], &mut rng));
        let coef2 = Var::constant(Tensor::<f64>::randn(&[6, 3], &mut rng));
        let rel = grad_check(
            |v| Var::concat(&[v.clone(), other.clone()], 0).mul(&coef2).sum_all(),
            &x,
            1e-4,
        )
        .unwrap();
        assert!(rel < 1e-6);
    }

    #[test]
    fn bmm_gradients() {
        let mut rng = RngState::new(17, 1).rng();
        let a = Tensor::<f64>::randn(&[2, 3, 4], &mut rng);
        let b = Var::constant(Tensor::<f64>::randn(&[2, 4, 5], &mut rng));
        let coef = Var::constant(Tensor::<f64>::randn(&[2, 3, 5], &mut rng));
        let rel = grad_check(|v| v.bmm(&b).mul(&coef).sum_all(), &a, 1e-4).unwrap();
        assert!(rel < 1e-6, "bmm rel {rel}");

        let bt = Var::constant(b.value().permute(&[0, 2, 1]).unwrap());
        let rel = grad_check(|v| v.bmm_nt(&bt).mul(&coef).sum_all(), &a, 1e-4).unwrap();
        assert!(rel < 1e-6, "bmm_nt rel {rel}");

        // bmm_nt grad w.r.t. second operand.
        let av = Var::constant(a.clone());
        let rel = grad_check(|v| av.bmm_nt(v).mul(&coef).sum_all(), &bt.value(), 1e-4).unwrap();
        assert!(rel < 1e-6, "bmm_nt second-operand rel {rel}");
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = Var::param(Tensor::<f64>::scalar(2.0));
        let y = no_grad(|| x.mul(&x));
        assert!(!y.requires_grad());
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let x = Tensor::<f64>::scalar(1.0);
        assert!(grad_check(|v| v.sum_all(), &x, 1e-2).is_err());
    }

    #[test]
    fn backward_accumulates_shared_subgraph() {
        // y = x*x + x*x uses x twice through a shared node.
        let x = Var::param(Tensor::<f64>::scalar(3.0));
        let sq = x.mul(&x);
        let y = sq.add(&sq).sum_all();
        y.backward();
        assert_eq!(x.grad().unwrap().item(), 12.0);
    }
}
