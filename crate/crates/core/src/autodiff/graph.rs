//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar output with respect to every parameter that contributed to it.
//! Values fed in through [`Graph::input`] or [`Graph::constant`] never receive
//! gradients.

use serde::{Deserialize, Serialize};

use crate::autodiff::tensor::gemm;
use crate::autodiff::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Param(ParamId),
    Affine { input: Var, weights: Var, bias: Var },
    Activation { input: Var, kind: Activation },
    SqErr { pred: Var, target: Var },
    Scale { input: Var, factor: f64 },
    Add { lhs: Var, rhs: Var },
}

#[derive(Debug)]
struct Node {
    // `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, var: Var) -> &Tensor {
        let node = &self.nodes[var.0];
        match (&node.value, node.op) {
            (Some(v), _) => v,
            (None, Op::Param(id)) => self.store.value(id),
            (None, _) => unreachable!("only parameter nodes defer their value"),
        }
    }

    fn push(&mut self, value: Option<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Data fed into the graph. Never differentiated.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Some(value), Op::Leaf, false)
    }

    /// Same as [`Graph::input`]; reads better for fixed targets such as cluster centers.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(None, Op::Param(id), true)
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        Ok(self.param(id))
    }

    /// `input · weights + bias` for an `n×d_in` input.
    pub fn affine(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weights);
        let b = self.value(bias);
        let (n, d_in) = x.dims2().ok_or_else(|| shape_err("affine input", x, w))?;
        let (w_in, d_out) = w.dims2().ok_or_else(|| shape_err("affine weights", x, w))?;
        if w_in != d_in {
            return Err(shape_err("affine", x, w));
        }
        if b.len() != d_out {
            return Err(shape_err("affine bias", w, b));
        }
        let mut out = vec![0.0; n * d_out];
        for row in out.chunks_exact_mut(d_out) {
            row.copy_from_slice(b.data());
        }
        gemm(n, d_in, d_out, x.data(), false, w.data(), false, &mut out, true);
        let out = Tensor::new(vec![n, d_out], out)?;
        check_finite(&out, "affine")?;
        let rg = self.requires_grad(input) || self.requires_grad(weights) || self.requires_grad(bias);
        Ok(self.push(
            Some(out),
            Op::Affine {
                input,
                weights,
                bias,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let x = self.value(input);
        check_finite(x, "activation input")?;
        let out = x.map(|v| kind.apply(v));
        let rg = self.requires_grad(input);
        Ok(self.push(Some(out), Op::Activation { input, kind }, rg))
    }

    /// `½ Σ (pred − target)²` as a scalar.
    pub fn sq_err(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred);
        let t = self.value(target);
        if p.shape() != t.shape() {
            return Err(shape_err("sq_err", p, t));
        }
        let loss = 0.5
            * p.data()
                .iter()
                .zip(t.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        let out = Tensor::scalar(loss);
        check_finite(&out, "sq_err")?;
        let rg = self.requires_grad(pred) || self.requires_grad(target);
        Ok(self.push(Some(out), Op::SqErr { pred, target }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).map(|v| v * factor);
        let rg = self.requires_grad(input);
        self.push(Some(out), Op::Scale { input, factor }, rg)
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let a = self.value(lhs);
        let b = self.value(rhs);
        if a.shape() != b.shape() {
            return Err(shape_err("add", a, b));
        }
        let mut out = a.clone();
        out.add_assign(b);
        let rg = self.requires_grad(lhs) || self.requires_grad(rhs);
        Ok(self.push(Some(out), Op::Add { lhs, rhs }, rg))
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.value(var).data()[0]
    }

    /// Per-element contributions whose sum is `output`, for outputs built from
    /// `sq_err`, `scale` and `add`. Any other node contributes its own value.
    ///
    /// Two evaluations that differ in only a few elements can be subtracted
    /// term by term without the cancellation error of subtracting the totals.
    pub fn loss_terms(&self, output: Var) -> Vec<f64> {
        let mut terms = Vec::new();
        self.collect_terms(output, 1.0, &mut terms);
        terms
    }

    fn collect_terms(&self, var: Var, factor: f64, out: &mut Vec<f64>) {
        match self.nodes[var.0].op {
            Op::SqErr { pred, target } => {
                let p = self.value(pred);
                let t = self.value(target);
                out.extend(
                    p.data()
                        .iter()
                        .zip(t.data())
                        .map(|(a, b)| factor * (0.5 * (a - b) * (a - b))),
                );
            }
            Op::Scale { input, factor: f } => self.collect_terms(input, factor * f, out),
            Op::Add { lhs, rhs } => {
                self.collect_terms(lhs, factor, out);
                self.collect_terms(rhs, factor, out);
            }
            _ => out.extend(self.value(var).data().iter().map(|v| factor * v)),
        }
    }

    /// Gradient of the scalar `output` with respect to every parameter on the tape.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Tensor::scalar(1.0));
        let mut grads = Gradients {
            slots: vec![None; self.store.len()],
        };

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = adj[idx].take() else {
                continue;
            };
            match node.op {
                Op::Leaf => {}
                Op::Param(id) => match grads.get_mut(id) {
                    Some(g) => g.add_assign(&upstream),
                    None => grads.slots[id.0] = Some(upstream),
                },
                Op::Affine {
                    input,
                    weights,
                    bias,
                } => {
                    let x = self.value(input);
                    let w = self.value(weights);
                    let (n, d_in) = x.dims2().expect("checked in forward");
                    let d_out = w.shape()[1];
                    let dy = upstream.data();
                    if self.requires_grad(input) {
                        let mut dx = vec![0.0; n * d_in];
                        gemm(n, d_out, d_in, dy, false, w.data(), true, &mut dx, false);
                        accumulate(&mut adj, input, Tensor::new(vec![n, d_in], dx)?);
                    }
                    if self.requires_grad(weights) {
                        let mut dw = vec![0.0; d_in * d_out];
                        gemm(d_in, n, d_out, x.data(), true, dy, false, &mut dw, false);
                        accumulate(&mut adj, weights, Tensor::new(vec![d_in, d_out], dw)?);
                    }
                    if self.requires_grad(bias) {
                        let mut db = vec![0.0; d_out];
                        for row in dy.chunks_exact(d_out) {
                            for (acc, v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        let shape = self.value(bias).shape().to_vec();
                        accumulate(&mut adj, bias, Tensor::new(shape, db)?);
                    }
                }
                Op::Activation { input, kind } => {
                    let out = node.value.as_ref().expect("activation stores its value");
                    let x = self.value(input);
                    let local: Vec<f64> = match kind {
                        Activation::Relu => upstream
                            .data()
                            .iter()
                            .zip(x.data())
                            .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                            .collect(),
                        Activation::Sigmoid => upstream
                            .data()
                            .iter()
                            .zip(out.data())
                            .map(|(g, &s)| g * s * (1.0 - s))
                            .collect(),
                        Activation::Identity => upstream.data().to_vec(),
                    };
                    accumulate(&mut adj, input, Tensor::new(x.shape().to_vec(), local)?);
                }
                Op::SqErr { pred, target } => {
                    let g = upstream.data()[0];
                    let p = self.value(pred);
                    let t = self.value(target);
                    if self.requires_grad(pred) {
                        let d: Vec<f64> =
                            p.data().iter().zip(t.data()).map(|(a, b)| g * (a - b)).collect();
                        accumulate(&mut adj, pred, Tensor::new(p.shape().to_vec(), d)?);
                    }
                    if self.requires_grad(target) {
                        let d: Vec<f64> =
                            p.data().iter().zip(t.data()).map(|(a, b)| g * (b - a)).collect();
                        accumulate(&mut adj, target, Tensor::new(t.shape().to_vec(), d)?);
                    }
                }
                Op::Scale { input, factor } => {
                    accumulate(&mut adj, input, upstream.map(|v| v * factor));
                }
                Op::Add { lhs, rhs } => {
                    if self.requires_grad(lhs) {
                        accumulate(&mut adj, lhs, upstream.clone());
                    }
                    if self.requires_grad(rhs) {
                        accumulate(&mut adj, rhs, upstream);
                    }
                }
            }
        }

        for g in grads.slots.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::NonFinite("backward pass".into()));
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Tensor>], var: Var, grad: Tensor) {
    match &mut adj[var.0] {
        Some(existing) => existing.add_assign(&grad),
        slot @ None => *slot = Some(grad),
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
