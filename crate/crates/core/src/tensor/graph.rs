//! Recording tape for reverse-mode differentiation.
//!
//! Each forward operation appends a node holding its output value and the
//! bookkeeping its backward rule needs. [`Tape::backward`] walks the nodes
//! in reverse and returns the gradient of a scalar with respect to every
//! node, plus one accumulated gradient per parameter.

use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::Rng;

use super::ops::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Whether stochastic layers (dropout) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Log-probability floor used by cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

enum Op<F> {
    Input,
    Param,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Relu(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Dropout {
        input: Var,
        mask: Option<Vec<F>>,
    },
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        target: usize,
    },
    SumSquares(Vec<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sum(Var),
    /// Scalar computed outside the tape with a known local gradient.
    Linearized {
        input: Var,
        grad: Vec<F>,
    },
}

struct Node<'s, F: Real> {
    value: Cow<'s, Tensor<F>>,
    op: Op<F>,
}

pub struct Tape<'s, F: Real> {
    nodes: Vec<Node<'s, F>>,
    params: BTreeMap<ParamId, Var>,
}

impl<F: Real> Default for Tape<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, F: Real> Tape<'s, F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn checked(&mut self, value: Tensor<F>, op: Op<F>, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        Ok(self.push(value, op))
    }

    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf node borrowing a parameter; repeated requests share one node.
    pub fn param(&mut self, store: &'s ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        let geom = ConvGeom::new(x.shape(), k.shape(), stride, padding)?;
        if b.len() != geom.filters {
            return Err(Error::Dimension(format!(
                "conv2d bias has {} entries for {} filters",
                b.len(),
                geom.filters
            )));
        }
        let out = ops::conv2d_forward(x.data(), k.data(), b.data(), &geom);
        let out = Tensor::new(geom.out_shape(), out)?;
        self.checked(out, Op::Conv2d { input, kernel, bias, geom }, "conv2d")
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weights), self.value(bias));
        let n = x.len();
        let (m, cols) = match *w.shape() {
            [m, cols] => (m, cols),
            _ => {
                return Err(Error::Dimension(format!(
                    "dense weights must be M x N, got {:?}",
                    w.shape()
                )))
            }
        };
        if cols != n || b.len() != m {
            return Err(Error::Dimension(format!(
                "dense weights {m}x{cols} and bias {} do not fit input of length {n}",
                b.len()
            )));
        }
        let out = Tensor::from_vec(ops::dense_forward(x.data(), w.data(), b.data()));
        self.checked(out, Op::Dense { input, weights, bias }, "dense")
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = Tensor::new(x.shape().to_vec(), ops::relu_forward(x.data()))
            .expect("relu preserves shape");
        self.push(out, Op::Relu(input))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (out, argmax) = ops::maxpool2_forward(x.data(), x.shape())?;
        let s = x.shape();
        let out = Tensor::new(vec![s[0] / 2, s[1] / 2, s[2]], out)?;
        Ok(self.push(out, Op::MaxPool2 { input, argmax }))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let &[_, _, c] = x.shape() else {
            return Err(Error::Dimension(format!(
                "global_avg_pool input must be H x W x C, got {:?}",
                x.shape()
            )));
        };
        let out = Tensor::from_vec(ops::global_avg_pool_forward(x.data(), c));
        Ok(self.push(out, Op::GlobalAvgPool(input)))
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `ratio` and survivors are scaled by `1 / (1 - ratio)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, ratio: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Config(format!("dropout ratio {ratio} outside [0, 1)")));
        }
        let x = self.value(input);
        if mode == Mode::Eval || ratio == 0.0 {
            let out = x.clone();
            return Ok(self.push(out, Op::Dropout { input, mask: None }));
        }
        let keep = F::lit(1.0 / (1.0 - ratio));
        let mask: Vec<F> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < ratio { F::zero() } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { input, mask: Some(mask) }))
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let x = self.value(logits);
        let out = Tensor::new(x.shape().to_vec(), ops::softmax_forward(x.data())?)?;
        Ok(self.push(out, Op::Softmax(logits)))
    }

    /// `-ln(max(probs[target], 1e-12))`.
    pub fn cross_entropy(&mut self, probs: Var, target: usize) -> Result<Var> {
        let p = self.value(probs);
        if target >= p.len() {
            return Err(Error::Input(format!(
                "class index {target} out of range for {} classes",
                p.len()
            )));
        }
        let loss = -p.data()[target].max(F::lit(PROB_FLOOR)).ln();
        self.checked(Tensor::scalar(loss), Op::CrossEntropy { probs, target }, "cross_entropy")
    }

    /// `sum over vars of ||v||^2`.
    pub fn sum_squares(&mut self, vars: &[Var]) -> Var {
        let total = vars
            .iter()
            .flat_map(|&v| self.value(v).data().iter())
            .fold(F::zero(), |acc, &x| acc + x * x);
        self.push(Tensor::scalar(total), Op::SumSquares(vars.to_vec()))
    }

    /// Cross-entropy plus `l2 * sum ||W||^2` over the given weight nodes.
    pub fn cross_entropy_with_l2(&mut self, probs: Var, target: usize, weights: &[Var], l2: f64) -> Result<Var> {
        if l2 < 0.0 {
            return Err(Error::Config(format!("l2 coefficient {l2} must be >= 0")));
        }
        let ce = self.cross_entropy(probs, target)?;
        if l2 == 0.0 || weights.is_empty() {
            return Ok(ce);
        }
        let sq = self.sum_squares(weights);
        let penalty = self.scale(sq, F::lit(l2));
        self.add(ce, penalty)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "add of {:?} and {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.checked(out, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "mul of {:?} and {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.checked(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("scale preserves shape");
        self.push(out, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    /// Records a scalar whose gradient with respect to `input` was computed
    /// by the caller.
    pub fn linearized(&mut self, input: Var, value: F, grad: Vec<F>) -> Result<Var> {
        if grad.len() != self.value(input).len() {
            return Err(Error::Dimension(format!(
                "local gradient has {} entries, input has {}",
                grad.len(),
                self.value(input).len()
            )));
        }
        self.checked(Tensor::scalar(value), Op::Linearized { input, grad }, "loss")
    }

    /// Gradient of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called without a recorded forward pass".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        fn acc<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, g: Vec<F>) {
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param => {}
                Op::Conv2d { input, kernel, bias, geom } => {
                    let (dx, dk, db) = ops::conv2d_backward(
                        self.value(*input).data(),
                        self.value(*kernel).data(),
                        geom,
                        &g,
                    );
                    acc(&mut grads, *input, dx);
                    acc(&mut grads, *kernel, dk);
                    acc(&mut grads, *bias, db);
                }
                Op::Dense { input, weights, bias } => {
                    let (dx, dw, db) =
                        ops::dense_backward(self.value(*input).data(), self.value(*weights).data(), &g);
                    acc(&mut grads, *input, dx);
                    acc(&mut grads, *weights, dw);
                    acc(&mut grads, *bias, db);
                }
                Op::Relu(input) => {
                    let d = ops::relu_backward(self.value(*input).data(), &g);
                    acc(&mut grads, *input, d);
                }
                Op::MaxPool2 { input, argmax } => {
                    let d = ops::maxpool2_backward(self.value(*input).len(), argmax, &g);
                    acc(&mut grads, *input, d);
                }
                Op::GlobalAvgPool(input) => {
                    let d = ops::global_avg_pool_backward(self.value(*input).len(), &g);
                    acc(&mut grads, *input, d);
                }
                Op::Dropout { input, mask } => {
                    let d = match mask {
                        Some(m) => g.iter().zip(m).map(|(&a, &b)| a * b).collect(),
                        None => g.clone(),
                    };
                    acc(&mut grads, *input, d);
                }
                Op::Softmax(input) => {
                    let d = ops::softmax_backward(node.value.data(), &g);
                    acc(&mut grads, *input, d);
                }
                Op::CrossEntropy { probs, target } => {
                    let p = self.value(*probs).data();
                    let mut d = vec![F::zero(); p.len()];
                    if p[*target] > F::lit(PROB_FLOOR) {
                        d[*target] = -g[0] / p[*target];
                    }
                    acc(&mut grads, *probs, d);
                }
                Op::SumSquares(vars) => {
                    for &v in vars {
                        let two = F::lit(2.0) * g[0];
                        let d = self.value(v).data().iter().map(|&x| two * x).collect();
                        acc(&mut grads, v, d);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a).data(), self.value(*b).data());
                    let da = g.iter().zip(y).map(|(&d, &q)| d * q).collect();
                    let db = g.iter().zip(x).map(|(&d, &p)| d * p).collect();
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, factor) => {
                    let d = g.iter().map(|&v| v * *factor).collect();
                    acc(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let d = vec![g[0]; self.value(*a).len()];
                    acc(&mut grads, *a, d);
                }
                Op::Linearized { input, grad } => {
                    let d = grad.iter().map(|&v| v * g[0]).collect();
                    acc(&mut grads, *input, d);
                }
            }
            grads[i] = Some(g);
        }

        let params = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].clone().map(|g| (id, g)))
            .collect();
        Ok(Gradients { nodes: grads, params })
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    nodes: Vec<Option<Vec<F>>>,
    params: Vec<(ParamId, Vec<F>)>,
}

impl<F: Real> Gradients<F> {
    /// Gradient with respect to a node, or `None` if it does not reach the loss.
    pub fn wrt(&self, var: Var) -> Option<&[F]> {
        self.nodes.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[F]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    /// Drops node gradients and keeps only the parameter ones.
    pub fn into_params(self) -> Vec<(ParamId, Vec<F>)> {
        self.params
    }

    /// Parameter gradients in parameter order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }
}
