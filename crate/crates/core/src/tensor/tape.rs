//! Operation tape for reverse-mode differentiation.
//!
//! Each recorded node owns its forward value. `backward` walks the nodes in
//! exact reverse recording order, so a node's gradient is complete before it
//! is propagated to its inputs.

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use super::ops::{self, BetaConvention};
use super::{ParamId, ParamStore, Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// The differentiable primitives, used to target fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Conv2d,
    TransposedConv2d,
    MaxPool2,
    Relu,
    Concat,
    Add,
    Mul,
    Scale,
    Sum,
    SoftmaxPair,
    BalancedBce,
    WeightedSum,
}

impl Primitive {
    pub const ALL: [Primitive; 12] = [
        Primitive::Conv2d,
        Primitive::TransposedConv2d,
        Primitive::MaxPool2,
        Primitive::Relu,
        Primitive::Concat,
        Primitive::Add,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::Sum,
        Primitive::SoftmaxPair,
        Primitive::BalancedBce,
        Primitive::WeightedSum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Conv2d => "conv2d",
            Primitive::TransposedConv2d => "transposed_conv2d",
            Primitive::MaxPool2 => "maxpool2",
            Primitive::Relu => "relu",
            Primitive::Concat => "concat_channels",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Sum => "sum",
            Primitive::SoftmaxPair => "softmax_pair",
            Primitive::BalancedBce => "balanced_bce_loss",
            Primitive::WeightedSum => "weighted_sum",
        }
    }

    pub fn parse(name: &str) -> Option<Primitive> {
        Primitive::ALL.into_iter().find(|p| p.name() == name)
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    TransposedConv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Relu {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    SoftmaxPair {
        input: Var,
    },
    BalancedBce {
        probs: Var,
        gt: Tensor<T>,
        weights: Vec<(f64, f64)>,
        eps: f64,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
}

impl<T> Op<T> {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf | Op::Param(_) => return None,
            Op::Conv2d { .. } => Primitive::Conv2d,
            Op::TransposedConv2d { .. } => Primitive::TransposedConv2d,
            Op::MaxPool2 { .. } => Primitive::MaxPool2,
            Op::Relu { .. } => Primitive::Relu,
            Op::Concat { .. } => Primitive::Concat,
            Op::Add { .. } => Primitive::Add,
            Op::Mul { .. } => Primitive::Mul,
            Op::Scale { .. } => Primitive::Scale,
            Op::Sum { .. } => Primitive::Sum,
            Op::SoftmaxPair { .. } => Primitive::SoftmaxPair,
            Op::BalancedBce { .. } => Primitive::BalancedBce,
            Op::WeightedSum { .. } => Primitive::WeightedSum,
        })
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records primitive applications for one forward pass.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
    finished: bool,
    fault: Option<Primitive>,
    log_eps: f64,
    beta: BetaConvention,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub const DEFAULT_LOG_EPS: f64 = 1e-12;

    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            finished: false,
            fault: None,
            log_eps: Self::DEFAULT_LOG_EPS,
            beta: BetaConvention::default(),
        }
    }

    /// Lower clamp applied to probabilities inside the log of the loss.
    pub fn with_log_eps(mut self, eps: f64) -> Self {
        self.log_eps = eps;
        self
    }

    pub fn with_beta_convention(mut self, beta: BetaConvention) -> Self {
        self.beta = beta;
        self
    }

    /// Test hook: makes the backward pass of `primitive` wrong by a factor of
    /// 1.5 (weight gradients for convolutions, input gradients otherwise).
    pub fn inject_fault(&mut self, primitive: Primitive) {
        self.fault = Some(primitive);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `[1,1,1,1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0].to_f64().unwrap_or(f64::NAN)
    }

    /// A value that takes no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is kept and readable through [`Tape::grad`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Places a parameter's current value on the tape. Repeated calls for the
    /// same id return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.learnable);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            needs,
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = ops::conv_transpose2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::TransposedConv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            needs,
        ))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, needs))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let needs = self.needs(input);
        self.push(out, Op::Relu { input }, needs)
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&values)?;
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).map(|v| v * factor);
        let needs = self.needs(input);
        self.push(out, Op::Scale { input, factor }, needs)
    }

    /// Sum of all elements as a scalar node.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).sum_f64();
        let needs = self.needs(input);
        self.push(
            Tensor::scalar(T::from_f64_lossy(total)),
            Op::Sum { input },
            needs,
        )
    }

    pub fn softmax_pair(&mut self, input: Var) -> Result<Var> {
        let out = ops::softmax_pair(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(out, Op::SoftmaxPair { input }, needs))
    }

    /// Class-balanced cross entropy of two-channel probabilities against a
    /// binary mask, with per-image class weights.
    pub fn balanced_bce_loss(&mut self, probs: Var, gt: &Tensor<T>) -> Result<Var> {
        ops::check_loss_shapes(self.value(probs), gt)?;
        let weights = ops::balance_weights(gt, self.beta)?;
        let value = ops::balanced_bce_value(self.value(probs), gt, &weights, self.log_eps);
        let needs = self.needs(probs);
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(value)),
            Op::BalancedBce {
                probs,
                gt: gt.clone(),
                weights,
                eps: self.log_eps,
            },
            needs,
        ))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = 0.0f64;
        for &(v, w) in terms {
            let s = self.shape(v);
            if s != Shape::scalar() {
                return Err(Error::NonScalarLoss(s.dims()));
            }
            total += self.scalar(v) * w.to_f64().unwrap_or(f64::NAN);
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(total)),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            needs,
        ))
    }

    /// Gradient of a leaf created with [`Tape::input`] or [`Tape::param`],
    /// available after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Fingerprint of every relu sign pattern and pooling winner on the tape.
    /// Two forward passes with equal fingerprints share the same piecewise-
    /// linear region.
    pub fn activation_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { .. } => {
                    for v in node.value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Propagates `d loss / d node` back through the tape and adds the
    /// parameter gradients into `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.finished {
            return Err(Error::BackwardTwice);
        }
        let s = self.shape(loss);
        if s != Shape::scalar() {
            return Err(Error::NonScalarLoss(s.dims()));
        }
        self.finished = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let fault = self.fault;
        let factor = T::from_f64_lossy(1.5);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let faulty = fault.is_some() && node.op.primitive() == fault;
            let corrupt = |t: Tensor<T>| if faulty { t.map(|v| v * factor) } else { t };

            match &node.op {
                Op::Leaf | Op::Param(_) => unreachable!(),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                }
                | Op::TransposedConv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let x = &self.nodes[input.0].value;
                    let w = &self.nodes[weight.0].value;
                    let need_dx = self.nodes[input.0].needs_grad;
                    let cg = if matches!(node.op, Op::Conv2d { .. }) {
                        ops::conv2d_backward(x, w, &g, *stride, *pad, need_dx)
                    } else {
                        ops::conv_transpose2d_backward(x, w, &g, *stride, *pad, need_dx)
                    };
                    if let Some(dx) = cg.dx {
                        accumulate(&self.nodes, &mut grads, *input, dx);
                    }
                    accumulate(&self.nodes, &mut grads, *weight, corrupt(cg.dw));
                    if let Some(b) = bias {
                        accumulate(&self.nodes, &mut grads, *b, cg.db);
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let dx = ops::maxpool2_backward(self.nodes[input.0].value.shape(), argmax, &g);
                    accumulate(&self.nodes, &mut grads, *input, corrupt(dx));
                }
                Op::Relu { input } => {
                    let dx = ops::relu_backward(&self.nodes[input.0].value, &g);
                    accumulate(&self.nodes, &mut grads, *input, corrupt(dx));
                }
                Op::Concat { inputs } => {
                    let parts: Vec<Shape> = inputs
                        .iter()
                        .map(|v| self.nodes[v.0].value.shape())
                        .collect();
                    for (v, dx) in inputs.iter().zip(ops::split_channels(&g, &parts)) {
                        accumulate(&self.nodes, &mut grads, *v, corrupt(dx));
                    }
                }
                Op::Add { a, b } => {
                    accumulate(&self.nodes, &mut grads, *a, corrupt(g.clone()));
                    accumulate(&self.nodes, &mut grads, *b, corrupt(g));
                }
                Op::Mul { a, b } => {
                    let da = ops::mul(&g, &self.nodes[b.0].value).expect("recorded shape");
                    let db = ops::mul(&g, &self.nodes[a.0].value).expect("recorded shape");
                    accumulate(&self.nodes, &mut grads, *a, corrupt(da));
                    accumulate(&self.nodes, &mut grads, *b, corrupt(db));
                }
                Op::Scale { input, factor } => {
                    let f = *factor;
                    accumulate(&self.nodes, &mut grads, *input, corrupt(g.map(|v| v * f)));
                }
                Op::Sum { input } => {
                    let shape = self.nodes[input.0].value.shape();
                    accumulate(
                        &self.nodes,
                        &mut grads,
                        *input,
                        corrupt(Tensor::full(shape, g.data()[0])),
                    );
                }
                Op::SoftmaxPair { input } => {
                    let dz = ops::softmax_pair_backward(&node.value, &g);
                    accumulate(&self.nodes, &mut grads, *input, corrupt(dz));
                }
                Op::BalancedBce {
                    probs,
                    gt,
                    weights,
                    eps,
                } => {
                    let upstream = g.data()[0].to_f64().unwrap_or(f64::NAN);
                    let source = &self.nodes[probs.0];
                    if let Op::SoftmaxPair { input } = source.op {
                        // Straight to the logits: stays alive where the probabilities saturate.
                        let dz = ops::softmax_bce_backward(&source.value, gt, weights, upstream);
                        accumulate(&self.nodes, &mut grads, input, corrupt(dz));
                    } else {
                        let dp =
                            ops::balanced_bce_backward(&source.value, gt, weights, *eps, upstream);
                        accumulate(&self.nodes, &mut grads, *probs, corrupt(dp));
                    }
                }
                Op::WeightedSum { terms } => {
                    for &(v, w) in terms {
                        accumulate(
                            &self.nodes,
                            &mut grads,
                            v,
                            corrupt(Tensor::scalar(g.data()[0] * w)),
                        );
                    }
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                let p = store.get_mut(*id);
                if p.learnable {
                    for (dst, &src) in p.grad.data_mut().iter_mut().zip(g.data()) {
                        *dst = *dst + src;
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (dst, &src) in existing.data_mut().iter_mut().zip(g.data()) {
                *dst = *dst + src;
            }
        }
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    #[test]
    fn backward_twice_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::full([1, 1, 2, 2], 1.0));
        let loss = tape.sum(x);
        tape.backward(loss, &mut store).unwrap();
        assert!(matches!(
            tape.backward(loss, &mut store),
            Err(Error::BackwardTwice)
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut store = ParamStore::<f64>::new();
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::full([1, 1, 2, 2], 1.0));
        assert!(matches!(
            tape.backward(x, &mut store),
            Err(Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn sum_of_relu_on_positive_input_gives_ones() {
        let mut store = ParamStore::<f64>::new();
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_f64([1, 1, 1, 3], &[0.5, 1.0, 2.0]).unwrap());
        let r = tape.relu(x);
        let loss = tape.sum(r);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    fn logit_grad(z: &[f64], gt: &[f64]) -> Vec<f64> {
        let mut store = ParamStore::<f64>::new();
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_f64([1, 2, 1, gt.len()], z).unwrap());
        let p = tape.softmax_pair(x).unwrap();
        let loss = tape
            .balanced_bce_loss(p, &Tensor::from_f64([1, 1, 1, gt.len()], gt).unwrap())
            .unwrap();
        tape.backward(loss, &mut store).unwrap();
        tape.grad(x).unwrap().data().to_vec()
    }

    #[test]
    fn loss_through_softmax_matches_chained_backward() {
        let (z, gt) = ([0.3, -1.2, 0.7, 2.0], [1.0, 0.0]);
        let mut store = ParamStore::<f64>::new();
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_f64([1, 2, 1, 2], &z).unwrap());
        let e = tape.softmax_pair(x).unwrap();
        // A detached copy of the probabilities goes through the generic path.
        let p = tape.input(tape.value(e).clone());
        let loss = tape
            .balanced_bce_loss(p, &Tensor::from_f64([1, 1, 1, 2], &gt).unwrap())
            .unwrap();
        tape.backward(loss, &mut store).unwrap();
        let dp = tape.grad(p).unwrap().clone();
        let chained = ops::softmax_pair_backward(tape.value(e), &dp);
        for (a, b) in logit_grad(&z, &gt).iter().zip(chained.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn saturated_wrong_prediction_still_has_gradient() {
        let g = logit_grad(&[0.0, 900.0], &[0.0]);
        assert!(g[0] < 0.0 && g[1] > 0.0, "{g:?}");
    }

    #[test]
    fn parameter_used_twice_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", [1, 1, 1, 1], Init::Zero);
        store.get_mut(id).value.data_mut()[0] = 3.0;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1, 1, 2, 2], 2.0));
        let w = tape.param(&store, id);
        let a = tape.conv2d(x, w, None, 1, 0).unwrap();
        let w_again = tape.param(&store, id);
        assert_eq!(w, w_again);
        let b = tape.conv2d(x, w_again, None, 1, 0).unwrap();
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss, &mut store).unwrap();
        // d/dw of 2 * Σ(2w) over 4 pixels = 16
        assert_eq!(store.get(id).grad.data(), &[16.0]);
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", [1, 1, 1, 1], Init::Zero);
        store.get_mut(id).learnable = false;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1, 1, 1, 1], 2.0));
        let w = tape.param(&store, id);
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[0.0]);
    }

    #[test]
    fn primitive_names_round_trip() {
        for p in Primitive::ALL {
            assert_eq!(Primitive::parse(p.name()), Some(p));
        }
    }
}
