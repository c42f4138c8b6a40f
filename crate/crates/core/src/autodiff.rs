//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its variables in execution
//! order. Because the tape is append-only, node indices are already a
//! topological order, and [`Graph::backward`] walks it once in reverse,
//! accumulating gradients where a value fans out to several consumers.
//!
//! ```
//! use mgdun::autodiff::Graph;
//! use mgdun::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::from_vec([1, 1, 1, 2], vec![3.0, -2.0]).unwrap());
//! let loss = g.mean_abs(x);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[0.5, -0.5]);
//! ```

use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec};
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, spec: ConvSpec },
    Relu(Var),
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2(Var),
    Unshuffle2(Var),
    Shuffle2(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f32),
    ScaleBy { x: Var, s: Var },
    Hadamard(Var, Var),
    Exp(Var),
    Neg(Var),
    Clamp { x: Var, lo: f32, hi: f32 },
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    Pad(Var),
    Crop(Var),
    MeanAbs(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for leaf `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(w), self.value(b), spec)?;
        Ok(self.push(Op::Conv2d { x, w, b, spec }, out))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(Op::Relu(x), out)
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2(self.value(x))?;
        Ok(self.push(Op::MaxPool2 { x, argmax }, out))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let out = ops::upsample_nearest2(self.value(x));
        self.push(Op::Upsample2(x), out)
    }

    pub fn pixel_unshuffle2(&mut self, x: Var) -> Result<Var> {
        let out = ops::pixel_unshuffle2(self.value(x))?;
        Ok(self.push(Op::Unshuffle2(x), out))
    }

    pub fn pixel_shuffle2(&mut self, x: Var) -> Result<Var> {
        let out = ops::pixel_shuffle2(self.value(x))?;
        Ok(self.push(Op::Shuffle2(x), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = self.value(x).scale(s);
        self.push(Op::Scale(x, s), out)
    }

    /// Multiplication by a recorded one-element value, e.g. a learnable scalar.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let k = self.value(s).item()?;
        let out = self.value(x).scale(k);
        Ok(self.push(Op::ScaleBy { x, s }, out))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Hadamard(a, b), out))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).exp();
        self.push(Op::Exp(x), out)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let out = self.value(x).neg();
        self.push(Op::Neg(x), out)
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let out = self.value(x).clamp(lo, hi);
        self.push(Op::Clamp { x, lo, hi }, out)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(Op::Concat(a, b), out))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_channels(self.value(x), start, len)?;
        Ok(self.push(Op::Slice { x, start }, out))
    }

    pub fn pad_to(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let out = ops::pad_to(self.value(x), h, w)?;
        Ok(self.push(Op::Pad(x), out))
    }

    pub fn crop_to(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let out = ops::crop_to(self.value(x), h, w)?;
        Ok(self.push(Op::Crop(x), out))
    }

    pub fn mean_abs(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean_abs());
        self.push(Op::MeanAbs(x), out)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(Op::Mean(x), out)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.len() != 1 {
            return Err(Error::NonScalarLoss(ls));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ls, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            // Intermediate gradients are released once propagated; only leaves keep theirs.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let mut send = |v: Var, t: Tensor| -> Result<()> {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves handled above"),
                Op::Conv2d { x, w, b, spec } => {
                    let (dx, dw, db) = ops::conv2d_backward(&g, self.value(*x), self.value(*w), *spec)?;
                    send(*x, dx)?;
                    send(*w, dw)?;
                    send(*b, db.reshape(self.shape(*b))?)?;
                }
                Op::Relu(x) => send(*x, ops::relu_backward(&g, self.value(*x))?)?,
                Op::MaxPool2 { x, argmax } => send(*x, ops::maxpool2_backward(&g, argmax, self.shape(*x))?)?,
                Op::Upsample2(x) => send(*x, ops::upsample_nearest2_backward(&g)?)?,
                Op::Unshuffle2(x) => send(*x, ops::pixel_shuffle2(&g)?)?,
                Op::Shuffle2(x) => send(*x, ops::pixel_unshuffle2(&g)?)?,
                Op::Add(a, b) => {
                    send(*a, g.clone())?;
                    send(*b, g)?;
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone())?;
                    send(*b, g.neg())?;
                }
                Op::Scale(x, s) => send(*x, g.scale(*s))?,
                Op::ScaleBy { x, s } => {
                    let k = self.value(*s).item()?;
                    let ds = g.dot(self.value(*x))? as f32;
                    send(*x, g.scale(k))?;
                    send(*s, Tensor::full(self.shape(*s), ds))?;
                }
                Op::Hadamard(a, b) => {
                    send(*a, g.hadamard(self.value(*b))?)?;
                    send(*b, g.hadamard(self.value(*a))?)?;
                }
                Op::Exp(x) => send(*x, g.hadamard(&node.value)?)?,
                Op::Neg(x) => send(*x, g.neg())?,
                Op::Clamp { x, lo, hi } => {
                    let d = g.zip_map(self.value(*x), "clamp_backward", |g, v| {
                        if v >= *lo && v <= *hi {
                            g
                        } else {
                            0.0
                        }
                    })?;
                    send(*x, d)?;
                }
                Op::Concat(a, b) => {
                    let ca = self.shape(*a).c;
                    let cb = self.shape(*b).c;
                    send(*a, ops::slice_channels(&g, 0, ca)?)?;
                    send(*b, ops::slice_channels(&g, ca, cb)?)?;
                }
                Op::Slice { x, start } => send(*x, ops::slice_channels_backward(&g, self.shape(*x), *start)?)?,
                Op::Pad(x) => {
                    let s = self.shape(*x);
                    send(*x, ops::crop_to(&g, s.h, s.w)?)?;
                }
                Op::Crop(x) => {
                    let s = self.shape(*x);
                    send(*x, ops::pad_to(&g, s.h, s.w)?)?;
                }
                Op::MeanAbs(x) => {
                    let k = g.item()? / self.value(*x).len() as f32;
                    let d = self.value(*x).map(|v| {
                        if v > 0.0 {
                            k
                        } else if v < 0.0 {
                            -k
                        } else {
                            0.0
                        }
                    });
                    send(*x, d)?;
                }
                Op::Mean(x) => {
                    let k = g.item()? / self.value(*x).len() as f32;
                    send(*x, Tensor::full(self.shape(*x), k))?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mean_abs_subgradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec([1, 1, 1, 2], vec![3.0, -2.0]).unwrap());
        let l = g.mean_abs(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.5, -0.5]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros([1, 1, 2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = mean(x + x * x) => d/dx = (1 + 2x) / n
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec([1, 1, 1, 2], vec![1.0, -3.0]).unwrap());
        let sq = g.hadamard(x, x).unwrap();
        let s = g.add(x, sq).unwrap();
        let l = g.mean(s);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.5, -2.5]);
    }

    #[test]
    fn unreachable_values_have_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0));
        let y = g.leaf(Tensor::scalar(2.0));
        let l = g.mean(x);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn scale_by_gradients() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let xv = Tensor::randn([1, 1, 2, 2], 1.0, &mut r);
        let mut g = Graph::new();
        let x = g.leaf(xv.clone());
        let s = g.leaf(Tensor::scalar(3.0));
        let y = g.scale_by(x, s).unwrap();
        let l = g.mean(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::full([1, 1, 2, 2], 0.75));
        assert!((grads.get(s).unwrap().item().unwrap() - xv.mean()).abs() < 1e-6);
    }
}
