//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive as a node whose inputs are strictly
//! earlier nodes. [`Tape::backward`] sweeps the nodes in reverse, seeding the
//! loss with one; [`Tape::backward_seeded`] accepts arbitrary seeds, which is
//! how a split-learning client resumes its chain from a received `dL/dz`.

use crate::kernels::{self, ConvGeom};
use crate::metrics::memory::{ActivationGuard, MemoryLedger};
use num_traits::{One, Zero};

use crate::tensor::{same_dtype, with_dtype, Element, Tensor, TensorError};

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Param,
    Input,
    Intermediate,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv { x: Var, k: Var, b: Var, geom: ConvGeom },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    Flatten { x: Var },
    Add { a: Var, b: Var },
    SoftmaxCe { logits: Var, labels: Vec<u16>, probs: Tensor },
    Sum { x: Var },
    WeightedSum { x: Var, weights: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    kind: Kind,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ledger: Option<(MemoryLedger, String)>,
    guards: Vec<ActivationGuard>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose non-parameter node values are registered with `ledger`
    /// under `tag` and released when the tape is dropped.
    pub fn with_ledger(ledger: MemoryLedger, tag: impl Into<String>) -> Self {
        Tape {
            ledger: Some((ledger, tag.into())),
            ..Self::default()
        }
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

    /// Bytes of all non-parameter node values currently held by this tape.
    pub fn activation_bytes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.kind != Kind::Param)
            .map(|n| n.value.byte_len())
            .sum()
    }

    fn push(&mut self, value: Tensor, op: Op, kind: Kind, needs_grad: bool) -> Var {
        if kind != Kind::Param {
            if let Some((ledger, tag)) = &self.ledger {
                self.guards.push(ledger.register(tag, value.byte_len() as u64));
            }
        }
        self.nodes.push(Node {
            value,
            op,
            kind,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<(), TensorError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::Contract(format!("node {} is not on this tape", v.0)))
        }
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, Kind::Intermediate, needs)
    }

    /// Trainable leaf; gradients are always produced for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Kind::Param, true)
    }

    /// Data leaf without gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Kind::Input, false)
    }

    /// Data leaf whose gradient is requested (e.g. the cut activation on the
    /// server side).
    pub fn input_with_grad(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Kind::Input, true)
    }

    /// `x[B×I] · w[I×O] + b[O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        for v in [x, w, b] {
            self.check(v)?;
        }
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let dtype = same_dtype("dense", xv, wv)?;
        same_dtype("dense", xv, bv)?;
        let (xd, wd, bd) = (xv.dims(), wv.dims(), bv.dims());
        if xd.len() != 2 || wd.len() != 2 || bd.len() != 1 || xd[1] != wd[0] || bd[0] != wd[1] {
            return Err(TensorError::shape(
                "dense",
                format!("input {xd:?}, weight {wd:?}, bias {bd:?}"),
            ));
        }
        let (rows, inp, out) = (xd[0], xd[1], wd[1]);
        let value = with_dtype!(dtype, T => Tensor::new(
            vec![rows, out],
            kernels::dense_forward(xv.typed::<T>(), wv.typed::<T>(), bv.typed::<T>(), rows, inp, out),
        )?);
        Ok(self.derived(value, Op::Dense { x, w, b }, &[x, w, b]))
    }

    /// 3×3 convolution with padding 1 over `x[B×C×H×W]` with `k[F×C×3×3]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize) -> Result<Var, TensorError> {
        for v in [x, k, b] {
            self.check(v)?;
        }
        let (xv, kv, bv) = (self.value(x), self.value(k), self.value(b));
        let dtype = same_dtype("conv2d", xv, kv)?;
        same_dtype("conv2d", xv, bv)?;
        let (xd, kd, bd) = (xv.dims(), kv.dims(), bv.dims());
        if !(stride == 1 || stride == 2) {
            return Err(TensorError::Validation(format!("conv2d stride {stride} not in {{1, 2}}")));
        }
        if xd.len() != 4 || kd.len() != 4 || kd[2] != 3 || kd[3] != 3 || bd != [kd[0]] {
            return Err(TensorError::shape(
                "conv2d",
                format!("input {xd:?}, kernel {kd:?}, bias {bd:?}"),
            ));
        }
        if xd[1] != kd[1] {
            return Err(TensorError::shape(
                "conv2d",
                format!("input channels {} (input {xd:?}) vs kernel channels {} (kernel {kd:?})", xd[1], kd[1]),
            ));
        }
        let geom = ConvGeom {
            batch: xd[0],
            in_channels: xd[1],
            height: xd[2],
            width: xd[3],
            filters: kd[0],
            stride,
        };
        let value = with_dtype!(dtype, T => Tensor::new(
            vec![geom.batch, geom.filters, geom.out_height(), geom.out_width()],
            kernels::conv_forward(xv.typed::<T>(), kv.typed::<T>(), bv.typed::<T>(), &geom),
        )?);
        Ok(self.derived(value, Op::Conv { x, k, b, geom }, &[x, k, b]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let xv = self.value(x);
        let value = with_dtype!(xv.dtype(), T => Tensor::new(
            xv.dims().to_vec(),
            xv.typed::<T>().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
        )?);
        Ok(self.derived(value, Op::Relu { x }, &[x]))
    }

    /// 2×2 max pool with stride 2 over the two trailing axes of `x[B×C×H×W]`.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let xv = self.value(x);
        let d = xv.dims();
        if d.len() != 4 || d[2] < 2 || d[3] < 2 {
            return Err(TensorError::shape("maxpool2x2", format!("input {d:?}")));
        }
        let (planes, h, w) = (d[0] * d[1], d[2], d[3]);
        let out_dims = vec![d[0], d[1], h / 2, w / 2];
        let (value, argmax) = with_dtype!(xv.dtype(), T => {
            let (v, a) = kernels::maxpool_forward(xv.typed::<T>(), planes, h, w);
            (Tensor::new(out_dims, v)?, a)
        });
        Ok(self.derived(value, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Row-major reshape to `B × (rest)`.
    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let xv = self.value(x);
        let rows = xv.dims()[0];
        let value = xv.reshape(&[rows, xv.len() / rows])?;
        Ok(self.derived(value, Op::Flatten { x }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let dtype = same_dtype("residual_add", av, bv)?;
        if av.dims() != bv.dims() {
            return Err(TensorError::shape(
                "residual_add",
                format!("{:?} vs {:?}", av.dims(), bv.dims()),
            ));
        }
        let value = with_dtype!(dtype, T => Tensor::new(
            av.dims().to_vec(),
            av.typed::<T>().iter().zip(bv.typed::<T>()).map(|(&p, &q)| p + q).collect(),
        )?);
        Ok(self.derived(value, Op::Add { a, b }, &[a, b]))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u16]) -> Result<Var, TensorError> {
        self.check(logits)?;
        let lv = self.value(logits);
        let d = lv.dims();
        if d.len() != 2 || d[0] != labels.len() {
            return Err(TensorError::shape(
                "softmax_cross_entropy",
                format!("logits {d:?} with {} labels", labels.len()),
            ));
        }
        let classes = d[1];
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(TensorError::Validation(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let (value, probs) = with_dtype!(lv.dtype(), T => {
            let (loss, probs) = kernels::softmax_ce_forward(lv.typed::<T>(), labels, classes);
            (Tensor::new(vec![1], vec![loss])?, Tensor::new(d.to_vec(), probs)?)
        });
        let op = Op::SoftmaxCe {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.derived(value, op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let xv = self.value(x);
        let value = with_dtype!(xv.dtype(), T => Tensor::new(vec![1], vec![xv.typed::<T>().iter().copied().sum::<T>()])?);
        Ok(self.derived(value, Op::Sum { x }, &[x]))
    }

    /// `sum(x ⊙ weights)` with constant weights of the same dims and dtype.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var, TensorError> {
        self.check(x)?;
        let xv = self.value(x);
        let dtype = same_dtype("weighted_sum", xv, weights)?;
        if xv.dims() != weights.dims() {
            return Err(TensorError::shape(
                "weighted_sum",
                format!("{:?} vs {:?}", xv.dims(), weights.dims()),
            ));
        }
        let value = with_dtype!(dtype, T => {
            let s = xv.typed::<T>().iter().zip(weights.typed::<T>()).fold(T::zero(), |acc, (&a, &w)| acc + a * w);
            Tensor::new(vec![1], vec![s])?
        });
        let op = Op::WeightedSum {
            x,
            weights: weights.clone(),
        };
        Ok(self.derived(value, op, &[x]))
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        self.check(loss)?;
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, node {} has dims {:?}",
                loss.0,
                lv.dims()
            )));
        }
        let seed = Tensor::full(lv.dims(), 1.0, lv.dtype())?;
        self.backward_seeded(vec![(loss, seed)])
    }

    /// Reverse sweep starting from explicit seed gradients. Seeds on the same
    /// node are summed in the order given.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients, TensorError> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            self.check(v)?;
            let node = &self.nodes[v.0];
            if g.dims() != node.value.dims() || g.dtype() != node.value.dtype() {
                return Err(TensorError::shape(
                    "backward seed",
                    format!(
                        "seed {:?}<{}> for node {} of {:?}<{}>",
                        g.dims(),
                        g.dtype(),
                        v.0,
                        node.value.dims(),
                        node.value.dtype()
                    ),
                ));
            }
            accumulate(&mut grads[v.0], g);
            top = top.max(v.0 + 1);
        }
        for id in (0..top).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind == Kind::Param)
            .map(|(i, _)| Var(i))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), TensorError> {
        let dtype = g.dtype();
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, inp, out) = (xv.dims()[0], xv.dims()[1], wv.dims()[1]);
                with_dtype!(dtype, T => {
                    let r = kernels::dense_backward(xv.typed::<T>(), wv.typed::<T>(), g.typed::<T>(), rows, inp, out, self.wants(*x));
                    if let Some(gx) = r.x {
                        accumulate(&mut grads[x.0], Tensor::new(xv.dims().to_vec(), gx)?);
                    }
                    if self.wants(*w) {
                        accumulate(&mut grads[w.0], Tensor::new(wv.dims().to_vec(), r.w)?);
                    }
                    if self.wants(*b) {
                        accumulate(&mut grads[b.0], Tensor::new(vec![out], r.b)?);
                    }
                });
            }
            Op::Conv { x, k, b, geom } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                with_dtype!(dtype, T => {
                    let r = kernels::conv_backward(xv.typed::<T>(), kv.typed::<T>(), g.typed::<T>(), geom, self.wants(*x));
                    if let Some(gx) = r.x {
                        accumulate(&mut grads[x.0], Tensor::new(xv.dims().to_vec(), gx)?);
                    }
                    if self.wants(*k) {
                        accumulate(&mut grads[k.0], Tensor::new(kv.dims().to_vec(), r.k)?);
                    }
                    if self.wants(*b) {
                        accumulate(&mut grads[b.0], Tensor::new(vec![geom.filters], r.b)?);
                    }
                });
            }
            Op::Relu { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let gx = with_dtype!(dtype, T => Tensor::new(
                        xv.dims().to_vec(),
                        xv.typed::<T>().iter().zip(g.typed::<T>()).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect(),
                    )?);
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let gx = with_dtype!(dtype, T => {
                        let mut gx = vec![T::zero(); xv.len()];
                        for (&src, &gv) in argmax.iter().zip(g.typed::<T>()) {
                            gx[src] = gx[src] + gv;
                        }
                        Tensor::new(xv.dims().to_vec(), gx)?
                    });
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Flatten { x } => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.reshape(self.value(*x).dims())?);
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                if self.wants(*logits) {
                    let classes = probs.dims()[1];
                    let gx = with_dtype!(dtype, T => {
                        let scale = g.typed::<T>()[0] / T::of(labels.len() as f64);
                        let mut gx = probs.typed::<T>().to_vec();
                        for (n, &label) in labels.iter().enumerate() {
                            let i = n * classes + label as usize;
                            gx[i] = gx[i] - T::one();
                        }
                        for v in gx.iter_mut() {
                            *v = *v * scale;
                        }
                        Tensor::new(probs.dims().to_vec(), gx)?
                    });
                    accumulate(&mut grads[logits.0], gx);
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let gx = with_dtype!(dtype, T => Tensor::new(xv.dims().to_vec(), vec![g.typed::<T>()[0]; xv.len()])?);
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.wants(*x) {
                    let gx = with_dtype!(dtype, T => {
                        let s = g.typed::<T>()[0];
                        Tensor::new(weights.dims().to_vec(), weights.typed::<T>().iter().map(|&w| w * s).collect())?
                    });
                    accumulate(&mut grads[x.0], gx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => with_dtype!(acc.dtype(), T => {
            for (a, &b) in acc.typed_mut::<T>().iter_mut().zip(g.typed::<T>()) {
                *a = *a + b;
            }
        }),
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Parameter leaves in tape order with their gradient, if reachable.
    pub fn params(&self) -> impl Iterator<Item = (Var, Option<&Tensor>)> + '_ {
        self.params.iter().map(move |&v| (v, self.get(v)))
    }

    /// Gradients for `vars` in order; `None` where a parameter was unreachable.
    pub fn collect(&mut self, vars: &[Var]) -> Vec<Option<Tensor>> {
        vars.iter().map(|&v| self.take(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    fn t32(dims: &[usize], v: &[f32]) -> Tensor {
        Tensor::from_f32(dims, v).unwrap()
    }

    #[test]
    fn dense_identity_and_bias() {
        let mut tape = Tape::new();
        let x = tape.input(t32(&[1, 2], &[1., 0.]));
        let w = tape.param(t32(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.param(t32(&[2], &[0., 0.]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).as_slice::<f32>().unwrap(), &[1., 0.]);

        let x = tape.input(t32(&[1, 2], &[1., 2.]));
        let w = tape.param(t32(&[2, 2], &[1., 1., 1., -1.]));
        let b = tape.param(t32(&[2], &[0.5, 0.]));
        let y = tape.dense(x, w, b).unwrap();
        // [1·1 + 2·1 + 0.5, 1·1 + 2·(-1) + 0]
        assert_eq!(tape.value(y).as_slice::<f32>().unwrap(), &[3.5, -1.0]);

        let x = tape.input(t32(&[1, 2], &[0., 0.]));
        let w = tape.param(t32(&[2, 2], &[7., -3., 2., 9.]));
        let b = tape.param(t32(&[2], &[3., 4.]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).as_slice::<f32>().unwrap(), &[3., 4.]);
    }

    #[test]
    fn dense_shape_error_names_operands() {
        let mut tape = Tape::new();
        let x = tape.input(t32(&[1, 3], &[1., 2., 3.]));
        let w = tape.param(t32(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.param(t32(&[2], &[0., 0.]));
        let err = tape.dense(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn conv_zero_input_passes_bias_and_ones_kernel_counts_neighbours() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 2, 4, 4], DType::F32).unwrap());
        let k = tape.param(Tensor::full(&[3, 2, 3, 3], 0.7, DType::F32).unwrap());
        let b = tape.param(t32(&[3], &[1., 2., 3.]));
        let y = tape.conv2d(x, k, b, 1).unwrap();
        let v = tape.value(y).as_slice::<f32>().unwrap();
        for f in 0..3 {
            assert!(v[f * 16..(f + 1) * 16].iter().all(|&o| o == (f + 1) as f32));
        }

        let x = tape.input(Tensor::full(&[1, 1, 3, 3], 1.0, DType::F32).unwrap());
        let k = tape.param(Tensor::full(&[1, 1, 3, 3], 1.0, DType::F32).unwrap());
        let b = tape.param(t32(&[1], &[0.]));
        let y = tape.conv2d(x, k, b, 1).unwrap();
        let v = tape.value(y).as_slice::<f32>().unwrap();
        assert_eq!(v[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(v[corner], 4.0);
        }

        let x = tape.input(Tensor::zeros(&[1, 1, 4, 4], DType::F32).unwrap());
        let k = tape.param(Tensor::zeros(&[1, 1, 3, 3], DType::F32).unwrap());
        let b = tape.param(t32(&[1], &[0.]));
        let y = tape.conv2d(x, k, b, 2).unwrap();
        assert_eq!(tape.value(y).dims(), &[1, 1, 2, 2]);
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 2, 4, 4], DType::F32).unwrap());
        let k = tape.param(Tensor::zeros(&[1, 3, 3, 3], DType::F32).unwrap());
        let b = tape.param(t32(&[1], &[0.]));
        assert!(matches!(tape.conv2d(x, k, b, 1), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn elementwise_ops() {
        let mut tape = Tape::new();
        let x = tape.input(t32(&[3], &[-1., 0., 2.]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).as_slice::<f32>().unwrap(), &[0., 0., 2.]);

        let p = tape.input(t32(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let m = tape.maxpool2x2(p).unwrap();
        assert_eq!(tape.value(m).as_slice::<f32>().unwrap(), &[4.]);

        let a = tape.input(t32(&[2, 2], &[1., -2., 3., 0.5]));
        let z = tape.input(Tensor::zeros(&[2, 2], DType::F32).unwrap());
        let s = tape.add(a, z).unwrap();
        assert!(tape.value(s).bit_eq(tape.value(a)));
        let bad = tape.input(Tensor::zeros(&[4], DType::F32).unwrap());
        assert!(matches!(tape.add(a, bad), Err(TensorError::Shape { .. })));

        let f = tape.flatten(p).unwrap();
        assert_eq!(tape.value(f).dims(), &[1, 4]);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut tape = Tape::new();
        let l = tape.input(Tensor::from_f64(&[1, 2], &[0., 0.]).unwrap());
        let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
        assert!((tape.value(loss).to_f64_vec()[0] - std::f64::consts::LN_2).abs() < 1e-15);

        let l = tape.input(Tensor::full(&[3, 10], 0.3, DType::F64).unwrap());
        let loss = tape.softmax_cross_entropy(l, &[0, 4, 9]).unwrap();
        assert!((tape.value(loss).to_f64_vec()[0] - 10f64.ln()).abs() < 1e-14);

        // -log(e^2 / (e^2 + e^-1 + e^0.5)) = 0.241311296657157060 (30-digit evaluation)
        let l = tape.input(Tensor::from_f64(&[1, 3], &[2., -1., 0.5]).unwrap());
        let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
        assert!((tape.value(loss).to_f64_vec()[0] - 0.241_311_296_657_157_06).abs() < 1e-14);

        assert!(matches!(
            tape.softmax_cross_entropy(l, &[3]),
            Err(TensorError::Validation(_))
        ));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let theta = tape.param(t32(&[2, 3], &[0.5, -1., 2., 3., 0., 1.]));
        let loss = tape.sum(theta).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(theta).unwrap().as_slice::<f32>().unwrap(), &[1.; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let theta = tape.param(t32(&[2], &[1., 2.]));
        let r = tape.relu(theta).unwrap();
        assert!(matches!(tape.backward(r), Err(TensorError::Contract(_))));
    }

    #[test]
    fn gradient_dims_match_values() {
        let mut tape = Tape::new();
        let x = tape.input_with_grad(Tensor::full(&[2, 1, 4, 4], 0.5, DType::F32).unwrap());
        let k = tape.param(Tensor::full(&[2, 1, 3, 3], 0.1, DType::F32).unwrap());
        let b = tape.param(t32(&[2], &[0., 0.1]));
        let c = tape.conv2d(x, k, b, 2).unwrap();
        let f = tape.flatten(c).unwrap();
        let loss = tape.softmax_cross_entropy(f, &[1, 7]).unwrap();
        let g = tape.backward(loss).unwrap();
        for v in [x, k, b, c, f] {
            assert_eq!(g.get(v).unwrap().dims(), tape.value(v).dims());
        }
    }

    #[test]
    fn ledger_sees_activations_until_drop() {
        let ledger = MemoryLedger::new();
        {
            let mut tape = Tape::with_ledger(ledger.clone(), "client");
            let x = tape.input(Tensor::zeros(&[2, 3], DType::F32).unwrap());
            let _w = tape.param(Tensor::zeros(&[3, 3], DType::F32).unwrap());
            let _r = tape.relu(x).unwrap();
            assert_eq!(ledger.live(), 48);
            assert_eq!(tape.activation_bytes(), 48);
        }
        assert_eq!(ledger.live(), 0);
        assert_eq!(ledger.peak(), 48);
    }
}
