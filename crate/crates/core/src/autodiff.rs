//! A small reverse-mode tape over the fixed kernel set of the network.
//!
//! Every node stores its forward value; differentiable nodes carry a
//! [`Backward`] implementation producing vector-Jacobian products for their
//! inputs. Named leaves are parameters and receive entries in the gradient
//! map. Constants (images, masks, trajectory positions) never receive
//! gradients, which is how stop-gradient is expressed.

use std::collections::BTreeMap;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::{self, PaddingMode, RunningStats};
use crate::tensor::{Point2D, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Vector-Jacobian product of one node.
pub trait Backward<T: Scalar> {
    /// Gradients for each input given the gradient of the output. Entries for
    /// inputs with `needs[i] == false` may be `None`.
    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
    param: Option<String>,
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter on `tape`; parameters the loss does not
    /// depend on get an explicit zero entry.
    pub fn params(&self, tape: &Tape<T>) -> BTreeMap<String, Tensor<T>> {
        tape.params
            .iter()
            .map(|(name, &v)| {
                let g = self.grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// A forward value together with parameter gradients.
#[derive(Clone, Debug)]
pub struct GradientPair<T: Scalar = f32> {
    pub value: Tensor<T>,
    pub grads: BTreeMap<String, Tensor<T>>,
}

/// Runs `f` on named inputs and back-propagates `upstream` through it.
pub fn gradient_of<T: Scalar>(
    inputs: &[(&str, Tensor<T>)],
    upstream: &Tensor<T>,
    f: impl FnOnce(&mut Tape<T>, &[Var]) -> Result<Var>,
) -> Result<GradientPair<T>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(name, t)| tape.param(name, t))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).expect_shape(upstream.shape())?;
    let grads = tape.backward_with(out, upstream.clone());
    Ok(GradientPair {
        value: tape.value(out).clone(),
        grads: grads.params(&tape),
    })
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named trainable leaf. Repeated calls with the same name return the
    /// same node so gradients accumulate over every use.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.nodes.push(Node {
            value: value.clone(),
            inputs: Vec::new(),
            op: None,
            requires_grad: true,
            param: Some(name.to_string()),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_name(&self, v: Var) -> Option<&str> {
        self.nodes[v.0].param.as_deref()
    }

    /// Value copy with no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Records a node computed outside the tape. `value` must already be the
    /// forward result of `op` applied to `inputs`.
    pub fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: impl Backward<T> + 'static) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            op: requires_grad.then(|| Box::new(op) as Box<dyn Backward<T>>),
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn backward(&self, root: Var) -> Gradients<T> {
        let seed = Tensor::full(self.value(root).shape(), T::one());
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = op.backward(&g, &inputs, &node.value, &needs);
            for ((v, need), ig) in node.inputs.iter().zip(needs).zip(input_grads) {
                if !need {
                    continue;
                }
                let Some(ig) = ig else { continue };
                debug_assert_eq!(ig.shape(), self.nodes[v.0].value.shape());
                match grads[v.0].as_mut() {
                    Some(acc) => acc.add_assign(&ig),
                    None => grads[v.0] = Some(ig),
                }
            }
        }
        Gradients { grads }
    }

    // -------------------------------------------------------------------
    // elementwise and structural ops

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, &[a, b], AddOp))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, &[a, b], SubOp))
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, &[a], ScaleOp(s))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        let value = self.value(a).zip_map(&c, |x, y| x * y)?;
        Ok(self.push(value, &[a], MulConstOp(c)))
    }

    /// `a · s` for a one-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of(s)?;
        let value = self.value(a).map(|x| x * sv);
        Ok(self.push(value, &[a, s], MulScalarOp))
    }

    /// `a + s` for a one-element tensor `s`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of(s)?;
        let value = self.value(a).map(|x| x + sv);
        Ok(self.push(value, &[a, s], AddScalarOp))
    }

    fn scalar_of(&self, s: Var) -> Result<T> {
        let t = self.value(s);
        if t.len() != 1 {
            return Err(Error::shape(format!("expected a scalar, got {:?}", t.shape())));
        }
        Ok(t.item())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = ops::relu(self.value(a));
        self.push(value, &[a], UnaryOp::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = ops::gelu(self.value(a));
        self.push(value, &[a], UnaryOp::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = ops::sigmoid(self.value(a));
        self.push(value, &[a], UnaryOp::Sigmoid)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, &[a], SumOp)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, &[a], ReshapeOp))
    }

    /// Slice `i` along the leading axis.
    pub fn select(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if i >= t.shape()[0] {
            return Err(Error::shape(format!("select index {i} out of range for {:?}", t.shape())));
        }
        let value = t.select(i);
        Ok(self.push(value, &[a], SelectOp(i)))
    }

    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let parts: Vec<Tensor<T>> = items.iter().map(|&v| self.value(v).clone()).collect();
        let value = Tensor::stack(&parts)?;
        Ok(self.push(value, items, StackOp))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, items: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = items.iter().map(|&v| self.value(v)).collect();
        let value = concat_tensors(&tensors, axis)?;
        Ok(self.push(value, items, ConcatOp { axis }))
    }

    /// `x · wᵀ + b` for `x: L×D_in`, `w: D_out×D_in`, `b: D_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(value, &[x, w, b], LinearOp))
    }

    /// Rows `idx` of a rank-2 tensor.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let [rows, cols] = t.shape()[..] else {
            return Err(Error::shape("gather_rows needs a rank-2 tensor"));
        };
        if idx.is_empty() {
            return Err(Error::shape("gather_rows needs at least one index"));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &r in &idx {
            if r >= rows {
                return Err(Error::shape(format!("row {r} out of range ({rows})")));
            }
            data.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::from_parts(vec![idx.len(), cols], data);
        Ok(self.push(value, &[x], GatherRowsOp(idx)))
    }

    /// Mean over the spatial axes: `N×C×H×W -> N×C`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let s = h * w;
        let inv = T::one() / T::of(s as f64);
        let data = self
            .value(x)
            .data()
            .chunks(s)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_parts(vec![n, c], data);
        Ok(self.push(value, &[x], SpatialMeanOp))
    }

    /// Mean of consecutive groups of `group` rows: `R×C -> (R/group)×C`.
    pub fn group_mean_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        let [rows, cols] = t.shape()[..] else {
            return Err(Error::shape("group_mean_rows needs a rank-2 tensor"));
        };
        if group == 0 || rows % group != 0 {
            return Err(Error::shape(format!("{rows} rows do not split into groups of {group}")));
        }
        let inv = T::one() / T::of(group as f64);
        let mut data = vec![T::zero(); rows / group * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[(r / group) * cols + c] += t.data()[r * cols + c] * inv;
            }
        }
        let value = Tensor::from_parts(vec![rows / group, cols], data);
        Ok(self.push(value, &[x], GroupMeanOp(group)))
    }

    // -------------------------------------------------------------------
    // layer kernels

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: PaddingMode) -> Result<Var> {
        let value = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, padding)?;
        Ok(self.push(value, &[x, w, b], Conv2dOp { stride, padding }))
    }

    /// Training-mode batch norm; returns the batch statistics for the
    /// caller's running-stat update.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, ops::BatchStats<T>)> {
        let (value, cache, stats) = ops::batch_norm_train_forward(self.value(x), self.value(gamma), self.value(beta))?;
        Ok((self.push(value, &[x, gamma, beta], BatchNormOp(cache)), stats))
    }

    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, stats: &RunningStats<T>) -> Result<Var> {
        let (value, cache) = ops::batch_norm_eval_forward(self.value(x), self.value(gamma), self.value(beta), stats)?;
        Ok(self.push(value, &[x, gamma, beta], BatchNormOp(cache)))
    }

    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (value, cache) = ops::layer_norm_channels(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(value, &[x, gamma, beta], LayerNormOp(cache)))
    }

    pub fn upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let value = ops::bilinear_upsample(self.value(x), out_h, out_w)?;
        Ok(self.push(value, &[x], UpsampleOp))
    }

    /// Bilinear samples of a `C×H×W` map at fixed positions: `L×C`.
    pub fn sample_points(&mut self, x: Var, points: &[Point2D]) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if points.is_empty() {
            return Err(Error::shape("sample_points needs at least one point"));
        }
        let taps: Vec<[(usize, T); 4]> = points.iter().map(|&p| ops::bilinear_taps(p, h, w)).collect();
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(points.len() * c);
        for tap in &taps {
            for ch in 0..c {
                let plane = &d[ch * h * w..];
                data.push(tap.iter().map(|&(i, wt)| plane[i] * wt).sum());
            }
        }
        let value = Tensor::from_parts(vec![points.len(), c], data);
        Ok(self.push(value, &[x], SamplePointsOp { taps, c, hw: h * w }))
    }
}

pub(crate) fn concat_tensors<T: Scalar>(tensors: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = tensors.first().ok_or_else(|| Error::shape("cannot concat zero tensors"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::shape(format!("concat axis {axis} out of range for rank {rank}")));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for t in tensors {
        if t.rank() != rank
            || t.shape()[..axis] != first.shape()[..axis]
            || t.shape()[axis + 1..] != first.shape()[axis + 1..]
        {
            return Err(Error::shape(format!(
                "concat shape mismatch: {:?} vs {:?} on axis {axis}",
                first.shape(),
                t.shape()
            )));
        }
        shape[axis] += t.shape()[axis];
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in tensors {
            let chunk = t.len() / outer;
            data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

pub(crate) fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [l, d_in] = x.shape()[..] else {
        return Err(Error::shape(format!("linear input must be rank 2, got {:?}", x.shape())));
    };
    let [d_out, wd] = w.shape()[..] else {
        return Err(Error::shape("linear weight must be rank 2"));
    };
    if wd != d_in {
        return Err(Error::shape(format!("linear width mismatch: input {d_in}, weight {wd}")));
    }
    b.expect_shape(&[d_out])?;
    let mut out = Vec::with_capacity(l * d_out);
    for _ in 0..l {
        out.extend_from_slice(b.data());
    }
    T::gemm(l, d_in, d_out, x.data(), false, w.data(), true, &mut out, true);
    Ok(Tensor::from_parts(vec![l, d_out], out))
}

// ---------------------------------------------------------------------------
// backward implementations

struct AddOp;
impl<T: Scalar> Backward<T> for AddOp {
    fn backward(&self, g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

struct SubOp;
impl<T: Scalar> Backward<T> for SubOp {
    fn backward(&self, g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone()), Some(g.map(|v| -v))]
    }
}

struct ScaleOp<T>(T);
impl<T: Scalar> Backward<T> for ScaleOp<T> {
    fn backward(&self, g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.map(|v| v * self.0))]
    }
}

struct MulConstOp<T: Scalar>(Tensor<T>);
impl<T: Scalar> Backward<T> for MulConstOp<T> {
    fn backward(&self, g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.zip_map(&self.0, |a, b| a * b).expect("same shape"))]
    }
}

struct MulScalarOp;
impl<T: Scalar> Backward<T> for MulScalarOp {
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = inputs[1].item();
        let ga = needs[0].then(|| g.map(|v| v * s));
        let gs = needs[1].then(|| {
            let dot: T = g.data().iter().zip(inputs[0].data()).map(|(&a, &b)| a * b).sum();
            Tensor::from_parts(inputs[1].shape().to_vec(), vec![dot])
        });
        vec![ga, gs]
    }
}

struct AddScalarOp;
impl<T: Scalar> Backward<T> for AddScalarOp {
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![
            Some(g.clone()),
            Some(Tensor::from_parts(inputs[1].shape().to_vec(), vec![g.sum()])),
        ]
    }
}

enum UnaryOp {
    Relu,
    Gelu,
    Sigmoid,
}
impl<T: Scalar> Backward<T> for UnaryOp {
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], out: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let gi = match self {
            UnaryOp::Relu => g.zip_map(inputs[0], |g, x| if x > T::zero() { g } else { T::zero() }),
            UnaryOp::Gelu => g.zip_map(inputs[0], |g, x| g * ops::gelu_grad_scalar(x)),
            UnaryOp::Sigmoid => g.zip_map(out, |g, s| g * s * (T::one() - s)),
        };
        vec![Some(gi.expect("same shape"))]
    }
}

struct SumOp;
impl<T: Scalar> Backward<T> for SumOp {
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::full(inputs[0].shape(), g.item()))]
    }
}

struct ReshapeOp;
impl<T: Scalar> Backward<T> for ReshapeOp {
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone().reshape(inputs[0].shape()).expect("same length"))]
    }
}

struct SelectOp(usize);
impl<T: Scalar> Backward<T> for SelectOp {
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut gi = Tensor::zeros(inputs[0].shape());
        let inner = g.len();
        gi.data_mut()[self.0 * inner..(self.0 + 1) * inner].copy_from_slice(g.data());
        vec![Some(gi)]
    }
}

struct StackOp;
impl<T: Scalar> Backward<T> for StackOp {
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        (0..inputs.len())
            .map(|i| Some(g.select(i).reshape(inputs[i].shape()).expect("same length")))
            .collect()
    }
}

struct ConcatOp {
    axis: usize,
}
impl<T: Scalar> Backward<T> for ConcatOp {
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let outer: usize = g.shape()[..self.axis].iter().product();
        let row = g.len() / outer;
        let mut out: Vec<Vec<T>> = inputs.iter().map(|t| Vec::with_capacity(t.len())).collect();
        for o in 0..outer {
            let mut off = o * row;
            for (i, t) in inputs.iter().enumerate() {
                let chunk = t.len() / outer;
                out[i].extend_from_slice(&g.data()[off..off + chunk]);
                off += chunk;
            }
        }
        out.into_iter()
            .zip(inputs)
            .zip(needs)
            .map(|((d, t), &need)| need.then(|| Tensor::from_parts(t.shape().to_vec(), d)))
            .collect()
    }
}

struct LinearOp;
impl<T: Scalar> Backward<T> for LinearOp {
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (l, d_in) = (x.shape()[0], x.shape()[1]);
        let d_out = w.shape()[0];
        let gx = needs[0].then(|| {
            let mut d = vec![T::zero(); l * d_in];
            T::gemm(l, d_out, d_in, g.data(), false, w.data(), false, &mut d, false);
            Tensor::from_parts(x.shape().to_vec(), d)
        });
        let gw = needs[1].then(|| {
            let mut d = vec![T::zero(); d_out * d_in];
            T::gemm(d_out, l, d_in, g.data(), true, x.data(), false, &mut d, false);
            Tensor::from_parts(w.shape().to_vec(), d)
        });
        let gb = needs[2].then(|| {
            let mut d = vec![T::zero(); d_out];
            for r in g.data().chunks(d_out) {
                for (a, &b) in d.iter_mut().zip(r) {
                    *a += b;
                }
            }
            Tensor::from_parts(vec![d_out], d)
        });
        vec![gx, gw, gb]
    }
}

struct GatherRowsOp(Vec<usize>);
impl<T: Scalar> Backward<T> for GatherRowsOp {
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let cols = inputs[0].shape()[1];
        let mut gi = Tensor::zeros(inputs[0].shape());
        for (j, &r) in self.0.iter().enumerate() {
            for c in 0..cols {
                gi.data_mut()[r * cols + c] += g.data()[j * cols + c];
            }
        }
        vec![Some(gi)]
    }
}

struct SpatialMeanOp;
impl<T: Scalar> Backward<T> for SpatialMeanOp {
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = inputs[0].shape()[2] * inputs[0].shape()[3];
        let inv = T::one() / T::of(s as f64);
        let mut gi = Vec::with_capacity(inputs[0].len());
        for &v in g.data() {
            gi.extend(std::iter::repeat_n(v * inv, s));
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), gi))]
    }
}

struct GroupMeanOp(usize);
impl<T: Scalar> Backward<T> for GroupMeanOp {
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (rows, cols) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        let inv = T::one() / T::of(self.0 as f64);
        let gi = Tensor::from_fn(&[rows, cols], |i| g.data()[(i / cols / self.0) * cols + i % cols] * inv);
        vec![Some(gi)]
    }
}

struct Conv2dOp {
    stride: usize,
    padding: PaddingMode,
}
impl<T: Scalar> Backward<T> for Conv2dOp {
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (gx, gw, gb) = ops::conv2d_backward(inputs[0], inputs[1], g, self.stride, self.padding, needs[0])
            .expect("shapes validated in forward");
        vec![gx, Some(gw), Some(gb)]
    }
}

struct BatchNormOp<T: Scalar>(ops::BatchNormCache<T>);
impl<T: Scalar> Backward<T> for BatchNormOp<T> {
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (gx, gg, gb) = ops::batch_norm_backward(g, inputs[1], &self.0).expect("shapes validated in forward");
        vec![Some(gx), Some(gg), Some(gb)]
    }
}

struct LayerNormOp<T: Scalar>(ops::LayerNormCache<T>);
impl<T: Scalar> Backward<T> for LayerNormOp<T> {
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (gx, gg, gb) =
            ops::layer_norm_channels_backward(g, inputs[1], &self.0).expect("shapes validated in forward");
        vec![Some(gx), Some(gg), Some(gb)]
    }
}

struct UpsampleOp;
impl<T: Scalar> Backward<T> for UpsampleOp {
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(
            ops::bilinear_upsample_backward(inputs[0].shape(), g).expect("shapes validated in forward"),
        )]
    }
}

struct SamplePointsOp<T> {
    taps: Vec<[(usize, T); 4]>,
    c: usize,
    hw: usize,
}
impl<T: Scalar> Backward<T> for SamplePointsOp<T> {
    fn backward(&self, g: &Tensor<T>, inputs: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut gi = Tensor::zeros(inputs[0].shape());
        let d = gi.data_mut();
        for (j, tap) in self.taps.iter().enumerate() {
            for ch in 0..self.c {
                let gv = g.data()[j * self.c + ch];
                for &(i, wt) in tap {
                    d[ch * self.hw + i] += gv * wt;
                }
            }
        }
        vec![Some(gi)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_sum_gradient_is_ones_for_positive_input() {
        let x = Tensor::<f64>::new(&[4], vec![0.5, 1.0, 2.0, 3.0]).unwrap();
        let gp = gradient_of(&[("x", x)], &Tensor::scalar(1.0), |t, v| {
            let r = t.relu(v[0]);
            Ok(t.sum(r))
        })
        .unwrap();
        assert_eq!(gp.grads["x"].data(), &[1.0; 4]);
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        let x = Tensor::<f64>::new(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let w = Tensor::<f64>::new(&[2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let u = Tensor::<f64>::new(&[1, 2], vec![3.0, -1.0]).unwrap();
        let gp = gradient_of(
            &[("x", x.clone()), ("w", w), ("b", Tensor::zeros(&[2]))],
            &u,
            |t, v| t.linear(v[0], v[1], v[2]),
        )
        .unwrap();
        let want = [3.0, -6.0, 1.5, -1.0, 2.0, -0.5];
        assert_eq!(gp.grads["w"].data(), &want);
    }

    #[test]
    fn constants_receive_no_gradient_and_unused_params_get_zeros() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::full(&[2], 3.0));
        let p = tape.param("p", &Tensor::full(&[2], 2.0));
        let _unused = tape.param("unused", &Tensor::full(&[3], 1.0));
        let y = tape.sub(p, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s);
        assert!(g.get(c).is_none());
        let params = g.params(&tape);
        assert_eq!(params["p"].data(), &[1.0, 1.0]);
        assert_eq!(params["unused"].data(), &[0.0; 3]);
    }

    #[test]
    fn shared_param_accumulates() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param("a", &Tensor::full(&[1], 2.0));
        let a2 = tape.param("a", &Tensor::full(&[1], 99.0));
        assert_eq!(a, a2);
        let y = tape.mul_scalar(a, a).unwrap();
        let g = tape.backward(y);
        assert_eq!(g.params(&tape)["a"].item(), 4.0);
    }
}
