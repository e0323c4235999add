use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, stride: usize, padding: usize },
    ChannelBias { input: Var, bias: Var },
    Relu(Var),
    Softplus(Var),
    Softmax { input: Var, axis: usize },
    L1Normalize { input: Var, axis: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Log(Var),
    LogFloor { input: Var, floor: f64 },
    SumAxis { input: Var, axis: usize },
    SumAll(Var),
    Expand { input: Var, axis: usize },
    GlobalAvgPool(Var),
    Reshape(Var),
    Select { input: Var, index: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations in creation order, which is a topological order of the
/// computation DAG. [`Tape::backward`] walks it in reverse exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let y = kernels::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(y, Op::Conv2d { input, kernel, stride, padding }))
    }

    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let y = kernels::add_channel_bias(self.value(input), self.value(bias))?;
        Ok(self.push(y, Op::ChannelBias { input, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let y = kernels::relu(self.value(input));
        self.push(y, Op::Relu(input))
    }

    pub fn softplus(&mut self, input: Var) -> Var {
        let y = kernels::softplus(self.value(input));
        self.push(y, Op::Softplus(input))
    }

    pub fn softmax_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let y = kernels::softmax_axis(self.value(input), axis)?;
        Ok(self.push(y, Op::Softmax { input, axis }))
    }

    pub fn l1_normalize_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let y = kernels::l1_normalize_axis(self.value(input), axis)?;
        Ok(self.push(y, Op::L1Normalize { input, axis }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, input: Var, k: f64) -> Var {
        let y = self.value(input).scale(k);
        self.push(y, Op::Scale(input, k))
    }

    pub fn add_scalar(&mut self, input: Var, c: f64) -> Var {
        let y = self.value(input).add_scalar(c);
        self.push(y, Op::AddScalar(input))
    }

    /// Natural log; arguments below `EPS_LOG` are a domain error.
    pub fn log(&mut self, input: Var) -> Result<Var> {
        let y = kernels::log(self.value(input))?;
        Ok(self.push(y, Op::Log(input)))
    }

    /// `ln(max(x, floor))`; clamped entries pass no gradient.
    pub fn log_floor(&mut self, input: Var, floor: f64) -> Var {
        let y = kernels::log_floor(self.value(input), floor);
        self.push(y, Op::LogFloor { input, floor })
    }

    pub fn sum_axis(&mut self, input: Var, axis: usize) -> Result<Var> {
        let y = kernels::sum_axis(self.value(input), axis)?;
        Ok(self.push(y, Op::SumAxis { input, axis }))
    }

    pub fn sum_all(&mut self, input: Var) -> Var {
        let y = Tensor::scalar(self.value(input).sum());
        self.push(y, Op::SumAll(input))
    }

    /// Tiles `input` `len` times along a new axis inserted at `axis`.
    pub fn expand(&mut self, input: Var, axis: usize, len: usize) -> Result<Var> {
        let y = kernels::expand_axis(self.value(input), axis, len)?;
        Ok(self.push(y, Op::Expand { input, axis }))
    }

    pub fn global_average_pool(&mut self, input: Var) -> Result<Var> {
        let y = kernels::global_average_pool(self.value(input))?;
        Ok(self.push(y, Op::GlobalAvgPool(input)))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(input).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(input)))
    }

    /// Slice `index` along the leading axis, dropping that axis.
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let x = self.value(input);
        let Some((&n, rest)) = x.shape().split_first() else {
            return Err(Error::dim("select", "cannot select from a scalar"));
        };
        if index >= n {
            return Err(Error::dim("select", format!("index {index} out of range for axis 0 of length {n}")));
        }
        let inner: usize = rest.iter().product();
        let y = Tensor::new(rest, x.data()[index * inner..(index + 1) * inner].to_vec())?;
        Ok(self.push(y, Op::Select { input, index }))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must hold one value, shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                // Leaves keep their gradient.
                grads[idx] = Some(g);
                continue;
            }
            let mut out: Vec<(Var, Tensor)> = Vec::with_capacity(2);
            let mut send = |v: Var, contrib: Tensor| -> Result<()> {
                out.push((v, contrib));
                Ok(())
            };
            match node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { input, kernel, stride, padding } => {
                    let (gx, gk) = kernels::conv2d_backward(
                        self.value(input),
                        self.value(kernel),
                        &g,
                        stride,
                        padding,
                    )?;
                    send(input, gx)?;
                    send(kernel, gk)?;
                }
                Op::ChannelBias { input, bias } => {
                    send(bias, kernels::channel_bias_grad(&g))?;
                    send(input, g)?;
                }
                Op::Relu(x) => {
                    let gx = self.value(x).zip_map(&g, |xv, gv| if xv > 0.0 { gv } else { 0.0 })?;
                    send(x, gx)?;
                }
                Op::Softplus(x) => {
                    let gx = self.value(x).zip_map(&g, |xv, gv| gv * kernels::sigmoid(xv))?;
                    send(x, gx)?;
                }
                Op::Softmax { input, axis } => {
                    send(input, kernels::softmax_backward(&node.value, &g, axis)?)?;
                }
                Op::L1Normalize { input, axis } => {
                    let gx = kernels::l1_normalize_backward(self.value(input), &node.value, &g, axis)?;
                    send(input, gx)?;
                }
                Op::Add(a, b) => {
                    send(a, g.clone())?;
                    send(b, g)?;
                }
                Op::Sub(a, b) => {
                    send(b, g.scale(-1.0))?;
                    send(a, g)?;
                }
                Op::Mul(a, b) => {
                    send(a, g.mul(self.value(b))?)?;
                    send(b, g.mul(self.value(a))?)?;
                }
                Op::Scale(x, k) => send(x, g.scale(k))?,
                Op::AddScalar(x) => send(x, g)?,
                Op::Log(x) => send(x, g.zip_map(self.value(x), |gv, xv| gv / xv)?)?,
                Op::LogFloor { input, floor } => {
                    let gx = g.zip_map(self.value(input), |gv, xv| if xv > floor { gv / xv } else { 0.0 })?;
                    send(input, gx)?;
                }
                Op::SumAxis { input, axis } => {
                    let len = self.value(input).shape()[axis];
                    send(input, kernels::expand_axis(&g, axis, len)?)?;
                }
                Op::SumAll(x) => send(x, Tensor::full(self.value(x).shape(), g.item()))?,
                Op::Expand { input, axis } => send(input, kernels::sum_axis(&g, axis)?)?,
                Op::GlobalAvgPool(x) => {
                    let xs = self.value(x).shape();
                    let r = xs.len();
                    let plane = xs[r - 2] * xs[r - 1];
                    let data = g
                        .data()
                        .iter()
                        .flat_map(|&gv| std::iter::repeat(gv / plane as f64).take(plane))
                        .collect();
                    send(x, Tensor::new(xs, data)?)?;
                }
                Op::Reshape(x) => send(x, g.reshape(self.value(x).shape())?)?,
                Op::Select { input, index } => {
                    let xs = self.value(input).shape();
                    let inner = g.len();
                    let mut gx = Tensor::zeros(xs);
                    gx.data_mut()[index * inner..(index + 1) * inner].copy_from_slice(g.data());
                    send(input, gx)?;
                }
            }
            for (v, contrib) in out {
                match &mut grads[v.0] {
                    Some(acc) => {
                        acc.expect_same_shape(&contrib, "backward")?;
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        Ok(Grads {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(&[3], 2.0));
        let b = tape.leaf(Tensor::full(&[2, 2], 5.0));
        let sq = tape.mul(a, a).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(a).data(), &[4.0, 4.0, 4.0]);
        assert_eq!(grads.wrt(b), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + 3x, dy/dx = 2x + 3
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.5, -2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.scale(x, 3.0);
        let y = tape.add(sq, lin).unwrap();
        let loss = tape.sum_all(y);
        let g = tape.backward(loss).unwrap().wrt(x);
        assert_eq!(g.data(), &[6.0, -1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn select_routes_gradient_to_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[3, 2], |i| i as f64));
        let row = tape.select(x, 1).unwrap();
        assert_eq!(tape.value(row).data(), &[2.0, 3.0]);
        let loss = tape.sum_all(row);
        let g = tape.backward(loss).unwrap().wrt(x);
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(tape.select(x, 3).is_err());
    }
}
