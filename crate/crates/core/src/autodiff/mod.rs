//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! A [`Tape`] records every operation as a node holding its op kind, input node
//! ids, the forward value, and whatever the backward rule needs. Nodes are only
//! ever appended, so the tape is topologically ordered by construction.
//!
//! ```
//! use cobprune::autodiff::Tape;
//! use cobprune::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::new(vec![2], vec![1.0, -3.0]).unwrap().with_grad());
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap(), &[2.0, -6.0]);
//! ```

pub(crate) mod kernels;

use crate::error::{Error, Result};
use crate::nn::activation::{self, map_channels_backward, SubspaceSplit, TsraParams};
use crate::tensor::{numel, Tensor};
use kernels::ConvDims;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum OpKind {
    Leaf,
    MatMul,
    /// `x W^T + b` with `x` flattened to `[N, in]`.
    Linear,
    /// 3x3, stride 1, zero padding 1.
    Conv2d,
    RmsNorm,
    Relu,
    Radial,
    Tsra {
        split: SubspaceSplit,
        params: TsraParams,
    },
    AvgPool2,
    GlobalAvgPool,
    Sum,
    Mul,
    CrossEntropy {
        labels: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
pub struct TapeNode {
    op: OpKind,
    inputs: Vec<usize>,
    value: Tensor,
    saved: Vec<f32>,
    needs_grad: bool,
}

impl TapeNode {
    pub fn op(&self) -> &OpKind {
        &self.op
    }

    pub fn inputs(&self) -> &[usize] {
        &self.inputs
    }
}

#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

fn shape_err(op: &str, shapes: &[&[usize]]) -> Error {
    Error::dim(format!("{op}: incompatible shapes {shapes:?}"))
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

    pub fn node(&self, v: Var) -> &TapeNode {
        &self.nodes[v.0]
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(TapeNode {
            op: OpKind::Leaf,
            inputs: Vec::new(),
            value: t,
            saved: Vec::new(),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    /// Moves a leaf's tensor (with its gradient) out, leaving a placeholder.
    pub fn take_leaf(&mut self, v: Var) -> Tensor {
        let node = &mut self.nodes[v.0];
        let placeholder = Tensor::zeros(&[1]);
        std::mem::replace(&mut node.value, placeholder)
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Overwrites a leaf's data. Call [`Tape::replay`] to refresh downstream values.
    pub fn set_leaf_data(&mut self, v: Var, data: Vec<f32>) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, OpKind::Leaf) {
            return Err(Error::contract("set_leaf_data on a non-leaf node"));
        }
        node.value.set_data(data)
    }

    /// Recomputes every non-leaf node from current leaf values.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, OpKind::Leaf) {
                continue;
            }
            let (value, saved) = self.compute(&self.nodes[i].op, &self.nodes[i].inputs)?;
            let node = &mut self.nodes[i];
            node.value = value;
            node.saved = saved;
        }
        Ok(())
    }

    fn push(&mut self, op: OpKind, inputs: Vec<usize>) -> Result<Var> {
        let (value, saved) = self.compute(&op, &inputs)?;
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(TapeNode {
            op,
            inputs,
            value,
            saved,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(OpKind::MatMul, vec![a.0, b.0])
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        self.push(OpKind::Linear, vec![x.0, weight.0, bias.0])
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        self.push(OpKind::Conv2d, vec![x.0, kernel.0, bias.0])
    }

    pub fn rmsnorm(&mut self, x: Var) -> Result<Var> {
        self.push(OpKind::RmsNorm, vec![x.0])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(OpKind::Relu, vec![x.0])
    }

    pub fn radial(&mut self, x: Var) -> Result<Var> {
        self.push(OpKind::Radial, vec![x.0])
    }

    pub fn tsra(&mut self, x: Var, split: SubspaceSplit, params: TsraParams) -> Result<Var> {
        self.push(OpKind::Tsra { split, params }, vec![x.0])
    }

    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        self.push(OpKind::AvgPool2, vec![x.0])
    }

    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        self.push(OpKind::GlobalAvgPool, vec![x.0])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.push(OpKind::Sum, vec![x.0]).expect("sum accepts any shape")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(OpKind::Mul, vec![a.0, b.0])
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.push(
            OpKind::CrossEntropy {
                labels: labels.to_vec(),
            },
            vec![logits.0],
        )
    }

    fn compute(&self, op: &OpKind, inputs: &[usize]) -> Result<(Tensor, Vec<f32>)> {
        let val = |k: usize| &self.nodes[inputs[k]].value;
        match op {
            OpKind::Leaf => unreachable!("leaves are never recomputed"),
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                let (sa, sb) = (a.shape(), b.shape());
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(shape_err("matmul", &[sa, sb]));
                }
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut c = vec![0.0; m * n];
                kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
                Ok((Tensor::new(vec![m, n], c)?, Vec::new()))
            }
            OpKind::Linear => {
                let (x, w, b) = (val(0), val(1), val(2));
                let (sx, sw, sb) = (x.shape(), w.shape(), b.shape());
                let n = sx[0];
                let fan_in = x.len() / n;
                if sw.len() != 2 || sw[1] != fan_in || sb != [sw[0]] {
                    return Err(shape_err("linear", &[sx, sw, sb]));
                }
                let out = sw[0];
                let mut y = Vec::with_capacity(n * out);
                for _ in 0..n {
                    y.extend_from_slice(b.data());
                }
                kernels::gemm(n, fan_in, out, x.data(), false, w.data(), true, &mut y, true);
                Ok((Tensor::new(vec![n, out], y)?, Vec::new()))
            }
            OpKind::Conv2d => {
                let (x, k, b) = (val(0), val(1), val(2));
                let (sx, sk, sb) = (x.shape(), k.shape(), b.shape());
                if sx.len() != 4
                    || sk.len() != 4
                    || sk[1] != sx[1]
                    || sk[2] != 3
                    || sk[3] != 3
                    || sb != [sk[0]]
                {
                    return Err(shape_err("conv2d", &[sx, sk, sb]));
                }
                let d = ConvDims {
                    n: sx[0],
                    c_in: sx[1],
                    c_out: sk[0],
                    h: sx[2],
                    w: sx[3],
                };
                let (out, cols) = kernels::conv2d_forward(&d, x.data(), k.data(), b.data());
                Ok((Tensor::new(vec![d.n, d.c_out, d.h, d.w], out)?, cols))
            }
            OpKind::RmsNorm => Ok((activation::rmsnorm_forward(val(0)), Vec::new())),
            OpKind::Relu => Ok((activation::relu_forward(val(0)), Vec::new())),
            OpKind::Radial => Ok((activation::radial_forward(val(0)), Vec::new())),
            OpKind::Tsra { split, params } => {
                Ok((activation::tsra_forward(val(0), split, params)?, Vec::new()))
            }
            OpKind::AvgPool2 => {
                let x = val(0);
                let s = x.shape();
                if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
                    return Err(Error::dim(format!(
                        "avgpool2 needs N x C x H x W with even H, W; got {s:?}"
                    )));
                }
                let out = kernels::avgpool2_forward(x.data(), s[0] * s[1], s[2], s[3]);
                Ok((Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out)?, Vec::new()))
            }
            OpKind::GlobalAvgPool => {
                let x = val(0);
                let s = x.shape();
                if s.len() != 4 {
                    return Err(Error::dim(format!("global_avgpool needs rank 4, got {s:?}")));
                }
                let hw = s[2] * s[3];
                let out = x
                    .data()
                    .chunks_exact(hw)
                    .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
                    .collect();
                Ok((Tensor::new(vec![s[0], s[1]], out)?, Vec::new()))
            }
            OpKind::Sum => {
                let s: f64 = val(0).data().iter().map(|&v| v as f64).sum();
                Ok((Tensor::scalar(s as f32), Vec::new()))
            }
            OpKind::Mul => {
                let (a, b) = (val(0), val(1));
                if a.shape() != b.shape() {
                    return Err(shape_err("mul", &[a.shape(), b.shape()]));
                }
                let d = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                Ok((Tensor::new(a.shape().to_vec(), d)?, Vec::new()))
            }
            OpKind::CrossEntropy { labels } => {
                let z = val(0);
                let s = z.shape();
                if s.len() != 2 || s[0] != labels.len() {
                    return Err(Error::dim(format!(
                        "cross_entropy: logits {s:?} vs {} labels",
                        labels.len()
                    )));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
                    return Err(Error::contract(format!("label {bad} out of range for {} classes", s[1])));
                }
                let (loss, probs) = kernels::cross_entropy(z.data(), s[1], labels);
                Ok((Tensor::scalar(loss), probs))
            }
        }
    }

    /// Accumulates `d loss / d leaf` into every gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, OpKind::Leaf) {
                if self.nodes[i].value.requires_grad() {
                    self.nodes[i].value.accumulate_grad(&g);
                }
                continue;
            }
            let node = &self.nodes[i];
            let input_grads = self.backward_node(node, &g);
            for (&inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match grads[inp].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    None => grads[inp] = Some(ig),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, node: &TapeNode, g: &[f32]) -> Vec<Option<Vec<f32>>> {
        let val = |k: usize| &self.nodes[node.inputs[k]].value;
        let need = |k: usize| self.nodes[node.inputs[k]].needs_grad;
        match &node.op {
            OpKind::Leaf => Vec::new(),
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let da = need(0).then(|| {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, b.data(), true, &mut da, false);
                    da
                });
                let db = need(1).then(|| {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, a.data(), true, g, false, &mut db, false);
                    db
                });
                vec![da, db]
            }
            OpKind::Linear => {
                let (x, w) = (val(0), val(1));
                let n = x.shape()[0];
                let fan_in = x.len() / n;
                let out = w.shape()[0];
                let dx = need(0).then(|| {
                    let mut dx = vec![0.0; n * fan_in];
                    kernels::gemm(n, out, fan_in, g, false, w.data(), false, &mut dx, false);
                    dx
                });
                let dw = need(1).then(|| {
                    let mut dw = vec![0.0; out * fan_in];
                    kernels::gemm(out, n, fan_in, g, true, x.data(), false, &mut dw, false);
                    dw
                });
                let db = need(2).then(|| {
                    let mut db = vec![0.0f64; out];
                    for row in g.chunks_exact(out) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b as f64);
                    }
                    db.into_iter().map(|v| v as f32).collect()
                });
                vec![dx, dw, db]
            }
            OpKind::Conv2d => {
                let (x, k) = (val(0), val(1));
                let sx = x.shape();
                let d = ConvDims {
                    n: sx[0],
                    c_in: sx[1],
                    c_out: k.shape()[0],
                    h: sx[2],
                    w: sx[3],
                };
                let (dx, dk, db) = kernels::conv2d_backward(&d, k.data(), &node.saved, g, need(0));
                vec![dx, need(1).then_some(dk), need(2).then_some(db)]
            }
            OpKind::RmsNorm => {
                let x = val(0);
                let mut dx = vec![0.0; x.len()];
                map_channels_backward(x.shape(), x.data(), g, &mut dx, activation::rmsnorm_vec_backward);
                vec![Some(dx)]
            }
            OpKind::Relu => {
                let dx = val(0)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                vec![Some(dx)]
            }
            OpKind::Radial => {
                let x = val(0);
                let mut dx = vec![0.0; x.len()];
                map_channels_backward(x.shape(), x.data(), g, &mut dx, activation::radial_vec_backward);
                vec![Some(dx)]
            }
            OpKind::Tsra { split, params } => {
                let x = val(0);
                let k = split.split();
                let mut dx = vec![0.0; x.len()];
                map_channels_backward(x.shape(), x.data(), g, &mut dx, |xv, gv, dv| {
                    activation::tsra_vec_backward(xv, k, params, gv, dv)
                });
                vec![Some(dx)]
            }
            OpKind::AvgPool2 => {
                let s = val(0).shape();
                vec![Some(kernels::avgpool2_backward(g, s[0] * s[1], s[2], s[3]))]
            }
            OpKind::GlobalAvgPool => {
                let s = val(0).shape();
                let hw = s[2] * s[3];
                let scale = 1.0 / hw as f32;
                let mut dx = Vec::with_capacity(numel(s));
                for &gv in g {
                    dx.extend(std::iter::repeat(gv * scale).take(hw));
                }
                vec![Some(dx)]
            }
            OpKind::Sum => vec![Some(vec![g[0]; val(0).len()])],
            OpKind::Mul => {
                let (a, b) = (val(0), val(1));
                let da = need(0).then(|| b.data().iter().zip(g).map(|(x, y)| x * y).collect());
                let db = need(1).then(|| a.data().iter().zip(g).map(|(x, y)| x * y).collect());
                vec![da, db]
            }
            OpKind::CrossEntropy { labels } => {
                let k = val(0).shape()[1];
                let scale = g[0] / labels.len() as f32;
                let mut dz = node.saved.clone();
                for (i, &l) in labels.iter().enumerate() {
                    dz[i * k + l] -= 1.0;
                }
                dz.iter_mut().for_each(|v| *v *= scale);
                vec![Some(dz)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(Tensor::eye(2));
        let m = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.leaf(t(&[2, 1], &[1.0, 1.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let q = tape.matmul(m, ones).unwrap();
        assert_eq!(tape.value(q).shape(), &[2, 1]);
        assert_eq!(tape.value(q).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Dimension(_)));
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]).with_grad());
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0; 4]);

        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]).with_grad());
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_grad());
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0; 3]);
        tape.zero_grad();
        assert_eq!(tape.grad(w).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(&[3]).with_grad());
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn conv_zero_kernel_gives_bias_planes() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 3, 3], &(0..18).map(|v| v as f32).collect::<Vec<_>>()));
        let k = tape.leaf(Tensor::zeros(&[3, 2, 3, 3]));
        let b = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]));
        let y = tape.conv2d(x, k, b).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 3, 3, 3]);
        for (c, plane) in out.data().chunks(9).enumerate() {
            assert!(plane.iter().all(|&v| v == [0.5, -1.0, 2.0][c]));
        }
    }

    #[test]
    fn conv_ones_counts_taps() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 3, 3]));
        let k = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, k, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn avgpool_hand_values_and_odd_extent() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.avgpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
        let odd = tape.leaf(Tensor::zeros(&[1, 1, 3, 2]));
        assert!(matches!(tape.avgpool2(odd), Err(Error::Dimension(_))));
    }

    #[test]
    fn replay_tracks_leaf_mutation() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
        tape.set_leaf_data(b, vec![-1.0, 1.0]).unwrap();
        tape.replay().unwrap();
        assert_eq!(tape.value(c).data(), &[1.0]);
    }
}
