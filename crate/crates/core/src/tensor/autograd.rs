//! Wengert-tape backward pass. [`Tape::record`] linearizes the graph rooted
//! at a loss into topological order (inputs strictly before users); backward
//! walks it once in reverse, accumulating gradients per node and depositing
//! them on `requires_grad` leaves.

use std::collections::{HashMap, HashSet};

use super::kernels;
use super::ops::{NormP, Op};
use super::Tensor;
use crate::error::{config_err, shape_err, Result};
use crate::scalar::Scalar;

/// Topologically ordered view of the graph below one root.
pub struct Tape<T: Scalar> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Scalar> Tape<T> {
    /// Iterative post-order DFS over tracked nodes. Constants and frozen
    /// leaves terminate the walk.
    pub fn record(root: &Tensor<T>) -> Tape<T> {
        let mut nodes = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                nodes.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for input in node.op().inputs() {
                if input.tracks() && !visited.contains(&input.id()) {
                    stack.push((input, false));
                }
            }
        }
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every node's inputs precede it, and no node appears twice.
    pub fn is_topological(&self) -> bool {
        let mut seen: HashSet<u64> = HashSet::new();
        for node in &self.nodes {
            for input in node.op().inputs() {
                if input.tracks() && !seen.contains(&input.id()) {
                    return false;
                }
            }
            if !seen.insert(node.id()) {
                return false;
            }
        }
        true
    }
}

impl<T: Scalar> Tensor<T> {
    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` leaf the loss depends on; repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            shape_err!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            );
        }
        if !self.tracks() {
            config_err!("backward: loss was not produced by recorded operations");
        }
        let tape = Tape::record(self);
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for node in tape.nodes.iter().rev() {
            let g = match grads.remove(&node.id()) {
                Some(g) => g,
                None => continue,
            };
            if node.is_leaf() {
                if node.requires_grad() {
                    node.accumulate_grad(&g);
                }
                continue;
            }
            node_backward(node, &g, &mut grads);
        }
        Ok(())
    }
}

fn add_grad<T: Scalar>(grads: &mut HashMap<u64, Vec<T>>, target: &Tensor<T>, g: Vec<T>) {
    if !target.tracks() {
        return;
    }
    match grads.entry(target.id()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (a, b) in e.get_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        std::collections::hash_map::Entry::Vacant(v) => {
            v.insert(g);
        }
    }
}

fn node_backward<T: Scalar>(node: &Tensor<T>, g: &[T], grads: &mut HashMap<u64, Vec<T>>) {
    match node.op() {
        Op::Leaf => unreachable!("leaf handled by caller"),
        Op::Add(a, b) => {
            add_grad(grads, a, g.to_vec());
            add_grad(grads, b, g.to_vec());
        }
        Op::Sub(a, b) => {
            add_grad(grads, a, g.to_vec());
            add_grad(grads, b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            if a.tracks() {
                let bd = b.data();
                add_grad(grads, a, g.iter().zip(bd.iter()).map(|(&gv, &bv)| gv * bv).collect());
            }
            if b.tracks() {
                let ad = a.data();
                add_grad(grads, b, g.iter().zip(ad.iter()).map(|(&gv, &av)| gv * av).collect());
            }
        }
        Op::Scale(a, c) => {
            let c = *c;
            add_grad(grads, a, g.iter().map(|&v| v * c).collect());
        }
        Op::Sum(a) => {
            add_grad(grads, a, vec![g[0]; a.numel()]);
        }
        Op::Mean(a) => {
            let v = g[0] / T::from_f64(a.numel() as f64);
            add_grad(grads, a, vec![v; a.numel()]);
        }
        Op::Reshape(a) => {
            add_grad(grads, a, g.to_vec());
        }
        Op::LeakyRelu { input, slope } => {
            let x = input.data();
            let s = *slope;
            add_grad(
                grads,
                input,
                g.iter()
                    .zip(x.iter())
                    .map(|(&gv, &xv)| if xv < T::zero() { gv * s } else { gv })
                    .collect(),
            );
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            dims,
        } => {
            if input.tracks() {
                add_grad(grads, input, kernels::conv2d_bwd_input(g, &weight.data(), dims));
            }
            if weight.tracks() {
                add_grad(grads, weight, kernels::conv2d_bwd_weight(&input.data(), g, dims));
            }
            if let Some(b) = bias {
                if b.tracks() {
                    add_grad(grads, b, kernels::conv2d_bwd_bias(g, dims));
                }
            }
        }
        Op::ConvTranspose2d {
            input,
            weight,
            bias,
            dims,
        } => {
            // In the adjoint configuration the node output is the conv input,
            // so the roles of forward and input-gradient swap.
            if input.tracks() {
                add_grad(
                    grads,
                    input,
                    kernels::conv2d_fwd(g, &weight.data(), None, dims),
                );
            }
            if weight.tracks() {
                add_grad(grads, weight, kernels::conv2d_bwd_weight(g, &input.data(), dims));
            }
            if let Some(b) = bias {
                if b.tracks() {
                    // Bias applies per transposed output channel = conv c_in.
                    let plane = dims.in_plane();
                    let mut db = vec![T::zero(); dims.c_in];
                    for s in 0..dims.n {
                        for ch in 0..dims.c_in {
                            let base = (s * dims.c_in + ch) * plane;
                            let mut acc = T::zero();
                            for &v in &g[base..base + plane] {
                                acc += v;
                            }
                            db[ch] += acc;
                        }
                    }
                    add_grad(grads, b, db);
                }
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            mean,
            inv_std,
            training,
        } => {
            let s = input.shape();
            let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
            let (dx, dgamma, dbeta) = if *training {
                kernels::bn_bwd_train(&input.data(), g, mean, inv_std, &gamma.data(), n, c, plane)
            } else {
                kernels::bn_bwd_eval(&input.data(), g, mean, inv_std, &gamma.data(), n, c, plane)
            };
            add_grad(grads, input, dx);
            add_grad(grads, gamma, dgamma);
            add_grad(grads, beta, dbeta);
        }
        Op::AvgPool { input, kernel } => {
            let s = input.shape();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let (oh, ow) = (h / kernel, w / kernel);
            let inv = T::one() / T::from_f64((kernel * kernel) as f64);
            let mut dx = vec![T::zero(); input.numel()];
            for sc in 0..n * c {
                let src = &g[sc * oh * ow..(sc + 1) * oh * ow];
                let dst = &mut dx[sc * h * w..(sc + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = src[oy * ow + ox] * inv;
                        for ky in 0..*kernel {
                            for kx in 0..*kernel {
                                dst[(oy * kernel + ky) * w + ox * kernel + kx] += gv;
                            }
                        }
                    }
                }
            }
            add_grad(grads, input, dx);
        }
        Op::GlobalAvgPool { input } => {
            let s = input.shape();
            let plane = s[2] * s[3];
            let inv = T::one() / T::from_f64(plane as f64);
            let mut dx = vec![T::zero(); input.numel()];
            for (i, &gv) in g.iter().enumerate() {
                let v = gv * inv;
                for o in dx[i * plane..(i + 1) * plane].iter_mut() {
                    *o = v;
                }
            }
            add_grad(grads, input, dx);
        }
        Op::Linear {
            input,
            weight,
            bias,
        } => {
            let (n, f) = (input.shape()[0], input.shape()[1]);
            let o = weight.shape()[0];
            if input.tracks() {
                let mut dx = vec![T::zero(); n * f];
                kernels::matmul_acc(g, &weight.data(), &mut dx, n, o, f);
                add_grad(grads, input, dx);
            }
            if weight.tracks() {
                let mut dw = vec![T::zero(); o * f];
                kernels::matmul_tn_acc(g, &input.data(), &mut dw, o, n, f);
                add_grad(grads, weight, dw);
            }
            if bias.tracks() {
                let mut db = vec![T::zero(); o];
                for r in 0..n {
                    for (j, dbv) in db.iter_mut().enumerate() {
                        *dbv += g[r * o + j];
                    }
                }
                add_grad(grads, bias, db);
            }
        }
        Op::L2NormalizeRows {
            input,
            eps,
            raw_norms,
        } => {
            let rows = raw_norms.len();
            let d = input.numel() / rows;
            let y = node.data();
            let mut dx = vec![T::zero(); input.numel()];
            for r in 0..rows {
                let norm = raw_norms[r];
                let grow = &g[r * d..(r + 1) * d];
                let dst = &mut dx[r * d..(r + 1) * d];
                if norm > *eps {
                    let yrow = &y[r * d..(r + 1) * d];
                    let mut dot = T::zero();
                    for (&gv, &yv) in grow.iter().zip(yrow) {
                        dot += gv * yv;
                    }
                    for ((o, &gv), &yv) in dst.iter_mut().zip(grow).zip(yrow) {
                        *o = (gv - yv * dot) / norm;
                    }
                } else {
                    for (o, &gv) in dst.iter_mut().zip(grow) {
                        *o = gv / *eps;
                    }
                }
            }
            drop(y);
            add_grad(grads, input, dx);
        }
        Op::SoftmaxT { input, t } => {
            let (n, k) = (node.shape()[0], node.shape()[1]);
            let y = node.data();
            let mut dx = vec![T::zero(); n * k];
            for r in 0..n {
                let yrow = &y[r * k..(r + 1) * k];
                let grow = &g[r * k..(r + 1) * k];
                let mut dot = T::zero();
                for (&gv, &yv) in grow.iter().zip(yrow) {
                    dot += gv * yv;
                }
                for ((o, &gv), &yv) in dx[r * k..(r + 1) * k].iter_mut().zip(grow).zip(yrow) {
                    *o = yv * (gv - dot) / *t;
                }
            }
            drop(y);
            add_grad(grads, input, dx);
        }
        Op::LogSoftmax { input } => {
            let (n, k) = (node.shape()[0], node.shape()[1]);
            let y = node.data();
            let mut dx = vec![T::zero(); n * k];
            for r in 0..n {
                let yrow = &y[r * k..(r + 1) * k];
                let grow = &g[r * k..(r + 1) * k];
                let mut gsum = T::zero();
                for &gv in grow {
                    gsum += gv;
                }
                for ((o, &gv), &yv) in dx[r * k..(r + 1) * k].iter_mut().zip(grow).zip(yrow) {
                    *o = gv - yv.exp() * gsum;
                }
            }
            drop(y);
            add_grad(grads, input, dx);
        }
        Op::SquareChannelSum { input } => {
            let s = input.shape();
            let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
            let x = input.data();
            let two = T::from_f64(2.0);
            let mut dx = vec![T::zero(); input.numel()];
            for smp in 0..n {
                let grow = &g[smp * plane..(smp + 1) * plane];
                for ch in 0..c {
                    let base = (smp * c + ch) * plane;
                    for (i, &gv) in grow.iter().enumerate() {
                        dx[base + i] = two * x[base + i] * gv;
                    }
                }
            }
            drop(x);
            add_grad(grads, input, dx);
        }
        Op::PNormRowsMean { input, p, row_norms } => {
            let (n, d) = (input.shape()[0], input.shape()[1]);
            let x = input.data();
            let g0 = g[0] / T::from_f64(n as f64);
            let tiny = T::from_f64(1e-30);
            let mut dx = vec![T::zero(); input.numel()];
            match p {
                NormP::L1 => {
                    for (o, &xv) in dx.iter_mut().zip(x.iter()) {
                        *o = if xv > T::zero() {
                            g0
                        } else if xv < T::zero() {
                            -g0
                        } else {
                            T::zero()
                        };
                    }
                }
                NormP::L2 => {
                    for r in 0..n {
                        let norm = row_norms[r];
                        if norm <= tiny {
                            continue;
                        }
                        let coef = g0 / norm;
                        for (o, &xv) in dx[r * d..(r + 1) * d].iter_mut().zip(&x[r * d..(r + 1) * d]) {
                            *o = xv * coef;
                        }
                    }
                }
            }
            drop(x);
            add_grad(grads, input, dx);
        }
        Op::SqNormRowsMean { input } => {
            let n = input.shape()[0];
            let coef = g[0] * T::from_f64(2.0) / T::from_f64(n as f64);
            let x = input.data();
            let dx: Vec<T> = x.iter().map(|&v| v * coef).collect();
            drop(x);
            add_grad(grads, input, dx);
        }
        Op::CrossEntropy { logits, labels } => {
            let (n, k) = (logits.shape()[0], logits.shape()[1]);
            let sm = kernels::softmax_rows(&logits.data(), n, k, T::one());
            let coef = g[0] / T::from_f64(n as f64);
            let mut dx = sm;
            for (r, &y) in labels.iter().enumerate() {
                dx[r * k + y] -= T::one();
            }
            for v in dx.iter_mut() {
                *v *= coef;
            }
            add_grad(grads, logits, dx);
        }
        Op::KdLoss {
            student,
            teacher_probs,
            t,
        } => {
            let (n, k) = (student.shape()[0], student.shape()[1]);
            let t_t = *t;
            let scaled: Vec<T> = student.data().iter().map(|&v| v / t_t).collect();
            let q = kernels::softmax_rows(&scaled, n, k, T::one());
            let coef = g[0] * t_t / T::from_f64(n as f64);
            let dx: Vec<T> = q
                .iter()
                .zip(teacher_probs)
                .map(|(&qv, &pv)| (qv - pv) * coef)
                .collect();
            add_grad(grads, student, dx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_is_ones() {
        let x = Tensor::<f64>::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let loss = x.sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_backward() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::param(vec![5.0], &[1]).unwrap();
        let loss = x.scale(3.0);
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.scale(2.0);
        assert!(y.backward().is_err());
    }

    #[test]
    fn constant_loss_rejected() {
        let x = Tensor::<f64>::from_vec(vec![1.0], &[1]).unwrap();
        assert!(x.backward().is_err());
    }

    #[test]
    fn tape_is_topological_and_visits_once() {
        // Diamond: z = (x+x) * (x+1-ish) exercises shared subgraphs.
        let x = Tensor::<f64>::param(vec![2.0], &[1]).unwrap();
        let a = x.add(&x).unwrap();
        let b = a.mul(&a).unwrap();
        let loss = b.sum();
        let tape = Tape::record(&loss);
        assert!(tape.is_topological());
        // x, a, b, loss: four tracked nodes, each exactly once.
        assert_eq!(tape.len(), 4);
        loss.backward().unwrap();
        // d/dx (2x)^2 = 8x = 16
        assert_eq!(x.grad().unwrap(), vec![16.0]);
    }

    #[test]
    fn leaky_relu_gradient_cases() {
        let x = Tensor::<f64>::param(vec![-2.0, 3.0], &[2]).unwrap();
        let y = x.leaky_relu(0.1).unwrap();
        assert_eq!(y.to_vec(), vec![-0.2, 3.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.1, 1.0]);
    }

    #[test]
    fn frozen_leaf_is_constant() {
        let x = Tensor::<f64>::param(vec![1.0], &[1]).unwrap();
        x.set_requires_grad(false);
        let y = x.scale(2.0);
        assert!(y.is_leaf(), "op on constants should not record");
    }
}
