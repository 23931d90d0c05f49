//! Reverse-mode automatic differentiation on a gradient tape.
//!
//! Operations append nodes in execution order; each node stores its output
//! tensor and enough structure to replay the op backwards. [`GradTape::backward`]
//! walks the recorded nodes in reverse exactly once, accumulating adjoints.
//! A tape can run backward at most once; afterwards it only serves reads.
//!
//! The op set is deliberately small: dense affine maps, GeLU, L2
//! normalization, cosine similarity, concatenation, and the scalar glue
//! (stack / index / log-sum-exp / additive margin) needed to assemble
//! contrastive and angular-margin losses.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// y = W x, W is [out, in], x is [in].
    MatVec { w: ValueId, x: ValueId },
    /// Elementwise sum of two same-shape tensors.
    Add { a: ValueId, b: ValueId },
    /// Elementwise sum of n same-shape tensors.
    AddN { xs: Vec<ValueId> },
    /// Multiply every element by a constant.
    Scale { x: ValueId, c: f64 },
    /// Exact-erf GeLU, y_i = x_i * Phi(x_i).
    Gelu { x: ValueId },
    /// y = x / ||x||_2. Rejects the zero vector.
    L2Normalize { x: ValueId },
    /// Vector concatenation [a; b].
    Concat { a: ValueId, b: ValueId },
    /// Scalar dot product of two same-length vectors.
    Dot { a: ValueId, b: ValueId },
    /// Scalar sum of all elements.
    Sum { x: ValueId },
    /// Cosine similarity of two same-length vectors, clamped to [-1, 1].
    Cosine { a: ValueId, b: ValueId },
    /// Row r of a 2-D tensor, as a vector.
    Row { m: ValueId, r: usize },
    /// Pack scalar nodes into a vector.
    Stack { xs: Vec<ValueId> },
    /// Pick one element of a vector as a scalar.
    Index { x: ValueId, i: usize },
    /// Max-shifted log(sum(exp(x))) over a vector, as a scalar.
    LogSumExp { x: ValueId },
    /// Given c = cos(theta), produce cos(theta + margin) as a scalar.
    CosPlusMargin { c: ValueId, margin: f64 },
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
}

/// Adjoints produced by one backward pass, addressable by [`ValueId`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the given value, if the value
    /// influenced the loss.
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn standard_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Output tensor of a recorded node.
    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> Result<ValueId> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        tensor.check_finite("tape op output")?;
        self.nodes.push(Node { tensor, op });
        Ok(ValueId(self.nodes.len() - 1))
    }

    /// Records an input with no backward rule of its own.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<ValueId> {
        self.push(tensor, Op::Leaf)
    }

    /// Alias of [`GradTape::leaf`] for values whose gradients will be read.
    pub fn param(&mut self, tensor: Tensor) -> Result<ValueId> {
        self.leaf(tensor)
    }

    fn vector_len(&self, id: ValueId, context: &'static str) -> Result<usize> {
        let t = self.value(id);
        if t.shape().len() == 1 {
            Ok(t.shape()[0])
        } else {
            Err(Error::ShapeMismatch {
                context,
                expected: vec![0],
                found: t.shape().to_vec(),
            })
        }
    }

    pub fn matvec(&mut self, w: ValueId, x: ValueId) -> Result<ValueId> {
        let wshape = self.value(w).shape().to_vec();
        if wshape.len() != 2 {
            return Err(Error::ShapeMismatch {
                context: "matvec weight",
                expected: vec![0, 0],
                found: wshape,
            });
        }
        let n_in = self.vector_len(x, "matvec input")?;
        if wshape[1] != n_in {
            return Err(Error::ShapeMismatch {
                context: "matvec",
                expected: vec![wshape[0], n_in],
                found: wshape,
            });
        }
        let (rows, cols) = (wshape[0], wshape[1]);
        let (wt, xt) = (self.value(w), self.value(x));
        let mut out = vec![0.0; rows];
        for (r, slot) in out.iter_mut().enumerate() {
            let row = &wt.data()[r * cols..(r + 1) * cols];
            *slot = row.iter().zip(xt.data()).map(|(a, b)| a * b).sum();
        }
        self.push(Tensor::vector(out)?, Op::MatVec { w, x })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::ShapeMismatch {
                context: "add",
                expected: at.shape().to_vec(),
                found: bt.shape().to_vec(),
            });
        }
        let data: Vec<f64> = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let shape = at.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Add { a, b })
    }

    /// Sums n >= 1 same-shape values.
    pub fn add_n(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(Error::invalid("xs", "add_n needs at least one operand"));
        }
        let shape = self.value(xs[0]).shape().to_vec();
        let mut data = vec![0.0; self.value(xs[0]).numel()];
        for &x in xs {
            let xt = self.value(x);
            if xt.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    context: "add_n",
                    expected: shape,
                    found: xt.shape().to_vec(),
                });
            }
            for (d, v) in data.iter_mut().zip(xt.data()) {
                *d += v;
            }
        }
        self.push(Tensor::new(shape, data)?, Op::AddN { xs: xs.to_vec() })
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        if !c.is_finite() {
            return Err(Error::non_finite("scale constant"));
        }
        let xt = self.value(x);
        let data: Vec<f64> = xt.data().iter().map(|v| v * c).collect();
        let shape = xt.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Scale { x, c })
    }

    /// a - b for same-shape values.
    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    pub fn gelu(&mut self, x: ValueId) -> Result<ValueId> {
        let xt = self.value(x);
        let data: Vec<f64> = xt
            .data()
            .iter()
            .map(|&v| v * standard_normal_cdf(v))
            .collect();
        let shape = xt.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Gelu { x })
    }

    pub fn l2_normalize(&mut self, x: ValueId) -> Result<ValueId> {
        self.vector_len(x, "l2_normalize")?;
        let xt = self.value(x);
        let norm = xt.l2_norm();
        if norm == 0.0 {
            return Err(Error::invalid("x", "cannot L2-normalize the zero vector"));
        }
        let data: Vec<f64> = xt.data().iter().map(|v| v / norm).collect();
        self.push(Tensor::vector(data)?, Op::L2Normalize { x })
    }

    pub fn concat(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.vector_len(a, "concat")?;
        self.vector_len(b, "concat")?;
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        self.push(Tensor::vector(data)?, Op::Concat { a, b })
    }

    pub fn dot(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let la = self.vector_len(a, "dot")?;
        let lb = self.vector_len(b, "dot")?;
        if la != lb {
            return Err(Error::ShapeMismatch {
                context: "dot",
                expected: vec![la],
                found: vec![lb],
            });
        }
        let v = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        self.push(Tensor::scalar(v)?, Op::Dot { a, b })
    }

    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        let v = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(v)?, Op::Sum { x })
    }

    /// Cosine similarity of two nonzero vectors, clamped to [-1, 1].
    pub fn cosine(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let la = self.vector_len(a, "cosine")?;
        let lb = self.vector_len(b, "cosine")?;
        if la != lb {
            return Err(Error::ShapeMismatch {
                context: "cosine",
                expected: vec![la],
                found: vec![lb],
            });
        }
        let (at, bt) = (self.value(a), self.value(b));
        let (na, nb) = (at.l2_norm(), bt.l2_norm());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::invalid("a/b", "cosine of a zero vector is undefined"));
        }
        let dot: f64 = at.data().iter().zip(bt.data()).map(|(x, y)| x * y).sum();
        let c = (dot / (na * nb)).clamp(-1.0, 1.0);
        self.push(Tensor::scalar(c)?, Op::Cosine { a, b })
    }

    /// Extracts row `r` of a 2-D value as a vector node. Gradients scatter
    /// back into the source matrix.
    pub fn row(&mut self, m: ValueId, r: usize) -> Result<ValueId> {
        let data = self.value(m).row(r)?.to_vec();
        self.push(Tensor::vector(data)?, Op::Row { m, r })
    }

    /// Packs scalar nodes into one vector node.
    pub fn stack(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(Error::invalid("xs", "stack needs at least one scalar"));
        }
        let mut data = Vec::with_capacity(xs.len());
        for &x in xs {
            data.push(self.value(x).scalar_value()?);
        }
        self.push(Tensor::vector(data)?, Op::Stack { xs: xs.to_vec() })
    }

    pub fn index(&mut self, x: ValueId, i: usize) -> Result<ValueId> {
        let len = self.vector_len(x, "index")?;
        if i >= len {
            return Err(Error::invalid("i", format!("index {i} out of range {len}")));
        }
        let v = self.value(x).data()[i];
        self.push(Tensor::scalar(v)?, Op::Index { x, i })
    }

    /// log(sum_j exp(x_j)) over a vector, computed with max subtraction.
    pub fn log_sum_exp(&mut self, x: ValueId) -> Result<ValueId> {
        let len = self.vector_len(x, "log_sum_exp")?;
        if len == 0 {
            return Err(Error::invalid("x", "log_sum_exp of an empty vector"));
        }
        let xs = self.value(x).data();
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let v = m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        self.push(Tensor::scalar(v)?, Op::LogSumExp { x })
    }

    /// Additive angular margin applied to a scalar cosine:
    /// cos(acos(c) + margin) computed as c cos(m) - sqrt(1 - c^2) sin(m).
    pub fn cos_plus_margin(&mut self, c: ValueId, margin: f64) -> Result<ValueId> {
        let cv = self.value(c).scalar_value()?;
        if !(-1.0..=1.0).contains(&cv) {
            return Err(Error::invalid("c", format!("cosine {cv} outside [-1, 1]")));
        }
        let v = cv * margin.cos() - (1.0 - cv * cv).max(0.0).sqrt() * margin.sin();
        self.push(Tensor::scalar(v)?, Op::CosPlusMargin { c, margin })
    }

    /// Reverse pass from a scalar loss. Consumes the tape: a second call
    /// reports [`Error::TapeConsumed`].
    pub fn backward(&mut self, loss: ValueId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if !self.value(loss).is_scalar() {
            return Err(Error::ShapeMismatch {
                context: "backward seed",
                expected: vec![],
                found: self.value(loss).shape().to_vec(),
            });
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    adj[id] = Some(g);
                    continue;
                }
                Op::MatVec { w, x } => {
                    let (w, x) = (*w, *x);
                    let cols = self.value(x).numel();
                    let rows = g.len();
                    let xd = self.value(x).data().to_vec();
                    let wd = self.value(w).data().to_vec();
                    {
                        let gw = Self::adj_slot(&mut adj, w, rows * cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                gw[r * cols + c] += g[r] * xd[c];
                            }
                        }
                    }
                    let gx = Self::adj_slot(&mut adj, x, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[c] += g[r] * wd[r * cols + c];
                        }
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    Self::accumulate(&mut adj, a, &g);
                    Self::accumulate(&mut adj, b, &g);
                }
                Op::AddN { xs } => {
                    for &x in &xs.clone() {
                        Self::accumulate(&mut adj, x, &g);
                    }
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    let scaled: Vec<f64> = g.iter().map(|v| v * c).collect();
                    Self::accumulate(&mut adj, x, &scaled);
                }
                Op::Gelu { x } => {
                    let x = *x;
                    let xd = self.value(x).data();
                    let local: Vec<f64> = xd
                        .iter()
                        .zip(&g)
                        .map(|(&v, gv)| {
                            gv * (standard_normal_cdf(v) + v * standard_normal_pdf(v))
                        })
                        .collect();
                    Self::accumulate(&mut adj, x, &local);
                }
                Op::L2Normalize { x } => {
                    let x = *x;
                    let xd = self.value(x).data();
                    let norm = self.value(x).l2_norm();
                    let y: Vec<f64> = xd.iter().map(|v| v / norm).collect();
                    let gy: f64 = g.iter().zip(&y).map(|(a, b)| a * b).sum();
                    let local: Vec<f64> = g
                        .iter()
                        .zip(&y)
                        .map(|(gv, yv)| (gv - yv * gy) / norm)
                        .collect();
                    Self::accumulate(&mut adj, x, &local);
                }
                Op::Concat { a, b } => {
                    let (a, b) = (*a, *b);
                    let la = self.value(a).numel();
                    Self::accumulate(&mut adj, a, &g[..la]);
                    Self::accumulate(&mut adj, b, &g[la..]);
                }
                Op::Dot { a, b } => {
                    let (a, b) = (*a, *b);
                    let ad = self.value(a).data().to_vec();
                    let bd = self.value(b).data().to_vec();
                    let ga: Vec<f64> = bd.iter().map(|v| v * g[0]).collect();
                    let gb: Vec<f64> = ad.iter().map(|v| v * g[0]).collect();
                    Self::accumulate(&mut adj, a, &ga);
                    Self::accumulate(&mut adj, b, &gb);
                }
                Op::Sum { x } => {
                    let x = *x;
                    let local = vec![g[0]; self.value(x).numel()];
                    Self::accumulate(&mut adj, x, &local);
                }
                Op::Cosine { a, b } => {
                    let (a, b) = (*a, *b);
                    let ad = self.value(a).data();
                    let bd = self.value(b).data();
                    let (na, nb) = (self.value(a).l2_norm(), self.value(b).l2_norm());
                    let dot: f64 = ad.iter().zip(bd).map(|(x, y)| x * y).sum();
                    let c = dot / (na * nb);
                    let ga: Vec<f64> = ad
                        .iter()
                        .zip(bd)
                        .map(|(&av, &bv)| g[0] * (bv / (na * nb) - c * av / (na * na)))
                        .collect();
                    let gb: Vec<f64> = ad
                        .iter()
                        .zip(bd)
                        .map(|(&av, &bv)| g[0] * (av / (na * nb) - c * bv / (nb * nb)))
                        .collect();
                    Self::accumulate(&mut adj, a, &ga);
                    Self::accumulate(&mut adj, b, &gb);
                }
                Op::Row { m, r } => {
                    let (m, r) = (*m, *r);
                    let numel = self.value(m).numel();
                    let cols = g.len();
                    let slot = Self::adj_slot(&mut adj, m, numel);
                    for (c, gv) in g.iter().enumerate() {
                        slot[r * cols + c] += gv;
                    }
                }
                Op::Stack { xs } => {
                    for (k, &x) in xs.clone().iter().enumerate() {
                        Self::accumulate(&mut adj, x, &[g[k]]);
                    }
                }
                Op::Index { x, i } => {
                    let (x, i) = (*x, *i);
                    let mut local = vec![0.0; self.value(x).numel()];
                    local[i] = g[0];
                    Self::accumulate(&mut adj, x, &local);
                }
                Op::LogSumExp { x } => {
                    let x = *x;
                    let y = self.nodes[id].tensor.scalar_value()?;
                    let local: Vec<f64> = self
                        .value(x)
                        .data()
                        .iter()
                        .map(|&v| g[0] * (v - y).exp())
                        .collect();
                    Self::accumulate(&mut adj, x, &local);
                }
                Op::CosPlusMargin { c, margin } => {
                    let (c, margin) = (*c, *margin);
                    let cv = self.value(c).scalar_value()?;
                    // d/dc [c cos m - sqrt(1 - c^2) sin m]; the sqrt is floored
                    // to keep the adjoint finite at |c| = 1.
                    let s = (1.0 - cv * cv).max(1e-24).sqrt();
                    let local = g[0] * (margin.cos() + cv * margin.sin() / s);
                    Self::accumulate(&mut adj, c, &[local]);
                }
            }
        }

        let mut grads = Vec::with_capacity(self.nodes.len());
        for (id, slot) in adj.into_iter().enumerate() {
            match slot {
                Some(data) => {
                    let shape = self.nodes[id].tensor.shape().to_vec();
                    grads.push(Some(Tensor::new(shape, data).map_err(|_| {
                        Error::non_finite(format!("gradient of node {id}"))
                    })?));
                }
                None => grads.push(None),
            }
        }
        Ok(Gradients { grads })
    }

    fn adj_slot<'a>(adj: &'a mut [Option<Vec<f64>>], id: ValueId, len: usize) -> &'a mut Vec<f64> {
        adj[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn accumulate(adj: &mut [Option<Vec<f64>>], id: ValueId, grad: &[f64]) {
        let slot = adj[id.0].get_or_insert_with(|| vec![0.0; grad.len()]);
        for (s, g) in slot.iter_mut().zip(grad) {
            *s += g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, relative_l2_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
    }

    #[test]
    fn gelu_matches_erf_form() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 1.0, -2.0]).unwrap()).unwrap();
        let y = tape.gelu(x).unwrap();
        let out = tape.value(y).data();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 0.8413447460685429).abs() < 1e-12);
        assert!((out[2] - (-2.0 * standard_normal_cdf(-2.0))).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_unit_norm_and_zero_rejected() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]).unwrap()).unwrap();
        let y = tape.l2_normalize(x).unwrap();
        assert!((tape.value(y).l2_norm() - 1.0).abs() < 1e-15);
        assert_eq!(tape.value(y).data(), &[0.6, 0.8]);

        let z = tape.leaf(Tensor::vector(vec![0.0, 0.0]).unwrap()).unwrap();
        assert!(tape.l2_normalize(z).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        let mut tape = GradTape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 0.0]).unwrap()).unwrap();
        let b = tape.leaf(Tensor::vector(vec![0.0, 2.0]).unwrap()).unwrap();
        let c = tape.leaf(Tensor::vector(vec![3.0, 0.0]).unwrap()).unwrap();
        assert_eq!(tape.cosine(a, b).map(|id| tape.value(id).scalar_value().unwrap()).unwrap(), 0.0);
        assert_eq!(tape.cosine(a, c).map(|id| tape.value(id).scalar_value().unwrap()).unwrap(), 1.0);
    }

    #[test]
    fn quadratic_loss_gradient_is_identity() {
        // loss = 0.5 * ||x||^2, so d loss / dx = x.
        let xv = vec![0.5, -1.25, 2.0];
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::vector(xv.clone()).unwrap()).unwrap();
        let d = tape.dot(x, x).unwrap();
        let loss = tape.scale(d, 0.5).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), xv.as_slice());
    }

    #[test]
    fn backward_twice_errors() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::vector(vec![1.0]).unwrap()).unwrap();
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn log_sum_exp_stability_and_value() {
        let mut tape = GradTape::new();
        let x = tape
            .leaf(Tensor::vector(vec![705.0, 704.0, 700.0]).unwrap())
            .unwrap();
        let y = tape.log_sum_exp(x).unwrap();
        let expected = 705.0 + (1.0 + (-1.0f64).exp() + (-5.0f64).exp()).ln();
        assert!((tape.value(y).scalar_value().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn cos_plus_margin_matches_acos_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = GradTape::new();
        for _ in 0..100 {
            let c: f64 = rng.gen_range(-0.999..0.999);
            let m: f64 = rng.gen_range(0.0..0.5);
            let cid = tape.leaf(Tensor::scalar(c).unwrap()).unwrap();
            let y = tape.cos_plus_margin(cid, m).unwrap();
            let direct = (c.acos() + m).cos();
            assert!((tape.value(y).scalar_value().unwrap() - direct).abs() < 1e-9);
        }
        // Aligned case stays exact: c = 1 gives cos(margin).
        let one = tape.leaf(Tensor::scalar(1.0).unwrap()).unwrap();
        let y = tape.cos_plus_margin(one, 0.2).unwrap();
        assert_eq!(tape.value(y).scalar_value().unwrap(), 0.2f64.cos());
    }

    /// Every differentiable unary-ish op, checked against central finite
    /// differences on 100 seeded random inputs each.
    #[test]
    fn per_op_gradients_match_finite_differences() {
        type Build = fn(&mut GradTape, ValueId) -> ValueId;

        fn weighted(tape: &mut GradTape, y: ValueId) -> ValueId {
            let n = tape.value(y).numel();
            let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * i as f64).collect();
            let w = tape.leaf(Tensor::vector(w).unwrap()).unwrap();
            tape.dot(y, w).unwrap()
        }

        let cases: Vec<(&str, usize, Build)> = vec![
            ("gelu", 5, |t, x| {
                let y = t.gelu(x).unwrap();
                weighted(t, y)
            }),
            ("l2_normalize", 5, |t, x| {
                let y = t.l2_normalize(x).unwrap();
                weighted(t, y)
            }),
            ("log_sum_exp", 6, |t, x| t.log_sum_exp(x).unwrap()),
            ("sum_scale", 4, |t, x| {
                let s = t.sum(x).unwrap();
                t.scale(s, -1.75).unwrap()
            }),
        ];

        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for (name, dim, build) in &cases {
            for trial in 0..100 {
                let x = Tensor::vector(random_vec(&mut rng, *dim)).unwrap();
                let fd = finite_difference_gradient(
                    |t| {
                        let mut tape = GradTape::new();
                        let xid = tape.param(t.clone())?;
                        let loss = build(&mut tape, xid);
                        tape.value(loss).scalar_value()
                    },
                    &x,
                    1e-6,
                )
                .unwrap();

                let mut tape = GradTape::new();
                let xid = tape.param(x).unwrap();
                let loss = build(&mut tape, xid);
                let grads = tape.backward(loss).unwrap();
                let err = relative_l2_error(grads.get(xid).unwrap().data(), fd.data());
                assert!(err < 1e-5, "{name} trial {trial}: relative error {err:.3e}");
            }
        }
    }

    #[test]
    fn matvec_cosine_margin_chain_matches_finite_differences() {
        // One composite graph touching matvec, add, cosine, cos_plus_margin,
        // stack, index, and log_sum_exp: gradient checked on the weight matrix.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..100 {
            let w = Tensor::matrix(3, 4, random_vec(&mut rng, 12)).unwrap();
            let x = random_vec(&mut rng, 4);
            let b = random_vec(&mut rng, 3);
            let anchor = random_vec(&mut rng, 3);

            let eval = |wt: &Tensor| -> crate::error::Result<f64> {
                let mut tape = GradTape::new();
                let wid = tape.param(wt.clone())?;
                let xid = tape.leaf(Tensor::vector(x.clone())?)?;
                let bid = tape.leaf(Tensor::vector(b.clone())?)?;
                let aid = tape.leaf(Tensor::vector(anchor.clone())?)?;
                let y = tape.matvec(wid, xid)?;
                let y = tape.add(y, bid)?;
                let c = tape.cosine(y, aid)?;
                let cm = tape.cos_plus_margin(c, 0.2)?;
                let c2 = tape.scale(c, 0.7)?;
                let v = tape.stack(&[cm, c2])?;
                let lse = tape.log_sum_exp(v)?;
                let picked = tape.index(v, 0)?;
                let negp = tape.scale(picked, -1.0)?;
                let out = tape.add_n(&[lse, negp])?;
                tape.value(out).scalar_value()
            };

            let fd = finite_difference_gradient(|t| eval(t), &w, 1e-6).unwrap();

            let mut tape = GradTape::new();
            let wid = tape.param(w.clone()).unwrap();
            let xid = tape.leaf(Tensor::vector(x.clone()).unwrap()).unwrap();
            let bid = tape.leaf(Tensor::vector(b.clone()).unwrap()).unwrap();
            let aid = tape.leaf(Tensor::vector(anchor.clone()).unwrap()).unwrap();
            let y = tape.matvec(wid, xid).unwrap();
            let y = tape.add(y, bid).unwrap();
            let c = tape.cosine(y, aid).unwrap();
            let cm = tape.cos_plus_margin(c, 0.2).unwrap();
            let c2 = tape.scale(c, 0.7).unwrap();
            let v = tape.stack(&[cm, c2]).unwrap();
            let lse = tape.log_sum_exp(v).unwrap();
            let picked = tape.index(v, 0).unwrap();
            let negp = tape.scale(picked, -1.0).unwrap();
            let out = tape.add_n(&[lse, negp]).unwrap();
            let grads = tape.backward(out).unwrap();
            let ad = grads.get(wid).unwrap();

            let err = relative_l2_error(ad.data(), fd.data());
            assert!(err < 1e-5, "trial {trial}: relative error {err:.3e}");
        }
    }

    #[test]
    fn row_scatters_gradient_into_matrix() {
        let mut tape = GradTape::new();
        let m = tape
            .param(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let r1 = tape.row(m, 1).unwrap();
        assert_eq!(tape.value(r1).data(), &[3.0, 4.0]);
        let loss = tape.sum(r1).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(m).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_routes_gradients_to_both_halves() {
        let mut tape = GradTape::new();
        let a = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let b = tape.param(Tensor::vector(vec![3.0]).unwrap()).unwrap();
        let y = tape.concat(a, b).unwrap();
        let w = tape.leaf(Tensor::vector(vec![10.0, 20.0, 30.0]).unwrap()).unwrap();
        let loss = tape.dot(y, w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[10.0, 20.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[30.0]);
    }
}
