//! Dense f32 tensors with reverse-mode automatic differentiation on a
//! Wengert tape. Covers exactly the primitives the fully connected
//! networks and losses need; no convolutions, no broadcasting beyond
//! row-wise bias addition.
//!
//! Reductions and the stable loss kernels accumulate in f64 and cast the
//! result back to f32.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("{n} elements for shape {shape:?}"),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Fan-in scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows/cols of a rank-2 view. Rank-1 tensors are treated as one row.
    fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols, cols)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    /// a * b^T
    MatMulNT(TensorId, TensorId),
    AddBias(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f32),
    Relu(TensorId),
    Sigmoid(TensorId),
    Dropout(TensorId, Vec<f32>),
    LogSoftmaxRows(TensorId),
    L2NormalizeRows(TensorId),
    Sum(TensorId),
    Mean(TensorId),
    Gather(TensorId, Vec<usize>),
    Reshape(TensorId),
    BceWithLogits {
        logits: TensorId,
        targets: Vec<f32>,
        weights: Vec<f32>,
        pos_weights: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode gradient record. Operations append nodes in topological
/// order; `backward` walks them once in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by `Tape::backward`.
pub struct Gradients {
    grads: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> &[f32] {
        &self.grads[id.0]
    }
}

fn sigmoid_stable(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// softplus(x) = ln(1 + e^x), computed as max(x,0) + ln(1 + e^{-|x|}).
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { value, op });
        TensorId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.value(a).rows_cols();
        let (k2, n) = self.value(b).rows_cols();
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents equal ({m}x{k} * ?x{n})"),
                format!("{k2}x{n}"),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += x * brow[j];
                }
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// a (m x k) times b^T (b is n x k), giving m x n.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.value(a).rows_cols();
        let (n, k2) = self.value(b).rows_cols();
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("{m}x{k} * ({k}xN)^T"),
                format!("({n}x{k2})^T"),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += arow[p] * brow[p];
                }
                out[i * n + j] = acc;
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMulNT(a, b)))
    }

    /// Row-broadcast bias: x (n x d) + b (d).
    pub fn add_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, d) = self.value(x).rows_cols();
        if self.value(b).len() != d {
            return Err(Error::shape(
                "add_bias",
                format!("bias of length {d}"),
                format!("{}", self.value(b).len()),
            ));
        }
        let xv = self.value(x).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0f32; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = xv[i * d + j] + bv[j];
            }
        }
        let t = Tensor::matrix(n, d, out)?;
        Ok(self.push(t, Op::AddBias(x, b)))
    }

    /// Affine layer: x (n x in) mapped through W (out x in) and bias b (out),
    /// i.e. x W^T + b row-wise.
    pub fn affine(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let y = self.matmul_nt(x, w)?;
        self.add_bias(y, b)
    }

    fn elementwise(&mut self, a: TensorId, b: TensorId, context: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                context,
                format!("{:?}", self.value(a).shape()),
                format!("{:?}", self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: TensorId, c: f32) -> TensorId {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let t = Tensor {
            shape: self.value(x).shape().to_vec(),
            data,
        };
        self.push(t, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor {
            shape: self.value(x).shape().to_vec(),
            data,
        };
        self.push(t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data = self.value(x).data().iter().map(|&v| sigmoid_stable(v)).collect();
        let t = Tensor {
            shape: self.value(x).shape().to_vec(),
            data,
        };
        self.push(t, Op::Sigmoid(x))
    }

    /// Inverted dropout: in training, each element is zeroed with probability
    /// `rate` and survivors scaled by 1/(1-rate); eval mode is identity.
    pub fn dropout(&mut self, x: TensorId, rate: f32, rng: &mut Rng, training: bool) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            let t = self.value(x).clone();
            return Ok(self.push(t, Op::Reshape(x)));
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = self
            .value(x)
            .data()
            .iter()
            .map(|_| if rng.next_f32() < rate { 0.0 } else { keep_scale })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let t = Tensor {
            shape: self.value(x).shape().to_vec(),
            data,
        };
        Ok(self.push(t, Op::Dropout(x, mask)))
    }

    /// Row-wise log-softmax via max shift.
    pub fn log_softmax_rows(&mut self, x: TensorId) -> TensorId {
        let (n, d) = self.value(x).rows_cols();
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; n * d];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut lse = 0.0f64;
            for &v in row {
                lse += ((v - mx) as f64).exp();
            }
            let lse = lse.ln() + mx as f64;
            for j in 0..d {
                out[i * d + j] = (row[j] as f64 - lse) as f32;
            }
        }
        let t = Tensor {
            shape: self.value(x).shape().to_vec(),
            data: out,
        };
        self.push(t, Op::LogSoftmaxRows(x))
    }

    /// Row-wise l2 normalization. A zero-norm row is a degenerate input.
    pub fn l2_normalize_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, d) = self.value(x).rows_cols();
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; n * d];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let norm = (row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()).sqrt() as f32;
            if norm == 0.0 {
                return Err(Error::DegenerateInput(format!(
                    "l2_normalize of zero vector (row {i})"
                )));
            }
            for j in 0..d {
                out[i * d + j] = row[j] / norm;
            }
        }
        let t = Tensor {
            shape: self.value(x).shape().to_vec(),
            data: out,
        };
        Ok(self.push(t, Op::L2NormalizeRows(x)))
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x))
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.value(x).len();
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar((s / n as f64) as f32), Op::Mean(x))
    }

    /// Pick flat elements by index, producing a vector.
    pub fn gather(&mut self, x: TensorId, indices: Vec<usize>) -> Result<TensorId> {
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len());
        for &i in &indices {
            let v = xv.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("gather index {i} out of range {}", xv.len()))
            })?;
            out.push(*v);
        }
        let t = Tensor::new(vec![indices.len()], out)?;
        Ok(self.push(t, Op::Gather(x, indices)))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", self.value(x).len()),
                format!("{shape:?}"),
            ));
        }
        let t = Tensor {
            shape,
            data: self.value(x).data().to_vec(),
        };
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Weighted binary cross-entropy with logits, mean over all n*C terms,
    /// in the stable softplus form. `targets` must be 0/1, `weights` and
    /// `pos_weights` are per-element / per-element positive-class weights
    /// (already broadcast to the logits' length).
    pub fn bce_with_logits(
        &mut self,
        logits: TensorId,
        targets: Vec<f32>,
        weights: Vec<f32>,
        pos_weights: Vec<f32>,
    ) -> Result<TensorId> {
        let n = self.value(logits).len();
        if targets.len() != n || weights.len() != n || pos_weights.len() != n {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{n} targets/weights"),
                format!("{}/{}/{}", targets.len(), weights.len(), pos_weights.len()),
            ));
        }
        if targets.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidArgument(
                "bce_with_logits targets must be binary".into(),
            ));
        }
        let xv = self.value(logits).data();
        let mut acc = 0.0f64;
        for i in 0..n {
            let x = xv[i] as f64;
            let y = targets[i] as f64;
            let w = weights[i] as f64;
            let p = pos_weights[i] as f64;
            acc += w * (p * y * softplus(-x) + (1.0 - y) * softplus(x));
        }
        let loss = (acc / n as f64) as f32;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets,
                weights,
                pos_weights,
            },
        ))
    }

    /// Reverse pass from a scalar loss. Every node unreachable from the loss
    /// keeps a zero gradient.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Vec<f32>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[loss.0][0] = 1.0;

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            // Skip untouched nodes cheaply.
            if grads[idx].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g_out = grads[idx].clone();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).rows_cols();
                    let (_, n) = self.value(*b).rows_cols();
                    let av = self.value(*a).data().to_vec();
                    let bv = self.value(*b).data().to_vec();
                    {
                        let ga = &mut grads[a.0];
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0f32;
                                for j in 0..n {
                                    acc += g_out[i * n + j] * bv[p * n + j];
                                }
                                ga[i * k + p] += acc;
                            }
                        }
                    }
                    {
                        let gb = &mut grads[b.0];
                        for p in 0..k {
                            for j in 0..n {
                                let mut acc = 0.0f32;
                                for i in 0..m {
                                    acc += av[i * k + p] * g_out[i * n + j];
                                }
                                gb[p * n + j] += acc;
                            }
                        }
                    }
                }
                Op::MatMulNT(a, b) => {
                    // c = a b^T, a: m x k, b: n x k, c: m x n
                    let (m, k) = self.value(*a).rows_cols();
                    let (n, _) = self.value(*b).rows_cols();
                    let av = self.value(*a).data().to_vec();
                    let bv = self.value(*b).data().to_vec();
                    {
                        let ga = &mut grads[a.0];
                        for i in 0..m {
                            for j in 0..n {
                                let g = g_out[i * n + j];
                                if g == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    ga[i * k + p] += g * bv[j * k + p];
                                }
                            }
                        }
                    }
                    {
                        let gb = &mut grads[b.0];
                        for i in 0..m {
                            for j in 0..n {
                                let g = g_out[i * n + j];
                                if g == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    gb[j * k + p] += g * av[i * k + p];
                                }
                            }
                        }
                    }
                }
                Op::AddBias(x, b) => {
                    let (n, d) = self.value(*x).rows_cols();
                    {
                        let gx = &mut grads[x.0];
                        for (gi, go) in gx.iter_mut().zip(&g_out) {
                            *gi += go;
                        }
                    }
                    {
                        let gb = &mut grads[b.0];
                        for i in 0..n {
                            for j in 0..d {
                                gb[j] += g_out[i * d + j];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (gi, go) in grads[a.0].iter_mut().zip(&g_out) {
                        *gi += go;
                    }
                    for (gi, go) in grads[b.0].iter_mut().zip(&g_out) {
                        *gi += go;
                    }
                }
                Op::Sub(a, b) => {
                    for (gi, go) in grads[a.0].iter_mut().zip(&g_out) {
                        *gi += go;
                    }
                    for (gi, go) in grads[b.0].iter_mut().zip(&g_out) {
                        *gi -= go;
                    }
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data().to_vec();
                    let bv = self.value(*b).data().to_vec();
                    for i in 0..g_out.len() {
                        grads[a.0][i] += g_out[i] * bv[i];
                    }
                    for i in 0..g_out.len() {
                        grads[b.0][i] += g_out[i] * av[i];
                    }
                }
                Op::Scale(x, c) => {
                    for (gi, go) in grads[x.0].iter_mut().zip(&g_out) {
                        *gi += go * c;
                    }
                }
                Op::Relu(x) => {
                    // Subgradient at exactly 0 fixed to 0.
                    let xv = self.value(*x).data().to_vec();
                    for i in 0..g_out.len() {
                        if xv[i] > 0.0 {
                            grads[x.0][i] += g_out[i];
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let yv = node.value.data().to_vec();
                    for i in 0..g_out.len() {
                        grads[x.0][i] += g_out[i] * yv[i] * (1.0 - yv[i]);
                    }
                }
                Op::Dropout(x, mask) => {
                    let mask = mask.clone();
                    for i in 0..g_out.len() {
                        grads[x.0][i] += g_out[i] * mask[i];
                    }
                }
                Op::LogSoftmaxRows(x) => {
                    let (n, d) = self.value(*x).rows_cols();
                    let yv = node.value.data().to_vec();
                    let gx = &mut grads[x.0];
                    for i in 0..n {
                        let gsum: f64 = g_out[i * d..(i + 1) * d].iter().map(|&g| g as f64).sum();
                        for j in 0..d {
                            let sm = (yv[i * d + j] as f64).exp();
                            gx[i * d + j] += (g_out[i * d + j] as f64 - sm * gsum) as f32;
                        }
                    }
                }
                Op::L2NormalizeRows(x) => {
                    let (n, d) = self.value(*x).rows_cols();
                    let xv = self.value(*x).data().to_vec();
                    let yv = node.value.data().to_vec();
                    let gx = &mut grads[x.0];
                    for i in 0..n {
                        let row = &xv[i * d..(i + 1) * d];
                        let norm =
                            (row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()).sqrt();
                        let ydotg: f64 = (0..d)
                            .map(|j| yv[i * d + j] as f64 * g_out[i * d + j] as f64)
                            .sum();
                        for j in 0..d {
                            gx[i * d + j] +=
                                ((g_out[i * d + j] as f64 - yv[i * d + j] as f64 * ydotg) / norm)
                                    as f32;
                        }
                    }
                }
                Op::Sum(x) => {
                    let g = g_out[0];
                    for gi in grads[x.0].iter_mut() {
                        *gi += g;
                    }
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    let g = g_out[0] / n as f32;
                    for gi in grads[x.0].iter_mut() {
                        *gi += g;
                    }
                }
                Op::Gather(x, indices) => {
                    let indices = indices.clone();
                    for (pos, &i) in indices.iter().enumerate() {
                        grads[x.0][i] += g_out[pos];
                    }
                }
                Op::Reshape(x) => {
                    for (gi, go) in grads[x.0].iter_mut().zip(&g_out) {
                        *gi += go;
                    }
                }
                Op::BceWithLogits {
                    logits,
                    targets,
                    weights,
                    pos_weights,
                } => {
                    let xv = self.value(*logits).data().to_vec();
                    let n = xv.len();
                    let g = g_out[0] / n as f32;
                    let (targets, weights, pos_weights) =
                        (targets.clone(), weights.clone(), pos_weights.clone());
                    let gx = &mut grads[logits.0];
                    for i in 0..n {
                        let s = sigmoid_stable(xv[i]);
                        let y = targets[i];
                        let w = weights[i];
                        let p = pos_weights[i];
                        // d/dx of w*(p*y*softplus(-x) + (1-y)*softplus(x))
                        gx[i] += g * w * (s * (1.0 - y + p * y) - p * y);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}
