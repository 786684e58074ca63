//! Wengert tape: reverse-mode automatic differentiation by operation recording.
//!
//! The forward pass appends one [`Op`] per executed operation to a linear
//! record; [`Tape::backward`] replays the record in reverse, applying each
//! operation's vector-Jacobian rule. Construction order makes the record
//! topological, so a single reverse sweep visits every node exactly once.
//!
//! Element storage follows the crate-wide precision rule: every stored value
//! is representable in 32-bit IEEE-754, while all inner products, reductions
//! and moment computations accumulate in 64-bit. [`Precision::Double`]
//! disables the 32-bit rounding; it exists for the finite-difference oracles,
//! which need forward evaluations whose noise floor sits well below the
//! gradient tolerance being checked.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor applied to `log` inputs; bounds every cross-entropy term.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a specific tape. Only meaningful for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Pooling selector for [`Tape::conv2d_pool`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    None,
    /// 2x2 average pooling with stride 2; requires even spatial dims.
    Avg2,
}

/// Working precision of a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// Values are rounded to f32 after every operation (training mode).
    Single,
    /// Full f64 throughout (finite-difference oracle mode).
    Double,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddRowVec(Var, Var),
    Matmul(Var, Var),
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
    },
    AvgPool2(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogClamped(Var),
    Sum(Var),
    Mean(Var),
    MeanPerColumn(Var),
    Reshape(Var),
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    SelectColumn {
        input: Var,
        column: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Ordered record of differentiable operations plus their value buffers.
///
/// A tape is single-threaded: one training step builds and consumes one tape.
/// Repeated `backward` calls accumulate gradients; there is no implicit reset.
pub struct Tape {
    precision: Precision,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_precision(Precision::Single)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            precision,
            nodes: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    #[inline]
    fn store(&self, x: f64) -> f64 {
        match self.precision {
            Precision::Single => x as f32 as f64,
            Precision::Double => x,
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::invalid(format!(
                "variable #{} is not on this tape ({} nodes)",
                v.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    // ── Inputs ───────────────────────────────────────────────────────

    /// Registers a tensor as a tracked leaf. Its gradient can be read back
    /// after `backward` via [`Tape::grad`] or [`Tape::add_grad_to`].
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let values = t.values().iter().map(|&x| x as f64).collect();
        self.push(t.shape().to_vec(), values, Op::Input)
    }

    /// Registers data that participates in the forward pass but whose
    /// gradient is never consumed (labels, masks, detached features).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t)
    }

    pub fn constant_values(&mut self, shape: &[usize], values: &[f32]) -> Result<Var> {
        let t = Tensor::from_slice(shape, values)?;
        Ok(self.constant(&t))
    }

    /// A rank-1 single-element constant, broadcastable in elementwise ops.
    pub fn scalar_const(&mut self, value: f32) -> Var {
        let t = Tensor::scalar(value);
        self.constant(&t)
    }

    // ── Introspection ────────────────────────────────────────────────

    pub fn shape_of(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].values.len()
    }

    /// Forward value of a node, rounded to storage precision.
    pub fn value(&self, v: Var) -> Vec<f32> {
        self.nodes[v.0].values.iter().map(|&x| x as f32).collect()
    }

    pub fn value_f64(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.value(v)).expect("tape node is valid")
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.check(v)?;
        let n = &self.nodes[v.0];
        if n.values.len() != 1 {
            return Err(Error::invalid(format!(
                "expected scalar, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.values[0])
    }

    /// Gradient of a node if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<Vec<f32>> {
        self.nodes[v.0]
            .grad
            .as_ref()
            .map(|g| g.iter().map(|&x| x as f32).collect())
    }

    pub fn grad_f64(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Materializes the gradient of a leaf onto its owning tensor,
    /// accumulating into any gradient already present.
    pub fn add_grad_to(&self, v: Var, target: &mut Tensor) -> Result<()> {
        self.check(v)?;
        let node = &self.nodes[v.0];
        if node.shape != target.shape() {
            return Err(Error::ShapeMismatch {
                left: node.shape.clone(),
                right: target.shape().to_vec(),
                context: "add_grad_to",
            });
        }
        match &node.grad {
            Some(g) => {
                let g32: Vec<f32> = g.iter().map(|&x| x as f32).collect();
                target.accumulate_grad(&g32)
            }
            None => Ok(()), // no gradient flowed here: contribution is zero
        }
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn binary_shapes(&self, a: Var, b: Var, context: &'static str) -> Result<BinaryKind> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa == sb {
            Ok(BinaryKind::Matched)
        } else if self.nodes[b.0].values.len() == 1 {
            Ok(BinaryKind::ScalarRhs)
        } else {
            Err(Error::ShapeMismatch {
                left: sa.clone(),
                right: sb.clone(),
                context,
            })
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let kind = self.binary_shapes(a, b, context)?;
        let out: Vec<f64> = match kind {
            BinaryKind::Matched => self.nodes[a.0]
                .values
                .iter()
                .zip(&self.nodes[b.0].values)
                .map(|(&x, &y)| self.store(f(x, y)))
                .collect(),
            BinaryKind::ScalarRhs => {
                let y = self.nodes[b.0].values[0];
                self.nodes[a.0]
                    .values
                    .iter()
                    .map(|&x| self.store(f(x, y)))
                    .collect()
            }
        };
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, op(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// Elementwise division. Division by zero is recorded, not masked; the
    /// resulting non-finite values surface in downstream finiteness checks.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.nodes[a.0].values.iter().map(|&x| -x).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, Op::Neg(a)))
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        self.check(a)?;
        let c = c as f64;
        let out = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| self.store(x * c))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, Op::Scale(a, c)))
    }

    /// Adds a length-D vector to every row of an [N, D] matrix (bias add).
    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        self.check(a)?;
        self.check(v)?;
        let sa = self.nodes[a.0].shape.clone();
        let sv = &self.nodes[v.0].shape;
        if sa.len() != 2 || sv.len() != 1 || sv[0] != sa[1] {
            return Err(Error::ShapeMismatch {
                left: sa,
                right: sv.clone(),
                context: "add_row_vec",
            });
        }
        let (rows, cols) = (sa[0], sa[1]);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(self.store(
                    self.nodes[a.0].values[r * cols + c] + self.nodes[v.0].values[c],
                ));
            }
        }
        Ok(self.push(sa, out, Op::AddRowVec(a, v)))
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// Rank-2 matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                left: sa,
                right: sb,
                context: "matmul",
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += av[i * k + p] * bv[p * n + j];
                }
                out[i * n + j] = self.store(acc);
            }
        }
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b)))
    }

    // ── Convolution ──────────────────────────────────────────────────

    /// 3x3 convolution, stride 1, zero padding 1 (spatial size preserved),
    /// optionally followed by 2x2 average pooling.
    ///
    /// `input`: [N, C, H, W], `kernels`: [F, C, 3, 3], `bias`: [F].
    pub fn conv2d_pool(&mut self, input: Var, kernels: Var, bias: Var, pool: Pool) -> Result<Var> {
        let conv = self.conv2d(input, kernels, bias)?;
        match pool {
            Pool::None => Ok(conv),
            Pool::Avg2 => self.avg_pool2(conv),
        }
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        self.check(input)?;
        self.check(kernels)?;
        self.check(bias)?;
        let si = self.nodes[input.0].shape.clone();
        let sk = self.nodes[kernels.0].shape.clone();
        let sb = self.nodes[bias.0].shape.clone();
        if si.len() != 4 {
            return Err(Error::invalid(format!(
                "conv2d input must be [N,C,H,W], got {si:?}"
            )));
        }
        if sk.len() != 4 || sk[2] != 3 || sk[3] != 3 || sk[1] != si[1] {
            return Err(Error::ShapeMismatch {
                left: si,
                right: sk,
                context: "conv2d kernels (expect [F,C,3,3])",
            });
        }
        if sb.len() != 1 || sb[0] != sk[0] {
            return Err(Error::ShapeMismatch {
                left: sk,
                right: sb,
                context: "conv2d bias (expect [F])",
            });
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        if h < 3 || w < 3 {
            return Err(Error::invalid(format!(
                "conv2d spatial dims must be >= 3, got {h}x{w}"
            )));
        }
        let f = sk[0];
        let iv = &self.nodes[input.0].values;
        let kv = &self.nodes[kernels.0].values;
        let bv = &self.nodes[bias.0].values;
        let mut out = vec![0.0f64; n * f * h * w];
        for ni in 0..n {
            for fi in 0..f {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = bv[fi];
                        for ci in 0..c {
                            for dy in 0..3usize {
                                let iy = y as isize + dy as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for dx in 0..3usize {
                                    let ix = x as isize + dx as isize - 1;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let iidx = ((ni * c + ci) * h + iy as usize) * w + ix as usize;
                                    let kidx = ((fi * c + ci) * 3 + dy) * 3 + dx;
                                    acc += iv[iidx] * kv[kidx];
                                }
                            }
                        }
                        out[((ni * f + fi) * h + y) * w + x] = self.store(acc);
                    }
                }
            }
        }
        Ok(self.push(
            vec![n, f, h, w],
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
            },
        ))
    }

    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let si = self.nodes[input.0].shape.clone();
        if si.len() != 4 {
            return Err(Error::invalid(format!(
                "avg_pool2 input must be [N,C,H,W], got {si:?}"
            )));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(format!(
                "avg_pool2 requires even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let iv = &self.nodes[input.0].values;
        let mut out = vec![0.0f64; n * c * oh * ow];
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let base = (ni * c + ci) * h;
                        let acc = iv[(base + 2 * y) * w + 2 * x]
                            + iv[(base + 2 * y) * w + 2 * x + 1]
                            + iv[(base + 2 * y + 1) * w + 2 * x]
                            + iv[(base + 2 * y + 1) * w + 2 * x + 1];
                        out[((ni * c + ci) * oh + y) * ow + x] = self.store(acc * 0.25);
                    }
                }
            }
        }
        Ok(self.push(vec![n, c, oh, ow], out, Op::AvgPool2(input)))
    }

    // ── Activations ──────────────────────────────────────────────────

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.nodes[a.0].values.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, Op::Relu(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| self.store(x.tanh()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, Op::Tanh(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| self.store(stable_sigmoid(x)))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, Op::Sigmoid(a)))
    }

    /// Row-wise softmax of a rank-2 tensor, computed with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::invalid(format!(
                "softmax_rows requires rank 2, got {shape:?}"
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0f64; rows * cols];
        for r in 0..rows {
            let row = &av[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0f64;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                out[r * cols + c] = e;
                denom += e;
            }
            for c in 0..cols {
                out[r * cols + c] = self.store(out[r * cols + c] / denom);
            }
        }
        Ok(self.push(shape, out, Op::SoftmaxRows(a)))
    }

    /// `ln(max(x, 1e-12))`. Gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| self.store(x.max(LOG_FLOOR).ln()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, Op::LogClamped(a)))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let acc: f64 = self.nodes[a.0].values.iter().sum();
        let v = self.store(acc);
        Ok(self.push(vec![1], vec![v], Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let n = self.nodes[a.0].values.len();
        let acc: f64 = self.nodes[a.0].values.iter().sum();
        let v = self.store(acc / n as f64);
        Ok(self.push(vec![1], vec![v], Op::Mean(a)))
    }

    /// Column means of a rank-2 tensor: `[R, C] -> [C]`.
    pub fn mean_per_column(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::invalid(format!(
                "mean_per_column requires rank 2, got {shape:?}"
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0f64; cols];
        for c in 0..cols {
            let mut acc = 0.0f64;
            for r in 0..rows {
                acc += av[r * cols + c];
            }
            out[c] = self.store(acc / rows as f64);
        }
        Ok(self.push(vec![cols], out, Op::MeanPerColumn(a)))
    }

    // ── Structural ───────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(a)?;
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != self.nodes[a.0].values.len() {
            return Err(Error::ShapeMismatch {
                left: self.nodes[a.0].shape.clone(),
                right: shape,
                context: "reshape",
            });
        }
        let values = self.nodes[a.0].values.clone();
        Ok(self.push(shape, values, Op::Reshape(a)))
    }

    /// Gathers rows of an [N, D] matrix; duplicates allowed. Gradients
    /// scatter-add back to the source rows.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.check(a)?;
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::invalid(format!(
                "gather_rows requires rank 2, got {shape:?}"
            )));
        }
        if rows.is_empty() {
            return Err(Error::invalid("gather_rows: empty row selection"));
        }
        let (n, d) = (shape[0], shape[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::invalid(format!(
                "gather_rows: row {bad} out of range for {n} rows"
            )));
        }
        let av = &self.nodes[a.0].values;
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&av[r * d..(r + 1) * d]);
        }
        Ok(self.push(
            vec![rows.len(), d],
            out,
            Op::GatherRows {
                input: a,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Extracts one column of an [N, D] matrix as a length-N vector.
    pub fn select_column(&mut self, a: Var, column: usize) -> Result<Var> {
        self.check(a)?;
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 2 || column >= shape[1] {
            return Err(Error::invalid(format!(
                "select_column: column {column} invalid for shape {shape:?}"
            )));
        }
        let (n, d) = (shape[0], shape[1]);
        let av = &self.nodes[a.0].values;
        let out = (0..n).map(|r| av[r * d + column]).collect();
        Ok(self.push(vec![n], out, Op::SelectColumn { input: a, column }))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Replays the record in reverse, accumulating `d loss / d node` into
    /// every node reachable from `loss`. The loss must be a single-element
    /// node produced through this tape.
    ///
    /// Each call propagates its own unit seed, so calling backward twice
    /// doubles every gradient; the trainer zeroes tensors between steps.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut work: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        work[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if work[i].is_none() {
                continue;
            }
            self.backward_op(i, &mut work);
        }
        let precision = self.precision;
        for (i, w) in work.into_iter().enumerate() {
            if let Some(w) = w {
                let node = &mut self.nodes[i];
                let grad = node.grad.get_or_insert_with(|| vec![0.0; node.values.len()]);
                for (g, d) in grad.iter_mut().zip(&w) {
                    let acc = *g + d;
                    *g = match precision {
                        Precision::Single => acc as f32 as f64,
                        Precision::Double => acc,
                    };
                }
            }
        }
        Ok(())
    }

    /// Adds `delta` to the workspace gradient of `v`, rounding per mode.
    fn seed_work(&self, work: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        let n = self.nodes[v.0].values.len();
        debug_assert_eq!(delta.len(), n);
        let grad = work[v.0].get_or_insert_with(|| vec![0.0; n]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = self.store(*g + d);
        }
    }

    fn backward_op(&self, idx: usize, work: &mut [Option<Vec<f64>>]) {
        let dout = work[idx].clone().expect("workspace grad present");
        let op = &self.nodes[idx].op;
        match *op {
            Op::Input => {}
            Op::Add(a, b) => {
                self.seed_work(work, a, &dout);
                self.accumulate_rhs(work, b, &dout, 1.0);
            }
            Op::Sub(a, b) => {
                self.seed_work(work, a, &dout);
                self.accumulate_rhs(work, b, &dout, -1.0);
            }
            Op::Mul(a, b) => {
                if self.nodes[b.0].values.len() == 1 && self.nodes[a.0].values.len() != 1 {
                    let y = self.nodes[b.0].values[0];
                    let da: Vec<f64> = dout.iter().map(|d| self.store(d * y)).collect();
                    self.seed_work(work, a, &da);
                    let db: f64 = dout
                        .iter()
                        .zip(&self.nodes[a.0].values)
                        .map(|(d, &x)| d * x)
                        .sum();
                    self.seed_work(work, b, &[self.store(db)]);
                } else {
                    let da: Vec<f64> = dout
                        .iter()
                        .zip(&self.nodes[b.0].values)
                        .map(|(d, &y)| self.store(d * y))
                        .collect();
                    let db: Vec<f64> = dout
                        .iter()
                        .zip(&self.nodes[a.0].values)
                        .map(|(d, &x)| self.store(d * x))
                        .collect();
                    self.seed_work(work, a, &da);
                    self.seed_work(work, b, &db);
                }
            }
            Op::Div(a, b) => {
                if self.nodes[b.0].values.len() == 1 && self.nodes[a.0].values.len() != 1 {
                    let y = self.nodes[b.0].values[0];
                    let da: Vec<f64> = dout.iter().map(|d| self.store(d / y)).collect();
                    self.seed_work(work, a, &da);
                    let db: f64 = dout
                        .iter()
                        .zip(&self.nodes[a.0].values)
                        .map(|(d, &x)| -d * x / (y * y))
                        .sum();
                    self.seed_work(work, b, &[self.store(db)]);
                } else {
                    let da: Vec<f64> = dout
                        .iter()
                        .zip(&self.nodes[b.0].values)
                        .map(|(d, &y)| self.store(d / y))
                        .collect();
                    let db: Vec<f64> = dout
                        .iter()
                        .zip(self.nodes[a.0].values.iter().zip(&self.nodes[b.0].values))
                        .map(|(d, (&x, &y))| self.store(-d * x / (y * y)))
                        .collect();
                    self.seed_work(work, a, &da);
                    self.seed_work(work, b, &db);
                }
            }
            Op::Neg(a) => {
                let da: Vec<f64> = dout.iter().map(|d| -d).collect();
                self.seed_work(work, a, &da);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = dout.iter().map(|d| self.store(d * c)).collect();
                self.seed_work(work, a, &da);
            }
            Op::AddRowVec(a, v) => {
                self.seed_work(work, a, &dout);
                let cols = self.nodes[v.0].values.len();
                let rows = dout.len() / cols;
                let mut dv = vec![0.0f64; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dv[c] += dout[r * cols + c];
                    }
                }
                for g in dv.iter_mut() {
                    *g = self.store(*g);
                }
                self.seed_work(work, v, &dv);
            }
            Op::Matmul(a, b) => {
                let sa = self.nodes[a.0].shape.clone();
                let sb = self.nodes[b.0].shape.clone();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = &self.nodes[a.0].values;
                let bv = &self.nodes[b.0].values;
                // dA = dC * B^T
                let mut da = vec![0.0f64; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0f64;
                        for j in 0..n {
                            acc += dout[i * n + j] * bv[p * n + j];
                        }
                        da[i * k + p] = self.store(acc);
                    }
                }
                // dB = A^T * dC
                let mut db = vec![0.0f64; k * n];
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0f64;
                        for i in 0..m {
                            acc += av[i * k + p] * dout[i * n + j];
                        }
                        db[p * n + j] = self.store(acc);
                    }
                }
                self.seed_work(work, a, &da);
                self.seed_work(work, b, &db);
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
            } => {
                let si = self.nodes[input.0].shape.clone();
                let sk = self.nodes[kernels.0].shape.clone();
                let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
                let f = sk[0];
                let iv = &self.nodes[input.0].values;
                let kv = &self.nodes[kernels.0].values;
                let mut din = vec![0.0f64; iv.len()];
                let mut dk = vec![0.0f64; kv.len()];
                let mut db = vec![0.0f64; f];
                for ni in 0..n {
                    for fi in 0..f {
                        for y in 0..h {
                            for x in 0..w {
                                let d = dout[((ni * f + fi) * h + y) * w + x];
                                if d == 0.0 {
                                    continue;
                                }
                                db[fi] += d;
                                for ci in 0..c {
                                    for dy in 0..3usize {
                                        let iy = y as isize + dy as isize - 1;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for dx in 0..3usize {
                                            let ix = x as isize + dx as isize - 1;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let iidx = ((ni * c + ci) * h + iy as usize) * w
                                                + ix as usize;
                                            let kidx = ((fi * c + ci) * 3 + dy) * 3 + dx;
                                            din[iidx] += d * kv[kidx];
                                            dk[kidx] += d * iv[iidx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                for g in din.iter_mut() {
                    *g = self.store(*g);
                }
                for g in dk.iter_mut() {
                    *g = self.store(*g);
                }
                for g in db.iter_mut() {
                    *g = self.store(*g);
                }
                self.seed_work(work, input, &din);
                self.seed_work(work, kernels, &dk);
                self.seed_work(work, bias, &db);
            }
            Op::AvgPool2(a) => {
                let si = self.nodes[a.0].shape.clone();
                let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut da = vec![0.0f64; n * c * h * w];
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                let d =
                                    self.store(dout[((ni * c + ci) * oh + y) * ow + x] * 0.25);
                                let base = (ni * c + ci) * h;
                                da[(base + 2 * y) * w + 2 * x] += d;
                                da[(base + 2 * y) * w + 2 * x + 1] += d;
                                da[(base + 2 * y + 1) * w + 2 * x] += d;
                                da[(base + 2 * y + 1) * w + 2 * x + 1] += d;
                            }
                        }
                    }
                }
                self.seed_work(work, a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = dout
                    .iter()
                    .zip(&self.nodes[a.0].values)
                    .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                    .collect();
                self.seed_work(work, a, &da);
            }
            Op::Tanh(a) => {
                let da: Vec<f64> = dout
                    .iter()
                    .zip(&self.nodes[idx].values)
                    .map(|(d, &y)| self.store(d * (1.0 - y * y)))
                    .collect();
                self.seed_work(work, a, &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = dout
                    .iter()
                    .zip(&self.nodes[idx].values)
                    .map(|(d, &y)| self.store(d * y * (1.0 - y)))
                    .collect();
                self.seed_work(work, a, &da);
            }
            Op::SoftmaxRows(a) => {
                let shape = self.nodes[idx].shape.clone();
                let (rows, cols) = (shape[0], shape[1]);
                let y = self.nodes[idx].values.clone();
                let mut da = vec![0.0f64; rows * cols];
                for r in 0..rows {
                    let mut dot = 0.0f64;
                    for c in 0..cols {
                        dot += dout[r * cols + c] * y[r * cols + c];
                    }
                    for c in 0..cols {
                        da[r * cols + c] =
                            self.store(y[r * cols + c] * (dout[r * cols + c] - dot));
                    }
                }
                self.seed_work(work, a, &da);
            }
            Op::LogClamped(a) => {
                let da: Vec<f64> = dout
                    .iter()
                    .zip(&self.nodes[a.0].values)
                    .map(|(d, &x)| {
                        if x >= LOG_FLOOR {
                            self.store(d / x)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.seed_work(work, a, &da);
            }
            Op::Sum(a) => {
                let d = dout[0];
                let da = vec![d; self.nodes[a.0].values.len()];
                self.seed_work(work, a, &da);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].values.len();
                let d = self.store(dout[0] / n as f64);
                let da = vec![d; n];
                self.seed_work(work, a, &da);
            }
            Op::MeanPerColumn(a) => {
                let shape = self.nodes[a.0].shape.clone();
                let (rows, cols) = (shape[0], shape[1]);
                let mut da = vec![0.0f64; rows * cols];
                for c in 0..cols {
                    let d = self.store(dout[c] / rows as f64);
                    for r in 0..rows {
                        da[r * cols + c] = d;
                    }
                }
                self.seed_work(work, a, &da);
            }
            Op::Reshape(a) => {
                self.seed_work(work, a, &dout);
            }
            Op::GatherRows { input, ref rows } => {
                let d = self.nodes[input.0].shape[1];
                let mut da = vec![0.0f64; self.nodes[input.0].values.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..d {
                        da[r * d + c] += dout[i * d + c];
                    }
                }
                for g in da.iter_mut() {
                    *g = self.store(*g);
                }
                self.seed_work(work, input, &da);
            }
            Op::SelectColumn { input, column } => {
                let shape = self.nodes[input.0].shape.clone();
                let (n, d) = (shape[0], shape[1]);
                let mut da = vec![0.0f64; n * d];
                for r in 0..n {
                    da[r * d + column] = dout[r];
                }
                self.seed_work(work, input, &da);
            }
        }
    }

    /// Gradient for the right operand of add/sub, which may be a broadcast
    /// scalar (its gradient is then the signed sum of the upstream values).
    fn accumulate_rhs(&self, work: &mut [Option<Vec<f64>>], b: Var, dout: &[f64], sign: f64) {
        if self.nodes[b.0].values.len() == 1 && dout.len() != 1 {
            let acc: f64 = dout.iter().sum();
            self.seed_work(work, b, &[self.store(sign * acc)]);
        } else {
            let db: Vec<f64> = dout.iter().map(|d| sign * d).collect();
            self.seed_work(work, b, &db);
        }
    }
}

enum BinaryKind {
    Matched,
    ScalarRhs,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
