use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    ConcatCols(Var, Var),
    GatherRows {
        input: Var,
        index: Vec<usize>,
    },
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation, replayed backwards by [`Tape::backward`].
///
/// Batched activations use the `[batch, channels, length]` layout for
/// convolutions and `[batch, features]` for dense layers; un-batched inputs
/// (`[channels, length]`, `[features]`) are accepted and keep their rank.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by a backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, if `var` requires gradients.
    /// Leaves unreachable from the root get an all-zero tensor.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Zero-padded cross-correlation. `input` is `[C_in, L]` or `[B, C_in, L]`,
    /// `weight` is `[C_out, C_in, K]`, `bias` is `[C_out]`.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        let (batch, c_in, len) = match xs.as_slice() {
            [c, l] => (1, *c, *l),
            [b, c, l] => (*b, *c, *l),
            _ => return shape_err(format!("conv1d input must be rank 2 or 3, got {xs:?}")),
        };
        let [c_out, w_in, k] = ws[..] else {
            return shape_err(format!("conv1d weight must be [C_out, C_in, K], got {ws:?}"));
        };
        if w_in != c_in {
            return shape_err(format!("conv1d input has {c_in} channels, weight expects {w_in}"));
        }
        if bs != [c_out] {
            return shape_err(format!("conv1d bias must be [{c_out}], got {bs:?}"));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv1d stride must be positive".into()));
        }
        if len + 2 * padding < k {
            return shape_err(format!(
                "conv1d output length < 1 (L={len}, K={k}, padding={padding})"
            ));
        }
        let len_out = (len + 2 * padding - k) / stride + 1;
        let geom = ConvGeom {
            batch,
            c_in,
            len,
            c_out,
            k,
            stride,
            padding,
            len_out,
        };
        let cols = kernels::im2col(self.value(input).data(), &geom);
        let out = kernels::conv_forward(
            &cols,
            self.value(weight).data(),
            self.value(bias).data(),
            &geom,
        );
        let shape = if xs.len() == 2 {
            vec![c_out, len_out]
        } else {
            vec![batch, c_out, len_out]
        };
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv1d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Dense layer `weight · x (+ bias)`. `input` is `[N]` or `[B, N]`,
    /// `weight` is `[M, N]`, `bias` is `[M]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let (batch, n) = match xs.as_slice() {
            [n] => (1, *n),
            [b, n] => (*b, *n),
            _ => return shape_err(format!("linear input must be rank 1 or 2, got {xs:?}")),
        };
        let [m, wn] = ws[..] else {
            return shape_err(format!("linear weight must be [M, N], got {ws:?}"));
        };
        if wn != n {
            return shape_err(format!("linear input has {n} features, weight expects {wn}"));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [m] {
                return shape_err(format!(
                    "linear bias must be [{m}], got {:?}",
                    self.value(b).shape()
                ));
            }
        }
        let mut out = vec![0.0; batch * m];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(bv);
            }
        }
        // out[B×M] += X[B×N] · Wᵀ
        kernels::gemm(
            batch,
            n,
            m,
            self.value(input).data(),
            (n, 1),
            self.value(weight).data(),
            (1, n),
            &mut out,
            (m, 1),
            if bias.is_some() { 1.0 } else { 0.0 },
        );
        let shape = if xs.len() == 1 { vec![m] } else { vec![batch, m] };
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out: Vec<f64> = x.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        let rg = self.rg(&[input]);
        self.push(t, Op::Relu(input), rg)
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(&[input]);
        Ok(self.push(t, Op::Reshape(input), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_parts(self.value(a).shape().to_vec(), out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::from_parts(self.value(a).shape().to_vec(), out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let out: Vec<f64> = x.data().iter().map(|v| v * factor).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        let rg = self.rg(&[input]);
        self.push(t, Op::Scale(input, factor), rg)
    }

    /// `[B, N] ++ [B, M] -> [B, N + M]` (rank-1 operands are treated as `B = 1`).
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, na) = rows_cols(self.value(a).shape())?;
        let (rb, nb) = rows_cols(self.value(b).shape())?;
        if ra != rb || self.value(a).rank() != self.value(b).rank() {
            return shape_err(format!(
                "concat_cols: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let mut out = Vec::with_capacity(ra * (na + nb));
        for r in 0..ra {
            out.extend_from_slice(&self.value(a).data()[r * na..(r + 1) * na]);
            out.extend_from_slice(&self.value(b).data()[r * nb..(r + 1) * nb]);
        }
        let shape = if self.value(a).rank() == 1 {
            vec![na + nb]
        } else {
            vec![ra, na + nb]
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConcatCols(a, b), rg))
    }

    /// Selects rows of a `[R, N]` tensor; indices may repeat.
    pub fn gather_rows(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let [rows, n] = x.shape()[..] else {
            return shape_err(format!("gather_rows needs rank 2, got {:?}", x.shape()));
        };
        if index.is_empty() {
            return Err(Error::InvalidArgument("gather_rows with empty index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            out.extend_from_slice(&x.data()[i * n..(i + 1) * n]);
        }
        let t = Tensor::from_parts(vec![index.len(), n], out);
        let rg = self.rg(&[input]);
        Ok(self.push(
            t,
            Op::GatherRows {
                input,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Sum of squared differences, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!("unknown node {}", root.0)));
        }
        if self.value(root).len() != 1 {
            return shape_err(format!(
                "backward root must be scalar, got {:?}",
                self.value(root).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        }

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(&node.op, &g, &mut grads);
        }

        // Leaves that require gradients but were not reached get zeros.
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let g_t = kernels::to_channel_major(g.data(), geom);
                if self.requires_grad(*bias) {
                    let mut gb = vec![0.0; geom.c_out];
                    let n = geom.batch * geom.len_out;
                    for (co, acc) in gb.iter_mut().enumerate() {
                        *acc = g_t[co * n..(co + 1) * n].iter().sum();
                    }
                    self.accumulate(grads, *bias, Tensor::from_parts(vec![geom.c_out], gb));
                }
                if self.requires_grad(*weight) {
                    let gw = kernels::conv_weight_grad(&g_t, cols, geom);
                    let shape = self.value(*weight).shape().to_vec();
                    self.accumulate(grads, *weight, Tensor::from_parts(shape, gw));
                }
                if self.requires_grad(*input) {
                    let gx = kernels::conv_input_grad(&g_t, self.value(*weight).data(), geom);
                    let shape = self.value(*input).shape().to_vec();
                    self.accumulate(grads, *input, Tensor::from_parts(shape, gx));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (m, n) = (w.shape()[0], w.shape()[1]);
                let batch = x.len() / n;
                if let Some(b) = bias {
                    if self.requires_grad(*b) {
                        let mut gb = vec![0.0; m];
                        for row in g.data().chunks_exact(m) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_parts(vec![m], gb));
                    }
                }
                if self.requires_grad(*weight) {
                    // dW[M×N] = Gᵀ[M×B] · X[B×N]
                    let mut gw = vec![0.0; m * n];
                    kernels::gemm(m, batch, n, g.data(), (1, m), x.data(), (n, 1), &mut gw, (n, 1), 0.0);
                    self.accumulate(grads, *weight, Tensor::from_parts(vec![m, n], gw));
                }
                if self.requires_grad(*input) {
                    // dX[B×N] = G[B×M] · W[M×N]
                    let mut gx = vec![0.0; batch * n];
                    kernels::gemm(batch, m, n, g.data(), (m, 1), w.data(), (n, 1), &mut gx, (n, 1), 0.0);
                    self.accumulate(grads, *input, Tensor::from_parts(x.shape().to_vec(), gx));
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input);
                let gx: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *input, Tensor::from_parts(x.shape().to_vec(), gx));
            }
            Op::Reshape(input) => {
                let shape = self.value(*input).shape().to_vec();
                self.accumulate(grads, *input, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                self.accumulate(grads, *b, Tensor::from_parts(g.shape().to_vec(), neg));
            }
            Op::Scale(input, factor) => {
                let gx: Vec<f64> = g.data().iter().map(|v| v * factor).collect();
                self.accumulate(grads, *input, Tensor::from_parts(g.shape().to_vec(), gx));
            }
            Op::ConcatCols(a, b) => {
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                let na = *sa.last().unwrap_or(&1);
                let nb = *sb.last().unwrap_or(&1);
                let rows = g.len() / (na + nb);
                let mut ga = Vec::with_capacity(rows * na);
                let mut gb = Vec::with_capacity(rows * nb);
                for row in g.data().chunks_exact(na + nb) {
                    ga.extend_from_slice(&row[..na]);
                    gb.extend_from_slice(&row[na..]);
                }
                self.accumulate(grads, *a, Tensor::from_parts(sa, ga));
                self.accumulate(grads, *b, Tensor::from_parts(sb, gb));
            }
            Op::GatherRows { input, index } => {
                let shape = self.value(*input).shape().to_vec();
                let n = shape[1];
                let mut gx = vec![0.0; shape[0] * n];
                for (row, &i) in g.data().chunks_exact(n).zip(index) {
                    for (acc, v) in gx[i * n..(i + 1) * n].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(shape, gx));
            }
            Op::Mse(a, b) => {
                let gs = g.data()[0];
                let diff: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| 2.0 * (x - y) * gs)
                    .collect();
                let shape = self.value(*a).shape().to_vec();
                if self.requires_grad(*b) {
                    let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(shape.clone(), neg));
                }
                self.accumulate(grads, *a, Tensor::from_parts(shape, diff));
            }
        }
    }
}

fn rows_cols(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n] => Ok((1, *n)),
        [r, n] => Ok((*r, *n)),
        _ => shape_err(format!("expected rank 1 or 2, got {shape:?}")),
    }
}
