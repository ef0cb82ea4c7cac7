//! Tape-based reverse-mode automatic differentiation over dense 2-D `f64`
//! matrices.
//!
//! A [`Graph`] owns every value produced during a forward pass together with
//! the rule needed to push gradients back to its inputs. [`Tensor`] is a
//! cheap `Copy` handle into that arena. Operations are recorded in creation
//! order, so the arena is always topologically sorted and a single reverse
//! sweep is enough for [`Graph::backward`].
//!
//! ```
//! use ndarray::array;
//! use smar_core::autodiff::Graph;
//!
//! let mut g = Graph::new();
//! let w = g.param(array![[1.0, 2.0], [3.0, 4.0]]);
//! let loss = g.sum(w);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(w).unwrap(), &array![[1.0, 1.0], [1.0, 1.0]]);
//! ```

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Mul(usize, usize),
    MulCol(usize, usize),
    Recip(usize),
    RowSum(usize),
    ColMean(usize),
    Sum(usize),
    Log(usize),
    Exp(usize),
    Relu(usize),
    RowSoftmax(usize),
    RowLogSoftmax(usize),
    GatherRows(usize, Vec<usize>),
    ScatterRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    Column(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation plus accumulated gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
    backpropagated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Tensor {
        let (rows, cols) = value.dim();
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Tensor { id, rows, cols }
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Tensor {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Tensor {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Tensor {
        self.leaf(value, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Tensor {
        self.constant(Matrix::from_elem((1, 1), value))
    }

    pub fn value(&self, t: Tensor) -> &Matrix {
        &self.nodes[t.id].value
    }

    /// Value of a 1×1 tensor.
    pub fn scalar(&self, t: Tensor) -> f64 {
        debug_assert_eq!(t.shape(), (1, 1));
        self.nodes[t.id].value[[0, 0]]
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.id].requires_grad
    }

    pub fn grad(&self, t: Tensor) -> Option<&Matrix> {
        self.grads[t.id].as_ref()
    }

    /// Clears all gradients so the graph can be back-propagated again.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backpropagated = false;
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn unary(&mut self, a: Tensor, value: Matrix, op: Op) -> Tensor {
        let rg = self.rg(&[a.id]);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Tensor, b: Tensor, value: Matrix, op: Op) -> Tensor {
        let rg = self.rg(&[a.id, b.id]);
        self.push(value, op, rg)
    }

    fn same_shape(op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        Ok(())
    }

    /// Stop-gradient: a fresh constant leaf holding the same value.
    pub fn detach(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if a.cols != b.rows {
            return Err(Error::dim(
                "matmul",
                format!("[{}x{}] x [{}x{}]", a.rows, a.cols, b.rows, b.cols),
            ));
        }
        let v = self.value(a).dot(self.value(b));
        Ok(self.binary(a, b, v, Op::MatMul(a.id, b.id)))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        Self::same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        Ok(self.binary(a, b, v, Op::Add(a.id, b.id)))
    }

    /// Adds a `1×n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Tensor, row: Tensor) -> Result<Tensor> {
        if row.rows != 1 || row.cols != a.cols {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + row {:?}", a.shape(), row.shape()),
            ));
        }
        let v = self.value(a) + self.value(row);
        Ok(self.binary(a, row, v, Op::AddRow(a.id, row.id)))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        Self::same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        Ok(self.binary(a, b, v, Op::Sub(a.id, b.id)))
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        let v = self.value(a) * c;
        self.unary(a, v, Op::Scale(a.id, c))
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Tensor {
        let v = self.value(a) + c;
        self.unary(a, v, Op::AddScalar(a.id))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        Self::same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        Ok(self.binary(a, b, v, Op::Mul(a.id, b.id)))
    }

    /// Scales row `i` of an `m×n` matrix by entry `i` of an `m×1` column.
    pub fn mul_col(&mut self, a: Tensor, col: Tensor) -> Result<Tensor> {
        if col.cols != 1 || col.rows != a.rows {
            return Err(Error::dim(
                "mul_col",
                format!("{:?} * col {:?}", a.shape(), col.shape()),
            ));
        }
        let v = self.value(a) * self.value(col);
        Ok(self.binary(a, col, v, Op::MulCol(a.id, col.id)))
    }

    pub fn recip(&mut self, a: Tensor) -> Result<Tensor> {
        let x = self.value(a);
        if x.iter().any(|&v| v == 0.0 || v.is_nan()) {
            return Err(Error::numeric("recip", "zero or NaN entry"));
        }
        let v = x.mapv(|v| 1.0 / v);
        Ok(self.unary(a, v, Op::Recip(a.id)))
    }

    /// `m×n -> m×1`.
    pub fn row_sum(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(a, v, Op::RowSum(a.id))
    }

    /// `m×n -> 1×n`.
    pub fn col_mean(&mut self, a: Tensor) -> Result<Tensor> {
        if a.rows == 0 {
            return Err(Error::dim("col_mean", "no rows"));
        }
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0)) / a.rows as f64;
        Ok(self.unary(a, v, Op::ColMean(a.id)))
    }

    /// Sum of all entries, `1×1`.
    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let v = Matrix::from_elem((1, 1), self.value(a).sum());
        self.unary(a, v, Op::Sum(a.id))
    }

    /// Natural logarithm; all entries must be strictly positive.
    pub fn log(&mut self, a: Tensor) -> Result<Tensor> {
        let x = self.value(a);
        if x.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::numeric("log", "non-positive entry"));
        }
        let v = x.mapv(f64::ln);
        Ok(self.unary(a, v, Op::Log(a.id)))
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).mapv(f64::exp);
        self.unary(a, v, Op::Exp(a.id))
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).mapv(|v| if v > 0.0 { v } else { 0.0 });
        self.unary(a, v, Op::Relu(a.id))
    }

    /// Softmax along each row, stabilised by subtracting the row maximum.
    pub fn row_softmax(&mut self, a: Tensor) -> Result<Tensor> {
        let x = self.value(a);
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::numeric("row_softmax", "NaN input"));
        }
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        Ok(self.unary(a, v, Op::RowSoftmax(a.id)))
    }

    /// Row-wise log-softmax.
    pub fn row_log_softmax(&mut self, a: Tensor) -> Result<Tensor> {
        let x = self.value(a);
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::numeric("row_log_softmax", "NaN input"));
        }
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        Ok(self.unary(a, v, Op::RowLogSoftmax(a.id)))
    }

    /// Selects rows by index (duplicates allowed).
    pub fn gather_rows(&mut self, a: Tensor, idx: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= a.rows) {
            return Err(Error::dim(
                "gather_rows",
                format!("row {bad} out of range for {} rows", a.rows),
            ));
        }
        let v = self.value(a).select(Axis(0), idx);
        Ok(self.unary(a, v, Op::GatherRows(a.id, idx.to_vec())))
    }

    /// Places row `r` of `a` at row `idx[r]` of an `n_rows`-row zero matrix
    /// (rows landing on the same index are summed).
    pub fn scatter_rows(&mut self, a: Tensor, idx: &[usize], n_rows: usize) -> Result<Tensor> {
        if idx.len() != a.rows {
            return Err(Error::dim(
                "scatter_rows",
                format!("{} indices for {} rows", idx.len(), a.rows),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_rows) {
            return Err(Error::dim(
                "scatter_rows",
                format!("target row {bad} out of range for {n_rows} rows"),
            ));
        }
        let src = self.value(a);
        let mut v = Matrix::zeros((n_rows, a.cols));
        for (r, &i) in idx.iter().enumerate() {
            let mut dst = v.row_mut(i);
            dst += &src.row(r);
        }
        Ok(self.unary(a, v, Op::ScatterRows(a.id, idx.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        if let Some(bad) = parts.iter().find(|p| p.cols != first.cols) {
            return Err(Error::dim(
                "concat_rows",
                format!("{} columns vs {}", bad.cols, first.cols),
            ));
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::dim("concat_rows", e.to_string()))?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.rg(&ids);
        Ok(self.push(v, Op::ConcatRows(ids), rg))
    }

    /// Column `j` as an `m×1` tensor.
    pub fn column(&mut self, a: Tensor, j: usize) -> Result<Tensor> {
        if j >= a.cols {
            return Err(Error::dim(
                "column",
                format!("column {j} out of range for {} columns", a.cols),
            ));
        }
        let v = self.value(a).column(j).to_owned().insert_axis(Axis(1));
        Ok(self.unary(a, v, Op::Column(a.id, j)))
    }

    /// Back-propagates from a scalar loss, seeding its gradient with 1.0.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if loss.shape() != (1, 1) {
            return Err(Error::dim(
                "backward",
                format!("loss must be 1x1, got {:?}", loss.shape()),
            ));
        }
        if self.backpropagated {
            return Err(Error::State(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        self.backpropagated = true;
        if !self.nodes[loss.id].requires_grad {
            return Ok(());
        }
        self.grads[loss.id] = Some(Matrix::ones((1, 1)));

        for id in (0..=loss.id).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: usize, contribution: Matrix) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(existing) => *existing += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&mut self, id: usize, g: &Matrix) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a].requires_grad {
                    let ga = g.dot(&self.nodes[b].value.t());
                    self.accumulate(a, ga);
                }
                if self.nodes[b].requires_grad {
                    let gb = self.nodes[a].value.t().dot(g);
                    self.accumulate(b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(a, g.clone());
                self.accumulate(row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, -g);
            }
            Op::Scale(a, c) => self.accumulate(a, g * c),
            Op::AddScalar(a) => self.accumulate(a, g.clone()),
            Op::Mul(a, b) => {
                let ga = g * &self.nodes[b].value;
                let gb = g * &self.nodes[a].value;
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::MulCol(a, col) => {
                let ga = g * &self.nodes[col].value;
                let gc = (g * &self.nodes[a].value)
                    .sum_axis(Axis(1))
                    .insert_axis(Axis(1));
                self.accumulate(a, ga);
                self.accumulate(col, gc);
            }
            Op::Recip(a) => {
                let y = &self.nodes[id].value;
                let ga = -(g * y * y);
                self.accumulate(a, ga);
            }
            Op::RowSum(a) => {
                let shape = self.nodes[a].value.dim();
                let ga = g
                    .broadcast(shape)
                    .expect("row_sum gradient broadcasts")
                    .to_owned();
                self.accumulate(a, ga);
            }
            Op::ColMean(a) => {
                let shape = self.nodes[a].value.dim();
                let ga = g
                    .broadcast(shape)
                    .expect("col_mean gradient broadcasts")
                    .to_owned()
                    / shape.0 as f64;
                self.accumulate(a, ga);
            }
            Op::Sum(a) => {
                let shape = self.nodes[a].value.dim();
                self.accumulate(a, Matrix::from_elem(shape, g[[0, 0]]));
            }
            Op::Log(a) => {
                let ga = g / &self.nodes[a].value;
                self.accumulate(a, ga);
            }
            Op::Exp(a) => {
                let ga = g * &self.nodes[id].value;
                self.accumulate(a, ga);
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(&self.nodes[a].value)
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                self.accumulate(a, ga);
            }
            Op::RowSoftmax(a) => {
                let y = &self.nodes[id].value;
                let dot = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let ga = y * &(g - &dot);
                self.accumulate(a, ga);
            }
            Op::RowLogSoftmax(a) => {
                let s = self.nodes[id].value.mapv(f64::exp);
                let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                let ga = g - &(&s * &gsum);
                self.accumulate(a, ga);
            }
            Op::GatherRows(a, idx) => {
                let mut ga = Matrix::zeros(self.nodes[a].value.dim());
                for (r, &i) in idx.iter().enumerate() {
                    let mut dst = ga.row_mut(i);
                    dst += &g.row(r);
                }
                self.accumulate(a, ga);
            }
            Op::ScatterRows(a, idx) => {
                let ga = g.select(Axis(0), &idx);
                self.accumulate(a, ga);
            }
            Op::ConcatRows(ids) => {
                let mut offset = 0;
                for part in ids {
                    let rows = self.nodes[part].value.nrows();
                    let slice = g.slice(ndarray::s![offset..offset + rows, ..]).to_owned();
                    offset += rows;
                    self.accumulate(part, slice);
                }
            }
            Op::Column(a, j) => {
                let mut ga = Matrix::zeros(self.nodes[a].value.dim());
                ga.column_mut(j).assign(&g.column(0));
                self.accumulate(a, ga);
            }
        }
    }
}
