//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation in evaluation order, so node ids are a
//! topological order by construction. [`Tape::backward`] walks the ids in
//! strict reverse order and accumulates adjoints into the inputs of each node.
//! Nodes that do not depend on any parameter are never visited.

use super::{Matrix, NumericsError, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddScalar(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    SoftmaxRows(Var),
    Relu(Var),
    Sigmoid(Var),
    StandardizeRows { input: Var, inv_std: Vec<T> },
    L2Normalize { input: Var, norm: T },
    GatherRows { table: Var, ids: Vec<usize> },
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    Sum(Var),
    BceWithLogits { logits: Var, targets: Vec<T> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Matrix<T>,
    tracked: bool,
}

/// Operation record for one forward pass. Not shared across threads.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `var`; `None` if `var` is untracked or
    /// does not influence the loss.
    pub fn get(&self, var: Var) -> Option<&Matrix<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but returns zeros of the right shape when absent.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Matrix<T> {
        self.get(var).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

fn shape_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> NumericsError {
    NumericsError::ShapeMismatch { op, left, right }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input that receives no gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Records a trainable input; its gradient is populated by `backward`.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, var: Var) -> &Matrix<T> {
        &self.nodes[var.0].value
    }

    pub fn is_tracked(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    fn push(&mut self, op: Op<T>, value: Matrix<T>, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, op: Op<T>, value: Matrix<T>, inputs: &[Var]) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op_name(&op) });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        Ok(self.push(op, value, tracked))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).matmul(self.value(b))?;
        self.derived(Op::Matmul(a, b), value, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).add(self.value(b))?;
        self.derived(Op::Add(a, b), value, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).sub(self.value(b))?;
        self.derived(Op::Sub(a, b), value, &[a, b])
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).hadamard(self.value(b))?;
        self.derived(Op::Mul(a, b), value, &[a, b])
    }

    /// Adds a 1×c row to every row of an n×c matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let value = self.broadcast_row(a, row, "add_row", |x, r| x + r)?;
        self.derived(Op::AddRow(a, row), value, &[a, row])
    }

    /// Multiplies every row of an n×c matrix element-wise by a 1×c row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let value = self.broadcast_row(a, row, "mul_row", |x, r| x * r)?;
        self.derived(Op::MulRow(a, row), value, &[a, row])
    }

    fn broadcast_row(&self, a: Var, row: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Matrix<T>, NumericsError> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err(op, av.shape(), rv.shape()));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (x, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *x = f(*x, b);
            }
        }
        Ok(out)
    }

    /// Adds a 1×1 value to every entry.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var, NumericsError> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(shape_err("add_scalar", self.value(a).shape(), sv.shape()));
        }
        let b = sv.get(0, 0);
        let value = self.value(a).map(|x| x + b);
        self.derived(Op::AddScalar(a, s), value, &[a, s])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var, NumericsError> {
        let value = self.value(a).scale(factor);
        self.derived(Op::Scale(a, factor), value, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).transpose();
        self.derived(Op::Transpose(a), value, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).softmax_rows()?;
        self.derived(Op::SoftmaxRows(a), value, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.derived(Op::Relu(a), value, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).map(sigmoid);
        self.derived(Op::Sigmoid(a), value, &[a])
    }

    /// Per-row `(x - mean) / sqrt(var + eps)` with population variance.
    pub fn standardize_rows(&mut self, a: Var, eps: T) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(NumericsError::Empty { op: "standardize_rows" });
        }
        let n = T::from_usize(av.cols()).expect("width");
        let mut out = av.clone();
        let mut inv_std = Vec::with_capacity(av.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.derived(Op::StandardizeRows { input: a, inv_std }, out, &[a])
    }

    /// Unit-norm scaling of a 1×c row; errors when the norm is at or below `eps`.
    pub fn l2_normalize(&mut self, a: Var, eps: T) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let value = av.l2_normalize(eps)?;
        let norm = av.norm();
        self.derived(Op::L2Normalize { input: a, norm }, value, &[a])
    }

    /// Row `i` of the output is row `ids[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * tv.cols());
        for &id in ids {
            if id >= tv.rows() {
                return Err(NumericsError::IndexOutOfRange { index: id, len: tv.rows() });
            }
            data.extend_from_slice(tv.row(id));
        }
        let value = Matrix::from_vec(ids.len(), tv.cols(), data)?;
        self.derived(Op::GatherRows { table, ids: ids.to_vec() }, value, &[table])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(shape_err("concat_cols", av.shape(), bv.shape()));
        }
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for r in 0..av.rows() {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let value = Matrix::from_vec(av.rows(), av.cols() + bv.cols(), data)?;
        self.derived(Op::ConcatCols(a, b), value, &[a, b])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::Empty { op: "concat_rows" })?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first).shape(), pv.shape()));
            }
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        self.derived(Op::ConcatRows(parts.to_vec()), value, parts)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let value = Matrix::scalar(self.value(a).sum());
        self.derived(Op::Sum(a), value, &[a])
    }

    /// Mean binary cross-entropy of an n×1 logit column against 0/1 targets,
    /// computed in the overflow-free form `max(z,0) - t·z + ln(1 + e^-|z|)`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        if lv.cols() != 1 || lv.rows() != targets.len() || targets.is_empty() {
            return Err(shape_err("bce_with_logits", lv.shape(), (targets.len(), 1)));
        }
        let total: T = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(T::zero()) - t * z + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Matrix::scalar(total / T::from_usize(targets.len()).expect("len"));
        self.derived(Op::BceWithLogits { logits, targets: targets.to_vec() }, value, &[logits])
    }

    /// Propagates d(loss)/d(node) from a 1×1 `loss` back to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        let loss_shape = self.value(loss).shape();
        if loss_shape != (1, 1) {
            return Err(NumericsError::NonScalarLoss { shape: loss_shape });
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Matrix::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], var: Var, delta: Matrix<T>) -> Result<(), NumericsError> {
        if !self.nodes[var.0].tracked {
            return Ok(());
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => {
                *slot = Some(delta);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<(), NumericsError> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.is_tracked(*a) {
                    self.accumulate(grads, *a, g.matmul(&bv.transpose())?)?;
                }
                if self.is_tracked(*b) {
                    self.accumulate(grads, *b, av.transpose().matmul(g)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.hadamard(bv)?)?;
                self.accumulate(grads, *b, g.hadamard(av)?)?;
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *row, column_sums(g))?;
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    for (x, &s) in ga.row_mut(r).iter_mut().zip(rv.data()) {
                        *x *= s;
                    }
                }
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *row, column_sums(&g.hadamard(av)?))?;
            }
            Op::AddScalar(a, s) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *s, Matrix::scalar(g.sum()))?;
            }
            Op::Scale(a, factor) => self.accumulate(grads, *a, g.scale(*factor))?,
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose())?,
            Op::SoftmaxRows(a) => {
                let mut ga = g.hadamard(y)?;
                for r in 0..ga.rows() {
                    let dot: T = ga.row(r).iter().copied().sum();
                    for (x, &s) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                        *x -= s * dot;
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let mask = av.map(|x| if x > T::zero() { T::one() } else { T::zero() });
                self.accumulate(grads, *a, g.hadamard(&mask)?)?;
            }
            Op::Sigmoid(a) => {
                let local = y.map(|s| s * (T::one() - s));
                self.accumulate(grads, *a, g.hadamard(&local)?)?;
            }
            Op::StandardizeRows { input, inv_std } => {
                let n = T::from_usize(y.cols()).expect("width");
                let mut ga = g.clone();
                for (r, &inv) in inv_std.iter().enumerate() {
                    let g_row = g.row(r);
                    let y_row = y.row(r);
                    let mean_g = g_row.iter().copied().sum::<T>() / n;
                    let mean_gy = g_row.iter().zip(y_row).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for ((x, &gi), &yi) in ga.row_mut(r).iter_mut().zip(g_row).zip(y_row) {
                        *x = inv * (gi - mean_g - yi * mean_gy);
                    }
                }
                self.accumulate(grads, *input, ga)?;
            }
            Op::L2Normalize { input, norm } => {
                let dot: T = g.data().iter().zip(y.data()).map(|(&a, &b)| a * b).sum();
                let ga = g.sub(&y.scale(dot))?.scale(T::one() / *norm);
                self.accumulate(grads, *input, ga)?;
            }
            Op::GatherRows { table, ids } => {
                if self.is_tracked(*table) {
                    let tv = self.value(*table);
                    let mut gt = Matrix::zeros(tv.rows(), tv.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (x, &d) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *x += d;
                        }
                    }
                    self.accumulate(grads, *table, gt)?;
                }
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols();
                let bc = self.value(*b).cols();
                let mut ga = Vec::with_capacity(g.rows() * ac);
                let mut gb = Vec::with_capacity(g.rows() * bc);
                for r in 0..g.rows() {
                    ga.extend_from_slice(&g.row(r)[..ac]);
                    gb.extend_from_slice(&g.row(r)[ac..]);
                }
                self.accumulate(grads, *a, Matrix::from_vec(g.rows(), ac, ga)?)?;
                self.accumulate(grads, *b, Matrix::from_vec(g.rows(), bc, gb)?)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let slice = g.data()[offset * g.cols()..(offset + rows) * g.cols()].to_vec();
                    self.accumulate(grads, p, Matrix::from_vec(rows, g.cols(), slice)?)?;
                    offset += rows;
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g.get(0, 0)))?;
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = self.value(*logits);
                let scale = g.get(0, 0) / T::from_usize(targets.len()).expect("len");
                let data = lv.data().iter().zip(targets).map(|(&z, &t)| (sigmoid(z) - t) * scale).collect();
                self.accumulate(grads, *logits, Matrix::from_vec(lv.rows(), 1, data)?)?;
            }
        }
        Ok(())
    }
}

fn column_sums<T: Scalar>(g: &Matrix<T>) -> Matrix<T> {
    let mut out = vec![T::zero(); g.cols()];
    for r in 0..g.rows() {
        for (o, &x) in out.iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    Matrix::row_vector(out)
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::AddScalar(..) => "add_scalar",
        Op::Scale(..) => "scale",
        Op::Transpose(..) => "transpose",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::StandardizeRows { .. } => "standardize_rows",
        Op::L2Normalize { .. } => "l2_normalize",
        Op::GatherRows { .. } => "gather_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::Sum(..) => "sum",
        Op::BceWithLogits { .. } => "bce_with_logits",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type M = Matrix<f64>;
    type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError> + 'a;

    fn forward(build: &Build, params: &[M]) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).get(0, 0)
    }

    /// Central differences with step 1e-5 against the tape's adjoints.
    fn check(build: &Build, params: &[M]) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        let grads = tape.backward(out).unwrap();
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[pi], p.shape());
            for k in 0..p.len() {
                let mut plus = params.to_vec();
                plus[pi].data_mut()[k] += h;
                let mut minus = params.to_vec();
                minus[pi].data_mut()[k] -= h;
                let numeric = (forward(build, &plus) - forward(build, &minus)) / (2.0 * h);
                let a = analytic.data()[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel <= 1e-4, "param {pi} entry {k}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn rand(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> M {
        M::random_normal(rows, cols, 1.0, rng)
    }

    /// Reduces any matrix to a scalar through a fixed random weighting so
    /// every entry's adjoint differs.
    fn weighted_sum(t: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var, NumericsError> {
        let (r, c) = t.value(x).shape();
        let w = t.constant(M::random_normal(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
        let prod = t.mul(x, w)?;
        t.sum(prod)
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let w = tape.param(M::from_vec(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0]).unwrap());
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &M::ones(2, 3));
    }

    #[test]
    fn sigmoid_at_zero_has_quarter_slope() {
        let x = M::from_vec(3, 1, vec![1.0, -2.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(M::zeros(1, 3));
        let xv = tape.constant(x.clone());
        let z = tape.matmul(w, xv).unwrap();
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).get(0, 0), 0.5);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(w).unwrap().max_abs_diff(&x.transpose().scale(0.25)) < 1e-15);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(M::ones(2, 2));
        assert_eq!(tape.backward(w).unwrap_err(), NumericsError::NonScalarLoss { shape: (2, 2) });
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(M::ones(1, 2));
        let p = tape.param(M::ones(1, 2));
        let prod = tape.mul(c, p).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), &M::ones(1, 2));
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand(3, 4, &mut rng);
        let b = rand(4, 2, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let (va, vb) = (tape.param(a.clone()), tape.param(b.clone()));
            let p = tape.matmul(va, vb).unwrap();
            let s = tape.softmax_rows(p).unwrap();
            let loss = weighted_sum(&mut tape, s, 5).unwrap();
            let g = tape.backward(loss).unwrap();
            (g.get(va).unwrap().clone(), g.get(vb).unwrap().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn finite_differences_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![rand(3, 4, &mut rng), rand(3, 4, &mut rng)];
        check(&|t, v| { let x = t.add(v[0], v[1])?; weighted_sum(t, x, 1) }, &params);
        check(&|t, v| { let x = t.sub(v[0], v[1])?; weighted_sum(t, x, 2) }, &params);
        check(&|t, v| { let x = t.mul(v[0], v[1])?; weighted_sum(t, x, 3) }, &params);
        check(&|t, v| { let x = t.scale(v[0], -1.7)?; weighted_sum(t, x, 4) }, &params);
        check(&|t, v| { let x = t.sigmoid(v[0])?; weighted_sum(t, x, 5) }, &params);
        check(&|t, v| { let x = t.relu(v[0])?; weighted_sum(t, x, 6) }, &params);
        check(&|t, v| { let x = t.transpose(v[0])?; weighted_sum(t, x, 7) }, &params);
    }

    #[test]
    fn finite_differences_matmul_and_broadcasts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![rand(3, 5, &mut rng), rand(5, 2, &mut rng), rand(1, 5, &mut rng), rand(1, 1, &mut rng)];
        check(&|t, v| { let x = t.matmul(v[0], v[1])?; weighted_sum(t, x, 1) }, &params);
        check(&|t, v| { let x = t.add_row(v[0], v[2])?; weighted_sum(t, x, 2) }, &params);
        check(&|t, v| { let x = t.mul_row(v[0], v[2])?; weighted_sum(t, x, 3) }, &params);
        check(&|t, v| { let x = t.add_scalar(v[0], v[3])?; weighted_sum(t, x, 4) }, &params);
    }

    #[test]
    fn finite_differences_normalizations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![rand(4, 6, &mut rng), rand(1, 6, &mut rng)];
        check(&|t, v| { let x = t.softmax_rows(v[0])?; weighted_sum(t, x, 1) }, &params);
        check(&|t, v| { let x = t.standardize_rows(v[0], 1e-5)?; weighted_sum(t, x, 2) }, &params);
        check(&|t, v| { let x = t.l2_normalize(v[1], 1e-12)?; weighted_sum(t, x, 3) }, &params);
    }

    #[test]
    fn finite_differences_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = vec![rand(5, 3, &mut rng), rand(2, 3, &mut rng), rand(5, 2, &mut rng)];
        check(&|t, v| { let x = t.gather_rows(v[0], &[4, 0, 4, 2])?; weighted_sum(t, x, 1) }, &params);
        check(&|t, v| { let x = t.concat_rows(&[v[0], v[1], v[0]])?; weighted_sum(t, x, 2) }, &params);
        check(&|t, v| { let x = t.concat_cols(v[0], v[2])?; weighted_sum(t, x, 3) }, &params);
    }

    #[test]
    fn finite_differences_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = vec![rand(6, 1, &mut rng).scale(3.0)];
        let targets = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        check(&|t, v| t.bce_with_logits(v[0], &targets), &params);
    }

    #[test]
    fn bce_matches_direct_formula() {
        let z = [-3.0, 0.0, 2.5];
        let y = [0.0, 1.0, 1.0];
        let mut tape = Tape::new();
        let logits = tape.constant(M::from_vec(3, 1, z.to_vec()).unwrap());
        let loss = tape.bce_with_logits(logits, &y).unwrap();
        let expected: f64 = z
            .iter()
            .zip(&y)
            .map(|(&z, &y): (&f64, &f64)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 3.0;
        assert!((tape.value(loss).get(0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn random_small_graph_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let n = 1 + (seed as usize % 4);
            let d = 2 + (seed as usize % 7);
            let params = vec![rand(n, d, &mut rng), rand(d, d, &mut rng), rand(1, d, &mut rng), rand(d, 1, &mut rng)];
            check(
                &|t, v| {
                    let h = t.matmul(v[0], v[1])?;
                    let h = t.add_row(h, v[2])?;
                    let a = t.softmax_rows(h)?;
                    let z = t.matmul(a, v[3])?;
                    let s = t.sigmoid(z)?;
                    t.sum(s)
                },
                &params,
            );
        }
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let table = tape.param(M::ones(2, 2));
        assert!(matches!(tape.gather_rows(table, &[2]), Err(NumericsError::IndexOutOfRange { .. })));
    }
}
