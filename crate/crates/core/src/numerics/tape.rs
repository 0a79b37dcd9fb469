use super::matrix::axpy;
use super::{Activation, Matrix, MlpParams, MlpVars, NumericsError, Result, Scalar};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMulT { x: usize, w: usize },
    AddBias { x: usize, b: usize },
    Activate { x: usize, act: Activation },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, k: T },
    Sum { a: usize },
    SumSquares { a: usize },
    MeanSquares { a: usize },
    RowSquaredNorm { a: usize },
    WeightedSum { a: usize, w: Vec<T> },
    BceWithLogits { logits: usize, targets: Vec<T> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
    label: Option<String>,
}

/// Linear record of primitive operations. Nodes are appended in evaluation
/// order, so that order is already topological for the backward sweep.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Attach a name used in non-finite diagnostics.
    pub fn set_label(&mut self, v: Var, label: impl Into<String>) {
        self.nodes[v.0].label = Some(label.into());
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let value = self.nodes[x.0].value.matmul_t(&self.nodes[w.0].value);
        let rg = self.rg(x.0) || self.rg(w.0);
        self.push(value, Op::MatMulT { x: x.0, w: w.0 }, rg)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let mut value = self.nodes[x.0].value.clone();
        {
            let bias = self.nodes[b.0].value.data();
            for r in 0..value.rows() {
                for (o, &bb) in value.row_mut(r).iter_mut().zip(bias) {
                    *o += bb;
                }
            }
        }
        let rg = self.rg(x.0) || self.rg(b.0);
        self.push(value, Op::AddBias { x: x.0, b: b.0 }, rg)
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        let value = self.nodes[x.0].value.map(|v| act.apply(v));
        let rg = self.rg(x.0);
        self.push(value, Op::Activate { x: x.0, act }, rg)
    }

    fn zip(&self, a: usize, b: usize, f: impl Fn(T, T) -> T) -> Matrix<T> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(va.rows(), va.cols(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a.0, b.0, |x, y| x + y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Add { a: a.0, b: b.0 }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a.0, b.0, |x, y| x - y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Sub { a: a.0, b: b.0 }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a.0, b.0, |x, y| x * y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Mul { a: a.0, b: b.0 }, rg)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * k);
        let rg = self.rg(a.0);
        self.push(value, Op::Scale { a: a.0, k }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().copied().sum();
        let rg = self.rg(a.0);
        self.push(Matrix::scalar(s), Op::Sum { a: a.0 }, rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().map(|&x| x * x).sum();
        let rg = self.rg(a.0);
        self.push(Matrix::scalar(s), Op::SumSquares { a: a.0 }, rg)
    }

    /// Mean over every element of `a²`.
    pub fn mean_squares(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let n = T::from_usize(v.data().len().max(1)).unwrap();
        let s: T = v.data().iter().map(|&x| x * x).sum();
        let rg = self.rg(a.0);
        self.push(Matrix::scalar(s / n), Op::MeanSquares { a: a.0 }, rg)
    }

    /// Per-row squared norm, `rows × 1`.
    pub fn row_squared_norm(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let data = (0..v.rows())
            .map(|r| v.row(r).iter().map(|&x| x * x).sum())
            .collect();
        let value = Matrix::from_vec(v.rows(), 1, data).expect("column");
        let rg = self.rg(a.0);
        self.push(value, Op::RowSquaredNorm { a: a.0 }, rg)
    }

    /// `Σ_i w_i a_i` for a column `a`.
    pub fn weighted_sum(&mut self, a: Var, w: Vec<T>) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.data().len(), w.len(), "weight count");
        let s = v.data().iter().zip(&w).map(|(&x, &wi)| x * wi).sum();
        let rg = self.rg(a.0);
        self.push(Matrix::scalar(s), Op::WeightedSum { a: a.0, w }, rg)
    }

    /// Mean binary cross-entropy of a logit column against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<T>) -> Var {
        let v = &self.nodes[logits.0].value;
        assert_eq!(v.data().len(), targets.len(), "target count");
        let n = T::from_usize(targets.len().max(1)).unwrap();
        let s: T = v
            .data()
            .iter()
            .zip(&targets)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        let rg = self.rg(logits.0);
        self.push(
            Matrix::scalar(s / n),
            Op::BceWithLogits {
                logits: logits.0,
                targets,
            },
            rg,
        )
    }

    fn check_finite(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.value.all_finite() {
                let label = node.label.clone().unwrap_or_else(|| format!("node {i}"));
                return Err(NumericsError::NonFinite { label });
            }
        }
        Ok(())
    }

    /// Reverse sweep from a `1 × 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let root = &self.nodes[loss.0].value;
        if root.shape() != (1, 1) {
            return Err(NumericsError::Dimension {
                context: "backward expects scalar loss",
                expected: 1,
                got: root.data().len(),
            });
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], target: usize, f: impl FnOnce(&mut Matrix<T>)) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let entry = grads[target].get_or_insert_with(|| {
            let (r, c) = self.nodes[target].value.shape();
            Matrix::zeros(r, c)
        });
        f(entry);
    }

    fn propagate(&self, i: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let node = &self.nodes[i];
        let two = T::lit(2.0);
        match &node.op {
            Op::Leaf => {}
            Op::MatMulT { x, w } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                // dX = G · W
                self.accumulate(grads, *x, |dx| {
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let dr = dx.row_mut(r);
                        for (k, &gk) in gr.iter().enumerate() {
                            if gk != T::zero() {
                                axpy(gk, wv.row(k), dr);
                            }
                        }
                    }
                });
                // dW = Gᵀ · X, summed over rows in index order
                self.accumulate(grads, *w, |dw| {
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let xr = xv.row(r);
                        for (k, &gk) in gr.iter().enumerate() {
                            if gk != T::zero() {
                                axpy(gk, xr, dw.row_mut(k));
                            }
                        }
                    }
                });
            }
            Op::AddBias { x, b } => {
                self.accumulate(grads, *x, |dx| add_into(dx, g));
                self.accumulate(grads, *b, |db| {
                    let d = db.data_mut();
                    for r in 0..g.rows() {
                        for (dj, &gj) in d.iter_mut().zip(g.row(r)) {
                            *dj += gj;
                        }
                    }
                });
            }
            Op::Activate { x, act } => {
                let y = &node.value;
                self.accumulate(grads, *x, |dx| {
                    for ((d, &gi), &yi) in dx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gi * act.derivative_from_output(yi);
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |da| add_into(da, g));
                self.accumulate(grads, *b, |db| add_into(db, g));
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |da| add_into(da, g));
                self.accumulate(grads, *b, |db| {
                    for (d, &gi) in db.data_mut().iter_mut().zip(g.data()) {
                        *d -= gi;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                self.accumulate(grads, *a, |da| {
                    for ((d, &gi), &bi) in da.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *d += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for ((d, &gi), &ai) in db.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Scale { a, k } => {
                self.accumulate(grads, *a, |da| {
                    for (d, &gi) in da.data_mut().iter_mut().zip(g.data()) {
                        *d += gi * *k;
                    }
                });
            }
            Op::Sum { a } => {
                let g0 = g.data()[0];
                self.accumulate(grads, *a, |da| da.data_mut().iter_mut().for_each(|d| *d += g0));
            }
            Op::SumSquares { a } => {
                let g0 = g.data()[0] * two;
                let av = &self.nodes[*a].value;
                self.accumulate(grads, *a, |da| {
                    for (d, &x) in da.data_mut().iter_mut().zip(av.data()) {
                        *d += g0 * x;
                    }
                });
            }
            Op::MeanSquares { a } => {
                let av = &self.nodes[*a].value;
                let n = T::from_usize(av.data().len().max(1)).unwrap();
                let g0 = g.data()[0] * two / n;
                self.accumulate(grads, *a, |da| {
                    for (d, &x) in da.data_mut().iter_mut().zip(av.data()) {
                        *d += g0 * x;
                    }
                });
            }
            Op::RowSquaredNorm { a } => {
                let av = &self.nodes[*a].value;
                self.accumulate(grads, *a, |da| {
                    for r in 0..av.rows() {
                        let gr = g.get(r, 0) * two;
                        for (d, &x) in da.row_mut(r).iter_mut().zip(av.row(r)) {
                            *d += gr * x;
                        }
                    }
                });
            }
            Op::WeightedSum { a, w } => {
                let g0 = g.data()[0];
                self.accumulate(grads, *a, |da| {
                    for (d, &wi) in da.data_mut().iter_mut().zip(w) {
                        *d += g0 * wi;
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let zv = &self.nodes[*logits].value;
                let n = T::from_usize(targets.len().max(1)).unwrap();
                let g0 = g.data()[0] / n;
                self.accumulate(grads, *logits, |dz| {
                    for ((d, &z), &y) in dz.data_mut().iter_mut().zip(zv.data()).zip(targets) {
                        let p = T::one() / (T::one() + (-z).exp());
                        *d += g0 * (p - y);
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut Matrix<T>, src: &Matrix<T>) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of every layer in `params`, shaped like `params`. Parameters
    /// the loss does not depend on get zeros.
    pub fn mlp(&self, params: &MlpParams<T>, vars: &MlpVars) -> MlpParams<T> {
        let mut out = params.zeros_like();
        for (layer, (wv, bv)) in out.layers_mut().iter_mut().zip(vars.layers()) {
            if let Some(g) = self.get(*wv) {
                layer.weight.data_mut().copy_from_slice(g.data());
            }
            if let Some(g) = self.get(*bv) {
                layer.bias.copy_from_slice(g.data());
            }
        }
        out
    }
}

/// Evaluate `loss` on a fresh tape with `params` bound as trainable leaves
/// and return the loss value together with its gradient.
pub fn grad<T, F>(params: &MlpParams<T>, loss: F) -> Result<(T, MlpParams<T>)>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, &MlpVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let l = loss(&mut tape, &vars)?;
    let value = tape.value(l).data()[0];
    let grads = tape.backward(l)?;
    Ok((value, grads.mlp(params, &vars)))
}
