//! Minimal reverse-mode autodiff over `f64` matrices.
//!
//! A [`Tape`] records a computation as a flat list of nodes; [`Tape::backward`]
//! walks the list in reverse and accumulates gradients for every node that was
//! registered with [`Tape::leaf`]. Nodes created with [`Tape::constant`] carry
//! values but never receive gradients, and backward skips any subgraph that
//! cannot reach a leaf.
//!
//! All values are `[rows, cols]` matrices; batched data puts one sample per
//! row and scalars are `[1, 1]`. The op set is exactly what the training
//! objectives need — this is not a general tensor library.

use ndarray::{concatenate, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    /// `[n,m] · [m,p]`
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[n,m] + [1,m]`, bias broadcast over rows.
    AddRow(Var, Var),
    /// `[n,m] * [n,1]`, column broadcast.
    MulCol(Var, Var),
    /// `[n,m] - [n,1]`, column broadcast.
    SubCol(Var, Var),
    Scale(Var, f64),
    /// `x + c` elementwise.
    Offset(Var),
    Neg(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Softplus(Var),
    Elu(Var),
    Tanh(Var),
    Square(Var),
    /// Sum of all entries, `[1,1]`.
    SumAll(Var),
    /// Row-wise sum over columns, `[n,1]`.
    SumRows(Var),
    ConcatCols(Var, Var),
    /// Half-open column range.
    SliceCols(Var, usize, usize),
    /// Half-open row range.
    SliceRows(Var, usize, usize),
    /// Row-wise softmax.
    SoftmaxRows(Var),
    /// Row-wise log-sum-exp, `[n,1]`.
    LogSumExpRows(Var),
    /// Identity above `knee`; saturates logarithmically below it. C1.
    SaturateBelow(Var, f64, f64),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` required one and was reached.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, value: Array2<f64>, op: Op) -> Var {
        let ng = self.nodes[a.0].needs_grad;
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Array2<f64>, op: Op) -> Var {
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(value, op, ng)
    }

    /// Register a differentiable input (parameters, latent draws being tracked).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Register a non-differentiable input (data, noise, frozen parameters).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `[1,1]` node as a plain scalar.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.dim(), self.nodes[b.0].value.dim());
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.dim(), self.nodes[b.0].value.dim());
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.dim(), self.nodes[b.0].value.dim());
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.binary(a, b, v, Op::Mul(a, b))
    }

    /// `x + bias` with `bias` shaped `[1, m]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        assert_eq!(self.nodes[bias.0].value.nrows(), 1);
        assert_eq!(
            self.nodes[x.0].value.ncols(),
            self.nodes[bias.0].value.ncols()
        );
        let v = &self.nodes[x.0].value + &self.nodes[bias.0].value;
        self.binary(x, bias, v, Op::AddRow(x, bias))
    }

    /// `x * col` with `col` shaped `[n, 1]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        assert_eq!(self.nodes[col.0].value.ncols(), 1);
        assert_eq!(
            self.nodes[x.0].value.nrows(),
            self.nodes[col.0].value.nrows()
        );
        let v = &self.nodes[x.0].value * &self.nodes[col.0].value;
        self.binary(x, col, v, Op::MulCol(x, col))
    }

    /// `x - col` with `col` shaped `[n, 1]`.
    pub fn sub_col(&mut self, x: Var, col: Var) -> Var {
        assert_eq!(self.nodes[col.0].value.ncols(), 1);
        assert_eq!(
            self.nodes[x.0].value.nrows(),
            self.nodes[col.0].value.nrows()
        );
        let v = &self.nodes[x.0].value - &self.nodes[col.0].value;
        self.binary(x, col, v, Op::SubCol(x, col))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        self.unary(a, v, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value + c;
        self.unary(a, v, Op::Offset(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -&self.nodes[a.0].value;
        self.unary(a, v, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.unary(a, v, Op::Ln(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        self.unary(a, v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(softplus);
        self.unary(a, v, Op::Softplus(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self
            .nodes[a.0]
            .value
            .mapv(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        self.unary(a, v, Op::Elu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.unary(a, v, Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.unary(a, v, Op::Square(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.unary(a, v, Op::SumAll(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0]
            .value
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        self.unary(a, v, Op::SumRows(a))
    }

    /// Mean of all entries as a `[1,1]` scalar node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = concatenate![
            Axis(1),
            self.nodes[a.0].value.view(),
            self.nodes[b.0].value.view()
        ];
        self.binary(a, b, v, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![.., start..end])
            .to_owned();
        self.unary(a, v, Op::SliceCols(a, start, end))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![start..end, ..])
            .to_owned();
        self.unary(a, v, Op::SliceRows(a, start, end))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.unary(a, v, Op::SoftmaxRows(a))
    }

    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = Array2::zeros((x.nrows(), 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            v[[i, 0]] = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        }
        self.unary(a, v, Op::LogSumExpRows(a))
    }

    /// Exactly `x` where `x >= knee`; below the knee the output bends to
    /// `knee - softness * ln(1 + (knee - x)/softness)`, so unbounded inputs
    /// contribute bounded-slope, logarithmically growing values. Continuous
    /// with slope 1 at the knee.
    pub fn saturate_below(&mut self, a: Var, knee: f64, softness: f64) -> Var {
        assert!(softness > 0.0);
        let v = self.nodes[a.0].value.mapv(|x| {
            if x >= knee {
                x
            } else {
                knee - softness * ((knee - x) / softness).ln_1p()
            }
        });
        self.unary(a, v, Op::SaturateBelow(a, knee, softness))
    }

    /// Accumulate gradients of a `[1,1]` loss node into every reachable leaf.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "backward() expects a scalar loss node"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };

            macro_rules! acc {
                ($var:expr, $contrib:expr) => {
                    if self.nodes[$var.0].needs_grad {
                        let contrib = $contrib;
                        match &mut grads[$var.0] {
                            Some(existing) => *existing += &contrib,
                            slot => *slot = Some(contrib),
                        }
                    }
                };
            }

            match self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc!(a, g.dot(&self.nodes[b.0].value.t()));
                    acc!(b, self.nodes[a.0].value.t().dot(&g));
                }
                Op::Add(a, b) => {
                    acc!(a, g.clone());
                    acc!(b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc!(a, g.clone());
                    acc!(b, -&g);
                }
                Op::Mul(a, b) => {
                    acc!(a, &g * &self.nodes[b.0].value);
                    acc!(b, &g * &self.nodes[a.0].value);
                }
                Op::AddRow(x, bias) => {
                    acc!(x, g.clone());
                    acc!(bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::MulCol(x, col) => {
                    acc!(x, &g * &self.nodes[col.0].value);
                    acc!(
                        col,
                        (&g * &self.nodes[x.0].value)
                            .sum_axis(Axis(1))
                            .insert_axis(Axis(1))
                    );
                }
                Op::SubCol(x, col) => {
                    acc!(x, g.clone());
                    acc!(col, -g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
                Op::Scale(a, c) => acc!(a, &g * c),
                Op::Offset(a) => acc!(a, g.clone()),
                Op::Neg(a) => acc!(a, -&g),
                Op::Exp(a) => acc!(a, &g * &self.nodes[idx].value),
                Op::Ln(a) => acc!(a, &g / &self.nodes[a.0].value),
                Op::Sigmoid(a) => {
                    let out = &self.nodes[idx].value;
                    acc!(a, &g * &(out * &(1.0 - out)));
                }
                Op::Softplus(a) => {
                    acc!(a, &g * &self.nodes[a.0].value.mapv(sigmoid));
                }
                Op::Elu(a) => {
                    let d = self.nodes[a.0]
                        .value
                        .mapv(|x| if x > 0.0 { 1.0 } else { x.exp() });
                    acc!(a, &g * &d);
                }
                Op::Tanh(a) => {
                    let out = &self.nodes[idx].value;
                    acc!(a, &g * &out.mapv(|t| 1.0 - t * t));
                }
                Op::Square(a) => {
                    acc!(a, &g * &(2.0 * &self.nodes[a.0].value));
                }
                Op::SumAll(a) => {
                    let shape = self.nodes[a.0].value.dim();
                    acc!(a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::SumRows(a) => {
                    let cols = self.nodes[a.0].value.ncols();
                    let mut out = Array2::zeros(self.nodes[a.0].value.dim());
                    for (mut row, &gi) in out.rows_mut().into_iter().zip(g.column(0)) {
                        row.fill(gi);
                    }
                    let _ = cols;
                    acc!(a, out);
                }
                Op::ConcatCols(a, b) => {
                    let na = self.nodes[a.0].value.ncols();
                    acc!(a, g.slice(ndarray::s![.., ..na]).to_owned());
                    acc!(b, g.slice(ndarray::s![.., na..]).to_owned());
                }
                Op::SliceCols(a, start, end) => {
                    let mut out = Array2::zeros(self.nodes[a.0].value.dim());
                    out.slice_mut(ndarray::s![.., start..end]).assign(&g);
                    acc!(a, out);
                }
                Op::SliceRows(a, start, end) => {
                    let mut out = Array2::zeros(self.nodes[a.0].value.dim());
                    out.slice_mut(ndarray::s![start..end, ..]).assign(&g);
                    acc!(a, out);
                }
                Op::SoftmaxRows(a) => {
                    let s = &self.nodes[idx].value;
                    let mut out = Array2::zeros(s.dim());
                    for i in 0..s.nrows() {
                        let dot: f64 = (0..s.ncols()).map(|j| g[[i, j]] * s[[i, j]]).sum();
                        for j in 0..s.ncols() {
                            out[[i, j]] = s[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    acc!(a, out);
                }
                Op::LogSumExpRows(a) => {
                    let x = &self.nodes[a.0].value;
                    let lse = &self.nodes[idx].value;
                    let mut out = Array2::zeros(x.dim());
                    for i in 0..x.nrows() {
                        for j in 0..x.ncols() {
                            out[[i, j]] = (x[[i, j]] - lse[[i, 0]]).exp() * g[[i, 0]];
                        }
                    }
                    acc!(a, out);
                }
                Op::SaturateBelow(a, knee, softness) => {
                    let d = self.nodes[a.0].value.mapv(|x| {
                        if x >= knee {
                            1.0
                        } else {
                            1.0 / (1.0 + (knee - x) / softness)
                        }
                    });
                    acc!(a, &g * &d);
                }
            }
        }

        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` w.r.t. every entry of every input.
    fn numeric_grads(
        f: &dyn Fn(&mut Tape, &[Var]) -> Var,
        inputs: &[Array2<f64>],
        h: f64,
    ) -> Vec<Array2<f64>> {
        let eval = |inputs: &[Array2<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
            let loss = f(&mut tape, &vars);
            tape.scalar(loss)
        };
        inputs
            .iter()
            .enumerate()
            .map(|(k, x)| {
                let mut g = Array2::zeros(x.dim());
                for idx in 0..x.len() {
                    let (i, j) = (idx / x.ncols(), idx % x.ncols());
                    let mut plus = inputs.to_vec();
                    plus[k][[i, j]] += h;
                    let mut minus = inputs.to_vec();
                    minus[k][[i, j]] -= h;
                    g[[i, j]] = (eval(&plus) - eval(&minus)) / (2.0 * h);
                }
                g
            })
            .collect()
    }

    fn check(f: &dyn Fn(&mut Tape, &[Var]) -> Var, inputs: &[Array2<f64>]) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss);
        let numeric = numeric_grads(f, inputs, 1e-5);
        for (k, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).expect("leaf should receive a gradient");
            for (a, n) in analytic.iter().zip(numeric[k].iter()) {
                let scale = a.abs().max(n.abs()).max(1.0);
                assert!(
                    (a - n).abs() / scale < 1e-6,
                    "input {k}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 4, 2);
        check(
            &|t, v| {
                let y = t.matmul(v[0], v[1]);
                let y = t.elu(y);
                t.sum_all(y)
            },
            &[a, b],
        );
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 2, 5);
        let y = rand_mat(&mut rng, 2, 5);
        check(
            &|t, v| {
                let p = t.mul(v[0], v[1]);
                let q = t.sigmoid(p);
                let r = t.softplus(v[0]);
                let s = t.add(q, r);
                let s = t.tanh(s);
                let s = t.square(s);
                t.sum_all(s)
            },
            &[x, y],
        );
    }

    #[test]
    fn exp_ln_scale_offset_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_mat(&mut rng, 3, 3).mapv(|v| v.abs() + 0.5);
        check(
            &|t, v| {
                let e = t.exp(v[0]);
                let l = t.ln(e);
                let l = t.scale(l, 2.5);
                let l = t.offset(l, -0.75);
                let l = t.neg(l);
                t.sum_all(l)
            },
            &[x],
        );
    }

    #[test]
    fn broadcast_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_mat(&mut rng, 4, 3);
        let bias = rand_mat(&mut rng, 1, 3);
        let col = rand_mat(&mut rng, 4, 1);
        check(
            &|t, v| {
                let y = t.add_row(v[0], v[1]);
                let y = t.mul_col(y, v[2]);
                let y = t.sub_col(y, v[2]);
                let y = t.sum_rows(y);
                let y = t.square(y);
                t.sum_all(y)
            },
            &[x, bias, col],
        );
    }

    #[test]
    fn softmax_and_logsumexp_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_mat(&mut rng, 3, 4);
        check(
            &|t, v| {
                let s = t.softmax_rows(v[0]);
                let lse = t.log_sum_exp_rows(v[0]);
                let centered = t.sub_col(v[0], lse);
                let y = t.mul(s, centered);
                let y = t.sum_rows(y);
                t.sum_all(y)
            },
            &[x],
        );
    }

    #[test]
    fn concat_and_slice_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_mat(&mut rng, 4, 2);
        let b = rand_mat(&mut rng, 4, 3);
        check(
            &|t, v| {
                let c = t.concat_cols(v[0], v[1]);
                let left = t.slice_cols(c, 0, 3);
                let right = t.slice_cols(c, 2, 5);
                let top = t.slice_rows(c, 0, 2);
                let l = t.sum_all(left);
                let r = t.sum_all(right);
                let r2 = t.square(r);
                let tt = t.sum_all(top);
                let s = t.add(l, r2);
                let s = t.add(s, tt);
                t.square(s)
            },
            &[a, b],
        );
    }

    #[test]
    fn saturate_below_matches_finite_differences_and_is_identity_above_knee() {
        // Identity region: exact passthrough.
        let mut tape = Tape::new();
        let x = tape.leaf(array![[-0.9, 0.0, 3.7]]);
        let y = tape.saturate_below(x, -1.0, 0.5);
        assert_eq!(tape.value(y), tape.value(x));

        // Saturated region shrinks values and gradients but keeps C1.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vals = Array2::from_shape_fn((2, 3), |_| rng.random_range(-6.0..2.0));
        check(
            &|t, v| {
                let s = t.saturate_below(v[0], -1.0, 0.5);
                let s = t.square(s);
                t.sum_all(s)
            },
            &[vals],
        );
    }

    #[test]
    fn reused_node_accumulates_gradient() {
        // y = x*x + x used twice: dy/dx = 2x + 1.
        let mut tape = Tape::new();
        let x = tape.leaf(array![[3.0]]);
        let sq = tape.square(x);
        let sum = tape.add(sq, x);
        let loss = tape.sum_all(sum);
        let grads = tape.backward(loss);
        assert!((grads.get(x).unwrap()[[0, 0]] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[2.0]]);
        let c = tape.constant(array![[5.0]]);
        let y = tape.mul(x, c);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        assert!(grads.get(c).is_none());
        assert!((grads.get(x).unwrap()[[0, 0]] - 5.0).abs() < 1e-12);
    }
}
