//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] is a Wengert list: every operation appends a node holding its
//! value and enough information to push gradients back to its parents.
//! Values are dense row-major [`Array2<f64>`]; vectors are 1×n matrices.
//!
//! Matrix products use hand-rolled kernels with a fixed k-summation order, so
//! results are bitwise reproducible and each output row is computed
//! independently of how many rows the batch has.

use ndarray::Array2;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Matrix (m×n) plus a broadcast row (1×n).
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var, Array2<f64>),
    MulConst(Var, Array2<f64>),
    SoftmaxRows(Var),
    Silu(Var),
    SumAll(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    /// Column-wise max over rows; saved argmax row per column.
    MaxPoolRows(Var, Vec<usize>),
    /// out.flat[k] = src.flat[idx[k]]; backward scatter-adds.
    Gather(Var, Vec<usize>),
    /// value = scalar_var * const_matrix.
    ScaleConst(Var, Array2<f64>),
    /// Externally computed scalar with a fixed gradient w.r.t. one input.
    External(Var, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    store: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the backward root with respect to `var`, if any path
    /// touched it. Absent entries mean an exactly-zero gradient.
    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.store[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Option<Array2<f64>> {
        self.store[var.0].take()
    }
}

/// A growable computation record. Build values through the methods below,
/// then call [`Tape::backward`] on a 1×1 scalar node.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, var: Var) -> f64 {
        let v = self.value(var);
        assert_eq!(v.dim(), (1, 1), "scalar() on non-scalar node");
        v[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf. Leaves accumulate gradients; use for parameters and for
    /// inputs whose gradient is of interest. Constants may also be leaves —
    /// their gradient is simply never read.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_nn(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `a` (m×n) plus row vector `row` (1×n) broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.value(a).dim();
        assert_eq!(self.value(row).dim(), (1, n), "add_row shape");
        let mut v = self.value(a).clone();
        for i in 0..m {
            for j in 0..n {
                v[(i, j)] += self.value(row)[(0, j)];
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let v = self.value(a) + &c;
        self.push(v, Op::AddConst(a, c))
    }

    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = x.dim();
        let mut y = Array2::zeros((m, n));
        for i in 0..m {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                mx = mx.max(x[(i, j)]);
            }
            let mut s = 0.0;
            for j in 0..n {
                let e = (x[(i, j)] - mx).exp();
                y[(i, j)] = e;
                s += e;
            }
            for j in 0..n {
                y[(i, j)] /= s;
            }
        }
        self.push(y, Op::SoftmaxRows(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let k = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / k)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let (m, n) = x.dim();
        assert!(start + len <= n, "slice_cols out of bounds");
        let mut v = Array2::zeros((m, len));
        for i in 0..m {
            for j in 0..len {
                v[(i, j)] = x[(i, start + j)];
            }
        }
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let xa = self.value(a);
        let xb = self.value(b);
        let (m, na) = xa.dim();
        let (mb, nb) = xb.dim();
        assert_eq!(m, mb, "concat_cols row mismatch");
        let mut v = Array2::zeros((m, na + nb));
        for i in 0..m {
            for j in 0..na {
                v[(i, j)] = xa[(i, j)];
            }
            for j in 0..nb {
                v[(i, na + j)] = xb[(i, j)];
            }
        }
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let xa = self.value(a);
        let xb = self.value(b);
        let (ma, n) = xa.dim();
        let (mb, nb) = xb.dim();
        assert_eq!(n, nb, "concat_rows col mismatch");
        let mut v = Array2::zeros((ma + mb, n));
        for i in 0..ma {
            for j in 0..n {
                v[(i, j)] = xa[(i, j)];
            }
        }
        for i in 0..mb {
            for j in 0..n {
                v[(ma + i, j)] = xb[(i, j)];
            }
        }
        self.push(v, Op::ConcatRows(a, b))
    }

    /// Column-wise max over rows, yielding 1×n. Ties resolve to the lowest
    /// row index, which keeps the subgradient choice deterministic.
    pub fn max_pool_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = x.dim();
        assert!(m >= 1, "max_pool_rows on empty matrix");
        let mut v = Array2::zeros((1, n));
        let mut arg = vec![0usize; n];
        for j in 0..n {
            let mut best = x[(0, j)];
            let mut bi = 0;
            for i in 1..m {
                if x[(i, j)] > best {
                    best = x[(i, j)];
                    bi = i;
                }
            }
            v[(0, j)] = best;
            arg[j] = bi;
        }
        self.push(v, Op::MaxPoolRows(a, arg))
    }

    /// Gather flat elements of `src` into an m×n matrix:
    /// `out[i][j] = src.flat[idx[i*n + j]]`.
    pub fn gather(&mut self, src: Var, idx: &[usize], shape: (usize, usize)) -> Var {
        let (m, n) = shape;
        assert_eq!(idx.len(), m * n, "gather index count");
        let flat: Vec<f64> = {
            let s = self.value(src);
            let sl = s.as_slice().expect("gather source must be standard layout");
            idx.iter().map(|&k| sl[k]).collect()
        };
        let v = Array2::from_shape_vec((m, n), flat).unwrap();
        self.push(v, Op::Gather(src, idx.to_vec()))
    }

    /// `scalar_var` (1×1) times a constant matrix.
    pub fn scale_const(&mut self, scalar: Var, c: Array2<f64>) -> Var {
        let s = self.scalar(scalar);
        let v = c.mapv(|x| x * s);
        self.push(v, Op::ScaleConst(scalar, c))
    }

    /// Insert an externally computed scalar whose gradient with respect to
    /// `input` was derived outside the tape (e.g. through forward kinematics).
    pub fn external_scalar(&mut self, input: Var, value: f64, grad: Array2<f64>) -> Var {
        assert_eq!(
            grad.dim(),
            self.value(input).dim(),
            "external gradient shape must match input"
        );
        self.push(Array2::from_elem((1, 1), value), Op::External(input, grad))
    }

    /// Reverse pass seeded with d(root)/d(root) = 1. `root` must be 1×1.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut store: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        store[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = store[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    store[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = matmul_nt(&g, self.value(*b));
                    let db = matmul_tn(self.value(*a), &g);
                    accumulate(&mut store, *a, da);
                    accumulate(&mut store, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut store, *a, g.clone());
                    accumulate(&mut store, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut store, *a, g.clone());
                    accumulate(&mut store, *b, -&g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    accumulate(&mut store, *a, da);
                    accumulate(&mut store, *b, db);
                }
                Op::AddRow(a, row) => {
                    let (m, n) = g.dim();
                    let mut dr = Array2::zeros((1, n));
                    for i in 0..m {
                        for j in 0..n {
                            dr[(0, j)] += g[(i, j)];
                        }
                    }
                    accumulate(&mut store, *a, g);
                    accumulate(&mut store, *row, dr);
                }
                Op::Scale(a, c) => accumulate(&mut store, *a, g.mapv(|x| x * c)),
                Op::AddConst(a, _) => accumulate(&mut store, *a, g),
                Op::MulConst(a, c) => accumulate(&mut store, *a, &g * c),
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let (m, n) = y.dim();
                    let mut dx = Array2::zeros((m, n));
                    for r in 0..m {
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g[(r, j)] * y[(r, j)];
                        }
                        for j in 0..n {
                            dx[(r, j)] = (g[(r, j)] - dot) * y[(r, j)];
                        }
                    }
                    accumulate(&mut store, *a, dx);
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let dx = ndarray::Zip::from(&g).and(x).map_collect(|&gi, &xi| {
                        let s = sigmoid(xi);
                        gi * (s + xi * s * (1.0 - s))
                    });
                    accumulate(&mut store, *a, dx);
                }
                Op::SumAll(a) => {
                    let s = g[(0, 0)];
                    let dx = Array2::from_elem(self.value(*a).dim(), s);
                    accumulate(&mut store, *a, dx);
                }
                Op::SliceCols(a, start, len) => {
                    let (m, n) = self.value(*a).dim();
                    let mut dx = Array2::zeros((m, n));
                    for r in 0..m {
                        for j in 0..*len {
                            dx[(r, start + j)] = g[(r, j)];
                        }
                    }
                    accumulate(&mut store, *a, dx);
                }
                Op::ConcatCols(a, b) => {
                    let (m, na) = self.value(*a).dim();
                    let nb = self.value(*b).dim().1;
                    let mut da = Array2::zeros((m, na));
                    let mut db = Array2::zeros((m, nb));
                    for r in 0..m {
                        for j in 0..na {
                            da[(r, j)] = g[(r, j)];
                        }
                        for j in 0..nb {
                            db[(r, j)] = g[(r, na + j)];
                        }
                    }
                    accumulate(&mut store, *a, da);
                    accumulate(&mut store, *b, db);
                }
                Op::ConcatRows(a, b) => {
                    let (ma, n) = self.value(*a).dim();
                    let mb = self.value(*b).dim().0;
                    let mut da = Array2::zeros((ma, n));
                    let mut db = Array2::zeros((mb, n));
                    for r in 0..ma {
                        for j in 0..n {
                            da[(r, j)] = g[(r, j)];
                        }
                    }
                    for r in 0..mb {
                        for j in 0..n {
                            db[(r, j)] = g[(ma + r, j)];
                        }
                    }
                    accumulate(&mut store, *a, da);
                    accumulate(&mut store, *b, db);
                }
                Op::MaxPoolRows(a, arg) => {
                    let (m, n) = self.value(*a).dim();
                    let mut dx = Array2::zeros((m, n));
                    for j in 0..n {
                        dx[(arg[j], j)] += g[(0, j)];
                    }
                    accumulate(&mut store, *a, dx);
                }
                Op::Gather(a, idx) => {
                    let mut dx = Array2::zeros(self.value(*a).dim());
                    {
                        let sl = dx.as_slice_mut().unwrap();
                        let gs = g.as_slice().unwrap();
                        for (k, &src_idx) in idx.iter().enumerate() {
                            sl[src_idx] += gs[k];
                        }
                    }
                    accumulate(&mut store, *a, dx);
                }
                Op::ScaleConst(s, c) => {
                    let mut ds = 0.0;
                    for (gi, ci) in g.iter().zip(c.iter()) {
                        ds += gi * ci;
                    }
                    accumulate(&mut store, *s, Array2::from_elem((1, 1), ds));
                }
                Op::External(input, grad) => {
                    let scale = g[(0, 0)];
                    accumulate(&mut store, *input, grad.mapv(|x| x * scale));
                }
            }
        }
        Grads { store }
    }
}

fn accumulate(store: &mut [Option<Array2<f64>>], var: Var, g: Array2<f64>) {
    match &mut store[var.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// C = A · B with a fixed i-k-j loop order. Each output row is accumulated
/// in ascending k order and independently of every other row.
pub fn matmul_nn(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (m, ka) = a.dim();
    let (kb, n) = b.dim();
    assert_eq!(ka, kb, "matmul inner dimension mismatch");
    let mut c = Array2::zeros((m, n));
    let asl = a.as_slice().expect("matmul lhs must be standard layout");
    let bsl = b.as_slice().expect("matmul rhs must be standard layout");
    let csl = c.as_slice_mut().unwrap();
    for i in 0..m {
        let crow = &mut csl[i * n..(i + 1) * n];
        for k in 0..ka {
            let aik = asl[i * ka + k];
            let brow = &bsl[k * n..(k + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow.iter()) {
                *cj += aik * bj;
            }
        }
    }
    c
}

/// C = A · Bᵀ (row-by-row dot products, ascending k).
pub fn matmul_nt(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (m, ka) = a.dim();
    let (n, kb) = b.dim();
    assert_eq!(ka, kb, "matmul_nt inner dimension mismatch");
    let mut c = Array2::zeros((m, n));
    let asl = a.as_slice().expect("matmul_nt lhs must be standard layout");
    let bsl = b.as_slice().expect("matmul_nt rhs must be standard layout");
    for i in 0..m {
        let arow = &asl[i * ka..(i + 1) * ka];
        for j in 0..n {
            let brow = &bsl[j * kb..(j + 1) * kb];
            let mut s = 0.0;
            for k in 0..ka {
                s += arow[k] * brow[k];
            }
            c[(i, j)] = s;
        }
    }
    c
}

/// C = Aᵀ · B (ascending k over A's rows).
pub fn matmul_tn(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ka, m) = a.dim();
    let (kb, n) = b.dim();
    assert_eq!(ka, kb, "matmul_tn inner dimension mismatch");
    let mut c = Array2::zeros((m, n));
    let asl = a.as_slice().expect("matmul_tn lhs must be standard layout");
    let bsl = b.as_slice().expect("matmul_tn rhs must be standard layout");
    let csl = c.as_slice_mut().unwrap();
    for k in 0..ka {
        let arow = &asl[k * m..(k + 1) * m];
        let brow = &bsl[k * n..(k + 1) * n];
        for i in 0..m {
            let aki = arow[i];
            let crow = &mut csl[i * n..(i + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow.iter()) {
                *cj += aki * bj;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_grad(mut f: impl FnMut(&Array2<f64>) -> f64, x: &Array2<f64>, h: f64) -> Array2<f64> {
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!(
                (x - y).abs() / denom < tol,
                "gradient mismatch: {x} vs {y}"
            );
        }
    }

    #[test]
    fn matmul_kernels_agree() {
        let a = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let b = array![[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]];
        let c = matmul_nn(&a, &b);
        assert_eq!(c, array![[58.0, 64.0], [139.0, 154.0]]);
        let bt = array![[7.0, 9.0, 11.0], [8.0, 10.0, 12.0]];
        assert_eq!(matmul_nt(&a, &bt), c);
        let at = array![[1.0, 4.0], [2.0, 5.0], [3.0, 6.0]];
        assert_eq!(matmul_tn(&at, &b), c);
    }

    #[test]
    fn grad_composite_matches_finite_differences() {
        // f(X) = sum(softmax(X W + row) * silu(X)) exercises most ops.
        let x0 = array![[0.3, -0.7, 0.5], [1.1, 0.2, -0.4]];
        let w0 = array![[0.1, -0.2, 0.4], [0.7, 0.3, -0.5], [-0.6, 0.2, 0.8]];
        let r0 = array![[0.05, -0.1, 0.2]];

        let eval = |x: &Array2<f64>, w: &Array2<f64>, r: &Array2<f64>| -> (f64, Grads, (Var, Var, Var)) {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let rv = t.leaf(r.clone());
            let xw = t.matmul(xv, wv);
            let pre = t.add_row(xw, rv);
            let sm = t.softmax_rows(pre);
            let act = t.silu(xv);
            let prod = t.mul(sm, act);
            let out = t.sum_all(prod);
            let val = t.scalar(out);
            let g = t.backward(out);
            (val, g, (xv, wv, rv))
        };

        let (_, grads, (xv, wv, rv)) = eval(&x0, &w0, &r0);
        let h = 1e-6;
        let fx = fd_grad(|x| eval(x, &w0, &r0).0, &x0, h);
        let fw = fd_grad(|w| eval(&x0, w, &r0).0, &w0, h);
        let fr = fd_grad(|r| eval(&x0, &w0, r).0, &r0, h);
        assert_close(grads.get(xv).unwrap(), &fx, 1e-6);
        assert_close(grads.get(wv).unwrap(), &fw, 1e-6);
        assert_close(grads.get(rv).unwrap(), &fr, 1e-6);
    }

    #[test]
    fn grad_slice_concat_pool_gather() {
        let x0 = array![[0.2, -0.4, 0.9, 0.1], [0.5, 0.8, -0.3, 0.6]];
        let emb0 = array![[0.3, -0.2, 0.7, 0.4]];
        let idx = vec![2usize, 0, 1, 3, 3, 0, 2, 1];

        let eval = |x: &Array2<f64>, emb: &Array2<f64>| -> (f64, Grads, (Var, Var)) {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let ev = t.leaf(emb.clone());
            let left = t.slice_cols(xv, 0, 2);
            let right = t.slice_cols(xv, 2, 2);
            let swapped = t.concat_cols(right, left);
            let stacked = t.concat_rows(swapped, xv);
            let pooled = t.max_pool_rows(stacked);
            let gathered = t.gather(ev, &idx, (2, 4));
            let prod = t.mul(gathered, stacked);
            let a = t.sum_all(prod);
            let b = t.sum_all(pooled);
            let out = t.add(a, b);
            let val = t.scalar(out);
            let g = t.backward(out);
            (val, g, (xv, ev))
        };

        let (_, grads, (xv, ev)) = eval(&x0, &emb0);
        let h = 1e-6;
        let fx = fd_grad(|x| eval(x, &emb0).0, &x0, h);
        let fe = fd_grad(|e| eval(&x0, e).0, &emb0, h);
        assert_close(grads.get(xv).unwrap(), &fx, 1e-6);
        assert_close(grads.get(ev).unwrap(), &fe, 1e-6);
    }

    #[test]
    fn external_scalar_injects_fixed_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0]]);
        let doubled = t.scale(x, 2.0);
        let ext = t.external_scalar(doubled, 5.0, array![[0.5, -1.5]]);
        let out = t.scale(ext, 3.0);
        assert_eq!(t.scalar(out), 15.0);
        let g = t.backward(out);
        // d(out)/dx = 3 * grad * 2
        assert_eq!(g.get(x).unwrap(), &array![[3.0, -9.0]]);
    }

    #[test]
    fn scale_const_gradient() {
        let c = array![[1.0, 2.0], [3.0, 4.0]];
        let mut t = Tape::new();
        let s = t.leaf(array![[0.5]]);
        let m = t.scale_const(s, c.clone());
        let out = t.sum_all(m);
        assert_eq!(t.scalar(out), 5.0);
        let g = t.backward(out);
        assert_eq!(g.get(s).unwrap()[(0, 0)], 10.0);
    }
}
