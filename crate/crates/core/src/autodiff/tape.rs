use crate::error::{Error, Result};
use crate::linalg::{cholesky, solve_triangular_raw, sorted_sum, Matrix, Side};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sqrt(Var),
    Recip(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumSorted(Var),
    SumRows(Var),
    SumCols(Var),
    Expand(Var),
    TileRows(Var, usize),
    FoldRows(Var, usize),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    PadCols(Var, usize),
    Cholesky(Var),
    SolveLower(Var, Var),
    SolveLowerT(Var, Var),
    Diag(Var),
    DiagEmbed(Var),
    Tril(Var),
    TrilHalfDiag(Var),
    LogSumExpRows(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Eager reverse-mode tape over matrix-valued nodes.
///
/// Every operation computes its value immediately and records how it was
/// produced. [`Tape::grad`] walks the record backwards and writes the
/// adjoints as new nodes on the same tape, so a gradient is itself a
/// differentiable expression (one extra level is what MAML needs).
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant; gradients never flow into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Matrix::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::DimensionMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).map(f);
        self.record(v, op, &[a])
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.record(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.record(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.record(v, Op::Mul(a, b), &[a, b]))
    }

    /// `a / b`, as `a * recip(b)`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let r = self.recip(b);
        self.mul(a, r)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `log(1 + e^x)`, switching to the asymptotic branch for large `|x|`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| 1.0 / x)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Hard clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    // ---- reductions and shape ------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.record(v, Op::Sum(a), &[a])
    }

    /// Sum whose forward value does not depend on the order of the entries.
    pub fn sum_sorted(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(sorted_sum(self.value(a).as_slice()));
        self.record(v, Op::SumSorted(a), &[a])
    }

    /// `n x m -> n x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::from_fn(m.rows(), 1, |i, _| m.row_slice(i).iter().sum());
        self.record(v, Op::SumRows(a), &[a])
    }

    /// `n x m -> 1 x m`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut v = Matrix::zeros(1, m.cols());
        for i in 0..m.rows() {
            for (o, x) in v.as_mut_slice().iter_mut().zip(m.row_slice(i)) {
                *o += x;
            }
        }
        self.record(v, Op::SumCols(a), &[a])
    }

    /// Broadcasts a `1x1`, `rx1` or `1xc` node to `r x c`.
    pub fn expand(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        if (ar != 1 && ar != rows) || (ac != 1 && ac != cols) {
            return Err(Error::DimensionMismatch(format!(
                "cannot expand {ar}x{ac} to {rows}x{cols}"
            )));
        }
        if (ar, ac) == (rows, cols) {
            return Ok(a);
        }
        let m = self.value(a);
        let v = Matrix::from_fn(rows, cols, |i, j| m[(if ar == 1 { 0 } else { i }, if ac == 1 { 0 } else { j })]);
        Ok(self.record(v, Op::Expand(a), &[a]))
    }

    /// Stacks `k` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, k: usize) -> Var {
        let m = self.value(a);
        let mut data = Vec::with_capacity(m.len() * k);
        for _ in 0..k {
            data.extend_from_slice(m.as_slice());
        }
        let v = Matrix::from_vec(m.rows() * k, m.cols(), data).expect("tile shape");
        self.record(v, Op::TileRows(a, k), &[a])
    }

    /// Sums `k` equal vertical blocks; inverse shape of [`Tape::tile_rows`].
    pub fn fold_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if k == 0 || r % k != 0 {
            return Err(Error::DimensionMismatch(format!("cannot fold {r} rows into {k} blocks")));
        }
        let block = r / k;
        let m = self.value(a);
        let mut v = Matrix::zeros(block, c);
        for b in 0..k {
            let src = &m.as_slice()[b * block * c..(b + 1) * block * c];
            for (o, x) in v.as_mut_slice().iter_mut().zip(src) {
                *o += x;
            }
        }
        Ok(self.record(v, Op::FoldRows(a, k), &[a]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::DimensionMismatch(format!("concat_cols rows {ra} vs {rb}")));
        }
        let (ma, mb) = (self.value(a), self.value(b));
        let v = Matrix::from_fn(ra, ca + cb, |i, j| if j < ca { ma[(i, j)] } else { mb[(i, j - ca)] });
        Ok(self.record(v, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(Error::DimensionMismatch(format!("slice {start}+{len} of {c} cols")));
        }
        let m = self.value(a);
        let v = Matrix::from_fn(r, len, |i, j| m[(i, start + j)]);
        Ok(self.record(v, Op::SliceCols(a, start), &[a]))
    }

    fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        let (r, c) = self.shape(a);
        let m = self.value(a);
        let v = Matrix::from_fn(r, total, |i, j| if j >= start && j < start + c { m[(i, j - start)] } else { 0.0 });
        self.record(v, Op::PadCols(a, start), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.record(v, Op::Transpose(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.record(v, Op::MatMul(a, b), &[a, b]))
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag(&mut self, a: Var) -> Var {
        let v = Matrix::column(&self.value(a).diag());
        self.record(v, Op::Diag(a), &[a])
    }

    /// Column vector to diagonal matrix.
    pub fn diag_embed(&mut self, a: Var) -> Var {
        let v = Matrix::diag_from(self.value(a).as_slice());
        self.record(v, Op::DiagEmbed(a), &[a])
    }

    pub fn tril(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::from_fn(m.rows(), m.cols(), |i, j| if j <= i { m[(i, j)] } else { 0.0 });
        self.record(v, Op::Tril(a), &[a])
    }

    fn tril_half_diag(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::from_fn(m.rows(), m.cols(), |i, j| match j.cmp(&i) {
            std::cmp::Ordering::Less => m[(i, j)],
            std::cmp::Ordering::Equal => 0.5 * m[(i, j)],
            std::cmp::Ordering::Greater => 0.0,
        });
        self.record(v, Op::TrilHalfDiag(a), &[a])
    }

    /// Row-wise `log sum exp`, `n x m -> n x 1`. The inner sum is taken in
    /// sorted order so the result is invariant to column permutations.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::from_fn(m.rows(), 1, |i, _| logsumexp(m.row_slice(i)));
        self.record(v, Op::LogSumExpRows(a), &[a])
    }

    // ---- linear algebra --------------------------------------------------

    /// Cholesky factor of a symmetric positive-definite node (jitter ladder applies).
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let l = cholesky(self.value(a), 0.0)?.into_matrix();
        Ok(self.record(l, Op::Cholesky(a), &[a]))
    }

    /// `L^-1 B` for a lower-triangular `L`.
    pub fn solve_lower(&mut self, l: Var, b: Var) -> Result<Var> {
        let v = solve_triangular_raw(self.value(l), self.value(b), Side::Lower)?;
        Ok(self.record(v, Op::SolveLower(l, b), &[l, b]))
    }

    /// `L^-T B` for a lower-triangular `L`.
    pub fn solve_lower_t(&mut self, l: Var, b: Var) -> Result<Var> {
        let v = solve_triangular_raw(self.value(l), self.value(b), Side::LowerTransposed)?;
        Ok(self.record(v, Op::SolveLowerT(l, b), &[l, b]))
    }

    /// `log det(L L^T) = 2 sum log diag(L)`.
    pub fn log_det_from_chol(&mut self, l: Var) -> Var {
        let d = self.diag(l);
        let ld = self.log(d);
        let s = self.sum(ld);
        self.scale(s, 2.0)
    }

    /// `b^T (L L^T)^-1 b = ||L^-1 b||^2`, summed over the columns of `b`.
    pub fn quadratic_form(&mut self, l: Var, b: Var) -> Result<Var> {
        let z = self.solve_lower(l, b)?;
        let z2 = self.square(z);
        Ok(self.sum(z2))
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Adjoints of a scalar `output` with respect to each node in `wrt`.
    ///
    /// The adjoints are recorded on this tape and can be differentiated
    /// again. Nodes that `output` does not depend on get a zero adjoint.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.shape(output) != (1, 1) {
            return Err(Error::DimensionMismatch(format!(
                "gradient of a non-scalar {:?} node",
                self.shape(output)
            )));
        }
        let n = output.0 + 1;
        let mut adj: Vec<Option<Var>> = vec![None; n];
        adj[output.0] = Some(self.scalar(1.0));
        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op;
            let contributions = self.backward(op, Var(i), g)?;
            for (input, contrib) in contributions {
                adj[input.0] = Some(match adj[input.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(w);
                    self.constant(Matrix::zeros(r, c))
                }
            })
            .collect())
    }

    fn backward(&mut self, op: Op, out: Var, g: Var) -> Result<Vec<(Var, Var)>> {
        let mut acc = Vec::with_capacity(2);
        macro_rules! push {
            ($v:expr, $e:expr) => {
                if self.requires_grad($v) {
                    let c = $e;
                    acc.push(($v, c));
                }
            };
        }
        match op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                push!(a, g);
                push!(b, g);
            }
            Op::Sub(a, b) => {
                push!(a, g);
                push!(b, self.neg(g));
            }
            Op::Mul(a, b) => {
                push!(a, self.mul(g, b)?);
                push!(b, self.mul(g, a)?);
            }
            Op::Neg(a) => push!(a, self.neg(g)),
            Op::Scale(a, c) => push!(a, self.scale(g, c)),
            Op::AddScalar(a) => push!(a, g),
            Op::MatMul(a, b) => {
                push!(a, {
                    let bt = self.transpose(b);
                    self.matmul(g, bt)?
                });
                push!(b, {
                    let at = self.transpose(a);
                    self.matmul(at, g)?
                });
            }
            Op::Transpose(a) => push!(a, self.transpose(g)),
            Op::Exp(a) => push!(a, self.mul(g, out)?),
            Op::Log(a) => push!(a, {
                let r = self.recip(a);
                self.mul(g, r)?
            }),
            Op::Tanh(a) => push!(a, {
                let sq = self.square(out);
                let d = self.neg(sq);
                let d = self.add_scalar(d, 1.0);
                self.mul(g, d)?
            }),
            Op::Relu(a) => push!(a, {
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                self.mul(g, mask)?
            }),
            Op::Sigmoid(a) => push!(a, {
                let one_minus = self.neg(out);
                let one_minus = self.add_scalar(one_minus, 1.0);
                let d = self.mul(out, one_minus)?;
                self.mul(g, d)?
            }),
            Op::Softplus(a) => push!(a, {
                let s = self.sigmoid(a);
                self.mul(g, s)?
            }),
            Op::Sqrt(a) => push!(a, {
                let r = self.recip(out);
                let r = self.scale(r, 0.5);
                self.mul(g, r)?
            }),
            Op::Recip(a) => push!(a, {
                let sq = self.square(out);
                let t = self.mul(g, sq)?;
                self.neg(t)
            }),
            Op::Square(a) => push!(a, {
                let twice = self.scale(a, 2.0);
                self.mul(g, twice)?
            }),
            Op::Clamp(a, lo, hi) => push!(a, {
                let mask = self.value(a).map(|x| if x >= lo && x <= hi { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                self.mul(g, mask)?
            }),
            Op::Sum(a) | Op::SumSorted(a) | Op::SumRows(a) | Op::SumCols(a) => push!(a, {
                let (r, c) = self.shape(a);
                self.expand(g, r, c)?
            }),
            Op::Expand(a) => push!(a, {
                let (ar, ac) = self.shape(a);
                let (gr, gc) = self.shape(g);
                match (ar == gr, ac == gc) {
                    (true, true) => g,
                    (true, false) => self.sum_rows(g),
                    (false, true) => self.sum_cols(g),
                    (false, false) => self.sum(g),
                }
            }),
            Op::TileRows(a, k) => push!(a, self.fold_rows(g, k)?),
            Op::FoldRows(a, k) => push!(a, self.tile_rows(g, k)),
            Op::ConcatCols(a, b) => {
                let ca = self.shape(a).1;
                let cb = self.shape(b).1;
                push!(a, self.slice_cols(g, 0, ca)?);
                push!(b, self.slice_cols(g, ca, cb)?);
            }
            Op::SliceCols(a, start) => push!(a, {
                let total = self.shape(a).1;
                self.pad_cols(g, start, total)
            }),
            Op::PadCols(a, start) => push!(a, {
                let c = self.shape(a).1;
                self.slice_cols(g, start, c)?
            }),
            Op::Cholesky(a) => push!(a, {
                // S = L^-T tril_half(L^T G) L^-1, symmetrized.
                let lt = self.transpose(out);
                let p = self.matmul(lt, g)?;
                let p = self.tril_half_diag(p);
                let w = self.solve_lower_t(out, p)?;
                let wt = self.transpose(w);
                let st = self.solve_lower_t(out, wt)?;
                let s = self.transpose(st);
                let sym = self.add(s, st)?;
                self.scale(sym, 0.5)
            }),
            Op::SolveLower(l, b) => {
                let gb = self.solve_lower_t(l, g)?;
                push!(l, {
                    let xt = self.transpose(out);
                    let outer = self.matmul(gb, xt)?;
                    let t = self.tril(outer);
                    self.neg(t)
                });
                push!(b, gb);
            }
            Op::SolveLowerT(l, b) => {
                let gb = self.solve_lower(l, g)?;
                push!(l, {
                    let gbt = self.transpose(gb);
                    let outer = self.matmul(out, gbt)?;
                    let t = self.tril(outer);
                    self.neg(t)
                });
                push!(b, gb);
            }
            Op::Diag(a) => push!(a, self.diag_embed(g)),
            Op::DiagEmbed(a) => push!(a, self.diag(g)),
            Op::Tril(a) => push!(a, self.tril(g)),
            Op::TrilHalfDiag(a) => push!(a, self.tril_half_diag(g)),
            Op::LogSumExpRows(a) => push!(a, {
                let (r, c) = self.shape(a);
                let lse = self.expand(out, r, c)?;
                let shifted = self.sub(a, lse)?;
                let soft = self.exp(shifted);
                let ge = self.expand(g, r, c)?;
                self.mul(ge, soft)?
            }),
        }
        Ok(acc)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `log sum exp` with a max shift and order-independent summation.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let terms: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    m + sorted_sum(&terms).ln()
}
