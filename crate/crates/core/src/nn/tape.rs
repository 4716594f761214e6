//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every intermediate matrix together with the operation
//! that produced it. [`Tape::backward`] then walks the record in reverse and
//! accumulates adjoints. Every operation the networks in this crate need is
//! here; element-wise nonlinearities go through [`Tape::map`] /
//! [`Tape::map2`], which store their local partial derivatives at forward
//! time.
//!
//! Sequence layouts used by the convolutional ops: a batch of `B` sequences
//! of length `seg` with `C` channels is a `(B * seg, C)` matrix, rows grouped
//! by sequence.

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Map(Var, Mat),
    Map2(Var, Var, Mat, Mat),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SumAll(Var),
    SumCols(Var),
    Reshape(Var),
    Im2Col { x: Var, seg: usize, k: usize },
    AvgPool2 { x: Var },
    Upsample2 { x: Var },
    RepeatRows { x: Var, times: usize },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// influence the loss.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Mat {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Mat::zeros(shape))
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(Mat::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// `a (m×n) + row (1×n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    /// `a (m×n) ⊙ col (m×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let value = self.value(a) * self.value(col);
        self.push(value, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k))
    }

    /// Element-wise unary map; `f` returns `(value, derivative)`.
    pub fn map(&mut self, a: Var, f: impl Fn(f64) -> (f64, f64)) -> Var {
        let src = self.value(a);
        let mut value = Mat::zeros(src.dim());
        let mut deriv = Mat::zeros(src.dim());
        ndarray::Zip::from(&mut value)
            .and(&mut deriv)
            .and(src)
            .for_each(|v, d, &x| {
                let (fv, fd) = f(x);
                *v = fv;
                *d = fd;
            });
        self.push(value, Op::Map(a, deriv))
    }

    /// Element-wise binary map; `f` returns `(value, ∂/∂a, ∂/∂b)`.
    pub fn map2(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> (f64, f64, f64)) -> Var {
        let (xa, xb) = (self.value(a), self.value(b));
        assert_eq!(xa.dim(), xb.dim(), "map2 shape mismatch");
        let mut value = Mat::zeros(xa.dim());
        let mut da = Mat::zeros(xa.dim());
        let mut db = Mat::zeros(xa.dim());
        ndarray::Zip::from(&mut value)
            .and(&mut da)
            .and(&mut db)
            .and(xa)
            .and(xb)
            .for_each(|v, ga, gb, &x, &y| {
                let (fv, fa, fb) = f(x, y);
                *v = fv;
                *ga = fa;
                *gb = fb;
            });
        self.push(value, Op::Map2(a, b, da, db))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| {
            let s = 1.0 / (1.0 + (-x).exp());
            (s, s * (1.0 - s))
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| {
            let t = x.tanh();
            (t, 1.0 - t * t)
        })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, |x| {
            let s = 1.0 / (1.0 + (-x).exp());
            (x * s, s + x * s * (1.0 - s))
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { (x, 1.0) } else { (0.0, 0.0) })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| (x * x, 2.0 * x))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, |x| {
            let e = x.exp();
            (e, e)
        })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums: `(m×n) → (m×1)`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let value = src.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumCols(a))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape size mismatch");
        let value = Mat::from_shape_vec((rows, cols), src.iter().copied().collect())
            .expect("reshape");
        self.push(value, Op::Reshape(a))
    }

    /// Patch extraction for a width-`k` same-padded 1-D convolution:
    /// `(B*seg, C) → (B*seg, k*C)`; a following matmul with a `(k*C, C')`
    /// kernel completes the convolution.
    pub fn im2col(&mut self, x: Var, seg: usize, k: usize) -> Var {
        let src = self.value(x);
        let (rows, ch) = src.dim();
        assert_eq!(rows % seg, 0, "im2col rows not a multiple of segment");
        let half = (k / 2) as isize;
        let mut value = Mat::zeros((rows, k * ch));
        for r in 0..rows {
            let base = (r / seg) * seg;
            let i = (r % seg) as isize;
            for j in 0..k {
                let pos = i + j as isize - half;
                if pos < 0 || pos >= seg as isize {
                    continue;
                }
                value
                    .slice_mut(s![r, j * ch..(j + 1) * ch])
                    .assign(&src.row(base + pos as usize));
            }
        }
        self.push(value, Op::Im2Col { x, seg, k })
    }

    /// Average-pool pairs of positions within each segment.
    pub fn avg_pool2(&mut self, x: Var, seg: usize) -> Var {
        let src = self.value(x);
        let (rows, ch) = src.dim();
        assert!(seg.is_multiple_of(2) && rows.is_multiple_of(seg), "avg_pool2 needs an even segment");
        let mut value = Mat::zeros((rows / 2, ch));
        for r in 0..rows / 2 {
            let row = &src.row(2 * r) + &src.row(2 * r + 1);
            value.row_mut(r).assign(&(row * 0.5));
        }
        self.push(value, Op::AvgPool2 { x })
    }

    /// Nearest-neighbour upsampling by two within each segment.
    pub fn upsample2(&mut self, x: Var, _seg: usize) -> Var {
        let src = self.value(x);
        let (rows, ch) = src.dim();
        let mut value = Mat::zeros((rows * 2, ch));
        for r in 0..rows {
            value.row_mut(2 * r).assign(&src.row(r));
            value.row_mut(2 * r + 1).assign(&src.row(r));
        }
        self.push(value, Op::Upsample2 { x })
    }

    /// Repeat each row `times` times consecutively: `(B, C) → (B*times, C)`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let src = self.value(x);
        let (rows, ch) = src.dim();
        let mut value = Mat::zeros((rows * times, ch));
        for r in 0..rows {
            for k in 0..times {
                value.row_mut(r * times + k).assign(&src.row(r));
            }
        }
        self.push(value, Op::RepeatRows { x, times })
    }

    /// Adjoints of every node with respect to the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g.clone());
                }
                Op::MulCol(a, col) => {
                    let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *col, gc);
                    acc(&mut grads, *a, &g * self.value(*col));
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &g * *k),
                Op::Map(a, d) => acc(&mut grads, *a, &g * d),
                Op::Map2(a, b, da, db) => {
                    acc(&mut grads, *a, &g * da);
                    acc(&mut grads, *b, &g * db);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut full = Mat::zeros(self.value(*a).dim());
                    let w = g.ncols();
                    full.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(&mut grads, *a, full);
                }
                Op::SumAll(a) => {
                    acc(&mut grads, *a, Mat::from_elem(self.value(*a).dim(), g[[0, 0]]));
                }
                Op::SumCols(a) => {
                    let dim = self.value(*a).dim();
                    let full = Mat::from_shape_fn(dim, |(r, _)| g[[r, 0]]);
                    acc(&mut grads, *a, full);
                }
                Op::Reshape(a) => {
                    let dim = self.value(*a).dim();
                    let back = Mat::from_shape_vec(dim, g.iter().copied().collect())
                        .expect("reshape backward");
                    acc(&mut grads, *a, back);
                }
                Op::Im2Col { x, seg, k } => {
                    let dim = self.value(*x).dim();
                    let (rows, ch) = dim;
                    let half = (*k / 2) as isize;
                    let mut back = Mat::zeros(dim);
                    for r in 0..rows {
                        let base = (r / seg) * seg;
                        let i = (r % seg) as isize;
                        for j in 0..*k {
                            let pos = i + j as isize - half;
                            if pos < 0 || pos >= *seg as isize {
                                continue;
                            }
                            let mut dst = back.row_mut(base + pos as usize);
                            dst += &g.slice(s![r, j * ch..(j + 1) * ch]);
                        }
                    }
                    acc(&mut grads, *x, back);
                }
                Op::AvgPool2 { x } => {
                    let dim = self.value(*x).dim();
                    let mut back = Mat::zeros(dim);
                    for r in 0..g.nrows() {
                        let half = &g.row(r) * 0.5;
                        back.row_mut(2 * r).assign(&half);
                        back.row_mut(2 * r + 1).assign(&half);
                    }
                    acc(&mut grads, *x, back);
                }
                Op::Upsample2 { x } => {
                    let dim = self.value(*x).dim();
                    let mut back = Mat::zeros(dim);
                    for r in 0..dim.0 {
                        back.row_mut(r).assign(&(&g.row(2 * r) + &g.row(2 * r + 1)));
                    }
                    acc(&mut grads, *x, back);
                }
                Op::RepeatRows { x, times } => {
                    let dim = self.value(*x).dim();
                    let mut back = Mat::zeros(dim);
                    for r in 0..dim.0 {
                        let mut dst = back.row_mut(r);
                        for k in 0..*times {
                            dst += &g.row(r * times + k);
                        }
                    }
                    acc(&mut grads, *x, back);
                }
            }
        }
        Grads { grads }
    }
}
