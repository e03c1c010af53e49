//! Reverse-mode differentiation over 2-D arrays.
//!
//! Every value is an `Array2<f64>`; row `b` is usually path `b` of a batch.
//! Binary arithmetic broadcasts `(1, c)`, `(r, 1)` and `(1, 1)` operands.

use std::cell::RefCell;
use std::ops;

use ndarray::{concatenate, s, Array2, Axis, Zip};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Tanh(usize),
    Ln(usize),
    Exp(usize),
    Powf(usize, f64),
    Abs(usize),
    ClampMin(usize, f64),
    SumCols(usize),
    MeanRows(usize),
    Sum(usize),
    Mean(usize),
    Cols(usize, usize),
    Concat(Vec<usize>),
    BatchMatVec(usize, usize),
    BatchGram(usize),
    BatchOuter(usize, usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.shape())
    }
}

/// Gradients of one scalar with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Array2<f64>> {
        self.grads.get(var.idx).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, zeros of `shape` if it did not influence the output.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Array2<f64> {
        self.get(var).cloned().unwrap_or_else(|| Array2::zeros(var.shape()))
    }
}

fn reduce_to(mut g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    if g.nrows() != shape.0 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if g.ncols() != shape.1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        assert!(x == y || x == 1 || y == 1, "incompatible shapes {a:?} and {b:?}");
        x.max(y)
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn square_dim(n: usize) -> usize {
    let d = (n as f64).sqrt().round() as usize;
    assert_eq!(d * d, n, "expected d·d columns, got {n}");
    d
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    /// Trainable input.
    pub fn param(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Array2::from_elem((1, 1), v))
    }

    fn needs(&self, idx: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        idx.iter().any(|i| nodes[*i].needs_grad)
    }

    fn unary(&self, a: usize, op: Op, f: impl FnOnce(&Array2<f64>) -> Array2<f64>) -> Var<'_> {
        let value = f(&self.nodes.borrow()[a].value);
        let ng = self.needs(&[a]);
        self.push(value, op, ng)
    }

    fn binary(&self, a: usize, b: usize, op: Op, f: impl FnOnce(&Array2<f64>, &Array2<f64>) -> Array2<f64>) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)
        };
        let ng = self.needs(&[a, b]);
        self.push(value, op, ng)
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.idx].value.dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; output.idx + 1];
        grads[output.idx] = Some(Array2::ones((1, 1)));

        let accumulate = |grads: &mut Vec<Option<Array2<f64>>>, i: usize, g: Array2<f64>| {
            if !nodes[i].needs_grad {
                return;
            }
            let g = reduce_to(g, nodes[i].value.dim());
            match &mut grads[i] {
                Some(acc) => *acc += &g,
                slot => *slot = Some(g),
            }
        };

        for idx in (0..=output.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    if nodes[*a].needs_grad {
                        accumulate(&mut grads, *a, &g * val(*b));
                    }
                    if nodes[*b].needs_grad {
                        accumulate(&mut grads, *b, &g * val(*a));
                    }
                }
                Op::Div(a, b) => {
                    if nodes[*a].needs_grad {
                        accumulate(&mut grads, *a, &g / val(*b));
                    }
                    if nodes[*b].needs_grad {
                        let gb = -(&g * &node.value) / val(*b);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Neg(a) => accumulate(&mut grads, *a, -g),
                Op::Scale(a, k) => accumulate(&mut grads, *a, g * *k),
                Op::Offset(a) => accumulate(&mut grads, *a, g),
                Op::MatMul(a, b) => {
                    if nodes[*a].needs_grad {
                        accumulate(&mut grads, *a, g.dot(&val(*b).t()));
                    }
                    if nodes[*b].needs_grad {
                        accumulate(&mut grads, *b, val(*a).t().dot(&g));
                    }
                }
                Op::Tanh(a) => {
                    let ga = Zip::from(&g).and(&node.value).map_collect(|g, y| g * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Ln(a) => accumulate(&mut grads, *a, &g / val(*a)),
                Op::Exp(a) => accumulate(&mut grads, *a, &g * &node.value),
                Op::Powf(a, p) => {
                    let ga = Zip::from(&g).and(val(*a)).map_collect(|g, x| g * p * x.powf(p - 1.0));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let ga = Zip::from(&g).and(val(*a)).map_collect(|g, x| {
                        if *x > 0.0 {
                            *g
                        } else if *x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::ClampMin(a, lo) => {
                    let ga = Zip::from(&g).and(val(*a)).map_collect(|g, x| if x > lo { *g } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let ga = g.broadcast(val(*a).dim()).expect("column broadcast").to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let n = val(*a).nrows() as f64;
                    let ga = g.broadcast(val(*a).dim()).expect("row broadcast").to_owned() / n;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => accumulate(&mut grads, *a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
                Op::Mean(a) => {
                    let n = val(*a).len() as f64;
                    accumulate(&mut grads, *a, Array2::from_elem(val(*a).dim(), g[[0, 0]] / n));
                }
                Op::Cols(a, start) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        if nodes[*p].needs_grad {
                            accumulate(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::BatchMatVec(m, v) => {
                    let (mv, vv) = (val(*m), val(*v));
                    let d = vv.ncols();
                    if nodes[*m].needs_grad {
                        let mut gm = Array2::zeros(mv.dim());
                        for b in 0..mv.nrows() {
                            for i in 0..d {
                                for j in 0..d {
                                    gm[[b, i * d + j]] = g[[b, i]] * vv[[b, j]];
                                }
                            }
                        }
                        accumulate(&mut grads, *m, gm);
                    }
                    if nodes[*v].needs_grad {
                        let mut gv = Array2::zeros(vv.dim());
                        for b in 0..mv.nrows() {
                            for i in 0..d {
                                for j in 0..d {
                                    gv[[b, j]] += g[[b, i]] * mv[[b, i * d + j]];
                                }
                            }
                        }
                        accumulate(&mut grads, *v, gv);
                    }
                }
                Op::BatchGram(m) => {
                    let mv = val(*m);
                    let d = square_dim(mv.ncols());
                    let mut gm = Array2::zeros(mv.dim());
                    for b in 0..mv.nrows() {
                        for i in 0..d {
                            for j in 0..d {
                                let mut acc = 0.0;
                                for k in 0..d {
                                    acc += (g[[b, i * d + k]] + g[[b, k * d + i]]) * mv[[b, k * d + j]];
                                }
                                gm[[b, i * d + j]] = acc;
                            }
                        }
                    }
                    accumulate(&mut grads, *m, gm);
                }
                Op::BatchOuter(a, c) => {
                    let (av, cv) = (val(*a), val(*c));
                    let d = av.ncols();
                    let mut ga = Array2::zeros(av.dim());
                    let mut gc = Array2::zeros(cv.dim());
                    for b in 0..av.nrows() {
                        for i in 0..d {
                            for j in 0..d {
                                let gij = g[[b, i * d + j]];
                                ga[[b, i]] += gij * cv[[b, j]];
                                gc[[b, j]] += gij * av[[b, i]];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *c, gc);
                }
            }
        }
        Gradients { grads }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Array2<f64> {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Array2<f64>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.idx].value)
    }

    pub fn scalar_value(&self) -> f64 {
        self.with_value(|v| v[[0, 0]])
    }

    pub fn shape(&self) -> (usize, usize) {
        self.with_value(|v| v.dim())
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.tape.unary(self.idx, Op::Scale(self.idx, k), |a| a * k)
    }

    pub fn offset(self, k: f64) -> Var<'t> {
        self.tape.unary(self.idx, Op::Offset(self.idx), |a| a + k)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.idx, rhs.idx, Op::MatMul(self.idx, rhs.idx), |a, b| a.dot(b))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Tanh(self.idx), |a| a.mapv(f64::tanh))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Ln(self.idx), |a| a.mapv(f64::ln))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Exp(self.idx), |a| a.mapv(f64::exp))
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.tape.unary(self.idx, Op::Powf(self.idx, p), |a| a.mapv(|x| x.powf(p)))
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    /// `|x|` with subgradient 0 at 0.
    pub fn abs(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Abs(self.idx), |a| a.mapv(f64::abs))
    }

    /// `max(x, lo)`; no gradient where clamped.
    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        self.tape.unary(self.idx, Op::ClampMin(self.idx, lo), |a| a.mapv(|x| x.max(lo)))
    }

    /// `(r, c) → (r, 1)`
    pub fn sum_cols(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::SumCols(self.idx), |a| a.sum_axis(Axis(1)).insert_axis(Axis(1)))
    }

    /// `(r, c) → (1, c)`
    pub fn mean_rows(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::MeanRows(self.idx), |a| {
            a.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0))
        })
    }

    pub fn sum(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Sum(self.idx), |a| Array2::from_elem((1, 1), a.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Mean(self.idx), |a| Array2::from_elem((1, 1), a.mean().expect("non-empty")))
    }

    /// Columns `start..start+len`.
    pub fn cols(self, start: usize, len: usize) -> Var<'t> {
        self.tape.unary(self.idx, Op::Cols(self.idx, start), |a| a.slice(s![.., start..start + len]).to_owned())
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let idx: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        let value = {
            let nodes = tape.nodes.borrow();
            let views: Vec<_> = idx.iter().map(|i| nodes[*i].value.view()).collect();
            concatenate(Axis(1), &views).expect("equal row counts")
        };
        let ng = tape.needs(&idx);
        tape.push(value, Op::Concat(idx), ng)
    }

    /// Row-wise `M_b v_b` with `M_b` stored row-major in the `d·d` columns of `self`.
    pub fn batch_matvec(self, v: Var<'t>) -> Var<'t> {
        self.tape.binary(self.idx, v.idx, Op::BatchMatVec(self.idx, v.idx), |m, v| {
            let d = v.ncols();
            assert_eq!(m.ncols(), d * d);
            let mut out = Array2::zeros(v.dim());
            for b in 0..v.nrows() {
                for i in 0..d {
                    out[[b, i]] = (0..d).map(|j| m[[b, i * d + j]] * v[[b, j]]).sum();
                }
            }
            out
        })
    }

    /// Row-wise `M_b M_bᵀ`.
    pub fn batch_gram(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::BatchGram(self.idx), |m| {
            let d = square_dim(m.ncols());
            let mut out = Array2::zeros(m.dim());
            for b in 0..m.nrows() {
                for i in 0..d {
                    for k in 0..d {
                        out[[b, i * d + k]] = (0..d).map(|j| m[[b, i * d + j]] * m[[b, k * d + j]]).sum();
                    }
                }
            }
            out
        })
    }

    /// Row-wise `a_b c_bᵀ`, flattened row-major.
    pub fn batch_outer(self, c: Var<'t>) -> Var<'t> {
        self.tape.binary(self.idx, c.idx, Op::BatchOuter(self.idx, c.idx), |a, c| {
            let d = a.ncols();
            let mut out = Array2::zeros((a.nrows(), d * d));
            for b in 0..a.nrows() {
                for i in 0..d {
                    for j in 0..d {
                        out[[b, i * d + j]] = a[[b, i]] * c[[b, j]];
                    }
                }
            }
            out
        })
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $op:ident, $sym:tt) => {
        impl<'t> ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.tape.binary(self.idx, rhs.idx, Op::$op(self.idx, rhs.idx), |a, b| {
                    broadcast_shape(a.dim(), b.dim());
                    a $sym b
                })
            }
        }
        impl<'t> ops::$trait<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: f64) -> Var<'t> {
                self $sym self.tape.scalar(rhs)
            }
        }
    };
}

binop!(Add, add, Add, +);
binop!(Sub, sub, Sub, -);
binop!(Mul, mul, Mul, *);
binop!(Div, div, Div, /);

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self.idx, Op::Neg(self.idx), |a| -a)
    }
}
