//! Reverse-mode differentiation over vector-valued nodes.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Node values
//! are flat `f64` buffers, so one node can hold a scalar, a per-agent
//! vector, or a row-major matrix. Recording one node per vector operation
//! (instead of one per agent) keeps the tape length proportional to
//! `steps × operations` regardless of population size.
//!
//! ```
//! use diffabm::tape::Tape;
//!
//! let tape = Tape::new();
//! let p = tape.leaf_scalar(3.0);
//! let f = p * p;
//! let grads = tape.backward(f).unwrap();
//! assert_eq!(grads.wrt(p).unwrap(), &[6.0]);
//! ```
//!
//! Binary operations broadcast a length-1 operand against a longer one.
//! [`Tape::backward`] never mutates the tape, so several outputs can be
//! differentiated from one forward pass.

use std::cell::{Cell, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::Arc;

use thiserror::Error;

use crate::sparse::Csr;

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    #[error("node {node} does not belong to this tape (tape has {len} nodes)")]
    NotOnTape { node: usize, len: usize },
    #[error("backward output must be a scalar, node {node} has length {len}")]
    NonScalarOutput { node: usize, len: usize },
    #[error("non-finite value at node {node} ({op}) during {phase} pass")]
    NonFinite {
        node: usize,
        op: &'static str,
        phase: &'static str,
    },
    #[error(
        "gradients were computed on tape generation {grads}, variable is from generation {var}"
    )]
    StaleGeneration { grads: u64, var: u64 },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    Exp(u32),
    Ln(u32),
    Sigmoid(u32),
    Tanh(u32),
    Scale(u32, f64),
    Shift(u32),
    Sum(u32),
    MatVec {
        m: u32,
        x: u32,
        rows: usize,
        cols: usize,
    },
    SpMV {
        a: Arc<Csr>,
        x: u32,
    },
    Gather {
        a: u32,
        idx: Arc<Vec<u32>>,
    },
    Slice {
        a: u32,
        start: usize,
    },
    Concat(Vec<u32>),
    /// Forward value supplied externally, identity backward.
    Straight(u32),
    /// Scalar node with externally supplied partial derivatives.
    Custom(Vec<(u32, Vec<f64>)>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Scale(..) => "scale",
            Op::Shift(_) => "shift",
            Op::Sum(_) => "sum",
            Op::MatVec { .. } => "matvec",
            Op::SpMV { .. } => "spmv",
            Op::Gather { .. } => "gather",
            Op::Slice { .. } => "slice",
            Op::Concat(_) => "concat",
            Op::Straight(_) => "straight",
            Op::Custom(_) => "custom",
        }
    }
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Operation recorder. See the module docs.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    generation: Cell<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: u32,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Var(#{} = {:?})",
            self.id,
            self.tape.nodes.borrow()[self.id as usize].value
        )
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
    generation: u64,
}

impl Gradients {
    /// Gradient of the differentiated output with respect to `var`. Nodes that
    /// do not influence the output have a zero gradient.
    pub fn wrt(&self, var: Var<'_>) -> Result<Vec<f64>, TapeError> {
        let gen = var.tape.generation.get();
        if gen != self.generation {
            return Err(TapeError::StaleGeneration {
                grads: self.generation,
                var: gen,
            });
        }
        let id = var.id as usize;
        if id >= self.lens.len() {
            // Created after the output; cannot influence it.
            return Ok(vec![0.0; var.len()]);
        }
        Ok(match &self.adjoints[id] {
            Some(a) => a.clone(),
            None => vec![0.0; self.lens[id]],
        })
    }

    pub fn wrt_scalar(&self, var: Var<'_>) -> Result<f64, TapeError> {
        Ok(self.wrt(var)?[0])
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            generation: Cell::new(0),
        }
    }

    /// Drops all nodes and starts a new generation. Requires exclusive
    /// access, so no [`Var`] from the old generation can still be alive.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.generation.set(self.generation.get() + 1);
    }

    pub fn generation(&self) -> u64 {
        self.generation.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Vec<f64>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len() as u32;
        nodes.push(Node { value, op });
        Var { tape: self, id }
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Vec<f64>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_scalar(&self, value: f64) -> Var<'_> {
        self.leaf(vec![value])
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Vec<f64>) -> Var<'_> {
        self.push(value, Op::Const)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(vec![value])
    }

    pub fn zeros(&self, len: usize) -> Var<'_> {
        self.constant(vec![0.0; len])
    }

    /// Node whose forward value is `value` and whose backward pass hands the
    /// incoming adjoint to `parent` unchanged. This is the straight-through
    /// construction used for hard samples and clamps.
    pub fn straight_through<'t>(&'t self, parent: Var<'t>, value: Vec<f64>) -> Var<'t> {
        assert_eq!(parent.len(), value.len(), "straight-through shape mismatch");
        self.push(value, Op::Straight(parent.id))
    }

    /// Scalar node with value `value` and the given partial derivatives with
    /// respect to each parent (one partial per parent element).
    pub fn custom<'t>(&'t self, value: f64, parents: Vec<(Var<'t>, Vec<f64>)>) -> Var<'t> {
        let parents = parents
            .into_iter()
            .map(|(v, d)| {
                assert_eq!(v.len(), d.len(), "custom partial shape mismatch");
                (v.id, d)
            })
            .collect();
        self.push(vec![value], Op::Custom(parents))
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let value = {
            let nodes = self.nodes.borrow();
            parts
                .iter()
                .flat_map(|p| nodes[p.id as usize].value.iter().copied())
                .collect()
        };
        self.push(value, Op::Concat(parts.iter().map(|p| p.id).collect()))
    }

    fn value_of(&self, id: u32) -> std::cell::Ref<'_, [f64]> {
        std::cell::Ref::map(self.nodes.borrow(), |n| n[id as usize].value.as_slice())
    }

    fn unary(&self, a: u32, op: Op, f: impl Fn(f64) -> f64) -> Var<'_> {
        let value: Vec<f64> = self.value_of(a).iter().map(|&x| f(x)).collect();
        self.push(value, op)
    }

    fn binary(&self, a: u32, b: u32, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'_> {
        let value = {
            let va = self.value_of(a);
            let vb = self.value_of(b);
            match (va.len(), vb.len()) {
                (n, m) if n == m => va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect(),
                (1, _) => vb.iter().map(|&y| f(va[0], y)).collect(),
                (_, 1) => va.iter().map(|&x| f(x, vb[0])).collect(),
                (n, m) => panic!("shape mismatch in {}: {n} vs {m}", op.name()),
            }
        };
        self.push(value, op)
    }

    /// Reverse pass from a scalar `output`.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, TapeError> {
        let nodes = self.nodes.borrow();
        let out = output.id as usize;
        if !std::ptr::eq(output.tape, self) || out >= nodes.len() {
            return Err(TapeError::NotOnTape {
                node: out,
                len: nodes.len(),
            });
        }
        if nodes[out].value.len() != 1 {
            return Err(TapeError::NonScalarOutput {
                node: out,
                len: nodes[out].value.len(),
            });
        }
        for (i, n) in nodes[..=out].iter().enumerate() {
            if n.value.iter().any(|v| !v.is_finite()) {
                return Err(TapeError::NonFinite {
                    node: i,
                    op: n.op.name(),
                    phase: "forward",
                });
            }
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; out + 1];
        adj[out] = Some(vec![1.0]);

        fn acc(adj: &mut [Option<Vec<f64>>], id: u32, len: usize, g: impl FnOnce(&mut [f64])) {
            let slot = adj[id as usize].get_or_insert_with(|| vec![0.0; len]);
            g(slot);
        }

        // Adds `g` (shaped like the node output) into parent `p`, summing
        // over the broadcast dimension when `p` is a scalar.
        fn acc_bcast(adj: &mut [Option<Vec<f64>>], p: u32, plen: usize, g: &[f64]) {
            acc(adj, p, plen, |s| {
                if plen == g.len() {
                    for (a, b) in s.iter_mut().zip(g) {
                        *a += b;
                    }
                } else {
                    s[0] += g.iter().sum::<f64>();
                }
            });
        }

        for i in (0..=out).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            let len_of = |id: u32| nodes[id as usize].value.len();
            let val_of = |id: u32| nodes[id as usize].value.as_slice();
            match &node.op {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    acc_bcast(&mut adj, *a, len_of(*a), &g);
                    acc_bcast(&mut adj, *b, len_of(*b), &g);
                }
                Op::Sub(a, b) => {
                    acc_bcast(&mut adj, *a, len_of(*a), &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    acc_bcast(&mut adj, *b, len_of(*b), &neg);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val_of(*a), val_of(*b));
                    let ga: Vec<f64> = (0..g.len()).map(|k| g[k] * bget(vb, k)).collect();
                    let gb: Vec<f64> = (0..g.len()).map(|k| g[k] * bget(va, k)).collect();
                    acc_bcast(&mut adj, *a, va.len(), &ga);
                    acc_bcast(&mut adj, *b, vb.len(), &gb);
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val_of(*a), val_of(*b));
                    let ga: Vec<f64> = (0..g.len()).map(|k| g[k] / bget(vb, k)).collect();
                    let gb: Vec<f64> = (0..g.len())
                        .map(|k| -g[k] * bget(va, k) / (bget(vb, k) * bget(vb, k)))
                        .collect();
                    acc_bcast(&mut adj, *a, va.len(), &ga);
                    acc_bcast(&mut adj, *b, vb.len(), &gb);
                }
                Op::Neg(a) => acc(&mut adj, *a, g.len(), |s| zip_add(s, &g, |x| -x)),
                Op::Exp(a) => {
                    let y = &node.value;
                    acc(&mut adj, *a, g.len(), |s| {
                        for k in 0..s.len() {
                            s[k] += g[k] * y[k];
                        }
                    })
                }
                Op::Ln(a) => {
                    let x = val_of(*a);
                    acc(&mut adj, *a, g.len(), |s| {
                        for k in 0..s.len() {
                            s[k] += g[k] / x[k];
                        }
                    })
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(&mut adj, *a, g.len(), |s| {
                        for k in 0..s.len() {
                            s[k] += g[k] * y[k] * (1.0 - y[k]);
                        }
                    })
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(&mut adj, *a, g.len(), |s| {
                        for k in 0..s.len() {
                            s[k] += g[k] * (1.0 - y[k] * y[k]);
                        }
                    })
                }
                Op::Scale(a, c) => acc(&mut adj, *a, g.len(), |s| zip_add(s, &g, |x| x * c)),
                Op::Shift(a) | Op::Straight(a) => {
                    acc(&mut adj, *a, g.len(), |s| zip_add(s, &g, |x| x))
                }
                Op::Sum(a) => {
                    let n = len_of(*a);
                    acc(&mut adj, *a, n, |s| s.iter_mut().for_each(|x| *x += g[0]))
                }
                Op::MatVec { m, x, rows, cols } => {
                    let (vm, vx) = (val_of(*m), val_of(*x));
                    acc(&mut adj, *m, rows * cols, |s| {
                        for r in 0..*rows {
                            for c in 0..*cols {
                                s[r * cols + c] += g[r] * vx[c];
                            }
                        }
                    });
                    acc(&mut adj, *x, *cols, |s| {
                        for r in 0..*rows {
                            for c in 0..*cols {
                                s[c] += g[r] * vm[r * cols + c];
                            }
                        }
                    });
                }
                Op::SpMV { a, x } => {
                    acc(&mut adj, *x, a.n_cols(), |s| a.transpose_matvec_add(&g, s));
                }
                Op::Gather { a, idx } => {
                    let n = len_of(*a);
                    acc(&mut adj, *a, n, |s| {
                        for (k, &j) in idx.iter().enumerate() {
                            s[j as usize] += g[k];
                        }
                    })
                }
                Op::Slice { a, start } => {
                    let n = len_of(*a);
                    acc(&mut adj, *a, n, |s| {
                        for (k, gk) in g.iter().enumerate() {
                            s[start + k] += gk;
                        }
                    })
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = len_of(p);
                        acc(&mut adj, p, n, |s| zip_add(s, &g[off..off + n], |x| x));
                        off += n;
                    }
                }
                Op::Custom(parents) => {
                    for (p, d) in parents {
                        acc(&mut adj, *p, d.len(), |s| {
                            for k in 0..s.len() {
                                s[k] += g[0] * d[k];
                            }
                        })
                    }
                }
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TapeError::NonFinite {
                    node: i,
                    op: node.op.name(),
                    phase: "backward",
                });
            }
            adj[i] = Some(g);
        }

        Ok(Gradients {
            adjoints: adj,
            lens: nodes[..=out].iter().map(|n| n.value.len()).collect(),
            generation: self.generation.get(),
        })
    }
}

#[inline]
fn bget(v: &[f64], k: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[k]
    }
}

fn zip_add(s: &mut [f64], g: &[f64], f: impl Fn(f64) -> f64) {
    for (a, &b) in s.iter_mut().zip(g) {
        *a += f(b);
    }
}

/// Logistic function, evaluated so that `sigmoid(a) + sigmoid(-a) == 1`
/// holds exactly in floating point.
#[inline]
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        1.0 - 1.0 / (1.0 + a.exp())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id as usize
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id as usize].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.value_of(self.id).to_vec()
    }

    /// Runs `f` on the node value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.value_of(self.id))
    }

    /// First element; the value of a scalar node.
    pub fn scalar(&self) -> f64 {
        self.tape.value_of(self.id)[0]
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Ln(self.id), f64::ln)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Tanh(self.id), f64::tanh)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Scale(self.id, c), |x| x * c)
    }

    pub fn shift(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Shift(self.id), |x| x + c)
    }

    /// `1 - self`.
    pub fn one_minus(self) -> Var<'t> {
        self.scale(-1.0).shift(1.0)
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.with_value(|v| v.iter().sum());
        self.tape.push(vec![s], Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Dense product with a row-major `rows × cols` matrix held in `self`.
    pub fn matvec(self, x: Var<'t>, rows: usize, cols: usize) -> Var<'t> {
        let value = {
            let m = self.tape.value_of(self.id);
            let v = self.tape.value_of(x.id);
            assert_eq!(m.len(), rows * cols, "matvec matrix shape");
            assert_eq!(v.len(), cols, "matvec vector shape");
            (0..rows)
                .map(|r| (0..cols).map(|c| m[r * cols + c] * v[c]).sum())
                .collect()
        };
        self.tape.push(
            value,
            Op::MatVec {
                m: self.id,
                x: x.id,
                rows,
                cols,
            },
        )
    }

    /// Sparse product `A · self`.
    pub fn spmv(self, a: &Arc<Csr>) -> Var<'t> {
        let value = a.matvec(&self.tape.value_of(self.id));
        self.tape.push(
            value,
            Op::SpMV {
                a: Arc::clone(a),
                x: self.id,
            },
        )
    }

    /// `out[k] = self[idx[k]]`.
    pub fn gather(self, idx: &Arc<Vec<u32>>) -> Var<'t> {
        let value = {
            let v = self.tape.value_of(self.id);
            idx.iter().map(|&j| v[j as usize]).collect()
        };
        self.tape.push(
            value,
            Op::Gather {
                a: self.id,
                idx: Arc::clone(idx),
            },
        )
    }

    pub fn slice(self, start: usize, len: usize) -> Var<'t> {
        let value = self.tape.value_of(self.id)[start..start + len].to_vec();
        self.tape.push(value, Op::Slice { a: self.id, start })
    }

    pub fn index(self, i: usize) -> Var<'t> {
        self.slice(i, 1)
    }

    /// Clamp in the forward pass, identity in the backward pass.
    pub fn clamp_st(self, lo: f64, hi: f64) -> Var<'t> {
        let value = self.with_value(|v| v.iter().map(|x| x.clamp(lo, hi)).collect());
        self.tape.straight_through(self, value)
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $variant:ident, $f:expr) => {
        impl<'t> $trait<Var<'t>> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.tape
                    .binary(self.id, rhs.id, Op::$variant(self.id, rhs.id), $f)
            }
        }
        impl<'t> $trait<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: f64) -> Var<'t> {
                let c = self.tape.scalar(rhs);
                self.$method(c)
            }
        }
        impl<'t> $trait<Var<'t>> for f64 {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                let c = rhs.tape.scalar(self);
                c.$method(rhs)
            }
        }
    };
}

binop!(Add, add, Add, |a, b| a + b);
binop!(Sub, sub, Sub, |a, b| a - b);
binop!(Mul, mul, Mul, |a, b| a * b);
binop!(Div, div, Div, |a, b| a / b);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Neg(self.id), |x| -x)
    }
}
