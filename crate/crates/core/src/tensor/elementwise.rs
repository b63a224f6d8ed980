use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Neg,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Abs,
    Square,
    Sqrt,
    AddScalar(f64),
    MulScalar(f64),
    /// `max(x, c)`
    MaxScalar(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Binary(BinaryOp),
    Unary(UnaryOp),
}

/// Apply `op` to `a` (and `b` for binary ops, with right-aligned broadcasting).
pub fn elementwise<T: Scalar>(
    op: ElementwiseOp,
    a: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    match (op, b) {
        (ElementwiseOp::Binary(op), Some(b)) => binary(op, a, b),
        (ElementwiseOp::Unary(op), None) => Ok(unary(op, a)),
        (ElementwiseOp::Binary(op), None) => Err(Error::InvalidShape(format!(
            "{op:?} needs a second operand"
        ))),
        (ElementwiseOp::Unary(op), Some(_)) => Err(Error::InvalidShape(format!(
            "{op:?} takes a single operand"
        ))),
    }
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Offset into an input of shape `inp` for every element of the broadcast
/// output `out`. `None` when the mapping is the identity.
fn broadcast_offsets(out: &[usize], inp: &[usize]) -> Option<Vec<usize>> {
    if out == inp {
        return None;
    }
    let total = numel(out);
    if numel(inp) == 1 {
        return Some(vec![0; total]);
    }
    let n = out.len();
    let pad = n - inp.len();
    // Stride of each output axis in the input (0 along broadcast axes).
    let mut strides = vec![0usize; n];
    let mut acc = 1;
    for i in (0..n).rev() {
        if i >= pad {
            let d = inp[i - pad];
            if d != 1 {
                strides[i] = acc;
            }
            acc *= d;
        }
    }
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    Some(offsets)
}

/// Sum a gradient laid out like `out` back onto an input of shape `inp`.
fn reduce_to<T: Scalar>(grad: Vec<T>, offsets: &Option<Vec<usize>>, inp_len: usize) -> Vec<T> {
    match offsets {
        None => grad,
        Some(offs) => {
            let mut g = vec![T::zero(); inp_len];
            for (o, v) in offs.iter().zip(grad) {
                g[*o] = g[*o] + v;
            }
            g
        }
    }
}

fn at(offsets: &Option<Vec<usize>>, i: usize) -> usize {
    match offsets {
        None => i,
        Some(o) => o[i],
    }
}

fn binary<T: Scalar>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let name = match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    };
    let shape = broadcast_shape(name, a.shape(), b.shape())?;
    let oa = broadcast_offsets(&shape, a.shape());
    let ob = broadcast_offsets(&shape, b.shape());
    let (da, db) = (a.data(), b.data());
    let f: fn(T, T) -> T = match op {
        BinaryOp::Add => |x, y| x + y,
        BinaryOp::Sub => |x, y| x - y,
        BinaryOp::Mul => |x, y| x * y,
        BinaryOp::Div => |x, y| x / y,
    };
    let data: Vec<T> = match (&oa, &ob) {
        (None, None) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
        _ => (0..numel(&shape))
            .map(|i| f(da[at(&oa, i)], db[at(&ob, i)]))
            .collect(),
    };

    let out_shape = shape.clone();
    let backward = Box::new(move |g: &[T], inputs: &[Tensor<T>]| {
        let (a, b) = (&inputs[0], &inputs[1]);
        let oa = broadcast_offsets(&out_shape, a.shape());
        let ob = broadcast_offsets(&out_shape, b.shape());
        let (da, db) = (a.data(), b.data());
        let ga = a.requires_grad().then(|| {
            let full: Vec<T> = match op {
                BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                BinaryOp::Mul => g.iter().enumerate().map(|(i, &g)| g * db[at(&ob, i)]).collect(),
                BinaryOp::Div => g.iter().enumerate().map(|(i, &g)| g / db[at(&ob, i)]).collect(),
            };
            reduce_to(full, &oa, a.numel())
        });
        let gb = b.requires_grad().then(|| {
            let full: Vec<T> = match op {
                BinaryOp::Add => g.to_vec(),
                BinaryOp::Sub => g.iter().map(|&g| -g).collect(),
                BinaryOp::Mul => g.iter().enumerate().map(|(i, &g)| g * da[at(&oa, i)]).collect(),
                BinaryOp::Div => g
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        let y = db[at(&ob, i)];
                        -g * da[at(&oa, i)] / (y * y)
                    })
                    .collect(),
            };
            reduce_to(full, &ob, b.numel())
        });
        vec![ga, gb]
    });
    Ok(Tensor::from_op(name, shape, data, &[a, b], backward))
}

fn unary<T: Scalar>(op: UnaryOp, a: &Tensor<T>) -> Tensor<T> {
    let zero = T::zero();
    let one = T::one();
    let (name, data): (&'static str, Vec<T>) = {
        let x = a.data();
        match op {
            UnaryOp::Neg => ("neg", x.iter().map(|&v| -v).collect()),
            UnaryOp::Relu => ("relu", x.iter().map(|&v| if v > zero { v } else { zero }).collect()),
            UnaryOp::LeakyRelu(s) => {
                let s = T::of(s);
                ("leaky_relu", x.iter().map(|&v| if v > zero { v } else { s * v }).collect())
            }
            UnaryOp::Sigmoid => ("sigmoid", x.iter().map(|&v| sigmoid(v)).collect()),
            UnaryOp::Tanh => ("tanh", x.iter().map(|v| v.tanh()).collect()),
            UnaryOp::Abs => ("abs", x.iter().map(|v| v.abs()).collect()),
            UnaryOp::Square => ("square", x.iter().map(|&v| v * v).collect()),
            UnaryOp::Sqrt => ("sqrt", x.iter().map(|v| v.sqrt()).collect()),
            UnaryOp::AddScalar(c) => {
                let c = T::of(c);
                ("add_scalar", x.iter().map(|&v| v + c).collect())
            }
            UnaryOp::MulScalar(c) => {
                let c = T::of(c);
                ("mul_scalar", x.iter().map(|&v| v * c).collect())
            }
            UnaryOp::MaxScalar(c) => {
                let c = T::of(c);
                ("max_scalar", x.iter().map(|&v| if v > c { v } else { c }).collect())
            }
        }
    };
    let backward = Box::new(move |g: &[T], inputs: &[Tensor<T>]| {
        let x = inputs[0].data();
        let d: Vec<T> = match op {
            UnaryOp::Neg => g.iter().map(|&g| -g).collect(),
            UnaryOp::Relu => g
                .iter()
                .zip(x)
                .map(|(&g, &v)| if v > zero { g } else { zero })
                .collect(),
            UnaryOp::LeakyRelu(s) => {
                let s = T::of(s);
                g.iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > zero { g } else { g * s })
                    .collect()
            }
            UnaryOp::Sigmoid => g
                .iter()
                .zip(x)
                .map(|(&g, &v)| {
                    let y = sigmoid(v);
                    g * y * (one - y)
                })
                .collect(),
            UnaryOp::Tanh => g
                .iter()
                .zip(x)
                .map(|(&g, &v)| {
                    let y = v.tanh();
                    g * (one - y * y)
                })
                .collect(),
            UnaryOp::Abs => g
                .iter()
                .zip(x)
                .map(|(&g, &v)| {
                    if v > zero {
                        g
                    } else if v < zero {
                        -g
                    } else {
                        zero
                    }
                })
                .collect(),
            UnaryOp::Square => g.iter().zip(x).map(|(&g, &v)| g * (v + v)).collect(),
            UnaryOp::Sqrt => g
                .iter()
                .zip(x)
                .map(|(&g, &v)| g / (v.sqrt() + v.sqrt()))
                .collect(),
            UnaryOp::AddScalar(_) => g.to_vec(),
            UnaryOp::MulScalar(c) => {
                let c = T::of(c);
                g.iter().map(|&g| g * c).collect()
            }
            UnaryOp::MaxScalar(c) => {
                let c = T::of(c);
                g.iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > c { g } else { zero })
                    .collect()
            }
        };
        vec![Some(d)]
    });
    Tensor::from_op(name, a.shape().to_vec(), data, &[a], backward)
}

fn sigmoid<T: Scalar>(v: T) -> T {
    let one = T::one();
    if v >= T::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(BinaryOp::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(BinaryOp::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(BinaryOp::Mul, self, other)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(BinaryOp::Div, self, other)
    }

    pub fn neg(&self) -> Tensor<T> {
        unary(UnaryOp::Neg, self)
    }

    pub fn relu(&self) -> Tensor<T> {
        unary(UnaryOp::Relu, self)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor<T> {
        unary(UnaryOp::LeakyRelu(slope), self)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        unary(UnaryOp::Sigmoid, self)
    }

    pub fn tanh(&self) -> Tensor<T> {
        unary(UnaryOp::Tanh, self)
    }

    pub fn abs(&self) -> Tensor<T> {
        unary(UnaryOp::Abs, self)
    }

    pub fn square(&self) -> Tensor<T> {
        unary(UnaryOp::Square, self)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        unary(UnaryOp::Sqrt, self)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        unary(UnaryOp::AddScalar(c), self)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor<T> {
        unary(UnaryOp::MulScalar(c), self)
    }

    pub fn max_scalar(&self, c: f64) -> Tensor<T> {
        unary(UnaryOp::MaxScalar(c), self)
    }
}
