//! Reverse-mode automatic differentiation on dense f64 tensors.
//!
//! A [`Tape`] records one primitive op per node in issue order, which is
//! already a topological order (ops only reference earlier nodes). Replay is
//! sequential and allocation order is fixed, so forward and backward are
//! bit-identical across runs for identical inputs.
//!
//! Subgradient conventions, fixed here and relied on by callers:
//! * `min`/`max`/`clamp`/`abs` take subgradient 0 at ties and kinks;
//! * `div`, `log`, `sqrt` and vector normalization guard denominators with
//!   [`EPS`], and clamped-off regions get zero gradient;
//! * `bilinear_sample` differentiates w.r.t. texels only, never coordinates;
//! * masks passed to the masked reductions are never differentiated.

use std::cell::RefCell;
use std::sync::Arc;

use thiserror::Error;

use crate::tensor::{broadcast_shape, reduce_to_shape, zip_broadcast, Tensor};

/// Denominator guard shared by every epsilon-guarded primitive.
pub const EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: operand shapes {lhs:?} and {rhs:?} are not compatible")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: input contains a non-finite value")]
    NonFiniteInput { op: &'static str },
    #[error("backward seed shape {got:?} does not match output shape {expected:?}")]
    SeedShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },
}

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    fn i(self) -> usize {
        self.0 as usize
    }
}

#[derive(Copy, Clone, Debug)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Abs,
    Sin,
    Cos,
    PowC(f64),
    Clamp(f64, f64),
    Scale(f64),
    Offset(f64),
}

#[derive(Copy, Clone, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

/// Fixed convolution weights for [`Tape::conv2d_fixed`]: `count` kernels of
/// `size`x`size` taps over `cin` input channels, laid out [k][dy][dx][c].
#[derive(Clone, Debug)]
pub struct KernelBank {
    pub size: usize,
    pub cin: usize,
    pub count: usize,
    pub weights: Arc<Vec<f64>>,
}

impl KernelBank {
    pub fn new(
        size: usize,
        cin: usize,
        count: usize,
        weights: Vec<f64>,
    ) -> Result<KernelBank, AdError> {
        if weights.len() != size * size * cin * count {
            return Err(AdError::InvalidArg {
                op: "kernel_bank",
                msg: format!(
                    "expected {} weights, got {}",
                    size * size * cin * count,
                    weights.len()
                ),
            });
        }
        if size % 2 == 0 {
            return Err(AdError::InvalidArg {
                op: "kernel_bank",
                msg: "kernel size must be odd".into(),
            });
        }
        Ok(KernelBank {
            size,
            cin,
            count,
            weights: Arc::new(weights),
        })
    }
}

/// An op with caller-supplied forward and vector-Jacobian product.
pub trait CustomOp: std::fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor, AdError>;
    /// Returns one cotangent per input (None where the input is not
    /// differentiated). `cot` has the output's shape.
    fn vjp(&self, inputs: &[Tensor], cot: &Tensor) -> Result<Vec<Option<Tensor>>, AdError>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Var, UnaryKind),
    Binary(Var, Var, BinKind),
    Lerp {
        a: Var,
        b: Var,
        t: Var,
    },
    Dot3(Var, Var),
    NormalizeLast(Var),
    ReduceMean(Var),
    ReduceMeanMasked(Var, Var),
    ReduceVarMasked(Var, Var),
    BilinearSampleWrap {
        tex: Var,
        uv: Var,
    },
    Conv2dFixed {
        x: Var,
        bank: KernelBank,
    },
    UpsampleBilinear {
        x: Var,
        h: usize,
        w: usize,
    },
    AvgPool2(Var),
    Roll {
        x: Var,
        axis: usize,
        shift: isize,
    },
    ConcatLast(Vec<Var>),
    SliceLast {
        x: Var,
        start: usize,
        len: usize,
    },
    BroadcastTo(Var),
    Index1 {
        x: Var,
        index: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Arc<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`]. Only nodes that required
/// gradients carry a cotangent; constants report `None`.
#[derive(Debug)]
pub struct Gradients {
    cots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.cots.get(v.i()).and_then(|c| c.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.i()].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.i()].value.shape().to_vec()
    }

    fn push(&self, value: Tensor, grad: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, grad, op });
        Var((nodes.len() - 1) as u32)
    }

    fn grad_of(&self, v: Var) -> bool {
        self.nodes.borrow()[v.i()].grad
    }

    /// Leaf whose gradient will be tracked.
    pub fn param(&self, value: Tensor) -> Result<Var, AdError> {
        if !value.is_all_finite() {
            return Err(AdError::NonFiniteInput { op: "param" });
        }
        Ok(self.push(value, true, Op::Leaf))
    }

    /// Leaf treated as a constant: gradient is not tracked and reads as None.
    pub fn constant(&self, value: Tensor) -> Result<Var, AdError> {
        if !value.is_all_finite() {
            return Err(AdError::NonFiniteInput { op: "constant" });
        }
        Ok(self.push(value, false, Op::Leaf))
    }

    pub fn scalar_const(&self, v: f64) -> Result<Var, AdError> {
        self.constant(Tensor::scalar(v))
    }

    fn unary(&self, x: Var, kind: UnaryKind) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.i()].value;
            match kind {
                UnaryKind::Neg => xv.map(|v| -v),
                UnaryKind::Exp => xv.map(f64::exp),
                UnaryKind::Log => xv.map(|v| v.max(EPS).ln()),
                UnaryKind::Sqrt => xv.map(|v| v.max(0.0).sqrt()),
                UnaryKind::Abs => xv.map(f64::abs),
                UnaryKind::Sin => xv.map(f64::sin),
                UnaryKind::Cos => xv.map(f64::cos),
                UnaryKind::PowC(c) => {
                    if c.fract() == 0.0 {
                        xv.map(|v| v.powi(c as i32))
                    } else {
                        xv.map(|v| v.max(0.0).powf(c))
                    }
                }
                UnaryKind::Clamp(lo, hi) => xv.map(|v| v.clamp(lo, hi)),
                UnaryKind::Scale(c) => xv.map(|v| v * c),
                UnaryKind::Offset(c) => xv.map(|v| v + c),
            }
        };
        self.push(value, self.grad_of(x), Op::Unary(x, kind))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.unary(x, UnaryKind::Neg)
    }
    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp)
    }
    /// Natural log of max(x, EPS).
    pub fn log(&self, x: Var) -> Var {
        self.unary(x, UnaryKind::Log)
    }
    /// Square root of max(x, 0).
    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sqrt)
    }
    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, UnaryKind::Abs)
    }
    pub fn sin(&self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sin)
    }
    pub fn cos(&self, x: Var) -> Var {
        self.unary(x, UnaryKind::Cos)
    }
    /// x^c for a compile-time-constant exponent. Non-integer exponents clamp
    /// the base to [0, inf).
    pub fn powc(&self, x: Var, c: f64) -> Var {
        self.unary(x, UnaryKind::PowC(c))
    }
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, UnaryKind::Clamp(lo, hi))
    }
    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, UnaryKind::Scale(c))
    }
    pub fn offset(&self, x: Var, c: f64) -> Var {
        self.unary(x, UnaryKind::Offset(c))
    }

    fn binary(&self, a: Var, b: Var, kind: BinKind) -> Result<Var, AdError> {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.i()].value;
            let bv = &nodes[b.i()].value;
            match kind {
                BinKind::Add => zip_broadcast(av, bv, "add", |x, y| x + y)?,
                BinKind::Sub => zip_broadcast(av, bv, "sub", |x, y| x - y)?,
                BinKind::Mul => zip_broadcast(av, bv, "mul", |x, y| x * y)?,
                BinKind::Div => zip_broadcast(av, bv, "div", |x, y| x / guard_denom(y))?,
                BinKind::Min => zip_broadcast(av, bv, "min", f64::min)?,
                BinKind::Max => zip_broadcast(av, bv, "max", f64::max)?,
            }
        };
        let grad = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(value, grad, Op::Binary(a, b, kind)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(a, b, BinKind::Add)
    }
    pub fn sub(&self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(a, b, BinKind::Sub)
    }
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(a, b, BinKind::Mul)
    }
    /// a / b with the denominator pushed away from zero by [`EPS`].
    pub fn div(&self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(a, b, BinKind::Div)
    }
    pub fn min(&self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(a, b, BinKind::Min)
    }
    pub fn max(&self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(a, b, BinKind::Max)
    }

    /// a + (b - a) * t, elementwise with broadcasting.
    pub fn lerp(&self, a: Var, b: Var, t: Var) -> Result<Var, AdError> {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.i()].value;
            let bv = &nodes[b.i()].value;
            let tv = &nodes[t.i()].value;
            let d = zip_broadcast(bv, av, "lerp", |x, y| x - y)?;
            let dt = zip_broadcast(&d, tv, "lerp", |x, y| x * y)?;
            zip_broadcast(av, &dt, "lerp", |x, y| x + y)?
        };
        let grad = self.grad_of(a) || self.grad_of(b) || self.grad_of(t);
        Ok(self.push(value, grad, Op::Lerp { a, b, t }))
    }

    /// Dot product over a trailing dimension of 3; output keeps a trailing 1.
    pub fn dot3(&self, a: Var, b: Var) -> Result<Var, AdError> {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.i()].value;
            let bv = &nodes[b.i()].value;
            if av.shape() != bv.shape() || av.shape().last() != Some(&3) {
                return Err(AdError::ShapeMismatch {
                    op: "dot3",
                    lhs: av.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                });
            }
            let mut shape = av.shape().to_vec();
            *shape.last_mut().unwrap() = 1;
            let n = av.len() / 3;
            let mut data = Vec::with_capacity(n);
            let (ad, bd) = (av.data(), bv.data());
            for i in 0..n {
                let o = i * 3;
                data.push(ad[o] * bd[o] + ad[o + 1] * bd[o + 1] + ad[o + 2] * bd[o + 2]);
            }
            Tensor::new(shape, data)?
        };
        let grad = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(value, grad, Op::Dot3(a, b)))
    }

    /// Normalizes vectors along the last dimension; zero vectors map to zero
    /// with zero gradient.
    pub fn normalize_last(&self, x: Var) -> Result<Var, AdError> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.i()].value;
            let c = *xv.shape().last().unwrap_or(&1);
            if c == 0 {
                return Err(AdError::InvalidArg {
                    op: "normalize_last",
                    msg: "empty trailing dimension".into(),
                });
            }
            let n = xv.len() / c;
            let xd = xv.data();
            let mut data = vec![0.0; xv.len()];
            for i in 0..n {
                let o = i * c;
                let norm = xd[o..o + c].iter().map(|v| v * v).sum::<f64>().sqrt();
                let denom = norm.max(EPS);
                for j in 0..c {
                    data[o + j] = xd[o + j] / denom;
                }
            }
            Tensor::new(xv.shape().to_vec(), data)?
        };
        Ok(self.push(value, self.grad_of(x), Op::NormalizeLast(x)))
    }

    /// Normalize trailing 3-vectors (the common case).
    pub fn normalize3(&self, x: Var) -> Result<Var, AdError> {
        {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.i()].value;
            if xv.shape().last() != Some(&3) {
                return Err(AdError::ShapeMismatch {
                    op: "normalize3",
                    lhs: xv.shape().to_vec(),
                    rhs: vec![3],
                });
            }
        }
        self.normalize_last(x)
    }

    pub fn reduce_mean(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.i()].value;
            let n = xv.len().max(1) as f64;
            Tensor::scalar(xv.data().iter().sum::<f64>() / n)
        };
        self.push(value, self.grad_of(x), Op::ReduceMean(x))
    }

    /// Weighted mean sum(w*x)/sum(w) over all elements; `mask` broadcasts to
    /// x's shape and is treated as a constant.
    pub fn reduce_mean_masked(&self, x: Var, mask: Var) -> Result<Var, AdError> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.i()].value;
            let wv = &nodes[mask.i()].value;
            let (mu, _w) = weighted_mean(xv, wv)?;
            Tensor::scalar(mu)
        };
        Ok(self.push(value, self.grad_of(x), Op::ReduceMeanMasked(x, mask)))
    }

    /// Weighted population variance sum(w*(x-mu)^2)/sum(w).
    pub fn reduce_var_masked(&self, x: Var, mask: Var) -> Result<Var, AdError> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.i()].value;
            let wv = &nodes[mask.i()].value;
            let (mu, wsum) = weighted_mean(xv, wv)?;
            let wx = zip_broadcast(wv, xv, "reduce_var_masked", |w, x| w * (x - mu) * (x - mu))?;
            Tensor::scalar(wx.data().iter().sum::<f64>() / wsum.max(EPS))
        };
        Ok(self.push(value, self.grad_of(x), Op::ReduceVarMasked(x, mask)))
    }

    /// Samples `tex` [Th,Tw,C] at `uv` [H,W,2] (u right, v down, wrap-around)
    /// with bilinear weights. Differentiable w.r.t. texels only.
    pub fn bilinear_sample_wrap(&self, tex: Var, uv: Var) -> Result<Var, AdError> {
        let value = {
            let nodes = self.nodes.borrow();
            let tv = &nodes[tex.i()].value;
            let uvv = &nodes[uv.i()].value;
            bilinear_forward(tv, uvv)?
        };
        Ok(self.push(value, self.grad_of(tex), Op::BilinearSampleWrap { tex, uv }))
    }

    /// Correlates `x` [H,W,Cin] with a fixed kernel bank, zero padding, same
    /// size output [H,W,K]. Kernels are constants.
    pub fn conv2d_fixed(&self, x: Var, bank: &KernelBank) -> Result<Var, AdError> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.i()].value;
            conv2d_forward(xv, bank)?
        };
        Ok(self.push(
            value,
            self.grad_of(x),
            Op::Conv2dFixed {
                x,
                bank: bank.clone(),
            },
        ))
    }

    /// Bilinear resize of [H,W,C] to [h,w,C], edge-clamped.
    pub fn upsample_bilinear(&self, x: Var, h: usize, w: usize) -> Result<Var, AdError> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.i()].value;
            upsample_forward(xv, h, w)?
        };
        Ok(self.push(value, self.grad_of(x), Op::UpsampleBilinear { x, h, w }))
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&self, x: Var) -> Result<Var, AdError> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.i()].value;
            avg_pool2_forward(xv)?
        };
        Ok(self.push(value, self.grad_of(x), Op::AvgPool2(x)))
    }

    /// Circular shift along `axis` by `shift` (positive shifts toward higher
    /// indices).
    pub fn roll(&self, x: Var, axis: usize, shift: isize) -> Result<Var, AdError> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.i()].value;
            roll_forward(xv, axis, shift)?
        };
        Ok(self.push(value, self.grad_of(x), Op::Roll { x, axis, shift }))
    }

    /// Concatenates along the last dimension.
    pub fn concat_last(&self, parts: &[Var]) -> Result<Var, AdError> {
        if parts.is_empty() {
            return Err(AdError::InvalidArg {
                op: "concat_last",
                msg: "no inputs".into(),
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let tensors: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.i()].value).collect();
            concat_last_forward(&tensors)?
        };
        let grad = parts.iter().any(|p| self.grad_of(*p));
        Ok(self.push(value, grad, Op::ConcatLast(parts.to_vec())))
    }

    /// Slices `len` channels starting at `start` from the last dimension.
    pub fn slice_last(&self, x: Var, start: usize, len: usize) -> Result<Var, AdError> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.i()].value;
            slice_last_forward(xv, start, len)?
        };
        Ok(self.push(value, self.grad_of(x), Op::SliceLast { x, start, len }))
    }

    /// Broadcasts to an explicit shape.
    pub fn broadcast_to(&self, x: Var, shape: &[usize]) -> Result<Var, AdError> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.i()].value;
            let out_shape = broadcast_shape(xv.shape(), shape, "broadcast_to")?;
            if out_shape != shape {
                return Err(AdError::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: xv.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            let zeros = Tensor::zeros(shape);
            zip_broadcast(xv, &zeros, "broadcast_to", |x, _| x)?
        };
        Ok(self.push(value, self.grad_of(x), Op::BroadcastTo(x)))
    }

    /// Extracts element `index` of a rank-1 tensor as a scalar.
    pub fn index1(&self, x: Var, index: usize) -> Result<Var, AdError> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.i()].value;
            if xv.shape().len() != 1 || index >= xv.len() {
                return Err(AdError::InvalidArg {
                    op: "index1",
                    msg: format!("index {} out of range for shape {:?}", index, xv.shape()),
                });
            }
            Tensor::scalar(xv.data()[index])
        };
        Ok(self.push(value, self.grad_of(x), Op::Index1 { x, index }))
    }

    /// Records a caller-defined op.
    pub fn custom(&self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Result<Var, AdError> {
        let value = {
            let nodes = self.nodes.borrow();
            let tensors: Vec<Tensor> = inputs.iter().map(|v| nodes[v.i()].value.clone()).collect();
            op.forward(&tensors)?
        };
        let grad = inputs.iter().any(|v| self.grad_of(*v));
        Ok(self.push(
            value,
            grad,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        ))
    }

    /// Propagates `seed` (d(objective)/d(out)) back to every tracked node.
    pub fn backward(&self, out: Var, seed: Tensor) -> Result<Gradients, AdError> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[out.i()].value.shape();
        if seed.shape() != out_shape {
            return Err(AdError::SeedShapeMismatch {
                expected: out_shape.to_vec(),
                got: seed.shape().to_vec(),
            });
        }
        let mut cots: Vec<Option<Tensor>> = vec![None; nodes.len()];
        cots[out.i()] = Some(seed);

        for idx in (0..=out.i()).rev() {
            if !nodes[idx].grad {
                cots[idx] = None;
                continue;
            }
            let cot = match cots[idx].take() {
                Some(c) => c,
                None => continue,
            };
            let node = &nodes[idx];
            let mut sends: Vec<(Var, Tensor)> = Vec::new();
            match &node.op {
                Op::Leaf => {}
                Op::Unary(x, kind) => {
                    let xv = &nodes[x.i()].value;
                    sends.push((*x, unary_vjp(xv, *kind, &cot)));
                }
                Op::Binary(a, b, kind) => {
                    let av = &nodes[a.i()].value;
                    let bv = &nodes[b.i()].value;
                    let (da, db) = binary_vjp(av, bv, *kind, &cot)?;
                    sends.push((*a, reduce_to_shape(&da, av.shape())));
                    sends.push((*b, reduce_to_shape(&db, bv.shape())));
                }
                Op::Lerp { a, b, t } => {
                    let av = &nodes[a.i()].value;
                    let bv = &nodes[b.i()].value;
                    let tv = &nodes[t.i()].value;
                    let one_minus_t = tv.map(|v| 1.0 - v);
                    let da = zip_broadcast(&cot, &one_minus_t, "lerp", |g, w| g * w)?;
                    let db = zip_broadcast(&cot, tv, "lerp", |g, w| g * w)?;
                    let diff = zip_broadcast(bv, av, "lerp", |x, y| x - y)?;
                    let dt = zip_broadcast(&cot, &diff, "lerp", |g, d| g * d)?;
                    sends.push((*a, reduce_to_shape(&da, av.shape())));
                    sends.push((*b, reduce_to_shape(&db, bv.shape())));
                    sends.push((*t, reduce_to_shape(&dt, tv.shape())));
                }
                Op::Dot3(a, b) => {
                    let av = &nodes[a.i()].value;
                    let bv = &nodes[b.i()].value;
                    let n = av.len() / 3;
                    let g = cot.data();
                    let mut da = vec![0.0; av.len()];
                    let mut db = vec![0.0; bv.len()];
                    for i in 0..n {
                        let o = i * 3;
                        for j in 0..3 {
                            da[o + j] = g[i] * bv.data()[o + j];
                            db[o + j] = g[i] * av.data()[o + j];
                        }
                    }
                    sends.push((*a, Tensor::new(av.shape().to_vec(), da)?));
                    sends.push((*b, Tensor::new(bv.shape().to_vec(), db)?));
                }
                Op::NormalizeLast(x) => {
                    let xv = &nodes[x.i()].value;
                    let yv = &node.value;
                    let c = *xv.shape().last().unwrap();
                    let n = xv.len() / c;
                    let g = cot.data();
                    let mut dx = vec![0.0; xv.len()];
                    for i in 0..n {
                        let o = i * c;
                        let norm = xv.data()[o..o + c]
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                            .sqrt();
                        if norm <= EPS {
                            continue;
                        }
                        let gy: f64 = (0..c).map(|j| g[o + j] * yv.data()[o + j]).sum();
                        for j in 0..c {
                            dx[o + j] = (g[o + j] - yv.data()[o + j] * gy) / norm;
                        }
                    }
                    sends.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
                }
                Op::ReduceMean(x) => {
                    let xv = &nodes[x.i()].value;
                    let g = cot.item() / xv.len().max(1) as f64;
                    sends.push((*x, Tensor::full(xv.shape(), g)));
                }
                Op::ReduceMeanMasked(x, mask) => {
                    let xv = &nodes[x.i()].value;
                    let wv = &nodes[mask.i()].value;
                    let g = cot.item();
                    let wsum = broadcast_weight_sum(wv, xv.shape())?;
                    let scale = g / wsum.max(EPS);
                    let zeros = Tensor::zeros(xv.shape());
                    let w_full = zip_broadcast(wv, &zeros, "rmm", |w, _| w * scale)?;
                    sends.push((*x, w_full));
                }
                Op::ReduceVarMasked(x, mask) => {
                    let xv = &nodes[x.i()].value;
                    let wv = &nodes[mask.i()].value;
                    let g = cot.item();
                    let (mu, wsum) = weighted_mean(xv, wv)?;
                    let scale = 2.0 * g / wsum.max(EPS);
                    let dx = zip_broadcast(wv, xv, "rvm", |w, x| w * (x - mu) * scale)?;
                    sends.push((*x, dx));
                }
                Op::BilinearSampleWrap { tex, uv } => {
                    let tv = &nodes[tex.i()].value;
                    let uvv = &nodes[uv.i()].value;
                    sends.push((*tex, bilinear_vjp(tv, uvv, &cot)?));
                }
                Op::Conv2dFixed { x, bank } => {
                    let xv = &nodes[x.i()].value;
                    sends.push((*x, conv2d_vjp(xv, bank, &cot)?));
                }
                Op::UpsampleBilinear { x, h, w } => {
                    debug_assert_eq!(&cot.shape()[..2], &[*h, *w]);
                    let xv = &nodes[x.i()].value;
                    sends.push((*x, upsample_vjp(xv, &cot)?));
                }
                Op::AvgPool2(x) => {
                    let xv = &nodes[x.i()].value;
                    sends.push((*x, avg_pool2_vjp(xv, &cot)?));
                }
                Op::Roll { x, axis, shift } => {
                    sends.push((*x, roll_forward(&cot, *axis, -*shift)?));
                }
                Op::ConcatLast(parts) => {
                    let mut start = 0usize;
                    for p in parts {
                        let pv = &nodes[p.i()].value;
                        let c = *pv.shape().last().unwrap();
                        let slice = slice_last_forward(&cot, start, c)?;
                        sends.push((*p, slice));
                        start += c;
                    }
                }
                Op::SliceLast { x, start, len } => {
                    let xv = &nodes[x.i()].value;
                    let c = *xv.shape().last().unwrap();
                    let n = xv.len() / c;
                    let mut dx = vec![0.0; xv.len()];
                    let g = cot.data();
                    for i in 0..n {
                        for j in 0..*len {
                            dx[i * c + start + j] = g[i * len + j];
                        }
                    }
                    sends.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
                }
                Op::BroadcastTo(x) => {
                    let xv = &nodes[x.i()].value;
                    sends.push((*x, reduce_to_shape(&cot, xv.shape())));
                }
                Op::Index1 { x, index } => {
                    let xv = &nodes[x.i()].value;
                    let mut dx = vec![0.0; xv.len()];
                    dx[*index] = cot.item();
                    sends.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
                }
                Op::Custom { inputs, op } => {
                    let tensors: Vec<Tensor> =
                        inputs.iter().map(|v| nodes[v.i()].value.clone()).collect();
                    let grads = op.vjp(&tensors, &cot)?;
                    for (v, g) in inputs.iter().zip(grads) {
                        if let Some(g) = g {
                            sends.push((*v, g));
                        }
                    }
                }
            }
            for (v, g) in sends {
                if !nodes[v.i()].grad {
                    continue;
                }
                match &mut cots[v.i()] {
                    Some(acc) => {
                        *acc = zip_broadcast(acc, &g, "acc", |a, b| a + b)?;
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            cots[idx] = Some(cot);
        }
        Ok(Gradients { cots })
    }
}

fn guard_denom(b: f64) -> f64 {
    if b.abs() < EPS {
        if b.is_sign_negative() {
            -EPS
        } else {
            EPS
        }
    } else {
        b
    }
}

fn weighted_mean(x: &Tensor, w: &Tensor) -> Result<(f64, f64), AdError> {
    let wx = zip_broadcast(w, x, "reduce_mean_masked", |w, x| w * x)?;
    let wsum = broadcast_weight_sum(w, x.shape())?;
    let mu = wx.data().iter().sum::<f64>() / wsum.max(EPS);
    Ok((mu, wsum))
}

/// Sum of the mask after broadcasting to the value shape.
fn broadcast_weight_sum(w: &Tensor, shape: &[usize]) -> Result<f64, AdError> {
    let n_out: usize = broadcast_shape(w.shape(), shape, "mask").map(|s| s.iter().product())?;
    let repeat = n_out / w.len().max(1);
    Ok(w.data().iter().sum::<f64>() * repeat as f64)
}

fn unary_vjp(x: &Tensor, kind: UnaryKind, cot: &Tensor) -> Tensor {
    let g = cot.data();
    let xd = x.data();
    let data: Vec<f64> = match kind {
        UnaryKind::Neg => g.iter().map(|v| -v).collect(),
        UnaryKind::Exp => g.iter().zip(xd).map(|(g, x)| g * x.exp()).collect(),
        UnaryKind::Log => g
            .iter()
            .zip(xd)
            .map(|(g, x)| if *x > EPS { g / x } else { 0.0 })
            .collect(),
        UnaryKind::Sqrt => g
            .iter()
            .zip(xd)
            .map(|(g, x)| {
                if *x > 0.0 {
                    g / (2.0 * x.sqrt().max(EPS))
                } else {
                    0.0
                }
            })
            .collect(),
        UnaryKind::Abs => g
            .iter()
            .zip(xd)
            .map(|(g, x)| {
                if *x > 0.0 {
                    *g
                } else if *x < 0.0 {
                    -*g
                } else {
                    0.0
                }
            })
            .collect(),
        UnaryKind::Sin => g.iter().zip(xd).map(|(g, x)| g * x.cos()).collect(),
        UnaryKind::Cos => g.iter().zip(xd).map(|(g, x)| -g * x.sin()).collect(),
        UnaryKind::PowC(c) => g
            .iter()
            .zip(xd)
            .map(|(g, x)| {
                if c.fract() == 0.0 {
                    g * c * x.powi(c as i32 - 1)
                } else if *x > 0.0 {
                    g * c * x.powf(c - 1.0)
                } else {
                    0.0
                }
            })
            .collect(),
        UnaryKind::Clamp(lo, hi) => g
            .iter()
            .zip(xd)
            .map(|(g, x)| if *x > lo && *x < hi { *g } else { 0.0 })
            .collect(),
        UnaryKind::Scale(c) => g.iter().map(|g| g * c).collect(),
        UnaryKind::Offset(_) => g.to_vec(),
    };
    Tensor::new(x.shape().to_vec(), data).expect("unary vjp shape")
}

fn binary_vjp(
    a: &Tensor,
    b: &Tensor,
    kind: BinKind,
    cot: &Tensor,
) -> Result<(Tensor, Tensor), AdError> {
    Ok(match kind {
        BinKind::Add => (cot.clone(), cot.clone()),
        BinKind::Sub => (cot.clone(), cot.map(|v| -v)),
        BinKind::Mul => (
            zip_broadcast(cot, b, "mul", |g, b| g * b)?,
            zip_broadcast(cot, a, "mul", |g, a| g * a)?,
        ),
        BinKind::Div => {
            let da = zip_broadcast(cot, b, "div", |g, b| g / guard_denom(b))?;
            let ab = zip_broadcast(a, b, "div", |a, b| {
                let d = guard_denom(b);
                -a / (d * d)
            })?;
            let db = zip_broadcast(cot, &ab, "div", |g, w| g * w)?;
            (da, db)
        }
        BinKind::Min => {
            let da = three_way(cot, a, b, |g, x, y| if x < y { g } else { 0.0 })?;
            let db = three_way(cot, a, b, |g, x, y| if y < x { g } else { 0.0 })?;
            (da, db)
        }
        BinKind::Max => {
            let da = three_way(cot, a, b, |g, x, y| if x > y { g } else { 0.0 })?;
            let db = three_way(cot, a, b, |g, x, y| if y > x { g } else { 0.0 })?;
            (da, db)
        }
    })
}

fn three_way(
    g: &Tensor,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<Tensor, AdError> {
    // g has the broadcast output shape; materialize both operands at it.
    let zeros = Tensor::zeros(g.shape());
    let af = zip_broadcast(a, &zeros, "sel", |x, _| x)?;
    let bf = zip_broadcast(b, &zeros, "sel", |x, _| x)?;
    let mut data = Vec::with_capacity(g.len());
    for i in 0..g.len() {
        data.push(f(g.data()[i], af.data()[i], bf.data()[i]));
    }
    Tensor::new(g.shape().to_vec(), data)
}

fn bilinear_forward(tex: &Tensor, uv: &Tensor) -> Result<Tensor, AdError> {
    let ts = tex.shape();
    let us = uv.shape();
    if ts.len() != 3 || us.len() != 3 || us[2] != 2 {
        return Err(AdError::ShapeMismatch {
            op: "bilinear_sample",
            lhs: ts.to_vec(),
            rhs: us.to_vec(),
        });
    }
    let (th, tw, c) = (ts[0], ts[1], ts[2]);
    let (h, w) = (us[0], us[1]);
    let mut out = vec![0.0; h * w * c];
    let td = tex.data();
    let ud = uv.data();
    for i in 0..h * w {
        let u = ud[i * 2];
        let v = ud[i * 2 + 1];
        let (x0, y0, fx, fy) = sample_coords(u, v, tw, th);
        let x1 = (x0 + 1) % tw;
        let y1 = (y0 + 1) % th;
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        for ch in 0..c {
            out[i * c + ch] = w00 * td[(y0 * tw + x0) * c + ch]
                + w10 * td[(y0 * tw + x1) * c + ch]
                + w01 * td[(y1 * tw + x0) * c + ch]
                + w11 * td[(y1 * tw + x1) * c + ch];
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Wrapped base texel and fractional offsets for a sample at (u, v).
fn sample_coords(u: f64, v: f64, tw: usize, th: usize) -> (usize, usize, f64, f64) {
    let px = u * tw as f64 - 0.5;
    let py = v * th as f64 - 0.5;
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let xi = (x0.rem_euclid(tw as f64)) as usize % tw;
    let yi = (y0.rem_euclid(th as f64)) as usize % th;
    (xi, yi, fx, fy)
}

fn bilinear_vjp(tex: &Tensor, uv: &Tensor, cot: &Tensor) -> Result<Tensor, AdError> {
    let ts = tex.shape();
    let (th, tw, c) = (ts[0], ts[1], ts[2]);
    let us = uv.shape();
    let (h, w) = (us[0], us[1]);
    let mut dtex = vec![0.0; tex.len()];
    let ud = uv.data();
    let g = cot.data();
    for i in 0..h * w {
        let u = ud[i * 2];
        let v = ud[i * 2 + 1];
        let (x0, y0, fx, fy) = sample_coords(u, v, tw, th);
        let x1 = (x0 + 1) % tw;
        let y1 = (y0 + 1) % th;
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        for ch in 0..c {
            let gv = g[i * c + ch];
            dtex[(y0 * tw + x0) * c + ch] += w00 * gv;
            dtex[(y0 * tw + x1) * c + ch] += w10 * gv;
            dtex[(y1 * tw + x0) * c + ch] += w01 * gv;
            dtex[(y1 * tw + x1) * c + ch] += w11 * gv;
        }
    }
    Tensor::new(ts.to_vec(), dtex)
}

fn conv2d_forward(x: &Tensor, bank: &KernelBank) -> Result<Tensor, AdError> {
    let s = x.shape();
    if s.len() != 3 || s[2] != bank.cin {
        return Err(AdError::ShapeMismatch {
            op: "conv2d_fixed",
            lhs: s.to_vec(),
            rhs: vec![bank.size, bank.size, bank.cin],
        });
    }
    let (h, w, cin) = (s[0], s[1], s[2]);
    let k = bank.count;
    let ks = bank.size;
    let half = (ks / 2) as isize;
    let xd = x.data();
    let wts = &bank.weights;
    let mut out = vec![0.0; h * w * k];
    for y in 0..h as isize {
        for x_ in 0..w as isize {
            for kk in 0..k {
                let mut acc = 0.0;
                let kbase = kk * ks * ks * cin;
                for dy in 0..ks as isize {
                    let sy = y + dy - half;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..ks as isize {
                        let sx = x_ + dx - half;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let pbase = ((sy as usize) * w + sx as usize) * cin;
                        let wbase = kbase + ((dy as usize) * ks + dx as usize) * cin;
                        for ch in 0..cin {
                            acc += xd[pbase + ch] * wts[wbase + ch];
                        }
                    }
                }
                out[((y as usize) * w + x_ as usize) * k + kk] = acc;
            }
        }
    }
    Tensor::new(vec![h, w, k], out)
}

fn conv2d_vjp(x: &Tensor, bank: &KernelBank, cot: &Tensor) -> Result<Tensor, AdError> {
    let s = x.shape();
    let (h, w, cin) = (s[0], s[1], s[2]);
    let k = bank.count;
    let ks = bank.size;
    let half = (ks / 2) as isize;
    let g = cot.data();
    let wts = &bank.weights;
    let mut dx = vec![0.0; x.len()];
    for y in 0..h as isize {
        for x_ in 0..w as isize {
            for kk in 0..k {
                let gv = g[((y as usize) * w + x_ as usize) * k + kk];
                if gv == 0.0 {
                    continue;
                }
                let kbase = kk * ks * ks * cin;
                for dy in 0..ks as isize {
                    let sy = y + dy - half;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx_ in 0..ks as isize {
                        let sx = x_ + dx_ - half;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let pbase = ((sy as usize) * w + sx as usize) * cin;
                        let wbase = kbase + ((dy as usize) * ks + dx_ as usize) * cin;
                        for ch in 0..cin {
                            dx[pbase + ch] += gv * wts[wbase + ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(s.to_vec(), dx)
}

fn upsample_coords(o: usize, n_out: usize, n_in: usize) -> (usize, usize, f64) {
    let src = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    let src = src.clamp(0.0, (n_in - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, src - i0 as f64)
}

fn upsample_forward(x: &Tensor, h: usize, w: usize) -> Result<Tensor, AdError> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(AdError::ShapeMismatch {
            op: "upsample_bilinear",
            lhs: s.to_vec(),
            rhs: vec![h, w, 0],
        });
    }
    let (hi, wi, c) = (s[0], s[1], s[2]);
    if hi == 0 || wi == 0 || h == 0 || w == 0 {
        return Err(AdError::InvalidArg {
            op: "upsample_bilinear",
            msg: "empty spatial dimension".into(),
        });
    }
    let xd = x.data();
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        let (y0, y1, fy) = upsample_coords(y, h, hi);
        for x_ in 0..w {
            let (x0, x1, fx) = upsample_coords(x_, w, wi);
            for ch in 0..c {
                let v00 = xd[(y0 * wi + x0) * c + ch];
                let v10 = xd[(y0 * wi + x1) * c + ch];
                let v01 = xd[(y1 * wi + x0) * c + ch];
                let v11 = xd[(y1 * wi + x1) * c + ch];
                out[(y * w + x_) * c + ch] = v00 * (1.0 - fx) * (1.0 - fy)
                    + v10 * fx * (1.0 - fy)
                    + v01 * (1.0 - fx) * fy
                    + v11 * fx * fy;
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

fn upsample_vjp(x: &Tensor, cot: &Tensor) -> Result<Tensor, AdError> {
    let s = x.shape();
    let (hi, wi, c) = (s[0], s[1], s[2]);
    let os = cot.shape();
    let (h, w) = (os[0], os[1]);
    let g = cot.data();
    let mut dx = vec![0.0; x.len()];
    for y in 0..h {
        let (y0, y1, fy) = upsample_coords(y, h, hi);
        for x_ in 0..w {
            let (x0, x1, fx) = upsample_coords(x_, w, wi);
            for ch in 0..c {
                let gv = g[(y * w + x_) * c + ch];
                dx[(y0 * wi + x0) * c + ch] += gv * (1.0 - fx) * (1.0 - fy);
                dx[(y0 * wi + x1) * c + ch] += gv * fx * (1.0 - fy);
                dx[(y1 * wi + x0) * c + ch] += gv * (1.0 - fx) * fy;
                dx[(y1 * wi + x1) * c + ch] += gv * fx * fy;
            }
        }
    }
    Tensor::new(s.to_vec(), dx)
}

fn avg_pool2_forward(x: &Tensor) -> Result<Tensor, AdError> {
    let s = x.shape();
    if s.len() != 3 || s[0] % 2 != 0 || s[1] % 2 != 0 {
        return Err(AdError::InvalidArg {
            op: "avg_pool2",
            msg: format!("shape {:?} must be [even, even, C]", s),
        });
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; ho * wo * c];
    for y in 0..ho {
        for x_ in 0..wo {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += xd[((2 * y + dy) * w + 2 * x_ + dx) * c + ch];
                    }
                }
                out[(y * wo + x_) * c + ch] = acc * 0.25;
            }
        }
    }
    Tensor::new(vec![ho, wo, c], out)
}

fn avg_pool2_vjp(x: &Tensor, cot: &Tensor) -> Result<Tensor, AdError> {
    let s = x.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let (ho, wo) = (h / 2, w / 2);
    let g = cot.data();
    let mut dx = vec![0.0; x.len()];
    for y in 0..ho {
        for x_ in 0..wo {
            for ch in 0..c {
                let gv = g[(y * wo + x_) * c + ch] * 0.25;
                for dy in 0..2 {
                    for dx_ in 0..2 {
                        dx[((2 * y + dy) * w + 2 * x_ + dx_) * c + ch] = gv;
                    }
                }
            }
        }
    }
    Tensor::new(s.to_vec(), dx)
}

fn roll_forward(x: &Tensor, axis: usize, shift: isize) -> Result<Tensor, AdError> {
    let s = x.shape();
    if axis >= s.len() {
        return Err(AdError::InvalidArg {
            op: "roll",
            msg: format!("axis {} out of range for rank {}", axis, s.len()),
        });
    }
    let n = s[axis];
    if n == 0 {
        return Ok(x.clone());
    }
    let shift = shift.rem_euclid(n as isize) as usize;
    if shift == 0 {
        return Ok(x.clone());
    }
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let xd = x.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..n {
            let j = (i + shift) % n;
            let src = (o * n + i) * inner;
            let dst = (o * n + j) * inner;
            out[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
        }
    }
    Tensor::new(s.to_vec(), out)
}

fn concat_last_forward(parts: &[&Tensor]) -> Result<Tensor, AdError> {
    let lead = &parts[0].shape()[..parts[0].shape().len() - 1];
    let mut c_total = 0usize;
    for p in parts {
        let s = p.shape();
        if &s[..s.len() - 1] != lead {
            return Err(AdError::ShapeMismatch {
                op: "concat_last",
                lhs: parts[0].shape().to_vec(),
                rhs: s.to_vec(),
            });
        }
        c_total += s[s.len() - 1];
    }
    let n: usize = lead.iter().product();
    let mut out = vec![0.0; n * c_total];
    let mut offset = 0usize;
    for p in parts {
        let c = *p.shape().last().unwrap();
        let pd = p.data();
        for i in 0..n {
            out[i * c_total + offset..i * c_total + offset + c]
                .copy_from_slice(&pd[i * c..(i + 1) * c]);
        }
        offset += c;
    }
    let mut shape = lead.to_vec();
    shape.push(c_total);
    Tensor::new(shape, out)
}

fn slice_last_forward(x: &Tensor, start: usize, len: usize) -> Result<Tensor, AdError> {
    let s = x.shape();
    let c = *s.last().unwrap();
    if start + len > c {
        return Err(AdError::InvalidArg {
            op: "slice_last",
            msg: format!("slice {}..{} out of {} channels", start, start + len, c),
        });
    }
    let n = x.len() / c;
    let xd = x.data();
    let mut out = vec![0.0; n * len];
    for i in 0..n {
        out[i * len..(i + 1) * len].copy_from_slice(&xd[i * c + start..i * c + start + len]);
    }
    let mut shape = s[..s.len() - 1].to_vec();
    shape.push(len);
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of(g: &Gradients, v: Var) -> Vec<f64> {
        g.wrt(v).expect("gradient tracked").to_vec()
    }

    #[test]
    fn mul_gradients_match_hand_derivation() {
        // f(x, y) = x * y + x at (2, 5): df/dx = y + 1 = 6, df/dy = x = 2.
        let t = Tape::new();
        let x = t.param(Tensor::scalar(2.0)).unwrap();
        let y = t.param(Tensor::scalar(5.0)).unwrap();
        let xy = t.mul(x, y).unwrap();
        let f = t.add(xy, x).unwrap();
        let g = t.backward(f, Tensor::scalar(1.0)).unwrap();
        assert_eq!(grad_of(&g, x), vec![6.0]);
        assert_eq!(grad_of(&g, y), vec![2.0]);
    }

    #[test]
    fn square_gradient() {
        let t = Tape::new();
        let x = t.param(Tensor::scalar(3.0)).unwrap();
        let f = t.mul(x, x).unwrap();
        let g = t.backward(f, Tensor::scalar(1.0)).unwrap();
        assert_eq!(grad_of(&g, x), vec![6.0]);
    }

    #[test]
    fn constant_leaf_has_no_gradient() {
        let t = Tape::new();
        let x = t.param(Tensor::scalar(1.5)).unwrap();
        let c = t.constant(Tensor::scalar(4.0)).unwrap();
        let f = t.add(x, c).unwrap();
        let g = t.backward(f, Tensor::scalar(1.0)).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(grad_of(&g, x), vec![1.0]);
    }

    #[test]
    fn normalize3_value_and_null_direction() {
        let t = Tape::new();
        let x = t
            .param(Tensor::new(vec![1, 1, 3], vec![0.0, 0.0, 2.0]).unwrap())
            .unwrap();
        let y = t.normalize3(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 1.0]);
        // d(y_z)/d(x_z) = 0: lengthening the vector does not change direction.
        let seed = Tensor::new(vec![1, 1, 3], vec![0.0, 0.0, 1.0]).unwrap();
        let g = t.backward(y, seed).unwrap();
        let gx = grad_of(&g, x);
        assert!(gx[2].abs() < 1e-15, "gz = {}", gx[2]);
    }

    #[test]
    fn reduce_mean_masked_ignores_unmasked() {
        let t = Tape::new();
        let x = t
            .param(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 100.0]).unwrap())
            .unwrap();
        let m = t
            .constant(Tensor::new(vec![4], vec![1.0, 1.0, 1.0, 0.0]).unwrap())
            .unwrap();
        let mu = t.reduce_mean_masked(x, m).unwrap();
        assert!((t.value(mu).item() - 2.0).abs() < 1e-15);
        let g = t.backward(mu, Tensor::scalar(1.0)).unwrap();
        let gx = grad_of(&g, x);
        assert_eq!(gx, vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]);
    }

    #[test]
    fn min_max_clamp_subgradient_zero_at_ties() {
        let t = Tape::new();
        let a = t.param(Tensor::scalar(1.0)).unwrap();
        let b = t.param(Tensor::scalar(1.0)).unwrap();
        let m = t.min(a, b).unwrap();
        let g = t.backward(m, Tensor::scalar(1.0)).unwrap();
        assert_eq!(grad_of(&g, a), vec![0.0]);
        assert_eq!(grad_of(&g, b), vec![0.0]);

        let x = t.param(Tensor::scalar(1.0)).unwrap();
        let c = t.clamp(x, 0.0, 1.0);
        let g = t.backward(c, Tensor::scalar(1.0)).unwrap();
        assert_eq!(grad_of(&g, x), vec![0.0]);
    }

    #[test]
    fn seed_shape_mismatch_is_rejected() {
        let t = Tape::new();
        let x = t.param(Tensor::zeros(&[2, 2, 1])).unwrap();
        let y = t.scale(x, 2.0);
        let err = t.backward(y, Tensor::scalar(1.0)).unwrap_err();
        assert!(matches!(err, AdError::SeedShapeMismatch { .. }));
    }

    #[test]
    fn incompatible_shapes_are_rejected() {
        let t = Tape::new();
        let a = t.param(Tensor::zeros(&[4, 3])).unwrap();
        let b = t.param(Tensor::zeros(&[3, 4])).unwrap();
        assert!(matches!(t.add(a, b), Err(AdError::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_leaf_is_rejected() {
        let t = Tape::new();
        assert!(matches!(
            t.param(Tensor::scalar(f64::NAN)),
            Err(AdError::NonFiniteInput { .. })
        ));
    }

    #[test]
    fn bilinear_sample_hits_texel_centers_exactly() {
        let t = Tape::new();
        let tex = t.param(Tensor::from_fn(&[4, 4, 1], |i| i as f64)).unwrap();
        // uv at center of texel (row 2, col 1) -> value 9.
        let uv = t
            .constant(Tensor::new(vec![1, 1, 2], vec![1.5 / 4.0, 2.5 / 4.0]).unwrap())
            .unwrap();
        let s = t.bilinear_sample_wrap(tex, uv).unwrap();
        assert_eq!(t.value(s).data(), &[9.0]);
    }

    #[test]
    fn bilinear_sample_wraps_and_scatters_gradient() {
        let t = Tape::new();
        let tex = t.param(Tensor::from_fn(&[2, 2, 1], |i| i as f64)).unwrap();
        // Sample midway between the last and first column: wraps around.
        let uv = t
            .constant(Tensor::new(vec![1, 1, 2], vec![0.0, 0.25]).unwrap())
            .unwrap();
        let s = t.bilinear_sample_wrap(tex, uv).unwrap();
        // u=0 -> px=-0.5 -> between col 1 (w=0.5) and col 0 (w=0.5), row 0.
        assert!((t.value(s).item() - 0.5).abs() < 1e-15);
        let g = t
            .backward(s, Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap())
            .unwrap();
        let gt = grad_of(&g, tex);
        assert_eq!(gt, vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn determinism_bit_identical_across_runs() {
        let run = || -> (Vec<f64>, Vec<f64>) {
            let t = Tape::new();
            let x = t
                .param(Tensor::from_fn(&[8, 8, 3], |i| {
                    ((i * 37 + 11) % 101) as f64 / 101.0
                }))
                .unwrap();
            let e = t.exp(x);
            let s = t.sqrt(e);
            let m = t.reduce_mean(s);
            let g = t.backward(m, Tensor::scalar(1.0)).unwrap();
            (t.value(m).to_vec(), g.wrt(x).unwrap().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }
}
