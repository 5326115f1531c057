//! Reverse-mode automatic differentiation on dynamic-dimension `f64` arrays.
//!
//! The tape is built implicitly: every operation returns a new [`Var`] holding
//! its value, its parents, and a vector-Jacobian closure. Backward passes are
//! themselves expressed through tape operations, so gradients are `Var`s and
//! can be differentiated again (used for the R1 gradient penalty, which needs
//! parameter gradients of an input-gradient norm).
//!
//! Shapes are explicit: elementwise ops require identical shapes, and the few
//! broadcasts that networks need (bias rows, channel biases, scalar fills) are
//! dedicated ops paired with their adjoint reductions.

use ndarray::{ArrayD, Axis, Ix2, IxDyn};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

type Vjp = Box<dyn Fn(&Var, &Var) -> Vec<Var>>;

struct Node {
    id: usize,
    value: ArrayD<f64>,
    parents: Vec<Var>,
    vjp: Option<Vjp>,
    requires_grad: bool,
}

/// A value on the tape. Cloning is cheap (reference-counted node).
#[derive(Clone)]
pub struct Var {
    inner: Rc<Node>,
}

impl Var {
    /// Build a custom primitive op from a precomputed value, its parents,
    /// and a vector-Jacobian product. `vjp = None` marks the op as a
    /// gradient sink (differentiation stops there).
    pub fn new_custom(
        value: ArrayD<f64>,
        parents: Vec<Var>,
        vjp: Option<Box<dyn Fn(&Var, &Var) -> Vec<Var>>>,
    ) -> Self {
        Var::new(value, parents, vjp)
    }

    fn new(value: ArrayD<f64>, parents: Vec<Var>, vjp: Option<Vjp>) -> Self {
        let requires_grad = vjp.is_some() && parents.iter().any(|p| p.requires_grad());
        let (parents, vjp) = if requires_grad {
            (parents, vjp)
        } else {
            (Vec::new(), None)
        };
        Var {
            inner: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                value,
                parents,
                vjp,
                requires_grad,
            }),
        }
    }

    /// A constant: gradients never flow into it.
    pub fn constant(value: ArrayD<f64>) -> Self {
        Var {
            inner: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                value,
                parents: Vec::new(),
                vjp: None,
                requires_grad: false,
            }),
        }
    }

    /// A differentiable leaf (parameter or input under optimization).
    pub fn leaf(value: ArrayD<f64>) -> Self {
        Var {
            inner: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                value,
                parents: Vec::new(),
                vjp: None,
                requires_grad: true,
            }),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Var::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.inner.value
    }

    pub fn shape(&self) -> &[usize] {
        self.inner.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Scalar extraction; panics if the value has more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.inner.value.len(), 1, "item() on non-scalar");
        *self.inner.value.iter().next().unwrap()
    }

    /// Cut the tape: same value, no history.
    pub fn detach(&self) -> Var {
        Var::constant(self.inner.value.clone())
    }
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

fn same_shape(a: &Var, b: &Var, op: &str) {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in {op}");
}

pub fn add(a: &Var, b: &Var) -> Var {
    same_shape(a, b, "add");
    Var::new(
        a.value() + b.value(),
        vec![a.clone(), b.clone()],
        Some(Box::new(|_, g| vec![g.clone(), g.clone()])),
    )
}

pub fn sub(a: &Var, b: &Var) -> Var {
    add(a, &neg(b))
}

pub fn neg(a: &Var) -> Var {
    scale(a, -1.0)
}

pub fn mul(a: &Var, b: &Var) -> Var {
    same_shape(a, b, "mul");
    let (ac, bc) = (a.clone(), b.clone());
    Var::new(
        a.value() * b.value(),
        vec![a.clone(), b.clone()],
        Some(Box::new(move |_, g| vec![mul(g, &bc), mul(g, &ac)])),
    )
}

pub fn scale(a: &Var, c: f64) -> Var {
    Var::new(
        a.value().mapv(|v| v * c),
        vec![a.clone()],
        Some(Box::new(move |_, g| vec![scale(g, c)])),
    )
}

pub fn add_scalar(a: &Var, c: f64) -> Var {
    Var::new(
        a.value().mapv(|v| v + c),
        vec![a.clone()],
        Some(Box::new(|_, g| vec![g.clone()])),
    )
}

/// Elementwise x^p for strictly positive bases.
pub fn powf(a: &Var, p: f64) -> Var {
    let ac = a.clone();
    Var::new(
        a.value().mapv(|v| v.powf(p)),
        vec![a.clone()],
        Some(Box::new(move |_, g| {
            vec![mul(g, &scale(&powf(&ac, p - 1.0), p))]
        })),
    )
}

pub fn sqr(a: &Var) -> Var {
    mul(a, a)
}

pub fn abs(a: &Var) -> Var {
    // Sign is held constant in the backward pass (subgradient 0 at 0).
    let sign = Var::constant(a.value().mapv(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    }));
    Var::new(
        a.value().mapv(f64::abs),
        vec![a.clone()],
        Some(Box::new(move |_, g| vec![mul(g, &sign)])),
    )
}

pub fn exp(a: &Var) -> Var {
    Var::new(
        a.value().mapv(f64::exp),
        vec![a.clone()],
        Some(Box::new(|out, g| vec![mul(g, out)])),
    )
}

pub fn sigmoid(a: &Var) -> Var {
    let val = a.value().mapv(|v| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    });
    Var::new(
        val,
        vec![a.clone()],
        Some(Box::new(|out, g| {
            // d/dx sigmoid = y (1 - y)
            let one_minus = add_scalar(&neg(out), 1.0);
            vec![mul(g, &mul(out, &one_minus))]
        })),
    )
}

/// Numerically stable softplus ln(1 + e^x).
pub fn softplus(a: &Var) -> Var {
    let val = a.value().mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
    let ac = a.clone();
    Var::new(
        val,
        vec![a.clone()],
        Some(Box::new(move |_, g| vec![mul(g, &sigmoid(&ac))])),
    )
}

pub fn tanh(a: &Var) -> Var {
    Var::new(
        a.value().mapv(f64::tanh),
        vec![a.clone()],
        Some(Box::new(|out, g| {
            let one_minus_sq = add_scalar(&neg(&sqr(out)), 1.0);
            vec![mul(g, &one_minus_sq)]
        })),
    )
}

pub fn leaky_relu(a: &Var, slope: f64) -> Var {
    let mask = Var::constant(a.value().mapv(|v| if v > 0.0 { 1.0 } else { slope }));
    Var::new(
        a.value().mapv(|v| if v > 0.0 { v } else { slope * v }),
        vec![a.clone()],
        Some(Box::new(move |_, g| vec![mul(g, &mask)])),
    )
}

// ---------------------------------------------------------------------------
// Reductions, broadcasts, reshapes
// ---------------------------------------------------------------------------

pub fn sum(a: &Var) -> Var {
    let shape = a.shape().to_vec();
    Var::new(
        ArrayD::from_elem(IxDyn(&[]), a.value().sum()),
        vec![a.clone()],
        Some(Box::new(move |_, g| vec![broadcast_full(g, &shape)])),
    )
}

pub fn mean(a: &Var) -> Var {
    let n = a.value().len() as f64;
    scale(&sum(a), 1.0 / n)
}

/// Fill a scalar out to `shape`.
pub fn broadcast_full(a: &Var, shape: &[usize]) -> Var {
    assert_eq!(a.value().len(), 1, "broadcast_full expects a scalar");
    let v = *a.value().iter().next().unwrap();
    Var::new(
        ArrayD::from_elem(IxDyn(shape), v),
        vec![a.clone()],
        Some(Box::new(|_, g| vec![sum(g)])),
    )
}

/// Row-broadcast bias add: x is [n, m], b is [m].
pub fn add_bias(x: &Var, b: &Var) -> Var {
    assert_eq!(x.shape().len(), 2, "add_bias expects a matrix");
    assert_eq!(x.shape()[1], b.shape()[0], "add_bias width mismatch");
    let xv = x.value().view().into_dimensionality::<Ix2>().unwrap();
    let bv = b.value();
    let out = &xv + &bv.view().into_shape_with_order((1, bv.len())).unwrap();
    Var::new(
        out.into_dyn(),
        vec![x.clone(), b.clone()],
        Some(Box::new(|_, g| vec![g.clone(), sum_axis0(g)])),
    )
}

/// Column sum: [n, m] -> [m].
pub fn sum_axis0(a: &Var) -> Var {
    assert_eq!(a.shape().len(), 2);
    let n = a.shape()[0];
    Var::new(
        a.value().sum_axis(Axis(0)),
        vec![a.clone()],
        Some(Box::new(move |_, g| vec![broadcast_rows(g, n)])),
    )
}

/// Repeat a [m] vector into [n, m] rows.
pub fn broadcast_rows(a: &Var, n: usize) -> Var {
    assert_eq!(a.shape().len(), 1);
    let m = a.shape()[0];
    let mut out = ArrayD::zeros(IxDyn(&[n, m]));
    for mut row in out.view_mut().into_dimensionality::<Ix2>().unwrap().rows_mut() {
        row.assign(&a.value().view().into_dimensionality::<ndarray::Ix1>().unwrap());
    }
    Var::new(
        out,
        vec![a.clone()],
        Some(Box::new(|_, g| vec![sum_axis0(g)])),
    )
}

/// Channel bias add: x is [n, c, h, w], b is [c].
pub fn add_channel_bias(x: &Var, b: &Var) -> Var {
    assert_eq!(x.shape().len(), 4);
    assert_eq!(x.shape()[1], b.shape()[0], "channel bias mismatch");
    let mut out = x.value().clone();
    let bv = b.value();
    for n in 0..out.shape()[0] {
        for c in 0..out.shape()[1] {
            let bval = bv[[c]];
            out.index_axis_mut(Axis(0), n)
                .index_axis_mut(Axis(0), c)
                .mapv_inplace(|v| v + bval);
        }
    }
    Var::new(
        out,
        vec![x.clone(), b.clone()],
        Some(Box::new(|_, g| vec![g.clone(), sum_channels(g)])),
    )
}

/// Reduce [n, c, h, w] -> [c] by summing over batch and spatial axes.
pub fn sum_channels(a: &Var) -> Var {
    assert_eq!(a.shape().len(), 4);
    let (n, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let mut out = ArrayD::zeros(IxDyn(&[c]));
    for ni in 0..n {
        for ci in 0..c {
            out[[ci]] += a
                .value()
                .index_axis(Axis(0), ni)
                .index_axis(Axis(0), ci)
                .sum();
        }
    }
    Var::new(
        out,
        vec![a.clone()],
        Some(Box::new(move |_, g| vec![broadcast_channels(g, n, h, w)])),
    )
}

/// Expand [c] into [n, c, h, w] by repetition.
pub fn broadcast_channels(a: &Var, n: usize, h: usize, w: usize) -> Var {
    assert_eq!(a.shape().len(), 1);
    let c = a.shape()[0];
    let mut out = ArrayD::zeros(IxDyn(&[n, c, h, w]));
    for ni in 0..n {
        for ci in 0..c {
            let v = a.value()[[ci]];
            out.index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .fill(v);
        }
    }
    Var::new(
        out,
        vec![a.clone()],
        Some(Box::new(|_, g| vec![sum_channels(g)])),
    )
}

pub fn reshape(a: &Var, shape: &[usize]) -> Var {
    let old: Vec<usize> = a.shape().to_vec();
    let val = a
        .value()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape size mismatch");
    Var::new(
        val,
        vec![a.clone()],
        Some(Box::new(move |_, g| vec![reshape(g, &old)])),
    )
}

pub fn transpose(a: &Var) -> Var {
    assert_eq!(a.shape().len(), 2);
    Var::new(
        a.value().t().to_owned(),
        vec![a.clone()],
        Some(Box::new(|_, g| vec![transpose(g)])),
    )
}

pub fn matmul(a: &Var, b: &Var) -> Var {
    let av = a.value().view().into_dimensionality::<Ix2>().expect("matmul lhs rank");
    let bv = b.value().view().into_dimensionality::<Ix2>().expect("matmul rhs rank");
    assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim mismatch");
    let (ac, bc) = (a.clone(), b.clone());
    Var::new(
        av.dot(&bv).into_dyn(),
        vec![a.clone(), b.clone()],
        Some(Box::new(move |_, g| {
            vec![matmul(g, &transpose(&bc)), matmul(&transpose(&ac), g)]
        })),
    )
}

// ---------------------------------------------------------------------------
// Spatial ops
// ---------------------------------------------------------------------------

/// Integer-offset translation with zero padding, [n, c, h, w].
/// Positive `dy` moves content down, positive `dx` moves it right.
pub fn shift2d(a: &Var, dy: i64, dx: i64) -> Var {
    assert_eq!(a.shape().len(), 4);
    let val = shift2d_raw(a.value(), dy, dx);
    Var::new(
        val,
        vec![a.clone()],
        Some(Box::new(move |_, g| vec![shift2d(g, -dy, -dx)])),
    )
}

pub fn shift2d_raw(a: &ArrayD<f64>, dy: i64, dx: i64) -> ArrayD<f64> {
    let (n, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let mut out = ArrayD::zeros(IxDyn(&[n, c, h, w]));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let (sy, sx) = (y - dy, x - dx);
                    if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                        out[[ni, ci, y as usize, x as usize]] =
                            a[[ni, ci, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    out
}

fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    // Exact tiling keeps conv and conv_transpose mutual adjoints at matching
    // shapes; every architecture in this crate satisfies it.
    assert_eq!(
        (input + 2 * pad - k) % stride,
        0,
        "conv geometry must tile exactly (input {input}, k {k}, stride {stride}, pad {pad})"
    );
    (input + 2 * pad - k) / stride + 1
}

fn im2col(
    x: &ArrayD<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (ndarray::Array2<f64>, usize, usize) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let mut cols = ndarray::Array2::<f64>::zeros((n * oh * ow, c * kh * kw));
    let xv = x.view().into_shape_with_order((n, c, h, w)).unwrap();
    let xs = xv.as_slice().unwrap();
    let cs = cols.as_slice_mut().unwrap();
    let ckk = c * kh * kw;
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let rbase = ((ni * oh + oy) * ow + ox) * ckk;
                let mut col = rbase;
                for ci in 0..c {
                    let xb = (ni * c + ci) * h * w;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        if iy < 0 || iy >= h as i64 {
                            col += kw;
                            continue;
                        }
                        let xrow = xb + iy as usize * w;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if ix >= 0 && ix < w as i64 {
                                cs[col] = xs[xrow + ix as usize];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

fn conv2d_raw(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (n, _c, _, _) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, ic, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(x.shape()[1], ic, "conv2d channel mismatch");
    let (cols, oh, ow) = im2col(x, kh, kw, stride, pad);
    let wmat = w
        .view()
        .into_shape_with_order((oc, ic * kh * kw))
        .unwrap()
        .to_owned();
    // [n*oh*ow, ickhkw] x [ickhkw, oc] -> [n*oh*ow, oc]
    let out2 = cols.dot(&wmat.t());
    let o2 = out2.as_slice().unwrap();
    let mut out = ArrayD::zeros(IxDyn(&[n, oc, oh, ow]));
    let os = out.as_slice_mut().unwrap();
    for ni in 0..n {
        for p in 0..oh * ow {
            let row = (ni * oh * ow + p) * oc;
            for co in 0..oc {
                os[(ni * oc + co) * oh * ow + p] = o2[row + co];
            }
        }
    }
    out
}

/// Adjoint of conv2d with respect to its input. Input here plays the role of
/// the conv output gradient: x is [n, ic, h, w], weight is [ic, oc, kh, kw],
/// output is [n, oc, oh', ow'] with oh' = (h - 1) * stride - 2 pad + kh.
fn conv_transpose2d_raw(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (n, ic, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (wic, oc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(ic, wic, "conv_transpose2d channel mismatch");
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;
    // Matmul over channels, then scatter-add each kernel tap (col2im).
    let mut xmat = ndarray::Array2::<f64>::zeros((n * h * wd, ic));
    {
        let xv = x.view().into_shape_with_order((n, ic, h, wd)).unwrap();
        let xs = xv.as_slice().unwrap();
        let xm = xmat.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..ic {
                let src = (ni * ic + ci) * h * wd;
                for p in 0..h * wd {
                    xm[(ni * h * wd + p) * ic + ci] = xs[src + p];
                }
            }
        }
    }
    let wmat = w
        .view()
        .into_shape_with_order((ic, oc * kh * kw))
        .unwrap()
        .to_owned();
    let cols = xmat.dot(&wmat); // [n*h*wd, oc*kh*kw]
    let cs = cols.as_slice().unwrap();
    let mut out = ArrayD::zeros(IxDyn(&[n, oc, oh, ow]));
    let os = out.as_slice_mut().unwrap();
    let okk = oc * kh * kw;
    for ni in 0..n {
        for y in 0..h {
            for xg in 0..wd {
                let rbase = ((ni * h + y) * wd + xg) * okk;
                for co in 0..oc {
                    let ob = (ni * oc + co) * oh * ow;
                    for ky in 0..kh {
                        let oy = (y * stride + ky) as i64 - pad as i64;
                        if oy < 0 || oy >= oh as i64 {
                            continue;
                        }
                        let orow = ob + oy as usize * ow;
                        let cbase = rbase + (co * kh + ky) * kw;
                        for kx in 0..kw {
                            let ox = (xg * stride + kx) as i64 - pad as i64;
                            if ox >= 0 && ox < ow as i64 {
                                os[orow + ox as usize] += cs[cbase + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of conv2d output `g` with respect to the conv weight.
fn conv2d_wgrad_raw(
    x: &ArrayD<f64>,
    g: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> ArrayD<f64> {
    let (n, c, _, _) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oc = g.shape()[1];
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let (cols, coh, cow) = im2col(x, kh, kw, stride, pad);
    assert_eq!((coh, cow), (oh, ow));
    // gmat: [oc, n*oh*ow]
    let mut gmat = ndarray::Array2::<f64>::zeros((oc, n * oh * ow));
    {
        let gv = g.view().into_shape_with_order((n, oc, oh, ow)).unwrap();
        let gs = gv.as_slice().unwrap();
        let gm = gmat.as_slice_mut().unwrap();
        for ni in 0..n {
            for co in 0..oc {
                let src = (ni * oc + co) * oh * ow;
                for p in 0..oh * ow {
                    gm[co * n * oh * ow + ni * oh * ow + p] = gs[src + p];
                }
            }
        }
    }
    let wgrad = gmat.dot(&cols); // [oc, c*kh*kw]
    wgrad
        .into_shape_with_order(IxDyn(&[oc, c, kh, kw]))
        .unwrap()
}

/// 2D convolution (cross-correlation), x [n, ic, h, w], weight [oc, ic, kh, kw].
pub fn conv2d(x: &Var, w: &Var, stride: usize, pad: usize) -> Var {
    let val = conv2d_raw(x.value(), w.value(), stride, pad);
    let (xc, wc) = (x.clone(), w.clone());
    Var::new(
        val,
        vec![x.clone(), w.clone()],
        Some(Box::new(move |_, g| {
            // d/dx: transpose conv with weight reindexed [oc, ic, kh, kw] -> in=oc
            let dx = conv_transpose2d(g, &wc, stride, pad);
            let dw = conv2d_wgrad(&xc, g, stride, pad);
            vec![dx, dw]
        })),
    )
}

/// Transposed 2D convolution, x [n, ic, h, w], weight [ic, oc, kh, kw].
pub fn conv_transpose2d(x: &Var, w: &Var, stride: usize, pad: usize) -> Var {
    let val = conv_transpose2d_raw(x.value(), w.value(), stride, pad);
    let (xc, wc) = (x.clone(), w.clone());
    Var::new(
        val,
        vec![x.clone(), w.clone()],
        Some(Box::new(move |_, g| {
            // Adjoint of the adjoint: forward conv with the same weight.
            let dx = conv2d_for_transpose_input(g, &wc, stride, pad);
            let dw = conv_transpose2d_wgrad(&xc, g, stride, pad);
            vec![dx, dw]
        })),
    )
}

/// Input gradient of conv_transpose2d: a forward conv of g with the same
/// weight. The transpose layout [ic, oc, kh, kw] reads as [out, in, kh, kw]
/// for this direction, so the weight is passed through unchanged.
fn conv2d_for_transpose_input(g: &Var, w: &Var, stride: usize, pad: usize) -> Var {
    conv2d(g, w, stride, pad)
}

/// Weight gradient of conv2d; differentiable one level less than the convs
/// themselves (its own backward is not defined, which is enough for the
/// second-order needs of the R1 penalty).
fn conv2d_wgrad(x: &Var, g: &Var, stride: usize, pad: usize) -> Var {
    // Kernel size is recovered from neither x nor g alone; stash via closure.
    // Here we compute with kh, kw from the calling conv's weight by probing:
    // caller passes x, g whose shapes fix the kernel under the given stride/pad.
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let kh = h + 2 * pad - (oh - 1) * stride;
    let kw = w + 2 * pad - (ow - 1) * stride;
    let val = conv2d_wgrad_raw(x.value(), g.value(), stride, pad, kh, kw);
    Var::new(val, vec![x.clone(), g.clone()], None)
}

fn conv_transpose2d_wgrad(x: &Var, g: &Var, stride: usize, pad: usize) -> Var {
    // d/dw conv_transpose(x, w) = wgrad of the adjoint conv, axes swapped:
    // conv_transpose(x, w) output o satisfies x = conv2d-adjoint relation, so
    // dL/dw[ic, oc, ky, kx] = sum_n conv-correlation of g (as input) with x (as output grad).
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let kh = oh + 2 * pad - (h - 1) * stride;
    let kw = ow + 2 * pad - (w - 1) * stride;
    // Roles swap: g acts as the correlated image, x as the output gradient,
    // which lands the result directly in [ic, oc, kh, kw] layout.
    let val = conv2d_wgrad_raw(g.value(), x.value(), stride, pad, kh, kw);
    Var::new(val, vec![x.clone(), g.clone()], None)
}

// ---------------------------------------------------------------------------
// Backward engine
// ---------------------------------------------------------------------------

/// Gradients of a scalar with respect to tape nodes, themselves tape values.
pub struct Gradients {
    map: HashMap<usize, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: &Var) -> Option<&Var> {
        self.map.get(&v.id())
    }

    /// Gradient array for a leaf; zeros if the leaf never influenced the output.
    pub fn wrt_or_zeros(&self, v: &Var) -> ArrayD<f64> {
        match self.map.get(&v.id()) {
            Some(g) => g.value().clone(),
            None => ArrayD::zeros(IxDyn(v.shape())),
        }
    }
}

/// Reverse pass from a scalar output. The returned gradients are `Var`s built
/// on the tape, so they can be differentiated again.
pub fn backward(output: &Var) -> Gradients {
    assert_eq!(output.value().len(), 1, "backward expects a scalar output");
    // Topological order (parents before children) via iterative DFS.
    let mut order: Vec<Var> = Vec::new();
    let mut visited: std::collections::HashSet<usize> = std::collections::HashSet::new();
    let mut stack: Vec<(Var, bool)> = vec![(output.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in &node.inner.parents {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }

    let mut grads: HashMap<usize, Var> = HashMap::new();
    grads.insert(
        output.id(),
        Var::constant(ArrayD::from_elem(IxDyn(output.shape()), 1.0)),
    );
    for node in order.iter().rev() {
        let Some(g) = grads.get(&node.id()).cloned() else {
            continue;
        };
        if let Some(vjp) = &node.inner.vjp {
            let parent_grads = vjp(node, &g);
            assert_eq!(parent_grads.len(), node.inner.parents.len());
            for (p, pg) in node.inner.parents.iter().zip(parent_grads) {
                if !p.requires_grad() {
                    continue;
                }
                match grads.remove(&p.id()) {
                    Some(existing) => {
                        grads.insert(p.id(), add(&existing, &pg));
                    }
                    None => {
                        grads.insert(p.id(), pg);
                    }
                }
            }
        }
    }
    Gradients { map: grads }
}

/// Central finite differences of a scalar-valued function, for gradient checks.
pub fn central_difference<F>(f: F, x: &ArrayD<f64>, eps: f64) -> ArrayD<f64>
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(IxDyn(x.shape()));
    let mut xp = x.clone();
    for idx in ndarray::indices(x.shape()) {
        let orig = xp[&idx];
        xp[&idx] = orig + eps;
        let fp = f(&xp);
        xp[&idx] = orig - eps;
        let fm = f(&xp);
        xp[&idx] = orig;
        grad[&idx] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Max relative error between two gradient arrays, with an absolute floor so
/// near-zero entries compare on an absolute scale.
pub fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        Array::from_shape_fn(IxDyn(shape), |_| {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
        })
    }

    fn check_unary<F, G>(op: F, reference: G, shape: &[usize], seed: u64, tol: f64)
    where
        F: Fn(&Var) -> Var,
        G: Fn(&ArrayD<f64>) -> f64,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, shape);
        let leaf = Var::leaf(x.clone());
        let out = op(&leaf);
        let grads = backward(&out);
        let analytic = grads.wrt_or_zeros(&leaf);
        let numeric = central_difference(reference, &x, 1e-5);
        assert!(
            max_rel_err(&analytic, &numeric) < tol,
            "gradient mismatch: {}",
            max_rel_err(&analytic, &numeric)
        );
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        check_unary(
            |v| sum(&softplus(v)),
            |x| x.mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p()).sum(),
            &[5, 3],
            1,
            1e-6,
        );
        check_unary(
            |v| sum(&sigmoid(v)),
            |x| x.mapv(|v| 1.0 / (1.0 + (-v).exp())).sum(),
            &[7],
            2,
            1e-6,
        );
        check_unary(|v| sum(&tanh(v)), |x| x.mapv(f64::tanh).sum(), &[4, 2], 3, 1e-6);
        check_unary(
            |v| sum(&leaky_relu(v, 0.2)),
            |x| x.mapv(|v| if v > 0.0 { v } else { 0.2 * v }).sum(),
            &[9],
            4,
            1e-6,
        );
        check_unary(
            |v| sum(&sqr(&add_scalar(v, 0.5))),
            |x| x.mapv(|v| (v + 0.5) * (v + 0.5)).sum(),
            &[6],
            5,
            1e-6,
        );
        check_unary(
            |v| sum(&powf(&add_scalar(&sqr(v), 1.0), 0.5)),
            |x| x.mapv(|v| (v * v + 1.0).sqrt()).sum(),
            &[6],
            6,
            1e-6,
        );
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a0 = randn(&mut rng, &[4, 3]);
        let b0 = randn(&mut rng, &[3, 5]);
        let a = Var::leaf(a0.clone());
        let b = Var::leaf(b0.clone());
        let out = sum(&sqr(&matmul(&a, &b)));
        let grads = backward(&out);

        let fa = |x: &ArrayD<f64>| {
            let av = x.view().into_dimensionality::<Ix2>().unwrap();
            let bv = b0.view().into_dimensionality::<Ix2>().unwrap();
            av.dot(&bv).mapv(|v| v * v).sum()
        };
        let num_a = central_difference(fa, &a0, 1e-5);
        assert!(max_rel_err(&grads.wrt_or_zeros(&a), &num_a) < 1e-6);

        let fb = |x: &ArrayD<f64>| {
            let av = a0.view().into_dimensionality::<Ix2>().unwrap();
            let bv = x.view().into_dimensionality::<Ix2>().unwrap();
            av.dot(&bv).mapv(|v| v * v).sum()
        };
        let num_b = central_difference(fb, &b0, 1e-5);
        assert!(max_rel_err(&grads.wrt_or_zeros(&b), &num_b) < 1e-6);
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &(k, stride, pad) in &[(3usize, 1usize, 1usize), (4, 2, 1)] {
            let x0 = randn(&mut rng, &[2, 3, 6, 6]);
            let w0 = randn(&mut rng, &[4, 3, k, k]);
            let x = Var::leaf(x0.clone());
            let w = Var::leaf(w0.clone());
            let out = sum(&sqr(&conv2d(&x, &w, stride, pad)));
            let grads = backward(&out);

            let fx = |v: &ArrayD<f64>| conv2d_raw(v, &w0, stride, pad).mapv(|t| t * t).sum();
            let num_x = central_difference(fx, &x0, 1e-5);
            assert!(max_rel_err(&grads.wrt_or_zeros(&x), &num_x) < 1e-5);

            let fw = |v: &ArrayD<f64>| conv2d_raw(&x0, v, stride, pad).mapv(|t| t * t).sum();
            let num_w = central_difference(fw, &w0, 1e-5);
            assert!(max_rel_err(&grads.wrt_or_zeros(&w), &num_w) < 1e-5);
        }
    }

    #[test]
    fn conv_transpose2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for &(stride, pad) in &[(2usize, 1usize), (1, 0)] {
            let x0 = randn(&mut rng, &[2, 4, 4, 4]);
            let w0 = randn(&mut rng, &[4, 3, 4, 4]);
            let x = Var::leaf(x0.clone());
            let w = Var::leaf(w0.clone());
            let out = sum(&sqr(&conv_transpose2d(&x, &w, stride, pad)));
            let grads = backward(&out);

            let fx =
                |v: &ArrayD<f64>| conv_transpose2d_raw(v, &w0, stride, pad).mapv(|t| t * t).sum();
            let num_x = central_difference(fx, &x0, 1e-5);
            assert!(max_rel_err(&grads.wrt_or_zeros(&x), &num_x) < 1e-5);

            let fw =
                |v: &ArrayD<f64>| conv_transpose2d_raw(&x0, v, stride, pad).mapv(|t| t * t).sum();
            let num_w = central_difference(fw, &w0, 1e-5);
            assert!(max_rel_err(&grads.wrt_or_zeros(&w), &num_w) < 1e-5);
        }
    }

    #[test]
    fn adjoint_identity_conv_vs_transpose() {
        // <conv(x, w), y> == <x, conv_transpose(y, w)> for matching shapes.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = randn(&mut rng, &[1, 2, 8, 8]);
        let w = randn(&mut rng, &[3, 2, 4, 4]);
        let y_shape;
        let cxw = conv2d_raw(&x, &w, 2, 1);
        y_shape = cxw.shape().to_vec();
        let y = randn(&mut rng, &y_shape);
        let lhs: f64 = (&cxw * &y).sum();
        let rhs: f64 = (&x * &conv_transpose2d_raw(&y, &w, 2, 1)).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn double_backward_through_input_gradient() {
        // f(x) = tanh(x W); p = ||d f_sum / d x||^2. Check d p / d W against
        // finite differences — the path the R1 penalty exercises.
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let x0 = randn(&mut rng, &[3, 4]);
        let w0 = randn(&mut rng, &[4, 2]);

        let penalty = |wv: &ArrayD<f64>| -> f64 {
            let x = Var::leaf(x0.clone());
            let w = Var::constant(wv.clone());
            let out = sum(&tanh(&matmul(&x, &w)));
            let gx = backward(&out).wrt(&x).unwrap().clone();
            sum(&sqr(&gx)).item()
        };

        let x = Var::leaf(x0.clone());
        let w = Var::leaf(w0.clone());
        let out = sum(&tanh(&matmul(&x, &w)));
        let gx = backward(&out).wrt(&x).unwrap().clone();
        let p = sum(&sqr(&gx));
        let gw = backward(&p).wrt_or_zeros(&w);

        let num = central_difference(penalty, &w0, 1e-5);
        assert!(max_rel_err(&gw, &num) < 1e-5, "err {}", max_rel_err(&gw, &num));
    }

    #[test]
    fn shift_is_adjoint_of_reverse_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let x = randn(&mut rng, &[1, 1, 5, 5]);
        let y = randn(&mut rng, &[1, 1, 5, 5]);
        let lhs: f64 = (&shift2d_raw(&x, 2, -1) * &y).sum();
        let rhs: f64 = (&x * &shift2d_raw(&y, -2, 1)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let _ = rng.gen::<f64>();
    }

    #[test]
    fn detached_values_block_gradients() {
        let x = Var::leaf(ArrayD::from_elem(IxDyn(&[3]), 2.0));
        let out = sum(&mul(&x.detach(), &x));
        let g = backward(&out).wrt_or_zeros(&x);
        // Only the non-detached factor contributes.
        assert_eq!(g, ArrayD::from_elem(IxDyn(&[3]), 2.0));
    }
}
