//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Every forward operation records its parents and a backward closure in a
//! reference-counted DAG. Calling [`Var::backward`] on a scalar walks the
//! graph in reverse creation order and accumulates gradients, depositing them
//! into the [`Param`]s that back trainable leaves.
//!
//! The engine is deliberately small: only the operations this model family
//! needs exist, each with a hand-derived adjoint that is validated against
//! central finite differences in the test suite.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

/// Dense dynamic-rank array of `f64`.
pub type Arr = ArrayD<f64>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// A named, optimizer-visible weight array.
///
/// Parameters live outside the expression graph; each forward pass lifts the
/// current value into a leaf [`Var`]. Backward passes accumulate into `grad`.
pub struct Param {
    value: RefCell<Arr>,
    grad: RefCell<Arr>,
    trainable: Cell<bool>,
}

impl Param {
    pub fn new(value: Arr) -> Rc<Self> {
        let grad = Arr::zeros(value.raw_dim());
        Rc::new(Param {
            value: RefCell::new(value),
            grad: RefCell::new(grad),
            trainable: Cell::new(true),
        })
    }

    pub fn value(&self) -> Ref<'_, Arr> {
        self.value.borrow()
    }

    pub fn set_value(&self, value: Arr) {
        assert_eq!(
            value.shape(),
            self.value.borrow().shape(),
            "param shape is fixed after creation"
        );
        *self.value.borrow_mut() = value;
    }

    pub fn grad(&self) -> Ref<'_, Arr> {
        self.grad.borrow()
    }

    pub fn zero_grad(&self) {
        self.grad.borrow_mut().fill(0.0);
    }

    pub fn trainable(&self) -> bool {
        self.trainable.get()
    }

    pub fn set_trainable(&self, yes: bool) {
        self.trainable.set(yes);
    }

    pub fn len(&self) -> usize {
        self.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Add `delta` to one flat element. Used by finite-difference checks and
    /// the optimizer's in-place update.
    pub fn nudge(&self, flat_index: usize, delta: f64) {
        let mut v = self.value.borrow_mut();
        let slice = v.as_slice_mut().expect("params are standard layout");
        slice[flat_index] += delta;
    }

    fn accumulate_grad(&self, g: &Arr) {
        let mut slot = self.grad.borrow_mut();
        *slot += g;
    }
}

type BackFn = Box<dyn Fn(&Arr, &Node) -> Vec<Option<Arr>>>;

struct Node {
    id: u64,
    value: Arr,
    parents: Vec<Var>,
    back: Option<BackFn>,
    grad: RefCell<Option<Arr>>,
    needs_grad: Cell<bool>,
    param: Option<Rc<Param>>,
}

/// A value in the expression graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl Var {
    fn from_parts(value: Arr, parents: Vec<Var>, back: Option<BackFn>) -> Var {
        let needs = parents.iter().any(|p| p.0.needs_grad.get());
        Var(Rc::new(Node {
            id: fresh_id(),
            value,
            parents,
            back,
            grad: RefCell::new(None),
            needs_grad: Cell::new(needs),
            param: None,
        }))
    }

    /// Constant leaf; gradients do not flow into it.
    pub fn constant(value: Arr) -> Var {
        Var::from_parts(value, Vec::new(), None)
    }

    /// Leaf that records its gradient (for input-sensitivity checks).
    pub fn input(value: Arr) -> Var {
        let v = Var::from_parts(value, Vec::new(), None);
        v.0.needs_grad.set(true);
        v
    }

    /// Leaf backed by a parameter; backward deposits into `param.grad`.
    pub fn from_param(param: &Rc<Param>) -> Var {
        let value = param.value().clone();
        let v = Var(Rc::new(Node {
            id: fresh_id(),
            value,
            parents: Vec::new(),
            back: None,
            grad: RefCell::new(None),
            needs_grad: Cell::new(param.trainable()),
            param: Some(Rc::clone(param)),
        }));
        v
    }

    pub fn value(&self) -> &Arr {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    /// Gradient recorded by the last backward pass, if any.
    pub fn grad(&self) -> Option<Arr> {
        self.0.grad.borrow().clone()
    }

    /// Force gradient retention on this node even if nothing trainable feeds
    /// it. Must be called before dependent nodes are built.
    pub fn retain_grad(&self) {
        self.0.needs_grad.set(true);
    }

    pub fn scalar(&self) -> f64 {
        assert_eq!(self.0.value.len(), 1, "scalar() on non-scalar var");
        *self.0.value.iter().next().unwrap()
    }

    /// Reverse pass from a scalar output. Gradients accumulate into every
    /// node reachable through grad-requiring edges and into trainable params.
    pub fn backward(&self) {
        assert_eq!(self.0.value.len(), 1, "backward() requires a scalar loss");
        let mut nodes: HashMap<u64, Var> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if nodes.insert(v.0.id, v.clone()).is_none() {
                for p in &v.0.parents {
                    if p.0.needs_grad.get() {
                        stack.push(p.clone());
                    }
                }
            }
        }
        let mut order: Vec<u64> = nodes.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));

        *self.0.grad.borrow_mut() = Some(Arr::ones(self.0.value.raw_dim()));
        for id in order {
            let node = &nodes[&id].0;
            let grad = node.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            if let Some(param) = &node.param {
                if param.trainable() {
                    param.accumulate_grad(&grad);
                }
            }
            if let Some(back) = &node.back {
                let parent_grads = back(&grad, node);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (parent, pg) in node.parents.iter().zip(parent_grads) {
                    if let Some(pg) = pg {
                        if parent.0.needs_grad.get() {
                            accumulate(&parent.0.grad, pg);
                        }
                    }
                }
            }
        }
    }
}

fn accumulate(slot: &RefCell<Option<Arr>>, g: Arr) {
    let mut slot = slot.borrow_mut();
    match slot.as_mut() {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d array")
}

fn as1(a: &Arr) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("1-d array")
}

fn as3(a: &Arr) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("3-d array")
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let value = &self.0.value + &other.0.value;
        Var::from_parts(
            value,
            vec![self.clone(), other.clone()],
            Some(Box::new(|g, _| {
                vec![Some(g.clone()), Some(g.clone())]
            })),
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Var) -> Var {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let value = &self.0.value * &other.0.value;
        Var::from_parts(
            value,
            vec![self.clone(), other.clone()],
            Some(Box::new(|g, node| {
                let a = &node.parents[0].0.value;
                let b = &node.parents[1].0.value;
                vec![Some(g * b), Some(g * a)]
            })),
        )
    }

    pub fn div(&self, other: &Var) -> Var {
        assert_eq!(self.shape(), other.shape(), "div: shape mismatch");
        let value = &self.0.value / &other.0.value;
        Var::from_parts(
            value,
            vec![self.clone(), other.clone()],
            Some(Box::new(|g, node| {
                let a = &node.parents[0].0.value;
                let b = &node.parents[1].0.value;
                let da = g / b;
                let db = -(g * a) / (b * b);
                vec![Some(da), Some(db)]
            })),
        )
    }

    pub fn scale(&self, c: f64) -> Var {
        let value = &self.0.value * c;
        Var::from_parts(
            value,
            vec![self.clone()],
            Some(Box::new(move |g, _| vec![Some(g * c)])),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let value = &self.0.value + c;
        Var::from_parts(
            value,
            vec![self.clone()],
            Some(Box::new(|g, _| vec![Some(g.clone())])),
        )
    }

    pub fn relu(&self) -> Var {
        let value = self.0.value.mapv(|x| x.max(0.0));
        Var::from_parts(
            value,
            vec![self.clone()],
            Some(Box::new(|g, node| {
                let x = &node.parents[0].0.value;
                let mut dg = g.clone();
                dg.zip_mut_with(x, |d, &xv| {
                    if xv <= 0.0 {
                        *d = 0.0;
                    }
                });
                vec![Some(dg)]
            })),
        )
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.0.value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        Var::from_parts(
            value,
            vec![self.clone()],
            Some(Box::new(|g, node| {
                let y = &node.value;
                let dg = g * &y.mapv(|v| v * (1.0 - v));
                vec![Some(dg)]
            })),
        )
    }

    /// Row-major reshape; element order is preserved.
    pub fn reshape(&self, shape: &[usize]) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.0.value.len(),
            "reshape: element count mismatch"
        );
        let value = self
            .0
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("standard-layout reshape");
        let in_shape: Vec<usize> = self.shape().to_vec();
        Var::from_parts(
            value,
            vec![self.clone()],
            Some(Box::new(move |g, _| {
                let back = g
                    .clone()
                    .into_shape_with_order(IxDyn(&in_shape))
                    .expect("reshape grad");
                vec![Some(back)]
            })),
        )
    }

    pub fn sum_all(&self) -> Var {
        let value = Arr::from_elem(IxDyn(&[1]), self.0.value.sum());
        Var::from_parts(
            value,
            vec![self.clone()],
            Some(Box::new(|g, node| {
                let gv = g[[0]];
                let shape = node.parents[0].0.value.raw_dim();
                vec![Some(Arr::from_elem(shape, gv))]
            })),
        )
    }

    pub fn mean_all(&self) -> Var {
        let n = self.0.value.len() as f64;
        self.sum_all().scale(1.0 / n)
    }
}

/// Concatenate along the last axis; all leading axes must agree.
pub fn concat_last(parts: &[Var]) -> Var {
    assert!(!parts.is_empty());
    let views: Vec<_> = parts.iter().map(|p| p.0.value.view()).collect();
    let last = parts[0].shape().len() - 1;
    let value = ndarray::concatenate(Axis(last), &views).expect("concat_last shapes");
    let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
    Var::from_parts(
        value,
        parts.to_vec(),
        Some(Box::new(move |g, _| {
            let last = g.ndim() - 1;
            let mut out = Vec::with_capacity(widths.len());
            let mut offset = 0;
            for &w in &widths {
                let piece = g
                    .slice_axis(Axis(last), ndarray::Slice::from(offset..offset + w))
                    .to_owned();
                out.push(Some(piece));
                offset += w;
            }
            out
        })),
    )
}

/// Stack `[1]`-shaped scalars into one vector.
pub fn stack_scalars(parts: &[Var]) -> Var {
    assert!(!parts.is_empty());
    let value =
        Array1::from_iter(parts.iter().map(|p| p.scalar())).into_dyn();
    Var::from_parts(
        value,
        parts.to_vec(),
        Some(Box::new(|g, node| {
            let g = as1(g);
            (0..node.parents.len())
                .map(|i| Some(Arr::from_elem(IxDyn(&[1]), g[i])))
                .collect()
        })),
    )
}

// ---------------------------------------------------------------------------
// Matrix ops (token sequences are L x d)
// ---------------------------------------------------------------------------

impl Var {
    /// `self (L x K) . other (K x M)`.
    pub fn matmul(&self, other: &Var) -> Var {
        let a = as2(&self.0.value);
        let b = as2(&other.0.value);
        assert_eq!(a.ncols(), b.nrows(), "matmul: inner dims");
        let value = a.dot(&b).into_dyn();
        Var::from_parts(
            value,
            vec![self.clone(), other.clone()],
            Some(Box::new(|g, node| {
                let g = as2(g);
                let a = as2(&node.parents[0].0.value);
                let b = as2(&node.parents[1].0.value);
                let da = g.dot(&b.t()).into_dyn();
                let db = a.t().dot(&g).into_dyn();
                vec![Some(da), Some(db)]
            })),
        )
    }

    /// `self (L x K) . other^T (M x K)` -> `L x M`.
    pub fn matmul_nt(&self, other: &Var) -> Var {
        let a = as2(&self.0.value);
        let b = as2(&other.0.value);
        assert_eq!(a.ncols(), b.ncols(), "matmul_nt: inner dims");
        let value = a.dot(&b.t()).into_dyn();
        Var::from_parts(
            value,
            vec![self.clone(), other.clone()],
            Some(Box::new(|g, node| {
                let g = as2(g);
                let a = as2(&node.parents[0].0.value);
                let b = as2(&node.parents[1].0.value);
                let da = g.dot(&b).into_dyn();
                let db = g.t().dot(&a).into_dyn();
                vec![Some(da), Some(db)]
            })),
        )
    }

    /// Add a length-`d` bias vector to every row of an `L x d` matrix.
    pub fn add_bias_rows(&self, bias: &Var) -> Var {
        let x = as2(&self.0.value);
        let b = as1(&bias.0.value);
        assert_eq!(x.ncols(), b.len(), "add_bias_rows: width");
        let value = (&x + &b).into_dyn();
        Var::from_parts(
            value,
            vec![self.clone(), bias.clone()],
            Some(Box::new(|g, _| {
                let g2 = as2(g);
                let db = g2.sum_axis(Axis(0)).into_dyn();
                vec![Some(g.clone()), Some(db)]
            })),
        )
    }

    /// Row-wise softmax of an `L x M` matrix.
    pub fn softmax_rows(&self) -> Var {
        let x = as2(&self.0.value);
        let mut value = x.to_owned();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        Var::from_parts(
            value.into_dyn(),
            vec![self.clone()],
            Some(Box::new(|g, node| {
                let g = as2(g);
                let y = as2(&node.value);
                let mut dx = Array2::<f64>::zeros(g.raw_dim());
                for ((grow, yrow), mut drow) in
                    g.rows().into_iter().zip(y.rows()).zip(dx.rows_mut())
                {
                    let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(dx.into_dyn())]
            })),
        )
    }

    /// Per-row layer normalization with learned scale and shift.
    ///
    /// Rows with zero variance normalize to zero before scale/shift.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Var {
        let x = as2(&self.0.value);
        let gm = as1(&gamma.0.value);
        let bt = as1(&beta.0.value);
        let d = x.ncols();
        assert_eq!(gm.len(), d, "layer_norm: gamma width");
        assert_eq!(bt.len(), d, "layer_norm: beta width");
        let mut value = Array2::<f64>::zeros(x.raw_dim());
        for (row, mut out) in x.rows().into_iter().zip(value.rows_mut()) {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for ((o, &xv), (&g, &b)) in out.iter_mut().zip(row).zip(gm.iter().zip(bt.iter())) {
                *o = (xv - mean) * inv * g + b;
            }
        }
        Var::from_parts(
            value.into_dyn(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Some(Box::new(move |g, node| {
                let g = as2(g);
                let x = as2(&node.parents[0].0.value);
                let gm = as1(&node.parents[1].0.value);
                let d = x.ncols() as f64;
                let mut dx = Array2::<f64>::zeros(x.raw_dim());
                let mut dgamma = Array1::<f64>::zeros(gm.len());
                let mut dbeta = Array1::<f64>::zeros(gm.len());
                for ((xrow, grow), mut dxrow) in
                    x.rows().into_iter().zip(g.rows()).zip(dx.rows_mut())
                {
                    let mean = xrow.sum() / d;
                    let var = xrow.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
                    let inv = 1.0 / (var + eps).sqrt();
                    // xhat, a = gamma * dy, and its row statistics
                    let mut a_mean = 0.0;
                    let mut ax_mean = 0.0;
                    let xhat: Vec<f64> = xrow.iter().map(|&v| (v - mean) * inv).collect();
                    for ((&gv, &gamma_c), &xh) in grow.iter().zip(gm.iter()).zip(xhat.iter()) {
                        let a = gamma_c * gv;
                        a_mean += a;
                        ax_mean += a * xh;
                    }
                    a_mean /= d;
                    ax_mean /= d;
                    for (i, dxv) in dxrow.iter_mut().enumerate() {
                        let a = gm[i] * grow[i];
                        *dxv = inv * (a - a_mean - xhat[i] * ax_mean);
                    }
                    for i in 0..gm.len() {
                        dgamma[i] += grow[i] * xhat[i];
                        dbeta[i] += grow[i];
                    }
                }
                vec![
                    Some(dx.into_dyn()),
                    Some(dgamma.into_dyn()),
                    Some(dbeta.into_dyn()),
                ]
            })),
        )
    }
}

// ---------------------------------------------------------------------------
// Spatial ops (feature maps are H x W x C)
// ---------------------------------------------------------------------------

/// im2col for an HWC image: one row per output location, columns ordered
/// (ky, kx, c) to match a `(kh, kw, cin, cout)` kernel flattened row-major.
fn im2col(
    x: &ndarray::ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f64>, usize, usize) {
    let (h, w, c) = x.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::<f64>::zeros((oh * ow, kh * kw * c));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            let mut col = 0;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                        let src = x.slice(ndarray::s![iy as usize, ix as usize, ..]);
                        cols.slice_mut(ndarray::s![row, col..col + c])
                            .assign(&src);
                    }
                    col += c;
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Adjoint of [`im2col`]: scatter column gradients back onto the image.
fn col2im(
    dcols: &Array2<f64>,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array3<f64> {
    let mut dx = ndarray::Array3::<f64>::zeros((h, w, c));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            let mut col = 0;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                        let mut dst = dx.slice_mut(ndarray::s![iy as usize, ix as usize, ..]);
                        dst += &dcols.slice(ndarray::s![row, col..col + c]);
                    }
                    col += c;
                }
            }
        }
    }
    dx
}

impl Var {
    /// 2-D convolution of an `H x W x Cin` map with a `(kh, kw, Cin, Cout)`
    /// kernel plus per-channel bias.
    pub fn conv2d(&self, weight: &Var, bias: &Var, stride: usize, pad: usize) -> Var {
        let x = as3(&self.0.value);
        let wshape = weight.shape().to_vec();
        assert_eq!(wshape.len(), 4, "conv2d: kernel rank");
        let (kh, kw, cin, cout) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        assert_eq!(x.dim().2, cin, "conv2d: input channels");
        assert_eq!(bias.0.value.len(), cout, "conv2d: bias length");

        let (cols, oh, ow) = im2col(&x, kh, kw, stride, pad);
        let w2 = weight
            .0
            .value
            .view()
            .into_shape_with_order((kh * kw * cin, cout))
            .expect("kernel reshape");
        let b = as1(&bias.0.value);
        let mut out = cols.dot(&w2);
        out += &b;
        let value = out
            .into_shape_with_order(IxDyn(&[oh, ow, cout]))
            .expect("conv out reshape");

        Var::from_parts(
            value,
            vec![self.clone(), weight.clone(), bias.clone()],
            Some(Box::new(move |g, node| {
                let x = as3(&node.parents[0].0.value);
                let (h, w, _) = x.dim();
                let g2 = g
                    .view()
                    .into_shape_with_order((oh * ow, cout))
                    .expect("grad reshape");
                let w2 = node.parents[1]
                    .0
                    .value
                    .view()
                    .into_shape_with_order((kh * kw * cin, cout))
                    .expect("kernel reshape");
                // Recompute cols rather than caching them across the pass.
                let (cols, _, _) = im2col(&x, kh, kw, stride, pad);
                let dw = cols.t().dot(&g2);
                let db = g2.sum_axis(Axis(0));
                let dcols = g2.dot(&w2.t());
                let dx = col2im(&dcols, h, w, cin, kh, kw, stride, pad, oh, ow);
                vec![
                    Some(dx.into_dyn()),
                    Some(
                        dw.into_shape_with_order(IxDyn(&[kh, kw, cin, cout]))
                            .expect("dw reshape"),
                    ),
                    Some(db.into_dyn()),
                ]
            })),
        )
    }

    /// 2x2 max pooling with stride 2. Ties route the gradient to the first
    /// maximal element in scan order.
    pub fn max_pool2(&self) -> Var {
        let x = as3(&self.0.value);
        let (h, w, c) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2: even dims required");
        let mut out = ndarray::Array3::<f64>::zeros((h / 2, w / 2, c));
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = x[[2 * oy + dy, 2 * ox + dx, ch]];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[[oy, ox, ch]] = best;
                }
            }
        }
        Var::from_parts(
            out.into_dyn(),
            vec![self.clone()],
            Some(Box::new(|g, node| {
                let x = as3(&node.parents[0].0.value);
                let g = as3(g);
                let (h, w, c) = x.dim();
                let mut dx = ndarray::Array3::<f64>::zeros((h, w, c));
                for oy in 0..h / 2 {
                    for ox in 0..w / 2 {
                        for ch in 0..c {
                            let mut best = f64::NEG_INFINITY;
                            let mut at = (0, 0);
                            for dy in 0..2 {
                                for dx_ in 0..2 {
                                    let v = x[[2 * oy + dy, 2 * ox + dx_, ch]];
                                    if v > best {
                                        best = v;
                                        at = (dy, dx_);
                                    }
                                }
                            }
                            dx[[2 * oy + at.0, 2 * ox + at.1, ch]] += g[[oy, ox, ch]];
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            })),
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2_nearest(&self) -> Var {
        let x = as3(&self.0.value);
        let (h, w, c) = x.dim();
        let mut out = ndarray::Array3::<f64>::zeros((2 * h, 2 * w, c));
        for y in 0..2 * h {
            for xw in 0..2 * w {
                for ch in 0..c {
                    out[[y, xw, ch]] = x[[y / 2, xw / 2, ch]];
                }
            }
        }
        Var::from_parts(
            out.into_dyn(),
            vec![self.clone()],
            Some(Box::new(|g, node| {
                let g = as3(g);
                let (h2, w2, c) = g.dim();
                let mut dx = ndarray::Array3::<f64>::zeros((h2 / 2, w2 / 2, c));
                for y in 0..h2 {
                    for xw in 0..w2 {
                        for ch in 0..c {
                            dx[[y / 2, xw / 2, ch]] += g[[y, xw, ch]];
                        }
                    }
                }
                let _ = node;
                vec![Some(dx.into_dyn())]
            })),
        )
    }

    /// Channel-to-space rearrangement: `(H, W, C)` -> `(sH, sW, C/s^2)` with
    /// `out[h, w, c] = in[h/s, w/s, c*s^2 + s*(h%s) + (w%s)]`.
    pub fn pixel_shuffle(&self, s: usize) -> Var {
        let value = pixel_shuffle_array(&self.0.value, s);
        Var::from_parts(
            value,
            vec![self.clone()],
            Some(Box::new(move |g, node| {
                let g = as3(g);
                let in_shape = node.parents[0].0.value.shape();
                let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
                let mut dx = ndarray::Array3::<f64>::zeros((h, w, c));
                let (gh, gw, gc) = g.dim();
                for y in 0..gh {
                    for x in 0..gw {
                        for ch in 0..gc {
                            let src_c = ch * s * s + s * (y % s) + (x % s);
                            dx[[y / s, x / s, src_c]] += g[[y, x, ch]];
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            })),
        )
    }

    /// Extract channel `c` of an `H x W x C` map as an `H x W` matrix.
    pub fn take_channel(&self, c: usize) -> Var {
        let x = as3(&self.0.value);
        let value = x.index_axis(Axis(2), c).to_owned().into_dyn();
        Var::from_parts(
            value,
            vec![self.clone()],
            Some(Box::new(move |g, node| {
                let shape = node.parents[0].0.value.raw_dim();
                let mut dx = Arr::zeros(shape);
                {
                    let mut view = dx
                        .view_mut()
                        .into_dimensionality::<Ix3>()
                        .expect("3-d parent");
                    let g = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
                    view.index_axis_mut(Axis(2), c).assign(&g);
                }
                vec![Some(dx)]
            })),
        )
    }

    /// Mean over the spatial axes of an `H x W x C` map, yielding length-`C`.
    pub fn global_avg_pool(&self) -> Var {
        let x = as3(&self.0.value);
        let (h, w, _) = x.dim();
        let n = (h * w) as f64;
        let value = (x.sum_axis(Axis(0)).sum_axis(Axis(0)) / n).into_dyn();
        Var::from_parts(
            value,
            vec![self.clone()],
            Some(Box::new(move |g, node| {
                let g = as1(g);
                let shape = node.parents[0].0.value.shape();
                let (h, w, c) = (shape[0], shape[1], shape[2]);
                let mut dx = ndarray::Array3::<f64>::zeros((h, w, c));
                let scale = 1.0 / (h * w) as f64;
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..c {
                            dx[[y, x, ch]] = g[ch] * scale;
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            })),
        )
    }

    /// Dot product of two equal-length vectors, producing shape `[1]`.
    pub fn dot_vec(&self, other: &Var) -> Var {
        let a = as1(&self.0.value);
        let b = as1(&other.0.value);
        assert_eq!(a.len(), b.len(), "dot_vec: length");
        let value = Arr::from_elem(IxDyn(&[1]), a.dot(&b));
        Var::from_parts(
            value,
            vec![self.clone(), other.clone()],
            Some(Box::new(|g, node| {
                let gv = g[[0]];
                let a = &node.parents[0].0.value;
                let b = &node.parents[1].0.value;
                vec![Some(b * gv), Some(a * gv)]
            })),
        )
    }

    /// Bilinear resize of an `H x W x C` map (half-pixel centers, clamped).
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Var {
        let value = resize_bilinear_array(&self.0.value, oh, ow);
        Var::from_parts(
            value,
            vec![self.clone()],
            Some(Box::new(move |g, node| {
                let g = as3(g);
                let shape = node.parents[0].0.value.shape();
                let (h, w, c) = (shape[0], shape[1], shape[2]);
                let mut dx = ndarray::Array3::<f64>::zeros((h, w, c));
                for oy in 0..oh {
                    for ox in 0..ow {
                        let taps = bilinear_taps(oy, ox, h, w, oh, ow);
                        for ch in 0..c {
                            let gv = g[[oy, ox, ch]];
                            for &(iy, ix, wt) in &taps {
                                dx[[iy, ix, ch]] += gv * wt;
                            }
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            })),
        )
    }
}

/// Pure-array pixel shuffle; the `Var` op and its tests share this kernel.
pub fn pixel_shuffle_array(x: &Arr, s: usize) -> Arr {
    let x = as3(x);
    let (h, w, c) = x.dim();
    assert!(s >= 1, "pixel shuffle factor must be >= 1");
    assert_eq!(c % (s * s), 0, "channels must divide by s^2");
    let oc = c / (s * s);
    let mut out = ndarray::Array3::<f64>::zeros((s * h, s * w, oc));
    for y in 0..s * h {
        for xw in 0..s * w {
            for ch in 0..oc {
                let src_c = ch * s * s + s * (y % s) + (xw % s);
                out[[y, xw, ch]] = x[[y / s, xw / s, src_c]];
            }
        }
    }
    out.into_dyn()
}

fn bilinear_taps(
    oy: usize,
    ox: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> [(usize, usize, f64); 4] {
    let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
    let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
    let y0 = sy.floor().clamp(0.0, (h - 1) as f64) as usize;
    let x0 = sx.floor().clamp(0.0, (w - 1) as f64) as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = (sy - sy.floor()).clamp(0.0, 1.0);
    let fx = (sx - sx.floor()).clamp(0.0, 1.0);
    // When sy < 0 the floor clamps to 0; collapse the fraction too.
    let fy = if sy < 0.0 { 0.0 } else { fy };
    let fx = if sx < 0.0 { 0.0 } else { fx };
    [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x1, fy * fx),
    ]
}

/// Pure-array bilinear resize with half-pixel centers.
pub fn resize_bilinear_array(x: &Arr, oh: usize, ow: usize) -> Arr {
    let x = as3(x);
    let (h, w, c) = x.dim();
    let mut out = ndarray::Array3::<f64>::zeros((oh, ow, c));
    for oy in 0..oh {
        for ox in 0..ow {
            let taps = bilinear_taps(oy, ox, h, w, oh, ow);
            for ch in 0..c {
                let mut acc = 0.0;
                for &(iy, ix, wt) in &taps {
                    acc += x[[iy, ix, ch]] * wt;
                }
                out[[oy, ox, ch]] = acc;
            }
        }
    }
    out.into_dyn()
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Probability clamp used by the binary cross-entropy loss.
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy over a probability vector against 0/1 labels.
/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]`; the gradient is
/// zero where the clamp is active.
pub fn bce_mean(probs: &Var, labels: &[f64]) -> Var {
    let p = as1(&probs.0.value);
    assert_eq!(p.len(), labels.len(), "bce: length mismatch");
    let n = labels.len() as f64;
    let mut total = 0.0;
    for (&pv, &y) in p.iter().zip(labels) {
        let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
        total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
    }
    let value = Arr::from_elem(IxDyn(&[1]), total / n);
    let labels = labels.to_vec();
    Var::from_parts(
        value,
        vec![probs.clone()],
        Some(Box::new(move |g, node| {
            let gv = g[[0]];
            let p = as1(&node.parents[0].0.value);
            let n = labels.len() as f64;
            let mut dp = Array1::<f64>::zeros(p.len());
            for i in 0..p.len() {
                let pv = p[i];
                if pv > BCE_EPS && pv < 1.0 - BCE_EPS {
                    dp[i] = gv * (pv - labels[i]) / (pv * (1.0 - pv)) / n;
                }
            }
            vec![Some(dp.into_dyn())]
        })),
    )
}

// ---------------------------------------------------------------------------
// Parameter registry and initializers
// ---------------------------------------------------------------------------

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Ordered, named collection of parameters owned by a model.
#[derive(Default)]
pub struct ParamSet {
    entries: Vec<(String, Rc<Param>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, param: Rc<Param>) -> Rc<Param> {
        let name = name.into();
        debug_assert!(
            self.get(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, Rc::clone(&param)));
        param
    }

    pub fn get(&self, name: &str) -> Option<&Rc<Param>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Rc<Param>)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.entries.iter().map(|(_, p)| p.len()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, p) in &self.entries {
            p.zero_grad();
        }
    }

    /// Mark every parameter whose name starts with `prefix` (non-)trainable.
    pub fn set_trainable_prefix(&self, prefix: &str, yes: bool) {
        for (n, p) in &self.entries {
            if n.starts_with(prefix) {
                p.set_trainable(yes);
            }
        }
    }

    /// SHA-256 digest over names, shapes and raw little-endian values.
    pub fn value_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, p) in &self.entries {
            hasher.update(name.as_bytes());
            let v = p.value();
            for &d in v.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &x in v.iter() {
                hasher.update(x.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Independent deterministic RNG stream for one named component, so that
/// construction order of sibling components cannot perturb each other's
/// initial weights.
pub fn seed_stream(seed: u64, label: &str) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    rand_chacha::ChaCha8Rng::seed_from_u64(u64::from_le_bytes(d[..8].try_into().unwrap()))
}

/// Zero-mean normal with variance `2 / (fan_in + fan_out)`.
pub fn glorot_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Arr {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).expect("init shape")
}

pub fn zeros(shape: &[usize]) -> Arr {
    Arr::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Arr {
    Arr::ones(IxDyn(shape))
}
