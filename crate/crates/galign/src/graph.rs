//! Tape-based reverse-mode automatic differentiation over `ndarray`.
//!
//! A [`Graph`] is rebuilt for every optimization step: parameters and inputs
//! enter as leaves, operations append nodes, and [`Graph::backward`] walks
//! the tape in reverse. Nodes flagged as not requiring gradients are pruned
//! from the backward pass, which is how the discriminator update avoids
//! touching generator parameters and vice versa.
//!
//! All node values are kept in standard (row-major) layout so reshapes are
//! free and iteration order is deterministic.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayD, ArrayViewD, Axis, Ix2, Ix3, IxDyn, Slice};

use crate::scalar::{fl, Scalar};

/// Handle to a node in a [`Graph`]. Cheap to copy; only valid for the graph
/// that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    /// Input node; `tracked` leaves receive gradients, constants do not.
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var, T),
    MulScalar(Var, T),
    Neg(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Gelu(Var),
    LeakyRelu(Var, T),
    Clamp(Var, T, T),
    MatMul(Var, Var),
    Transpose2(Var),
    Reshape(Var),
    BroadcastTo(Var),
    SumAxesKeep(Var),
    SumAll(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize, usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool2(Var),
    UpsampleNearest2(Var),
    /// Non-overlapping patch extraction: `[C,H,W] -> [n, C*p*p]`.
    Unfold(Var, usize),
    /// Pick feature vectors at spatial points: `[C,H,W] -> [P, C]`.
    GatherPoints(Var, Vec<(usize, usize)>),
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation tape. See the module docs.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn std_owned<T: Clone>(v: ArrayViewD<'_, T>) -> ArrayD<T> {
    if v.is_standard_layout() {
        v.to_owned()
    } else {
        ArrayD::from_shape_vec(v.raw_dim(), v.iter().cloned().collect()).unwrap()
    }
}

fn mat_mul<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>) -> ArrayD<T> {
    let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
    let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
    let mut out = Array2::<T>::zeros((a2.nrows(), b2.ncols()));
    general_mat_mul(T::one(), &a2, &b2, T::zero(), &mut out);
    out.into_dyn()
}

fn mat_mul_at_b<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>) -> ArrayD<T> {
    // a^T * b without materializing the transpose
    let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
    let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
    let at = a2.t();
    let mut out = Array2::<T>::zeros((at.nrows(), b2.ncols()));
    general_mat_mul(T::one(), &at, &b2, T::zero(), &mut out);
    out.into_dyn()
}

fn mat_mul_a_bt<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>) -> ArrayD<T> {
    let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
    let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
    let bt = b2.t();
    let mut out = Array2::<T>::zeros((a2.nrows(), bt.ncols()));
    general_mat_mul(T::one(), &a2, &bt, T::zero(), &mut out);
    out.into_dyn()
}

fn conv_out_dims(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
}

/// `[C,H,W] -> [C*kh*kw, OH*OW]` with zero padding. Flat slice arithmetic
/// with a contiguous copy on the stride-1 fast path; this sits on the hot
/// path of every convolution.
fn im2col<T: Scalar>(x: &ArrayD<T>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<T> {
    let x3 = x.view().into_dimensionality::<Ix3>().unwrap();
    let (c_in, h, w) = x3.dim();
    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride, pad);
    let mut col = Array2::<T>::zeros((c_in * kh * kw, oh * ow));
    let xs = x.as_slice().expect("standard layout");
    let cs = col.as_slice_mut().expect("standard layout");
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                for oy in 0..oh {
                    let iy = oy * stride + ki;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    let dst_base = row * (oh * ow) + oy * ow;
                    let src_base = (c * h + iy) * w;
                    // valid ox range: pad <= ox*stride + kj < w + pad
                    let ox_lo = pad.saturating_sub(kj).div_ceil(stride);
                    let ox_hi_excl = if w + pad > kj {
                        (((w + pad - kj - 1) / stride) + 1).min(ow)
                    } else {
                        0
                    };
                    if ox_lo >= ox_hi_excl {
                        continue;
                    }
                    if stride == 1 {
                        let src_lo = src_base + ox_lo + kj - pad;
                        let n = ox_hi_excl - ox_lo;
                        cs[dst_base + ox_lo..dst_base + ox_lo + n]
                            .copy_from_slice(&xs[src_lo..src_lo + n]);
                    } else {
                        for ox in ox_lo..ox_hi_excl {
                            let ix = ox * stride + kj - pad;
                            cs[dst_base + ox] = xs[src_base + ix];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add column gradients back to image layout.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    gcol: &ArrayD<T>,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<T> {
    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride, pad);
    let mut gx = Array3::<T>::zeros((c_in, h, w));
    let gs = gcol.as_slice().expect("standard layout");
    let xs = gx.as_slice_mut().expect("standard layout");
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                for oy in 0..oh {
                    let iy = oy * stride + ki;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let iy = iy - pad;
                    let src_base = row * (oh * ow) + oy * ow;
                    let dst_base = (c * h + iy) * w;
                    let ox_lo = pad.saturating_sub(kj).div_ceil(stride);
                    let ox_hi_excl = if w + pad > kj {
                        (((w + pad - kj - 1) / stride) + 1).min(ow)
                    } else {
                        0
                    };
                    for ox in ox_lo..ox_hi_excl {
                        let ix = ox * stride + kj - pad;
                        xs[dst_base + ix] += gs[src_base + ox];
                    }
                }
            }
        }
    }
    gx
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn stable_softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = fl::<T>(GELU_C);
    let a = fl::<T>(GELU_A);
    let half = fl::<T>(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * x * (T::one() + t)
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = fl::<T>(GELU_C);
    let a = fl::<T>(GELU_A);
    let half = fl::<T>(0.5);
    let three = fl::<T>(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a gradient-tracked input.
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            std_owned(value.view())
        };
        self.push(value, Op::Leaf, true)
    }

    /// Insert an input that never receives gradients.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            std_owned(value.view())
        };
        self.push(value, Op::Leaf, false)
    }

    /// 0-d constant.
    pub fn scalar(&mut self, x: T) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    /// Value of a node that holds a single element.
    pub fn scalar_value(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        *val.iter().next().unwrap()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- elementwise binary ----

    fn ew_binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "elementwise op on mismatched shapes {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let mut out = self.nodes[a.0].value.clone();
        out.zip_mut_with(&self.nodes[b.0].value, |x, &y| *x = f(*x, y));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.ew_binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.ew_binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.ew_binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.ew_binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    // ---- scalar and unary ----

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.nodes[a.0].value.mapv(f);
        let ng = self.needs(a);
        self.push(out, op, ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::AddScalar(a, s), |x| x + s)
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::MulScalar(a, s), |x| x * s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), |x| x.ln())
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), stable_sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), stable_softplus)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu_fwd)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| {
            if x >= T::zero() {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, T::zero())
    }

    /// Elementwise clamp; gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    // ---- linear algebra and shape ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shape mismatch {sa:?} x {sb:?}"
        );
        let out = mat_mul(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        assert_eq!(self.shape(a).len(), 2, "transpose2 needs a matrix");
        let out = std_owned(self.nodes[a.0].value.t());
        let ng = self.needs(a);
        self.push(out, Op::Transpose2(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(self.nodes[a.0].value.len(), n, "reshape element count mismatch");
        let out = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        let ng = self.needs(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Numpy-style broadcast to `shape` (source dims must be 1 or equal,
    /// right-aligned).
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let view = self.nodes[a.0]
            .value
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| {
                panic!(
                    "cannot broadcast {:?} to {:?}",
                    self.nodes[a.0].value.shape(),
                    shape
                )
            });
        let mut out = ArrayD::<T>::zeros(IxDyn(shape));
        out.assign(&view);
        let ng = self.needs(a);
        self.push(out, Op::BroadcastTo(a), ng)
    }

    /// Sum over `axes`, keeping reduced dimensions as size 1.
    pub fn sum_axes_keep(&mut self, a: Var, axes: &[usize]) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for &ax in sorted.iter().rev() {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        let out = std_owned(out.view());
        let ng = self.needs(a);
        self.push(out, Op::SumAxesKeep(a), ng)
    }

    /// Mean over `axes`, keeping reduced dimensions as size 1.
    pub fn mean_axes_keep(&mut self, a: Var, axes: &[usize]) -> Var {
        let shape = self.shape(a).to_vec();
        let n: usize = axes.iter().map(|&ax| shape[ax]).product();
        let s = self.sum_axes_keep(a, axes);
        self.mul_scalar(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Sum of all elements, producing a 0-d node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let ng = self.needs(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a), ng)
    }

    /// Mean of all elements, producing a 0-d node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s = self.sum_all(a);
        self.mul_scalar(s, T::one() / T::from_usize(n).unwrap())
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let out = std_owned(out.view());
        let ng = parts.iter().any(|&v| self.needs(v));
        self.push(out, Op::Concat(parts.to_vec(), axis), ng)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let out = std_owned(
            self.nodes[a.0]
                .value
                .slice_axis(Axis(axis), Slice::from(start..start + len)),
        );
        let ng = self.needs(a);
        self.push(out, Op::Narrow(a, axis, start, len), ng)
    }

    // ---- structured ops ----

    /// 2-D convolution over `[C,H,W]` with kernel `[Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d kernel must be [Cout,Cin,kh,kw]");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch");
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        let (oh, ow) = conv_out_dims(xs[1], xs[2], kh, kw, stride, pad);
        let col = im2col(&self.nodes[x.0].value, kh, kw, stride, pad);
        let wv = self.nodes[w.0].value.view();
        let w_mat = wv
            .to_shape((c_out, ws[1] * kh * kw))
            .expect("kernel reshape");
        let mut out_mat = Array2::<T>::zeros((c_out, oh * ow));
        general_mat_mul(T::one(), &w_mat.view(), &col.view(), T::zero(), &mut out_mat);
        let mut out = out_mat
            .into_shape_with_order((c_out, oh, ow))
            .unwrap()
            .into_dyn();
        if let Some(bv) = b {
            assert_eq!(self.shape(bv), [c_out], "conv2d bias shape");
            let bias = &self.nodes[bv.0].value;
            for (mut plane, &bc) in out.outer_iter_mut().zip(bias.iter()) {
                plane.mapv_inplace(|v| v + bc);
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.map(|bv| self.needs(bv)).unwrap_or(false);
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        assert!(xs[1].is_multiple_of(2) && xs[2].is_multiple_of(2), "max_pool2 needs even dims");
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = xv.dim();
        let mut out = Array3::<T>::zeros((c, h / 2, w / 2));
        for ci in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let mut best = xv[[ci, 2 * i, 2 * j]];
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let v = xv[[ci, 2 * i + di, 2 * j + dj]];
                        if v > best {
                            best = v;
                        }
                    }
                    out[[ci, i, j]] = best;
                }
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::MaxPool2(x), ng)
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = xv.dim();
        let mut out = Array3::<T>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = xv[[ci, i, j]];
                    out[[ci, 2 * i, 2 * j]] = v;
                    out[[ci, 2 * i, 2 * j + 1]] = v;
                    out[[ci, 2 * i + 1, 2 * j]] = v;
                    out[[ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::UpsampleNearest2(x), ng)
    }

    /// Non-overlapping `p x p` patches of `[C,H,W]` flattened to rows of a
    /// `[n, C*p*p]` matrix, patches in row-major grid order and each patch
    /// flattened channel-major.
    pub fn unfold(&mut self, x: Var, p: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        assert!(xs[1].is_multiple_of(p) && xs[2].is_multiple_of(p), "unfold dims not divisible by patch");
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = xv.dim();
        let (gh, gw) = (h / p, w / p);
        let mut out = Array2::<T>::zeros((gh * gw, c * p * p));
        for by in 0..gh {
            for bx in 0..gw {
                let t = by * gw + bx;
                for ci in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            out[[t, (ci * p + dy) * p + dx]] = xv[[ci, by * p + dy, bx * p + dx]];
                        }
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::Unfold(x, p), ng)
    }

    /// Feature vectors at the given `(row, col)` points: `[C,H,W] -> [P,C]`.
    /// Duplicate points are allowed; their gradients accumulate.
    pub fn gather_points(&mut self, x: Var, pts: &[(usize, usize)]) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = xv.dim();
        let mut out = Array2::<T>::zeros((pts.len(), c));
        for (i, &(y, xcol)) in pts.iter().enumerate() {
            assert!(y < h && xcol < w, "gather point out of bounds");
            for ci in 0..c {
                out[[i, ci]] = xv[[ci, y, xcol]];
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::GatherPoints(x, pts.to_vec()), ng)
    }

    // ---- composite helpers ----

    /// `x [m,in] * w^T [in,out] + b`, the usual fully-connected layer.
    pub fn linear2(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let wt = self.transpose2(w);
        let mm = self.matmul(x, wt);
        match b {
            Some(bv) => {
                let out_dim = self.shape(bv)[0];
                let rows = self.shape(mm)[0];
                let b1 = self.reshape(bv, &[1, out_dim]);
                let bb = self.broadcast_to(b1, &[rows, out_dim]);
                self.add(mm, bb)
            }
            None => mm,
        }
    }

    /// Fully-connected layer on a single vector: `[in] -> [out]`.
    pub fn vec_linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let n = self.shape(x)[0];
        let x2 = self.reshape(x, &[1, n]);
        let y = self.linear2(x2, w, b);
        let out = self.shape(y)[1];
        self.reshape(y, &[out])
    }

    /// Layer normalization over the last axis of a `[n, d]` matrix with
    /// per-feature affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 2, "layer_norm expects [n, d]");
        let d = shape[1];
        let mu = self.mean_axes_keep(x, &[1]);
        let mu_b = self.broadcast_to(mu, &shape);
        let xc = self.sub(x, mu_b);
        let sq = self.mul(xc, xc);
        let var = self.mean_axes_keep(sq, &[1]);
        let var_eps = self.add_scalar(var, eps);
        let std = self.sqrt(var_eps);
        let std_b = self.broadcast_to(std, &shape);
        let norm = self.div(xc, std_b);
        let g1 = self.reshape(gamma, &[1, d]);
        let gb = self.broadcast_to(g1, &shape);
        let b1 = self.reshape(beta, &[1, d]);
        let bb = self.broadcast_to(b1, &shape);
        let scaled = self.mul(norm, gb);
        self.add(scaled, bb)
    }

    // ---- backward ----

    /// Reverse sweep from a 0-d `root`. Returns gradients for every tracked
    /// leaf that `root` depends on.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must hold a single element"
        );
        let mut grads: Vec<Option<ArrayD<T>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), T::one()));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(&mut grads, *b, g.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let mut ga = g.clone();
                        ga.zip_mut_with(&self.nodes[b.0].value, |x, &y| *x *= y);
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let mut gb = g;
                        gb.zip_mut_with(&self.nodes[a.0].value, |x, &y| *x *= y);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Div(a, b) => {
                    if self.needs(*a) {
                        let mut ga = g.clone();
                        ga.zip_mut_with(&self.nodes[b.0].value, |x, &y| *x /= y);
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        // d(a/b)/db = -a/b^2 = -out/b
                        let mut gb = g;
                        gb.zip_mut_with(&self.nodes[id].value, |x, &y| *x *= y);
                        gb.zip_mut_with(&self.nodes[b.0].value, |x, &y| *x = -(*x) / y);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::AddScalar(a, _) => self.acc(&mut grads, *a, g),
                Op::MulScalar(a, s) => {
                    let s = *s;
                    self.acc(&mut grads, *a, g.mapv(|v| v * s));
                }
                Op::Neg(a) => self.acc(&mut grads, *a, g.mapv(|v| -v)),
                Op::Exp(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&self.nodes[id].value, |x, &y| *x *= y);
                    self.acc(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&self.nodes[a.0].value, |x, &y| *x /= y);
                    self.acc(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let half = fl::<T>(0.5);
                    let mut ga = g;
                    ga.zip_mut_with(&self.nodes[id].value, |x, &y| *x = *x * half / y);
                    self.acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&self.nodes[id].value, |x, &y| *x *= T::one() - y * y);
                    self.acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&self.nodes[id].value, |x, &y| *x = *x * y * (T::one() - y));
                    self.acc(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&self.nodes[a.0].value, |x, &y| *x *= stable_sigmoid(y));
                    self.acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&self.nodes[a.0].value, |x, &y| *x *= gelu_bwd(y));
                    self.acc(&mut grads, *a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let slope = *slope;
                    let mut ga = g;
                    ga.zip_mut_with(&self.nodes[a.0].value, |x, &y| {
                        if y < T::zero() {
                            *x *= slope;
                        }
                    });
                    self.acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let mut ga = g;
                    ga.zip_mut_with(&self.nodes[a.0].value, |x, &y| {
                        if y < lo || y > hi {
                            *x = T::zero();
                        }
                    });
                    self.acc(&mut grads, *a, ga);
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = mat_mul_a_bt(&g, &self.nodes[b.0].value);
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = mat_mul_at_b(&self.nodes[a.0].value, &g);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Transpose2(a) => {
                    self.acc(&mut grads, *a, std_owned(g.t()));
                }
                Op::Reshape(a) => {
                    let src = self.nodes[a.0].value.raw_dim();
                    self.acc(&mut grads, *a, g.into_shape_with_order(src).unwrap());
                }
                Op::BroadcastTo(a) => {
                    let src = self.nodes[a.0].value.shape().to_vec();
                    let dst = g.shape().to_vec();
                    let mut ga = g;
                    // collapse extra leading axes
                    while ga.ndim() > src.len() {
                        ga = ga.sum_axis(Axis(0));
                    }
                    #[allow(clippy::needless_range_loop)]
                    for ax in 0..src.len() {
                        if src[ax] == 1 && ga.shape()[ax] != 1 {
                            ga = ga.sum_axis(Axis(ax)).insert_axis(Axis(ax));
                        }
                    }
                    debug_assert_eq!(ga.shape(), &src[..], "broadcast backward {dst:?}");
                    self.acc(&mut grads, *a, std_owned(ga.view()));
                }
                Op::SumAxesKeep(a) => {
                    let src = self.nodes[a.0].value.shape().to_vec();
                    let mut gb = ArrayD::<T>::zeros(IxDyn(&src));
                    gb.assign(&g.broadcast(IxDyn(&src)).unwrap());
                    self.acc(&mut grads, *a, gb);
                }
                Op::SumAll(a) => {
                    let gv = *g.iter().next().unwrap();
                    let src = self.nodes[a.0].value.raw_dim();
                    self.acc(&mut grads, *a, ArrayD::from_elem(src, gv));
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.shape()[*axis];
                        if self.needs(p) {
                            let gp = std_owned(
                                g.slice_axis(Axis(*axis), Slice::from(start..start + len)),
                            );
                            self.acc(&mut grads, p, gp);
                        }
                        start += len;
                    }
                }
                Op::Narrow(a, axis, start, len) => {
                    let mut ga = ArrayD::zeros(self.nodes[a.0].value.raw_dim());
                    ga.slice_axis_mut(Axis(*axis), Slice::from(*start..start + len))
                        .assign(&g);
                    self.acc(&mut grads, *a, ga);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let ws = self.nodes[w.0].value.shape().to_vec();
                    let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
                    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                    let (oh, ow) = (g3.dim().1, g3.dim().2);
                    let g_mat = std_owned(g.view())
                        .into_shape_with_order((c_out, oh * ow))
                        .unwrap()
                        .into_dyn();
                    if let Some(bv) = b {
                        if self.needs(*bv) {
                            let gb = g_mat
                                .view()
                                .into_dimensionality::<Ix2>()
                                .unwrap()
                                .sum_axis(Axis(1));
                            self.acc(&mut grads, *bv, gb.into_dyn());
                        }
                    }
                    if self.needs(*w) {
                        let col = im2col(&self.nodes[x.0].value, kh, kw, *stride, *pad).into_dyn();
                        let gw = mat_mul_a_bt(&g_mat, &col);
                        self.acc(
                            &mut grads,
                            *w,
                            gw.into_shape_with_order(IxDyn(&ws)).unwrap(),
                        );
                    }
                    if self.needs(*x) {
                        let wv = self.nodes[w.0].value.view();
                        let w_mat = std_owned(
                            wv.to_shape((c_out, ws[1] * kh * kw)).unwrap().view().into_dyn(),
                        );
                        let gcol = mat_mul_at_b(&w_mat, &g_mat);
                        let gx = col2im_add(&gcol, xs[0], xs[1], xs[2], kh, kw, *stride, *pad);
                        self.acc(&mut grads, *x, gx.into_dyn());
                    }
                }
                Op::MaxPool2(a) => {
                    let xv = self.nodes[a.0]
                        .value
                        .view()
                        .into_dimensionality::<Ix3>()
                        .unwrap();
                    let (c, h, w) = xv.dim();
                    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                    let mut ga = Array3::<T>::zeros((c, h, w));
                    for ci in 0..c {
                        for i in 0..h / 2 {
                            for j in 0..w / 2 {
                                let mut best = (0usize, 0usize);
                                let mut bv = xv[[ci, 2 * i, 2 * j]];
                                for (di, dj) in [(0usize, 1usize), (1, 0), (1, 1)] {
                                    let v = xv[[ci, 2 * i + di, 2 * j + dj]];
                                    if v > bv {
                                        bv = v;
                                        best = (di, dj);
                                    }
                                }
                                ga[[ci, 2 * i + best.0, 2 * j + best.1]] = g3[[ci, i, j]];
                            }
                        }
                    }
                    self.acc(&mut grads, *a, ga.into_dyn());
                }
                Op::UpsampleNearest2(a) => {
                    let src = self.nodes[a.0].value.shape().to_vec();
                    let (c, h, w) = (src[0], src[1], src[2]);
                    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                    let mut ga = Array3::<T>::zeros((c, h, w));
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                ga[[ci, i, j]] = g3[[ci, 2 * i, 2 * j]]
                                    + g3[[ci, 2 * i, 2 * j + 1]]
                                    + g3[[ci, 2 * i + 1, 2 * j]]
                                    + g3[[ci, 2 * i + 1, 2 * j + 1]];
                            }
                        }
                    }
                    self.acc(&mut grads, *a, ga.into_dyn());
                }
                Op::Unfold(a, p) => {
                    let p = *p;
                    let src = self.nodes[a.0].value.shape().to_vec();
                    let (c, h, w) = (src[0], src[1], src[2]);
                    let (gh, gw) = (h / p, w / p);
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut ga = Array3::<T>::zeros((c, h, w));
                    for by in 0..gh {
                        for bx in 0..gw {
                            let t = by * gw + bx;
                            for ci in 0..c {
                                for dy in 0..p {
                                    for dx in 0..p {
                                        ga[[ci, by * p + dy, bx * p + dx]] =
                                            g2[[t, (ci * p + dy) * p + dx]];
                                    }
                                }
                            }
                        }
                    }
                    self.acc(&mut grads, *a, ga.into_dyn());
                }
                Op::GatherPoints(a, pts) => {
                    let src = self.nodes[a.0].value.shape().to_vec();
                    let c = src[0];
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut ga = Array3::<T>::zeros((c, src[1], src[2]));
                    for (i, &(y, xcol)) in pts.iter().enumerate() {
                        for ci in 0..c {
                            ga[[ci, y, xcol]] += g2[[i, ci]];
                        }
                    }
                    self.acc(&mut grads, *a, ga.into_dyn());
                }
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<T>>], v: Var, contribution: ArrayD<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_all_grads, finite_diff_grad, max_rel_err};
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| f64::uniform(rng, -1.0, 1.0))
    }

    #[test]
    fn elementwise_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_arr(&[2, 3], &mut rng);
        let b = rand_arr(&[2, 3], &mut rng).mapv(|v| v + 2.0); // keep divisor away from 0
        check_all_grads(
            &[a, b],
            |g, vars| {
                let m = g.mul(vars[0], vars[1]);
                let d = g.div(m, vars[1]);
                let s = g.sub(d, vars[0]); // ~0, keeps graph nontrivial
                let t = g.add(s, m);
                let e = g.exp(t);
                g.mean_all(e)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn unary_activations_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_arr(&[11], &mut rng).mapv(|v| v * 2.0);
        check_all_grads(
            std::slice::from_ref(&x),
            |g, vars| {
                let t = g.tanh(vars[0]);
                let s = g.sigmoid(vars[0]);
                let sp = g.softplus(vars[0]);
                let ge = g.gelu(vars[0]);
                let lr = g.leaky_relu(vars[0], 0.2);
                let sum1 = g.add(t, s);
                let sum2 = g.add(sp, ge);
                let sum3 = g.add(sum1, sum2);
                let sum4 = g.add(sum3, lr);
                g.sum_all(sum4)
            },
            1e-6,
            1e-6,
        );
        // ln/sqrt need positive inputs
        let xp = x.mapv(|v| v.abs() + 0.5);
        check_all_grads(
            &[xp],
            |g, vars| {
                let l = g.ln(vars[0]);
                let r = g.sqrt(vars[0]);
                let s = g.mul(l, r);
                g.sum_all(s)
            },
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn matmul_and_shape_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_arr(&[3, 4], &mut rng);
        let b = rand_arr(&[4, 2], &mut rng);
        let c = rand_arr(&[2], &mut rng);
        check_all_grads(
            &[a, b, c],
            |g, vars| {
                let mm = g.matmul(vars[0], vars[1]); // [3,2]
                let ct = g.reshape(vars[2], &[1, 2]);
                let cb = g.broadcast_to(ct, &[3, 2]);
                let y = g.mul(mm, cb);
                let yt = g.transpose2(y);
                let n = g.narrow(yt, 0, 0, 1); // [1,3]
                let s1 = g.sum_axes_keep(y, &[0]);
                let joined = g.concat(1, &[n, s1]); // [1,5]
                g.mean_all(joined)
            },
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn conv2d_stride_and_padding_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (stride, pad) in [(1usize, 1usize), (2, 1)] {
            let x = rand_arr(&[2, 6, 6], &mut rng);
            let w = rand_arr(&[3, 2, 3, 3], &mut rng);
            let b = rand_arr(&[3], &mut rng);
            check_all_grads(
                &[x, w, b],
                |g, vars| {
                    let y = g.conv2d(vars[0], vars[1], Some(vars[2]), stride, pad);
                    let y2 = g.mul(y, y);
                    g.mean_all(y2)
                },
                1e-6,
                1e-5,
            );
        }
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        // 4x4 single-channel toy against a hand-rolled dot product
        let x = ArrayD::from_shape_vec(
            IxDyn(&[1, 4, 4]),
            (0..16).map(|i| i as f64).collect(),
        )
        .unwrap();
        let w = ArrayD::from_shape_vec(IxDyn(&[1, 1, 3, 3]), vec![1.0; 9]).unwrap();
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w);
        let y = g.conv2d(xv, wv, None, 1, 0);
        assert_eq!(g.shape(y), &[1, 2, 2]);
        // out[0,0] = sum of the top-left 3x3 block
        let mut expect = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                expect += x[[0, i, j]];
            }
        }
        assert_eq!(g.value(y)[[0, 0, 0]], expect);
    }

    #[test]
    fn pool_upsample_unfold_gather_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_arr(&[2, 4, 4], &mut rng);
        check_all_grads(
            std::slice::from_ref(&x),
            |g, vars| {
                let p = g.max_pool2(vars[0]);
                let u = g.upsample_nearest2(p);
                let d = g.mul(u, vars[0]);
                g.sum_all(d)
            },
            1e-6,
            1e-6,
        );
        check_all_grads(
            std::slice::from_ref(&x),
            |g, vars| {
                let uf = g.unfold(vars[0], 2); // [4, 8]
                let sq = g.mul(uf, uf);
                g.mean_all(sq)
            },
            1e-6,
            1e-6,
        );
        check_all_grads(
            &[x],
            |g, vars| {
                let pts = [(0usize, 0usize), (1, 3), (1, 3), (3, 2)];
                let gp = g.gather_points(vars[0], &pts);
                let sq = g.mul(gp, gp);
                g.sum_all(sq)
            },
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_arr(&[3, 5], &mut rng);
        let gamma = rand_arr(&[5], &mut rng).mapv(|v| v + 1.5);
        let beta = rand_arr(&[5], &mut rng);
        check_all_grads(
            &[x, gamma, beta],
            |g, vars| {
                let y = g.layer_norm(vars[0], vars[1], vars[2], 1e-6);
                let y2 = g.mul(y, y);
                g.mean_all(y2)
            },
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn constants_receive_no_gradient_and_are_pruned() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(ArrayD::from_elem(IxDyn(&[2]), 1.5));
        let c = g.constant(ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let m = g.mul(a, c);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        assert!(grads.wrt(c).is_none());
        let ga = grads.wrt(a).unwrap();
        assert!(ga.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(ArrayD::from_shape_vec(IxDyn(&[3]), vec![-2.0, 0.5, 2.0]).unwrap());
        let y = g.clamp(x, -1.0, 1.0);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        let gx = grads.wrt(x).unwrap();
        assert_eq!(gx.as_slice().unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn finite_diff_helper_agrees_with_known_gradient() {
        // d/dx mean(x^2) = 2x/n
        let x = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let fd = finite_diff_grad(
            &mut |inputs: &[ArrayD<f64>]| inputs[0].mapv(|v| v * v).mean().unwrap(),
            std::slice::from_ref(&x),
            0,
            1e-6,
        );
        let exact = x.mapv(|v| 2.0 * v / 4.0);
        assert!(max_rel_err(&exact, &fd, 1e-3) < 1e-8);
    }
}
