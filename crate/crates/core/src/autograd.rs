//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in creation order; [`Tape::backward`]
//! walks it in reverse. Nodes that do not depend on any gradient-requiring
//! leaf are skipped, so frozen parameters registered as constants receive no
//! gradient at all.
//!
//! Shape errors inside the tape are programming errors and panic; model
//! entry points validate user-supplied shapes before building a graph.

use std::cell::{Ref, RefCell};

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Half-open pixel rectangle `(y0, y1, x0, x1)` on a feature map.
pub type Region = (usize, usize, usize, usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, xhat: Tensor, inv_std: Vec<f64> },
    GroupNorm { x: Var, groups: usize, xhat: Tensor, inv_std: Vec<f64> },
    L2NormRows { x: Var, norms: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Reshape(Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceLast { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
    Conv2d { x: Var, w: Var, cols: Tensor, geom: ConvGeom },
    Upsample2x(Var),
    RegionMean { x: Var, regions: Vec<Region> },
    RowVecMat { a: Var, m: Var, d: usize },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients indexed by [`Var`]; `None` for nodes that needed none.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn binary(&self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            same_shape(&va, &vb, name);
            zip_map(&va, &vb, f)
        };
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, "minimum", f64::min, Op::Minimum(a, b))
    }

    pub fn maximum(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, "maximum", f64::max, Op::Maximum(a, b))
    }

    /// `x[.., c] + b[c]`.
    pub fn add_row(&self, x: Var, b: Var) -> Var {
        let value = {
            let (vx, vb) = (self.value(x), self.value(b));
            let c = vx.cols();
            assert_eq!(vb.numel(), c, "add_row: bias {:?} vs input {:?}", vb.shape(), vx.shape());
            let bd = vb.data();
            let data = vx.data().iter().enumerate().map(|(i, &v)| v + bd[i % c]).collect();
            Tensor::new(vx.shape().to_vec(), data)
        };
        let rg = self.rg(&[x, b]);
        self.push(value, Op::AddRow(x, b), rg)
    }

    /// `x[.., c] * v[c]`.
    pub fn mul_row(&self, x: Var, v: Var) -> Var {
        let value = {
            let (vx, vv) = (self.value(x), self.value(v));
            let c = vx.cols();
            assert_eq!(vv.numel(), c, "mul_row: {:?} vs {:?}", vv.shape(), vx.shape());
            let vd = vv.data();
            let data = vx.data().iter().enumerate().map(|(i, &a)| a * vd[i % c]).collect();
            Tensor::new(vx.shape().to_vec(), data)
        };
        let rg = self.rg(&[x, v]);
        self.push(value, Op::MulRow(x, v), rg)
    }

    /// `x * s` for a one-element tensor `s`.
    pub fn mul_scalar(&self, x: Var, s: Var) -> Var {
        let value = {
            let sv = self.value(s).item();
            self.value(x).map(|a| a * sv)
        };
        let rg = self.rg(&[x, s]);
        self.push(value, Op::MulScalar(x, s), rg)
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, |a| a * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        self.unary(x, |a| a + c, Op::AddScalar(x))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(&self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&self, x: Var) -> Var {
        let value = self.value(x).transpose2();
        let rg = self.rg(&[x]);
        self.push(value, Op::Transpose(x), rg)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |a| a.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&self, x: Var) -> Var {
        let value = softmax_rows(&self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&self, x: Var) -> Var {
        let value = {
            let vx = self.value(x);
            let c = vx.cols();
            let mut out = vx.data().to_vec();
            for row in out.chunks_mut(c) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            Tensor::new(vx.shape().to_vec(), out)
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Normalizes each row over the trailing axis (no affine transform).
    pub fn layer_norm(&self, x: Var, eps: f64) -> Var {
        let (value, xhat, inv_std) = {
            let vx = self.value(x);
            let c = vx.cols();
            let mut out = vx.data().to_vec();
            let mut inv = Vec::with_capacity(vx.rows());
            for row in out.chunks_mut(c) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * is;
                }
                inv.push(is);
            }
            let t = Tensor::new(vx.shape().to_vec(), out);
            (t.clone(), t, inv)
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::LayerNorm { x, xhat, inv_std }, rg)
    }

    /// Group normalization of an `(H, W, C)` map over `groups` channel groups.
    pub fn group_norm(&self, x: Var, groups: usize, eps: f64) -> Var {
        let (value, inv_std) = {
            let vx = self.value(x);
            let c = vx.cols();
            assert!(groups > 0 && c.is_multiple_of(groups), "group_norm: {c} channels, {groups} groups");
            let cg = c / groups;
            let pixels = vx.rows();
            let n = (pixels * cg) as f64;
            let mut out = vx.data().to_vec();
            let mut inv = Vec::with_capacity(groups);
            for g in 0..groups {
                let mut mean = 0.0;
                for p in 0..pixels {
                    for ch in g * cg..(g + 1) * cg {
                        mean += out[p * c + ch];
                    }
                }
                mean /= n;
                let mut var = 0.0;
                for p in 0..pixels {
                    for ch in g * cg..(g + 1) * cg {
                        let d = out[p * c + ch] - mean;
                        var += d * d;
                    }
                }
                var /= n;
                let is = 1.0 / (var + eps).sqrt();
                for p in 0..pixels {
                    for ch in g * cg..(g + 1) * cg {
                        out[p * c + ch] = (out[p * c + ch] - mean) * is;
                    }
                }
                inv.push(is);
            }
            (Tensor::new(vx.shape().to_vec(), out), inv)
        };
        let rg = self.rg(&[x]);
        let xhat = value.clone();
        self.push(value, Op::GroupNorm { x, groups, xhat, inv_std }, rg)
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize_rows(&self, x: Var) -> Var {
        let (value, norms) = {
            let vx = self.value(x);
            let c = vx.cols();
            let mut out = vx.data().to_vec();
            let mut norms = Vec::with_capacity(vx.rows());
            for row in out.chunks_mut(c) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                for v in row.iter_mut() {
                    *v /= n;
                }
                norms.push(n);
            }
            (Tensor::new(vx.shape().to_vec(), out), norms)
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::L2NormRows { x, norms }, rg)
    }

    pub fn sum(&self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let value = {
            let vx = self.value(x);
            Tensor::scalar(vx.sum() / vx.numel() as f64)
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Sums over the trailing axis, dropping it.
    pub fn sum_last(&self, x: Var) -> Var {
        let value = {
            let vx = self.value(x);
            let c = vx.cols();
            let data: Vec<f64> = vx.data().chunks(c).map(|r| r.iter().sum()).collect();
            let mut shape = vx.shape().to_vec();
            shape.pop();
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::new(shape, data)
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::SumLast(x), rg)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape.to_vec());
        let rg = self.rg(&[x]);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Concatenates along the trailing axis; all inputs share the row count.
    pub fn concat_last(&self, xs: &[Var]) -> Var {
        let value = {
            let vals: Vec<Ref<Tensor>> = xs.iter().map(|&v| self.value(v)).collect();
            let rows = vals[0].rows();
            assert!(vals.iter().all(|v| v.rows() == rows), "concat_last: row mismatch");
            let total: usize = vals.iter().map(|v| v.cols()).sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for v in &vals {
                    out.extend_from_slice(v.row(r));
                }
            }
            let mut shape = vals[0].shape().to_vec();
            *shape.last_mut().unwrap() = total;
            Tensor::new(shape, out)
        };
        let rg = self.rg(xs);
        self.push(value, Op::ConcatLast(xs.to_vec()), rg)
    }

    /// Stacks `(r_i, c)` blocks into `(Σ r_i, c)`.
    pub fn concat_rows(&self, xs: &[Var]) -> Var {
        let value = {
            let vals: Vec<Ref<Tensor>> = xs.iter().map(|&v| self.value(v)).collect();
            let c = vals[0].cols();
            assert!(vals.iter().all(|v| v.cols() == c), "concat_rows: column mismatch");
            let mut out = Vec::new();
            let mut rows = 0;
            for v in &vals {
                out.extend_from_slice(v.data());
                rows += v.rows();
            }
            Tensor::new([rows, c], out)
        };
        let rg = self.rg(xs);
        self.push(value, Op::ConcatRows(xs.to_vec()), rg)
    }

    pub fn slice_last(&self, x: Var, start: usize, len: usize) -> Var {
        let value = {
            let vx = self.value(x);
            let c = vx.cols();
            assert!(start + len <= c, "slice_last out of range");
            let mut out = Vec::with_capacity(vx.rows() * len);
            for r in 0..vx.rows() {
                out.extend_from_slice(&vx.row(r)[start..start + len]);
            }
            let mut shape = vx.shape().to_vec();
            *shape.last_mut().unwrap() = len;
            Tensor::new(shape, out)
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::SliceLast { x, start }, rg)
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Var {
        let value = {
            let vx = self.value(x);
            let c = vx.cols();
            assert!(start + len <= vx.rows(), "slice_rows out of range");
            Tensor::new([len, c], vx.data()[start * c..(start + len) * c].to_vec())
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::SliceRows { x, start }, rg)
    }

    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Var {
        let value = {
            let vx = self.value(x);
            let c = vx.cols();
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                out.extend_from_slice(vx.row(i));
            }
            Tensor::new([idx.len(), c], out)
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, rg)
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn pick(&self, x: Var, idx: &[usize]) -> Var {
        let value = {
            let vx = self.value(x);
            assert_eq!(vx.rows(), idx.len(), "pick: one index per row");
            let data = idx.iter().enumerate().map(|(r, &j)| vx.row(r)[j]).collect();
            Tensor::new([idx.len()], data)
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::Pick { x, idx: idx.to_vec() }, rg)
    }

    /// 2-D convolution of an `(H, W, Cin)` map with a `(k, k, Cin, Cout)`
    /// kernel, zero padding, no bias.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (value, cols, geom) = {
            let (vx, vw) = (self.value(x), self.value(w));
            let xs = vx.shape();
            let ws = vw.shape();
            assert_eq!(xs.len(), 3, "conv2d input must be (H, W, C), got {xs:?}");
            assert!(ws.len() == 4 && ws[0] == ws[1] && ws[2] == xs[2], "conv2d kernel {ws:?} vs input {xs:?}");
            let (h, wd, cin) = (xs[0], xs[1], xs[2]);
            let (k, cout) = (ws[0], ws[3]);
            let ho = (h + 2 * pad - k) / stride + 1;
            let wo = (wd + 2 * pad - k) / stride + 1;
            let geom = ConvGeom { h, w: wd, cin, k, stride, pad, ho, wo };
            let cols = im2col(vx.data(), &geom);
            let kk = k * k * cin;
            let mut out = vec![0.0; ho * wo * cout];
            gemm(ho * wo, kk, cout, cols.data(), false, vw.data(), false, &mut out, 0.0);
            (Tensor::new([ho, wo, cout], out), cols, geom)
        };
        let rg = self.rg(&[x, w]);
        self.push(value, Op::Conv2d { x, w, cols, geom }, rg)
    }

    /// Nearest-neighbour 2× upsampling of an `(H, W, C)` map.
    pub fn upsample2x(&self, x: Var) -> Var {
        let value = {
            let vx = self.value(x);
            let s = vx.shape();
            let (h, w, c) = (s[0], s[1], s[2]);
            let mut out = vec![0.0; 4 * h * w * c];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let src = ((y / 2) * w + xx / 2) * c;
                    let dst = (y * 2 * w + xx) * c;
                    out[dst..dst + c].copy_from_slice(&vx.data()[src..src + c]);
                }
            }
            Tensor::new([2 * h, 2 * w, c], out)
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::Upsample2x(x), rg)
    }

    /// Mean feature over each rectangle of an `(H, W, C)` map → `(R, C)`.
    pub fn region_mean(&self, x: Var, regions: &[Region]) -> Var {
        let value = {
            let vx = self.value(x);
            let s = vx.shape();
            let (h, w, c) = (s[0], s[1], s[2]);
            let mut out = vec![0.0; regions.len() * c];
            for (r, &(y0, y1, x0, x1)) in regions.iter().enumerate() {
                assert!(y0 < y1 && y1 <= h && x0 < x1 && x1 <= w, "empty or out-of-range region {:?}", (y0, y1, x0, x1));
                let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
                let o = &mut out[r * c..(r + 1) * c];
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let src = &vx.data()[(y * w + xx) * c..(y * w + xx + 1) * c];
                        for (a, b) in o.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                for a in o.iter_mut() {
                    *a *= inv;
                }
            }
            Tensor::new([regions.len(), c], out)
        };
        let rg = self.rg(&[x]);
        self.push(value, Op::RegionMean { x, regions: regions.to_vec() }, rg)
    }

    /// Per-row vector-matrix product: `out[r, :] = a[r, :] · reshape(m[r, :], (C, d))`.
    pub fn row_vec_mat(&self, a: Var, m: Var, d: usize) -> Var {
        let value = {
            let (va, vm) = (self.value(a), self.value(m));
            let (rows, c) = (va.rows(), va.cols());
            assert_eq!(vm.rows(), rows);
            assert_eq!(vm.cols(), c * d, "row_vec_mat: generated filter has wrong size");
            let mut out = vec![0.0; rows * d];
            for r in 0..rows {
                let ar = va.row(r);
                let mr = vm.row(r);
                let o = &mut out[r * d..(r + 1) * d];
                for (ci, &av) in ar.iter().enumerate() {
                    for (j, ov) in o.iter_mut().enumerate() {
                        *ov += av * mr[ci * d + j];
                    }
                }
            }
            Tensor::new([rows, d], out)
        };
        let rg = self.rg(&[a, m]);
        self.push(value, Op::RowVecMat { a, m, d }, rg)
    }

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn im2col(x: &[f64], g: &ConvGeom) -> Tensor {
    let kk = g.k * g.k * g.cin;
    let mut cols = vec![0.0; g.ho * g.wo * kk];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * kk..(oy * g.wo + ox + 1) * kk];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.k + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    Tensor::new([g.ho * g.wo, kk], cols)
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kk = g.k * g.k * g.cin;
    let mut x = vec![0.0; g.h * g.w * g.cin];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * kk..(oy * g.wo + ox + 1) * kk];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * g.k + kx) * g.cin;
                    for c in 0..g.cin {
                        x[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
    x
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Row-wise normalization backward shared by layer and group norm:
/// `dx = inv_std * (g - mean(g) - xhat * mean(g * xhat))` over each group.
fn norm_backward(g: &[f64], xhat: &[f64], inv_std: f64, idx: &[usize]) -> Vec<f64> {
    let n = idx.len() as f64;
    let mg = idx.iter().map(|&i| g[i]).sum::<f64>() / n;
    let mgx = idx.iter().map(|&i| g[i] * xhat[i]).sum::<f64>() / n;
    idx.iter().map(|&i| inv_std * (g[i] - mg - xhat[i] * mgx)).collect()
}

fn backprop_node(nodes: &[Node], i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |v: Var| &nodes[v.0].value;
    let out = &nodes[i].value;
    let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| accumulate(nodes, grads, v, t);
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, *a, g.clone());
            acc(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            acc(grads, *a, g.clone());
            acc(grads, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            acc(grads, *a, zip_map(g, val(*b), |x, y| x * y));
            acc(grads, *b, zip_map(g, val(*a), |x, y| x * y));
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc(grads, *a, zip_map(g, vb, |x, y| x / y));
            let gb = Tensor::new(
                vb.shape().to_vec(),
                g.data().iter().zip(va.data()).zip(vb.data()).map(|((&gg, &x), &y)| -gg * x / (y * y)).collect(),
            );
            acc(grads, *b, gb);
        }
        Op::Minimum(a, b) | Op::Maximum(a, b) => {
            let is_min = matches!(nodes[i].op, Op::Minimum(..));
            let (va, vb) = (val(*a), val(*b));
            let pick_a: Vec<bool> = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| if is_min { x <= y } else { x >= y })
                .collect();
            let ga = Tensor::new(g.shape().to_vec(), g.data().iter().zip(&pick_a).map(|(&x, &p)| if p { x } else { 0.0 }).collect());
            let gb = Tensor::new(g.shape().to_vec(), g.data().iter().zip(&pick_a).map(|(&x, &p)| if p { 0.0 } else { x }).collect());
            acc(grads, *a, ga);
            acc(grads, *b, gb);
        }
        Op::AddRow(x, b) => {
            acc(grads, *x, g.clone());
            let c = g.cols();
            let mut gb = vec![0.0; c];
            for (k, &v) in g.data().iter().enumerate() {
                gb[k % c] += v;
            }
            acc(grads, *b, Tensor::new(val(*b).shape().to_vec(), gb));
        }
        Op::MulRow(x, v) => {
            let (vx, vv) = (val(*x), val(*v));
            let c = g.cols();
            let gx = g.data().iter().enumerate().map(|(k, &gg)| gg * vv.data()[k % c]).collect();
            acc(grads, *x, Tensor::new(g.shape().to_vec(), gx));
            let mut gv = vec![0.0; c];
            for (k, (&gg, &xx)) in g.data().iter().zip(vx.data()).enumerate() {
                gv[k % c] += gg * xx;
            }
            acc(grads, *v, Tensor::new(vv.shape().to_vec(), gv));
        }
        Op::MulScalar(x, s) => {
            let sv = val(*s).item();
            acc(grads, *x, g.map(|gg| gg * sv));
            let gs: f64 = g.data().iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
            acc(grads, *s, Tensor::new(val(*s).shape().to_vec(), vec![gs]));
        }
        Op::Scale(x, c) => acc(grads, *x, g.map(|gg| gg * c)),
        Op::AddScalar(x) => acc(grads, *x, g.clone()),
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.rows(), va.cols(), vb.cols());
            if nodes[a.0].requires_grad {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, vb.data(), true, &mut ga, 0.0);
                acc(grads, *a, Tensor::new(va.shape().to_vec(), ga));
            }
            if nodes[b.0].requires_grad {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, va.data(), true, g.data(), false, &mut gb, 0.0);
                acc(grads, *b, Tensor::new(vb.shape().to_vec(), gb));
            }
        }
        Op::Transpose(x) => acc(grads, *x, g.transpose2().reshape(val(*x).shape().to_vec())),
        Op::Relu(x) => acc(grads, *x, zip_map(g, val(*x), |gg, xx| if xx > 0.0 { gg } else { 0.0 })),
        Op::Gelu(x) => acc(grads, *x, zip_map(g, val(*x), |gg, xx| gg * gelu_grad(xx))),
        Op::Sigmoid(x) => acc(grads, *x, zip_map(g, out, |gg, y| gg * y * (1.0 - y))),
        Op::Exp(x) => acc(grads, *x, zip_map(g, out, |gg, y| gg * y)),
        Op::Log(x) => acc(grads, *x, zip_map(g, val(*x), |gg, xx| gg / xx)),
        Op::Abs(x) => acc(grads, *x, zip_map(g, val(*x), |gg, xx| if xx > 0.0 { gg } else if xx < 0.0 { -gg } else { 0.0 })),
        Op::Softmax(x) => {
            let c = out.cols();
            let mut gx = vec![0.0; out.numel()];
            for r in 0..out.rows() {
                let y = out.row(r);
                let gr = g.row(r);
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    gx[r * c + j] = y[j] * (gr[j] - dot);
                }
            }
            acc(grads, *x, Tensor::new(out.shape().to_vec(), gx));
        }
        Op::LogSoftmax(x) => {
            let c = out.cols();
            let mut gx = vec![0.0; out.numel()];
            for r in 0..out.rows() {
                let y = out.row(r);
                let gr = g.row(r);
                let s: f64 = gr.iter().sum();
                for j in 0..c {
                    gx[r * c + j] = gr[j] - y[j].exp() * s;
                }
            }
            acc(grads, *x, Tensor::new(out.shape().to_vec(), gx));
        }
        Op::LayerNorm { x, xhat, inv_std } => {
            let c = xhat.cols();
            let mut gx = vec![0.0; xhat.numel()];
            for (r, &is) in inv_std.iter().enumerate() {
                let idx: Vec<usize> = (r * c..(r + 1) * c).collect();
                let d = norm_backward(g.data(), xhat.data(), is, &idx);
                gx[r * c..(r + 1) * c].copy_from_slice(&d);
            }
            acc(grads, *x, Tensor::new(xhat.shape().to_vec(), gx));
        }
        Op::GroupNorm { x, groups, xhat, inv_std } => {
            let c = xhat.cols();
            let cg = c / groups;
            let pixels = xhat.rows();
            let mut gx = vec![0.0; xhat.numel()];
            for (gi, &is) in inv_std.iter().enumerate() {
                let idx: Vec<usize> =
                    (0..pixels).flat_map(|p| (gi * cg..(gi + 1) * cg).map(move |ch| p * c + ch)).collect();
                let d = norm_backward(g.data(), xhat.data(), is, &idx);
                for (k, &j) in idx.iter().enumerate() {
                    gx[j] = d[k];
                }
            }
            acc(grads, *x, Tensor::new(xhat.shape().to_vec(), gx));
        }
        Op::L2NormRows { x, norms } => {
            let c = out.cols();
            let mut gx = vec![0.0; out.numel()];
            for (r, &n) in norms.iter().enumerate() {
                let y = out.row(r);
                let gr = g.row(r);
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    gx[r * c + j] = (gr[j] - y[j] * dot) / n;
                }
            }
            acc(grads, *x, Tensor::new(out.shape().to_vec(), gx));
        }
        Op::Sum(x) => acc(grads, *x, Tensor::full(val(*x).shape().to_vec(), g.item())),
        Op::Mean(x) => {
            let n = val(*x).numel() as f64;
            acc(grads, *x, Tensor::full(val(*x).shape().to_vec(), g.item() / n));
        }
        Op::SumLast(x) => {
            let vx = val(*x);
            let c = vx.cols();
            let gx = (0..vx.numel()).map(|k| g.data()[k / c]).collect();
            acc(grads, *x, Tensor::new(vx.shape().to_vec(), gx));
        }
        Op::Reshape(x) => acc(grads, *x, g.clone().reshape(val(*x).shape().to_vec())),
        Op::ConcatLast(xs) => {
            let total = g.cols();
            let mut offset = 0;
            for &v in xs {
                let vv = val(v);
                let c = vv.cols();
                if nodes[v.0].requires_grad {
                    let mut gv = Vec::with_capacity(vv.numel());
                    for r in 0..g.rows() {
                        gv.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                    }
                    acc(grads, v, Tensor::new(vv.shape().to_vec(), gv));
                }
                offset += c;
            }
        }
        Op::ConcatRows(xs) => {
            let mut offset = 0;
            for &v in xs {
                let vv = val(v);
                let n = vv.numel();
                acc(grads, v, Tensor::new(vv.shape().to_vec(), g.data()[offset..offset + n].to_vec()));
                offset += n;
            }
        }
        Op::SliceLast { x, start } => {
            let vx = val(*x);
            let c = vx.cols();
            let len = g.cols();
            let mut gx = vec![0.0; vx.numel()];
            for r in 0..vx.rows() {
                gx[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
            }
            acc(grads, *x, Tensor::new(vx.shape().to_vec(), gx));
        }
        Op::SliceRows { x, start } => {
            let vx = val(*x);
            let c = vx.cols();
            let mut gx = vec![0.0; vx.numel()];
            gx[start * c..start * c + g.numel()].copy_from_slice(g.data());
            acc(grads, *x, Tensor::new(vx.shape().to_vec(), gx));
        }
        Op::GatherRows { x, idx } => {
            let vx = val(*x);
            let c = vx.cols();
            let mut gx = vec![0.0; vx.numel()];
            for (k, &r) in idx.iter().enumerate() {
                for j in 0..c {
                    gx[r * c + j] += g.data()[k * c + j];
                }
            }
            acc(grads, *x, Tensor::new(vx.shape().to_vec(), gx));
        }
        Op::Pick { x, idx } => {
            let vx = val(*x);
            let c = vx.cols();
            let mut gx = vec![0.0; vx.numel()];
            for (r, &j) in idx.iter().enumerate() {
                gx[r * c + j] += g.data()[r];
            }
            acc(grads, *x, Tensor::new(vx.shape().to_vec(), gx));
        }
        Op::Conv2d { x, w, cols, geom } => {
            let vw = val(*w);
            let cout = vw.shape()[3];
            let kk = geom.k * geom.k * geom.cin;
            let npix = geom.ho * geom.wo;
            if nodes[w.0].requires_grad {
                let mut gw = vec![0.0; kk * cout];
                gemm(kk, npix, cout, cols.data(), true, g.data(), false, &mut gw, 0.0);
                acc(grads, *w, Tensor::new(vw.shape().to_vec(), gw));
            }
            if nodes[x.0].requires_grad {
                let mut gcols = vec![0.0; npix * kk];
                gemm(npix, cout, kk, g.data(), false, vw.data(), true, &mut gcols, 0.0);
                let gx = col2im(&gcols, geom);
                acc(grads, *x, Tensor::new([geom.h, geom.w, geom.cin], gx));
            }
        }
        Op::Upsample2x(x) => {
            let vx = val(*x);
            let s = vx.shape();
            let (h, w, c) = (s[0], s[1], s[2]);
            let mut gx = vec![0.0; vx.numel()];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let dst = ((y / 2) * w + xx / 2) * c;
                    let src = (y * 2 * w + xx) * c;
                    for ch in 0..c {
                        gx[dst + ch] += g.data()[src + ch];
                    }
                }
            }
            acc(grads, *x, Tensor::new(s.to_vec(), gx));
        }
        Op::RegionMean { x, regions } => {
            let vx = val(*x);
            let s = vx.shape();
            let (w, c) = (s[1], s[2]);
            let mut gx = vec![0.0; vx.numel()];
            for (r, &(y0, y1, x0, x1)) in regions.iter().enumerate() {
                let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
                let gr = g.row(r);
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let dst = &mut gx[(y * w + xx) * c..(y * w + xx + 1) * c];
                        for (a, b) in dst.iter_mut().zip(gr) {
                            *a += b * inv;
                        }
                    }
                }
            }
            acc(grads, *x, Tensor::new(s.to_vec(), gx));
        }
        Op::RowVecMat { a, m, d } => {
            let (va, vm) = (val(*a), val(*m));
            let (rows, c) = (va.rows(), va.cols());
            let mut ga = vec![0.0; va.numel()];
            let mut gm = vec![0.0; vm.numel()];
            for r in 0..rows {
                let gr = g.row(r);
                let ar = va.row(r);
                let mr = vm.row(r);
                for ci in 0..c {
                    let mut s = 0.0;
                    for j in 0..*d {
                        s += gr[j] * mr[ci * d + j];
                        gm[r * c * d + ci * d + j] = ar[ci] * gr[j];
                    }
                    ga[r * c + ci] = s;
                }
            }
            acc(grads, *a, Tensor::new(va.shape().to_vec(), ga));
            acc(grads, *m, Tensor::new(vm.shape().to_vec(), gm));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `f` w.r.t. every entry of every input.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&Tape, &[Var]) -> Var) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.backward(out);
        let eps = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let g = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
            for j in 0..t.numel() {
                let eval = |delta: f64| {
                    let tape = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(kk, tt)| {
                            let mut tt = tt.clone();
                            if kk == k {
                                tt.data_mut()[j] += delta;
                            }
                            tape.constant(tt)
                        })
                        .collect();
                    let o = f(&tape, &vs);
                    tape.item(o)
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let an = g.data()[j];
                let err = (fd - an).abs() / (1e-6 + fd.abs().max(an.abs()));
                assert!(err < 1e-5 || (fd - an).abs() < 1e-8, "input {k}[{j}]: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]).map(|x| x + 3.0);
        check(vec![a.clone(), b.clone()], |t, v| {
            let x = t.mul(v[0], v[1]);
            let y = t.div(x, v[1]);
            let z = t.add(t.sub(y, v[0]), t.div(v[0], v[1]));
            let w = t.add(t.gelu(z), t.sigmoid(t.exp(v[0])));
            let m = t.add(t.minimum(v[0], w), t.maximum(v[0], t.abs(w)));
            t.sum(t.add(m, t.log(v[1])))
        });
    }

    #[test]
    fn reductions_and_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[4, 6]);
        let w = rand_tensor(&mut rng, &[4, 6]);
        check(vec![a, w], |t, v| {
            let s = t.softmax(v[0]);
            let l = t.log_softmax(v[0]);
            let n = t.layer_norm(v[0], 1e-5);
            let u = t.l2_normalize_rows(v[0]);
            let r = t.add(t.add(s, l), t.add(n, u));
            t.sum(t.mul(r, v[1]))
        });
    }

    #[test]
    fn matmul_rows_and_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 5]);
        let bias = rand_tensor(&mut rng, &[5]);
        let s = rand_tensor(&mut rng, &[1]);
        check(vec![a, b, bias, s], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let m = t.add_row(m, v[2]);
            let m = t.mul_row(m, v[2]);
            let m = t.mul_scalar(m, v[3]);
            let tr = t.transpose(m);
            let left = t.slice_last(m, 1, 3);
            let top = t.slice_rows(tr, 2, 2);
            let cat = t.concat_last(&[left, m]);
            let rows = t.concat_rows(&[top, t.gather_rows(tr, &[0, 4, 4])]);
            let p = t.pick(cat, &[0, 3, 7]);
            let sl = t.sum_last(rows);
            let q = t.add(t.sum(p), t.sum(t.scale(sl, 0.3)));
            t.add_scalar(q, 2.0)
        });
    }

    #[test]
    fn conv_and_spatial_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[6, 6, 3]);
        let w = rand_tensor(&mut rng, &[3, 3, 3, 4]);
        let w1 = rand_tensor(&mut rng, &[1, 1, 4, 4]);
        let probe = rand_tensor(&mut rng, &[6, 6, 4]);
        check(vec![x, w, w1, probe], |t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1);
            let y = t.group_norm(y, 2, 1e-5);
            let y = t.relu(y);
            let up = t.upsample2x(t.conv2d(y, v[2], 1, 0));
            let full = t.conv2d(v[0], v[1], 1, 1);
            let pooled = t.region_mean(full, &[(0, 2, 1, 4), (3, 6, 0, 6)]);
            let m = t.reshape(t.concat_last(&[pooled, pooled]), &[2, 8]);
            let d = t.row_vec_mat(t.slice_last(m, 0, 4), m, 2);
            t.add(t.sum(t.mul(up, v[3])), t.sum(d))
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::full([2], 3.0));
        let p = tape.param(Tensor::full([2], 2.0));
        let loss = tape.sum(tape.mul(c, p));
        let grads = tape.backward(loss);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[3.0, 3.0]);
    }
}
