//! Tape-based reverse-mode differentiation over a closed set of ops:
//! `conv2d`, `relu`, `add`, `upsample_bilinear`, `downsample_stride`, `mse`.

use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        /// im2col matrix kept for the weight gradient; empty without grad.
        cols: Vec<S>,
    },
    Relu(Var),
    Add(Var, Var),
    Upsample {
        input: Var,
        factor: usize,
    },
    Downsample {
        input: Var,
        factor: usize,
    },
    Mse {
        pred: Var,
        target: Tensor<S>,
        /// One flag per `(n, c)` plane; `None` means every plane counts.
        planes: Option<Vec<bool>>,
        /// d loss / d (pred - target) per counted element, without the 2(p-t).
        coef: f64,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// A recorded computation. Nodes are immutable once pushed.
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    requires_grad: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            requires_grad: true,
        }
    }

    /// A graph that records values only; `backward` is rejected.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            requires_grad: false,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input.
    pub fn input(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push(value, Op::Leaf, "input")
    }

    /// Records the current value of a parameter.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Result<Var> {
        let value = store.get(id).value.clone();
        self.push(value, Op::Param(id), "param")
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let geom = ConvGeom::new(x.shape(), w.shape(), b.shape(), stride, padding)?;
        let cols = im2col(x.data(), &geom);
        let out = conv_forward(&cols, w.data(), b.data(), &geom)?;
        let cols = if self.requires_grad { cols } else { Vec::new() };
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
                cols,
            },
            "conv2d",
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|v| if v > S::ZERO { v } else { S::ZERO });
        self.push(out, Op::Relu(input), "relu")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push(out, Op::Add(a, b), "add")
    }

    /// Bilinear upsampling by an integer factor (half-pixel centers, edge clamp).
    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::shape("upsample_bilinear", "factor must be >= 1"));
        }
        let x = self.value(input);
        let [n, c, h, w] = x.dims4()?;
        let (oh, ow) = (h * factor, w * factor);
        let ys = bilinear_taps(h, factor);
        let xs = bilinear_taps(w, factor);
        let mut out = vec![S::ZERO; n * c * oh * ow];
        let src = x.data();
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let fy = S::from_f64(fy);
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let fx = S::from_f64(fx);
                    let top = s[y0 * w + x0] * (S::ONE - fx) + s[y0 * w + x1] * fx;
                    let bot = s[y1 * w + x0] * (S::ONE - fx) + s[y1 * w + x1] * fx;
                    d[oy * ow + ox] = top * (S::ONE - fy) + bot * fy;
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        self.push(out, Op::Upsample { input, factor }, "upsample_bilinear")
    }

    /// Non-overlapping `factor×factor` mean pooling with stride `factor`.
    pub fn downsample_stride(&mut self, input: Var, factor: usize) -> Result<Var> {
        let out = downsample_mean(self.value(input), factor)?;
        self.push(out, Op::Downsample { input, factor }, "downsample_stride")
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<S>) -> Result<Var> {
        self.mse_masked(pred, target, None, 1.0)
    }

    /// Mean squared error over the `(n, c)` planes whose flag is set, times
    /// `scale`. With every plane masked out the loss is exactly 0.
    pub fn mse_masked(
        &mut self,
        pred: Var,
        target: &Tensor<S>,
        planes: Option<&[bool]>,
        scale: f64,
    ) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape(
                "mse",
                format!("pred {:?} vs target {:?}", p.shape(), target.shape()),
            ));
        }
        let plane_len = plane_len(p.shape());
        let n_planes = p.numel() / plane_len;
        if let Some(m) = planes {
            if m.len() != n_planes {
                return Err(Error::shape(
                    "mse",
                    format!("mask has {} planes, tensor has {n_planes}", m.len()),
                ));
            }
        }
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for plane in 0..n_planes {
            if planes.is_some_and(|m| !m[plane]) {
                continue;
            }
            let range = plane * plane_len..(plane + 1) * plane_len;
            for (a, b) in p.data()[range.clone()].iter().zip(&target.data()[range]) {
                let d = a.to_f64() - b.to_f64();
                sum += d * d;
            }
            count += plane_len;
        }
        let (value, coef) = if count == 0 {
            (0.0, 0.0)
        } else {
            (scale * sum / count as f64, scale / count as f64)
        };
        let out = Tensor::scalar(S::from_f64(value));
        self.push(
            out,
            Op::Mse {
                pred,
                target: target.clone(),
                planes: planes.map(<[bool]>::to_vec),
                coef,
            },
            "mse",
        )
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if !self.requires_grad {
            return Err(Error::Usage("backward on an inference-only graph".into()));
        }
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::ONE]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Relu(x) => {
                    let gx = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&g, &y)| if y > S::ZERO { g } else { S::ZERO })
                        .collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Upsample { input, factor } => {
                    let gx = upsample_backward(&g, self.value(*input).shape(), *factor);
                    accumulate(&mut grads, *input, gx);
                }
                Op::Downsample { input, factor } => {
                    let gx = downsample_backward(&g, self.value(*input).shape(), *factor);
                    accumulate(&mut grads, *input, gx);
                }
                Op::Mse {
                    pred,
                    target,
                    planes,
                    coef,
                } => {
                    let p = self.value(*pred);
                    let pl = plane_len(p.shape());
                    let scale = g[0].to_f64() * 2.0 * coef;
                    let gx = p
                        .data()
                        .iter()
                        .zip(target.data())
                        .enumerate()
                        .map(|(i, (&a, &b))| {
                            if planes.as_ref().is_some_and(|m| !m[i / pl]) {
                                S::ZERO
                            } else {
                                S::from_f64(scale * (a.to_f64() - b.to_f64()))
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *pred, gx);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                    cols,
                } => {
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    let geom = ConvGeom::new(
                        x.shape(),
                        w.shape(),
                        self.value(*bias).shape(),
                        *stride,
                        *padding,
                    )?;
                    let (gx, gw, gb) = conv_backward(&g, cols, w.data(), &geom);
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *weight, gw);
                    accumulate(&mut grads, *input, gx);
                }
            }
            grads[idx] = Some(g);
        }

        let mut per_node = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            per_node.push(match g {
                Some(g) => Some(Tensor::new(node.value.shape(), g)?),
                None => None,
            });
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { per_node, params })
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, g: Vec<S>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<S> {
    per_node: Vec<Option<Tensor<S>>>,
    params: Vec<(ParamId, Var)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.per_node.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<S>) {
        for &(id, var) in &self.params {
            if let Some(g) = self.wrt(var) {
                store.accumulate_grad(id, g.data());
            }
        }
    }
}

fn plane_len(shape: &[usize]) -> usize {
    if shape.len() >= 3 {
        shape[2..].iter().product()
    } else {
        shape.iter().product()
    }
}

/// Per output index along one axis: (low tap, high tap, weight of high tap).
fn bilinear_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn upsample_backward<S: Scalar>(g: &[S], in_shape: &[usize], factor: usize) -> Vec<S> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let ys = bilinear_taps(h, factor);
    let xs = bilinear_taps(w, factor);
    let mut gx = vec![S::ZERO; n * c * h * w];
    for plane in 0..n * c {
        let gi = &g[plane * oh * ow..(plane + 1) * oh * ow];
        let d = &mut gx[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = S::from_f64(fy);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = S::from_f64(fx);
                let v = gi[oy * ow + ox];
                let top = v * (S::ONE - fy);
                let bot = v * fy;
                d[y0 * w + x0] += top * (S::ONE - fx);
                d[y0 * w + x1] += top * fx;
                d[y1 * w + x0] += bot * (S::ONE - fx);
                d[y1 * w + x1] += bot * fx;
            }
        }
    }
    gx
}

pub(crate) fn downsample_mean<S: Scalar>(x: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    let [n, c, h, w] = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "downsample_stride",
            format!("factor {factor} does not divide {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for dy in 0..factor {
                    let row = &s[(oy * factor + dy) * w + ox * factor..][..factor];
                    acc += row.iter().map(|v| v.to_f64()).sum::<f64>();
                }
                out.push(S::from_f64(acc * norm));
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

fn downsample_backward<S: Scalar>(g: &[S], in_shape: &[usize], factor: usize) -> Vec<S> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / factor, w / factor);
    let norm = S::from_f64(1.0 / (factor * factor) as f64);
    let mut gx = vec![S::ZERO; n * c * h * w];
    for plane in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                gx[plane * h * w + y * w + x] =
                    g[plane * oh * ow + (y / factor) * ow + x / factor] * norm;
            }
        }
    }
    gx
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    /// Output size per axis: `(in + 2·padding − kernel) / stride + 1`.
    fn new(
        x: &[usize],
        w: &[usize],
        b: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (&[n, c, h, wd], &[out_c, wc, kh, kw]) = (x, w) else {
            return Err(Error::shape(
                "conv2d",
                format!("input {x:?} and weight {w:?} must both be rank 4"),
            ));
        };
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, weight expects {wc}"),
            ));
        }
        if b.iter().product::<usize>() != out_c {
            return Err(Error::shape(
                "conv2d",
                format!("bias {b:?} does not match {out_c} output channels"),
            ));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd}+{pad}"),
            ));
        }
        Ok(Self {
            n,
            c,
            h,
            w: wd,
            out_c,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn spatial(&self) -> usize {
        self.oh * self.ow
    }

    fn cols(&self) -> usize {
        self.n * self.spatial()
    }
}

/// Lays out receptive fields as a `(C·kh·kw) × (N·oh·ow)` matrix.
fn im2col<S: Scalar>(x: &[S], g: &ConvGeom) -> Vec<S> {
    let ncols = g.cols();
    let mut cols = vec![S::ZERO; g.rows() * ncols];
    for ch in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + ch) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        let out = &mut dst[n * g.spatial() + oy * g.ow..][..g.ow];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom) -> Vec<S> {
    let ncols = g.cols();
    let mut x = vec![S::ZERO; g.n * g.c * g.h * g.w];
    for ch in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let plane = &mut x[(n * g.c + ch) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.w..][..g.w];
                        let s = &src[n * g.spatial() + oy * g.ow..][..g.ow];
                        for (ox, &v) in s.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_forward<S: Scalar>(cols: &[S], w: &[S], b: &[S], g: &ConvGeom) -> Result<Tensor<S>> {
    let ncols = g.cols();
    let mut mat = vec![S::ZERO; g.out_c * ncols];
    S::gemm(g.out_c, g.rows(), ncols, w, false, cols, false, S::ZERO, &mut mat);
    let sp = g.spatial();
    let mut out = vec![S::ZERO; g.n * g.out_c * sp];
    for o in 0..g.out_c {
        for n in 0..g.n {
            let src = &mat[o * ncols + n * sp..][..sp];
            let dst = &mut out[(n * g.out_c + o) * sp..][..sp];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b[o];
            }
        }
    }
    Tensor::new(&[g.n, g.out_c, g.oh, g.ow], out)
}

fn conv_backward<S: Scalar>(
    gout: &[S],
    cols: &[S],
    w: &[S],
    g: &ConvGeom,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let ncols = g.cols();
    let sp = g.spatial();
    // N×O×sp gradient rearranged to O×(N·sp)
    let mut dmat = vec![S::ZERO; g.out_c * ncols];
    let mut gb = Vec::with_capacity(g.out_c);
    for o in 0..g.out_c {
        let mut acc = 0.0f64;
        for n in 0..g.n {
            let src = &gout[(n * g.out_c + o) * sp..][..sp];
            dmat[o * ncols + n * sp..][..sp].copy_from_slice(src);
            acc += src.iter().map(|v| v.to_f64()).sum::<f64>();
        }
        gb.push(S::from_f64(acc));
    }
    let rows = g.rows();
    let mut gw = vec![S::ZERO; g.out_c * rows];
    S::gemm(g.out_c, ncols, rows, &dmat, false, cols, true, S::ZERO, &mut gw);
    let mut dcols = vec![S::ZERO; rows * ncols];
    S::gemm(rows, g.out_c, ncols, w, true, &dmat, false, S::ZERO, &mut dcols);
    (col2im(&dcols, g), gw, gb)
}
