//! A small reverse-mode tape over `f64` ndarrays.
//!
//! Every operation records its output value and enough cached state to
//! run the backward pass. Activations use NCHW layout throughout. Leaves
//! created with [`Tape::constant`] never receive gradients, and nodes whose
//! inputs are all constants are skipped during backpropagation, so frozen
//! networks (the critic during a generator update, the feature extractor)
//! only pay for input gradients.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix4, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    AddConst(Var),
    MulConst(Var, ArrayD<f64>),
    Scale(Var, f64),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeometry,
        cols: Array2<f64>,
    },
    InstanceNorm {
        x: Var,
        inv_std: Array2<f64>,
    },
    LeakyRelu(Var, f64),
    Tanh(Var),
    Upsample2x(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ConcatChannels(Var, Var),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needs one.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const IN_EPS: f64 = 1e-5;

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

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: ArrayD<f64>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Scalar value of a zero-dimensional or single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "node is not a scalar");
        *val.iter().next().unwrap()
    }

    fn push_raw(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_raw(value, op, needs_grad)
    }

    fn value4(&self, v: Var) -> ndarray::ArrayView4<'_, f64> {
        self.value(v)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("expected a 4-d NCHW tensor")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    /// Adds a constant that broadcasts to `a`'s shape.
    pub fn add_const(&mut self, a: Var, c: &ArrayD<f64>) -> Var {
        let value = {
            let av = self.value(a);
            let cb = c
                .broadcast(av.raw_dim())
                .expect("add_const: constant does not broadcast");
            av + &cb
        };
        self.push(value, Op::AddConst(a), &[a])
    }

    /// Elementwise product with a constant that broadcasts to `a`'s shape.
    pub fn mul_const(&mut self, a: Var, c: ArrayD<f64>) -> Var {
        let value = {
            let av = self.value(a);
            let cb = c
                .broadcast(av.raw_dim())
                .expect("mul_const: constant does not broadcast");
            av * &cb
        };
        self.push(value, Op::MulConst(a, c), &[a])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        self.push(value, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a), &[a])
    }

    /// Sum of all elements, as a zero-dimensional node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// 2-d convolution. `x`: (N, C, H, W); `w`: (O, C, K, K); `b`: (O).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: Conv2dGeometry) -> Var {
        let xv = self.value4(x);
        let wv = self.value4(w);
        let (n, c, h, wd) = xv.dim();
        let (o, wc, k, k2) = wv.dim();
        assert_eq!(c, wc, "conv2d: channel mismatch");
        assert_eq!(k, k2, "conv2d: kernel must be square");
        let ho = (h + 2 * geom.padding - k) / geom.stride + 1;
        let wo = (wd + 2 * geom.padding - k) / geom.stride + 1;
        let cols = im2col(&xv, k, geom, ho, wo);
        let w2 = wv
            .to_shape((o, c * k * k))
            .expect("contiguous weights")
            .to_owned();
        let out2 = w2.dot(&cols);
        let bias = b.map(|bv| self.value(bv).iter().copied().collect::<Vec<_>>());
        let mut out = Array4::<f64>::zeros((n, o, ho, wo));
        let plane = ho * wo;
        {
            let dst = out.as_slice_mut().unwrap();
            let src = out2.as_slice().unwrap();
            let cols_total = n * plane;
            for oc in 0..o {
                let bias_v = bias.as_ref().map_or(0.0, |bs| bs[oc]);
                let row = &src[oc * cols_total..(oc + 1) * cols_total];
                for ni in 0..n {
                    let d = &mut dst[(ni * o + oc) * plane..(ni * o + oc + 1) * plane];
                    let s = &row[ni * plane..(ni + 1) * plane];
                    for (dv, sv) in d.iter_mut().zip(s) {
                        *dv = sv + bias_v;
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            &inputs,
        )
    }

    /// Per-sample, per-channel normalization over spatial positions (no affine).
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let xv = self.value4(x);
        let (n, c, h, w) = xv.dim();
        let plane = h * w;
        let mut out = xv.to_owned();
        let mut inv_std = Array2::<f64>::zeros((n, c));
        {
            let data = out.as_slice_mut().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let p = &mut data[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                    let mean = p.iter().sum::<f64>() / plane as f64;
                    let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
                    let is = 1.0 / (var + IN_EPS).sqrt();
                    for v in p.iter_mut() {
                        *v = (*v - mean) * is;
                    }
                    inv_std[[ni, ci]] = is;
                }
            }
        }
        self.push(out.into_dyn(), Op::InstanceNorm { x, inv_std }, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self
            .value(x)
            .mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    /// Nearest-neighbour upsampling by a factor of two.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value4(x);
        let (n, c, h, w) = xv.dim();
        let mut out = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
        for ((ni, ci, i, j), v) in out.indexed_iter_mut() {
            *v = xv[[ni, ci, i / 2, j / 2]];
        }
        self.push(out.into_dyn(), Op::Upsample2x(x), &[x])
    }

    /// 2×2 max pooling with stride 2. Ties resolve to the first element in
    /// row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value4(x);
        let (n, c, h, w) = xv.dim();
        let (ho, wo) = (h / 2, w / 2);
        let src = xv.as_slice().expect("contiguous input");
        let mut out = Array4::<f64>::zeros((n, c, ho, wo));
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        {
            let dst = out.as_slice_mut().unwrap();
            let mut idx = 0;
            for plane in 0..n * c {
                let base = plane * h * w;
                for i in 0..ho {
                    for j in 0..wo {
                        let mut best = base + (2 * i) * w + 2 * j;
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let cand = base + (2 * i + di) * w + 2 * j + dj;
                            if src[cand] > src[best] {
                                best = cand;
                            }
                        }
                        dst[idx] = src[best];
                        argmax.push(best);
                        idx += 1;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::MaxPool2 { x, argmax }, &[x])
    }

    /// (N, C, H, W) → (N, C) spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value4(x);
        let (_, _, h, w) = xv.dim();
        let value = xv
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .mapv(|v| v / (h * w) as f64);
        self.push(value.into_dyn(), Op::GlobalAvgPool(x), &[x])
    }

    /// (N, K) · (K, M) + b → (N, M).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut out = xv.dot(&wv);
        if let Some(bv) = b {
            let bb = self.value(bv).view().into_dimensionality::<ndarray::Ix1>().unwrap();
            out += &bb;
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out.into_dyn(), Op::Linear { x, w, b }, &inputs)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_channels: incompatible shapes");
        self.push(value, Op::ConcatChannels(a, b), &[a, b])
    }

    /// Backpropagates from a single-element `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<f64>>], v: Var, g: ArrayD<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulConst(a, c) => {
                let cb = c.broadcast(g.raw_dim()).unwrap();
                self.accumulate(grads, *a, g * &cb);
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g * *k),
            Op::Abs(a) => {
                let mut out = g.clone();
                out.zip_mut_with(self.value(*a), |gv, &x| *gv *= sign(x));
                self.accumulate(grads, *a, out);
            }
            Op::Square(a) => {
                let mut out = g.clone();
                out.zip_mut_with(self.value(*a), |gv, &x| *gv *= 2.0 * x);
                self.accumulate(grads, *a, out);
            }
            Op::Sum(a) => {
                let gs = *g.iter().next().unwrap();
                let shape = self.value(*a).raw_dim();
                self.accumulate(grads, *a, ArrayD::from_elem(shape, gs));
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => self.conv2d_backward(g, *x, *w, *b, *geom, cols, grads),
            Op::InstanceNorm { x, inv_std } => {
                if !self.needs_grad(*x) {
                    return;
                }
                let y = node.value.view().into_dimensionality::<Ix4>().unwrap();
                let gy = g.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w) = y.dim();
                let plane = h * w;
                let ys = y.as_slice().unwrap();
                let gs = gy.as_standard_layout();
                let gs = gs.as_slice().unwrap();
                let mut dx = vec![0.0; ys.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let r = (ni * c + ci) * plane..(ni * c + ci + 1) * plane;
                        let yp = &ys[r.clone()];
                        let gp = &gs[r.clone()];
                        let mean_g = gp.iter().sum::<f64>() / plane as f64;
                        let mean_gy =
                            gp.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>() / plane as f64;
                        let is = inv_std[[ni, ci]];
                        for ((d, gv), yv) in dx[r].iter_mut().zip(gp).zip(yp) {
                            *d = is * (gv - mean_g - yv * mean_gy);
                        }
                    }
                }
                let dx = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap();
                self.accumulate(grads, *x, dx);
            }
            Op::LeakyRelu(x, slope) => {
                let mut out = g.clone();
                out.zip_mut_with(self.value(*x), |gv, &xv| {
                    if xv <= 0.0 {
                        *gv *= slope;
                    }
                });
                self.accumulate(grads, *x, out);
            }
            Op::Tanh(x) => {
                let mut out = g.clone();
                out.zip_mut_with(&node.value, |gv, &yv| *gv *= 1.0 - yv * yv);
                self.accumulate(grads, *x, out);
            }
            Op::Upsample2x(x) => {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h2, w2) = gv.dim();
                let mut dx = Array4::<f64>::zeros((n, c, h2 / 2, w2 / 2));
                for ((ni, ci, i, j), v) in gv.indexed_iter() {
                    dx[[ni, ci, i / 2, j / 2]] += v;
                }
                self.accumulate(grads, *x, dx.into_dyn());
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = ArrayD::<f64>::zeros(self.value(*x).raw_dim());
                let d = dx.as_slice_mut().unwrap();
                let gs = g.as_standard_layout();
                for (gv, &src) in gs.iter().zip(argmax) {
                    d[src] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape().to_vec();
                let (h, w) = (shape[2], shape[3]);
                let scale = 1.0 / (h * w) as f64;
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut dx = Array4::<f64>::zeros((shape[0], shape[1], h, w));
                for ((ni, ci), gv) in g2.indexed_iter() {
                    dx.slice_mut(ndarray::s![ni, ci, .., ..]).fill(gv * scale);
                }
                self.accumulate(grads, *x, dx.into_dyn());
            }
            Op::Linear { x, w, b } => {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                if self.needs_grad(*x) {
                    let wv = self.value(*w).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    self.accumulate(grads, *x, g2.dot(&wv.t()).into_dyn());
                }
                if self.needs_grad(*w) {
                    let xv = self.value(*x).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    self.accumulate(grads, *w, xv.t().dot(&g2).into_dyn());
                }
                if let Some(bv) = b {
                    if self.needs_grad(*bv) {
                        self.accumulate(grads, *bv, g2.sum_axis(Axis(0)).into_dyn());
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let ca = self.value(*a).shape()[1];
                let ga = g.slice_axis(Axis(1), (..ca).into()).to_owned();
                let gb = g.slice_axis(Axis(1), (ca..).into()).to_owned();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        g: &ArrayD<f64>,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeometry,
        cols: &Array2<f64>,
        grads: &mut [Option<ArrayD<f64>>],
    ) {
        let gv = g.view().into_dimensionality::<Ix4>().unwrap();
        let (n, o, ho, wo) = gv.dim();
        let plane = ho * wo;
        let gstd = gv.as_standard_layout();
        let gs = gstd.as_slice().unwrap();
        // (N, O, Ho, Wo) -> (O, N*Ho*Wo), matching the column order of `cols`.
        let mut g2 = Array2::<f64>::zeros((o, n * plane));
        {
            let d = g2.as_slice_mut().unwrap();
            for ni in 0..n {
                for oc in 0..o {
                    let src = &gs[(ni * o + oc) * plane..(ni * o + oc + 1) * plane];
                    d[oc * n * plane + ni * plane..oc * n * plane + (ni + 1) * plane]
                        .copy_from_slice(src);
                }
            }
        }
        let wshape = self.value(w).shape().to_vec();
        if self.needs_grad(w) {
            let dw = g2.dot(&cols.t());
            let dw = dw.into_shape_with_order(IxDyn(&wshape)).unwrap();
            self.accumulate(grads, w, dw);
        }
        if let Some(bv) = b {
            if self.needs_grad(bv) {
                let db: Array1<f64> = g2.sum_axis(Axis(1));
                self.accumulate(grads, bv, db.into_dyn());
            }
        }
        if self.needs_grad(x) {
            let (c, k) = (wshape[1], wshape[2]);
            let w2 = self
                .value(w)
                .view()
                .into_shape_with_order((o, c * k * k))
                .unwrap();
            let dcols = w2.t().dot(&g2);
            let xshape = self.value(x).shape();
            let dx = col2im(&dcols, (n, c, xshape[2], xshape[3]), k, geom, ho, wo);
            self.accumulate(grads, x, dx.into_dyn());
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Unfolds NCHW input into a (C*K*K, N*Ho*Wo) patch matrix.
fn im2col(
    x: &ndarray::ArrayView4<'_, f64>,
    k: usize,
    geom: Conv2dGeometry,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let xs = x.as_standard_layout();
    let src = xs.as_slice().unwrap();
    let ncols = n * ho * wo;
    let mut cols = Array2::<f64>::zeros((c * k * k, ncols));
    let dst = cols.as_slice_mut().unwrap();
    let pad = geom.padding as isize;
    let stride = geom.stride as isize;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let out = &mut dst[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for oh in 0..ho {
                        let ih = oh as isize * stride + ki as isize - pad;
                        let orow = &mut out[(ni * ho + oh) * wo..(ni * ho + oh + 1) * wo];
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let irow = &src[base + ih as usize * w..base + (ih as usize + 1) * w];
                        for (ow, o) in orow.iter_mut().enumerate() {
                            let iw = ow as isize * stride + kj as isize - pad;
                            if iw >= 0 && iw < w as isize {
                                *o = irow[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back to NCHW.
fn col2im(
    dcols: &Array2<f64>,
    shape: (usize, usize, usize, usize),
    k: usize,
    geom: Conv2dGeometry,
    ho: usize,
    wo: usize,
) -> Array4<f64> {
    let (n, c, h, w) = shape;
    let mut dx = Array4::<f64>::zeros(shape);
    let dst = dx.as_slice_mut().unwrap();
    let dstd = dcols.as_standard_layout();
    let src = dstd.as_slice().unwrap();
    let ncols = n * ho * wo;
    let pad = geom.padding as isize;
    let stride = geom.stride as isize;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let inp = &src[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for oh in 0..ho {
                        let ih = oh as isize * stride + ki as isize - pad;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let irow = &inp[(ni * ho + oh) * wo..(ni * ho + oh + 1) * wo];
                        let drow = &mut dst[base + ih as usize * w..base + (ih as usize + 1) * w];
                        for (ow, v) in irow.iter().enumerate() {
                            let iw = ow as isize * stride + kj as isize - pad;
                            if iw >= 0 && iw < w as isize {
                                drow[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum(f(x) * r))/dx for a random probe `r`.
    fn check_input_grad(
        shape: &[usize],
        f: impl Fn(&mut Tape, Var) -> Var,
        seed: u64,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(shape, &mut rng);
        let probe = {
            let mut t = Tape::new();
            let x = t.constant(x0.clone());
            let y = f(&mut t, x);
            random(t.value(y).shape(), &mut rng)
        };
        let eval = |x: &ArrayD<f64>| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let y = f(&mut t, xv);
            (t.value(y) * &probe).sum()
        };
        let mut t = Tape::new();
        let xv = t.param(x0.clone());
        let y = f(&mut t, xv);
        let yp = t.mul_const(y, probe.clone());
        let s = t.sum(yp);
        let grads = t.backward(s);
        let analytic = grads.get(xv).unwrap().clone();
        let h = 1e-5;
        let mut num = ArrayD::<f64>::zeros(x0.raw_dim());
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            num.as_slice_mut().unwrap()[i] = (eval(&xp) - eval(&xm)) / (2.0 * h);
        }
        let diff = (&analytic - &num).mapv(|v| v * v).sum().sqrt();
        let norm = num.mapv(|v| v * v).sum().sqrt().max(1e-12);
        diff / norm
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 6, 6], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let bv = t.constant(b.clone());
        let geom = Conv2dGeometry { stride: 2, padding: 1 };
        let y = t.conv2d(xv, wv, Some(bv), geom);
        let y = t.value(y).clone();
        assert_eq!(y.shape(), &[2, 4, 3, 3]);
        for n in 0..2 {
            for o in 0..4 {
                for i in 0..3 {
                    for j in 0..3 {
                        let mut acc = b[[o]];
                        for c in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ih = (i * 2 + ki) as isize - 1;
                                    let iw = (j * 2 + kj) as isize - 1;
                                    if ih >= 0 && ih < 6 && iw >= 0 && iw < 6 {
                                        acc += w[[o, c, ki, kj]]
                                            * x[[n, c, ih as usize, iw as usize]];
                                    }
                                }
                            }
                        }
                        assert!((y[[n, o, i, j]] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_input_and_weight_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random(&[3, 2, 4, 4], &mut rng);
        let geom = Conv2dGeometry { stride: 2, padding: 1 };
        let err = check_input_grad(
            &[2, 2, 8, 8],
            |t, x| {
                let wv = t.constant(w.clone());
                t.conv2d(x, wv, None, geom)
            },
            1,
        );
        assert!(err < 1e-8, "input grad rel err {err}");

        let x = random(&[2, 2, 8, 8], &mut rng);
        let err = check_input_grad(
            &[3, 2, 4, 4],
            |t, wv| {
                let xv = t.constant(x.clone());
                t.conv2d(xv, wv, None, geom)
            },
            2,
        );
        assert!(err < 1e-8, "weight grad rel err {err}");
    }

    #[test]
    fn smooth_op_gradients() {
        let err = check_input_grad(&[2, 3, 4, 4], |t, x| t.instance_norm(x), 5);
        assert!(err < 1e-7, "instance norm {err}");
        let err = check_input_grad(&[2, 3, 4, 4], |t, x| t.tanh(x), 6);
        assert!(err < 1e-8, "tanh {err}");
        let err = check_input_grad(&[2, 3, 4, 4], |t, x| t.upsample2x(x), 7);
        assert!(err < 1e-8, "upsample {err}");
        let err = check_input_grad(&[2, 3, 4, 4], |t, x| t.global_avg_pool(x), 8);
        assert!(err < 1e-8, "gap {err}");
        let err = check_input_grad(&[2, 3, 4, 4], |t, x| t.max_pool2(x), 9);
        assert!(err < 1e-6, "maxpool {err}");
        let err = check_input_grad(&[3, 5], |t, x| {
            let w = t.constant(ArrayD::from_shape_fn(IxDyn(&[5, 2]), |i| i[0] as f64 - i[1] as f64));
            t.linear(x, w, None)
        }, 10);
        assert!(err < 1e-8, "linear {err}");
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let b = t.param(ArrayD::from_elem(IxDyn(&[2]), 2.0));
        let c = t.add(a, b);
        let s = t.sum(c);
        let g = t.backward(s);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().as_slice().unwrap(), &[1.0, 1.0]);
    }
}
