use crate::conv::{self, ConvGeom};
use crate::tensor::{Float, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Abs(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<Vec<T>>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    InstanceNorm {
        x: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    AvgPool2(Var),
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
    TileSpatial(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-use tape. Build a computation by calling the op methods, then
/// call [`Graph::backward`] on a scalar node.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn c<T: Float>(v: f64) -> T {
    T::from_f64_lossy(v)
}

fn softplus<T: Float>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "node is not a scalar");
        t.data()[0]
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).zip_map(self.value(b), f);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s: T = c(s);
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s: T = c(s);
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s: T = c(slope);
        self.unary(
            a,
            |x| if x > T::zero() { x } else { x * s },
            Op::LeakyRelu(a, s),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `log(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / c::<T>(t.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// 2-D convolution with zero padding. `x: [N, C, H, W]`, `w: [O, C, k, k]`,
    /// `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, ch, h, wd) = self.value(x).dims4();
        let (o, wc, k, k2) = self.value(w).dims4();
        assert_eq!(wc, ch, "conv2d: weight expects {wc} channels, input has {ch}");
        assert_eq!(k, k2, "conv2d: only square kernels");
        let geom = ConvGeom::new(ch, h, wd, k, stride, pad)
            .unwrap_or_else(|| panic!("conv2d: kernel {k} does not fit {h}x{wd} input"));
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let (out, cols) = conv::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            o,
            b.map(|b| self.value(b).data()),
            rg,
        );
        let value = Tensor::new(vec![n, o, geom.out_height, geom.out_width], out);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        )
    }

    /// Transposed convolution. `x: [N, Cin, H, W]`, `w: [Cin, Cout, k, k]`,
    /// output spatial size `(H - 1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let (wcin, cout, k, k2) = self.value(w).dims4();
        assert_eq!(wcin, cin, "conv_transpose2d: channel mismatch");
        assert_eq!(k, k2, "conv_transpose2d: only square kernels");
        let oh = ((h - 1) * stride + k)
            .checked_sub(2 * pad)
            .expect("conv_transpose2d: padding too large");
        let ow = ((wd - 1) * stride + k)
            .checked_sub(2 * pad)
            .expect("conv_transpose2d: padding too large");
        let geom = ConvGeom::new(cout, oh, ow, k, stride, pad).expect("conv_transpose2d geometry");
        assert_eq!((geom.out_height, geom.out_width), (h, wd));
        let out = conv::conv_transpose2d_forward(
            self.value(x).data(),
            n,
            cin,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, cout, oh, ow], out);
        self.push(value, Op::ConvTranspose2d { x, w, b, geom }, rg)
    }

    /// Per-(item, channel) normalization over spatial positions, no affine.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let (n, ch, h, w) = self.value(x).dims4();
        let plane = h * w;
        let eps: T = c(eps);
        let inv_plane: T = c(1.0 / plane as f64);
        let src = self.value(x).data();
        let mut normalized = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); n * ch];
        for (i, (xs, ys)) in src.chunks(plane).zip(normalized.chunks_mut(plane)).enumerate() {
            let mean = xs.iter().copied().sum::<T>() * inv_plane;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_plane;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for (y, &v) in ys.iter_mut().zip(xs) {
                *y = (v - mean) * is;
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![n, ch, h, w], normalized.clone());
        self.push(
            value,
            Op::InstanceNorm {
                x,
                normalized: if rg { normalized } else { Vec::new() },
                inv_std,
            },
            rg,
        )
    }

    /// 2×2 average pooling with stride 2. Odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, ch, h, w) = self.value(x).dims4();
        let (oh, ow) = (h / 2, w / 2);
        assert!(oh > 0 && ow > 0, "avg_pool2: input {h}x{w} too small");
        let src = self.value(x).data();
        let quarter: T = c(0.25);
        let mut out = vec![T::zero(); n * ch * oh * ow];
        for (p, dst) in out.chunks_mut(oh * ow).enumerate() {
            let s = &src[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * ow + xx] = (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]) * quarter;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, ch, oh, ow], out), Op::AvgPool2(x), rg)
    }

    /// 2×2 max pooling with stride 2. Odd trailing rows/columns are dropped;
    /// ties resolve to the first element in row-major order.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (n, ch, h, w) = self.value(x).dims4();
        let (oh, ow) = (h / 2, w / 2);
        assert!(oh > 0 && ow > 0, "max_pool2: input {h}x{w} too small");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * ch * oh * ow);
        let mut argmax = Vec::with_capacity(n * ch * oh * ow);
        for p in 0..n * ch {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let i = base + 2 * y * w + 2 * xx;
                    let mut best = i;
                    for j in [i + 1, i + w, i + w + 1] {
                        if src[j] > src[best] {
                            best = j;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![n, ch, oh, ow], out),
            Op::MaxPool2 { x, argmax },
            rg,
        )
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, ch, h, w) = self.value(x).dims4();
        let inv: T = c(1.0 / (h * w) as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, ch], out), Op::GlobalAvgPool(x), rg)
    }

    /// Fully connected layer. `x: [N, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, i) = self.value(x).dims2();
        let (o, wi) = self.value(w).dims2();
        assert_eq!(i, wi, "linear: input width {i} vs weight width {wi}");
        let mut out = vec![T::zero(); n * o];
        T::gemm(
            n,
            i,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bias) {
                    *v = *v + bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(vec![n, o], out), Op::Linear { x, w, b }, rg)
    }

    /// Concatenate two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat_channels: shape mismatch");
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            out.extend_from_slice(&da[i * ca * h * w..(i + 1) * ca * h * w]);
            out.extend_from_slice(&db[i * cb * h * w..(i + 1) * cb * h * w]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(vec![n, ca + cb, h, w], out),
            Op::ConcatChannels(a, b),
            rg,
        )
    }

    /// Replicate `[N, D]` over an `h×w` grid, giving `[N, D, h, w]`.
    pub fn tile_spatial(&mut self, z: Var, h: usize, w: usize) -> Var {
        let (n, d) = self.value(z).dims2();
        let mut out = Vec::with_capacity(n * d * h * w);
        for &v in self.value(z).data() {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        let rg = self.rg(z);
        self.push(Tensor::new(vec![n, d, h, w], out), Op::TileSpatial(z), rg)
    }

    /// Columns `start..start + len` of a `[N, D]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, d) = self.value(x).dims2();
        assert!(start + len <= d, "slice_cols out of range");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for row in src.chunks(d) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, len], out), Op::SliceCols { x, start }, rg)
    }

    /// Reverse-mode sweep from a scalar node. Gradients are returned for every
    /// node that requires them.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![T::one()]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * yv)),
            Op::Log(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |gv, xv| gv / xv))
            }
            Op::Square(a) => {
                let two: T = c(2.0);
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(self.value(*a), |gv, xv| gv * two * xv),
                )
            }
            Op::Abs(a) => self.accumulate(
                grads,
                *a,
                g.zip_map(self.value(*a), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Relu(a) => self.accumulate(
                grads,
                *a,
                g.zip_map(self.value(*a), |gv, xv| if xv > T::zero() { gv } else { T::zero() }),
            ),
            Op::LeakyRelu(a, s) => {
                let s = *s;
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(self.value(*a), |gv, xv| if xv > T::zero() { gv } else { gv * s }),
                )
            }
            Op::Tanh(a) => self.accumulate(
                grads,
                *a,
                g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv)),
            ),
            Op::Sigmoid(a) => self.accumulate(
                grads,
                *a,
                g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv)),
            ),
            Op::Softplus(a) => self.accumulate(
                grads,
                *a,
                g.zip_map(self.value(*a), |gv, xv| gv * sigmoid(xv)),
            ),
            Op::Sum(a) => {
                let gv = g.data()[0];
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(shape, gv));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let gv = g.data()[0] / c::<T>(t.len() as f64);
                self.accumulate(grads, *a, Tensor::full(t.shape().to_vec(), gv));
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let n = self.shape(*x)[0];
                let o = self.shape(*w)[0];
                let (dx, dw, db) = conv::conv2d_backward(
                    g.data(),
                    n,
                    geom,
                    self.value(*w).data(),
                    o,
                    cols,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx));
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw));
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::new(vec![o], db));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (n, cin, _, _) = self.value(*x).dims4();
                let (dx, dw, db) = conv::conv_transpose2d_backward(
                    g.data(),
                    self.value(*x).data(),
                    n,
                    cin,
                    geom,
                    self.value(*w).data(),
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx));
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw));
                }
                if let Some(b) = b {
                    let len = db.len();
                    self.accumulate(grads, *b, Tensor::new(vec![len], db));
                }
            }
            Op::InstanceNorm {
                x,
                normalized,
                inv_std,
            } => {
                let (_, _, h, w) = self.value(*x).dims4();
                let plane = h * w;
                let inv_plane: T = c(1.0 / plane as f64);
                let mut dx = vec![T::zero(); g.len()];
                for (i, ((gs, xh), d)) in g
                    .data()
                    .chunks(plane)
                    .zip(normalized.chunks(plane))
                    .zip(dx.chunks_mut(plane))
                    .enumerate()
                {
                    let mean_g = gs.iter().copied().sum::<T>() * inv_plane;
                    let mean_gx = gs.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_plane;
                    for ((dv, &gv), &xv) in d.iter_mut().zip(gs).zip(xh) {
                        *dv = inv_std[i] * (gv - mean_g - xv * mean_gx);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx));
            }
            Op::AvgPool2(x) => {
                let (n, ch, h, w) = self.value(*x).dims4();
                let (oh, ow) = (h / 2, w / 2);
                let quarter: T = c(0.25);
                let mut dx = vec![T::zero(); n * ch * h * w];
                for (p, gs) in g.data().chunks(oh * ow).enumerate() {
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let v = gs[yy * ow + xx] * quarter;
                            let i = 2 * yy * w + 2 * xx;
                            d[i] = v;
                            d[i + 1] = v;
                            d[i + w] = v;
                            d[i + w + 1] = v;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, ch, h, w], dx));
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    dx[i] = dx[i] + gv;
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx));
            }
            Op::GlobalAvgPool(x) => {
                let (n, ch, h, w) = self.value(*x).dims4();
                let inv: T = c(1.0 / (h * w) as f64);
                let mut dx = Vec::with_capacity(n * ch * h * w);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, h * w));
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, ch, h, w], dx));
            }
            Op::Linear { x, w, b } => {
                let (n, i) = self.value(*x).dims2();
                let (o, _) = self.value(*w).dims2();
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * i];
                    T::gemm(n, o, i, g.data(), false, self.value(*w).data(), false, &mut dx, false);
                    self.accumulate(grads, *x, Tensor::new(vec![n, i], dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); o * i];
                    T::gemm(o, n, i, g.data(), true, self.value(*x).data(), false, &mut dw, false);
                    self.accumulate(grads, *w, Tensor::new(vec![o, i], dw));
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); o];
                    for row in g.data().chunks(o) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![o], db));
                }
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.shape(*b)[1];
                let (la, lb) = (ca * h * w, cb * h * w);
                let mut da = Vec::with_capacity(n * la);
                let mut db = Vec::with_capacity(n * lb);
                for item in g.data().chunks(la + lb) {
                    da.extend_from_slice(&item[..la]);
                    db.extend_from_slice(&item[la..]);
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, ca, h, w], da));
                self.accumulate(grads, *b, Tensor::new(vec![n, cb, h, w], db));
            }
            Op::TileSpatial(z) => {
                let (n, d) = self.value(*z).dims2();
                let (h, w) = (y.shape()[2], y.shape()[3]);
                let dz = g
                    .data()
                    .chunks(h * w)
                    .map(|p| p.iter().copied().sum::<T>())
                    .collect();
                self.accumulate(grads, *z, Tensor::new(vec![n, d], dz));
            }
            Op::SliceCols { x, start } => {
                let (n, d) = self.value(*x).dims2();
                let len = y.shape()[1];
                let mut dx = vec![T::zero(); n * d];
                for (row, gs) in dx.chunks_mut(d).zip(g.data().chunks(len)) {
                    row[*start..start + len].copy_from_slice(gs);
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, d], dx));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_produce_no_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(vec![2], vec![1.0, 2.0]));
        let b = g.param(Tensor::new(vec![2], vec![3.0, 4.0]));
        let p = g.mul(a, b);
        let s = g.sum(p);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn shared_leaf_accumulates_from_both_uses() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::new(vec![1], vec![3.0]));
        let sq = g.square(w);
        let both = g.add(sq, w);
        let s = g.sum(both);
        let grads = g.backward(s);
        assert_eq!(grads.get(w).unwrap().data(), &[7.0]);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![3], vec![-200.0, 0.0, 200.0]));
        let y = g.softplus(x);
        let v = g.value(y).data();
        assert!(v[0] >= 0.0 && v[0] < 1e-30);
        assert!((v[1] - std::f32::consts::LN_2).abs() < 1e-6);
        assert_eq!(v[2], 200.0);
    }
}
