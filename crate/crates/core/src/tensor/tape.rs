use super::{gemm, Mat, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Running statistics for one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Film {
        input: Var,
        gamma: Var,
        beta: Var,
    },
    AddSpatial {
        input: Var,
        bias: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GlobalMaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    AppendCoords(Var),
    Concat(Var, Var),
    SliceCols {
        input: Var,
        start: usize,
    },
    SelectStep {
        input: Var,
        step: usize,
    },
    Reshape(Var),
    SpatialSoftmax(Var),
    WeightedSpatialSum {
        features: Var,
        weights: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Project {
        input: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order; [`Tape::backward`] replays them in
/// reverse. One tape per forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dims<const N: usize>(op: &'static str, t: &[usize]) -> Result<[usize; N]> {
    t.try_into()
        .map_err(|_| Error::shape(op, format!("expected {N} dimensions, got {t:?}")))
}

fn require(cond: bool, op: &'static str, detail: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::shape(op, detail()))
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * plane;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * plane;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let d = &mut dx[base + ix as usize];
                            *d = *d + cols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `(channels, spatial)` sizes of an `[N, C, ...]` tensor.
fn channel_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    require(shape.len() >= 2, op, || format!("expected [N, C, ...], got {shape:?}"))?;
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input; gradients are collected for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// 2-D convolution, `input` NCHW, `weight` `[O, C, k, k]`, zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, c, h, w] = dims(OP, self.value(input).shape())?;
        let [o, ci, kh, kw] = dims(OP, self.value(weight).shape())?;
        require(ci == c, OP, || format!("input has {c} channels, kernel expects {ci}"))?;
        require(kh == kw, OP, || "kernels must be square".into())?;
        require(stride == 1 || stride == 2, OP, || format!("stride {stride} not in {{1, 2}}"))?;
        require(h + 2 * pad >= kh && w + 2 * pad >= kw, OP, || "kernel larger than padded input".into())?;
        if let Some(b) = bias {
            require(self.value(b).shape() == [o], OP, || "bias must be [O]".into())?;
        }
        let k = kh;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let ckk = c * k * k;
        let plane = ho * wo;
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut out = vec![T::zero(); n * o * plane];
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); ckk * plane] };
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            for b in 0..n {
                let xb = &x[b * c * h * w..(b + 1) * c * h * w];
                let src: &[T] = if direct {
                    xb
                } else {
                    im2col(xb, c, h, w, k, stride, pad, ho, wo, &mut cols);
                    &cols
                };
                gemm(
                    Mat::new(wt, o, ckk),
                    Mat::new(src, ckk, plane),
                    &mut out[b * o * plane..(b + 1) * o * plane],
                    false,
                );
            }
            if let Some(bv) = bias {
                let bias = self.value(bv).data();
                for (chunk, &bo) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
                    chunk.iter_mut().for_each(|v| *v = *v + bo);
                }
            }
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            Tensor::new(vec![n, o, ho, wo], out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            &inputs,
        ))
    }

    /// Batch normalization over `N` and spatial positions of an `[N, C, ...]`
    /// tensor. Train mode normalizes with batch statistics and updates
    /// `state`; eval mode uses the running statistics. Without `gamma`/`beta`
    /// the layer is affine-free.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        state: &mut BatchNormState<T>,
        train: bool,
    ) -> Result<Var> {
        const OP: &str = "batchnorm2d";
        let (n, c, s) = channel_dims(OP, self.value(input).shape())?;
        require(state.mean.len() == c, OP, || format!("state has {} channels, input {c}", state.mean.len()))?;
        for p in [gamma, beta].into_iter().flatten() {
            require(self.value(p).shape() == [c], OP, || "affine parameters must be [C]".into())?;
        }
        let m = n * s;
        require(!train || m >= 2, OP, || "train mode needs at least two values per channel".into())?;
        let x = self.value(input).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let idx = |b: usize| (b * c + ch) * s;
            let (mean, var) = if train {
                let mf = T::from_usize(m).expect("count");
                let mut sum = T::zero();
                for b in 0..n {
                    sum = sum + x[idx(b)..idx(b) + s].iter().copied().sum::<T>();
                }
                let mean = sum / mf;
                let mut sq = T::zero();
                for b in 0..n {
                    for &v in &x[idx(b)..idx(b) + s] {
                        sq = sq + (v - mean) * (v - mean);
                    }
                }
                let var = sq / mf;
                let unbiased = sq / T::from_usize(m - 1).expect("count");
                let mo = state.momentum;
                state.mean[ch] = (T::one() - mo) * state.mean[ch] + mo * mean;
                state.var[ch] = (T::one() - mo) * state.var[ch] + mo * unbiased;
                (mean, var)
            } else {
                (state.mean[ch], state.var[ch])
            };
            let is = T::one() / (var + state.eps).sqrt();
            inv_std[ch] = is;
            for b in 0..n {
                for i in idx(b)..idx(b) + s {
                    xhat[i] = (x[i] - mean) * is;
                }
            }
        }
        let mut out = xhat.clone();
        if gamma.is_some() || beta.is_some() {
            let g = gamma.map(|v| self.value(v).data().to_vec());
            let bt = beta.map(|v| self.value(v).data().to_vec());
            for (i, chunk) in out.chunks_mut(s).enumerate() {
                let ch = i % c;
                let gv = g.as_ref().map_or(T::one(), |g| g[ch]);
                let bv = bt.as_ref().map_or(T::zero(), |b| b[ch]);
                chunk.iter_mut().for_each(|v| *v = *v * gv + bv);
            }
        }
        let shape = self.value(input).shape().to_vec();
        let mut inputs = vec![input];
        inputs.extend(gamma);
        inputs.extend(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &inputs,
        ))
    }

    /// Feature-wise linear modulation: `out[n,c,..] = gamma[n,c]·x[n,c,..] + beta[n,c]`.
    pub fn film(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        const OP: &str = "film";
        let (n, c, s) = channel_dims(OP, self.value(input).shape())?;
        for p in [gamma, beta] {
            require(self.value(p).shape() == [n, c], OP, || {
                format!("modulation must be [{n}, {c}], got {:?}", self.value(p).shape())
            })?;
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = self.value(input).data().to_vec();
        for (i, chunk) in out.chunks_mut(s).enumerate() {
            chunk.iter_mut().for_each(|v| *v = g[i] * *v + bt[i]);
        }
        let shape = self.value(input).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Film { input, gamma, beta }, &[input, gamma, beta]))
    }

    /// Add a per-sample, per-channel vector `[N, C]` at every spatial position.
    pub fn add_spatial(&mut self, input: Var, bias: Var) -> Result<Var> {
        const OP: &str = "add_spatial";
        let (n, c, s) = channel_dims(OP, self.value(input).shape())?;
        require(self.value(bias).shape() == [n, c], OP, || "bias must be [N, C]".into())?;
        let bt = self.value(bias).data();
        let mut out = self.value(input).data().to_vec();
        for (i, chunk) in out.chunks_mut(s).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v + bt[i]);
        }
        let shape = self.value(input).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddSpatial { input, bias }, &[input, bias]))
    }

    /// `input [N, K] · weight [K, M] + bias [M]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let [n, k] = dims(OP, self.value(input).shape())?;
        let [kw, m] = dims(OP, self.value(weight).shape())?;
        require(k == kw, OP, || format!("input has {k} features, weight expects {kw}"))?;
        if let Some(b) = bias {
            require(self.value(b).shape() == [m], OP, || "bias must be [M]".into())?;
        }
        let mut out = vec![T::zero(); n * m];
        gemm(
            Mat::new(self.value(input).data(), n, k),
            Mat::new(self.value(weight).data(), k, m),
            &mut out,
            false,
        );
        if let Some(b) = bias {
            let bias = self.value(b).data();
            for row in out.chunks_mut(m) {
                row.iter_mut().zip(bias).for_each(|(v, &bv)| *v = *v + bv);
            }
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Linear { input, weight, bias }, &inputs))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        require(av.shape() == bv.shape(), name, || format!("{:?} vs {:?}", av.shape(), bv.shape()))?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Rows of `table [V, E]` for each id, giving `[ids.len(), E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        const OP: &str = "embedding";
        let [v, e] = dims(OP, self.value(table).shape())?;
        require(ids.iter().all(|&i| i < v), OP, || format!("id out of range for {v} rows"))?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(&t[i * e..(i + 1) * e]);
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), e], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Maximum over spatial positions: `[N, C, ...] -> [N, C]`.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, s) = channel_dims("global_max_pool", self.value(input).shape())?;
        require(s > 0, "global_max_pool", || "empty spatial extent".into())?;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for chunk in x.chunks(s) {
            let mut best = 0;
            for (i, &v) in chunk.iter().enumerate() {
                if v > chunk[best] {
                    best = i;
                }
            }
            out.push(chunk[best]);
            argmax.push(best);
        }
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalMaxPool { input, argmax }, &[input]))
    }

    /// Mean over spatial positions: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, s) = channel_dims("global_avg_pool", self.value(input).shape())?;
        require(s > 0, "global_avg_pool", || "empty spatial extent".into())?;
        let sf = T::from_usize(s).expect("count");
        let out = self
            .value(input)
            .data()
            .chunks(s)
            .map(|ch| ch.iter().copied().sum::<T>() / sf)
            .collect();
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool(input), &[input]))
    }

    /// Append two coordinate channels, linear in `[-1, 1]` across width and
    /// height respectively.
    pub fn append_coords(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = dims("append_coords", self.value(input).shape())?;
        let lin = |i: usize, len: usize| {
            if len > 1 {
                T::lit(-1.0 + 2.0 * i as f64 / (len - 1) as f64)
            } else {
                T::zero()
            }
        };
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * (c + 2) * h * w);
        for b in 0..n {
            out.extend_from_slice(&x[b * c * h * w..(b + 1) * c * h * w]);
            for _ in 0..h {
                out.extend((0..w).map(|j| lin(j, w)));
            }
            for i in 0..h {
                out.extend(std::iter::repeat(lin(i, h)).take(w));
            }
        }
        Ok(self.push(Tensor::new(vec![n, c + 2, h, w], out)?, Op::AppendCoords(input), &[input]))
    }

    /// Column-wise concatenation of `[N, A]` and `[N, B]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat";
        let [n, ca] = dims(OP, self.value(a).shape())?;
        let [nb, cb] = dims(OP, self.value(b).shape())?;
        require(n == nb, OP, || format!("batch {n} vs {nb}"))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        Ok(self.push(Tensor::new(vec![n, ca + cb], out)?, Op::Concat(a, b), &[a, b]))
    }

    /// Columns `[start, start + len)` of an `[N, M]` tensor.
    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let [n, m] = dims("slice_cols", self.value(input).shape())?;
        require(start + len <= m, "slice_cols", || format!("[{start}, {}) outside {m}", start + len))?;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&x[i * m + start..i * m + start + len]);
        }
        Ok(self.push(Tensor::new(vec![n, len], out)?, Op::SliceCols { input, start }, &[input]))
    }

    /// Time step `step` of an `[N, T, E]` tensor.
    pub fn select_step(&mut self, input: Var, step: usize) -> Result<Var> {
        let [n, t, e] = dims("select_step", self.value(input).shape())?;
        require(step < t, "select_step", || format!("step {step} outside {t}"))?;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * e);
        for i in 0..n {
            out.extend_from_slice(&x[(i * t + step) * e..(i * t + step + 1) * e]);
        }
        Ok(self.push(Tensor::new(vec![n, e], out)?, Op::SelectStep { input, step }, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(input), &[input]))
    }

    /// Softmax over everything but the leading dimension.
    pub fn spatial_softmax(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        require(!shape.is_empty() && shape[0] > 0, "spatial_softmax", || "empty input".into())?;
        let s = self.value(input).numel() / shape[0];
        let mut out = self.value(input).data().to_vec();
        for row in out.chunks_mut(s) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.iter_mut().for_each(|v| *v = (*v - mx).exp());
            let z: T = row.iter().copied().sum();
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::SpatialSoftmax(input), &[input]))
    }

    /// `out[n, c] = Σ_p weights[n, p] · features[n, c, p]`.
    pub fn weighted_spatial_sum(&mut self, features: Var, weights: Var) -> Result<Var> {
        const OP: &str = "weighted_spatial_sum";
        let (n, c, s) = channel_dims(OP, self.value(features).shape())?;
        let wv = self.value(weights);
        require(wv.shape().first() == Some(&n) && wv.numel() == n * s, OP, || {
            format!("weights {:?} do not match features", wv.shape())
        })?;
        let f = self.value(features).data();
        let w = wv.data();
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            let wb = &w[b * s..(b + 1) * s];
            for ch in 0..c {
                let fb = &f[(b * c + ch) * s..(b * c + ch + 1) * s];
                out[b * c + ch] = fb.iter().zip(wb).map(|(&x, &y)| x * y).sum();
            }
        }
        Ok(self.push(
            Tensor::new(vec![n, c], out)?,
            Op::WeightedSpatialSum { features, weights },
            &[features, weights],
        ))
    }

    /// Attention pooling: softmax of `scores` over spatial positions, then the
    /// weighted sum of `features`. Returns `(pooled [N, C], weights)`.
    pub fn softmax_attention_pool(&mut self, features: Var, scores: Var) -> Result<(Var, Var)> {
        let weights = self.spatial_softmax(scores)?;
        let pooled = self.weighted_spatial_sum(features, weights)?;
        Ok((pooled, weights))
    }

    /// Mean cross-entropy of `logits [N, K]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let [n, k] = dims(OP, self.value(logits).shape())?;
        require(labels.len() == n && n > 0, OP, || format!("{} labels for batch {n}", labels.len()))?;
        require(labels.iter().all(|&l| l < k), OP, || format!("label outside {k} classes"))?;
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            loss = loss + lse - row[labels[i]];
        }
        let loss = loss / T::from_usize(n).expect("count");
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: 0 });
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Scalar `Σ weights · input`, used to reduce outputs in gradient checks.
    pub fn project(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        let x = self.value(input).data();
        require(x.len() == weights.len(), "project", || "weight count differs".into())?;
        let s = x.iter().zip(weights).map(|(&a, &b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::Project {
                input,
                weights: weights.to_vec(),
            },
            &[input],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        require(self.value(loss).numel() == 1, "backward", || "loss must be a scalar".into())?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.backprop(i, &g, &mut grads)?;
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let xs = self.value(*input);
                let [n, c, h, w] = dims("conv2d", xs.shape())?;
                let [o, _, k, _] = dims("conv2d", self.value(*weight).shape())?;
                let [_, _, ho, wo] = dims("conv2d", node.value.shape())?;
                let (plane, ckk) = (ho * wo, c * k * k);
                let direct = k == 1 && *stride == 1 && *pad == 0;
                let x = xs.data();
                let wt = self.value(*weight).data();
                let want_x = self.wants(*input);
                let want_w = self.wants(*weight);
                let mut dw = vec![T::zero(); o * ckk];
                let mut dx = if want_x { vec![T::zero(); x.len()] } else { Vec::new() };
                let mut cols = if direct { Vec::new() } else { vec![T::zero(); ckk * plane] };
                let mut dcols = if want_x && !direct { vec![T::zero(); ckk * plane] } else { Vec::new() };
                for b in 0..n {
                    let gb = &gd[b * o * plane..(b + 1) * o * plane];
                    let xb = &x[b * c * h * w..(b + 1) * c * h * w];
                    if want_w {
                        let src: &[T] = if direct {
                            xb
                        } else {
                            im2col(xb, c, h, w, k, *stride, *pad, ho, wo, &mut cols);
                            &cols
                        };
                        gemm(Mat::new(gb, o, plane), Mat::new(src, ckk, plane).t(), &mut dw, true);
                    }
                    if want_x {
                        let dxb = &mut dx[b * c * h * w..(b + 1) * c * h * w];
                        if direct {
                            gemm(Mat::new(wt, o, ckk).t(), Mat::new(gb, o, plane), dxb, true);
                        } else {
                            gemm(Mat::new(wt, o, ckk).t(), Mat::new(gb, o, plane), &mut dcols, false);
                            col2im(&dcols, c, h, w, k, *stride, *pad, ho, wo, dxb);
                        }
                    }
                }
                if want_w {
                    let shape = self.value(*weight).shape().to_vec();
                    self.accumulate(grads, *weight, Tensor::new(shape, dw)?);
                }
                if want_x {
                    self.accumulate(grads, *input, Tensor::new(xs.shape().to_vec(), dx)?);
                }
                if let Some(bv) = bias {
                    let mut db = vec![T::zero(); o];
                    for (j, chunk) in gd.chunks(plane).enumerate() {
                        db[j % o] = db[j % o] + chunk.iter().copied().sum();
                    }
                    self.accumulate(grads, *bv, Tensor::new(vec![o], db)?);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, s) = channel_dims("batchnorm2d", node.value.shape())?;
                let gam = gamma.map(|v| self.value(v).data());
                if let Some(gv) = gamma {
                    let mut dg = vec![T::zero(); c];
                    for (j, (gc, xc)) in gd.chunks(s).zip(xhat.chunks(s)).enumerate() {
                        dg[j % c] = dg[j % c] + gc.iter().zip(xc).map(|(&a, &b)| a * b).sum();
                    }
                    self.accumulate(grads, *gv, Tensor::new(vec![c], dg)?);
                }
                if let Some(bv) = beta {
                    let mut db = vec![T::zero(); c];
                    for (j, gc) in gd.chunks(s).enumerate() {
                        db[j % c] = db[j % c] + gc.iter().copied().sum();
                    }
                    self.accumulate(grads, *bv, Tensor::new(vec![c], db)?);
                }
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); gd.len()];
                    let mf = T::from_usize(n * s).expect("count");
                    for ch in 0..c {
                        let scale = gam.map_or(T::one(), |g| g[ch]);
                        let is = inv_std[ch];
                        let range = |b: usize| (b * c + ch) * s..(b * c + ch + 1) * s;
                        if *train {
                            let (mut sg, mut sgx) = (T::zero(), T::zero());
                            for b in 0..n {
                                for idx in range(b) {
                                    let gi = gd[idx] * scale;
                                    sg = sg + gi;
                                    sgx = sgx + gi * xhat[idx];
                                }
                            }
                            for b in 0..n {
                                for idx in range(b) {
                                    let gi = gd[idx] * scale;
                                    dx[idx] = is / mf * (mf * gi - sg - xhat[idx] * sgx);
                                }
                            }
                        } else {
                            for b in 0..n {
                                for idx in range(b) {
                                    dx[idx] = gd[idx] * scale * is;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *input, Tensor::new(node.value.shape().to_vec(), dx)?);
                }
            }
            Op::Film { input, gamma, beta } => {
                let (n, c, s) = channel_dims("film", node.value.shape())?;
                let x = self.value(*input).data();
                let gm = self.value(*gamma).data();
                if self.wants(*input) {
                    let mut dx = gd.to_vec();
                    for (j, chunk) in dx.chunks_mut(s).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = *v * gm[j]);
                    }
                    self.accumulate(grads, *input, Tensor::new(node.value.shape().to_vec(), dx)?);
                }
                let mut dg = vec![T::zero(); n * c];
                let mut db = vec![T::zero(); n * c];
                for (j, (gc, xc)) in gd.chunks(s).zip(x.chunks(s)).enumerate() {
                    dg[j] = gc.iter().zip(xc).map(|(&a, &b)| a * b).sum();
                    db[j] = gc.iter().copied().sum();
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![n, c], dg)?);
                self.accumulate(grads, *beta, Tensor::new(vec![n, c], db)?);
            }
            Op::AddSpatial { input, bias } => {
                let (n, c, s) = channel_dims("add_spatial", node.value.shape())?;
                self.accumulate(grads, *input, g.clone());
                let db = gd.chunks(s).map(|ch| ch.iter().copied().sum()).collect();
                self.accumulate(grads, *bias, Tensor::new(vec![n, c], db)?);
            }
            Op::Linear { input, weight, bias } => {
                let [n, k] = dims("linear", self.value(*input).shape())?;
                let m = node.value.shape()[1];
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); n * k];
                    gemm(Mat::new(gd, n, m), Mat::new(self.value(*weight).data(), k, m).t(), &mut dx, false);
                    self.accumulate(grads, *input, Tensor::new(vec![n, k], dx)?);
                }
                if self.wants(*weight) {
                    let mut dw = vec![T::zero(); k * m];
                    gemm(Mat::new(self.value(*input).data(), n, k).t(), Mat::new(gd, n, m), &mut dw, false);
                    self.accumulate(grads, *weight, Tensor::new(vec![k, m], dw)?);
                }
                if let Some(bv) = bias {
                    let mut db = vec![T::zero(); m];
                    for row in gd.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                    }
                    self.accumulate(grads, *bv, Tensor::new(vec![m], db)?);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() }).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(&gi, &yi)| gi * (T::one() - yi * yi)).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, g.map(|v| v * *f));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d = gd.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Embedding { table, ids } => {
                let shape = self.value(*table).shape().to_vec();
                let e = shape[1];
                let mut dt = Tensor::zeros(&shape);
                let dd = dt.data_mut();
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..e {
                        dd[id * e + j] = dd[id * e + j] + gd[row * e + j];
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::GlobalMaxPool { input, argmax } => {
                let shape = self.value(*input).shape().to_vec();
                let (_, _, s) = channel_dims("global_max_pool", &shape)?;
                let mut dx = Tensor::zeros(&shape);
                let dd = dx.data_mut();
                for (j, &am) in argmax.iter().enumerate() {
                    dd[j * s + am] = gd[j];
                }
                self.accumulate(grads, *input, dx);
            }
            Op::GlobalAvgPool(input) => {
                let shape = self.value(*input).shape().to_vec();
                let (_, _, s) = channel_dims("global_avg_pool", &shape)?;
                let sf = T::from_usize(s).expect("count");
                let mut dx = Vec::with_capacity(s * gd.len());
                for &gv in gd {
                    dx.extend(std::iter::repeat(gv / sf).take(s));
                }
                self.accumulate(grads, *input, Tensor::new(shape, dx)?);
            }
            Op::AppendCoords(input) => {
                let shape = self.value(*input).shape().to_vec();
                let [n, c, h, w] = dims("append_coords", &shape)?;
                let mut dx = Vec::with_capacity(n * c * h * w);
                for b in 0..n {
                    let start = b * (c + 2) * h * w;
                    dx.extend_from_slice(&gd[start..start + c * h * w]);
                }
                self.accumulate(grads, *input, Tensor::new(shape, dx)?);
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).shape()[1];
                let cb = self.value(*b).shape()[1];
                let n = node.value.shape()[0];
                let (mut da, mut db) = (Vec::with_capacity(n * ca), Vec::with_capacity(n * cb));
                for row in gd.chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, ca], da)?);
                self.accumulate(grads, *b, Tensor::new(vec![n, cb], db)?);
            }
            Op::SliceCols { input, start } => {
                let shape = self.value(*input).shape().to_vec();
                let m = shape[1];
                let len = node.value.shape()[1];
                let mut dx = Tensor::zeros(&shape);
                for (row, grow) in dx.data_mut().chunks_mut(m).zip(gd.chunks(len)) {
                    row[*start..*start + len].copy_from_slice(grow);
                }
                self.accumulate(grads, *input, dx);
            }
            Op::SelectStep { input, step } => {
                let shape = self.value(*input).shape().to_vec();
                let [n, t, e] = dims("select_step", &shape)?;
                let mut dx = Tensor::zeros(&shape);
                let dd = dx.data_mut();
                for i in 0..n {
                    dd[(i * t + step) * e..(i * t + step + 1) * e].copy_from_slice(&gd[i * e..(i + 1) * e]);
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Reshape(input) => {
                let shape = self.value(*input).shape().to_vec();
                self.accumulate(grads, *input, g.clone().reshape(&shape)?);
            }
            Op::SpatialSoftmax(input) => {
                let y = node.value.data();
                let s = y.len() / node.value.shape()[0];
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(s).zip(gd.chunks(s)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
                }
                self.accumulate(grads, *input, Tensor::new(node.value.shape().to_vec(), dx)?);
            }
            Op::WeightedSpatialSum { features, weights } => {
                let fshape = self.value(*features).shape().to_vec();
                let (n, c, s) = channel_dims("weighted_spatial_sum", &fshape)?;
                let f = self.value(*features).data();
                let w = self.value(*weights).data();
                if self.wants(*features) {
                    let mut df = vec![T::zero(); f.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let gv = gd[b * c + ch];
                            let off = (b * c + ch) * s;
                            for p in 0..s {
                                df[off + p] = w[b * s + p] * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *features, Tensor::new(fshape.clone(), df)?);
                }
                if self.wants(*weights) {
                    let mut dw = vec![T::zero(); n * s];
                    for b in 0..n {
                        for ch in 0..c {
                            let gv = gd[b * c + ch];
                            let off = (b * c + ch) * s;
                            for p in 0..s {
                                dw[b * s + p] = dw[b * s + p] + f[off + p] * gv;
                            }
                        }
                    }
                    let wshape = self.value(*weights).shape().to_vec();
                    self.accumulate(grads, *weights, Tensor::new(wshape, dw)?);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let shape = self.value(*logits).shape().to_vec();
                let (n, k) = (shape[0], shape[1]);
                let scale = gd[0] / T::from_usize(n).expect("count");
                let mut dx = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l] = dx[i * k + l] - T::one();
                }
                dx.iter_mut().for_each(|v| *v = *v * scale);
                self.accumulate(grads, *logits, Tensor::new(shape, dx)?);
            }
            Op::Project { input, weights } => {
                let shape = self.value(*input).shape().to_vec();
                let d = weights.iter().map(|&w| w * gd[0]).collect();
                self.accumulate(grads, *input, Tensor::new(shape, d)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_center_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(t(&[1, 1, 3, 3], &k));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn stride_two_halves() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 64, 64]));
        let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), [1, 4, 32, 32]);
        assert!(matches!(tape.conv2d(x, w, None, 3, 1), Err(Error::ShapeMismatch { .. })));
        let bad = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
        assert!(tape.conv2d(x, bad, None, 1, 1).is_err());
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[3, 2, 2, 2], |i| ((i * 7919) % 13) as f64 * 0.3 - 1.0));
        let mut st = BatchNormState::new(2);
        let y = tape.batchnorm2d(x, None, None, &mut st, true).unwrap();
        let y = tape.value(y).data().to_vec();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| y[(b * 2 + ch) * 4..(b * 2 + ch + 1) * 4].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 12.0;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(st.mean.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn film_identity_and_constant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64));
        let ones = tape.constant(Tensor::full(&[2, 3], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[2, 3]));
        let y = tape.film(x, ones, zeros).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let b = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64 + 0.5));
        let y = tape.film(x, zeros, b).unwrap();
        for (j, chunk) in tape.value(y).data().chunks(4).enumerate() {
            assert!(chunk.iter().all(|&v| v == j as f64 + 0.5));
        }
    }

    #[test]
    fn cross_entropy_ln2() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[1, 2]));
        let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
        assert!((tape.value(loss).data()[0] - 2f64.ln()).abs() < 1e-12);
        let inf = tape.constant(t(&[1, 2], &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax_cross_entropy(inf, &[0]), Err(Error::NonFiniteLoss { .. })));
    }

    #[test]
    fn max_pool_spike() {
        let mut tape = Tape::<f64>::new();
        let mut data = vec![0.0; 2 * 3 * 9];
        for ch in 0..6 {
            data[ch * 9 + ch % 9] = ch as f64 + 1.0;
        }
        let x = tape.constant(t(&[2, 3, 3, 3], &data));
        let y = tape.global_max_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn diamond_accumulates() {
        // f = (x·a)·(x·b) summed; df/dx = 2abx element-wise
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 5.0);
        let p = tape.mul(a, b).unwrap();
        let loss = tape.project(p, &[1.0, 1.0, 1.0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), [20.0, 40.0, 60.0]);
    }

    #[test]
    fn coords_span_unit_interval() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 5]));
        let y = tape.append_coords(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[15..20], [-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(&v[30..35], [-1.0; 5]);
        assert_eq!(&v[40..45], [1.0; 5]);
    }

    #[test]
    fn inputs_not_mutated() {
        let mut tape = Tape::<f64>::new();
        let src = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0);
        let x = tape.param(src.clone());
        let r = tape.relu(x);
        let s = tape.sigmoid(r);
        let loss = tape.project(s, &[1.0; 6]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.value(x), &src);
    }
}
