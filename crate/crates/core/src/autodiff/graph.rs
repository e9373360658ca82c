//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, so reverse index
//! order is a valid topological order for the backward sweep. A graph lives
//! for one forward/backward pass; parameters are re-bound each step.

use super::conv::ConvGeometry;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Relu(Var),
    Tanh(Var),
    Conv2d { input: Var, kernel: Var, geom: ConvGeometry, cols: Option<Vec<T>> },
    InstanceNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    ChannelBias(Var, Var),
    Upsample2(Var),
    Concat(Var, Var),
    Reshape(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Crop { input: Var, top: usize, left: usize },
    SoftmaxCe { logits: Var, probs: Vec<T>, labels: Vec<u8> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` if `v` did not influence the output.
    pub fn take_or_zeros(&mut self, v: Var, len: usize) -> Vec<T> {
        self.grads.get_mut(v.0).and_then(Option::take).unwrap_or_else(|| vec![T::zero(); len])
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
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

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("operand matches itself")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::lit(v.numel() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(format!("expected matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, T::zero());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), rg))
    }

    /// Cross-correlation of an NCHW input with an OIKK kernel, reflection
    /// padded by `K/2` so that stride 1 preserves the spatial size.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (o, ci, kh, kw) = self.value(kernel).dims4()?;
        if kh != kw || kh % 2 == 0 {
            return Err(Error::UnsupportedKernel(if kh % 2 == 0 { kh } else { kw }));
        }
        if ci != c {
            return Err(Error::shape(format!("conv kernel expects {ci} channels, input has {c}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv stride must be at least 1"));
        }
        let geom = ConvGeometry::new(h, w, kh, stride);
        let p = geom.out_pixels();
        let ckk = c * kh * kh;
        let keep_cols = self.rg(kernel) && !geom.is_pointwise();
        let mut saved = if keep_cols { Vec::with_capacity(n * ckk * p) } else { Vec::new() };
        let mut out = vec![T::zero(); n * o * p];
        let x = self.value(input).data();
        let wt = self.value(kernel).data();
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * p] };
        for b in 0..n {
            let xb = &x[b * c * h * w..(b + 1) * c * h * w];
            let ob = &mut out[b * o * p..(b + 1) * o * p];
            if geom.is_pointwise() {
                T::gemm(o, ckk, p, wt, false, xb, false, ob, T::zero());
            } else {
                geom.im2col(xb, c, &mut cols);
                T::gemm(o, ckk, p, wt, false, &cols, false, ob, T::zero());
                if keep_cols {
                    saved.extend_from_slice(&cols);
                }
            }
        }
        let t = Tensor::from_parts(vec![n, o, geom.out_h, geom.out_w], out);
        let rg = self.rg(input) || self.rg(kernel);
        let cols = keep_cols.then_some(saved);
        Ok(self.push(t, Op::Conv2d { input, kernel, geom, cols }, rg))
    }

    /// Per-sample, per-channel standardisation over H·W (population
    /// variance) followed by a per-channel affine map.
    pub fn instance_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(format!("instance norm affine needs {c} channels")));
        }
        let hw = h * w;
        if hw == 0 {
            return Err(Error::shape("instance norm over empty plane"));
        }
        let eps = T::lit(eps);
        let inv_hw = T::one() / T::lit(hw as f64);
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); n * c];
        let mut out = vec![T::zero(); x.len()];
        for nc in 0..n * c {
            let ch = nc % c;
            let xs = &x[nc * hw..(nc + 1) * hw];
            let mean = xs.iter().copied().sum::<T>() * inv_hw;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_hw;
            let is = T::one() / (var + eps).sqrt();
            inv_std[nc] = is;
            let xh = &mut xhat[nc * hw..(nc + 1) * hw];
            let o = &mut out[nc * hw..(nc + 1) * hw];
            for i in 0..hw {
                xh[i] = (xs[i] - mean) * is;
                o[i] = g[ch] * xh[i] + bt[ch];
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let (xhat, inv_std) = if rg { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        let t = Tensor::from_parts(vec![n, c, h, w], out);
        Ok(self.push(t, Op::InstanceNorm { input, gamma, beta, xhat, inv_std }, rg))
    }

    /// Adds `bias[c]` to every element of channel `c`.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (_, c, h, w) = self.value(input).dims4()?;
        if self.value(bias).numel() != c {
            return Err(Error::shape(format!("bias needs {c} channels")));
        }
        let hw = h * w;
        let b = self.value(bias).data();
        let data = self.value(input).data().iter().enumerate().map(|(i, &v)| v + b[(i / hw) % c]).collect();
        let t = Tensor::from_parts(self.shape(input).to_vec(), data);
        let rg = self.rg(input) || self.rg(bias);
        Ok(self.push(t, Op::ChannelBias(input, bias), rg))
    }

    /// Nearest-neighbour ×2 upsampling: each pixel becomes a 2×2 block.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let x = self.value(input).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for nc in 0..n * c {
            let src = &x[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * h2 * w2..(nc + 1) * h2 * w2];
            for y in 0..h2 {
                let row = &src[(y / 2) * w..(y / 2 + 1) * w];
                for (xo, d) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                    *d = row[xo / 2];
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::from_parts(vec![n, c, h2, w2], out), Op::Upsample2(input), rg))
    }

    /// Channel concatenation of two NCHW tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (n2, cb, h2, w2) = self.value(b).dims4()?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(Error::shape(format!("concat {:?} with {:?}", self.shape(a), self.shape(b))));
        }
        let hw = h * w;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&xa[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&xb[s * cb * hw..(s + 1) * cb * hw]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![n, ca + cb, h, w], out), Op::Concat(a, b), rg))
    }

    /// Spatial window `[top, top+height) × [left, left+width)` of an NCHW tensor.
    pub fn crop(&mut self, input: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if top + height > h || left + width > w || height == 0 || width == 0 {
            return Err(Error::shape(format!("crop {height}x{width}@({top},{left}) outside {h}x{w}")));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * height * width);
        for nc in 0..n * c {
            let plane = &x[nc * h * w..(nc + 1) * h * w];
            for y in top..top + height {
                out.extend_from_slice(&plane[y * w + left..y * w + left + width]);
            }
        }
        let rg = self.rg(input);
        let t = Tensor::from_parts(vec![n, c, height, width], out);
        Ok(self.push(t, Op::Crop { input, top, left }, rg))
    }

    /// Mean softmax cross-entropy over all pixels of `[N, K, H, W]` logits.
    /// `labels` holds one class index per pixel in `N·H·W` order.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let (n, k, h, w) = self.value(logits).dims4()?;
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(Error::shape(format!("labels have {} entries, logits cover {} pixels", labels.len(), n * hw)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::shape(format!("label {bad} out of range for {k} classes")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        for s in 0..n {
            let base = s * k * hw;
            for p in 0..hw {
                let mut mx = x[base + p];
                for j in 1..k {
                    mx = mx.max(x[base + j * hw + p]);
                }
                let mut z = T::zero();
                for j in 0..k {
                    let e = (x[base + j * hw + p] - mx).exp();
                    probs[base + j * hw + p] = e;
                    z += e;
                }
                for j in 0..k {
                    probs[base + j * hw + p] /= z;
                }
                let l = labels[s * hw + p] as usize;
                total += z.ln() + mx - x[base + l * hw + p];
            }
        }
        let loss = total / T::lit((n * hw) as f64);
        let rg = self.rg(logits);
        let labels = labels.to_vec();
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, probs, labels }, rg))
    }

    /// Reverse sweep from a one-element output. Gradients accumulate for
    /// every node that requires them, in deterministic reverse-creation order.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let numel = self.value(output).numel();
        if numel != 1 {
            return Err(Error::NotScalar(numel));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.buf(grads, v) {
                        axpy(d, g, T::one());
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(d) = self.buf(grads, a) {
                    axpy(d, g, T::one());
                }
                if let Some(d) = self.buf(grads, b) {
                    axpy(d, g, -T::one());
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if let Some(d) = self.buf(grads, a) {
                    for ((d, &gi), &y) in d.iter_mut().zip(g).zip(vb) {
                        *d += gi * y;
                    }
                }
                if let Some(d) = self.buf(grads, b) {
                    for ((d, &gi), &x) in d.iter_mut().zip(g).zip(va) {
                        *d += gi * x;
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(d) = self.buf(grads, a) {
                    axpy(d, g, s);
                }
            }
            &Op::AddScalar(a) | &Op::Reshape(a) => {
                if let Some(d) = self.buf(grads, a) {
                    axpy(d, g, T::one());
                }
            }
            &Op::Relu(a) => {
                let x = self.value(a).data();
                if let Some(d) = self.buf(grads, a) {
                    for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(x) {
                        if xi > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            &Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(d) = self.buf(grads, a) {
                    for ((d, &gi), &yi) in d.iter_mut().zip(g).zip(y) {
                        *d += gi * (T::one() - yi * yi);
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(d) = self.buf(grads, a) {
                    for d in d.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            &Op::Mean(a) => {
                let s = g[0] / T::lit(self.value(a).numel() as f64);
                if let Some(d) = self.buf(grads, a) {
                    for d in d.iter_mut() {
                        *d += s;
                    }
                }
            }
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims2(a).expect("validated at creation");
                let n = self.shape(b)[1];
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if let Some(d) = self.buf(grads, a) {
                    T::gemm(m, n, k, g, false, vb, true, d, T::one());
                }
                if let Some(d) = self.buf(grads, b) {
                    T::gemm(k, m, n, va, true, g, false, d, T::one());
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = self.dims2(a).expect("validated at creation");
                if let Some(d) = self.buf(grads, a) {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Conv2d { input, kernel, geom, cols } => {
                self.backprop_conv(*input, *kernel, geom, cols.as_deref(), g, grads);
            }
            Op::InstanceNorm { input, gamma, beta, xhat, inv_std } => {
                let (n, c, h, w) = self.value(*input).dims4().expect("validated at creation");
                let hw = h * w;
                let inv_hw = T::one() / T::lit(hw as f64);
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = self.rg(*input).then(|| vec![T::zero(); n * c * hw]);
                for nc in 0..n * c {
                    let ch = nc % c;
                    let gs = &g[nc * hw..(nc + 1) * hw];
                    let xh = &xhat[nc * hw..(nc + 1) * hw];
                    let mut sg = T::zero();
                    let mut sgx = T::zero();
                    for (&gi, &xi) in gs.iter().zip(xh) {
                        sg += gi;
                        sgx += gi * xi;
                    }
                    dbeta[ch] += sg;
                    dgamma[ch] += sgx;
                    if let Some(dx) = dx.as_mut() {
                        // dxhat = g·γ; dx = σ⁻¹(dxhat − mean(dxhat) − x̂·mean(dxhat·x̂))
                        let scale = gm[ch] * inv_std[nc];
                        let mg = sg * inv_hw;
                        let mgx = sgx * inv_hw;
                        let dxs = &mut dx[nc * hw..(nc + 1) * hw];
                        for i in 0..hw {
                            dxs[i] = scale * (gs[i] - mg - xh[i] * mgx);
                        }
                    }
                }
                if let (Some(dx), Some(d)) = (dx, self.buf(grads, *input)) {
                    axpy(d, &dx, T::one());
                }
                if let Some(d) = self.buf(grads, *gamma) {
                    axpy(d, &dgamma, T::one());
                }
                if let Some(d) = self.buf(grads, *beta) {
                    axpy(d, &dbeta, T::one());
                }
            }
            &Op::ChannelBias(input, bias) => {
                let (_, c, h, w) = self.value(input).dims4().expect("validated at creation");
                let hw = h * w;
                if let Some(d) = self.buf(grads, input) {
                    axpy(d, g, T::one());
                }
                if let Some(d) = self.buf(grads, bias) {
                    for (i, &gi) in g.iter().enumerate() {
                        d[(i / hw) % c] += gi;
                    }
                }
            }
            &Op::Upsample2(a) => {
                let (n, c, h, w) = self.value(a).dims4().expect("validated at creation");
                let w2 = 2 * w;
                if let Some(d) = self.buf(grads, a) {
                    for nc in 0..n * c {
                        let src = &g[nc * 4 * h * w..(nc + 1) * 4 * h * w];
                        let dst = &mut d[nc * h * w..(nc + 1) * h * w];
                        for y in 0..2 * h {
                            for x in 0..w2 {
                                dst[(y / 2) * w + x / 2] += src[y * w2 + x];
                            }
                        }
                    }
                }
            }
            &Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(a).dims4().expect("validated at creation");
                let cb = self.shape(b)[1];
                let hw = h * w;
                let stride = (ca + cb) * hw;
                if let Some(d) = self.buf(grads, a) {
                    for s in 0..n {
                        axpy(&mut d[s * ca * hw..(s + 1) * ca * hw], &g[s * stride..s * stride + ca * hw], T::one());
                    }
                }
                if let Some(d) = self.buf(grads, b) {
                    for s in 0..n {
                        axpy(
                            &mut d[s * cb * hw..(s + 1) * cb * hw],
                            &g[s * stride + ca * hw..(s + 1) * stride],
                            T::one(),
                        );
                    }
                }
            }
            &Op::Crop { input, top, left } => {
                let (n, c, h, w) = self.value(input).dims4().expect("validated at creation");
                let (_, _, ch, cw) = node.value.dims4().expect("crop output is NCHW");
                if let Some(d) = self.buf(grads, input) {
                    for nc in 0..n * c {
                        for y in 0..ch {
                            let src = &g[(nc * ch + y) * cw..(nc * ch + y + 1) * cw];
                            let off = nc * h * w + (top + y) * w + left;
                            axpy(&mut d[off..off + cw], src, T::one());
                        }
                    }
                }
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                let (n, k, h, w) = self.value(*logits).dims4().expect("validated at creation");
                let hw = h * w;
                let s = g[0] / T::lit((n * hw) as f64);
                if let Some(d) = self.buf(grads, *logits) {
                    for b in 0..n {
                        for j in 0..k {
                            for p in 0..hw {
                                let idx = (b * k + j) * hw + p;
                                let target = if labels[b * hw + p] as usize == j { T::one() } else { T::zero() };
                                d[idx] += s * (probs[idx] - target);
                            }
                        }
                    }
                }
            }
        }
    }

    fn backprop_conv(
        &self,
        input: Var,
        kernel: Var,
        geom: &ConvGeometry,
        cols: Option<&[T]>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (n, c, h, w) = self.value(input).dims4().expect("validated at creation");
        let o = self.shape(kernel)[0];
        let k = geom.kernel;
        let ckk = c * k * k;
        let p = geom.out_pixels();
        let x = self.value(input).data();
        let wt = self.value(kernel).data();
        if let Some(dw) = self.buf(grads, kernel) {
            for b in 0..n {
                let gb = &g[b * o * p..(b + 1) * o * p];
                let cb: &[T] = match cols {
                    Some(cols) => &cols[b * ckk * p..(b + 1) * ckk * p],
                    None => &x[b * c * h * w..(b + 1) * c * h * w],
                };
                T::gemm(o, p, ckk, gb, false, cb, true, dw, T::one());
            }
        }
        if let Some(dx) = self.buf(grads, input) {
            let mut dcols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * p] };
            for b in 0..n {
                let gb = &g[b * o * p..(b + 1) * o * p];
                let dxb = &mut dx[b * c * h * w..(b + 1) * c * h * w];
                if geom.is_pointwise() {
                    T::gemm(ckk, o, p, wt, true, gb, false, dxb, T::one());
                } else {
                    T::gemm(ckk, o, p, wt, true, gb, false, &mut dcols, T::zero());
                    geom.col2im_add(&dcols, c, dxb);
                }
            }
        }
    }
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], s: T) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}
