//! Eager reverse-mode autodiff over [`Tensor`]s.
//!
//! Every op computes its value immediately and records what backward needs on
//! the [`Tape`]. [`Tape::backward`] walks the nodes in reverse creation order,
//! which is a valid topological order since inputs always precede outputs.
//!
//! With [`Tape::set_guided`] enabled, rectifier backward passes only let
//! positive upstream gradients through (guided backpropagation).

use crate::error::{Error, Result};
use crate::tensor::{cn_to_nchw, col2im, gemm, im2col, nchw_to_cn, ConvGeom, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const BN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    LeakyRelu { x: Var, slope: f64 },
    Tanh { x: Var },
    Sigmoid { x: Var },
    ConcatChannels { a: Var, b: Var },
    ChannelGroupMean { x: Var, group: usize },
    MeanSquaredDiff { a: Var, b: Var },
    MeanAbsDiff { a: Var, b: Var },
    CosineDistance { a: Var, b: Var },
    MeanNegLog { p: Var, complement: bool, eps: f64 },
    Add { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Reshape { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode batch-norm, to be folded into
/// the layer's running averages by the owner of the parameters.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    guided: bool,
}

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

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Switch rectifier backward passes to the guided rule.
    pub fn set_guided(&mut self, guided: bool) {
        self.guided = guided;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant copy of `v`'s value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (cout, cin, k, k2) = self.value(w).dims4()?;
        if cin != c || k != k2 {
            return Err(Error::Shape(format!(
                "conv2d weight {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        let g = ConvGeom::forward(n, c, h, wd, k, stride, pad)?;
        let cols = im2col(self.value(x).data(), &g);
        let mut ymat = vec![0.0; cout * g.cols_len()];
        gemm(cout, g.cols_rows(), g.cols_len(), self.value(w).data(), false, &cols, false, &mut ymat, 0.0);
        let l = g.oh * g.ow;
        let mut y = cn_to_nchw(&ymat, n, cout, l);
        if let Some(b) = b {
            add_channel_bias(&mut y, self.value(b).data(), n, cout, l);
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::new(vec![n, cout, g.oh, g.ow], y)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, needs))
    }

    /// Transposed convolution; weight layout `[cin, cout, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (cin, cout, k, k2) = self.value(w).dims4()?;
        if cin != c || k != k2 {
            return Err(Error::Shape(format!(
                "conv_transpose2d weight {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if (h - 1) * stride + k < 2 * pad + 1 {
            return Err(Error::Shape("transposed conv output would be empty".into()));
        }
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        // The adjoint conv maps the (oh x ow) output back onto the (h x w) input grid.
        let g = ConvGeom { n, c: cout, h: oh, w: ow, k, stride, pad, oh: h, ow: wd };
        let xmat = nchw_to_cn(self.value(x).data(), n, c, h * wd);
        let mut cols = vec![0.0; g.cols_rows() * g.cols_len()];
        gemm(g.cols_rows(), cin, g.cols_len(), self.value(w).data(), true, &xmat, false, &mut cols, 0.0);
        let mut y = col2im(&cols, &g);
        if let Some(b) = b {
            add_channel_bias(&mut y, self.value(b).data(), n, cout, oh * ow);
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::new(vec![n, cout, oh, ow], y)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, stride, pad }, needs))
    }

    /// Per-channel batch normalization.
    ///
    /// In training mode the batch statistics normalize the input and are
    /// returned; otherwise `running` supplies `(mean, var)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[f64], &[f64]),
        train: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let l = h * w;
        let m = n * l;
        let xs = self.value(x).data();
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for ni in 0..n {
                    s += xs[(ni * c + ci) * l..(ni * c + ci + 1) * l].iter().sum::<f64>();
                }
                let mu = s / m as f64;
                let mut ss = 0.0;
                for ni in 0..n {
                    ss += xs[(ni * c + ci) * l..(ni * c + ci + 1) * l].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                }
                mean[ci] = mu;
                var[ci] = ss / m as f64;
            }
            (mean, var)
        } else {
            (running.0.to_vec(), running.1.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut y = vec![0.0; xs.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * l;
                for j in base..base + l {
                    let xh = (xs[j] - mean[ci]) * inv_std[ci];
                    xhat[j] = xh;
                    y[j] = gs[ci] * xh + bs[ci];
                }
            }
        }
        let stats = train.then(|| BatchStats {
            var_unbiased: if m > 1 { var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect() } else { var.clone() },
            mean,
        });
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let value = Tensor::new(vec![n, c, h, w], y)?;
        let v = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, needs);
        Ok((v, stats))
    }

    /// Leaky rectifier; `slope = 0` gives the plain rectifier.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| {
            if *v <= 0.0 {
                *v *= slope;
            }
        });
        let needs = self.needs(x);
        self.push(value, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        let needs = self.needs(x);
        self.push(value, Op::Tanh { x }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid { x }, needs)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "cannot concat channels of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let l = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for ni in 0..n {
            out.extend_from_slice(&av[ni * ca * l..(ni + 1) * ca * l]);
            out.extend_from_slice(&bv[ni * cb * l..(ni + 1) * cb * l]);
        }
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        Ok(self.push(value, Op::ConcatChannels { a, b }, needs))
    }

    /// Average consecutive groups of `group` channels: `[n, c, h, w] -> [n, c / group, h, w]`.
    pub fn channel_group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        if group == 1 {
            return Ok(x);
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        if group == 0 || c % group != 0 {
            return Err(Error::Shape(format!("{c} channels not divisible into groups of {group}")));
        }
        let co = c / group;
        let l = h * w;
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * co * l];
        for ni in 0..n {
            for cg in 0..co {
                let dst = &mut out[(ni * co + cg) * l..(ni * co + cg + 1) * l];
                for j in 0..group {
                    let src = &xs[(ni * c + cg * group + j) * l..(ni * c + cg * group + j + 1) * l];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
                dst.iter_mut().for_each(|d| *d /= group as f64);
            }
        }
        let needs = self.needs(x);
        let value = Tensor::new(vec![n, co, h, w], out)?;
        Ok(self.push(value, Op::ChannelGroupMean { x, group }, needs))
    }

    fn check_same(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        Ok(())
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mean_squared_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let s: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(s / av.len() as f64), Op::MeanSquaredDiff { a, b }, needs))
    }

    /// Mean over all elements of `|a - b|`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let s: f64 = av.iter().zip(bv).map(|(x, y)| (x - y).abs()).sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(s / av.len() as f64), Op::MeanAbsDiff { a, b }, needs))
    }

    /// Batch mean of per-sample `1 - cos(vec(a_i), vec(b_i))`.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let n = self.value(a).shape().first().copied().unwrap_or(1).max(1);
        let mut total = 0.0;
        for i in 0..n {
            let (sa, sb) = (sample(self.value(a), i, n), sample(self.value(b), i, n));
            let (dot, na, nb) = dot_norms(sa, sb);
            if na == 0.0 {
                return Err(Error::ZeroNorm("student activation"));
            }
            if nb == 0.0 {
                return Err(Error::ZeroNorm("teacher activation"));
            }
            total += 1.0 - dot / (na * nb);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(total / n as f64), Op::CosineDistance { a, b }, needs))
    }

    /// `-mean(log(clamp(p)))`, or `-mean(log(1 - clamp(p)))` when `complement`.
    pub fn mean_neg_log(&mut self, p: Var, complement: bool, eps: f64) -> Var {
        let pv = self.value(p).data();
        let s: f64 = pv
            .iter()
            .map(|&v| {
                let q = v.clamp(eps, 1.0 - eps);
                if complement {
                    (1.0 - q).ln()
                } else {
                    q.ln()
                }
            })
            .sum();
        let needs = self.needs(p);
        self.push(Tensor::scalar(-s / pv.len() as f64), Op::MeanNegLog { p, complement, eps }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().zip(self.value(b).data()).for_each(|(x, y)| *x += y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|x| *x *= c);
        let needs = self.needs(a);
        self.push(value, Op::Scale { a, c }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.backward_node(node, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => {
                *slot = Some(Tensor::new(self.value(v).shape().to_vec(), g).expect("gradient shape"));
            }
        }
    }

    fn guided_filter(&self, g: f64) -> f64 {
        if self.guided {
            g.max(0.0)
        } else {
            g
        }
    }

    fn backward_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let go = gout.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let (n, c, h, wd) = self.value(x).dims4()?;
                let (cout, _, k, _) = self.value(w).dims4()?;
                let g = ConvGeom::forward(n, c, h, wd, k, stride, pad)?;
                let l = g.oh * g.ow;
                let gmat = nchw_to_cn(go, n, cout, l);
                if let Some(b) = b {
                    if self.needs(b) {
                        self.accumulate(grads, b, channel_sums(go, n, cout, l));
                    }
                }
                if self.needs(w) {
                    let cols = im2col(self.value(x).data(), &g);
                    let mut gw = vec![0.0; cout * g.cols_rows()];
                    gemm(cout, g.cols_len(), g.cols_rows(), &gmat, false, &cols, true, &mut gw, 0.0);
                    self.accumulate(grads, w, gw);
                }
                if self.needs(x) {
                    let mut gcols = vec![0.0; g.cols_rows() * g.cols_len()];
                    gemm(g.cols_rows(), cout, g.cols_len(), self.value(w).data(), true, &gmat, false, &mut gcols, 0.0);
                    self.accumulate(grads, x, col2im(&gcols, &g));
                }
            }
            &Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let (n, cin, h, wd) = self.value(x).dims4()?;
                let (_, cout, k, _) = self.value(w).dims4()?;
                let (_, _, oh, ow) = node.value.dims4()?;
                let g = ConvGeom { n, c: cout, h: oh, w: ow, k, stride, pad, oh: h, ow: wd };
                if let Some(b) = b {
                    if self.needs(b) {
                        self.accumulate(grads, b, channel_sums(go, n, cout, oh * ow));
                    }
                }
                let gcols = im2col(go, &g);
                if self.needs(w) {
                    let xmat = nchw_to_cn(self.value(x).data(), n, cin, h * wd);
                    let mut gw = vec![0.0; cin * g.cols_rows()];
                    gemm(cin, g.cols_len(), g.cols_rows(), &xmat, false, &gcols, true, &mut gw, 0.0);
                    self.accumulate(grads, w, gw);
                }
                if self.needs(x) {
                    let mut gx = vec![0.0; cin * g.cols_len()];
                    gemm(cin, g.cols_rows(), g.cols_len(), self.value(w).data(), false, &gcols, false, &mut gx, 0.0);
                    self.accumulate(grads, x, cn_to_nchw(&gx, n, cin, h * wd));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let l = h * w;
                let m = (n * l) as f64;
                let gs = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * l;
                        for j in base..base + l {
                            sum_g[ci] += go[j];
                            sum_gx[ci] += go[j] * xhat[j];
                        }
                    }
                }
                self.accumulate(grads, *gamma, sum_gx.clone());
                self.accumulate(grads, *beta, sum_g.clone());
                if self.needs(*x) {
                    let mut gx = vec![0.0; go.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * l;
                            let s = gs[ci] * inv_std[ci];
                            for j in base..base + l {
                                gx[j] = if *train {
                                    s * (go[j] - sum_g[ci] / m - xhat[j] * sum_gx[ci] / m)
                                } else {
                                    s * go[j]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            &Op::LeakyRelu { x, slope } => {
                let xs = self.value(x).data();
                let gx = xs
                    .iter()
                    .zip(go)
                    .map(|(&v, &g)| {
                        let g = self.guided_filter(g);
                        if v > 0.0 {
                            g
                        } else {
                            g * slope
                        }
                    })
                    .collect();
                self.accumulate(grads, x, gx);
            }
            &Op::Tanh { x } => {
                let gx = node.value.data().iter().zip(go).map(|(y, g)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, x, gx);
            }
            &Op::Sigmoid { x } => {
                let gx = node.value.data().iter().zip(go).map(|(y, g)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, x, gx);
            }
            &Op::ConcatChannels { a, b } => {
                let (n, ca, h, w) = self.value(a).dims4()?;
                let (_, cb, _, _) = self.value(b).dims4()?;
                let l = h * w;
                let ct = ca + cb;
                if self.needs(a) {
                    let mut ga = Vec::with_capacity(n * ca * l);
                    for ni in 0..n {
                        ga.extend_from_slice(&go[ni * ct * l..(ni * ct + ca) * l]);
                    }
                    self.accumulate(grads, a, ga);
                }
                if self.needs(b) {
                    let mut gb = Vec::with_capacity(n * cb * l);
                    for ni in 0..n {
                        gb.extend_from_slice(&go[(ni * ct + ca) * l..(ni + 1) * ct * l]);
                    }
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::ChannelGroupMean { x, group } => {
                let (n, c, h, w) = self.value(x).dims4()?;
                let co = c / group;
                let l = h * w;
                let mut gx = vec![0.0; n * c * l];
                for ni in 0..n {
                    for ci in 0..c {
                        let src = &go[(ni * co + ci / group) * l..(ni * co + ci / group + 1) * l];
                        gx[(ni * c + ci) * l..(ni * c + ci + 1) * l]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d = s / group as f64);
                    }
                }
                self.accumulate(grads, x, gx);
            }
            &Op::MeanSquaredDiff { a, b } => {
                let g0 = go[0];
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let k = 2.0 * g0 / av.len() as f64;
                let ga: Vec<f64> = av.iter().zip(bv).map(|(x, y)| k * (x - y)).collect();
                if self.needs(b) {
                    self.accumulate(grads, b, ga.iter().map(|v| -v).collect());
                }
                self.accumulate(grads, a, ga);
            }
            &Op::MeanAbsDiff { a, b } => {
                let g0 = go[0];
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let k = g0 / av.len() as f64;
                let ga: Vec<f64> = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            k
                        } else if d < 0.0 {
                            -k
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.needs(b) {
                    self.accumulate(grads, b, ga.iter().map(|v| -v).collect());
                }
                self.accumulate(grads, a, ga);
            }
            &Op::CosineDistance { a, b } => {
                let g0 = go[0];
                let n = self.value(a).shape().first().copied().unwrap_or(1).max(1);
                let per = self.value(a).numel() / n;
                let mut ga = vec![0.0; per * n];
                let mut gb = vec![0.0; per * n];
                for i in 0..n {
                    let (sa, sb) = (sample(self.value(a), i, n), sample(self.value(b), i, n));
                    let (dot, na, nb) = dot_norms(sa, sb);
                    let cos = dot / (na * nb);
                    let k = -g0 / n as f64;
                    for j in 0..per {
                        ga[i * per + j] = k * (sb[j] / (na * nb) - cos * sa[j] / (na * na));
                        gb[i * per + j] = k * (sa[j] / (na * nb) - cos * sb[j] / (nb * nb));
                    }
                }
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            &Op::MeanNegLog { p, complement, eps } => {
                let g0 = go[0];
                let pv = self.value(p).data();
                let k = -g0 / pv.len() as f64;
                let gp = pv
                    .iter()
                    .map(|&v| {
                        if v < eps || v > 1.0 - eps {
                            0.0
                        } else if complement {
                            -k / (1.0 - v)
                        } else {
                            k / v
                        }
                    })
                    .collect();
                self.accumulate(grads, p, gp);
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, go.to_vec());
                self.accumulate(grads, b, go.to_vec());
            }
            &Op::Scale { a, c } => {
                self.accumulate(grads, a, go.iter().map(|g| g * c).collect());
            }
            &Op::Reshape { x } => {
                self.accumulate(grads, x, go.to_vec());
            }
        }
        Ok(())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sample(t: &Tensor, i: usize, n: usize) -> &[f64] {
    let per = t.numel() / n;
    &t.data()[i * per..(i + 1) * per]
}

fn dot_norms(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na.sqrt(), nb.sqrt())
}

fn add_channel_bias(y: &mut [f64], b: &[f64], n: usize, c: usize, l: usize) {
    for ni in 0..n {
        for (ci, bias) in b.iter().enumerate().take(c) {
            y[(ni * c + ci) * l..(ni * c + ci + 1) * l].iter_mut().for_each(|v| *v += bias);
        }
    }
}

fn channel_sums(g: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for ni in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            *o += g[(ni * c + ci) * l..(ni * c + ci + 1) * l].iter().sum::<f64>();
        }
    }
    out
}
