//! Forward kernels and their backward rules.
//!
//! Every kernel is a plain function over [`Tensor`]s. The autodiff graph in
//! [`crate::autograd`] records which kernel produced a node and calls the
//! matching backward function during the reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, Real, Tensor};

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::Dimension(format!(
            "{what} must have rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

/// `y[i, j] = sum_k w[j, k] * x[i, k] + b[j]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(x, 2, "linear input")?;
    expect_rank(w, 2, "linear weight")?;
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let (fout, win) = (w.shape()[0], w.shape()[1]);
    if fin != win || b.numel() != fout {
        return Err(Error::Dimension(format!(
            "linear: input {:?} incompatible with weight {:?} and bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; n * fout];
    for i in 0..n {
        let row = &xd[i * fin..(i + 1) * fin];
        for j in 0..fout {
            out[i * fout + j] = dot(&wd[j * fin..(j + 1) * fin], row) + bd[j];
        }
    }
    Tensor::new(&[n, fout], out)
}

/// Gradients of [`linear_forward`] with respect to `(x, w, b)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor, need_x: bool) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[0];
    let (xd, wd, gd) = (x.data(), w.data(), grad_out.data());
    let mut gw = vec![0.0; fout * fin];
    let mut gb = vec![0.0; fout];
    let mut gx = if need_x { vec![0.0; n * fin] } else { Vec::new() };
    for i in 0..n {
        let xrow = &xd[i * fin..(i + 1) * fin];
        for j in 0..fout {
            let g = gd[i * fout + j];
            gb[j] += g;
            axpy(g, xrow, &mut gw[j * fin..(j + 1) * fin]);
            if need_x {
                axpy(g, &wd[j * fin..(j + 1) * fin], &mut gx[i * fin..(i + 1) * fin]);
            }
        }
    }
    let gx = need_x.then(|| Tensor::new(x.shape(), gx).expect("shape"));
    (
        gx,
        Tensor::new(w.shape(), gw).expect("shape"),
        Tensor::new(&[fout], gb).expect("shape"),
    )
}

// ---------------------------------------------------------------------------
// 2-D cross-correlation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Zero-pad the width (time) axis so the output width equals the input
    /// width. Odd total padding puts the extra column on the right.
    SameWidth,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_per_group: usize,
    cout_per_group: usize,
    kh: usize,
    kw: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(x: &Tensor, k: &Tensor, groups: usize, padding: Padding) -> Result<Self> {
        expect_rank(x, 4, "conv2d input")?;
        expect_rank(k, 4, "conv2d kernel")?;
        let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, kcin, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || kcin * groups != cin {
            return Err(Error::Dimension(format!(
                "conv2d: input {:?} and kernel {:?} incompatible with groups={groups}",
                x.shape(),
                k.shape()
            )));
        }
        let (pad_left, pad_right) = match padding {
            Padding::Valid => (0, 0),
            Padding::SameWidth => ((kw - 1) / 2, kw - 1 - (kw - 1) / 2),
        };
        if kh > h || kw > w + pad_left + pad_right {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {:?} larger than padded input {:?} ({padding:?})",
                k.shape(),
                x.shape()
            )));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            cin_per_group: kcin,
            cout_per_group: cout / groups,
            kh,
            kw,
            pad_left,
            oh: h - kh + 1,
            ow: w + pad_left + pad_right - kw + 1,
        })
    }

    /// Output columns `[lo, hi)` whose input column `ox + kx - pad_left` is in range.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad_left.saturating_sub(kx);
        let hi = (self.w + self.pad_left).saturating_sub(kx).min(self.ow);
        (lo, hi.max(lo))
    }
}

pub fn conv2d_forward(x: &Tensor, k: &Tensor, groups: usize, padding: Padding) -> Result<Tensor> {
    let g = ConvGeometry::new(x, k, groups, padding)?;
    let (xd, kd) = (x.data(), k.data());
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.cout * out_plane];
    for ni in 0..g.n {
        for co in 0..g.cout {
            let group = co / g.cout_per_group;
            let obase = (ni * g.cout + co) * out_plane;
            let oplane = &mut out[obase..obase + out_plane];
            for cl in 0..g.cin_per_group {
                let ci = group * g.cin_per_group + cl;
                let iplane = &xd[(ni * g.cin + ci) * in_plane..][..in_plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let kv = kd[((co * g.cin_per_group + cl) * g.kh + ky) * g.kw + kx];
                        let (lo, hi) = g.valid_cols(kx);
                        if lo >= hi {
                            continue;
                        }
                        let ilo = lo + kx - g.pad_left;
                        for oy in 0..g.oh {
                            let irow = &iplane[(oy + ky) * g.w..][ilo..ilo + (hi - lo)];
                            axpy(kv, irow, &mut oplane[oy * g.ow + lo..oy * g.ow + hi]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.n, g.cout, g.oh, g.ow], out)
}

/// Gradients of [`conv2d_forward`] with respect to the input (if requested) and the kernel.
pub fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    groups: usize,
    padding: Padding,
    grad_out: &Tensor,
    need_x: bool,
    need_k: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let g = ConvGeometry::new(x, k, groups, padding)?;
    let (xd, kd, gd) = (x.data(), k.data(), grad_out.data());
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    let mut gx = if need_x { vec![0.0; xd.len()] } else { Vec::new() };
    let mut gk = if need_k { vec![0.0; kd.len()] } else { Vec::new() };
    for ni in 0..g.n {
        for co in 0..g.cout {
            let group = co / g.cout_per_group;
            let gplane = &gd[(ni * g.cout + co) * out_plane..][..out_plane];
            for cl in 0..g.cin_per_group {
                let ci = group * g.cin_per_group + cl;
                let ibase = (ni * g.cin + ci) * in_plane;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let kidx = ((co * g.cin_per_group + cl) * g.kh + ky) * g.kw + kx;
                        let (lo, hi) = g.valid_cols(kx);
                        if lo >= hi {
                            continue;
                        }
                        let ilo = lo + kx - g.pad_left;
                        let len = hi - lo;
                        let mut acc = 0.0;
                        for oy in 0..g.oh {
                            let grow = &gplane[oy * g.ow + lo..oy * g.ow + hi];
                            let istart = ibase + (oy + ky) * g.w + ilo;
                            if need_k {
                                acc += dot(grow, &xd[istart..istart + len]);
                            }
                            if need_x {
                                axpy(kd[kidx], grow, &mut gx[istart..istart + len]);
                            }
                        }
                        if need_k {
                            gk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    let gx = need_x.then(|| Tensor::new(x.shape(), gx).expect("shape"));
    let gk = need_k.then(|| Tensor::new(k.shape(), gk).expect("shape"));
    Ok((gx, gk))
}

// ---------------------------------------------------------------------------
// Elementwise and pooling
// ---------------------------------------------------------------------------

pub fn elu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { v.exp_m1() })
}

/// Backward of ELU expressed through its output: `dy/dx = y + 1` for negative inputs.
pub fn elu_backward(x: &Tensor, y: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .zip(grad_out.data())
        .map(|((&xv, &yv), &g)| if xv >= 0.0 { g } else { g * (yv + 1.0) })
        .collect();
    Tensor::new(x.shape(), data).expect("shape")
}

/// Non-overlapping mean pooling along the last (time) axis.
pub fn avg_pool_forward(x: &Tensor, pool_width: usize) -> Result<Tensor> {
    let w = *x.shape().last().unwrap_or(&0);
    if pool_width == 0 || w % pool_width != 0 {
        return Err(Error::Dimension(format!(
            "avg_pool: width {w} of {:?} not divisible by pool width {pool_width}",
            x.shape()
        )));
    }
    let scale = 1.0 / pool_width as Real;
    let data = x
        .data()
        .chunks_exact(pool_width)
        .map(|c| c.iter().sum::<Real>() * scale)
        .collect();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = w / pool_width;
    Tensor::new(&shape, data)
}

pub fn avg_pool_backward(x_shape: &[usize], pool_width: usize, grad_out: &Tensor) -> Tensor {
    let scale = 1.0 / pool_width as Real;
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * scale, pool_width))
        .collect();
    Tensor::new(x_shape, data).expect("shape")
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

pub const BN_EPS: Real = 1e-5;
pub const BN_MOMENTUM: Real = 0.1;

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
    /// Number of training batches folded in; zero means no statistics recorded.
    pub batches: u64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            batches: 0,
        }
    }

    /// Exponential moving update from one training batch. The variance uses
    /// the unbiased estimator.
    pub fn update(&mut self, batch: &BatchStats, momentum: Real) {
        let n = batch.count as Real;
        let correction = if batch.count > 1 { n / (n - 1.0) } else { 1.0 };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * batch.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * batch.var[c] * correction;
        }
        self.batches += 1;
    }
}

/// Per-channel statistics of one training batch (biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for batch norm, dropout active.
    Train,
    /// Running statistics for batch norm, dropout off.
    Eval,
}

#[derive(Clone, Debug)]
pub struct BatchNormOutput {
    pub y: Tensor,
    pub xhat: Tensor,
    pub inv_std: Vec<Real>,
    /// Present in train mode only.
    pub batch: Option<BatchStats>,
}

fn channel_layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(Error::Dimension(format!(
            "batch_norm input needs a channel axis, got {:?}",
            x.shape()
        )));
    }
    let inner: usize = x.shape()[2..].iter().product();
    Ok((x.shape()[0], x.shape()[1], inner))
}

/// Normalizes channel axis 1. Train mode uses batch statistics; eval mode
/// uses `running`, which must have recorded at least one batch.
pub fn batch_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &RunningStats,
    mode: Mode,
    eps: Real,
) -> Result<BatchNormOutput> {
    let (n, c, inner) = channel_layout(x)?;
    if gamma.numel() != c || beta.numel() != c || running.mean.len() != c {
        return Err(Error::Dimension(format!(
            "batch_norm: {c} channels in {:?} but gamma {:?}, beta {:?}, running {}",
            x.shape(),
            gamma.shape(),
            beta.shape(),
            running.mean.len()
        )));
    }
    let xd = x.data();
    let count = n * inner;
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for ni in 0..n {
                    s += xd[(ni * c + ci) * inner..][..inner].iter().sum::<Real>();
                }
                let m = s / count as Real;
                let mut sq = 0.0;
                for ni in 0..n {
                    sq += xd[(ni * c + ci) * inner..][..inner]
                        .iter()
                        .map(|v| (v - m) * (v - m))
                        .sum::<Real>();
                }
                mean[ci] = m;
                var[ci] = sq / count as Real;
            }
            (mean, var)
        }
        Mode::Eval => {
            if running.batches == 0 {
                return Err(Error::State(
                    "batch_norm in eval mode before any running statistics were recorded".into(),
                ));
            }
            (running.mean.clone(), running.var.clone())
        }
    };
    let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut xhat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * inner;
            for k in base..base + inner {
                let h = (xd[k] - mean[ci]) * inv_std[ci];
                xhat[k] = h;
                y[k] = gd[ci] * h + bd[ci];
            }
        }
    }
    let batch = (mode == Mode::Train).then_some(BatchStats { mean, var, count });
    Ok(BatchNormOutput {
        y: Tensor::new(x.shape(), y)?,
        xhat: Tensor::new(x.shape(), xhat)?,
        inv_std,
        batch,
    })
}

/// Gradients with respect to `(x, gamma, beta)`.
pub fn batch_norm_backward(
    xhat: &Tensor,
    inv_std: &[Real],
    gamma: &Tensor,
    mode: Mode,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let shape = xhat.shape();
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let (hd, gd, god) = (xhat.data(), gamma.data(), grad_out.data());
    let count = (n * inner) as Real;
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * inner;
            ggamma[ci] += dot(&god[base..base + inner], &hd[base..base + inner]);
            gbeta[ci] += god[base..base + inner].iter().sum::<Real>();
        }
    }
    let mut gx = vec![0.0; hd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * inner;
            let scale = gd[ci] * inv_std[ci];
            match mode {
                Mode::Train => {
                    // dxhat = g * gamma; sum(dxhat) = gamma * gbeta, sum(dxhat * xhat) = gamma * ggamma
                    for k in base..base + inner {
                        gx[k] = scale / count * (count * god[k] - gbeta[ci] - hd[k] * ggamma[ci]);
                    }
                }
                Mode::Eval => {
                    for k in base..base + inner {
                        gx[k] = scale * god[k];
                    }
                }
            }
        }
    }
    (
        Tensor::new(shape, gx).expect("shape"),
        Tensor::new(gamma.shape(), ggamma).expect("shape"),
        Tensor::new(gamma.shape(), gbeta).expect("shape"),
    )
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean cross entropy of softmax(logits) against integer labels. Returns the
/// loss and the softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(Real, Tensor)> {
    expect_rank(logits, 2, "logits")?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
    }
    let mut probs = vec![0.0; n * k];
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let mut z = 0.0;
        for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = (v - max).exp();
            z += *p;
        }
        for p in &mut probs[i * k..(i + 1) * k] {
            *p /= z;
        }
        loss += z.ln() - (row[label] - max);
    }
    Ok((loss / n as Real, Tensor::new(&[n, k], probs)?))
}

pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize], grad_loss: Real) -> Tensor {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let scale = grad_loss / n as Real;
    let mut g: Vec<Real> = probs.data().iter().map(|p| p * scale).collect();
    for (i, &label) in labels.iter().enumerate() {
        g[i * k + label] -= scale;
    }
    Tensor::new(&[n, k], g).expect("shape")
}

/// Row-wise softmax.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    expect_rank(logits, 2, "logits")?;
    let k = logits.shape()[1];
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(logits.shape(), out)
}
