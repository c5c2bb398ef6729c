//! Forward and backward compute kernels.
//!
//! Pure functions over flat `f64` buffers in row-major NCHW / NxD layout.
//! The gradient tape records which kernel produced each node and calls the
//! matching backward here; eval-mode forward passes call the same functions
//! directly, so both paths share one implementation.
//!
//! Convolutions are lowered to im2col + GEMM over the whole batch, which is
//! where nearly all training time goes.

use std::cell::RefCell;

use crate::error::{Error, Result};

/// C[m,n] = alpha * A * B + beta * C, with explicit strides so transposed
/// operands need no copy. C is always contiguous row-major.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// Reusable buffers for im2col and batch repacking; sized by the largest
// layer seen and reused across steps.
thread_local! {
    static SCRATCH: RefCell<(Vec<f64>, Vec<f64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

fn with_scratch<R>(need_a: usize, need_b: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut pair = cell.borrow_mut();
        let pair = &mut *pair;
        if pair.0.len() < need_a {
            pair.0.resize(need_a, 0.0);
        }
        if pair.1.len() < need_b {
            pair.1.resize(need_b, 0.0);
        }
        f(&mut pair.0[..need_a], &mut pair.1[..need_b])
    })
}

/// Shape of a 4-axis activation tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Nchw {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Nchw {
    pub fn from_shape(op: &'static str, shape: &[usize]) -> Result<Self> {
        if shape.len() != 4 {
            return Err(Error::Dim {
                op,
                detail: format!("expected [N,C,H,W], got shape {:?}", shape),
            });
        }
        Ok(Nchw { n: shape[0], c: shape[1], h: shape[2], w: shape[3] })
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn to_shape(self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }
}

// ---------------------------------------------------------------------------
// conv2d, 3x3 kernel, stride 1, padding 1
// ---------------------------------------------------------------------------

/// Samples are processed in chunks sized so the im2col buffer stays
/// cache-resident while the GEMM's n extent stays wide enough to pack well.
fn conv_chunk(n: usize, hw: usize) -> usize {
    (256 / hw).clamp(1, n)
}

/// Gather the 3x3 neighborhoods of every pixel of `chunk` consecutive
/// samples into `cols[cin*9][chunk*h*w]`; out-of-bounds taps are zero.
fn im2col(input: &[f64], dims: Nchw, first: usize, chunk: usize, cols: &mut [f64]) {
    let Nchw { c, h, w, .. } = dims;
    let hw = h * w;
    let chw = chunk * hw;
    for ci in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = (ci * 9 + ky * 3 + kx) * chw;
                for g in 0..chunk {
                    let src = (((first + g) * c + ci) * h) * w;
                    let dst = row + g * hw;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        let drow = dst + y * w;
                        if sy < 0 || sy >= h as isize {
                            cols[drow..drow + w].fill(0.0);
                            continue;
                        }
                        let srow = src + sy as usize * w;
                        match kx {
                            0 => {
                                cols[drow] = 0.0;
                                cols[drow + 1..drow + w]
                                    .copy_from_slice(&input[srow..srow + w - 1]);
                            }
                            1 => cols[drow..drow + w].copy_from_slice(&input[srow..srow + w]),
                            _ => {
                                cols[drow..drow + w - 1]
                                    .copy_from_slice(&input[srow + 1..srow + w]);
                                cols[drow + w - 1] = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of the im2col layout back to NCHW, the adjoint of [`im2col`].
fn col2im_add(cols: &[f64], dims: Nchw, first: usize, chunk: usize, out: &mut [f64]) {
    let Nchw { c, h, w, .. } = dims;
    let hw = h * w;
    let chw = chunk * hw;
    for ci in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = (ci * 9 + ky * 3 + kx) * chw;
                for g in 0..chunk {
                    let dst = (((first + g) * c + ci) * h) * w;
                    let src = row + g * hw;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let drow = dst + sy as usize * w;
                        let srow = src + y * w;
                        match kx {
                            0 => {
                                for x in 1..w {
                                    out[drow + x - 1] += cols[srow + x];
                                }
                            }
                            1 => {
                                for x in 0..w {
                                    out[drow + x] += cols[srow + x];
                                }
                            }
                            _ => {
                                for x in 0..w - 1 {
                                    out[drow + x + 1] += cols[srow + x];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// out[N,cout,H,W] = conv(input, weight) + bias.
/// `weight` is [cout][cin*9] row-major.
pub fn conv2d_forward(
    input: &[f64],
    dims: Nchw,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    out: &mut [f64],
) {
    let Nchw { n, c: cin, h, w } = dims;
    let hw = h * w;
    let k = cin * 9;
    let chunk = conv_chunk(n, hw);
    with_scratch(k * chunk * hw, cout * chunk * hw, |cols, res| {
        let mut first = 0;
        while first < n {
            let g = chunk.min(n - first);
            let ghw = g * hw;
            im2col(input, dims, first, g, cols);
            dgemm(cout, k, ghw, 1.0, weight, k as isize, 1, cols, ghw as isize, 1, 0.0, res);
            for gi in 0..g {
                for co in 0..cout {
                    let dst = (((first + gi) * cout + co) * h) * w;
                    let src = co * ghw + gi * hw;
                    let b = bias[co];
                    for p in 0..hw {
                        out[dst + p] = res[src + p] + b;
                    }
                }
            }
            first += g;
        }
    });
}

/// Gradients for input, weight, and bias of [`conv2d_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f64],
    dims: Nchw,
    weight: &[f64],
    cout: usize,
    gout: &[f64],
    gin: &mut [f64],
    gweight: &mut [f64],
    gbias: &mut [f64],
) {
    let Nchw { n, c: cin, h, w } = dims;
    let hw = h * w;
    let k = cin * 9;
    let chunk = conv_chunk(n, hw);
    with_scratch(k * chunk * hw, cout * chunk * hw, |cols, gpack| {
        let mut first = 0;
        while first < n {
            let g = chunk.min(n - first);
            let ghw = g * hw;
            // Repack this chunk of gout to [cout][g*hw].
            for gi in 0..g {
                for co in 0..cout {
                    let src = (((first + gi) * cout + co) * h) * w;
                    let dst = co * ghw + gi * hw;
                    gpack[dst..dst + hw].copy_from_slice(&gout[src..src + hw]);
                }
            }
            for co in 0..cout {
                gbias[co] += gpack[co * ghw..(co + 1) * ghw].iter().sum::<f64>();
            }
            // dW += G . colsT
            im2col(input, dims, first, g, cols);
            dgemm(cout, ghw, k, 1.0, gpack, ghw as isize, 1, cols, 1, ghw as isize, 1.0, gweight);
            // dcols = WT . G, reusing the cols scratch (its im2col content
            // was consumed by the dW GEMM above), then scatter back to NCHW.
            dgemm(k, cout, ghw, 1.0, weight, 1, k as isize, gpack, ghw as isize, 1, 0.0, cols);
            col2im_add(cols, dims, first, g, gin);
            first += g;
        }
    });
}

// ---------------------------------------------------------------------------
// batchnorm2d
// ---------------------------------------------------------------------------

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch statistics saved by the train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnSaved {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Train-mode batch norm: normalize by batch statistics, update running
/// stats in place, and return what the backward pass needs.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward_train(
    input: &[f64],
    dims: Nchw,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &mut [f64],
    running_var: &mut [f64],
    out: &mut [f64],
) -> Result<BnSaved> {
    let Nchw { n, c, h, w } = dims;
    let hw = h * w;
    let m = n * hw;
    if m < 2 {
        return Err(Error::DegenerateBatch { op: "batchnorm2d", n: m });
    }
    let mut mean = vec![0.0; c];
    let mut inv_std = vec![0.0; c];
    for ci in 0..c {
        let mut sum = 0.0;
        let mut sq = 0.0;
        for ni in 0..n {
            let base = ((ni * c + ci) * h) * w;
            for p in 0..hw {
                let x = input[base + p];
                sum += x;
                sq += x * x;
            }
        }
        let mu = sum / m as f64;
        let var = (sq / m as f64 - mu * mu).max(0.0);
        let inv = 1.0 / (var + BN_EPS).sqrt();
        mean[ci] = mu;
        inv_std[ci] = inv;
        let unbiased = var * m as f64 / (m - 1) as f64;
        running_mean[ci] = (1.0 - BN_MOMENTUM) * running_mean[ci] + BN_MOMENTUM * mu;
        running_var[ci] = (1.0 - BN_MOMENTUM) * running_var[ci] + BN_MOMENTUM * unbiased;
        let (g, b) = (gamma[ci], beta[ci]);
        for ni in 0..n {
            let base = ((ni * c + ci) * h) * w;
            for p in 0..hw {
                out[base + p] = (input[base + p] - mu) * inv * g + b;
            }
        }
    }
    Ok(BnSaved { mean, inv_std })
}

/// Eval-mode batch norm: normalize by running statistics.
pub fn batchnorm_forward_eval(
    input: &[f64],
    dims: Nchw,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    out: &mut [f64],
) {
    let Nchw { n, c, h, w } = dims;
    let hw = h * w;
    for ci in 0..c {
        let inv = 1.0 / (running_var[ci] + BN_EPS).sqrt();
        let (mu, g, b) = (running_mean[ci], gamma[ci], beta[ci]);
        for ni in 0..n {
            let base = ((ni * c + ci) * h) * w;
            for p in 0..hw {
                out[base + p] = (input[base + p] - mu) * inv * g + b;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward_train(
    input: &[f64],
    dims: Nchw,
    gamma: &[f64],
    saved: &BnSaved,
    gout: &[f64],
    gin: &mut [f64],
    ggamma: &mut [f64],
    gbeta: &mut [f64],
) {
    let Nchw { n, c, h, w } = dims;
    let hw = h * w;
    let m = (n * hw) as f64;
    for ci in 0..c {
        let mu = saved.mean[ci];
        let inv = saved.inv_std[ci];
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for ni in 0..n {
            let base = ((ni * c + ci) * h) * w;
            for p in 0..hw {
                let g = gout[base + p];
                sum_g += g;
                sum_gx += g * (input[base + p] - mu) * inv;
            }
        }
        ggamma[ci] += sum_gx;
        gbeta[ci] += sum_g;
        let scale = gamma[ci] * inv / m;
        for ni in 0..n {
            let base = ((ni * c + ci) * h) * w;
            for p in 0..hw {
                let xhat = (input[base + p] - mu) * inv;
                gin[base + p] += scale * (m * gout[base + p] - sum_g - xhat * sum_gx);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward_eval(
    input: &[f64],
    dims: Nchw,
    gamma: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    gout: &[f64],
    gin: &mut [f64],
    ggamma: &mut [f64],
    gbeta: &mut [f64],
) {
    let Nchw { n, c, h, w } = dims;
    let hw = h * w;
    for ci in 0..c {
        let inv = 1.0 / (running_var[ci] + BN_EPS).sqrt();
        let scale = gamma[ci] * inv;
        for ni in 0..n {
            let base = ((ni * c + ci) * h) * w;
            for p in 0..hw {
                let g = gout[base + p];
                gin[base + p] += g * scale;
                ggamma[ci] += g * (input[base + p] - running_mean[ci]) * inv;
                gbeta[ci] += g;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// relu / maxpool
// ---------------------------------------------------------------------------

pub fn relu_forward(input: &[f64], out: &mut [f64]) {
    for (o, &x) in out.iter_mut().zip(input) {
        *o = if x > 0.0 { x } else { 0.0 };
    }
}

/// Subgradient at zero is zero.
pub fn relu_backward(input: &[f64], gout: &[f64], gin: &mut [f64]) {
    for i in 0..input.len() {
        if input[i] > 0.0 {
            gin[i] += gout[i];
        }
    }
}

/// 2x2 max pool, stride 2. Returns the flat input index of each window
/// maximum; ties go to the first element in row-major window order.
pub fn maxpool2_forward(
    input: &[f64],
    dims: Nchw,
    out: &mut [f64],
    argmax: &mut Vec<u32>,
) -> Result<()> {
    let Nchw { n, c, h, w } = dims;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dim {
            op: "maxpool2",
            detail: format!("spatial axes must be even, got H={h}, W={w}"),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    argmax.clear();
    argmax.reserve(n * c * oh * ow);
    let mut oi = 0;
    for ni in 0..n {
        for ci in 0..c {
            let base = ((ni * c + ci) * h) * w;
            for y in 0..oh {
                for x in 0..ow {
                    let i00 = base + (2 * y) * w + 2 * x;
                    let mut best = i00;
                    let mut val = input[i00];
                    for &cand in &[i00 + 1, i00 + w, i00 + w + 1] {
                        if input[cand] > val {
                            val = input[cand];
                            best = cand;
                        }
                    }
                    out[oi] = val;
                    argmax.push(best as u32);
                    oi += 1;
                }
            }
        }
    }
    Ok(())
}

pub fn maxpool2_backward(argmax: &[u32], gout: &[f64], gin: &mut [f64]) {
    for (o, &src) in gout.iter().zip(argmax) {
        gin[src as usize] += o;
    }
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

/// out[N,dout] = input[N,din] . weight[dout,din]^T + bias
pub fn linear_forward(
    input: &[f64],
    n: usize,
    din: usize,
    weight: &[f64],
    bias: &[f64],
    dout: usize,
    out: &mut [f64],
) {
    dgemm(n, din, dout, 1.0, input, din as isize, 1, weight, 1, din as isize, 0.0, out);
    for row in out.chunks_exact_mut(dout).take(n) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    input: &[f64],
    n: usize,
    din: usize,
    weight: &[f64],
    dout: usize,
    gout: &[f64],
    gin: &mut [f64],
    gweight: &mut [f64],
    gbias: &mut [f64],
) {
    // dX += G . W
    dgemm(n, dout, din, 1.0, gout, dout as isize, 1, weight, din as isize, 1, 1.0, gin);
    // dW += G^T . X
    dgemm(dout, n, din, 1.0, gout, 1, dout as isize, input, din as isize, 1, 1.0, gweight);
    for row in gout.chunks_exact(dout).take(n) {
        for (gb, &g) in gbias.iter_mut().zip(row) {
            *gb += g;
        }
    }
}

// ---------------------------------------------------------------------------
// softmax cross-entropy (fused)
// ---------------------------------------------------------------------------

/// Mean cross-entropy over the batch; returns the loss and keeps the
/// softmax probabilities for the backward pass. Stabilized by row-max
/// subtraction.
pub fn cross_entropy_forward(
    logits: &[f64],
    n: usize,
    n_classes: usize,
    labels: &[usize],
    probs: &mut [f64],
) -> f64 {
    let mut loss = 0.0;
    for i in 0..n {
        let row = &logits[i * n_classes..(i + 1) * n_classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            probs[i * n_classes + j] = e;
            denom += e;
        }
        for p in &mut probs[i * n_classes..(i + 1) * n_classes] {
            *p /= denom;
        }
        loss -= row[labels[i]] - max - denom.ln();
    }
    loss / n as f64
}

pub fn cross_entropy_backward(
    probs: &[f64],
    n: usize,
    n_classes: usize,
    labels: &[usize],
    gout: f64,
    glogits: &mut [f64],
) {
    let scale = gout / n as f64;
    for i in 0..n {
        for j in 0..n_classes {
            let indicator = if labels[i] == j { 1.0 } else { 0.0 };
            glogits[i * n_classes + j] += scale * (probs[i * n_classes + j] - indicator);
        }
    }
}

// ---------------------------------------------------------------------------
// softplus (sigma head of the vae)
// ---------------------------------------------------------------------------

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softplus_forward(input: &[f64], out: &mut [f64]) {
    for (o, &x) in out.iter_mut().zip(input) {
        *o = softplus(x);
    }
}

pub fn softplus_backward(input: &[f64], gout: &[f64], gin: &mut [f64]) {
    for i in 0..input.len() {
        gin[i] += gout[i] / (1.0 + (-input[i]).exp());
    }
}

// ---------------------------------------------------------------------------
// mse / kld
// ---------------------------------------------------------------------------

pub fn mse_forward(pred: &[f64], target: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let d = p - t;
        acc += d * d;
    }
    acc / pred.len() as f64
}

pub fn mse_backward(pred: &[f64], target: &[f64], gout: f64, gpred: &mut [f64], gtarget: &mut [f64]) {
    let scale = 2.0 * gout / pred.len() as f64;
    for i in 0..pred.len() {
        let d = scale * (pred[i] - target[i]);
        gpred[i] += d;
        gtarget[i] -= d;
    }
}

/// Which divergence formula the KLD op evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KldForm {
    /// mean(mu^2 + sigma^2 - ln(sigma) - 1/2); its minimum over sigma sits
    /// at 1/sqrt(2) rather than 1.
    MuSigma,
    /// Textbook form mean(0.5 * (mu^2 + sigma^2 - ln(sigma^2) - 1)).
    Standard,
}

pub fn kld_forward(mu: &[f64], sigma: &[f64], form: KldForm) -> Result<f64> {
    if let Some(bad) = sigma.iter().find(|s| **s <= 0.0) {
        return Err(Error::contract(format!("kld_loss requires sigma > 0, got {bad}")));
    }
    let mut acc = 0.0;
    for (m, s) in mu.iter().zip(sigma) {
        acc += match form {
            KldForm::MuSigma => m * m + s * s - s.ln() - 0.5,
            KldForm::Standard => 0.5 * (m * m + s * s - (s * s).ln() - 1.0),
        };
    }
    Ok(acc / mu.len() as f64)
}

pub fn kld_backward(
    mu: &[f64],
    sigma: &[f64],
    form: KldForm,
    gout: f64,
    gmu: &mut [f64],
    gsigma: &mut [f64],
) {
    let scale = gout / mu.len() as f64;
    for i in 0..mu.len() {
        match form {
            KldForm::MuSigma => {
                gmu[i] += scale * 2.0 * mu[i];
                gsigma[i] += scale * (2.0 * sigma[i] - 1.0 / sigma[i]);
            }
            KldForm::Standard => {
                gmu[i] += scale * mu[i];
                gsigma[i] += scale * (sigma[i] - 1.0 / sigma[i]);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// geometric loss
// ---------------------------------------------------------------------------

/// Distance penalty: zero inside the cluster radius, exponential outside.
pub fn distance_penalty(x: f64, r_c: f64) -> f64 {
    ((x - r_c).max(0.0)).exp() - 1.0
}

/// Sum over the batch of [`distance_penalty`] applied to each sample's
/// Euclidean distance from its own class center. Returns the loss and the
/// per-sample distances for the backward pass.
pub fn geometric_forward(
    z: &[f64],
    n: usize,
    n_d: usize,
    labels: &[usize],
    centers: &[f64],
    radii: &[f64],
) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut dists = Vec::with_capacity(n);
    for j in 0..n {
        let c = &centers[labels[j] * n_d..(labels[j] + 1) * n_d];
        let mut sq = 0.0;
        for k in 0..n_d {
            let d = z[j * n_d + k] - c[k];
            sq += d * d;
        }
        let dist = sq.sqrt();
        dists.push(dist);
        loss += distance_penalty(dist, radii[labels[j]]);
    }
    (loss, dists)
}

/// Gradient w.r.t. z. Inside the cluster (dist <= radius) the penalty is
/// constant, so the contribution is exactly zero; this also removes the
/// norm's singularity at dist = 0.
pub fn geometric_backward(
    z: &[f64],
    n: usize,
    n_d: usize,
    labels: &[usize],
    centers: &[f64],
    radii: &[f64],
    dists: &[f64],
    gout: f64,
    gz: &mut [f64],
) {
    for j in 0..n {
        let dist = dists[j];
        let r = radii[labels[j]];
        if dist <= r {
            continue;
        }
        let coef = gout * (dist - r).exp() / dist;
        let c = &centers[labels[j] * n_d..(labels[j] + 1) * n_d];
        for k in 0..n_d {
            gz[j * n_d + k] += coef * (z[j * n_d + k] - c[k]);
        }
    }
}

// ---------------------------------------------------------------------------
// polar transform (encoder configuration head)
// ---------------------------------------------------------------------------

/// Angular parameters of the polar head, all in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarParams {
    pub sector_period: f64,
    pub inner_test_modulus: f64,
    pub prohibited_threshold: f64,
    pub extra_rotation: f64,
}

impl PolarParams {
    /// True when the angle falls in a deflected (prohibited) region.
    /// `rem_euclid` maps negative angles into [0, modulus).
    pub fn is_prohibited(&self, phi: f64) -> bool {
        phi.rem_euclid(self.sector_period).rem_euclid(self.inner_test_modulus)
            > self.prohibited_threshold
    }
}

/// Rotate each 2-D sample by the extra rotation when its angle tests
/// prohibited; otherwise pass it through unchanged (bit-exact, so the
/// origin is a fixed point). Returns the applied rotation per sample.
pub fn polar_forward(z: &[f64], n: usize, params: PolarParams, out: &mut [f64]) -> Vec<f64> {
    let mut deltas = Vec::with_capacity(n);
    for j in 0..n {
        let (z0, z1) = (z[2 * j], z[2 * j + 1]);
        let phi = z1.atan2(z0);
        if params.is_prohibited(phi) {
            let r = z0.hypot(z1);
            let phi_new = phi + params.extra_rotation;
            out[2 * j] = r * phi_new.cos();
            out[2 * j + 1] = r * phi_new.sin();
            deltas.push(params.extra_rotation);
        } else {
            out[2 * j] = z0;
            out[2 * j + 1] = z1;
            deltas.push(0.0);
        }
    }
    deltas
}

/// The transform is locally a fixed rotation, so the Jacobian transpose is
/// the inverse rotation.
pub fn polar_backward(deltas: &[f64], gout: &[f64], gin: &mut [f64]) {
    for (j, &d) in deltas.iter().enumerate() {
        let (g0, g1) = (gout[2 * j], gout[2 * j + 1]);
        if d == 0.0 {
            gin[2 * j] += g0;
            gin[2 * j + 1] += g1;
        } else {
            let (s, c) = d.sin_cos();
            gin[2 * j] += c * g0 + s * g1;
            gin[2 * j + 1] += -s * g0 + c * g1;
        }
    }
}
