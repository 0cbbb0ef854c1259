use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// Row-major single precision GEMM: `c = a·b + beta·c` with optional transposes.
///
/// `a` is logically `m×k`, `b` is `k×n`, `c` is `m×n`. A transposed operand is
/// stored in its untransposed layout (`k×m` for `a`, `n×k` for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover every element addressed by the given strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
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

/// Gradient buffers for one weight/bias pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ParamGrad {
    pub fn zeros(weights: usize, biases: usize) -> Self {
        Self {
            weight: vec![0.0; weights],
            bias: vec![0.0; biases],
        }
    }

    pub fn clear(&mut self) {
        self.weight.iter_mut().for_each(|v| *v = 0.0);
        self.bias.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn scale(&mut self, s: f32) {
        self.weight.iter_mut().for_each(|v| *v *= s);
        self.bias.iter_mut().for_each(|v| *v *= s);
    }
}

fn fan_in_uniform<R: Rng + ?Sized>(n: usize, fan_in: usize, rng: &mut R) -> Vec<f32> {
    let bound = (6.0 / fan_in as f32).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// 2-D convolution over square kernels with symmetric zero padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[out_ch, in_ch, kernel, kernel]`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight: fan_in_uniform(out_ch * fan_in, fan_in, rng),
            bias: vec![0.0; out_ch],
        }
    }

    pub fn zeroed(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight: vec![0.0; out_ch * in_ch * kernel * kernel],
            bias: vec![0.0; out_ch],
        }
    }

    pub fn grad_buffer(&self) -> ParamGrad {
        ParamGrad::zeros(self.weight.len(), self.bias.len())
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, cols: &mut [f32]) {
        let (oh, ow) = self.output_hw(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.pad as isize);
        let n = oh * ow;
        for c in 0..self.in_ch {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * n..][..n];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        if s == 1 {
                            // valid columns form one contiguous run
                            let off = kx as isize - p;
                            let lo = (-off).clamp(0, ow as isize) as usize;
                            let hi = (w as isize - off).clamp(0, ow as isize) as usize;
                            dst[..lo].iter_mut().for_each(|v| *v = 0.0);
                            if hi > lo {
                                let start = (lo as isize + off) as usize;
                                dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                            }
                            dst[hi.max(lo)..].iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            *d = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, dx: &mut [f32]) {
        let (oh, ow) = self.output_hw(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.pad as isize);
        let n = oh * ow;
        for c in 0..self.in_ch {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * n..][..n];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src = &row[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let off = kx as isize - p;
                            let lo = (-off).clamp(0, ow as isize) as usize;
                            let hi = (w as isize - off).clamp(0, ow as isize) as usize;
                            if hi > lo {
                                let start = (lo as isize + off) as usize;
                                for (d, v) in dst[start..start + hi - lo].iter_mut().zip(&src[lo..hi]) {
                                    *d += v;
                                }
                            }
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let [b, c, h, w] = x.shape();
        assert_eq!(c, self.in_ch, "conv input channel mismatch");
        let (oh, ow) = self.output_hw(h, w);
        let n = oh * ow;
        let kdim = self.in_ch * self.kernel * self.kernel;
        let mut out = Tensor::zeros([b, self.out_ch, oh, ow]);
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![0.0; kdim * n] };
        for i in 0..b {
            let y = out.item_mut(i);
            for (oc, bias) in self.bias.iter().enumerate() {
                y[oc * n..(oc + 1) * n].iter_mut().for_each(|v| *v = *bias);
            }
            let src: &[f32] = if self.is_pointwise() {
                x.item(i)
            } else {
                self.im2col(x.item(i), h, w, &mut cols);
                &cols
            };
            gemm(self.out_ch, kdim, n, &self.weight, false, src, false, 1.0, y);
        }
        out
    }

    /// Back-propagate `dy` through the convolution applied to `x`.
    ///
    /// Parameter gradients are accumulated into `grad` when given; the input
    /// gradient is only computed when `want_dx` is set.
    pub fn backward(
        &self,
        x: &Tensor,
        dy: &Tensor,
        mut grad: Option<&mut ParamGrad>,
        want_dx: bool,
    ) -> Option<Tensor> {
        let [b, _, h, w] = x.shape();
        let (oh, ow) = self.output_hw(h, w);
        let n = oh * ow;
        debug_assert_eq!(dy.shape(), [b, self.out_ch, oh, ow]);
        let kdim = self.in_ch * self.kernel * self.kernel;
        let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![0.0; kdim * n] };
        let mut dcols = if want_dx && !self.is_pointwise() { vec![0.0; kdim * n] } else { Vec::new() };
        for i in 0..b {
            let g = dy.item(i);
            if let Some(pg) = grad.as_deref_mut() {
                let src: &[f32] = if self.is_pointwise() {
                    x.item(i)
                } else {
                    self.im2col(x.item(i), h, w, &mut cols);
                    &cols
                };
                gemm(self.out_ch, n, kdim, g, false, src, true, 1.0, &mut pg.weight);
                for (oc, gb) in pg.bias.iter_mut().enumerate() {
                    *gb += g[oc * n..(oc + 1) * n].iter().sum::<f32>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                if self.is_pointwise() {
                    gemm(kdim, self.out_ch, n, &self.weight, true, g, false, 0.0, dx.item_mut(i));
                } else {
                    gemm(kdim, self.out_ch, n, &self.weight, true, g, false, 0.0, &mut dcols);
                    self.col2im(&dcols, h, w, dx.item_mut(i));
                }
            }
        }
        dx
    }
}

/// Fully connected layer; `weight` is `[out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: fan_in_uniform(in_dim * out_dim, in_dim, rng),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn grad_buffer(&self) -> ParamGrad {
        ParamGrad::zeros(self.weight.len(), self.bias.len())
    }

    /// `x` is `[batch, in_dim]` flattened; returns `[batch, out_dim]`.
    pub fn forward(&self, x: &[f32], batch: usize) -> Vec<f32> {
        debug_assert_eq!(x.len(), batch * self.in_dim);
        let mut y = Vec::with_capacity(batch * self.out_dim);
        for _ in 0..batch {
            y.extend_from_slice(&self.bias);
        }
        gemm(batch, self.in_dim, self.out_dim, x, false, &self.weight, true, 1.0, &mut y);
        y
    }

    pub fn backward(
        &self,
        x: &[f32],
        dy: &[f32],
        batch: usize,
        grad: Option<&mut ParamGrad>,
        want_dx: bool,
    ) -> Option<Vec<f32>> {
        if let Some(pg) = grad {
            gemm(self.out_dim, batch, self.in_dim, dy, true, x, false, 1.0, &mut pg.weight);
            for row in dy.chunks_exact(self.out_dim) {
                for (gb, d) in pg.bias.iter_mut().zip(row) {
                    *gb += d;
                }
            }
        }
        want_dx.then(|| {
            let mut dx = vec![0.0; batch * self.in_dim];
            gemm(batch, self.out_dim, self.in_dim, dy, false, &self.weight, false, 0.0, &mut dx);
            dx
        })
    }
}

pub fn relu(x: &mut Tensor) {
    x.map_inplace(|v| v.max(0.0));
}

pub fn leaky_relu(x: &mut Tensor, slope: f32) {
    x.map_inplace(|v| if v > 0.0 { v } else { v * slope });
}

pub fn sigmoid(x: &mut Tensor) {
    x.map_inplace(sigmoid_scalar);
}

pub fn sigmoid_scalar(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Mask `dy` by the derivative of a (leaky) ReLU whose output was `y`.
pub fn leaky_relu_backward(y: &[f32], dy: &mut [f32], slope: f32) {
    for (g, &out) in dy.iter_mut().zip(y) {
        if out <= 0.0 {
            *g *= slope;
        }
    }
}

pub fn sigmoid_backward(y: &[f32], dy: &mut [f32]) {
    for (g, &out) in dy.iter_mut().zip(y) {
        *g *= out * (1.0 - out);
    }
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, per output
/// element, the flat in-item index of the winning input.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let [b, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([b, c, oh, ow]);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for i in 0..b {
        let src = x.item(i);
        let dst = out.item_mut(i);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ch * h * w + 2 * oy * w + 2 * ox;
                    let mut best = base;
                    for idx in [base + 1, base + w, base + w + 1] {
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    dst[(ch * oh + oy) * ow + ox] = src[best];
                    arg.push(best as u32);
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(input_shape: [usize; 4], arg: &[u32], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let per_out = dy.item_len();
    for i in 0..input_shape[0] {
        let g = dy.item(i);
        let d = dx.item_mut(i);
        for (j, &src) in arg[i * per_out..(i + 1) * per_out].iter().enumerate() {
            d[src as usize] += g[j];
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let [b, c, h, w] = x.shape();
    let mut out = Tensor::zeros([b, c, 2 * h, 2 * w]);
    for i in 0..b {
        let src = x.item(i);
        let dst = out.item_mut(i);
        for ch in 0..c {
            for y in 0..2 * h {
                let srow = &src[(ch * h + y / 2) * w..][..w];
                let drow = &mut dst[(ch * 2 * h + y) * 2 * w..][..2 * w];
                for (x2, d) in drow.iter_mut().enumerate() {
                    *d = srow[x2 / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let [b, c, h2, w2] = dy.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros([b, c, h, w]);
    for i in 0..b {
        let g = dy.item(i);
        let d = dx.item_mut(i);
        for ch in 0..c {
            for y in 0..h2 {
                for x2 in 0..w2 {
                    d[(ch * h + y / 2) * w + x2 / 2] += g[(ch * h2 + y) * w2 + x2];
                }
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]` per batch item.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
    let mut out = Tensor::zeros([n, ca + cb, h, w]);
    for i in 0..n {
        let dst = out.item_mut(i);
        dst[..a.item_len()].copy_from_slice(a.item(i));
        dst[a.item_len()..].copy_from_slice(b.item(i));
    }
    out
}

/// Inverse of [`concat_channels`] for gradients: the first `ca` channels go left.
pub fn split_channels(d: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let [n, c, h, w] = d.shape();
    let mut left = Tensor::zeros([n, ca, h, w]);
    let mut right = Tensor::zeros([n, c - ca, h, w]);
    let cut = ca * h * w;
    for i in 0..n {
        left.item_mut(i).copy_from_slice(&d.item(i)[..cut]);
        right.item_mut(i).copy_from_slice(&d.item(i)[cut..]);
    }
    (left, right)
}

/// Row-wise softmax over `classes`-wide rows.
pub fn softmax_rows(logits: &[f32], classes: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let start = out.len();
        let mut sum = 0.0;
        for &z in row {
            let e = (z - max).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Chain rule through softmax: given `dL/dp` per row, return `dL/dz`.
pub fn softmax_backward(probs: &[f32], dprobs: &[f32], classes: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(probs.len());
    for (p, g) in probs.chunks_exact(classes).zip(dprobs.chunks_exact(classes)) {
        let dot: f32 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        out.extend(p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let [b, _, h, w] = x.shape();
        let (oh, ow) = conv.output_hw(h, w);
        let k = conv.kernel;
        let mut out = Tensor::zeros([b, conv.out_ch, oh, ow]);
        for i in 0..b {
            for oc in 0..conv.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias[oc] as f64;
                        for ic in 0..conv.in_ch {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight[((oc * conv.in_ch + ic) * k + ky) * k + kx];
                                    let xv = x.item(i)[(ic * h + iy as usize) * w + ix as usize];
                                    acc += (wv * xv) as f64;
                                }
                            }
                        }
                        out.item_mut(i)[(oc * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let mut conv = Conv2d::new(3, 5, k, s, p, &mut rng);
            conv.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
            let x = random_tensor([2, 3, 8, 8], &mut rng);
            let fast = conv.forward(&x);
            let slow = naive_conv(&conv, &x);
            assert!(fast.max_abs_diff(&slow) < 1e-5, "k={k} s={s} p={p}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let conv = Conv2d::new(2, 3, k, s, p, &mut rng);
            let x = random_tensor([1, 2, 6, 6], &mut rng);
            let y = conv.forward(&x);
            let r = random_tensor(y.shape(), &mut rng);
            // loss = <r, conv(x)>
            let loss = |c: &Conv2d, x: &Tensor| -> f64 {
                c.forward(x).data().iter().zip(r.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
            };
            let mut g = conv.grad_buffer();
            let dx = conv.backward(&x, &r, Some(&mut g), true).unwrap();
            let h = 1e-2f32;
            for idx in [0, 5, g.weight.len() - 1] {
                let mut cp = conv.clone();
                cp.weight[idx] += h;
                let up = loss(&cp, &x);
                cp.weight[idx] -= 2.0 * h;
                let down = loss(&cp, &x);
                let fd = (up - down) / (2.0 * h as f64);
                assert!((fd - g.weight[idx] as f64).abs() < 1e-3, "weight {idx}: {fd} vs {}", g.weight[idx]);
            }
            for idx in [0, 13, x.data().len() - 1] {
                let mut xp = x.clone();
                xp.data_mut()[idx] += h;
                let up = loss(&conv, &xp);
                xp.data_mut()[idx] -= 2.0 * h;
                let down = loss(&conv, &xp);
                let fd = (up - down) / (2.0 * h as f64);
                assert!((fd - dx.data()[idx] as f64).abs() < 1e-3, "input {idx}");
            }
        }
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = Dense::new(4, 3, &mut rng);
        let x: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |d: &Dense, x: &[f32]| -> f64 {
            d.forward(x, 2).iter().zip(&r).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let mut g = d.grad_buffer();
        let dx = d.backward(&x, &r, 2, Some(&mut g), true).unwrap();
        let h = 1e-2;
        for idx in 0..d.weight.len() {
            let mut cp = d.clone();
            cp.weight[idx] += h;
            let up = loss(&cp, &x);
            cp.weight[idx] -= 2.0 * h;
            let fd = (up - loss(&cp, &x)) / (2.0 * h as f64);
            assert!((fd - g.weight[idx] as f64).abs() < 1e-3);
        }
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp[idx] += h;
            let up = loss(&d, &xp);
            xp[idx] -= 2.0 * h;
            let fd = (up - loss(&d, &xp)) / (2.0 * h as f64);
            assert!((fd - dx[idx] as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn upsample_and_pool_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor([2, 3, 4, 4], &mut rng);
        let up = upsample2(&x);
        assert_eq!(up.shape(), [2, 3, 8, 8]);
        let (pooled, arg) = maxpool2(&up);
        assert_eq!(pooled, x);
        let back = maxpool2_backward(up.shape(), &arg, &pooled);
        assert_eq!(back.data().iter().filter(|v| **v != 0.0).count(), x.data().iter().filter(|v| **v != 0.0).count());
        // upsample backward sums each 2×2 block
        let ones = Tensor::from_vec(up.shape(), vec![1.0; up.data().len()]);
        assert!(upsample2_backward(&ones).data().iter().all(|v| *v == 4.0));
    }

    #[test]
    fn softmax_rows_normalize() {
        let p = softmax_rows(&[0.0, 0.0, 0.0, 1000.0, -1000.0, 0.0], 3);
        assert!((p[..3].iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-6);
        assert!((p[3] - 1.0).abs() < 1e-6);
    }
}
