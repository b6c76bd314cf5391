//! Convolution, batch normalization, pooling and dense layers.
//!
//! Each layer has an `infer` path that leaves the layer untouched and a
//! `forward` path that caches what `backward` needs. `backward` takes the
//! gradient w.r.t. the layer output, accumulates parameter gradients and
//! returns the gradient w.r.t. the input.

use rand::Rng;

use crate::param::{join, Module, Param};
use crate::tensor::{gemm, Tensor};
use crate::NnError;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, k, k]`
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Self {
        assert!(in_channels > 0 && out_channels > 0 && kernel > 0 && stride > 0);
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::he(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: Param::filled(&[out_channels], 0.0, true),
            input: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize), NnError> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(NnError::Shape(format!("{h}×{w} input is smaller than a {k}×{k} kernel")));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let plane = oh * ow;
        for c in 0..self.in_channels {
            let src = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let line = &src[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { line[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let plane = oh * ow;
        for c in 0..self.in_channels {
            let dst = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor, NnError> {
        if x.channels() != self.in_channels {
            return Err(NnError::Shape(format!("conv expects {} channels, got {}", self.in_channels, x.channels())));
        }
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = self.output_hw(h, w)?;
        let plane = oh * ow;
        let kk = self.patch_len();
        let mut out = Tensor::zeros([x.batch(), self.out_channels, oh, ow]);
        let mut cols = if self.pointwise() { Vec::new() } else { vec![0.0; kk * plane] };
        for n in 0..x.batch() {
            let src: &[f32] = if self.pointwise() {
                x.item(n)
            } else {
                self.im2col(x.item(n), h, w, oh, ow, &mut cols);
                &cols
            };
            let dst = out.item_mut(n);
            for (o, b) in self.bias.value.iter().enumerate() {
                dst[o * plane..(o + 1) * plane].fill(*b);
            }
            gemm(self.out_channels, kk, plane, &self.weight.value, (kk, 1), src, (plane, 1), 1.0, dst, plane);
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor, NnError> {
        let y = self.infer(x)?;
        self.input = train.then(|| x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.input.take().expect("conv backward without a training forward");
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = (dy.height(), dy.width());
        let plane = oh * ow;
        let kk = self.patch_len();
        let mut dx = Tensor::zeros(x.shape());
        let mut cols = if self.pointwise() { Vec::new() } else { vec![0.0; kk * plane] };
        let mut dcols = vec![0.0; kk * plane];
        for n in 0..x.batch() {
            let g = dy.item(n);
            for o in 0..self.out_channels {
                self.bias.grad[o] += g[o * plane..(o + 1) * plane].iter().sum::<f32>();
            }
            let src: &[f32] = if self.pointwise() {
                x.item(n)
            } else {
                self.im2col(x.item(n), h, w, oh, ow, &mut cols);
                &cols
            };
            // dW += dY · colsᵀ
            gemm(self.out_channels, plane, kk, g, (plane, 1), src, (1, plane), 1.0, &mut self.weight.grad, kk);
            if self.pointwise() {
                gemm(kk, self.out_channels, plane, &self.weight.value, (1, kk), g, (plane, 1), 0.0, dx.item_mut(n), plane);
            } else {
                gemm(kk, self.out_channels, plane, &self.weight.value, (1, kk), g, (plane, 1), 0.0, &mut dcols, plane);
                self.col2im(&dcols, h, w, oh, ow, dx.item_mut(n));
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

/// Per-channel batch normalization over `N×H×W`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f32,
    pub epsilon: f32,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::filled(&[channels], 1.0, true),
            beta: Param::filled(&[channels], 0.0, true),
            running_mean: Param::filled(&[channels], 0.0, false),
            running_var: Param::filled(&[channels], 1.0, false),
            momentum: 0.9,
            epsilon: 1e-3,
            cache: None,
        }
    }

    fn check(&self, x: &Tensor) -> Result<(), NnError> {
        if x.channels() != self.channels {
            return Err(NnError::Shape(format!("batch norm expects {} channels, got {}", self.channels, x.channels())));
        }
        Ok(())
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.check(x)?;
        let plane = x.height() * x.width();
        let mut y = x.clone();
        for n in 0..x.batch() {
            let item = y.item_mut(n);
            for c in 0..self.channels {
                let scale = self.gamma.value[c] / (self.running_var.value[c] + self.epsilon).sqrt();
                let shift = self.beta.value[c] - self.running_mean.value[c] * scale;
                item[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        Ok(y)
    }

    /// Training mode normalizes with batch statistics and updates the
    /// running averages.
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor, NnError> {
        if !train {
            self.cache = None;
            return self.infer(x);
        }
        self.check(x)?;
        let plane = x.height() * x.width();
        let count = (x.batch() * plane) as f64;
        let mut y = Tensor::zeros(x.shape());
        let mut xhat = vec![0.0f32; x.data().len()];
        let mut inv_std = vec![0.0f32; self.channels];
        for c in 0..self.channels {
            let (mut sum, mut sq) = (0.0f64, 0.0f64);
            for n in 0..x.batch() {
                for &v in &x.item(n)[c * plane..(c + 1) * plane] {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
            }
            let mean = sum / count;
            let var = (sq / count - mean * mean).max(0.0);
            let istd = 1.0 / (var + self.epsilon as f64).sqrt();
            inv_std[c] = istd as f32;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            for n in 0..x.batch() {
                let off = n * x.item_len() + c * plane;
                for i in off..off + plane {
                    let h = ((x.data()[i] as f64 - mean) * istd) as f32;
                    xhat[i] = h;
                    y.data_mut()[i] = g * h + b;
                }
            }
            let m = self.momentum;
            self.running_mean.value[c] = m * self.running_mean.value[c] + (1.0 - m) * mean as f32;
            self.running_var.value[c] = m * self.running_var.value[c] + (1.0 - m) * var as f32;
        }
        self.cache = Some(BnCache { xhat, inv_std });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let BnCache { xhat, inv_std } = self.cache.take().expect("batch norm backward without a training forward");
        let plane = dy.height() * dy.width();
        let count = (dy.batch() * plane) as f32;
        let mut dx = Tensor::zeros(dy.shape());
        for c in 0..self.channels {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
            for n in 0..dy.batch() {
                let off = n * dy.item_len() + c * plane;
                for i in off..off + plane {
                    sum_dy += dy.data()[i] as f64;
                    sum_dy_xhat += (dy.data()[i] * xhat[i]) as f64;
                }
            }
            self.gamma.grad[c] += sum_dy_xhat as f32;
            self.beta.grad[c] += sum_dy as f32;
            let g = self.gamma.value[c];
            let k = g * inv_std[c] / count;
            let (sd, sdx) = (sum_dy as f32, sum_dy_xhat as f32);
            for n in 0..dy.batch() {
                let off = n * dy.item_len() + c * plane;
                for i in off..off + plane {
                    dx.data_mut()[i] = k * (count * dy.data()[i] - sd - xhat[i] * sdx);
                }
            }
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

pub fn relu(x: &mut Tensor) {
    x.map_inplace(|v| v.max(0.0));
}

/// Masks `dy` where the rectified output `y` is zero.
pub fn relu_backward(dy: &mut Tensor, y: &Tensor) {
    for (g, &v) in dy.data_mut().iter_mut().zip(y.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let plane = x.height() * x.width();
    let mut out = Tensor::zeros([x.batch(), x.channels(), 1, 1]);
    for (o, chunk) in out.data_mut().iter_mut().zip(x.data().chunks(plane)) {
        *o = chunk.iter().sum::<f32>() / plane as f32;
    }
    out
}

pub fn global_avg_pool_backward(dy: &Tensor, input_shape: [usize; 4]) -> Tensor {
    let plane = input_shape[2] * input_shape[3];
    let mut dx = Tensor::zeros(input_shape);
    for (chunk, &g) in dx.data_mut().chunks_mut(plane).zip(dy.data()) {
        chunk.fill(g / plane as f32);
    }
    dx
}

/// Fully connected layer over `N×F×1×1` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::he(&[out_features, in_features], in_features, rng),
            bias: Param::filled(&[out_features], 0.0, true),
            input: None,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor, NnError> {
        if x.item_len() != self.in_features {
            return Err(NnError::Shape(format!("linear expects {} features, got {}", self.in_features, x.item_len())));
        }
        let n = x.batch();
        let mut y = Tensor::zeros([n, self.out_features, 1, 1]);
        for row in y.data_mut().chunks_mut(self.out_features) {
            row.copy_from_slice(&self.bias.value);
        }
        let (i, o) = (self.in_features, self.out_features);
        gemm(n, i, o, x.data(), (i, 1), &self.weight.value, (1, i), 1.0, y.data_mut(), o);
        Ok(y)
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor, NnError> {
        let y = self.infer(x)?;
        self.input = train.then(|| x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.input.take().expect("linear backward without a training forward");
        let (n, i, o) = (x.batch(), self.in_features, self.out_features);
        for row in dy.data().chunks(o) {
            for (b, g) in self.bias.grad.iter_mut().zip(row) {
                *b += g;
            }
        }
        gemm(o, n, i, dy.data(), (1, o), x.data(), (i, 1), 1.0, &mut self.weight.grad, i);
        let mut dx = Tensor::zeros(x.shape());
        gemm(n, o, i, dy.data(), (o, 1), &self.weight.value, (i, 1), 0.0, dx.data_mut(), i);
        dx
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// One convolution section: conv, batch norm, optional rectifier.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
    output: Option<Tensor>,
}

impl ConvBn {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, relu: bool, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(in_channels, out_channels, kernel, stride, kernel / 2, rng),
            bn: BatchNorm2d::new(out_channels),
            relu,
            output: None,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let mut y = self.bn.infer(&self.conv.infer(x)?)?;
        if self.relu {
            relu(&mut y);
        }
        Ok(y)
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor, NnError> {
        let h = self.conv.forward(x, train)?;
        let mut y = self.bn.forward(&h, train)?;
        if self.relu {
            relu(&mut y);
        }
        self.output = (train && self.relu).then(|| y.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut g = dy.clone();
        if let Some(y) = self.output.take() {
            relu_backward(&mut g, &y);
        }
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }
}

impl Module for ConvBn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    pub(crate) fn random_tensor(shape: [usize; 4], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    /// Scalar objective `Σ r·y` for a fixed random `r`, so `dL/dy = r`.
    fn objective(y: &Tensor, r: &Tensor) -> f64 {
        y.data().iter().zip(r.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
    }

    /// Central differences through `f` against the analytic input gradient.
    pub(crate) fn check_input_grad(x: &Tensor, r: &Tensor, dx: &Tensor, mut f: impl FnMut(&Tensor) -> Tensor, tol: f64) {
        let h = 1e-2f32;
        for i in (0..x.data().len()).step_by(x.data().len().div_ceil(40)) {
            let mut up = x.clone();
            let mut dn = x.clone();
            up.data_mut()[i] += h;
            dn.data_mut()[i] -= h;
            let fd = (objective(&f(&up), r) - objective(&f(&dn), r)) / (2.0 * h as f64);
            let an = dx.data()[i] as f64;
            assert!((fd - an).abs() <= tol * fd.abs().max(an.abs()).max(1.0), "i={i}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut r = rng();
        let conv = Conv2d::new(2, 3, 3, 2, 1, &mut r);
        let x = random_tensor([2, 2, 5, 4], &mut r);
        let y = conv.infer(&x).unwrap();
        assert_eq!(y.shape(), [2, 3, 3, 2]);
        for n in 0..2 {
            for o in 0..3 {
                for oy in 0..3 {
                    for ox in 0..2 {
                        let mut acc = conv.bias.value[o] as f64;
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 4 {
                                        let xv = x.item(n)[c * 20 + iy as usize * 4 + ix as usize] as f64;
                                        acc += xv * conv.weight.value[((o * 2 + c) * 3 + ky) * 3 + kx] as f64;
                                    }
                                }
                            }
                        }
                        let got = y.item(n)[o * 6 + oy * 2 + ox] as f64;
                        assert!((got - acc).abs() < 1e-5, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn stride_two_halves_rounding_up() {
        let mut r = rng();
        for (k, p) in [(1, 0), (3, 1)] {
            let conv = Conv2d::new(1, 1, k, 2, p, &mut r);
            for h in 1..12 {
                assert_eq!(conv.output_hw(h, h).unwrap(), (h.div_ceil(2), h.div_ceil(2)));
            }
        }
    }

    #[test]
    fn conv_gradients() {
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0)] {
            let mut r = rng();
            let mut conv = Conv2d::new(3, 4, k, s, p, &mut r);
            let x = random_tensor([2, 3, 5, 5], &mut r);
            let y = conv.forward(&x, true).unwrap();
            let g = random_tensor(y.shape(), &mut r);
            let dx = conv.backward(&g);
            let frozen = conv.clone();
            check_input_grad(&x, &g, &dx, |t| frozen.infer(t).unwrap(), 1e-2);
            // weight gradient against differences on one weight
            for wi in [0, 7, conv.weight.len() - 1] {
                let h = 1e-2;
                let mut up = frozen.clone();
                let mut dn = frozen.clone();
                up.weight.value[wi] += h;
                dn.weight.value[wi] -= h;
                let fd = (objective(&up.infer(&x).unwrap(), &g) - objective(&dn.infer(&x).unwrap(), &g)) / (2.0 * h as f64);
                let an = conv.weight.grad[wi] as f64;
                assert!((fd - an).abs() < 1e-2 * fd.abs().max(1.0), "{fd} vs {an}");
            }
            let bias_sum: f32 = g.data().chunks(y.height() * y.width()).enumerate().filter(|(i, _)| i % 4 == 1).flat_map(|(_, c)| c).sum();
            assert!((conv.bias.grad[1] - bias_sum).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_norm_gradients() {
        let mut r = rng();
        let mut bn = BatchNorm2d::new(3);
        bn.gamma.value = vec![0.5, 1.5, -1.0];
        bn.beta.value = vec![0.1, 0.0, 0.3];
        let x = random_tensor([4, 3, 3, 2], &mut r);
        let y = bn.forward(&x, true).unwrap();
        let g = random_tensor(y.shape(), &mut r);
        let dx = bn.backward(&g);
        let fresh = bn.clone();
        check_input_grad(&x, &g, &dx, |t| fresh.clone().forward(t, true).unwrap(), 2e-2);
    }

    #[test]
    fn batch_norm_training_output_is_standardized() {
        let mut r = rng();
        let mut bn = BatchNorm2d::new(2);
        let x = random_tensor([8, 2, 4, 4], &mut r);
        let y = bn.forward(&x, true).unwrap();
        for c in 0..2 {
            let vals: Vec<f32> = (0..8).flat_map(|n| y.item(n)[c * 16..(c + 1) * 16].to_vec()).collect();
            let mean = vals.iter().sum::<f32>() / vals.len() as f32;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / vals.len() as f32;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 2e-2);
        }
    }

    #[test]
    fn linear_gradients() {
        let mut r = rng();
        let mut lin = Linear::new(5, 3, &mut r);
        let x = random_tensor([4, 5, 1, 1], &mut r);
        let y = lin.forward(&x, true).unwrap();
        let g = random_tensor(y.shape(), &mut r);
        let dx = lin.backward(&g);
        let frozen = lin.clone();
        check_input_grad(&x, &g, &dx, |t| frozen.infer(t).unwrap(), 1e-2);
        // dW[o][i] = Σ_n g[n][o] x[n][i]
        let want: f32 = (0..4).map(|n| g.data()[n * 3 + 2] * x.data()[n * 5 + 1]).sum();
        assert!((lin.weight.grad[2 * 5 + 1] - want).abs() < 1e-5);
    }

    #[test]
    fn pooling_round_trip() {
        let x = Tensor::from_vec([1, 2, 2, 1], vec![1.0, 3.0, -2.0, 4.0]).unwrap();
        let y = global_avg_pool(&x);
        assert_eq!(y.data(), &[2.0, 1.0]);
        let dx = global_avg_pool_backward(&Tensor::from_vec([1, 2, 1, 1], vec![1.0, -2.0]).unwrap(), x.shape());
        assert_eq!(dx.data(), &[0.5, 0.5, -1.0, -1.0]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut r = rng();
        let conv = Conv2d::new(3, 4, 3, 1, 1, &mut r);
        assert!(conv.infer(&Tensor::zeros([1, 2, 4, 4])).is_err());
        assert!(BatchNorm2d::new(3).infer(&Tensor::zeros([1, 2, 4, 4])).is_err());
    }
}
