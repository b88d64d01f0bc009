//! Dense `f64` tensors and the handful of layer kernels the network needs.
//!
//! Every forward op has a matching backward that maps an upstream gradient
//! onto its inputs. Ops are pure: they never mutate their arguments, and the
//! only source of randomness (dropout) is an explicit generator argument.

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major n-dimensional array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", format!("zero-sized axis in shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} holds {len} elements, data has {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized axis in {shape:?}");
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rounds every element through `f32`, the precision used on disk.
    pub fn quantized(&self) -> Tensor {
        self.map(|x| x as f32 as f64)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_shape(other.shape(), "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub(crate) fn expect_shape(&self, shape: &[usize], context: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::dim(context, format!("expected {shape:?}, got {:?}", self.shape)));
        }
        Ok(())
    }

    fn expect_rank(&self, rank: usize, context: &str) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::dim(
                context,
                format!("expected rank {rank}, got shape {:?}", self.shape),
            ));
        }
        Ok(())
    }

    fn chw(&self, context: &str) -> Result<(usize, usize, usize)> {
        self.expect_rank(3, context)?;
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    /// Square kernel, stride 1, "same" padding: the VGG convolution.
    pub fn same3x3(in_channels: usize, out_channels: usize) -> Self {
        Self { kernel_h: 3, kernel_w: 3, in_channels, out_channels, stride: 1, padding: Padding::Same }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 {
            return Err(Error::param(format!("conv spec needs kernel and stride >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Output length and leading pad along one axis.
    fn axis(&self, len: usize, kernel: usize, axis: &str) -> Result<(usize, usize)> {
        match self.padding {
            Padding::Same => {
                let out = len.div_ceil(self.stride);
                let total = ((out - 1) * self.stride + kernel).saturating_sub(len);
                Ok((out, total / 2))
            }
            Padding::Valid => {
                if len < kernel {
                    return Err(Error::dim(
                        "conv2d",
                        format!("{axis} extent {len} smaller than kernel {kernel} with valid padding"),
                    ));
                }
                Ok(((len - kernel) / self.stride + 1, 0))
            }
        }
    }
}

/// Precomputed geometry shared by the forward and backward convolution loops.
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
    stride: usize,
}

impl ConvGeometry {
    fn new(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        let (c, h, w) = input.chw("conv2d input")?;
        weights.expect_shape(&spec.weight_shape(), "conv2d weights")?;
        bias.expect_shape(&[spec.out_channels], "conv2d bias")?;
        if c != spec.in_channels {
            return Err(Error::dim(
                "conv2d",
                format!("input channels {c} (axis 0) != weight in_channels {} (axis 1)", spec.in_channels),
            ));
        }
        let (oh, pad_top) = spec.axis(h, spec.kernel_h, "height")?;
        let (ow, pad_left) = spec.axis(w, spec.kernel_w, "width")?;
        Ok(Self {
            c,
            h,
            w,
            k: spec.out_channels,
            kh: spec.kernel_h,
            kw: spec.kernel_w,
            oh,
            ow,
            pad_top,
            pad_left,
            stride: spec.stride,
        })
    }

    /// Output coordinates `o` whose source `o*stride + tap - pad` lands in `[0, len)`.
    fn valid_range(&self, tap: usize, pad: usize, len: usize, out_len: usize) -> std::ops::Range<usize> {
        let s = self.stride;
        // o*s + tap >= pad
        let lo = if pad > tap { (pad - tap).div_ceil(s) } else { 0 };
        // o*s + tap - pad <= len - 1
        let hi_num = len + pad - tap; // exclusive bound on o*s + 1
        let hi = if len + pad > tap { (hi_num - 1) / s + 1 } else { 0 };
        lo.min(out_len)..hi.min(out_len)
    }
}

/// 2-D cross-correlation over a `[C, H, W]` input.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let g = ConvGeometry::new(input, weights, bias, spec)?;
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.k * plane];
    let x = input.data();
    let wt = weights.data();
    for k in 0..g.k {
        let out_k = &mut out[k * plane..(k + 1) * plane];
        out_k.iter_mut().for_each(|v| *v = bias.data[k]);
        for c in 0..g.c {
            let x_c = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let rows = g.valid_range(ky, g.pad_top, g.h, g.oh);
                for kx in 0..g.kw {
                    let wv = wt[((k * g.c + c) * g.kh + ky) * g.kw + kx];
                    let cols = g.valid_range(kx, g.pad_left, g.w, g.ow);
                    for oy in rows.clone() {
                        let iy = oy * g.stride + ky - g.pad_top;
                        let x_row = &x_c[iy * g.w..(iy + 1) * g.w];
                        let o_row = &mut out_k[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let shift = kx as isize - g.pad_left as isize;
                            let src = &x_row[(cols.start as isize + shift) as usize
                                ..(cols.end as isize + shift) as usize];
                            for (o, &xv) in o_row[cols.clone()].iter_mut().zip(src) {
                                *o += wv * xv;
                            }
                        } else {
                            for ox in cols.clone() {
                                o_row[ox] += wv * x_row[ox * g.stride + kx - g.pad_left];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.k, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] with respect to its three inputs.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    conv2d_backward_with(input, weights, bias, spec, grad_out, true)
}

/// Like [`conv2d_backward`], optionally skipping the input gradient (first
/// layer, or the layer just above a frozen prefix).
pub fn conv2d_backward_with(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input, weights, bias, spec)?;
    grad_out.expect_shape(&[g.k, g.oh, g.ow], "conv2d grad_out")?;
    let plane = g.oh * g.ow;
    let x = input.data();
    let wt = weights.data();
    let go = grad_out.data();
    let mut gx = if want_input { vec![0.0; x.len()] } else { Vec::new() };
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; g.k];
    for k in 0..g.k {
        let go_k = &go[k * plane..(k + 1) * plane];
        gb[k] = go_k.iter().sum();
        for c in 0..g.c {
            let in_plane = c * g.h * g.w..(c + 1) * g.h * g.w;
            for ky in 0..g.kh {
                let rows = g.valid_range(ky, g.pad_top, g.h, g.oh);
                for kx in 0..g.kw {
                    let widx = ((k * g.c + c) * g.kh + ky) * g.kw + kx;
                    let wv = wt[widx];
                    let cols = g.valid_range(kx, g.pad_left, g.w, g.ow);
                    let mut acc = 0.0;
                    for oy in rows.clone() {
                        let iy = oy * g.stride + ky - g.pad_top;
                        let row_off = in_plane.start + iy * g.w;
                        let go_row = &go_k[oy * g.ow..(oy + 1) * g.ow];
                        for ox in cols.clone() {
                            let ix = ox * g.stride + kx - g.pad_left;
                            acc += go_row[ox] * x[row_off + ix];
                            if want_input {
                                gx[row_off + ix] += wv * go_row[ox];
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: if want_input { Some(Tensor::new(input.shape.clone(), gx)?) } else { None },
        weights: Tensor::new(weights.shape.clone(), gw)?,
        bias: Tensor::new(vec![g.k], gb)?,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// Passes `grad_out` where the forward input was positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.expect_shape(input.shape(), "relu grad_out")?;
    let data = input
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape.clone(), data)
}

/// 2x2 max-pool output together with the flat input index of each window's maximum.
#[derive(Clone, Debug)]
pub struct PoolOutput {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

pub fn maxpool2d(input: &Tensor) -> Result<Tensor> {
    Ok(maxpool2d_with_indices(input)?.output)
}

/// 2x2 window, stride 2. Ties resolve to the first element in row-major order.
pub fn maxpool2d_with_indices(input: &Tensor) -> Result<PoolOutput> {
    let (c, h, w) = input.chw("maxpool2d")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim("maxpool2d", format!("spatial dims {h}x{w} must be even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    let x = input.data();
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(PoolOutput { output: Tensor::new(vec![c, oh, ow], out)?, argmax })
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(Error::dim(
            "maxpool2d backward",
            format!("{} upstream values for {} windows", grad_out.len(), argmax.len()),
        ));
    }
    let mut grad = Tensor::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(&grad_out.data) {
        grad.data[idx] += g;
    }
    Ok(grad)
}

/// Per-channel spatial mean, `[C, H, W] -> [C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw("global_avg_pool")?;
    let n = (h * w) as f64;
    let data = input.data.chunks_exact(h * w).map(|plane| plane.iter().sum::<f64>() / n).collect();
    Tensor::new(vec![c], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if input_shape.len() != 3 || grad_out.shape() != [input_shape[0]] {
        return Err(Error::dim(
            "global_avg_pool backward",
            format!("input {input_shape:?} vs upstream {:?}", grad_out.shape()),
        ));
    }
    let plane = input_shape[1] * input_shape[2];
    let scale = 1.0 / plane as f64;
    let data = grad_out.data.iter().flat_map(|&g| std::iter::repeat_n(g * scale, plane)).collect();
    Tensor::new(input_shape.to_vec(), data)
}

/// `W·x + b` for `x: [N]`, `W: [M, N]`, `b: [M]`.
pub fn dense_affine(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = dense_dims(input, weights, bias)?;
    let x = input.data();
    let out = (0..m)
        .map(|row| {
            let w_row = &weights.data[row * n..(row + 1) * n];
            bias.data[row] + w_row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    Tensor::new(vec![m], out)
}

#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn dense_affine_backward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
) -> Result<DenseGrads> {
    let (m, n) = dense_dims(input, weights, bias)?;
    grad_out.expect_shape(&[m], "dense_affine grad_out")?;
    let mut gx = vec![0.0; n];
    let mut gw = vec![0.0; m * n];
    for (row, &g) in grad_out.data.iter().enumerate() {
        let w_row = &weights.data[row * n..(row + 1) * n];
        let gw_row = &mut gw[row * n..(row + 1) * n];
        for j in 0..n {
            gx[j] += w_row[j] * g;
            gw_row[j] = g * input.data[j];
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(vec![n], gx)?,
        weights: Tensor::new(vec![m, n], gw)?,
        bias: grad_out.clone(),
    })
}

fn dense_dims(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    input.expect_rank(1, "dense_affine input")?;
    weights.expect_rank(2, "dense_affine weights")?;
    let (m, n) = (weights.shape[0], weights.shape[1]);
    if input.len() != n {
        return Err(Error::dim(
            "dense_affine",
            format!("input length {} != weight axis 1 ({n})", input.len()),
        ));
    }
    bias.expect_shape(&[m], "dense_affine bias")?;
    Ok((m, n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Inverted dropout. Returns the output and the per-element scale applied
/// (0 or `1/(1-rate)`), which is also the backward multiplier.
pub fn dropout_mask<R: Rng + ?Sized>(
    input: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::param(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> =
        (0..input.len()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
    let out = input.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
    Ok((Tensor::new(input.shape.clone(), out)?, Some(mask)))
}

pub fn dropout_backward(mask: Option<&[f64]>, grad_out: &Tensor) -> Tensor {
    match mask {
        None => grad_out.clone(),
        Some(mask) => Tensor {
            shape: grad_out.shape.clone(),
            data: grad_out.data.iter().zip(mask).map(|(g, m)| g * m).collect(),
        },
    }
}

/// Ordered concatenation of rank-1 tensors.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(Error::param("concat_channels needs at least one input"));
    }
    let mut data = Vec::with_capacity(inputs.iter().map(|t| t.len()).sum());
    for (i, t) in inputs.iter().enumerate() {
        t.expect_rank(1, &format!("concat_channels input {i}"))?;
        data.extend_from_slice(&t.data);
    }
    Ok(Tensor::from_vec(data))
}

/// Backward of [`concat_channels`]: splits the upstream gradient by widths.
pub fn split_channels(grad: &Tensor, widths: &[usize]) -> Result<Vec<Tensor>> {
    grad.expect_rank(1, "split_channels")?;
    if widths.iter().sum::<usize>() != grad.len() {
        return Err(Error::dim(
            "split_channels",
            format!("widths {widths:?} do not sum to {}", grad.len()),
        ));
    }
    let mut offset = 0;
    widths
        .iter()
        .map(|&w| {
            let part = Tensor::from_vec(grad.data[offset..offset + w].to_vec());
            offset += w;
            Tensor::new(vec![w], part.data)
        })
        .collect()
}

/// Central-difference check of an analytic gradient.
///
/// `f` maps a point to `(scalar, analytic gradient)`. Returns the maximum over
/// elements of `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_gradcheck<F>(mut f: F, input: &Tensor, epsilon: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    let (_, analytic) = f(input)?;
    analytic.expect_shape(input.shape(), "gradcheck analytic gradient")?;
    let mut probe = input.clone();
    let mut worst: f64 = 0.0;
    for i in 0..input.len() {
        let orig = input.data[i];
        probe.data[i] = orig + epsilon;
        let (plus, _) = f(&probe)?;
        probe.data[i] = orig - epsilon;
        let (minus, _) = f(&probe)?;
        probe.data[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic.data[i], numeric));
    }
    Ok(worst)
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Vec<f64> {
        let (c, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
        let (kh, kw, s) = (spec.kernel_h as isize, spec.kernel_w as isize, spec.stride as isize);
        let (oh, ow, pt, pl) = match spec.padding {
            Padding::Valid => (
                (h as isize - kh) / s + 1,
                (wd as isize - kw) / s + 1,
                0isize,
                0isize,
            ),
            Padding::Same => {
                let oh = (h as isize + s - 1) / s;
                let ow = (wd as isize + s - 1) / s;
                let ph = ((oh - 1) * s + kh - h as isize).max(0);
                let pw = ((ow - 1) * s + kw - wd as isize).max(0);
                (oh, ow, ph / 2, pw / 2)
            }
        };
        let mut out = Vec::new();
        for k in 0..spec.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data[k];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = oy * s + ky - pt;
                                let ix = ox * s + kx - pl;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let wi = ((k * c + ci) * kh as usize + ky as usize) * kw as usize + kx as usize;
                                let xi = (ci * h + iy as usize) * wd + ix as usize;
                                acc += w.data[wi] * x.data[xi];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_1x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 4, 5], &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for i in 0..3 {
            w.data[i * 3 + i] = 1.0;
        }
        let spec = ConvSpec { kernel_h: 1, kernel_w: 1, in_channels: 3, out_channels: 3, stride: 1, padding: Padding::Valid };
        let y = conv2d(&x, &w, &Tensor::zeros(&[3]), &spec).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_all_ones_interior_is_nine() {
        let x = Tensor::full(&[1, 5, 5], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let spec = ConvSpec { kernel_h: 3, kernel_w: 3, in_channels: 1, out_channels: 1, stride: 1, padding: Padding::Valid };
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), &spec).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));

        let same = conv2d(&x, &w, &Tensor::zeros(&[1]), &ConvSpec::same3x3(1, 1)).unwrap();
        assert_eq!(same.data()[6], 9.0);
        assert_eq!(same.data()[0], 4.0);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (stride, padding, kh, kw) in [
            (1, Padding::Same, 3, 3),
            (1, Padding::Valid, 3, 3),
            (2, Padding::Same, 3, 3),
            (2, Padding::Valid, 2, 3),
            (3, Padding::Same, 4, 2),
        ] {
            let spec = ConvSpec { kernel_h: kh, kernel_w: kw, in_channels: 2, out_channels: 3, stride, padding };
            let x = random(&[2, 5, 5], &mut rng);
            let w = random(&spec.weight_shape(), &mut rng);
            let b = random(&[3], &mut rng);
            let y = conv2d(&x, &w, &b, &spec).unwrap();
            let expect = naive_conv(&x, &w, &b, &spec);
            assert_eq!(y.len(), expect.len(), "{spec:?}");
            for (a, e) in y.data().iter().zip(&expect) {
                assert!((a - e).abs() <= 1e-12, "{spec:?}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_shape_errors_name_axes() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros(&[1]), &ConvSpec::same3x3(3, 1)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        assert!(err.to_string().contains("axis"), "{err}");
    }

    #[test]
    fn same_padding_preserves_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for h in 1..=16 {
            for w in [1, 7, 16] {
                let x = random(&[1, h, w], &mut rng);
                let y = conv2d(&x, &random(&[2, 1, 3, 3], &mut rng), &Tensor::zeros(&[2]), &ConvSpec::same3x3(1, 2)).unwrap();
                assert_eq!(y.shape(), &[2, h, w]);
            }
        }
    }

    #[test]
    fn relu_values() {
        let y = relu(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let neg = relu(&Tensor::from_vec(vec![-3.0, -0.5]));
        assert!(neg.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_values_and_errors() {
        let x = Tensor::new(vec![1, 4, 4], (1..=16).map(f64::from).collect()).unwrap();
        assert_eq!(maxpool2d(&x).unwrap().data(), &[6.0, 8.0, 14.0, 16.0]);
        let c = Tensor::full(&[2, 4, 6], 3.5);
        assert!(maxpool2d(&c).unwrap().data().iter().all(|&v| v == 3.5));
        assert!(maxpool2d(&Tensor::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let x = Tensor::full(&[1, 2, 2], 1.0);
        let pooled = maxpool2d_with_indices(&x).unwrap();
        let g = maxpool2d_backward(x.shape(), &pooled.argmax, &Tensor::from_vec(vec![5.0])).unwrap();
        assert_eq!(g.data(), &[5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gap_values() {
        let x = Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 7.0, 7.0, 7.0, 7.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5, 7.0]);
    }

    #[test]
    fn gap_matches_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[3, 5, 6], &mut rng);
        let y = global_avg_pool(&x).unwrap();
        for c in 0..3 {
            let mut sum = 0.0;
            for i in 0..5 {
                for j in 0..6 {
                    sum += x.data[(c * 5 + i) * 6 + j];
                }
            }
            assert!((y.data[c] - sum / 30.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn dense_identity_and_zero() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data[i * 4] = 1.0;
        }
        assert_eq!(dense_affine(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);
        let b = Tensor::from_vec(vec![0.5, 0.25]);
        assert_eq!(dense_affine(&x, &Tensor::zeros(&[2, 3]), &b).unwrap(), b);
        assert!(dense_affine(&x, &Tensor::zeros(&[2, 4]), &b).is_err());
    }

    #[test]
    fn dropout_identities_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&[10], &mut rng);
        assert_eq!(dropout_mask(&x, 0.0, Mode::Train, &mut rng).unwrap().0, x);
        assert_eq!(dropout_mask(&x, 0.9, Mode::Infer, &mut rng).unwrap().0, x);
        assert!(dropout_mask(&x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::full(&[100_000], 2.0);
        let (y, _) = dropout_mask(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = y.data().iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.01, "mean {mean}");
    }

    #[test]
    fn dropout_mask_is_function_of_rng_state() {
        let x = Tensor::full(&[64], 1.0);
        let a = dropout_mask(&x, 0.3, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = dropout_mask(&x, 0.3, Mode::Train, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn concat_widths() {
        let parts: Vec<Tensor> = [64, 128, 256, 512, 512].iter().map(|&n| Tensor::zeros(&[n])).collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        assert_eq!(concat_channels(&refs).unwrap().len(), 1472);
        let one = Tensor::from_vec(vec![1.0, 2.0]);
        assert_eq!(concat_channels(&[&one]).unwrap(), one);
        assert!(concat_channels(&[]).is_err());
    }

    #[test]
    fn split_then_concat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random(&[17], &mut rng);
        let parts = split_channels(&g, &[3, 9, 5]).unwrap();
        let refs: Vec<&Tensor> = parts.iter().collect();
        assert_eq!(concat_channels(&refs).unwrap(), g);
    }

    #[test]
    fn gradcheck_of_linear_op_is_exact() {
        let coeffs = Tensor::from_vec(vec![0.5, -1.5, 2.0, 0.25]);
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let err = finite_diff_gradcheck(
            |t| Ok((t.data().iter().zip(coeffs.data()).map(|(a, b)| a * b).sum(), coeffs.clone())),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }
}
