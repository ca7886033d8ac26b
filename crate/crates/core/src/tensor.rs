//! Dense channel-major tensors and the small set of deterministic kernels the
//! generator and the energy terms are built from.
//!
//! All arithmetic is 32-bit. Every kernel accumulates in a fixed order that
//! depends only on the kernel shape, never on the spatial extent of the
//! input, so evaluating a network on a window of a larger input reproduces
//! the full evaluation bit for bit wherever the receptive field is covered.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{arg_err, shape_err};
use crate::Result;

/// Default epsilon for [`pixel_norm`].
pub const PIXEL_NORM_EPSILON: f32 = 1e-8;

/// A `channels x height x width` array of `f32`, channel-major with rows
/// contiguous inside each channel plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(shape_err!("{} values for a {channels}x{height}x{width} tensor", values.len()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(arg_err!("non-finite value at flat index {pos}"));
        }
        Ok(Self { channels, height, width, values })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, values: vec![0.0; channels * height * width] }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, values: vec![value; channels * height * width] }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut values = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    values.push(f(c, y, x));
                }
            }
        }
        Self { channels, height, width, values }
    }

    /// Standard-normal entries drawn from `rng` in storage order.
    pub fn randn(channels: usize, height: usize, width: usize, rng: &mut Rng) -> Self {
        let values = (0..channels * height * width).map(|_| rng.normal()).collect();
        Self { channels, height, width, values }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.values[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.values[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    /// Spatial sub-rectangle over all channels.
    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Tensor> {
        if x + width > self.width || y + height > self.height {
            return Err(shape_err!("crop {width}x{height}+{x}+{y} outside {}x{}", self.width, self.height));
        }
        let mut values = Vec::with_capacity(self.channels * width * height);
        for c in 0..self.channels {
            for row in y..y + height {
                let start = self.index(c, row, x);
                values.extend_from_slice(&self.values[start..start + width]);
            }
        }
        Ok(Tensor { channels: self.channels, height, width, values })
    }

    /// Overwrite the region at (`x`, `y`) with `src`.
    pub fn paste(&mut self, src: &Tensor, x: usize, y: usize) -> Result<()> {
        if src.channels != self.channels {
            return Err(shape_err!("paste {} channels into {}", src.channels, self.channels));
        }
        if x + src.width > self.width || y + src.height > self.height {
            return Err(shape_err!(
                "paste {}x{}+{x}+{y} outside {}x{}",
                src.width,
                src.height,
                self.width,
                self.height
            ));
        }
        for c in 0..self.channels {
            for row in 0..src.height {
                let dst = self.index(c, y + row, x);
                let from = src.index(c, row, 0);
                self.values[dst..dst + src.width].copy_from_slice(&src.values[from..from + src.width]);
            }
        }
        Ok(())
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        same_shape(self, other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max))
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Convolution weights laid out `[out, in, kh, kw]`, plus one bias per output
/// channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Kernel {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if weights.len() != out_channels * in_channels * kh * kw {
            return Err(shape_err!("{} weights for a {out_channels}x{in_channels}x{kh}x{kw} kernel", weights.len()));
        }
        if bias.len() != out_channels {
            return Err(shape_err!("{} biases for {out_channels} outputs", bias.len()));
        }
        if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
            return Err(arg_err!("kernel extent {kh}x{kw} must be odd"));
        }
        Ok(Self { out_channels, in_channels, kh, kw, weights, bias })
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f32 {
        self.weights[((o * self.in_channels + i) * self.kh + ky) * self.kw + kx]
    }
}

/// 2-D cross-correlation (no kernel flip) with symmetric zero padding.
///
/// Output size per axis is `input + 2 * zero_pad - (k - 1)`. Each output value
/// is `bias + sum over (in channel, ky, kx)` accumulated in exactly that order.
pub fn conv2d(input: &Tensor, kernel: &Kernel, zero_pad: usize) -> Result<Tensor> {
    if kernel.in_channels != input.channels {
        return Err(shape_err!("kernel expects {} input channels, got {}", kernel.in_channels, input.channels));
    }
    let ph = input.height + 2 * zero_pad;
    let pw = input.width + 2 * zero_pad;
    if ph < kernel.kh || pw < kernel.kw {
        return Err(shape_err!("input {}x{} smaller than kernel", input.width, input.height));
    }
    let oh = ph + 1 - kernel.kh;
    let ow = pw + 1 - kernel.kw;

    let padded = if zero_pad == 0 {
        input.values.clone()
    } else {
        let mut p = vec![0.0f32; input.channels * ph * pw];
        for c in 0..input.channels {
            for y in 0..input.height {
                let src = input.index(c, y, 0);
                let dst = (c * ph + y + zero_pad) * pw + zero_pad;
                p[dst..dst + input.width].copy_from_slice(&input.values[src..src + input.width]);
            }
        }
        p
    };

    let mut out = vec![0.0f32; kernel.out_channels * oh * ow];
    for (o, plane) in out.chunks_exact_mut(oh * ow).enumerate() {
        plane.fill(kernel.bias[o]);
        for i in 0..input.channels {
            let src = &padded[i * ph * pw..(i + 1) * ph * pw];
            for ky in 0..kernel.kh {
                for kx in 0..kernel.kw {
                    let w = kernel.weight(o, i, ky, kx);
                    for y in 0..oh {
                        let row = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + ow];
                        let acc = &mut plane[y * ow..(y + 1) * ow];
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += w * v;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor { channels: kernel.out_channels, height: oh, width: ow, values: out })
}

/// Nearest-neighbour 2x upsampling: every pixel becomes a 2x2 block.
pub fn upsample2x(input: &Tensor) -> Tensor {
    let (c, h, w) = input.shape();
    let mut values = Vec::with_capacity(c * h * w * 4);
    for ch in 0..c {
        for y in 0..h {
            let row = &input.values[input.index(ch, y, 0)..input.index(ch, y, 0) + w];
            let start = values.len();
            for &v in row {
                values.push(v);
                values.push(v);
            }
            values.extend_from_within(start..start + 2 * w);
        }
    }
    Tensor { channels: c, height: 2 * h, width: 2 * w, values }
}

pub fn leaky_relu(input: &Tensor, slope: f32) -> Tensor {
    let mut out = input.clone();
    leaky_relu_in_place(&mut out, slope);
    out
}

pub(crate) fn leaky_relu_in_place(t: &mut Tensor, slope: f32) {
    for v in &mut t.values {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

/// Per-pixel feature normalisation: `x_c / sqrt(mean_c(x^2) + epsilon)`.
pub fn pixel_norm(input: &Tensor, epsilon: f32) -> Tensor {
    let mut out = input.clone();
    pixel_norm_in_place(&mut out, epsilon);
    out
}

pub(crate) fn pixel_norm_in_place(t: &mut Tensor, epsilon: f32) {
    let n = t.height * t.width;
    if t.channels == 0 || n == 0 {
        return;
    }
    let mut sumsq = vec![0.0f32; n];
    for c in 0..t.channels {
        for (s, &v) in sumsq.iter_mut().zip(&t.values[c * n..(c + 1) * n]) {
            *s += v * v;
        }
    }
    let inv_c = 1.0 / t.channels as f32;
    let scale: Vec<f32> = sumsq
        .iter()
        .map(|&s| {
            let d = (s * inv_c + epsilon).sqrt();
            if d > 0.0 {
                1.0 / d
            } else {
                0.0
            }
        })
        .collect();
    for c in 0..t.channels {
        for (v, &k) in t.values[c * n..(c + 1) * n].iter_mut().zip(&scale) {
            *v *= k;
        }
    }
}

/// Block-mean pooling down to `channels x r x r`.
pub fn avg_pool_to(input: &Tensor, r: usize) -> Result<Tensor> {
    if r == 0 || !input.height.is_multiple_of(r) || !input.width.is_multiple_of(r) {
        return Err(shape_err!("{}x{} not divisible into {r}x{r} blocks", input.width, input.height));
    }
    let bh = input.height / r;
    let bw = input.width / r;
    let inv = 1.0 / (bh * bw) as f32;
    let mut out = Tensor::zeros(input.channels, r, r);
    for c in 0..input.channels {
        for oy in 0..r {
            for ox in 0..r {
                let mut s = 0.0f32;
                for y in oy * bh..(oy + 1) * bh {
                    let i = input.index(c, y, ox * bw);
                    s += input.values[i..i + bw].iter().sum::<f32>();
                }
                out.set(c, oy, ox, s * inv);
            }
        }
    }
    Ok(out)
}

/// Euclidean distance between two equally shaped tensors.
pub fn l2_distance(a: &Tensor, b: &Tensor) -> Result<f32> {
    same_shape(a, b)?;
    Ok(squared_distance(&a.values, &b.values).sqrt())
}

#[inline]
pub(crate) fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The crate-wide deterministic generator: ChaCha8 (RFC 7539 block function
/// with 8 rounds) seeded from a `u64` through `rand_core`'s PCG32 seed
/// expansion. Normals use `rand_distr`'s ziggurat `StandardNormal`.
///
/// The stream is fixed by the pinned dependency versions and independent of
/// platform and endianness.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f32 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        use rand::Rng as _;
        self.inner.random_range(0..n)
    }

    /// Uniform real in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        use rand::Rng as _;
        self.inner.random::<f64>()
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
