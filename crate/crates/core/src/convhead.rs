//! Convolutional perception head feeding the sensory units, and
//! VisualBackprop saliency over its feature maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;
use crate::tape::{conv2d_forward, linear_forward, ConvGeom, Tape, Var};

/// Floor on the per-image standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvHeadConfig {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub layers: Vec<ConvLayerSpec>,
    pub n_features: usize,
}

impl Default for ConvHeadConfig {
    /// 32x48 RGB input; 8, 12 and 16 channel tanh convolutions at stride 2;
    /// dense projection to 32 features.
    fn default() -> Self {
        let layer = |out_channels, kernel| ConvLayerSpec {
            out_channels,
            kernel,
            stride: 2,
            padding: kernel / 2,
        };
        Self {
            in_channels: 3,
            in_height: 32,
            in_width: 48,
            layers: vec![layer(8, 5), layer(12, 5), layer(16, 3)],
            n_features: 32,
        }
    }
}

impl ConvHeadConfig {
    pub fn geoms(&self, batch: usize) -> Vec<ConvGeom> {
        let (mut c, mut h, mut w) = (self.in_channels, self.in_height, self.in_width);
        self.layers
            .iter()
            .map(|l| {
                let g = ConvGeom {
                    batch,
                    in_channels: c,
                    in_height: h,
                    in_width: w,
                    out_channels: l.out_channels,
                    kernel: l.kernel,
                    stride: l.stride,
                    padding: l.padding,
                };
                c = l.out_channels;
                h = g.out_height();
                w = g.out_width();
                g
            })
            .collect()
    }

    /// Length of the flattened last feature map.
    pub fn flat_len(&self) -> usize {
        match self.geoms(1).last() {
            Some(g) => g.out_channels * g.out_height() * g.out_width(),
            None => self.in_channels * self.in_height * self.in_width,
        }
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }

    /// Flat parameter layout: per layer `[weight, bias]`, then dense `[weight, bias]`.
    pub fn param_ranges(
        &self,
    ) -> (
        Vec<(std::ops::Range<usize>, std::ops::Range<usize>)>,
        std::ops::Range<usize>,
        std::ops::Range<usize>,
    ) {
        let mut off = 0;
        let mut convs = Vec::new();
        for g in self.geoms(1) {
            let w = off..off + g.weight_len();
            off = w.end;
            let b = off..off + g.out_channels;
            off = b.end;
            convs.push((w, b));
        }
        let dw = off..off + self.flat_len() * self.n_features;
        let db = dw.end..dw.end + self.n_features;
        (convs, dw, db)
    }

    pub fn n_params(&self) -> usize {
        self.param_ranges().2.end
    }

    pub fn validate(&self) -> Result<()> {
        let mut h = self.in_height;
        let mut w = self.in_width;
        for l in &self.layers {
            if l.kernel == 0 || l.stride == 0 || l.out_channels == 0 {
                return Err(Error::Config("conv layers need positive kernel, stride and channels".into()));
            }
            if h + 2 * l.padding < l.kernel || w + 2 * l.padding < l.kernel {
                return Err(Error::Config("conv kernel larger than its padded input".into()));
            }
            h = (h + 2 * l.padding - l.kernel) / l.stride + 1;
            w = (w + 2 * l.padding - l.kernel) / l.stride + 1;
        }
        if self.n_features == 0 {
            return Err(Error::Config("conv head needs at least one output feature".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvHead<T> {
    pub config: ConvHeadConfig,
    pub params: Vec<T>,
}

/// Post-activation maps of one conv layer for a single image, `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn channel_mean(&self) -> Vec<T> {
        let plane = self.height * self.width;
        let mut out = vec![T::zero(); plane];
        for c in 0..self.channels {
            for (o, &v) in out.iter_mut().zip(&self.data[c * plane..(c + 1) * plane]) {
                *o = *o + v;
            }
        }
        let inv = T::one() / T::lit(self.channels as f64);
        out.iter_mut().for_each(|v| *v = *v * inv);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> ConvHead<T> {
    /// Uniform fan-in scaled initialization, deterministic per seed.
    pub fn init(config: ConvHeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); config.n_params()];
        let (convs, dw, _) = config.param_ranges();
        for ((w, _), g) in convs.iter().zip(config.geoms(1)) {
            let bound = (3.0 / (g.in_channels * g.kernel * g.kernel) as f64).sqrt();
            let dist = Uniform::new(-bound, bound).expect("finite bound");
            for v in &mut params[w.clone()] {
                *v = T::lit(dist.sample(&mut rng));
            }
        }
        let bound = (3.0 / config.flat_len() as f64).sqrt();
        let dist = Uniform::new(-bound, bound).expect("finite bound");
        for v in &mut params[dw] {
            *v = T::lit(dist.sample(&mut rng));
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: ConvHeadConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        check_len("conv head parameters", config.n_params(), params.len())?;
        Ok(Self { config, params })
    }

    /// Features of one standardized `[channels, height, width]` tensor, plus
    /// the per-layer activations kept for saliency.
    pub fn forward(&self, input: &[T]) -> Result<(Vec<T>, Vec<FeatureMap<T>>)> {
        check_len("conv head input", self.config.input_len(), input.len())?;
        let (convs, dw, db) = self.config.param_ranges();
        let mut x = input.to_vec();
        let mut maps = Vec::with_capacity(convs.len());
        for ((w, b), g) in convs.iter().zip(self.config.geoms(1)) {
            let mut y = conv2d_forward(&x, &self.params[w.clone()], &self.params[b.clone()], &g);
            y.iter_mut().for_each(|v| *v = v.tanh());
            maps.push(FeatureMap {
                channels: g.out_channels,
                height: g.out_height(),
                width: g.out_width(),
                stride: g.stride,
                data: y.clone(),
            });
            x = y;
        }
        let mut features = linear_forward(
            &x,
            &self.params[dw],
            &self.params[db],
            self.config.flat_len(),
            self.config.n_features,
        );
        features.iter_mut().for_each(|v| *v = v.tanh());
        Ok((features, maps))
    }

    /// Records the head on a tape for a batch of stacked input tensors;
    /// returns `[batch, n_features]` tanh-squashed features.
    pub fn forward_tape(&self, tape: &mut Tape<T>, params: Var, input: Var, batch: usize) -> Var {
        let (convs, dw, db) = self.config.param_ranges();
        let mut x = input;
        for ((w, b), g) in convs.iter().zip(self.config.geoms(batch)) {
            let wv = tape.slice(params, w.start, w.len());
            let bv = tape.slice(params, b.start, b.len());
            let c = tape.conv2d(x, wv, bv, g);
            x = tape.tanh(c);
        }
        let wv = tape.slice(params, dw.start, dw.len());
        let bv = tape.slice(params, db.start, db.len());
        let f = tape.linear(x, wv, bv, self.config.flat_len(), self.config.n_features);
        tape.tanh(f)
    }
}

/// Per-image standardization to zero mean and unit standard deviation,
/// returned channel-major `[3, height, width]`.
pub fn standardize<T: Scalar>(image: &Image) -> Vec<T> {
    let n = image.data.len() as f64;
    let mean = image.data.iter().sum::<f64>() / n;
    let var = image.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    let plane = image.width * image.height;
    let mut out = vec![T::zero(); image.data.len()];
    for p in 0..plane {
        for c in 0..3 {
            out[c * plane + p] = T::lit((image.data[p * 3 + c] - mean) / std);
        }
    }
    out
}

/// VisualBackprop: average the deepest maps over channels, then repeatedly
/// upscale by nearest-neighbour backprojection through each layer's stride
/// and multiply with the shallower layer's channel average; finally upscale
/// to the input, take magnitudes and normalize the peak to 1.
pub fn visual_backprop<T: Scalar>(activations: &[FeatureMap<T>], in_height: usize, in_width: usize) -> SaliencyMap<T> {
    let Some(last) = activations.last() else {
        return SaliencyMap {
            height: in_height,
            width: in_width,
            data: vec![T::zero(); in_height * in_width],
        };
    };
    let mut mask = last.channel_mean();
    let (mut h, mut w, mut stride) = (last.height, last.width, last.stride);
    for layer in activations.iter().rev().skip(1) {
        let up = upscale(&mask, h, w, stride, layer.height, layer.width);
        mask = up.iter().zip(layer.channel_mean()).map(|(&a, b)| a * b).collect();
        h = layer.height;
        w = layer.width;
        stride = layer.stride;
    }
    let mut data = upscale(&mask, h, w, stride, in_height, in_width);
    data.iter_mut().for_each(|v| *v = v.abs());
    let peak = data.iter().copied().fold(T::zero(), T::max);
    if peak > T::zero() {
        data.iter_mut().for_each(|v| *v = *v / peak);
    }
    SaliencyMap {
        height: in_height,
        width: in_width,
        data,
    }
}

/// Nearest-neighbour backprojection: output pixel `(y, x)` reads source `(y / stride, x / stride)`.
fn upscale<T: Scalar>(src: &[T], h: usize, w: usize, stride: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = (y / stride).min(h - 1);
        for x in 0..out_w {
            let sx = (x / stride).min(w - 1);
            out.push(src[sy * w + sx]);
        }
    }
    out
}
