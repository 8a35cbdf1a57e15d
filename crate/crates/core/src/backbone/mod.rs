//! Small convolutional feature extractor and the synthetic scene generator.

mod synthetic;

pub use synthetic::{
    archetype_catalog, generate_range, generate_synthetic, Archetype, ObjectCount, Placement, Shape, SyntheticDataset,
    SyntheticSceneSpec, CATALOG_SIZE,
};

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::csrl::GlobalFeatureMap;
use crate::error::{check_len, Error, Result};
use crate::linalg::gemm;
use crate::rng::normal;

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        check_len("image pixels", height * width * channels, pixels.len())?;
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Channel-major tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; self.channels * hw];
        for (i, px) in self.pixels.chunks(self.channels).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * hw + i] = v as f64 / 255.0;
            }
        }
        out
    }

    pub fn flipped_horizontal(&self) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        let row_len = self.width * self.channels;
        for row in self.pixels.chunks(row_len) {
            for px in row.chunks(self.channels).rev() {
                pixels.extend_from_slice(px);
            }
        }
        Self { pixels, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub stages: Vec<StageConfig>,
    /// Number of leading stages whose weights stay fixed.
    pub freeze_depth: usize,
    pub pretrained_weights: Option<String>,
    /// Standardize each channel of the frozen-stage output with statistics
    /// fitted on the training images.
    pub standardize: bool,
}

impl Default for BackboneConfig {
    /// Four stages mapping a 64x64 RGB image to a 32x7x7 feature map; the
    /// last stage is trained.
    fn default() -> Self {
        let s = |out_channels, stride, padding| StageConfig {
            out_channels,
            kernel: 3,
            stride,
            padding,
        };
        Self {
            input_height: 64,
            input_width: 64,
            input_channels: 3,
            stages: vec![s(16, 2, 0), s(32, 2, 0), s(64, 2, 0), s(32, 1, 1)],
            freeze_depth: 3,
            pretrained_weights: None,
            standardize: true,
        }
    }
}

fn out_dim(input: usize, st: &StageConfig) -> Option<usize> {
    let padded = input + 2 * st.padding;
    if st.stride == 0 || st.kernel == 0 || padded < st.kernel {
        None
    } else {
        Some((padded - st.kernel) / st.stride + 1)
    }
}

impl BackboneConfig {
    /// `(D, H, W)` of the final feature map.
    pub fn output_shape(&self) -> Result<(usize, usize, usize)> {
        let (mut c, mut h, mut w) = (self.input_channels, self.input_height, self.input_width);
        for (i, st) in self.stages.iter().enumerate() {
            match (out_dim(h, st), out_dim(w, st)) {
                (Some(nh), Some(nw)) => {
                    h = nh;
                    w = nw;
                    c = st.out_channels;
                }
                _ => {
                    return Err(Error::InvalidConfig(alloc::format!(
                        "stage {i} does not fit a {h}x{w} input"
                    )))
                }
            }
        }
        Ok((c, h, w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.freeze_depth > self.stages.len() {
            return Err(Error::InvalidConfig("freeze depth exceeds stage count".into()));
        }
        self.output_shape().map(|_| ())
    }
}

/// One convolution followed by a ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub stage: StageConfig,
    /// `out x in x k x k`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

struct ConvGeometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Calls `f(col_row, col_col, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        for c in 0..self.in_c {
            for kh in 0..k {
                for kw in 0..k {
                    let row = (c * k + kh) * k + kw;
                    for oh in 0..self.out_h {
                        let ih = (oh * s + kh) as isize - p;
                        if ih < 0 || ih >= self.in_h as isize {
                            continue;
                        }
                        for ow in 0..self.out_w {
                            let iw = (ow * s + kw) as isize - p;
                            if iw < 0 || iw >= self.in_w as isize {
                                continue;
                            }
                            f(row, oh * self.out_w + ow, (c * self.in_h + ih as usize) * self.in_w + iw as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let n = self.out_hw();
        let mut cols = vec![0.0; self.patch() * n];
        self.for_each_tap(|r, c, i| cols[r * n + c] = input[i]);
        cols
    }

    fn col2im(&self, cols: &[f64], dinput: &mut [f64]) {
        let n = self.out_hw();
        self.for_each_tap(|r, c, i| dinput[i] += cols[r * n + c]);
    }
}

impl ConvLayer {
    fn geometry(&self, in_h: usize, in_w: usize) -> ConvGeometry {
        let st = &self.stage;
        ConvGeometry {
            in_c: self.in_channels,
            in_h,
            in_w,
            out_h: out_dim(in_h, st).unwrap_or(0),
            out_w: out_dim(in_w, st).unwrap_or(0),
            k: st.kernel,
            stride: st.stride,
            pad: st.padding,
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            in_channels: self.in_channels,
            stage: self.stage,
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    /// Pre-activation output and the unfolded input.
    fn forward_pre(&self, input: &[f64], in_h: usize, in_w: usize) -> (Vec<f64>, Vec<f64>, usize, usize) {
        let g = self.geometry(in_h, in_w);
        let cols = g.im2col(input);
        let n = g.out_hw();
        let out_c = self.stage.out_channels;
        let mut out = vec![0.0; out_c * n];
        for (row, &b) in out.chunks_mut(n).zip(&self.bias) {
            row.iter_mut().for_each(|x| *x = b);
        }
        gemm(out_c, g.patch(), n, &self.weight, false, &cols, false, 1.0, &mut out);
        (out, cols, g.out_h, g.out_w)
    }
}

/// Per-channel affine map `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStandardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStandardizer {
    /// Channels with (near) zero variance get unit scale.
    pub fn fit(maps: &[GlobalFeatureMap]) -> Result<Self> {
        let first = maps.first().ok_or(Error::Empty("no feature maps to standardize"))?;
        let (d, hw) = (first.channels, first.spatial());
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for m in maps {
            check_len("standardizer map", d * hw, m.data.len())?;
            for c in 0..d {
                for &x in &m.data[c * hw..(c + 1) * hw] {
                    mean[c] += x;
                    sq[c] += x * x;
                }
            }
        }
        let count = (maps.len() * hw) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, &s)| {
                *m /= count;
                let var = s / count - *m * *m;
                if var > 1e-12 {
                    libm::sqrt(var)
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, map: &mut GlobalFeatureMap) {
        let hw = map.spatial();
        for (c, (&m, &s)) in self.mean.iter().zip(&self.std).enumerate() {
            for x in &mut map.data[c * hw..(c + 1) * hw] {
                *x = (*x - m) / s;
            }
        }
    }
}

/// Convolutional feature extractor producing the global feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub layers: Vec<ConvLayer>,
    /// Applied to the frozen-stage output when present.
    pub standardizer: Option<ChannelStandardizer>,
}

/// Activations of the trainable stages for one image.
pub struct TailTape {
    /// Per trainable stage: (unfolded input, post-ReLU output, input h, input w).
    stages: Vec<(Vec<f64>, Vec<f64>, usize, usize)>,
}

impl Backbone {
    fn build(config: BackboneConfig, mut init: impl FnMut(usize) -> f64) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.stages.len());
        let mut in_c = config.input_channels;
        for st in &config.stages {
            let fan_in = in_c * st.kernel * st.kernel;
            layers.push(ConvLayer {
                in_channels: in_c,
                stage: *st,
                weight: (0..st.out_channels * fan_in).map(|_| init(fan_in)).collect(),
                bias: vec![0.0; st.out_channels],
            });
            in_c = st.out_channels;
        }
        Ok(Self {
            config,
            layers,
            standardizer: None,
        })
    }

    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        Self::build(config, |_| 0.0)
    }

    /// He-normal weights, zero biases.
    pub fn random<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, |fan_in| normal(rng) * libm::sqrt(2.0 / fan_in as f64))
    }

    pub fn frozen_depth(&self) -> usize {
        self.config.freeze_depth
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        check_len("image height", self.config.input_height, image.height)?;
        check_len("image width", self.config.input_width, image.width)?;
        check_len("image channels", self.config.input_channels, image.channels)
    }

    fn run(&self, stages: core::ops::Range<usize>, input: Vec<f64>, c: usize, h: usize, w: usize) -> GlobalFeatureMap {
        let (mut x, mut c, mut h, mut w) = (input, c, h, w);
        for layer in &self.layers[stages] {
            let (mut out, _, oh, ow) = layer.forward_pre(&x, h, w);
            out.iter_mut().for_each(|v| *v = v.max(0.0));
            x = out;
            c = layer.stage.out_channels;
            h = oh;
            w = ow;
        }
        GlobalFeatureMap {
            channels: c,
            height: h,
            width: w,
            data: x,
        }
    }

    /// Global feature map of an image (every stage).
    pub fn extract(&self, image: &Image) -> Result<GlobalFeatureMap> {
        let f = self.extract_frozen(image)?;
        Ok(self.run(self.config.freeze_depth..self.layers.len(), f.data, f.channels, f.height, f.width))
    }

    /// Output of the frozen stages only, standardized if a standardizer is
    /// set; feed it to [`Backbone::forward_tail`].
    pub fn extract_frozen(&self, image: &Image) -> Result<GlobalFeatureMap> {
        let mut f = self.extract_raw(image)?;
        if let Some(s) = &self.standardizer {
            s.apply(&mut f);
        }
        Ok(f)
    }

    /// Frozen-stage output without standardization.
    pub fn extract_raw(&self, image: &Image) -> Result<GlobalFeatureMap> {
        self.check_image(image)?;
        Ok(self.run(0..self.config.freeze_depth, image.to_tensor(), image.channels, image.height, image.width))
    }

    /// Runs the trainable stages, recording what the backward pass needs.
    pub fn forward_tail(&self, frozen: &GlobalFeatureMap) -> (GlobalFeatureMap, TailTape) {
        let (mut x, mut c, mut h, mut w) = (frozen.data.clone(), frozen.channels, frozen.height, frozen.width);
        let mut stages = Vec::new();
        for layer in &self.layers[self.config.freeze_depth..] {
            let (mut out, cols, oh, ow) = layer.forward_pre(&x, h, w);
            out.iter_mut().for_each(|v| *v = v.max(0.0));
            stages.push((cols, out.clone(), h, w));
            x = out;
            c = layer.stage.out_channels;
            h = oh;
            w = ow;
        }
        (
            GlobalFeatureMap {
                channels: c,
                height: h,
                width: w,
                data: x,
            },
            TailTape { stages },
        )
    }

    /// Accumulates trainable-stage gradients into `grads` (one entry per
    /// trainable stage).
    pub fn backward_tail(&self, tape: &TailTape, dout: &[f64], grads: &mut [ConvLayer]) {
        let mut d = dout.to_vec();
        let trainable = &self.layers[self.config.freeze_depth..];
        for (i, layer) in trainable.iter().enumerate().rev() {
            let (cols, out, in_h, in_w) = &tape.stages[i];
            let g = layer.geometry(*in_h, *in_w);
            for (dv, &o) in d.iter_mut().zip(out) {
                if o <= 0.0 {
                    *dv = 0.0;
                }
            }
            let n = g.out_hw();
            let out_c = layer.stage.out_channels;
            let grad = &mut grads[i];
            gemm(out_c, n, g.patch(), &d, false, cols, true, 1.0, &mut grad.weight);
            for (b, row) in grad.bias.iter_mut().zip(d.chunks(n)) {
                *b += row.iter().sum::<f64>();
            }
            if i == 0 {
                break;
            }
            let mut dcols = vec![0.0; g.patch() * n];
            gemm(g.patch(), out_c, n, &layer.weight, true, &d, false, 0.0, &mut dcols);
            let mut din = vec![0.0; layer.in_channels * in_h * in_w];
            g.col2im(&dcols, &mut din);
            d = din;
        }
    }
}
