//! Network description, parameters, and the forward/backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    conv2d_backward, conv2d_forward, maxpool_backward, maxpool_with_indices, relu_backward, relu_forward,
    softmax_channels, transposed_conv_backward, transposed_conv_forward, unpool_backward, unpool_by_indices,
    PoolIndices,
};
use super::tensor::Tensor;
use crate::fusion::ProbMap;
use crate::raster::{MultibandRaster, Sample};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    /// Upsample by scattering to the argmax positions of the paired pooling layer.
    IndexUnpool,
    /// Learned upsampling with a stride-2 transposed convolution.
    TransposedConv,
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "index-unpool" | "unpool" | "segnet" => Ok(Self::IndexUnpool),
            "transposed-conv" | "tconv" | "fcn" => Ok(Self::TransposedConv),
            other => Err(Error::argument(format!("unknown decoder kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv { in_ch: usize, out_ch: usize, kernel: usize, pad: usize },
    Relu,
    MaxPool { window: usize, stride: usize },
    Unpool,
    TransposedConv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize },
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub classes: usize,
    pub decoder: DecoderKind,
    pub layers: Vec<LayerSpec>,
}

/// Derived facts about a validated layer stack.
#[derive(Debug, Clone)]
pub struct Topology {
    /// For each unpool layer, the pooling layer it reads indices from.
    pub pairs: Vec<Option<usize>>,
    /// Input sizes must be multiples of this (product of pooling strides).
    pub alignment: usize,
}

impl NetworkSpec {
    /// Encoder of `stages` x (3x3 conv, ReLU, 2x2 max-pool) and a mirrored decoder,
    /// finished by a 1x1 classifier and softmax.
    pub fn encoder_decoder(in_channels: usize, width: usize, stages: usize, classes: usize, decoder: DecoderKind) -> Self {
        let mut layers = Vec::new();
        let mut ch = in_channels;
        for _ in 0..stages {
            layers.push(LayerSpec::Conv { in_ch: ch, out_ch: width, kernel: 3, pad: 1 });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool { window: 2, stride: 2 });
            ch = width;
        }
        for _ in 0..stages {
            match decoder {
                DecoderKind::IndexUnpool => layers.push(LayerSpec::Unpool),
                DecoderKind::TransposedConv => {
                    layers.push(LayerSpec::TransposedConv { in_ch: width, out_ch: width, kernel: 2, stride: 2 });
                    layers.push(LayerSpec::Relu);
                }
            }
            layers.push(LayerSpec::Conv { in_ch: width, out_ch: width, kernel: 3, pad: 1 });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Conv { in_ch: ch, out_ch: classes, kernel: 1, pad: 0 });
        layers.push(LayerSpec::Softmax);
        Self {
            in_channels,
            classes,
            decoder,
            layers,
        }
    }

    /// Default desk-scale network: three 32-channel stages.
    pub fn default_for(in_channels: usize, classes: usize, decoder: DecoderKind) -> Self {
        Self::encoder_decoder(in_channels, 32, 3, classes, decoder)
    }

    pub fn validate(&self) -> Result<Topology> {
        let bad = |msg: String| Err(Error::Config(msg));
        let mut ch = self.in_channels;
        // Scale as a power-of-two exponent relative to the input.
        let mut level: i32 = 0;
        let mut pools: Vec<usize> = Vec::new();
        let mut pairs = vec![None; self.layers.len()];
        let mut alignment = 1usize;
        let mut max_level = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv { in_ch, out_ch, kernel, pad } => {
                    if in_ch != ch {
                        return bad(format!("layer {i}: conv expects {in_ch} channels, gets {ch}"));
                    }
                    if kernel == 0 || kernel != 2 * pad + 1 {
                        return bad(format!("layer {i}: conv must preserve size (kernel = 2 * pad + 1)"));
                    }
                    ch = out_ch;
                }
                LayerSpec::Relu => {}
                LayerSpec::MaxPool { window, stride } => {
                    if stride != 2 || window != 2 {
                        return bad(format!("layer {i}: only 2x2 stride-2 pooling is supported"));
                    }
                    pools.push(i);
                    level += 1;
                    max_level = max_level.max(level);
                    alignment *= stride;
                }
                LayerSpec::Unpool => {
                    let Some(p) = pools.pop() else {
                        return bad(format!("layer {i}: unpool without a pending pool"));
                    };
                    pairs[i] = Some(p);
                    level -= 1;
                }
                LayerSpec::TransposedConv { in_ch, out_ch, kernel, stride } => {
                    if in_ch != ch {
                        return bad(format!("layer {i}: transposed conv expects {in_ch} channels, gets {ch}"));
                    }
                    if stride != 2 || kernel != 2 {
                        return bad(format!("layer {i}: transposed conv must double the size (kernel = stride = 2)"));
                    }
                    ch = out_ch;
                    level -= 1;
                }
                LayerSpec::Softmax => {
                    if i + 1 != self.layers.len() {
                        return bad(format!("layer {i}: softmax must be the last layer"));
                    }
                }
            }
            if level < 0 {
                return bad(format!("layer {i}: upsampling above input resolution"));
            }
        }
        if level != 0 {
            return bad("output resolution differs from input resolution".into());
        }
        if self.decoder == DecoderKind::IndexUnpool && !pools.is_empty() {
            return bad("every pool must be paired with an unpool".into());
        }
        if self.layers.last() != Some(&LayerSpec::Softmax) {
            return bad("network must end in softmax".into());
        }
        if ch != self.classes {
            return bad(format!("classifier produces {ch} channels for {} classes", self.classes));
        }
        let _ = max_level;
        Ok(Topology { pairs, alignment })
    }

    /// Radius (input pixels) of the region an output pixel can depend on, worst case
    /// over all positions within one alignment period.
    pub fn receptive_radius(&self) -> Result<usize> {
        let topo = self.validate()?;
        let mut radius = 0i64;
        for x in 0..topo.alignment as i64 {
            let (lo, hi) = dependency(&self.layers, &topo.pairs, self.layers.len(), x, x);
            radius = radius.max(x - lo).max(hi - x);
        }
        Ok(radius as usize)
    }
}

fn floor_div(a: i64, b: i64) -> i64 {
    a.div_euclid(b)
}

fn ceil_div(a: i64, b: i64) -> i64 {
    -((-a).div_euclid(b))
}

/// Input interval that the cells `[lo, hi]` at the output of layer `end - 1` depend on.
fn dependency(layers: &[LayerSpec], pairs: &[Option<usize>], end: usize, lo: i64, hi: i64) -> (i64, i64) {
    let (mut lo, mut hi) = (lo, hi);
    let mut acc = (i64::MAX, i64::MIN);
    for l in (0..end).rev() {
        match layers[l] {
            LayerSpec::Conv { kernel, pad, .. } => {
                lo -= pad as i64;
                hi = hi - pad as i64 + kernel as i64 - 1;
            }
            LayerSpec::Relu | LayerSpec::Softmax => {}
            LayerSpec::MaxPool { window, stride } => {
                lo *= stride as i64;
                hi = hi * stride as i64 + window as i64 - 1;
            }
            LayerSpec::TransposedConv { kernel, stride, .. } => {
                lo = ceil_div(lo - kernel as i64 + 1, stride as i64);
                hi = floor_div(hi, stride as i64);
            }
            LayerSpec::Unpool => {
                let p = pairs[l].expect("validated pairing");
                let LayerSpec::MaxPool { window, stride } = layers[p] else {
                    unreachable!("unpool paired with a non-pool layer")
                };
                let (w, s) = (window as i64, stride as i64);
                let c_lo = ceil_div(lo - w + 1, s);
                let c_hi = floor_div(hi, s);
                // The indices depend on the pool's own input window.
                let branch = dependency(layers, pairs, p, c_lo * s, c_hi * s + w - 1);
                acc = (acc.0.min(branch.0), acc.1.max(branch.1));
                lo = c_lo;
                hi = c_hi;
            }
        }
    }
    (acc.0.min(lo), acc.1.max(hi))
}

/// Per-band affine normalization applied before the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandNorm {
    pub mean: f32,
    pub scale: f32,
}

impl Default for BandNorm {
    fn default() -> Self {
        Self { mean: 0.0, scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor<f32>,
    pub bias: Vec<f32>,
}

/// A network with its weights. Immutable once trained; share it across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub(crate) spec: NetworkSpec,
    pub(crate) params: Vec<Option<LayerParams>>,
    pub(crate) input_bands: Vec<String>,
    pub(crate) normalization: Vec<BandNorm>,
    topology_alignment: usize,
    pairs: Vec<Option<usize>>,
}

pub(crate) struct Trace {
    inputs: Vec<Tensor<f32>>,
    pools: Vec<Option<PoolIndices>>,
}

impl Model {
    /// Fan-in scaled uniform initialization, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, zero biases.
    pub fn init(spec: NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        let params = spec
            .layers
            .iter()
            .map(|layer| match *layer {
                LayerSpec::Conv { in_ch, out_ch, kernel, .. } => {
                    let fan_in = (in_ch * kernel * kernel) as f32;
                    Some(random_params([out_ch, in_ch, kernel, kernel], fan_in, out_ch, rng))
                }
                LayerSpec::TransposedConv { in_ch, out_ch, kernel, stride } => {
                    // Each output pixel sees in_ch * (kernel / stride)^2 taps.
                    let taps = (kernel / stride).max(1);
                    let fan_in = (in_ch * taps * taps) as f32;
                    Some(random_params([in_ch, out_ch, kernel, kernel], fan_in, out_ch, rng))
                }
                _ => None,
            })
            .collect();
        Self::from_parts(spec, params)
    }

    /// All weights and biases zero; the output is exactly uniform.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        let params = spec
            .layers
            .iter()
            .map(|layer| match *layer {
                LayerSpec::Conv { in_ch, out_ch, kernel, .. } => Some(LayerParams {
                    weight: Tensor::zeros([out_ch, in_ch, kernel, kernel]),
                    bias: vec![0.0; out_ch],
                }),
                LayerSpec::TransposedConv { in_ch, out_ch, kernel, .. } => Some(LayerParams {
                    weight: Tensor::zeros([in_ch, out_ch, kernel, kernel]),
                    bias: vec![0.0; out_ch],
                }),
                _ => None,
            })
            .collect();
        Self::from_parts(spec, params)
    }

    pub(crate) fn from_parts(spec: NetworkSpec, params: Vec<Option<LayerParams>>) -> Result<Self> {
        let topo = spec.validate()?;
        if params.len() != spec.layers.len() {
            return Err(Error::Config("parameter list does not match the layer list".into()));
        }
        let n = spec.in_channels;
        Ok(Self {
            input_bands: crate::raster::default_band_names(n),
            normalization: vec![BandNorm::default(); n],
            spec,
            params,
            topology_alignment: topo.alignment,
            pairs: topo.pairs,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn alignment(&self) -> usize {
        self.topology_alignment
    }

    pub fn input_bands(&self) -> &[String] {
        &self.input_bands
    }

    pub fn normalization(&self) -> &[BandNorm] {
        &self.normalization
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub fn set_input_bands(&mut self, names: Vec<String>) -> Result<()> {
        if names.len() != self.spec.in_channels {
            return Err(Error::Config(format!(
                "{} band names for {} input channels",
                names.len(),
                self.spec.in_channels
            )));
        }
        self.input_bands = names;
        Ok(())
    }

    pub fn set_normalization(&mut self, norm: Vec<BandNorm>) -> Result<()> {
        if norm.len() != self.spec.in_channels || norm.iter().any(|n| !(n.scale > 0.0)) {
            return Err(Error::Config("normalization must give a positive scale per input band".into()));
        }
        self.normalization = norm;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weight.data().len() + p.bias.len())
            .sum()
    }

    pub(crate) fn forward(&self, x: Tensor<f32>, keep: bool) -> Result<(Tensor<f32>, Option<Trace>)> {
        let [_, c, h, w] = x.shape();
        if c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let a = self.topology_alignment;
        if h % a != 0 || w % a != 0 {
            return Err(Error::shape(format!("input {h}x{w} is not a multiple of {a}")));
        }
        let mut inputs = Vec::new();
        let mut pools: Vec<Option<PoolIndices>> = vec![None; self.spec.layers.len()];
        let mut cur = x;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let next = match *layer {
                LayerSpec::Conv { pad, .. } => {
                    let p = self.params[i].as_ref().expect("conv params");
                    conv2d_forward(&cur, &p.weight, Some(&p.bias), 1, pad)?
                }
                LayerSpec::Relu => relu_forward(&cur),
                LayerSpec::MaxPool { window, stride } => {
                    let (y, idx) = maxpool_with_indices(&cur, window, stride)?;
                    pools[i] = Some(idx);
                    y
                }
                LayerSpec::Unpool => {
                    let p = self.pairs[i].expect("validated pairing");
                    let idx = pools[p].as_ref().expect("pool ran before unpool");
                    let shape = idx.in_shape();
                    unpool_by_indices(&cur, idx, shape)?
                }
                LayerSpec::TransposedConv { stride, .. } => {
                    let p = self.params[i].as_ref().expect("tconv params");
                    let mut y = transposed_conv_forward(&cur, &p.weight, stride)?;
                    add_bias(&mut y, &p.bias);
                    y
                }
                LayerSpec::Softmax => softmax_channels(&cur),
            };
            if keep {
                inputs.push(cur);
            }
            cur = next;
        }
        let trace = keep.then_some(Trace { inputs, pools });
        Ok((cur, trace))
    }

    /// Backpropagates the gradient with respect to the logits (the softmax input).
    pub(crate) fn backward(&self, trace: &Trace, grad_logits: Tensor<f32>) -> Result<Vec<Option<LayerParams>>> {
        let n = self.spec.layers.len();
        let mut grads: Vec<Option<LayerParams>> = vec![None; n];
        let mut g = grad_logits;
        for i in (0..n - 1).rev() {
            let x = &trace.inputs[i];
            g = match self.spec.layers[i] {
                LayerSpec::Conv { pad, .. } => {
                    let p = self.params[i].as_ref().expect("conv params");
                    let cg = conv2d_backward(x, &p.weight, &g, 1, pad)?;
                    grads[i] = Some(LayerParams {
                        weight: cg.weight,
                        bias: cg.bias,
                    });
                    cg.input
                }
                LayerSpec::Relu => relu_backward(x, &g),
                LayerSpec::MaxPool { .. } => {
                    let idx = trace.pools[i].as_ref().expect("pool indices");
                    maxpool_backward(&g, idx)?
                }
                LayerSpec::Unpool => {
                    let p = self.pairs[i].expect("validated pairing");
                    unpool_backward(&g, trace.pools[p].as_ref().expect("pool indices"))?
                }
                LayerSpec::TransposedConv { stride, .. } => {
                    let p = self.params[i].as_ref().expect("tconv params");
                    let tg = transposed_conv_backward(x, &p.weight, &g, stride)?;
                    grads[i] = Some(LayerParams {
                        weight: tg.weight,
                        bias: channel_sums(&g),
                    });
                    tg.input
                }
                LayerSpec::Softmax => unreachable!("softmax is the last layer"),
            };
        }
        Ok(grads)
    }

    /// Picks, orders, and normalizes the bands the model was trained on.
    pub fn prepare_input<T: Sample>(&self, image: &MultibandRaster<T>) -> Result<Vec<Vec<f32>>> {
        let by_name: Option<Vec<usize>> = self
            .input_bands
            .iter()
            .map(|name| image.band_names().iter().position(|n| n.eq_ignore_ascii_case(name)))
            .collect();
        let order: Vec<usize> = match by_name {
            Some(order) => order,
            None if image.band_count() == self.spec.in_channels => (0..image.band_count()).collect(),
            None => {
                return Err(Error::shape(format!(
                    "model reads bands {:?}; image has {:?}",
                    self.input_bands,
                    image.band_names()
                )))
            }
        };
        Ok(order
            .iter()
            .zip(&self.normalization)
            .map(|(&b, norm)| {
                let inv = 1.0 / norm.scale;
                image.band(b).data().iter().map(|v| (v.to_f64() as f32 - norm.mean) * inv).collect()
            })
            .collect())
    }

    /// Per-pixel class likelihoods for a whole image. The image is zero-padded on the
    /// right and bottom to a multiple of [`Model::alignment`] and cropped back.
    pub fn infer<T: Sample>(&self, image: &MultibandRaster<T>) -> Result<ProbMap> {
        let planes = self.prepare_input(image)?;
        self.infer_planes(&planes, image.width(), image.height())
    }

    pub(crate) fn infer_planes(&self, planes: &[Vec<f32>], width: usize, height: usize) -> Result<ProbMap> {
        let a = self.topology_alignment;
        let pw = width.div_ceil(a) * a;
        let ph = height.div_ceil(a) * a;
        let c = planes.len();
        let mut x = Tensor::zeros([1, c, ph, pw]);
        for (ch, plane) in planes.iter().enumerate() {
            let dst = x.plane_mut(0, ch);
            for y in 0..height {
                dst[y * pw..y * pw + width].copy_from_slice(&plane[y * width..(y + 1) * width]);
            }
        }
        let (probs, _) = self.forward(x, false)?;
        let k = self.spec.classes;
        let mut data = Vec::with_capacity(k * width * height);
        for ch in 0..k {
            let src = probs.plane(0, ch);
            for y in 0..height {
                data.extend_from_slice(&src[y * pw..y * pw + width]);
            }
        }
        ProbMap::from_planes(width, height, k, data)
    }
}

fn random_params(shape: [usize; 4], fan_in: f32, out_ch: usize, rng: &mut impl Rng) -> LayerParams {
    let bound = (6.0 / fan_in).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    LayerParams {
        weight: Tensor::from_vec(shape, data).expect("shape"),
        bias: vec![0.0; out_ch],
    }
}

fn add_bias(y: &mut Tensor<f32>, bias: &[f32]) {
    let [n, c, _, _] = y.shape();
    for b in 0..n {
        for (ch, &bv) in bias.iter().enumerate().take(c) {
            for v in y.plane_mut(b, ch) {
                *v += bv;
            }
        }
    }
}

fn channel_sums(g: &Tensor<f32>) -> Vec<f32> {
    let [n, c, _, _] = g.shape();
    (0..c)
        .map(|ch| (0..n).map(|b| g.plane(b, ch).iter().sum::<f32>()).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_specs_validate() {
        for decoder in [DecoderKind::IndexUnpool, DecoderKind::TransposedConv] {
            let spec = NetworkSpec::default_for(3, 128, decoder);
            let topo = spec.validate().unwrap();
            assert_eq!(topo.alignment, 8);
        }
    }

    #[test]
    fn invalid_specs() {
        let mut spec = NetworkSpec::default_for(3, 2, DecoderKind::IndexUnpool);
        spec.layers.remove(spec.layers.iter().position(|l| *l == LayerSpec::Unpool).unwrap());
        assert!(spec.validate().is_err());

        let mut spec = NetworkSpec::default_for(3, 2, DecoderKind::IndexUnpool);
        spec.classes = 5;
        assert!(spec.validate().is_err());

        let spec = NetworkSpec {
            in_channels: 1,
            classes: 1,
            decoder: DecoderKind::IndexUnpool,
            layers: vec![LayerSpec::Unpool, LayerSpec::Softmax],
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn unpool_pairs_are_lifo() {
        let spec = NetworkSpec::encoder_decoder(1, 4, 3, 2, DecoderKind::IndexUnpool);
        let topo = spec.validate().unwrap();
        let pools: Vec<usize> = spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::MaxPool { .. }))
            .map(|(i, _)| i)
            .collect();
        let paired: Vec<usize> = topo.pairs.iter().flatten().copied().collect();
        assert_eq!(paired, pools.iter().rev().copied().collect::<Vec<_>>());
    }

    #[test]
    fn zero_model_is_uniform() {
        let model = Model::zeros(NetworkSpec::encoder_decoder(3, 4, 2, 5, DecoderKind::IndexUnpool)).unwrap();
        let img = MultibandRaster::from_bands((0..3).map(|b| Raster::from_fn(7, 5, |x, y| (x * y + b) as u8)).collect())
            .unwrap();
        let p = model.infer(&img).unwrap();
        assert_eq!((p.width(), p.height(), p.classes()), (7, 5, 5));
        assert!(p.data().iter().all(|&v| v == 0.2));
    }

    #[test]
    fn output_matches_input_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for decoder in [DecoderKind::IndexUnpool, DecoderKind::TransposedConv] {
            let model = Model::init(NetworkSpec::encoder_decoder(1, 4, 3, 3, decoder), &mut rng).unwrap();
            for (w, h) in [(1, 1), (8, 8), (13, 29), (40, 17)] {
                let img = MultibandRaster::single(Raster::from_fn(w, h, |x, y| ((x * 7 + y * 3) % 255) as u8));
                let p = model.infer(&img).unwrap();
                assert_eq!((p.width(), p.height()), (w, h));
                p.check_stochastic().unwrap();
            }
        }
    }

    #[test]
    fn band_mismatch_is_shape_error() {
        let model = Model::zeros(NetworkSpec::encoder_decoder(3, 2, 1, 2, DecoderKind::IndexUnpool)).unwrap();
        let img = MultibandRaster::single(Raster::filled(8, 8, 0u8));
        assert!(matches!(model.infer(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn receptive_radius_grows_with_depth() {
        let shallow = NetworkSpec::encoder_decoder(1, 2, 1, 2, DecoderKind::IndexUnpool);
        let deep = NetworkSpec::encoder_decoder(1, 2, 3, 2, DecoderKind::IndexUnpool);
        let r1 = shallow.receptive_radius().unwrap();
        let r3 = deep.receptive_radius().unwrap();
        assert!(r1 >= 3 && r3 > r1, "{r1} {r3}");
        // conv-only network: one 3x3 conv plus a 1x1 classifier.
        let flat = NetworkSpec::encoder_decoder(1, 2, 0, 2, DecoderKind::IndexUnpool);
        assert_eq!(flat.receptive_radius().unwrap(), 0);
    }
}
