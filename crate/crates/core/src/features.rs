//! Fixed feature extractors used by the perceptual loss and the feature
//! distance metric.
//!
//! Two bindings exist. [`Vgg19Features`] loads pretrained VGG-19 convolution
//! weights from a safetensors file at runtime (torchvision `features.{i}`
//! naming). [`SurrogateExtractor`] is a small random convolutional stack
//! built from a seed; it needs no download and is what the tests use. Its
//! distances are not on the same scale as VGG distances.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use safetensors::{Dtype, SafeTensors};
use unblur_autograd::{Float, Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::seed;

/// Maps an image batch `[N, C, H, W]` with values in `[-1, 1]` to features
/// at a fixed layer. Implementations are differentiable: gradients flow from
/// the features back to `x`.
pub trait FeatureExtractor<T: Float>: Send + Sync {
    /// Name of the layer the features are read from.
    fn layer(&self) -> &str;

    fn features(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;
}

/// Features of a single image, outside any training graph.
pub fn extract<T: Float>(ex: &dyn FeatureExtractor<T>, img: &ImageTensor) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(img.to_tensor().cast());
    let f = ex.features(&mut g, x)?;
    Ok(g.value(f).clone())
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: Tensor<f64>,
    bias: Tensor<f64>,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    fn apply<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.constant(self.weight.cast());
        let b = g.constant(self.bias.cast());
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Depth at which an extractor reads features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Depth {
    /// Mid-level convolution output (VGG `conv3_3`); used by the perceptual
    /// loss.
    Conv3_3,
    /// Final pooled feature map, flattened per image (VGG `pool5`); used by
    /// the feature distance metric.
    Pool5,
}

/// Deterministic random convolutional stack standing in for a pretrained
/// network.
#[derive(Clone, Debug)]
pub struct SurrogateExtractor {
    channels: usize,
    layers: Vec<ConvLayer>,
    depth: Depth,
}

impl SurrogateExtractor {
    pub fn new(channels: usize, seed_value: u64, depth: Depth) -> Self {
        let mut widths = vec![(channels, 8, 1), (8, 16, 2), (16, 16, 1)];
        if depth == Depth::Pool5 {
            widths.push((16, 32, 2));
        }
        let layers = widths
            .into_iter()
            .enumerate()
            .map(|(i, (cin, cout, stride))| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                let mut rng = seed::rng(seed::derive(seed_value, i as u64));
                ConvLayer {
                    weight: Tensor::from_fn(vec![cout, cin, 3, 3], |_| normal.sample(&mut rng)),
                    bias: Tensor::zeros(vec![cout]),
                    stride,
                    pad: 1,
                }
            })
            .collect();
        SurrogateExtractor {
            channels,
            layers,
            depth,
        }
    }

    pub fn perceptual(channels: usize, seed_value: u64) -> Self {
        Self::new(channels, seed_value, Depth::Conv3_3)
    }

    pub fn embedding(channels: usize, seed_value: u64) -> Self {
        Self::new(channels, seed_value, Depth::Pool5)
    }
}

impl<T: Float> FeatureExtractor<T> for SurrogateExtractor {
    fn layer(&self) -> &str {
        match self.depth {
            Depth::Conv3_3 => "surrogate.conv3",
            Depth::Pool5 => "surrogate.pool",
        }
    }

    fn features(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(Error::Extractor(format!(
                "surrogate built for {} channels, got {c}",
                self.channels
            )));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.relu(h);
            }
            h = layer.apply(g, h);
        }
        if self.depth == Depth::Pool5 {
            h = g.relu(h);
            let (_, _, hh, ww) = g.value(h).dims4();
            if hh < 2 || ww < 2 {
                return Err(Error::Extractor("input too small for pooling".into()));
            }
            h = g.avg_pool2(h);
        }
        Ok(h)
    }
}

/// Seed of the surrogate extractors used by training and evaluation, fixed
/// so that feature distances are comparable across runs.
pub const SURROGATE_SEED: u64 = 0x5eed_f00d;

/// Extractor at `depth`: VGG-19 from `weights` if given, else the surrogate.
pub fn build(
    weights: Option<&Path>,
    channels: usize,
    depth: Depth,
) -> Result<Box<dyn FeatureExtractor<f32>>> {
    Ok(match weights {
        Some(p) => Box::new(Vgg19Features::load(p, depth)?),
        None => Box::new(SurrogateExtractor::new(channels, SURROGATE_SEED, depth)),
    })
}

/// Index layout of torchvision's `vgg19().features`.
const VGG19_CONVS: [usize; 16] = [0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34];
const VGG19_POOLS: [usize; 5] = [4, 9, 18, 27, 36];
const CONV3_3: usize = 14;
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Pretrained VGG-19 feature network, truncated at `conv3_3` or `pool5`.
#[derive(Clone, Debug)]
pub struct Vgg19Features {
    convs: Vec<(usize, ConvLayer)>,
    depth: Depth,
}

impl Vgg19Features {
    /// Loads `features.{i}.weight` / `features.{i}.bias` (f32 or f64) from a
    /// safetensors file.
    pub fn load(path: &Path, depth: Depth) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Extractor(format!("{}: {e}", path.display())))?;
        let get = |name: &str| -> Result<Tensor<f64>> {
            let view = st
                .tensor(name)
                .map_err(|e| Error::Extractor(format!("{name}: {e}")))?;
            let data: Vec<f64> = match view.dtype() {
                Dtype::F32 => view
                    .data()
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect(),
                Dtype::F64 => view
                    .data()
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
                other => {
                    return Err(Error::Extractor(format!("{name}: unsupported dtype {other:?}")))
                }
            };
            Ok(Tensor::new(view.shape().to_vec(), data))
        };
        let last = match depth {
            Depth::Conv3_3 => CONV3_3,
            Depth::Pool5 => *VGG19_CONVS.last().expect("nonempty"),
        };
        let mut convs = Vec::new();
        for &i in VGG19_CONVS.iter().filter(|&&i| i <= last) {
            let weight = get(&format!("features.{i}.weight"))?;
            let bias = get(&format!("features.{i}.bias"))?;
            let ws = weight.shape();
            if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || bias.shape() != [ws[0]] {
                return Err(Error::Extractor(format!(
                    "features.{i}: unexpected shapes {:?} / {:?}",
                    ws,
                    bias.shape()
                )));
            }
            convs.push((
                i,
                ConvLayer {
                    weight,
                    bias,
                    stride: 1,
                    pad: 1,
                },
            ));
        }
        for pair in convs.windows(2) {
            if pair[1].1.weight.shape()[1] != pair[0].1.weight.shape()[0] {
                return Err(Error::Extractor(format!(
                    "features.{} does not chain onto features.{}",
                    pair[1].0, pair[0].0
                )));
            }
        }
        if convs[0].1.weight.shape()[1] != 3 {
            return Err(Error::Extractor("first VGG layer must take 3 channels".into()));
        }
        Ok(Vgg19Features { convs, depth })
    }

    /// Maps `[-1, 1]` input to ImageNet-normalized RGB with a fixed 1×1
    /// convolution (gray inputs are replicated to three channels).
    fn normalize<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let c = g.shape(x)[1];
        if c != 1 && c != 3 {
            return Err(Error::Extractor(format!("VGG input must have 1 or 3 channels, got {c}")));
        }
        let mut w = vec![0.0f64; 3 * c];
        for o in 0..3 {
            let i = if c == 1 { 0 } else { o };
            w[o * c + i] = 0.5 / IMAGENET_STD[o];
        }
        let b: Vec<f64> = (0..3)
            .map(|o| (0.5 - IMAGENET_MEAN[o]) / IMAGENET_STD[o])
            .collect();
        let wv = g.constant(Tensor::new(vec![3, c, 1, 1], w).cast());
        let bv = g.constant(Tensor::new(vec![3], b).cast());
        Ok(g.conv2d(x, wv, Some(bv), 1, 0))
    }
}

impl<T: Float> FeatureExtractor<T> for Vgg19Features {
    fn layer(&self) -> &str {
        match self.depth {
            Depth::Conv3_3 => "vgg19.conv3_3",
            Depth::Pool5 => "vgg19.pool5",
        }
    }

    fn features(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut h = self.normalize(g, x)?;
        let n_convs = self.convs.len();
        for (k, (idx, layer)) in self.convs.iter().enumerate() {
            h = layer.apply(g, h);
            let is_output = self.depth == Depth::Conv3_3 && k + 1 == n_convs;
            if is_output {
                break;
            }
            h = g.relu(h);
            if VGG19_POOLS.contains(&(idx + 2)) {
                let (_, _, hh, ww) = g.value(h).dims4();
                if hh < 2 || ww < 2 {
                    return Err(Error::Extractor(format!(
                        "input too small for VGG pooling after features.{idx}"
                    )));
                }
                h = g.max_pool2(h);
            }
        }
        Ok(h)
    }
}
