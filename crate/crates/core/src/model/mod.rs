//! U-ResNet with one multi-task supervision path per scale.
//!
//! The main stream is a stem convolution followed by residual stages on an
//! encoder/decoder ladder. Every supervised level `d` carries a
//! segmentation head (1x1 conv to two logits, bilinear upsample by `2^d`)
//! and a classification head (conv, maxpool 2, conv, maxpool 2, avgpool
//! `2^(5-d)`, 1x1 conv, sigmoid), so each classification map is the input
//! downsampled by exactly 128.

mod config;
mod weights;

pub use config::{ArchConfig, DropoutRule, Mode, Tap, CLS_DOWNSAMPLE, MAX_SCALES};
pub use weights::{load_weights, read_weight_file, save_weights, write_weight_file, WeightRecord};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::RngState;
use crate::tensor::{
    add, avgpool2d, clamp, concat_channels, conv2d, dropout, maxpool2d, reduce_max_spatial, relu, sigmoid,
    upsample_bilinear, Tensor,
};

/// Probabilities leaving the classification heads are kept inside this band.
pub const PROB_EPS: f64 = 1e-7;

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Main,
    SegHead,
    ClsHead,
}

/// A named trainable tensor. Convolution weights carry `decay = true` and
/// enter the L2 term; biases do not.
#[derive(Clone, Debug)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub decay: bool,
    pub group: ParamGroup,
}

struct Builder<'a, T: Real> {
    params: Vec<Parameter<T>>,
    rng: &'a mut RngState,
    group: ParamGroup,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv<T> {
        let fan_in = cin * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let n = cout * fan_in;
        let w: Vec<T> = self.rng.with(|r| {
            use rand_distr::{Distribution, StandardNormal};
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(r);
                    T::lit(z * std)
                })
                .collect()
        });
        let weight = Tensor::leaf(&[cout, cin, k, k], w).expect("shape");
        let bias = Tensor::leaf(&[cout], vec![T::zero(); cout]).expect("shape");
        self.params.push(Parameter { name: format!("{name}.weight"), tensor: weight.clone(), decay: true, group: self.group });
        self.params.push(Parameter { name: format!("{name}.bias"), tensor: bias.clone(), decay: false, group: self.group });
        Conv { weight, bias, pad: k / 2 }
    }

    /// 1x1 projection, only when the widths differ.
    fn projection(&mut self, name: &str, cin: usize, cout: usize) -> Option<Conv<T>> {
        (cin != cout).then(|| self.conv(name, cin, cout, 1))
    }
}

struct Conv<T: Real> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    pad: usize,
}

impl<T: Real> Conv<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, Some(&self.bias), 1, self.pad)
    }

    fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// conv3x3 -> relu -> dropout -> conv3x3, skip add, relu.
pub struct ResidualBlock<T: Real> {
    conv1: Conv<T>,
    conv2: Conv<T>,
    rate: f64,
    stream: u64,
}

impl<T: Real> ResidualBlock<T> {
    pub fn forward(&self, x: &Tensor<T>, training: bool, rng: &RngState) -> Result<Tensor<T>> {
        let h = relu(&self.conv1.forward(x)?);
        let h = dropout(&h, self.rate, training, &mut rng.fork(self.stream));
        let h = self.conv2.forward(&h)?;
        Ok(relu(&add(x, &h)?))
    }

    pub fn dropout_rate(&self) -> f64 {
        self.rate
    }

    /// The two convolution weight tensors.
    pub fn conv_weights(&self) -> [&Tensor<T>; 2] {
        [&self.conv1.weight, &self.conv2.weight]
    }
}

struct EncoderStage<T: Real> {
    proj: Option<Conv<T>>,
    blocks: Vec<ResidualBlock<T>>,
}

struct DecoderStage<T: Real> {
    proj: Option<Conv<T>>,
    fuse: Conv<T>,
    blocks: Vec<ResidualBlock<T>>,
}

struct SegHead<T: Real> {
    conv: Conv<T>,
    factor: usize,
}

struct ClsHead<T: Real> {
    conv1: Conv<T>,
    conv2: Conv<T>,
    avg_stride: usize,
    out: Conv<T>,
}

/// Supervision path attached to one level.
pub struct MultiTaskPath<T: Real> {
    pub level: usize,
    seg: Option<SegHead<T>>,
    cls: Option<ClsHead<T>>,
}

impl<T: Real> MultiTaskPath<T> {
    /// Structural downsampling of the classification branch relative to
    /// the network input: `2^level * 2 * 2 * avgpool`.
    pub fn cls_downsample(&self) -> Option<usize> {
        self.cls.as_ref().map(|c| (1 << self.level) * 4 * c.avg_stride)
    }

    pub fn seg_upsample(&self) -> Option<usize> {
        self.seg.as_ref().map(|s| s.factor)
    }
}

/// Outputs of one supervised level.
#[derive(Clone, Debug)]
pub struct LevelOutput<T: Real> {
    pub level: usize,
    /// `[N, 2, H, W]` logits at input resolution.
    pub seg_logits: Option<Tensor<T>>,
    /// `[N, 1, H / 128, W / 128]` probabilities, clamped into `[1e-7, 1 - 1e-7]`.
    pub cls_map: Option<Tensor<T>>,
}

/// Per-level outputs, ordered like `ArchConfig::supervision_levels`.
#[derive(Clone, Debug)]
pub struct HdsOutputs<T: Real> {
    pub levels: Vec<LevelOutput<T>>,
}

impl<T: Real> HdsOutputs<T> {
    pub fn level(&self, d: usize) -> Option<&LevelOutput<T>> {
        self.levels.iter().find(|l| l.level == d)
    }

    pub fn seg_logits(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.levels.iter().filter_map(|l| l.seg_logits.as_ref())
    }

    pub fn cls_maps(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.levels.iter().filter_map(|l| l.cls_map.as_ref())
    }
}

pub struct UResNet<T: Real> {
    config: ArchConfig,
    stem: Conv<T>,
    encoder: Vec<EncoderStage<T>>,
    decoder: Vec<DecoderStage<T>>,
    paths: Vec<MultiTaskPath<T>>,
    params: Vec<Parameter<T>>,
}

/// Builds the network with Kaiming-normal weights (variance `2 / fan_in`)
/// and zero biases. With `zero_init_residual`, the second convolution of
/// each residual block starts at zero instead.
pub fn build_model<T: Real>(config: &ArchConfig, rng: &mut RngState) -> Result<UResNet<T>> {
    config.validate()?;
    let s = config.scales;
    let ch = |d: usize| config.channels(d);
    let mut b = Builder { params: Vec::new(), rng, group: ParamGroup::Main };
    let mut stream = 0u64;
    let mut blocks = |b: &mut Builder<'_, T>, prefix: &str, n: usize, c: usize| -> Vec<ResidualBlock<T>> {
        (0..n)
            .map(|i| {
                stream += 1;
                ResidualBlock {
                    conv1: b.conv(&format!("{prefix}.block{i}.conv1"), c, c, 3),
                    conv2: b.conv(&format!("{prefix}.block{i}.conv2"), c, c, 3),
                    rate: config.dropout.rate(c),
                    stream,
                }
            })
            .collect()
    };

    let stem = b.conv("stem", 1, ch(0), 3);
    let mut encoder = Vec::with_capacity(s);
    for d in 0..s {
        let proj = if d == 0 { None } else { b.projection(&format!("enc{d}.proj"), ch(d - 1), ch(d)) };
        let blk = blocks(&mut b, &format!("enc{d}"), config.encoder_blocks[d], ch(d));
        encoder.push(EncoderStage { proj, blocks: blk });
    }
    let mut decoder: Vec<DecoderStage<T>> = Vec::with_capacity(s - 1);
    for d in (0..s - 1).rev() {
        let proj = b.projection(&format!("dec{d}.proj"), ch(d + 1), ch(d));
        let fuse = b.conv(&format!("dec{d}.fuse"), 2 * ch(d), ch(d), 1);
        let blk = blocks(&mut b, &format!("dec{d}"), config.decoder_blocks[d], ch(d));
        decoder.push(DecoderStage { proj, fuse, blocks: blk });
    }
    decoder.reverse();

    let mut paths = Vec::with_capacity(config.supervision_levels.len());
    for &d in &config.supervision_levels {
        let c = ch(d);
        let seg = config.mode.has_seg().then(|| {
            b.group = ParamGroup::SegHead;
            SegHead { conv: b.conv(&format!("path{d}.seg.conv"), c, 2, 1), factor: 1 << d }
        });
        let cls = config.mode.has_cls().then(|| {
            b.group = ParamGroup::ClsHead;
            ClsHead {
                conv1: b.conv(&format!("path{d}.cls.conv1"), c, c, 3),
                conv2: b.conv(&format!("path{d}.cls.conv2"), c, c, 3),
                avg_stride: 1 << (5 - d),
                out: b.conv(&format!("path{d}.cls.out"), c, 1, 1),
            }
        });
        let path = MultiTaskPath { level: d, seg, cls };
        if let Some(f) = path.cls_downsample() {
            debug_assert_eq!(f, CLS_DOWNSAMPLE);
        }
        paths.push(path);
    }
    if config.zero_init_residual {
        for blk in encoder.iter().flat_map(|e| &e.blocks).chain(decoder.iter().flat_map(|d| &d.blocks)) {
            blk.conv2.weight.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
    let params = b.params;
    Ok(UResNet { config: config.clone(), stem, encoder, decoder, paths, params })
}

impl<T: Real> UResNet<T> {
    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn paths(&self) -> &[MultiTaskPath<T>] {
        &self.paths
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn residual_blocks(&self) -> impl Iterator<Item = &ResidualBlock<T>> {
        self.encoder.iter().flat_map(|e| &e.blocks).chain(self.decoder.iter().flat_map(|d| &d.blocks))
    }

    /// 3x3 convolutions in the main stream (supervision paths excluded).
    pub fn count_conv3x3(&self) -> usize {
        let stem = usize::from(self.stem.kernel() == 3);
        let blocks: usize = self
            .residual_blocks()
            .map(|b| usize::from(b.conv1.kernel() == 3) + usize::from(b.conv2.kernel() == 3))
            .sum();
        let transitions = self
            .encoder
            .iter()
            .filter_map(|e| e.proj.as_ref())
            .chain(self.decoder.iter().flat_map(|d| d.proj.iter().chain(std::iter::once(&d.fuse))))
            .filter(|c| c.kernel() == 3)
            .count();
        stem + blocks + transitions
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4("forward")?;
        if c != 1 {
            return Err(Error::shape("forward", format!("expected 1 input channel, got {c}")));
        }
        let s = self.config.scales;
        if h % (1 << (s - 1)) != 0 || w % (1 << (s - 1)) != 0 {
            return Err(Error::shape(
                "forward",
                format!("input {h}x{w} not divisible by {} required at level {}", 1 << (s - 1), s - 1),
            ));
        }
        if self.config.mode.has_cls() && (h % CLS_DOWNSAMPLE != 0 || w % CLS_DOWNSAMPLE != 0) {
            let d = self.config.supervision_levels[0];
            return Err(Error::shape(
                "forward",
                format!("input {h}x{w} not divisible by {CLS_DOWNSAMPLE} required by the classification head at level {d}"),
            ));
        }
        Ok(())
    }

    /// Runs the network. `rng` seeds dropout; each call advances it by one
    /// step so consecutive training steps draw fresh masks.
    pub fn forward(&self, x: &Tensor<T>, training: bool, rng: &mut RngState) -> Result<HdsOutputs<T>> {
        self.check_input(x)?;
        let step = *rng;
        rng.counter += 1;
        let run = |blocks: &[ResidualBlock<T>], mut h: Tensor<T>| -> Result<Tensor<T>> {
            for blk in blocks {
                h = blk.forward(&h, training, &step)?;
            }
            Ok(h)
        };

        let mut skips = Vec::with_capacity(self.config.scales);
        let mut h = relu(&self.stem.forward(x)?);
        for (d, stage) in self.encoder.iter().enumerate() {
            if d > 0 {
                if let Some(p) = &stage.proj {
                    h = p.forward(&h)?;
                }
                h = maxpool2d(&h, 2)?;
            }
            h = run(&stage.blocks, h)?;
            skips.push(h.clone());
        }

        let deepest = self.config.scales - 1;
        let mut decoded: Vec<Option<Tensor<T>>> = vec![None; self.config.scales];
        decoded[deepest] = Some(h.clone());
        for d in (0..deepest).rev() {
            let stage = &self.decoder[d];
            if let Some(p) = &stage.proj {
                h = p.forward(&h)?;
            }
            h = upsample_bilinear(&h, 2)?;
            h = stage.fuse.forward(&concat_channels(&skips[d], &h)?)?;
            h = run(&stage.blocks, h)?;
            decoded[d] = Some(h.clone());
        }

        let mut levels = Vec::with_capacity(self.paths.len());
        for path in &self.paths {
            let d = path.level;
            let feat = match self.config.tap {
                Tap::Decoder => decoded[d].as_ref().expect("every level decoded"),
                Tap::Encoder => &skips[d],
            };
            let seg_logits = match &path.seg {
                Some(head) => Some(upsample_bilinear(&head.conv.forward(feat)?, head.factor)?),
                None => None,
            };
            let cls_map = match &path.cls {
                Some(head) => {
                    let c = maxpool2d(&relu(&head.conv1.forward(feat)?), 2)?;
                    let c = maxpool2d(&relu(&head.conv2.forward(&c)?), 2)?;
                    let c = avgpool2d(&c, head.avg_stride)?;
                    let p = sigmoid(&head.out.forward(&c)?);
                    Some(clamp(&p, T::lit(PROB_EPS), T::lit(1.0 - PROB_EPS)))
                }
                None => None,
            };
            levels.push(LevelOutput { level: d, seg_logits, cls_map });
        }
        Ok(HdsOutputs { levels })
    }
}

/// Image-level mass probability: the spatial maximum of a classification
/// map, shape `[N, 1]`.
pub fn image_probability<T: Real>(cls_map: &Tensor<T>) -> Result<Tensor<T>> {
    reduce_max_spatial(cls_map)
}
