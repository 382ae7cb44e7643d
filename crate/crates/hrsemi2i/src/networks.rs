//! Generator and patch-discriminator architectures.
//!
//! The generator is a three-block U-Net encoder (two 3x3 convs with
//! per-channel normalization and ReLU, then a 2x2 max-pool), three residual
//! blocks at the bottleneck width, and a mirrored decoder (nearest x2
//! upsample + conv, skip concatenation + conv) closed by a 4-channel conv
//! with tanh. The discriminator is five 4x4 stride-2 convolutions with
//! leaky ReLU, un-affine normalization on the middle layers, dropout, and a
//! sigmoid patch output.
//!
//! Normalization always uses the statistics of the current sample (batches
//! are single tiles throughout), in training and inference alike.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{moments, set_moments, Param};
use crate::style::tape_channel_stats;
use crate::tape::{conv_out_dims, NodeId, Tape, Tensor};

const PARAMS_MAGIC: &[u8; 4] = b"MBP1";

/// Named parameter tensors of one network, in a stable order.
#[derive(Clone, Debug)]
pub struct Params {
    pub entries: Vec<Param>,
    pub names: Vec<String>,
}

impl Params {
    pub(crate) fn new() -> Self {
        Params { entries: Vec::new(), names: Vec::new() }
    }

    pub(crate) fn push(&mut self, name: String, shape: Vec<usize>, values: Vec<f64>) -> usize {
        self.entries.push(Param::new(shape, values));
        self.names.push(name);
        self.entries.len() - 1
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|p| p.numel()).sum()
    }

    /// FNV-1a over the parameter value bits; moments excluded.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in &self.entries {
            for v in &p.values {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// Serialize values and Adam moments with the optimizer step count.
    pub fn save(&self, path: &Path, adam_t: u64) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(PARAMS_MAGIC);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        buf.extend_from_slice(&adam_t.to_le_bytes());
        for (p, name) in self.entries.iter().zip(&self.names) {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(p.shape.len() as u8);
            for &d in &p.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let (m, v) = moments(p);
            for series in [&p.values[..], m, v] {
                for x in series {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    /// Inverse of [`Params::save`]; returns the stored optimizer step count.
    pub fn load(path: &Path) -> Result<(Params, u64)> {
        let buf = fs::read(path)?;
        let mut cur = Cursor { buf: &buf, at: 0, path };
        if cur.take(4)? != PARAMS_MAGIC {
            return Err(Error::Format(format!("{}: bad parameter archive magic", path.display())));
        }
        let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let adam_t = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
        let mut params = Params::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Corrupt(format!("{}: non-UTF-8 name", path.display())))?;
            let ndim = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let mut series = [Vec::new(), Vec::new(), Vec::new()];
            for s in &mut series {
                *s = cur
                    .take(n * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
            }
            let [values, m, v] = series;
            let idx = params.push(name, shape, values);
            set_moments(&mut params.entries[idx], m, v);
        }
        if cur.at != buf.len() {
            return Err(Error::Corrupt(format!("{}: trailing bytes in archive", path.display())));
        }
        Ok((params, adam_t))
    }

    /// Replace this param set with the archive's contents after checking
    /// that names and shapes match; returns the stored optimizer step count.
    pub fn restore(&mut self, path: &Path) -> Result<u64> {
        if !path.exists() {
            return Err(Error::Checkpoint(format!(
                "missing parameter archive {}",
                path.display()
            )));
        }
        let (loaded, adam_t) = Params::load(path)?;
        if loaded.names != self.names {
            return Err(Error::Checkpoint(format!(
                "{}: archive layout does not match the configured architecture",
                path.display()
            )));
        }
        for (a, b) in loaded.entries.iter().zip(&self.entries) {
            if a.shape != b.shape {
                return Err(Error::Checkpoint(format!(
                    "{}: parameter shape {:?} does not match configured {:?}",
                    path.display(),
                    a.shape,
                    b.shape
                )));
            }
        }
        *self = loaded;
        Ok(adam_t)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Corrupt(format!("{}: truncated archive", self.path.display())));
        }
        self.at += n;
        Ok(&self.buf[self.at - n..self.at])
    }
}

/// Tape leaves for every parameter of a network, in entry order.
pub struct Bound {
    pub ids: Vec<NodeId>,
}

pub(crate) fn bind_params(t: &mut Tape, params: &Params) -> Bound {
    let ids = params
        .entries
        .iter()
        .map(|p| t.leaf(Tensor::from_vec(&p.shape, p.values.clone())))
        .collect();
    Bound { ids }
}

/// Collect d(root)/d(param) for every bound parameter after a backward pass.
pub fn harvest_grads(t: &Tape, bound: &Bound) -> Vec<Option<Vec<f64>>> {
    bound.ids.iter().map(|&id| t.grad(id).map(|g| g.data().to_vec())).collect()
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvLayer {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormLayer {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvNorm {
    pub(crate) conv: ConvLayer,
    pub(crate) norm: NormLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub residual_blocks: usize,
    pub residual_channels: usize,
    pub decoder_channels: Vec<usize>,
    pub out_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::with_encoder(&[64, 128, 256])
    }
}

impl GeneratorConfig {
    /// Mirrored config: decoder reverses the encoder, bottleneck keeps the
    /// deepest width, three residual blocks.
    pub fn with_encoder(channels: &[usize]) -> Self {
        let mut decoder: Vec<usize> = channels.to_vec();
        decoder.reverse();
        GeneratorConfig {
            in_channels: 4,
            encoder_channels: channels.to_vec(),
            residual_blocks: 3,
            residual_channels: *channels.last().unwrap_or(&0),
            decoder_channels: decoder,
            out_channels: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() {
            return Err(Error::config("encoder_channels must not be empty"));
        }
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return Err(Error::config("channel widths must be positive"));
        }
        let mirrored: Vec<usize> = self.encoder_channels.iter().rev().copied().collect();
        if self.decoder_channels != mirrored {
            return Err(Error::config(format!(
                "decoder {:?} must mirror encoder {:?}",
                self.decoder_channels, self.encoder_channels
            )));
        }
        if self.residual_channels != *self.encoder_channels.last().unwrap() {
            return Err(Error::config(format!(
                "residual_channels {} must equal the last encoder width {}",
                self.residual_channels,
                self.encoder_channels.last().unwrap()
            )));
        }
        if self.residual_blocks == 0 {
            return Err(Error::config("at least one residual block is required"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("in/out channel counts must be positive"));
        }
        Ok(())
    }

    /// Spatial downsampling factor of the encoder.
    pub fn downsample(&self) -> usize {
        1 << self.encoder_channels.len()
    }
}

struct EncBlock {
    conv1: ConvNorm,
    conv2: ConvNorm,
}

struct ResBlock {
    conv1: ConvNorm,
    conv2: ConvNorm,
}

struct DecBlock {
    up: ConvNorm,
    merge: ConvNorm,
}

/// Encoder outputs: the post-residual bottleneck and the pre-pool skip
/// activations, shallowest first.
pub struct Encoded {
    pub bottleneck: NodeId,
    pub skips: Vec<NodeId>,
}

pub struct Generator {
    pub config: GeneratorConfig,
    pub params: Params,
    enc: Vec<EncBlock>,
    res: Vec<ResBlock>,
    dec: Vec<DecBlock>,
    final_conv: ConvLayer,
}

pub(crate) fn init_conv(
    params: &mut Params,
    rng: &mut ChaCha8Rng,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> ConvLayer {
    let dist = Normal::new(0.0, 0.02).unwrap();
    let w: Vec<f64> = (0..out_c * in_c * k * k).map(|_| dist.sample(rng)).collect();
    let wi = params.push(format!("{name}.weight"), vec![out_c, in_c, k, k], w);
    let bi = params.push(format!("{name}.bias"), vec![out_c], vec![0.0; out_c]);
    ConvLayer { w: wi, b: bi, stride, pad }
}

pub(crate) fn init_norm(params: &mut Params, name: &str, c: usize) -> NormLayer {
    let gamma = params.push(format!("{name}.gamma"), vec![c], vec![1.0; c]);
    let beta = params.push(format!("{name}.beta"), vec![c], vec![0.0; c]);
    NormLayer { gamma, beta }
}

pub(crate) fn init_conv_norm(
    params: &mut Params,
    rng: &mut ChaCha8Rng,
    name: &str,
    out_c: usize,
    in_c: usize,
) -> ConvNorm {
    ConvNorm {
        conv: init_conv(params, rng, name, out_c, in_c, 3, 1, 1),
        norm: init_norm(params, &format!("{name}.norm"), out_c),
    }
}

pub(crate) fn apply_conv(t: &mut Tape, bound: &Bound, layer: ConvLayer, x: NodeId) -> NodeId {
    t.conv2d(x, bound.ids[layer.w], Some(bound.ids[layer.b]), layer.stride, layer.pad)
}

/// Affine per-channel normalization over current-sample statistics.
pub(crate) fn apply_norm(t: &mut Tape, bound: &Bound, layer: NormLayer, x: NodeId) -> NodeId {
    let (mu, sigma) = tape_channel_stats(t, x);
    let centered = t.sub_vec(x, mu);
    let normed = t.div_vec(centered, sigma);
    let scaled = t.mul_vec(normed, bound.ids[layer.gamma]);
    t.add_vec(scaled, bound.ids[layer.beta])
}

pub(crate) fn conv_norm_relu(t: &mut Tape, bound: &Bound, cn: ConvNorm, x: NodeId) -> NodeId {
    let c = apply_conv(t, bound, cn.conv, x);
    let n = apply_norm(t, bound, cn.norm, c);
    t.relu(n)
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mut enc = Vec::new();
        let mut in_c = config.in_channels;
        for (i, &c) in config.encoder_channels.iter().enumerate() {
            enc.push(EncBlock {
                conv1: init_conv_norm(&mut params, &mut rng, &format!("enc{i}.conv1"), c, in_c),
                conv2: init_conv_norm(&mut params, &mut rng, &format!("enc{i}.conv2"), c, c),
            });
            in_c = c;
        }
        let rc = config.residual_channels;
        let res = (0..config.residual_blocks)
            .map(|i| ResBlock {
                conv1: init_conv_norm(&mut params, &mut rng, &format!("res{i}.conv1"), rc, rc),
                conv2: init_conv_norm(&mut params, &mut rng, &format!("res{i}.conv2"), rc, rc),
            })
            .collect();
        let mut dec = Vec::new();
        let mut prev = rc;
        for (i, &c) in config.decoder_channels.iter().enumerate() {
            // the skip concatenated at this depth has this block's width
            dec.push(DecBlock {
                up: init_conv_norm(&mut params, &mut rng, &format!("dec{i}.up"), c, prev),
                merge: init_conv_norm(&mut params, &mut rng, &format!("dec{i}.merge"), c, c + c),
            });
            prev = c;
        }
        let final_conv =
            init_conv(&mut params, &mut rng, "final", config.out_channels, prev, 3, 1, 1);
        Ok(Generator { config, params, enc, res, dec, final_conv })
    }

    pub fn bind(&self, t: &mut Tape) -> Bound {
        bind_params(t, &self.params)
    }

    /// Encoder plus residual bottleneck. Skips are the pre-pool activations.
    pub fn encode(&self, t: &mut Tape, bound: &Bound, x: NodeId) -> Result<Encoded> {
        let (c, h, w) = t.value(x).dims3()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let f = self.config.downsample();
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} must be divisible by the downsampling factor {f}"
            )));
        }
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut cur = x;
        for block in &self.enc {
            let a = conv_norm_relu(t, bound, block.conv1, cur);
            let b = conv_norm_relu(t, bound, block.conv2, a);
            skips.push(b);
            cur = t.max_pool2(b);
        }
        for block in &self.res {
            let a = conv_norm_relu(t, bound, block.conv1, cur);
            let b = apply_conv(t, bound, block.conv2.conv, a);
            let n = apply_norm(t, bound, block.conv2.norm, b);
            cur = t.add(n, cur);
        }
        Ok(Encoded { bottleneck: cur, skips })
    }

    /// Decoder: per block, upsample + conv, then concat the matching skip
    /// (deepest first) + conv; closes with the output conv and tanh.
    pub fn decode(&self, t: &mut Tape, bound: &Bound, bottleneck: NodeId, skips: &[NodeId]) -> Result<NodeId> {
        if skips.len() != self.dec.len() {
            return Err(Error::shape(format!(
                "expected {} skip tensors, got {}",
                self.dec.len(),
                skips.len()
            )));
        }
        let mut cur = bottleneck;
        for (i, block) in self.dec.iter().enumerate() {
            let skip = skips[skips.len() - 1 - i];
            let up = t.upsample2(cur);
            let a = conv_norm_relu(t, bound, block.up, up);
            let (ca, ha, wa) = t.value(a).dims3()?;
            let (cs, hs, ws) = t.value(skip).dims3()?;
            if (ha, wa) != (hs, ws) || ca != cs {
                return Err(Error::shape(format!(
                    "skip {cs}x{hs}x{ws} does not match decoder activation {ca}x{ha}x{wa}"
                )));
            }
            let cat = t.concat_c(a, skip);
            cur = conv_norm_relu(t, bound, block.merge, cat);
        }
        let out = apply_conv(t, bound, self.final_conv, cur);
        Ok(t.tanh(out))
    }

    /// encode + decode on a throwaway tape, without AdaIN restyling.
    pub fn forward_plain(&self, x: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let bound = self.bind(&mut t);
        let xid = t.leaf(x.clone());
        let enc = self.encode(&mut t, &bound, xid)?;
        let out = self.decode(&mut t, &bound, enc.bottleneck, &enc.skips)?;
        Ok(t.value(out).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    /// Five output widths, the last of which must be 1.
    pub channels: Vec<usize>,
    pub leaky_slope: f64,
    pub dropout: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            in_channels: 4,
            channels: vec![64, 128, 256, 512, 1],
            leaky_slope: 0.2,
            dropout: 0.5,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 5 {
            return Err(Error::config(format!(
                "discriminator needs exactly 5 layers, got {}",
                self.channels.len()
            )));
        }
        if *self.channels.last().unwrap() != 1 {
            return Err(Error::config("final discriminator channel count must be 1"));
        }
        if self.channels.iter().any(|&c| c == 0) || self.in_channels == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0,1)"));
        }
        if self.leaky_slope <= 0.0 || self.leaky_slope >= 1.0 {
            return Err(Error::config("leaky_slope must lie in (0,1)"));
        }
        Ok(())
    }
}

struct DiscLayer {
    conv: ConvLayer,
    normalized: bool,
}

pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: Params,
    layers: Vec<DiscLayer>,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mut layers = Vec::new();
        let mut in_c = config.in_channels;
        for (i, &c) in config.channels.iter().enumerate() {
            layers.push(DiscLayer {
                conv: init_conv(&mut params, &mut rng, &format!("disc{i}"), c, in_c, 4, 2, 1),
                // layers 2-4 carry normalization; first and last do not
                normalized: i >= 1 && i + 1 < config.channels.len(),
            });
            in_c = c;
        }
        Ok(Discriminator { config, params, layers })
    }

    pub fn bind(&self, t: &mut Tape) -> Bound {
        bind_params(t, &self.params)
    }

    /// Patch probability map. Dropout fires only when `train` is set; the
    /// final layer goes straight from conv to sigmoid.
    pub fn discriminate(
        &self,
        t: &mut Tape,
        bound: &Bound,
        x: NodeId,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let (c, h, w) = t.value(x).dims3()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h < 32 || w < 32 {
            return Err(Error::shape(format!("discriminator input {h}x{w} below 32x32 minimum")));
        }
        let mut cur = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = apply_conv(t, bound, layer.conv, cur);
            if i == last {
                return Ok(t.sigmoid(cur));
            }
            cur = t.leaky_relu(cur, self.config.leaky_slope);
            if layer.normalized {
                let (mu, sigma) = tape_channel_stats(t, cur);
                let centered = t.sub_vec(cur, mu);
                cur = t.div_vec(centered, sigma);
            }
            if train && self.config.dropout > 0.0 {
                cur = t.dropout(cur, self.config.dropout, rng);
            }
        }
        unreachable!("loop returns at the final layer")
    }

    /// Probability map on a throwaway tape with dropout disabled.
    pub fn forward_plain(&self, x: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let bound = self.bind(&mut t);
        let xid = t.leaf(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.discriminate(&mut t, &bound, xid, false, &mut rng)?;
        Ok(t.value(out).clone())
    }

    /// Output spatial size for a given input size.
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let (mut oh, mut ow) = (h, w);
        for _ in &self.layers {
            let d = conv_out_dims(oh, ow, 4, 2, 1);
            oh = d.0;
            ow = d.1;
        }
        (oh, ow)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            &[c, h, w],
            (0..c * h * w).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
        )
    }

    #[test]
    fn default_config_is_the_reference_architecture() {
        let cfg = GeneratorConfig::default();
        assert_eq!(cfg.encoder_channels, vec![64, 128, 256]);
        assert_eq!(cfg.decoder_channels, vec![256, 128, 64]);
        assert_eq!(cfg.residual_channels, 256);
        assert_eq!(cfg.residual_blocks, 3);
        assert_eq!(cfg.downsample(), 8);
        cfg.validate().unwrap();
        let d = DiscriminatorConfig::default();
        assert_eq!(d.channels, vec![64, 128, 256, 512, 1]);
        d.validate().unwrap();
    }

    #[test]
    fn config_invariants_are_enforced() {
        let mut cfg = GeneratorConfig::default();
        cfg.decoder_channels = vec![128, 256, 64];
        assert!(cfg.validate().is_err());
        let mut cfg = GeneratorConfig::default();
        cfg.residual_channels = 128;
        assert!(cfg.validate().is_err());
        let mut dc = DiscriminatorConfig::default();
        dc.channels = vec![64, 128, 1];
        assert!(dc.validate().is_err());
        let mut dc = DiscriminatorConfig::default();
        dc.channels = vec![64, 128, 256, 512, 3];
        assert!(dc.validate().is_err());
    }

    #[test]
    fn same_seed_means_same_init() {
        let cfg = GeneratorConfig::with_encoder(&[8, 16, 32]);
        let a = Generator::new(cfg.clone(), 42).unwrap();
        let b = Generator::new(cfg, 42).unwrap();
        assert_eq!(a.params.checksum(), b.params.checksum());
        let c = Generator::new(GeneratorConfig::with_encoder(&[8, 16, 32]), 43).unwrap();
        assert_ne!(a.params.checksum(), c.params.checksum());
    }

    #[test]
    fn generator_closes_shapes_and_bounds() {
        let gen = Generator::new(GeneratorConfig::with_encoder(&[8, 16, 32]), 1).unwrap();
        for (h, w) in [(8, 8), (16, 24), (32, 32)] {
            let x = random_input(2, 4, h, w);
            let y = gen.forward_plain(&x).unwrap();
            assert_eq!(y.shape(), &[4, h, w]);
            assert!(y.data().iter().all(|v| v.abs() < 1.0), "tanh bound violated");
        }
    }

    #[test]
    fn encoder_bottleneck_shape() {
        let gen = Generator::new(GeneratorConfig::with_encoder(&[8, 16, 32]), 1).unwrap();
        let mut t = Tape::new();
        let bound = gen.bind(&mut t);
        let x = t.leaf(random_input(3, 4, 64, 64));
        let enc = gen.encode(&mut t, &bound, x).unwrap();
        assert_eq!(t.value(enc.bottleneck).shape(), &[32, 8, 8]);
        assert_eq!(t.value(enc.skips[0]).shape(), &[8, 64, 64]);
        assert_eq!(t.value(enc.skips[1]).shape(), &[16, 32, 32]);
        assert_eq!(t.value(enc.skips[2]).shape(), &[32, 16, 16]);
    }

    #[test]
    fn encoder_rejects_indivisible_sizes() {
        let gen = Generator::new(GeneratorConfig::with_encoder(&[8, 16, 32]), 1).unwrap();
        let mut t = Tape::new();
        let bound = gen.bind(&mut t);
        let x = t.leaf(random_input(4, 4, 100, 104));
        assert!(matches!(gen.encode(&mut t, &bound, x), Err(Error::Shape(_))));
    }

    #[test]
    fn decoder_survives_zero_inputs() {
        let gen = Generator::new(GeneratorConfig::with_encoder(&[8, 16, 32]), 1).unwrap();
        let mut t = Tape::new();
        let bound = gen.bind(&mut t);
        let bottleneck = t.leaf(Tensor::zeros(&[32, 2, 2]));
        let skips = vec![
            t.leaf(Tensor::zeros(&[8, 16, 16])),
            t.leaf(Tensor::zeros(&[16, 8, 8])),
            t.leaf(Tensor::zeros(&[32, 4, 4])),
        ];
        let y = gen.decode(&mut t, &bound, bottleneck, &skips).unwrap();
        assert!(t.value(y).is_finite());
        assert_eq!(t.value(y).shape(), &[4, 16, 16]);
    }

    #[test]
    fn discriminator_shapes_and_bounds() {
        let cfg = DiscriminatorConfig { channels: vec![8, 16, 32, 64, 1], ..Default::default() };
        let disc = Discriminator::new(cfg, 5).unwrap();
        let y = disc.forward_plain(&random_input(6, 4, 64, 64)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let y = disc.forward_plain(&random_input(7, 4, 96, 64)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 2]);
        // extreme inputs stay inside (0,1)
        let big = Tensor::from_vec(&[4, 32, 32], vec![1e6; 4 * 32 * 32]);
        let y = disc.forward_plain(&big).unwrap();
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(matches!(
            disc.forward_plain(&random_input(8, 4, 16, 16)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn params_archive_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gen.bin");
        let gen = Generator::new(GeneratorConfig::with_encoder(&[8, 16, 32]), 9).unwrap();
        gen.params.save(&p, 123).unwrap();
        let (loaded, t) = Params::load(&p).unwrap();
        assert_eq!(t, 123);
        assert_eq!(loaded.names, gen.params.names);
        assert_eq!(loaded.checksum(), gen.params.checksum());
        for (a, b) in loaded.entries.iter().zip(&gen.params.entries) {
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.values, b.values);
            assert_eq!(moments(a), moments(b));
        }
    }

    #[test]
    fn truncated_archive_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gen.bin");
        let gen = Generator::new(GeneratorConfig::with_encoder(&[8, 16, 32]), 9).unwrap();
        gen.params.save(&p, 0).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(Params::load(&p), Err(Error::Corrupt(_))));
    }

    /// Evaluate a scalar function of the generator output, returning the
    /// value, the kink signature, and (optionally) parameter gradients.
    fn eval_generator(gen: &Generator, x: &Tensor, want_grads: bool) -> (f64, u64, Vec<Option<Vec<f64>>>) {
        let mut t = Tape::new();
        let bound = gen.bind(&mut t);
        let xid = t.leaf(x.clone());
        let enc = gen.encode(&mut t, &bound, xid).unwrap();
        let out = gen.decode(&mut t, &bound, enc.bottleneck, &enc.skips).unwrap();
        let sq = t.mul(out, out);
        let loss = t.mean_all(sq);
        let v = t.value(loss).item();
        let sig = t.kink_signature();
        if !want_grads {
            return (v, sig, Vec::new());
        }
        t.backward(loss);
        let grads = harvest_grads(&t, &bound);
        (v, sig, grads)
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        let gen = Generator::new(GeneratorConfig::with_encoder(&[8, 16, 32]), 77).unwrap();
        let x = random_input(78, 4, 8, 8);
        let (_, base_sig, grads) = eval_generator(&gen, &x, true);

        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let mut checked = 0;
        let mut attempts = 0;
        while checked < 40 && attempts < 400 {
            attempts += 1;
            let pi = rng.gen_range(0..gen.params.entries.len());
            let ei = rng.gen_range(0..gen.params.entries[pi].numel());
            let theta = gen.params.entries[pi].values[ei];
            let h = 1e-5 * theta.abs().max(1.0);
            let mut plus = Generator::new(gen.config.clone(), 77).unwrap();
            plus.params.entries[pi].values[ei] = theta + h;
            let mut minus = Generator::new(gen.config.clone(), 77).unwrap();
            minus.params.entries[pi].values[ei] = theta - h;
            let (vp, sp, _) = eval_generator(&plus, &x, false);
            let (vm, sm, _) = eval_generator(&minus, &x, false);
            if sp != base_sig || sm != base_sig {
                continue;
            }
            let fd = (vp - vm) / (2.0 * h);
            let ad = grads[pi].as_ref().map(|g| g[ei]).unwrap_or(0.0);
            assert!(
                (fd - ad).abs() <= 1e-3 * fd.abs().max(ad.abs()).max(1e-3),
                "param {pi}[{ei}]: fd={fd} ad={ad}"
            );
            checked += 1;
        }
        assert!(checked >= 40, "only {checked} comparable samples in {attempts} attempts");
    }
}
