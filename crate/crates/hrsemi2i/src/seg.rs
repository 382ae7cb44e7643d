//! Downstream semantic segmentation: a compact encoder-decoder trained on
//! source tiles (optionally mixed with their stylized versions), polynomial
//! learning-rate decay, and per-class IoU / mIoU evaluation on the target
//! domain.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{apply_conv, bind_params, harvest_grads, init_conv, Bound, ConvLayer, Params};
use crate::optim::{Adam, AdamConfig};
use crate::raster::{read_tile, Manifest, ManifestEntry, Tile, TileData, Domain, Split, CLASS_NAMES, NUM_CLASSES};
use crate::tape::{NodeId, Tape, Tensor};

pub const SEG_LOG_NAME: &str = "seg_loss_log.csv";
pub const SEG_LOG_HEADER: &str = "iter,loss,lr";
pub const SEG_PARAMS_NAME: &str = "segnet.bin";
pub const SEG_META_NAME: &str = "seg_meta.json";
pub const EVAL_CSV_HEADER: &str = "model,miou,background,vegetation,hydro,roads,buildings";

const SEG_INIT_STREAM: u64 = 21;
const SEG_DATA_STREAM: u64 = 0x4_0000_0000;

fn mix(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(stream)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    pub in_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    pub num_classes: usize,
    pub lr_base: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub batch_size: usize,
    pub iter_max: u64,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            in_channels: 4,
            encoder_channels: vec![8, 16],
            bottleneck_channels: 32,
            num_classes: NUM_CLASSES,
            lr_base: 1e-4,
            weight_decay: 5e-4,
            poly_power: 0.9,
            batch_size: 8,
            iter_max: 1500,
            seed: 13,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() {
            return Err(Error::config("encoder_channels must not be empty"));
        }
        if self.encoder_channels.iter().any(|&c| c == 0)
            || self.bottleneck_channels == 0
            || self.in_channels == 0
        {
            return Err(Error::config("channel widths must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if !(self.lr_base > 0.0) {
            return Err(Error::config(format!("lr_base must be > 0, got {}", self.lr_base)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if !(self.poly_power > 0.0) {
            return Err(Error::config(format!("poly_power must be > 0, got {}", self.poly_power)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.iter_max == 0 {
            return Err(Error::config("iter_max must be >= 1"));
        }
        Ok(())
    }

    pub fn downsample(&self) -> usize {
        1 << self.encoder_channels.len()
    }
}

/// lr_base * (1 - iter/iter_max)^poly_power.
pub fn poly_lr(cfg: &SegConfig, iter: u64) -> Result<f64> {
    if iter > cfg.iter_max {
        return Err(Error::config(format!(
            "iteration {iter} outside the schedule range 0..={}",
            cfg.iter_max
        )));
    }
    let frac = 1.0 - iter as f64 / cfg.iter_max as f64;
    Ok(cfg.lr_base * frac.powf(cfg.poly_power))
}

struct SegEncBlock {
    conv1: ConvLayer,
    conv2: ConvLayer,
}

struct SegDecBlock {
    up: ConvLayer,
    merge: ConvLayer,
}

/// Compact U-shaped segmentation net: per encoder level two 3x3 convs with
/// ReLU then a 2x2 max-pool; a two-conv bottleneck; a mirrored decoder with
/// skip concatenation; a 1x1 conv to class logits. Unlike the generator
/// blocks these convs carry no per-sample normalization: the segmenter must
/// stay sensitive to absolute radiometry, and instance statistics would
/// cancel exactly the per-band shifts that separate the two domains.
pub struct SegNet {
    pub config: SegConfig,
    pub params: Params,
    enc: Vec<SegEncBlock>,
    bottleneck: (ConvLayer, ConvLayer),
    dec: Vec<SegDecBlock>,
    head: ConvLayer,
}

fn conv_relu(t: &mut Tape, bound: &Bound, layer: ConvLayer, x: NodeId) -> NodeId {
    let c = apply_conv(t, bound, layer, x);
    t.relu(c)
}

fn init_conv3(params: &mut Params, rng: &mut ChaCha8Rng, name: &str, out_c: usize, in_c: usize) -> ConvLayer {
    init_conv(params, rng, name, out_c, in_c, 3, 1, 1)
}

impl SegNet {
    pub fn new(config: SegConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, SEG_INIT_STREAM));
        let mut params = Params::new();
        let mut enc = Vec::new();
        let mut in_c = config.in_channels;
        for (i, &c) in config.encoder_channels.iter().enumerate() {
            enc.push(SegEncBlock {
                conv1: init_conv3(&mut params, &mut rng, &format!("enc{i}.conv1"), c, in_c),
                conv2: init_conv3(&mut params, &mut rng, &format!("enc{i}.conv2"), c, c),
            });
            in_c = c;
        }
        let cb = config.bottleneck_channels;
        let bottleneck = (
            init_conv3(&mut params, &mut rng, "bott.conv1", cb, in_c),
            init_conv3(&mut params, &mut rng, "bott.conv2", cb, cb),
        );
        let mut dec = Vec::new();
        let mut prev = cb;
        for (i, &c) in config.encoder_channels.iter().rev().enumerate() {
            dec.push(SegDecBlock {
                up: init_conv3(&mut params, &mut rng, &format!("dec{i}.up"), c, prev),
                merge: init_conv3(&mut params, &mut rng, &format!("dec{i}.merge"), c, c + c),
            });
            prev = c;
        }
        let head = init_conv(&mut params, &mut rng, "head", config.num_classes, prev, 1, 1, 0);
        Ok(SegNet { config, params, enc, bottleneck, dec, head })
    }

    pub fn bind(&self, t: &mut Tape) -> Bound {
        bind_params(t, &self.params)
    }

    /// Class logits of shape num_classes x H x W.
    pub fn logits(&self, t: &mut Tape, bound: &Bound, x: NodeId) -> Result<NodeId> {
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
            let a = conv_relu(t, bound, block.conv1, cur);
            let b = conv_relu(t, bound, block.conv2, a);
            skips.push(b);
            cur = t.max_pool2(b);
        }
        let a = conv_relu(t, bound, self.bottleneck.0, cur);
        cur = conv_relu(t, bound, self.bottleneck.1, a);
        for (i, block) in self.dec.iter().enumerate() {
            let skip = skips[skips.len() - 1 - i];
            let up = t.upsample2(cur);
            let a = conv_relu(t, bound, block.up, up);
            let cat = t.concat_c(a, skip);
            cur = conv_relu(t, bound, block.merge, cat);
        }
        Ok(apply_conv(t, bound, self.head, cur))
    }

    pub fn forward_plain(&self, x: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new();
        let bound = self.bind(&mut t);
        let xid = t.leaf(x.clone());
        let out = self.logits(&mut t, &bound, xid)?;
        Ok(t.value(out).clone())
    }
}

/// Raw tile values with the training-set per-band means subtracted, scaled
/// by 1/127.5 for conditioning.
pub fn seg_input(tile: &Tile, band_means: &[f64]) -> Result<Tensor> {
    if band_means.len() != tile.bands {
        return Err(Error::shape(format!(
            "{} band means for a {}-band tile",
            band_means.len(),
            tile.bands
        )));
    }
    if !matches!(tile.data, TileData::U8(_)) {
        return Err(Error::Precondition("segmentation input tiles must be uint8".into()));
    }
    let raw = tile.to_f64();
    let px = tile.pixels_per_band();
    let mut out = Vec::with_capacity(raw.len());
    for (b, &mean) in band_means.iter().enumerate() {
        for v in &raw[b * px..(b + 1) * px] {
            out.push((v - mean) / 127.5);
        }
    }
    Ok(Tensor::from_vec(&[tile.bands, tile.height, tile.width], out))
}

/// A labelled training tile reference: the raster to feed and the label
/// raster whose classes supervise it.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedEntry {
    pub tile: PathBuf,
    pub labels: PathBuf,
}

/// Training set for segmentation: tile/label pairs plus the per-band means
/// of the whole set (used for input normalization everywhere downstream).
#[derive(Clone, Debug, PartialEq)]
pub struct MixedDataset {
    pub entries: Vec<MixedEntry>,
    pub band_means: Vec<f64>,
}

fn labelled_source_entries<'m>(manifest: &'m Manifest) -> Result<Vec<(&'m ManifestEntry, PathBuf)>> {
    let entries = manifest.select(Domain::Source, Split::Train);
    if entries.is_empty() {
        return Err(Error::data("manifest has no source train tiles"));
    }
    entries
        .into_iter()
        .map(|e| {
            let label = e
                .label_path
                .as_ref()
                .ok_or_else(|| Error::data(format!("{} has no label entry", e.path.display())))?;
            let label = manifest.resolve(label);
            if !label.exists() {
                return Err(Error::data(format!("missing label raster {}", label.display())));
            }
            Ok((e, label))
        })
        .collect()
}

fn band_means_over(entries: &[MixedEntry]) -> Result<Vec<f64>> {
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    for entry in entries {
        let tile = read_tile(&entry.tile)?;
        if !matches!(tile.data, TileData::U8(_)) {
            return Err(Error::Precondition(format!(
                "{}: training tiles must be uint8",
                entry.tile.display()
            )));
        }
        if sums.is_empty() {
            sums = vec![0.0; tile.bands];
            counts = vec![0; tile.bands];
        } else if sums.len() != tile.bands {
            return Err(Error::shape(format!(
                "{}: band count {} differs from {}",
                entry.tile.display(),
                tile.bands,
                sums.len()
            )));
        }
        let raw = tile.to_f64();
        let px = tile.pixels_per_band();
        for b in 0..tile.bands {
            sums[b] += raw[b * px..(b + 1) * px].iter().sum::<f64>();
            counts[b] += px as u64;
        }
    }
    Ok(sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect())
}

/// Originals plus their stylized counterparts (mirrored under
/// `stylized_dir`), every entry paired with the original label; per-band
/// means computed over the union.
pub fn prepare_training_set(manifest: &Manifest, stylized_dir: &Path) -> Result<MixedDataset> {
    let mut entries = Vec::new();
    for (e, label) in labelled_source_entries(manifest)? {
        let stylized = stylized_dir.join(&e.path);
        if !stylized.exists() {
            return Err(Error::data(format!(
                "missing stylized counterpart {}",
                stylized.display()
            )));
        }
        entries.push(MixedEntry { tile: manifest.resolve(&e.path), labels: label.clone() });
        entries.push(MixedEntry { tile: stylized, labels: label });
    }
    let band_means = band_means_over(&entries)?;
    Ok(MixedDataset { entries, band_means })
}

/// Originals only (the no-adaptation baseline), with means over originals.
pub fn original_training_set(manifest: &Manifest) -> Result<MixedDataset> {
    let mut entries = Vec::new();
    for (e, label) in labelled_source_entries(manifest)? {
        entries.push(MixedEntry { tile: manifest.resolve(&e.path), labels: label });
    }
    let band_means = band_means_over(&entries)?;
    Ok(MixedDataset { entries, band_means })
}

fn read_labels(path: &Path, height: usize, width: usize) -> Result<Vec<u8>> {
    let tile = read_tile(path)?;
    if tile.bands != 1 || tile.height != height || tile.width != width {
        return Err(Error::shape(format!(
            "{}: label raster {}x{}x{} does not match tile {height}x{width}",
            path.display(),
            tile.bands,
            tile.height,
            tile.width
        )));
    }
    match tile.data {
        TileData::U8(d) => {
            if let Some(&bad) = d.iter().find(|&&v| v as usize >= NUM_CLASSES) {
                return Err(Error::data(format!(
                    "{}: class id {bad} out of range",
                    path.display()
                )));
            }
            Ok(d)
        }
        TileData::F32(_) => Err(Error::Precondition(format!(
            "{}: labels must be uint8",
            path.display()
        ))),
    }
}

fn pick_entry<'e>(entries: &'e [MixedEntry], flat: u64, seed: u64) -> &'e MixedEntry {
    let n = entries.len() as u64;
    let epoch = flat / n;
    let pos = (flat % n) as usize;
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, SEG_DATA_STREAM.wrapping_add(epoch))));
    &entries[order[pos]]
}

#[derive(Serialize, Deserialize)]
struct SegMeta {
    config: SegConfig,
    band_means: Vec<f64>,
}

/// A trained segmentation network and the input normalization it was
/// trained with.
pub struct SegModel {
    pub net: SegNet,
    pub band_means: Vec<f64>,
}

impl SegModel {
    pub fn save(&self, dir: &Path, adam_t: u64) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.net.params.save(&dir.join(SEG_PARAMS_NAME), adam_t)?;
        let meta = SegMeta { config: self.net.config.clone(), band_means: self.band_means.clone() };
        fs::write(dir.join(SEG_META_NAME), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<SegModel> {
        let meta_path = dir.join(SEG_META_NAME);
        if !meta_path.exists() {
            return Err(Error::Checkpoint(format!("missing {}", meta_path.display())));
        }
        let meta: SegMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
        let mut net = SegNet::new(meta.config)?;
        net.params.restore(&dir.join(SEG_PARAMS_NAME))?;
        if meta.band_means.len() != net.config.in_channels {
            return Err(Error::Checkpoint(format!(
                "{} band means for {} input channels",
                meta.band_means.len(),
                net.config.in_channels
            )));
        }
        Ok(SegModel { net, band_means: meta.band_means })
    }

    /// Per-pixel argmax class map; ties break toward the lower class id.
    pub fn predict(&self, tile: &Tile) -> Result<Vec<u8>> {
        let x = seg_input(tile, &self.band_means)?;
        let logits = self.net.forward_plain(&x)?;
        let (c, h, w) = logits.dims3()?;
        let data = logits.data();
        let px = h * w;
        let mut out = vec![0u8; px];
        for p in 0..px {
            let mut best = 0usize;
            let mut best_v = data[p];
            for k in 1..c {
                let v = data[k * px + p];
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            out[p] = best as u8;
        }
        Ok(out)
    }
}

/// Train with cross-entropy, Adam with L2 weight decay, polynomial LR
/// decay, and gradient accumulation over `batch_size` tiles per step.
pub fn train_segmentation(
    mixed: &MixedDataset,
    cfg: &SegConfig,
    out_dir: &Path,
) -> Result<SegModel> {
    cfg.validate()?;
    if mixed.entries.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let mut net = SegNet::new(cfg.clone())?;
    let mut opt = Adam::new(AdamConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    });
    fs::create_dir_all(out_dir)?;
    let mut log = fs::File::create(out_dir.join(SEG_LOG_NAME))?;
    writeln!(log, "{SEG_LOG_HEADER}")?;
    for iter in 0..cfg.iter_max {
        let lr = poly_lr(cfg, iter)?;
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; net.params.entries.len()];
        let mut loss = 0.0;
        for j in 0..cfg.batch_size {
            let flat = iter * cfg.batch_size as u64 + j as u64;
            let entry = pick_entry(&mixed.entries, flat, cfg.seed);
            let tile = read_tile(&entry.tile)?;
            let labels = read_labels(&entry.labels, tile.height, tile.width)?;
            let x = seg_input(&tile, &mixed.band_means)?;
            let mut t = Tape::new();
            let bound = net.bind(&mut t);
            let xid = t.leaf(x);
            let logits = net.logits(&mut t, &bound, xid)?;
            let ce = t.cross_entropy_2d(logits, &labels);
            let scaled = t.scale(ce, 1.0 / cfg.batch_size as f64);
            let v = t.value(scaled).item();
            if !v.is_finite() {
                return Err(Error::Numeric { term: "seg_cross_entropy".into(), iteration: iter });
            }
            loss += v;
            t.backward(scaled);
            for (slot, g) in acc.iter_mut().zip(harvest_grads(&t, &bound)) {
                match (slot.as_mut(), g) {
                    (Some(sum), Some(g)) => {
                        for (s, v) in sum.iter_mut().zip(&g) {
                            *s += v;
                        }
                    }
                    (None, Some(g)) => *slot = Some(g),
                    _ => {}
                }
            }
        }
        opt.step(&mut net.params.entries, &acc, lr);
        writeln!(log, "{iter},{loss},{lr}")?;
    }
    let model = SegModel { net, band_means: mixed.band_means.clone() };
    model.save(out_dir, opt.t)?;
    Ok(model)
}

/// 5x5 pixel counts, rows ground truth, columns prediction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfusionMatrix {
    counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, truth: &[u8], pred: &[u8]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::shape(format!(
                "truth has {} pixels, prediction {}",
                truth.len(),
                pred.len()
            )));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t as usize >= NUM_CLASSES || p as usize >= NUM_CLASSES {
                return Err(Error::data(format!("class id {} out of range", t.max(p))));
            }
            self.counts[t as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// TP/(TP+FP+FN); None when the class appears in neither truth nor
    /// prediction.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.counts[class][class];
        let fn_: u64 = self.counts[class].iter().sum::<u64>() - tp;
        let fp: u64 = (0..NUM_CLASSES).map(|i| self.counts[i][class]).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        if denom == 0 {
            None
        } else {
            Some(tp as f64 / denom as f64)
        }
    }

    pub fn per_class_iou(&self) -> [Option<f64>; NUM_CLASSES] {
        std::array::from_fn(|k| self.iou(k))
    }

    /// Unweighted mean over the classes present in truth or prediction.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub confusion: ConfusionMatrix,
    pub per_class: [Option<f64>; NUM_CLASSES],
    pub miou: f64,
}

impl From<ConfusionMatrix> for EvalResult {
    fn from(confusion: ConfusionMatrix) -> Self {
        let per_class = confusion.per_class_iou();
        let miou = confusion.miou();
        EvalResult { confusion, per_class, miou }
    }
}

/// Score every labelled target tile in the manifest.
pub fn evaluate(model: &SegModel, manifest: &Manifest) -> Result<EvalResult> {
    let targets: Vec<&ManifestEntry> =
        manifest.entries.iter().filter(|e| e.domain == Domain::Target).collect();
    if targets.is_empty() {
        return Err(Error::data("manifest has no target tiles to evaluate"));
    }
    let mut cm = ConfusionMatrix::new();
    for entry in targets {
        let tile = read_tile(&manifest.resolve(&entry.path))?;
        let truth = tile
            .labels
            .clone()
            .ok_or_else(|| Error::data(format!("{} has no labels", entry.path.display())))?;
        let pred = model.predict(&tile)?;
        cm.record(&truth, &pred)?;
    }
    Ok(EvalResult::from(cm))
}

/// Table rows `model,miou,<five per-class IoUs>`; absent classes print as
/// empty cells.
pub fn write_eval_csv(rows: &[(String, EvalResult)], path: &Path) -> Result<()> {
    debug_assert_eq!(CLASS_NAMES.len(), NUM_CLASSES);
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for (name, result) in rows {
        if name.contains(',') || name.contains('\n') {
            return Err(Error::Format(format!("model name {name:?} contains CSV delimiters")));
        }
        out.push_str(name);
        out.push_str(&format!(",{}", result.miou));
        for iou in result.per_class {
            match iou {
                Some(v) => out.push_str(&format!(",{v}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
