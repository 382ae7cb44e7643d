//! Pipeline orchestration shared by the command-line tool and the
//! integration suite: one serializable configuration covering every stage,
//! a workspace directory layout, stage functions that read their inputs
//! from the previous stage's artifacts, and the per-band distribution
//! figure renderer.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{
    gaussian_smooth, histogram, read_histogram_csv, read_tile, write_histogram_csv, write_tile,
    Domain, Manifest, Tile, NUM_CLASSES,
};
use crate::seg::{
    evaluate, original_training_set, prepare_training_set, train_segmentation, write_eval_csv,
    EvalResult, SegConfig, SegModel,
};
use crate::synth::{generate_dataset, SceneSpec, StyleSpec};
use crate::trainer::{train, DaConfig, TrainState, CHECKPOINT_DIR_NAME};

pub const MANIFEST_NAME: &str = "manifest.csv";
pub const EVAL_CSV_NAME: &str = "eval.csv";
pub const FIGURE_NAME: &str = "distributions.svg";
pub const HIST_NAMES: [&str; 3] = ["source_hist.csv", "target_hist.csv", "stylized_hist.csv"];
pub const HIST_LABELS: [&str; 3] = ["source", "target", "stylized source"];

/// Paired synthetic scene generation: both domains share layouts and class
/// proportions and differ only in rendering style.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub scenes: usize,
    pub height: usize,
    pub width: usize,
    pub class_proportions: [f64; NUM_CLASSES],
    pub source_style: StyleSpec,
    pub target_style: StyleSpec,
}

impl SynthConfig {
    pub fn scene_specs(&self, seed: u64) -> (SceneSpec, SceneSpec) {
        let source = SceneSpec {
            seed,
            height: self.height,
            width: self.width,
            class_proportions: self.class_proportions,
            style: self.source_style.clone(),
        };
        let target = SceneSpec { style: self.target_style.clone(), ..source.clone() };
        (source, target)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(Error::config("scenes must be positive"));
        }
        let (source, target) = self.scene_specs(0);
        source.validate()?;
        target.validate()
    }
}

/// Everything one run needs: scene synthesis, optional target smoothing at
/// preparation, domain-adaptation training, and segmentation training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub smooth_sigma: Option<f64>,
    pub da: DaConfig,
    pub seg: SegConfig,
}

impl PipelineConfig {
    /// Scaled for a single CPU core: 200 scenes per domain at 64x64, the
    /// reduced network widths, 2000 adaptation steps.
    pub fn desk() -> Self {
        PipelineConfig {
            seed: 7,
            synth: SynthConfig {
                scenes: 200,
                height: 64,
                width: 64,
                class_proportions: [0.487, 0.382, 0.093, 0.018, 0.02],
                source_style: StyleSpec { noise_std: 5.0, ..StyleSpec::identity() },
                target_style: StyleSpec {
                    gains: [1.3; 4],
                    biases: [60.0; 4],
                    noise_std: 5.0,
                    smooth_sigma: None,
                },
            },
            smooth_sigma: None,
            da: DaConfig::desk(),
            seg: SegConfig::default(),
        }
    }

    /// Seconds-scale settings for exercising the whole pipeline: six 32x32
    /// scenes per domain, the narrowest networks, a handful of steps. The
    /// class proportions are coarser than desk so that every class is
    /// realizable on a 1024-pixel raster.
    pub fn smoke() -> Self {
        PipelineConfig {
            seed: 5,
            synth: SynthConfig {
                scenes: 6,
                height: 32,
                width: 32,
                class_proportions: [0.40, 0.30, 0.15, 0.08, 0.07],
                source_style: StyleSpec { noise_std: 2.0, ..StyleSpec::identity() },
                target_style: StyleSpec {
                    gains: [1.2; 4],
                    biases: [30.0; 4],
                    noise_std: 2.0,
                    smooth_sigma: None,
                },
            },
            smooth_sigma: Some(0.8),
            da: DaConfig {
                generator: crate::networks::GeneratorConfig::with_encoder(&[8, 16, 32]),
                discriminator: crate::networks::DiscriminatorConfig {
                    channels: vec![8, 16, 32, 64, 1],
                    ..Default::default()
                },
                iter_max: 4,
                iter_decay_start: 2,
                checkpoint_every: 2,
                seed: 5,
                ..DaConfig::desk()
            },
            seg: SegConfig {
                encoder_channels: vec![4, 8],
                bottleneck_channels: 16,
                batch_size: 2,
                iter_max: 4,
                seed: 5,
                ..SegConfig::default()
            },
        }
    }

    /// Full-scale settings: 512x512 tiles, default network widths, 100k
    /// adaptation steps, 90k segmentation steps.
    pub fn full_scale() -> Self {
        PipelineConfig {
            synth: SynthConfig { scenes: 2000, height: 512, width: 512, ..Self::desk().synth },
            smooth_sigma: Some(1.0),
            da: DaConfig::default(),
            seg: SegConfig {
                encoder_channels: vec![64, 128],
                bottleneck_channels: 256,
                iter_max: 90_000,
                ..SegConfig::default()
            },
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if let Some(sigma) = self.smooth_sigma {
            if !(sigma > 0.0) {
                return Err(Error::config(format!("smooth_sigma must be > 0, got {sigma}")));
            }
        }
        self.da.validate()?;
        self.seg.validate()?;
        let bands = 4;
        if self.da.generator.in_channels != bands || self.seg.in_channels != bands {
            return Err(Error::config("networks must accept the 4 raster bands"));
        }
        Ok(())
    }

    /// One seed drives every stage; the stages decorrelate internally.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.da.seed = seed;
        self.seg.seed = seed;
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::config(format!("config file {} does not exist", path.display())));
        }
        let cfg: PipelineConfig = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Which training set the segmentation stage uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegVariant {
    /// Source originals only: the no-adaptation reference.
    Baseline,
    /// Originals mixed with their stylized counterparts.
    Adapted,
}

impl SegVariant {
    pub fn row_name(self) -> &'static str {
        match self {
            SegVariant::Baseline => "baseline",
            SegVariant::Adapted => "adapted",
        }
    }
}

/// Fixed directory layout under one root; every stage reads the previous
/// stage's artifacts from here.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn data_manifest(&self) -> PathBuf {
        self.data_dir().join(MANIFEST_NAME)
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.root.join("prepared")
    }

    pub fn prepared_manifest(&self) -> PathBuf {
        self.prepared_dir().join(MANIFEST_NAME)
    }

    pub fn da_dir(&self) -> PathBuf {
        self.root.join("da")
    }

    pub fn da_checkpoint(&self) -> PathBuf {
        self.da_dir().join(CHECKPOINT_DIR_NAME)
    }

    pub fn stylized_dir(&self) -> PathBuf {
        self.root.join("stylized")
    }

    pub fn seg_dir(&self, variant: SegVariant) -> PathBuf {
        match variant {
            SegVariant::Baseline => self.root.join("seg_baseline"),
            SegVariant::Adapted => self.root.join("seg_adapted"),
        }
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.root.join("plots")
    }

    pub fn eval_csv(&self) -> PathBuf {
        self.root.join(EVAL_CSV_NAME)
    }

    pub fn figure(&self) -> PathBuf {
        self.plots_dir().join(FIGURE_NAME)
    }
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    if !path.exists() {
        return Err(Error::data(format!(
            "{} not found; run the producing stage first",
            path.display()
        )));
    }
    Manifest::load(path)
}

/// Generate the paired two-domain dataset under `data/`.
pub fn synth_stage(cfg: &PipelineConfig, ws: &Workspace) -> Result<Manifest> {
    cfg.validate()?;
    let (source, target) = cfg.synth.scene_specs(cfg.seed);
    generate_dataset(cfg.synth.scenes, &source, &target, &ws.data_dir())
}

/// Copy the raw dataset into `prepared/`, smoothing target tiles when a
/// sigma is configured. Tiles stay uint8 so every later stage sees
/// histogram-comparable values.
pub fn prepare_stage(cfg: &PipelineConfig, ws: &Workspace) -> Result<Manifest> {
    cfg.validate()?;
    let raw = load_manifest(&ws.data_manifest())?;
    raw.validate()?;
    let out_dir = ws.prepared_dir();
    for entry in &raw.entries {
        let tile = read_tile(&raw.resolve(&entry.path))?;
        let processed = match (entry.domain, cfg.smooth_sigma) {
            (Domain::Target, Some(sigma)) => gaussian_smooth(&tile, sigma)?,
            _ => tile,
        };
        let dest = out_dir.join(&entry.path);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        write_tile(&processed, &dest)?;
    }
    let prepared = Manifest { base: out_dir.clone(), entries: raw.entries.clone() };
    prepared.save(&out_dir.join(MANIFEST_NAME))?;
    Ok(prepared)
}

/// Run adaptation training on the prepared dataset; logs and checkpoints
/// land under `da/`.
pub fn train_da_stage(cfg: &PipelineConfig, ws: &Workspace) -> Result<TrainState> {
    cfg.validate()?;
    let manifest = load_manifest(&ws.prepared_manifest())?;
    train(&manifest, &cfg.da, &ws.da_dir())
}

/// Push every prepared source tile through the trained mapping into
/// `stylized/`, mirroring the dataset layout.
pub fn stylize_stage(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let state = TrainState::load_checkpoint(&ws.da_checkpoint())?;
    let manifest = load_manifest(&ws.prepared_manifest())?;
    state.stylize_manifest(&manifest, &ws.stylized_dir())
}

/// Train a segmentation model on originals only (baseline) or originals
/// mixed with stylized counterparts (adapted).
pub fn train_seg_stage(
    cfg: &PipelineConfig,
    ws: &Workspace,
    variant: SegVariant,
) -> Result<SegModel> {
    cfg.validate()?;
    let manifest = load_manifest(&ws.prepared_manifest())?;
    let dataset = match variant {
        SegVariant::Baseline => original_training_set(&manifest)?,
        SegVariant::Adapted => prepare_training_set(&manifest, &ws.stylized_dir())?,
    };
    train_segmentation(&dataset, &cfg.seg, &ws.seg_dir(variant))
}

/// Score stored segmentation models on the target tiles and write the
/// results table. The baseline row goes first when requested.
pub fn evaluate_stage(ws: &Workspace, include_baseline: bool) -> Result<Vec<(String, EvalResult)>> {
    let manifest = load_manifest(&ws.prepared_manifest())?;
    let mut rows = Vec::new();
    let mut variants = Vec::new();
    if include_baseline {
        variants.push(SegVariant::Baseline);
    }
    variants.push(SegVariant::Adapted);
    for variant in variants {
        let model = SegModel::load(&ws.seg_dir(variant))?;
        rows.push((variant.row_name().to_string(), evaluate(&model, &manifest)?));
    }
    write_eval_csv(&rows, &ws.eval_csv())?;
    Ok(rows)
}

fn domain_tiles(manifest: &Manifest, domain: Domain) -> Result<Vec<Tile>> {
    manifest
        .entries
        .iter()
        .filter(|e| e.domain == domain)
        .map(|e| read_tile(&manifest.resolve(&e.path)))
        .collect()
}

/// Recompute the source / target / stylized per-band histograms from the
/// prepared and stylized tiles and write them as CSVs under `plots/`.
pub fn histogram_stage(ws: &Workspace) -> Result<[PathBuf; 3]> {
    let manifest = load_manifest(&ws.prepared_manifest())?;
    let stylized: Vec<Tile> = manifest
        .entries
        .iter()
        .filter(|e| e.domain == Domain::Source)
        .map(|e| {
            let path = ws.stylized_dir().join(&e.path);
            if !path.exists() {
                return Err(Error::data(format!("missing stylized tile {}", path.display())));
            }
            read_tile(&path)
        })
        .collect::<Result<_>>()?;
    let sets = [
        histogram(&domain_tiles(&manifest, Domain::Source)?)?,
        histogram(&domain_tiles(&manifest, Domain::Target)?)?,
        histogram(&stylized)?,
    ];
    let dir = ws.plots_dir();
    fs::create_dir_all(&dir)?;
    let mut written = Vec::with_capacity(3);
    for (name, counts) in HIST_NAMES.iter().zip(&sets) {
        let path = dir.join(name);
        write_histogram_csv(counts, &path)?;
        written.push(path);
    }
    Ok(written.try_into().expect("three histogram paths"))
}

/// Render the pixel-value distribution figure from the histogram CSVs,
/// computing them first when absent.
pub fn plot_stage(ws: &Workspace) -> Result<PathBuf> {
    let dir = ws.plots_dir();
    if HIST_NAMES.iter().any(|n| !dir.join(n).exists()) {
        histogram_stage(ws)?;
    }
    let mut series = Vec::with_capacity(3);
    for (label, name) in HIST_LABELS.iter().zip(HIST_NAMES) {
        series.push((label.to_string(), read_histogram_csv(&dir.join(name))?));
    }
    let path = ws.figure();
    render_distribution_svg(&series, &path)?;
    Ok(path)
}

const SERIES_COLORS: [&str; 3] = ["#4269d0", "#ef7f1a", "#3ca951"];

/// One panel per band, one polyline per series, counts normalized to the
/// panel's maximum. Output is a plain self-contained SVG with no
/// timestamps, so identical inputs give identical bytes.
pub fn render_distribution_svg(series: &[(String, Vec<[u64; 256]>)], path: &Path) -> Result<()> {
    let Some(first) = series.first() else {
        return Err(Error::Precondition("no histogram series to plot".into()));
    };
    let bands = first.1.len();
    if bands == 0 {
        return Err(Error::Precondition("histogram series have no bands".into()));
    }
    if series.iter().any(|(_, s)| s.len() != bands) {
        return Err(Error::shape("histogram series disagree on band count"));
    }
    if series.len() > SERIES_COLORS.len() {
        return Err(Error::Precondition(format!(
            "at most {} series supported",
            SERIES_COLORS.len()
        )));
    }

    let (pw, ph, gap, margin, legend_h) = (330.0, 210.0, 20.0, 10.0, 26.0);
    let cols = 2.min(bands);
    let rows = bands.div_ceil(cols);
    let width = margin * 2.0 + cols as f64 * pw + (cols - 1) as f64 * gap;
    let height = margin * 2.0 + legend_h + rows as f64 * ph + (rows - 1) as f64 * gap;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    );
    let mut lx = margin + 4.0;
    for ((name, _), color) in series.iter().zip(SERIES_COLORS) {
        svg.push_str(&format!(
            "<line x1=\"{lx}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{tx}\" y=\"{ty}\">{name}</text>\n",
            y = margin + 10.0,
            x2 = lx + 24.0,
            tx = lx + 30.0,
            ty = margin + 14.0,
        ));
        lx += 30.0 + 9.0 * name.len() as f64 + 20.0;
    }

    for band in 0..bands {
        let px = margin + (band % cols) as f64 * (pw + gap);
        let py = margin + legend_h + (band / cols) as f64 * (ph + gap);
        let max = series
            .iter()
            .flat_map(|(_, s)| s[band].iter())
            .copied()
            .max()
            .unwrap_or(0)
            .max(1) as f64;
        let (x0, y0, iw, ih) = (px + 35.0, py + 20.0, pw - 50.0, ph - 50.0);
        svg.push_str(&format!(
            "<rect x=\"{x0}\" y=\"{y0}\" width=\"{iw}\" height=\"{ih}\" fill=\"none\" stroke=\"#ccc\"/>\n\
             <text x=\"{px}\" y=\"{ty}\">band {band}</text>\n\
             <text x=\"{x0}\" y=\"{ay}\">0</text>\n\
             <text x=\"{axr}\" y=\"{ay}\" text-anchor=\"end\">255</text>\n",
            ty = py + 14.0,
            ay = y0 + ih + 14.0,
            axr = x0 + iw,
        ));
        for ((_, s), color) in series.iter().zip(SERIES_COLORS) {
            let mut points = String::new();
            for (v, &count) in s[band].iter().enumerate() {
                let x = x0 + v as f64 / 255.0 * iw;
                let y = y0 + ih - count as f64 / max * ih;
                points.push_str(&format!("{x:.2},{y:.2} "));
            }
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                points.trim_end()
            ));
        }
    }
    svg.push_str("</svg>\n");
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, svg)?;
    Ok(())
}
