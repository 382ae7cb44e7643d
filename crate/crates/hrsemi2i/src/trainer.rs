//! Adversarial domain-adaptation training: the per-step update order
//! (generators first with discriminators frozen, then discriminators on
//! detached fakes, then global stats), learning-rate scheduling,
//! checkpointing, and stylization inference from a trained state.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{
    tape_gan_loss_discriminator, tape_gan_loss_generator, tape_gradient_loss,
    total_generator_loss, GeneratorTerms, LossReport, LossWeights,
};
use crate::networks::{
    harvest_grads, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
};
use crate::optim::{Adam, AdamConfig};
use crate::raster::{
    denormalize_values, normalize, read_tile, write_tile, Domain, Manifest, Split, Tile,
};
use crate::style::{tape_adain, tape_channel_stats, ChannelStats, DomainStats};
use crate::tape::{Tape, Tensor};

pub const LOSS_LOG_NAME: &str = "loss_log.csv";
pub const LR_LOG_NAME: &str = "lr_log.csv";
pub const LOSS_LOG_HEADER: &str = "iter,adv_g_st,adv_g_ts,cross,self,grad,total_g,loss_d_s,loss_d_t";
pub const LR_LOG_HEADER: &str = "iter,lr_g,lr_d";
pub const CHECKPOINT_DIR_NAME: &str = "checkpoint";

const CKPT_GEN_A: &str = "generator_a.bin";
const CKPT_GEN_B: &str = "generator_b.bin";
const CKPT_DISC_S: &str = "discriminator_s.bin";
const CKPT_DISC_T: &str = "discriminator_t.bin";
const CKPT_STATS_S: &str = "stats_source.json";
const CKPT_STATS_T: &str = "stats_target.json";
const CKPT_MANIFEST: &str = "checkpoint.json";

const GEN_A_STREAM: u64 = 1;
const GEN_B_STREAM: u64 = 2;
const DISC_S_STREAM: u64 = 3;
const DISC_T_STREAM: u64 = 4;
const STEP_STREAM: u64 = 0x1_0000_0000;
const DATA_SOURCE_STREAM: u64 = 0x2_0000_0000;
const DATA_TARGET_STREAM: u64 = 0x3_0000_0000;

fn mix(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(stream)
}

/// Flat learning rate until `iter_decay_start`, then linear decay to zero
/// at `iter_max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub lr_base: f64,
    pub iter_max: u64,
    pub iter_decay_start: u64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_base > 0.0) {
            return Err(Error::config(format!("lr_base must be > 0, got {}", self.lr_base)));
        }
        if self.iter_decay_start == 0 || self.iter_decay_start >= self.iter_max {
            return Err(Error::config(format!(
                "need 0 < iter_decay_start < iter_max, got {} / {}",
                self.iter_decay_start, self.iter_max
            )));
        }
        Ok(())
    }
}

pub fn lr_linear(cfg: &ScheduleConfig, iter: u64) -> Result<f64> {
    cfg.validate()?;
    if iter > cfg.iter_max {
        return Err(Error::config(format!(
            "iteration {iter} outside the schedule range 0..={}",
            cfg.iter_max
        )));
    }
    if iter <= cfg.iter_decay_start {
        return Ok(cfg.lr_base);
    }
    Ok(cfg.lr_base * (cfg.iter_max - iter) as f64 / (cfg.iter_max - cfg.iter_decay_start) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub weights: LossWeights,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub iter_max: u64,
    pub iter_decay_start: u64,
    pub stats_decay: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for DaConfig {
    fn default() -> Self {
        DaConfig {
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            weights: LossWeights::default(),
            lr_gen: 1e-4,
            lr_disc: 1e-5,
            iter_max: 100_000,
            iter_decay_start: 75_000,
            stats_decay: 0.99,
            checkpoint_every: 5_000,
            seed: 7,
        }
    }
}

impl DaConfig {
    /// Scaled-down variant sized for 64x64 tiles on a single CPU core.
    pub fn desk() -> Self {
        DaConfig {
            generator: GeneratorConfig::with_encoder(&[16, 32, 64]),
            discriminator: DiscriminatorConfig {
                channels: vec![16, 32, 64, 128, 1],
                ..Default::default()
            },
            iter_max: 2_000,
            iter_decay_start: 1_500,
            checkpoint_every: 1_000,
            ..Default::default()
        }
    }

    pub fn gen_schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            lr_base: self.lr_gen,
            iter_max: self.iter_max,
            iter_decay_start: self.iter_decay_start,
        }
    }

    pub fn disc_schedule(&self) -> ScheduleConfig {
        ScheduleConfig { lr_base: self.lr_disc, ..self.gen_schedule() }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.weights.validate()?;
        self.gen_schedule().validate()?;
        self.disc_schedule().validate()?;
        if self.generator.out_channels != self.generator.in_channels {
            return Err(Error::config(
                "generator out_channels must equal in_channels for reconstruction losses",
            ));
        }
        if self.discriminator.in_channels != self.generator.out_channels {
            return Err(Error::config(
                "discriminator in_channels must match generator out_channels",
            ));
        }
        if !(self.stats_decay > 0.0 && self.stats_decay < 1.0) {
            return Err(Error::config(format!(
                "stats_decay must lie in (0,1), got {}",
                self.stats_decay
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be >= 1"));
        }
        Ok(())
    }
}

/// Per-step loss values as logged: the generator report plus both
/// discriminator losses and the learning rates in effect.
#[derive(Clone, Copy, Debug)]
pub struct StepLosses {
    pub gen: LossReport,
    pub loss_d_s: f64,
    pub loss_d_t: f64,
    pub lr_g: f64,
    pub lr_d: f64,
}

/// Intermediate arrays of one training step, for external verification of
/// the loss definitions.
pub struct StepCapture {
    pub fake_a: Tensor,
    pub fake_b: Tensor,
    pub rec_s: Tensor,
    pub rec_t: Tensor,
    pub self_s: Tensor,
    pub self_t: Tensor,
}

/// All mutable training state: domain-A and domain-B generators (encoder +
/// residuals + decoder each), the two patch discriminators, one Adam per
/// network, and the accumulated per-domain global statistics.
pub struct TrainState {
    pub config: DaConfig,
    pub iteration: u64,
    pub gen_a: Generator,
    pub gen_b: Generator,
    pub disc_s: Discriminator,
    pub disc_t: Discriminator,
    pub stats_source: DomainStats,
    pub stats_target: DomainStats,
    opt_gen_a: Adam,
    opt_gen_b: Adam,
    opt_disc_s: Adam,
    opt_disc_t: Adam,
    rng: ChaCha8Rng,
}

fn at_iteration(e: Error, iteration: u64) -> Error {
    match e {
        Error::Numeric { term, .. } => Error::Numeric { term, iteration },
        other => other,
    }
}

impl TrainState {
    pub fn new(config: DaConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let channels = config.generator.residual_channels;
        Ok(TrainState {
            gen_a: Generator::new(config.generator.clone(), mix(seed, GEN_A_STREAM))?,
            gen_b: Generator::new(config.generator.clone(), mix(seed, GEN_B_STREAM))?,
            disc_s: Discriminator::new(config.discriminator.clone(), mix(seed, DISC_S_STREAM))?,
            disc_t: Discriminator::new(config.discriminator.clone(), mix(seed, DISC_T_STREAM))?,
            stats_source: DomainStats::new(channels, config.stats_decay)?,
            stats_target: DomainStats::new(channels, config.stats_decay)?,
            opt_gen_a: Adam::new(AdamConfig::default()),
            opt_gen_b: Adam::new(AdamConfig::default()),
            opt_disc_s: Adam::new(AdamConfig::default()),
            opt_disc_t: Adam::new(AdamConfig::default()),
            rng: ChaCha8Rng::seed_from_u64(mix(seed, STEP_STREAM)),
            iteration: 0,
            config,
        })
    }

    /// One full training step on a normalized source/target tile pair:
    /// generator update with frozen discriminators, discriminator update on
    /// the detached fakes, then the global-stats accumulation.
    pub fn train_step(&mut self, i_s: &Tensor, i_t: &Tensor) -> Result<StepLosses> {
        self.step_inner(i_s, i_t).map(|(losses, _)| losses)
    }

    /// [`TrainState::train_step`] that also returns the step's intermediate
    /// arrays (fakes and reconstructions) for loss verification.
    pub fn train_step_captured(&mut self, i_s: &Tensor, i_t: &Tensor) -> Result<(StepLosses, StepCapture)> {
        self.step_inner(i_s, i_t)
    }

    fn step_inner(&mut self, i_s: &Tensor, i_t: &Tensor) -> Result<(StepLosses, StepCapture)> {
        if self.iteration >= self.config.iter_max {
            return Err(Error::config(format!(
                "iteration {} is already at iter_max {}",
                self.iteration, self.config.iter_max
            )));
        }
        let lr_g = lr_linear(&self.config.gen_schedule(), self.iteration)?;
        let lr_d = lr_linear(&self.config.disc_schedule(), self.iteration)?;
        // reseeding per step makes a resumed run replay the interrupted one
        self.rng = ChaCha8Rng::seed_from_u64(mix(
            self.config.seed,
            STEP_STREAM.wrapping_add(self.iteration),
        ));
        let (report, capture, cur_s, cur_t) = self.generator_substep(i_s, i_t, lr_g)?;
        let (loss_d_s, loss_d_t) = self.discriminator_substep(i_s, i_t, &capture, lr_d)?;
        self.stats_source.update(&cur_s)?;
        self.stats_target.update(&cur_t)?;
        self.iteration += 1;
        Ok((StepLosses { gen: report, loss_d_s, loss_d_t, lr_g, lr_d }, capture))
    }

    /// Forward both translation directions with current-batch cross
    /// statistics, compute the four generator loss groups, and update only
    /// the generator weights. Returns the loss report, the captured
    /// intermediates, and the current-batch bottleneck stats per domain.
    fn generator_substep(
        &mut self,
        i_s: &Tensor,
        i_t: &Tensor,
        lr_g: f64,
    ) -> Result<(LossReport, StepCapture, ChannelStats, ChannelStats)> {
        let w = self.config.weights.clone();
        let mut t = Tape::new();
        let ba = self.gen_a.bind(&mut t);
        let bb = self.gen_b.bind(&mut t);
        let bds = self.disc_s.bind(&mut t);
        let bdt = self.disc_t.bind(&mut t);
        let is_id = t.leaf(i_s.clone());
        let it_id = t.leaf(i_t.clone());

        // fakes: opposite-domain decoder over AdaIN with the other batch's stats
        let enc_s = self.gen_a.encode(&mut t, &ba, is_id)?;
        let enc_t = self.gen_b.encode(&mut t, &bb, it_id)?;
        let st_s = tape_channel_stats(&mut t, enc_s.bottleneck);
        let st_t = tape_channel_stats(&mut t, enc_t.bottleneck);
        let styled_st = tape_adain(&mut t, enc_s.bottleneck, st_s, st_t);
        let styled_ts = tape_adain(&mut t, enc_t.bottleneck, st_t, st_s);
        let fake_b = self.gen_b.decode(&mut t, &bb, styled_st, &enc_s.skips)?;
        let fake_a = self.gen_a.decode(&mut t, &ba, styled_ts, &enc_t.skips)?;

        // adversarial terms through the (not updated here) discriminators
        let d_fake_b = self.disc_t.discriminate(&mut t, &bdt, fake_b, true, &mut self.rng)?;
        let d_fake_a = self.disc_s.discriminate(&mut t, &bds, fake_a, true, &mut self.rng)?;
        let adv_st = tape_gan_loss_generator(&mut t, d_fake_b);
        let adv_ts = tape_gan_loss_generator(&mut t, d_fake_a);

        // cross-reconstruction: the fakes restyle each other and decode back
        let enc_fb = self.gen_b.encode(&mut t, &bb, fake_b)?;
        let enc_fa = self.gen_a.encode(&mut t, &ba, fake_a)?;
        let st_fb = tape_channel_stats(&mut t, enc_fb.bottleneck);
        let st_fa = tape_channel_stats(&mut t, enc_fa.bottleneck);
        let styled_rec_s = tape_adain(&mut t, enc_fb.bottleneck, st_fb, st_fa);
        let styled_rec_t = tape_adain(&mut t, enc_fa.bottleneck, st_fa, st_fb);
        let rec_s = self.gen_a.decode(&mut t, &ba, styled_rec_s, &enc_fb.skips)?;
        let rec_t = self.gen_b.decode(&mut t, &bb, styled_rec_t, &enc_fa.skips)?;
        let cross_s = t.l1_loss(is_id, rec_s);
        let cross_t = t.l1_loss(it_id, rec_t);
        let cross = t.add(cross_s, cross_t);

        // self-reconstruction: same-domain decode, no AdaIN
        let self_s = self.gen_a.decode(&mut t, &ba, enc_s.bottleneck, &enc_s.skips)?;
        let self_t = self.gen_b.decode(&mut t, &bb, enc_t.bottleneck, &enc_t.skips)?;
        let self_1 = t.l1_loss(is_id, self_s);
        let self_2 = t.l1_loss(it_id, self_t);
        let self_loss = t.add(self_1, self_2);

        let grad_1 = tape_gradient_loss(&mut t, is_id, fake_b);
        let grad_2 = tape_gradient_loss(&mut t, it_id, fake_a);
        let grad = t.add(grad_1, grad_2);

        let terms = GeneratorTerms {
            adv_g_st: t.value(adv_st).item(),
            adv_g_ts: t.value(adv_ts).item(),
            cross: t.value(cross).item(),
            self_recon: t.value(self_loss).item(),
            grad: t.value(grad).item(),
        };
        let report =
            total_generator_loss(&terms, &w).map_err(|e| at_iteration(e, self.iteration))?;

        let adv_sum = t.add(adv_st, adv_ts);
        let total_adv = t.scale(adv_sum, w.adv);
        let total_cross = t.scale(cross, w.cross);
        let total_self = t.scale(self_loss, w.self_recon);
        let total_grad = t.scale(grad, w.grad);
        let acc = t.add(total_adv, total_cross);
        let acc = t.add(acc, total_self);
        let total = t.add(acc, total_grad);
        t.backward(total);

        let grads_a = harvest_grads(&t, &ba);
        let grads_b = harvest_grads(&t, &bb);
        self.opt_gen_a.step(&mut self.gen_a.params.entries, &grads_a, lr_g);
        self.opt_gen_b.step(&mut self.gen_b.params.entries, &grads_b, lr_g);

        let capture = StepCapture {
            fake_a: t.value(fake_a).clone(),
            fake_b: t.value(fake_b).clone(),
            rec_s: t.value(rec_s).clone(),
            rec_t: t.value(rec_t).clone(),
            self_s: t.value(self_s).clone(),
            self_t: t.value(self_t).clone(),
        };
        let cur_s = ChannelStats {
            mu: t.value(st_s.0).data().to_vec(),
            sigma: t.value(st_s.1).data().to_vec(),
        };
        let cur_t = ChannelStats {
            mu: t.value(st_t.0).data().to_vec(),
            sigma: t.value(st_t.1).data().to_vec(),
        };
        Ok((report, capture, cur_s, cur_t))
    }

    /// Discriminator losses on the reals and the detached fakes from the
    /// generator sub-step; updates only discriminator weights.
    fn discriminator_substep(
        &mut self,
        i_s: &Tensor,
        i_t: &Tensor,
        capture: &StepCapture,
        lr_d: f64,
    ) -> Result<(f64, f64)> {
        let mut t = Tape::new();
        let bds = self.disc_s.bind(&mut t);
        let bdt = self.disc_t.bind(&mut t);
        let real_s = t.leaf(i_s.clone());
        let real_t = t.leaf(i_t.clone());
        let fake_a = t.leaf(capture.fake_a.clone());
        let fake_b = t.leaf(capture.fake_b.clone());
        let d_real_s = self.disc_s.discriminate(&mut t, &bds, real_s, true, &mut self.rng)?;
        let d_fake_a = self.disc_s.discriminate(&mut t, &bds, fake_a, true, &mut self.rng)?;
        let d_real_t = self.disc_t.discriminate(&mut t, &bdt, real_t, true, &mut self.rng)?;
        let d_fake_b = self.disc_t.discriminate(&mut t, &bdt, fake_b, true, &mut self.rng)?;
        let loss_s = tape_gan_loss_discriminator(&mut t, d_real_s, d_fake_a);
        let loss_t = tape_gan_loss_discriminator(&mut t, d_real_t, d_fake_b);
        let ls = t.value(loss_s).item();
        let lt = t.value(loss_t).item();
        for (v, name) in [(ls, "disc_source"), (lt, "disc_target")] {
            if !v.is_finite() {
                return Err(Error::Numeric { term: name.into(), iteration: self.iteration });
            }
        }
        let total = t.add(loss_s, loss_t);
        t.backward(total);
        let grads_s = harvest_grads(&t, &bds);
        let grads_t = harvest_grads(&t, &bdt);
        self.opt_disc_s.step(&mut self.disc_s.params.entries, &grads_s, lr_d);
        self.opt_disc_t.step(&mut self.disc_t.params.entries, &grads_t, lr_d);
        Ok((ls, lt))
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.gen_a.params.save(&dir.join(CKPT_GEN_A), self.opt_gen_a.t)?;
        self.gen_b.params.save(&dir.join(CKPT_GEN_B), self.opt_gen_b.t)?;
        self.disc_s.params.save(&dir.join(CKPT_DISC_S), self.opt_disc_s.t)?;
        self.disc_t.params.save(&dir.join(CKPT_DISC_T), self.opt_disc_t.t)?;
        self.stats_source.save(&dir.join(CKPT_STATS_S))?;
        self.stats_target.save(&dir.join(CKPT_STATS_T))?;
        let manifest = CheckpointManifest {
            iteration: self.iteration,
            config_sha256: config_hash(&self.config)?,
            config: self.config.clone(),
        };
        fs::write(dir.join(CKPT_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
        let manifest_path = dir.join(CKPT_MANIFEST);
        if !manifest_path.exists() {
            return Err(Error::Checkpoint(format!("missing {}", manifest_path.display())));
        }
        let manifest: CheckpointManifest =
            serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        if config_hash(&manifest.config)? != manifest.config_sha256 {
            return Err(Error::Checkpoint(format!(
                "{}: config hash mismatch",
                manifest_path.display()
            )));
        }
        let mut state = TrainState::new(manifest.config)?;
        for name in [CKPT_STATS_S, CKPT_STATS_T] {
            if !dir.join(name).exists() {
                return Err(Error::Checkpoint(format!("missing stats sidecar {name}")));
            }
        }
        state.stats_source = DomainStats::load(&dir.join(CKPT_STATS_S))?;
        state.stats_target = DomainStats::load(&dir.join(CKPT_STATS_T))?;
        let channels = state.config.generator.residual_channels;
        for (name, stats) in [("source", &state.stats_source), ("target", &state.stats_target)] {
            if stats.channels() != channels {
                return Err(Error::Checkpoint(format!(
                    "{name} stats carry {} channels, expected {channels}",
                    stats.channels()
                )));
            }
        }
        state.opt_gen_a.t = state.gen_a.params.restore(&dir.join(CKPT_GEN_A))?;
        state.opt_gen_b.t = state.gen_b.params.restore(&dir.join(CKPT_GEN_B))?;
        state.opt_disc_s.t = state.disc_s.params.restore(&dir.join(CKPT_DISC_S))?;
        state.opt_disc_t.t = state.disc_t.params.restore(&dir.join(CKPT_DISC_T))?;
        state.iteration = manifest.iteration;
        Ok(state)
    }

    /// Translate a source tile into the target style: domain-A encoder and
    /// residuals, AdaIN against the stored target global stats, domain-B
    /// decoder over the content skips. Labels ride along untouched.
    pub fn stylize(&self, tile: &Tile) -> Result<Tile> {
        let x = normalized_tensor(tile)?;
        let mut t = Tape::new();
        let ba = self.gen_a.bind(&mut t);
        let bb = self.gen_b.bind(&mut t);
        let xid = t.leaf(x);
        let enc = self.gen_a.encode(&mut t, &ba, xid)?;
        let content_stats = tape_channel_stats(&mut t, enc.bottleneck);
        let style = self.stats_target.as_channel_stats();
        let c = style.mu.len();
        let mu = t.leaf(Tensor::from_vec(&[c], style.mu));
        let sigma = t.leaf(Tensor::from_vec(&[c], style.sigma));
        let styled = tape_adain(&mut t, enc.bottleneck, content_stats, (mu, sigma));
        let out = self.gen_b.decode(&mut t, &bb, styled, &enc.skips)?;
        let mut result =
            denormalize_values(t.value(out).data(), tile.bands, tile.height, tile.width)?;
        if let Some(labels) = &tile.labels {
            result = result.with_labels(labels.clone())?;
        }
        Ok(result)
    }

    /// Stylize every source-domain tile of the manifest into `out_dir`,
    /// mirroring the relative layout. Returns the written tile paths.
    pub fn stylize_manifest(&self, manifest: &Manifest, out_dir: &Path) -> Result<Vec<PathBuf>> {
        let entries: Vec<_> =
            manifest.entries.iter().filter(|e| e.domain == Domain::Source).collect();
        if entries.is_empty() {
            return Err(Error::data("manifest has no source tiles to stylize"));
        }
        let mut written = Vec::with_capacity(entries.len());
        for entry in entries {
            let tile = read_tile(&manifest.resolve(&entry.path))?;
            let styled = self.stylize(&tile)?;
            let dest = out_dir.join(&entry.path);
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent)?;
            }
            write_tile(&styled, &dest)?;
            written.push(dest);
        }
        Ok(written)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    iteration: u64,
    config_sha256: String,
    config: DaConfig,
}

pub fn config_hash(config: &DaConfig) -> Result<String> {
    let json = serde_json::to_string(config)?;
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Tile as a normalized [-1,1] f64 tensor of shape bands x H x W.
pub fn normalized_tensor(tile: &Tile) -> Result<Tensor> {
    let normalized = normalize(tile)?;
    Ok(Tensor::from_vec(&[tile.bands, tile.height, tile.width], normalized.to_f64()))
}

fn open_log(path: &Path, truncate: bool, header: &str) -> Result<fs::File> {
    if truncate || !path.exists() {
        let mut f = fs::File::create(path)?;
        writeln!(f, "{header}")?;
        Ok(f)
    } else {
        Ok(fs::OpenOptions::new().append(true).open(path)?)
    }
}

/// Epoch-shuffled pick with the shorter domain recycling; reconstructing
/// the permutation from (seed, epoch) keeps resumed runs aligned.
fn pick(paths: &[PathBuf], iter: u64, seed: u64, stream: u64) -> PathBuf {
    let n = paths.len() as u64;
    let epoch = iter / n;
    let pos = (iter % n) as usize;
    let mut order: Vec<usize> = (0..paths.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, stream.wrapping_add(epoch))));
    paths[order[pos]].clone()
}

fn load_normalized(path: &Path) -> Result<Tensor> {
    normalized_tensor(&read_tile(path)?)
}

/// Fresh state trained for `config.iter_max` steps over the manifest's
/// train tiles; logs and checkpoints land in `out_dir`.
pub fn train(manifest: &Manifest, config: &DaConfig, out_dir: &Path) -> Result<TrainState> {
    let mut state = TrainState::new(config.clone())?;
    run_training(&mut state, manifest, out_dir)?;
    Ok(state)
}

/// Drive an existing state to `iter_max`, appending to existing logs when
/// resuming. Checkpoints every `checkpoint_every` steps and at the end.
pub fn run_training(state: &mut TrainState, manifest: &Manifest, out_dir: &Path) -> Result<()> {
    let source: Vec<PathBuf> = manifest
        .select(Domain::Source, Split::Train)
        .iter()
        .map(|e| manifest.resolve(&e.path))
        .collect();
    let target: Vec<PathBuf> = manifest
        .select(Domain::Target, Split::Train)
        .iter()
        .map(|e| manifest.resolve(&e.path))
        .collect();
    if source.is_empty() || target.is_empty() {
        return Err(Error::config("training requires train-split tiles in both domains"));
    }
    fs::create_dir_all(out_dir)?;
    let fresh = state.iteration == 0;
    let mut loss_log = open_log(&out_dir.join(LOSS_LOG_NAME), fresh, LOSS_LOG_HEADER)?;
    let mut lr_log = open_log(&out_dir.join(LR_LOG_NAME), fresh, LR_LOG_HEADER)?;
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR_NAME);
    let seed = state.config.seed;
    while state.iteration < state.config.iter_max {
        let iter = state.iteration;
        let i_s = load_normalized(&pick(&source, iter, seed, DATA_SOURCE_STREAM))?;
        let i_t = load_normalized(&pick(&target, iter, seed, DATA_TARGET_STREAM))?;
        let losses = state.train_step(&i_s, &i_t)?;
        writeln!(
            loss_log,
            "{},{},{},{},{},{},{},{},{}",
            iter,
            losses.gen.adv_g_st,
            losses.gen.adv_g_ts,
            losses.gen.cross,
            losses.gen.self_recon,
            losses.gen.grad,
            losses.gen.total_g,
            losses.loss_d_s,
            losses.loss_d_t
        )?;
        writeln!(lr_log, "{},{},{}", iter, losses.lr_g, losses.lr_d)?;
        if state.iteration % state.config.checkpoint_every == 0
            && state.iteration < state.config.iter_max
        {
            state.save_checkpoint(&ckpt_dir)?;
        }
    }
    state.save_checkpoint(&ckpt_dir)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SceneSpec, StyleSpec};
    use rand::Rng;

    fn tiny_config(iter_max: u64) -> DaConfig {
        DaConfig {
            generator: GeneratorConfig::with_encoder(&[8, 16, 32]),
            discriminator: DiscriminatorConfig {
                channels: vec![8, 16, 32, 64, 1],
                ..Default::default()
            },
            iter_max,
            iter_decay_start: (iter_max - 1).max(1),
            checkpoint_every: 1_000_000,
            seed: 11,
            ..Default::default()
        }
    }

    fn random_pair(seed: u64, h: usize, w: usize) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |off: f64| {
            Tensor::from_vec(
                &[4, h, w],
                (0..4 * h * w).map(|_| (rng.gen::<f64>() * 1.6 - 0.8 + off).clamp(-1.0, 1.0)).collect(),
            )
        };
        let a = draw(-0.1);
        let b = draw(0.1);
        (a, b)
    }

    #[test]
    fn lr_linear_matches_reference_points() {
        let cfg = ScheduleConfig { lr_base: 1e-4, iter_max: 100_000, iter_decay_start: 75_000 };
        assert_eq!(lr_linear(&cfg, 0).unwrap(), 1e-4);
        assert_eq!(lr_linear(&cfg, 75_000).unwrap(), 1e-4);
        assert!((lr_linear(&cfg, 87_500).unwrap() - 5e-5).abs() < 1e-12);
        assert_eq!(lr_linear(&cfg, 100_000).unwrap(), 0.0);
        assert!(lr_linear(&cfg, 100_001).is_err());
        let bad = ScheduleConfig { lr_base: 0.0, ..cfg };
        assert!(lr_linear(&bad, 0).is_err());
        let bad = ScheduleConfig { iter_decay_start: 100_000, ..cfg };
        assert!(lr_linear(&bad, 0).is_err());
    }

    #[test]
    fn config_validation_catches_mismatches() {
        let mut cfg = tiny_config(10);
        cfg.discriminator.in_channels = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(10);
        cfg.stats_decay = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(10);
        cfg.checkpoint_every = 0;
        assert!(cfg.validate().is_err());
        assert!(DaConfig::default().validate().is_ok());
        assert!(DaConfig::desk().validate().is_ok());
    }

    #[test]
    fn generator_substep_freezes_discriminators() {
        let mut state = TrainState::new(tiny_config(10)).unwrap();
        let (i_s, i_t) = random_pair(1, 32, 32);
        let gen_before = (state.gen_a.params.checksum(), state.gen_b.params.checksum());
        let disc_before = (state.disc_s.params.checksum(), state.disc_t.params.checksum());
        state.generator_substep(&i_s, &i_t, 1e-4).unwrap();
        assert_ne!(gen_before.0, state.gen_a.params.checksum());
        assert_ne!(gen_before.1, state.gen_b.params.checksum());
        assert_eq!(disc_before.0, state.disc_s.params.checksum());
        assert_eq!(disc_before.1, state.disc_t.params.checksum());
    }

    #[test]
    fn discriminator_substep_freezes_generators() {
        let mut state = TrainState::new(tiny_config(10)).unwrap();
        let (i_s, i_t) = random_pair(2, 32, 32);
        let (_, capture, _, _) = state.generator_substep(&i_s, &i_t, 1e-4).unwrap();
        let gen_before = (state.gen_a.params.checksum(), state.gen_b.params.checksum());
        let disc_before = (state.disc_s.params.checksum(), state.disc_t.params.checksum());
        state.discriminator_substep(&i_s, &i_t, &capture, 1e-5).unwrap();
        assert_eq!(gen_before.0, state.gen_a.params.checksum());
        assert_eq!(gen_before.1, state.gen_b.params.checksum());
        assert_ne!(disc_before.0, state.disc_s.params.checksum());
        assert_ne!(disc_before.1, state.disc_t.params.checksum());
    }

    #[test]
    fn step_increments_iteration_and_stats() {
        let mut state = TrainState::new(tiny_config(10)).unwrap();
        let (i_s, i_t) = random_pair(3, 32, 32);
        for k in 1..=3u64 {
            state.train_step(&i_s, &i_t).unwrap();
            assert_eq!(state.iteration, k);
            assert_eq!(state.stats_source.updates_seen, k);
            assert_eq!(state.stats_target.updates_seen, k);
        }
        assert_eq!(state.stats_source.channels(), 32);
    }

    #[test]
    fn hundred_steps_stay_finite_and_nonnegative() {
        let mut state = TrainState::new(tiny_config(200)).unwrap();
        for k in 0..100u64 {
            let (i_s, i_t) = random_pair(100 + k, 32, 32);
            let losses = state.train_step(&i_s, &i_t).unwrap();
            for (name, v) in [
                ("adv_g_st", losses.gen.adv_g_st),
                ("adv_g_ts", losses.gen.adv_g_ts),
                ("cross", losses.gen.cross),
                ("self", losses.gen.self_recon),
                ("grad", losses.gen.grad),
                ("total_g", losses.gen.total_g),
                ("loss_d_s", losses.loss_d_s),
                ("loss_d_t", losses.loss_d_t),
            ] {
                assert!(v.is_finite() && v >= 0.0, "step {k}: {name} = {v}");
            }
        }
    }

    #[test]
    fn nan_poisoning_names_term_and_iteration() {
        let mut state = TrainState::new(tiny_config(10)).unwrap();
        let (i_s, i_t) = random_pair(4, 32, 32);
        state.train_step(&i_s, &i_t).unwrap();
        // the output conv bias feeds tanh directly, so the NaN reaches the
        // reconstruction losses instead of being absorbed by a ReLU max
        state.gen_a.params.entries.last_mut().unwrap().values[0] = f64::NAN;
        match state.train_step(&i_s, &i_t) {
            Err(Error::Numeric { term, iteration }) => {
                assert_eq!(iteration, 1);
                assert!(!term.is_empty());
            }
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn captured_losses_match_plain_recomputation() {
        use crate::losses::{gradient_loss, l1};
        let mut state = TrainState::new(tiny_config(10)).unwrap();
        let (i_s, i_t) = random_pair(5, 32, 32);
        let (losses, cap) = state.train_step_captured(&i_s, &i_t).unwrap();
        let cross = l1(i_s.data(), cap.rec_s.data()).unwrap()
            + l1(i_t.data(), cap.rec_t.data()).unwrap();
        let self_recon = l1(i_s.data(), cap.self_s.data()).unwrap()
            + l1(i_t.data(), cap.self_t.data()).unwrap();
        let grad = gradient_loss(i_s.data(), cap.fake_b.data(), 4, 32, 32).unwrap()
            + gradient_loss(i_t.data(), cap.fake_a.data(), 4, 32, 32).unwrap();
        assert!((losses.gen.cross - cross).abs() < 1e-9);
        assert!((losses.gen.self_recon - self_recon).abs() < 1e-9);
        assert!((losses.gen.grad - grad).abs() < 1e-9);
    }

    fn micro_dataset(dir: &Path, seed: u64) -> Manifest {
        let base = SceneSpec {
            seed,
            height: 32,
            width: 32,
            class_proportions: [0.487, 0.382, 0.093, 0.018, 0.02],
            style: StyleSpec::identity(),
        };
        let mut target = base.clone();
        target.style = StyleSpec {
            gains: [1.3; 4],
            biases: [60.0; 4],
            noise_std: 2.0,
            smooth_sigma: None,
        };
        generate_dataset(6, &base, &target, dir).unwrap()
    }

    #[test]
    fn training_produces_logs_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let manifest = micro_dataset(&data, 21);
        let mut cfg = tiny_config(4);
        cfg.iter_decay_start = 2;
        cfg.checkpoint_every = 2;
        let out = dir.path().join("run");
        let state = train(&manifest, &cfg, &out).unwrap();
        assert_eq!(state.iteration, 4);

        let log = fs::read_to_string(out.join(LOSS_LOG_NAME)).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], LOSS_LOG_HEADER);
        assert_eq!(lines.len(), 5);

        let lr = fs::read_to_string(out.join(LR_LOG_NAME)).unwrap();
        for (k, line) in lr.lines().skip(1).enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields[0], k.to_string());
            let want_g = lr_linear(&cfg.gen_schedule(), k as u64).unwrap();
            let want_d = lr_linear(&cfg.disc_schedule(), k as u64).unwrap();
            assert_eq!(fields[1].parse::<f64>().unwrap(), want_g);
            assert_eq!(fields[2].parse::<f64>().unwrap(), want_d);
        }

        let ckpt = out.join(CHECKPOINT_DIR_NAME);
        let mut names: Vec<String> = fs::read_dir(&ckpt)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        let mut expected: Vec<String> = [
            CKPT_MANIFEST,
            CKPT_DISC_S,
            CKPT_DISC_T,
            CKPT_GEN_A,
            CKPT_GEN_B,
            CKPT_STATS_S,
            CKPT_STATS_T,
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        expected.sort();
        assert_eq!(names, expected);
    }

    #[test]
    fn identical_seeds_replay_identical_logs() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let manifest = micro_dataset(&data, 22);
        let mut cfg = tiny_config(5);
        cfg.iter_decay_start = 3;
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        train(&manifest, &cfg, &out_a).unwrap();
        train(&manifest, &cfg, &out_b).unwrap();
        let log_a = fs::read(out_a.join(LOSS_LOG_NAME)).unwrap();
        let log_b = fs::read(out_b.join(LOSS_LOG_NAME)).unwrap();
        assert_eq!(log_a, log_b);
        assert!(!log_a.is_empty());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_stylization() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let manifest = micro_dataset(&data, 23);
        let mut cfg = tiny_config(3);
        cfg.iter_decay_start = 2;
        let out = dir.path().join("run");
        let state = train(&manifest, &cfg, &out).unwrap();

        let restored = TrainState::load_checkpoint(&out.join(CHECKPOINT_DIR_NAME)).unwrap();
        assert_eq!(restored.iteration, state.iteration);
        assert_eq!(restored.gen_a.params.checksum(), state.gen_a.params.checksum());
        assert_eq!(restored.gen_b.params.checksum(), state.gen_b.params.checksum());
        assert_eq!(restored.stats_target, state.stats_target);
        assert_eq!(restored.opt_gen_a.t, state.opt_gen_a.t);

        let entry = &manifest.select(Domain::Source, Split::Train)[0];
        let tile = read_tile(&manifest.resolve(&entry.path)).unwrap();
        let a = state.stylize(&tile).unwrap();
        let b = restored.stylize(&tile).unwrap();
        assert_eq!(a.to_f64(), b.to_f64());
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.labels.as_deref(), tile.labels.as_deref());
    }

    #[test]
    fn missing_stats_sidecar_is_a_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let state = TrainState::new(tiny_config(10)).unwrap();
        let ckpt = dir.path().join("ckpt");
        state.save_checkpoint(&ckpt).unwrap();
        fs::remove_file(ckpt.join(CKPT_STATS_T)).unwrap();
        assert!(matches!(
            TrainState::load_checkpoint(&ckpt),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn stylize_with_matching_stats_degenerates_to_plain_pass() {
        let mut state = TrainState::new(tiny_config(10)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let data: Vec<u8> = (0..4 * 32 * 32).map(|_| rng.gen()).collect();
        let labels = vec![0u8; 32 * 32];
        let tile = Tile::new_u8(4, 32, 32, data).unwrap().with_labels(labels).unwrap();

        // read the content's own bottleneck stats off a probe pass
        let x = normalized_tensor(&tile).unwrap();
        let mut t = Tape::new();
        let ba = state.gen_a.bind(&mut t);
        let xid = t.leaf(x.clone());
        let enc = state.gen_a.encode(&mut t, &ba, xid).unwrap();
        let stats = crate::style::channel_stats(t.value(enc.bottleneck)).unwrap();
        state.stats_target.mu_glob = stats.mu;
        state.stats_target.sigma_glob = stats.sigma;

        // plain pass: encode with gen_a, decode with gen_b, no AdaIN
        let bb = state.gen_b.bind(&mut t);
        let plain = state.gen_b.decode(&mut t, &bb, enc.bottleneck, &enc.skips).unwrap();
        let plain_tile =
            denormalize_values(t.value(plain).data(), 4, 32, 32).unwrap();

        let styled = state.stylize(&tile).unwrap();
        let a = styled.to_f64();
        let b = plain_tile.to_f64();
        let max_diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max_diff <= 1.0, "quantized outputs diverged by {max_diff}");
        assert_eq!(styled.labels.as_deref(), tile.labels.as_deref());
    }

    #[test]
    fn training_rejects_empty_domains() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let mut manifest = micro_dataset(&data, 24);
        manifest.entries.retain(|e| e.domain != Domain::Target);
        let cfg = tiny_config(3);
        assert!(matches!(
            train(&manifest, &cfg, &dir.path().join("run")),
            Err(Error::Config(_))
        ));
    }
}
