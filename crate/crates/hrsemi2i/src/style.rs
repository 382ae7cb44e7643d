//! Channel-wise feature statistics, the AdaIN transform, and exponentially
//! accumulated per-domain statistics used at inference time.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape, Tensor};

/// Epsilon added to the population variance before the square root.
pub const STATS_EPS: f64 = 1e-5;

/// Per-channel mean and standard deviation of a C×H×W feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Spatial mean and sqrt(population variance + eps) per channel.
pub fn channel_stats(features: &Tensor) -> Result<ChannelStats> {
    let (c, h, w) = features.dims3()?;
    let hw = h * w;
    if hw == 0 {
        return Err(Error::shape("channel_stats needs at least one pixel"));
    }
    let data = features.data();
    let mut mu = Vec::with_capacity(c);
    let mut sigma = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = &data[ch * hw..(ch + 1) * hw];
        let m = plane.iter().sum::<f64>() / hw as f64;
        let var = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / hw as f64;
        mu.push(m);
        sigma.push((var + STATS_EPS).sqrt());
    }
    Ok(ChannelStats { mu, sigma })
}

/// Re-style `content` so its per-channel statistics become `style`'s:
/// out = style.sigma * (content - content.mu) / content.sigma + style.mu.
pub fn adain(content: &Tensor, content_stats: &ChannelStats, style_stats: &ChannelStats) -> Result<Tensor> {
    let (c, h, w) = content.dims3()?;
    if content_stats.mu.len() != c || style_stats.mu.len() != c {
        return Err(Error::shape(format!(
            "adain channel mismatch: content {c}, content_stats {}, style_stats {}",
            content_stats.mu.len(),
            style_stats.mu.len()
        )));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(content.numel());
    let data = content.data();
    for ch in 0..c {
        let (mc, sc) = (content_stats.mu[ch], content_stats.sigma[ch]);
        let (ms, ss) = (style_stats.mu[ch], style_stats.sigma[ch]);
        for &v in &data[ch * hw..(ch + 1) * hw] {
            out.push(ss * (v - mc) / sc + ms);
        }
    }
    Ok(Tensor::from_vec(&[c, h, w], out))
}

/// Differentiable [`channel_stats`]: returns (mu, sigma) nodes of length C.
pub fn tape_channel_stats(t: &mut Tape, x: NodeId) -> (NodeId, NodeId) {
    let mu = t.mean_hw(x);
    let centered = t.sub_vec(x, mu);
    let sq = t.mul(centered, centered);
    let var = t.mean_hw(sq);
    let var_eps = t.add_const(var, STATS_EPS);
    let sigma = t.sqrt(var_eps);
    (mu, sigma)
}

/// Differentiable [`adain`] over tape nodes.
pub fn tape_adain(
    t: &mut Tape,
    content: NodeId,
    content_stats: (NodeId, NodeId),
    style_stats: (NodeId, NodeId),
) -> NodeId {
    let centered = t.sub_vec(content, content_stats.0);
    let normed = t.div_vec(centered, content_stats.1);
    let scaled = t.mul_vec(normed, style_stats.1);
    t.add_vec(scaled, style_stats.0)
}

/// Exponentially accumulated per-domain bottleneck statistics. Starts at
/// zero and is never bias-corrected, so early values are damped toward zero
/// by design; inference expects a long accumulation history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub decay_rate: f64,
    pub updates_seen: u64,
    pub mu_glob: Vec<f64>,
    pub sigma_glob: Vec<f64>,
}

impl DomainStats {
    pub fn new(channels: usize, decay_rate: f64) -> Result<Self> {
        if !(decay_rate > 0.0 && decay_rate < 1.0) {
            return Err(Error::config(format!(
                "decay_rate must lie strictly inside (0,1), got {decay_rate}"
            )));
        }
        Ok(DomainStats {
            decay_rate,
            updates_seen: 0,
            mu_glob: vec![0.0; channels],
            sigma_glob: vec![0.0; channels],
        })
    }

    pub fn channels(&self) -> usize {
        self.mu_glob.len()
    }

    /// mu_glob <- decay*mu_glob + (1-decay)*current.mu, same for sigma.
    pub fn update(&mut self, current: &ChannelStats) -> Result<()> {
        if current.mu.len() != self.mu_glob.len() {
            return Err(Error::shape(format!(
                "stats length mismatch: global {}, current {}",
                self.mu_glob.len(),
                current.mu.len()
            )));
        }
        let d = self.decay_rate;
        for (g, c) in self.mu_glob.iter_mut().zip(&current.mu) {
            *g = d * *g + (1.0 - d) * c;
        }
        for (g, c) in self.sigma_glob.iter_mut().zip(&current.sigma) {
            *g = d * *g + (1.0 - d) * c;
        }
        self.updates_seen += 1;
        Ok(())
    }

    pub fn as_channel_stats(&self) -> ChannelStats {
        ChannelStats { mu: self.mu_glob.clone(), sigma: self.sigma_glob.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ds: DomainStats = serde_json::from_str(&fs::read_to_string(path)?)?;
        if !(ds.decay_rate > 0.0 && ds.decay_rate < 1.0) {
            return Err(Error::config(format!(
                "{}: decay_rate {} outside (0,1)",
                path.display(),
                ds.decay_rate
            )));
        }
        if ds.mu_glob.len() != ds.sigma_glob.len() {
            return Err(Error::Corrupt(format!(
                "{}: mu_glob and sigma_glob lengths differ",
                path.display()
            )));
        }
        Ok(ds)
    }
}
