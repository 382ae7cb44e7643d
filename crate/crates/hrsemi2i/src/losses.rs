//! Loss terms of the composite objective: adversarial, cross-reconstruction,
//! self-reconstruction, and Sobel gradient losses, with their weighted sum.
//!
//! Each loss exists twice: a plain-array form used for reporting and as an
//! oracle in tests, and a tape-node builder used inside training graphs. The
//! two are written independently and kept in lockstep by the test suite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{reflect_index, NodeId, Tape};

/// Floor applied inside log() so probabilities touching 0 or 1 stay finite.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adv: f64,
    pub cross: f64,
    #[serde(rename = "self")]
    pub self_recon: f64,
    pub grad: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { adv: 1.0, cross: 20.0, self_recon: 10.0, grad: 25.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("adv", self.adv),
            ("cross", self.cross),
            ("self", self.self_recon),
            ("grad", self.grad),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(format!("loss weight {name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted values of the five generator loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorTerms {
    pub adv_g_st: f64,
    pub adv_g_ts: f64,
    pub cross: f64,
    pub self_recon: f64,
    pub grad: f64,
}

/// Per-term generator losses plus their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub adv_g_st: f64,
    pub adv_g_ts: f64,
    pub cross: f64,
    pub self_recon: f64,
    pub grad: f64,
    pub total_g: f64,
}

/// Weighted combination; any non-finite term aborts with the term's name.
pub fn total_generator_loss(terms: &GeneratorTerms, weights: &LossWeights) -> Result<LossReport> {
    for (name, v) in [
        ("adv_g_st", terms.adv_g_st),
        ("adv_g_ts", terms.adv_g_ts),
        ("cross", terms.cross),
        ("self", terms.self_recon),
        ("grad", terms.grad),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric { term: name.into(), iteration: 0 });
        }
    }
    let total_g = weights.adv * (terms.adv_g_st + terms.adv_g_ts)
        + weights.cross * terms.cross
        + weights.self_recon * terms.self_recon
        + weights.grad * terms.grad;
    Ok(LossReport {
        adv_g_st: terms.adv_g_st,
        adv_g_ts: terms.adv_g_ts,
        cross: terms.cross,
        self_recon: terms.self_recon,
        grad: terms.grad,
        total_g,
    })
}

/// Mean absolute difference.
pub fn l1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("l1 over {} vs {} elements", a.len(), b.len())));
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    Ok(s / a.len() as f64)
}

const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

/// Horizontal and vertical Sobel responses per channel with reflection
/// padding: C×H×W in, 2C×H×W out (channel 2c horizontal, 2c+1 vertical).
pub fn sobel_grad(x: &[f64], c: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    if x.len() != c * h * w {
        return Err(Error::shape("sobel_grad input length mismatch"));
    }
    if h < 3 || w < 3 {
        return Err(Error::shape(format!("sobel_grad needs >= 3x3 input, got {h}x{w}")));
    }
    let mut out = vec![0.0; 2 * c * h * w];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x0 in 0..w {
                let mut gh = 0.0;
                let mut gv = 0.0;
                for (dy, row) in KX.iter().enumerate() {
                    let iy = reflect_index(y as isize + dy as isize - 1, h);
                    for (dx, _) in row.iter().enumerate() {
                        let ix = reflect_index(x0 as isize + dx as isize - 1, w);
                        let v = plane[iy * w + ix];
                        gh += KX[dy][dx] * v;
                        gv += KX[dx][dy] * v;
                    }
                }
                out[2 * ch * h * w + y * w + x0] = gh;
                out[(2 * ch + 1) * h * w + y * w + x0] = gv;
            }
        }
    }
    Ok(out)
}

/// L1 distance between the Sobel responses of two images of equal shape.
pub fn gradient_loss(image: &[f64], fake: &[f64], c: usize, h: usize, w: usize) -> Result<f64> {
    if image.len() != fake.len() {
        return Err(Error::shape("gradient_loss shape mismatch"));
    }
    l1(&sobel_grad(image, c, h, w)?, &sobel_grad(fake, c, h, w)?)
}

fn mean_log(xs: &[f64]) -> f64 {
    xs.iter().map(|&x| x.max(LOG_EPS).ln()).sum::<f64>() / xs.len() as f64
}

/// -mean[log d_real] - mean[log(1 - d_fake)].
pub fn gan_loss_discriminator(d_real: &[f64], d_fake: &[f64]) -> f64 {
    let one_minus: Vec<f64> = d_fake.iter().map(|&x| 1.0 - x).collect();
    -mean_log(d_real) - mean_log(&one_minus)
}

/// Non-saturating generator objective: -mean[log d_fake].
pub fn gan_loss_generator(d_fake: &[f64]) -> f64 {
    -mean_log(d_fake)
}

/// Tape form of [`gan_loss_generator`].
pub fn tape_gan_loss_generator(t: &mut Tape, d_fake: NodeId) -> NodeId {
    let lg = t.log_clamped(d_fake, LOG_EPS);
    let m = t.mean_all(lg);
    t.scale(m, -1.0)
}

/// Tape form of [`gan_loss_discriminator`].
pub fn tape_gan_loss_discriminator(t: &mut Tape, d_real: NodeId, d_fake: NodeId) -> NodeId {
    let lr = t.log_clamped(d_real, LOG_EPS);
    let mr = t.mean_all(lr);
    let om = t.one_minus(d_fake);
    let lf = t.log_clamped(om, LOG_EPS);
    let mf = t.mean_all(lf);
    let s = t.add(mr, mf);
    t.scale(s, -1.0)
}

/// Tape form of [`gradient_loss`].
pub fn tape_gradient_loss(t: &mut Tape, image: NodeId, fake: NodeId) -> NodeId {
    let si = t.sobel_hv(image);
    let sf = t.sobel_hv(fake);
    t.l1_loss(si, sf)
}
