//! Segmentation, text-alignment and relation losses with analytic gradients.
//!
//! Volumetric losses take channel softmax probabilities and return gradients
//! with respect to those probabilities; [`softmax_backward`] carries them back
//! to the logits. Every logarithm is clamped at `prob_clamp`, and the clamp has
//! zero derivative where it is active. Reductions run voxel-major in index order.

use crate::error::{Error, Result};
use crate::grid::{LabelMap, LogitTensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Dice smoothing term.
    pub epsilon: f64,
    /// Focal exponent.
    pub gamma: f64,
    pub lambda_text: f64,
    pub lambda_rel: f64,
    pub prob_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            gamma: 2.0,
            lambda_text: 0.2,
            lambda_rel: 0.2,
            prob_clamp: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0)
            || !(self.gamma >= 0.0)
            || !(self.lambda_text >= 0.0)
            || !(self.lambda_rel >= 0.0)
            || !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5)
        {
            return Err(Error::ConfigInvalid(format!("invalid loss config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub dice: f64,
    pub ce: f64,
    pub focal: f64,
    pub seg: f64,
    pub text: f64,
    pub rel: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.dice, self.ce, self.focal, self.seg, self.text, self.rel, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// A value together with its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct WithGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check(probs: &LogitTensor, gt: &LogitTensor) -> Result<()> {
    probs.same_shape(gt)
}

#[inline]
fn clamped_ln(p: f64, clamp: f64) -> (f64, bool) {
    if p > clamp {
        (p.ln(), true)
    } else {
        (clamp.ln(), false)
    }
}

/// Soft Dice over every channel (background included), averaged over channels.
pub fn dice_loss_grad(probs: &LogitTensor, gt: &LogitTensor, eps: f64) -> Result<WithGrad> {
    check(probs, gt)?;
    let v = probs.voxels();
    let c = probs.channels;
    let mut grad = vec![0.0; probs.data.len()];
    let mut total = 0.0;
    for k in 0..c {
        let p = probs.channel(k);
        let g = gt.channel(k);
        let (mut inter, mut pp, mut gg) = (0.0, 0.0, 0.0);
        for i in 0..v {
            inter += p[i] * g[i];
            pp += p[i] * p[i];
            gg += g[i] * g[i];
        }
        let num = 2.0 * inter + eps;
        let den = pp + gg + eps;
        total += 1.0 - num / den;
        let out = &mut grad[k * v..(k + 1) * v];
        for i in 0..v {
            out[i] = -(2.0 * g[i] * den - num * 2.0 * p[i]) / (den * den) / c as f64;
        }
    }
    Ok(WithGrad {
        value: total / c as f64,
        grad,
    })
}

pub fn dice_loss(probs: &LogitTensor, gt: &LogitTensor, eps: f64) -> Result<f64> {
    dice_loss_grad(probs, gt, eps).map(|r| r.value)
}

/// `-mean_v sum_c g log(clamp(p))`.
pub fn cross_entropy_grad(probs: &LogitTensor, gt: &LogitTensor, clamp: f64) -> Result<WithGrad> {
    check(probs, gt)?;
    let n = probs.voxels() as f64;
    let mut grad = vec![0.0; probs.data.len()];
    let mut total = 0.0;
    for (j, (&p, &g)) in probs.data.iter().zip(&gt.data).enumerate() {
        if g == 0.0 {
            continue;
        }
        let (ln, live) = clamped_ln(p, clamp);
        total -= g * ln;
        if live {
            grad[j] = -g / (p * n);
        }
    }
    Ok(WithGrad {
        value: total / n,
        grad,
    })
}

pub fn cross_entropy(probs: &LogitTensor, gt: &LogitTensor, clamp: f64) -> Result<f64> {
    cross_entropy_grad(probs, gt, clamp).map(|r| r.value)
}

/// `-(1/N) sum_v sum_c (1 - p)^gamma g log(clamp(p))`.
pub fn focal_loss_grad(probs: &LogitTensor, gt: &LogitTensor, gamma: f64, clamp: f64) -> Result<WithGrad> {
    check(probs, gt)?;
    if gamma < 0.0 {
        return Err(Error::ConfigInvalid("focal gamma must be non-negative".into()));
    }
    let n = probs.voxels() as f64;
    let mut grad = vec![0.0; probs.data.len()];
    let mut total = 0.0;
    for (j, (&p, &g)) in probs.data.iter().zip(&gt.data).enumerate() {
        if g == 0.0 {
            continue;
        }
        let (ln, live) = clamped_ln(p, clamp);
        let q = 1.0 - p;
        let w = q.powf(gamma);
        total -= w * g * ln;
        let mut d = 0.0;
        if gamma != 0.0 && q > 0.0 {
            d += gamma * q.powf(gamma - 1.0) * g * ln;
        }
        if live {
            d -= w * g / p;
        }
        grad[j] = d / n;
    }
    Ok(WithGrad {
        value: total / n,
        grad,
    })
}

pub fn focal_loss(probs: &LogitTensor, gt: &LogitTensor, gamma: f64, clamp: f64) -> Result<f64> {
    focal_loss_grad(probs, gt, gamma, clamp).map(|r| r.value)
}

fn add_into(acc: &mut [f64], other: &[f64], scale: f64) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += scale * b;
    }
}

/// Dice + Focal, returning `(dice, focal)` and the summed gradient.
pub fn dice_focal_grad(probs: &LogitTensor, gt: &LogitTensor, cfg: &LossConfig) -> Result<(f64, f64, Vec<f64>)> {
    let d = dice_loss_grad(probs, gt, cfg.epsilon)?;
    let f = focal_loss_grad(probs, gt, cfg.gamma, cfg.prob_clamp)?;
    let mut grad = d.grad;
    add_into(&mut grad, &f.grad, 1.0);
    Ok((d.value, f.value, grad))
}

pub fn dice_focal(probs: &LogitTensor, gt: &LogitTensor, cfg: &LossConfig) -> Result<f64> {
    dice_focal_grad(probs, gt, cfg).map(|(d, f, _)| d + f)
}

/// Dice + cross-entropy, returning `(dice, ce)` and the summed gradient.
pub fn dice_ce_grad(probs: &LogitTensor, gt: &LogitTensor, cfg: &LossConfig) -> Result<(f64, f64, Vec<f64>)> {
    let d = dice_loss_grad(probs, gt, cfg.epsilon)?;
    let c = cross_entropy_grad(probs, gt, cfg.prob_clamp)?;
    let mut grad = d.grad;
    add_into(&mut grad, &c.grad, 1.0);
    Ok((d.value, c.value, grad))
}

pub fn dice_ce(probs: &LogitTensor, gt: &LogitTensor, cfg: &LossConfig) -> Result<f64> {
    dice_ce_grad(probs, gt, cfg).map(|(d, c, _)| d + c)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy between `sigmoid(bias)` and the presence vector over the
/// foreground classes `1..C`, normalised by `C - 1`. The gradient is with
/// respect to the raw biases.
pub fn text_alignment_grad(bias: &[f64], presence: &[u8], clamp: f64) -> Result<WithGrad> {
    if bias.len() != presence.len() {
        return Err(Error::LengthMismatch {
            expected: bias.len(),
            found: presence.len(),
        });
    }
    if bias.len() < 2 {
        return Err(Error::LengthMismatch {
            expected: 2,
            found: bias.len(),
        });
    }
    let k = (bias.len() - 1) as f64;
    let mut grad = vec![0.0; bias.len()];
    let mut total = 0.0;
    for c in 1..bias.len() {
        let s = sigmoid(bias[c]);
        let s_neg = sigmoid(-bias[c]);
        if presence[c] != 0 {
            let (ln, live) = clamped_ln(s, clamp);
            total -= ln;
            if live {
                grad[c] = -s_neg / k;
            }
        } else {
            let (ln, live) = clamped_ln(s_neg, clamp);
            total -= ln;
            if live {
                grad[c] = s / k;
            }
        }
    }
    Ok(WithGrad {
        value: total / k,
        grad,
    })
}

pub fn text_alignment_loss(bias: &[f64], presence: &[u8], clamp: f64) -> Result<f64> {
    text_alignment_grad(bias, presence, clamp).map(|r| r.value)
}

/// Spatial region of one relation: the voxels where its prior field is positive.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationRegion {
    pub anchor: u8,
    pub target: u8,
    /// Prior field over the grid, values in `[0, 1]`.
    pub field: Vec<f64>,
}

impl RelationRegion {
    pub fn size(&self) -> usize {
        self.field.iter().filter(|&&f| f > 0.0).count()
    }
}

/// Masked binary cross-entropy inside each relation's region on the target-class
/// probability, against the ground-truth "is target organ" indicator.
///
/// Regions with no positive voxel are skipped; with no usable region the loss
/// is 0. `probs` are softmax probabilities of the fused logits.
pub fn relation_loss_grad(
    probs: &LogitTensor,
    regions: &[RelationRegion],
    gt: &LabelMap,
    clamp: f64,
) -> Result<WithGrad> {
    if gt.dims != probs.dims {
        return Err(Error::ShapeMismatch(format!("labels {} vs probs {}", gt.dims, probs.dims)));
    }
    let v = probs.voxels();
    let mut grad = vec![0.0; probs.data.len()];
    let usable: Vec<(&RelationRegion, usize)> = regions
        .iter()
        .map(|r| (r, r.size()))
        .filter(|(_, n)| *n > 0)
        .collect();
    for (r, _) in &usable {
        if r.field.len() != v {
            return Err(Error::ShapeMismatch("relation field size".into()));
        }
        if r.target as usize >= probs.channels {
            return Err(Error::LabelOutOfRange {
                label: r.target,
                classes: probs.channels,
            });
        }
    }
    if usable.is_empty() {
        return Ok(WithGrad { value: 0.0, grad });
    }
    let rcount = usable.len() as f64;
    let mut total = 0.0;
    for (r, n) in &usable {
        let t = r.target as usize;
        let scale = 1.0 / (*n as f64 * rcount);
        let p = probs.channel(t);
        let g = &mut grad[t * v..(t + 1) * v];
        let mut sum = 0.0;
        for i in 0..v {
            if r.field[i] <= 0.0 {
                continue;
            }
            if gt.data[i] == r.target {
                let (ln, live) = clamped_ln(p[i], clamp);
                sum -= ln;
                if live {
                    g[i] -= scale / p[i];
                }
            } else {
                let q = 1.0 - p[i];
                let (ln, live) = clamped_ln(q, clamp);
                sum -= ln;
                if live {
                    g[i] += scale / q;
                }
            }
        }
        total += sum / *n as f64;
    }
    Ok(WithGrad {
        value: total / rcount,
        grad,
    })
}

pub fn relation_loss(probs: &LogitTensor, regions: &[RelationRegion], gt: &LabelMap, clamp: f64) -> Result<f64> {
    relation_loss_grad(probs, regions, gt, clamp).map(|r| r.value)
}

/// `total = seg + lambda_text * text + lambda_rel * rel`; absent terms count as 0.
pub fn total_fusion_loss(
    dice: f64,
    ce: f64,
    text: Option<f64>,
    rel: Option<f64>,
    cfg: &LossConfig,
) -> LossBreakdown {
    let seg = dice + ce;
    let text = text.unwrap_or(0.0);
    let rel = rel.unwrap_or(0.0);
    LossBreakdown {
        dice,
        ce,
        focal: 0.0,
        seg,
        text,
        rel,
        total: seg + cfg.lambda_text * text + cfg.lambda_rel * rel,
    }
}

/// Chain rule through the channel softmax: `dz_c = p_c (g_c - sum_k p_k g_k)`.
pub fn softmax_backward(probs: &LogitTensor, grad_probs: &[f64]) -> Vec<f64> {
    let v = probs.voxels();
    let c = probs.channels;
    let mut out = vec![0.0; probs.data.len()];
    for i in 0..v {
        let mut dot = 0.0;
        for k in 0..c {
            dot += probs.data[k * v + i] * grad_probs[k * v + i];
        }
        for k in 0..c {
            let j = k * v + i;
            out[j] = probs.data[j] * (grad_probs[j] - dot);
        }
    }
    out
}
