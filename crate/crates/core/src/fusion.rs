//! Text-to-class bias head and logit-space fusion.
//!
//! `b = W2ᵀ relu(W1ᵀ t + b1) + b2` maps a prompt embedding to one scalar per
//! class, and `L_fused = L_vis + alpha * b + beta * P` adds it, broadcast over
//! voxels, together with the relation prior. Only these parameters train; the
//! visual logits, embeddings and priors receive no gradient.

use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_record, save_record, CheckpointRecord};
use crate::embedding::{TextEmbedding, EMBED_DIM};
use crate::error::{Error, Result};
use crate::grid::{one_hot, softmax_channels, LabelMap, LogitTensor};
use crate::kv::KeyValues;
use crate::loss::{
    cross_entropy_grad, dice_loss_grad, relation_loss_grad, softmax_backward, text_alignment_grad, total_fusion_loss,
    LossBreakdown, LossConfig, RelationRegion,
};
use crate::optim::AdamWState;

pub const HIDDEN_DIM: usize = 256;

/// Fusion parameters. `w1` is `E x H` and `w2` is `H x C`, both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub classes: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

/// Gradients share the parameter layout.
pub type FusionGradients = FusionParams;

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect()
}

impl FusionParams {
    pub fn zeros(embed_dim: usize, hidden_dim: usize, classes: usize) -> Self {
        Self {
            embed_dim,
            hidden_dim,
            classes,
            w1: vec![0.0; embed_dim * hidden_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; hidden_dim * classes],
            b2: vec![0.0; classes],
            alpha: 0.0,
            beta: 0.0,
        }
    }

    /// Xavier-uniform weights, zero biases, `alpha = beta = 0.1`.
    pub fn init(embed_dim: usize, hidden_dim: usize, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 || embed_dim == 0 || hidden_dim == 0 {
            return Err(Error::ConfigInvalid(format!(
                "fusion head needs C >= 2 and non-empty layers, got E={embed_dim} H={hidden_dim} C={classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = xavier(&mut rng, embed_dim, hidden_dim);
        let w2 = xavier(&mut rng, hidden_dim, classes);
        Ok(Self {
            w1,
            w2,
            alpha: 0.1,
            beta: 0.1,
            ..Self::zeros(embed_dim, hidden_dim, classes)
        })
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + 2
    }

    /// Flat view in the order `w1, b1, w2, b2, alpha, beta`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.extend_from_slice(&self.b2);
        out.push(self.alpha);
        out.push(self.beta);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::LengthMismatch {
                expected: self.num_params(),
                found: flat.len(),
            });
        }
        let mut rest = flat;
        for buf in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            let (head, tail) = rest.split_at(buf.len());
            buf.copy_from_slice(head);
            rest = tail;
        }
        self.alpha = rest[0];
        self.beta = rest[1];
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// `init` with the default embedding and hidden sizes.
pub fn init_fusion(classes: usize, seed: u64) -> Result<FusionParams> {
    FusionParams::init(EMBED_DIM, HIDDEN_DIM, classes, seed)
}

struct BiasForward {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    bias: Vec<f64>,
}

fn bias_forward(p: &FusionParams, t: &[f64]) -> Result<BiasForward> {
    if t.len() != p.embed_dim {
        return Err(Error::LengthMismatch {
            expected: p.embed_dim,
            found: t.len(),
        });
    }
    let h = p.hidden_dim;
    let mut pre = p.b1.clone();
    for (e, &te) in t.iter().enumerate() {
        if te == 0.0 {
            continue;
        }
        let row = &p.w1[e * h..(e + 1) * h];
        for j in 0..h {
            pre[j] += te * row[j];
        }
    }
    let hidden: Vec<f64> = pre.iter().map(|&x| x.max(0.0)).collect();
    let c = p.classes;
    let mut bias = p.b2.clone();
    for (j, &hj) in hidden.iter().enumerate() {
        if hj == 0.0 {
            continue;
        }
        let row = &p.w2[j * c..(j + 1) * c];
        for k in 0..c {
            bias[k] += hj * row[k];
        }
    }
    Ok(BiasForward { pre, hidden, bias })
}

/// Per-class bias for an embedding.
pub fn class_bias(p: &FusionParams, t: &TextEmbedding) -> Result<Vec<f64>> {
    bias_forward(p, &t.0).map(|f| f.bias)
}

/// `L_vis + alpha * b + beta * P`. A zero `alpha` or `beta` skips its term, so a
/// zero-weight fusion returns `L_vis` bit for bit.
pub fn fuse_logits(
    vis: &LogitTensor,
    bias: &[f64],
    alpha: f64,
    beta: f64,
    prior: Option<&LogitTensor>,
) -> Result<LogitTensor> {
    if bias.len() != vis.channels {
        return Err(Error::ShapeMismatch(format!(
            "bias of length {} for {} channels",
            bias.len(),
            vis.channels
        )));
    }
    if let Some(p) = prior {
        vis.same_shape(p)?;
    }
    let mut out = vis.clone();
    if alpha != 0.0 {
        for (c, &bc) in bias.iter().enumerate() {
            let shift = alpha * bc;
            out.channel_mut(c).iter_mut().for_each(|v| *v += shift);
        }
    }
    if let (Some(p), true) = (prior, beta != 0.0) {
        for (v, &pv) in out.data.iter_mut().zip(&p.data) {
            *v += beta * pv;
        }
    }
    Ok(out)
}

/// Supervision for one fusion step.
#[derive(Clone, Copy, Debug)]
pub struct FusionTargets<'a> {
    pub labels: &'a LabelMap,
    /// Presence vector over all classes; `None` disables the text term.
    pub presence: Option<&'a [u8]>,
}

/// Relation prior data for a step: the assembled tensor and its regions.
#[derive(Clone, Copy, Debug)]
pub struct PriorInput<'a> {
    pub tensor: &'a LogitTensor,
    pub regions: &'a [RelationRegion],
}

/// Total loss and its analytic gradient with respect to every fusion parameter.
///
/// The segmentation term is Dice + cross-entropy on the softmax of the fused
/// logits; the relation term is active when `prior` carries regions.
pub fn fusion_backward(
    t: &TextEmbedding,
    vis: &LogitTensor,
    prior: Option<PriorInput<'_>>,
    targets: FusionTargets<'_>,
    cfg: &LossConfig,
    p: &FusionParams,
) -> Result<(LossBreakdown, FusionGradients)> {
    if vis.channels != p.classes {
        return Err(Error::ShapeMismatch(format!(
            "visual logits have {} channels, head has {}",
            vis.channels, p.classes
        )));
    }
    if targets.labels.dims != vis.dims {
        return Err(Error::ShapeMismatch("labels and logits differ in dims".into()));
    }
    let fwd = bias_forward(p, &t.0)?;
    let fused = fuse_logits(vis, &fwd.bias, p.alpha, p.beta, prior.map(|pr| pr.tensor))?;
    let probs = softmax_channels(&fused);
    let gt = one_hot(targets.labels, p.classes)?;

    let dice = dice_loss_grad(&probs, &gt, cfg.epsilon)?;
    let ce = cross_entropy_grad(&probs, &gt, cfg.prob_clamp)?;
    let mut grad_probs = dice.grad;
    for (g, c) in grad_probs.iter_mut().zip(&ce.grad) {
        *g += c;
    }
    let rel = match prior {
        Some(pr) if pr.regions.iter().any(|r| r.size() > 0) => {
            let r = relation_loss_grad(&probs, pr.regions, targets.labels, cfg.prob_clamp)?;
            for (g, d) in grad_probs.iter_mut().zip(&r.grad) {
                *g += cfg.lambda_rel * d;
            }
            Some(r.value)
        }
        _ => None,
    };
    let text = match targets.presence {
        Some(y) => Some(text_alignment_grad(&fwd.bias, y, cfg.prob_clamp)?),
        None => None,
    };
    let loss = total_fusion_loss(dice.value, ce.value, text.as_ref().map(|t| t.value), rel, cfg);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(format!("{loss:?}")));
    }

    let g = softmax_backward(&probs, &grad_probs);
    let v = vis.voxels();
    let c = p.classes;
    let channel_sums: Vec<f64> = (0..c).map(|k| g[k * v..(k + 1) * v].iter().sum()).collect();

    let mut grads = FusionParams::zeros(p.embed_dim, p.hidden_dim, c);
    grads.alpha = channel_sums.iter().zip(&fwd.bias).map(|(s, b)| s * b).sum();
    grads.beta = match prior {
        Some(pr) => g.iter().zip(&pr.tensor.data).map(|(a, b)| a * b).sum(),
        None => 0.0,
    };
    let mut db: Vec<f64> = channel_sums.iter().map(|s| p.alpha * s).collect();
    if let Some(tg) = &text {
        for (d, tgc) in db.iter_mut().zip(&tg.grad) {
            *d += cfg.lambda_text * tgc;
        }
    }
    grads.b2.copy_from_slice(&db);
    let h = p.hidden_dim;
    let mut dpre = vec![0.0; h];
    for j in 0..h {
        let row = &p.w2[j * c..(j + 1) * c];
        let grow = &mut grads.w2[j * c..(j + 1) * c];
        let mut dh = 0.0;
        for k in 0..c {
            grow[k] = fwd.hidden[j] * db[k];
            dh += row[k] * db[k];
        }
        dpre[j] = if fwd.pre[j] > 0.0 { dh } else { 0.0 };
    }
    grads.b1.copy_from_slice(&dpre);
    for (e, &te) in t.0.iter().enumerate() {
        let grow = &mut grads.w1[e * h..(e + 1) * h];
        for j in 0..h {
            grow[j] = te * dpre[j];
        }
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient("fusion parameters".into()));
    }
    Ok((loss, grads))
}

/// Fusion parameters together with optimizer state and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionCheckpoint {
    pub params: FusionParams,
    pub epoch: usize,
    pub optimizer: AdamWState,
    pub config_hash: u32,
}

impl FusionCheckpoint {
    pub fn fresh(params: FusionParams, config_hash: u32) -> Self {
        let optimizer = AdamWState::new(params.num_params());
        Self {
            params,
            epoch: 0,
            optimizer,
            config_hash,
        }
    }

    /// CRC-32 over the little-endian parameter bytes; identifies a model.
    pub fn params_hash(&self) -> u32 {
        let bytes: Vec<u8> = self.params.to_flat().iter().flat_map(|v| v.to_le_bytes()).collect();
        crc32fast::hash(&bytes)
    }
}

pub const FUSION_KIND: &str = "fusion";

pub fn save_checkpoint(ckpt: &FusionCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let p = &ckpt.params;
    save_record(
        &CheckpointRecord {
            kind: FUSION_KIND.into(),
            shape: vec![p.embed_dim, p.hidden_dim, p.classes],
            epoch: ckpt.epoch,
            config_hash: ckpt.config_hash,
            params: p.to_flat(),
            optimizer: ckpt.optimizer.clone(),
            extra: KeyValues::new(),
        },
        path,
    )
}

/// Loads a fusion checkpoint. `classes` and `config_hash`, when given, must match.
pub fn load_checkpoint(path: impl AsRef<Path>, classes: Option<usize>, config_hash: Option<u32>) -> Result<FusionCheckpoint> {
    let rec = load_record(path)?;
    if rec.kind != FUSION_KIND {
        return Err(Error::BadCheckpoint(format!("expected a fusion checkpoint, found {:?}", rec.kind)));
    }
    let [e, h, c] = rec.shape[..] else {
        return Err(Error::BadCheckpoint(format!("fusion shape {:?}", rec.shape)));
    };
    if let Some(want) = classes {
        if want != c {
            return Err(Error::ShapeMismatch(format!("checkpoint has {c} classes, run expects {want}")));
        }
    }
    if let Some(want) = config_hash {
        if want != rec.config_hash {
            return Err(Error::ConfigMismatch {
                expected: want,
                found: rec.config_hash,
            });
        }
    }
    let mut params = FusionParams::zeros(e, h, c);
    params.set_flat(&rec.params).map_err(|_| {
        Error::ShapeMismatch(format!("{} values for fusion shape {e}x{h}x{c}", rec.params.len()))
    })?;
    Ok(FusionCheckpoint {
        params,
        epoch: rec.epoch,
        optimizer: rec.optimizer,
        config_hash: rec.config_hash,
    })
}
