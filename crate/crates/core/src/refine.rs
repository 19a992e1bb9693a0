//! Residual refinement head over backbone logits.
//!
//! `S' = S + conv1(dropout(relu(instance_norm(conv3(S)))))`. The 3³ convolution
//! is zero-padded so shapes are preserved; instance norm uses the biased
//! variance over all voxels of a channel; dropout is inverted so eval mode is
//! the identity.

use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_record, save_record, CheckpointRecord};
use crate::error::{Error, Result};
use crate::grid::{one_hot, softmax_channels, Dims, LabelMap, LogitTensor};
use crate::kv::KeyValues;
use crate::loss::{dice_focal_grad, softmax_backward, LossConfig};
use crate::optim::{adamw_step, cosine_lr, AdamWState, ScheduleConfig};

const TAPS: usize = 27;

/// `conv3_w` is `C_out x C_in x 27` with taps ordered (dz, dy, dx) over
/// `-1..=1`; `conv1_w` is `C_out x C_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineParams {
    pub classes: usize,
    pub conv3_w: Vec<f64>,
    pub conv3_b: Vec<f64>,
    pub in_scale: Vec<f64>,
    pub in_shift: Vec<f64>,
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub dropout_rate: f64,
    pub in_eps: f64,
}

/// Gradients share the parameter layout; `dropout_rate` and `in_eps` are copied.
pub type RefineGradients = RefineParams;

impl RefineParams {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            conv3_w: vec![0.0; classes * classes * TAPS],
            conv3_b: vec![0.0; classes],
            in_scale: vec![0.0; classes],
            in_shift: vec![0.0; classes],
            conv1_w: vec![0.0; classes * classes],
            conv1_b: vec![0.0; classes],
            dropout_rate: 0.1,
            in_eps: 1e-5,
        }
    }

    /// Xavier-uniform `conv3`, unit/zero affine, zero `conv1`: the head starts as
    /// the identity on logits.
    pub fn init(classes: usize, seed: u64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::ConfigInvalid("refinement head needs at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan = (classes * TAPS) as f64;
        let a = (6.0 / (2.0 * fan)).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
        let mut p = Self::zeros(classes);
        p.conv3_w.iter_mut().for_each(|w| *w = dist.sample(&mut rng));
        p.in_scale.iter_mut().for_each(|s| *s = 1.0);
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.classes;
        let shapes_ok = self.conv3_w.len() == c * c * TAPS
            && self.conv3_b.len() == c
            && self.in_scale.len() == c
            && self.in_shift.len() == c
            && self.conv1_w.len() == c * c
            && self.conv1_b.len() == c;
        if !shapes_ok {
            return Err(Error::ShapeMismatch(format!("refinement parameters for C={c}")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) || !(self.in_eps > 0.0) {
            return Err(Error::ConfigInvalid(format!(
                "dropout {} / eps {}",
                self.dropout_rate, self.in_eps
            )));
        }
        if !self.to_flat().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteData("refinement parameters".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let c = self.classes;
        c * c * TAPS + c * c + 4 * c
    }

    /// Flat view in the order `conv3_w, conv3_b, in_scale, in_shift, conv1_w, conv1_b`.
    pub fn to_flat(&self) -> Vec<f64> {
        [
            &self.conv3_w,
            &self.conv3_b,
            &self.in_scale,
            &self.in_shift,
            &self.conv1_w,
            &self.conv1_b,
        ]
        .iter()
        .flat_map(|v| v.iter().copied())
        .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::LengthMismatch {
                expected: self.num_params(),
                found: flat.len(),
            });
        }
        let mut rest = flat;
        for buf in [
            &mut self.conv3_w,
            &mut self.conv3_b,
            &mut self.in_scale,
            &mut self.in_shift,
            &mut self.conv1_w,
            &mut self.conv1_b,
        ] {
            let (head, tail) = rest.split_at(buf.len());
            buf.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// CRC-32 of the parameter bytes; ties caches to the parameters that made them.
    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for v in self.to_flat() {
            h.update(&v.to_le_bytes());
        }
        h.update(&self.dropout_rate.to_le_bytes());
        h.update(&self.in_eps.to_le_bytes());
        h.finalize()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Normalizes one field: `(x - mean) / sqrt(var + eps) * scale + shift`.
pub fn instance_norm(x: &[f64], scale: f64, shift: f64, eps: f64) -> Result<Vec<f64>> {
    let (xhat, _) = normalize(x, eps)?;
    Ok(xhat.iter().map(|v| v * scale + shift).collect())
}

fn normalize(x: &[f64], eps: f64) -> Result<(Vec<f64>, f64)> {
    if x.len() < 2 {
        return Err(Error::DegenerateField);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    Ok((x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std))
}

/// Offsets of the 27 taps as (dz, dy, dx).
fn taps() -> impl Iterator<Item = (usize, [isize; 3])> {
    (0..TAPS).map(|k| (k, [(k / 9) as isize - 1, ((k / 3) % 3) as isize - 1, (k % 3) as isize - 1]))
}

/// Visits every in-bounds pair (output voxel, input voxel shifted by `off`).
fn for_shift(dims: Dims, off: [isize; 3], mut f: impl FnMut(usize, usize)) {
    let range = |n: usize, o: isize| -> (usize, usize) {
        let lo = if o < 0 { (-o) as usize } else { 0 };
        let hi = if o > 0 { n.saturating_sub(o as usize) } else { n };
        (lo, hi)
    };
    let (z0, z1) = range(dims.d, off[0]);
    let (y0, y1) = range(dims.h, off[1]);
    let (x0, x1) = range(dims.w, off[2]);
    for z in z0..z1 {
        for y in y0..y1 {
            let out = dims.index(z, y, x0);
            let inp = dims.index(
                (z as isize + off[0]) as usize,
                (y as isize + off[1]) as usize,
                (x0 as isize + off[2]) as usize,
            );
            for x in 0..x1.saturating_sub(x0) {
                f(out + x, inp + x);
            }
        }
    }
}

fn conv3(x: &LogitTensor, p: &RefineParams) -> Vec<f64> {
    let c = p.classes;
    let v = x.voxels();
    let mut out = vec![0.0; c * v];
    for o in 0..c {
        let dst = &mut out[o * v..(o + 1) * v];
        dst.iter_mut().for_each(|d| *d = p.conv3_b[o]);
        for i in 0..c {
            let src = x.channel(i);
            for (k, off) in taps() {
                let w = p.conv3_w[(o * c + i) * TAPS + k];
                if w == 0.0 {
                    continue;
                }
                for_shift(x.dims, off, |a, b| dst[a] += w * src[b]);
            }
        }
    }
    out
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct RefineCache {
    input: LogitTensor,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    pre_relu: Vec<f64>,
    /// Per-activation dropout multiplier: 0 or `1 / (1 - rate)`.
    keep: Vec<f64>,
    dropped: Vec<f64>,
    fingerprint: u32,
}

impl RefineCache {
    /// Sign pattern of the ReLU inputs; finite-difference probes compare it to
    /// detect steps that cross a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.pre_relu.iter().map(|&v| v > 0.0).collect()
    }
}

/// Applies the head. Dropout draws from a ChaCha8 stream seeded with `seed`
/// in train mode; eval mode ignores the seed.
pub fn refine_forward(s: &LogitTensor, p: &RefineParams, mode: Mode, seed: u64) -> Result<(LogitTensor, RefineCache)> {
    p.validate()?;
    if s.channels != p.classes {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, head has {}",
            s.channels, p.classes
        )));
    }
    let c = p.classes;
    let v = s.voxels();
    let a = conv3(s, p);
    let mut xhat = vec![0.0; c * v];
    let mut inv_std = vec![0.0; c];
    let mut pre = vec![0.0; c * v];
    for k in 0..c {
        let (xh, is) = normalize(&a[k * v..(k + 1) * v], p.in_eps)?;
        for i in 0..v {
            pre[k * v + i] = xh[i] * p.in_scale[k] + p.in_shift[k];
        }
        xhat[k * v..(k + 1) * v].copy_from_slice(&xh);
        inv_std[k] = is;
    }
    let keep = match mode {
        Mode::Train if p.dropout_rate > 0.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale = 1.0 / (1.0 - p.dropout_rate);
            (0..c * v)
                .map(|_| if rng.random::<f64>() < p.dropout_rate { 0.0 } else { scale })
                .collect()
        }
        _ => vec![1.0; c * v],
    };
    let dropped: Vec<f64> = pre.iter().zip(&keep).map(|(y, m)| y.max(0.0) * m).collect();
    let mut out = s.clone();
    for o in 0..c {
        let dst = out.channel_mut(o);
        for (i, d) in dst.iter_mut().enumerate() {
            let mut acc = p.conv1_b[o];
            for ci in 0..c {
                acc += p.conv1_w[o * c + ci] * dropped[ci * v + i];
            }
            *d += acc;
        }
    }
    Ok((
        out,
        RefineCache {
            input: s.clone(),
            xhat,
            inv_std,
            pre_relu: pre,
            keep,
            dropped,
            fingerprint: p.fingerprint(),
        },
    ))
}

/// Exact gradients of the head. Returns parameter gradients and `dL/dS`.
pub fn refine_backward(cache: &RefineCache, p: &RefineParams, grad_out: &[f64]) -> Result<(RefineGradients, Vec<f64>)> {
    if cache.fingerprint != p.fingerprint() {
        return Err(Error::StaleCache);
    }
    let x = &cache.input;
    let c = p.classes;
    let v = x.voxels();
    if grad_out.len() != c * v {
        return Err(Error::LengthMismatch {
            expected: c * v,
            found: grad_out.len(),
        });
    }
    let mut g = RefineParams::zeros(c);
    g.dropout_rate = p.dropout_rate;
    g.in_eps = p.in_eps;
    let mut dx = grad_out.to_vec();

    // conv1
    let mut dd = vec![0.0; c * v];
    for o in 0..c {
        let go = &grad_out[o * v..(o + 1) * v];
        g.conv1_b[o] = go.iter().sum();
        for ci in 0..c {
            let d = &cache.dropped[ci * v..(ci + 1) * v];
            g.conv1_w[o * c + ci] = go.iter().zip(d).map(|(a, b)| a * b).sum();
            let w = p.conv1_w[o * c + ci];
            if w != 0.0 {
                for (acc, &gv) in dd[ci * v..(ci + 1) * v].iter_mut().zip(go) {
                    *acc += w * gv;
                }
            }
        }
    }
    // dropout, relu, affine, normalization
    let n = v as f64;
    let mut da = vec![0.0; c * v];
    for k in 0..c {
        let r = k * v..(k + 1) * v;
        let dy: Vec<f64> = r
            .clone()
            .map(|j| if cache.pre_relu[j] > 0.0 { dd[j] * cache.keep[j] } else { 0.0 })
            .collect();
        let xh = &cache.xhat[r.clone()];
        g.in_shift[k] = dy.iter().sum();
        g.in_scale[k] = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
        let dxh: Vec<f64> = dy.iter().map(|d| d * p.in_scale[k]).collect();
        let sum = dxh.iter().sum::<f64>();
        let dot = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
        for (i, j) in r.enumerate() {
            da[j] = cache.inv_std[k] / n * (n * dxh[i] - sum - xh[i] * dot);
        }
    }
    // conv3
    for o in 0..c {
        let dao = &da[o * v..(o + 1) * v];
        g.conv3_b[o] = dao.iter().sum();
        for i in 0..c {
            let src = x.channel(i);
            for (k, off) in taps() {
                let mut acc = 0.0;
                for_shift(x.dims, off, |a, b| acc += dao[a] * src[b]);
                g.conv3_w[(o * c + i) * TAPS + k] = acc;
                let w = p.conv3_w[(o * c + i) * TAPS + k];
                if w != 0.0 {
                    let dxi = &mut dx[i * v..(i + 1) * v];
                    for_shift(x.dims, off, |a, b| dxi[b] += w * dao[a]);
                }
            }
        }
    }
    Ok((g, dx))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineTrainConfig {
    pub epochs: usize,
    pub cycles: usize,
    pub iterations_per_epoch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patch: Dims,
    pub dropout_rate: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for RefineTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            cycles: 10,
            iterations_per_epoch: 20,
            lr: 5e-4,
            weight_decay: 1e-5,
            patch: Dims::cube(24),
            dropout_rate: 0.1,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl RefineTrainConfig {
    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            base_lr: self.lr,
            min_lr: 0.0,
            total_epochs: self.epochs.max(1),
            cycles: self.cycles,
        }
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.push("epochs", self.epochs)
            .push("cycles", self.cycles)
            .push("iterations_per_epoch", self.iterations_per_epoch)
            .push("lr", self.lr)
            .push("weight_decay", self.weight_decay)
            .push("patch", crate::kv::join(&self.patch.as_array()))
            .push("dropout_rate", self.dropout_rate)
            .push("gamma", self.loss.gamma)
            .push("seed", self.seed);
        kv
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineCheckpoint {
    pub params: RefineParams,
    pub epoch: usize,
    pub optimizer: AdamWState,
    pub config_hash: u32,
}

/// Per-iteration training record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineLogEntry {
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f64,
    pub dice: f64,
    pub focal: f64,
}

/// Trains only the head with Dice + Focal on the softmax of refined logits,
/// one random patch per iteration.
pub fn finetune_refinement(
    pairs: &[(LogitTensor, LabelMap)],
    cfg: &RefineTrainConfig,
) -> Result<(RefineCheckpoint, Vec<RefineLogEntry>)> {
    let first = pairs.first().ok_or(Error::EmptyInput)?;
    let classes = first.0.channels;
    for (logits, labels) in pairs {
        if logits.channels != classes || logits.dims != labels.dims {
            return Err(Error::ShapeMismatch("refinement pairs disagree in shape".into()));
        }
        labels.check_classes(classes)?;
    }
    cfg.loss.validate()?;
    let schedule = cfg.schedule();
    schedule.validate()?;
    let mut params = RefineParams::init(classes, cfg.seed)?;
    params.dropout_rate = cfg.dropout_rate;
    params.validate()?;
    let mut opt = AdamWState::new(params.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f00d);
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, &schedule)?;
        for iteration in 0..cfg.iterations_per_epoch {
            let (logits, labels) = &pairs[rng.random_range(0..pairs.len())];
            let size = Dims::new(
                cfg.patch.d.min(logits.dims.d),
                cfg.patch.h.min(logits.dims.h),
                cfg.patch.w.min(logits.dims.w),
            );
            let origin = [
                rng.random_range(0..=logits.dims.d - size.d),
                rng.random_range(0..=logits.dims.h - size.h),
                rng.random_range(0..=logits.dims.w - size.w),
            ];
            let s = crate::window::PatchSource::patch(logits, origin, size);
            let gt = one_hot(&crate::phantom::crop_labels(labels, origin, size), classes)?;
            let (refined, cache) = refine_forward(&s, &params, Mode::Train, rng.random())?;
            let probs = softmax_channels(&refined);
            let (dice, focal, grad_p) = dice_focal_grad(&probs, &gt, &cfg.loss)?;
            if !(dice + focal).is_finite() {
                return Err(Error::NonFiniteLoss(format!("refinement epoch {epoch} iteration {iteration}")));
            }
            let grad_logits = softmax_backward(&probs, &grad_p);
            let (grads, _) = refine_backward(&cache, &params, &grad_logits)?;
            let mut flat = params.to_flat();
            adamw_step(&mut flat, &grads.to_flat(), &mut opt, lr, cfg.weight_decay)?;
            params.set_flat(&flat)?;
            log.push(RefineLogEntry {
                epoch,
                iteration,
                lr,
                dice,
                focal,
            });
        }
    }
    let config_hash = crate::checkpoint::config_hash(&cfg.to_kv().to_text());
    Ok((
        RefineCheckpoint {
            params,
            epoch: cfg.epochs,
            optimizer: opt,
            config_hash,
        },
        log,
    ))
}

pub const REFINE_KIND: &str = "refine";

pub fn save_refine_checkpoint(ck: &RefineCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut extra = KeyValues::new();
    extra
        .push("dropout_rate", ck.params.dropout_rate)
        .push("in_eps", ck.params.in_eps);
    save_record(
        &CheckpointRecord {
            kind: REFINE_KIND.into(),
            shape: vec![ck.params.classes],
            epoch: ck.epoch,
            config_hash: ck.config_hash,
            params: ck.params.to_flat(),
            optimizer: ck.optimizer.clone(),
            extra,
        },
        path,
    )
}

pub fn load_refine_checkpoint(path: impl AsRef<Path>, classes: Option<usize>) -> Result<RefineCheckpoint> {
    let rec = load_record(path)?;
    if rec.kind != REFINE_KIND {
        return Err(Error::BadCheckpoint(format!("expected a refine checkpoint, found {:?}", rec.kind)));
    }
    let [c] = rec.shape[..] else {
        return Err(Error::BadCheckpoint(format!("refine shape {:?}", rec.shape)));
    };
    if classes.is_some_and(|want| want != c) {
        return Err(Error::ShapeMismatch(format!("checkpoint has {c} classes")));
    }
    let mut params = RefineParams::zeros(c);
    params.set_flat(&rec.params)?;
    params.dropout_rate = rec
        .extra
        .parse_value("dropout_rate")
        .map_err(|e| Error::BadCheckpoint(e.to_string()))?
        .ok_or_else(|| Error::BadCheckpoint("missing dropout_rate".into()))?;
    params.in_eps = rec
        .extra
        .parse_value("in_eps")
        .map_err(|e| Error::BadCheckpoint(e.to_string()))?
        .ok_or_else(|| Error::BadCheckpoint("missing in_eps".into()))?;
    params.validate()?;
    Ok(RefineCheckpoint {
        params,
        epoch: rec.epoch,
        optimizer: rec.optimizer,
        config_hash: rec.config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Spacing;

    fn random_tensor(c: usize, dims: Dims, seed: u64) -> LogitTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LogitTensor::new(
            c,
            dims,
            Spacing::UNIT,
            (0..c * dims.len()).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_projection_is_identity() {
        let s = random_tensor(3, Dims::cube(4), 1);
        let p = RefineParams::init(3, 7).unwrap();
        let (out, cache) = refine_forward(&s, &p, Mode::Train, 99).unwrap();
        assert_eq!(out, s);
        let g: Vec<f64> = (0..s.data.len()).map(|i| (i as f64).sin()).collect();
        let (_, dx) = refine_backward(&cache, &p, &g).unwrap();
        assert_eq!(dx, g);
    }

    #[test]
    fn no_dropout_train_equals_eval() {
        let s = random_tensor(2, Dims::cube(3), 2);
        let mut p = RefineParams::init(2, 3).unwrap();
        p.conv1_w = vec![0.5, -0.25, 1.0, 0.75];
        p.dropout_rate = 0.0;
        let (a, _) = refine_forward(&s, &p, Mode::Train, 1).unwrap();
        let (b, _) = refine_forward(&s, &p, Mode::Eval, 2).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn eval_is_seed_independent() {
        let s = random_tensor(2, Dims::cube(3), 4);
        let mut p = RefineParams::init(2, 5).unwrap();
        p.conv1_w = vec![0.3; 4];
        let (a, _) = refine_forward(&s, &p, Mode::Eval, 1).unwrap();
        let (b, _) = refine_forward(&s, &p, Mode::Eval, 1000).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn centre_tap_normalizes_input() {
        let dims = Dims::cube(2);
        let data = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let s = LogitTensor::new(1, dims, Spacing::UNIT, data.clone()).unwrap();
        let mut p = RefineParams::zeros(1);
        p.conv3_w[13] = 1.0;
        p.in_scale[0] = 1.0;
        p.conv1_w[0] = 1.0;
        p.dropout_rate = 0.0;
        let (out, _) = refine_forward(&s, &p, Mode::Eval, 0).unwrap();
        // mean 4.5, biased variance 5.25
        let inv = 1.0 / (5.25f64 + 1e-5).sqrt();
        for i in 0..8 {
            let normed = (data[i] - 4.5) * inv;
            assert!((out.data[i] - data[i] - normed.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_norm_cases() {
        assert_eq!(instance_norm(&[3.0; 5], 2.0, 0.5, 1e-5).unwrap(), vec![0.5; 5]);
        let out = instance_norm(&[0.0, 2.0], 1.0, 0.0, 1e-12).unwrap();
        assert!((out[0] + 1.0).abs() < 1e-9 && (out[1] - 1.0).abs() < 1e-9);
        let out = instance_norm(&[1.0, 5.0, -2.0, 7.5], 1.0, 0.0, 1e-5).unwrap();
        let mean = out.iter().sum::<f64>() / 4.0;
        let var = out.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-5);
        assert!(matches!(instance_norm(&[1.0], 1.0, 0.0, 1e-5), Err(Error::DegenerateField)));
    }

    #[test]
    fn stale_cache_detected() {
        let s = random_tensor(2, Dims::cube(3), 6);
        let mut p = RefineParams::init(2, 1).unwrap();
        let (_, cache) = refine_forward(&s, &p, Mode::Train, 0).unwrap();
        p.conv1_b[0] = 0.1;
        assert!(matches!(
            refine_backward(&cache, &p, &vec![0.0; s.data.len()]),
            Err(Error::StaleCache)
        ));
    }

    #[test]
    fn dropout_rate_is_respected() {
        let s = random_tensor(2, Dims::cube(10), 7);
        let mut p = RefineParams::init(2, 1).unwrap();
        p.dropout_rate = 0.3;
        let (_, cache) = refine_forward(&s, &p, Mode::Train, 42).unwrap();
        let dropped = cache.keep.iter().filter(|&&k| k == 0.0).count() as f64 / cache.keep.len() as f64;
        assert!((dropped - 0.3).abs() < 0.05);
        let scale = 1.0 / 0.7;
        assert!(cache.keep.iter().all(|&k| k == 0.0 || k == scale));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ckpt");
        let params = RefineParams::init(3, 2).unwrap();
        let ck = RefineCheckpoint {
            optimizer: AdamWState::new(params.num_params()),
            params,
            epoch: 2,
            config_hash: 5,
        };
        save_refine_checkpoint(&ck, &path).unwrap();
        assert_eq!(load_refine_checkpoint(&path, Some(3)).unwrap(), ck);
        assert!(matches!(load_refine_checkpoint(&path, Some(4)), Err(Error::ShapeMismatch(_))));
        assert!(matches!(
            crate::fusion::load_checkpoint(&path, None, None),
            Err(Error::BadCheckpoint(_))
        ));
    }
}
