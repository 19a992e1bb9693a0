//! Finite-difference gradient oracles shared by the integration suites.
#![allow(dead_code)]

use promptseg::embedding::{embed_hashed, TextEmbedding};
use promptseg::fusion::{fusion_backward, init_fusion, FusionParams, FusionTargets, PriorInput};
use promptseg::grid::{one_hot, softmax_channels, Dims, LabelMap, LogitTensor, Spacing};
use promptseg::loss::{dice_focal_grad, softmax_backward, LossConfig};
use promptseg::prior::{assemble_prior_tensor, PriorAssembly, RelationPriorConfig};
use promptseg::refine::{refine_backward, refine_forward, Mode, RefineParams};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
    pub skipped: usize,
}

impl FdReport {
    fn record(&mut self, what: String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = rel_err(analytic, numeric);
        if e > self.max_rel {
            self.max_rel = e;
            self.worst = format!("{what}: analytic {analytic:e} numeric {numeric:e}");
        }
    }

    pub fn merge(&mut self, other: FdReport) {
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

pub fn random_labels(rng: &mut ChaCha8Rng, dims: Dims, classes: usize) -> LabelMap {
    LabelMap::new(
        dims,
        Spacing::UNIT,
        (0..dims.len()).map(|_| rng.random_range(0..classes as u8)).collect(),
    )
    .unwrap()
}

pub fn random_logits(rng: &mut ChaCha8Rng, dims: Dims, classes: usize, spread: f64) -> LogitTensor {
    LogitTensor::new(
        classes,
        dims,
        Spacing::UNIT,
        (0..classes * dims.len()).map(|_| rng.random_range(-spread..spread)).collect(),
    )
    .unwrap()
}

pub struct FusionCase {
    pub t: TextEmbedding,
    pub vis: LogitTensor,
    pub labels: LabelMap,
    pub presence: Vec<u8>,
    pub prior: PriorAssembly,
    pub params: FusionParams,
}

/// Random 6³ fusion case with text supervision and one relation.
pub fn fusion_case(classes: usize, seed: u64) -> FusionCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims::cube(6);
    let labels = random_labels(&mut rng, dims, classes);
    let vis = random_logits(&mut rng, dims, classes, 3.0);
    let mut presence: Vec<u8> = (0..classes).map(|_| rng.random_range(0..2u8)).collect();
    presence[0] = 0;
    let fg: Vec<u8> = (1..classes as u8).collect();
    let anchor = *fg.choose(&mut rng).unwrap();
    let target = *fg.iter().filter(|&&c| c != anchor).collect::<Vec<_>>().choose(&mut rng).unwrap();
    let cfg = RelationPriorConfig {
        d_max_voxels: 2.0,
        dilate_mm: None,
    };
    let prior = assemble_prior_tensor(&[(anchor, *target)], &labels, classes, &cfg).unwrap();
    let words = ["liver", "spleen", "segment", "kidney", "near", "the", "region", "stomach"];
    let prompt: Vec<&str> = (0..4).map(|_| *words.choose(&mut rng).unwrap()).collect();
    let t = embed_hashed(&prompt.join(" ")).unwrap();
    let mut params = init_fusion(classes, seed).unwrap();
    params.alpha = rng.random_range(0.3..1.5);
    params.beta = rng.random_range(0.3..1.5);
    params.b1.iter_mut().for_each(|b| *b = rng.random_range(-0.05..0.05));
    params.b2.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
    FusionCase {
        t,
        vis,
        labels,
        presence,
        prior,
        params,
    }
}

fn fusion_total(case: &FusionCase, p: &FusionParams, cfg: &LossConfig) -> f64 {
    fusion_backward(
        &case.t,
        &case.vis,
        Some(PriorInput {
            tensor: &case.prior.tensor,
            regions: &case.prior.regions,
        }),
        FusionTargets {
            labels: &case.labels,
            presence: Some(&case.presence),
        },
        cfg,
        p,
    )
    .unwrap()
    .0
    .total
}

/// Central differences on sampled entries of every fusion tensor, both scalars,
/// and two random directions through the full parameter vector.
pub fn check_fusion(classes: usize, seed: u64) -> FdReport {
    let case = fusion_case(classes, seed);
    let cfg = LossConfig::default();
    let (_, grads) = fusion_backward(
        &case.t,
        &case.vis,
        Some(PriorInput {
            tensor: &case.prior.tensor,
            regions: &case.prior.regions,
        }),
        FusionTargets {
            labels: &case.labels,
            presence: Some(&case.presence),
        },
        &cfg,
        &case.params,
    )
    .unwrap();
    let flat = case.params.to_flat();
    let gflat = grads.to_flat();
    let p = &case.params;
    let (n_w1, n_b1, n_w2, n_b2) = (p.w1.len(), p.b1.len(), p.w2.len(), p.b2.len());
    let offsets = [0, n_w1, n_w1 + n_b1, n_w1 + n_b1 + n_w2, n_w1 + n_b1 + n_w2 + n_b2];
    let names = ["w1", "b1", "w2", "b2"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut picks: Vec<(String, usize)> = Vec::new();
    // w1: only entries feeding active hidden units carry gradient.
    let active: Vec<usize> = (0..p.hidden_dim).filter(|&j| grads.b1[j] != 0.0).collect();
    for _ in 0..24 {
        let e = rng.random_range(0..p.embed_dim);
        let j = if active.is_empty() {
            rng.random_range(0..p.hidden_dim)
        } else {
            *active.choose(&mut rng).unwrap()
        };
        picks.push((format!("w1[{e},{j}]"), e * p.hidden_dim + j));
    }
    for (k, name) in names.iter().enumerate().skip(1) {
        let len = offsets[k + 1] - offsets[k];
        for _ in 0..24.min(len) {
            let i = rng.random_range(0..len);
            picks.push((format!("{name}[{i}]"), offsets[k] + i));
        }
    }
    picks.push(("alpha".into(), flat.len() - 2));
    picks.push(("beta".into(), flat.len() - 1));

    let mut report = FdReport::default();
    let mut q = case.params.clone();
    for (name, i) in picks {
        let mut f = flat.clone();
        f[i] = flat[i] + H;
        q.set_flat(&f).unwrap();
        let plus = fusion_total(&case, &q, &cfg);
        f[i] = flat[i] - H;
        q.set_flat(&f).unwrap();
        let minus = fusion_total(&case, &q, &cfg);
        report.record(name, gflat[i], (plus - minus) / (2.0 * H));
    }
    for k in 0..2 {
        let dir: Vec<f64> = (0..flat.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        let analytic: f64 = dir.iter().zip(&gflat).map(|(d, g)| d * g).sum::<f64>() / norm;
        let shifted = |s: f64| -> f64 {
            let f: Vec<f64> = flat.iter().zip(&dir).map(|(v, d)| v + s * d / norm).collect();
            let mut q = case.params.clone();
            q.set_flat(&f).unwrap();
            fusion_total(&case, &q, &cfg)
        };
        report.record(format!("direction {k}"), analytic, (shifted(H) - shifted(-H)) / (2.0 * H));
    }
    report
}

pub struct RefineCase {
    pub s: LogitTensor,
    pub gt: LogitTensor,
    pub params: RefineParams,
    pub seed: u64,
}

pub fn refine_case(classes: usize, seed: u64, dims: Dims, dropout: f64) -> RefineCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = random_labels(&mut rng, dims, classes);
    let s = random_logits(&mut rng, dims, classes, 2.0);
    let mut params = RefineParams::init(classes, seed).unwrap();
    params.dropout_rate = dropout;
    params.conv3_b.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    params.in_scale.iter_mut().for_each(|b| *b = rng.random_range(0.5..1.5));
    params.in_shift.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    params.conv1_w.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    params.conv1_b.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    RefineCase {
        gt: one_hot(&labels, classes).unwrap(),
        s,
        params,
        seed,
    }
}

fn refine_loss(case: &RefineCase, s: &LogitTensor, p: &RefineParams) -> (f64, Vec<bool>) {
    let (out, cache) = refine_forward(s, p, Mode::Train, case.seed).unwrap();
    let probs = softmax_channels(&out);
    let (d, f, _) = dice_focal_grad(&probs, &case.gt, &LossConfig::default()).unwrap();
    (d + f, cache.relu_pattern())
}

/// Central differences on sampled entries of every refinement tensor and of the
/// input. Probes whose step flips a ReLU sign are skipped (non-differentiable).
pub fn check_refine(classes: usize, seed: u64, dims: Dims, dropout: f64) -> FdReport {
    let case = refine_case(classes, seed, dims, dropout);
    let cfg = LossConfig::default();
    let (out, cache) = refine_forward(&case.s, &case.params, Mode::Train, case.seed).unwrap();
    let probs = softmax_channels(&out);
    let (_, _, gp) = dice_focal_grad(&probs, &case.gt, &cfg).unwrap();
    let (grads, dx) = refine_backward(&cache, &case.params, &softmax_backward(&probs, &gp)).unwrap();
    let flat = case.params.to_flat();
    let gflat = grads.to_flat();
    let c = classes;
    let sizes = [
        ("conv3_w", c * c * 27),
        ("conv3_b", c),
        ("in_scale", c),
        ("in_shift", c),
        ("conv1_w", c * c),
        ("conv1_b", c),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e);
    let mut report = FdReport::default();
    let mut offset = 0;
    let mut q = case.params.clone();
    for (name, len) in sizes {
        for _ in 0..16.min(len) {
            let i = rng.random_range(0..len);
            let mut f = flat.clone();
            f[offset + i] = flat[offset + i] + H;
            q.set_flat(&f).unwrap();
            let (plus, pat_p) = refine_loss(&case, &case.s, &q);
            f[offset + i] = flat[offset + i] - H;
            q.set_flat(&f).unwrap();
            let (minus, pat_m) = refine_loss(&case, &case.s, &q);
            if pat_p != pat_m {
                report.skipped += 1;
                continue;
            }
            report.record(format!("{name}[{i}]"), gflat[offset + i], (plus - minus) / (2.0 * H));
        }
        offset += len;
    }
    for _ in 0..16 {
        let i = rng.random_range(0..case.s.data.len());
        let mut sp = case.s.clone();
        sp.data[i] += H;
        let (plus, pat_p) = refine_loss(&case, &sp, &case.params);
        let mut sm = case.s.clone();
        sm.data[i] -= H;
        let (minus, pat_m) = refine_loss(&case, &sm, &case.params);
        if pat_p != pat_m {
            report.skipped += 1;
            continue;
        }
        report.record(format!("input[{i}]"), dx[i], (plus - minus) / (2.0 * H));
    }
    report
}
