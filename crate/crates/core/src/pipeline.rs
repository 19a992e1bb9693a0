//! Fusion training, prompt-conditioned inference and directory-level evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::config_hash;
use crate::embedding::{embed_hashed, TextEmbedding};
use crate::error::{Error, Result};
use crate::fusion::{class_bias, fuse_logits, fusion_backward, init_fusion, FusionCheckpoint, FusionParams, FusionTargets, PriorInput};
use crate::grid::{argmax_channels, Dims, LabelMap, LogitTensor, Volume};
use crate::io::{load_labels, save_labels};
use crate::kv::{join, KeyValues};
use crate::loss::{LossBreakdown, LossConfig};
use crate::metrics::{aggregate_reports, evaluate_labelmaps, MetricsReport};
use crate::optim::{adamw_step, cosine_lr, AdamWState, ScheduleConfig};
use crate::phantom::{augment, crop_labels, draw_origin, foreground_indices, normalize_intensity, oracle_logits, AugmentConfig, IntensityClassifier, LogitOracleConfig};
use crate::prior::{assemble_prior_tensor, RelationPriorConfig};
use crate::prompt::{parse_prompt, Lexicon, ParsedPrompt};
use crate::refine::{refine_forward, Mode, RefineParams};
use crate::window::{sliding_window_apply, PatchSource};

/// Where training patches get their frozen visual logits.
#[derive(Clone, Debug, PartialEq)]
pub enum VisualSource {
    /// Label-driven oracle. With `suppress_prompted` the prompt's organs are
    /// added to the suppressed set for that iteration.
    Oracle(LogitOracleConfig),
    /// Intensity model applied to the (normalised) volume patch.
    Classifier(IntensityClassifier),
}

/// A training pair; `volume` is already intensity-normalised.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingVolume {
    pub volume: Volume,
    pub labels: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub cycles: usize,
    pub weight_decay: f64,
    pub loss: LossConfig,
    pub seed: u64,
    pub patch: Dims,
    pub pos_fraction: f64,
    pub augment: Option<AugmentConfig>,
    pub suppress_prompted: bool,
    pub prior: RelationPriorConfig,
    /// Carried into inference; training ignores it.
    pub restrict_to_prompt: bool,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            iterations_per_epoch: 100,
            lr: 2e-3,
            min_lr: 0.0,
            cycles: 1,
            weight_decay: 1e-4,
            loss: LossConfig::default(),
            seed: 0,
            patch: Dims::cube(32),
            pos_fraction: 0.5,
            augment: Some(AugmentConfig::default()),
            suppress_prompted: true,
            prior: RelationPriorConfig::default(),
            restrict_to_prompt: false,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations_per_epoch == 0 && self.epochs > 0 {
            return Err(Error::ConfigInvalid("iterations_per_epoch must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..=1.0).contains(&self.pos_fraction) {
            return Err(Error::ConfigInvalid("weight_decay >= 0 and pos_fraction in [0, 1] required".into()));
        }
        self.patch.validate()?;
        self.loss.validate()?;
        self.prior.validate()?;
        if self.epochs > 0 {
            self.schedule().validate()?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            base_lr: self.lr,
            min_lr: self.min_lr,
            total_epochs: self.epochs,
            cycles: self.cycles,
        }
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.push("epochs", self.epochs)
            .push("iterations_per_epoch", self.iterations_per_epoch)
            .push("lr", self.lr)
            .push("min_lr", self.min_lr)
            .push("cycles", self.cycles)
            .push("weight_decay", self.weight_decay)
            .push("lambda_text", self.loss.lambda_text)
            .push("lambda_rel", self.loss.lambda_rel)
            .push("epsilon", self.loss.epsilon)
            .push("prob_clamp", self.loss.prob_clamp)
            .push("seed", self.seed)
            .push("patch", join(&self.patch.as_array()))
            .push("pos_fraction", self.pos_fraction)
            .push("suppress_prompted", self.suppress_prompted)
            .push("d_max_voxels", self.prior.d_max_voxels)
            .push("restrict_to_prompt", self.restrict_to_prompt);
        if let Some(r) = self.prior.dilate_mm {
            kv.push("dilate_mm", r);
        }
        match &self.augment {
            Some(a) => kv
                .push("augment_flips", a.flips)
                .push("augment_rot90", a.rot90)
                .push("augment_intensity", a.max_intensity_shift),
            None => kv.push("augment", false),
        };
        kv
    }

    /// Reads a run configuration; missing keys keep their defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let patch = match kv.get("patch") {
            Some(p) => {
                let [a, b, c] = crate::kv::parse_triple::<usize>(p)?;
                Dims::new(a, b, c)
            }
            None => d.patch,
        };
        let augment = if kv.parse_or("augment", true)? {
            let a = AugmentConfig::default();
            Some(AugmentConfig {
                flips: kv.parse_or("augment_flips", a.flips)?,
                rot90: kv.parse_or("augment_rot90", a.rot90)?,
                max_intensity_shift: kv.parse_or("augment_intensity", a.max_intensity_shift)?,
            })
        } else {
            None
        };
        let cfg = Self {
            epochs: kv.parse_or("epochs", d.epochs)?,
            iterations_per_epoch: kv.parse_or("iterations_per_epoch", d.iterations_per_epoch)?,
            lr: kv.parse_or("lr", d.lr)?,
            min_lr: kv.parse_or("min_lr", d.min_lr)?,
            cycles: kv.parse_or("cycles", d.cycles)?,
            weight_decay: kv.parse_or("weight_decay", d.weight_decay)?,
            loss: LossConfig {
                lambda_text: kv.parse_or("lambda_text", d.loss.lambda_text)?,
                lambda_rel: kv.parse_or("lambda_rel", d.loss.lambda_rel)?,
                epsilon: kv.parse_or("epsilon", d.loss.epsilon)?,
                prob_clamp: kv.parse_or("prob_clamp", d.loss.prob_clamp)?,
                ..d.loss
            },
            seed: kv.parse_or("seed", d.seed)?,
            patch,
            pos_fraction: kv.parse_or("pos_fraction", d.pos_fraction)?,
            augment,
            suppress_prompted: kv.parse_or("suppress_prompted", d.suppress_prompted)?,
            prior: RelationPriorConfig {
                d_max_voxels: kv.parse_or("d_max_voxels", d.prior.d_max_voxels)?,
                dilate_mm: kv.parse_value("dilate_mm")?,
            },
            restrict_to_prompt: kv.parse_or("restrict_to_prompt", d.restrict_to_prompt)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn config_hash(&self) -> u32 {
        config_hash(&self.to_kv().to_text())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLogEntry {
    /// 1-based.
    pub epoch: usize,
    /// 1-based within the epoch.
    pub iteration: usize,
    pub volume: usize,
    pub prompt: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub relation_active: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub entries: Vec<TrainLogEntry>,
}

pub const LOG_HEADER: &str = "epoch\titeration\tvolume\tprompt\tlr\tdice\tce\tseg\ttext\trel\trel_active\ttotal";

impl TrainingLog {
    /// Header plus one tab-separated line per iteration.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for e in &self.entries {
            let l = &e.loss;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                e.epoch,
                e.iteration,
                e.volume,
                e.prompt,
                e.lr,
                l.dice,
                l.ce,
                l.seg,
                l.text,
                l.rel,
                u8::from(e.relation_active),
                l.total
            );
        }
        out
    }

    /// Mean of `f` over an epoch's entries that pass `keep`.
    pub fn epoch_mean(&self, epoch: usize, keep: impl Fn(&TrainLogEntry) -> bool, f: impl Fn(&TrainLogEntry) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self.entries.iter().filter(|e| e.epoch == epoch && keep(e)).map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn epochs(&self) -> usize {
        self.entries.iter().map(|e| e.epoch).max().unwrap_or(0)
    }
}

/// Organs a prompt needs in a label map: everything mentioned plus relation anchors.
fn required_organs(p: &ParsedPrompt) -> Vec<u8> {
    let mut ids = p.mentioned();
    ids.extend(p.relations.iter().map(|&(a, _)| a));
    ids
}

/// For every prompt, the training volumes containing all of its organs.
pub fn align_corpus(data: &[TrainingVolume], corpus: &[ParsedPrompt], classes: usize) -> Result<Vec<Vec<usize>>> {
    let present: Vec<Vec<u8>> = data.iter().map(|d| d.labels.present_classes()).collect();
    corpus
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.presence.len() != classes {
                return Err(Error::CorpusMisaligned(format!(
                    "prompt {i} has {} presence bits for {classes} classes",
                    p.presence.len()
                )));
            }
            let need = required_organs(p);
            let hits: Vec<usize> = (0..data.len())
                .filter(|&v| need.iter().all(|c| present[v].contains(c)))
                .collect();
            if hits.is_empty() {
                return Err(Error::CorpusMisaligned(format!(
                    "prompt {i} ({:?}) needs organs {need:?} that no training volume contains",
                    p.raw_text
                )));
            }
            Ok(hits)
        })
        .collect()
}

/// Algorithm-style fusion training: one patch and one aligned prompt per
/// iteration, losses on the fused logits, AdamW on the fusion parameters only,
/// cosine learning rate per epoch. Deterministic for a given seed.
pub fn train_fusion(
    data: &[TrainingVolume],
    source: &VisualSource,
    corpus: &[ParsedPrompt],
    classes: usize,
    cfg: &TrainRunConfig,
) -> Result<(FusionCheckpoint, TrainingLog)> {
    cfg.validate()?;
    if data.is_empty() || corpus.is_empty() {
        return Err(Error::EmptyInput);
    }
    for d in data {
        if d.volume.dims != d.labels.dims {
            return Err(Error::DimMismatch(format!("volume {} vs labels {}", d.volume.dims, d.labels.dims)));
        }
        d.labels.check_classes(classes)?;
    }
    let aligned = align_corpus(data, corpus, classes)?;
    let embeddings: Vec<TextEmbedding> = corpus
        .iter()
        .map(|p| embed_hashed(&p.raw_text))
        .collect::<Result<_>>()?;
    let foreground: Vec<Vec<usize>> = data.iter().map(|d| foreground_indices(&d.labels)).collect();

    let mut params = init_fusion(classes, cfg.seed)?;
    let mut opt = AdamWState::new(params.num_params());
    let mut log = TrainingLog::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let schedule = cfg.schedule();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, &schedule)?;
        for iteration in 0..cfg.iterations_per_epoch {
            let pi = rng.random_range(0..corpus.len());
            let vi = aligned[pi][rng.random_range(0..aligned[pi].len())];
            let prompt = &corpus[pi];
            let tv = &data[vi];

            let positive = !foreground[vi].is_empty() && rng.random_bool(cfg.pos_fraction);
            let origin = draw_origin(&tv.labels, &foreground[vi], cfg.patch, positive, &mut rng)?;
            let mut vol = tv.volume.patch(origin, cfg.patch);
            let mut labels = crop_labels(&tv.labels, origin, cfg.patch);
            let aug_seed: u64 = rng.random();
            if let Some(a) = &cfg.augment {
                (vol, labels) = augment(&vol, &labels, a, aug_seed)?;
            }
            let oracle_seed: u64 = rng.random();
            let vis = match source {
                VisualSource::Oracle(o) => {
                    let mut o = o.clone();
                    o.classes = classes;
                    o.seed = oracle_seed;
                    if cfg.suppress_prompted {
                        o.suppressed.extend(prompt.mentioned());
                    }
                    oracle_logits(&labels, &o)?
                }
                VisualSource::Classifier(c) => c.logits(&vol),
            };
            if vis.channels != classes {
                return Err(Error::ShapeMismatch(format!("visual source gives {} channels", vis.channels)));
            }

            let prior = if prompt.relations.is_empty() {
                None
            } else {
                Some(assemble_prior_tensor(&prompt.relations, &labels, classes, &cfg.prior)?)
            };
            let prior_input = prior.as_ref().filter(|p| p.is_active()).map(|p| PriorInput {
                tensor: &p.tensor,
                regions: &p.regions,
            });
            let relation_active = prior_input.is_some_and(|p| p.regions.iter().any(|r| r.size() > 0));
            let targets = FusionTargets {
                labels: &labels,
                presence: Some(&prompt.presence),
            };
            let (loss, grads) = fusion_backward(&embeddings[pi], &vis, prior_input, targets, &cfg.loss, &params)
                .map_err(|e| match e {
                    Error::NonFiniteLoss(m) => Error::NonFiniteLoss(format!(
                        "epoch {} iteration {} volume {vi} prompt {pi}: {m}",
                        epoch + 1,
                        iteration + 1
                    )),
                    other => other,
                })?;

            let mut flat = params.to_flat();
            adamw_step(&mut flat, &grads.to_flat(), &mut opt, lr, cfg.weight_decay)?;
            params.set_flat(&flat)?;
            log.entries.push(TrainLogEntry {
                epoch: epoch + 1,
                iteration: iteration + 1,
                volume: vi,
                prompt: pi,
                lr,
                loss,
                relation_active,
            });
        }
    }
    let ckpt = FusionCheckpoint {
        params,
        epoch: cfg.epochs,
        optimizer: opt,
        config_hash: cfg.config_hash(),
    };
    Ok((ckpt, log))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceConfig {
    pub restrict_to_prompt: bool,
    pub prior: RelationPriorConfig,
    /// Sliding-window patch for volume inputs.
    pub window: Dims,
    pub overlap: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            restrict_to_prompt: false,
            prior: RelationPriorConfig::default(),
            window: Dims::cube(32),
            overlap: 0.5,
        }
    }
}

/// What the visual branch sees.
#[derive(Clone, Copy, Debug)]
pub enum VisualInput<'a> {
    /// Precomputed frozen logits.
    Logits(&'a LogitTensor),
    /// Raw HU volume, normalised and classified window by window.
    Volume {
        volume: &'a Volume,
        classifier: &'a IntensityClassifier,
    },
}

/// Frozen visual logits, refined (eval mode) when a head is given.
pub fn visual_logits(input: VisualInput<'_>, refine: Option<&RefineParams>, cfg: &InferenceConfig) -> Result<LogitTensor> {
    let vis = match input {
        VisualInput::Logits(l) => l.clone(),
        VisualInput::Volume { volume, classifier } => {
            let norm = normalize_intensity(volume);
            sliding_window_apply(&norm, cfg.window, cfg.overlap, |p| Ok(classifier.logits(p)))?
        }
    };
    match refine {
        Some(r) => {
            if r.classes != vis.channels {
                return Err(Error::ShapeMismatch(format!(
                    "refinement head has {} classes, visual logits {}",
                    r.classes, vis.channels
                )));
            }
            Ok(refine_forward(&vis, r, Mode::Eval, 0)?.0)
        }
        None => Ok(vis),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceResult {
    pub mask: LabelMap,
    pub presence_used: Vec<u8>,
    pub relations_used: Vec<(u8, u8)>,
    /// `alpha * b_c` per class; zeros on the visual-only fallback.
    pub alpha_bias: Vec<f64>,
    pub fallback_visual_only: bool,
}

/// Prompt-conditioned segmentation.
///
/// A prompt that names no organ falls back to the visual argmax. Relation
/// anchors are read from the visual argmax. With `restrict_to_prompt`, foreground
/// classes the prompt does not mention become background after the argmax. The
/// argmax is taken on the fused logits, which orders voxels exactly as their
/// softmax does.
pub fn infer(
    input: VisualInput<'_>,
    prompt: &str,
    lex: &Lexicon,
    fusion: &FusionParams,
    refine: Option<&RefineParams>,
    cfg: &InferenceConfig,
) -> Result<InferenceResult> {
    let vis = visual_logits(input, refine, cfg)?;
    if vis.channels != fusion.classes {
        return Err(Error::ShapeMismatch(format!(
            "fusion head has {} classes, visual logits {}",
            fusion.classes, vis.channels
        )));
    }
    let parsed = parse_prompt(prompt, lex);
    let mut presence = parsed.presence.clone();
    presence.resize(fusion.classes, 0);
    if parsed.is_empty() {
        return Ok(InferenceResult {
            mask: argmax_channels(&vis),
            presence_used: presence,
            relations_used: Vec::new(),
            alpha_bias: vec![0.0; fusion.classes],
            fallback_visual_only: true,
        });
    }
    let bias = class_bias(fusion, &embed_hashed(prompt)?)?;
    let anchors = argmax_channels(&vis);
    let prior = if parsed.relations.is_empty() || fusion.beta == 0.0 {
        None
    } else {
        Some(assemble_prior_tensor(&parsed.relations, &anchors, fusion.classes, &cfg.prior)?)
    };
    let relations_used: Vec<(u8, u8)> = match &prior {
        Some(p) => parsed.relations.iter().copied().filter(|r| !p.skipped.contains(r)).collect(),
        None => Vec::new(),
    };
    let fused = fuse_logits(
        &vis,
        &bias,
        fusion.alpha,
        fusion.beta,
        prior.as_ref().filter(|p| p.is_active()).map(|p| &p.tensor),
    )?;
    let mut mask = argmax_channels(&fused);
    if cfg.restrict_to_prompt {
        for l in &mut mask.data {
            if *l != 0 && presence[*l as usize] == 0 {
                *l = 0;
            }
        }
    }
    Ok(InferenceResult {
        mask,
        presence_used: presence,
        relations_used,
        alpha_bias: bias.iter().map(|b| fusion.alpha * b).collect(),
        fallback_visual_only: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    /// Per volume, keyed by file name.
    pub volumes: Vec<(String, MetricsReport)>,
    pub aggregate: MetricsReport,
}

fn vol_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "vol") {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Pairs `*.vol` label maps by file name and evaluates each pair; the aggregate
/// is the mean over volumes of per-organ metrics.
pub fn evaluate_run(pred_dir: impl AsRef<Path>, gt_dir: impl AsRef<Path>, classes: usize) -> Result<RunReport> {
    let preds = vol_files(pred_dir.as_ref())?;
    let gts = vol_files(gt_dir.as_ref())?;
    if let Some(name) = preds.keys().find(|k| !gts.contains_key(*k)) {
        return Err(Error::MissingPair(format!("{name} has no ground truth")));
    }
    if let Some(name) = gts.keys().find(|k| !preds.contains_key(*k)) {
        return Err(Error::MissingPair(format!("{name} has no prediction")));
    }
    if gts.is_empty() {
        return Err(Error::EmptyInput);
    }
    let volumes: Vec<(String, MetricsReport)> = gts
        .iter()
        .map(|(name, gt_path)| {
            let gt = load_labels(gt_path)?;
            let pred = load_labels(&preds[name])?;
            Ok((name.clone(), evaluate_labelmaps(&pred, &gt, classes)?))
        })
        .collect::<Result<_>>()?;
    let reports: Vec<MetricsReport> = volumes.iter().map(|(_, r)| r.clone()).collect();
    Ok(RunReport {
        aggregate: aggregate_reports(&reports)?,
        volumes,
    })
}

/// Writes `<stem>.metrics` per volume plus `aggregate.metrics` and `aggregate.txt`.
pub fn write_run_report(report: &RunReport, out_dir: impl AsRef<Path>, name: impl Fn(u8) -> String) -> Result<()> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |file: String, text: String| {
        let path = dir.join(file);
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    };
    for (vol, r) in &report.volumes {
        let stem = vol.trim_end_matches(".vol");
        write(format!("{stem}.metrics"), r.to_kv().to_text())?;
    }
    write("aggregate.metrics".into(), report.aggregate.to_kv().to_text())?;
    write("aggregate.txt".into(), report.aggregate.to_table(name))
}

/// Saves each mask as `<name>.vol`.
pub fn save_masks<'a>(masks: impl IntoIterator<Item = (&'a str, &'a LabelMap)>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, m) in masks {
        save_labels(m, dir.join(format!("{name}.vol")))?;
    }
    Ok(())
}
