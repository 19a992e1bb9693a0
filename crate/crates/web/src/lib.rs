//! Browser demo: one synthetic phantom, a prompt box and three operations.
//!
//! The visual model is the label oracle with the prompted organs hidden, so a
//! mask only reappears once `alpha` lifts them past the suppression margin.
//! The per-class bias here is the parsed presence vector itself, standing in
//! for a trained bias head so the page needs no checkpoint.

use std::cell::RefCell;
use std::rc::Rc;

use promptseg::fusion::fuse_logits;
use promptseg::grid::{argmax_channels, extract_slice, Axis, LabelMap, LogitTensor, Volume, DEFAULT_CLASSES};
use promptseg::metrics::dsc;
use promptseg::palette::{composite, window_gray};
use promptseg::phantom::{canonical_phantom_spec, generate_phantom, oracle_logits, LogitOracleConfig, HU_MAX, HU_MIN};
use promptseg::prior::{assemble_prior_tensor, RelationPriorConfig};
use promptseg::prompt::{parse_prompt, Lexicon, ParsedPrompt};
use wasm_bindgen::prelude::*;

pub type Result<T> = std::result::Result<T, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Visual logits and relation prior for one prompt.
struct Prepared {
    parsed: ParsedPrompt,
    visual: LogitTensor,
    prior: Option<LogitTensor>,
}

pub struct Scene {
    volume: Volume,
    labels: LabelMap,
    lex: Lexicon,
    oracle: LogitOracleConfig,
    prior_cfg: RelationPriorConfig,
    cache: RefCell<Option<(String, Rc<Prepared>)>>,
}

impl Scene {
    pub fn new(seed: u64) -> Result<Self> {
        let (volume, labels) = generate_phantom(&canonical_phantom_spec(0, seed)).map_err(err)?;
        Ok(Self {
            volume,
            labels,
            lex: Lexicon::default(),
            oracle: LogitOracleConfig {
                scale: 8.0,
                noise_sigma: 0.25,
                seed,
                ..Default::default()
            },
            prior_cfg: RelationPriorConfig::default(),
            cache: RefCell::new(None),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.volume.dims.as_array()
    }

    pub fn parse_json(&self, prompt: &str) -> String {
        let p = parse_prompt(prompt, &self.lex);
        let organs: Vec<_> = p
            .mentioned()
            .into_iter()
            .map(|id| serde_json::json!({ "id": id, "name": self.lex.name(id) }))
            .collect();
        let relations: Vec<_> = p
            .relations
            .iter()
            .map(|&(a, t)| serde_json::json!({ "anchor": self.lex.name(a), "target": self.lex.name(t) }))
            .collect();
        serde_json::json!({ "organs": organs, "relations": relations }).to_string()
    }

    /// Mentioned organs are hidden unless they anchor a relation, so the prior
    /// always has a visible region to measure from.
    fn prepare(&self, prompt: &str) -> Result<Rc<Prepared>> {
        if let Some((key, prep)) = self.cache.borrow().as_ref() {
            if key == prompt {
                return Ok(Rc::clone(prep));
            }
        }
        let parsed = parse_prompt(prompt, &self.lex);
        let anchors: Vec<u8> = parsed.relations.iter().map(|r| r.0).collect();
        let mut oracle = self.oracle.clone();
        oracle.suppressed = parsed.mentioned().into_iter().filter(|c| !anchors.contains(c)).collect();
        let visual = oracle_logits(&self.labels, &oracle).map_err(err)?;
        let prior = if parsed.relations.is_empty() {
            None
        } else {
            let asm = assemble_prior_tensor(&parsed.relations, &argmax_channels(&visual), DEFAULT_CLASSES, &self.prior_cfg)
                .map_err(err)?;
            asm.is_active().then_some(asm.tensor)
        };
        let prep = Rc::new(Prepared { parsed, visual, prior });
        *self.cache.borrow_mut() = Some((prompt.to_string(), Rc::clone(&prep)));
        Ok(prep)
    }

    /// Fused argmax with `b = presence`; the empty prompt gives the visual argmax.
    pub fn segment(&self, prompt: &str, alpha: f64, beta: f64) -> Result<(LabelMap, LabelMap)> {
        let prep = self.prepare(prompt)?;
        let bias: Vec<f64> = prep.parsed.presence.iter().map(|&p| p as f64).collect();
        let fused = fuse_logits(&prep.visual, &bias, alpha, beta, prep.prior.as_ref()).map_err(err)?;
        Ok((argmax_channels(&prep.visual), argmax_channels(&fused)))
    }

    fn gray(&self, axis: Axis, index: usize) -> Result<Vec<u8>> {
        let s = extract_slice(&self.volume, axis, index).map_err(err)?;
        Ok(window_gray(&s, HU_MIN, HU_MAX))
    }

    /// RGBA: the prior (max over target classes) as a heat ramp over the CT.
    pub fn prior_slice(&self, prompt: &str, axis: Axis, index: usize) -> Result<Vec<u8>> {
        let gray = self.gray(axis, index)?;
        let prep = self.prepare(prompt)?;
        let heat = match &prep.prior {
            Some(p) => {
                let mut field = Volume::filled(p.dims, p.spacing, 0.0);
                for c in 0..p.channels {
                    for (f, &v) in field.data.iter_mut().zip(p.channel(c)) {
                        *f = f.max(v);
                    }
                }
                extract_slice(&field, axis, index).map_err(err)?.pixels
            }
            None => vec![0.0; gray.len()],
        };
        Ok(gray.iter().zip(&heat).flat_map(|(&g, &v)| heat_pixel(g, v)).collect())
    }

    /// RGBA: fused classes blended over the CT at `opacity`.
    pub fn segment_slice(&self, prompt: &str, alpha: f64, beta: f64, axis: Axis, index: usize, opacity: f64) -> Result<Vec<u8>> {
        let gray = self.gray(axis, index)?;
        let (_, fused) = self.segment(prompt, alpha, beta)?;
        let mask = extract_slice(&fused, axis, index).map_err(err)?;
        Ok(composite(&gray, &mask, &[], opacity))
    }

    /// Visual and fused Dice for each mentioned organ.
    pub fn report_json(&self, prompt: &str, alpha: f64, beta: f64) -> Result<String> {
        let (visual, fused) = self.segment(prompt, alpha, beta)?;
        let parsed = parse_prompt(prompt, &self.lex);
        let mut rows = Vec::new();
        for id in parsed.mentioned() {
            let gt = self.labels.mask_of(id);
            if gt.is_empty() {
                continue;
            }
            let v = dsc(&visual.mask_of(id), &gt).map_err(err)?;
            let f = dsc(&fused.mask_of(id), &gt).map_err(err)?;
            rows.push(serde_json::json!({ "name": self.lex.name(id), "visual": v, "fused": f }));
        }
        Ok(serde_json::Value::Array(rows).to_string())
    }
}

/// Heat ramp black-red-yellow-white, mixed over grey by the value itself.
fn heat_pixel(gray: u8, v: f64) -> [u8; 4] {
    let v = v.clamp(0.0, 1.0);
    let ramp = [(3.0 * v).min(1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)];
    let w = 0.7 * v;
    let mix = |c: f64| (gray as f64 * (1.0 - w) + 255.0 * c * w).round() as u8;
    [mix(ramp[0]), mix(ramp[1]), mix(ramp[2]), 255]
}

fn axis_of(name: &str) -> Result<Axis> {
    name.parse().map_err(err)
}

/// Wrapper exported to JavaScript; every method mirrors one on [`Scene`].
#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<Demo, JsError> {
        Ok(Demo {
            scene: Scene::new(seed as u64).map_err(js)?,
        })
    }

    /// `[depth, height, width]`.
    pub fn dims(&self) -> Vec<u32> {
        self.scene.dims().iter().map(|&d| d as u32).collect()
    }

    pub fn parse(&self, prompt: &str) -> String {
        self.scene.parse_json(prompt)
    }

    pub fn prior_slice(&self, prompt: &str, axis: &str, index: u32) -> std::result::Result<Vec<u8>, JsError> {
        self.scene.prior_slice(prompt, axis_of(axis).map_err(js)?, index as usize).map_err(js)
    }

    pub fn segment_slice(
        &self,
        prompt: &str,
        alpha: f64,
        beta: f64,
        axis: &str,
        index: u32,
        opacity: f64,
    ) -> std::result::Result<Vec<u8>, JsError> {
        self.scene
            .segment_slice(prompt, alpha, beta, axis_of(axis).map_err(js)?, index as usize, opacity)
            .map_err(js)
    }

    pub fn report(&self, prompt: &str, alpha: f64, beta: f64) -> std::result::Result<String, JsError> {
        self.scene.report_json(prompt, alpha, beta).map_err(js)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_ramp_endpoints() {
        assert_eq!(heat_pixel(90, 0.0), [90, 90, 90, 255]);
        let hot = heat_pixel(0, 1.0);
        assert_eq!(hot, [179, 179, 179, 255]);
    }

    #[test]
    fn axis_names() {
        assert_eq!(axis_of("sagittal").unwrap(), Axis::Sagittal);
        assert!(axis_of("oblique").is_err());
    }
}
