//! HTTP API over a loaded model and a directory of cases.
//!
//! Model state never changes after [`ServiceState::load`]. The mask store is
//! append-only: the first request for a `(volume, prompt, restrict)` key takes
//! the next id, and repeats of that key return the stored id, so identical
//! requests get byte-identical responses.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use anyhow::{Context, Result};
use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use promptseg::fusion::{load_checkpoint, FusionCheckpoint};
use promptseg::grid::{extract_slice, Axis, LabelMap, LogitTensor, ScalarGrid, Volume};
use promptseg::io::{encode_labels, load_logits, load_volume};
use promptseg::palette::{mask_rgba, window_gray, PALETTE_HEX};
use promptseg::phantom::{IntensityClassifier, HU_MAX, HU_MIN};
use promptseg::pipeline::{infer, InferenceConfig, VisualInput};
use promptseg::prompt::{parse_prompt, Lexicon};
use promptseg::refine::{load_refine_checkpoint, RefineCheckpoint};
use serde::{Deserialize, Serialize};

use crate::app::load_lexicon;
use crate::dataset::{case_paths, list_cases, IMAGES};
use crate::summary::{ParseSummary, SegmentSummary};

pub struct VolumeEntry {
    pub image: Volume,
    pub classifier: Option<IntensityClassifier>,
    pub logits: Option<LogitTensor>,
}

impl VolumeEntry {
    /// Stored logits when present, otherwise the intensity classifier.
    fn visual(&self) -> Option<VisualInput<'_>> {
        match (&self.logits, &self.classifier) {
            (Some(l), _) => Some(VisualInput::Logits(l)),
            (None, Some(c)) => Some(VisualInput::Volume {
                volume: &self.image,
                classifier: c,
            }),
            (None, None) => None,
        }
    }
}

type MaskKey = (String, String, bool);

#[derive(Default)]
struct MaskStore {
    by_key: HashMap<MaskKey, usize>,
    masks: Vec<Arc<LabelMap>>,
}

pub struct ServiceState {
    pub fusion: FusionCheckpoint,
    pub refine: Option<RefineCheckpoint>,
    pub lexicon: Lexicon,
    pub volumes: BTreeMap<String, VolumeEntry>,
    masks: Mutex<MaskStore>,
}

impl ServiceState {
    pub fn new(
        fusion: FusionCheckpoint,
        refine: Option<RefineCheckpoint>,
        lexicon: Lexicon,
        volumes: BTreeMap<String, VolumeEntry>,
    ) -> Self {
        Self {
            fusion,
            refine,
            lexicon,
            volumes,
            masks: Mutex::new(MaskStore::default()),
        }
    }

    /// Registers every case under `<data>/images`; cases with neither stored
    /// logits nor a classifier are listed but cannot be segmented.
    pub fn load(data: &Path, fusion: &Path, refine: Option<&Path>, lexicon: Option<&Path>) -> Result<Self> {
        let fusion = load_checkpoint(fusion, None, None).with_context(|| format!("loading {}", fusion.display()))?;
        let refine = refine
            .map(|p| load_refine_checkpoint(p, Some(fusion.params.classes)))
            .transpose()?;
        let mut volumes = BTreeMap::new();
        for name in list_cases(data, IMAGES)? {
            let p = case_paths(data, &name);
            let classifier = if p.model.exists() {
                Some(IntensityClassifier::parse(&std::fs::read_to_string(&p.model)?)?)
            } else {
                None
            };
            let logits = if p.logits.exists() { Some(load_logits(&p.logits)?) } else { None };
            let image = load_volume(&p.image)?;
            volumes.insert(
                name,
                VolumeEntry {
                    image,
                    classifier,
                    logits,
                },
            );
        }
        Ok(Self::new(fusion, refine, load_lexicon(lexicon)?, volumes))
    }

    fn mask(&self, id: &str) -> Option<Arc<LabelMap>> {
        let n: usize = id.strip_prefix('m')?.parse().ok()?;
        let store = self.masks.lock().expect("mask store lock");
        store.masks.get(n.checked_sub(1)?).cloned()
    }

    /// Returns the id for `key`, inserting `mask` only if the key is new.
    fn store(&self, key: MaskKey, mask: LabelMap) -> String {
        let mut store = self.masks.lock().expect("mask store lock");
        let idx = match store.by_key.get(&key) {
            Some(&i) => i,
            None => {
                store.masks.push(Arc::new(mask));
                let i = store.masks.len() - 1;
                store.by_key.insert(key, i);
                i
            }
        };
        format!("m{}", idx + 1)
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/api/model", get(model))
        .route("/api/volumes", get(volumes))
        .route("/api/volumes/{id}/slice", get(volume_slice))
        .route("/api/parse", post(parse))
        .route("/api/segment", post(segment))
        .route("/api/masks/{id}/slice", get(mask_slice))
        .route("/api/masks/{id}/vol", get(mask_payload))
        .route("/api/masks/{id}/vol.hdr", get(mask_header))
        .with_state(state)
}

pub struct ApiError(StatusCode, String);

impl ApiError {
    fn not_found(what: impl Into<String>) -> Self {
        Self(StatusCode::NOT_FOUND, what.into())
    }
    fn bad_request(what: impl Into<String>) -> Self {
        Self(StatusCode::BAD_REQUEST, what.into())
    }
    fn internal(e: impl std::fmt::Display) -> Self {
        Self(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Serialize)]
struct ModelInfo {
    classes: Vec<String>,
    alpha: f64,
    beta: f64,
    checkpoint_hash: String,
    refine: bool,
    palette: Vec<&'static str>,
}

async fn model(State(s): State<Arc<ServiceState>>) -> Json<ModelInfo> {
    let p = &s.fusion.params;
    Json(ModelInfo {
        classes: (0..p.classes).map(|c| s.lexicon.name(c as u8).to_string()).collect(),
        alpha: p.alpha,
        beta: p.beta,
        checkpoint_hash: format!("{:08x}", s.fusion.params_hash()),
        refine: s.refine.is_some(),
        palette: PALETTE_HEX.to_vec(),
    })
}

#[derive(Serialize)]
struct VolumeInfo {
    id: String,
    dims: [usize; 3],
    spacing: [f64; 3],
    visual: Option<&'static str>,
}

async fn volumes(State(s): State<Arc<ServiceState>>) -> Json<Vec<VolumeInfo>> {
    Json(
        s.volumes
            .iter()
            .map(|(id, v)| VolumeInfo {
                id: id.clone(),
                dims: v.image.dims.as_array(),
                spacing: v.image.spacing.0,
                visual: match (&v.logits, &v.classifier) {
                    (Some(_), _) => Some("logits"),
                    (None, Some(_)) => Some("volume"),
                    _ => None,
                },
            })
            .collect(),
    )
}

#[derive(Deserialize)]
pub struct SliceQuery {
    axis: Option<String>,
    index: Option<String>,
}

/// Axis defaults to axial and index to the middle slice.
fn slice_of<G: ScalarGrid>(grid: &G, q: &SliceQuery) -> ApiResult<promptseg::grid::SliceImage> {
    let axis: Axis = match &q.axis {
        Some(a) => a.parse().map_err(|_| ApiError::bad_request(format!("unknown axis {a:?}")))?,
        None => Axis::Axial,
    };
    let extent = axis.extent(grid.grid_dims());
    let index = match &q.index {
        Some(i) => i
            .parse::<usize>()
            .map_err(|_| ApiError::bad_request(format!("bad slice index {i:?}")))?,
        None => extent / 2,
    };
    extract_slice(grid, axis, index).map_err(|_| ApiError::not_found(format!("slice {index} outside 0..{extent}")))
}

fn png_response(width: usize, height: usize, color: png::ColorType, pixels: &[u8]) -> ApiResult<Response> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(ApiError::internal)?;
        w.write_image_data(pixels).map_err(ApiError::internal)?;
    }
    Ok(([(header::CONTENT_TYPE, "image/png")], buf).into_response())
}

async fn volume_slice(
    State(s): State<Arc<ServiceState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Response> {
    let v = s.volumes.get(&id).ok_or_else(|| ApiError::not_found(format!("unknown volume {id:?}")))?;
    let slice = slice_of(&v.image, &q)?;
    png_response(slice.width, slice.height, png::ColorType::Grayscale, &window_gray(&slice, HU_MIN, HU_MAX))
}

fn json_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

#[derive(Deserialize)]
struct ParseRequest {
    prompt: String,
}

async fn parse(State(s): State<Arc<ServiceState>>, body: Bytes) -> ApiResult<Json<ParseSummary>> {
    let req: ParseRequest = json_body(&body)?;
    Ok(Json(ParseSummary::new(&parse_prompt(&req.prompt, &s.lexicon), &s.lexicon)))
}

#[derive(Deserialize)]
struct SegmentRequest {
    volume_id: String,
    prompt: String,
    #[serde(default)]
    restrict: bool,
}

async fn segment(State(s): State<Arc<ServiceState>>, body: Bytes) -> ApiResult<Json<SegmentSummary>> {
    let req: SegmentRequest = json_body(&body)?;
    if !s.volumes.contains_key(&req.volume_id) {
        return Err(ApiError::not_found(format!("unknown volume {:?}", req.volume_id)));
    }
    tokio::task::spawn_blocking(move || segment_blocking(&s, req))
        .await
        .map_err(ApiError::internal)?
        .map(Json)
}

fn segment_blocking(s: &ServiceState, req: SegmentRequest) -> ApiResult<SegmentSummary> {
    let entry = &s.volumes[&req.volume_id];
    let visual = entry
        .visual()
        .ok_or_else(|| ApiError(StatusCode::CONFLICT, format!("volume {:?} has no visual model", req.volume_id)))?;
    let cfg = InferenceConfig {
        restrict_to_prompt: req.restrict,
        ..Default::default()
    };
    let result = infer(
        visual,
        &req.prompt,
        &s.lexicon,
        &s.fusion.params,
        s.refine.as_ref().map(|r| &r.params),
        &cfg,
    )
    .map_err(ApiError::internal)?;
    if req.restrict && result.fallback_visual_only {
        return Err(ApiError(
            StatusCode::UNPROCESSABLE_ENTITY,
            "prompt names no organ; nothing to restrict to".into(),
        ));
    }
    let classes = s.fusion.params.classes;
    let mut summary = SegmentSummary::new(&result, classes, None);
    summary.mask_id = Some(s.store((req.volume_id, req.prompt, req.restrict), result.mask));
    Ok(summary)
}

fn find_mask(s: &ServiceState, id: &str) -> ApiResult<Arc<LabelMap>> {
    s.mask(id).ok_or_else(|| ApiError::not_found(format!("unknown mask {id:?}")))
}

async fn mask_slice(
    State(s): State<Arc<ServiceState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Response> {
    let mask = find_mask(&s, &id)?;
    let slice = slice_of(mask.as_ref(), &q)?;
    png_response(slice.width, slice.height, png::ColorType::Rgba, &mask_rgba(&slice))
}

async fn mask_payload(State(s): State<Arc<ServiceState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let (payload, _) = encode_labels(find_mask(&s, &id)?.as_ref());
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], Body::from(payload)).into_response())
}

async fn mask_header(State(s): State<Arc<ServiceState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let (_, hdr) = encode_labels(find_mask(&s, &id)?.as_ref());
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], hdr).into_response())
}
