//! HTTP/JSON service: garment catalog, try-on and style-edit sessions over
//! a trained run. Models are loaded once and shared read-only; each edit
//! session owns its style code behind its own lock.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use vton_core::dataset::{pair_dir, read_pair, DatasetPair, SyntheticMeta};
use vton_core::error::VtonError;
use vton_core::harness::{list_pairs, sha256_hex, Pipeline};
use vton_core::image::{BinaryMask, ImageTensor};
use vton_core::png_io;
use vton_core::pose::{default_sigma, make_gaussian_heatmap};
use vton_core::segmentation::{SegmentationMap, Vocabulary};
use vton_core::style_editor::{
    minimal_edit_anchored, ColorPreferenceClassifier, EditRequest, FashionScorer, StyleCode,
};
use vton_tensor::{Tape, Var};

/// Upper bound on `steps` per edit request.
pub const MAX_EDIT_STEPS: usize = 500;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_argument", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl From<VtonError> for ApiError {
    fn from(e: VtonError) -> Self {
        match e {
            VtonError::InvalidArgument(m) => Self::invalid(m),
            VtonError::FailedPrecondition(m) => Self::new(StatusCode::PRECONDITION_FAILED, "failed_precondition", m),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::invalid(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Persons and garments available by id.
#[derive(Default)]
pub struct Catalog {
    pub persons: BTreeMap<String, DatasetPair>,
    pub garments: BTreeMap<String, Garment>,
}

pub struct Garment {
    pub image: ImageTensor,
    pub mask: BinaryMask,
    pub meta: Option<SyntheticMeta>,
}

impl Catalog {
    /// Every pair under `<root>/pairs` contributes person fixture `<id>` and
    /// garment `g<id>`. Unreadable pairs are skipped with a warning.
    pub fn from_dataset(root: &Path) -> vton_core::error::Result<Self> {
        let mut c = Self::default();
        for id in list_pairs(root)? {
            match read_pair(&pair_dir(root, &id)) {
                Ok((pair, meta)) => {
                    c.garments.insert(
                        format!("g{id}"),
                        Garment {
                            image: pair.garment.clone(),
                            mask: pair.garment_mask.clone(),
                            meta,
                        },
                    );
                    c.persons.insert(id, pair);
                }
                Err(e) => log::warn!("catalog: skipping pair {id}: {e}"),
            }
        }
        Ok(c)
    }
}

struct TryonRecord {
    image: ImageTensor,
    parsing: SegmentationMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerSpec {
    /// The run's learned fashionability classifier.
    Learned,
    /// Prefers a target mean colour on the torso garment.
    ColorPreference { target: [f32; 3] },
}

struct Session {
    original: StyleCode,
    code: StyleCode,
    editable_regions: Vec<String>,
    edit_shape: bool,
    scorer: ScorerSpec,
    original_png: Vec<u8>,
}

pub struct AppState {
    pipeline: Pipeline,
    catalog: Catalog,
    manifest_hash: String,
    tryons: Mutex<HashMap<String, Arc<TryonRecord>>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_session: AtomicU64,
}

impl AppState {
    pub fn new(pipeline: Pipeline, catalog: Catalog) -> Self {
        Self {
            manifest_hash: pipeline.manifest.manifest_hash.clone(),
            pipeline,
            catalog,
            tryons: Mutex::default(),
            sessions: Mutex::default(),
            next_session: AtomicU64::new(1),
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session '{id}'")))
    }

    fn scorer(&self, spec: &ScorerSpec) -> Box<dyn FashionScorer + '_> {
        match spec {
            ScorerSpec::Learned => Box::new(LearnedRef(&self.pipeline)),
            ScorerSpec::ColorPreference { target } => Box::new(ColorPreferenceClassifier::new(*target)),
        }
    }
}

struct LearnedRef<'a>(&'a Pipeline);

impl FashionScorer for LearnedRef<'_> {
    fn id(&self) -> String {
        self.0.style.fashion.id()
    }

    fn score_var<'t>(&self, tape: &'t Tape, image: Var<'t>, regions: Var<'t>) -> Option<Var<'t>> {
        self.0.style.fashion.score_var(tape, image, regions)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/garments", get(garments))
        .route("/tryon", post(tryon))
        .route("/edit/start", post(edit_start))
        .route("/edit/step", post(edit_step))
        .route("/edit/reset", post(edit_reset))
        .with_state(state)
}

/// Run CPU-heavy work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn png_b64(image: &ImageTensor) -> Result<String, ApiError> {
    Ok(B64.encode(png_io::encode_image(image)?))
}

fn decode_b64(field: &str, text: &str) -> Result<Vec<u8>, ApiError> {
    B64.decode(text).map_err(|e| ApiError::invalid(format!("{field}: not valid base64: {e}")))
}

async fn healthz(State(s): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({"stages_loaded": 3, "manifest_hash": s.manifest_hash}))
}

async fn garments(State(s): State<Arc<AppState>>) -> Json<Value> {
    let garments: Vec<Value> = s
        .catalog
        .garments
        .iter()
        .map(|(id, g)| {
            let mut v = json!({"id": id});
            if let Some(m) = &g.meta {
                v["pattern"] = json!(m.texture.kind);
                v["fashionable"] = json!(m.fashionable);
            }
            v
        })
        .collect();
    let fixtures: Vec<&String> = s.catalog.persons.keys().collect();
    Json(json!({"garments": garments, "fixtures": fixtures, "manifest_hash": s.manifest_hash}))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TryonRequest {
    pub garment_id: String,
    pub fixture_id: Option<String>,
    pub person_png_b64: Option<String>,
    /// Required with `person_png_b64`: indexed parsing PNG of the person.
    pub parsing_png_b64: Option<String>,
    /// Required with `person_png_b64`: `[x, y]` per keypoint, null if absent.
    pub keypoints: Option<Vec<Option<[f64; 2]>>>,
}

async fn tryon(State(s): State<Arc<AppState>>, req: Result<Json<TryonRequest>, JsonRejection>) -> ApiResult<Value> {
    let Json(req) = req?;
    let st = s.clone();
    let (id, record) = blocking(move || {
        let s = st;
        let garment = s
            .catalog
            .garments
            .get(&req.garment_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown garment '{}'", req.garment_id)))?;
        let out = match (&req.fixture_id, &req.person_png_b64) {
            (Some(fid), None) => {
                let p = s
                    .catalog
                    .persons
                    .get(fid)
                    .ok_or_else(|| ApiError::not_found(format!("unknown fixture '{fid}'")))?;
                s.pipeline.tryon(&p.person, &p.parsing_gt, &p.pose, &garment.image, &garment.mask)?
            }
            (None, Some(b64)) => {
                let person = png_io::decode_rgb(&decode_b64("person_png_b64", b64)?)?;
                let parsing_b64 = req.parsing_png_b64.as_deref().ok_or_else(|| {
                    ApiError::invalid("person_png_b64 needs parsing_png_b64 and keypoints (no parser or pose estimator is bundled)")
                })?;
                let parsing = png_io::decode_parsing(&decode_b64("parsing_png_b64", parsing_b64)?, Vocabulary::standard())?;
                let kps = req
                    .keypoints
                    .as_ref()
                    .ok_or_else(|| ApiError::invalid("person_png_b64 needs keypoints"))?;
                let kps: Vec<Option<(f64, f64)>> = kps.iter().map(|k| k.map(|[x, y]| (x, y))).collect();
                let (h, w) = (person.height(), person.width());
                let pose = make_gaussian_heatmap(&kps, h, w, default_sigma(h))?;
                s.pipeline.tryon(&person, &parsing, &pose, &garment.image, &garment.mask)?
            }
            _ => return Err(ApiError::invalid("give exactly one of fixture_id and person_png_b64")),
        };
        let bytes = png_io::encode_image(&out.stage2.tryon)?;
        let id = format!("t{}", &sha256_hex(&bytes)[..16]);
        let record = TryonRecord {
            image: out.stage2.tryon,
            parsing: out.parsing,
        };
        Ok((id, record))
    })
    .await?;
    let parsing_png = B64.encode(png_io::encode_parsing(&record.parsing)?);
    let image = png_b64(&record.image)?;
    s.tryons.lock().unwrap().insert(id.clone(), Arc::new(record));
    Ok(Json(json!({
        "tryon_id": id,
        "image_png_b64": image,
        "parsing_png_b64": parsing_png,
        "manifest": s.pipeline.manifest,
        "manifest_hash": s.manifest_hash,
    })))
}

fn default_regions() -> Vec<String> {
    vec!["torso-garment".to_string()]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditStartRequest {
    pub tryon_id: String,
    #[serde(default = "default_regions")]
    pub editable_regions: Vec<String>,
    #[serde(default)]
    pub edit_shape: bool,
    #[serde(default)]
    pub scorer: Option<ScorerSpec>,
}

/// Per-region norms: `t_v` is the shape latent, `s_v` the texture feature.
fn code_summary(code: &StyleCode) -> Value {
    let norm = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let regions: Vec<Value> = Vocabulary::standard()
        .names()
        .iter()
        .zip(code.shape.iter().zip(&code.texture))
        .map(|(name, (t, s))| json!({"region": name, "t_v_norm": norm(t), "s_v_norm": norm(s)}))
        .collect();
    json!({"shape_dim": code.shape[0].len(), "texture_dim": code.texture[0].len(), "regions": regions})
}

async fn edit_start(State(s): State<Arc<AppState>>, req: Result<Json<EditStartRequest>, JsonRejection>) -> ApiResult<Value> {
    let Json(req) = req?;
    let vocab = Vocabulary::standard();
    for r in &req.editable_regions {
        vocab.require(r)?;
    }
    let record = s
        .tryons
        .lock()
        .unwrap()
        .get(&req.tryon_id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown try-on '{}'", req.tryon_id)))?;
    let scorer = req.scorer.unwrap_or(ScorerSpec::Learned);
    let (st, spec) = (s.clone(), scorer.clone());
    let (code, png, score) = blocking(move || {
        let style = &st.pipeline.style;
        let code = style.encode(&record.image, &record.parsing)?;
        let (layout, image) = style.render(&code)?;
        let score = st.scorer(&spec).score(&image, &layout)?;
        Ok((code, png_io::encode_image(&image)?, score))
    })
    .await?;
    let id = format!("s{}", s.next_session.fetch_add(1, Ordering::Relaxed));
    let summary = code_summary(&code);
    let image = B64.encode(&png);
    let session = Session {
        original: code.clone(),
        code,
        editable_regions: req.editable_regions.clone(),
        edit_shape: req.edit_shape,
        scorer,
        original_png: png,
    };
    s.sessions.lock().unwrap().insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok(Json(json!({
        "session_id": id,
        "editable_regions": req.editable_regions,
        "code": summary,
        "score": score,
        "image_png_base64": image,
        "manifest_hash": s.manifest_hash,
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditStepRequest {
    pub session_id: String,
    /// Replaces the session's editable regions when given.
    pub editable_regions: Option<Vec<String>>,
    pub steps: usize,
    pub step_size: f32,
    pub budget: f32,
}

async fn edit_step(State(s): State<Arc<AppState>>, req: Result<Json<EditStepRequest>, JsonRejection>) -> ApiResult<Value> {
    let Json(req) = req?;
    if req.steps == 0 || req.steps > MAX_EDIT_STEPS {
        return Err(ApiError::invalid(format!("steps must be in 1..={MAX_EDIT_STEPS}")));
    }
    let session = s.session(&req.session_id)?;
    let st = s.clone();
    let body = blocking(move || {
        // Held for the whole edit: steps on one session are serialized.
        let mut sess = session.lock().unwrap();
        if let Some(r) = &req.editable_regions {
            sess.editable_regions = r.clone();
        }
        let edit = EditRequest {
            editable_regions: sess.editable_regions.clone(),
            edit_shape: sess.edit_shape,
            steps: req.steps,
            step_size: req.step_size,
            budget: req.budget,
        };
        let scorer = st.scorer(&sess.scorer);
        let out = minimal_edit_anchored(&sess.code, &sess.original, scorer.as_ref(), &st.pipeline.style, &edit)?;
        sess.code = out.code;
        Ok(json!({
            "session_id": req.session_id,
            "editable_regions": edit.editable_regions,
            "budget": edit.budget,
            "step_size": edit.step_size,
            "steps": edit.steps,
            "score_trace": out.score_trace,
            "image_png_base64": png_b64(&out.styled)?,
            "code_delta_norm": out.code_delta_norm,
            "manifest_hash": st.manifest_hash,
        }))
    })
    .await?;
    Ok(Json(body))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditResetRequest {
    pub session_id: String,
}

async fn edit_reset(State(s): State<Arc<AppState>>, req: Result<Json<EditResetRequest>, JsonRejection>) -> ApiResult<Value> {
    let Json(req) = req?;
    let session = s.session(&req.session_id)?;
    let png = blocking(move || {
        let mut sess = session.lock().unwrap();
        sess.code = sess.original.clone();
        Ok(B64.encode(&sess.original_png))
    })
    .await?;
    Ok(Json(json!({
        "session_id": req.session_id,
        "image_png_base64": png,
        "code_delta_norm": 0.0,
        "manifest_hash": s.manifest_hash,
    })))
}
