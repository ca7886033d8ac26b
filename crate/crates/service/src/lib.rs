//! HTTP service over a generator, a clustered sample bank and any number of
//! live latent fields.
//!
//! Routes (JSON unless noted; see `API.md`):
//!
//! - `GET  /health`
//! - `GET  /clusters`
//! - `GET  /fields`, `POST /fields`
//! - `GET  /fields/{id}`, `DELETE /fields/{id}`
//! - `POST /fields/{id}/edits`
//! - `POST /fields/{id}/refine`
//! - `GET  /fields/{id}/tiles/{z}/{tx}/{ty}` (PNG)
//! - `GET  /fields/{id}/image` (PNG), `/field` (TGF1), `/log` (text)
//! - `GET  /fields/{id}/events` (newline-delimited JSON stream)

use std::convert::Infallible;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::de::DeserializeOwned;
use tokio::sync::broadcast::error::RecvError;

use tilegan_api::{
    ClusterInfo, CreateField, Dirty, EditRequest, EditResponse, ErrorBody, Event, RefineAction, RefineRequest,
};
use tilegan_core::editor::format_log;
use tilegan_core::imageio::{png_to_tensor, rgb_bytes_to_png, tensor_to_png};
use tilegan_core::synthesis::{field_from_bytes_for, field_to_bytes, initial_tiling, FieldState, GuidanceMap};
use tilegan_core::Error;

mod convert;
mod session;
pub mod tiles;

pub use session::{FieldHandle, Session, DEFAULT_MAX_IMAGE_PIXELS, DEFAULT_TILE_SIZE};

const MAX_BODY: usize = 64 << 20;

/// An error response: status plus a `{"error": ...}` body.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn not_found(id: u64) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no field {id}"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self::new(convert::status_of(&e), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

type AppState = Arc<Session>;

fn field(session: &Session, id: u64) -> ApiResult<Arc<FieldHandle>> {
    session.get(id).ok_or_else(|| ApiError::not_found(id))
}

pub fn router(session: Arc<Session>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/clusters", get(clusters))
        .route("/fields", get(list_fields).post(create_field))
        .route("/fields/{id}", get(get_field).delete(delete_field))
        .route("/fields/{id}/edits", post(edit_field))
        .route("/fields/{id}/refine", post(refine_field))
        .route("/fields/{id}/tiles/{z}/{tx}/{ty}", get(tile))
        .route("/fields/{id}/image", get(full_image))
        .route("/fields/{id}/field", get(field_file))
        .route("/fields/{id}/log", get(command_log))
        .route("/fields/{id}/events", get(events))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .with_state(session)
}

/// Serves `router(session)` on `listener` until the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, session: Arc<Session>) -> std::io::Result<()> {
    axum::serve(listener, router(session)).await
}

async fn clusters(State(s): State<AppState>) -> ApiResult<Json<Vec<ClusterInfo>>> {
    blocking(move || {
        let bank = &s.bank;
        let mut out = Vec::with_capacity(bank.cluster_count());
        for (k, center) in bank.centers().iter().enumerate() {
            out.push(ClusterInfo {
                cluster: k as u32,
                members: bank.members(k).len(),
                thumbnail_png: BASE64.encode(tensor_to_png(center)?),
            });
        }
        Ok(Json(out))
    })
    .await
}

async fn list_fields(State(s): State<AppState>) -> Json<Vec<u64>> {
    Json(s.ids())
}

async fn create_field(State(s): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: CreateField = parse(&body)?;
    blocking(move || {
        let guidance = png_to_tensor(&convert::decode_base64("guidance_png", &req.guidance_png)?)?;
        let guidance = GuidanceMap::for_bank(guidance, req.cells_x, req.cells_y, &s.bank)?;
        let params = convert::params(&req.params);
        let mut state = match &req.field_tgf1 {
            Some(b64) => {
                let field = field_from_bytes_for(&convert::decode_base64("field_tgf1", b64)?, &s.bank)?;
                FieldState::new(field, guidance, &s.bank, params)?
            }
            None => initial_tiling(&s.bank, guidance, params)?,
        };
        state.render(&s.gen)?;
        let handle = s.insert(state);
        Ok((StatusCode::CREATED, Json(handle.info(&s))).into_response())
    })
    .await
}

async fn get_field(State(s): State<AppState>, Path(id): Path<u64>) -> ApiResult<Response> {
    let h = field(&s, id)?;
    blocking(move || Ok(Json(h.info(&s)).into_response())).await
}

async fn delete_field(State(s): State<AppState>, Path(id): Path<u64>) -> ApiResult<StatusCode> {
    let h = s.remove(id).ok_or_else(|| ApiError::not_found(id))?;
    blocking(move || {
        h.stop_refine();
        Ok(StatusCode::NO_CONTENT)
    })
    .await
}

async fn edit_field(State(s): State<AppState>, Path(id): Path<u64>, body: Bytes) -> ApiResult<Json<EditResponse>> {
    let h = field(&s, id)?;
    let req: EditRequest = parse(&body)?;
    blocking(move || {
        let action = convert::action(req)?;
        let (dirty, revision, energy) = h.act(&s, action)?;
        Ok(Json(EditResponse {
            applied: dirty.is_some(),
            revision,
            dirty: dirty
                .map(|d| Dirty { cells: convert::region(&d.cells), pixels: convert::region(&d.pixels) })
                .unwrap_or_default(),
            energy,
        }))
    })
    .await
}

async fn refine_field(State(s): State<AppState>, Path(id): Path<u64>, body: Bytes) -> ApiResult<Response> {
    let h = field(&s, id)?;
    let req: RefineRequest = parse(&body)?;
    let status = match req.action {
        RefineAction::Start => h.start_refine(&s, req.seed.unwrap_or(id))?,
        RefineAction::Stop => blocking(move || Ok(h.stop_refine())).await?,
    };
    Ok(Json(status).into_response())
}

async fn tile(
    State(s): State<AppState>,
    Path((id, z, tx, ty)): Path<(u64, u32, usize, usize)>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let h = field(&s, id)?;
    blocking(move || {
        let size = s.tile_size;
        let (window, w, hgt, revision) = {
            let inner = h.lock();
            let state = inner.editor.state();
            let image = state.image().ok_or_else(|| Error::State("field has no rendered image".into()))?;
            if !tiles::tile_exists(image.width(), image.height(), size, z, tx, ty) {
                return Err(ApiError::new(StatusCode::NOT_FOUND, format!("no tile {z}/{tx}/{ty}")));
            }
            let etag = format!("\"{id}-{}\"", inner.revision);
            if headers.get(header::IF_NONE_MATCH).is_some_and(|v| v.as_bytes() == etag.as_bytes()) {
                return Ok((StatusCode::NOT_MODIFIED, [(header::ETAG, etag)]).into_response());
            }
            let (x, y, w, hgt) = tiles::native_window(image.width(), image.height(), size, z, tx, ty);
            (tiles::quantise_window(image, x, y, w, hgt), w, hgt, inner.revision)
        };
        let t = tiles::build_tile(&window, w, hgt, size, z);
        let png = rgb_bytes_to_png(t.size, t.size, t.rgb)?;
        Ok(png_response(png, Some(format!("\"{id}-{revision}\""))))
    })
    .await
}

fn png_response(png: Vec<u8>, etag: Option<String>) -> Response {
    let mut r = (StatusCode::OK, [(header::CONTENT_TYPE, "image/png")], png).into_response();
    if let Some(tag) = etag {
        r.headers_mut().insert(header::ETAG, HeaderValue::from_str(&tag).expect("ascii etag"));
    }
    r
}

async fn full_image(State(s): State<AppState>, Path(id): Path<u64>) -> ApiResult<Response> {
    let h = field(&s, id)?;
    blocking(move || {
        let image = {
            let inner = h.lock();
            let image =
                inner.editor.state().image().ok_or_else(|| Error::State("field has no rendered image".into()))?;
            if image.width() * image.height() > s.max_image_pixels {
                return Err(ApiError::new(
                    StatusCode::PAYLOAD_TOO_LARGE,
                    format!(
                        "{}x{} image exceeds {} pixels; fetch tiles instead",
                        image.width(),
                        image.height(),
                        s.max_image_pixels
                    ),
                ));
            }
            image.clone()
        };
        Ok(png_response(tensor_to_png(&image)?, None))
    })
    .await
}

async fn field_file(State(s): State<AppState>, Path(id): Path<u64>) -> ApiResult<Response> {
    let h = field(&s, id)?;
    blocking(move || {
        let bytes = field_to_bytes(h.lock().editor.state().field(), &s.bank.fingerprint());
        Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
    })
    .await
}

async fn command_log(State(s): State<AppState>, Path(id): Path<u64>) -> ApiResult<Response> {
    let h = field(&s, id)?;
    let text = format_log(h.lock().editor.log());
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], text).into_response())
}

async fn events(State(s): State<AppState>, Path(id): Path<u64>) -> ApiResult<Response> {
    let h = field(&s, id)?;
    let rx = h.subscribe();
    // Current refinement status first, so a client knows where it stands.
    let first = {
        let inner = h.lock();
        Event::Refine { field: id, revision: inner.revision, status: inner.refine }
    };
    let head = futures::stream::once(async move { Ok::<_, Infallible>(line(&first)) });
    let tail = futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(ev) => return Some((Ok::<_, Infallible>(line(&ev)), rx)),
                Err(RecvError::Lagged(_)) => continue,
                Err(RecvError::Closed) => return None,
            }
        }
    });
    let body = Body::from_stream(futures::StreamExt::chain(head, tail));
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

fn line(ev: &Event) -> String {
    let mut s = serde_json::to_string(ev).expect("events serialise");
    s.push('\n');
    s
}
