//! Mapping between wire types and core types.

use axum::http::StatusCode;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;

use tilegan_api::{EditRequest, Energy, EnergyOverrides, Region, Source};
use tilegan_core::editor::{Action, EditCommand, LatentSource};
use tilegan_core::generator::Rect;
use tilegan_core::imageio::png_to_tensor;
use tilegan_core::synthesis::{EnergyBreakdown, EnergyParams, Threshold};
use tilegan_core::Error;

use crate::ApiError;

pub fn region(r: &Rect) -> Region {
    Region::new(r.x, r.y, r.w, r.h)
}

fn rect(r: &Region) -> Rect {
    Rect::new(r.x, r.y, r.w, r.h)
}

pub fn energy_of(e: &EnergyBreakdown) -> Energy {
    Energy { total: e.total, matching: e.matching, neighbour: e.neighbour }
}

pub fn params(o: &EnergyOverrides) -> EnergyParams {
    let d = EnergyParams::default();
    EnergyParams {
        lambda_visual: o.lambda_visual.unwrap_or(d.lambda_visual),
        lambda_latent: o.lambda_latent.unwrap_or(d.lambda_latent),
        lambda_cluster: o.lambda_cluster.unwrap_or(d.lambda_cluster),
        threshold: match (o.threshold_absolute, o.threshold_relative) {
            (Some(v), _) => Threshold::Absolute(v),
            (None, Some(f)) => Threshold::Relative(f),
            (None, None) => d.threshold,
        },
        max_refine_steps: o.max_refine_steps.or(d.max_refine_steps),
        top_k: o.top_k.unwrap_or(d.top_k),
    }
}

fn source(s: Source) -> LatentSource {
    match s {
        Source::Sample(id) => LatentSource::Sample(id),
        Source::Cell([x, y]) => LatentSource::Cell(x, y),
    }
}

pub fn decode_base64(what: &str, s: &str) -> Result<Vec<u8>, ApiError> {
    BASE64.decode(s).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("{what}: invalid base64: {e}")))
}

/// Decodes any embedded payloads; PNG decoding happens here, outside the
/// field lock.
pub fn action(req: EditRequest) -> Result<Action, ApiError> {
    let cmd = match req {
        EditRequest::Undo => return Ok(Action::Undo),
        EditRequest::Redo => return Ok(Action::Redo),
        EditRequest::Brush { rect: r, cluster, seed } => EditCommand::Brush { cells: rect(&r), cluster, seed },
        EditRequest::Clone { src, dst } => {
            EditCommand::Clone { source: rect(&src), dest: (dst[0], dst[1]), shuffle: false, seed: 0 }
        }
        EditRequest::ShuffleClone { src, dst, seed } => {
            EditCommand::Clone { source: rect(&src), dest: (dst[0], dst[1]), shuffle: true, seed }
        }
        EditRequest::Noise { rect: r, sigma, seed } => EditCommand::Noise { cells: rect(&r), sigma, seed },
        EditRequest::Interpolate { cell, a, b, t } => {
            EditCommand::Interpolate { cell: (cell[0], cell[1]), a: source(a), b: source(b), t }
        }
        EditRequest::Guidance { at, patch_png } => {
            let patch = png_to_tensor(&decode_base64("patch_png", &patch_png)?).map_err(ApiError::from)?;
            EditCommand::Guidance { at: (at[0], at[1]), patch }
        }
    };
    Ok(Action::Edit(cmd))
}

pub fn status_of(e: &Error) -> StatusCode {
    match e {
        Error::Shape(_) | Error::Argument(_) | Error::Format(_) | Error::Image(_) => StatusCode::BAD_REQUEST,
        Error::Compatibility(_) | Error::State(_) => StatusCode::CONFLICT,
        Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}
