//! HTTP frame service: `GET /scene` and `POST /render` over a loaded field.

use std::sync::Arc;
use std::time::Instant;

use axum::extract::State;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use cubefield::geometry::erp_to_perspective;
use cubefield::io::{encode_depth_png, encode_png};
use cubefield::rendering::render_novel_panorama;
use cubefield::{CubicField, ErpGrid, Face, Image, Pose};
use serde::{Deserialize, Serialize};

pub const RENDER_MS_HEADER: &str = "x-render-ms";
pub const MAX_SIDE: usize = 4096;
pub const THUMBNAIL_WIDTH: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    #[default]
    Panorama,
    Perspective,
}

fn identity_rotation() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

/// Body of `POST /render`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    /// Unit quaternion `(w, x, y, z)`.
    #[serde(default = "identity_rotation")]
    pub rotation: [f64; 4],
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default)]
    pub output: OutputKind,
    /// Horizontal field of view, perspective output only.
    #[serde(default)]
    pub fov_deg: Option<f64>,
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default)]
    pub height: Option<usize>,
    /// Return a JSON body with base64 color and 16-bit millimetre depth PNGs.
    #[serde(default)]
    pub depth: bool,
}

impl Default for RenderRequest {
    fn default() -> Self {
        RenderRequest {
            rotation: identity_rotation(),
            translation: [0.0; 3],
            output: OutputKind::Panorama,
            fov_deg: None,
            width: None,
            height: None,
            depth: false,
        }
    }
}

/// Body returned when `depth` is requested.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameWithDepth {
    pub width: usize,
    pub height: usize,
    pub image_png: String,
    pub depth_png: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thumbnail {
    pub width: usize,
    pub height: usize,
    pub png_base64: String,
}

/// Body of `GET /scene`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub near: f64,
    pub far: f64,
    pub w: usize,
    pub d: usize,
    pub planes: Vec<f64>,
    pub faces: Vec<String>,
    pub thumbnail: Thumbnail,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// A validated request.
#[derive(Clone, Debug)]
pub struct FrameSpec {
    pub pose: Pose,
    pub output: OutputKind,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

pub fn validate(req: &RenderRequest, field: &CubicField) -> Result<FrameSpec, String> {
    let pose = Pose::from_quaternion(req.rotation, req.translation).map_err(|e| e.to_string())?;
    let near = field.planes.near;
    if !(pose.max_abs_translation() < near) {
        return Err(format!(
            "translation {:?} leaves the near cube (|t|∞ must be < {near})",
            req.translation
        ));
    }
    let (width, height, fov_deg) = match req.output {
        OutputKind::Panorama => {
            if req.fov_deg.is_some() {
                return Err("fov_deg applies to perspective output only".into());
            }
            let width = req.width.or(req.height.map(|h| 2 * h)).unwrap_or(4 * field.w());
            let height = req.height.unwrap_or(width / 2);
            if width != 2 * height || height == 0 {
                return Err(format!("panorama must be 2:1, got {width}x{height}"));
            }
            (width, height, 360.0)
        }
        OutputKind::Perspective => {
            let fov = req.fov_deg.unwrap_or(90.0);
            if !(fov > 10.0 && fov < 140.0) {
                return Err(format!("fov_deg must lie in (10, 140), got {fov}"));
            }
            let width = req.width.unwrap_or(512);
            let height = req.height.unwrap_or(width * 3 / 4);
            if width == 0 || height == 0 {
                return Err("frame size must be positive".into());
            }
            (width, height, fov)
        }
    };
    if width > MAX_SIDE || height > MAX_SIDE {
        return Err(format!("frame side must be at most {MAX_SIDE}"));
    }
    Ok(FrameSpec {
        pose,
        output: req.output,
        fov_deg,
        width,
        height,
    })
}

/// Renders a validated frame; perspective output is a pinhole re-projection
/// of a panorama rendered at matching angular resolution.
pub fn render_frame(field: &CubicField, spec: &FrameSpec) -> cubefield::Result<(Image, Image)> {
    match spec.output {
        OutputKind::Panorama => {
            let out = render_novel_panorama(field, &spec.pose, &ErpGrid::new(spec.width, spec.height)?)?;
            Ok((out.image, out.depth))
        }
        OutputKind::Perspective => {
            let pw = ((spec.width as f64 * 360.0 / spec.fov_deg).ceil() as usize).div_ceil(2) * 2;
            let pw = pw.clamp(16, 2 * MAX_SIDE);
            let pano = render_novel_panorama(field, &spec.pose, &ErpGrid::new(pw, pw / 2)?)?;
            Ok((
                erp_to_perspective(&pano.image, spec.fov_deg, spec.width, spec.height)?,
                erp_to_perspective(&pano.depth, spec.fov_deg, spec.width, spec.height)?,
            ))
        }
    }
}

struct Loaded {
    field: CubicField,
    scene: SceneInfo,
}

#[derive(Clone)]
pub struct AppState {
    loaded: Option<Arc<Loaded>>,
    pool: Arc<rayon::ThreadPool>,
}

impl AppState {
    pub fn new(field: Option<CubicField>, workers: usize) -> cubefield::Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .thread_name(|i| format!("render-{i}"))
            .build()
            .map_err(|e| cubefield::Error::InvalidArgument(format!("thread pool: {e}")))?;
        let loaded = match field {
            None => None,
            Some(field) => {
                let grid = ErpGrid::new(THUMBNAIL_WIDTH, THUMBNAIL_WIDTH / 2)?;
                let thumb = pool.install(|| render_novel_panorama(&field, &Pose::identity(), &grid))?;
                let scene = SceneInfo {
                    near: field.planes.near,
                    far: field.planes.far,
                    w: field.w(),
                    d: field.d(),
                    planes: field.planes.z.clone(),
                    faces: Face::ALL.iter().map(|f| f.name().to_string()).collect(),
                    thumbnail: Thumbnail {
                        width: grid.width,
                        height: grid.height,
                        png_base64: B64.encode(encode_png(&thumb.image)?),
                    },
                };
                Some(Arc::new(Loaded { field, scene }))
            }
        };
        Ok(AppState {
            loaded,
            pool: Arc::new(pool),
        })
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/scene", get(scene))
        .route("/render", post(render))
        .with_state(state)
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

fn no_field() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "no field is loaded")
}

async fn scene(State(state): State<AppState>) -> Response {
    match &state.loaded {
        None => no_field(),
        Some(l) => Json(l.scene.clone()).into_response(),
    }
}

async fn render(State(state): State<AppState>, Json(req): Json<RenderRequest>) -> Response {
    let Some(loaded) = state.loaded.clone() else {
        return no_field();
    };
    let spec = match validate(&req, &loaded.field) {
        Ok(s) => s,
        Err(reason) => return error(StatusCode::UNPROCESSABLE_ENTITY, reason),
    };
    let start = Instant::now();
    let pool = state.pool.clone();
    let want_depth = req.depth;
    let job = tokio::task::spawn_blocking(move || -> cubefield::Result<(Vec<u8>, &'static str)> {
        let (image, depth) = pool.install(|| render_frame(&loaded.field, &spec))?;
        let png = encode_png(&image)?;
        if !want_depth {
            return Ok((png, "image/png"));
        }
        let body = FrameWithDepth {
            width: image.width,
            height: image.height,
            image_png: B64.encode(png),
            depth_png: B64.encode(encode_depth_png(&depth)?),
        };
        Ok((serde_json::to_vec(&body).expect("frame serializes"), "application/json"))
    });
    match job.await {
        Ok(Ok((body, content_type))) => {
            let ms = start.elapsed().as_secs_f64() * 1e3;
            let mut resp = body.into_response();
            let headers = resp.headers_mut();
            headers.insert(header::CONTENT_TYPE, HeaderValue::from_static(content_type));
            headers.insert(
                RENDER_MS_HEADER,
                HeaderValue::from_str(&format!("{ms:.3}")).expect("ascii header"),
            );
            resp
        }
        Ok(Err(e)) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("render task failed: {e}")),
    }
}

/// Binds `host:port` and serves until the process is stopped.
pub async fn serve(state: AppState, host: &str, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
