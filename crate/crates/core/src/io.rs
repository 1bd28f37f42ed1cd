//! File formats: field directories, blending checkpoints, images, depth
//! maps, scene manifests, trajectories and loss traces.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{UnitQuaternion, Vector3};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::blending::{AttentionWeights, BlendWeights, ErpPoolWeights, FuseWeights};
use crate::error::{Error, Result};
use crate::field::{CubicField, DepthPlaneSet, Mpi};
use crate::geometry::Face;
use crate::image::Image;
use crate::losses::LossParts;
use crate::optimizer::{PosedView, TraceRow};
use crate::rendering::Pose;

pub const FIELD_MANIFEST: &str = "field.json";
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
const FIELD_FORMAT: &str = "cubefield-field";
const CHECKPOINT_FORMAT: &str = "cubefield-blend";

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn f32_le_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn f32_le_values(path: &Path, bytes: &[u8], expect: usize) -> Result<Vec<f64>> {
    if bytes.len() != expect * 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", expect * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

// ---------------------------------------------------------------- field

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct FieldManifest {
    pub format: String,
    pub version: u32,
    pub w: usize,
    pub d: usize,
    pub near: f64,
    pub far: f64,
    pub faces: Vec<String>,
    pub layout: String,
    pub dtype: String,
}

pub fn face_file_name(face: Face) -> String {
    format!("face_{}.bin", face.name())
}

/// Writes `field.json` and one `[d][w][w][4]` little-endian f32 file per face.
pub fn save_field(dir: &Path, field: &CubicField) -> Result<()> {
    create_dir(dir)?;
    let manifest = FieldManifest {
        format: FIELD_FORMAT.into(),
        version: 1,
        w: field.w(),
        d: field.d(),
        near: field.planes.near,
        far: field.planes.far,
        faces: Face::ALL.iter().map(|f| f.name().to_string()).collect(),
        layout: "d,y,x,rgbs".into(),
        dtype: "f32le".into(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&dir.join(FIELD_MANIFEST), json.as_bytes())?;
    for f in Face::ALL {
        write(&dir.join(face_file_name(f)), &f32_le_bytes(&field.mpi(f).data))?;
    }
    Ok(())
}

pub fn load_field_manifest(dir: &Path) -> Result<FieldManifest> {
    let path = dir.join(FIELD_MANIFEST);
    let text = read_text(&path)?;
    let bad = |reason: String| Error::Manifest {
        path: path.clone(),
        reason,
    };
    let m: FieldManifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if m.format != FIELD_FORMAT || m.version != 1 {
        return Err(bad(format!("unsupported format {} v{}", m.format, m.version)));
    }
    let names: Vec<&str> = Face::ALL.iter().map(|f| f.name()).collect();
    if m.faces != names {
        return Err(bad(format!("face order must be {names:?}")));
    }
    if m.w == 0 {
        return Err(bad("face size must be positive".into()));
    }
    Ok(m)
}

pub fn load_field(dir: &Path) -> Result<CubicField> {
    let m = load_field_manifest(dir)?;
    let planes = DepthPlaneSet::new(m.near, m.far, m.d).map_err(|e| Error::Manifest {
        path: dir.join(FIELD_MANIFEST),
        reason: e.to_string(),
    })?;
    let mut mpis = Vec::with_capacity(6);
    for f in Face::ALL {
        let path = dir.join(face_file_name(f));
        let data = f32_le_values(&path, &read(&path)?, m.d * m.w * m.w * 4)?;
        mpis.push(Mpi { d: m.d, w: m.w, data });
    }
    let mpis: [Mpi; 6] = mpis.try_into().expect("six faces");
    CubicField::new(mpis, planes)
}

// ----------------------------------------------------------- checkpoint

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

fn attention_shapes(a: &AttentionWeights) -> [Vec<usize>; 7] {
    let (m, f) = (a.wq.nrows(), a.w1.ncols());
    [vec![m, m], vec![m, m], vec![m, m], vec![m, f], vec![f], vec![f, m], vec![m]]
}

fn checkpoint_tensors(w: &BlendWeights) -> Vec<(String, Vec<usize>, &[f64])> {
    let mut out = Vec::new();
    for (stage, a) in [("self_attn", &w.self_attn), ("cross_attn", &w.cross_attn)] {
        for ((name, t), shape) in a.tensors().into_iter().zip(attention_shapes(a)) {
            out.push((format!("{stage}.{name}"), shape, t));
        }
    }
    let c = w.erp_pool.channels;
    for (i, filt) in w.erp_pool.filters.iter().enumerate() {
        out.push((format!("erp_pool.filter{i}"), vec![c, c, 3, 3], filt.as_slice()));
    }
    out.push((
        "erp_pool.proj".into(),
        w.erp_pool.proj.shape().to_vec(),
        w.erp_pool.proj.as_slice().expect("standard layout"),
    ));
    out.push(("fuse.kernel".into(), vec![4, 15, 3, 3], w.fuse.kernel.as_slice()));
    out.push(("fuse.bias".into(), vec![4], w.fuse.bias.as_slice()));
    out
}

/// Writes `checkpoint.json` and one raw little-endian f32 tensor per stage
/// parameter, named `<stage>.<tensor>.bin`.
pub fn save_checkpoint(dir: &Path, w: &BlendWeights) -> Result<()> {
    create_dir(dir)?;
    let mut tensors = Vec::new();
    for (name, shape, data) in checkpoint_tensors(w) {
        let file = format!("{name}.bin");
        write(&dir.join(&file), &f32_le_bytes(data))?;
        tensors.push(TensorEntry { name, shape, file });
    }
    let m = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        dtype: "f32le".into(),
        tensors,
    };
    let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
    write(&dir.join(CHECKPOINT_MANIFEST), json.as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<BlendWeights> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let bad = |reason: String| Error::Manifest {
        path: path.clone(),
        reason,
    };
    let m: CheckpointManifest = serde_json::from_str(&read_text(&path)?).map_err(|e| bad(e.to_string()))?;
    if m.format != CHECKPOINT_FORMAT || m.version != 1 {
        return Err(bad(format!("unsupported format {} v{}", m.format, m.version)));
    }
    let find = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
        let e = m
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        let file = dir.join(&e.file);
        let n = e.shape.iter().product();
        Ok((e.shape.clone(), f32_le_values(&file, &read(&file)?, n)?))
    };
    let matrix = |name: String| -> Result<Array2<f64>> {
        let (shape, data) = find(&name)?;
        if shape.len() != 2 {
            return Err(bad(format!("{name} must be 2-d")));
        }
        Ok(Array2::from_shape_vec((shape[0], shape[1]), data).expect("length checked"))
    };
    let vector = |name: String| -> Result<Array1<f64>> { Ok(Array1::from(find(&name)?.1)) };
    let attention = |stage: &str| -> Result<AttentionWeights> {
        Ok(AttentionWeights {
            wq: matrix(format!("{stage}.wq"))?,
            wk: matrix(format!("{stage}.wk"))?,
            wv: matrix(format!("{stage}.wv"))?,
            w1: matrix(format!("{stage}.w1"))?,
            b1: vector(format!("{stage}.b1"))?,
            w2: matrix(format!("{stage}.w2"))?,
            b2: vector(format!("{stage}.b2"))?,
        })
    };
    let proj = matrix("erp_pool.proj".into())?;
    let channels = proj.nrows();
    let filters = (0..crate::blending::ERP_STAGES)
        .map(|i| find(&format!("erp_pool.filter{i}")).map(|t| t.1))
        .collect::<Result<Vec<_>>>()?;
    let (_, kernel) = find("fuse.kernel")?;
    let (_, bias) = find("fuse.bias")?;
    if kernel.len() != FuseWeights::KERNEL_LEN || bias.len() != 4 {
        return Err(bad("fuse tensors have the wrong size".into()));
    }
    let w = BlendWeights {
        self_attn: attention("self_attn")?,
        cross_attn: attention("cross_attn")?,
        erp_pool: ErpPoolWeights {
            channels,
            filters,
            proj,
        },
        fuse: FuseWeights {
            kernel,
            bias: bias.try_into().expect("length checked"),
        },
    };
    // Shape consistency between the stored tensors.
    for (name, shape, data) in checkpoint_tensors(&w) {
        if data.len() != shape.iter().product::<usize>() {
            return Err(bad(format!("tensor {name} has inconsistent shape")));
        }
    }
    Ok(w)
}

// --------------------------------------------------------------- images

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

/// Decodes a PNG to RGB in `[0, 1]`; 16-bit files keep their precision.
pub fn load_image(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let data: Vec<f64> = match dynimg.color().bytes_per_pixel() / dynimg.color().channel_count() {
        1 => dynimg.into_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        _ => dynimg.into_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
    };
    Ok(Image {
        width: w,
        height: h,
        channels: 3,
        data,
    })
}

/// [`load_image`] that also requires a 2:1 aspect.
pub fn load_panorama(path: &Path) -> Result<Image> {
    let img = load_image(path)?;
    if img.width != 2 * img.height || img.height == 0 {
        return Err(Error::Aspect {
            path: path.to_path_buf(),
            width: img.width,
            height: img.height,
        });
    }
    Ok(img)
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

/// Writes a 1- or 3-channel image as an 8-bit PNG, clamping to `[0, 1]`.
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v, 255.0) as u8).collect();
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::Shape(format!("cannot write a {c}-channel PNG"))),
    };
    image::save_buffer(path, &bytes, img.width as u32, img.height as u32, color).map_err(|e| image_err(path, e))
}

/// Encodes an image as 8-bit PNG bytes.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v, 255.0) as u8).collect();
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::Shape(format!("cannot encode a {c}-channel PNG"))),
    };
    let mut out = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut out),
        &bytes,
        img.width as u32,
        img.height as u32,
        color,
    )
    .map_err(|e| Error::InvalidArgument(format!("png encoding: {e}")))?;
    Ok(out)
}

// ---------------------------------------------------------------- depth

fn check_depth(img: &Image) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::Shape(format!("depth maps have one channel, got {}", img.channels)));
    }
    Ok(())
}

/// PFM bytes: `Pf` header, scale −1 (little-endian), rows bottom to top.
pub fn encode_pfm(depth: &Image) -> Result<Vec<u8>> {
    check_depth(depth)?;
    let mut out = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    for y in (0..depth.height).rev() {
        let row = &depth.data[y * depth.width..(y + 1) * depth.width];
        out.extend(f32_le_bytes(row));
    }
    Ok(out)
}

pub fn decode_pfm(path: &Path, bytes: &[u8]) -> Result<Image> {
    let bad = |reason: &str| Error::format(path, reason);
    // Four whitespace-separated header tokens; one whitespace byte ends the
    // header.
    let mut tokens = Vec::with_capacity(4);
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos || pos == bytes.len() {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if tokens[0] != "Pf" {
        return Err(bad("only single-channel 'Pf' files are supported"));
    }
    let width: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("bad scale"));
    }
    let body = &bytes[pos + 1..];
    if body.len() != width * height * 4 {
        return Err(bad("pixel data has the wrong length"));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; width * height];
    for (i, b) in body.chunks_exact(4).enumerate() {
        let raw = [b[0], b[1], b[2], b[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (x, y) = (i % width, height - 1 - i / width);
        data[y * width + x] = v as f64;
    }
    Ok(Image {
        width,
        height,
        channels: 1,
        data,
    })
}

/// Millimetres per unit of a 16-bit depth PNG.
pub const DEPTH_PNG_SCALE: f64 = 1000.0;

pub fn encode_depth_png(depth: &Image) -> Result<Vec<u8>> {
    check_depth(depth)?;
    let mut out = Vec::new();
    let raw: Vec<u8> = depth
        .data
        .iter()
        .flat_map(|&v| {
            let mm = if v.is_finite() { (v * DEPTH_PNG_SCALE).round().clamp(0.0, 65535.0) } else { 0.0 };
            (mm as u16).to_ne_bytes()
        })
        .collect();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut out),
        &raw,
        depth.width as u32,
        depth.height as u32,
        image::ExtendedColorType::L16,
    )
    .map_err(|e| Error::InvalidArgument(format!("png encoding: {e}")))?;
    Ok(out)
}

/// Writes PFM for `.pfm` paths and millimetre 16-bit PNG otherwise.
pub fn save_depth(path: &Path, depth: &Image) -> Result<()> {
    let bytes = if is_pfm(path) { encode_pfm(depth)? } else { encode_depth_png(depth)? };
    write(path, &bytes)
}

pub fn load_depth(path: &Path) -> Result<Image> {
    if is_pfm(path) {
        return decode_pfm(path, &read(path)?);
    }
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_luma16().into_raw().into_iter().map(|v| v as f64 / DEPTH_PNG_SCALE).collect();
    Ok(Image {
        width: w,
        height: h,
        channels: 1,
        data,
    })
}

fn is_pfm(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm"))
}

// ------------------------------------------------------------- manifest

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub image: PathBuf,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub reference: PathBuf,
    pub near: f64,
    pub far: f64,
    pub w: usize,
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub views: Vec<ViewEntry>,
    /// Directory the image paths are relative to; set by [`load_scene`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl SceneManifest {
    pub fn validate(&self, path: &Path) -> Result<()> {
        let bad = |reason: String| Error::Manifest {
            path: path.to_path_buf(),
            reason,
        };
        if self.views.is_empty() {
            return Err(bad("at least one view besides the reference is required".into()));
        }
        DepthPlaneSet::new(self.near, self.far, self.d).map_err(|e| bad(e.to_string()))?;
        if self.w == 0 {
            return Err(bad("face size w must be positive".into()));
        }
        for (i, v) in self.views.iter().enumerate() {
            let pose = Pose::from_quaternion(v.rotation, v.translation).map_err(|e| bad(format!("view {i}: {e}")))?;
            if pose.max_abs_translation() >= self.near {
                return Err(bad(format!(
                    "view {i}: translation {:?} leaves the near cube (near = {})",
                    v.translation, self.near
                )));
            }
        }
        Ok(())
    }

    pub fn planes(&self) -> Result<DepthPlaneSet> {
        DepthPlaneSet::new(self.near, self.far, self.d)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Loads the reference panorama and every posed view.
    pub fn load_views(&self) -> Result<(Image, Vec<PosedView>)> {
        let reference = load_panorama(&self.resolve(&self.reference))?;
        let views = self
            .views
            .iter()
            .map(|v| {
                Ok(PosedView {
                    image: load_panorama(&self.resolve(&v.image))?,
                    pose: Pose::from_quaternion(v.rotation, v.translation)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((reference, views))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

pub fn parse_scene(path: &Path, text: &str) -> Result<SceneManifest> {
    let mut m: SceneManifest = toml::from_str(text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        reason: e.message().to_string(),
    })?;
    m.validate(path)?;
    m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(m)
}

pub fn load_scene(path: &Path) -> Result<SceneManifest> {
    parse_scene(path, &read_text(path)?)
}

// ----------------------------------------------------------- trajectory

/// Key poses and the number of frames per segment between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub keys: Vec<Pose>,
    /// Frames per key segment; 1 renders the keys only.
    pub steps: usize,
}

impl Trajectory {
    /// Key poses with `steps − 1` interpolated poses between each pair:
    /// slerp on rotation, linear on translation.
    pub fn frames(&self) -> Vec<Pose> {
        let mut out = Vec::new();
        for pair in self.keys.windows(2) {
            let (q0, q1) = (unit(&pair[0]), unit(&pair[1]));
            for s in 0..self.steps {
                let t = s as f64 / self.steps as f64;
                let q = q0.slerp(&q1, t);
                let tr = pair[0].translation.lerp(&pair[1].translation, t);
                out.push(Pose {
                    rotation: *q.to_rotation_matrix().matrix(),
                    translation: tr,
                });
            }
        }
        out.extend(self.keys.last().cloned());
        out
    }
}

fn unit(p: &Pose) -> UnitQuaternion<f64> {
    let [w, x, y, z] = p.to_quaternion();
    UnitQuaternion::new_normalize(nalgebra::Quaternion::new(w, x, y, z))
}

/// Parses `qw qx qy qz tx ty tz` lines; `#` starts a comment and an
/// `interpolate N` line sets the frames per segment.
pub fn parse_trajectory(path: &Path, text: &str) -> Result<Trajectory> {
    let mut keys = Vec::new();
    let mut steps = 1;
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| Error::format(path, format!("line {}: {reason}", n + 1));
        if let Some(rest) = line.strip_prefix("interpolate") {
            steps = rest
                .trim()
                .parse()
                .ok()
                .filter(|&s: &usize| s > 0)
                .ok_or_else(|| bad("interpolate takes a positive integer".into()))?;
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(e.to_string()))?;
        if v.len() != 7 {
            return Err(bad(format!("expected 7 numbers, found {}", v.len())));
        }
        let pose = Pose::from_quaternion([v[0], v[1], v[2], v[3]], [v[4], v[5], v[6]]).map_err(|e| bad(e.to_string()))?;
        keys.push(pose);
    }
    if keys.is_empty() {
        return Err(Error::format(path, "trajectory has no poses"));
    }
    Ok(Trajectory { keys, steps })
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    parse_trajectory(path, &read_text(path)?)
}

pub fn format_pose(p: &Pose) -> String {
    let q = p.to_quaternion();
    let t: &Vector3<f64> = &p.translation;
    format!("{} {} {} {} {} {} {}", q[0], q[1], q[2], q[3], t.x, t.y, t.z)
}

// ---------------------------------------------------------------- trace

pub const TRACE_HEADER: [&str; 5] = ["iteration", "L1", "SSIM", "edge", "total"];

/// Loss trace CSV; floats use the shortest round-tripping decimal form.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRACE_HEADER).expect("in-memory write");
    for r in trace {
        w.write_record([
            r.iteration.to_string(),
            r.parts.l1.to_string(),
            r.parts.ssim.to_string(),
            r.parts.edge.to_string(),
            r.total.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
}

pub fn save_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(trace_csv(trace).as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(f));
    let bad = |reason: String| Error::format(path, reason);
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().ne(TRACE_HEADER) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(format!("bad number '{}'", &rec[i])));
            Ok(TraceRow {
                iteration: rec[0].parse().map_err(|_| bad(format!("bad iteration '{}'", &rec[0])))?,
                parts: LossParts {
                    l1: num(1)?,
                    ssim: num(2)?,
                    edge: num(3)?,
                },
                total: num(4)?,
            })
        })
        .collect()
}

/// Lists the regular files in `dir` with one of `exts`, sorted by name.
pub fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ok = p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| exts.iter().any(|x| x.eq_ignore_ascii_case(e)));
        if ok && p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blending::FuseWeights;
    use proptest::prelude::*;

    fn f32_exact(v: f64) -> f64 {
        v as f32 as f64
    }

    #[test]
    fn field_round_trip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let planes = DepthPlaneSet::new(1.0, 8.0, 3).unwrap();
        let mpis = std::array::from_fn(|f| {
            Mpi::from_fn(3, 4, |b, x, y, c| f32_exact(0.01 * (f * 97 + b * 31 + x * 7 + y * 3 + c) as f64))
        });
        let field = CubicField::new(mpis, planes).unwrap();
        save_field(dir.path(), &field).unwrap();
        let back = load_field(dir.path()).unwrap();
        assert_eq!(back.mpis, field.mpis);
        assert_eq!(back.planes, field.planes);
        let bytes = fs::read(dir.path().join("face_B.bin")).unwrap();
        assert_eq!(bytes.len(), 3 * 4 * 4 * 4 * 4);
        assert_eq!(&bytes[..4], &(field.mpis[0].data[0] as f32).to_le_bytes());
    }

    #[test]
    fn field_loader_rejects_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_field(dir.path()), Err(Error::MissingFile(_))));
        let field = CubicField::uniform(2, DepthPlaneSet::new(1.0, 2.0, 2).unwrap(), [0.5; 3], 1.0);
        save_field(dir.path(), &field).unwrap();
        fs::write(dir.path().join("face_R.bin"), [0u8; 12]).unwrap();
        assert!(matches!(load_field(dir.path()), Err(Error::Format { .. })));
        fs::write(dir.path().join(FIELD_MANIFEST), "{").unwrap();
        assert!(matches!(load_field(dir.path()), Err(Error::Manifest { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let round = |a: &mut AttentionWeights| {
            for (_, t) in a.tensors_mut() {
                t.iter_mut().for_each(|v| *v = f32_exact(*v));
            }
        };
        let mut w = BlendWeights {
            self_attn: AttentionWeights::seeded(4, 6, 1),
            cross_attn: AttentionWeights::seeded(4, 6, 2),
            erp_pool: ErpPoolWeights::seeded(3, 3),
            fuse: FuseWeights::seeded(4),
        };
        round(&mut w.self_attn);
        round(&mut w.cross_attn);
        w.erp_pool.filters.iter_mut().flatten().for_each(|v| *v = f32_exact(*v));
        w.erp_pool.proj.iter_mut().for_each(|v| *v = f32_exact(*v));
        w.fuse.kernel.iter_mut().for_each(|v| *v = f32_exact(*v));
        save_checkpoint(dir.path(), &w).unwrap();
        assert!(dir.path().join("self_attn.wq.bin").exists());
        assert_eq!(load_checkpoint(dir.path()).unwrap(), w);
    }

    #[test]
    fn pfm_layout_and_round_trip() {
        let d = Image::from_fn(3, 2, 1, |x, y, _| f32_exact(1.0 + x as f64 + 0.1 * y as f64));
        let bytes = encode_pfm(&d).unwrap();
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        // First stored row is the bottom one.
        assert_eq!(&bytes[12..16], &(d.get(0, 1, 0) as f32).to_le_bytes());
        let back = decode_pfm(Path::new("x.pfm"), &bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(encode_pfm(&back).unwrap(), bytes);
        assert!(decode_pfm(Path::new("x.pfm"), &bytes[..bytes.len() - 1]).is_err());
        assert!(decode_pfm(Path::new("x.pfm"), b"PF\n1 1\n-1.0\n\0\0\0\0").is_err());
    }

    #[test]
    fn depth_files_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let d = Image::from_fn(5, 4, 1, |x, y, _| 0.3 + 9.7 * (x * 4 + y) as f64 / 19.0 + 1e-4 / 3.0);
        let pfm = dir.path().join("d.pfm");
        save_depth(&pfm, &d).unwrap();
        let back = load_depth(&pfm).unwrap();
        for (a, b) in back.data.iter().zip(&d.data) {
            assert_eq!(*a, f32_exact(*b));
        }
        let png = dir.path().join("d.png");
        save_depth(&png, &d).unwrap();
        let back = load_depth(&png).unwrap();
        for (a, b) in back.data.iter().zip(&d.data) {
            assert!((a - b).abs() <= 0.5e-3 + 1e-12);
        }
    }

    #[test]
    fn image_round_trip_and_aspect() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(8, 4, 3, |x, y, c| ((x * 31 + y * 17 + c * 5) % 256) as f64 / 255.0);
        let p = dir.path().join("p.png");
        save_image(&p, &img).unwrap();
        assert_eq!(load_panorama(&p).unwrap(), img);
        assert_eq!(fs::read(&p).unwrap(), encode_png(&img).unwrap());
        let q = dir.path().join("q.png");
        save_image(&q, &Image::filled(5, 4, 3, 0.5)).unwrap();
        assert!(matches!(load_panorama(&q), Err(Error::Aspect { .. })));
        assert!(matches!(load_image(&dir.path().join("none.png")), Err(Error::MissingFile(_))));
    }

    const SCENE: &str = r#"
reference = "ref.png"
near = 1.0
far = 10.0
w = 16
d = 8
seed = 7

[[views]]
image = "v0.png"
rotation = [1.0, 0.0, 0.0, 0.0]
translation = [0.1, 0.0, -0.2]
"#;

    #[test]
    fn scene_manifest_parsing() {
        let path = Path::new("/data/room/scene.toml");
        let m = parse_scene(path, SCENE).unwrap();
        assert_eq!((m.w, m.d, m.seed, m.views.len()), (16, 8, 7, 1));
        assert_eq!(m.resolve(&m.views[0].image), Path::new("/data/room/v0.png"));
        let again = parse_scene(path, &m.to_toml()).unwrap();
        assert_eq!(again, m);

        let no_views = SCENE.split("[[views]]").next().unwrap();
        assert!(matches!(parse_scene(path, no_views), Err(Error::Manifest { .. })));
        let outside = SCENE.replace("0.1, 0.0, -0.2", "0.1, 0.0, -1.0");
        assert!(matches!(parse_scene(path, &outside), Err(Error::Manifest { .. })));
        let skew = SCENE.replace("[1.0, 0.0, 0.0, 0.0]", "[1.0, 0.1, 0.0, 0.0]");
        assert!(matches!(parse_scene(path, &skew), Err(Error::Manifest { .. })));
        assert!(matches!(parse_scene(path, "near = "), Err(Error::Manifest { .. })));
    }

    #[test]
    fn trajectory_interpolation() {
        let text = "# path\ninterpolate 4\n1 0 0 0 0 0 0\n0.7071067811865476 0 0.7071067811865476 0  0.4 0 0 # turn\n";
        let t = parse_trajectory(Path::new("t.txt"), text).unwrap();
        let frames = t.frames();
        assert_eq!(frames.len(), 5);
        assert!((frames[2].translation.x - 0.2).abs() < 1e-12);
        // Half way through a 90° turn about y.
        let q = frames[2].to_quaternion();
        let half = (std::f64::consts::PI / 8.0).cos();
        assert!((q[0].abs() - half).abs() < 1e-9);
        assert_eq!(frames[4], t.keys[1]);
        assert!(parse_trajectory(Path::new("t.txt"), "1 0 0 0 0 0").is_err());
        assert!(parse_trajectory(Path::new("t.txt"), "interpolate 0\n1 0 0 0 0 0 0").is_err());
        assert!(parse_trajectory(Path::new("t.txt"), "# empty").is_err());
    }

    proptest! {
        #[test]
        fn trace_csv_round_trips_bit_exactly(
            rows in proptest::collection::vec((any::<f64>(), any::<f64>(), any::<f64>()), 0..20)
        ) {
            let dir = tempfile::tempdir().unwrap();
            let trace: Vec<TraceRow> = rows
                .iter()
                .enumerate()
                .filter(|(_, r)| r.0.is_finite() && r.1.is_finite() && r.2.is_finite())
                .map(|(i, r)| TraceRow {
                    iteration: i,
                    parts: LossParts { l1: r.0, ssim: r.1, edge: r.2 },
                    total: r.0 + r.1,
                })
                .collect();
            let p = dir.path().join("trace.csv");
            save_trace(&p, &trace).unwrap();
            let back = load_trace(&p).unwrap();
            prop_assert_eq!(back.len(), trace.len());
            for (a, b) in back.iter().zip(&trace) {
                prop_assert_eq!(a.parts.l1.to_bits(), b.parts.l1.to_bits());
                prop_assert_eq!(a.total.to_bits(), b.total.to_bits());
            }
        }

        #[test]
        fn pfm_round_trip(v in proptest::collection::vec(-1e6f32..1e6, 1..40)) {
            let w = v.len();
            let d = Image { width: w, height: 1, channels: 1, data: v.iter().map(|&x| x as f64).collect() };
            let back = decode_pfm(Path::new("p.pfm"), &encode_pfm(&d).unwrap()).unwrap();
            prop_assert_eq!(back, d);
        }
    }
}
