//! Volume rendering of color and depth from MPIs, and the two strategies
//! that carry a cubic field to a new viewpoint: per-face planar homography
//! sampling and ray-cube sampling for whole panoramas.
//!
//! Every renderer goes through a [`RaySampler`], which describes, for each
//! output ray and plane, the bilinear taps into the field plus the
//! inter-plane distance and the distance from the ray origin. The same
//! description drives the forward pass and the reverse-mode pass used by the
//! optimizer, so the two cannot drift apart.

use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector4};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{CubicField, DepthPlaneSet, Mpi};
use crate::geometry::{
    dominant_face, erp_pixel_to_sphere, face_bilinear_taps, sphere_to_face_pixel, CubeIntrinsics, ErpGrid, Face,
    Taps,
};
use crate::image::{Cubemap, Image};

/// Rigid pose of a target view relative to the field origin.
///
/// A point `X` expressed in the target view sits at `R·X − t` in the field
/// frame, so the target camera center is at `−t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("pose rotation is not a proper rotation".into()));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("pose translation is not finite".into()));
        }
        Ok(Pose { rotation, translation })
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::from(t),
        }
    }

    /// From a unit quaternion `(w, x, y, z)`; the norm must be 1 within 1e-6.
    pub fn from_quaternion(wxyz: [f64; 4], t: [f64; 3]) -> Result<Self> {
        let v = Vector4::from(wxyz);
        if (v.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "quaternion {wxyz:?} is not unit-norm (|q| = {})",
                v.norm()
            )));
        }
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]));
        Pose::new(q.to_rotation_matrix().into_inner(), Vector3::from(t))
    }

    pub fn to_quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_matrix(&self.rotation);
        [q.w, q.i, q.j, q.k]
    }

    /// Pose that maps this pose's field frame back to its target frame.
    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Target camera center in the field frame.
    pub fn center(&self) -> Vector3<f64> {
        -self.translation
    }

    pub fn max_abs_translation(&self) -> f64 {
        self.translation.amax()
    }
}

/// Rendered color, composited depth and residual transmittance.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub image: Image,
    pub depth: Image,
    pub transmittance_tail: Image,
}

impl RenderOutput {
    fn new(width: usize, height: usize) -> Self {
        RenderOutput {
            image: Image::new(width, height, 3),
            depth: Image::new(width, height, 1),
            transmittance_tail: Image::new(width, height, 1),
        }
    }

    /// True where nothing was absorbed along the ray.
    pub fn empty_mask(&self) -> Vec<bool> {
        self.transmittance_tail.data.iter().map(|&t| t >= 1.0 - 1e-12).collect()
    }
}

/// Six rendered faces plus per-pixel validity.
#[derive(Clone, Debug, PartialEq)]
pub struct CubeRender {
    pub faces: [RenderOutput; 6],
    pub masks: [Vec<bool>; 6],
}

impl CubeRender {
    pub fn images(&self) -> Cubemap {
        Cubemap {
            faces: std::array::from_fn(|i| self.faces[i].image.clone()),
        }
    }

    pub fn depths(&self) -> Cubemap {
        Cubemap {
            faces: std::array::from_fn(|i| self.faces[i].depth.clone()),
        }
    }
}

/// Metric distances between consecutive planes along each face pixel's ray,
/// laid out `[d][w][w]`. The last plane reuses the previous spacing.
pub fn plane_distances(planes: &DepthPlaneSet, intr: &CubeIntrinsics) -> Vec<f64> {
    let w = intr.w;
    let d = planes.len();
    let mut out = vec![0.0; d * w * w];
    for y in 0..w {
        for x in 0..w {
            let scale = intr.unproject(x as f64 + 0.5, y as f64 + 0.5).norm();
            for b in 0..d {
                let dz = if b + 1 < d {
                    planes.z[b + 1] - planes.z[b]
                } else {
                    planes.z[d - 1] - planes.z[d - 2]
                };
                out[(b * w + y) * w + x] = scale * dz;
            }
        }
    }
    out
}

/// Result of compositing one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaySample {
    pub rgb: [f64; 3],
    pub depth: f64,
    pub tail: f64,
}

/// Front-to-back compositing: `w_b = T_b (1 − e^{−σ_b δ_b})`,
/// `T_b = e^{−Σ_{j<b} σ_j δ_j}`; color `Σ w_b c_b`, depth `Σ w_b F_b`.
#[inline]
pub fn composite_ray(samples: &[[f64; 4]], deltas: &[f64], dists: &[f64]) -> RaySample {
    let mut rgb = [0.0; 3];
    let mut depth = 0.0;
    let mut acc = 0.0;
    let mut trans = 1.0;
    for ((s, &delta), &dist) in samples.iter().zip(deltas).zip(dists) {
        acc += s[3] * delta;
        let next = (-acc).exp();
        let wgt = trans - next;
        rgb[0] += wgt * s[0];
        rgb[1] += wgt * s[1];
        rgb[2] += wgt * s[2];
        depth += wgt * dist;
        trans = next;
    }
    RaySample { rgb, depth, tail: trans }
}

/// Per-plane compositing weights `w_b`.
#[inline]
pub fn ray_weights(sigmas: impl Iterator<Item = f64>, deltas: &[f64], out: &mut [f64]) {
    let mut acc = 0.0;
    let mut trans = 1.0;
    for ((s, &delta), o) in sigmas.zip(deltas).zip(out.iter_mut()) {
        acc += s * delta;
        let next = (-acc).exp();
        *o = trans - next;
        trans = next;
    }
}

/// Gradient of `⟨g_rgb, color⟩ + g_depth·depth` with respect to every
/// sample's `(r, g, b, σ)`, written into `out`.
#[inline]
pub fn composite_ray_backward(
    samples: &[[f64; 4]],
    deltas: &[f64],
    dists: &[f64],
    g_rgb: [f64; 3],
    g_depth: f64,
    out: &mut [[f64; 4]],
) {
    let d = samples.len();
    // Per-plane upstream on the weights, then dL/dτ_k = g_k T_{k+1} − Σ_{b>k} g_b w_b.
    let mut trans = [0.0f64; 2];
    let mut acc = 0.0;
    trans[0] = 1.0;
    let mut suffix = 0.0;
    // Forward sweep stores weights in out[..][3] temporarily and T_{b+1} in out[..][0].
    for b in 0..d {
        acc += samples[b][3] * deltas[b];
        let next = (-acc).exp();
        let wgt = trans[0] - next;
        let s = &samples[b];
        let g = g_rgb[0] * s[0] + g_rgb[1] * s[1] + g_rgb[2] * s[2] + g_depth * dists[b];
        out[b] = [next, wgt, g, 0.0];
        trans[0] = next;
    }
    for b in (0..d).rev() {
        let [next, wgt, g, _] = out[b];
        let dtau = g * next - suffix;
        suffix += g * wgt;
        out[b] = [g_rgb[0] * wgt, g_rgb[1] * wgt, g_rgb[2] * wgt, dtau * deltas[b]];
    }
}

/// Gradient of `Σ_b g_b w_b` with respect to each `σ_b`, where `w_b` are the
/// compositing weights of [`ray_weights`].
pub fn ray_weights_backward(sigmas: &[f64], deltas: &[f64], g: &[f64], out: &mut [f64]) {
    let d = sigmas.len();
    let mut acc = 0.0;
    let mut trans = 1.0;
    let mut next_t = vec![0.0; d];
    let mut wgt = vec![0.0; d];
    for b in 0..d {
        acc += sigmas[b] * deltas[b];
        let next = (-acc).exp();
        wgt[b] = trans - next;
        next_t[b] = next;
        trans = next;
    }
    let mut suffix = 0.0;
    for b in (0..d).rev() {
        out[b] = (g[b] * next_t[b] - suffix) * deltas[b];
        suffix += g[b] * wgt[b];
    }
}

/// Composites one face MPI as seen from its own face camera.
pub fn composite(mpi: &Mpi, planes: &DepthPlaneSet, intr: &CubeIntrinsics) -> Result<RenderOutput> {
    let (w, d) = (intr.w, planes.len());
    if mpi.w != w || mpi.d != d {
        return Err(Error::Shape(format!(
            "MPI d={} w={} vs planes d={d} face w={w}",
            mpi.d, mpi.w
        )));
    }
    let deltas = plane_distances(planes, intr);
    let mut out = RenderOutput::new(w, w);
    let mut samples = vec![[0.0; 4]; d];
    let mut dl = vec![0.0; d];
    let mut dist = vec![0.0; d];
    for y in 0..w {
        for x in 0..w {
            let scale = intr.unproject(x as f64 + 0.5, y as f64 + 0.5).norm();
            for b in 0..d {
                samples[b].copy_from_slice(mpi.texel(b, x, y));
                dl[b] = deltas[(b * w + y) * w + x];
                dist[b] = scale * planes.z[b];
            }
            let r = composite_ray(&samples, &dl, &dist);
            write_ray(&mut out, y * w + x, &r);
        }
    }
    Ok(out)
}

fn write_ray(out: &mut RenderOutput, p: usize, r: &RaySample) {
    out.image.data[p * 3..p * 3 + 3].copy_from_slice(&r.rgb);
    out.depth.data[p] = r.depth;
    out.transmittance_tail.data[p] = r.tail;
}

/// Plane-induced homography mapping source pixels of `face` at depth `z` to
/// target pixels: `K (r Rᵀ rᵀ + r Rᵀ t nᵀ / z) K⁻¹` with `n = [0, 0, 1]`.
pub fn homography(face: Face, pose: &Pose, z: f64, intr: &CubeIntrinsics) -> Matrix3<f64> {
    let r = intr.rotation(face);
    let rt_pose = pose.rotation.transpose();
    let rot = r * rt_pose * r.transpose();
    let tn = (r * rt_pose * pose.translation) * Vector3::z().transpose() / z;
    intr.k * (rot + tn) * intr.k_inv
}

/// Describes output rays as bilinear taps into a cubic field.
pub trait RaySampler: Sync {
    fn num_rays(&self) -> usize;

    /// Fills per-plane taps, spacings and distances for ray `r`; returns
    /// whether every plane sample is valid. Invalid planes get empty taps.
    fn ray(&self, r: usize, taps: &mut [Taps], deltas: &mut [f64], dists: &mut [f64]) -> bool;
}

/// Target-face rays sampled through per-plane inverse homographies.
pub struct PlanarSampler<'a> {
    face: Face,
    intr: &'a CubeIntrinsics,
    planes: &'a DepthPlaneSet,
    hinv: Vec<Option<Matrix3<f64>>>,
}

impl<'a> PlanarSampler<'a> {
    pub fn new(field: &'a CubicField, face: Face, pose: &Pose) -> Self {
        let intr = &field.intr;
        let hinv = field
            .planes
            .z
            .iter()
            .map(|&z| {
                let h = homography(face, pose, z, intr);
                let scale = h.abs().max().powi(3).max(f64::MIN_POSITIVE);
                if h.determinant().abs() <= 1e-12 * scale {
                    None
                } else {
                    h.try_inverse()
                }
            })
            .collect();
        PlanarSampler {
            face,
            intr,
            planes: &field.planes,
            hinv,
        }
    }
}

impl RaySampler for PlanarSampler<'_> {
    fn num_rays(&self) -> usize {
        self.intr.w * self.intr.w
    }

    fn ray(&self, r: usize, taps: &mut [Taps], deltas: &mut [f64], dists: &mut [f64]) -> bool {
        let w = self.intr.w;
        let wf = w as f64;
        let (x, y) = (r % w, r / w);
        let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
        let scale = self.intr.unproject(u, v).norm();
        let d = self.planes.len();
        let mut valid = true;
        for b in 0..d {
            let dz = if b + 1 < d {
                self.planes.z[b + 1] - self.planes.z[b]
            } else {
                self.planes.z[d - 1] - self.planes.z[d - 2]
            };
            deltas[b] = scale * dz;
            dists[b] = scale * self.planes.z[b];
            taps[b] = Taps::default();
            let Some(hinv) = &self.hinv[b] else {
                valid = false;
                continue;
            };
            let p = hinv * Vector3::new(u, v, 1.0);
            if !(p.z > 0.0) {
                valid = false;
                continue;
            }
            let (us, vs) = (p.x / p.z, p.y / p.z);
            if !(0.0..=wf).contains(&us) || !(0.0..=wf).contains(&vs) {
                valid = false;
                continue;
            }
            taps[b] = face_bilinear_taps(self.face, us, vs, w);
        }
        valid
    }
}

/// Panorama rays intersected with one nested cube per plane.
pub struct RayCubeSampler<'a> {
    grid: ErpGrid,
    pose: Pose,
    intr: &'a CubeIntrinsics,
    planes: &'a DepthPlaneSet,
}

impl<'a> RayCubeSampler<'a> {
    pub fn new(field: &'a CubicField, pose: &Pose, grid: ErpGrid) -> Result<Self> {
        let near = field.planes.z[0];
        if !(pose.max_abs_translation() < near) {
            return Err(Error::OriginOutsideCube {
                origin: pose.center().into(),
                half_size: near,
            });
        }
        Ok(RayCubeSampler {
            grid,
            pose: *pose,
            intr: &field.intr,
            planes: &field.planes,
        })
    }
}

impl RaySampler for RayCubeSampler<'_> {
    fn num_rays(&self) -> usize {
        self.grid.pixel_count()
    }

    fn ray(&self, r: usize, taps: &mut [Taps], deltas: &mut [f64], dists: &mut [f64]) -> bool {
        let (x, y) = (r % self.grid.width, r / self.grid.width);
        let q = erp_pixel_to_sphere(x as f64 + 0.5, y as f64 + 0.5, &self.grid).q;
        let dir = self.pose.rotation * q;
        let origin = self.pose.center();
        let d = self.planes.len();
        let w = self.intr.w;
        for b in 0..d {
            let rho = exit_distance(&origin, &dir, self.planes.z[b]);
            let p = origin + dir * rho;
            let face = dominant_face(&p);
            let (u, v) = sphere_to_face_pixel(&p, face, self.intr).expect("dominant face is in front");
            taps[b] = face_bilinear_taps(face, u, v, w);
            dists[b] = rho;
        }
        for b in 0..d {
            deltas[b] = if b + 1 < d {
                dists[b + 1] - dists[b]
            } else {
                dists[d - 1] - dists[d - 2]
            };
        }
        true
    }
}

/// Smallest positive slab crossing of `origin + ρ·dir` with the cube
/// `‖x‖∞ = z`, for an origin strictly inside.
#[inline]
fn exit_distance(origin: &Vector3<f64>, dir: &Vector3<f64>, z: f64) -> f64 {
    let mut best = f64::INFINITY;
    for a in 0..3 {
        if dir[a] != 0.0 {
            let bound = if dir[a] > 0.0 { z } else { -z };
            let rho = (bound - origin[a]) / dir[a];
            if rho > 0.0 && rho < best {
                best = rho;
            }
        }
    }
    best
}

/// Intersects the target ray `C(ρ) = −t + ρ R q` with the cube of half-size
/// `z`. Returns the hit point and `ρ_min`.
pub fn ray_cube_intersect(q: &Vector3<f64>, pose: &Pose, z: f64) -> Result<(Vector3<f64>, f64)> {
    if q.norm() == 0.0 {
        return Err(Error::ZeroDirection);
    }
    let t = pose.translation;
    if !(t.amax() < z) {
        return Err(Error::OriginOutsideCube {
            origin: pose.center().into(),
            half_size: z,
        });
    }
    let rq = pose.rotation * q;
    let mut best: Option<f64> = None;
    for a in 0..3 {
        if rq[a] == 0.0 {
            continue;
        }
        for sign in [1.0, -1.0] {
            let rho = (sign * z + t[a]) / rq[a];
            if rho > 0.0 {
                let p = -t + rq * rho;
                if (p.amax() - z).abs() <= 1e-6 * z.max(1.0) && best.is_none_or(|b| rho < b) {
                    best = Some(rho);
                }
            }
        }
    }
    let rho = best.ok_or(Error::ZeroDirection)?;
    Ok((-t + rq * rho, rho))
}

/// Per-ray output of [`render_rays`].
pub struct RayBatch {
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub tail: Vec<f64>,
    pub valid: Vec<bool>,
}

#[inline]
fn gather(field: &CubicField, b: usize, taps: &Taps) -> [f64; 4] {
    let plane = field.w() * field.w();
    let mut s = [0.0; 4];
    for t in taps.as_slice() {
        let base = (b * plane + t.pixel as usize) * 4;
        let src = &field.mpis[t.face as usize].data[base..base + 4];
        for c in 0..4 {
            s[c] += t.weight * src[c];
        }
    }
    s
}

const ROW_BLOCK: usize = 256;

/// Renders every ray of a sampler.
pub fn render_rays<S: RaySampler>(field: &CubicField, sampler: &S) -> RayBatch {
    let n = sampler.num_rays();
    let d = field.d();
    let mut rgb = vec![0.0; n * 3];
    let mut depth = vec![0.0; n];
    let mut tail = vec![0.0; n];
    let mut valid = vec![false; n];
    rgb.par_chunks_mut(ROW_BLOCK * 3)
        .zip(depth.par_chunks_mut(ROW_BLOCK))
        .zip(tail.par_chunks_mut(ROW_BLOCK))
        .zip(valid.par_chunks_mut(ROW_BLOCK))
        .enumerate()
        .for_each(|(blk, (((rgb, depth), tail), valid))| {
            let mut taps = vec![Taps::default(); d];
            let mut deltas = vec![0.0; d];
            let mut dists = vec![0.0; d];
            let mut samples = vec![[0.0; 4]; d];
            for i in 0..depth.len() {
                let r = blk * ROW_BLOCK + i;
                valid[i] = sampler.ray(r, &mut taps, &mut deltas, &mut dists);
                for b in 0..d {
                    samples[b] = gather(field, b, &taps[b]);
                }
                let s = composite_ray(&samples, &deltas, &dists);
                rgb[i * 3..i * 3 + 3].copy_from_slice(&s.rgb);
                depth[i] = s.depth;
                tail[i] = s.tail;
            }
        });
    RayBatch { rgb, depth, tail, valid }
}

/// Accumulates into `grad` (per face, MPI layout) the gradient of
/// `Σ_r ⟨g_rgb[r], color_r⟩ + g_depth[r]·depth_r`.
///
/// Ray blocks are processed in parallel but scattered in a fixed order, so
/// the result does not depend on the thread count.
pub fn backprop_rays<S: RaySampler>(
    field: &CubicField,
    sampler: &S,
    g_rgb: &[f64],
    g_depth: Option<&[f64]>,
    grad: &mut [Vec<f64>; 6],
) {
    let n = sampler.num_rays();
    let d = field.d();
    let plane = field.w() * field.w();
    const BLOCK: usize = 4096;
    let mut start = 0;
    while start < n {
        let end = (start + BLOCK).min(n);
        let parts: Vec<(Vec<Taps>, Vec<[f64; 4]>)> = (start..end)
            .into_par_iter()
            .chunks(ROW_BLOCK)
            .map(|rays| {
                let mut all_taps = Vec::with_capacity(rays.len() * d);
                let mut all_grads = Vec::with_capacity(rays.len() * d);
                let mut taps = vec![Taps::default(); d];
                let mut deltas = vec![0.0; d];
                let mut dists = vec![0.0; d];
                let mut samples = vec![[0.0; 4]; d];
                let mut gs = vec![[0.0; 4]; d];
                for r in rays {
                    let g = [g_rgb[r * 3], g_rgb[r * 3 + 1], g_rgb[r * 3 + 2]];
                    let gd = g_depth.map_or(0.0, |v| v[r]);
                    if g == [0.0; 3] && gd == 0.0 {
                        continue;
                    }
                    sampler.ray(r, &mut taps, &mut deltas, &mut dists);
                    for b in 0..d {
                        samples[b] = gather(field, b, &taps[b]);
                    }
                    composite_ray_backward(&samples, &deltas, &dists, g, gd, &mut gs);
                    all_taps.extend_from_slice(&taps);
                    all_grads.extend_from_slice(&gs);
                }
                (all_taps, all_grads)
            })
            .collect();
        for (taps, grads) in &parts {
            for (k, (t, g)) in taps.iter().zip(grads).enumerate() {
                let b = k % d;
                for tap in t.as_slice() {
                    let base = (b * plane + tap.pixel as usize) * 4;
                    let dst = &mut grad[tap.face as usize][base..base + 4];
                    for c in 0..4 {
                        dst[c] += tap.weight * g[c];
                    }
                }
            }
        }
        start = end;
    }
}

fn batch_to_output(batch: RayBatch, width: usize, height: usize) -> (RenderOutput, Vec<bool>) {
    let out = RenderOutput {
        image: Image {
            width,
            height,
            channels: 3,
            data: batch.rgb,
        },
        depth: Image {
            width,
            height,
            channels: 1,
            data: batch.depth,
        },
        transmittance_tail: Image {
            width,
            height,
            channels: 1,
            data: batch.tail,
        },
    };
    (out, batch.valid)
}

/// Planes of one face resampled into a target view, with per-texel validity.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedMpi {
    pub mpi: Mpi,
    /// `[d][w][w]`; invalid texels carry zero color and density.
    pub valid: Vec<bool>,
}

/// Warps every plane of `face` into the target view of `pose`.
pub fn homography_warp(field: &CubicField, face: Face, pose: &Pose) -> WarpedMpi {
    let sampler = PlanarSampler::new(field, face, pose);
    let (w, d) = (field.w(), field.d());
    let mut mpi = Mpi::zeros(d, w);
    let mut valid = vec![false; d * w * w];
    let mut taps = vec![Taps::default(); d];
    let mut deltas = vec![0.0; d];
    let mut dists = vec![0.0; d];
    for r in 0..w * w {
        sampler.ray(r, &mut taps, &mut deltas, &mut dists);
        for b in 0..d {
            if taps[b].as_slice().is_empty() {
                continue;
            }
            let s = gather(field, b, &taps[b]);
            let i = (b * w * w + r) * 4;
            mpi.data[i..i + 4].copy_from_slice(&s);
            valid[b * w * w + r] = true;
        }
    }
    WarpedMpi { mpi, valid }
}

/// Renders the six target faces of `pose` by planar homography sampling.
pub fn render_novel_cubemap(field: &CubicField, pose: &Pose) -> CubeRender {
    let w = field.w();
    let mut outs: Vec<(RenderOutput, Vec<bool>)> = Face::ALL
        .iter()
        .map(|&face| batch_to_output(render_rays(field, &PlanarSampler::new(field, face, pose)), w, w))
        .collect();
    let masks = std::array::from_fn(|i| std::mem::take(&mut outs[i].1));
    let faces = std::array::from_fn(|i| outs[i].0.clone());
    CubeRender { faces, masks }
}

/// Renders a panorama at `pose` by ray-cube sampling.
pub fn render_novel_panorama(field: &CubicField, pose: &Pose, grid: &ErpGrid) -> Result<RenderOutput> {
    let sampler = RayCubeSampler::new(field, pose, *grid)?;
    Ok(batch_to_output(render_rays(field, &sampler), grid.width, grid.height).0)
}

/// Composites every face of the field from the origin.
pub fn composite_faces(field: &CubicField) -> [RenderOutput; 6] {
    std::array::from_fn(|i| composite(&field.mpis[i], &field.planes, &field.intr).expect("field shapes agree"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::cubemap_to_erp;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(w: usize, d: usize, seed: u64) -> CubicField {
        let planes = DepthPlaneSet::new(1.0, 6.0, d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mpis = std::array::from_fn(|_| {
            Mpi::from_fn(d, w, |_, _, _, c| {
                if c < 3 {
                    rng.random()
                } else {
                    rng.random_range(0.0..2.0)
                }
            })
        });
        CubicField::new(mpis, planes).unwrap()
    }

    #[test]
    fn axial_and_corner_plane_distances() {
        let planes = DepthPlaneSet::new(1.0, 2.0, 2).unwrap();
        let intr = CubeIntrinsics::new(4);
        let delta = plane_distances(&planes, &intr);
        // Center texel of an even face is not on the axis; use the corner
        // formula on the continuous coordinates instead.
        assert_abs_diff_eq!(intr.unproject(2.0, 2.0).norm() * 1.0, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(intr.unproject(0.0, 0.0).norm(), 3f64.sqrt(), epsilon = 1e-15);
        let corner = intr.unproject(0.5, 0.5).norm();
        assert_abs_diff_eq!(delta[0], corner, epsilon = 1e-15);
        assert!(delta.iter().all(|&v| v > 0.0));
        // Odd face: the center texel lies on the axis.
        let intr = CubeIntrinsics::new(5);
        let delta = plane_distances(&planes, &intr);
        assert_abs_diff_eq!(delta[2 * 5 + 2], 1.0, epsilon = 1e-15);
        // Last plane reuses the previous spacing.
        assert_abs_diff_eq!(delta[25 + 12], delta[12], epsilon = 1e-15);
    }

    #[test]
    fn empty_mpi_renders_nothing() {
        let planes = DepthPlaneSet::new(1.0, 4.0, 3).unwrap();
        let intr = CubeIntrinsics::new(3);
        let mpi = Mpi::from_fn(3, 3, |_, _, _, c| if c < 3 { 0.7 } else { 0.0 });
        let out = composite(&mpi, &planes, &intr).unwrap();
        assert!(out.image.data.iter().all(|&v| v == 0.0));
        assert!(out.depth.data.iter().all(|&v| v == 0.0));
        assert!(out.transmittance_tail.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_absorbing_plane_by_hand() {
        // Odd face so the center texel is on the axis (δ = z₂ − z₁ = 1).
        let planes = DepthPlaneSet::new(2.0, 3.0, 2).unwrap();
        let intr = CubeIntrinsics::new(3);
        let ln2 = std::f64::consts::LN_2;
        let mpi = Mpi::from_fn(2, 3, |b, _, _, c| match (b, c) {
            (0, 3) => ln2,
            (0, _) => 1.0,
            _ => 0.0,
        });
        let out = composite(&mpi, &planes, &intr).unwrap();
        let p = 4;
        assert_abs_diff_eq!(out.image.data[p * 3], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out.depth.data[p], 0.5 * 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.transmittance_tail.data[p], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 5;
        let samples: Vec<[f64; 4]> =
            (0..d).map(|_| [rng.random(), rng.random(), rng.random(), rng.random_range(0.0..2.0)]).collect();
        let deltas: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..1.0)).collect();
        let dists: Vec<f64> = (0..d).map(|b| 1.0 + b as f64).collect();
        let g = [0.3, -0.7, 1.1];
        let gd = 0.4;
        let f = |s: &[[f64; 4]]| {
            let r = composite_ray(s, &deltas, &dists);
            g[0] * r.rgb[0] + g[1] * r.rgb[1] + g[2] * r.rgb[2] + gd * r.depth
        };
        let mut out = vec![[0.0; 4]; d];
        composite_ray_backward(&samples, &deltas, &dists, g, gd, &mut out);
        let h = 1e-6;
        for b in 0..d {
            for c in 0..4 {
                let mut p = samples.clone();
                p[b][c] += h;
                let mut m = samples.clone();
                m[b][c] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                assert_abs_diff_eq!(out[b][c], fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn identity_homography_is_exact() {
        let intr = CubeIntrinsics::new(16);
        for f in Face::ALL {
            let h = homography(f, &Pose::identity(), 2.0, &intr);
            assert_eq!(h, Matrix3::identity());
        }
    }

    #[test]
    fn forward_translation_doubles_offsets() {
        // Target center half way to the plane: offsets from the principal
        // point scale by 1/(1 − τ/z) = 2 (field-frame center at +τ along z).
        let z = 2.0;
        let intr = CubeIntrinsics::new(16);
        let pose = Pose::translation([0.0, 0.0, -z / 2.0]);
        let h = homography(Face::F, &pose, z, &intr);
        let p = h * Vector3::new(10.0, 5.0, 1.0);
        assert_abs_diff_eq!(p.x / p.z - 8.0, 2.0 * 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y / p.z - 8.0, 2.0 * -3.0, epsilon = 1e-12);
    }

    #[test]
    fn identity_warp_keeps_everything() {
        let field = random_field(6, 3, 2);
        for f in Face::ALL {
            let warped = homography_warp(&field, f, &Pose::identity());
            assert!(warped.valid.iter().all(|&v| v));
            for (a, b) in warped.mpi.data.iter().zip(&field.mpi(f).data) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn warp_then_inverse_recovers_smooth_planes() {
        let w = 32;
        let planes = DepthPlaneSet::new(1.0, 4.0, 3).unwrap();
        let intr = CubeIntrinsics::new(w);
        let mpis = std::array::from_fn(|fi| {
            Mpi::from_fn(3, w, |b, x, y, c| {
                let q = intr.face_ray(Face::from_index(fi), x as f64 + 0.5, y as f64 + 0.5).normalize();
                0.5 + 0.3 * (q.x + 0.5 * q.y * (c as f64 + 1.0) - 0.2 * b as f64 * q.z).sin()
            })
        });
        let field = CubicField::new(mpis, planes).unwrap();
        let pose = Pose::new(
            nalgebra::Rotation3::from_euler_angles(0.03, -0.02, 0.01).into_inner(),
            Vector3::new(0.05, -0.03, 0.04),
        )
        .unwrap();
        for f in Face::ALL {
            let warped = homography_warp(&field, f, &pose);
            let mut fwd_field = field.clone();
            fwd_field.mpis[f.index()] = warped.mpi.clone();
            let back = homography_warp(&fwd_field, f, &pose.inverse());
            let mut worst: f64 = 0.0;
            for b in 0..3 {
                for y in 4..w - 4 {
                    for x in 4..w - 4 {
                        let i = (b * w + y) * w + x;
                        if !back.valid[i] {
                            continue;
                        }
                        for c in 0..4 {
                            let k = i * 4 + c;
                            worst = worst.max((back.mpi.data[k] - field.mpi(f).data[k]).abs());
                        }
                    }
                }
            }
            assert!(worst < 1e-2, "face {f:?}: {worst}");
        }
    }

    #[test]
    fn identity_cubemap_equals_per_face_composite() {
        let field = random_field(5, 4, 7);
        let cube = render_novel_cubemap(&field, &Pose::identity());
        let direct = composite_faces(&field);
        for i in 0..6 {
            assert!(cube.masks[i].iter().all(|&v| v));
            for (a, b) in cube.faces[i].image.data.iter().zip(&direct[i].image.data) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
            for (a, b) in cube.faces[i].depth.data.iter().zip(&direct[i].depth.data) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn cubemap_render_matches_warp_then_composite() {
        let field = random_field(6, 3, 8);
        let pose = Pose::translation([0.1, -0.05, 0.2]);
        let cube = render_novel_cubemap(&field, &pose);
        for f in Face::ALL {
            let warped = homography_warp(&field, f, &pose);
            let direct = composite(&warped.mpi, &field.planes, &field.intr).unwrap();
            for (a, b) in cube.faces[f.index()].image.data.iter().zip(&direct.image.data) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn large_translation_invalidates_pixels() {
        let field = random_field(8, 3, 3);
        let cube = render_novel_cubemap(&field, &Pose::translation([0.8, 0.0, 0.0]));
        assert!(cube.masks.iter().flatten().any(|&v| !v));
    }

    #[test]
    fn ray_cube_hand_cases() {
        let (p, rho) = ray_cube_intersect(&Vector3::z(), &Pose::identity(), 2.0).unwrap();
        assert_eq!(rho, 2.0);
        assert_eq!(p, Vector3::new(0.0, 0.0, 2.0));
        let (p, rho) = ray_cube_intersect(&Vector3::z(), &Pose::translation([0.0, 0.0, 0.5]), 1.0).unwrap();
        assert_eq!(rho, 1.5);
        assert_eq!(p, Vector3::new(0.0, 0.0, 1.0));
        assert!(ray_cube_intersect(&Vector3::z(), &Pose::translation([0.0, 1.5, 0.0]), 1.0).is_err());
        assert!(ray_cube_intersect(&Vector3::zeros(), &Pose::identity(), 1.0).is_err());
    }

    #[test]
    fn panorama_rejects_pose_outside_near_cube() {
        let field = random_field(4, 3, 4);
        let grid = ErpGrid::new(16, 8).unwrap();
        assert!(render_novel_panorama(&field, &Pose::translation([1.0, 0.0, 0.0]), &grid).is_err());
    }

    #[test]
    fn empty_field_renders_black_panorama() {
        let planes = DepthPlaneSet::new(1.0, 5.0, 4).unwrap();
        let field = CubicField::uniform(4, planes, [0.5; 3], 0.0);
        let grid = ErpGrid::new(32, 16).unwrap();
        let out = render_novel_panorama(&field, &Pose::translation([0.1, 0.2, -0.1]), &grid).unwrap();
        assert!(out.image.data.iter().all(|&v| v == 0.0));
        assert!(out.transmittance_tail.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn opaque_plane_depth_is_cube_distance() {
        let w = 8;
        let planes = DepthPlaneSet::new(1.0, 4.0, 3).unwrap();
        let z = planes.z[1];
        let mpis = std::array::from_fn(|_| Mpi::from_fn(3, w, |b, _, _, c| if c == 3 && b == 1 { 1e4 } else { 0.5 }));
        let mut field = CubicField::new(mpis, planes).unwrap();
        // Zero density on the first plane so the opaque one decides depth.
        for m in field.mpis.iter_mut() {
            for t in m.data[..w * w * 4].chunks_exact_mut(4) {
                t[3] = 0.0;
            }
        }
        let grid = ErpGrid::new(32, 16).unwrap();
        let out = render_novel_panorama(&field, &Pose::identity(), &grid).unwrap();
        for y in 0..16 {
            for x in 0..32 {
                let q = erp_pixel_to_sphere(x as f64 + 0.5, y as f64 + 0.5, &grid).q;
                let expect = z / q.amax();
                assert_abs_diff_eq!(out.depth.data[y * 32 + x], expect, epsilon = 1e-9 * expect);
            }
        }
        // Cube corner directions sit at √3·z.
        let (_, rho) = ray_cube_intersect(&Vector3::new(1.0, 1.0, 1.0).normalize(), &Pose::identity(), z).unwrap();
        assert_abs_diff_eq!(rho, 3f64.sqrt() * z, epsilon = 1e-12);
    }

    #[test]
    fn identity_panorama_matches_resampled_face_composites() {
        let w = 16;
        let planes = DepthPlaneSet::new(1.0, 4.0, 4).unwrap();
        let intr = CubeIntrinsics::new(w);
        let mpis = std::array::from_fn(|fi| {
            Mpi::from_fn(4, w, |b, x, y, c| {
                let q = intr.face_ray(Face::from_index(fi), x as f64 + 0.5, y as f64 + 0.5).normalize();
                if c == 3 {
                    0.3 + 0.2 * b as f64
                } else {
                    0.5 + 0.3 * (2.0 * q.x + q.y * c as f64 + 0.5 * q.z * b as f64).sin()
                }
            })
        });
        let field = CubicField::new(mpis, planes).unwrap();
        let grid = ErpGrid::new(64, 32).unwrap();
        let pano = render_novel_panorama(&field, &Pose::identity(), &grid).unwrap();
        let faces = composite_faces(&field);
        let cube = Cubemap {
            faces: std::array::from_fn(|i| faces[i].image.clone()),
        };
        let via_faces = cubemap_to_erp(&cube, &grid);
        let mad = pano.image.data.iter().zip(&via_faces.data).map(|(a, b)| (a - b).abs()).sum::<f64>()
            / pano.image.data.len() as f64;
        assert!(mad < 2e-2, "{mad}");
    }

    #[test]
    fn rendering_is_linear_in_color() {
        let f1 = random_field(4, 3, 11);
        let mut f2 = f1.clone();
        let mut sum = f1.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for i in 0..6 {
            for (k, v) in f2.mpis[i].data.iter_mut().enumerate() {
                if k % 4 != 3 {
                    *v = rng.random();
                }
            }
            for k in 0..sum.mpis[i].data.len() {
                if k % 4 != 3 {
                    sum.mpis[i].data[k] = f1.mpis[i].data[k] + f2.mpis[i].data[k];
                }
            }
        }
        let grid = ErpGrid::new(16, 8).unwrap();
        let pose = Pose::translation([0.1, 0.0, -0.2]);
        let a = render_novel_panorama(&f1, &pose, &grid).unwrap();
        let b = render_novel_panorama(&f2, &pose, &grid).unwrap();
        let s = render_novel_panorama(&sum, &pose, &grid).unwrap();
        for k in 0..s.image.data.len() {
            assert_abs_diff_eq!(s.image.data[k], a.image.data[k] + b.image.data[k], epsilon = 1e-9);
        }
    }

    fn brute_force_composite(mpi: &Mpi, planes: &DepthPlaneSet, intr: &CubeIntrinsics) -> Vec<[f64; 5]> {
        let (w, d) = (mpi.w, mpi.d);
        let mut out = Vec::new();
        for y in 0..w {
            for x in 0..w {
                let k = intr.k_inv * Vector3::new(x as f64 + 0.5, y as f64 + 0.5, 1.0);
                let point = |b: usize| k * planes.z[b];
                let mut px = [0.0; 5];
                for b in 0..d {
                    let delta = if b + 1 < d {
                        (point(b + 1) - point(b)).norm()
                    } else {
                        (point(d - 1) - point(d - 2)).norm()
                    };
                    let mut trans = 1.0;
                    for j in 0..b {
                        let dj = if j + 1 < d { (point(j + 1) - point(j)).norm() } else { delta };
                        trans *= (-mpi.texel(j, x, y)[3] * dj).exp();
                    }
                    let alpha = 1.0 - (-mpi.texel(b, x, y)[3] * delta).exp();
                    for c in 0..3 {
                        px[c] += trans * alpha * mpi.texel(b, x, y)[c];
                    }
                    px[3] += trans * alpha * point(b).norm();
                }
                let mut tail = 1.0;
                for b in 0..d {
                    let delta = if b + 1 < d { (point(b + 1) - point(b)).norm() } else { (point(d - 1) - point(d - 2)).norm() };
                    tail *= (-mpi.texel(b, x, y)[3] * delta).exp();
                }
                px[4] = tail;
                out.push(px);
            }
        }
        out
    }

    #[test]
    fn composite_matches_brute_force_loop() {
        let field = random_field(2, 4, 21);
        for f in Face::ALL {
            let got = composite(field.mpi(f), &field.planes, &field.intr).unwrap();
            let want = brute_force_composite(field.mpi(f), &field.planes, &field.intr);
            for (p, px) in want.iter().enumerate() {
                for c in 0..3 {
                    assert_abs_diff_eq!(got.image.data[p * 3 + c], px[c], epsilon = 1e-6);
                }
                assert_abs_diff_eq!(got.depth.data[p], px[3], epsilon = 1e-6);
                assert_abs_diff_eq!(got.transmittance_tail.data[p], px[4], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn ray_cube_agrees_with_ray_march() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10_000 {
            let z = rng.random_range(0.5..4.0);
            let t = [0; 3].map(|_| rng.random_range(-0.9..0.9) * z);
            let q = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if q.norm() < 1e-3 {
                continue;
            }
            let q = q.normalize();
            let rot = nalgebra::Rotation3::new(Vector3::new(rng.random_range(-1.0..1.0), rng.random(), rng.random()));
            let pose = Pose::new(rot.into_inner(), Vector3::from(t)).unwrap();
            let (p, rho) = ray_cube_intersect(&q, &pose, z).unwrap();
            assert!((p.amax() - z).abs() <= 1e-6 * z);
            let step = 1e-3 * z;
            let dir = pose.rotation * q;
            let mut s = 0.0;
            while (pose.center() + dir * (s + step)).amax() < z {
                s += step;
            }
            assert!(rho >= s - 1e-9 && rho <= s + step + 1e-9, "rho {rho} march {s}");
        }
    }

    #[test]
    fn planar_and_ray_cube_agree_for_small_poses() {
        let w = 32;
        let planes = DepthPlaneSet::new(1.0, 5.0, 6).unwrap();
        let intr = CubeIntrinsics::new(w);
        let mpis = std::array::from_fn(|fi| {
            Mpi::from_fn(6, w, |b, x, y, c| {
                let q = intr.face_ray(Face::from_index(fi), x as f64 + 0.5, y as f64 + 0.5).normalize();
                if c == 3 {
                    0.2 + 0.1 * b as f64
                } else {
                    0.5 + 0.3 * (1.5 * q.x + q.y * (c as f64 + 0.5) - q.z * 0.7).sin()
                }
            })
        });
        let field = CubicField::new(mpis, planes).unwrap();
        let grid = ErpGrid::new(128, 64).unwrap();
        let pose = Pose::new(
            nalgebra::Rotation3::from_euler_angles(0.02, -0.03, 0.01).into_inner(),
            Vector3::new(0.05, -0.04, 0.06),
        )
        .unwrap();
        let pano = render_novel_panorama(&field, &pose, &grid).unwrap();
        let cube = render_novel_cubemap(&field, &pose);
        let via = cubemap_to_erp(&cube.images(), &grid);
        let mask_cube = Cubemap {
            faces: std::array::from_fn(|i| Image {
                width: w,
                height: w,
                channels: 1,
                data: cube.masks[i].iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
            }),
        };
        let mask = cubemap_to_erp(&mask_cube, &grid);
        let mut sum = 0.0;
        let mut n = 0;
        for p in 0..grid.pixel_count() {
            if mask.data[p] >= 1.0 - 1e-12 {
                for c in 0..3 {
                    sum += (pano.image.data[p * 3 + c] - via.data[p * 3 + c]).abs();
                    n += 1;
                }
            }
        }
        assert!(n > grid.pixel_count());
        let mad = sum / n as f64;
        assert!(mad < 2e-2, "{mad}");
    }

    proptest::proptest! {
        #[test]
        fn compositing_weights_partition_unity(
            sig in proptest::collection::vec(0.0f64..5.0, 1..12),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = sig.len();
            let samples: Vec<[f64; 4]> = sig.iter().map(|&s| [rng.random(), rng.random(), rng.random(), s]).collect();
            let deltas: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..2.0)).collect();
            let dists = vec![1.0; d];
            let mut w = vec![0.0; d];
            ray_weights(sig.iter().copied(), &deltas, &mut w);
            let r = composite_ray(&samples, &deltas, &dists);
            proptest::prop_assert!((w.iter().sum::<f64>() + r.tail - 1.0).abs() < 1e-6);
            proptest::prop_assert!(w.iter().all(|&v| v >= 0.0));
            proptest::prop_assert!(r.rgb.iter().all(|&v| (0.0..=1.0).contains(&v)));
            proptest::prop_assert!((r.depth - (1.0 - r.tail)).abs() < 1e-9);
        }
    }

    #[test]
    fn pose_validation() {
        assert!(Pose::from_quaternion([1.0, 0.0, 0.0, 0.1], [0.0; 3]).is_err());
        let p = Pose::from_quaternion([0.5f64.sqrt(), 0.0, 0.5f64.sqrt(), 0.0], [0.1, 0.2, 0.3]).unwrap();
        let back = p.to_quaternion();
        assert_abs_diff_eq!(back[0], 0.5f64.sqrt(), epsilon = 1e-12);
        let inv = p.inverse();
        let x = Vector3::new(0.3, -0.2, 1.1);
        let field_point = p.rotation * x - p.translation;
        assert_abs_diff_eq!((inv.rotation * field_point - inv.translation - x).norm(), 0.0, epsilon = 1e-12);
        assert!(Pose::new(Matrix3::from_diagonal_element(2.0), Vector3::zeros()).is_err());
    }
}
